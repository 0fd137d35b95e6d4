use std::path::{Path, PathBuf};
use std::process::Command;

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_static_library() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib_dir = target_dir();
    let archive = lib_dir.join("libcalmreminder_ffi.a");
    assert!(archive.is_file(), "{} not built", archive.display());

    let target = std::env::var("TARGET").unwrap_or_else(|_| "x86_64-unknown-linux-gnu".to_string());
    let compiler = cc::Build::new().cargo_metadata(false).opt_level(0).target(&target).host(&target).get_compiler();
    let out = tempfile::tempdir().unwrap();
    let exe = out.path().join("smoke");
    let status = compiler
        .to_command()
        .args(["-std=c99", "-Wall", "-Wextra", "-Werror"])
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&archive)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");

    let run = Command::new(&exe).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "{}{}", stdout, String::from_utf8_lossy(&run.stderr));
    assert_eq!(stdout.trim(), "ok");
}

#[test]
fn header_is_current() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/calmreminder.h")).unwrap();
    for name in [
        "cr_compute_energy",
        "cr_model_fit",
        "cr_model_predict",
        "cr_model_params",
        "cr_model_free",
        "cr_service_open",
        "cr_service_set_time",
        "cr_service_register",
        "cr_service_ingest",
        "cr_service_pending_json",
        "cr_service_respond_json",
        "cr_service_metrics_json",
        "cr_service_free",
        "cr_string_free",
        "cr_last_error",
        "CR_STATUS_INSUFFICIENT_COVERAGE = 8",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
