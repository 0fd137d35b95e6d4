//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use chrono::{Days, NaiveDate};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestError, TestRunner};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use calmreminder::calibration::{evaluate_split, fit_points, CalibrationModel, PerceptionLabel, Scope};
use calmreminder::policy::{
    make_schedule, BlockState, Condition, ConditionSwitch, ConditionTimeline, Decision, ParticipantScheduler,
    PolicyConfig, PromptEvent, PromptState, RateLimiterState, StudyCalendar, SurveyKind,
};
use calmreminder::report::{render_study, report_from_log};
use calmreminder::sensing::{
    compute_energy, lookback_mean, windows_to_csv_bytes, AccelSample, EnergyWindow, LookbackFeature,
};
use calmreminder::server::survey::{instrument, ItemType, Presence};
use calmreminder::server::{
    sha256_hex, FlakyHub, ItemValue, Participant, Service, ServiceConfig, ServiceError, StoredEvent, SurveyResponse,
    UploadSession,
};
use calmreminder::simkit::study::check_invariants;
use calmreminder::simkit::{resumable_upload, run_study, synthetic_cohort, StudyOptions, TransportReport};
use calmreminder::time::{Timestamp, UtcOffset, VirtualClock, HOUR_MS, MINUTE_MS};
use calmreminder::ParticipantId;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

const WINDOW_MS: i64 = 5 * MINUTE_MS;

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("energy and lookback properties", energy_and_lookback),
        ("least squares matches a numeric minimizer", ols_matches_minimizer),
        ("noiseless labels give R2 = 1", noiseless_r2),
        ("scheduler invariants over 10k participant-days", scheduler_invariants),
        ("12-family simulated study outcomes", study_outcomes),
        ("resumable uploads under transport faults", transport_fuzz),
        ("prompt expiry boundaries and races", expiry_boundaries),
        ("counterbalanced week 3/4 order", counterbalancing),
        ("crash and restart durability", durability),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn within(limit: Duration, started: Instant, what: &str) -> Result<(), String> {
    let took = started.elapsed();
    ensure!(took < limit, "{what} took {took:?}, limit {limit:?}");
    Ok(())
}

fn prop<T: std::fmt::Debug>(name: &str, r: Result<(), TestError<T>>) -> Result<(), String> {
    r.map_err(|e| format!("{name}: {e}"))
}

// ---- 1 ---------------------------------------------------------------------

fn energy_and_lookback() -> Outcome {
    let started = Instant::now();
    let pid = ParticipantId::new(1);
    let start = Timestamp::from_millis(1_740_000_000_000 / WINDOW_MS * WINDOW_MS);
    let mut runner = TestRunner::new(Config { cases: 256, failure_persistence: None, ..Config::default() });

    let offsets = proptest::collection::btree_set(0..WINDOW_MS, 1..200);
    let r = runner.run(&(0.0f64..8.0, offsets.clone(), any::<u64>()), |(a, offs, signs)| {
        let samples: Vec<AccelSample> = offs
            .iter()
            .enumerate()
            .map(|(i, &o)| {
                let s = |bit: usize| if signs >> ((3 * i + bit) % 64) & 1 == 0 { a } else { -a };
                AccelSample::new(start.as_millis() + o, s(0), s(1), s(2))
            })
            .collect();
        let w = compute_energy(pid, &samples, start).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let e = w.energy.unwrap();
        prop_assert!((e - a).abs() <= 1e-12, "energy {e} for constant magnitude {a}");
        Ok(())
    });
    prop("constant magnitude", r)?;

    let axes = proptest::collection::vec((-4.0f64..4.0, -4.0f64..4.0, -4.0f64..4.0), 1..120);
    let r = runner.run(&(axes.clone(), any::<u64>(), 0.01f64..100.0), |(vals, seed, c)| {
        let t = |i: usize| start.as_millis() + i as i64 * 1000;
        let base: Vec<AccelSample> =
            vals.iter().enumerate().map(|(i, v)| AccelSample::new(t(i), v.0, v.1, v.2)).collect();
        let mut perm = vals.clone();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled: Vec<AccelSample> =
            perm.iter().enumerate().map(|(i, v)| AccelSample::new(t(i), v.0, v.1, v.2)).collect();
        let scaled: Vec<AccelSample> =
            vals.iter().enumerate().map(|(i, v)| AccelSample::new(t(i), c * v.0, c * v.1, c * v.2)).collect();
        let e = |s: &[AccelSample]| compute_energy(pid, s, start).unwrap().energy.unwrap();
        let (e0, e1, e2) = (e(&base), e(&shuffled), e(&scaled));
        prop_assert!((e0 - e1).abs() <= 1e-12 * e0.max(1.0), "permutation changed energy {e0} -> {e1}");
        prop_assert!((e2 - c * e0).abs() <= 1e-9 * (c * e0).max(1.0), "scaling by {c}: {e2} vs {}", c * e0);
        Ok(())
    });
    prop("permutation and homogeneity", r)?;

    let windows = proptest::collection::vec((-20i64..20, proptest::option::weighted(0.85, 0.0f64..3.0)), 0..40);
    let r = runner.run(&(windows, -2i64..3), |(ws, shift)| {
        let as_of = start.plus_millis(shift * WINDOW_MS);
        let ws: Vec<EnergyWindow> = ws
            .iter()
            .map(|&(k, e)| {
                let at = start.plus_millis(k * WINDOW_MS);
                match e {
                    Some(e) => EnergyWindow::present(pid, at, e, 10),
                    None => EnergyWindow::absent(pid, at),
                }
            })
            .collect();
        let f = lookback_mean(&ws, as_of);
        let inside: Vec<f64> = ws
            .iter()
            .filter(|w| w.window_start >= as_of.minus_millis(HOUR_MS) && w.window_start < as_of)
            .filter_map(|w| w.energy)
            .collect();
        prop_assert_eq!(f.windows_present as usize, inside.len());
        let mean = if inside.is_empty() { 0.0 } else { inside.iter().sum::<f64>() / inside.len() as f64 };
        prop_assert!((f.mean_energy - mean).abs() <= 1e-12);
        let mut with_edges = ws.clone();
        with_edges.push(EnergyWindow::present(pid, as_of, 1e6, 10));
        with_edges.push(EnergyWindow::present(pid, as_of.minus_millis(HOUR_MS + WINDOW_MS), 1e6, 10));
        prop_assert_eq!(lookback_mean(&with_edges, as_of), f, "windows outside the lookback changed the feature");
        Ok(())
    });
    prop("half-open lookback", r)?;

    within(Duration::from_secs(5), started, "sensing properties")?;
    Ok("768 generated cases".into())
}

// ---- 2 ---------------------------------------------------------------------

fn sse(points: &[(f64, f64)], b: f64, a: f64) -> f64 {
    points.iter().map(|&(x, y)| (y - b * x - a).powi(2)).sum()
}

/// Minimum of a convex function on `[lo, hi]` by golden-section search.
fn golden(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut c, mut d) = (hi - r * (hi - lo), lo + r * (hi - lo));
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - r * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + r * (hi - lo);
            fd = f(d);
        }
        if hi - lo <= f64::EPSILON * (lo.abs() + hi.abs()).max(1e-300) {
            break;
        }
    }
    (lo + hi) / 2.0
}

fn ols_matches_minimizer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let n = rng.random_range(3..=50);
        let spread = if case % 4 == 0 { 10.0 } else { 0.6 };
        let pts: Vec<(f64, f64)> =
            (0..n).map(|_| (rng.random_range(0.0..spread), rng.random_range(1..=5) as f64)).collect();
        let (b, a) = fit_points(&pts).map_err(|e| e.to_string())?;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
        let bound = (syy / sxx).sqrt() + 1.0;
        let inner = |b: f64| {
            let r: Vec<f64> = pts.iter().map(|&(x, y)| y - b * x).collect();
            let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let a = golden(lo, hi, |a| sse(&pts, b, a));
            (a, sse(&pts, b, a))
        };
        let b_star = golden(-bound, bound, |b| inner(b).1);
        let oracle = inner(b_star).1;
        let ours = sse(&pts, b, a);
        ensure!(ours <= oracle + 1e-6 && oracle <= ours + 1e-6, "case {case}: SSE {ours} vs oracle {oracle}");
        worst = worst.max((ours - oracle).abs());
    }
    for n in [2usize, 7, 50] {
        let x = rng.random_range(0.0..1.0);
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (x, rng.random_range(1..=5) as f64)).collect();
        let mean = pts.iter().map(|p| p.1).sum::<f64>() / n as f64;
        let (b, a) = fit_points(&pts).map_err(|e| e.to_string())?;
        ensure!(b == 0.0 && a == mean, "constant x: slope {b} intercept {a}, mean {mean}");
    }
    Ok(format!("200 datasets, max SSE gap {worst:.2e}; constant x gives slope 0"))
}

// ---- 3 ---------------------------------------------------------------------

fn noiseless_r2() -> Outcome {
    let pid = ParticipantId::new(3);
    let mut worst: f64 = 0.0;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(10..80);
        let labels: Vec<PerceptionLabel> = (0..n)
            .map(|i| {
                let rating = rng.random_range(1..=5u8);
                let as_of = Timestamp::from_millis(1_740_000_000_000 + i * HOUR_MS);
                let feature = LookbackFeature { as_of, mean_energy: (rating as f64 - 1.0) / 10.0, windows_present: 12 };
                PerceptionLabel::new(pid, rating, feature, 6).unwrap()
            })
            .collect();
        let report = evaluate_split(&labels, 0.8, seed).map_err(|e| e.to_string())?;
        let Some(r2) = report.r_squared else { continue };
        ensure!((r2 - 1.0).abs() <= 1e-9, "seed {seed}: R2 {r2}");
        worst = worst.max((r2 - 1.0).abs());
    }
    Ok(format!("200 seeds, max |R2 - 1| {worst:.1e}"))
}

// ---- 4 ---------------------------------------------------------------------

fn scheduler_invariants() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut days = 0u32;
    let mut prompts = 0usize;
    let mut per_condition: BTreeMap<Condition, usize> = BTreeMap::new();
    let mut pid_raw = 0;
    while days < 10_080 {
        pid_raw += 1;
        let pid = ParticipantId::new(pid_raw);
        let offset = UtcOffset::from_minutes(rng.random_range(-48..=56) * 15).unwrap();
        let study_start = NaiveDate::from_ymd_opt(2025, 1, 1).unwrap() + Days::new(rng.random_range(0..700));
        let cal = StudyCalendar::new(study_start);
        let weeks: Vec<Condition> = (0..4).map(|_| *Condition::ALL.choose(&mut rng).unwrap()).collect();
        let mut timeline = ConditionTimeline::new(cal, offset, weeks);
        if rng.random_bool(0.3) {
            let day = rng.random_range(0..cal.total_days() as u64);
            let condition = *Condition::ALL.choose(&mut rng).unwrap();
            timeline
                .add_switch(ConditionSwitch { condition, effective_at: offset.midnight(study_start + Days::new(day)) });
        }
        let cfg = PolicyConfig { threshold: rng.random_range(1.5..4.5), ..PolicyConfig::default() };
        let model = rng.random_bool(0.9).then(|| CalibrationModel {
            scope: Scope::Participant(pid),
            slope: rng.random_range(2.0..12.0),
            intercept: rng.random_range(0.5..2.5),
            n_train: 20,
            fitted_at: Timestamp::default(),
        });
        let feature_seed: u64 = rng.random();
        let feature = move |as_of: Timestamp| {
            let mut r = ChaCha8Rng::seed_from_u64(feature_seed ^ as_of.as_millis() as u64);
            LookbackFeature { as_of, mean_energy: r.random_range(0.0..0.5), windows_present: r.random_range(0..=12) }
        };

        let from = offset.midnight(study_start).minus_millis(24 * HOUR_MS);
        let until = offset.midnight(cal.end_date()).plus_millis(48 * HOUR_MS);
        let drive = |chunks: &mut dyn FnMut() -> i64| {
            let mut sched = ParticipantScheduler::new(pid, offset, 99, cfg.clone());
            let mut limiter = RateLimiterState::new(pid);
            let mut events = Vec::new();
            let mut cursor = from;
            while cursor < until {
                let to = cursor.plus_millis(chunks()).min(until);
                for action in sched.actions_between(&timeline, cursor, to) {
                    if let Decision::Emit(e) = sched.decide(action, &timeline, &limiter, feature, model.as_ref()) {
                        if e.kind == SurveyKind::Intraday {
                            limiter.record(e.sent_at, e.sent_at.local_date(offset));
                        }
                        events.push(e);
                    }
                }
                cursor = to;
            }
            events
        };
        let mut chunk_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let events = drive(&mut || match chunk_rng.random_range(0..4) {
            0 => chunk_rng.random_range(1..=5) * MINUTE_MS,
            1 => chunk_rng.random_range(1..=120) * MINUTE_MS,
            2 => chunk_rng.random_range(1..=36) * HOUR_MS,
            _ => chunk_rng.random_range(1..=600_000),
        });
        let one_shot = drive(&mut || i64::MAX / 4);
        ensure!(events == one_shot, "{pid}: chunked scheduling differs from a single pass");

        let participant = Participant {
            id: pid,
            display_alias: format!("p{pid_raw}"),
            utc_offset: offset,
            enrolled_at: from,
            study_start,
            schedule: make_schedule(pid, &mut BlockState::new(1)),
            active: true,
        };
        let condition_of = |d: NaiveDate| timeline.condition_at(offset.at(d, 12, 0)).unwrap_or(Condition::None);
        let mut violations = Vec::new();
        check_invariants(&participant, &events, &cfg, condition_of, &mut violations);
        if let Some(v) = violations.first() {
            return Err(format!(
                "{} violations, first: {} {}: {}",
                violations.len(),
                v.participant_id,
                v.rule,
                v.detail
            ));
        }
        for d in cal.dates() {
            *per_condition.entry(condition_of(d)).or_default() += 1;
        }
        days += cal.total_days();
        prompts += events.len();
    }
    for c in Condition::ALL {
        ensure!(per_condition.get(&c).copied().unwrap_or(0) > 500, "too few {c} days: {per_condition:?}");
    }
    within(Duration::from_secs(60), started, "scheduler invariants")?;
    Ok(format!("{days} participant-days, {prompts} prompts, {pid_raw} participants"))
}

// ---- 5 ---------------------------------------------------------------------

fn study_outcomes() -> Outcome {
    let started = Instant::now();
    let profiles = synthetic_cohort(12, 0.3, 42);
    let run = run_study(&profiles, &StudyOptions { seed: 42, ..StudyOptions::default() }).map_err(|e| e.to_string())?;
    let r = &run.report;
    within(Duration::from_secs(60), started, "study run")?;
    ensure!(r.violations.is_empty(), "{} invariant violations", r.violations.len());
    ensure!(r.conservation_ok, "window conservation broken");
    let ratio = |c| r.metrics.condition(c).perceived_calm_ratio.unwrap_or(f64::NAN);
    let (calm, random, hourly) = (ratio(Condition::CalmOnly), ratio(Condition::Random), ratio(Condition::Hourly));
    let p = r.personalization.as_ref().ok_or("no personalization report")?;
    let global = p.global.r_squared.ok_or("global R2 undefined")?;
    let personal = p.mean_personalized_r2.ok_or("personalized R2 undefined")?;
    let detail = format!(
        "calm-only {:.1}%, random {:.1}%, hourly {:.1}%, global R2 {global:.3}, personalized R2 {personal:.3}",
        calm * 100.0,
        random * 100.0,
        hourly * 100.0
    );
    ensure!(calm >= 0.70, "calm-only ratio below 70%: {detail}");
    ensure!((random - hourly).abs() <= 0.08, "random and hourly differ by more than 8 points: {detail}");
    ensure!(personal > global, "personalized R2 does not beat global: {detail}");
    Ok(detail)
}

// ---- 6 ---------------------------------------------------------------------

/// Sends `payload` as shuffled, partly duplicated chunks, some of which are
/// first cut off mid-chunk. Returns the chunk list in send order.
fn fuzz_chunks(rng: &mut ChaCha8Rng, len: usize) -> Vec<(usize, usize)> {
    let mut cuts = vec![0, len];
    for _ in 0..rng.random_range(0..12.min(len)) {
        cuts.push(rng.random_range(0..=len));
    }
    cuts.sort_unstable();
    cuts.dedup();
    let mut sends = Vec::new();
    for pair in cuts.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if b - a > 1 && rng.random_bool(0.3) {
            sends.push((a, rng.random_range(a + 1..b)));
        }
        sends.push((a, b));
        if rng.random_bool(0.2) {
            sends.push((a, b));
        }
    }
    sends.shuffle(rng);
    sends
}

fn transport_fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let t0 = Timestamp::from_millis(1_700_000_100_000 / WINDOW_MS * WINDOW_MS);
    let clock = Arc::new(VirtualClock::new(t0));
    let svc = Service::in_memory(ServiceConfig::default(), clock.clone());
    let pid = svc.register_participant("fuzz", 0).map_err(|e| e.to_string())?.id;
    clock.set(t0.plus_millis(2_000_000 * WINDOW_MS));

    let mut blocks: Vec<Vec<EnergyWindow>> = Vec::new();
    let mut expected: BTreeMap<Timestamp, EnergyWindow> = BTreeMap::new();
    let mut next = t0;
    let mut flaky_sessions = 0;
    let mut transport = TransportReport::default();
    for session in 0..1000 {
        let n = rng.random_range(1..=60);
        let block: Vec<EnergyWindow> = (0..n)
            .map(|i| {
                let at = next.plus_millis(i * WINDOW_MS);
                if rng.random_bool(0.1) {
                    EnergyWindow::absent(pid, at)
                } else {
                    EnergyWindow::present(pid, at, rng.random_range(0.0..2.0), rng.random_range(1..=1500))
                }
            })
            .collect();
        next = next.plus_millis(n * WINDOW_MS);
        let mut rows = block.clone();
        let mut resent = 0;
        if !blocks.is_empty() && rng.random_bool(0.3) {
            let old = &blocks[rng.random_range(0..blocks.len())];
            resent = old.len();
            rows.extend(old.iter().cloned());
            rows.shuffle(&mut rng);
        }
        for w in &block {
            expected.insert(w.window_start, w.clone());
        }
        blocks.push(block);
        let payload = windows_to_csv_bytes(&rows);
        let checksum = sha256_hex(&payload);

        let report = if session % 4 == 3 {
            flaky_sessions += 1;
            let hub = FlakyHub::new(&svc, rng.random(), 0.3);
            resumable_upload(&hub, pid, &payload, rng.random_range(16..512), &mut transport)
                .map_err(|e| format!("session {session}: {e}"))?
        } else {
            let sends = fuzz_chunks(&mut rng, payload.len());
            let mut local = UploadSession::new(format!("local-{session}"), pid, payload.len() as u64, checksum.clone())
                .map_err(|e| e.to_string())?;
            let id = svc.open_upload(pid, payload.len() as u64, &checksum).map_err(|e| e.to_string())?.session_id;
            for &(a, b) in &sends {
                local.write_chunk(a as u64, &payload[a..b]).map_err(|e| e.to_string())?;
                svc.put_chunk(&id, a as u64, &payload[a..b]).map_err(|e| e.to_string())?;
            }
            let bytes = local.finish().map_err(|e| format!("session {session}: {e}"))?;
            ensure!(bytes == payload.as_slice(), "session {session}: reassembled bytes differ");
            svc.finish_upload(&id).map_err(|e| format!("session {session}: {e}"))?
        };
        ensure!(
            report.ingested as usize == n as usize
                && report.duplicates as usize == resent
                && report.rejected == 0
                && report.conflicts == 0,
            "session {session}: {report:?}, expected {n} new and {resent} duplicates"
        );
    }
    let stored = svc.windows(pid).map_err(|e| e.to_string())?;
    let want: Vec<EnergyWindow> = expected.into_values().collect();
    ensure!(stored == want, "stored {} windows, generated {}", stored.len(), want.len());
    Ok(format!(
        "1000 sessions ({flaky_sessions} over a 30% fault hub, {} chunk retries), {} windows stored once",
        transport.chunk_retries,
        stored.len()
    ))
}

// ---- 7 ---------------------------------------------------------------------

fn full_answer(kind: SurveyKind, week: u32) -> BTreeMap<String, ItemValue> {
    instrument(kind)
        .iter()
        .filter(|s| s.presence == Presence::Required || (s.presence == Presence::FromWeekTwo && week > 1))
        .map(|s| {
            let v = match s.item_type {
                ItemType::Rating { .. } => ItemValue::Rating(2),
                ItemType::YesNo => ItemValue::YesNo(true),
                ItemType::Text => ItemValue::Text("ok".into()),
            };
            (s.key.to_string(), v)
        })
        .collect()
}

fn respond(svc: &Service, e: &PromptEvent, week: u32) -> Result<(), ServiceError> {
    let mut r = SurveyResponse::new(e.id.clone());
    r.items = full_answer(e.kind, week);
    svc.submit_response(&e.id, r).map(|_| ())
}

/// A service whose participants are in the hourly condition from study day 1.
fn hourly_service(aliases: &[&str]) -> (Service, Arc<VirtualClock>, Vec<Participant>) {
    let t0 = Timestamp::from_millis(1_740_916_800_000);
    let clock = Arc::new(VirtualClock::new(t0));
    let svc = Service::in_memory(ServiceConfig::default(), clock.clone());
    let ps: Vec<Participant> = aliases.iter().map(|a| svc.register_participant(a, 0).unwrap()).collect();
    for p in &ps {
        svc.switch_condition(p.id, Condition::Hourly, p.utc_offset.midnight(p.study_start)).unwrap();
    }
    (svc, clock, ps)
}

fn pending_of(svc: &Service, pid: ParticipantId, kind: SurveyKind) -> PromptEvent {
    svc.events(pid).unwrap().into_iter().rev().find(|e| e.kind == kind && e.is_pending()).expect("a pending prompt")
}

fn transitions_of(svc: &Service, e: &PromptEvent) -> usize {
    svc.log_records()
        .iter()
        .filter(|r| matches!(r, StoredEvent::PromptTransitioned { transition, .. } if transition.event_id == e.id))
        .count()
}

fn expiry_boundaries() -> Outcome {
    let (svc, clock, ps) = hourly_service(&["early", "late"]);
    let (a, b) = (ps[0].id, ps[1].id);
    let day1 = ps[0].study_start;
    let cases = [
        (SurveyKind::Intraday, ps[0].utc_offset.at(day1, 8, 0), 30 * MINUTE_MS),
        (SurveyKind::EndOfDay, ps[0].utc_offset.at(day1 + Days::new(1), 20, 0), 12 * HOUR_MS),
        (SurveyKind::EndOfWeek, ps[0].utc_offset.at(day1 + Days::new(6), 20, 0), 48 * HOUR_MS),
    ];
    for (kind, send_at, lifetime) in cases {
        clock.set(send_at);
        svc.tick().map_err(|e| e.to_string())?;
        let (ea, eb) = (pending_of(&svc, a, kind), pending_of(&svc, b, kind));
        ensure!(ea.sent_at == send_at && ea.expires_at == send_at.plus_millis(lifetime), "{kind:?}: {ea:?}");
        clock.set(ea.expires_at.minus_millis(1));
        respond(&svc, &ea, 1).map_err(|e| format!("{kind:?} answer 1 ms before expiry rejected: {e}"))?;
        clock.set(eb.expires_at);
        match respond(&svc, &eb, 1) {
            Err(ServiceError::Expired { .. }) => {}
            other => return Err(format!("{kind:?} answer at expiry: {other:?}")),
        }
        ensure!(svc.event(&ea.id).unwrap().state == PromptState::Answered, "{kind:?} early answer not recorded");
        ensure!(svc.event(&eb.id).unwrap().state == PromptState::Expired, "{kind:?} late prompt not expired");
        ensure!(svc.response(&eb.id).unwrap().is_none(), "{kind:?} late answer stored");
        ensure!(transitions_of(&svc, &ea) == 1 && transitions_of(&svc, &eb) == 1, "{kind:?}: duplicate transitions");
    }

    let rounds = 300;
    let (mut answered, mut expired) = (0, 0);
    for round in 0..rounds {
        let (svc, clock, ps) = hourly_service(&["race"]);
        let pid = ps[0].id;
        clock.set(ps[0].utc_offset.at(ps[0].study_start, 8, 0));
        svc.tick().unwrap();
        let e = pending_of(&svc, pid, SurveyKind::Intraday);
        clock.set(e.expires_at.minus_millis(1));
        let gate = Barrier::new(3);
        let (r1, r2) = std::thread::scope(|s| {
            let submit = || {
                gate.wait();
                respond(&svc, &e, 1)
            };
            let h1 = s.spawn(submit);
            let h2 = s.spawn(submit);
            s.spawn(|| {
                gate.wait();
                for _ in 0..(round % 60) * 3000 {
                    std::hint::spin_loop();
                }
                clock.set(e.expires_at);
                svc.tick().unwrap();
            });
            (h1.join().unwrap(), h2.join().unwrap())
        });
        let oks = [&r1, &r2].iter().filter(|r| r.is_ok()).count();
        let state = svc.event(&e.id).unwrap().state;
        ensure!(oks <= 1, "round {round}: two answers accepted");
        ensure!(transitions_of(&svc, &e) == 1, "round {round}: {} transitions", transitions_of(&svc, &e));
        match (oks, state) {
            (1, PromptState::Answered) => answered += 1,
            (0, PromptState::Expired) => expired += 1,
            _ => return Err(format!("round {round}: {oks} accepted but state {state}; {r1:?} {r2:?}")),
        }
        ensure!(
            svc.response(&e.id).unwrap().is_some() == (state == PromptState::Answered),
            "round {round}: response mismatch"
        );
        let replay = Service::from_events(&svc.log_records(), Arc::new(VirtualClock::new(svc.now()))).unwrap();
        ensure!(replay.event(&e.id).unwrap().state == state, "round {round}: replay disagrees");
    }
    Ok(format!("rejected at expires_at, accepted 1 ms earlier; {rounds} races: {answered} answered, {expired} expired"))
}

// ---- 8 ---------------------------------------------------------------------

fn counterbalancing() -> Outcome {
    let both: BTreeSet<(Condition, Condition)> =
        [(Condition::Random, Condition::CalmOnly), (Condition::CalmOnly, Condition::Random)].into();
    let pair_ok =
        |a: (Condition, Condition), b: (Condition, Condition)| [a, b].into_iter().collect::<BTreeSet<_>>() == both;
    let mut random_first = 0;
    for seed in 0..1000u64 {
        let mut st = BlockState::new(seed);
        let a = make_schedule(ParticipantId::new(1), &mut st);
        let b = make_schedule(ParticipantId::new(2), &mut st);
        ensure!(pair_ok(a.late_order(), b.late_order()), "seed {seed}: block lacks an order");
        ensure!(
            a.conditions()[..2] == [Condition::None, Condition::Hourly],
            "seed {seed}: weeks 1-2 {:?}",
            a.conditions()
        );
        random_first += (a.late_order().0 == Condition::Random) as u32;
    }
    ensure!((400..=600).contains(&random_first), "first of block random-first in {random_first}/1000 seeds");

    let mut st = BlockState::new(8);
    for block in 0..1000u32 {
        let a = make_schedule(ParticipantId::new(2 * block + 1), &mut st);
        let b = make_schedule(ParticipantId::new(2 * block + 2), &mut st);
        ensure!(a.assignment_block == block && b.assignment_block == block, "block numbering");
        ensure!(pair_ok(a.late_order(), b.late_order()), "block {block} lacks an order");
    }

    let svc = Service::in_memory(
        ServiceConfig::default(),
        Arc::new(VirtualClock::new(Timestamp::from_millis(1_740_916_800_000))),
    );
    let ps: Vec<Participant> = (0..40).map(|i| svc.register_participant(&format!("f{i}"), 0).unwrap()).collect();
    for pair in ps.chunks(2) {
        ensure!(
            pair_ok(pair[0].schedule.late_order(), pair[1].schedule.late_order()),
            "registrations {} and {}",
            pair[0].id,
            pair[1].id
        );
    }
    Ok(format!(
        "1000 seeds x 1 block and 1000 blocks x 1 seed balanced; first-of-block random-first {random_first}/1000"
    ))
}

// ---- 9 ---------------------------------------------------------------------

fn durability() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let profiles = synthetic_cohort(6, 0.3, 9);
    let opts = |name: &str, restart: Option<u64>| StudyOptions {
        seed: 9,
        store_path: Some(dir.path().join(name)),
        restart_at_minute: restart,
        ..StudyOptions::default()
    };
    let straight = run_study(&profiles, &opts("straight.ndjson", None)).map_err(|e| e.to_string())?;
    let restart_minute = 15 * 24 * 60 + 8 * 60 + 17;
    let restarted = run_study(&profiles, &opts("restarted.ndjson", Some(restart_minute))).map_err(|e| e.to_string())?;
    ensure!(restarted.report.restarts == 1, "expected one restart, got {}", restarted.report.restarts);
    let mut r = restarted.report.clone();
    r.restarts = 0;
    ensure!(r.metrics == straight.report.metrics, "metrics differ after restart");
    let (text_a, text_b) = (render_study(&straight.report), render_study(&r));
    if let Some((a, b)) = text_a.lines().zip(text_b.lines()).find(|(a, b)| a != b) {
        return Err(format!("rendered report differs after restart: {a:?} vs {b:?}"));
    }
    ensure!(text_a == text_b, "rendered report length differs after restart");
    if r != straight.report {
        let (a, b) = (serde_json::to_value(&straight.report).unwrap(), serde_json::to_value(&r).unwrap());
        let fields: Vec<&String> =
            a.as_object().unwrap().iter().filter(|(k, v)| b.get(k.as_str()) != Some(v)).map(|(k, _)| k).collect();
        return Err(format!("study report differs after restart in {fields:?}"));
    }

    let log = dir.path().join("straight.ndjson");
    let torn = dir.path().join("torn.ndjson");
    let mut bytes = std::fs::read(&log).map_err(|e| e.to_string())?;
    bytes.extend_from_slice(br#"{"type":"prompt_transitioned","participant_id":1,"transi"#);
    std::fs::write(&torn, &bytes).map_err(|e| e.to_string())?;
    let clean = report_from_log(&log).map_err(|e| e.to_string())?;
    let after = report_from_log(&torn).map_err(|e| format!("torn log: {e}"))?;
    ensure!(
        after.metrics == clean.metrics
            && after.labels == clean.labels
            && after.records == clean.records
            && after.gaps == clean.gaps,
        "torn tail changed the report"
    );
    Ok(format!("restart at minute {restart_minute} reproduces the run; torn tail ignored ({} records)", clean.records))
}
