use std::sync::Arc;

use calmreminder::policy::{Condition, PromptEvent, PromptState, SurveyKind};
use calmreminder::sensing::{windows_to_csv_bytes, EnergyWindow};
use calmreminder::server::{
    router, AppState, DeviceStatus, HttpHub, Hub, IngestOutcome, ItemValue, MetricsSummary, Participant, Service,
    ServiceConfig, ServiceError, SurveyResponse, TickReport, UploadStatus,
};
use calmreminder::simkit::{resumable_upload, TransportReport};
use calmreminder::time::{Timestamp, VirtualClock, MINUTE_MS};
use serde_json::{json, Value};

// 2025-03-02T12:00:00Z, a Sunday
const T0: i64 = 1_740_916_800_000;

struct Server {
    base: String,
    hub: HttpHub,
    svc: Arc<Service>,
    clock: VirtualClock,
    _rt: tokio::runtime::Runtime,
}

fn start(virtual_clock: bool) -> Server {
    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
    let clock = VirtualClock::new(Timestamp::from_millis(T0));
    let svc = Arc::new(Service::in_memory(ServiceConfig::default(), Arc::new(clock.clone())));
    let app = router(AppState { service: svc.clone(), virtual_clock: virtual_clock.then(|| clock.clone()) });
    let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0")).unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    rt.spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server { hub: HttpHub::new(&base), base, svc, clock, _rt: rt }
}

fn remote_status<T: std::fmt::Debug>(r: Result<T, ServiceError>) -> (u16, String) {
    match r {
        Err(ServiceError::Remote { status, kind, .. }) => (status, kind),
        other => panic!("expected a remote error, got {other:?}"),
    }
}

fn set_clock(s: &Server, at: Timestamp) -> TickReport {
    s.hub.post("/clock", &json!({ "now": at })).unwrap()
}

#[test]
fn health_and_registration() {
    let s = start(true);
    let health: Value = s.hub.get("/health").unwrap();
    assert_eq!(health["ok"], true);

    let p = s.hub.register("family-a", -300).unwrap();
    assert_eq!(p.display_alias, "family-a");
    assert_eq!(p.utc_offset.minutes(), -300);
    let (status, kind) = remote_status(s.hub.register("family-a", 0));
    assert_eq!((status, kind.as_str()), (409, "duplicate_alias"));

    let all: Vec<Participant> = s.hub.get("/participants").unwrap();
    assert_eq!(all.len(), 1);
    let one: Value = s.hub.get(&format!("/participants/{}", p.id.get())).unwrap();
    assert_eq!(one["participant"]["display_alias"], "family-a");
    assert_eq!(remote_status(s.hub.get::<Value>("/participants/99")).0, 404);
    assert_eq!(remote_status(s.hub.get::<Value>("/participants/xyz")).0, 422);

    let (status, kind) = remote_status(s.hub.post::<_, Value>("/participants", &json!({ "alias": "family-b" })));
    assert_eq!((status, kind.as_str()), (422, "validation"));
}

#[test]
fn prompts_answers_and_expiry_over_http() {
    let s = start(true);
    let p = s.hub.register("family-b", 0).unwrap();
    let day1 = p.utc_offset.midnight(p.study_start);
    let _: Value = s
        .hub
        .post(
            &format!("/participants/{}/condition", p.id.get()),
            &json!({ "condition": "hourly", "effective_at": day1 }),
        )
        .unwrap();

    let report = set_clock(&s, p.utc_offset.at(p.study_start, 9, 0));
    assert!(report.prompts_sent >= 2, "{report:?}");
    let pending = s.hub.pending(p.id).unwrap();
    let kinds: Vec<SurveyKind> = pending.iter().map(|e| e.kind).collect();
    assert_eq!(kinds, vec![SurveyKind::Intraday], "08:00 has expired by 09:00; 09:00 is pending");
    let e = &pending[0];
    assert_eq!(e.condition_at_send, Condition::Hourly);

    let answer = SurveyResponse::new(e.id.clone()).with("activity", ItemValue::Rating(2));
    let outcome = s.hub.respond(&answer).unwrap();
    assert_eq!(outcome.transition.to, PromptState::Answered);
    let (status, kind) = remote_status(s.hub.respond(&answer));
    assert_eq!((status, kind.as_str()), (409, "not_pending"));

    set_clock(&s, p.utc_offset.at(p.study_start, 10, 0));
    let late = s.hub.pending(p.id).unwrap().remove(0);
    s.clock.set(late.expires_at);
    let (status, kind) =
        remote_status(s.hub.respond(&SurveyResponse::new(late.id.clone()).with("activity", ItemValue::Rating(3))));
    assert_eq!((status, kind.as_str()), (410, "expired"));

    let detail: Value = s.hub.get(&format!("/events/{}", late.id)).unwrap();
    assert_eq!(detail["event"]["state"], "expired");
    assert!(detail["response"].is_null());
    let events: Vec<PromptEvent> = s.hub.get(&format!("/participants/{}/events", p.id.get())).unwrap();
    assert!(events.iter().any(|x| x.id == e.id && x.state == PromptState::Answered));

    let backwards = s.hub.post::<_, Value>("/clock", &json!({ "now": Timestamp::from_millis(T0) }));
    assert_eq!(remote_status(backwards).0, 422);
}

#[test]
fn answer_validation_is_reported_as_422() {
    let s = start(true);
    let p = s.hub.register("family-c", 0).unwrap();
    let day1 = p.utc_offset.midnight(p.study_start);
    s.svc.switch_condition(p.id, Condition::Hourly, day1).unwrap();
    set_clock(&s, p.utc_offset.at(p.study_start, 8, 0));
    let e = s.hub.pending(p.id).unwrap().remove(0);
    for items in [json!({ "activity": 9 }), json!({}), json!({ "activity": 2, "mood": 1 })] {
        let body = json!({ "event_id": e.id, "items": items });
        let r = s.hub.post::<_, Value>(&format!("/events/{}/response", e.id), &body);
        assert_eq!(remote_status(r), (422, "validation".to_string()), "{items}");
    }
}

#[test]
fn window_ingest_conflicts_and_open_windows() {
    let s = start(true);
    let p = s.hub.register("family-d", 0).unwrap();
    let w = EnergyWindow::present(p.id, Timestamp::from_millis(T0 - 10 * MINUTE_MS), 0.25, 120);
    assert_eq!(s.hub.ingest(&w).unwrap(), IngestOutcome::Inserted);
    assert_eq!(s.hub.ingest(&w).unwrap(), IngestOutcome::Duplicate);
    let changed = EnergyWindow::present(p.id, w.window_start, 0.5, 120);
    assert_eq!(remote_status(s.hub.ingest(&changed)).0, 409);
    let open = EnergyWindow::present(p.id, Timestamp::from_millis(T0), 0.1, 10);
    assert_eq!(remote_status(s.hub.ingest(&open)).0, 422);
    let stranger = EnergyWindow::present(calmreminder::ParticipantId::new(42), w.window_start, 0.1, 10);
    assert_eq!(remote_status(s.hub.ingest(&stranger)).0, 404);
}

#[test]
fn resumable_upload_over_http() {
    let s = start(true);
    let p = s.hub.register("family-e", 0).unwrap();
    let windows: Vec<EnergyWindow> = (0..200)
        .map(|i| EnergyWindow::present(p.id, Timestamp::from_millis(T0 - (i + 1) * 5 * MINUTE_MS), 0.01 * i as f64, 30))
        .collect();
    let payload = windows_to_csv_bytes(&windows);
    let mut report = TransportReport::default();
    let r = resumable_upload(&s.hub, p.id, &payload, 333, &mut report).unwrap();
    assert_eq!((r.ingested, r.duplicates), (200, 0));
    assert_eq!(s.svc.windows(p.id).unwrap().len(), 200);

    let again = s.hub.finish_upload(&r.status.as_ref().unwrap().session_id).unwrap();
    assert_eq!(again, r, "a retried finish returns the first report");

    let status = s.hub.open_upload(p.id, payload.len() as u64, &calmreminder::server::sha256_hex(&payload)).unwrap();
    s.hub.put_chunk(&status.session_id, 0, &payload[..100]).unwrap();
    let resp = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .new_agent()
        .post(&format!("{}/uploads/{}/finish", s.base, status.session_id))
        .send_empty()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 422);
    let body: Value = serde_json::from_str(&resp.into_body().read_to_string().unwrap()).unwrap();
    assert_eq!(body["error"], "incomplete");
    assert_eq!(body["missing"], json!([[100, payload.len()]]));

    let no_offset = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .new_agent()
        .put(&format!("{}/uploads/{}/chunks", s.base, status.session_id))
        .send(&b"x"[..])
        .unwrap();
    assert_eq!(no_offset.status().as_u16(), 422);
    let st: UploadStatus = s.hub.get(&format!("/uploads/{}", status.session_id)).unwrap();
    assert_eq!(st.received, vec![(0, 100)]);
}

#[test]
fn device_pin_and_activity() {
    let s = start(true);
    let p = s.hub.register("family-f", 0).unwrap();
    let base = format!("/participants/{}", p.id.get());
    let st: DeviceStatus =
        s.hub.post("/device-status", &json!({ "participant_id": p.id, "battery_pct": 77, "recording": true })).unwrap();
    assert_eq!((st.battery_pct, st.recording), (Some(77), true));
    assert_eq!(remote_status(s.hub.post::<_, Value>(&format!("{base}/stop"), &json!({ "pin": "1234" }))).0, 403);
    let short = s.hub.post::<_, Value>(&format!("{base}/pin"), &json!({ "pin": "12" }));
    assert_eq!(remote_status(short).0, 422);
    let _: () = s.hub.post(&format!("{base}/pin"), &json!({ "pin": "4321" })).unwrap();
    assert_eq!(remote_status(s.hub.post::<_, Value>(&format!("{base}/stop"), &json!({ "pin": "1234" }))).0, 403);
    let _: () = s.hub.post(&format!("{base}/stop"), &json!({ "pin": "4321" })).unwrap();
    let st: DeviceStatus = s.hub.get(&format!("{base}/device")).unwrap();
    assert!(!st.recording && st.pin_set);

    let _: () = s.hub.post(&format!("{base}/active"), &json!({ "active": false })).unwrap();
    let w = EnergyWindow::present(p.id, Timestamp::from_millis(T0 - 10 * MINUTE_MS), 0.2, 10);
    assert_eq!(remote_status(s.hub.ingest(&w)), (409, "inactive".to_string()));
}

#[test]
fn dashboard_surfaces() {
    let s = start(true);
    let p = s.hub.register("family-g", 0).unwrap();
    s.svc.switch_condition(p.id, Condition::Hourly, p.utc_offset.midnight(p.study_start)).unwrap();
    set_clock(&s, p.utc_offset.at(p.study_start, 21, 0));

    let m: MetricsSummary = s.hub.get("/metrics").unwrap();
    assert_eq!(m.condition(Condition::Hourly).intraday.sent, 12);
    assert_eq!(m.condition(Condition::Hourly).end_of_day.sent, 1);
    let filtered: MetricsSummary = s
        .hub
        .get(&format!(
            "/metrics?participant={}&to_ms={}",
            p.id.get(),
            p.utc_offset.at(p.study_start, 12, 0).as_millis()
        ))
        .unwrap();
    assert_eq!(filtered.condition(Condition::Hourly).intraday.sent, 4);

    let resp = ureq::get(&format!("{}/events.ndjson", s.base)).call().unwrap();
    assert_eq!(resp.headers().get("content-type").unwrap(), "application/x-ndjson");
    let text = resp.into_body().read_to_string().unwrap();
    assert_eq!(text.lines().count(), 25, "12 hourly prompts, their expiries and one end-of-day survey");
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["participant_id"], json!(p.id));
    }

    let models: Value = s.hub.get("/models").unwrap();
    assert!(models.is_object() || models.is_array());
    let labels: Vec<Value> = s.hub.get("/labels").unwrap();
    assert!(labels.is_empty());
    let clock: Value = s.hub.get("/clock").unwrap();
    assert_eq!(clock["virtual"], true);
    let tick: TickReport = s.hub.post("/tick", &json!({})).unwrap();
    assert_eq!(tick.prompts_sent, 0);
}

#[test]
fn system_clock_refuses_clock_moves() {
    let s = start(false);
    let r = s.hub.post::<_, Value>("/clock", &json!({ "now": Timestamp::from_millis(T0 + 1) }));
    assert_eq!(remote_status(r), (409, "conflict".to_string()));
}
