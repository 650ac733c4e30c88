use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::{to_bytes, Body};
use axum::http::{header, HeaderMap, Method, Request, StatusCode};
use axum::Router;
use cerberus_core::cascade::{anomaly_score, process_stream, write_verdicts, CascadeConfig, Mode, PreparedPool, SharedPool, VerdictRecord};
use cerberus_core::eval::compute_report;
use cerberus_core::evolution::{apply_uil, enqueue_uil, FeedbackQueue, UilDecision};
use cerberus_core::rulebase::{load_rulebase, save_rulebase, RuleBase, RuleKind, RuleStore};
use cerberus_core::synth::{Scenario, SynthConfig};
use cerberus_service::{router, AppState, ServiceConfig, ServiceError, VERSION_HEADER};
use proptest::prelude::*;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

struct Fixture {
    dir: TempDir,
    config: ServiceConfig,
    records: Vec<VerdictRecord>,
}

struct Detected {
    rulebase: RuleBase,
    records: Vec<VerdictRecord>,
    scenario: Scenario,
}

fn detect(frames: usize, dump: Option<&Path>) -> Detected {
    let scenario = Scenario::generate(SynthConfig { frames, anomaly_fraction: 0.2, ..SynthConfig::default() }).unwrap();
    let backends = scenario.backends();
    let pools = SharedPool::new(PreparedPool::build(&scenario.rulebase, &backends).unwrap());
    let mut config = CascadeConfig::new(Mode::Both, scenario.rulebase.params.clone());
    config.dump_prompts = dump.map(Path::to_path_buf);
    let (records, _) = process_stream(&scenario.frames, &scenario.store, &pools, &backends, &config).unwrap();
    Detected { rulebase: scenario.rulebase.clone(), records, scenario }
}

fn shared_detection() -> &'static Detected {
    static CELL: OnceLock<Detected> = OnceLock::new();
    CELL.get_or_init(|| detect(60, None))
}

fn write_fixture(rulebase: &RuleBase, records: &[VerdictRecord], seed_queue: bool, dir: TempDir) -> Fixture {
    let p = dir.path();
    save_rulebase(rulebase, p.join("rulebase.json")).unwrap();
    write_verdicts(p.join("verdicts.jsonl"), records).unwrap();
    let mut queue = FeedbackQueue::open(p.join("queue.jsonl")).unwrap();
    if seed_queue {
        queue.enqueue(enqueue_uil(records)).unwrap();
    }
    let config = ServiceConfig::new(p.join("rulebase.json"), p.join("verdicts.jsonl"), p.join("queue.jsonl"));
    Fixture { dir, config, records: records.to_vec() }
}

fn fixture(seed_queue: bool) -> Fixture {
    let d = shared_detection();
    write_fixture(&d.rulebase, &d.records, seed_queue, TempDir::new().unwrap())
}

fn app(config: &ServiceConfig) -> Router {
    router(Arc::new(AppState::open(config.clone()).unwrap()))
}

struct Reply {
    status: StatusCode,
    headers: HeaderMap,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap()
    }

    fn version(&self) -> u64 {
        self.headers[VERSION_HEADER].to_str().unwrap().parse().unwrap()
    }
}

async fn call(app: &Router, method: Method, uri: &str, headers: &[(&str, &str)], body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    Reply { status, headers, body }
}

async fn get(app: &Router, uri: &str) -> Reply {
    call(app, Method::GET, uri, &[], None).await
}

async fn post(app: &Router, uri: &str, body: Value) -> Reply {
    call(app, Method::POST, uri, &[], Some(body)).await
}

#[tokio::test]
async fn empty_queue_lists_nothing() {
    let f = fixture(false);
    let r = get(&app(&f.config), "/api/feedback/pending").await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.body, b"[]");
}

#[tokio::test]
async fn health_and_rulebase() {
    let f = fixture(true);
    let app = app(&f.config);
    let h = get(&app, "/api/health").await;
    assert_eq!(h.status, StatusCode::OK);
    assert_eq!(h.json()["verdicts"], f.records.len());
    assert!(h.json()["pending_uil"].as_u64().unwrap() > 0);

    let rb = get(&app, "/api/rulebase").await.json();
    let expected = load_rulebase(&f.config.rulebase).unwrap();
    assert_eq!(rb["version"], expected.version);
    assert_eq!(rb["counts"]["normal"], expected.normal_rules.len());
    assert_eq!(rb["counts"]["custom"], 0);
    assert_eq!(rb["counts"]["perturbed"], expected.perturbed_labels.len());
}

#[tokio::test]
async fn every_response_carries_the_version() {
    let mut f = fixture(true);
    let v = load_rulebase(&f.config.rulebase).unwrap().version;
    f.config.token = Some("t0k".into());
    let app = app(&f.config);
    for uri in ["/api/health", "/api/rulebase", "/api/timeline?scene=nope", "/api/metrics/latest", "/frames/x.png"] {
        let r = get(&app, uri).await;
        assert_eq!(r.version(), v, "{uri}");
    }
}

#[tokio::test]
async fn bearer_token_required_when_configured() {
    let mut f = fixture(true);
    f.config.token = Some("t0k".into());
    let app = app(&f.config);
    assert_eq!(get(&app, "/api/health").await.status, StatusCode::OK);
    let r = get(&app, "/api/rulebase").await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    assert_eq!(r.json()["error"], "unauthorized");
    let wrong = call(&app, Method::GET, "/api/rulebase", &[("authorization", "Bearer nope")], None).await;
    assert_eq!(wrong.status, StatusCode::UNAUTHORIZED);
    let ok = call(&app, Method::GET, "/api/rulebase", &[("authorization", "Bearer t0k")], None).await;
    assert_eq!(ok.status, StatusCode::OK);
}

#[tokio::test]
async fn confirm_with_rule_bumps_version_once() {
    let f = fixture(true);
    let app = app(&f.config);
    let pending = get(&app, "/api/feedback/pending").await.json();
    let id = pending[0]["id"].as_u64().unwrap();
    let before = load_rulebase(&f.config.rulebase).unwrap().version;

    let r = post(&app, &format!("/api/feedback/{id}"), json!({ "decision": "confirm", "rule_text": "loitering is anomalous" })).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["rulebase_version"], before + 1);
    assert_eq!(r.json()["status"], "applied");
    assert_eq!(r.version(), before + 1);

    let rb = load_rulebase(&f.config.rulebase).unwrap();
    assert_eq!(rb.version, before + 1);
    assert_eq!(rb.custom_anomaly_rules[0].text, "loitering is anomalous");

    let again = post(&app, &format!("/api/feedback/{id}"), json!({ "decision": "confirm" })).await;
    assert_eq!(again.status, StatusCode::CONFLICT);
    assert_eq!(again.json()["error"], "already_decided");

    let after = get(&app, "/api/feedback/pending").await.json();
    assert_eq!(after.as_array().unwrap().len(), pending.as_array().unwrap().len() - 1);
    assert!(after.as_array().unwrap().iter().all(|i| i["id"] != id));
}

#[tokio::test]
async fn reject_routes_to_fine_to_coarse() {
    let f = fixture(true);
    let app = app(&f.config);
    let id = get(&app, "/api/feedback/pending").await.json()[0]["id"].as_u64().unwrap();
    let r = post(&app, &format!("/api/feedback/{id}"), json!({ "decision": "reject" })).await;
    assert_eq!(r.status, StatusCode::OK);
    let routed = r.json()["routed_to"].as_u64().unwrap();
    let f2c = get(&app, "/api/feedback/pending?kind=f2c").await.json();
    let item = f2c.as_array().unwrap().iter().find(|i| i["id"] == routed).unwrap();
    assert_eq!(item["origin_item"], id);
    assert_eq!(item["kind"], "f2c_candidate");
}

#[tokio::test]
async fn decision_errors() {
    let f = fixture(true);
    let app = app(&f.config);
    assert_eq!(post(&app, "/api/feedback/9999", json!({ "decision": "reject" })).await.status, StatusCode::NOT_FOUND);
    assert_eq!(post(&app, "/api/feedback/abc", json!({ "decision": "reject" })).await.status, StatusCode::BAD_REQUEST);
    assert_eq!(post(&app, "/api/feedback/1", json!({ "decision": "maybe" })).await.status, StatusCode::BAD_REQUEST);
    let stale =
        call(&app, Method::POST, "/api/feedback/1", &[("if-match", "\"0\"")], Some(json!({ "decision": "confirm", "rule_text": "x" })))
            .await;
    assert_eq!(stale.status, StatusCode::CONFLICT);
    assert_eq!(stale.json()["error"], "stale_version");
}

#[tokio::test]
async fn pending_evidence_and_etag() {
    let f = fixture(true);
    let app = app(&f.config);
    let r = get(&app, "/api/feedback/pending").await;
    let etag = r.headers[header::ETAG].to_str().unwrap().to_string();
    let items = r.json();
    let k = load_rulebase(&f.config.rulebase).unwrap().params.k;
    for item in items.as_array().unwrap() {
        let topk = item["topk"].as_array().unwrap();
        assert!(!topk.is_empty() && topk.len() <= k);
        assert!(topk.iter().all(|e| e["text"].is_string()));
        assert!(item["evidence"]["anomaly_score"].is_number());
    }

    let cached = call(&app, Method::GET, "/api/feedback/pending", &[("if-none-match", &etag)], None).await;
    assert_eq!(cached.status, StatusCode::NOT_MODIFIED);
    assert!(cached.body.is_empty());

    let id = items[0]["id"].as_u64().unwrap();
    post(&app, &format!("/api/feedback/{id}"), json!({ "decision": "confirm", "rule_text": "loitering is anomalous" })).await;
    let fresh = call(&app, Method::GET, "/api/feedback/pending", &[("if-none-match", &etag)], None).await;
    assert_eq!(fresh.status, StatusCode::OK);
    assert_ne!(fresh.headers[header::ETAG].to_str().unwrap(), etag);
    // Verdicts now predate the rulebase, so candidate texts are withheld.
    let item = &fresh.json()[0];
    assert!(item["topk"].as_array().unwrap().iter().all(|e| e.get("text").is_none()));
}

#[tokio::test]
async fn timeline_points_and_ranges() {
    let dir = TempDir::new().unwrap();
    let d = detect(20, None);
    let f = write_fixture(&d.rulebase, &d.records, false, dir);
    let app = app(&f.config);
    let r = get(&app, "/api/timeline?scene=synthetic").await;
    assert_eq!(r.status, StatusCode::OK);
    let points = r.json();
    let points = points.as_array().unwrap();
    assert_eq!(points.len(), 20);
    for (p, rec) in points.iter().zip(&f.records) {
        assert_eq!(p["frame_id"], rec.frame_id.as_str());
        assert_eq!(p["anomaly_score"].as_f64().unwrap(), anomaly_score(rec));
        assert_eq!(p["final_label"], serde_json::to_value(rec.final_label).unwrap());
    }
    let seqs: Vec<u64> = points.iter().map(|p| p["seq"].as_u64().unwrap()).collect();
    assert!(seqs.windows(2).all(|w| w[0] <= w[1]));

    let window = get(&app, "/api/timeline?scene=synthetic&from=5&to=10").await.json();
    assert_eq!(window.as_array().unwrap().len(), 5);
    assert_eq!(window[0], points[5]);

    assert_eq!(get(&app, "/api/timeline?scene=elsewhere").await.status, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/api/timeline").await.status, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/api/timeline?scene=synthetic&from=9&to=3").await.status, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/api/timeline?scene=synthetic&from=15&to=99").await.json().as_array().unwrap().len(), 5);
}

#[tokio::test]
async fn rule_editing() {
    let f = fixture(false);
    let app = app(&f.config);
    let v0 = load_rulebase(&f.config.rulebase).unwrap().version;
    let r = post(&app, "/api/rules", json!({ "text": "cycling is only allowed during daytime", "kind": "anomaly" })).await;
    assert_eq!(r.status, StatusCode::CREATED);
    assert_eq!(r.json()["version"], v0 + 1);
    let rb = get(&app, "/api/rulebase").await.json();
    assert_eq!(rb["custom_anomaly_rules"][0]["text"], "cycling is only allowed during daytime");
    assert_eq!(rb["counts"]["custom"], 1);

    let dup = post(&app, "/api/rules", json!({ "text": "Cycling is only allowed during daytime " })).await;
    assert_eq!(dup.status, StatusCode::CONFLICT);
    assert_eq!(dup.json()["error"], "duplicate_rule");
    assert_eq!(post(&app, "/api/rules", json!({ "text": "   " })).await.status, StatusCode::BAD_REQUEST);
    assert_eq!(post(&app, "/api/rules", json!({ "kind": "normal" })).await.status, StatusCode::BAD_REQUEST);

    let normal = post(&app, "/api/rules", json!({ "text": "vans unload at the dock", "kind": "normal" })).await;
    assert_eq!(normal.status, StatusCode::CREATED);

    let stale = call(&app, Method::POST, "/api/rules", &[("if-match", &v0.to_string())], Some(json!({ "text": "fresh rule" }))).await;
    assert_eq!(stale.status, StatusCode::CONFLICT);
    let current = (v0 + 2).to_string();
    let fresh = call(&app, Method::POST, "/api/rules", &[("if-match", &current)], Some(json!({ "text": "fresh rule" }))).await;
    assert_eq!(fresh.status, StatusCode::CREATED);
    assert_eq!(load_rulebase(&f.config.rulebase).unwrap().version, v0 + 3);
}

#[tokio::test]
async fn external_edits_are_picked_up() {
    let f = fixture(true);
    let app = app(&f.config);
    let v0 = get(&app, "/api/rulebase").await.json()["version"].as_u64().unwrap();

    let store = RuleStore::open(&f.config.rulebase).unwrap();
    store.update(None, |rb| rb.add_custom_rule("someone climbs the fence", RuleKind::Anomaly)).unwrap();
    let rb = get(&app, "/api/rulebase").await;
    assert_eq!(rb.json()["version"], v0 + 1);
    assert_eq!(rb.version(), v0 + 1);

    let mut queue = FeedbackQueue::open(&f.config.queue).unwrap();
    let first = queue.pending(cerberus_core::evolution::FeedbackKind::UilPending)[0].id;
    apply_uil(&store, &mut queue, first, &UilDecision::Reject, None).unwrap();
    let again = post(&app, &format!("/api/feedback/{first}"), json!({ "decision": "reject" })).await;
    assert_eq!(again.status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn frames_and_metrics() {
    let dir = TempDir::new().unwrap();
    let dump = dir.path().join("frames");
    let d = detect(40, Some(&dump));
    let mut f = write_fixture(&d.rulebase, &d.records, true, dir);
    f.config.frames_dir = Some(dump);
    f.config.metrics = Some(f.dir.path().join("report.json"));
    let app = app(&f.config);

    let items = get(&app, "/api/feedback/pending").await.json();
    let url = items[0]["frame_url"].as_str().unwrap().to_string();
    let png = get(&app, &url).await;
    assert_eq!(png.status, StatusCode::OK);
    assert_eq!(png.headers[header::CONTENT_TYPE], "image/png");
    assert_eq!(&png.body[..4], b"\x89PNG");
    assert_eq!(get(&app, "/frames/..%2Frulebase.json").await.status, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/frames/missing.png").await.status, StatusCode::NOT_FOUND);

    assert_eq!(get(&app, "/api/metrics/latest").await.status, StatusCode::NOT_FOUND);
    let report = compute_report(&d.scenario.manifest().unwrap(), &d.records, Some(1.0), 0.95).unwrap();
    report.save(f.dir.path().join("report.json")).unwrap();
    let m = get(&app, "/api/metrics/latest").await;
    assert_eq!(m.status, StatusCode::OK);
    assert_eq!(m.json()["schema"], "cerberus-report/1");
    assert_eq!(m.json()["frames"], 40);
}

#[test]
fn corrupt_queue_refuses_to_start() {
    let f = fixture(false);
    std::fs::write(&f.config.queue, "not json\n").unwrap();
    assert!(matches!(AppState::open(f.config.clone()), Err(ServiceError::StoreCorrupt { .. })));
    let missing = ServiceConfig::new(f.dir.path().join("nope.json"), &f.config.verdicts, &f.config.queue);
    assert!(matches!(AppState::open(missing), Err(ServiceError::StoreCorrupt { .. })));
}

#[derive(Debug, Clone)]
enum Op {
    AddRule { text: usize, normal: bool, stale: bool },
    Decide { id: u64, confirm: bool, text: Option<usize> },
}

const TEXTS: [&str; 5] = [
    "loitering is anomalous",
    "cycling is only allowed during daytime",
    "  Loitering is anomalous ",
    "",
    "a person lingering near the entrance",
];

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..TEXTS.len(), any::<bool>(), prop::bool::weighted(0.2)).prop_map(|(text, normal, stale)| Op::AddRule { text, normal, stale }),
        (1u64..12, any::<bool>(), prop::option::of(0..TEXTS.len())).prop_map(|(id, confirm, text)| Op::Decide { id, confirm, text }),
    ]
}

fn decision(confirm: bool, text: Option<usize>) -> UilDecision {
    if confirm {
        UilDecision::Confirm { rule_text: text.map(|t| TEXTS[t].to_string()) }
    } else {
        UilDecision::Reject
    }
}

fn queue_state(q: &FeedbackQueue) -> Vec<Value> {
    q.items()
        .map(|i| {
            let d = i.decision.as_ref();
            json!([
                i.id,
                i.kind,
                i.status,
                i.frame_id,
                i.origin_item,
                d.map(|d| d.rulebase_version),
                d.and_then(|d| d.rule_text.clone()),
                d.and_then(|d| d.routed_to)
            ])
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn api_matches_direct_operations(ops in prop::collection::vec(op(), 1..12)) {
        let d = shared_detection();
        let f = fixture(true);
        let rules = RuleStore::in_memory(d.rulebase.clone());
        let mut queue = FeedbackQueue::in_memory();
        queue.enqueue(enqueue_uil(&d.records)).unwrap();

        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        let app = app(&f.config);
        for op in &ops {
            let (reply, direct_ok) = match op {
                Op::AddRule { text, normal, stale } => {
                    let kind = if *normal { RuleKind::Normal } else { RuleKind::Anomaly };
                    let expected = stale.then(|| rules.version() - 1);
                    let direct = rules.update(expected, |rb| rb.add_custom_rule(TEXTS[*text], kind)).is_ok();
                    let mut headers = vec![];
                    let tag = expected.map(|v| v.to_string());
                    if let Some(tag) = &tag {
                        headers.push(("if-match", tag.as_str()));
                    }
                    let body = json!({ "text": TEXTS[*text], "kind": kind });
                    (rt.block_on(call(&app, Method::POST, "/api/rules", &headers, Some(body))), direct)
                }
                Op::Decide { id, confirm, text } => {
                    let dec = decision(*confirm, *text);
                    let direct = apply_uil(&rules, &mut queue, *id, &dec, None).is_ok();
                    let body = serde_json::to_value(&dec).unwrap();
                    (rt.block_on(post(&app, &format!("/api/feedback/{id}"), body)), direct)
                }
            };
            prop_assert_eq!(reply.status.is_success(), direct_ok, "{:?}: {}", op, String::from_utf8_lossy(&reply.body));
            prop_assert_eq!(reply.version(), rules.version());
        }
        prop_assert_eq!(&load_rulebase(&f.config.rulebase).unwrap(), &*rules.snapshot());
        prop_assert_eq!(queue_state(&FeedbackQueue::open(&f.config.queue).unwrap()), queue_state(&queue));
    }
}
