use std::sync::Arc;

use kctutor_core::engine::{infer_posteriors, InteractionRecord};
use kctutor_core::generator::{TemplateLibrary, TemplateSource};
use kctutor_core::synth::balanced_tree;
use kctutor_core::{Difficulty, KcId, KcTree, Kt2Params, StudentHistory};
use kctutor_service::{router, AppState, Catalog, Recommendation, ServiceConfig, Snapshot};
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

fn three_node() -> (KcTree, Kt2Params) {
    let tree = kctutor_core::load_tree(
        "{\"id\":\"R\",\"name\":\"root\",\"parent\":null}\n\
         {\"id\":\"L1\",\"name\":\"left\",\"parent\":\"R\"}\n\
         {\"id\":\"L2\",\"name\":\"right\",\"parent\":\"R\"}\n",
    )
    .unwrap();
    let mut params = Kt2Params::uniform(&tree, 0.4, 0.2, 0.9, 0.8, 0.7);
    params.gamma.insert(KcId::from("R"), 0.5);
    (tree, params)
}

fn catalog() -> (Catalog, TemplateLibrary) {
    let mut c = Catalog::default();
    let (tree, params) = three_node();
    c.add_tree("tiny", tree.clone());
    c.add_params("tiny-p", "tiny", params).unwrap();
    let (big, lib) = balanced_tree(&[3, 4]);
    let p = Kt2Params::uniform(&big, 0.3, 0.2, 0.9, 0.8, 0.65);
    c.add_tree("units", big);
    c.add_params("units-p", "units", p).unwrap();
    (c, lib)
}

struct Server {
    base: String,
    http: reqwest::Client,
    app: Arc<AppState>,
}

async fn start(config: ServiceConfig, with_source: bool) -> Server {
    let (cat, lib) = catalog();
    let source: Option<Arc<dyn kctutor_core::generator::QuestionSource>> =
        if with_source { Some(Arc::new(TemplateSource { library: lib })) } else { None };
    let app = AppState::new(cat, source, &config).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let r = router(app.clone(), &config);
    tokio::spawn(kctutor_service::serve(listener, r, std::future::pending()));
    Server { base, http: reqwest::Client::new(), app }
}

impl Server {
    async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.http.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn create(&self, tree: &str, params: &str, history: Value) -> String {
        let (st, v) = self.post("/sessions", json!({ "tree": tree, "params": params, "history": history })).await;
        assert_eq!(st, 201, "{v}");
        v["session_id"].as_str().unwrap().to_string()
    }

    async fn state(&self, id: &str) -> Snapshot {
        let (st, v) = self.get(&format!("/sessions/{id}/state")).await;
        assert_eq!(st, 200, "{v}");
        serde_json::from_value(v).unwrap()
    }

    async fn answer(&self, id: &str, kc: &str, correct: bool) -> (u16, Value) {
        self.post(&format!("/sessions/{id}/answers"), json!({ "kc": kc, "correct": correct })).await
    }
}

fn assert_parity(snap: &Snapshot, tree: &KcTree, params: &Kt2Params) {
    let h = StudentHistory { student_id: snap.session_id.clone(), records: snap.history.clone() };
    let batch = infer_posteriors(params, tree, &h).unwrap();
    assert_eq!(snap.mastery.mastery.len(), tree.len());
    for (k, v) in &batch.mastery {
        assert!((snap.mastery.get(k.as_str()).unwrap() - v).abs() <= 1e-12);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn health_and_tree() {
    let s = start(ServiceConfig::default(), false).await;
    assert_eq!(s.get("/healthz").await, (200, json!({"status": "ok"})));
    let (st, v) = s.get("/trees/tiny").await;
    assert_eq!(st, 200);
    assert_eq!(v["nodes"].as_array().unwrap().len(), 3);
    assert_eq!(v["root"], "R");
    let (st, v) = s.get("/trees/nope").await;
    assert_eq!(st, 404);
    assert_eq!(v["error"]["code"], "not_found");
    assert_eq!(s.get("/no/such/route").await.0, 404);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn worked_example_session() {
    let s = start(ServiceConfig::default(), false).await;
    let id = s.create("tiny", "tiny-p", json!([])).await;
    let prior = s.state(&id).await;
    assert!((prior.total - 1.9).abs() < 1e-12);
    assert!((prior.mastery.get("L1").unwrap() - 0.7).abs() < 1e-12);

    let (st, v) = s.get(&format!("/sessions/{id}/recommendation")).await;
    assert_eq!(st, 200);
    let rec: Recommendation = serde_json::from_value(v.clone()).unwrap();
    assert_eq!(rec.kc.as_str(), "L1");
    assert_eq!(rec.kc_name, "left");
    assert!((rec.education_value - 2.335484).abs() < 1e-5);
    assert!((rec.baseline - 1.9).abs() < 1e-12);
    assert!(rec.question.is_none());
    assert_eq!(s.get(&format!("/sessions/{id}/recommendation")).await.1, v);

    let (st, v) = s.answer(&id, "L1", true).await;
    assert_eq!(st, 200);
    let snap: Snapshot = serde_json::from_value(v).unwrap();
    for (k, want) in [("L1", 0.903226), ("R", 0.645161), ("L2", 0.787097)] {
        assert!((snap.mastery.get(k).unwrap() - want).abs() < 1e-5);
    }
    assert_eq!(s.state(&id).await, snap);
    let rec: Recommendation =
        serde_json::from_value(s.get(&format!("/sessions/{id}/recommendation")).await.1).unwrap();
    assert_eq!(rec.kc.as_str(), "L2");
    assert_eq!(rec.history_len, 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn answers_move_mastery_in_the_right_direction() {
    let s = start(ServiceConfig::default(), false).await;
    let id = s.create("units", "units-p", json!([])).await;
    let before = s.state(&id).await.mastery.get("KC-2").unwrap();
    let (_, v) = s.answer(&id, "KC-2", true).await;
    let up = v["mastery"]["KC-2"].as_f64().unwrap();
    assert!(up > before);
    let (_, v) = s.answer(&id, "KC-2", false).await;
    assert!(v["mastery"]["KC-2"].as_f64().unwrap() < up);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn seeded_history_matches_batch() {
    let s = start(ServiceConfig::default(), false).await;
    let (tree, _) = balanced_tree(&[3, 4]);
    let params = Kt2Params::uniform(&tree, 0.3, 0.2, 0.9, 0.8, 0.65);
    let records: Vec<InteractionRecord> = (0..10)
        .map(|i| InteractionRecord {
            kc: KcId::new(format!("KC-{}", i % 12)),
            correct: i % 3 != 0,
            difficulty: Difficulty::ALL[i % 3],
        })
        .collect();
    let id = s.create("units", "units-p", serde_json::to_value(&records).unwrap()).await;
    let snap = s.state(&id).await;
    assert_eq!(snap.history, records);
    assert_parity(&snap, &tree, &params);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn error_responses() {
    let s = start(ServiceConfig::default(), false).await;
    let (st, v) = s.post("/sessions", json!({"tree": "tiny", "params": "ghost"})).await;
    assert_eq!(st, 404);
    assert!(v["error"]["message"].as_str().unwrap().contains("ghost"));
    let (st, _) = s.post("/sessions", json!({"tree": "tiny", "params": "units-p"})).await;
    assert_eq!(st, 422);
    let (st, v) = s.post("/sessions", json!({"tree": "tiny", "params": "tiny-p", "history": [{"kc": "R", "correct": true}]})).await;
    assert_eq!((st, v["error"]["code"].as_str()), (422, Some("invalid_input")));
    let r = s.http.post(format!("{}/sessions", s.base)).body("{not json").send().await.unwrap();
    assert_eq!(r.status().as_u16(), 400);
    let v: Value = r.json().await.unwrap();
    assert_eq!(v["error"]["code"], "bad_request");
    assert_eq!(s.get("/sessions/deadbeef/state").await.0, 404);
    assert_eq!(s.get("/sessions/deadbeef/recommendation").await.0, 404);
    assert_eq!(s.answer("deadbeef", "L1", true).await.0, 404);
    let id = s.create("tiny", "tiny-p", json!([])).await;
    assert_eq!(id.len(), 32);
    assert_eq!(s.answer(&id, "R", true).await.0, 422);
    assert_eq!(s.answer(&id, "XX", true).await.0, 422);
    assert!(s.state(&id).await.history.is_empty());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn recommendation_carries_generated_question() {
    let s = start(ServiceConfig::default(), true).await;
    let id = s.create("units", "units-p", json!([])).await;
    let rec: Recommendation =
        serde_json::from_value(s.get(&format!("/sessions/{id}/recommendation")).await.1).unwrap();
    let q = rec.question.as_ref().unwrap();
    assert_eq!(q.intended_kc.as_ref(), Some(&rec.kc));
    assert!(!q.question_text.is_empty());
    assert_eq!(rec.values.len(), 12);
    assert!(rec.values.iter().all(|v| v.value <= rec.education_value));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn parity_and_isolation_under_concurrency() {
    let s = Arc::new(start(ServiceConfig::default(), false).await);
    let (tree, _) = balanced_tree(&[3, 4]);
    let params = Kt2Params::uniform(&tree, 0.3, 0.2, 0.9, 0.8, 0.65);
    let leaves = tree.leaves();
    let mut tasks = Vec::new();
    for client in 0..8u64 {
        let s = s.clone();
        let leaves = leaves.clone();
        tasks.push(tokio::spawn(async move {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(client);
            let mut mine = Vec::new();
            for _ in 0..6 {
                mine.push((s.create("units", "units-p", json!([])).await, Vec::<InteractionRecord>::new()));
            }
            for _ in 0..60 {
                let j = rng.gen_range(0..mine.len());
                let kc = leaves[rng.gen_range(0..leaves.len())].clone();
                let correct = rng.gen_bool(0.6);
                let (st, _) = s.answer(&mine[j].0, kc.as_str(), correct).await;
                assert_eq!(st, 200);
                mine[j].1.push(InteractionRecord { kc, correct, difficulty: Difficulty::Medium });
            }
            mine
        }));
    }
    let mut all = Vec::new();
    for t in tasks {
        all.extend(t.await.unwrap());
    }
    assert_eq!(all.len(), 48);
    assert_eq!(s.app.session_count(), 48);
    for (id, expected) in &all {
        let snap = s.state(id).await;
        assert_eq!(&snap.history, expected);
        assert_parity(&snap, &tree, &params);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn event_log_replays_after_restart() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig { event_log: Some(dir.path().join("events.jsonl")), ..Default::default() };
    let s = start(config.clone(), false).await;
    let a = s.create("tiny", "tiny-p", json!([{"kc": "L2", "correct": false}])).await;
    let b = s.create("units", "units-p", json!([])).await;
    s.answer(&a, "L1", true).await;
    s.answer(&b, "KC-5", true).await;
    s.answer(&b, "KC-0", false).await;
    let (sa, sb) = (s.state(&a).await, s.state(&b).await);

    let again = start(config, false).await;
    assert_eq!(again.app.session_count(), 2);
    assert_eq!(again.state(&a).await, sa);
    assert_eq!(again.state(&b).await, sb);
    again.answer(&a, "L2", true).await;
    assert_eq!(again.state(&a).await.history.len(), 3);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn cors_headers() {
    let config = ServiceConfig { cors_origins: vec!["http://ui.local".into()], ..Default::default() };
    let s = start(config, false).await;
    let r = s
        .http
        .get(format!("{}/healthz", s.base))
        .header("origin", "http://ui.local")
        .send()
        .await
        .unwrap();
    assert_eq!(r.headers()["access-control-allow-origin"], "http://ui.local");
    let r = s.http.get(format!("{}/healthz", s.base)).header("origin", "http://evil").send().await.unwrap();
    assert!(r.headers().get("access-control-allow-origin").is_none());
}
