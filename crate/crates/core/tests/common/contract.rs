//! Black-box checks of the HTTP contract, shared by the service tests and
//! the acceptance runner.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use distillrag::llm::ScriptedFailure;
use distillrag::pipeline::Fallback;
use distillrag::{LlmConfig, PipelineConfig, ScriptEntry};
use serde_json::{json, Value};

use super::*;

fn default_server(dir: &std::path::Path) -> Server {
    let (d, r) = session_scripts();
    Server::start(&service_config(dir, d, r))
}

fn error_code(resp: reqwest::blocking::Response) -> (u16, Value) {
    let status = resp.status().as_u16();
    (status, resp.json().unwrap())
}

pub fn health_reports_index_size() {
    let dir = tempfile::tempdir().unwrap();
    let server = default_server(dir.path());
    let body: Value = client().get(server.url("/api/health")).send().unwrap().json().unwrap();
    assert_eq!(body["status"], "ok");
    assert_eq!(body["index"], json!({"entities": 12, "items": 60}));
}

pub fn three_turn_session_carries_history() {
    let dir = tempfile::tempdir().unwrap();
    check_three_turns(&default_server(dir.path()));
}

pub fn sessions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let server = default_server(dir.path());
        let http = client();
        let id = http.post(server.url("/api/sessions")).send().unwrap().json::<Value>().unwrap()
            ["session_id"]
            .as_str()
            .unwrap()
            .to_string();
        let resp = http
            .post(server.url(&format!("/api/sessions/{id}/messages")))
            .json(&json!({"question": Q1}))
            .send()
            .unwrap();
        assert_eq!(resp.status(), 200);
        id
    };
    let server = default_server(dir.path());
    let session: Value = client()
        .get(server.url(&format!("/api/sessions/{id}")))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(session["turns"][0]["answer"], A1);
}

pub fn error_mapping() {
    let dir = tempfile::tempdir().unwrap();
    let server = default_server(dir.path());
    let http = client();

    let (s, b) = error_code(http.get(server.url("/api/sessions/nope")).send().unwrap());
    assert_eq!((s, b["error_code"].as_str()), (404, Some("unknown_session")));
    let (s, b) = error_code(
        http.post(server.url("/api/sessions/nope/messages"))
            .json(&json!({"question": "hi"}))
            .send()
            .unwrap(),
    );
    assert_eq!((s, b["error_code"].as_str()), (404, Some("unknown_session")));

    let id = http.post(server.url("/api/sessions")).send().unwrap().json::<Value>().unwrap()
        ["session_id"]
        .as_str()
        .unwrap()
        .to_string();
    let msg = server.url(&format!("/api/sessions/{id}/messages"));
    let (s, b) = error_code(http.post(&msg).json(&json!({"question": "  "})).send().unwrap());
    assert_eq!((s, b["error_code"].as_str()), (400, Some("empty_question")));
    let (s, b) = error_code(http.post(&msg).body("{not json").send().unwrap());
    assert_eq!((s, b["error_code"].as_str()), (400, Some("bad_request")));

    for query in ["q=", "q=x&num=0", "q=x&num=abc", "q=x&granularity=medium"] {
        let (s, _) = error_code(http.get(server.url(&format!("/api/search?{query}"))).send().unwrap());
        assert_eq!(s, 400, "{query}");
    }
}

pub fn aborted_distill_is_422() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::new(
        LlmConfig::scripted(vec![ScriptEntry::new("Latest question", "I would rather not search.")]),
        LlmConfig::scripted(vec![]),
    );
    cfg.fallback_on_parse_failure = Fallback::Fail;
    let server = Server::start(&service_config_with(dir.path(), cfg));
    let http = client();
    let id = http.post(server.url("/api/sessions")).send().unwrap().json::<Value>().unwrap()
        ["session_id"]
        .as_str()
        .unwrap()
        .to_string();
    let (s, b) = error_code(
        http.post(server.url(&format!("/api/sessions/{id}/messages")))
            .json(&json!({"question": "How much ibuprofen?"}))
            .send()
            .unwrap(),
    );
    assert_eq!(s, 422);
    assert_eq!(b["error_code"], "aborted");
    assert_eq!(b["step"], "distill");
    // A failed turn is not recorded.
    let session: Value = http.get(server.url(&format!("/api/sessions/{id}"))).send().unwrap().json().unwrap();
    assert_eq!(session["turns"].as_array().unwrap().len(), 0);
}

pub fn upstream_failure_is_502() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::new(
        LlmConfig::scripted(vec![ScriptEntry::failing("Latest question", ScriptedFailure::Timeout)]),
        LlmConfig::scripted(vec![]),
    );
    let server = Server::start(&service_config_with(dir.path(), cfg));
    let http = client();
    let id = http.post(server.url("/api/sessions")).send().unwrap().json::<Value>().unwrap()
        ["session_id"]
        .as_str()
        .unwrap()
        .to_string();
    let (s, b) = error_code(
        http.post(server.url(&format!("/api/sessions/{id}/messages")))
            .json(&json!({"question": "How much ibuprofen?"}))
            .send()
            .unwrap(),
    );
    assert_eq!((s, b["error_code"].as_str(), b["step"].as_str()), (502, Some("upstream_failure"), Some("distill")));
}

pub fn search_prefix_property() {
    let dir = tempfile::tempdir().unwrap();
    let server = default_server(dir.path());
    let http = client();
    for granularity in ["coarse", "fine"] {
        let fetch = |num: usize| -> Vec<Value> {
            let body: Value = http
                .get(server.url("/api/search"))
                .query(&[("q", "warfarin bleeding"), ("granularity", granularity), ("num", &num.to_string())])
                .send()
                .unwrap()
                .json()
                .unwrap();
            assert_eq!(body["granularity"], granularity);
            body["candidates"].as_array().unwrap().clone()
        };
        let full = fetch(12);
        assert_eq!(full.len(), 12);
        for k in 1..12 {
            assert_eq!(fetch(k), full[..k], "{granularity} num={k}");
        }
        assert_eq!(full[0]["key"]["entity"], "Warfarin");
    }
}

fn search_entities(http: &reqwest::blocking::Client, server: &Server, q: &str) -> Vec<String> {
    let body: Value = http
        .get(server.url("/api/search"))
        .query(&[("q", q), ("granularity", "coarse"), ("num", "50")])
        .send()
        .unwrap()
        .json()
        .unwrap();
    body["candidates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["key"]["entity"].as_str().unwrap().to_string())
        .collect()
}

fn replacement_db() -> Value {
    let mut db: Vec<Value> =
        serde_json::from_str(&std::fs::read_to_string(fixture("medicines.json")).unwrap()).unwrap();
    db.truncate(5);
    db.push(json!({
        "id": "m100",
        "generic_name": "Cetirizine",
        "brand_names": ["Zyrtec"],
        "attributes": {"dosage": "Dosage: 10 mg once daily."}
    }));
    Value::Array(db)
}

pub fn ingest_swaps_atomically_and_persists() {
    let dir = tempfile::tempdir().unwrap();
    let new_db = replacement_db();
    {
        let server = default_server(dir.path());
        let old: Vec<String> = search_entities(&client(), &server, "cetirizine");
        assert_eq!(old.len(), 12);

        let done = Arc::new(AtomicBool::new(false));
        let readers: Vec<_> = (0..4)
            .map(|_| {
                let done = done.clone();
                let base = server.base.clone();
                std::thread::spawn(move || {
                    let http = client();
                    let mut seen = 0;
                    while !done.load(Ordering::Acquire) || seen == 0 {
                        let body: Value = http
                            .get(format!("{base}/api/search"))
                            .query(&[("q", "cetirizine"), ("granularity", "coarse"), ("num", "50")])
                            .send()
                            .unwrap()
                            .json()
                            .unwrap();
                        let names: Vec<&str> = body["candidates"]
                            .as_array()
                            .unwrap()
                            .iter()
                            .map(|c| c["key"]["entity"].as_str().unwrap())
                            .collect();
                        // Every response comes wholly from one index.
                        match names.len() {
                            12 => assert!(!names.contains(&"Cetirizine")),
                            6 => assert_eq!(names[0], "Cetirizine"),
                            n => panic!("mixed index with {n} entities"),
                        }
                        seen += 1;
                    }
                })
            })
            .collect();
        let resp = client().post(server.url("/api/admin/ingest")).json(&new_db).send().unwrap();
        assert_eq!(resp.status(), 200);
        assert_eq!(resp.json::<Value>().unwrap(), json!({"entities": 6, "items": 26}));
        done.store(true, Ordering::Release);
        for r in readers {
            r.join().unwrap();
        }
        assert_eq!(search_entities(&client(), &server, "cetirizine")[0], "Cetirizine");
    }
    // The ingested database is preferred on restart.
    let server = default_server(dir.path());
    let health: Value = client().get(server.url("/api/health")).send().unwrap().json().unwrap();
    assert_eq!(health["index"]["entities"], 6);
}

pub fn ingest_rejects_bad_payloads() {
    let dir = tempfile::tempdir().unwrap();
    let server = default_server(dir.path());
    let http = client();
    let dup = json!([
        {"id": "1", "generic_name": "Aspirin", "attributes": {"dosage": "x"}},
        {"id": "2", "generic_name": " aspirin ", "attributes": {"dosage": "y"}}
    ]);
    for (body, code) in [
        (json!({"not": "an array"}), "schema_violation"),
        (json!([]), "empty_database"),
        (dup, "duplicate_entity"),
    ] {
        let (s, b) = error_code(http.post(server.url("/api/admin/ingest")).json(&body).send().unwrap());
        assert_eq!((s, b["error_code"].as_str()), (400, Some(code)));
    }
    // The old index is untouched.
    let health: Value = http.get(server.url("/api/health")).send().unwrap().json().unwrap();
    assert_eq!(health["index"]["entities"], 12);
}
