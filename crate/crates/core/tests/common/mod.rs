#![allow(dead_code)]

pub mod contract;

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use distillrag::index::{normalize_key, CandidateKey, ITEM_SEPARATOR};
use distillrag::service::ServiceConfig;
use distillrag::{
    Embedder, EmbeddingVector, LlmConfig, LocalHashEmbedder, MedicineRecord, PipelineConfig,
    ScriptEntry,
};

pub const BIN: &str = env!("CARGO_BIN_EXE_distillrag");

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture_records() -> Vec<MedicineRecord> {
    distillrag::index::load_database(&fixture("medicines.json")).unwrap()
}

/// Writes a service config for the fixture database with scripted models.
pub fn service_config(dir: &Path, distiller: Vec<ScriptEntry>, reader: Vec<ScriptEntry>) -> PathBuf {
    service_config_with(
        dir,
        PipelineConfig::new(LlmConfig::scripted(distiller), LlmConfig::scripted(reader)),
    )
}

pub fn service_config_with(dir: &Path, pipeline: PipelineConfig) -> PathBuf {
    let cfg = ServiceConfig {
        listen: "127.0.0.1:0".into(),
        allow_public: false,
        data_dir: dir.join("data"),
        database: fixture("medicines.json"),
        cache_dir: None,
        pipeline,
    };
    let path = dir.join("service.toml");
    std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
    path
}

/// A `distillrag serve` child process, killed on drop.
pub struct Server {
    child: Child,
    pub base: String,
}

impl Server {
    pub fn start(config: &Path) -> Self {
        let mut child = Command::new(BIN)
            .args(["serve", "--config"])
            .arg(config)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawn server");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let base = line
            .trim()
            .strip_prefix("listening on ")
            .unwrap_or_else(|| panic!("unexpected banner {line:?}"))
            .to_string();
        Self { child, base }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::new()
}

/// Brute-force ranking that shares no code with the index: embeds the texts
/// itself, scores by a plain dot product and sorts by (score desc, key asc).
pub struct Oracle {
    embedder: LocalHashEmbedder,
    entities: Vec<(String, EmbeddingVector)>,
    items: Vec<((String, String), CandidateKey, EmbeddingVector)>,
}

impl Oracle {
    pub fn new(records: &[MedicineRecord], dim: usize) -> Self {
        let embedder = LocalHashEmbedder::new(dim).unwrap();
        let mut entities = Vec::new();
        let mut items = Vec::new();
        for r in records {
            let name = r.generic_name.trim().to_string();
            let mut names = vec![name.clone()];
            names.extend(r.brand_names.iter().map(|b| b.trim().to_string()).filter(|b| !b.is_empty()));
            entities.push((name.clone(), embedder.embed_text(&names.join("; ")).unwrap()));
            for (attr, text) in &r.attributes {
                let key = CandidateKey {
                    entity: name.clone(),
                    attribute: Some(attr.trim().to_string()),
                };
                let emb = embedder
                    .embed_text(&format!("{name}{ITEM_SEPARATOR}{}", text.trim()))
                    .unwrap();
                items.push(((normalize_key(&name), normalize_key(attr)), key, emb));
            }
        }
        Self { embedder, entities, items }
    }

    fn dot(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
        let mut s = 0.0;
        for (x, y) in a.values().iter().zip(b.values()) {
            s += x * y;
        }
        s
    }

    pub fn coarse(&self, query: &str, num: usize) -> Vec<(String, f64)> {
        let q = self.embedder.embed_text(query).unwrap();
        let mut v: Vec<(String, String, f64)> = self
            .entities
            .iter()
            .map(|(n, e)| (normalize_key(n), n.clone(), Self::dot(&q, e)))
            .collect();
        v.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then_with(|| a.0.cmp(&b.0)));
        v.into_iter().take(num).map(|(_, n, s)| (n, s)).collect()
    }

    pub fn fine(&self, query: &str, num: usize) -> Vec<(CandidateKey, f64)> {
        let q = self.embedder.embed_text(query).unwrap();
        let mut v: Vec<(&(String, String), &CandidateKey, f64)> = self
            .items
            .iter()
            .map(|(k, c, e)| (k, c, Self::dot(&q, e)))
            .collect();
        v.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then_with(|| a.0.cmp(b.0)));
        v.into_iter().take(num).map(|(_, c, s)| (c.clone(), s)).collect()
    }
}

pub const Q1: &str = "I have a bad headache, how much ibuprofen can I take?";
pub const A1: &str = "Adults can take 200-400 mg every 4 to 6 hours.";
pub const Q2: &str = "I am also on warfarin, is that a problem?";
pub const A2: &str = "Together they raise the risk of bleeding.";
pub const Q3: &str = "What side effects should I watch for then?";
pub const A3: &str = "Stomach upset and heartburn are the most common.";

/// Scripted models for a three-turn session. The turn-2 distiller rule only
/// fires when the rendered history is exactly turn 1.
pub fn session_scripts() -> (Vec<ScriptEntry>, Vec<ScriptEntry>) {
    let distiller = vec![
        ScriptEntry::new(format!("Latest question:\n{Q3}\n"), "search_engine(Ibuprofen side effects stomach)"),
        ScriptEntry::new(
            format!("Dialogue so far:\nUser: {Q1}\nAssistant: {A1}\n\nLatest question:\n{Q2}\n"),
            "search_engine(Ibuprofen interactions warfarin)",
        ),
        ScriptEntry::new(format!("Latest question:\n{Q2}\n"), "search_engine(history was wrong)"),
        ScriptEntry::new(
            format!("Dialogue so far:\n(no previous turns)\n\nLatest question:\n{Q1}\n"),
            "search_engine(Ibuprofen dosage maximum per day)",
        ),
    ];
    let reader = vec![
        ScriptEntry::new(format!("Latest question:\n{Q3}"), A3),
        ScriptEntry::new(format!("Latest question:\n{Q2}"), A2),
        ScriptEntry::new(format!("Latest question:\n{Q1}"), A1),
    ];
    (distiller, reader)
}

/// Runs the three-turn session against `server` and checks every turn.
pub fn check_three_turns(server: &Server) {
    let http = client();
    let resp = http.post(server.url("/api/sessions")).send().unwrap();
    assert_eq!(resp.status(), 201);
    let id = resp.json::<serde_json::Value>().unwrap()["session_id"]
        .as_str()
        .unwrap()
        .to_string();
    let expected = [
        (Q1, A1, "Ibuprofen dosage maximum per day", "dosage"),
        (Q2, A2, "Ibuprofen interactions warfarin", "interactions"),
        (Q3, A3, "Ibuprofen side effects stomach", "side effects"),
    ];
    for (i, (q, a, query, attr)) in expected.iter().enumerate() {
        let resp = http
            .post(server.url(&format!("/api/sessions/{id}/messages")))
            .json(&serde_json::json!({ "question": q }))
            .send()
            .unwrap();
        assert_eq!(resp.status(), 200, "turn {i}");
        let body: serde_json::Value = resp.json().unwrap();
        assert_eq!(body["answer"], *a, "turn {i}");
        assert_eq!(body["distilled_query"], *query, "turn {i}");
        assert_eq!(body["distill_followed"], true);
        assert_eq!(body["turn_index"], i);
        assert_eq!(body["evidence"][0]["key"]["entity"], "Ibuprofen");
        assert_eq!(body["evidence"][0]["key"]["attribute"], *attr);
    }
    let session: serde_json::Value = http
        .get(server.url(&format!("/api/sessions/{id}")))
        .send()
        .unwrap()
        .json()
        .unwrap();
    let turns = session["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 3);
    for (t, (q, a, _, _)) in turns.iter().zip(expected) {
        assert_eq!(t["question"], q);
        assert_eq!(t["answer"], a);
    }
}
