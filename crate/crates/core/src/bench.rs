//! Dialogue benchmark loading and retrieval metrics.
//!
//! HR@num is the fraction of samples whose ground truth appears among the
//! first `num` retrieval candidates, computed separately for entity-level
//! (coarse) and entity-attribute (fine) retrieval. Instruction-follow rate is
//! the fraction of samples whose distiller reply parsed as a tool call.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{normalize_key, AttributeKey, CandidateKey, KnowledgeIndex};
use crate::pipeline::{DistillFailureKind, Distilled, Fallback, Pipeline};
use crate::toolcall::{baseline_query, BaselineKind, DialogueHistory};

pub const DEFAULT_NUMS: [usize; 4] = [1, 5, 10, 50];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BenchError {
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("sample {id}: field {field}: {message}")]
    SchemaViolation {
        id: String,
        field: &'static str,
        message: String,
    },
    #[error("duplicate sample id {0}")]
    DuplicateId(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("nums must be non-empty, >= 1 and strictly ascending")]
    InvalidNums,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Zh,
}

/// One benchmark item: dialogue history, final question, and coarse/fine
/// retrieval ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub id: String,
    pub language: Language,
    #[serde(default)]
    pub history: DialogueHistory,
    pub question: String,
    pub k_c: String,
    #[serde(default)]
    pub k_f: Vec<AttributeKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl DialogueSample {
    pub fn validate(&self, index: Option<&KnowledgeIndex>) -> Result<(), BenchError> {
        let violation = |field, message: String| BenchError::SchemaViolation {
            id: self.id.clone(),
            field,
            message,
        };
        if self.id.trim().is_empty() {
            return Err(violation("id", "empty".into()));
        }
        if self.question.trim().is_empty() {
            return Err(violation("question", "empty".into()));
        }
        if self.history.turns.iter().any(|t| t.question.trim().is_empty()) {
            return Err(violation("history", "turn with empty question".into()));
        }
        if self.k_c.trim().is_empty() {
            return Err(violation("k_c", "empty".into()));
        }
        let kc = normalize_key(&self.k_c);
        if let Some(bad) = self.k_f.iter().find(|k| normalize_key(&k.entity) != kc) {
            return Err(violation(
                "k_f",
                format!("entity {:?} differs from k_c {:?}", bad.entity, self.k_c),
            ));
        }
        if let Some(index) = index {
            if index.entity_node(&self.k_c).is_err() {
                return Err(violation("k_c", format!("{:?} not in database", self.k_c)));
            }
            if let Some(bad) = self.k_f.iter().find(|k| index.get_attribute_item(k).is_err()) {
                return Err(violation("k_f", format!("{bad} not in database")));
            }
        }
        Ok(())
    }
}

pub fn parse_dataset(
    text: &str,
    index: Option<&KnowledgeIndex>,
) -> Result<Vec<DialogueSample>, BenchError> {
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample: DialogueSample = serde_json::from_str(line).map_err(|e| BenchError::ParseError {
            line: i + 1,
            message: e.to_string(),
        })?;
        sample.validate(index)?;
        if !ids.insert(sample.id.clone()) {
            return Err(BenchError::DuplicateId(sample.id));
        }
        samples.push(sample);
    }
    Ok(samples)
}

/// Loads a JSONL dataset. Ground-truth keys are checked against `index` when
/// given.
pub fn load_dataset(
    path: &Path,
    index: Option<&KnowledgeIndex>,
) -> Result<Vec<DialogueSample>, BenchError> {
    let text = fs::read_to_string(path).map_err(|e| BenchError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_dataset(&text, index)
}

/// How a fine-grained ground-truth set is matched.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FineHitRule {
    /// Any element of the set in the top-num is a hit.
    #[default]
    Any,
    /// Every element must be in the top-num.
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Truth<'a> {
    Coarse(&'a str),
    Fine(&'a [AttributeKey], FineHitRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitOutcome {
    pub hit: bool,
    /// Smallest cutoff at which the truth is satisfied: the first matching
    /// position under `Any`, the last required position under `All`.
    pub rank: Option<usize>,
}

/// Smallest 1-based cutoff at which `truth` is satisfied over the full list.
pub fn truth_rank(candidates: &[CandidateKey], truth: &Truth<'_>) -> Option<usize> {
    let pos = |target: &(String, Option<String>)| {
        candidates
            .iter()
            .position(|c| &c.normalized() == target)
            .map(|p| p + 1)
    };
    match truth {
        Truth::Coarse(k) => {
            let want = normalize_key(k);
            candidates
                .iter()
                .position(|c| normalize_key(&c.entity) == want)
                .map(|p| p + 1)
        }
        Truth::Fine([], _) => None,
        Truth::Fine(keys, rule) => {
            let ranks = keys.iter().map(|k| {
                let (e, a) = k.normalized();
                pos(&(e, Some(a)))
            });
            match rule {
                FineHitRule::Any => ranks.flatten().min(),
                FineHitRule::All => ranks.collect::<Option<Vec<_>>>()?.into_iter().max(),
            }
        }
    }
}

pub fn hit_at(candidates: &[CandidateKey], truth: &Truth<'_>, num: usize) -> HitOutcome {
    let rank = truth_rank(candidates, truth);
    HitOutcome {
        hit: rank.is_some_and(|r| r <= num),
        rank,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Distill,
    History,
    LastQuestion,
}

impl std::str::FromStr for QueryMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "distill" => Ok(QueryMode::Distill),
            "history" => Ok(QueryMode::History),
            "last_question" => Ok(QueryMode::LastQuestion),
            other => Err(format!("unknown query mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub nums: Vec<usize>,
    pub query_mode: QueryMode,
    pub fine_rule: FineHitRule,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            nums: DEFAULT_NUMS.to_vec(),
            query_mode: QueryMode::Distill,
            fine_rule: FineHitRule::Any,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub followed: bool,
    pub coarse_rank: Option<usize>,
    pub fine_rank: Option<usize>,
    pub distilled_query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_used: Option<Fallback>,
    /// Set when the sample could not be evaluated normally.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub query_mode: QueryMode,
    pub fine_rule: FineHitRule,
    pub instruction_follow_rate: f64,
    pub hr_coarse: BTreeMap<usize, f64>,
    pub hr_fine: BTreeMap<usize, f64>,
    pub per_sample: Vec<SampleRecord>,
}

/// Runs query formation and retrieval for every sample and aggregates
/// HR@num and instruction-follow rate.
///
/// Samples whose distillation fails stay in every denominator. Their query
/// comes from the pipeline's fallback; with `Fallback::Fail` or on transport
/// errors they count as misses and carry an `error`.
pub fn evaluate_retrieval(
    samples: &[DialogueSample],
    pipeline: &Pipeline,
    index: &KnowledgeIndex,
    options: &EvalOptions,
) -> Result<EvalReport, BenchError> {
    if samples.is_empty() {
        return Err(BenchError::EmptyDataset);
    }
    let nums = &options.nums;
    if nums.is_empty() || nums[0] == 0 || nums.windows(2).any(|w| w[0] >= w[1]) {
        return Err(BenchError::InvalidNums);
    }
    let max_num = *nums.last().unwrap();

    let mut per_sample: Vec<SampleRecord> = samples
        .par_iter()
        .map(|s| evaluate_sample(s, pipeline, index, options, max_num))
        .collect();
    per_sample.sort_by(|a, b| a.id.cmp(&b.id));

    let n = per_sample.len();
    let rate = |count: usize| count as f64 / n as f64;
    let hr = |rank: fn(&SampleRecord) -> Option<usize>| {
        nums.iter()
            .map(|&k| {
                let hits = per_sample
                    .iter()
                    .filter(|r| rank(r).is_some_and(|x| x <= k))
                    .count();
                (k, rate(hits))
            })
            .collect::<BTreeMap<_, _>>()
    };
    Ok(EvalReport {
        n_samples: n,
        query_mode: options.query_mode,
        fine_rule: options.fine_rule,
        instruction_follow_rate: rate(per_sample.iter().filter(|r| r.followed).count()),
        hr_coarse: hr(|r| r.coarse_rank),
        hr_fine: hr(|r| r.fine_rank),
        per_sample,
    })
}

fn evaluate_sample(
    sample: &DialogueSample,
    pipeline: &Pipeline,
    index: &KnowledgeIndex,
    options: &EvalOptions,
    max_num: usize,
) -> SampleRecord {
    let mut record = SampleRecord {
        id: sample.id.clone(),
        followed: false,
        coarse_rank: None,
        fine_rank: None,
        distilled_query: String::new(),
        fallback_used: None,
        error: None,
    };
    let baseline = |kind| baseline_query(&sample.history, &sample.question, kind);

    let query = match options.query_mode {
        QueryMode::History | QueryMode::LastQuestion => {
            let kind = if options.query_mode == QueryMode::History {
                BaselineKind::History
            } else {
                BaselineKind::LastQuestion
            };
            record.followed = true;
            baseline(kind).map_err(|e| e.to_string())
        }
        QueryMode::Distill => match pipeline.distill(&sample.history, &sample.question) {
            Ok(Distilled::Ok { call, .. }) => {
                record.followed = true;
                Ok(call.query)
            }
            Ok(Distilled::Failed(f)) if f.kind == DistillFailureKind::Transport => {
                Err(format!("distill transport: {}", f.message))
            }
            Ok(Distilled::Failed(f)) => {
                let fb = pipeline.config().fallback_on_parse_failure;
                record.fallback_used = Some(fb);
                match fb {
                    Fallback::Fail => Err(format!("distill failed: {f}")),
                    Fallback::LastQuestion => {
                        baseline(BaselineKind::LastQuestion).map_err(|e| e.to_string())
                    }
                    Fallback::History => baseline(BaselineKind::History).map_err(|e| e.to_string()),
                }
            }
            Err(e) => Err(e.to_string()),
        },
    };
    let query = match query {
        Ok(q) => q,
        Err(e) => {
            record.error = Some(e);
            return record;
        }
    };
    record.distilled_query = query.clone();

    let settings = &pipeline.config().retrieval;
    let emb = pipeline.embedder().as_ref();
    let coarse = index.search_coarse(&query, max_num, emb);
    let fine = index.search_fine(&query, max_num, emb, settings.mode, settings.fanout);
    match (coarse, fine) {
        (Ok(c), Ok(f)) => {
            let ck: Vec<CandidateKey> = c.candidates.into_iter().map(|x| x.key).collect();
            let fk: Vec<CandidateKey> = f.candidates.into_iter().map(|x| x.key).collect();
            record.coarse_rank = truth_rank(&ck, &Truth::Coarse(&sample.k_c));
            record.fine_rank = truth_rank(&fk, &Truth::Fine(&sample.k_f, options.fine_rule));
        }
        (Err(e), _) | (_, Err(e)) => record.error = Some(format!("retrieval: {e}")),
    }
    record
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

/// Fixed-width summary: follow rate, then Retrieved Doc. and Retrieved Attr.
/// HR@num groups.
pub fn render_table(report: &EvalReport) -> String {
    let nums: Vec<usize> = report.hr_coarse.keys().copied().collect();
    let group_w = nums.len() * 9 - 1;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} | {:<gw$} | {:<gw$}",
        "Ins. follow",
        "Retrieved Doc.",
        "Retrieved Attr.",
        gw = group_w
    );
    let heads: Vec<String> = nums.iter().map(|k| format!("{:>8}", format!("HR@{k}"))).collect();
    let _ = writeln!(
        out,
        "{:<14} | {} | {}",
        "rate (%)",
        heads.join(" "),
        heads.join(" ")
    );
    let _ = writeln!(out, "{}", "-".repeat(14 + 3 + group_w + 3 + group_w));
    let row = |m: &BTreeMap<usize, f64>| {
        nums.iter()
            .map(|k| format!("{:>8}", pct(m[k])))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let _ = writeln!(
        out,
        "{:>14} | {} | {}",
        pct(report.instruction_follow_rate),
        row(&report.hr_coarse),
        row(&report.hr_fine)
    );
    out
}
