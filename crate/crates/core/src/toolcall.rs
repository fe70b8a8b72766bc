//! Query distillation through a plain-text tool call.
//!
//! The distiller model is asked to answer with exactly one
//! `search_engine(<keywords>)` call. This module renders that prompt, parses
//! the reply, provides the two naive query builders used as baselines, and
//! produces synthetic (input, tool call) training pairs from a teacher model.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ChatMessage, LlmClient, LlmError};

pub const TOOL_NAME: &str = "search_engine";
const DEFAULT_DISTILL_TEMPLATE: &str = include_str!("../assets/distill_prompt.txt");

/// One (question, answer) round of a dialogue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(rename = "q")]
    pub question: String,
    #[serde(rename = "a")]
    pub answer: String,
}

impl Turn {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            answer: answer.into(),
        }
    }
}

/// Prior rounds of a dialogue, oldest first. May be empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DialogueHistory {
    pub turns: Vec<Turn>,
}

impl DialogueHistory {
    pub fn new(turns: Vec<Turn>) -> Self {
        Self { turns }
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn push(&mut self, question: impl Into<String>, answer: impl Into<String>) {
        self.turns.push(Turn::new(question, answer));
    }

    /// Canonical rendering shared by the distiller and reader prompts.
    ///
    /// One `User:` / `Assistant:` line per message; continuation lines inside
    /// a message are indented by two spaces so message boundaries stay
    /// unambiguous.
    pub fn render(&self) -> String {
        if self.turns.is_empty() {
            return "(no previous turns)".to_string();
        }
        let mut out = String::new();
        for (i, t) in self.turns.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            push_line(&mut out, "User: ", &t.question);
            out.push('\n');
            push_line(&mut out, "Assistant: ", &t.answer);
        }
        out
    }
}

fn push_line(out: &mut String, label: &str, content: &str) {
    out.push_str(label);
    out.push_str(&content.replace('\n', "\n  "));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ToolCallError {
    #[error("no search_engine(...) call found")]
    NoToolCall,
    #[error("search_engine call has unbalanced parentheses")]
    UnbalancedParens,
    #[error("search_engine call has an empty query")]
    EmptyQuery,
}

#[derive(Debug, Error)]
pub enum ToolcallError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("template is missing placeholder {0}")]
    BadTemplate(&'static str),
    #[error("reading template: {0}")]
    Io(String),
    #[error("no synthetic pair survived ({dropped} dropped)")]
    AllItemsFailed { dropped: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool_name: String,
    pub query: String,
}

impl ToolCall {
    pub fn new(query: impl Into<String>) -> Self {
        Self {
            tool_name: TOOL_NAME.to_string(),
            query: query.into(),
        }
    }
}

impl fmt::Display for ToolCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.tool_name, self.query)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseWarning {
    MultipleCalls,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedToolCall {
    pub call: ToolCall,
    pub warnings: Vec<ParseWarning>,
}

/// Byte offset just past `search_engine` + optional whitespace + `(`, for the
/// first such occurrence at or after `from`. ASCII case-insensitive.
fn find_call_open(text: &str, from: usize) -> Option<usize> {
    let bytes = text.as_bytes();
    let needle = TOOL_NAME.as_bytes();
    let mut i = from;
    while i + needle.len() <= bytes.len() {
        if bytes[i..i + needle.len()].eq_ignore_ascii_case(needle) {
            let mut j = i + needle.len();
            while j < bytes.len() && bytes[j].is_ascii_whitespace() {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b'(' {
                return Some(j + 1);
            }
        }
        i += 1;
    }
    None
}

/// Returns (captured query, byte offset after the closing paren).
fn capture_balanced(text: &str, open: usize) -> Result<(&str, usize), ToolCallError> {
    let mut depth = 1usize;
    for (off, c) in text[open..].char_indices() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth == 0 {
                    return Ok((&text[open..open + off], open + off + 1));
                }
            }
            _ => {}
        }
    }
    Err(ToolCallError::UnbalancedParens)
}

/// Parses the first `search_engine(...)` call in a model reply.
///
/// Matching is ASCII case-insensitive, tolerates whitespace before the
/// parenthesis, captures up to the balancing `)`, and ignores surrounding
/// text. A second call after the first yields a `MultipleCalls` warning.
pub fn parse_tool_call_detailed(model_output: &str) -> Result<ParsedToolCall, ToolCallError> {
    let open = find_call_open(model_output, 0).ok_or(ToolCallError::NoToolCall)?;
    let (raw, end) = capture_balanced(model_output, open)?;
    let query = raw.trim();
    if query.is_empty() {
        return Err(ToolCallError::EmptyQuery);
    }
    let mut warnings = Vec::new();
    if find_call_open(model_output, end).is_some() {
        warnings.push(ParseWarning::MultipleCalls);
    }
    Ok(ParsedToolCall {
        call: ToolCall::new(query),
        warnings,
    })
}

pub fn parse_tool_call(model_output: &str) -> Result<ToolCall, ToolCallError> {
    parse_tool_call_detailed(model_output).map(|p| p.call)
}

/// Fills `{{name}}` placeholders in one pass, so substituted values are never
/// re-scanned.
pub(crate) fn render_template(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        match after.find("}}") {
            Some(end) => {
                let name = &after[..end];
                match values.iter().find(|(k, _)| *k == name) {
                    Some((_, v)) => out.push_str(v),
                    None => {
                        out.push_str("{{");
                        out.push_str(name);
                        out.push_str("}}");
                    }
                }
                rest = &after[end + 2..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

/// The distiller instruction template, with `{{history}}` and `{{question}}`
/// placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistillTemplate {
    text: String,
}

impl Default for DistillTemplate {
    fn default() -> Self {
        Self {
            text: DEFAULT_DISTILL_TEMPLATE.to_string(),
        }
    }
}

impl DistillTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, ToolcallError> {
        let text = text.into();
        for p in ["{{history}}", "{{question}}"] {
            if !text.contains(p) {
                return Err(ToolcallError::BadTemplate(p));
            }
        }
        Ok(Self { text })
    }

    pub fn load(path: &Path) -> Result<Self, ToolcallError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ToolcallError::Io(format!("{}: {e}", path.display())))?;
        Self::new(text)
    }

    pub fn render(&self, history: &DialogueHistory, question: &str) -> Result<String, ToolcallError> {
        if question.trim().is_empty() {
            return Err(ToolcallError::EmptyQuestion);
        }
        let history = history.render();
        let question = question.trim().replace('\n', "\n  ");
        Ok(render_template(
            &self.text,
            &[("history", &history), ("question", &question)],
        ))
    }
}

/// Builds the distiller prompt with the default template.
pub fn build_distill_prompt(
    history: &DialogueHistory,
    question: &str,
) -> Result<String, ToolcallError> {
    DistillTemplate::default().render(history, question)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    History,
    LastQuestion,
}

/// Naive query builders: the whole dialogue, or only the final question.
pub fn baseline_query(
    history: &DialogueHistory,
    question: &str,
    kind: BaselineKind,
) -> Result<String, ToolcallError> {
    if question.trim().is_empty() {
        return Err(ToolcallError::EmptyQuestion);
    }
    Ok(match kind {
        BaselineKind::LastQuestion => question.to_string(),
        BaselineKind::History => {
            let mut parts: Vec<&str> = Vec::with_capacity(history.len() * 2 + 1);
            for t in &history.turns {
                parts.push(&t.question);
                parts.push(&t.answer);
            }
            parts.push(question);
            parts.join("\n")
        }
    })
}

/// One synthetic training record, as stored in the JSONL dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticPair {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    NoToolCall,
    UnbalancedParens,
    EmptyQuery,
    NonCompressive,
}

impl From<ToolCallError> for Violation {
    fn from(e: ToolCallError) -> Self {
        match e {
            ToolCallError::NoToolCall => Violation::NoToolCall,
            ToolCallError::UnbalancedParens => Violation::UnbalancedParens,
            ToolCallError::EmptyQuery => Violation::EmptyQuery,
        }
    }
}

/// Checks a synthetic record. An empty list means the record is valid.
pub fn validate_synthetic_record(record: &SyntheticPair) -> Vec<Violation> {
    match parse_tool_call(&record.output) {
        Err(e) => vec![e.into()],
        Ok(call) if call.query.chars().count() >= record.input.chars().count() => {
            vec![Violation::NonCompressive]
        }
        Ok(_) => vec![],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DropReason {
    Parse(ToolCallError),
    Teacher(LlmError),
    EmptyInput,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropReason::Parse(e) => write!(f, "{e}"),
            DropReason::Teacher(e) => write!(f, "teacher: {e}"),
            DropReason::EmptyInput => f.write_str("empty question"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutcome {
    pub pairs: Vec<SyntheticPair>,
    /// (input index, reason) for every dropped question.
    pub dropped: Vec<(usize, DropReason)>,
}

/// Labels each question with the teacher's distilled tool call.
///
/// Requests run in parallel; output order follows input order.
pub fn generate_synthetic_pairs(
    questions: &[String],
    teacher: &dyn LlmClient,
    template: &DistillTemplate,
) -> Result<SynthOutcome, ToolcallError> {
    let empty = DialogueHistory::default();
    let results: Vec<Result<SyntheticPair, DropReason>> = questions
        .par_iter()
        .map(|q| {
            let prompt = template
                .render(&empty, q)
                .map_err(|_| DropReason::EmptyInput)?;
            let reply = teacher
                .complete(&[ChatMessage::user(prompt)])
                .map_err(DropReason::Teacher)?;
            let call = parse_tool_call(&reply).map_err(DropReason::Parse)?;
            Ok(SyntheticPair {
                input: q.clone(),
                output: call.to_string(),
            })
        })
        .collect();

    let mut pairs = Vec::new();
    let mut dropped = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => pairs.push(p),
            Err(reason) => {
                tracing::warn!("synthetic item {i} dropped: {reason}");
                dropped.push((i, reason));
            }
        }
    }
    if pairs.is_empty() {
        return Err(ToolcallError::AllItemsFailed {
            dropped: dropped.len(),
        });
    }
    Ok(SynthOutcome { pairs, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ScriptEntry, ScriptedLlm};

    fn history(n: usize) -> DialogueHistory {
        DialogueHistory::new(
            (0..n)
                .map(|i| Turn::new(format!("question {i}"), format!("answer {i}")))
                .collect(),
        )
    }

    #[test]
    fn table_one_samples() {
        for (out, q) in [
            ("search_engine(Guangzhou Typhoon Forecast.)", "Guangzhou Typhoon Forecast."),
            (
                "search_engine(2017 College entrance examination ticket size.)",
                "2017 College entrance examination ticket size.",
            ),
            (
                "search_engine(The cost of studying in Japan high school.)",
                "The cost of studying in Japan high school.",
            ),
        ] {
            assert_eq!(parse_tool_call(out).unwrap(), ToolCall::new(q));
        }
    }

    #[test]
    fn nested_parens_and_chatter() {
        let c = parse_tool_call("Sure! search_engine(dose (adult) of ibuprofen) hope this helps")
            .unwrap();
        assert_eq!(c.query, "dose (adult) of ibuprofen");
    }

    #[test]
    fn classification() {
        assert_eq!(parse_tool_call("The dose is 400mg."), Err(ToolCallError::NoToolCall));
        assert_eq!(
            parse_tool_call("search_engine(dose (adult"),
            Err(ToolCallError::UnbalancedParens)
        );
        assert_eq!(parse_tool_call("search_engine(  )"), Err(ToolCallError::EmptyQuery));
        // The bare word without a call is not a call.
        assert_eq!(
            parse_tool_call("I would use search_engine but cannot"),
            Err(ToolCallError::NoToolCall)
        );
    }

    #[test]
    fn tolerant_surface_forms() {
        for s in [
            "`search_engine(aspirin usage)`",
            "SEARCH_ENGINE (aspirin usage)",
            "```\nsearch_engine(  aspirin usage )\n```",
            "call: Search_Engine(aspirin usage)",
        ] {
            assert_eq!(parse_tool_call(s).unwrap().query, "aspirin usage", "{s}");
        }
    }

    #[test]
    fn first_call_wins_with_warning() {
        let p = parse_tool_call_detailed("search_engine(a b) search_engine(c)").unwrap();
        assert_eq!(p.call.query, "a b");
        assert_eq!(p.warnings, vec![ParseWarning::MultipleCalls]);
        let p = parse_tool_call_detailed("search_engine(a b)").unwrap();
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn non_ascii_text_around_call() {
        let c = parse_tool_call("好的，search_engine(阿莫西林 禁忌症)。").unwrap();
        assert_eq!(c.query, "阿莫西林 禁忌症");
    }

    #[test]
    fn distill_prompt_structure() {
        let q = "What is the adult dose of ibuprofen?";
        let p = build_distill_prompt(&DialogueHistory::default(), q).unwrap();
        assert!(p.contains(q));
        assert!(p.contains("search_engine(<keywords>)"));
        assert_eq!(p, build_distill_prompt(&DialogueHistory::default(), q).unwrap());
    }

    #[test]
    fn distill_prompt_contains_history_in_order() {
        let p = build_distill_prompt(&history(3), "final?").unwrap();
        let mut pos = 0;
        for i in 0..3 {
            for line in [format!("User: question {i}"), format!("Assistant: answer {i}")] {
                let at = p[pos..].find(&line).expect(&line) + pos;
                pos = at + line.len();
            }
        }
        assert!(p[pos..].contains("final?"));
    }

    #[test]
    fn distill_prompt_rejects_empty_question() {
        assert!(matches!(
            build_distill_prompt(&history(1), " "),
            Err(ToolcallError::EmptyQuestion)
        ));
    }

    #[test]
    fn placeholder_values_are_not_rescanned() {
        let p = build_distill_prompt(&DialogueHistory::default(), "what is {{history}}?").unwrap();
        assert!(p.contains("what is {{history}}?"));
    }

    #[test]
    fn template_requires_placeholders() {
        assert!(DistillTemplate::new("no placeholders").is_err());
        let t = DistillTemplate::new("H={{history}} Q={{question}}").unwrap();
        assert_eq!(
            t.render(&DialogueHistory::default(), "x").unwrap(),
            "H=(no previous turns) Q=x"
        );
    }

    #[test]
    fn baselines() {
        let q = "Can I take it with alcohol?";
        assert_eq!(baseline_query(&history(2), q, BaselineKind::LastQuestion).unwrap(), q);
        for kind in [BaselineKind::History, BaselineKind::LastQuestion] {
            assert_eq!(baseline_query(&history(0), q, kind).unwrap(), q);
        }
        let h = baseline_query(&history(2), q, BaselineKind::History).unwrap();
        assert_eq!(
            h.split('\n').collect::<Vec<_>>(),
            ["question 0", "answer 0", "question 1", "answer 1", q]
        );
        assert!(baseline_query(&history(2), "", BaselineKind::History).is_err());
    }

    #[test]
    fn synthetic_generation() {
        let teacher = ScriptedLlm::new(vec![
            ScriptEntry::new("X?", "search_engine(X)"),
            ScriptEntry::new(
                "2017 college entrance examination ticket",
                "search_engine(2017 College entrance examination ticket size.)",
            ),
        ])
        .with_fallback("I think you should ask a doctor.");
        let qs = vec![
            "X?".to_string(),
            "prose please".to_string(),
            "2017 college entrance examination ticket, fully opened, how much longer? How wide is it?"
                .to_string(),
        ];
        let out = generate_synthetic_pairs(&qs, &teacher, &DistillTemplate::default()).unwrap();
        assert_eq!(
            out.pairs,
            vec![
                SyntheticPair {
                    input: "X?".into(),
                    output: "search_engine(X)".into()
                },
                SyntheticPair {
                    input: qs[2].clone(),
                    output: "search_engine(2017 College entrance examination ticket size.)".into()
                },
            ]
        );
        assert_eq!(out.dropped.len(), 1);
        assert_eq!(out.dropped[0].0, 1);
        for p in &out.pairs {
            assert!(parse_tool_call(&p.output).is_ok());
        }
    }

    #[test]
    fn synthetic_all_failed() {
        let teacher = ScriptedLlm::new(vec![]);
        let err = generate_synthetic_pairs(&["a".into()], &teacher, &DistillTemplate::default())
            .unwrap_err();
        assert!(matches!(err, ToolcallError::AllItemsFailed { dropped: 1 }));
    }

    #[test]
    fn record_validation() {
        let ok = SyntheticPair {
            input: "long question about ibuprofen dosing for adults".into(),
            output: "search_engine(short query)".into(),
        };
        assert!(validate_synthetic_record(&ok).is_empty());
        let empty = SyntheticPair {
            input: "q".into(),
            output: "search_engine()".into(),
        };
        assert_eq!(validate_synthetic_record(&empty), vec![Violation::EmptyQuery]);
        let none = SyntheticPair {
            input: "q".into(),
            output: "no call here".into(),
        };
        assert_eq!(validate_synthetic_record(&none), vec![Violation::NoToolCall]);
        let longer = SyntheticPair {
            input: "q".into(),
            output: "search_engine(much longer)".into(),
        };
        assert_eq!(validate_synthetic_record(&longer), vec![Violation::NonCompressive]);
    }
}
