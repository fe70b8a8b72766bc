//! Pairwise answer-quality arena scored with Elo ratings.
//!
//! Expected score: `E_A = 1 / (1 + 10^((R_B - R_A) / 400))`.
//! Update: `R'_A = R_A + K (S_A - E_A)` with `S_A` in {1, 0.5, 0}.
//!
//! Each (sample, player pair) is played `rounds` times with alternating
//! presentation order. Consecutive ab/ba legs form one encounter whose
//! updates are computed from the ratings before the encounter, so a referee
//! that always prefers the first-shown answer cancels out exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::DialogueSample;
use crate::index::KnowledgeIndex;
use crate::llm::{ChatMessage, LlmClient};
use crate::toolcall::render_template;

pub const DEFAULT_INITIAL_RATING: f64 = 1000.0;
pub const DEFAULT_K_FACTOR: f64 = 32.0;
/// Re-asks after the first unparseable referee reply.
pub const REFEREE_RETRIES: usize = 2;
const JUDGE_TEMPLATE: &str = include_str!("../assets/judge_prompt.txt");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EloError {
    #[error("unknown player {0}")]
    UnknownPlayer(String),
    #[error("score must be 1, 0.5 or 0, got {0}")]
    InvalidScore(f64),
    #[error("player {player} has no answer for sample {sample}")]
    MissingAnswer { player: String, sample: String },
    #[error("rounds must be >= 1")]
    InvalidRounds,
    #[error("need at least two players")]
    TooFewPlayers,
    #[error("{0}")]
    Io(String),
}

/// Expected score of a player rated `r_a` against one rated `r_b`.
pub fn expected_score(r_a: f64, r_b: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf((r_b - r_a) / 400.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Presentation {
    Ab,
    Ba,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    WinA,
    WinB,
    Draw,
    Skipped,
}

impl Verdict {
    pub fn score_a(self) -> Option<f64> {
        match self {
            Verdict::WinA => Some(1.0),
            Verdict::Draw => Some(0.5),
            Verdict::WinB => Some(0.0),
            Verdict::Skipped => None,
        }
    }

    fn from_score(s_a: f64) -> Result<Self, EloError> {
        if s_a == 1.0 {
            Ok(Verdict::WinA)
        } else if s_a == 0.5 {
            Ok(Verdict::Draw)
        } else if s_a == 0.0 {
            Ok(Verdict::WinB)
        } else {
            Err(EloError::InvalidScore(s_a))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub sample_id: String,
    pub player_a: String,
    pub player_b: String,
    pub presentation_order: Presentation,
    pub verdict: Verdict,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s_a: Option<f64>,
    pub referee_raw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub rank: usize,
    pub player: String,
    pub rating: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EloState {
    pub ratings: BTreeMap<String, f64>,
    pub initial_rating: f64,
    pub k_factor: f64,
    pub match_log: Vec<MatchRecord>,
}

impl EloState {
    pub fn new<I, S>(players: I, initial_rating: f64, k_factor: f64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            ratings: players
                .into_iter()
                .map(|p| (p.into(), initial_rating))
                .collect(),
            initial_rating,
            k_factor,
            match_log: Vec::new(),
        }
    }

    pub fn rating(&self, player: &str) -> Result<f64, EloError> {
        self.ratings
            .get(player)
            .copied()
            .ok_or_else(|| EloError::UnknownPlayer(player.to_string()))
    }

    /// Applies one game and logs it. Returns the new (R_A, R_B).
    pub fn update_pair(
        &mut self,
        player_a: &str,
        player_b: &str,
        s_a: f64,
    ) -> Result<(f64, f64), EloError> {
        let verdict = Verdict::from_score(s_a)?;
        let out = self.apply_encounter(&[MatchRecord {
            sample_id: String::new(),
            player_a: player_a.to_string(),
            player_b: player_b.to_string(),
            presentation_order: Presentation::Ab,
            verdict,
            s_a: Some(s_a),
            referee_raw: String::new(),
        }])?;
        Ok(out)
    }

    /// Applies the legs of one encounter between the same two players,
    /// all scored against the ratings held before the encounter. Skipped legs
    /// are logged but change nothing.
    pub fn apply_encounter(&mut self, legs: &[MatchRecord]) -> Result<(f64, f64), EloError> {
        let first = legs.first().expect("encounter has at least one leg");
        let (a, b) = (first.player_a.as_str(), first.player_b.as_str());
        let r_a = self.rating(a)?;
        let r_b = self.rating(b)?;
        let e_a = expected_score(r_a, r_b);
        let e_b = expected_score(r_b, r_a);
        let mut d_a = 0.0;
        let mut d_b = 0.0;
        for leg in legs {
            debug_assert!(leg.player_a == a && leg.player_b == b);
            if let Some(s_a) = leg.verdict.score_a() {
                d_a += self.k_factor * (s_a - e_a);
                d_b += self.k_factor * ((1.0 - s_a) - e_b);
            }
        }
        let new = (r_a + d_a, r_b + d_b);
        self.ratings.insert(a.to_string(), new.0);
        self.ratings.insert(b.to_string(), new.1);
        self.match_log.extend_from_slice(legs);
        Ok(new)
    }

    /// Players by rating, descending; equal ratings share a rank.
    pub fn ranking(&self) -> Vec<RankingRow> {
        let mut rows: Vec<(&String, f64)> = self.ratings.iter().map(|(p, r)| (p, *r)).collect();
        rows.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(y.0)));
        let mut out: Vec<RankingRow> = Vec::with_capacity(rows.len());
        for (i, (p, r)) in rows.into_iter().enumerate() {
            let rank = match out.last() {
                Some(prev) if prev.rating == r => prev.rank,
                _ => i + 1,
            };
            out.push(RankingRow {
                rank,
                player: p.clone(),
                rating: r,
            });
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefereeChoice {
    First,
    Second,
    Tie,
}

/// Strict referee grammar: exactly `1`, `2` or `TIE` after trimming.
pub fn parse_referee_reply(reply: &str) -> Option<RefereeChoice> {
    let t = reply.trim();
    if t == "1" {
        Some(RefereeChoice::First)
    } else if t == "2" {
        Some(RefereeChoice::Second)
    } else if t.eq_ignore_ascii_case("tie") {
        Some(RefereeChoice::Tie)
    } else {
        None
    }
}

fn de_anonymize(choice: RefereeChoice, order: Presentation) -> Verdict {
    match (choice, order) {
        (RefereeChoice::Tie, _) => Verdict::Draw,
        (RefereeChoice::First, Presentation::Ab) | (RefereeChoice::Second, Presentation::Ba) => {
            Verdict::WinA
        }
        (RefereeChoice::Second, Presentation::Ab) | (RefereeChoice::First, Presentation::Ba) => {
            Verdict::WinB
        }
    }
}

pub fn build_judge_prompt(question: &str, evidence: &[String], answer_1: &str, answer_2: &str) -> String {
    let evidence = if evidence.is_empty() {
        "Evidence: (none)".to_string()
    } else {
        let lines: Vec<String> = evidence.iter().map(|e| format!("- {e}")).collect();
        format!("Evidence:\n{}", lines.join("\n"))
    };
    render_template(
        JUDGE_TEMPLATE,
        &[
            ("question", question.trim()),
            ("evidence", &evidence),
            ("answer_1", answer_1.trim()),
            ("answer_2", answer_2.trim()),
        ],
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Judgement {
    pub verdict: Verdict,
    /// Last referee reply, or the skip reason.
    pub raw: String,
}

/// Asks an LLM referee which answer is better. Answers are shown as
/// "Answer 1"/"Answer 2" in `order`; unparseable replies are re-asked up to
/// [`REFEREE_RETRIES`] times before the match is skipped.
pub fn judge_match(
    referee: &dyn LlmClient,
    question: &str,
    evidence: &[String],
    answer_a: &str,
    answer_b: &str,
    order: Presentation,
) -> Judgement {
    let (first, second) = match order {
        Presentation::Ab => (answer_a, answer_b),
        Presentation::Ba => (answer_b, answer_a),
    };
    let prompt = build_judge_prompt(question, evidence, first, second);
    let messages = [ChatMessage::user(prompt)];
    let mut raw = String::new();
    for _ in 0..=REFEREE_RETRIES {
        match referee.complete(&messages) {
            Ok(reply) => {
                if let Some(choice) = parse_referee_reply(&reply) {
                    return Judgement {
                        verdict: de_anonymize(choice, order),
                        raw: reply,
                    };
                }
                raw = reply;
            }
            Err(e) => {
                return Judgement {
                    verdict: Verdict::Skipped,
                    raw: format!("transport error: {e}"),
                }
            }
        }
    }
    Judgement {
        verdict: Verdict::Skipped,
        raw,
    }
}

/// One match as seen by a judge.
#[derive(Debug, Clone, Copy)]
pub struct MatchView<'a> {
    pub sample: &'a TournamentSample,
    pub player_a: &'a str,
    pub player_b: &'a str,
    pub answer_a: &'a str,
    pub answer_b: &'a str,
    pub order: Presentation,
}

/// Anything that can decide a match: an LLM referee or a test oracle.
pub trait Judge: Sync {
    fn judge(&self, m: &MatchView<'_>) -> Judgement;
}

/// Judge backed by an LLM referee.
pub struct LlmJudge<'a>(pub &'a dyn LlmClient);

impl Judge for LlmJudge<'_> {
    fn judge(&self, m: &MatchView<'_>) -> Judgement {
        judge_match(
            self.0,
            &m.sample.question,
            &m.sample.evidence,
            m.answer_a,
            m.answer_b,
            m.order,
        )
    }
}

impl<F> Judge for F
where
    F: Fn(&MatchView<'_>) -> Judgement + Sync,
{
    fn judge(&self, m: &MatchView<'_>) -> Judgement {
        self(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TournamentSample {
    pub id: String,
    pub question: String,
    pub evidence: Vec<String>,
}

/// Builds tournament samples; evidence is the ground-truth attribute items
/// (or the whole entity when none are listed) when an index is available.
pub fn tournament_samples(
    samples: &[DialogueSample],
    index: Option<&KnowledgeIndex>,
) -> Vec<TournamentSample> {
    samples
        .iter()
        .map(|s| {
            let evidence = index
                .map(|idx| {
                    if s.k_f.is_empty() {
                        idx.get_entity(&s.k_c)
                            .map(|items| items.iter().map(|i| i.item_text.clone()).collect())
                            .unwrap_or_default()
                    } else {
                        s.k_f
                            .iter()
                            .filter_map(|k| idx.get_attribute_item(k).ok())
                            .map(|i| i.item_text.clone())
                            .collect()
                    }
                })
                .unwrap_or_default();
            TournamentSample {
                id: s.id.clone(),
                question: s.question.clone(),
                evidence,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TournamentConfig {
    pub rounds: usize,
    pub seed: u64,
    pub k_factor: f64,
    pub initial_rating: f64,
}

impl Default for TournamentConfig {
    fn default() -> Self {
        Self {
            rounds: 2,
            seed: 0,
            k_factor: DEFAULT_K_FACTOR,
            initial_rating: DEFAULT_INITIAL_RATING,
        }
    }
}

/// Player id -> (sample id -> answer).
pub type AnswerSets = BTreeMap<String, BTreeMap<String, String>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TournamentResult {
    pub config: TournamentConfig,
    pub state: EloState,
    pub ranking: Vec<RankingRow>,
    /// Encounter order actually applied, as indices into the schedule.
    pub order: Vec<usize>,
    pub skipped: usize,
}

/// Judged legs of every scheduled encounter, in schedule order.
#[derive(Debug, Clone)]
pub struct JudgedSchedule {
    pub players: Vec<String>,
    pub encounters: Vec<Vec<MatchRecord>>,
}

/// Schedules all matches and has `judge` decide them (in parallel).
pub fn judge_schedule(
    players: &AnswerSets,
    samples: &[TournamentSample],
    judge: &dyn Judge,
    rounds: usize,
) -> Result<JudgedSchedule, EloError> {
    if rounds == 0 {
        return Err(EloError::InvalidRounds);
    }
    if players.len() < 2 {
        return Err(EloError::TooFewPlayers);
    }
    for (p, answers) in players {
        for s in samples {
            if answers.get(&s.id).is_none_or(|a| a.trim().is_empty()) {
                return Err(EloError::MissingAnswer {
                    player: p.clone(),
                    sample: s.id.clone(),
                });
            }
        }
    }
    let ids: Vec<&String> = players.keys().collect();
    let mut legs = Vec::new();
    for si in 0..samples.len() {
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                for r in 0..rounds {
                    let order = if r % 2 == 0 { Presentation::Ab } else { Presentation::Ba };
                    legs.push((si, i, j, r, order));
                }
            }
        }
    }
    let judged: Vec<MatchRecord> = legs
        .par_iter()
        .map(|&(si, i, j, _, order)| {
            let s = &samples[si];
            let (a, b) = (ids[i].as_str(), ids[j].as_str());
            let view = MatchView {
                sample: s,
                player_a: a,
                player_b: b,
                answer_a: &players[a][&s.id],
                answer_b: &players[b][&s.id],
                order,
            };
            let j = judge.judge(&view);
            MatchRecord {
                sample_id: s.id.clone(),
                player_a: a.to_string(),
                player_b: b.to_string(),
                presentation_order: order,
                verdict: j.verdict,
                s_a: j.verdict.score_a(),
                referee_raw: j.raw,
            }
        })
        .collect();

    let mut encounters: Vec<Vec<MatchRecord>> = Vec::new();
    for (leg, rec) in legs.iter().zip(judged) {
        let round = leg.3;
        if round % 2 == 1 {
            encounters.last_mut().expect("ab leg precedes ba leg").push(rec);
        } else {
            encounters.push(vec![rec]);
        }
    }
    Ok(JudgedSchedule {
        players: ids.into_iter().cloned().collect(),
        encounters,
    })
}

/// Applies a judged schedule in a seed-determined random order.
pub fn replay(schedule: &JudgedSchedule, config: &TournamentConfig) -> TournamentResult {
    let mut order: Vec<usize> = (0..schedule.encounters.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut state = EloState::new(
        schedule.players.iter().cloned(),
        config.initial_rating,
        config.k_factor,
    );
    for &i in &order {
        state
            .apply_encounter(&schedule.encounters[i])
            .expect("scheduled players are registered");
    }
    let skipped = state
        .match_log
        .iter()
        .filter(|m| m.verdict == Verdict::Skipped)
        .count();
    TournamentResult {
        config: config.clone(),
        ranking: state.ranking(),
        state,
        order,
        skipped,
    }
}

pub fn run_tournament(
    players: &AnswerSets,
    samples: &[TournamentSample],
    judge: &dyn Judge,
    config: &TournamentConfig,
) -> Result<TournamentResult, EloError> {
    let schedule = judge_schedule(players, samples, judge, config.rounds)?;
    Ok(replay(&schedule, config))
}

/// Median final rating per player over `m` replays with seeds
/// `config.seed..config.seed + m`.
pub fn bootstrap_medians(
    schedule: &JudgedSchedule,
    config: &TournamentConfig,
    m: usize,
) -> BTreeMap<String, f64> {
    let mut samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for i in 0..m as u64 {
        let cfg = TournamentConfig {
            seed: config.seed.wrapping_add(i),
            ..config.clone()
        };
        for (p, r) in replay(schedule, &cfg).state.ratings {
            samples.entry(p).or_default().push(r);
        }
    }
    samples
        .into_iter()
        .map(|(p, mut v)| {
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let med = if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) / 2.0
            };
            (p, med)
        })
        .collect()
}

#[derive(Deserialize)]
struct AnswerLine {
    sample_id: String,
    answer: String,
}

/// Reads a player answer file (JSONL of `{"sample_id", "answer"}`).
pub fn load_answers(path: &Path) -> Result<BTreeMap<String, String>, EloError> {
    let text = fs::read_to_string(path)
        .map_err(|e| EloError::Io(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let a: AnswerLine = serde_json::from_str(line)
            .map_err(|e| EloError::Io(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.insert(a.sample_id, a.answer);
    }
    Ok(out)
}

pub fn render_ranking(ranking: &[RankingRow]) -> String {
    let w = ranking.iter().map(|r| r.player.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:>4}  {:<w$}  {:>10}", "Rank", "Player", "Elo");
    for r in ranking {
        let _ = writeln!(out, "{:>4}  {:<w$}  {:>10.2}", r.rank, r.player, r.rating);
    }
    out
}
