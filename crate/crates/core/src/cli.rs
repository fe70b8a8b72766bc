//! `distillrag` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::bench::{self, EvalOptions, FineHitRule, QueryMode};
use crate::elo::{self, LlmJudge, TournamentConfig};
use crate::embedder::{EmbedderConfig, EmbedderKind};
use crate::index::{load_database, FineMode, Granularity, KnowledgeIndex};
use crate::llm::{LlmConfig, LlmKind};
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::service::{self, write_atomic, AppState, ServiceConfig};
use crate::toolcall::{generate_synthetic_pairs, DistillTemplate};

pub const ENV_EMBED_ENDPOINT: &str = "DISTILLRAG_EMBED_ENDPOINT";
pub const ENV_LLM_ENDPOINT: &str = "DISTILLRAG_LLM_ENDPOINT";
pub const ENV_LLM_KEY: &str = "DISTILLRAG_LLM_KEY";
pub const ENV_LLM_MODEL: &str = "DISTILLRAG_LLM_MODEL";
pub const ENV_LLM_TIMEOUT: &str = "DISTILLRAG_LLM_TIMEOUT";

#[derive(Debug, Parser)]
#[command(name = "distillrag", version, about = "Distill-Retrieve-Read consultation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GranularityArg {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Hierarchical,
    Flat,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum QueryModeArg {
    Distill,
    History,
    #[value(name = "last_question")]
    LastQuestion,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FineRuleArg {
    Any,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the index from a database file and report its size.
    Ingest {
        #[arg(long)]
        db: PathBuf,
        /// Directory for the embedding cache sidecar.
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Embedder config (TOML/JSON); defaults to local-hash.
        #[arg(long)]
        embedder: Option<PathBuf>,
    },
    /// Evaluate retrieval (HR@num, instruction-follow rate) on a dataset.
    Eval {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_NUMS)]
        nums: Vec<usize>,
        #[arg(long, value_enum, default_value = "distill")]
        query_mode: QueryModeArg,
        #[arg(long, value_enum, default_value = "any")]
        fine_rule: FineRuleArg,
        /// Pipeline config (TOML/JSON) supplying distiller, embedder and
        /// retrieval settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Distiller LLM config; overrides the one in --config.
        #[arg(long)]
        distiller: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an Elo tournament over player answer files.
    Arena {
        /// Player answer files as id=FILE (JSONL of {"sample_id","answer"}).
        #[arg(long = "answers", num_args = 1.., required = true)]
        answers: Vec<String>,
        #[arg(long)]
        dataset: PathBuf,
        /// Referee LLM config (TOML/JSON).
        #[arg(long)]
        referee: PathBuf,
        /// Database used to attach ground-truth evidence to judge prompts.
        #[arg(long)]
        db: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        rounds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = elo::DEFAULT_K_FACTOR)]
        k: f64,
        #[arg(long, default_value_t = elo::DEFAULT_INITIAL_RATING)]
        initial: f64,
        /// Also report median ratings over this many reshuffles.
        #[arg(long)]
        bootstrap: Option<usize>,
        #[arg(long)]
        match_log: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic (question, tool call) pairs with a teacher model.
    Synth {
        /// Plain-text file, one question per line.
        #[arg(long)]
        questions: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Prompt template with {{history}} and {{question}} placeholders.
        #[arg(long)]
        template: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP consultation service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Query the index directly, bypassing distillation.
    Search {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        q: String,
        #[arg(long, value_enum, default_value = "fine")]
        granularity: GranularityArg,
        #[arg(long, default_value_t = 5)]
        num: usize,
        #[arg(long, value_enum, default_value = "hierarchical")]
        mode: ModeArg,
        #[arg(long, default_value_t = crate::index::DEFAULT_FANOUT)]
        fanout: usize,
        #[arg(long)]
        embedder: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
}

/// Parses and runs a command line. Returns the process exit code:
/// 0 on success, 2 on usage errors, 1 on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let body = json!({
                "error_code": "runtime",
                "message": format!("{e:#}"),
            });
            eprintln!("{body}");
            1
        }
    }
}

fn load_config_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Applies `DISTILLRAG_*` environment overrides to remote clients.
pub fn apply_llm_env(cfg: &mut LlmConfig) {
    if cfg.kind != LlmKind::Remote {
        return;
    }
    if let Ok(v) = std::env::var(ENV_LLM_ENDPOINT) {
        cfg.endpoint = v;
    }
    if let Ok(v) = std::env::var(ENV_LLM_KEY) {
        cfg.api_key = Some(v);
    }
    if let Ok(v) = std::env::var(ENV_LLM_MODEL) {
        cfg.model_name = v;
    }
    if let Some(t) = std::env::var(ENV_LLM_TIMEOUT).ok().and_then(|v| v.parse().ok()) {
        cfg.timeout_secs = t;
    }
}

pub fn apply_embed_env(cfg: &mut EmbedderConfig) {
    if cfg.kind == EmbedderKind::Remote {
        if let Ok(v) = std::env::var(ENV_EMBED_ENDPOINT) {
            cfg.endpoint = v;
        }
    }
}

pub fn apply_pipeline_env(cfg: &mut PipelineConfig) {
    apply_llm_env(&mut cfg.distiller);
    apply_llm_env(&mut cfg.reader);
    apply_embed_env(&mut cfg.embedder);
}

fn load_llm(path: &Path) -> Result<LlmConfig> {
    let mut cfg: LlmConfig = load_config_file(path)?;
    apply_llm_env(&mut cfg);
    Ok(cfg)
}

fn load_embedder(path: Option<&Path>) -> Result<EmbedderConfig> {
    let mut cfg = match path {
        Some(p) => load_config_file(p)?,
        None => EmbedderConfig::default(),
    };
    apply_embed_env(&mut cfg);
    Ok(cfg)
}

fn build_index(db: &Path, emb: &dyn crate::Embedder, cache: Option<&Path>) -> Result<KnowledgeIndex> {
    let records = load_database(db)?;
    Ok(match cache {
        Some(c) => KnowledgeIndex::build_cached(records, emb, c)?,
        None => KnowledgeIndex::build(records, emb)?,
    })
}

fn write_output(path: &Path, body: &[u8]) -> Result<()> {
    write_atomic(path, body).with_context(|| format!("writing {}", path.display()))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Ingest { db, cache, embedder } => {
            let emb = load_embedder(embedder.as_deref())?.build()?;
            let index = build_index(&db, emb.as_ref(), cache.as_deref())?;
            println!("{}", serde_json::to_string(&index.stats())?);
            Ok(())
        }
        Command::Eval {
            db,
            dataset,
            nums,
            query_mode,
            fine_rule,
            config,
            distiller,
            cache,
            out,
        } => {
            let query_mode = match query_mode {
                QueryModeArg::Distill => QueryMode::Distill,
                QueryModeArg::History => QueryMode::History,
                QueryModeArg::LastQuestion => QueryMode::LastQuestion,
            };
            let mut pcfg: PipelineConfig = match &config {
                Some(p) => load_config_file(p)?,
                None => PipelineConfig::new(LlmConfig::scripted(vec![]), LlmConfig::scripted(vec![])),
            };
            if let Some(d) = &distiller {
                pcfg.distiller = load_config_file(d)?;
            } else if config.is_none() && query_mode == QueryMode::Distill {
                bail!("--query-mode distill needs --distiller or --config");
            }
            apply_pipeline_env(&mut pcfg);
            let pipeline = Pipeline::from_config(pcfg)?;
            let index = build_index(&db, pipeline.embedder().as_ref(), cache.as_deref())?;
            let samples = bench::load_dataset(&dataset, Some(&index))?;
            let options = EvalOptions {
                nums,
                query_mode,
                fine_rule: match fine_rule {
                    FineRuleArg::Any => FineHitRule::Any,
                    FineRuleArg::All => FineHitRule::All,
                },
            };
            let report = bench::evaluate_retrieval(&samples, &pipeline, &index, &options)?;
            let errors: Vec<&str> = report
                .per_sample
                .iter()
                .filter_map(|r| r.error.as_deref())
                .collect();
            if let Some(first) = errors.first() {
                tracing::warn!(
                    "{} of {} samples could not be evaluated and count as misses; first: {first}",
                    errors.len(),
                    report.n_samples
                );
            }
            if let Some(out) = &out {
                let mut body = serde_json::to_vec_pretty(&report)?;
                body.push(b'\n');
                write_output(out, &body)?;
            }
            print!("{}", bench::render_table(&report));
            Ok(())
        }
        Command::Arena {
            answers,
            dataset,
            referee,
            db,
            rounds,
            seed,
            k,
            initial,
            bootstrap,
            match_log,
            out,
        } => {
            let mut players = BTreeMap::new();
            for spec in &answers {
                let (id, file) = spec
                    .split_once('=')
                    .with_context(|| format!("--answers expects id=FILE, got {spec:?}"))?;
                if players
                    .insert(id.to_string(), elo::load_answers(Path::new(file))?)
                    .is_some()
                {
                    bail!("player {id} given twice");
                }
            }
            let index = match &db {
                Some(p) => Some(build_index(p, EmbedderConfig::default().build()?.as_ref(), None)?),
                None => None,
            };
            let samples = bench::load_dataset(&dataset, index.as_ref())?;
            let tsamples = elo::tournament_samples(&samples, index.as_ref());
            let referee = load_llm(&referee)?.build()?;
            let config = TournamentConfig {
                rounds,
                seed,
                k_factor: k,
                initial_rating: initial,
            };
            let schedule = elo::judge_schedule(&players, &tsamples, &LlmJudge(referee.as_ref()), rounds)?;
            let result = elo::replay(&schedule, &config);
            let medians = bootstrap.map(|m| elo::bootstrap_medians(&schedule, &config, m));
            if let Some(path) = &match_log {
                let mut body = Vec::new();
                for m in &result.state.match_log {
                    serde_json::to_writer(&mut body, m)?;
                    body.push(b'\n');
                }
                write_output(path, &body)?;
            }
            if let Some(out) = &out {
                let report = json!({
                    "config": result.config,
                    "defaults_note": "initial rating, K-factor, rounds and referee prompt are configurable defaults",
                    "ranking": result.ranking,
                    "matches": result.state.match_log.len(),
                    "skipped": result.skipped,
                    "bootstrap_medians": medians,
                });
                let mut body = serde_json::to_vec_pretty(&report)?;
                body.push(b'\n');
                write_output(out, &body)?;
            }
            print!("{}", elo::render_ranking(&result.ranking));
            Ok(())
        }
        Command::Synth {
            questions,
            teacher,
            template,
            out,
        } => {
            let text = std::fs::read_to_string(&questions)
                .with_context(|| format!("reading {}", questions.display()))?;
            let qs: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect();
            let template = match &template {
                Some(p) => DistillTemplate::load(p)?,
                None => DistillTemplate::default(),
            };
            let teacher = load_llm(&teacher)?.build()?;
            let outcome = generate_synthetic_pairs(&qs, teacher.as_ref(), &template)?;
            let mut body = Vec::new();
            for p in &outcome.pairs {
                serde_json::to_writer(&mut body, p)?;
                body.push(b'\n');
            }
            write_output(&out, &body)?;
            eprintln!(
                "{}",
                json!({"written": outcome.pairs.len(), "dropped": outcome.dropped.len()})
            );
            Ok(())
        }
        Command::Serve { config } => {
            let mut cfg = ServiceConfig::load(&config)?;
            apply_pipeline_env(&mut cfg.pipeline);
            let addr = service::check_bind(&cfg.listen, cfg.allow_public)?;
            let state = Arc::new(AppState::from_config(&cfg)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(
                state,
                addr,
                |bound| {
                    tracing::info!(%bound, "service started");
                    println!("listening on http://{bound}");
                    let _ = std::io::stdout().flush();
                },
                async {
                    let _ = tokio::signal::ctrl_c().await;
                },
            ))?;
            Ok(())
        }
        Command::Search {
            db,
            q,
            granularity,
            num,
            mode,
            fanout,
            embedder,
            cache,
        } => {
            let emb = load_embedder(embedder.as_deref())?.build()?;
            let index = build_index(&db, emb.as_ref(), cache.as_deref())?;
            let mode = match mode {
                ModeArg::Hierarchical => FineMode::Hierarchical,
                ModeArg::Flat => FineMode::Flat,
            };
            let result = match granularity {
                GranularityArg::Coarse => index.search_coarse(&q, num, emb.as_ref())?,
                GranularityArg::Fine => index.search_fine(&q, num, emb.as_ref(), mode, fanout)?,
            };
            debug_assert!(matches!(
                result.granularity,
                Granularity::Coarse | Granularity::Fine
            ));
            println!("{}", serde_json::to_string_pretty(&result)?);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["distillrag", "eval", "--dataset", "x.jsonl"]), 2);
        assert_eq!(run(["distillrag", "bogus"]), 2);
        assert_eq!(run(["distillrag", "search", "--db", "x", "--q", "y", "--wat"]), 2);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["distillrag", "--help"]), 0);
    }

    #[test]
    fn runtime_failure_exits_one() {
        assert_eq!(run(["distillrag", "ingest", "--db", "/nonexistent/db.json"]), 1);
    }

    #[test]
    fn env_overrides_only_touch_remote() {
        let mut scripted = LlmConfig::scripted(vec![]);
        let mut remote = LlmConfig::remote("http://a", "m");
        // SAFETY: test-local variable names; no other test reads them.
        unsafe { std::env::set_var(ENV_LLM_KEY, "secret") };
        apply_llm_env(&mut scripted);
        apply_llm_env(&mut remote);
        unsafe { std::env::remove_var(ENV_LLM_KEY) };
        assert_eq!(scripted.api_key, None);
        assert_eq!(remote.api_key.as_deref(), Some("secret"));
    }
}
