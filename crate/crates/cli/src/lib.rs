//! Config-driven entry points behind the `dscp` binary.
//!
//! Every command takes its inputs explicitly and keeps no global state, so two
//! commands in one process give the same files as two processes.

use std::cell::RefCell;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use dscp::envs::EnvConfig;
use dscp::netgraph::GraphSpec;
use dscp::policy::{Checkpoint, Execution, ParamLayout, SoftmaxPolicy};
use dscp::rng::{stream_rng, Stream};
use dscp::trainer::{evaluate_policy, Evaluation, TrainRecord, Trainer};
use dscp::verify::{self, Level, Report};
use dscp::{DscpConfig, Error, FactoredModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const GIT_DESCRIBE: &str = env!("DSCP_GIT_DESCRIBE");

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Invariant(String),
    VerifyFailed,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Invariant(_) => EXIT_INVARIANT,
            CliError::VerifyFailed => EXIT_VERIFY_FAILED,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Invariant(m) => write!(f, "invariant violated: {m}"),
            CliError::VerifyFailed => write!(f, "verification failed"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::BoundViolated { .. }
            | Error::InvariantViolated(_)
            | Error::NonPositiveWeight { .. }
            | Error::HorizonOverflow(_) => CliError::Invariant(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphSpec>,
    #[serde(default)]
    pub dscp: DscpConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl RunConfig {
    pub fn from_value(value: Value) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| CliError::Config(format!("schema: {e}")))?;
        if cfg.seeds.is_empty() {
            return Err(CliError::Config("schema: seeds must not be empty".into()));
        }
        Ok(cfg)
    }

    /// Builds the model and checks the training block against it.
    pub fn build_model(&self) -> CliResult<FactoredModel> {
        let model = self.env.build(self.graph.as_ref())?;
        self.dscp.validate(&model)?;
        Ok(model)
    }
}

/// Sets `path` (dot separated) in `root` to `raw`, parsed as JSON when it
/// parses and as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("override key {path:?} is malformed")));
    }
    for key in &keys[..keys.len() - 1] {
        let map = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override {path:?} descends into a non-object")))?;
        node = map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| CliError::Config(format!("override {path:?} descends into a non-object")))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

pub fn read_json(path: &Path) -> CliResult<Value> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// Reads `path`, applies `overrides` in order and validates the result.
pub fn load_config(path: &Path, overrides: &[String]) -> CliResult<RunConfig> {
    let mut value = read_json(path)?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    RunConfig::from_value(value)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSummary {
    pub seed: u64,
    pub iterations: u64,
    pub final_t: u64,
    pub final_j: f64,
    pub final_se: f64,
    pub initial_j: f64,
    pub final_grad_norm: f64,
    pub final_consensus_err: f64,
    pub iterations_to_plateau: u64,
    pub metrics: String,
    pub checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub version: String,
    pub git: String,
    pub config: RunConfig,
    pub runs: Vec<SeedSummary>,
}

/// First evaluated iteration whose objective reaches 95% of the improvement
/// from the first to the last evaluation.
pub fn iterations_to_plateau(record: &TrainRecord) -> u64 {
    let evals: Vec<(u64, f64, f64)> = record.evaluations().collect();
    let (Some(first), Some(last)) = (evals.first(), evals.last()) else { return 0 };
    let target = first.1 + 0.95 * (last.1 - first.1);
    evals.iter().find(|e| e.1 >= target).map_or(last.0, |e| e.0)
}

fn train_seed(cfg: &RunConfig, model: &FactoredModel, seed: u64, out: &Path, dump_rollouts: bool) -> CliResult<SeedSummary> {
    let dscp = DscpConfig { seed, ..cfg.dscp.clone() };
    let mut trainer = Trainer::new(model, &dscp)?;
    let dump_path = out.join(format!("rollouts_seed{seed}.jsonl"));
    let mut dump_error = None;
    if dump_rollouts {
        let file = fs::File::create(&dump_path).map_err(|e| io_err(&dump_path, e))?;
        let mut w = BufWriter::new(file);
        let errors = Rc::new(RefCell::new(None::<String>));
        let sink_errors = errors.clone();
        trainer.on_rollout(move |t, roll| {
            let line = serde_json::json!({ "t": t, "rollout": roll });
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                sink_errors.borrow_mut().get_or_insert(e.to_string());
            }
        });
        dump_error = Some(errors);
    }
    let mut record = TrainRecord::default();
    while !trainer.finished() {
        record.rows.push(trainer.step()?);
    }
    if let Some(errors) = dump_error {
        if let Some(e) = errors.borrow_mut().take() {
            return Err(io_err(&dump_path, e));
        }
    }
    let policy_cfg = (dscp.kappa_p, dscp.mixing);
    let params = trainer.into_params();

    let metrics = format!("metrics_seed{seed}.csv");
    let metrics_path = out.join(&metrics);
    let file = fs::File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    record.write_csv(BufWriter::new(file)).map_err(|e| io_err(&metrics_path, e))?;
    let checkpoint = format!("checkpoint_seed{seed}.json");
    write_json(&out.join(&checkpoint), &Checkpoint::new(&params, policy_cfg.0, policy_cfg.1))?;

    let last = record.rows.last().expect("at least one iteration");
    let (final_t, final_j, final_se) = record.final_evaluation().expect("the last iteration is evaluated");
    let initial_j = record.evaluations().next().map_or(final_j, |e| e.1);
    log::info!("seed {seed}: J(t=1) = {initial_j:.5}, J(t={final_t}) = {final_j:.5} +- {final_se:.5}");
    Ok(SeedSummary {
        seed,
        iterations: dscp.iterations,
        final_t,
        final_j,
        final_se,
        initial_j,
        final_grad_norm: last.grad_norm_est,
        final_consensus_err: last.consensus_err,
        iterations_to_plateau: iterations_to_plateau(&record),
        metrics,
        checkpoint,
    })
}

/// Trains every seed of `cfg` into `out`, writing per-seed metrics and
/// checkpoints plus `summary.json`.
pub fn train(cfg: &RunConfig, out: &Path, dump_rollouts: bool) -> CliResult<Summary> {
    let model = cfg.build_model()?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&seed| train_seed(cfg, &model, seed, out, dump_rollouts))
        .collect::<CliResult<Vec<_>>>()?;
    let summary = Summary { version: VERSION.into(), git: GIT_DESCRIBE.into(), config: cfg.clone(), runs };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub kappa_p: usize,
    pub seeds: Vec<u64>,
    pub final_j: Vec<f64>,
    pub mean_final_j: f64,
    pub mean_iterations_to_plateau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSummary {
    pub version: String,
    pub git: String,
    pub entries: Vec<SweepEntry>,
    /// Radii ordered from best to worst mean final objective.
    pub ordering: Vec<usize>,
}

pub fn parse_kappa_list(raw: &[i64]) -> CliResult<Vec<usize>> {
    if raw.is_empty() {
        return Err(CliError::Config("kappa-p list is empty".into()));
    }
    raw.iter()
        .map(|&k| usize::try_from(k).map_err(|_| CliError::Config(format!("kappa_p = {k} must be non-negative"))))
        .collect()
}

/// One training run per `(kappa_p, seed)`, each under `out/kappa_p<k>`.
pub fn sweep(cfg: &RunConfig, kappas: &[usize], out: &Path) -> CliResult<SweepSummary> {
    let configs: Vec<RunConfig> = kappas
        .iter()
        .map(|&k| {
            let mut c = cfg.clone();
            c.dscp.kappa_p = k;
            c.out_dir = out.join(format!("kappa_p{k}"));
            c.build_model().map(|_| c)
        })
        .collect::<CliResult<_>>()?;
    let summaries = configs
        .par_iter()
        .map(|c| train(c, &c.out_dir, false))
        .collect::<CliResult<Vec<_>>>()?;
    let entries: Vec<SweepEntry> = kappas
        .iter()
        .zip(&summaries)
        .map(|(&kappa_p, s)| {
            let k = s.runs.len() as f64;
            SweepEntry {
                kappa_p,
                seeds: s.runs.iter().map(|r| r.seed).collect(),
                final_j: s.runs.iter().map(|r| r.final_j).collect(),
                mean_final_j: s.runs.iter().map(|r| r.final_j).sum::<f64>() / k,
                mean_iterations_to_plateau: s.runs.iter().map(|r| r.iterations_to_plateau as f64).sum::<f64>() / k,
            }
        })
        .collect();
    let mut ordering: Vec<&SweepEntry> = entries.iter().collect();
    ordering.sort_by(|a, b| b.mean_final_j.total_cmp(&a.mean_final_j));
    let ordering = ordering.iter().map(|e| e.kappa_p).collect();
    let summary = SweepSummary { version: VERSION.into(), git: GIT_DESCRIBE.into(), entries, ordering };
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_json(&out.join("sweep.json"), &summary)?;
    Ok(summary)
}

/// Monte-Carlo objective of a saved checkpoint, using the checkpoint's own
/// radius and mixing weights.
pub fn eval(cfg: &RunConfig, checkpoint: &Path, episodes: usize, seed: u64) -> CliResult<Evaluation> {
    if episodes == 0 {
        return Err(CliError::Config("episodes must be at least 1".into()));
    }
    let model = cfg.env.build(cfg.graph.as_ref())?;
    let ck: Checkpoint = serde_json::from_value(read_json(checkpoint)?).map_err(|e| io_err(checkpoint, e))?;
    let params = ck.to_params(&ParamLayout::for_model(&model))?;
    let policy = SoftmaxPolicy::new(&model, ck.kappa_p, ck.mixing)?;
    let mut rng = stream_rng(seed, Stream::Evaluation, 1);
    let e = evaluate_policy(
        &model,
        &policy,
        Execution::True(&params),
        episodes,
        cfg.dscp.eval_mode,
        cfg.dscp.eval_epsilon,
        &mut rng,
    )?;
    Ok(e)
}

pub fn run_verify(level: Level, seed: u64) -> Report {
    verify::run(level, seed)
}
