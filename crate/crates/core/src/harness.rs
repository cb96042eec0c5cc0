//! End-to-end runs: build, train with the configured strategy, evaluate and
//! write every artifact to the output directory.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use alora_autodiff::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::{extra_rounds, run_strategy, RunOutcome};
use crate::checkpoint;
use crate::config::{Precision, RunConfig, Strategy};
use crate::data::{gen_task, Dataset};
use crate::error::{AloraError, Result};
use crate::history::AllocationHistory;
use crate::model::{build_supernetwork, ModuleId, SuperNetwork};
use crate::train::{eval_gates, evaluate, EvalStats, StepRecord};

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_JSON: &str = "history.json";
pub const HISTORY_CSV: &str = "history.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const ANGLES_CSV: &str = "angles.csv";
pub const REPORT_JSON: &str = "report.json";

/// Final summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: Strategy,
    pub precision: Precision,
    pub seed: u64,
    pub steps: u64,
    pub epochs: usize,
    pub rounds: usize,
    pub val_ce: f64,
    pub test_ce: f64,
    pub test_exact_match: f64,
    pub active_total: usize,
    /// Active ranks per module label.
    pub rank_map: BTreeMap<String, usize>,
}

/// A finished in-memory run.
#[derive(Debug, Clone)]
pub struct Run<S> {
    pub net: SuperNetwork<S>,
    pub data: Dataset,
    pub outcome: RunOutcome,
    pub report: RunReport,
}

fn rank_map<S: Float>(net: &SuperNetwork<S>) -> BTreeMap<String, usize> {
    net.rank_map()
        .into_iter()
        .enumerate()
        .map(|(m, r)| (ModuleId(m).label(), r))
        .collect()
}

/// Builds the network and dataset for a config.
pub fn prepare<S: Float>(config: &RunConfig) -> Result<(SuperNetwork<S>, Dataset)> {
    config.validate()?;
    let data = gen_task(&config.task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let net = build_supernetwork(&config.model, config.allocator.r_target, &mut rng)?;
    Ok((net, data))
}

/// Trains and evaluates without touching the filesystem.
pub fn run_in_memory<S: Float>(config: &RunConfig) -> Result<Run<S>> {
    let (mut net, data) = prepare::<S>(config)?;
    let outcome = run_strategy(&mut net, &data, config)?;
    let report = summarize(config, &net, &data, &outcome)?;
    Ok(Run {
        net,
        data,
        outcome,
        report,
    })
}

fn summarize<S: Float>(config: &RunConfig, net: &SuperNetwork<S>, data: &Dataset, outcome: &RunOutcome) -> Result<RunReport> {
    let gates = eval_gates(net);
    let val = evaluate(net, &data.val, gates)?;
    let test = evaluate(net, &data.test, gates)?;
    Ok(RunReport {
        strategy: config.allocator.strategy,
        precision: config.precision,
        seed: config.seed,
        steps: outcome.trainer.step,
        epochs: outcome.epochs,
        rounds: outcome.history.rounds.len(),
        val_ce: val.ce,
        test_ce: test.ce,
        test_exact_match: test.exact_match,
        active_total: net.active_total(),
        rank_map: rank_map(net),
    })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> AloraError + '_ {
    move |e| AloraError::io(path, e)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> AloraError + '_ {
    move |e| AloraError::format(path, e.to_string())
}

/// Per-step metrics: `step, train_ce, ortho, l0, ga_degrees, active_ranks`.
pub fn write_metrics(path: &Path, log: &[StepRecord]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["step", "train_ce", "ortho", "l0", "ga_degrees", "active_ranks"])
        .map_err(csv_err(path))?;
    for r in log {
        w.write_record([
            r.step.to_string(),
            r.train_ce.to_string(),
            r.ortho.to_string(),
            r.l0.to_string(),
            r.ga_degrees.map_or(String::new(), |d| d.to_string()),
            r.active_ranks.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Angle stream: `step, degrees, coefficient`, one row per step with a
/// defined angle.
pub fn write_angles(path: &Path, log: &[StepRecord]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["step", "degrees", "coefficient"])
        .map_err(csv_err(path))?;
    for r in log {
        if let Some(d) = r.ga_degrees {
            w.write_record([r.step.to_string(), d.to_string(), r.ga_coefficient.to_string()])
                .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn read_angles(path: &Path) -> Result<Vec<(u64, f64, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<(u64, f64, f64)>, _>>()
        .map_err(csv_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| AloraError::format(path, e.to_string()))
}

fn write_artifacts<S: Float>(dir: &Path, config: &RunConfig, run: &Run<S>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    std::fs::write(dir.join(CONFIG_FILE), config.to_toml()).map_err(io_err(&dir.join(CONFIG_FILE)))?;
    checkpoint::save(&run.net, &dir.join(CHECKPOINT_FILE))?;
    run.outcome.history.save_json(&dir.join(HISTORY_JSON))?;
    run.outcome.history.save_csv(&dir.join(HISTORY_CSV))?;
    write_metrics(&dir.join(METRICS_CSV), &run.outcome.trainer.log)?;
    write_angles(&dir.join(ANGLES_CSV), &run.outcome.trainer.log)?;
    write_json(&dir.join(REPORT_JSON), &run.report)
}

fn train_eval_typed<S: Float>(config: &RunConfig) -> Result<RunReport> {
    let run = run_in_memory::<S>(config)?;
    write_artifacts(&config.output_dir, config, &run)?;
    Ok(run.report)
}

/// Runs the configured strategy and writes the checkpoint, history, metrics
/// and report into `config.output_dir`.
pub fn train_eval(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    match config.precision {
        Precision::F32 => train_eval_typed::<f32>(config),
        Precision::F64 => train_eval_typed::<f64>(config),
    }
}

/// Test-split metrics of a saved checkpoint on the config's task.
pub fn eval_checkpoint(checkpoint_path: &Path, config: &RunConfig) -> Result<EvalStats> {
    config.validate()?;
    fn typed<S: Float>(path: &Path, config: &RunConfig) -> Result<EvalStats> {
        let net: SuperNetwork<S> = checkpoint::load(path)?;
        if net.config != config.model {
            return Err(AloraError::config("model", "checkpoint architecture differs from the config"));
        }
        let data = gen_task(&config.task)?;
        evaluate(&net, &data.test, eval_gates(&net))
    }
    match config.precision {
        Precision::F32 => typed::<f32>(checkpoint_path, config),
        Precision::F64 => typed::<f64>(checkpoint_path, config),
    }
}

/// Resumes a run directory and performs `rounds` extra ablation rounds.
/// Writes `model.ckpt`, `history_extra.json`/`.csv` and `report.json` back.
pub fn allocate_more(run_dir: &Path, rounds: usize) -> Result<RunReport> {
    let config = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    fn typed<S: Float>(run_dir: &Path, config: &RunConfig, rounds: usize) -> Result<RunReport> {
        let ckpt = run_dir.join(CHECKPOINT_FILE);
        let mut net: SuperNetwork<S> = checkpoint::load(&ckpt)?;
        let data = gen_task(&config.task)?;
        let previous = AllocationHistory::load_json(&run_dir.join(HISTORY_JSON))
            .map(|h| h.rounds.len())
            .unwrap_or(0);
        if net.active_total() <= rounds * config.allocator.r1() {
            return Err(AloraError::config(
                "rounds",
                format!("{rounds} rounds would prune every active rank"),
            ));
        }
        let outcome = extra_rounds(&mut net, &data, config, rounds, previous + 1)?;
        checkpoint::save(&net, &ckpt)?;
        outcome.history.save_json(&run_dir.join("history_extra.json"))?;
        outcome.history.save_csv(&run_dir.join("history_extra.csv"))?;
        let report = summarize(config, &net, &data, &outcome)?;
        write_json(&run_dir.join(REPORT_JSON), &report)?;
        Ok(report)
    }
    match config.precision {
        Precision::F32 => typed::<f32>(run_dir, &config, rounds),
        Precision::F64 => typed::<f64>(run_dir, &config, rounds),
    }
}

/// Output directory with the environment override applied.
pub fn resolve_output_dir(configured: &Path) -> PathBuf {
    match std::env::var_os("ALORA_OUTPUT_DIR") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => configured.to_path_buf(),
    }
}
