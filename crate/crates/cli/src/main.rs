use std::path::PathBuf;
use std::process::ExitCode;

use alora_core::config::RunConfig;
use alora_core::harness;
use alora_core::report;
use alora_core::selftest;
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

/// Adapter rank allocation on a toy transformer.
#[derive(Parser)]
#[command(name = "alora", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with the selected strategy, evaluate and write artifacts.
    Train(ConfigArgs),
    /// Resume a run directory and perform extra allocation rounds.
    Allocate {
        /// Directory written by `train`.
        run_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        rounds: usize,
    },
    /// Evaluate a checkpoint on the task's test split.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print allocation tables from a history file.
    Report {
        history: PathBuf,
        /// Per-step angle CSV to histogram.
        #[arg(long)]
        angles: Option<PathBuf>,
        /// Emit JSON instead of text tables.
        #[arg(long)]
        json: bool,
    },
    /// Run the quick oracle checks.
    Selftest,
}

/// Run configuration: a TOML file, then per-field flags on top.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// copy, reverse or modular_add.
    #[arg(long)]
    task: Option<String>,
    /// Sets both the task and model vocabulary.
    #[arg(long)]
    vocab: Option<usize>,
    /// Sets the task length; the model context follows.
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    /// ablation, dnas_baseline or l0_baseline.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    r_target: Option<usize>,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    n_a: Option<usize>,
    #[arg(long)]
    r1: Option<usize>,
    #[arg(long)]
    val_batch_size: Option<usize>,
    #[arg(long)]
    ortho_weight: Option<f64>,
    #[arg(long)]
    l0_weight: Option<f64>,
    /// soft, hard or off.
    #[arg(long)]
    ga_mode: Option<String>,
    #[arg(long)]
    ga_alpha: Option<f64>,
    /// sgd_momentum or adaptive.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_frac: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Any other field as `dotted.key=value`, e.g. `allocator.patience=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut pairs: Vec<(&str, String)> = Vec::new();
        let mut push = |key: &'static str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((key, v));
            }
        };
        let num = |v: Option<usize>| v.map(|x| x.to_string());
        let float = |v: Option<f64>| v.map(|x| format!("{x:?}"));
        let text = |v: &Option<String>| v.as_ref().map(|s| format!("{s:?}"));
        push("seed", self.seed.map(|x| x.to_string()));
        push("precision", text(&self.precision));
        push("task.kind", text(&self.task));
        push("task.vocab", num(self.vocab));
        push("model.vocab", num(self.vocab));
        push("task.seq_len", num(self.seq_len));
        push("model.max_seq_len", num(self.seq_len));
        push("task.train_size", num(self.train_size));
        push("task.val_size", num(self.val_size));
        push("task.test_size", num(self.test_size));
        push("model.layers", num(self.layers));
        push("model.d_model", num(self.d_model));
        push("model.heads", num(self.heads));
        push("model.d_ff", num(self.d_ff));
        push("allocator.strategy", text(&self.strategy));
        push("allocator.r_target", num(self.r_target));
        push("allocator.k1", num(self.k1));
        push("allocator.k2", num(self.k2));
        push("allocator.n_a", num(self.n_a));
        push("allocator.r1", num(self.r1));
        push("allocator.val_batch_size", num(self.val_batch_size));
        push("regularizers.ortho_weight", float(self.ortho_weight));
        push("regularizers.l0_weight", float(self.l0_weight));
        push("grad_align.mode", text(&self.ga_mode));
        push("grad_align.alpha", float(self.ga_alpha));
        push("optim.kind", text(&self.optimizer));
        push("optim.lr", float(self.lr));
        push("optim.warmup_frac", float(self.warmup_frac));
        push("optim.batch_size", num(self.batch_size));
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .with_context(|| format!("--set {s}: expected KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.output_dir = match &self.output_dir {
            Some(dir) => dir.clone(),
            None => harness::resolve_output_dir(&cfg.output_dir),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let report = harness::train_eval(&cfg)
                .with_context(|| format!("run in {}", cfg.output_dir.display()))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            eprintln!("artifacts written to {}", cfg.output_dir.display());
        }
        Command::Allocate { run_dir, rounds } => {
            let report = harness::allocate_more(&run_dir, rounds)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Eval { checkpoint, config } => {
            let cfg = config.resolve()?;
            let stats = harness::eval_checkpoint(&checkpoint, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Report { history, angles, json } => {
            let summary = report::summarize(&history, angles.as_deref())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&summary)?);
            } else {
                print!("{}", summary.render());
            }
        }
        Command::Selftest => {
            let checks = selftest::run_all()?;
            let mut ok = true;
            for c in &checks {
                let status = if c.passed() { "PASS" } else { "FAIL" };
                println!("{status}  {:<40} {:.3e} (tol {:.0e})", c.name, c.value, c.tolerance);
                ok &= c.passed();
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg = if msg.is_empty() { cause } else { format!("{msg}: {cause}") };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
