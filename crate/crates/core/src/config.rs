//! Run configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use alora_autodiff::DType;
use serde::{Deserialize, Serialize};

use crate::data::TaskSpec;
use crate::error::{AloraError, Result};
use crate::grad_align::GaConfig;
use crate::model::{initial_rank, ModelConfig};
use crate::optim::OptimConfig;
use crate::regularizers::HardConcreteConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Ablation,
    DnasBaseline,
    L0Baseline,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ablation => "ablation",
            Strategy::DnasBaseline => "dnas_baseline",
            Strategy::L0Baseline => "l0_baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ablation" => Some(Strategy::Ablation),
            "dnas_baseline" => Some(Strategy::DnasBaseline),
            "l0_baseline" => Some(Strategy::L0Baseline),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DnasConfig {
    /// Share of the training set held out as `D_2` for gate-logit steps.
    pub d2_frac: f64,
    pub train_gates: bool,
}

impl Default for DnasConfig {
    fn default() -> Self {
        Self {
            d2_frac: 0.2,
            train_gates: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct L0Config {
    /// Steps between pruning passes.
    pub t_p: u64,
    /// Ranks whose `log θ` falls below this are pruned.
    pub zeta0: f64,
    pub init_log_theta: f64,
}

impl Default for L0Config {
    fn default() -> Self {
        Self {
            t_p: 400,
            zeta0: -1.0,
            init_log_theta: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AllocatorConfig {
    pub r_target: usize,
    /// Warm-up epochs before the first round.
    pub k1: usize,
    /// Recovery epochs after each round.
    pub k2: usize,
    pub n_a: usize,
    /// Ranks pruned per round; `None` means `max(1, r_target / 16)`.
    pub r1: Option<usize>,
    pub val_batch_size: usize,
    /// Warm-up stops early after this many epochs without a validation improvement.
    pub patience: usize,
    pub strategy: Strategy,
    pub dnas: DnasConfig,
    pub l0: L0Config,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        Self {
            r_target: 48,
            k1: 3,
            k2: 1,
            n_a: 4,
            r1: None,
            val_batch_size: 64,
            patience: 3,
            strategy: Strategy::Ablation,
            dnas: DnasConfig::default(),
            l0: L0Config::default(),
        }
    }
}

impl AllocatorConfig {
    pub fn r1(&self) -> usize {
        self.r1.unwrap_or_else(|| (self.r_target / 16).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.r1() == 0 {
            return Err(AloraError::config("allocator.r1", "must be at least 1"));
        }
        if self.n_a * self.r1() >= self.r_target {
            return Err(AloraError::config(
                "allocator.n_a",
                format!(
                    "n_a · r1 = {} must stay below r_target = {}",
                    self.n_a * self.r1(),
                    self.r_target
                ),
            ));
        }
        if self.val_batch_size == 0 {
            return Err(AloraError::config("allocator.val_batch_size", "must be positive"));
        }
        if self.patience == 0 {
            return Err(AloraError::config("allocator.patience", "must be positive"));
        }
        if !(self.dnas.d2_frac > 0.0 && self.dnas.d2_frac < 1.0) {
            return Err(AloraError::config("allocator.dnas.d2_frac", "must lie in (0, 1)"));
        }
        if self.l0.t_p == 0 {
            return Err(AloraError::config("allocator.l0.t_p", "must be positive"));
        }
        if !self.l0.zeta0.is_finite() || !self.l0.init_log_theta.is_finite() {
            return Err(AloraError::config("allocator.l0", "thresholds must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    pub ortho_weight: f64,
    pub l0_weight: f64,
    pub hard_concrete: HardConcreteConfig,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            ortho_weight: 0.1,
            l0_weight: 1e-3,
            hard_concrete: HardConcreteConfig::default(),
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, w) in [
            ("regularizers.ortho_weight", self.ortho_weight),
            ("regularizers.l0_weight", self.l0_weight),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(AloraError::config(field, "must be finite and non-negative"));
            }
        }
        self.hard_concrete.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub output_dir: PathBuf,
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub allocator: AllocatorConfig,
    pub regularizers: RegConfig,
    pub grad_align: GaConfig,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            output_dir: PathBuf::from("runs/default"),
            task: TaskSpec::default(),
            model: ModelConfig::default(),
            allocator: AllocatorConfig::default(),
            regularizers: RegConfig::default(),
            grad_align: GaConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl RunConfig {
    /// Checks every sub-config and their agreement.
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.allocator.validate()?;
        self.regularizers.validate()?;
        self.grad_align.validate()?;
        self.optim.validate()?;
        initial_rank(&self.model, self.allocator.r_target)?;
        if self.task.vocab != self.model.vocab {
            return Err(AloraError::config(
                "model.vocab",
                format!("{} differs from task.vocab = {}", self.model.vocab, self.task.vocab),
            ));
        }
        if self.task.seq_len - 1 > self.model.max_seq_len {
            return Err(AloraError::config(
                "model.max_seq_len",
                format!("inputs of task.seq_len - 1 = {} tokens do not fit", self.task.seq_len - 1),
            ));
        }
        if self.allocator.val_batch_size > self.task.val_size {
            return Err(AloraError::config(
                "allocator.val_batch_size",
                format!("exceeds task.val_size = {}", self.task.val_size),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| AloraError::Config {
            field: "<file>".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AloraError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            AloraError::Config { field, reason } if field == "<file>" => {
                AloraError::format(path, reason)
            }
            other => other,
        })
    }

    /// Sets one dotted field, e.g. `set("optim.lr", "0.01")`. The value is read
    /// as a TOML literal, falling back to a bare string. Does not validate.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).expect("config serializes");
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let (last, parents) = parts.split_last().expect("split yields one part");
        let mut table = root.as_table_mut().expect("config is a table");
        for p in parents {
            table = table
                .get_mut(*p)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| AloraError::config(key, "unknown field"))?;
        }
        table.insert(last.to_string(), parsed);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| AloraError::config(key, e.message().to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Optimizer steps per training epoch.
    pub fn steps_per_epoch(&self) -> u64 {
        let n = match self.allocator.strategy {
            Strategy::DnasBaseline => d1_size(self.task.train_size, self.allocator.dnas.d2_frac),
            _ => self.task.train_size,
        };
        n.div_ceil(self.optim.batch_size) as u64
    }

    /// Steps if no early stop triggers.
    pub fn planned_steps(&self) -> u64 {
        let a = &self.allocator;
        (a.k1 + a.n_a * a.k2) as u64 * self.steps_per_epoch()
    }
}

/// Size of `D_1` after holding out `d2_frac` of `n` examples.
pub fn d1_size(n: usize, d2_frac: f64) -> usize {
    let d2 = ((n as f64) * d2_frac).round() as usize;
    n - d2.clamp(1, n.saturating_sub(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.allocator.r1(), 3);
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.planned_steps(), 7 * 288);
    }

    #[test]
    fn dotted_set() {
        let mut cfg = RunConfig::default();
        cfg.set("optim.lr", "0.01").unwrap();
        cfg.set("precision", "f64").unwrap();
        cfg.set("allocator.r1", "2").unwrap();
        cfg.set("grad_align.mode", "soft").unwrap();
        assert_eq!((cfg.optim.lr, cfg.precision, cfg.allocator.r1()), (0.01, Precision::F64, 2));
        assert_eq!(cfg.grad_align.mode, crate::grad_align::GaMode::Soft);
        assert!(cfg.set("optim.nope", "1").is_err());
        assert!(cfg.set("nope.lr", "1").is_err());
        assert!(cfg.set("precision", "f16").is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 7\n[model]\nd_model = 32\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.model.layers, 2);
    }

    #[test]
    fn rejection_names_the_field() {
        let cases = [
            ("[grad_align]\nalpha = 2.0\n", "grad_align.alpha"),
            ("[model]\nheads = 5\n", "model.heads"),
            ("[allocator]\nr_target = 50\n", "allocator.r_target"),
            ("[allocator]\nn_a = 16\n", "allocator.n_a"),
            ("[model]\nvocab = 40\n", "model.vocab"),
            ("[regularizers.hard_concrete]\ngamma_lower = 1.1\n", "regularizers.gamma_lower"),
        ];
        for (text, field) in cases {
            match RunConfig::from_toml_str(text) {
                Err(AloraError::Config { field: f, .. }) => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: expected a config error, got {other:?}"),
            }
        }
        assert!(RunConfig::from_toml_str("bogus = 1\n").is_err());
    }
}
