//! Synthetic sequence tasks.
//!
//! Every example is `prompt ++ [SEP] ++ target`, padded to the task's
//! sequence length. Only target tokens are scored.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AloraError, Result};

pub const PAD: usize = 0;
pub const SEP: usize = 1;
pub const PLUS: usize = 2;
/// First token id available for content symbols and digits.
pub const FIRST_SYMBOL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ModularAdd,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ModularAdd => "modular_add",
        }
    }

    /// Target tokens for a prompt.
    ///
    /// For `ModularAdd` the prompt is both operands' digits back to back,
    /// least significant digit first, each digit written as a token
    /// `FIRST_SYMBOL + d`. The target is the sum modulo `base^n` in the same
    /// encoding.
    pub fn target(self, prompt: &[usize], vocab: usize) -> Vec<usize> {
        match self {
            TaskKind::Copy => prompt.to_vec(),
            TaskKind::Reverse => prompt.iter().rev().copied().collect(),
            TaskKind::ModularAdd => {
                let base = vocab - FIRST_SYMBOL;
                let n = prompt.len() / 2;
                let (a, b) = prompt.split_at(n);
                let mut carry = 0;
                a.iter()
                    .zip(b)
                    .map(|(&x, &y)| {
                        let s = (x - FIRST_SYMBOL) + (y - FIRST_SYMBOL) + carry;
                        carry = s / base;
                        FIRST_SYMBOL + s % base
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            vocab: 32,
            seq_len: 24,
            train_size: 4608,
            val_size: 512,
            test_size: 512,
            seed: 0,
        }
    }
}

impl TaskSpec {
    /// Symbols per prompt operand: the copied string for copy/reverse, the
    /// digit count per operand for modular addition.
    pub fn operand_len(&self) -> usize {
        match self.kind {
            TaskKind::Copy | TaskKind::Reverse => self.seq_len.saturating_sub(1) / 2,
            TaskKind::ModularAdd => self.seq_len.saturating_sub(2) / 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 4 {
            return Err(AloraError::config("task.vocab", "must be at least 4"));
        }
        if self.operand_len() == 0 {
            let need = match self.kind {
                TaskKind::ModularAdd => 5,
                _ => 3,
            };
            return Err(AloraError::config(
                "task.seq_len",
                format!("{} needs seq_len >= {need}", self.kind.name()),
            ));
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(AloraError::config("task.*_size", "every split must be nonempty"));
        }
        Ok(())
    }

    fn alphabet(&self) -> usize {
        self.vocab - FIRST_SYMBOL
    }

    /// Number of distinct prompts; splits are drawn without repetition.
    fn prompt_space(&self) -> f64 {
        let n = self.operand_len() as f64;
        let a = self.alphabet() as f64;
        match self.kind {
            TaskKind::ModularAdd => a.powf(2.0 * n),
            _ => a.powf(n),
        }
    }
}

/// One scored sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    /// `true` where `tokens[i]` is a target the model must predict.
    pub target_mask: Vec<bool>,
}

impl Example {
    pub fn inputs(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Next-token targets aligned with [`Example::inputs`].
    pub fn targets(&self) -> Vec<Option<usize>> {
        (1..self.tokens.len())
            .map(|i| self.target_mask[i].then_some(self.tokens[i]))
            .collect()
    }

    pub fn target_len(&self) -> usize {
        self.target_mask.iter().filter(|m| **m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

/// Assembles `prompt ++ SEP ++ target` with padding.
pub fn build_example(spec: &TaskSpec, prompt: &[usize]) -> Example {
    let target = spec.kind.target(prompt, spec.vocab);
    let mut tokens = Vec::with_capacity(spec.seq_len);
    match spec.kind {
        TaskKind::ModularAdd => {
            let n = prompt.len() / 2;
            tokens.extend_from_slice(&prompt[..n]);
            tokens.push(PLUS);
            tokens.extend_from_slice(&prompt[n..]);
        }
        _ => tokens.extend_from_slice(prompt),
    }
    tokens.push(SEP);
    let target_start = tokens.len();
    tokens.extend_from_slice(&target);
    let mut target_mask = vec![false; tokens.len()];
    target_mask[target_start..].iter_mut().for_each(|m| *m = true);
    while tokens.len() < spec.seq_len {
        tokens.push(PAD);
        target_mask.push(false);
    }
    Example {
        tokens,
        target_mask,
    }
}

fn split_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generates disjoint train/val/test splits. Each split has its own seeded
/// stream and prompts already used by an earlier split are redrawn.
pub fn gen_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let total = (spec.train_size + spec.val_size + spec.test_size) as f64;
    if total > spec.prompt_space() {
        return Err(AloraError::config(
            "task.train_size",
            format!(
                "{total} examples requested but only {} distinct prompts exist",
                spec.prompt_space()
            ),
        ));
    }
    let symbols = match spec.kind {
        TaskKind::ModularAdd => 2 * spec.operand_len(),
        _ => spec.operand_len(),
    };
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut draw = |size: usize, stream: u64| {
        let mut rng = split_rng(spec.seed, stream);
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            let prompt: Vec<usize> = (0..symbols)
                .map(|_| FIRST_SYMBOL + rng.gen_range(0..spec.alphabet()))
                .collect();
            if seen.insert(prompt.clone()) {
                out.push(build_example(spec, &prompt));
            }
        }
        out
    };
    let train = draw(spec.train_size, 1);
    let val = draw(spec.val_size, 2);
    let test = draw(spec.test_size, 3);
    Ok(Dataset {
        spec: spec.clone(),
        train,
        val,
        test,
    })
}

/// Shuffled mini-batches of indices for one epoch.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// `count` examples sampled without replacement.
pub fn sample_batch<R: Rng + ?Sized>(pool: &[Example], count: usize, rng: &mut R) -> Vec<Example> {
    let count = count.min(pool.len());
    rand::seq::index::sample(rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect()
}
