//! Training steps and evaluation.

use alora_autodiff::{Float, Param, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RegConfig;
use crate::data::{epoch_batches, Example};
use crate::error::{AloraError, Result};
use crate::grad_align::{combine_maps, GaConfig};
use crate::model::{ForwardOptions, GateSource, SuperNetwork};
use crate::optim::Optimizer;
use crate::regularizers::orthogonal_reg;

/// Which parameters a step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepTarget {
    /// `W_A`, `W_B` with gates fixed.
    Adapters,
    /// Gate logits only (the DNAS outer step).
    GateLogits,
    /// `W_A`, `W_B` and the Hard-Concrete `log θ`, with sampled gates.
    AdaptersAndL0,
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub train_ce: f64,
    pub ortho: f64,
    pub l0: f64,
    pub ga_degrees: Option<f64>,
    pub ga_coefficient: f64,
    pub active_ranks: usize,
}

/// State threaded through a run's training steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub optimizer: Optimizer,
    /// Separate moments for gate logits in the DNAS baseline.
    pub gate_optimizer: Optimizer,
    pub reg: RegConfig,
    pub ga: GaConfig,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub log: Vec<StepRecord>,
}

fn selected_params<S: Float>(net: &mut SuperNetwork<S>, target: StepTarget) -> Vec<&mut Param<S>> {
    let mut out = Vec::new();
    match target {
        StepTarget::Adapters | StepTarget::AdaptersAndL0 => {
            for ad in &mut net.adapters {
                out.push(&mut ad.a);
                out.push(&mut ad.b);
            }
            if target == StepTarget::AdaptersAndL0 {
                if let Some(gates) = &mut net.l0_gates {
                    out.extend(gates.iter_mut().map(|g| &mut g.log_theta));
                }
            }
        }
        StepTarget::GateLogits => {
            out.extend(net.adapters.iter_mut().map(|ad| &mut ad.gate_logits));
        }
    }
    out
}

/// The default gating for evaluation: noiseless Hard-Concrete gates when
/// they are installed, the adapters' own gates otherwise.
pub fn eval_gates<S: Float>(net: &SuperNetwork<S>) -> GateSource<'static, S> {
    if net.l0_gates.is_some() {
        GateSource::HardConcreteDeterministic
    } else {
        GateSource::Current
    }
}

impl Trainer {
    pub fn new(optimizer: Optimizer, reg: RegConfig, ga: GaConfig, seed: u64) -> Self {
        let gate_optimizer = Optimizer::new(optimizer.config.clone(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(11);
        Self {
            optimizer,
            gate_optimizer,
            reg,
            ga,
            rng,
            step: 0,
            log: Vec::new(),
        }
    }

    /// One optimizer step on `batch`.
    ///
    /// The main gradient comes from the cross-entropy alone; the enabled
    /// regularizers form a second, auxiliary gradient that is merged into it
    /// by gradient alignment before the update.
    pub fn step<S: Float>(
        &mut self,
        net: &mut SuperNetwork<S>,
        batch: &[Example],
        target: StepTarget,
    ) -> Result<StepRecord> {
        let step_no = self.step + 1;
        if target == StepTarget::GateLogits {
            for ad in &mut net.adapters {
                ad.gate_logits.requires_grad = true;
            }
        }
        let ctx = |e: AloraError| e.context(format!("step {step_no}"));
        let noise: Option<Vec<Vec<f64>>> = (target == StepTarget::AdaptersAndL0).then(|| {
            net.adapters
                .iter()
                .map(|a| (0..a.rank()).map(|_| self.rng.gen::<f64>()).collect())
                .collect()
        });
        let (main, ce) = {
            let tape = Tape::new();
            let mut opts = ForwardOptions::<S> {
                train_adapters: target != StepTarget::GateLogits,
                train_gate_logits: target == StepTarget::GateLogits,
                train_l0: target == StepTarget::AdaptersAndL0,
                gates: GateSource::Current,
            };
            if let Some(u) = &noise {
                opts.gates = GateSource::HardConcreteSample(u);
            }
            let loss = net.lm_loss(&tape, batch, &opts).map_err(ctx)?;
            let ce = loss.item().as_f64();
            (tape.backward(loss).map_err(|e| ctx(e.into()))?, ce)
        };

        let use_ortho = self.reg.ortho_weight > 0.0 && target != StepTarget::GateLogits;
        let use_l0 = self.reg.l0_weight > 0.0 && target == StepTarget::AdaptersAndL0;
        let (mut ortho, mut l0) = (0.0, 0.0);
        let aux = if use_ortho || use_l0 {
            let tape = Tape::new();
            let mut total = tape.scalar(S::zero());
            if use_ortho {
                let o = orthogonal_reg(&tape, &net.adapters, true).map_err(ctx)?;
                ortho = o.item().as_f64();
                total = total.add(o.scale(self.reg.ortho_weight)?)?;
            }
            if use_l0 {
                let gates = net.l0_gates.as_ref().expect("AdaptersAndL0 needs installed gates");
                for (g, ad) in gates.iter().zip(&net.adapters) {
                    let active = ad.active_indices();
                    if active.is_empty() {
                        continue;
                    }
                    let e = g.expected_l0_on(tape.param(&g.log_theta), &active)?;
                    l0 += e.item().as_f64();
                    total = total.add(e.scale(self.reg.l0_weight)?)?;
                }
            }
            Some(tape.backward(total).map_err(|e| ctx(e.into()))?)
        } else {
            None
        };

        let (grads, ga) = match &aux {
            Some(aux) => {
                let (g, s) = combine_maps(&main, aux, &self.ga)?;
                (g, Some(s))
            }
            None => (main, None),
        };
        let opt = if target == StepTarget::GateLogits {
            &mut self.gate_optimizer
        } else {
            &mut self.optimizer
        };
        let updated = opt.step(selected_params(net, target), &grads).map_err(ctx);
        if target == StepTarget::GateLogits {
            for ad in &mut net.adapters {
                ad.gate_logits.requires_grad = false;
            }
        }
        updated?;
        self.step += 1;
        let record = StepRecord {
            step: self.step,
            train_ce: ce,
            ortho,
            l0,
            ga_degrees: ga.as_ref().and_then(|s| s.degrees),
            ga_coefficient: ga.as_ref().map_or(1.0, |s| s.coefficient),
            active_ranks: net.active_total(),
        };
        self.log.push(record.clone());
        Ok(record)
    }

    /// One pass over `examples` in a shuffled order fixed by `order_seed`.
    /// `after_step` runs after every update.
    pub fn epoch<S: Float>(
        &mut self,
        net: &mut SuperNetwork<S>,
        examples: &[Example],
        batch_size: usize,
        order_seed: u64,
        mut after_step: impl FnMut(&mut Self, &mut SuperNetwork<S>) -> Result<()>,
    ) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
        for idx in epoch_batches(examples.len(), batch_size, &mut rng) {
            let batch: Vec<Example> = idx.iter().map(|&i| examples[i].clone()).collect();
            let target = if net.l0_gates.is_some() {
                StepTarget::AdaptersAndL0
            } else {
                StepTarget::Adapters
            };
            self.step(net, &batch, target)?;
            after_step(self, net)?;
        }
        Ok(())
    }
}

/// Held-out metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    /// Mean cross-entropy per target token.
    pub ce: f64,
    /// Share of sequences whose every target token is the argmax prediction.
    /// Under teacher forcing this equals greedy-decoding exact match.
    pub exact_match: f64,
}

pub const EVAL_CHUNK: usize = 64;

/// Evaluates `examples` under a gate source.
pub fn evaluate<S: Float>(
    net: &SuperNetwork<S>,
    examples: &[Example],
    gates: GateSource<'_, S>,
) -> Result<EvalStats> {
    if examples.is_empty() {
        return Err(AloraError::Contract("evaluate on an empty split".into()));
    }
    let (mut nll, mut tokens, mut exact) = (0.0, 0usize, 0usize);
    let v = net.config.vocab;
    for chunk in examples.chunks(EVAL_CHUNK) {
        let inputs: Vec<&[usize]> = chunk.iter().map(Example::inputs).collect();
        let logits = net.logits(&inputs, gates)?;
        let t = inputs[0].len();
        for (b, ex) in chunk.iter().enumerate() {
            let mut all = true;
            for (p, target) in ex.targets().into_iter().enumerate() {
                let Some(y) = target else { continue };
                let row = &logits.data()[(b * t + p) * v..(b * t + p + 1) * v];
                let max = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
                let lse = max.as_f64()
                    + row
                        .iter()
                        .map(|&x| (x - max).as_f64().exp())
                        .sum::<f64>()
                        .ln();
                nll += lse - row[y].as_f64();
                tokens += 1;
                let argmax = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &x)| if x > row[best] { i } else { best });
                all &= argmax == y;
            }
            exact += all as usize;
        }
    }
    if tokens == 0 {
        return Err(AloraError::Contract("no target tokens to evaluate".into()));
    }
    let ce = nll / tokens as f64;
    if !ce.is_finite() {
        return Err(AloraError::Numeric("evaluation loss".into()));
    }
    Ok(EvalStats {
        ce,
        exact_match: exact as f64 / examples.len() as f64,
    })
}
