//! Ablation-based rank importance, the reallocation loop and the two
//! baseline allocators.

use std::collections::{BTreeMap, BTreeSet};

use alora_autodiff::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{d1_size, RunConfig, Strategy};
use crate::data::{sample_batch, Dataset, Example};
use crate::error::{AloraError, Result};
use crate::history::{AllocationHistory, RoundRecord};
use crate::lora::{AllocationDelta, GateState};
use crate::model::{GateSource, ModuleId, SuperNetwork};
use crate::train::{evaluate, eval_gates, StepTarget, Trainer};

/// What the per-rank `score` column of a report measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `IS = −S(M\r) + S(M_r)`.
    Ablation,
    /// Relaxed gate value `α'`.
    GateValue,
    /// Hard-Concrete `log θ`.
    LogTheta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankScore {
    pub module: ModuleId,
    pub rank: usize,
    /// `S(M\r)`; ablation reports only.
    pub s_without: Option<f64>,
    /// `S(M_r)`; ablation reports only.
    pub s_alone: Option<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub round: usize,
    pub kind: ScoreKind,
    /// `S(M)` on the same batch, for diagnostics.
    pub s_full: Option<f64>,
    pub per_rank: Vec<RankScore>,
    /// Mean score over each module's active ranks.
    pub per_module_mean: BTreeMap<ModuleId, f64>,
    pub val_batch_id: u64,
}

impl ImportanceReport {
    fn from_scores(round: usize, kind: ScoreKind, s_full: Option<f64>, per_rank: Vec<RankScore>, val_batch_id: u64) -> Self {
        let mut sums: BTreeMap<ModuleId, (f64, usize)> = BTreeMap::new();
        for r in &per_rank {
            let e = sums.entry(r.module).or_default();
            e.0 += r.score;
            e.1 += 1;
        }
        Self {
            round,
            kind,
            s_full,
            per_module_mean: sums
                .into_iter()
                .map(|(m, (s, n))| (m, s / n as f64))
                .collect(),
            per_rank,
            val_batch_id,
        }
    }
}

/// `S = −loss_scale · CE` of the model under `gates` on `b_val`.
pub fn metric_s<S: Float>(
    net: &SuperNetwork<S>,
    b_val: &[Example],
    gates: &[Vec<S>],
    loss_scale: f64,
) -> Result<f64> {
    if b_val.is_empty() {
        return Err(AloraError::Contract("metric_S needs a nonempty batch".into()));
    }
    Ok(-loss_scale * net.eval_loss(b_val, GateSource::Override(gates))?)
}

/// Ablation importance of every active rank on `b_val`.
pub fn importance_scores<S: Float>(net: &SuperNetwork<S>, b_val: &[Example], round: usize, val_batch_id: u64) -> Result<ImportanceReport> {
    importance_scores_scaled(net, b_val, round, val_batch_id, 1.0)
}

/// [`importance_scores`] with the validation loss multiplied by `loss_scale`.
///
/// Each rank is scored twice: with only its gate closed (`M\r`) and with
/// every other gate closed (`M_r`). The gate views are built per evaluation;
/// the network itself is never mutated.
pub fn importance_scores_scaled<S: Float>(
    net: &SuperNetwork<S>,
    b_val: &[Example],
    round: usize,
    val_batch_id: u64,
    loss_scale: f64,
) -> Result<ImportanceReport> {
    let base = net.current_gates();
    let jobs: Vec<(usize, usize)> = net
        .adapters
        .iter()
        .enumerate()
        .flat_map(|(m, a)| a.active_indices().into_iter().map(move |i| (m, i)))
        .collect();
    if jobs.is_empty() {
        return Err(AloraError::Contract("importance_scores needs an active rank".into()));
    }
    let s_full = metric_s(net, b_val, &base, loss_scale)?;
    let per_rank = jobs
        .par_iter()
        .map(|&(m, i)| {
            let mut without = base.clone();
            without[m][i] = S::zero();
            let mut alone: Vec<Vec<S>> = base.iter().map(|g| vec![S::zero(); g.len()]).collect();
            alone[m][i] = base[m][i];
            let name = |e: AloraError| e.context(format!("scoring {} rank {i}", ModuleId(m)));
            let s_without = metric_s(net, b_val, &without, loss_scale).map_err(name)?;
            let s_alone = metric_s(net, b_val, &alone, loss_scale).map_err(name)?;
            if !s_without.is_finite() || !s_alone.is_finite() {
                return Err(AloraError::Numeric(format!(
                    "score of {} rank {i} is not finite",
                    ModuleId(m)
                )));
            }
            Ok(RankScore {
                module: ModuleId(m),
                rank: i,
                s_without: Some(s_without),
                s_alone: Some(s_alone),
                score: -s_without + s_alone,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ImportanceReport::from_scores(round, ScoreKind::Ablation, Some(s_full), per_rank, val_batch_id))
}

/// The `count` lowest-scoring ranks, ties broken by module then rank index.
pub fn lowest_ranks(report: &ImportanceReport, count: usize) -> Vec<(ModuleId, usize)> {
    let mut order: Vec<&RankScore> = report.per_rank.iter().collect();
    order.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.module.cmp(&b.module))
            .then(a.rank.cmp(&b.rank))
    });
    order.iter().take(count).map(|r| (r.module, r.rank)).collect()
}

/// The `count` highest-scoring ranks, ties broken like [`lowest_ranks`].
pub fn highest_ranks(report: &ImportanceReport, count: usize) -> Vec<(ModuleId, usize)> {
    let mut order: Vec<&RankScore> = report.per_rank.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.module.cmp(&b.module))
            .then(a.rank.cmp(&b.rank))
    });
    order.iter().take(count).map(|r| (r.module, r.rank)).collect()
}

/// Module with the highest mean score, lowest id on ties.
pub fn best_module(report: &ImportanceReport) -> Option<ModuleId> {
    report
        .per_module_mean
        .iter()
        .fold(None, |best: Option<(ModuleId, f64)>, (&m, &s)| match best {
            Some((_, b)) if b >= s => best,
            _ => Some((m, s)),
        })
        .map(|(m, _)| m)
}

/// Prunes the `r1` lowest-scoring active ranks, then grows the best module by
/// `r1` unless it lost a rank this round.
pub fn reallocate_step<S: Float, R: Rng + ?Sized>(
    net: &mut SuperNetwork<S>,
    report: &ImportanceReport,
    r1: usize,
    rng: &mut R,
) -> Result<AllocationDelta> {
    let active = net.active_total();
    if active < r1 || report.per_rank.len() < r1 {
        return Err(AloraError::Contract(format!(
            "cannot prune {r1} ranks: {active} are active"
        )));
    }
    let pruned = lowest_ranks(report, r1);
    for &(m, i) in &pruned {
        net.adapters[m.0].prune_rank(i)?;
    }
    let mut added = Vec::new();
    if let Some(best) = best_module(report) {
        if pruned.iter().all(|(m, _)| *m != best) {
            net.adapters[best.0].grow_ranks(r1, rng)?;
            if let Some(gates) = &mut net.l0_gates {
                gates[best.0].grow(r1, 0.0)?;
            }
            added.push((best, r1));
        }
    }
    Ok(AllocationDelta {
        round: report.round,
        pruned,
        added,
    })
}

/// Report whose scores are the relaxed gate values `α'` of active ranks.
pub fn gate_value_report<S: Float>(net: &SuperNetwork<S>, round: usize) -> ImportanceReport {
    let per_rank = net
        .adapters
        .iter()
        .flat_map(|a| {
            let gates = a.gates();
            a.active_indices().into_iter().map(move |i| RankScore {
                module: a.module,
                rank: i,
                s_without: None,
                s_alone: None,
                score: gates[i].as_f64(),
            })
        })
        .collect();
    ImportanceReport::from_scores(round, ScoreKind::GateValue, None, per_rank, 0)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed fixing the example order of training epoch `epoch`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64 + 1)
}

/// A fresh validation batch for round `round`, with its id.
pub fn draw_val_batch(data: &Dataset, size: usize, seed: u64, round: usize) -> (Vec<Example>, u64) {
    let id = seed.wrapping_mul(1000).wrapping_add(round as u64);
    let mut rng = stream_rng(id, 21);
    (sample_batch(&data.val, size, &mut rng), id)
}

/// Everything a run produces besides the trained network.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub history: AllocationHistory,
    pub trainer: Trainer,
    pub epochs: usize,
}

/// Warm-up epochs with early stopping on validation loss.
fn warm_up<S: Float>(
    net: &mut SuperNetwork<S>,
    trainer: &mut Trainer,
    train: &[Example],
    data: &Dataset,
    config: &RunConfig,
    epochs: &mut usize,
) -> Result<()> {
    let a = &config.allocator;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for _ in 0..a.k1 {
        trainer.epoch(net, train, config.optim.batch_size, epoch_seed(config.seed, *epochs), |_, _| Ok(()))?;
        *epochs += 1;
        let ce = evaluate(net, &data.val, eval_gates(net))?.ce;
        if ce < best {
            best = ce;
            stale = 0;
        } else {
            stale += 1;
            if stale >= a.patience {
                break;
            }
        }
    }
    Ok(())
}

/// The ALoRA workflow: warm-up, then `n_a` rounds of score, reallocate and
/// recovery training.
pub fn run_alora<S: Float>(net: &mut SuperNetwork<S>, data: &Dataset, config: &RunConfig) -> Result<RunOutcome> {
    let a = &config.allocator;
    let mut trainer = new_trainer(config);
    let mut history = AllocationHistory::new(Strategy::Ablation, a.r_target, net.rank_map());
    let mut epochs = 0;
    let mut grow_rng = stream_rng(config.seed, 31);
    warm_up(net, &mut trainer, &data.train, data, config, &mut epochs)?;
    for round in 1..=a.n_a {
        let ctx = |e: AloraError| e.context(format!("round {round}"));
        let (b_val, id) = draw_val_batch(data, a.val_batch_size, config.seed, round);
        let report = importance_scores(net, &b_val, round, id).map_err(ctx)?;
        let delta = reallocate_step(net, &report, a.r1(), &mut grow_rng).map_err(ctx)?;
        history.push(RoundRecord::new(Some(report), delta, net));
        for _ in 0..a.k2 {
            trainer
                .epoch(net, &data.train, config.optim.batch_size, epoch_seed(config.seed, epochs), |_, _| Ok(()))
                .map_err(ctx)?;
            epochs += 1;
        }
    }
    Ok(RunOutcome {
        history,
        trainer,
        epochs,
    })
}

pub fn new_trainer(config: &RunConfig) -> Trainer {
    let optimizer = crate::optim::Optimizer::new(config.optim.clone(), config.planned_steps());
    Trainer::new(optimizer, config.regularizers.clone(), config.grad_align, config.seed)
}

/// Seeded `D_1`/`D_2` partition of the training split.
pub fn split_d1_d2(train: &[Example], d2_frac: f64, seed: u64) -> (Vec<Example>, Vec<Example>) {
    let n1 = d1_size(train.len(), d2_frac);
    let mut rng = stream_rng(seed, 41);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let d1 = idx[..n1].iter().map(|&i| train[i].clone()).collect();
    let d2 = idx[n1..].iter().map(|&i| train[i].clone()).collect();
    (d1, d2)
}

/// DNAS-style baseline: adapter steps on `D_1` alternate with gate-logit
/// steps on `D_2`, and rounds prune the ranks with the smallest `α'`.
pub fn dnas_baseline_allocate<S: Float>(net: &mut SuperNetwork<S>, data: &Dataset, config: &RunConfig) -> Result<RunOutcome> {
    let a = &config.allocator;
    let (d1, d2) = split_d1_d2(&data.train, a.dnas.d2_frac, config.seed);
    let mut trainer = new_trainer(config);
    let mut history = AllocationHistory::new(Strategy::DnasBaseline, a.r_target, net.rank_map());
    let mut epochs = 0;
    let mut grow_rng = stream_rng(config.seed, 31);
    let mut d2_rng = stream_rng(config.seed, 42);
    let bs = config.optim.batch_size;
    let train_gates = a.dnas.train_gates;
    let mut outer = |t: &mut Trainer, n: &mut SuperNetwork<S>| -> Result<()> {
        if train_gates {
            let batch = sample_batch(&d2, bs, &mut d2_rng);
            t.step(n, &batch, StepTarget::GateLogits)?;
        }
        Ok(())
    };
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for _ in 0..a.k1 {
        trainer.epoch(net, &d1, bs, epoch_seed(config.seed, epochs), &mut outer)?;
        epochs += 1;
        let ce = evaluate(net, &data.val, GateSource::Current)?.ce;
        if ce < best {
            best = ce;
            stale = 0;
        } else {
            stale += 1;
            if stale >= a.patience {
                break;
            }
        }
    }
    for round in 1..=a.n_a {
        let ctx = |e: AloraError| e.context(format!("round {round}"));
        let report = gate_value_report(net, round);
        let delta = reallocate_step(net, &report, a.r1(), &mut grow_rng).map_err(ctx)?;
        history.push(RoundRecord::new(Some(report), delta, net));
        for _ in 0..a.k2 {
            trainer
                .epoch(net, &d1, bs, epoch_seed(config.seed, epochs), &mut outer)
                .map_err(ctx)?;
            epochs += 1;
        }
    }
    Ok(RunOutcome {
        history,
        trainer,
        epochs,
    })
}

/// L0 baseline: Hard-Concrete gates trained with an expected-L0 penalty;
/// every `t_p` steps ranks whose `log θ` fell below `zeta0` are pruned.
/// No rank is ever added.
pub fn l0_baseline_allocate<S: Float>(net: &mut SuperNetwork<S>, data: &Dataset, config: &RunConfig) -> Result<RunOutcome> {
    let a = &config.allocator;
    if net.l0_gates.is_none() {
        net.install_l0_gates(a.l0.init_log_theta, config.regularizers.hard_concrete);
    }
    let mut trainer = new_trainer(config);
    let mut history = AllocationHistory::new(Strategy::L0Baseline, a.r_target, net.rank_map());
    let (t_p, zeta0) = (a.l0.t_p, a.l0.zeta0);
    let mut pending: Vec<RoundRecord> = Vec::new();
    let mut prune = |t: &mut Trainer, n: &mut SuperNetwork<S>| -> Result<()> {
        if !t.step.is_multiple_of(t_p) {
            return Ok(());
        }
        let round = pending.len() + 1;
        let report = log_theta_report(n, round);
        let mut pruned = Vec::new();
        for r in &report.per_rank {
            if r.score < zeta0 {
                n.adapters[r.module.0].prune_rank(r.rank)?;
                pruned.push((r.module, r.rank));
            }
        }
        let delta = AllocationDelta {
            round,
            pruned,
            added: Vec::new(),
        };
        pending.push(RoundRecord::new(Some(report), delta, n));
        Ok(())
    };
    let total_epochs = a.k1 + a.n_a * a.k2;
    for epoch in 0..total_epochs {
        trainer.epoch(net, &data.train, config.optim.batch_size, epoch_seed(config.seed, epoch), &mut prune)?;
    }
    for r in pending {
        history.push(r);
    }
    Ok(RunOutcome {
        history,
        trainer,
        epochs: total_epochs,
    })
}

/// Report whose scores are the Hard-Concrete `log θ` of active ranks.
pub fn log_theta_report<S: Float>(net: &SuperNetwork<S>, round: usize) -> ImportanceReport {
    let gates = net.l0_gates.as_ref().expect("Hard-Concrete gates installed");
    let per_rank = net
        .adapters
        .iter()
        .zip(gates)
        .flat_map(|(a, g)| {
            let lt = g.log_theta.value.data();
            a.active_indices().into_iter().map(move |i| RankScore {
                module: a.module,
                rank: i,
                s_without: None,
                s_alone: None,
                score: lt[i].as_f64(),
            })
        })
        .collect();
    ImportanceReport::from_scores(round, ScoreKind::LogTheta, None, per_rank, 0)
}

/// Runs the configured strategy.
pub fn run_strategy<S: Float>(net: &mut SuperNetwork<S>, data: &Dataset, config: &RunConfig) -> Result<RunOutcome> {
    match config.allocator.strategy {
        Strategy::Ablation => run_alora(net, data, config),
        Strategy::DnasBaseline => dnas_baseline_allocate(net, data, config),
        Strategy::L0Baseline => l0_baseline_allocate(net, data, config),
    }
}

/// Extra ablation rounds on an already trained network, as used when
/// resuming from a checkpoint.
pub fn extra_rounds<S: Float>(
    net: &mut SuperNetwork<S>,
    data: &Dataset,
    config: &RunConfig,
    rounds: usize,
    first_round: usize,
) -> Result<RunOutcome> {
    let a = &config.allocator;
    let mut trainer = new_trainer(config);
    let mut history = AllocationHistory::new(Strategy::Ablation, a.r_target, net.rank_map());
    let mut grow_rng = stream_rng(config.seed ^ first_round as u64, 31);
    let mut epochs = 0;
    for round in first_round..first_round + rounds {
        let (b_val, id) = draw_val_batch(data, a.val_batch_size, config.seed, round);
        let report = importance_scores(net, &b_val, round, id)?;
        let delta = reallocate_step(net, &report, a.r1(), &mut grow_rng)?;
        history.push(RoundRecord::new(Some(report), delta, net));
        for _ in 0..a.k2 {
            trainer.epoch(net, &data.train, config.optim.batch_size, epoch_seed(config.seed, 1000 + epochs), |_, _| Ok(()))?;
            epochs += 1;
        }
    }
    Ok(RunOutcome {
        history,
        trainer,
        epochs,
    })
}

/// Modules of the ranks that were pruned, as a set.
pub fn pruned_modules(delta: &AllocationDelta) -> BTreeSet<ModuleId> {
    delta.pruned.iter().map(|(m, _)| *m).collect()
}

/// Number of pruned gates in the network.
pub fn pruned_total<S: Float>(net: &SuperNetwork<S>) -> usize {
    net.adapters
        .iter()
        .map(|a| a.gate_state.iter().filter(|s| **s == GateState::Pruned).count())
        .sum()
}
