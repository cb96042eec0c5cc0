//! Hard-Concrete L0 gates and the trace-normalized orthogonality penalty.

use alora_autodiff::{Float, Param, ParamId, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{AloraError, Result};
use crate::lora::GatedLoraAdapter;
use crate::model::ModuleId;

/// Uniform draws are clipped into this margin so `log(u / (1 - u))` stays finite.
pub const UNIFORM_EPS: f64 = 1e-6;

/// Shape constants of the stretched, clipped binary-concrete distribution.
///
/// The support is stretched to `(gamma_lower, zeta_upper)` with
/// `gamma_lower < 0 < 1 < zeta_upper` and then clipped to `[0, 1]`, which puts
/// point mass on both exact 0 and exact 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HardConcreteConfig {
    pub tau: f64,
    pub gamma_lower: f64,
    pub zeta_upper: f64,
}

impl Default for HardConcreteConfig {
    fn default() -> Self {
        Self {
            tau: 2.0 / 3.0,
            gamma_lower: -0.1,
            zeta_upper: 1.1,
        }
    }
}

impl HardConcreteConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(AloraError::config("regularizers.tau", "must be positive"));
        }
        if !(self.gamma_lower < 0.0) {
            return Err(AloraError::config("regularizers.gamma_lower", "must be negative"));
        }
        if !(self.zeta_upper > 1.0 && self.zeta_upper.is_finite()) {
            return Err(AloraError::config("regularizers.zeta_upper", "must exceed 1"));
        }
        Ok(())
    }

    /// `τ · log(-γ/ζ)`, the logit shift in the closed-form expected L0.
    pub fn l0_shift(&self) -> f64 {
        self.tau * (-self.gamma_lower / self.zeta_upper).ln()
    }
}

/// One module's Hard-Concrete gates, one per adapter rank.
#[derive(Debug, Clone, PartialEq)]
pub struct HardConcreteGate<S> {
    /// `log θ`, shape `[r]`.
    pub log_theta: Param<S>,
    pub config: HardConcreteConfig,
}

fn logit(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    (u / (1.0 - u)).ln()
}

impl<S: Float> HardConcreteGate<S> {
    pub fn param_id(module: ModuleId) -> ParamId {
        ParamId(module.0 * 4 + 3)
    }

    pub fn new(module: ModuleId, rank: usize, init_log_theta: f64, config: HardConcreteConfig) -> Self {
        Self {
            log_theta: Param::new(
                Self::param_id(module),
                Tensor::full([rank], S::lit(init_log_theta)),
            ),
            config,
        }
    }

    pub fn rank(&self) -> usize {
        self.log_theta.value.numel()
    }

    /// Appends gates for newly grown ranks.
    pub fn grow(&mut self, count: usize, init_log_theta: f64) -> Result<()> {
        let mut v = self.log_theta.value.data().to_vec();
        v.extend(std::iter::repeat_n(S::lit(init_log_theta), count));
        self.log_theta.value = Tensor::new([v.len()], v)?;
        Ok(())
    }

    /// Test-time gate: the clipped stretch of `sigmoid(log θ)` without noise.
    pub fn deterministic(&self) -> Vec<S> {
        let c = &self.config;
        self.log_theta
            .value
            .data()
            .iter()
            .map(|&l| {
                let s = alora_autodiff::sigmoid(l.as_f64()) * (c.zeta_upper - c.gamma_lower)
                    + c.gamma_lower;
                S::lit(s.clamp(0.0, 1.0))
            })
            .collect()
    }

    /// Differentiable sample `λ = min(1, max(0, s))` for noise draws `u`,
    /// with `log θ` taken from `log_theta` (shape `[r]`).
    pub fn sample_on<'t>(
        &self,
        tape: &'t Tape<S>,
        log_theta: Var<'t, S>,
        u: &[f64],
    ) -> Result<Var<'t, S>> {
        let c = &self.config;
        let noise = Tensor::new([u.len()], u.iter().map(|&x| S::lit(logit(x))).collect())?;
        let s = log_theta
            .add(tape.constant(noise))?
            .scale(1.0 / c.tau)?
            .sigmoid()?
            .scale(c.zeta_upper - c.gamma_lower)?
            .add_scalar(c.gamma_lower)?;
        Ok(s.clamp(0.0, 1.0)?)
    }

    /// Closed-form `E[#(λ > 0)]` over the ranks in `ranks`, on a tape.
    pub fn expected_l0_on<'t>(
        &self,
        log_theta: Var<'t, S>,
        ranks: &[usize],
    ) -> Result<Var<'t, S>> {
        let r = self.rank();
        let selected = log_theta.reshape(&[1, r])?.select_cols(ranks)?;
        Ok(selected
            .add_scalar(-self.config.l0_shift())?
            .sigmoid()?
            .sum()?)
    }
}

/// Hard-Concrete draw for each rank given uniform noise `u` (one per rank).
pub fn hard_concrete_sample<S: Float>(gate: &HardConcreteGate<S>, u: &[f64]) -> Result<Vec<S>> {
    let tape = Tape::no_grad();
    let lt = tape.constant(gate.log_theta.value.clone());
    Ok(gate.sample_on(&tape, lt, u)?.value().into_data())
}

/// `Σ_k sigmoid(log θ_k − τ·log(−γ/ζ))`, the probability mass of nonzero gates.
pub fn expected_l0<S: Float>(gate: &HardConcreteGate<S>) -> f64 {
    let shift = gate.config.l0_shift();
    gate.log_theta
        .value
        .data()
        .iter()
        .map(|&l| alora_autodiff::sigmoid(l.as_f64() - shift))
        .sum()
}

/// `‖G/tr(G) − I/r‖_F²` for an `r×r` Gram matrix, with the zero-Gram case
/// contributing the constant `1/r`.
fn normalized_gram_distance<'t, S: Float>(tape: &'t Tape<S>, gram: Var<'t, S>, r: usize) -> Result<Var<'t, S>> {
    let tr = gram.trace()?;
    if tr.item() == S::zero() {
        return Ok(tape.scalar(S::lit(1.0 / r as f64)));
    }
    let target = Tensor::from_fn([r, r], |i| {
        if i / r == i % r {
            S::lit(1.0 / r as f64)
        } else {
            S::zero()
        }
    });
    Ok(gram.div(tr)?.sub(tape.constant(target))?.sum_squares()?)
}

/// Orthogonality penalty summed over adapters.
///
/// For each adapter, only active ranks enter the Gram matrices `W_Aᵀ W_A` and
/// `W_B W_Bᵀ`; each is compared to the identity after dividing by its trace,
/// so rescaling a factor leaves the penalty unchanged. Adapters with no
/// active rank contribute nothing.
pub fn orthogonal_reg<'t, S: Float>(
    tape: &'t Tape<S>,
    adapters: &[GatedLoraAdapter<S>],
    trainable: bool,
) -> Result<Var<'t, S>> {
    let mut total = tape.scalar(S::zero());
    for adapter in adapters {
        let active = adapter.active_indices();
        let r = active.len();
        if r == 0 {
            continue;
        }
        let (a, b) = if trainable {
            (tape.param(&adapter.a), tape.param(&adapter.b))
        } else {
            (
                tape.constant(adapter.a.value.clone()),
                tape.constant(adapter.b.value.clone()),
            )
        };
        let a = a.select_cols(&active)?;
        let b = b.select_rows(&active)?;
        let gram_a = a.transpose()?.matmul(a)?;
        let gram_b = b.matmul_t(b)?;
        total = total
            .add(normalized_gram_distance(tape, gram_b, r)?)?
            .add(normalized_gram_distance(tape, gram_a, r)?)?;
    }
    Ok(total)
}

/// Untaped value of [`orthogonal_reg`].
pub fn orthogonal_reg_value<S: Float>(adapters: &[GatedLoraAdapter<S>]) -> Result<f64> {
    let tape = Tape::no_grad();
    Ok(orthogonal_reg(&tape, adapters, false)?.item().as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn midpoint_sample() {
        let gate = HardConcreteGate::<f64>::new(ModuleId(0), 1, 0.0, HardConcreteConfig::default());
        let lam = hard_concrete_sample(&gate, &[0.5]).unwrap();
        assert!((lam[0] - 0.5).abs() < 1e-15);
        for tau in [0.1, 2.0 / 3.0, 5.0] {
            let g = HardConcreteGate::<f64>::new(
                ModuleId(0),
                1,
                0.0,
                HardConcreteConfig {
                    tau,
                    ..Default::default()
                },
            );
            assert!((hard_concrete_sample(&g, &[0.5]).unwrap()[0] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_gate_is_one() {
        let gate = HardConcreteGate::<f64>::new(ModuleId(0), 3, 50.0, HardConcreteConfig::default());
        let lam = hard_concrete_sample(&gate, &[0.01, 0.5, 0.99]).unwrap();
        assert_eq!(lam, vec![1.0; 3]);
    }

    #[test]
    fn expected_l0_half_at_shift() {
        let cfg = HardConcreteConfig::default();
        let gate = HardConcreteGate::<f64>::new(ModuleId(0), 1, cfg.l0_shift(), cfg);
        assert_eq!(expected_l0(&gate), 0.5);
    }

    #[test]
    fn sign_convention_is_validated() {
        let bad = HardConcreteConfig {
            gamma_lower: 1.1,
            zeta_upper: -0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(HardConcreteConfig::default().validate().is_ok());
    }

    #[test]
    fn orthogonal_factor_term_vanishes() {
        // W_B rows orthogonal with equal norms: W_B W_Bᵀ = 4·I.
        let b = Tensor::<f64>::from_f64([2, 3], &[2.0, 0.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let a = Tensor::<f64>::from_f64([3, 2], &[3.0, 0.0, 0.0, 3.0, 0.0, 0.0]).unwrap();
        let ad = GatedLoraAdapter::from_factors(ModuleId(0), a, b).unwrap();
        assert_eq!(orthogonal_reg_value(&[ad]).unwrap(), 0.0);
    }

    #[test]
    fn single_rank_penalty_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn([8, 1], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([1, 5], 1.0, &mut rng);
        let ad = GatedLoraAdapter::from_factors(ModuleId(0), a, b).unwrap();
        assert!(orthogonal_reg_value(&[ad]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn zero_up_projection_contributes_identity_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ad = GatedLoraAdapter::<f64>::new(ModuleId(0), 6, 6, 4, &mut rng);
        let tape = Tape::new();
        let reg = orthogonal_reg(&tape, std::slice::from_ref(&ad), true).unwrap();
        let a_only = {
            let t2 = Tape::no_grad();
            let a = t2.constant(ad.a.value.clone());
            let g = a.transpose().unwrap().matmul(a).unwrap();
            normalized_gram_distance(&t2, g, 4).unwrap().item()
        };
        assert!((reg.item() - (0.25 + a_only)).abs() < 1e-15);
        let grads = tape.backward(reg).unwrap();
        let gb = grads.get(ad.b.id).unwrap();
        assert!(gb.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pruned_ranks_are_excluded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::<f64>::randn([6, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([3, 4], 1.0, &mut rng);
        let mut ad = GatedLoraAdapter::from_factors(ModuleId(0), a, b).unwrap();
        ad.prune_rank(1).unwrap();
        let mut compacted = ad.clone();
        compacted.compact().unwrap();
        let (x, y) = (
            orthogonal_reg_value(&[ad]).unwrap(),
            orthogonal_reg_value(&[compacted]).unwrap(),
        );
        assert!((x - y).abs() < 1e-14);
    }
}
