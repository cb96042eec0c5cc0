//! Quick oracle checks run by the `selftest` subcommand.
//!
//! These are reduced versions of the acceptance suite: fewer trials, the same
//! tolerances.

use alora_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{gen_task, TaskSpec};
use crate::error::Result;
use crate::grad_align::{combine, GaConfig, GaMode};
use crate::lora::GatedLoraAdapter;
use crate::model::{build_supernetwork, GateSource, ModelConfig, ModuleId};
use crate::regularizers::{expected_l0, hard_concrete_sample, orthogonal_reg_value, HardConcreteConfig, HardConcreteGate};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    /// Largest observed deviation.
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value <= self.tolerance
    }
}

fn random_adapter(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, r: usize) -> GatedLoraAdapter<f64> {
    let a = Tensor::randn([d_in, r], 1.0, rng);
    let b = Tensor::randn([r, d_out], 1.0, rng);
    let mut ad = GatedLoraAdapter::from_factors(ModuleId(0), a, b).expect("matching shapes");
    for l in ad.gate_logits.value.data_mut() {
        *l = rng.gen_range(-3.0..3.0);
    }
    ad
}

fn lm_loss_gradient(trials: usize) -> Result<Check> {
    let cfg = ModelConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        vocab: 8,
        max_seq_len: 7,
        ..ModelConfig::default()
    };
    let task = TaskSpec {
        vocab: 8,
        seq_len: 7,
        train_size: 4,
        val_size: 1,
        test_size: 1,
        ..TaskSpec::default()
    };
    let data = gen_task(&task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = build_supernetwork::<f64, _>(&cfg, 12, &mut rng)?;
    for ad in &mut net.adapters {
        for x in ad.a.value.data_mut().iter_mut().chain(ad.b.value.data_mut()) {
            *x = rng.gen_range(-0.5..0.5);
        }
    }
    let grads = {
        let tape = alora_autodiff::Tape::new();
        let loss = net.lm_loss(&tape, &data.train, &crate::model::ForwardOptions::train())?;
        tape.backward(loss)?
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let m = rng.gen_range(0..net.adapters.len());
        let which = rng.gen_bool(0.5);
        let p = if which { &net.adapters[m].a } else { &net.adapters[m].b };
        let c = rng.gen_range(0..p.value.numel());
        let analytic = grads.get(p.id).map_or(0.0, |g| g.data()[c]);
        let mut probe = |delta: f64| -> Result<f64> {
            let ad = &mut net.adapters[m];
            let p = if which { &mut ad.a } else { &mut ad.b };
            p.value.data_mut()[c] += delta;
            let loss = net.eval_loss(&data.train, GateSource::Current);
            let ad = &mut net.adapters[m];
            let p = if which { &mut ad.a } else { &mut ad.b };
            p.value.data_mut()[c] -= delta;
            loss
        };
        let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
        worst = worst.max(alora_autodiff::relative_error(analytic, numeric));
    }
    Ok(Check {
        name: "lm loss gradient",
        value: worst,
        tolerance: 1e-4,
    })
}

fn gate_zero(trials: usize, rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let r = rng.gen_range(2..9);
        let mut ad = random_adapter(rng, 6, 5, r);
        for i in 0..r {
            if rng.gen_bool(0.4) {
                ad.prune_rank(i)?;
            }
        }
        let x = Tensor::randn([4, 6], 1.0, rng);
        let masked = ad.forward(&x)?;
        let mut compacted = ad.clone();
        compacted.compact()?;
        worst = worst.max(masked.max_abs_diff(&compacted.forward(&x)?)?);
    }
    Ok(Check {
        name: "gate-zero equivalence",
        value: worst,
        tolerance: 1e-12,
    })
}

fn merge(trials: usize, rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let r = rng.gen_range(1..6);
        let ad = random_adapter(rng, 7, 5, r);
        let w0 = Tensor::randn([7, 5], 1.0, rng);
        let x = Tensor::randn([3, 7], 1.0, rng);
        let additive = x.matmul(&w0)?;
        let z = ad.forward(&x)?;
        let additive = Tensor::new(
            [3, 5],
            additive.data().iter().zip(z.data()).map(|(a, b)| a + b).collect(),
        )?;
        worst = worst.max(x.matmul(&ad.merge(&w0)?)?.max_abs_diff(&additive)?);
    }
    Ok(Check {
        name: "merge equivalence",
        value: worst,
        tolerance: 1e-10,
    })
}

fn rank_one(rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut worst = 0.0f64;
    for r in [1, 2, 4, 8] {
        let ad = random_adapter(rng, 6, 4, r);
        let x = Tensor::randn([3, 6], 1.0, rng);
        let mut sum = vec![0.0; 12];
        for i in 0..r {
            for (s, v) in sum.iter_mut().zip(ad.rank_one(i)?.forward(&x)?.data()) {
                *s += v;
            }
        }
        worst = worst.max(ad.forward(&x)?.max_abs_diff(&Tensor::new([3, 4], sum)?)?);
    }
    Ok(Check {
        name: "rank-1 decomposition",
        value: worst,
        tolerance: 1e-12,
    })
}

/// Largest |MC − expected| in standard errors; passes below 3.
fn hard_concrete(points: usize, draws: usize, rng: &mut ChaCha8Rng) -> Result<Check> {
    let cfg = HardConcreteConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..points {
        let mut gate = HardConcreteGate::<f64>::new(ModuleId(0), 1, 0.0, cfg);
        gate.log_theta.value.data_mut()[0] = rng.gen_range(-4.0..4.0);
        let p = expected_l0(&gate);
        let hits = (0..draws)
            .map(|_| hard_concrete_sample(&gate, &[rng.gen::<f64>()]).map(|v| v[0] > 0.0))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|&b| b)
            .count();
        let se = (p * (1.0 - p) / draws as f64).sqrt().max(1e-12);
        worst = worst.max((hits as f64 / draws as f64 - p).abs() / se);
    }
    Ok(Check {
        name: "hard-concrete consistency (std errors)",
        value: worst,
        tolerance: 3.0,
    })
}

fn ga_geometry(trials: usize, rng: &mut ChaCha8Rng) -> Check {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.gen_range(2..20);
        let main: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let aux: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for mode in [GaMode::Soft, GaMode::Hard] {
            let cfg = GaConfig {
                mode,
                ..GaConfig::default()
            };
            let out = combine(&main, &aux, &cfg);
            let scale = main.iter().map(|x| x * x).sum::<f64>().sqrt();
            let residual = out
                .grad
                .iter()
                .zip(&main)
                .map(|(g, m)| (g - out.coefficient * m).abs())
                .fold(0.0, f64::max)
                / scale;
            worst = worst.max(residual);
            if mode == GaMode::Hard && out.coefficient < 1.0 - cfg.alpha {
                worst = f64::INFINITY;
            }
        }
    }
    Check {
        name: "gradient alignment colinearity",
        value: worst,
        tolerance: 1e-10,
    }
}

fn ortho(trials: usize, rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let r = rng.gen_range(1..5);
        let ad = random_adapter(rng, 8, 6, r);
        let base = orthogonal_reg_value(std::slice::from_ref(&ad))?;
        let mut scaled = ad.clone();
        let c: f64 = rng.gen_range(0.1..10.0);
        scaled.a.value.data_mut().iter_mut().for_each(|x| *x *= c);
        scaled.b.value.data_mut().iter_mut().for_each(|x| *x /= c * 0.5);
        worst = worst.max((orthogonal_reg_value(&[scaled])? - base).abs());
        let eye_a = Tensor::from_fn([8, r], |i| if i / r == i % r { 3.0 } else { 0.0 });
        let eye_b = Tensor::from_fn([r, 6], |i| if i / 6 == i % 6 { 0.5 } else { 0.0 });
        let orth = GatedLoraAdapter::from_factors(ModuleId(0), eye_a, eye_b)?;
        worst = worst.max(orthogonal_reg_value(&[orth])?.abs());
    }
    Ok(Check {
        name: "orthogonal regularizer invariance",
        value: worst,
        tolerance: 1e-10,
    })
}

/// Runs every quick check.
pub fn run_all() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    Ok(vec![
        lm_loss_gradient(40)?,
        gate_zero(50, &mut rng)?,
        merge(50, &mut rng)?,
        rank_one(&mut rng)?,
        hard_concrete(10, 20_000, &mut rng)?,
        ga_geometry(200, &mut rng),
        ortho(50, &mut rng)?,
    ])
}
