mod common;

use alora_autodiff::{finite_diff_check, Tape, Tensor};
use alora_core::lora::GatedLoraAdapter;
use alora_core::model::ModuleId;
use alora_core::regularizers::{
    expected_l0, hard_concrete_sample, orthogonal_reg, orthogonal_reg_value, HardConcreteConfig, HardConcreteGate,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gate(log_theta: &[f64]) -> HardConcreteGate<f64> {
    let mut g = HardConcreteGate::new(ModuleId(0), log_theta.len(), 0.0, HardConcreteConfig::default());
    g.log_theta.value = Tensor::from_f64([log_theta.len()], log_theta).unwrap();
    g
}

/// `P(λ > 0)` by the closed form of the stretched logistic, derived directly.
fn p_nonzero(log_theta: f64, cfg: &HardConcreteConfig) -> f64 {
    // λ > 0  ⇔  s > −γ/(ζ−γ)  ⇔  logistic noise term exceeds a threshold.
    let s0 = -cfg.gamma_lower / (cfg.zeta_upper - cfg.gamma_lower);
    let x = cfg.tau * (s0 / (1.0 - s0)).ln() - log_theta;
    1.0 - 1.0 / (1.0 + (-x).exp())
}

#[test]
fn expected_l0_matches_the_stretch_threshold() {
    let cfg = HardConcreteConfig::default();
    for lt in [-6.0, -1.0, 0.0, 0.3, 4.0] {
        let e = expected_l0(&gate(&[lt]));
        assert!((e - p_nonzero(lt, &cfg)).abs() < 1e-12, "{lt}");
    }
}

#[test]
fn samples_clip_to_the_unit_interval_with_point_masses() {
    let g = gate(&[0.0, 0.0, 0.0]);
    let s = hard_concrete_sample(&g, &[1e-9, 0.5, 1.0 - 1e-9]).unwrap();
    assert_eq!(s[0], 0.0);
    assert_eq!(s[2], 1.0);
    assert!(s[1] > 0.0 && s[1] < 1.0);
}

#[test]
fn expected_l0_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = gate(&(0..6).map(|_| rng.gen_range(-3.0..3.0)).collect::<Vec<_>>());
    let report = finite_diff_check(std::slice::from_ref(&g.log_theta), 1e-5, |_, v| {
        Ok(g.expected_l0_on(v[0], &[0, 1, 2, 3, 4, 5]).unwrap())
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn orthogonal_reg_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Tensor::randn([6, 3], 1.0, &mut rng);
    let b = Tensor::randn([3, 5], 1.0, &mut rng);
    let mut ad = GatedLoraAdapter::from_factors(ModuleId(0), a, b).unwrap();
    ad.prune_rank(1).unwrap();
    let grads = {
        let tape = Tape::new();
        let v = orthogonal_reg(&tape, std::slice::from_ref(&ad), true).unwrap();
        tape.backward(v).unwrap()
    };
    let mut worst = 0.0f64;
    for which in 0..2 {
        let n = if which == 0 { 18 } else { 15 };
        for c in 0..n {
            let numeric = common::central(
                |h| {
                    let mut probe = ad.clone();
                    let t = if which == 0 { &mut probe.a } else { &mut probe.b };
                    t.value.data_mut()[c] += h;
                    orthogonal_reg_value(&[probe]).unwrap()
                },
                1e-5,
            );
            let id = if which == 0 { ad.a.id } else { ad.b.id };
            let analytic = grads.get(id).unwrap().data()[c];
            worst = worst.max(alora_autodiff::relative_error(analytic, numeric));
        }
    }
    assert!(worst < 1e-4, "{worst:e}");
    // Pruned rank 1 receives no gradient.
    assert_eq!(grads.get(ad.a.id).unwrap().data()[1], 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ortho_is_scale_invariant(seed in 0u64..10_000, ca in 0.05f64..20.0, cb in 0.05f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.gen_range(1..5);
        let a = Tensor::randn([7, r], 1.0, &mut rng);
        let b = Tensor::randn([r, 5], 1.0, &mut rng);
        let ad = GatedLoraAdapter::from_factors(ModuleId(0), a.clone(), b.clone()).unwrap();
        let scale = |t: &Tensor<f64>, c: f64| Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect()).unwrap();
        let scaled = GatedLoraAdapter::from_factors(ModuleId(0), scale(&a, ca), scale(&b, cb)).unwrap();
        let v0 = orthogonal_reg_value(&[ad]).unwrap();
        let v1 = orthogonal_reg_value(&[scaled]).unwrap();
        prop_assert!((v0 - v1).abs() < 1e-10);
        prop_assert!(v0 >= 0.0);
    }
}

#[test]
fn ortho_vanishes_on_orthogonal_factors() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for r in 1..5 {
        // Orthonormal columns by Gram-Schmidt.
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < r {
            let mut v: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= d * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            cols.push(v.iter().map(|x| x / n).collect());
        }
        let a = Tensor::from_fn([8, r], |i| 2.5 * cols[i % r][i / r]);
        let b = Tensor::from_fn([r, 8], |i| 0.3 * cols[i / 8][i % 8]);
        let ad = GatedLoraAdapter::from_factors(ModuleId(0), a, b).unwrap();
        assert!(orthogonal_reg_value(&[ad]).unwrap().abs() < 1e-10);
    }
}

#[test]
fn adapters_without_active_ranks_add_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ad = GatedLoraAdapter::<f64>::new(ModuleId(0), 4, 4, 2, &mut rng);
    ad.prune_rank(0).unwrap();
    ad.prune_rank(1).unwrap();
    let tape = Tape::new();
    let v = orthogonal_reg(&tape, &[ad], true).unwrap();
    assert_eq!(v.item(), 0.0);
}
