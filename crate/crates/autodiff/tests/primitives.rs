use alora_autodiff::{
    finite_diff_check, Param, ParamId, Result, Tape, Tensor, TensorError, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const TRIALS: usize = 100;

fn param(id: usize, shape: &[usize], rng: &mut ChaCha8Rng) -> Param<f64> {
    Param::new(ParamId(id), Tensor::randn(shape.to_vec(), 1.0, rng))
}

/// Reduces an arbitrary-shaped output to a scalar with fixed random weights
/// so that every output coordinate carries a distinct upstream gradient.
fn weighted_sum<'t>(tape: &'t Tape<f64>, v: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(Tensor::randn(v.shape(), 1.0, &mut rng));
    v.mul(w)?.sum()
}

fn check_primitive<F>(name: &str, shapes: &[&[usize]], positive: bool, f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let mut worst = 0.0f64;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial as u64);
        let mut params: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| param(i, s, &mut rng))
            .collect();
        if positive {
            for p in &mut params {
                p.value
                    .data_mut()
                    .iter_mut()
                    .for_each(|x| *x = x.abs() + 0.5);
            }
        }
        let report = finite_diff_check(&params, STEP, |tape, vars| {
            let out = f(tape, vars)?;
            weighted_sum(tape, out, 7 + trial as u64)
        })
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn gradient_check_every_primitive() {
    check_primitive("matmul", &[&[3, 4], &[4, 5]], false, |_, v| v[0].matmul(v[1]));
    check_primitive("matmul batched rows", &[&[2, 3, 4], &[4, 2]], false, |_, v| {
        v[0].matmul(v[1])
    });
    check_primitive("matmul_t", &[&[3, 4], &[5, 4]], false, |_, v| v[0].matmul_t(v[1]));
    check_primitive("bmm", &[&[2, 3, 4], &[2, 4, 5]], false, |_, v| v[0].bmm(v[1]));
    check_primitive("bmm_t", &[&[2, 3, 4], &[2, 5, 4]], false, |_, v| v[0].bmm_t(v[1]));
    check_primitive("add", &[&[3, 4], &[3, 4]], false, |_, v| v[0].add(v[1]));
    check_primitive("add bias", &[&[3, 4], &[4]], false, |_, v| v[0].add(v[1]));
    check_primitive("sub", &[&[3, 4], &[4]], false, |_, v| v[0].sub(v[1]));
    check_primitive("mul", &[&[3, 4], &[3, 4]], false, |_, v| v[0].mul(v[1]));
    check_primitive("diag_scale", &[&[5, 3], &[3]], false, |_, v| v[0].diag_scale(v[1]));
    check_primitive("div", &[&[3, 4], &[]], true, |_, v| v[0].div(v[1]));
    check_primitive("scale", &[&[6]], false, |_, v| v[0].scale(-2.5));
    check_primitive("sigmoid", &[&[4, 3]], false, |_, v| v[0].sigmoid());
    check_primitive("relu", &[&[4, 3]], false, |_, v| v[0].relu());
    check_primitive("gelu", &[&[4, 3]], false, |_, v| v[0].gelu());
    check_primitive("exp", &[&[4, 3]], false, |_, v| v[0].exp());
    check_primitive("ln", &[&[4, 3]], true, |_, v| v[0].ln());
    check_primitive("sqrt", &[&[4, 3]], true, |_, v| v[0].sqrt());
    check_primitive("clamp", &[&[4, 3]], false, |_, v| v[0].clamp(-0.5, 0.5));
    check_primitive("softmax", &[&[4, 7]], false, |_, v| v[0].softmax());
    check_primitive("causal_softmax", &[&[2, 5, 5]], false, |_, v| v[0].causal_softmax());
    check_primitive("layer_norm", &[&[3, 8]], false, |_, v| v[0].layer_norm(1e-5));
    check_primitive("transpose", &[&[2, 3, 4]], false, |_, v| v[0].transpose());
    check_primitive("permute", &[&[2, 3, 4, 5]], false, |_, v| v[0].permute(&[0, 2, 1, 3]));
    check_primitive("reshape", &[&[2, 6]], false, |_, v| v[0].reshape(&[3, 4]));
    check_primitive("concat", &[&[2, 3], &[2, 2]], false, |_, v| {
        Var::concat(&[v[0], v[1]], 1)
    });
    check_primitive("gather_rows", &[&[5, 3]], false, |_, v| v[0].gather_rows(&[4, 0, 4, 2]));
    check_primitive("select_rows", &[&[5, 3]], false, |_, v| v[0].select_rows(&[1, 3]));
    check_primitive("select_cols", &[&[3, 5]], false, |_, v| v[0].select_cols(&[0, 4]));
    check_primitive("sum", &[&[3, 4]], false, |_, v| v[0].sum());
    check_primitive("mean", &[&[3, 4]], false, |_, v| v[0].mean());
    check_primitive("frobenius_norm", &[&[3, 4]], false, |_, v| v[0].frobenius_norm());
    check_primitive("trace", &[&[4, 4]], false, |_, v| v[0].trace());
    check_primitive("cross_entropy", &[&[5, 6]], false, |_, v| {
        v[0].cross_entropy(&[Some(1), None, Some(5), Some(0), None])
    });
}

#[test]
fn two_layer_mlp_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = Tensor::<f64>::randn([6, 5], 1.0, &mut rng);
    let params = vec![
        param(0, &[5, 8], &mut rng),
        param(1, &[8], &mut rng),
        param(2, &[8, 3], &mut rng),
    ];
    let report = finite_diff_check(&params, STEP, |tape, v| {
        let h = tape.constant(x.clone()).matmul(v[0])?.add(v[1])?.sigmoid()?;
        h.matmul(v[2])?
            .cross_entropy(&[Some(0), Some(1), Some(2), Some(0), Some(1), Some(2)])
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
    assert_eq!(report.coordinates, 5 * 8 + 8 + 8 * 3);
}

#[test]
fn quadratic_loss_is_exact_to_roundoff() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = vec![param(0, &[10], &mut rng)];
    let report = finite_diff_check(&params, STEP, |_, v| v[0].mul(v[0])?.sum()).unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn sigmoid_chain_passes_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = vec![param(0, &[4, 4], &mut rng)];
    let report = finite_diff_check(&params, STEP, |_, v| {
        v[0].sigmoid()?.sigmoid()?.scale(3.0)?.sigmoid()?.sum()
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn gradient_of_sum_of_squares() {
    let x = Param::new(ParamId(0), Tensor::<f64>::from_f64([3], &[1.0, -2.0, 3.0]).unwrap());
    let tape = Tape::new();
    let v = tape.param(&x);
    let loss = v.mul(v).unwrap().sum().unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[2.0, -4.0, 6.0]);
}

#[test]
fn constant_loss_gives_zero_gradients() {
    let x = Param::new(ParamId(3), Tensor::<f64>::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let tape = Tape::new();
    let _unused = tape.param(&x);
    let loss = tape.scalar(5.0).add_scalar(1.0).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(ParamId(3)).unwrap().data(), &[0.0; 4]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::zeros([2]));
    assert!(matches!(tape.backward(v), Err(TensorError::Contract(_))));
}

#[test]
fn hand_arithmetic_matmul_and_identity() {
    let tape = Tape::<f64>::no_grad();
    let a = tape.constant(Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.constant(Tensor::from_f64([2, 1], &[5.0, 6.0]).unwrap());
    assert_eq!(a.matmul(b).unwrap().value().data(), &[17.0, 39.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = Tensor::<f64>::randn([3, 5], 1.0, &mut rng);
    let out = tape
        .constant(Tensor::eye(3))
        .matmul(tape.constant(m.clone()))
        .unwrap();
    assert_eq!(out.value(), m);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tape = Tape::<f64>::no_grad();
    let p = tape
        .constant(Tensor::randn([4, 7], 3.0, &mut rng))
        .softmax()
        .unwrap()
        .value();
    for row in p.data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn shape_errors_name_both_shapes() {
    let tape = Tape::<f64>::no_grad();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    let err = a.matmul(b).unwrap_err();
    assert_eq!(
        err,
        TensorError::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("[2, 3]"));
    // Broadcasting only over leading axes.
    let c = tape.constant(Tensor::zeros([2]));
    assert!(a.add(c).is_err());
}

#[test]
fn non_finite_values_are_rejected() {
    let tape = Tape::<f64>::no_grad();
    let a = tape.constant(Tensor::from_f64([2], &[0.0, 1.0]).unwrap());
    assert_eq!(
        a.ln().unwrap_err(),
        TensorError::NonFinite { op: "ln" }
    );
}

#[test]
fn causal_softmax_masks_future() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tape = Tape::<f64>::no_grad();
    let p = tape
        .constant(Tensor::randn([1, 4, 4], 1.0, &mut rng))
        .causal_softmax()
        .unwrap()
        .value();
    for i in 0..4 {
        for j in 0..4 {
            let v = p.data()[i * 4 + j];
            if j > i {
                assert_eq!(v, 0.0);
            }
        }
    }
    assert_eq!(p.data()[0], 1.0);
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = Tensor::<f64>::randn([4, 3], 1.0, &mut rng);
    let params = [param(0, &[3, 3], &mut rng), param(1, &[3], &mut rng)];
    let (a, b) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));

    let losses = |tape: &Tape<f64>, which: u8| -> alora_autodiff::GradientMap<f64> {
        let w = tape.param(&params[0]);
        let bias = tape.param(&params[1]);
        let h = tape.constant(x.clone()).matmul(w).unwrap().add(bias).unwrap();
        let l1 = h.gelu().unwrap().sum().unwrap();
        let l2 = h.softmax().unwrap().sum_squares().unwrap();
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => l1.scale(a).unwrap().add(l2.scale(b).unwrap()).unwrap(),
        };
        tape.backward(loss).unwrap()
    };
    let g1 = losses(&Tape::new(), 1);
    let g2 = losses(&Tape::new(), 2);
    let g = losses(&Tape::new(), 0);
    for (id, t) in g.iter() {
        let (t1, t2) = (g1.get(id).unwrap(), g2.get(id).unwrap());
        for i in 0..t.numel() {
            let expect = a * t1.data()[i] + b * t2.data()[i];
            assert!((t.data()[i] - expect).abs() <= 1e-10);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let tape = Tape::<f32>::no_grad();
        let a = tape.constant(Tensor::randn([16, 32], 1.0, &mut rng));
        let b = tape.constant(Tensor::randn([32, 8], 1.0, &mut rng));
        a.matmul(b).unwrap().softmax().unwrap().value()
    };
    let (x, y) = (run(), run());
    assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn repeated_parameter_accumulates() {
    let x = Param::new(ParamId(0), Tensor::<f64>::from_f64([2], &[1.0, 2.0]).unwrap());
    let tape = Tape::new();
    let a = tape.param(&x);
    let b = tape.param(&x);
    let loss = a.add(b).unwrap().sum().unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[2.0, 2.0]);
}
