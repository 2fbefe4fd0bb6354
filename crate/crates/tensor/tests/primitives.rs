use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stcat_tensor::{grad_check, Tape, Tensor, TensorError, Unary, Var};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.5..1.5))
}

/// Reduces any output to a scalar with fixed random weights so every
/// output coordinate contributes a distinct amount to the checked loss.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> stcat_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.shape(y), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

const TRIALS: u64 = 10;
const TOL: f64 = 1e-6;
const EPS: f64 = 1e-6;

fn check_unary(kind: Unary, lo: f64, hi: f64) {
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let mut x = Tensor::from_fn(vec![3, 5], |_| rng.gen_range(lo..hi));
        if matches!(kind, Unary::Relu | Unary::Abs | Unary::SmoothL1) {
            // keep away from kinks
            for v in x.data_mut() {
                if v.abs() < 0.05 || (v.abs() - 1.0).abs() < 0.05 {
                    *v += 0.2;
                }
            }
        }
        let r = grad_check(
            |tape, v| {
                let y = tape.unary(v, kind)?;
                weighted_sum(tape, y, trial)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "{kind:?} trial {trial}: {r:?}");
    }
}

#[test]
fn unary_gradients_match_finite_differences() {
    for kind in [
        Unary::Neg,
        Unary::Tanh,
        Unary::Sigmoid,
        Unary::Relu,
        Unary::Gelu,
        Unary::Exp,
        Unary::Sin,
        Unary::Cos,
        Unary::Abs,
        Unary::Softplus,
        Unary::SmoothL1,
    ] {
        check_unary(kind, -2.0, 2.0);
    }
    check_unary(Unary::Log, 0.2, 3.0);
}

fn check_binary(f: impl Fn(&mut Tape<f64>, Var, Var) -> stcat_tensor::Result<Var>, sa: &[usize], sb: &[usize]) {
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
        let a = random(sa, &mut rng);
        let mut b = random(sb, &mut rng);
        // positive denominators for div
        for v in b.data_mut() {
            *v = v.abs() + 0.5;
        }
        let bc = b.clone();
        let r = grad_check(
            |tape, v| {
                let c = tape.constant(bc.clone());
                let y = f(tape, v, c)?;
                weighted_sum(tape, y, trial)
            },
            &a,
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "lhs trial {trial}: {r:?}");
        let ac = a.clone();
        let r = grad_check(
            |tape, v| {
                let c = tape.constant(ac.clone());
                let y = f(tape, c, v)?;
                weighted_sum(tape, y, trial)
            },
            &b,
            EPS,
        )
        .unwrap();
        assert!(r.max_rel_error < TOL, "rhs trial {trial}: {r:?}");
    }
}

#[test]
fn binary_gradients_match_finite_differences() {
    check_binary(|t, a, b| t.add(a, b), &[3, 4], &[3, 4]);
    check_binary(|t, a, b| t.sub(a, b), &[3, 4], &[3, 4]);
    check_binary(|t, a, b| t.mul(a, b), &[3, 4], &[3, 4]);
    check_binary(|t, a, b| t.div(a, b), &[3, 4], &[3, 4]);
    check_binary(|t, a, b| t.minimum(a, b), &[3, 4], &[3, 4]);
    check_binary(|t, a, b| t.maximum(a, b), &[3, 4], &[3, 4]);
    check_binary(|t, a, b| t.add_bcast(a, b), &[2, 3, 4], &[4]);
    check_binary(|t, a, b| t.mul_bcast(a, b), &[2, 3, 4], &[3, 4]);
    check_binary(|t, a, b| t.matmul(a, b), &[3, 5], &[5, 2]);
    check_binary(
        |t, a, b| {
            let c = t.concat(&[a, b], 1)?;
            t.tanh(c)
        },
        &[3, 2],
        &[3, 4],
    );
}

#[test]
fn structural_gradients_match_finite_differences() {
    type Op = Box<dyn Fn(&mut Tape<f64>, Var) -> stcat_tensor::Result<Var>>;
    let ops: Vec<(&str, Vec<usize>, Op)> = vec![
        ("transpose", vec![3, 4], Box::new(|t, v| t.transpose(v))),
        ("slice0", vec![4, 3], Box::new(|t, v| t.slice(v, 0, 1, 2))),
        ("slice1", vec![2, 5, 3], Box::new(|t, v| t.slice(v, 1, 2, 3))),
        ("reshape", vec![2, 6], Box::new(|t, v| t.reshape(v, [3, 4]))),
        ("repeat", vec![2, 3], Box::new(|t, v| t.repeat(v, 3))),
        ("softmax0", vec![4, 3], Box::new(|t, v| t.softmax(v, 0))),
        ("softmax1", vec![2, 3, 4], Box::new(|t, v| t.softmax(v, 1))),
        ("mean_axis", vec![3, 4, 2], Box::new(|t, v| t.mean_axis(v, 1))),
        ("scale", vec![3], Box::new(|t, v| t.scale(v, 2.5))),
        ("offset", vec![3], Box::new(|t, v| t.offset(v, 2.5))),
        ("clamp", vec![6], Box::new(|t, v| t.clamp(v, -10.0, 10.0))),
        ("gather", vec![5, 3], Box::new(|t, v| t.gather_rows(v, &[4, 0, 4, 2]))),
        (
            "layer_norm",
            vec![3, 8],
            Box::new(|t, v| {
                let g = t.constant(Tensor::from_fn(vec![8], |i| 0.5 + i as f64 * 0.1));
                let b = t.constant(Tensor::from_fn(vec![8], |i| i as f64 * -0.05));
                t.layer_norm(v, g, b, 1e-5)
            }),
        ),
    ];
    for (name, shape, f) in &ops {
        for trial in 0..TRIALS {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + trial);
            let x = random(shape, &mut rng);
            let r = grad_check(
                |tape, v| {
                    let y = f(tape, v)?;
                    weighted_sum(tape, y, trial)
                },
                &x,
                EPS,
            )
            .unwrap();
            assert!(r.max_rel_error < TOL, "{name} trial {trial}: {r:?}");
        }
    }
}

#[test]
fn layer_norm_gain_and_bias_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[4, 6], &mut rng);
    let gain = random(&[6], &mut rng);
    let xc = x.clone();
    let r = grad_check(
        |tape, g| {
            let xv = tape.constant(xc.clone());
            let b = tape.constant(Tensor::zeros(vec![6]));
            let y = tape.layer_norm(xv, g, b, 1e-5)?;
            weighted_sum(tape, y, 1)
        },
        &gain,
        EPS,
    )
    .unwrap();
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn grad_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[7], &mut rng);
    let r = grad_check(
        |t, v| {
            let sq = t.mul(v, v)?;
            t.sum(sq)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-8, "{r:?}");

    let x = random(&[8], &mut rng);
    let r = grad_check(
        |t, v| {
            let g = t.constant(Tensor::full(vec![8], 1.0));
            let b = t.constant(Tensor::zeros(vec![8]));
            let y = t.layer_norm(v, g, b, 1e-5)?;
            let w = t.constant(Tensor::from_fn(vec![8], |i| (i as f64 - 3.0) * 0.3));
            let y = t.mul(y, w)?;
            t.sum(y)
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn forward_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[4], &[1.0, 1.0, 1.0, 1.0]), false);
    let s = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(s).data(), &[0.25; 4]);

    let z = tape.leaf(t(&[1], &[0.0]), false);
    let th = tape.tanh(z).unwrap();
    let sg = tape.sigmoid(z).unwrap();
    assert_eq!(tape.value(th).item(), 0.0);
    assert_eq!(tape.value(sg).item(), 0.5);

    let a = tape.leaf(Tensor::full(vec![2, 3], 1.0), false);
    let b = tape.leaf(Tensor::full(vec![3, 2], 1.0), false);
    let m = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(m).shape(), &[2, 2]);
    assert_eq!(tape.value(m).data(), &[3.0; 4]);
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[1], &[3.0]), true);
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(x).item(), 6.0);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![5]), true);
    let s = tape.sigmoid(x).unwrap();
    let l = tape.sum(s).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(x).data(), &[0.25; 5]);
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
    let l = tape.sum(x).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
    assert_eq!(g.wrt(x).data(), &[1.0, 1.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
    let err = tape.backward(x).err().unwrap();
    assert_eq!(err, TensorError::NonScalarLoss { shape: vec![2] });
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::zeros(vec![2, 3]), false);
    let b = tape.leaf(Tensor::zeros(vec![2, 3]), false);
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    let c = tape.leaf(Tensor::zeros(vec![3]), false);
    assert!(matches!(
        tape.add(a, c),
        Err(TensorError::ShapeMismatch { op: "add", .. })
    ));
    assert!(matches!(tape.softmax(a, 2), Err(TensorError::InvalidAxis { .. })));
}

#[test]
fn non_finite_output_names_the_op() {
    let mut tape = Tape::<f64>::new().with_finite_checks(true);
    let x = tape.leaf(t(&[1], &[0.0]), false);
    assert_eq!(tape.log(x).unwrap_err(), TensorError::NonFinite { op: "log" });
    let mut tape = Tape::<f64>::new().with_finite_checks(false);
    let x = tape.leaf(t(&[1], &[0.0]), false);
    assert!(tape.log(x).is_ok());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::from_fn(vec![6, 8], |_| rng.gen_range(-1.0..1.0)), true);
        let w = tape.leaf(Tensor::from_fn(vec![8, 8], |_| rng.gen_range(-1.0..1.0)), true);
        let h = tape.matmul(a, w).unwrap();
        let h = tape.tanh(h).unwrap();
        let s = tape.softmax(h, 1).unwrap();
        let l = tape.sum(s).unwrap();
        let l = tape.mul(l, l).unwrap();
        let g = tape.backward(l).unwrap();
        (g.wrt(a), g.wrt(w))
    };
    let (a1, w1) = run();
    let (a2, w2) = run();
    assert_eq!(
        a1.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        a2.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(w1, w2);
}
