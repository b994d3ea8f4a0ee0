use defectscan_core::gradcheck;
use defectscan_core::tensor::{ElementwiseOp, Operand, Padding, ReduceKind, Tape, Tensor};
use defectscan_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

/// Inputs kept at least `margin` away from zero, for ops with a kink there.
fn random_away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = rng.random_range(-2.0..2.0);
        if v.abs() > margin {
            break v;
        }
    })
}

fn weights(len: usize) -> Tensor<f64> {
    // Fixed, non-uniform projection so that sum-type losses exercise every element differently.
    Tensor::from_fn(&[len], |i| ((i * 37 % 11) as f64 - 5.0) / 7.0)
}

const TOL32: f64 = 1e-4;
const TOL64: f64 = 1e-7;

#[test]
fn add_is_componentwise() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), false);
    let b = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), false);
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn multiplying_by_zero_annihilates_value_and_gradient() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::new(vec![3], vec![1.5, -2.0, 7.0]).unwrap(), true);
    let y = tape.mul_scalar(x, 0.0).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let loss = tape.sum_all(y).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn division_overflow_and_zero_divisor_are_domain_errors() {
    // 1 / 1e-300 = 1e300 is representable in f64 (extended-precision reference value).
    let mut t64 = Tape::<f64>::new();
    let a = t64.leaf(Tensor::new(vec![1], vec![1.0]).unwrap(), false);
    let b = t64.leaf(Tensor::new(vec![1], vec![1e-300]).unwrap(), false);
    let q = t64.div(a, b).unwrap();
    assert!((t64.value(q).data()[0] / 1e300 - 1.0).abs() < 1e-15);

    // In f32 the same kind of quotient overflows.
    let mut t32 = Tape::<f32>::new();
    let a = t32.leaf(Tensor::new(vec![1], vec![1.0]).unwrap(), false);
    let b = t32.leaf(Tensor::new(vec![1], vec![1e-40]).unwrap(), false);
    assert!(matches!(t32.div(a, b), Err(Error::Domain(_))));
    let z = t32.leaf(Tensor::new(vec![1], vec![0.0]).unwrap(), false);
    assert!(matches!(t32.div(a, z), Err(Error::Domain(_))));
    assert!(matches!(
        t32.elementwise(ElementwiseOp::Div, a, Operand::Scalar(0.0)),
        Err(Error::Domain(_))
    ));
}

#[test]
fn only_scalar_and_trailing_broadcasts_are_accepted() {
    let mut tape = Tape::<f32>::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
    let bias = tape.leaf(Tensor::zeros(&[3]), false);
    let one = tape.leaf(Tensor::zeros(&[1]), false);
    let bad = tape.leaf(Tensor::zeros(&[2]), false);
    assert!(tape.add(a, bias).is_ok());
    assert!(tape.add(a, one).is_ok());
    assert!(matches!(tape.add(a, bad), Err(Error::Shape(_))));
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::<f64>::new();
    let eye = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
    let m = tape.leaf(Tensor::new(vec![2, 2], vec![3.0, -1.0, 2.5, 8.0]).unwrap(), false);
    let p = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(p), tape.value(m));

    let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
    let b = tape.leaf(Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap(), false);
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 1]);
    assert_eq!(tape.value(c).data(), &[17.0, 39.0]);

    let bad = tape.leaf(Tensor::zeros(&[3, 1]), false);
    assert!(matches!(tape.matmul(a, bad), Err(Error::Shape(_))));
}

#[test]
fn reduce_examples() {
    let mut tape = Tape::<f64>::new();
    let c = tape.leaf(Tensor::full(&[2, 3, 4], 1.25), true);
    let m = tape.mean_all(c).unwrap();
    assert_eq!(tape.value(m).item().unwrap(), 1.25);

    let x = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
    let col_mean = tape.reduce(ReduceKind::Mean, x, &[0]).unwrap();
    assert_eq!(tape.value(col_mean).data(), &[2.0, 3.0]);
    assert!(matches!(
        tape.reduce(ReduceKind::Sum, x, &[2]),
        Err(Error::Shape(_))
    ));

    let s = tape.sum_all(x).unwrap();
    let grads = tape.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 1.0));
}

#[test]
fn backward_examples() {
    // x^2 at 3 -> 6
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let unused = tape.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(), true);
    let y = tape.mul(x, x).unwrap();
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item().unwrap(), 6.0);
    assert!(grads.get(unused).unwrap().data().iter().all(|&g| g == 0.0));

    // Non-scalar loss and second backward.
    let mut tape = Tape::<f64>::new();
    let v = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
    assert!(matches!(tape.backward(v), Err(Error::Shape(_))));
    let s = tape.sum_all(v).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::State(_))));
}

#[test]
fn sigmoid_of_dot_product_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let w = random(&[1, 4], &mut rng);
        let x = random(&[4, 1], &mut rng);
        let (c32, c64) = gradcheck!(&[w, x], |tape, v| {
            let z = tape.matmul(v[0], v[1])?;
            let s = tape.sigmoid(z)?;
            tape.sum_all(s)
        })
        .unwrap();
        assert!(c32.max_rel_error < TOL32, "{c32:?}");
        assert!(c64.max_rel_error < TOL64, "{c64:?}");
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for kind in [
        ElementwiseOp::Add,
        ElementwiseOp::Sub,
        ElementwiseOp::Mul,
        ElementwiseOp::Div,
        ElementwiseOp::Max,
    ] {
        for trial in 0..20 {
            let a = random(&[3, 4], &mut rng);
            // Keep divisors away from zero and max operands away from ties.
            let b = match (kind, trial % 3) {
                (ElementwiseOp::Div, 0) => random_away_from_zero(&[3, 4], 0.5, &mut rng),
                (ElementwiseOp::Div, 1) => random_away_from_zero(&[4], 0.5, &mut rng),
                (ElementwiseOp::Div, _) => random_away_from_zero(&[1], 0.5, &mut rng),
                (_, 0) => random(&[3, 4], &mut rng),
                (_, 1) => random(&[4], &mut rng),
                _ => random(&[1], &mut rng),
            };
            if kind == ElementwiseOp::Max {
                let (ad, bd) = (a.data(), b.data());
                let m = bd.len();
                if ad.iter().enumerate().any(|(i, x)| (x - bd[i % m]).abs() < 0.01) {
                    continue;
                }
            }
            let proj = weights(12);
            let (c32, c64) = gradcheck!(&[a.clone(), b.clone(), proj], |tape, v| {
                let y = tape.elementwise(kind, v[0], Operand::Var(v[1]))?;
                let y = tape.reshape(y, vec![12])?;
                let p = tape.mul(y, v[2])?;
                tape.sum_all(p)
            })
            .unwrap();
            assert!(c32.max_rel_error < TOL32, "{kind:?}: {c32:?}");
            assert!(c64.max_rel_error < TOL64, "{kind:?}: {c64:?}");
        }
    }
}

#[test]
fn scalar_operand_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let a = random(&[5], &mut rng);
        let proj = weights(5);
        let (c32, c64) = gradcheck!(&[a, proj], |tape, v| {
            let y = tape.mul_scalar(v[0], 1.7)?;
            let y = tape.add_scalar(y, -0.3)?;
            let y = tape.elementwise(ElementwiseOp::Div, y, Operand::Scalar(2.5))?;
            let p = tape.mul(y, v[1])?;
            tape.sum_all(p)
        })
        .unwrap();
        assert!(c32.max_rel_error < TOL32);
        assert!(c64.max_rel_error < TOL64);
    }
}

#[test]
fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let a = random(&[3, 5], &mut rng);
        let b = random(&[5, 2], &mut rng);
        let proj = weights(6);
        let (c32, c64) = gradcheck!(&[a, b, proj], |tape, v| {
            let c = tape.matmul(v[0], v[1])?;
            let c = tape.reshape(c, vec![6])?;
            let p = tape.mul(c, v[2])?;
            tape.sum_all(p)
        })
        .unwrap();
        assert!(c32.max_rel_error < TOL32, "{c32:?}");
        assert!(c64.max_rel_error < TOL64, "{c64:?}");
    }
}

#[test]
fn reduce_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in [ReduceKind::Sum, ReduceKind::Mean, ReduceKind::Max] {
        for _ in 0..20 {
            let x = random(&[2, 3, 4], &mut rng);
            // Max is not differentiable at ties; keep each group's entries apart.
            let tied = x.data().chunks(4).any(|g| {
                g.iter().enumerate().any(|(i, a)| g[i + 1..].iter().any(|b| (a - b).abs() < 0.01))
            });
            if kind == ReduceKind::Max && tied {
                continue;
            }
            let proj = weights(6);
            let (c32, c64) = gradcheck!(&[x, proj], |tape, v| {
                let r = tape.reduce(kind, v[0], &[2])?;
                let r = tape.reshape(r, vec![6])?;
                let p = tape.mul(r, v[1])?;
                tape.sum_all(p)
            })
            .unwrap();
            assert!(c32.max_rel_error < TOL32, "{kind:?}: {c32:?}");
            assert!(c64.max_rel_error < TOL64, "{kind:?}: {c64:?}");
        }
    }
}

#[test]
fn unary_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x = random_away_from_zero(&[8], 0.01, &mut rng);
        let pos = Tensor::from_fn(&[8], |_| rng.random_range(0.2..2.0));
        let proj = weights(8);
        let (c32, c64) = gradcheck!(&[x, pos, proj], |tape, v| {
            let r = tape.relu(v[0])?;
            let s = tape.sigmoid(v[0])?;
            let l = tape.log(v[1])?;
            let t = tape.add(r, s)?;
            let t = tape.add(t, l)?;
            let p = tape.mul(t, v[2])?;
            tape.sum_all(p)
        })
        .unwrap();
        assert!(c32.max_rel_error < TOL32, "{c32:?}");
        assert!(c64.max_rel_error < TOL64, "{c64:?}");
    }
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..20 {
        let (stride, padding) = match trial % 3 {
            0 => (1, Padding::Valid),
            1 => (1, Padding::Same),
            _ => (2, Padding::Same),
        };
        let x = random(&[2, 5, 4, 2], &mut rng);
        let k = random(&[3, 3, 2, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let out_len = {
            let mut t = Tape::<f64>::new();
            let (xv, kv, bv) = (t.leaf(x.clone(), false), t.leaf(k.clone(), false), t.leaf(b.clone(), false));
            let y = t.conv2d(xv, kv, Some(bv), stride, padding).unwrap();
            t.value(y).len()
        };
        let proj = weights(out_len);
        let (c32, c64) = gradcheck!(&[x, k, b, proj], |tape, v| {
            let y = tape.conv2d(v[0], v[1], Some(v[2]), stride, padding)?;
            let n = tape.value(y).len();
            let y = tape.reshape(y, vec![n])?;
            let p = tape.mul(y, v[3])?;
            tape.sum_all(p)
        })
        .unwrap();
        assert!(c32.max_rel_error < TOL32, "{c32:?}");
        assert!(c64.max_rel_error < TOL64, "{c64:?}");
    }
}

#[test]
fn batch_norm_gradients_in_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..20 {
        let x = random(&[4, 2, 2, 3], &mut rng);
        let gamma = random(&[3], &mut rng);
        let beta = random(&[3], &mut rng);
        let proj = weights(48);
        let train = trial % 2 == 0;
        let (c32, c64) = gradcheck!(&[x, gamma, beta, proj], |tape, v| {
            let y = if train {
                tape.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0
            } else {
                tape.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?
            };
            let y = tape.reshape(y, vec![48])?;
            let p = tape.mul(y, v[3])?;
            tape.sum_all(p)
        })
        .unwrap();
        assert!(c32.max_rel_error < TOL32, "train={train}: {c32:?}");
        assert!(c64.max_rel_error < TOL64, "train={train}: {c64:?}");
    }
}

#[test]
fn loss_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let logits = random(&[5], &mut rng);
        let labels: Vec<f64> = (0..5).map(|_| f64::from(rng.random_range(0..2u8))).collect();
        let multi = random(&[4, 3], &mut rng);
        let classes: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let (c32, c64) = gradcheck!(&[logits, multi], |tape, v| {
            let p = tape.sigmoid(v[0])?;
            let ls: Vec<_> = labels.iter().map(|&l| num_traits::cast(l).unwrap()).collect();
            let b = tape.bce(p, &ls, num_traits::cast(2.0).unwrap(), num_traits::cast(0.5).unwrap())?;
            let b = tape.mean_all(b)?;
            let x = tape.softmax_cross_entropy(v[1], &classes)?;
            tape.add(b, x)
        })
        .unwrap();
        assert!(c32.max_rel_error < TOL32, "{c32:?}");
        assert!(c64.max_rel_error < TOL64, "{c64:?}");
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    // d(a f + b g) = a df + b dg on a shared parameter.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = random(&[3, 3], &mut rng);
    let x = random(&[3, 2], &mut rng);
    let grad_of = |alpha: f64, beta: f64| {
        let mut tape = Tape::<f64>::new();
        let wv = tape.leaf(w.clone(), true);
        let xv = tape.leaf(x.clone(), false);
        let z = tape.matmul(wv, xv).unwrap();
        let f = tape.sigmoid(z).unwrap();
        let f = tape.sum_all(f).unwrap();
        let g = tape.mul(wv, wv).unwrap();
        let g = tape.sum_all(g).unwrap();
        let fa = tape.mul_scalar(f, alpha).unwrap();
        let gb = tape.mul_scalar(g, beta).unwrap();
        let loss = tape.add(fa, gb).unwrap();
        tape.backward(loss).unwrap().take(wv).unwrap()
    };
    let combined = grad_of(0.7, -1.3);
    let df = grad_of(1.0, 0.0);
    let dg = grad_of(0.0, 1.0);
    for i in 0..9 {
        let want = 0.7 * df.data()[i] - 1.3 * dg.data()[i];
        assert!((combined.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&[2, 6, 6, 3], &mut rng).cast::<f32>();
        let k = random(&[3, 3, 3, 4], &mut rng).cast::<f32>();
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(x, true);
        let kv = tape.leaf(k, true);
        let y = tape.conv2d(xv, kv, None, 1, Padding::Same).unwrap();
        let y = tape.relu(y).unwrap();
        let loss = tape.mean_all(y).unwrap();
        let value = tape.value(loss).clone();
        let grads = tape.backward(loss).unwrap();
        (value, grads.get(xv).unwrap().clone(), grads.get(kv).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data()[0].to_bits(), b.0.data()[0].to_bits());
    assert!(a.1.data().iter().zip(b.1.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.2.data().iter().zip(b.2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
