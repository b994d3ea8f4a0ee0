use defectscan_core::gradcheck;
use defectscan_core::nn::{
    self, lr_at_step, Adam, AdamConfig, BatchNormState, GroupTag, Mode, ParamKind, Parameter,
};
use defectscan_core::tensor::{Padding, Tape, Tensor};
use defectscan_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

fn proj(len: usize) -> Tensor<f64> {
    Tensor::from_fn(&[len], |i| ((i * 37 % 11) as f64 - 5.0) / 7.0)
}

#[test]
fn conv_examples() {
    let mut tape = Tape::<f32>::new();
    let img = Tensor::from_fn(&[1, 4, 4, 1], |i| i as f32);
    let x = tape.leaf(img.clone(), false);
    let k = tape.leaf(Tensor::full(&[1, 1, 1, 1], 1.0), false);
    let y = tape.conv2d(x, k, None, 1, Padding::Valid).unwrap();
    assert_eq!(tape.value(y), &img);

    let ones = tape.leaf(Tensor::full(&[1, 5, 5, 1], 1.0), false);
    let k3 = tape.leaf(Tensor::full(&[3, 3, 1, 1], 1.0), false);
    let y = tape.conv2d(ones, k3, None, 1, Padding::Valid).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 3, 3, 1]);
    assert!(tape.value(y).data().iter().all(|&v| v == 9.0));

    let k_bad = tape.leaf(Tensor::full(&[3, 3, 2, 1], 1.0), false);
    assert!(matches!(
        tape.conv2d(ones, k_bad, None, 1, Padding::Valid),
        Err(Error::Shape(_))
    ));
}

#[test]
fn batchnorm_train_normalizes_and_eval_with_unit_stats_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[32, 3, 3, 4], |i| (i % 4) as f32 * 3.0 + rng.random_range(-5.0f32..5.0));
    let mut tape = Tape::<f32>::new();
    let xv = tape.leaf(x.clone(), false);
    let g = tape.leaf(Tensor::full(&[4], 1.0), false);
    let b = tape.leaf(Tensor::zeros(&[4]), false);
    let mut state = BatchNormState::new(4, 0.99, 1e-5);
    let y = nn::batchnorm(&mut tape, xv, g, b, &mut state, Mode::Train).unwrap();
    let yv = tape.value(y);
    for c in 0..4 {
        let vals: Vec<f64> = yv.data().iter().skip(c).step_by(4).map(|&v| v as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }

    let fresh = BatchNormState::<f32>::new(4, 0.99, 1e-5);
    let mut fresh2 = fresh.clone();
    let y = nn::batchnorm(&mut tape, xv, g, b, &mut fresh2, Mode::Eval).unwrap();
    assert_eq!(fresh, fresh2, "eval mode must not touch running stats");
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (a, e) in tape.value(y).data().iter().zip(x.data()) {
        assert!((*a as f64 - *e as f64 * scale).abs() < 1e-5);
    }
}

#[test]
fn running_stats_follow_two_step_exponential_average() {
    let batch1 = Tensor::new(vec![4, 1], vec![1.0f64, 2.0, 3.0, 6.0]).unwrap();
    let batch2 = Tensor::new(vec![2, 1], vec![10.0f64, 14.0]).unwrap();
    let mut state = BatchNormState::<f64>::new(1, 0.9, 1e-3);
    for b in [&batch1, &batch2] {
        let mut tape = Tape::new();
        let x = tape.leaf(b.clone(), false);
        let g = tape.leaf(Tensor::full(&[1], 1.0), false);
        let be = tape.leaf(Tensor::zeros(&[1]), false);
        nn::batchnorm(&mut tape, x, g, be, &mut state, Mode::Train).unwrap();
    }
    // batch1: mean 3, biased var (4+1+0+9)/4 = 3.5; batch2: mean 12, var 4.
    let mean = 0.9 * (0.9 * 0.0 + 0.1 * 3.0) + 0.1 * 12.0;
    let var = 0.9 * (0.9 * 1.0 + 0.1 * 3.5) + 0.1 * 4.0;
    assert!((state.running_mean[0] - mean).abs() < 1e-12);
    assert!((state.running_var[0] - var).abs() < 1e-12);
}

#[test]
fn dropout_semantics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::full(&[1_000_000], 1.0), false);
    for mode in [Mode::Train, Mode::Eval] {
        let y = nn::dropout(&mut tape, x, 0.0, mode, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }
    let y = nn::dropout(&mut tape, x, 0.5, Mode::Eval, &mut rng).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let y = nn::dropout(&mut tape, x, 0.5, Mode::Train, &mut rng).unwrap();
    let yv = tape.value(y);
    let mean = yv.data().iter().map(|&v| v as f64).sum::<f64>() / yv.len() as f64;
    assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    assert!(yv.data().iter().all(|&v| v == 0.0 || v == 2.0));
    assert!(nn::dropout(&mut tape, x, 1.0, Mode::Train, &mut rng).is_err());
}

#[test]
fn pooling_and_activation_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(vec![1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
    let p = nn::global_avg_pool(&mut tape, x).unwrap();
    assert_eq!(tape.value(p).shape(), &[1, 1]);
    assert_eq!(tape.value(p).data(), &[2.5]);
    let c = tape.leaf(Tensor::full(&[2, 3, 3, 2], 0.7), false);
    let pc = nn::global_avg_pool(&mut tape, c).unwrap();
    assert!(tape.value(pc).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    let s = tape.sum_all(p).unwrap();
    let grads = tape.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&g| g == 0.25));

    let mut tape = Tape::<f64>::new();
    let z = tape.leaf(Tensor::new(vec![4], vec![0.0, -3.0, 3.0, 40.0]).unwrap(), false);
    let s = nn::sigmoid(&mut tape, z).unwrap();
    let r = nn::relu(&mut tape, z).unwrap();
    assert_eq!(tape.value(s).data()[0], 0.5);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0, 40.0]);
    // 1 - sigmoid(40) = e^-40 / (1 + e^-40) ~ 4.25e-18.
    assert!((tape.value(s).data()[3] - 1.0).abs() < 1e-15);
    let m = tape.leaf(Tensor::new(vec![1], vec![-40.0]).unwrap(), false);
    let sm = nn::sigmoid(&mut tape, m).unwrap();
    let v = tape.value(sm).data()[0];
    assert!(v > 0.0 && v < 1e-15 && v.is_finite());
    assert!((v - 4.248354255291589e-18).abs() < 1e-30);
}

#[test]
fn dense_rejects_mismatched_bias() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::zeros(&[2, 3]), false);
    let w = tape.leaf(Tensor::zeros(&[3, 4]), false);
    let b = tape.leaf(Tensor::zeros(&[5]), false);
    assert!(matches!(nn::dense(&mut tape, x, w, b), Err(Error::Shape(_))));
}

fn param(name: &str, value: Tensor<f32>, kind: ParamKind) -> Parameter<f32> {
    Parameter::new(name, value, GroupTag::Head, kind)
}

#[test]
fn l2_examples() {
    let w = param("w", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), ParamKind::Weight);
    let b = param("b", Tensor::new(vec![1], vec![10.0]).unwrap(), ParamKind::Bias);
    let g = param("g", Tensor::new(vec![1], vec![10.0]).unwrap(), ParamKind::BnGamma);
    let params = vec![w.clone(), b, g];
    assert_eq!(nn::l2_value(&params, 0.0), 0.0);
    assert!((nn::l2_value(&params, 0.1) - 2.5).abs() < 1e-12);

    let mut tape = Tape::<f32>::new();
    let vars: Vec<_> = params.iter().map(|p| tape.leaf(p.value.clone(), true)).collect();
    let pen = nn::l2_penalty(&mut tape, &params, &vars, 0.1).unwrap();
    assert!((tape.value(pen).item().unwrap() - 2.5).abs() < 1e-6);

    let mut frozen = w;
    frozen.trainable = false;
    assert_eq!(nn::l2_value(&[frozen], 0.1), 0.0);
}

#[test]
fn adam_examples() {
    let mut p = vec![param("w", Tensor::full(&[3], 0.5), ParamKind::Weight)];
    p[0].grad = Some(Tensor::zeros(&[3]));
    let before = p[0].value.clone();
    let mut adam = Adam::new(AdamConfig::default());
    adam.step(&mut p, 0.001).unwrap();
    assert_eq!(p[0].value, before);

    // First step from zero moments with g = 1: m_hat = v_hat = 1, so the step is
    // lr / (1 + eps / sqrt(1 - beta2)).
    let mut p = vec![Parameter::<f64>::new("w", Tensor::full(&[1], 0.0), GroupTag::Head, ParamKind::Weight)];
    p[0].grad = Some(Tensor::full(&[1], 1.0));
    let mut adam = Adam::new(AdamConfig::default());
    adam.step(&mut p, 0.001).unwrap();
    let eps_hat = 1e-7 / (1.0f64 - 0.999).sqrt();
    let want = -0.001 / (1.0 + eps_hat);
    assert!((p[0].value.data()[0] - want).abs() < 1e-15);
    assert!((p[0].value.data()[0] + 0.001).abs() < 1e-8);

    let mut p = vec![param("w", Tensor::full(&[2], 0.25), ParamKind::Weight)];
    p[0].trainable = false;
    p[0].grad = Some(Tensor::full(&[2], 3.0));
    let bits: Vec<u32> = p[0].value.data().iter().map(|v| v.to_bits()).collect();
    let mut adam = Adam::new(AdamConfig::default());
    for _ in 0..5 {
        adam.step(&mut p, 0.1).unwrap();
    }
    assert_eq!(bits, p[0].value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn adam_rejects_nan_gradients_before_touching_anything() {
    let mut p = vec![
        param("a", Tensor::full(&[2], 1.0), ParamKind::Weight),
        Parameter::new("b", Tensor::full(&[2], 1.0), GroupTag::Backbone(3), ParamKind::Bias),
    ];
    p[0].grad = Some(Tensor::full(&[2], 1.0));
    p[1].grad = Some(Tensor::new(vec![2], vec![0.0, f32::NAN]).unwrap());
    let mut adam = Adam::new(AdamConfig::default());
    match adam.step(&mut p, 0.01) {
        Err(Error::NonFiniteGradient { param, group }) => {
            assert_eq!(param, "b");
            assert_eq!(group, "backbone[3]");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(p[0].value.data(), &[1.0, 1.0]);
    assert_eq!(adam.steps(), 0);
}

#[test]
fn lr_schedule_examples() {
    assert_eq!(lr_at_step(0.001, 0.96, 1000, 0), 0.001);
    assert!((lr_at_step(0.001, 0.96, 1000, 1000) - 0.00096).abs() < 1e-15);
    assert!((lr_at_step(0.001, 0.96, 1000, 500) - 0.0009798).abs() < 1e-7);
}

/// Conv -> batchnorm -> relu -> pool -> dense -> sigmoid, with every input as a variable.
fn layer_stack<T: defectscan_core::tensor::Scalar>(
    tape: &mut Tape<T>,
    v: &[defectscan_core::tensor::Var],
    stride: usize,
    train: bool,
    pre_relu: Option<&mut Vec<f64>>,
) -> defectscan_core::Result<defectscan_core::tensor::Var> {
    // Batch statistics cancel a conv bias exactly, so it is only wired in eval mode.
    let bias = if train { None } else { Some(v[2]) };
    let y = tape.conv2d(v[0], v[1], bias, stride, Padding::Same)?;
    let mut bn = nn::BatchNormState::new(4, 0.99, 1e-3);
    bn.running_mean = vec![T::of(0.2), T::of(-0.1), T::of(0.0), T::of(0.5)];
    bn.running_var = vec![T::of(4.0), T::of(9.0), T::of(2.0), T::of(6.0)];
    let mode = if train { Mode::Train } else { Mode::Eval };
    let y = nn::batchnorm(tape, y, v[3], v[4], &mut bn, mode)?;
    if let Some(out) = pre_relu {
        out.extend(tape.value(y).data().iter().map(|x| x.as_f64()));
    }
    let y = nn::relu(tape, y)?;
    let y = nn::global_avg_pool(tape, y)?;
    let y = nn::dense(tape, y, v[5], v[6])?;
    let y = nn::sigmoid(tape, y)?;
    let y = tape.reshape(y, vec![6])?;
    let y = tape.mul(y, v[7])?;
    tape.sum_all(y)
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut accepted = 0;
    let mut trial = 0;
    while accepted < 20 {
        trial += 1;
        let inputs = [
            random(&[2, 6, 5, 3], &mut rng),
            random(&[3, 3, 3, 4], &mut rng),
            random(&[4], &mut rng),
            random(&[4], &mut rng),
            random(&[4], &mut rng),
            random(&[4, 3], &mut rng),
            random(&[3], &mut rng),
            proj(6),
        ];
        let stride = 1 + trial % 2;
        let train = trial % 3 != 0;
        // Skip instances where a finite-difference step could cross the relu kink.
        let mut z = Vec::new();
        let mut probe = Tape::<f64>::new();
        let vars: Vec<_> = inputs.iter().map(|t| probe.leaf(t.clone(), false)).collect();
        layer_stack(&mut probe, &vars, stride, train, Some(&mut z)).unwrap();
        if z.iter().any(|v| v.abs() < 0.05) {
            continue;
        }
        accepted += 1;
        let (c32, c64) = gradcheck!(&inputs, |tape, v| layer_stack(tape, v, stride, train, None)).unwrap();
        assert!(c32.max_rel_error < 1e-4, "{c32:?}");
        assert!(c64.max_rel_error < 1e-7, "{c64:?}");
    }
}

#[test]
fn dropout_and_l2_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for trial in 0..20u64 {
        let x = random(&[3, 5], &mut rng);
        let w = random(&[5, 2], &mut rng);
        let (c32, c64) = gradcheck!(&[x, w], |tape, v| {
            // Same mask stream for every evaluation of the function.
            let mut mask_rng = ChaCha8Rng::seed_from_u64(100 + trial);
            let h = nn::dropout(tape, v[0], 0.4, Mode::Train, &mut mask_rng)?;
            let y = tape.matmul(h, v[1])?;
            let y = tape.sigmoid(y)?;
            let y = tape.sum_all(y)?;
            let params = [
                Parameter::new("x", tape.value(v[0]).clone(), GroupTag::Head, ParamKind::Bias),
                Parameter::new("w", tape.value(v[1]).clone(), GroupTag::Head, ParamKind::Weight),
            ];
            let pen = nn::l2_penalty(tape, &params, &[v[0], v[1]], 0.05)?;
            tape.add(y, pen)
        })
        .unwrap();
        assert!(c32.max_rel_error < 1e-4, "{c32:?}");
        assert!(c64.max_rel_error < 1e-7, "{c64:?}");
    }
}

proptest! {
    #[test]
    fn lr_strictly_decreases(lr0 in 1e-6f64..1.0, rate in 0.5f64..0.999, steps in 100u64..5000, s in 0u64..50_000) {
        prop_assert!(lr_at_step(lr0, rate, steps, s + 1) < lr_at_step(lr0, rate, steps, s));
    }

    #[test]
    fn frozen_parameters_never_move(seed in 0u64..1000, n_steps in 1usize..6, lr in 1e-4f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<Parameter<f32>> = (0..3)
            .map(|i| {
                let mut p = Parameter::new(
                    format!("p{i}"),
                    Tensor::from_fn(&[4], |_| rng.random_range(-1.0f32..1.0)),
                    GroupTag::Backbone(i),
                    ParamKind::Weight,
                );
                p.trainable = false;
                p
            })
            .collect();
        let bits = |ps: &[Parameter<f32>]| -> Vec<u32> {
            ps.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect()
        };
        let before = bits(&params);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..n_steps {
            for p in &mut params {
                p.grad = Some(Tensor::from_fn(&[4], |_| rng.random_range(-5.0f32..5.0)));
            }
            adam.step(&mut params, lr).unwrap();
        }
        prop_assert_eq!(before, bits(&params));
    }

    #[test]
    fn batchnorm_train_statistics(seed in 0u64..500, n in 32usize..48, shift in -10.0f64..10.0, spread in 0.5f64..20.0) {
        // Spread keeps the batch variance far above epsilon, whose effect is var/(var+eps).
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[n, 2], |_| shift + spread * rng.random_range(-1.0f64..1.0));
        let mut tape = Tape::<f64>::new();
        let xv = tape.leaf(x, false);
        let g = tape.leaf(Tensor::full(&[2], 1.0), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        let mut st = BatchNormState::new(2, 0.99, 1e-5);
        let y = nn::batchnorm(&mut tape, xv, g, b, &mut st, Mode::Train).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = tape.value(y).data().iter().skip(c).step_by(2).copied().collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }
}
