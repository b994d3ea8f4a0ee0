use rand::Rng;

use super::{Mode, Parameter};
use crate::error::{Error, Result};
use crate::tensor::{ReduceKind, Scalar, Tape, Tensor, Var};

pub const DEFAULT_BN_MOMENTUM: f64 = 0.99;
pub const DEFAULT_BN_EPSILON: f64 = 1e-5;

/// Running statistics and constants of one batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T: Scalar = f32> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum,
            epsilon,
        }
    }

    /// `running <- m * running + (1 - m) * batch`.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(batch_mean) {
            *r = T::of(m * r.as_f64() + (1.0 - m) * b.as_f64());
        }
        for (r, &b) in self.running_var.iter_mut().zip(batch_var) {
            *r = T::of(m * r.as_f64() + (1.0 - m) * b.as_f64());
        }
    }
}

/// Batch normalization over all axes but the last.
///
/// In train mode the batch statistics normalize the input and are folded into
/// the running averages; in eval mode only the running statistics are used.
pub fn batchnorm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<Var> {
    let eps = T::of(state.epsilon);
    match mode {
        Mode::Train => {
            let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, eps)?;
            state.update(&mean, &var);
            Ok(y)
        }
        Mode::Eval => tape.batch_norm_eval(x, gamma, beta, &state.running_mean, &state.running_var, eps),
    }
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let scale = T::of(1.0 / (1.0 - rate));
    let shape = tape.value(x).shape().to_vec();
    let mask = Tensor::from_fn(&shape, |_| {
        if rng.random::<f64>() >= rate {
            scale
        } else {
            T::zero()
        }
    });
    let m = tape.constant(mask);
    tape.mul(x, m)
}

/// Per-sample, per-channel spatial mean of an NHWC tensor: `[N,H,W,C] -> [N,C]`.
pub fn global_avg_pool<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    if tape.value(x).ndim() != 4 {
        return Err(Error::Shape(format!(
            "global average pooling needs [N,H,W,C], got {:?}",
            tape.value(x).shape()
        )));
    }
    tape.reduce(ReduceKind::Mean, x, &[1, 2])
}

/// `x W + b` for `x: [N, in]`, `W: [in, out]`, `b: [out]`.
pub fn dense<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let out = tape.value(w).shape().get(1).copied();
    if tape.value(b).shape().len() != 1 || Some(tape.value(b).len()) != out {
        return Err(Error::Shape(format!(
            "dense bias {:?} does not match weight {:?}",
            tape.value(b).shape(),
            tape.value(w).shape()
        )));
    }
    let z = tape.matmul(x, w)?;
    tape.add(z, b)
}

pub fn relu<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.relu(x)
}

pub fn sigmoid<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    tape.sigmoid(x)
}

/// `lambda * sum(w^2)` over the penalized parameters (trainable weights).
///
/// `vars[i]` is the tape handle of `params[i]`.
pub fn l2_penalty<T: Scalar>(
    tape: &mut Tape<T>,
    params: &[Parameter<T>],
    vars: &[Var],
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::Config(format!("L2 lambda {lambda} is negative")));
    }
    if params.len() != vars.len() {
        return Err(Error::Shape("one tape variable per parameter expected".into()));
    }
    let mut total: Option<Var> = None;
    for (p, &v) in params.iter().zip(vars) {
        if !p.penalized() {
            continue;
        }
        let sq = tape.mul(v, v)?;
        let s = tape.sum_all(sq)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    match total {
        Some(t) => tape.mul_scalar(t, T::of(lambda)),
        None => Ok(tape.constant(Tensor::scalar(T::zero()))),
    }
}

/// Value of [`l2_penalty`] without recording anything.
pub fn l2_value<T: Scalar>(params: &[Parameter<T>], lambda: f64) -> f64 {
    lambda
        * params
            .iter()
            .filter(|p| p.penalized())
            .flat_map(|p| p.value.data())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
}
