//! Layers, parameters, regularizers and the optimizer.
//!
//! Layers are free functions over a [`Tape`](crate::tensor::Tape); the
//! trainable state they read lives in [`Parameter`]s owned by the caller.

mod layers;
mod optim;

pub use layers::{
    batchnorm, dense, dropout, global_avg_pool, l2_penalty, l2_value, relu, sigmoid, BatchNormState,
    DEFAULT_BN_EPSILON, DEFAULT_BN_MOMENTUM,
};
pub use optim::{lr_at_step, Adam, AdamConfig};

use rand::Rng;
use rand::distr::{Distribution, Uniform};
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Padding, Scalar, Tensor};

/// Train or inference behavior for dropout and batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Which part of the network a parameter belongs to.
///
/// Backbone blocks are numbered from 0 at the input side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupTag {
    Backbone(usize),
    Head,
}

impl std::fmt::Display for GroupTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GroupTag::Backbone(i) => write!(f, "backbone[{i}]"),
            GroupTag::Head => f.write_str("head"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
}

#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
    pub group: GroupTag,
    pub kind: ParamKind,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, group: GroupTag, kind: ParamKind) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            trainable: true,
            group,
            kind,
        }
    }

    /// Whether the L2 penalty applies: trainable weight tensors only.
    pub fn penalized(&self) -> bool {
        self.trainable && self.kind == ParamKind::Weight
    }
}

/// One layer of a network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: Padding,
    },
    Batchnorm {
        channels: usize,
        epsilon: f64,
        momentum: f64,
    },
    Relu,
    Dropout {
        rate: f64,
    },
    GlobalAvgPool,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Sigmoid,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv2d {
                kernel,
                in_channels,
                out_channels,
                stride,
                padding,
            } => {
                if kernel == 0 || in_channels == 0 || out_channels == 0 || stride == 0 {
                    return Err(Error::Config("conv2d sizes must be positive".into()));
                }
                if padding == Padding::Same && kernel % 2 == 0 {
                    return Err(Error::Config("'same' padding needs an odd kernel".into()));
                }
            }
            LayerSpec::Batchnorm {
                channels,
                epsilon,
                momentum,
            } => {
                if channels == 0 || !(epsilon > 0.0) || !(0.0..1.0).contains(&momentum) {
                    return Err(Error::Config(format!(
                        "batchnorm needs channels > 0, epsilon > 0 and momentum in [0,1); got {channels}, {epsilon}, {momentum}"
                    )));
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
                }
            }
            LayerSpec::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return Err(Error::Config("dense sizes must be positive".into()));
                }
            }
            LayerSpec::Relu | LayerSpec::GlobalAvgPool | LayerSpec::Sigmoid => {}
        }
        Ok(())
    }

    /// Freshly initialized parameters, named `{prefix}.{role}`.
    ///
    /// Conv and dense weights are He-normal (fan-in), biases zero, batch-norm
    /// scale one and shift zero.
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(
        &self,
        prefix: &str,
        group: GroupTag,
        rng: &mut R,
    ) -> Result<Vec<Parameter<T>>> {
        self.validate()?;
        let he = |shape: &[usize], fan_in: usize, rng: &mut R| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(shape, |_| T::of(normal.sample(rng)))
        };
        Ok(match *self {
            LayerSpec::Conv2d {
                kernel,
                in_channels,
                out_channels,
                ..
            } => vec![
                Parameter::new(
                    format!("{prefix}.kernel"),
                    he(&[kernel, kernel, in_channels, out_channels], kernel * kernel * in_channels, rng),
                    group,
                    ParamKind::Weight,
                ),
                Parameter::new(
                    format!("{prefix}.bias"),
                    Tensor::zeros(&[out_channels]),
                    group,
                    ParamKind::Bias,
                ),
            ],
            LayerSpec::Batchnorm { channels, .. } => vec![
                Parameter::new(
                    format!("{prefix}.gamma"),
                    Tensor::full(&[channels], T::one()),
                    group,
                    ParamKind::BnGamma,
                ),
                Parameter::new(
                    format!("{prefix}.beta"),
                    Tensor::zeros(&[channels]),
                    group,
                    ParamKind::BnBeta,
                ),
            ],
            LayerSpec::Dense { inputs, outputs } => vec![
                Parameter::new(
                    format!("{prefix}.weight"),
                    he(&[inputs, outputs], inputs, rng),
                    group,
                    ParamKind::Weight,
                ),
                Parameter::new(
                    format!("{prefix}.bias"),
                    Tensor::zeros(&[outputs]),
                    group,
                    ParamKind::Bias,
                ),
            ],
            LayerSpec::Relu | LayerSpec::Dropout { .. } | LayerSpec::GlobalAvgPool | LayerSpec::Sigmoid => {
                Vec::new()
            }
        })
    }
}

/// Glorot-uniform weights for a `[inputs, outputs]` dense layer feeding a sigmoid or softmax.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / (inputs + outputs) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    Tensor::from_fn(&[inputs, outputs], |_| T::of(dist.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layer_spec_validation() {
        assert!(LayerSpec::Dropout { rate: 1.0 }.validate().is_err());
        assert!(LayerSpec::Dropout { rate: 0.0 }.validate().is_ok());
        assert!(LayerSpec::Batchnorm {
            channels: 4,
            epsilon: 0.0,
            momentum: 0.99
        }
        .validate()
        .is_err());
        assert!(LayerSpec::Conv2d {
            kernel: 2,
            in_channels: 1,
            out_channels: 1,
            stride: 1,
            padding: Padding::Same
        }
        .validate()
        .is_err());
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let spec = LayerSpec::Conv2d {
            kernel: 3,
            in_channels: 2,
            out_channels: 5,
            stride: 1,
            padding: Padding::Same,
        };
        let a: Vec<Parameter<f32>> = spec
            .init_params("c", GroupTag::Backbone(0), &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let b: Vec<Parameter<f32>> = spec
            .init_params("c", GroupTag::Backbone(0), &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        assert_eq!(a[0].value.shape(), &[3, 3, 2, 5]);
        assert_eq!(a[0].value, b[0].value);
        assert_eq!(a[1].kind, ParamKind::Bias);
        assert!(a[0].penalized() && !a[1].penalized());
    }
}
