use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, glorot_uniform, BatchNormState, GroupTag, LayerSpec, Mode, ParamKind, Parameter, DEFAULT_BN_EPSILON,
};

/// Running-average momentum of batch norm. Desk-scale pretraining runs only a
/// few dozen steps, so the averages must settle faster than at 0.99.
pub const ARCH_BN_MOMENTUM: f64 = 0.9;
use crate::raster::Image;
use crate::seeding;
use crate::tensor::{Padding, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub out_channels: usize,
    pub stride: usize,
    pub kernel: usize,
}

/// Network shape. Backbone blocks are conv, optional batch norm, ReLU; a
/// stride-1 block whose channel count is unchanged adds a skip connection
/// when `residual` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Side length images are resized to inside the model.
    pub input_size: usize,
    pub blocks: Vec<BlockConfig>,
    pub batchnorm: bool,
    pub residual: bool,
    pub fc_width: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let shape = [(16, 2), (24, 2), (32, 2), (32, 1), (64, 2), (64, 1), (64, 2), (96, 1)];
        Self {
            input_size: 224,
            blocks: shape
                .iter()
                .map(|&(out_channels, stride)| BlockConfig {
                    out_channels,
                    stride,
                    kernel: 3,
                })
                .collect(),
            batchnorm: true,
            residual: true,
            fc_width: 256,
            bn_momentum: ARCH_BN_MOMENTUM,
            bn_epsilon: DEFAULT_BN_EPSILON,
        }
    }
}

impl ArchConfig {
    /// A small network for quick experiments and tests.
    pub fn tiny(input_size: usize) -> Self {
        Self {
            input_size,
            blocks: [(8, 2), (8, 1), (16, 2), (16, 2)]
                .iter()
                .map(|&(out_channels, stride)| BlockConfig {
                    out_channels,
                    stride,
                    kernel: 3,
                })
                .collect(),
            fc_width: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 8 {
            return Err(Error::Config(format!("input size {} is too small", self.input_size)));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("the backbone needs at least one block".into()));
        }
        if self.fc_width == 0 {
            return Err(Error::Config("fc width must be positive".into()));
        }
        for spec in self.layer_specs() {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels)
    }

    fn block_in_channels(&self, i: usize) -> usize {
        if i == 0 {
            3
        } else {
            self.blocks[i - 1].out_channels
        }
    }

    fn conv_spec(&self, i: usize) -> LayerSpec {
        let b = self.blocks[i];
        LayerSpec::Conv2d {
            kernel: b.kernel,
            in_channels: self.block_in_channels(i),
            out_channels: b.out_channels,
            stride: b.stride,
            padding: Padding::Same,
        }
    }

    fn bn_spec(&self, i: usize) -> LayerSpec {
        LayerSpec::Batchnorm {
            channels: self.blocks[i].out_channels,
            epsilon: self.bn_epsilon,
            momentum: self.bn_momentum,
        }
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for i in 0..self.blocks.len() {
            specs.push(self.conv_spec(i));
            if self.batchnorm {
                specs.push(self.bn_spec(i));
            }
        }
        specs.push(LayerSpec::Dense {
            inputs: self.feature_channels(),
            outputs: self.fc_width,
        });
        specs
    }

    fn is_residual(&self, i: usize) -> bool {
        self.residual && self.blocks[i].stride == 1 && self.block_in_channels(i) == self.blocks[i].out_channels
    }
}

/// Training progress recorded in the model file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelStage {
    Initialized,
    Pretrained,
    Head,
    Finetuned,
}

impl ModelStage {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        [Self::Initialized, Self::Pretrained, Self::Head, Self::Finetuned]
            .get(code as usize)
            .copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BlockLayout {
    pub kernel: usize,
    pub bias: Option<usize>,
    pub gamma: Option<usize>,
    pub beta: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HeadLayout {
    pub fc_w: usize,
    pub fc_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

/// How a forward pass treats dropout and batch normalization.
pub enum Pass<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut ChaCha8Rng },
}

impl Pass<'_> {
    pub fn mode(&self) -> Mode {
        match self {
            Pass::Eval => Mode::Eval,
            Pass::Train { .. } => Mode::Train,
        }
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct Outputs {
    /// One handle per entry of [`Model::params`].
    pub vars: Vec<Var>,
    /// Output of the last backbone block, `[N, h, w, C]`.
    pub features: Var,
    /// Pre-sigmoid score, `[N, 1]`.
    pub logit: Var,
    /// Probability of the positive class, `[N, 1]`.
    pub prob: Var,
}

/// Classifier: embedded resize and `[-1, 1]` scaling, convolutional backbone,
/// global average pooling, one hidden dense layer with ReLU and dropout, and a
/// sigmoid output unit.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: ArchConfig,
    pub params: Vec<Parameter<f32>>,
    /// Running statistics, one entry per block when batch norm is enabled.
    pub bn: Vec<BatchNormState<f32>>,
    pub stage: ModelStage,
    /// Whether trainable blocks normalize with batch statistics in train mode.
    /// When unset, every block uses its running statistics.
    pub bn_batch_stats: bool,
    pub(crate) blocks: Vec<BlockLayout>,
    pub(crate) head: HeadLayout,
}

impl Model {
    /// Initializes every parameter from a stream keyed by `seed`.
    pub fn build(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seeding::stream("init", seed, &[]);
        let mut params: Vec<Parameter<f32>> = Vec::new();
        let mut blocks = Vec::new();
        let mut bn = Vec::new();
        for i in 0..arch.blocks.len() {
            let group = GroupTag::Backbone(i);
            let conv = arch.conv_spec(i).init_params::<f32, _>(&format!("backbone.{i}.conv"), group, &mut rng)?;
            let [kernel, bias]: [Parameter<f32>; 2] = conv.try_into().expect("conv has kernel and bias");
            let mut layout = BlockLayout {
                kernel: params.len(),
                bias: None,
                gamma: None,
                beta: None,
            };
            params.push(kernel);
            if arch.batchnorm {
                // Batch norm removes any per-channel offset, so the conv carries no bias.
                let norm = arch.bn_spec(i).init_params::<f32, _>(&format!("backbone.{i}.bn"), group, &mut rng)?;
                layout.gamma = Some(params.len());
                layout.beta = Some(params.len() + 1);
                params.extend(norm);
                bn.push(BatchNormState::new(arch.blocks[i].out_channels, arch.bn_momentum, arch.bn_epsilon));
            } else {
                layout.bias = Some(params.len());
                params.push(bias);
            }
            blocks.push(layout);
        }
        let c = arch.feature_channels();
        let dense = |name: &str, inputs: usize, outputs: usize, rng: &mut ChaCha8Rng| {
            [
                Parameter::new(format!("head.{name}.weight"), glorot_uniform(inputs, outputs, rng), GroupTag::Head, ParamKind::Weight),
                Parameter::new(format!("head.{name}.bias"), Tensor::zeros(&[outputs]), GroupTag::Head, ParamKind::Bias),
            ]
        };
        let head = HeadLayout {
            fc_w: params.len(),
            fc_b: params.len() + 1,
            out_w: params.len() + 2,
            out_b: params.len() + 3,
        };
        params.extend(dense("fc", c, arch.fc_width, &mut rng));
        params.extend(dense("out", arch.fc_width, 1, &mut rng));
        Ok(Self {
            arch,
            params,
            bn,
            stage: ModelStage::Initialized,
            bn_batch_stats: true,
            blocks,
            head,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn block_trainable(&self, i: usize) -> bool {
        self.params
            .iter()
            .any(|p| p.group == GroupTag::Backbone(i) && p.trainable)
    }

    /// Freezes every backbone block; the head stays trainable.
    pub fn freeze_backbone(&mut self) {
        self.unfreeze_last(0).expect("zero blocks is always valid");
    }

    /// Makes exactly the last `count` backbone blocks (and the head) trainable.
    pub fn unfreeze_last(&mut self, count: usize) -> Result<()> {
        let n = self.num_blocks();
        if count > n {
            return Err(Error::Config(format!("cannot unlock {count} of {n} backbone blocks")));
        }
        for p in &mut self.params {
            p.trainable = match p.group {
                GroupTag::Backbone(i) => i >= n - count,
                GroupTag::Head => true,
            };
        }
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = true;
        }
    }

    /// Resizes each image to the input size and maps `[0, 1]` to `[-1, 1]`.
    pub fn preprocess(&self, images: &[Image]) -> Result<Tensor<f32>> {
        preprocess(images, self.arch.input_size)
    }

    /// Registers every parameter on `tape`; gradients are tracked for trainable
    /// parameters when `grads` is set.
    pub fn bind(&self, tape: &mut Tape<f32>, grads: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), grads && p.trainable))
            .collect()
    }

    /// Runs the backbone on a preprocessed `[N, S, S, 3]` batch.
    ///
    /// Batch norm uses batch statistics only for trainable blocks in train mode,
    /// and only while [`Model::bn_batch_stats`] is set.
    pub fn backbone(&mut self, tape: &mut Tape<f32>, x: Var, vars: &[Var], mode: Mode) -> Result<Var> {
        self.run_blocks(tape, x, vars, 0..self.blocks.len(), mode)
    }

    /// Runs the backbone blocks in `range` only; `x` is the input of the first one.
    pub fn run_blocks(&mut self, tape: &mut Tape<f32>, x: Var, vars: &[Var], range: Range<usize>, mode: Mode) -> Result<Var> {
        if range.end > self.blocks.len() {
            return Err(Error::Config(format!(
                "block range {range:?} exceeds the {} backbone blocks",
                self.blocks.len()
            )));
        }
        let mut h = x;
        for i in range {
            h = self.block(tape, h, vars, i, mode)?;
        }
        Ok(h)
    }

    fn block(&mut self, tape: &mut Tape<f32>, x: Var, vars: &[Var], i: usize, mode: Mode) -> Result<Var> {
        let layout = self.blocks[i].clone();
        let b = self.arch.blocks[i];
        let mut h = tape.conv2d(x, vars[layout.kernel], layout.bias.map(|j| vars[j]), b.stride, Padding::Same)?;
        if let (Some(g), Some(be)) = (layout.gamma, layout.beta) {
            let bn_mode = if mode == Mode::Train && self.bn_batch_stats && self.block_trainable(i) {
                Mode::Train
            } else {
                Mode::Eval
            };
            h = nn::batchnorm(tape, h, vars[g], vars[be], &mut self.bn[i], bn_mode)?;
        }
        if self.arch.is_residual(i) {
            h = tape.add(h, x)?;
        }
        nn::relu(tape, h)
    }

    /// Pooling, hidden layer, dropout and output unit; returns `(logit, prob)`.
    pub fn head(&self, tape: &mut Tape<f32>, features: Var, vars: &[Var], pass: &mut Pass<'_>) -> Result<(Var, Var)> {
        let hl = &self.head;
        let pooled = nn::global_avg_pool(tape, features)?;
        let fc = nn::dense(tape, pooled, vars[hl.fc_w], vars[hl.fc_b])?;
        let mut h = nn::relu(tape, fc)?;
        if let Pass::Train { dropout, rng } = pass {
            h = nn::dropout(tape, h, *dropout, Mode::Train, &mut **rng)?;
        }
        let logit = nn::dense(tape, h, vars[hl.out_w], vars[hl.out_b])?;
        let prob = nn::sigmoid(tape, logit)?;
        Ok((logit, prob))
    }

    /// L2 term over the weights of the added dense layers; the backbone is not penalized.
    pub fn l2_penalty(&self, tape: &mut Tape<f32>, vars: &[Var], lambda: f64) -> Result<Var> {
        let hl = &self.head;
        let idx = [hl.fc_w, hl.fc_b, hl.out_w, hl.out_b];
        let params: Vec<Parameter<f32>> = idx.iter().map(|&i| self.params[i].clone()).collect();
        let head_vars: Vec<Var> = idx.iter().map(|&i| vars[i]).collect();
        nn::l2_penalty(tape, &params, &head_vars, lambda)
    }

    /// Full forward pass on a preprocessed batch.
    pub fn forward(&mut self, tape: &mut Tape<f32>, x: Tensor<f32>, mut pass: Pass<'_>) -> Result<Outputs> {
        let grads = pass.mode() == Mode::Train;
        let vars = self.bind(tape, grads);
        let x = tape.constant(x);
        let features = self.backbone(tape, x, &vars, pass.mode())?;
        let (logit, prob) = self.head(tape, features, &vars, &mut pass)?;
        Ok(Outputs {
            vars,
            features,
            logit,
            prob,
        })
    }

    /// Positive-class probabilities in eval mode, processed in chunks of `batch`.
    pub fn predict(&mut self, images: &[Image], batch: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch.max(1)) {
            let x = self.preprocess(chunk)?;
            let mut tape = Tape::new();
            let o = self.forward(&mut tape, x, Pass::Eval)?;
            out.extend(tape.value(o.prob).data().iter().map(|&p| p as f64));
        }
        Ok(out)
    }

    /// Deterministic source of dropout masks for one optimizer step.
    pub fn dropout_rng(seed: u64, epoch: usize, step: u64) -> ChaCha8Rng {
        seeding::stream("dropout", seed, &[&epoch, &step])
    }
}

/// Resizes each image to `size x size` and maps `[0, 1]` to `[-1, 1]`: `[N, size, size, 3]`.
pub fn preprocess(images: &[Image], size: usize) -> Result<Tensor<f32>> {
    if images.is_empty() {
        return Err(Error::Shape("cannot preprocess an empty batch".into()));
    }
    let mut data = Vec::with_capacity(images.len() * size * size * 3);
    for img in images {
        let t = crate::data::resize_normalize_to(img, size);
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![images.len(), size, size, 3], data)
}
