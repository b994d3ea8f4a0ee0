use std::fmt;
use std::time::Instant;

use image::RgbImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{Model, ModelStage, Pass};
use crate::augment::{self, AugmentConfig};
use crate::data::{self, Manifest, Split, SOURCE_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{self, ClassWeights, MetricReport};
use crate::nn::{self, glorot_uniform, lr_at_step, Adam, AdamConfig, GroupTag, Mode, ParamKind, Parameter};
use crate::raster::Image;
use crate::seeding;
use crate::tensor::{Tape, Tensor};

/// One labeled image held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub label: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    /// Decodes (upright) every record of `split`.
    pub fn from_manifest(manifest: &Manifest, split: Split) -> Result<Self> {
        let samples = manifest
            .in_split(split)
            .map(|r| {
                Ok(Sample {
                    id: r.id.clone(),
                    image: data::load_upright(&manifest.resolve(r))?,
                    label: r.label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn images(&self) -> Vec<Image> {
        self.samples.iter().map(|s| Image::from_rgb8(&s.image)).collect()
    }
}

/// Optimizer schedule of one transfer-learning phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub lr0: f64,
    pub decay_steps: u64,
    pub decay_rate: f64,
    pub epochs: usize,
}

/// Backbone pretraining on the synthetic texture task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub per_class: usize,
    pub held_out_per_class: usize,
    pub lr: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            per_class: 120,
            held_out_per_class: 30,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Loss weights per class; computed from the training split when absent.
    pub class_weights: Option<ClassWeights>,
    pub l2: f64,
    pub dropout: f64,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    pub pretrain: PretrainConfig,
    pub head: PhaseConfig,
    pub finetune: PhaseConfig,
    /// Backbone blocks, counted from the output side, trained in the second phase.
    pub unlocked_blocks: usize,
    /// Unlocked blocks normalize with batch statistics during fine-tuning
    /// instead of the running statistics from pretraining.
    pub finetune_batch_stats: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            class_weights: None,
            l2: 0.01,
            dropout: 0.5,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            pretrain: PretrainConfig::default(),
            head: PhaseConfig {
                lr0: 1e-3,
                decay_steps: 1000,
                decay_rate: 0.96,
                epochs: 30,
            },
            finetune: PhaseConfig {
                lr0: 1e-6,
                decay_steps: 300,
                decay_rate: 0.96,
                epochs: 10,
            },
            unlocked_blocks: 3,
            finetune_batch_stats: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout rate {} outside [0,1)", self.dropout));
        }
        if !(self.l2 >= 0.0) {
            return bad(format!("L2 lambda {} is negative", self.l2));
        }
        for (name, p) in [("head", &self.head), ("finetune", &self.finetune)] {
            if !(p.lr0 > 0.0) || p.decay_steps == 0 || !(p.decay_rate > 0.0 && p.decay_rate <= 1.0) {
                return bad(format!("{name} phase schedule is invalid: {p:?}"));
            }
        }
        if self.finetune.lr0 >= self.head.lr0 {
            return bad(format!(
                "fine-tuning rate {} must be below the head rate {}",
                self.finetune.lr0, self.head.lr0
            ));
        }
        if self.pretrain.epochs > 0 && (self.pretrain.per_class == 0 || !(self.pretrain.lr > 0.0)) {
            return bad(format!("pretraining settings are invalid: {:?}", self.pretrain));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Head,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Head => "head",
            Phase::Finetune => "finetune",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Metrics of one epoch, one report per evaluated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub phase: Phase,
    pub splits: Vec<(Split, MetricReport)>,
}

impl EpochReport {
    pub fn get(&self, split: Split) -> Option<&MetricReport> {
        self.splits.iter().find(|(s, _)| *s == split).map(|(_, r)| r)
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.splits
            .iter()
            .map(|(s, r)| metrics::csv_row(self.epoch, self.phase.as_str(), s.as_str(), r))
            .collect()
    }
}

/// Progress on the pretraining task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceReport {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub held_out_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub source: Vec<SourceReport>,
    pub epochs: Vec<EpochReport>,
}

impl TrainingLog {
    pub fn csv(&self) -> String {
        let mut out = String::from(metrics::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            for row in e.csv_rows() {
                out.push_str(&row);
                out.push('\n');
            }
        }
        out
    }

    /// Pretraining log: `epoch,loss,train_accuracy,held_out_accuracy`.
    pub fn source_csv(&self) -> String {
        let mut out = String::from("epoch,loss,train_accuracy,held_out_accuracy\n");
        for s in &self.source {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                s.epoch, s.loss, s.train_accuracy, s.held_out_accuracy
            ));
        }
        out
    }
}

/// Result of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    /// Weighted mean loss plus the L2 term.
    pub loss: f64,
    pub probs: Vec<f64>,
}

/// Settings of a single supervised step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSettings {
    pub weights: ClassWeights,
    pub lr: f64,
    pub l2: f64,
    pub dropout: f64,
}

/// Forward, weighted binary cross-entropy plus L2, backward and one Adam update.
///
/// A non-finite loss leaves the model untouched and is reported as
/// [`Error::NonFiniteLoss`] with `epoch` and `step`.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    images: &[Image],
    labels: &[u8],
    settings: StepSettings,
    rng: &mut rand_chacha::ChaCha8Rng,
    (epoch, step): (usize, usize),
) -> Result<StepOutcome> {
    if images.len() != labels.len() {
        return Err(Error::Shape(format!("{} images but {} labels", images.len(), labels.len())));
    }
    let x = model.preprocess(images)?;
    let mut tape = Tape::new();
    let bn_before = model.bn.clone();
    let forward = |model: &mut Model, tape: &mut Tape<f32>| -> Result<_> {
        let out = model.forward(
            tape,
            x,
            Pass::Train {
                dropout: settings.dropout,
                rng,
            },
        )?;
        let targets: Vec<f32> = labels.iter().map(|&l| l as f32).collect();
        let w = settings.weights;
        let per_example = tape.bce(out.prob, &targets, w.w0 as f32, w.w1 as f32)?;
        let data_loss = tape.mean_all(per_example)?;
        let penalty = model.l2_penalty(tape, &out.vars, settings.l2)?;
        let loss = tape.add(data_loss, penalty)?;
        Ok((out, loss))
    };
    // Forward ops refuse to produce NaN or infinity, so a diverged model
    // surfaces here as a domain error rather than as a non-finite loss value.
    let (out, loss) = match forward(model, &mut tape) {
        Ok(v) if tape.value(v.1).all_finite() => v,
        Ok(_) | Err(Error::Domain(_)) => {
            model.bn = bn_before;
            return Err(Error::NonFiniteLoss { epoch, step });
        }
        Err(e) => return Err(e),
    };
    let loss_value = tape.value(loss).item()? as f64;
    let probs = tape.value(out.prob).data().iter().map(|&p| p as f64).collect();
    let mut grads = tape.backward(loss)?;
    for (p, &v) in model.params.iter_mut().zip(&out.vars) {
        p.grad = if p.trainable { grads.take(v) } else { None };
    }
    adam.step(&mut model.params, settings.lr)?;
    for p in &mut model.params {
        p.grad = None;
    }
    Ok(StepOutcome {
        loss: loss_value,
        probs,
    })
}

/// Eval-mode scores and unweighted mean cross-entropy at threshold 0.5.
pub fn evaluate(model: &mut Model, data: &Dataset, batch: usize) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty split".into()));
    }
    let labels = data.labels();
    let mut scores = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(batch.max(1)) {
        let images: Vec<Image> = chunk.iter().map(|s| Image::from_rgb8(&s.image)).collect();
        scores.extend(model.predict(&images, batch)?);
    }
    let loss = metrics::mean_bce(&labels, &scores)?;
    MetricReport::from_scores(loss, &scores, &labels)
}

/// Class weights from the configuration, or from the training labels.
pub fn resolve_class_weights(cfg: &TrainConfig, train: &Dataset) -> Result<ClassWeights> {
    match cfg.class_weights {
        Some(w) => Ok(w),
        None => metrics::class_weights_from_labels(&train.labels()),
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeding::stream("epoch-order", seed, &[&epoch]));
    order
}

/// Runs `phase.epochs` epochs with a fresh optimizer; epochs are numbered from `first_epoch`.
fn run_phase(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    phase: Phase,
    schedule: &PhaseConfig,
    first_epoch: usize,
) -> Result<Vec<EpochReport>> {
    if train.is_empty() {
        return Err(Error::Domain("the training split is empty".into()));
    }
    let weights = resolve_class_weights(cfg, train)?;
    let labels = train.labels();
    let mut adam = Adam::new(cfg.adam);
    let mut reports = Vec::with_capacity(schedule.epochs);
    for epoch in first_epoch..first_epoch + schedule.epochs {
        let started = Instant::now();
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let mut scores = vec![0.0; train.len()];
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images = chunk
                .iter()
                .map(|&i| {
                    let s = &train.samples[i];
                    augment::augment(&Image::from_rgb8(&s.image), &cfg.augment, cfg.seed, &s.id, epoch as u64)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch_labels: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let settings = StepSettings {
                weights,
                lr: lr_at_step(schedule.lr0, schedule.decay_rate, schedule.decay_steps, adam.steps()),
                l2: cfg.l2,
                dropout: cfg.dropout,
            };
            let mut rng = Model::dropout_rng(cfg.seed, epoch, adam.steps());
            let out = train_step(model, &mut adam, &images, &batch_labels, settings, &mut rng, (epoch, step))?;
            loss_sum += out.loss * chunk.len() as f64;
            for (&i, p) in chunk.iter().zip(out.probs) {
                scores[i] = p;
            }
        }
        let train_report = MetricReport::from_scores(loss_sum / train.len() as f64, &scores, &labels)?;
        let val_report = evaluate(model, val, cfg.batch_size)?;
        log::info!(
            "epoch {epoch} ({phase}): train loss {:.4} f {:.3} | val loss {:.4} f {:.3} auc {} | {:.1}s",
            train_report.loss,
            train_report.f_score,
            val_report.loss,
            val_report.f_score,
            val_report.auc.map_or("-".into(), |a| format!("{a:.3}")),
            started.elapsed().as_secs_f64()
        );
        reports.push(EpochReport {
            epoch,
            phase,
            splits: vec![(Split::Train, train_report), (Split::Val, val_report)],
        });
    }
    Ok(reports)
}

/// First transfer-learning phase: backbone frozen, head trained.
pub fn train_head(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    first_epoch: usize,
) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    model.freeze_backbone();
    let reports = run_phase(model, train, val, cfg, Phase::Head, &cfg.head, first_epoch)?;
    model.stage = ModelStage::Head;
    Ok(reports)
}

/// Second phase: the last `cfg.unlocked_blocks` backbone blocks join the head.
pub fn finetune(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    first_epoch: usize,
) -> Result<Vec<EpochReport>> {
    cfg.validate()?;
    model.unfreeze_last(cfg.unlocked_blocks)?;
    let batch_stats = model.bn_batch_stats;
    model.bn_batch_stats = cfg.finetune_batch_stats;
    let reports = run_phase(model, train, val, cfg, Phase::Finetune, &cfg.finetune, first_epoch);
    model.bn_batch_stats = batch_stats;
    let reports = reports?;
    model.freeze_backbone();
    model.stage = ModelStage::Finetuned;
    Ok(reports)
}

/// Images and class indices of the pretraining task, balanced over [`SOURCE_CLASSES`].
pub fn source_corpus(per_class: usize, seed: u64, first_index: usize, size: usize) -> (Vec<Image>, Vec<usize>) {
    let mut images = Vec::with_capacity(per_class * SOURCE_CLASSES.len());
    let mut labels = Vec::with_capacity(images.capacity());
    for j in 0..per_class {
        for (k, &class) in SOURCE_CLASSES.iter().enumerate() {
            let index = first_index + j * SOURCE_CLASSES.len() + k;
            images.push(data::source_sample(class, seed, index, size));
            labels.push(k);
        }
    }
    (images, labels)
}

/// Trains the whole backbone on the synthetic texture task through a
/// temporary softmax layer that is dropped afterwards.
///
/// The held-out images use indices past the training ones, so the two sets
/// never share an image.
pub fn pretrain_backbone(model: &mut Model, cfg: &TrainConfig) -> Result<Vec<SourceReport>> {
    cfg.validate()?;
    let pc = &cfg.pretrain;
    let size = model.arch.input_size;
    let classes = SOURCE_CLASSES.len();
    let (train_x, train_y) = source_corpus(pc.per_class, cfg.seed, 0, size);
    let (held_x, held_y) = source_corpus(pc.held_out_per_class, cfg.seed, pc.per_class * classes, size);
    let train_x: Vec<RgbImage> = train_x.iter().map(Image::to_rgb8).collect();

    let mut rng = seeding::stream("source-head", cfg.seed, &[]);
    let c = model.arch.feature_channels();
    let mut source_head = vec![
        Parameter::new("source.weight", glorot_uniform::<f32, _>(c, classes, &mut rng), GroupTag::Head, ParamKind::Weight),
        Parameter::new("source.bias", Tensor::zeros(&[classes]), GroupTag::Head, ParamKind::Bias),
    ];
    let head_trainable: Vec<bool> = model.params.iter().map(|p| p.trainable).collect();
    for p in &mut model.params {
        p.trainable = matches!(p.group, GroupTag::Backbone(_));
    }
    let mut adam = Adam::new(cfg.adam);
    let mut adam_head = Adam::new(cfg.adam);
    let mut reports = Vec::new();
    for e in 0..pc.epochs {
        let started = Instant::now();
        let order = epoch_order(train_x.len(), cfg.seed ^ 0x5eed, e);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<Image> = chunk.iter().map(|&i| Image::from_rgb8(&train_x[i])).collect();
            let x = model.preprocess(&images)?;
            let y: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let hv: Vec<_> = source_head.iter().map(|p| tape.leaf(p.value.clone(), true)).collect();
            let xv = tape.constant(x);
            let feat = model.backbone(&mut tape, xv, &vars, Mode::Train)?;
            let pooled = nn::global_avg_pool(&mut tape, feat)?;
            let logits = nn::dense(&mut tape, pooled, hv[0], hv[1])?;
            let loss = tape.softmax_cross_entropy(logits, &y)?;
            let loss_value = tape.value(loss).item()? as f64;
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: e, step });
            }
            correct += argmax_rows(tape.value(logits)).iter().zip(&y).filter(|(a, b)| a == b).count();
            loss_sum += loss_value * chunk.len() as f64;
            let mut grads = tape.backward(loss)?;
            for (p, &v) in model.params.iter_mut().zip(&vars) {
                p.grad = if p.trainable { grads.take(v) } else { None };
            }
            for (p, &v) in source_head.iter_mut().zip(&hv) {
                p.grad = grads.take(v);
            }
            adam.step(&mut model.params, pc.lr)?;
            adam_head.step(&mut source_head, pc.lr)?;
        }
        let held_out_accuracy = source_accuracy(model, &source_head, &held_x, &held_y, cfg.batch_size)?;
        let report = SourceReport {
            epoch: e + 1,
            loss: loss_sum / train_x.len() as f64,
            train_accuracy: correct as f64 / train_x.len() as f64,
            held_out_accuracy,
        };
        log::info!(
            "pretrain epoch {}: loss {:.4} acc {:.3} held-out acc {:.3} | {:.1}s",
            report.epoch,
            report.loss,
            report.train_accuracy,
            report.held_out_accuracy,
            started.elapsed().as_secs_f64()
        );
        reports.push(report);
    }
    for (p, t) in model.params.iter_mut().zip(head_trainable) {
        p.trainable = t;
        p.grad = None;
    }
    model.stage = ModelStage::Pretrained;
    Ok(reports)
}

fn argmax_rows(t: &Tensor<f32>) -> Vec<usize> {
    let k = t.shape()[1];
    t.data()
        .chunks_exact(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

fn source_accuracy(
    model: &mut Model,
    source_head: &[Parameter<f32>],
    images: &[Image],
    labels: &[usize],
    batch: usize,
) -> Result<f64> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (imgs, ys) in images.chunks(batch).zip(labels.chunks(batch)) {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, false);
        let w = tape.constant(source_head[0].value.clone());
        let b = tape.constant(source_head[1].value.clone());
        let x = tape.constant(model.preprocess(imgs)?);
        let feat = model.backbone(&mut tape, x, &vars, Mode::Eval)?;
        let pooled = nn::global_avg_pool(&mut tape, feat)?;
        let logits = nn::dense(&mut tape, pooled, w, b)?;
        correct += argmax_rows(tape.value(logits)).iter().zip(ys).filter(|(a, b)| a == b).count();
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Pretraining (when configured), head training and fine-tuning in sequence.
/// Head and fine-tuning epochs are numbered consecutively from 1.
pub fn fit(model: &mut Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<TrainingLog> {
    cfg.validate()?;
    if cfg.unlocked_blocks > model.num_blocks() {
        return Err(Error::Config(format!(
            "cannot unlock {} of {} backbone blocks",
            cfg.unlocked_blocks,
            model.num_blocks()
        )));
    }
    let mut log = TrainingLog::default();
    if cfg.pretrain.epochs > 0 {
        log.source = pretrain_backbone(model, cfg)?;
    }
    log.epochs = train_head(model, train, val, cfg, 1)?;
    let next = cfg.head.epochs + 1;
    log.epochs.extend(finetune(model, train, val, cfg, next)?);
    Ok(log)
}
