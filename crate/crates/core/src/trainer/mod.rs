//! Model assembly, transfer-learning phases, evaluation and model files.

mod fit;
mod io;
mod model;

pub use fit::{
    evaluate, finetune, fit, pretrain_backbone, resolve_class_weights, source_corpus, train_head, train_step, Dataset,
    EpochReport, Phase, PhaseConfig, PretrainConfig, Sample, SourceReport, StepOutcome, StepSettings, TrainConfig,
    TrainingLog,
};
pub use io::{decode_model, encode_model, load_model, save_model, END_MARKER, FORMAT_VERSION, MAGIC};
pub use model::{preprocess, ArchConfig, BlockConfig, Model, ModelStage, Outputs, Pass};
