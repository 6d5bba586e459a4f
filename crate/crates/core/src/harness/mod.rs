//! Synthetic corpora, configuration, checkpoints and the training loops.
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod synth;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use synth::{gen_document, gen_synthetic_corpus, Family, SyntheticSpec};
pub use train::{
    eval_run, finetune_run, inspect_attention, load_pretrained, load_task_model, predict, pretrain_run, rop_accuracy,
    EvalMetrics, FinetuneOutcome, Prediction, PretrainOutcome, TaskModel,
};
