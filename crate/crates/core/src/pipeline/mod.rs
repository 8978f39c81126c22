//! Configuration-driven experiments: teacher training, feature
//! pre-training, fine-tuning and evaluation, with content-hash caching of
//! every checkpoint.

mod config;
mod report;
mod run;
mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{
    CorruptionSel, DataConfig, ExperimentConfig, Gate, PretrainConfig, RunSpec, Stage,
    StudentConfig, TableConfig, TableRow, TestSpec, BUNDLED,
};
pub use report::{render_text, write_all as write_reports, GateResult, Summary};
pub use run::{
    evaluate_gates, export_data, export_prompts, run_experiment, text_tower_hash, FinetuneSummary,
    PretrainSummary, RunLog, RunOptions, TeacherSummary,
};

pub use train::{
    class_text, finetune_student, parse_loss, pretrain_student, train_teacher, FinetuneConfig, Log,
    PretrainStats, StageOpt, StageStats, Student, Teacher, TeacherConfig,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage `{stage}` diverged at step {step}: non-finite loss")]
    Diverged { stage: String, step: usize },
    #[error("stage `{0}` has no training data")]
    EmptyData(&'static str),
    #[error("unknown loss spec `{0}`")]
    UnknownLoss(String),
    #[error("{origin}: {message}")]
    Config { origin: String, message: String },
    #[error("invalid configuration at `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("unknown stage `{0}` (expected teacher, pretrain, finetune or eval)")]
    UnknownStage(String),
    #[error("stage `{needed_by}` needs the `{stage}` checkpoint {path}; run that stage first")]
    MissingDependency {
        stage: String,
        needed_by: String,
        path: PathBuf,
    },
    #[error("stage `{stage}` failed its gate: {message}")]
    Gate { stage: String, message: String },
    #[error("text tower changed after {after}")]
    TextTowerChanged { after: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Loss(#[from] crate::losses::LossError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Prompt(#[from] crate::prompts::PromptError),
    #[error(transparent)]
    Shapes(#[from] crate::shapes::ShapesError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;
