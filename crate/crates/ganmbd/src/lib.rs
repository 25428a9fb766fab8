//! Conditional image-to-image translation with a multi-branch discriminator.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`tape`]), the networks built on it ([`networks`]), the GAN losses and
//! training loop ([`loss`], [`train`]), synthetic data generation and
//! loading ([`synth`], [`data`]), and evaluation and parameter-audit tools
//! ([`eval`]).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod loss;
pub mod networks;
pub mod optim;
pub mod synth;
pub mod train;
pub mod nn;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use config::{ModelKind, RunConfig};
pub use data::{load_dataset, Dataset, DatasetSpec};
pub use error::{Error, Result};
pub use eval::{inception_score, train_eval_classifier, EvalClassifier, ISReport, ParamAudit};
pub use loss::{adv_loss, cls_loss, cycle_loss, GenAdvVariant, LossReport, LAMBDA_CLS, LAMBDA_CYC};
pub use networks::{
    AggregateOutput, BranchOutput, Classifier, Discriminator, Generator, GeneratorSpec,
    MultiBranchDiscriminatorSpec, Refiner,
};
pub use nn::{one_hot, ParamId, ParamStore};
pub use optim::Adam;
pub use train::{
    recycling_gate, GanModel, RefinerModel, RefinerTrainConfig, RefinerTrainer, TrainConfig,
    TrainState, Trainer,
};
pub use tape::{grad_check, GradMap, Tape, Var, LOG_EPS};
pub use tensor::{rel_err, Scalar, Tensor};
