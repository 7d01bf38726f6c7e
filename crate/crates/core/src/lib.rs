//! Desk-scale facial age regression: a small reverse-mode tensor engine and
//! the ConvNeXt, ViT and hybrid ConvNeXt-Transformer regressors built on it,
//! together with the losses, metrics, optimizer, schedules and data pipeline
//! needed to train and evaluate them.

pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{grad_check, GradCheckOptions, GradCheckReport, Gradients, Graph, Scalar, Tensor, Var};
