//! Learnable shift-aware activations and an online test-time adaptation
//! engine built around them.
//!
//! The crate is self-contained: a small reverse-mode autodiff tape
//! ([`tensor`]), the activation family ([`activation`]), feed-forward models
//! ([`network`]), synthetic shifted data ([`shiftgen`]) and the adaptation
//! loop with its metrics ([`adapt`]).

pub mod activation;
pub mod adapt;
pub mod loss;
pub mod network;
pub mod optim;
pub mod pretrain;
pub mod shiftgen;
pub mod tensor;

pub use activation::{ActParams, ActShape, BaseActivation, Granularity};
pub use network::{MlpArch, Model, NormMode, ParamGroup, ParamGroupSelection};
pub use shiftgen::{CorruptionKind, CorruptionSpec, DatasetSpec, LabeledBatch};
pub use tensor::{Tape, Tensor};
