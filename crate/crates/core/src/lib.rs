//! Enriched medical concept extraction from radiology reports and
//! image-conditioned MeSH sequence generation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autograd`], [`params`], [`optim`], [`gradcheck`]: dense
//!   tensors, reverse-mode differentiation, Adam and finite-difference checks.
//! * [`preprocess`]: report normalisation, negation removal, vocabularies,
//!   MeSH caption parsing.
//! * [`textcnn`]: multi-width convolutional multi-label classifier.
//! * [`seqgen`]: LSTM MeSH sequence generators conditioned on image embeddings.
//! * [`metrics`]: accuracy / precision / recall and BLEU.
//! * [`data`]: corpus and embedding files, checkpoints, splits, balanced batches.

pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod preprocess;
pub mod seqgen;
pub mod synthetic;
pub mod tensor;
pub mod textcnn;
pub mod training;

pub use autograd::{Graph, OpKind, Var};
pub use error::{Error, Result};
pub use params::{Bound, ParamId, Params};
pub use tensor::Tensor;
