//! FreqRec: a sequential recommender that pairs causal self-attention with
//! learnable spectral filters over the batch and time axes, trained with
//! cross-entropy plus a frequency-domain consistency loss.
//!
//! Everything runs on a small f64 tensor type with tape-based reverse-mode
//! differentiation.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod freqnet;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use config::{AblationSpec, Activation, DistanceKind, FusionMode, ModelConfig};
pub use data::{Batch, InteractionDataset, SplitKind};
pub use error::{Error, Result};
pub use evaluation::MetricsReport;
pub use model::FreqRec;
pub use spectral::{irdft, rdft, ComplexSpectrum};
pub use tensor::{IdTensor, Tensor};
pub use train::{train, TrainLog};
