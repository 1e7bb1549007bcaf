//! Desk-scale speech enhancement trained against a frozen multi-layer
//! encoder.
//!
//! The crate provides the whole experimental loop: synthetic corpus
//! simulation, a trainable time-domain masking enhancer, a frozen
//! convolutional feature encoder, the waveform- and feature-domain losses
//! (including their exact gradients via a small reverse-mode tape), the
//! two-stage training recipe with a plateau learning-rate rule, and a
//! frame-classification probe used to measure downstream benefit.

pub mod autodiff;
pub mod error;
pub mod kernels;
pub mod seeding;
pub mod signal;
pub mod tensor;
pub mod util;

pub mod datasim;
pub mod downstream;
pub mod losses;
pub mod semodel;
pub mod sslenc;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;

pub use datasim::{Corpus, CorpusConfig, CorpusItem, Split, TokenSource};
pub use downstream::{ProbeParams, TaskWeights};
pub use losses::{LayerScheme, LayerWeights, LossBreakdown, LossConfig};
pub use semodel::{SEConfig, SEParams};
pub use signal::{MixtureSpec, Waveform};
pub use sslenc::{EncoderConfig, EncoderParams, FeatureStack};
pub use training::checkpoint::Checkpoint;
pub use training::TrainConfig;
