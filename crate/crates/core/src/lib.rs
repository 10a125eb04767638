//! Emotional vision-language model: a small cross-attending decoder that
//! classifies the emotion an image evokes and explains it, with VAD-lexicon
//! emotion modeling and a ternary image/emotion/explanation contrastive head.
//!
//! Everything runs on a minimal reverse-mode autodiff [`Tape`] generic over
//! `f32` and `f64`.

pub mod checkpoint;
pub mod classes;
pub mod data;
pub mod decoder;
pub mod diagnostics;
pub mod emotion;
pub mod error;
pub mod experiment;
pub mod generation;
pub mod heads;
pub mod lexicon;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod text;
pub mod training;
pub mod vision;

pub use checkpoint::Checkpoint;
pub use classes::EmotionClass;
pub use error::{Error, Result};
pub use lexicon::{VadLexicon, VadVector};
pub use model::{Components, ModelConfig, Sevlm};
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};
pub use text::Vocab;
pub use training::{TrainConfig, Trainer};
