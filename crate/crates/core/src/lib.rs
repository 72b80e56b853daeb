//! Distillation of autoregressive sequence models by imitation: tape autodiff, recurrent and
//! transformer encoder-decoders, decoding, training objectives, the ImitKD trainer, metrics
//! and a DAgger corridor simulation.

pub mod dagger;
pub mod data;
pub mod decoding;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod parallel;
pub mod seeds;
pub mod tensor;
pub mod trainer;

pub use data::{Corpus, SequencePair, TokenId, Vocabulary, BOS, EOS, PAD, UNK};
pub use error::{Error, Result};
pub use models::{ArchKind, DecoderState, EncodedBatch, ModelConfig, PolicyModel};
