pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod finetune;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod pretrain;
pub mod synth;
pub mod tensor;
#[cfg(test)]
mod test_util;

pub use checkpoint::Checkpoint;
pub use config::KvConfig;
pub use error::{Error, Result};
pub use models::{DecoderKind, FeatureMap};
pub use pretrain::PretrainMethod;
pub use tensor::{Graph, Padding, Tensor, Var};
