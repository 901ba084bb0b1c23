//! Encoder `f`, projection head `g` and the report decoders.

mod decoder;
mod encoder;
mod layers;
mod params;


pub use decoder::{Decoder, DecoderConfig, DecoderKind, BOS, EOS, PAD, UNK};
pub use encoder::{Encoder, EncoderConfig, FeatureMap, Features, ProjectionHead};
pub use layers::{Conv, Linear, Norm};
pub use params::{fan_in_uniform, Bound, ParamId, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Name prefix of encoder parameters in every model and checkpoint.
pub const ENCODER_PREFIX: &str = "encoder";

pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Encoder plus projection head, the network trained by contrastive
/// pretraining.
#[derive(Clone, Debug)]
pub struct ContrastiveModel {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub head: ProjectionHead,
}

impl ContrastiveModel {
    pub fn new(config: EncoderConfig, proj_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = init_rng(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, ENCODER_PREFIX, config, &mut rng)?;
        let head = ProjectionHead::new(&mut store, "head", encoder.dim(), proj_dim, &mut rng)?;
        Ok(Self { store, encoder, head })
    }
}

/// Encoder plus report decoder.
#[derive(Clone, Debug)]
pub struct ReportModel {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl ReportModel {
    /// Encoder parameters are drawn first, so for a given seed they match
    /// those of a [`ContrastiveModel`].
    pub fn new(encoder: EncoderConfig, mut decoder: DecoderConfig, seed: u64) -> Result<Self> {
        let mut rng = init_rng(seed);
        let mut store = ParamStore::new();
        decoder.feature_dim = encoder.dim();
        decoder.grid_positions = encoder.grid_side() * encoder.grid_side();
        let encoder = Encoder::new(&mut store, ENCODER_PREFIX, encoder, &mut rng)?;
        let decoder = Decoder::new(&mut store, "decoder", decoder, &mut rng)?;
        Ok(Self { store, encoder, decoder })
    }
}
