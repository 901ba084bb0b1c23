use rand::Rng;

use super::layers::{Conv, Linear};
use super::params::{Bound, ParamStore};
use crate::augment::GrayImage;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Encoder hyperparameters.
///
/// The default is a stride-2 3x3 stem with 16 channels followed by four
/// residual blocks with 16, 32, 64 and 64 output channels and strides 2, 2,
/// 2 and 1. A 64x64 input yields a 4x4 grid of 64-dim features and
/// [`EncoderConfig::param_count`] gives 150,896 scalars.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub stem_channels: usize,
    pub blocks: Vec<(usize, usize)>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            stem_channels: 16,
            blocks: vec![(16, 2), (32, 2), (64, 2), (64, 1)],
        }
    }
}

impl EncoderConfig {
    /// Dimension `d` of the pooled representation.
    pub fn dim(&self) -> usize {
        self.blocks.last().map_or(self.stem_channels, |b| b.0)
    }

    /// Side length of the output grid.
    pub fn grid_side(&self) -> usize {
        let mut side = self.image_size.div_ceil(2);
        for &(_, s) in &self.blocks {
            side = side.div_ceil(s);
        }
        side
    }

    /// Number of scalars the encoder allocates.
    pub fn param_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let mut total = conv(1, self.stem_channels, 3);
        let mut c = self.stem_channels;
        for &(o, s) in &self.blocks {
            total += conv(c, o, 3) + conv(o, o, 3);
            if o != c || s != 1 {
                total += conv(c, o, 1);
            }
            c = o;
        }
        total
    }

    /// Writes `image_size`, `stem_channels`, `encoder_blocks` (as
    /// `channels/stride` pairs) and the derived `encoder_params`.
    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("image_size", self.image_size);
        kv.set("stem_channels", self.stem_channels);
        let blocks: Vec<String> = self.blocks.iter().map(|(c, s)| format!("{c}/{s}")).collect();
        kv.set("encoder_blocks", blocks.join(","));
        kv.set("encoder_params", self.param_count());
    }

    /// Defaults overridden by whatever [`EncoderConfig::write_kv`] keys are
    /// present.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = Self::default();
        c.image_size = kv.get_or("image_size", c.image_size)?;
        c.stem_channels = kv.get_or("stem_channels", c.stem_channels)?;
        if let Some(spec) = kv.raw("encoder_blocks") {
            c.blocks = spec
                .split(',')
                .map(|b| {
                    let parsed = b
                        .split_once('/')
                        .and_then(|(ch, st)| Some((ch.trim().parse().ok()?, st.trim().parse().ok()?)));
                    parsed.ok_or_else(|| Error::Config(format!("bad encoder block `{b}` (expected channels/stride)")))
                })
                .collect::<Result<_>>()?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 2 || self.stem_channels == 0 || self.blocks.is_empty() {
            return Err(Error::Config(format!("invalid encoder config {self:?}")));
        }
        if self.blocks.iter().any(|&(c, s)| c == 0 || s == 0) {
            return Err(Error::Config("encoder block with zero channels or stride".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    conv1: Conv,
    conv2: Conv,
    skip: Option<Conv>,
}

/// Residual convolutional backbone `f`.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    stem: Conv,
    blocks: Vec<Block>,
}

/// Graph-level encoder output.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    /// `(batch, positions, d)`.
    pub grid: Var,
    /// `(batch, d)`; the mean of `grid` over positions.
    pub pooled: Var,
}

/// Detached encoder output, used for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `(batch, positions, d)`.
    pub grid: Tensor,
    /// `(batch, d)`.
    pub pooled: Tensor,
}

impl FeatureMap {
    pub fn from_graph(g: &Graph, f: &Features) -> Self {
        Self {
            grid: g.value(f.grid).clone(),
            pooled: g.value(f.pooled).clone(),
        }
    }

    pub fn batch(&self) -> usize {
        self.pooled.shape()[0]
    }

    /// Feature map of the `i`-th batch element.
    pub fn row(&self, i: usize) -> FeatureMap {
        let gs = self.grid.shape();
        let d = self.pooled.shape()[1];
        let per = gs[1] * gs[2];
        FeatureMap {
            grid: Tensor::new(&[1, gs[1], gs[2]], self.grid.data()[i * per..(i + 1) * per].to_vec())
                .expect("row of valid grid"),
            pooled: Tensor::new(&[1, d], self.pooled.data()[i * d..(i + 1) * d].to_vec())
                .expect("row of valid pooled"),
        }
    }

    /// Records the tensors as constants.
    pub fn bind(&self, g: &mut Graph) -> Features {
        Features {
            grid: g.constant(self.grid.clone()),
            pooled: g.constant(self.pooled.clone()),
        }
    }
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let stem = Conv::new(store, &format!("{prefix}.stem"), 1, config.stem_channels, 3, 2, RELU_GAIN, rng);
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut c = config.stem_channels;
        for (i, &(o, s)) in config.blocks.iter().enumerate() {
            let name = format!("{prefix}.block{i}");
            let conv1 = Conv::new(store, &format!("{name}.conv1"), c, o, 3, s, RELU_GAIN, rng);
            let conv2 = Conv::new(store, &format!("{name}.conv2"), o, o, 3, 1, 1.0, rng);
            let skip = (o != c || s != 1)
                .then(|| Conv::new(store, &format!("{name}.skip"), c, o, 1, s, 1.0, rng));
            blocks.push(Block { conv1, conv2, skip });
            c = o;
        }
        Ok(Self { config, stem, blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    /// Runs the backbone on a `(batch, 1, size, size)` input.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Features> {
        let s = g.shape(x).to_vec();
        let n = self.config.image_size;
        if s.len() != 4 || s[1] != 1 || s[2] != n || s[3] != n {
            return Err(Error::shape("encoder_forward", &s, &[s.first().copied().unwrap_or(0), 1, n, n]));
        }
        let stem = self.stem.forward(g, p, x)?;
        let mut h = g.relu(stem);
        for b in &self.blocks {
            let y = b.conv1.forward(g, p, h)?;
            let y = g.relu(y);
            let y = b.conv2.forward(g, p, y)?;
            let skip = match &b.skip {
                Some(conv) => conv.forward(g, p, h)?,
                None => h,
            };
            let sum = g.add(y, skip)?;
            h = g.relu(sum);
        }
        let pooled = g.mean_pool(h)?;
        let hs = g.shape(h).to_vec();
        let flat = g.reshape(h, &[hs[0], hs[1], hs[2] * hs[3]])?;
        let grid = g.permute(flat, &[0, 2, 1])?;
        Ok(Features { grid, pooled })
    }

    /// Stacks images into a `(batch, 1, h, w)` tensor.
    pub fn batch_tensor(images: &[&GrayImage]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::shape("batch_tensor", &[h, w], &[img.height(), img.width()]));
            }
            data.extend_from_slice(img.pixels());
        }
        Tensor::new(&[images.len(), 1, h, w], data)
    }

    /// Forward pass on images with no gradient tracking.
    pub fn encode(&self, store: &ParamStore, images: &[&GrayImage]) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Self::batch_tensor(images)?);
        let f = self.forward(&mut g, &p, x)?;
        Ok(FeatureMap::from_graph(&g, &f))
    }
}

/// Two-layer projection head `g` mapping `r` (dim `d`) to `z` (dim `k`).
#[derive(Clone, Copy, Debug)]
pub struct ProjectionHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 || k >= d {
            return Err(Error::Config(format!("projection needs 0 < k < d, got d={d} k={k}")));
        }
        Ok(Self {
            hidden: Linear::new(store, &format!("{prefix}.fc1"), d, d, RELU_GAIN, rng),
            out: Linear::new(store, &format!("{prefix}.fc2"), d, k, 1.0, rng),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out.fan_out
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, r: Var) -> Result<Var> {
        let s = g.shape(r).to_vec();
        if s.len() != 2 || s[1] != self.hidden.fan_in {
            return Err(Error::shape("projection_forward", &s, &[0, self.hidden.fan_in]));
        }
        let h = self.hidden.forward(g, p, r)?;
        let h = g.relu(h);
        self.out.forward(g, p, h)
    }
}
