//! Contrastive pretraining (in-batch and momentum-queue variants) and the
//! reconstruction and multi-label baselines.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{make_positive_pair, AugmentConfig, GrayImage, LungMask, LUNG_MASK_PROB};
use crate::checkpoint::Checkpoint;
use crate::config::{parse_pair, KvConfig};
use crate::error::{Error, Result};
use crate::models::{
    fan_in_uniform, init_rng, Bound, ContrastiveModel, Encoder, EncoderConfig, Linear, ParamId, ParamStore,
    ENCODER_PREFIX,
};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::synth::{Dataset, Split, ALL_KEYWORDS};
use crate::tensor::{Graph, Tensor, Var};

pub const TEMPERATURE: f64 = 0.5;
pub const MOCO_MOMENTUM: f64 = 0.99;
pub const MOCO_QUEUE: usize = 1024;
/// Largest tolerated deviation of a view's norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-6;
/// Additive score excluding `k = i` from the denominator.
const SELF_MASK: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    /// Evaluate the printed formula without the logarithm.
    pub literal_eq1: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: TEMPERATURE, literal_eq1: false }
    }
}

/// `j(i)` for `2n` views laid out as `[a_0..a_n, b_0..b_n]`.
pub fn pairing(n: usize) -> Vec<usize> {
    (0..2 * n).map(|i| (i + n) % (2 * n)).collect()
}

/// Contrastive loss over unit-norm rows `z` of shape `(2N, k)`.
///
/// Default mode: `-(1/2N) sum_i log(exp(z_i.z_j(i)/t) / sum_{k != i} exp(z_i.z_k/t))`.
/// `literal_eq1` mode: `-sum_i exp(z_i.z_j(i)/t) / sum_{k != i} exp(z_i.z_k/t)`.
pub fn nt_xent_loss(g: &mut Graph, z: Var, pairs: &[usize], cfg: &LossConfig) -> Result<Var> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {} must be positive", cfg.temperature)));
    }
    let s = g.shape(z).to_vec();
    if s.len() != 2 || s[0] < 2 || !s[0].is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "nt_xent_loss needs (2N, k) views with N >= 1, got shape {s:?}"
        )));
    }
    let rows = s[0];
    if pairs.len() != rows
        || pairs
            .iter()
            .enumerate()
            .any(|(i, &j)| j >= rows || j == i || pairs[j] != i)
    {
        return Err(Error::InvalidArgument(
            "pairing must be an involution without fixed points".into(),
        ));
    }
    for (i, row) in g.value(z).data().chunks(s[1]).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "view {i} has norm {norm}, expected unit norm"
            )));
        }
    }
    let sim = g.similarity(z, z)?;
    let sim = g.scale(sim, 1.0 / cfg.temperature);
    let mut mask = Tensor::zeros(&[rows, rows]);
    for i in 0..rows {
        mask.set(&[i, i], SELF_MASK);
    }
    let mask = g.constant(mask);
    let logits = g.add(sim, mask)?;
    if cfg.literal_eq1 {
        let p = g.softmax(logits);
        let picked = g.select_per_row(p, pairs)?;
        let total = g.sum(picked);
        Ok(g.scale(total, -1.0))
    } else {
        let lp = g.log_softmax(logits);
        let picked = g.select_per_row(lp, pairs)?;
        let mean = g.mean(picked);
        Ok(g.scale(mean, -1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PretrainMethod {
    Scratch,
    Ae,
    Mlc,
    Simclr,
    SimclrLungseg,
    Moco,
}

impl PretrainMethod {
    pub const ALL: [PretrainMethod; 6] = [
        PretrainMethod::Scratch,
        PretrainMethod::Ae,
        PretrainMethod::Mlc,
        PretrainMethod::Simclr,
        PretrainMethod::SimclrLungseg,
        PretrainMethod::Moco,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PretrainMethod::Scratch => "scratch",
            PretrainMethod::Ae => "ae",
            PretrainMethod::Mlc => "mlc",
            PretrainMethod::Simclr => "simclr",
            PretrainMethod::SimclrLungseg => "simclr_lungseg",
            PretrainMethod::Moco => "moco",
        }
    }

    pub fn is_contrastive(self) -> bool {
        matches!(self, PretrainMethod::Simclr | PretrainMethod::SimclrLungseg | PretrainMethod::Moco)
    }
}

impl fmt::Display for PretrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PretrainMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown pretrain method `{s}` (expected scratch, ae, mlc, simclr, simclr_lungseg or moco)"
                ))
            })
    }
}

/// Everything that determines a pretraining run.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub method: PretrainMethod,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamConfig,
    pub loss: LossConfig,
    pub proj_dim: usize,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub moco_momentum: f64,
    pub moco_queue: usize,
    /// Apply lung masking to MoCo views as well.
    pub moco_lung_mask: bool,
}

impl PretrainConfig {
    /// Desk-scale defaults: 60 epochs at batch 16.
    pub fn new(method: PretrainMethod, seed: u64) -> Self {
        let mut cfg = Self {
            method,
            seed,
            epochs: 60,
            batch_size: 16,
            optim: AdamConfig::default(),
            loss: LossConfig::default(),
            proj_dim: 32,
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::default(),
            moco_momentum: MOCO_MOMENTUM,
            moco_queue: MOCO_QUEUE,
            moco_lung_mask: false,
        };
        cfg.sync_mask_prob();
        cfg
    }

    fn sync_mask_prob(&mut self) {
        let masked = match self.method {
            PretrainMethod::SimclrLungseg => true,
            PretrainMethod::Moco => self.moco_lung_mask,
            _ => false,
        };
        self.augment.mask_prob = if masked { LUNG_MASK_PROB } else { 0.0 };
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 && self.method != PretrainMethod::Scratch {
            return Err(Error::Config("pretrain batch_size must be at least 2".into()));
        }
        if !(self.optim.lr_max >= self.optim.lr_min && self.optim.lr_min >= 0.0) {
            return Err(Error::Config("need lr_max >= lr_min >= 0".into()));
        }
        if !(self.loss.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.moco_momentum) || self.moco_queue == 0 {
            return Err(Error::Config("moco momentum must lie in [0, 1] and queue be positive".into()));
        }
        self.encoder.validate()?;
        self.augment.validate()
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("method", self.method);
        kv.set("seed", self.seed);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr_max", self.optim.lr_max);
        kv.set("lr_min", self.optim.lr_min);
        kv.set("weight_decay", self.optim.weight_decay);
        kv.set("temperature", self.loss.temperature);
        kv.set("literal_eq1", self.loss.literal_eq1);
        kv.set("proj_dim", self.proj_dim);
        self.encoder.write_kv(&mut kv);
        kv.set("crop_scale", format!("{},{}", self.augment.crop_scale.0, self.augment.crop_scale.1));
        kv.set("flip_prob", self.augment.flip_prob);
        kv.set("mask_prob", self.augment.mask_prob);
        kv.set("paired_masking", self.augment.paired_masking);
        kv.set("moco_momentum", self.moco_momentum);
        kv.set("moco_queue", self.moco_queue);
        kv.set("moco_lung_mask", self.moco_lung_mask);
        kv
    }

    /// Defaults for `method` (from `kv` or the argument) overridden by `kv`.
    pub fn from_kv(kv: &KvConfig, method: Option<PretrainMethod>, seed: Option<u64>) -> Result<Self> {
        let method = match method {
            Some(m) => m,
            None => kv
                .get::<PretrainMethod>("method")?
                .ok_or_else(|| Error::Config("pretrain method not set".into()))?,
        };
        let seed = match seed {
            Some(s) => s,
            None => kv.get_or("seed", 0)?,
        };
        let mut c = Self::new(method, seed);
        c.epochs = kv.get_or("epochs", c.epochs)?;
        c.batch_size = kv.get_or("batch_size", c.batch_size)?;
        c.optim.lr_max = kv.get_or("lr_max", c.optim.lr_max)?;
        c.optim.lr_min = kv.get_or("lr_min", c.optim.lr_min)?;
        c.optim.weight_decay = kv.get_or("weight_decay", c.optim.weight_decay)?;
        c.loss.temperature = kv.get_or("temperature", c.loss.temperature)?;
        c.loss.literal_eq1 = kv.get_or("literal_eq1", c.loss.literal_eq1)?;
        c.proj_dim = kv.get_or("proj_dim", c.proj_dim)?;
        c.encoder = EncoderConfig::from_kv(kv)?;
        c.augment.out_size = (c.encoder.image_size, c.encoder.image_size);
        if let Some(s) = kv.raw("crop_scale") {
            c.augment.crop_scale = parse_pair(s)?;
        }
        c.augment.flip_prob = kv.get_or("flip_prob", c.augment.flip_prob)?;
        c.augment.paired_masking = kv.get_or("paired_masking", c.augment.paired_masking)?;
        c.moco_momentum = kv.get_or("moco_momentum", c.moco_momentum)?;
        c.moco_queue = kv.get_or("moco_queue", c.moco_queue)?;
        c.moco_lung_mask = kv.get_or("moco_lung_mask", c.moco_lung_mask)?;
        c.sync_mask_prob();
        c.augment.mask_prob = kv.get_or("mask_prob", c.augment.mask_prob)?;
        c.validate()?;
        Ok(c)
    }
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    /// Optimiser steps completed so far.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean loss over the epoch.
    pub loss: f64,
}

impl LossRecord {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{:.8}\t{:.6}", self.epoch, self.step, self.lr, self.loss)
    }
}

pub fn format_loss_log(records: &[LossRecord]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

/// Applies `opt` to every parameter of `store` with a gradient in `g`.
pub(crate) fn apply_grads(
    store: &mut ParamStore,
    g: &Graph,
    p: &Bound,
    opt: &mut Adam,
    lr: f64,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    let grads: Vec<Option<&Tensor>> = p
        .vars()
        .iter()
        .zip(store.names())
        .map(|(&v, name)| if trainable(name) { g.grad(v) } else { None })
        .collect();
    // Gradients borrow the graph, not the store.
    let grads: Vec<Option<Tensor>> = grads.into_iter().map(|o| o.cloned()).collect();
    let refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
    opt.update(store.tensors_mut(), &refs, lr)
}

pub(crate) fn finite_loss(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numerical(format!("{what} loss became {value}")))
    }
}

fn views<R: Rng + ?Sized>(
    images: &[&GrayImage],
    masks: &[&LungMask],
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<(Vec<GrayImage>, Vec<GrayImage>)> {
    if images.len() != masks.len() {
        return Err(Error::InvalidArgument("image and mask counts differ".into()));
    }
    let mut a = Vec::with_capacity(images.len());
    let mut b = Vec::with_capacity(images.len());
    for (img, mask) in images.iter().zip(masks) {
        let (x, y) = make_positive_pair(img, mask, aug, rng)?;
        a.push(x);
        b.push(y);
    }
    Ok((a, b))
}

/// Unit-norm projections of `images` under `p`.
fn project(g: &mut Graph, model: &ContrastiveModel, p: &Bound, images: &[&GrayImage]) -> Result<Var> {
    let x = g.constant(Encoder::batch_tensor(images)?);
    let f = model.encoder.forward(g, p, x)?;
    let z = model.head.forward(g, p, f.pooled)?;
    g.l2_normalize(z)
}

/// One in-batch contrastive update over `2N` augmented views. Returns the
/// loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn simclr_step<R: Rng + ?Sized>(
    model: &mut ContrastiveModel,
    images: &[&GrayImage],
    masks: &[&LungMask],
    aug: &AugmentConfig,
    loss_cfg: &LossConfig,
    opt: &mut Adam,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    let n = images.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("simclr_step needs N >= 2, got {n}")));
    }
    let (a, b) = views(images, masks, aug, rng)?;
    let all: Vec<&GrayImage> = a.iter().chain(&b).collect();
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, true);
    let z = project(&mut g, model, &p, &all)?;
    let loss = nt_xent_loss(&mut g, z, &pairing(n), loss_cfg)?;
    let value = finite_loss(g.value(loss).item(), "contrastive")?;
    g.backward(loss)?;
    apply_grads(&mut model.store, &g, &p, opt, lr, |_| true)?;
    Ok(value)
}

/// Momentum key network and queue of past keys.
#[derive(Clone, Debug)]
pub struct MocoState {
    pub key_store: ParamStore,
    queue: VecDeque<Vec<f64>>,
    pub capacity: usize,
    pub momentum: f64,
}

impl MocoState {
    pub fn new(query: &ParamStore, capacity: usize, momentum: f64) -> Result<Self> {
        if capacity == 0 || !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "moco needs capacity > 0 and momentum in [0, 1], got {capacity} and {momentum}"
            )));
        }
        Ok(Self {
            key_store: query.clone(),
            queue: VecDeque::with_capacity(capacity),
            capacity,
            momentum,
        })
    }

    /// `key = m * key + (1 - m) * query`.
    pub fn momentum_update(&mut self, query: &ParamStore) {
        let m = self.momentum;
        for (k, q) in self.key_store.tensors_mut().iter_mut().zip(query.tensors()) {
            for (kv, &qv) in k.data_mut().iter_mut().zip(q.data()) {
                *kv = m * *kv + (1.0 - m) * qv;
            }
        }
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Queue entries, oldest first.
    pub fn queue(&self) -> impl Iterator<Item = &[f64]> {
        self.queue.iter().map(Vec::as_slice)
    }

    /// Appends the rows of `keys`, dropping the oldest entries beyond
    /// capacity.
    pub fn enqueue(&mut self, keys: &Tensor) -> Result<()> {
        let s = keys.shape();
        if s.len() != 2 {
            return Err(Error::shape("enqueue", s, &[0, 0]));
        }
        for row in keys.data().chunks(s[1]) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::InvalidArgument(format!("key norm {norm} is not unit")));
            }
            if self.queue.len() == self.capacity {
                self.queue.pop_front();
            }
            self.queue.push_back(row.to_vec());
        }
        Ok(())
    }

    fn queue_tensor(&self) -> Option<Tensor> {
        let dim = self.queue.front()?.len();
        let data = self.queue.iter().flatten().copied().collect();
        Some(Tensor::new(&[self.queue.len(), dim], data).expect("queue rows share a dim"))
    }
}

/// One momentum-contrast update: the first view of each image is the query,
/// the second the key. Returns the loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn moco_step<R: Rng + ?Sized>(
    model: &mut ContrastiveModel,
    moco: &mut MocoState,
    images: &[&GrayImage],
    masks: &[&LungMask],
    aug: &AugmentConfig,
    loss_cfg: &LossConfig,
    opt: &mut Adam,
    lr: f64,
    rng: &mut R,
) -> Result<f64> {
    let n = images.len();
    if n == 0 {
        return Err(Error::InvalidArgument("moco_step needs a non-empty batch".into()));
    }
    let (a, b) = views(images, masks, aug, rng)?;
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, true);
    let pk = moco.key_store.bind(&mut g, false);
    let q = project(&mut g, model, &p, &a.iter().collect::<Vec<_>>())?;
    let k = project(&mut g, model, &pk, &b.iter().collect::<Vec<_>>())?;
    let keys = g.value(k).clone();

    let pos = g.mul(q, k)?;
    let pos = g.sum_last(pos);
    let pos = g.reshape(pos, &[n, 1])?;
    let logits = match moco.queue_tensor() {
        Some(queue) => {
            let queue = g.constant(queue);
            let neg = g.matmul_nt(q, queue)?;
            g.concat(&[pos, neg], 1)?
        }
        None => pos,
    };
    let logits = g.scale(logits, 1.0 / loss_cfg.temperature);
    let loss = g.cross_entropy(logits, &vec![Some(0); n])?;
    let value = finite_loss(g.value(loss).item(), "momentum contrast")?;
    g.backward(loss)?;
    apply_grads(&mut model.store, &g, &p, opt, lr, |_| true)?;
    moco.momentum_update(&model.store);
    moco.enqueue(&keys)?;
    Ok(value)
}

/// Transposed-convolution decoder reconstructing the image from the grid.
#[derive(Clone, Debug)]
pub struct ReconstructionHead {
    layers: Vec<(ParamId, ParamId)>,
    side: usize,
}

impl ReconstructionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, enc: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let side = enc.grid_side();
        let ratio = enc.image_size / side;
        if side * ratio != enc.image_size || !ratio.is_power_of_two() || ratio < 2 {
            return Err(Error::Config(format!(
                "reconstruction needs image size {} to be a power-of-two multiple of grid side {side}",
                enc.image_size
            )));
        }
        let mut c = enc.dim();
        let mut layers = Vec::new();
        let n = ratio.trailing_zeros() as usize;
        for i in 0..n {
            let out = if i + 1 == n { 1 } else { (c / 2).max(8) };
            let w = store.add(
                format!("ae.deconv{i}.weight"),
                fan_in_uniform(&[c, out, 4, 4], c * 4, if i + 1 == n { 1.0 } else { std::f64::consts::SQRT_2 }, rng),
            );
            let b = store.add(format!("ae.deconv{i}.bias"), Tensor::zeros(&[out]));
            layers.push((w, b));
            c = out;
        }
        Ok(Self { layers, side })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, grid: Var) -> Result<Var> {
        let s = g.shape(grid).to_vec();
        let x = g.permute(grid, &[0, 2, 1])?;
        let mut x = g.reshape(x, &[s[0], s[2], self.side, self.side])?;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let y = g.conv_transpose2d(x, p[w], 2, 1)?;
            x = g.add_bias(y, p[b], 1)?;
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

/// Multi-hot target of the synthetic keyword tags.
pub fn tag_vector(tags: &[String]) -> Vec<f64> {
    ALL_KEYWORDS
        .iter()
        .map(|k| if tags.iter().any(|t| t == k) { 1.0 } else { 0.0 })
        .collect()
}

/// Result of a pretraining run.
#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
}

enum Trainer {
    None,
    Contrastive(ContrastiveModel, Option<MocoState>),
    Ae { store: ParamStore, encoder: Encoder, head: ReconstructionHead },
    Mlc { store: ParamStore, encoder: Encoder, head: Linear },
}

/// Runs `cfg.method` on the training split of `ds`.
pub fn pretrain(ds: &Dataset, cfg: &PretrainConfig) -> Result<PretrainOutput> {
    cfg.validate()?;
    let train = ds.manifest.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut trainer = match cfg.method {
        PretrainMethod::Scratch => Trainer::None,
        PretrainMethod::Simclr | PretrainMethod::SimclrLungseg | PretrainMethod::Moco => {
            let model = ContrastiveModel::new(cfg.encoder.clone(), cfg.proj_dim, cfg.seed)?;
            let moco = (cfg.method == PretrainMethod::Moco)
                .then(|| MocoState::new(&model.store, cfg.moco_queue, cfg.moco_momentum))
                .transpose()?;
            Trainer::Contrastive(model, moco)
        }
        PretrainMethod::Ae => {
            let mut rng = init_rng(cfg.seed);
            let mut store = ParamStore::new();
            let encoder = Encoder::new(&mut store, ENCODER_PREFIX, cfg.encoder.clone(), &mut rng)?;
            let head = ReconstructionHead::new(&mut store, &cfg.encoder, &mut rng)?;
            Trainer::Ae { store, encoder, head }
        }
        PretrainMethod::Mlc => {
            let mut rng = init_rng(cfg.seed);
            let mut store = ParamStore::new();
            let encoder = Encoder::new(&mut store, ENCODER_PREFIX, cfg.encoder.clone(), &mut rng)?;
            let head = Linear::new(&mut store, "mlc", encoder.dim(), ALL_KEYWORDS.len(), 1.0, &mut rng);
            Trainer::Mlc { store, encoder, head }
        }
    };

    let min_batch = if cfg.method.is_contrastive() && cfg.method != PretrainMethod::Moco { 2 } else { 1 };
    let batches_per_epoch = train
        .chunks(cfg.batch_size.max(1))
        .filter(|c| c.len() >= min_batch)
        .count();
    let total = cfg.epochs * batches_per_epoch;
    let mut opt = {
        let store = match &trainer {
            Trainer::None => None,
            Trainer::Contrastive(m, _) => Some(&m.store),
            Trainer::Ae { store, .. } | Trainer::Mlc { store, .. } => Some(store),
        };
        store.map(|s| Adam::new(s.tensors(), cfg.optim.clone()))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let mut log = Vec::new();
    let mut step = 0;
    if let Some(opt) = opt.as_mut() {
        let mut order = train.clone();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut count = 0;
            let mut lr = cfg.optim.lr_max;
            for chunk in order.chunks(cfg.batch_size) {
                if chunk.len() < min_batch {
                    continue;
                }
                lr = cosine_lr(step, total, cfg.optim.lr_max, cfg.optim.lr_min);
                let images: Vec<&GrayImage> = chunk.iter().map(|&i| &ds.images[i]).collect();
                let masks: Vec<&LungMask> = chunk.iter().map(|&i| &ds.masks[i]).collect();
                let loss = match &mut trainer {
                    Trainer::None => unreachable!("no optimiser without a trainer"),
                    Trainer::Contrastive(model, None) => {
                        simclr_step(model, &images, &masks, &cfg.augment, &cfg.loss, opt, lr, &mut rng)?
                    }
                    Trainer::Contrastive(model, Some(moco)) => {
                        moco_step(model, moco, &images, &masks, &cfg.augment, &cfg.loss, opt, lr, &mut rng)?
                    }
                    Trainer::Ae { store, encoder, head } => {
                        let mut g = Graph::new();
                        let p = store.bind(&mut g, true);
                        let x = g.constant(Encoder::batch_tensor(&images)?);
                        let f = encoder.forward(&mut g, &p, x)?;
                        let recon = head.forward(&mut g, &p, f.grid)?;
                        let loss = g.mse(recon, x)?;
                        let v = finite_loss(g.value(loss).item(), "reconstruction")?;
                        g.backward(loss)?;
                        apply_grads(store, &g, &p, opt, lr, |_| true)?;
                        v
                    }
                    Trainer::Mlc { store, encoder, head } => {
                        let targets: Vec<f64> = chunk
                            .iter()
                            .flat_map(|&i| tag_vector(&ds.manifest.records[i].tags))
                            .collect();
                        let targets = Tensor::new(&[chunk.len(), ALL_KEYWORDS.len()], targets)?;
                        let mut g = Graph::new();
                        let p = store.bind(&mut g, true);
                        let x = g.constant(Encoder::batch_tensor(&images)?);
                        let f = encoder.forward(&mut g, &p, x)?;
                        let logits = head.forward(&mut g, &p, f.pooled)?;
                        let loss = g.bce_with_logits(logits, &targets)?;
                        let v = finite_loss(g.value(loss).item(), "multi-label")?;
                        g.backward(loss)?;
                        apply_grads(store, &g, &p, opt, lr, |_| true)?;
                        v
                    }
                };
                sum += loss;
                count += 1;
                step += 1;
            }
            let record = LossRecord { epoch, step, lr, loss: sum / count.max(1) as f64 };
            log::info!("pretrain {} epoch {epoch}: loss {:.6}", cfg.method, record.loss);
            log.push(record);
        }
    }

    let config = cfg.to_kv().to_text();
    let checkpoint = match &trainer {
        Trainer::None => {
            let model = ContrastiveModel::new(cfg.encoder.clone(), cfg.proj_dim, cfg.seed)?;
            let mut store = ParamStore::new();
            for (name, t) in model.store.iter().filter(|(n, _)| n.starts_with(ENCODER_PREFIX)) {
                store.add(name, t.clone());
            }
            Checkpoint::from_store(config, &store)
        }
        Trainer::Contrastive(m, _) => Checkpoint::from_store(config, &m.store),
        Trainer::Ae { store, .. } | Trainer::Mlc { store, .. } => Checkpoint::from_store(config, store),
    };
    Ok(PretrainOutput { checkpoint, log })
}

#[cfg(test)]
mod tests;
