//! Supervised encoder+decoder training on (image, report) pairs and greedy
//! report generation.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::GrayImage;
use crate::checkpoint::Checkpoint;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::metrics::tokenize;
use crate::models::{
    Bound, DecoderConfig, DecoderKind, Encoder, EncoderConfig, Features, ReportModel, BOS, EOS, ENCODER_PREFIX,
    PAD, UNK,
};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::pretrain::{apply_grads, finite_loss};
use crate::synth::{Dataset, Split};
use crate::tensor::{Graph, Var};

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token/id bijection. Ids 0..4 are PAD, BOS, EOS and UNK; the rest are the
/// sorted distinct training tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let distinct: BTreeSet<String> = tokens
            .into_iter()
            .map(Into::into)
            .filter(|t| !RESERVED.contains(&t.as_str()))
            .collect();
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(distinct).collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    /// Vocabulary of the training-split reports of `ds`.
    pub fn build(ds: &Dataset) -> Self {
        Self::from_tokens(
            ds.manifest
                .records
                .iter()
                .filter(|r| r.split == Split::Train)
                .flat_map(|r| tokenize(&r.report)),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Content ids of `text`; unknown tokens map to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Space-joined tokens, skipping PAD/BOS/EOS.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Non-reserved tokens separated by spaces, for checkpoint configs.
    pub fn to_line(&self) -> String {
        self.tokens[RESERVED.len()..].join(" ")
    }

    pub fn from_line(line: &str) -> Self {
        Self::from_tokens(line.split_whitespace())
    }
}

/// Decoder inputs (`[B][T]`) and flattened per-position targets.
pub type TeacherBatch = (Vec<Vec<usize>>, Vec<Option<usize>>);

/// Decoder inputs `[BOS, r...]` padded to the batch maximum, and the
/// flattened next-token targets `[r..., EOS]` with PAD positions ignored.
/// Reports longer than `max_len - 1` tokens are truncated.
pub fn teacher_forcing_batch(reports: &[Vec<usize>], max_len: usize) -> Result<TeacherBatch> {
    if max_len < 2 {
        return Err(Error::Config("max_len must be at least 2".into()));
    }
    if reports.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("empty report".into()));
    }
    let keep = max_len - 1;
    let t = reports.iter().map(|r| r.len().min(keep)).max().unwrap_or(0) + 1;
    let mut inputs = Vec::with_capacity(reports.len());
    let mut targets = Vec::with_capacity(reports.len() * t);
    for r in reports {
        let r = &r[..r.len().min(keep)];
        let mut input = vec![BOS];
        input.extend_from_slice(r);
        input.resize(t, PAD);
        inputs.push(input);
        targets.extend(r.iter().map(|&id| Some(id)));
        targets.push(Some(EOS));
        targets.resize(inputs.len() * t, None);
    }
    Ok((inputs, targets))
}

/// Mean next-token cross-entropy over non-PAD positions, decoder conditioned
/// on gold prefixes.
pub fn decoder_loss(g: &mut Graph, model: &ReportModel, p: &Bound, features: &Features, reports: &[Vec<usize>]) -> Result<Var> {
    let (inputs, targets) = teacher_forcing_batch(reports, model.decoder.config().max_len)?;
    let logits = model.decoder.logits(g, p, features, &inputs)?;
    let v = model.decoder.config().vocab_size;
    let flat = g.reshape(logits, &[targets.len(), v])?;
    g.cross_entropy(flat, &targets)
}

/// [`decoder_loss`] with the encoder run on `images` inside the graph.
pub fn teacher_forced_loss(
    g: &mut Graph,
    model: &ReportModel,
    p: &Bound,
    images: &[&GrayImage],
    reports: &[Vec<usize>],
) -> Result<Var> {
    if images.len() != reports.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images but {} reports",
            images.len(),
            reports.len()
        )));
    }
    let x = g.constant(Encoder::batch_tensor(images)?);
    let f = model.encoder.forward(g, p, x)?;
    decoder_loss(g, model, p, &f, reports)
}

/// Everything that determines a fine-tuning run.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamConfig,
    pub encoder: EncoderConfig,
    /// Vocabulary size and feature dims are filled in when the model is
    /// built.
    pub decoder: DecoderConfig,
    pub freeze_encoder: bool,
}

/// Keys that must agree between a checkpoint and the model it is loaded
/// into.
pub const COMPAT_KEYS: [&str; 4] = ["image_size", "stem_channels", "encoder_blocks", "encoder_params"];

impl FinetuneConfig {
    /// Desk-scale defaults: 40 epochs at batch 16.
    pub fn new(decoder: DecoderKind, seed: u64) -> Self {
        Self {
            seed,
            epochs: 40,
            batch_size: 16,
            optim: AdamConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::new(decoder, 0),
            freeze_encoder: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("finetune batch_size must be positive".into()));
        }
        if !(self.optim.lr_max >= self.optim.lr_min && self.optim.lr_min >= 0.0) {
            return Err(Error::Config("need lr_max >= lr_min >= 0".into()));
        }
        if self.decoder.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        self.encoder.validate()?;
        self.decoder_config(RESERVED.len()).validate()
    }

    pub fn decoder_config(&self, vocab_size: usize) -> DecoderConfig {
        let mut d = self.decoder.clone();
        d.vocab_size = vocab_size;
        d.feature_dim = self.encoder.dim();
        d.grid_positions = self.encoder.grid_side() * self.encoder.grid_side();
        d
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("seed", self.seed);
        kv.set("decoder", self.decoder.kind);
        kv.set("epochs", self.epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("lr_max", self.optim.lr_max);
        kv.set("lr_min", self.optim.lr_min);
        kv.set("weight_decay", self.optim.weight_decay);
        self.encoder.write_kv(&mut kv);
        let d = &self.decoder;
        kv.set("max_len", d.max_len);
        kv.set("embed_dim", d.embed_dim);
        kv.set("hidden_dim", d.hidden_dim);
        kv.set("heads", d.heads);
        kv.set("layers", d.layers);
        kv.set("ff_dim", d.ff_dim);
        kv.set("freeze_encoder", self.freeze_encoder);
        kv
    }

    pub fn from_kv(kv: &KvConfig, decoder: Option<DecoderKind>, seed: Option<u64>) -> Result<Self> {
        let decoder = match decoder {
            Some(d) => d,
            None => kv.get_or("decoder", DecoderKind::Transformer)?,
        };
        let seed = match seed {
            Some(s) => s,
            None => kv.get_or("seed", 0)?,
        };
        let mut c = Self::new(decoder, seed);
        c.epochs = kv.get_or("epochs", c.epochs)?;
        c.batch_size = kv.get_or("batch_size", c.batch_size)?;
        c.optim.lr_max = kv.get_or("lr_max", c.optim.lr_max)?;
        c.optim.lr_min = kv.get_or("lr_min", c.optim.lr_min)?;
        c.optim.weight_decay = kv.get_or("weight_decay", c.optim.weight_decay)?;
        c.encoder = EncoderConfig::from_kv(kv)?;
        let d = &mut c.decoder;
        d.max_len = kv.get_or("max_len", d.max_len)?;
        d.embed_dim = kv.get_or("embed_dim", d.embed_dim)?;
        d.hidden_dim = kv.get_or("hidden_dim", d.hidden_dim)?;
        d.heads = kv.get_or("heads", d.heads)?;
        d.layers = kv.get_or("layers", d.layers)?;
        d.ff_dim = kv.get_or("ff_dim", d.ff_dim)?;
        c.freeze_encoder = kv.get_or("freeze_encoder", c.freeze_encoder)?;
        c.validate()?;
        Ok(c)
    }
}

/// Fails with a `key: a != b` listing when `ckpt` was produced for a
/// different encoder, or is a full model with a different decoder.
pub fn check_compatible(ckpt: &Checkpoint, cfg: &FinetuneConfig) -> Result<()> {
    let theirs = KvConfig::parse(&ckpt.config)?;
    let keys: Vec<&str> = COMPAT_KEYS
        .iter()
        .chain(&["decoder"])
        .copied()
        .filter(|k| theirs.contains(k))
        .collect();
    let diff = theirs.diff(&cfg.to_kv(), &keys);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "checkpoint does not match the requested model:\n  {}",
            diff.join("\n  ")
        )))
    }
}

/// Model seeded from `cfg.seed` whose encoder, when `encoder_ckpt` is given,
/// is copied verbatim from the checkpoint.
pub fn init_model(vocab: &Vocab, cfg: &FinetuneConfig, encoder_ckpt: Option<&Checkpoint>) -> Result<ReportModel> {
    cfg.validate()?;
    let mut model = ReportModel::new(cfg.encoder.clone(), cfg.decoder_config(vocab.len()), cfg.seed)?;
    if let Some(ck) = encoder_ckpt {
        check_compatible(ck, cfg)?;
        model.store.load_prefix(&ck.params, &format!("{ENCODER_PREFIX}."))?;
    }
    Ok(model)
}

/// One line of the validation curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{:.8}\t{:.6}\t{:.6}",
            self.epoch, self.step, self.lr, self.train_loss, self.val_loss
        )
    }
}

pub fn format_curve(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch\tstep\tlr\ttrain_loss\tval_loss\n");
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

/// Result of a fine-tuning run. `model` is the validation-best snapshot as
/// stored in `checkpoint`.
#[derive(Clone, Debug)]
pub struct FinetuneOutput {
    pub model: ReportModel,
    pub vocab: Vocab,
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochRecord>,
    /// Epoch of the retained snapshot; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

const EVAL_BATCH: usize = 32;

/// Token-weighted mean teacher-forced loss over `indices`, no gradients.
pub fn evaluate_loss(model: &ReportModel, vocab: &Vocab, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let images: Vec<&GrayImage> = chunk.iter().map(|&i| &ds.images[i]).collect();
        let reports: Vec<Vec<usize>> = chunk.iter().map(|&i| vocab.encode(&ds.manifest.records[i].report)).collect();
        let (_, targets) = teacher_forcing_batch(&reports, model.decoder.config().max_len)?;
        let n = targets.iter().flatten().count();
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, false);
        let loss = teacher_forced_loss(&mut g, model, &p, &images, &reports)?;
        total += g.value(loss).item() * n as f64;
        tokens += n;
    }
    Ok(if tokens == 0 { f64::NAN } else { total / tokens as f64 })
}

/// One optimiser step on a batch; returns the batch loss.
pub fn finetune_step(
    model: &mut ReportModel,
    images: &[&GrayImage],
    reports: &[Vec<usize>],
    opt: &mut Adam,
    lr: f64,
    freeze_encoder: bool,
) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, true);
    let loss = if freeze_encoder {
        let f = model.encoder.encode(&model.store, images)?.bind(&mut g);
        decoder_loss(&mut g, model, &p, &f, reports)?
    } else {
        teacher_forced_loss(&mut g, model, &p, images, reports)?
    };
    let v = finite_loss(g.value(loss).item(), "teacher-forced")?;
    g.backward(loss)?;
    let prefix = format!("{ENCODER_PREFIX}.");
    apply_grads(&mut model.store, &g, &p, opt, lr, |name| {
        !(freeze_encoder && name.starts_with(&prefix))
    })?;
    Ok(v)
}

fn checkpoint_config(cfg: &FinetuneConfig, vocab: &Vocab, pretrain_method: &str) -> String {
    let mut kv = cfg.to_kv();
    kv.set("pretrain_method", pretrain_method);
    kv.set("vocab", vocab.to_line());
    kv.to_text()
}

/// Trains on the training split with a fresh cosine cycle, scores the
/// validation split after every epoch and keeps the best snapshot.
pub fn finetune(ds: &Dataset, encoder_ckpt: Option<&Checkpoint>, cfg: &FinetuneConfig) -> Result<FinetuneOutput> {
    let train = ds.manifest.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let val = ds.manifest.indices(Split::Val);
    let vocab = Vocab::build(ds);
    let mut model = init_model(&vocab, cfg, encoder_ckpt)?;
    let method = encoder_ckpt
        .and_then(|c| c.config_value("method"))
        .unwrap_or("none")
        .to_string();
    let config = checkpoint_config(cfg, &vocab, &method);

    let encoded: Vec<Vec<usize>> = ds
        .manifest
        .records
        .iter()
        .map(|r| vocab.encode(&r.report))
        .collect();
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut opt = Adam::new(model.store.tensors(), cfg.optim.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);

    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order = train;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut lr = cfg.optim.lr_max;
        for chunk in order.chunks(cfg.batch_size) {
            lr = cosine_lr(step, total, cfg.optim.lr_max, cfg.optim.lr_min);
            let images: Vec<&GrayImage> = chunk.iter().map(|&i| &ds.images[i]).collect();
            let reports: Vec<Vec<usize>> = chunk.iter().map(|&i| encoded[i].clone()).collect();
            sum += finetune_step(&mut model, &images, &reports, &mut opt, lr, cfg.freeze_encoder)?;
            step += 1;
        }
        let train_loss = sum / per_epoch as f64;
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            finite_loss(evaluate_loss(&model, &vocab, ds, &val)?, "validation")?
        };
        log::info!("finetune {} epoch {epoch}: train {train_loss:.6} val {val_loss:.6}", cfg.decoder.kind);
        curve.push(EpochRecord { epoch, step, lr, train_loss, val_loss });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, Checkpoint::from_store(config.clone(), &model.store)));
        }
    }

    let (checkpoint, best_epoch) = match best {
        Some((_, epoch, ck)) => (ck, Some(epoch)),
        None => (Checkpoint::from_store(config, &model.store), None),
    };
    let (model, vocab) = load_model(&checkpoint)?;
    Ok(FinetuneOutput { model, vocab, checkpoint, curve, best_epoch })
}

/// Rebuilds a fine-tuned model and its vocabulary from a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<(ReportModel, Vocab)> {
    let kv = KvConfig::parse(&ckpt.config)?;
    let vocab = Vocab::from_line(
        kv.raw("vocab")
            .ok_or_else(|| Error::Config("checkpoint holds no vocabulary; is it a fine-tuned model?".into()))?,
    );
    let cfg = FinetuneConfig::from_kv(&kv, None, None)?;
    let mut model = ReportModel::new(cfg.encoder.clone(), cfg.decoder_config(vocab.len()), cfg.seed)?;
    let copied = model.store.load_prefix(&ckpt.params, "")?;
    if copied != ckpt.params.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters but the {} model has {copied}",
            ckpt.params.len(),
            cfg.decoder.kind
        )));
    }
    Ok((model, vocab))
}

/// One generated report alongside its reference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generation {
    pub id: String,
    pub generated: String,
    pub reference: String,
}

/// Greedy generation for every record of `split`, in manifest order.
pub fn generate_reports(model: &ReportModel, vocab: &Vocab, ds: &Dataset, split: Split) -> Result<Vec<Generation>> {
    let indices = ds.manifest.indices(split);
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let images: Vec<&GrayImage> = chunk.iter().map(|&i| &ds.images[i]).collect();
        let fm = model.encoder.encode(&model.store, &images)?;
        let ids = model.decoder.generate_greedy(&model.store, &fm, model.decoder.config().max_len)?;
        for (&i, seq) in chunk.iter().zip(ids) {
            let rec = &ds.manifest.records[i];
            out.push(Generation {
                id: rec.id.clone(),
                generated: vocab.decode(&seq),
                reference: rec.report.clone(),
            });
        }
    }
    Ok(out)
}

/// `id<TAB>generated<TAB>reference` lines.
pub fn format_generations(gens: &[Generation]) -> String {
    gens.iter()
        .map(|g| format!("{}\t{}\t{}\n", g.id, g.generated, g.reference))
        .collect()
}
