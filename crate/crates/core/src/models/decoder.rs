use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::encoder::{FeatureMap, Features};
use super::layers::{Linear, Norm};
use super::params::{fan_in_uniform, Bound, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Reserved token ids shared by every vocabulary.
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

/// Additive score for masked attention positions; `exp` of it underflows to 0.
const MASKED: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecoderKind {
    Transformer,
    Lstm,
    Gru,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 3] = [DecoderKind::Transformer, DecoderKind::Lstm, DecoderKind::Gru];

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderKind::Transformer => "transformer",
            DecoderKind::Lstm => "lstm",
            DecoderKind::Gru => "gru",
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(DecoderKind::Transformer),
            "lstm" => Ok(DecoderKind::Lstm),
            "gru" => Ok(DecoderKind::Gru),
            other => Err(Error::Config(format!(
                "unknown decoder `{other}` (expected transformer, lstm or gru)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Longest decoder input, BOS included.
    pub max_len: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    /// Dimension `d` of the encoder features.
    pub feature_dim: usize,
    /// Number of grid positions the encoder produces.
    pub grid_positions: usize,
}

impl DecoderConfig {
    pub fn new(kind: DecoderKind, vocab_size: usize) -> Self {
        Self {
            kind,
            vocab_size,
            embed_dim: 64,
            hidden_dim: 64,
            max_len: 48,
            heads: 4,
            layers: 2,
            ff_dim: 128,
            feature_dim: 64,
            grid_positions: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("decoder: {m}")));
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.max_len == 0 {
            return bad("vocab size, dims and max_len must be positive");
        }
        if self.feature_dim == 0 || self.grid_positions == 0 {
            return bad("feature dims must be positive");
        }
        if self.kind == DecoderKind::Transformer
            && (self.heads == 0 || self.layers == 0 || !self.embed_dim.is_multiple_of(self.heads))
        {
            return bad("transformer needs layers > 0 and heads dividing embed_dim");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl Attention {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        let mut lin = |s: &str| Linear::new(store, &format!("{name}.{s}"), dim, dim, 1.0, rng);
        Self { q: lin("q"), k: lin("k"), v: lin("v"), o: lin("o") }
    }

    fn heads_first(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let dh = s[2] / heads;
        let x = g.reshape(x, &[s[0], s[1], heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[s[0] * heads, s[1], dh])
    }

    /// Multi-head attention of `xq` `(B, Tq, D)` over `xkv` `(B, Tk, D)`.
    fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        xq: Var,
        xkv: Var,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let sq = g.shape(xq).to_vec();
        let (b, tq, dim) = (sq[0], sq[1], sq[2]);
        let tk = g.shape(xkv)[1];
        let dh = dim / heads;
        let q = self.q.forward_seq(g, p, xq)?;
        let k = self.k.forward_seq(g, p, xkv)?;
        let v = self.v.forward_seq(g, p, xkv)?;
        let q = Self::heads_first(g, q, heads)?;
        let k = Self::heads_first(g, k, heads)?;
        let v = Self::heads_first(g, v, heads)?;
        let scores = g.matmul_ex(q, k, false, true)?;
        let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        if causal {
            let mut mask = vec![0.0; b * heads * tq * tk];
            for m in mask.chunks_mut(tq * tk) {
                for i in 0..tq {
                    for j in (i + 1)..tk {
                        m[i * tk + j] = MASKED;
                    }
                }
            }
            let mask = g.constant(Tensor::new(&[b * heads, tq, tk], mask)?);
            scores = g.add(scores, mask)?;
        }
        let attn = g.softmax(scores);
        let ctx = g.matmul(attn, v)?;
        let ctx = g.reshape(ctx, &[b, heads, tq, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, tq, dim])?;
        self.o.forward_seq(g, p, ctx)
    }
}

#[derive(Clone, Copy, Debug)]
struct TransformerLayer {
    ln_self: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross_attn: Attention,
    ln_ff: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Clone, Debug)]
struct Transformer {
    embed: ParamId,
    pos: ParamId,
    memory: Linear,
    memory_pos: ParamId,
    layers: Vec<TransformerLayer>,
    ln_out: Norm,
    out: Linear,
}

#[derive(Clone, Debug)]
struct Recurrent {
    embed: ParamId,
    init: Linear,
    input: Linear,
    hidden: ParamId,
    /// Recurrent bias, GRU only (it sits inside the reset gate product).
    hidden_bias: Option<ParamId>,
    out: Linear,
}

#[derive(Clone, Debug)]
enum Inner {
    Transformer(Transformer),
    Recurrent(Recurrent),
}

/// Autoregressive report decoder `D`.
#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    inner: Inner,
}

fn embedding<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rows: usize, dim: usize, rng: &mut R) -> ParamId {
    store.add(name, fan_in_uniform(&[rows, dim], dim, 1.0, rng))
}

/// `ids` repeated `times` times.
fn tiled(ids: usize, times: usize) -> Vec<usize> {
    (0..times).flat_map(|_| 0..ids).collect()
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: DecoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let inner = match c.kind {
            DecoderKind::Transformer => {
                let dim = c.embed_dim;
                let embed = embedding(store, &format!("{prefix}.embed"), c.vocab_size, dim, rng);
                let pos = embedding(store, &format!("{prefix}.pos"), c.max_len, dim, rng);
                let memory = Linear::new(store, &format!("{prefix}.memory"), c.feature_dim, dim, 1.0, rng);
                let memory_pos = embedding(store, &format!("{prefix}.memory_pos"), c.grid_positions, dim, rng);
                let layers = (0..c.layers)
                    .map(|i| {
                        let n = format!("{prefix}.layer{i}");
                        TransformerLayer {
                            ln_self: Norm::new(store, &format!("{n}.ln_self"), dim),
                            self_attn: Attention::new(store, &format!("{n}.self_attn"), dim, rng),
                            ln_cross: Norm::new(store, &format!("{n}.ln_cross"), dim),
                            cross_attn: Attention::new(store, &format!("{n}.cross_attn"), dim, rng),
                            ln_ff: Norm::new(store, &format!("{n}.ln_ff"), dim),
                            ff1: Linear::new(store, &format!("{n}.ff1"), dim, c.ff_dim, std::f64::consts::SQRT_2, rng),
                            ff2: Linear::new(store, &format!("{n}.ff2"), c.ff_dim, dim, 1.0, rng),
                        }
                    })
                    .collect();
                let ln_out = Norm::new(store, &format!("{prefix}.ln_out"), dim);
                let out = Linear::new(store, &format!("{prefix}.out"), dim, c.vocab_size, 1.0, rng);
                Inner::Transformer(Transformer { embed, pos, memory, memory_pos, layers, ln_out, out })
            }
            DecoderKind::Lstm | DecoderKind::Gru => {
                let gates = if c.kind == DecoderKind::Lstm { 4 } else { 3 };
                let h = c.hidden_dim;
                let embed = embedding(store, &format!("{prefix}.embed"), c.vocab_size, c.embed_dim, rng);
                let init = Linear::new(store, &format!("{prefix}.init"), c.feature_dim, h, 1.0, rng);
                let input = Linear::new(store, &format!("{prefix}.input"), c.embed_dim, gates * h, 1.0, rng);
                let hidden = store.add(
                    format!("{prefix}.hidden.weight"),
                    fan_in_uniform(&[h, gates * h], h, 1.0, rng),
                );
                let hidden_bias = (c.kind == DecoderKind::Gru)
                    .then(|| store.add(format!("{prefix}.hidden.bias"), Tensor::zeros(&[gates * h])));
                let out = Linear::new(store, &format!("{prefix}.out"), h, c.vocab_size, 1.0, rng);
                Inner::Recurrent(Recurrent { embed, init, input, hidden, hidden_bias, out })
            }
        };
        Ok(Self { config, inner })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn kind(&self) -> DecoderKind {
        self.config.kind
    }

    fn check_tokens(&self, tokens: &[Vec<usize>]) -> Result<usize> {
        let t = tokens.first().map_or(0, Vec::len);
        if t == 0 || tokens.iter().any(|row| row.len() != t) {
            return Err(Error::InvalidArgument(
                "decoder input rows must be non-empty and of equal length".into(),
            ));
        }
        if t > self.config.max_len {
            return Err(Error::InvalidArgument(format!(
                "decoder input length {t} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().flatten().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::InvalidArgument(format!(
                "token id {bad} out of range for vocab size {}",
                self.config.vocab_size
            )));
        }
        Ok(t)
    }

    /// Next-token logits `(batch, T, vocab)` for `T`-token prefixes. Row `b`
    /// of `tokens` is decoded against batch element `b` of `features`.
    pub fn logits(&self, g: &mut Graph, p: &Bound, features: &Features, tokens: &[Vec<usize>]) -> Result<Var> {
        let t = self.check_tokens(tokens)?;
        let b = tokens.len();
        let fb = g.shape(features.pooled)[0];
        if fb != b {
            return Err(Error::shape("decoder_logits", &[fb], &[b]));
        }
        let flat: Vec<usize> = tokens.iter().flatten().copied().collect();
        match &self.inner {
            Inner::Transformer(m) => self.transformer_logits(g, p, m, features, &flat, b, t),
            Inner::Recurrent(m) => self.recurrent_logits(g, p, m, features, &flat, b, t),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn transformer_logits(
        &self,
        g: &mut Graph,
        p: &Bound,
        m: &Transformer,
        features: &Features,
        flat: &[usize],
        b: usize,
        t: usize,
    ) -> Result<Var> {
        let c = &self.config;
        let dim = c.embed_dim;
        let gs = g.shape(features.grid).to_vec();
        if gs.len() != 3 || gs[1] != c.grid_positions || gs[2] != c.feature_dim {
            return Err(Error::shape("decoder_logits", &gs, &[b, c.grid_positions, c.feature_dim]));
        }
        let mem = m.memory.forward_seq(g, p, features.grid)?;
        let mem_pos = g.gather_rows(p[m.memory_pos], &tiled(c.grid_positions, b))?;
        let mem_pos = g.reshape(mem_pos, &[b, c.grid_positions, dim])?;
        let mem = g.add(mem, mem_pos)?;

        let tok = g.gather_rows(p[m.embed], flat)?;
        let pos = g.gather_rows(p[m.pos], &tiled(t, b))?;
        let x = g.add(tok, pos)?;
        let mut x = g.reshape(x, &[b, t, dim])?;
        for layer in &m.layers {
            let h = layer.ln_self.forward(g, p, x)?;
            let h = layer.self_attn.forward(g, p, h, h, c.heads, true)?;
            x = g.add(x, h)?;
            let h = layer.ln_cross.forward(g, p, x)?;
            let h = layer.cross_attn.forward(g, p, h, mem, c.heads, false)?;
            x = g.add(x, h)?;
            let h = layer.ln_ff.forward(g, p, x)?;
            let h = layer.ff1.forward_seq(g, p, h)?;
            let h = g.relu(h);
            let h = layer.ff2.forward_seq(g, p, h)?;
            x = g.add(x, h)?;
        }
        let x = m.ln_out.forward(g, p, x)?;
        m.out.forward_seq(g, p, x)
    }

    #[allow(clippy::too_many_arguments)]
    fn recurrent_logits(
        &self,
        g: &mut Graph,
        p: &Bound,
        m: &Recurrent,
        features: &Features,
        flat: &[usize],
        b: usize,
        t: usize,
    ) -> Result<Var> {
        let c = &self.config;
        let hd = c.hidden_dim;
        let lstm = c.kind == DecoderKind::Lstm;
        let gates = if lstm { 4 } else { 3 };
        let ps = g.shape(features.pooled).to_vec();
        if ps.len() != 2 || ps[1] != c.feature_dim {
            return Err(Error::shape("decoder_logits", &ps, &[b, c.feature_dim]));
        }
        let h0 = m.init.forward(g, p, features.pooled)?;
        let mut h = g.tanh(h0);
        let mut cell = g.constant(Tensor::zeros(&[b, hd]));

        let emb = g.gather_rows(p[m.embed], flat)?;
        let xw = m.input.forward(g, p, emb)?;
        let xw = g.reshape(xw, &[b, t, gates * hd])?;
        let mut outputs = Vec::with_capacity(t);
        for step in 0..t {
            let xt = g.narrow(xw, 1, step, 1)?;
            let xt = g.reshape(xt, &[b, gates * hd])?;
            let mut hw = g.matmul(h, p[m.hidden])?;
            if let Some(bias) = m.hidden_bias {
                hw = g.add_bias(hw, p[bias], 1)?;
            }
            if lstm {
                let pre = g.add(xt, hw)?;
                let gate = |g: &mut Graph, k: usize| g.narrow(pre, 1, k * hd, hd);
                let i = gate(g, 0)?;
                let i = g.sigmoid(i);
                let f = gate(g, 1)?;
                let f = g.sigmoid(f);
                let u = gate(g, 2)?;
                let u = g.tanh(u);
                let o = gate(g, 3)?;
                let o = g.sigmoid(o);
                let keep = g.mul(f, cell)?;
                let write = g.mul(i, u)?;
                cell = g.add(keep, write)?;
                let squashed = g.tanh(cell);
                h = g.mul(o, squashed)?;
            } else {
                let xr = g.narrow(xt, 1, 0, hd)?;
                let xz = g.narrow(xt, 1, hd, hd)?;
                let xn = g.narrow(xt, 1, 2 * hd, hd)?;
                let hr = g.narrow(hw, 1, 0, hd)?;
                let hz = g.narrow(hw, 1, hd, hd)?;
                let hn = g.narrow(hw, 1, 2 * hd, hd)?;
                let r = g.add(xr, hr)?;
                let r = g.sigmoid(r);
                let z = g.add(xz, hz)?;
                let z = g.sigmoid(z);
                let rn = g.mul(r, hn)?;
                let n = g.add(xn, rn)?;
                let n = g.tanh(n);
                let diff = g.sub(h, n)?;
                let carry = g.mul(z, diff)?;
                h = g.add(n, carry)?;
            }
            outputs.push(g.reshape(h, &[b, 1, hd])?);
        }
        let seq = g.concat(&outputs, 1)?;
        m.out.forward_seq(g, p, seq)
    }

    /// Greedy decoding for every element of `features`. Returned sequences
    /// exclude BOS and the terminating EOS and hold at most `max_len` tokens.
    pub fn generate_greedy(&self, store: &ParamStore, features: &FeatureMap, max_len: usize) -> Result<Vec<Vec<usize>>> {
        let b = features.batch();
        let limit = max_len.min(self.config.max_len);
        let mut prefixes = vec![vec![BOS]; b];
        let mut done = vec![false; b];
        let mut out = vec![Vec::new(); b];
        for _ in 0..limit {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let f = features.bind(&mut g);
            let logits = self.logits(&mut g, &p, &f, &prefixes)?;
            let t = prefixes[0].len();
            let v = self.config.vocab_size;
            let data = g.value(logits).data();
            for (i, prefix) in prefixes.iter_mut().enumerate() {
                let row = &data[(i * t + t - 1) * v..(i * t + t) * v];
                let next = argmax(row);
                if !done[i] {
                    if next == EOS {
                        done[i] = true;
                    } else {
                        out[i].push(next);
                    }
                }
                prefix.push(next);
            }
            if done.iter().all(|&d| d) || t == self.config.max_len {
                break;
            }
        }
        Ok(out)
    }
}

/// Index of the first maximum.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
