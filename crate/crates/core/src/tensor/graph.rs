use super::kernels::{col2im, gemm, im2col, permute_into, split_axis, ConvGeom, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding mode for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding.
    Valid,
    /// `kernel / 2` zeros on every side; output extent is `ceil(in / stride)`
    /// for odd kernels.
    Same,
}

impl Padding {
    fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => kernel / 2,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, stride: usize, pad: usize },
    AddBias { x: Var, b: Var, axis: usize },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanPool(Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    SelectPerRow { x: Var, idx: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, count: usize },
    L2Normalize(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Mse(Var, Var),
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Rows with a Euclidean norm below this are rejected by `l2_normalize`.
pub const MIN_NORM: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Reverse-mode gradient tape.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and `backward` walks it once in reverse. A graph is
/// built for a single forward/backward pass and then dropped.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Leaves with `requires_grad` receive a gradient on
    /// every backward pass (zeros when they do not reach the loss).
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a * b^T`; for row-vector sets this is the inner-product similarity
    /// matrix.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    /// Inner-product similarity between every row of `a` and every row of `b`.
    pub fn similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_nt(a, b)
    }

    /// Matrix product with optional transposition of either operand. Rank-3
    /// operands are multiplied batch-wise along their leading axis.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = mm_dims(&sa, &sb, ta, tb).ok_or_else(|| Error::shape("matmul", &sa, &sb))?;
        let MmDims { batch, m, k, n } = dims;
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for bi in 0..batch {
            gemm(
                MatRef::new(&da[bi * m * k..(bi + 1) * m * k], m, k, ta),
                MatRef::new(&db[bi * k * n..(bi + 1) * k * n], k, n, tb),
                0.0,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        Ok(self.push(shape, out, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    /// 2-D convolution without bias. `x` is `(batch, channels, h, w)`, `w` is
    /// `(out_channels, channels, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let pad = padding.amount(sw[2]);
        let g = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, pad)
            .ok_or_else(|| Error::shape("conv2d", &sx, &sw))?;
        let (batch, out_c) = (sx[0], sw[0]);
        let (plen, olen) = (g.patch_len(), g.out_len());
        let ld = batch * olen;
        let cols = self.conv_cols(x, &g, batch);
        let mut all = vec![0.0; out_c * ld];
        gemm(
            MatRef::new(self.data(w), out_c, plen, false),
            MatRef::new(&cols, plen, ld, false),
            0.0,
            &mut all,
        );
        let mut out = vec![0.0; batch * out_c * olen];
        for o in 0..out_c {
            for bi in 0..batch {
                out[(bi * out_c + o) * olen..(bi * out_c + o + 1) * olen]
                    .copy_from_slice(&all[o * ld + bi * olen..o * ld + (bi + 1) * olen]);
            }
        }
        Ok(self.push(
            vec![batch, out_c, g.out_h, g.out_w],
            out,
            Op::Conv2d { x, w, stride, pad },
            &[x, w],
        ))
    }

    fn conv_cols(&self, x: Var, g: &ConvGeom, batch: usize) -> Vec<f64> {
        let olen = g.out_len();
        let ld = batch * olen;
        let mut cols = vec![0.0; g.patch_len() * ld];
        let xd = self.data(x);
        for bi in 0..batch {
            im2col(&xd[bi * g.image_len()..(bi + 1) * g.image_len()], g, &mut cols, ld, bi * olen);
        }
        cols
    }

    /// Transposed convolution (the adjoint of `conv2d`). `x` is
    /// `(batch, in_channels, h, w)`, `w` is `(in_channels, out_channels, kh, kw)`;
    /// output extent is `(h - 1) * stride - 2 * pad + kh`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || stride == 0 {
            return Err(Error::shape("conv_transpose2d", &sx, &sw));
        }
        let (batch, in_c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let out_c = sw[1];
        let out_h = ((h - 1) * stride + sw[2]).checked_sub(2 * pad);
        let out_w = ((wd - 1) * stride + sw[3]).checked_sub(2 * pad);
        let g = match (out_h, out_w) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => {
                ConvGeom::new(out_c, oh, ow, sw[2], sw[3], stride, pad)
            }
            _ => None,
        }
        .filter(|g| g.out_h == h && g.out_w == wd)
        .ok_or_else(|| Error::shape("conv_transpose2d", &sx, &sw))?;
        let hw = h * wd;
        let ld = batch * hw;
        let xall = batch_major_to_channel_major(self.data(x), batch, in_c, hw);
        let mut cols = vec![0.0; g.patch_len() * ld];
        gemm(
            MatRef::new(self.data(w), in_c, g.patch_len(), false).t(),
            MatRef::new(&xall, in_c, ld, false),
            0.0,
            &mut cols,
        );
        let mut out = vec![0.0; batch * g.image_len()];
        for bi in 0..batch {
            col2im(
                &cols,
                &g,
                ld,
                bi * hw,
                &mut out[bi * g.image_len()..(bi + 1) * g.image_len()],
            );
        }
        Ok(self.push(
            vec![batch, out_c, g.height, g.width],
            out,
            Op::ConvTranspose2d { x, w, stride, pad },
            &[x, w],
        ))
    }

    /// Adds vector `b` along `axis` of `x` (e.g. a per-channel or per-feature
    /// bias).
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if axis >= sx.len() || sb.iter().product::<usize>() != sx[axis] || sb.len() != 1 {
            return Err(Error::shape("add_bias", &sx, &sb));
        }
        let (outer, dim, inner) = split_axis(&sx, axis);
        let mut out = self.data(x).to_vec();
        let bd = self.data(b);
        for o in 0..outer {
            for (d, &bv) in bd.iter().enumerate().take(dim) {
                let base = (o * dim + d) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        Ok(self.push(sx, out, Op::AddBias { x, b, axis }, &[x, b]))
    }

    // ---------------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------------

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        self.push(shape, out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(name, sa, sb));
        }
        let shape = sa.to_vec();
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(shape, out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    // ---------------------------------------------------------------------
    // Reductions
    // ---------------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = sorted_sum(self.data(x).iter().copied());
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = sorted_sum(d.iter().copied()) / d.len() as f64;
        self.push(Vec::new(), vec![s], Op::Mean(x), &[x])
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x);
        let d = *shape.last().expect("tensor rank >= 1");
        let out_shape = shape[..shape.len() - 1].to_vec();
        let out = self.data(x).chunks(d).map(|r| r.iter().sum()).collect();
        self.push(out_shape, out, Op::SumLast(x), &[x])
    }

    /// Spatial mean of a `(batch, channels, h, w)` tensor, giving
    /// `(batch, channels)`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("mean_pool", &s, &[0, 0, 0, 0]));
        }
        let hw = s[2] * s[3];
        let out = self
            .data(x)
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push(vec![s[0], s[1]], out, Op::MeanPool(x), &[x]))
    }

    // ---------------------------------------------------------------------
    // Shape manipulation
    // ---------------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        if shape.iter().product::<usize>() != sx.iter().product::<usize>() || shape.contains(&0) {
            return Err(Error::shape("reshape", sx, shape));
        }
        let out = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        let valid = axes.len() == sx.len()
            && axes.iter().all(|&a| a < sx.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::shape("permute", &sx, axes));
        }
        let mut out = vec![0.0; self.data(x).len()];
        permute_into(self.data(x), &sx, axes, &mut out);
        let shape = axes.iter().map(|&a| sx[a]).collect();
        Ok(self.push(
            shape,
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[0, 0]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| {
                Error::InvalidArgument("concat of zero tensors".into())
            })?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || len == 0 || start + len > sx[axis] {
            return Err(Error::shape("narrow", &sx, &[axis, start, len]));
        }
        let (outer, dim, inner) = split_axis(&sx, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        let d = self.data(x);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        Ok(self.push(shape, out, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Row lookup into a `(rows, dim)` table, giving `(ids.len(), dim)`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::shape("gather_rows", &st, &[ids.len()]));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= st[0]) {
            return Err(Error::InvalidArgument(format!(
                "gather_rows: id {bad} out of range for table with {} rows",
                st[0]
            )));
        }
        let dim = st[1];
        let d = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&d[i * dim..(i + 1) * dim]);
        }
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Picks `x[r, idx[r]]` from each row of a `(rows, cols)` tensor.
    pub fn select_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || idx.len() != sx[0] || idx.iter().any(|&i| i >= sx[1]) {
            return Err(Error::shape("select_per_row", &sx, &[idx.len()]));
        }
        let d = self.data(x);
        let out = idx.iter().enumerate().map(|(r, &c)| d[r * sx[1] + c]).collect();
        Ok(self.push(
            vec![sx[0]],
            out,
            Op::SelectPerRow {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    // ---------------------------------------------------------------------
    // Normalisation and losses
    // ---------------------------------------------------------------------

    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        let mut out = self.data(x).to_vec();
        out.chunks_mut(d).for_each(softmax_in_place);
        self.push(shape, out, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(d) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(shape, out, Op::LogSoftmax(x), &[x])
    }

    /// Mean cross-entropy of `(rows, classes)` logits against per-row
    /// targets; rows with a `None` target are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("cross_entropy", &s, &[targets.len()]));
        }
        let classes = s[1];
        if let Some(t) = targets.iter().flatten().find(|&&t| t >= classes) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: target {t} out of range for {classes} classes"
            )));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::InvalidArgument(
                "cross_entropy: no non-ignored targets".into(),
            ));
        }
        let d = self.data(logits);
        let total = sorted_sum(
            targets
                .iter()
                .enumerate()
                .filter_map(|(r, t)| t.map(|t| (r, t)))
                .map(|(r, t)| {
                    let row = &d[r * classes..(r + 1) * classes];
                    log_sum_exp(row) - row[t]
                }),
        );
        Ok(self.push(
            Vec::new(),
            vec![total / count as f64],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                count,
            },
            &[logits],
        ))
    }

    /// Normalises every slice along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        let mut out = self.data(x).to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm >= MIN_NORM) {
                return Err(Error::Degenerate {
                    op: "l2_normalize",
                    detail: format!("row {r} has norm {norm:e}"),
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(self.push(shape, out, Op::L2Normalize(x), &[x]))
    }

    /// Layer normalisation over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(d) {
            let (mean, rstd) = moments(row);
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[i] + b[i];
            }
        }
        Ok(self.push(shape, out, Op::LayerNorm { x, gamma, beta }, &[x, gamma, beta]))
    }

    /// Mean squared error between same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("mse", sa, sb));
        }
        let (da, db) = (self.data(a), self.data(b));
        let s = da.iter().zip(db).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / da.len() as f64;
        Ok(self.push(Vec::new(), vec![s], Op::Mse(a, b), &[a, b]))
    }

    /// Mean binary cross-entropy of logits against targets in `[0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let s = self.shape(logits);
        if s != targets.shape() {
            return Err(Error::shape("bce_with_logits", s, targets.shape()));
        }
        let d = self.data(logits);
        let total: f64 = d
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let value = total / d.len() as f64;
        Ok(self.push(
            Vec::new(),
            vec![value],
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            &[logits],
        ))
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Accumulates d(loss)/d(node) for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            backward_node(nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(nodes)
            .map(|(g, n)| match g {
                Some(g) => Some(Tensor::from_parts(n.value.shape().to_vec(), g)),
                None if n.requires_grad => Some(Tensor::zeros(n.value.shape())),
                None => None,
            })
            .collect();
        Ok(())
    }
}

struct MmDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn mm_dims(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> Option<MmDims> {
    if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
        return None;
    }
    let r = sa.len();
    let batch = if r == 3 {
        if sa[0] != sb[0] {
            return None;
        }
        sa[0]
    } else {
        1
    };
    let (m, k) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
    let (k2, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
    (k == k2).then_some(MmDims { batch, m, k, n })
}

fn batch_major_to_channel_major(src: &[f64], batch: usize, ch: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for c in 0..ch {
            out[c * batch * hw + b * hw..c * batch * hw + (b + 1) * hw]
                .copy_from_slice(&src[(b * ch + c) * hw..(b * ch + c + 1) * hw]);
        }
    }
    out
}

fn channel_major_to_batch_major(src: &[f64], batch: usize, ch: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for c in 0..ch {
            out[(b * ch + c) * hw..(b * ch + c + 1) * hw]
                .copy_from_slice(&src[c * batch * hw + b * hw..c * batch * hw + (b + 1) * hw]);
        }
    }
    out
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Sum taken in ascending order, so the result does not depend on the order
/// of `values`.
pub(crate) fn sorted_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_unstable_by(f64::total_cmp);
    v.iter().sum()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + sorted_sum(row.iter().map(|v| (v - max).exp())).ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Returns the gradient buffer of `v`, allocating zeros on first touch, or
/// `None` when `v` does not take part in differentiation.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn backward_node(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[i];
    let out = node.value.data();
    let val = |v: Var| nodes[v.0].value.data();
    let shape = |v: Var| nodes[v.0].value.shape();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            let dims = mm_dims(shape(a), shape(b), ta, tb).expect("validated in forward");
            let MmDims { batch, m, k, n } = dims;
            for bi in 0..batch {
                let gc = MatRef::new(&g[bi * m * n..(bi + 1) * m * n], m, n, false);
                let av = MatRef::new(&val(a)[bi * m * k..(bi + 1) * m * k], m, k, ta);
                let bv = MatRef::new(&val(b)[bi * k * n..(bi + 1) * k * n], k, n, tb);
                if let Some(ga) = slot(nodes, grads, a) {
                    let ga = &mut ga[bi * m * k..(bi + 1) * m * k];
                    if ta {
                        gemm(bv, gc.t(), 1.0, ga);
                    } else {
                        gemm(gc, bv.t(), 1.0, ga);
                    }
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    let gb = &mut gb[bi * k * n..(bi + 1) * k * n];
                    if tb {
                        gemm(gc.t(), av, 1.0, gb);
                    } else {
                        gemm(av.t(), gc, 1.0, gb);
                    }
                }
            }
        }
        &Op::Conv2d { x, w, stride, pad } => {
            let (sx, sw) = (shape(x), shape(w));
            let geom = ConvGeom::new(sx[1], sx[2], sx[3], sw[2], sw[3], stride, pad).unwrap();
            let (batch, out_c) = (sx[0], sw[0]);
            let (plen, olen) = (geom.patch_len(), geom.out_len());
            let ld = batch * olen;
            let gall = batch_major_to_channel_major(g, batch, out_c, olen);
            let gall = MatRef::new(&gall, out_c, ld, false);
            if nodes[w.0].requires_grad {
                let mut cols = vec![0.0; plen * ld];
                let xd = val(x);
                for bi in 0..batch {
                    let img = &xd[bi * geom.image_len()..(bi + 1) * geom.image_len()];
                    im2col(img, &geom, &mut cols, ld, bi * olen);
                }
                let gw = slot(nodes, grads, w).unwrap();
                gemm(gall, MatRef::new(&cols, plen, ld, false).t(), 1.0, gw);
            }
            if nodes[x.0].requires_grad {
                let mut dcols = vec![0.0; plen * ld];
                gemm(MatRef::new(val(w), out_c, plen, false).t(), gall, 0.0, &mut dcols);
                let gx = slot(nodes, grads, x).unwrap();
                for bi in 0..batch {
                    let img = &mut gx[bi * geom.image_len()..(bi + 1) * geom.image_len()];
                    col2im(&dcols, &geom, ld, bi * olen, img);
                }
            }
        }
        &Op::ConvTranspose2d { x, w, stride, pad } => {
            let (sx, sw) = (shape(x), shape(w));
            let (batch, in_c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
            let os = node.value.shape();
            let geom = ConvGeom::new(sw[1], os[2], os[3], sw[2], sw[3], stride, pad).unwrap();
            let ld = batch * hw;
            let plen = geom.patch_len();
            let mut dcols = vec![0.0; plen * ld];
            for bi in 0..batch {
                let img = &g[bi * geom.image_len()..(bi + 1) * geom.image_len()];
                im2col(img, &geom, &mut dcols, ld, bi * hw);
            }
            let dcols_ref = MatRef::new(&dcols, plen, ld, false);
            if nodes[w.0].requires_grad {
                let xall = batch_major_to_channel_major(val(x), batch, in_c, hw);
                let gw = slot(nodes, grads, w).unwrap();
                gemm(MatRef::new(&xall, in_c, ld, false), dcols_ref.t(), 1.0, gw);
            }
            if nodes[x.0].requires_grad {
                let mut dxall = vec![0.0; in_c * ld];
                gemm(MatRef::new(val(w), in_c, plen, false), dcols_ref, 0.0, &mut dxall);
                let dx = channel_major_to_batch_major(&dxall, batch, in_c, hw);
                add_into(slot(nodes, grads, x).unwrap(), &dx);
            }
        }
        &Op::AddBias { x, b, axis } => {
            if let Some(gx) = slot(nodes, grads, x) {
                add_into(gx, g);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                let (outer, dim, inner) = split_axis(node.value.shape(), axis);
                for o in 0..outer {
                    for (d, gbd) in gb.iter_mut().enumerate().take(dim) {
                        let base = (o * dim + d) * inner;
                        *gbd += g[base..base + inner].iter().sum::<f64>();
                    }
                }
            }
        }
        &Op::Relu(x) => {
            let xv = val(x);
            if let Some(gx) = slot(nodes, grads, x) {
                for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    if xi > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        &Op::Sigmoid(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                for ((d, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                    *d += gi * y * (1.0 - y);
                }
            }
        }
        &Op::Tanh(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                for ((d, &gi), &y) in gx.iter_mut().zip(g).zip(out) {
                    *d += gi * (1.0 - y * y);
                }
            }
        }
        &Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, grads, a) {
                add_into(ga, g);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                add_into(gb, g);
            }
        }
        &Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, a) {
                add_into(ga, g);
            }
            if let Some(gb) = slot(nodes, grads, b) {
                gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            if let Some(ga) = slot(nodes, grads, a) {
                for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                    *d += gi * y;
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for ((d, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                    *d += gi * x;
                }
            }
        }
        &Op::Scale(x, s) => {
            if let Some(gx) = slot(nodes, grads, x) {
                gx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * s);
            }
        }
        &Op::AddScalar(x) | &Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                add_into(gx, g);
            }
        }
        &Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                let s = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|d| *d += s);
            }
        }
        &Op::SumLast(x) => {
            let d = *shape(x).last().unwrap();
            if let Some(gx) = slot(nodes, grads, x) {
                for (row, &gi) in gx.chunks_mut(d).zip(g) {
                    row.iter_mut().for_each(|v| *v += gi);
                }
            }
        }
        &Op::MeanPool(x) => {
            let s = shape(x);
            let hw = s[2] * s[3];
            if let Some(gx) = slot(nodes, grads, x) {
                for (chunk, &gi) in gx.chunks_mut(hw).zip(g) {
                    let v = gi / hw as f64;
                    chunk.iter_mut().for_each(|d| *d += v);
                }
            }
        }
        Op::Permute { x, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let mut back = vec![0.0; g.len()];
            permute_into(g, node.value.shape(), &inverse, &mut back);
            if let Some(gx) = slot(nodes, grads, *x) {
                add_into(gx, &back);
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(node.value.shape(), *axis);
            let mut offset = 0;
            for &v in xs {
                let len = shape(v)[*axis];
                if let Some(gv) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        add_into(&mut gv[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                }
                offset += len;
            }
        }
        &Op::Narrow { x, axis, start } => {
            let (outer, dim, inner) = split_axis(shape(x), axis);
            let len = node.value.shape()[axis];
            if let Some(gx) = slot(nodes, grads, x) {
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    add_into(&mut gx[dst..dst + len * inner], &g[src..src + len * inner]);
                }
            }
        }
        Op::GatherRows { table, ids } => {
            let dim = shape(*table)[1];
            if let Some(gt) = slot(nodes, grads, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                }
            }
        }
        Op::SelectPerRow { x, idx } => {
            let cols = shape(*x)[1];
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * cols + c] += g[r];
                }
            }
        }
        &Op::Softmax(x) => {
            let d = *shape(x).last().unwrap();
            if let Some(gx) = slot(nodes, grads, x) {
                for ((gxr, gr), yr) in gx.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((dst, &gi), &y) in gxr.iter_mut().zip(gr).zip(yr) {
                        *dst += y * (gi - dot);
                    }
                }
            }
        }
        &Op::LogSoftmax(x) => {
            let d = *shape(x).last().unwrap();
            if let Some(gx) = slot(nodes, grads, x) {
                for ((gxr, gr), yr) in gx.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                    let total: f64 = gr.iter().sum();
                    for ((dst, &gi), &y) in gxr.iter_mut().zip(gr).zip(yr) {
                        *dst += gi - y.exp() * total;
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            count,
        } => {
            let classes = shape(*logits)[1];
            let lv = val(*logits);
            let scale = g[0] / *count as f64;
            if let Some(gl) = slot(nodes, grads, *logits) {
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let row = &lv[r * classes..(r + 1) * classes];
                    let mut p = row.to_vec();
                    softmax_in_place(&mut p);
                    p[t] -= 1.0;
                    add_scaled(&mut gl[r * classes..(r + 1) * classes], &p, scale);
                }
            }
        }
        &Op::L2Normalize(x) => {
            let d = *shape(x).last().unwrap();
            let xv = val(x);
            if let Some(gx) = slot(nodes, grads, x) {
                for (((gxr, gr), yr), xr) in gx
                    .chunks_mut(d)
                    .zip(g.chunks(d))
                    .zip(out.chunks(d))
                    .zip(xv.chunks(d))
                {
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((dst, &gi), &y) in gxr.iter_mut().zip(gr).zip(yr) {
                        *dst += (gi - y * dot) / norm;
                    }
                }
            }
        }
        &Op::LayerNorm { x, gamma, beta } => {
            let d = *shape(x).last().unwrap();
            let (xv, gv) = (val(x), val(gamma));
            let rows = xv.len() / d;
            let mut dx = vec![0.0; xv.len()];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            let mut xhat = vec![0.0; d];
            let mut dxhat = vec![0.0; d];
            for r in 0..rows {
                let xr = &xv[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let (mean, rstd) = moments(xr);
                for j in 0..d {
                    xhat[j] = (xr[j] - mean) * rstd;
                    dxhat[j] = gr[j] * gv[j];
                    dgamma[j] += gr[j] * xhat[j];
                    dbeta[j] += gr[j];
                }
                let m1 = dxhat.iter().sum::<f64>() / d as f64;
                let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for j in 0..d {
                    dx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            if let Some(gx) = slot(nodes, grads, x) {
                add_into(gx, &dx);
            }
            if let Some(gg) = slot(nodes, grads, gamma) {
                add_into(gg, &dgamma);
            }
            if let Some(gb) = slot(nodes, grads, beta) {
                add_into(gb, &dbeta);
            }
        }
        &Op::Mse(a, b) => {
            let (av, bv) = (val(a), val(b));
            let s = 2.0 * g[0] / av.len() as f64;
            if let Some(ga) = slot(nodes, grads, a) {
                for ((d, x), y) in ga.iter_mut().zip(av).zip(bv) {
                    *d += s * (x - y);
                }
            }
            if let Some(gb) = slot(nodes, grads, b) {
                for ((d, x), y) in gb.iter_mut().zip(av).zip(bv) {
                    *d -= s * (x - y);
                }
            }
        }
        Op::BceWithLogits { logits, targets } => {
            let lv = val(*logits);
            let s = g[0] / lv.len() as f64;
            if let Some(gl) = slot(nodes, grads, *logits) {
                for ((d, &x), &t) in gl.iter_mut().zip(lv).zip(targets) {
                    *d += s * (sigmoid(x) - t);
                }
            }
        }
    }
}

fn add_scaled(dst: &mut [f64], src: &[f64], s: f64) {
    dst.iter_mut().zip(src).for_each(|(d, v)| *d += v * s);
}
