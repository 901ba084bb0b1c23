use rand::Rng;

use super::params::{fan_in_uniform, Bound, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Graph, Padding, Tensor, Var};

/// Affine map `x W + b` on `[N, in]` rows.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[fan_in, fan_out], fan_in, gain, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        g.add_bias(y, p[self.bias], 1)
    }

    /// Applies the map to the last axis of a rank-3 input.
    pub fn forward_seq(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
        let y = self.forward(g, p, flat)?;
        g.reshape(y, &[s[0], s[1], self.fan_out])
    }
}

/// Square convolution with per-channel bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[out_c, in_c, kernel, kernel], fan_in, gain, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_c]));
        Self { weight, bias, stride, padding: Padding::Same }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[self.weight], self.stride, self.padding)?;
        g.add_bias(y, p[self.bias], 1)
    }
}

/// Layer normalisation over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[dim]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta])
    }
}
