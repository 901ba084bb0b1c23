use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Compares the analytic gradient of a scalar function against central
/// finite differences and returns the worst relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over all
/// coordinates of `point`.
///
/// `f` receives a fresh graph and the leaf holding the (possibly perturbed)
/// point, and must return a one-element result.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = g.grad(x).expect("leaf requires grad").clone();

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        Ok(g.value(y).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
