//! Helpers shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::models::{Bound, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Largest relative error between analytic parameter gradients and central
/// differences, over `per_param` random entries of every parameter.
pub fn param_grad_error<F>(store: &ParamStore, f: F, per_param: usize, seed: u64) -> f64
where
    F: Fn(&mut Graph, &Bound) -> crate::Result<Var>,
{
    let mut g = Graph::new();
    let p = store.bind(&mut g, true);
    let loss = f(&mut g, &p).unwrap();
    g.backward(loss).unwrap();
    let grads: Vec<Tensor> = p.vars().iter().map(|&v| g.grad(v).unwrap().clone()).collect();

    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let p = s.bind(&mut g, false);
        let l = f(&mut g, &p).unwrap();
        g.value(l).item()
    };
    let h = 1e-6;
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for (i, grad) in grads.iter().enumerate() {
        for _ in 0..per_param.min(grad.numel()) {
            let j = r.gen_range(0..grad.numel());
            let orig = probe.tensors()[i].data()[j];
            probe.tensors_mut()[i].data_mut()[j] = orig + h;
            let up = eval(&probe);
            probe.tensors_mut()[i].data_mut()[j] = orig - h;
            let down = eval(&probe);
            probe.tensors_mut()[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.data()[j];
            // Floor covers gradients that are exactly zero, such as attention
            // key biases, where only finite-difference noise remains.
            let denom = analytic.abs().max(numeric.abs()).max(1e-5);
            let rel = (analytic - numeric).abs() / denom;
            if rel > 1e-4 {
                eprintln!("{} [{j}]: analytic {analytic:e} numeric {numeric:e}", store.names()[i]);
            }
            worst = worst.max(rel);
        }
    }
    worst
}

/// Adds noise to every parameter so that no relu input sits exactly at zero.
pub fn jitter(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed ^ 0x5EED);
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.2..0.2));
    }
}
