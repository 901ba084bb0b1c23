use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::augment::{GrayImage, LungMask};
use crate::synth::generate_dataset;
use crate::tensor::grad_check;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit_rows(rows: usize, dim: usize, seed: u64) -> Tensor {
    let mut t = Tensor::randn(&[rows, dim], 1.0, &mut rng(seed));
    for row in t.data_mut().chunks_mut(dim) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    t
}

fn loss_value(z: &Tensor, pairs: &[usize], cfg: &LossConfig) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(z.clone());
    let l = nt_xent_loss(&mut g, v, pairs, cfg)?;
    Ok(g.value(l).item())
}

/// Direct evaluation of the loss from its definition.
fn oracle(z: &Tensor, pairs: &[usize], tau: f64, literal: bool) -> f64 {
    let rows = z.shape()[0];
    let dim = z.shape()[1];
    let dot = |a: usize, b: usize| -> f64 {
        (0..dim).map(|c| z.data()[a * dim + c] * z.data()[b * dim + c]).sum()
    };
    let mut total = 0.0;
    for i in 0..rows {
        let num = (dot(i, pairs[i]) / tau).exp();
        let den: f64 = (0..rows).filter(|&k| k != i).map(|k| (dot(i, k) / tau).exp()).sum();
        total += if literal { num / den } else { (num / den).ln() };
    }
    if literal {
        -total
    } else {
        -total / rows as f64
    }
}

#[test]
fn temperature_default() {
    assert_eq!(LossConfig::default().temperature, 0.5);
    assert_eq!(TEMPERATURE, 0.5);
}

#[test]
fn single_pair_loss_is_zero() {
    for seed in 0..20 {
        let z = unit_rows(2, 5, seed);
        let l = loss_value(&z, &pairing(1), &LossConfig::default()).unwrap();
        assert!(l.abs() <= 1e-12, "seed {seed}: {l}");
    }
}

#[test]
fn orthogonal_pairs_match_direct_formula() {
    let z = Tensor::new(&[4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let pairs = [1, 0, 3, 2];
    let cfg = LossConfig::default();
    let l = loss_value(&z, &pairs, &cfg).unwrap();
    // Row 0: exp(2) / (exp(2) + 2), identical for every row.
    let hand = -((2f64).exp() / ((2f64).exp() + 2.0)).ln();
    assert!((l - hand).abs() <= 1e-9);
    assert!((l - oracle(&z, &pairs, 0.5, false)).abs() <= 1e-9);
}

#[test]
fn literal_mode_matches_printed_formula() {
    for seed in 0..10 {
        let z = unit_rows(8, 6, seed);
        let pairs = pairing(4);
        let cfg = LossConfig { temperature: 0.5, literal_eq1: true };
        let l = loss_value(&z, &pairs, &cfg).unwrap();
        assert!((l - oracle(&z, &pairs, 0.5, true)).abs() <= 1e-12);
    }
    let z = Tensor::new(&[4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let l = loss_value(&z, &[1, 0, 3, 2], &LossConfig { temperature: 0.5, literal_eq1: true }).unwrap();
    let e2 = (2f64).exp();
    assert!((l + 4.0 * e2 / (e2 + 2.0)).abs() <= 1e-12);
}

#[test]
fn default_mode_matches_oracle_on_random_batches() {
    for seed in 0..20 {
        let n = 1 + (seed as usize % 5);
        let z = unit_rows(2 * n, 7, seed);
        let pairs = pairing(n);
        for tau in [0.1, 0.5, 2.0] {
            let cfg = LossConfig { temperature: tau, literal_eq1: false };
            let l = loss_value(&z, &pairs, &cfg).unwrap();
            assert!((l - oracle(&z, &pairs, tau, false)).abs() <= 1e-9);
        }
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let cfg = LossConfig::default();
    let mut z = unit_rows(4, 3, 1);
    z.data_mut()[0] *= 1.0 + 1e-5;
    assert!(loss_value(&z, &pairing(2), &cfg).is_err());
    let z = unit_rows(3, 3, 1);
    assert!(loss_value(&z, &[1, 0, 2], &cfg).is_err());
    let z = unit_rows(4, 3, 1);
    assert!(loss_value(&z, &[0, 1, 2, 3], &cfg).is_err());
    assert!(loss_value(&z, &[1, 2, 3, 0], &cfg).is_err());
    let bad_tau = LossConfig { temperature: 0.0, literal_eq1: false };
    assert!(loss_value(&z, &pairing(2), &bad_tau).is_err());
}

#[test]
fn small_temperature_drives_ideal_batch_to_zero() {
    let z = Tensor::new(&[4, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
    let cfg = LossConfig { temperature: 0.01, literal_eq1: false };
    let l = loss_value(&z, &[1, 0, 3, 2], &cfg).unwrap();
    assert!((0.0..1e-40).contains(&l));
}

#[test]
fn raising_positive_similarity_lowers_loss() {
    let cfg = LossConfig::default();
    let mut last = f64::INFINITY;
    for k in 0..=10 {
        let theta = std::f64::consts::FRAC_PI_2 * (1.0 - k as f64 / 10.0);
        // a0 = e1, b0 = cos e1 + sin e2; a1 = e3, b1 = e4. Every negative
        // similarity is 0 whatever theta is.
        let z = Tensor::new(
            &[4, 4],
            vec![
                1.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, //
                theta.cos(), theta.sin(), 0.0, 0.0, //
                0.0, 0.0, 0.0, 1.0,
            ],
        )
        .unwrap();
        let l = loss_value(&z, &pairing(2), &cfg).unwrap();
        assert!(l < last, "step {k}: {l} !< {last}");
        last = l;
    }
}

proptest! {
    #[test]
    fn loss_is_permutation_invariant(n in 1usize..6, dim in 2usize..6, seed in 0u64..1000) {
        let z = unit_rows(2 * n, dim, seed);
        let pairs = pairing(n);
        let mut perm: Vec<usize> = (0..2 * n).collect();
        perm.shuffle(&mut rng(seed + 1));
        // Row i of the original becomes row perm[i].
        let mut zp = Tensor::zeros(&[2 * n, dim]);
        let mut pp = vec![0; 2 * n];
        for i in 0..2 * n {
            zp.data_mut()[perm[i] * dim..(perm[i] + 1) * dim]
                .copy_from_slice(&z.data()[i * dim..(i + 1) * dim]);
            pp[perm[i]] = perm[pairs[i]];
        }
        let cfg = LossConfig::default();
        prop_assert_eq!(loss_value(&z, &pairs, &cfg).unwrap(), loss_value(&zp, &pp, &cfg).unwrap());
    }
}

#[test]
fn nt_xent_gradients_match_finite_differences() {
    for literal in [false, true] {
        for seed in 0..20 {
            let n = 1 + seed as usize % 4;
            let point = Tensor::randn(&[2 * n, 5], 1.0, &mut rng(seed));
            let cfg = LossConfig { temperature: 0.5, literal_eq1: literal };
            let err = grad_check(
                |g, x| {
                    let z = g.l2_normalize(x)?;
                    nt_xent_loss(g, z, &pairing(n), &cfg)
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "literal={literal} seed {seed}: {err}");
        }
    }
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        image_size: 16,
        stem_channels: 4,
        blocks: vec![(8, 2), (8, 2)],
    }
}

/// Images of two kinds: a bright left half or a bright right half, with
/// noise.
fn two_clusters(n: usize, seed: u64) -> (Vec<GrayImage>, Vec<LungMask>) {
    let mut r = rng(seed);
    let images = (0..n)
        .map(|i| {
            let px = (0..256)
                .map(|p| {
                    let left = (p % 16) < 8;
                    let base = if left == (i % 2 == 0) { 0.8 } else { 0.2 };
                    (base + r.gen_range(-0.1..0.1f64)).clamp(0.0, 1.0)
                })
                .collect();
            GrayImage::new(16, 16, px).unwrap()
        })
        .collect();
    (images, vec![LungMask::full(16, 16); n])
}

#[test]
fn simclr_loss_decreases_on_separable_set() {
    for seed in 0..3 {
        let (images, masks) = two_clusters(8, seed);
        let imgs: Vec<&GrayImage> = images.iter().collect();
        let msks: Vec<&LungMask> = masks.iter().collect();
        let mut model = ContrastiveModel::new(tiny_encoder(), 4, seed).unwrap();
        let aug = AugmentConfig { out_size: (16, 16), ..AugmentConfig::default() };
        let cfg = LossConfig::default();
        let mut opt = Adam::new(model.store.tensors(), AdamConfig::default());
        let mut r = rng(seed + 10);
        // Loss on one fixed draw of views, so that before and after compare
        // the same quantity.
        let (va, vb) = views(&imgs, &msks, &aug, &mut rng(seed + 99)).unwrap();
        let fixed: Vec<&GrayImage> = va.iter().chain(&vb).collect();
        let eval = |m: &ContrastiveModel| {
            let mut g = Graph::new();
            let p = m.store.bind(&mut g, false);
            let z = project(&mut g, m, &p, &fixed).unwrap();
            let l = nt_xent_loss(&mut g, z, &pairing(8), &cfg).unwrap();
            g.value(l).item()
        };
        let start = eval(&model);
        let mut losses = Vec::new();
        for step in 0..200 {
            let lr = cosine_lr(step, 200, 1e-3, 1e-5);
            losses.push(simclr_step(&mut model, &imgs, &msks, &aug, &cfg, &mut opt, lr, &mut r).unwrap());
        }
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[190..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "seed {seed}: {head} -> {tail}");
        let end = eval(&model);
        assert!(end < start, "seed {seed}: fixed-view loss {start} -> {end}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let (images, masks) = two_clusters(4, 3);
    let imgs: Vec<&GrayImage> = images.iter().collect();
    let msks: Vec<&LungMask> = masks.iter().collect();
    let mut model = ContrastiveModel::new(tiny_encoder(), 4, 3).unwrap();
    let before = model.store.clone();
    let aug = AugmentConfig { out_size: (16, 16), ..AugmentConfig::default() };
    let mut opt = Adam::new(model.store.tensors(), AdamConfig::default());
    simclr_step(&mut model, &imgs, &msks, &aug, &LossConfig::default(), &mut opt, 0.0, &mut rng(0)).unwrap();
    assert_eq!(model.store, before);
}

#[test]
fn simclr_step_needs_two_images() {
    let (images, masks) = two_clusters(1, 3);
    let mut model = ContrastiveModel::new(tiny_encoder(), 4, 3).unwrap();
    let aug = AugmentConfig { out_size: (16, 16), ..AugmentConfig::default() };
    let mut opt = Adam::new(model.store.tensors(), AdamConfig::default());
    let r = simclr_step(&mut model, &[&images[0]], &[&masks[0]], &aug, &LossConfig::default(), &mut opt, 0.1, &mut rng(0));
    assert!(r.is_err());
}

#[test]
fn momentum_fixed_points() {
    let a = ContrastiveModel::new(tiny_encoder(), 4, 1).unwrap();
    let b = ContrastiveModel::new(tiny_encoder(), 4, 2).unwrap();
    let mut keep = MocoState::new(&a.store, 8, 1.0).unwrap();
    keep.momentum_update(&b.store);
    assert_eq!(keep.key_store, a.store);
    let mut copy = MocoState::new(&a.store, 8, 0.0).unwrap();
    copy.momentum_update(&b.store);
    assert_eq!(copy.key_store, b.store);
    assert!(MocoState::new(&a.store, 0, 0.5).is_err());
    assert!(MocoState::new(&a.store, 4, 1.5).is_err());
}

#[test]
fn moco_queue_state_after_steps() {
    let (images, masks) = two_clusters(6, 4);
    let imgs: Vec<&GrayImage> = images.iter().collect();
    let msks: Vec<&LungMask> = masks.iter().collect();
    let mut model = ContrastiveModel::new(tiny_encoder(), 4, 5).unwrap();
    let mut moco = MocoState::new(&model.store, 10, 0.99).unwrap();
    let aug = AugmentConfig { out_size: (16, 16), ..AugmentConfig::default() };
    let cfg = LossConfig::default();
    let mut opt = Adam::new(model.store.tensors(), AdamConfig::default());
    let mut r = rng(6);
    let key_before = moco.key_store.clone();
    for step in 0..4 {
        let before: Vec<Vec<f64>> = moco.queue().map(<[f64]>::to_vec).collect();
        let loss = moco_step(&mut model, &mut moco, &imgs, &msks, &aug, &cfg, &mut opt, 1e-3, &mut r).unwrap();
        assert!(loss.is_finite());
        let after: Vec<Vec<f64>> = moco.queue().map(<[f64]>::to_vec).collect();
        let expected_len = (6 * (step + 1)).min(10);
        assert_eq!(after.len(), expected_len);
        // FIFO: survivors of the old queue keep their order at the front.
        let dropped = (before.len() + 6).saturating_sub(10);
        assert_eq!(&after[..before.len() - dropped], &before[dropped..]);
        for row in &after {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
    // The key network moved towards the query network but is not equal.
    assert_ne!(moco.key_store, key_before);
    assert_ne!(moco.key_store, model.store);
}

#[test]
fn moco_newest_keys_come_from_key_network() {
    let (images, masks) = two_clusters(4, 4);
    let imgs: Vec<&GrayImage> = images.iter().collect();
    let msks: Vec<&LungMask> = masks.iter().collect();
    let mut model = ContrastiveModel::new(tiny_encoder(), 4, 5).unwrap();
    let mut moco = MocoState::new(&model.store, 4, 0.5).unwrap();
    let aug = AugmentConfig::identity((16, 16));
    let key_net = moco.key_store.clone();
    let mut opt = Adam::new(model.store.tensors(), AdamConfig::default());
    moco_step(&mut model, &mut moco, &imgs, &msks, &aug, &LossConfig::default(), &mut opt, 1e-3, &mut rng(0)).unwrap();
    let mut g = Graph::new();
    let p = key_net.bind(&mut g, false);
    let z = project(&mut g, &model, &p, &imgs).unwrap();
    let expected: Vec<Vec<f64>> = g.value(z).data().chunks(4).map(<[f64]>::to_vec).collect();
    let got: Vec<Vec<f64>> = moco.queue().map(<[f64]>::to_vec).collect();
    assert_eq!(got, expected);
}

#[test]
fn method_names_round_trip() {
    for m in PretrainMethod::ALL {
        assert_eq!(m.as_str().parse::<PretrainMethod>().unwrap(), m);
    }
    assert!("imagenet".parse::<PretrainMethod>().is_err());
}

#[test]
fn lung_mask_probability_follows_method() {
    assert_eq!(PretrainConfig::new(PretrainMethod::SimclrLungseg, 0).augment.mask_prob, 0.5);
    assert_eq!(PretrainConfig::new(PretrainMethod::Simclr, 0).augment.mask_prob, 0.0);
    assert_eq!(PretrainConfig::new(PretrainMethod::Moco, 0).augment.mask_prob, 0.0);
    let kv = KvConfig::parse("moco_lung_mask=true").unwrap();
    let c = PretrainConfig::from_kv(&kv, Some(PretrainMethod::Moco), None).unwrap();
    assert_eq!(c.augment.mask_prob, 0.5);
}

#[test]
fn config_round_trips_through_kv() {
    let mut c = PretrainConfig::new(PretrainMethod::Moco, 9);
    c.epochs = 3;
    c.augment.crop_scale = (0.5, 0.9);
    c.moco_queue = 64;
    let back = PretrainConfig::from_kv(&c.to_kv(), None, None).unwrap();
    assert_eq!(back, c);
    let bad = KvConfig::parse("method=simclr\nbatch_size=1").unwrap();
    assert!(PretrainConfig::from_kv(&bad, None, None).is_err());
}

fn quick(method: PretrainMethod, seed: u64) -> PretrainConfig {
    let mut c = PretrainConfig::new(method, seed);
    c.epochs = 2;
    c.batch_size = 4;
    c.moco_queue = 8;
    c
}

#[test]
fn every_method_pretrains_and_is_deterministic() {
    let ds = generate_dataset(20, 1, &crate::synth::SPLIT_RATIOS).unwrap();
    for method in PretrainMethod::ALL {
        let a = pretrain(&ds, &quick(method, 3)).unwrap();
        let b = pretrain(&ds, &quick(method, 3)).unwrap();
        assert_eq!(a.checkpoint.encode(), b.checkpoint.encode(), "{method}");
        assert_eq!(format_loss_log(&a.log), format_loss_log(&b.log));
        assert_eq!(a.checkpoint.config_value("method"), Some(method.as_str()));
        if method == PretrainMethod::Scratch {
            assert!(a.log.is_empty());
        } else {
            assert_eq!(a.log.len(), 2);
            assert!(a.log.iter().all(|r| r.loss.is_finite()));
        }
        assert!(a.checkpoint.params.iter().any(|(n, _)| n.starts_with("encoder.")));
    }
}

#[test]
fn scratch_checkpoint_is_the_initialisation() {
    let ds = generate_dataset(20, 1, &crate::synth::SPLIT_RATIOS).unwrap();
    let out = pretrain(&ds, &quick(PretrainMethod::Scratch, 8)).unwrap();
    let init = ContrastiveModel::new(EncoderConfig::default(), 32, 8).unwrap();
    for (name, t) in &out.checkpoint.params {
        assert_eq!(t, &crate::checkpoint::round_to_f32(init.store.find(name).unwrap()));
    }
}

#[test]
fn loss_log_format() {
    let r = LossRecord { epoch: 2, step: 30, lr: 0.001, loss: 1.5 };
    assert_eq!(r.to_line(), "2\t30\t0.00100000\t1.500000");
}

#[test]
fn reconstruction_head_restores_image_extent() {
    let cfg = EncoderConfig::default();
    let mut store = ParamStore::new();
    let mut r = rng(0);
    let enc = Encoder::new(&mut store, "encoder", cfg.clone(), &mut r).unwrap();
    let head = ReconstructionHead::new(&mut store, &cfg, &mut r).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(Tensor::full(&[2, 1, 64, 64], 0.5));
    let f = enc.forward(&mut g, &p, x).unwrap();
    let y = head.forward(&mut g, &p, f.grid).unwrap();
    assert_eq!(g.shape(y), &[2, 1, 64, 64]);
}

#[test]
fn tag_vector_is_multi_hot() {
    let v = tag_vector(&["effusion".to_string(), "heart".to_string()]);
    assert_eq!(v, vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
}
