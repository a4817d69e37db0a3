//! Shared fixtures: tiny model configurations, random inputs and the
//! finite-difference gradient suite.
#![allow(dead_code)]

use dear::attention::AttentionConfig;
use dear::autodiff::gradcheck::{check_gradients_with, GradCheckOptions, GradCheckReport};
use dear::autodiff::{Graph, Tensor, Var};
use dear::config::{Ablation, ModelConfig};
use dear::imaging::{apply_mask, Image, Mask, MaskedImage};
use dear::implicit::build_queries;
use dear::model::{DearNet, ModelInput};
use dear::nn::{Bound, ParamStore};
use dear::trainer::loss_graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gradient-check tolerance on the relative error.
pub const GRAD_REL_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smallest layout exercising every component.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        latent_channels: 4,
        feature_channels: 4,
        res_blocks: 1,
        mlp_hidden: 8,
        mlp_layers: 3,
        ..ModelConfig::default()
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let data = (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::new(h, w, 3, data).unwrap()
}

/// Random mask with roughly `p` of the pixels missing and at least one known.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    let mut m = Mask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            m.set(y, x, rng.random_bool(p));
        }
    }
    m.set(0, 0, false);
    m
}

pub fn random_masked(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Image, MaskedImage) {
    let img = random_image(rng, h, w);
    let mask = random_mask(rng, h, w, 0.3);
    let masked = apply_mask(&img, &mask).unwrap();
    (img, masked)
}

pub fn random_coords(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])
        .collect()
}

/// Reduces an output to a scalar with fixed, non-uniform weights.
pub fn probe(g: &mut Graph<f64>, y: Var) -> dear::Result<Var> {
    let c = Tensor::from_fn(g.value(y).shape(), |i| ((i * 7 % 13) as f64 - 6.0) / 6.0);
    g.dot_const(y, &c)
}

/// Parameters moved off the initialization: zero-initialized biases put
/// pre-activations of all-inactive rows exactly on the ReLU kink, where the
/// loss is not differentiable.
pub fn generic_point(r: &mut ChaCha8Rng, params: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    params
        .tensors()
        .iter()
        .map(|t| Tensor::from_fn(t.shape(), |i| t.data()[i] + r.random_range(-0.05..0.05)))
        .collect()
}

fn opts(probes: Option<usize>) -> GradCheckOptions {
    GradCheckOptions {
        probes_per_input: probes,
        ..GradCheckOptions::default()
    }
}

pub fn grad_elementwise_filter(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let inputs = vec![random_tensor(&mut r, &[3, 8, 8]), random_tensor(&mut r, &[27, 8, 8])];
    check_gradients_with(
        inputs,
        |g, v| {
            let y = g.elementwise_filter(v[0], v[1], 3)?;
            probe(g, y)
        },
        opts(None),
    )
    .unwrap()
}

pub fn grad_unmask_attend(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mask = random_mask(&mut r, 8, 8, 0.3);
    let inputs = vec![random_tensor(&mut r, &[4, 8, 8])];
    check_gradients_with(
        inputs,
        move |g, v| {
            let y = g.unmask_attend(v[0], &mask, AttentionConfig::default())?;
            probe(g, y)
        },
        opts(None),
    )
    .unwrap()
}

pub fn grad_reconstruct_lr(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let inputs = vec![random_tensor(&mut r, &[3, 8, 8]), random_tensor(&mut r, &[9, 8, 8])];
    check_gradients_with(
        inputs,
        |g, v| {
            let y = g.reconstruct_lr(v[0], v[1], 3)?;
            probe(g, y)
        },
        opts(None),
    )
    .unwrap()
}

/// Color MLP plus local ensemble, differentiated with respect to `F`, `E`,
/// `W` and every MLP weight.
pub fn grad_predict_color(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let cfg = tiny_config();
    let (net, params) = DearNet::new::<f64>(&cfg, seed).unwrap();
    let c = cfg.feature_channels;
    let q = build_queries((8, 8), &random_coords(&mut r, 24), cfg.ensemble).unwrap();
    let n = params.len();
    let mut inputs = generic_point(&mut r, &params);
    inputs.push(random_tensor(&mut r, &[c, 8, 8]));
    inputs.push(random_tensor(&mut r, &[c, 8, 8]));
    inputs.push(Tensor::from_fn(&[1, 8, 8], |_| r.random_range(0.0..1.0)));
    check_gradients_with(
        inputs,
        move |g, v| {
            let p = Bound::from_vars(&v[..n]);
            let (_, colors) = net.mlp().predict(g, &p, v[n], v[n + 1], v[n + 2], &q)?;
            probe(g, colors)
        },
        opts(Some(12)),
    )
    .unwrap()
}

/// Complete training loss of one image with respect to every parameter
/// tensor of `cfg`.
pub fn grad_full_loss(cfg: &ModelConfig, seed: u64, probes: usize) -> GradCheckReport {
    let mut r = rng(seed);
    let (net, params) = DearNet::new::<f64>(cfg, seed).unwrap();
    let (clean, masked) = random_masked(&mut r, 8, 8);
    let input = ModelInput::<f64>::new(&masked, cfg).unwrap();
    let lr_clean = clean.to_tensor::<f64>();
    let coords = random_coords(&mut r, 32);
    let colors: Vec<[f32; 3]> = (0..coords.len())
        .map(|_| [r.random_range(0.0..1.0), r.random_range(0.0..1.0), r.random_range(0.0..1.0)])
        .collect();
    let n = params.len();
    check_gradients_with(
        generic_point(&mut r, &params),
        move |g, v| {
            let p = Bound::from_vars(&v[..n]);
            let l = loss_graph(g, &net, &p, &input, &lr_clean, &coords, &colors, 0.5)?;
            Ok(l.total)
        },
        // Loss values near 1 leave ~1e-16 roundoff per evaluation; a 1e-5
        // step keeps that far below the tolerance for gradients near 1e-6.
        GradCheckOptions {
            step: 1e-5,
            ..opts(Some(probes))
        },
    )
    .unwrap()
}

pub fn ablation_configs() -> Vec<(Ablation, ModelConfig)> {
    Ablation::ALL.iter().map(|&a| (a, a.apply(&tiny_config()))).collect()
}

/// Gradient of fixed projections of selected embedding outputs with respect
/// to every parameter, on an `h×w` masked input.
pub fn grad_embedding(
    cfg: &ModelConfig,
    seed: u64,
    (h, w): (usize, usize),
    select: fn(&dear::model::EmbeddingVars) -> Vec<Var>,
) -> GradCheckReport {
    let mut r = rng(seed);
    let (net, params) = DearNet::new::<f64>(cfg, seed).unwrap();
    let (_, masked) = random_masked(&mut r, h, w);
    let input = ModelInput::<f64>::new(&masked, cfg).unwrap();
    let n = params.len();
    check_gradients_with(
        generic_point(&mut r, &params),
        move |g, v| {
            let p = Bound::from_vars(&v[..n]);
            let emb = net.embed(g, &p, &input)?;
            let mut total = None;
            for out in select(&emb) {
                let s = probe(g, out)?;
                total = Some(match total {
                    None => s,
                    Some(t) => g.weighted_sum(t, 1.0, s, 1.0)?,
                });
            }
            Ok(total.expect("at least one output"))
        },
        // The probe sums hundreds of outputs, so roundoff in the loss is
        // larger; gradients below 1e-5 are compared absolutely (≤ 1e-9).
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-5,
            ..opts(Some(6))
        },
    )
    .unwrap()
}

/// Importance branch alone: kernel prediction from a `C_z×2×2` latent to a
/// `6×6` field, LR reconstruction and importance map, with respect to its
/// parameters, the latent and the raster.
pub fn grad_importance_branch(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let cfg = tiny_config();
    let (net, params) = DearNet::new::<f64>(&cfg, seed).unwrap();
    let n = params.len();
    let mut inputs = generic_point(&mut r, &params);
    inputs.push(random_tensor(&mut r, &[cfg.latent_channels, 2, 2]));
    inputs.push(Tensor::from_fn(&[3, 6, 6], |_| r.random_range(0.0..1.0)));
    check_gradients_with(
        inputs,
        move |g, v| {
            let p = Bound::from_vars(&v[..n]);
            let branch = net.importance_branch().expect("PIM enabled");
            let kernels = branch.predict_kernels(g, &p, v[n], 6, 6)?;
            let recon = g.reconstruct_lr(v[n + 1], kernels, branch.kernel_size())?;
            let imp = branch.importance(g, &p, kernels)?;
            let a = probe(g, recon)?;
            let b = probe(g, imp)?;
            g.weighted_sum(a, 1.0, b, 1.0)
        },
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-5,
            ..opts(Some(8))
        },
    )
    .unwrap()
}

/// Independent metric oracles: straightforward loops over `get`.
pub fn oracle_mse(a: &Image, b: &Image) -> f64 {
    let (h, w, c) = a.shape();
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let d = a.get(y, x, ch) as f64 - b.get(y, x, ch) as f64;
                s += d * d;
            }
        }
    }
    s / (h * w * c) as f64
}

pub fn oracle_l1(a: &Image, b: &Image) -> f64 {
    let (h, w, c) = a.shape();
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                s += (a.get(y, x, ch) as f64 - b.get(y, x, ch) as f64).abs();
            }
        }
    }
    s / (h * w * c) as f64
}

/// Gaussian-window SSIM with direct 2-D window sums.
pub fn oracle_ssim(a: &Image, b: &Image) -> f64 {
    let (h, w, c) = a.shape();
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let gs: f64 = g.iter().sum();
    let (c1, c2) = (0.0001, 0.0009);
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let mut m = [0.0f64; 5];
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i] * g[j] / (gs * gs);
                        let (u, v) = (a.get(y + i, x + j, ch) as f64, b.get(y + i, x + j, ch) as f64);
                        m[0] += wt * u;
                        m[1] += wt * v;
                        m[2] += wt * u * u;
                        m[3] += wt * v * v;
                        m[4] += wt * u * v;
                    }
                }
                let (mx, my) = (m[0], m[1]);
                let (vx, vy, cv) = (m[2] - mx * mx, m[3] - my * my, m[4] - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}
