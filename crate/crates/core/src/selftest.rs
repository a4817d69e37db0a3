//! Quick runtime checks of the numerical invariants, for `dear selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionConfig;
use crate::autodiff::gradcheck::check_gradients;
use crate::autodiff::{Graph, Tensor, Var};
use crate::config::{EnsembleMode, HighpassMode, ModelConfig};
use crate::error::Result;
use crate::evaluation::{l1_metric, psnr, ssim_with, SsimParams};
use crate::features::{highpass_from_lowpass, PixelKernelField};
use crate::imaging::{Image, Mask};
use crate::implicit::build_queries;
use crate::model::DearModel;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    let data = (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::new(h, w, 3, data).expect("values in range")
}

/// Runs every check; `seed` drives the random cases.
pub fn run(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    out.push(check("low-pass kernels sum to one", || {
        let cfg = ModelConfig {
            latent_channels: 4,
            feature_channels: 4,
            res_blocks: 1,
            mlp_hidden: 8,
            ..ModelConfig::default()
        };
        let mut worst = 0.0f64;
        let mut negative = false;
        for t in 0..20 {
            let model = DearModel::new(&cfg, seed.wrapping_add(t))?;
            let img = random_image(&mut rng, 8, 8);
            let masked = crate::imaging::apply_mask(&img, &Mask::zeros(8, 8))?;
            let high = model.predict_highpass(&masked)?.expect("DSE enabled");
            for s in high.group_sums() {
                // Literal high-pass: K² − 1 per group.
                worst = worst.max((s as f64 - 8.0).abs());
            }
            negative |= high.weights.data().iter().any(|&v| !(0.0..=1.0).contains(&v));
        }
        Ok((worst <= 1e-4 && !negative, format!("max |sum − 8| = {worst:.2e}")))
    }));

    out.push(check("delta high-pass has zero DC gain", || {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(random_tensor(&mut rng, &[18, 3, 3]));
        let low = g.softmax_channel_groups(logits, 9)?;
        let high = highpass_from_lowpass(&mut g, low, 3, HighpassMode::Delta)?;
        let field = PixelKernelField::new(g.value(high).clone(), 3)?;
        let worst = field.group_sums().iter().fold(0.0f64, |m, s| m.max(s.abs()));
        Ok((worst < 1e-12, format!("max |sum| = {worst:.2e}")))
    }));

    out.push(check("ensemble weights are convex", || {
        let coords: Vec<[f64; 2]> = (0..2000)
            .map(|_| [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])
            .collect();
        let mut worst = 0.0f64;
        for mode in [EnsembleMode::Area, EnsembleMode::Invdist] {
            let q = build_queries((7, 5), &coords, mode)?;
            for w in &q.weights {
                if w.iter().any(|&v| v < 0.0) {
                    return Ok((false, "negative weight".into()));
                }
                worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
            }
        }
        Ok((worst <= 1e-12, format!("max |Σw − 1| = {worst:.2e}")))
    }));

    let grad = |name: &'static str, inputs: Vec<Tensor<f64>>, f: fn(&mut Graph<f64>, &[Var]) -> Result<Var>| {
        check(name, move || {
            let r = check_gradients(inputs, f)?;
            Ok((r.max_rel_error <= 1e-4, format!("max rel error {:.2e}", r.max_rel_error)))
        })
    };
    out.push(grad(
        "element-wise filter gradient",
        vec![random_tensor(&mut rng, &[2, 4, 4]), random_tensor(&mut rng, &[18, 4, 4])],
        |g, v| {
            let y = g.elementwise_filter(v[0], v[1], 3)?;
            let c = Tensor::from_fn(g.value(y).shape(), |i| ((i * 7 % 13) as f64 - 6.0) / 6.0);
            g.dot_const(y, &c)
        },
    ));
    out.push(grad("unmask attention gradient", vec![random_tensor(&mut rng, &[3, 2, 2])], |g, v| {
        let mut m = Mask::zeros(2, 2);
        m.set(1, 1, true);
        let y = g.unmask_attend(v[0], &m, AttentionConfig::default())?;
        let c = Tensor::from_fn(g.value(y).shape(), |i| ((i * 7 % 13) as f64 - 6.0) / 6.0);
        g.dot_const(y, &c)
    }));
    out.push(grad(
        "LR reconstruction gradient",
        vec![random_tensor(&mut rng, &[3, 4, 4]), random_tensor(&mut rng, &[9, 4, 4])],
        |g, v| {
            let y = g.reconstruct_lr(v[0], v[1], 3)?;
            let c = Tensor::from_fn(g.value(y).shape(), |i| ((i * 7 % 13) as f64 - 6.0) / 6.0);
            g.dot_const(y, &c)
        },
    ));

    out.push(check("metric oracles", || {
        let a = random_image(&mut rng, 16, 16);
        let b = random_image(&mut rng, 16, 16);
        let n = a.data().len() as f64;
        let mse: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / n;
        let l1: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / n;
        let dp = (psnr(&a, &b)? - 10.0 * (1.0 / mse).log10()).abs();
        let dl = (l1_metric(&a, &b)? - l1).abs();
        let ds = (ssim_with(&a, &b, SsimParams::default())? - brute_ssim(&a, &b)).abs();
        Ok((
            dp <= 1e-9 && dl == 0.0 && ds <= 1e-7,
            format!("|Δpsnr| {dp:.1e}, |Δssim| {ds:.1e}, |Δl1| {dl:.1e}"),
        ))
    }));
    out
}

/// Direct 2-D window SSIM.
fn brute_ssim(a: &Image, b: &Image) -> f64 {
    let p = SsimParams::default();
    let k1d = p.kernel();
    let (h, w, c) = a.shape();
    let k = p.window;
    let (c1, c2) = (p.k1 * p.k1, p.k2 * p.k2);
    let mut total = 0.0;
    let mut count = 0;
    for ch in 0..c {
        for y in 0..=h - k {
            for x in 0..=w - k {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = k1d[i] * k1d[j];
                        let u = a.get(y + i, x + j, ch) as f64;
                        let v = b.get(y + i, x + j, ch) as f64;
                        mx += wt * u;
                        my += wt * v;
                        sxx += wt * u * u;
                        syy += wt * v * v;
                        sxy += wt * u * v;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}
