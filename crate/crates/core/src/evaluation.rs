//! Image-quality metrics and per-dataset reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ensure, DearError, Result};
use crate::imaging::{resize_bicubic, write_image, Image, Mask, MaskedImage};
use crate::model::output_size;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn check_pair(a: &Image, b: &Image) -> Result<()> {
    ensure!(a.shape() == b.shape(), "image shapes {:?} and {:?} differ", a.shape(), b.shape());
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// `10·log10(1/MSE)` over all channels, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse))
}

/// PSNR restricted to pixels where `region` is set.
pub fn psnr_in(a: &Image, b: &Image, region: &Mask) -> Result<f64> {
    Ok(psnr_from_mse(masked_error(a, b, region, |d| d * d)?))
}

/// Mean absolute error restricted to pixels where `region` is set.
pub fn l1_in(a: &Image, b: &Image, region: &Mask) -> Result<f64> {
    masked_error(a, b, region, f64::abs)
}

fn masked_error(a: &Image, b: &Image, region: &Mask, f: impl Fn(f64) -> f64) -> Result<f64> {
    check_pair(a, b)?;
    ensure!(
        (region.height(), region.width()) == (a.height(), a.width()),
        "region mask does not match image size"
    );
    let c = a.channels();
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, &m) in region.data().iter().enumerate() {
        if m != 0 {
            for ch in 0..c {
                sum += f(a.data()[p * c + ch] as f64 - b.data()[p * c + ch] as f64);
            }
            n += c;
        }
    }
    ensure!(n > 0, "region mask selects no pixels");
    Ok(sum / n as f64)
}

/// Mean absolute difference.
pub fn l1_metric(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / a.data().len() as f64)
}

/// SSIM settings: Gaussian window and stabilizing constants for range 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimParams {
    /// Normalized 1-D Gaussian taps.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with(a, b, SsimParams::default())
}

/// Mean SSIM over all valid (fully inside) window positions and channels.
pub fn ssim_with(a: &Image, b: &Image, params: SsimParams) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w, c) = a.shape();
    let k = params.window;
    ensure!(k % 2 == 1, "SSIM window must be odd");
    ensure!(h >= k && w >= k, "SSIM needs images of at least {k}x{k}, got {h}x{w}");
    let taps = params.kernel();
    let (c1, c2) = ((params.k1).powi(2), (params.k2).powi(2));
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let plane = |img: &Image| -> Vec<f64> { (0..h * w).map(|p| img.data()[p * c + ch] as f64).collect() };
        let (x, y) = (plane(a), plane(b));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &taps));
        for i in 0..oh * ow {
            let (mu_x, mu_y) = (mx[i], my[i]);
            let vx = sxx[i] - mu_x * mu_x;
            let vy = syy[i] - mu_y * mu_y;
            let cov = sxy[i] - mu_x * mu_y;
            total += ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                / ((mu_x * mu_x + mu_y * mu_y + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (c * oh * ow) as f64)
}

/// Separable valid-mode filtering of an `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(t, &v)| v * src[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(t, &v)| v * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Anything that turns a masked LR image into a completed image at a scale.
pub trait Restorer: Sync {
    fn name(&self) -> String;
    fn restore(&self, input: &MaskedImage, scale: f64) -> Result<Image>;
}

impl Restorer for crate::model::DearModel {
    fn name(&self) -> String {
        "dear".to_string()
    }

    fn restore(&self, input: &MaskedImage, scale: f64) -> Result<Image> {
        self.render(input, scale, crate::model::DEFAULT_CHUNK)
    }
}

/// External perceptual scorer: invoked as `<exe> <a.png> <b.png>` and
/// expected to print a single number.
#[derive(Clone, Debug)]
pub struct LpipsScorer {
    pub executable: PathBuf,
}

impl LpipsScorer {
    pub fn score(&self, a: &Image, b: &Image, scratch: &Path) -> Result<f64> {
        let pa = scratch.join("lpips_a.png");
        let pb = scratch.join("lpips_b.png");
        write_image(a, &pa)?;
        write_image(b, &pb)?;
        let out = Command::new(&self.executable)
            .arg(&pa)
            .arg(&pb)
            .output()
            .map_err(|e| DearError::io(&self.executable, e))?;
        ensure!(out.status.success(), "perceptual scorer exited with {}", out.status);
        let text = String::from_utf8_lossy(&out.stdout);
        text.trim()
            .parse()
            .map_err(|_| DearError::invalid(format!("perceptual scorer printed {:?}, expected a number", text.trim())))
    }
}

/// One evaluation input: masked LR image and the ground truth at the
/// evaluated scale.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub id: String,
    pub input: MaskedImage,
    pub target: Image,
}

impl EvalCase {
    /// Uses `hr` when it already has the output size for `scale`, otherwise a
    /// bicubic resize of it as a proxy ground truth.
    pub fn new(id: String, input: MaskedImage, hr: &Image, scale: f64) -> Result<Self> {
        let (oh, ow) = output_size(input.height(), input.width(), scale)?;
        let target = if (hr.height(), hr.width()) == (oh, ow) {
            hr.clone()
        } else {
            resize_bicubic(hr, oh, ow)?
        };
        Ok(Self { id, input, target })
    }

    /// The LR mask on the target grid.
    pub fn target_mask(&self) -> Mask {
        self.input.mask().resize_nearest(self.target.height(), self.target.width())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    /// PSNR and L1 over the missing region only (absent when nothing is missing).
    pub masked_psnr: Option<f64>,
    pub masked_l1: Option<f64>,
    pub lpips: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub model: String,
    pub dataset: String,
    pub scale: f64,
    pub images: Vec<ImageMetrics>,
    pub mean: ImageMetrics,
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.collect::<Option<Vec<_>>>()?;
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Scores an image against its target.
pub fn score(id: &str, out: &Image, case: &EvalCase, lpips: Option<(&LpipsScorer, &Path)>) -> Result<ImageMetrics> {
    let region = case.target_mask();
    let any = region.missing_count() > 0;
    Ok(ImageMetrics {
        id: id.to_string(),
        psnr: psnr(out, &case.target)?,
        ssim: ssim(out, &case.target)?,
        l1: l1_metric(out, &case.target)?,
        masked_psnr: any.then(|| psnr_in(out, &case.target, &region)).transpose()?,
        masked_l1: any.then(|| l1_in(out, &case.target, &region)).transpose()?,
        lpips: lpips.map(|(s, dir)| s.score(out, &case.target, dir)).transpose()?,
    })
}

/// Restores every case at `scale` and scores it against its target.
pub fn evaluate(
    restorer: &dyn Restorer,
    dataset: &str,
    cases: &[EvalCase],
    scale: f64,
    lpips: Option<&LpipsScorer>,
) -> Result<MetricReport> {
    ensure!(!cases.is_empty(), "nothing to evaluate");
    let scratch = std::env::temp_dir();
    let images = cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| {
            let out = restorer.restore(&case.input, scale)?;
            let dir = scratch.join(format!("dear_lpips_{}_{i}", std::process::id()));
            if lpips.is_some() {
                fs::create_dir_all(&dir).map_err(|e| DearError::io(&dir, e))?;
            }
            let m = score(&case.id, &out, case, lpips.map(|s| (s, dir.as_path())));
            if lpips.is_some() {
                let _ = fs::remove_dir_all(&dir);
            }
            m
        })
        .collect::<Result<Vec<_>>>()?;
    let n = images.len() as f64;
    let mean = ImageMetrics {
        id: "mean".to_string(),
        psnr: images.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: images.iter().map(|m| m.ssim).sum::<f64>() / n,
        l1: images.iter().map(|m| m.l1).sum::<f64>() / n,
        masked_psnr: mean_opt(images.iter().map(|m| m.masked_psnr)),
        masked_l1: mean_opt(images.iter().map(|m| m.masked_l1)),
        lpips: mean_opt(images.iter().map(|m| m.lpips)),
    };
    Ok(MetricReport {
        model: restorer.name(),
        dataset: dataset.to_string(),
        scale,
        images,
        mean,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,dataset,scale,id,psnr,ssim,l1,masked_psnr,masked_l1,lpips\n");
        for m in self.images.iter().chain(std::iter::once(&self.mean)) {
            s.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{},{},{}\n",
                self.model,
                self.dataset,
                self.scale,
                m.id,
                m.psnr,
                m.ssim,
                m.l1,
                fmt_opt(m.masked_psnr),
                fmt_opt(m.masked_l1),
                fmt_opt(m.lpips)
            ));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| DearError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_anchors() {
        let a = Image::filled(4, 4, 3, 0.5).unwrap();
        let b = Image::filled(4, 4, 3, 0.6).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(l1_metric(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn ssim_constant_offset_closed_form() {
        let a = Image::filled(32, 32, 3, 0.4).unwrap();
        let b = Image::filled(32, 32, 3, 0.5).unwrap();
        let (ma, mb) = (0.4f32 as f64, 0.5f32 as f64);
        let c1 = 1e-4;
        let expect = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn small_image_rejected() {
        let a = Image::filled(8, 8, 3, 0.4).unwrap();
        assert!(ssim(&a, &a).is_err());
    }
}
