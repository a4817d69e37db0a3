//! Pixel-wise reconstruction kernels and the importance map.
//!
//! The kernel-branch latent is upsampled to the input resolution as one
//! `K×K` kernel per pixel. The kernels rebuild the LR image from its own
//! neighborhoods (`Î[p] = Σ_q K_p[p−q]·I[q]`, shared across RGB), which is
//! supervised against the clean LR image, and a 1×1 convolution followed by a
//! sigmoid turns them into the importance map `W ∈ [0,1]`.

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{ensure, Result};
use crate::features::{LocalFilter, Upsampler};
use crate::nn::{Bound, Conv2d, Initializer};

/// `K²×H×W` per-pixel kernels at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconKernelField<T> {
    pub weights: Tensor<T>,
    pub kernel_size: usize,
}

/// `1×H×W` map with values in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceMap<T>(pub Tensor<T>);

impl<T: Real> Graph<T> {
    /// `Σ_o K[o,y,x] · img[c, y+dy_o, x+dx_o]` with zero padding; `img` is
    /// `C×H×W`, `kernels` is `k²×H×W` and shared across channels.
    pub fn reconstruct_lr(&mut self, img: Var, kernels: Var, kernel: usize) -> Result<Var> {
        ensure!(kernel % 2 == 1, "reconstruction kernel size must be odd, got {kernel}");
        let (c, h, w) = self.value(img).dims3()?;
        ensure!(
            self.value(kernels).shape() == [kernel * kernel, h, w],
            "kernel field {:?} does not match image {:?}",
            self.value(kernels).shape(),
            self.value(img).shape()
        );
        let f = LocalFilter {
            channels: c,
            height: h,
            width: w,
            kernel,
            shared: true,
        };
        let mut out = vec![T::zero(); c * h * w];
        f.apply(self.value(img).data(), self.value(kernels).data(), &mut out);
        Ok(self.push(Tensor::from_parts(&[c, h, w], out), &[img, kernels], move |a| {
            let (src, ker) = (a.inputs[0].data(), a.inputs[1].data());
            let mut di = a.needs[0].then(|| vec![T::zero(); src.len()]);
            let mut dk = a.needs[1].then(|| vec![T::zero(); ker.len()]);
            f.backward(src, ker, a.grad.data(), di.as_deref_mut(), dk.as_deref_mut());
            vec![
                di.map(|d| Tensor::from_parts(&[c, h, w], d)),
                dk.map(|d| Tensor::from_parts(&[kernel * kernel, h, w], d)),
            ]
        }))
    }
}

/// Graph-free [`Graph::reconstruct_lr`] on a `C×H×W` raster.
pub fn reconstruct_lr<T: Real>(img: &Tensor<T>, kernels: &ReconKernelField<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let i = g.constant(img.clone());
    let k = g.constant(kernels.weights.clone());
    let out = g.reconstruct_lr(i, k, kernels.kernel_size)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug)]
pub struct ImportanceBranch {
    kernels: Upsampler,
    head: Conv2d,
    kernel_size: usize,
}

impl ImportanceBranch {
    pub fn new<T: Real>(init: &mut Initializer<'_, T>, cfg: &ModelConfig) -> Self {
        let taps = cfg.recon_kernel * cfg.recon_kernel;
        Self {
            kernels: Upsampler::new(init, "recon_kernels", cfg.latent_channels, taps, 0.1),
            head: Conv2d::new(init, "importance_head", taps, 1, 1, 1, 0, 1.0),
            kernel_size: cfg.recon_kernel,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }

    /// `K²×H×W` kernels from the kernel-branch latent.
    pub fn predict_kernels<T: Real>(&self, g: &mut Graph<T>, p: &Bound, latent: Var, height: usize, width: usize) -> Result<Var> {
        self.kernels.forward(g, p, latent, height, width)
    }

    /// `sigmoid(conv1×1(K))`.
    pub fn importance<T: Real>(&self, g: &mut Graph<T>, p: &Bound, kernels: Var) -> Result<Var> {
        let logits = self.head.forward(g, p, kernels)?;
        Ok(g.sigmoid(logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;

    fn img(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(&[c, h, w], |i| ((i as f64 + 0.2) * 0.77).sin().abs())
    }

    fn field(h: usize, w: usize, f: impl Fn(usize) -> f64) -> ReconKernelField<f64> {
        ReconKernelField {
            weights: Tensor::from_fn(&[9, h, w], |i| f(i / (h * w))),
            kernel_size: 3,
        }
    }

    #[test]
    fn identity_kernels_reproduce_input() {
        let x = img(3, 5, 4);
        let k = field(5, 4, |o| if o == 4 { 1.0 } else { 0.0 });
        assert_eq!(reconstruct_lr(&x, &k).unwrap(), x);
    }

    #[test]
    fn uniform_kernels_preserve_constant_interior() {
        let x = Tensor::full(&[3, 5, 5], 0.6);
        let out = reconstruct_lr(&x, &field(5, 5, |_| 1.0 / 9.0)).unwrap();
        for c in 0..3 {
            for y in 1..4 {
                for xx in 1..4 {
                    assert!((out.data()[(c * 5 + y) * 5 + xx] - 0.6).abs() < 1e-12);
                }
            }
        }
        // Corners see four of nine taps.
        assert!((out.data()[0] - 0.6 * 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_center_pixel() {
        let x = Tensor::new(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let taps = [0.5, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -0.25];
        let mut k = Tensor::zeros(&[9, 3, 3]);
        for (o, &v) in taps.iter().enumerate() {
            k.data_mut()[o * 9 + 4] = v;
        }
        let out = reconstruct_lr(&x, &ReconKernelField { weights: k, kernel_size: 3 }).unwrap();
        // 0.5·1 + 1·5 − 0.25·9
        assert!((out.data()[4] - 3.25).abs() < 1e-12);
        assert_eq!(out.data()[0], 0.0);
    }

    #[test]
    fn reconstruct_gradients() {
        let r = check_gradients(vec![img(3, 4, 3), field(4, 3, |o| 0.1 * o as f64 - 0.3).weights], |g, v| {
            let y = g.reconstruct_lr(v[0], v[1], 3)?;
            g.dot_const(y, &img(3, 4, 3).map(|t| t - 0.4))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
