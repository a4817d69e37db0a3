//! Detail-enhanced semantic embedding.
//!
//! The masked input is encoded to a latent `Z` at quarter resolution. A
//! second, independently parameterized branch predicts a per-position,
//! per-channel `K_z×K_z` low-pass kernel (softmax over the kernel taps);
//! subtracting it from the all-one tensor gives the high-pass field `K_hp`.
//! The latent is enhanced as `Ẑ = Z + K_hp ⊛ Z` and decoded back to the
//! input resolution to give the feature map `F`.

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::config::{HighpassMode, ModelConfig};
use crate::error::{ensure, Result};
use crate::imaging::MaskedImage;
use crate::nn::{Bound, Conv2d, ConvTranspose2d, Initializer, ResBlock};

/// Spatial reduction between the input and the latent.
pub const LATENT_STRIDE: usize = 4;
/// Smallest accepted input side.
pub const MIN_INPUT_SIDE: usize = 8;

/// `C_z × H_z × W_z` latent embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentMap<T>(pub Tensor<T>);

/// `C × H × W` per-pixel embedding aligned with the LR input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T>(pub Tensor<T>);

/// Per-position, per-channel `K×K` kernels stored as a `(C·K²) × H × W`
/// tensor; channel `c·K² + o` holds tap `o` (row-major over the window) of
/// the kernel applied to channel `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelKernelField<T> {
    pub weights: Tensor<T>,
    pub kernel_size: usize,
}

impl<T: Real> PixelKernelField<T> {
    pub fn new(weights: Tensor<T>, kernel_size: usize) -> Result<Self> {
        ensure!(kernel_size % 2 == 1, "kernel size must be odd, got {kernel_size}");
        let (c, _, _) = weights.dims3()?;
        ensure!(
            c % (kernel_size * kernel_size) == 0,
            "{c} kernel channels is not a multiple of {}",
            kernel_size * kernel_size
        );
        Ok(Self { weights, kernel_size })
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[0] / (self.kernel_size * self.kernel_size)
    }

    /// Sum of the taps of every `(channel, position)` kernel.
    pub fn group_sums(&self) -> Vec<T> {
        let taps = self.kernel_size * self.kernel_size;
        let (_, h, w) = self.weights.dims3().expect("rank 3");
        let plane = h * w;
        let d = self.weights.data();
        let mut sums = Vec::with_capacity(self.channels() * plane);
        for c in 0..self.channels() {
            for p in 0..plane {
                sums.push((0..taps).map(|o| d[(c * taps + o) * plane + p]).sum());
            }
        }
        sums
    }
}

/// Offsets `(dy, dx)` of tap `o` of a `k×k` window.
#[inline]
pub(crate) fn tap_offset(o: usize, k: usize) -> (isize, isize) {
    let r = (k / 2) as isize;
    ((o / k) as isize - r, (o % k) as isize - r)
}

/// Shape of a local filtering problem: `src` is `channels×height×width`;
/// kernels are `groups·k²×height×width` with `groups == channels` (one
/// kernel per channel) or `groups == 1` (shared across channels).
#[derive(Clone, Copy, Debug)]
pub(crate) struct LocalFilter {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub shared: bool,
}

impl LocalFilter {
    fn kernel_channel(&self, c: usize, o: usize) -> usize {
        let taps = self.kernel * self.kernel;
        if self.shared {
            o
        } else {
            c * taps + o
        }
    }

    /// `out[c,y,x] += Σ_o K[c,o,y,x] · src[c, y+dy_o, x+dx_o]`, zero outside.
    pub fn apply<T: Real>(&self, src: &[T], kernels: &[T], out: &mut [T]) {
        let (h, w, k) = (self.height, self.width, self.kernel);
        let plane = h * w;
        for c in 0..self.channels {
            let s = &src[c * plane..(c + 1) * plane];
            let dst = &mut out[c * plane..(c + 1) * plane];
            for o in 0..k * k {
                let (dy, dx) = tap_offset(o, k);
                let kp = &kernels[self.kernel_channel(c, o) * plane..][..plane];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &s[sy as usize * w..(sy as usize + 1) * w];
                    let (x0, x1) = valid_range(w, dx);
                    for x in x0..x1 {
                        dst[y * w + x] += kp[y * w + x] * srow[(x as isize + dx) as usize];
                    }
                }
            }
        }
    }

    /// Gradients of [`LocalFilter::apply`] with respect to the source and the
    /// kernels, accumulated into whichever buffers are given.
    pub fn backward<T: Real>(
        &self,
        src: &[T],
        kernels: &[T],
        dout: &[T],
        mut dsrc: Option<&mut [T]>,
        mut dkernels: Option<&mut [T]>,
    ) {
        let (h, w, k) = (self.height, self.width, self.kernel);
        let plane = h * w;
        for c in 0..self.channels {
            let s = &src[c * plane..(c + 1) * plane];
            let g = &dout[c * plane..(c + 1) * plane];
            for o in 0..k * k {
                let (dy, dx) = tap_offset(o, k);
                let kc = self.kernel_channel(c, o);
                let kp = &kernels[kc * plane..][..plane];
                let (x0, x1) = valid_range(w, dx);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    if let Some(ds) = dsrc.as_deref_mut() {
                        let ds = &mut ds[c * plane..(c + 1) * plane];
                        for x in x0..x1 {
                            ds[sy * w + (x as isize + dx) as usize] += kp[y * w + x] * g[y * w + x];
                        }
                    }
                    if let Some(dk) = dkernels.as_deref_mut() {
                        let dk = &mut dk[kc * plane..][..plane];
                        for x in x0..x1 {
                            dk[y * w + x] += g[y * w + x] * s[sy * w + (x as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Range of `x` for which `x + dx` stays inside `[0, w)`.
#[inline]
fn valid_range(w: usize, dx: isize) -> (usize, usize) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)).max(0) as usize;
    (x0.min(w), x1)
}

impl<T: Real> Graph<T> {
    /// Residual element-wise filtering `z + K ⊛ z` with one `k×k` kernel per
    /// position and channel; `kernels` is `(C·k²)×H×W`.
    pub fn elementwise_filter(&mut self, z: Var, kernels: Var, kernel: usize) -> Result<Var> {
        ensure!(kernel % 2 == 1, "element-wise filter size must be odd, got {kernel}");
        let (c, h, w) = self.value(z).dims3()?;
        ensure!(
            self.value(kernels).shape() == [c * kernel * kernel, h, w],
            "kernel field {:?} does not match latent {:?} with size {kernel}",
            self.value(kernels).shape(),
            self.value(z).shape()
        );
        let f = LocalFilter {
            channels: c,
            height: h,
            width: w,
            kernel,
            shared: false,
        };
        let mut out = self.value(z).data().to_vec();
        f.apply(self.value(z).data(), self.value(kernels).data(), &mut out);
        Ok(self.push(Tensor::from_parts(&[c, h, w], out), &[z, kernels], move |a| {
            let (src, ker) = (a.inputs[0].data(), a.inputs[1].data());
            let mut dz = a.needs[0].then(|| a.grad.data().to_vec());
            let mut dk = a.needs[1].then(|| vec![T::zero(); ker.len()]);
            f.backward(src, ker, a.grad.data(), dz.as_deref_mut(), dk.as_deref_mut());
            vec![
                dz.map(|d| Tensor::from_parts(&[c, h, w], d)),
                dk.map(|d| Tensor::from_parts(&[c * kernel * kernel, h, w], d)),
            ]
        }))
    }
}

/// `z + K ⊛ z` outside of any graph.
pub fn elementwise_filter<T: Real>(z: &LatentMap<T>, kernels: &PixelKernelField<T>) -> Result<LatentMap<T>> {
    let mut g = Graph::new();
    let zv = g.constant(z.0.clone());
    let kv = g.constant(kernels.weights.clone());
    let out = g.elementwise_filter(zv, kv, kernels.kernel_size)?;
    Ok(LatentMap(g.value(out).clone()))
}

/// High-pass kernels from low-pass ones.
pub fn highpass_from_lowpass<T: Real>(g: &mut Graph<T>, lowpass: Var, kernel: usize, mode: HighpassMode) -> Result<Var> {
    match mode {
        HighpassMode::Literal => Ok(g.affine(lowpass, -T::one(), T::one())),
        HighpassMode::Delta => {
            let (c, h, w) = g.value(lowpass).dims3()?;
            let taps = kernel * kernel;
            let center = taps / 2;
            let plane = h * w;
            let delta = Tensor::from_fn(&[c, h, w], |i| {
                if (i / plane) % taps == center {
                    T::one()
                } else {
                    T::zero()
                }
            });
            let neg = g.affine(lowpass, -T::one(), T::zero());
            g.add_const(neg, &delta)
        }
    }
}

/// Model input: zero-filled RGB (plus the mask channel when enabled),
/// zero-padded at the bottom/right to a multiple of [`LATENT_STRIDE`].
pub fn prepare_input<T: Real>(masked: &MaskedImage, mask_channel: bool) -> Result<Tensor<T>> {
    let (h, w) = (masked.height(), masked.width());
    ensure!(
        h >= MIN_INPUT_SIDE && w >= MIN_INPUT_SIDE,
        "input must be at least {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}, got {h}x{w}"
    );
    ensure!(masked.raster().channels() == 3, "model input must be RGB");
    let rgb = masked.raster().to_tensor::<T>();
    let t = if mask_channel {
        let mut data = rgb.into_data();
        data.extend(masked.mask().to_tensor::<T>().into_data());
        Tensor::from_parts(&[4, h, w], data)
    } else {
        rgb
    };
    t.pad_to(h.div_ceil(LATENT_STRIDE) * LATENT_STRIDE, w.div_ceil(LATENT_STRIDE) * LATENT_STRIDE)
}

/// Three strided convolutions followed by residual blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    convs: Vec<Conv2d>,
    blocks: Vec<ResBlock>,
}

impl Encoder {
    pub fn new<T: Real>(init: &mut Initializer<'_, T>, name: &str, cin: usize, channels: usize, blocks: usize) -> Self {
        let convs = vec![
            Conv2d::new(init, &format!("{name}.conv0"), cin, channels, 7, 1, 3, 1.0),
            Conv2d::new(init, &format!("{name}.conv1"), channels, channels, 4, 2, 1, 1.0),
            Conv2d::new(init, &format!("{name}.conv2"), channels, channels, 4, 2, 1, 1.0),
        ];
        let blocks = (0..blocks)
            .map(|i| ResBlock::new(init, &format!("{name}.block{i}"), channels))
            .collect();
        Self { convs, blocks }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, input: Var) -> Result<Var> {
        let mut x = input;
        for conv in &self.convs {
            x = conv.forward(g, p, x)?;
            x = g.relu(x);
        }
        for block in &self.blocks {
            x = block.forward(g, p, x)?;
        }
        Ok(x)
    }
}

/// Two stride-2 transposed convolutions (×4 upsampling).
#[derive(Clone, Debug)]
pub struct Upsampler {
    up1: ConvTranspose2d,
    up2: ConvTranspose2d,
}

impl Upsampler {
    pub fn new<T: Real>(init: &mut Initializer<'_, T>, name: &str, cin: usize, cout: usize, gain: f64) -> Self {
        Self {
            up1: ConvTranspose2d::new(init, &format!("{name}.up1"), cin, cin, 4, 2, 1, 1.0),
            up2: ConvTranspose2d::new(init, &format!("{name}.up2"), cin, cout, 4, 2, 1, gain),
        }
    }

    /// Upsamples and crops to `height×width`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, height: usize, width: usize) -> Result<Var> {
        let x = self.up1.forward(g, p, x)?;
        let x = g.relu(x);
        let x = self.up2.forward(g, p, x)?;
        g.crop(x, height, width)
    }
}

/// Intermediate results of [`FeatureExtractor::forward`].
#[derive(Clone, Copy, Debug)]
pub struct FeatureVars {
    pub latent: Var,
    /// Latent of the kernel-prediction branch (also feeds the importance branch).
    pub branch_latent: Option<Var>,
    pub lowpass: Option<Var>,
    pub highpass: Option<Var>,
    pub enhanced: Var,
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    encoder: Encoder,
    branch: Option<Encoder>,
    kernel_head: Option<Conv2d>,
    decoder: Upsampler,
    dse: bool,
    filter_kernel: usize,
    highpass: HighpassMode,
}

impl FeatureExtractor {
    pub fn new<T: Real>(init: &mut Initializer<'_, T>, cfg: &ModelConfig) -> Self {
        let cz = cfg.latent_channels;
        let encoder = Encoder::new(init, "encoder", cfg.input_channels(), cz, cfg.res_blocks);
        let branch = cfg
            .has_filter_branch()
            .then(|| Encoder::new(init, "kernel_branch", cfg.input_channels(), cz, cfg.res_blocks));
        let taps = cfg.filter_kernel * cfg.filter_kernel;
        let kernel_head = cfg
            .dse
            .then(|| Conv2d::new(init, "kernel_head", cz, cz * taps, 3, 1, 1, 0.1));
        let decoder = Upsampler::new(init, "decoder", cz, cfg.feature_channels, 1.0);
        Self {
            encoder,
            branch,
            kernel_head,
            decoder,
            dse: cfg.dse,
            filter_kernel: cfg.filter_kernel,
            highpass: cfg.highpass,
        }
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, input: Var) -> Result<Var> {
        self.encoder.forward(g, p, input)
    }

    pub fn branch_latent<T: Real>(&self, g: &mut Graph<T>, p: &Bound, input: Var) -> Result<Option<Var>> {
        self.branch.as_ref().map(|b| b.forward(g, p, input)).transpose()
    }

    /// Softmax-normalized low-pass kernels from the branch latent.
    pub fn lowpass<T: Real>(&self, g: &mut Graph<T>, p: &Bound, branch_latent: Var) -> Result<Option<Var>> {
        let Some(head) = &self.kernel_head else {
            return Ok(None);
        };
        let logits = head.forward(g, p, branch_latent)?;
        g.softmax_channel_groups(logits, self.filter_kernel * self.filter_kernel)
            .map(Some)
    }

    pub fn decode<T: Real>(&self, g: &mut Graph<T>, p: &Bound, latent: Var, height: usize, width: usize) -> Result<Var> {
        self.decoder.forward(g, p, latent, height, width)
    }

    /// Full pass over a prepared input; `height×width` is the unpadded size.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, input: Var, height: usize, width: usize) -> Result<FeatureVars> {
        let latent = self.encode(g, p, input)?;
        let branch_latent = self.branch_latent(g, p, input)?;
        let (lowpass, highpass, enhanced) = match (self.dse, branch_latent) {
            (true, Some(bl)) => {
                let low = self.lowpass(g, p, bl)?.expect("kernel head exists with DSE");
                let high = highpass_from_lowpass(g, low, self.filter_kernel, self.highpass)?;
                let enhanced = g.elementwise_filter(latent, high, self.filter_kernel)?;
                (Some(low), Some(high), enhanced)
            }
            _ => (None, None, latent),
        };
        let features = self.decode(g, p, enhanced, height, width)?;
        Ok(FeatureVars {
            latent,
            branch_latent,
            lowpass,
            highpass,
            enhanced,
            features,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;

    fn t(shape: &[usize], a: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + 0.5) * a).sin())
    }

    #[test]
    fn zero_kernels_are_identity() {
        let z = LatentMap(t(&[3, 4, 5], 0.7));
        let k = PixelKernelField::new(Tensor::zeros(&[27, 4, 5]), 3).unwrap();
        assert_eq!(elementwise_filter(&z, &k).unwrap(), z);
    }

    #[test]
    fn lowpass_on_constant_has_unit_dc_gain_away_from_borders() {
        let c = 0.37_f64;
        let z = LatentMap(Tensor::full(&[2, 5, 6], c));
        let k = PixelKernelField::new(Tensor::full(&[18, 5, 6], 1.0 / 9.0), 3).unwrap();
        let out = elementwise_filter(&z, &k).unwrap();
        for ch in 0..2 {
            for y in 1..4 {
                for x in 1..5 {
                    let v = out.0.data()[(ch * 5 + y) * 6 + x];
                    // residual term c plus filtered term c
                    assert!((v - 2.0 * c).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_pixel_latent_uses_only_center_tap() {
        // 1×1 latent: every off-center tap reads zero padding.
        let z = LatentMap(Tensor::new(&[1, 1, 1], vec![2.0]).unwrap());
        let weights: Vec<f64> = (1..=9).map(|i| i as f64 * 0.1).collect();
        let k = PixelKernelField::new(Tensor::new(&[9, 1, 1], weights).unwrap(), 3).unwrap();
        let out = elementwise_filter(&z, &k).unwrap();
        // 2 + 0.5·2 (tap 4 is the center)
        assert!((out.0.data()[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn filter_hand_computed_interior() {
        // 3×3 single channel latent, kernel only at the center position.
        let z = Tensor::new(&[1, 3, 3], (1..=9).map(|v| v as f64).collect()).unwrap();
        let mut k = Tensor::zeros(&[9, 3, 3]);
        let taps = [1.0, 0.0, -1.0, 0.5, 0.0, 0.5, 0.0, 2.0, 0.0];
        for (o, &v) in taps.iter().enumerate() {
            k.data_mut()[o * 9 + 4] = v;
        }
        let out = elementwise_filter(&LatentMap(z), &PixelKernelField::new(k, 3).unwrap()).unwrap();
        // 5 + (1·1 − 1·3 + 0.5·4 + 0.5·6 + 2·8) = 5 + 19
        assert!((out.0.data()[4] - 24.0).abs() < 1e-12);
        assert_eq!(out.0.data()[0], 1.0);
    }

    #[test]
    fn even_kernel_rejected() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(t(&[1, 3, 3], 0.1));
        let k = g.constant(t(&[4, 3, 3], 0.1));
        assert!(g.elementwise_filter(z, k, 2).is_err());
        assert!(PixelKernelField::new(t(&[4, 3, 3], 0.1), 2).is_err());
    }

    #[test]
    fn elementwise_filter_gradients() {
        let report = check_gradients(vec![t(&[2, 4, 3], 0.9), t(&[18, 4, 3], 0.31)], |g, v| {
            let y = g.elementwise_filter(v[0], v[1], 3)?;
            g.dot_const(y, &t(&[2, 4, 3], 1.7))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn delta_highpass_has_zero_dc_gain() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(t(&[18, 2, 2], 3.3));
        let low = g.softmax_channel_groups(logits, 9).unwrap();
        let high = highpass_from_lowpass(&mut g, low, 3, HighpassMode::Delta).unwrap();
        let field = PixelKernelField::new(g.value(high).clone(), 3).unwrap();
        assert!(field.group_sums().iter().all(|s| s.abs() < 1e-12));
        let lit = highpass_from_lowpass(&mut g, low, 3, HighpassMode::Literal).unwrap();
        let field = PixelKernelField::new(g.value(lit).clone(), 3).unwrap();
        assert!(field.group_sums().iter().all(|s| (s - 8.0).abs() < 1e-12));
    }
}
