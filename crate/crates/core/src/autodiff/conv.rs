//! 2-D convolution and transposed convolution on single `C×H×W` images,
//! lowered to GEMM through im2col.

use super::{gemm, Graph, Real, Tensor, Var};
use crate::error::{ensure, Result};

/// Output extent of a convolution along one axis, or `None` when the kernel
/// does not fit.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry of a square-kernel convolution over a `channels×height×width`
/// input producing an `out_height×out_width` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let out_height = conv_out_size(height, kernel, stride, pad);
        let out_width = conv_out_size(width, kernel, stride, pad);
        match (out_height, out_width) {
            (Some(out_height), Some(out_width)) => Ok(Self {
                channels,
                height,
                width,
                kernel,
                stride,
                pad,
                out_height,
                out_width,
            }),
            _ => Err(crate::DearError::invalid(format!(
                "kernel {kernel} (stride {stride}, pad {pad}) does not fit a {height}x{width} input"
            ))),
        }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `x` (`C×H×W`) into `cols` (`C·k·k × Ho·Wo`).
pub fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let (ho, wo) = (g.out_height, g.out_width);
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    for c in 0..g.channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `cols` back onto `x`, accumulating.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, x: &mut [T]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let (ho, wo) = (g.out_height, g.out_width);
    for c in 0..g.channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Real>(y: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        for v in &mut y[c * plane..(c + 1) * plane] {
            *v += b;
        }
    }
}

fn channel_sums<T: Real>(g: &[T], channels: usize, plane: usize) -> Vec<T> {
    (0..channels)
        .map(|c| g[c * plane..(c + 1) * plane].iter().copied().sum())
        .collect()
}

impl<T: Real> Graph<T> {
    /// Cross-correlation of `x` (`Cin×H×W`) with `weight` (`Cout×Cin×k×k`),
    /// plus an optional per-channel `bias`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (cin, h, w) = self.value(x).dims3()?;
        let wshape = self.value(weight).shape().to_vec();
        ensure!(
            wshape.len() == 4 && wshape[1] == cin && wshape[2] == wshape[3],
            "conv2d weight {:?} incompatible with {} input channels",
            wshape,
            cin
        );
        let cout = wshape[0];
        let geo = ConvGeometry::new(cin, h, w, wshape[2], stride, pad)?;
        if let Some(b) = bias {
            ensure!(self.value(b).shape() == [cout], "conv2d bias must have shape [{cout}]");
        }
        let (rows, ncols) = (geo.col_rows(), geo.col_cols());

        let cols = if geo.is_pointwise() {
            self.value(x).data().to_vec()
        } else {
            let mut cols = vec![T::zero(); rows * ncols];
            im2col(self.value(x).data(), &geo, &mut cols);
            cols
        };
        let mut y = vec![T::zero(); cout * ncols];
        gemm(false, false, cout, ncols, rows, self.value(weight).data(), &cols, T::zero(), &mut y);
        if let Some(b) = bias {
            add_channel_bias(&mut y, self.value(b).data(), ncols);
        }
        let out = Tensor::from_parts(&[cout, geo.out_height, geo.out_width], y);

        let mut parents = vec![x, weight];
        parents.extend(bias);
        let cols = if self.tracks(&[weight]) { cols } else { Vec::new() };
        Ok(self.push(out, &parents, move |a| {
            let dy = a.grad.data();
            let wdata = a.inputs[1].data();
            let dx = a.needs[0].then(|| {
                let mut dcols = vec![T::zero(); rows * ncols];
                gemm(true, false, rows, ncols, cout, wdata, dy, T::zero(), &mut dcols);
                if geo.is_pointwise() {
                    Tensor::from_parts(&[cin, h, w], dcols)
                } else {
                    let mut dx = vec![T::zero(); cin * h * w];
                    col2im(&dcols, &geo, &mut dx);
                    Tensor::from_parts(&[cin, h, w], dx)
                }
            });
            let dw = a.needs[1].then(|| {
                let mut dw = vec![T::zero(); cout * rows];
                gemm(false, true, cout, rows, ncols, dy, &cols, T::zero(), &mut dw);
                Tensor::from_parts(&[cout, cin, geo.kernel, geo.kernel], dw)
            });
            let mut grads = vec![dx, dw];
            if a.inputs.len() == 3 {
                grads.push(Some(Tensor::from_parts(&[cout], channel_sums(dy, cout, ncols))));
            }
            grads
        }))
    }

    /// Transposed convolution of `x` (`Cin×H×W`) with `weight`
    /// (`Cin×Cout×k×k`). The output extent is `(H−1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (cin, h, w) = self.value(x).dims3()?;
        let wshape = self.value(weight).shape().to_vec();
        ensure!(
            wshape.len() == 4 && wshape[0] == cin && wshape[2] == wshape[3],
            "conv_transpose2d weight {:?} incompatible with {} input channels",
            wshape,
            cin
        );
        let (cout, k) = (wshape[1], wshape[2]);
        ensure!(stride >= 1, "stride must be positive");
        let full_h = (h - 1) * stride + k;
        let full_w = (w - 1) * stride + k;
        ensure!(
            full_h > 2 * pad && full_w > 2 * pad,
            "padding {pad} too large for transposed convolution of {h}x{w}"
        );
        let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
        // The output grid plays the role of the input of the adjoint convolution.
        let geo = ConvGeometry::new(cout, oh, ow, k, stride, pad)?;
        ensure!(
            geo.out_height == h && geo.out_width == w,
            "inconsistent transposed convolution geometry"
        );
        if let Some(b) = bias {
            ensure!(
                self.value(b).shape() == [cout],
                "conv_transpose2d bias must have shape [{cout}]"
            );
        }
        let (rows, ncols) = (geo.col_rows(), geo.col_cols());

        let mut cols = vec![T::zero(); rows * ncols];
        gemm(true, false, rows, ncols, cin, self.value(weight).data(), self.value(x).data(), T::zero(), &mut cols);
        let mut y = vec![T::zero(); cout * oh * ow];
        col2im(&cols, &geo, &mut y);
        if let Some(b) = bias {
            add_channel_bias(&mut y, self.value(b).data(), oh * ow);
        }
        let out = Tensor::from_parts(&[cout, oh, ow], y);

        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.push(out, &parents, move |a| {
            let dy = a.grad.data();
            let mut dcols = vec![T::zero(); rows * ncols];
            im2col(dy, &geo, &mut dcols);
            let dx = a.needs[0].then(|| {
                let mut dx = vec![T::zero(); cin * ncols];
                gemm(false, false, cin, ncols, rows, a.inputs[1].data(), &dcols, T::zero(), &mut dx);
                Tensor::from_parts(&[cin, h, w], dx)
            });
            let dw = a.needs[1].then(|| {
                let mut dw = vec![T::zero(); cin * rows];
                gemm(false, true, cin, rows, ncols, a.inputs[0].data(), &dcols, T::zero(), &mut dw);
                Tensor::from_parts(&[cin, cout, k, k], dw)
            });
            let mut grads = vec![dx, dw];
            if a.inputs.len() == 3 {
                grads.push(Some(Tensor::from_parts(&[cout], channel_sums(dy, cout, oh * ow))));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as an oracle.
    fn conv_direct(
        x: &[f64],
        (cin, h, w): (usize, usize, usize),
        wt: &[f64],
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let ho = conv_out_size(h, k, stride, pad).unwrap();
        let wo = conv_out_size(w, k, stride, pad).unwrap();
        let mut y = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += wt[((o * cin + c) * k + ky) * k + kx]
                                        * x[(c * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    y[(o * ho + oy) * wo + ox] = s;
                }
            }
        }
        y
    }

    fn seq(n: usize, a: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * a).sin()).collect()
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        for &(k, stride, pad) in &[(3, 1, 1), (4, 2, 1), (7, 1, 3), (1, 1, 0)] {
            let (cin, h, w, cout) = (3, 9, 8, 2);
            let x = seq(cin * h * w, 0.7);
            let wt = seq(cout * cin * k * k, 0.3);
            let mut g = Graph::<f64>::new();
            let xv = g.constant(Tensor::new(&[cin, h, w], x.clone()).unwrap());
            let wv = g.constant(Tensor::new(&[cout, cin, k, k], wt.clone()).unwrap());
            let y = g.conv2d(xv, wv, None, stride, pad).unwrap();
            let want = conv_direct(&x, (cin, h, w), &wt, cout, k, stride, pad);
            for (a, b) in g.value(y).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride}");
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_transpose(y)> with shared weights.
        let (c_small, c_big, k, stride, pad) = (2, 3, 4, 2, 1);
        let (h, w) = (8, 6);
        let x = seq(c_big * h * w, 0.41);
        let wt = seq(c_small * c_big * k * k, 0.23);
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::new(&[c_big, h, w], x.clone()).unwrap());
        let wv = g.constant(Tensor::new(&[c_small, c_big, k, k], wt).unwrap());
        let cx = g.conv2d(xv, wv, None, stride, pad).unwrap();
        let (_, ho, wo) = g.value(cx).dims3().unwrap();
        assert_eq!((ho, wo), (4, 3));
        let y = seq(c_small * ho * wo, 0.17);
        let yv = g.constant(Tensor::new(&[c_small, ho, wo], y.clone()).unwrap());
        let ty = g.conv_transpose2d(yv, wv, None, stride, pad).unwrap();
        assert_eq!(g.value(ty).shape(), &[c_big, h, w]);
        let lhs: f64 = g.value(cx).data().iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.value(ty).data().iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        use crate::autodiff::gradcheck::check_gradients;
        let t = |shape: &[usize], a: f64| Tensor::from_fn(shape, |i| ((i as f64 + 0.5) * a).sin());
        let report = check_gradients(
            vec![t(&[2, 6, 5], 0.7), t(&[3, 2, 4, 4], 0.3), t(&[3], 0.9), t(&[3, 2, 4, 4], 0.45), t(&[2], 0.2)],
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                let z = g.conv_transpose2d(y, v[3], Some(v[4]), 2, 1)?;
                let probe = t(g.value(z).shape(), 1.1);
                g.dot_const(z, &probe)
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
