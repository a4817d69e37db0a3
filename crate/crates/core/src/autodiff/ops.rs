//! Elementwise, reduction, and shape operations.

use super::{gemm, Graph, Real, Tensor, Var};
use crate::error::{ensure, Result};

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure!(
            self.value(a).shape() == self.value(b).shape(),
            "add: shapes {:?} and {:?} differ",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, &[a, b], |a| {
            vec![
                a.needs[0].then(|| a.grad.clone()),
                a.needs[1].then(|| a.grad.clone()),
            ]
        }))
    }

    /// `alpha·a + beta·b`.
    pub fn weighted_sum(&mut self, a: Var, alpha: T, b: Var, beta: T) -> Result<Var> {
        ensure!(
            self.value(a).shape() == self.value(b).shape(),
            "weighted_sum: shape mismatch"
        );
        let out = self.value(a).zip_map(self.value(b), |x, y| alpha * x + beta * y);
        Ok(self.push(out, &[a, b], move |a| {
            vec![
                a.needs[0].then(|| a.grad.map(|g| g * alpha)),
                a.needs[1].then(|| a.grad.map(|g| g * beta)),
            ]
        }))
    }

    /// `scale·x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, &[x], move |a| vec![Some(a.grad.map(|g| g * scale))])
    }

    /// `x + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        ensure!(self.value(x).shape() == c.shape(), "add_const: shape mismatch");
        let out = self.value(x).zip_map(c, |a, b| a + b);
        Ok(self.push(out, &[x], |a| vec![Some(a.grad.clone())]))
    }

    /// `x ⊙ c` for a constant tensor `c` of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        ensure!(self.value(x).shape() == c.shape(), "mul_const: shape mismatch");
        let out = self.value(x).zip_map(c, |a, b| a * b);
        let c = c.clone();
        Ok(self.push(out, &[x], move |a| vec![Some(a.grad.zip_map(&c, |g, m| g * m))]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, &[x], |a| {
            vec![Some(a.grad.zip_map(a.output, |g, y| {
                if y > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }))]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, &[x], |a| {
            vec![Some(a.grad.zip_map(a.output, |g, y| g * y * (T::one() - y)))]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let orig = self.value(x).shape().to_vec();
        Ok(self.push(out, &[x], move |a| {
            vec![Some(Tensor::from_parts(&orig, a.grad.data().to_vec()))]
        }))
    }

    /// Top-left `height×width` crop of a `C×H×W` tensor.
    pub fn crop(&mut self, x: Var, height: usize, width: usize) -> Result<Var> {
        let (_, h, w) = self.value(x).dims3()?;
        if (h, w) == (height, width) {
            return Ok(x);
        }
        let out = self.value(x).crop(height, width)?;
        Ok(self.push(out, &[x], move |a| {
            vec![Some(a.grad.pad_to(h, w).expect("crop adjoint"))]
        }))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        ensure!(k == k2, "matmul: inner dimensions {k} and {k2} differ");
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, n, k, self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        Ok(self.push(Tensor::from_parts(&[m, n], out), &[a, b], move |a| {
            let dy = a.grad.data();
            let da = a.needs[0].then(|| {
                let mut da = vec![T::zero(); m * k];
                gemm(false, true, m, k, n, dy, a.inputs[1].data(), T::zero(), &mut da);
                Tensor::from_parts(&[m, k], da)
            });
            let db = a.needs[1].then(|| {
                let mut db = vec![T::zero(); k * n];
                gemm(true, false, k, n, m, a.inputs[0].data(), dy, T::zero(), &mut db);
                Tensor::from_parts(&[k, n], db)
            });
            vec![da, db]
        }))
    }

    /// Affine layer `x[m×in] · w[in×out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(x).dims2()?;
        let (k2, n) = self.value(w).dims2()?;
        ensure!(k == k2, "linear: input width {k} does not match weight rows {k2}");
        ensure!(self.value(b).shape() == [n], "linear: bias must have shape [{n}]");
        let mut out = vec![T::zero(); m * n];
        let bias = self.value(b).data();
        for row in out.chunks_mut(n) {
            row.copy_from_slice(bias);
        }
        gemm(false, false, m, n, k, self.value(x).data(), self.value(w).data(), T::one(), &mut out);
        Ok(self.push(Tensor::from_parts(&[m, n], out), &[x, w, b], move |a| {
            let dy = a.grad.data();
            let dx = a.needs[0].then(|| {
                let mut dx = vec![T::zero(); m * k];
                gemm(false, true, m, k, n, dy, a.inputs[1].data(), T::zero(), &mut dx);
                Tensor::from_parts(&[m, k], dx)
            });
            let dw = a.needs[1].then(|| {
                let mut dw = vec![T::zero(); k * n];
                gemm(true, false, k, n, m, a.inputs[0].data(), dy, T::zero(), &mut dw);
                Tensor::from_parts(&[k, n], dw)
            });
            let db = a.needs[2].then(|| {
                let mut db = vec![T::zero(); n];
                for row in dy.chunks(n) {
                    for (acc, &g) in db.iter_mut().zip(row) {
                        *acc += g;
                    }
                }
                Tensor::from_parts(&[n], db)
            });
            vec![dx, dw, db]
        }))
    }

    /// Column-wise concatenation of rank-2 tensors sharing their row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat_cols needs at least one input");
        let m = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rows, cols) = self.value(p).dims2()?;
            ensure!(rows == m, "concat_cols: row counts {m} and {rows} differ");
            widths.push(cols);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); m * total];
        let mut offset = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..m {
                out[r * total + offset..r * total + offset + wd].copy_from_slice(&src[r * wd..(r + 1) * wd]);
            }
            offset += wd;
        }
        Ok(self.push(Tensor::from_parts(&[m, total], out), parts, move |a| {
            let dy = a.grad.data();
            let mut offset = 0;
            widths
                .iter()
                .enumerate()
                .map(|(i, &wd)| {
                    let start = offset;
                    offset += wd;
                    a.needs[i].then(|| {
                        let mut g = vec![T::zero(); m * wd];
                        for r in 0..m {
                            g[r * wd..(r + 1) * wd]
                                .copy_from_slice(&dy[r * total + start..r * total + start + wd]);
                        }
                        Tensor::from_parts(&[m, wd], g)
                    })
                })
                .collect()
        }))
    }

    /// Gathers pixel columns of a channel-major map `x` (`C×H×W`) into rows:
    /// output row `r` is the `C`-vector at flat pixel index `idx[r]`.
    pub fn gather_pixels(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let n = h * w;
        ensure!(idx.iter().all(|&i| i < n), "gather_pixels: index out of range");
        let src = self.value(x).data();
        let mut out = vec![T::zero(); idx.len() * c];
        for (r, &p) in idx.iter().enumerate() {
            for ch in 0..c {
                out[r * c + ch] = src[ch * n + p];
            }
        }
        let idx = idx.to_vec();
        Ok(self.push(Tensor::from_parts(&[idx.len(), c], out), &[x], move |a| {
            let dy = a.grad.data();
            let mut dx = vec![T::zero(); c * n];
            for (r, &p) in idx.iter().enumerate() {
                for ch in 0..c {
                    dx[ch * n + p] += dy[r * c + ch];
                }
            }
            vec![Some(Tensor::from_parts(&[c, h, w], dx))]
        }))
    }

    /// Softmax over consecutive channel groups of size `group` of a
    /// `(G·group)×H×W` tensor, independently at every pixel.
    pub fn softmax_channel_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        ensure!(group > 0 && c % group == 0, "softmax_channel_groups: {c} channels not divisible by {group}");
        let plane = h * w;
        let out = softmax_groups_forward(self.value(x).data(), c / group, group, plane);
        Ok(self.push(Tensor::from_parts(&[c, h, w], out), &[x], move |a| {
            let y = a.output.data();
            let dy = a.grad.data();
            let mut dx = vec![T::zero(); y.len()];
            for gi in 0..c / group {
                let base = gi * group * plane;
                for p in 0..plane {
                    let mut dot = T::zero();
                    for o in 0..group {
                        let i = base + o * plane + p;
                        dot += y[i] * dy[i];
                    }
                    for o in 0..group {
                        let i = base + o * plane + p;
                        dx[i] = y[i] * (dy[i] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(&[c, h, w], dx))]
        }))
    }

    /// Mean absolute difference between `x` and a constant target.
    pub fn mean_abs_error(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        ensure!(
            self.value(x).shape() == target.shape(),
            "mean_abs_error: shapes {:?} and {:?} differ",
            self.value(x).shape(),
            target.shape()
        );
        let n = T::from_usize(target.numel()).unwrap_or_else(T::one);
        let diff = self.value(x).zip_map(target, |a, b| a - b);
        let loss = diff.data().iter().map(|d| d.abs()).sum::<T>() / n;
        let shape = target.shape().to_vec();
        Ok(self.push(Tensor::scalar(loss), &[x], move |a| {
            let g = a.grad.item() / n;
            vec![Some(Tensor::from_parts(
                &shape,
                diff.data().iter().map(|&d| g * d.signum_or_zero()).collect(),
            ))]
        }))
    }

    /// `Σ x ⊙ c` for a constant `c`; a convenient scalar probe for
    /// gradient checks.
    pub fn dot_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        ensure!(self.value(x).shape() == c.shape(), "dot_const: shape mismatch");
        let v: T = self.value(x).data().iter().zip(c.data()).map(|(&a, &b)| a * b).sum();
        let c = c.clone();
        Ok(self.push(Tensor::scalar(v), &[x], move |a| {
            let g = a.grad.item();
            vec![Some(c.map(|w| w * g))]
        }))
    }
}

pub(crate) fn softmax_groups_forward<T: Real>(x: &[T], groups: usize, group: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for gi in 0..groups {
        let base = gi * group * plane;
        for p in 0..plane {
            let mut max = T::neg_infinity();
            for o in 0..group {
                max = max.max(x[base + o * plane + p]);
            }
            let mut sum = T::zero();
            for o in 0..group {
                let e = (x[base + o * plane + p] - max).exp();
                out[base + o * plane + p] = e;
                sum += e;
            }
            for o in 0..group {
                out[base + o * plane + p] = out[base + o * plane + p] / sum;
            }
        }
    }
    out
}

trait SignumOrZero {
    fn signum_or_zero(self) -> Self;
}

impl<T: Real> SignumOrZero for T {
    fn signum_or_zero(self) -> Self {
        if self > T::zero() {
            T::one()
        } else if self < T::zero() {
            -T::one()
        } else {
            T::zero()
        }
    }
}
