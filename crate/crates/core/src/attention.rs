//! Unmask-attentional embedding.
//!
//! Every pixel attends over the feature map with a query taken from the
//! masked-out features `F_M = (1 − M) ⊙ F`:
//! `E = softmax(F_M · Fᵀ / √C) · F`. There are no learned projections, so a
//! missing pixel (zero query) receives the plain mean of the keys.

use crate::autodiff::{gemm, Graph, Real, Tensor, Var};
use crate::error::{ensure, DearError, Result};
use crate::features::FeatureMap;
use crate::imaging::Mask;

/// Attention settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    /// Largest `√(queries · keys)` accepted; 4096 covers a full 64×64 map.
    pub budget: usize,
    /// Keys are taken from every `key_stride`-th row and column.
    pub key_stride: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            budget: 4096,
            key_stride: 1,
        }
    }
}

/// Flat indices of the key pixels of an `h×w` map.
pub fn key_indices(h: usize, w: usize, stride: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h.div_ceil(stride) * w.div_ceil(stride));
    for y in (0..h).step_by(stride) {
        for x in (0..w).step_by(stride) {
            idx.push(y * w + x);
        }
    }
    idx
}

fn check_budget(queries: usize, keys: usize, cfg: AttentionConfig) -> Result<()> {
    ensure!(cfg.key_stride >= 1, "attention key stride must be positive");
    if (queries as u128) * (keys as u128) > (cfg.budget as u128).pow(2) {
        return Err(DearError::ResourceLimit(format!(
            "attention over {queries} queries and {keys} keys exceeds the budget of {} pixels; \
             lower the input resolution or raise the key stride",
            cfg.budget
        )));
    }
    Ok(())
}

/// Rows `(1 − M) ⊙ F`, i.e. `F` with the columns of missing pixels zeroed.
pub fn mask_features<T: Real>(f: &FeatureMap<T>, mask: &Mask) -> Result<FeatureMap<T>> {
    let (c, h, w) = f.0.dims3()?;
    ensure!(
        (mask.height(), mask.width()) == (h, w),
        "mask {}x{} does not match features {h}x{w}",
        mask.height(),
        mask.width()
    );
    let keep = keep_weights::<T>(mask);
    let n = h * w;
    Ok(FeatureMap(Tensor::from_fn(&[c, h, w], |i| f.0.data()[i] * keep[i % n])))
}

fn keep_weights<T: Real>(mask: &Mask) -> Vec<T> {
    mask.data()
        .iter()
        .map(|&m| if m != 0 { T::zero() } else { T::one() })
        .collect()
}

/// `C×N` channel-major → `N×C` rows, optionally restricted to `idx`.
fn rows_of<T: Real>(src: &[T], c: usize, n: usize, idx: Option<&[usize]>) -> Vec<T> {
    match idx {
        None => {
            let mut out = vec![T::zero(); n * c];
            for ch in 0..c {
                for p in 0..n {
                    out[p * c + ch] = src[ch * n + p];
                }
            }
            out
        }
        Some(idx) => {
            let mut out = vec![T::zero(); idx.len() * c];
            for (r, &p) in idx.iter().enumerate() {
                for ch in 0..c {
                    out[r * c + ch] = src[ch * n + p];
                }
            }
            out
        }
    }
}

/// Row-wise numerically stable softmax in place.
fn softmax_rows<T: Real>(x: &mut [T], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

impl<T: Real> Graph<T> {
    /// Unmask attention over a `C×H×W` feature map; returns `E` with the same
    /// shape.
    pub fn unmask_attend(&mut self, f: Var, mask: &Mask, cfg: AttentionConfig) -> Result<Var> {
        let (c, h, w) = self.value(f).dims3()?;
        ensure!(
            (mask.height(), mask.width()) == (h, w),
            "mask {}x{} does not match features {h}x{w}",
            mask.height(),
            mask.width()
        );
        let n = h * w;
        let keys = (cfg.key_stride > 1).then(|| key_indices(h, w, cfg.key_stride));
        let nk = keys.as_ref().map_or(n, Vec::len);
        check_budget(n, nk, cfg)?;

        let keep = keep_weights::<T>(mask);
        let scale = T::one() / T::from_usize(c).expect("channel count").sqrt();
        let src = self.value(f).data();
        let mut q = rows_of(src, c, n, None);
        for (p, row) in q.chunks_mut(c).enumerate() {
            for v in row.iter_mut() {
                *v *= keep[p] * scale;
            }
        }
        let kv = rows_of(src, c, n, keys.as_deref());
        let mut probs = vec![T::zero(); n * nk];
        gemm(false, true, n, nk, c, &q, &kv, T::zero(), &mut probs);
        softmax_rows(&mut probs, nk);
        let mut e = vec![T::zero(); n * c];
        gemm(false, false, n, c, nk, &probs, &kv, T::zero(), &mut e);
        let out = Tensor::from_fn(&[c, h, w], |i| e[(i % n) * c + i / n]);

        Ok(self.push(out, &[f], move |a| {
            let de = rows_of(a.grad.data(), c, n, None);
            // dP = dE · Vᵀ, then through the row softmax.
            let mut ds = vec![T::zero(); n * nk];
            gemm(false, true, n, nk, c, &de, &kv, T::zero(), &mut ds);
            for (srow, prow) in ds.chunks_mut(nk).zip(probs.chunks(nk)) {
                let dot: T = srow.iter().zip(prow).map(|(&d, &p)| d * p).sum();
                for (d, &p) in srow.iter_mut().zip(prow) {
                    *d = p * (*d - dot);
                }
            }
            // Query path: dQ = dS · K (already carries the 1/√C through q).
            let mut dq = vec![T::zero(); n * c];
            gemm(false, false, n, c, nk, &ds, &kv, T::zero(), &mut dq);
            // Key path dSᵀ · Q plus value path Pᵀ · dE.
            let mut dkv = vec![T::zero(); nk * c];
            gemm(true, false, nk, c, n, &ds, &q, T::zero(), &mut dkv);
            gemm(true, false, nk, c, n, &probs, &de, T::one(), &mut dkv);

            let mut df = vec![T::zero(); c * n];
            for p in 0..n {
                let s = keep[p] * scale;
                for ch in 0..c {
                    df[ch * n + p] = dq[p * c + ch] * s;
                }
            }
            for r in 0..nk {
                let p = keys.as_ref().map_or(r, |k| k[r]);
                for ch in 0..c {
                    df[ch * n + p] += dkv[r * c + ch];
                }
            }
            vec![Some(Tensor::from_parts(&[c, h, w], df))]
        }))
    }
}

/// Graph-free [`Graph::unmask_attend`].
pub fn unmask_attend<T: Real>(f: &FeatureMap<T>, mask: &Mask, cfg: AttentionConfig) -> Result<FeatureMap<T>> {
    let mut g = Graph::new();
    let v = g.constant(f.0.clone());
    let e = g.unmask_attend(v, mask, cfg)?;
    Ok(FeatureMap(g.value(e).clone()))
}

/// Attention weights `softmax(F_M · Fᵀ / √C)` as an `N×N_k` row-major matrix.
pub fn attention_weights<T: Real>(f: &FeatureMap<T>, mask: &Mask, cfg: AttentionConfig) -> Result<Tensor<T>> {
    let (c, h, w) = f.0.dims3()?;
    let n = h * w;
    let keys = (cfg.key_stride > 1).then(|| key_indices(h, w, cfg.key_stride));
    let nk = keys.as_ref().map_or(n, Vec::len);
    check_budget(n, nk, cfg)?;
    let fm = mask_features(f, mask)?;
    let q = rows_of(fm.0.data(), c, n, None);
    let k = rows_of(f.0.data(), c, n, keys.as_deref());
    let mut probs = vec![T::zero(); n * nk];
    gemm(false, true, n, nk, c, &q, &k, T::zero(), &mut probs);
    let scale = T::one() / T::from_usize(c).expect("channel count").sqrt();
    for v in probs.iter_mut() {
        *v *= scale;
    }
    softmax_rows(&mut probs, nk);
    Tensor::new(&[n, nk], probs)
}
