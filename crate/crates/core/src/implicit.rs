//! Coordinate-conditioned color prediction with a local ensemble.
//!
//! A query `q` is decoded from its four surrounding LR pixel centers `p`:
//! each neighbor predicts `c_q(p) = φ_θ(F_p, E_p, W_p, χ(p,q))` and the
//! predictions are blended with normalized geometric weights.

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::config::{EnsembleMode, ModelConfig};
use crate::error::{ensure, Result};
use crate::imaging::continuous_index;
use crate::nn::{Bound, Initializer, Linear};

/// Neighbor slots are ordered `(y0,x0), (y0,x1), (y1,x0), (y1,x1)`.
pub const NEIGHBORS: usize = 4;

/// Queries resolved against an LR lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBatch {
    pub lr_shape: (usize, usize),
    /// `(row, column)` coordinates in `[-1,1]²`.
    pub coords: Vec<[f64; 2]>,
    /// Flat LR pixel index of each neighbor.
    pub neighbor_idx: Vec<[usize; NEIGHBORS]>,
    /// `(q − p)` per axis in units of the LR pixel pitch; within `[-1,1]`.
    pub rel_offsets: Vec<[[f64; 2]; NEIGHBORS]>,
    /// Nonnegative, summing to one per query.
    pub weights: Vec<[f64; NEIGHBORS]>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Index-space distance below which a query counts as a pixel center or a
/// cell midpoint.
const CENTER_SNAP: f64 = 1e-9;

/// Finds the four neighbors of every query and their ensemble weights.
///
/// Neighbor indices are clamped at the borders (duplicates allowed) while the
/// area weights come from the unclamped cell, so they always sum to one.
pub fn build_queries(lr_shape: (usize, usize), coords: &[[f64; 2]], mode: EnsembleMode) -> Result<QueryBatch> {
    let (h, w) = lr_shape;
    ensure!(h >= 1 && w >= 1, "LR lattice must be at least 1x1");
    ensure!(
        coords
            .iter()
            .all(|q| q.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v))),
        "query coordinates must lie in [-1, 1]"
    );
    let mut batch = QueryBatch {
        lr_shape,
        coords: coords.to_vec(),
        neighbor_idx: Vec::with_capacity(coords.len()),
        rel_offsets: Vec::with_capacity(coords.len()),
        weights: Vec::with_capacity(coords.len()),
    };
    let axis = |coord: f64, n: usize| {
        let f = continuous_index(coord, n);
        // Pixel centers and cell midpoints computed in floating point land
        // within an ulp of a half-integer index; snap them so center queries
        // are exactly one-hot and midpoints exactly uniform.
        let half = (2.0 * f).round() / 2.0;
        let f = if (f - half).abs() < CENTER_SNAP { half } else { f };
        let i0 = f.floor();
        let t = f - i0;
        let clamp = |i: f64| i.clamp(0.0, (n - 1) as f64) as usize;
        (f, [clamp(i0), clamp(i0 + 1.0)], t)
    };
    for q in coords {
        let (fy, rows, ty) = axis(q[0], h);
        let (fx, cols, tx) = axis(q[1], w);
        let mut idx = [0; NEIGHBORS];
        let mut rel = [[0.0; 2]; NEIGHBORS];
        for (s, (&r, &c)) in [(0, 0), (0, 1), (1, 0), (1, 1)]
            .iter()
            .map(|&(a, b)| (&rows[a], &cols[b]))
            .enumerate()
        {
            idx[s] = r * w + c;
            rel[s] = [fy - r as f64, fx - c as f64];
        }
        let wts = match mode {
            EnsembleMode::Area => [(1.0 - ty) * (1.0 - tx), (1.0 - ty) * tx, ty * (1.0 - tx), ty * tx],
            EnsembleMode::Invdist => inverse_distance(&rel),
        };
        batch.neighbor_idx.push(idx);
        batch.rel_offsets.push(rel);
        batch.weights.push(wts);
    }
    Ok(batch)
}

fn inverse_distance(rel: &[[f64; 2]; NEIGHBORS]) -> [f64; NEIGHBORS] {
    let d: Vec<f64> = rel.iter().map(|r| r[0].hypot(r[1])).collect();
    let mut w = [0.0; NEIGHBORS];
    if let Some(hit) = d.iter().position(|&v| v < 1e-12) {
        // On a pixel center. Border clamping can repeat that pixel in later
        // slots; the first occurrence takes the whole weight.
        w[hit] = 1.0;
        return w;
    }
    let total: f64 = d.iter().map(|v| 1.0 / v).sum();
    for (wi, &di) in w.iter_mut().zip(&d) {
        *wi = (1.0 / di) / total;
    }
    w
}

impl<T: Real> Graph<T> {
    /// Blends per-neighbor predictions `pred` (`4N×K`, slot-major: row
    /// `s·N + n` is slot `s` of query `n`) into `N×K`.
    pub fn ensemble(&mut self, pred: Var, weights: &[[f64; NEIGHBORS]]) -> Result<Var> {
        let n = weights.len();
        let (rows, k) = self.value(pred).dims2()?;
        ensure!(rows == NEIGHBORS * n, "ensemble: {rows} predictions for {n} queries");
        let wts: Vec<T> = (0..NEIGHBORS)
            .flat_map(|s| weights.iter().map(move |w| T::lit(w[s])))
            .collect();
        let p = self.value(pred).data();
        let mut out = vec![T::zero(); n * k];
        for s in 0..NEIGHBORS {
            for q in 0..n {
                let wv = wts[s * n + q];
                let src = &p[(s * n + q) * k..][..k];
                for (o, &v) in out[q * k..(q + 1) * k].iter_mut().zip(src) {
                    *o += wv * v;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(&[n, k], out), &[pred], move |a| {
            let dy = a.grad.data();
            let mut dp = vec![T::zero(); NEIGHBORS * n * k];
            for s in 0..NEIGHBORS {
                for q in 0..n {
                    let wv = wts[s * n + q];
                    for j in 0..k {
                        dp[(s * n + q) * k + j] = wv * dy[q * k + j];
                    }
                }
            }
            vec![Some(Tensor::from_parts(&[NEIGHBORS * n, k], dp))]
        }))
    }
}

/// Graph-free [`Graph::ensemble`] on `N×4×3` per-neighbor colors.
pub fn ensemble(per_neighbor: &[[[f64; 3]; NEIGHBORS]], weights: &[[f64; NEIGHBORS]]) -> Result<Vec<[f64; 3]>> {
    ensure!(per_neighbor.len() == weights.len(), "ensemble: length mismatch");
    Ok(per_neighbor
        .iter()
        .zip(weights)
        .map(|(cols, w)| {
            let mut out = [0.0; 3];
            for (c, &wi) in cols.iter().zip(w) {
                for (o, &v) in out.iter_mut().zip(c) {
                    *o += wi * v;
                }
            }
            out
        })
        .collect())
}

/// The per-neighbor color MLP `φ_θ`.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real>(init: &mut Initializer<'_, T>, cfg: &ModelConfig) -> Self {
        let mut dims = vec![cfg.mlp_input_dim()];
        dims.extend(std::iter::repeat_n(cfg.mlp_hidden, cfg.mlp_layers - 1));
        dims.push(3);
        let last = dims.len() - 2;
        // A small output layer starts the prediction near zero instead of at
        // random colors of unit scale.
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(init, &format!("mlp.{i}"), d[0], d[1], if i == last { 0.1 } else { 1.0 }))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = g.relu(h);
            }
            h = layer.forward(g, p, h)?;
        }
        Ok(h)
    }

    /// `4N×(2C+3)` MLP input rows, slot-major.
    pub fn inputs<T: Real>(g: &mut Graph<T>, f: Var, e: Var, w: Var, q: &QueryBatch) -> Result<Var> {
        let (_, h, wd) = g.value(f).dims3()?;
        ensure!((h, wd) == q.lr_shape, "features {h}x{wd} do not match query lattice {:?}", q.lr_shape);
        ensure!(g.value(e).shape() == g.value(f).shape(), "E and F shapes differ");
        ensure!(g.value(w).shape() == [1, h, wd], "importance map must be 1x{h}x{wd}");
        let idx: Vec<usize> = (0..NEIGHBORS)
            .flat_map(|s| q.neighbor_idx.iter().map(move |n| n[s]))
            .collect();
        let chi: Vec<T> = (0..NEIGHBORS)
            .flat_map(|s| q.rel_offsets.iter().flat_map(move |r| [T::lit(r[s][0]), T::lit(r[s][1])]))
            .collect();
        let fv = g.gather_pixels(f, &idx)?;
        let ev = g.gather_pixels(e, &idx)?;
        let wv = g.gather_pixels(w, &idx)?;
        let chi = g.constant(Tensor::from_parts(&[idx.len(), 2], chi));
        g.concat_cols(&[fv, ev, wv, chi])
    }

    /// Per-neighbor colors (`4N×3`, slot-major) and their ensemble (`N×3`).
    pub fn predict<T: Real>(&self, g: &mut Graph<T>, p: &Bound, f: Var, e: Var, w: Var, q: &QueryBatch) -> Result<(Var, Var)> {
        let x = Self::inputs(g, f, e, w, q)?;
        let per_neighbor = self.forward(g, p, x)?;
        let colors = g.ensemble(per_neighbor, &q.weights)?;
        Ok((per_neighbor, colors))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::pixel_center;

    #[test]
    fn center_query_is_one_hot() {
        let q = [pixel_center(2, 5), pixel_center(1, 4)];
        let b = build_queries((5, 4), &[q], EnsembleMode::Area).unwrap();
        assert_eq!(b.weights[0], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(b.neighbor_idx[0][0], 2 * 4 + 1);
        assert_eq!(b.rel_offsets[0][0], [0.0, 0.0]);
        let b = build_queries((5, 4), &[q], EnsembleMode::Invdist).unwrap();
        assert_eq!(b.weights[0], [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cell_center_is_uniform() {
        let q = [0.5 * (pixel_center(1, 4) + pixel_center(2, 4)), 0.5 * (pixel_center(0, 4) + pixel_center(1, 4))];
        for mode in [EnsembleMode::Area, EnsembleMode::Invdist] {
            let b = build_queries((4, 4), &[q], mode).unwrap();
            for wv in b.weights[0] {
                assert!((wv - 0.25).abs() < 1e-12);
            }
            assert_eq!(b.neighbor_idx[0], [4, 5, 8, 9]);
        }
    }

    #[test]
    fn area_weights_quarter_three_quarter() {
        // ty = 0.25, tx = 0.75 inside the cell spanned by pixels (1,1)..(2,2) of 4×4.
        let y = -1.0 + (2.0 * 1.25 + 1.0) / 4.0;
        let x = -1.0 + (2.0 * 1.75 + 1.0) / 4.0;
        let b = build_queries((4, 4), &[[y, x]], EnsembleMode::Area).unwrap();
        let expect = [0.75 * 0.25, 0.75 * 0.75, 0.25 * 0.25, 0.25 * 0.75];
        for (a, e) in b.weights[0].iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
        assert_eq!(b.rel_offsets[0][0], [0.25, 0.75]);
        assert_eq!(b.rel_offsets[0][3], [-0.75, -0.25]);
    }

    #[test]
    fn border_clamps_but_weights_sum_to_one() {
        let b = build_queries((3, 3), &[[-1.0, 1.0]], EnsembleMode::Area).unwrap();
        let s: f64 = b.weights[0].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(b.neighbor_idx[0].iter().all(|&i| i == 2));
        assert!(b.rel_offsets[0].iter().flatten().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn out_of_domain_rejected() {
        assert!(build_queries((3, 3), &[[1.5, 0.0]], EnsembleMode::Area).is_err());
    }

    #[test]
    fn ensemble_hand_computed() {
        let cols = [[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]]];
        let out = ensemble(&cols, &[[0.1, 0.2, 0.3, 0.4]]).unwrap();
        assert!((out[0][0] - 0.5).abs() < 1e-12);
        assert!((out[0][1] - 0.6).abs() < 1e-12);
        assert!((out[0][2] - 0.7).abs() < 1e-12);
    }
}
