//! Central finite-difference verification of analytic gradients (64-bit).

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step, scaled by `max(1, |x|)`.
    pub step: f64,
    /// Gradients smaller than this in magnitude are compared absolutely.
    pub floor: f64,
    /// Probe at most this many evenly spaced elements per input tensor.
    pub probes_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-6,
            probes_per_input: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub probes: usize,
    /// `(input, element, analytic, numeric)` at the worst relative error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn check_gradients<F>(inputs: Vec<Tensor<f64>>, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_with(inputs, build, GradCheckOptions::default())
}

pub fn check_gradients_with<F>(
    inputs: Vec<Tensor<f64>>,
    build: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let mut report = GradCheckReport::default();
    let mut work = inputs;
    for i in 0..work.len() {
        let n = work[i].numel();
        let stride = match opts.probes_per_input {
            Some(p) if p > 0 && p < n => n.div_ceil(p),
            _ => 1,
        };
        for e in (0..n).step_by(stride) {
            let x0 = work[i].data()[e];
            let h = opts.step * x0.abs().max(1.0);
            work[i].data_mut()[e] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[e] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i].data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            report.probes += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((i, e, a, numeric));
            }
        }
    }
    Ok(report)
}
