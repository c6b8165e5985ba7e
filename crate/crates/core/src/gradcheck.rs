//! Central finite-difference gradient checking in double precision.

use crate::error::Result;
use crate::tensorcore::{Graph, Tensor, TensorId};

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// (input index, element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Denominator floor for the relative error, keeps exact zeros comparable.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares the reverse-mode gradient of `f` against central differences
/// for every element of every input.
///
/// `f` receives the graph and one parameter node per input and must return
/// a scalar node.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId>,
{
    let mut g = Graph::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&i| g.grad(i).expect("param")).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &ids)?;
        Ok(g.value(loss).item())
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let orig = t.data()[e];
            work[ti].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ti].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((ti, e));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
