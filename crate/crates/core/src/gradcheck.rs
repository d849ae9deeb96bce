//! Central finite-difference gradient oracle.
//!
//! Independent of the backward pass by construction: it only ever calls
//! forward evaluation on perturbed inputs. Used by the test suites to
//! validate every differentiable block.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::{Graph, NodeId};
use crate::math;
use crate::tensor::Tensor;

/// Outcome of a finite-difference sweep: worst relative error seen.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f32,
    pub checked: usize,
}

/// Compare analytic gradients against central differences for a scalar
/// loss built by `build` from the given parameter tensors.
///
/// The comparison is per parameter tensor in the L2 sense,
/// `||a - n|| / max(||a||, ||n||)`, which is robust to the rounding
/// noise a 32-bit forward pass injects into near-zero components while
/// still catching any systematic backward error.
pub fn check_gradients<F>(
    params: &[Tensor],
    eps: f32,
    tol: f32,
    build: F,
) -> Result<GradCheckReport, String>
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let eval = |tensors: &[Tensor]| -> Result<f32, String> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &ids);
        g.scalar_value(loss).map_err(|e| format!("{e}"))
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids);
    g.backward(loss).map_err(|e| format!("{e}"))?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| g.grad(id)).collect();

    let mut max_rel = 0.0f32;
    let mut checked = 0usize;
    for (pi, p) in params.iter().enumerate() {
        let mut diff_sq = 0.0f64;
        let mut a_sq = 0.0f64;
        let mut n_sq = 0.0f64;
        for e in 0..p.len() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[e] += eps;
            let lp = eval(&plus)?;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[e] -= eps;
            let lm = eval(&minus)?;
            let numeric = ((lp - lm) as f64) / (2.0 * eps as f64);
            let a = analytic[pi].data()[e] as f64;
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
            checked += 1;
        }
        let den = math::sqrt64(a_sq.max(n_sq)).max(1e-4);
        let rel = (math::sqrt64(diff_sq) / den) as f32;
        if rel > tol {
            return Err(format!(
                "param {pi}: gradient mismatch, relative L2 error {rel} (analytic norm {}, numeric norm {})",
                math::sqrt64(a_sq),
                math::sqrt64(n_sq)
            ));
        }
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport { max_rel_err: max_rel, checked })
}
