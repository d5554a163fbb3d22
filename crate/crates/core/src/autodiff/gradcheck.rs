//! Central finite-difference gradient checking, independent of the tape's
//! backward pass: the oracle only ever evaluates forward losses.

use super::params::{ParamBind, ParamSet};
use super::tape::{Tape, ValId};
use crate::error::{CoreError, Result};
use crate::exec;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over all checked elements.
    pub max_rel_err: f64,
    /// Parameter name and flat index where the worst error occurred.
    pub worst_param: String,
    pub worst_index: usize,
    /// Number of scalar elements checked (frozen parameters excluded).
    pub checked: usize,
    /// Per-parameter worst relative error.
    pub per_param: Vec<(String, f64)>,
}

/// Compare reverse-mode gradients against central finite differences
/// `(f(p+eps) - f(p-eps)) / 2 eps` for every element of every parameter
/// with `requires_grad`. `build` must construct the full forward graph from
/// scratch and return `(tape, loss id, parameter binding)`.
pub fn grad_check<F>(params: &ParamSet, epsilon: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> (Tape, ValId, ParamBind) + Sync,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(CoreError::Parameter(format!(
            "epsilon {epsilon} outside [1e-6, 1e-3]"
        )));
    }

    // Two independent forward passes must agree bit-for-bit.
    let (tape_a, loss_a, bind) = build(params);
    let (tape_b, loss_b, _) = build(params);
    let la = tape_a.scalar(loss_a);
    let lb = tape_b.scalar(loss_b);
    if la.to_bits() != lb.to_bits() {
        return Err(CoreError::Determinism(format!(
            "forward passes disagree: {la} vs {lb}"
        )));
    }
    if !la.is_finite() {
        return Err(CoreError::Numeric(format!("loss is not finite: {la}")));
    }

    let grads = tape_a.backward(loss_a);

    // Flat work list of (param index, element index).
    let mut work = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        if !p.tensor.requires_grad {
            continue;
        }
        for ei in 0..p.tensor.numel() {
            work.push((pi, ei));
        }
    }

    let results = exec::par_map_ref(&work, |&(pi, ei)| {
        let mut local = params.clone();
        let orig = local.get(pi).tensor.data[ei];
        local.get_mut(pi).tensor.data[ei] = orig + epsilon;
        let (t_plus, l_plus, _) = build(&local);
        let f_plus = t_plus.scalar(l_plus);
        local.get_mut(pi).tensor.data[ei] = orig - epsilon;
        let (t_minus, l_minus, _) = build(&local);
        let f_minus = t_minus.scalar(l_minus);
        (f_plus - f_minus) / (2.0 * epsilon)
    });

    let mut max_rel = 0.0;
    let mut worst_param = String::new();
    let mut worst_index = 0;
    let mut per_param: Vec<(String, f64)> = Vec::new();
    for ((&(pi, ei), fd), _) in work.iter().zip(&results).zip(0..) {
        let analytic = grads
            .get(bind.id(pi))
            .map(|g| g[ei])
            .unwrap_or(0.0);
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
        let name = &params.get(pi).name;
        match per_param.last_mut() {
            Some((n, w)) if n == name => *w = w.max(rel),
            _ => per_param.push((name.clone(), rel)),
        }
        if rel > max_rel {
            max_rel = rel;
            worst_param = name.clone();
            worst_index = ei;
        }
    }

    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_param,
        worst_index,
        checked: work.len(),
        per_param,
    })
}
