//! Central finite-difference verification of autograd gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Probe at most this many coordinates per tensor (evenly strided).
    pub max_coords_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-6,
            max_coords_per_param: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// max over probed coordinates of |g_auto − g_fd| / max(1, |g_fd|)
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub coords_checked: usize,
}

/// Compare autograd gradients of the scalar built by `f` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h`, in 64-bit precision.
pub fn check_gradients<F>(
    f: F,
    theta: &ParamStore<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &Bound<'_, f64>) -> Result<Var>,
{
    if theta.numel() == 0 {
        return Ok(GradCheckReport::default());
    }
    let mut graph = Graph::verifying();
    let bound = theta.bind(&mut graph);
    let loss = f(&mut graph, &bound)?;
    graph.backward(loss)?;
    let auto = bound.grads(&graph);

    // Probes only need the scalar; a non-finite intermediate shows up in it.
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = store.bind(&mut g);
        let out = f(&mut g, &b)?;
        let v = g.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::Numerical("non-finite loss at probe point".into()));
        }
        Ok(v)
    };

    let mut work = theta.clone();
    let mut report = GradCheckReport::default();
    for (p, grad) in auto.iter().enumerate() {
        let n = theta.tensors()[p].len();
        let stride = match opts.max_coords_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = work.tensors()[p].data()[i];
            work.tensors_mut()[p].data_mut()[i] = orig + opts.h;
            let plus = eval(&work)?;
            work.tensors_mut()[p].data_mut()[i] = orig - opts.h;
            let minus = eval(&work)?;
            work.tensors_mut()[p].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * opts.h);
            let err = (grad[i] - fd).abs() / fd.abs().max(1.0);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst_param = Some(theta.names()[p].clone());
                }
            }
        }
    }
    Ok(report)
}
