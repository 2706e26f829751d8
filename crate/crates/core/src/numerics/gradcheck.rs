use super::{Graph, ParameterStore, Var};
use crate::error::{Error, Result};

/// Result of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub entries_checked: usize,
}

/// Denominator floor for the relative error, so entries whose true gradient
/// is (numerically) zero are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Checks every entry of every parameter of `store` against
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)`.
///
/// `f` builds the scalar objective on a fresh graph.
pub fn grad_check<F>(f: F, store: &ParameterStore, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, s)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("objective evaluated to {v}")));
        }
        Ok(v)
    };

    let mut analytic = store.clone();
    analytic.zero_grads();
    let mut g = Graph::new();
    let out = f(&mut g, &analytic)?;
    if !g.scalar(out).is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    let grads = g.backward(out)?;
    g.accumulate_param_grads(&grads, &mut analytic)?;

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        entries_checked: 0,
    };
    let ids: Vec<String> = store.iter().map(|p| p.id.clone()).collect();
    for id in ids {
        let n = store.get(&id)?.value.numel();
        for e in 0..n {
            let orig = store.get(&id)?.value.data()[e];
            probe.get_mut(&id)?.value.data_mut()[e] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(&id)?.value.data_mut()[e] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(&id)?.value.data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let exact = analytic.get(&id)?.grad.data()[e];
            let rel = (numeric - exact).abs() / numeric.abs().max(exact.abs()).max(REL_ERROR_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = Some(format!("{id}[{e}]"));
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
