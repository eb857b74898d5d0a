//! Central-difference gradient checker.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Graph, Result, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over all checked elements of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (tensor index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences with step `eps` for every element of `params`.
///
/// `f` receives a fresh graph and one [`Var`] per entry of `params` (in
/// order) and must return a scalar node. It is evaluated twice at the
/// unperturbed point; differing results are reported as
/// [`Error::NonDeterministic`].
pub fn grad_check<F>(mut f: F, params: &mut [Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("finite-difference step {} outside [1e-7, 1e-3]", eps)));
    }
    let eval = |params: &[Tensor], f: &mut F| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
        let loss = f(&mut g, &vars)?;
        if g.shape(loss).iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(g.shape(loss).to_vec()));
        }
        Ok((g, vars, loss))
    };

    let (mut g, vars, loss) = eval(params, &mut f)?;
    let base = g.value(loss)[0];
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params.iter())
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let (g2, _, l2) = eval(params, &mut f)?;
    let again = g2.value(l2)[0];
    if again.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic(format!("loss {} then {}", base, again)));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for pi in 0..params.len() {
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            params[pi].data_mut()[ei] = orig + eps;
            let (gp, _, lp) = eval(params, &mut f)?;
            let fp = gp.value(lp)[0];
            params[pi].data_mut()[ei] = orig - eps;
            let (gm, _, lm) = eval(params, &mut f)?;
            let fm = gm.value(lm)[0];
            params[pi].data_mut()[ei] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi][ei];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
