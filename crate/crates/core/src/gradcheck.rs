//! Central-difference gradient checking against [`Graph::backward`].

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Floor on the denominator of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input number, flat element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Which elements of each input to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many elements per input, evenly strided.
    Strided(usize),
}

/// Builds a scalar from input leaves. Called once for the analytic pass and
/// twice per probed element for the numeric pass.
pub trait ScalarFn: Fn(&mut Graph, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Graph, &[Var]) -> Result<Var>> ScalarFn for F {}

fn eval(f: &impl ScalarFn, inputs: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Analytic gradients of `f` w.r.t. every input.
pub fn analytic_grads(f: &impl ScalarFn, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars.iter().zip(inputs).map(|(&v, t)| grads.get_or_zeros(v, t)).collect())
}

/// Compares `analytic` gradients against central differences
/// `(f(x+eps) − f(x−eps)) / (2·eps)` element by element.
pub fn compare_with_numeric(
    f: &impl ScalarFn,
    inputs: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
    coverage: Coverage,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps} outside [1e-6, 1e-3]")));
    }
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, checked: 0 };
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.len();
        let step = match coverage {
            Coverage::All => 1,
            Coverage::Strided(m) => n.div_ceil(m.max(1)).max(1),
        };
        for idx in (0..n).step_by(step) {
            let orig = input.data()[idx];
            probe[which].data_mut()[idx] = orig + eps;
            let up = eval(f, &probe)?;
            probe[which].data_mut()[idx] = orig - eps;
            let down = eval(f, &probe)?;
            probe[which].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[which].data()[idx];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.checked == 1 {
                report = GradCheckReport { max_rel_err: e, worst: (which, idx), analytic: a, numeric, checked: report.checked };
            }
        }
    }
    Ok(report)
}

/// Full gradient check of `f` at `inputs`.
pub fn grad_check(f: impl ScalarFn, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport> {
    grad_check_with(f, inputs, eps, Coverage::All)
}

pub fn grad_check_with(
    f: impl ScalarFn,
    inputs: &[Tensor],
    eps: f64,
    coverage: Coverage,
) -> Result<GradCheckReport> {
    let analytic = analytic_grads(&f, inputs)?;
    compare_with_numeric(&f, inputs, &analytic, eps, coverage)
}
