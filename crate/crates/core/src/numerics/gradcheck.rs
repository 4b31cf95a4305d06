//! Central finite-difference verification of analytic gradients.

use super::{NumericsError, Parameters};

/// A scalar function of a parameter set with an analytic gradient.
pub trait Objective {
    fn value(&self, params: &Parameters) -> f64;
    fn value_and_grad(&self, params: &Parameters) -> (f64, Parameters);
}

/// Adapts a pair of closures into an [`Objective`].
pub struct FnObjective<V, G> {
    pub value: V,
    pub grad: G,
}

impl<V, G> Objective for FnObjective<V, G>
where
    V: Fn(&Parameters) -> f64,
    G: Fn(&Parameters) -> (f64, Parameters),
{
    fn value(&self, params: &Parameters) -> f64 {
        (self.value)(params)
    }

    fn value_and_grad(&self, params: &Parameters) -> (f64, Parameters) {
        (self.grad)(params)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Flagged {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error)` in name order.
    pub per_parameter: Vec<(String, f64)>,
    pub flagged: Vec<Flagged>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_parameter.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Gradient magnitude below which errors are measured against this scale
/// instead of the gradient itself.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

fn finite(v: f64) -> Result<f64, NumericsError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(NumericsError::NonFinite(v))
    }
}

/// Compares every element's analytic gradient with `(f(x+h) - f(x-h)) / 2h`
/// and flags elements whose relative error exceeds `tol`.
pub fn grad_check(
    f: &impl Objective,
    params: &Parameters,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, NumericsError> {
    let (v0, analytic) = f.value_and_grad(params);
    finite(v0)?;
    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.len());
        let grad = analytic.get(&name);
        let mut worst = 0.0f64;
        for i in 0..n {
            let orig = params.get(&name).unwrap().data()[i];
            probe.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let fp = finite(f.value(&probe))?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let fm = finite(f.value(&probe))?;
            probe.get_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = grad.map_or(0.0, |g| g.data()[i]);
            let rel = relative_error(a, numeric);
            worst = worst.max(rel);
            report.checked += 1;
            if rel > tol {
                report.flagged.push(Flagged {
                    name: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        report.per_parameter.push((name, worst));
    }
    Ok(report)
}
