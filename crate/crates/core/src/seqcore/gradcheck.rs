//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};

// Below this magnitude the central difference is dominated by rounding
// (about eps * |f| / h), so errors are measured against the floor instead.
const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `(coordinate, relative error)` for every checked coordinate.
    pub rel_errors: Vec<(usize, f64)>,
    /// Coordinates skipped because a `±h` perturbation left the smooth piece.
    pub excluded: Vec<usize>,
    pub max_rel_err: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn eval<F: Fn(&[f64]) -> f64>(f: &F, p: &[f64]) -> Result<f64> {
    let v = f(p);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("objective during gradient check".into()))
    }
}

/// `(f(p + h e_i) - f(p - h e_i)) / 2h` for every coordinate.
pub fn numeric_gradient<F>(f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let plus = eval(&f, &p)?;
        p[i] = orig - h;
        let minus = eval(&f, &p)?;
        p[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

pub fn grad_check<F>(f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
{
    grad_check_piecewise(f, |_: &[f64]| (), params, analytic, h)
}

/// Like [`grad_check`], but a coordinate is excluded whenever `piece`
/// differs between `p` and either `p ± h e_i`. `piece` names the smooth
/// region of a piecewise function (a firing pattern, a sign pattern).
pub fn grad_check_piecewise<F, P, K>(
    f: F,
    piece: P,
    params: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
    P: Fn(&[f64]) -> K,
    K: PartialEq,
{
    if params.len() != analytic.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} params, {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    eval(&f, params)?;
    let base = piece(params);
    let mut p = params.to_vec();
    let mut rel_errors = Vec::with_capacity(p.len());
    let mut excluded = Vec::new();
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let plus = eval(&f, &p)?;
        let same_plus = piece(&p) == base;
        p[i] = orig - h;
        let minus = eval(&f, &p)?;
        let same_minus = piece(&p) == base;
        p[i] = orig;
        if !(same_plus && same_minus) {
            excluded.push(i);
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        rel_errors.push((i, rel_err(analytic[i], numeric)));
    }
    let max_rel_err = rel_errors.iter().map(|&(_, e)| e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        rel_errors,
        excluded,
        max_rel_err,
        step: h,
    })
}
