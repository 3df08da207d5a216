//! Weighted straight-line fits used by the rate and order estimators.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub slope_se: f64,
    pub intercept: f64,
    pub intercept_se: f64,
    /// `y - (intercept + slope x)` per input point.
    pub residuals: Vec<f64>,
    /// Weighted residual sum of squares.
    pub chi2: f64,
}

/// Weighted least squares `y ~ a + b x` with weights `w` (inverse
/// variances). Standard errors are inflated by `sqrt(chi2 / (n - 2))` when
/// the scatter exceeds what the weights predict.
pub fn weighted_linear_fit(x: &[f64], y: &[f64], w: &[f64]) -> Result<LinearFit> {
    fit_with(x, y, w, true)
}

/// Unweighted fit whose standard errors come from the residual scatter
/// alone (NaN with only two points).
pub fn ordinary_linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    fit_with(x, y, &vec![1.0; x.len()], false)
}

fn fit_with(x: &[f64], y: &[f64], w: &[f64], known_variance: bool) -> Result<LinearFit> {
    let n = x.len();
    if n < 2 || y.len() != n || w.len() != n {
        return Err(Error::Analysis(format!("linear fit needs >= 2 matching points, got {n}")));
    }
    if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Analysis("fit weights must be positive and finite".into()));
    }
    let sw: f64 = w.iter().sum();
    let sx: f64 = w.iter().zip(x).map(|(w, x)| w * x).sum();
    let sy: f64 = w.iter().zip(y).map(|(w, y)| w * y).sum();
    let xm = sx / sw;
    let ym = sy / sw;
    let sxx: f64 = (0..n).map(|i| w[i] * (x[i] - xm).powi(2)).sum();
    let sxy: f64 = (0..n).map(|i| w[i] * (x[i] - xm) * (y[i] - ym)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Analysis("linear fit needs at least two distinct abscissae".into()));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let residuals: Vec<f64> = (0..n).map(|i| y[i] - intercept - slope * x[i]).collect();
    let chi2: f64 = (0..n).map(|i| w[i] * residuals[i].powi(2)).sum();
    let scale = match (n > 2, known_variance) {
        (true, true) => (chi2 / (n - 2) as f64).max(1.0),
        (true, false) => chi2 / (n - 2) as f64,
        (false, true) => 1.0,
        (false, false) => f64::NAN,
    };
    let slope_var = scale / sxx;
    let intercept_var = scale * (1.0 / sw + xm * xm / sxx);
    Ok(LinearFit {
        slope,
        slope_se: slope_var.sqrt(),
        intercept,
        intercept_se: intercept_var.sqrt(),
        residuals,
        chi2,
    })
}

/// Fit of `ln y ~ a + b ln x` where `y` carries standard errors `se`; the
/// log-scale weights are `(y / se)^2` by the delta method. Falls back to
/// an ordinary fit when any standard error vanishes.
pub fn log_log_fit(x: &[f64], y: &[f64], se: &[f64]) -> Result<LinearFit> {
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::Analysis("log-log fit needs positive data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    match delta_method_weights(y, se) {
        Some(w) => weighted_linear_fit(&lx, &ly, &w),
        None => ordinary_linear_fit(&lx, &ly),
    }
}

/// `(y / se)^2`, or `None` if any `se` is zero.
pub fn delta_method_weights(y: &[f64], se: &[f64]) -> Option<Vec<f64>> {
    if se.iter().any(|s| !(*s > 0.0)) {
        None
    } else {
        Some(y.iter().zip(se).map(|(y, s)| (y / s).powi(2)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_recovered() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let f = weighted_linear_fit(&x, &y, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-14);
        assert!((f.intercept - 2.0).abs() < 1e-14);
        assert!(f.chi2 < 1e-25);
    }

    #[test]
    fn power_law_slope() {
        let x = [0.2, 0.1, 0.05, 0.025];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        let f = log_log_fit(&x, &y, &[0.01; 4]).unwrap();
        assert!((f.slope - 1.5).abs() < 1e-12);
    }

    #[test]
    fn exact_data_have_zero_slope_error() {
        let x = [0.2, 0.1, 0.05];
        let y: Vec<f64> = x.iter().map(|v: &f64| v * v).collect();
        let f = log_log_fit(&x, &y, &[0.0; 3]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!(f.slope_se < 1e-6);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(weighted_linear_fit(&[1.0], &[1.0], &[1.0]).is_err());
        assert!(weighted_linear_fit(&[1.0, 1.0], &[1.0, 2.0], &[1.0, 1.0]).is_err());
        assert!(log_log_fit(&[1.0, 2.0], &[0.0, 1.0], &[1.0, 1.0]).is_err());
    }
}
