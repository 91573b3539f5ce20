//! Least-squares helpers for the scaling checks.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Polynomial least-squares fit; returns coefficients lowest degree first.
pub fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("{} x values, {} y values", x.len(), y.len())));
    }
    if x.len() <= degree {
        return Err(Error::Empty("not enough points for the requested degree"));
    }
    let a = DMatrix::from_fn(x.len(), degree + 1, |i, j| x[i].powi(j as i32));
    let b = DVector::from_column_slice(y);
    let coeffs = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Dimension(e.to_string()))?;
    Ok(coeffs.iter().copied().collect())
}

/// Slope of `ln y` against `ln x`.
pub fn loglog_exponent(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.iter().chain(y).any(|&v| v <= 0.0) {
        return Err(Error::Dimension("log-log fit needs positive data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    Ok(polyfit(&lx, &ly, 1)?[1])
}
