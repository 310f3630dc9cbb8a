//! Lorentzian a·b / ((φ − φ₁)² + b²) fitted to amplitude-ratio curves.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lm::{lm_minimize, FitResult, LmOptions, ResidualModel};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub phi_deg: f64,
    pub ratio: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LorentzFit {
    pub a: f64,
    /// Half width, degrees (always > 0).
    pub b: f64,
    pub phi1_deg: f64,
    pub fit: FitResult,
}

impl LorentzFit {
    pub fn peak(&self) -> f64 {
        self.a / self.b
    }
}

pub fn lorentzian(a: f64, b: f64, phi1: f64, phi: f64) -> f64 {
    let x = phi - phi1;
    a * b / (x * x + b * b)
}

struct Model<'a>(&'a [RatioPoint]);

impl ResidualModel for Model<'_> {
    fn n_params(&self) -> usize {
        3
    }

    fn param_names(&self) -> Vec<String> {
        vec!["a".into(), "b".into(), "phi1".into()]
    }

    fn param_units(&self) -> Vec<String> {
        vec!["deg".into(), "deg".into(), "deg".into()]
    }

    fn residuals(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::from_iterator(
            self.0.len(),
            self.0
                .iter()
                .map(|d| (lorentzian(p[0], p[1], p[2], d.phi_deg) - d.ratio) / d.sigma),
        ))
    }

    fn jacobian(&self, p: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (a, b, phi1) = (p[0], p[1], p[2]);
        let mut j = DMatrix::zeros(self.0.len(), 3);
        for (r, d) in self.0.iter().enumerate() {
            let x = d.phi_deg - phi1;
            let q = x * x + b * b;
            j[(r, 0)] = b / q / d.sigma;
            j[(r, 1)] = a * (x * x - b * b) / (q * q) / d.sigma;
            j[(r, 2)] = 2.0 * a * b * x / (q * q) / d.sigma;
        }
        Ok(j)
    }
}

/// Initial (a, b, φ₁): φ₁ at the maximum, b from the half-maximum crossings
/// on either side, a = peak·b.
pub fn initial_guess(data: &[RatioPoint]) -> (f64, f64, f64) {
    let mut sorted: Vec<&RatioPoint> = data.iter().collect();
    sorted.sort_by(|x, y| x.phi_deg.total_cmp(&y.phi_deg));
    let (imax, top) = sorted
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.ratio.total_cmp(&y.1.ratio))
        .map(|(k, p)| (k, **p))
        .expect("non-empty");
    let half = top.ratio / 2.0;
    let lo = sorted[..imax].iter().rev().find(|p| p.ratio < half).map(|p| p.phi_deg);
    let hi = sorted[imax + 1..].iter().find(|p| p.ratio < half).map(|p| p.phi_deg);
    let span = sorted[sorted.len() - 1].phi_deg - sorted[0].phi_deg;
    let b = match (lo, hi) {
        (Some(l), Some(h)) => (h - l) / 2.0,
        (Some(l), None) => top.phi_deg - l,
        (None, Some(h)) => h - top.phi_deg,
        (None, None) => span / 2.0,
    }
    .max(1e-3);
    (top.ratio * b, b, top.phi_deg)
}

/// Fits the Lorentzian; a fit that does not converge or whose width exceeds
/// ten times the φ span (no resolvable peak) is an error.
pub fn fit_lorentzian(data: &[RatioPoint], opts: &LmOptions) -> Result<LorentzFit> {
    if data.len() < 4 {
        return Err(Error::InsufficientData("need at least four (phi, ratio) points".into()));
    }
    if data.iter().any(|d| !(d.sigma.is_finite() && d.sigma > 0.0)) {
        return Err(Error::InvalidParameter("ratio uncertainties must be > 0".into()));
    }
    if data.iter().any(|d| !(d.phi_deg.is_finite() && d.ratio.is_finite())) {
        return Err(Error::InvalidParameter("non-finite ratio data".into()));
    }
    let (a0, b0, p0) = initial_guess(data);
    let mut fit = lm_minimize(&Model(data), &[a0, b0, p0], opts)?;
    if !fit.converged {
        return Err(Error::NotConverged(format!(
            "Lorentzian fit stopped after {} iterations ({:?})",
            fit.iterations, fit.termination
        )));
    }
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), d| (l.min(d.phi_deg), h.max(d.phi_deg)));
    let span = hi - lo;
    if fit.params[1] < 0.0 {
        fit.params[0] = -fit.params[0];
        fit.params[1] = -fit.params[1];
        // (a, b) → (−a, −b) flips their covariance with φ₁ only.
        if let Some(c) = fit.covariance.as_mut() {
            for j in 0..2 {
                c[(j, 2)] = -c[(j, 2)];
                c[(2, j)] = -c[(2, j)];
            }
        }
    }
    let b = fit.params[1];
    if !(b.is_finite() && b < 10.0 * span) || b == 0.0 {
        return Err(Error::NotConverged(format!(
            "no resolvable peak: fitted width {b:.3e} deg over a {span:.1} deg span"
        )));
    }
    Ok(LorentzFit {
        a: fit.params[0],
        b,
        phi1_deg: fit.params[2],
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::lm::finite_difference_jacobian;

    fn curve(a: f64, b: f64, phi1: f64) -> Vec<RatioPoint> {
        (0..61)
            .map(|k| {
                let phi = phi1 - 90.0 + 3.0 * k as f64;
                let r = lorentzian(a, b, phi1, phi);
                RatioPoint {
                    phi_deg: phi,
                    ratio: r,
                    sigma: 0.02 * r,
                }
            })
            .collect()
    }

    #[test]
    fn noiseless_curves_recovered() {
        for (a, b, p) in [(178.5, 16.3, -73.3), (270.5, 13.8, 9.9)] {
            let f = fit_lorentzian(&curve(a, b, p), &LmOptions::default()).unwrap();
            assert!((f.a / a - 1.0).abs() < 1e-6, "{f:?}");
            assert!((f.b / b - 1.0).abs() < 1e-6);
            assert!((f.phi1_deg - p).abs() < 1e-6 * p.abs());
        }
    }

    #[test]
    fn analytic_jacobian() {
        let d = curve(178.5, 16.3, -73.3);
        let p = DVector::from_vec(vec![150.0, 20.0, -70.0]);
        let a = Model(&d).jacobian(&p).unwrap();
        let n = finite_difference_jacobian(&Model(&d), &p).unwrap();
        assert!((a - &n).amax() < 1e-4 * n.amax());
    }

    #[test]
    fn constant_data_is_flagged() {
        let d: Vec<RatioPoint> = (0..20)
            .map(|k| RatioPoint {
                phi_deg: 10.0 * k as f64,
                ratio: 2.0,
                sigma: 0.05,
            })
            .collect();
        assert!(matches!(fit_lorentzian(&d, &LmOptions::default()), Err(Error::NotConverged(_))));
    }

    #[test]
    fn too_few_points() {
        let d = curve(1.0, 1.0, 0.0);
        assert!(fit_lorentzian(&d[..3], &LmOptions::default()).is_err());
    }
}
