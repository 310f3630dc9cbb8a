//! Weighted linear fit of Δ(φ) = κ₁ cos²φ + κ₂ sin²φ.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZqPoint {
    pub phi_deg: f64,
    pub value: f64,
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZqFit {
    pub kappa1: f64,
    pub kappa2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    /// (XᵀWX)⁻¹ scaled by χ²/dof (unscaled when dof = 0).
    pub covariance: Matrix2<f64>,
    pub chi2: f64,
    pub dof: usize,
}

impl ZqFit {
    pub fn ratio(&self) -> f64 {
        self.kappa1 / self.kappa2
    }

    /// Tensor combinations (sqrt(Axx² + Axz²), |Ayy|) implied by κ₁, κ₂ at
    /// the given D, γeB and polar angle.
    pub fn tensor_magnitudes(&self, d_zfs: f64, gamma_e_b: f64, theta_deg: f64) -> Result<(f64, f64)> {
        let s = 2.0 * (gamma_e_b * theta_deg.to_radians().sin()).abs() / d_zfs;
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::InvalidParameter("need a transverse field to convert κ to tensor magnitudes".into()));
        }
        Ok((self.kappa1 / s, self.kappa2 / s))
    }
}

pub fn fit_zq_linear(data: &[ZqPoint]) -> Result<ZqFit> {
    if data.len() < 2 {
        return Err(Error::InsufficientData("need at least two (phi, value) points".into()));
    }
    let mut n = Matrix2::zeros();
    let mut rhs = Vector2::zeros();
    for p in data {
        if !(p.sigma.is_finite() && p.sigma > 0.0) {
            return Err(Error::InvalidParameter(format!("uncertainty at phi = {} must be > 0", p.phi_deg)));
        }
        if !(p.phi_deg.is_finite() && p.value.is_finite()) {
            return Err(Error::InvalidParameter("non-finite data point".into()));
        }
        let (s, c) = p.phi_deg.to_radians().sin_cos();
        let x = Vector2::new(c * c, s * s);
        let w = 1.0 / (p.sigma * p.sigma);
        n += x * x.transpose() * w;
        rhs += x * (w * p.value);
    }
    // Relative conditioning: a vanishing column (all φ at nodes) or
    // proportional columns make the normal matrix singular.
    let det = n.determinant();
    let (d0, d1) = (n[(0, 0)], n[(1, 1)]);
    if d0.min(d1) <= 1e-12 * d0.max(d1) || !(det > 1e-10 * d0 * d1) {
        return Err(Error::RankDeficient(
            "phi values do not separate the cos² and sin² terms".into(),
        ));
    }
    let inv = Matrix2::new(n[(1, 1)], -n[(0, 1)], -n[(1, 0)], n[(0, 0)]) / det;
    let k = inv * rhs;
    let chi2: f64 = data
        .iter()
        .map(|p| {
            let (s, c) = p.phi_deg.to_radians().sin_cos();
            ((k[0] * c * c + k[1] * s * s - p.value) / p.sigma).powi(2)
        })
        .sum();
    let dof = data.len() - 2;
    let cov = if dof > 0 { inv * (chi2 / dof as f64) } else { inv };
    Ok(ZqFit {
        kappa1: k[0],
        kappa2: k[1],
        sigma1: cov[(0, 0)].sqrt(),
        sigma2: cov[(1, 1)].sqrt(),
        covariance: cov,
        chi2,
        dof,
    })
}
