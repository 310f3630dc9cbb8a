//! Levenberg–Marquardt minimisation of ½‖r(p)‖² with covariance at the optimum.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A weighted residual vector r(p) = (model − data)/σ and its Jacobian.
pub trait ResidualModel: Sync {
    fn n_params(&self) -> usize;

    fn param_names(&self) -> Vec<String> {
        (0..self.n_params()).map(|k| format!("p{k}")).collect()
    }

    fn param_units(&self) -> Vec<String> {
        vec![String::new(); self.n_params()]
    }

    fn residuals(&self, p: &DVector<f64>) -> Result<DVector<f64>>;

    fn jacobian(&self, p: &DVector<f64>) -> Result<DMatrix<f64>> {
        finite_difference_jacobian(self, p)
    }
}

/// Central differences with step ∛ε·max(|p|, 1).
pub fn finite_difference_jacobian<M: ResidualModel + ?Sized>(model: &M, p: &DVector<f64>) -> Result<DMatrix<f64>> {
    let r0 = model.residuals(p)?;
    let mut jac = DMatrix::zeros(r0.len(), p.len());
    for j in 0..p.len() {
        let h = f64::EPSILON.cbrt() * p[j].abs().max(1.0);
        let mut hi = p.clone();
        let mut lo = p.clone();
        hi[j] += h;
        lo[j] -= h;
        let d = (model.residuals(&hi)? - model.residuals(&lo)?) / (2.0 * h);
        jac.set_column(j, &d);
    }
    Ok(jac)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Relative step tolerance.
    pub xtol: f64,
    /// Relative cost-decrease tolerance, must hold for `stall_iterations` in a row.
    pub ftol: f64,
    pub stall_iterations: usize,
    /// Initial Marquardt damping (relative to diag JᵀJ).
    pub initial_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            xtol: 1e-10,
            ftol: 1e-12,
            stall_iterations: 3,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    SmallStep,
    SmallCostDecrease,
    ZeroGradient,
    MaxIterations,
    NoDescent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub names: Vec<String>,
    pub units: Vec<String>,
    pub params: Vec<f64>,
    /// Σ r².
    pub chi2: f64,
    pub n_residuals: usize,
    pub dof: usize,
    /// sqrt(χ² / dof).
    pub residual_rms: f64,
    /// (JᵀJ)⁻¹ · χ²/dof, present only for converged fits with a regular JᵀJ.
    pub covariance: Option<DMatrix<f64>>,
    pub converged: bool,
    pub iterations: usize,
    pub termination: Termination,
    /// JᵀJ was singular at the final point.
    pub singular: bool,
}

impl FitResult {
    pub fn std_errors(&self) -> Option<Vec<f64>> {
        self.covariance
            .as_ref()
            .map(|c| (0..c.nrows()).map(|k| c[(k, k)].max(0.0).sqrt()).collect())
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|k| self.params[k])
    }
}

fn cost(r: &DVector<f64>) -> f64 {
    r.norm_squared()
}

/// Minimum-norm least-squares solution of J δ = −r.
fn gauss_newton_step(jac: &DMatrix<f64>, r: &DVector<f64>) -> Option<DVector<f64>> {
    let svd = jac.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-13 * jac.nrows().max(jac.ncols()) as f64;
    svd.solve(&(-r), eps).ok()
}

fn damped_step(jtj: &DMatrix<f64>, grad: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let n = jtj.nrows();
    let dmax = jtj.diagonal().max().max(1e-300);
    let mut a = jtj.clone();
    for k in 0..n {
        a[(k, k)] += lambda * jtj[(k, k)].max(1e-12 * dmax);
    }
    a.cholesky().map(|c| c.solve(&(-grad)))
}

/// Minimises ‖r(p)‖² from `initial`. Each iteration first tries the full
/// Gauss–Newton step and keeps it when the quadratic model predicts the
/// decrease well (ratio > 0.5); otherwise it falls back to Marquardt-damped
/// steps with increasing damping.
pub fn lm_minimize<M: ResidualModel + ?Sized>(model: &M, initial: &[f64], opts: &LmOptions) -> Result<FitResult> {
    let n = model.n_params();
    if initial.len() != n {
        return Err(Error::InvalidParameter(format!(
            "expected {n} initial parameters, got {}",
            initial.len()
        )));
    }
    if initial.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("initial parameters must be finite".into()));
    }
    let mut p = DVector::from_column_slice(initial);
    let mut r = model.residuals(&p)?;
    let m = r.len();
    let mut f = cost(&r);
    let mut lambda = opts.initial_damping;
    let mut stall = 0;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    while iterations < opts.max_iter {
        iterations += 1;
        let jac = model.jacobian(&p)?;
        let grad = jac.transpose() * &r;
        if f == 0.0 || grad.amax() == 0.0 {
            termination = Termination::ZeroGradient;
            break;
        }
        let jtj = jac.transpose() * &jac;
        let step_limit = |d: &DVector<f64>, p: &DVector<f64>| d.norm() <= opts.xtol * (p.norm() + opts.xtol);

        let mut accepted: Option<(DVector<f64>, DVector<f64>, f64)> = None;
        if let Some(d) = gauss_newton_step(&jac, &r) {
            if step_limit(&d, &p) {
                termination = Termination::SmallStep;
                break;
            }
            let trial = &p + &d;
            let predicted = f - cost(&(&r + &jac * &d));
            if let Ok(rt) = model.residuals(&trial) {
                let ft = cost(&rt);
                if ft.is_finite() && predicted > 0.0 && (f - ft) / predicted > 0.5 {
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = Some((d, rt, ft));
                }
            }
        }
        if accepted.is_none() {
            for _ in 0..60 {
                let Some(d) = damped_step(&jtj, &grad, lambda) else {
                    lambda *= 10.0;
                    continue;
                };
                if step_limit(&d, &p) {
                    break;
                }
                let trial = &p + &d;
                match model.residuals(&trial) {
                    Ok(rt) if cost(&rt) < f => {
                        let ft = cost(&rt);
                        lambda = (lambda / 3.0).max(1e-12);
                        accepted = Some((d, rt, ft));
                        break;
                    }
                    _ => lambda *= 10.0,
                }
            }
        }
        let Some((d, rt, ft)) = accepted else {
            termination = Termination::NoDescent;
            break;
        };
        let rel_decrease = (f - ft) / f.max(f64::MIN_POSITIVE);
        p += &d;
        r = rt;
        f = ft;
        if step_limit(&d, &p) {
            termination = Termination::SmallStep;
            break;
        }
        if rel_decrease < opts.ftol {
            stall += 1;
            if stall >= opts.stall_iterations {
                termination = Termination::SmallCostDecrease;
                break;
            }
        } else {
            stall = 0;
        }
    }

    // NoDescent at a point where no damped step lowers the cost is a
    // converged point when the gradient is negligible relative to the cost.
    let jac = model.jacobian(&p)?;
    let jtj = jac.transpose() * &jac;
    let grad = jac.transpose() * &r;
    let scaled_grad = (0..n)
        .map(|j| {
            let cn = jac.column(j).norm();
            if cn == 0.0 || f == 0.0 {
                0.0
            } else {
                grad[j].abs() / (cn * f.sqrt())
            }
        })
        .fold(0.0, f64::max);
    let converged = match termination {
        Termination::MaxIterations => false,
        Termination::NoDescent => scaled_grad < 1e-6,
        _ => true,
    };
    let dof = m.saturating_sub(n);
    let variance = if dof > 0 { f / dof as f64 } else { 0.0 };
    let inverse = jtj.clone().try_inverse().filter(|inv| inv.iter().all(|v| v.is_finite()));
    let singular = inverse.is_none() || jtj.rank(1e-12 * jtj.amax().max(1e-300)) < n;
    let covariance = if converged && !singular {
        inverse.map(|inv| {
            let c = inv * variance;
            (&c + c.transpose()) * 0.5
        })
    } else {
        None
    };
    Ok(FitResult {
        names: model.param_names(),
        units: model.param_units(),
        params: p.iter().copied().collect(),
        chi2: f,
        n_residuals: m,
        dof,
        residual_rms: if dof > 0 { variance.sqrt() } else { (f / m.max(1) as f64).sqrt() },
        covariance,
        converged,
        iterations,
        termination,
        singular,
    })
}
