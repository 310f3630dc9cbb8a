//! Combined fit of the full hyperfine tensor: seeded multi-start, expansion
//! of each optimum into its equivalent set, constraint filtering.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{Frame, LabFrame, MeasuredDataset};
use super::lm::{lm_minimize, FitResult, LmOptions};
use super::model::{ModelPoint, ModelSpec, ParamKind, SpinModel};
use crate::error::{Error, Result};
use crate::spectra::LineKind;
use crate::spin::{HyperfineTensor, SpinSystemParams};
use crate::tensor::{det_sign, equivalent_solutions, DetVerdict, Determinant};

/// Optima closer than this (Euclidean over the four components, MHz) are merged.
pub const DEDUP_DISTANCE_MHZ: f64 = 0.1;

/// |A_xz/A_zz| bound applied when A_xx and A_zz share a sign.
pub const RABI_XZ_BOUND: f64 = 0.3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetSignConstraint {
    #[default]
    Any,
    #[serde(alias = "pos")]
    Positive,
    #[serde(alias = "neg")]
    Negative,
}

impl DetSignConstraint {
    pub fn admits(self, det: &Determinant) -> bool {
        match self {
            DetSignConstraint::Any => true,
            DetSignConstraint::Positive => det.sign > 0,
            DetSignConstraint::Negative => det.sign < 0,
        }
    }

    /// The constraint implied by an amplitude-profile classification.
    pub fn from_verdict(v: DetVerdict) -> Self {
        match v {
            DetVerdict::Positive => DetSignConstraint::Positive,
            DetVerdict::Negative => DetSignConstraint::Negative,
            DetVerdict::Inconclusive => DetSignConstraint::Any,
        }
    }
}

impl std::fmt::Display for DetSignConstraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DetSignConstraint::Any => "any",
            DetSignConstraint::Positive => "pos",
            DetSignConstraint::Negative => "neg",
        })
    }
}

impl std::str::FromStr for DetSignConstraint {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "any" => Ok(DetSignConstraint::Any),
            "pos" | "positive" => Ok(DetSignConstraint::Positive),
            "neg" | "negative" => Ok(DetSignConstraint::Negative),
            other => Err(format!("unknown det sign '{other}' (expected pos, neg or any)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitConstraints {
    pub det_sign: DetSignConstraint,
    /// Upper bound on |A_xz/A_zz| when A_xx·A_zz > 0.
    pub rabi_bound: Option<f64>,
}

pub fn rabi_bound_ok(a: &HyperfineTensor, bound: f64) -> bool {
    !(a.a_xx * a.a_zz > 0.0 && (a.a_xz / a.a_zz).abs() >= bound)
}

impl FitConstraints {
    /// `None` when admitted, otherwise the reason for rejection.
    pub fn rejection(&self, a: &HyperfineTensor) -> Option<String> {
        let det = det_sign(a);
        if !self.det_sign.admits(&det) {
            return Some(format!("det(A) = {:.4e} MHz³ violates det sign {}", det.value, self.det_sign));
        }
        if let Some(b) = self.rabi_bound {
            if !rabi_bound_ok(a, b) {
                return Some(format!("|A_xz/A_zz| = {:.3} >= {b} with A_xx, A_zz of equal sign", (a.a_xz / a.a_zz).abs()));
            }
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullFitOptions {
    pub sys: SpinSystemParams,
    /// Starting γeB at the dataset's largest field; defaults to γe·B.
    pub gamma_e_b: Option<f64>,
    pub refine_d: bool,
    pub refine_gamma_b: bool,
    /// NV-to-lab rotation for lab-frame orientations.
    pub frame: LabFrame,
    pub refine_frame: bool,
    pub n_starts: usize,
    pub seed: u64,
    pub lm: LmOptions,
}

impl Default for FullFitOptions {
    fn default() -> Self {
        Self {
            sys: SpinSystemParams::default(),
            gamma_e_b: None,
            refine_d: true,
            refine_gamma_b: true,
            frame: LabFrame::default(),
            refine_frame: false,
            n_starts: 16,
            seed: 0,
            lm: LmOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tensor: HyperfineTensor,
    pub fit: FitResult,
    pub det: Determinant,
    /// "optimum k" or "equivalent j of optimum k".
    pub origin: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectedCandidate {
    pub candidate: Candidate,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinesUsed {
    pub orientations: usize,
    pub esr: usize,
    pub zq: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullFitReport {
    /// Survivors ranked by χ².
    pub candidates: Vec<Candidate>,
    pub rejected: Vec<RejectedCandidate>,
    pub optima: usize,
    pub start_failures: Vec<String>,
    pub lines_used: LinesUsed,
    pub diagnostics: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiStart {
    /// Distinct converged optima, ascending χ².
    pub optima: Vec<(HyperfineTensor, FitResult)>,
    pub failures: Vec<String>,
}

/// Start tensors: the initial one, then seeded ±50 % component dispersions
/// with the A_xz sign alternating between starts.
pub fn start_tensors(initial: &HyperfineTensor, n_starts: usize, seed: u64) -> Vec<HyperfineTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (initial.a_xx.abs() + initial.a_yy.abs() + initial.a_zz.abs()) / 3.0;
    let xz = if initial.a_xz != 0.0 { initial.a_xz } else { 0.1 * scale };
    let mut out = vec![*initial];
    for k in 1..n_starts {
        let mut f = || rng.random_range(0.5..1.5);
        let sign = if k % 2 == 1 { -1.0 } else { 1.0 };
        out.push(HyperfineTensor::new(
            initial.a_xx * f(),
            initial.a_yy * f(),
            initial.a_zz * f(),
            sign * xz * f(),
        ));
    }
    out
}

fn tensor_distance(a: &HyperfineTensor, b: &HyperfineTensor) -> f64 {
    a.as_array()
        .iter()
        .zip(b.as_array())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Runs `fit_op` from every start (in parallel, results in start order) and
/// merges converged optima closer than [`DEDUP_DISTANCE_MHZ`].
pub fn multi_start<F>(fit_op: F, initial: &HyperfineTensor, n_starts: usize, seed: u64) -> Result<MultiStart>
where
    F: Fn(&HyperfineTensor) -> Result<(HyperfineTensor, FitResult)> + Sync,
{
    if n_starts == 0 {
        return Err(Error::InvalidParameter("n_starts must be >= 1".into()));
    }
    let starts = start_tensors(initial, n_starts, seed);
    let results: Vec<Result<(HyperfineTensor, FitResult)>> = starts.par_iter().map(&fit_op).collect();
    let mut optima: Vec<(HyperfineTensor, FitResult)> = Vec::new();
    let mut failures = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Ok((t, fit)) if fit.converged => optima.push((t, fit)),
            Ok((_, fit)) => failures.push(format!(
                "start {k}: not converged after {} iterations ({:?})",
                fit.iterations, fit.termination
            )),
            Err(e) => failures.push(format!("start {k}: {e}")),
        }
    }
    Ok(MultiStart {
        optima: dedup(optima, |o| &o.0, |o| o.1.chi2),
        failures,
    })
}

fn dedup<T>(mut items: Vec<T>, tensor: impl Fn(&T) -> &HyperfineTensor, chi2: impl Fn(&T) -> f64) -> Vec<T> {
    items.sort_by(|a, b| chi2(a).total_cmp(&chi2(b)));
    let mut out: Vec<T> = Vec::new();
    for it in items {
        if out
            .iter()
            .all(|o| tensor_distance(tensor(o), tensor(&it)) >= DEDUP_DISTANCE_MHZ)
        {
            out.push(it);
        }
    }
    out
}

/// Model over the tensor plus the requested nuisance parameters.
pub fn full_model(dataset: &MeasuredDataset, initial: &HyperfineTensor, opts: &FullFitOptions) -> Result<SpinModel> {
    opts.sys.validate()?;
    let mut params = vec![ParamKind::Axx, ParamKind::Ayy, ParamKind::Azz, ParamKind::Axz];
    if opts.refine_d {
        params.push(ParamKind::D);
    }
    if opts.refine_gamma_b {
        params.push(ParamKind::GammaEB);
    }
    if opts.refine_frame {
        if !dataset.orientations.iter().any(|o| o.frame == Frame::Lab) {
            return Err(Error::InvalidParameter("frame refinement needs lab-frame orientations".into()));
        }
        params.extend([ParamKind::Alpha, ParamKind::Beta, ParamKind::Psi]);
    }
    let b_ref = dataset.orientations.iter().map(|o| o.b_mt).fold(0.0, f64::max);
    let spec = ModelSpec {
        params,
        base: ModelPoint {
            tensor: *initial,
            d_zfs: opts.sys.d_zfs,
            gamma_e_b: opts.gamma_e_b.unwrap_or(opts.sys.gamma_e * b_ref),
            frame: opts.frame,
        },
        gamma_ratio: opts.sys.nuclear_drive_factor(),
        electron_only: false,
    };
    SpinModel::new(dataset, spec)
}

/// Fits from `start` with the nuisance parameters taken from `nuisance`.
fn fit_from(model: &SpinModel, start: &HyperfineTensor, nuisance: &[f64], lm: &LmOptions) -> Result<(HyperfineTensor, FitResult)> {
    let mut p0 = nuisance.to_vec();
    p0[..4].copy_from_slice(&start.as_array());
    let fit = lm_minimize(model, &p0, lm)?;
    let t = model.point(&DVector::from_vec(fit.params.clone())).tensor;
    Ok((t, fit))
}

pub fn fit_hyperfine_full(
    dataset: &MeasuredDataset,
    constraints: &FitConstraints,
    initial: &HyperfineTensor,
    opts: &FullFitOptions,
) -> Result<FullFitReport> {
    if !initial.is_finite() {
        return Err(Error::InvalidParameter("initial tensor must be finite".into()));
    }
    let model = full_model(dataset, initial, opts)?;
    let nuisance0 = model.initial();
    let lines_used = LinesUsed {
        orientations: dataset.grouped_lines().iter().filter(|g| !g.esr.is_empty() || !g.zq.is_empty()).count(),
        esr: dataset.count(LineKind::Esr),
        zq: dataset.count(LineKind::Zq),
    };
    let ms = multi_start(|t| fit_from(&model, t, &nuisance0, &opts.lm), initial, opts.n_starts, opts.seed)?;
    let mut diagnostics = Vec::new();
    if lines_used.zq == 0 {
        diagnostics.push("no zero-quantum lines: A_yy sign and magnitude are weakly constrained".into());
    }

    let mut pool: Vec<Candidate> = Vec::new();
    for (k, (tensor, fit)) in ms.optima.iter().enumerate() {
        pool.push(Candidate {
            tensor: *tensor,
            fit: fit.clone(),
            det: det_sign(tensor),
            origin: format!("optimum {k}"),
        });
        let set = match equivalent_solutions(tensor) {
            Ok(s) => s,
            Err(e) => {
                diagnostics.push(format!("optimum {k}: equivalent set unavailable: {e}"));
                continue;
            }
        };
        let polished: Vec<(usize, Result<(HyperfineTensor, FitResult)>)> = set.solutions[1..]
            .par_iter()
            .enumerate()
            .map(|(j, s)| (j + 1, fit_from(&model, s, &fit.params, &opts.lm)))
            .collect();
        for (j, r) in polished {
            match r {
                Ok((t, f)) if f.converged => pool.push(Candidate {
                    tensor: t,
                    det: det_sign(&t),
                    fit: f,
                    origin: format!("equivalent {j} of optimum {k}"),
                }),
                Ok((_, f)) => diagnostics.push(format!(
                    "equivalent {j} of optimum {k}: polish not converged ({:?})",
                    f.termination
                )),
                Err(e) => diagnostics.push(format!("equivalent {j} of optimum {k}: {e}")),
            }
        }
    }
    let pool = dedup(pool, |c| &c.tensor, |c| c.fit.chi2);
    let mut candidates = Vec::new();
    let mut rejected = Vec::new();
    for c in pool {
        match constraints.rejection(&c.tensor) {
            None => candidates.push(c),
            Some(reason) => rejected.push(RejectedCandidate { candidate: c, reason }),
        }
    }
    if candidates.is_empty() {
        diagnostics.push(format!(
            "no candidate survived the constraints ({} optima, {} rejected)",
            ms.optima.len(),
            rejected.len()
        ));
    }
    Ok(FullFitReport {
        candidates,
        rejected,
        optima: ms.optima.len(),
        start_failures: ms.failures,
        lines_used,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_are_seeded_and_alternate_sign() {
        let a = HyperfineTensor::new(189.3, 128.4, 128.9, 24.1);
        let s = start_tensors(&a, 6, 7);
        assert_eq!(s, start_tensors(&a, 6, 7));
        assert_ne!(s, start_tensors(&a, 6, 8));
        assert_eq!(s[0], a);
        for (k, t) in s.iter().enumerate().skip(1) {
            assert_eq!(t.a_xz < 0.0, k % 2 == 1);
            for (x, y) in t.as_array().iter().zip(a.as_array()) {
                let r = (x / y).abs();
                assert!((0.5..1.5).contains(&r));
            }
        }
    }

    #[test]
    fn constraint_parsing_and_rejection() {
        assert_eq!("pos".parse::<DetSignConstraint>().unwrap(), DetSignConstraint::Positive);
        assert!("x".parse::<DetSignConstraint>().is_err());
        let sol1 = HyperfineTensor::new(189.3, 128.4, 128.9, 24.1);
        let c = FitConstraints {
            det_sign: DetSignConstraint::Negative,
            rabi_bound: None,
        };
        assert!(c.rejection(&sol1).is_some());
        let c = FitConstraints {
            det_sign: DetSignConstraint::Positive,
            rabi_bound: Some(RABI_XZ_BOUND),
        };
        assert!(c.rejection(&sol1).is_none());
        assert!(c.rejection(&HyperfineTensor::new(100.0, 100.0, 100.0, 40.0)).is_some());
        assert!(c.rejection(&HyperfineTensor::new(-100.0, -100.0, 100.0, 40.0)).is_none());
    }

    #[test]
    fn dedup_keeps_lowest_chi2() {
        let a = HyperfineTensor::new(1.0, 2.0, 3.0, 4.0);
        let b = HyperfineTensor::new(1.05, 2.0, 3.0, 4.0);
        let c = HyperfineTensor::new(1.5, 2.0, 3.0, 4.0);
        let out = dedup(vec![(a, 2.0), (b, 1.0), (c, 3.0)], |x| &x.0, |x| x.1);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].0, b);
    }
}
