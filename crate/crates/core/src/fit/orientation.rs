//! Lab-frame NV axis, D and γeB from ESR lines over several field orientations.

use nalgebra::{DVector, Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{polar_unit, Frame, LabFrame, LineRecord, MeasuredDataset, OrientationRecord};
use super::lm::{lm_minimize, FitResult, LmOptions, ResidualModel};
use super::model::{ModelPoint, ModelSpec, ParamKind, SpinModel};
use crate::error::{Error, Result};
use crate::spectra::{esr_lines, LineKind, MicrowaveField};
use crate::spin::{build_hamiltonian, eigensystem, electron_levels, FieldOrientation, HyperfineTensor, SpinSystemParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrientationModelKind {
    /// NV centre without a nearby ¹³C: two lines per orientation.
    ElectronOnly,
    /// Axial first-shell hyperfine (A_par, A_perp): eight lines per orientation.
    WithHyperfine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxialHyperfine {
    pub a_par: f64,
    pub a_perp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationModel {
    /// Unit NV z axis in lab coordinates, upper hemisphere.
    pub axis: Vector3<f64>,
    pub axis_polar_deg: f64,
    pub axis_azimuth_deg: f64,
    pub d_zfs: f64,
    /// At `b_ref_mt`.
    pub gamma_e_b: f64,
    pub b_ref_mt: f64,
    pub hyperfine: Option<AxialHyperfine>,
}

impl OrientationModel {
    pub fn frame(&self) -> LabFrame {
        LabFrame::new(self.axis_polar_deg, self.axis_azimuth_deg, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationFit {
    pub model: OrientationModel,
    pub fit: FitResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationOptions {
    pub kind: OrientationModelKind,
    /// Constants; γe sets the starting γeB from the recorded field.
    pub sys: SpinSystemParams,
    /// Axis candidates in the initial grid search.
    pub grid_points: usize,
    /// Starting (A_par, A_perp); an isotropic grid is scanned when absent.
    pub initial_hyperfine: Option<AxialHyperfine>,
    pub lm: LmOptions,
}

impl Default for OrientationOptions {
    fn default() -> Self {
        Self {
            kind: OrientationModelKind::ElectronOnly,
            sys: SpinSystemParams::default(),
            grid_points: 2000,
            initial_hyperfine: None,
            lm: LmOptions::default(),
        }
    }
}

/// Isotropic starting values scanned for the hyperfine model, MHz.
pub const HYPERFINE_GRID_MHZ: [f64; 5] = [60.0, 100.0, 140.0, 180.0, 220.0];

/// Best grid points refined by LM.
const GRID_STARTS: usize = 4;

/// Rejects direction sets that lie in one plane through the origin.
pub fn check_non_coplanar(directions: &[Vector3<f64>]) -> Result<()> {
    let m: Matrix3<f64> = directions.iter().map(|n| n * n.transpose()).sum();
    let ev = SymmetricEigen::new(m).eigenvalues;
    let (lo, hi) = (ev.min(), ev.max());
    if directions.len() < 3 || !(hi > 0.0) || lo / hi < 1e-6 {
        return Err(Error::DegenerateGeometry(
            "field orientations are coplanar; the NV axis is not identifiable".into(),
        ));
    }
    Ok(())
}

/// Quasi-uniform points on the upper hemisphere, as (polar, azimuth) degrees.
pub fn hemisphere_grid(n: usize) -> Vec<(f64, f64)> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|k| {
            let z = 1.0 - (k as f64 + 0.5) / n as f64;
            (z.acos().to_degrees(), (golden * k as f64).to_degrees().rem_euclid(360.0))
        })
        .collect()
}

fn canonical_axis(alpha_deg: f64, beta_deg: f64) -> (Vector3<f64>, f64, f64) {
    let mut z = polar_unit(alpha_deg, beta_deg);
    if z.z < 0.0 {
        z = -z;
    }
    let polar = z.z.clamp(-1.0, 1.0).acos().to_degrees();
    let azimuth = if z.x.hypot(z.y) < 1e-15 {
        0.0
    } else {
        z.y.atan2(z.x).to_degrees().rem_euclid(360.0)
    };
    (z, polar, azimuth)
}

/// Noiseless lab-frame ESR lines for an NV centre at `frame`: two lines per
/// orientation for `tensor = None`, otherwise the eight lines of the coupled
/// system. Orientations are (polar, azimuth) of B in the lab, degrees.
pub fn synth_lab_dataset(
    sys: &SpinSystemParams,
    tensor: Option<&HyperfineTensor>,
    frame: &LabFrame,
    lab_directions: &[(f64, f64)],
    b_mt: f64,
    sigma_mhz: f64,
) -> Result<MeasuredDataset> {
    sys.validate()?;
    let mut ds = MeasuredDataset::default();
    let width = lab_directions.len().to_string().len().max(2);
    for (k, &(polar, azimuth)) in lab_directions.iter().enumerate() {
        let id = format!("o{:0width$}", k + 1);
        let nv = frame.to_nv(&polar_unit(polar, azimuth)) * b_mt;
        let freqs: Vec<f64> = match tensor {
            None => {
                let (e, zero, _) = electron_levels(sys.d_zfs, &(nv * sys.gamma_e))?;
                (0..3).filter(|&j| j != zero).map(|j| e[j] - e[zero]).collect()
            }
            Some(a) => {
                let field = FieldOrientation::from_vector(&nv);
                let levels = eigensystem(&build_hamiltonian(sys, a, &field))?;
                let mw = MicrowaveField::new(Vector3::x(), sys)?;
                esr_lines(&levels, &mw)?.iter().map(|l| l.freq).collect()
            }
        };
        ds.orientations.push(OrientationRecord {
            id: id.clone(),
            frame: Frame::Lab,
            angle1_deg: polar,
            angle2_deg: azimuth,
            b_mt,
        });
        for f in freqs {
            ds.lines.push(LineRecord {
                orient_id: id.clone(),
                kind: LineKind::Esr,
                freq_mhz: f,
                sigma_mhz,
            });
        }
    }
    Ok(ds)
}

pub fn fit_orientation(dataset: &MeasuredDataset, opts: &OrientationOptions) -> Result<OrientationFit> {
    dataset.validate()?;
    if dataset.orientations.iter().any(|o| o.frame != Frame::Lab) {
        return Err(Error::InvalidParameter("orientation fit needs lab-frame orientations".into()));
    }
    if dataset.lines.iter().any(|l| l.kind != LineKind::Esr) {
        return Err(Error::InvalidParameter("orientation fit uses ESR lines only".into()));
    }
    let grouped = dataset.grouped_lines();
    let used: Vec<usize> = (0..grouped.len()).filter(|&k| !grouped[k].esr.is_empty()).collect();
    let dirs: Vec<Vector3<f64>> = used.iter().map(|&k| dataset.orientations[k].direction()).collect();
    check_non_coplanar(&dirs)?;

    let b_ref = dataset.orientations.iter().map(|o| o.b_mt).fold(0.0, f64::max);
    if b_ref <= 0.0 {
        return Err(Error::InsufficientData("all orientations have zero field".into()));
    }
    let all: Vec<f64> = used.iter().flat_map(|&k| grouped[k].esr.iter().map(|l| l.0)).collect();
    let d0 = all.iter().sum::<f64>() / all.len() as f64;
    let geb0 = opts.sys.gamma_e * b_ref;
    // Starting hyperfine values scanned with the axis grid (isotropic).
    let a_grid: Vec<AxialHyperfine> = match (opts.kind, opts.initial_hyperfine) {
        (OrientationModelKind::ElectronOnly, _) => vec![AxialHyperfine { a_par: 0.0, a_perp: 0.0 }],
        (_, Some(h)) => vec![h],
        _ => HYPERFINE_GRID_MHZ
            .iter()
            .map(|&a| AxialHyperfine { a_par: a, a_perp: a })
            .collect(),
    };

    let mut params = vec![ParamKind::Alpha, ParamKind::Beta, ParamKind::D, ParamKind::GammaEB];
    if opts.kind == OrientationModelKind::WithHyperfine {
        params.extend([ParamKind::APar, ParamKind::APerp]);
    }
    let spec = ModelSpec {
        params,
        base: ModelPoint {
            tensor: HyperfineTensor::zero(),
            d_zfs: d0,
            gamma_e_b: geb0,
            frame: LabFrame::default(),
        },
        gamma_ratio: opts.sys.nuclear_drive_factor(),
        electron_only: opts.kind == OrientationModelKind::ElectronOnly,
    };
    let model = SpinModel::new(dataset, spec)?;
    let start = |a: f64, b: f64, h: &AxialHyperfine| {
        let mut p = vec![a, b, d0, geb0];
        if opts.kind == OrientationModelKind::WithHyperfine {
            p.extend([h.a_par, h.a_perp]);
        }
        p
    };

    let grid = hemisphere_grid(opts.grid_points.max(1));
    let candidates: Vec<(f64, f64, &AxialHyperfine)> = grid
        .iter()
        .flat_map(|&(a, b)| a_grid.iter().map(move |h| (a, b, h)))
        .collect();
    let mut scored: Vec<(f64, Vec<f64>)> = candidates
        .into_par_iter()
        .filter_map(|(a, b, h)| {
            let p = start(a, b, h);
            let cost = model.residuals(&DVector::from_vec(p.clone())).ok()?.norm_squared();
            cost.is_finite().then_some((cost, p))
        })
        .collect();
    if scored.is_empty() {
        return Err(Error::NotConverged("no axis candidate gave a valid spectrum".into()));
    }
    scored.sort_by(|x, y| x.0.total_cmp(&y.0));

    let fits: Vec<FitResult> = scored
        .iter()
        .take(GRID_STARTS)
        .collect::<Vec<_>>()
        .into_par_iter()
        .filter_map(|(_, p0)| lm_minimize(&model, p0, &opts.lm).ok())
        .collect();
    let best = fits.into_iter().fold(None::<FitResult>, |acc, f| match acc {
        Some(a) if a.chi2 <= f.chi2 => Some(a),
        _ => Some(f),
    });
    let first = best.ok_or_else(|| Error::NotConverged("orientation fit failed from every start".into()))?;

    // Re-polish from the upper-hemisphere representative so the reported
    // covariance refers to the canonical angles.
    let (_, polar, azimuth) = canonical_axis(first.params[0], first.params[1]);
    let mut p = first.params.clone();
    p[0] = polar;
    p[1] = azimuth;
    let fit = lm_minimize(&model, &p, &opts.lm)?;
    if !fit.converged {
        return Err(Error::NotConverged(format!(
            "orientation fit stopped after {} iterations ({:?})",
            fit.iterations, fit.termination
        )));
    }
    let (axis, polar, azimuth) = canonical_axis(fit.params[0], fit.params[1]);
    let hyperfine = (opts.kind == OrientationModelKind::WithHyperfine).then(|| AxialHyperfine {
        a_par: fit.params[4],
        a_perp: fit.params[5],
    });
    Ok(OrientationFit {
        model: OrientationModel {
            axis,
            axis_polar_deg: polar,
            axis_azimuth_deg: azimuth,
            d_zfs: fit.params[2],
            gamma_e_b: fit.params[3],
            b_ref_mt: b_ref,
            hyperfine,
        },
        fit,
    })
}
