//! Exact-diagonalisation residuals over a measured dataset with analytic
//! (Hellmann–Feynman) Jacobians, shared by the orientation and full fits.

use std::sync::OnceLock;

use nalgebra::{Complex, DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{assign_lines, Frame, LabFrame, MeasuredDataset};
use super::lm::ResidualModel;
use crate::error::{Error, Result};
use crate::spectra::zero_pair;
use crate::spin::{eigensystem, electron_levels, hamiltonian_with_zeeman, spin_matrices, HyperfineTensor, Mat6, SpinOperators, C64};

/// A refinable quantity. Angles are in degrees, everything else in MHz.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Axx,
    Ayy,
    Azz,
    Axz,
    /// Axial hyperfine: sets A_zz.
    APar,
    /// Axial hyperfine: sets A_xx = A_yy.
    APerp,
    D,
    GammaEB,
    Alpha,
    Beta,
    Psi,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Axx => "A_xx",
            ParamKind::Ayy => "A_yy",
            ParamKind::Azz => "A_zz",
            ParamKind::Axz => "A_xz",
            ParamKind::APar => "A_par",
            ParamKind::APerp => "A_perp",
            ParamKind::D => "D",
            ParamKind::GammaEB => "gamma_e_B",
            ParamKind::Alpha => "axis_polar",
            ParamKind::Beta => "axis_azimuth",
            ParamKind::Psi => "roll",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            ParamKind::Alpha | ParamKind::Beta | ParamKind::Psi => "deg",
            _ => "MHz",
        }
    }
}

/// Values of every model quantity; parameters override the matching fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPoint {
    pub tensor: HyperfineTensor,
    pub d_zfs: f64,
    /// Electron Zeeman energy at the dataset's reference field, MHz.
    pub gamma_e_b: f64,
    pub frame: LabFrame,
}

impl ModelPoint {
    pub fn get(&self, k: ParamKind) -> f64 {
        match k {
            ParamKind::Axx => self.tensor.a_xx,
            ParamKind::Ayy => self.tensor.a_yy,
            ParamKind::Azz | ParamKind::APar => self.tensor.a_zz,
            ParamKind::Axz => self.tensor.a_xz,
            ParamKind::APerp => self.tensor.a_xx,
            ParamKind::D => self.d_zfs,
            ParamKind::GammaEB => self.gamma_e_b,
            ParamKind::Alpha => self.frame.alpha_deg,
            ParamKind::Beta => self.frame.beta_deg,
            ParamKind::Psi => self.frame.psi_deg,
        }
    }

    pub fn set(&mut self, k: ParamKind, v: f64) {
        match k {
            ParamKind::Axx => self.tensor.a_xx = v,
            ParamKind::Ayy => self.tensor.a_yy = v,
            ParamKind::Azz | ParamKind::APar => self.tensor.a_zz = v,
            ParamKind::Axz => self.tensor.a_xz = v,
            ParamKind::APerp => {
                self.tensor.a_xx = v;
                self.tensor.a_yy = v;
            }
            ParamKind::D => self.d_zfs = v,
            ParamKind::GammaEB => self.gamma_e_b = v,
            ParamKind::Alpha => self.frame.alpha_deg = v,
            ParamKind::Beta => self.frame.beta_deg = v,
            ParamKind::Psi => self.frame.psi_deg = v,
        }
    }
}

struct Term {
    esr: Vec<(f64, f64)>,
    zq: Vec<(f64, f64)>,
    direction: Vector3<f64>,
    lab: bool,
    scale: f64,
}

/// Which quantities are refined and which Hamiltonian is used.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub params: Vec<ParamKind>,
    pub base: ModelPoint,
    /// γn/γe; zero drops the nuclear Zeeman term.
    pub gamma_ratio: f64,
    /// Bare electron spin (reference centre without ¹³C): two ESR lines per orientation.
    pub electron_only: bool,
}

pub struct SpinModel {
    spec: ModelSpec,
    terms: Vec<Term>,
    b_ref: f64,
}

struct ElectronOps {
    s: [Matrix3<C64>; 3],
    sz2: Matrix3<C64>,
}

fn electron_ops() -> &'static ElectronOps {
    static OPS: OnceLock<ElectronOps> = OnceLock::new();
    OPS.get_or_init(|| {
        let m = spin_matrices(1.0).expect("spin 1");
        let s = [0, 1, 2].map(|k| Matrix3::from_fn(|r, c| m[k][(r, c)]));
        let sz2 = s[2] * s[2];
        ElectronOps { s, sz2 }
    })
}

fn expect3(v: &Matrix3<C64>, k: usize, op: &Matrix3<C64>) -> f64 {
    let col = v.column(k);
    (col.adjoint() * op * col)[(0, 0)].re
}

type TermOutput = (Vec<f64>, Option<Vec<Vec<f64>>>);

impl SpinModel {
    pub fn new(dataset: &MeasuredDataset, spec: ModelSpec) -> Result<Self> {
        dataset.validate()?;
        let b_ref = dataset.orientations.iter().map(|o| o.b_mt).fold(0.0, f64::max);
        let grouped = dataset.grouped_lines();
        let mut terms = Vec::new();
        for (o, lines) in dataset.orientations.iter().zip(grouped) {
            if lines.esr.is_empty() && lines.zq.is_empty() {
                continue;
            }
            if spec.electron_only && !lines.zq.is_empty() {
                return Err(Error::InvalidParameter(format!(
                    "orientation '{}': the electron-only model has no zero-quantum line",
                    o.id
                )));
            }
            let n_model_esr = if spec.electron_only { 2 } else { 8 };
            if lines.esr.len() > n_model_esr || lines.zq.len() > 1 {
                return Err(Error::InvalidParameter(format!(
                    "orientation '{}': {} ESR / {} ZQ lines exceed the model's {} / 1",
                    o.id,
                    lines.esr.len(),
                    lines.zq.len(),
                    n_model_esr
                )));
            }
            terms.push(Term {
                esr: lines.esr,
                zq: lines.zq,
                direction: o.direction(),
                lab: o.frame == Frame::Lab,
                scale: if b_ref > 0.0 { o.b_mt / b_ref } else { 0.0 },
            });
        }
        if terms.is_empty() {
            return Err(Error::InsufficientData("dataset has no lines".into()));
        }
        let n_res: usize = terms.iter().map(|t| t.esr.len() + t.zq.len()).sum();
        if n_res < spec.params.len() {
            return Err(Error::InsufficientData(format!(
                "{n_res} lines for {} parameters",
                spec.params.len()
            )));
        }
        Ok(Self { spec, terms, b_ref })
    }

    /// Largest field in the dataset, mT; γeB refers to this field.
    pub fn reference_field_mt(&self) -> f64 {
        self.b_ref
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn point(&self, p: &DVector<f64>) -> ModelPoint {
        let mut pt = self.spec.base;
        for (k, &kind) in self.spec.params.iter().enumerate() {
            pt.set(kind, p[k]);
        }
        pt
    }

    pub fn initial(&self) -> Vec<f64> {
        self.spec.params.iter().map(|&k| self.spec.base.get(k)).collect()
    }

    fn nv_direction(&self, t: &Term, pt: &ModelPoint) -> Vector3<f64> {
        if t.lab {
            pt.frame.to_nv(&t.direction)
        } else {
            t.direction
        }
    }

    /// Per-degree derivatives of the NV-frame field direction for α, β, ψ.
    fn direction_derivatives(&self, t: &Term, pt: &ModelPoint) -> [Vector3<f64>; 3] {
        if !t.lab {
            return [Vector3::zeros(); 3];
        }
        let deg = 1f64.to_radians();
        pt.frame
            .rotation_derivatives()
            .map(|d| d.transpose() * t.direction * deg)
    }

    fn eval_term(&self, t: &Term, pt: &ModelPoint, grad: bool) -> Result<TermOutput> {
        if self.spec.electron_only {
            self.eval_electron(t, pt, grad)
        } else {
            self.eval_full(t, pt, grad)
        }
    }

    fn eval_full(&self, t: &Term, pt: &ModelPoint, grad: bool) -> Result<TermOutput> {
        let ops = SpinOperators::get();
        let rho = self.spec.gamma_ratio;
        let n = self.nv_direction(t, pt) * t.scale;
        let ez = n * pt.gamma_e_b;
        let h = hamiltonian_with_zeeman(pt.d_zfs, &ez, &(ez * rho), &pt.tensor);
        let levels = eigensystem(&h)?;
        let pair = zero_pair(&levels)?;
        let mut esr: Vec<(f64, usize, usize)> = Vec::with_capacity(8);
        for &i in &pair {
            for f in (0..6).filter(|k| !pair.contains(k)) {
                esr.push((levels.eigenvalues[f] - levels.eigenvalues[i], f, i));
            }
        }
        esr.sort_by(|a, b| a.0.total_cmp(&b.0));
        let model_freqs: Vec<f64> = esr.iter().map(|l| l.0).collect();
        let measured: Vec<f64> = t.esr.iter().map(|l| l.0).collect();
        let assign = assign_lines(&model_freqs, &measured)?;

        let mut transitions: Vec<(f64, usize, usize, f64, f64)> = Vec::new();
        for (m, &k) in assign.iter().enumerate() {
            let (freq, f, i) = esr[k];
            transitions.push((freq, f, i, t.esr[m].0, t.esr[m].1));
        }
        for &(meas, sigma) in &t.zq {
            let [i, j] = pair;
            transitions.push((levels.eigenvalues[j] - levels.eigenvalues[i], j, i, meas, sigma));
        }
        let res: Vec<f64> = transitions.iter().map(|x| (x.0 - x.3) / x.4).collect();
        if !grad {
            return Ok((res, None));
        }

        let dn = self.direction_derivatives(t, pt);
        let hd = ops.hyperfine_derivatives();
        let zeeman = |v: &Vector3<f64>| ops.s_dot(v) + ops.i_dot(v) * Complex::from(rho);
        let dops: Vec<Option<Mat6>> = self
            .spec
            .params
            .iter()
            .map(|&k| match k {
                ParamKind::Axx => Some(hd[0]),
                ParamKind::Ayy => Some(hd[1]),
                ParamKind::Azz | ParamKind::APar => Some(hd[2]),
                ParamKind::Axz => Some(hd[3]),
                ParamKind::APerp => Some(hd[0] + hd[1]),
                ParamKind::D => Some(ops.sz2),
                ParamKind::GammaEB => Some(zeeman(&n)),
                ParamKind::Alpha | ParamKind::Beta | ParamKind::Psi if !t.lab => None,
                ParamKind::Alpha => Some(zeeman(&(dn[0] * pt.gamma_e_b * t.scale))),
                ParamKind::Beta => Some(zeeman(&(dn[1] * pt.gamma_e_b * t.scale))),
                ParamKind::Psi => Some(zeeman(&(dn[2] * pt.gamma_e_b * t.scale))),
            })
            .collect();
        let de: Vec<[f64; 6]> = dops
            .iter()
            .map(|op| match op {
                Some(op) => std::array::from_fn(|k| levels.expectation(k, op)),
                None => [0.0; 6],
            })
            .collect();
        let rows = transitions
            .iter()
            .map(|&(_, f, i, _, sigma)| de.iter().map(|d| (d[f] - d[i]) / sigma).collect())
            .collect();
        Ok((res, Some(rows)))
    }

    fn eval_electron(&self, t: &Term, pt: &ModelPoint, grad: bool) -> Result<TermOutput> {
        let n = self.nv_direction(t, pt) * t.scale;
        let (values, zero, vectors) = electron_levels(pt.d_zfs, &(n * pt.gamma_e_b))?;
        let mut lines: Vec<(f64, usize)> = (0..3)
            .filter(|&k| k != zero)
            .map(|k| (values[k] - values[zero], k))
            .collect();
        lines.sort_by(|a, b| a.0.total_cmp(&b.0));
        let model_freqs: Vec<f64> = lines.iter().map(|l| l.0).collect();
        let measured: Vec<f64> = t.esr.iter().map(|l| l.0).collect();
        let assign = assign_lines(&model_freqs, &measured)?;
        let res: Vec<f64> = assign
            .iter()
            .enumerate()
            .map(|(m, &k)| (lines[k].0 - t.esr[m].0) / t.esr[m].1)
            .collect();
        if !grad {
            return Ok((res, None));
        }
        let ops = electron_ops();
        let dn = self.direction_derivatives(t, pt);
        let sdot = |v: &Vector3<f64>| {
            ops.s[0] * Complex::from(v.x) + ops.s[1] * Complex::from(v.y) + ops.s[2] * Complex::from(v.z)
        };
        let de: Vec<[f64; 3]> = self
            .spec
            .params
            .iter()
            .map(|&k| {
                let op = match k {
                    ParamKind::D => Some(ops.sz2),
                    ParamKind::GammaEB => Some(sdot(&n)),
                    ParamKind::Alpha if t.lab => Some(sdot(&(dn[0] * pt.gamma_e_b * t.scale))),
                    ParamKind::Beta if t.lab => Some(sdot(&(dn[1] * pt.gamma_e_b * t.scale))),
                    ParamKind::Psi if t.lab => Some(sdot(&(dn[2] * pt.gamma_e_b * t.scale))),
                    _ => None,
                };
                match op {
                    Some(op) => std::array::from_fn(|s| expect3(&vectors, s, &op)),
                    None => [0.0; 3],
                }
            })
            .collect();
        let rows = assign
            .iter()
            .enumerate()
            .map(|(m, &k)| {
                let s = lines[k].1;
                de.iter().map(|d| (d[s] - d[zero]) / t.esr[m].1).collect()
            })
            .collect();
        Ok((res, Some(rows)))
    }

    fn evaluate(&self, p: &DVector<f64>, grad: bool) -> Result<Vec<TermOutput>> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite parameter".into()));
        }
        let pt = self.point(p);
        self.terms
            .par_iter()
            .map(|t| self.eval_term(t, &pt, grad))
            .collect()
    }

    /// Model ESR (and ZQ unless electron-only) frequencies per orientation.
    pub fn model_frequencies(&self, p: &DVector<f64>) -> Result<Vec<Vec<f64>>> {
        let out = self.evaluate(p, false)?;
        Ok(self
            .terms
            .iter()
            .zip(out)
            .map(|(t, (r, _))| {
                let sig = t.esr.iter().chain(&t.zq);
                r.iter().zip(sig).map(|(r, (f, s))| f + r * s).collect()
            })
            .collect())
    }
}

impl ResidualModel for SpinModel {
    fn n_params(&self) -> usize {
        self.spec.params.len()
    }

    fn param_names(&self) -> Vec<String> {
        self.spec.params.iter().map(|k| k.name().to_string()).collect()
    }

    fn param_units(&self) -> Vec<String> {
        self.spec.params.iter().map(|k| k.unit().to_string()).collect()
    }

    fn residuals(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        let out = self.evaluate(p, false)?;
        Ok(DVector::from_iterator(
            out.iter().map(|o| o.0.len()).sum(),
            out.into_iter().flat_map(|o| o.0),
        ))
    }

    fn jacobian(&self, p: &DVector<f64>) -> Result<DMatrix<f64>> {
        let out = self.evaluate(p, true)?;
        let rows: Vec<Vec<f64>> = out.into_iter().flat_map(|o| o.1.unwrap_or_default()).collect();
        let np = self.n_params();
        let mut jac = DMatrix::from_fn(rows.len(), np, |r, c| rows[r][c]);
        // At the pole the azimuth of the axis is undefined; its column is dropped.
        let pt = self.point(p);
        if pt.frame.alpha_deg.to_radians().sin().abs() < 1e-8 {
            if let Some(k) = self.spec.params.iter().position(|&k| k == ParamKind::Beta) {
                jac.column_mut(k).fill(0.0);
            }
        }
        Ok(jac)
    }
}
