//! Measured datasets: orientations, line frequencies and amplitude ratios.

use std::collections::{HashMap, HashSet};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectra::{LineKind, SyntheticDataset};
use crate::spin::FieldOrientation;

/// How an orientation record's two angles are to be read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    /// (θ, φ) of B in the NV frame.
    Nv,
    /// Polar/azimuth of B in the laboratory frame.
    Lab,
}

impl std::fmt::Display for Frame {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Frame::Nv => "nv",
            Frame::Lab => "lab",
        })
    }
}

impl std::str::FromStr for Frame {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "nv" => Ok(Frame::Nv),
            "lab" => Ok(Frame::Lab),
            other => Err(format!("unknown frame '{other}' (expected nv or lab)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientationRecord {
    pub id: String,
    pub frame: Frame,
    pub angle1_deg: f64,
    pub angle2_deg: f64,
    pub b_mt: f64,
}

impl OrientationRecord {
    /// Unit vector of B in the record's own frame.
    pub fn direction(&self) -> Vector3<f64> {
        polar_unit(self.angle1_deg, self.angle2_deg)
    }

    pub fn nv_field(&self) -> Result<FieldOrientation> {
        match self.frame {
            Frame::Nv => FieldOrientation::new(self.b_mt, self.angle1_deg, self.angle2_deg),
            Frame::Lab => Err(Error::InvalidParameter(format!(
                "orientation '{}' is lab-frame; a frame rotation is needed",
                self.id
            ))),
        }
    }
}

pub(crate) fn polar_unit(polar_deg: f64, azimuth_deg: f64) -> Vector3<f64> {
    let (st, ct) = polar_deg.to_radians().sin_cos();
    let (sp, cp) = azimuth_deg.to_radians().sin_cos();
    Vector3::new(st * cp, st * sp, ct)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineRecord {
    pub orient_id: String,
    pub kind: LineKind,
    pub freq_mhz: f64,
    pub sigma_mhz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRecord {
    pub orient_id: String,
    pub phi_deg: f64,
    pub ratio: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasuredDataset {
    pub orientations: Vec<OrientationRecord>,
    pub lines: Vec<LineRecord>,
    pub ratios: Vec<RatioRecord>,
}

/// Lines of one orientation, split by kind, each as (freq, σ).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OrientationLines {
    pub esr: Vec<(f64, f64)>,
    pub zq: Vec<(f64, f64)>,
}

impl MeasuredDataset {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for o in &self.orientations {
            if !ids.insert(o.id.as_str()) {
                return Err(Error::InvalidParameter(format!("duplicate orientation id '{}'", o.id)));
            }
            if !(o.angle1_deg.is_finite() && o.angle2_deg.is_finite()) {
                return Err(Error::InvalidParameter(format!("orientation '{}': non-finite angle", o.id)));
            }
            if !(o.b_mt.is_finite() && o.b_mt >= 0.0) {
                return Err(Error::InvalidParameter(format!("orientation '{}': b_mT must be >= 0", o.id)));
            }
        }
        for l in &self.lines {
            if !ids.contains(l.orient_id.as_str()) {
                return Err(Error::InvalidParameter(format!("line references unknown orientation '{}'", l.orient_id)));
            }
            if !l.freq_mhz.is_finite() {
                return Err(Error::InvalidParameter(format!("orientation '{}': non-finite frequency", l.orient_id)));
            }
            if !(l.sigma_mhz.is_finite() && l.sigma_mhz > 0.0) {
                return Err(Error::InvalidParameter(format!("orientation '{}': uncertainty must be > 0", l.orient_id)));
            }
        }
        for r in &self.ratios {
            if !ids.contains(r.orient_id.as_str()) {
                return Err(Error::InvalidParameter(format!("ratio references unknown orientation '{}'", r.orient_id)));
            }
            if !(r.phi_deg.is_finite() && r.ratio.is_finite()) {
                return Err(Error::InvalidParameter(format!("orientation '{}': non-finite ratio row", r.orient_id)));
            }
            if !(r.sigma.is_finite() && r.sigma > 0.0) {
                return Err(Error::InvalidParameter(format!("orientation '{}': ratio uncertainty must be > 0", r.orient_id)));
            }
        }
        Ok(())
    }

    pub fn orientation(&self, id: &str) -> Option<&OrientationRecord> {
        self.orientations.iter().find(|o| o.id == id)
    }

    /// Lines grouped per orientation, in `orientations` order.
    pub fn grouped_lines(&self) -> Vec<OrientationLines> {
        let index: HashMap<&str, usize> = self
            .orientations
            .iter()
            .enumerate()
            .map(|(k, o)| (o.id.as_str(), k))
            .collect();
        let mut out = vec![OrientationLines::default(); self.orientations.len()];
        for l in &self.lines {
            if let Some(&k) = index.get(l.orient_id.as_str()) {
                let slot = match l.kind {
                    LineKind::Esr => &mut out[k].esr,
                    LineKind::Zq => &mut out[k].zq,
                };
                slot.push((l.freq_mhz, l.sigma_mhz));
            }
        }
        out
    }

    pub fn count(&self, kind: LineKind) -> usize {
        self.lines.iter().filter(|l| l.kind == kind).count()
    }

    /// NV-frame records ("o01", "o02", ...) for a synthetic dataset.
    pub fn from_synthetic(ds: &SyntheticDataset) -> Self {
        let width = ds.orientations.len().to_string().len().max(2);
        let mut out = Self::default();
        for (k, o) in ds.orientations.iter().enumerate() {
            let id = format!("o{:0width$}", k + 1);
            out.orientations.push(OrientationRecord {
                id: id.clone(),
                frame: Frame::Nv,
                angle1_deg: o.field.theta_deg(),
                angle2_deg: o.field.phi_deg(),
                b_mt: o.field.b_mag(),
            });
            for l in &o.lines {
                out.lines.push(LineRecord {
                    orient_id: id.clone(),
                    kind: l.kind,
                    freq_mhz: l.freq,
                    sigma_mhz: l.sigma,
                });
            }
        }
        out
    }

    /// Drops lines of the given kind.
    pub fn without(&self, kind: LineKind) -> Self {
        Self {
            lines: self.lines.iter().filter(|l| l.kind != kind).cloned().collect(),
            ..self.clone()
        }
    }
}

/// Pairs measured lines with model lines one-to-one. With equal counts the
/// sorted lists are paired in order; with fewer measured lines each one
/// takes the nearest still-free model line, closest pairs first. Returns the
/// model index for every measured line.
pub fn assign_lines(model: &[f64], measured: &[f64]) -> Result<Vec<usize>> {
    if measured.len() > model.len() {
        return Err(Error::InvalidParameter(format!(
            "{} measured lines but the model has only {}",
            measured.len(),
            model.len()
        )));
    }
    let sorted = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        idx
    };
    let mut out = vec![0; measured.len()];
    if measured.len() == model.len() {
        for (m, k) in sorted(measured).into_iter().zip(sorted(model)) {
            out[m] = k;
        }
        return Ok(out);
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(measured.len() * model.len());
    for (m, &x) in measured.iter().enumerate() {
        for (k, &y) in model.iter().enumerate() {
            pairs.push(((x - y).abs(), m, k));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut m_done = vec![false; measured.len()];
    let mut k_done = vec![false; model.len()];
    for (_, m, k) in pairs {
        if !m_done[m] && !k_done[k] {
            m_done[m] = true;
            k_done[k] = true;
            out[m] = k;
        }
    }
    Ok(out)
}

/// Orientation of the NV frame in the laboratory, as the rotation
/// R = Rz(β)·Ry(α)·Rz(ψ) taking NV coordinates to lab coordinates. The NV
/// z axis in the lab has polar angle α and azimuth β; ψ is the roll about it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabFrame {
    pub alpha_deg: f64,
    pub beta_deg: f64,
    pub psi_deg: f64,
}

impl Default for LabFrame {
    fn default() -> Self {
        Self {
            alpha_deg: 0.0,
            beta_deg: 0.0,
            psi_deg: 0.0,
        }
    }
}

fn rz(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn ry(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn drz(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

fn dry(t: f64) -> Matrix3<f64> {
    let (s, c) = t.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

impl LabFrame {
    pub fn new(alpha_deg: f64, beta_deg: f64, psi_deg: f64) -> Self {
        Self {
            alpha_deg,
            beta_deg,
            psi_deg,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let (a, b, p) = self.radians();
        rz(b) * ry(a) * rz(p)
    }

    /// ∂R/∂(α, β, ψ), per radian.
    pub fn rotation_derivatives(&self) -> [Matrix3<f64>; 3] {
        let (a, b, p) = self.radians();
        [
            rz(b) * dry(a) * rz(p),
            drz(b) * ry(a) * rz(p),
            rz(b) * ry(a) * drz(p),
        ]
    }

    fn radians(&self) -> (f64, f64, f64) {
        (
            self.alpha_deg.to_radians(),
            self.beta_deg.to_radians(),
            self.psi_deg.to_radians(),
        )
    }

    /// NV z axis in lab coordinates.
    pub fn axis(&self) -> Vector3<f64> {
        polar_unit(self.alpha_deg, self.beta_deg)
    }

    pub fn to_nv(&self, lab: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().transpose() * lab
    }

    pub fn to_lab(&self, nv: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * nv
    }
}

/// Angle between two axes, ignoring their sign, degrees.
pub fn axis_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = (a.dot(b) / (a.norm() * b.norm())).abs().min(1.0);
    c.acos().to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_counts_pair_sorted() {
        let got = assign_lines(&[3.0, 1.0, 2.0], &[2.1, 0.9, 3.2]).unwrap();
        assert_eq!(got, vec![2, 1, 0]);
    }

    #[test]
    fn subset_takes_nearest_free_line() {
        let got = assign_lines(&[1.0, 2.0, 3.0, 4.0], &[2.9, 3.05]).unwrap();
        assert_eq!(got, vec![1, 2]);
        assert!(assign_lines(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rotation_is_orthonormal_and_axis_matches() {
        let f = LabFrame::new(37.0, 121.0, -15.0);
        let r = f.rotation();
        assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-14);
        assert!((r.determinant() - 1.0).abs() < 1e-14);
        assert!((r.column(2) - f.axis()).amax() < 1e-14);
        let v = Vector3::new(0.3, -0.2, 0.9);
        assert!((f.to_lab(&f.to_nv(&v)) - v).amax() < 1e-14);
    }

    #[test]
    fn rotation_derivatives_match_differences() {
        let f = LabFrame::new(37.0, 121.0, -15.0);
        let d = f.rotation_derivatives();
        let h = 1e-6_f64;
        for k in 0..3 {
            let mut hi = [f.alpha_deg, f.beta_deg, f.psi_deg];
            let mut lo = hi;
            hi[k] += h.to_degrees();
            lo[k] -= h.to_degrees();
            let num = (LabFrame::new(hi[0], hi[1], hi[2]).rotation() - LabFrame::new(lo[0], lo[1], lo[2]).rotation()) / (2.0 * h);
            assert!((num - d[k]).amax() < 1e-8, "{k}");
        }
    }

    #[test]
    fn validation_rejects_bad_records() {
        let mut ds = MeasuredDataset {
            orientations: vec![OrientationRecord {
                id: "a".into(),
                frame: Frame::Nv,
                angle1_deg: 10.0,
                angle2_deg: 0.0,
                b_mt: 2.0,
            }],
            lines: vec![LineRecord {
                orient_id: "a".into(),
                kind: LineKind::Esr,
                freq_mhz: 2800.0,
                sigma_mhz: 0.3,
            }],
            ratios: vec![],
        };
        assert!(ds.validate().is_ok());
        ds.lines[0].sigma_mhz = 0.0;
        assert!(ds.validate().is_err());
        ds.lines[0].sigma_mhz = 0.3;
        ds.lines[0].orient_id = "b".into();
        assert!(ds.validate().is_err());
        ds.lines.clear();
        ds.orientations.push(ds.orientations[0].clone());
        assert!(ds.validate().is_err());
    }
}
