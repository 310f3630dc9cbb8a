//! Transition frequencies and amplitudes: the eight ESR lines out of the
//! mS = 0 doublet, the nuclear zero-quantum line inside it, Rabi-frequency
//! ratios, in-plane amplitude profiles and synthetic datasets.

use nalgebra::{Complex, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spin::{
    build_hamiltonian, eigensystem, EnergyLevels, FieldOrientation, HyperfineTensor, Mat6,
    SpinOperators, SpinSystemParams, StateLabel, LABEL_THRESHOLD,
};

/// Linearly polarised microwave drive along a unit direction in the NV frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicrowaveField {
    direction: Vector3<f64>,
    nuclear_factor: f64,
}

impl MicrowaveField {
    /// Normalises `direction`; the nuclear drive weight is γn/γe of `sys`.
    pub fn new(direction: Vector3<f64>, sys: &SpinSystemParams) -> Result<Self> {
        let n = direction.norm();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::InvalidParameter("microwave direction must be non-zero".into()));
        }
        Ok(Self {
            direction: direction / n,
            nuclear_factor: sys.nuclear_drive_factor(),
        })
    }

    /// Direction from polar/azimuthal angles in degrees.
    pub fn from_angles(theta_deg: f64, phi_deg: f64, sys: &SpinSystemParams) -> Result<Self> {
        let (st, ct) = theta_deg.to_radians().sin_cos();
        let (sp, cp) = phi_deg.to_radians().sin_cos();
        Self::new(Vector3::new(st * cp, st * sp, ct), sys)
    }

    pub fn direction(&self) -> Vector3<f64> {
        self.direction
    }

    pub fn nuclear_factor(&self) -> f64 {
        self.nuclear_factor
    }

    /// (S + (γn/γe) I)·n
    pub fn drive_operator(&self) -> Mat6 {
        let ops = SpinOperators::get();
        ops.s_dot(&self.direction) + ops.i_dot(&self.direction) * Complex::from(self.nuclear_factor)
    }

    /// Reflection through the xz mirror plane.
    pub fn reflected(&self) -> Self {
        Self {
            direction: Vector3::new(self.direction.x, -self.direction.y, self.direction.z),
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineKind {
    Esr,
    Zq,
}

impl std::fmt::Display for LineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LineKind::Esr => "esr",
            LineKind::Zq => "zq",
        })
    }
}

impl std::str::FromStr for LineKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "esr" => Ok(LineKind::Esr),
            "zq" => Ok(LineKind::Zq),
            other => Err(format!("unknown line kind '{other}' (expected esr or zq)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralLine {
    /// MHz
    pub freq: f64,
    /// Squared drive matrix element.
    pub amplitude: f64,
    pub from: StateLabel,
    pub to: StateLabel,
    pub kind: LineKind,
}

/// Indices of the (branch 0, branch 1) mS = 0 states. Only these two need a
/// confident label for the ESR/ZQ taxonomy; the mS = ±1 states may be mixed
/// near anticrossings.
pub fn zero_pair(levels: &EnergyLevels) -> Result<[usize; 2]> {
    let b0 = levels.index_of(StateLabel::new(0, 0));
    let b1 = levels.index_of(StateLabel::new(0, 1));
    match (b0, b1) {
        (Some(i), Some(j)) if i != j => {
            let worst = levels.overlaps[i].min(levels.overlaps[j]);
            if worst < LABEL_THRESHOLD {
                return Err(Error::AmbiguousLabels { min_overlap: worst });
            }
            Ok([i, j])
        }
        _ => Err(Error::AmbiguousLabels {
            min_overlap: levels.overlaps.iter().copied().fold(f64::INFINITY, f64::min),
        }),
    }
}

/// The eight mS = 0 → mS = ±1 lines, ascending in frequency.
pub fn esr_lines(levels: &EnergyLevels, mw: &MicrowaveField) -> Result<Vec<SpectralLine>> {
    let pair = zero_pair(levels)?;
    let drive = mw.drive_operator();
    let mut lines = Vec::with_capacity(8);
    for &i in &pair {
        for f in (0..6).filter(|k| !pair.contains(k)) {
            lines.push(SpectralLine {
                freq: levels.eigenvalues[f] - levels.eigenvalues[i],
                amplitude: levels.matrix_element(f, &drive, i).norm_sqr(),
                from: levels.labels[i],
                to: levels.labels[f],
                kind: LineKind::Esr,
            });
        }
    }
    lines.sort_by(|a, b| a.freq.total_cmp(&b.freq));
    Ok(lines)
}

/// |E(0, 1) − E(0, 0)|: depends only on the mS = 0 doublet, never on an ESR line.
pub fn zq_frequency_exact(levels: &EnergyLevels) -> Result<f64> {
    let [i, j] = zero_pair(levels)?;
    Ok((levels.eigenvalues[j] - levels.eigenvalues[i]).abs())
}

pub fn zq_line(levels: &EnergyLevels, mw: &MicrowaveField) -> Result<SpectralLine> {
    let [i, j] = zero_pair(levels)?;
    Ok(SpectralLine {
        freq: (levels.eigenvalues[j] - levels.eigenvalues[i]).abs(),
        amplitude: levels.matrix_element(j, &mw.drive_operator(), i).norm_sqr(),
        from: levels.labels[i],
        to: levels.labels[j],
        kind: LineKind::Zq,
    })
}

/// Eight ESR lines followed by the zero-quantum line.
pub fn spectrum(levels: &EnergyLevels, mw: &MicrowaveField) -> Result<Vec<SpectralLine>> {
    let mut lines = esr_lines(levels, mw)?;
    lines.push(zq_line(levels, mw)?);
    Ok(lines)
}

/// Convenience: build, diagonalise and return the nine lines.
pub fn simulate(
    sys: &SpinSystemParams,
    a: &HyperfineTensor,
    field: &FieldOrientation,
    mw: &MicrowaveField,
) -> Result<Vec<SpectralLine>> {
    spectrum(&eigensystem(&build_hamiltonian(sys, a, field))?, mw)
}

/// Second-order zero-quantum splitting
/// `2|γeB sinθ|/D · (sqrt(Axx² + Axz²) cos²φ + |Ayy| sin²φ)`.
pub fn zq_frequency_perturbative(
    sys: &SpinSystemParams,
    a: &HyperfineTensor,
    field: &FieldOrientation,
) -> f64 {
    let gb = sys.gamma_e * field.b_mag();
    let (st, _) = field.theta_deg().to_radians().sin_cos();
    let (sp, cp) = field.phi_deg().to_radians().sin_cos();
    let kappa_x = a.a_xx.hypot(a.a_xz);
    let kappa_y = a.a_yy.abs();
    2.0 * (gb * st).abs() / sys.d_zfs * (kappa_x * cp * cp + kappa_y * sp * sp)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RabiRatio {
    /// Larger moment over smaller, ≥ 1; `f64::INFINITY` when one transition is forbidden.
    pub ratio: f64,
    /// Branch of the mS = 0 state whose transition is stronger.
    pub stronger_branch: u8,
    /// Unsquared |⟨upper|V|0, branch⟩| for branch 0 and 1.
    pub moments: [f64; 2],
}

impl RabiRatio {
    pub fn is_infinite(&self) -> bool {
        self.ratio.is_infinite()
    }
}

/// Ratio of the two dipole moments connecting the mS = 0 doublet to one upper state.
pub fn rabi_ratio(levels: &EnergyLevels, mw: &MicrowaveField, upper: StateLabel) -> Result<RabiRatio> {
    if upper.ms == 0 {
        return Err(Error::InvalidParameter("upper state must carry mS = ±1".into()));
    }
    let [i0, i1] = zero_pair(levels)?;
    let f = levels.index_of(upper).ok_or_else(|| {
        Error::InvalidParameter(format!("no state labelled {upper}"))
    })?;
    if levels.overlaps[f] < LABEL_THRESHOLD {
        return Err(Error::AmbiguousLabels {
            min_overlap: levels.overlaps[f],
        });
    }
    let drive = mw.drive_operator();
    let m0 = levels.matrix_element(f, &drive, i0).norm();
    let m1 = levels.matrix_element(f, &drive, i1).norm();
    let (hi, lo, stronger) = if m0 >= m1 { (m0, m1, 0) } else { (m1, m0, 1) };
    if hi == 0.0 {
        return Err(Error::InsufficientData(format!(
            "both transitions into {upper} carry zero moment"
        )));
    }
    // tiny moments below roundoff are treated as forbidden
    let ratio = if lo <= 1e-12 * hi { f64::INFINITY } else { hi / lo };
    Ok(RabiRatio {
        ratio,
        stronger_branch: stronger,
        moments: [m0, m1],
    })
}

/// Amplitudes of the four lowest ESR lines over an azimuthal sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeProfile {
    pub phi_deg: Vec<f64>,
    /// I₁..I₄ per φ, lines ordered by ascending frequency at each φ. `None`
    /// for profiles built from measured ratios only.
    pub intensities: Option<Vec<[f64; 4]>>,
    /// (I₁ + I₄)/(I₂ + I₃) per φ.
    pub ratio: Vec<f64>,
    /// φ values where two of the four lines lie within the ordering tolerance.
    pub ordering_flags: Vec<f64>,
}

/// Frequencies closer than this make the I₁..I₄ ordering ambiguous.
pub const ORDERING_TOLERANCE_MHZ: f64 = 1e-3;

impl AmplitudeProfile {
    /// Profile carrying only measured ratio values.
    pub fn from_ratios(phi_deg: Vec<f64>, ratio: Vec<f64>) -> Result<Self> {
        if phi_deg.len() != ratio.len() {
            return Err(Error::InvalidParameter("phi and ratio lengths differ".into()));
        }
        Ok(Self {
            phi_deg,
            intensities: None,
            ratio,
            ordering_flags: Vec::new(),
        })
    }

    pub fn ensure_ordered(&self) -> Result<()> {
        match self.ordering_flags.first() {
            Some(&phi) => Err(Error::LineOrdering {
                phi_deg: phi,
                gap_mhz: ORDERING_TOLERANCE_MHZ,
            }),
            None => Ok(()),
        }
    }

    /// Column k of the intensity table.
    pub fn line(&self, k: usize) -> Option<Vec<f64>> {
        self.intensities.as_ref().map(|rows| rows.iter().map(|r| r[k]).collect())
    }
}

pub fn amplitude_ratio_profile(
    sys: &SpinSystemParams,
    a: &HyperfineTensor,
    b_mag: f64,
    theta_deg: f64,
    mw: &MicrowaveField,
    phi_grid: &[f64],
) -> Result<AmplitudeProfile> {
    let rows: Vec<([f64; 4], f64, bool)> = phi_grid
        .par_iter()
        .map(|&phi| {
            let field = FieldOrientation::new(b_mag, theta_deg, phi)?;
            let lines = esr_lines(&eigensystem(&build_hamiltonian(sys, a, &field))?, mw)?;
            let low: [f64; 4] = std::array::from_fn(|k| lines[k].amplitude);
            let clash = lines[..5]
                .windows(2)
                .any(|w| (w[1].freq - w[0].freq).abs() < ORDERING_TOLERANCE_MHZ);
            let ratio = (low[0] + low[3]) / (low[1] + low[2]);
            Ok((low, ratio, clash))
        })
        .collect::<Result<_>>()?;
    Ok(AmplitudeProfile {
        phi_deg: phi_grid.to_vec(),
        ordering_flags: phi_grid
            .iter()
            .zip(&rows)
            .filter(|(_, r)| r.2)
            .map(|(p, _)| *p)
            .collect(),
        intensities: Some(rows.iter().map(|r| r.0).collect()),
        ratio: rows.iter().map(|r| r.1).collect(),
    })
}

/// Full widths (MHz) used as the synthetic noise scale: σ = width / 2.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineWidths {
    pub esr: f64,
    pub zq: f64,
}

impl Default for LineWidths {
    fn default() -> Self {
        Self { esr: 0.6, zq: 0.06 }
    }
}

/// Reported uncertainty for lines with zero width, MHz.
pub const MIN_SIGMA_MHZ: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLine {
    pub kind: LineKind,
    pub freq: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOrientation {
    pub field: FieldOrientation,
    pub lines: Vec<SyntheticLine>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub orientations: Vec<SyntheticOrientation>,
    /// `None` means noiseless.
    pub seed: Option<u64>,
    pub widths: LineWidths,
}

/// Exact spectra at every orientation plus independent Gaussian noise with
/// σ = width/2 per line. `seed = None` gives the exact frequencies.
pub fn synth_dataset(
    sys: &SpinSystemParams,
    a: &HyperfineTensor,
    orientations: &[FieldOrientation],
    mw: &MicrowaveField,
    widths: LineWidths,
    seed: Option<u64>,
) -> Result<SyntheticDataset> {
    if orientations.is_empty() {
        return Err(Error::InsufficientData("no orientations given".into()));
    }
    if !(widths.esr >= 0.0 && widths.zq >= 0.0) {
        return Err(Error::InvalidParameter("line widths must be >= 0".into()));
    }
    let exact: Vec<Vec<SpectralLine>> = orientations
        .par_iter()
        .map(|f| simulate(sys, a, f, mw))
        .collect::<Result<_>>()?;

    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let out = orientations
        .iter()
        .zip(exact)
        .map(|(field, lines)| SyntheticOrientation {
            field: *field,
            lines: lines
                .into_iter()
                .map(|l| {
                    let width = match l.kind {
                        LineKind::Esr => widths.esr,
                        LineKind::Zq => widths.zq,
                    };
                    let sigma = width / 2.0;
                    let noise = rng.as_mut().map_or(0.0, |r| unit.sample(r) * sigma);
                    SyntheticLine {
                        kind: l.kind,
                        freq: l.freq + noise,
                        sigma: sigma.max(MIN_SIGMA_MHZ),
                        amplitude: l.amplitude,
                    }
                })
                .collect(),
        })
        .collect();
    Ok(SyntheticDataset {
        orientations: out,
        seed,
        widths,
    })
}
