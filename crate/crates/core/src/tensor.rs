//! Principal-axis decomposition of the Cs-symmetric hyperfine tensor, the
//! determinant sign, the four spectrally equivalent NV-frame tensors and the
//! amplitude-profile based determinant-sign classifier.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectra::AmplitudeProfile;
use crate::spin::{build_hamiltonian, eigensystem, FieldOrientation, HyperfineTensor, SpinSystemParams};

/// Tetrahedral bond angle used to pick the representative ζ.
pub const GEOMETRY_ZETA_DEG: f64 = 109.5;
/// ζ candidates within this distance of [`GEOMETRY_ZETA_DEG`] are marked preferred.
pub const GEOMETRY_WINDOW_DEG: f64 = 5.0;

/// Principal values tied to their axes: `z` lies along ζ in the xz plane,
/// `x` along ζ + 90°, `y` along the NV y axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrincipalValues {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PasDecomposition {
    /// Principal values ordered by increasing magnitude.
    pub principal: [f64; 3],
    pub axes: PrincipalValues,
    /// Angle from the NV z axis to the in-plane axis of largest magnitude, in [0, 180).
    pub zeta_deg: f64,
    /// ζ, −ζ, 180° − ζ, 180° + ζ.
    pub equivalent_angles: [f64; 4],
    /// Member of the equivalent set (reduced to [0, 180)) near the bond angle, if any.
    pub preferred_zeta_deg: Option<f64>,
}

fn reduce_180(angle: f64) -> f64 {
    let r = angle.rem_euclid(180.0);
    if r >= 180.0 {
        0.0
    } else {
        r
    }
}

/// Closed-form diagonalisation of the 2×2 xz block; `a_yy` is the third value.
pub fn pas_decompose(a: &HyperfineTensor) -> PasDecomposition {
    let mean = 0.5 * (a.a_xx + a.a_zz);
    let half_diff = 0.5 * (a.a_zz - a.a_xx);
    let radius = half_diff.hypot(a.a_xz);
    let upper = mean + radius;
    let lower = mean - radius;
    // Rayleigh quotient along (sin ζ, 0, cos ζ) is mean + half_diff cos 2ζ + a_xz sin 2ζ
    let zeta_upper = 0.5 * a.a_xz.atan2(half_diff).to_degrees();
    let (major, minor, zeta) = if upper.abs() >= lower.abs() {
        (upper, lower, zeta_upper)
    } else {
        (lower, upper, zeta_upper + 90.0)
    };
    let zeta = reduce_180(zeta);
    let mut principal = [minor, a.a_yy, major];
    principal.sort_by(|p, q| p.abs().total_cmp(&q.abs()));
    let equivalent_angles = [zeta, -zeta, 180.0 - zeta, 180.0 + zeta];
    let preferred_zeta_deg = equivalent_angles
        .iter()
        .map(|&z| reduce_180(z))
        .filter(|z| (z - GEOMETRY_ZETA_DEG).abs() <= GEOMETRY_WINDOW_DEG)
        .min_by(|p, q| (p - GEOMETRY_ZETA_DEG).abs().total_cmp(&(q - GEOMETRY_ZETA_DEG).abs()));
    PasDecomposition {
        principal,
        axes: PrincipalValues {
            x: minor,
            y: a.a_yy,
            z: major,
        },
        zeta_deg: zeta,
        equivalent_angles,
        preferred_zeta_deg,
    }
}

/// Rotates diag(x, y, z) by ζ about the NV y axis.
pub fn from_pas(p: &PrincipalValues, zeta_deg: f64) -> HyperfineTensor {
    let (s, c) = zeta_deg.to_radians().sin_cos();
    let w = Vector3::new(s, 0.0, c);
    let u = Vector3::new(c, 0.0, -s);
    let m = u * u.transpose() * p.x + Vector3::y() * Vector3::y().transpose() * p.y + w * w.transpose() * p.z;
    HyperfineTensor::from_matrix(&m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Determinant {
    /// MHz³
    pub value: f64,
    /// −1, 0 or +1
    pub sign: i8,
}

/// det A = a_yy (a_xx a_zz − a_xz²).
pub fn det_sign(a: &HyperfineTensor) -> Determinant {
    let value = a.a_yy * (a.a_xx * a.a_zz - a.a_xz * a.a_xz);
    let sign = if value > 0.0 {
        1
    } else if value < 0.0 {
        -1
    } else {
        0
    };
    Determinant { value, sign }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalentSet {
    /// Input, then the tensors obtained by a π rotation of the nuclear spin
    /// about the NV y axis, the PAS minor in-plane axis and the PAS major axis.
    pub solutions: [HyperfineTensor; 4],
    /// Each member also has an A_xz-negated twin (π rotation of the frame about z),
    /// equivalent only with φ → φ + 180°.
    pub xz_sign_free: bool,
    /// Largest eigenvalue deviation seen during verification, MHz.
    pub max_deviation_mhz: f64,
}

/// Number of random field orientations used by the equivalence check.
pub const EQUIVALENCE_SAMPLES: usize = 20;
/// Tolerance of the equivalence check, MHz.
pub const EQUIVALENCE_TOLERANCE_MHZ: f64 = 1e-6;

/// A·R with R the π rotation about unit axis `e`: 2 (A e) eᵀ − A.
fn rotate_nucleus(a: &HyperfineTensor, e: &Vector3<f64>) -> HyperfineTensor {
    let m = a.matrix();
    let r: Matrix3<f64> = e * e.transpose() * 2.0 - Matrix3::identity();
    HyperfineTensor::from_matrix(&(m * r))
}

/// Sorted eigenvalues of the six-level Hamiltonian.
fn levels_of(sys: &SpinSystemParams, a: &HyperfineTensor, f: &FieldOrientation) -> Result<[f64; 6]> {
    Ok(eigensystem(&build_hamiltonian(sys, a, f))?.eigenvalues)
}

/// Seeded random orientations used for equivalence checks.
pub fn random_orientations(n: usize, seed: u64) -> Vec<FieldOrientation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let b = rng.random_range(0.5..5.0);
            let cos_t: f64 = rng.random_range(-1.0..1.0);
            let phi = rng.random_range(0.0..360.0);
            FieldOrientation::new(b, cos_t.acos().to_degrees(), phi).expect("valid sample")
        })
        .collect()
}

/// Largest eigenvalue difference between two tensors over the given fields.
pub fn spectral_deviation(
    sys: &SpinSystemParams,
    a: &HyperfineTensor,
    b: &HyperfineTensor,
    fields: &[FieldOrientation],
) -> Result<f64> {
    let devs: Vec<f64> = fields
        .par_iter()
        .map(|f| {
            let ea = levels_of(sys, a, f)?;
            let eb = levels_of(sys, b, f)?;
            Ok(ea.iter().zip(eb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
        })
        .collect::<Result<_>>()?;
    Ok(devs.into_iter().fold(0.0, f64::max))
}

/// The four NV-frame tensors sharing |principal values|, det A and the full
/// spectrum (exactly, once the nuclear Zeeman term is dropped). Each candidate
/// is checked by brute-force eigenvalue comparison; a failure is an error.
pub fn equivalent_solutions(a: &HyperfineTensor) -> Result<EquivalentSet> {
    let pas = pas_decompose(a);
    let (s, c) = pas.zeta_deg.to_radians().sin_cos();
    let major = Vector3::new(s, 0.0, c);
    let minor = Vector3::new(c, 0.0, -s);
    let solutions = [
        *a,
        rotate_nucleus(a, &Vector3::y()),
        rotate_nucleus(a, &minor),
        rotate_nucleus(a, &major),
    ];
    let sys = SpinSystemParams::default().without_nuclear_zeeman();
    let fields = random_orientations(EQUIVALENCE_SAMPLES, 0x5eed_a11c);
    let mut worst: f64 = 0.0;
    for (index, cand) in solutions.iter().enumerate().skip(1) {
        let dev = spectral_deviation(&sys, a, cand, &fields)?;
        if dev > EQUIVALENCE_TOLERANCE_MHZ {
            return Err(Error::EquivalenceViolation {
                index,
                deviation_mhz: dev,
            });
        }
        worst = worst.max(dev);
    }
    Ok(EquivalentSet {
        solutions,
        xz_sign_free: true,
        max_deviation_mhz: worst,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetVerdict {
    Positive,
    Negative,
    Inconclusive,
}

impl std::fmt::Display for DetVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DetVerdict::Positive => "det(A) > 0",
            DetVerdict::Negative => "det(A) < 0",
            DetVerdict::Inconclusive => "inconclusive",
        })
    }
}

/// Thresholds on the share s = (I₁+I₄)/(I₁+I₂+I₃+I₄) = r/(1+r) of the
/// outer lines, r being the profile ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetClassifierConfig {
    /// max s − min s above this (and I₁, I₄ positively correlated) → det > 0.
    pub positive_depth: f64,
    /// max s − min s below this with mean s above `negative_share` → det < 0.
    pub negative_depth: f64,
    pub negative_share: f64,
}

impl Default for DetClassifierConfig {
    fn default() -> Self {
        Self {
            positive_depth: 0.5,
            negative_depth: 0.2,
            negative_share: 2.0 / 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetClassification {
    pub verdict: DetVerdict,
    /// Modulation depth of the outer-line share.
    pub depth: f64,
    pub mean_share: f64,
    /// Pearson correlation of I₁ and I₄, when intensities are available.
    pub outer_correlation: Option<f64>,
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

fn share(r: f64) -> f64 {
    if r.is_infinite() {
        1.0
    } else {
        r / (1.0 + r)
    }
}

/// Decides the determinant sign from the in-plane amplitude pattern: strong,
/// in-phase modulation of the outer lines means det > 0; a nearly constant
/// pattern dominated by the outer lines means det < 0.
pub fn classify_det_sign(profile: &AmplitudeProfile, cfg: &DetClassifierConfig) -> Result<DetClassification> {
    let phi = &profile.phi_deg;
    if phi.len() < 4 || phi.len() != profile.ratio.len() {
        return Err(Error::InsufficientData("profile needs at least 4 points".into()));
    }
    let mut sorted = phi.clone();
    sorted.sort_by(f64::total_cmp);
    let step = sorted
        .windows(2)
        .map(|w| w[1] - w[0])
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let span = sorted[sorted.len() - 1] - sorted[0] + if step.is_finite() { step } else { 0.0 };
    if span < 180.0 - 1e-9 {
        return Err(Error::InsufficientData(format!(
            "profile covers {span:.1} deg of phi, need 180"
        )));
    }

    // Points where two of the lines coincide carry an arbitrary I₁..I₄ order.
    let keep: Vec<bool> = phi.iter().map(|p| !profile.ordering_flags.contains(p)).collect();
    let shares: Vec<f64> = match &profile.intensities {
        Some(rows) => rows
            .iter()
            .map(|r| {
                let total: f64 = r.iter().sum();
                if total > 0.0 {
                    (r[0] + r[3]) / total
                } else {
                    0.0
                }
            })
            .collect(),
        None => profile.ratio.iter().map(|&r| share(r)).collect(),
    };
    let usable = keep.iter().filter(|k| **k).count();
    if 2 * usable < phi.len() {
        return Ok(DetClassification {
            verdict: DetVerdict::Inconclusive,
            depth: 0.0,
            mean_share: shares.iter().sum::<f64>() / shares.len() as f64,
            outer_correlation: None,
        });
    }
    let pick = |v: &[f64]| -> Vec<f64> { v.iter().zip(&keep).filter(|(_, k)| **k).map(|(x, _)| *x).collect() };
    let shares = pick(&shares);
    let hi = shares.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = shares.iter().copied().fold(f64::INFINITY, f64::min);
    let depth = hi - lo;
    let mean_share = shares.iter().sum::<f64>() / shares.len() as f64;
    let outer_correlation = profile.intensities.as_ref().map(|rows| {
        let i1 = pick(&rows.iter().map(|r| r[0]).collect::<Vec<_>>());
        let i4 = pick(&rows.iter().map(|r| r[3]).collect::<Vec<_>>());
        pearson(&i1, &i4)
    });

    let verdict = if depth > cfg.positive_depth && outer_correlation.is_none_or(|c| c > 0.0) {
        DetVerdict::Positive
    } else if depth < cfg.negative_depth && mean_share > cfg.negative_share {
        DetVerdict::Negative
    } else {
        DetVerdict::Inconclusive
    };
    Ok(DetClassification {
        verdict,
        depth,
        mean_share,
        outer_correlation,
    })
}
