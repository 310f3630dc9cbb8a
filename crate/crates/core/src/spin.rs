//! Spin operators, the six-level NV electron / 13C nuclear Hamiltonian and
//! its labelled eigensystem.
//!
//! Basis order is fixed as `(mS = +1, 0, -1) ⊗ (mI = +1/2, -1/2)`, so basis
//! index `2 * block + nuclear` with `block = 0` for `mS = +1`. All energies
//! are in MHz (h = 1), fields in mT and angles in degrees at the interface.

use std::sync::OnceLock;

use nalgebra::{Complex, DMatrix, Matrix3, Matrix6, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;
pub type Mat6 = Matrix6<C64>;

/// Electron gyromagnetic ratio, MHz/mT (sign convention: positive).
pub const GAMMA_E_MHZ_PER_MT: f64 = 28.02495;
/// 13C gyromagnetic ratio, MHz/mT.
pub const GAMMA_N_13C_MHZ_PER_MT: f64 = 0.0107084;
/// Ground-state zero-field splitting, MHz.
pub const D_ZFS_MHZ: f64 = 2870.2;
/// Minimum squared overlap with one mS block for a state to be labelled.
pub const LABEL_THRESHOLD: f64 = 0.6;

const ZERO: C64 = Complex { re: 0.0, im: 0.0 };

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinSystemParams {
    /// Zero-field splitting, MHz.
    pub d_zfs: f64,
    /// Electron gyromagnetic ratio, MHz/mT.
    pub gamma_e: f64,
    /// Nuclear gyromagnetic ratio, MHz/mT.
    pub gamma_n: f64,
}

impl Default for SpinSystemParams {
    fn default() -> Self {
        Self {
            d_zfs: D_ZFS_MHZ,
            gamma_e: GAMMA_E_MHZ_PER_MT,
            gamma_n: GAMMA_N_13C_MHZ_PER_MT,
        }
    }
}

impl SpinSystemParams {
    pub fn new(d_zfs: f64, gamma_e: f64, gamma_n: f64) -> Result<Self> {
        let p = Self {
            d_zfs,
            gamma_e,
            gamma_n,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_zfs.is_finite() && self.d_zfs > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "zero-field splitting must be positive, got {}",
                self.d_zfs
            )));
        }
        if !(self.gamma_e.is_finite() && self.gamma_e > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma_e must be positive, got {}",
                self.gamma_e
            )));
        }
        if !self.gamma_n.is_finite() || self.gamma_n.abs() >= 1e-3 * self.gamma_e {
            return Err(Error::InvalidParameter(format!(
                "|gamma_n| must be below 1e-3 gamma_e, got {}",
                self.gamma_n
            )));
        }
        Ok(())
    }

    /// Same system with the nuclear Zeeman term switched off.
    pub fn without_nuclear_zeeman(self) -> Self {
        Self {
            gamma_n: 0.0,
            ..self
        }
    }

    /// γn/γe, the relative weight of the nuclear term in the drive operator.
    pub fn nuclear_drive_factor(&self) -> f64 {
        self.gamma_n / self.gamma_e
    }
}

/// Hyperfine tensor in the NV frame. The mirror plane (xz) forces
/// `A_xy = A_yz = 0`, leaving four independent components (MHz).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HyperfineTensor {
    pub a_xx: f64,
    pub a_yy: f64,
    pub a_zz: f64,
    pub a_xz: f64,
}

impl HyperfineTensor {
    pub const fn new(a_xx: f64, a_yy: f64, a_zz: f64, a_xz: f64) -> Self {
        Self {
            a_xx,
            a_yy,
            a_zz,
            a_xz,
        }
    }

    pub const fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.a_xx, 0.0, self.a_xz, //
            0.0, self.a_yy, 0.0, //
            self.a_xz, 0.0, self.a_zz,
        )
    }

    /// Reads the Cs components back from a 3×3 matrix, symmetrising the xz entries.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        Self::new(m[(0, 0)], m[(1, 1)], m[(2, 2)], 0.5 * (m[(0, 2)] + m[(2, 0)]))
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.a_xx, self.a_yy, self.a_zz, self.a_xz]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Largest componentwise difference, MHz.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// Static magnetic field: magnitude (mT) plus polar/azimuthal angles (degrees)
/// in the NV frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldOrientation {
    b_mag: f64,
    theta: f64,
    phi: f64,
}

impl FieldOrientation {
    /// `theta` must lie in [0, 180]; `phi` is wrapped into [0, 360).
    pub fn new(b_mag: f64, theta_deg: f64, phi_deg: f64) -> Result<Self> {
        if !(b_mag.is_finite() && b_mag >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "field magnitude must be >= 0, got {b_mag}"
            )));
        }
        if !(theta_deg.is_finite() && (0.0..=180.0).contains(&theta_deg)) {
            return Err(Error::InvalidParameter(format!(
                "theta must lie in [0, 180] degrees, got {theta_deg}"
            )));
        }
        if !phi_deg.is_finite() {
            return Err(Error::InvalidParameter("phi must be finite".into()));
        }
        let mut phi = phi_deg.rem_euclid(360.0);
        if phi >= 360.0 {
            phi = 0.0;
        }
        Ok(Self {
            b_mag,
            theta: theta_deg,
            phi,
        })
    }

    /// Field along the NV axis.
    pub fn along_z(b_mag: f64) -> Result<Self> {
        Self::new(b_mag, 0.0, 0.0)
    }

    /// Builds the orientation from a Cartesian field vector (mT, NV frame).
    pub fn from_vector(b: &Vector3<f64>) -> Self {
        let mag = b.norm();
        if mag == 0.0 {
            return Self {
                b_mag: 0.0,
                theta: 0.0,
                phi: 0.0,
            };
        }
        let theta = (b.z / mag).clamp(-1.0, 1.0).acos().to_degrees();
        let phi = b.y.atan2(b.x).to_degrees().rem_euclid(360.0);
        Self {
            b_mag: mag,
            theta,
            phi: if phi >= 360.0 { 0.0 } else { phi },
        }
    }

    pub fn b_mag(&self) -> f64 {
        self.b_mag
    }

    pub fn theta_deg(&self) -> f64 {
        self.theta
    }

    pub fn phi_deg(&self) -> f64 {
        self.phi
    }

    pub fn with_phi(&self, phi_deg: f64) -> Result<Self> {
        Self::new(self.b_mag, self.theta, phi_deg)
    }

    /// Reflection through the mirror (xz) plane: φ → −φ.
    pub fn mirrored(&self) -> Self {
        Self::new(self.b_mag, self.theta, -self.phi).expect("valid orientation stays valid")
    }

    pub fn unit_vector(&self) -> Vector3<f64> {
        let (st, ct) = self.theta.to_radians().sin_cos();
        let (sp, cp) = self.phi.to_radians().sin_cos();
        Vector3::new(st * cp, st * sp, ct)
    }

    /// B(sinθcosφ, sinθsinφ, cosθ) in mT.
    pub fn vector(&self) -> Vector3<f64> {
        self.unit_vector() * self.b_mag
    }
}

/// Returns (Jx, Jy, Jz) for spin 1/2 or spin 1 in the |m = j, …, −j⟩ basis.
pub fn spin_matrices(j: f64) -> Result<[DMatrix<C64>; 3]> {
    let dim = if j == 0.5 {
        2
    } else if j == 1.0 {
        3
    } else {
        return Err(Error::UnsupportedSpin(j));
    };
    let m = |k: usize| j - k as f64;
    let mut jp = DMatrix::<C64>::zeros(dim, dim);
    // <m+1| J+ |m> = sqrt(j(j+1) - m(m+1))
    for k in 1..dim {
        let mk = m(k);
        jp[(k - 1, k)] = Complex::new((j * (j + 1.0) - mk * (mk + 1.0)).sqrt(), 0.0);
    }
    let jm = jp.adjoint();
    let jx = (&jp + &jm) * Complex::new(0.5, 0.0);
    let jy = (&jp - &jm) * Complex::new(0.0, -0.5);
    let jz = DMatrix::from_fn(dim, dim, |r, c| {
        if r == c {
            Complex::new(m(r), 0.0)
        } else {
            ZERO
        }
    });
    Ok([jx, jy, jz])
}

/// Electron (S = 1) and nuclear (I = 1/2) operators embedded in the product space.
pub struct SpinOperators {
    pub s: [Mat6; 3],
    pub i: [Mat6; 3],
    pub sz2: Mat6,
}

fn kron_into_6(a: &DMatrix<C64>, b: &DMatrix<C64>) -> Mat6 {
    let k = a.kronecker(b);
    Mat6::from_fn(|r, c| k[(r, c)])
}

impl SpinOperators {
    pub fn get() -> &'static SpinOperators {
        static OPS: OnceLock<SpinOperators> = OnceLock::new();
        OPS.get_or_init(|| {
            let s = spin_matrices(1.0).expect("spin 1");
            let i = spin_matrices(0.5).expect("spin 1/2");
            let e3 = DMatrix::<C64>::identity(3, 3);
            let e2 = DMatrix::<C64>::identity(2, 2);
            let s6 = [0, 1, 2].map(|k| kron_into_6(&s[k], &e2));
            let i6 = [0, 1, 2].map(|k| kron_into_6(&e3, &i[k]));
            let sz2 = s6[2] * s6[2];
            SpinOperators { s: s6, i: i6, sz2 }
        })
    }

    /// v·S
    pub fn s_dot(&self, v: &Vector3<f64>) -> Mat6 {
        self.s[0] * Complex::from(v.x) + self.s[1] * Complex::from(v.y) + self.s[2] * Complex::from(v.z)
    }

    /// v·I
    pub fn i_dot(&self, v: &Vector3<f64>) -> Mat6 {
        self.i[0] * Complex::from(v.x) + self.i[1] * Complex::from(v.y) + self.i[2] * Complex::from(v.z)
    }

    /// S·A·I for a Cs-symmetric tensor.
    pub fn hyperfine(&self, a: &HyperfineTensor) -> Mat6 {
        self.s[0] * self.i[0] * Complex::from(a.a_xx)
            + self.s[1] * self.i[1] * Complex::from(a.a_yy)
            + self.s[2] * self.i[2] * Complex::from(a.a_zz)
            + (self.s[0] * self.i[2] + self.s[2] * self.i[0]) * Complex::from(a.a_xz)
    }

    /// ∂H/∂A for the four tensor components, in `HyperfineTensor::as_array` order.
    pub fn hyperfine_derivatives(&self) -> [Mat6; 4] {
        [
            self.s[0] * self.i[0],
            self.s[1] * self.i[1],
            self.s[2] * self.i[2],
            self.s[0] * self.i[2] + self.s[2] * self.i[0],
        ]
    }
}

/// The 6×6 Hermitian system Hamiltonian, MHz.
#[derive(Clone, Debug, PartialEq)]
pub struct Hamiltonian6(pub Mat6);

impl Hamiltonian6 {
    pub fn matrix(&self) -> &Mat6 {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace().re
    }

    /// Largest elementwise deviation |H - H†|.
    pub fn hermiticity_error(&self) -> f64 {
        (self.0 - self.0.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// H = D Sz² + γe B·S + γn B·I + S·A·I.
pub fn build_hamiltonian(
    sys: &SpinSystemParams,
    a: &HyperfineTensor,
    field: &FieldOrientation,
) -> Hamiltonian6 {
    let b = field.vector();
    hamiltonian_with_zeeman(sys.d_zfs, &(b * sys.gamma_e), &(b * sys.gamma_n), a)
}

/// Same Hamiltonian with the Zeeman vectors already in MHz (γB).
pub fn hamiltonian_with_zeeman(
    d_zfs: f64,
    electron_zeeman: &Vector3<f64>,
    nuclear_zeeman: &Vector3<f64>,
    a: &HyperfineTensor,
) -> Hamiltonian6 {
    let ops = SpinOperators::get();
    let h = ops.sz2 * Complex::from(d_zfs)
        + ops.s_dot(electron_zeeman)
        + ops.i_dot(nuclear_zeeman)
        + ops.hyperfine(a);
    Hamiltonian6(h)
}

/// Electron spin projection label of an eigenstate plus the energy rank
/// (0 or 1) of the state within its mS block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateLabel {
    pub ms: i8,
    pub branch: u8,
}

impl StateLabel {
    pub const fn new(ms: i8, branch: u8) -> Self {
        Self { ms, branch }
    }
}

impl std::fmt::Display for StateLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({:+},{})", self.ms, self.branch)
    }
}

const BLOCK_MS: [i8; 3] = [1, 0, -1];

#[derive(Clone, Debug)]
pub struct EnergyLevels {
    /// Ascending eigenvalues, MHz.
    pub eigenvalues: [f64; 6],
    /// Column k is the eigenvector of `eigenvalues[k]`.
    pub eigenvectors: Mat6,
    pub labels: [StateLabel; 6],
    /// Squared overlap of each state with its assigned mS block.
    pub overlaps: [f64; 6],
    /// Set when some state falls below [`LABEL_THRESHOLD`] or the blocks are not
    /// populated two-by-two.
    pub ambiguous: bool,
}

impl EnergyLevels {
    pub fn index_of(&self, label: StateLabel) -> Option<usize> {
        self.labels.iter().position(|l| *l == label)
    }

    pub fn energy(&self, label: StateLabel) -> Option<f64> {
        self.index_of(label).map(|k| self.eigenvalues[k])
    }

    pub fn require_labels(&self) -> Result<()> {
        if self.ambiguous {
            Err(Error::AmbiguousLabels {
                min_overlap: self.overlaps.iter().copied().fold(f64::INFINITY, f64::min),
            })
        } else {
            Ok(())
        }
    }

    /// Expectation value ⟨k|op|k⟩ (real part), used for Hellmann–Feynman derivatives.
    pub fn expectation(&self, k: usize, op: &Mat6) -> f64 {
        let v = self.eigenvectors.column(k);
        (v.adjoint() * op * v)[(0, 0)].re
    }

    /// ⟨f|op|i⟩.
    pub fn matrix_element(&self, f: usize, op: &Mat6, i: usize) -> C64 {
        let vf = self.eigenvectors.column(f);
        let vi = self.eigenvectors.column(i);
        (vf.adjoint() * op * vi)[(0, 0)]
    }
}

/// Diagonalizes `h`, sorts eigenvalues ascending (stable for ties) and labels the states.
pub fn eigensystem(h: &Hamiltonian6) -> Result<EnergyLevels> {
    let eig = SymmetricEigen::try_new(h.0, 1e-15, 10_000).ok_or(Error::Diagonalization)?;
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values: [f64; 6] = std::array::from_fn(|k| eig.eigenvalues[order[k]]);
    let vectors = Mat6::from_fn(|r, c| eig.eigenvectors[(r, order[c])]);
    Ok(label_states(values, vectors))
}

/// Assigns each eigenvector the mS block it overlaps most; the two states in
/// a block get branch 0/1 by ascending energy.
pub fn label_states(eigenvalues: [f64; 6], eigenvectors: Mat6) -> EnergyLevels {
    let mut labels = [StateLabel::new(0, 0); 6];
    let mut overlaps = [0.0; 6];
    let mut counts = [0u8; 3];
    let mut ambiguous = false;
    for k in 0..6 {
        let col = eigenvectors.column(k);
        let w: [f64; 3] =
            std::array::from_fn(|b| col[2 * b].norm_sqr() + col[2 * b + 1].norm_sqr());
        let (block, best) = w
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (b, &x)| if x > acc.1 { (b, x) } else { acc });
        overlaps[k] = best;
        if best < LABEL_THRESHOLD {
            ambiguous = true;
        }
        let branch = counts[block];
        counts[block] += 1;
        labels[k] = StateLabel::new(BLOCK_MS[block], branch.min(1));
    }
    if counts.iter().any(|&c| c != 2) {
        ambiguous = true;
    }
    EnergyLevels {
        eigenvalues,
        eigenvectors,
        labels,
        overlaps,
        ambiguous,
    }
}

/// Eigenvalues of the bare electron Hamiltonian `D Sz² + γeB·S` (no nuclear
/// spin), ascending, with the index of the state carrying the mS = 0 label.
pub fn electron_levels(d_zfs: f64, electron_zeeman: &Vector3<f64>) -> Result<([f64; 3], usize, Matrix3<C64>)> {
    let [sx, sy, sz] = spin_matrices(1.0)?;
    let h = &sz * &sz * Complex::from(d_zfs)
        + sx * Complex::from(electron_zeeman.x)
        + sy * Complex::from(electron_zeeman.y)
        + sz * Complex::from(electron_zeeman.z);
    let h3 = Matrix3::<C64>::from_fn(|r, c| h[(r, c)]);
    let eig = SymmetricEigen::try_new(h3, 1e-15, 10_000).ok_or(Error::Diagonalization)?;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.map(|k| eig.eigenvalues[k]);
    let vectors = Matrix3::<C64>::from_fn(|r, c| eig.eigenvectors[(r, order[c])]);
    let zero_state = (0..3)
        .max_by(|&a, &b| vectors[(1, a)].norm_sqr().total_cmp(&vectors[(1, b)].norm_sqr()))
        .unwrap_or(0);
    if vectors[(1, zero_state)].norm_sqr() < LABEL_THRESHOLD {
        return Err(Error::AmbiguousLabels {
            min_overlap: vectors[(1, zero_state)].norm_sqr(),
        });
    }
    Ok((values, zero_state, vectors))
}
