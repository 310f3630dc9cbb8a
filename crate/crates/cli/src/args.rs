use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nvhf::fit::DetSignConstraint;
use nvhf::spin::HyperfineTensor;

#[derive(Debug, Parser)]
#[command(name = "nvhf", version, about = "NV-centre / 13C hyperfine spectra, tensor analysis and fitting")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// JSON run configuration; every field optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub orientations: Option<PathBuf>,
    #[arg(long, global = true)]
    pub lines: Option<PathBuf>,
    #[arg(long, global = true)]
    pub ratios: Option<PathBuf>,
    /// Output directory (default: config `output_dir`, else `nvhf-out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Drop the nuclear Zeeman term.
    #[arg(long, global = true)]
    pub gamma_n_zero: bool,
    /// Determinant-sign constraint for the full fit.
    #[arg(long, global = true, value_parser = parse_det_sign)]
    pub det_sign: Option<DetSignConstraint>,
}

#[derive(Debug, Args, Clone)]
pub struct TensorArg {
    /// A_xx,A_yy,A_zz,A_xz in MHz, or sol1..sol4 for the reference sets.
    #[arg(long, default_value = "sol1", value_parser = parse_tensor, allow_hyphen_values = true)]
    pub tensor: HyperfineTensor,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// ESR and zero-quantum lines at one orientation or at every NV-frame orientation of a file.
    Simulate {
        #[command(flatten)]
        tensor: TensorArg,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        theta: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        phi: f64,
        /// Field magnitude in mT (default from config).
        #[arg(long)]
        b_mt: Option<f64>,
    },
    /// Exact and perturbative zero-quantum splitting over a phi sweep.
    Zq {
        #[command(flatten)]
        tensor: TensorArg,
        #[arg(long, default_value_t = 84.5)]
        theta: f64,
        #[arg(long, default_value_t = 10.0)]
        phi_step: f64,
        #[arg(long)]
        b_mt: Option<f64>,
    },
    /// In-plane amplitudes I1..I4 of the four low ESR lines and their ratio.
    Amplitudes {
        #[command(flatten)]
        tensor: TensorArg,
        #[arg(long, default_value_t = 90.0)]
        theta: f64,
        #[arg(long, default_value_t = 5.0)]
        phi_step: f64,
        #[arg(long)]
        b_mt: Option<f64>,
    },
    /// NV axis, D and gamma_e*B from lab-frame ESR lines.
    FitOrientation {
        /// Include an axial first-shell hyperfine coupling.
        #[arg(long)]
        with_hyperfine: bool,
    },
    /// kappa1 cos^2 + kappa2 sin^2 fit of the zero-quantum lines.
    FitZq,
    /// Lorentzian fit of each amplitude-ratio curve.
    FitAmplitudes,
    /// Combined hyperfine fit with multi-start and constraint filtering.
    FitFull {
        /// Starting tensor.
        #[arg(long, default_value = "150,120,120,20", value_parser = parse_tensor, allow_hyphen_values = true)]
        initial: HyperfineTensor,
    },
    /// Principal-axis decomposition.
    Pas {
        #[command(flatten)]
        tensor: TensorArg,
    },
    /// The four spectrally equivalent tensors.
    Equiv {
        #[command(flatten)]
        tensor: TensorArg,
    },
    /// Determinant sign from a simulated profile, or from measured ratios when --ratios is given.
    ClassifyDet {
        #[command(flatten)]
        tensor: TensorArg,
        #[arg(long, default_value_t = 5.0)]
        phi_step: f64,
    },
    /// Synthetic dataset in the CSV schemas.
    GenSynthetic {
        #[command(flatten)]
        tensor: TensorArg,
        /// Number of NV-frame orientations (ignored with --orientations).
        #[arg(long, default_value_t = 12)]
        count: usize,
        #[arg(long, default_value_t = 0.6)]
        esr_width: f64,
        #[arg(long, default_value_t = 0.06)]
        zq_width: f64,
        /// Exact frequencies, no noise.
        #[arg(long)]
        noiseless: bool,
        /// Lab-frame ESR-only dataset for an NV axis at POLAR,AZIMUTH degrees.
        #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
        lab_axis: Option<(f64, f64)>,
        /// Electron-only lines for the lab-frame dataset.
        #[arg(long)]
        no_hyperfine: bool,
    },
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| format!("'{v}' is not a number")))
        .collect()
}

pub fn parse_tensor(s: &str) -> Result<HyperfineTensor, String> {
    let named = match s {
        "sol1" => Some([189.3, 128.4, 128.9, 24.1]),
        "sol2" => Some([-189.3, 128.4, -128.9, -24.1]),
        "sol3" => Some([-163.0, -128.4, 85.7, -99.3]),
        "sol4" => Some([163.0, -128.4, -85.7, 99.3]),
        _ => None,
    };
    let v = match named {
        Some(v) => v.to_vec(),
        None => parse_f64_list(s)?,
    };
    if v.len() != 4 || v.iter().any(|x| !x.is_finite()) {
        return Err("expected four finite values A_xx,A_yy,A_zz,A_xz".into());
    }
    Ok(HyperfineTensor::from_slice(&v))
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    match parse_f64_list(s)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err("expected two values".into()),
    }
}

fn parse_det_sign(s: &str) -> Result<DetSignConstraint, String> {
    match s {
        "pos" | "neg" | "any" => s.parse(),
        _ => Err(format!("'{s}' is not one of pos, neg, any")),
    }
}
