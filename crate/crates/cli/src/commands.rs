use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nvhf::fit::{
    fit_hyperfine_full, fit_lorentzian, fit_orientation, fit_zq_linear, synth_lab_dataset, DetSignConstraint,
    Frame, LabFrame, MeasuredDataset, OrientationModelKind, OrientationOptions, RatioPoint, ZqPoint,
};
use nvhf::io::{load_dataset, write_dataset, RunConfig};
use nvhf::spectra::{
    amplitude_ratio_profile, simulate, synth_dataset, zq_frequency_exact, zq_frequency_perturbative, AmplitudeProfile,
    LineKind, LineWidths,
};
use nvhf::spin::{build_hamiltonian, eigensystem, FieldOrientation, HyperfineTensor};
use nvhf::tensor::{
    classify_det_sign, det_sign, equivalent_solutions, pas_decompose, DetClassifierConfig,
};
use nvhf::Error;
use serde_json::json;

use crate::args::{Cli, Command, Global};
use crate::output::Output;

pub enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type Run<T> = std::result::Result<T, Failure>;

fn effective_config(g: &Global) -> Run<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.fit.seed = s;
    }
    if g.gamma_n_zero {
        cfg.gamma_n_zero = true;
    }
    if let Some(d) = g.det_sign {
        cfg.constraints.det_sign = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(g: &Global, cfg: &RunConfig) -> PathBuf {
    g.out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("nvhf-out"))
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Run<&'a Path> {
    p.as_deref().ok_or_else(|| Failure::Usage(format!("this subcommand needs --{flag}")))
}

fn phi_grid(step: f64) -> Run<Vec<f64>> {
    if !(step > 0.0 && step <= 180.0) {
        return Err(Failure::Usage("--phi-step must be in (0, 180]".into()));
    }
    let n = (360.0 / step).round() as usize;
    Ok((0..n).map(|k| k as f64 * step).filter(|p| *p < 360.0 - 1e-9).collect())
}

fn tensor_line(a: &HyperfineTensor) -> String {
    format!("A_xx = {:.4}, A_yy = {:.4}, A_zz = {:.4}, A_xz = {:.4} MHz", a.a_xx, a.a_yy, a.a_zz, a.a_xz)
}

pub fn run(cli: &Cli) -> Run<Output> {
    let g = &cli.global;
    let cfg = effective_config(g)?;
    let dir = out_dir(g, &cfg);
    match &cli.command {
        Command::Simulate { tensor, theta, phi, b_mt } => {
            let mut out = Output::new(dir, "simulate", cfg.clone())?;
            let sys = cfg.sys();
            let mw = cfg.mw()?;
            let b = b_mt.unwrap_or(cfg.b_mt);
            let fields: Vec<(String, FieldOrientation)> = match &g.orientations {
                Some(p) => {
                    out.input("orientations", p);
                    let ds = load_dataset(p, None, None)?;
                    ds.orientations
                        .iter()
                        .map(|o| Ok((o.id.clone(), o.nv_field()?)))
                        .collect::<nvhf::Result<_>>()?
                }
                None => vec![("cli".into(), FieldOrientation::new(b, *theta, *phi)?)],
            };
            let mut body = format!("tensor: {}\n", tensor_line(&tensor.tensor));
            let mut rows = Vec::new();
            let mut records = Vec::new();
            for (k, (id, f)) in fields.iter().enumerate() {
                let lines = simulate(&sys, &tensor.tensor, f, &mw)?;
                let _ = writeln!(
                    body,
                    "\norientation {id}: B = {} mT, theta = {} deg, phi = {} deg",
                    f.b_mag(),
                    f.theta_deg(),
                    f.phi_deg()
                );
                for l in &lines {
                    let _ = writeln!(body, "  {:<3} {:>14.6} MHz  amplitude {:.6}  {} -> {}", l.kind, l.freq, l.amplitude, l.from, l.to);
                    rows.push(vec![k as f64, if l.kind == LineKind::Esr { 0.0 } else { 1.0 }, l.freq, l.amplitude]);
                }
                records.push(json!({"orient_id": id, "field": f, "lines": lines}));
            }
            out.table("spectrum.csv", &["orientation_index", "is_zq", "freq_MHz", "amplitude"], &rows)?;
            Ok(out.finish(&body, &records)?)
        }

        Command::Zq { tensor, theta, phi_step, b_mt } => {
            let mut out = Output::new(dir, "zq", cfg.clone())?;
            let sys = cfg.sys();
            let b = b_mt.unwrap_or(cfg.b_mt);
            let mut rows = Vec::new();
            for phi in phi_grid(*phi_step)? {
                let f = FieldOrientation::new(b, *theta, phi)?;
                let exact = zq_frequency_exact(&eigensystem(&build_hamiltonian(&sys, &tensor.tensor, &f))?)?;
                rows.push(vec![phi, exact, zq_frequency_perturbative(&sys, &tensor.tensor, &f)]);
            }
            let points = |col: usize| -> Vec<ZqPoint> {
                rows.iter().map(|r| ZqPoint { phi_deg: r[0], value: r[col], sigma: 1.0 }).collect()
            };
            let fe = fit_zq_linear(&points(1))?;
            let fp = fit_zq_linear(&points(2))?;
            let body = format!(
                "tensor: {}\ntheta = {theta} deg, B = {b} mT (gamma_e B = {:.4} MHz)\n\
                 exact:         kappa1 = {:.4} MHz, kappa2 = {:.4} MHz\n\
                 perturbative:  kappa1 = {:.4} MHz, kappa2 = {:.4} MHz\n\
                 table: zq.csv (phi_deg, exact_MHz, perturbative_MHz)\n",
                tensor_line(&tensor.tensor),
                sys.gamma_e * b,
                fe.kappa1,
                fe.kappa2,
                fp.kappa1,
                fp.kappa2
            );
            out.table("zq.csv", &["phi_deg", "exact_MHz", "perturbative_MHz"], &rows)?;
            Ok(out.finish(&body, &json!({"exact_fit": fe, "perturbative_fit": fp, "rows": rows}))?)
        }

        Command::Amplitudes { tensor, theta, phi_step, b_mt } => {
            let mut out = Output::new(dir, "amplitudes", cfg.clone())?;
            let grid: Vec<f64> = phi_grid(*phi_step)?.into_iter().map(|p| p - 180.0).collect();
            let profile = amplitude_ratio_profile(&cfg.sys(), &tensor.tensor, b_mt.unwrap_or(cfg.b_mt), *theta, &cfg.mw()?, &grid)?;
            let rows: Vec<Vec<f64>> = profile
                .phi_deg
                .iter()
                .zip(profile.intensities.as_ref().expect("simulated profile"))
                .zip(&profile.ratio)
                .map(|((p, i), r)| vec![*p, i[0], i[1], i[2], i[3], *r])
                .collect();
            out.table("amplitudes.csv", &["phi_deg", "I1", "I2", "I3", "I4", "ratio"], &rows)?;
            let cls = classify_det_sign(&profile, &DetClassifierConfig::default())?;
            let mut body = format!(
                "tensor: {}\ntheta = {theta} deg, drive direction {:?}\nclassification: {} (depth {:.3}, mean outer share {:.3})\n",
                tensor_line(&tensor.tensor),
                cfg.mw_direction,
                cls.verdict,
                cls.depth,
                cls.mean_share
            );
            if !profile.ordering_flags.is_empty() {
                let _ = writeln!(body, "line-ordering ambiguous at {} phi values", profile.ordering_flags.len());
            }
            body.push_str("table: amplitudes.csv (phi_deg, I1..I4, (I1+I4)/(I2+I3))\n");
            Ok(out.finish(&body, &json!({"profile": profile, "classification": cls}))?)
        }

        Command::FitOrientation { with_hyperfine } => {
            let mut out = Output::new(dir, "fit-orientation", cfg.clone())?;
            let ds = load_inputs(g, &mut out, true, false)?;
            let opts = OrientationOptions {
                kind: if *with_hyperfine {
                    OrientationModelKind::WithHyperfine
                } else {
                    OrientationModelKind::ElectronOnly
                },
                sys: cfg.sys(),
                lm: cfg.lm(),
                ..OrientationOptions::default()
            };
            let fit = fit_orientation(&ds, &opts)?;
            let m = &fit.model;
            let mut body = format!(
                "NV axis (lab): polar = {:.5} deg, azimuth = {:.5} deg\nD = {:.5} MHz\ngamma_e B = {:.5} MHz at B = {} mT\n",
                m.axis_polar_deg, m.axis_azimuth_deg, m.d_zfs, m.gamma_e_b, m.b_ref_mt
            );
            if let Some(h) = m.hyperfine {
                let _ = writeln!(body, "A_par = {:.4} MHz, A_perp = {:.4} MHz", h.a_par, h.a_perp);
            }
            body.push_str(&fit_summary(&fit.fit));
            Ok(out.finish(&body, &fit)?)
        }

        Command::FitZq => {
            let mut out = Output::new(dir, "fit-zq", cfg.clone())?;
            let ds = load_inputs(g, &mut out, true, false)?;
            let mut points = Vec::new();
            let mut thetas = Vec::new();
            for l in ds.lines.iter().filter(|l| l.kind == LineKind::Zq) {
                let o = ds.orientation(&l.orient_id).expect("validated");
                if o.frame != Frame::Nv {
                    return Err(Error::InvalidParameter(format!("orientation '{}' must be NV-frame for fit-zq", o.id)).into());
                }
                points.push(ZqPoint { phi_deg: o.angle2_deg, value: l.freq_mhz, sigma: l.sigma_mhz });
                thetas.push((o.angle1_deg, o.b_mt));
            }
            let fit = fit_zq_linear(&points)?;
            let mut body = format!(
                "{} zero-quantum points\nkappa1 = {:.5} +- {:.5} MHz\nkappa2 = {:.5} +- {:.5} MHz\nkappa1/kappa2 = {:.5}\nchi2 = {:.4} (dof {})\n",
                points.len(),
                fit.kappa1,
                fit.sigma1,
                fit.kappa2,
                fit.sigma2,
                fit.ratio(),
                fit.chi2,
                fit.dof
            );
            let (t0, b0) = thetas[0];
            let mut mags = None;
            if thetas.iter().all(|(t, b)| (t - t0).abs() < 1e-9 && (b - b0).abs() < 1e-12) {
                let s = cfg.sys();
                let (kx, ky) = fit.tensor_magnitudes(s.d_zfs, s.gamma_e * b0, t0)?;
                let _ = writeln!(body, "sqrt(A_xx^2 + A_xz^2) = {kx:.3} MHz, |A_yy| = {ky:.3} MHz (theta = {t0} deg)");
                mags = Some((kx, ky));
            }
            Ok(out.finish(&body, &json!({"fit": fit, "tensor_magnitudes": mags}))?)
        }

        Command::FitAmplitudes => {
            let mut out = Output::new(dir, "fit-amplitudes", cfg.clone())?;
            let ds = load_inputs(g, &mut out, false, true)?;
            let mut groups: BTreeMap<&str, Vec<RatioPoint>> = BTreeMap::new();
            for r in &ds.ratios {
                groups.entry(&r.orient_id).or_default().push(RatioPoint { phi_deg: r.phi_deg, ratio: r.ratio, sigma: r.sigma });
            }
            let mut body = String::new();
            let mut results = Vec::new();
            for (id, pts) in &groups {
                let fit = fit_lorentzian(pts, &cfg.lm())?;
                let _ = writeln!(
                    body,
                    "{id}: a = {:.4}, b = {:.4} deg, phi1 = {:.4} deg ({} points, rms {:.3})",
                    fit.a, fit.b, fit.phi1_deg, pts.len(), fit.fit.residual_rms
                );
                let profile = AmplitudeProfile::from_ratios(
                    pts.iter().map(|p| p.phi_deg).collect(),
                    pts.iter().map(|p| p.ratio).collect(),
                )?;
                let cls = classify_det_sign(&profile, &DetClassifierConfig::default()).ok();
                if let Some(c) = &cls {
                    let _ = writeln!(body, "  classification: {}", c.verdict);
                }
                results.push(json!({"orient_id": id, "fit": fit, "classification": cls}));
            }
            Ok(out.finish(&body, &results)?)
        }

        Command::FitFull { initial } => {
            let mut out = Output::new(dir, "fit-full", cfg.clone())?;
            let ds = load_inputs(g, &mut out, true, false)?;
            let mut constraints = cfg.fit_constraints();
            let mut body = String::new();
            if constraints.det_sign == DetSignConstraint::Any && !ds.ratios.is_empty() {
                let profile = AmplitudeProfile::from_ratios(
                    ds.ratios.iter().map(|r| r.phi_deg).collect(),
                    ds.ratios.iter().map(|r| r.ratio).collect(),
                )?;
                if let Ok(c) = classify_det_sign(&profile, &DetClassifierConfig::default()) {
                    constraints.det_sign = DetSignConstraint::from_verdict(c.verdict);
                    let _ = writeln!(body, "det sign from amplitude ratios: {}", c.verdict);
                }
            }
            let report = fit_hyperfine_full(&ds, &constraints, initial, &cfg.full_fit_options())?;
            let _ = writeln!(
                body,
                "constraints: det sign {}, Rabi bound {}\nlines used: {} orientations, {} ESR, {} ZQ\ndistinct optima: {}\n",
                constraints.det_sign,
                constraints.rabi_bound.map_or("off".to_string(), |b| b.to_string()),
                report.lines_used.orientations,
                report.lines_used.esr,
                report.lines_used.zq,
                report.optima
            );
            for (k, c) in report.candidates.iter().enumerate() {
                let _ = writeln!(body, "candidate {}: {} [{}]", k + 1, tensor_line(&c.tensor), c.origin);
                let _ = writeln!(body, "  chi2 = {:.5}, det = {:.4e} MHz^3", c.fit.chi2, c.det.value);
                if let Some(se) = c.fit.std_errors() {
                    for ((n, v), e) in c.fit.names.iter().zip(c.fit.params.iter()).zip(se) {
                        let _ = writeln!(body, "  {n:<12} {v:>14.6} +- {e:.6}");
                    }
                }
            }
            for r in &report.rejected {
                let _ = writeln!(body, "rejected: {} ({})", tensor_line(&r.candidate.tensor), r.reason);
            }
            for d in report.diagnostics.iter().chain(&report.start_failures) {
                let _ = writeln!(body, "note: {d}");
            }
            Ok(out.finish(&body, &report)?)
        }

        Command::Pas { tensor } => {
            let out = Output::new(dir, "pas", cfg.clone())?;
            let p = pas_decompose(&tensor.tensor);
            let d = det_sign(&tensor.tensor);
            let mut body = format!(
                "tensor: {}\nprincipal values (increasing magnitude): {:.2}, {:.2}, {:.2} MHz\n\
                 zeta = {:.2} deg\nequivalent angles: {:.2}, {:.2}, {:.2}, {:.2} deg\ndet(A) = {:.4e} MHz^3\n",
                tensor_line(&tensor.tensor),
                p.principal[0],
                p.principal[1],
                p.principal[2],
                p.zeta_deg,
                p.equivalent_angles[0],
                p.equivalent_angles[1],
                p.equivalent_angles[2],
                p.equivalent_angles[3],
                d.value
            );
            if let Some(z) = p.preferred_zeta_deg {
                let _ = writeln!(body, "geometry-preferred zeta = {z:.2} deg");
            }
            Ok(out.finish(&body, &json!({"pas": p, "det": d}))?)
        }

        Command::Equiv { tensor } => {
            let out = Output::new(dir, "equiv", cfg.clone())?;
            let set = equivalent_solutions(&tensor.tensor)?;
            let mut body = String::new();
            for (k, s) in set.solutions.iter().enumerate() {
                let _ = writeln!(body, "solution {}: {}  det sign {:+}", k + 1, tensor_line(s), det_sign(s).sign);
            }
            let _ = writeln!(
                body,
                "A_xz sign free: {}\nmax eigenvalue deviation (gamma_n = 0): {:.2e} MHz",
                set.xz_sign_free, set.max_deviation_mhz
            );
            Ok(out.finish(&body, &set)?)
        }

        Command::ClassifyDet { tensor, phi_step } => {
            let mut out = Output::new(dir, "classify-det", cfg.clone())?;
            let profile = match &g.ratios {
                Some(_) => {
                    let ds = load_inputs(g, &mut out, false, true)?;
                    AmplitudeProfile::from_ratios(
                        ds.ratios.iter().map(|r| r.phi_deg).collect(),
                        ds.ratios.iter().map(|r| r.ratio).collect(),
                    )?
                }
                None => {
                    let grid: Vec<f64> = phi_grid(*phi_step)?.into_iter().map(|p| p - 180.0).collect();
                    amplitude_ratio_profile(&cfg.sys(), &tensor.tensor, cfg.b_mt, 90.0, &cfg.mw()?, &grid)?
                }
            };
            let c = classify_det_sign(&profile, &DetClassifierConfig::default())?;
            let body = format!(
                "verdict: {}\nouter-line share depth = {:.4}, mean = {:.4}, I1/I4 correlation = {}\n",
                c.verdict,
                c.depth,
                c.mean_share,
                c.outer_correlation.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
            Ok(out.finish(&body, &c)?)
        }

        Command::GenSynthetic { tensor, count, esr_width, zq_width, noiseless, lab_axis, no_hyperfine } => {
            let mut out = Output::new(dir, "gen-synthetic", cfg.clone())?;
            let sys = cfg.sys();
            let seed = (!noiseless).then_some(cfg.fit.seed);
            let ds: MeasuredDataset = match lab_axis {
                Some((polar, az)) => {
                    let dirs = default_lab_directions();
                    let a = (!no_hyperfine).then_some(&tensor.tensor);
                    synth_lab_dataset(&sys, a, &LabFrame::new(*polar, *az, 0.0), &dirs, cfg.b_mt, esr_width / 2.0)?
                }
                None => {
                    let fields = match &g.orientations {
                        Some(p) => {
                            out.input("orientations", p);
                            load_dataset(p, None, None)?
                                .orientations
                                .iter()
                                .map(|o| o.nv_field())
                                .collect::<nvhf::Result<Vec<_>>>()?
                        }
                        None => default_orientations(*count, cfg.b_mt)?,
                    };
                    let widths = LineWidths { esr: *esr_width, zq: *zq_width };
                    MeasuredDataset::from_synthetic(&synth_dataset(&sys, &tensor.tensor, &fields, &cfg.mw()?, widths, seed)?)
                }
            };
            let mut header = vec![
                "synthetic dataset generated by nvhf gen-synthetic; not measured data".to_string(),
                format!("tensor A_xx,A_yy,A_zz,A_xz = {},{},{},{} MHz", tensor.tensor.a_xx, tensor.tensor.a_yy, tensor.tensor.a_zz, tensor.tensor.a_xz),
                format!("D = {} MHz, gamma_e = {} MHz/mT, gamma_n = {} MHz/mT", sys.d_zfs, sys.gamma_e, sys.gamma_n),
            ];
            match lab_axis {
                Some((p, a)) => header.push(format!("lab frame, NV axis polar = {p} deg, azimuth = {a} deg, noiseless")),
                None => header.push(format!(
                    "ESR width {esr_width} MHz, ZQ width {zq_width} MHz, sigma = width/2, seed {}",
                    seed.map_or("none (noiseless)".to_string(), |s| s.to_string())
                )),
            }
            for p in write_dataset(out.dir(), &ds, &header)? {
                out.record(p);
            }
            let body = format!(
                "{}\n{} orientations, {} ESR lines, {} ZQ lines\n",
                header.join("\n"),
                ds.orientations.len(),
                ds.count(LineKind::Esr),
                ds.count(LineKind::Zq)
            );
            Ok(out.finish(&body, &ds)?)
        }
    }
}

/// NV-frame orientations θ = 20 + 6k, φ = 17 + 97k spreading over the sphere.
pub fn default_orientations(n: usize, b_mt: f64) -> nvhf::Result<Vec<FieldOrientation>> {
    if n == 0 {
        return Err(Error::InsufficientData("--count must be >= 1".into()));
    }
    (0..n)
        .map(|k| FieldOrientation::new(b_mt, 20.0 + (6 * k % 150) as f64, (17.0 + 97.0 * k as f64) % 360.0))
        .collect()
}

/// Nine non-coplanar lab directions (polar, azimuth).
fn default_lab_directions() -> Vec<(f64, f64)> {
    (0..9).map(|k| (15.0 + 18.0 * k as f64, (40.0 * k as f64) % 360.0)).collect()
}

fn load_inputs(g: &Global, out: &mut Output, lines: bool, ratios: bool) -> Run<MeasuredDataset> {
    let o = require(&g.orientations, "orientations")?;
    out.input("orientations", o);
    let l = if lines {
        let p = require(&g.lines, "lines")?;
        out.input("lines", p);
        Some(p)
    } else {
        g.lines.as_deref()
    };
    let r = if ratios {
        Some(require(&g.ratios, "ratios")?)
    } else {
        g.ratios.as_deref()
    };
    if let Some(p) = r {
        out.input("ratios", p);
    }
    Ok(load_dataset(o, l, r)?)
}

fn fit_summary(f: &nvhf::fit::FitResult) -> String {
    let mut s = format!(
        "converged: {} ({:?}, {} iterations), chi2 = {:.6}, dof = {}, rms = {:.4}\n",
        f.converged, f.termination, f.iterations, f.chi2, f.dof, f.residual_rms
    );
    if let Some(se) = f.std_errors() {
        for ((n, v), e) in f.names.iter().zip(f.params.iter()).zip(se) {
            let _ = writeln!(s, "  {n:<12} {v:>14.6} +- {e:.6}");
        }
    }
    s
}
