use nalgebra::{DVector, Vector3};
use nvhf::fit::orientation::{check_non_coplanar, AxialHyperfine};
use nvhf::fit::*;
use nvhf::spectra::{synth_dataset, LineKind, LineWidths, MicrowaveField};
use nvhf::spin::{electron_levels, FieldOrientation, HyperfineTensor, SpinSystemParams};
use nvhf::tensor::equivalent_solutions;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const SOL1: HyperfineTensor = HyperfineTensor::new(189.3, 128.4, 128.9, 24.1);

fn b_nominal(sys: &SpinSystemParams) -> f64 {
    63.3 / sys.gamma_e
}

/// Twelve NV-frame orientations spread over θ and φ.
fn orientations12(b: f64) -> Vec<FieldOrientation> {
    (0..12)
        .map(|k| FieldOrientation::new(b, 20.0 + 6.0 * k as f64, 17.0 + 97.0 * k as f64).unwrap())
        .collect()
}

/// Twelve orientations in the NV xy plane. There the ±A_xz tensors give
/// identical spectra (rotation by π about z combined with B → −B), so both
/// branches are exact optima.
fn in_plane_orientations(b: f64) -> Vec<FieldOrientation> {
    (0..12).map(|k| FieldOrientation::new(b, 90.0, 7.0 + 15.0 * k as f64).unwrap()).collect()
}

fn dataset(sys: &SpinSystemParams, a: &HyperfineTensor, fields: &[FieldOrientation], seed: Option<u64>) -> MeasuredDataset {
    let mw = MicrowaveField::new(Vector3::x(), sys).unwrap();
    MeasuredDataset::from_synthetic(&synth_dataset(sys, a, fields, &mw, LineWidths::default(), seed).unwrap())
}

fn single_start(opts: FullFitOptions) -> FullFitOptions {
    FullFitOptions { n_starts: 1, ..opts }
}

#[test]
fn full_fit_noiseless_round_trip() {
    let sys = SpinSystemParams::default();
    let ds = dataset(&sys, &SOL1, &orientations12(b_nominal(&sys)), None);
    let start = HyperfineTensor::new(180.0, 120.0, 135.0, 20.0);
    let opts = single_start(FullFitOptions {
        gamma_e_b: Some(63.0),
        ..FullFitOptions::default()
    });
    let rep = fit_hyperfine_full(&ds, &FitConstraints::default(), &start, &opts).unwrap();
    let best = &rep.candidates[0];
    assert!(best.fit.converged);
    // residuals are weighted by 1/σ, so RMS in MHz is below RMS·σ_max
    assert!(best.fit.residual_rms * 0.3 < 1e-6, "{}", best.fit.residual_rms);
    assert!(best.tensor.max_abs_diff(&SOL1) < 1e-4, "{:?}", best.tensor);
    assert!((best.fit.param("D").unwrap() - sys.d_zfs).abs() < 1e-6 * sys.d_zfs);
    assert!((best.fit.param("gamma_e_B").unwrap() - 63.3).abs() < 1e-6 * 63.3);
    assert_eq!(rep.lines_used.esr, 96);
    assert_eq!(rep.lines_used.zq, 12);
}

#[test]
fn full_fit_noisy_within_three_sigma_and_det_constraint() {
    let sys = SpinSystemParams::default();
    let ds = dataset(&sys, &SOL1, &orientations12(b_nominal(&sys)), Some(11));
    let opts = FullFitOptions {
        n_starts: 8,
        seed: 3,
        ..FullFitOptions::default()
    };
    let pos = FitConstraints {
        det_sign: DetSignConstraint::Positive,
        rabi_bound: Some(RABI_XZ_BOUND),
    };
    let rep = fit_hyperfine_full(&ds, &pos, &SOL1, &opts).unwrap();
    let hit = rep.candidates.iter().any(|c| {
        let se = c.fit.std_errors().unwrap();
        let t = c.tensor;
        (t.a_xx - 189.3).abs() < 3.0 * se[0]
            && (t.a_yy - 128.4).abs() < 3.0 * se[1]
            && (t.a_zz - 128.9).abs() < 3.0 * se[2]
            && (t.a_xz.abs() - 24.1).abs() < 3.0 * se[3]
    });
    assert!(hit, "{:#?}", rep.candidates.iter().map(|c| (c.tensor, c.fit.std_errors())).collect::<Vec<_>>());
    assert!(rep.candidates.iter().all(|c| c.det.sign > 0));

    let neg = FitConstraints {
        det_sign: DetSignConstraint::Negative,
        rabi_bound: Some(RABI_XZ_BOUND),
    };
    let rep_neg = fit_hyperfine_full(&ds, &neg, &SOL1, &opts).unwrap();
    assert!(rep_neg.candidates.iter().all(|c| c.det.sign < 0));
    for c in &rep_neg.candidates {
        assert!(c.tensor.max_abs_diff(&SOL1) > 1.0);
    }
    if rep_neg.candidates.is_empty() {
        assert!(!rep_neg.diagnostics.is_empty());
    }
}

#[test]
fn multi_start_finds_both_xz_branches() {
    let sys = SpinSystemParams::default();
    let ds = dataset(&sys, &SOL1, &in_plane_orientations(b_nominal(&sys)), None);
    let opts = FullFitOptions {
        refine_d: false,
        refine_gamma_b: false,
        ..FullFitOptions::default()
    };
    let model = hyperfine::full_model(&ds, &SOL1, &opts).unwrap();
    let op = |t: &HyperfineTensor| {
        let fit = lm_minimize(&model, &t.as_array(), &opts.lm)?;
        Ok((HyperfineTensor::from_slice(&fit.params), fit))
    };
    let start = HyperfineTensor::new(170.0, 120.0, 140.0, 20.0);
    let ms = multi_start(op, &start, 16, 5).unwrap();
    let plus = ms.optima.iter().any(|(t, _)| t.max_abs_diff(&SOL1) < 1e-3);
    let minus = ms
        .optima
        .iter()
        .any(|(t, _)| t.max_abs_diff(&HyperfineTensor::new(189.3, 128.4, 128.9, -24.1)) < 1e-3);
    assert!(plus && minus, "{:?} {:?}", ms.optima.iter().map(|o| (o.0, o.1.chi2)).collect::<Vec<_>>(), ms.failures);

    let again = multi_start(op, &start, 16, 5).unwrap();
    assert_eq!(ms, again);

    let one = multi_start(op, &start, 1, 99).unwrap();
    let direct = op(&start).unwrap();
    assert_eq!(one.optima.len(), 1);
    assert_eq!(one.optima[0], direct);
}

#[test]
fn candidates_include_equivalent_set() {
    // Exact with γn = 0; the nuclear Zeeman term moves the polished
    // equivalents by up to about 2 MHz.
    for (sys, tol) in [
        (SpinSystemParams::default().without_nuclear_zeeman(), 1e-4),
        (SpinSystemParams::default(), 3.0),
    ] {
        let ds = dataset(&sys, &SOL1, &orientations12(b_nominal(&sys)), None);
        let opts = single_start(FullFitOptions {
            sys,
            ..FullFitOptions::default()
        });
        let rep = fit_hyperfine_full(&ds, &FitConstraints::default(), &SOL1, &opts).unwrap();
        let set = equivalent_solutions(&SOL1).unwrap();
        for s in &set.solutions {
            assert!(
                rep.candidates.iter().any(|c| c.tensor.max_abs_diff(s) < tol),
                "{s:?} missing from {:?}",
                rep.candidates.iter().map(|c| c.tensor).collect::<Vec<_>>()
            );
        }
    }
}

#[test]
fn constraints_never_enlarge_candidate_set() {
    let sys = SpinSystemParams::default();
    let ds = dataset(&sys, &SOL1, &orientations12(b_nominal(&sys)), Some(4));
    let opts = FullFitOptions {
        n_starts: 4,
        seed: 1,
        ..FullFitOptions::default()
    };
    let run = |c: FitConstraints| {
        fit_hyperfine_full(&ds, &c, &SOL1, &opts)
            .unwrap()
            .candidates
            .into_iter()
            .map(|c| c.tensor)
            .collect::<Vec<_>>()
    };
    let free = run(FitConstraints::default());
    let levels = [
        FitConstraints {
            det_sign: DetSignConstraint::Positive,
            rabi_bound: None,
        },
        FitConstraints {
            det_sign: DetSignConstraint::Any,
            rabi_bound: Some(RABI_XZ_BOUND),
        },
        FitConstraints {
            det_sign: DetSignConstraint::Positive,
            rabi_bound: Some(RABI_XZ_BOUND),
        },
        FitConstraints {
            det_sign: DetSignConstraint::Negative,
            rabi_bound: Some(RABI_XZ_BOUND),
        },
    ];
    for c in levels {
        let sub = run(c);
        assert!(sub.len() <= free.len());
        assert!(sub.iter().all(|t| free.contains(t)), "{c:?}");
    }
}

#[test]
fn subset_of_lines_is_accepted() {
    let sys = SpinSystemParams::default();
    let mut ds = dataset(&sys, &SOL1, &orientations12(b_nominal(&sys)), None);
    // keep the four lowest ESR lines of each orientation plus the ZQ line
    let mut kept = Vec::new();
    for o in &ds.orientations {
        let mut esr: Vec<_> = ds.lines.iter().filter(|l| l.orient_id == o.id && l.kind == LineKind::Esr).cloned().collect();
        esr.sort_by(|a, b| a.freq_mhz.total_cmp(&b.freq_mhz));
        kept.extend(esr.into_iter().take(4));
        kept.extend(ds.lines.iter().filter(|l| l.orient_id == o.id && l.kind == LineKind::Zq).cloned());
    }
    ds.lines = kept;
    let opts = single_start(FullFitOptions::default());
    let rep = fit_hyperfine_full(&ds, &FitConstraints::default(), &HyperfineTensor::new(185.0, 125.0, 130.0, 22.0), &opts).unwrap();
    assert_eq!(rep.lines_used.esr, 48);
    assert!(rep.candidates.iter().any(|c| c.tensor.max_abs_diff(&SOL1) < 1e-3));
}

fn nine_lab_directions() -> Vec<(f64, f64)> {
    vec![
        (10.0, 0.0),
        (35.0, 40.0),
        (60.0, 80.0),
        (85.0, 130.0),
        (50.0, 170.0),
        (25.0, 220.0),
        (70.0, 260.0),
        (45.0, 300.0),
        (80.0, 340.0),
    ]
}

#[test]
fn orientation_fit_round_trip_electron_only() {
    let sys = SpinSystemParams::default();
    let frame = LabFrame::new(32.0, 57.0, 0.0);
    let ds = synth_lab_dataset(&sys, None, &frame, &nine_lab_directions(), b_nominal(&sys), 0.3).unwrap();
    let out = fit_orientation(&ds, &OrientationOptions::default()).unwrap();
    assert!((out.model.d_zfs - 2870.2).abs() < 1e-3, "{:?}", out.model);
    assert!((out.model.gamma_e_b - 63.3).abs() < 1e-3);
    assert!(axis_angle_deg(&out.model.axis, &frame.axis()) < 0.01);
    assert!(out.fit.converged);
}

#[test]
fn orientation_fit_with_axial_hyperfine() {
    let sys = SpinSystemParams::default();
    let frame = LabFrame::new(64.0, 301.0, 0.0);
    let axial = HyperfineTensor::new(122.0, 122.0, 197.0, 0.0);
    let ds = synth_lab_dataset(&sys, Some(&axial), &frame, &nine_lab_directions(), b_nominal(&sys), 0.3).unwrap();
    let opts = OrientationOptions {
        kind: OrientationModelKind::WithHyperfine,
        ..OrientationOptions::default()
    };
    let out = fit_orientation(&ds, &opts).unwrap();
    assert!((out.model.d_zfs - 2870.2).abs() < 1e-3, "{:?}", out.model);
    assert!((out.model.gamma_e_b - 63.3).abs() < 1e-3);
    assert!(axis_angle_deg(&out.model.axis, &frame.axis()) < 0.01);
    let h: AxialHyperfine = out.model.hyperfine.unwrap();
    assert!((h.a_par - 197.0).abs() < 1e-3 && (h.a_perp - 122.0).abs() < 1e-3, "{h:?}");
}

#[test]
fn orientation_fit_rejects_coplanar_and_nv_frame() {
    let sys = SpinSystemParams::default();
    let dirs: Vec<(f64, f64)> = (0..9).map(|k| (90.0, 20.0 * k as f64)).collect();
    let ds = synth_lab_dataset(&sys, None, &LabFrame::new(30.0, 10.0, 0.0), &dirs, b_nominal(&sys), 0.3).unwrap();
    assert!(matches!(
        fit_orientation(&ds, &OrientationOptions::default()),
        Err(nvhf::Error::DegenerateGeometry(_))
    ));
    let nv = dataset(&sys, &SOL1, &orientations12(b_nominal(&sys)), None).without(LineKind::Zq);
    assert!(fit_orientation(&nv, &OrientationOptions::default()).is_err());
}

#[test]
fn splitting_is_maximal_along_fitted_axis() {
    let sys = SpinSystemParams::default();
    let frame = LabFrame::new(41.0, 123.0, 0.0);
    let ds = synth_lab_dataset(&sys, None, &frame, &nine_lab_directions(), b_nominal(&sys), 0.3).unwrap();
    let out = fit_orientation(&ds, &OrientationOptions::default()).unwrap();
    let fitted = out.model.frame();
    let splitting = |lab: Vector3<f64>| {
        let nv = fitted.to_nv(&lab.normalize()) * out.model.gamma_e_b;
        let (e, zero, _) = electron_levels(out.model.d_zfs, &nv).unwrap();
        let f: Vec<f64> = (0..3).filter(|&k| k != zero).map(|k| e[k] - e[zero]).collect();
        (f[0] - f[1]).abs()
    };
    let at_axis = splitting(out.model.axis);
    // local scan on a ring of tilted directions
    for tilt in [0.5, 2.0, 5.0] {
        for k in 0..24 {
            let dir = fitted.to_lab(&nvhf_polar(tilt, 15.0 * k as f64));
            assert!(splitting(dir) < at_axis, "tilt {tilt}");
        }
    }
    check_non_coplanar(&nine_lab_directions().iter().map(|&(p, a)| nvhf_polar(p, a)).collect::<Vec<_>>()).unwrap();
}

fn nvhf_polar(p: f64, a: f64) -> Vector3<f64> {
    let (st, ct) = p.to_radians().sin_cos();
    let (sa, ca) = a.to_radians().sin_cos();
    Vector3::new(st * ca, st * sa, ct)
}

#[test]
fn zq_linear_noise_consistency() {
    let phis: Vec<f64> = (0..36).map(|k| 10.0 * k as f64).collect();
    let noise = Normal::new(0.0, 0.03).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut k1 = Vec::new();
    let mut reported = Vec::new();
    for _ in 0..100 {
        let pts: Vec<ZqPoint> = phis
            .iter()
            .map(|&phi| {
                let c = phi.to_radians().cos();
                ZqPoint {
                    phi_deg: phi,
                    value: 8.5 * c * c + 5.88 * (1.0 - c * c) + noise.sample(&mut rng),
                    sigma: 0.03,
                }
            })
            .collect();
        let f = fit_zq_linear(&pts).unwrap();
        k1.push(f.kappa1);
        reported.push(f.sigma1);
    }
    let ratio = spread(&k1) / mean(&reported);
    assert!((0.5..2.0).contains(&ratio), "{ratio}");
}

#[test]
fn lorentzian_noise_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let (mut phi1, mut se) = (Vec::new(), Vec::new());
    for _ in 0..100 {
        let pts: Vec<RatioPoint> = (0..61)
            .map(|k| {
                let phi = -163.3 + 3.0 * k as f64;
                let r = lorentzian(178.5, 16.3, -73.3, phi);
                RatioPoint {
                    phi_deg: phi,
                    ratio: r * (1.0 + 0.02 * unit.sample(&mut rng)),
                    sigma: 0.02 * r,
                }
            })
            .collect();
        let f = fit_lorentzian(&pts, &LmOptions::default()).unwrap();
        phi1.push(f.phi1_deg);
        se.push(f.fit.std_errors().unwrap()[2]);
    }
    let ratio = spread(&phi1) / mean(&se);
    assert!((0.5..2.0).contains(&ratio), "{ratio}");
}

#[test]
fn full_fit_noise_consistency() {
    let sys = SpinSystemParams::default();
    let fields = orientations12(b_nominal(&sys));
    let opts = FullFitOptions::default();
    let model_ds = dataset(&sys, &SOL1, &fields, None);
    let mut axx = Vec::new();
    let mut se = Vec::new();
    for rep in 0..100u64 {
        let ds = dataset(&sys, &SOL1, &fields, Some(1000 + rep));
        let model = hyperfine::full_model(&ds, &SOL1, &opts).unwrap();
        let fit = lm_minimize(&model, &model.initial(), &opts.lm).unwrap();
        assert!(fit.converged);
        axx.push(fit.params[0]);
        se.push(fit.std_errors().unwrap()[0]);
    }
    assert_eq!(model_ds.lines.len(), 108);
    let ratio = spread(&axx) / mean(&se);
    assert!((0.5..2.0).contains(&ratio), "{ratio}");
}

#[test]
fn jacobians_match_finite_differences_on_random_points() {
    let sys = SpinSystemParams::default();
    let ds = dataset(&sys, &SOL1, &orientations12(b_nominal(&sys)), Some(2));
    let opts = FullFitOptions::default();
    let model = hyperfine::full_model(&ds, &SOL1, &opts).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let jitter = Normal::new(0.0, 5.0).unwrap();
    for _ in 0..20 {
        let p: Vec<f64> = model.initial().iter().map(|v| v + jitter.sample(&mut rng)).collect();
        let p = DVector::from_vec(p);
        let a = model.jacobian(&p).unwrap();
        let n = finite_difference_jacobian(&model, &p).unwrap();
        for (x, y) in a.iter().zip(n.iter()) {
            assert!((x - y).abs() <= 1e-4 * y.abs().max(1e-2 * n.amax()), "{x} vs {y}");
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn spread(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}
