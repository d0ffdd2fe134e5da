use std::f64::consts::PI;

use mim_core::constants::{BOLTZMANN, HBAR};
use mim_core::qnd_stats::*;
use num_complex::Complex64;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn reference_bath() -> BathParams {
    let w = 2.0 * PI * 1e5;
    BathParams::from_temperatures(w, 1.2e-7 * w, 0.3, 0.0).unwrap()
}

fn small_bath(n_init: f64) -> BathParams {
    BathParams::from_occupations(1.0, 1.0, 0.5, n_init).unwrap()
}

/// Tilted birth-death generator applied by a scaled Taylor series of the propagator.
fn expm_oracle(bath: &BathParams, t: f64, lambda: f64, n: usize) -> Complex64 {
    let g = bath.gamma;
    let ne = bath.n_eq;
    let q = bath.n_init / (1.0 + bath.n_init);
    let apply = |p: &[Complex64]| -> Vec<Complex64> {
        (0..n)
            .map(|k| {
                let kf = k as f64;
                let up = if k + 1 < n { g * ne * (kf + 1.0) } else { 0.0 };
                let down = g * (ne + 1.0) * kf;
                let mut d = -(up + down) * p[k] - Complex64::new(0.0, lambda * kf) * p[k];
                if k > 0 {
                    d += g * ne * kf * p[k - 1];
                }
                if k + 1 < n {
                    d += g * (ne + 1.0) * (kf + 1.0) * p[k + 1];
                }
                d
            })
            .collect()
    };
    let norm_bound = g * (2.0 * ne + 1.0) * 2.0 * n as f64 + lambda.abs() * n as f64;
    let pieces = ((norm_bound * t).ceil() as usize).max(1) * 4;
    let h = t / pieces as f64;
    let mut p: Vec<Complex64> = (0..n).map(|k| Complex64::new((1.0 - q) * q.powi(k as i32), 0.0)).collect();
    for _ in 0..pieces {
        let mut term = p.clone();
        let mut acc = p.clone();
        for order in 1..40 {
            term = apply(&term).into_iter().map(|v| v * (h / order as f64)).collect();
            for (a, b) in acc.iter_mut().zip(term.iter()) {
                *a += b;
            }
        }
        p = acc;
    }
    p.iter().sum()
}

#[test]
fn bose_einstein_reference_parameters() {
    let b = reference_bath();
    assert!((b.n_eq - 6.25e4).abs() / 6.25e4 < 0.01, "n_eq = {}", b.n_eq);
    assert!((b.tau() - 2.12e-4).abs() / 2.12e-4 < 0.01, "tau = {}", b.tau());
    let w = 3.0e6;
    let t = HBAR * w / (BOLTZMANN * 2f64.ln());
    assert!((bose_einstein(w, t) - 1.0).abs() < 1e-12);
    assert_eq!(bose_einstein(w, 1e-9), 0.0);
}

#[test]
fn decay_rates() {
    assert_eq!(fock_decay_rate(0, 0.3, 2.0), 0.3 * 2.0);
    assert_eq!(fock_decay_rate(1, 0.3, 0.0), 0.3);
}

#[test]
fn generating_function_matches_two_master_equation_oracles() {
    for n_init in [0.0, 1.0] {
        let b = small_bath(n_init);
        for gt in [0.3, 1.0, 3.0] {
            for i in 0..20 {
                let l = (-5.0 + 10.0 * i as f64 / 19.0) / b.tau();
                let exact = gen_fn_quantum_at(l, gt, &b);
                let rk = master_equation_oracle(&b, gt, l, 60).unwrap();
                let series = expm_oracle(&b, gt, l, 61);
                assert!((exact - rk).norm() < 1e-6 * rk.norm(), "rk4 n_init {n_init} gt {gt} l {l}");
                assert!((exact - series).norm() < 1e-6 * series.norm(), "series n_init {n_init} gt {gt} l {l}");
            }
        }
    }
}

#[test]
fn oracle_conserves_probability_and_reports_truncation() {
    let b = small_bath(1.0);
    let z = master_equation_oracle(&b, 1.0, 0.0, 60).unwrap();
    assert!((z - 1.0).norm() < 1e-12);
    let hot = BathParams::from_occupations(1.0, 1.0, 5.0, 5.0).unwrap();
    assert!(matches!(master_equation_oracle(&hot, 1.0, 0.1, 10), Err(QndError::Truncation { .. })));
}

#[test]
fn zero_damping_limits() {
    let b = BathParams::from_occupations(1.0, 0.0, 0.5, 0.0).unwrap();
    let grid = LambdaGrid::with_extent(30.0, 64).unwrap();
    let s = gen_fn_quantum(&grid, 2.0, &b).unwrap();
    assert!(s.values.iter().all(|v| (v - 1.0).norm() < 1e-15));

    let n = 1.7;
    let p = n / (1.0 + n);
    let b = b.with_n_init(n);
    for l in [-3.0, -0.4, 0.2, 1.1, 7.0] {
        let t = 1.3;
        let closed: Complex64 = (1.0 - p) / (1.0 - p * Complex64::from_polar(1.0, -l * t));
        let series: Complex64 =
            (0..400).map(|k| (1.0 - p) * p.powi(k) * Complex64::from_polar(1.0, -l * (k as f64) * t)).sum();
        let got = gen_fn_quantum_at(l, t, &b);
        assert!((got - closed).norm() < 1e-12);
        assert!((got - series).norm() < 1e-12);
        let oracle = master_equation_oracle(&BathParams { gamma: 1e-12, ..b }, t, l, 80).unwrap();
        assert!((got - oracle).norm() < 1e-6);
    }
}

#[test]
fn classical_boltzmann_limit() {
    let theta = 3.0;
    let n_init = 1.0 / (1.0f64 / theta).exp_m1();
    let t = 0.7;
    let b = BathParams::from_occupations(1.0, 1e-9, 2.0, n_init).unwrap();
    let exact = BathParams { gamma: 0.0, ..b };
    for chi_scaled in [-2.0, -0.3, 0.5, 4.0] {
        let chi = chi_scaled / (HBAR * b.omega_m);
        let boltzmann = 1.0 / (Complex64::new(1.0, chi_scaled * theta * t));
        let small = gen_fn_classical_energy_at(chi, t, &b);
        let zero = gen_fn_classical_energy_at(chi, t, &exact);
        assert!((zero - boltzmann).norm() < 1e-12, "{zero} vs {boltzmann}");
        assert!((small - boltzmann).norm() < 1e-6, "{small} vs {boltzmann}");
    }
    assert_eq!(gen_fn_classical_at(0.0, t, &b), Complex64::new(1.0, 0.0));
}

#[test]
fn high_temperature_quantum_matches_classical() {
    let b = BathParams::from_occupations(1.0, 1.0, 1e4, 1e4).unwrap();
    let t = 1.0;
    let sd = 1e4;
    for i in 1..=20 {
        let l = i as f64 * 0.15 / sd;
        let q = gen_fn_quantum_at(l, t, &b);
        let c = gen_fn_classical_at(l, t, &b);
        assert!((q - c).norm() < 1e-4 * c.norm(), "l {l}: {q} vs {c}");
    }
    let specs = [
        DistributionSpec { kind: GenKind::Quantum, bath: b, t, s_nn: 0.0, shift: 0.0 },
        DistributionSpec { kind: GenKind::Classical, bath: b, t, s_nn: 0.0, shift: 0.0 },
    ];
    let d = invert_common(&specs, &InversionSettings::default()).unwrap();
    let tv: f64 = d[0].density.iter().zip(d[1].density.iter()).map(|(a, c)| (a - c).abs()).sum::<f64>() * d[0].dm * 0.5;
    assert!(tv < 1e-3, "total variation {tv}");
}

#[test]
fn lattice_inversion_places_atoms() {
    let b = BathParams::from_occupations(1.0, 0.0, 0.5, 0.0).unwrap();
    let spec = DistributionSpec { kind: GenKind::Quantum, bath: b, t: 2.0, s_nn: 0.0, shift: 0.0 };
    let d = distribution(&spec, &InversionSettings::default()).unwrap();
    let peak = d.density.iter().cloned().fold(0.0, f64::max);
    let k = d.density.iter().position(|v| *v == peak).unwrap();
    assert!(d.m(k).abs() < 1e-12);
    assert!((peak * d.dm - 1.0).abs() < 1e-12);

    let b = b.with_n_init(0.8);
    let q: f64 = 0.8 / 1.8;
    let spec = DistributionSpec { bath: b, ..spec };
    let d = distribution(&spec, &InversionSettings::default()).unwrap();
    for n in 0..6 {
        let k = ((n as f64 * 2.0 - d.m0) / d.dm).round() as usize;
        assert!((d.density[k] * d.dm - (1.0 - q) * q.powi(n)).abs() < 1e-12);
    }
    assert!((d.mean - 0.8 * 2.0).abs() < 1e-9);
}

#[test]
fn measured_distribution_moments() {
    let b = reference_bath().with_n_init(1.0);
    let tau = b.tau();
    let settings = InversionSettings::default();
    for kind in [GenKind::Quantum, GenKind::Classical] {
        for t in [0.3 * tau, tau, 3.0 * tau] {
            let s_nn = tau / 40.0;
            let spec = DistributionSpec { kind, bath: b, t, s_nn, shift: 0.0 };
            let d = distribution(&spec, &settings).unwrap();
            assert!(d.normalization_error < 1e-6);
            assert!(d.tail_mass < 1e-6);
            let expect = match kind {
                GenKind::Quantum => b.mean_integrated(t),
                GenKind::Classical => classical_mean(&b, t),
            };
            assert!((d.mean - expect).abs() < 1e-3 * expect.abs(), "{kind:?} t {t}: {} vs {expect}", d.mean);
        }
    }
}

#[test]
fn heat_up_mean_from_ground_state() {
    let b = reference_bath();
    let t = b.tau();
    let x = b.gamma * t;
    let series: f64 = (0..8).map(|k| (-x).powi(k) / (2..k + 3).map(|j| j as f64).product::<f64>()).sum();
    let expect = b.n_eq * b.gamma * t * t * series;
    assert!((b.mean_integrated(t) - expect).abs() < 1e-9 * expect);
    assert!((b.mean_occupation(t) - 1.0).abs() < 1e-3);
}

#[test]
fn noise_convolution_adds_variance() {
    let b = small_bath(0.5);
    let t = 1.5;
    let spec = DistributionSpec { kind: GenKind::Classical, bath: b, t, s_nn: 0.01, shift: 0.0 };
    let base = distribution(&spec, &InversionSettings { points: 1 << 12, ..Default::default() }).unwrap();
    for s_nn in [0.02, 0.1, 0.5] {
        let out = convolve_noise(&base, s_nn, t).unwrap();
        let added = out.variance - base.variance;
        assert!((added - s_nn * t).abs() < 1e-6 * s_nn * t, "{added} vs {}", s_nn * t);
        assert!((out.mean - base.mean).abs() < 1e-9);
        assert_eq!(out.kind, DistKind::MeasuredClassical);
    }
    let same = convolve_noise(&base, 0.0, t).unwrap();
    assert_eq!(same.density, base.density);
    let fine = base.dm * base.dm / t;
    assert!(matches!(convolve_noise(&base, fine, t), Err(QndError::GridResolution { .. })));
}

#[test]
fn delta_plus_noise_is_gaussian() {
    let b = BathParams::from_occupations(1.0, 0.0, 0.5, 0.0).unwrap();
    let (t, s_nn) = (2.0, 0.3);
    let spec = DistributionSpec { kind: GenKind::Quantum, bath: b, t, s_nn, shift: 0.0 };
    let d = distribution(&spec, &InversionSettings::default()).unwrap();
    let var = s_nn * t;
    for k in (0..d.len()).step_by(97) {
        let m = d.m(k);
        let g = (-m * m / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
        assert!((d.density[k] - g).abs() < 1e-10, "m {m}");
    }
}

fn gaussian(sigma: f64, centre: f64, dm: f64, lo: f64, n: usize) -> EnergyDistribution {
    let density: Vec<f64> = (0..n)
        .map(|k| {
            let x = (lo + k as f64 * dm - centre) / sigma;
            (-0.5 * x * x).exp() / (sigma * (2.0 * PI).sqrt())
        })
        .collect();
    EnergyDistribution {
        m0: lo,
        dm,
        density,
        kind: DistKind::MeasuredQuantum,
        t: 1.0,
        mean: centre,
        variance: sigma * sigma,
        mean_shift: 0.0,
        normalization_error: 0.0,
        tail_mass: 0.0,
    }
}

#[test]
fn entropy_closed_forms() {
    let g = gaussian(1.3, 0.0, 0.01, -20.0, 4001);
    let expect = 0.5 * (2.0 * PI * std::f64::consts::E * 1.3 * 1.3).log2();
    assert!((shannon_entropy(&g) - expect).abs() < 1e-9);
    let u = EnergyDistribution { density: vec![0.25; 400], dm: 0.01, ..g.clone() };
    assert!((shannon_entropy(&u) - 2.0).abs() < 1e-12);
    assert!((shannon_entropy(&g.shifted(3.7)) - shannon_entropy(&g)).abs() < 1e-15);
}

#[test]
fn mutual_information_calibration() {
    let g = gaussian(1.0, 0.0, 0.01, -30.0, 8001);
    assert!(mutual_information(&g, &g).unwrap().abs() < 1e-9);
    // R_SNR = d^2 / (2 sigma)^2 = 1
    let h = gaussian(1.0, 2.0, 0.01, -30.0, 8001);
    let i = mutual_information(&g, &h).unwrap();
    assert!((i - 0.485_944_154_132_936_1).abs() < 1e-6, "I = {i}");
    assert!((i - 0.49).abs() < 0.01);
    let wide = gaussian(1.0, 0.0, 0.01, -30.0, 26001);
    let far = gaussian(1.0, 200.0, 0.01, -30.0, 26001);
    let i = mutual_information(&wide, &far).unwrap();
    assert!((i - 1.0).abs() < 1e-3, "I = {i}");
}

#[test]
fn snr_and_figure_of_merit() {
    assert_eq!(snr_gaussian(4.0, 1.0), 1.0);
    assert_eq!(snr_gaussian(8.0, 1.0), 2.0 * snr_gaussian(4.0, 1.0));
    let b = reference_bath();
    for (ratio, r) in [(0.001, 250.0), (0.004, 62.5)] {
        let noise = MeasurementNoise::new(ratio * b.tau()).unwrap();
        assert!((figure_of_merit_r(&b, &noise) - r).abs() < 1e-9 * r);
    }
    let hot = BathParams { n_eq: 2.0 * b.n_eq, ..b.with_n_init(0.0) };
    let hot = BathParams { t_bath: None, ..hot };
    let noise = MeasurementNoise::new(1e-6).unwrap();
    assert!((figure_of_merit_r(&hot, &noise) - 0.5 * figure_of_merit_r(&b, &noise)).abs() < 1e-9);
}

#[test]
fn resolvability_threshold_of_equal_mixture() {
    let mixture = |r_snr: f64| {
        let sigma = 1.0 / (2.0 * r_snr.sqrt());
        let a = gaussian(sigma, 0.0, 1e-3, -6.0, 14001);
        let b = gaussian(sigma, 1.0, 1e-3, -6.0, 14001);
        let density = a.density.iter().zip(b.density.iter()).map(|(x, y)| 0.5 * (x + y)).collect();
        EnergyDistribution { density, ..a }.local_maxima(1e-9).len()
    };
    assert_eq!(mixture(0.95), 1);
    assert_eq!(mixture(1.05), 2);
}

#[test]
fn shot_noise_scalings() {
    let base = shot_noise_budget(1e5, 1e-3, 1064e-9, 0.5, 1e-12).unwrap();
    assert!((shot_noise_budget(2e5, 1e-3, 1064e-9, 0.5, 1e-12).unwrap() - base / 4.0).abs() < 1e-12 * base);
    assert!((shot_noise_budget(1e5, 2e-3, 1064e-9, 0.5, 1e-12).unwrap() - base / 2.0).abs() < 1e-12 * base);
    assert!((shot_noise_budget(1e5, 1e-3, 1064e-9, 0.5, 0.5e-12).unwrap() - 16.0 * base).abs() < 1e-12 * base);
    assert!(shot_noise_budget(0.0, 1e-3, 1064e-9, 0.5, 1e-12).is_err());
}

#[test]
fn information_is_monotone_under_added_noise() {
    let b = reference_bath();
    let t = b.tau();
    let mut last = f64::INFINITY;
    for r in [200.0, 20.0, 2.0] {
        let noise = MeasurementNoise::for_figure_of_merit(&b, r).unwrap();
        let rep = compare_quantum_classical(&b, &noise, t).unwrap();
        assert!(rep.i_bits >= 0.0 && rep.i_bits <= 1.0);
        assert!(rep.i_bits <= last);
        last = rep.i_bits;
    }
    let loud = MeasurementNoise::for_figure_of_merit(&b, 1e-4).unwrap();
    assert!(compare_quantum_classical(&b, &loud, t).unwrap().i_bits < 1e-4);
}

#[test]
fn optimizer_beats_probes() {
    let b = reference_bath();
    let noise = MeasurementNoise::for_figure_of_merit(&b, 11.0).unwrap();
    let settings = InversionSettings::default();
    let opt = optimize_averaging_time(&b, &noise, &settings).unwrap();
    assert!(!opt.at_boundary);
    assert!(opt.t_opt > 0.1 * b.tau() && opt.t_opt < 10.0 * b.tau());
    for i in 0..20 {
        let t = b.tau() * 10f64.powf(-2.0 + 3.0 * i as f64 / 19.0);
        let v = measured_pair(&b, &noise, t, &settings).unwrap().report.i_bits;
        assert!(v <= opt.i_max + 1e-12, "t/tau {} gives {v} > {}", t / b.tau(), opt.i_max);
    }
}

#[test]
fn jump_trace_stationary_law() {
    let b = BathParams::from_occupations(1.0, 1.0, 0.5, 0.5).unwrap();
    let trace = simulate_jump_trace_from(&b, 0, 8.0e5, 11, 2_000_000).unwrap();
    assert!(trace.events() >= 1_000_000, "{} events", trace.events());
    let q: f64 = 0.5 / 1.5;
    let bins = 8;
    let mut counts = vec![0.0; bins];
    let mut t = 100.0;
    let mut total = 0.0;
    while t < trace.duration {
        let n = trace.occupation_at(t) as usize;
        counts[n.min(bins - 1)] += 1.0;
        total += 1.0;
        t += 10.0;
    }
    let mut chi2 = 0.0;
    for (k, c) in counts.iter().enumerate() {
        let p = if k + 1 < bins { (1.0 - q) * q.powi(k as i32) } else { q.powi(k as i32) };
        let e = p * total;
        chi2 += (c - e) * (c - e) / e;
    }
    let pval = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
    assert!(pval > 0.01, "chi2 {chi2} p {pval}");
}

#[test]
fn jump_trace_basics_and_determinism() {
    let cold = BathParams::from_occupations(1.0, 1.0, 0.0, 0.0).unwrap();
    let tr = simulate_jump_trace(&cold, 1e3, 5).unwrap();
    assert_eq!(tr.events(), 0);
    let b = small_bath(0.0);
    let a = simulate_jump_trace(&b, 200.0, 42).unwrap();
    let c = simulate_jump_trace(&b, 200.0, 42).unwrap();
    assert_eq!(a.to_csv(), c.to_csv());
    assert!(a.times.windows(2).all(|w| w[1] > w[0]));
    assert!(a.occupations.windows(2).all(|w| w[0].abs_diff(w[1]) == 1));
    let d = simulate_jump_trace(&b, 200.0, 43).unwrap();
    assert_ne!(a.to_csv(), d.to_csv());
    let tiny = simulate_jump_trace_from(&b, 0, 1e4, 1, 10);
    assert!(matches!(tiny, Err(QndError::EventCap { .. })));
}

#[test]
fn ensemble_heat_up_matches_mean_occupation() {
    let b = BathParams::from_occupations(1.0, 1.0, 0.5, 0.0).unwrap();
    let count = 10_000;
    let traces = simulate_jump_ensemble(&b, 0, 3.0, 9, count).unwrap();
    for t in [0.25, 0.5, 1.0, 2.0, 2.9] {
        let xs: Vec<f64> = traces.iter().map(|tr| tr.occupation_at(t) as f64).collect();
        let mean = xs.iter().sum::<f64>() / count as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (count - 1) as f64;
        let expect = b.n_eq * (1.0 - (-b.gamma * t).exp());
        assert!((mean - expect).abs() < 3.0 * (var / count as f64).sqrt(), "t {t}: {mean} vs {expect}");
    }
    let again = simulate_jump_ensemble(&b, 0, 3.0, 9, 4).unwrap();
    assert_eq!(again[3], traces[3]);
}

#[test]
fn sliding_average_noise_variance() {
    let b = small_bath(0.0);
    let t_avg = 1.0;
    let dt = 0.1;
    let flat = JumpTrace { times: vec![0.0], occupations: vec![0], duration: 1e4, seed: 0, bath: b };
    let s_nn = 0.02;
    let out = sliding_average_trace(&flat, s_nn, t_avg, dt, 3).unwrap();
    assert!(out.values.len() >= 100_000);
    let n = out.values.len() as f64;
    let mean = out.values.iter().sum::<f64>() / n;
    let var = out.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var - s_nn / t_avg).abs() < 0.05 * s_nn / t_avg, "var {var}");

    let three = JumpTrace { occupations: vec![3], ..flat.clone() };
    let quiet = sliding_average_trace(&three, 0.0, t_avg, dt, 3).unwrap();
    assert!(quiet.values.iter().all(|v| (v - 3.0).abs() < 1e-12));
    assert!(matches!(sliding_average_trace(&flat, s_nn, t_avg, 0.2, 3), Err(QndError::SamplingRate { .. })));
    let again = sliding_average_trace(&flat, s_nn, t_avg, dt, 3).unwrap();
    assert_eq!(again.to_csv(), out.to_csv());
}

#[test]
fn trajectory_caption_snr_values() {
    let b = reference_bath();
    let tau = b.tau();
    let expect_a = [2.5, 12.5, 25.0, 50.0, 125.0, 250.0];
    let expect_b = [0.625, 3.125, 6.25, 12.5, 31.25, 62.5];
    for (i, f) in [0.01, 0.05, 0.1, 0.2, 0.5, 1.0].iter().enumerate() {
        assert!((snr_gaussian(f * tau, 0.001 * tau) - expect_a[i]).abs() < 1e-9);
        assert!((snr_gaussian(f * tau, 0.004 * tau) - expect_b[i]).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generating_function_symmetry(
        gamma in 0.01f64..5.0,
        n_eq in 0.0f64..50.0,
        n_init in 0.0f64..10.0,
        t in 0.05f64..5.0,
        ext in 1.0f64..200.0,
    ) {
        let b = BathParams::from_occupations(1.0, gamma, n_eq, n_init).unwrap();
        let grid = LambdaGrid::with_extent(ext, 512).unwrap();
        for s in [gen_fn_quantum(&grid, t, &b).unwrap(), gen_fn_classical(&grid, t, &b).unwrap()] {
            let z = grid.zero_index();
            prop_assert_eq!(s.values[z], Complex64::new(1.0, 0.0));
            for j in 1..z {
                let d = (s.values[z + j] - s.values[z - j].conj()).norm();
                prop_assert!(d < 1e-12, "asymmetry {} at {}", d, j);
                prop_assert!(s.values[z + j].norm() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn information_bounds(r in 0.5f64..500.0, f in 0.2f64..3.0) {
        let b = reference_bath();
        let noise = MeasurementNoise::for_figure_of_merit(&b, r).unwrap();
        let rep = compare_quantum_classical(&b, &noise, f * b.tau()).unwrap();
        prop_assert!(rep.i_bits >= -1e-12 && rep.i_bits <= 1.0 + 1e-12);
    }

    #[test]
    fn rate_split_identity(n in 0u64..1000, g in 1e-6f64..10.0, ne in 0.0f64..1e5) {
        let total = rate_up(n, g, ne) + rate_down(n, g, ne);
        prop_assert!((total - fock_decay_rate(n, g, ne)).abs() <= 1e-12 * total.max(1e-300));
    }
}
