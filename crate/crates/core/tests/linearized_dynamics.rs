use mim_core::linearized_dynamics::*;
use mim_core::numeric::{linspace, symmetric_grid};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const I: Complex64 = Complex64::new(0.0, 1.0);

type C2 = [Complex64; 2];

/// Impulse response of `y' = A y` with `y(0+) = y0`, Fourier transformed as
/// `int y(t) e^{-i w t} dt` by integrating the augmented system with RK4.
fn kick_response(a: [[Complex64; 2]; 2], y0: C2, omega: f64, slowest: f64, fastest: f64) -> C2 {
    let t_end = 40.0 / slowest;
    let dt = 1e-2 / fastest;
    let steps = (t_end / dt).ceil() as usize;
    let dt = t_end / steps as f64;
    let rhs = |t: f64, y: &C2| -> (C2, C2) {
        let dy = [a[0][0] * y[0] + a[0][1] * y[1], a[1][0] * y[0] + a[1][1] * y[1]];
        let ph = (-I * omega * t).exp();
        (dy, [y[0] * ph, y[1] * ph])
    };
    let mut y = y0;
    let mut acc = [Complex64::new(0.0, 0.0); 2];
    let mut t = 0.0;
    for _ in 0..steps {
        let (k1, j1) = rhs(t, &y);
        let y2 = [y[0] + k1[0] * (dt / 2.0), y[1] + k1[1] * (dt / 2.0)];
        let (k2, j2) = rhs(t + dt / 2.0, &y2);
        let y3 = [y[0] + k2[0] * (dt / 2.0), y[1] + k2[1] * (dt / 2.0)];
        let (k3, j3) = rhs(t + dt / 2.0, &y3);
        let y4 = [y[0] + k3[0] * dt, y[1] + k3[1] * dt];
        let (k4, j4) = rhs(t + dt, &y4);
        for i in 0..2 {
            y[i] += (k1[i] + k2[i] * 2.0 + k3[i] * 2.0 + k4[i]) * (dt / 6.0);
            acc[i] += (j1[i] + j2[i] * 2.0 + j3[i] * 2.0 + j4[i]) * (dt / 6.0);
        }
        t += dt;
    }
    acc
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

fn random_standard(rng: &mut ChaCha8Rng) -> (StandardParams, StandardSteadyState) {
    let kappa = log_uniform(rng, 0.03, 30.0);
    let omega_m = log_uniform(rng, 0.03, 30.0);
    let omega_prime = log_uniform(rng, 0.1, 10.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let pressure = -omega_prime.signum() * log_uniform(rng, 1e-3, 1.0);
    let d_eff = log_uniform(rng, 0.03, 30.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let x_bar = rng.gen_range(-1.0..1.0);
    let p = StandardParams {
        detuning: d_eff + omega_prime * x_bar,
        omega_prime,
        kappa,
        omega_m,
        gamma_m: 0.0,
        pressure,
        x0: 0.0,
    };
    let ss = StandardSteadyState { x_bar, alpha: p.amplitude_at(x_bar, 1.0), stiffness: 0.0, stable: true };
    (p, ss)
}

fn fig8() -> TwoModeParams {
    TwoModeParams {
        coupling: 2.0,
        omega_prime: -1.0,
        kappa_l: 1.0,
        kappa_r: 1.0,
        detuning: 0.3,
        omega_m: 1.0,
        gamma_m: 0.0,
        pressure: 1.0,
    }
}

#[test]
fn steady_states_satisfy_both_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let (mut p, _) = random_standard(&mut rng);
        p.x0 = rng.gen_range(-1.0..1.0);
        p.pressure *= 20.0;
        let drive = rng.gen_range(0.1..3.0);
        for ss in steady_state_standard(&p, drive).unwrap() {
            let h = 0.5 * p.kappa;
            // Scaled residuals of the light and force balance equations.
            let light = I * p.effective_detuning(ss.x_bar) * ss.alpha + h * (drive - ss.alpha);
            assert!(light.norm() / (h * drive) < 1e-10);
            let force = -p.omega_m.powi(2) * (ss.x_bar - p.x0) + p.pressure * ss.alpha.norm_sqr();
            // x_bar carries absolute precision ~eps |x_bar|.
            let scale = p.omega_m.powi(2) * (ss.x_bar.abs() + p.x0.abs()) + p.pressure.abs() * ss.alpha.norm_sqr();
            assert!(force.abs() <= 1e-10 * scale.max(1e-300), "{force} vs {scale}");
        }
    }
}

#[test]
fn bistability_root_count_matches_dense_sampling() {
    // Red detuning, strong drive: three solutions, outer ones stable.
    let p = StandardParams {
        detuning: -1.5,
        omega_prime: 1.0,
        kappa: 1.0,
        omega_m: 1.0,
        gamma_m: 0.0,
        pressure: -2.0,
        x0: 0.0,
    };
    let states = steady_state_standard(&p, 1.0).unwrap();
    let balance = |x: f64| -p.omega_m.powi(2) * (x - p.x0) + p.pressure * p.amplitude_at(x, 1.0).norm_sqr();
    let grid = linspace(-20.0, 20.0, 400_001);
    let crossings: Vec<f64> = grid
        .windows(2)
        .filter(|w| balance(w[0]).signum() != balance(w[1]).signum())
        .map(|w| 0.5 * (w[0] + w[1]))
        .collect();
    assert_eq!(states.len(), 3);
    assert_eq!(crossings.len(), 3);
    for (s, c) in states.iter().zip(&crossings) {
        assert!((s.x_bar - c).abs() < 1e-4);
    }
    assert_eq!(states.iter().map(|s| s.stable).collect::<Vec<_>>(), vec![true, false, true]);

    // Weak drive: one solution that moves continuously with the drive.
    let weak = StandardParams { pressure: -0.01, ..p };
    let a = steady_state_standard(&weak, 1.0).unwrap();
    let b = steady_state_standard(&StandardParams { pressure: -0.0100001, ..p }, 1.0).unwrap();
    assert_eq!(a.len(), 1);
    assert!((a[0].x_bar - b[0].x_bar).abs() < 1e-6);
}

#[test]
fn standard_susceptibility_matches_kick_response() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let (p, ss) = random_standard(&mut rng);
        let omega: f64 = rng.gen_range(-3.0..3.0) * p.kappa;
        let a = Complex64::new(-0.5 * p.kappa, p.effective_detuning(ss.x_bar));
        let zero = Complex64::new(0.0, 0.0);
        let y0 = [-I * p.omega_prime * ss.alpha, zero];
        let fastest = p.kappa.max(a.norm()).max(omega.abs());
        let got = kick_response([[a, zero], [zero, a]], y0, omega, p.kappa / 2.0, fastest)[0];
        let want = light_susceptibility_standard(&p, &ss, omega).unwrap();
        assert!((got - want).norm() < 1e-6 * want.norm(), "{got} vs {want}");
    }
}

#[test]
fn two_mode_susceptibility_matches_kick_response() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let p = TwoModeParams {
            coupling: rng.gen_range(0.0..3.0),
            omega_prime: rng.gen_range(-2.0..2.0),
            kappa_l: rng.gen_range(0.3..2.0),
            kappa_r: rng.gen_range(0.3..2.0),
            detuning: rng.gen_range(-3.0..3.0),
            omega_m: 1.0,
            gamma_m: 0.0,
            pressure: 1.0,
        };
        let x = rng.gen_range(-2.0..2.0);
        let st = two_mode_state(&p, x).unwrap();
        let omega: f64 = rng.gen_range(-4.0..4.0);
        let m = two_mode_matrix(&p, x);
        let a = [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]];
        let y0 = [-I * p.omega_prime * st.alpha_l, I * p.omega_prime * st.alpha_r];
        let fastest = m.iter().map(|c| c.norm()).fold(omega.abs(), f64::max);
        let slowest = 0.5 * p.kappa_l.min(p.kappa_r);
        let got = kick_response(a, y0, omega, slowest, fastest);
        let (cl, cr) = susceptibility_vector_two_mode(&p, &st, omega).unwrap();
        let scale = cl.norm().max(cr.norm());
        assert!((got[0] - cl).norm() < 1e-6 * scale, "{} vs {cl}", got[0]);
        assert!((got[1] - cr).norm() < 1e-6 * scale, "{} vs {cr}", got[1]);
    }
}

#[test]
fn closed_form_damping_matches_self_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let (p, ss) = random_standard(&mut rng);
        let general = self_energy_standard(&p, &ss, p.omega_m).unwrap().gamma_opt;
        let closed = gamma_opt_closed_form(&p, &ss);
        assert!((general - closed).abs() <= 1e-9 * closed.abs(), "{general} vs {closed}");
        let red = p.effective_detuning(ss.x_bar) < 0.0;
        assert_eq!(general > 0.0, red);
    }
}

#[test]
fn spring_shift_and_damping_are_read_from_sigma() {
    let (p, ss) = random_standard(&mut ChaCha8Rng::seed_from_u64(2));
    let s = self_energy_standard(&p, &ss, p.omega_m).unwrap();
    assert_eq!(s.gamma_opt, s.sigma.im / p.omega_m);
    assert_eq!(s.delta_omega_m, s.sigma.re / (2.0 * p.omega_m));
}

#[test]
fn optimal_detuning_locations() {
    // Unresolved sidebands at fixed input power: maximize
    // d / (d^2 + 1/4)^3, giving |d| = 1 / (2 sqrt 5).
    let want = 1.0 / (2.0 * 5f64.sqrt());
    let got = -standard_optimal_detuning(1e-3);
    assert!((got / want - 1.0).abs() < 0.05, "{got} vs {want}");
    // Resolved sidebands: near the mechanical frequency.
    for wm in [10.0f64, 30.0] {
        let got = -standard_optimal_detuning(wm);
        assert!((got / wm - 1.0).abs() < 0.05, "{got} vs {wm}");
    }
}

#[test]
fn decoupled_two_mode_reduces_to_single_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..50 {
        let p = TwoModeParams {
            coupling: 0.0,
            omega_prime: rng.gen_range(-3.0..3.0),
            kappa_l: rng.gen_range(0.1..5.0),
            kappa_r: rng.gen_range(0.1..5.0),
            detuning: rng.gen_range(-5.0..5.0),
            omega_m: rng.gen_range(0.1..5.0),
            gamma_m: 0.0,
            pressure: rng.gen_range(-2.0..2.0),
        };
        let x = rng.gen_range(-2.0..2.0);
        let st = two_mode_state(&p, x).unwrap();
        assert_eq!(st.alpha_r, Complex64::new(0.0, 0.0));
        let sp = StandardParams {
            detuning: p.detuning,
            omega_prime: p.omega_prime,
            kappa: p.kappa_l,
            omega_m: p.omega_m,
            gamma_m: 0.0,
            pressure: p.pressure,
            x0: 0.0,
        };
        let ss = StandardSteadyState { x_bar: x, alpha: sp.amplitude_at(x, 1.0), stiffness: 0.0, stable: true };
        assert!((st.alpha_l - ss.alpha).norm() < 1e-12);
        let (cl, cr) = susceptibility_vector_two_mode(&p, &st, p.omega_m).unwrap();
        assert_eq!(cr, Complex64::new(0.0, 0.0));
        let cs = light_susceptibility_standard(&sp, &ss, p.omega_m).unwrap();
        assert!((cl - cs).norm() <= 1e-9 * cs.norm());
        let a = self_energy_two_mode(&p, &st, p.omega_m).unwrap().sigma;
        let b = self_energy_standard(&sp, &ss, p.omega_m).unwrap().sigma;
        assert!((a - b).norm() <= 1e-9 * b.norm().max(1e-300));
    }
}

#[test]
fn two_mode_state_limits() {
    let p = TwoModeParams { coupling: 0.0, detuning: -0.8, ..fig8() };
    let x = p.detuning / p.omega_prime;
    let st = two_mode_state(&p, x).unwrap();
    assert!((st.alpha_l.norm() - 1.0).abs() < 1e-12);
    assert_eq!(st.alpha_r.norm(), 0.0);
    let st = two_mode_state(&p, -x).unwrap();
    assert_eq!(st.alpha_r.norm(), 0.0);

    // With coupling the left intensity peaks at the split resonances.
    let p = fig8();
    let grid = linspace(-5.0, 5.0, 100_001);
    let inten: Vec<f64> =
        grid.iter().map(|&d| two_mode_state(&p.with_detuning(d), 0.0).unwrap().alpha_l.norm_sqr()).collect();
    let peaks: Vec<f64> =
        (1..grid.len() - 1).filter(|&i| inten[i] > inten[i - 1] && inten[i] > inten[i + 1]).map(|i| grid[i]).collect();
    assert_eq!(peaks.len(), 2);
    // Overlapping Lorentzian tails push the maxima slightly outward.
    assert!((peaks[0] + 2.0).abs() < 0.1 && (peaks[1] - 2.0).abs() < 0.1, "{peaks:?}");
    let exact = |d: f64| (d * d + 0.25) / ((4.25 - d * d).powi(2) + d * d);
    let (fp, fl, fr) = (exact(peaks[1]), exact(peaks[1] - 1e-3), exact(peaks[1] + 1e-3));
    assert!(fp >= fl && fp >= fr);
}

#[test]
fn eigenfrequency_asymptotes() {
    let p = fig8();
    for x in [50.0, -200.0, 1e3] {
        let (up, _) = eigenfrequencies_two_mode(&p, x);
        let lin = (p.omega_prime * x).abs();
        let series = lin + p.coupling.powi(2) / (2.0 * lin);
        assert!((up - series).abs() < p.coupling.powi(4) / lin.powi(3));
    }
}

#[test]
fn radiation_force_is_eigenmode_interference_at_degeneracy() {
    for d in linspace(-6.0, 6.0, 61) {
        let st = two_mode_state(&fig8().with_detuning(d), 0.0).unwrap();
        let (plus, minus) = st.eigenmode_amplitudes();
        let interference = 2.0 * (plus * minus.conj()).re;
        assert!((st.static_force() - interference).abs() < 1e-14 * (1.0 + st.alpha_l.norm_sqr()));
    }
}

#[test]
fn maps_are_inversion_antisymmetric() {
    let params = MapParams::new(1.0, 2.0);
    let xs = symmetric_grid(10.0, 41);
    let ds = symmetric_grid(10.0, 41);
    let map = cooling_map(&params, &xs, &ds).unwrap();
    let n = xs.len();
    for i in 0..n {
        for j in 0..n {
            let s = map.at(i, j) + map.at(n - 1 - i, n - 1 - j);
            assert!(s.abs() <= 1e-10 * map.max_abs());
        }
    }
    assert_eq!(map.failed, 0);
    assert!(map.to_csv().starts_with("x_scaled,delta_scaled,gamma_opt\n"));
}

#[test]
fn map_normalization_and_instability_flags() {
    let mut params = MapParams::new(1.0, 2.0);
    // Far from degeneracy one mode behaves like the single-mode cavity, whose
    // best rate is normalized to one.
    let (_, best) = max_cooling_over_detuning(&params, 50.0, 60.0).unwrap();
    assert!((best - 1.0).abs() < 0.02, "{best}");

    params.gamma_m_over_kappa = Some(0.1);
    let ds = linspace(-4.0, 4.0, 81);
    let map = cooling_map(&params, &[3.0], &ds).unwrap();
    for (g, u) in map.gamma.iter().zip(&map.unstable) {
        assert_eq!(*u, g + 0.1 < 0.0);
    }
    assert!(map.unstable.iter().any(|&u| u));
}

#[test]
fn cross_sections_match_map_rows() {
    let params = MapParams::new(1.0, 2.0);
    let xs = [0.0, 0.5, 1.0, 1.5, 2.0, 4.0, 8.0];
    let ds = linspace(-6.0, 6.0, 25);
    let cuts = cross_sections(&params, &xs, &ds).unwrap();
    let map = cooling_map(&params, &xs, &ds).unwrap();
    for (i, cut) in cuts.iter().enumerate() {
        for (j, v) in cut.iter().enumerate() {
            assert_eq!(*v, map.at(i, j));
        }
    }
}

#[test]
fn strongest_degeneracy_effect_at_twice_the_coupling() {
    // Fixed w_M = kappa; sweep g and find where |Gamma_opt(x = 0)| peaks.
    let gs = linspace(0.2, 1.0, 33);
    let best = gs
        .iter()
        .map(|&g| (g, max_cooling_over_detuning(&MapParams::new(1.0, g), 0.0, 8.0).unwrap().1))
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap();
    assert!((best.0 - 0.5).abs() <= 0.05, "{best:?}");
}

#[test]
fn degeneracy_point_limits() {
    let (_, flat) = max_cooling_over_detuning(&MapParams::new(1.0, 8.0), 0.0, 20.0).unwrap();
    assert!(flat.abs() < 0.01);
    let small_g = MapParams::new(1.0, 0.5);
    let best = linspace(-3.0, 3.0, 61)
        .into_iter()
        .map(|x| max_cooling_over_detuning(&small_g, x, 6.0).unwrap().1)
        .fold(f64::MIN, f64::max);
    assert!(best > 1.0, "{best}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_coupling_gives_zero_self_energy(
        d in -5.0f64..5.0, k in 0.1f64..5.0, wm in 0.1f64..5.0, x in -2.0f64..2.0, g in 0.0f64..3.0,
    ) {
        let p = TwoModeParams {
            coupling: g, omega_prime: 0.0, kappa_l: k, kappa_r: k, detuning: d,
            omega_m: wm, gamma_m: 0.0, pressure: 1.0,
        };
        let st = two_mode_state(&p, x).unwrap();
        prop_assert_eq!(self_energy_two_mode(&p, &st, wm).unwrap().sigma, Complex64::new(0.0, 0.0));
        let q = TwoModeParams { omega_prime: -1.0, pressure: 0.0, ..p };
        let st = two_mode_state(&q, x).unwrap();
        prop_assert_eq!(self_energy_two_mode(&q, &st, wm).unwrap().sigma.norm(), 0.0);
    }

    #[test]
    fn symmetric_damping_is_antisymmetric_pointwise(
        x in -10.0f64..10.0, d in -10.0f64..10.0, g in 0.0f64..4.0, wm in 0.1f64..4.0,
    ) {
        let params = MapParams::new(wm, g);
        let a = params.rate(x, d).unwrap();
        let b = params.rate(-x, -d).unwrap();
        prop_assert!((a + b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1e-12));
    }
}
