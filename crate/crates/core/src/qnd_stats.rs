//! Statistics of weak, time-integrated phonon-number measurement.
//!
//! Units: the integrated occupation `m = ∫ n dt` is in quanta·s and the
//! counting field `lambda` in 1/(quanta·s). Generating functions follow
//! `P~(lambda) = ∫ dm e^{-i lambda m} P(m)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{BOLTZMANN, HBAR, SPEED_OF_LIGHT};
use crate::numeric::{bisect, golden_section_max};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Edge magnitude below which a generating function counts as decayed.
pub const EDGE_TOLERANCE: f64 = 1e-8;
/// Largest mass allowed in the outer sixteenth of an m window.
pub const TAIL_TOLERANCE: f64 = 1e-6;
/// Most negative density (relative to the peak) accepted before clipping.
pub const NEGATIVE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QndError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("branch discontinuity in alpha at grid index {index} (jump ratio {ratio:.3})")]
    BranchDiscontinuity { index: usize, ratio: f64 },
    #[error("generating function has not decayed at the grid edge (|P| = {edge:.3e}); widen the lambda grid")]
    InsufficientDecay { edge: f64 },
    #[error("distribution aliases: tail mass {tail:.3e} exceeds tolerance; enlarge the m window")]
    Aliasing { tail: f64 },
    #[error("negative density {value:.3e} (relative to peak) exceeds clipping tolerance")]
    NegativeDensity { value: f64 },
    #[error("noise width is {cells:.3} grid cells; at least 2 are required")]
    GridResolution { cells: f64 },
    #[error("distributions cannot share a grid: {0}")]
    GridMismatch(String),
    #[error("event cap of {cap} exceeded")]
    EventCap { cap: usize },
    #[error("sampling step {dt:.3e} s exceeds a tenth of the averaging time ({limit:.3e} s)")]
    SamplingRate { dt: f64, limit: f64 },
    #[error("master-equation truncation: top-level occupancy {top:.3e}")]
    Truncation { top: f64 },
}

pub type Result<T> = std::result::Result<T, QndError>;

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(QndError::InvalidParameter(msg()))
    }
}

/// Bose–Einstein occupation `1/(exp(hbar w / k_B T) - 1)`.
pub fn bose_einstein(omega_m: f64, temperature: f64) -> f64 {
    let x = HBAR * omega_m / (BOLTZMANN * temperature);
    if x > 700.0 {
        0.0
    } else {
        1.0 / x.exp_m1()
    }
}

/// `k_B T / (hbar w)` for the temperature whose Bose–Einstein occupation is `n`.
pub fn classical_temperature_ratio(n: f64) -> f64 {
    if n <= 0.0 {
        0.0
    } else {
        1.0 / (1.0 / n).ln_1p()
    }
}

/// Total decay rate of Fock state `n`: `gamma [n_eq + n (2 n_eq + 1)]`.
pub fn fock_decay_rate(n: u64, gamma: f64, n_eq: f64) -> f64 {
    let n = n as f64;
    gamma * (n_eq + n * (2.0 * n_eq + 1.0))
}

/// Upward rate `gamma n_eq (n + 1)`.
pub fn rate_up(n: u64, gamma: f64, n_eq: f64) -> f64 {
    gamma * n_eq * (n as f64 + 1.0)
}

/// Downward rate `gamma (n_eq + 1) n`.
pub fn rate_down(n: u64, gamma: f64, n_eq: f64) -> f64 {
    gamma * (n_eq + 1.0) * n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BathParams {
    /// Mechanical frequency (rad/s).
    pub omega_m: f64,
    /// Damping rate (1/s).
    pub gamma: f64,
    pub n_eq: f64,
    pub n_init: f64,
    /// Bath temperature (K), when the occupation was derived from it.
    pub t_bath: Option<f64>,
    /// Initial temperature (K), when the occupation was derived from it.
    pub t_init: Option<f64>,
}

impl BathParams {
    pub fn from_occupations(omega_m: f64, gamma: f64, n_eq: f64, n_init: f64) -> Result<Self> {
        let b = Self { omega_m, gamma, n_eq, n_init, t_bath: None, t_init: None };
        b.validate()?;
        Ok(b)
    }

    /// A zero initial temperature means the ground state.
    pub fn from_temperatures(omega_m: f64, gamma: f64, t_bath: f64, t_init: f64) -> Result<Self> {
        require(t_bath > 0.0, || format!("bath temperature must be positive, got {t_bath}"))?;
        require(t_init >= 0.0, || format!("initial temperature must be non-negative, got {t_init}"))?;
        let n_init = if t_init == 0.0 { 0.0 } else { bose_einstein(omega_m, t_init) };
        let b = Self {
            omega_m,
            gamma,
            n_eq: bose_einstein(omega_m, t_bath),
            n_init,
            t_bath: Some(t_bath),
            t_init: Some(t_init),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn with_n_init(mut self, n_init: f64) -> Self {
        self.n_init = n_init;
        self.t_init = None;
        self
    }

    pub fn validate(&self) -> Result<()> {
        require(self.omega_m.is_finite() && self.omega_m > 0.0, || {
            format!("omega_m must be positive, got {}", self.omega_m)
        })?;
        require(self.gamma.is_finite() && self.gamma >= 0.0, || {
            format!("gamma must be non-negative, got {}", self.gamma)
        })?;
        require(self.n_eq.is_finite() && self.n_eq >= 0.0, || format!("n_eq must be non-negative, got {}", self.n_eq))?;
        require(self.n_init.is_finite() && self.n_init >= 0.0, || {
            format!("n_init must be non-negative, got {}", self.n_init)
        })?;
        for (t, n, name) in [(self.t_bath, self.n_eq, "bath"), (self.t_init, self.n_init, "initial")] {
            if let Some(t) = t {
                let expect = if t == 0.0 { 0.0 } else { bose_einstein(self.omega_m, t) };
                require((expect - n).abs() <= 1e-9 * expect.max(1.0), || {
                    format!("{name} occupation {n} inconsistent with temperature {t} K (expected {expect})")
                })?;
            }
        }
        Ok(())
    }

    /// Ground-state lifetime `1/(gamma n_eq)`.
    pub fn tau(&self) -> f64 {
        1.0 / (self.gamma * self.n_eq)
    }

    pub fn theta_bath(&self) -> f64 {
        match self.t_bath {
            Some(t) => BOLTZMANN * t / (HBAR * self.omega_m),
            None => classical_temperature_ratio(self.n_eq),
        }
    }

    pub fn theta_init(&self) -> f64 {
        match self.t_init {
            Some(t) => BOLTZMANN * t / (HBAR * self.omega_m),
            None => classical_temperature_ratio(self.n_init),
        }
    }

    /// `<n(t)> = n_eq (1 - e^{-gamma t}) + n_init e^{-gamma t}`.
    pub fn mean_occupation(&self, t: f64) -> f64 {
        let decay = (-self.gamma * t).exp();
        self.n_eq * (1.0 - decay) + self.n_init * decay
    }

    /// `∫_0^t <n> dt'`.
    pub fn mean_integrated(&self, t: f64) -> f64 {
        relax_integral(self.n_eq, self.n_init, self.gamma, t)
    }
}

/// `∫_0^t [s + (i - s) e^{-gamma t'}] dt'`, split so neither term cancels.
fn relax_integral(stationary: f64, initial: f64, gamma: f64, t: f64) -> f64 {
    let x = gamma * t;
    // t - (1 - e^{-x})/gamma = t x (1/2 - x/6 + x^2/24 - ...)
    let growth = if x < 0.1 {
        let mut term = 0.5;
        let mut sum = 0.0;
        for k in 0..12 {
            sum += term;
            term *= -x / (k as f64 + 3.0);
        }
        t * x * sum
    } else {
        t + (-x).exp_m1() / gamma
    };
    initial * (t - growth) + stationary * growth
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotNoiseBudget {
    pub finesse: f64,
    /// Input power (W).
    pub power_in: f64,
    /// Wavelength (m).
    pub wavelength: f64,
    pub r_c: f64,
    pub x_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementNoise {
    /// Two-sided white spectral density of the added noise (quanta²·s).
    pub s_nn: f64,
    pub budget: Option<ShotNoiseBudget>,
}

impl MeasurementNoise {
    pub fn new(s_nn: f64) -> Result<Self> {
        require(s_nn.is_finite() && s_nn > 0.0, || format!("S_nn must be positive, got {s_nn}"))?;
        Ok(Self { s_nn, budget: None })
    }

    pub fn from_budget(budget: ShotNoiseBudget) -> Result<Self> {
        let s = shot_noise_budget(budget.finesse, budget.power_in, budget.wavelength, budget.r_c, budget.x_m)?;
        Ok(Self { s_nn: s, budget: Some(budget) })
    }

    /// Noise level giving figure of merit `r` for the given bath.
    pub fn for_figure_of_merit(bath: &BathParams, r: f64) -> Result<Self> {
        require(r > 0.0, || format!("R must be positive, got {r}"))?;
        Self::new(bath.tau() / (4.0 * r))
    }
}

/// `S_nn = hbar c lambda^3 (1 - r_c) / (4096 pi F^2 P_in x_m^4)`.
pub fn shot_noise_budget(finesse: f64, power_in: f64, wavelength: f64, r_c: f64, x_m: f64) -> Result<f64> {
    for (v, name) in [(finesse, "finesse"), (power_in, "power_in"), (wavelength, "wavelength"), (x_m, "x_m")] {
        require(v.is_finite() && v > 0.0, || format!("{name} must be positive, got {v}"))?;
    }
    require(r_c < 1.0, || format!("r_c must be below 1, got {r_c}"))?;
    Ok(HBAR * SPEED_OF_LIGHT * wavelength.powi(3) * (1.0 - r_c)
        / (4096.0 * PI * finesse * finesse * power_in * x_m.powi(4)))
}

/// Gaussian signal-to-noise ratio `t_avg / (4 S_nn)`.
pub fn snr_gaussian(t_avg: f64, s_nn: f64) -> f64 {
    t_avg / (4.0 * s_nn)
}

/// `R = tau / (4 S_nn)`.
pub fn figure_of_merit_r(bath: &BathParams, noise: &MeasurementNoise) -> f64 {
    snr_gaussian(bath.tau(), noise.s_nn)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenKind {
    Quantum,
    Classical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistKind {
    Quantum,
    Classical,
    MeasuredQuantum,
    MeasuredClassical,
}

impl DistKind {
    fn measured(self) -> Self {
        match self {
            DistKind::Quantum | DistKind::MeasuredQuantum => DistKind::MeasuredQuantum,
            DistKind::Classical | DistKind::MeasuredClassical => DistKind::MeasuredClassical,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DistKind::Quantum => "quantum",
            DistKind::Classical => "classical",
            DistKind::MeasuredQuantum => "measured_quantum",
            DistKind::MeasuredClassical => "measured_classical",
        }
    }
}

/// Symmetric uniform grid `lambda_j = (j - len/2) step`, `j = 0..len`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub step: f64,
    pub len: usize,
}

impl LambdaGrid {
    pub fn new(step: f64, len: usize) -> Result<Self> {
        require(step.is_finite() && step > 0.0, || format!("lambda step must be positive, got {step}"))?;
        require(len >= 4 && len.is_multiple_of(2), || format!("lambda grid length must be even and >= 4, got {len}"))?;
        Ok(Self { step, len })
    }

    /// Grid with `len` points reaching `-lambda_max`.
    pub fn with_extent(lambda_max: f64, len: usize) -> Result<Self> {
        Self::new(2.0 * lambda_max / len as f64, len)
    }

    pub fn value(&self, j: usize) -> f64 {
        (j as f64 - (self.len / 2) as f64) * self.step
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len).map(|j| self.value(j)).collect()
    }

    pub fn zero_index(&self) -> usize {
        self.len / 2
    }

    /// Conjugate m spacing `2 pi / (len step)`.
    pub fn m_step(&self) -> f64 {
        2.0 * PI / (self.len as f64 * self.step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratingSamples {
    pub grid: LambdaGrid,
    pub values: Vec<Complex64>,
    /// Continuously tracked `alpha(lambda)`.
    pub alpha: Vec<Complex64>,
    pub t: f64,
    pub kind: GenKind,
    /// Analytic mean of m including any applied shift.
    pub mean: f64,
    /// Gaussian noise variance folded in (quanta²·s²).
    pub noise_variance: f64,
    pub shift: f64,
    /// Spacing of a purely atomic distribution on `m = k spacing`.
    pub lattice: Option<f64>,
}

impl GeneratingSamples {
    /// Multiplies by the Gaussian factor of white noise `S_nn` integrated over `t`.
    pub fn with_noise(mut self, s_nn: f64) -> Self {
        if s_nn > 0.0 {
            let var = s_nn * self.t;
            for (j, v) in self.values.iter_mut().enumerate() {
                let l = self.grid.value(j);
                *v *= (-0.5 * var * l * l).exp();
            }
            self.noise_variance += var;
            self.lattice = None;
        }
        self
    }

    /// Translates the distribution by `d` in m.
    pub fn shifted(mut self, d: f64) -> Self {
        if d != 0.0 {
            for (j, v) in self.values.iter_mut().enumerate() {
                let l = self.grid.value(j);
                *v *= Complex64::from_polar(1.0, -l * d);
            }
            self.shift += d;
            self.mean += d;
            self.lattice = None;
        }
        self
    }

    /// Largest magnitude over the outer sixteenth of the grid on either side.
    pub fn edge_magnitude(&self) -> f64 {
        let w = (self.grid.len / 16).max(1);
        let n = self.values.len();
        self.values[..w].iter().chain(self.values[n - w..].iter()).map(|v| v.norm()).fold(0.0, f64::max)
    }

    fn dist_kind(&self) -> DistKind {
        let measured = self.noise_variance > 0.0;
        match (self.kind, measured) {
            (GenKind::Quantum, false) => DistKind::Quantum,
            (GenKind::Quantum, true) => DistKind::MeasuredQuantum,
            (GenKind::Classical, false) => DistKind::Classical,
            (GenKind::Classical, true) => DistKind::MeasuredClassical,
        }
    }
}

/// Analytic mean of the quantum integrated occupation.
pub fn quantum_mean(bath: &BathParams, t: f64) -> f64 {
    bath.mean_integrated(t)
}

/// Analytic mean of the classical m, which carries the `-t/2` offset.
pub fn classical_mean(bath: &BathParams, t: f64) -> f64 {
    relax_integral(bath.theta_bath(), bath.theta_init(), bath.gamma, t) - 0.5 * t
}

struct Branch {
    prev: Complex64,
}

impl Branch {
    /// Picks the root of `alpha^2 = a2` nearest the previous value.
    fn next(&mut self, a2: Complex64, index: usize) -> Result<Complex64> {
        let r = a2.sqrt();
        let (near, far) = if (r - self.prev).norm() <= (-r - self.prev).norm() { (r, -r) } else { (-r, r) };
        let sep = (near - far).norm();
        let jump = (near - self.prev).norm();
        if sep > 0.0 && jump > 0.5 * sep {
            return Err(QndError::BranchDiscontinuity { index, ratio: jump / sep });
        }
        self.prev = near;
        Ok(near)
    }
}

/// Walks outward from `lambda = 0` in both directions.
fn track_alpha<F>(grid: &LambdaGrid, alpha0: Complex64, alpha_sq: F) -> Result<Vec<Complex64>>
where
    F: Fn(f64) -> Complex64,
{
    let z = grid.zero_index();
    let mut out = vec![Complex64::new(0.0, 0.0); grid.len];
    out[z] = alpha0;
    let mut up = Branch { prev: alpha0 };
    for j in z + 1..grid.len {
        out[j] = up.next(alpha_sq(grid.value(j)), j)?;
    }
    let mut down = Branch { prev: alpha0 };
    for j in (0..z).rev() {
        out[j] = down.next(alpha_sq(grid.value(j)), j)?;
    }
    Ok(out)
}

fn check_time(t: f64) -> Result<()> {
    require(t.is_finite() && t > 0.0, || format!("averaging time must be positive, got {t}"))
}

fn quantum_alpha_sq(l: f64, bath: &BathParams) -> Complex64 {
    let g = bath.gamma;
    let d = Complex64::new(l, -g);
    d * d - I * (4.0 * l * g * bath.n_eq)
}

fn quantum_value(l: f64, alpha: Complex64, t: f64, bath: &BathParams) -> Complex64 {
    if l == 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    let g = bath.gamma;
    if g == 0.0 {
        let p = bath.n_init / (1.0 + bath.n_init);
        return (1.0 - p) / (1.0 - p * Complex64::from_polar(1.0, -l * t));
    }
    let ig = I * g;
    let two_ln = 2.0 * l * bath.n_init;
    let m = (two_ln - (alpha - l + ig)) / (two_ln + alpha + l - ig);
    let pref = (0.5 * g * t - I * (alpha - l) * (0.5 * t)).exp();
    pref * (1.0 - m) / (1.0 - m * (-I * alpha * t).exp())
}

/// Single-point quantum generating function (branch fixed by `Im alpha < 0`).
pub fn gen_fn_quantum_at(lambda: f64, t: f64, bath: &BathParams) -> Complex64 {
    let a2 = quantum_alpha_sq(lambda, bath);
    let alpha = if bath.gamma == 0.0 { Complex64::new(lambda, 0.0) } else { -I * (-a2).sqrt() };
    quantum_value(lambda, alpha, t, bath)
}

/// Quantum generating function on a symmetric grid with continuous branch tracking.
pub fn gen_fn_quantum(grid: &LambdaGrid, t: f64, bath: &BathParams) -> Result<GeneratingSamples> {
    check_time(t)?;
    bath.validate()?;
    let alpha = if bath.gamma == 0.0 {
        grid.values().into_iter().map(|l| Complex64::new(l, 0.0)).collect()
    } else {
        track_alpha(grid, Complex64::new(0.0, -bath.gamma), |l| quantum_alpha_sq(l, bath))?
    };
    let values = (0..grid.len).map(|j| quantum_value(grid.value(j), alpha[j], t, bath)).collect();
    Ok(GeneratingSamples {
        grid: *grid,
        values,
        alpha,
        t,
        kind: GenKind::Quantum,
        mean: quantum_mean(bath, t),
        noise_variance: 0.0,
        shift: 0.0,
        lattice: (bath.gamma == 0.0).then_some(t),
    })
}

fn classical_alpha_sq(l: f64, bath: &BathParams) -> Complex64 {
    let g = bath.gamma;
    Complex64::new(-g * g, -4.0 * bath.theta_bath() * l * g)
}

fn classical_value(l: f64, alpha: Complex64, t: f64, bath: &BathParams) -> Complex64 {
    if l == 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    let g = bath.gamma;
    let theta_i = bath.theta_init();
    if g == 0.0 {
        return Complex64::from_polar(1.0, 0.5 * l * t) / (1.0 + I * (l * theta_i * t));
    }
    let ig = I * g;
    let two = 2.0 * theta_i * l;
    let m = (two - (alpha + ig)) / (two + alpha - ig);
    let pref = (0.5 * g * t - I * alpha * (0.5 * t) + I * (0.5 * l * t)).exp();
    pref * (1.0 - m) / (1.0 - m * (-I * alpha * t).exp())
}

/// Single-point classical generating function in m.
pub fn gen_fn_classical_at(lambda: f64, t: f64, bath: &BathParams) -> Complex64 {
    let a2 = classical_alpha_sq(lambda, bath);
    let alpha = -I * (-a2).sqrt();
    classical_value(lambda, alpha, t, bath)
}

/// Classical generating function in the energy variable `chi` (1/J·s).
pub fn gen_fn_classical_energy_at(chi: f64, t: f64, bath: &BathParams) -> Complex64 {
    let l = chi * HBAR * bath.omega_m;
    gen_fn_classical_at(l, t, bath) * Complex64::from_polar(1.0, -0.5 * l * t)
}

/// Classical generating function in m on a symmetric grid.
pub fn gen_fn_classical(grid: &LambdaGrid, t: f64, bath: &BathParams) -> Result<GeneratingSamples> {
    check_time(t)?;
    bath.validate()?;
    let alpha = if bath.gamma == 0.0 {
        vec![Complex64::new(0.0, 0.0); grid.len]
    } else {
        track_alpha(grid, Complex64::new(0.0, -bath.gamma), |l| classical_alpha_sq(l, bath))?
    };
    let values = (0..grid.len).map(|j| classical_value(grid.value(j), alpha[j], t, bath)).collect();
    Ok(GeneratingSamples {
        grid: *grid,
        values,
        alpha,
        t,
        kind: GenKind::Classical,
        mean: classical_mean(bath, t),
        noise_variance: 0.0,
        shift: 0.0,
        lattice: None,
    })
}

/// Density on the uniform grid `m_k = m0 + k dm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyDistribution {
    pub m0: f64,
    pub dm: f64,
    pub density: Vec<f64>,
    pub kind: DistKind,
    /// Averaging time (s).
    pub t: f64,
    pub mean: f64,
    pub variance: f64,
    pub mean_shift: f64,
    /// `|∫p dm - 1|` before renormalization.
    pub normalization_error: f64,
    /// Mass in the outer sixteenth of the window on each side.
    pub tail_mass: f64,
}

impl EnergyDistribution {
    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    pub fn m(&self, k: usize) -> f64 {
        self.m0 + k as f64 * self.dm
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.m(k)).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.dm
    }

    fn finish(mut self) -> Self {
        let (mean, var) = moments(&self.density, self.m0, self.dm);
        self.mean = mean;
        self.variance = var;
        self.tail_mass = tail_mass(&self.density, self.dm);
        self
    }

    /// Interior local maxima whose prominence exceeds `rel` times the peak.
    pub fn local_maxima(&self, rel: f64) -> Vec<f64> {
        let p = &self.density;
        let n = p.len();
        let peak = p.iter().cloned().fold(0.0, f64::max);
        let floor = rel * peak;
        let mut out = Vec::new();
        let mut k = 1;
        while k + 1 < n {
            if p[k] > p[k - 1] && p[k] > floor {
                let mut e = k;
                while e + 1 < n && p[e + 1] == p[k] {
                    e += 1;
                }
                if e + 1 < n && p[e + 1] < p[k] {
                    let mut lmin = p[k];
                    let mut i = k;
                    while i > 0 && p[i - 1] <= p[k] {
                        i -= 1;
                        lmin = lmin.min(p[i]);
                    }
                    let mut rmin = p[k];
                    let mut i = e;
                    while i + 1 < n && p[i + 1] <= p[k] {
                        i += 1;
                        rmin = rmin.min(p[i]);
                    }
                    if p[k] - lmin.max(rmin) >= floor {
                        out.push(self.m(k) + 0.5 * (e - k) as f64 * self.dm);
                    }
                }
                k = e + 1;
            } else {
                k += 1;
            }
        }
        out
    }

    /// Copy translated by `d` in m.
    pub fn shifted(&self, d: f64) -> Self {
        let mut out = self.clone();
        out.m0 += d;
        out.mean += d;
        out.mean_shift += d;
        out
    }

    /// CSV with header `m,quanta_density`.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.len() * 48);
        s.push_str("m,quanta_density\n");
        for (k, p) in self.density.iter().enumerate() {
            s.push_str(&format!("{:e},{:e}\n", self.m(k), p));
        }
        s
    }
}

fn moments(p: &[f64], m0: f64, dm: f64) -> (f64, f64) {
    let mass: f64 = p.iter().sum();
    let centre = m0 + 0.5 * (p.len() as f64) * dm;
    let mut s1 = 0.0;
    for (k, v) in p.iter().enumerate() {
        s1 += v * (m0 + k as f64 * dm - centre);
    }
    let mean_rel = s1 / mass;
    let mut s2 = 0.0;
    for (k, v) in p.iter().enumerate() {
        let d = m0 + k as f64 * dm - centre - mean_rel;
        s2 += v * d * d;
    }
    (centre + mean_rel, s2 / mass)
}

fn tail_mass(p: &[f64], dm: f64) -> f64 {
    let w = (p.len() / 16).max(1);
    let n = p.len();
    (p[..w].iter().sum::<f64>() + p[n - w..].iter().sum::<f64>()) * dm
}

/// Fourier inversion onto the conjugate m grid centred near the sample mean.
pub fn invert_gen_fn(samples: &GeneratingSamples) -> Result<EnergyDistribution> {
    invert_centered(samples, samples.mean)
}

fn invert_centered(samples: &GeneratingSamples, centre: f64) -> Result<EnergyDistribution> {
    let grid = samples.grid;
    let n = grid.len;
    let dm = grid.m_step();
    if let Some(a) = samples.lattice {
        let k = a / dm;
        require((k - k.round()).abs() <= 1e-9 * k.max(1.0) && k.round() >= 1.0, || {
            format!("lattice spacing {a} is not a multiple of the conjugate step {dm}")
        })?;
    } else {
        let edge = samples.edge_magnitude();
        if edge >= EDGE_TOLERANCE {
            return Err(QndError::InsufficientDecay { edge });
        }
    }
    let half = (n / 2) as i64;
    let kc = (centre / dm).round() as i64;
    let ni = n as i64;
    let mut buf: Vec<Complex64> = samples
        .values
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let s = ((j as i64 - half) * ((kc - half).rem_euclid(ni))).rem_euclid(ni);
            v * Complex64::from_polar(1.0, 2.0 * PI * s as f64 / n as f64)
        })
        .collect();
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    let scale = grid.step / (2.0 * PI);
    let mut density: Vec<f64> =
        buf.iter().enumerate().map(|(k, b)| if k % 2 == 0 { scale * b.re } else { -scale * b.re }).collect();
    let m0 = (kc - half) as f64 * dm;
    finish_density(&mut density, dm)?;
    let norm: f64 = density.iter().sum::<f64>() * dm;
    let norm_err = (norm - 1.0).abs();
    for v in density.iter_mut() {
        *v /= norm;
    }
    let tail = tail_mass(&density, dm);
    if tail > TAIL_TOLERANCE {
        return Err(QndError::Aliasing { tail });
    }
    let dist = EnergyDistribution {
        m0,
        dm,
        density,
        kind: samples.dist_kind(),
        t: samples.t,
        mean: 0.0,
        variance: 0.0,
        mean_shift: samples.shift,
        normalization_error: norm_err,
        tail_mass: tail,
    };
    Ok(dist.finish())
}

fn finish_density(density: &mut [f64], _dm: f64) -> Result<()> {
    let peak = density.iter().cloned().fold(0.0, f64::max);
    let low = density.iter().cloned().fold(0.0, f64::min);
    if peak <= 0.0 {
        return Err(QndError::NegativeDensity { value: low });
    }
    if low < -NEGATIVE_TOLERANCE * peak {
        return Err(QndError::NegativeDensity { value: low / peak });
    }
    for v in density.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(())
}

/// Adds zero-mean Gaussian noise of variance `S_nn t_avg` by direct convolution.
pub fn convolve_noise(dist: &EnergyDistribution, s_nn: f64, t_avg: f64) -> Result<EnergyDistribution> {
    require(s_nn >= 0.0, || format!("S_nn must be non-negative, got {s_nn}"))?;
    require((t_avg - dist.t).abs() <= 1e-12 * dist.t.abs().max(t_avg.abs()), || {
        format!("averaging time {t_avg} differs from the distribution's {}", dist.t)
    })?;
    let mut out = dist.clone();
    out.kind = dist.kind.measured();
    if s_nn == 0.0 {
        return Ok(out);
    }
    let sigma = (s_nn * t_avg).sqrt();
    let cells = sigma / dist.dm;
    if cells < 2.0 {
        return Err(QndError::GridResolution { cells });
    }
    let pad = (10.0 * cells).ceil() as usize;
    let kernel: Vec<f64> = (0..=2 * pad)
        .map(|i| {
            let x = (i as f64 - pad as f64) / cells;
            (-0.5 * x * x).exp()
        })
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let out_len = dist.len() + 2 * pad;
    let size = out_len.next_power_of_two();
    let mut a = vec![Complex64::new(0.0, 0.0); size];
    let mut b = vec![Complex64::new(0.0, 0.0); size];
    for (i, v) in dist.density.iter().enumerate() {
        a[i].re = *v;
    }
    for (i, v) in kernel.iter().enumerate() {
        b[i].re = v / ksum;
    }
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(size);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(b.iter()) {
        *x *= y;
    }
    planner.plan_fft_inverse(size).process(&mut a);
    let inv = 1.0 / size as f64;
    out.density = a[..out_len].iter().map(|c| (c.re * inv).max(0.0)).collect();
    out.m0 = dist.m0 - pad as f64 * dist.dm;
    let norm = out.total_mass();
    for v in out.density.iter_mut() {
        *v /= norm;
    }
    Ok(out.finish())
}

/// Differential entropy `-∫ p log2 p dm` (bits).
pub fn shannon_entropy(dist: &EnergyDistribution) -> f64 {
    entropy_of(&dist.density, dist.dm)
}

fn entropy_of(p: &[f64], dm: f64) -> f64 {
    -p.iter().filter(|v| **v > 0.0).map(|v| v * v.log2()).sum::<f64>() * dm
}

fn same_grid(a: &EnergyDistribution, b: &EnergyDistribution) -> bool {
    a.len() == b.len() && (a.dm - b.dm).abs() <= 1e-12 * a.dm && (a.m0 - b.m0).abs() <= 1e-9 * a.dm
}

/// Linear interpolation of both distributions onto a shared grid covering both supports.
pub fn common_grid(a: &EnergyDistribution, b: &EnergyDistribution) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    if same_grid(a, b) {
        return Ok((a.density.clone(), b.density.clone(), a.dm));
    }
    let dm = a.dm.min(b.dm);
    let lo = a.m0.min(b.m0);
    let hi = a.m(a.len() - 1).max(b.m(b.len() - 1));
    let n = ((hi - lo) / dm).ceil() as usize + 1;
    if n > 1 << 24 {
        return Err(QndError::GridMismatch(format!("common grid would need {n} points")));
    }
    let resample = |d: &EnergyDistribution| {
        let mut v: Vec<f64> = (0..n)
            .map(|k| {
                let x = (lo + k as f64 * dm - d.m0) / d.dm;
                if x < 0.0 || x > (d.len() - 1) as f64 {
                    return 0.0;
                }
                let i = (x.floor() as usize).min(d.len() - 2);
                let f = x - i as f64;
                d.density[i] * (1.0 - f) + d.density[i + 1] * f
            })
            .collect();
        let s: f64 = v.iter().sum::<f64>() * dm;
        for x in v.iter_mut() {
            *x /= s;
        }
        v
    };
    Ok((resample(a), resample(b), dm))
}

/// `I = H[(P1+P2)/2] - (H[P1] + H[P2])/2` in bits.
pub fn mutual_information(p1: &EnergyDistribution, p2: &EnergyDistribution) -> Result<f64> {
    let (a, b, dm) = common_grid(p1, p2)?;
    let mix: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| 0.5 * (x + y)).collect();
    Ok(entropy_of(&mix, dm) - 0.5 * (entropy_of(&a, dm) + entropy_of(&b, dm)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionSettings {
    /// Minimum FFT length.
    pub points: usize,
    pub max_points: usize,
}

impl Default for InversionSettings {
    fn default() -> Self {
        Self { points: 1 << 16, max_points: 1 << 22 }
    }
}

/// One generating function to invert on a shared grid.
#[derive(Debug, Clone, Copy)]
pub struct DistributionSpec {
    pub kind: GenKind,
    pub bath: BathParams,
    pub t: f64,
    pub s_nn: f64,
    pub shift: f64,
}

impl DistributionSpec {
    fn eval(&self, l: f64) -> Complex64 {
        let raw = match self.kind {
            GenKind::Quantum => gen_fn_quantum_at(l, self.t, &self.bath),
            GenKind::Classical => gen_fn_classical_at(l, self.t, &self.bath),
        };
        raw * (-0.5 * self.s_nn * self.t * l * l).exp()
    }

    fn mean(&self) -> f64 {
        self.shift
            + match self.kind {
                GenKind::Quantum => quantum_mean(&self.bath, self.t),
                GenKind::Classical => classical_mean(&self.bath, self.t),
            }
    }

    fn lattice(&self) -> bool {
        self.kind == GenKind::Quantum && self.bath.gamma == 0.0 && self.s_nn == 0.0 && self.shift == 0.0
    }

    /// Standard deviation from the curvature of `ln P~` at the origin.
    fn std_estimate(&self) -> f64 {
        let b = &self.bath;
        let heat = b.n_eq.max(b.theta_bath()) * (b.gamma * self.t).min(1.0);
        let scale = self.t * (1.0 + b.n_init.max(b.theta_init()) + heat) + (self.s_nn * self.t).sqrt();
        let mut h = 1e-3 / scale;
        let mut sd = scale;
        for _ in 0..12 {
            let lp = self.eval(h).ln();
            let lm = self.eval(-h).ln();
            let curv = -(lp.re + lm.re);
            if !curv.is_finite() || curv < 1e-10 {
                h *= 10.0;
                continue;
            }
            let next = (curv / (h * h)).sqrt();
            let done = (next - sd).abs() <= 0.01 * sd;
            sd = next;
            h = 1e-3 / sd;
            if done {
                break;
            }
        }
        sd
    }

    pub fn samples(&self, grid: &LambdaGrid) -> Result<GeneratingSamples> {
        let s = match self.kind {
            GenKind::Quantum => gen_fn_quantum(grid, self.t, &self.bath)?,
            GenKind::Classical => gen_fn_classical(grid, self.t, &self.bath)?,
        };
        Ok(s.with_noise(self.s_nn).shifted(self.shift))
    }
}

fn decay_extent(spec: &DistributionSpec, sd: f64) -> f64 {
    let mut lmax = 4.0 / sd;
    for _ in 0..200 {
        let ok = [0.5, 0.625, 0.75, 0.875, 1.0, 1.25, 1.5].iter().all(|f| {
            spec.eval(f * lmax).norm() < 0.1 * EDGE_TOLERANCE && spec.eval(-f * lmax).norm() < 0.1 * EDGE_TOLERANCE
        });
        if ok {
            return lmax;
        }
        lmax *= 1.5;
    }
    f64::INFINITY
}

/// Inverts several generating functions on one shared grid, sized adaptively.
pub fn invert_common(specs: &[DistributionSpec], settings: &InversionSettings) -> Result<Vec<EnergyDistribution>> {
    require(!specs.is_empty(), || "no distributions requested".into())?;
    for s in specs {
        check_time(s.t)?;
        s.bath.validate()?;
        require(s.s_nn >= 0.0, || format!("S_nn must be non-negative, got {}", s.s_nn))?;
    }
    let centre = specs[0].mean();
    let sds: Vec<f64> = specs.iter().map(|s| s.std_estimate()).collect();
    let mut span = 0.0f64;
    for (s, sd) in specs.iter().zip(sds.iter()) {
        span = span.max(2.0 * ((s.mean() - centre).abs() + 40.0 * sd + 4.0 * s.t));
    }
    let lattice = specs.iter().all(|s| s.lattice());
    let (mut dm, mut n) = if lattice {
        let t = specs[0].t;
        require(specs.iter().all(|s| s.t == t), || "lattice distributions need a common time".into())?;
        (t, (span / t).ceil().max(settings.points as f64) as usize)
    } else {
        let mut lmax: f64 = 0.0;
        for (s, sd) in specs.iter().zip(sds.iter()) {
            lmax = lmax.max(decay_extent(s, *sd));
        }
        let dm = PI / lmax;
        (dm, (span / dm).ceil().max(settings.points as f64) as usize)
    };
    loop {
        n = n.next_power_of_two();
        if n > settings.max_points || !dm.is_finite() || dm <= 0.0 {
            let edge = specs.iter().map(|s| s.eval(PI / dm.max(f64::MIN_POSITIVE)).norm()).fold(0.0, f64::max);
            return Err(QndError::InsufficientDecay { edge: edge.max(EDGE_TOLERANCE) });
        }
        let grid = LambdaGrid::new(2.0 * PI / (n as f64 * dm), n)?;
        let mut out = Vec::with_capacity(specs.len());
        let mut retry = None;
        for s in specs {
            match s.samples(&grid).and_then(|smp| invert_centered(&smp, centre)) {
                Ok(d) => out.push(d),
                Err(QndError::Aliasing { .. }) => {
                    retry = Some(false);
                    break;
                }
                Err(QndError::InsufficientDecay { .. }) | Err(QndError::NegativeDensity { .. }) if !lattice => {
                    retry = Some(true);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        match retry {
            None => return Ok(out),
            Some(finer) => {
                if finer {
                    dm *= 0.5;
                }
                n *= 2;
            }
        }
    }
}

/// Convenience wrapper for a single distribution.
pub fn distribution(spec: &DistributionSpec, settings: &InversionSettings) -> Result<EnergyDistribution> {
    Ok(invert_common(std::slice::from_ref(spec), settings)?.remove(0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistinguishabilityReport {
    #[serde(rename = "S_nn")]
    pub s_nn: f64,
    pub t_avg: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "I_bits")]
    pub i_bits: f64,
    #[serde(rename = "H_q_bits")]
    pub h_q_bits: f64,
    #[serde(rename = "H_cl_bits")]
    pub h_cl_bits: f64,
    pub mean_shift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredPair {
    pub quantum: EnergyDistribution,
    pub classical: EnergyDistribution,
    pub report: DistinguishabilityReport,
}

/// Measured quantum and classical distributions at `t_avg`, the quantum one
/// translated onto the classical mean.
pub fn measured_pair(
    bath: &BathParams,
    noise: &MeasurementNoise,
    t_avg: f64,
    settings: &InversionSettings,
) -> Result<MeasuredPair> {
    let shift = classical_mean(bath, t_avg) - quantum_mean(bath, t_avg);
    let specs = [
        DistributionSpec { kind: GenKind::Classical, bath: *bath, t: t_avg, s_nn: noise.s_nn, shift: 0.0 },
        DistributionSpec { kind: GenKind::Quantum, bath: *bath, t: t_avg, s_nn: noise.s_nn, shift },
    ];
    let mut d = invert_common(&specs, settings)?;
    let quantum = d.pop().expect("two distributions");
    let classical = d.pop().expect("two distributions");
    let report = DistinguishabilityReport {
        s_nn: noise.s_nn,
        t_avg,
        r: figure_of_merit_r(bath, noise),
        i_bits: mutual_information(&quantum, &classical)?,
        h_q_bits: shannon_entropy(&quantum),
        h_cl_bits: shannon_entropy(&classical),
        mean_shift: shift,
    };
    Ok(MeasuredPair { quantum, classical, report })
}

pub fn compare_quantum_classical(
    bath: &BathParams,
    noise: &MeasurementNoise,
    t_avg: f64,
) -> Result<DistinguishabilityReport> {
    Ok(measured_pair(bath, noise, t_avg, &InversionSettings::default())?.report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragingOptimum {
    pub t_opt: f64,
    pub i_max: f64,
    /// Optimum sits at an end of the search range.
    pub at_boundary: bool,
    /// Coarse scan `(t_avg, I)` used to bracket the optimum.
    pub scan: Vec<(f64, f64)>,
}

/// Maximizes `I(t_avg)` over `[1e-3 tau, 1e2 tau]` on a log scale to 1% in `t_avg`.
pub fn optimize_averaging_time(
    bath: &BathParams,
    noise: &MeasurementNoise,
    settings: &InversionSettings,
) -> Result<AveragingOptimum> {
    let tau = bath.tau();
    require(tau.is_finite() && tau > 0.0, || "ground-state lifetime must be finite".into())?;
    let (lo, hi) = ((1e-3 * tau).ln(), (1e2 * tau).ln());
    let steps = 20;
    let ts: Vec<f64> = (0..=steps).map(|i| lo + (hi - lo) * i as f64 / steps as f64).collect();
    let info = |lt: f64| measured_pair(bath, noise, lt.exp(), settings).map(|p| p.report.i_bits);
    let vals: Vec<f64> = ts.par_iter().map(|lt| info(*lt)).collect::<Result<_>>()?;
    let best = vals.iter().enumerate().fold(0, |b, (i, v)| if *v > vals[b] { i } else { b });
    let scan: Vec<(f64, f64)> = ts.iter().zip(vals.iter()).map(|(lt, v)| (lt.exp(), *v)).collect();
    let a = ts[best.saturating_sub(1)];
    let b = ts[(best + 1).min(steps)];
    let mut err = None;
    let (lt, v) = golden_section_max(
        |lt| match info(lt) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                f64::NEG_INFINITY
            }
        },
        a,
        b,
        0.01f64.ln_1p(),
        200,
    );
    if let Some(e) = err {
        return Err(e);
    }
    let (t_opt, i_max) = if v >= vals[best] { (lt.exp(), v) } else { (ts[best].exp(), vals[best]) };
    let at_boundary = best == 0 || best == steps;
    Ok(AveragingOptimum { t_opt, i_max, at_boundary, scan })
}

/// Piecewise-constant occupation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpTrace {
    /// `times[0] = 0`, then the event times.
    pub times: Vec<f64>,
    pub occupations: Vec<u64>,
    pub duration: f64,
    pub seed: u64,
    pub bath: BathParams,
}

impl JumpTrace {
    pub fn occupation_at(&self, t: f64) -> u64 {
        let i = self.times.partition_point(|x| *x <= t);
        self.occupations[i.saturating_sub(1)]
    }

    pub fn events(&self) -> usize {
        self.times.len() - 1
    }

    /// CSV `t,n` with one row per segment start.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,n\n");
        for (t, n) in self.times.iter().zip(self.occupations.iter()) {
            s.push_str(&format!("{t:e},{n}\n"));
        }
        s
    }
}

/// Default event cap for a single trace.
pub const MAX_EVENTS: usize = 50_000_000;

/// Sample from the thermal law with mean `n`.
fn thermal_sample<R: Rng>(rng: &mut R, n: f64) -> u64 {
    if n <= 0.0 {
        return 0;
    }
    let q = n / (1.0 + n);
    let u: f64 = rng.gen();
    ((1.0 - u).ln() / q.ln()).floor() as u64
}

/// Birth–death simulation from an initial occupation drawn from the thermal law at `n_init`.
pub fn simulate_jump_trace(bath: &BathParams, duration: f64, seed: u64) -> Result<JumpTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n0 = thermal_sample(&mut rng, bath.n_init);
    simulate_from(bath, n0, duration, seed, &mut rng, MAX_EVENTS)
}

/// Birth–death simulation from a fixed initial occupation.
pub fn simulate_jump_trace_from(
    bath: &BathParams,
    n0: u64,
    duration: f64,
    seed: u64,
    max_events: usize,
) -> Result<JumpTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_from(bath, n0, duration, seed, &mut rng, max_events)
}

/// Independent trajectories; trajectory `i` uses stream `i` of the seeded generator.
pub fn simulate_jump_ensemble(
    bath: &BathParams,
    n0: u64,
    duration: f64,
    seed: u64,
    count: usize,
) -> Result<Vec<JumpTrace>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            simulate_from(bath, n0, duration, seed, &mut rng, MAX_EVENTS)
        })
        .collect()
}

fn simulate_from<R: Rng>(
    bath: &BathParams,
    n0: u64,
    duration: f64,
    seed: u64,
    rng: &mut R,
    max_events: usize,
) -> Result<JumpTrace> {
    bath.validate()?;
    require(duration.is_finite() && duration > 0.0, || format!("duration must be positive, got {duration}"))?;
    let mut times = vec![0.0];
    let mut occ = vec![n0];
    let mut n = n0;
    let mut t = 0.0;
    loop {
        let up = rate_up(n, bath.gamma, bath.n_eq);
        let down = rate_down(n, bath.gamma, bath.n_eq);
        let total = up + down;
        if total <= 0.0 {
            break;
        }
        let wait: f64 = rng.sample::<f64, _>(Exp1) / total;
        let next = t + wait;
        if next >= duration {
            break;
        }
        if next <= t {
            continue;
        }
        t = next;
        if times.len() > max_events {
            return Err(QndError::EventCap { cap: max_events });
        }
        n = if rng.gen::<f64>() * total < up { n + 1 } else { n - 1 };
        times.push(t);
        occ.push(n);
    }
    Ok(JumpTrace { times, occupations: occ, duration, seed, bath: *bath })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedTrace {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub dt: f64,
    pub t_avg: f64,
    /// Standard deviation of the Gaussian smoothing kernel (s).
    pub kernel_sigma: f64,
}

impl AveragedTrace {
    /// CSV `t,n_avg`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,n_avg\n");
        for (t, v) in self.times.iter().zip(self.values.iter()) {
            s.push_str(&format!("{t:e},{v:e}\n"));
        }
        s
    }
}

/// Discrete normalized Gaussian kernel whose white-noise gain `dt sum K^2` equals `1/t_avg`.
pub fn averaging_kernel(t_avg: f64, dt: f64) -> Result<(Vec<f64>, f64)> {
    require(t_avg > 0.0 && dt > 0.0, || "averaging time and step must be positive".into())?;
    let limit = t_avg / 10.0;
    if dt > limit * (1.0 + 1e-12) {
        return Err(QndError::SamplingRate { dt, limit });
    }
    let build = |w: f64| {
        let half = (8.0 * w / dt).ceil() as usize;
        let g: Vec<f64> = (0..=2 * half)
            .map(|i| {
                let x = (i as f64 - half as f64) * dt / w;
                (-0.5 * x * x).exp()
            })
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / (s * dt)).collect::<Vec<f64>>()
    };
    let gain = |w: f64| build(w).iter().map(|k| k * k).sum::<f64>() * dt - 1.0 / t_avg;
    let w0 = t_avg / (2.0 * PI.sqrt());
    let w = bisect(gain, 0.5 * w0, 2.0 * w0, 1e-14 * w0).unwrap_or(w0);
    Ok((build(w), w))
}

/// Adds white noise of density `S_nn` to `n(t)` and applies the sliding Gaussian average.
pub fn sliding_average_trace(trace: &JumpTrace, s_nn: f64, t_avg: f64, dt: f64, seed: u64) -> Result<AveragedTrace> {
    require(s_nn >= 0.0, || format!("S_nn must be non-negative, got {s_nn}"))?;
    let (kernel, w) = averaging_kernel(t_avg, dt)?;
    let half = kernel.len() / 2;
    let n_out = (trace.duration / dt).floor() as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = (s_nn / dt).sqrt();
    let total = n_out + 2 * half;
    let mut seg = 0usize;
    let raw: Vec<f64> = (0..total)
        .map(|i| {
            let t = (i as f64 - half as f64) * dt;
            while seg + 1 < trace.times.len() && trace.times[seg + 1] <= t {
                seg += 1;
            }
            let noise: f64 = if amp > 0.0 { amp * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            trace.occupations[seg] as f64 + noise
        })
        .collect();
    let values: Vec<f64> = (0..n_out)
        .map(|i| kernel.iter().zip(raw[i..i + kernel.len()].iter()).map(|(k, x)| k * x).sum::<f64>() * dt)
        .collect();
    let times = (0..n_out).map(|i| i as f64 * dt).collect();
    Ok(AveragedTrace { times, values, dt, t_avg, kernel_sigma: w })
}

/// Counting-field birth–death master equation integrated by RK4; returns `sum_n p_n(t)`.
pub fn master_equation_oracle(bath: &BathParams, t: f64, lambda: f64, truncation: usize) -> Result<Complex64> {
    bath.validate()?;
    check_time(t)?;
    require(truncation >= 2, || format!("truncation must be at least 2, got {truncation}"))?;
    let n = truncation + 1;
    let q = bath.n_init / (1.0 + bath.n_init);
    let mut p: Vec<Complex64> = (0..n).map(|k| Complex64::new((1.0 - q) * q.powi(k as i32), 0.0)).collect();
    let up: Vec<f64> = (0..n).map(|k| if k + 1 < n { rate_up(k as u64, bath.gamma, bath.n_eq) } else { 0.0 }).collect();
    let down: Vec<f64> = (0..n).map(|k| rate_down(k as u64, bath.gamma, bath.n_eq)).collect();
    let deriv = |p: &[Complex64], out: &mut [Complex64]| {
        for k in 0..n {
            let mut d = -(up[k] + down[k]) * p[k] - I * (lambda * k as f64) * p[k];
            if k > 0 {
                d += up[k - 1] * p[k - 1];
            }
            if k + 1 < n {
                d += down[k + 1] * p[k + 1];
            }
            out[k] = d;
        }
    };
    let fastest = (0..n).map(|k| up[k] + down[k] + (lambda * k as f64).abs()).fold(0.0, f64::max);
    let steps = ((t * fastest / 0.02).ceil() as usize).max(100);
    let h = t / steps as f64;
    let zero = Complex64::new(0.0, 0.0);
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![zero; n], vec![zero; n], vec![zero; n], vec![zero; n], vec![zero; n]);
    for _ in 0..steps {
        deriv(&p, &mut k1);
        for i in 0..n {
            tmp[i] = p[i] + 0.5 * h * k1[i];
        }
        deriv(&tmp, &mut k2);
        for i in 0..n {
            tmp[i] = p[i] + 0.5 * h * k2[i];
        }
        deriv(&tmp, &mut k3);
        for i in 0..n {
            tmp[i] = p[i] + h * k3[i];
        }
        deriv(&tmp, &mut k4);
        for i in 0..n {
            p[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    let top = p[n - 1].norm();
    if top > 1e-12 {
        return Err(QndError::Truncation { top });
    }
    Ok(p.iter().sum())
}
