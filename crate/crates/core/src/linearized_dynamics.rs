//! Linearized radiation-pressure dynamics around a steady state.
//!
//! Conventions: `delta x(t) = x_+ e^{i w t} + c.c.` maps to light response
//! `chi_alpha(w)`; the self-energy enters the mechanical susceptibility as
//! `chi^{-1}(w) = w_M^2 - w^2 + i w Gamma_M + Sigma(w)`. Positive `Gamma_opt`
//! is cooling.

use nalgebra::{Matrix2, Vector2};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{golden_section_max, linspace, real_cubic_roots};

const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("singular response: {0}")]
    Singular(String),
}

pub type Result<T> = std::result::Result<T, DynamicsError>;

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(DynamicsError::InvalidParameter(msg()))
    }
}

/// `P = -(w'/w_L) E_res / m`.
pub fn radiation_pressure_constant(omega_prime: f64, omega_laser: f64, energy: f64, mass: f64) -> f64 {
    -(omega_prime / omega_laser) * energy / mass
}

/// Single cavity mode with a position-dependent frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardParams {
    pub detuning: f64,
    pub omega_prime: f64,
    pub kappa: f64,
    pub omega_m: f64,
    pub gamma_m: f64,
    pub pressure: f64,
    pub x0: f64,
}

impl StandardParams {
    pub fn validate(&self) -> Result<()> {
        require(self.kappa > 0.0, || format!("kappa must be > 0, got {}", self.kappa))?;
        require(self.omega_m > 0.0, || format!("omega_m must be > 0, got {}", self.omega_m))?;
        require(self.gamma_m >= 0.0, || format!("gamma_m must be >= 0, got {}", self.gamma_m))?;
        require([self.detuning, self.omega_prime, self.pressure, self.x0].iter().all(|v| v.is_finite()), || {
            "parameters must be finite".into()
        })
    }

    /// Effective detuning `Delta - w' x`.
    pub fn effective_detuning(&self, x: f64) -> f64 {
        self.detuning - self.omega_prime * x
    }

    /// Intracavity amplitude at position `x` for input scaling `drive`.
    pub fn amplitude_at(&self, x: f64, drive: f64) -> Complex64 {
        let half = 0.5 * self.kappa;
        drive * half / Complex64::new(half, -self.effective_detuning(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardSteadyState {
    pub x_bar: f64,
    pub alpha: Complex64,
    /// `w_M^2 + Re Sigma(0)`.
    pub stiffness: f64,
    pub stable: bool,
}

/// All steady states for input amplitude scaling `drive` (1 gives
/// `alpha = 1` on resonance), ordered by `x_bar`.
pub fn steady_state_standard(p: &StandardParams, drive: f64) -> Result<Vec<StandardSteadyState>> {
    p.validate()?;
    require(drive.is_finite(), || "drive must be finite".into())?;
    let w2 = p.omega_m * p.omega_m;
    let force = p.pressure * drive * drive;
    let mut xs = if p.omega_prime == 0.0 {
        vec![p.x0 + force * p.amplitude_at(p.x0, 1.0).norm_sqr() / w2]
    } else {
        // v = (Delta - w' x)/(kappa/2) solves v^3 - d v^2 + v - (d - q) = 0.
        let half = 0.5 * p.kappa;
        let d = p.effective_detuning(p.x0) / half;
        let q = force * p.omega_prime / (w2 * half);
        real_cubic_roots(-d, 1.0, q - d).into_iter().map(|v| (p.detuning - half * v) / p.omega_prime).collect()
    };
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.into_iter()
        .map(|x_bar| {
            let alpha = p.amplitude_at(x_bar, drive);
            let mut ss = StandardSteadyState { x_bar, alpha, stiffness: 0.0, stable: true };
            let sigma0 = self_energy_standard(p, &ss, 0.0)?.sigma;
            ss.stiffness = w2 + sigma0.re;
            ss.stable = ss.stiffness > 0.0;
            Ok(ss)
        })
        .collect()
}

/// `chi_alpha(w) = alpha / ((Delta - w + i kappa/2)/w' - x)`, written in a
/// form that stays finite as `w' -> 0`.
pub fn light_susceptibility_standard(p: &StandardParams, ss: &StandardSteadyState, omega: f64) -> Result<Complex64> {
    let den = Complex64::new(p.effective_detuning(ss.x_bar) - omega, 0.5 * p.kappa);
    if den.norm() == 0.0 {
        return Err(DynamicsError::Singular("light susceptibility denominator vanishes".into()));
    }
    Ok(p.omega_prime * ss.alpha / den)
}

/// Self-energy at probe frequency `omega` together with the damping and
/// spring shift it implies (`Im Sigma / w_M`, `Re Sigma / (2 w_M)`; these are
/// the physical rates when `omega == w_M`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfEnergySample {
    pub omega: f64,
    pub sigma: Complex64,
    pub gamma_opt: f64,
    pub delta_omega_m: f64,
}

impl SelfEnergySample {
    fn new(omega: f64, sigma: Complex64, omega_m: f64) -> Self {
        Self { omega, sigma, gamma_opt: sigma.im / omega_m, delta_omega_m: sigma.re / (2.0 * omega_m) }
    }
}

pub fn self_energy_standard(p: &StandardParams, ss: &StandardSteadyState, omega: f64) -> Result<SelfEnergySample> {
    let plus = light_susceptibility_standard(p, ss, omega)?;
    let minus = light_susceptibility_standard(p, ss, -omega)?;
    let sigma = -p.pressure * (ss.alpha.conj() * plus + ss.alpha * minus.conj());
    Ok(SelfEnergySample::new(omega, sigma, p.omega_m))
}

/// Optical damping from the Stokes / anti-Stokes Lorentzians.
pub fn gamma_opt_closed_form(p: &StandardParams, ss: &StandardSteadyState) -> f64 {
    let h = 0.5 * p.kappa;
    let shift = p.omega_prime * ss.x_bar - p.detuning;
    let stokes = 1.0 / ((p.omega_m + shift).powi(2) + h * h);
    let anti = 1.0 / ((-p.omega_m + shift).powi(2) + h * h);
    p.omega_prime * p.pressure / p.omega_m * ss.alpha.norm_sqr() * h * (stokes - anti)
}

/// Two half-cavity modes coupled by tunnelling through the membrane, driven
/// from the left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoModeParams {
    pub coupling: f64,
    pub omega_prime: f64,
    pub kappa_l: f64,
    pub kappa_r: f64,
    pub detuning: f64,
    pub omega_m: f64,
    pub gamma_m: f64,
    pub pressure: f64,
}

impl TwoModeParams {
    pub fn validate(&self) -> Result<()> {
        require(self.coupling >= 0.0, || format!("g must be >= 0, got {}", self.coupling))?;
        require(self.kappa_l > 0.0 && self.kappa_r > 0.0, || {
            format!("kappa_L, kappa_R must be > 0, got {}, {}", self.kappa_l, self.kappa_r)
        })?;
        require(self.omega_m > 0.0, || format!("omega_m must be > 0, got {}", self.omega_m))?;
        require(self.gamma_m >= 0.0, || format!("gamma_m must be >= 0, got {}", self.gamma_m))?;
        require([self.omega_prime, self.detuning, self.pressure].iter().all(|v| v.is_finite()), || {
            "parameters must be finite".into()
        })
    }

    pub fn with_detuning(&self, detuning: f64) -> Self {
        Self { detuning, ..*self }
    }
}

/// Tunnel coupling `g = (c/L) sqrt(2 (1 - r_d))` and frequency pull
/// `w' = -w_L / (L/2)` of a membrane with reflectivity `r_d` in a cavity of
/// full length `length`.
pub fn two_mode_from_membrane(r_d: f64, length: f64, omega_laser: f64, speed_of_light: f64) -> (f64, f64) {
    (speed_of_light / length * (2.0 * (1.0 - r_d)).max(0.0).sqrt(), -omega_laser / (0.5 * length))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoModeState {
    pub x_bar: f64,
    pub alpha_l: Complex64,
    pub alpha_r: Complex64,
}

impl TwoModeState {
    /// Radiation force per unit `P`, `|a_L|^2 - |a_R|^2`.
    pub fn static_force(&self) -> f64 {
        self.alpha_l.norm_sqr() - self.alpha_r.norm_sqr()
    }

    /// Amplitudes of the symmetric and antisymmetric combinations.
    pub fn eigenmode_amplitudes(&self) -> (Complex64, Complex64) {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        ((self.alpha_l + self.alpha_r) * s, (self.alpha_l - self.alpha_r) * s)
    }
}

pub fn two_mode_matrix(p: &TwoModeParams, x: f64) -> Matrix2<Complex64> {
    let shift = p.omega_prime * x;
    Matrix2::new(
        Complex64::new(-0.5 * p.kappa_l, p.detuning - shift),
        -I * p.coupling,
        -I * p.coupling,
        Complex64::new(-0.5 * p.kappa_r, p.detuning + shift),
    )
}

pub fn two_mode_state(p: &TwoModeParams, x_bar: f64) -> Result<TwoModeState> {
    p.validate()?;
    let m = two_mode_matrix(p, x_bar);
    let inv = m.try_inverse().ok_or_else(|| DynamicsError::Singular("coupling matrix is not invertible".into()))?;
    let alpha = inv * Vector2::new(Complex64::new(-0.5 * p.kappa_l, 0.0), Complex64::new(0.0, 0.0));
    Ok(TwoModeState { x_bar, alpha_l: alpha[0], alpha_r: alpha[1] })
}

/// Closed-cavity eigenfrequencies `(+sqrt(g^2 + (w'x)^2), -sqrt(...))`.
pub fn eigenfrequencies_two_mode(p: &TwoModeParams, x: f64) -> (f64, f64) {
    let w = p.coupling.hypot(p.omega_prime * x);
    (w, -w)
}

/// `chi_vec(w) = -w' [i w - M]^{-1} i sigma_z alpha`.
pub fn susceptibility_vector_two_mode(
    p: &TwoModeParams,
    st: &TwoModeState,
    omega: f64,
) -> Result<(Complex64, Complex64)> {
    let m = two_mode_matrix(p, st.x_bar);
    let a = Matrix2::from_diagonal_element(I * omega) - m;
    let inv = a
        .try_inverse()
        .ok_or_else(|| DynamicsError::Singular(format!("probe frequency {omega} hits an undamped eigenmode")))?;
    let src = Vector2::new(I * st.alpha_l, -I * st.alpha_r);
    let chi = inv * src * Complex64::new(-p.omega_prime, 0.0);
    Ok((chi[0], chi[1]))
}

pub fn self_energy_two_mode(p: &TwoModeParams, st: &TwoModeState, omega: f64) -> Result<SelfEnergySample> {
    let (lp, rp) = susceptibility_vector_two_mode(p, st, omega)?;
    let (lm, rm) = susceptibility_vector_two_mode(p, st, -omega)?;
    let left = st.alpha_l.conj() * lp + st.alpha_l * lm.conj();
    let right = st.alpha_r.conj() * rp + st.alpha_r * rm.conj();
    Ok(SelfEnergySample::new(omega, p.pressure * (right - left), p.omega_m))
}

/// `Gamma_opt` of the two-mode model with the membrane held at `x_bar`.
pub fn gamma_opt_two_mode(p: &TwoModeParams, x_bar: f64) -> Result<f64> {
    let st = two_mode_state(p, x_bar)?;
    Ok(self_energy_two_mode(p, &st, p.omega_m)?.gamma_opt)
}

/// Dimensionless description of a cooling map: rates in units of `kappa`,
/// positions as `x |w'| / kappa`, detunings as `Delta / kappa`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapParams {
    pub omega_m_over_kappa: f64,
    pub g_over_kappa: f64,
    /// `kappa_R / kappa_L`.
    pub kappa_ratio: f64,
    /// Intrinsic damping `Gamma_M / kappa`; enables the instability flag.
    pub gamma_m_over_kappa: Option<f64>,
}

impl MapParams {
    pub fn new(omega_m_over_kappa: f64, g_over_kappa: f64) -> Self {
        Self { omega_m_over_kappa, g_over_kappa, kappa_ratio: 1.0, gamma_m_over_kappa: None }
    }

    pub fn validate(&self) -> Result<()> {
        require(self.omega_m_over_kappa > 0.0, || {
            format!("omega_m/kappa must be > 0, got {}", self.omega_m_over_kappa)
        })?;
        require(self.g_over_kappa >= 0.0, || format!("g/kappa must be >= 0, got {}", self.g_over_kappa))?;
        require(self.kappa_ratio > 0.0, || format!("kappa ratio must be > 0, got {}", self.kappa_ratio))?;
        if let Some(g) = self.gamma_m_over_kappa {
            require(g >= 0.0, || format!("Gamma_M/kappa must be >= 0, got {g}"))?;
        }
        Ok(())
    }

    /// Scaled units: `kappa_L = 1`, `w' = -1`, and `P > 0` chosen so that the
    /// best single-mode cooling rate at this `w_M` equals `kappa`.
    pub fn scaled_params(&self) -> TwoModeParams {
        let raw = standard_rate_scaled(self.omega_m_over_kappa, -standard_argmax_scaled(self.omega_m_over_kappa));
        TwoModeParams {
            coupling: self.g_over_kappa,
            omega_prime: -1.0,
            kappa_l: 1.0,
            kappa_r: self.kappa_ratio,
            detuning: 0.0,
            omega_m: self.omega_m_over_kappa,
            gamma_m: self.gamma_m_over_kappa.unwrap_or(0.0),
            pressure: 1.0 / raw,
        }
    }

    /// Normalized `Gamma_opt / kappa` at one map node.
    pub fn rate(&self, x_scaled: f64, delta_scaled: f64) -> Result<f64> {
        self.model()?.rate(x_scaled, delta_scaled)
    }

    /// Scaled model with the normalization solved once, for repeated use.
    pub fn model(&self) -> Result<MapModel> {
        self.validate()?;
        Ok(MapModel { base: self.scaled_params() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapModel {
    base: TwoModeParams,
}

impl MapModel {
    pub fn params(&self) -> &TwoModeParams {
        &self.base
    }

    pub fn rate(&self, x_scaled: f64, delta_scaled: f64) -> Result<f64> {
        gamma_opt_two_mode(&self.base.with_detuning(delta_scaled), x_scaled)
    }
}

/// Single-mode rate in scaled units (`kappa = 1`, `w' = -1`, `P = 1`, unit
/// drive) at effective detuning `d`.
fn standard_rate_scaled(omega_m: f64, d: f64) -> f64 {
    let p =
        StandardParams { detuning: d, omega_prime: -1.0, kappa: 1.0, omega_m, gamma_m: 0.0, pressure: 1.0, x0: 0.0 };
    let ss = StandardSteadyState { x_bar: 0.0, alpha: p.amplitude_at(0.0, 1.0), stiffness: 0.0, stable: true };
    gamma_opt_closed_form(&p, &ss)
}

/// `|Delta|/kappa` of maximal single-mode cooling at fixed drive.
fn standard_argmax_scaled(omega_m: f64) -> f64 {
    let hi = 2.0 * omega_m + 5.0;
    let grid = linspace(0.0, hi, 4001);
    let step = grid[1] - grid[0];
    let f = |u: f64| standard_rate_scaled(omega_m, -u);
    let best = grid.iter().copied().max_by(|a, b| f(*a).partial_cmp(&f(*b)).unwrap()).unwrap_or(0.0);
    golden_section_max(f, (best - step).max(0.0), best + step, 1e-12, 200).0
}

/// Detuning (negative, in units of `kappa`) maximizing the single-mode
/// cooling rate at fixed input power.
pub fn standard_optimal_detuning(omega_m_over_kappa: f64) -> f64 {
    -standard_argmax_scaled(omega_m_over_kappa)
}

/// Normalized two-mode `Gamma_opt / kappa` over a rectangular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoolingMap {
    pub params: MapParams,
    pub x_scaled: Vec<f64>,
    pub delta_scaled: Vec<f64>,
    /// Row-major, `gamma[ix * delta_scaled.len() + id]`; NaN where a node failed.
    pub gamma: Vec<f64>,
    /// `Gamma_opt + Gamma_M < 0`; all false when `Gamma_M` is not supplied.
    pub unstable: Vec<bool>,
    pub failed: usize,
}

impl CoolingMap {
    pub fn at(&self, ix: usize, id: usize) -> f64 {
        self.gamma[ix * self.delta_scaled.len() + id]
    }

    pub fn max_abs(&self) -> f64 {
        self.gamma.iter().filter(|v| v.is_finite()).fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Long-form CSV `x_scaled,delta_scaled,gamma_opt`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x_scaled,delta_scaled,gamma_opt\n");
        for (ix, x) in self.x_scaled.iter().enumerate() {
            for (id, d) in self.delta_scaled.iter().enumerate() {
                out.push_str(&format!("{x:e},{d:e},{:e}\n", self.at(ix, id)));
            }
        }
        out
    }
}

pub fn cooling_map(params: &MapParams, x_scaled: &[f64], delta_scaled: &[f64]) -> Result<CoolingMap> {
    let model = params.model()?;
    let nd = delta_scaled.len();
    let gamma: Vec<f64> = (0..x_scaled.len() * nd)
        .into_par_iter()
        .map(|i| model.rate(x_scaled[i / nd], delta_scaled[i % nd]).unwrap_or(f64::NAN))
        .collect();
    let unstable = match params.gamma_m_over_kappa {
        Some(gm) => gamma.iter().map(|g| g + gm < 0.0).collect(),
        None => vec![false; gamma.len()],
    };
    let failed = gamma.iter().filter(|g| g.is_nan()).count();
    Ok(CoolingMap {
        params: *params,
        x_scaled: x_scaled.to_vec(),
        delta_scaled: delta_scaled.to_vec(),
        gamma,
        unstable,
        failed,
    })
}

/// `Gamma_opt(Delta)` at fixed positions, evaluated directly (not
/// interpolated from a map).
pub fn cross_sections(params: &MapParams, x_values: &[f64], delta_scaled: &[f64]) -> Result<Vec<Vec<f64>>> {
    let model = params.model()?;
    x_values.par_iter().map(|&x| delta_scaled.iter().map(|&d| model.rate(x, d)).collect()).collect()
}

/// Largest cooling rate over detuning at fixed position, found on a grid
/// then refined.
pub fn max_cooling_over_detuning(params: &MapParams, x_scaled: f64, half_width: f64) -> Result<(f64, f64)> {
    let model = params.model()?;
    let grid = linspace(-half_width, half_width, 2001);
    let f = |d: f64| model.rate(x_scaled, d).unwrap_or(f64::NEG_INFINITY);
    let vals: Vec<f64> = grid.par_iter().map(|&d| f(d)).collect();
    let (i, _) = vals
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .ok_or_else(|| DynamicsError::InvalidParameter("empty detuning grid".into()))?;
    let step = grid[1] - grid[0];
    let (d, v) = golden_section_max(f, grid[i] - step, grid[i] + step, 1e-10, 200);
    Ok((d, v))
}
