//! One-dimensional model of a Fabry-Perot cavity with a thin dielectric
//! membrane between the end mirrors.
//!
//! Wavenumbers are handled as a carrier plus a small offset. Round-trip phases
//! in a centimetre-scale cavity are ~10^5 rad, so evaluating `k * L` directly
//! would leave only ~1e-11 rad of phase resolution; a resonance of finesse 10^6
//! is ~6e-6 rad wide. All line-shape work (peak search, half-maximum crossings)
//! is done in the offset coordinate, where resolution is not an issue.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use nalgebra::{Matrix6, Vector6};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::SPEED_OF_LIGHT;
use crate::numeric::{bisect, golden_section_max, linspace};

const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("field equations are singular (|det| = {0:e})")]
    Singular(f64),
    #[error("|r_d| cos(delta) = {0} lies outside [-1, 1]")]
    Domain(f64),
    #[error("no transmission peak within half a free spectral range of the guess")]
    NoPeak,
    #[error("half-maximum points lie more than half a free spectral range apart")]
    LinewidthOverlap,
    #[error("absorption fit did not converge after {0} iterations")]
    NonConvergence(usize),
    #[error("finesse variation ({variation:e}) is below three times its noise estimate ({noise:e})")]
    DegenerateData { variation: f64, noise: f64 },
}

pub type Result<T> = std::result::Result<T, OpticsError>;

/// Laser wavelength and the corresponding vacuum wavenumber.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalConstants {
    wavelength: f64,
    wavenumber: f64,
}

impl OpticalConstants {
    pub fn from_wavelength(wavelength: f64) -> Result<Self> {
        if !(wavelength > 0.0 && wavelength.is_finite()) {
            return Err(OpticsError::InvalidParameter(format!("wavelength must be positive, got {wavelength}")));
        }
        Ok(Self { wavelength, wavenumber: TAU / wavelength })
    }

    pub fn from_wavenumber(wavenumber: f64) -> Result<Self> {
        if !(wavenumber > 0.0 && wavenumber.is_finite()) {
            return Err(OpticsError::InvalidParameter(format!("wavenumber must be positive, got {wavenumber}")));
        }
        Ok(Self { wavelength: TAU / wavenumber, wavenumber })
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn wavenumber(&self) -> f64 {
        self.wavenumber
    }

    pub fn speed_of_light(&self) -> f64 {
        SPEED_OF_LIGHT
    }
}

/// Dielectric slab of thickness `thickness` (m) and complex index `index`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MembraneSlab {
    pub thickness: f64,
    pub index: Complex64,
}

impl MembraneSlab {
    pub fn new(thickness: f64, index: Complex64) -> Result<Self> {
        let slab = Self { thickness, index };
        slab.validate()?;
        Ok(slab)
    }

    /// A membrane with no optical effect (zero thickness, vacuum index).
    pub fn absent() -> Self {
        Self { thickness: 0.0, index: Complex64::new(1.0, 0.0) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.thickness >= 0.0 && self.thickness.is_finite()) {
            return Err(OpticsError::InvalidParameter(format!(
                "membrane thickness must be >= 0, got {}",
                self.thickness
            )));
        }
        if !(self.index.re >= 1.0) || !(self.index.im >= 0.0) || !self.index.is_finite() {
            return Err(OpticsError::InvalidParameter(format!(
                "membrane index must have Re >= 1 and Im >= 0, got {}",
                self.index
            )));
        }
        Ok(())
    }

    pub fn with_imag_index(self, im: f64) -> Self {
        Self { index: Complex64::new(self.index.re, im), ..self }
    }
}

/// Complex field reflection and transmission of the membrane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MembraneAmplitudes {
    pub reflection: Complex64,
    pub transmission: Complex64,
    /// `arg(r_d)` in (-pi, pi].
    pub reflection_phase: f64,
}

impl MembraneAmplitudes {
    pub fn power_reflectivity(&self) -> f64 {
        self.reflection.norm_sqr()
    }

    pub fn power_transmissivity(&self) -> f64 {
        self.transmission.norm_sqr()
    }
}

pub fn membrane_amplitudes(membrane: &MembraneSlab, optics: &OpticalConstants) -> MembraneAmplitudes {
    membrane_amplitudes_at(membrane, optics.wavenumber())
}

/// Slab amplitudes at wavenumber `k`, using the `(r_d, i t_d)` convention of
/// the cavity field equations (so `t_d -> -i` as the slab vanishes).
pub fn membrane_amplitudes_at(membrane: &MembraneSlab, k: f64) -> MembraneAmplitudes {
    let n = membrane.index;
    let phase = n * (k * membrane.thickness);
    let (s, c) = (phase.sin(), phase.cos());
    let n2 = n * n;
    let denom = I * 2.0 * n * c + (n2 + 1.0) * s;
    let reflection = (n2 - 1.0) * s / denom;
    let transmission = 2.0 * n / denom;
    MembraneAmplitudes { reflection, transmission, reflection_phase: reflection.arg() }
}

/// End mirror with real field reflectivity `r` and transmission `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndMirror {
    pub r: f64,
    pub t: f64,
}

impl EndMirror {
    pub fn new(r: f64, t: f64) -> Result<Self> {
        if !(r > 0.0 && r <= 1.0) || !(t >= 0.0) || r * r + t * t > 1.0 + 1e-15 {
            return Err(OpticsError::InvalidParameter(format!(
                "mirror needs 0 < r <= 1, t >= 0, r^2 + t^2 <= 1 (got r = {r}, t = {t})"
            )));
        }
        Ok(Self { r, t })
    }

    pub fn lossless(r: f64) -> Result<Self> {
        Self::new(r, (1.0 - r * r).max(0.0).sqrt())
    }

    /// Lossless mirror pair member reproducing the given empty-cavity finesse.
    pub fn matched_to_finesse(finesse: f64) -> Result<Self> {
        Self::lossless(reflectivity_for_finesse(finesse)?)
    }

    /// Power lost in the coating, `1 - r^2 - t^2`.
    pub fn loss(&self) -> f64 {
        1.0 - self.r * self.r - self.t * self.t
    }
}

/// Exact linewidth finesse of an empty cavity with mirror reflectivities
/// `r_left`, `r_right` (Airy line shape).
pub fn empty_cavity_finesse(r_left: f64, r_right: f64) -> f64 {
    let rr = r_left * r_right;
    PI / (2.0 * ((1.0 - rr) / (2.0 * rr.sqrt())).asin())
}

/// Inverse of [`empty_cavity_finesse`] for identical mirrors.
pub fn reflectivity_for_finesse(finesse: f64) -> Result<f64> {
    if !(finesse > 1.0 && finesse.is_finite()) {
        return Err(OpticsError::InvalidParameter(format!("finesse must exceed 1, got {finesse}")));
    }
    let s = (PI / (2.0 * finesse)).sin();
    // With R = r^2 the half-width condition gives r^2 + 2 s r - 1 = 0.
    let u = (s * s + 1.0).sqrt() - s;
    Ok(u)
}

/// Compound cavity: two end mirrors, total length `length`, membrane centred
/// at `length / 2 + displacement`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavitySystem {
    pub left: EndMirror,
    pub right: EndMirror,
    pub membrane: MembraneSlab,
    pub length: f64,
    pub displacement: f64,
}

impl CavitySystem {
    pub fn new(
        left: EndMirror,
        right: EndMirror,
        membrane: MembraneSlab,
        length: f64,
        displacement: f64,
    ) -> Result<Self> {
        let sys = Self { left, right, membrane, length, displacement };
        sys.validate()?;
        Ok(sys)
    }

    pub fn validate(&self) -> Result<()> {
        self.membrane.validate()?;
        EndMirror::new(self.left.r, self.left.t)?;
        EndMirror::new(self.right.r, self.right.t)?;
        if !(self.length > 0.0) {
            return Err(OpticsError::InvalidParameter(format!("cavity length must be positive, got {}", self.length)));
        }
        if !(self.left_length() > 0.0 && self.right_length() > 0.0) {
            return Err(OpticsError::InvalidParameter(format!(
                "membrane at displacement {} leaves no room on one side",
                self.displacement
            )));
        }
        Ok(())
    }

    pub fn with_displacement(&self, displacement: f64) -> Self {
        Self { displacement, ..*self }
    }

    pub fn with_membrane(&self, membrane: MembraneSlab) -> Self {
        Self { membrane, ..*self }
    }

    /// Distance from the left mirror to the membrane's left surface.
    pub fn left_length(&self) -> f64 {
        self.length / 2.0 + self.displacement - self.membrane.thickness / 2.0
    }

    /// Distance from the membrane's right surface to the right mirror.
    pub fn right_length(&self) -> f64 {
        self.length / 2.0 - self.displacement - self.membrane.thickness / 2.0
    }

    /// `delta = 2 k dx`.
    pub fn scaled_position(&self, k: f64) -> f64 {
        2.0 * k * self.displacement
    }

    pub fn fsr_hz(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.length)
    }

    /// Free spectral range expressed as a wavenumber interval, `pi / L`.
    pub fn fsr_wavenumber(&self) -> f64 {
        PI / self.length
    }

    /// Airy finesse of the two end mirrors alone.
    pub fn mirror_finesse(&self) -> f64 {
        empty_cavity_finesse(self.left.r, self.right.r)
    }

    fn phases(&self, carrier: f64) -> CavityPhases {
        let half_gap = (self.length - self.membrane.thickness) / 2.0;
        let common = (carrier * half_gap).rem_euclid(TAU);
        let shift = carrier * self.displacement;
        CavityPhases {
            carrier,
            left: common + shift,
            right: common - shift,
            left_length: self.left_length(),
            right_length: self.right_length(),
        }
    }

    /// Field solution at wavenumber `carrier + offset`.
    pub fn solve(&self, carrier: f64, offset: f64) -> Result<FieldSolution> {
        let ph = self.phases(carrier);
        self.solve_with(&ph, offset)
    }

    fn solve_with(&self, ph: &CavityPhases, offset: f64) -> Result<FieldSolution> {
        let amps = membrane_amplitudes_at(&self.membrane, ph.carrier + offset);
        let (e1, e2) = ph.propagators(offset);
        solve_closed_form(self, &amps, e1, e2)
    }

    fn transmission_with(&self, ph: &CavityPhases, offset: f64) -> f64 {
        self.solve_with(ph, offset).map(|f| f.transmission()).unwrap_or(f64::INFINITY)
    }

    /// Direct solve of the 6x6 field equations (same inputs as [`Self::solve`]).
    pub fn solve_linear(&self, carrier: f64, offset: f64) -> Result<FieldSolution> {
        let ph = self.phases(carrier);
        let amps = membrane_amplitudes_at(&self.membrane, carrier + offset);
        let (e1, e2) = ph.propagators(offset);
        solve_linear_system(self, &amps, e1, e2)
    }
}

#[derive(Debug, Clone, Copy)]
struct CavityPhases {
    carrier: f64,
    left: f64,
    right: f64,
    left_length: f64,
    right_length: f64,
}

impl CavityPhases {
    fn propagators(&self, offset: f64) -> (Complex64, Complex64) {
        (
            Complex64::from_polar(1.0, self.left + offset * self.left_length),
            Complex64::from_polar(1.0, self.right + offset * self.right_length),
        )
    }
}

/// Travelling-wave amplitudes for unit input from the left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldSolution {
    pub a1: Complex64,
    pub a2: Complex64,
    pub a3: Complex64,
    pub a4: Complex64,
    pub reflected: Complex64,
    pub transmitted: Complex64,
}

impl FieldSolution {
    pub fn transmission(&self) -> f64 {
        self.transmitted.norm_sqr()
    }

    pub fn reflection(&self) -> f64 {
        self.reflected.norm_sqr()
    }

    pub fn as_array(&self) -> [Complex64; 6] {
        [self.a1, self.a2, self.a3, self.a4, self.reflected, self.transmitted]
    }
}

const SINGULAR_DET: f64 = 1e-14;

fn solve_closed_form(
    sys: &CavitySystem,
    amps: &MembraneAmplitudes,
    e1: Complex64,
    e2: Complex64,
) -> Result<FieldSolution> {
    let (rl, tl, rr, tr) = (sys.left.r, sys.left.t, sys.right.r, sys.right.t);
    let (rd, td) = (amps.reflection, amps.transmission);
    let e1sq = e1 * e1;
    let e2sq = e2 * e2;
    // Right half-cavity closes on itself first, then the left half sees an
    // effective membrane reflectivity.
    let right_den = Complex64::new(1.0, 0.0) - rr * rd * e2sq;
    let eff = rd - td * td * rr * e2sq / right_den;
    let left_den = Complex64::new(1.0, 0.0) - rl * e1sq * eff;
    let det = right_den * left_den;
    if det.norm() < SINGULAR_DET {
        return Err(OpticsError::Singular(det.norm()));
    }
    let a1 = I * tl / left_den;
    let a3 = I * td * e1 * a1 / right_den;
    let a4 = rr * a3 * e2;
    let a2 = rd * a1 * e1 + I * td * a4 * e2;
    Ok(FieldSolution { a1, a2, a3, a4, reflected: I * tl * a2 * e1 + rl, transmitted: I * tr * a3 * e2 })
}

fn solve_linear_system(
    sys: &CavitySystem,
    amps: &MembraneAmplitudes,
    e1: Complex64,
    e2: Complex64,
) -> Result<FieldSolution> {
    let (rl, tl, rr, tr) = (sys.left.r, sys.left.t, sys.right.r, sys.right.t);
    let (rd, td) = (amps.reflection, amps.transmission);
    let one = Complex64::new(1.0, 0.0);
    let zero = Complex64::new(0.0, 0.0);
    // Unknowns: A1, A2, A3, A4, A_refl, A_tran.
    let mut m = Matrix6::from_element(zero);
    let mut b = Vector6::from_element(zero);
    m[(0, 0)] = one;
    m[(0, 1)] = -rl * e1;
    b[0] = I * tl;
    m[(1, 1)] = one;
    m[(1, 0)] = -rd * e1;
    m[(1, 3)] = -I * td * e2;
    m[(2, 2)] = one;
    m[(2, 0)] = -I * td * e1;
    m[(2, 3)] = -rd * e2;
    m[(3, 3)] = one;
    m[(3, 2)] = -rr * e2;
    m[(4, 4)] = one;
    m[(4, 1)] = -I * tl * e1;
    b[4] = Complex64::new(rl, 0.0);
    m[(5, 5)] = one;
    m[(5, 2)] = -I * tr * e2;
    let lu = m.lu();
    let det = lu.determinant();
    if det.norm() < SINGULAR_DET {
        return Err(OpticsError::Singular(det.norm()));
    }
    let x = lu.solve(&b).ok_or(OpticsError::Singular(det.norm()))?;
    Ok(FieldSolution { a1: x[0], a2: x[1], a3: x[2], a4: x[3], reflected: x[4], transmitted: x[5] })
}

/// Field equations evaluated at the membrane's configured wavenumber.
pub fn solve_fields(system: &CavitySystem, optics: &OpticalConstants) -> Result<FieldSolution> {
    system.solve(optics.wavenumber(), 0.0)
}

/// Closed lossless-cavity resonance frequency in units of `2 pi / f_FSR`:
/// `2 phi_r + 2 acos(|r_d| cos delta)`.
pub fn resonance_detuning(rd_abs: f64, phi_r: f64, delta: f64) -> Result<f64> {
    let x = rd_abs * delta.cos();
    if !(rd_abs >= 0.0) || x.abs() > 1.0 + 1e-15 || !x.is_finite() {
        return Err(OpticsError::Domain(x));
    }
    Ok(2.0 * phi_r + 2.0 * x.clamp(-1.0, 1.0).acos())
}

/// A resonance located as `carrier + offset` (m^-1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resonance {
    pub carrier: f64,
    pub offset: f64,
}

impl Resonance {
    pub fn wavenumber(&self) -> f64 {
        self.carrier + self.offset
    }
}

/// Residual of the closed lossless-cavity eigenvalue condition,
/// `cos(k (L - L_d) + psi) - rho cos(2 k dx)`, where `r_d^2 + t_d^2 = e^{2 i psi}`
/// and `rho = Re(r_d e^{-i psi})`. For `sin(k n L_d) > 0` this is the same
/// condition as `resonance_detuning` with `psi = phi_r`, `rho = |r_d|`.
fn closed_cavity_residual(sys: &CavitySystem, ph: &CavityPhases, offset: f64) -> f64 {
    let k = ph.carrier + offset;
    let amps = membrane_amplitudes_at(&sys.membrane, k);
    let det = amps.reflection * amps.reflection + amps.transmission * amps.transmission;
    let psi = det.arg() / 2.0;
    let rho = (amps.reflection * Complex64::from_polar(1.0, -psi)).re;
    let round = ph.left + ph.right + offset * (ph.left_length + ph.right_length);
    (round + psi).cos() - rho * (2.0 * k * sys.displacement).cos()
}

/// Root of the closed lossless-cavity condition nearest `k_guess`. Adjacent
/// roots are at most two free spectral ranges apart, so one always lies
/// within one range of the guess.
pub fn closed_cavity_resonance(system: &CavitySystem, k_guess: f64) -> Result<Resonance> {
    let ph = system.phases(k_guess);
    let fsr = system.fsr_wavenumber();
    let samples = 512;
    let grid = linspace(-fsr, fsr, samples + 1);
    let vals: Vec<f64> = grid.iter().map(|&q| closed_cavity_residual(system, &ph, q)).collect();
    let mut best: Option<f64> = None;
    for i in 0..samples {
        if vals[i] == 0.0 || vals[i].signum() != vals[i + 1].signum() {
            let tol = 1e-15 * fsr;
            if let Some(root) = bisect(|q| closed_cavity_residual(system, &ph, q), grid[i], grid[i + 1], tol) {
                if best.is_none_or(|b| root.abs() < b.abs()) {
                    best = Some(root);
                }
            }
        }
    }
    // Tangent roots (bands touching) show no sign change; fall back to the
    // sampled minimum of |residual|.
    let offset = match best {
        Some(b) => b,
        None => {
            let (i, _) = vals
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
                .ok_or(OpticsError::NoPeak)?;
            grid[i]
        }
    };
    Ok(Resonance { carrier: k_guess, offset })
}

/// Wavenumber of the transmission maximum nearest `k_guess`.
pub fn find_resonance(system: &CavitySystem, k_guess: f64) -> Result<Resonance> {
    let ph = system.phases(k_guess);
    let offset = peak_offset(system, &ph, 0.0)?;
    Ok(Resonance { carrier: k_guess, offset })
}

fn peak_offset(sys: &CavitySystem, ph: &CavityPhases, start: f64) -> Result<f64> {
    let fsr = sys.fsr_wavenumber();
    let limit = 0.5 * fsr;
    let trans = |q: f64| sys.transmission_with(ph, q);
    let linewidth = fsr / sys.mirror_finesse();
    let mut step = 0.25 * linewidth;
    let t0 = trans(start);
    let (dir, mut prev, mut cur, mut t_cur) = {
        let tp = trans(start + step);
        let tm = trans(start - step);
        if tp > t0 && tp >= tm {
            (1.0, start, start + step, tp)
        } else if tm > t0 {
            (-1.0, start, start - step, tm)
        } else {
            (0.0, start - step, start + step, t0)
        }
    };
    let (lo, hi) = if dir == 0.0 {
        (prev, cur)
    } else {
        loop {
            step *= 2.0;
            let next = cur + dir * step;
            if (next - start).abs() > limit {
                return Err(OpticsError::NoPeak);
            }
            let t_next = trans(next);
            if t_next < t_cur {
                break (prev.min(next), prev.max(next));
            }
            prev = cur;
            cur = next;
            t_cur = t_next;
        }
    };
    let tol = 1e-12 * fsr;
    let (q, _) = golden_section_max(trans, lo, hi, tol, 400);
    Ok(q)
}

/// Power transmission and reflection at a resonance.
pub fn resonance_response(system: &CavitySystem, res: &Resonance) -> Result<FieldSolution> {
    system.solve(res.carrier, res.offset)
}

/// Finesse as free spectral range over the full width at half maximum of the
/// power-transmission peak at `res`.
pub fn finesse_from_linewidth(system: &CavitySystem, res: &Resonance) -> Result<f64> {
    let ph = system.phases(res.carrier);
    let fsr = system.fsr_wavenumber();
    let q0 = res.offset;
    let half = 0.5 * system.transmission_with(&ph, q0);
    let f = |q: f64| system.transmission_with(&ph, q) - half;
    let guess = 0.5 * fsr / system.mirror_finesse();
    let crossing = |dir: f64| -> Result<f64> {
        let mut inner = q0;
        let mut step = 0.5 * guess;
        loop {
            let outer = q0 + dir * step;
            if step > 0.5 * fsr {
                return Err(OpticsError::LinewidthOverlap);
            }
            if f(outer) < 0.0 {
                let tol = 1e-12 * step;
                return bisect(f, inner, outer, tol).ok_or(OpticsError::LinewidthOverlap);
            }
            inner = outer;
            step *= 2.0;
        }
    };
    let upper = crossing(1.0)?;
    let lower = crossing(-1.0)?;
    let fwhm = upper - lower;
    if fwhm > 0.5 * fsr {
        return Err(OpticsError::LinewidthOverlap);
    }
    Ok(fsr / fwhm)
}

/// `F = 2 pi f_FSR tau` for an intensity ringdown time `tau`.
pub fn finesse_from_ringdown(tau: f64, fsr_hz: f64) -> f64 {
    TAU * fsr_hz * tau
}

/// Ringdown time for a given finesse, inverse of [`finesse_from_ringdown`].
pub fn ringdown_from_finesse(finesse: f64, fsr_hz: f64) -> f64 {
    finesse / (TAU * fsr_hz)
}

/// Finesse and resonant response of a tracked mode versus membrane position.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PositionScanResult {
    pub displacement: Vec<f64>,
    pub k_res: Vec<f64>,
    pub finesse: Vec<f64>,
    pub transmission: Vec<f64>,
    pub reflection: Vec<f64>,
    pub valid: Vec<bool>,
}

impl PositionScanResult {
    pub fn len(&self) -> usize {
        self.displacement.len()
    }

    pub fn is_empty(&self) -> bool {
        self.displacement.is_empty()
    }

    fn push(&mut self, dx: f64, point: Option<(f64, f64, f64, f64)>) {
        self.displacement.push(dx);
        match point {
            Some((k, f, t, r)) => {
                self.k_res.push(k);
                self.finesse.push(f);
                self.transmission.push(t);
                self.reflection.push(r);
                self.valid.push(true);
            }
            None => {
                self.k_res.push(f64::NAN);
                self.finesse.push(f64::NAN);
                self.transmission.push(f64::NAN);
                self.reflection.push(f64::NAN);
                self.valid.push(false);
            }
        }
    }

    /// Valid `(displacement, finesse)` pairs.
    pub fn valid_finesse(&self) -> Vec<(f64, f64)> {
        self.displacement
            .iter()
            .zip(&self.finesse)
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .map(|((&x, &f), _)| (x, f))
            .collect()
    }

    /// CSV with header `dx_m,k_res,finesse,T_res,R_res,valid`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dx_m,k_res,finesse,T_res,R_res,valid\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{:e},{:e},{:e},{:e},{:e},{}\n",
                self.displacement[i],
                self.k_res[i],
                self.finesse[i],
                self.transmission[i],
                self.reflection[i],
                self.valid[i]
            ));
        }
        out
    }

    /// Parses the format written by [`Self::to_csv`]. Errors carry 1-based
    /// line numbers.
    pub fn from_csv(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| "line 1: empty scan file".to_string())?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["dx_m", "k_res", "finesse", "T_res", "R_res", "valid"] {
            return Err(format!("line 1: unexpected header `{header}`"));
        }
        let mut scan = Self::default();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 6 {
                return Err(format!("line {lineno}: expected 6 fields, found {}", fields.len()));
            }
            let num = |i: usize| -> std::result::Result<f64, String> {
                fields[i].parse::<f64>().map_err(|e| format!("line {lineno}: field {} `{}`: {e}", i + 1, fields[i]))
            };
            let valid = match fields[5] {
                "true" | "1" => true,
                "false" | "0" => false,
                other => return Err(format!("line {lineno}: bad validity flag `{other}`")),
            };
            scan.displacement.push(num(0)?);
            scan.k_res.push(num(1)?);
            scan.finesse.push(num(2)?);
            scan.transmission.push(num(3)?);
            scan.reflection.push(num(4)?);
            scan.valid.push(valid);
        }
        if scan.is_empty() {
            return Err("line 2: scan file has no data rows".to_string());
        }
        Ok(scan)
    }
}

fn scan_point(sys: &CavitySystem, k_guess: f64) -> Result<(Resonance, f64, f64, f64)> {
    sys.validate()?;
    let predicted = closed_cavity_resonance(sys, k_guess)?;
    let res = find_resonance(sys, predicted.wavenumber())?;
    let finesse = finesse_from_linewidth(sys, &res)?;
    let field = resonance_response(sys, &res)?;
    Ok((res, finesse, field.transmission(), field.reflection()))
}

/// Tracks one resonance across `displacements`, seeding each point from the
/// previous one. Points whose solve fails are marked invalid.
pub fn scan_position(template: &CavitySystem, displacements: &[f64], optics: &OpticalConstants) -> PositionScanResult {
    let mut out = PositionScanResult::default();
    let mut k_prev = optics.wavenumber();
    for &dx in displacements {
        let sys = template.with_displacement(dx);
        match scan_point(&sys, k_prev) {
            Ok((res, f, t, r)) => {
                k_prev = res.wavenumber();
                out.push(dx, Some((res.wavenumber(), f, t, r)));
            }
            Err(_) => out.push(dx, None),
        }
    }
    out
}

/// Parameters held fixed in an absorption fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitFixed {
    pub empty_finesse: f64,
    pub mirror_r: f64,
    pub mirror_t: f64,
    pub thickness: f64,
    pub real_index: f64,
    pub length: f64,
    pub wavelength: f64,
}

impl FitFixed {
    /// Identical mirrors whose reflectivity reproduces `empty_finesse`; the
    /// transmission keeps the stated mirrors' split between transmission and
    /// coating loss.
    pub fn model_mirror(&self) -> Result<EndMirror> {
        let r = reflectivity_for_finesse(self.empty_finesse)?;
        let frac = if self.mirror_r < 1.0 {
            (self.mirror_t / (1.0 - self.mirror_r * self.mirror_r).sqrt()).min(1.0)
        } else {
            1.0
        };
        EndMirror::new(r, frac * (1.0 - r * r).sqrt())
    }

    fn check(&self) -> Result<()> {
        EndMirror::new(self.mirror_r, self.mirror_t)?;
        let implied = empty_cavity_finesse(self.mirror_r, self.mirror_r);
        if (implied / self.empty_finesse - 1.0).abs() > 0.10 {
            return Err(OpticsError::InvalidParameter(format!(
                "mirror r = {} implies finesse {implied:.0}, more than 10% from the stated {}",
                self.mirror_r, self.empty_finesse
            )));
        }
        Ok(())
    }

    pub fn template(&self, im_index: f64) -> Result<(CavitySystem, OpticalConstants)> {
        let mirror = self.model_mirror()?;
        let membrane = MembraneSlab::new(self.thickness, Complex64::new(self.real_index, im_index))?;
        let optics = OpticalConstants::from_wavelength(self.wavelength)?;
        let sys = CavitySystem::new(mirror, mirror, membrane, self.length, 0.0)?;
        Ok((sys, optics))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsorptionFitResult {
    pub im_n: f64,
    pub im_n_sigma: f64,
    /// Fitted shift between the data's position axis and the model's (m).
    pub position_offset: f64,
    pub residual: f64,
    pub excluded_points: usize,
    pub iterations: usize,
    pub fixed: FitFixed,
}

fn robust_noise(values: &[f64]) -> f64 {
    if values.len() < 4 {
        return 0.0;
    }
    let mut d2: Vec<f64> = values.windows(3).map(|w| (w[0] - 2.0 * w[1] + w[2]).abs()).collect();
    d2.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = d2[d2.len() / 2];
    median / 0.674_489_75 / 6f64.sqrt()
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

struct FinesseModel<'a> {
    fixed: &'a FitFixed,
    xs: Vec<f64>,
}

impl FinesseModel<'_> {
    fn eval(&self, im_n: f64, offset: f64) -> Result<Vec<f64>> {
        let (sys, optics) = self.fixed.template(im_n.max(0.0))?;
        let k = optics.wavenumber();
        let period = PI / k;
        // Finesse is periodic in position; fold into one period so each point
        // is solved independently of scan order.
        self.xs
            .par_iter()
            .map(|&x| {
                let folded = (x + offset).rem_euclid(period) - 0.5 * period;
                let s = sys.with_displacement(folded);
                let (_, f, _, _) = scan_point(&s, k)?;
                Ok(f)
            })
            .collect()
    }
}

fn ssr(data: &[f64], model: &[f64]) -> f64 {
    data.iter().zip(model).map(|(d, m)| (d - m).powi(2)).sum()
}

struct FitState {
    im_n: f64,
    offset: f64,
    ssr: f64,
    jac: Vec<[f64; 2]>,
    resid: Vec<f64>,
    iterations: usize,
}

fn levenberg_marquardt(model: &FinesseModel<'_>, data: &[f64], im0: f64, off0: f64, period: f64) -> Result<FitState> {
    const MAX_ITER: usize = 60;
    let mut im_n = im0.max(0.0);
    let mut offset = off0;
    let mut pred = model.eval(im_n, offset)?;
    let mut cost = ssr(data, &pred);
    let mut lambda = 1e-3;
    let mut jac = vec![[0.0; 2]; data.len()];
    for iter in 0..MAX_ITER {
        let h_im = (1e-3 * im_n).max(1e-8);
        let h_off = 1e-4 * period;
        let p_im = model.eval(im_n + h_im, offset)?;
        let p_off = model.eval(im_n, offset + h_off)?;
        for i in 0..data.len() {
            jac[i] = [(p_im[i] - pred[i]) / h_im, (p_off[i] - pred[i]) / h_off];
        }
        let resid: Vec<f64> = data.iter().zip(&pred).map(|(d, m)| d - m).collect();
        let (mut a00, mut a01, mut a11, mut g0, mut g1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (j, r) in jac.iter().zip(&resid) {
            a00 += j[0] * j[0];
            a01 += j[0] * j[1];
            a11 += j[1] * j[1];
            g0 += j[0] * r;
            g1 += j[1] * r;
        }
        let mut improved = false;
        for _ in 0..20 {
            let b00 = a00 * (1.0 + lambda) + 1e-300;
            let b11 = a11 * (1.0 + lambda) + 1e-300;
            let det = b00 * b11 - a01 * a01;
            let (d_im, d_off) = if det.abs() > 0.0 && a11 > 0.0 {
                ((b11 * g0 - a01 * g1) / det, (b00 * g1 - a01 * g0) / det)
            } else {
                (g0 / b00, 0.0)
            };
            let cand_im = (im_n + d_im).max(0.0);
            let cand_off = offset + d_off.clamp(-0.25 * period, 0.25 * period);
            let cand_pred = model.eval(cand_im, cand_off)?;
            let cand_cost = ssr(data, &cand_pred);
            if cand_cost <= cost {
                let rel = (cost - cand_cost) / cost.max(1e-300);
                let step_small =
                    (cand_im - im_n).abs() <= 1e-9 * im_n.max(1e-12) && (cand_off - offset).abs() <= 1e-9 * period;
                im_n = cand_im;
                offset = cand_off;
                pred = cand_pred;
                cost = cand_cost;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if rel < 1e-10 || step_small {
                    let resid = data.iter().zip(&pred).map(|(d, m)| d - m).collect();
                    return Ok(FitState { im_n, offset, ssr: cost, jac, resid, iterations: iter + 1 });
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // No downhill step at any damping: stationary point.
            return Ok(FitState { im_n, offset, ssr: cost, jac, resid, iterations: iter + 1 });
        }
    }
    Err(OpticsError::NonConvergence(MAX_ITER))
}

/// Fits the membrane's `Im(n)` (and a position offset) to measured finesse
/// versus position, with one pass of 3-sigma outlier rejection.
pub fn fit_absorption(scan: &PositionScanResult, fixed: &FitFixed) -> Result<AbsorptionFitResult> {
    fixed.check()?;
    let pts = scan.valid_finesse();
    if pts.len() < 4 {
        return Err(OpticsError::InvalidParameter("absorption fit needs at least 4 valid points".into()));
    }
    let (xs, fs): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let variation = std_dev(&fs);
    let noise = robust_noise(&fs);
    if variation < 3.0 * noise {
        return Err(OpticsError::DegenerateData { variation, noise });
    }

    let (_, optics) = fixed.template(0.0)?;
    let period = PI / optics.wavenumber();

    // Starting point: absorption scaled from the depth of the 1/F modulation
    // against a reference model, offset from a coarse grid.
    let ref_im = 1e-4;
    let grid_x = linspace(-0.5 * period, 0.5 * period, 65)[..64].to_vec();
    let reference = FinesseModel { fixed, xs: grid_x.clone() }.eval(ref_im, 0.0)?;
    let inv_span = |v: &[f64]| {
        let inv: Vec<f64> = v.iter().map(|f| 1.0 / f).collect();
        inv.iter().cloned().fold(f64::MIN, f64::max) - inv.iter().cloned().fold(f64::MAX, f64::min)
    };
    let im0 = (ref_im * inv_span(&fs) / inv_span(&reference)).max(0.0);
    let curve = FinesseModel { fixed, xs: grid_x.clone() }.eval(im0, 0.0)?;
    let interp = |x: f64| {
        let u = ((x + 0.5 * period).rem_euclid(period)) / period * 64.0;
        let i = u.floor() as usize % 64;
        let w = u - u.floor();
        curve[i] * (1.0 - w) + curve[(i + 1) % 64] * w
    };
    let off0 = (0..32)
        .map(|j| period * j as f64 / 32.0)
        .map(|off| {
            let cost: f64 = xs.iter().zip(&fs).map(|(x, f)| (f - interp(x + off)).powi(2)).sum();
            (off, cost)
        })
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .map(|(o, _)| o)
        .unwrap_or(0.0);

    let model = FinesseModel { fixed, xs: xs.clone() };
    let mut state = levenberg_marquardt(&model, &fs, im0, off0, period)?;
    let mut iterations = state.iterations;

    let dof = |n: usize| (n as f64 - 2.0).max(1.0);
    let sigma_res = (state.ssr / dof(fs.len())).sqrt();
    let keep: Vec<usize> = (0..fs.len()).filter(|&i| state.resid[i].abs() <= 3.0 * sigma_res).collect();
    let excluded = fs.len() - keep.len();
    let (xs_k, fs_k) = if excluded > 0 {
        let xs_k: Vec<f64> = keep.iter().map(|&i| xs[i]).collect();
        let fs_k: Vec<f64> = keep.iter().map(|&i| fs[i]).collect();
        let model = FinesseModel { fixed, xs: xs_k.clone() };
        state = levenberg_marquardt(&model, &fs_k, state.im_n, state.offset, period)?;
        iterations += state.iterations;
        (xs_k, fs_k)
    } else {
        (xs, fs)
    };
    let _ = xs_k;

    let s2 = state.ssr / dof(fs_k.len());
    let (mut a00, mut a01, mut a11) = (0.0, 0.0, 0.0);
    for j in &state.jac {
        a00 += j[0] * j[0];
        a01 += j[0] * j[1];
        a11 += j[1] * j[1];
    }
    let det = a00 * a11 - a01 * a01;
    let var_im = if det > 1e-12 * a00 * a11 && det > 0.0 {
        s2 * a11 / det
    } else if a00 > 0.0 {
        s2 / a00
    } else {
        f64::INFINITY
    };
    Ok(AbsorptionFitResult {
        im_n: state.im_n,
        im_n_sigma: var_im.sqrt(),
        position_offset: state.offset,
        residual: state.ssr,
        excluded_points: excluded,
        iterations,
        fixed: *fixed,
    })
}

/// Synthetic finesse scan with multiplicative Gaussian noise of relative size
/// `noise`, reproducible from `seed`.
pub fn synthetic_scan(
    template: &CavitySystem,
    displacements: &[f64],
    optics: &OpticalConstants,
    noise: f64,
    seed: u64,
) -> PositionScanResult {
    let mut scan = scan_position(template, displacements, optics);
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise).expect("finite noise level");
        for f in scan.finesse.iter_mut() {
            let e: f64 = normal.sample(&mut rng);
            *f *= 1.0 + e;
        }
    }
    scan
}

/// Finesse versus position for one hypothetical set of end mirrors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinesseLimitCurve {
    pub empty_finesse: f64,
    pub mirror_r: f64,
    pub scan: PositionScanResult,
}

/// For each empty-cavity finesse, builds matched lossless mirrors and scans
/// the membrane over `displacements`.
pub fn predict_finesse_limit(
    membrane: &MembraneSlab,
    empty_finesses: &[f64],
    optics: &OpticalConstants,
    length: f64,
    displacements: &[f64],
) -> Result<Vec<FinesseLimitCurve>> {
    empty_finesses
        .par_iter()
        .map(|&f| {
            let mirror = EndMirror::matched_to_finesse(f)?;
            let sys = CavitySystem::new(mirror, mirror, *membrane, length, 0.0)?;
            Ok(FinesseLimitCurve {
                empty_finesse: f,
                mirror_r: mirror.r,
                scan: scan_position(&sys, displacements, optics),
            })
        })
        .collect()
}

/// Positions spanning one period `pi / k` of the position dependence,
/// centred on zero, endpoint excluded.
pub fn one_period(optics: &OpticalConstants, points: usize) -> Vec<f64> {
    let period = PI / optics.wavenumber();
    (0..points).map(|i| -0.5 * period + period * i as f64 / points as f64).collect()
}

/// Real index giving a lossless slab the requested power reflectivity
/// (bisection on `Re(n) >= 1`, slab thin enough that `|r_d|` is monotone).
pub fn index_for_reflectivity(target: f64, thickness: f64, k: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&target) {
        return Err(OpticsError::InvalidParameter(format!("power reflectivity must lie in [0, 1), got {target}")));
    }
    if target == 0.0 {
        return Ok(1.0);
    }
    let refl = |n: f64| {
        let slab = MembraneSlab { thickness, index: Complex64::new(n, 0.0) };
        membrane_amplitudes_at(&slab, k).power_reflectivity() - target
    };
    // Stay below the first quarter-wave thickness so |r_d| grows with n.
    let hi = FRAC_PI_2 / (k * thickness).max(1e-300);
    if !(refl(hi) >= 0.0) {
        return Err(OpticsError::InvalidParameter(format!(
            "reflectivity {target} unreachable for thickness {thickness}"
        )));
    }
    bisect(refl, 1.0, hi, 1e-15 * hi)
        .ok_or_else(|| OpticsError::InvalidParameter(format!("no index found for reflectivity {target}")))
}
