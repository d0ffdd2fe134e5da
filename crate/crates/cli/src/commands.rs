//! Subcommand bodies. Each reads its parameters, computes, and hands every
//! artifact to the shared [`Output`] writer.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use mim_core::cavity_optics::{
    closed_cavity_resonance, fit_absorption, index_for_reflectivity, one_period, predict_finesse_limit,
    reflectivity_for_finesse, scan_position, synthetic_scan, CavitySystem, EndMirror, FitFixed, MembraneSlab,
    OpticalConstants, PositionScanResult,
};
use mim_core::linearized_dynamics::{cooling_map, cross_sections, CoolingMap, MapParams};
use mim_core::numeric::linspace;
use mim_core::qnd_stats::{
    measured_pair, optimize_averaging_time, simulate_jump_trace, sliding_average_trace, snr_gaussian, BathParams,
    EnergyDistribution, InversionSettings, MeasurementNoise,
};

use crate::config::Params;
use crate::error::CliError;
use crate::output::Output;

/// Relative tolerance of the pre-write antisymmetry gate on cooling maps.
const ANTISYMMETRY_GATE: f64 = 1e-9;

pub struct Context<'a> {
    pub params: Params,
    pub out: Output,
    pub seed: u64,
    pub data: Option<&'a Path>,
}

fn optical_setup(p: &mut Params) -> Result<(OpticalConstants, f64, f64, f64), CliError> {
    let wavelength = p.positive("wavelength_m", Some(1064e-9))?;
    let length = p.positive("cavity_length_m", Some(0.067))?;
    let thickness = p.positive("membrane_thickness_m", Some(50e-9))?;
    let index_re = p.f64("index_re", Some(2.2))?;
    p.check(index_re >= 1.0, "index_re", format!("must be >= 1, got {index_re}"))?;
    Ok((OpticalConstants::from_wavelength(wavelength)?, length, thickness, index_re))
}

fn scan_positions(p: &mut Params, optics: &OpticalConstants) -> Result<Vec<f64>, CliError> {
    let points = p.count("scan_points", 201, 2)?;
    let start = p.f64_opt("scan_start_m")?;
    let stop = p.f64_opt("scan_stop_m")?;
    match (start, stop) {
        (None, None) => Ok(one_period(optics, points)),
        (Some(a), Some(b)) => {
            p.check(b > a, "scan_stop_m", format!("must exceed scan_start_m ({a})"))?;
            Ok(linspace(a, b, points))
        }
        _ => Err(CliError::Config("scan_start_m and scan_stop_m must be given together".into())),
    }
}

fn scan_summary(scan: &PositionScanResult) -> serde_json::Value {
    let valid = scan.valid_finesse();
    let fmax = valid.iter().map(|v| v.1).fold(f64::NAN, f64::max);
    let fmin = valid.iter().map(|v| v.1).fold(f64::NAN, f64::min);
    let at_max = valid.iter().find(|v| v.1 == fmax).map(|v| v.0);
    json!({
        "points": scan.len(),
        "valid_points": valid.len(),
        "finesse_max": fmax,
        "finesse_min": fmin,
        "dx_at_finesse_max_m": at_max,
    })
}

pub fn optics_scan(ctx: &mut Context) -> Result<(), CliError> {
    let p = &mut ctx.params;
    let (optics, length, thickness, index_re) = optical_setup(p)?;
    let index_im = p.list("index_im", Some(&[0.0]))?;
    p.check(index_im.iter().all(|v| *v >= 0.0), "index_im", "entries must be >= 0")?;
    let finesses = p.list("empty_finesse", Some(&[]))?;
    p.check(finesses.iter().all(|f| *f > 0.0), "empty_finesse", "entries must be positive")?;
    let xs = scan_positions(p, &optics)?;
    let slabs = index_im
        .iter()
        .map(|&im| MembraneSlab::new(thickness, Complex64::new(index_re, im)))
        .collect::<Result<Vec<_>, _>>()?;

    let mut summary = Vec::new();
    if finesses.is_empty() {
        let r = p.f64("mirror_r", Some(0.99991))?;
        let t = p.f64("mirror_t", Some(5.28e-3))?;
        let mirror = EndMirror::new(r, t)?;
        let systems =
            slabs.iter().map(|s| CavitySystem::new(mirror, mirror, *s, length, 0.0)).collect::<Result<Vec<_>, _>>()?;
        let scans: Vec<PositionScanResult> = systems.par_iter().map(|s| scan_position(s, &xs, &optics)).collect();
        for (i, scan) in scans.iter().enumerate() {
            let name = format!("scan_{i}.csv");
            ctx.out.write_text(&name, &scan.to_csv())?;
            let mut s = scan_summary(scan);
            s["file"] = json!(name);
            s["index_re"] = json!(index_re);
            s["index_im"] = json!(index_im[i]);
            s["mirror_r"] = json!(r);
            s["mirror_t"] = json!(t);
            summary.push(s);
        }
    } else {
        for (i, slab) in slabs.iter().enumerate() {
            let curves = predict_finesse_limit(slab, &finesses, &optics, length, &xs)?;
            for (j, c) in curves.iter().enumerate() {
                let name = format!("scan_{i}_{j}.csv");
                ctx.out.write_text(&name, &c.scan.to_csv())?;
                let mut s = scan_summary(&c.scan);
                s["file"] = json!(name);
                s["index_re"] = json!(index_re);
                s["index_im"] = json!(index_im[i]);
                s["empty_finesse"] = json!(c.empty_finesse);
                s["mirror_r"] = json!(c.mirror_r);
                summary.push(s);
            }
        }
    }
    ctx.out.write_json("summary.json", &json!({ "scans": summary }))
}

pub fn fit(ctx: &mut Context) -> Result<(), CliError> {
    let p = &mut ctx.params;
    let (optics, length, thickness, index_re) = optical_setup(p)?;
    let empty_finesse = p.positive("empty_finesse", None)?;
    let mirror_r = match p.f64_opt("mirror_r")? {
        Some(r) => r,
        None => p.f64("mirror_r", Some(reflectivity_for_finesse(empty_finesse)?))?,
    };
    p.check((0.0..1.0).contains(&mirror_r), "mirror_r", "must lie in [0, 1)")?;
    let mirror_t = p.f64("mirror_t", Some((1.0 - mirror_r * mirror_r).sqrt()))?;
    let fixed = FitFixed {
        empty_finesse,
        mirror_r,
        mirror_t,
        thickness,
        real_index: index_re,
        length,
        wavelength: optics.wavelength(),
    };
    let synthetic_im = p.f64_opt("synthetic_im_n")?;
    let scan = match (ctx.data, synthetic_im) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config("synthetic_im_n cannot be combined with --data".into()));
        }
        (Some(path), None) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            PositionScanResult::from_csv(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        (None, Some(im)) => {
            p.check(im >= 0.0, "synthetic_im_n", "must be >= 0")?;
            let noise = p.f64("synthetic_noise", Some(0.02))?;
            p.check(noise >= 0.0, "synthetic_noise", "must be >= 0")?;
            let points = p.count("synthetic_points", 60, 8)?;
            let (sys, model_optics) = fixed.template(im)?;
            let xs = one_period(&model_optics, points);
            let scan = synthetic_scan(&sys, &xs, &model_optics, noise, ctx.seed);
            ctx.out.write_text("data.csv", &scan.to_csv())?;
            scan
        }
        (None, None) => {
            return Err(CliError::Config("fit needs --data FILE or the synthetic_im_n key".into()));
        }
    };
    let result = fit_absorption(&scan, &fixed)?;
    ctx.out.write_json("fit.json", &result)
}

#[derive(Serialize)]
struct BandRow {
    dx_m: f64,
    band: usize,
    k_res: f64,
    detuning_fsr: f64,
}

pub fn band_diagram(ctx: &mut Context) -> Result<(), CliError> {
    let p = &mut ctx.params;
    let wavelength = p.positive("wavelength_m", Some(1064e-9))?;
    let length = p.positive("cavity_length_m", Some(0.067))?;
    let thickness = p.positive("membrane_thickness_m", Some(10e-9))?;
    let targets = p.list("membrane_power_reflectivity", None)?;
    let bands = p.count("bands", 3, 1)?;
    let points = p.count("scan_points", 201, 2)?;
    let optics = OpticalConstants::from_wavelength(wavelength)?;
    let k0 = optics.wavenumber();
    let xs = one_period(&optics, points);
    let mirror = EndMirror::lossless(0.99991)?;

    let mut meta = Vec::new();
    for (i, &target) in targets.iter().enumerate() {
        let n = index_for_reflectivity(target, thickness, k0)?;
        let slab = MembraneSlab::new(thickness, Complex64::new(n, 0.0))?;
        let base = CavitySystem::new(mirror, mirror, slab, length, 0.0)?;
        let fsr = base.fsr_wavenumber();
        let q0 = (k0 / fsr).round();
        let rows: Vec<Vec<BandRow>> = (0..bands)
            .into_par_iter()
            .map(|b| {
                let mut k = k0 + b as f64 * fsr;
                xs.iter()
                    .map(|&dx| {
                        let res = closed_cavity_resonance(&base.with_displacement(dx), k)?;
                        k = res.wavenumber();
                        Ok(BandRow { dx_m: dx, band: b, k_res: k, detuning_fsr: k / fsr - q0 })
                    })
                    .collect::<Result<Vec<_>, CliError>>()
            })
            .collect::<Result<_, _>>()?;
        let mut csv = String::from("dx_m,band,k_res,detuning_fsr\n");
        for r in rows.iter().flatten() {
            csv.push_str(&format!("{:e},{},{:e},{:e}\n", r.dx_m, r.band, r.k_res, r.detuning_fsr));
        }
        let name = format!("band_{i}.csv");
        ctx.out.write_text(&name, &csv)?;
        meta.push(json!({
            "file": name,
            "membrane_power_reflectivity": target,
            "index_re": n,
            "fsr_wavenumber": fsr,
            "reference_mode": q0,
        }));
    }
    ctx.out.write_json("bands.json", &json!({ "thickness_m": thickness, "bands": meta }))
}

/// Largest `|G(x, d) + G(-x, -d)|` relative to the map maximum, on grids
/// that are symmetric about zero.
fn antisymmetry_residual(map: &CoolingMap) -> f64 {
    let (nx, nd) = (map.x_scaled.len(), map.delta_scaled.len());
    let scale = map.max_abs().max(f64::MIN_POSITIVE);
    let mut worst: f64 = 0.0;
    for ix in 0..nx {
        for id in 0..nd {
            let s = map.at(ix, id) + map.at(nx - 1 - ix, nd - 1 - id);
            if s.is_finite() {
                worst = worst.max(s.abs() / scale);
            }
        }
    }
    worst
}

fn paired(p: &mut Params) -> Result<Vec<(f64, f64)>, CliError> {
    let w = p.list("omega_m_over_kappa", None)?;
    let g = p.list("g_over_kappa", None)?;
    match (w.len(), g.len()) {
        (a, b) if a == b => Ok(w.into_iter().zip(g).collect()),
        (1, _) => Ok(g.iter().map(|&gv| (w[0], gv)).collect()),
        (_, 1) => Ok(w.iter().map(|&wv| (wv, g[0])).collect()),
        (a, b) => {
            Err(CliError::Config(format!("omega_m_over_kappa ({a} values) and g_over_kappa ({b} values) must pair up")))
        }
    }
}

pub fn cooling_map_cmd(ctx: &mut Context) -> Result<(), CliError> {
    let p = &mut ctx.params;
    let pairs = paired(p)?;
    let kappa_ratio = p.positive("kappa_ratio", Some(1.0))?;
    let gamma_m = p.f64_opt("gamma_m_over_kappa")?;
    let x_points = p.count("x_points", 201, 2)?;
    let x_max = p.positive("x_max_scaled", Some(8.0))?;
    let d_points = p.count("delta_points", 201, 2)?;
    let d_max = p.positive("delta_max_scaled", Some(8.0))?;
    let cuts = p.list("cross_section_x_scaled", Some(&[]))?;
    let xs = linspace(-x_max, x_max, x_points);
    let ds = linspace(-d_max, d_max, d_points);

    for (i, &(w, g)) in pairs.iter().enumerate() {
        let params = MapParams { omega_m_over_kappa: w, g_over_kappa: g, kappa_ratio, gamma_m_over_kappa: gamma_m };
        let map = cooling_map(&params, &xs, &ds)?;
        let residual = if kappa_ratio == 1.0 { Some(antisymmetry_residual(&map)) } else { None };
        if let Some(r) = residual {
            if r > ANTISYMMETRY_GATE {
                return Err(CliError::Numeric(format!(
                    "map {i}: antisymmetry residual {r:e} exceeds {ANTISYMMETRY_GATE:e}"
                )));
            }
        }
        ctx.out.write_text(&format!("map_{i}.csv"), &map.to_csv())?;
        if !cuts.is_empty() {
            let rows = cross_sections(&params, &cuts, &ds)?;
            let mut csv = String::from("x_scaled,delta_scaled,gamma_opt\n");
            for (x, row) in cuts.iter().zip(&rows) {
                for (d, v) in ds.iter().zip(row) {
                    csv.push_str(&format!("{x:e},{d:e},{v:e}\n"));
                }
            }
            ctx.out.write_text(&format!("cuts_{i}.csv"), &csv)?;
        }
        ctx.out.write_json(
            &format!("map_{i}.json"),
            &json!({
                "omega_m_over_kappa": w,
                "g_over_kappa": g,
                "kappa_ratio": kappa_ratio,
                "gamma_m_over_kappa": gamma_m,
                "x_scaled": { "min": -x_max, "max": x_max, "points": x_points },
                "delta_scaled": { "min": -d_max, "max": d_max, "points": d_points },
                "max_abs_gamma_opt": map.max_abs(),
                "failed_nodes": map.failed,
                "unstable_nodes": map.unstable.iter().filter(|u| **u).count(),
                "antisymmetry_residual": residual,
                "cross_section_x_scaled": cuts,
            }),
        )?;
    }
    Ok(())
}

fn bath_from(p: &mut Params) -> Result<BathParams, CliError> {
    let f = p.positive("omega_m_hz", Some(1e5))?;
    let ratio = p.positive("gamma_over_omega_m", Some(1.2e-7))?;
    let t = p.positive("t_bath_k", Some(0.3))?;
    let omega = 2.0 * PI * f;
    Ok(BathParams::from_temperatures(omega, ratio * omega, t, 0.0)?)
}

fn inversion_settings(p: &mut Params) -> Result<InversionSettings, CliError> {
    let d = InversionSettings::default();
    let points = p.count("fft_points", d.points, 256)?;
    p.check(points.is_power_of_two(), "fft_points", "must be a power of two")?;
    p.check(points <= d.max_points, "fft_points", format!("must not exceed {}", d.max_points))?;
    Ok(InversionSettings { points, ..d })
}

/// Drops leading and trailing grid points whose cumulative mass is below `mass`.
fn trimmed(d: &EnergyDistribution, mass: f64) -> EnergyDistribution {
    let cut = |it: &mut dyn Iterator<Item = &f64>| {
        let mut acc = 0.0;
        it.take_while(|v| {
            acc += **v * d.dm;
            acc < mass
        })
        .count()
    };
    let lo = cut(&mut d.density.iter());
    let hi = cut(&mut d.density.iter().rev());
    let end = d.len().saturating_sub(hi).max(lo + 1).min(d.len());
    let mut out = d.clone();
    out.m0 = d.m(lo);
    out.density = d.density[lo..end].to_vec();
    out
}

fn dist_meta(d: &EnergyDistribution, full_len: usize) -> serde_json::Value {
    json!({
        "kind": d.kind.as_str(),
        "t_avg_s": d.t,
        "mean": d.mean,
        "variance": d.variance,
        "mean_shift": d.mean_shift,
        "normalization_error": d.normalization_error,
        "tail_mass": d.tail_mass,
        "dm": d.dm,
        "m0": d.m0,
        "points_written": d.len(),
        "points_computed": full_len,
        "local_maxima": d.local_maxima(1e-3),
    })
}

pub fn qnd_dist(ctx: &mut Context) -> Result<(), CliError> {
    let p = &mut ctx.params;
    let base = bath_from(p)?;
    let n_inits = p.list("n_init", Some(&[0.0]))?;
    let rs = p.list("r_values", None)?;
    p.check(rs.iter().all(|r| *r > 0.0), "r_values", "entries must be positive")?;
    let t_fixed = p.f64_opt("t_avg_over_tau")?;
    if let Some(t) = t_fixed {
        p.check(t > 0.0, "t_avg_over_tau", "must be positive")?;
    }
    let settings = inversion_settings(p)?;
    let trim = p.f64("trim_mass", Some(1e-12))?;
    p.check((0.0..1e-3).contains(&trim), "trim_mass", "must lie in [0, 1e-3)")?;

    let mut index = 0;
    for &n0 in &n_inits {
        let bath = base.with_n_init(n0);
        bath.validate()?;
        let tau = bath.tau();
        for &r in &rs {
            let noise = MeasurementNoise::for_figure_of_merit(&bath, r)?;
            let (t_avg, optimum) = match t_fixed {
                Some(x) => (x * tau, None),
                None => {
                    let o = optimize_averaging_time(&bath, &noise, &settings)?;
                    (o.t_opt, Some(o))
                }
            };
            let pair = measured_pair(&bath, &noise, t_avg, &settings)?;
            let q = trimmed(&pair.quantum, trim);
            let c = trimmed(&pair.classical, trim);
            ctx.out.write_text(&format!("dist_{index}_quantum.csv"), &q.to_csv())?;
            ctx.out.write_text(&format!("dist_{index}_classical.csv"), &c.to_csv())?;
            ctx.out.write_json(
                &format!("dist_{index}.json"),
                &json!({
                    "n_init": n0,
                    "R": r,
                    "quantum": dist_meta(&q, pair.quantum.len()),
                    "classical": dist_meta(&c, pair.classical.len()),
                }),
            )?;
            let mut report = serde_json::to_value(pair.report)?;
            report["n_init"] = json!(n0);
            report["tau_s"] = json!(tau);
            report["t_avg_over_tau"] = json!(t_avg / tau);
            report["t_avg_optimized"] = json!(optimum.is_some());
            if let Some(o) = &optimum {
                report["at_boundary"] = json!(o.at_boundary);
                report["optimizer_scan"] = json!(o.scan);
            }
            ctx.out.write_json(&format!("report_{index}.json"), &report)?;
            index += 1;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct InfoRow {
    #[serde(rename = "R")]
    r: f64,
    n_init: f64,
    t_opt_s: f64,
    t_opt_over_tau: f64,
    #[serde(rename = "I_bits")]
    i_bits: f64,
    at_boundary: bool,
    scan: Vec<(f64, f64)>,
}

pub fn info_curve(ctx: &mut Context) -> Result<(), CliError> {
    let p = &mut ctx.params;
    let base = bath_from(p)?;
    let n_inits = p.list("n_init", Some(&[0.0]))?;
    let rs = p.list("r_values", None)?;
    p.check(rs.iter().all(|r| *r > 0.0), "r_values", "entries must be positive")?;
    let settings = inversion_settings(p)?;
    let mut rows = Vec::new();
    for &n0 in &n_inits {
        let bath = base.with_n_init(n0);
        bath.validate()?;
        for &r in &rs {
            let noise = MeasurementNoise::for_figure_of_merit(&bath, r)?;
            let o = optimize_averaging_time(&bath, &noise, &settings)?;
            rows.push(InfoRow {
                r,
                n_init: n0,
                t_opt_s: o.t_opt,
                t_opt_over_tau: o.t_opt / bath.tau(),
                i_bits: o.i_max,
                at_boundary: o.at_boundary,
                scan: o.scan,
            });
        }
    }
    let mut csv = String::from("R,n_init,t_opt_s,t_opt_over_tau,I_bits,at_boundary\n");
    for r in &rows {
        csv.push_str(&format!(
            "{:e},{:e},{:e},{:e},{:e},{}\n",
            r.r, r.n_init, r.t_opt_s, r.t_opt_over_tau, r.i_bits, r.at_boundary
        ));
    }
    ctx.out.write_text("info_curve.csv", &csv)?;
    ctx.out.write_json("info_curve.json", &json!({ "tau_s": base.tau(), "rows": rows }))
}

/// Independent stream for each averaged trace, derived from the run seed.
fn sub_seed(seed: u64, a: usize, b: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (((a as u64) << 32) | (b as u64 + 1))
}

pub fn qnd_trace(ctx: &mut Context) -> Result<(), CliError> {
    let p = &mut ctx.params;
    let bath = bath_from(p)?;
    let n0 = p.f64("n_init", Some(0.0))?;
    let bath = bath.with_n_init(n0);
    bath.validate()?;
    let tau = bath.tau();
    let noises = p.list("s_nn_over_tau", Some(&[0.001, 0.004]))?;
    p.check(noises.iter().all(|s| *s >= 0.0), "s_nn_over_tau", "entries must be >= 0")?;
    let t_avgs = p.list("t_avg_over_tau", Some(&[0.01, 0.05, 0.1, 0.2, 0.5, 1.0]))?;
    p.check(t_avgs.iter().all(|t| *t > 0.0), "t_avg_over_tau", "entries must be positive")?;
    let duration = p.positive("duration_over_tau", Some(2.0))? * tau;
    let dt_ratio = p.positive("dt_over_t_avg", Some(0.05))?;

    let trace = simulate_jump_trace(&bath, duration, ctx.seed)?;
    ctx.out.write_text("trace.csv", &trace.to_csv())?;
    let jobs: Vec<(usize, usize)> = (0..noises.len()).flat_map(|a| (0..t_avgs.len()).map(move |b| (a, b))).collect();
    let seed = ctx.seed;
    let averaged = jobs
        .par_iter()
        .map(|&(a, b)| {
            let t_avg = t_avgs[b] * tau;
            sliding_average_trace(&trace, noises[a] * tau, t_avg, dt_ratio * t_avg, sub_seed(seed, a, b))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut meta = Vec::new();
    for (&(a, b), avg) in jobs.iter().zip(&averaged) {
        let name = format!("avg_{a}_{b}.csv");
        ctx.out.write_text(&name, &avg.to_csv())?;
        let s_nn = noises[a] * tau;
        meta.push(json!({
            "file": name,
            "s_nn": s_nn,
            "s_nn_over_tau": noises[a],
            "t_avg_s": avg.t_avg,
            "t_avg_over_tau": t_avgs[b],
            "dt_s": avg.dt,
            "kernel_sigma_s": avg.kernel_sigma,
            "noise_variance": s_nn / avg.t_avg,
            "snr": if s_nn > 0.0 { Some(snr_gaussian(avg.t_avg, s_nn)) } else { None },
        }));
    }
    ctx.out.write_json(
        "traces.json",
        &json!({
            "tau_s": tau,
            "n_eq": bath.n_eq,
            "n_init": n0,
            "duration_s": duration,
            "events": trace.events(),
            "averaged": meta,
        }),
    )
}
