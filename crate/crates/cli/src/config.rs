//! TOML run configuration: typed, unit-suffixed keys, presets and validation.

use std::collections::BTreeSet;

use toml::{Table, Value};

use crate::error::CliError;

/// Keys accepted by each subcommand.
pub fn allowed_keys(command: &str) -> &'static [&'static str] {
    match command {
        "optics-scan" => &[
            "wavelength_m",
            "cavity_length_m",
            "mirror_r",
            "mirror_t",
            "membrane_thickness_m",
            "index_re",
            "index_im",
            "empty_finesse",
            "scan_points",
            "scan_start_m",
            "scan_stop_m",
        ],
        "fit" => &[
            "wavelength_m",
            "cavity_length_m",
            "mirror_r",
            "mirror_t",
            "membrane_thickness_m",
            "index_re",
            "empty_finesse",
            "synthetic_im_n",
            "synthetic_noise",
            "synthetic_points",
        ],
        "band-diagram" => &[
            "wavelength_m",
            "cavity_length_m",
            "membrane_thickness_m",
            "membrane_power_reflectivity",
            "bands",
            "scan_points",
        ],
        "cooling-map" => &[
            "omega_m_over_kappa",
            "g_over_kappa",
            "kappa_ratio",
            "gamma_m_over_kappa",
            "x_points",
            "x_max_scaled",
            "delta_points",
            "delta_max_scaled",
            "cross_section_x_scaled",
        ],
        "qnd-dist" | "info-curve" => &[
            "omega_m_hz",
            "gamma_over_omega_m",
            "t_bath_k",
            "n_init",
            "r_values",
            "t_avg_over_tau",
            "fft_points",
            "trim_mass",
        ],
        "qnd-trace" => &[
            "omega_m_hz",
            "gamma_over_omega_m",
            "t_bath_k",
            "n_init",
            "s_nn_over_tau",
            "t_avg_over_tau",
            "duration_over_tau",
            "dt_over_t_avg",
        ],
        _ => &[],
    }
}

fn table(pairs: &[(&str, Value)]) -> Table {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn floats(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|x| Value::Float(*x)).collect())
}

fn f(x: f64) -> Value {
    Value::Float(x)
}

fn int(x: i64) -> Value {
    Value::Integer(x)
}

/// Named parameter sets, one per reproduced figure.
pub fn preset(command: &str, name: &str) -> Option<Table> {
    let qnd_bath = |extra: &[(&str, Value)]| {
        let mut t = table(&[("omega_m_hz", f(1e5)), ("gamma_over_omega_m", f(1.2e-7)), ("t_bath_k", f(0.3))]);
        t.extend(table(extra));
        t
    };
    let t = match (command, name) {
        ("optics-scan", "fig3") => table(&[
            ("wavelength_m", f(1064e-9)),
            ("cavity_length_m", f(0.067)),
            ("mirror_r", f(0.99991)),
            ("mirror_t", f(5.28e-3)),
            ("membrane_thickness_m", f(50e-9)),
            ("index_re", f(2.2)),
            ("index_im", floats(&[0.0, 1.5e-4])),
            ("scan_points", int(201)),
        ]),
        ("optics-scan", "fig8-limit") => table(&[
            ("wavelength_m", f(1064e-9)),
            ("cavity_length_m", f(0.067)),
            ("membrane_thickness_m", f(50e-9)),
            ("index_re", f(2.15)),
            ("index_im", floats(&[1.5e-4])),
            ("empty_finesse", floats(&[1e5, 3.14e5, 1e6])),
            ("scan_points", int(201)),
        ]),
        ("fit", "fig7") => table(&[
            ("wavelength_m", f(1064e-9)),
            ("cavity_length_m", f(0.067)),
            ("mirror_r", f(0.99991)),
            ("mirror_t", f(5.28e-3)),
            ("membrane_thickness_m", f(50e-9)),
            ("index_re", f(2.2)),
            ("empty_finesse", f(16500.0)),
            ("synthetic_im_n", f(1.5e-4)),
            ("synthetic_noise", f(0.02)),
            ("synthetic_points", int(60)),
        ]),
        ("fit", "fig9") => table(&[
            ("wavelength_m", f(1064e-9)),
            ("cavity_length_m", f(0.067)),
            ("membrane_thickness_m", f(50e-9)),
            ("index_re", f(2.2)),
            ("empty_finesse", f(205000.0)),
            ("synthetic_im_n", f(2.3e-4)),
            ("synthetic_noise", f(0.02)),
            ("synthetic_points", int(60)),
        ]),
        ("band-diagram", "fig2") => table(&[
            ("wavelength_m", f(1064e-9)),
            ("cavity_length_m", f(0.067)),
            ("membrane_thickness_m", f(10e-9)),
            ("membrane_power_reflectivity", floats(&[0.0, 0.08, 0.45, 0.773, 0.982])),
            ("bands", int(3)),
            ("scan_points", int(201)),
        ]),
        ("cooling-map", "fig8a") => table(&[
            ("omega_m_over_kappa", f(1.0)),
            ("g_over_kappa", f(2.0)),
            ("x_points", int(201)),
            ("x_max_scaled", f(8.0)),
            ("delta_points", int(201)),
            ("delta_max_scaled", f(8.0)),
            ("cross_section_x_scaled", floats(&[0.0, 0.5, 1.0, 1.5, 2.0, 4.0, 8.0])),
        ]),
        ("cooling-map", "fig9") => table(&[
            ("omega_m_over_kappa", floats(&[0.25, 0.25, 1.0, 1.0, 4.0, 4.0])),
            ("g_over_kappa", floats(&[1.0, 2.0, 1.0, 2.0, 1.0, 2.0])),
            ("x_points", int(201)),
            ("x_max_scaled", f(8.0)),
            ("delta_points", int(201)),
            ("delta_max_scaled", f(8.0)),
        ]),
        ("qnd-dist", "fig12") => {
            qnd_bath(&[("n_init", floats(&[0.0])), ("r_values", floats(&[200.0, 61.0, 11.0, 1.0]))])
        }
        ("qnd-dist", "fig13") | ("info-curve", "fig13") => {
            qnd_bath(&[("n_init", floats(&[0.0, 1.0, 2.0, 4.0])), ("r_values", floats(&[11.0]))])
        }
        ("info-curve", "fig11") => qnd_bath(&[
            ("n_init", floats(&[0.0])),
            ("r_values", floats(&[1.0, 2.0, 5.0, 11.0, 20.0, 61.0, 100.0, 200.0])),
        ]),
        ("qnd-trace", "fig10-traces") => qnd_bath(&[
            ("n_init", f(0.0)),
            ("s_nn_over_tau", floats(&[0.001, 0.004])),
            ("t_avg_over_tau", floats(&[0.01, 0.05, 0.1, 0.2, 0.5, 1.0])),
            ("duration_over_tau", f(2.0)),
        ]),
        _ => return None,
    };
    Some(t)
}

pub fn preset_names(command: &str) -> Vec<&'static str> {
    let all = ["fig2", "fig3", "fig7", "fig8-limit", "fig8a", "fig9", "fig10-traces", "fig11", "fig12", "fig13"];
    all.into_iter().filter(|n| preset(command, n).is_some()).collect()
}

/// Validated view of a merged configuration table that records every value
/// it hands out, defaults included.
pub struct Params {
    command: String,
    table: Table,
    resolved: Table,
}

impl Params {
    pub fn new(command: &str, table: Table) -> Result<Self, CliError> {
        let allowed: BTreeSet<&str> = allowed_keys(command).iter().copied().collect();
        for key in table.keys() {
            if !allowed.contains(key.as_str()) {
                return Err(CliError::Config(format!(
                    "unknown key `{key}` for {command}; allowed keys: {}",
                    allowed.iter().copied().collect::<Vec<_>>().join(", ")
                )));
            }
        }
        Ok(Self { command: command.to_string(), table, resolved: Table::new() })
    }

    pub fn resolved(&self) -> &Table {
        &self.resolved
    }

    fn err(&self, key: &str, msg: impl std::fmt::Display) -> CliError {
        CliError::Config(format!("{}: key `{key}`: {msg}", self.command))
    }

    fn number(&self, key: &str, v: &Value) -> Result<f64, CliError> {
        match v {
            Value::Float(x) => Ok(*x),
            Value::Integer(i) => Ok(*i as f64),
            other => Err(self.err(key, format!("expected a number, found {}", other.type_str()))),
        }
    }

    pub fn f64_opt(&mut self, key: &str) -> Result<Option<f64>, CliError> {
        match self.table.get(key) {
            None => Ok(None),
            Some(v) => {
                let x = self.number(key, v)?;
                if !x.is_finite() {
                    return Err(self.err(key, "must be finite"));
                }
                self.resolved.insert(key.into(), Value::Float(x));
                Ok(Some(x))
            }
        }
    }

    pub fn f64(&mut self, key: &str, default: Option<f64>) -> Result<f64, CliError> {
        match self.f64_opt(key)? {
            Some(x) => Ok(x),
            None => {
                let x = default.ok_or_else(|| self.err(key, "required but missing"))?;
                self.resolved.insert(key.into(), Value::Float(x));
                Ok(x)
            }
        }
    }

    pub fn positive(&mut self, key: &str, default: Option<f64>) -> Result<f64, CliError> {
        let x = self.f64(key, default)?;
        if x > 0.0 {
            Ok(x)
        } else {
            Err(self.err(key, format!("must be positive, got {x}")))
        }
    }

    /// Accepts a scalar or an array of numbers.
    pub fn list(&mut self, key: &str, default: Option<&[f64]>) -> Result<Vec<f64>, CliError> {
        let xs = match self.table.get(key) {
            None => default.ok_or_else(|| self.err(key, "required but missing"))?.to_vec(),
            Some(Value::Array(a)) => a.iter().map(|v| self.number(key, v)).collect::<Result<_, _>>()?,
            Some(v) => vec![self.number(key, v)?],
        };
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(self.err(key, "entries must be finite"));
        }
        self.resolved.insert(key.into(), Value::Array(xs.iter().map(|x| Value::Float(*x)).collect()));
        Ok(xs)
    }

    pub fn count(&mut self, key: &str, default: usize, min: usize) -> Result<usize, CliError> {
        let n = match self.table.get(key) {
            None => default,
            Some(Value::Integer(i)) if *i >= 0 => *i as usize,
            Some(v) => return Err(self.err(key, format!("expected a non-negative integer, found {v}"))),
        };
        if n < min {
            return Err(self.err(key, format!("must be at least {min}, got {n}")));
        }
        self.resolved.insert(key.into(), Value::Integer(n as i64));
        Ok(n)
    }

    pub fn check(&self, cond: bool, key: &str, msg: impl std::fmt::Display) -> Result<(), CliError> {
        if cond {
            Ok(())
        } else {
            Err(self.err(key, msg))
        }
    }
}

/// Preset values overlaid by the configuration file.
pub fn merge(base: Option<Table>, overlay: Option<Table>) -> Table {
    let mut t = base.unwrap_or_default();
    if let Some(o) = overlay {
        t.extend(o);
    }
    t
}
