//! Experiment files and artifacts.
//!
//! An experiment is a TOML document describing the plant, the reference
//! model, the reference input and the tuning of every stage. Loading collects
//! every validation problem before giving up. Runs produce a trace CSV and a
//! JSON report of assertion outcomes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{BaselineSign, GainSchedule};
use crate::drem::DremConfig;
use crate::matrix::{determinant, rank, Mat};
use crate::parametrization::FilterConfig;
use crate::plant::{
    hurwitz_check, ideal_gains, PlantModel, ReferenceModel, CONTROLLABILITY_RANK_TOL, MATCHING_TOL,
};
use crate::sim::{
    compare_laws, run, AdaptiveLaw, FeThreshold, Precision, ReferenceChannel, ReferenceSignal,
    RunInfo, SimConfig, SimError, SimTrace,
};

/// Version of the JSON report layout and assertion names.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const BENCHMARK_TOML: &str = include_str!("../configs/benchmark.toml");
pub const MATCHED_TOML: &str = include_str!("../configs/matched.toml");
pub const SLOW_GAIN_TOML: &str = include_str!("../configs/slow_gain.toml");

/// Bundled configs, addressable as `builtin:<name>`.
pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "benchmark" => Some(BENCHMARK_TOML),
        "matched" => Some(MATCHED_TOML),
        "slow_gain" => Some(SLOW_GAIN_TOML),
        _ => None,
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("{origin}: invalid config:\n  {}", errors.join("\n  "))]
    Invalid { origin: String, errors: Vec<String> },
}

/// Process exit status of a CLI verb.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass = 0,
    AssertionFailure = 1,
    ConfigError = 2,
    Divergence = 3,
}

impl Status {
    pub fn code(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: Option<String>,
    plant: Option<RawPlant>,
    reference_model: Option<RawSystem>,
    reference: Option<Vec<ReferenceChannel>>,
    controller: Option<RawController>,
    filter: Option<RawFilter>,
    drem: Option<RawDrem>,
    adaptation: Option<RawAdaptation>,
    baseline: Option<RawBaseline>,
    simulation: Option<RawSimulation>,
    excitation: Option<RawExcitation>,
    output: Option<RawOutput>,
    assertions: Option<Assertions>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlant {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    x0: Vec<f64>,
    #[serde(default = "yes")]
    known: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    x0: Vec<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawController {
    theta_hat0: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFilter {
    l: Option<f64>,
    x0_known: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDrem {
    k: Option<f64>,
    scale: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAdaptation {
    gamma0: Option<f64>,
    gamma1: Option<f64>,
    sigma: Option<f64>,
    omega_epsilon: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBaseline {
    gamma: f64,
    #[serde(default = "both_signs")]
    signs: Vec<BaselineSign>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimulation {
    dt: Option<f64>,
    t_final: Option<f64>,
    precision: Option<Precision>,
    record_every: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExcitation {
    mode: Option<String>,
    alpha: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    csv_precision: Option<usize>,
}

fn yes() -> bool {
    true
}

fn both_signs() -> Vec<BaselineSign> {
    vec![BaselineSign::AsPrinted, BaselineSign::Corrected]
}

/// Assertion toggles and limits. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Assertions {
    /// Ideal-gain matching residual ≤ 1e-6.
    pub matching: bool,
    /// Each `|θ̃_i|` never grows by more than `monotonicity_tol`.
    pub monotonicity: bool,
    pub monotonicity_tol: f64,
    /// Exactly one `γ` branch switch.
    pub single_switch: bool,
    /// FE detection time inside `fe_window`.
    pub fe_detection: bool,
    pub fe_window: [f64; 2],
    /// Fitted slope of `ln‖θ̃‖` after `t_e` at most `−slope_factor·γ1`.
    pub decay_slope: bool,
    pub slope_factor: f64,
    /// `‖θ̃‖` below this is treated as resolved; later samples are left out of the fit.
    pub slope_floor: f64,
    /// Regression identities against the true parameters.
    pub oracle_residuals: bool,
    pub regression_tol: f64,
    pub mixing_tol: f64,
    /// Rows where `φ` exceeds this fraction of its peak enter the mixing checks.
    pub phi_fraction: f64,
    /// `max ‖ξ‖` finite.
    pub xi_bounded: bool,
    pub final_tracking: Option<f64>,
    pub final_theta_tilde: Option<f64>,
}

impl Default for Assertions {
    fn default() -> Self {
        Self {
            matching: false,
            monotonicity: true,
            monotonicity_tol: 1e-9,
            single_switch: true,
            fe_detection: true,
            fe_window: [0.05, 0.5],
            decay_slope: true,
            slope_factor: 0.5,
            slope_floor: 1e-20,
            oracle_residuals: true,
            regression_tol: 1e-6,
            mixing_tol: 1e-4,
            phi_fraction: 1e-3,
            xi_bounded: true,
            final_tracking: None,
            final_theta_tilde: None,
        }
    }
}

/// State-space matrices as written in the config.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub a: Mat<f64>,
    pub b: Mat<f64>,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSpec {
    pub gamma: f64,
    pub signs: Vec<BaselineSign>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub csv_precision: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub origin: String,
    pub plant: SystemSpec,
    /// `false` marks the plant as external: no oracle columns or checks.
    pub plant_known: bool,
    pub reference_model: SystemSpec,
    pub sim: SimConfig,
    pub baseline: Option<BaselineSpec>,
    pub output: OutputSpec,
    pub assertions: Assertions,
    pub warnings: Vec<String>,
}

impl ExperimentConfig {
    pub fn n(&self) -> usize {
        self.plant.a.rows()
    }
    pub fn m(&self) -> usize {
        self.plant.b.cols()
    }

    pub fn models(&self) -> Result<(PlantModel, ReferenceModel), crate::plant::PlantError> {
        let p = PlantModel::new(
            self.plant.a.clone(),
            self.plant.b.clone(),
            self.plant.x0.clone(),
        )?;
        let r = ReferenceModel::new(
            self.reference_model.a.clone(),
            self.reference_model.b.clone(),
            self.reference_model.x0.clone(),
        )?;
        Ok((p, r))
    }

    /// Applies command-line overrides and revalidates the simulation block.
    pub fn apply_overrides(&mut self, ov: &Overrides) -> Result<(), ConfigError> {
        if let Some(dt) = ov.dt {
            self.sim.dt = dt;
        }
        if let Some(t) = ov.t_final {
            self.sim.t_final = t;
        }
        if let Some(d) = &ov.out_dir {
            self.output.dir = d.clone();
        }
        if let Some(p) = ov.csv_precision {
            self.output.csv_precision = p;
        }
        let mut errors = Vec::new();
        if let Err(e) = self.sim.validate(self.n(), self.m()) {
            errors.extend(e);
        }
        check_precision(self.output.csv_precision, &mut errors);
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid {
                origin: self.origin.clone(),
                errors,
            })
        }
    }
}

/// Command-line overrides of config values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub dt: Option<f64>,
    pub t_final: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub csv_precision: Option<usize>,
    pub seed: Option<u64>,
}

fn check_precision(p: usize, errors: &mut Vec<String>) {
    if !(1..=17).contains(&p) {
        errors.push(format!("output.csv_precision must be in 1..=17, got {p}"));
    }
}

/// Reads a config from a path, or `builtin:<name>` for a bundled one.
pub fn load_config(path: &str) -> Result<ExperimentConfig, ConfigError> {
    if let Some(name) = path.strip_prefix("builtin:") {
        let text = bundled(name).ok_or_else(|| ConfigError::Io {
            path: path.into(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such bundled config"),
        })?;
        return parse_config(text, path);
    }
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.into(),
        source,
    })?;
    parse_config(&text, path)
}

fn matrix(field: &str, rows: &[Vec<f64>], errors: &mut Vec<String>) -> Option<Mat<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        errors.push(format!("{field}: matrix is empty"));
        return None;
    }
    if let Some(i) = rows.iter().position(|r| r.len() != rows[0].len()) {
        errors.push(format!(
            "{field}: row {} has {} entries, row 1 has {}",
            i + 1,
            rows[i].len(),
            rows[0].len()
        ));
        return None;
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        errors.push(format!("{field}: entries must be finite"));
        return None;
    }
    Mat::from_rows(rows).ok()
}

fn expect_shape(field: &str, m: &Mat<f64>, rows: usize, cols: usize, errors: &mut Vec<String>) {
    if m.rows() != rows || m.cols() != cols {
        errors.push(format!(
            "{field}: expected {rows}x{cols}, got {}x{}",
            m.rows(),
            m.cols()
        ));
    }
}

fn expect_len(field: &str, v: &[f64], n: usize, errors: &mut Vec<String>) {
    if v.len() != n {
        errors.push(format!("{field}: expected {n} entries, got {}", v.len()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        errors.push(format!("{field}: entries must be finite"));
    }
}

/// Parses and validates a config document. `origin` labels error messages.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
        origin: origin.into(),
        message: parse_message(text, &e),
    })?;
    let mut errors = Vec::new();
    let mut warnings = Vec::new();

    let plant = raw.plant.as_ref();
    if plant.is_none() {
        errors.push("missing [plant] section".into());
    }
    if raw.reference_model.is_none() {
        errors.push("missing [reference_model] section".into());
    }
    let pa = plant.and_then(|p| matrix("plant.a", &p.a, &mut errors));
    let pb = plant.and_then(|p| matrix("plant.b", &p.b, &mut errors));
    let ra = raw
        .reference_model
        .as_ref()
        .and_then(|r| matrix("reference_model.a", &r.a, &mut errors));
    let rb = raw
        .reference_model
        .as_ref()
        .and_then(|r| matrix("reference_model.b", &r.b, &mut errors));

    let n = pa.as_ref().map(|a| a.rows());
    let m = pb.as_ref().map(|b| b.cols());
    if let Some(a) = &pa {
        if a.rows() != a.cols() {
            errors.push(format!(
                "plant.a: must be square, got {}x{}",
                a.rows(),
                a.cols()
            ));
        }
    }
    if let (Some(n), Some(b)) = (n, &pb) {
        if b.rows() != n {
            errors.push(format!(
                "plant.b: expected {n} rows to match plant.a, got {}",
                b.rows()
            ));
        }
    }
    if let (Some(n), Some(p)) = (n, plant) {
        expect_len("plant.x0", &p.x0, n, &mut errors);
    }
    if let (Some(n), Some(m)) = (n, m) {
        if let Some(a) = &ra {
            expect_shape("reference_model.a", a, n, n, &mut errors);
        }
        if let Some(b) = &rb {
            expect_shape("reference_model.b", b, n, m, &mut errors);
        }
        if let Some(r) = &raw.reference_model {
            expect_len("reference_model.x0", &r.x0, n, &mut errors);
        }
    }

    let reference = match raw.reference {
        Some(ch) => ReferenceSignal { channels: ch },
        None => {
            errors.push("missing [[reference]] channels".into());
            ReferenceSignal { channels: vec![] }
        }
    };

    let theta_hat0 = raw
        .controller
        .and_then(|c| c.theta_hat0)
        .and_then(|rows| matrix("controller.theta_hat0", &rows, &mut errors));

    let filter = raw.filter.unwrap_or_default();
    let drem = raw.drem.unwrap_or_default();
    let adapt = raw.adaptation.unwrap_or_default();
    let simulation = raw.simulation.unwrap_or_default();
    let excitation = raw.excitation.unwrap_or_default();
    let output = raw.output.unwrap_or_default();

    let mut or_default = |value: Option<f64>, field: &str, default: f64| {
        value.unwrap_or_else(|| {
            warnings.push(format!("{field} not set; using {default}"));
            default
        })
    };
    let l = or_default(filter.l, "filter.l", 1.0);
    let k = or_default(drem.k, "drem.k", 10.0);
    let gamma0 = or_default(adapt.gamma0, "adaptation.gamma0", 1.0);
    let gamma1 = or_default(adapt.gamma1, "adaptation.gamma1", 10.0);
    let sigma = or_default(adapt.sigma, "adaptation.sigma", 0.5);
    let defaults = SimConfig::default();

    let fe_threshold = {
        let alpha = excitation.alpha.unwrap_or(1e-12);
        match excitation.mode.as_deref() {
            None | Some("absolute") => FeThreshold::Absolute(alpha),
            Some("relative") => FeThreshold::Relative(alpha),
            Some(other) => {
                errors.push(format!(
                    "excitation.mode: expected \"absolute\" or \"relative\", got {other:?}"
                ));
                FeThreshold::Absolute(alpha)
            }
        }
    };

    let sim = SimConfig {
        dt: simulation.dt.unwrap_or(defaults.dt),
        t_final: simulation.t_final.unwrap_or(defaults.t_final),
        reference,
        filter: FilterConfig {
            l,
            x0_known: filter.x0_known.unwrap_or(false),
        },
        drem: DremConfig {
            k,
            scale: drem.scale.unwrap_or(1.0),
        },
        sigma,
        schedule: GainSchedule {
            gamma0,
            gamma1,
            omega_epsilon: adapt.omega_epsilon.unwrap_or(1e-12),
        },
        law: AdaptiveLaw::Proposed,
        theta_hat0,
        fe_threshold,
        precision: simulation.precision.unwrap_or_default(),
        record_every: simulation.record_every.unwrap_or(1),
        oracle: plant.is_none_or(|p| p.known),
    };
    if let (Some(n), Some(m)) = (n, m) {
        if let Err(e) = sim.validate(n, m) {
            errors.extend(e);
        }
    }

    let baseline = raw.baseline.map(|b| {
        if !(b.gamma > 0.0 && b.gamma.is_finite()) {
            errors.push(format!("baseline.gamma must be positive, got {}", b.gamma));
        }
        if b.signs.is_empty() {
            errors.push("baseline.signs must not be empty".into());
        }
        BaselineSpec {
            gamma: b.gamma,
            signs: b.signs,
        }
    });

    let output = OutputSpec {
        dir: output.dir.unwrap_or_else(|| PathBuf::from("out")),
        csv_precision: output.csv_precision.unwrap_or(17),
    };
    check_precision(output.csv_precision, &mut errors);

    let assertions = raw.assertions.unwrap_or_default();
    let [lo, hi] = assertions.fe_window;
    if !(lo <= hi) {
        errors.push(format!(
            "assertions.fe_window: lower bound {lo} exceeds upper bound {hi}"
        ));
    }

    if !errors.is_empty() {
        return Err(ConfigError::Invalid {
            origin: origin.into(),
            errors,
        });
    }
    let (plant, rm) = (
        plant.expect("checked"),
        raw.reference_model.expect("checked"),
    );
    Ok(ExperimentConfig {
        name: raw.name.unwrap_or_else(|| stem(origin)),
        origin: origin.into(),
        plant: SystemSpec {
            a: pa.expect("checked"),
            b: pb.expect("checked"),
            x0: plant.x0.clone(),
        },
        plant_known: plant.known,
        reference_model: SystemSpec {
            a: ra.expect("checked"),
            b: rb.expect("checked"),
            x0: rm.x0,
        },
        sim,
        baseline,
        output,
        assertions,
        warnings,
    })
}

fn stem(origin: &str) -> String {
    let s = origin.strip_prefix("builtin:").unwrap_or(origin);
    Path::new(s)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "experiment".into())
}

fn parse_message(text: &str, e: &toml::de::Error) -> String {
    let msg = e.message().trim().to_string();
    match e.span() {
        Some(span) => {
            let upto = &text[..span.start.min(text.len())];
            let line = upto.matches('\n').count() + 1;
            let col = upto.len() - upto.rfind('\n').map_or(0, |i| i + 1) + 1;
            format!("line {line}, column {col}: {msg}")
        }
        None => msg,
    }
}

// ---------------------------------------------------------------------------
// CSV

/// Writes the trace with `sig` significant digits per value.
pub fn write_trace_csv<W: Write>(trace: &SimTrace, w: W, sig: usize) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(trace.columns())?;
    let prec = sig.clamp(1, 17) - 1;
    let mut buf = Vec::with_capacity(trace.width());
    for row in trace.rows() {
        buf.clear();
        buf.extend(row.iter().map(|v| format!("{v:.prec$e}")));
        out.write_record(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_trace_csv(trace: &SimTrace, path: &Path, sig: usize) -> Result<(), csv::Error> {
    let f = fs::File::create(path)?;
    write_trace_csv(trace, std::io::BufWriter::new(f), sig)
}

/// Reads a trace written by [`write_trace_csv`]. Only the column data comes
/// back; events and oracle diagnostics are not stored in the CSV.
pub fn read_trace_csv<R: Read>(r: R) -> Result<SimTrace, String> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd
        .headers()
        .map_err(|e| e.to_string())?
        .iter()
        .map(String::from)
        .collect();
    let count = |prefix: &str| {
        header
            .iter()
            .filter(|h| {
                h.strip_prefix(prefix)
                    .is_some_and(|d| d.parse::<usize>().is_ok())
            })
            .count()
    };
    let (n, m) = (count("x"), count("u"));
    let has_oracle = header.iter().any(|h| h == "thetatilde_norm");
    let mut rows = Vec::new();
    for (k, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| format!("row {}: {s:?}: {e}", k + 1))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    let dt = if rows.len() > 1 {
        rows[1][0] - rows[0][0]
    } else {
        0.0
    };
    let info = RunInfo {
        integrator: "rk4",
        dt,
        t_final: rows.last().map_or(0.0, |r| r[0]),
        steps: rows.len().saturating_sub(1),
        precision: Precision::default(),
        law: "unknown".into(),
        x0_known: false,
        regressor_scale: 1.0,
    };
    let tr = SimTrace::from_rows(n, m, has_oracle, rows, info)?;
    if tr.columns() != header {
        return Err("header does not match the trace schema".into());
    }
    Ok(tr)
}

// ---------------------------------------------------------------------------
// Assertions

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssertionResult {
    pub name: &'static str,
    pub unit: &'static str,
    pub passed: bool,
    pub measured: f64,
    pub limit: f64,
    pub detail: String,
}

impl AssertionResult {
    fn new(
        name: &'static str,
        unit: &'static str,
        measured: f64,
        limit: f64,
        passed: bool,
        detail: String,
    ) -> Self {
        Self {
            name,
            unit,
            passed,
            measured,
            limit,
            detail,
        }
    }
}

/// Least-squares slope of `y` against `t`.
pub fn ls_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let k = points.len() as f64;
    let (mt, my) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.0 / k, b + p.1 / k));
    let (sxy, sxx) = points.iter().fold((0.0, 0.0), |(a, b), p| {
        (a + (p.0 - mt) * (p.1 - my), b + (p.0 - mt) * (p.0 - mt))
    });
    (sxx > 0.0).then(|| sxy / sxx)
}

/// `(t, ln‖θ̃‖)` from `t_start` until `‖θ̃‖` first drops to `floor`.
pub fn decay_samples(trace: &SimTrace, t_start: f64, floor: f64) -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    for i in 0..trace.len() {
        let t = trace.t(i);
        if t < t_start {
            continue;
        }
        match trace.theta_tilde_norm(i) {
            Some(v) if v > floor => pts.push((t, v.ln())),
            _ => break,
        }
    }
    pts
}

/// Fitted decay slope of `ln‖θ̃‖` on `[t_start, t_floor]`, and the window end.
pub fn decay_slope(trace: &SimTrace, t_start: f64, floor: f64) -> Option<(f64, f64)> {
    let pts = decay_samples(trace, t_start, floor);
    ls_slope(&pts).map(|s| (s, pts.last().map_or(t_start, |p| p.0)))
}

/// Largest growth of any `|θ̃_i|` above its earlier minimum.
pub fn max_theta_tilde_growth(trace: &SimTrace) -> Option<f64> {
    let first = trace.theta_tilde_vec(0)?;
    let mut low: Vec<f64> = first.iter().map(|v| v.abs()).collect();
    let mut worst: f64 = 0.0;
    for i in 1..trace.len() {
        let v = trace.theta_tilde_vec(i)?;
        for (lo, x) in low.iter_mut().zip(v) {
            worst = worst.max(x.abs() - *lo);
            *lo = lo.min(x.abs());
        }
    }
    Some(worst)
}

/// Oracle identity residuals over a run: regression identity, and the
/// relative errors of `z`, `y_θ`, `Υ` over rows with large enough `φ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleSummary {
    pub regression: f64,
    pub z: f64,
    pub y_theta: f64,
    pub upsilon: f64,
    pub rows_checked: usize,
}

pub fn oracle_summary(trace: &SimTrace, phi_fraction: f64) -> Option<OracleSummary> {
    if trace.oracle.is_empty() {
        return None;
    }
    let phi_max = trace.oracle.iter().map(|o| o.phi).fold(0.0, f64::max);
    let mut s = OracleSummary {
        regression: 0.0,
        z: 0.0,
        y_theta: 0.0,
        upsilon: 0.0,
        rows_checked: 0,
    };
    for o in &trace.oracle {
        s.regression = nan_max(s.regression, o.regression_residual / (1.0 + o.phi_bar_norm));
        if phi_max > 0.0 && o.phi > phi_fraction * phi_max {
            s.z = nan_max(s.z, o.z_rel_err);
            s.y_theta = nan_max(s.y_theta, o.y_theta_rel_err);
            s.upsilon = nan_max(s.upsilon, o.upsilon_rel_err);
            s.rows_checked += 1;
        }
    }
    Some(s)
}

fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

fn le(measured: f64, limit: f64) -> bool {
    measured <= limit
}

/// Evaluates every enabled assertion on a proposed-law run.
pub fn assess(
    cfg: &ExperimentConfig,
    trace: &SimTrace,
    matching_residual: Option<f64>,
) -> Vec<AssertionResult> {
    let a = &cfg.assertions;
    let mut out = Vec::new();
    let oracle = trace.has_oracle();
    let last = trace.last();

    if a.matching {
        let r = matching_residual.unwrap_or(f64::NAN);
        out.push(AssertionResult::new(
            "matching_residual",
            "1",
            r,
            MATCHING_TOL,
            le(r, MATCHING_TOL),
            "‖A + B Kx − Aref‖ + ‖B Kr − Bref‖ for least-squares ideal gains".into(),
        ));
    }
    if a.fe_detection {
        let [lo, hi] = a.fe_window;
        let te = trace.t_e.unwrap_or(f64::NAN);
        out.push(AssertionResult::new(
            "fe_detection_time",
            "s",
            te,
            hi,
            te >= lo && te <= hi,
            format!("first time ∫Δ² ≥ α; window [{lo}, {hi}] s"),
        ));
    }
    if a.single_switch {
        let count = trace.switch_count() as f64;
        let events = trace
            .events
            .iter()
            .filter(|e| e.kind != crate::sim::EventKind::FeDetected)
            .count();
        out.push(AssertionResult::new(
            "gamma_switch_count",
            "count",
            count,
            1.0,
            count == 1.0 && events == 1,
            format!(
                "{events} switch event(s), first at {:?} s",
                trace.first_switch_time()
            ),
        ));
    }
    if !oracle {
        return finish_final_tracking(a, trace, out);
    }
    if a.monotonicity {
        let g = max_theta_tilde_growth(trace).unwrap_or(f64::NAN);
        out.push(AssertionResult::new(
            "theta_tilde_monotone",
            "1",
            g,
            a.monotonicity_tol,
            le(g, a.monotonicity_tol),
            "largest rise of any |θ̃_i| above its earlier minimum".into(),
        ));
    }
    if a.xi_bounded {
        let x = trace.max_xi_norm().unwrap_or(f64::NAN);
        out.push(AssertionResult::new(
            "xi_bounded",
            "1",
            x,
            f64::INFINITY,
            x.is_finite(),
            "max ‖ξ‖ over the run".into(),
        ));
    }
    if a.decay_slope {
        let limit = -a.slope_factor * cfg.sim.schedule.gamma1;
        let fit = trace
            .t_e
            .and_then(|te| decay_slope(trace, te, a.slope_floor));
        let (slope, detail) = match (trace.t_e, fit) {
            (Some(te), Some((s, end))) => (s, format!("fit of ln‖θ̃‖ on [{te:.4}, {end:.4}] s")),
            (None, _) => (f64::NAN, "no FE detection time".into()),
            (Some(_), None) => {
                let th = trace.theta_tilde_norm(last).unwrap_or(f64::NAN);
                if th <= a.slope_floor {
                    (
                        f64::NEG_INFINITY,
                        "‖θ̃‖ already below the floor at t_e".into(),
                    )
                } else {
                    (f64::NAN, "too few samples after t_e".into())
                }
            }
        };
        out.push(AssertionResult::new(
            "theta_tilde_decay_slope",
            "1/s",
            slope,
            limit,
            le(slope, limit),
            detail,
        ));
    }
    if a.oracle_residuals {
        if let Some(s) = oracle_summary(trace, a.phi_fraction) {
            out.push(AssertionResult::new(
                "regression_identity",
                "1",
                s.regression,
                a.regression_tol,
                le(s.regression, a.regression_tol),
                "max ‖z̄ − θ̄ᵀφ̄‖ / (1 + ‖φ̄‖)".into(),
            ));
            let rows = s.rows_checked;
            for (name, v, what) in [
                ("mixing_z", s.z, "z vs φ·θ̄"),
                ("mixing_y_theta", s.y_theta, "y_θ vs Δ·θ"),
                ("memory_upsilon", s.upsilon, "Υ vs Ω·θ"),
            ] {
                out.push(AssertionResult::new(
                    name,
                    "1",
                    v,
                    a.mixing_tol,
                    rows > 0 && le(v, a.mixing_tol),
                    format!(
                        "max relative error of {what} over {rows} rows with φ > {} max φ",
                        a.phi_fraction
                    ),
                ));
            }
        }
    }
    if let Some(lim) = a.final_theta_tilde {
        let v = trace.theta_tilde_norm(last).unwrap_or(f64::NAN);
        out.push(AssertionResult::new(
            "final_theta_tilde",
            "1",
            v,
            lim,
            le(v, lim),
            format!("‖θ̃‖ at t = {}", trace.t(last)),
        ));
    }
    finish_final_tracking(a, trace, out)
}

fn finish_final_tracking(
    a: &Assertions,
    trace: &SimTrace,
    mut out: Vec<AssertionResult>,
) -> Vec<AssertionResult> {
    if let Some(lim) = a.final_tracking {
        let last = trace.last();
        let v = trace.e_ref_norm(last);
        out.push(AssertionResult::new(
            "final_tracking_error",
            "1",
            v,
            lim,
            le(v, lim),
            format!("‖e_ref‖ at t = {}", trace.t(last)),
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub law: String,
    pub csv: Option<String>,
    pub rows: usize,
    pub t_e: Option<f64>,
    pub fe_level: f64,
    pub switch_times: Vec<f64>,
    pub final_e_ref_norm: f64,
    pub final_theta_tilde_norm: Option<f64>,
    pub max_xi_norm: Option<f64>,
    pub max_delta: f64,
    pub max_omega: f64,
}

impl RunSummary {
    pub fn of(trace: &SimTrace, csv: Option<String>) -> Self {
        let last = trace.last();
        let fold = |f: &dyn Fn(usize) -> f64| (0..trace.len()).map(f).fold(0.0, f64::max);
        Self {
            law: trace.info.law.clone(),
            csv,
            rows: trace.len(),
            t_e: trace.t_e,
            fe_level: trace.fe_level,
            switch_times: trace
                .events
                .iter()
                .filter(|e| e.kind != crate::sim::EventKind::FeDetected)
                .map(|e| e.t)
                .collect(),
            final_e_ref_norm: trace.e_ref_norm(last),
            final_theta_tilde_norm: trace.theta_tilde_norm(last),
            max_xi_norm: trace.max_xi_norm(),
            max_delta: fold(&|i| trace.delta(i)),
            max_omega: fold(&|i| trace.omega(i)),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub tool: String,
    pub verb: &'static str,
    pub config: String,
    pub name: String,
    pub seed: Option<u64>,
    pub run: Option<RunInfo>,
    pub warnings: Vec<String>,
    pub matching_residual: Option<f64>,
    pub runs: Vec<RunSummary>,
    pub assertions: Vec<AssertionResult>,
    pub error: Option<String>,
    pub status: Status,
    pub exit_code: u8,
}

impl Report {
    fn new(cfg: &ExperimentConfig, verb: &'static str, seed: Option<u64>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            tool: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
            verb,
            config: cfg.origin.clone(),
            name: cfg.name.clone(),
            seed,
            run: None,
            warnings: cfg.warnings.clone(),
            matching_residual: None,
            runs: Vec::new(),
            assertions: Vec::new(),
            error: None,
            status: Status::Pass,
            exit_code: 0,
        }
    }

    fn set_status(&mut self, s: Status) {
        self.status = s;
        self.exit_code = s.code();
    }

    fn settle(&mut self) {
        if self.error.is_none() {
            let ok = self.assertions.iter().all(|a| a.passed);
            self.set_status(if ok {
                Status::Pass
            } else {
                Status::AssertionFailure
            });
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable summary lines.
    pub fn lines(&self) -> Vec<String> {
        let mut v = vec![format!("{} ({}): {}", self.name, self.verb, self.config)];
        v.extend(self.warnings.iter().map(|w| format!("warning: {w}")));
        if let Some(r) = self.matching_residual {
            v.push(format!("matching residual {r:.3e}"));
        }
        for r in &self.runs {
            v.push(format!(
                "{}: t_e = {}, switches {:?}, final ‖e_ref‖ = {:.3e}, final ‖θ̃‖ = {}",
                r.law,
                r.t_e.map_or("none".into(), |t| format!("{t:.4} s")),
                r.switch_times,
                r.final_e_ref_norm,
                r.final_theta_tilde_norm
                    .map_or("n/a".into(), |t| format!("{t:.3e}")),
            ));
        }
        for a in &self.assertions {
            let unit = if a.unit == "1" {
                String::new()
            } else {
                format!(" {}", a.unit)
            };
            v.push(format!(
                "{} {}: measured {:.4e}{unit}, limit {:.4e} ({})",
                if a.passed { "PASS" } else { "FAIL" },
                a.name,
                a.measured,
                a.limit,
                a.detail
            ));
        }
        if let Some(e) = &self.error {
            v.push(format!("error: {e}"));
        }
        v.push(format!(
            "status: {:?} (exit {})",
            self.status, self.exit_code
        ));
        v
    }
}

fn write_report(report: &Report, dir: &Path, file: &str) -> std::io::Result<PathBuf> {
    let path = dir.join(file);
    fs::write(&path, report.to_json())?;
    Ok(path)
}

fn io_failure(report: &mut Report, e: impl std::fmt::Display) {
    report.error = Some(format!("I/O error: {e}"));
    report.set_status(Status::ConfigError);
}

fn sim_failure(report: &mut Report, e: SimError) {
    let s = match e {
        SimError::Divergence { .. } => Status::Divergence,
        _ => Status::ConfigError,
    };
    report.error = Some(e.to_string());
    report.set_status(s);
}

fn matching_residual(plant: &PlantModel, reference: &ReferenceModel) -> Option<f64> {
    ideal_gains::<f64>(plant, reference)
        .ok()
        .map(|g| g.residual)
}

/// Runs the proposed law, writes `<name>.csv` and `<name>_report.json` into
/// the output directory and returns the report.
pub fn run_experiment(cfg: &ExperimentConfig, seed: Option<u64>) -> Report {
    let mut report = Report::new(cfg, "run", seed);
    let (plant, reference) = match cfg.models() {
        Ok(m) => m,
        Err(e) => {
            report.error = Some(e.to_string());
            report.set_status(Status::ConfigError);
            return report;
        }
    };
    let residual = matching_residual(&plant, &reference);
    report.matching_residual = residual;
    if let Some(r) = residual.filter(|&r| r > MATCHING_TOL) {
        report.warnings.push(format!(
            "matching residual {r:.3e} exceeds {MATCHING_TOL:e}; oracle uses least-squares gains"
        ));
    }
    if let Err(e) = fs::create_dir_all(&cfg.output.dir) {
        io_failure(&mut report, e);
        return report;
    }
    let trace = match run(&cfg.sim, &plant, &reference) {
        Ok(t) => t,
        Err(e) => {
            sim_failure(&mut report, e);
            let _ = write_report(
                &report,
                &cfg.output.dir,
                &format!("{}_report.json", cfg.name),
            );
            return report;
        }
    };
    let csv_path = cfg.output.dir.join(format!("{}.csv", cfg.name));
    if let Err(e) = save_trace_csv(&trace, &csv_path, cfg.output.csv_precision) {
        io_failure(&mut report, e);
        return report;
    }
    report.run = Some(trace.info.clone());
    report
        .runs
        .push(RunSummary::of(&trace, Some(csv_path.display().to_string())));
    report.assertions = assess(cfg, &trace, residual);
    report.settle();
    if let Err(e) = write_report(
        &report,
        &cfg.output.dir,
        &format!("{}_report.json", cfg.name),
    ) {
        io_failure(&mut report, e);
    }
    report
}

/// Runs the proposed law next to each configured baseline variant.
pub fn compare_experiment(cfg: &ExperimentConfig, seed: Option<u64>) -> Report {
    let mut report = Report::new(cfg, "compare", seed);
    let Some(base) = &cfg.baseline else {
        report.error = Some("compare needs a [baseline] section with gamma".into());
        report.set_status(Status::ConfigError);
        return report;
    };
    let (plant, reference) = match cfg.models() {
        Ok(m) => m,
        Err(e) => {
            report.error = Some(e.to_string());
            report.set_status(Status::ConfigError);
            return report;
        }
    };
    report.matching_residual = matching_residual(&plant, &reference);
    if let Err(e) = fs::create_dir_all(&cfg.output.dir) {
        io_failure(&mut report, e);
        return report;
    }
    let cmp = match compare_laws(&cfg.sim, &plant, &reference, Some(base.gamma), &base.signs) {
        Ok(c) => c,
        Err(e) => {
            sim_failure(&mut report, e);
            let _ = write_report(
                &report,
                &cfg.output.dir,
                &format!("{}_compare_report.json", cfg.name),
            );
            return report;
        }
    };
    report.run = Some(cmp.proposed.info.clone());
    let save = |trace: &SimTrace, label: &str, report: &mut Report| {
        let path = cfg.output.dir.join(format!("{}_{label}.csv", cfg.name));
        match save_trace_csv(trace, &path, cfg.output.csv_precision) {
            Ok(()) => report
                .runs
                .push(RunSummary::of(trace, Some(path.display().to_string()))),
            Err(e) => io_failure(report, e),
        }
    };
    save(&cmp.proposed, "proposed", &mut report);
    let proposed_final = cmp.proposed.theta_tilde_norm(cmp.proposed.last());
    let mut per_law = BTreeMap::new();
    for (sign, res) in &cmp.baselines {
        let label = format!("baseline_{}", sign.label());
        match res {
            Ok(tr) => {
                save(tr, &label, &mut report);
                per_law.insert(label, tr.theta_tilde_norm(tr.last()));
                report
                    .assertions
                    .push(law_independence(&cmp.proposed, tr, sign.label()));
            }
            Err(SimError::Divergence { signal, t }) => {
                report.warnings.push(format!(
                    "{label} diverged: non-finite {signal} at t = {t} s"
                ));
                per_law.insert(label, Some(f64::INFINITY));
            }
            Err(e) => report.warnings.push(format!("{label} failed: {e}")),
        }
    }
    if let Some(p) = proposed_final {
        let lim = cfg.assertions.final_theta_tilde.unwrap_or(1e-3);
        report.assertions.push(AssertionResult::new(
            "proposed_final_theta_tilde",
            "1",
            p,
            lim,
            le(p, lim),
            "‖θ̃(T)‖ of the proposed law".into(),
        ));
        for (label, b) in per_law {
            let b = b.unwrap_or(f64::NAN);
            let ratio = b / p;
            report.assertions.push(AssertionResult::new(
                "baseline_gap",
                "ratio",
                ratio,
                10.0,
                ratio >= 10.0,
                format!("‖θ̃(T)‖ of {label} / proposed = {b:.3e} / {p:.3e}"),
            ));
        }
    }
    if report.error.is_none() {
        report.settle();
    }
    if let Err(e) = write_report(
        &report,
        &cfg.output.dir,
        &format!("{}_compare_report.json", cfg.name),
    ) {
        io_failure(&mut report, e);
    }
    report
}

/// Δ agrees bit for bit between two laws for as long as their θ̂ agree.
fn law_independence(a: &SimTrace, b: &SimTrace, label: &str) -> AssertionResult {
    let n = a.len().min(b.len());
    let same_theta = (0..n)
        .take_while(|&i| a.theta_hat_vec(i) == b.theta_hat_vec(i))
        .count();
    let mismatches = (0..same_theta)
        .filter(|&i| a.delta(i).to_bits() != b.delta(i).to_bits())
        .count();
    let horizon = if same_theta > 0 {
        a.t(same_theta - 1)
    } else {
        0.0
    };
    AssertionResult::new(
        "regression_law_independent",
        "rows",
        mismatches as f64,
        0.0,
        mismatches == 0 && same_theta > 0,
        format!("Δ compared on {same_theta} rows (t ≤ {horizon:.4} s) where θ̂ of baseline_{label} still equals the proposed θ̂"),
    )
}

// ---------------------------------------------------------------------------
// Describe

/// Static checks on the config without simulating.
pub fn describe(cfg: &ExperimentConfig) -> Vec<String> {
    let (n, m) = (cfg.n(), cfg.m());
    let mut v = vec![
        format!("{}: n = {n} states, m = {m} inputs", cfg.name),
        format!(
            "plant: {}",
            if cfg.plant_known {
                "known (oracle diagnostics on)"
            } else {
                "external (oracle diagnostics off)"
            }
        ),
    ];
    v.extend(cfg.warnings.iter().map(|w| format!("warning: {w}")));
    let b = &cfg.plant.b;
    let btb = &b.transpose() * b;
    let det_btb = determinant(&btb).unwrap_or(f64::NAN);
    let rb = rank(b, 1e-10);
    if rb < m {
        v.push(format!(
            "warning: B has rank {rb} < {m} (dependent columns), det(BᵀB) = {det_btb:.3e}"
        ));
    } else {
        v.push(format!("B: full column rank, det(BᵀB) = {det_btb:.3e}"));
    }
    let ctrb = controllability(&cfg.plant.a, b);
    let rc = rank(&ctrb, CONTROLLABILITY_RANK_TOL);
    v.push(if rc == n {
        format!("controllability: rank {rc} = n")
    } else {
        format!("warning: (A, B) not controllable, rank {rc} < {n}")
    });
    match hurwitz_check(&cfg.reference_model.a) {
        Ok(_) => v.push("A_ref: Hurwitz".into()),
        Err(e) => v.push(format!("Hurwitz failure: {e}")),
    }
    match cfg.models() {
        Ok((p, r)) => match ideal_gains::<f64>(&p, &r) {
            Ok(g) => {
                let verdict = if g.residual <= MATCHING_TOL {
                    "≤"
                } else {
                    ">"
                };
                v.push(format!(
                    "matching residual {:.3e} {verdict} {MATCHING_TOL:e}",
                    g.residual
                ));
                v.push(format!("ideal Kx =\n{}", indent(&g.kx)));
                v.push(format!("ideal Kr =\n{}", indent(&g.kr)));
            }
            Err(e) => v.push(format!("ideal gains unavailable: {e}")),
        },
        Err(e) => v.push(format!("models rejected: {e}")),
    }
    let s = &cfg.sim;
    v.push(format!(
        "simulation: rk4, dt = {}, T = {}, {} steps, precision {}",
        s.dt,
        s.t_final,
        s.steps(),
        s.precision
    ));
    v.push(format!(
        "tuning: l = {}, k = {}, s = {}, sigma = {}, gamma0 = {}, gamma1 = {}, x0_known = {}",
        s.filter.l,
        s.drem.k,
        s.drem.scale,
        s.sigma,
        s.schedule.gamma0,
        s.schedule.gamma1,
        s.filter.x0_known
    ));
    v
}

fn indent(m: &Mat<f64>) -> String {
    (0..m.rows())
        .map(|i| {
            let row: Vec<String> = (0..m.cols())
                .map(|j| format!("{:>12.5e}", m[(i, j)]))
                .collect();
            format!("  {}", row.join(" "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn controllability(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
    let n = a.rows();
    let m = b.cols();
    let mut c = Mat::zeros(n, n * m);
    let mut blk = b.clone();
    for k in 0..n {
        for i in 0..n {
            for j in 0..m {
                c[(i, k * m + j)] = blk[(i, j)];
            }
        }
        if a.cols() == n {
            blk = a * &blk;
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_benchmark_parses() {
        let c = parse_config(BENCHMARK_TOML, "builtin:benchmark").unwrap();
        assert_eq!((c.n(), c.m()), (4, 2));
        assert!(c.warnings.is_empty(), "{:?}", c.warnings);
        assert_eq!(c.sim.drem.scale, 1e4);
        assert_eq!(c.name, "benchmark");
        for name in ["matched", "slow_gain"] {
            parse_config(bundled(name).unwrap(), name).unwrap();
        }
    }

    #[test]
    fn missing_gamma1_defaults_with_warning() {
        let text = BENCHMARK_TOML.replace("gamma1 = 10.0\n", "");
        let c = parse_config(&text, "t").unwrap();
        assert_eq!(c.sim.schedule.gamma1, 10.0);
        assert!(c.warnings.iter().any(|w| w.contains("gamma1")));
    }

    #[test]
    fn collects_every_error() {
        let text = BENCHMARK_TOML
            .replace(
                "x0 = [-1.0, -0.5, 0.0, 0.0]\n# false",
                "x0 = [-1.0]\n# false",
            )
            .replace("dt = 1e-4", "dt = -1.0")
            .replace("sigma = 0.5", "sigma = 0.0");
        let Err(ConfigError::Invalid { errors, .. }) = parse_config(&text, "t") else {
            panic!("expected invalid")
        };
        assert!(errors.iter().any(|e| e.contains("plant.x0")), "{errors:?}");
        assert!(errors.iter().any(|e| e.contains("dt")), "{errors:?}");
        assert!(
            errors
                .iter()
                .any(|e| e.contains("sigma") || e.contains("σ")),
            "{errors:?}"
        );
    }

    #[test]
    fn parse_error_has_line() {
        let err = parse_config("name = \"x\"\n[plant\n", "t").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = parse_config("bogus = 1\n", "t").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn slope_fit() {
        let pts: Vec<(f64, f64)> = (0..50)
            .map(|i| (i as f64 * 0.1, 3.0 - 2.5 * i as f64 * 0.1))
            .collect();
        assert!((ls_slope(&pts).unwrap() + 2.5).abs() < 1e-12);
        assert_eq!(ls_slope(&pts[..1]), None);
    }
}
