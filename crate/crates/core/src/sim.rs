//! Fixed-step closed-loop simulation.
//!
//! Plant, reference model, filters, DREM extension, forgetting memory and
//! the parameter estimate advance together in one classical RK4 vector
//! field. Each step logs a trace row taken from the first-stage evaluation,
//! so every logged quantity belongs to the state at the row's time.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptation::{
    active_rhs_into, baseline_rhs_into, memory_rhs_into, AdaptationError, BaselineSign,
    GainSchedule,
};
use crate::drem::{controller_regression, drem_rhs_into, extract, DremConfig, DremError};
use crate::matrix::{det_adjugate_mul, min_eig_sym, Mat};
use crate::numeric::{Dd, Real};
use crate::parametrization::{filter_rhs, regressor_from, z_bar_from, FilterConfig};
use crate::plant::{ideal_gains, ControllerState, PlantError, PlantModel, ReferenceModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("non-finite {signal} at t = {t} s")]
    Divergence { signal: String, t: f64 },
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Drem(#[from] DremError),
    #[error(transparent)]
    Adaptation(#[from] AdaptationError),
}

/// One channel of the reference input `r(t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceChannel {
    Constant {
        value: f64,
    },
    /// `amplitude · (1 − e^{−rate·t})`.
    Rising {
        amplitude: f64,
        rate: f64,
    },
    /// Piecewise-linear through `(time, value)` points, held flat outside.
    Table {
        points: Vec<(f64, f64)>,
    },
}

impl ReferenceChannel {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            ReferenceChannel::Constant { value } => *value,
            ReferenceChannel::Rising { amplitude, rate } => amplitude * (1.0 - (-rate * t).exp()),
            ReferenceChannel::Table { points } => {
                let (first, last) = (points[0], points[points.len() - 1]);
                if t <= first.0 {
                    return first.1;
                }
                if t >= last.0 {
                    return last.1;
                }
                let i = points.partition_point(|p| p.0 <= t);
                let (t0, v0) = points[i - 1];
                let (t1, v1) = points[i];
                v0 + (v1 - v0) * (t - t0) / (t1 - t0)
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            ReferenceChannel::Constant { value } if !value.is_finite() => {
                Err("constant value must be finite".into())
            }
            ReferenceChannel::Rising { amplitude, rate }
                if !(amplitude.is_finite() && rate.is_finite()) =>
            {
                Err("rising amplitude and rate must be finite".into())
            }
            ReferenceChannel::Table { points } => {
                if points.is_empty() {
                    return Err("table needs at least one point".into());
                }
                if points.iter().any(|p| !(p.0.is_finite() && p.1.is_finite())) {
                    return Err("table entries must be finite".into());
                }
                if points.windows(2).any(|w| w[1].0 <= w[0].0) {
                    return Err("table times must be strictly increasing".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSignal {
    pub channels: Vec<ReferenceChannel>,
}

impl ReferenceSignal {
    pub fn eval(&self, t: f64) -> Vec<f64> {
        self.channels.iter().map(|c| c.eval(t)).collect()
    }

    /// `r1 = 1`, `r2 = 0.5 (1 − e^{−10t})`.
    pub fn benchmark() -> Self {
        Self {
            channels: vec![
                ReferenceChannel::Constant { value: 1.0 },
                ReferenceChannel::Rising {
                    amplitude: 0.5,
                    rate: 10.0,
                },
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    DoubleDouble,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::DoubleDouble => "double_double",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum FeThreshold {
    /// Fixed `α`.
    Absolute(f64),
    /// `α = c · max λ_max(s sᵀ) · 1 s` over the samples seen so far.
    Relative(f64),
}

impl Default for FeThreshold {
    fn default() -> Self {
        FeThreshold::Absolute(1e-12)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum AdaptiveLaw {
    Proposed,
    Baseline { gamma: f64, sign: BaselineSign },
}

impl AdaptiveLaw {
    pub fn label(&self) -> String {
        match self {
            AdaptiveLaw::Proposed => "proposed".into(),
            AdaptiveLaw::Baseline { sign, .. } => format!("baseline_{}", sign.label()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub t_final: f64,
    pub reference: ReferenceSignal,
    pub filter: FilterConfig,
    pub drem: DremConfig,
    pub sigma: f64,
    pub schedule: GainSchedule,
    pub law: AdaptiveLaw,
    /// `θ̂(0)`; `[0 I]ᵀ` when absent.
    pub theta_hat0: Option<Mat<f64>>,
    pub fe_threshold: FeThreshold,
    pub precision: Precision,
    /// Keep every k-th step in the trace (the final step is always kept).
    pub record_every: usize,
    /// Compute the true-parameter diagnostics (needs the plant to be known).
    pub oracle: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-4,
            t_final: 20.0,
            reference: ReferenceSignal::benchmark(),
            filter: FilterConfig::default(),
            drem: DremConfig::default(),
            sigma: 0.5,
            schedule: GainSchedule::default(),
            law: AdaptiveLaw::Proposed,
            theta_hat0: None,
            fe_threshold: FeThreshold::default(),
            precision: Precision::default(),
            record_every: 1,
            oracle: true,
        }
    }
}

impl SimConfig {
    /// Every problem found, not just the first.
    pub fn validate(&self, n: usize, m: usize) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            errs.push(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.t_final > self.dt && self.t_final.is_finite()) {
            errs.push(format!("T must exceed dt, got T = {}", self.t_final));
        }
        if self.reference.channels.len() != m {
            errs.push(format!(
                "reference signal has {} channels, plant has m = {m} inputs",
                self.reference.channels.len()
            ));
        }
        for (i, c) in self.reference.channels.iter().enumerate() {
            if let Err(e) = c.validate() {
                errs.push(format!("reference channel {}: {e}", i + 1));
            }
        }
        if let Err(e) = FilterConfig::new(self.filter.l, self.filter.x0_known) {
            errs.push(e.to_string());
        }
        if let Err(e) = DremConfig::new(self.drem.k, self.drem.scale) {
            errs.push(e.to_string());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            errs.push(AdaptationError::Sigma(self.sigma).to_string());
        }
        if let Err(e) = GainSchedule::new(
            self.schedule.gamma0,
            self.schedule.gamma1,
            self.schedule.omega_epsilon,
        ) {
            errs.push(e.to_string());
        }
        if let AdaptiveLaw::Baseline { gamma, .. } = self.law {
            if !(gamma > 0.0 && gamma.is_finite()) {
                errs.push(AdaptationError::BaselineGain(gamma).to_string());
            }
        }
        match self.fe_threshold {
            FeThreshold::Absolute(a) | FeThreshold::Relative(a) if !(a > 0.0 && a.is_finite()) => {
                errs.push(format!("FE threshold alpha must be positive, got {a}"))
            }
            _ => {}
        }
        if let Some(th) = &self.theta_hat0 {
            if let Err(e) = ControllerState::new(th.clone(), n, m) {
                errs.push(format!("initial theta_hat: {e}"));
            }
        }
        if self.record_every == 0 {
            errs.push("record_every must be at least 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round() as usize
    }
}

/// Finite-excitation monitor: trapezoid integral of `s sᵀ` and the first
/// time its smallest eigenvalue reaches `α`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeMonitor {
    pub gramian: Mat<f64>,
    pub threshold: FeThreshold,
    pub t: f64,
    pub t_e_detected: Option<f64>,
    prev: Option<Mat<f64>>,
    peak: f64,
}

impl FeMonitor {
    pub fn new(dim: usize, threshold: FeThreshold) -> Self {
        Self {
            gramian: Mat::zeros(dim, dim),
            threshold,
            t: 0.0,
            t_e_detected: None,
            prev: None,
            peak: 0.0,
        }
    }

    pub fn alpha(&self) -> f64 {
        match self.threshold {
            FeThreshold::Absolute(a) => a,
            FeThreshold::Relative(c) => c * self.peak,
        }
    }

    pub fn level(&self) -> f64 {
        if self.gramian.rows() == 1 {
            self.gramian[(0, 0)]
        } else {
            min_eig_sym(&self.gramian).unwrap_or(0.0)
        }
    }
}

/// Feeds the sample at the monitor's next time point; the first call
/// registers `t = 0` and later calls advance by `dt`.
pub fn fe_check(mut monitor: FeMonitor, sample: &[f64], dt: f64) -> FeMonitor {
    let outer = Mat::outer(sample, sample);
    let lam = sample.iter().map(|v| v * v).sum::<f64>();
    monitor.peak = monitor.peak.max(lam);
    if let Some(prev) = monitor.prev.take() {
        monitor.gramian = &monitor.gramian + &(&prev + &outer).scale(0.5 * dt);
        monitor.t += dt;
        if monitor.t_e_detected.is_none() {
            let alpha = monitor.alpha();
            if alpha > 0.0 && monitor.level() >= alpha {
                monitor.t_e_detected = Some(monitor.t);
            }
        }
    }
    monitor.prev = Some(outer);
    monitor
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// `γ` left its zero branch.
    SwitchOn,
    /// `γ` returned to its zero branch.
    SwitchOff,
    FeDetected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub t: f64,
    pub kind: EventKind,
}

/// True-parameter diagnostics for one logged row.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OracleRow {
    /// `‖z̄ − θ̄ᵀφ̄‖`, unscaled.
    pub regression_residual: f64,
    pub phi_bar_norm: f64,
    /// `det F`.
    pub phi: f64,
    /// `‖z − φθ̄‖ / ‖φθ̄‖` (NaN when `φ = 0`).
    pub z_rel_err: f64,
    /// `‖y_θ − Δθ‖ / ‖Δθ‖`.
    pub y_theta_rel_err: f64,
    /// `‖Υ − Ωθ‖ / ‖Ωθ‖`.
    pub upsilon_rel_err: f64,
    /// `λ_min(F) / ‖F‖`.
    pub f_min_eig_rel: f64,
    /// `‖(ẋ − ẋ_ref) − (A_ref e + B θ̃ᵀ ω)‖`.
    pub error_dynamics_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunInfo {
    pub integrator: &'static str,
    pub dt: f64,
    pub t_final: f64,
    pub steps: usize,
    pub precision: Precision,
    pub law: String,
    pub x0_known: bool,
    pub regressor_scale: f64,
}

/// Recorded run. Rows live in one row-major buffer with the column layout
/// reported by [`SimTrace::columns`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    n: usize,
    m: usize,
    has_oracle: bool,
    width: usize,
    data: Vec<f64>,
    pub oracle: Vec<OracleRow>,
    pub events: Vec<SimEvent>,
    pub t_e: Option<f64>,
    pub fe_level: f64,
    pub theta_true: Option<Mat<f64>>,
    pub info: RunInfo,
}

impl SimTrace {
    fn new(
        n: usize,
        m: usize,
        has_oracle: bool,
        info: RunInfo,
        theta_true: Option<Mat<f64>>,
    ) -> Self {
        let p = (n + m) * m;
        let width = 1 + 2 * n + m + 4 + p + if has_oracle { 2 } else { 0 } + 1;
        Self {
            n,
            m,
            has_oracle,
            width,
            data: Vec::new(),
            oracle: Vec::new(),
            events: Vec::new(),
            t_e: None,
            fe_level: 0.0,
            theta_true,
            info,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn has_oracle(&self) -> bool {
        self.has_oracle
    }
    pub fn len(&self) -> usize {
        self.data.len() / self.width
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn width(&self) -> usize {
        self.width
    }

    /// `t, x1.., xref1.., u1.., eref_norm, Delta, Omega, gamma,
    /// thetahat[i,j] (column-major), [thetatilde_norm, xi_norm,] switch_flag`.
    pub fn columns(&self) -> Vec<String> {
        let mut c = vec!["t".to_string()];
        c.extend((1..=self.n).map(|i| format!("x{i}")));
        c.extend((1..=self.n).map(|i| format!("xref{i}")));
        c.extend((1..=self.m).map(|i| format!("u{i}")));
        c.extend(["eref_norm", "Delta", "Omega", "gamma"].map(String::from));
        for j in 1..=self.m {
            for i in 1..=(self.n + self.m) {
                c.push(format!("thetahat[{i},{j}]"));
            }
        }
        if self.has_oracle {
            c.push("thetatilde_norm".into());
            c.push("xi_norm".into());
        }
        c.push("switch_flag".into());
        c
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.width)
    }

    fn off_x(&self) -> usize {
        1
    }
    fn off_xref(&self) -> usize {
        1 + self.n
    }
    fn off_u(&self) -> usize {
        1 + 2 * self.n
    }
    fn off_scalars(&self) -> usize {
        1 + 2 * self.n + self.m
    }
    fn off_theta(&self) -> usize {
        self.off_scalars() + 4
    }
    fn off_tail(&self) -> usize {
        self.off_theta() + (self.n + self.m) * self.m
    }

    pub fn t(&self, i: usize) -> f64 {
        self.row(i)[0]
    }
    pub fn x(&self, i: usize) -> &[f64] {
        &self.row(i)[self.off_x()..self.off_x() + self.n]
    }
    pub fn x_ref(&self, i: usize) -> &[f64] {
        &self.row(i)[self.off_xref()..self.off_xref() + self.n]
    }
    pub fn u(&self, i: usize) -> &[f64] {
        &self.row(i)[self.off_u()..self.off_u() + self.m]
    }
    pub fn e_ref_norm(&self, i: usize) -> f64 {
        self.row(i)[self.off_scalars()]
    }
    pub fn delta(&self, i: usize) -> f64 {
        self.row(i)[self.off_scalars() + 1]
    }
    pub fn omega(&self, i: usize) -> f64 {
        self.row(i)[self.off_scalars() + 2]
    }
    pub fn gamma(&self, i: usize) -> f64 {
        self.row(i)[self.off_scalars() + 3]
    }
    /// `vec(θ̂)`, column-major.
    pub fn theta_hat_vec(&self, i: usize) -> &[f64] {
        &self.row(i)[self.off_theta()..self.off_tail()]
    }
    pub fn theta_hat(&self, i: usize) -> Mat<f64> {
        let p = self.n + self.m;
        let v = self.theta_hat_vec(i);
        Mat::from_fn(p, self.m, |r, c| v[c * p + r])
    }
    pub fn theta_tilde_norm(&self, i: usize) -> Option<f64> {
        self.has_oracle.then(|| self.row(i)[self.off_tail()])
    }
    pub fn xi_norm(&self, i: usize) -> Option<f64> {
        self.has_oracle.then(|| self.row(i)[self.off_tail() + 1])
    }
    pub fn switch_flag(&self, i: usize) -> bool {
        self.row(i)[self.width - 1] != 0.0
    }

    /// `vec(θ̂ − θ)`, column-major, from the stored `f64` values.
    pub fn theta_tilde_vec(&self, i: usize) -> Option<Vec<f64>> {
        let th = self.theta_true.as_ref()?;
        let tv = th.vec_col_major();
        Some(
            self.theta_hat_vec(i)
                .iter()
                .zip(tv)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }

    pub fn last(&self) -> usize {
        self.len() - 1
    }

    /// Number of `γ` branch transitions in the logged rows.
    pub fn switch_count(&self) -> usize {
        (1..self.len())
            .filter(|&i| self.switch_flag(i) != self.switch_flag(i - 1))
            .count()
    }

    pub fn first_switch_time(&self) -> Option<f64> {
        self.events
            .iter()
            .find(|e| e.kind == EventKind::SwitchOn)
            .map(|e| e.t)
    }

    pub fn max_xi_norm(&self) -> Option<f64> {
        if !self.has_oracle {
            return None;
        }
        Some(
            (0..self.len())
                .filter_map(|i| self.xi_norm(i))
                .fold(0.0, f64::max),
        )
    }

    /// Row-major buffer, for exporters.
    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    /// Rebuilds a trace from exported rows (used for CSV round trips).
    pub fn from_rows(
        n: usize,
        m: usize,
        has_oracle: bool,
        rows: Vec<Vec<f64>>,
        info: RunInfo,
    ) -> Result<Self, String> {
        let mut tr = SimTrace::new(n, m, has_oracle, info, None);
        for (k, r) in rows.into_iter().enumerate() {
            if r.len() != tr.width {
                return Err(format!(
                    "row {k} has {} fields, expected {}",
                    r.len(),
                    tr.width
                ));
            }
            tr.data.extend(r);
        }
        Ok(tr)
    }
}

/// Offsets of the flat closed-loop state.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n: usize,
    m: usize,
    q: usize,
    x: usize,
    xr: usize,
    pb: usize,
    eps: usize,
    f: usize,
    g: usize,
    om: usize,
    up: usize,
    th: usize,
    len: usize,
}

impl Layout {
    fn new(n: usize, m: usize, q: usize) -> Self {
        let p = (n + m) * m;
        let x = 0;
        let xr = x + n;
        let pb = xr + n;
        let eps = pb + n + m;
        let f = eps + 1;
        let g = f + q * q;
        let om = g + q * n;
        let up = om + 1;
        let th = up + p;
        Self {
            n,
            m,
            q,
            x,
            xr,
            pb,
            eps,
            f,
            g,
            om,
            up,
            th,
            len: th + p,
        }
    }

    fn segments(&self) -> [(&'static str, usize, usize); 9] {
        [
            ("x", self.x, self.xr),
            ("x_ref", self.xr, self.pb),
            ("phi_bar", self.pb, self.eps),
            ("decay", self.eps, self.f),
            ("F", self.f, self.g),
            ("G", self.g, self.om),
            ("Omega", self.om, self.up),
            ("Upsilon", self.up, self.th),
            ("theta_hat", self.th, self.len),
        ]
    }
}

/// Quantities produced while evaluating the vector field.
struct Aux<T: Real> {
    u: Vec<T>,
    omega_vec: Vec<T>,
    delta: T,
    y_theta: Mat<T>,
    phi: T,
    z: Mat<T>,
    active: bool,
    rate: T,
    z_bar: Vec<T>,
    phi_bar_ext: Vec<T>,
}

struct ClosedLoop<'a, T: Real> {
    cfg: &'a SimConfig,
    reference: &'a ReferenceModel,
    lay: Layout,
    a: Mat<T>,
    b: Mat<T>,
    a_ref: Mat<T>,
    b_ref: Mat<T>,
    x0: Option<Vec<T>>,
    l: T,
    k: T,
    s: T,
    sigma: T,
}

fn sym_copy<T: Real>(y: &[T], q: usize) -> Mat<T> {
    let mut f = Mat::new_unchecked(q, q, y.to_vec());
    f.symmetrize();
    f
}

impl<'a, T: Real> ClosedLoop<'a, T> {
    fn rhs(
        &self,
        t: f64,
        y: &[T],
        dy: &mut [T],
        running_max_omega: T,
        branch: Option<bool>,
    ) -> Result<Aux<T>, SimError> {
        let Layout {
            n,
            m,
            q,
            x: ox,
            xr,
            pb,
            eps,
            f: of,
            g: og,
            om,
            up,
            th,
            ..
        } = self.lay;
        let p = n + m;
        let x = &y[ox..ox + n];
        let x_ref = &y[xr..xr + n];
        let theta = Mat::new_unchecked(p, m, y[th..th + p * m].to_vec());

        let r: Vec<T> = self.cfg.reference.eval(t).into_iter().map(T::lit).collect();
        let omega_vec: Vec<T> = x.iter().chain(&r).copied().collect();
        let u = theta.tr_mul_vec(&omega_vec).expect("θ̂ shape");

        for i in 0..n {
            let mut dx = T::zero();
            let mut dxr = T::zero();
            for j in 0..n {
                dx += self.a[(i, j)] * x[j];
                dxr += self.a_ref[(i, j)] * x_ref[j];
            }
            for j in 0..m {
                dx += self.b[(i, j)] * u[j];
                dxr += self.b_ref[(i, j)] * r[j];
            }
            dy[ox + i] = dx;
            dy[xr + i] = dxr;
        }

        let big_phi: Vec<T> = x.iter().chain(&u).copied().collect();
        let (dpb, deps) = filter_rhs(self.l, &y[pb..pb + p], y[eps], &big_phi);
        dy[pb..pb + p].copy_from_slice(&dpb);
        dy[eps] = deps;

        let x0_known = self.cfg.filter.x0_known;
        let z_bar = z_bar_from(x, &y[pb..pb + n], y[eps], self.l, self.x0.as_deref());
        let phi_bar_ext = regressor_from(&y[pb..pb + p], y[eps], x0_known);
        let zs: Vec<T> = z_bar.iter().map(|&v| v * self.s).collect();
        let ps: Vec<T> = phi_bar_ext.iter().map(|&v| v * self.s).collect();
        {
            let (head, tail) = dy.split_at_mut(og);
            drem_rhs_into(
                self.k,
                &y[of..of + q * q],
                &y[og..og + q * n],
                &ps,
                &zs,
                &mut head[of..],
                &mut tail[..q * n],
            );
        }

        let f = sym_copy(&y[of..of + q * q], q);
        let g = Mat::new_unchecked(q, n, y[og..og + q * n].to_vec());
        let (phi, z) = det_adjugate_mul(&f, &g).map_err(DremError::from)?;
        let (z_a, z_b) = extract(&z, n, m)?;
        let (delta, y_theta) = controller_regression(&z_a, &z_b, phi, self.reference)?;

        dy[om] = memory_rhs_into(
            self.sigma,
            T::lit(t),
            y[om],
            &y[up..up + p * m],
            delta,
            y_theta.data(),
            &mut dy[up..up + p * m],
        );

        let sched = &self.cfg.schedule;
        let active = matches!(self.cfg.law, AdaptiveLaw::Proposed)
            && branch.unwrap_or_else(|| sched.is_active(y[om], running_max_omega));
        let rate = sched.rate(&omega_vec);
        match self.cfg.law {
            AdaptiveLaw::Proposed if active => {
                active_rhs_into(
                    &y[th..th + p * m],
                    y[om],
                    &y[up..up + p * m],
                    rate,
                    &mut dy[th..th + p * m],
                );
            }
            AdaptiveLaw::Proposed => dy[th..th + p * m].iter_mut().for_each(|v| *v = T::zero()),
            AdaptiveLaw::Baseline { gamma, sign } => {
                baseline_rhs_into(
                    &y[th..th + p * m],
                    delta,
                    y_theta.data(),
                    T::lit(gamma),
                    sign,
                    &mut dy[th..th + p * m],
                );
            }
        }

        Ok(Aux {
            u,
            omega_vec,
            delta,
            y_theta,
            phi,
            z,
            active,
            rate,
            z_bar,
            phi_bar_ext,
        })
    }

    /// One RK4 step of size `h` from `y`, given the first stage `k[0]`.
    fn rk4(
        &self,
        t: f64,
        h: f64,
        y: &[T],
        k: &mut [Vec<T>],
        running_max: T,
        branch: Option<bool>,
    ) -> Result<Vec<T>, SimError> {
        let len = self.lay.len;
        let hh = T::lit(h);
        let half = T::lit(0.5);
        let mut stage = vec![T::zero(); len];
        for s in 1..4 {
            let c = if s == 3 { hh } else { half * hh };
            for i in 0..len {
                stage[i] = y[i] + c * k[s - 1][i];
            }
            let ts = t + if s == 3 { h } else { 0.5 * h };
            self.rhs(ts, &stage, &mut k[s], running_max, branch)?;
        }
        let sixth = hh / T::lit(6.0);
        let two = T::lit(2.0);
        let mut out: Vec<T> = (0..len)
            .map(|i| y[i] + sixth * (k[0][i] + two * k[1][i] + two * k[2][i] + k[3][i]))
            .collect();
        // keep F exactly symmetric
        let (q, f) = (self.lay.q, self.lay.f);
        for i in 0..q {
            for j in (i + 1)..q {
                let (a, b) = (f + i * q + j, f + j * q + i);
                let avg = (out[a] + out[b]) * half;
                out[a] = avg;
                out[b] = avg;
            }
        }
        Ok(out)
    }

    /// Steps across the switching surface `Ω = threshold`: locates the
    /// crossing time by bisection on the inactive flow, then finishes the
    /// step on the active branch. Returns the new state and the switch time.
    fn step_with_switch(
        &self,
        t: f64,
        dt: f64,
        y: &[T],
        k: &mut [Vec<T>],
        running_max: T,
    ) -> Result<(Vec<T>, Option<f64>), SimError> {
        let om = self.lay.om;
        let k0 = k[0].clone();
        let full = self.rk4(t, dt, y, k, running_max, Some(false))?;
        let thr = self.cfg.schedule.threshold(running_max);
        if !(full[om] > thr) {
            return Ok((full, None));
        }
        let (mut lo, mut hi) = (0.0, dt);
        let mut y_hi = full;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            k[0].copy_from_slice(&k0);
            let ym = self.rk4(t, mid, y, k, running_max, Some(false))?;
            if ym[om] > thr {
                hi = mid;
                y_hi = ym;
            } else {
                lo = mid;
            }
        }
        let rest = dt - hi;
        if rest <= 0.0 {
            return Ok((y_hi, Some(t + hi)));
        }
        self.rhs(t + hi, &y_hi, &mut k[0], running_max, Some(true))?;
        let out = self.rk4(t + hi, rest, &y_hi, k, running_max, Some(true))?;
        Ok((out, Some(t + hi)))
    }

    fn check_finite(&self, y: &[T], t: f64) -> Result<(), SimError> {
        for (name, a, b) in self.lay.segments() {
            if y[a..b].iter().any(|v| !v.is_finite()) {
                return Err(SimError::Divergence {
                    signal: name.into(),
                    t,
                });
            }
        }
        Ok(())
    }
}

/// Internal state of θ̂ is stored row-major `(n+m)×m`; the trace stores it
/// column-major.
fn col_major<T: Real>(theta: &[T], p: usize, m: usize) -> impl Iterator<Item = f64> + '_ {
    (0..m).flat_map(move |j| (0..p).map(move |i| theta[i * m + j].to_f64_lossy()))
}

fn rel_err<T: Real>(a: &Mat<T>, b: &Mat<T>) -> f64 {
    let scale = b.data().iter().fold(T::zero(), |acc, v| acc.max(v.abs()));
    if scale == T::zero() {
        return f64::NAN;
    }
    let a = a.map(|v| v / scale);
    let b = b.map(|v| v / scale);
    ((&a - &b).frobenius_norm() / b.frobenius_norm()).to_f64_lossy()
}

pub fn run(
    cfg: &SimConfig,
    plant: &PlantModel,
    reference: &ReferenceModel,
) -> Result<SimTrace, SimError> {
    match cfg.precision {
        Precision::DoubleDouble => run_generic::<Dd>(cfg, plant, reference),
        Precision::F64 => run_generic::<f64>(cfg, plant, reference),
    }
}

fn run_generic<T: Real>(
    cfg: &SimConfig,
    plant: &PlantModel,
    reference: &ReferenceModel,
) -> Result<SimTrace, SimError> {
    let (n, m) = (plant.n(), plant.m());
    if reference.n() != n || reference.m() != m {
        return Err(SimError::Config(format!(
            "plant is {n}x{m} but reference model is {}x{}",
            reference.n(),
            reference.m()
        )));
    }
    cfg.validate(n, m)
        .map_err(|e| SimError::Config(e.join("; ")))?;

    let q = cfg.filter.regressor_dim(n, m);
    let lay = Layout::new(n, m, q);
    let p = n + m;
    let lp = ClosedLoop::<T> {
        cfg,
        reference,
        lay,
        a: plant.a().cast(),
        b: plant.b().cast(),
        a_ref: reference.a_ref().cast(),
        b_ref: reference.b_ref().cast(),
        x0: cfg
            .filter
            .x0_known
            .then(|| plant.x0().iter().map(|&v| T::lit(v)).collect()),
        l: T::lit(cfg.filter.l),
        k: T::lit(cfg.drem.k),
        s: T::lit(cfg.drem.scale),
        sigma: T::lit(cfg.sigma),
    };

    let oracle = if cfg.oracle {
        let gains = ideal_gains::<T>(plant, reference)?;
        Some((gains.theta(), plant.theta_ab_bar::<T>(!cfg.filter.x0_known)))
    } else {
        None
    };

    let steps = cfg.steps();
    let info = RunInfo {
        integrator: "rk4",
        dt: cfg.dt,
        t_final: steps as f64 * cfg.dt,
        steps,
        precision: cfg.precision,
        law: cfg.law.label(),
        x0_known: cfg.filter.x0_known,
        regressor_scale: cfg.drem.scale,
    };
    let mut trace = SimTrace::new(
        n,
        m,
        oracle.is_some(),
        info,
        oracle.as_ref().map(|(th, _)| th.cast::<f64>()),
    );

    let mut y = vec![T::zero(); lay.len];
    for i in 0..n {
        y[lay.x + i] = T::lit(plant.x0()[i]);
        y[lay.xr + i] = T::lit(reference.x0_ref()[i]);
    }
    y[lay.eps] = T::one();
    let theta0 = cfg
        .theta_hat0
        .clone()
        .unwrap_or_else(|| ControllerState::initial(n, m).theta_hat().clone());
    for (d, &v) in y[lay.th..].iter_mut().zip(theta0.data()) {
        *d = T::lit(v);
    }

    let mut k = vec![vec![T::zero(); lay.len]; 4];
    let mut running_max = T::zero();
    let mut fe = FeMonitor::new(1, cfg.fe_threshold);
    let mut prev_active: Option<bool> = None;

    for step in 0..=steps {
        let t = step as f64 * cfg.dt;
        let aux = lp.rhs(t, &y, &mut k[0], running_max, None)?;
        if aux.u.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Divergence {
                signal: "u".into(),
                t,
            });
        }
        if !aux.delta.is_finite() {
            return Err(SimError::Divergence {
                signal: "Delta".into(),
                t,
            });
        }

        match prev_active {
            Some(was) if was != aux.active => trace.events.push(SimEvent {
                t,
                kind: if aux.active {
                    EventKind::SwitchOn
                } else {
                    EventKind::SwitchOff
                },
            }),
            None if aux.active => trace.events.push(SimEvent {
                t,
                kind: EventKind::SwitchOn,
            }),
            _ => {}
        }
        prev_active = Some(aux.active);

        let had_te = fe.t_e_detected.is_some();
        fe = fe_check(fe, &[aux.delta.to_f64_lossy()], cfg.dt);
        if !had_te {
            if let Some(te) = fe.t_e_detected {
                trace.events.push(SimEvent {
                    t: te,
                    kind: EventKind::FeDetected,
                });
            }
        }

        if step % cfg.record_every == 0 || step == steps {
            record_row(&mut trace, &lp, &y, &k[0], t, &aux, oracle.as_ref(), p);
        }
        if step == steps {
            break;
        }

        y = if matches!(cfg.law, AdaptiveLaw::Proposed) && !aux.active {
            let (next, switched) = lp.step_with_switch(t, cfg.dt, &y, &mut k, running_max)?;
            if let Some(ts) = switched {
                trace.events.push(SimEvent {
                    t: ts,
                    kind: EventKind::SwitchOn,
                });
                prev_active = Some(true);
            }
            next
        } else {
            lp.rk4(t, cfg.dt, &y, &mut k, running_max, None)?
        };
        lp.check_finite(&y, t + cfg.dt)?;
        if y[lay.om] > running_max {
            running_max = y[lay.om];
        }
    }

    trace.t_e = fe.t_e_detected;
    trace.fe_level = fe.level();
    Ok(trace)
}

#[allow(clippy::too_many_arguments)]
fn record_row<T: Real>(
    trace: &mut SimTrace,
    lp: &ClosedLoop<'_, T>,
    y: &[T],
    dy: &[T],
    t: f64,
    aux: &Aux<T>,
    oracle: Option<&(Mat<T>, Mat<T>)>,
    p: usize,
) {
    let lay = lp.lay;
    let (n, m) = (lay.n, lay.m);
    let x = &y[lay.x..lay.x + n];
    let xr = &y[lay.xr..lay.xr + n];
    let e: Vec<T> = x.iter().zip(xr).map(|(&a, &b)| a - b).collect();
    let e_norm = crate::numeric::norm(&e);
    let omega = y[lay.om];
    let gamma = match lp.cfg.law {
        AdaptiveLaw::Proposed if aux.active => (aux.rate / omega / omega).to_f64_lossy(),
        AdaptiveLaw::Proposed => 0.0,
        AdaptiveLaw::Baseline { gamma, .. } => gamma,
    };
    let theta = &y[lay.th..lay.th + p * m];

    let d = &mut trace.data;
    d.push(t);
    d.extend(x.iter().map(|v| v.to_f64_lossy()));
    d.extend(xr.iter().map(|v| v.to_f64_lossy()));
    d.extend(aux.u.iter().map(|v| v.to_f64_lossy()));
    d.push(e_norm.to_f64_lossy());
    d.push(aux.delta.to_f64_lossy());
    d.push(omega.to_f64_lossy());
    d.push(gamma);
    d.extend(col_major(theta, p, m));

    if let Some((theta_true, theta_bar)) = oracle {
        let th_hat = Mat::new_unchecked(p, m, theta.to_vec());
        let tilde = &th_hat - theta_true;
        let tn = tilde.frobenius_norm();
        let xi = (e_norm * e_norm + tn * tn).sqrt();
        trace.data.push(tn.to_f64_lossy());
        trace.data.push(xi.to_f64_lossy());

        let pred = theta_bar.tr_mul_vec(&aux.phi_bar_ext).expect("θ̄ shape");
        let resid: Vec<T> = aux.z_bar.iter().zip(&pred).map(|(&a, &b)| a - b).collect();
        let upsilon = Mat::new_unchecked(p, m, y[lay.up..lay.up + p * m].to_vec());
        let f = sym_copy(&y[lay.f..lay.f + lay.q * lay.q], lay.q);
        let fnorm = f.frobenius_norm().to_f64_lossy();
        let f_min_eig_rel = if fnorm > 0.0 {
            min_eig_sym(&f.cast::<f64>())
                .map(|v| v / fnorm)
                .unwrap_or(f64::NAN)
        } else {
            0.0
        };
        // Error dynamics: (ẋ − ẋ_ref) − (A_ref e + B θ̃ᵀ ω)
        let bt = tilde.tr_mul_vec(&aux.omega_vec).expect("θ̃ shape");
        let mut ed = T::zero();
        for i in 0..n {
            let mut rhs = T::zero();
            for j in 0..n {
                rhs += lp.a_ref[(i, j)] * e[j];
            }
            for j in 0..m {
                rhs += lp.b[(i, j)] * bt[j];
            }
            let lhs = dy[lay.x + i] - dy[lay.xr + i];
            ed += (lhs - rhs) * (lhs - rhs);
        }
        trace.oracle.push(OracleRow {
            regression_residual: crate::numeric::norm(&resid).to_f64_lossy(),
            phi_bar_norm: crate::numeric::norm(&aux.phi_bar_ext).to_f64_lossy(),
            phi: aux.phi.to_f64_lossy(),
            z_rel_err: rel_err(&aux.z, &theta_bar.scale(aux.phi)),
            y_theta_rel_err: rel_err(&aux.y_theta, &theta_true.scale(aux.delta)),
            upsilon_rel_err: rel_err(&upsilon, &theta_true.scale(omega)),
            f_min_eig_rel,
            error_dynamics_residual: ed.sqrt().to_f64_lossy(),
        });
    }
    trace.data.push(if aux.active { 1.0 } else { 0.0 });
}

/// Proposed law alongside each requested baseline variant, all on the same
/// plant, reference input and initial conditions.
#[derive(Debug)]
pub struct LawComparison {
    pub proposed: SimTrace,
    pub baselines: Vec<(BaselineSign, Result<SimTrace, SimError>)>,
}

pub fn compare_laws(
    cfg: &SimConfig,
    plant: &PlantModel,
    reference: &ReferenceModel,
    baseline_gamma: Option<f64>,
    signs: &[BaselineSign],
) -> Result<LawComparison, SimError> {
    let mut proposed_cfg = cfg.clone();
    proposed_cfg.law = AdaptiveLaw::Proposed;
    let proposed = run(&proposed_cfg, plant, reference)?;
    let mut baselines = Vec::new();
    if let Some(gamma) = baseline_gamma {
        for &sign in signs {
            let mut c = cfg.clone();
            c.law = AdaptiveLaw::Baseline { gamma, sign };
            baselines.push((sign, run(&c, plant, reference)));
        }
    }
    Ok(LawComparison {
        proposed,
        baselines,
    })
}
