//! Fixed-step time-domain simulation of the grid, disturbances, attack
//! injection, and the estimation loop, plus the end-to-end pipeline that
//! wires parsing, clustering, observer design, and metrics together.
//!
//! The integrator is classic RK4 at a fixed `dt`; event times snap to the
//! grid, so identical inputs give bit-identical outputs.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::attack::{classify, AttackError, AttackScenario, AttackSignal, Classification};
use crate::clustering::{
    approximation_error, augment_measurement_matrix, build_pi, cluster_coefficients,
    compute_phi, form_clusters, form_clusters_target_k, min_theta_for_coverage, ClusterError,
    ClusterSet,
};
use crate::grid::{
    assemble_state_space, build_measurement_matrix, default_sensors, load_disturbance, GridError,
    GridSpec, SensorQuantity, SensorSpec,
};
use crate::lti::{decompose_semistable, default_tol_zero, LtiError, LtiSystem};
use crate::observer::{design_gain, error_system_poles, ObserverDesign, ObserverError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    ConfigInvalid(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("state diverged at t = {t:.3}s (‖x‖ = {norm:.3e})")]
    UnstableStep { t: f64, norm: f64 },
    #[error("grid stage: {0}")]
    Grid(#[from] GridError),
    #[error("model stage: {0}")]
    Lti(#[from] LtiError),
    #[error("clustering stage: {0}")]
    Cluster(#[from] ClusterError),
    #[error("attack stage: {0}")]
    Attack(#[from] AttackError),
    #[error("observer stage: {0}")]
    Observer(#[from] ObserverError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

// ---------------------------------------------------------------------------
// scenario description (config file layer)
// ---------------------------------------------------------------------------

/// Piecewise-constant load deviation: `delta` p.u. added on `[t_on, t_off)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LoadEvent {
    pub bus: usize,
    pub delta: f64,
    pub t_on: f64,
    pub t_off: f64,
}

/// Which sensors an attack line targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorGroup {
    All,
    Gen,
    Load,
    Bus(usize),
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct AttackLine {
    pub quantity: SensorQuantity,
    pub group: SensorGroup,
    pub signal: AttackSignal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorMode {
    /// Plant only, no estimation.
    None,
    /// Observer on the trusted rows (all rows when nothing is attacked).
    Standard,
    /// Observer on the cluster-augmented measurement matrix.
    Resilient,
    /// Standard when the trusted rows stay observable, resilient otherwise.
    Auto,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub enum ClusterSelect {
    /// Smallest θ giving full trusted coverage.
    Auto,
    Theta(f64),
    TargetK(usize),
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EstimatorConfig {
    pub mode: EstimatorMode,
    pub margin: f64,
    pub clustering: ClusterSelect,
    /// Initial estimate: uniform value on every state.
    pub x_hat0: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            mode: EstimatorMode::Auto,
            margin: 0.5,
            clustering: ClusterSelect::Auto,
            x_hat0: 0.0,
        }
    }
}

/// A parsed scenario file: what to simulate and how to estimate.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub duration: f64,
    pub dt: f64,
    /// Keep every k-th step in the recorded trajectories.
    pub record_every: usize,
    /// Metrics are computed on `[metrics_start, duration]`.
    pub metrics_start: f64,
    pub load_events: Vec<LoadEvent>,
    pub attack_window: Option<(f64, f64)>,
    pub attack_lines: Vec<AttackLine>,
    pub estimator: EstimatorConfig,
    /// Sensor fleet override; default is frequency + power at every bus.
    pub sensors: Option<Vec<SensorSpec>>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            duration: 10.0,
            dt: 1e-3,
            record_every: 100,
            metrics_start: -1.0, // resolved to duration/2 by validate()
            load_events: Vec::new(),
            attack_window: None,
            attack_lines: Vec::new(),
            estimator: EstimatorConfig::default(),
            sensors: None,
        }
    }
}

impl Scenario {
    pub fn validate(&mut self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(SimError::ConfigInvalid("dt must be positive".into()));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(SimError::ConfigInvalid("duration must be positive".into()));
        }
        if self.record_every == 0 {
            return Err(SimError::ConfigInvalid("record_every must be >= 1".into()));
        }
        if self.metrics_start < 0.0 {
            self.metrics_start = self.duration / 2.0;
        }
        if self.metrics_start >= self.duration {
            return Err(SimError::ConfigInvalid(
                "metrics_start must lie inside the horizon".into(),
            ));
        }
        for ev in &self.load_events {
            if !(ev.t_on < ev.t_off) || ev.t_on < 0.0 || ev.t_off > self.duration {
                return Err(SimError::ConfigInvalid(format!(
                    "load event on bus {} has window [{}, {}] outside [0, {}]",
                    ev.bus, ev.t_on, ev.t_off, self.duration
                )));
            }
        }
        if !self.attack_lines.is_empty() && self.attack_window.is_none() {
            return Err(SimError::ConfigInvalid(
                "attack lines given without a window".into(),
            ));
        }
        if let Some((a, b)) = self.attack_window {
            if !(a < b) {
                return Err(SimError::ConfigInvalid(format!(
                    "attack window [{a}, {b}] is empty"
                )));
            }
        }
        Ok(())
    }

    /// Resolve attack lines against a concrete sensor fleet.
    pub fn resolve_attack(
        &self,
        grid: &GridSpec,
        sensors: &[SensorSpec],
    ) -> Result<Option<AttackScenario>> {
        if self.attack_lines.is_empty() {
            return Ok(None);
        }
        let window = self.attack_window.expect("validated");
        let gen_buses: BTreeSet<usize> = grid.gen_buses().into_iter().collect();
        let mut attacked = Vec::new();
        let mut signals = Vec::new();
        for line in &self.attack_lines {
            let mut hit = false;
            for (i, s) in sensors.iter().enumerate() {
                if s.quantity != line.quantity {
                    continue;
                }
                let selected = match line.group {
                    SensorGroup::All => true,
                    SensorGroup::Gen => gen_buses.contains(&s.bus),
                    SensorGroup::Load => !gen_buses.contains(&s.bus),
                    SensorGroup::Bus(b) => s.bus == b,
                };
                if selected {
                    attacked.push(i);
                    signals.push(line.signal);
                    hit = true;
                }
            }
            if !hit {
                return Err(SimError::ConfigInvalid(format!(
                    "attack line matches no sensor: {line:?}"
                )));
            }
        }
        // an output attacked by several lines keeps all signals (additive);
        // deduplicate the index set for classification separately
        Ok(Some(AttackScenario::new(
            attacked,
            signals,
            window,
            sensors.len(),
        )?))
    }
}

pub fn parse_scenario_file(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario_str(&text)
}

pub fn parse_scenario_str(text: &str) -> Result<Scenario> {
    let mut sc = Scenario::default();
    let mut sensors: Vec<SensorSpec> = Vec::new();
    let mut have_sensors = false;

    #[derive(PartialEq, Clone, Copy)]
    enum Section {
        Header,
        LoadEvents,
        Attack,
        Estimator,
        Sensors,
    }
    let mut section = Section::Header;

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = match name {
                "load_events" => Section::LoadEvents,
                "attack" => Section::Attack,
                "estimator" => Section::Estimator,
                "sensors" => Section::Sensors,
                other => {
                    return Err(SimError::Parse {
                        line,
                        msg: format!("unknown section [{other}]"),
                    })
                }
            };
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        match section {
            Section::Header => {
                let (key, value) = kv(content, line)?;
                match key {
                    "duration" => sc.duration = num(value, line, "duration")?,
                    "dt" => sc.dt = num(value, line, "dt")?,
                    "record_every" => {
                        sc.record_every = int(value, line, "record_every")?;
                    }
                    "metrics_start" => sc.metrics_start = num(value, line, "metrics_start")?,
                    other => {
                        return Err(SimError::Parse {
                            line,
                            msg: format!("unknown header key '{other}'"),
                        })
                    }
                }
            }
            Section::LoadEvents => {
                if fields.len() != 4 {
                    return Err(SimError::Parse {
                        line,
                        msg: "expected: <bus> <delta> <t_on> <t_off>".into(),
                    });
                }
                sc.load_events.push(LoadEvent {
                    bus: int(fields[0], line, "bus")?,
                    delta: num(fields[1], line, "delta")?,
                    t_on: num(fields[2], line, "t_on")?,
                    t_off: num(fields[3], line, "t_off")?,
                });
            }
            Section::Attack => {
                if content.starts_with("window") {
                    let (_, value) = kv(content, line)?;
                    let parts: Vec<&str> = value.split_whitespace().collect();
                    if parts.len() != 2 {
                        return Err(SimError::Parse {
                            line,
                            msg: "expected: window = <t_start> <t_end>".into(),
                        });
                    }
                    sc.attack_window = Some((
                        num(parts[0], line, "t_start")?,
                        num(parts[1], line, "t_end")?,
                    ));
                } else {
                    sc.attack_lines.push(parse_attack_line(&fields, line)?);
                }
            }
            Section::Estimator => {
                let (key, value) = kv(content, line)?;
                match key {
                    "mode" => {
                        sc.estimator.mode = match value {
                            "none" => EstimatorMode::None,
                            "standard" => EstimatorMode::Standard,
                            "resilient" => EstimatorMode::Resilient,
                            "auto" => EstimatorMode::Auto,
                            other => {
                                return Err(SimError::Parse {
                                    line,
                                    msg: format!("unknown estimator mode '{other}'"),
                                })
                            }
                        }
                    }
                    "margin" => sc.estimator.margin = num(value, line, "margin")?,
                    "xhat0" => sc.estimator.x_hat0 = num(value, line, "xhat0")?,
                    "clustering" => {
                        let parts: Vec<&str> = value.split_whitespace().collect();
                        sc.estimator.clustering = match parts.as_slice() {
                            ["auto"] => ClusterSelect::Auto,
                            ["theta", v] => ClusterSelect::Theta(num(v, line, "theta")?),
                            ["k", v] => ClusterSelect::TargetK(int(v, line, "k")?),
                            _ => {
                                return Err(SimError::Parse {
                                    line,
                                    msg: "expected: clustering = auto | theta <v> | k <n>".into(),
                                })
                            }
                        };
                    }
                    other => {
                        return Err(SimError::Parse {
                            line,
                            msg: format!("unknown estimator key '{other}'"),
                        })
                    }
                }
            }
            Section::Sensors => {
                if fields.len() != 2 {
                    return Err(SimError::Parse {
                        line,
                        msg: "expected: <freq|power> <bus>".into(),
                    });
                }
                let quantity = quantity_of(fields[0], line)?;
                let bus = int(fields[1], line, "bus")?;
                sensors.push(SensorSpec { bus, quantity });
                have_sensors = true;
            }
        }
    }
    if have_sensors {
        sc.sensors = Some(sensors);
    }
    sc.validate()?;
    Ok(sc)
}

fn parse_attack_line(fields: &[&str], line: usize) -> Result<AttackLine> {
    if fields.len() < 4 {
        return Err(SimError::Parse {
            line,
            msg: "expected: <freq|power> <bus|all|gen|load> <bias v | ramp r | sin amp f [phase]>"
                .into(),
        });
    }
    let quantity = quantity_of(fields[0], line)?;
    let group = match fields[1] {
        "all" => SensorGroup::All,
        "gen" => SensorGroup::Gen,
        "load" => SensorGroup::Load,
        b => SensorGroup::Bus(int(b, line, "bus")?),
    };
    let signal = match fields[2] {
        "bias" => AttackSignal::Bias {
            value: num(fields[3], line, "bias value")?,
        },
        "ramp" => AttackSignal::Ramp {
            rate: num(fields[3], line, "ramp rate")?,
        },
        "sin" => {
            if fields.len() < 5 {
                return Err(SimError::Parse {
                    line,
                    msg: "expected: sin <amplitude> <frequency_hz> [phase]".into(),
                });
            }
            AttackSignal::Sinusoid {
                amplitude: num(fields[3], line, "amplitude")?,
                frequency_hz: num(fields[4], line, "frequency")?,
                phase: if fields.len() > 5 {
                    num(fields[5], line, "phase")?
                } else {
                    0.0
                },
            }
        }
        other => {
            return Err(SimError::Parse {
                line,
                msg: format!("unknown signal kind '{other}'"),
            })
        }
    };
    Ok(AttackLine {
        quantity,
        group,
        signal,
    })
}

fn quantity_of(s: &str, line: usize) -> Result<SensorQuantity> {
    match s {
        "freq" => Ok(SensorQuantity::Frequency),
        "power" => Ok(SensorQuantity::Power),
        other => Err(SimError::Parse {
            line,
            msg: format!("unknown sensor quantity '{other}'"),
        }),
    }
}

fn kv<'a>(content: &'a str, line: usize) -> Result<(&'a str, &'a str)> {
    let mut it = content.splitn(2, '=');
    let key = it.next().unwrap_or("").trim();
    let value = it
        .next()
        .ok_or(SimError::Parse {
            line,
            msg: "expected 'key = value'".into(),
        })?
        .trim();
    Ok((key, value))
}

fn num(s: &str, line: usize, field: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| SimError::Parse {
        line,
        msg: format!("field '{field}': cannot parse '{s}' as a number"),
    })
}

fn int(s: &str, line: usize, field: &str) -> Result<usize> {
    s.parse::<usize>().map_err(|_| SimError::Parse {
        line,
        msg: format!("field '{field}': cannot parse '{s}' as an integer"),
    })
}

// ---------------------------------------------------------------------------
// resolved simulation input and the integrator
// ---------------------------------------------------------------------------

/// Observer wiring for the integration loop.
#[derive(Debug, Clone)]
pub struct EstimatorSetup {
    pub design: ObserverDesign,
    /// Maps the corrupted measurement vector `ỹ` (original sensor order) to
    /// the observer input stream (row order of `design.c_used`).
    pub stream: DMatrix<f64>,
    /// Original output index per `c_used` row.
    pub row_outputs: Vec<usize>,
    /// Maps `ỹ` to the surrogate record `ȳ` in original order (resilient
    /// runs); standard runs record `ȳ = ỹ`.
    pub surrogate: Option<DMatrix<f64>>,
    pub x_hat0: DVector<f64>,
}

/// Fully resolved numeric simulation input.
#[derive(Debug, Clone)]
pub struct SimInput {
    pub duration: f64,
    pub dt: f64,
    pub record_every: usize,
    pub metrics_start: f64,
    pub x0: DVector<f64>,
    /// Disturbance pulses `(direction, t_on, t_off)`; `d(t)` sums the active
    /// ones.
    pub pulses: Vec<(DVector<f64>, f64, f64)>,
    pub attack: Option<AttackScenario>,
    pub estimator: Option<EstimatorSetup>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    /// Aggregate surrogate approximation error on the recorded clean outputs
    /// (resilient runs only).
    pub approx_error_aggregate: Option<f64>,
    pub approx_error_per_measurement: Option<Vec<Option<f64>>>,
    /// `sqrt(Σ‖x̂−x‖² / Σ‖x‖²)` over the metrics window.
    pub state_rmse_rel: Option<f64>,
    /// RMS of `‖r(t)‖` over the metrics window.
    pub residual_rms_tail: Option<f64>,
    pub max_state_norm: f64,
}

/// Recorded trajectories on the decimated grid. All matrices have one column
/// per recorded instant.
#[derive(Debug, Clone)]
pub struct SimResult {
    pub t: Vec<f64>,
    pub x: DMatrix<f64>,
    /// Clean outputs `C x`.
    pub y: DMatrix<f64>,
    /// Corrupted outputs `ỹ`.
    pub y_tilde: DMatrix<f64>,
    /// Surrogate-repaired outputs `ȳ` (equals `ỹ` for standard runs).
    pub y_bar: DMatrix<f64>,
    pub x_hat: Option<DMatrix<f64>>,
    /// Residual `C_used x̂ − stream`, scattered to original sensor order
    /// (zero where a sensor has no row in `C_used`).
    pub residual: Option<DMatrix<f64>>,
    pub metrics: Metrics,
}

fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|e| e.norm())
        .fold(0.0, f64::max)
}

/// Integrate the plant (and observer, when configured) with classic RK4.
/// `c` is the full measurement matrix in original sensor order.
pub fn simulate(sys: &LtiSystem, c: &DMatrix<f64>, input: &SimInput) -> Result<SimResult> {
    let n = sys.n();
    let m = c.nrows();
    let dt = input.dt;
    if !(dt > 0.0) || !(input.duration > 0.0) || input.record_every == 0 {
        return Err(SimError::ConfigInvalid(
            "dt, duration and record_every must be positive".into(),
        ));
    }
    let steps = (input.duration / dt).round() as usize;
    if steps == 0 {
        return Err(SimError::ConfigInvalid("horizon shorter than dt".into()));
    }
    // RK4 absolute-stability check on the plant and the observer loop
    let rho = spectral_radius(sys.a());
    if rho * dt > 2.5 {
        return Err(SimError::ConfigInvalid(format!(
            "dt = {dt} violates the RK4 stability bound (spectral radius {rho:.3e})"
        )));
    }
    if let Some(est) = &input.estimator {
        let f = sys.a() - &est.design.l * &est.design.c_used;
        let rho_f = spectral_radius(&f);
        if rho_f * dt > 2.5 {
            return Err(SimError::ConfigInvalid(format!(
                "dt = {dt} violates the RK4 stability bound for the observer \
                 (spectral radius {rho_f:.3e})"
            )));
        }
    }

    let a = sys.a();
    let d_at = |t: f64| -> DVector<f64> {
        let mut d = DVector::zeros(n);
        for (dir, on, off) in &input.pulses {
            if t >= *on && t < *off {
                d += dir;
            }
        }
        d
    };
    let corruption_at = |t: f64| -> DVector<f64> {
        match &input.attack {
            Some(sc) => sc.corruption(m, t),
            None => DVector::zeros(m),
        }
    };

    let est = input.estimator.as_ref();
    let f_obs = est.map(|e| a - &e.design.l * &e.design.c_used);
    // observer drive: L * stream * (C x + a(t)); fold L*stream*C into one
    // n x n matrix and L*stream into n x m for the corruption term
    let drive_x = est.map(|e| &e.design.l * &e.stream * c);
    let drive_a = est.map(|e| &e.design.l * &e.stream);

    let records = steps / input.record_every + 1;
    let mut t_rec = Vec::with_capacity(records);
    let mut x_rec = DMatrix::zeros(n, records);
    let mut y_rec = DMatrix::zeros(m, records);
    let mut yt_rec = DMatrix::zeros(m, records);
    let mut yb_rec = DMatrix::zeros(m, records);
    let mut xh_rec = est.map(|_| DMatrix::zeros(n, records));
    let mut r_rec = est.map(|_| DMatrix::zeros(m, records));

    let mut x = input.x0.clone();
    let mut xh = est.map(|e| e.x_hat0.clone());

    // metrics accumulators (full-rate, over the metrics window)
    let mut err_sq = 0.0f64;
    let mut state_sq = 0.0f64;
    let mut resid_sq = 0.0f64;
    let mut resid_count = 0usize;
    let mut max_state_norm = 0.0f64;

    let plant_rhs = |t: f64, x: &DVector<f64>| -> DVector<f64> { a * x + d_at(t) };

    let mut rec_idx = 0usize;
    for step in 0..=steps {
        let t = step as f64 * dt;
        let x_norm = x.norm();
        max_state_norm = max_state_norm.max(x_norm);
        if !x_norm.is_finite() || x_norm > 1e6 {
            return Err(SimError::UnstableStep { t, norm: x_norm });
        }

        let y = c * &x;
        let corr = corruption_at(t);
        let yt = &y + &corr;

        if step % input.record_every == 0 {
            t_rec.push(t);
            x_rec.set_column(rec_idx, &x);
            y_rec.set_column(rec_idx, &y);
            yt_rec.set_column(rec_idx, &yt);
            if let Some(e) = est {
                let yb = match &e.surrogate {
                    Some(s) => s * &yt,
                    None => yt.clone(),
                };
                yb_rec.set_column(rec_idx, &yb);
                let xh_now = xh.as_ref().unwrap();
                xh_rec.as_mut().unwrap().set_column(rec_idx, xh_now);
                let resid = &e.design.c_used * xh_now - &e.stream * &yt;
                let mut scattered = DVector::zeros(m);
                for (row, &out) in e.row_outputs.iter().enumerate() {
                    scattered[out] = resid[row];
                }
                r_rec.as_mut().unwrap().set_column(rec_idx, &scattered);
            } else {
                yb_rec.set_column(rec_idx, &yt);
            }
            rec_idx += 1;
        }

        if t >= input.metrics_start {
            if let (Some(e), Some(xh_now)) = (est, xh.as_ref()) {
                err_sq += (xh_now - &x).norm_squared();
                state_sq += x.norm_squared();
                let resid = &e.design.c_used * xh_now - &e.stream * &yt;
                resid_sq += resid.norm_squared();
                resid_count += 1;
            }
        }

        if step == steps {
            break;
        }

        // plant stages
        let th = t + dt / 2.0;
        let t1 = t + dt;
        let k1 = plant_rhs(t, &x);
        let k2 = plant_rhs(th, &(&x + &k1 * (dt / 2.0)));
        let k3 = plant_rhs(th, &(&x + &k2 * (dt / 2.0)));
        let k4 = plant_rhs(t1, &(&x + &k3 * dt));

        if let (Some(f), Some(dx), Some(da)) = (&f_obs, &drive_x, &drive_a) {
            let xh_now = xh.take().unwrap();
            // observer stages share the plant's stage states so both systems
            // see consistent mid-step measurements
            let obs_rhs = |xs: &DVector<f64>, xhs: &DVector<f64>, ts: f64| -> DVector<f64> {
                f * xhs + dx * xs + da * corruption_at(ts)
            };
            let x2 = &x + &k1 * (dt / 2.0);
            let x3 = &x + &k2 * (dt / 2.0);
            let x4 = &x + &k3 * dt;
            let l1 = obs_rhs(&x, &xh_now, t);
            let l2 = obs_rhs(&x2, &(&xh_now + &l1 * (dt / 2.0)), th);
            let l3 = obs_rhs(&x3, &(&xh_now + &l2 * (dt / 2.0)), th);
            let l4 = obs_rhs(&x4, &(&xh_now + &l3 * dt), t1);
            xh = Some(xh_now + (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (dt / 6.0));
        }

        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    }

    let (state_rmse_rel, residual_rms_tail) = if est.is_some() && resid_count > 0 {
        let rmse = if state_sq > 0.0 {
            (err_sq / state_sq).sqrt()
        } else {
            err_sq.sqrt()
        };
        (
            Some(rmse),
            Some((resid_sq / resid_count as f64).sqrt()),
        )
    } else {
        (None, None)
    };

    Ok(SimResult {
        t: t_rec,
        x: x_rec,
        y: y_rec,
        y_tilde: yt_rec,
        y_bar: yb_rec,
        x_hat: xh_rec,
        residual: r_rec,
        metrics: Metrics {
            approx_error_aggregate: None,
            approx_error_per_measurement: None,
            state_rmse_rel,
            residual_rms_tail,
            max_state_norm,
        },
    })
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

/// Trusted-only surrogate map: row `i` reproduces `ỹ_i` for trusted outputs
/// and the renormalized cluster estimate for attacked ones (zero for outputs
/// in the zero-row cluster).
fn surrogate_matrix(
    clusters: &ClusterSet,
    p: &DVector<f64>,
    attacked: &[usize],
) -> std::result::Result<DMatrix<f64>, ClusterError> {
    let m = clusters.m();
    let mut is_attacked = vec![false; m];
    for &i in attacked {
        is_attacked[i] = true;
    }
    let zero_cluster = clusters
        .zero_outputs
        .first()
        .map(|&i| clusters.assignment[i]);
    let mut s = DMatrix::zeros(m, m);
    for (k, idx) in clusters.members.iter().enumerate() {
        let trusted: Vec<usize> = idx.iter().cloned().filter(|&i| !is_attacked[i]).collect();
        let den: f64 = trusted.iter().map(|&j| p[j] * p[j]).sum();
        for &i in idx {
            if !is_attacked[i] {
                s[(i, i)] = 1.0;
            } else if Some(k) == zero_cluster {
                // invisible output: no surrogate content
            } else if den > 0.0 {
                for &j in &trusted {
                    s[(i, j)] = p[i] * p[j] / den;
                }
            } else {
                return Err(ClusterError::UncoveredCluster(k));
            }
        }
    }
    Ok(s)
}

/// Serializable clustering summary for reports.
#[derive(Debug, Clone, Serialize)]
pub struct ClusterReport {
    pub theta: f64,
    pub k: usize,
    pub clusters: Vec<Vec<usize>>,
    pub coefficients: Vec<f64>,
    /// Per-cluster: does it contain at least one trusted output?
    pub covered: Vec<bool>,
    pub max_intra_dissimilarity: Vec<f64>,
    /// `‖(I − ΠᵀΠ) C u_max‖ / ‖C u_max‖`.
    pub vmax_alignment_defect: f64,
    pub zero_mode_residue: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ObserverSummary {
    pub mode: EstimatorMode,
    pub margin_requested: f64,
    pub margin_used: f64,
    pub margin_achieved: f64,
    pub c_rows: usize,
}

/// Everything a pipeline run produces, ready for serialization.
pub struct PipelineOutput {
    pub sim: SimResult,
    pub sensors: Vec<SensorSpec>,
    pub state_names: Vec<String>,
    /// `Some(true)` when the trusted rows alone stay observable.
    pub trusted_observable: Option<bool>,
    pub attacked: Vec<usize>,
    pub cluster_report: Option<ClusterReport>,
    pub observer: Option<ObserverSummary>,
}

/// Parse, assemble, classify, cluster, design, simulate: the full run.
pub fn run_pipeline(grid: &GridSpec, scenario: &Scenario) -> Result<PipelineOutput> {
    let (sys, index) = assemble_state_space(grid)?;
    let sensors = scenario
        .sensors
        .clone()
        .unwrap_or_else(|| default_sensors(grid));
    let c = build_measurement_matrix(grid, &index, &sensors)?;
    let sys = LtiSystem::new(sys.a().clone(), c.clone())?;
    let n = sys.n();

    let attack = scenario.resolve_attack(grid, &sensors)?;
    let mut attacked: Vec<usize> = attack
        .as_ref()
        .map(|a| a.attacked.clone())
        .unwrap_or_default();
    attacked.sort_unstable();
    attacked.dedup();

    // classification of the trusted remainder
    let (classification, c1, trusted) = classify(&sys, &c, &attacked)?;
    let trusted_observable = Some(classification == Classification::Observable);

    // disturbances
    let mut pulses = Vec::new();
    for ev in &scenario.load_events {
        pulses.push((
            load_disturbance(grid, &index, ev.bus, ev.delta)?,
            ev.t_on,
            ev.t_off,
        ));
    }

    let mode = match scenario.estimator.mode {
        EstimatorMode::Auto => {
            if attacked.is_empty() || classification == Classification::Observable {
                EstimatorMode::Standard
            } else {
                EstimatorMode::Resilient
            }
        }
        other => other,
    };

    let mut cluster_report = None;
    let mut observer_summary = None;
    let estimator = match mode {
        EstimatorMode::None => None,
        EstimatorMode::Standard => {
            let design = design_gain(&sys, &c1, scenario.estimator.margin)?;
            // stream picks the trusted entries of ỹ
            let mut stream = DMatrix::zeros(trusted.len(), c.nrows());
            for (r, &i) in trusted.iter().enumerate() {
                stream[(r, i)] = 1.0;
            }
            observer_summary = Some(ObserverSummary {
                mode,
                margin_requested: scenario.estimator.margin,
                margin_used: design.margin_used,
                margin_achieved: design.stability_margin,
                c_rows: trusted.len(),
            });
            Some(EstimatorSetup {
                design,
                stream,
                row_outputs: trusted.clone(),
                surrogate: None,
                x_hat0: DVector::from_element(n, scenario.estimator.x_hat0),
            })
        }
        EstimatorMode::Resilient => {
            let tol = default_tol_zero(sys.a());
            let dec = decompose_semistable(sys.a(), tol)?;
            let factor = compute_phi(&sys, &dec)?;
            let clusters = match scenario.estimator.clustering {
                ClusterSelect::Auto => {
                    let theta = min_theta_for_coverage(&factor, &trusted)?;
                    form_clusters(&factor, theta)?
                }
                ClusterSelect::Theta(theta) => form_clusters(&factor, theta)?,
                ClusterSelect::TargetK(k) => form_clusters_target_k(&factor, k)?,
            };
            let p = cluster_coefficients(&factor, &clusters);
            let pi = build_pi(&clusters, &p)?;
            let uncovered = clusters.uncovered_clusters(&trusted);
            if let Some(&k) = uncovered.first() {
                return Err(ClusterError::UncoveredCluster(k).into());
            }
            let (c_bar, order) = augment_measurement_matrix(&c, &pi, &attacked)?;
            let design = design_gain(&sys, &c_bar, scenario.estimator.margin)?;
            let s = surrogate_matrix(&clusters, &p, &attacked)?;
            // stream rows follow the row order of c_bar
            let mut stream = DMatrix::zeros(order.len(), c.nrows());
            for (r, &out) in order.iter().enumerate() {
                stream.set_row(r, &s.row(out));
            }
            let report = error_system_poles(&sys, &pi)?;
            cluster_report = Some(ClusterReport {
                theta: clusters.theta,
                k: clusters.k(),
                clusters: clusters.members.clone(),
                coefficients: p.iter().cloned().collect(),
                covered: (0..clusters.k()).map(|k| !uncovered.contains(&k)).collect(),
                max_intra_dissimilarity: clusters.max_intra_dissimilarity(&factor),
                vmax_alignment_defect: report.vmax_alignment_defect,
                zero_mode_residue: report.zero_mode_residue,
            });
            observer_summary = Some(ObserverSummary {
                mode,
                margin_requested: scenario.estimator.margin,
                margin_used: design.margin_used,
                margin_achieved: design.stability_margin,
                c_rows: c_bar.nrows(),
            });
            Some(EstimatorSetup {
                design,
                stream,
                row_outputs: order,
                surrogate: Some(s),
                x_hat0: DVector::from_element(n, scenario.estimator.x_hat0),
            })
        }
        EstimatorMode::Auto => unreachable!("resolved above"),
    };

    let has_pi = estimator.as_ref().and_then(|e| e.surrogate.as_ref()).is_some();
    let input = SimInput {
        duration: scenario.duration,
        dt: scenario.dt,
        record_every: scenario.record_every,
        metrics_start: scenario.metrics_start,
        x0: DVector::zeros(n),
        pulses,
        attack,
        estimator,
    };
    let mut sim = simulate(&sys, &c, &input)?;

    // approximation error of the clustering on the clean recorded outputs
    if has_pi {
        if let Some(report) = &cluster_report {
            let mut pi = DMatrix::zeros(report.k, c.nrows());
            for (k, idx) in report.clusters.iter().enumerate() {
                for &i in idx {
                    pi[(k, i)] = report.coefficients[i];
                }
            }
            let err = approximation_error(&pi, &sim.y)?;
            sim.metrics.approx_error_aggregate = Some(err.aggregate);
            sim.metrics.approx_error_per_measurement = Some(err.per_measurement);
        }
    }

    Ok(PipelineOutput {
        sim,
        sensors,
        state_names: index.state_names(),
        trusted_observable,
        attacked,
        cluster_report,
        observer: observer_summary,
    })
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

/// One row per recorded step: `t, x[..], y[..], yhat[..], ybar[..], r[..]`
/// with headers from state names and sensor labels. `yhat` is `C x̂` in the
/// original sensor order (blank-free zeros when no estimator ran).
pub fn trajectories_csv(out: &PipelineOutput, c: &DMatrix<f64>) -> String {
    let sim = &out.sim;
    let mut s = String::new();
    s.push('t');
    for name in &out.state_names {
        let _ = write!(s, ",x_{name}");
    }
    for lab in out.sensors.iter().map(|x| x.label()) {
        let _ = write!(s, ",y_{lab}");
    }
    for lab in out.sensors.iter().map(|x| x.label()) {
        let _ = write!(s, ",yhat_{lab}");
    }
    for lab in out.sensors.iter().map(|x| x.label()) {
        let _ = write!(s, ",ybar_{lab}");
    }
    for lab in out.sensors.iter().map(|x| x.label()) {
        let _ = write!(s, ",r_{lab}");
    }
    s.push('\n');

    let m = c.nrows();
    for (col, &t) in sim.t.iter().enumerate() {
        let _ = write!(s, "{t}");
        for i in 0..sim.x.nrows() {
            let _ = write!(s, ",{}", sim.x[(i, col)]);
        }
        for i in 0..m {
            let _ = write!(s, ",{}", sim.y[(i, col)]);
        }
        match &sim.x_hat {
            Some(xh) => {
                let yhat = c * xh.column(col);
                for i in 0..m {
                    let _ = write!(s, ",{}", yhat[i]);
                }
            }
            None => {
                for _ in 0..m {
                    s.push_str(",0");
                }
            }
        }
        for i in 0..m {
            let _ = write!(s, ",{}", sim.y_bar[(i, col)]);
        }
        match &sim.residual {
            Some(r) => {
                for i in 0..m {
                    let _ = write!(s, ",{}", r[(i, col)]);
                }
            }
            None => {
                for _ in 0..m {
                    s.push_str(",0");
                }
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Serialize)]
struct MetricsDoc<'a> {
    metrics: &'a Metrics,
    trusted_observable: Option<bool>,
    attacked: &'a [usize],
    observer: &'a Option<ObserverSummary>,
    cluster: &'a Option<ClusterReport>,
}

/// Deterministic JSON sidecar with metrics and stage summaries.
pub fn metrics_json(out: &PipelineOutput) -> String {
    let doc = MetricsDoc {
        metrics: &out.sim.metrics,
        trusted_observable: out.trusted_observable,
        attacked: &out.attacked,
        observer: &out.observer,
        cluster: &out.cluster_report,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("serializable");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_system() -> LtiSystem {
        LtiSystem::new(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap()
    }

    fn plain_input(duration: f64, dt: f64, x0: f64) -> SimInput {
        SimInput {
            duration,
            dt,
            record_every: 1,
            metrics_start: duration / 2.0,
            x0: DVector::from_element(1, x0),
            pulses: vec![],
            attack: None,
            estimator: None,
        }
    }

    #[test]
    fn zero_initial_state_stays_zero() {
        let sys = scalar_system();
        let c = sys.c().clone();
        let r = simulate(&sys, &c, &plain_input(1.0, 1e-3, 0.0)).unwrap();
        assert!(r.x.norm() == 0.0);
        assert!(r.metrics.max_state_norm == 0.0);
    }

    #[test]
    fn scalar_decay_matches_analytic() {
        let sys = scalar_system();
        let c = sys.c().clone();
        let r = simulate(&sys, &c, &plain_input(1.0, 1e-3, 1.0)).unwrap();
        let x_end = r.x[(0, r.t.len() - 1)];
        assert!((x_end - (-1.0f64).exp()).abs() < 1e-9, "x(1) = {x_end}");
    }

    #[test]
    fn step_halving_shows_fourth_order() {
        // RK4 global error drops ~16x when dt halves
        let sys = scalar_system();
        let c = sys.c().clone();
        let exact = (-1.0f64).exp();
        let e1 = (simulate(&sys, &c, &plain_input(1.0, 2e-2, 1.0)).unwrap().x
            [(0, 50)]
            - exact)
            .abs();
        let e2 = (simulate(&sys, &c, &plain_input(1.0, 1e-2, 1.0)).unwrap().x
            [(0, 100)]
            - exact)
            .abs();
        let ratio = e1 / e2;
        assert!(
            (10.0..25.0).contains(&ratio),
            "order ratio {ratio} (e1={e1:e}, e2={e2:e})"
        );
    }

    #[test]
    fn unstable_dt_is_rejected() {
        let sys = LtiSystem::new(
            DMatrix::from_element(1, 1, -100.0),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let c = sys.c().clone();
        let r = simulate(&sys, &c, &plain_input(1.0, 0.1, 1.0));
        assert!(matches!(r, Err(SimError::ConfigInvalid(_))));
    }

    #[test]
    fn pulse_disturbance_moves_then_releases() {
        // dx = -x + d, d = 1 on [0,1): x approaches 1, then decays
        let sys = scalar_system();
        let c = sys.c().clone();
        let mut input = plain_input(2.0, 1e-3, 0.0);
        input.pulses = vec![(DVector::from_element(1, 1.0), 0.0, 1.0)];
        let r = simulate(&sys, &c, &input).unwrap();
        let at = |t: f64| r.x[(0, (t / 1e-3).round() as usize)];
        // strict before the switch-off (d constant over every stage) ...
        let x_exact = |t: f64| 1.0 - (-t).exp();
        assert!((at(0.999) - x_exact(0.999)).abs() < 1e-10);
        // ... and first-order only across the step straddling the jump
        assert!((at(1.0) - x_exact(1.0)).abs() < 1e-3);
        assert!(at(2.0) < at(1.0));
    }

    #[test]
    fn simulation_is_deterministic() {
        let grid = GridSpec::rts24();
        let mut sc = parse_scenario_str(
            "duration = 2\ndt = 0.001\nrecord_every = 10\n\
             [load_events]\n3 0.1 0.5 1.5\n[estimator]\nmode = none\n",
        )
        .unwrap();
        sc.validate().unwrap();
        let o1 = run_pipeline(&grid, &sc).unwrap();
        let o2 = run_pipeline(&grid, &sc).unwrap();
        let (_, index) = assemble_state_space(&grid).unwrap();
        let c = build_measurement_matrix(&grid, &index, &default_sensors(&grid)).unwrap();
        assert_eq!(trajectories_csv(&o1, &c), trajectories_csv(&o2, &c));
        assert_eq!(metrics_json(&o1), metrics_json(&o2));
    }

    #[test]
    fn conservation_mode_follows_disturbance_quadrature() {
        // v_maxᵀ x(t) must equal the running integral of v_maxᵀ d(t)
        let grid = GridSpec::rts24();
        let (sys, index) = assemble_state_space(&grid).unwrap();
        let c = sys.c().clone();
        let dec = decompose_semistable(sys.a(), default_tol_zero(sys.a())).unwrap();
        let d = load_disturbance(&grid, &index, 3, 0.1).unwrap();
        let input = SimInput {
            duration: 5.0,
            dt: 1e-3,
            record_every: 100,
            metrics_start: 2.5,
            x0: DVector::zeros(sys.n()),
            pulses: vec![(d.clone(), 1.0, 4.0)],
            attack: None,
            estimator: None,
        };
        let r = simulate(&sys, &c, &input).unwrap();
        let v = dec.v_max.column(0).into_owned();
        let vd = v.dot(&d);
        for (col, &t) in r.t.iter().enumerate() {
            let active = (t.min(4.0) - 1.0).max(0.0);
            let expect = vd * active;
            let got = v.dot(&r.x.column(col).into_owned());
            assert!(
                (got - expect).abs() <= 1e-6 * expect.abs().max(1.0),
                "t={t}: {got} vs {expect}"
            );
        }
    }

    #[test]
    fn scenario_parser_round_trip_essentials() {
        let text = "
duration = 400
dt = 0.001
record_every = 100
metrics_start = 250

[load_events]
3 0.1 20 200

[attack]
window = 20 380
freq all bias 0.02
power gen sin 0.05 0.5 0.1

[estimator]
mode = resilient
margin = 0.5
clustering = k 21
xhat0 = 0.1
";
        let sc = parse_scenario_str(text).unwrap();
        assert_eq!(sc.duration, 400.0);
        assert_eq!(sc.load_events.len(), 1);
        assert_eq!(sc.attack_window, Some((20.0, 380.0)));
        assert_eq!(sc.attack_lines.len(), 2);
        assert_eq!(sc.estimator.mode, EstimatorMode::Resilient);
        assert!(matches!(sc.estimator.clustering, ClusterSelect::TargetK(21)));
        assert_eq!(sc.estimator.x_hat0, 0.1);
        assert_eq!(sc.metrics_start, 250.0);
    }

    #[test]
    fn scenario_parser_rejects_bad_input() {
        assert!(matches!(
            parse_scenario_str("duration = -1\n"),
            Err(SimError::ConfigInvalid(_))
        ));
        assert!(matches!(
            parse_scenario_str("duration = 1\nbogus = 2\n"),
            Err(SimError::Parse { line: 2, .. })
        ));
        // attack lines without window
        assert!(matches!(
            parse_scenario_str("duration = 1\n[attack]\nfreq all bias 0.1\n"),
            Err(SimError::ConfigInvalid(_))
        ));
    }

    #[test]
    fn attack_resolution_expands_groups() {
        let grid = GridSpec::rts24();
        let sensors = default_sensors(&grid);
        let mut sc = Scenario::default();
        sc.attack_window = Some((1.0, 2.0));
        sc.attack_lines = vec![
            AttackLine {
                quantity: SensorQuantity::Frequency,
                group: SensorGroup::All,
                signal: AttackSignal::Bias { value: 0.1 },
            },
            AttackLine {
                quantity: SensorQuantity::Power,
                group: SensorGroup::Gen,
                signal: AttackSignal::Ramp { rate: 0.01 },
            },
        ];
        let a = sc.resolve_attack(&grid, &sensors).unwrap().unwrap();
        // 24 frequency sensors + 10 generator power sensors
        assert_eq!(a.attacked.len(), 34);
        let set: BTreeSet<usize> = a.attacked.iter().cloned().collect();
        assert_eq!(set.len(), 34);
        // load power sensors untouched
        for (i, s) in sensors.iter().enumerate() {
            let is_gen_power = s.quantity == SensorQuantity::Power
                && grid.gen_buses().contains(&s.bus);
            let is_freq = s.quantity == SensorQuantity::Frequency;
            assert_eq!(set.contains(&i), is_freq || is_gen_power);
        }
    }

    #[test]
    fn pipeline_no_attack_uses_standard_estimation() {
        let grid = GridSpec::rts24();
        let sc = parse_scenario_str(
            "duration = 2\ndt = 0.001\nrecord_every = 20\n\
             [load_events]\n3 0.1 0.2 1.5\n\
             [estimator]\nmode = auto\nmargin = 0.3\n",
        )
        .unwrap();
        let out = run_pipeline(&grid, &sc).unwrap();
        assert_eq!(out.trusted_observable, Some(true));
        assert!(out.cluster_report.is_none());
        let obs = out.observer.as_ref().unwrap();
        assert_eq!(obs.mode, EstimatorMode::Standard);
        assert!(out.sim.metrics.approx_error_aggregate.is_none());
        assert!(out.sim.x_hat.is_some());
    }
}
