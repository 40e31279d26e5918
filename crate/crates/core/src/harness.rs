//! Software-in-the-loop driver.
//!
//! The authoritative plant advances once per measurement tick with the true
//! solvent flow. The estimator runs at estimation ticks, the controller at
//! control ticks, both at `k mod N = 1`, the estimator first.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mhe::{EstimatorConfig, MovingHorizonEstimator};
use crate::nmpc::{
    compute_setpoint, solve_control, ControlConfig, ControlMode, Limits, Predictor, Setpoint,
};
use crate::plant::{CriticalPoint, Plant, PlantParams, PlantState, SaturationPoint, SteadyOptions};
use crate::swarm::SwarmConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timing {
    /// Measurement period (h).
    pub t_meas: f64,
    /// Estimation period (h).
    pub t_esti: f64,
    /// Control period (h).
    pub t_ctrl: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            t_meas: 0.1,
            t_esti: 0.5,
            t_ctrl: 0.5,
        }
    }
}

fn ticks(period: f64, t_meas: f64, name: &str) -> Result<usize> {
    let r = period / t_meas;
    let n = r.round();
    if !(n >= 1.0) || (r - n).abs() > 1e-9 * r.max(1.0) {
        return Err(Error::config(format!(
            "{name} = {period} is not a positive integer multiple of t_meas = {t_meas}"
        )));
    }
    Ok(n as usize)
}

impl Timing {
    pub fn ticks_per_estimate(&self) -> Result<usize> {
        ticks(self.t_esti, self.t_meas, "t_esti")
    }

    pub fn ticks_per_control(&self) -> Result<usize> {
        ticks(self.t_ctrl, self.t_meas, "t_ctrl")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_meas > 0.0) {
            return Err(Error::config("t_meas must be positive"));
        }
        let ne = self.ticks_per_estimate()?;
        let nc = self.ticks_per_control()?;
        if nc < ne {
            return Err(Error::config("t_ctrl must be at least t_esti"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disturbance {
    /// Onset (h).
    pub time: f64,
    /// Relative change of the solvent flow, e.g. -0.3.
    pub change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub label: String,
    pub seed: u64,
    pub duration_hours: f64,
    /// y_set as a fraction of the critical steady output.
    pub setpoint_fraction: f64,
    /// Critical point: steady raffinate reaches this fraction of the feed uranium.
    pub critical_fraction: f64,
    /// Feed flow of the initial steady state; absent means the acid-only start.
    pub initial_feed_flow: Option<f64>,
    /// Standard deviation of additive Gaussian measurement noise (mol/L).
    pub measurement_noise: f64,
    pub output_dir: Option<PathBuf>,
    pub timing: Timing,
    pub plant: PlantParams,
    pub control: ControlConfig,
    pub estimator: EstimatorConfig,
    pub swarm: SwarmConfig,
    pub disturbances: Vec<Disturbance>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            label: "nominal".into(),
            seed: 1,
            duration_hours: 15.0,
            setpoint_fraction: 0.5,
            critical_fraction: 1e-3,
            initial_feed_flow: None,
            measurement_noise: 0.0,
            output_dir: None,
            timing: Timing::default(),
            plant: PlantParams::default(),
            control: ControlConfig::default(),
            estimator: EstimatorConfig::default(),
            swarm: SwarmConfig::default(),
            disturbances: Vec::new(),
        }
    }
}

impl Scenario {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|source| Error::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    pub fn n_sim(&self) -> usize {
        (self.duration_hours / self.timing.t_meas).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.timing.validate()?;
        self.plant.validate()?;
        self.control.validate()?;
        self.estimator.validate()?;
        self.swarm.validate()?;
        if !(self.duration_hours > 0.0) {
            return Err(Error::config("duration_hours must be positive"));
        }
        if !(self.setpoint_fraction > 0.0 && self.setpoint_fraction < 1.0) {
            return Err(Error::config("setpoint_fraction must lie in (0,1)"));
        }
        if !(self.critical_fraction > 0.0) || !(self.measurement_noise >= 0.0) {
            return Err(Error::config(
                "critical_fraction must be positive, noise non-negative",
            ));
        }
        if self.initial_feed_flow.is_some_and(|u| !(u >= 0.0)) {
            return Err(Error::config("initial_feed_flow must be non-negative"));
        }
        let end = self.n_sim() as f64 * self.timing.t_meas;
        for w in self.disturbances.windows(2) {
            if w[1].time < w[0].time {
                return Err(Error::config("disturbance schedule must be sorted by time"));
            }
        }
        for d in &self.disturbances {
            if !(d.time >= 0.0 && d.time <= end) {
                return Err(Error::config(format!(
                    "disturbance at {} h lies outside [0, {end}]",
                    d.time
                )));
            }
            if !(d.change > -1.0) {
                return Err(Error::config(
                    "disturbance would make the solvent flow non-positive",
                ));
            }
        }
        Ok(())
    }
}

/// True solvent flow at time `t`.
pub fn inject_disturbance(t: f64, schedule: &[Disturbance], q_nominal: f64) -> f64 {
    schedule
        .iter()
        .rev()
        .find(|d| d.time <= t)
        .map_or(q_nominal, |d| q_nominal * (1.0 + d.change))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TickRecord {
    pub k: usize,
    pub t: f64,
    pub y_meas: f64,
    pub y_set: f64,
    /// Input applied over [k, k+1).
    pub u: f64,
    pub q_true: f64,
    pub q_hat: f64,
    pub e_esti: f64,
    /// Mode of the decision in force.
    pub mode: Option<ControlMode>,
    pub raffinate: f64,
    pub raffinate_margin: f64,
    pub os_margin: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlLog {
    pub k: usize,
    pub mode: ControlMode,
    pub u: f64,
    pub cost: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub relaxed: bool,
    pub pinned_min: bool,
    pub x_hat: PlantState,
    pub q_hat: f64,
    pub setpoint: Setpoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorLog {
    pub k: usize,
    pub e_esti: f64,
    pub activated: bool,
    pub anchor_k: Option<usize>,
    pub anchor_fallback: bool,
    pub q_hat: f64,
    pub evaluations: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub label: String,
    pub records: Vec<TickRecord>,
    pub controls: Vec<ControlLog>,
    pub estimates: Vec<EstimatorLog>,
    pub critical: CriticalPoint,
    pub initial_setpoint: Setpoint,
    pub limits: Limits,
    pub eps_ss: f64,
    pub os_max: f64,
    /// Set when the run stopped early.
    pub aborted: Option<String>,
}

fn solve_seed(base: u64, k: usize, stream: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((k as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))
        ^ stream
}

/// Runs a scenario to completion (or to the first plant divergence).
pub fn run_scenario(scenario: &Scenario) -> Result<RunTrace> {
    scenario.validate()?;
    let plant = Plant::new(scenario.plant.clone())?;
    let opts = SteadyOptions::default();
    let q_nom = scenario.plant.nominal_solvent_flow;
    let ctl = &scenario.control;
    let critical = plant.critical_point(q_nom, scenario.critical_fraction, ctl.u_max, &opts)?;
    let critical_raffinate = scenario.critical_fraction * scenario.plant.feed_uranium;
    let y_set = scenario.setpoint_fraction * critical.output;
    let mut setpoint =
        compute_setpoint(y_set, q_nom, &plant, ctl.u_max, critical_raffinate, &opts)?;
    let initial_setpoint = setpoint;
    let limits = Limits::resolve(ctl, setpoint.u_set, scenario.plant.feed_uranium);

    let x0 = match scenario.initial_feed_flow {
        Some(u0) => plant.steady_state(u0, q_nom, &opts)?,
        None => plant
            .with_feed_uranium(0.0)?
            .steady_state(setpoint.u_set, q_nom, &opts)?,
    };

    let dt = scenario.timing.t_meas;
    let n_esti = scenario.timing.ticks_per_estimate()?;
    let n_ctrl = scenario.timing.ticks_per_control()?;
    let predictor = Predictor {
        plant: &plant,
        dt,
        ticks_per_control: n_ctrl,
    };
    let mut estimator = MovingHorizonEstimator::new(
        &plant,
        dt,
        scenario.estimator.clone(),
        scenario.swarm.clone(),
        y_set,
        q_nom,
        x0,
        0,
    )?;
    let mut noise = if scenario.measurement_noise > 0.0 {
        let normal = Normal::new(0.0, scenario.measurement_noise)
            .map_err(|e| Error::config(format!("measurement noise: {e}")))?;
        Some((
            normal,
            ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x006E_6F69_7365),
        ))
    } else {
        None
    };

    let mut x = x0;
    let mut u = setpoint.u_set.clamp(limits.u_min, limits.u_max);
    let mut mode = None;
    let mut records = Vec::with_capacity(scenario.n_sim() + 1);
    let mut controls = Vec::new();
    let mut estimates = Vec::new();
    let record = |k: usize,
                  x: &PlantState,
                  y_meas: f64,
                  u: f64,
                  q_true: f64,
                  q_hat: f64,
                  e: f64,
                  mode,
                  setpoint: &Setpoint| TickRecord {
        k,
        t: k as f64 * dt,
        y_meas,
        y_set: setpoint.y_set,
        u,
        q_true,
        q_hat,
        e_esti: e,
        mode,
        raffinate: x.raffinate(),
        raffinate_margin: limits.raffinate_tol - x.raffinate(),
        os_margin: limits.os_max - (x.output() / setpoint.y_set - 1.0),
    };
    records.push(record(
        0,
        &x,
        x.output(),
        u,
        q_nom,
        q_nom,
        0.0,
        None,
        &setpoint,
    ));

    let mut aborted = None;
    for k in 1..=scenario.n_sim() {
        let q_true = inject_disturbance((k - 1) as f64 * dt, &scenario.disturbances, q_nom);
        if let Err(e) = plant.advance(&mut x, u, q_true, dt) {
            aborted = Some(format!("plant step {k}: {e}"));
            break;
        }
        let mut y_meas = x.output();
        if let Some((normal, rng)) = noise.as_mut() {
            y_meas += normal.sample(rng);
        }
        let e = estimator.observe(k, y_meas, u)?;

        if scenario.estimator.enabled && k % n_esti == 1 % n_esti {
            let tick = estimator.update(solve_seed(scenario.seed, k, 0xE5))?;
            estimates.push(EstimatorLog {
                k,
                e_esti: tick.e,
                activated: tick.activated,
                anchor_k: tick.anchor.map(|a| a.k),
                anchor_fallback: tick.anchor.is_some_and(|a| a.fallback),
                q_hat: tick.q_hat,
                evaluations: tick
                    .estimate
                    .as_ref()
                    .and_then(|est| est.diagnostics.as_ref())
                    .map_or(0, |d| d.evaluations),
            });
            let q_hat = estimator.q_hat();
            if ((q_hat - setpoint.q) / setpoint.q).abs() > ctl.setpoint_refresh {
                if let Ok(sp) =
                    compute_setpoint(y_set, q_hat, &plant, ctl.u_max, critical_raffinate, &opts)
                {
                    setpoint = sp;
                }
            }
        }

        if k % n_ctrl == 1 % n_ctrl {
            let decision = solve_control(
                predictor,
                estimator.x_hat(),
                estimator.q_hat(),
                u,
                &setpoint,
                ctl,
                &limits,
                &scenario.swarm.with_seed(solve_seed(scenario.seed, k, 0xC7)),
            )?;
            let (iterations, evaluations) = decision
                .diagnostics
                .as_ref()
                .map_or((0, 0), |d| (d.iterations, d.evaluations));
            controls.push(ControlLog {
                k,
                mode: decision.mode,
                u: decision.u,
                cost: decision.cost,
                iterations,
                evaluations,
                relaxed: decision.relaxed_rate_constraint,
                pinned_min: decision.pinned_min,
                x_hat: *estimator.x_hat(),
                q_hat: estimator.q_hat(),
                setpoint,
            });
            u = decision.u;
            mode = Some(decision.mode);
        }
        records.push(record(
            k,
            &x,
            y_meas,
            u,
            q_true,
            estimator.q_hat(),
            e,
            mode,
            &setpoint,
        ));
    }

    Ok(RunTrace {
        label: scenario.label.clone(),
        records,
        controls,
        estimates,
        critical,
        initial_setpoint,
        limits,
        eps_ss: ctl.eps_ss,
        os_max: ctl.os_max,
        aborted,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub label: String,
    pub max_overshoot_pct: f64,
    pub settling_time_h: Option<f64>,
    pub constraint_violations: usize,
    pub hold_fraction: f64,
    pub solver_evaluations: usize,
    pub control_ticks: usize,
    pub estimator_activations: usize,
    pub aborted: bool,
}

/// Settling time: earliest `t` after which `|y - y_set| <= eps * y_set` for
/// the rest of the trace.
pub fn settling_time(t: &[f64], y: &[f64], y_set: &[f64], eps: f64) -> Option<f64> {
    let inside = |i: usize| (y[i] - y_set[i]).abs() <= eps * y_set[i];
    let n = y.len();
    if n == 0 || !inside(n - 1) {
        return None;
    }
    let mut first = n - 1;
    while first > 0 && inside(first - 1) {
        first -= 1;
    }
    Some(t[first])
}

pub fn max_overshoot(y: &[f64], y_set: &[f64]) -> f64 {
    y.iter()
        .zip(y_set)
        .map(|(y, s)| y / s - 1.0)
        .fold(0.0, f64::max)
}

pub fn compute_metrics(trace: &RunTrace) -> Metrics {
    let t: Vec<f64> = trace.records.iter().map(|r| r.t).collect();
    let y: Vec<f64> = trace.records.iter().map(|r| r.y_meas).collect();
    let ys: Vec<f64> = trace.records.iter().map(|r| r.y_set).collect();
    let holds = trace
        .controls
        .iter()
        .filter(|c| c.mode == ControlMode::Hold)
        .count();
    let solver_evaluations = trace.controls.iter().map(|c| c.evaluations).sum::<usize>()
        + trace.estimates.iter().map(|e| e.evaluations).sum::<usize>();
    Metrics {
        label: trace.label.clone(),
        max_overshoot_pct: 100.0 * max_overshoot(&y, &ys),
        settling_time_h: settling_time(&t, &y, &ys, trace.eps_ss),
        constraint_violations: trace
            .records
            .iter()
            .filter(|r| r.raffinate_margin < 0.0 || r.os_margin < 0.0)
            .count(),
        hold_fraction: if trace.controls.is_empty() {
            0.0
        } else {
            holds as f64 / trace.controls.len() as f64
        },
        solver_evaluations,
        control_ticks: trace.controls.len(),
        estimator_activations: trace.estimates.iter().filter(|e| e.activated).count(),
        aborted: trace.aborted.is_some(),
    }
}

#[derive(Serialize)]
struct TraceRow<'a> {
    t: f64,
    y_meas: f64,
    y_set: f64,
    u: f64,
    q_true: f64,
    q_hat: f64,
    e_esti: f64,
    mode: &'a str,
    raffinate_margin: f64,
    os_margin: f64,
}

#[derive(Serialize)]
struct ControlRow<'a> {
    k: usize,
    mode: &'a str,
    u: f64,
    cost: f64,
    iterations: usize,
    relaxed: bool,
    pinned_min: bool,
}

#[derive(Serialize)]
struct EstimatorRow {
    k: usize,
    e_esti: f64,
    activated: bool,
    anchor_k: Option<usize>,
    q_hat: f64,
}

fn write_csv<T: Serialize>(
    path: &Path,
    rows: impl IntoIterator<Item = T>,
    header: &[&str],
) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub const TRACE_HEADER: [&str; 10] = [
    "t",
    "y_meas",
    "y_set",
    "u",
    "q_true",
    "q_hat",
    "e_esti",
    "mode",
    "raffinate_margin",
    "os_margin",
];
pub const CONTROL_HEADER: [&str; 7] = [
    "k",
    "mode",
    "u",
    "cost",
    "iterations",
    "relaxed",
    "pinned_min",
];
pub const ESTIMATOR_HEADER: [&str; 5] = ["k", "e_esti", "activated", "anchor_k", "q_hat"];
pub const SATURATION_HEADER: [&str; 3] = ["u", "y_steady", "raffinate"];

#[derive(Clone, Debug, PartialEq)]
pub struct OutputFiles {
    pub trace: PathBuf,
    pub controller: PathBuf,
    pub estimator: PathBuf,
    pub metrics: PathBuf,
}

/// Writes trace.csv, controller.csv, estimator.csv and metrics.toml into `dir`.
pub fn emit_outputs(trace: &RunTrace, metrics: &Metrics, dir: &Path) -> Result<OutputFiles> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let files = OutputFiles {
        trace: dir.join("trace.csv"),
        controller: dir.join("controller.csv"),
        estimator: dir.join("estimator.csv"),
        metrics: dir.join("metrics.toml"),
    };
    write_csv(
        &files.trace,
        trace.records.iter().map(|r| TraceRow {
            t: r.t,
            y_meas: r.y_meas,
            y_set: r.y_set,
            u: r.u,
            q_true: r.q_true,
            q_hat: r.q_hat,
            e_esti: r.e_esti,
            mode: r.mode.map_or("", |m| m.as_str()),
            raffinate_margin: r.raffinate_margin,
            os_margin: r.os_margin,
        }),
        &TRACE_HEADER,
    )?;
    write_csv(
        &files.controller,
        trace.controls.iter().map(|c| ControlRow {
            k: c.k,
            mode: c.mode.as_str(),
            u: c.u,
            cost: c.cost,
            iterations: c.iterations,
            relaxed: c.relaxed,
            pinned_min: c.pinned_min,
        }),
        &CONTROL_HEADER,
    )?;
    write_csv(
        &files.estimator,
        trace.estimates.iter().map(|e| EstimatorRow {
            k: e.k,
            e_esti: e.e_esti,
            activated: e.activated,
            anchor_k: e.anchor_k,
            q_hat: e.q_hat,
        }),
        &ESTIMATOR_HEADER,
    )?;
    let text = toml::to_string(metrics).map_err(|e| Error::config(format!("metrics: {e}")))?;
    fs::write(&files.metrics, text).map_err(|source| Error::Io {
        path: files.metrics.clone(),
        source,
    })?;
    Ok(files)
}

pub fn write_saturation_curve(points: &[SaturationPoint], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| Error::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    write_csv(path, points, &SATURATION_HEADER)
}
