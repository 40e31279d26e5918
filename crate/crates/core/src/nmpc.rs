//! Set-point tracking NMPC solved by the swarm optimizer.
//!
//! The decision vector holds one feed flow per control interval of the
//! prediction horizon; each value is held for `ticks_per_control` measurement
//! ticks. Candidate sequences are scored by rolling the cascade model forward
//! from the estimated state. The swarm's search box is the tube reachable from
//! the previous input under the rate limit, positions are repaired by
//! sequential box/rate saturation, and candidates predicted to violate the
//! raffinate or overshoot limit are pulled back by velocity halving and, as a
//! last resort, by relaxing the rate limit and shifting the box towards the
//! minimum feed flow.
//!
//! A controller selector skips the optimization and holds `u = u_set` when the
//! open-loop prediction under `u_set` stays inside the steady band.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{Plant, PlantState, SteadyOptions};
use crate::swarm::{
    minimize, Diagnostics, Evaluation, Problem, ReinitContext, SearchSpace, SwarmConfig,
};

/// Velocity halvings attempted before the bounds are shifted.
const MAX_HALVINGS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    /// N_p, in control intervals.
    pub prediction_horizon: usize,
    /// N_p2 used by the selector, in control intervals.
    pub selector_horizon: usize,
    /// Diagonal state weight (Q = q_weight * I).
    pub q_weight: f64,
    /// Terminal weight (P = p_weight * I).
    pub p_weight: f64,
    /// Input weight R = r_coefficient / u_set.
    pub r_coefficient: f64,
    /// Input-move weight S = s_coefficient / u_set.
    pub s_coefficient: f64,
    /// Relative steady band.
    pub eps_ss: f64,
    /// Maximum overshoot y/y_set - 1.
    pub os_max: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Rate limit per control interval as a fraction of the nominal u_set.
    pub du_max_fraction: f64,
    /// Absolute rate limit; overrides `du_max_fraction` when set.
    pub du_max: Option<f64>,
    /// Raffinate tolerance as a fraction of the feed uranium concentration.
    pub raffinate_tol_fraction: f64,
    /// Absolute raffinate tolerance (mol/L); overrides the fraction when set.
    pub raffinate_tol: Option<f64>,
    /// Relative change of the solvent-flow estimate that triggers a new set point.
    pub setpoint_refresh: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            prediction_horizon: 3,
            selector_horizon: 10,
            q_weight: 1.0,
            p_weight: 1.0,
            r_coefficient: 0.01,
            s_coefficient: 0.01,
            eps_ss: 0.05,
            os_max: 0.2,
            u_min: 0.2,
            u_max: 2.0,
            du_max_fraction: 0.1,
            du_max: None,
            raffinate_tol_fraction: 0.01,
            raffinate_tol: None,
            setpoint_refresh: 0.001,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prediction_horizon < 1 || self.selector_horizon < 1 {
            return Err(Error::config("horizons must be at least 1"));
        }
        let weights = [
            self.q_weight,
            self.p_weight,
            self.r_coefficient,
            self.s_coefficient,
        ];
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::config("weights must be positive"));
        }
        if !(self.u_min >= 0.0 && self.u_min < self.u_max) {
            return Err(Error::config("need 0 <= u_min < u_max"));
        }
        if !(self.eps_ss > 0.0 && self.eps_ss < 1.0) || !(self.os_max > 0.0) {
            return Err(Error::config(
                "eps_ss must lie in (0,1) and os_max be positive",
            ));
        }
        if self
            .du_max
            .map_or(!(self.du_max_fraction > 0.0), |d| !(d > 0.0))
        {
            return Err(Error::config("rate limit must be positive"));
        }
        Ok(())
    }
}

/// Steady operating point for a given solvent flow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Setpoint {
    pub x_set: PlantState,
    pub u_set: f64,
    pub y_set: f64,
    /// Solvent flow the set point was computed for.
    pub q: f64,
}

/// Absolute limits resolved once per run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Limits {
    pub u_min: f64,
    pub u_max: f64,
    pub du_max: f64,
    pub raffinate_tol: f64,
    pub os_max: f64,
}

impl Limits {
    pub fn resolve(cfg: &ControlConfig, nominal_u_set: f64, feed_uranium: f64) -> Self {
        Limits {
            u_min: cfg.u_min,
            u_max: cfg.u_max,
            du_max: cfg.du_max.unwrap_or(cfg.du_max_fraction * nominal_u_set),
            raffinate_tol: cfg
                .raffinate_tol
                .unwrap_or(cfg.raffinate_tol_fraction * feed_uranium),
            os_max: cfg.os_max,
        }
    }
}

/// Bisection on the monotone steady map `u -> y` for `y(u_set) = y_set`.
///
/// `u_hi` bounds the bracket; a set point whose steady raffinate exceeds
/// `critical_raffinate` lies above the saturation knee and is rejected.
pub fn compute_setpoint(
    y_set: f64,
    q: f64,
    plant: &Plant,
    u_hi: f64,
    critical_raffinate: f64,
    opts: &SteadyOptions,
) -> Result<Setpoint> {
    if y_set <= 0.0 {
        let x_set = plant.steady_state(0.0, q, opts)?;
        return Ok(Setpoint {
            x_set,
            u_set: 0.0,
            y_set: x_set.output(),
            q,
        });
    }
    let x_hi = plant.steady_state(u_hi, q, opts)?;
    if x_hi.output() < y_set {
        return Err(Error::SetpointInfeasible {
            y_set,
            y_max: x_hi.output(),
        });
    }
    let tol = 1e-3 * y_set;
    let mut lo = 0.0;
    let mut hi = u_hi;
    let mut lo_state = plant.steady_state(0.0, q, opts)?;
    let mut best = (u_hi, x_hi);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let x = plant.steady_state_from(&lo_state, mid, q, opts)?;
        let y = x.output();
        if (y - y_set).abs() <= tol {
            best = (mid, x);
            break;
        }
        if y < y_set {
            lo = mid;
            lo_state = x;
        } else {
            hi = mid;
        }
        best = (mid, x);
    }
    let (u_set, x_set) = best;
    if (x_set.output() - y_set).abs() > tol || x_set.raffinate() > critical_raffinate {
        return Err(Error::SetpointInfeasible {
            y_set,
            y_max: x_set.output(),
        });
    }
    Ok(Setpoint {
        x_set,
        u_set,
        y_set,
        q,
    })
}

/// Control instants `{k, k + N_ctrl, ..., k + N_p N_ctrl}`.
pub fn control_tick_sets(k: usize, ticks_per_control: usize, horizon: usize) -> Vec<usize> {
    (0..=horizon).map(|j| k + j * ticks_per_control).collect()
}

/// Reachable tube from `u_prev` under the rate limit, clipped to the input box.
pub fn search_space(u_prev: f64, horizon: usize, u_min: f64, u_max: f64, du: f64) -> SearchSpace {
    let lower = (0..horizon)
        .map(|j| (u_prev - (j + 1) as f64 * du).max(u_min))
        .collect();
    let upper = (0..horizon)
        .map(|j| (u_prev + (j + 1) as f64 * du).min(u_max))
        .collect();
    SearchSpace { lower, upper }
}

/// Sequential box and rate saturation starting from `u_prev`. With
/// `du = None` (rate limit relaxed) only the box is enforced.
pub fn saturate_position(p: &mut [f64], u_prev: f64, space: &SearchSpace, du: Option<f64>) {
    let mut before = u_prev;
    for (j, v) in p.iter_mut().enumerate() {
        *v = v.clamp(space.lower[j], space.upper[j]);
        if let Some(du) = du {
            if *v - before > du {
                *v = before + du;
            } else if *v - before < -du {
                *v = before - du;
            }
        }
        before = *v;
    }
}

/// Prediction context shared by the cost, selector and constraint checks.
#[derive(Clone, Copy)]
pub struct Predictor<'a> {
    pub plant: &'a Plant,
    pub dt: f64,
    pub ticks_per_control: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutOutcome {
    pub cost: f64,
    pub feasible: bool,
    pub raffinate_violation: bool,
    pub overshoot_violation: bool,
    pub diverged: bool,
    /// Predicted output at each control instant, starting with the current one.
    pub outputs: Vec<f64>,
}

/// Weights resolved against the current set point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Weights {
    pub q: f64,
    pub r: f64,
    pub s: f64,
    pub p: f64,
}

impl Weights {
    pub fn resolve(cfg: &ControlConfig, u_set: f64) -> Self {
        let u_ref = if u_set > 0.0 { u_set } else { 1.0 };
        Weights {
            q: cfg.q_weight,
            r: cfg.r_coefficient / u_ref,
            s: cfg.s_coefficient / u_ref,
            p: cfg.p_weight,
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Weights {
            q: self.q * factor,
            r: self.r * factor,
            s: self.s * factor,
            p: self.p * factor,
        }
    }
}

impl Predictor<'_> {
    /// Quadratic tracking cost of `u_seq` and the constraint verdict over every
    /// predicted measurement tick.
    #[allow(clippy::too_many_arguments)]
    pub fn rollout_cost(
        &self,
        u_seq: &[f64],
        x_hat: &PlantState,
        q_hat: f64,
        u_prev: f64,
        setpoint: &Setpoint,
        weights: &Weights,
        limits: &Limits,
    ) -> RolloutOutcome {
        let mut x = *x_hat;
        let mut cost = weights.q * x.distance_squared(&setpoint.x_set);
        let mut outputs = Vec::with_capacity(u_seq.len() + 1);
        outputs.push(x.output());
        let mut raffinate_violation = false;
        let mut overshoot_violation = false;
        let mut before = u_prev;
        for &u in u_seq {
            cost += weights.r * (u - setpoint.u_set).powi(2) + weights.s * (u - before).powi(2);
            before = u;
            for _ in 0..self.ticks_per_control {
                if self.plant.advance(&mut x, u, q_hat, self.dt).is_err() {
                    return RolloutOutcome {
                        cost: f64::INFINITY,
                        feasible: false,
                        raffinate_violation,
                        overshoot_violation,
                        diverged: true,
                        outputs,
                    };
                }
                raffinate_violation |= x.raffinate() > limits.raffinate_tol;
                overshoot_violation |= x.output() / setpoint.y_set - 1.0 > limits.os_max;
            }
            outputs.push(x.output());
            cost += weights.q * x.distance_squared(&setpoint.x_set);
        }
        cost += weights.p * x.distance_squared(&setpoint.x_set);
        RolloutOutcome {
            cost,
            feasible: !(raffinate_violation || overshoot_violation),
            raffinate_violation,
            overshoot_violation,
            diverged: false,
            outputs,
        }
    }

    /// Outputs at the selector's control instants under `u = u_set`.
    pub fn hold_prediction(
        &self,
        x_hat: &PlantState,
        q_hat: f64,
        setpoint: &Setpoint,
        horizon: usize,
    ) -> Option<Vec<f64>> {
        let mut x = *x_hat;
        let mut outputs = Vec::with_capacity(horizon + 1);
        outputs.push(x.output());
        for _ in 0..horizon {
            for _ in 0..self.ticks_per_control {
                self.plant
                    .advance(&mut x, setpoint.u_set, q_hat, self.dt)
                    .ok()?;
            }
            outputs.push(x.output());
        }
        Some(outputs)
    }

    /// True when holding `u_set` keeps every predicted control-instant output
    /// within `eps_ss * y_set` of the set point.
    pub fn selector_should_hold(
        &self,
        x_hat: &PlantState,
        q_hat: f64,
        setpoint: &Setpoint,
        cfg: &ControlConfig,
    ) -> bool {
        match self.hold_prediction(x_hat, q_hat, setpoint, cfg.selector_horizon) {
            Some(ys) => ys
                .iter()
                .all(|y| (y - setpoint.y_set).abs() <= cfg.eps_ss * setpoint.y_set),
            None => false,
        }
    }
}

/// NMPC as a swarm problem, with the constraint-driven re-initialization hook.
pub struct MpcProblem<'a> {
    pub predictor: Predictor<'a>,
    pub x_hat: PlantState,
    pub q_hat: f64,
    pub u_prev: f64,
    pub setpoint: Setpoint,
    pub weights: Weights,
    pub limits: Limits,
    pub rate_relaxed: bool,
    pub pinned_min: bool,
    pub halvings: usize,
    pub bound_shifts: usize,
}

impl<'a> MpcProblem<'a> {
    pub fn new(
        predictor: Predictor<'a>,
        x_hat: PlantState,
        q_hat: f64,
        u_prev: f64,
        setpoint: Setpoint,
        weights: Weights,
        limits: Limits,
    ) -> Self {
        MpcProblem {
            predictor,
            x_hat,
            q_hat,
            u_prev,
            setpoint,
            weights,
            limits,
            rate_relaxed: false,
            pinned_min: false,
            halvings: 0,
            bound_shifts: 0,
        }
    }

    fn rate_limit(&self) -> Option<f64> {
        if self.rate_relaxed {
            None
        } else {
            Some(self.limits.du_max)
        }
    }

    /// Moves the box one rate step towards `u_min`: the lower bounds first,
    /// then the upper bounds. Returns false once the box has collapsed onto
    /// `u_min`.
    fn shift_bounds(&mut self, space: &mut SearchSpace) -> bool {
        let floor = self.limits.u_min;
        let du = self.limits.du_max;
        self.rate_relaxed = true;
        if space.lower.iter().any(|&lb| lb > floor) {
            for lb in space.lower.iter_mut() {
                *lb = (*lb - du).max(floor);
            }
        } else if space.upper.iter().any(|&ub| ub > floor) {
            for ub in space.upper.iter_mut() {
                *ub = (*ub - du).max(floor);
            }
        } else {
            return false;
        }
        self.bound_shifts += 1;
        true
    }

    /// Swarm re-initialization for one infeasible particle; returns the number
    /// of extra evaluations.
    pub fn reinit_particle(&mut self, ctx: &mut ReinitContext<'_>, n: usize) -> usize {
        let mut extra = 0;
        let prev = ctx.previous[n].clone();
        let mut eval = ctx.evaluations[n];
        let mut x = ctx.particles[n].position.clone();

        let mut v: Vec<f64> = x.iter().zip(&prev).map(|(a, b)| a - b).collect();
        let mut halvings = 0;
        while !eval.feasible && v.iter().any(|c| *c != 0.0) && halvings < MAX_HALVINGS {
            for c in v.iter_mut() {
                *c *= 0.5;
            }
            x = prev.iter().zip(&v).map(|(a, b)| a + b).collect();
            self.repair(&mut x, &prev, ctx.space);
            eval = self.evaluate(&x);
            extra += 1;
            halvings += 1;
        }
        self.halvings += halvings;

        while !eval.feasible {
            if self.shift_bounds(ctx.space) {
                x = ctx.space.sample(&mut *ctx.rng);
                self.repair(&mut x, &prev, ctx.space);
            } else {
                x = vec![self.limits.u_min; x.len()];
                self.pinned_min = true;
                eval = self.evaluate(&x);
                extra += 1;
                break;
            }
            eval = self.evaluate(&x);
            extra += 1;
        }

        let p = &mut ctx.particles[n];
        p.velocity = x.iter().zip(&prev).map(|(a, b)| a - b).collect();
        p.position = x;
        ctx.evaluations[n] = eval;
        extra
    }
}

impl Problem for MpcProblem<'_> {
    fn evaluate(&self, position: &[f64]) -> Evaluation {
        let out = self.predictor.rollout_cost(
            position,
            &self.x_hat,
            self.q_hat,
            self.u_prev,
            &self.setpoint,
            &self.weights,
            &self.limits,
        );
        Evaluation {
            cost: out.cost,
            feasible: out.feasible,
        }
    }

    fn repair(&self, position: &mut [f64], _previous: &[f64], space: &SearchSpace) {
        saturate_position(position, self.u_prev, space, self.rate_limit());
    }

    fn reinitialize(&mut self, ctx: &mut ReinitContext<'_>) {
        for n in 0..ctx.particles.len() {
            if !ctx.evaluations[n].feasible {
                ctx.extra_evaluations += self.reinit_particle(ctx, n);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Mpc,
    Hold,
}

impl ControlMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControlMode::Mpc => "mpc",
            ControlMode::Hold => "hold",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlDecision {
    pub u: f64,
    pub mode: ControlMode,
    pub relaxed_rate_constraint: bool,
    pub pinned_min: bool,
    /// Best sequence found; only its first entry is applied.
    pub sequence: Vec<f64>,
    pub cost: f64,
    pub diagnostics: Option<Diagnostics>,
}

/// Selector, then (if needed) the swarm-solved NMPC.
#[allow(clippy::too_many_arguments)]
pub fn solve_control(
    predictor: Predictor<'_>,
    x_hat: &PlantState,
    q_hat: f64,
    u_prev: f64,
    setpoint: &Setpoint,
    cfg: &ControlConfig,
    limits: &Limits,
    swarm: &SwarmConfig,
) -> Result<ControlDecision> {
    if predictor.selector_should_hold(x_hat, q_hat, setpoint, cfg) {
        let u = setpoint.u_set.clamp(limits.u_min, limits.u_max);
        return Ok(ControlDecision {
            u,
            mode: ControlMode::Hold,
            relaxed_rate_constraint: (u - u_prev).abs() > limits.du_max,
            pinned_min: false,
            sequence: vec![u; cfg.prediction_horizon],
            cost: 0.0,
            diagnostics: None,
        });
    }

    let u_prev_clamped = u_prev.clamp(limits.u_min, limits.u_max);
    let space = search_space(
        u_prev_clamped,
        cfg.prediction_horizon,
        limits.u_min,
        limits.u_max,
        limits.du_max,
    );
    let weights = Weights::resolve(cfg, setpoint.u_set);
    let mut problem = MpcProblem::new(
        predictor,
        *x_hat,
        q_hat,
        u_prev_clamped,
        *setpoint,
        weights,
        *limits,
    );
    let guess = vec![u_prev_clamped; cfg.prediction_horizon];
    let solution = minimize(&mut problem, space, Some(&guess), swarm)?;

    let (u, sequence, cost) = if solution.cost.is_finite() {
        (
            solution.position[0],
            solution.position.clone(),
            solution.cost,
        )
    } else {
        problem.pinned_min = true;
        (
            limits.u_min,
            vec![limits.u_min; cfg.prediction_horizon],
            f64::INFINITY,
        )
    };
    let relaxed =
        problem.rate_relaxed || (u - u_prev_clamped).abs() > limits.du_max * (1.0 + 1e-12);
    Ok(ControlDecision {
        u,
        mode: ControlMode::Mpc,
        relaxed_rate_constraint: relaxed,
        pinned_min: problem.pinned_min,
        sequence,
        cost,
        diagnostics: Some(solution.diagnostics),
    })
}
