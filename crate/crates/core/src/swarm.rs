//! Global-best guaranteed-convergence particle swarm optimizer.
//!
//! Box-bounded minimization with a pluggable [`Problem`]: the problem supplies
//! the cost, an optional state-constraint verdict, a position repair applied
//! after every move and an optional swarm-level re-initialization hook that
//! runs after each batch of evaluations.
//!
//! Inertia and acceleration follow linear schedules over the iteration budget.
//! The particle holding the global best moves with the guaranteed-convergence
//! rule: a random search of radius `rho` (in units of the box width) around the
//! global best, where `rho` doubles after `success_threshold` consecutive
//! improvements and halves after `failure_threshold` consecutive failures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwarmConfig {
    pub n_particles: usize,
    pub i_max: usize,
    pub w_initial: f64,
    pub w_final: f64,
    pub c1_initial: f64,
    pub c1_final: f64,
    pub c2_initial: f64,
    pub c2_final: f64,
    /// Consecutive successes before `rho` doubles.
    pub success_threshold: u32,
    /// Consecutive failures before `rho` halves.
    pub failure_threshold: u32,
    pub rho_initial: f64,
    pub min_cluster_rate: f64,
    /// Cluster radius as a fraction of the normalized box diagonal.
    pub cluster_radius: f64,
    pub termination_window: usize,
    pub tol_cost_change: f64,
    pub tol_velocity: f64,
    pub tol_cost: f64,
    /// Velocity clamp as a fraction of each dimension's box width.
    pub v_max_fraction: f64,
    pub seed: u64,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        SwarmConfig {
            n_particles: 50,
            i_max: 100,
            w_initial: 0.9,
            w_final: 0.4,
            c1_initial: 2.5,
            c1_final: 0.5,
            c2_initial: 0.5,
            c2_final: 2.5,
            success_threshold: 15,
            failure_threshold: 5,
            rho_initial: 1.0,
            min_cluster_rate: 0.7,
            cluster_radius: 0.02,
            termination_window: 5,
            tol_cost_change: 1e-5,
            tol_velocity: 1e-3,
            tol_cost: 1e-4,
            v_max_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SwarmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::config("n_particles must be at least 2"));
        }
        if self.i_max < 1 {
            return Err(Error::config("i_max must be at least 1"));
        }
        if !(0.0 < self.w_final && self.w_final <= self.w_initial && self.w_initial < 1.0) {
            return Err(Error::config(
                "inertia schedule must satisfy 0 < w_f <= w_i < 1",
            ));
        }
        let positive = [
            self.c1_initial,
            self.c1_final,
            self.c2_initial,
            self.c2_final,
            self.rho_initial,
            self.cluster_radius,
            self.tol_cost_change,
            self.tol_velocity,
            self.tol_cost,
            self.v_max_fraction,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::config(
                "acceleration constants, rho, radii and tolerances must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.min_cluster_rate) {
            return Err(Error::config("min_cluster_rate must be a fraction"));
        }
        if self.termination_window < 1 {
            return Err(Error::config("termination_window must be at least 1"));
        }
        Ok(())
    }

    /// Copy with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        SwarmConfig {
            seed,
            ..self.clone()
        }
    }
}

/// Linearly decreasing inertia weight: `w_initial` at 0, `w_final` at `i_max`.
pub fn schedule_inertia(i: usize, cfg: &SwarmConfig) -> f64 {
    let frac = (cfg.i_max.saturating_sub(i)) as f64 / cfg.i_max as f64;
    (cfg.w_initial - cfg.w_final) * frac + cfg.w_final
}

/// Time-varying acceleration constant, linear from `c_init` to `c_final`.
pub fn schedule_acceleration(i: usize, c_init: f64, c_final: f64, i_max: usize) -> f64 {
    (c_final - c_init) * i as f64 / i_max as f64 + c_init
}

#[derive(Clone, Debug, PartialEq)]
pub struct Particle {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub pbest_position: Vec<f64>,
    pub pbest_cost: f64,
}

impl Particle {
    pub fn at_rest(position: Vec<f64>) -> Self {
        let d = position.len();
        Particle {
            pbest_position: position.clone(),
            position,
            velocity: vec![0.0; d],
            pbest_cost: f64::INFINITY,
        }
    }

    fn same_triple(&self, other: &Particle) -> bool {
        self.position == other.position
            && self.pbest_position == other.pbest_position
            && self.velocity == other.velocity
    }
}

/// Per-dimension box. Hooks may move the bounds during a solve.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SearchSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (dim, (&lb, &ub)) in lower.iter().zip(upper.iter()).enumerate() {
            if !(lb <= ub) || !lb.is_finite() || !ub.is_finite() {
                return Err(Error::InfeasibleBox { dim, lb, ub });
            }
        }
        Ok(SearchSpace { lower, upper })
    }

    pub fn uniform(dim: usize, lb: f64, ub: f64) -> Result<Self> {
        Self::new(vec![lb; dim], vec![ub; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn width(&self, j: usize) -> f64 {
        self.upper[j] - self.lower[j]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(j, &v)| v >= self.lower[j] && v <= self.upper[j])
    }

    pub fn clip(&self, x: &mut [f64]) {
        for (j, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[j], self.upper[j]);
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim())
            .map(|j| {
                let r: f64 = rng.random();
                self.lower[j] + r * self.width(j)
            })
            .collect()
    }

    /// Coordinates mapped to the unit box; degenerate dimensions map to 0.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, &v)| {
                let w = self.width(j);
                if w > 0.0 {
                    (v - self.lower[j]) / w
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub cost: f64,
    pub feasible: bool,
}

impl Evaluation {
    pub fn feasible(cost: f64) -> Self {
        Evaluation {
            cost,
            feasible: true,
        }
    }

    /// Cost as seen by the best-tracking logic: infeasible and non-finite
    /// evaluations never become a best.
    pub fn effective_cost(&self) -> f64 {
        if self.feasible && self.cost.is_finite() {
            self.cost
        } else {
            f64::INFINITY
        }
    }
}

/// State handed to [`Problem::reinitialize`] after each batch of evaluations.
pub struct ReinitContext<'a> {
    pub particles: &'a mut [Particle],
    /// Positions before this iteration's move.
    pub previous: &'a [Vec<f64>],
    pub evaluations: &'a mut [Evaluation],
    pub space: &'a mut SearchSpace,
    pub rng: &'a mut ChaCha8Rng,
    pub iteration: usize,
    /// Evaluations spent inside the hook.
    pub extra_evaluations: usize,
}

pub trait Problem {
    fn evaluate(&self, position: &[f64]) -> Evaluation;

    /// Brings a moved position back into the admissible set. `previous` is the
    /// position before the move.
    fn repair(&self, position: &mut [f64], previous: &[f64], space: &SearchSpace) {
        let _ = previous;
        space.clip(position);
    }

    fn reinitialize(&mut self, ctx: &mut ReinitContext<'_>) {
        let _ = ctx;
    }
}

/// Unconstrained cost function over a box.
pub struct CostFn<F>(pub F);

impl<F: Fn(&[f64]) -> f64> Problem for CostFn<F> {
    fn evaluate(&self, position: &[f64]) -> Evaluation {
        Evaluation::feasible((self.0)(position))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwarmState {
    pub particles: Vec<Particle>,
    pub gbest_position: Vec<f64>,
    pub gbest_cost: f64,
    /// Particle whose personal best is the global best.
    pub gbest_index: usize,
    pub rho: f64,
    pub n_success: u32,
    pub n_failure: u32,
    pub iteration: usize,
    pub gbest_history: Vec<f64>,
    pub velocity_history_maxima: Vec<f64>,
}

impl SwarmState {
    /// Fresh swarm at rest at `positions`; bests are filled by the first
    /// [`update_bests`] call.
    pub fn at_rest(positions: Vec<Vec<f64>>, rho: f64) -> Self {
        let d = positions.first().map_or(0, Vec::len);
        SwarmState {
            particles: positions.into_iter().map(Particle::at_rest).collect(),
            gbest_position: vec![0.0; d],
            gbest_cost: f64::INFINITY,
            gbest_index: 0,
            rho,
            n_success: 0,
            n_failure: 0,
            iteration: 0,
            gbest_history: Vec::new(),
            velocity_history_maxima: Vec::new(),
        }
    }

    /// Consecutive success/failure bookkeeping; one counter resets the other.
    pub fn record_outcome(&mut self, success: bool) {
        if success {
            self.n_success += 1;
            self.n_failure = 0;
        } else {
            self.n_failure += 1;
            self.n_success = 0;
        }
    }

    fn max_velocity_norm(&self) -> f64 {
        self.particles
            .iter()
            .map(|p| p.velocity.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Standard gbest velocity for given random draws, clamped to
/// `±v_max_fraction * width`.
#[allow(clippy::too_many_arguments)]
pub fn velocity_with_draws(
    p: &Particle,
    gbest: &[f64],
    i: usize,
    cfg: &SwarmConfig,
    space: &SearchSpace,
    r1: &[f64],
    r2: &[f64],
) -> Vec<f64> {
    let w = schedule_inertia(i, cfg);
    let c1 = schedule_acceleration(i, cfg.c1_initial, cfg.c1_final, cfg.i_max);
    let c2 = schedule_acceleration(i, cfg.c2_initial, cfg.c2_final, cfg.i_max);
    (0..p.position.len())
        .map(|j| {
            let x = p.position[j];
            let v = w * p.velocity[j]
                + c1 * r1[j] * (p.pbest_position[j] - x)
                + c2 * r2[j] * (gbest[j] - x);
            let clamp = cfg.v_max_fraction * space.width(j);
            v.clamp(-clamp, clamp)
        })
        .collect()
}

pub fn update_velocity<R: Rng + ?Sized>(
    p: &Particle,
    gbest: &[f64],
    i: usize,
    cfg: &SwarmConfig,
    space: &SearchSpace,
    rng: &mut R,
) -> Vec<f64> {
    let d = p.position.len();
    let r1: Vec<f64> = (0..d).map(|_| rng.random()).collect();
    let r2: Vec<f64> = (0..d).map(|_| rng.random()).collect();
    velocity_with_draws(p, gbest, i, cfg, space, &r1, &r2)
}

/// Guaranteed-convergence velocity of the global-best particle:
/// `-p + gbest + w v + radius (1 - 2 r2)` per dimension.
pub fn gc_velocity(p: &Particle, gbest: &[f64], w: f64, radius: &[f64], r2: &[f64]) -> Vec<f64> {
    (0..p.position.len())
        .map(|j| -p.position[j] + gbest[j] + w * p.velocity[j] + radius[j] * (1.0 - 2.0 * r2[j]))
        .collect()
}

/// GC move for the best particle; `rho` is scaled by each dimension's width.
pub fn gc_update<R: Rng + ?Sized>(
    best: &Particle,
    swarm: &SwarmState,
    i: usize,
    cfg: &SwarmConfig,
    space: &SearchSpace,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let d = best.position.len();
    let r2: Vec<f64> = (0..d).map(|_| rng.random()).collect();
    let radius: Vec<f64> = (0..d).map(|j| swarm.rho * space.width(j)).collect();
    let v = gc_velocity(
        best,
        &swarm.gbest_position,
        schedule_inertia(i, cfg),
        &radius,
        &r2,
    );
    let x = best.position.iter().zip(&v).map(|(p, v)| p + v).collect();
    (x, v)
}

/// Next search radius from the consecutive success/failure counters.
pub fn update_rho(rho: f64, n_success: u32, n_failure: u32, cfg: &SwarmConfig) -> f64 {
    if n_success > cfg.success_threshold {
        2.0 * rho
    } else if n_failure > cfg.failure_threshold {
        0.5 * rho
    } else {
        rho
    }
}

/// Updates personal and global bests from `costs` (non-finite treated as
/// `+inf`). Returns whether the global best strictly improved.
///
/// A personal best follows its particle on equal finite cost; the global best
/// moves only on strict improvement, ties going to the lowest index.
pub fn update_bests(swarm: &mut SwarmState, costs: &[f64]) -> bool {
    for (p, &c) in swarm.particles.iter_mut().zip(costs) {
        let c = if c.is_finite() { c } else { f64::INFINITY };
        if c < p.pbest_cost || (c == p.pbest_cost && c.is_finite()) {
            p.pbest_cost = c;
            p.pbest_position.clone_from(&p.position);
        }
    }
    let mut best: Option<usize> = None;
    for (n, p) in swarm.particles.iter().enumerate() {
        if p.pbest_cost < swarm.gbest_cost
            && best.is_none_or(|b| p.pbest_cost < swarm.particles[b].pbest_cost)
        {
            best = Some(n);
        }
    }
    match best {
        Some(n) => {
            swarm.gbest_index = n;
            swarm.gbest_cost = swarm.particles[n].pbest_cost;
            swarm
                .gbest_position
                .clone_from(&swarm.particles[n].pbest_position);
            true
        }
        None => false,
    }
}

/// Fraction of particles within `radius` (normalized coordinates) of the
/// global best. The global-best particle always counts.
pub fn cluster_rate(swarm: &SwarmState, space: &SearchSpace, radius: f64) -> f64 {
    let g = space.normalize(&swarm.gbest_position);
    let inside = swarm
        .particles
        .iter()
        .enumerate()
        .filter(|(n, p)| {
            if *n == swarm.gbest_index {
                return true;
            }
            let x = space.normalize(&p.position);
            let d2: f64 = x.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() <= radius
        })
        .count();
    inside as f64 / swarm.particles.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceReason {
    CostChange,
    Velocity,
    CostBelowTolerance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Continue,
    Converged(ConvergenceReason),
    BudgetExhausted,
}

impl Termination {
    pub fn is_done(&self) -> bool {
        !matches!(self, Termination::Continue)
    }
}

fn cluster_radius(cfg: &SwarmConfig, dim: usize) -> f64 {
    cfg.cluster_radius * (dim as f64).sqrt()
}

/// Termination test over the last `termination_window` iterations.
pub fn check_termination(
    swarm: &SwarmState,
    space: &SearchSpace,
    cfg: &SwarmConfig,
) -> Termination {
    if swarm.iteration >= cfg.i_max {
        return Termination::BudgetExhausted;
    }
    let radius = cluster_radius(cfg, space.dim());
    if cluster_rate(swarm, space, radius) < cfg.min_cluster_rate {
        return Termination::Continue;
    }
    let n = cfg.termination_window;
    let hist = &swarm.gbest_history;
    if hist.len() > n + 1 {
        let last = hist[hist.len() - 1];
        let max_change = hist[hist.len() - n - 2..]
            .windows(2)
            .map(|w| (w[1] - w[0]).abs())
            .fold(0.0, f64::max);
        let rel = if max_change == 0.0 {
            0.0
        } else {
            max_change / last.abs()
        };
        if rel <= cfg.tol_cost_change {
            return Termination::Converged(ConvergenceReason::CostChange);
        }
    }
    let vel = &swarm.velocity_history_maxima;
    if vel.len() > n {
        let vmax = vel[vel.len() - n - 1..].iter().copied().fold(0.0, f64::max);
        if vmax <= cfg.tol_velocity {
            return Termination::Converged(ConvergenceReason::Velocity);
        }
    }
    if swarm.gbest_cost <= cfg.tol_cost {
        return Termination::Converged(ConvergenceReason::CostBelowTolerance);
    }
    Termination::Continue
}

/// Indices of particles duplicating an earlier particle's
/// (position, personal best, velocity) triple.
pub fn duplicate_indices(swarm: &SwarmState) -> Vec<usize> {
    let ps = &swarm.particles;
    (0..ps.len())
        .filter(|&n| (0..n).any(|m| ps[m].same_triple(&ps[n])))
        .collect()
}

/// Replaces duplicates by uniform re-samples at rest; returns the replaced
/// indices. Re-sampled particles carry an unevaluated (`+inf`) personal best.
pub fn remove_duplicates<R: Rng + ?Sized>(
    swarm: &mut SwarmState,
    space: &SearchSpace,
    rng: &mut R,
) -> Vec<usize> {
    let dups = duplicate_indices(swarm);
    for &n in &dups {
        swarm.particles[n] = Particle::at_rest(space.sample(rng));
    }
    dups
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub termination: Termination,
    pub cluster_rate: f64,
    pub evaluations: usize,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub position: Vec<f64>,
    pub cost: f64,
    pub diagnostics: Diagnostics,
    /// Box at termination (hooks may have narrowed it).
    pub final_space: SearchSpace,
}

/// Runs the swarm to termination.
///
/// Particles start uniformly in the box at rest; when `initial_guess` is given
/// it replaces particle 0 (after repair).
pub fn minimize<P: Problem + ?Sized>(
    problem: &mut P,
    space: SearchSpace,
    initial_guess: Option<&[f64]>,
    cfg: &SwarmConfig,
) -> Result<Solution> {
    minimize_observed(problem, space, initial_guess, cfg, |_, _| {})
}

/// [`minimize`] calling `observe` with the swarm and current box after the
/// initial evaluation and after every iteration.
pub fn minimize_observed<P, O>(
    problem: &mut P,
    space: SearchSpace,
    initial_guess: Option<&[f64]>,
    cfg: &SwarmConfig,
    mut observe: O,
) -> Result<Solution>
where
    P: Problem + ?Sized,
    O: FnMut(&SwarmState, &SearchSpace),
{
    cfg.validate()?;
    let mut space = SearchSpace::new(space.lower, space.upper)?;
    let d = space.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut positions: Vec<Vec<f64>> = (0..cfg.n_particles)
        .map(|_| space.sample(&mut rng))
        .collect();
    if let Some(guess) = initial_guess {
        if guess.len() != d {
            return Err(Error::Dimension {
                expected: d,
                got: guess.len(),
            });
        }
        let mut g = guess.to_vec();
        problem.repair(&mut g, guess, &space);
        positions[0] = g;
    }
    let mut swarm = SwarmState::at_rest(positions, cfg.rho_initial);
    let mut evaluations = 0usize;

    let mut evals: Vec<Evaluation> = swarm
        .particles
        .iter()
        .map(|p| problem.evaluate(&p.position))
        .collect();
    evaluations += evals.len();
    {
        let previous: Vec<Vec<f64>> = swarm.particles.iter().map(|p| p.position.clone()).collect();
        let mut ctx = ReinitContext {
            particles: &mut swarm.particles,
            previous: &previous,
            evaluations: &mut evals,
            space: &mut space,
            rng: &mut rng,
            iteration: 0,
            extra_evaluations: 0,
        };
        problem.reinitialize(&mut ctx);
        evaluations += ctx.extra_evaluations;
    }
    let costs: Vec<f64> = evals.iter().map(Evaluation::effective_cost).collect();
    update_bests(&mut swarm, &costs);
    swarm.gbest_history.push(swarm.gbest_cost);
    swarm.velocity_history_maxima.push(0.0);
    observe(&swarm, &space);

    let mut termination = Termination::Continue;
    while !termination.is_done() {
        let i = swarm.iteration + 1;

        let previous: Vec<Vec<f64>> = swarm.particles.iter().map(|p| p.position.clone()).collect();
        #[allow(clippy::needless_range_loop)]
        for n in 0..swarm.particles.len() {
            let p = &swarm.particles[n];
            let (mut x, _) = if n == swarm.gbest_index && swarm.gbest_cost.is_finite() {
                gc_update(p, &swarm, i, cfg, &space, &mut rng)
            } else {
                let v = update_velocity(p, &swarm.gbest_position, i, cfg, &space, &mut rng);
                let x = p.position.iter().zip(&v).map(|(a, b)| a + b).collect();
                (x, v)
            };
            problem.repair(&mut x, &previous[n], &space);
            let p = &mut swarm.particles[n];
            p.velocity = x.iter().zip(&previous[n]).map(|(a, b)| a - b).collect();
            p.position = x;
        }

        let mut evals: Vec<Evaluation> = swarm
            .particles
            .iter()
            .map(|p| problem.evaluate(&p.position))
            .collect();
        evaluations += evals.len();
        {
            let mut ctx = ReinitContext {
                particles: &mut swarm.particles,
                previous: &previous,
                evaluations: &mut evals,
                space: &mut space,
                rng: &mut rng,
                iteration: i,
                extra_evaluations: 0,
            };
            problem.reinitialize(&mut ctx);
            evaluations += ctx.extra_evaluations;
        }

        let costs: Vec<f64> = evals.iter().map(Evaluation::effective_cost).collect();
        let success = update_bests(&mut swarm, &costs);
        swarm.record_outcome(success);
        swarm.rho = update_rho(swarm.rho, swarm.n_success, swarm.n_failure, cfg);

        let refilled = remove_duplicates(&mut swarm, &space, &mut rng);
        if !refilled.is_empty() {
            let mut costs = vec![f64::INFINITY; swarm.particles.len()];
            for &n in &refilled {
                costs[n] = problem
                    .evaluate(&swarm.particles[n].position)
                    .effective_cost();
            }
            evaluations += refilled.len();
            update_bests(&mut swarm, &costs);
        }

        swarm.iteration = i;
        swarm.gbest_history.push(swarm.gbest_cost);
        swarm
            .velocity_history_maxima
            .push(swarm.max_velocity_norm());
        observe(&swarm, &space);
        termination = check_termination(&swarm, &space, cfg);
    }

    let radius = cluster_radius(cfg, d);
    Ok(Solution {
        position: swarm.gbest_position.clone(),
        cost: swarm.gbest_cost,
        diagnostics: Diagnostics {
            iterations: swarm.iteration,
            termination,
            cluster_rate: cluster_rate(&swarm, &space, radius),
            evaluations,
            rho: swarm.rho,
        },
        final_space: space,
    })
}
