//! Moving-horizon estimation of the solvent flow rate.
//!
//! Each measurement tick the model is propagated with the current estimate and
//! the output error is logged. At estimation ticks the error gate decides
//! whether to re-estimate. If it fires, the most recent trusted state (the
//! anchor) is replayed under the recorded inputs with a piecewise-constant
//! flow, and the swarm fits that flow to the measurements at a few coincidence
//! points.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{Plant, PlantState};
use crate::swarm::{minimize, Diagnostics, Evaluation, Problem, SearchSpace, SwarmConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub enabled: bool,
    /// N_e.
    pub coincidence_count: usize,
    /// N_w, in measurement ticks.
    pub anchor_window: usize,
    /// Clean records required after the anchor itself.
    pub anchor_lag: usize,
    /// Anchor tolerance as a fraction of y_set.
    pub anchor_fraction: f64,
    /// Activation threshold as a fraction of y_set.
    pub activation_fraction: f64,
    /// Flow bounds as multiples of the nominal flow.
    pub q_min_factor: f64,
    pub q_max_factor: f64,
    /// Hard cap on retained records; bounds the horizon when no anchor
    /// window is admissible.
    pub max_history: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            enabled: true,
            coincidence_count: 2,
            anchor_window: 5,
            anchor_lag: 2,
            anchor_fraction: 0.001,
            activation_fraction: 0.01,
            q_min_factor: 0.25,
            q_max_factor: 2.0,
            max_history: 50,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.coincidence_count < 1 || self.anchor_window < 1 {
            return Err(Error::config(
                "coincidence_count and anchor_window must be >= 1",
            ));
        }
        if !(self.anchor_fraction > 0.0 && self.activation_fraction > 0.0) {
            return Err(Error::config("estimator tolerances must be positive"));
        }
        if !(self.q_min_factor > 0.0 && self.q_min_factor < self.q_max_factor) {
            return Err(Error::config("need 0 < q_min_factor < q_max_factor"));
        }
        if self.max_history < self.anchor_window + self.anchor_lag + 2 {
            return Err(Error::config(
                "max_history is shorter than the anchor window",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub k: usize,
    pub y_meas: f64,
    /// Input applied over [k-1, k).
    pub u: f64,
    pub y_hat: f64,
    pub e: f64,
    /// Model state at k.
    pub x_hat: PlantState,
}

#[derive(Clone, Debug, Default)]
pub struct MeasurementHistory {
    records: VecDeque<Record>,
}

impl MeasurementHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        if let Some(last) = self.records.back() {
            if record.k != last.k + 1 {
                return Err(Error::config(format!(
                    "history tick {} does not follow {}",
                    record.k, last.k
                )));
            }
        }
        self.records.push_back(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn latest(&self) -> Option<&Record> {
        self.records.back()
    }

    pub fn oldest(&self) -> Option<&Record> {
        self.records.front()
    }

    pub fn get(&self, k: usize) -> Option<&Record> {
        let first = self.records.front()?.k;
        self.records.get(k.checked_sub(first)?)
    }

    fn get_mut(&mut self, k: usize) -> Option<&mut Record> {
        let first = self.records.front()?.k;
        self.records.get_mut(k.checked_sub(first)?)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Record> {
        self.records.iter()
    }

    /// Drops records older than `k`.
    pub fn prune_before(&mut self, k: usize) {
        while self.records.front().is_some_and(|r| r.k < k) {
            self.records.pop_front();
        }
    }
}

pub fn should_activate(history: &MeasurementHistory, eps_active: f64) -> bool {
    history.latest().is_some_and(|r| r.e.abs() > eps_active)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Anchor {
    pub k: usize,
    /// No admissible window was found; the oldest record was used.
    pub fallback: bool,
}

/// Most recent `k0 < now` whose window `[k0 - N_w, k0 + lag]` has all
/// errors within `eps_anchor`.
pub fn select_anchor(
    history: &MeasurementHistory,
    eps_anchor: f64,
    window: usize,
    lag: usize,
) -> Option<Anchor> {
    let now = history.latest()?.k;
    let oldest = history.oldest()?.k;
    let mut clean = 0usize;
    let mut best = None;
    for r in history.iter() {
        if r.e.abs() <= eps_anchor {
            clean += 1;
            if clean > window + lag && r.k - lag < now {
                best = Some(r.k - lag);
            }
        } else {
            clean = 0;
        }
    }
    Some(match best {
        Some(k) => Anchor { k, fallback: false },
        None => Anchor {
            k: oldest,
            fallback: true,
        },
    })
}

/// `{k0, evenly spaced interior points, k}` with `N_e + 1` nominal points.
pub fn coincidence_set(k0: usize, k: usize, n_e: usize) -> Vec<usize> {
    if k <= k0 {
        return vec![k0];
    }
    let span = k - k0;
    let n = n_e.max(1);
    let mut out: Vec<usize> = (0..=n).map(|j| k0 + (j * span + n / 2) / n).collect();
    out.dedup();
    out
}

/// Normalized weights 2^j over `n` points.
pub fn coincidence_weights(n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|j| 2f64.powi(j as i32)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

/// Replays the recorded inputs from `anchor_state` at `points[0]` to the last
/// point with the flow held at `q_seg[s]` on segment `s`. Returns the outputs
/// at each point and the final state, or `None` on divergence.
pub fn replay(
    plant: &Plant,
    dt: f64,
    history: &MeasurementHistory,
    anchor_state: &PlantState,
    points: &[usize],
    q_seg: &[f64],
) -> Option<(Vec<f64>, PlantState)> {
    let mut x = *anchor_state;
    let mut ys = Vec::with_capacity(points.len());
    ys.push(x.output());
    for (s, pair) in points.windows(2).enumerate() {
        for k in pair[0] + 1..=pair[1] {
            let u = history.get(k)?.u;
            plant.advance(&mut x, u, q_seg[s], dt).ok()?;
        }
        ys.push(x.output());
    }
    Some((ys, x))
}

pub struct MheProblem<'a> {
    pub plant: &'a Plant,
    pub dt: f64,
    pub history: &'a MeasurementHistory,
    pub anchor_state: PlantState,
    pub points: Vec<usize>,
    pub weights: Vec<f64>,
    /// Residual scale.
    pub scale: f64,
}

impl MheProblem<'_> {
    pub fn cost(&self, q_seg: &[f64]) -> f64 {
        let Some((ys, _)) = replay(
            self.plant,
            self.dt,
            self.history,
            &self.anchor_state,
            &self.points,
            q_seg,
        ) else {
            return f64::INFINITY;
        };
        self.points
            .iter()
            .zip(&ys)
            .zip(&self.weights)
            .map(|((&k, y), a)| {
                let y_meas = self.history.get(k).map_or(f64::NAN, |r| r.y_meas);
                a * ((y_meas - y) / self.scale).powi(2)
            })
            .sum()
    }
}

impl Problem for MheProblem<'_> {
    fn evaluate(&self, position: &[f64]) -> Evaluation {
        Evaluation::feasible(self.cost(position))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub q_hat: f64,
    pub x_hat: PlantState,
    pub fresh: bool,
    pub anchor: Option<Anchor>,
    pub points: Vec<usize>,
    pub segments: Vec<f64>,
    pub cost: f64,
    pub diagnostics: Option<Diagnostics>,
}

/// Fits the piecewise-constant flow over the coincidence points.
#[allow(clippy::too_many_arguments)]
pub fn estimate(
    plant: &Plant,
    dt: f64,
    history: &MeasurementHistory,
    anchor: Anchor,
    cfg: &EstimatorConfig,
    q_bounds: (f64, f64),
    scale: f64,
    q_guess: f64,
    swarm: &SwarmConfig,
) -> Result<Estimate> {
    let now = history
        .latest()
        .ok_or_else(|| Error::config("empty measurement history"))?
        .k;
    let anchor_state = history
        .get(anchor.k)
        .ok_or_else(|| Error::config(format!("anchor {} not in history", anchor.k)))?
        .x_hat;
    let points = coincidence_set(anchor.k, now, cfg.coincidence_count);
    let dim = points.len().saturating_sub(1).max(1);
    let mut problem = MheProblem {
        plant,
        dt,
        history,
        anchor_state,
        weights: coincidence_weights(points.len()),
        points,
        scale,
    };
    let space = SearchSpace::uniform(dim, q_bounds.0, q_bounds.1)?;
    let guess = vec![q_guess.clamp(q_bounds.0, q_bounds.1); dim];
    let sol = minimize(&mut problem, space, Some(&guess), swarm)?;
    let (_, x_hat) = replay(
        plant,
        dt,
        history,
        &anchor_state,
        &problem.points,
        &sol.position,
    )
    .ok_or(Error::Diverged)?;
    Ok(Estimate {
        q_hat: *sol.position.last().unwrap_or(&q_guess),
        x_hat,
        fresh: true,
        anchor: Some(anchor),
        points: problem.points,
        segments: sol.position,
        cost: sol.cost,
        diagnostics: Some(sol.diagnostics),
    })
}

/// Result of one estimation tick.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorTick {
    pub k: usize,
    pub e: f64,
    pub activated: bool,
    pub anchor: Option<Anchor>,
    pub q_hat: f64,
    pub estimate: Option<Estimate>,
}

/// Stateful estimator owned by the harness.
pub struct MovingHorizonEstimator<'a> {
    plant: &'a Plant,
    dt: f64,
    cfg: EstimatorConfig,
    swarm: SwarmConfig,
    eps_anchor: f64,
    eps_active: f64,
    q_bounds: (f64, f64),
    history: MeasurementHistory,
    q_hat: f64,
    x_hat: PlantState,
    clean_run: usize,
}

impl<'a> MovingHorizonEstimator<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        plant: &'a Plant,
        dt: f64,
        cfg: EstimatorConfig,
        swarm: SwarmConfig,
        y_set: f64,
        q_nominal: f64,
        x0: PlantState,
        k0: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut history = MeasurementHistory::new();
        history.push(Record {
            k: k0,
            y_meas: x0.output(),
            u: 0.0,
            y_hat: x0.output(),
            e: 0.0,
            x_hat: x0,
        })?;
        Ok(MovingHorizonEstimator {
            plant,
            dt,
            eps_anchor: cfg.anchor_fraction * y_set,
            eps_active: cfg.activation_fraction * y_set,
            q_bounds: (cfg.q_min_factor * q_nominal, cfg.q_max_factor * q_nominal),
            cfg,
            swarm,
            history,
            q_hat: q_nominal,
            x_hat: x0,
            clean_run: 1,
        })
    }

    pub fn q_hat(&self) -> f64 {
        self.q_hat
    }

    pub fn x_hat(&self) -> &PlantState {
        &self.x_hat
    }

    pub fn history(&self) -> &MeasurementHistory {
        &self.history
    }

    pub fn eps_anchor(&self) -> f64 {
        self.eps_anchor
    }

    pub fn eps_active(&self) -> f64 {
        self.eps_active
    }

    pub fn q_bounds(&self) -> (f64, f64) {
        self.q_bounds
    }

    /// Propagates the model over `[k-1, k)` with input `u` and logs the
    /// measurement. Returns the output error.
    pub fn observe(&mut self, k: usize, y_meas: f64, u: f64) -> Result<f64> {
        self.plant
            .advance(&mut self.x_hat, u, self.q_hat, self.dt)?;
        let y_hat = self.x_hat.output();
        let e = y_meas - y_hat;
        self.history.push(Record {
            k,
            y_meas,
            u,
            y_hat,
            e,
            x_hat: self.x_hat,
        })?;
        if e.abs() <= self.eps_anchor {
            self.clean_run += 1;
        } else {
            self.clean_run = 0;
        }
        let (w, lag) = (self.cfg.anchor_window, self.cfg.anchor_lag);
        if self.clean_run > w + lag && k > lag {
            // k - lag is an admissible anchor
            self.history.prune_before((k - lag).saturating_sub(5 * w));
        }
        if self.history.len() > self.cfg.max_history {
            self.history.prune_before(k + 1 - self.cfg.max_history);
        }
        Ok(e)
    }

    /// Estimation tick: gate, then (if active) re-estimate the flow and
    /// replace the model state.
    pub fn update(&mut self, seed: u64) -> Result<EstimatorTick> {
        let latest = self
            .history
            .latest()
            .ok_or_else(|| Error::config("estimator has no measurements"))?;
        let (k, e) = (latest.k, latest.e);
        if !should_activate(&self.history, self.eps_active) {
            return Ok(EstimatorTick {
                k,
                e,
                activated: false,
                anchor: None,
                q_hat: self.q_hat,
                estimate: None,
            });
        }
        let anchor = select_anchor(
            &self.history,
            self.eps_anchor,
            self.cfg.anchor_window,
            self.cfg.anchor_lag,
        )
        .expect("history is non-empty");
        let est = estimate(
            self.plant,
            self.dt,
            &self.history,
            anchor,
            &self.cfg,
            self.q_bounds,
            self.eps_anchor,
            self.q_hat,
            &self.swarm.with_seed(seed),
        )?;
        self.q_hat = est.q_hat;
        self.x_hat = est.x_hat;
        if let Some(r) = self.history.get_mut(k) {
            r.x_hat = est.x_hat;
            r.y_hat = est.x_hat.output();
            r.e = r.y_meas - r.y_hat;
            self.clean_run = usize::from(r.e.abs() <= self.eps_anchor);
        }
        Ok(EstimatorTick {
            k,
            e,
            activated: true,
            anchor: Some(anchor),
            q_hat: self.q_hat,
            estimate: Some(est),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(k: usize, e: f64) -> Record {
        Record {
            k,
            y_meas: e,
            u: 0.0,
            y_hat: 0.0,
            e,
            x_hat: PlantState::zeros(),
        }
    }

    fn history(errors: &[f64]) -> MeasurementHistory {
        let mut h = MeasurementHistory::new();
        for (k, &e) in errors.iter().enumerate() {
            h.push(rec(k, e)).unwrap();
        }
        h
    }

    #[test]
    fn activation_gate() {
        let y_set = 0.4;
        let eps = 0.01 * y_set;
        assert!(!should_activate(&history(&[0.005 * y_set]), eps));
        assert!(should_activate(&history(&[0.02 * y_set]), eps));
        assert!(!should_activate(&history(&[0.0]), eps));
        assert!(!should_activate(&MeasurementHistory::new(), eps));
    }

    #[test]
    fn anchor_newest_admissible() {
        let h = history(&[0.0; 20]);
        assert_eq!(
            select_anchor(&h, 1e-3, 5, 0),
            Some(Anchor {
                k: 18,
                fallback: false
            })
        );
        assert_eq!(
            select_anchor(&h, 1e-3, 5, 2),
            Some(Anchor {
                k: 17,
                fallback: false
            })
        );
    }

    #[test]
    fn anchor_before_step() {
        let mut e = vec![0.0; 12];
        e.extend([0.01; 8]);
        let h = history(&e);
        let a = select_anchor(&h, 1e-3, 5, 0).unwrap();
        assert_eq!(
            a,
            Anchor {
                k: 11,
                fallback: false
            }
        );
        assert!(e[a.k - 5..=a.k].iter().all(|v| v.abs() <= 1e-3));
        let a = select_anchor(&h, 1e-3, 5, 2).unwrap();
        assert_eq!(
            a,
            Anchor {
                k: 9,
                fallback: false
            }
        );
        assert!(e[a.k - 5..=a.k + 2].iter().all(|v| v.abs() <= 1e-3));
    }

    #[test]
    fn anchor_single_window_and_fallback() {
        let mut e = vec![0.0; 6];
        e.push(0.01);
        let h = history(&e);
        assert_eq!(
            select_anchor(&h, 1e-3, 5, 0),
            Some(Anchor {
                k: 5,
                fallback: false
            })
        );
        assert_eq!(
            select_anchor(&h, 1e-3, 5, 1),
            Some(Anchor {
                k: 0,
                fallback: true
            })
        );
        let h = history(&[0.01; 8]);
        assert_eq!(
            select_anchor(&h, 1e-3, 5, 0),
            Some(Anchor {
                k: 0,
                fallback: true
            })
        );
    }

    #[test]
    fn history_rejects_gaps() {
        let mut h = history(&[0.0, 0.0]);
        assert!(h.push(rec(5, 0.0)).is_err());
        h.prune_before(1);
        assert_eq!(h.oldest().unwrap().k, 1);
        assert_eq!(h.get(1).unwrap().k, 1);
        assert!(h.get(0).is_none());
    }

    #[test]
    fn coincidence_examples() {
        assert_eq!(coincidence_set(0, 10, 2), vec![0, 5, 10]);
        assert_eq!(coincidence_set(4, 5, 2), vec![4, 5]);
        assert_eq!(coincidence_set(0, 2, 2), vec![0, 1, 2]);
        assert_eq!(coincidence_set(3, 12, 3), vec![3, 6, 9, 12]);
    }

    #[test]
    fn weights_normalized_and_increasing() {
        let w = coincidence_weights(3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[0] - 1.0 / 7.0).abs() < 1e-15);
        assert!((w[2] - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(EstimatorConfig::default().validate().is_ok());
        let bad = EstimatorConfig {
            q_min_factor: 3.0,
            ..EstimatorConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
