//! Surrogate extraction-scrubbing cascade.
//!
//! Sixteen mixer-settler stages operated counter-currently. The aqueous phase
//! flows from stage 16 down to stage 1 (the raffinate leaves the stage 1
//! settler), the organic phase from stage 1 up to stage 16. The feed solution
//! (flow `u`, the manipulated variable) enters the mixer of the feed stage, the
//! scrub acid enters stage 16 and fresh solvent (flow `q`) enters stage 1.
//!
//! Each stage carries eight concentrations: uranium and nitric acid, aqueous and
//! organic, in the mixer and in the settler. The state vector is laid out in
//! eight blocks of sixteen entries:
//!
//! | entries (1-based) | block                     |
//! |-------------------|---------------------------|
//! | 1 – 16            | aqueous U, mixers         |
//! | 17 – 32           | aqueous U, settlers       |
//! | 33 – 48           | organic U, mixers         |
//! | 49 – 64           | organic U, settlers       |
//! | 65 – 80           | aqueous HNO3, mixers      |
//! | 81 – 96           | aqueous HNO3, settlers    |
//! | 97 – 112          | organic HNO3, mixers      |
//! | 113 – 128         | organic HNO3, settlers    |
//!
//! so that entry 17 is the raffinate uranium concentration and entry 25 the
//! aqueous uranium concentration in the stage 9 settler (the controlled output).
//!
//! Interphase transfer in a mixer is a linear driving force
//! `k_LA * (D * c_aq - c_org)` per unit organic volume, with TBP-complexation
//! distribution coefficients
//!
//! ```text
//! TBP_free = max(0, TBP_total - 2 [U]org - [H]org)
//! D_U = K_U * TBP_free^2 * [NO3]^2,   [NO3] = [H]aq + 2 [U]aq
//! D_H = K_H * TBP_free
//! ```

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_STAGES: usize = 16;
pub const STATE_DIM: usize = 8 * N_STAGES;
/// Zero-based index of the measured output (entry 25).
pub const OUTPUT_INDEX: usize = 24;
/// Zero-based index of the raffinate uranium concentration (entry 17).
pub const RAFFINATE_INDEX: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    AqueousUraniumMixer = 0,
    AqueousUraniumSettler = 1,
    OrganicUraniumMixer = 2,
    OrganicUraniumSettler = 3,
    AqueousAcidMixer = 4,
    AqueousAcidSettler = 5,
    OrganicAcidMixer = 6,
    OrganicAcidSettler = 7,
}

impl Block {
    pub const ALL: [Block; 8] = [
        Block::AqueousUraniumMixer,
        Block::AqueousUraniumSettler,
        Block::OrganicUraniumMixer,
        Block::OrganicUraniumSettler,
        Block::AqueousAcidMixer,
        Block::AqueousAcidSettler,
        Block::OrganicAcidMixer,
        Block::OrganicAcidSettler,
    ];

    pub const fn offset(self) -> usize {
        self as usize * N_STAGES
    }

    pub fn is_uranium(self) -> bool {
        (self as usize) < 4
    }

    pub fn is_aqueous(self) -> bool {
        matches!(
            self,
            Block::AqueousUraniumMixer
                | Block::AqueousUraniumSettler
                | Block::AqueousAcidMixer
                | Block::AqueousAcidSettler
        )
    }

    pub fn is_mixer(self) -> bool {
        (self as usize).is_multiple_of(2)
    }
}

/// Zero-based state index of `block` at the 1-based `stage`.
pub fn state_index(block: Block, stage: usize) -> usize {
    debug_assert!((1..=N_STAGES).contains(&stage));
    block.offset() + stage - 1
}

const AUM: usize = Block::AqueousUraniumMixer.offset();
const AUS: usize = Block::AqueousUraniumSettler.offset();
const OUM: usize = Block::OrganicUraniumMixer.offset();
const OUS: usize = Block::OrganicUraniumSettler.offset();
const AHM: usize = Block::AqueousAcidMixer.offset();
const AHS: usize = Block::AqueousAcidSettler.offset();
const OHM: usize = Block::OrganicAcidMixer.offset();
const OHS: usize = Block::OrganicAcidSettler.offset();

/// 128 concentrations in mol/L.
#[derive(Clone, Copy, PartialEq)]
pub struct PlantState([f64; STATE_DIM]);

impl std::fmt::Debug for PlantState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PlantState")
            .field("y", &self.output())
            .field("raffinate", &self.raffinate())
            .finish_non_exhaustive()
    }
}

impl Default for PlantState {
    fn default() -> Self {
        Self::zeros()
    }
}

impl PlantState {
    pub const fn zeros() -> Self {
        PlantState([0.0; STATE_DIM])
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != STATE_DIM {
            return Err(Error::Dimension {
                expected: STATE_DIM,
                got: values.len(),
            });
        }
        let mut x = [0.0; STATE_DIM];
        x.copy_from_slice(values);
        Ok(PlantState(x))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn get(&self, block: Block, stage: usize) -> f64 {
        self.0[state_index(block, stage)]
    }

    pub fn set(&mut self, block: Block, stage: usize, value: f64) {
        self.0[state_index(block, stage)] = value;
    }

    /// Controlled output: aqueous uranium in the stage 9 settler.
    pub fn output(&self) -> f64 {
        self.0[OUTPUT_INDEX]
    }

    /// Uranium concentration in the raffinate (stage 1 settler, aqueous).
    pub fn raffinate(&self) -> f64 {
        self.0[RAFFINATE_INDEX]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn min_entry(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Largest `2[U]org + [H]org` over all organic compartments.
    pub fn max_extractant_loading(&self) -> f64 {
        (0..N_STAGES)
            .flat_map(|s| {
                [
                    2.0 * self.0[OUM + s] + self.0[OHM + s],
                    2.0 * self.0[OUS + s] + self.0[OHS + s],
                ]
            })
            .fold(0.0, f64::max)
    }

    /// Squared Euclidean distance, the `Q = I` tracking norm.
    pub fn distance_squared(&self, other: &PlantState) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    fn project_nonnegative(&mut self) {
        for v in self.0.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    fn axpy_from(&mut self, base: &PlantState, scale: f64, dir: &PlantState) {
        for ((o, b), d) in self.0.iter_mut().zip(base.0.iter()).zip(dir.0.iter()) {
            *o = b + scale * d;
        }
    }
}

impl Index<usize> for PlantState {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for PlantState {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Physical parameters of the surrogate cascade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantParams {
    pub n_stages: usize,
    /// 1-based stage whose mixer receives the feed solution.
    pub feed_stage: usize,
    /// Per-phase holdups (L).
    pub mixer_aqueous_volume: f64,
    pub mixer_organic_volume: f64,
    pub settler_aqueous_volume: f64,
    pub settler_organic_volume: f64,
    /// Volumetric mass-transfer coefficient (1/h).
    pub k_la: f64,
    /// Total extractant concentration (mol/L), 1.1 for 30 % TBP.
    pub tbp_total: f64,
    pub k_uranium: f64,
    pub k_acid: f64,
    /// Scrub solution flow (L/h) and acidity (mol/L).
    pub scrub_flow: f64,
    pub scrub_acid: f64,
    /// Feed composition (mol/L).
    pub feed_uranium: f64,
    pub feed_acid: f64,
    /// Nominal solvent flow O_E (L/h).
    pub nominal_solvent_flow: f64,
    /// Upper bound on the RK4 substep (h).
    pub max_substep: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            n_stages: N_STAGES,
            feed_stage: 8,
            mixer_aqueous_volume: 0.15,
            mixer_organic_volume: 0.15,
            settler_aqueous_volume: 0.1,
            settler_organic_volume: 0.1,
            k_la: 20.0,
            tbp_total: 1.1,
            k_uranium: 2.0,
            k_acid: 0.12,
            scrub_flow: 0.6,
            scrub_acid: 1.5,
            feed_uranium: 1.05,
            feed_acid: 3.0,
            nominal_solvent_flow: 3.0,
            max_substep: 0.002,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_stages != N_STAGES {
            return Err(Error::config(format!(
                "n_stages must be {N_STAGES}, got {}",
                self.n_stages
            )));
        }
        if !(1..=N_STAGES).contains(&self.feed_stage) {
            return Err(Error::config(format!(
                "feed_stage must lie in [1, {N_STAGES}], got {}",
                self.feed_stage
            )));
        }
        let positive = [
            ("mixer_aqueous_volume", self.mixer_aqueous_volume),
            ("mixer_organic_volume", self.mixer_organic_volume),
            ("settler_aqueous_volume", self.settler_aqueous_volume),
            ("settler_organic_volume", self.settler_organic_volume),
            ("k_la", self.k_la),
            ("tbp_total", self.tbp_total),
            ("k_uranium", self.k_uranium),
            ("k_acid", self.k_acid),
            ("scrub_flow", self.scrub_flow),
            ("scrub_acid", self.scrub_acid),
            ("feed_uranium", self.feed_uranium),
            ("feed_acid", self.feed_acid),
            ("nominal_solvent_flow", self.nominal_solvent_flow),
            ("max_substep", self.max_substep),
        ];
        for (name, v) in positive {
            // feed_uranium may be zero for the acid-only initial profile.
            let ok = if name == "feed_uranium" {
                v >= 0.0
            } else {
                v > 0.0
            };
            if !ok || !v.is_finite() {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Aqueous flow through the zero-based stage `s`.
    #[inline]
    fn aqueous_flow(&self, s: usize, u: f64) -> f64 {
        if s < self.feed_stage {
            self.scrub_flow + u
        } else {
            self.scrub_flow
        }
    }

    /// Holdup volume (L) of the compartment at zero-based state index `i`.
    pub fn volume_of(&self, i: usize) -> f64 {
        let block = Block::ALL[i / N_STAGES];
        match (block.is_aqueous(), block.is_mixer()) {
            (true, true) => self.mixer_aqueous_volume,
            (true, false) => self.settler_aqueous_volume,
            (false, true) => self.mixer_organic_volume,
            (false, false) => self.settler_organic_volume,
        }
    }

    /// Upper bound on the spectral radius of the right-hand-side Jacobian for
    /// flows up to `u_max`, `q_max`.
    pub fn stiffness_bound(&self, u_max: f64, q_max: f64) -> f64 {
        let nitrate_max = (self.feed_acid + 2.0 * self.feed_uranium).max(self.scrub_acid);
        let d_max = (self.k_uranium * self.tbp_total.powi(2) * nitrate_max.powi(2))
            .max(self.k_acid * self.tbp_total);
        let ratio = self.mixer_organic_volume / self.mixer_aqueous_volume;
        let aq =
            (self.scrub_flow + u_max) / self.mixer_aqueous_volume.min(self.settler_aqueous_volume);
        let org = q_max / self.mixer_organic_volume.min(self.settler_organic_volume);
        self.k_la * (1.0 + d_max * ratio) + aq + org
    }

    /// Number of RK4 substeps used to cover `dt` hours.
    pub fn substeps_for(&self, dt: f64) -> usize {
        ((dt / self.max_substep).ceil() as usize).max(1)
    }
}

/// Boundary fluxes in mol/h.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BoundaryFluxes {
    pub uranium_in: f64,
    pub uranium_out: f64,
    pub acid_in: f64,
    pub acid_out: f64,
}

impl BoundaryFluxes {
    pub fn uranium_net(&self) -> f64 {
        self.uranium_in - self.uranium_out
    }

    pub fn acid_net(&self) -> f64 {
        self.acid_in - self.acid_out
    }
}

/// Species holdups in mol.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Inventory {
    pub uranium: f64,
    pub acid: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SaturationPoint {
    pub u: f64,
    pub y_steady: f64,
    pub raffinate: f64,
}

/// Options for the time-marching steady-state solve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SteadyOptions {
    /// Convergence threshold on `max_i |V_i dx_i/dt|` (mol/h).
    pub tol: f64,
    /// Simulated time budget (h).
    pub max_hours: f64,
    /// Marching interval between residual checks (h).
    pub march_dt: f64,
}

impl Default for SteadyOptions {
    fn default() -> Self {
        SteadyOptions {
            tol: 1e-9,
            max_hours: 20_000.0,
            march_dt: 0.5,
        }
    }
}

/// Operating point at the onset of solvent saturation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticalPoint {
    pub feed_flow: f64,
    pub output: f64,
    pub raffinate: f64,
}

fn check_flows(u: f64, q: f64) -> Result<()> {
    if !(u >= 0.0 && u.is_finite()) {
        return Err(Error::NegativeFlow {
            name: "feed flow",
            value: u,
        });
    }
    if !(q >= 0.0 && q.is_finite()) {
        return Err(Error::NegativeFlow {
            name: "solvent flow",
            value: q,
        });
    }
    Ok(())
}

/// The cascade model: a validated parameter set plus the integrator.
#[derive(Clone, Debug, PartialEq)]
pub struct Plant {
    params: PlantParams,
}

impl Plant {
    pub fn new(params: PlantParams) -> Result<Self> {
        params.validate()?;
        Ok(Plant { params })
    }

    pub fn params(&self) -> &PlantParams {
        &self.params
    }

    /// Same cascade with a different feed uranium concentration.
    pub fn with_feed_uranium(&self, feed_uranium: f64) -> Result<Self> {
        let mut params = self.params.clone();
        params.feed_uranium = feed_uranium;
        Plant::new(params)
    }

    pub fn derivative(&self, x: &PlantState, u: f64, q: f64) -> Result<PlantState> {
        check_flows(u, q)?;
        let mut dx = PlantState::zeros();
        self.rhs(x, u, q, &mut dx);
        Ok(dx)
    }

    fn rhs(&self, x: &PlantState, u: f64, q: f64, dx: &mut PlantState) {
        let p = &self.params;
        let x = &x.0;
        let d = &mut dx.0;
        let feed = p.feed_stage - 1;
        let inv_vma = 1.0 / p.mixer_aqueous_volume;
        let inv_vmo = 1.0 / p.mixer_organic_volume;
        let inv_vsa = 1.0 / p.settler_aqueous_volume;
        let inv_vso = 1.0 / p.settler_organic_volume;
        let transfer_scale = p.k_la * p.mixer_organic_volume;

        for s in 0..N_STAGES {
            let flow_aq = p.aqueous_flow(s, u);

            // aqueous inflow to the mixer: settler s+1, scrub at the top stage, feed at the feed stage
            let (mut u_in, mut h_in) = if s + 1 < N_STAGES {
                let f = p.aqueous_flow(s + 1, u);
                (f * x[AUS + s + 1], f * x[AHS + s + 1])
            } else {
                (0.0, p.scrub_flow * p.scrub_acid)
            };
            if s == feed {
                u_in += u * p.feed_uranium;
                h_in += u * p.feed_acid;
            }
            // organic inflow: settler s-1, fresh solvent at stage 1
            let (uo_in, ho_in) = if s > 0 {
                (q * x[OUS + s - 1], q * x[OHS + s - 1])
            } else {
                (0.0, 0.0)
            };

            let ua = x[AUM + s];
            let uo = x[OUM + s];
            let ha = x[AHM + s];
            let ho = x[OHM + s];

            let tbp_free = (p.tbp_total - 2.0 * uo - ho).max(0.0);
            let nitrate = ha + 2.0 * ua;
            let d_u = p.k_uranium * tbp_free * tbp_free * nitrate * nitrate;
            let d_h = p.k_acid * tbp_free;
            let t_u = transfer_scale * (d_u * ua - uo);
            let t_h = transfer_scale * (d_h * ha - ho);

            d[AUM + s] = (u_in - flow_aq * ua - t_u) * inv_vma;
            d[OUM + s] = (uo_in - q * uo + t_u) * inv_vmo;
            d[AHM + s] = (h_in - flow_aq * ha - t_h) * inv_vma;
            d[OHM + s] = (ho_in - q * ho + t_h) * inv_vmo;

            d[AUS + s] = flow_aq * (ua - x[AUS + s]) * inv_vsa;
            d[OUS + s] = q * (uo - x[OUS + s]) * inv_vso;
            d[AHS + s] = flow_aq * (ha - x[AHS + s]) * inv_vsa;
            d[OHS + s] = q * (ho - x[OHS + s]) * inv_vso;
        }
    }

    /// Advances `x` by `dt` hours in place.
    pub fn advance(&self, x: &mut PlantState, u: f64, q: f64, dt: f64) -> Result<()> {
        check_flows(u, q)?;
        let n = self.params.substeps_for(dt);
        let h = dt / n as f64;
        let mut k1 = PlantState::zeros();
        let mut k2 = PlantState::zeros();
        let mut k3 = PlantState::zeros();
        let mut k4 = PlantState::zeros();
        let mut tmp = PlantState::zeros();
        for _ in 0..n {
            self.rhs(x, u, q, &mut k1);
            tmp.axpy_from(x, 0.5 * h, &k1);
            self.rhs(&tmp, u, q, &mut k2);
            tmp.axpy_from(x, 0.5 * h, &k2);
            self.rhs(&tmp, u, q, &mut k3);
            tmp.axpy_from(x, h, &k3);
            self.rhs(&tmp, u, q, &mut k4);
            let w = h / 6.0;
            for i in 0..STATE_DIM {
                x.0[i] += w * (k1.0[i] + 2.0 * (k2.0[i] + k3.0[i]) + k4.0[i]);
            }
            x.project_nonnegative();
        }
        if x.is_finite() {
            Ok(())
        } else {
            Err(Error::Diverged)
        }
    }

    pub fn step(&self, x: &PlantState, u: f64, q: f64, dt: f64) -> Result<PlantState> {
        let mut next = *x;
        self.advance(&mut next, u, q, dt)?;
        Ok(next)
    }

    pub fn output(&self, x: &PlantState) -> f64 {
        x.output()
    }

    pub fn boundary_fluxes(&self, x: &PlantState, u: f64, q: f64) -> BoundaryFluxes {
        let p = &self.params;
        let raff_flow = p.aqueous_flow(0, u);
        let top = N_STAGES - 1;
        BoundaryFluxes {
            uranium_in: u * p.feed_uranium,
            uranium_out: raff_flow * x.0[AUS] + q * x.0[OUS + top],
            acid_in: u * p.feed_acid + p.scrub_flow * p.scrub_acid,
            acid_out: raff_flow * x.0[AHS] + q * x.0[OHS + top],
        }
    }

    pub fn inventory(&self, x: &PlantState) -> Inventory {
        let mut inv = Inventory::default();
        for (i, c) in x.0.iter().enumerate() {
            let mol = self.params.volume_of(i) * c;
            if Block::ALL[i / N_STAGES].is_uranium() {
                inv.uranium += mol;
            } else {
                inv.acid += mol;
            }
        }
        inv
    }

    /// `max_i |V_i dx_i/dt|` in mol/h.
    pub fn steady_residual(&self, x: &PlantState, u: f64, q: f64) -> f64 {
        let mut dx = PlantState::zeros();
        self.rhs(x, u, q, &mut dx);
        dx.0.iter()
            .enumerate()
            .map(|(i, d)| (d * self.params.volume_of(i)).abs())
            .fold(0.0, f64::max)
    }

    /// Acid-only starting guess: aqueous acid at scrub/feed acidity, organic empty.
    pub fn initial_guess(&self) -> PlantState {
        let mut x = PlantState::zeros();
        for s in 0..N_STAGES {
            let acid = if s < self.params.feed_stage {
                self.params.feed_acid
            } else {
                self.params.scrub_acid
            };
            x.0[AHM + s] = acid;
            x.0[AHS + s] = acid;
        }
        x
    }

    pub fn steady_state(&self, u: f64, q: f64, opts: &SteadyOptions) -> Result<PlantState> {
        self.steady_state_from(&self.initial_guess(), u, q, opts)
    }

    /// Time-marches from `start` until the residual drops below `opts.tol`.
    pub fn steady_state_from(
        &self,
        start: &PlantState,
        u: f64,
        q: f64,
        opts: &SteadyOptions,
    ) -> Result<PlantState> {
        check_flows(u, q)?;
        let mut x = *start;
        let mut t = 0.0;
        let mut residual = self.steady_residual(&x, u, q);
        while residual >= opts.tol {
            if t >= opts.max_hours {
                return Err(Error::NoSteadyState {
                    hours: opts.max_hours,
                    residual,
                });
            }
            self.advance(&mut x, u, q, opts.march_dt)?;
            t += opts.march_dt;
            residual = self.steady_residual(&x, u, q);
        }
        Ok(x)
    }

    /// Steady output and raffinate over an ascending grid of feed flows.
    pub fn saturation_curve(
        &self,
        q: f64,
        u_grid: &[f64],
        opts: &SteadyOptions,
    ) -> Result<Vec<SaturationPoint>> {
        if u_grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::config("saturation grid must be ascending"));
        }
        let mut x = self.initial_guess();
        let mut out = Vec::with_capacity(u_grid.len());
        for &u in u_grid {
            x = self.steady_state_from(&x, u, q, opts)?;
            out.push(SaturationPoint {
                u,
                y_steady: x.output(),
                raffinate: x.raffinate(),
            });
        }
        Ok(out)
    }

    /// Feed flow at which the steady raffinate reaches `threshold_fraction`
    /// of the feed uranium concentration, located by bisection on `[0, u_hi]`.
    pub fn critical_point(
        &self,
        q: f64,
        threshold_fraction: f64,
        u_hi: f64,
        opts: &SteadyOptions,
    ) -> Result<CriticalPoint> {
        let threshold = threshold_fraction * self.params.feed_uranium;
        let hi_state = self.steady_state(u_hi, q, opts)?;
        if hi_state.raffinate() < threshold {
            return Err(Error::config(format!(
                "raffinate threshold {threshold:.3e} not reached below u = {u_hi}"
            )));
        }
        let mut lo = 0.0;
        let mut hi = u_hi;
        let mut lo_state = self.steady_state(0.0, q, opts)?;
        for _ in 0..60 {
            if hi - lo <= 1e-9 * u_hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let x = self.steady_state_from(&lo_state, mid, q, opts)?;
            if x.raffinate() < threshold {
                lo = mid;
                lo_state = x;
            } else {
                hi = mid;
            }
        }
        Ok(CriticalPoint {
            feed_flow: lo,
            output: lo_state.output(),
            raffinate: lo_state.raffinate(),
        })
    }
}
