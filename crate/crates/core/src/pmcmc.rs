//! Particle MCMC drivers over any stopped-process model.
//!
//! Three samplers share one chain state: particle independent
//! Metropolis-Hastings (fixed parameters, whole SMC populations accepted
//! with ratio of normalizing-constant estimates), particle marginal
//! Metropolis-Hastings (random-walk parameter proposals, pseudo-marginal
//! acceptance), and PMMH with level schedules re-sampled per parameter
//! proposal from an auxiliary distribution. The auxiliary level density
//! cancels exactly between proposal and target, so the acceptance ratio is
//! the same with and without adaptation.

use crate::coalescent;
use crate::error::{Error, Result};
use crate::migration;
use crate::model::{LevelSchedule, ParameterPoint, StoppedProcessModel};
use crate::rng::ChaCha8Rng;
use crate::smc::{multinomial_resample, run_multilevel_smc, SmcResult};
use rand::{Rng, RngCore};
use rand_distr::Distribution;

/// Default retry budget for drawing a usable initial state.
pub const DEFAULT_INIT_RETRIES: usize = 100;

/// One per-parameter prior density.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorComponent {
    Uniform {
        lo: f64,
        hi: f64,
    },
    Gamma {
        shape: f64,
        scale: f64,
    },
    /// Uniform over a finite set of values.
    Grid {
        points: Vec<f64>,
    },
}

impl PriorComponent {
    fn log_density(&self, v: f64) -> f64 {
        match self {
            Self::Uniform { lo, hi } => {
                if v >= *lo && v <= *hi {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Self::Gamma { shape, scale } => {
                if v <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    (shape - 1.0) * v.ln() - v / scale - shape * scale.ln() - libm::lgamma(*shape)
                }
            }
            Self::Grid { points } => {
                if points.contains(&v) {
                    -(points.len() as f64).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Result<f64> {
        match self {
            Self::Uniform { lo, hi } => Ok(lo + (hi - lo) * rng.random::<f64>()),
            Self::Gamma { shape, scale } => {
                let dist = rand_distr::Gamma::new(*shape, *scale).map_err(|e| {
                    Error::InvalidParameter(format!("gamma prior ({shape}, {scale}): {e}"))
                })?;
                Ok(dist.sample(rng))
            }
            Self::Grid { points } => {
                if points.is_empty() {
                    return Err(Error::InvalidParameter("empty grid prior".into()));
                }
                Ok(points[rng.random_range(0..points.len())])
            }
        }
    }

    fn validate(&self) -> Result<()> {
        fn positive(v: f64) -> bool {
            v.is_finite() && v > 0.0
        }
        match self {
            Self::Uniform { lo, hi } if !(hi - lo).is_finite() || hi <= lo => Err(
                Error::InvalidParameter(format!("uniform prior needs lo < hi, got [{lo}, {hi}]")),
            ),
            Self::Gamma { shape, scale } if !positive(*shape) || !positive(*scale) => {
                Err(Error::InvalidParameter(format!(
                    "gamma prior needs positive shape and scale, got ({shape}, {scale})"
                )))
            }
            Self::Grid { points } if points.is_empty() => {
                Err(Error::InvalidParameter("empty grid prior".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Independent per-coordinate priors over the free parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub components: Vec<PriorComponent>,
}

impl PriorSpec {
    pub fn new(components: Vec<PriorComponent>) -> Result<Self> {
        for c in &components {
            c.validate()?;
        }
        Ok(Self { components })
    }

    pub fn log_density(&self, coords: &[f64]) -> f64 {
        debug_assert_eq!(coords.len(), self.components.len());
        self.components
            .iter()
            .zip(coords)
            .map(|(c, &v)| c.log_density(v))
            .sum()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Vec<f64>> {
        self.components.iter().map(|c| c.sample(rng)).collect()
    }
}

/// One per-parameter random-walk proposal.
#[derive(Debug, Clone, PartialEq)]
pub enum WalkComponent {
    /// Gaussian walk on the log of the coordinate; the ratio of forward and
    /// backward densities contributes the usual change-of-variables factor.
    LogNormal { scale: f64 },
    /// Plain Gaussian walk (symmetric).
    Normal { scale: f64 },
    /// Move one step left or right on a fixed grid; off-grid proposals fall
    /// outside every grid prior's support and are rejected there.
    GridStep { points: Vec<f64> },
    /// Draw uniformly over a fixed grid, independent of the current value.
    GridUniform { points: Vec<f64> },
}

impl WalkComponent {
    /// Propose a new value; returns `(value, log q(new|cur), log q(cur|new))`.
    fn propose<R: Rng>(&self, current: f64, rng: &mut R) -> Result<(f64, f64, f64)> {
        const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_7;
        match self {
            Self::LogNormal { scale } => {
                if current <= 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "log-scale walk from non-positive value {current}"
                    )));
                }
                let z: f64 = rand_distr::StandardNormal.sample(rng);
                let new = (current.ln() + scale * z).exp();
                let fwd = -scale.ln() - 0.5 * z * z - HALF_LOG_TWO_PI - new.ln();
                let bwd = -scale.ln() - 0.5 * z * z - HALF_LOG_TWO_PI - current.ln();
                Ok((new, fwd, bwd))
            }
            Self::Normal { scale } => {
                let z: f64 = rand_distr::StandardNormal.sample(rng);
                let new = current + scale * z;
                let q = -scale.ln() - 0.5 * z * z - HALF_LOG_TWO_PI;
                Ok((new, q, q))
            }
            Self::GridStep { points } => {
                let j = points.iter().position(|&p| p == current).ok_or_else(|| {
                    Error::InvalidParameter(format!("value {current} not on the grid"))
                })?;
                let up: bool = rng.random();
                let q = -(2.0f64).ln();
                let value = if up {
                    if j + 1 < points.len() {
                        points[j + 1]
                    } else {
                        // One spacing beyond the end: outside the grid
                        // prior's support, so the move is rejected upstream.
                        extrapolate(points, true)
                    }
                } else if j > 0 {
                    points[j - 1]
                } else {
                    extrapolate(points, false)
                };
                Ok((value, q, q))
            }
            Self::GridUniform { points } => {
                let value = points[rng.random_range(0..points.len())];
                let q = -(points.len() as f64).ln();
                Ok((value, q, q))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Self::LogNormal { scale } | Self::Normal { scale }
                if !scale.is_finite() || *scale <= 0.0 =>
            {
                Err(Error::InvalidParameter(format!(
                    "walk scale must be positive, got {scale}"
                )))
            }
            Self::GridStep { points } | Self::GridUniform { points } if points.is_empty() => {
                Err(Error::InvalidParameter("empty grid walk".into()))
            }
            _ => Ok(()),
        }
    }
}

fn extrapolate(points: &[f64], upward: bool) -> f64 {
    if points.len() < 2 {
        let p = points[0];
        return if upward { p + 1.0 } else { p - 1.0 };
    }
    if upward {
        2.0 * points[points.len() - 1] - points[points.len() - 2]
    } else {
        2.0 * points[0] - points[1]
    }
}

/// Independent per-coordinate random-walk proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSpec {
    pub components: Vec<WalkComponent>,
}

impl ProposalSpec {
    pub fn new(components: Vec<WalkComponent>) -> Result<Self> {
        for c in &components {
            c.validate()?;
        }
        Ok(Self { components })
    }

    /// The log-scale walk with the given scale on every coordinate.
    pub fn log_normal(dim: usize, scale: f64) -> Result<Self> {
        Self::new(vec![WalkComponent::LogNormal { scale }; dim])
    }

    pub fn propose<R: Rng>(&self, current: &[f64], rng: &mut R) -> Result<(Vec<f64>, f64, f64)> {
        debug_assert_eq!(current.len(), self.components.len());
        let mut values = Vec::with_capacity(current.len());
        let mut fwd = 0.0;
        let mut bwd = 0.0;
        for (c, &cur) in self.components.iter().zip(current) {
            let (v, f, b) = c.propose(cur, rng)?;
            values.push(v);
            fwd += f;
            bwd += b;
        }
        Ok((values, fwd, bwd))
    }
}

/// Rule for weighting level counts given the current parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelCountRule {
    /// Weights proportional to `mu^p` (coalescent).
    MuPower,
    /// Weights proportional to `p^log(mu + sum G + 1)` (migration).
    TotalRatePower,
}

/// The auxiliary distribution over level counts, together with the schedule
/// builder that turns a count into a concrete schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelAdapter {
    pub support: Vec<usize>,
    pub rule: LevelCountRule,
}

impl LevelAdapter {
    pub fn new(support: Vec<usize>, rule: LevelCountRule) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::InvalidParameter("empty level-count support".into()));
        }
        Ok(Self { support, rule })
    }

    /// Normalized weights over the support at the given parameters.
    pub fn weights(&self, params: &ParameterPoint) -> Result<Vec<f64>> {
        match self.rule {
            LevelCountRule::MuPower => coalescent::level_count_weights(params.mu, &self.support),
            LevelCountRule::TotalRatePower => {
                migration::level_count_weights_mig(params, &self.support)
            }
        }
    }

    pub fn sample<R: Rng>(&self, params: &ParameterPoint, rng: &mut R) -> Result<usize> {
        let w = self.weights(params)?;
        let idx = multinomial_resample(&w, 1, rng)?[0];
        Ok(self.support[idx])
    }

    /// Equal-spacing schedule for `p` levels under stopping size `m`.
    pub fn schedule(&self, p: usize, m: u32) -> Result<LevelSchedule> {
        coalescent::build_level_schedule(m, p)
    }
}

/// The full state of a particle MCMC chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub theta: ParameterPoint,
    /// The sampled level count, present only when levels are adapted.
    pub aux_level_count: Option<usize>,
    /// Index of the selected final-level particle.
    pub selected: usize,
    pub smc: SmcResult,
    pub log_zhat: f64,
}

/// One recorded iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainRow {
    pub iteration: usize,
    pub accepted: bool,
    pub log_zhat: f64,
    /// Number of levels in the schedule behind the current state.
    pub level_count: usize,
    /// Free parameter coordinates.
    pub theta: Vec<f64>,
    /// Total stopping time of the selected path.
    pub total_tau: u32,
}

/// The recorded chain: row 0 is the initial state, rows 1..=K the sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainRecord {
    pub rows: Vec<ChainRow>,
}

impl ChainRecord {
    pub fn iterations(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }
}

/// Metropolis-Hastings acceptance probability on the pseudo-marginal
/// ratio. A zero proposed estimate or zero proposed prior gives zero.
pub fn mh_accept_probability(
    log_zhat_new: f64,
    log_zhat_old: f64,
    log_prior_new: f64,
    log_prior_old: f64,
    log_q_forward: f64,
    log_q_backward: f64,
) -> f64 {
    debug_assert!(log_zhat_old.is_finite(), "current state must carry mass");
    if log_zhat_new == f64::NEG_INFINITY || log_prior_new == f64::NEG_INFINITY {
        return 0.0;
    }
    let log_ratio = (log_zhat_new - log_zhat_old)
        + (log_prior_new - log_prior_old)
        + (log_q_backward - log_q_forward);
    log_ratio.min(0.0).exp()
}

fn select_particle<R: Rng>(smc: &SmcResult, rng: &mut R) -> Result<usize> {
    let final_weights = smc.cloud.norm_weights.last().ok_or(Error::SmcFailed)?;
    Ok(multinomial_resample(final_weights, 1, rng)?[0])
}

fn selected_tau(smc: &SmcResult, k: usize) -> u32 {
    smc.cloud.segments.last().map(|row| row[k].tau).unwrap_or(0)
}

/// One sweep of particle independent Metropolis-Hastings: a fresh SMC
/// population either replaces the whole state (probability `Zhat'/Zhat`
/// capped at one) or is discarded. Returns whether the move was accepted.
pub fn pimh_step<M: StoppedProcessModel>(
    state: &mut ChainState,
    model: &M,
    schedule: &LevelSchedule,
    n_particles: usize,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    let proposal = run_multilevel_smc(model, schedule, n_particles, rng.next_u64())?;
    if !proposal.success {
        return Ok(false);
    }
    let k = select_particle(&proposal, rng)?;
    let alpha = mh_accept_probability(proposal.log_zhat, state.log_zhat, 0.0, 0.0, 0.0, 0.0);
    if rng.random::<f64>() < alpha {
        state.selected = k;
        state.log_zhat = proposal.log_zhat;
        state.smc = proposal;
        Ok(true)
    } else {
        Ok(false)
    }
}

/// One sweep of particle marginal Metropolis-Hastings with a fixed level
/// schedule. A proposal outside the prior support is rejected without
/// running SMC (same law, less work); a failed SMC run is rejected.
pub fn pmmh_step<M: StoppedProcessModel>(
    state: &mut ChainState,
    base_model: &M,
    prior: &PriorSpec,
    proposal: &ProposalSpec,
    schedule: &LevelSchedule,
    n_particles: usize,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    pmmh_step_inner(
        state,
        base_model,
        prior,
        proposal,
        LevelChoice::Fixed(schedule),
        n_particles,
        rng,
    )
}

/// One sweep of PMMH with the level schedule re-drawn from the adapter at
/// the proposed parameters. The auxiliary density cancels in the ratio, so
/// acceptance is computed exactly as in the fixed-schedule sweep.
pub fn adaptive_pmmh_step<M: StoppedProcessModel>(
    state: &mut ChainState,
    base_model: &M,
    prior: &PriorSpec,
    proposal: &ProposalSpec,
    adapter: &LevelAdapter,
    n_particles: usize,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    pmmh_step_inner(
        state,
        base_model,
        prior,
        proposal,
        LevelChoice::Adaptive(adapter),
        n_particles,
        rng,
    )
}

enum LevelChoice<'a> {
    Fixed(&'a LevelSchedule),
    Adaptive(&'a LevelAdapter),
}

fn pmmh_step_inner<M: StoppedProcessModel>(
    state: &mut ChainState,
    base_model: &M,
    prior: &PriorSpec,
    proposal: &ProposalSpec,
    levels: LevelChoice<'_>,
    n_particles: usize,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    debug_assert!(state.log_zhat.is_finite());
    let current = state.theta.free_coordinates();
    let (proposed, log_q_fwd, log_q_bwd) = proposal.propose(&current, rng)?;
    let log_prior_new = prior.log_density(&proposed);
    if log_prior_new == f64::NEG_INFINITY {
        return Ok(false);
    }
    let log_prior_old = prior.log_density(&current);
    let theta_new = state.theta.with_free_coordinates(&proposed)?;
    let model_new = base_model.with_params(theta_new.clone())?;
    let (schedule, aux) = match levels {
        LevelChoice::Fixed(s) => (s.clone(), None),
        LevelChoice::Adaptive(adapter) => {
            let p = adapter.sample(&theta_new, rng)?;
            (adapter.schedule(p, model_new.population_cap())?, Some(p))
        }
    };
    let smc_new = run_multilevel_smc(&model_new, &schedule, n_particles, rng.next_u64())?;
    if !smc_new.success {
        return Ok(false);
    }
    let k = select_particle(&smc_new, rng)?;
    let alpha = mh_accept_probability(
        smc_new.log_zhat,
        state.log_zhat,
        log_prior_new,
        log_prior_old,
        log_q_fwd,
        log_q_bwd,
    );
    if rng.random::<f64>() < alpha {
        state.theta = theta_new;
        state.aux_level_count = aux;
        state.selected = k;
        state.log_zhat = smc_new.log_zhat;
        state.smc = smc_new;
        Ok(true)
    } else {
        Ok(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainKind {
    Pimh,
    Pmmh,
    AdaptivePmmh,
}

/// Level policy for a chain run.
#[derive(Clone, Copy)]
pub enum LevelPolicy<'a> {
    Fixed(&'a LevelSchedule),
    Adaptive(&'a LevelAdapter),
}

/// Everything a chain run needs besides the model and the RNG.
pub struct ChainSetup<'a> {
    pub kind: ChainKind,
    /// Required for parameter-moving kinds; ignored by PIMH.
    pub prior: Option<&'a PriorSpec>,
    pub proposal: Option<&'a ProposalSpec>,
    pub levels: LevelPolicy<'a>,
    pub n_particles: usize,
    pub iterations: usize,
    pub init_retries: usize,
}

fn row_from_state(state: &ChainState, iteration: usize, accepted: bool) -> ChainRow {
    ChainRow {
        iteration,
        accepted,
        log_zhat: state.log_zhat,
        level_count: state.smc.schedule.num_levels(),
        theta: state.theta.free_coordinates(),
        total_tau: selected_tau(&state.smc, state.selected),
    }
}

/// Initialize and run a chain for `iterations` sweeps, recording one row
/// per sweep plus the initial state. Initialization draws parameters from
/// the prior (PIMH keeps the model's own) and retries until the first SMC
/// run carries mass, up to the retry budget.
pub fn run_chain<M: StoppedProcessModel>(
    model: &M,
    setup: &ChainSetup<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<ChainRecord> {
    if setup.iterations == 0 {
        return Err(Error::InvalidParameter(
            "chain needs at least one iteration".into(),
        ));
    }
    match setup.kind {
        ChainKind::Pimh => {
            if matches!(setup.levels, LevelPolicy::Adaptive(_)) {
                return Err(Error::InvalidParameter(
                    "PIMH runs on a fixed schedule".into(),
                ));
            }
        }
        ChainKind::Pmmh => {
            if matches!(setup.levels, LevelPolicy::Adaptive(_)) {
                return Err(Error::InvalidParameter(
                    "fixed-schedule PMMH cannot take an adaptive level policy".into(),
                ));
            }
            if setup.prior.is_none() || setup.proposal.is_none() {
                return Err(Error::InvalidParameter(
                    "PMMH needs a prior and a proposal".into(),
                ));
            }
        }
        ChainKind::AdaptivePmmh => {
            if matches!(setup.levels, LevelPolicy::Fixed(_)) {
                return Err(Error::InvalidParameter(
                    "adaptive PMMH needs an adaptive level policy".into(),
                ));
            }
            if setup.prior.is_none() || setup.proposal.is_none() {
                return Err(Error::InvalidParameter(
                    "adaptive PMMH needs a prior and a proposal".into(),
                ));
            }
        }
    }

    let mut state: Option<ChainState> = None;
    for _ in 0..setup.init_retries.max(1) {
        let theta = match setup.kind {
            ChainKind::Pimh => model.params().clone(),
            _ => {
                let coords = setup.prior.unwrap().sample(rng)?;
                match model.params().with_free_coordinates(&coords) {
                    Ok(t) => t,
                    Err(_) => continue,
                }
            }
        };
        let model_init = match model.with_params(theta.clone()) {
            Ok(m) => m,
            Err(_) => continue,
        };
        let (schedule, aux) = match setup.levels {
            LevelPolicy::Fixed(s) => (s.clone(), None),
            LevelPolicy::Adaptive(adapter) => {
                let p = adapter.sample(&theta, rng)?;
                (adapter.schedule(p, model_init.population_cap())?, Some(p))
            }
        };
        let smc = run_multilevel_smc(&model_init, &schedule, setup.n_particles, rng.next_u64())?;
        if !smc.success {
            continue;
        }
        let selected = select_particle(&smc, rng)?;
        let log_zhat = smc.log_zhat;
        state = Some(ChainState {
            theta,
            aux_level_count: aux,
            selected,
            smc,
            log_zhat,
        });
        break;
    }
    let mut state = state.ok_or(Error::InitializationFailed {
        attempts: setup.init_retries.max(1),
    })?;

    let mut rows = Vec::with_capacity(setup.iterations + 1);
    rows.push(row_from_state(&state, 0, true));
    for i in 1..=setup.iterations {
        let accepted = match (setup.kind, setup.levels) {
            (ChainKind::Pimh, LevelPolicy::Fixed(s)) => {
                pimh_step(&mut state, model, s, setup.n_particles, rng)?
            }
            (ChainKind::Pmmh, LevelPolicy::Fixed(s)) => pmmh_step(
                &mut state,
                model,
                setup.prior.unwrap(),
                setup.proposal.unwrap(),
                s,
                setup.n_particles,
                rng,
            )?,
            (ChainKind::AdaptivePmmh, LevelPolicy::Adaptive(a)) => adaptive_pmmh_step(
                &mut state,
                model,
                setup.prior.unwrap(),
                setup.proposal.unwrap(),
                a,
                setup.n_particles,
                rng,
            )?,
            _ => unreachable!("validated above"),
        };
        debug_assert!(state.log_zhat.is_finite());
        rows.push(row_from_state(&state, i, accepted));
    }
    Ok(ChainRecord { rows })
}
