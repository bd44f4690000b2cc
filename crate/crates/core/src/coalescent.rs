//! The coalescent with mutation, in the backward frame.
//!
//! Forward in time the process starts when a common ancestor first splits
//! (two individuals of one type) and grows by split and mutation moves until
//! the population reaches `m`, where the type counts are observed. Inference
//! runs the process backward from the data: the walk proposes reverse moves
//! and is weighted forward, descending through population levels until two
//! individuals remain.
//!
//! Besides the model itself this module provides the equal-spacing level
//! builder, the geometric level-count sampler, and three small-instance
//! oracles: a level-by-level linear solve of the backward target's
//! normalizing constant, an independent forward-recursion solve of the
//! marginal likelihood, and a truncated enumeration of the stopping-time
//! posterior.

use crate::error::{Error, Result};
use crate::model::{LevelSchedule, ParameterPoint, State, StoppedProcessModel};
use crate::statespace;
use rand::Rng;
use std::collections::HashMap;

/// Maximum total state count the exact oracles will touch.
const ORACLE_STATE_LIMIT: usize = 4096;

/// The coalescent-with-mutation model, bound to one observation vector.
#[derive(Debug, Clone)]
pub struct CoalescentModel {
    m: u32,
    y: State,
    params: ParameterPoint,
    /// Stationary distribution of the mutation matrix, used as the type law
    /// of the common ancestor.
    nu: Vec<f64>,
    log_prefactor: f64,
}

impl CoalescentModel {
    /// Build a model from the observed type counts and parameters. The
    /// stopping size `m` is the total of `y`.
    pub fn new(y: Vec<u32>, params: ParameterPoint) -> Result<Self> {
        let d = params.num_types();
        if y.len() != d {
            return Err(Error::InvalidModel(format!(
                "data vector has {} types, mutation matrix has {d}",
                y.len()
            )));
        }
        if params.migration_matrix.is_some() {
            return Err(Error::InvalidModel(
                "coalescent model does not take a migration matrix".into(),
            ));
        }
        let m: u32 = y.iter().sum();
        if m < 3 {
            return Err(Error::InvalidModel(format!(
                "observed population {m} must be at least 3"
            )));
        }
        let nu = stationary_distribution(&params.mutation_matrix)?;
        let log_prefactor = prefactor_log(m, params.mu, &y);
        Ok(Self {
            m,
            y: State::new(y),
            params,
            nu,
            log_prefactor,
        })
    }

    pub fn num_types(&self) -> usize {
        self.params.num_types()
    }

    pub fn stationary(&self) -> &[f64] {
        &self.nu
    }
}

fn prefactor_log(m: u32, mu: f64, y: &[u32]) -> f64 {
    let mut lw = ((m as f64 - 1.0) / (m as f64 - 1.0 + mu)).ln();
    for &c in y {
        lw += libm::lgamma(c as f64 + 1.0);
    }
    lw - libm::lgamma(m as f64 + 1.0)
}

impl StoppedProcessModel for CoalescentModel {
    fn state_dimension(&self) -> usize {
        self.num_types()
    }

    fn population_cap(&self) -> u32 {
        self.m
    }

    fn observation(&self) -> &State {
        &self.y
    }

    fn params(&self) -> &ParameterPoint {
        &self.params
    }

    fn with_params(&self, params: ParameterPoint) -> Result<Self> {
        Self::new(self.y.counts().to_vec(), params)
    }

    fn forward_log_density(&self, from: &State, to: &State) -> f64 {
        debug_assert_eq!(from.len(), self.num_types());
        debug_assert_eq!(to.len(), self.num_types());
        let n = from.total();
        let mu = self.params.mu;
        let denom = n as f64 - 1.0 + mu;
        let to_total = to.total();
        if to_total == n + 1 {
            // Split: one existing individual is copied.
            let mut gained = None;
            for i in 0..from.len() {
                match to.counts()[i].cmp(&from.counts()[i]) {
                    std::cmp::Ordering::Greater => {
                        if to.counts()[i] != from.counts()[i] + 1 || gained.is_some() {
                            return f64::NEG_INFINITY;
                        }
                        gained = Some(i);
                    }
                    std::cmp::Ordering::Less => return f64::NEG_INFINITY,
                    std::cmp::Ordering::Equal => {}
                }
            }
            match gained {
                Some(i) if from.counts()[i] >= 1 => {
                    let pick = from.counts()[i] as f64 / n as f64;
                    (pick * (n as f64 - 1.0) / denom).ln()
                }
                _ => f64::NEG_INFINITY,
            }
        } else if to_total == n {
            if to == from {
                // Self-mutation: any individual mutates to its own type.
                let r = &self.params.mutation_matrix;
                let mass: f64 = (0..from.len())
                    .map(|i| from.counts()[i] as f64 / n as f64 * r[i][i])
                    .sum();
                (mass * mu / denom).ln()
            } else {
                let mut lost = None;
                let mut gained = None;
                for i in 0..from.len() {
                    let (f, t) = (from.counts()[i], to.counts()[i]);
                    if t == f {
                        continue;
                    }
                    if t + 1 == f && lost.is_none() {
                        lost = Some(i);
                    } else if t == f + 1 && gained.is_none() {
                        gained = Some(i);
                    } else {
                        return f64::NEG_INFINITY;
                    }
                }
                match (lost, gained) {
                    (Some(i), Some(l)) => {
                        let pick = from.counts()[i] as f64 / n as f64;
                        let r_il = self.params.mutation_matrix[i][l];
                        (pick * mu / denom * r_il).ln()
                    }
                    _ => f64::NEG_INFINITY,
                }
            }
        } else {
            f64::NEG_INFINITY
        }
    }

    fn predecessors(&self, x: &State) -> Vec<(State, f64)> {
        let n = x.total();
        let d = x.len();
        let mu = self.params.mu;
        let r = &self.params.mutation_matrix;
        let mut out = Vec::new();

        // Reverse splits: remove one of a type with at least two members.
        if n >= 3 {
            let prev_n = (n - 1) as f64;
            let dens_scale = (prev_n - 1.0) / (prev_n - 1.0 + mu) / prev_n;
            for i in 0..d {
                if x.counts()[i] >= 2 {
                    let mut c = x.counts().to_vec();
                    c[i] -= 1;
                    let dens = (c[i] as f64) * dens_scale;
                    if dens > 0.0 {
                        out.push((State::new(c), dens));
                    }
                }
            }
        }

        // Reverse mutations stay on the same level, so they are excluded at
        // the stopping size: a forward path visits level m only once.
        if n < self.m && mu > 0.0 {
            let mut_scale = mu / (n as f64 - 1.0 + mu) / n as f64;
            for l in 0..d {
                if x.counts()[l] == 0 {
                    continue;
                }
                for i in 0..d {
                    if i == l || r[i][l] == 0.0 {
                        continue;
                    }
                    let mut c = x.counts().to_vec();
                    c[l] -= 1;
                    c[i] += 1;
                    let dens = (c[i] as f64) * mut_scale * r[i][l];
                    out.push((State::new(c), dens));
                }
            }
            // Self-mutations collapse onto a single self-loop predecessor.
            let self_mass: f64 = (0..d).map(|i| x.counts()[i] as f64 * r[i][i]).sum();
            if self_mass > 0.0 {
                out.push((x.clone(), self_mass * mut_scale));
            }
        }
        out
    }

    fn successors(&self, x: &State) -> Vec<(State, f64)> {
        let n = x.total();
        let d = x.len();
        let mu = self.params.mu;
        let r = &self.params.mutation_matrix;
        let denom = n as f64 - 1.0 + mu;
        let mut out = Vec::new();
        for i in 0..d {
            if x.counts()[i] == 0 {
                continue;
            }
            let pick = x.counts()[i] as f64 / n as f64;
            let mut c = x.counts().to_vec();
            c[i] += 1;
            out.push((State::new(c), pick * (n as f64 - 1.0) / denom));
        }
        if mu > 0.0 {
            for i in 0..d {
                if x.counts()[i] == 0 {
                    continue;
                }
                let pick = x.counts()[i] as f64 / n as f64;
                for l in 0..d {
                    if i == l || r[i][l] == 0.0 {
                        continue;
                    }
                    let mut c = x.counts().to_vec();
                    c[i] -= 1;
                    c[l] += 1;
                    out.push((State::new(c), pick * mu / denom * r[i][l]));
                }
            }
            let self_mass: f64 = (0..d).map(|i| x.counts()[i] as f64 * r[i][i]).sum();
            if self_mass > 0.0 {
                out.push((x.clone(), self_mass / n as f64 * mu / denom));
            }
        }
        out
    }

    fn initial_log_weight(&self) -> f64 {
        self.log_prefactor
    }

    fn terminal_log_weight(&self, x: &State) -> f64 {
        if x.total() != 2 {
            return f64::NEG_INFINITY;
        }
        for i in 0..x.len() {
            if x.counts()[i] == 2 {
                return self.nu[i].ln();
            }
        }
        // Two individuals of different types: the forward process cannot
        // start here.
        f64::NEG_INFINITY
    }
}

/// Stationary distribution of a row-stochastic matrix, solved from
/// `nu R = nu` with the normalization `sum nu = 1`. Errors when the matrix
/// has no unique stationary law.
pub fn stationary_distribution(r: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = r.len();
    // (R^T - I) nu = 0, with the last equation replaced by sum(nu) = 1.
    let mut a = vec![vec![0.0; d]; d];
    let mut b = vec![0.0; d];
    for i in 0..d.saturating_sub(1) {
        for j in 0..d {
            a[i][j] = r[j][i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..d {
        a[d - 1][j] = 1.0;
    }
    b[d - 1] = 1.0;
    let nu = statespace::solve_dense(a, b).map_err(|_| {
        Error::InvalidParameter("mutation matrix has no unique stationary distribution".into())
    })?;
    for (i, &v) in nu.iter().enumerate() {
        if v < -1e-9 {
            return Err(Error::InvalidParameter(format!(
                "stationary solve produced negative mass {v} at type {i}"
            )));
        }
        // nu R = nu residual check.
        let back: f64 = (0..d).map(|j| nu[j] * r[j][i]).sum();
        if (back - v).abs() > 1e-9 {
            return Err(Error::InvalidParameter(
                "stationary distribution residual too large".into(),
            ));
        }
    }
    Ok(nu.into_iter().map(|v| v.max(0.0)).collect())
}

/// Almost equally spaced levels from just below `m` down to 2:
/// `l_n = round(m - n (m-2) / p)`, deduplicated and pinned to end at 2.
pub fn build_level_schedule(m: u32, p: usize) -> Result<LevelSchedule> {
    if p < 1 || p as u32 > m.saturating_sub(2) {
        return Err(Error::InvalidSchedule(format!(
            "level count {p} outside 1..={} for stopping size {m}",
            m.saturating_sub(2)
        )));
    }
    let spacing = (m as f64 - 2.0) / p as f64;
    let mut levels = Vec::with_capacity(p);
    for n in 1..=p {
        let l = (m as f64 - n as f64 * spacing).round() as u32;
        if levels.last().is_none_or(|&prev| l < prev) {
            levels.push(l);
        }
    }
    *levels.last_mut().unwrap() = 2;
    LevelSchedule::with_default_deadlines(levels, m)
}

/// Normalized level-count weights proportional to `mu^p` over the support.
pub fn level_count_weights(mu: f64, support: &[usize]) -> Result<Vec<f64>> {
    if support.is_empty() {
        return Err(Error::InvalidParameter("empty level-count support".into()));
    }
    if !mu.is_finite() || mu <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "level-count weights mu^p are degenerate at mu = {mu}"
        )));
    }
    let raw: Vec<f64> = support.iter().map(|&p| mu.powi(p as i32)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Draw a level count from the support with probability proportional to
/// `mu^p`.
pub fn sample_level_count<R: Rng>(mu: f64, support: &[usize], rng: &mut R) -> Result<usize> {
    let weights = level_count_weights(mu, support)?;
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, w) in weights.iter().enumerate() {
        cum += w;
        if u < cum {
            return Ok(support[i]);
        }
    }
    Ok(*support.last().unwrap())
}

/// Exact normalizing constant of the backward path target, by one linear
/// solve per population level. Only feasible for small instances; the state
/// count is guarded.
pub fn exact_normalizer_backward(model: &CoalescentModel) -> Result<f64> {
    statespace::backward_normalizer_exact(model, ORACLE_STATE_LIMIT)
}

/// Exact marginal likelihood of the data under the forward process, by the
/// hitting-value recursion solved level by level downward. Independent of
/// the backward machinery: it only touches forward successor enumeration.
pub fn exact_marginal_forward(model: &CoalescentModel) -> Result<f64> {
    let dim = model.state_dimension();
    let m = model.population_cap();
    let states: usize = (2..=m).map(|l| statespace::composition_count(l, dim)).sum();
    if states > ORACLE_STATE_LIMIT {
        return Err(Error::StateSpaceTooLarge {
            states,
            limit: ORACLE_STATE_LIMIT,
        });
    }

    // Boundary: h = 1 exactly at the data, 0 elsewhere on the stopping set.
    let mut above: HashMap<State, f64> = statespace::compositions(m, dim)
        .into_iter()
        .map(|c| {
            let s = State::new(c);
            let h = if &s == model.observation() { 1.0 } else { 0.0 };
            (s, h)
        })
        .collect();

    for level in (2..m).rev() {
        let states: Vec<State> = statespace::compositions(level, dim)
            .into_iter()
            .map(State::new)
            .collect();
        let index: HashMap<&State, usize> =
            states.iter().enumerate().map(|(i, s)| (s, i)).collect();
        let n = states.len();
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        for (row, x) in states.iter().enumerate() {
            for (next, dens) in model.successors(x) {
                if next.total() == level {
                    a[row][index[&next]] += dens;
                } else {
                    debug_assert_eq!(next.total(), level + 1);
                    b[row] += dens * above[&next];
                }
            }
        }
        for (row, a_row) in a.iter_mut().enumerate() {
            for (col, v) in a_row.iter_mut().enumerate() {
                *v = if row == col { 1.0 - *v } else { -*v };
            }
        }
        let h = statespace::solve_dense(a, b)?;
        above = states.into_iter().zip(h).collect();
    }

    let mut log_comb = -libm::lgamma(m as f64 + 1.0);
    for &c in model.observation().counts() {
        log_comb += libm::lgamma(c as f64 + 1.0);
    }
    let mut z = 0.0;
    for i in 0..dim {
        let mut c = vec![0u32; dim];
        c[i] = 2;
        z += model.stationary()[i] * above[&State::new(c)];
    }
    Ok(log_comb.exp() * z)
}

/// Posterior of the total stopping time under the backward target, by
/// truncated path enumeration. Entry `t` is `P(tau = t)`; the truncation
/// tail bound is below `tol` relative to the total mass.
pub fn exact_tau_posterior(model: &CoalescentModel, tol: f64) -> Result<Vec<f64>> {
    let law = statespace::truncated_backward_path_law(model, tol, ORACLE_STATE_LIMIT)?;
    if law.total <= 0.0 {
        return Err(Error::InvalidModel(
            "backward target carries zero mass; stopping-time posterior undefined".into(),
        ));
    }
    debug_assert!(law.tail_bound <= tol * law.total);
    Ok(law.mass_by_tau.iter().map(|m| m / law.total).collect())
}

/// Un-normalized backward target mass summed over path lengths, times the
/// prefactor: a truncated-enumeration route to the same constant as
/// [`exact_normalizer_backward`].
pub fn truncated_normalizer_backward(model: &CoalescentModel, tol: f64) -> Result<f64> {
    let law = statespace::truncated_backward_path_law(model, tol, ORACLE_STATE_LIMIT)?;
    Ok(model.initial_log_weight().exp() * law.total)
}
