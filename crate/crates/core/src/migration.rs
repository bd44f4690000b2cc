//! The coalescent with migration: individuals carry a group label as well as
//! a type, and may move between groups at symmetric pairwise rates. The
//! state concatenates the per-group type counts, so a population of `g`
//! groups and `d` types lives on count vectors of length `g * d`.
//!
//! With one group (or a zero migration matrix and one group) every quantity
//! reduces exactly to the plain coalescent. The per-move normalization
//! divides by `n - 1 + mu + gamma_alpha`, where `gamma_alpha` is the total
//! migration rate out of the picked individual's group, which keeps the
//! forward densities summing to one from every interior state.

use crate::coalescent::stationary_distribution;
use crate::error::{Error, Result};
use crate::model::{ParameterPoint, State, StoppedProcessModel};
use crate::statespace;
use rand::Rng;

const ORACLE_STATE_LIMIT: usize = 4096;

/// Coalescent-with-migration model bound to one observation vector.
#[derive(Debug, Clone)]
pub struct MigrationModel {
    groups: usize,
    types: usize,
    m: u32,
    y: State,
    params: ParameterPoint,
    nu: Vec<f64>,
    /// Total outgoing migration rate per group.
    gamma: Vec<f64>,
    log_prefactor: f64,
}

impl MigrationModel {
    /// Build a model from grouped type counts (group-major layout: the
    /// counts of group `a` occupy `y[a*d .. (a+1)*d]`).
    pub fn new(groups: usize, y: Vec<u32>, params: ParameterPoint) -> Result<Self> {
        let d = params.num_types();
        if groups == 0 {
            return Err(Error::InvalidModel("need at least one group".into()));
        }
        if y.len() != groups * d {
            return Err(Error::InvalidModel(format!(
                "data vector has length {}, expected {} groups x {} types",
                y.len(),
                groups,
                d
            )));
        }
        let g_mat = match &params.migration_matrix {
            Some(g) if g.len() == groups => g.clone(),
            Some(g) => {
                return Err(Error::InvalidModel(format!(
                    "migration matrix is {}x{}, expected {groups}x{groups}",
                    g.len(),
                    g.len()
                )))
            }
            None if groups == 1 => vec![vec![0.0]],
            None => {
                return Err(Error::InvalidModel(
                    "migration model needs a migration matrix".into(),
                ))
            }
        };
        let m: u32 = y.iter().sum();
        if m < 3 {
            return Err(Error::InvalidModel(format!(
                "observed population {m} must be at least 3"
            )));
        }
        let nu = stationary_distribution(&params.mutation_matrix)?;
        let gamma: Vec<f64> = g_mat.iter().map(|row| row.iter().sum()).collect();
        let mut log_prefactor = ((m as f64 - 1.0) / (m as f64 - 1.0 + params.mu)).ln();
        for &c in &y {
            log_prefactor += libm::lgamma(c as f64 + 1.0);
        }
        log_prefactor -= libm::lgamma(m as f64 + 1.0);
        Ok(Self {
            groups,
            types: d,
            m,
            y: State::new(y),
            params,
            nu,
            gamma,
            log_prefactor,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.groups
    }

    pub fn num_types(&self) -> usize {
        self.types
    }

    fn idx(&self, group: usize, ty: usize) -> usize {
        group * self.types + ty
    }

    fn migration_rate(&self, from: usize, to: usize) -> f64 {
        match &self.params.migration_matrix {
            Some(g) => g[from][to],
            None => 0.0,
        }
    }
}

impl StoppedProcessModel for MigrationModel {
    fn state_dimension(&self) -> usize {
        self.groups * self.types
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
        Self::new(self.groups, self.y.counts().to_vec(), params)
    }

    fn forward_log_density(&self, from: &State, to: &State) -> f64 {
        // Classify the move by the count difference, then price it.
        debug_assert_eq!(from.len(), self.state_dimension());
        debug_assert_eq!(to.len(), self.state_dimension());
        let n = from.total();
        let mu = self.params.mu;
        let to_total = to.total();
        let mut gains: Vec<usize> = Vec::with_capacity(2);
        let mut losses: Vec<usize> = Vec::with_capacity(2);
        for k in 0..from.len() {
            let (f, t) = (from.counts()[k], to.counts()[k]);
            if t == f + 1 {
                gains.push(k);
            } else if t + 1 == f {
                losses.push(k);
            } else if t != f {
                return f64::NEG_INFINITY;
            }
            if gains.len() > 1 || losses.len() > 1 {
                return f64::NEG_INFINITY;
            }
        }
        let denom_at = |group: usize| n as f64 - 1.0 + mu + self.gamma[group];
        if to_total == n + 1 && losses.is_empty() && gains.len() == 1 {
            // Split of an existing individual at (group, type) = gains[0].
            let k = gains[0];
            let group = k / self.types;
            let count = from.counts()[k] as f64;
            if count < 1.0 {
                return f64::NEG_INFINITY;
            }
            (count / n as f64 * (n as f64 - 1.0) / denom_at(group)).ln()
        } else if to_total == n && to == from {
            // Self-mutation across all groups and types.
            let r = &self.params.mutation_matrix;
            let mut mass = 0.0;
            for a in 0..self.groups {
                for i in 0..self.types {
                    let c = from.counts()[self.idx(a, i)] as f64;
                    if c > 0.0 {
                        mass += c / n as f64 * mu * r[i][i] / denom_at(a);
                    }
                }
            }
            mass.ln()
        } else if to_total == n && gains.len() == 1 && losses.len() == 1 {
            let k_loss = losses[0];
            let k_gain = gains[0];
            let (ga, ta) = (k_loss / self.types, k_loss % self.types);
            let (gb, tb) = (k_gain / self.types, k_gain % self.types);
            let count = from.counts()[k_loss] as f64;
            if ga == gb {
                // Mutation within a group.
                let r_il = self.params.mutation_matrix[ta][tb];
                (count / n as f64 * mu * r_il / denom_at(ga)).ln()
            } else if ta == tb {
                // Migration of one individual between groups.
                let rate = self.migration_rate(ga, gb);
                (count / n as f64 * rate / denom_at(ga)).ln()
            } else {
                f64::NEG_INFINITY
            }
        } else {
            f64::NEG_INFINITY
        }
    }

    fn predecessors(&self, x: &State) -> Vec<(State, f64)> {
        let n = x.total();
        let mu = self.params.mu;
        let r = &self.params.mutation_matrix;
        let mut out = Vec::new();

        // Reverse splits.
        if n >= 3 {
            let prev_n = (n - 1) as f64;
            for a in 0..self.groups {
                let scale = (prev_n - 1.0) / (prev_n - 1.0 + mu + self.gamma[a]) / prev_n;
                for i in 0..self.types {
                    let k = self.idx(a, i);
                    if x.counts()[k] >= 2 {
                        let mut c = x.counts().to_vec();
                        c[k] -= 1;
                        let dens = c[k] as f64 * scale;
                        if dens > 0.0 {
                            out.push((State::new(c), dens));
                        }
                    }
                }
            }
        }

        if n < self.m {
            // Reverse mutations within each group.
            if mu > 0.0 {
                for a in 0..self.groups {
                    let scale = mu / (n as f64 - 1.0 + mu + self.gamma[a]) / n as f64;
                    for l in 0..self.types {
                        if x.counts()[self.idx(a, l)] == 0 {
                            continue;
                        }
                        for i in 0..self.types {
                            if i == l || r[i][l] == 0.0 {
                                continue;
                            }
                            let mut c = x.counts().to_vec();
                            c[self.idx(a, l)] -= 1;
                            c[self.idx(a, i)] += 1;
                            let dens = c[self.idx(a, i)] as f64 * scale * r[i][l];
                            out.push((State::new(c), dens));
                        }
                    }
                }
                let mut self_mass = 0.0;
                for a in 0..self.groups {
                    let scale = mu / (n as f64 - 1.0 + mu + self.gamma[a]) / n as f64;
                    for i in 0..self.types {
                        self_mass += x.counts()[self.idx(a, i)] as f64 * r[i][i] * scale;
                    }
                }
                if self_mass > 0.0 {
                    out.push((x.clone(), self_mass));
                }
            }
            // Reverse migrations: the forward move sent one type-i
            // individual from group alpha to group beta, so beta must still
            // hold one.
            for b in 0..self.groups {
                for a in 0..self.groups {
                    if a == b || self.migration_rate(a, b) == 0.0 {
                        continue;
                    }
                    let scale = self.migration_rate(a, b)
                        / (n as f64 - 1.0 + mu + self.gamma[a])
                        / n as f64;
                    for i in 0..self.types {
                        if x.counts()[self.idx(b, i)] == 0 {
                            continue;
                        }
                        let mut c = x.counts().to_vec();
                        c[self.idx(b, i)] -= 1;
                        c[self.idx(a, i)] += 1;
                        let dens = c[self.idx(a, i)] as f64 * scale;
                        out.push((State::new(c), dens));
                    }
                }
            }
        }
        out
    }

    fn successors(&self, x: &State) -> Vec<(State, f64)> {
        let n = x.total();
        let mu = self.params.mu;
        let r = &self.params.mutation_matrix;
        let mut out = Vec::new();
        let mut self_mass = 0.0;
        for a in 0..self.groups {
            let denom = n as f64 - 1.0 + mu + self.gamma[a];
            for i in 0..self.types {
                let k = self.idx(a, i);
                let count = x.counts()[k] as f64;
                if count == 0.0 {
                    continue;
                }
                let pick = count / n as f64;
                let mut c = x.counts().to_vec();
                c[k] += 1;
                out.push((State::new(c), pick * (n as f64 - 1.0) / denom));
                if mu > 0.0 {
                    for l in 0..self.types {
                        if i == l || r[i][l] == 0.0 {
                            continue;
                        }
                        let mut c = x.counts().to_vec();
                        c[k] -= 1;
                        c[self.idx(a, l)] += 1;
                        out.push((State::new(c), pick * mu * r[i][l] / denom));
                    }
                    self_mass += pick * mu * r[i][i] / denom;
                }
                for b in 0..self.groups {
                    let rate = self.migration_rate(a, b);
                    if b == a || rate == 0.0 {
                        continue;
                    }
                    let mut c = x.counts().to_vec();
                    c[k] -= 1;
                    c[self.idx(b, i)] += 1;
                    out.push((State::new(c), pick * rate / denom));
                }
            }
        }
        if self_mass > 0.0 {
            out.push((x.clone(), self_mass));
        }
        out
    }

    fn initial_log_weight(&self) -> f64 {
        self.log_prefactor
    }

    fn terminal_log_weight(&self, x: &State) -> f64 {
        // The forward process starts as two same-type individuals in one
        // group: stationary over types, uniform over groups.
        if x.total() != 2 {
            return f64::NEG_INFINITY;
        }
        for a in 0..self.groups {
            for i in 0..self.types {
                if x.counts()[self.idx(a, i)] == 2 {
                    return self.nu[i].ln() - (self.groups as f64).ln();
                }
            }
        }
        f64::NEG_INFINITY
    }
}

/// Normalized level-count weights proportional to
/// `p^log(mu + sum_{i>j} G_ij + 1)` over the support.
pub fn level_count_weights_mig(params: &ParameterPoint, support: &[usize]) -> Result<Vec<f64>> {
    if support.is_empty() {
        return Err(Error::InvalidParameter("empty level-count support".into()));
    }
    let mut total_rate = params.mu;
    if let Some(g) = &params.migration_matrix {
        for i in 0..g.len() {
            for j in 0..i {
                total_rate += g[i][j];
            }
        }
    }
    if total_rate < 0.0 {
        return Err(Error::InvalidParameter(
            "negative total rate in level-count weights".into(),
        ));
    }
    let expo = (total_rate + 1.0).ln();
    let raw: Vec<f64> = support.iter().map(|&p| (p as f64).powf(expo)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Draw a level count with probability proportional to
/// `p^log(mu + sum_{i>j} G_ij + 1)`.
pub fn sample_level_count_mig<R: Rng>(
    params: &ParameterPoint,
    support: &[usize],
    rng: &mut R,
) -> Result<usize> {
    let weights = level_count_weights_mig(params, support)?;
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

/// Normalizing constant of the backward target by truncated path
/// enumeration with a geometric tail bound below `tol` (relative).
pub fn truncated_normalizer_backward(model: &MigrationModel, tol: f64) -> Result<f64> {
    let law = statespace::truncated_backward_path_law(model, tol, ORACLE_STATE_LIMIT)?;
    Ok(model.initial_log_weight().exp() * law.total)
}

/// Level-by-level linear solve of the same constant; exposed for
/// cross-checking the truncated route on small instances.
pub fn exact_normalizer_backward(model: &MigrationModel) -> Result<f64> {
    statespace::backward_normalizer_exact(model, ORACLE_STATE_LIMIT)
}
