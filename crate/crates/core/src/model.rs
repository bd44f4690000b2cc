//! Shared domain types and the stopped-process model contract.
//!
//! Everything here is phrased in the backward frame: a trajectory starts at
//! the observed data vector and walks reverse transitions until the
//! population count reaches two. Concrete models supply forward transition
//! densities, predecessor enumeration, a backward proposal kernel, and the
//! boundary weight factors; the SMC and MCMC drivers only see this contract.

use crate::error::{Error, Result};
use rand::Rng;

/// Number of proposal steps granted per unit of level descent when deadlines
/// are not given explicitly. The backward walk loses one population unit per
/// reverse split, so this makes deadline rejection a rare safety valve while
/// still guaranteeing termination.
pub const DEFAULT_STEPS_PER_LEVEL_UNIT: u32 = 200;

/// Model parameters: mutation rate, mutation matrix, optional migration
/// matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPoint {
    pub mu: f64,
    /// Row-stochastic d x d mutation matrix.
    pub mutation_matrix: Vec<Vec<f64>>,
    /// Symmetric g x g migration matrix with zero diagonal; present only for
    /// the migration model.
    pub migration_matrix: Option<Vec<Vec<f64>>>,
}

impl ParameterPoint {
    /// Build and validate a parameter point without migration.
    pub fn new(mu: f64, mutation_matrix: Vec<Vec<f64>>) -> Result<Self> {
        Self::with_migration(mu, mutation_matrix, None)
    }

    /// Build and validate a parameter point, optionally with migration.
    pub fn with_migration(
        mu: f64,
        mutation_matrix: Vec<Vec<f64>>,
        migration_matrix: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        if !mu.is_finite() || mu < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "mutation rate must be finite and non-negative, got {mu}"
            )));
        }
        let d = mutation_matrix.len();
        if d == 0 {
            return Err(Error::InvalidParameter(
                "mutation matrix must be non-empty".into(),
            ));
        }
        for (i, row) in mutation_matrix.iter().enumerate() {
            if row.len() != d {
                return Err(Error::InvalidParameter(format!(
                    "mutation matrix row {i} has length {}, expected {d}",
                    row.len()
                )));
            }
            if row.iter().any(|&r| !r.is_finite() || r < 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "mutation matrix row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "mutation matrix row {i} sums to {sum}, expected 1"
                )));
            }
        }
        if let Some(g) = &migration_matrix {
            let ng = g.len();
            for (i, row) in g.iter().enumerate() {
                if row.len() != ng {
                    return Err(Error::InvalidParameter(format!(
                        "migration matrix row {i} has length {}, expected {ng}",
                        row.len()
                    )));
                }
                if row[i] != 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "migration matrix diagonal entry {i} must be zero"
                    )));
                }
                for (j, &v) in row.iter().enumerate() {
                    if !v.is_finite() || v < 0.0 {
                        return Err(Error::InvalidParameter(format!(
                            "migration matrix entry ({i},{j}) must be finite and non-negative"
                        )));
                    }
                    if (v - g[j][i]).abs() > 1e-12 {
                        return Err(Error::InvalidParameter(format!(
                            "migration matrix must be symmetric; entries ({i},{j}) and ({j},{i}) differ"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            mu,
            mutation_matrix,
            migration_matrix,
        })
    }

    /// Number of genetic types.
    pub fn num_types(&self) -> usize {
        self.mutation_matrix.len()
    }

    /// The coordinates inference walks over: `mu` followed by the upper
    /// triangle of the migration matrix when present. The mutation matrix is
    /// treated as known.
    pub fn free_coordinates(&self) -> Vec<f64> {
        let mut v = vec![self.mu];
        if let Some(g) = &self.migration_matrix {
            for i in 0..g.len() {
                for j in (i + 1)..g.len() {
                    v.push(g[i][j]);
                }
            }
        }
        v
    }

    /// Rebuild a parameter point from free coordinates, keeping the mutation
    /// matrix and the migration-matrix shape.
    pub fn with_free_coordinates(&self, coords: &[f64]) -> Result<Self> {
        let expected = self.free_coordinates().len();
        if coords.len() != expected {
            return Err(Error::InvalidParameter(format!(
                "expected {expected} free coordinates, got {}",
                coords.len()
            )));
        }
        let migration = self.migration_matrix.as_ref().map(|g| {
            let ng = g.len();
            let mut out = vec![vec![0.0; ng]; ng];
            let mut k = 1;
            for i in 0..ng {
                for j in (i + 1)..ng {
                    out[i][j] = coords[k];
                    out[j][i] = coords[k];
                    k += 1;
                }
            }
            out
        });
        Self::with_migration(coords[0], self.mutation_matrix.clone(), migration)
    }
}

/// A population state: the count of individuals per type (per group and type
/// for the migration model).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct State {
    counts: Vec<u32>,
}

impl State {
    pub fn new(counts: Vec<u32>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Total population `|x|_1`.
    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// One level's piece of a backward trajectory: the states visited strictly
/// after the previous level hit, up to and including the hit of this level.
/// `tau` is the cumulative reverse-step index at which the level was hit (or
/// the deadline cap, for a rejected piece that carries zero weight).
#[derive(Debug, Clone, PartialEq)]
pub struct PathSegment {
    pub states: Vec<State>,
    pub tau: u32,
}

/// A full backward trajectory assembled from one segment per level.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub segments: Vec<PathSegment>,
    pub total_tau: u32,
}

impl Trajectory {
    /// The final state of the path (the level-2 endpoint).
    pub fn terminal_state(&self) -> Option<&State> {
        self.segments.last().and_then(|s| s.states.last())
    }
}

/// A strictly decreasing sequence of population levels ending at 2, with a
/// cumulative step deadline per level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSchedule {
    levels: Vec<u32>,
    deadlines: Vec<u32>,
}

impl LevelSchedule {
    /// Build a schedule with explicit deadlines.
    pub fn new(levels: Vec<u32>, deadlines: Vec<u32>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidSchedule("no levels given".into()));
        }
        if *levels.last().unwrap() != 2 {
            return Err(Error::InvalidSchedule(format!(
                "last level must be 2, got {}",
                levels.last().unwrap()
            )));
        }
        for w in levels.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::InvalidSchedule(format!(
                    "levels must strictly decrease, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if deadlines.len() != levels.len() {
            return Err(Error::InvalidSchedule(format!(
                "{} deadlines for {} levels",
                deadlines.len(),
                levels.len()
            )));
        }
        if deadlines[0] == 0 {
            return Err(Error::InvalidSchedule("deadlines must be positive".into()));
        }
        for w in deadlines.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidSchedule(format!(
                    "deadlines must strictly increase, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self { levels, deadlines })
    }

    /// Build a schedule with the default deadline rule
    /// `t_n = t_{n-1} + 200 * (l_{n-1} - l_n)`, taking `l_0 = m`.
    pub fn with_default_deadlines(levels: Vec<u32>, m: u32) -> Result<Self> {
        let mut deadlines = Vec::with_capacity(levels.len());
        let mut t = 0u32;
        let mut prev = m;
        for &l in &levels {
            if l >= prev {
                return Err(Error::InvalidSchedule(format!(
                    "level {l} does not descend from {prev}"
                )));
            }
            t += DEFAULT_STEPS_PER_LEVEL_UNIT * (prev - l);
            deadlines.push(t);
            prev = l;
        }
        Self::new(levels, deadlines)
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn deadlines(&self) -> &[u32] {
        &self.deadlines
    }

    /// Number of levels `p`.
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Check a schedule against a model's stopping population `m`: levels must
/// strictly decrease from below `m` down to exactly 2, with increasing
/// deadlines. Structural rules are already enforced by the constructors, so
/// this adds the `l_1 < m` requirement.
pub fn validate_level_schedule(schedule: &LevelSchedule, m: u32) -> Result<()> {
    if schedule.levels[0] >= m {
        return Err(Error::InvalidSchedule(format!(
            "first level {} must lie below the stopping size {m}",
            schedule.levels[0]
        )));
    }
    Ok(())
}

/// The capability every concrete stopped-process model provides.
///
/// Densities are exchanged in log space throughout. `forward_log_density`
/// is the forward-in-time transition law; `predecessors` enumerates every
/// state with positive forward density into the argument, excluding states
/// at the stopping size `m` (a forward path visits the stopping set only at
/// its terminal step). The default backward proposal is the locally
/// normalized reverse kernel built from that enumeration; implementations
/// may override it with any kernel whose support covers the predecessor set.
pub trait StoppedProcessModel: Send + Sync {
    /// Length of the count vector.
    fn state_dimension(&self) -> usize;

    /// Stopping population size `m`.
    fn population_cap(&self) -> u32;

    /// The observed data vector, i.e. the start of every backward walk.
    fn observation(&self) -> &State;

    fn params(&self) -> &ParameterPoint;

    /// Rebuild this model at a different parameter point, keeping the data.
    fn with_params(&self, params: ParameterPoint) -> Result<Self>
    where
        Self: Sized;

    /// Log forward transition density `log P(to | from)`; `-inf` when `to`
    /// is not a single-move successor of `from`.
    fn forward_log_density(&self, from: &State, to: &State) -> f64;

    /// All states with positive forward density into `x`, with those linear
    /// densities. States at the stopping size are excluded; multiple
    /// transition channels into the same predecessor are merged.
    fn predecessors(&self, x: &State) -> Vec<(State, f64)>;

    /// All states reachable from `x` in one forward move, with densities.
    fn successors(&self, x: &State) -> Vec<(State, f64)>;

    /// Log weight factor attached to the first level (the constant prefactor
    /// of the backward target).
    fn initial_log_weight(&self) -> f64;

    /// Log weight factor attached to the endpoint of the walk (the initial
    /// density of the forward process); `-inf` for states the forward
    /// process cannot start from.
    fn terminal_log_weight(&self, x: &State) -> f64;

    /// Whether `x` lies in the level set `{|x|_1 = level}`.
    fn level_membership(&self, x: &State, level: u32) -> bool {
        x.total() == level
    }

    /// Draw a predecessor from the backward proposal; returns the sampled
    /// state and its log proposal density.
    fn propose_predecessor<R: Rng>(&self, x: &State, rng: &mut R) -> Result<(State, f64)> {
        let preds = self.predecessors(x);
        let total: f64 = preds.iter().map(|(_, d)| d).sum();
        if preds.is_empty() || total <= 0.0 {
            return Err(Error::DegenerateProposal(x.counts().to_vec()));
        }
        let u: f64 = rng.random::<f64>() * total;
        let mut cum = 0.0;
        let mut chosen = preds.len() - 1;
        for (i, (_, d)) in preds.iter().enumerate() {
            cum += d;
            if u < cum {
                chosen = i;
                break;
            }
        }
        let (state, dens) = preds.into_iter().nth(chosen).unwrap();
        Ok((state, (dens / total).ln()))
    }

    /// Log density of the backward proposal `M(x_prev | x)`; `-inf` when
    /// `x_prev` is not a valid predecessor of `x`.
    fn proposal_log_density(&self, x: &State, x_prev: &State) -> f64 {
        let preds = self.predecessors(x);
        let total: f64 = preds.iter().map(|(_, d)| d).sum();
        if total <= 0.0 {
            return f64::NEG_INFINITY;
        }
        preds
            .iter()
            .find(|(s, _)| s == x_prev)
            .map(|(_, d)| (d / total).ln())
            .unwrap_or(f64::NEG_INFINITY)
    }

    /// Log importance weight of one level's segment: the product of
    /// forward-over-proposal density ratios along its steps, the deadline
    /// and level-hit indicators, the constant prefactor at the first level
    /// and the endpoint factor at the last.
    ///
    /// `anchor` is the state the segment continues from (the previous
    /// segment's endpoint, or the data vector for the first level).
    fn segment_log_weight(
        &self,
        anchor: &State,
        segment: &PathSegment,
        level_index: usize,
        schedule: &LevelSchedule,
    ) -> f64 {
        let target = schedule.levels()[level_index];
        let deadline = schedule.deadlines()[level_index];
        let last = match segment.states.last() {
            Some(s) => s,
            None => return f64::NEG_INFINITY,
        };
        if segment.tau > deadline || !self.level_membership(last, target) {
            return f64::NEG_INFINITY;
        }
        let mut logw = 0.0;
        let mut prev = anchor;
        for s in &segment.states {
            logw += self.forward_log_density(s, prev) - self.proposal_log_density(prev, s);
            prev = s;
        }
        if level_index == 0 {
            logw += self.initial_log_weight();
        }
        if level_index == schedule.num_levels() - 1 {
            logw += self.terminal_log_weight(last);
        }
        logw
    }
}
