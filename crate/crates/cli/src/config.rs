//! Run configuration: a single JSON document describing the model, the
//! algorithm, and its tuning, with documented defaults filled in at
//! resolution time.

use crate::CliError;
use mlpmcmc::coalescent::CoalescentModel;
use mlpmcmc::migration::MigrationModel;
use mlpmcmc::model::{LevelSchedule, ParameterPoint, StoppedProcessModel};
use mlpmcmc::pmcmc::{
    LevelAdapter, LevelCountRule, PriorComponent, PriorSpec, ProposalSpec, WalkComponent,
};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Default random-walk scale on the log of each parameter.
pub const DEFAULT_PROPOSAL_SCALE: f64 = 0.4;
/// Default fixed level count: 14 levels, clamped to what the stopping size
/// admits.
pub const DEFAULT_LEVEL_COUNT: usize = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub algorithm: Algorithm,
    /// Particle count N.
    pub particles: usize,
    /// Chain iterations K (ignored by the one-shot `smc` run).
    pub iterations: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<Vec<PriorConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal: Option<Vec<ProposalConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<LevelPolicyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Smc,
    Pimh,
    Pmmh,
    AdaptivePmmh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    Coalescent {
        d: usize,
        m: u32,
        y: Vec<u32>,
        mu: f64,
        /// Row-major d x d mutation matrix.
        #[serde(rename = "R")]
        r: Vec<f64>,
    },
    Migration {
        g: usize,
        d: usize,
        m: u32,
        y: Vec<u32>,
        mu: f64,
        #[serde(rename = "R")]
        r: Vec<f64>,
        /// Upper triangle of the symmetric migration matrix, row by row.
        #[serde(rename = "G")]
        migration: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PriorConfig {
    Uniform { lo: f64, hi: f64 },
    Gamma { shape: f64, scale: f64 },
    Grid { points: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProposalConfig {
    LogNormal { scale: f64 },
    Normal { scale: f64 },
    GridStep { points: Vec<f64> },
    GridUniform { points: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LevelPolicyConfig {
    Fixed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        p: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        levels: Option<Vec<u32>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        deadlines: Option<Vec<u32>>,
    },
    Adaptive {
        support: Vec<usize>,
        rule: LevelRuleConfig,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LevelRuleConfig {
    /// Level-count weights proportional to `mu^p`.
    MuPower,
    /// Level-count weights proportional to `p^log(mu + sum G + 1)`.
    RatePower,
}

/// Parse a configuration document and check its invariants.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let cfg: RunConfig =
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
    validate_config(&cfg)?;
    Ok(cfg)
}

fn validate_config(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.particles < 1 {
        return Err(CliError::Validation("particles must be at least 1".into()));
    }
    if cfg.iterations < 1 {
        return Err(CliError::Validation("iterations must be at least 1".into()));
    }
    match &cfg.model {
        ModelConfig::Coalescent { d, m, y, r, .. } => {
            if y.len() != *d {
                return Err(CliError::Validation(format!(
                    "y has {} entries, expected d = {d}",
                    y.len()
                )));
            }
            if y.iter().sum::<u32>() != *m {
                return Err(CliError::Validation(format!(
                    "y sums to {}, expected m = {m}",
                    y.iter().sum::<u32>()
                )));
            }
            if r.len() != d * d {
                return Err(CliError::Validation(format!(
                    "R has {} entries, expected d*d = {}",
                    r.len(),
                    d * d
                )));
            }
        }
        ModelConfig::Migration {
            g,
            d,
            m,
            y,
            r,
            migration,
            ..
        } => {
            if y.len() != g * d {
                return Err(CliError::Validation(format!(
                    "y has {} entries, expected g*d = {}",
                    y.len(),
                    g * d
                )));
            }
            if y.iter().sum::<u32>() != *m {
                return Err(CliError::Validation(format!(
                    "y sums to {}, expected m = {m}",
                    y.iter().sum::<u32>()
                )));
            }
            if r.len() != d * d {
                return Err(CliError::Validation(format!(
                    "R has {} entries, expected d*d = {}",
                    r.len(),
                    d * d
                )));
            }
            let expect = g * (g - 1) / 2;
            if migration.len() != expect {
                return Err(CliError::Validation(format!(
                    "G has {} entries, expected g(g-1)/2 = {expect}",
                    migration.len()
                )));
            }
        }
    }
    if let Some(LevelPolicyConfig::Fixed { p, levels, .. }) = &cfg.levels {
        if p.is_some() && levels.is_some() {
            return Err(CliError::Validation(
                "give either a level count p or an explicit levels list, not both".into(),
            ));
        }
    }
    Ok(())
}

fn square_from_flat(d: usize, flat: &[f64]) -> Vec<Vec<f64>> {
    flat.chunks(d).map(|row| row.to_vec()).collect()
}

/// A constructed model, behind one name so the runner can dispatch.
pub enum BuiltModel {
    Coalescent(CoalescentModel),
    Migration(MigrationModel),
}

impl BuiltModel {
    pub fn population_cap(&self) -> u32 {
        match self {
            Self::Coalescent(m) => m.population_cap(),
            Self::Migration(m) => m.population_cap(),
        }
    }

    pub fn free_dimension(&self) -> usize {
        match self {
            Self::Coalescent(m) => m.params().free_coordinates().len(),
            Self::Migration(m) => m.params().free_coordinates().len(),
        }
    }
}

/// Build the model described by the config.
pub fn build_model(cfg: &RunConfig) -> Result<BuiltModel, CliError> {
    match &cfg.model {
        ModelConfig::Coalescent { d, y, mu, r, .. } => {
            let params = ParameterPoint::new(*mu, square_from_flat(*d, r))
                .map_err(|e| CliError::Validation(e.to_string()))?;
            let model = CoalescentModel::new(y.clone(), params)
                .map_err(|e| CliError::Validation(e.to_string()))?;
            Ok(BuiltModel::Coalescent(model))
        }
        ModelConfig::Migration {
            g,
            d,
            y,
            mu,
            r,
            migration,
            ..
        } => {
            let mut g_mat = vec![vec![0.0; *g]; *g];
            let mut k = 0;
            for i in 0..*g {
                for j in (i + 1)..*g {
                    g_mat[i][j] = migration[k];
                    g_mat[j][i] = migration[k];
                    k += 1;
                }
            }
            let params = ParameterPoint::with_migration(*mu, square_from_flat(*d, r), Some(g_mat))
                .map_err(|e| CliError::Validation(e.to_string()))?;
            let model = MigrationModel::new(*g, y.clone(), params)
                .map_err(|e| CliError::Validation(e.to_string()))?;
            Ok(BuiltModel::Migration(model))
        }
    }
}

/// The level policy with defaults applied and schedules built.
pub enum ResolvedLevels {
    Fixed(LevelSchedule),
    Adaptive(LevelAdapter),
}

/// Resolve the level policy against the model's stopping size. The default
/// is a fixed, almost equally spaced schedule of 14 levels (or as many as
/// the stopping size admits).
pub fn resolve_levels(cfg: &RunConfig, m: u32) -> Result<ResolvedLevels, CliError> {
    let policy = cfg.levels.clone().unwrap_or(LevelPolicyConfig::Fixed {
        p: None,
        levels: None,
        deadlines: None,
    });
    match policy {
        LevelPolicyConfig::Fixed {
            p,
            levels,
            deadlines,
        } => {
            let schedule = match (levels, p) {
                (Some(levels), _) => match deadlines {
                    Some(dl) => LevelSchedule::new(levels, dl),
                    None => LevelSchedule::with_default_deadlines(levels, m),
                },
                (None, p) => {
                    let p = p.unwrap_or_else(|| DEFAULT_LEVEL_COUNT.min(m as usize - 2).max(1));
                    mlpmcmc::coalescent::build_level_schedule(m, p)
                }
            }
            .map_err(|e| CliError::Validation(e.to_string()))?;
            mlpmcmc::model::validate_level_schedule(&schedule, m)
                .map_err(|e| CliError::Validation(e.to_string()))?;
            Ok(ResolvedLevels::Fixed(schedule))
        }
        LevelPolicyConfig::Adaptive { support, rule } => {
            let rule = match rule {
                LevelRuleConfig::MuPower => LevelCountRule::MuPower,
                LevelRuleConfig::RatePower => LevelCountRule::TotalRatePower,
            };
            // Every supported count must yield a valid schedule.
            for &p in &support {
                mlpmcmc::coalescent::build_level_schedule(m, p)
                    .map_err(|e| CliError::Validation(e.to_string()))?;
            }
            let adapter = LevelAdapter::new(support, rule)
                .map_err(|e| CliError::Validation(e.to_string()))?;
            Ok(ResolvedLevels::Adaptive(adapter))
        }
    }
}

/// Resolve the prior, defaulting to uniform [0, 1.5] on the mutation rate
/// for the coalescent and independent Gamma(1, 1) for every free parameter
/// of the migration model.
pub fn resolve_prior(cfg: &RunConfig, free_dim: usize) -> Result<PriorSpec, CliError> {
    let components = match &cfg.prior {
        Some(list) => list
            .iter()
            .map(|p| match p {
                PriorConfig::Uniform { lo, hi } => PriorComponent::Uniform { lo: *lo, hi: *hi },
                PriorConfig::Gamma { shape, scale } => PriorComponent::Gamma {
                    shape: *shape,
                    scale: *scale,
                },
                PriorConfig::Grid { points } => PriorComponent::Grid {
                    points: points.clone(),
                },
            })
            .collect(),
        None => match &cfg.model {
            ModelConfig::Coalescent { .. } => {
                vec![PriorComponent::Uniform { lo: 0.0, hi: 1.5 }]
            }
            ModelConfig::Migration { .. } => {
                vec![
                    PriorComponent::Gamma {
                        shape: 1.0,
                        scale: 1.0
                    };
                    free_dim
                ]
            }
        },
    };
    if components.len() != free_dim {
        return Err(CliError::Validation(format!(
            "prior has {} components, model has {free_dim} free parameters",
            components.len()
        )));
    }
    PriorSpec::new(components).map_err(|e| CliError::Validation(e.to_string()))
}

/// Resolve the proposal, defaulting to a log-scale Gaussian walk of scale
/// 0.4 on every free parameter.
pub fn resolve_proposal(cfg: &RunConfig, free_dim: usize) -> Result<ProposalSpec, CliError> {
    let components = match &cfg.proposal {
        Some(list) => list
            .iter()
            .map(|p| match p {
                ProposalConfig::LogNormal { scale } => WalkComponent::LogNormal { scale: *scale },
                ProposalConfig::Normal { scale } => WalkComponent::Normal { scale: *scale },
                ProposalConfig::GridStep { points } => WalkComponent::GridStep {
                    points: points.clone(),
                },
                ProposalConfig::GridUniform { points } => WalkComponent::GridUniform {
                    points: points.clone(),
                },
            })
            .collect(),
        None => vec![
            WalkComponent::LogNormal {
                scale: DEFAULT_PROPOSAL_SCALE
            };
            free_dim
        ],
    };
    if components.len() != free_dim {
        return Err(CliError::Validation(format!(
            "proposal has {} components, model has {free_dim} free parameters",
            components.len()
        )));
    }
    ProposalSpec::new(components).map_err(|e| CliError::Validation(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn minimal_coalescent() -> String {
        serde_json::json!({
            "model": {"kind": "coalescent", "d": 2, "m": 4, "y": [2, 2], "mu": 1.0,
                      "R": [0.5, 0.5, 0.5, 0.5]},
            "algorithm": "pmmh",
            "particles": 8,
            "iterations": 10,
            "seed": 7
        })
        .to_string()
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config(&minimal_coalescent()).unwrap();
        let model = build_model(&cfg).unwrap();
        let proposal = resolve_proposal(&cfg, model.free_dimension()).unwrap();
        assert_eq!(
            proposal.components,
            vec![WalkComponent::LogNormal { scale: 0.4 }]
        );
        let prior = resolve_prior(&cfg, model.free_dimension()).unwrap();
        assert_eq!(
            prior.components,
            vec![PriorComponent::Uniform { lo: 0.0, hi: 1.5 }]
        );
        match resolve_levels(&cfg, 4).unwrap() {
            ResolvedLevels::Fixed(s) => assert_eq!(s.levels(), &[3, 2]),
            _ => panic!("expected fixed default"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let text = serde_json::json!({
            "model": {"kind": "coalescent", "d": 2, "m": 4, "mu": 1.0,
                      "R": [0.5, 0.5, 0.5, 0.5]},
            "algorithm": "smc",
            "particles": 8,
            "iterations": 1,
            "seed": 7
        })
        .to_string();
        let err = parse_config(&text).unwrap_err();
        assert!(err.to_string().contains('y'), "error was: {err}");
    }

    #[test]
    fn serialize_parse_round_trip() {
        let cfg = parse_config(&minimal_coalescent()).unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let again = parse_config(&text).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn negative_count_in_data_is_rejected_at_parse() {
        let text = serde_json::json!({
            "model": {"kind": "coalescent", "d": 2, "m": 4, "y": [5, -1], "mu": 1.0,
                      "R": [0.5, 0.5, 0.5, 0.5]},
            "algorithm": "smc",
            "particles": 8,
            "iterations": 1,
            "seed": 7
        })
        .to_string();
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn inconsistent_population_is_rejected() {
        let text = serde_json::json!({
            "model": {"kind": "coalescent", "d": 2, "m": 5, "y": [2, 2], "mu": 1.0,
                      "R": [0.5, 0.5, 0.5, 0.5]},
            "algorithm": "smc",
            "particles": 8,
            "iterations": 1,
            "seed": 7
        })
        .to_string();
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn migration_config_builds() {
        let text = serde_json::json!({
            "model": {"kind": "migration", "g": 2, "d": 2, "m": 4, "y": [2, 1, 1, 0],
                      "mu": 0.5, "R": [0.5, 0.5, 0.5, 0.5], "G": [0.3]},
            "algorithm": "adaptive-pmmh",
            "particles": 8,
            "iterations": 5,
            "seed": 3,
            "levels": {"policy": "adaptive", "support": [1, 2], "rule": "rate-power"}
        })
        .to_string();
        let cfg = parse_config(&text).unwrap();
        let model = build_model(&cfg).unwrap();
        assert_eq!(model.free_dimension(), 2);
        assert!(matches!(
            resolve_levels(&cfg, 4).unwrap(),
            ResolvedLevels::Adaptive(_)
        ));
    }
}
