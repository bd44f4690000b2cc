//! Run orchestration: turn a resolved configuration into an SMC estimate,
//! a chain record, or oracle values.

use crate::config::{
    build_model, resolve_levels, resolve_prior, resolve_proposal, Algorithm, BuiltModel,
    ResolvedLevels, RunConfig,
};
use crate::CliError;
use mlpmcmc::model::StoppedProcessModel;
use mlpmcmc::pmcmc::{
    run_chain, ChainKind, ChainRecord, ChainSetup, LevelPolicy, DEFAULT_INIT_RETRIES,
};
use mlpmcmc::smc::run_multilevel_smc;
use mlpmcmc::{coalescent, migration, rng};

/// What a run produced.
pub enum RunOutcome {
    Smc { log_zhat: f64, success: bool },
    Chain(ChainRecord),
}

fn to_runtime(e: mlpmcmc::Error) -> CliError {
    match e {
        // Asking an exact oracle for an oversized instance is a bad
        // request, not a mid-run failure.
        mlpmcmc::Error::StateSpaceTooLarge { .. } => CliError::Validation(e.to_string()),
        _ => CliError::Runtime(e.to_string()),
    }
}

/// Execute the configured run.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, CliError> {
    let model = build_model(cfg)?;
    let levels = resolve_levels(cfg, model.population_cap())?;
    match (&model, cfg.algorithm) {
        (BuiltModel::Coalescent(m), Algorithm::Smc) => run_smc(cfg, m, &levels),
        (BuiltModel::Migration(m), Algorithm::Smc) => run_smc(cfg, m, &levels),
        (BuiltModel::Coalescent(m), _) => run_mcmc(cfg, m, &model, &levels),
        (BuiltModel::Migration(m), _) => run_mcmc(cfg, m, &model, &levels),
    }
}

fn run_smc<M: StoppedProcessModel>(
    cfg: &RunConfig,
    model: &M,
    levels: &ResolvedLevels,
) -> Result<RunOutcome, CliError> {
    let schedule = match levels {
        ResolvedLevels::Fixed(s) => s.clone(),
        ResolvedLevels::Adaptive(_) => {
            return Err(CliError::Validation(
                "the one-shot smc run needs a fixed level policy".into(),
            ))
        }
    };
    let result =
        run_multilevel_smc(model, &schedule, cfg.particles, cfg.seed).map_err(to_runtime)?;
    Ok(RunOutcome::Smc {
        log_zhat: result.log_zhat,
        success: result.success,
    })
}

fn run_mcmc<M: StoppedProcessModel>(
    cfg: &RunConfig,
    model: &M,
    built: &BuiltModel,
    levels: &ResolvedLevels,
) -> Result<RunOutcome, CliError> {
    let free_dim = built.free_dimension();
    let prior = resolve_prior(cfg, free_dim)?;
    let proposal = resolve_proposal(cfg, free_dim)?;
    let (kind, policy) = match (cfg.algorithm, levels) {
        (Algorithm::Pimh, ResolvedLevels::Fixed(s)) => (ChainKind::Pimh, LevelPolicy::Fixed(s)),
        (Algorithm::Pmmh, ResolvedLevels::Fixed(s)) => (ChainKind::Pmmh, LevelPolicy::Fixed(s)),
        (Algorithm::AdaptivePmmh, ResolvedLevels::Adaptive(a)) => {
            (ChainKind::AdaptivePmmh, LevelPolicy::Adaptive(a))
        }
        (Algorithm::Pimh | Algorithm::Pmmh, ResolvedLevels::Adaptive(_)) => {
            return Err(CliError::Validation(
                "pimh and pmmh need a fixed level policy; use adaptive-pmmh to adapt levels".into(),
            ))
        }
        (Algorithm::AdaptivePmmh, ResolvedLevels::Fixed(_)) => {
            return Err(CliError::Validation(
                "adaptive-pmmh needs an adaptive level policy".into(),
            ))
        }
        (Algorithm::Smc, _) => unreachable!("smc dispatched separately"),
    };
    let setup = ChainSetup {
        kind,
        prior: Some(&prior),
        proposal: Some(&proposal),
        levels: policy,
        n_particles: cfg.particles,
        iterations: cfg.iterations,
        init_retries: DEFAULT_INIT_RETRIES,
    };
    let mut chain_rng = rng::chain_stream(cfg.seed);
    let record = run_chain(model, &setup, &mut chain_rng).map_err(to_runtime)?;
    Ok(RunOutcome::Chain(record))
}

/// Oracle values for the configured model. The coalescent admits two exact
/// routes (backward path sum and forward hitting recursion); the migration
/// model reports the truncated-enumeration value.
pub fn oracle_report(cfg: &RunConfig) -> Result<Vec<(String, f64)>, CliError> {
    let model = build_model(cfg)?;
    match model {
        BuiltModel::Coalescent(m) => {
            let backward = coalescent::exact_normalizer_backward(&m).map_err(to_runtime)?;
            let forward = coalescent::exact_marginal_forward(&m).map_err(to_runtime)?;
            Ok(vec![
                ("backward_oracle".into(), backward),
                ("forward_oracle".into(), forward),
            ])
        }
        BuiltModel::Migration(m) => {
            let backward =
                migration::truncated_normalizer_backward(&m, 1e-10).map_err(to_runtime)?;
            Ok(vec![("backward_oracle_truncated".into(), backward)])
        }
    }
}
