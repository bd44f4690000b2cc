//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Tolerances are fixed here, not tuned at run time.
//!
//! The heavy criteria exercise the samplers on desk-scale instances whose
//! normalizing constants, stopping-time posteriors, and parameter
//! posteriors are exactly computable, so every statistical assertion is
//! against an independent ground truth.

use mlpmcmc::coalescent::{
    exact_marginal_forward, exact_normalizer_backward, exact_tau_posterior, CoalescentModel,
};
use mlpmcmc::migration::MigrationModel;
use mlpmcmc::model::{LevelSchedule, ParameterPoint, State, StoppedProcessModel};
use mlpmcmc::pmcmc::{
    pmmh_step, run_chain, ChainKind, ChainRecord, ChainSetup, ChainState, LevelAdapter,
    LevelCountRule, LevelPolicy, PriorComponent, PriorSpec, ProposalSpec, WalkComponent,
    DEFAULT_INIT_RETRIES,
};
use mlpmcmc::rng;
use mlpmcmc::smc::run_multilevel_smc;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::process::Command;

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "acceptance criterion {criterion}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn uniform_r(d: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0 / d as f64; d]; d]
}

fn zero_diag_r(d: usize) -> Vec<Vec<f64>> {
    let off = 1.0 / (d as f64 - 1.0);
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 0.0 } else { off }).collect())
        .collect()
}

/// All count vectors of the given dimension summing to `total`. Kept local
/// so the exhaustive checks do not lean on the library's own enumeration.
fn compositions(total: u32, dim: usize) -> Vec<Vec<u32>> {
    if dim == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for v in 0..=total {
        for mut rest in compositions(total - v, dim - 1) {
            let mut c = vec![v];
            c.append(&mut rest);
            out.push(c);
        }
    }
    out
}

fn coalescent(y: Vec<u32>, mu: f64, r: Vec<Vec<f64>>) -> CoalescentModel {
    CoalescentModel::new(y, ParameterPoint::new(mu, r).unwrap()).unwrap()
}

/// The shared small instance: two types, population four, uniform mutation
/// matrix, balanced data.
fn small_instance(mu: f64) -> CoalescentModel {
    coalescent(vec![2, 2], mu, uniform_r(2))
}

fn grid_points() -> Vec<f64> {
    (1..=15).map(|j| j as f64 / 10.0).collect()
}

fn total_variation(a: &BTreeMap<u32, f64>, b: &BTreeMap<u32, f64>) -> f64 {
    let keys: std::collections::BTreeSet<u32> = a.keys().chain(b.keys()).copied().collect();
    0.5 * keys
        .iter()
        .map(|k| (a.get(k).unwrap_or(&0.0) - b.get(k).unwrap_or(&0.0)).abs())
        .sum::<f64>()
}

// Criterion 1: forward densities sum to one over enumerated successors and
// backward proposals over enumerated predecessors, coalescent and
// migration, within 1e-10.
#[test]
fn criterion_1_density_normalization() {
    let mut max_err: f64 = 0.0;
    let mut checks = 0usize;

    let mut check_model = |model: &dyn DensityCheck, dim: usize, m: u32| {
        for level in 2..m {
            for c in compositions(level, dim) {
                let x = State::new(c);
                let total: f64 = model.successor_densities(&x).iter().sum();
                max_err = max_err.max((total - 1.0).abs());
                checks += 1;
            }
        }
        for level in 3..=m {
            for c in compositions(level, dim) {
                let x = State::new(c);
                let probs = model.proposal_densities(&x);
                if probs.is_empty() {
                    continue;
                }
                let total: f64 = probs.iter().sum();
                max_err = max_err.max((total - 1.0).abs());
                checks += 1;
            }
        }
    };

    for d in [2usize, 3] {
        for m in [4u32, 6] {
            for mu in [0.5, 1.0, 2.0] {
                for r in [uniform_r(d), zero_diag_r(d)] {
                    let mut y = vec![0u32; d];
                    y[0] = m - 1;
                    y[1] = 1;
                    let model = coalescent(y, mu, r);
                    check_model(&model, d, m);
                }
            }
        }
    }
    for mu in [0.5, 1.0, 2.0] {
        let g = vec![vec![0.0, 0.3], vec![0.3, 0.0]];
        let params = ParameterPoint::with_migration(mu, uniform_r(2), Some(g)).unwrap();
        let model = MigrationModel::new(2, vec![2, 1, 1, 1], params).unwrap();
        check_model(&model, 4, 5);
    }

    report(
        "1 (density normalization)",
        max_err < 1e-10,
        &format!("max |sum - 1| = {max_err:.2e} over {checks} states"),
    );
}

/// Successor/proposal sums, object-safe for the check loop above.
trait DensityCheck {
    fn successor_densities(&self, x: &State) -> Vec<f64>;
    fn proposal_densities(&self, x: &State) -> Vec<f64>;
}

impl<M: StoppedProcessModel> DensityCheck for M {
    fn successor_densities(&self, x: &State) -> Vec<f64> {
        self.successors(x).into_iter().map(|(_, d)| d).collect()
    }

    fn proposal_densities(&self, x: &State) -> Vec<f64> {
        self.predecessors(x)
            .iter()
            .map(|(p, _)| self.proposal_log_density(x, p).exp())
            .collect()
    }
}

// Criterion 2: the forward oracle hits the closed-form value 1/18 on the
// zero-diagonal instance, and both oracles are invariant under type
// relabeling.
#[test]
fn criterion_2_oracle_self_consistency() {
    let model = coalescent(vec![2, 1], 1.0, zero_diag_r(2));
    let z = exact_marginal_forward(&model).unwrap();
    let closed_form_err = (z - 1.0 / 18.0).abs();

    let mut relabel_err: f64 = 0.0;
    for (y, y_swapped) in [
        (vec![3u32, 0], vec![0u32, 3]),
        (vec![2, 1], vec![1, 2]),
        (vec![3, 1], vec![1, 3]),
    ] {
        for r in [uniform_r(2), zero_diag_r(2)] {
            let a = coalescent(y.clone(), 1.0, r.clone());
            let b = coalescent(y_swapped.clone(), 1.0, r);
            relabel_err = relabel_err.max(
                (exact_marginal_forward(&a).unwrap() - exact_marginal_forward(&b).unwrap()).abs(),
            );
            relabel_err = relabel_err.max(
                (exact_normalizer_backward(&a).unwrap() - exact_normalizer_backward(&b).unwrap())
                    .abs(),
            );
        }
    }

    report(
        "2 (oracle self-consistency)",
        closed_form_err < 1e-10 && relabel_err < 1e-12,
        &format!("|Z - 1/18| = {closed_form_err:.2e}, max relabel diff = {relabel_err:.2e}"),
    );
}

// Criterion 3: the estimator is unbiased on the small instance for
// N in {1, 4, 16} and two schedules, and the two schedules' means agree.
#[test]
fn criterion_3_smc_unbiasedness() {
    let runs = 10_000usize;
    let one_level = LevelSchedule::with_default_deadlines(vec![2], 4).unwrap();
    let two_level = LevelSchedule::with_default_deadlines(vec![3, 2], 4).unwrap();
    let mut detail = String::new();
    let mut pass = true;

    for (mu_idx, mu) in [0.5f64, 1.0].iter().enumerate() {
        let model = small_instance(*mu);
        let exact = exact_normalizer_backward(&model).unwrap();
        let mut means = Vec::new();
        for (s_idx, schedule) in [&one_level, &two_level].iter().enumerate() {
            for (n_idx, n) in [1usize, 4, 16].iter().enumerate() {
                let base = (mu_idx * 100 + s_idx * 10 + n_idx) as u64 * 1_000_003 + 17;
                let zs: Vec<f64> = (0..runs)
                    .into_par_iter()
                    .map(|i| {
                        run_multilevel_smc(&model, schedule, *n, base + i as u64)
                            .unwrap()
                            .log_zhat
                            .exp()
                    })
                    .collect();
                let mean = zs.iter().sum::<f64>() / runs as f64;
                let var = zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (runs as f64 - 1.0);
                let se = (var / runs as f64).sqrt();
                if (mean - exact).abs() > 3.0 * se {
                    pass = false;
                    detail.push_str(&format!(
                        "mu={mu} schedule={s_idx} N={n}: |{mean:.5} - {exact:.5}| > 3se={:.5}; ",
                        3.0 * se
                    ));
                }
                means.push((mean, se));
            }
        }
        // Schedule invariance of the estimand: compare the N=16 means of
        // the two schedules.
        let (m1, se1) = means[2];
        let (m2, se2) = means[5];
        let combined = (se1 * se1 + se2 * se2).sqrt();
        if (m1 - m2).abs() > 3.0 * combined {
            pass = false;
            detail.push_str(&format!(
                "mu={mu}: schedule means {m1:.5} vs {m2:.5} beyond 3 combined se {:.5}; ",
                3.0 * combined
            ));
        }
    }
    if detail.is_empty() {
        detail = format!("all means within 3 se of the oracle over {runs} runs");
    }
    report("3 (SMC unbiasedness)", pass, &detail);
}

// Criterion 4: the PIMH chain's stopping-time histogram matches the
// enumerated posterior within TV 0.05 at 1e5 iterations.
#[test]
fn criterion_4_pimh_invariance() {
    let model = small_instance(1.0);
    let oracle = exact_tau_posterior(&model, 1e-10).unwrap();
    let schedule = LevelSchedule::with_default_deadlines(vec![3, 2], 4).unwrap();
    let setup = ChainSetup {
        kind: ChainKind::Pimh,
        prior: None,
        proposal: None,
        levels: LevelPolicy::Fixed(&schedule),
        n_particles: 8,
        iterations: 100_000,
        init_retries: DEFAULT_INIT_RETRIES,
    };
    let mut chain_rng = rng::chain_stream(40_401);
    let record = run_chain(&model, &setup, &mut chain_rng).unwrap();

    let mut empirical: BTreeMap<u32, f64> = BTreeMap::new();
    let n = (record.rows.len() - 1) as f64;
    for row in &record.rows[1..] {
        *empirical.entry(row.total_tau).or_insert(0.0) += 1.0 / n;
    }
    let exact: BTreeMap<u32, f64> = oracle
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(t, &p)| (t as u32, p))
        .collect();
    let tv = total_variation(&empirical, &exact);
    report(
        "4 (PIMH invariance)",
        tv < 0.05,
        &format!("TV(chain tau, enumerated posterior) = {tv:.4}"),
    );
}

fn grid_prior_and_proposal() -> (PriorSpec, ProposalSpec) {
    let points = grid_points();
    let prior = PriorSpec::new(vec![PriorComponent::Grid {
        points: points.clone(),
    }])
    .unwrap();
    let proposal = ProposalSpec::new(vec![WalkComponent::GridUniform { points }]).unwrap();
    (prior, proposal)
}

fn exact_grid_posterior() -> Vec<f64> {
    let weights: Vec<f64> = grid_points()
        .iter()
        .map(|&mu| exact_normalizer_backward(&small_instance(mu)).unwrap())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

fn grid_histogram(record: &ChainRecord) -> Vec<f64> {
    let points = grid_points();
    let mut counts = vec![0.0; points.len()];
    let n = (record.rows.len() - 1) as f64;
    for row in &record.rows[1..] {
        let mu = row.theta[0];
        let j = points
            .iter()
            .position(|&p| (p - mu).abs() < 1e-9)
            .expect("chain left the grid");
        counts[j] += 1.0 / n;
    }
    counts
}

// Criterion 5: PMMH over a grid prior reproduces the exact grid posterior
// within TV 0.05 at 1e5 iterations with 16 particles.
#[test]
fn criterion_5_pmmh_posterior() {
    let model = small_instance(1.0);
    let (prior, proposal) = grid_prior_and_proposal();
    let schedule = LevelSchedule::with_default_deadlines(vec![3, 2], 4).unwrap();
    let setup = ChainSetup {
        kind: ChainKind::Pmmh,
        prior: Some(&prior),
        proposal: Some(&proposal),
        levels: LevelPolicy::Fixed(&schedule),
        n_particles: 16,
        iterations: 100_000,
        init_retries: DEFAULT_INIT_RETRIES,
    };
    let mut chain_rng = rng::chain_stream(50_505);
    let record = run_chain(&model, &setup, &mut chain_rng).unwrap();
    let empirical = grid_histogram(&record);
    let exact = exact_grid_posterior();
    let tv = 0.5
        * empirical
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
    report(
        "5 (PMMH posterior)",
        tv < 0.05,
        &format!("TV(chain, exact grid posterior) = {tv:.4}"),
    );
}

// Criterion 6: adaptive-level PMMH and fixed-schedule PMMH agree on the
// parameter marginal (KS < 0.05).
#[test]
fn criterion_6_adaptive_fixed_agreement() {
    let model = small_instance(1.0);
    let (prior, proposal) = grid_prior_and_proposal();
    let schedule = LevelSchedule::with_default_deadlines(vec![3, 2], 4).unwrap();
    let fixed_setup = ChainSetup {
        kind: ChainKind::Pmmh,
        prior: Some(&prior),
        proposal: Some(&proposal),
        levels: LevelPolicy::Fixed(&schedule),
        n_particles: 16,
        iterations: 100_000,
        init_retries: DEFAULT_INIT_RETRIES,
    };
    let adapter = LevelAdapter::new(vec![1, 2], LevelCountRule::MuPower).unwrap();
    let adaptive_setup = ChainSetup {
        kind: ChainKind::AdaptivePmmh,
        prior: Some(&prior),
        proposal: Some(&proposal),
        levels: LevelPolicy::Adaptive(&adapter),
        n_particles: 16,
        iterations: 100_000,
        init_retries: DEFAULT_INIT_RETRIES,
    };
    let mut rng_a = rng::chain_stream(60_601);
    let mut rng_b = rng::chain_stream(60_602);
    let fixed = run_chain(&model, &fixed_setup, &mut rng_a).unwrap();
    let adaptive = run_chain(&model, &adaptive_setup, &mut rng_b).unwrap();

    let ha = grid_histogram(&fixed);
    let hb = grid_histogram(&adaptive);
    let mut ks: f64 = 0.0;
    let (mut ca, mut cb) = (0.0, 0.0);
    for j in 0..ha.len() {
        ca += ha[j];
        cb += hb[j];
        ks = ks.max((ca - cb).abs());
    }
    // Sanity: the adaptive run actually used both level counts.
    let used: std::collections::BTreeSet<usize> =
        adaptive.rows.iter().map(|r| r.level_count).collect();
    report(
        "6 (adaptive/fixed agreement)",
        ks < 0.05 && used.len() == 2,
        &format!("KS = {ks:.4}, level counts used = {used:?}"),
    );
}

// Criterion 7: mean PMMH acceptance rate is non-decreasing in the particle
// count over N in {8, 32, 128}, five seeds each.
#[test]
fn criterion_7_acceptance_trend() {
    let model = small_instance(1.0);
    let (prior, proposal) = grid_prior_and_proposal();
    let schedule = LevelSchedule::with_default_deadlines(vec![3, 2], 4).unwrap();
    let iterations = 20_000usize;
    let seeds: Vec<u64> = (1..=5).map(|s| 70_000 + s).collect();

    let mean_rate = |n_particles: usize| -> f64 {
        let rates: Vec<f64> = seeds
            .par_iter()
            .map(|&seed| {
                let setup = ChainSetup {
                    kind: ChainKind::Pmmh,
                    prior: Some(&prior),
                    proposal: Some(&proposal),
                    levels: LevelPolicy::Fixed(&schedule),
                    n_particles,
                    iterations,
                    init_retries: DEFAULT_INIT_RETRIES,
                };
                let mut chain_rng = rng::chain_stream(seed * 13 + n_particles as u64);
                let record = run_chain(&model, &setup, &mut chain_rng).unwrap();
                let accepted = record.rows[1..].iter().filter(|r| r.accepted).count();
                accepted as f64 / iterations as f64
            })
            .collect();
        rates.iter().sum::<f64>() / rates.len() as f64
    };

    let r8 = mean_rate(8);
    let r32 = mean_rate(32);
    let r128 = mean_rate(128);
    report(
        "7 (acceptance trend)",
        r8 <= r32 && r32 <= r128,
        &format!("mean acceptance rates: N=8 {r8:.4}, N=32 {r32:.4}, N=128 {r128:.4}"),
    );
}

// Criterion 8: bit-identical traces for a fixed (config, seed) regardless
// of the thread cap, and clean failure handling when the first deadline is
// impossible.
#[test]
fn criterion_8_determinism_and_failure() {
    // Library half: deadline 1 on a two-step-minimum instance.
    let model = small_instance(1.0);
    let impossible = LevelSchedule::new(vec![2], vec![1]).unwrap();
    let failed = run_multilevel_smc(&model, &impossible, 16, 5).unwrap();
    let failure_ok = !failed.success && failed.log_zhat == f64::NEG_INFINITY;

    let good = LevelSchedule::with_default_deadlines(vec![3, 2], 4).unwrap();
    let smc = run_multilevel_smc(&model, &good, 16, 6).unwrap();
    let mut state = ChainState {
        theta: model.params().clone(),
        aux_level_count: None,
        selected: 0,
        log_zhat: smc.log_zhat,
        smc,
    };
    let before = state.clone();
    let (prior, proposal) = grid_prior_and_proposal();
    let mut step_rng = rng::chain_stream(808);
    let accepted = pmmh_step(
        &mut state,
        &model,
        &prior,
        &proposal,
        &impossible,
        16,
        &mut step_rng,
    )
    .unwrap();
    let rejection_ok = !accepted && state == before;

    // Binary half: the same config and seed under different thread caps.
    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "model": {"kind": "coalescent", "d": 2, "m": 4, "y": [2, 2], "mu": 1.0,
                  "R": [0.5, 0.5, 0.5, 0.5]},
        "algorithm": "pmmh",
        "particles": 128,
        "iterations": 40,
        "seed": 99,
        "levels": {"policy": "fixed", "p": 2}
    });
    let cfg_path = dir.path().join("c.json");
    std::fs::write(&cfg_path, serde_json::to_string(&config).unwrap()).unwrap();
    let mut traces = Vec::new();
    for threads in ["1", "4"] {
        let out_dir = dir.path().join(format!("t{threads}"));
        let out = Command::new(env!("CARGO_BIN_EXE_mlpmcmc"))
            .arg("pmmh")
            .arg("--config")
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out_dir)
            .env("MLPMCMC_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        traces.push(std::fs::read(out_dir.join("trace.csv")).unwrap());
    }
    let determinism_ok = traces[0] == traces[1];

    report(
        "8 (determinism and failure handling)",
        failure_ok && rejection_ok && determinism_ok,
        &format!(
            "failure flagged: {failure_ok}, rejection keeps state: {rejection_ok}, \
             traces identical across thread caps: {determinism_ok}"
        ),
    );
}
