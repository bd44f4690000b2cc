//! Small-instance state-space machinery shared by the exact oracles:
//! composition enumeration, dense linear solves, a level-by-level solve of
//! the backward path sum, and a truncated dynamic program over backward
//! paths with a geometric tail bound.

use crate::error::{Error, Result};
use crate::model::{State, StoppedProcessModel};
use std::collections::HashMap;

/// All count vectors of the given dimension summing to `total`, in
/// lexicographic order. The order is part of the contract: every oracle
/// accumulates floating-point sums in this order, so results are
/// reproducible run to run.
pub(crate) fn compositions(total: u32, dim: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut current = vec![0u32; dim];
    fn rec(total: u32, pos: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if pos == current.len() - 1 {
            current[pos] = total;
            out.push(current.clone());
            return;
        }
        for v in 0..=total {
            current[pos] = v;
            rec(total - v, pos + 1, current, out);
        }
    }
    rec(total, 0, &mut current, &mut out);
    out
}

/// Number of compositions of `total` into `dim` parts.
pub(crate) fn composition_count(total: u32, dim: usize) -> usize {
    // C(total + dim - 1, dim - 1), computed in u128 to dodge overflow.
    let n = total as u128 + dim as u128 - 1;
    let k = (dim - 1) as u128;
    let mut num = 1u128;
    let mut den = 1u128;
    for i in 0..k {
        num *= n - i;
        den *= i + 1;
    }
    (num / den) as usize
}

/// Solve `A x = b` by Gaussian elimination with partial pivoting.
pub(crate) fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::InvalidModel(
                "singular linear system in exact oracle".into(),
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in (row + 1)..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Ok(x)
}

fn guard_state_count<M: StoppedProcessModel>(model: &M, limit: usize) -> Result<()> {
    let dim = model.state_dimension();
    let m = model.population_cap();
    let states: usize = (2..=m).map(|l| composition_count(l, dim)).sum();
    if states > limit {
        return Err(Error::StateSpaceTooLarge { states, limit });
    }
    Ok(())
}

/// Exact normalizing constant of the backward path target, computed level by
/// level: the path sum `G` at population 2 equals the endpoint weight, and
/// at higher populations satisfies a linear system coupling the states that
/// share a level (population-preserving moves), fed by the level below.
pub(crate) fn backward_normalizer_exact<M: StoppedProcessModel>(
    model: &M,
    state_limit: usize,
) -> Result<f64> {
    guard_state_count(model, state_limit)?;
    let dim = model.state_dimension();
    let m = model.population_cap();

    let mut below: HashMap<State, f64> = compositions(2, dim)
        .into_iter()
        .map(|c| {
            let s = State::new(c);
            let g = model.terminal_log_weight(&s).exp();
            (s, g)
        })
        .collect();

    for level in 3..=m {
        let states: Vec<State> = compositions(level, dim)
            .into_iter()
            .map(State::new)
            .collect();
        let index: HashMap<&State, usize> =
            states.iter().enumerate().map(|(i, s)| (s, i)).collect();
        let n = states.len();
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        for (row, x) in states.iter().enumerate() {
            for (pred, dens) in model.predecessors(x) {
                if pred.total() == level {
                    a[row][index[&pred]] += dens;
                } else {
                    debug_assert_eq!(pred.total(), level - 1);
                    b[row] += dens * below[&pred];
                }
            }
        }
        // (I - A) g = b
        for (row, a_row) in a.iter_mut().enumerate() {
            for (col, v) in a_row.iter_mut().enumerate() {
                *v = if row == col { 1.0 - *v } else { -*v };
            }
        }
        let g = solve_dense(a, b)?;
        below = states.into_iter().zip(g).collect();
    }

    let g_y = below.get(model.observation()).copied().unwrap_or(0.0);
    Ok(model.initial_log_weight().exp() * g_y)
}

/// Outcome of the truncated backward path enumeration.
pub(crate) struct TruncatedPathLaw {
    /// `mass_by_tau[t]` is the un-normalized target mass of paths that reach
    /// population 2 in exactly `t` reverse steps (endpoint weight included,
    /// constant prefactor excluded).
    pub mass_by_tau: Vec<f64>,
    /// Sum of `mass_by_tau` over the enumerated steps.
    pub total: f64,
    /// Upper bound on the mass beyond the truncation point.
    pub tail_bound: f64,
}

/// Enumerate the backward path law by stepping the un-normalized occupation
/// measure until the geometric tail bound falls below `tol` relative to the
/// absorbed mass. Requires the per-step survival factor to be bounded below
/// one, which holds for the built-in models at small mutation rates.
pub(crate) fn truncated_backward_path_law<M: StoppedProcessModel>(
    model: &M,
    tol: f64,
    state_limit: usize,
) -> Result<TruncatedPathLaw> {
    guard_state_count(model, state_limit)?;
    let dim = model.state_dimension();
    let m = model.population_cap();

    // Canonical index over the transient states (population 3..=m).
    let mut states: Vec<State> = Vec::new();
    for level in 3..=m {
        states.extend(compositions(level, dim).into_iter().map(State::new));
    }
    let index: HashMap<&State, usize> = states.iter().enumerate().map(|(i, s)| (s, i)).collect();

    // Per-state transition tables and the absorbed (population-2) channel.
    let mut survive: Vec<Vec<(usize, f64)>> = Vec::with_capacity(states.len());
    let mut absorb: Vec<f64> = Vec::with_capacity(states.len());
    let mut max_absorb: f64 = 0.0;
    for x in &states {
        let mut row = Vec::new();
        let mut abs = 0.0;
        for (pred, dens) in model.predecessors(x) {
            if pred.total() == 2 {
                abs += dens * model.terminal_log_weight(&pred).exp();
            } else {
                row.push((index[&pred], dens));
            }
        }
        max_absorb = max_absorb.max(abs);
        survive.push(row);
        absorb.push(abs);
    }

    // Geometric contraction over a window of L steps. A single step need
    // not shrink the surviving mass (a forced reverse split moves it all
    // down one level), but any L-step surviving path with L = m - 2 must
    // include at least one same-level move, so the window factor is
    // checkable. f_l(x) bounds the mass surviving l steps from x.
    let window = (m as usize - 2).max(1);
    let mut f = vec![1.0f64; states.len()];
    let mut window_peak: f64 = 1.0;
    for _ in 0..window {
        let mut next = vec![0.0f64; states.len()];
        for (i, row) in survive.iter().enumerate() {
            let total: f64 = row.iter().map(|&(j, dens)| dens * f[j]).sum();
            next[i] = total;
        }
        f = next;
        window_peak = window_peak.max(f.iter().copied().fold(0.0, f64::max));
    }
    let window_factor = f.iter().copied().fold(0.0, f64::max);
    if window_factor >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "{window}-step survival factor {window_factor} >= 1; geometric tail bound unavailable"
        )));
    }

    let start = index
        .get(model.observation())
        .copied()
        .ok_or_else(|| Error::InvalidModel("observation outside the state space".into()))?;

    let mut mass = vec![0.0; states.len()];
    mass[start] = 1.0;
    let mut mass_by_tau = vec![0.0]; // tau = 0 is impossible: the walk starts above level 2
    let mut absorbed_total = 0.0;
    let max_steps = 200_000;
    let mut tail_bound;
    loop {
        let mut next = vec![0.0; states.len()];
        let mut absorbed_now = 0.0;
        for (i, &mi) in mass.iter().enumerate() {
            if mi == 0.0 {
                continue;
            }
            absorbed_now += mi * absorb[i];
            for &(j, dens) in &survive[i] {
                next[j] += mi * dens;
            }
        }
        mass_by_tau.push(absorbed_now);
        absorbed_total += absorbed_now;
        mass = next;
        let remaining: f64 = mass.iter().sum();
        // Absorbed mass beyond this point, via the window contraction:
        // each window shrinks the surviving mass by at least window_factor,
        // and within a window it never exceeds window_peak times its start.
        tail_bound =
            max_absorb * remaining * (1.0 + window as f64 * window_peak / (1.0 - window_factor));
        let scale = absorbed_total.max(f64::MIN_POSITIVE);
        if tail_bound < tol * scale || remaining == 0.0 {
            break;
        }
        if mass_by_tau.len() > max_steps {
            return Err(Error::InvalidParameter(
                "truncated path enumeration failed to converge".into(),
            ));
        }
    }

    Ok(TruncatedPathLaw {
        mass_by_tau,
        total: absorbed_total,
        tail_bound,
    })
}
