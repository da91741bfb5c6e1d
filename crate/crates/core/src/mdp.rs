//! Finite-horizon KL-control of a load ensemble.
//!
//! Transition matrices are column-stochastic: `P[(a, b)]` is the probability
//! of moving from state `b` to state `a`, so every column sums to one and the
//! distribution evolves as `rho(t+1) = P(t) * rho(t)`.
//!
//! Time indexing: the horizon has `T` transitions. Step `s` (for
//! `s = 0..T`) moves the ensemble from `rho(s)` to `rho(s+1)` and is charged
//! the cost of the state it lands in, so row `s` of every cost table holds the
//! per-state cost at time `s+1`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-9;
const ROOT_TOL: f64 = 1e-10;
const ROOT_MAX_ITER: usize = 200;

/// One bus-located ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    /// Rated active power of each state (p.u.).
    pub p: Vec<f64>,
    /// Rated reactive power of each state (p.u.).
    pub q: Vec<f64>,
    /// "Normal" transition matrix the discomfort penalty is measured against.
    pub target: DMatrix<f64>,
    /// Penalty weights per transition; either a single matrix broadcast over
    /// the horizon or one matrix per step.
    pub gamma: Vec<DMatrix<f64>>,
    /// Energy cost table, `horizon x n_states`; row `s` is the cost at `s+1`.
    pub energy_cost: DMatrix<f64>,
    pub rho_in: DVector<f64>,
}

impl EnsembleSpec {
    pub fn n_states(&self) -> usize {
        self.p.len()
    }

    pub fn horizon(&self) -> usize {
        self.energy_cost.nrows()
    }

    pub fn gamma_at(&self, step: usize) -> &DMatrix<f64> {
        if self.gamma.len() == 1 {
            &self.gamma[0]
        } else {
            &self.gamma[step]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_states();
        if n == 0 {
            return Err(Error::Ensemble("ensemble has no states".into()));
        }
        dim("q", n, self.q.len())?;
        dim("target rows", n, self.target.nrows())?;
        dim("target columns", n, self.target.ncols())?;
        dim("initial distribution", n, self.rho_in.len())?;
        dim("energy cost columns", n, self.energy_cost.ncols())?;
        if self.gamma.is_empty() {
            return Err(Error::Ensemble("no penalty weights".into()));
        }
        if self.gamma.len() != 1 {
            dim("penalty steps", self.horizon(), self.gamma.len())?;
        }
        for b in 0..n {
            let col = self.target.column(b);
            if col.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::Ensemble(format!("target column {b} has a negative entry")));
            }
            let s: f64 = col.sum();
            if (s - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Ensemble(format!("target column {b} sums to {s}")));
            }
        }
        check_distribution(&self.rho_in).map_err(|e| Error::Ensemble(format!("initial distribution: {e}")))?;
        for (s, g) in self.gamma.iter().enumerate() {
            dim("penalty rows", n, g.nrows())?;
            dim("penalty columns", n, g.ncols())?;
            for b in 0..n {
                for a in 0..n {
                    if self.target[(a, b)] > 0.0 && !(g[(a, b)] > 0.0 && g[(a, b)].is_finite()) {
                        return Err(Error::Ensemble(format!(
                            "penalty for transition {b}->{a} at step {s} must be positive, got {}",
                            g[(a, b)]
                        )));
                    }
                }
            }
        }
        if self.energy_cost.iter().any(|v| !v.is_finite()) {
            return Err(Error::Ensemble("energy cost table has non-finite entries".into()));
        }
        Ok(())
    }
}

fn dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { what, expected, got })
    }
}

fn check_distribution(rho: &DVector<f64>) -> core::result::Result<(), alloc::string::String> {
    if rho.iter().any(|&v| !(v >= 0.0)) {
        return Err("negative entry".into());
    }
    let s = rho.sum();
    if (s - 1.0).abs() > STOCHASTIC_TOL {
        return Err(format!("sums to {s}"));
    }
    Ok(())
}

/// Optimized transitions and the resulting state distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpTrajectory {
    /// `P(s)` for `s = 0..T`.
    pub transitions: Vec<DMatrix<f64>>,
    /// `rho(t)` for `t = 0..=T`.
    pub rho: Vec<DVector<f64>>,
    /// Cost-to-go per state, `V(t)` for `t = 0..=T`, with `V(T) = 0`.
    pub value: Vec<DVector<f64>>,
    /// Expected total cost from `rho(0)`.
    pub objective: f64,
}

impl MdpTrajectory {
    /// Expected consumption `sum_a w[a] rho_a(t)` for `t = 1..=T`.
    pub fn expected(&self, weights: &[f64]) -> Vec<f64> {
        self.rho[1..]
            .iter()
            .map(|r| r.iter().zip(weights).map(|(r, w)| r * w).sum())
            .collect()
    }

    /// Gap between the most and least likely state, averaged over
    /// `t = 1..=T`.
    pub fn mean_spread(&self) -> f64 {
        let steps = &self.rho[1..];
        if steps.is_empty() {
            return 0.0;
        }
        let total: f64 = steps.iter().map(|r| r.max() - r.min()).sum();
        total / steps.len() as f64
    }
}

/// Effective per-state costs including the dual prices of the network
/// coupling; `horizon x n_states`, row `s` being the cost at `s+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveCost {
    pub values: DMatrix<f64>,
}

impl EffectiveCost {
    pub fn horizon(&self) -> usize {
        self.values.nrows()
    }

    pub fn at(&self, step: usize) -> DVector<f64> {
        self.values.row(step).transpose()
    }
}

/// One step of the master equation, renormalized to remove rounding drift.
pub fn propagate(rho: &DVector<f64>, transition: &DMatrix<f64>) -> Result<DVector<f64>> {
    dim("transition columns", rho.len(), transition.ncols())?;
    dim("transition rows", rho.len(), transition.nrows())?;
    let mut next = transition * rho;
    let total = next.sum();
    if total > 0.0 {
        next /= total;
    }
    Ok(next)
}

/// `U(s) + lambda_p(s) p + lambda_q(s) q`, elementwise over steps and states.
pub fn effective_utility(
    cost: &DMatrix<f64>,
    lambda_p: &[f64],
    lambda_q: &[f64],
    p: &[f64],
    q: &[f64],
) -> Result<EffectiveCost> {
    let (steps, n) = cost.shape();
    dim("lambda_p", steps, lambda_p.len())?;
    dim("lambda_q", steps, lambda_q.len())?;
    dim("p", n, p.len())?;
    dim("q", n, q.len())?;
    let values = DMatrix::from_fn(steps, n, |s, a| cost[(s, a)] + lambda_p[s] * p[a] + lambda_q[s] * q[a]);
    Ok(EffectiveCost { values })
}

/// Expected cost of one transition step:
/// `sum_{a,b} P_ab (u_a + gamma_ab ln(P_ab / target_ab)) rho_b`, with
/// `0 ln 0 = 0`.
pub fn kl_stage_cost(
    transition: &DMatrix<f64>,
    target: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    cost_next: &DVector<f64>,
    rho: &DVector<f64>,
) -> Result<f64> {
    let n = rho.len();
    dim("transition", n, transition.ncols())?;
    dim("target", n, target.ncols())?;
    dim("gamma", n, gamma.ncols())?;
    dim("costs", n, cost_next.len())?;
    let mut total = 0.0;
    for b in 0..n {
        let mut col = 0.0;
        for a in 0..n {
            let pab = transition[(a, b)];
            if pab == 0.0 {
                continue;
            }
            if target[(a, b)] <= 0.0 {
                return Err(Error::SupportViolation { from: b, to: a });
            }
            col += pab * (cost_next[a] + gamma[(a, b)] * libm::log(pab / target[(a, b)]));
        }
        total += col * rho[b];
    }
    Ok(total)
}

/// Optimal transition out of one origin state.
///
/// Minimizes `sum_a P_a (c_a + gamma_a ln(P_a / target_a))` over the simplex
/// restricted to the support of `target`, returning the minimizer and the
/// minimum.
pub fn backward_step_row(
    cont: &[f64],
    gamma: &[f64],
    target: &[f64],
) -> Result<(Vec<f64>, f64)> {
    backward_step_origin(cont, gamma, target, 0)
}

fn backward_step_origin(
    cont: &[f64],
    gamma: &[f64],
    target: &[f64],
    origin: usize,
) -> Result<(Vec<f64>, f64)> {
    let n = target.len();
    dim("continuation costs", n, cont.len())?;
    dim("penalty weights", n, gamma.len())?;
    let support: Vec<usize> = (0..n).filter(|&a| target[a] > 0.0).collect();
    if support.is_empty() {
        return Err(Error::EmptySupport(origin));
    }
    if support.iter().any(|&a| !cont[a].is_finite()) {
        return Err(Error::Ensemble(format!(
            "non-finite continuation cost out of state {origin}"
        )));
    }
    let g0 = gamma[support[0]];
    let uniform = support.iter().all(|&a| gamma[a] == g0);

    let mut row = vec![0.0; n];
    if uniform {
        // Softmin around the cheapest destination so exp() cannot overflow.
        let c_min = support.iter().map(|&a| cont[a]).fold(f64::INFINITY, f64::min);
        let mut z = 0.0;
        for &a in &support {
            let w = target[a] * libm::exp(-(cont[a] - c_min) / g0);
            row[a] = w;
            z += w;
        }
        for &a in &support {
            row[a] /= z;
        }
        let value = c_min - g0 * libm::log(z);
        return Ok((row, value));
    }

    // Non-uniform weights: stationarity gives
    // P_a(nu) = target_a exp(-(c_a + nu)/gamma_a - 1), decreasing in nu; find
    // the nu that normalizes it. g(nu) = ln sum_a P_a(nu) is convex and
    // decreasing, so Newton from the left bracket end never overshoots.
    let exponent = |a: usize, nu: f64| libm::log(target[a]) - (cont[a] + nu) / gamma[a] - 1.0;
    let log_mass = |nu: f64| -> (f64, f64) {
        let e_max = support.iter().map(|&a| exponent(a, nu)).fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        let mut ds = 0.0;
        for &a in &support {
            let w = libm::exp(exponent(a, nu) - e_max);
            s += w;
            ds += w / gamma[a];
        }
        (e_max + libm::log(s), -ds / s)
    };
    let m = support.len() as f64;
    let mut lo = support
        .iter()
        .map(|&a| gamma[a] * (libm::log(target[a]) - 1.0) - cont[a])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut hi = support
        .iter()
        .map(|&a| gamma[a] * (libm::log(target[a]) - 1.0 + libm::log(m)) - cont[a])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut nu = lo;
    let mut converged = false;
    let mut residual = f64::INFINITY;
    for _ in 0..ROOT_MAX_ITER {
        let (g, dg) = log_mass(nu);
        residual = libm::expm1(g).abs();
        if residual <= ROOT_TOL {
            converged = true;
            break;
        }
        if g > 0.0 {
            lo = nu;
        } else {
            hi = nu;
        }
        let newton = nu - g / dg;
        nu = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    if !converged {
        return Err(Error::RootFind {
            state: origin,
            residual,
        });
    }
    let mut z = 0.0;
    for &a in &support {
        row[a] = libm::exp(exponent(a, nu));
        z += row[a];
    }
    let mut value = 0.0;
    for &a in &support {
        row[a] /= z;
        if row[a] > 0.0 {
            value += row[a] * (cont[a] + gamma[a] * libm::log(row[a] / target[a]));
        }
    }
    Ok((row, value))
}

/// Backward-forward solution of the ensemble's finite-horizon problem.
///
/// The backward sweep never looks at the initial distribution, so the optimal
/// transitions are the same for every `rho_in`.
pub fn solve_mdp(spec: &EnsembleSpec, costs: &EffectiveCost) -> Result<MdpTrajectory> {
    let n = spec.n_states();
    let horizon = costs.horizon();
    dim("effective cost columns", n, costs.values.ncols())?;
    if spec.gamma.len() != 1 {
        dim("penalty steps", horizon, spec.gamma.len())?;
    }
    dim("initial distribution", n, spec.rho_in.len())?;

    let mut value = vec![DVector::zeros(n); horizon + 1];
    let mut transitions = vec![DMatrix::zeros(n, n); horizon];
    let mut cont = vec![0.0; n];
    for s in (0..horizon).rev() {
        for a in 0..n {
            cont[a] = costs.values[(s, a)] + value[s + 1][a];
        }
        let gamma = spec.gamma_at(s);
        for b in 0..n {
            let g: Vec<f64> = gamma.column(b).iter().copied().collect();
            let t: Vec<f64> = spec.target.column(b).iter().copied().collect();
            let (row, v) = backward_step_origin(&cont, &g, &t, b)?;
            transitions[s].set_column(b, &DVector::from_vec(row));
            value[s][b] = v;
        }
    }

    let mut rho = Vec::with_capacity(horizon + 1);
    rho.push(spec.rho_in.clone());
    for s in 0..horizon {
        let next = propagate(&rho[s], &transitions[s])?;
        rho.push(next);
    }
    let objective = spec.rho_in.dot(&value[0]);
    Ok(MdpTrajectory {
        transitions,
        rho,
        value,
        objective,
    })
}

/// Total cost of a trajectory under `costs`, summed step by step.
pub fn trajectory_cost(spec: &EnsembleSpec, traj: &MdpTrajectory, costs: &DMatrix<f64>) -> Result<f64> {
    let mut total = 0.0;
    for s in 0..traj.transitions.len() {
        total += kl_stage_cost(
            &traj.transitions[s],
            &spec.target,
            spec.gamma_at(s),
            &costs.row(s).transpose(),
            &traj.rho[s],
        )?;
    }
    Ok(total)
}
