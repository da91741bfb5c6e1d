//! Dual decomposition of the coupled ensemble/network problem.
//!
//! The ensembles' expected injections must equal the injections the network
//! assigns to their buses. Both equalities are priced by multipliers
//! `lambda_p`, `lambda_q` per ensemble and step. Every iteration solves the
//! ensembles' MDPs under the current prices (independent per ensemble), then
//! the network per step (independent per step), then refreshes the prices:
//!
//! * [`Variant::Std2`]: the network picks the ensemble injections freely
//!   within their hull and the prices move along the mismatch,
//!   `lambda += delta (sum_a p_a rho_a - p_net)`.
//! * [`Variant::Hybrid`]: the network takes the ensembles' expected
//!   injections as given and the prices are read off as the marginal losses
//!   of those pinned injections.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;

use crate::dispatch::{DispatchContext, StepDispatch};
use crate::error::{Error, Result};
use crate::exec::{Clock, Executor, NoClock, Sequential};
use crate::grid::{GridModel, TreeOrder};
use crate::mdp::{effective_utility, solve_mdp, trajectory_cost, EnsembleSpec, MdpTrajectory};
use crate::scenario::{ScenarioSpec, StepSchedule, StepScaling};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Std2,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub primal_max: f64,
    pub primal_l2: f64,
    pub dual_change: f64,
    pub step1_ms: f64,
    pub step2_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    pub primal_max: f64,
    pub primal_l2: f64,
    pub dual_change: f64,
}

/// Multipliers and bookkeeping between iterations. Multiplier tables are
/// indexed `[ensemble][step]`, ensembles in scenario order.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub lambda_p: Vec<Vec<f64>>,
    pub lambda_q: Vec<Vec<f64>>,
    pub iteration: usize,
    pub history: Vec<IterationRecord>,
    /// Base step size per ensemble and step, before the schedule.
    pub step_sizes: Vec<Vec<f64>>,
    /// Expected `(p, q)` of each ensemble per step from the latest MDP solve.
    pub consumption: Vec<Vec<(f64, f64)>>,
    /// Adaptive gains on the active / reactive steps (all 1 otherwise).
    pub gain_p: Vec<Vec<f64>>,
    pub gain_q: Vec<Vec<f64>>,
    /// Primal residuals of the latest iteration.
    pub residual_p: Vec<Vec<f64>>,
    pub residual_q: Vec<Vec<f64>>,
}

impl DualState {
    pub fn new(step_sizes: Vec<Vec<f64>>) -> Self {
        let zeros: Vec<Vec<f64>> = step_sizes.iter().map(|row| vec![0.0; row.len()]).collect();
        let ones: Vec<Vec<f64>> = step_sizes.iter().map(|row| vec![1.0; row.len()]).collect();
        DualState {
            lambda_p: zeros.clone(),
            lambda_q: zeros.clone(),
            iteration: 0,
            history: Vec::new(),
            step_sizes,
            consumption: Vec::new(),
            gain_p: ones.clone(),
            gain_q: ones,
            residual_p: zeros.clone(),
            residual_q: zeros,
        }
    }
}

/// Convergence metrics of the latest iteration.
pub fn residuals(state: &DualState) -> Result<Residuals> {
    let last = state.history.last().ok_or(Error::NoIterations)?;
    Ok(Residuals {
        primal_max: last.primal_max,
        primal_l2: last.primal_l2,
        dual_change: last.dual_change,
    })
}

/// Expected `(p, q)` per step `t = 1..=T` of one ensemble.
pub fn ensemble_consumption(spec: &EnsembleSpec, traj: &MdpTrajectory) -> Vec<(f64, f64)> {
    traj.expected(&spec.p)
        .into_iter()
        .zip(traj.expected(&spec.q))
        .collect()
}

/// Mismatch `consumption - network injection` per ensemble and step, active
/// and reactive. `bus_positions[k]` is the bus position of ensemble `k`.
pub fn primal_residuals(
    consumption: &[Vec<(f64, f64)>],
    dispatch: &[StepDispatch],
    bus_positions: &[usize],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rp = Vec::with_capacity(consumption.len());
    let mut rq = Vec::with_capacity(consumption.len());
    for (k, cons) in consumption.iter().enumerate() {
        let b = bus_positions[k];
        rp.push(cons.iter().zip(dispatch).map(|(c, d)| c.0 - d.p_ens[b]).collect());
        rq.push(cons.iter().zip(dispatch).map(|(c, d)| c.1 - d.q_ens[b]).collect());
    }
    (rp, rq)
}

const GAIN_GROW: f64 = 1.5;
const GAIN_SHRINK: f64 = 0.5;
const GAIN_MAX: f64 = 10.0;
const GAIN_MIN: f64 = 1e-6;

/// Sign-based gain update: grow while the residual keeps pushing the same
/// way, back off after an overshoot.
fn adapt(gain: f64, residual: f64, previous: f64) -> f64 {
    let trend = residual * previous;
    if trend > 0.0 {
        (gain * GAIN_GROW).min(GAIN_MAX)
    } else if trend < 0.0 {
        (gain * GAIN_SHRINK).max(GAIN_MIN)
    } else {
        gain
    }
}

fn norms(rp: &[Vec<f64>], rq: &[Vec<f64>]) -> (f64, f64) {
    let mut max: f64 = 0.0;
    let mut sq = 0.0;
    for r in rp.iter().chain(rq).flatten() {
        max = max.max(r.abs());
        sq += r * r;
    }
    (max, libm::sqrt(sq))
}

/// Outcome of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateOutput {
    pub state: DualState,
    pub trajectories: Vec<MdpTrajectory>,
    pub dispatch: Vec<StepDispatch>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub variant: Variant,
    pub trajectories: Vec<MdpTrajectory>,
    pub dispatch: Vec<StepDispatch>,
    /// Multipliers of the reported iterate; `history` covers the whole run.
    pub duals: DualState,
    /// Weighted losses plus ensemble costs with each ensemble bus injecting
    /// its expected consumption.
    pub objective: f64,
    pub loss_term: f64,
    pub ensemble_term: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Iteration the reported iterate comes from (1-based).
    pub reported_iteration: usize,
    pub step1_ms: f64,
    pub step2_ms: f64,
}

pub struct Coordinator<'a> {
    scenario: &'a ScenarioSpec,
    context: DispatchContext<'a>,
    positions: Vec<usize>,
    /// Whether the ensemble's active / reactive multiplier reaches its MDP.
    active: Vec<(bool, bool)>,
}

impl<'a> Coordinator<'a> {
    pub fn new(model: &'a GridModel, order: &'a TreeOrder, scenario: &'a ScenarioSpec) -> Result<Self> {
        scenario.validate(model)?;
        let context = DispatchContext::new(
            model,
            order,
            scenario.fixed_loads(model),
            &scenario.sites(),
            &scenario.controls,
        )?;
        let positions = (0..scenario.ensembles.len()).map(|k| context.site_bus_index(k)).collect();
        let active = scenario
            .ensembles
            .iter()
            .map(|(_, s)| (s.p.iter().any(|&v| v != 0.0), s.q.iter().any(|&v| v != 0.0)))
            .collect();
        Ok(Coordinator {
            scenario,
            context,
            positions,
            active,
        })
    }

    pub fn context(&self) -> &DispatchContext<'a> {
        &self.context
    }

    pub fn scenario(&self) -> &ScenarioSpec {
        self.scenario
    }

    /// Bus position of each ensemble.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Multipliers at zero. With curvature scaling the step of ensemble `k`
    /// at `t` is `step / [H_t^-1]_kk`, where `H_t = 2 mu_t R_shared / v0^2` is
    /// the loss Hessian over the ensemble injections: the inverse of the dual
    /// function's curvature along that multiplier when no bound is active.
    pub fn initial_state(&self) -> DualState {
        let opts = &self.scenario.algorithm;
        let v0sq = self.context.model().v0 * self.context.model().v0;
        let k = self.positions.len();
        let mut steps = vec![vec![opts.step; self.scenario.horizon]; k];
        if opts.scaling == StepScaling::Curvature {
            for t in 0..self.scenario.horizon {
                let scale = 2.0 * self.scenario.loss_weight[t] / v0sq;
                let h = DMatrix::from_fn(k, k, |i, j| {
                    scale * self.context.shared_resistance(self.positions[i], self.positions[j])
                });
                let inv = h.clone().cholesky().map(|c| c.inverse());
                for (i, row) in steps.iter_mut().enumerate() {
                    let curvature = match &inv {
                        Some(inv) if inv[(i, i)] > 0.0 => 1.0 / inv[(i, i)],
                        _ => h[(i, i)],
                    };
                    if curvature > 0.0 {
                        row[t] = opts.step * curvature;
                    }
                }
            }
        }
        DualState::new(steps)
    }

    /// Step 1: every ensemble's MDP under the current prices.
    pub fn solve_ensembles<E: Executor>(&self, state: &DualState, exec: &E) -> Result<Vec<MdpTrajectory>> {
        exec.map_indexed(self.scenario.ensembles.len(), |k| {
            let spec = &self.scenario.ensembles[k].1;
            let costs = effective_utility(&spec.energy_cost, &state.lambda_p[k], &state.lambda_q[k], &spec.p, &spec.q)?;
            solve_mdp(spec, &costs)
        })
        .into_iter()
        .collect()
    }

    fn consumption(&self, trajectories: &[MdpTrajectory]) -> Vec<Vec<(f64, f64)>> {
        self.scenario
            .ensembles
            .iter()
            .zip(trajectories)
            .map(|((_, spec), traj)| ensemble_consumption(spec, traj))
            .collect()
    }

    fn step_prices(lambda: &[Vec<f64>], t: usize) -> Vec<f64> {
        lambda.iter().map(|row| row[t]).collect()
    }

    fn dual_change(&self, old: &DualState, lp: &[Vec<f64>], lq: &[Vec<f64>]) -> f64 {
        let mut change: f64 = 0.0;
        for (k, &(act_p, act_q)) in self.active.iter().enumerate() {
            for t in 0..self.scenario.horizon {
                if act_p {
                    change = change.max((lp[k][t] - old.lambda_p[k][t]).abs());
                }
                if act_q {
                    change = change.max((lq[k][t] - old.lambda_q[k][t]).abs());
                }
            }
        }
        change
    }

    /// One ST-D2 iteration: MDPs, free network solves, then dual ascent.
    pub fn std2_iterate<E: Executor, C: Clock>(&self, state: &DualState, exec: &E, clock: &C) -> Result<IterateOutput> {
        let start = clock.now_ms();
        let trajectories = self.solve_ensembles(state, exec)?;
        let mid = clock.now_ms();
        let dispatch = exec
            .map_indexed(self.scenario.horizon, |t| {
                self.context.solve_dual(
                    t,
                    self.scenario.loss_weight[t],
                    &Self::step_prices(&state.lambda_p, t),
                    &Self::step_prices(&state.lambda_q, t),
                )
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let end = clock.now_ms();

        let consumption = self.consumption(&trajectories);
        let (rp, rq) = primal_residuals(&consumption, &dispatch, &self.positions);
        let opts = &self.scenario.algorithm;
        let factor = opts.schedule_factor(state.iteration + 1);
        let adaptive = opts.schedule == StepSchedule::Adaptive && state.iteration > 0;
        let mut lp = state.lambda_p.clone();
        let mut lq = state.lambda_q.clone();
        let mut gain_p = state.gain_p.clone();
        let mut gain_q = state.gain_q.clone();
        for k in 0..lp.len() {
            for t in 0..self.scenario.horizon {
                if adaptive {
                    gain_p[k][t] = adapt(gain_p[k][t], rp[k][t], state.residual_p[k][t]);
                    gain_q[k][t] = adapt(gain_q[k][t], rq[k][t], state.residual_q[k][t]);
                }
                let delta = state.step_sizes[k][t] * factor;
                lp[k][t] += delta * gain_p[k][t] * rp[k][t];
                lq[k][t] += delta * gain_q[k][t] * rq[k][t];
            }
        }
        let (primal_max, primal_l2) = norms(&rp, &rq);
        let record = IterationRecord {
            primal_max,
            primal_l2,
            dual_change: self.dual_change(state, &lp, &lq),
            step1_ms: mid - start,
            step2_ms: end - mid,
        };
        let mut next = self.advance(state, lp, lq, consumption, record, trajectories, dispatch);
        next.state.gain_p = gain_p;
        next.state.gain_q = gain_q;
        next.state.residual_p = rp;
        next.state.residual_q = rq;
        Ok(next)
    }

    /// One ST-Hybrid iteration: MDPs, network solves with the ensembles'
    /// expected injections pinned, prices from the pinning duals.
    ///
    /// The pinned injections match the MDPs by construction, so the primal
    /// residual reported here is the change in expected consumption since
    /// the previous iteration (zero on the first).
    pub fn hybrid_iterate<E: Executor, C: Clock>(&self, state: &DualState, exec: &E, clock: &C) -> Result<IterateOutput> {
        let start = clock.now_ms();
        let trajectories = self.solve_ensembles(state, exec)?;
        let mid = clock.now_ms();
        let consumption = self.consumption(&trajectories);
        let outcomes = exec
            .map_indexed(self.scenario.horizon, |t| {
                let pinned: Vec<(f64, f64)> = consumption.iter().map(|c| c[t]).collect();
                self.context.solve_pinned(t, self.scenario.loss_weight[t], &pinned)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let end = clock.now_ms();

        let n = consumption.len();
        let horizon = self.scenario.horizon;
        let mut lp = vec![vec![0.0; horizon]; n];
        let mut lq = vec![vec![0.0; horizon]; n];
        // A multiplier on an injection that is identically zero has no
        // effect and is left at zero.
        for (t, o) in outcomes.iter().enumerate() {
            for (k, &(act_p, act_q)) in self.active.iter().enumerate() {
                lp[k][t] = if act_p { o.lambda_p[k] } else { 0.0 };
                lq[k][t] = if act_q { o.lambda_q[k] } else { 0.0 };
            }
        }
        let previous = if state.consumption.is_empty() {
            &consumption
        } else {
            &state.consumption
        };
        let mut rp = vec![vec![0.0; horizon]; n];
        let mut rq = vec![vec![0.0; horizon]; n];
        for k in 0..n {
            for t in 0..horizon {
                rp[k][t] = consumption[k][t].0 - previous[k][t].0;
                rq[k][t] = consumption[k][t].1 - previous[k][t].1;
            }
        }
        let (primal_max, primal_l2) = norms(&rp, &rq);
        let record = IterationRecord {
            primal_max,
            primal_l2,
            dual_change: self.dual_change(state, &lp, &lq),
            step1_ms: mid - start,
            step2_ms: end - mid,
        };
        let dispatch = outcomes.into_iter().map(|o| o.dispatch).collect();
        let mut next = self.advance(state, lp, lq, consumption, record, trajectories, dispatch);
        next.state.residual_p = rp;
        next.state.residual_q = rq;
        Ok(next)
    }

    #[allow(clippy::too_many_arguments)]
    fn advance(
        &self,
        state: &DualState,
        lambda_p: Vec<Vec<f64>>,
        lambda_q: Vec<Vec<f64>>,
        consumption: Vec<Vec<(f64, f64)>>,
        record: IterationRecord,
        trajectories: Vec<MdpTrajectory>,
        dispatch: Vec<StepDispatch>,
    ) -> IterateOutput {
        let mut history = state.history.clone();
        history.push(record);
        IterateOutput {
            state: DualState {
                lambda_p,
                lambda_q,
                iteration: state.iteration + 1,
                history,
                step_sizes: state.step_sizes.clone(),
                consumption,
                gain_p: state.gain_p.clone(),
                gain_q: state.gain_q.clone(),
                residual_p: state.residual_p.clone(),
                residual_q: state.residual_q.clone(),
            },
            trajectories,
            dispatch,
        }
    }

    pub fn iterate<E: Executor, C: Clock>(&self, state: &DualState, exec: &E, clock: &C) -> Result<IterateOutput> {
        match self.scenario.algorithm.variant {
            Variant::Std2 => self.std2_iterate(state, exec, clock),
            Variant::Hybrid => self.hybrid_iterate(state, exec, clock),
        }
    }

    pub fn run(&self) -> Result<Solution> {
        self.run_with(&Sequential, &NoClock)
    }

    /// Iterates until both the primal residual and the multiplier change
    /// fall below their tolerances, or `max_iter` is reached. Without
    /// convergence the iterate with the smallest residuals is reported.
    pub fn run_with<E: Executor, C: Clock>(&self, exec: &E, clock: &C) -> Result<Solution> {
        let opts = &self.scenario.algorithm;
        let score = |r: &IterationRecord| (r.primal_max / opts.tol_primal).max(r.dual_change / opts.tol_dual);

        let mut state = self.initial_state();
        let mut best: Option<(f64, IterateOutput)> = None;
        let mut best_primal = f64::INFINITY;
        let mut growing = 0;
        let mut previous_primal = f64::INFINITY;
        for _ in 0..opts.max_iter {
            let out = self.iterate(&state, exec, clock)?;
            let rec = *out.state.history.last().expect("iteration recorded");
            if !rec.primal_max.is_finite() || out.state.lambda_p.iter().chain(&out.state.lambda_q).flatten().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    iteration: out.state.iteration,
                    primal_max: rec.primal_max,
                });
            }
            growing = if rec.primal_max > previous_primal { growing + 1 } else { 0 };
            previous_primal = rec.primal_max;
            best_primal = best_primal.min(rec.primal_max);
            if growing >= opts.divergence_window && rec.primal_max > opts.divergence_factor * best_primal {
                return Err(Error::Diverged {
                    iteration: out.state.iteration,
                    primal_max: rec.primal_max,
                });
            }

            let converged = rec.primal_max <= opts.tol_primal && rec.dual_change <= opts.tol_dual;
            if converged {
                return self.assemble(out, None, true);
            }
            let s = score(&rec);
            state = out.state.clone();
            if best.as_ref().is_none_or(|(b, _)| s < *b) {
                best = Some((s, out));
            }
        }
        let (_, out) = best.ok_or(Error::NoIterations)?;
        self.assemble(out, Some(state.history), false)
    }

    fn assemble(&self, out: IterateOutput, full_history: Option<Vec<IterationRecord>>, converged: bool) -> Result<Solution> {
        let IterateOutput {
            mut state,
            trajectories,
            dispatch,
        } = out;
        let reported_iteration = state.iteration;
        if let Some(h) = full_history {
            state.history = h;
        }
        let (step1_ms, step2_ms) = state
            .history
            .iter()
            .fold((0.0, 0.0), |(a, b), r| (a + r.step1_ms, b + r.step2_ms));

        let consumption = self.consumption(&trajectories);
        let mut loss_term = 0.0;
        for (t, d) in dispatch.iter().enumerate() {
            let mut p_ens = vec![0.0; d.p_ens.len()];
            let mut q_ens = vec![0.0; d.q_ens.len()];
            for (k, &b) in self.positions.iter().enumerate() {
                p_ens[b] += consumption[k][t].0;
                q_ens[b] += consumption[k][t].1;
            }
            let at_consumption = self.context.evaluate(t, p_ens, q_ens, d.p_ctrl.clone(), d.q_ctrl.clone());
            loss_term += self.scenario.loss_weight[t] * at_consumption.loss;
        }
        let mut ensemble_term = 0.0;
        for ((_, spec), traj) in self.scenario.ensembles.iter().zip(&trajectories) {
            ensemble_term += trajectory_cost(spec, traj, &spec.energy_cost)?;
        }
        Ok(Solution {
            variant: self.scenario.algorithm.variant,
            trajectories,
            dispatch,
            iterations: state.history.len(),
            duals: state,
            objective: loss_term + ensemble_term,
            loss_term,
            ensemble_term,
            converged,
            reported_iteration,
            step1_ms,
            step2_ms,
        })
    }
}
