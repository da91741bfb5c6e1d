//! Per-step network optimization over the radial feeder.
//!
//! Branch flows are linear in the bus injections (each flow is the sum over
//! the subtree it feeds), so with the loss denominator frozen at `v0^2` the
//! losses are the quadratic form `d' R d` in the injection vector `d`, where
//! `R[i][j]` is the resistance shared by the slack-to-`i` and slack-to-`j`
//! paths. Squared voltages are affine in `d` through the same shared-path
//! sums. That turns each step into a small box-and-row constrained QP.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::flow::{losses, tree_flows, voltages, Flow};
use crate::grid::{GridModel, TreeOrder};
use crate::qp::{BoxQp, QpError, QpOptions};
use crate::scenario::ControlBounds;

/// Admissible injection range of an ensemble at one bus (p.u.).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleSite {
    /// Bus id.
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
}

/// Network state at one step. Per-bus vectors follow `GridModel::buses`,
/// flows follow `GridModel::branches` (oriented away from the slack).
#[derive(Debug, Clone, PartialEq)]
pub struct StepDispatch {
    pub step: usize,
    pub v2: Vec<f64>,
    pub p_ens: Vec<f64>,
    pub q_ens: Vec<f64>,
    pub p_ctrl: Vec<f64>,
    pub q_ctrl: Vec<f64>,
    pub flows: Vec<Flow>,
    /// Losses (p.u.), unweighted.
    pub loss: f64,
    /// Value of the step objective that was minimized.
    pub objective: f64,
    pub kkt_residual: f64,
    pub max_violation: f64,
}

/// Pinned solve output: dispatch plus the multipliers of the pinning
/// equalities, one per ensemble in site order.
#[derive(Debug, Clone, PartialEq)]
pub struct PinnedOutcome {
    pub dispatch: StepDispatch,
    pub lambda_p: Vec<f64>,
    pub lambda_q: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Var {
    bus: usize,
    reactive: bool,
    lo: f64,
    hi: f64,
}

/// Precomputed data for repeated per-step solves on one feeder.
#[derive(Debug, Clone)]
pub struct DispatchContext<'a> {
    model: &'a GridModel,
    order: &'a TreeOrder,
    fixed: Vec<(f64, f64)>,
    sites: Vec<(usize, EnsembleSite)>,
    controls: Vec<(usize, ControlBounds)>,
    shared_r: DMatrix<f64>,
    shared_x: DMatrix<f64>,
    monitored: Vec<usize>,
    pub options: QpOptions,
}

impl<'a> DispatchContext<'a> {
    /// `fixed` is the non-controllable load at each bus (by bus position).
    pub fn new(
        model: &'a GridModel,
        order: &'a TreeOrder,
        fixed: Vec<(f64, f64)>,
        sites: &[EnsembleSite],
        controls: &[ControlBounds],
    ) -> Result<Self> {
        let n = model.buses.len();
        if fixed.len() != n {
            return Err(Error::DimensionMismatch {
                what: "fixed loads",
                expected: n,
                got: fixed.len(),
            });
        }
        let locate = |id: usize| {
            model
                .index_of(id)
                .ok_or_else(|| Error::Scenario(alloc::format!("bus {id} is not in the grid")))
        };
        let sites = sites
            .iter()
            .map(|s| Ok((locate(s.bus)?, *s)))
            .collect::<Result<Vec<_>>>()?;
        let controls = controls
            .iter()
            .map(|c| Ok((locate(c.bus)?, *c)))
            .collect::<Result<Vec<_>>>()?;

        let paths: Vec<Vec<usize>> = (0..n).map(|b| order.path_branches(b)).collect();
        let mut shared_r = DMatrix::zeros(n, n);
        let mut shared_x = DMatrix::zeros(n, n);
        let mut on_path = vec![false; model.branches.len()];
        for i in 0..n {
            on_path.iter_mut().for_each(|f| *f = false);
            for &br in &paths[i] {
                on_path[br] = true;
            }
            for j in 0..n {
                let (mut r, mut x) = (0.0, 0.0);
                for &br in &paths[j] {
                    if on_path[br] {
                        r += model.branches[br].r;
                        x += model.branches[br].x;
                    }
                }
                shared_r[(i, j)] = r;
                shared_x[(i, j)] = x;
            }
        }
        let monitored = order.order[1..].to_vec();
        Ok(DispatchContext {
            model,
            order,
            fixed,
            sites,
            controls,
            shared_r,
            shared_x,
            monitored,
            options: QpOptions::default(),
        })
    }

    pub fn model(&self) -> &GridModel {
        self.model
    }

    /// Resistance shared by the slack paths of two buses (by position).
    pub fn shared_resistance(&self, i: usize, j: usize) -> f64 {
        self.shared_r[(i, j)]
    }

    pub fn site_bus_index(&self, k: usize) -> usize {
        self.sites[k].0
    }

    pub fn sites(&self) -> impl Iterator<Item = &EnsembleSite> {
        self.sites.iter().map(|(_, s)| s)
    }

    /// Ensemble injections are free within their sites' ranges and earn
    /// `lambda_p p + lambda_q q`; minimizes `mu * losses - sum lambda' inj`.
    pub fn solve_dual(&self, step: usize, mu: f64, lambda_p: &[f64], lambda_q: &[f64]) -> Result<StepDispatch> {
        self.check_sites("lambda_p", lambda_p.len())?;
        self.check_sites("lambda_q", lambda_q.len())?;
        let mut vars = Vec::new();
        let mut reward = Vec::new();
        for (k, (bus, s)) in self.sites.iter().enumerate() {
            vars.push(Var {
                bus: *bus,
                reactive: false,
                lo: s.p_min,
                hi: s.p_max,
            });
            reward.push(lambda_p[k]);
        }
        for (k, (bus, s)) in self.sites.iter().enumerate() {
            vars.push(Var {
                bus: *bus,
                reactive: true,
                lo: s.q_min,
                hi: s.q_max,
            });
            reward.push(lambda_q[k]);
        }
        let n_ens = vars.len();
        self.push_controls(&mut vars, &mut reward);
        let (z, sol) = self.solve(step, mu, &self.fixed, &vars, &reward)?;

        let mut d = self.fixed.clone();
        let mut p_ens = vec![0.0; d.len()];
        let mut q_ens = vec![0.0; d.len()];
        let mut p_ctrl = vec![0.0; d.len()];
        let mut q_ctrl = vec![0.0; d.len()];
        for (k, v) in vars.iter().enumerate() {
            let target = match (k < n_ens, v.reactive) {
                (true, false) => &mut p_ens,
                (true, true) => &mut q_ens,
                (false, false) => &mut p_ctrl,
                (false, true) => &mut q_ctrl,
            };
            target[v.bus] += z[k];
            if v.reactive {
                d[v.bus].1 += z[k];
            } else {
                d[v.bus].0 += z[k];
            }
        }
        let mut out = self.assemble(step, &d, p_ens, q_ens, p_ctrl, q_ctrl, sol);
        let earned: f64 = vars[..n_ens].iter().zip(&reward).zip(z.iter()).map(|((_, r), z)| r * z).sum();
        out.objective = mu * out.loss - earned;
        Ok(out)
    }

    /// Ensemble injections are fixed at `pinned` (per site, `(p, q)`); only
    /// the control injections move. Returns the sensitivities of the optimal
    /// `mu * losses` to the pinned values as the coupling multipliers.
    pub fn solve_pinned(&self, step: usize, mu: f64, pinned: &[(f64, f64)]) -> Result<PinnedOutcome> {
        self.check_sites("pinned injections", pinned.len())?;
        let mut fixed = self.fixed.clone();
        let mut p_ens = vec![0.0; fixed.len()];
        let mut q_ens = vec![0.0; fixed.len()];
        for ((bus, _), &(p, q)) in self.sites.iter().zip(pinned) {
            fixed[*bus].0 += p;
            fixed[*bus].1 += q;
            p_ens[*bus] += p;
            q_ens[*bus] += q;
        }
        let mut vars = Vec::new();
        let mut reward = Vec::new();
        self.push_controls(&mut vars, &mut reward);
        let (z, sol) = self.solve(step, mu, &fixed, &vars, &reward)?;

        let mut d = fixed;
        let mut p_ctrl = vec![0.0; d.len()];
        let mut q_ctrl = vec![0.0; d.len()];
        for (k, v) in vars.iter().enumerate() {
            if v.reactive {
                q_ctrl[v.bus] += z[k];
                d[v.bus].1 += z[k];
            } else {
                p_ctrl[v.bus] += z[k];
                d[v.bus].0 += z[k];
            }
        }

        // Envelope theorem: d(opt)/d(pinned_i) is the partial derivative of
        // the Lagrangian, i.e. the marginal loss at bus i plus the voltage
        // rows' multipliers times dv^2/dd_i = -2 R(j, i) (or X for q).
        let v0sq = self.model.v0 * self.model.v0;
        let dp = DVector::from_iterator(d.len(), d.iter().map(|x| x.0));
        let dq = DVector::from_iterator(d.len(), d.iter().map(|x| x.1));
        let grad_p = &self.shared_r * &dp * (2.0 * mu / v0sq);
        let grad_q = &self.shared_r * &dq * (2.0 * mu / v0sq);
        let mut lambda_p = Vec::with_capacity(self.sites.len());
        let mut lambda_q = Vec::with_capacity(self.sites.len());
        for (bus, _) in &self.sites {
            let mut lp = grad_p[*bus];
            let mut lq = grad_q[*bus];
            for (row, &j) in self.monitored.iter().enumerate() {
                let y = sol.multipliers[row];
                if y != 0.0 {
                    lp -= 2.0 * y * self.shared_r[(j, *bus)];
                    lq -= 2.0 * y * self.shared_x[(j, *bus)];
                }
            }
            lambda_p.push(lp);
            lambda_q.push(lq);
        }
        let mut dispatch = self.assemble(step, &d, p_ens, q_ens, p_ctrl, q_ctrl, sol);
        dispatch.objective = mu * dispatch.loss;
        Ok(PinnedOutcome {
            dispatch,
            lambda_p,
            lambda_q,
        })
    }

    /// Network state for given injections, without optimizing anything.
    pub fn evaluate(&self, step: usize, p_ens: Vec<f64>, q_ens: Vec<f64>, p_ctrl: Vec<f64>, q_ctrl: Vec<f64>) -> StepDispatch {
        let d: Vec<(f64, f64)> = (0..self.fixed.len())
            .map(|b| {
                (
                    self.fixed[b].0 + p_ens[b] + p_ctrl[b],
                    self.fixed[b].1 + q_ens[b] + q_ctrl[b],
                )
            })
            .collect();
        let sol = Solved {
            kkt_residual: 0.0,
            multipliers: DVector::zeros(0),
        };
        let mut out = self.assemble(step, &d, p_ens, q_ens, p_ctrl, q_ctrl, sol);
        out.max_violation = self.voltage_violation(&out.v2).1;
        out.objective = out.loss;
        out
    }

    /// Worst bus (position) and amount by which `v2` leaves its limits.
    pub fn voltage_violation(&self, v2: &[f64]) -> (usize, f64) {
        let mut worst = (self.order.slack(), 0.0);
        for &j in &self.monitored {
            let bus = &self.model.buses[j];
            let v = (bus.v_min * bus.v_min - v2[j]).max(v2[j] - bus.v_max * bus.v_max);
            if v > worst.1 {
                worst = (j, v);
            }
        }
        worst
    }

    fn check_sites(&self, what: &'static str, got: usize) -> Result<()> {
        if got == self.sites.len() {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                what,
                expected: self.sites.len(),
                got,
            })
        }
    }

    fn push_controls(&self, vars: &mut Vec<Var>, reward: &mut Vec<f64>) {
        for (bus, c) in &self.controls {
            if c.p_min != c.p_max || c.p_min != 0.0 {
                vars.push(Var {
                    bus: *bus,
                    reactive: false,
                    lo: c.p_min,
                    hi: c.p_max,
                });
                reward.push(0.0);
            }
            if c.q_min != c.q_max || c.q_min != 0.0 {
                vars.push(Var {
                    bus: *bus,
                    reactive: true,
                    lo: c.q_min,
                    hi: c.q_max,
                });
                reward.push(0.0);
            }
        }
    }

    fn solve(
        &self,
        step: usize,
        mu: f64,
        fixed: &[(f64, f64)],
        vars: &[Var],
        reward: &[f64],
    ) -> Result<(DVector<f64>, Solved)> {
        let n = fixed.len();
        let m = vars.len();
        let v0sq = self.model.v0 * self.model.v0;
        let scale = 2.0 * mu / v0sq;

        // Columns of the shared-path matrices selected by each variable.
        let r_cols = DMatrix::from_fn(n, m, |i, k| self.shared_r[(i, vars[k].bus)]);
        let mut hessian = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in 0..m {
                if vars[a].reactive == vars[b].reactive {
                    hessian[(a, b)] = scale * self.shared_r[(vars[a].bus, vars[b].bus)];
                }
            }
        }
        let fp = DVector::from_iterator(n, fixed.iter().map(|x| x.0));
        let fq = DVector::from_iterator(n, fixed.iter().map(|x| x.1));
        let rfp = &self.shared_r * &fp;
        let rfq = &self.shared_r * &fq;
        let linear = DVector::from_fn(m, |k, _| {
            let base = if vars[k].reactive { rfq[vars[k].bus] } else { rfp[vars[k].bus] };
            scale * base - reward[k]
        });

        let xfq = &self.shared_x * &fq;
        let rows_n = self.monitored.len();
        let mut rows = DMatrix::zeros(rows_n, m);
        let mut row_lower = DVector::zeros(rows_n);
        let mut row_upper = DVector::zeros(rows_n);
        for (row, &j) in self.monitored.iter().enumerate() {
            for k in 0..m {
                let coef = if vars[k].reactive {
                    self.shared_x[(j, vars[k].bus)]
                } else {
                    r_cols[(j, k)]
                };
                rows[(row, k)] = -2.0 * coef;
            }
            let base = v0sq - 2.0 * (rfp[j] + xfq[j]);
            let bus = &self.model.buses[j];
            row_lower[row] = bus.v_min * bus.v_min - base;
            row_upper[row] = bus.v_max * bus.v_max - base;
        }
        let qp = BoxQp {
            hessian,
            linear,
            lower: DVector::from_iterator(m, vars.iter().map(|v| v.lo)),
            upper: DVector::from_iterator(m, vars.iter().map(|v| v.hi)),
            rows,
            row_lower,
            row_upper,
        };
        match qp.solve(&self.options) {
            Ok(sol) => Ok((
                sol.x,
                Solved {
                    kkt_residual: sol.kkt_residual,
                    multipliers: sol.multipliers,
                },
            )),
            Err(QpError::Infeasible { row, violation }) => Err(Error::Infeasible {
                step,
                bus: self.model.buses[self.monitored[row]].id,
                violation,
            }),
            Err(QpError::NotConverged {
                kkt_residual,
                max_violation,
            }) => Err(Error::NetworkSolve {
                step,
                kkt_residual,
                max_violation,
            }),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        &self,
        step: usize,
        d: &[(f64, f64)],
        p_ens: Vec<f64>,
        q_ens: Vec<f64>,
        p_ctrl: Vec<f64>,
        q_ctrl: Vec<f64>,
        sol: Solved,
    ) -> StepDispatch {
        let flows = tree_flows(self.model, self.order, d);
        let v2 = voltages(self.model, self.order, &flows);
        let loss = losses(self.model, &flows);
        let max_violation = self.voltage_violation(&v2).1.max(0.0);
        StepDispatch {
            step,
            v2,
            p_ens,
            q_ens,
            p_ctrl,
            q_ctrl,
            flows,
            loss,
            objective: 0.0,
            kkt_residual: sol.kkt_residual,
            max_violation,
        }
    }
}

struct Solved {
    kkt_residual: f64,
    multipliers: DVector<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{validate_radial, Branch, Bus};

    fn bus(id: usize, p: f64, v_min: f64) -> Bus {
        Bus {
            id,
            p_load: p,
            q_load: 0.0,
            v_min,
            v_max: 1.1,
        }
    }

    fn single_branch(v_min: f64) -> GridModel {
        GridModel::new(
            vec![bus(1, 0.0, 0.9), bus(2, 0.0, v_min)],
            vec![Branch {
                from: 1,
                to: 2,
                r: 0.1,
                x: 0.05,
            }],
            1,
            1.0,
            1.0,
        )
        .unwrap()
    }

    fn site(bus: usize, lo: f64, hi: f64) -> EnsembleSite {
        EnsembleSite {
            bus,
            p_min: lo,
            p_max: hi,
            q_min: 0.0,
            q_max: 0.0,
        }
    }

    #[test]
    fn no_freedom_reproduces_fixed_flow() {
        let m = single_branch(0.0);
        let t = validate_radial(&m).unwrap();
        let ctx = DispatchContext::new(&m, &t, vec![(0.0, 0.0), (0.3, 0.1)], &[site(2, 0.0, 0.0)], &[]).unwrap();
        let out = ctx.solve_dual(0, 1.0, &[0.0], &[0.0]).unwrap();
        let expected = 0.1 * (0.09 + 0.01);
        assert!((out.loss - expected).abs() < 1e-15);
        assert!((out.objective - expected).abs() < 1e-15);
    }

    #[test]
    fn strong_price_pushes_to_upper_bound() {
        // mu r (f + p)^2 - lambda p with f = 0.2, r = 0.1: the unconstrained
        // minimizer is p = lambda / (2 r) - f = 4.8, beyond the 0.1 bound.
        let m = single_branch(0.0);
        let t = validate_radial(&m).unwrap();
        let ctx = DispatchContext::new(&m, &t, vec![(0.0, 0.0), (0.2, 0.0)], &[site(2, 0.0, 0.1)], &[]).unwrap();
        let out = ctx.solve_dual(0, 1.0, &[1.0], &[0.0]).unwrap();
        assert!((out.p_ens[1] - 0.1).abs() < 1e-12);

        // Modest price: interior optimum p = lambda / (2 r) - f = 0.05.
        let out = ctx.solve_dual(0, 1.0, &[0.05], &[0.0]).unwrap();
        assert!((out.p_ens[1] - 0.05).abs() < 1e-10, "{}", out.p_ens[1]);
    }

    #[test]
    fn pinned_dual_is_marginal_loss() {
        let m = single_branch(0.0);
        let t = validate_radial(&m).unwrap();
        let ctx = DispatchContext::new(&m, &t, vec![(0.0, 0.0); 2], &[site(2, 0.0, 1.0)], &[]).unwrap();
        let out = ctx.solve_pinned(0, 1.0, &[(0.3, 0.0)]).unwrap();
        assert!((out.lambda_p[0] - 2.0 * 0.1 * 0.3).abs() < 1e-14);
        assert_eq!(out.lambda_q[0], 0.0);

        let zero = ctx.solve_pinned(0, 1.0, &[(0.0, 0.0)]).unwrap();
        assert_eq!(zero.dispatch.loss, 0.0);
        assert_eq!(zero.lambda_p, vec![0.0]);
    }

    #[test]
    fn pinned_voltage_limit_and_infeasibility() {
        // v2 at bus 2 is 1 - 2 (0.1 p + 0.05 q) and must stay >= 0.95^2.
        let m = single_branch(0.95);
        let t = validate_radial(&m).unwrap();
        let ctrl = |q: f64| ControlBounds {
            bus: 2,
            p_min: 0.0,
            p_max: 0.0,
            q_min: -q,
            q_max: q,
        };
        let ctx = DispatchContext::new(&m, &t, vec![(0.0, 0.0); 2], &[site(2, 0.0, 1.0)], &[ctrl(0.1)]).unwrap();
        // p = 0.7 needs q <= -0.425, out of reach.
        match ctx.solve_pinned(3, 1.0, &[(0.7, 0.0)]) {
            Err(Error::Infeasible { step, bus, violation }) => {
                assert_eq!(step, 3);
                assert_eq!(bus, 2);
                assert!((violation - (0.9025 - 0.87)).abs() < 1e-8, "{violation}");
            }
            other => panic!("expected infeasible, got {other:?}"),
        }

        // p = 0.55 needs q <= -0.125; losses alone would pick q = 0, so the
        // voltage row binds. opt(p) = r (p^2 + (0.975 - 2p)^2), whose slope at
        // 0.55 is 0.1 * (1.1 + 4 * 0.125) = 0.16.
        let ctx = DispatchContext::new(&m, &t, vec![(0.0, 0.0); 2], &[site(2, 0.0, 1.0)], &[ctrl(1.0)]).unwrap();
        let out = ctx.solve_pinned(0, 1.0, &[(0.55, 0.0)]).unwrap();
        assert!((out.dispatch.q_ctrl[1] + 0.125).abs() < 1e-9, "{}", out.dispatch.q_ctrl[1]);
        assert!(out.dispatch.max_violation <= 1e-9);
        assert!((out.lambda_p[0] - 0.16).abs() < 1e-7, "{}", out.lambda_p[0]);
    }
}
