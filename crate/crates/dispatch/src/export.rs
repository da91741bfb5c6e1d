//! CSV output. Every file has a fixed header; floats are written in
//! shortest round-trip form so identical runs give identical bytes.
//!
//! | file | columns |
//! |------|---------|
//! | `rho.csv` | bus, t, state, rho |
//! | `transitions.csv` | bus, t, from_state, to_state, P |
//! | `consumption.csv` | bus, t, p, q |
//! | `dispatch_bus.csv` | t, bus, v2, p_inj, q_inj, p_c, q_c |
//! | `dispatch_branch.csv` | t, from, to, p_flow, q_flow |
//! | `loss.csv` | t, loss |
//! | `duals.csv` | bus, t, lambda_p, lambda_q |
//! | `iterations.csv` | iter, primal_max, primal_l2, dual_change |
//! | `timing.csv` | iter, step1_ms, step2_ms |
//! | `mdp_summary.csv` | bus, objective, mean_spread |
//! | `stats.csv` | n, analytic_mean, analytic_var, empirical_mean, empirical_var, ks_distance |
//!
//! States are numbered from 1. Distributions use `t = 0..=T`, transitions
//! `t = 0..T-1` (the step from `t` to `t + 1`), network quantities and
//! multipliers `t = 1..=T`. Powers are per-unit.

use std::fs::File;
use std::path::{Path, PathBuf};

use csv::Writer;
use tcl_dispatch_core::coordinator::ensemble_consumption;
use tcl_dispatch_core::{DualState, EnsembleSpec, GridModel, IterationRecord, MdpTrajectory, StepDispatch, TreeOrder};

use crate::error::ExportError;

pub const TIMING_FILE: &str = "timing.csv";

fn f(v: f64) -> String {
    format!("{v:?}")
}

fn open(dir: &Path, name: &str, header: &[&str]) -> Result<(Writer<File>, PathBuf), ExportError> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|source| ExportError::Io {
        path: path.clone(),
        source,
    })?;
    let mut w = Writer::from_writer(file);
    w.write_record(header)?;
    Ok((w, path))
}

fn finish(mut w: Writer<File>, path: PathBuf) -> Result<PathBuf, ExportError> {
    w.flush().map_err(|source| ExportError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// `rho.csv` and `transitions.csv` for ensembles keyed by bus id.
pub fn write_trajectories(dir: &Path, trajectories: &[(usize, &MdpTrajectory)]) -> Result<Vec<PathBuf>, ExportError> {
    let (mut rho, rho_path) = open(dir, "rho.csv", &["bus", "t", "state", "rho"])?;
    let (mut tr, tr_path) = open(dir, "transitions.csv", &["bus", "t", "from_state", "to_state", "P"])?;
    for (bus, traj) in trajectories {
        for (t, r) in traj.rho.iter().enumerate() {
            for (a, v) in r.iter().enumerate() {
                rho.write_record([bus.to_string(), t.to_string(), (a + 1).to_string(), f(*v)])?;
            }
        }
        for (t, p) in traj.transitions.iter().enumerate() {
            for b in 0..p.ncols() {
                for a in 0..p.nrows() {
                    tr.write_record([
                        bus.to_string(),
                        t.to_string(),
                        (b + 1).to_string(),
                        (a + 1).to_string(),
                        f(p[(a, b)]),
                    ])?;
                }
            }
        }
    }
    Ok(vec![finish(rho, rho_path)?, finish(tr, tr_path)?])
}

/// `consumption.csv`: expected ensemble injections per step.
pub fn write_consumption(
    dir: &Path,
    ensembles: &[(usize, EnsembleSpec)],
    trajectories: &[MdpTrajectory],
) -> Result<PathBuf, ExportError> {
    let (mut w, path) = open(dir, "consumption.csv", &["bus", "t", "p", "q"])?;
    for ((bus, spec), traj) in ensembles.iter().zip(trajectories) {
        for (t, (p, q)) in ensemble_consumption(spec, traj).into_iter().enumerate() {
            w.write_record([bus.to_string(), (t + 1).to_string(), f(p), f(q)])?;
        }
    }
    finish(w, path)
}

/// `dispatch_bus.csv`, `dispatch_branch.csv` and `loss.csv`.
pub fn write_dispatch(
    dir: &Path,
    model: &GridModel,
    order: &TreeOrder,
    dispatch: &[StepDispatch],
) -> Result<Vec<PathBuf>, ExportError> {
    let (mut buses, bus_path) = open(dir, "dispatch_bus.csv", &["t", "bus", "v2", "p_inj", "q_inj", "p_c", "q_c"])?;
    let (mut branches, br_path) = open(dir, "dispatch_branch.csv", &["t", "from", "to", "p_flow", "q_flow"])?;
    let (mut loss, loss_path) = open(dir, "loss.csv", &["t", "loss"])?;
    let ends: Vec<(usize, usize)> = (0..model.branches.len())
        .map(|k| {
            let child = order.child_of_branch(k).expect("every branch feeds a bus");
            let (parent, _) = order.parent[child].expect("child has a parent");
            (model.buses[parent].id, model.buses[child].id)
        })
        .collect();
    for d in dispatch {
        let t = (d.step + 1).to_string();
        for (k, bus) in model.buses.iter().enumerate() {
            buses.write_record([
                t.clone(),
                bus.id.to_string(),
                f(d.v2[k]),
                f(d.p_ens[k]),
                f(d.q_ens[k]),
                f(d.p_ctrl[k]),
                f(d.q_ctrl[k]),
            ])?;
        }
        for (flow, (from, to)) in d.flows.iter().zip(&ends) {
            branches.write_record([t.clone(), from.to_string(), to.to_string(), f(flow.p), f(flow.q)])?;
        }
        loss.write_record([t, f(d.loss)])?;
    }
    Ok(vec![
        finish(buses, bus_path)?,
        finish(branches, br_path)?,
        finish(loss, loss_path)?,
    ])
}

/// `duals.csv` for ensembles at `buses` (scenario order).
pub fn write_duals(dir: &Path, buses: &[usize], duals: &DualState) -> Result<PathBuf, ExportError> {
    let (mut w, path) = open(dir, "duals.csv", &["bus", "t", "lambda_p", "lambda_q"])?;
    for (k, bus) in buses.iter().enumerate() {
        for (t, (lp, lq)) in duals.lambda_p[k].iter().zip(&duals.lambda_q[k]).enumerate() {
            w.write_record([bus.to_string(), (t + 1).to_string(), f(*lp), f(*lq)])?;
        }
    }
    finish(w, path)
}

/// `iterations.csv`; wall-clock numbers go to `timing.csv` so the former
/// stays reproducible byte for byte.
pub fn write_iterations(dir: &Path, history: &[IterationRecord]) -> Result<Vec<PathBuf>, ExportError> {
    let (mut it, it_path) = open(dir, "iterations.csv", &["iter", "primal_max", "primal_l2", "dual_change"])?;
    let (mut tm, tm_path) = open(dir, TIMING_FILE, &["iter", "step1_ms", "step2_ms"])?;
    for (k, r) in history.iter().enumerate() {
        let iter = (k + 1).to_string();
        it.write_record([iter.clone(), f(r.primal_max), f(r.primal_l2), f(r.dual_change)])?;
        tm.write_record([iter, format!("{:.3}", r.step1_ms), format!("{:.3}", r.step2_ms)])?;
    }
    Ok(vec![finish(it, it_path)?, finish(tm, tm_path)?])
}

pub fn write_mdp_summary(dir: &Path, rows: &[(usize, &MdpTrajectory)]) -> Result<PathBuf, ExportError> {
    let (mut w, path) = open(dir, "mdp_summary.csv", &["bus", "objective", "mean_spread"])?;
    for (bus, traj) in rows {
        w.write_record([bus.to_string(), f(traj.objective), f(traj.mean_spread())])?;
    }
    finish(w, path)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsRow {
    pub n: usize,
    pub analytic_mean: f64,
    pub analytic_var: f64,
    pub empirical_mean: f64,
    pub empirical_var: f64,
    pub ks_distance: f64,
}

pub fn write_stats(dir: &Path, rows: &[StatsRow]) -> Result<PathBuf, ExportError> {
    let (mut w, path) = open(
        dir,
        "stats.csv",
        &["n", "analytic_mean", "analytic_var", "empirical_mean", "empirical_var", "ks_distance"],
    )?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            f(r.analytic_mean),
            f(r.analytic_var),
            f(r.empirical_mean),
            f(r.empirical_var),
            f(r.ks_distance),
        ])?;
    }
    finish(w, path)
}
