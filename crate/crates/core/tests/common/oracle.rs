//! Brute-force reference solutions built only from simplex grids, with no
//! code shared with the solver.

#![allow(dead_code)]

use nalgebra::DMatrix;
use tcl_dispatch_core::EnsembleSpec;

fn term(p: f64, c: f64, gamma: f64, target: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * (c + gamma * (p / target).ln())
    }
}

/// Minimum of `sum_a P_a (c_a + gamma_a ln(P_a / target_a))` over a grid of
/// spacing `1 / steps` on the simplex restricted to the support of `target`.
/// Supports of up to three states.
pub fn grid_row_min(cont: &[f64], gamma: &[f64], target: &[f64], steps: usize) -> f64 {
    let support: Vec<usize> = (0..target.len()).filter(|&a| target[a] > 0.0).collect();
    let h = 1.0 / steps as f64;
    let f = |k: usize, p: f64| term(p, cont[k], gamma[k], target[k]);
    match support.as_slice() {
        [a] => f(*a, 1.0),
        [a, b] => (0..=steps)
            .map(|i| {
                let x = i as f64 * h;
                f(*a, x) + f(*b, 1.0 - x)
            })
            .fold(f64::INFINITY, f64::min),
        [a, b, c] => {
            let mut best = f64::INFINITY;
            for i in 0..=steps {
                let x = i as f64 * h;
                let fa = f(*a, x);
                for j in 0..=steps - i {
                    let y = j as f64 * h;
                    let z = (1.0 - x - y).max(0.0);
                    best = best.min(fa + f(*b, y) + f(*c, z));
                }
            }
            best
        }
        _ => panic!("grid oracle handles supports of 1 to 3 states"),
    }
}

/// Optimal objective by backward induction where every per-origin
/// minimization is an exhaustive grid search.
pub fn bellman_grid_objective(spec: &EnsembleSpec, costs: &DMatrix<f64>, steps: usize) -> f64 {
    let n = spec.p.len();
    let horizon = costs.nrows();
    let mut value = vec![0.0; n];
    for s in (0..horizon).rev() {
        let cont: Vec<f64> = (0..n).map(|a| costs[(s, a)] + value[a]).collect();
        let gamma = if spec.gamma.len() == 1 { &spec.gamma[0] } else { &spec.gamma[s] };
        value = (0..n)
            .map(|b| {
                let g: Vec<f64> = (0..n).map(|a| gamma[(a, b)]).collect();
                let t: Vec<f64> = (0..n).map(|a| spec.target[(a, b)]).collect();
                grid_row_min(&cont, &g, &t, steps)
            })
            .collect();
    }
    (0..n).map(|b| spec.rho_in[b] * value[b]).sum()
}

/// Total cost of explicit two-state transition columns `x[s][b]` (the
/// probability of landing in state 0 from `b` at step `s`), rolling the
/// distribution forward.
fn two_state_cost(spec: &EnsembleSpec, costs: &DMatrix<f64>, x: &[[f64; 2]]) -> f64 {
    let mut rho = [spec.rho_in[0], spec.rho_in[1]];
    let mut total = 0.0;
    for (s, cols) in x.iter().enumerate() {
        let gamma = if spec.gamma.len() == 1 { &spec.gamma[0] } else { &spec.gamma[s] };
        let mut next = [0.0; 2];
        for b in 0..2 {
            let p = [cols[b], 1.0 - cols[b]];
            for a in 0..2 {
                if p[a] > 0.0 && spec.target[(a, b)] == 0.0 {
                    return f64::INFINITY;
                }
                total += rho[b] * term(p[a], costs[(s, a)], gamma[(a, b)], spec.target[(a, b)]);
                next[a] += p[a] * rho[b];
            }
        }
        rho = next;
    }
    total
}

/// Joint search over all transition matrices of a two-state ensemble with
/// horizon 1 or 2: a coarse sweep of the whole box followed by a sweep at
/// spacing `1e-3` around the best coarse point.
pub fn two_state_joint_min(spec: &EnsembleSpec, costs: &DMatrix<f64>) -> f64 {
    let horizon = costs.nrows();
    assert!(spec.p.len() == 2 && (1..=2).contains(&horizon));
    let dims = 2 * horizon;
    let sweep = |centre: &[f64], half: i64, h: f64| -> (f64, Vec<f64>) {
        let width = (2 * half + 1) as usize;
        let mut best = (f64::INFINITY, centre.to_vec());
        let mut idx = vec![0usize; dims];
        let mut x = vec![[0.0; 2]; horizon];
        loop {
            let pt: Vec<f64> = (0..dims)
                .map(|d| (centre[d] + (idx[d] as i64 - half) as f64 * h).clamp(0.0, 1.0))
                .collect();
            for (s, cols) in x.iter_mut().enumerate() {
                *cols = [pt[2 * s], pt[2 * s + 1]];
            }
            let v = two_state_cost(spec, costs, &x);
            if v < best.0 {
                best = (v, pt);
            }
            let mut d = 0;
            loop {
                if d == dims {
                    return best;
                }
                idx[d] += 1;
                if idx[d] < width {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
        }
    };
    let (_, coarse) = sweep(&vec![0.5; dims], 25, 0.02);
    let (fine, _) = sweep(&coarse, 25, 1e-3);
    fine
}
