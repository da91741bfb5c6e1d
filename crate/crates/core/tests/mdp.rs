mod common;

use common::oracle::{bellman_grid_objective, grid_row_min, two_state_joint_min};
use common::{circulant, random_distribution, random_ensemble, random_target, rng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use tcl_dispatch_core::{backward_step_row, propagate, solve_mdp, EffectiveCost, EnsembleSpec, MdpTrajectory};

fn solve(spec: &EnsembleSpec) -> MdpTrajectory {
    solve_mdp(spec, &EffectiveCost { values: spec.energy_cost.clone() }).unwrap()
}

#[test]
fn matches_grid_oracle_on_small_instances() {
    let mut r = rng(11);
    for case in 0..50 {
        let n = r.random_range(1..=3);
        let horizon = r.random_range(1..=2);
        let spec = random_ensemble(&mut r, n, horizon, case % 2 == 0);
        let got = solve(&spec).objective;
        let oracle = bellman_grid_objective(&spec, &spec.energy_cost, 1000);
        assert!((got - oracle).abs() <= 1e-3, "case {case}: solver {got}, oracle {oracle}");
        assert!(got <= oracle + 1e-12, "case {case}: solver {got} above grid minimum {oracle}");
    }
}

#[test]
fn matches_joint_search_for_two_states() {
    let mut r = rng(12);
    for case in 0..3 {
        let spec = random_ensemble(&mut r, 2, 2, case == 0);
        let got = solve(&spec).objective;
        let oracle = two_state_joint_min(&spec, &spec.energy_cost);
        assert!((got - oracle).abs() <= 1e-3, "case {case}: solver {got}, joint search {oracle}");
    }
}

#[test]
fn nonuniform_row_matches_grid_search() {
    let mut r = rng(13);
    for _ in 0..10 {
        let target: Vec<f64> = random_distribution(&mut r, 3).iter().copied().collect();
        let gamma: Vec<f64> = (0..3).map(|_| r.random_range(0.5..3.0)).collect();
        let cont: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let (_, v) = backward_step_row(&cont, &gamma, &target).unwrap();
        let oracle = grid_row_min(&cont, &gamma, &target, 1000);
        assert!((v - oracle).abs() <= 1e-4, "{v} vs {oracle}");
    }
}

#[test]
fn closed_form_softmin_example() {
    let (row, v) = backward_step_row(&[0.0, 4f64.ln()], &[1.0, 1.0], &[0.5, 0.5]).unwrap();
    assert!((row[0] - 0.8).abs() < 1e-12 && (row[1] - 0.2).abs() < 1e-12, "{row:?}");
    assert!((v + (1.25f64 / 2.0).ln()).abs() < 1e-12);
}

#[test]
fn zero_cost_keeps_target_and_costs_nothing() {
    let n = 8;
    let target = circulant(n, &[0.2, 0.6, 0.2]);
    // Weights may vary between origins but not across one origin's
    // destinations; otherwise the weighted penalty can dip below zero.
    let gamma = DMatrix::from_fn(n, n, |_, b| 1.0 + b as f64);
    let spec = EnsembleSpec {
        p: vec![1.0; n],
        q: vec![0.0; n],
        target: target.clone(),
        gamma: vec![gamma],
        energy_cost: DMatrix::zeros(20, n),
        rho_in: DVector::from_fn(n, |a, _| if a == 0 { 1.0 } else { 0.0 }),
    };
    let traj = solve(&spec);
    assert_eq!(traj.objective, 0.0);
    let mut rho = spec.rho_in.clone();
    for (s, p) in traj.transitions.iter().enumerate() {
        assert!((p - &target).abs().max() <= 1e-10, "step {s}");
        rho = &target * rho;
        assert!((&traj.rho[s + 1] - &rho).abs().max() <= 1e-12);
    }
}

#[test]
fn mixed_weights_within_a_column_can_beat_the_target() {
    let target = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.5]);
    let spec = EnsembleSpec {
        p: vec![0.0; 2],
        q: vec![0.0; 2],
        target,
        gamma: vec![DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 10.0, 10.0])],
        energy_cost: DMatrix::zeros(1, 2),
        rho_in: DVector::from_vec(vec![1.0, 0.0]),
    };
    let got = solve(&spec).objective;
    assert!(got < 0.0);
    let oracle = bellman_grid_objective(&spec, &spec.energy_cost, 1000);
    assert!((got - oracle).abs() <= 1e-4, "{got} vs {oracle}");
}

fn spread_run(gamma: DMatrix<f64>) -> f64 {
    let n = 8;
    let mut r = rng(14);
    let prices: Vec<f64> = (0..20).map(|_| 1.0 + r.random::<f64>()).collect();
    let p: Vec<f64> = (0..n).map(|_| r.random_range(0.1..2.0)).collect();
    let spec = EnsembleSpec {
        energy_cost: DMatrix::from_fn(20, n, |t, a| 2.0 * prices[t] * p[a]),
        p,
        q: vec![0.0; n],
        target: circulant(n, &[0.2, 0.6, 0.2]),
        gamma: vec![gamma],
        rho_in: DVector::from_element(n, 1.0 / n as f64),
    };
    solve(&spec).mean_spread()
}

#[test]
fn stiffer_penalties_shrink_the_spread() {
    let n = 8;
    let uniform = spread_run(DMatrix::from_element(n, n, 1.0));
    let mixed = spread_run(DMatrix::from_fn(n, n, |a, b| if a == (b + 1) % n { 1.0 } else { 10.0 }));
    assert!(mixed < uniform, "non-uniform spread {mixed} not below uniform {uniform}");
}

fn instance() -> impl Strategy<Value = (u64, usize, usize, bool)> {
    (any::<u64>(), 1usize..=6, 1usize..=5, any::<bool>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn trajectories_are_stochastic_and_keep_support((seed, n, horizon, uniform) in instance()) {
        let spec = random_ensemble(&mut rng(seed), n, horizon, uniform);
        let traj = solve(&spec);
        for (s, p) in traj.transitions.iter().enumerate() {
            for b in 0..n {
                prop_assert!((p.column(b).sum() - 1.0).abs() <= 1e-10);
                for a in 0..n {
                    prop_assert!((0.0..=1.0).contains(&p[(a, b)]));
                    prop_assert_eq!(p[(a, b)] == 0.0, spec.target[(a, b)] == 0.0, "support at {},{}", a, b);
                }
            }
            let next = propagate(&traj.rho[s], p).unwrap();
            prop_assert!((&next - &traj.rho[s + 1]).abs().max() <= 1e-12);
            prop_assert!((traj.rho[s + 1].sum() - 1.0).abs() <= 1e-12);
            prop_assert!(traj.rho[s + 1].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn common_scaling_of_penalty_and_cost_keeps_transitions(
        (seed, n, horizon, uniform) in instance(),
        k in 0.1f64..10.0,
    ) {
        let spec = random_ensemble(&mut rng(seed), n, horizon, uniform);
        let mut scaled = spec.clone();
        scaled.gamma[0] *= k;
        scaled.energy_cost *= k;
        let a = solve(&spec);
        let b = solve(&scaled);
        for (x, y) in a.transitions.iter().zip(&b.transitions) {
            prop_assert!((x - y).abs().max() <= 1e-9);
        }
        prop_assert!((b.objective - k * a.objective).abs() <= 1e-9 * (1.0 + b.objective.abs()));
    }

    #[test]
    fn transitions_ignore_the_initial_distribution((seed, n, horizon, uniform) in instance()) {
        let mut r = rng(seed);
        let spec = random_ensemble(&mut r, n, horizon, uniform);
        let mut other = spec.clone();
        other.rho_in = random_distribution(&mut r, n);
        prop_assert_eq!(solve(&spec).transitions, solve(&other).transitions);
    }

    /// The optimal row is `target_a exp(-(c_a + nu) / gamma_a - 1)` for a
    /// single multiplier `nu`, and the row mass is strictly decreasing in
    /// `nu`, so that root is unique.
    #[test]
    fn nonuniform_row_has_monotone_dual(seed in any::<u64>(), n in 2usize..=6) {
        let mut r = rng(seed);
        let target: Vec<f64> = random_target(&mut r, n, 0.3).column(0).iter().copied().collect();
        let gamma: Vec<f64> = (0..n).map(|_| r.random_range(0.2..5.0)).collect();
        let cont: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let (row, _) = backward_step_row(&cont, &gamma, &target).unwrap();
        let support: Vec<usize> = (0..n).filter(|&a| target[a] > 0.0).collect();
        let nus: Vec<f64> = support
            .iter()
            .map(|&a| -gamma[a] * ((row[a] / target[a]).ln() + 1.0) - cont[a])
            .collect();
        let nu = nus[0];
        for v in &nus {
            prop_assert!((v - nu).abs() <= 1e-7 * (1.0 + nu.abs()), "{:?}", nus);
        }
        let mass = |nu: f64| -> f64 {
            support.iter().map(|&a| target[a] * (-(cont[a] + nu) / gamma[a] - 1.0).exp()).sum()
        };
        prop_assert!((mass(nu) - 1.0).abs() <= 1e-8);
        let mut prev = f64::INFINITY;
        for i in -20..=20 {
            let m = mass(nu + i as f64 * 0.25);
            prop_assert!(m < prev);
            prev = m;
        }
    }
}
