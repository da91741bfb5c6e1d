mod common;

use common::case33_text;
use proptest::prelude::*;
use tcl_dispatch::{parse_grid, parse_matpower, write_grid, IngestError};
use tcl_dispatch_core::dispatch::EnsembleSite;
use tcl_dispatch_core::{losses, tree_flows, validate_radial, voltages, ControlBounds, DispatchContext, Error, GridModel};

fn case33() -> GridModel {
    parse_matpower(&case33_text()).unwrap()
}

#[test]
fn case33bw_shape() {
    let m = case33();
    assert_eq!(m.buses.len(), 33);
    assert_eq!(m.branches.len(), 32);
    assert_eq!(m.slack_bus, 1);
    assert_eq!(m.base_mva, 10.0);
    let (p, q) = m.total_load();
    assert!((p * m.base_mva - 3.715).abs() < 1e-12, "{p}");
    assert!((q * m.base_mva - 2.3).abs() < 1e-12, "{q}");
    // First branch 1-2 is 0.0922 + j0.0470 ohm on a 12.66 kV / 10 MVA base.
    let zb = 12.66 * 12.66 / 10.0;
    let b = &m.branches[0];
    assert_eq!((b.from, b.to), (1, 2));
    assert!((b.r - 0.0922 / zb).abs() < 1e-15 && (b.x - 0.0470 / zb).abs() < 1e-15);
    let order = validate_radial(&m).unwrap();
    assert_eq!(order.len(), 33);
    assert_eq!(m.buses[order.order[0]].id, 1);
}

/// Union-find over bus ids; reports whether any edge closes a loop.
fn has_cycle(edges: &[(usize, usize)], n: usize) -> bool {
    let mut parent: Vec<usize> = (0..=n).collect();
    fn root(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(a, b) in edges {
        let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
        if ra == rb {
            return true;
        }
        parent[ra] = rb;
    }
    false
}

#[test]
fn closing_a_tie_switch_is_rejected() {
    let text = case33_text();
    // Branch 33 is the 21-8 tie switch; close it.
    let open = "\t21\t8\t2.0\t2.0\t0\t0\t0\t0\t0\t0\t0\t-360\t360;";
    let closed = text.replacen(open, &open.replace("\t0\t-360", "\t1\t-360"), 1);
    assert_ne!(closed, text, "tie line row not found");
    let err = parse_matpower(&closed).unwrap_err();
    assert!(matches!(err, IngestError::Core(Error::Radiality(_))), "{err:?}");

    let mut edges: Vec<(usize, usize)> = case33().branches.iter().map(|b| (b.from, b.to)).collect();
    assert!(!has_cycle(&edges, 33));
    edges.push((21, 8));
    assert!(has_cycle(&edges, 33));
}

#[test]
fn canonical_form_round_trips() {
    let m = case33();
    let text = write_grid(&m);
    let back = parse_grid(&text).unwrap();
    assert_eq!(back, m);
    assert_eq!(write_grid(&back), text);
}

#[test]
fn rated_load_flow_structure() {
    let m = case33();
    let order = validate_radial(&m).unwrap();
    let inj: Vec<(f64, f64)> = m.buses.iter().map(|b| (b.p_load, b.q_load)).collect();
    let flows = tree_flows(&m, &order, &inj);
    let head = m.branches.iter().position(|b| (b.from, b.to) == (1, 2)).unwrap();
    let (pd, qd) = m.total_load();
    assert!((flows[head].p - pd).abs() <= 1e-9);
    assert!((flows[head].q - qd).abs() <= 1e-9);
    let v2 = voltages(&m, &order, &flows);
    for pos in 1..m.buses.len() {
        let (parent, _) = order.parent[pos].unwrap();
        assert!(v2[pos] < v2[parent], "bus {}", m.buses[pos].id);
    }
}

#[test]
fn controls_cut_losses() {
    let m = case33();
    let order = validate_radial(&m).unwrap();
    let fixed: Vec<(f64, f64)> = m.buses.iter().map(|b| (b.p_load, b.q_load)).collect();
    let controls: Vec<ControlBounds> = [6, 18, 25, 33]
        .iter()
        .map(|&bus| ControlBounds {
            bus,
            p_min: -0.05,
            p_max: 0.05,
            q_min: -0.05,
            q_max: 0.05,
        })
        .collect();
    let none: [EnsembleSite; 0] = [];
    let ctx = DispatchContext::new(&m, &order, fixed.clone(), &none, &controls).unwrap();
    let d = ctx.solve_dual(0, 1.0, &[], &[]).unwrap();
    let base = losses(&m, &tree_flows(&m, &order, &fixed));
    assert!(d.loss < base, "{} vs {base}", d.loss);
    assert!(d.p_ctrl.iter().any(|&v| v != 0.0));
}

#[test]
fn parse_errors_name_the_line() {
    let text = case33_text();
    let broken = text.replacen("\t2\t1\t0.1\t0.06", "\t2\t1\tabc\t0.06", 1);
    assert_ne!(broken, text);
    let line = broken.lines().position(|l| l.contains("abc")).unwrap() + 1;
    match parse_matpower(&broken) {
        Err(IngestError::Parse { line: got, .. }) => assert_eq!(got, line),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #[test]
    fn random_radial_grids_round_trip(n in 2usize..40, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let buses = (1..=n)
            .map(|id| tcl_dispatch_core::Bus {
                id,
                p_load: r.random_range(0.0..0.1),
                q_load: r.random_range(-0.05..0.05),
                v_min: 0.9,
                v_max: 1.1,
            })
            .collect();
        let branches = (2..=n)
            .map(|to| tcl_dispatch_core::Branch { from: r.random_range(1..to), to, r: r.random::<f64>() * 0.1, x: r.random::<f64>() * 0.1 })
            .collect();
        let m = GridModel::new(buses, branches, 1, 1.0 + r.random::<f64>() * 0.05, 10.0).unwrap();
        prop_assert_eq!(parse_grid(&write_grid(&m)).unwrap(), m);
    }
}
