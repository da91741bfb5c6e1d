//! LinDistFlow sweeps over a radial feeder.
//!
//! Injections are consumption-positive per-unit power at each bus; a branch
//! flow is oriented from the slack side towards the bus it feeds.

use alloc::vec;
use alloc::vec::Vec;

use crate::grid::{GridModel, TreeOrder};

/// Active and reactive flow on one branch (p.u.).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Flow {
    pub p: f64,
    pub q: f64,
}

/// Flow on each branch equals the total consumption of the subtree it feeds.
///
/// `injections` is indexed by bus position in `model.buses`; the result by
/// branch position. The slack's own injection never enters a branch.
pub fn tree_flows(model: &GridModel, order: &TreeOrder, injections: &[(f64, f64)]) -> Vec<Flow> {
    debug_assert_eq!(injections.len(), model.buses.len());
    let mut acc: Vec<(f64, f64)> = injections.to_vec();
    let mut flows = vec![Flow::default(); model.branches.len()];
    for &bus in order.order.iter().rev() {
        if let Some((parent, branch)) = order.parent[bus] {
            let (p, q) = acc[bus];
            flows[branch] = Flow { p, q };
            acc[parent].0 += p;
            acc[parent].1 += q;
        }
    }
    flows
}

/// Squared voltage magnitudes, `v_j^2 = v_i^2 - 2 (r p_ij + x q_ij)` down
/// every branch.
pub fn voltages(model: &GridModel, order: &TreeOrder, flows: &[Flow]) -> Vec<f64> {
    let mut v2 = vec![0.0; model.buses.len()];
    v2[order.slack()] = model.v0 * model.v0;
    for &bus in &order.order[1..] {
        let (parent, branch) = order.parent[bus].expect("non-slack bus has a parent");
        let br = &model.branches[branch];
        let f = flows[branch];
        v2[bus] = v2[parent] - 2.0 * (br.r * f.p + br.x * f.q);
    }
    v2
}

/// Active losses `sum r (p^2 + q^2) / v0^2`, with every sending-end voltage
/// taken at the slack reference.
pub fn losses(model: &GridModel, flows: &[Flow]) -> f64 {
    let v0sq = model.v0 * model.v0;
    model
        .branches
        .iter()
        .zip(flows)
        .map(|(br, f)| br.r * (f.p * f.p + f.q * f.q))
        .sum::<f64>()
        / v0sq
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{validate_radial, Branch, Bus};

    fn chain(r: f64, x: f64) -> GridModel {
        let bus = |id| Bus {
            id,
            p_load: 0.0,
            q_load: 0.0,
            v_min: 0.0,
            v_max: 2.0,
        };
        GridModel::new(vec![bus(1), bus(2)], vec![Branch { from: 1, to: 2, r, x }], 1, 1.0, 1.0).unwrap()
    }

    #[test]
    fn zero_injection_is_flat() {
        let m = chain(0.1, 0.1);
        let t = validate_radial(&m).unwrap();
        let f = tree_flows(&m, &t, &[(0.0, 0.0); 2]);
        assert_eq!(f, vec![Flow::default()]);
        assert_eq!(voltages(&m, &t, &f), vec![1.0, 1.0]);
        assert_eq!(losses(&m, &f), 0.0);
    }

    #[test]
    fn two_bus_hand_values() {
        let m = chain(0.1, 0.1);
        let t = validate_radial(&m).unwrap();
        let f = tree_flows(&m, &t, &[(0.0, 0.0), (0.1, 0.05)]);
        assert_eq!(f[0], Flow { p: 0.1, q: 0.05 });
        let v = voltages(&m, &t, &f);
        assert!((v[1] - 0.97).abs() < 1e-15);

        let one = [Flow { p: 1.0, q: 0.0 }];
        assert!((losses(&m, &one) - 0.1).abs() < 1e-15);
        let two = [Flow { p: 2.0, q: 0.0 }];
        assert!((losses(&m, &two) - 4.0 * losses(&m, &one)).abs() < 1e-15);
    }
}
