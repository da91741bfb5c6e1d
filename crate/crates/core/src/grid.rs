//! Radial feeder topology.
//!
//! All electrical quantities are per-unit on `base_mva`. Loads are
//! consumption-positive.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, RadialityError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: usize,
    /// Fixed active load (p.u.).
    pub p_load: f64,
    /// Fixed reactive load (p.u.).
    pub q_load: f64,
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridModel {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    /// Id of the slack bus.
    pub slack_bus: usize,
    /// Reference voltage magnitude at the slack (p.u.).
    pub v0: f64,
    pub base_mva: f64,
}

impl GridModel {
    /// Builds a model and checks every structural invariant, radiality
    /// included.
    pub fn new(
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        slack_bus: usize,
        v0: f64,
        base_mva: f64,
    ) -> Result<Self> {
        let model = GridModel {
            buses,
            branches,
            slack_bus,
            v0,
            base_mva,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_mva > 0.0) {
            return Err(Error::Model(format!("base_mva must be positive, got {}", self.base_mva)));
        }
        let mut seen = BTreeMap::new();
        for (k, bus) in self.buses.iter().enumerate() {
            if seen.insert(bus.id, k).is_some() {
                return Err(Error::Model(format!("duplicate bus id {}", bus.id)));
            }
            if !(bus.v_min <= bus.v_max) || bus.v_min < 0.0 {
                return Err(Error::Model(format!(
                    "bus {} has voltage bounds [{}, {}]",
                    bus.id, bus.v_min, bus.v_max
                )));
            }
        }
        for br in &self.branches {
            for end in [br.from, br.to] {
                if !seen.contains_key(&end) {
                    return Err(Error::Model(format!(
                        "branch {}-{} references unknown bus {end}",
                        br.from, br.to
                    )));
                }
            }
            if br.from == br.to {
                return Err(Error::Model(format!("branch {}-{} is a self loop", br.from, br.to)));
            }
            if !(br.r >= 0.0) || !(br.x >= 0.0) {
                return Err(Error::Model(format!(
                    "branch {}-{} has negative impedance (r={}, x={})",
                    br.from, br.to, br.r, br.x
                )));
            }
        }
        let slack = self
            .bus(self.slack_bus)
            .ok_or_else(|| Error::Model(format!("slack bus {} does not exist", self.slack_bus)))?;
        if !(slack.v_min <= self.v0 && self.v0 <= slack.v_max) {
            return Err(Error::Model(format!(
                "slack voltage {} outside [{}, {}]",
                self.v0, slack.v_min, slack.v_max
            )));
        }
        validate_radial(self).map(|_| ())
    }

    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn bus(&self, id: usize) -> Option<&Bus> {
        self.buses.iter().find(|b| b.id == id)
    }

    pub fn total_load(&self) -> (f64, f64) {
        self.buses
            .iter()
            .fold((0.0, 0.0), |(p, q), b| (p + b.p_load, q + b.q_load))
    }
}

/// Breadth-first ordering of a radial model rooted at the slack bus.
///
/// Indices refer to positions in `GridModel::buses` / `GridModel::branches`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeOrder {
    /// Bus indices, slack first; every bus appears after its parent.
    pub order: Vec<usize>,
    /// `(parent bus index, branch index)` for every non-slack bus.
    pub parent: Vec<Option<(usize, usize)>>,
    /// Position of each bus in `order`.
    pub position: Vec<usize>,
}

impl TreeOrder {
    pub fn slack(&self) -> usize {
        self.order[0]
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Branch indices on the path from the slack down to `bus`.
    pub fn path_branches(&self, bus: usize) -> Vec<usize> {
        let mut path = Vec::new();
        let mut cur = bus;
        while let Some((p, br)) = self.parent[cur] {
            path.push(br);
            cur = p;
        }
        path.reverse();
        path
    }

    /// The bus a branch feeds (the endpoint farther from the slack).
    pub fn child_of_branch(&self, branch: usize) -> Option<usize> {
        self.parent
            .iter()
            .position(|p| matches!(p, Some((_, b)) if *b == branch))
    }
}

/// Orders the buses from the slack outwards and assigns each non-slack bus
/// its unique parent branch.
pub fn validate_radial(model: &GridModel) -> Result<TreeOrder> {
    let n = model.buses.len();
    let index: BTreeMap<usize, usize> = model
        .buses
        .iter()
        .enumerate()
        .map(|(k, b)| (b.id, k))
        .collect();
    let root = *index
        .get(&model.slack_bus)
        .ok_or_else(|| Error::Model(format!("slack bus {} does not exist", model.slack_bus)))?;

    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (k, br) in model.branches.iter().enumerate() {
        let (Some(&a), Some(&b)) = (index.get(&br.from), index.get(&br.to)) else {
            return Err(Error::Model(format!("branch {}-{} has an unknown endpoint", br.from, br.to)));
        };
        adj[a].push((b, k));
        adj[b].push((a, k));
    }

    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    visited[root] = true;
    queue.push_back(root);
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &(v, br) in &adj[u] {
            if matches!(parent[u], Some((_, pb)) if pb == br) {
                continue;
            }
            if visited[v] {
                return Err(Error::Radiality(RadialityError::Cycle(cycle_ids(
                    model, &parent, u, v,
                ))));
            }
            visited[v] = true;
            parent[v] = Some((u, br));
            queue.push_back(v);
        }
    }
    if let Some(k) = visited.iter().position(|&seen| !seen) {
        // A component unreachable from the slack may itself contain a loop;
        // the disconnection is the more useful report.
        return Err(Error::Radiality(RadialityError::Disconnected(model.buses[k].id)));
    }

    let mut position = vec![0; n];
    for (pos, &b) in order.iter().enumerate() {
        position[b] = pos;
    }
    Ok(TreeOrder {
        order,
        parent,
        position,
    })
}

/// Closes the loop formed by the BFS tree plus the non-tree edge `u`-`v`.
fn cycle_ids(model: &GridModel, parent: &[Option<(usize, usize)>], u: usize, v: usize) -> Vec<usize> {
    let ancestors = |mut x: usize| {
        let mut chain = vec![x];
        while let Some((p, _)) = parent[x] {
            chain.push(p);
            x = p;
        }
        chain
    };
    let up = ancestors(u);
    let vp = ancestors(v);
    let meet = up
        .iter()
        .position(|x| vp.contains(x))
        .expect("both chains end at the root");
    let lca = up[meet];
    let mut cycle: Vec<usize> = up[..=meet].to_vec();
    let vpos = vp.iter().position(|&x| x == lca).expect("lca on both chains");
    cycle.extend(vp[..vpos].iter().rev());
    cycle.into_iter().map(|k| model.buses[k].id).collect()
}
