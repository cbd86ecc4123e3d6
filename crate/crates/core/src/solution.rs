//! Tours, objective, capacity accounting and raw node features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{Instance, ProblemKind};
use crate::rng::Rng;

/// A directed Hamiltonian cycle stored as successor/predecessor arrays.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Tour {
    succ: Vec<usize>,
    pred: Vec<usize>,
}

impl Tour {
    /// Builds a tour from a visiting order.
    pub fn from_sequence(seq: &[usize]) -> Result<Self> {
        let n = seq.len();
        if n < 2 {
            return Err(Error::InvalidArgument("a tour needs at least 2 nodes".into()));
        }
        let mut seen = vec![false; n];
        for &v in seq {
            if v >= n || std::mem::replace(&mut seen[v], true) {
                return Err(Error::InvalidArgument(format!("sequence is not a permutation of 0..{n}")));
            }
        }
        let mut succ = vec![0; n];
        for w in 0..n {
            succ[seq[w]] = seq[(w + 1) % n];
        }
        Tour::from_successors(succ)
    }

    /// Validates that `succ` is a single cycle covering every node.
    pub fn from_successors(succ: Vec<usize>) -> Result<Self> {
        check_single_cycle(&succ).map_err(Error::InvalidArgument)?;
        let mut pred = vec![0; succ.len()];
        for (i, &s) in succ.iter().enumerate() {
            pred[s] = i;
        }
        Ok(Tour { succ, pred })
    }

    pub fn len(&self) -> usize {
        self.succ.len()
    }

    pub fn is_empty(&self) -> bool {
        self.succ.is_empty()
    }

    pub fn succ(&self, node: usize) -> usize {
        self.succ[node]
    }

    pub fn pred(&self, node: usize) -> usize {
        self.pred[node]
    }

    pub fn successors(&self) -> &[usize] {
        &self.succ
    }

    /// Visiting order starting at `start`.
    pub fn sequence_from(&self, start: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut v = start;
        for _ in 0..self.len() {
            out.push(v);
            v = self.succ[v];
        }
        out
    }

    pub fn sequence(&self) -> Vec<usize> {
        self.sequence_from(0)
    }

    pub fn reversed(&self) -> Tour {
        Tour { succ: self.pred.clone(), pred: self.succ.clone() }
    }

    /// Orientation-free key: the sequence from node 0 in whichever direction
    /// visits the smaller neighbour of 0 first.
    pub fn undirected_key(&self) -> Vec<usize> {
        if self.succ[0] <= self.pred[0] {
            self.sequence_from(0)
        } else {
            self.reversed().sequence_from(0)
        }
    }

    /// Undirected edge set, each edge as `(min, max)`, sorted.
    pub fn edge_set(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<_> = self.succ.iter().enumerate().map(|(i, &j)| (i.min(j), i.max(j))).collect();
        e.sort_unstable();
        e
    }

    /// Position of every node when walking from `start`.
    pub fn positions_from(&self, start: usize) -> Vec<usize> {
        let mut pos = vec![0; self.len()];
        for (k, v) in self.sequence_from(start).into_iter().enumerate() {
            pos[v] = k;
        }
        pos
    }

    /// Node order for serialization: from node 0 (the first depot copy for CVRP).
    pub fn to_json_sequence(&self) -> Vec<usize> {
        self.sequence()
    }

    /// Applies a node relabeling: node `i` becomes `perm[i]`.
    pub fn relabeled(&self, perm: &[usize]) -> Tour {
        let mut succ = vec![0; self.len()];
        for i in 0..self.len() {
            succ[perm[i]] = perm[self.succ[i]];
        }
        let mut pred = vec![0; succ.len()];
        for (i, &s) in succ.iter().enumerate() {
            pred[s] = i;
        }
        Tour { succ, pred }
    }
}

impl Serialize for Tour {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json_sequence().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tour {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let seq = Vec::<usize>::deserialize(d)?;
        Tour::from_sequence(&seq).map_err(serde::de::Error::custom)
    }
}

/// Returns an error message unless `succ` is one cycle through all nodes.
pub fn check_single_cycle(succ: &[usize]) -> std::result::Result<(), String> {
    let n = succ.len();
    if n == 0 {
        return Err("empty successor array".into());
    }
    let mut indeg = vec![0u8; n];
    for &s in succ {
        if s >= n {
            return Err(format!("successor {s} out of range"));
        }
        indeg[s] += 1;
        if indeg[s] > 1 {
            return Err(format!("node {s} has two predecessors"));
        }
    }
    let mut v = 0;
    for step in 1..=n {
        v = succ[v];
        if v == 0 && step < n {
            return Err(format!("cycle through node 0 has length {step} < {n}"));
        }
    }
    if v != 0 {
        return Err("successor walk does not return to node 0".into());
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Feasibility {
    Feasible,
    EpsFeasible,
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityClass {
    pub class: Feasibility,
    pub violation: f64,
}

impl FeasibilityClass {
    pub fn is_feasible(&self) -> bool {
        self.class == Feasibility::Feasible
    }
}

/// Random initial solution. CVRP customers are split greedily into routes
/// so that the result is capacity-feasible.
pub fn initial_tour(instance: &Instance, rng: &mut Rng) -> Result<Tour> {
    match instance.kind {
        ProblemKind::Tsp => {
            let mut seq: Vec<usize> = (0..instance.n_nodes()).collect();
            seq.shuffle(rng);
            Tour::from_sequence(&seq)
        }
        ProblemKind::Cvrp => {
            let d = instance.n_depot_copies;
            let mut customers: Vec<usize> = (d..instance.n_nodes()).collect();
            customers.shuffle(rng);
            let mut seq = Vec::with_capacity(instance.n_nodes());
            let mut next_depot = 1;
            let mut load = 0u64;
            seq.push(0);
            for c in customers {
                let dem = instance.demand(c) as u64;
                if load + dem > instance.capacity as u64 {
                    if next_depot >= d {
                        return Err(Error::InfeasibleConstruction(format!(
                            "instance {}: {d} depot copies are not enough for a feasible split",
                            instance.id
                        )));
                    }
                    seq.push(next_depot);
                    next_depot += 1;
                    load = 0;
                }
                seq.push(c);
                load += dem;
            }
            seq.extend(next_depot..d);
            Tour::from_sequence(&seq)
        }
    }
}

pub fn objective(instance: &Instance, tour: &Tour) -> f64 {
    (0..tour.len()).map(|i| instance.dist(i, tour.succ(i))).sum()
}

/// Customer loads of every route, in order of appearance from depot copy 0.
pub fn route_loads(instance: &Instance, tour: &Tour) -> Vec<u64> {
    let mut loads = Vec::new();
    let mut load = 0u64;
    let mut v = tour.succ(0);
    for _ in 0..tour.len() {
        if instance.is_depot(v) {
            loads.push(load);
            load = 0;
        } else {
            load += instance.demand(v) as u64;
        }
        v = tour.succ(v);
    }
    loads
}

/// Sum over routes of the load in excess of capacity, as a fraction of capacity.
pub fn capacity_violation(instance: &Instance, tour: &Tour) -> Result<f64> {
    if instance.kind != ProblemKind::Cvrp {
        return Err(Error::InvalidArgument("capacity violation is defined for CVRP only".into()));
    }
    let cap = instance.capacity as u64;
    let excess: u64 = route_loads(instance, tour).into_iter().map(|l| l.saturating_sub(cap)).sum();
    Ok(excess as f64 / cap as f64)
}

pub fn feasibility_class(instance: &Instance, tour: &Tour, eps: f64) -> FeasibilityClass {
    let violation = match instance.kind {
        ProblemKind::Tsp => 0.0,
        ProblemKind::Cvrp => capacity_violation(instance, tour).unwrap_or(0.0),
    };
    classify(violation, eps)
}

pub fn classify(violation: f64, eps: f64) -> FeasibilityClass {
    let class = if violation <= 0.0 {
        Feasibility::Feasible
    } else if violation <= eps {
        Feasibility::EpsFeasible
    } else {
        Feasibility::Infeasible
    };
    FeasibilityClass { class, violation }
}

/// Row-major per-node feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub rows: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl NodeFeatures {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

pub fn feature_width(kind: ProblemKind, vi_features: bool) -> usize {
    match kind {
        ProblemKind::Tsp => 2,
        ProblemKind::Cvrp if vi_features => 8,
        ProblemKind::Cvrp => 6,
    }
}

/// Per-axis integer offset `floor(min)`. Coordinates in the unit square are
/// untouched, and any of their augmented images is moved back into it.
fn grid_shift(coords: &[[f64; 2]]) -> [f64; 2] {
    let mut lo = [f64::INFINITY; 2];
    for c in coords {
        lo[0] = lo[0].min(c[0]);
        lo[1] = lo[1].min(c[1]);
    }
    lo.map(|v| if v.is_finite() { v.floor() } else { 0.0 })
}

/// TSP: `[x, y]`, translated by [`grid_shift`]. CVRP: `[x, y, demand, prefix incl., suffix excl., is_customer]`
/// with demands scaled by capacity, plus the two violation flags
/// `[prefix excl. > cap, prefix incl. > cap]` when `vi_features` is set.
pub fn node_features(instance: &Instance, tour: &Tour, vi_features: bool) -> NodeFeatures {
    let n = tour.len();
    let width = feature_width(instance.kind, vi_features);
    let mut data = vec![0.0; n * width];
    let shift = grid_shift(&instance.coords);
    for i in 0..n {
        data[i * width] = instance.coords[i][0] - shift[0];
        data[i * width + 1] = instance.coords[i][1] - shift[1];
    }
    if instance.kind == ProblemKind::Cvrp {
        let cap = instance.capacity as f64;
        // Walk each route from its depot, recording prefix loads, then fill suffixes.
        let mut v = 0;
        let mut route: Vec<usize> = Vec::new();
        let flush = |route: &mut Vec<usize>, data: &mut Vec<f64>| {
            let total: u64 = route.iter().map(|&c| instance.demand(c) as u64).sum();
            let mut prefix = 0u64;
            for &c in route.iter() {
                let excl = prefix;
                prefix += instance.demand(c) as u64;
                let row = &mut data[c * width..(c + 1) * width];
                row[2] = instance.demand(c) as f64 / cap;
                row[3] = prefix as f64 / cap;
                row[4] = (total - prefix) as f64 / cap;
                row[5] = 1.0;
                if vi_features {
                    row[6] = f64::from(u8::from(excl > instance.capacity as u64));
                    row[7] = f64::from(u8::from(prefix > instance.capacity as u64));
                }
            }
            route.clear();
        };
        for _ in 0..n {
            v = tour.succ(v);
            if instance.is_depot(v) {
                flush(&mut route, &mut data);
            } else {
                route.push(v);
            }
        }
    }
    NodeFeatures { rows: n, width, data }
}
