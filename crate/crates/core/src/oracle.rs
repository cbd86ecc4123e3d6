//! Exact reference solvers for small instances and a tour verifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{Instance, ProblemKind};
use crate::search::ResultRecord;
use crate::solution::{capacity_violation, check_single_cycle, objective, Tour};

pub const HELD_KARP_MAX_NODES: usize = 13;
pub const EXACT_CVRP_MAX_CUSTOMERS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub cost: f64,
    pub tour: Tour,
    pub nodes: usize,
    pub method: String,
}

impl OracleResult {
    pub fn record(&self, id: &str) -> ResultRecord {
        ResultRecord {
            id: id.to_string(),
            best_cost: self.cost,
            best_tour: self.tour.to_json_sequence(),
            steps: 0,
            aug_events: Vec::new(),
            wall_ms: 0.0,
            feasible: true,
            method: Some(self.method.clone()),
        }
    }
}

/// Optimal cycle through `nodes` (indices into the instance), returned as a
/// visiting order starting at `nodes[0]`.
fn held_karp_subset(instance: &Instance, nodes: &[usize]) -> (f64, Vec<usize>) {
    let m = nodes.len();
    if m <= 3 {
        let cost = (0..m).map(|i| instance.dist(nodes[i], nodes[(i + 1) % m])).sum();
        return (if m < 2 { 0.0 } else { cost }, nodes.to_vec());
    }
    // dp[mask][j]: shortest path from nodes[0] through `mask` (over nodes 1..m) ending at j.
    let k = m - 1;
    let full = 1usize << k;
    let mut dp = vec![f64::INFINITY; full * k];
    let mut parent = vec![usize::MAX; full * k];
    for j in 0..k {
        dp[(1 << j) * k + j] = instance.dist(nodes[0], nodes[j + 1]);
    }
    for mask in 1..full {
        for j in 0..k {
            if mask & (1 << j) == 0 {
                continue;
            }
            let cur = dp[mask * k + j];
            if !cur.is_finite() {
                continue;
            }
            for nxt in 0..k {
                if mask & (1 << nxt) != 0 {
                    continue;
                }
                let nm = mask | (1 << nxt);
                let c = cur + instance.dist(nodes[j + 1], nodes[nxt + 1]);
                if c < dp[nm * k + nxt] {
                    dp[nm * k + nxt] = c;
                    parent[nm * k + nxt] = j;
                }
            }
        }
    }
    let last_mask = full - 1;
    let (mut best, mut end) = (f64::INFINITY, 0);
    for j in 0..k {
        let c = dp[last_mask * k + j] + instance.dist(nodes[j + 1], nodes[0]);
        if c < best {
            best = c;
            end = j;
        }
    }
    let mut order = Vec::with_capacity(m);
    let (mut mask, mut j) = (last_mask, end);
    while j != usize::MAX {
        order.push(nodes[j + 1]);
        let p = parent[mask * k + j];
        mask &= !(1 << j);
        j = p;
    }
    order.push(nodes[0]);
    order.reverse();
    (best, order)
}

pub fn held_karp(instance: &Instance) -> Result<OracleResult> {
    if instance.kind != ProblemKind::Tsp {
        return Err(Error::InvalidArgument("held_karp expects a TSP instance".into()));
    }
    let n = instance.n_nodes();
    if n > HELD_KARP_MAX_NODES {
        return Err(Error::SizeLimit(format!("{n} nodes exceed the limit of {HELD_KARP_MAX_NODES}")));
    }
    if n < 3 {
        return Err(Error::InvalidArgument("at least 3 nodes are required".into()));
    }
    let nodes: Vec<usize> = (0..n).collect();
    let (_, order) = held_karp_subset(instance, &nodes);
    let tour = Tour::from_sequence(&order)?;
    Ok(OracleResult { cost: objective(instance, &tour), tour, nodes: n, method: "held_karp".into() })
}

/// Exact CVRP optimum by dynamic programming over customer subsets, with
/// every route ordered optimally and at most one route per depot copy.
pub fn exact_cvrp(instance: &Instance) -> Result<OracleResult> {
    if instance.kind != ProblemKind::Cvrp {
        return Err(Error::InvalidArgument("exact_cvrp expects a CVRP instance".into()));
    }
    let nc = instance.n_customers();
    if nc > EXACT_CVRP_MAX_CUSTOMERS {
        return Err(Error::SizeLimit(format!("{nc} customers exceed the limit of {EXACT_CVRP_MAX_CUSTOMERS}")));
    }
    let dep = instance.n_depot_copies;
    let customers: Vec<usize> = (dep..dep + nc).collect();
    let full = 1usize << nc;
    let mut route_cost = vec![f64::INFINITY; full];
    let mut route_order: Vec<Vec<usize>> = vec![Vec::new(); full];
    for mask in 1..full {
        let load: u64 = (0..nc).filter(|i| mask & (1 << i) != 0).map(|i| instance.demand(customers[i]) as u64).sum();
        if load > instance.capacity as u64 {
            continue;
        }
        let mut nodes = vec![0];
        nodes.extend((0..nc).filter(|i| mask & (1 << i) != 0).map(|i| customers[i]));
        let (c, order) = held_karp_subset(instance, &nodes);
        route_cost[mask] = c;
        route_order[mask] = order[1..].to_vec();
    }
    // best[r][mask]: cheapest cover of `mask` with exactly r routes.
    let mut best = vec![vec![f64::INFINITY; full]; dep + 1];
    let mut choice = vec![vec![0usize; full]; dep + 1];
    best[0][0] = 0.0;
    for r in 1..=dep {
        for mask in 1..full {
            let low = mask & mask.wrapping_neg();
            let rest = mask ^ low;
            // Enumerate submasks of `rest`, always including the lowest bit.
            let mut sub = rest;
            loop {
                let route = sub | low;
                let c = route_cost[route] + best[r - 1][mask ^ route];
                if c < best[r][mask] {
                    best[r][mask] = c;
                    choice[r][mask] = route;
                }
                if sub == 0 {
                    break;
                }
                sub = (sub - 1) & rest;
            }
        }
    }
    let r_best = (1..=dep)
        .filter(|&r| best[r][full - 1].is_finite())
        .min_by(|&a, &b| best[a][full - 1].total_cmp(&best[b][full - 1]))
        .ok_or_else(|| Error::InfeasibleConstruction("no capacity-feasible partition".into()))?;
    let mut seq = Vec::with_capacity(instance.n_nodes());
    let (mut mask, mut r, mut depot) = (full - 1, r_best, 0);
    while r > 0 {
        let route = choice[r][mask];
        seq.push(depot);
        seq.extend_from_slice(&route_order[route]);
        depot += 1;
        mask ^= route;
        r -= 1;
    }
    seq.extend(depot..dep);
    let tour = Tour::from_sequence(&seq)?;
    Ok(OracleResult { cost: objective(instance, &tour), tour, nodes: instance.n_nodes(), method: "exact_cvrp".into() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub length_ok: bool,
    pub single_cycle: bool,
    pub covers_all: bool,
    /// Capacity violation (CVRP only).
    pub violation: Option<f64>,
    pub failures: Vec<String>,
}

impl VerifyReport {
    /// Structural validity; capacity is reported separately.
    pub fn is_valid_tour(&self) -> bool {
        self.length_ok && self.single_cycle && self.covers_all
    }

    pub fn is_feasible(&self) -> bool {
        self.is_valid_tour() && self.violation.is_none_or(|v| v <= 0.0)
    }
}

/// Checks a raw successor array against the instance.
pub fn verify_successors(instance: &Instance, succ: &[usize]) -> VerifyReport {
    let n = instance.n_nodes();
    let mut failures = Vec::new();
    let length_ok = succ.len() == n;
    if !length_ok {
        failures.push(format!("{} successors for {n} nodes", succ.len()));
    }
    let mut seen = vec![false; n];
    for &s in succ {
        if s < n {
            seen[s] = true;
        }
    }
    let covers_all = length_ok && seen.iter().all(|&b| b);
    if !covers_all {
        failures.push("not every node is visited exactly once".into());
    }
    let single_cycle = match check_single_cycle(succ) {
        Ok(()) => true,
        Err(e) => {
            failures.push(e);
            false
        }
    };
    let violation = if instance.kind == ProblemKind::Cvrp && single_cycle && covers_all && length_ok {
        Tour::from_successors(succ.to_vec()).ok().and_then(|t| capacity_violation(instance, &t).ok())
    } else {
        None
    };
    if let Some(v) = violation {
        if v > 0.0 {
            failures.push(format!("capacity violated by {v}"));
        }
    }
    VerifyReport { length_ok, single_cycle, covers_all, violation, failures }
}

pub fn verify_tour(instance: &Instance, tour: &Tour) -> VerifyReport {
    verify_successors(instance, tour.successors())
}
