//! Basis-move factorization of k-opt exchanges.
//!
//! An action starts with an S-move that drops the edge leaving the anchor,
//! turning the tour into an open Hamiltonian path. Each I-move adds an edge
//! from the lower-ranked path endpoint (the tail) to a node of higher rank,
//! drops that node's outgoing edge and reverses the segment in between. The
//! E-move closes the path again. Ranks are forward distances from the anchor
//! along the original tour and stay frozen for the whole action.

use std::collections::HashSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::solution::Tour;

const OPEN: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankTable {
    pub anchor: usize,
    rank: Vec<usize>,
    by_rank: Vec<usize>,
}

impl RankTable {
    pub fn rank(&self, node: usize) -> usize {
        self.rank[node]
    }

    pub fn node_at(&self, rank: usize) -> usize {
        self.by_rank[rank]
    }

    pub fn ranks(&self) -> &[usize] {
        &self.rank
    }

    pub fn len(&self) -> usize {
        self.rank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rank.is_empty()
    }
}

pub fn rank_table(tour: &Tour, anchor: usize) -> RankTable {
    let by_rank = tour.sequence_from(anchor);
    let mut rank = vec![0; tour.len()];
    for (r, &v) in by_rank.iter().enumerate() {
        rank[v] = r;
    }
    RankTable { anchor, rank, by_rank }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MoveType {
    S,
    I,
    E,
    Null,
}

/// One decoding step after the S-move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    Node(usize),
    /// E-move forced because every node was masked; probability 1.
    Enforced,
    /// Padding after the action terminated.
    Null,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionTrace {
    pub anchor: usize,
    /// Exactly `K - 1` entries.
    pub selections: Vec<Selection>,
    /// Exactly `K` entries, starting with `S`.
    pub move_types: Vec<MoveType>,
}

impl ActionTrace {
    pub fn k(&self) -> usize {
        self.selections.len() + 1
    }

    /// Number of I-moves in the trace.
    pub fn i_moves(&self) -> usize {
        self.move_types.iter().filter(|&&m| m == MoveType::I).count()
    }
}

/// In-flight action: the working path plus the rank bookkeeping.
#[derive(Debug, Clone)]
pub struct DecodeState {
    ranks: RankTable,
    /// Working path successors; `OPEN` marks the tail's missing out-edge.
    path: Vec<usize>,
    tail: usize,
    head: usize,
    /// Rank bound: valid targets have rank >= `bound`.
    bound: usize,
    step: usize,
    terminated: bool,
}

impl DecodeState {
    pub fn ranks(&self) -> &RankTable {
        &self.ranks
    }

    pub fn anchor(&self) -> usize {
        self.ranks.anchor
    }

    pub fn tail(&self) -> usize {
        self.tail
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn head_rank(&self) -> usize {
        self.bound
    }

    /// Index of the next basis move, 1-based (S-move is 1).
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn n_nodes(&self) -> usize {
        self.path.len()
    }

    /// True when no node can be selected and the E-move is forced.
    pub fn e_move_enforced(&self) -> bool {
        self.bound >= self.path.len()
    }

    /// Current successor array once the action has terminated.
    pub fn into_tour(self) -> Result<Tour> {
        if !self.terminated {
            return Err(Error::InvalidState("action has not terminated".into()));
        }
        Tour::from_successors(self.path).map_err(|e| Error::Internal(format!("k-opt produced a broken tour: {e}")))
    }
}

/// Applies the S-move at `anchor`.
pub fn begin_action(tour: &Tour, anchor: usize) -> DecodeState {
    let ranks = rank_table(tour, anchor);
    let mut path = tour.successors().to_vec();
    let head = path[anchor];
    path[anchor] = OPEN;
    DecodeState { ranks, path, tail: anchor, head, bound: 1, step: 2, terminated: false }
}

/// Mask of nodes selectable at the current step. With `allow_e` false the
/// rank-bound node (the E-move target) is excluded too.
pub fn valid_targets_with(state: &DecodeState, allow_e: bool) -> Result<Vec<bool>> {
    if state.terminated {
        return Err(Error::InvalidState("action already terminated".into()));
    }
    let lo = if allow_e { state.bound } else { state.bound + 1 };
    Ok(state.ranks.rank.iter().map(|&r| r >= lo).collect())
}

pub fn valid_targets(state: &DecodeState) -> Result<Vec<bool>> {
    valid_targets_with(state, true)
}

/// Executes one basis move after the S-move.
pub fn advance(state: &mut DecodeState, selection: Selection) -> Result<MoveType> {
    if state.terminated {
        return match selection {
            Selection::Null => {
                state.step += 1;
                Ok(MoveType::Null)
            }
            _ => Err(Error::InvalidMove("selection after the action terminated".into())),
        };
    }
    let n = state.path.len();
    match selection {
        Selection::Null => Err(Error::InvalidMove("null selection before termination".into())),
        Selection::Enforced => {
            if !state.e_move_enforced() {
                return Err(Error::InvalidMove("E-move is not enforced in this state".into()));
            }
            close(state);
            Ok(MoveType::E)
        }
        Selection::Node(v) => {
            if v >= n {
                return Err(Error::InvalidMove(format!("node {v} out of range")));
            }
            let r = state.ranks.rank[v];
            if r < state.bound {
                return Err(Error::InvalidMove(format!("node {v} has rank {r} < bound {}", state.bound)));
            }
            if r == state.bound {
                close(state);
                return Ok(MoveType::E);
            }
            // I-move: tail -> v, drop v -> w, reverse head..v.
            let w = state.path[v];
            let mut prev = OPEN;
            let mut cur = state.head;
            loop {
                let next = state.path[cur];
                state.path[cur] = prev;
                if cur == v {
                    break;
                }
                prev = cur;
                cur = next;
            }
            state.path[state.tail] = v;
            state.tail = state.head;
            state.head = w;
            state.bound = r + 1;
            state.step += 1;
            Ok(MoveType::I)
        }
    }
}

fn close(state: &mut DecodeState) {
    state.path[state.tail] = state.head;
    state.terminated = true;
    state.step += 1;
}

/// Replays a complete trace on `tour`, adding the implicit E-move when the
/// last basis move was an I-move.
pub fn finalize(tour: &Tour, trace: &ActionTrace) -> Result<Tour> {
    if trace.anchor >= tour.len() {
        return Err(Error::InvalidMove(format!("anchor {} out of range", trace.anchor)));
    }
    let mut state = begin_action(tour, trace.anchor);
    for (k, &sel) in trace.selections.iter().enumerate() {
        // Null padding on an open path stands for the implicit E-move.
        if sel == Selection::Null && !state.terminated {
            close(&mut state);
            continue;
        }
        let mt = advance(&mut state, sel)?;
        if let Some(&expected) = trace.move_types.get(k + 1) {
            if expected != mt {
                return Err(Error::InvalidMove(format!("step {} recorded as {expected:?} but replays as {mt:?}", k + 2)));
            }
        }
    }
    if !state.terminated {
        close(&mut state);
    }
    state.into_tour()
}

/// Samples a `k`-step action uniformly over valid targets at every step.
pub fn random_trace(tour: &Tour, k: usize, rng: &mut Rng) -> Result<ActionTrace> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("K must be at least 2, got {k}")));
    }
    let anchor = rng.gen_range(0..tour.len());
    let mut state = begin_action(tour, anchor);
    let mut selections = Vec::with_capacity(k - 1);
    let mut move_types = vec![MoveType::S];
    for _ in 0..k - 1 {
        let sel = if state.terminated {
            Selection::Null
        } else if state.e_move_enforced() {
            Selection::Enforced
        } else {
            let mask = valid_targets(&state)?;
            let choices: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            Selection::Node(choices[rng.gen_range(0..choices.len())])
        };
        move_types.push(advance(&mut state, sel)?);
        selections.push(sel);
    }
    Ok(ActionTrace { anchor, selections, move_types })
}

/// Number of undirected edges of `after` absent from `before`.
pub fn edges_changed(before: &Tour, after: &Tour) -> usize {
    let old: HashSet<(usize, usize)> = before.edge_set().into_iter().collect();
    after.edge_set().into_iter().filter(|e| !old.contains(e)).count()
}

pub const NEIGHBORHOOD_MAX_NODES: usize = 12;

/// Every tour reachable with at most `k` basis moves from any anchor,
/// deduplicated as undirected cycles.
pub fn neighborhood(tour: &Tour, k: usize) -> Result<Vec<Tour>> {
    if tour.len() > NEIGHBORHOOD_MAX_NODES {
        return Err(Error::SizeLimit(format!("neighborhood enumeration is capped at {NEIGHBORHOOD_MAX_NODES} nodes")));
    }
    if k < 2 {
        return Err(Error::InvalidArgument("K must be at least 2".into()));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for anchor in 0..tour.len() {
        let state = begin_action(tour, anchor);
        explore(state, k - 1, &mut seen, &mut out)?;
    }
    Ok(out)
}

fn explore(state: DecodeState, remaining: usize, seen: &mut HashSet<Vec<usize>>, out: &mut Vec<Tour>) -> Result<()> {
    if state.terminated || remaining == 0 {
        let mut s = state;
        if !s.terminated {
            close(&mut s);
        }
        let t = s.into_tour()?;
        if seen.insert(t.undirected_key()) {
            out.push(t);
        }
        return Ok(());
    }
    if state.e_move_enforced() {
        let mut s = state;
        advance(&mut s, Selection::Enforced)?;
        return explore(s, remaining - 1, seen, out);
    }
    let mask = valid_targets(&state)?;
    for (v, ok) in mask.into_iter().enumerate() {
        if ok {
            let mut s = state.clone();
            advance(&mut s, Selection::Node(v))?;
            explore(s, remaining - 1, seen, out)?;
        }
    }
    Ok(())
}
