//! Feasibility-guided exploration: transition history, exploration
//! statistics, the entropy-style regulation measure and reward shaping.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solution::{Feasibility, FeasibilityClass};

pub const DEFAULT_HISTORY: usize = 25;
pub const ES_WIDTH: usize = 9;

/// Coefficients of the regulation measure.
pub const C1: f64 = 0.5;
pub const C2: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub from_feasible: bool,
    pub to_feasible: bool,
}

/// Ring buffer of the most recent feasibility transitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EsHistory {
    capacity: usize,
    records: VecDeque<TransitionRecord>,
}

impl Default for EsHistory {
    fn default() -> Self {
        EsHistory::new(DEFAULT_HISTORY)
    }
}

impl EsHistory {
    pub fn new(capacity: usize) -> Self {
        EsHistory { capacity: capacity.max(1), records: VecDeque::with_capacity(capacity.max(1)) }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.records.iter()
    }

    pub fn push(&mut self, record: TransitionRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
    }
}

/// Appends one transition; ε-feasible solutions count as infeasible.
pub fn record_transition(history: &mut EsHistory, from: Feasibility, to: Feasibility) {
    history.push(TransitionRecord {
        from_feasible: from == Feasibility::Feasible,
        to_feasible: to == Feasibility::Feasible,
    });
}

/// Exploration statistics in their fixed layout:
/// `[P(F,U), P(U,F), P(F,F), P(U,U), P(F|U), P(U|F), P(F|F), P(U|U), current_feasible]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsFeatures(pub [f64; ES_WIDTH]);

impl EsFeatures {
    pub fn joint_fu(&self) -> f64 {
        self.0[0]
    }
    pub fn joint_uf(&self) -> f64 {
        self.0[1]
    }
    pub fn joint_ff(&self) -> f64 {
        self.0[2]
    }
    pub fn joint_uu(&self) -> f64 {
        self.0[3]
    }
    /// P(next feasible | current infeasible).
    pub fn f_given_u(&self) -> f64 {
        self.0[4]
    }
    pub fn u_given_f(&self) -> f64 {
        self.0[5]
    }
    pub fn f_given_f(&self) -> f64 {
        self.0[6]
    }
    pub fn u_given_u(&self) -> f64 {
        self.0[7]
    }
    pub fn current_feasible(&self) -> bool {
        self.0[8] > 0.5
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Conditionals with an empty source default to 0.5.
pub fn exploration_stats(history: &EsHistory, current_feasible: bool) -> EsFeatures {
    let (mut ff, mut fu, mut uf, mut uu) = (0usize, 0usize, 0usize, 0usize);
    for r in history.records() {
        match (r.from_feasible, r.to_feasible) {
            (true, true) => ff += 1,
            (true, false) => fu += 1,
            (false, true) => uf += 1,
            (false, false) => uu += 1,
        }
    }
    let total = history.len();
    let joint = |c: usize| if total == 0 { 0.0 } else { c as f64 / total as f64 };
    let cond = |c: usize, src: usize| if src == 0 { 0.5 } else { c as f64 / src as f64 };
    let from_f = ff + fu;
    let from_u = uf + uu;
    EsFeatures([
        joint(fu),
        joint(uf),
        joint(ff),
        joint(uu),
        cond(uf, from_u),
        cond(fu, from_f),
        cond(ff, from_f),
        cond(uu, from_u),
        f64::from(u8::from(current_feasible)),
    ])
}

/// `Clip{1 - c1·log2[c2·π·e·p(1-p)], 0, 1}` with the default coefficients.
pub fn entropy_measure(p: f64) -> Result<f64> {
    entropy_measure_with(p, C1, C2)
}

pub fn entropy_measure_with(p: f64, c1: f64, c2: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
    }
    let q = p * (1.0 - p);
    if q <= 0.0 {
        return Ok(1.0);
    }
    let v = 1.0 - c1 * (c2 * std::f64::consts::PI * std::f64::consts::E * q).log2();
    Ok(v.clamp(0.0, 1.0))
}

/// Allowed capacity-violation fraction: `ζ · N · (mean demand / capacity)`.
pub fn epsilon_threshold(zeta: f64, n_customers: usize, mean_demand: f64, capacity: f64) -> f64 {
    zeta * n_customers as f64 * (mean_demand / capacity)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    pub r: f64,
    pub r_reg: f64,
    pub r_bonus: f64,
    pub r_gire: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapingWeights {
    pub alpha: f64,
    pub beta: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for ShapingWeights {
    fn default() -> Self {
        ShapingWeights { alpha: 0.05, beta: 0.05, c1: C1, c2: C2 }
    }
}

/// `r_gire = r + α·r_reg + β·r_bonus` with
/// `r_reg = -E[r] · (H[P(U|U)] + H[P(F|F)])`.
pub fn shape_reward(r: f64, es: &EsFeatures, mean_r: f64, r_bonus: f64, w: &ShapingWeights) -> RewardTerms {
    let h = entropy_measure_with(es.u_given_u().clamp(0.0, 1.0), w.c1, w.c2).unwrap_or(0.0)
        + entropy_measure_with(es.f_given_f().clamp(0.0, 1.0), w.c1, w.c2).unwrap_or(0.0);
    let r_reg = -mean_r.max(0.0) * h;
    let r_bonus = r_bonus.max(0.0);
    RewardTerms { r, r_reg, r_bonus, r_gire: r + w.alpha * r_reg + w.beta * r_bonus }
}

/// Best cost seen inside the ε-feasible band (infeasible but within ε).
/// Returns the bonus earned by a solution of class `class` and cost `cost`.
pub fn bonus_update(best_eps: &mut Option<f64>, class: &FeasibilityClass, cost: f64) -> f64 {
    if class.class != Feasibility::EpsFeasible {
        return 0.0;
    }
    match best_eps {
        None => {
            *best_eps = Some(cost);
            0.0
        }
        Some(best) => {
            let bonus = *best - cost.min(*best);
            *best = best.min(cost);
            bonus
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solution::classify;

    fn hist(records: &[(bool, bool)]) -> EsHistory {
        let mut h = EsHistory::new(25);
        for &(a, b) in records {
            h.push(TransitionRecord { from_feasible: a, to_feasible: b });
        }
        h
    }

    #[test]
    fn history_ring() {
        let mut h = EsHistory::new(25);
        record_transition(&mut h, Feasibility::Feasible, Feasibility::Infeasible);
        assert_eq!(h.records().next(), Some(&TransitionRecord { from_feasible: true, to_feasible: false }));
        for _ in 0..30 {
            record_transition(&mut h, Feasibility::Feasible, Feasibility::Feasible);
        }
        assert_eq!(h.len(), 25);
        assert!(h.records().all(|r| r.to_feasible));
        record_transition(&mut h, Feasibility::Feasible, Feasibility::EpsFeasible);
        assert!(!h.records().last().unwrap().to_feasible);
    }

    #[test]
    fn stats_examples() {
        let es = exploration_stats(&hist(&[(true, false), (false, false), (false, true), (true, true)]), true);
        assert_eq!(&es.0[..8], &[0.25, 0.25, 0.25, 0.25, 0.5, 0.5, 0.5, 0.5]);
        let empty = exploration_stats(&EsHistory::new(25), false);
        assert_eq!(&empty.0, &[0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.0]);
        let ff = exploration_stats(&hist(&[(true, true); 4]), true);
        assert_eq!((ff.f_given_f(), ff.joint_ff(), ff.u_given_u()), (1.0, 1.0, 0.5));
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy_measure(0.5).unwrap(), 0.0);
        assert_eq!(entropy_measure(0.99).unwrap(), 1.0);
        assert_eq!(entropy_measure(0.0).unwrap(), 1.0);
        assert_eq!(entropy_measure(1.0).unwrap(), 1.0);
        let expected = 1.0 - 0.5 * (2.5 * std::f64::consts::PI * std::f64::consts::E * 0.09f64).log2();
        assert!((entropy_measure(0.1).unwrap() - expected).abs() < 1e-12);
        assert!((entropy_measure(0.1).unwrap() - 0.5289).abs() < 1e-4);
        assert!(entropy_measure(1.5).is_err());
    }

    #[test]
    fn epsilon_examples() {
        assert!((epsilon_threshold(0.1, 20, 5.0, 30.0) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(epsilon_threshold(0.0, 20, 5.0, 30.0), 0.0);
        assert!((epsilon_threshold(0.1, 50, 5.0, 40.0) - 0.625).abs() < 1e-12);
    }

    #[test]
    fn shaping_examples() {
        // H(P(U|U)) + H(P(F|F)) = 1.5 using H(0.99) = 1 and a p with H = 0.5.
        let p_half = bisect_entropy(0.5);
        let mut es = exploration_stats(&EsHistory::new(25), true);
        es.0[7] = 0.99;
        es.0[6] = p_half;
        let t = shape_reward(0.2, &es, 0.1, 0.0, &ShapingWeights::default());
        assert!((t.r_reg + 0.15).abs() < 1e-9);
        assert!((t.r_gire - 0.1925).abs() < 1e-9);

        let t = shape_reward(0.2, &es, 0.0, 0.3, &ShapingWeights::default());
        assert_eq!(t.r_reg, 0.0);
        assert!((t.r_gire - (0.2 + 0.05 * 0.3)).abs() < 1e-12);

        let neutral = exploration_stats(&EsHistory::new(25), true);
        assert_eq!(shape_reward(0.2, &neutral, 0.7, 0.0, &ShapingWeights::default()).r_reg, 0.0);
    }

    fn bisect_entropy(target: f64) -> f64 {
        let (mut lo, mut hi) = (0.001, 0.25);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if entropy_measure(mid).unwrap() > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn bonus_bookkeeping() {
        let eps = 0.3;
        let mut best = None;
        assert_eq!(bonus_update(&mut best, &classify(0.1, eps), 10.0), 0.0);
        assert_eq!(best, Some(10.0));
        assert_eq!(bonus_update(&mut best, &classify(0.1, eps), 9.0), 1.0);
        assert_eq!(bonus_update(&mut best, &classify(0.1, eps), 9.5), 0.0);
        assert_eq!(bonus_update(&mut best, &classify(0.5, eps), 1.0), 0.0);
        assert_eq!(bonus_update(&mut best, &classify(0.0, eps), 1.0), 0.0);
        assert_eq!(best, Some(9.0));
    }
}
