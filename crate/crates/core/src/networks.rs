//! Policy (encoder, dual-stream recurrent decoder, hypernetwork) and critic.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gire::{EsFeatures, ES_WIDTH};
use crate::instance::ProblemKind;
use crate::kopt::{self, ActionTrace, MoveType, Selection};
use crate::neural::{cpe_table, AttentionLayer, GruCell, Linear, Matrix, Mlp, ParamId, ParamSet, Tape, Var};
use crate::rng::Rng;
use crate::solution::{feature_width, NodeFeatures, Tour};

/// Bound on decoder logits: scores are `SCORE_SCALE · tanh(·)`.
pub const SCORE_SCALE: f64 = 6.0;
const HYPER_HIDDEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: ProblemKind,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub vi_features: bool,
    pub es_features: bool,
    pub use_grus: bool,
    pub use_move_stream: bool,
    pub use_edge_stream: bool,
    pub learnable_s_move: bool,
    pub allow_e_move: bool,
}

impl PolicyConfig {
    pub fn tsp(d: usize, layers: usize) -> Self {
        PolicyConfig {
            kind: ProblemKind::Tsp,
            d,
            layers,
            heads: 4,
            vi_features: false,
            es_features: false,
            use_grus: true,
            use_move_stream: true,
            use_edge_stream: true,
            learnable_s_move: true,
            allow_e_move: true,
        }
    }

    pub fn cvrp(d: usize, layers: usize, gire_features: bool) -> Self {
        PolicyConfig {
            kind: ProblemKind::Cvrp,
            vi_features: gire_features,
            es_features: gire_features,
            ..PolicyConfig::tsp(d, layers)
        }
    }

    pub fn feature_width(&self) -> usize {
        feature_width(self.kind, self.vi_features)
    }
}

#[derive(Debug, Clone)]
struct Stream {
    gru: GruCell,
    wq: Linear,
    wk: Linear,
    wq2: Linear,
    wk2: Linear,
    /// Static `1×d` output projection; absent when the hypernetwork supplies it.
    wo: Option<ParamId>,
    start: ParamId,
}

impl Stream {
    fn new(ps: &mut ParamSet, name: &str, d: usize, static_out: bool, rng: &mut Rng) -> Self {
        Stream {
            gru: GruCell::new(ps, &format!("{name}.gru"), d, rng),
            wq: Linear::new(ps, &format!("{name}.wq"), d, d, false, rng),
            wk: Linear::new(ps, &format!("{name}.wk"), d, d, false, rng),
            wq2: Linear::new(ps, &format!("{name}.wq2"), d, d, false, rng),
            wk2: Linear::new(ps, &format!("{name}.wk2"), d, d, false, rng),
            wo: static_out.then(|| ps.add(format!("{name}.wo"), crate::neural::init_uniform(1, d, d, rng))),
            start: ps.add(format!("{name}.start"), crate::neural::init_uniform(1, d, d, rng)),
        }
    }
}

#[derive(Debug, Clone)]
struct Hyper {
    shared: Linear,
    mu: Linear,
    lambda: Linear,
}

/// How the decoder picks each node.
pub enum DecodeMode<'a> {
    Sample(&'a mut Rng),
    Greedy,
}

enum Driver<'a, 'r> {
    Choose(&'a mut DecodeMode<'r>),
    Replay(&'a ActionTrace),
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub trace: ActionTrace,
    pub logprob: f64,
    /// Full distribution at every step that involved a choice.
    pub step_probs: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub cfg: PolicyConfig,
    pub params: ParamSet,
    nfe: Mlp,
    encoder: Vec<AttentionLayer>,
    mu: Stream,
    lambda: Stream,
    hyper: Option<Hyper>,
}

impl Policy {
    pub fn new(cfg: PolicyConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d;
        if d < 2 || !d.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("embedding width must be even, got {d}")));
        }
        let mut ps = ParamSet::new();
        let nfe = Mlp::new(&mut ps, "policy.nfe", &[cfg.feature_width(), d / 2, d], rng);
        let encoder = (0..cfg.layers)
            .map(|l| AttentionLayer::new(&mut ps, &format!("policy.enc{l}"), d, cfg.heads, true, rng))
            .collect::<Result<Vec<_>>>()?;
        let static_out = !cfg.es_features;
        let mu = Stream::new(&mut ps, "policy.mu", d, static_out, rng);
        let lambda = Stream::new(&mut ps, "policy.lambda", d, static_out, rng);
        let hyper = cfg.es_features.then(|| Hyper {
            shared: Linear::new(&mut ps, "policy.hyper.shared", ES_WIDTH, HYPER_HIDDEN, true, rng),
            mu: Linear::new(&mut ps, "policy.hyper.mu", HYPER_HIDDEN, d, true, rng),
            lambda: Linear::new(&mut ps, "policy.hyper.lambda", HYPER_HIDDEN, d, true, rng),
        });
        Ok(Policy { cfg, params: ps, nfe, encoder, mu, lambda, hyper })
    }

    /// Node embeddings `h` (n×d).
    pub fn encode(&self, t: &mut Tape, features: &NodeFeatures, tour: &Tour) -> Result<Var> {
        if features.width != self.cfg.feature_width() {
            return Err(Error::Shape(format!(
                "feature width {} does not match configured {}",
                features.width,
                self.cfg.feature_width()
            )));
        }
        if features.rows != tour.len() {
            return Err(Error::Shape(format!("{} feature rows for {} nodes", features.rows, tour.len())));
        }
        let n = tour.len();
        let d = self.cfg.d;
        let x = t.input(Matrix::from_vec(n, features.width, features.data.clone()));
        let mut h = self.nfe.forward(t, x)?;
        if !self.encoder.is_empty() {
            let table = cpe_table(n, d)?;
            let pos = tour.positions_from(0);
            let mut pfe = Matrix::zeros(n, d);
            for (i, &p) in pos.iter().enumerate() {
                pfe.data[i * d..(i + 1) * d].copy_from_slice(table.row(p));
            }
            let g = t.input(pfe);
            for layer in &self.encoder {
                h = layer.forward(t, h, Some(g))?;
            }
        }
        Ok(h)
    }

    /// Hypernetwork output projections `(W^O_μ, W^O_λ)`, each `1×d`.
    pub fn hyper_project(&self, t: &mut Tape, es: &EsFeatures) -> Result<(Var, Var)> {
        let hy = self
            .hyper
            .as_ref()
            .ok_or_else(|| Error::InvalidState("hypernetwork requested but ES features are disabled".into()))?;
        let x = t.input(Matrix::row_vector(es.0.to_vec()));
        let s = hy.shared.forward(t, x);
        let s = t.relu(s);
        Ok((hy.mu.forward(t, s), hy.lambda.forward(t, s)))
    }

    fn output_projections(&self, t: &mut Tape, es: Option<&EsFeatures>) -> Result<(Var, Var)> {
        match (&self.hyper, self.mu.wo, self.lambda.wo) {
            (Some(_), _, _) => {
                let es = es.ok_or_else(|| Error::InvalidState("ES features required by the hypernetwork".into()))?;
                self.hyper_project(t, es)
            }
            (None, Some(a), Some(b)) => Ok((t.param(a), t.param(b))),
            _ => Err(Error::Internal("policy has no output projection".into())),
        }
    }

    fn stream_scores(&self, t: &mut Tape, s: &Stream, keys: (Var, Var), q: Var, wo: Var) -> Var {
        let qa = s.wq.forward(t, q);
        let a = t.add_row(keys.0, qa);
        let qb = s.wq2.forward(t, q);
        let b = t.mul_row(keys.1, qb);
        let x = t.add(a, b);
        let x = t.tanh(x);
        t.matmul_nt(x, wo)
    }

    fn scores(&self, t: &mut Tape, keys: &StreamKeys, q: (Var, Var), wo: (Var, Var)) -> Var {
        let mut total = None;
        if self.cfg.use_move_stream {
            total = Some(self.stream_scores(t, &self.mu, keys.mu, q.0, wo.0));
        }
        if self.cfg.use_edge_stream {
            let l = self.stream_scores(t, &self.lambda, keys.lambda, q.1, wo.1);
            total = Some(match total {
                Some(m) => t.add(m, l),
                None => l,
            });
        }
        let total = total.unwrap_or_else(|| t.input(Matrix::zeros(keys.n, 1)));
        let s = t.tanh(total);
        t.scale(s, SCORE_SCALE)
    }

    fn gru_advance(&self, t: &mut Tape, q: (Var, Var), inputs: (Var, Var)) -> Result<(Var, Var)> {
        if !self.cfg.use_grus {
            return Ok(q);
        }
        Ok((self.mu.gru.step(t, inputs.0, q.0)?, self.lambda.gru.step(t, inputs.1, q.1)?))
    }

    fn run(
        &self,
        t: &mut Tape,
        h: Var,
        tour: &Tour,
        es: Option<&EsFeatures>,
        k: usize,
        mut driver: Driver,
    ) -> Result<(ActionTrace, Var, Vec<Option<Vec<f64>>>)> {
        if k < 2 {
            return Err(Error::InvalidArgument(format!("K must be at least 2, got {k}")));
        }
        let n = tour.len();
        if t.value(h).rows != n {
            return Err(Error::Shape("embedding rows differ from tour length".into()));
        }
        if let Driver::Replay(tr) = &driver {
            if tr.selections.len() != k - 1 || tr.anchor >= n {
                return Err(Error::InvalidMove("trace does not fit the decoder".into()));
            }
        }
        let wo = self.output_projections(t, es)?;
        let keys = StreamKeys {
            n,
            mu: (self.mu.wk.forward(t, h), self.mu.wk2.forward(t, h)),
            lambda: (self.lambda.wk.forward(t, h), self.lambda.wk2.forward(t, h)),
        };
        let q0 = t.mean_rows(h);
        let mut q = (q0, q0);
        let mut terms: Vec<Var> = Vec::new();
        let mut constant = 0.0;
        let mut step_probs = Vec::with_capacity(k);

        // Step 1: anchor selection over all nodes.
        let starts = (t.param(self.mu.start), t.param(self.lambda.start));
        q = self.gru_advance(t, q, starts)?;
        let all = vec![true; n];
        let anchor = if self.cfg.learnable_s_move {
            let sc = self.scores(t, &keys, q, wo);
            let (v, lp, probs) = self.select(t, sc, &all, &mut driver, None)?;
            terms.push(lp);
            step_probs.push(Some(probs));
            v
        } else {
            let v = match &mut driver {
                Driver::Choose(DecodeMode::Sample(rng)) => rng.gen_range(0..n),
                Driver::Choose(DecodeMode::Greedy) => 0,
                Driver::Replay(tr) => tr.anchor,
            };
            constant += -(n as f64).ln();
            step_probs.push(Some(vec![1.0 / n as f64; n]));
            v
        };

        let mut state = kopt::begin_action(tour, anchor);
        let mut selections = Vec::with_capacity(k - 1);
        let mut move_types = vec![MoveType::S];
        let mut last = anchor;
        for step in 0..k - 1 {
            let expected = match &driver {
                Driver::Replay(tr) => Some(tr.selections[step]),
                Driver::Choose(_) => None,
            };
            if state.is_terminated() {
                if expected.is_some_and(|s| s != Selection::Null) {
                    return Err(Error::InvalidMove("trace continues after termination".into()));
                }
                selections.push(Selection::Null);
                move_types.push(kopt::advance(&mut state, Selection::Null)?);
                step_probs.push(None);
                continue;
            }
            if state.e_move_enforced() {
                if expected.is_some_and(|s| s != Selection::Enforced) {
                    return Err(Error::InvalidMove("trace misses an enforced E-move".into()));
                }
                selections.push(Selection::Enforced);
                move_types.push(kopt::advance(&mut state, Selection::Enforced)?);
                step_probs.push(None);
                continue;
            }
            let mask = kopt::valid_targets_with(&state, self.cfg.allow_e_move)?;
            if !mask.iter().any(|&m| m) {
                // Only the closing node remains when E-moves are disallowed.
                let close = state.ranks().node_at(state.head_rank());
                if expected.is_some_and(|s| s != Selection::Node(close)) {
                    return Err(Error::InvalidMove("trace deviates from a forced E-move".into()));
                }
                selections.push(Selection::Node(close));
                move_types.push(kopt::advance(&mut state, Selection::Node(close))?);
                step_probs.push(None);
                continue;
            }
            let o_mu = t.row(h, last);
            let o_lambda = t.row(h, state.tail());
            q = self.gru_advance(t, q, (o_mu, o_lambda))?;
            let sc = self.scores(t, &keys, q, wo);
            let (v, lp, probs) = self.select(t, sc, &mask, &mut driver, Some(step))?;
            terms.push(lp);
            step_probs.push(Some(probs));
            selections.push(Selection::Node(v));
            move_types.push(kopt::advance(&mut state, Selection::Node(v))?);
            last = v;
        }
        if let Driver::Replay(tr) = &driver {
            if tr.move_types.len() == move_types.len() && tr.move_types != move_types {
                return Err(Error::InvalidMove("trace move types disagree with replay".into()));
            }
        }
        let mut total = t.input(Matrix::from_vec(1, 1, vec![constant]));
        for term in terms {
            total = t.add(total, term);
        }
        Ok((ActionTrace { anchor, selections, move_types }, total, step_probs))
    }

    /// `step` is `None` for the anchor choice.
    fn select(
        &self,
        t: &mut Tape,
        scores: Var,
        mask: &[bool],
        driver: &mut Driver,
        step: Option<usize>,
    ) -> Result<(usize, Var, Vec<f64>)> {
        let probs = crate::neural::tape::masked_softmax(&t.value(scores).data, mask);
        let v = match driver {
            Driver::Choose(DecodeMode::Greedy) => {
                let mut best = None;
                for (i, &p) in probs.iter().enumerate() {
                    if mask[i] && best.is_none_or(|b: usize| p > probs[b]) {
                        best = Some(i);
                    }
                }
                best.ok_or_else(|| Error::Internal("empty decoder mask".into()))?
            }
            Driver::Choose(DecodeMode::Sample(rng)) => sample_index(&probs, mask, rng)?,
            Driver::Replay(tr) => {
                let sel = match step {
                    None => Selection::Node(tr.anchor),
                    Some(s) => tr.selections[s],
                };
                match sel {
                    Selection::Node(v) if v < mask.len() && mask[v] => v,
                    other => return Err(Error::InvalidMove(format!("trace selection {other:?} is masked"))),
                }
            }
        };
        let lp = t.log_softmax_at(scores, mask, v);
        Ok((v, lp, probs))
    }

    /// Samples (or greedily picks) one K-opt action for `tour`.
    pub fn decode(
        &self,
        features: &NodeFeatures,
        tour: &Tour,
        es: Option<&EsFeatures>,
        mut mode: DecodeMode,
        k: usize,
    ) -> Result<Decoded> {
        let mut t = Tape::new(&self.params);
        let h = self.encode(&mut t, features, tour)?;
        let (trace, lp, step_probs) = self.run(&mut t, h, tour, es, k, Driver::Choose(&mut mode))?;
        Ok(Decoded { trace, logprob: t.scalar(lp), step_probs })
    }

    /// Teacher-forced log-probability of `trace` as a tape variable.
    pub fn trace_logprob_var(
        &self,
        t: &mut Tape,
        h: Var,
        tour: &Tour,
        es: Option<&EsFeatures>,
        trace: &ActionTrace,
    ) -> Result<Var> {
        let (_, lp, _) = self.run(t, h, tour, es, trace.k(), Driver::Replay(trace))?;
        Ok(lp)
    }

    pub fn trace_logprob(
        &self,
        features: &NodeFeatures,
        tour: &Tour,
        es: Option<&EsFeatures>,
        trace: &ActionTrace,
    ) -> Result<f64> {
        let mut t = Tape::new(&self.params);
        let h = self.encode(&mut t, features, tour)?;
        let lp = self.trace_logprob_var(&mut t, h, tour, es, trace)?;
        Ok(t.scalar(lp))
    }
}

struct StreamKeys {
    n: usize,
    mu: (Var, Var),
    lambda: (Var, Var),
}

fn sample_index(probs: &[f64], mask: &[bool], rng: &mut Rng) -> Result<usize> {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = None;
    for (i, &p) in probs.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        acc += p;
        last = Some(i);
        if u < acc {
            return Ok(i);
        }
    }
    last.ok_or_else(|| Error::Internal("empty decoder mask".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Origin,
    Reg,
    Bonus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub d: usize,
    pub heads: usize,
    pub reg_head: bool,
    pub bonus_head: bool,
}

/// Inputs to the critic besides the node embeddings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticInput<'a> {
    pub bsf_cost: f64,
    pub bsf_eps_cost: Option<f64>,
    pub es: Option<&'a EsFeatures>,
}

#[derive(Debug, Clone)]
pub struct Critic {
    pub cfg: CriticConfig,
    pub params: ParamSet,
    att: AttentionLayer,
    w_local: Linear,
    w_global: Linear,
    origin: Mlp,
    reg: Option<Mlp>,
    bonus: Option<Mlp>,
}

impl Critic {
    pub fn new(cfg: CriticConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d;
        if d < 2 || !d.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("embedding width must be even, got {d}")));
        }
        let mut ps = ParamSet::new();
        let att = AttentionLayer::new(&mut ps, "critic.att", d, cfg.heads, false, rng)?;
        let w_local = Linear::new(&mut ps, "critic.local", d, d / 2, false, rng);
        let w_global = Linear::new(&mut ps, "critic.global", d, d / 2, false, rng);
        let origin = Mlp::new(&mut ps, "critic.origin", &[d + 1, d, d / 2, 1], rng);
        let reg = cfg.reg_head.then(|| Mlp::new(&mut ps, "critic.reg", &[d + 1 + ES_WIDTH, d, d / 2, 1], rng));
        let bonus = cfg.bonus_head.then(|| Mlp::new(&mut ps, "critic.bonus", &[d + 1, d, d / 2, 1], rng));
        Ok(Critic { cfg, params: ps, att, w_local, w_global, origin, reg, bonus })
    }

    pub fn heads(&self) -> Vec<Head> {
        let mut v = vec![Head::Origin];
        if self.reg.is_some() {
            v.push(Head::Reg);
        }
        if self.bonus.is_some() {
            v.push(Head::Bonus);
        }
        v
    }

    /// One `1×1` value per head, in the order of [`Critic::heads`].
    pub fn values_var(&self, t: &mut Tape, h: Var, input: &CriticInput) -> Result<Vec<Var>> {
        let hh = self.att.forward(t, h, None)?;
        let local = self.w_local.forward(t, hh);
        let mean = t.mean_rows(hh);
        let global = self.w_global.forward(t, mean);
        let y = t.add_row(local, global);
        let mx = t.max_rows(y);
        let mn = t.mean_rows(y);
        let pooled = t.concat_cols(&[mx, mn]);
        let bsf = t.input(Matrix::from_vec(1, 1, vec![input.bsf_cost]));
        let mut out = Vec::with_capacity(3);
        let x = t.concat_cols(&[pooled, bsf]);
        out.push(self.origin.forward(t, x)?);
        if let Some(reg) = &self.reg {
            let es = input.es.ok_or_else(|| Error::InvalidState("regulation head needs ES features".into()))?;
            let e = t.input(Matrix::row_vector(es.0.to_vec()));
            let x = t.concat_cols(&[pooled, bsf, e]);
            out.push(reg.forward(t, x)?);
        }
        if let Some(bonus) = &self.bonus {
            let b = t.input(Matrix::from_vec(1, 1, vec![input.bsf_eps_cost.unwrap_or(input.bsf_cost)]));
            let x = t.concat_cols(&[pooled, b]);
            out.push(bonus.forward(t, x)?);
        }
        Ok(out)
    }

    /// Values from (detached) node embeddings.
    pub fn critic_values(&self, h: &Matrix, input: &CriticInput) -> Result<Vec<f64>> {
        let mut t = Tape::new(&self.params);
        let hv = t.input(h.clone());
        let vs = self.values_var(&mut t, hv, input)?;
        Ok(vs.into_iter().map(|v| t.scalar(v)).collect())
    }

    /// Final linear layer of a head, for tests and diagnostics.
    pub fn head_output_layer(&self, head: Head) -> Option<Linear> {
        let mlp = match head {
            Head::Origin => Some(&self.origin),
            Head::Reg => self.reg.as_ref(),
            Head::Bonus => self.bonus.as_ref(),
        }?;
        mlp.layers.last().copied()
    }
}

impl Policy {
    /// Node embeddings as a plain matrix, without gradient tracking.
    pub fn embed(&self, features: &NodeFeatures, tour: &Tour) -> Result<Matrix> {
        let mut t = Tape::new(&self.params);
        let h = self.encode(&mut t, features, tour)?;
        Ok(t.value(h).clone())
    }

    /// Parameter ids belonging to the hypernetwork (empty without ES features).
    pub fn hyper_params(&self) -> Vec<ParamId> {
        self.hyper
            .iter()
            .flat_map(|h| [h.shared, h.mu, h.lambda])
            .flat_map(|l| std::iter::once(l.w).chain(l.b))
            .collect()
    }

    /// Parameter ids of one decoder stream (`"mu"` or `"lambda"`).
    pub fn stream_params(&self, which: &str) -> Vec<ParamId> {
        let prefix = format!("policy.{which}.");
        self.params.iter().filter(|(_, name, _)| name.starts_with(&prefix)).map(|(id, _, _)| id).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gire::{exploration_stats, EsHistory};
    use crate::instance::{generate_uniform, CapacityRule};
    use crate::neural::grad_check;
    use crate::rng;
    use crate::solution::{initial_tour, node_features};

    fn tsp_setup(n: usize, seed: u64) -> (crate::instance::Instance, Tour, NodeFeatures) {
        let inst = generate_uniform(ProblemKind::Tsp, n, seed, CapacityRule::default()).unwrap();
        let tour = initial_tour(&inst, &mut rng::seeded(seed)).unwrap();
        let f = node_features(&inst, &tour, false);
        (inst, tour, f)
    }

    #[test]
    fn encode_shapes_and_width_check() {
        let (_, tour, f) = tsp_setup(5, 1);
        let p = Policy::new(PolicyConfig::tsp(16, 2), &mut rng::seeded(0)).unwrap();
        let h = p.embed(&f, &tour).unwrap();
        assert_eq!(h.shape(), (5, 16));
        let bad = NodeFeatures { rows: 5, width: 3, data: vec![0.0; 15] };
        assert!(matches!(p.embed(&bad, &tour), Err(Error::Shape(_))));
    }

    #[test]
    fn replay_matches_decode_and_step_products() {
        let p = Policy::new(PolicyConfig::tsp(16, 1), &mut rng::seeded(3)).unwrap();
        let mut r = rng::seeded(9);
        for seed in 0..20 {
            let (_, tour, f) = tsp_setup(8, seed);
            let dec = p.decode(&f, &tour, None, DecodeMode::Sample(&mut r), 4).unwrap();
            let replay = p.trace_logprob(&f, &tour, None, &dec.trace).unwrap();
            assert!((replay - dec.logprob).abs() < 1e-12);
            let mut prod = 1.0;
            let mut chosen = vec![dec.trace.anchor];
            chosen.extend(dec.trace.selections.iter().map(|s| match s {
                Selection::Node(v) => *v,
                _ => usize::MAX,
            }));
            for (probs, &v) in dec.step_probs.iter().zip(&chosen) {
                if let Some(p) = probs {
                    prod *= p[v];
                }
            }
            assert!((prod - dec.logprob.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_nodes_get_zero_probability() {
        let p = Policy::new(PolicyConfig::tsp(16, 1), &mut rng::seeded(4)).unwrap();
        let mut r = rng::seeded(5);
        for seed in 0..20 {
            let (_, tour, f) = tsp_setup(9, seed);
            let dec = p.decode(&f, &tour, None, DecodeMode::Sample(&mut r), 5).unwrap();
            let mut state = kopt::begin_action(&tour, dec.trace.anchor);
            for (step, sel) in dec.trace.selections.iter().enumerate() {
                if let Some(probs) = &dec.step_probs[step + 1] {
                    let mask = kopt::valid_targets(&state).unwrap();
                    for (i, &m) in mask.iter().enumerate() {
                        if !m {
                            assert_eq!(probs[i], 0.0);
                        }
                    }
                }
                kopt::advance(&mut state, *sel).unwrap();
            }
        }
    }

    #[test]
    fn k2_is_two_opt_and_greedy_is_deterministic() {
        let p = Policy::new(PolicyConfig::tsp(16, 1), &mut rng::seeded(6)).unwrap();
        let (_, tour, f) = tsp_setup(7, 2);
        let mut r = rng::seeded(1);
        for _ in 0..20 {
            let dec = p.decode(&f, &tour, None, DecodeMode::Sample(&mut r), 2).unwrap();
            assert_eq!(dec.trace.selections.len(), 1);
            assert!(matches!(dec.trace.move_types[1], MoveType::I | MoveType::E));
            let next = kopt::finalize(&tour, &dec.trace).unwrap();
            assert!(kopt::edges_changed(&tour, &next) <= 2);
        }
        let a = p.decode(&f, &tour, None, DecodeMode::Greedy, 4).unwrap();
        let b = p.decode(&f, &tour, None, DecodeMode::Greedy, 4).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn replay_rejects_inconsistent_trace() {
        let p = Policy::new(PolicyConfig::tsp(16, 1), &mut rng::seeded(6)).unwrap();
        let (_, tour, f) = tsp_setup(7, 2);
        let dec = p.decode(&f, &tour, None, DecodeMode::Greedy, 3).unwrap();
        let mut bad = dec.trace.clone();
        // The anchor itself has rank 0 and is never selectable after the S-move.
        bad.selections[0] = Selection::Node(bad.anchor);
        assert!(matches!(p.trace_logprob(&f, &tour, None, &bad), Err(Error::InvalidMove(_))));
    }

    #[test]
    fn enforced_and_null_steps_contribute_nothing() {
        let mut cfg = PolicyConfig::tsp(8, 1);
        cfg.heads = 2;
        let p = Policy::new(cfg, &mut rng::seeded(7)).unwrap();
        let (_, tour, f) = tsp_setup(6, 3);
        let seq = tour.sequence_from(0);
        // S at node 0, immediate E (rank 1), then padding.
        let trace = ActionTrace {
            anchor: 0,
            selections: vec![Selection::Node(seq[1]), Selection::Null, Selection::Null],
            move_types: vec![MoveType::S, MoveType::E, MoveType::Null, MoveType::Null],
        };
        let lp = p.trace_logprob(&f, &tour, None, &trace).unwrap();
        let short = ActionTrace { selections: vec![Selection::Node(seq[1])], move_types: trace.move_types[..2].to_vec(), ..trace };
        let lp2 = p.trace_logprob(&f, &tour, None, &short).unwrap();
        assert!((lp - lp2).abs() < 1e-12);

        // I-move to the last rank forces the closing E-move with probability 1.
        let trace = ActionTrace {
            anchor: 0,
            selections: vec![Selection::Node(seq[5]), Selection::Enforced, Selection::Null],
            move_types: vec![MoveType::S, MoveType::I, MoveType::E, MoveType::Null],
        };
        let lp3 = p.trace_logprob(&f, &tour, None, &trace).unwrap();
        let short = ActionTrace {
            selections: vec![Selection::Node(seq[5])],
            move_types: vec![MoveType::S, MoveType::I],
            ..trace
        };
        let lp4 = p.trace_logprob(&f, &tour, None, &short).unwrap();
        assert!((lp3 - lp4).abs() < 1e-12);
    }

    #[test]
    fn hypernet_zero_weights_give_uniform_choice() {
        let cfg = PolicyConfig::cvrp(8, 1, true);
        let cfg = PolicyConfig { heads: 2, ..cfg };
        let mut p = Policy::new(cfg, &mut rng::seeded(8)).unwrap();
        let inst = generate_uniform(ProblemKind::Cvrp, 6, 1, CapacityRule::default()).unwrap();
        let tour = initial_tour(&inst, &mut rng::seeded(2)).unwrap();
        let f = node_features(&inst, &tour, true);
        let es = exploration_stats(&EsHistory::new(25), true);
        for id in p.hyper_params() {
            let m = p.params.get_mut(id);
            m.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let dec = p.decode(&f, &tour, Some(&es), DecodeMode::Greedy, 3).unwrap();
        let probs = dec.step_probs[0].as_ref().unwrap();
        assert!(probs.iter().all(|&q| (q - 1.0 / probs.len() as f64).abs() < 1e-12));

        let p = Policy::new(p.cfg.clone(), &mut rng::seeded(9)).unwrap();
        let mut es2 = es;
        es2.0[6] = 0.9;
        let mut t = Tape::new(&p.params);
        let (a, b) = p.hyper_project(&mut t, &es).unwrap();
        let (c, _) = p.hyper_project(&mut t, &es2).unwrap();
        assert_eq!(t.value(a).shape(), (1, 8));
        assert_eq!(t.value(b).shape(), (1, 8));
        assert_ne!(t.value(a).data, t.value(c).data);

        let plain = Policy::new(PolicyConfig { heads: 2, ..PolicyConfig::tsp(8, 1) }, &mut rng::seeded(1)).unwrap();
        let mut t = Tape::new(&plain.params);
        assert!(matches!(plain.hyper_project(&mut t, &es), Err(Error::InvalidState(_))));
    }

    #[test]
    fn toggles_touch_only_their_pathway() {
        let (_, tour, f) = tsp_setup(8, 4);
        let base = PolicyConfig { heads: 2, ..PolicyConfig::tsp(8, 1) };

        // Without the move stream, its parameters cannot influence the output.
        let cfg = PolicyConfig { use_move_stream: false, ..base.clone() };
        let p = Policy::new(cfg, &mut rng::seeded(10)).unwrap();
        let a = p.decode(&f, &tour, None, DecodeMode::Greedy, 3).unwrap();
        let mut q = p.clone();
        for id in q.stream_params("mu") {
            if !q.params.name(id).contains(".gru.") {
                q.params.get_mut(id).data.iter_mut().for_each(|v| *v += 0.3);
            }
        }
        let b = q.decode(&f, &tour, None, DecodeMode::Greedy, 3).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.logprob, b.logprob);

        let cfg = PolicyConfig { use_edge_stream: false, ..base.clone() };
        let p = Policy::new(cfg, &mut rng::seeded(10)).unwrap();
        let a = p.decode(&f, &tour, None, DecodeMode::Greedy, 3).unwrap();
        let mut q = p.clone();
        for id in q.stream_params("lambda") {
            q.params.get_mut(id).data.iter_mut().for_each(|v| *v += 0.3);
        }
        let b = q.decode(&f, &tour, None, DecodeMode::Greedy, 3).unwrap();
        assert_eq!(a.logprob, b.logprob);

        let cfg = PolicyConfig { learnable_s_move: false, ..base.clone() };
        let p = Policy::new(cfg, &mut rng::seeded(11)).unwrap();
        let dec = p.decode(&f, &tour, None, DecodeMode::Sample(&mut rng::seeded(0)), 3).unwrap();
        assert!(dec.step_probs[0].as_ref().unwrap().iter().all(|&v| v == 1.0 / 8.0));

        // Fixed K: with E-moves disallowed every free step is an I-move.
        let cfg = PolicyConfig { allow_e_move: false, ..base };
        let p = Policy::new(cfg, &mut rng::seeded(12)).unwrap();
        let mut r = rng::seeded(1);
        for _ in 0..20 {
            let dec = p.decode(&f, &tour, None, DecodeMode::Sample(&mut r), 3).unwrap();
            assert_eq!(dec.trace.move_types[1], MoveType::I);
        }
    }

    #[test]
    fn logprob_invariant_under_relabeling() {
        let (inst, tour, _) = tsp_setup(8, 5);
        let p = Policy::new(PolicyConfig { heads: 2, ..PolicyConfig::tsp(8, 2) }, &mut rng::seeded(13)).unwrap();
        let f = node_features(&inst, &tour, false);
        let dec = p.decode(&f, &tour, None, DecodeMode::Sample(&mut rng::seeded(3)), 4).unwrap();
        let perm = [0, 3, 5, 1, 7, 2, 6, 4];
        let mut coords = vec![[0.0; 2]; 8];
        for i in 0..8 {
            coords[perm[i]] = inst.coords[i];
        }
        let inst2 = crate::instance::Instance::tsp("p", coords);
        let tour2 = tour.relabeled(&perm);
        let f2 = node_features(&inst2, &tour2, false);
        let map = |s: &Selection| match s {
            Selection::Node(v) => Selection::Node(perm[*v]),
            o => *o,
        };
        let trace2 = ActionTrace {
            anchor: perm[dec.trace.anchor],
            selections: dec.trace.selections.iter().map(map).collect(),
            move_types: dec.trace.move_types.clone(),
        };
        let lp2 = p.trace_logprob(&f2, &tour2, None, &trace2).unwrap();
        assert!((lp2 - dec.logprob).abs() < 1e-9);
    }

    #[test]
    fn critic_heads_and_bias() {
        let (_, tour, f) = tsp_setup(6, 6);
        let p = Policy::new(PolicyConfig { heads: 2, ..PolicyConfig::tsp(8, 1) }, &mut rng::seeded(1)).unwrap();
        let h = p.embed(&f, &tour).unwrap();
        let cfg = CriticConfig { d: 8, heads: 2, reg_head: false, bonus_head: false };
        let mut c = Critic::new(cfg, &mut rng::seeded(2)).unwrap();
        let input = CriticInput { bsf_cost: 3.0, bsf_eps_cost: None, es: None };
        assert_eq!(c.critic_values(&h, &input).unwrap().len(), 1);
        let last = c.head_output_layer(Head::Origin).unwrap();
        *c.params.get_mut(last.w) = Matrix::zeros(4, 1);
        *c.params.get_mut(last.b.unwrap()) = Matrix::from_vec(1, 1, vec![0.25]);
        assert_eq!(c.critic_values(&h, &input).unwrap(), vec![0.25]);

        let cfg = CriticConfig { d: 8, heads: 2, reg_head: true, bonus_head: true };
        let c = Critic::new(cfg, &mut rng::seeded(2)).unwrap();
        assert!(matches!(c.critic_values(&h, &input), Err(Error::InvalidState(_))));
        let es = exploration_stats(&EsHistory::new(25), true);
        let input = CriticInput { bsf_cost: 3.0, bsf_eps_cost: Some(2.9), es: Some(&es) };
        assert_eq!(c.critic_values(&h, &input).unwrap().len(), 3);
    }

    #[test]
    fn pipelines_pass_grad_check() {
        let inst = generate_uniform(ProblemKind::Cvrp, 5, 2, CapacityRule::default()).unwrap();
        let tour = initial_tour(&inst, &mut rng::seeded(4)).unwrap();
        let f = node_features(&inst, &tour, true);
        let es = exploration_stats(&EsHistory::new(25), true);
        let p = Policy::new(PolicyConfig { heads: 2, ..PolicyConfig::cvrp(8, 1, true) }, &mut rng::seeded(5)).unwrap();
        let dec = p.decode(&f, &tour, Some(&es), DecodeMode::Sample(&mut rng::seeded(1)), 4).unwrap();
        let report = grad_check(
            &p.params,
            |t| {
                let h = p.encode(t, &f, &tour).unwrap();
                p.trace_logprob_var(t, h, &tour, Some(&es), &dec.trace).unwrap()
            },
            1e-4,
        );
        assert!(report.passed, "{report:?}");

        let h = p.embed(&f, &tour).unwrap();
        let c = Critic::new(CriticConfig { d: 8, heads: 2, reg_head: true, bonus_head: true }, &mut rng::seeded(6)).unwrap();
        let input = CriticInput { bsf_cost: 3.0, bsf_eps_cost: Some(2.5), es: Some(&es) };
        let report = grad_check(
            &c.params,
            |t| {
                let hv = t.input(h.clone());
                let vs = c.values_var(t, hv, &input).unwrap();
                let a = t.add(vs[0], vs[1]);
                t.add(a, vs[2])
            },
            1e-4,
        );
        assert!(report.passed, "{report:?}");
    }
}
