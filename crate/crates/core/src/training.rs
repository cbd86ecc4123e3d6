//! n-step PPO with curriculum warm-up, separate critics for the shaped
//! reward terms, and the flat key=value training configuration.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::error::{Error, Result};
use crate::gire::{EsFeatures, RewardTerms, ShapingWeights};
use crate::instance::{generate_with, CapacityRule, Instance, ProblemKind};
use crate::kopt::ActionTrace;
use crate::networks::{Critic, CriticConfig, CriticInput, DecodeMode, Head, Policy, PolicyConfig};
use crate::neural::{Grads, ParamSet, Tape};
use crate::par::{self, Exec};
use crate::rng::{self, Rng};
use crate::search::{env_step, EnvConfig, SearchState};
use crate::solution::{initial_tour, NodeFeatures, Tour};

/// Every hyperparameter, one flat key per field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub problem: ProblemKind,
    pub size: usize,
    pub capacity: Option<u32>,
    pub depot_copies: Option<usize>,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub k: usize,
    pub epochs: usize,
    pub batches: usize,
    pub batch_size: usize,
    pub n_step: usize,
    pub t_train: usize,
    pub ppo_epochs: usize,
    pub clip: f64,
    pub gamma: f64,
    pub lr_policy: f64,
    pub lr_critic: f64,
    pub lr_decay: f64,
    /// Curriculum scalar; warm-up length is `floor(epoch / xi)`.
    pub xi: Option<f64>,
    pub grad_clip: f64,
    pub alpha: f64,
    pub beta: f64,
    pub zeta: f64,
    pub history: usize,
    pub c1: f64,
    pub c2: f64,
    pub ema_decay: f64,
    pub vi_features: bool,
    pub es_features: bool,
    pub use_grus: bool,
    pub use_move_stream: bool,
    pub use_edge_stream: bool,
    pub learnable_s_move: bool,
    pub allow_e_move: bool,
    pub seed: u64,
    pub val_size: usize,
    pub val_steps: usize,
    pub val_seed: u64,
}

impl Config {
    pub fn defaults(problem: ProblemKind, size: usize) -> Self {
        let cvrp = problem == ProblemKind::Cvrp;
        Config {
            problem,
            size,
            capacity: None,
            depot_copies: None,
            d: 128,
            layers: 3,
            heads: 4,
            k: 4,
            epochs: 200,
            batches: 20,
            batch_size: if cvrp { 600 } else { 512 },
            n_step: if cvrp { 5 } else { 4 },
            t_train: if cvrp { 250 } else { 200 },
            ppo_epochs: 3,
            clip: 0.1,
            gamma: 0.999,
            lr_policy: 8e-5,
            lr_critic: 2e-5,
            lr_decay: 0.985,
            xi: None,
            grad_clip: 0.05,
            alpha: if cvrp { 0.05 } else { 0.0 },
            beta: if cvrp { 0.05 } else { 0.0 },
            zeta: if cvrp { 0.1 } else { 0.0 },
            history: crate::gire::DEFAULT_HISTORY,
            c1: crate::gire::C1,
            c2: crate::gire::C2,
            ema_decay: 0.99,
            vi_features: cvrp,
            es_features: cvrp,
            use_grus: true,
            use_move_stream: true,
            use_edge_stream: true,
            learnable_s_move: true,
            allow_e_move: true,
            seed: 1234,
            val_size: 1000,
            val_steps: if cvrp { 250 } else { 200 },
            val_seed: 4321,
        }
    }

    /// Curriculum scalar, defaulting to 1 / 0.5 / 0.25 at sizes 20 / 50 / 100.
    pub fn xi(&self) -> f64 {
        self.xi.unwrap_or(match self.size {
            20 => 1.0,
            50 => 0.5,
            100 => 0.25,
            n => 20.0 / n as f64,
        })
    }

    pub fn warmup_steps(&self, epoch: usize) -> usize {
        (epoch as f64 / self.xi()).floor() as usize
    }

    pub fn capacity_rule(&self) -> CapacityRule {
        CapacityRule { capacity: self.capacity, depot_copies: self.depot_copies }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let cvrp = self.problem == ProblemKind::Cvrp;
        PolicyConfig {
            kind: self.problem,
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            vi_features: cvrp && self.vi_features,
            es_features: cvrp && self.es_features,
            use_grus: self.use_grus,
            use_move_stream: self.use_move_stream,
            use_edge_stream: self.use_edge_stream,
            learnable_s_move: self.learnable_s_move,
            allow_e_move: self.allow_e_move,
        }
    }

    /// Separate critics exist only for shaped terms with non-zero weight.
    pub fn critic_config(&self) -> CriticConfig {
        let cvrp = self.problem == ProblemKind::Cvrp;
        CriticConfig { d: self.d, heads: self.heads, reg_head: cvrp && self.alpha > 0.0, bonus_head: cvrp && self.beta > 0.0 }
    }

    pub fn env_config(&self) -> EnvConfig {
        let cvrp = self.problem == ProblemKind::Cvrp;
        EnvConfig {
            shaping: ShapingWeights { alpha: self.alpha, beta: self.beta, c1: self.c1, c2: self.c2 },
            zeta: if cvrp { self.zeta } else { 0.0 },
            history: self.history,
            vi_features: cvrp && self.vi_features,
            es_features: cvrp && self.es_features,
        }
    }

    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        base * self.lr_decay.powi(epoch as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if self.d < 2 || !self.d.is_multiple_of(2) {
            return bad(format!("d must be even, got {}", self.d));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!("d={} is not divisible by heads={}", self.d, self.heads));
        }
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if self.size < 3 {
            return bad(format!("size must be at least 3, got {}", self.size));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batches", self.batches),
            ("batch_size", self.batch_size),
            ("n_step", self.n_step),
            ("t_train", self.t_train),
            ("ppo_epochs", self.ppo_epochs),
            ("history", self.history),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("clip", self.clip),
            ("lr_policy", self.lr_policy),
            ("lr_critic", self.lr_critic),
            ("lr_decay", self.lr_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.xi.is_some_and(|x| !(x > 0.0)) {
            return bad("xi must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("zeta", self.zeta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// Parses flat `key=value` lines; `#` starts a comment. Omitted keys take
    /// the defaults for the configured problem and size.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            let k = k.trim().to_string();
            if pairs.iter().any(|(p, _)| *p == k) {
                return Err(Error::Config(format!("duplicate config key `{k}`")));
            }
            pairs.push((k, v.trim().to_string()));
        }
        let lookup = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let problem = match lookup("problem") {
            Some(p) => p.parse::<ProblemKind>().map_err(|_| Error::Config(format!("bad value for `problem`: {p}")))?,
            None => ProblemKind::Tsp,
        };
        let size = match lookup("size") {
            Some(s) => s.parse().map_err(|_| Error::Config(format!("bad value for `size`: {s}")))?,
            None => 20,
        };
        let mut map = match serde_json::to_value(Config::defaults(problem, size))? {
            Value::Object(m) => m,
            _ => return Err(Error::Internal("config did not serialize to a map".into())),
        };
        for (k, v) in &pairs {
            if !map.contains_key(k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            map.insert(k.clone(), parse_value(v));
        }
        let cfg: Config = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::Config(format!("invalid config value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key with its value, in declaration order.
    pub fn to_kv(&self) -> String {
        let map: Map<String, Value> = match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m,
            _ => Map::new(),
        };
        let mut out = String::new();
        for (k, v) in map {
            let s = match v {
                Value::Null => "none".to_string(),
                Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k}={s}\n"));
        }
        out
    }
}

fn parse_value(v: &str) -> Value {
    if v.eq_ignore_ascii_case("none") || v.is_empty() {
        return Value::Null;
    }
    serde_json::from_str::<Value>(v).unwrap_or_else(|_| Value::String(v.to_string()))
}

#[derive(Debug, Clone)]
pub struct Snapshot {
    pub tour: Tour,
    pub features: NodeFeatures,
    pub policy_es: Option<EsFeatures>,
    pub critic_es: Option<EsFeatures>,
    pub bsf_cost: f64,
    pub bsf_eps: Option<f64>,
}

impl Snapshot {
    pub fn of(state: &SearchState, env: &EnvConfig) -> Self {
        Snapshot {
            tour: state.tour.clone(),
            features: state.features(env),
            policy_es: state.policy_es(env),
            critic_es: (state.instance.kind == ProblemKind::Cvrp).then(|| state.es()),
            bsf_cost: state.bsf_cost,
            bsf_eps: state.bsf_eps,
        }
    }

    fn critic_input(&self) -> CriticInput<'_> {
        CriticInput { bsf_cost: self.bsf_cost, bsf_eps_cost: self.bsf_eps, es: self.critic_es.as_ref() }
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub snap: Snapshot,
    pub trace: ActionTrace,
    pub old_logprob: f64,
    pub rewards: RewardTerms,
}

/// One instance's segment of `n` steps plus the state after the last one.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
    pub last: Snapshot,
}

/// A training episode: search state plus its private random stream.
#[derive(Debug, Clone)]
pub struct Episode {
    pub state: SearchState,
    pub rng: Rng,
}

/// Samples `n` steps on every episode in lockstep. After each step the
/// running mean reward is updated with the batch mean of the raw reward.
pub fn collect_segment(
    episodes: &mut [Episode],
    policy: &Policy,
    env: &EnvConfig,
    n: usize,
    k: usize,
    ema: &mut f64,
    ema_decay: f64,
    exec: Exec,
) -> Result<Vec<Trajectory>> {
    let mut steps: Vec<Vec<Transition>> = (0..episodes.len()).map(|_| Vec::with_capacity(n)).collect();
    for _ in 0..n {
        let mean_r = *ema;
        let out = par::map_mut(exec, episodes, |ep| -> Result<Transition> {
            let snap = Snapshot::of(&ep.state, env);
            let dec = ep.state.propose(policy, env, DecodeMode::Sample(&mut ep.rng), k)?;
            let rewards = env_step(&mut ep.state, &dec.trace, env, mean_r)?;
            Ok(Transition { snap, trace: dec.trace, old_logprob: dec.logprob, rewards })
        });
        let mut total = 0.0;
        for (i, tr) in out.into_iter().enumerate() {
            let tr = tr?;
            total += tr.rewards.r;
            steps[i].push(tr);
        }
        if !episodes.is_empty() {
            *ema = ema_decay * *ema + (1.0 - ema_decay) * total / episodes.len() as f64;
        }
    }
    Ok(steps
        .into_iter()
        .zip(episodes.iter())
        .map(|(steps, ep)| Trajectory { steps, last: Snapshot::of(&ep.state, env) })
        .collect())
}

/// Discounted returns bootstrapped from `bootstrap`, and advantages `R - v`.
pub fn returns_and_advantages(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let mut ret = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        ret[t] = acc;
    }
    let adv = ret.iter().zip(values).map(|(r, v)| r - v).collect();
    (ret, adv)
}

/// Clipped surrogate for one sample: `(objective, ∂objective/∂logprob)`.
pub fn ppo_surrogate(ratio: f64, adv: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
    if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    }
}

/// Value-clipped squared error for one sample: `(loss, ∂loss/∂v)`.
pub fn clipped_value_loss(v: f64, v_old: f64, ret: f64, clip: f64) -> (f64, f64) {
    let l1 = (v - ret).powi(2);
    let vc = v_old + (v - v_old).clamp(-clip, clip);
    let l2 = (vc - ret).powi(2);
    if l1 >= l2 {
        (l1, 2.0 * (v - ret))
    } else if (v - v_old).abs() < clip {
        (l2, 2.0 * (vc - ret))
    } else {
        (l2, 0.0)
    }
}

fn head_reward(head: Head, r: &RewardTerms, w: &ShapingWeights) -> f64 {
    match head {
        Head::Origin => r.r,
        Head::Reg => w.alpha * r.r_reg,
        Head::Bonus => w.beta * r.r_bonus,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UpdateParams {
    pub gamma: f64,
    pub clip: f64,
    pub shaping: ShapingWeights,
}

/// Loss values and gradients of one PPO pass over a batch of trajectories.
#[derive(Debug, Clone)]
pub struct PassResult {
    /// Mean clipped surrogate (to be maximized).
    pub policy_objective: f64,
    /// Mean value loss summed across heads.
    pub critic_loss: f64,
    pub policy_grads: Grads,
    pub critic_grads: Grads,
    /// `values[i][t][head]` for sample `t` of trajectory `i`.
    pub values: Vec<Vec<Vec<f64>>>,
}

struct InstancePass {
    objective: f64,
    critic_loss: f64,
    gp: Grads,
    gc: Grads,
    values: Vec<Vec<f64>>,
}

fn instance_pass(
    policy: &Policy,
    critic: &Critic,
    traj: &Trajectory,
    v_old: Option<&Vec<Vec<f64>>>,
    up: &UpdateParams,
    scale: f64,
) -> Result<InstancePass> {
    let heads = critic.heads();
    let n = traj.steps.len();
    let mut ptapes = Vec::with_capacity(n);
    for tr in &traj.steps {
        let mut t = Tape::new(&policy.params);
        let h = policy.encode(&mut t, &tr.snap.features, &tr.snap.tour)?;
        let lp = policy.trace_logprob_var(&mut t, h, &tr.snap.tour, tr.snap.policy_es.as_ref(), &tr.trace)?;
        ptapes.push((t, h, lp));
    }
    let mut ctapes = Vec::with_capacity(n);
    for (i, tr) in traj.steps.iter().enumerate() {
        let mut ct = Tape::new(&critic.params);
        let hv = ct.input(ptapes[i].0.value(ptapes[i].1).clone());
        let vs = critic.values_var(&mut ct, hv, &tr.snap.critic_input())?;
        ctapes.push((ct, vs));
    }
    let h_last = policy.embed(&traj.last.features, &traj.last.tour)?;
    let boot = critic.critic_values(&h_last, &traj.last.critic_input())?;

    let values: Vec<Vec<f64>> =
        ctapes.iter().map(|(ct, vs)| vs.iter().map(|&v| ct.scalar(v)).collect()).collect();
    let mut adv_total = vec![0.0; n];
    let mut returns = vec![vec![0.0; heads.len()]; n];
    for (j, &head) in heads.iter().enumerate() {
        let rewards: Vec<f64> = traj.steps.iter().map(|s| head_reward(head, &s.rewards, &up.shaping)).collect();
        let vals: Vec<f64> = values.iter().map(|v| v[j]).collect();
        let (ret, adv) = returns_and_advantages(&rewards, &vals, boot[j], up.gamma);
        for t in 0..n {
            adv_total[t] += adv[t];
            returns[t][j] = ret[t];
        }
    }

    let mut gp = policy.params.zero_grads();
    let mut objective = 0.0;
    for (t, (tape, _, lp)) in ptapes.iter().enumerate() {
        let ratio = (tape.scalar(*lp) - traj.steps[t].old_logprob).exp();
        let (obj, dobj) = ppo_surrogate(ratio, adv_total[t], up.clip);
        objective += obj;
        if dobj != 0.0 {
            tape.backward(*lp, -dobj * scale, &mut gp);
        }
    }
    let mut gc = critic.params.zero_grads();
    let mut critic_loss = 0.0;
    for (t, (ct, vs)) in ctapes.iter().enumerate() {
        let mut seeds = Vec::with_capacity(heads.len());
        for j in 0..heads.len() {
            let v = values[t][j];
            let vo = v_old.map_or(v, |o| o[t][j]);
            let (loss, dv) = clipped_value_loss(v, vo, returns[t][j], up.clip);
            critic_loss += loss;
            seeds.push((vs[j], dv * scale));
        }
        ct.backward_many(&seeds, &mut gc);
    }
    Ok(InstancePass { objective, critic_loss, gp, gc, values })
}

/// Forward and backward pass of the PPO losses over all samples.
pub fn ppo_losses(
    policy: &Policy,
    critic: &Critic,
    trajectories: &[Trajectory],
    v_old: Option<&[Vec<Vec<f64>>]>,
    up: &UpdateParams,
    exec: Exec,
) -> Result<PassResult> {
    let samples: usize = trajectories.iter().map(|t| t.steps.len()).sum();
    let scale = 1.0 / samples.max(1) as f64;
    let parts = par::map_range(exec, trajectories.len(), |i| {
        instance_pass(policy, critic, &trajectories[i], v_old.map(|v| &v[i]), up, scale)
    });
    let mut policy_grads = policy.params.zero_grads();
    let mut critic_grads = critic.params.zero_grads();
    let (mut obj, mut closs) = (0.0, 0.0);
    let mut values = Vec::with_capacity(trajectories.len());
    for p in parts {
        let p = p?;
        policy_grads.add_assign(&p.gp);
        critic_grads.add_assign(&p.gc);
        obj += p.objective;
        closs += p.critic_loss;
        values.push(p.values);
    }
    Ok(PassResult {
        policy_objective: obj * scale,
        critic_loss: closs * scale,
        policy_grads,
        critic_grads,
        values,
    })
}

/// Adaptive-moment optimizer with the usual default moment coefficients.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: params.zero_grads(), v: params.zero_grads() }
    }

    /// Descent step on `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.tensors.iter().enumerate() {
            let p = params.get_mut(crate::neural::ParamId(i));
            let m = &mut self.m.tensors[i];
            let v = &mut self.v.tensors[i];
            for k in 0..g.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / b1t;
                let vh = v.data[k] / b2t;
                p.data[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_obj: f64,
    pub mean_reward: f64,
    pub p_ff: f64,
    pub p_uu: f64,
    pub lr: f64,
    pub val_obj: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub reports: Vec<EpochReport>,
    /// Validation objective of the untrained policy.
    pub initial_val: f64,
}

pub struct Trainer {
    pub cfg: Config,
    pub policy: Policy,
    pub critic: Critic,
    adam_p: Adam,
    adam_c: Adam,
    ema: f64,
    exec: Exec,
    val_set: Vec<Instance>,
}

impl Trainer {
    pub fn new(cfg: Config, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        let policy = Policy::new(cfg.policy_config(), &mut rng::stream(cfg.seed, &[0]))?;
        let critic = Critic::new(cfg.critic_config(), &mut rng::stream(cfg.seed, &[1]))?;
        let adam_p = Adam::new(&policy.params, cfg.lr_policy);
        let adam_c = Adam::new(&critic.params, cfg.lr_critic);
        let val_set = validation_set(&cfg)?;
        Ok(Trainer { cfg, policy, critic, adam_p, adam_c, ema: 0.0, exec, val_set })
    }

    fn new_episodes(&self, epoch: usize, batch: usize) -> Result<Vec<Episode>> {
        let cfg = &self.cfg;
        let env = cfg.env_config();
        par::map_range(self.exec, cfg.batch_size, |i| {
            let mut rng = rng::stream(cfg.seed, &[2, epoch as u64, batch as u64, i as u64]);
            let inst = generate_with(cfg.problem, cfg.size, &mut rng, cfg.capacity_rule(), format!("train-{epoch}-{batch}-{i}"))?;
            let tour = initial_tour(&inst, &mut rng)?;
            let state = SearchState::new(inst, tour, &env)?;
            Ok(Episode { state, rng })
        })
        .into_iter()
        .collect()
    }

    /// Runs the current policy without collecting data and restarts every
    /// episode from its best-so-far solution.
    fn warm_up(&self, episodes: &mut [Episode], steps: usize) -> Result<()> {
        if steps == 0 {
            return Ok(());
        }
        let env = self.cfg.env_config();
        let (policy, k) = (&self.policy, self.cfg.k);
        par::map_mut(self.exec, episodes, |ep| -> Result<()> {
            for _ in 0..steps {
                let dec = ep.state.propose(policy, &env, DecodeMode::Sample(&mut ep.rng), k)?;
                env_step(&mut ep.state, &dec.trace, &env, 0.0)?;
            }
            let inst = ep.state.instance.clone();
            ep.state = SearchState::new(inst, ep.state.bsf_tour.clone(), &env)?;
            Ok(())
        })
        .into_iter()
        .collect()
    }

    fn update(&mut self, trajs: &[Trajectory], where_: &str) -> Result<()> {
        let up = UpdateParams { gamma: self.cfg.gamma, clip: self.cfg.clip, shaping: self.cfg.env_config().shaping };
        let mut v_old: Option<Vec<Vec<Vec<f64>>>> = None;
        for pass in 0..self.cfg.ppo_epochs {
            let mut res = ppo_losses(&self.policy, &self.critic, trajs, v_old.as_deref(), &up, self.exec)?;
            if !res.policy_objective.is_finite() || !res.critic_loss.is_finite() {
                return Err(Error::Internal(format!(
                    "training diverged at {where_}, pass {pass}: policy objective {}, critic loss {}",
                    res.policy_objective, res.critic_loss
                )));
            }
            if !res.policy_grads.is_finite() || !res.critic_grads.is_finite() {
                return Err(Error::Internal(format!("non-finite gradients at {where_}, pass {pass}")));
            }
            res.policy_grads.clip_norm(self.cfg.grad_clip);
            res.critic_grads.clip_norm(self.cfg.grad_clip);
            self.adam_p.step(&mut self.policy.params, &res.policy_grads);
            self.adam_c.step(&mut self.critic.params, &res.critic_grads);
            if !self.policy.params.all_finite() || !self.critic.params.all_finite() {
                return Err(Error::Internal(format!("non-finite parameters after {where_}, pass {pass}")));
            }
            if v_old.is_none() {
                v_old = Some(res.values);
            }
        }
        Ok(())
    }

    /// Trains one batch; returns `(mean final bsf, mean reward, P(F|F), P(U|U))`.
    pub fn train_batch(&mut self, epoch: usize, batch: usize) -> Result<(f64, f64, f64, f64)> {
        let mut episodes = self.new_episodes(epoch, batch)?;
        self.warm_up(&mut episodes, self.cfg.warmup_steps(epoch))?;
        let env = self.cfg.env_config();
        let (mut reward_sum, mut reward_count) = (0.0, 0usize);
        let mut t = 0;
        while t < self.cfg.t_train {
            let n = self.cfg.n_step.min(self.cfg.t_train - t);
            let mut ema = self.ema;
            let trajs = collect_segment(
                &mut episodes,
                &self.policy,
                &env,
                n,
                self.cfg.k,
                &mut ema,
                self.cfg.ema_decay,
                self.exec,
            )?;
            self.ema = ema;
            for tr in &trajs {
                for s in &tr.steps {
                    reward_sum += s.rewards.r;
                    reward_count += 1;
                }
            }
            self.update(&trajs, &format!("epoch {epoch}, batch {batch}, step {t}"))?;
            t += n;
        }
        let b = episodes.len() as f64;
        let mean_obj = episodes.iter().map(|e| e.state.bsf_cost).sum::<f64>() / b;
        let es: Vec<EsFeatures> = episodes.iter().map(|e| e.state.es()).collect();
        let p_ff = es.iter().map(|e| e.f_given_f()).sum::<f64>() / b;
        let p_uu = es.iter().map(|e| e.u_given_u()).sum::<f64>() / b;
        Ok((mean_obj, reward_sum / reward_count.max(1) as f64, p_ff, p_uu))
    }

    pub fn set_epoch_rates(&mut self, epoch: usize) {
        self.adam_p.lr = self.cfg.lr_at(self.cfg.lr_policy, epoch);
        self.adam_c.lr = self.cfg.lr_at(self.cfg.lr_critic, epoch);
    }

    pub fn lr_policy(&self) -> f64 {
        self.adam_p.lr
    }

    pub fn validate(&self) -> Result<f64> {
        validate_policy(&self.policy, &self.cfg, &self.val_set, self.exec)
    }

    pub fn checkpoint(&self, epoch: Option<usize>, val: Option<f64>) -> Checkpoint {
        Checkpoint::from_models(
            &self.cfg,
            &self.policy,
            &self.critic,
            TrainingMeta { epoch, val_objective: val, lr_policy: self.adam_p.lr, lr_critic: self.adam_c.lr },
        )
    }
}

pub fn validation_set(cfg: &Config) -> Result<Vec<Instance>> {
    (0..cfg.val_size)
        .map(|i| {
            let mut r = rng::stream(cfg.val_seed, &[0, i as u64]);
            generate_with(cfg.problem, cfg.size, &mut r, cfg.capacity_rule(), format!("val-{i}"))
        })
        .collect()
}

/// Mean best-so-far objective after `val_steps` sampled steps from fixed
/// random initial solutions.
pub fn validate_policy(policy: &Policy, cfg: &Config, set: &[Instance], exec: Exec) -> Result<f64> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let env = cfg.env_config();
    let costs = par::map_range(exec, set.len(), |i| -> Result<f64> {
        let mut r = rng::stream(cfg.val_seed, &[1, i as u64]);
        let tour = initial_tour(&set[i], &mut r)?;
        let mut state = SearchState::new(set[i].clone(), tour, &env)?;
        for _ in 0..cfg.val_steps {
            let dec = state.propose(policy, &env, DecodeMode::Sample(&mut r), cfg.k)?;
            env_step(&mut state, &dec.trace, &env, 0.0)?;
        }
        Ok(state.bsf_cost)
    });
    let mut sum = 0.0;
    for c in costs {
        sum += c?;
    }
    Ok(sum / set.len() as f64)
}

/// Full training run. `on_epoch` sees every epoch's report and checkpoint.
pub fn train<F>(cfg: &Config, exec: Exec, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochReport, &Checkpoint) -> Result<()>,
{
    let mut tr = Trainer::new(cfg.clone(), exec)?;
    let initial_val = tr.validate()?;
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;
    let mut last = None;
    for epoch in 0..cfg.epochs {
        tr.set_epoch_rates(epoch);
        let mut acc = (0.0, 0.0, 0.0, 0.0);
        for b in 0..cfg.batches {
            let s = tr.train_batch(epoch, b)?;
            acc = (acc.0 + s.0, acc.1 + s.1, acc.2 + s.2, acc.3 + s.3);
        }
        let nb = cfg.batches as f64;
        let val = tr.validate()?;
        let report = EpochReport {
            epoch,
            mean_obj: acc.0 / nb,
            mean_reward: acc.1 / nb,
            p_ff: acc.2 / nb,
            p_uu: acc.3 / nb,
            lr: tr.lr_policy(),
            val_obj: val,
        };
        let ckpt = tr.checkpoint(Some(epoch), Some(val));
        on_epoch(&report, &ckpt)?;
        let better = best.as_ref().is_none_or(|b| b.meta.val_objective.is_none_or(|bv| val < bv));
        if better {
            best = Some(ckpt.clone());
        }
        reports.push(report);
        last = Some(ckpt);
    }
    let last = last.unwrap_or_else(|| tr.checkpoint(None, None));
    Ok(TrainOutcome { best: best.unwrap_or_else(|| last.clone()), last, reports, initial_val })
}
