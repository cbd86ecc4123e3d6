//! Model checkpoints: configuration echo plus every parameter tensor by name.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{Critic, Policy};
use crate::neural::{Matrix, ParamSet};
use crate::rng;
use crate::training::Config;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: Option<usize>,
    pub val_objective: Option<f64>,
    pub lr_policy: f64,
    pub lr_critic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: Config,
    pub policy: Vec<Tensor>,
    pub critic: Vec<Tensor>,
    pub meta: TrainingMeta,
}

fn tensors(ps: &ParamSet) -> Vec<Tensor> {
    ps.iter()
        .map(|(_, name, m)| Tensor { name: name.to_string(), rows: m.rows, cols: m.cols, data: m.data.clone() })
        .collect()
}

fn load_into(ps: &mut ParamSet, tensors: &[Tensor], what: &str) -> Result<()> {
    if tensors.len() != ps.len() {
        return Err(Error::Config(format!("{what}: checkpoint has {} tensors, model expects {}", tensors.len(), ps.len())));
    }
    for t in tensors {
        let id = ps.find(&t.name).ok_or_else(|| Error::Config(format!("{what}: unexpected tensor `{}`", t.name)))?;
        let m = ps.get(id);
        if (m.rows, m.cols) != (t.rows, t.cols) || t.data.len() != t.rows * t.cols {
            return Err(Error::Config(format!(
                "{what}: tensor `{}` is {}x{}, model expects {}x{}",
                t.name, t.rows, t.cols, m.rows, m.cols
            )));
        }
        *ps.get_mut(id) = Matrix::from_vec(t.rows, t.cols, t.data.clone());
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_models(config: &Config, policy: &Policy, critic: &Critic, meta: TrainingMeta) -> Self {
        Checkpoint {
            version: FORMAT_VERSION,
            config: config.clone(),
            policy: tensors(&policy.params),
            critic: tensors(&critic.params),
            meta,
        }
    }

    /// Rebuilds both networks, checking every tensor against the shapes implied
    /// by the embedded configuration.
    pub fn restore(&self) -> Result<(Policy, Critic)> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", self.version)));
        }
        self.config.validate()?;
        let mut scratch = rng::seeded(0);
        let mut policy = Policy::new(self.config.policy_config(), &mut scratch)?;
        let mut critic = Critic::new(self.config.critic_config(), &mut scratch)?;
        load_into(&mut policy.params, &self.policy, "policy")?;
        load_into(&mut critic.params, &self.critic, "critic")?;
        Ok((policy, critic))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("unreadable checkpoint: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }

    /// True when both checkpoints hold bit-identical parameters.
    pub fn bits_equal(&self, other: &Checkpoint) -> bool {
        let same = |a: &[Tensor], b: &[Tensor]| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.name == y.name
                        && x.rows == y.rows
                        && x.cols == y.cols
                        && x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits())
                })
        };
        same(&self.policy, &other.policy) && same(&self.critic, &other.critic)
    }
}
