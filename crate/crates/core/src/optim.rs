//! SGD with momentum, weight decay and an optional L1 subgradient on BN scales.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    ConvWeight,
    BnGamma,
    BnBeta,
    LinearWeight,
    LinearBias,
}

/// Mutable view of one trainable tensor.
pub struct ParamMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'a mut Tensor,
}

/// Named gradients, in the same order the model enumerates its parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    pub entries: Vec<(String, Tensor)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn is_zero(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, t)| t.data().iter().all(|&v| v == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Strength of the `sign(gamma)` term added to every BN scale gradient.
    pub bn_l1_strength: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            bn_l1_strength: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be a nonnegative real"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be nonnegative"));
        }
        if self.bn_l1_strength < 0.0 {
            return Err(Error::config("bn_l1_strength", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    velocity: HashMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            velocity: HashMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }

    pub fn buffer_count(&self) -> usize {
        self.velocity.len()
    }

    /// Drops velocity buffers whose parameter no longer exists or changed shape.
    pub fn retain_live<'a>(&mut self, live: impl IntoIterator<Item = (&'a str, &'a [usize])>) {
        let live: HashMap<&str, &[usize]> = live.into_iter().collect();
        self.velocity
            .retain(|name, v| live.get(name.as_str()).is_some_and(|s| *s == v.shape()));
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One update: `v = mu*v + g + wd*w (+ l1*sign(w) for BN scales)`, `w -= lr*v`.
pub fn sgd_step(
    params: &mut [ParamMut<'_>],
    grads: &Gradients,
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != grads.entries.len() {
        return Err(Error::structural(
            "optimizer",
            format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.entries.len()
            ),
        ));
    }
    let cfg = state.config;
    let live: Vec<(String, Vec<usize>)> = params
        .iter()
        .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
        .collect();
    state.retain_live(live.iter().map(|(n, s)| (n.as_str(), s.as_slice())));

    for (p, (gname, g)) in params.iter_mut().zip(&grads.entries) {
        if &p.name != gname || p.tensor.shape() != g.shape() {
            return Err(Error::structural(
                "optimizer",
                format!(
                    "gradient `{gname}` {:?} misaligned with parameter `{}` {:?}",
                    g.shape(),
                    p.name,
                    p.tensor.shape()
                ),
            ));
        }
        let l1 = if p.kind == ParamKind::BnGamma {
            cfg.bn_l1_strength
        } else {
            0.0
        };
        let v = state
            .velocity
            .entry(p.name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for ((w, &gv), vel) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut())
        {
            let step = gv + cfg.weight_decay * *w + l1 * sign(*w);
            *vel = cfg.momentum * *vel + step;
            *w -= cfg.learning_rate * *vel;
        }
        p.tensor.debug_assert_finite("sgd_step");
    }
    Ok(())
}
