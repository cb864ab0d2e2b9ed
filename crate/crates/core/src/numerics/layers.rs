use rand::Rng;
use serde::{Deserialize, Serialize};

use super::param::{ParamNode, Parameterized};
use super::tape::{Tape, Var};
use super::tensor::DenseTensor;
use crate::error::{MixerError, Result};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Batch statistics observed during a training-mode forward pass, applied
/// to the running buffers only once the whole step has succeeded.
#[derive(Debug, Clone)]
pub struct BnStatsUpdate {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub type StatsSink = Vec<BnStatsUpdate>;

/// Uniform in `±1/√fan_in`.
pub fn init_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> DenseTensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    DenseTensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// Fully connected layer `y = x·W + b` with `W: in×out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamNode,
    pub bias: Option<ParamNode>,
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        Linear {
            weight: ParamNode::new(
                format!("{name}.weight"),
                init_uniform(rng, &[fan_in, fan_out], fan_in),
                true,
            ),
            bias: bias.then(|| {
                ParamNode::new(format!("{name}.bias"), DenseTensor::zeros(&[fan_out]), true)
            }),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

impl Parameterized for Linear {
    fn params(&self) -> Vec<&ParamNode> {
        let mut v = vec![&self.weight];
        v.extend(self.bias.as_ref());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamNode> {
        let mut v = vec![&mut self.weight];
        v.extend(self.bias.as_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub name: String,
    pub gamma: ParamNode,
    pub beta: ParamNode,
    pub running_mean: ParamNode,
    pub running_var: ParamNode,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        BatchNorm {
            name: name.to_string(),
            gamma: ParamNode::new(format!("{name}.gamma"), DenseTensor::filled(&[dim], 1.0), true),
            beta: ParamNode::new(format!("{name}.beta"), DenseTensor::zeros(&[dim]), true),
            running_mean: ParamNode::new(
                format!("{name}.running_mean"),
                DenseTensor::zeros(&[dim]),
                false,
            ),
            running_var: ParamNode::new(
                format!("{name}.running_var"),
                DenseTensor::filled(&[dim], 1.0),
                false,
            ),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode, sink: &mut StatsSink) -> Result<Var> {
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        match mode {
            Mode::Train => {
                let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, self.eps)?;
                sink.push(BnStatsUpdate {
                    layer: self.name.clone(),
                    mean,
                    var,
                });
                Ok(y)
            }
            Mode::Infer => tape.batch_norm_infer(
                x,
                gamma,
                beta,
                self.running_mean.value.data(),
                self.running_var.value.data(),
                self.eps,
            ),
        }
    }

    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn apply_update(&mut self, update: &BnStatsUpdate) -> Result<()> {
        if update.mean.len() != self.running_mean.value.len() {
            return Err(MixerError::shape(
                "batch_norm update",
                self.running_mean.shape(),
                &[update.mean.len()],
            ));
        }
        let m = self.momentum;
        for (r, b) in self.running_mean.value.data_mut().iter_mut().zip(&update.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.value.data_mut().iter_mut().zip(&update.var) {
            *r = m * *r + (1.0 - m) * b;
        }
        Ok(())
    }
}

impl Parameterized for BatchNorm {
    fn params(&self) -> Vec<&ParamNode> {
        vec![&self.gamma, &self.beta, &self.running_mean, &self.running_var]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamNode> {
        vec![
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }
}

/// Fully connected layer followed by batch normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBn {
    pub linear: Linear,
    pub bn: BatchNorm,
}

impl LinearBn {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        LinearBn {
            linear: Linear::new(&format!("{name}.fc"), fan_in, fan_out, true, rng),
            bn: BatchNorm::new(&format!("{name}.bn"), fan_out),
        }
    }
}

impl Parameterized for LinearBn {
    fn params(&self) -> Vec<&ParamNode> {
        let mut v = self.linear.params();
        v.extend(self.bn.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamNode> {
        let mut v = self.linear.params_mut();
        v.extend(self.bn.params_mut());
        v
    }
}

/// `y = BN(x·W + b)`.
pub fn linear_bn_forward(
    tape: &mut Tape,
    x: Var,
    layer: &LinearBn,
    mode: Mode,
    sink: &mut StatsSink,
) -> Result<Var> {
    let h = layer.linear.forward(tape, x)?;
    layer.bn.forward(tape, h, mode, sink)
}
