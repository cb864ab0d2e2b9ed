//! Stand-in encoders: a position-wise image backbone producing an `h²×n`
//! feature map, a bag-of-tokens text encoder, and the per-side
//! transformation heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MixerError, Result};
use crate::numerics::{
    linear_bn_forward, DenseTensor, Linear, LinearBn, Mode, ParamNode, Parameterized, StatsSink,
    Tape, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Query,
    Doc,
}

/// Backbone output for one image: `h²` positions × `n` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureMap {
    pub grid: DenseTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextFeature {
    pub vec: DenseTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub vec: DenseTensor,
    pub side: Side,
}

impl EmbeddingVector {
    pub fn as_slice(&self) -> &[f64] {
        self.vec.data()
    }
}

/// Two-layer perceptron applied to each of the `h²` raw patches, so every
/// grid position sees only its own region of the raw input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBackbone {
    pub positions: usize,
    pub hidden: Linear,
    pub out: Linear,
}

impl ImageBackbone {
    pub fn new(n_raw: usize, positions: usize, hidden: usize, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if positions == 0 || n_raw % positions != 0 {
            return Err(MixerError::Config(format!(
                "n_raw ({n_raw}) must be a multiple of h² ({positions})"
            )));
        }
        let patch = n_raw / positions;
        Ok(ImageBackbone {
            positions,
            hidden: Linear::new("backbone.hidden", patch, hidden, true, rng),
            out: Linear::new("backbone.out", hidden, channels, true, rng),
        })
    }

    pub fn n_raw(&self) -> usize {
        self.hidden.in_dim() * self.positions
    }

    pub fn channels(&self) -> usize {
        self.out.out_dim()
    }

    /// `[b × n_raw] → [b·h² × n]`.
    pub fn forward(&self, tape: &mut Tape, raw: Var) -> Result<Var> {
        let shape = tape.value(raw).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.n_raw() {
            return Err(MixerError::shape("encode_image", &shape, &[self.n_raw()]));
        }
        let patches = tape.reshape(raw, &[shape[0] * self.positions, self.hidden.in_dim()])?;
        let h = self.hidden.forward(tape, patches)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, h)
    }
}

impl Parameterized for ImageBackbone {
    fn params(&self) -> Vec<&ParamNode> {
        let mut v = self.hidden.params();
        v.extend(self.out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamNode> {
        let mut v = self.hidden.params_mut();
        v.extend(self.out.params_mut());
        v
    }
}

/// Token embedding table, mean pooled, then a linear projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub table: ParamNode,
    pub proj: Linear,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn new(vocab: usize, d: usize, max_len: usize, rng: &mut impl Rng) -> Self {
        let table = DenseTensor::from_fn(&[vocab, d], |_| rng.random_range(-1.0..1.0));
        TextEncoder {
            table: ParamNode::new("text.table", table, true),
            proj: Linear::new("text.proj", d, d, true, rng),
            max_len,
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn validate(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(MixerError::InvalidTokens("empty token list".into()));
        }
        if tokens.len() > self.max_len {
            return Err(MixerError::InvalidTokens(format!(
                "{} tokens exceeds maximum length {}",
                tokens.len(),
                self.max_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab()) {
            return Err(MixerError::TokenOutOfVocab {
                token: t,
                vocab: self.vocab(),
            });
        }
        Ok(())
    }

    /// `[b]` token lists → `[b × d]`.
    pub fn forward(&self, tape: &mut Tape, tokens: &[Vec<usize>]) -> Result<Var> {
        for t in tokens {
            self.validate(t)?;
        }
        let table = tape.param(&self.table);
        let pooled = tape.embed_mean(table, tokens)?;
        self.proj.forward(tape, pooled)
    }
}

impl Parameterized for TextEncoder {
    fn params(&self) -> Vec<&ParamNode> {
        let mut v = vec![&self.table];
        v.extend(self.proj.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamNode> {
        let mut v = vec![&mut self.table];
        v.extend(self.proj.params_mut());
        v
    }
}

/// FC → BN → ReLU → FC. Output is not normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformHead {
    pub first: LinearBn,
    pub second: Linear,
}

impl TransformHead {
    pub fn new(name: &str, in_dim: usize, d: usize, rng: &mut impl Rng) -> Self {
        TransformHead {
            first: LinearBn::new(&format!("{name}.first"), in_dim, d, rng),
            second: Linear::new(&format!("{name}.second"), d, d, true, rng),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.first.linear.in_dim()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mode: Mode, sink: &mut StatsSink) -> Result<Var> {
        let h = linear_bn_forward(tape, x, &self.first, mode, sink)?;
        let h = tape.relu(h)?;
        self.second.forward(tape, h)
    }

    /// Looks up the batch-norm layer that produced `update`.
    pub fn apply_stats(&mut self, update: &crate::numerics::BnStatsUpdate) -> Result<bool> {
        if update.layer == self.first.bn.name {
            self.first.bn.apply_update(update)?;
            Ok(true)
        } else {
            Ok(false)
        }
    }
}

impl Parameterized for TransformHead {
    fn params(&self) -> Vec<&ParamNode> {
        let mut v = self.first.params();
        v.extend(self.second.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamNode> {
        let mut v = self.first.params_mut();
        v.extend(self.second.params_mut());
        v
    }
}
