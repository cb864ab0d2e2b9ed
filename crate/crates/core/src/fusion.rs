//! Concept-aware modality fusion.
//!
//! Concept extraction attends from the text feature to two trainable,
//! input-independent memories: `w_attn = softmax(M_k·t)`, `c = M_v·w_attn`.
//! Fusion then uses `c` as the query over the image grid:
//! `W_f = softmax(K_I·c)`, `f_d = V_Iᵀ·W_f`, with `K_I`, `V_I` position-wise
//! linear maps of the feature map. Neither softmax is temperature-scaled.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{ImageFeatureMap, TextFeature};
use crate::error::{MixerError, Result};
use crate::numerics::{DenseTensor, Linear, ParamNode, Parameterized, Tape, Var};

/// External key/value memories: `M_k: e×d`, `M_v: d×e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMemory {
    pub keys: ParamNode,
    pub values: ParamNode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptVector {
    pub vec: DenseTensor,
    /// Attention over the `e` memory slots.
    pub attention: DenseTensor,
}

/// The `F_K`, `F_V` maps from `n` channels to `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub key_map: Linear,
    pub value_map: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedDocVector {
    pub vec: DenseTensor,
    /// Attention over the `h²` grid positions.
    pub weights: DenseTensor,
}

impl ConceptMemory {
    pub fn new(d: usize, e: usize, rng: &mut impl Rng) -> Result<Self> {
        if e == 0 || d == 0 {
            return Err(MixerError::Config("concept memory needs d, e ≥ 1".into()));
        }
        let kb = 1.0 / (d as f64).sqrt();
        let vb = 1.0 / (e as f64).sqrt();
        Ok(ConceptMemory {
            keys: ParamNode::new(
                "fusion.memory_keys",
                DenseTensor::from_fn(&[e, d], |_| rng.random_range(-kb..kb)),
                true,
            ),
            values: ParamNode::new(
                "fusion.memory_values",
                DenseTensor::from_fn(&[d, e], |_| rng.random_range(-vb..vb)),
                true,
            ),
        })
    }

    pub fn from_matrices(keys: DenseTensor, values: DenseTensor) -> Result<Self> {
        let (ks, vs) = (keys.shape(), values.shape());
        if ks.len() != 2 || vs.len() != 2 || ks[0] != vs[1] || ks[1] != vs[0] {
            return Err(MixerError::shape("concept memory", ks, vs));
        }
        Ok(ConceptMemory {
            keys: ParamNode::new("fusion.memory_keys", keys, true),
            values: ParamNode::new("fusion.memory_values", values, true),
        })
    }

    pub fn slots(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.keys.shape()[1]
    }

    /// `t: [b × d]` → (`w_attn: [b × e]`, `c: [b × d]`).
    pub fn forward(&self, tape: &mut Tape, t: Var) -> Result<(Var, Var)> {
        let mk = tape.param(&self.keys);
        let mv = tape.param(&self.values);
        concept_attention(tape, t, mk, mv)
    }
}

/// Concept extraction on already-bound tape values.
pub fn concept_attention(tape: &mut Tape, t: Var, keys: Var, values: Var) -> Result<(Var, Var)> {
    let (ts, ks) = (tape.value(t).shape().to_vec(), tape.value(keys).shape().to_vec());
    if ts.len() != 2 || ks.len() != 2 || ts[1] != ks[1] {
        return Err(MixerError::shape("extract_concept", &ts, &ks));
    }
    let kt = tape.transpose(keys)?;
    let logits = tape.matmul(t, kt)?;
    let w = tape.softmax_rows(logits)?;
    let vt = tape.transpose(values)?;
    let c = tape.matmul(w, vt)?;
    Ok((w, c))
}

impl Parameterized for ConceptMemory {
    fn params(&self) -> Vec<&ParamNode> {
        vec![&self.keys, &self.values]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamNode> {
        vec![&mut self.keys, &mut self.values]
    }
}

impl FusionParams {
    pub fn new(n: usize, d: usize, bias: bool, rng: &mut impl Rng) -> Self {
        FusionParams {
            key_map: Linear::new("fusion.key_map", n, d, bias, rng),
            value_map: Linear::new("fusion.value_map", n, d, bias, rng),
        }
    }

    /// Attention fusion. `grid: [b·h² × n]`, `concept: [b × d]` →
    /// (`W_f: [b × h²]`, `f_d: [b × d]`).
    pub fn forward(&self, tape: &mut Tape, grid: Var, concept: Var, positions: usize) -> Result<(Var, Var)> {
        let keys = self.key_map.forward(tape, grid)?;
        let values = self.value_map.forward(tape, grid)?;
        fusion_attention(tape, keys, values, concept, positions)
    }

    /// Grid values averaged over positions: the uniform-attention limit of
    /// [`FusionParams::forward`].
    pub fn pooled_values(&self, tape: &mut Tape, grid: Var, positions: usize) -> Result<Var> {
        let values = self.value_map.forward(tape, grid)?;
        tape.group_mean(values, positions)
    }
}

/// Text-to-image attention on precomputed `K_I`, `V_I` (`[b·h² × d]` each).
pub fn fusion_attention(tape: &mut Tape, keys: Var, values: Var, concept: Var, positions: usize) -> Result<(Var, Var)> {
    let scores = tape.grouped_scores(keys, concept, positions)?;
    let weights = tape.softmax_rows(scores)?;
    let fused = tape.grouped_weighted_sum(weights, values)?;
    Ok((weights, fused))
}

impl Parameterized for FusionParams {
    fn params(&self) -> Vec<&ParamNode> {
        let mut v = self.key_map.params();
        v.extend(self.value_map.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamNode> {
        let mut v = self.key_map.params_mut();
        v.extend(self.value_map.params_mut());
        v
    }
}

/// Single-sample concept extraction.
pub fn extract_concept(t: &TextFeature, mem: &ConceptMemory) -> Result<ConceptVector> {
    if t.vec.len() != mem.dim() {
        return Err(MixerError::shape("extract_concept", t.vec.shape(), mem.keys.shape()));
    }
    let mut tape = Tape::new();
    let tv = tape.constant(t.vec.reshape(&[1, mem.dim()])?);
    let (w, c) = mem.forward(&mut tape, tv)?;
    Ok(ConceptVector {
        vec: tape.value(c).reshape(&[mem.dim()])?,
        attention: tape.value(w).reshape(&[mem.slots()])?,
    })
}

/// Single-sample fusion of a feature map with a concept vector.
pub fn fuse(map: &ImageFeatureMap, c: &ConceptVector, fp: &FusionParams) -> Result<FusedDocVector> {
    let grid = &map.grid;
    if grid.shape().len() != 2 || grid.shape()[1] != fp.key_map.in_dim() {
        return Err(MixerError::shape("fuse", grid.shape(), fp.key_map.weight.shape()));
    }
    if c.vec.len() != fp.key_map.out_dim() {
        return Err(MixerError::shape("fuse", c.vec.shape(), fp.key_map.weight.shape()));
    }
    let positions = grid.shape()[0];
    let d = c.vec.len();
    let mut tape = Tape::new();
    let g = tape.constant(grid.clone());
    let cv = tape.constant(c.vec.reshape(&[1, d])?);
    let (w, f) = fp.forward(&mut tape, g, cv, positions)?;
    Ok(FusedDocVector {
        vec: tape.value(f).reshape(&[d])?,
        weights: tape.value(w).reshape(&[positions])?,
    })
}

/// Elementwise mean of two equal-length vectors.
pub fn average_fuse(img_pooled: &DenseTensor, txt: &DenseTensor) -> Result<DenseTensor> {
    if img_pooled.len() != txt.len() {
        return Err(MixerError::shape("average_fuse", img_pooled.shape(), txt.shape()));
    }
    DenseTensor::new(
        img_pooled.shape().to_vec(),
        img_pooled.data().iter().zip(txt.data()).map(|(a, b)| 0.5 * (a + b)).collect(),
    )
}

/// Tape version of [`average_fuse`].
pub fn average_fuse_var(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let s = tape.add(a, b)?;
    tape.scale(s, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mem(keys: Vec<f64>, values: Vec<f64>, d: usize, e: usize) -> ConceptMemory {
        ConceptMemory::from_matrices(
            DenseTensor::matrix(e, d, keys).unwrap(),
            DenseTensor::matrix(d, e, values).unwrap(),
        )
        .unwrap()
    }

    fn text(v: Vec<f64>) -> TextFeature {
        TextFeature {
            vec: DenseTensor::vector(v),
        }
    }

    /// Fusion params whose maps are identities, so `K_I = V_I = I`.
    fn identity_fusion(n: usize) -> FusionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fp = FusionParams::new(n, n, true, &mut rng);
        fp.key_map.weight.value = DenseTensor::identity(n);
        fp.value_map.weight.value = DenseTensor::identity(n);
        fp
    }

    #[test]
    fn single_slot_returns_its_value_column() {
        let m = mem(vec![0.3, -2.0], vec![5.0, -7.0], 2, 1);
        let c = extract_concept(&text(vec![4.0, 1.0]), &m).unwrap();
        assert_eq!(c.attention.data(), &[1.0]);
        assert_eq!(c.vec.data(), &[5.0, -7.0]);
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let m = mem(vec![0.5, 1.0, 0.5, 1.0, 0.5, 1.0], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3);
        let c = extract_concept(&text(vec![0.7, -0.1]), &m).unwrap();
        for &w in c.attention.data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((c.vec.data()[0] - 2.0).abs() < 1e-12);
        assert!((c.vec.data()[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn concept_hand_case() {
        let m = mem(vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 2.0, 3.0, 4.0], 2, 2);
        let c = extract_concept(&text(vec![1.0, 0.0]), &m).unwrap();
        let e = std::f64::consts::E;
        let w0 = e / (e + 1.0);
        assert!((c.attention.data()[0] - 0.7311).abs() < 1e-4);
        assert!((c.attention.data()[1] - 0.2689).abs() < 1e-4);
        assert!((c.vec.data()[0] - (w0 + 2.0 * (1.0 - w0))).abs() < 1e-12);
        assert!((c.vec.data()[0] - 1.2689).abs() < 1e-4);
        assert!((c.vec.data()[1] - 3.2689).abs() < 1e-4);
    }

    #[test]
    fn concept_dimension_mismatch() {
        let m = mem(vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 2.0, 3.0, 4.0], 2, 2);
        assert!(extract_concept(&text(vec![1.0, 0.0, 3.0]), &m).is_err());
    }

    #[test]
    fn fusion_hand_case() {
        let fp = identity_fusion(2);
        // K_I = V_I = I scaled: use I = [[1,0],[0,1]] and V = 2·I via value map.
        let mut fp2 = fp.clone();
        fp2.value_map.weight.value = DenseTensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let map = ImageFeatureMap {
            grid: DenseTensor::identity(2),
        };
        let c = ConceptVector {
            vec: DenseTensor::vector(vec![1.0, 0.0]),
            attention: DenseTensor::vector(vec![1.0]),
        };
        let f = fuse(&map, &c, &fp2).unwrap();
        assert!((f.weights.data()[0] - 0.7311).abs() < 1e-4);
        assert!((f.vec.data()[0] - 1.4622).abs() < 1e-4);
        assert!((f.vec.data()[1] - 0.5378).abs() < 1e-4);
    }

    #[test]
    fn identical_keys_and_single_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut fp = FusionParams::new(3, 2, true, &mut rng);
        // zero key map ⇒ all K_I rows equal the bias ⇒ uniform weights
        fp.key_map.weight.value.fill(0.0);
        let grid = DenseTensor::from_fn(&[4, 3], |_| rng.random_range(-1.0..1.0));
        let c = ConceptVector {
            vec: DenseTensor::vector(vec![0.9, -2.0]),
            attention: DenseTensor::vector(vec![1.0]),
        };
        let f = fuse(&ImageFeatureMap { grid: grid.clone() }, &c, &fp).unwrap();
        let mut tape = Tape::new();
        let g = tape.constant(grid);
        let pooled = fp.pooled_values(&mut tape, g, 4).unwrap();
        assert!(f.vec.max_abs_diff(&tape.value(pooled).reshape(&[2]).unwrap()) < 1e-12);

        let one = DenseTensor::matrix(1, 3, vec![0.2, 0.4, -0.6]).unwrap();
        let f1 = fuse(&ImageFeatureMap { grid: one.clone() }, &c, &fp).unwrap();
        assert_eq!(f1.weights.data(), &[1.0]);
        let mut tape = Tape::new();
        let g = tape.constant(one);
        let v = fp.value_map.forward(&mut tape, g).unwrap();
        assert!(f1.vec.max_abs_diff(&tape.value(v).reshape(&[2]).unwrap()) < 1e-15);
    }

    #[test]
    fn average_fuse_examples() {
        let v = DenseTensor::vector(vec![1.5, -2.0]);
        assert_eq!(average_fuse(&v, &v).unwrap(), v);
        let z = average_fuse(&v, &v.map(|x| -x)).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
        let m = average_fuse(&DenseTensor::vector(vec![1.0, 3.0]), &DenseTensor::vector(vec![3.0, 1.0])).unwrap();
        assert_eq!(m.data(), &[2.0, 2.0]);
        assert!(average_fuse(&v, &DenseTensor::vector(vec![1.0])).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn attention_weights_are_distributions_and_fused_in_hull(seed in 0u64..500) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (d, e, n, h2) = (4, 3, 5, 4);
                let m = ConceptMemory::new(d, e, &mut rng).unwrap();
                let fp = FusionParams::new(n, d, true, &mut rng);
                let t = text((0..d).map(|_| rng.random_range(-3.0..3.0)).collect());
                let c = extract_concept(&t, &m).unwrap();
                prop_assert!((c.attention.sum() - 1.0).abs() <= 1e-12);
                prop_assert!(c.attention.data().iter().all(|&w| w >= 0.0));
                let grid = DenseTensor::from_fn(&[h2, n], |_| rng.random_range(-2.0..2.0));
                let f = fuse(&ImageFeatureMap { grid: grid.clone() }, &c, &fp).unwrap();
                prop_assert!((f.weights.sum() - 1.0).abs() <= 1e-12);
                prop_assert!(f.weights.data().iter().all(|&w| w >= 0.0));
                // convex hull: each coordinate within the rows' range
                let mut tape = Tape::new();
                let g = tape.constant(grid);
                let v = fp.value_map.forward(&mut tape, g).unwrap();
                let vv = tape.value(v);
                for j in 0..d {
                    let lo = (0..h2).map(|r| vv.get(r, j)).fold(f64::INFINITY, f64::min);
                    let hi = (0..h2).map(|r| vv.get(r, j)).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(f.vec.data()[j] >= lo - 1e-12 && f.vec.data()[j] <= hi + 1e-12);
                }
            }
        }
    }
}
