//! The two-tower model: query tower (backbone → pool → query head) and doc
//! tower (backbone + text → fusion → doc head), both L2-normalized.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{EmbeddingVector, ImageBackbone, ImageFeatureMap, Side, TextEncoder, TextFeature, TransformHead};
use crate::error::{MixerError, Result};
use crate::fusion::{average_fuse_var, ConceptMemory, FusionParams};
use crate::numerics::{BnStatsUpdate, DenseTensor, Mode, ParamNode, Parameterized, StatsSink, Tape, Var};

/// How the doc tower combines image and text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Concept extraction plus text-to-image attention fusion.
    #[serde(rename = "mixer")]
    Mixer,
    /// Image only: grid values pooled uniformly, text ignored.
    #[serde(rename = "mixer-i")]
    ImageOnly,
    /// Pooled grid values averaged with the text feature.
    #[serde(rename = "mixer-e")]
    Average,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Mixer => "mixer",
            Variant::ImageOnly => "mixer-i",
            Variant::Average => "mixer-e",
        }
    }

    pub fn all() -> [Variant; 3] {
        [Variant::Mixer, Variant::ImageOnly, Variant::Average]
    }
}

impl std::str::FromStr for Variant {
    type Err = MixerError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixer" => Ok(Variant::Mixer),
            "mixer-i" => Ok(Variant::ImageOnly),
            "mixer-e" => Ok(Variant::Average),
            other => Err(MixerError::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding and concept dimension.
    pub d: usize,
    /// Concept memory slots.
    pub e: usize,
    /// Grid positions of the image feature map.
    pub h2: usize,
    /// Channels per grid position.
    pub n: usize,
    pub n_raw: usize,
    pub backbone_hidden: usize,
    pub vocab: usize,
    pub max_text_len: usize,
    pub fusion_bias: bool,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            e: 4,
            h2: 4,
            n: 16,
            n_raw: 64,
            backbone_hidden: 32,
            vocab: 512,
            max_text_len: 20,
            fusion_bias: true,
            variant: Variant::Mixer,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("e", self.e),
            ("h2", self.h2),
            ("n", self.n),
            ("n_raw", self.n_raw),
            ("backbone_hidden", self.backbone_hidden),
            ("vocab", self.vocab),
            ("max_text_len", self.max_text_len),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(MixerError::Config(format!("model.{k} must be positive")));
        }
        if self.n_raw % self.h2 != 0 {
            return Err(MixerError::Config(format!(
                "model.n_raw ({}) must be a multiple of model.h2 ({})",
                self.n_raw, self.h2
            )));
        }
        Ok(())
    }
}

/// Parameter groups, used for freezing and hashing.
pub const GROUPS: [&str; 5] = ["backbone", "text", "fusion", "query_transform", "doc_transform"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerModel {
    pub config: ModelConfig,
    pub backbone: ImageBackbone,
    pub text: TextEncoder,
    pub memory: ConceptMemory,
    pub fusion: FusionParams,
    pub query_head: TransformHead,
    pub doc_head: TransformHead,
}

fn stack_rows(rows: &[&[f64]], width: usize, what: &'static str) -> Result<DenseTensor> {
    if rows.is_empty() {
        return Err(MixerError::InvalidTensor(format!("{what}: empty batch")));
    }
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        if r.len() != width {
            return Err(MixerError::shape(what, &[r.len()], &[width]));
        }
        data.extend_from_slice(r);
    }
    DenseTensor::matrix(rows.len(), width, data)
}

impl MixerModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        Ok(MixerModel {
            backbone: ImageBackbone::new(c.n_raw, c.h2, c.backbone_hidden, c.n, &mut rng)?,
            text: TextEncoder::new(c.vocab, c.d, c.max_text_len, &mut rng),
            memory: ConceptMemory::new(c.d, c.e, &mut rng)?,
            fusion: FusionParams::new(c.n, c.d, c.fusion_bias, &mut rng),
            query_head: TransformHead::new("query_transform", c.n, c.d, &mut rng),
            doc_head: TransformHead::new("doc_transform", c.d, c.d, &mut rng),
            config,
        })
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Group a parameter belongs to, from its name prefix.
    pub fn group_of(name: &str) -> Option<&'static str> {
        let prefix = name.split('.').next()?;
        GROUPS.iter().copied().find(|g| *g == prefix)
    }

    pub fn params_in_group(&self, group: &str) -> Vec<&ParamNode> {
        self.params()
            .into_iter()
            .filter(|p| Self::group_of(&p.name) == Some(group))
            .collect()
    }

    pub fn set_trainable(&mut self, frozen: &[String]) -> Result<()> {
        for g in frozen {
            if !GROUPS.contains(&g.as_str()) {
                return Err(MixerError::UnknownGroup(g.clone()));
            }
        }
        for p in self.params_mut() {
            if p.name.ends_with("running_mean") || p.name.ends_with("running_var") {
                continue;
            }
            let g = Self::group_of(&p.name).unwrap_or("");
            p.trainable = !frozen.iter().any(|f| f == g);
        }
        Ok(())
    }

    pub fn apply_stats(&mut self, updates: &[BnStatsUpdate]) -> Result<()> {
        for u in updates {
            if !(self.query_head.apply_stats(u)? || self.doc_head.apply_stats(u)?) {
                return Err(MixerError::InvalidParams(format!("no batch-norm layer named {}", u.layer)));
            }
        }
        Ok(())
    }

    /// Shared backbone: `[b × n_raw]` → `[b·h² × n]`.
    pub fn image_grid(&self, tape: &mut Tape, raw: Var) -> Result<Var> {
        self.backbone.forward(tape, raw)
    }

    /// Unnormalized query representation `[b × d]`.
    pub fn query_features(&self, tape: &mut Tape, raw: Var, mode: Mode, sink: &mut StatsSink) -> Result<Var> {
        let grid = self.image_grid(tape, raw)?;
        let pooled = tape.group_mean(grid, self.config.h2)?;
        self.query_head.forward(tape, pooled, mode, sink)
    }

    pub fn query_embed_batch(&self, tape: &mut Tape, raw: Var, mode: Mode, sink: &mut StatsSink) -> Result<Var> {
        let f = self.query_features(tape, raw, mode, sink)?;
        tape.l2_normalize_rows(f)
    }

    /// Doc-side fused vector `[b × d]` before the transformation head.
    pub fn doc_fused(&self, tape: &mut Tape, raw: Var, tokens: &[Vec<usize>]) -> Result<Var> {
        let grid = self.image_grid(tape, raw)?;
        let h2 = self.config.h2;
        match self.config.variant {
            Variant::Mixer => {
                let t = self.text.forward(tape, tokens)?;
                let (_, c) = self.memory.forward(tape, t)?;
                let (_, f) = self.fusion.forward(tape, grid, c, h2)?;
                Ok(f)
            }
            Variant::ImageOnly => self.fusion.pooled_values(tape, grid, h2),
            Variant::Average => {
                let img = self.fusion.pooled_values(tape, grid, h2)?;
                let t = self.text.forward(tape, tokens)?;
                average_fuse_var(tape, img, t)
            }
        }
    }

    pub fn doc_embed_batch(
        &self,
        tape: &mut Tape,
        raw: Var,
        tokens: &[Vec<usize>],
        mode: Mode,
        sink: &mut StatsSink,
    ) -> Result<Var> {
        let f = self.doc_fused(tape, raw, tokens)?;
        let z = self.doc_head.forward(tape, f, mode, sink)?;
        tape.l2_normalize_rows(z)
    }

    /// Inference-mode query embeddings, one row per input.
    pub fn embed_queries(&self, raws: &[&[f64]]) -> Result<DenseTensor> {
        let mut tape = Tape::new();
        let raw = tape.constant(stack_rows(raws, self.config.n_raw, "embed_queries")?);
        let z = self.query_embed_batch(&mut tape, raw, Mode::Infer, &mut Vec::new())?;
        Ok(tape.value(z).clone())
    }

    /// Inference-mode doc embeddings, one row per input.
    pub fn embed_docs(&self, raws: &[&[f64]], tokens: &[Vec<usize>]) -> Result<DenseTensor> {
        let mut tape = Tape::new();
        let raw = tape.constant(stack_rows(raws, self.config.n_raw, "embed_docs")?);
        let z = self.doc_embed_batch(&mut tape, raw, tokens, Mode::Infer, &mut Vec::new())?;
        Ok(tape.value(z).clone())
    }

    fn raw_row(&self, raw: &DenseTensor) -> Result<DenseTensor> {
        if raw.len() != self.config.n_raw {
            return Err(MixerError::shape("raw image", raw.shape(), &[self.config.n_raw]));
        }
        raw.reshape(&[1, self.config.n_raw])
    }

    pub fn encode_image(&self, raw: &DenseTensor) -> Result<ImageFeatureMap> {
        let mut tape = Tape::new();
        let r = tape.constant(self.raw_row(raw)?);
        let g = self.image_grid(&mut tape, r)?;
        Ok(ImageFeatureMap {
            grid: tape.value(g).clone(),
        })
    }

    pub fn encode_text(&self, tokens: &[usize]) -> Result<TextFeature> {
        let mut tape = Tape::new();
        let t = self.text.forward(&mut tape, &[tokens.to_vec()])?;
        Ok(TextFeature {
            vec: tape.value(t).reshape(&[self.config.d])?,
        })
    }

    /// Inference-mode transformation head (output not normalized).
    pub fn transform(&self, f: &DenseTensor, side: Side) -> Result<DenseTensor> {
        let head = match side {
            Side::Query => &self.query_head,
            Side::Doc => &self.doc_head,
        };
        if f.len() != head.in_dim() {
            return Err(MixerError::shape("transform", f.shape(), &[head.in_dim()]));
        }
        let mut tape = Tape::new();
        let x = tape.constant(f.reshape(&[1, head.in_dim()])?);
        let y = head.forward(&mut tape, x, Mode::Infer, &mut Vec::new())?;
        tape.value(y).reshape(&[self.config.d])
    }

    pub fn query_embed(&self, raw: &DenseTensor) -> Result<EmbeddingVector> {
        let z = self.embed_queries(&[self.raw_row(raw)?.data()])?;
        Ok(EmbeddingVector {
            vec: z.reshape(&[self.config.d])?,
            side: Side::Query,
        })
    }

    pub fn doc_embed(&self, raw: &DenseTensor, tokens: &[usize]) -> Result<EmbeddingVector> {
        let z = self.embed_docs(&[self.raw_row(raw)?.data()], &[tokens.to_vec()])?;
        Ok(EmbeddingVector {
            vec: z.reshape(&[self.config.d])?,
            side: Side::Doc,
        })
    }
}

impl Parameterized for MixerModel {
    fn params(&self) -> Vec<&ParamNode> {
        let mut v = self.backbone.params();
        v.extend(self.text.params());
        v.extend(self.memory.params());
        v.extend(self.fusion.params());
        v.extend(self.query_head.params());
        v.extend(self.doc_head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamNode> {
        let mut v = self.backbone.params_mut();
        v.extend(self.text.params_mut());
        v.extend(self.memory.params_mut());
        v.extend(self.fusion.params_mut());
        v.extend(self.query_head.params_mut());
        v.extend(self.doc_head.params_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{extract_concept, fuse};
    use crate::numerics::l2_normalize;
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            d: 6,
            e: 3,
            h2: 4,
            n: 5,
            n_raw: 8,
            backbone_hidden: 7,
            vocab: 10,
            max_text_len: 5,
            ..ModelConfig::default()
        }
    }

    fn raw(seed: u64, n: usize) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseTensor::from_fn(&[n], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn every_param_belongs_to_a_group() {
        let m = MixerModel::new(small_config(), 1).unwrap();
        for p in m.params() {
            assert!(MixerModel::group_of(&p.name).is_some(), "{}", p.name);
        }
        let names: std::collections::HashSet<_> = m.params().iter().map(|p| p.name.clone()).collect();
        assert_eq!(names.len(), m.params().len());
    }

    #[test]
    fn shared_backbone_gives_identical_maps() {
        let m = MixerModel::new(small_config(), 2).unwrap();
        let r = raw(3, 8);
        let a = m.encode_image(&r).unwrap();
        let mut tape = Tape::new();
        let rv = tape.constant(r.reshape(&[1, 8]).unwrap());
        let g = m.image_grid(&mut tape, rv).unwrap();
        assert_eq!(&a.grid, tape.value(g));
    }

    #[test]
    fn query_embedding_is_pooled_then_transformed() {
        let m = MixerModel::new(small_config(), 4).unwrap();
        let r = raw(5, 8);
        let q = m.query_embed(&r).unwrap();
        assert!((q.vec.norm() - 1.0).abs() < 1e-12);
        assert_eq!(q.side, Side::Query);
        // composed oracle from the single-sample pieces
        let map = m.encode_image(&r).unwrap();
        let pooled = DenseTensor::from_fn(&[5], |j| (0..4).map(|i| map.grid.get(i, j)).sum::<f64>() / 4.0);
        let expect = l2_normalize(&m.transform(&pooled, Side::Query).unwrap()).unwrap();
        assert!(q.vec.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn identical_rows_pool_to_that_row() {
        let mut m = MixerModel::new(small_config(), 6).unwrap();
        // zero hidden weights ⇒ every position emits the same row
        m.backbone.hidden.weight.value.fill(0.0);
        m.backbone.hidden.bias.as_mut().unwrap().value = DenseTensor::from_fn(&[7], |i| 0.1 * i as f64);
        let map = m.encode_image(&raw(7, 8)).unwrap();
        let mut tape = Tape::new();
        let g = tape.constant(map.grid.clone());
        let pooled = tape.group_mean(g, 4).unwrap();
        for i in 1..4 {
            for j in 0..5 {
                assert_eq!(map.grid.get(i, j), map.grid.get(0, j));
                assert!((tape.value(pooled).get(0, j) - map.grid.get(0, j)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn doc_embedding_matches_composed_oracle() {
        let m = MixerModel::new(small_config(), 8).unwrap();
        let r = raw(9, 8);
        let toks = vec![1, 4, 4, 7];
        let z = m.doc_embed(&r, &toks).unwrap();
        assert!((z.vec.norm() - 1.0).abs() < 1e-12);
        let map = m.encode_image(&r).unwrap();
        let t = m.encode_text(&toks).unwrap();
        let c = extract_concept(&t, &m.memory).unwrap();
        let f = fuse(&map, &c, &m.fusion).unwrap();
        let expect = l2_normalize(&m.transform(&f.vec, Side::Doc).unwrap()).unwrap();
        assert!(z.vec.max_abs_diff(&expect) < 1e-8);
    }

    #[test]
    fn text_pathway_is_live() {
        let m = MixerModel::new(small_config(), 10).unwrap();
        let r = raw(11, 8);
        let a = m.doc_embed(&r, &[1, 2]).unwrap();
        let b = m.doc_embed(&r, &[8, 9, 3]).unwrap();
        let wa = extract_concept(&m.encode_text(&[1, 2]).unwrap(), &m.memory).unwrap();
        let wb = extract_concept(&m.encode_text(&[8, 9, 3]).unwrap(), &m.memory).unwrap();
        assert!(wa.attention.max_abs_diff(&wb.attention) > 1e-6);
        assert!(a.vec.max_abs_diff(&b.vec) > 1e-9);
    }

    #[test]
    fn heads_are_separate() {
        let mut m = MixerModel::new(small_config(), 12).unwrap();
        let r = raw(13, 8);
        let toks = vec![2, 3];
        let q0 = m.query_embed(&r).unwrap();
        let d0 = m.doc_embed(&r, &toks).unwrap();
        for v in m.query_head.second.weight.value.data_mut() {
            *v += 0.3;
        }
        assert_eq!(m.doc_embed(&r, &toks).unwrap(), d0);
        assert_ne!(m.query_embed(&r).unwrap(), q0);
        let q1 = m.query_embed(&r).unwrap();
        for v in m.doc_head.first.linear.weight.value.data_mut() {
            *v -= 0.2;
        }
        assert_eq!(m.query_embed(&r).unwrap(), q1);

        // same pooled input through different heads differs
        let f = DenseTensor::from_fn(&[6], |i| i as f64 * 0.1 - 0.2);
        let mut sq = small_config();
        sq.n = 6;
        let m2 = MixerModel::new(sq, 14).unwrap();
        assert!(m2.transform(&f, Side::Query).unwrap().max_abs_diff(&m2.transform(&f, Side::Doc).unwrap()) > 1e-6);
    }

    #[test]
    fn backbone_change_moves_both_towers() {
        let mut m = MixerModel::new(small_config(), 21).unwrap();
        let r = raw(16, 8);
        let map0 = m.encode_image(&r).unwrap();
        let q0 = m.query_embed(&r).unwrap();
        let d0 = m.doc_embed(&r, &[1]).unwrap();
        m.backbone.out.bias.as_mut().unwrap().value.data_mut()[0] += 0.5;
        let map1 = m.encode_image(&r).unwrap();
        for i in 0..4 {
            assert!((map1.grid.get(i, 0) - map0.grid.get(i, 0) - 0.5).abs() < 1e-12);
        }
        assert_ne!(m.query_embed(&r).unwrap(), q0);
        assert_ne!(m.doc_embed(&r, &[1]).unwrap(), d0);
    }

    #[test]
    fn image_only_equals_mixer_with_zero_values_at_fused_level() {
        let mut m = MixerModel::new(small_config(), 17).unwrap();
        m.memory.values.value.fill(0.0);
        let r = raw(18, 8);
        let toks = vec![vec![3, 5]];
        let mut tape = Tape::new();
        let rv = tape.constant(r.reshape(&[1, 8]).unwrap());
        let mixer = m.doc_fused(&mut tape, rv, &toks).unwrap();
        let mut mi = m.clone();
        mi.config.variant = Variant::ImageOnly;
        let image_only = mi.doc_fused(&mut tape, rv, &toks).unwrap();
        assert!(tape.value(mixer).max_abs_diff(tape.value(image_only)) < 1e-15);
    }

    #[test]
    fn unknown_freeze_group_is_rejected() {
        let mut m = MixerModel::new(small_config(), 19).unwrap();
        assert!(matches!(m.set_trainable(&["encoder".into()]), Err(MixerError::UnknownGroup(_))));
        m.set_trainable(&["backbone".into()]).unwrap();
        assert!(m.params_in_group("backbone").iter().all(|p| !p.trainable));
        assert!(m.params_in_group("text").iter().all(|p| p.trainable));
    }
}
