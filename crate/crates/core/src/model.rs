//! The high-resolution embedding extractor.
//!
//! A convolutional feature-map extractor compresses every eight input frames
//! into one 80 ms position without any pooling over time. The enhancer, a
//! stack of conformer-style blocks, then mixes context from the whole window
//! into each position and is added back onto its input. During training a
//! cosine classification head scores every position; it is stripped for
//! inference.
//!
//! A second model, [`PooledModel`], wraps the same backbone with temporal
//! statistics pooling. It is used to pre-train the backbone and doubles as the
//! conventional one-embedding-per-window extractor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::MelFeatures;
use crate::loss::{aam_softmax_on_tape, AamConfig, AamOutput};
use crate::nn::layers::{init_mat, sinusoidal_positions, Conv1d, DepthwiseConv1d, Init, LayerNorm, Linear};
use crate::nn::{Binding, Mat, ParamId, ParamStore, Tape, Var};

/// Temporal compression of the feature-map extractor.
pub const COMPRESSION: usize = 8;
/// Duration of one embedding position, in seconds.
pub const EMBEDDING_HOP_S: f64 = 0.080;

pub const BACKBONE_PREFIX: &str = "backbone.";
pub const ENHANCER_PREFIX: &str = "enhancer.";
pub const HEAD_PREFIX: &str = "head.";
pub const POOL_PREFIX: &str = "pool.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeeConfig {
    pub n_mels: usize,
    /// Width of the convolutional backbone.
    pub channels: usize,
    pub d_model: usize,
    pub n_enhancer_blocks: usize,
    pub n_heads: usize,
    /// Expansion of the pointwise feed-forward convolution in each block.
    pub expansion: usize,
    /// Kernel of the depthwise convolution in each block.
    pub conv_kernel: usize,
    /// Speaker classes of the training head.
    pub n_classes: usize,
}

impl Default for HeeConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            channels: 128,
            d_model: 128,
            n_enhancer_blocks: 5,
            n_heads: 4,
            expansion: 4,
            conv_kernel: 5,
            n_classes: 2,
        }
    }
}

impl HeeConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.n_mels, self.channels, self.d_model, self.n_heads, self.expansion, self.conv_kernel, self.n_classes];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        Ok(())
    }

    /// True for the block count and expansion factor of the reference design.
    pub fn is_reference_layout(&self) -> bool {
        self.n_enhancer_blocks == 5 && self.expansion == 4
    }
}

/// Positions of a feature map, one per 80 ms.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Mat,
}

impl FeatureMap {
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn hop_s(&self) -> f64 {
        EMBEDDING_HOP_S
    }
}

/// Embeddings at 80 ms resolution, row `i` covering
/// `[start_s + i·0.08, start_s + (i+1)·0.08)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    pub embeddings: Mat,
    pub start_s: f64,
}

impl EmbeddingSequence {
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.start_s + i as f64 * EMBEDDING_HOP_S).collect()
    }
}

fn check_frames(n_frames: usize) -> Result<()> {
    if n_frames == 0 || n_frames % COMPRESSION != 0 {
        return Err(Error::Shape(format!(
            "{n_frames} frames is not a positive multiple of {COMPRESSION}; pad the input"
        )));
    }
    Ok(())
}

/// Stem convolution, three stride-2 residual stages (each closed by a
/// per-frame layer norm), and a projection.
#[derive(Debug, Clone)]
pub struct FeatureMapExtractor {
    stem: Conv1d,
    stages: Vec<Stage>,
    proj: Linear,
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv1d,
    res_a: Conv1d,
    res_b: Conv1d,
    norm: LayerNorm,
}

impl FeatureMapExtractor {
    pub fn new(store: &mut ParamStore, cfg: &HeeConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let stem = Conv1d::new(store, "backbone.stem", cfg.n_mels, c, 3, 1, Init::He, rng);
        let stages = (0..3)
            .map(|i| Stage {
                down: Conv1d::new(store, &format!("backbone.stage{i}.down"), c, c, 3, 2, Init::He, rng),
                res_a: Conv1d::new(store, &format!("backbone.stage{i}.res_a"), c, c, 3, 1, Init::He, rng),
                res_b: Conv1d::new(store, &format!("backbone.stage{i}.res_b"), c, c, 3, 1, Init::He, rng),
                norm: LayerNorm::new(store, &format!("backbone.stage{i}.norm"), c),
            })
            .collect();
        let proj = Linear::new(store, "backbone.proj", c, cfg.d_model, true, Init::Xavier, rng);
        Self { stem, stages, proj }
    }

    /// `(T × n_mels)` to `(T/8 × d_model)`; T must already be a multiple of 8
    /// for the 8:1 correspondence to be exact.
    pub fn forward(&self, t: &mut Tape, p: &Binding, x: Var) -> Var {
        let mut h = self.stem.forward(t, p, x);
        h = t.relu(h);
        for s in &self.stages {
            h = s.down.forward(t, p, h);
            h = t.relu(h);
            let mut r = s.res_a.forward(t, p, h);
            r = t.relu(r);
            r = s.res_b.forward(t, p, r);
            h = t.add(h, r);
            h = s.norm.forward(t, p, h);
            h = t.relu(h);
        }
        self.proj.forward(t, p, h)
    }
}

/// Pre-norm block: self-attention, convolution module, pointwise
/// feed-forward with expansion, each residual, then a closing layer norm.
#[derive(Debug, Clone)]
pub struct ConformerBlock {
    n_heads: usize,
    ln_att: LayerNorm,
    qkv: Linear,
    att_out: Linear,
    ln_conv: LayerNorm,
    pw_in: Linear,
    depthwise: DepthwiseConv1d,
    ln_dw: LayerNorm,
    pw_out: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    ln_out: LayerNorm,
}

impl ConformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &HeeConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let hidden = d * cfg.expansion;
        Self {
            n_heads: cfg.n_heads,
            ln_att: LayerNorm::new(store, &format!("{name}.ln_att"), d),
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, true, Init::Xavier, rng),
            att_out: Linear::new(store, &format!("{name}.att_out"), d, d, true, Init::Xavier, rng),
            ln_conv: LayerNorm::new(store, &format!("{name}.ln_conv"), d),
            pw_in: Linear::new(store, &format!("{name}.pw_in"), d, 2 * d, true, Init::Xavier, rng),
            depthwise: DepthwiseConv1d::new(store, &format!("{name}.depthwise"), d, cfg.conv_kernel, rng),
            ln_dw: LayerNorm::new(store, &format!("{name}.ln_dw"), d),
            pw_out: Linear::new(store, &format!("{name}.pw_out"), d, d, true, Init::Xavier, rng),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), d, hidden, true, Init::He, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), hidden, d, true, Init::Xavier, rng),
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), d),
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, x: Var) -> Var {
        let d = t.value(x).ncols();
        let dh = d / self.n_heads;

        // Multi-head self-attention.
        let a = self.ln_att.forward(t, p, x);
        let qkv = self.qkv.forward(t, p, a);
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let q = t.slice_cols(qkv, h * dh, (h + 1) * dh);
            let k = t.slice_cols(qkv, d + h * dh, d + (h + 1) * dh);
            let v = t.slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh);
            let scores = t.matmul_t(q, k);
            let scores = t.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = t.softmax_rows(scores);
            heads.push(t.matmul(attn, v));
        }
        let merged = if heads.len() == 1 { heads[0] } else { t.concat_cols(&heads) };
        let att = self.att_out.forward(t, p, merged);
        let x = t.add(x, att);

        // Convolution module with a gated linear unit.
        let c = self.ln_conv.forward(t, p, x);
        let c = self.pw_in.forward(t, p, c);
        let value = t.slice_cols(c, 0, d);
        let gate = t.slice_cols(c, d, 2 * d);
        let gate = t.sigmoid(gate);
        let c = t.mul(value, gate);
        let c = self.depthwise.forward(t, p, c);
        let c = self.ln_dw.forward(t, p, c);
        let c = t.silu(c);
        let c = self.pw_out.forward(t, p, c);
        let x = t.add(x, c);

        // Pointwise feed-forward.
        let f = self.ln_ff.forward(t, p, x);
        let f = self.ff_in.forward(t, p, f);
        let f = t.silu(f);
        let f = self.ff_out.forward(t, p, f);
        let x = t.add(x, f);

        self.ln_out.forward(t, p, x)
    }
}

/// Block stack with an input-to-output residual. The stack's output
/// projection starts at zero, so a fresh enhancer is the identity.
#[derive(Debug, Clone)]
pub struct Enhancer {
    blocks: Vec<ConformerBlock>,
    out_proj: Linear,
}

impl Enhancer {
    pub fn new(store: &mut ParamStore, cfg: &HeeConfig, rng: &mut ChaCha8Rng) -> Self {
        let blocks = (0..cfg.n_enhancer_blocks)
            .map(|i| ConformerBlock::new(store, &format!("enhancer.block{i}"), cfg, rng))
            .collect();
        let out_proj = Linear::new(store, "enhancer.out_proj", cfg.d_model, cfg.d_model, true, Init::Zeros, rng);
        Self { blocks, out_proj }
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, x: Var) -> Var {
        let (len, d) = t.value(x).dim();
        let pos = t.leaf(sinusoidal_positions(len, d));
        let mut h = t.add(x, pos);
        for b in &self.blocks {
            h = b.forward(t, p, h);
        }
        let branch = self.out_proj.forward(t, p, h);
        t.add(x, branch)
    }
}

/// Class centres for the cosine margin loss.
#[derive(Debug, Clone)]
pub struct ClassHead {
    centres: ParamId,
}

impl ClassHead {
    pub fn new(store: &mut ParamStore, name: &str, n_classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let centres = store.add(format!("{name}.centres"), init_mat(n_classes, dim, dim, n_classes, Init::Xavier, rng));
        Self { centres }
    }

    pub fn loss(&self, t: &mut Tape, p: &Binding, emb: Var, labels: &[usize], cfg: AamConfig) -> Result<(Var, AamOutput)> {
        aam_softmax_on_tape(t, emb, p.var(self.centres), labels, cfg)
    }

    pub fn n_classes(&self, store: &ParamStore) -> usize {
        store.get(self.centres).nrows()
    }
}

/// Backbone, optional enhancer, optional frame-level head.
#[derive(Debug, Clone)]
pub struct HeeModel {
    config: HeeConfig,
    store: ParamStore,
    backbone: FeatureMapExtractor,
    enhancer: Option<Enhancer>,
    head: Option<ClassHead>,
}

impl HeeModel {
    /// Randomly initialised model.
    pub fn new(config: HeeConfig, with_enhancer: bool, with_head: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = FeatureMapExtractor::new(&mut store, &config, &mut rng);
        let enhancer = with_enhancer.then(|| Enhancer::new(&mut store, &config, &mut rng));
        let head = with_head.then(|| ClassHead::new(&mut store, "head", config.n_classes, config.d_model, &mut rng));
        Ok(Self { config, store, backbone, enhancer, head })
    }

    /// Rebuilds a model from stored tensors. The layout (enhancer, head) is
    /// inferred from the tensor names present.
    pub fn from_store(config: HeeConfig, stored: &ParamStore) -> Result<Self> {
        let with_enhancer = stored.iter().any(|(n, _)| n.starts_with(ENHANCER_PREFIX));
        let with_head = stored.iter().any(|(n, _)| n.starts_with(HEAD_PREFIX));
        let mut model = Self::new(config, with_enhancer, with_head, 0)?;
        for prefix in [BACKBONE_PREFIX, ENHANCER_PREFIX, HEAD_PREFIX] {
            model.store.load_prefix(stored, prefix).map_err(Error::Checkpoint)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &HeeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn has_enhancer(&self) -> bool {
        self.enhancer.is_some()
    }

    pub fn has_head(&self) -> bool {
        self.head.is_some()
    }

    /// Loads backbone tensors, e.g. from a pre-trained [`PooledModel`].
    pub fn load_backbone(&mut self, from: &ParamStore) -> Result<()> {
        self.store.load_prefix(from, BACKBONE_PREFIX).map_err(Error::Checkpoint)?;
        Ok(())
    }

    /// Inference copy without the classification head.
    pub fn strip_head(&self) -> HeeModel {
        let store = self.store.without_prefix(HEAD_PREFIX);
        HeeModel::from_store(self.config.clone(), &store).expect("same config, subset of tensors")
    }

    /// Embedding positions on the tape, before length normalisation.
    pub fn forward_on_tape(&self, t: &mut Tape, p: &Binding, x: Var) -> Var {
        let m = self.backbone.forward(t, p, x);
        match &self.enhancer {
            Some(e) => e.forward(t, p, m),
            None => m,
        }
    }

    fn input(&self, f: &MelFeatures) -> Result<()> {
        if f.n_mels() != self.config.n_mels {
            return Err(Error::Shape(format!("model expects {} mel bins, got {}", self.config.n_mels, f.n_mels())));
        }
        check_frames(f.n_frames())
    }

    pub fn feature_map_forward(&self, f: &MelFeatures) -> Result<FeatureMap> {
        self.input(f)?;
        let mut t = Tape::new();
        let p = self.store.bind(&mut t);
        let x = t.leaf(f.data().clone());
        let m = self.backbone.forward(&mut t, &p, x);
        Ok(FeatureMap { data: t.value(m).clone() })
    }

    /// Applies the enhancer (the identity when the model has none).
    pub fn enhancer_forward(&self, m: &FeatureMap) -> Result<FeatureMap> {
        if m.data.ncols() != self.config.d_model {
            return Err(Error::Shape(format!("feature map width {} != d_model {}", m.data.ncols(), self.config.d_model)));
        }
        let Some(e) = &self.enhancer else { return Ok(m.clone()) };
        let mut t = Tape::new();
        let p = self.store.bind(&mut t);
        let x = t.leaf(m.data.clone());
        let y = e.forward(&mut t, &p, x);
        Ok(FeatureMap { data: t.value(y).clone() })
    }

    /// Un-normalised embeddings, one row per 80 ms.
    pub fn embed_raw(&self, f: &MelFeatures) -> Result<Mat> {
        self.input(f)?;
        let mut t = Tape::new();
        let p = self.store.bind(&mut t);
        let x = t.leaf(f.data().clone());
        let y = self.forward_on_tape(&mut t, &p, x);
        Ok(t.value(y).clone())
    }

    /// Unit-norm embeddings, one row per 80 ms.
    pub fn hee_forward(&self, f: &MelFeatures) -> Result<EmbeddingSequence> {
        let mut e = self.embed_raw(f)?;
        normalize_rows(&mut e);
        Ok(EmbeddingSequence { embeddings: e, start_s: 0.0 })
    }

    /// Position-level margin loss for one sample on a fresh tape. Returns the
    /// loss output and per-tensor gradients (indexed like the store).
    pub fn loss_and_grads(&self, f: &Mat, position_labels: &[usize], aam: AamConfig) -> Result<(AamOutput, Vec<Option<Mat>>)> {
        let head = self.head.as_ref().ok_or_else(|| Error::invalid("model has no classification head"))?;
        check_frames(f.nrows())?;
        let mut t = Tape::new();
        let p = self.store.bind(&mut t);
        let x = t.leaf(f.clone());
        let emb = self.forward_on_tape(&mut t, &p, x);
        let (loss, out) = head.loss(&mut t, &p, emb, position_labels, aam)?;
        let mut g = t.backward(loss);
        let grads = p.vars().iter().map(|&v| g.take(v)).collect();
        Ok((out, grads))
    }
}

/// Backbone with statistics pooling: one embedding per input.
#[derive(Debug, Clone)]
pub struct PooledModel {
    config: HeeConfig,
    store: ParamStore,
    backbone: FeatureMapExtractor,
    pool_proj: Linear,
    head: Option<ClassHead>,
}

impl PooledModel {
    pub fn new(config: HeeConfig, with_head: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = FeatureMapExtractor::new(&mut store, &config, &mut rng);
        let pool_proj = Linear::new(&mut store, "pool.proj", 2 * config.d_model, config.d_model, true, Init::Xavier, &mut rng);
        let head = with_head.then(|| ClassHead::new(&mut store, "head", config.n_classes, config.d_model, &mut rng));
        Ok(Self { config, store, backbone, pool_proj, head })
    }

    pub fn from_store(config: HeeConfig, stored: &ParamStore) -> Result<Self> {
        let with_head = stored.iter().any(|(n, _)| n.starts_with(HEAD_PREFIX));
        let mut model = Self::new(config, with_head, 0)?;
        for prefix in [BACKBONE_PREFIX, POOL_PREFIX, HEAD_PREFIX] {
            model.store.load_prefix(stored, prefix).map_err(Error::Checkpoint)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &HeeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn strip_head(&self) -> PooledModel {
        PooledModel::from_store(self.config.clone(), &self.store.without_prefix(HEAD_PREFIX)).expect("subset of tensors")
    }

    fn forward_on_tape(&self, t: &mut Tape, p: &Binding, x: Var) -> Var {
        let m = self.backbone.forward(t, p, x);
        let pooled = t.mean_std_pool(m);
        self.pool_proj.forward(t, p, pooled)
    }

    /// One unit-norm embedding for the whole input.
    pub fn embed(&self, f: &MelFeatures) -> Result<Vec<f64>> {
        if f.n_mels() != self.config.n_mels {
            return Err(Error::Shape(format!("model expects {} mel bins, got {}", self.config.n_mels, f.n_mels())));
        }
        check_frames(f.n_frames())?;
        let mut t = Tape::new();
        let p = self.store.bind(&mut t);
        let x = t.leaf(f.data().clone());
        let y = self.forward_on_tape(&mut t, &p, x);
        let mut e = t.value(y).clone();
        normalize_rows(&mut e);
        Ok(e.row(0).to_vec())
    }

    pub fn loss_and_grads(&self, f: &Mat, label: usize, aam: AamConfig) -> Result<(AamOutput, Vec<Option<Mat>>)> {
        let head = self.head.as_ref().ok_or_else(|| Error::invalid("model has no classification head"))?;
        check_frames(f.nrows())?;
        let mut t = Tape::new();
        let p = self.store.bind(&mut t);
        let x = t.leaf(f.clone());
        let emb = self.forward_on_tape(&mut t, &p, x);
        let (loss, out) = head.loss(&mut t, &p, emb, &[label], aam)?;
        let mut g = t.backward(loss);
        let grads = p.vars().iter().map(|&v| g.take(v)).collect();
        Ok((out, grads))
    }
}

pub fn normalize_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
}

/// Majority speaker of each 8-frame span; ties go to the smallest id.
pub fn position_labels(frame_labels: &[usize]) -> Result<Vec<usize>> {
    check_frames(frame_labels.len())?;
    Ok(frame_labels
        .chunks(COMPRESSION)
        .map(|span| {
            let mut best = (0usize, usize::MAX);
            for &l in span {
                let count = span.iter().filter(|&&x| x == l).count();
                if count > best.0 || (count == best.0 && l < best.1) {
                    best = (count, l);
                }
            }
            best.1
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradient, random_mat};

    fn tiny() -> HeeConfig {
        HeeConfig { n_mels: 6, channels: 4, d_model: 8, n_enhancer_blocks: 2, n_heads: 2, expansion: 4, conv_kernel: 3, n_classes: 3 }
    }

    fn features(frames: usize, n_mels: usize, seed: u64) -> MelFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MelFeatures::new(random_mat(frames, n_mels, 1.0, &mut rng), 0.01).unwrap()
    }

    #[test]
    fn compression_is_eight_to_one() {
        let m = HeeModel::new(tiny(), true, false, 1).unwrap();
        for (frames, positions) in [(320, 40), (8, 1), (256, 32)] {
            let fm = m.feature_map_forward(&features(frames, 6, 2)).unwrap();
            assert_eq!(fm.len(), positions);
            assert_eq!(m.hee_forward(&features(frames, 6, 3)).unwrap().len(), positions);
        }
    }

    #[test]
    fn unaligned_input_is_rejected() {
        let m = HeeModel::new(tiny(), true, false, 1).unwrap();
        assert!(matches!(m.feature_map_forward(&features(321, 6, 2)), Err(Error::Shape(_))));
        assert!(matches!(m.hee_forward(&features(12, 6, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn fresh_enhancer_is_identity_and_keeps_shape() {
        let m = HeeModel::new(tiny(), true, false, 4).unwrap();
        let fm = m.feature_map_forward(&features(64, 6, 5)).unwrap();
        let out = m.enhancer_forward(&fm).unwrap();
        assert_eq!(out.data.dim(), fm.data.dim());
        assert_eq!(out, fm);
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let m = HeeModel::new(tiny(), true, true, 6).unwrap();
        let f = features(320, 6, 7);
        let e = m.hee_forward(&f).unwrap();
        for row in e.embeddings.rows() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-12);
        }
        assert_eq!(e, m.hee_forward(&f).unwrap());
        assert!((e.timestamps()[39] - 39.0 * 0.08).abs() < 1e-12);
    }

    #[test]
    fn strip_head_keeps_embeddings_and_drops_head_tensors() {
        let m = HeeModel::new(tiny(), true, true, 8).unwrap();
        let s = m.strip_head();
        let f = features(64, 6, 9);
        assert_eq!(m.hee_forward(&f).unwrap(), s.hee_forward(&f).unwrap());
        let head = m.params().scalar_count_with_prefix(HEAD_PREFIX);
        assert_eq!(head, 3 * 8);
        assert_eq!(s.params().scalar_count(), m.params().scalar_count() - head);
        assert!(!s.has_head());
    }

    #[test]
    fn majority_vote_labels() {
        let labels = [vec![1; 5], vec![2; 3], vec![0; 4], vec![3; 4]].concat();
        assert_eq!(position_labels(&labels).unwrap(), vec![1, 0]);
        assert!(position_labels(&[0; 7]).is_err());
    }

    #[test]
    fn whole_model_gradient_matches_finite_differences() {
        let cfg = HeeConfig { n_enhancer_blocks: 1, ..tiny() };
        let mut m = HeeModel::new(cfg, true, true, 10).unwrap();
        // Make the enhancer branch non-trivial.
        let id = m.params().id("enhancer.out_proj.w").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        *m.params_mut().get_mut(id) = random_mat(8, 8, 0.3, &mut rng);
        let f = features(16, 6, 12).into_data();
        let labels = [0usize, 2];
        let err = check_gradient(&f, |t, x| {
            let p = m.params().bind(t);
            let e = m.forward_on_tape(t, &p, x);
            m.head.as_ref().unwrap().loss(t, &p, e, &labels, AamConfig::default()).unwrap().0
        });
        assert!(err < 1e-4, "relative error {err}");
    }
}
