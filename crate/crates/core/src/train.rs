//! Two-stage training.
//!
//! Stage one trains the backbone with statistics pooling as an
//! utterance-level speaker classifier. Stage two keeps the backbone, attaches
//! a fresh enhancer and a fresh frame-level head, and trains on synthesised
//! mixtures with the backbone frozen for the first `freeze_epochs` epochs.
//!
//! Synthesis is on the fly, so an epoch is a fixed number of batches. Batch
//! `k` is drawn from a stream seeded by `(seed, k)`, which makes a resumed run
//! see exactly the batches an uninterrupted one would.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, KIND_TRAIN_STATE};
use crate::error::{Error, Result};
use crate::features::{MelExtractor, MelFeatures};
use crate::loss::{AamConfig, AamOutput};
use crate::model::{position_labels, HeeConfig, HeeModel, PooledModel, BACKBONE_PREFIX, COMPRESSION};
use crate::nn::optim::{clip_global_norm, Adam};
use crate::nn::{Mat, ParamStore};
use crate::synth::{MixtureSample, MixtureSynthesizer, SpeakerCorpus};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub freeze_epochs: usize,
    pub batch_size: usize,
    pub frames_per_sample: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub lr_decay: f64,
    pub aam: AamConfig,
    pub batches_per_epoch: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Assert after every frozen step that no backbone tensor moved.
    pub check_freeze: bool,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            freeze_epochs: 10,
            batch_size: 100,
            frames_per_sample: 320,
            lr: 1e-3,
            lr_decay: 1.0,
            aam: AamConfig::default(),
            batches_per_epoch: 500,
            clip_norm: None,
            seed: 0,
            check_freeze: false,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.freeze_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "freeze_epochs ({}) must be smaller than epochs ({})",
                self.freeze_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.workers == 0 {
            return Err(Error::Config("batch_size, batches_per_epoch and workers must be positive".into()));
        }
        if self.frames_per_sample == 0 || self.frames_per_sample % COMPRESSION != 0 {
            return Err(Error::Config(format!("frames_per_sample must be a positive multiple of {COMPRESSION}")));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("lr and lr_decay must be positive".into()));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    /// Length of each training crop, rounded down to a multiple of 8 frames.
    pub crop_frames: usize,
    pub lr: f64,
    pub aam: AamConfig,
    /// Steps over which the margin ramps linearly from 0 to its final value.
    pub margin_warmup_steps: u64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    pub workers: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            batches_per_epoch: 20,
            crop_frames: 200,
            lr: 1e-3,
            aam: AamConfig::default(),
            margin_warmup_steps: 100,
            clip_norm: None,
            seed: 0,
            workers: 1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.batches_per_epoch == 0 || self.workers == 0 {
            return Err(Error::Config("epochs, batch sizes and workers must be positive".into()));
        }
        if self.crop_frames < COMPRESSION {
            return Err(Error::Config(format!("crop_frames must be at least {COMPRESSION}")));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Summed loss statistics and gradients over a batch.
struct BatchResult {
    loss: f64,
    correct: usize,
    positions: usize,
    grads: Vec<Option<Mat>>,
}

fn add_grads(acc: &mut [Option<Mat>], g: Vec<Option<Mat>>, weight: f64) {
    for (a, g) in acc.iter_mut().zip(g) {
        if let Some(g) = g {
            match a {
                Some(a) => a.scaled_add(weight, &g),
                None => *a = Some(g * weight),
            }
        }
    }
}

/// Runs `f` over every item, splitting the batch into `workers` contiguous
/// chunks, and averages the gradients. Each item's loss is weighted equally.
fn accumulate<T: Sync>(
    items: &[T],
    n_params: usize,
    workers: usize,
    f: impl Fn(&T) -> Result<(AamOutput, usize, Vec<Option<Mat>>)> + Sync,
) -> Result<BatchResult> {
    let weight = 1.0 / items.len() as f64;
    let run_chunk = |chunk: &[T]| -> Result<BatchResult> {
        let mut r = BatchResult { loss: 0.0, correct: 0, positions: 0, grads: vec![None; n_params] };
        for item in chunk {
            let (out, positions, g) = f(item)?;
            r.loss += out.loss * weight;
            r.correct += out.correct;
            r.positions += positions;
            add_grads(&mut r.grads, g, weight);
        }
        Ok(r)
    };
    let chunk = items.len().div_ceil(workers.max(1));
    let parts: Vec<Result<BatchResult>> = if workers <= 1 || items.len() < 2 {
        vec![run_chunk(items)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(move || run_chunk(c))).collect();
            handles.into_iter().map(|h| h.join().expect("training worker panicked")).collect()
        })
    };
    let mut total = BatchResult { loss: 0.0, correct: 0, positions: 0, grads: vec![None; n_params] };
    for p in parts {
        let p = p?;
        total.loss += p.loss;
        total.correct += p.correct;
        total.positions += p.positions;
        add_grads(&mut total.grads, p.grads, 1.0);
    }
    Ok(total)
}

fn check_finite(step: u64, r: &BatchResult) -> Result<()> {
    if !r.loss.is_finite() {
        return Err(Error::NonFinite { step, detail: format!("loss {}", r.loss) });
    }
    if let Some(i) = r.grads.iter().position(|g| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
        return Err(Error::NonFinite { step, detail: format!("gradient of tensor {i}") });
    }
    Ok(())
}

fn batch_rng(seed: u64, step: u64) -> ChaCha8Rng {
    MixtureSynthesizer::stream(seed, u64::MAX, step)
}

/// Utterance features cached once for stage-one crops.
struct UtteranceBank {
    features: Vec<Vec<MelFeatures>>,
}

impl UtteranceBank {
    fn new(corpus: &SpeakerCorpus, mel: &MelExtractor) -> Result<Self> {
        let features = (0..corpus.n_speakers())
            .map(|s| corpus.utterances(s).iter().map(|u| mel.extract(u)).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { features })
    }

    fn crop(&self, frames: usize, rng: &mut impl Rng) -> Result<(Mat, usize)> {
        let spk = rng.random_range(0..self.features.len());
        let utts = &self.features[spk];
        let f = &utts[rng.random_range(0..utts.len())];
        let len = frames.min(f.n_frames()) / COMPRESSION * COMPRESSION;
        if len == 0 {
            return Err(Error::Corpus(format!("speaker {spk} has an utterance shorter than 80 ms")));
        }
        let start = rng.random_range(0..=f.n_frames() - len);
        Ok((f.data().slice(ndarray::s![start..start + len, ..]).to_owned(), spk))
    }
}

/// Stage one: utterance-level speaker classification with statistics
/// pooling.
pub struct Pretrainer {
    cfg: PretrainConfig,
    model: PooledModel,
    adam: Adam,
    bank: UtteranceBank,
    step: u64,
    started: Instant,
}

impl Pretrainer {
    pub fn new(corpus: &SpeakerCorpus, mel: &MelExtractor, model: HeeConfig, cfg: PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        if corpus.n_speakers() < 2 {
            return Err(Error::Corpus("speaker classification needs at least two speakers".into()));
        }
        if mel.config().n_mels != model.n_mels {
            return Err(Error::Config(format!("features have {} bins, model expects {}", mel.config().n_mels, model.n_mels)));
        }
        let model_cfg = HeeConfig { n_classes: corpus.n_speakers(), ..model };
        let model = PooledModel::new(model_cfg, true, cfg.seed)?;
        let adam = Adam::new(model.params());
        Ok(Self { bank: UtteranceBank::new(corpus, mel)?, cfg, model, adam, step: 0, started: Instant::now() })
    }

    pub fn model(&self) -> &PooledModel {
        &self.model
    }

    pub fn into_model(self) -> PooledModel {
        self.model
    }

    pub fn epoch(&self) -> usize {
        (self.step / self.cfg.batches_per_epoch as u64) as usize
    }

    fn aam_at(&self, step: u64) -> AamConfig {
        let ramp = if self.cfg.margin_warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.cfg.margin_warmup_steps as f64).min(1.0)
        };
        AamConfig { margin: self.cfg.aam.margin * ramp, ..self.cfg.aam }
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let mut rng = batch_rng(self.cfg.seed, self.step);
        let crops = (0..self.cfg.batch_size)
            .map(|_| self.bank.crop(self.cfg.crop_frames, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let aam = self.aam_at(self.step);
        let model = &self.model;
        let mut r = accumulate(&crops, model.params().len(), self.cfg.workers, |(f, spk)| {
            let (out, g) = model.loss_and_grads(f, *spk, aam)?;
            Ok((out, 1, g))
        })?;
        check_finite(self.step, &r)?;
        if let Some(c) = self.cfg.clip_norm {
            clip_global_norm(&mut r.grads, c);
        }
        let record = StepRecord {
            step: self.step,
            epoch: self.epoch(),
            loss: r.loss,
            accuracy: r.correct as f64 / r.positions as f64,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        };
        self.adam.update(self.model.params_mut(), &r.grads, self.cfg.lr, |_| true);
        self.step += 1;
        Ok(record)
    }

    /// Runs all configured epochs.
    pub fn run(&mut self, mut log: impl FnMut(&StepRecord)) -> Result<()> {
        let total = (self.cfg.epochs * self.cfg.batches_per_epoch) as u64;
        while self.step < total {
            let r = self.step()?;
            log(&r);
        }
        Ok(())
    }
}

/// Runs stage one to completion and returns the trained pooled model.
pub fn pretrain_backbone(
    corpus: &SpeakerCorpus,
    mel: &MelExtractor,
    model: HeeConfig,
    cfg: PretrainConfig,
    log: impl FnMut(&StepRecord),
) -> Result<PooledModel> {
    let mut t = Pretrainer::new(corpus, mel, model, cfg)?;
    t.run(log)?;
    Ok(t.into_model())
}

/// Everything needed to continue stage two.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: ParamStore,
    pub adam: Adam,
    pub model_config: HeeConfig,
    pub train_config: TrainConfig,
    pub best_accuracy: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    step: u64,
    train_config: TrainConfig,
    best_accuracy: Option<f64>,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

impl TrainState {
    pub fn epoch(&self) -> usize {
        (self.step / self.train_config.batches_per_epoch as u64) as usize
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut params = self.params.clone();
        let (m, v) = self.adam.moments();
        let names: Vec<String> = self.params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, n) in names.iter().enumerate() {
            params.add(format!("{ADAM_M}{n}"), m[i].clone());
            params.add(format!("{ADAM_V}{n}"), v[i].clone());
        }
        let mut ck = Checkpoint::new(KIND_TRAIN_STATE, &self.model_config, params)?;
        ck.meta = serde_json::to_value(StateMeta {
            step: self.step,
            train_config: self.train_config.clone(),
            best_accuracy: self.best_accuracy,
        })?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.expect_kind(KIND_TRAIN_STATE)?;
        let meta: StateMeta = serde_json::from_value(ck.meta.clone())?;
        let model_config = ck.hee_config()?;
        let params = ck.params.without_prefix("adam.");
        let fetch = |prefix: &str, name: &str| -> Result<Mat> {
            let id = ck
                .params
                .id(&format!("{prefix}{name}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing optimiser moment for {name}")))?;
            Ok(ck.params.get(id).clone())
        };
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (n, _) in params.iter() {
            m.push(fetch(ADAM_M, n)?);
            v.push(fetch(ADAM_V, n)?);
        }
        Ok(Self {
            step: meta.step,
            params,
            adam: Adam::from_parts(meta.step, m, v),
            model_config,
            train_config: meta.train_config,
            best_accuracy: meta.best_accuracy,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Stage two on synthesised mixtures.
pub struct HeeTrainer<'a> {
    synth: &'a MixtureSynthesizer,
    cfg: TrainConfig,
    model: HeeModel,
    adam: Adam,
    step: u64,
    best_accuracy: Option<f64>,
    started: Instant,
}

impl<'a> HeeTrainer<'a> {
    /// Fresh enhancer (if requested) and head on top of `backbone`, whose
    /// `backbone.*` tensors are copied in. Without a backbone the extractor
    /// starts from random weights.
    pub fn new(
        model: HeeConfig,
        backbone: Option<&ParamStore>,
        with_enhancer: bool,
        synth: &'a MixtureSynthesizer,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if synth.frames_per_sample() != cfg.frames_per_sample {
            return Err(Error::Config(format!(
                "synthesiser emits {} frames per sample, training expects {}",
                synth.frames_per_sample(),
                cfg.frames_per_sample
            )));
        }
        let model_cfg = HeeConfig { n_classes: synth.corpus().n_speakers(), ..model };
        let mut model = HeeModel::new(model_cfg, with_enhancer, true, cfg.seed ^ 0x5eed)?;
        if let Some(b) = backbone {
            model.load_backbone(b)?;
        }
        let adam = Adam::new(model.params());
        Ok(Self { synth, cfg, model, adam, step: 0, best_accuracy: None, started: Instant::now() })
    }

    /// Continues from a saved state. The synthesiser must match the one the
    /// state was trained with.
    pub fn resume(state: TrainState, synth: &'a MixtureSynthesizer) -> Result<Self> {
        state.train_config.validate()?;
        let model = HeeModel::from_store(state.model_config.clone(), &state.params)?;
        if !model.has_head() {
            return Err(Error::Checkpoint("training state has no classification head".into()));
        }
        Ok(Self {
            synth,
            cfg: state.train_config,
            model,
            adam: state.adam,
            step: state.step,
            best_accuracy: state.best_accuracy,
            started: Instant::now(),
        })
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            step: self.step,
            params: self.model.params().clone(),
            adam: self.adam.clone(),
            model_config: self.model.config().clone(),
            train_config: self.cfg.clone(),
            best_accuracy: self.best_accuracy,
        }
    }

    pub fn model(&self) -> &HeeModel {
        &self.model
    }

    pub fn into_model(self) -> HeeModel {
        self.model
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        (self.step / self.cfg.batches_per_epoch as u64) as usize
    }

    pub fn total_steps(&self) -> u64 {
        (self.cfg.epochs * self.cfg.batches_per_epoch) as u64
    }

    pub fn backbone_frozen(&self) -> bool {
        self.epoch() < self.cfg.freeze_epochs
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let samples = self.synth.batch(self.cfg.seed, 0, self.step, self.cfg.batch_size)?;
        let targets = samples
            .iter()
            .map(|s| Ok((s.features.data().clone(), position_labels(&s.labels)?)))
            .collect::<Result<Vec<_>>>()?;
        let model = &self.model;
        let aam = self.cfg.aam;
        let mut r = accumulate(&targets, model.params().len(), self.cfg.workers, |(f, labels)| {
            let (out, g) = model.loss_and_grads(f, labels, aam)?;
            Ok((out, labels.len(), g))
        })?;
        check_finite(self.step, &r)?;
        if let Some(c) = self.cfg.clip_norm {
            clip_global_norm(&mut r.grads, c);
        }
        let frozen = self.backbone_frozen();
        let snapshot = (frozen && self.cfg.check_freeze).then(|| self.model.params().without_prefix("enhancer.").without_prefix("head."));
        let lr = self.cfg.lr_at(self.epoch());
        self.adam.update(self.model.params_mut(), &r.grads, lr, |name| !(frozen && name.starts_with(BACKBONE_PREFIX)));
        if let Some(before) = snapshot {
            for (name, m) in before.iter() {
                let now = self.model.params().get(self.model.params().id(name).expect("same layout"));
                if m.iter().zip(now.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    return Err(Error::invalid(format!("frozen tensor {name} changed at step {}", self.step)));
                }
            }
        }
        let record = StepRecord {
            step: self.step,
            epoch: self.epoch(),
            loss: r.loss,
            accuracy: r.correct as f64 / r.positions as f64,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(record)
    }

    /// Runs until the configured number of epochs is done. `on_epoch` is
    /// called with the state after each completed epoch.
    pub fn run(&mut self, mut log: impl FnMut(&StepRecord), mut on_epoch: impl FnMut(&TrainState) -> Result<()>) -> Result<()> {
        while self.step < self.total_steps() {
            let r = self.step()?;
            log(&r);
            if self.step % self.cfg.batches_per_epoch as u64 == 0 {
                on_epoch(&self.state())?;
            }
        }
        Ok(())
    }
}

/// Runs stage two to completion.
pub fn train_hee(
    model: HeeConfig,
    backbone: &ParamStore,
    with_enhancer: bool,
    synth: &MixtureSynthesizer,
    cfg: TrainConfig,
    log: impl FnMut(&StepRecord),
) -> Result<HeeModel> {
    let mut t = HeeTrainer::new(model, Some(backbone), with_enhancer, synth, cfg)?;
    t.run(log, |_| Ok(()))?;
    Ok(t.into_model())
}

/// Position-level speaker accuracy of a model with its head on held-out
/// samples.
pub fn position_accuracy(model: &HeeModel, samples: &[MixtureSample], aam: AamConfig) -> Result<f64> {
    let mut correct = 0;
    let mut total = 0;
    for s in samples {
        let labels = position_labels(&s.labels)?;
        let (out, _) = model.loss_and_grads(s.features.data(), &labels, aam)?;
        correct += out.correct;
        total += labels.len();
    }
    Ok(correct as f64 / total.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::MelConfig;
    use crate::synth::{AugmentAssets, SynthConfig};
    use crate::toy::{toy_corpus, ToyCorpusConfig};
    use std::sync::Arc;

    fn tiny_model() -> HeeConfig {
        HeeConfig { n_mels: 16, channels: 8, d_model: 8, n_enhancer_blocks: 1, n_heads: 2, ..Default::default() }
    }

    fn setup() -> (Arc<SpeakerCorpus>, MelExtractor) {
        let (corpus, _) = toy_corpus(&ToyCorpusConfig {
            n_speakers: 3,
            utterances_per_speaker: 2,
            min_duration_s: 3.3,
            max_duration_s: 3.6,
            seed: 4,
        })
        .unwrap();
        (Arc::new(corpus), MelExtractor::new(MelConfig { n_mels: 16, ..Default::default() }).unwrap())
    }

    fn synth(corpus: Arc<SpeakerCorpus>, mel: MelExtractor) -> MixtureSynthesizer {
        let cfg = SynthConfig { mixture_dur_s: 1.28, samples_per_mixture: 2, block_dur_range_s: (0.2, 0.4), ..Default::default() };
        MixtureSynthesizer::new(corpus, cfg, Some(AugmentAssets::synthetic(0)), mel).unwrap()
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            freeze_epochs: 1,
            batch_size: 2,
            frames_per_sample: 64,
            batches_per_epoch: 2,
            check_freeze: true,
            ..Default::default()
        }
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(TrainConfig { freeze_epochs: 20, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn single_speaker_corpus_cannot_pretrain() {
        let (corpus, mel) = setup();
        let one = SpeakerCorpus::new(vec![corpus.utterances(0).to_vec()]).unwrap();
        let err = Pretrainer::new(&one, &mel, tiny_model(), PretrainConfig::default()).err().unwrap();
        assert!(matches!(err, Error::Corpus(_)));
    }

    #[test]
    fn freeze_schedule_holds_then_releases() {
        let (corpus, mel) = setup();
        let s = synth(corpus, mel);
        let mut t = HeeTrainer::new(tiny_model(), None, true, &s, tiny_train()).unwrap();
        let backbone = |t: &HeeTrainer| t.model().params().iter().find(|(n, _)| n.starts_with("backbone.")).unwrap().1.clone();
        let enh = |t: &HeeTrainer| t.model().params().iter().find(|(n, _)| *n == "enhancer.out_proj.w").unwrap().1.clone();
        for _ in 0..2 {
            let (b0, e0) = (backbone(&t), enh(&t));
            assert!(t.backbone_frozen());
            t.step().unwrap();
            assert_eq!(backbone(&t), b0);
            assert_ne!(enh(&t), e0);
        }
        assert!(!t.backbone_frozen());
        let b0 = backbone(&t);
        t.step().unwrap();
        assert_ne!(backbone(&t), b0);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let (corpus, mel) = setup();
        let s = synth(corpus, mel);
        let cfg = TrainConfig { epochs: 4, freeze_epochs: 1, ..tiny_train() };
        let mut full = HeeTrainer::new(tiny_model(), None, true, &s, cfg.clone()).unwrap();
        let mut losses = Vec::new();
        for _ in 0..5 {
            losses.push(full.step().unwrap().loss);
        }
        let mut first = HeeTrainer::new(tiny_model(), None, true, &s, cfg).unwrap();
        for _ in 0..2 {
            first.step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        first.state().save(&path).unwrap();
        drop(first);
        let mut resumed = HeeTrainer::resume(TrainState::load(&path).unwrap(), &s).unwrap();
        for want in &losses[2..] {
            let got = resumed.step().unwrap().loss;
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        assert_eq!(resumed.model().params(), full.model().params());
    }

    #[test]
    fn corrupt_state_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        std::fs::write(&path, b"HEECKPT\0garbage-garbage-garbage").unwrap();
        assert!(TrainState::load(&path).is_err());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let (corpus, mel) = setup();
        let cfg = PretrainConfig { epochs: 1, batch_size: 3, batches_per_epoch: 2, crop_frames: 64, ..Default::default() };
        let a = pretrain_backbone(&corpus, &mel, tiny_model(), cfg.clone(), |_| {}).unwrap();
        let b = pretrain_backbone(&corpus, &mel, tiny_model(), cfg, |_| {}).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn worker_count_does_not_change_results_beyond_rounding() {
        let (corpus, mel) = setup();
        let s = synth(corpus, mel);
        let one = HeeTrainer::new(tiny_model(), None, true, &s, TrainConfig { batch_size: 4, ..tiny_train() }).unwrap().step_and_loss();
        let two = HeeTrainer::new(tiny_model(), None, true, &s, TrainConfig { batch_size: 4, workers: 2, ..tiny_train() })
            .unwrap()
            .step_and_loss();
        assert!((one - two).abs() < 1e-12);
    }

    impl HeeTrainer<'_> {
        fn step_and_loss(&mut self) -> f64 {
            self.step().unwrap().loss
        }
    }
}
