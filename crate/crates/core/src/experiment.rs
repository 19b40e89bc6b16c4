//! End-to-end experiments on the synthetic toy corpus: the enhancer study
//! (full extractor against its enhancer-free twin and a pooled baseline) and
//! the data-preparation ablations.

use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{MelConfig, MelExtractor};
use crate::model::{HeeConfig, HeeModel, PooledModel};
use crate::pipeline::{Diarizer, Extractor, PipelineConfig, VoicedSegment};
use crate::scoring::{compute_der, Annotation, DerBreakdown, SpeakerTurn};
use crate::synth::{AugmentAssets, MixtureSynthesizer, SpeakerCorpus, SynthConfig};
use crate::toy::{synth_session, toy_corpus, SessionConfig, SyntheticSession, ToyCorpusConfig, VoiceProfile};
use crate::train::{pretrain_backbone, train_hee, PretrainConfig, StepRecord, TrainConfig};

/// Everything an experiment run depends on besides the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus: ToyCorpusConfig,
    pub mel: MelConfig,
    pub model: HeeConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub sessions: SessionConfig,
    pub n_sessions: usize,
    /// Cluster with the true number of speakers instead of estimating it.
    pub oracle_count: bool,
    pub refine: bool,
    pub workers: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    /// A laptop-sized setup: 8 toy speakers, 32 mel bins, a 32-wide model
    /// with two enhancer blocks.
    pub fn desk() -> Self {
        let mel = MelConfig { n_mels: 32, ..Default::default() };
        Self {
            corpus: ToyCorpusConfig::default(),
            model: HeeConfig {
                n_mels: mel.n_mels,
                channels: 32,
                d_model: 32,
                n_enhancer_blocks: 2,
                n_heads: 4,
                ..Default::default()
            },
            mel,
            pretrain: PretrainConfig { epochs: 20, batch_size: 32, batches_per_epoch: 20, lr: 2e-3, ..Default::default() },
            train: TrainConfig { epochs: 10, freeze_epochs: 3, batch_size: 32, batches_per_epoch: 20, ..Default::default() },
            synth: SynthConfig::default(),
            sessions: SessionConfig::default(),
            n_sessions: 20,
            oracle_count: true,
            refine: false,
            workers: 1,
            seed: 0,
        }
    }

    /// Copy with every seeded component reseeded from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.corpus.seed = seed;
        c.pretrain.seed = seed;
        c.train.seed = seed;
        c
    }

    /// Sets the length of training samples and of inference windows.
    pub fn set_sample_duration(&mut self, seconds: f64) -> Result<()> {
        let frames = crate::features::frames_for_duration(seconds, self.mel.frame_hop_s)?;
        if frames % crate::model::COMPRESSION != 0 {
            return Err(Error::Config(format!("{seconds} s is not a whole number of 80 ms slots")));
        }
        self.synth.mixture_dur_s = seconds * self.synth.samples_per_mixture as f64;
        self.train.frames_per_sample = frames;
        Ok(())
    }

    pub fn sample_duration(&self) -> f64 {
        self.synth.sample_dur_s()
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.n_sessions == 0 || self.workers == 0 {
            return Err(Error::Config("n_sessions and workers must be positive".into()));
        }
        if self.model.n_mels != self.mel.n_mels {
            return Err(Error::Config("model and feature mel counts differ".into()));
        }
        Ok(())
    }

    fn pipeline(&self, conventional: bool) -> PipelineConfig {
        let mut p = if conventional {
            PipelineConfig::conventional()
        } else {
            PipelineConfig { window_s: self.sample_duration(), ..Default::default() }
        };
        p.refine.enabled = self.refine;
        p.refine.seed = self.seed;
        p.seed = self.seed;
        p
    }
}

/// Shared inputs of one seeded run: corpus, voices, features, evaluation
/// sessions and the pretrained backbone.
pub struct Workbench {
    pub config: ExperimentConfig,
    pub corpus: Arc<SpeakerCorpus>,
    pub voices: Vec<VoiceProfile>,
    pub mel: MelExtractor,
    pub sessions: Vec<SyntheticSession>,
    pub backbone: PooledModel,
}

impl Workbench {
    /// Builds the corpus and sessions and pretrains the backbone.
    pub fn prepare(config: ExperimentConfig, log: impl FnMut(&StepRecord)) -> Result<Self> {
        config.validate()?;
        let (corpus, voices) = toy_corpus(&config.corpus)?;
        let mel = MelExtractor::new(config.mel.clone())?;
        let sessions = eval_sessions(&voices, &config.sessions, config.n_sessions, config.seed)?;
        let backbone = pretrain_backbone(&corpus, &mel, config.model.clone(), config.pretrain.clone(), log)?;
        Ok(Self { config, corpus: Arc::new(corpus), voices, mel, sessions, backbone })
    }

    /// Stage-two training with the given data-preparation settings.
    pub fn train(&self, synth_cfg: &SynthConfig, train_cfg: &TrainConfig, with_enhancer: bool, log: impl FnMut(&StepRecord)) -> Result<HeeModel> {
        let assets = synth_cfg.noise_rir.then(|| AugmentAssets::synthetic(self.config.seed));
        let synth = MixtureSynthesizer::new(self.corpus.clone(), synth_cfg.clone(), assets, self.mel.clone())?;
        let model = train_hee(self.config.model.clone(), self.backbone.params(), with_enhancer, &synth, train_cfg.clone(), log)?;
        Ok(model.strip_head())
    }

    /// Diarises every evaluation session and pools the error components.
    pub fn evaluate(&self, extractor: Extractor, pipeline: PipelineConfig) -> Result<Evaluation> {
        let mut breakdown = DerBreakdown::default();
        let mut count_errors = 0;
        let inputs: Vec<(String, crate::audio::Waveform, Vec<VoicedSegment>)> = self
            .sessions
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let name = format!("toy{i:03}");
                let segs = s.segments.iter().map(|&(a, b)| VoicedSegment::new(name.clone(), a, b)).collect::<Result<_>>()?;
                Ok((name, s.audio.clone(), segs))
            })
            .collect::<Result<_>>()?;
        for ((name, audio, segs), s) in inputs.iter().zip(&self.sessions) {
            let mut cfg = pipeline.clone();
            if self.config.oracle_count {
                cfg.oracle_speakers = Some(s.speakers.len());
            }
            let diarizer = Diarizer::new(extractor.clone(), self.mel.clone(), cfg)?;
            let result = diarizer.diarize(name, audio, segs)?;
            if result.n_speakers != s.speakers.len() {
                count_errors += 1;
            }
            let hyp = Annotation::from_hypotheses(&[result.hypothesis]);
            breakdown.accumulate(&compute_der(&reference_turns(s), hyp.turns(name), None)?);
        }
        Ok(Evaluation { breakdown, count_errors, sessions: inputs.len() })
    }
}

/// Evaluation sessions drawn from a stream independent of training.
pub fn eval_sessions(voices: &[VoiceProfile], cfg: &SessionConfig, n: usize, seed: u64) -> Result<Vec<SyntheticSession>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    (0..n).map(|_| synth_session(voices, cfg, &mut rng)).collect()
}

/// Ground-truth turns of a synthetic session, speakers named by voice index.
pub fn reference_turns(s: &SyntheticSession) -> Vec<SpeakerTurn> {
    s.reference.iter().map(|t| SpeakerTurn { start: t.start, end: t.end, speaker: format!("v{}", t.speaker) }).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub breakdown: DerBreakdown,
    /// Sessions whose clustering used a speaker count other than the truth.
    pub count_errors: usize,
    pub sessions: usize,
}

/// One row of an experiment report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub seed: u64,
    pub evaluation: Evaluation,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<VariantResult>,
}

impl ExperimentReport {
    /// Names in first-seen order.
    pub fn variants(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.name) {
                names.push(r.name.clone());
            }
        }
        names
    }

    /// Speaker confusion of `name`, averaged over seeds with equal weight.
    pub fn mean_sc(&self, name: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.name == name).map(|r| r.evaluation.breakdown.sc_rate()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn merge(&mut self, other: ExperimentReport) {
        self.rows.extend(other.rows);
    }

    /// Aligned table: one row per variant and seed, then the per-variant
    /// means. Rates in percent.
    pub fn table(&self) -> String {
        let mut out = format!("{:<16} {:>6} {:>7} {:>7} {:>7} {:>7} {:>6}\n", "variant", "seed", "DER", "FA", "MS", "SC", "k-err");
        for r in &self.rows {
            let b = &r.evaluation.breakdown;
            out += &format!(
                "{:<16} {:>6} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>6}\n",
                r.name,
                r.seed,
                100.0 * b.der(),
                100.0 * b.fa_rate(),
                100.0 * b.ms_rate(),
                100.0 * b.sc_rate(),
                r.evaluation.count_errors
            );
        }
        for name in self.variants() {
            out += &format!("{:<16} {:>6} {:>7} {:>7} {:>7} {:>7.2}\n", name, "mean", "", "", "", 100.0 * self.mean_sc(&name).unwrap_or(f64::NAN));
        }
        out
    }

    pub fn json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out += &serde_json::to_string(r)?;
            out.push('\n');
        }
        Ok(out)
    }
}

pub const FULL: &str = "hee";
pub const NO_ENHANCER: &str = "hee-no-enhancer";
pub const CONVENTIONAL: &str = "conventional";

/// Trains the extractor with and without its enhancer on identical data and
/// scores both against the pooled baseline built from the same backbone.
pub fn enhancer_study(config: &ExperimentConfig, mut log: impl FnMut(&str, &StepRecord)) -> Result<ExperimentReport> {
    let bench = Workbench::prepare(config.clone(), |r| log("pretrain", r))?;
    let mut report = ExperimentReport::default();
    for (name, with_enhancer) in [(FULL, true), (NO_ENHANCER, false)] {
        let t = Instant::now();
        let model = bench.train(&config.synth, &config.train, with_enhancer, |r| log(name, r))?;
        let evaluation = bench.evaluate(Extractor::Hee(model), config.pipeline(false))?;
        report.rows.push(VariantResult { name: name.into(), seed: config.seed, evaluation, wall_clock_s: t.elapsed().as_secs_f64() });
    }
    let t = Instant::now();
    let evaluation = bench.evaluate(Extractor::Conventional(bench.backbone.strip_head()), config.pipeline(true))?;
    report.rows.push(VariantResult { name: CONVENTIONAL.into(), seed: config.seed, evaluation, wall_clock_s: t.elapsed().as_secs_f64() });
    Ok(report)
}

/// One data-preparation change relative to the full recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Ablation {
    Full,
    NoShuffle,
    NoSpecAugment,
    NoNoiseRir,
    /// Training sample and inference window length in seconds.
    Duration(f64),
}

impl Ablation {
    /// The rows of the data-preparation ablation table.
    pub fn standard() -> Vec<Ablation> {
        vec![
            Ablation::Full,
            Ablation::NoNoiseRir,
            Ablation::NoSpecAugment,
            Ablation::NoShuffle,
            Ablation::Duration(2.4),
            Ablation::Duration(4.0),
            Ablation::Duration(4.8),
        ]
    }

    pub fn name(&self) -> String {
        match self {
            Ablation::Full => "full".into(),
            Ablation::NoShuffle => "no-shuffle".into(),
            Ablation::NoSpecAugment => "no-specaug".into(),
            Ablation::NoNoiseRir => "no-noise-rir".into(),
            Ablation::Duration(d) => format!("duration-{d:.1}s"),
        }
    }

    /// Parses the names produced by [`Ablation::name`]; `duration-X` accepts
    /// any number of seconds with an optional `s` suffix.
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Ablation::Full,
            "no-shuffle" => Ablation::NoShuffle,
            "no-specaug" => Ablation::NoSpecAugment,
            "no-noise-rir" => Ablation::NoNoiseRir,
            other => {
                let d = other
                    .strip_prefix("duration-")
                    .map(|d| d.trim_end_matches('s'))
                    .and_then(|d| d.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("unknown ablation {other:?}")))?;
                Ablation::Duration(d)
            }
        })
    }

    /// Applies the change to a copy of `base`.
    pub fn apply(&self, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut c = base.clone();
        match *self {
            Ablation::Full => {}
            Ablation::NoShuffle => c.synth.shuffle = false,
            Ablation::NoSpecAugment => c.synth.spec_augment = false,
            Ablation::NoNoiseRir => c.synth.noise_rir = false,
            Ablation::Duration(d) => c.set_sample_duration(d)?,
        }
        c.validate()?;
        Ok(c)
    }
}

/// Trains one full extractor per ablation on a shared pretrained backbone
/// and scores each on the same sessions.
pub fn ablation_study(config: &ExperimentConfig, ablations: &[Ablation], mut log: impl FnMut(&str, &StepRecord)) -> Result<ExperimentReport> {
    let configs = ablations.iter().map(|a| Ok((a.name(), a.apply(config)?))).collect::<Result<Vec<_>>>()?;
    let bench = Workbench::prepare(config.clone(), |r| log("pretrain", r))?;
    let mut report = ExperimentReport::default();
    for (name, c) in configs {
        let t = Instant::now();
        let model = bench.train(&c.synth, &c.train, true, |r| log(&name, r))?;
        let evaluation = bench.evaluate(Extractor::Hee(model), c.pipeline(false))?;
        report.rows.push(VariantResult { name, seed: config.seed, evaluation, wall_clock_s: t.elapsed().as_secs_f64() });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::standard() {
            assert_eq!(Ablation::parse(&a.name()).unwrap(), a);
        }
        assert_eq!(Ablation::parse("duration-3.2").unwrap(), Ablation::Duration(3.2));
        assert!(Ablation::parse("no-enhancer").is_err());
    }

    #[test]
    fn each_ablation_is_a_single_field_delta() {
        let base = ExperimentConfig::desk();
        let full = Ablation::Full.apply(&base).unwrap();
        assert_eq!(full, base);
        assert!(!Ablation::NoShuffle.apply(&base).unwrap().synth.shuffle);
        assert!(!Ablation::NoSpecAugment.apply(&base).unwrap().synth.spec_augment);
        assert!(!Ablation::NoNoiseRir.apply(&base).unwrap().synth.noise_rir);
        for d in [2.4, 3.2, 4.0, 4.8] {
            let c = Ablation::Duration(d).apply(&base).unwrap();
            assert!((c.sample_duration() - d).abs() < 1e-12);
            assert_eq!(c.train.frames_per_sample, (d * 100.0).round() as usize);
            assert_eq!(c.synth.samples_per_mixture, 4);
        }
        assert!(Ablation::Duration(3.0).apply(&base).is_err());
    }

    #[test]
    fn report_means_weight_seeds_equally() {
        let row = |name: &str, seed, sc| VariantResult {
            name: name.into(),
            seed,
            evaluation: Evaluation {
                breakdown: DerBreakdown { scored_speech: 10.0, confusion: sc, ..Default::default() },
                count_errors: 0,
                sessions: 1,
            },
            wall_clock_s: 0.0,
        };
        let r = ExperimentReport { rows: vec![row("a", 0, 1.0), row("b", 0, 2.0), row("a", 1, 3.0)] };
        assert_eq!(r.variants(), vec!["a", "b"]);
        assert!((r.mean_sc("a").unwrap() - 0.2).abs() < 1e-12);
        assert!(r.mean_sc("c").is_none());
        assert_eq!(r.table().lines().count(), 1 + 3 + 2);
        assert_eq!(r.json_lines().unwrap().lines().count(), 3);
    }
}
