//! On-the-fly multi-speaker training mixtures.
//!
//! A mixture draws one to four speakers, concatenates crops of their
//! utterances to a target length, corrupts the audio with two independent
//! noise-or-reverberation passes, extracts normalised mel features, masks
//! random frequency bands, and finally shuffles contiguous blocks of frames
//! together with their frame-level global speaker labels. Speakers never
//! overlap.
//!
//! The efficient pipeline builds one long mixture (12.8 s by default) and
//! cuts it into four contiguous 3.2 s samples, so no synthesised frame is
//! wasted. [`MixtureSynthesizer::synth_naive`] is the one-sample-per-mixture
//! reference it is benchmarked against.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{power, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::features::{frames_for_duration, MelExtractor, MelFeatures};

/// Utterances grouped by dense global speaker id.
#[derive(Debug, Clone)]
pub struct SpeakerCorpus {
    speakers: Vec<Vec<Waveform>>,
    names: Vec<String>,
}

impl SpeakerCorpus {
    pub fn new(speakers: Vec<Vec<Waveform>>) -> Result<Self> {
        let names = (0..speakers.len()).map(|i| i.to_string()).collect();
        Self::with_names(speakers, names)
    }

    pub fn with_names(speakers: Vec<Vec<Waveform>>, names: Vec<String>) -> Result<Self> {
        if speakers.is_empty() {
            return Err(Error::Corpus("corpus has no speakers".into()));
        }
        if let Some(i) = speakers.iter().position(Vec::is_empty) {
            return Err(Error::Corpus(format!("speaker {i} has no utterances")));
        }
        if names.len() != speakers.len() {
            return Err(Error::Corpus("one name per speaker required".into()));
        }
        Ok(Self { speakers, names })
    }

    /// Reads a `speaker_id<TAB>wav_path` manifest. Relative paths resolve
    /// against the manifest's directory; speakers get dense ids in sorted
    /// name order.
    pub fn from_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries: Vec<(String, PathBuf)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (spk, wav) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse { line: i + 1, msg: "expected speaker_id<TAB>wav_path".into() })?;
            let wav = PathBuf::from(wav.trim());
            entries.push((spk.trim().to_string(), if wav.is_absolute() { wav } else { base.join(wav) }));
        }
        let mut names: Vec<String> = entries.iter().map(|(s, _)| s.clone()).collect();
        names.sort();
        names.dedup();
        let mut speakers = vec![Vec::new(); names.len()];
        for (spk, wav) in entries {
            let id = names.binary_search(&spk).expect("name collected above");
            speakers[id].push(Waveform::read_wav(&wav)?);
        }
        Self::with_names(speakers, names)
    }

    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn utterances(&self, speaker: usize) -> &[Waveform] {
        &self.speakers[speaker]
    }

    pub fn name(&self, speaker: usize) -> &str {
        &self.names[speaker]
    }

    pub fn total_duration(&self) -> f64 {
        self.speakers.iter().flatten().map(Waveform::duration).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub speaker_count_probs: [f64; 4],
    /// Probability that each of the two corruption passes fires.
    pub aug_pass_prob: f64,
    /// Share of fired passes that reverberate rather than add noise.
    pub rir_share: f64,
    pub snr_db_range: (f64, f64),
    pub specaug_drops_range: (usize, usize),
    /// Widest masked band, in mel bins.
    pub specaug_max_width: usize,
    pub block_dur_range_s: (f64, f64),
    pub mixture_dur_s: f64,
    pub samples_per_mixture: usize,
    pub noise_rir: bool,
    pub spec_augment: bool,
    pub shuffle: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            speaker_count_probs: [0.10, 0.30, 0.30, 0.30],
            aug_pass_prob: 0.5,
            rir_share: 0.5,
            snr_db_range: (0.0, 20.0),
            specaug_drops_range: (2, 5),
            specaug_max_width: 4,
            block_dur_range_s: (0.5, 3.0),
            mixture_dur_s: 12.8,
            samples_per_mixture: 4,
            noise_rir: true,
            spec_augment: true,
            shuffle: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.speaker_count_probs.iter().sum();
        if self.speaker_count_probs.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config("speaker_count_probs must be non-negative and sum to 1".into()));
        }
        if !(0.0..=1.0).contains(&self.aug_pass_prob) || !(0.0..=1.0).contains(&self.rir_share) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        if self.snr_db_range.0 > self.snr_db_range.1 {
            return Err(Error::Config("snr_db_range is reversed".into()));
        }
        if self.specaug_drops_range.0 > self.specaug_drops_range.1 {
            return Err(Error::Config("specaug_drops_range is reversed".into()));
        }
        let (lo, hi) = self.block_dur_range_s;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config("block_dur_range_s must be positive and ordered".into()));
        }
        if self.samples_per_mixture == 0 {
            return Err(Error::Config("samples_per_mixture must be positive".into()));
        }
        Ok(())
    }

    /// Duration of one emitted sample.
    pub fn sample_dur_s(&self) -> f64 {
        self.mixture_dur_s / self.samples_per_mixture as f64
    }
}

/// Draws a speaker count in `1..=4` from `probs`.
pub fn sample_speaker_count(probs: &[f64; 4], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i + 1;
        }
    }
    4
}

/// A crop of one utterance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Piece {
    pub speaker: usize,
    pub utterance: usize,
    pub offset: usize,
    pub len: usize,
}

/// Which speakers, in which order, and which crops fill the mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePlan {
    pub speakers: Vec<usize>,
    pub pieces: Vec<Piece>,
    pub target_duration: f64,
}

impl MixturePlan {
    pub fn total_samples(&self) -> usize {
        self.pieces.iter().map(|p| p.len).sum()
    }
}

/// Splits `total` frames as evenly as possible into `k` shares.
fn even_shares(total: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| total / k + usize::from(i < total % k)).collect()
}

/// Plans a mixture of `k` distinct speakers. The target length is split
/// evenly across speakers on the frame grid; each share is filled with random
/// crops of that speaker's utterances.
pub fn plan_mixture(corpus: &SpeakerCorpus, k: usize, target_duration: f64, hop: usize, rng: &mut impl Rng) -> Result<MixturePlan> {
    if k == 0 || k > 4 {
        return Err(Error::invalid(format!("speaker count {k} outside 1..=4")));
    }
    if k > corpus.n_speakers() {
        return Err(Error::Corpus(format!("{k} speakers requested from a corpus of {}", corpus.n_speakers())));
    }
    let mut pool: Vec<usize> = (0..corpus.n_speakers()).collect();
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let speakers = pool[..k].to_vec();
    let total_frames = frames_for_duration(target_duration, hop as f64 / SAMPLE_RATE as f64)?;
    let mut pieces = Vec::new();
    for (&spk, share) in speakers.iter().zip(even_shares(total_frames, k)) {
        let mut need = share * hop;
        let utts = corpus.utterances(spk);
        while need > 0 {
            let u = rng.random_range(0..utts.len());
            let len = utts[u].len();
            let take = need.min(len);
            let offset = if len > take { rng.random_range(0..=len - take) } else { 0 };
            pieces.push(Piece { speaker: spk, utterance: u, offset, len: take });
            need -= take;
        }
    }
    Ok(MixturePlan { speakers, pieces, target_duration })
}

/// Concatenates the plan's crops. Every output sample carries the global id
/// of the speaker it came from.
pub fn build_mixture(plan: &MixturePlan, corpus: &SpeakerCorpus) -> Result<(Waveform, Vec<usize>)> {
    let mut audio = Vec::with_capacity(plan.total_samples());
    let mut labels = Vec::with_capacity(plan.total_samples());
    for p in &plan.pieces {
        if p.speaker >= corpus.n_speakers() {
            return Err(Error::Corpus(format!("speaker {} not in corpus", p.speaker)));
        }
        let utt = corpus
            .utterances(p.speaker)
            .get(p.utterance)
            .ok_or_else(|| Error::Corpus(format!("speaker {} has no utterance {}", p.speaker, p.utterance)))?;
        let src = utt
            .samples()
            .get(p.offset..p.offset + p.len)
            .ok_or_else(|| Error::Corpus(format!("crop outside utterance {} of speaker {}", p.utterance, p.speaker)))?;
        audio.extend_from_slice(src);
        labels.extend(std::iter::repeat_n(p.speaker, p.len));
    }
    Ok((Waveform::new(audio)?, labels))
}

/// Noise clips and room impulse responses for corruption passes.
#[derive(Debug, Clone, Default)]
pub struct AugmentAssets {
    pub noises: Vec<Vec<f32>>,
    pub rirs: Vec<Vec<f32>>,
}

impl AugmentAssets {
    /// Loads every `.wav` in the two directories.
    pub fn from_dirs(noise_dir: impl AsRef<Path>, rir_dir: impl AsRef<Path>) -> Result<Self> {
        let load = |dir: &Path| -> Result<Vec<Vec<f32>>> {
            if !dir.is_dir() {
                return Err(Error::MissingAssets(dir.to_path_buf()));
            }
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            paths.sort();
            if paths.is_empty() {
                return Err(Error::MissingAssets(dir.to_path_buf()));
            }
            paths.iter().map(|p| Ok(Waveform::read_wav(p)?.into_samples())).collect()
        };
        Ok(Self { noises: load(noise_dir.as_ref())?, rirs: load(rir_dir.as_ref())? })
    }

    /// Generated assets: coloured noises and exponentially decaying
    /// impulse responses with early reflections.
    pub fn synthetic(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa55e7);
        let fs = SAMPLE_RATE as f64;
        let noises = (0..6)
            .map(|i| {
                let n = 2 * SAMPLE_RATE as usize;
                // Leaky integration of white noise; larger leak gives redder noise.
                let leak = [0.0, 0.5, 0.8, 0.9, 0.95, 0.98][i];
                let mut state = 0.0f64;
                let raw: Vec<f64> = (0..n)
                    .map(|_| {
                        state = leak * state + rng.random_range(-1.0..1.0);
                        state
                    })
                    .collect();
                let rms = (raw.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
                raw.iter().map(|v| (v / rms * 0.1) as f32).collect()
            })
            .collect();
        let rirs = (0..6)
            .map(|_| {
                let rt60 = rng.random_range(0.15..0.6);
                let len = (rt60 * fs) as usize;
                let decay = 6.9 / (rt60 * fs);
                let mut h: Vec<f32> = (0..len)
                    .map(|i| ((-decay * i as f64).exp() * rng.random_range(-1.0..1.0) * 0.3) as f32)
                    .collect();
                h[0] = 1.0;
                h
            })
            .collect();
        Self { noises, rirs }
    }
}

/// Adds `noise` (looped or cropped from `start`) scaled to `snr_db` against
/// the signal power.
pub fn add_noise_at_snr(signal: &[f32], noise: &[f32], start: usize, snr_db: f64) -> Vec<f32> {
    let ps = power(signal);
    let looped: Vec<f32> = (0..signal.len()).map(|i| noise[(start + i) % noise.len()]).collect();
    let pn = power(&looped);
    if pn <= 0.0 || ps <= 0.0 {
        return signal.to_vec();
    }
    let gain = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    signal.iter().zip(&looped).map(|(s, n)| s + (gain * *n as f64) as f32).collect()
}

/// Convolves with `rir`, keeps the first `signal.len()` samples, and restores
/// the input power.
pub fn reverberate(signal: &[f32], rir: &[f32]) -> Vec<f32> {
    let n = signal.len();
    let size = (n + rir.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a: Vec<Complex<f64>> = (0..size).map(|i| Complex::new(signal.get(i).map_or(0.0, |&v| v as f64), 0.0)).collect();
    let mut b: Vec<Complex<f64>> = (0..size).map(|i| Complex::new(rir.get(i).map_or(0.0, |&v| v as f64), 0.0)).collect();
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inv.process(&mut a);
    let out: Vec<f64> = a[..n].iter().map(|c| c.re / size as f64).collect();
    let p_in = power(signal);
    let p_out = out.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let g = if p_out > 0.0 { (p_in / p_out).sqrt() } else { 1.0 };
    out.iter().map(|v| (v * g) as f32).collect()
}

/// Two independent corruption passes.
#[derive(Debug, Clone)]
pub struct Augmenter {
    assets: AugmentAssets,
    pass_prob: f64,
    rir_share: f64,
    snr_db_range: (f64, f64),
}

/// What a single corruption pass did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PassKind {
    Skipped,
    Noise { snr_db: f64 },
    Reverb,
}

impl Augmenter {
    pub fn new(assets: AugmentAssets, cfg: &SynthConfig) -> Result<Self> {
        if cfg.aug_pass_prob > 0.0 && (assets.noises.is_empty() || assets.rirs.is_empty()) {
            return Err(Error::Config("augmentation enabled without noise and impulse-response assets".into()));
        }
        Ok(Self { assets, pass_prob: cfg.aug_pass_prob, rir_share: cfg.rir_share, snr_db_range: cfg.snr_db_range })
    }

    pub fn augment(&self, w: &Waveform, rng: &mut impl Rng) -> Result<Waveform> {
        Ok(self.augment_traced(w, rng)?.0)
    }

    pub fn augment_traced(&self, w: &Waveform, rng: &mut impl Rng) -> Result<(Waveform, [PassKind; 2])> {
        let mut x = w.samples().to_vec();
        let mut kinds = [PassKind::Skipped; 2];
        for kind in kinds.iter_mut() {
            if !rng.random_bool(self.pass_prob) {
                continue;
            }
            if rng.random_bool(self.rir_share) {
                let rir = &self.assets.rirs[rng.random_range(0..self.assets.rirs.len())];
                x = reverberate(&x, rir);
                *kind = PassKind::Reverb;
            } else {
                let noise = &self.assets.noises[rng.random_range(0..self.assets.noises.len())];
                let (lo, hi) = self.snr_db_range;
                let snr = if hi > lo { rng.random_range(lo..hi) } else { lo };
                let start = rng.random_range(0..noise.len());
                x = add_noise_at_snr(&x, noise, start, snr);
                *kind = PassKind::Noise { snr_db: snr };
            }
        }
        Ok((Waveform::new(x)?, kinds))
    }
}

/// Features with one global speaker id per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub features: MelFeatures,
    pub labels: Vec<usize>,
}

impl MixtureSample {
    pub fn new(features: MelFeatures, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != features.n_frames() {
            return Err(Error::Shape(format!("{} labels for {} frames", labels.len(), features.n_frames())));
        }
        Ok(Self { features, labels })
    }

    pub fn n_frames(&self) -> usize {
        self.labels.len()
    }

    pub fn distinct_speakers(&self) -> Vec<usize> {
        let mut s = self.labels.clone();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Contiguous frames `[start, end)`.
    pub fn frames(&self, start: usize, end: usize) -> Result<Self> {
        Ok(Self { features: self.features.frames(start, end)?, labels: self.labels[start..end].to_vec() })
    }
}

/// Zeroes `drops` random bands of up to `max_width` mel bins across all
/// frames. Returns the masked features and the set of masked bins.
pub fn spec_augment(f: &MelFeatures, drops: usize, max_width: usize, rng: &mut impl Rng) -> (MelFeatures, Vec<usize>) {
    let mut out = f.clone();
    let n_mels = f.n_mels();
    let mut masked = vec![false; n_mels];
    for _ in 0..drops {
        let width = rng.random_range(1..=max_width.clamp(1, n_mels));
        let start = rng.random_range(0..=n_mels - width);
        for m in masked.iter_mut().skip(start).take(width) {
            *m = true;
        }
    }
    let bins: Vec<usize> = (0..n_mels).filter(|&b| masked[b]).collect();
    for &b in &bins {
        out.data_mut().column_mut(b).fill(0.0);
    }
    (out, bins)
}

/// Draws the number of masked bands uniformly from `range`.
pub fn sample_drop_count(range: (usize, usize), rng: &mut impl Rng) -> usize {
    rng.random_range(range.0..=range.1)
}

/// Contiguous blocks tiling `[0, T)` and an order in which to emit them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    pub blocks: Vec<(usize, usize)>,
    pub order: Vec<usize>,
}

impl BlockPartition {
    /// Tiles `n_frames` with block lengths drawn from
    /// `[min_frames, max_frames]`; the last block takes the remainder and
    /// may be shorter. Inputs under two minimum blocks stay whole.
    pub fn random(n_frames: usize, min_frames: usize, max_frames: usize, rng: &mut impl Rng) -> Self {
        let mut blocks = Vec::new();
        if n_frames < 2 * min_frames {
            blocks.push((0, n_frames));
        } else {
            let mut start = 0;
            while start < n_frames {
                let len = rng.random_range(min_frames..=max_frames);
                let end = (start + len).min(n_frames);
                blocks.push((start, end));
                start = end;
            }
        }
        let mut order: Vec<usize> = (0..blocks.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        Self { blocks, order }
    }

    /// Frame indices in emission order.
    pub fn frame_order(&self) -> Vec<usize> {
        self.order.iter().flat_map(|&b| self.blocks[b].0..self.blocks[b].1).collect()
    }

    /// Applies the permutation to features and labels together.
    pub fn apply(&self, s: &MixtureSample) -> Result<MixtureSample> {
        let idx = self.frame_order();
        if idx.len() != s.n_frames() {
            return Err(Error::Shape(format!("partition covers {} frames, sample has {}", idx.len(), s.n_frames())));
        }
        let data = s.features.data().select(ndarray::Axis(0), &idx);
        let labels = idx.iter().map(|&i| s.labels[i]).collect();
        MixtureSample::new(MelFeatures::new(data, s.features.frame_hop_s())?, labels)
    }
}

/// Shuffles blocks of `s` with durations drawn from `block_dur_range_s`.
pub fn block_shuffle(s: &MixtureSample, block_dur_range_s: (f64, f64), rng: &mut impl Rng) -> Result<MixtureSample> {
    let hop = s.features.frame_hop_s();
    let min = frames_for_duration(block_dur_range_s.0, hop)?.max(1);
    let max = frames_for_duration(block_dur_range_s.1, hop)?.max(min);
    BlockPartition::random(s.n_frames(), min, max, rng).apply(s)
}

/// Speaker plan of one synthesised mixture, for manifests and statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub speakers: Vec<usize>,
    pub drops: usize,
    pub blocks: usize,
}

/// Mixture pipeline bound to a corpus, assets and a feature front end.
#[derive(Debug, Clone)]
pub struct MixtureSynthesizer {
    corpus: Arc<SpeakerCorpus>,
    config: SynthConfig,
    augmenter: Option<Augmenter>,
    mel: MelExtractor,
}

impl MixtureSynthesizer {
    pub fn new(corpus: Arc<SpeakerCorpus>, config: SynthConfig, assets: Option<AugmentAssets>, mel: MelExtractor) -> Result<Self> {
        config.validate()?;
        let augmenter = if config.noise_rir {
            let assets = assets.ok_or_else(|| Error::Config("noise/RIR augmentation requires assets".into()))?;
            Some(Augmenter::new(assets, &config)?)
        } else {
            None
        };
        if config.spec_augment && mel.config().n_mels < 6 {
            return Err(Error::Config("SpecAugment needs at least 6 mel bins".into()));
        }
        let hop = mel.config().frame_hop_s;
        let total = frames_for_duration(config.mixture_dur_s, hop)?;
        if total == 0 || total % config.samples_per_mixture != 0 {
            return Err(Error::Config(format!(
                "{total} mixture frames do not split into {} samples",
                config.samples_per_mixture
            )));
        }
        Ok(Self { corpus, config, augmenter, mel })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.config
    }

    pub fn corpus(&self) -> &SpeakerCorpus {
        &self.corpus
    }

    pub fn frames_per_sample(&self) -> usize {
        frames_for_duration(self.config.mixture_dur_s, self.mel.config().frame_hop_s).expect("validated")
            / self.config.samples_per_mixture
    }

    /// Independent stream for `(seed, worker, index)`.
    pub fn stream(seed: u64, worker: u64, index: u64) -> ChaCha8Rng {
        let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
        for v in [worker, index] {
            h = splitmix(h ^ splitmix(v));
        }
        ChaCha8Rng::seed_from_u64(h)
    }

    /// Augmentation, features, SpecAugment and shuffling over one waveform.
    fn process(&self, audio: &Waveform, sample_labels: &[usize], rng: &mut impl Rng) -> Result<(MixtureSample, MixtureRecord)> {
        let audio = match &self.augmenter {
            Some(a) => a.augment(audio, rng)?,
            None => audio.clone(),
        };
        let features = self.mel.extract(&audio)?;
        let hop = self.mel.config().hop_samples();
        let labels: Vec<usize> = (0..features.n_frames()).map(|t| sample_labels[t * hop]).collect();
        let mut sample = MixtureSample::new(features, labels)?;
        let mut drops = 0;
        if self.config.spec_augment {
            drops = sample_drop_count(self.config.specaug_drops_range, rng);
            sample.features = spec_augment(&sample.features, drops, self.config.specaug_max_width, rng).0;
        }
        let mut blocks = 1;
        if self.config.shuffle {
            let hop_s = self.mel.config().frame_hop_s;
            let min = frames_for_duration(self.config.block_dur_range_s.0, hop_s)?.max(1);
            let max = frames_for_duration(self.config.block_dur_range_s.1, hop_s)?.max(min);
            let part = BlockPartition::random(sample.n_frames(), min, max, rng);
            blocks = part.blocks.len();
            sample = part.apply(&sample)?;
        }
        Ok((sample, MixtureRecord { speakers: Vec::new(), drops, blocks }))
    }

    /// One long mixture cut into `samples_per_mixture` contiguous samples.
    pub fn synth_batch_efficient(&self, rng: &mut impl Rng) -> Result<(Vec<MixtureSample>, MixtureRecord)> {
        let k = sample_speaker_count(&self.config.speaker_count_probs, rng).min(self.corpus.n_speakers());
        let plan = plan_mixture(&self.corpus, k, self.config.mixture_dur_s, self.mel.config().hop_samples(), rng)?;
        let (audio, labels) = build_mixture(&plan, &self.corpus)?;
        let (full, mut record) = self.process(&audio, &labels, rng)?;
        record.speakers = plan.speakers;
        let per = self.frames_per_sample();
        let samples = (0..self.config.samples_per_mixture)
            .map(|i| full.frames(i * per, (i + 1) * per))
            .collect::<Result<Vec<_>>>()?;
        Ok((samples, record))
    }

    /// Reference pipeline: whole utterances of each drawn speaker are
    /// concatenated and processed, then a single sample is cropped out and
    /// the rest discarded.
    pub fn synth_naive(&self, rng: &mut impl Rng) -> Result<MixtureSample> {
        let k = sample_speaker_count(&self.config.speaker_count_probs, rng).min(self.corpus.n_speakers());
        let per = self.frames_per_sample();
        let hop = self.mel.config().hop_samples();
        let mut pool: Vec<usize> = (0..self.corpus.n_speakers()).collect();
        for i in 0..k {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
        }
        let mut audio = Vec::new();
        let mut labels = Vec::new();
        let mut turn = 0;
        while turn < k || audio.len() < per * hop {
            let spk = pool[turn % k];
            let utts = self.corpus.utterances(spk);
            let u = &utts[rng.random_range(0..utts.len())];
            audio.extend_from_slice(u.samples());
            labels.extend(std::iter::repeat_n(spk, u.len()));
            turn += 1;
        }
        let (full, _) = self.process(&Waveform::new(audio)?, &labels, rng)?;
        let start = rng.random_range(0..=full.n_frames() - per);
        full.frames(start, start + per)
    }

    /// `n` samples from the deterministic stream `(seed, worker, index)`.
    pub fn batch(&self, seed: u64, worker: u64, index: u64, n: usize) -> Result<Vec<MixtureSample>> {
        let mut rng = Self::stream(seed, worker, index);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let (samples, _) = self.synth_batch_efficient(&mut rng)?;
            out.extend(samples);
        }
        out.truncate(n);
        Ok(out)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
