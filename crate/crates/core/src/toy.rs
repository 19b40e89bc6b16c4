//! Synthetic voices for desk-scale experiments.
//!
//! Each speaker is a source-filter model: a glottal pulse train at a
//! speaker-specific pitch drives a cascade of formant resonators whose
//! frequencies come from a shared vowel inventory, scaled by the speaker's
//! vocal-tract factor and perturbed by per-speaker vowel offsets. Speakers
//! favour different vowels. Utterances are sequences of short syllables
//! separated by pauses, with per-syllable pitch and formant jitter and a
//! per-utterance channel colouring, so a single 80 ms position carries only
//! partial evidence of identity while a second or more of speech is
//! distinctive.
//!
//! [`synth_session`] assembles diarisation sessions with planted speaker
//! turns and a reference annotation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::synth::SpeakerCorpus;

const VOWELS: [[f64; 3]; 10] = [
    [270.0, 2290.0, 3010.0],
    [390.0, 1990.0, 2550.0],
    [530.0, 1840.0, 2480.0],
    [660.0, 1720.0, 2410.0],
    [730.0, 1090.0, 2440.0],
    [570.0, 840.0, 2410.0],
    [440.0, 1020.0, 2240.0],
    [300.0, 870.0, 2240.0],
    [640.0, 1190.0, 2390.0],
    [490.0, 1350.0, 1690.0],
];
const BANDWIDTHS: [f64; 4] = [70.0, 100.0, 130.0, 170.0];

/// Parameters of one synthetic speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoiceProfile {
    pub f0_hz: f64,
    pub formant_scale: f64,
    /// Multiplicative per-vowel, per-formant offsets.
    pub vowel_offsets: Vec<[f64; 3]>,
    /// Unnormalised preference over the vowel inventory.
    pub vowel_weights: Vec<f64>,
    /// One-pole low-pass coefficient shaping the source spectrum.
    pub tilt: f64,
    /// Aspiration noise relative to the pulse train.
    pub breathiness: f64,
}

impl VoiceProfile {
    pub fn random(rng: &mut impl Rng) -> Self {
        let f0_hz = (rng.random_range(95f64.ln()..240f64.ln())).exp();
        let formant_scale = rng.random_range(0.88..1.22);
        let vowel_offsets = (0..VOWELS.len())
            .map(|_| [rng.random_range(0.92..1.08), rng.random_range(0.92..1.08), rng.random_range(0.94..1.06)])
            .collect();
        let vowel_weights = (0..VOWELS.len()).map(|_| rng.random_range(0.0f64..1.0).powi(3)).collect();
        Self {
            f0_hz,
            formant_scale,
            vowel_offsets,
            vowel_weights,
            tilt: rng.random_range(0.55..0.9),
            breathiness: rng.random_range(0.02..0.25),
        }
    }
}

/// Deterministic set of distinct voices.
pub fn voice_profiles(n: usize, seed: u64) -> Vec<VoiceProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_face);
    (0..n).map(|_| VoiceProfile::random(&mut rng)).collect()
}

struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bw: f64) -> Self {
        let fs = SAMPLE_RATE as f64;
        let r = (-std::f64::consts::PI * bw / fs).exp();
        let theta = 2.0 * std::f64::consts::PI * freq.min(fs * 0.45) / fs;
        Self { a1: 2.0 * r * theta.cos(), a2: -r * r, gain: 1.0 - r, y1: 0.0, y2: 0.0 }
    }

    fn retune(&mut self, freq: f64, bw: f64) {
        let fresh = Self::new(freq, bw);
        self.a1 = fresh.a1;
        self.a2 = fresh.a2;
        self.gain = fresh.gain;
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn pick_weighted(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Synthesises `duration_s` seconds of speech-like audio for `voice`.
pub fn synth_utterance(voice: &VoiceProfile, duration_s: f64, rng: &mut impl Rng) -> Waveform {
    let fs = SAMPLE_RATE as f64;
    let n = (duration_s * fs).round().max(1.0) as usize;
    let mut out = vec![0.0f64; n];
    let jitter = Normal::new(0.0, 0.06).expect("valid");
    let formant_jitter = Normal::new(0.0, 0.04).expect("valid");

    let mut resonators: Vec<Resonator> = (0..4).map(|i| Resonator::new(500.0 * (i + 1) as f64, BANDWIDTHS[i])).collect();
    let mut phase = 0.0f64;
    let mut lp = 0.0f64;
    let mut pos = 0usize;
    // Start mid-pause half the time so utterance crops do not all begin voiced.
    if rng.random_bool(0.5) {
        pos += (rng.random_range(0.0..0.1) * fs) as usize;
    }
    while pos < n {
        let syl_len = (rng.random_range(0.09..0.26) * fs) as usize;
        let end = (pos + syl_len).min(n);
        let voiced = rng.random_bool(0.85);
        let vowel = pick_weighted(&voice.vowel_weights, rng);
        let f0_start = voice.f0_hz * f64::exp(jitter.sample(rng));
        let f0_end = f0_start * (1.0 + rng.random_range(-0.08..0.08));
        for (k, res) in resonators.iter_mut().enumerate() {
            let base = if k < 3 { VOWELS[vowel][k] * voice.vowel_offsets[vowel][k] } else { 3500.0 };
            let f = base * voice.formant_scale * (1.0 + formant_jitter.sample(rng));
            res.retune(f, BANDWIDTHS[k]);
        }
        let len = end - pos;
        let amp = rng.random_range(0.5..1.0);
        for i in 0..len {
            let frac = i as f64 / len.max(1) as f64;
            // Raised-cosine envelope over the syllable.
            let env = amp * (std::f64::consts::PI * frac).sin().powf(0.6);
            let excitation = if voiced {
                let f0 = f0_start + (f0_end - f0_start) * frac;
                phase += f0 / fs;
                let pulse = if phase >= 1.0 {
                    phase -= 1.0;
                    1.0
                } else {
                    0.0
                };
                pulse + voice.breathiness * rng.random_range(-1.0..1.0)
            } else {
                0.4 * rng.random_range(-1.0..1.0)
            };
            lp = voice.tilt * lp + (1.0 - voice.tilt) * excitation;
            let src = if voiced { lp } else { excitation };
            let mut y = src;
            for res in resonators.iter_mut() {
                y = res.tick(y);
            }
            out[pos + i] = env * y;
        }
        pos = end;
        // Pause between syllables.
        pos += (rng.random_range(0.02..0.15) * fs) as usize;
    }

    // Per-utterance channel: first-order tilt and level.
    let colour = rng.random_range(-0.6..0.6);
    let mut prev = 0.0;
    for v in out.iter_mut() {
        let x = *v;
        *v = x + colour * (x - prev);
        prev = x;
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let level = 10f64.powf(rng.random_range(-26.0..-16.0) / 20.0);
    let noise_level = level * 10f64.powf(-rng.random_range(20.0..35.0) / 20.0);
    let samples = out
        .iter()
        .map(|v| (v / rms * level + noise_level * rng.random_range(-1.7..1.7)) as f32)
        .collect();
    Waveform::new(samples).expect("finite synthetic audio")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusConfig {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self { n_speakers: 8, utterances_per_speaker: 20, min_duration_s: 3.0, max_duration_s: 5.0, seed: 0 }
    }
}

/// Builds a corpus of synthetic speakers. Voices depend only on
/// `(n_speakers, seed)`; utterances are drawn from a separate stream.
pub fn toy_corpus(cfg: &ToyCorpusConfig) -> Result<(SpeakerCorpus, Vec<VoiceProfile>)> {
    if cfg.n_speakers == 0 || cfg.utterances_per_speaker == 0 {
        return Err(Error::Corpus("toy corpus needs speakers and utterances".into()));
    }
    let profiles = voice_profiles(cfg.n_speakers, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let speakers = profiles
        .iter()
        .map(|p| {
            (0..cfg.utterances_per_speaker)
                .map(|_| synth_utterance(p, rng.random_range(cfg.min_duration_s..=cfg.max_duration_s), &mut rng))
                .collect()
        })
        .collect();
    Ok((SpeakerCorpus::new(speakers)?, profiles))
}

/// One labelled speaker turn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub start: f64,
    pub end: f64,
    pub speaker: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub min_speakers: usize,
    pub max_speakers: usize,
    pub duration_s: f64,
    pub turn_range_s: (f64, f64),
    /// Number of turns in one voiced region.
    pub turns_per_region: (usize, usize),
    pub pause_range_s: (f64, f64),
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            min_speakers: 2,
            max_speakers: 4,
            duration_s: 40.0,
            turn_range_s: (0.5, 2.0),
            turns_per_region: (3, 8),
            pause_range_s: (0.3, 1.0),
        }
    }
}

/// A synthetic session with its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticSession {
    pub audio: Waveform,
    pub reference: Vec<Turn>,
    /// Voiced regions, i.e. the oracle end points.
    pub segments: Vec<(f64, f64)>,
    pub speakers: Vec<usize>,
}

/// Builds a session from `voices`: regions of back-to-back turns by
/// alternating speakers, separated by pauses. Turn boundaries fall on the
/// 10 ms grid.
pub fn synth_session(voices: &[VoiceProfile], cfg: &SessionConfig, rng: &mut impl Rng) -> Result<SyntheticSession> {
    if cfg.min_speakers == 0 || cfg.max_speakers < cfg.min_speakers || cfg.max_speakers > voices.len() {
        return Err(Error::Config(format!(
            "cannot draw {}..={} speakers from {} voices",
            cfg.min_speakers,
            cfg.max_speakers,
            voices.len()
        )));
    }
    let k = rng.random_range(cfg.min_speakers..=cfg.max_speakers);
    let mut pool: Vec<usize> = (0..voices.len()).collect();
    for i in 0..k {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
    }
    let speakers: Vec<usize> = pool[..k].to_vec();

    let grid = |t: f64| (t * 100.0).round() / 100.0;
    let fs = SAMPLE_RATE as f64;
    let mut audio: Vec<f32> = Vec::new();
    let mut reference = Vec::new();
    let mut segments = Vec::new();
    let mut t = grid(rng.random_range(cfg.pause_range_s.0..cfg.pause_range_s.1));
    audio.resize((t * fs).round() as usize, 0.0);
    let mut last: Option<usize> = None;
    let mut used = vec![false; k];
    while t < cfg.duration_s {
        let n_turns = rng.random_range(cfg.turns_per_region.0..=cfg.turns_per_region.1);
        let region_start = t;
        for _ in 0..n_turns {
            // Prefer speakers not heard yet so every planted speaker appears.
            let unused: Vec<usize> = (0..k).filter(|&s| !used[s] && Some(s) != last).collect();
            let s = if !unused.is_empty() {
                unused[rng.random_range(0..unused.len())]
            } else {
                loop {
                    let s = rng.random_range(0..k);
                    if k == 1 || Some(s) != last {
                        break s;
                    }
                }
            };
            used[s] = true;
            last = Some(s);
            let dur = grid(rng.random_range(cfg.turn_range_s.0..=cfg.turn_range_s.1));
            let w = synth_utterance(&voices[speakers[s]], dur, rng);
            audio.extend_from_slice(w.samples());
            reference.push(Turn { start: t, end: grid(t + dur), speaker: speakers[s] });
            t = grid(t + dur);
        }
        segments.push((region_start, t));
        let pause = grid(rng.random_range(cfg.pause_range_s.0..cfg.pause_range_s.1));
        audio.extend(std::iter::repeat_n(0.0f32, (pause * fs).round() as usize));
        t = grid(t + pause);
    }
    // Faint floor noise everywhere, including pauses.
    for v in audio.iter_mut() {
        *v += 1e-4 * rng.random_range(-1.0f32..1.0);
    }
    Ok(SyntheticSession { audio: Waveform::new(audio)?, reference, segments, speakers })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn utterances_have_requested_length() {
        let v = voice_profiles(1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = synth_utterance(&v[0], 3.2, &mut rng);
        assert_eq!(w.len(), 51_200);
        assert!(w.power() > 0.0);
    }

    #[test]
    fn toy_corpus_is_deterministic() {
        let cfg = ToyCorpusConfig { n_speakers: 3, utterances_per_speaker: 2, ..Default::default() };
        let (a, pa) = toy_corpus(&cfg).unwrap();
        let (b, pb) = toy_corpus(&cfg).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(a.utterances(2)[1], b.utterances(2)[1]);
        assert!(a.utterances(0).iter().all(|u| u.duration() >= 3.0));
    }

    #[test]
    fn sessions_are_consistent() {
        let voices = voice_profiles(6, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = synth_session(&voices, &SessionConfig::default(), &mut rng).unwrap();
        let end = s.reference.last().unwrap().end;
        assert!(s.audio.duration() >= end);
        for w in s.reference.windows(2) {
            assert!(w[0].end <= w[1].start + 1e-9);
        }
        for turn in &s.reference {
            assert!(turn.end - turn.start >= 0.5 - 1e-9 && turn.end - turn.start <= 2.0 + 1e-9);
            assert!(s.segments.iter().any(|&(a, b)| turn.start >= a - 1e-9 && turn.end <= b + 1e-9));
        }
        let mut heard: Vec<usize> = s.reference.iter().map(|t| t.speaker).collect();
        heard.sort();
        heard.dedup();
        let mut planted = s.speakers.clone();
        planted.sort();
        assert_eq!(heard, planted);
    }
}
