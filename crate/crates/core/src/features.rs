//! Log mel-filterbank features on a fixed 10 ms frame clock.
//!
//! Frame `t` owns the hop region `[t * hop, (t + 1) * hop)` and its analysis
//! window is centred on that region, zero-padded at the signal edges. A
//! waveform of `n` samples therefore yields exactly `n / hop` frames, which
//! keeps duration-to-frame arithmetic exact: 3.2 s is 320 frames, 12.8 s is
//! 1280.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Default frame hop in seconds.
pub const FRAME_HOP_S: f64 = 0.010;
/// Default analysis window in seconds.
pub const FRAME_WINDOW_S: f64 = 0.025;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub frame_hop_s: f64,
    pub frame_window_s: f64,
    pub n_fft: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            n_mels: 64,
            frame_hop_s: FRAME_HOP_S,
            frame_window_s: FRAME_WINDOW_S,
            n_fft: 512,
            f_min: 20.0,
            f_max: 7600.0,
        }
    }
}

impl MelConfig {
    pub fn hop_samples(&self) -> usize {
        (self.frame_hop_s * self.sample_rate as f64).round() as usize
    }

    pub fn window_samples(&self) -> usize {
        (self.frame_window_s * self.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(Error::Config(format!("sample_rate must be {SAMPLE_RATE}")));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be positive".into()));
        }
        if self.hop_samples() == 0 || self.window_samples() < self.hop_samples() {
            return Err(Error::Config("frame window must cover at least one hop".into()));
        }
        if self.n_fft < self.window_samples() {
            return Err(Error::Config("n_fft must cover the analysis window".into()));
        }
        if !(self.f_min >= 0.0 && self.f_max > self.f_min && self.f_max <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config("mel band edges out of range".into()));
        }
        Ok(())
    }

    pub fn frames_for_duration(&self, duration_s: f64) -> Result<usize> {
        frames_for_duration(duration_s, self.frame_hop_s)
    }
}

/// Number of whole frames in `duration_s` seconds at the given hop.
///
/// A tolerance of 1e-9 frames absorbs binary rounding, so that 0.8 s is 80
/// frames rather than 79.
pub fn frames_for_duration(duration_s: f64, frame_hop_s: f64) -> Result<usize> {
    if !duration_s.is_finite() || duration_s < 0.0 {
        return Err(Error::invalid(format!("duration must be non-negative, got {duration_s}")));
    }
    Ok((duration_s / frame_hop_s + 1e-9).floor() as usize)
}

/// A `(frames × n_mels)` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFeatures {
    data: Array2<f64>,
    frame_hop_s: f64,
}

impl MelFeatures {
    pub fn new(data: Array2<f64>, frame_hop_s: f64) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Shape("feature matrix must be non-empty".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(Self { data, frame_hop_s })
    }

    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.data.ncols()
    }

    pub fn frame_hop_s(&self) -> f64 {
        self.frame_hop_s
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn duration(&self) -> f64 {
        self.n_frames() as f64 * self.frame_hop_s
    }

    /// Copies rows `[start, end)`.
    pub fn frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_frames() {
            return Err(Error::Shape(format!(
                "frame range {start}..{end} outside 0..{}",
                self.n_frames()
            )));
        }
        Ok(Self {
            data: self.data.slice(ndarray::s![start..end, ..]).to_owned(),
            frame_hop_s: self.frame_hop_s,
        })
    }
}

/// Mel-filterbank front end. Cheap to clone; the FFT plan is shared.
#[derive(Clone)]
pub struct MelExtractor {
    config: MelConfig,
    window: Vec<f64>,
    filters: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").field("config", &self.config).finish()
    }
}

impl MelExtractor {
    pub fn new(config: MelConfig) -> Result<Self> {
        config.validate()?;
        let win = config.window_samples();
        let window = (0..win)
            .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (win as f64 - 1.0)).cos())
            .collect();
        let filters = mel_filterbank(&config);
        let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
        Ok(Self { config, window, filters, fft })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    pub fn extract(&self, w: &Waveform) -> Result<MelFeatures> {
        self.extract_samples(w.samples())
    }

    /// Log mel energies with per-bin mean/variance normalisation over the input.
    pub fn extract_samples(&self, samples: &[f32]) -> Result<MelFeatures> {
        let mut raw = self.log_mel(samples)?;
        normalize_per_bin(&mut raw);
        MelFeatures::new(raw, self.config.frame_hop_s)
    }

    /// Log mel energies without normalisation.
    pub fn log_mel(&self, samples: &[f32]) -> Result<Array2<f64>> {
        let hop = self.config.hop_samples();
        let win = self.config.window_samples();
        if samples.len() < win {
            return Err(Error::TooShort { samples: samples.len(), required: win });
        }
        let n_frames = samples.len() / hop;
        let n_fft = self.config.n_fft;
        let n_bins = n_fft / 2 + 1;
        // Window start relative to the frame's hop region start.
        let offset = (win as isize - hop as isize) / 2;

        let mut out = Array2::zeros((n_frames, self.config.n_mels));
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_bins];
        for t in 0..n_frames {
            let start = (t * hop) as isize - offset;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, &wv) in self.window.iter().enumerate() {
                let idx = start + i as isize;
                if idx >= 0 && (idx as usize) < samples.len() {
                    buf[i].re = samples[idx as usize] as f64 * wv;
                }
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (m, row) in self.filters.outer_iter().enumerate() {
                let e: f64 = row.iter().zip(&power).map(|(a, b)| a * b).sum();
                out[[t, m]] = e.max(1e-10).ln();
            }
        }
        Ok(out)
    }
}

/// Subtracts the per-column mean and divides by the per-column standard
/// deviation (columns with near-zero spread are only centred).
pub fn normalize_per_bin(data: &mut Array2<f64>) {
    let n = data.nrows() as f64;
    if n == 0.0 {
        return;
    }
    for mut col in data.axis_iter_mut(Axis(1)) {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
        col.mapv_inplace(|v| (v - mean) * scale);
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-style filters, `(n_mels × n_fft/2+1)`.
fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let n_bins = cfg.n_fft / 2 + 1;
    let lo = hz_to_mel(cfg.f_min);
    let hi = hz_to_mel(cfg.f_max);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut fb = Array2::zeros((cfg.n_mels, n_bins));
    for m in 0..cfg.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * bin_hz;
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

/// Column means and variances, used by tests and diagnostics.
pub fn column_moments(data: ArrayView2<'_, f64>) -> Vec<(f64, f64)> {
    let n = data.nrows() as f64;
    data.axis_iter(Axis(1))
        .map(|col| {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seconds: f64, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (seconds * SAMPLE_RATE as f64).round() as usize;
        (0..n)
            .map(|i| {
                let tone = (2.0 * PI * 300.0 * i as f64 / 16_000.0).sin() * 0.3;
                (tone + rng.random_range(-0.1..0.1)) as f32
            })
            .collect()
    }

    #[test]
    fn frame_counts_follow_the_hop() {
        let ex = MelExtractor::new(MelConfig::default()).unwrap();
        assert_eq!(ex.extract_samples(&noise(3.2, 1)).unwrap().n_frames(), 320);
        assert_eq!(ex.extract_samples(&noise(12.8, 2)).unwrap().n_frames(), 1280);
    }

    #[test]
    fn too_short_input_is_rejected() {
        let ex = MelExtractor::new(MelConfig::default()).unwrap();
        assert!(matches!(ex.extract_samples(&[]), Err(Error::TooShort { .. })));
        assert!(matches!(ex.extract_samples(&[0.1; 399]), Err(Error::TooShort { .. })));
        assert!(ex.extract_samples(&[0.1; 400]).is_ok());
    }

    #[test]
    fn frames_for_duration_examples() {
        assert_eq!(frames_for_duration(3.2, FRAME_HOP_S).unwrap(), 320);
        assert_eq!(frames_for_duration(0.0, FRAME_HOP_S).unwrap(), 0);
        assert_eq!(frames_for_duration(0.8, FRAME_HOP_S).unwrap(), 80);
        assert_eq!(frames_for_duration(0.29, FRAME_HOP_S).unwrap(), 29);
        assert!(frames_for_duration(-0.1, FRAME_HOP_S).is_err());
    }

    #[test]
    fn frame_counts_add_under_concatenation() {
        for (a, b) in [(0.5, 2.7), (1.2, 0.8), (3.2, 9.6)] {
            let fa = frames_for_duration(a, FRAME_HOP_S).unwrap();
            let fb = frames_for_duration(b, FRAME_HOP_S).unwrap();
            let fab = frames_for_duration(a + b, FRAME_HOP_S).unwrap();
            assert_eq!(fa + fb, fab, "{a} + {b}");
        }
    }

    #[test]
    fn normalised_bins_are_standardised() {
        let ex = MelExtractor::new(MelConfig::default()).unwrap();
        let f = ex.extract_samples(&noise(2.0, 3)).unwrap();
        for (mean, var) in column_moments(f.data().view()) {
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let ex = MelExtractor::new(MelConfig::default()).unwrap();
        let x = noise(1.5, 4);
        assert_eq!(ex.extract_samples(&x).unwrap(), ex.extract_samples(&x).unwrap());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = MelConfig { n_mels: 0, ..MelConfig::default() };
        assert!(MelExtractor::new(bad).is_err());
        let bad = MelConfig { sample_rate: 8000, ..MelConfig::default() };
        assert!(MelExtractor::new(bad).is_err());
    }
}
