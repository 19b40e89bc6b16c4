//! Mono 16 kHz waveforms and WAV ingestion.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

/// Fixed sample rate of every waveform handled by the crate.
pub const SAMPLE_RATE: u32 = 16_000;

/// A mono waveform at [`SAMPLE_RATE`].
///
/// Construction guarantees at least one sample and that every sample is
/// finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform must contain at least one sample"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples })
    }

    /// Builds a waveform from samples recorded at `rate`, resampling to 16 kHz.
    pub fn from_rate(samples: Vec<f32>, rate: u32) -> Result<Self> {
        if rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if rate == SAMPLE_RATE {
            Self::new(samples)
        } else {
            Self::new(resample(&samples, rate, SAMPLE_RATE))
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Mean power of the samples.
    pub fn power(&self) -> f64 {
        power(&self.samples)
    }

    /// Copies out `[start, end)` in samples, clamped to the waveform.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        let end = end.min(self.samples.len());
        let start = start.min(end);
        Self::new(self.samples[start..end].to_vec())
    }

    /// Reads a mono PCM WAV file (16-bit integer or 32-bit float).
    ///
    /// Multi-channel files are rejected. Other sample rates are resampled.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = hound::WavReader::open(path.as_ref())?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::invalid(format!(
                "{}: expected mono audio, found {} channels",
                path.as_ref().display(),
                spec.channels
            )));
        }
        let samples: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Float => reader.samples::<f32>().collect::<std::result::Result<_, _>>()?,
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| v as f32 / scale))
                    .collect::<std::result::Result<_, _>>()?
            }
        };
        Self::from_rate(samples, spec.sample_rate)
    }

    /// Writes 16-bit PCM.
    pub fn write_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            let v = (s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16;
            writer.write_sample(v)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

pub(crate) fn power(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / samples.len() as f64
}

/// Windowed-sinc resampler (Hann window, 16 zero crossings).
pub fn resample(input: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || input.is_empty() {
        return input.to_vec();
    }
    const HALF_TAPS: f64 = 16.0;
    let ratio = to as f64 / from as f64;
    // Low-pass at the lower of the two Nyquist rates.
    let cutoff = ratio.min(1.0);
    let out_len = ((input.len() as f64) * ratio).round().max(1.0) as usize;
    let half_width = HALF_TAPS / cutoff;
    (0..out_len)
        .map(|n| {
            let center = n as f64 / ratio;
            let lo = (center - half_width).ceil().max(0.0) as usize;
            let hi = ((center + half_width).floor() as usize).min(input.len() - 1);
            let mut acc = 0.0;
            for (k, &x) in input.iter().enumerate().take(hi + 1).skip(lo) {
                let t = k as f64 - center;
                let arg = t * cutoff;
                let sinc = if arg.abs() < 1e-12 { 1.0 } else { (PI * arg).sin() / (PI * arg) };
                let window = 0.5 * (1.0 + (PI * t / half_width).cos());
                acc += x as f64 * cutoff * sinc * window;
            }
            acc as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(Waveform::new(vec![]).is_err());
        assert!(Waveform::new(vec![0.0, f32::NAN]).is_err());
        assert!(Waveform::new(vec![0.0]).is_ok());
    }

    #[test]
    fn resampling_preserves_duration_and_tone() {
        let from = 8_000u32;
        let tone: Vec<f32> = (0..8_000)
            .map(|i| (2.0 * PI * 440.0 * i as f64 / from as f64).sin() as f32)
            .collect();
        let w = Waveform::from_rate(tone, from).unwrap();
        assert_eq!(w.len(), 16_000);
        // Compare interior against the ideal tone at 16 kHz.
        let err: f64 = (1000..15_000)
            .map(|i| {
                let ideal = (2.0 * PI * 440.0 * i as f64 / 16_000.0).sin();
                (w.samples()[i] as f64 - ideal).abs()
            })
            .fold(0.0, f64::max);
        assert!(err < 0.02, "max error {err}");
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new((0..1600).map(|i| ((i as f32) * 0.01).sin() * 0.5).collect()).unwrap();
        w.write_wav(&path).unwrap();
        let r = Waveform::read_wav(&path).unwrap();
        assert_eq!(r.len(), w.len());
        for (a, b) in r.samples().iter().zip(w.samples()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
