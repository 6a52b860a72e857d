//! Deterministic signal-processing primitives.
//!
//! All operations are pure functions of their arguments and work in `f64`
//! so that labels and SNR bookkeeping stay exact to well below the
//! tolerances the label oracles need.

mod enhance;
mod fwsnr;
mod mix;
mod stft;
pub mod wav;

pub use enhance::{spectral_subtraction_enhance, EnhanceConfig};
pub use fwsnr::{fw_seg_snr, FwSegSnrConfig, FW_SNR_MAX, FW_SNR_MIN};
pub use mix::{mix_at_snr, power, snr_db, MixResult};
pub use stft::{frame_count, hann_periodic, istft_overlap_add, stft_complex, stft_magnitude, Spectrogram, StftConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pipeline sample rate.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("utterance too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("degenerate power: {0} signal is silent")]
    DegeneratePower(&'static str),
    #[error("length mismatch: {0} vs {1} samples")]
    LengthMismatch(usize, usize),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),
    #[error("invalid waveform: {0}")]
    InvalidWaveform(String),
    #[error("unsupported wav: {0}")]
    UnsupportedWav(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DspError> = std::result::Result<T, E>;

/// Mono audio with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(DspError::InvalidWaveform("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(DspError::InvalidWaveform(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        power(&self.samples).sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { samples: self.samples.iter().map(|v| v * c).collect(), sample_rate: self.sample_rate }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum NoisePartition {
    Seen,
    Unseen,
}

/// A noise recording with its catalog identity. The partition is fixed at
/// construction.
#[derive(Clone, Debug)]
pub struct NoiseClip {
    waveform: Waveform,
    noise_id: String,
    partition: NoisePartition,
}

impl NoiseClip {
    pub fn new(waveform: Waveform, noise_id: impl Into<String>, partition: NoisePartition) -> Self {
        Self { waveform, noise_id: noise_id.into(), partition }
    }

    pub fn waveform(&self) -> &Waveform {
        &self.waveform
    }

    pub fn noise_id(&self) -> &str {
        &self.noise_id
    }

    pub fn partition(&self) -> NoisePartition {
        self.partition
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waveform_rejects_bad_inputs() {
        assert!(Waveform::new(vec![0.0, f64::NAN], 16_000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
        let w = Waveform::new(vec![0.5, -0.5], 16_000).unwrap();
        assert_eq!(w.rms(), 0.5);
    }
}
