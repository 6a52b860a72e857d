use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::stft::{istft_overlap_add, stft_complex, StftConfig};
use super::{DspError, Result, Waveform, SAMPLE_RATE};

/// Magnitude spectral subtraction with a noise floor estimated from the
/// leading `noise_profile_ms` of the input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhanceConfig {
    pub noise_profile_ms: f64,
    pub over_subtraction: f64,
    pub spectral_floor: f64,
    pub stft: StftConfig,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self { noise_profile_ms: 120.0, over_subtraction: 1.0, spectral_floor: 0.02, stft: StftConfig::default() }
    }
}

/// Enhanced copy of `noisy`, same length. Output magnitude per bin is
/// `max(|X| - over_subtraction * N, spectral_floor * N)` with the noisy phase.
pub fn spectral_subtraction_enhance(noisy: &Waveform, cfg: &EnhanceConfig) -> Result<Waveform> {
    if noisy.sample_rate() != SAMPLE_RATE {
        return Err(DspError::SampleRateMismatch(noisy.sample_rate(), SAMPLE_RATE));
    }
    if !(cfg.noise_profile_ms > 0.0) {
        return Err(DspError::Config("noise_profile_ms must be positive".into()));
    }
    let s = cfg.stft;
    let profile = (cfg.noise_profile_ms * noisy.sample_rate() as f64 / 1000.0).round() as usize;
    let needed = profile + s.win_len;
    if noisy.len() < needed {
        return Err(DspError::TooShort { needed, got: noisy.len() });
    }

    // Pad so every input sample sits under two analysis frames.
    let lead = s.win_len - s.hop;
    let body = noisy.len() + lead;
    let frames = body.saturating_sub(s.win_len).div_ceil(s.hop) + 1;
    let total = (frames - 1) * s.hop + s.win_len + lead;
    let mut padded = vec![0.0; total];
    padded[lead..lead + noisy.len()].copy_from_slice(noisy.samples());
    let spec = stft_complex(&Waveform::new(padded, noisy.sample_rate())?, s)?;

    // frames lying inside the (shifted) profile region
    let n_profile = ((profile + lead).saturating_sub(s.win_len) / s.hop + 1).min(spec.len());
    let bins = s.bins();
    let mut floor = vec![0.0; bins];
    for row in &spec[..n_profile] {
        for (f, c) in row.iter().enumerate() {
            floor[f] += c.norm();
        }
    }
    floor.iter_mut().for_each(|v| *v /= n_profile as f64);

    let cleaned: Vec<Vec<Complex64>> = spec
        .iter()
        .map(|row| {
            row.iter()
                .zip(&floor)
                .map(|(c, &nf)| {
                    let mag = c.norm();
                    let target = (mag - cfg.over_subtraction * nf).max(cfg.spectral_floor * nf);
                    if mag > 0.0 {
                        c * (target / mag)
                    } else {
                        Complex64::new(target, 0.0)
                    }
                })
                .collect()
        })
        .collect();
    let out = istft_overlap_add(&cleaned, s, total);
    Waveform::new(out[lead..lead + noisy.len()].to_vec(), noisy.sample_rate())
}
