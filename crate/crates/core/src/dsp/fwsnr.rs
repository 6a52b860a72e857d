use serde::{Deserialize, Serialize};

use super::stft::{stft_complex, StftConfig};
use super::{DspError, Result, Waveform};

pub const FW_SNR_MIN: f64 = -10.0;
pub const FW_SNR_MAX: f64 = 35.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FwSegSnrConfig {
    pub bands: usize,
    /// Exponent on the clean band energy used as band weight.
    pub gamma: f64,
    /// Frames whose clean energy is more than this many dB below the loudest
    /// frame are ignored.
    pub active_range_db: f64,
    pub stft: StftConfig,
}

impl Default for FwSegSnrConfig {
    fn default() -> Self {
        Self { bands: 25, gamma: 0.2, active_range_db: 40.0, stft: StftConfig::default() }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters, `bands x bins`, with centres equally spaced on the mel
/// scale between 0 Hz and Nyquist.
pub fn mel_filterbank(bands: usize, cfg: StftConfig, sample_rate: u32) -> Vec<Vec<f64>> {
    let nyq = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyq);
    let edges: Vec<f64> = (0..bands + 2).map(|i| mel_to_hz(top * i as f64 / (bands + 1) as f64)).collect();
    let bin_hz = sample_rate as f64 / cfg.fft_size as f64;
    (0..bands)
        .map(|j| {
            let (lo, mid, hi) = (edges[j], edges[j + 1], edges[j + 2]);
            (0..cfg.bins())
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Frequency-weighted segmental SNR in dB, clamped to `[FW_SNR_MIN, FW_SNR_MAX]`.
///
/// Per frame and band: `10 log10(C / R)` where `C` is the filtered clean power
/// and `R` the filtered power of the complex residual `X - Y`. Bands are
/// weighted by `C^gamma`; the result averages speech-active frames.
pub fn fw_seg_snr(clean: &Waveform, processed: &Waveform, cfg: &FwSegSnrConfig) -> Result<f64> {
    if clean.len() != processed.len() {
        return Err(DspError::LengthMismatch(clean.len(), processed.len()));
    }
    if clean.sample_rate() != processed.sample_rate() {
        return Err(DspError::SampleRateMismatch(clean.sample_rate(), processed.sample_rate()));
    }
    if clean.rms() <= super::mix::SILENCE_RMS {
        return Err(DspError::DegeneratePower("clean"));
    }
    let x = stft_complex(clean, cfg.stft)?;
    let y = stft_complex(processed, cfg.stft)?;
    let bank = mel_filterbank(cfg.bands, cfg.stft, clean.sample_rate());

    let energy: Vec<f64> = x.iter().map(|row| row.iter().map(|c| c.norm_sqr()).sum()).collect();
    let peak = energy.iter().cloned().fold(0.0, f64::max);
    let gate = peak * 10f64.powf(-cfg.active_range_db / 10.0);

    let mut total = 0.0;
    let mut active = 0usize;
    for ((xr, yr), &e) in x.iter().zip(&y).zip(&energy) {
        if e <= 0.0 || e < gate {
            continue;
        }
        let (mut num, mut den) = (0.0, 0.0);
        for filt in &bank {
            let (mut c, mut r) = (0.0, 0.0);
            for ((w, a), b) in filt.iter().zip(xr).zip(yr) {
                if *w > 0.0 {
                    c += w * a.norm_sqr();
                    r += w * (a - b).norm_sqr();
                }
            }
            if c <= 0.0 {
                continue;
            }
            let snr = if r > 0.0 { 10.0 * (c / r).log10() } else { FW_SNR_MAX };
            let wt = c.powf(cfg.gamma);
            num += wt * snr.clamp(FW_SNR_MIN, FW_SNR_MAX);
            den += wt;
        }
        if den > 0.0 {
            total += num / den;
            active += 1;
        }
    }
    if active == 0 {
        return Err(DspError::DegeneratePower("clean"));
    }
    Ok((total / active as f64).clamp(FW_SNR_MIN, FW_SNR_MAX))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn speechy(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let t = i as f64 / 16_000.0;
                let env = 0.6 + 0.4 * (2.0 * PI * 3.0 * t).sin();
                env * ((2.0 * PI * 220.0 * t).sin() + 0.5 * (2.0 * PI * 1330.0 * t).sin())
                    + 0.05 * rng.random_range(-1.0..1.0)
            })
            .collect()
    }

    fn wave(x: Vec<f64>) -> Waveform {
        Waveform::new(x, 16_000).unwrap()
    }

    #[test]
    fn identical_signal_hits_the_ceiling() {
        let c = wave(speechy(8000, 1));
        assert_eq!(fw_seg_snr(&c, &c, &FwSegSnrConfig::default()).unwrap(), FW_SNR_MAX);
    }

    #[test]
    fn negated_signal_gives_minus_six_db() {
        // residual X - (-X) = 2X in every bin, so every band sits at 10 log10(1/4)
        let c = wave(speechy(8000, 2));
        let v = fw_seg_snr(&c, &c.scaled(-1.0), &FwSegSnrConfig::default()).unwrap();
        assert!((v - 10.0 * 0.25f64.log10()).abs() < 1e-9, "{v}");
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let a = wave(speechy(8000, 3));
        let b = wave(speechy(7999, 3));
        assert!(matches!(fw_seg_snr(&a, &b, &FwSegSnrConfig::default()), Err(DspError::LengthMismatch(..))));
    }

    #[test]
    fn band_flat_5db_matches_bruteforce() {
        // added noise is a scaled copy of the clean signal, so every bin of every
        // frame sits exactly 5 dB below the clean bin
        let n = 4096;
        let clean = speechy(n, 4);
        let g = 10f64.powf(-5.0 / 20.0);
        let processed: Vec<f64> = clean.iter().map(|v| v * (1.0 + g)).collect();
        let cfg = FwSegSnrConfig::default();
        let got = fw_seg_snr(&wave(clean.clone()), &wave(processed.clone()), &cfg).unwrap();
        let want = bruteforce(&clean, &processed, &cfg);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!((got - 5.0).abs() < 1.5, "{got}");
    }

    #[test]
    fn additive_white_noise_matches_bruteforce() {
        let n = 16_000;
        let clean = speechy(n, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let noise: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = FwSegSnrConfig::default();
        let g = (super::super::power(&clean) / super::super::power(&noise) / 10f64.powf(0.5)).sqrt();
        let processed: Vec<f64> = clean.iter().zip(&noise).map(|(c, v)| c + g * v).collect();
        let got = fw_seg_snr(&wave(clean.clone()), &wave(processed.clone()), &cfg).unwrap();
        let want = bruteforce(&clean, &processed, &cfg);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    /// Direct DFT, explicit band sums; no shared code with the fast path
    /// except the filterbank definition.
    fn bruteforce(clean: &[f64], proc_: &[f64], cfg: &FwSegSnrConfig) -> f64 {
        let (win, hop, nfft) = (cfg.stft.win_len, cfg.stft.hop, cfg.stft.fft_size);
        let w: Vec<f64> = (0..win).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos()).collect();
        let bank = mel_filterbank(cfg.bands, cfg.stft, 16_000);
        let dft = |frame: &[f64]| -> Vec<(f64, f64)> {
            (0..nfft / 2 + 1)
                .map(|k| {
                    frame.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, &v)| {
                        let a = -2.0 * PI * (k * i) as f64 / nfft as f64;
                        (re + v * a.cos(), im + v * a.sin())
                    })
                })
                .collect()
        };
        let frames = (clean.len() - win) / hop + 1;
        let mut per_frame = Vec::new();
        for t in 0..frames {
            let xs: Vec<f64> = (0..win).map(|i| clean[t * hop + i] * w[i]).collect();
            let ys: Vec<f64> = (0..win).map(|i| proc_[t * hop + i] * w[i]).collect();
            let (xd, yd) = (dft(&xs), dft(&ys));
            let e: f64 = xd.iter().map(|(a, b)| a * a + b * b).sum();
            let mut num = 0.0;
            let mut den = 0.0;
            for f in &bank {
                let c: f64 = f.iter().zip(&xd).map(|(w, (a, b))| w * (a * a + b * b)).sum();
                let r: f64 = f
                    .iter()
                    .zip(xd.iter().zip(&yd))
                    .map(|(w, ((a, b), (c2, d)))| w * ((a - c2).powi(2) + (b - d).powi(2)))
                    .sum();
                if c <= 0.0 {
                    continue;
                }
                let s = if r > 0.0 { (10.0 * (c / r).log10()).clamp(-10.0, 35.0) } else { 35.0 };
                num += c.powf(0.2) * s;
                den += c.powf(0.2);
            }
            per_frame.push((e, num / den));
        }
        let peak = per_frame.iter().map(|p| p.0).fold(0.0, f64::max);
        let act: Vec<f64> = per_frame.iter().filter(|p| p.0 >= peak * 1e-4).map(|p| p.1).collect();
        act.iter().sum::<f64>() / act.len() as f64
    }
}
