use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::resample::Resampler;
use super::{OracleError, Result};
use crate::dsp::{DspError, Waveform};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoiConfig {
    pub fs: u32,
    pub frame_len: usize,
    pub fft_size: usize,
    pub bands: usize,
    pub min_freq: f64,
    /// Frames per intermediate intelligibility segment (384 ms at 10 kHz).
    pub segment_frames: usize,
    /// Lower signal-to-distortion bound for clipping, dB.
    pub beta_db: f64,
    pub dyn_range_db: f64,
    pub resampler_taps_per_phase: usize,
    pub resampler_rejection_db: f64,
}

impl Default for StoiConfig {
    fn default() -> Self {
        Self {
            fs: 10_000,
            frame_len: 256,
            fft_size: 512,
            bands: 15,
            min_freq: 150.0,
            segment_frames: 30,
            beta_db: -15.0,
            dyn_range_db: 40.0,
            resampler_taps_per_phase: 32,
            resampler_rejection_db: 60.0,
        }
    }
}

const EPS: f64 = f64::EPSILON;

/// Reusable STOI evaluator; holds the resampler, window, band matrix and FFT plan.
pub struct Stoi {
    cfg: StoiConfig,
    window: Vec<f64>,
    /// Per band, half-open FFT bin range.
    bands: Vec<(usize, usize)>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    resamplers: std::sync::Mutex<Vec<(u32, std::sync::Arc<Resampler>)>>,
}

impl Stoi {
    pub fn new(cfg: StoiConfig) -> Self {
        // symmetric Hann without its zero end points
        let n = cfg.frame_len;
        let window = (1..=n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n + 1) as f64).cos()).collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Self { bands: third_octave_bands(&cfg), cfg, window, fft, resamplers: Default::default() }
    }

    pub fn config(&self) -> &StoiConfig {
        &self.cfg
    }

    fn resampler(&self, from: u32) -> std::sync::Arc<Resampler> {
        let mut cache = self.resamplers.lock().expect("resampler cache poisoned");
        if let Some((_, r)) = cache.iter().find(|(f, _)| *f == from) {
            return r.clone();
        }
        let r = std::sync::Arc::new(Resampler::new(
            from,
            self.cfg.fs,
            self.cfg.resampler_taps_per_phase,
            self.cfg.resampler_rejection_db,
        ));
        cache.push((from, r.clone()));
        r
    }

    /// Frame starts `0, hop, ...` strictly below `len - frame_len`.
    fn frame_starts(&self, len: usize) -> impl Iterator<Item = usize> {
        let hop = self.cfg.frame_len / 2;
        (0..len.saturating_sub(self.cfg.frame_len)).step_by(hop)
    }

    /// Drops frames whose clean energy is more than `dyn_range_db` below the
    /// loudest clean frame, then overlap-adds the remaining windowed frames.
    fn remove_silent_frames(&self, x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let fl = self.cfg.frame_len;
        let hop = fl / 2;
        let starts: Vec<usize> = self.frame_starts(x.len()).collect();
        let energy: Vec<f64> = starts
            .iter()
            .map(|&s| {
                let e: f64 = x[s..s + fl].iter().zip(&self.window).map(|(v, w)| (v * w) * (v * w)).sum();
                20.0 * (e.sqrt() + EPS).log10()
            })
            .collect();
        let max = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let kept: Vec<usize> =
            starts.iter().zip(&energy).filter(|(_, &e)| max - self.cfg.dyn_range_db - e < 0.0).map(|(&s, _)| s).collect();
        if kept.is_empty() {
            return (Vec::new(), Vec::new());
        }
        let len = (kept.len() - 1) * hop + fl;
        let mut xo = vec![0.0; len];
        let mut yo = vec![0.0; len];
        for (k, &s) in kept.iter().enumerate() {
            for i in 0..fl {
                xo[k * hop + i] += x[s + i] * self.window[i];
                yo[k * hop + i] += y[s + i] * self.window[i];
            }
        }
        (xo, yo)
    }

    /// Third-octave band envelopes, `bands x frames`.
    fn band_envelopes(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let fl = self.cfg.frame_len;
        let mut buf = vec![Complex64::new(0.0, 0.0); self.cfg.fft_size];
        let mut out = vec![Vec::new(); self.bands.len()];
        for s in self.frame_starts(x.len()) {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for i in 0..fl {
                buf[i].re = x[s + i] * self.window[i];
            }
            self.fft.process(&mut buf);
            for (band, &(lo, hi)) in out.iter_mut().zip(&self.bands) {
                band.push(buf[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt());
            }
        }
        out
    }

    /// Intelligibility score of `degraded` against `clean`, clamped to [0, 1].
    pub fn score(&self, clean: &Waveform, degraded: &Waveform) -> Result<f64> {
        if clean.len() != degraded.len() {
            return Err(DspError::LengthMismatch(clean.len(), degraded.len()).into());
        }
        if clean.sample_rate() != degraded.sample_rate() {
            return Err(DspError::SampleRateMismatch(clean.sample_rate(), degraded.sample_rate()).into());
        }
        let (x, y) = if clean.sample_rate() == self.cfg.fs {
            (clean.samples().to_vec(), degraded.samples().to_vec())
        } else {
            let r = self.resampler(clean.sample_rate());
            (r.process(clean.samples()), r.process(degraded.samples()))
        };
        let (x, y) = self.remove_silent_frames(&x, &y);
        let xb = self.band_envelopes(&x);
        let yb = self.band_envelopes(&y);
        let frames = xb.first().map_or(0, Vec::len);
        let n = self.cfg.segment_frames;
        if frames < n {
            return Err(OracleError::TooShortForStoi { frames, needed: n });
        }
        let clip = 1.0 + 10f64.powf(-self.cfg.beta_db / 20.0);
        let mut total = 0.0;
        let mut count = 0usize;
        let mut yp = vec![0.0; n];
        for m in n..=frames {
            for (xs, ys) in xb.iter().zip(&yb) {
                let xs = &xs[m - n..m];
                let ys = &ys[m - n..m];
                let alpha = norm(xs) / (norm(ys) + EPS);
                for ((p, &a), &b) in yp.iter_mut().zip(xs).zip(ys) {
                    *p = (alpha * b).min(a * clip);
                }
                let mx = xs.iter().sum::<f64>() / n as f64;
                let my = yp.iter().sum::<f64>() / n as f64;
                let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
                for (&a, &b) in xs.iter().zip(&yp) {
                    let (a, b) = (a - mx, b - my);
                    dot += a * b;
                    nx += a * a;
                    ny += b * b;
                }
                total += dot / ((nx.sqrt() + EPS) * (ny.sqrt() + EPS));
                count += 1;
            }
        }
        Ok((total / count as f64).clamp(0.0, 1.0))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Half-open bin ranges of the one-third-octave bands. Band edges snap to the
/// nearest FFT bin; the upper edge bin is excluded.
fn third_octave_bands(cfg: &StoiConfig) -> Vec<(usize, usize)> {
    let bins = cfg.fft_size / 2 + 1;
    let f: Vec<f64> = (0..bins).map(|k| k as f64 * cfg.fs as f64 / cfg.fft_size as f64).collect();
    let nearest = |target: f64| -> usize {
        // first minimiser, as a plain argmin would return
        let mut best = 0;
        for k in 1..bins {
            if (f[k] - target).powi(2) < (f[best] - target).powi(2) {
                best = k;
            }
        }
        best
    };
    (0..cfg.bands)
        .map(|k| {
            let k = k as f64;
            let lo = cfg.min_freq * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = cfg.min_freq * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// One-shot STOI with default settings.
pub fn stoi(clean: &Waveform, degraded: &Waveform) -> Result<f64> {
    Stoi::new(StoiConfig::default()).score(clean, degraded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn speechlike(seed: u64, n: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0 = rng.random_range(100.0..200.0);
        let rate = rng.random_range(2.0..5.0);
        let x = (0..n)
            .map(|i| {
                let t = i as f64 / 16_000.0;
                let env = (2.0 * PI * rate * t).sin().max(0.0);
                env * (1..12).map(|k| (2.0 * PI * f0 * k as f64 * t).sin() / k as f64).sum::<f64>()
                    + 0.01 * env * rng.random_range(-1.0..1.0)
            })
            .collect();
        Waveform::new(x, 16_000).unwrap()
    }

    #[test]
    fn band_edges_follow_bin_snapping() {
        let b = third_octave_bands(&StoiConfig::default());
        assert_eq!(b.len(), 15);
        // 150 Hz * 2^(-1/6) = 133.6 Hz -> bin 7 (136.7 Hz); 2^(1/6) -> 168.4 Hz -> bin 9 (175.8 Hz)
        assert_eq!(b[0], (7, 9));
        for w in b.windows(2) {
            assert_eq!(w[0].1, w[1].0);
        }
    }

    #[test]
    fn identical_signals_score_one() {
        let x = speechlike(1, 32_000);
        let s = stoi(&x, &x).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }

    #[test]
    fn scale_invariant_in_degraded_amplitude() {
        let x = speechlike(2, 32_000);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y: Vec<f64> = x.samples().iter().map(|v| v + 0.3 * rng.random_range(-1.0..1.0)).collect();
        let y = Waveform::new(y, 16_000).unwrap();
        let base = stoi(&x, &y).unwrap();
        for c in [0.5, 2.0] {
            let s = stoi(&x, &y.scaled(c)).unwrap();
            assert!((s - base).abs() < 1e-9, "c={c}: {s} vs {base}");
        }
    }

    #[test]
    fn short_or_silent_input_is_rejected() {
        let x = speechlike(3, 4000);
        assert!(matches!(stoi(&x, &x), Err(OracleError::TooShortForStoi { .. })));
        let a = Waveform::zeros(10, 16_000);
        let b = Waveform::zeros(11, 16_000);
        assert!(matches!(stoi(&a, &b), Err(OracleError::Dsp(DspError::LengthMismatch(..)))));
    }
}
