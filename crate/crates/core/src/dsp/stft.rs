use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{DspError, Result, Waveform};

/// Framing parameters. Defaults: 512-sample Hann window, hop 256, 512-point FFT.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub win_len: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { win_len: 512, hop: 256, fft_size: 512 }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    fn validate(&self) -> Result<()> {
        if self.win_len == 0 || self.hop == 0 || self.win_len > self.fft_size {
            return Err(DspError::Config(format!(
                "need 0 < win_len <= fft_size and hop > 0, got {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// `T x F` magnitude matrix, row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    mags: Vec<f64>,
    frames: usize,
    cfg: StftConfig,
}

impl Spectrogram {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.cfg.bins()
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    pub fn mags(&self) -> &[f64] {
        &self.mags
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let f = self.bins();
        &self.mags[t * f..(t + 1) * f]
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.mags[t * self.bins() + f]
    }
}

/// Periodic Hann window `0.5 - 0.5 cos(2 pi n / N)`.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// `floor((n - win_len) / hop) + 1`, or 0 when the signal is shorter than a window.
pub fn frame_count(n: usize, win_len: usize, hop: usize) -> usize {
    if n < win_len {
        0
    } else {
        (n - win_len) / hop + 1
    }
}

struct Framer {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    cfg: StftConfig,
}

impl Framer {
    fn new(cfg: StftConfig, window: Vec<f64>) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Self { window, fft, cfg }
    }

    /// Spectrum (first `fft_size/2 + 1` bins) of the frame starting at `start`.
    fn frame(&self, x: &[f64], start: usize, buf: &mut [Complex64]) {
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (i, (&s, &w)) in x[start..start + self.cfg.win_len].iter().zip(&self.window).enumerate() {
            buf[i] = Complex64::new(s * w, 0.0);
        }
        self.fft.process(buf);
    }
}

/// Complex STFT with Hann framing, no padding. Returns `frames x bins`.
pub fn stft_complex(wave: &Waveform, cfg: StftConfig) -> Result<Vec<Vec<Complex64>>> {
    cfg.validate()?;
    let x = wave.samples();
    if x.len() < cfg.win_len {
        return Err(DspError::TooShort { needed: cfg.win_len, got: x.len() });
    }
    let framer = Framer::new(cfg, hann_periodic(cfg.win_len));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    Ok((0..frame_count(x.len(), cfg.win_len, cfg.hop))
        .map(|t| {
            framer.frame(x, t * cfg.hop, &mut buf);
            buf[..cfg.bins()].to_vec()
        })
        .collect())
}

/// Magnitude spectrogram `|STFT(x)|`; the last partial frame is dropped.
pub fn stft_magnitude(wave: &Waveform, cfg: StftConfig) -> Result<Spectrogram> {
    let spec = stft_complex(wave, cfg)?;
    let frames = spec.len();
    let mags = spec.iter().flat_map(|row| row.iter().map(|c| c.norm())).collect();
    Ok(Spectrogram { mags, frames, cfg })
}

/// Weighted overlap-add inverse of [`stft_complex`] frames (Hann synthesis
/// window, normalized by the summed squared window). Samples no frame
/// covers come back as zero. Output has `len` samples.
pub fn istft_overlap_add(frames: &[Vec<Complex64>], cfg: StftConfig, len: usize) -> Vec<f64> {
    let window = hann_periodic(cfg.win_len);
    let ifft = FftPlanner::new().plan_fft_inverse(cfg.fft_size);
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let scale = 1.0 / cfg.fft_size as f64;
    for (t, row) in frames.iter().enumerate() {
        // rebuild the Hermitian-symmetric full spectrum
        for (k, c) in row.iter().enumerate() {
            buf[k] = *c;
        }
        for k in row.len()..cfg.fft_size {
            buf[k] = row[cfg.fft_size - k].conj();
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for i in 0..cfg.win_len {
            if start + i >= len {
                break;
            }
            out[start + i] += buf[i].re * scale * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    for (o, n) in out.iter_mut().zip(&norm) {
        if *n > 1e-8 {
            *o /= n;
        } else {
            *o = 0.0;
        }
    }
    out
}
