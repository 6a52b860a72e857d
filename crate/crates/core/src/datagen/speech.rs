//! Harmonic pseudo-speech.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DatagenError;
use crate::dsp::{Waveform, SAMPLE_RATE};

pub const DURATION_RANGE_S: (f64, f64) = (1.0, 6.0);
pub const F0_RANGE_HZ: (f64, f64) = (90.0, 220.0);
/// Peak amplitude after normalization.
pub const PEAK: f64 = 0.5;
/// Silence before the first syllable, so a noise estimate can be taken
/// from the start of a mixture.
pub const LEAD_SILENCE_S: (f64, f64) = (0.15, 0.25);
const TAIL_SILENCE_S: f64 = 0.1;
const HARMONIC_CEILING_HZ: f64 = 5000.0;

/// Per-speaker voice: base pitch and three formant resonances.
#[derive(Clone, Debug, PartialEq)]
pub struct Voice {
    pub f0_hz: f64,
    /// `(centre Hz, bandwidth Hz)` per formant.
    pub formants: [(f64, f64); 3],
    /// Spectral tilt exponent of the harmonic amplitudes.
    pub tilt: f64,
}

impl Voice {
    pub fn from_seed(speaker_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(speaker_seed ^ 0x5eed_5bea_4e12);
        let f0_hz = rng.random_range(F0_RANGE_HZ.0..F0_RANGE_HZ.1);
        let formants = [
            (rng.random_range(350.0..800.0), rng.random_range(60.0..120.0)),
            (rng.random_range(1000.0..2200.0), rng.random_range(80.0..160.0)),
            (rng.random_range(2400.0..3300.0), rng.random_range(120.0..250.0)),
        ];
        Self { f0_hz, formants, tilt: rng.random_range(0.6..1.0) }
    }
}

/// Two-pole resonator with unit gain at its centre frequency.
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
        let r = (-PI * bw / fs).exp();
        let theta = 2.0 * PI * freq / fs;
        let a1 = 2.0 * r * theta.cos();
        let a2 = -r * r;
        // |1 / (1 - a1 z^-1 - a2 z^-2)| at z = e^{i theta}
        let (c1, s1, c2, s2) = (theta.cos(), theta.sin(), (2.0 * theta).cos(), (2.0 * theta).sin());
        let re = 1.0 - a1 * c1 - a2 * c2;
        let im = a1 * s1 + a2 * s2;
        Self { a1, a2, gain: (re * re + im * im).sqrt(), y1: 0.0, y2: 0.0 }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

struct Syllable {
    start: usize,
    len: usize,
    amp: f64,
    /// Formant scale for this syllable's vowel.
    vowel: [f64; 3],
    burst: Option<(usize, usize, f64)>,
}

fn plan_syllables(rng: &mut ChaCha8Rng, n: usize) -> Vec<Syllable> {
    let fs = SAMPLE_RATE as f64;
    let rate = rng.random_range(2.0..6.0);
    let mut t = rng.random_range(LEAD_SILENCE_S.0..LEAD_SILENCE_S.1);
    let end = n as f64 / fs - TAIL_SILENCE_S;
    let mut out = Vec::new();
    loop {
        let period = 1.0 / (rate * rng.random_range(0.8..1.25));
        let dur = period * rng.random_range(0.6..0.9);
        if t + dur > end {
            break;
        }
        let burst = rng.random_bool(0.35).then(|| {
            let blen = rng.random_range(0.03..0.08);
            let bstart = (t - blen * 0.5).max(0.0);
            ((bstart * fs) as usize, (blen * fs) as usize, rng.random_range(3000.0..6000.0))
        });
        out.push(Syllable {
            start: (t * fs) as usize,
            len: (dur * fs) as usize,
            amp: rng.random_range(0.5..1.0),
            vowel: [rng.random_range(0.8..1.2), rng.random_range(0.8..1.2), rng.random_range(0.95..1.05)],
            burst,
        });
        t += period;
        if rng.random_bool(0.12) {
            t += rng.random_range(0.15..0.3);
        }
    }
    if out.is_empty() {
        // at least one syllable filling the voiced region
        let s = (LEAD_SILENCE_S.0 * fs) as usize;
        let len = n.saturating_sub(s + (TAIL_SILENCE_S * fs) as usize).max(1);
        out.push(Syllable { start: s, len, amp: 1.0, vowel: [1.0; 3], burst: None });
    }
    out
}

/// Piecewise-linear F0 contour around `base`.
fn f0_contour(rng: &mut ChaCha8Rng, base: f64, n: usize) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let mut knots = vec![(0usize, base * rng.random_range(0.9..1.1))];
    while knots.last().unwrap().0 < n {
        let step = (rng.random_range(0.15..0.35) * fs) as usize;
        knots.push((knots.last().unwrap().0 + step, base * rng.random_range(0.85..1.2)));
    }
    let mut f0 = Vec::with_capacity(n);
    for w in knots.windows(2) {
        let ((a, fa), (b, fb)) = (w[0], w[1]);
        for i in a..b.min(n) {
            f0.push(fa + (fb - fa) * (i - a) as f64 / (b - a) as f64);
        }
    }
    f0
}

/// Deterministic pseudo-speech: a voiced harmonic source following a
/// random F0 contour, shaped by syllabic amplitude modulation and
/// per-syllable formant filtering, plus sparse band-noise bursts.
pub fn synth_clean(speaker_seed: u64, utterance_seed: u64, duration_s: f64) -> Result<Waveform, DatagenError> {
    if !(DURATION_RANGE_S.0..=DURATION_RANGE_S.1).contains(&duration_s) {
        return Err(DatagenError::Config(format!(
            "duration {duration_s} s outside [{}, {}]",
            DURATION_RANGE_S.0, DURATION_RANGE_S.1
        )));
    }
    let voice = Voice::from_seed(speaker_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(utterance_seed ^ 0x0a11_ce5e_ed00);
    let fs = SAMPLE_RATE as f64;
    let n = (duration_s * fs).round() as usize;
    let syllables = plan_syllables(&mut rng, n);
    let f0 = f0_contour(&mut rng, voice.f0_hz, n);

    let mut out = vec![0.0; n];
    let mut phase = 0.0f64;
    let mut cursor = 0;
    for syl in &syllables {
        // keep the glottal phase running through gaps
        for &f in &f0[cursor..syl.start.min(n)] {
            phase = (phase + 2.0 * PI * f / fs) % (2.0 * PI);
        }
        let mut res: Vec<Resonator> =
            voice.formants.iter().zip(syl.vowel).map(|(&(f, bw), k)| Resonator::new(f * k, bw)).collect();
        let end = (syl.start + syl.len).min(n);
        for i in syl.start..end {
            phase = (phase + 2.0 * PI * f0[i] / fs) % (2.0 * PI);
            let harmonics = (HARMONIC_CEILING_HZ / f0[i]) as usize;
            let src: f64 = (1..=harmonics).map(|k| (k as f64 * phase).sin() / (k as f64).powf(voice.tilt)).sum();
            // parallel formant bank
            let y: f64 = res.iter_mut().enumerate().map(|(j, r)| r.step(src) / (j + 1) as f64).sum();
            let tau = (i - syl.start) as f64 / syl.len as f64;
            out[i] += syl.amp * (PI * tau).sin().powf(0.7) * y;
        }
        cursor = end;
    }
    let voiced_peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for syl in &syllables {
        let Some((start, len, centre)) = syl.burst else { continue };
        let mut r = Resonator::new(centre, 1200.0);
        let mut burst: Vec<f64> = (0..len).map(|_| r.step(rng.random_range(-1.0..1.0))).collect();
        let bp = burst.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for (k, b) in burst.iter_mut().enumerate() {
            *b *= 0.3 * voiced_peak * syl.amp / bp * (PI * k as f64 / len as f64).sin();
        }
        for (k, b) in burst.into_iter().enumerate() {
            if start + k < n {
                out[start + k] += b;
            }
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= PEAK / peak);
    }
    Ok(Waveform::new(out, SAMPLE_RATE)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Median pitch over loud 40 ms frames, from the autocorrelation peak
    /// refined by parabolic interpolation.
    fn median_pitch(x: &[f64]) -> f64 {
        let fs = SAMPLE_RATE as f64;
        let (win, hop) = (640, 320);
        let (min_lag, max_lag) = ((fs / 300.0) as usize, (fs / 70.0) as usize);
        let energies: Vec<f64> = x.windows(win).step_by(hop).map(|w| w.iter().map(|v| v * v).sum()).collect();
        let emax = energies.iter().cloned().fold(0.0, f64::max);
        let mut est = Vec::new();
        for (k, w) in x.windows(win).step_by(hop).enumerate() {
            if energies[k] < 0.3 * emax {
                continue;
            }
            let ac: Vec<f64> = (0..=max_lag + 1)
                .map(|l| (0..win - max_lag - 1).map(|i| w[i] * w[i + l]).sum::<f64>())
                .collect();
            let lag = (min_lag..=max_lag).max_by(|&a, &b| ac[a].total_cmp(&ac[b])).unwrap();
            let (y0, y1, y2) = (ac[lag - 1], ac[lag], ac[lag + 1]);
            let shift = 0.5 * (y0 - y2) / (y0 - 2.0 * y1 + y2);
            est.push(fs / (lag as f64 + shift));
        }
        est.sort_by(f64::total_cmp);
        est[est.len() / 2]
    }

    #[test]
    fn deterministic() {
        let a = synth_clean(3, 9, 1.5).unwrap();
        assert_eq!(a, synth_clean(3, 9, 1.5).unwrap());
        assert_ne!(a, synth_clean(3, 10, 1.5).unwrap());
        assert_eq!(a.len(), 24000);
    }

    #[test]
    fn peak_and_lead_silence() {
        let w = synth_clean(1, 2, 2.0).unwrap();
        let peak = w.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - PEAK).abs() < 1e-12);
        let lead = (LEAD_SILENCE_S.0 * SAMPLE_RATE as f64) as usize - 800;
        assert!(w.samples()[..lead].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_out_of_range_durations() {
        assert!(synth_clean(1, 1, 0.5).is_err());
        assert!(synth_clean(1, 1, 6.5).is_err());
    }

    #[test]
    fn rms_floor_over_500_seeds() {
        let mut worst = f64::INFINITY;
        for s in 0..500u64 {
            let w = synth_clean(s, s.wrapping_mul(7919) + 1, 1.0 + (s % 6) as f64 * 0.2).unwrap();
            worst = worst.min(w.rms());
        }
        assert!(worst >= 0.02, "min rms {worst}");
    }

    #[test]
    fn speakers_differ_in_pitch() {
        let mut distinct = 0;
        for p in 0..100u64 {
            let a = median_pitch(synth_clean(2 * p, 77, 1.5).unwrap().samples());
            let b = median_pitch(synth_clean(2 * p + 1, 77, 1.5).unwrap().samples());
            if (a - b).abs() > 0.002 * a.min(b) {
                distinct += 1;
            }
        }
        assert!(distinct >= 99, "{distinct} of 100 pairs distinct");
    }

    #[test]
    fn pitch_estimate_tracks_the_voice() {
        for s in [4u64, 40, 400] {
            let v = Voice::from_seed(s);
            let est = median_pitch(synth_clean(s, 5, 2.0).unwrap().samples());
            // contour stays within [0.85, 1.2] of the base
            assert!(est > 0.8 * v.f0_hz && est < 1.25 * v.f0_hz, "{est} vs {}", v.f0_hz);
        }
    }
}
