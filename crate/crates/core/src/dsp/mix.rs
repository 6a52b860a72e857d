use super::{DspError, NoiseClip, Result, Waveform};

/// Below this RMS a signal counts as silent.
pub const SILENCE_RMS: f64 = 1e-8;

/// Full-utterance mean square.
pub fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// `10 log10(P_signal / P_noise)` with full-utterance mean squares.
pub fn snr_db(signal: &[f64], noise: &[f64]) -> f64 {
    10.0 * (power(signal) / power(noise)).log10()
}

#[derive(Clone, Debug)]
pub struct MixResult {
    pub mixture: Waveform,
    /// Factor applied to the looped/truncated noise segment.
    pub noise_scale: f64,
    /// Any output sample outside [-1, 1]. The mixture is not renormalized.
    pub clipped: bool,
}

/// Loops or truncates `noise` to the clean length, then scales it so the
/// clean-to-noise power ratio of the two addends equals `snr_db`.
pub fn mix_at_snr(clean: &Waveform, noise: &NoiseClip, snr_db: f64) -> Result<MixResult> {
    let nw = noise.waveform();
    if clean.sample_rate() != nw.sample_rate() {
        return Err(DspError::SampleRateMismatch(clean.sample_rate(), nw.sample_rate()));
    }
    if !snr_db.is_finite() {
        return Err(DspError::Config(format!("snr must be finite, got {snr_db}")));
    }
    if clean.rms() <= SILENCE_RMS {
        return Err(DspError::DegeneratePower("clean"));
    }
    if nw.is_empty() || nw.rms() <= SILENCE_RMS {
        return Err(DspError::DegeneratePower("noise"));
    }
    let n = clean.len();
    let segment: Vec<f64> = nw.samples().iter().copied().cycle().take(n).collect();
    let p_noise = power(&segment);
    if p_noise.sqrt() <= SILENCE_RMS {
        return Err(DspError::DegeneratePower("noise"));
    }
    let p_clean = power(clean.samples());
    let noise_scale = (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples: Vec<f64> = clean.samples().iter().zip(&segment).map(|(c, v)| c + noise_scale * v).collect();
    let clipped = samples.iter().any(|v| v.abs() > 1.0);
    Ok(MixResult { mixture: Waveform::new(samples, clean.sample_rate())?, noise_scale, clipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::NoisePartition;

    fn tone(n: usize, f: f64, amp: f64) -> Waveform {
        Waveform::new(
            (0..n).map(|i| amp * (2.0 * std::f64::consts::PI * f * i as f64 / 16_000.0).sin()).collect(),
            16_000,
        )
        .unwrap()
    }

    fn clip(w: Waveform) -> NoiseClip {
        NoiseClip::new(w, "n", NoisePartition::Seen)
    }

    #[test]
    fn equal_power_scale_factors() {
        // 16000 samples hold an integer number of periods of both tones
        let c = tone(16_000, 500.0, 0.3);
        let n = clip(tone(16_000, 1250.0, 0.3));
        let r0 = mix_at_snr(&c, &n, 0.0).unwrap();
        assert!((r0.noise_scale - 1.0).abs() < 1e-12);
        let r10 = mix_at_snr(&c, &n, 10.0).unwrap();
        assert!((r10.noise_scale - 0.316_227_766).abs() < 1e-6);
        let r20 = mix_at_snr(&c, &n, -20.0).unwrap();
        assert!((r20.noise_scale - 10.0).abs() < 1e-9);
        assert!(r20.clipped);
        // measured from the addends of the output
        let added: Vec<f64> = r10.mixture.samples().iter().zip(c.samples()).map(|(m, c)| m - c).collect();
        assert!((snr_db(c.samples(), &added) - 10.0).abs() < 0.01);
    }

    #[test]
    fn short_noise_is_looped() {
        let c = tone(3000, 300.0, 0.5);
        let n = clip(tone(700, 900.0, 0.1));
        let r = mix_at_snr(&c, &n, 5.0).unwrap();
        assert_eq!(r.mixture.len(), 3000);
        let added: Vec<f64> = r.mixture.samples().iter().zip(c.samples()).map(|(m, c)| m - c).collect();
        assert!((added[5] - added[705]).abs() < 1e-12);
        assert!((snr_db(c.samples(), &added) - 5.0).abs() < 0.01);
    }

    #[test]
    fn silent_inputs_are_degenerate() {
        let z = Waveform::zeros(1000, 16_000);
        let t = tone(1000, 300.0, 0.5);
        assert!(matches!(mix_at_snr(&z, &clip(t.clone()), 0.0), Err(DspError::DegeneratePower("clean"))));
        assert!(matches!(mix_at_snr(&t, &clip(z), 0.0), Err(DspError::DegeneratePower("noise"))));
    }

    #[test]
    fn rate_mismatch_is_rejected() {
        let c = tone(1000, 300.0, 0.5);
        let n = clip(Waveform::new(vec![0.1; 1000], 8000).unwrap());
        assert!(matches!(mix_at_snr(&c, &n, 0.0), Err(DspError::SampleRateMismatch(..))));
    }

    #[test]
    fn remixing_at_the_same_snr_is_idempotent() {
        let c = tone(4000, 440.0, 0.4);
        let n = clip(tone(1234, 1700.0, 0.2));
        for snr in [-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0] {
            let a = mix_at_snr(&c, &n, snr).unwrap();
            let b = mix_at_snr(&c, &n, snr).unwrap();
            assert_eq!(a.mixture, b.mixture);
            let added: Vec<f64> = a.mixture.samples().iter().zip(c.samples()).map(|(m, c)| m - c).collect();
            assert!((snr_db(c.samples(), &added) - snr).abs() < 0.01);
        }
    }
}
