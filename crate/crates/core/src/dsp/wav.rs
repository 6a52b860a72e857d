//! Mono 16 kHz WAV I/O. Reads PCM 16-bit or IEEE float 32-bit, writes float 32-bit.

use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use super::{DspError, Result, Waveform, SAMPLE_RATE};

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path.as_ref())?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(DspError::UnsupportedWav(format!("{} channels, expected mono", spec.channels)));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(DspError::SampleRateMismatch(spec.sample_rate, SAMPLE_RATE));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Float, 32) => {
            reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => return Err(DspError::UnsupportedWav(format!("{fmt:?} {bits}-bit"))),
    };
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate(),
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut w = WavWriter::create(path.as_ref(), spec)?;
    for &s in wave.samples() {
        w.write_sample(s as f32)?;
    }
    w.finalize()?;
    Ok(())
}

/// PCM 16-bit writer, used for fixtures that external tools read.
pub fn write_wav_pcm16(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let spec = WavSpec { channels: 1, sample_rate: wave.sample_rate(), bits_per_sample: 16, sample_format: SampleFormat::Int };
    let mut w = WavWriter::create(path.as_ref(), spec)?;
    for &s in wave.samples() {
        w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?;
    }
    w.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_roundtrip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.25, -0.5, 0.125, 1.5], 16_000).unwrap();
        write_wav(&p, &w).unwrap();
        assert_eq!(read_wav(&p).unwrap(), w);
    }

    #[test]
    fn pcm16_roundtrip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        let w = Waveform::new(vec![0.3, -0.7, 0.0001], 16_000).unwrap();
        write_wav_pcm16(&p, &w).unwrap();
        let r = read_wav(&p).unwrap();
        for (a, b) in w.samples().iter().zip(r.samples()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn other_rates_and_layouts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        write_wav(&p, &Waveform::new(vec![0.0; 10], 8000).unwrap()).unwrap();
        assert!(matches!(read_wav(&p), Err(DspError::SampleRateMismatch(8000, 16_000))));

        let spec = WavSpec { channels: 2, sample_rate: 16_000, bits_per_sample: 16, sample_format: SampleFormat::Int };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&p), Err(DspError::UnsupportedWav(_))));
    }
}
