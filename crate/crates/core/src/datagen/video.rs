//! Envelope-driven mouth videos and their on-disk form.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatagenError;
use crate::dsp::Waveform;

pub const FRAME_SIZE: usize = 88;
pub const DEFAULT_FPS: f64 = 25.0;
pub const FPS_RANGE: (f64, f64) = (10.0, 60.0);
pub const MIN_FRAMES: usize = 5;
/// Cut-off of the envelope low-pass.
pub const ENVELOPE_CUTOFF_HZ: f64 = 8.0;
/// Mouth half-height range in pixels.
pub const APERTURE_PX: (f64, f64) = (1.5, 12.0);
const MOUTH_CENTRE: (f64, f64) = (44.0, 60.0);
const MOUTH_HALF_WIDTH: f64 = 18.0;
const LIP_PX: f64 = 2.5;
const JITTER: f64 = 0.05;

/// Grayscale frames, row-major `[M, 88, 88]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Vec<u8>,
    count: usize,
    frame_rate: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct VideoMeta {
    frame_rate: f64,
    frame_count: usize,
    width: usize,
    height: usize,
}

impl VideoClip {
    pub fn new(frames: Vec<u8>, frame_rate: f64) -> Result<Self, DatagenError> {
        let px = FRAME_SIZE * FRAME_SIZE;
        if frames.is_empty() || frames.len() % px != 0 {
            return Err(DatagenError::Video(format!("{} bytes is not a whole number of 88x88 frames", frames.len())));
        }
        if !(frame_rate > 0.0) {
            return Err(DatagenError::Video(format!("frame rate must be positive, got {frame_rate}")));
        }
        Ok(Self { count: frames.len() / px, frames, frame_rate })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn frame(&self, m: usize) -> &[u8] {
        let px = FRAME_SIZE * FRAME_SIZE;
        &self.frames[m * px..(m + 1) * px]
    }

    pub fn bytes(&self) -> &[u8] {
        &self.frames
    }

    /// Pixels scaled to [0, 1].
    pub fn normalized(&self) -> Vec<f64> {
        self.frames.iter().map(|&p| p as f64 / 255.0).collect()
    }

    /// Writes `dir/00000.pgm ...` (binary P5) and `dir/meta.json`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), DatagenError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for m in 0..self.count {
            let mut buf = format!("P5\n{FRAME_SIZE} {FRAME_SIZE}\n255\n").into_bytes();
            buf.extend_from_slice(self.frame(m));
            fs::write(dir.join(format!("{m:05}.pgm")), buf)?;
        }
        let meta =
            VideoMeta { frame_rate: self.frame_rate, frame_count: self.count, width: FRAME_SIZE, height: FRAME_SIZE };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    /// Reads a directory written by [`VideoClip::write_dir`].
    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self, DatagenError> {
        let dir = dir.as_ref();
        let meta: VideoMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
        if meta.width != FRAME_SIZE || meta.height != FRAME_SIZE {
            return Err(DatagenError::Video(format!("frames are {}x{}, expected 88x88", meta.width, meta.height)));
        }
        let mut frames = Vec::with_capacity(meta.frame_count * FRAME_SIZE * FRAME_SIZE);
        for m in 0..meta.frame_count {
            let path = dir.join(format!("{m:05}.pgm"));
            frames.extend_from_slice(&parse_pgm(&fs::read(&path)?).map_err(|e| {
                DatagenError::Video(format!("{}: {e}", path.display()))
            })?);
        }
        Self::new(frames, meta.frame_rate)
    }
}

/// Pixel bytes of an 8-bit 88x88 P5 image.
fn parse_pgm(bytes: &[u8]) -> Result<Vec<u8>, String> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("expected binary grayscale P5, got {}", fields[0]));
    }
    let dims: Vec<usize> = fields[1..].iter().map(|f| f.parse().map_err(|_| format!("bad header field {f}"))).collect::<Result<_, _>>()?;
    if dims[0] != FRAME_SIZE || dims[1] != FRAME_SIZE {
        return Err(format!("frame is {}x{}, expected 88x88", dims[0], dims[1]));
    }
    if dims[2] != 255 {
        return Err(format!("expected 8-bit maxval 255, got {}", dims[2]));
    }
    let data = &bytes[i + 1..];
    if data.len() != FRAME_SIZE * FRAME_SIZE {
        return Err(format!("expected {} pixel bytes, got {}", FRAME_SIZE * FRAME_SIZE, data.len()));
    }
    Ok(data.to_vec())
}

/// Amplitude envelope: rectified signal through a zero-phase second-order
/// low-pass at [`ENVELOPE_CUTOFF_HZ`].
pub fn amplitude_envelope(wave: &Waveform) -> Vec<f64> {
    let fs = wave.sample_rate() as f64;
    // bilinear Butterworth biquad
    let k = (std::f64::consts::PI * ENVELOPE_CUTOFF_HZ / fs).tan();
    let q = std::f64::consts::FRAC_1_SQRT_2;
    let norm = 1.0 / (1.0 + k / q + k * k);
    let b0 = k * k * norm;
    let (b1, b2) = (2.0 * b0, b0);
    let a1 = 2.0 * (k * k - 1.0) * norm;
    let a2 = (1.0 - k / q + k * k) * norm;
    let run = |x: &mut Vec<f64>| {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let y = b0 * *v + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = *v;
            y2 = y1;
            y1 = y;
            *v = y;
        }
    };
    let mut e: Vec<f64> = wave.samples().iter().map(|v| v.abs()).collect();
    run(&mut e);
    e.reverse();
    run(&mut e);
    e.reverse();
    e.iter_mut().for_each(|v| *v = v.max(0.0));
    e
}

/// Number of frames covering `duration_s` at `fps`.
pub fn frame_count(duration_s: f64, fps: f64) -> usize {
    (duration_s * fps).round() as usize
}

/// Envelope sampled at frame centres.
pub fn envelope_at_frames(wave: &Waveform, fps: f64) -> Vec<f64> {
    let env = amplitude_envelope(wave);
    let m = frame_count(wave.duration_s(), fps);
    let fs = wave.sample_rate() as f64;
    (0..m)
        .map(|k| {
            let i = (((k as f64 + 0.5) / fps) * fs) as usize;
            env[i.min(env.len() - 1)]
        })
        .collect()
}

/// Mouth half-heights in pixels, one per frame. Silence maps to the
/// minimum aperture exactly; `seed` drives a small multiplicative jitter.
pub fn aperture_series(wave: &Waveform, fps: f64, seed: u64) -> Vec<f64> {
    let env = envelope_at_frames(wave, fps);
    let peak = env.iter().cloned().fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    env.iter()
        .map(|&e| {
            let jitter = 1.0 + JITTER * rng.random_range(-1.0..1.0);
            let u = if peak > 0.0 { (e / peak * jitter).clamp(0.0, 1.0) } else { 0.0 };
            APERTURE_PX.0 + (APERTURE_PX.1 - APERTURE_PX.0) * u
        })
        .collect()
}

/// Fixed low-contrast face texture shared by every clip.
fn background() -> Vec<f64> {
    let mut bg = vec![0.0; FRAME_SIZE * FRAME_SIZE];
    for y in 0..FRAME_SIZE {
        for x in 0..FRAME_SIZE {
            let (xf, yf) = (x as f64, y as f64);
            let shade = 0.58 + 0.05 * ((xf * 0.21).sin() * (yf * 0.17).cos()) - 0.0015 * (yf - 30.0).abs();
            bg[y * FRAME_SIZE + x] = shade;
        }
    }
    bg
}

/// Draws one frame: an anti-aliased dark elliptical mouth opening inside a
/// lip band, over the background.
fn render(bg: &[f64], half_height: f64) -> Vec<u8> {
    let (cx, cy) = MOUTH_CENTRE;
    let coverage = |x: f64, y: f64, a: f64, b: f64| {
        // approximate signed distance to the ellipse boundary
        let r = ((x - cx) / a).hypot((y - cy) / b);
        let d = (r - 1.0) * a.min(b);
        (0.5 - d).clamp(0.0, 1.0)
    };
    let mut out = Vec::with_capacity(bg.len());
    for y in 0..FRAME_SIZE {
        for x in 0..FRAME_SIZE {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let lip = coverage(xf, yf, MOUTH_HALF_WIDTH + LIP_PX, half_height + LIP_PX);
            let hole = coverage(xf, yf, MOUTH_HALF_WIDTH, half_height);
            let mut v = bg[y * FRAME_SIZE + x];
            v = v * (1.0 - lip) + 0.38 * lip;
            v = v * (1.0 - hole) + 0.08 * hole;
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Mouth video whose aperture follows the low-passed envelope of `clean`.
pub fn synth_lip_video(clean: &Waveform, fps: f64, seed: u64) -> Result<VideoClip, DatagenError> {
    if !(FPS_RANGE.0..=FPS_RANGE.1).contains(&fps) {
        return Err(DatagenError::Config(format!("fps {fps} outside [{}, {}]", FPS_RANGE.0, FPS_RANGE.1)));
    }
    let m = frame_count(clean.duration_s(), fps);
    if m < MIN_FRAMES {
        return Err(DatagenError::Video(format!("clip of {m} frames is too short; need at least {MIN_FRAMES}")));
    }
    let bg = background();
    let frames = aperture_series(clean, fps, seed).into_iter().flat_map(|a| render(&bg, a)).collect();
    VideoClip::new(frames, fps)
}

/// Mouth opening read back from a frame: dark pixels in the centre column.
pub fn measured_aperture(frame: &[u8]) -> f64 {
    let x = MOUTH_CENTRE.0 as usize;
    (0..FRAME_SIZE).map(|y| (1.0 - frame[y * FRAME_SIZE + x] as f64 / 255.0 - 0.4).max(0.0)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::synth_clean;
    use crate::dsp::SAMPLE_RATE;

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn silent_input_gives_identical_frames() {
        let v = synth_lip_video(&Waveform::zeros(16000, SAMPLE_RATE), 25.0, 3).unwrap();
        assert_eq!(v.len(), 25);
        for m in 1..25 {
            assert_eq!(v.frame(m), v.frame(0));
        }
    }

    #[test]
    fn frame_count_follows_duration() {
        let w = synth_clean(1, 1, 1.0).unwrap();
        assert_eq!(synth_lip_video(&w, 25.0, 0).unwrap().len(), 25);
        assert_eq!(synth_lip_video(&w, 30.0, 0).unwrap().len(), 30);
        assert!(synth_lip_video(&Waveform::zeros(2000, SAMPLE_RATE), 25.0, 0).is_err());
        assert!(synth_lip_video(&w, 5.0, 0).is_err());
    }

    #[test]
    fn aperture_tracks_the_envelope() {
        // the envelope oracle here is frame RMS of the clean signal, not the
        // low-pass used by the renderer
        let mut worst = 1.0f64;
        for s in 0..100u64 {
            let w = synth_clean(s, s + 1000, 1.0 + (s % 5) as f64 * 0.5).unwrap();
            let v = synth_lip_video(&w, 25.0, s).unwrap();
            let ap: Vec<f64> = (0..v.len()).map(|m| measured_aperture(v.frame(m))).collect();
            let hop = SAMPLE_RATE as usize / 25;
            let rms: Vec<f64> = (0..v.len())
                .map(|m| {
                    let seg = &w.samples()[m * hop..((m + 1) * hop).min(w.len())];
                    (seg.iter().map(|x| x * x).sum::<f64>() / seg.len() as f64).sqrt()
                })
                .collect();
            worst = worst.min(pearson(&ap, &rms));
        }
        assert!(worst >= 0.8, "worst aperture/envelope correlation {worst}");
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let w = synth_clean(2, 3, 1.2).unwrap();
        let v = synth_lip_video(&w, 25.0, 7).unwrap();
        v.write_dir(dir.path()).unwrap();
        let back = VideoClip::read_dir(dir.path()).unwrap();
        assert_eq!(back, v);
        let bytes = std::fs::read(dir.path().join("00000.pgm")).unwrap();
        assert!(bytes.starts_with(b"P5\n88 88\n255\n"));
    }

    #[test]
    fn pgm_rejects_wrong_formats() {
        assert!(parse_pgm(b"P2\n88 88\n255\n").is_err());
        let mut small = b"P5\n64 64\n255\n".to_vec();
        small.extend(vec![0u8; 64 * 64]);
        assert!(parse_pgm(&small).is_err());
        let mut ok = b"P5\n# comment\n88 88\n255\n".to_vec();
        ok.extend(vec![7u8; 88 * 88]);
        assert_eq!(parse_pgm(&ok).unwrap().len(), 88 * 88);
    }
}
