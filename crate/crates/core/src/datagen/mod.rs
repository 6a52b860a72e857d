//! Procedural audio-visual corpus: pseudo-speech, mouth videos, a noise
//! catalog with a seen/unseen partition, SNR-grid mixtures, an enhanced
//! condition, labels and a JSON Lines manifest.

mod corpus;
mod noise;
mod speech;
mod video;

pub use corpus::{
    audit_protocol, build_corpus, read_catalog, read_manifest, write_manifest, AuditReport, CatalogEntry, CorpusConfig,
    CorpusSummary, Split, UtteranceRecord, CATALOG_FILE, MANIFEST_FILE,
};
pub use noise::{build_noise_catalog, synth_noise, NoiseConfig, NoiseFamily, NOISE_RMS};
pub use speech::{synth_clean, Voice, DURATION_RANGE_S, F0_RANGE_HZ, LEAD_SILENCE_S, PEAK};
pub use video::{
    amplitude_envelope, aperture_series, envelope_at_frames, frame_count, measured_aperture, synth_lip_video, VideoClip,
    APERTURE_PX, DEFAULT_FPS, FRAME_SIZE, MIN_FRAMES,
};

use thiserror::Error;

use crate::dsp::DspError;
use crate::oracle::OracleError;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid corpus configuration: {0}")]
    Config(String),
    #[error("video format: {0}")]
    Video(String),
    #[error("labeling {id} failed: {source}")]
    Label { id: String, source: OracleError },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Stream seed for `tag` under `master`: FNV-1a over the tag bytes, mixed
/// with the master seed by a SplitMix64 finalizer. Independent of
/// execution order and of std's hasher.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ master.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
