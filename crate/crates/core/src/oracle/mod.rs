//! Intrusive label oracles and evaluation statistics.

mod labels;
pub mod resample;
mod stats;
mod stoi;
mod summary;

pub use labels::{
    ingest_external_labels, parse_external_labels, LabelFileErrors, LabelPair, LineError, QualitySource,
    INTELLIGIBILITY_RANGE, QUALITY_RANGE,
};
pub use stats::{average_ranks, eval_stats, EvalStats, Side};
pub use stoi::{stoi, Stoi, StoiConfig};
pub use summary::{EvalCell, EvalItem, EvalSummary, Source, SourceGroup, Task};

use thiserror::Error;

use crate::dsp::{fw_seg_snr, DspError, FwSegSnrConfig, Waveform, FW_SNR_MAX, FW_SNR_MIN};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("too short for STOI: {frames} frames after silence removal, need {needed}")]
    TooShortForStoi { frames: usize, needed: usize },
    #[error("degenerate correlation: {0} values are constant")]
    DegenerateCorrelation(Side),
    #[error("{0}")]
    InvalidValue(String),
    #[error("{0}")]
    Labels(LabelFileErrors),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = OracleError> = std::result::Result<T, E>;

/// Affine map of a fwSegSNR value from `[FW_SNR_MIN, FW_SNR_MAX]` onto
/// `[1.0, 4.5]`, clamped.
pub fn pseudo_pesq_from_fwsnr(db: f64) -> f64 {
    let (lo, hi) = QUALITY_RANGE;
    (lo + (db - FW_SNR_MIN) * (hi - lo) / (FW_SNR_MAX - FW_SNR_MIN)).clamp(lo, hi)
}

/// Quality proxy on the PESQ scale.
pub fn pseudo_pesq(clean: &Waveform, degraded: &Waveform) -> Result<f64> {
    Ok(pseudo_pesq_from_fwsnr(fw_seg_snr(clean, degraded, &FwSegSnrConfig::default())?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pseudo_pesq_affine_map() {
        assert_eq!(pseudo_pesq_from_fwsnr(-10.0), 1.0);
        assert_eq!(pseudo_pesq_from_fwsnr(35.0), 4.5);
        assert!((pseudo_pesq_from_fwsnr(12.5) - 2.75).abs() < 1e-15);
        assert_eq!(pseudo_pesq_from_fwsnr(-40.0), 1.0);
        assert_eq!(pseudo_pesq_from_fwsnr(80.0), 4.5);
    }

    #[test]
    fn pseudo_pesq_is_monotone_over_a_grid() {
        let mut prev = f64::NEG_INFINITY;
        for i in -300..=600 {
            let v = pseudo_pesq_from_fwsnr(i as f64 / 10.0);
            assert!(v >= prev);
            prev = v;
        }
    }
}
