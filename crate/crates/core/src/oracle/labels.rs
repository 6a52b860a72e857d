use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OracleError, Result};

pub const QUALITY_RANGE: (f64, f64) = (1.0, 4.5);
pub const INTELLIGIBILITY_RANGE: (f64, f64) = (0.0, 1.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualitySource {
    ExternalPesq,
    PseudoPesq,
}

/// Ground-truth quality and intelligibility for one utterance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelPair {
    quality: f64,
    intelligibility: f64,
    quality_source: QualitySource,
}

fn check_range(name: &str, v: f64, (lo, hi): (f64, f64)) -> std::result::Result<(), String> {
    if !v.is_finite() || v < lo || v > hi {
        return Err(format!("{name} {v} outside [{lo}, {hi}]"));
    }
    Ok(())
}

impl LabelPair {
    pub fn new(quality: f64, intelligibility: f64, quality_source: QualitySource) -> Result<Self> {
        check_range("quality", quality, QUALITY_RANGE).map_err(OracleError::InvalidValue)?;
        check_range("intelligibility", intelligibility, INTELLIGIBILITY_RANGE).map_err(OracleError::InvalidValue)?;
        Ok(Self { quality, intelligibility, quality_source })
    }

    pub fn quality(&self) -> f64 {
        self.quality
    }

    pub fn intelligibility(&self) -> f64 {
        self.intelligibility
    }

    pub fn quality_source(&self) -> QualitySource {
        self.quality_source
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineError {
    /// 1-based line number.
    pub line: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelFileErrors(pub Vec<LineError>);

impl fmt::Display for LabelFileErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} invalid label line(s)", self.0.len())?;
        for e in &self.0 {
            write!(f, "\n  line {}: {}", e.line, e.message)?;
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct RawLabel {
    #[serde(alias = "id")]
    utterance_id: Option<String>,
    pesq: Option<f64>,
    stoi: Option<f64>,
}

/// Parses a JSON Lines label file (`utterance_id`, `pesq`, `stoi` per line).
/// Every bad line is reported; nothing is returned unless all lines are valid.
pub fn ingest_external_labels(path: impl AsRef<Path>) -> Result<BTreeMap<String, LabelPair>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_external_labels(&text)
}

pub fn parse_external_labels(text: &str) -> Result<BTreeMap<String, LabelPair>> {
    let mut out = BTreeMap::new();
    let mut first_seen: BTreeMap<String, usize> = BTreeMap::new();
    let mut errors = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut err = |message: String| errors.push(LineError { line: lineno, message });
        let raw: RawLabel = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                err(format!("malformed JSON: {e}"));
                continue;
            }
        };
        let Some(id) = raw.utterance_id.filter(|s| !s.is_empty()) else {
            err("missing utterance_id".into());
            continue;
        };
        let (Some(pesq), Some(stoi)) = (raw.pesq, raw.stoi) else {
            err(format!("{id}: missing pesq or stoi"));
            continue;
        };
        if let Err(m) = check_range("pesq", pesq, QUALITY_RANGE) {
            err(format!("{id}: {m}"));
            continue;
        }
        if let Err(m) = check_range("stoi", stoi, INTELLIGIBILITY_RANGE) {
            err(format!("{id}: {m}"));
            continue;
        }
        if let Some(&prev) = first_seen.get(&id) {
            err(format!("duplicate utterance_id {id} (lines {prev} and {lineno})"));
            continue;
        }
        first_seen.insert(id.clone(), lineno);
        out.insert(id, LabelPair { quality: pesq, intelligibility: stoi, quality_source: QualitySource::ExternalPesq });
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(OracleError::Labels(LabelFileErrors(errors)))
    }
}
