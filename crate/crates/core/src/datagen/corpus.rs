use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::noise::{build_noise_catalog, NoiseConfig};
use super::speech::{synth_clean, DURATION_RANGE_S};
use super::video::{synth_lip_video, FPS_RANGE};
use super::{derive_seed, DatagenError};
use crate::dsp::wav::write_wav;
use crate::dsp::{mix_at_snr, spectral_subtraction_enhance, EnhanceConfig, NoiseClip, NoisePartition, Waveform};
use crate::oracle::{ingest_external_labels, pseudo_pesq, stoi, LabelPair, QualitySource, Source};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CATALOG_FILE: &str = "noise_catalog.json";
pub const SNR_LIMITS_DB: (f64, f64) = (-20.0, 10.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Speakers for train and validation; the validation speakers are
    /// drawn from these.
    pub n_train_speakers: usize,
    pub n_test_speakers: usize,
    pub utterances_per_speaker: usize,
    /// `[min, max]` clean duration in seconds.
    pub duration_s: [f64; 2],
    pub snr_grid: Vec<f64>,
    pub seen_fraction: f64,
    pub enhanced_fraction: f64,
    pub validation_fraction: f64,
    pub noise_instances_per_family: usize,
    pub noise_duration_s: f64,
    pub fps: f64,
    pub master_seed: u64,
    /// Label file (JSON Lines) whose entries replace the computed labels.
    pub external_labels: Option<PathBuf>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_train_speakers: 40,
            n_test_speakers: 8,
            utterances_per_speaker: 1,
            duration_s: [1.5, 2.5],
            snr_grid: vec![-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0],
            seen_fraction: 0.8,
            enhanced_fraction: 0.5,
            validation_fraction: 0.1,
            noise_instances_per_family: 2,
            noise_duration_s: 8.0,
            fps: 25.0,
            master_seed: 1,
            external_labels: None,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: String| Err(DatagenError::Config(m));
        if self.n_train_speakers == 0 || self.n_test_speakers == 0 || self.utterances_per_speaker == 0 {
            return bad("speaker and utterance counts must be positive".into());
        }
        let [lo, hi] = self.duration_s;
        if !(lo <= hi && lo >= DURATION_RANGE_S.0 && hi <= DURATION_RANGE_S.1) {
            return bad(format!("duration_s [{lo}, {hi}] must be an ordered range inside [1, 6]"));
        }
        if self.snr_grid.is_empty() {
            return bad("snr_grid is empty".into());
        }
        if let Some(s) = self.snr_grid.iter().find(|s| !(SNR_LIMITS_DB.0..=SNR_LIMITS_DB.1).contains(*s)) {
            return bad(format!("snr {s} dB outside [-20, 10]"));
        }
        if !(self.seen_fraction > 0.0 && self.seen_fraction < 1.0) {
            return bad(format!("seen_fraction must be in (0, 1), got {}", self.seen_fraction));
        }
        if !(0.0..=1.0).contains(&self.enhanced_fraction) {
            return bad(format!("enhanced_fraction must be in [0, 1], got {}", self.enhanced_fraction));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction must be in [0, 1), got {}", self.validation_fraction));
        }
        if self.validation_speakers() >= self.n_train_speakers {
            return bad("validation would take every train speaker".into());
        }
        if !(FPS_RANGE.0..=FPS_RANGE.1).contains(&self.fps) {
            return bad(format!("fps {} outside [10, 60]", self.fps));
        }
        if !(self.noise_duration_s >= 1.0) {
            return bad("noise_duration_s must be at least 1".into());
        }
        Ok(())
    }

    pub fn validation_speakers(&self) -> usize {
        let v = (self.n_train_speakers as f64 * self.validation_fraction).round() as usize;
        if self.validation_fraction > 0.0 {
            v.max(1)
        } else {
            0
        }
    }

    fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            instances_per_family: self.noise_instances_per_family,
            duration_s: self.noise_duration_s,
            seen_fraction: self.seen_fraction,
        }
    }
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub clean_path: String,
    pub degraded_path: String,
    pub video_path: String,
    pub noise_id: String,
    /// Start sample inside the noise instance.
    pub noise_offset: usize,
    pub snr_db: f64,
    pub condition: NoisePartition,
    pub source: Source,
    pub split: Split,
    pub labels: LabelPair,
    /// The noisy mixture an enhanced record was made from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_labels: Option<LabelPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub noise_id: String,
    pub partition: NoisePartition,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub total: usize,
    pub clean_utterances: usize,
    pub seen_noises: usize,
    pub unseen_noises: usize,
    /// `(split, condition, source) -> count`.
    pub counts: BTreeMap<(Split, NoisePartition, Source), usize>,
    pub clipped_mixtures: usize,
}

impl CorpusSummary {
    fn from_records(records: &[UtteranceRecord], catalog: &[CatalogEntry], clipped: usize) -> Self {
        let mut counts = BTreeMap::new();
        for r in records {
            *counts.entry((r.split, r.condition, r.source)).or_insert(0) += 1;
        }
        let clean: BTreeSet<&str> = records.iter().map(|r| r.clean_path.as_str()).collect();
        let seen = catalog.iter().filter(|c| c.partition == NoisePartition::Seen).count();
        Self {
            total: records.len(),
            clean_utterances: clean.len(),
            seen_noises: seen,
            unseen_noises: catalog.len() - seen,
            counts,
            clipped_mixtures: clipped,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        self.counts.iter().filter(|((s, _, _), _)| *s == split).map(|(_, n)| n).sum()
    }
}

impl fmt::Display for CorpusSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "records: {}", self.total)?;
        writeln!(f, "clean utterances: {}", self.clean_utterances)?;
        let all = self.seen_noises + self.unseen_noises;
        writeln!(f, "noise instances: {all} ({} seen, {} unseen)", self.seen_noises, self.unseen_noises)?;
        for ((split, cond, source), n) in &self.counts {
            let cond = if *cond == NoisePartition::Seen { "seen" } else { "unseen" };
            let source = if *source == Source::Noisy { "noisy" } else { "enhanced" };
            writeln!(f, "  {:<10} {cond:<6} {source:<8} {n}", split.name())?;
        }
        for split in [Split::Train, Split::Validation, Split::Test] {
            let n = self.count(split);
            let enh: usize = self
                .counts
                .iter()
                .filter(|((s, _, src), _)| *s == split && *src == Source::Enhanced)
                .map(|(_, n)| n)
                .sum();
            if n > 0 {
                writeln!(f, "{} enhanced ratio: {enh}/{n}", split.name())?;
            }
        }
        write!(f, "clipped mixtures: {}", self.clipped_mixtures)
    }
}

/// Samples as they will be read back from a 32-bit float WAV.
fn stored(w: Waveform) -> Result<Waveform, DatagenError> {
    let sr = w.sample_rate();
    Ok(Waveform::new(w.into_samples().into_iter().map(|v| v as f32 as f64).collect(), sr)?)
}

fn snr_tag(snr: f64) -> String {
    if snr < 0.0 {
        format!("m{:02}", -snr as i64)
    } else {
        format!("p{:02}", snr as i64)
    }
}

struct Candidate {
    id: String,
    speaker_id: String,
    clean_id: String,
    split: Split,
    noise: usize,
    offset: usize,
    snr_db: f64,
    mixture: Waveform,
}

/// Synthesizes the corpus into `out_dir`: `clean/`, `degraded/`, `video/`,
/// the noise catalog and the manifest. Returns the records and summary.
pub fn build_corpus(
    cfg: &CorpusConfig,
    out_dir: impl AsRef<Path>,
) -> Result<(Vec<UtteranceRecord>, CorpusSummary), DatagenError> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    for sub in ["clean", "degraded", "video"] {
        fs::create_dir_all(out.join(sub))?;
    }
    let seed = cfg.master_seed;
    let external = cfg.external_labels.as_ref().map(ingest_external_labels).transpose()?;

    let catalog = build_noise_catalog(&cfg.noise(), seed)?;
    let seen: Vec<usize> = (0..catalog.len()).filter(|&i| catalog[i].partition() == NoisePartition::Seen).collect();
    let unseen: Vec<usize> = (0..catalog.len()).filter(|&i| catalog[i].partition() == NoisePartition::Unseen).collect();
    let entries: Vec<CatalogEntry> = catalog
        .iter()
        .map(|c| CatalogEntry { noise_id: c.noise_id().to_string(), partition: c.partition() })
        .collect();
    fs::write(out.join(CATALOG_FILE), serde_json::to_string_pretty(&entries)? + "\n")?;

    // validation speakers, held out by speaker
    let mut pool: Vec<usize> = (0..cfg.n_train_speakers).collect();
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "validation-speakers")));
    let validation: BTreeSet<usize> = pool[..cfg.validation_speakers()].iter().copied().collect();

    let mut cleans: BTreeMap<String, Waveform> = BTreeMap::new();
    let mut candidates = Vec::new();
    for s in 0..cfg.n_train_speakers + cfg.n_test_speakers {
        let speaker_id = format!("s{s:03}");
        let split = if s >= cfg.n_train_speakers {
            Split::Test
        } else if validation.contains(&s) {
            Split::Validation
        } else {
            Split::Train
        };
        for u in 0..cfg.utterances_per_speaker {
            let clean_id = format!("{speaker_id}u{u}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("utterance/{clean_id}")));
            let [lo, hi] = cfg.duration_s;
            let dur = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            // whole 10 ms steps keep sample and frame counts round
            let dur = (dur * 100.0).round() / 100.0;
            let clean = stored(synth_clean(derive_seed(seed, &format!("speaker/{speaker_id}")), rng.random(), dur)?)?;
            write_wav(out.join(format!("clean/{clean_id}.wav")), &clean)?;
            synth_lip_video(&clean, cfg.fps, rng.random())?.write_dir(out.join(format!("video/{clean_id}")))?;

            for &snr in &cfg.snr_grid {
                let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("mix/{clean_id}/{snr}")));
                let pools: Vec<&[usize]> = if split == Split::Test { vec![&seen, &unseen] } else { vec![&seen] };
                for pool in pools {
                    let noise = pool[pick.random_range(0..pool.len())];
                    let nc = &catalog[noise];
                    let offset = pick.random_range(0..nc.waveform().len());
                    let id = format!("{clean_id}_{}_{}", snr_tag(snr), nc.noise_id());
                    let mixture = mix_at_snr(&clean, &rotated(nc, offset)?, snr)?.mixture;
                    candidates.push(Candidate {
                        id,
                        speaker_id: speaker_id.clone(),
                        clean_id: clean_id.clone(),
                        split,
                        noise,
                        offset,
                        snr_db: snr,
                        mixture,
                    });
                }
            }
            cleans.insert(clean_id, clean);
        }
    }

    // enhancement routing: floor(n * fraction) per (split, condition) group
    let mut enhanced: BTreeSet<String> = BTreeSet::new();
    let mut groups: BTreeMap<(Split, NoisePartition), Vec<String>> = BTreeMap::new();
    for c in &candidates {
        groups.entry((c.split, catalog[c.noise].partition())).or_default().push(c.id.clone());
    }
    for ((split, cond), mut ids) in groups {
        ids.sort();
        let tag = format!("enhance/{}/{cond:?}", split.name());
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &tag)));
        let k = (ids.len() as f64 * cfg.enhanced_fraction).floor() as usize;
        enhanced.extend(ids.into_iter().take(k));
    }

    let enhance_cfg = EnhanceConfig::default();
    let label = |id: &str, clean: &Waveform, degraded: &Waveform| -> Result<LabelPair, DatagenError> {
        if let Some(ext) = &external {
            return ext.get(id).copied().ok_or_else(|| DatagenError::Label {
                id: id.to_string(),
                source: crate::oracle::OracleError::InvalidValue("missing from the external label file".into()),
            });
        }
        let wrap = |e| DatagenError::Label { id: id.to_string(), source: e };
        let i = stoi(clean, degraded).map_err(wrap)?;
        let q = pseudo_pesq(clean, degraded).map_err(wrap)?;
        LabelPair::new(q, i.clamp(0.0, 1.0), QualitySource::PseudoPesq).map_err(wrap)
    };

    let mut records = Vec::with_capacity(candidates.len());
    let mut clipped = 0;
    for c in candidates {
        let clean = &cleans[&c.clean_id];
        let nc = &catalog[c.noise];
        let noisy = stored(c.mixture)?;
        if noisy.samples().iter().any(|v| v.abs() > 1.0) {
            clipped += 1;
        }
        let noisy_labels = label(&c.id, clean, &noisy)?;
        let (id, degraded, source, labels, parent_id, parent_labels) = if enhanced.contains(&c.id) {
            let id = format!("{}_enh", c.id);
            let e = stored(spectral_subtraction_enhance(&noisy, &enhance_cfg)?)?;
            let l = label(&id, clean, &e)?;
            (id, e, Source::Enhanced, l, Some(c.id.clone()), Some(noisy_labels))
        } else {
            (c.id.clone(), noisy, Source::Noisy, noisy_labels, None, None)
        };
        let degraded_path = format!("degraded/{id}.wav");
        write_wav(out.join(&degraded_path), &degraded)?;
        records.push(UtteranceRecord {
            utterance_id: id,
            speaker_id: c.speaker_id,
            clean_path: format!("clean/{}.wav", c.clean_id),
            degraded_path,
            video_path: format!("video/{}", c.clean_id),
            noise_id: nc.noise_id().to_string(),
            noise_offset: c.offset,
            snr_db: c.snr_db,
            condition: nc.partition(),
            source,
            split: c.split,
            labels,
            parent_id,
            parent_labels,
        });
    }
    write_manifest(out.join(MANIFEST_FILE), &records)?;
    let summary = CorpusSummary::from_records(&records, &entries, clipped);
    Ok((records, summary))
}

/// The noise instance started at `offset` and wrapped around.
fn rotated(nc: &NoiseClip, offset: usize) -> Result<NoiseClip, DatagenError> {
    let s = nc.waveform().samples();
    let r: Vec<f64> = s[offset..].iter().chain(&s[..offset]).copied().collect();
    Ok(NoiseClip::new(Waveform::new(r, nc.waveform().sample_rate())?, nc.noise_id(), nc.partition()))
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[UtteranceRecord]) -> Result<(), DatagenError> {
    let mut text = String::new();
    for r in records {
        text += &serde_json::to_string(r)?;
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>, DatagenError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| DatagenError::Manifest { line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn read_catalog(path: impl AsRef<Path>) -> Result<Vec<CatalogEntry>, DatagenError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Protocol checks over a manifest and its noise catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub seen: usize,
    pub unseen: usize,
    /// Train or validation records whose noise is unseen.
    pub unseen_in_training: Vec<String>,
    /// Records whose condition disagrees with the catalog.
    pub condition_mismatches: Vec<String>,
    /// Noise ids shared by the training splits and the unseen test subset.
    pub leaked_noise_ids: Vec<String>,
    /// Whether the catalog split matches `seen_fraction` exactly.
    pub partition_exact: bool,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.unseen_in_training.is_empty()
            && self.condition_mismatches.is_empty()
            && self.leaked_noise_ids.is_empty()
            && self.partition_exact
    }
}

pub fn audit_protocol(records: &[UtteranceRecord], catalog: &[CatalogEntry], seen_fraction: f64) -> AuditReport {
    let part: BTreeMap<&str, NoisePartition> = catalog.iter().map(|c| (c.noise_id.as_str(), c.partition)).collect();
    let unseen = catalog.iter().filter(|c| c.partition == NoisePartition::Unseen).count();
    let seen = catalog.len() - unseen;
    let training = |r: &&UtteranceRecord| r.split != Split::Test;
    let unseen_in_training = records
        .iter()
        .filter(training)
        .filter(|r| part.get(r.noise_id.as_str()) != Some(&NoisePartition::Seen))
        .map(|r| r.utterance_id.clone())
        .collect();
    let condition_mismatches =
        records.iter().filter(|r| part.get(r.noise_id.as_str()) != Some(&r.condition)).map(|r| r.utterance_id.clone()).collect();
    let train_ids: BTreeSet<&str> = records.iter().filter(training).map(|r| r.noise_id.as_str()).collect();
    let test_unseen: BTreeSet<&str> = records
        .iter()
        .filter(|r| r.split == Split::Test && r.condition == NoisePartition::Unseen)
        .map(|r| r.noise_id.as_str())
        .collect();
    let leaked_noise_ids = train_ids.intersection(&test_unseen).map(|s| s.to_string()).collect();
    let expected_unseen = (catalog.len() as f64 * (1.0 - seen_fraction)).round() as usize;
    AuditReport {
        seen,
        unseen,
        unseen_in_training,
        condition_mismatches,
        leaked_noise_ids,
        partition_exact: unseen == expected_unseen && seen + unseen == catalog.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::wav::read_wav;

    fn tiny() -> CorpusConfig {
        CorpusConfig {
            n_train_speakers: 5,
            n_test_speakers: 2,
            duration_s: [1.2, 1.5],
            snr_grid: vec![-10.0, 0.0, 10.0],
            noise_duration_s: 2.0,
            validation_fraction: 0.2,
            master_seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn tiny_corpus_counts_and_protocol() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let (records, summary) = build_corpus(&cfg, dir.path()).unwrap();
        // 5 train-pool speakers x 3 snrs, 2 test speakers x 3 snrs x {seen, unseen}
        assert_eq!(records.len(), 15 + 12);
        assert_eq!(summary.count(Split::Validation), 3);
        assert_eq!(summary.count(Split::Train), 12);
        // floor(n/2) enhanced per (split, condition) group
        let enh = |s: Split, c: NoisePartition| {
            records.iter().filter(|r| r.split == s && r.condition == c && r.source == Source::Enhanced).count()
        };
        assert_eq!(enh(Split::Train, NoisePartition::Seen), 6);
        assert_eq!(enh(Split::Validation, NoisePartition::Seen), 1);
        assert_eq!(enh(Split::Test, NoisePartition::Unseen), 3);
        assert!(records.iter().all(|r| r.split == Split::Test || r.condition == NoisePartition::Seen));

        let read = read_manifest(dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(read, records);
        let catalog = read_catalog(dir.path().join(CATALOG_FILE)).unwrap();
        assert!(audit_protocol(&records, &catalog, cfg.seen_fraction).passed());

        for r in records.iter().filter(|r| r.source == Source::Enhanced) {
            assert_eq!(r.parent_id.as_deref(), Some(r.utterance_id.trim_end_matches("_enh")));
            assert!(r.parent_labels.is_some());
        }
        // labels recompute from the files on disk
        let r = &records[4];
        let clean = read_wav(dir.path().join(&r.clean_path)).unwrap();
        let deg = read_wav(dir.path().join(&r.degraded_path)).unwrap();
        assert_eq!(stoi(&clean, &deg).unwrap().clamp(0.0, 1.0), r.labels.intelligibility());
        let v = super::super::VideoClip::read_dir(dir.path().join(&r.video_path)).unwrap();
        assert_eq!(v.len(), (clean.duration_s() * 25.0).round() as usize);
        assert!(summary.to_string().contains("records: 27"));
    }

    #[test]
    fn same_seed_same_manifest_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = CorpusConfig { n_train_speakers: 2, n_test_speakers: 1, validation_fraction: 0.0, ..tiny() };
        build_corpus(&cfg, a.path()).unwrap();
        build_corpus(&cfg, b.path()).unwrap();
        let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
        assert_eq!(read(a.path(), MANIFEST_FILE), read(b.path(), MANIFEST_FILE));
        assert_eq!(read(a.path(), "clean/s000u0.wav"), read(b.path(), "clean/s000u0.wav"));
        assert_eq!(read(a.path(), "video/s001u0/00003.pgm"), read(b.path(), "video/s001u0/00003.pgm"));
    }

    #[test]
    fn audit_flags_leaks() {
        let catalog = vec![
            CatalogEntry { noise_id: "a".into(), partition: NoisePartition::Seen },
            CatalogEntry { noise_id: "b".into(), partition: NoisePartition::Seen },
            CatalogEntry { noise_id: "c".into(), partition: NoisePartition::Unseen },
            CatalogEntry { noise_id: "d".into(), partition: NoisePartition::Unseen },
        ];
        let rec = |id: &str, noise: &str, split, condition| UtteranceRecord {
            utterance_id: id.into(),
            speaker_id: "s".into(),
            clean_path: String::new(),
            degraded_path: String::new(),
            video_path: String::new(),
            noise_id: noise.into(),
            noise_offset: 0,
            snr_db: 0.0,
            condition,
            source: Source::Noisy,
            split,
            labels: LabelPair::new(2.0, 0.5, QualitySource::PseudoPesq).unwrap(),
            parent_id: None,
            parent_labels: None,
        };
        let good = vec![rec("1", "a", Split::Train, NoisePartition::Seen), rec("2", "c", Split::Test, NoisePartition::Unseen)];
        assert!(audit_protocol(&good, &catalog, 0.5).passed());
        assert!(!audit_protocol(&good, &catalog, 0.8).partition_exact);
        let bad = vec![rec("1", "c", Split::Train, NoisePartition::Seen), rec("2", "c", Split::Test, NoisePartition::Unseen)];
        let a = audit_protocol(&bad, &catalog, 0.5);
        assert_eq!(a.unseen_in_training, vec!["1"]);
        assert_eq!(a.condition_mismatches, vec!["1"]);
        assert_eq!(a.leaked_noise_ids, vec!["c"]);
    }

    #[test]
    fn config_validation() {
        assert!(CorpusConfig::default().validate().is_ok());
        assert!(CorpusConfig { snr_grid: vec![15.0], ..Default::default() }.validate().is_err());
        assert!(CorpusConfig { seen_fraction: 1.0, ..Default::default() }.validate().is_err());
        assert!(CorpusConfig { duration_s: [3.0, 2.0], ..Default::default() }.validate().is_err());
        let parsed: Result<CorpusConfig, _> = serde_json::from_str(r#"{"n_speakers": 3}"#);
        assert!(parsed.is_err());
    }

    #[test]
    fn stoi_rises_with_snr_for_one_noise() {
        let cat = build_noise_catalog(&NoiseConfig { duration_s: 3.0, ..Default::default() }, 3).unwrap();
        for (k, nc) in cat.iter().enumerate() {
            let clean = synth_clean(k as u64, 100 + k as u64, 2.0).unwrap();
            let mut prev = -1.0;
            for snr in [-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0] {
                let mix = mix_at_snr(&clean, nc, snr).unwrap().mixture;
                let s = stoi(&clean, &mix).unwrap();
                assert!(s >= prev, "{} at {snr} dB: {s} < {prev}", nc.noise_id());
                prev = s;
            }
        }
    }
}
