//! Library side of the `avsqa` command: configuration merging and the
//! subcommands, callable without spawning a process.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use avsqa_core::datagen::{build_corpus, read_manifest, CorpusConfig, Split, VideoClip, MANIFEST_FILE};
use avsqa_core::dsp::wav::read_wav;
use avsqa_core::model::{Modality, Model, ModelConfig};
use avsqa_core::trainer::{
    attention_csv, evaluate, metrics_csv, predict_waveform, resume, train, Checkpoint, Dataset, EpochEvent,
    HeadPrediction, TrainConfig, TrainerError,
};
use avsqa_core::datagen::DatagenError;

pub const RUN_CONFIG_FILE: &str = "run_config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Trainer(#[from] TrainerError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Dsp(#[from] avsqa_core::dsp::DspError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Every tunable of a run: corpus, network and optimization.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed key `{key}`")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let next = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = next.as_table_mut().ok_or_else(|| CliError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn unknown_keys(user: &toml::Table, known: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, known.get(k)) {
            (toml::Value::Table(u), Some(toml::Value::Table(kn))) => unknown_keys(u, kn, &path, out),
            (_, Some(_)) => {}
            (_, None) => out.push(path),
        }
    }
}

impl RunConfig {
    /// Defaults, then the file, then `key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(io_err(p))?;
                text.parse::<toml::Table>().map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not of the form key=value")))?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self, CliError> {
        let parsed = Self::deserialize(toml::Value::Table(table.clone()));
        match parsed {
            Ok(cfg) => Ok(cfg),
            Err(e) => {
                let known = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
                let mut unknown = Vec::new();
                unknown_keys(&table, &known, "", &mut unknown);
                match unknown.into_iter().next() {
                    Some(k) if e.to_string().contains("unknown field") => Err(CliError::UnknownKey(k)),
                    _ => Err(CliError::Config(e.to_string())),
                }
            }
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.corpus.master_seed = seed;
        self.train.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub struct SynthOutput {
    pub manifest: PathBuf,
    pub summary: String,
    pub records: usize,
}

/// Builds the corpus into `out`, then re-reads the manifest to check it.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<SynthOutput, CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let (_, summary) = build_corpus(&cfg.corpus, out)?;
    write(&out.join(RUN_CONFIG_FILE), cfg.to_toml())?;
    let manifest = out.join(MANIFEST_FILE);
    let read = read_manifest(&manifest)?;
    if read.len() != summary.total {
        return Err(CliError::Validation(format!("manifest has {} lines, summary reports {}", read.len(), summary.total)));
    }
    Ok(SynthOutput { manifest, summary: summary.to_string(), records: read.len() })
}

pub struct TrainOutput {
    pub best: PathBuf,
    pub last: PathBuf,
    pub metrics: PathBuf,
    pub epochs: usize,
    pub best_val_loss: Option<f64>,
}

/// Trains on `manifest`, writing `last.ckpt` and `metrics.csv` after every
/// epoch and `best.ckpt` whenever validation improves. With `resume`, an
/// existing `last.ckpt` in `out` is continued instead.
pub fn cmd_train(cfg: &RunConfig, manifest: &Path, out: &Path, resume_run: bool) -> Result<TrainOutput, CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let (best_p, last_p, metrics_p) = (out.join(BEST_CHECKPOINT), out.join(LAST_CHECKPOINT), out.join(METRICS_FILE));
    let previous = if resume_run && last_p.exists() { Some(Checkpoint::load(&last_p)?) } else { None };
    let model_cfg = previous.as_ref().map_or(&cfg.model, |c| &c.model_config);
    let data = Dataset::load(manifest, model_cfg.modality == Modality::Multimodal)?;
    write(&out.join(RUN_CONFIG_FILE), cfg.to_toml())?;

    let mut sink = |e: &EpochEvent<'_>| -> Result<(), TrainerError> {
        e.last.save(&last_p)?;
        if e.improved {
            e.last.save(&best_p)?;
        }
        fs::write(&metrics_p, metrics_csv(&e.last.history))?;
        Ok(())
    };
    let outcome = match previous {
        Some(last) => {
            let best = if best_p.exists() { Some(Checkpoint::load(&best_p)?) } else { None };
            resume(&last, best, &data, &mut sink)?
        }
        None => train(&cfg.model, &cfg.train, &data, &mut sink)?,
    };
    // a run that ended before its first epoch still leaves a loadable pair
    if !last_p.exists() {
        outcome.last.save(&last_p)?;
        outcome.best.save(&best_p)?;
        write(&metrics_p, metrics_csv(&outcome.history))?;
    }
    Checkpoint::load(&best_p)?;
    Ok(TrainOutput {
        best: best_p,
        last: last_p,
        metrics: metrics_p,
        epochs: outcome.last.epoch,
        best_val_loss: outcome.best.best_val_loss,
    })
}

fn load_f64(checkpoint: &Path) -> Result<(Checkpoint, Model<f64>), CliError> {
    let c = Checkpoint::load(checkpoint)?;
    let m = c.model()?;
    Ok((c, m))
}

pub struct EvalOutput {
    pub summary: PathBuf,
    pub predictions: PathBuf,
    pub summary_csv: String,
    pub rows: usize,
}

/// Scores the `split` records of `manifest`; writes the summary and the
/// per-utterance predictions.
pub fn cmd_eval(checkpoint: &Path, manifest: &Path, split: Split, out: &Path) -> Result<EvalOutput, CliError> {
    let (_, model) = load_f64(checkpoint)?;
    let data = Dataset::load(manifest, model.config().modality == Modality::Multimodal)?;
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(CliError::Validation(format!("manifest has no {split:?} records")));
    }
    let ev = evaluate(&model, &data, &idx)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let (summary, predictions) = (out.join(SUMMARY_FILE), out.join(PREDICTIONS_FILE));
    let summary_csv = ev.summary.to_csv();
    write(&summary, &summary_csv)?;
    write(&predictions, ev.predictions_csv())?;
    Ok(EvalOutput { summary, predictions, summary_csv, rows: ev.rows.len() })
}

#[derive(Clone, Debug, Serialize)]
pub struct TaskPrediction {
    pub task: String,
    pub score: f64,
    pub score_clamped: f64,
    pub frames: usize,
}

/// Scores one waveform; with `out`, frame scores and attention are written there.
pub fn cmd_predict(
    checkpoint: &Path,
    wav: &Path,
    video: Option<&Path>,
    out: Option<&Path>,
) -> Result<(Vec<TaskPrediction>, Vec<HeadPrediction>), CliError> {
    let (_, model) = load_f64(checkpoint)?;
    let wave = read_wav(wav)?;
    let clip = video.map(VideoClip::read_dir).transpose()?;
    let heads = predict_waveform(&model, &wave, clip.as_ref())?;
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(io_err(out))?;
        let mut frames = String::from("task,t,score\n");
        for h in &heads {
            for (t, v) in h.frames.iter().enumerate() {
                frames.push_str(&format!("{},{t},{v}\n", h.task.name()));
            }
        }
        write(&out.join("frame_scores.csv"), frames)?;
        let (att, lat) = attention_csv(&heads);
        write(&out.join("attention.csv"), att)?;
        write(&out.join("latent.csv"), lat)?;
    }
    let summary = heads
        .iter()
        .map(|h| TaskPrediction {
            task: h.task.name().to_string(),
            score: h.utterance,
            score_clamped: avsqa_core::trainer::clamp_to_range(h.task, h.utterance),
            frames: h.len(),
        })
        .collect();
    Ok((summary, heads))
}

/// Path of the latent file written next to an attention export.
pub fn latent_path(attention_path: &Path) -> PathBuf {
    let stem = attention_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    attention_path.with_file_name(format!("{stem}.latent.csv"))
}

/// Writes the `T x T` attention of `utterance_id` to `out_path` and its
/// `T x d_h` attention output next to it.
pub fn cmd_dump_attention(
    checkpoint: &Path,
    manifest: &Path,
    utterance_id: &str,
    out_path: &Path,
) -> Result<Vec<HeadPrediction>, CliError> {
    let (_, model) = load_f64(checkpoint)?;
    let data = Dataset::load(manifest, model.config().modality == Modality::Multimodal)?;
    let i = data
        .find(utterance_id)
        .ok_or_else(|| CliError::Validation(format!("utterance {utterance_id} is not in the manifest")))?;
    let (batch, _) = data.batch::<f64>(&[i], model.config().modality == Modality::Multimodal)?;
    let heads = avsqa_core::trainer::predict_batch(&model, &batch)?.remove(0);
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let (att, lat) = attention_csv(&heads);
    write(out_path, att)?;
    write(&latent_path(out_path), lat)?;
    Ok(heads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_beat_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "train.learning_rate = 0.01\nmodel.modality = \"audio_only\"\n[corpus]\nn_train_speakers = 4\n").unwrap();
        let c = RunConfig::load(Some(&p), &["train.learning_rate=0.5".into(), "corpus.snr_grid=[0.0, 5.0]".into()]).unwrap();
        assert_eq!(c.train.learning_rate, 0.5);
        assert_eq!(c.model.modality, Modality::AudioOnly);
        assert_eq!(c.corpus.n_train_speakers, 4);
        assert_eq!(c.corpus.snr_grid, vec![0.0, 5.0]);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::load(None, &["train.learnin_rate=1".into()]).unwrap_err();
        assert!(matches!(&e, CliError::UnknownKey(k) if k == "train.learnin_rate"), "{e}");
        let e = RunConfig::load(None, &["trian.seed=1".into()]).unwrap_err();
        assert!(matches!(&e, CliError::UnknownKey(k) if k == "trian"), "{e}");
        // optional fields absent from the defaults still parse
        assert_eq!(RunConfig::load(None, &["train.max_steps=7".into()]).unwrap().train.max_steps, Some(7));
    }

    #[test]
    fn bare_words_become_strings() {
        let c = RunConfig::load(None, &["model.tasks=intelligibility_only".into()]).unwrap();
        assert_eq!(c.model.tasks, avsqa_core::model::TaskMode::IntelligibilityOnly);
        assert!(RunConfig::load(None, &["model.tasks=both".into()]).is_err());
        assert!(RunConfig::load(None, &["no_equals".into()]).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set_seed(17);
        c.train.max_steps = Some(3);
        let back = RunConfig::from_table(c.to_toml().parse().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn latent_file_sits_next_to_attention() {
        assert_eq!(latent_path(Path::new("a/b/att.csv")), PathBuf::from("a/b/att.latent.csv"));
    }
}
