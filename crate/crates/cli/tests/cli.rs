use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;
use std::time::Duration;

use avsqa_core::datagen::{read_manifest, Split, MANIFEST_FILE};
use avsqa_core::dsp::wav::read_wav;
use avsqa_core::model::Modality;
use avsqa_core::trainer::{log_spectrogram, Checkpoint, CHECKPOINT_MAGIC};

const TOY: &[&str] = &[
    "corpus.n_train_speakers=5",
    "corpus.n_test_speakers=2",
    "corpus.snr_grid=[-5.0, 5.0]",
    "corpus.duration_s=[1.2, 1.5]",
    "corpus.validation_fraction=0.2",
    "model.width_multiplier=0.0625",
    "train.max_epochs=2",
    "train.batch_size=4",
    "train.learning_rate=0.001",
];

fn avsqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avsqa")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = avsqa(args);
    assert!(out.status.success(), "avsqa {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn with_toy<'a>(mut args: Vec<&'a str>) -> Vec<&'a str> {
    args.extend_from_slice(TOY);
    args
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Toy {
    dir: tempfile::TempDir,
}

impl Toy {
    fn manifest(&self) -> PathBuf {
        self.dir.path().join("corpus").join(MANIFEST_FILE)
    }

    fn run(&self, modality: &str) -> PathBuf {
        self.dir.path().join(modality)
    }
}

/// Toy corpus plus one 2-epoch run per modality.
fn toy() -> &'static Toy {
    static T: OnceLock<Toy> = OnceLock::new();
    T.get_or_init(|| {
        let t = Toy { dir: tempfile::tempdir().unwrap() };
        let corpus = t.dir.path().join("corpus");
        ok(&with_toy(vec!["synth", "--seed", "2", "--out", s(&corpus)]));
        for m in ["audio_only", "multimodal"] {
            let out = t.run(m);
            ok(&with_toy(vec!["train", "--seed", "2", "--manifest", s(&t.manifest()), "--out", s(&out), "--modality", m]));
        }
        t
    })
}

#[test]
fn version_flag_prints_the_version() {
    let out = ok(&["--version"]);
    assert_eq!(out.trim(), format!("avsqa {}", env!("CARGO_PKG_VERSION")));
}

#[test]
fn synth_reports_the_manifest_size() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&with_toy(vec!["synth", "--seed", "4", "--out", s(dir.path())]));
    let lines = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap().lines().count();
    assert!(stdout.contains(&format!("({lines} records)")), "{stdout}");
    assert!(dir.path().join("run_config.toml").exists());
}

#[test]
fn unknown_keys_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = avsqa(&["synth", "--out", s(dir.path()), "corpus.n_speakers=3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus.n_speakers"));

    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 0.01\nwarmup = 4\n").unwrap();
    let out = avsqa(&["synth", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.warmup"));
    assert!(!dir.path().join(MANIFEST_FILE).exists());
}

#[test]
fn invalid_values_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = avsqa(&["synth", "--out", s(dir.path()), "corpus.snr_grid=[30.0]"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn checkpoints_carry_the_header() {
    let t = toy();
    for m in ["audio_only", "multimodal"] {
        for f in ["best.ckpt", "last.ckpt"] {
            let bytes = fs::read(t.run(m).join(f)).unwrap();
            assert!(bytes.starts_with(CHECKPOINT_MAGIC.as_bytes()));
            assert!(bytes.starts_with(b"AVSQA-CKPT-1"));
        }
        let metrics = fs::read_to_string(t.run(m).join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1 + 2);
    }
}

#[test]
fn modality_runs_differ_only_in_modality() {
    let t = toy();
    let a = Checkpoint::load(t.run("audio_only").join("best.ckpt")).unwrap();
    let mut m = Checkpoint::load(t.run("multimodal").join("best.ckpt")).unwrap();
    assert_eq!(a.model_config.modality, Modality::AudioOnly);
    assert_eq!(m.model_config.modality, Modality::Multimodal);
    m.model_config.modality = Modality::AudioOnly;
    assert_eq!(a.model_config, m.model_config);
    assert_eq!(a.train_config, m.train_config);

    let echo = |r: &str| fs::read_to_string(t.run(r).join("run_config.toml")).unwrap();
    let (ea, em) = (echo("audio_only"), echo("multimodal"));
    let diff: Vec<(&str, &str)> = ea.lines().zip(em.lines()).filter(|(x, y)| x != y).collect();
    assert_eq!(ea.lines().count(), em.lines().count());
    assert_eq!(diff, vec![("modality = \"audio_only\"", "modality = \"multimodal\"")]);
}

#[test]
fn interrupted_training_resumes_to_the_same_state() {
    let t = toy();
    let dir = tempfile::tempdir().unwrap();
    let base = |out: &Path| {
        let mut v: Vec<String> = ["train", "--seed", "5", "--manifest", s(&t.manifest()), "--out", s(out)]
            .iter()
            .map(|x| x.to_string())
            .collect();
        v.extend(TOY.iter().map(|x| x.to_string()));
        v.push("train.max_epochs=4".into());
        v
    };
    let full = dir.path().join("full");
    let args = base(&full);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    // stop the second run as soon as its first epoch is on disk
    let cut = dir.path().join("cut");
    let args = base(&cut);
    let mut child = Command::new(env!("CARGO_BIN_EXE_avsqa")).args(&args).stdout(Stdio::null()).spawn().unwrap();
    let metrics = cut.join("metrics.csv");
    while fs::read_to_string(&metrics).map_or(0, |m| m.lines().count()) < 2 {
        if child.try_wait().unwrap().is_some() {
            break;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    child.kill().ok();
    child.wait().unwrap();
    let done = fs::read_to_string(&metrics).unwrap().lines().count() - 1;
    assert!(done < 4, "the run finished before it could be interrupted");

    let mut resume = base(&cut);
    resume.push("--resume".into());
    ok(&resume.iter().map(String::as_str).collect::<Vec<_>>());
    for f in ["best.ckpt", "last.ckpt", "metrics.csv"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(cut.join(f)).unwrap(), "{f} after resuming from epoch {done}");
    }
}

#[test]
fn eval_writes_one_row_per_cell_and_utterance() {
    let t = toy();
    let records = read_manifest(t.manifest()).unwrap();
    let n_test = records.iter().filter(|r| r.split == Split::Test).count();
    let out = tempfile::tempdir().unwrap();
    let ckpt = t.run("multimodal").join("best.ckpt");
    let manifest = t.manifest();
    let args = ["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(out.path())];
    ok(&args);
    let summary = fs::read_to_string(out.path().join("summary.csv")).unwrap();
    let predictions = fs::read_to_string(out.path().join("predictions.csv")).unwrap();
    // {seen, unseen} x {noisy, enhanced, pooled} x two tasks
    assert_eq!(summary.lines().count(), 1 + 2 * 3 * 2);
    assert_eq!(summary.lines().next().unwrap(), "condition,source,task,n,lcc,srcc,mse");
    assert_eq!(predictions.lines().count(), 1 + n_test);

    ok(&args);
    assert_eq!(fs::read_to_string(out.path().join("summary.csv")).unwrap(), summary);
    assert_eq!(fs::read_to_string(out.path().join("predictions.csv")).unwrap(), predictions);

    let val = ["eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(out.path()), "--subset", "validation"];
    ok(&val);
    let n_val = records.iter().filter(|r| r.split == Split::Validation).count();
    assert_eq!(fs::read_to_string(out.path().join("predictions.csv")).unwrap().lines().count(), 1 + n_val);
}

/// `task,t,...` rows of one head as numbers.
fn head_rows(csv: &str, task: &str) -> Vec<Vec<f64>> {
    csv.lines()
        .skip(1)
        .filter(|l| l.starts_with(&format!("{task},")))
        .map(|l| l.split(',').skip(2).map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn attention_export_is_normalized_and_modality_dependent() {
    let t = toy();
    let records = read_manifest(t.manifest()).unwrap();
    let r = records.iter().find(|r| r.split == Split::Test).unwrap();
    let corpus = t.manifest().parent().unwrap().to_path_buf();
    let (_, frames) = log_spectrogram(&read_wav(corpus.join(&r.degraded_path)).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut exported = Vec::new();
    for m in ["audio_only", "multimodal"] {
        let out = dir.path().join(format!("{m}.csv"));
        let ckpt = t.run(m).join("best.ckpt");
        ok(&["dump-attention", "--checkpoint", s(&ckpt), "--manifest", s(&t.manifest()), "--utterance-id", &r.utterance_id, "--out", s(&out)]);
        let att = fs::read_to_string(&out).unwrap();
        let lat = fs::read_to_string(dir.path().join(format!("{m}.latent.csv"))).unwrap();
        for task in ["quality", "intelligibility"] {
            let rows = head_rows(&att, task);
            assert_eq!(rows.len(), frames);
            for row in &rows {
                assert_eq!(row.len(), frames);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            let latent = head_rows(&lat, task);
            assert_eq!(latent.len(), frames);
            assert_eq!(latent[0].len(), Checkpoint::load(&ckpt).unwrap().model_config.d_h());
        }
        exported.push(head_rows(&att, "intelligibility"));
    }
    let frob: f64 = exported[0]
        .iter()
        .flatten()
        .zip(exported[1].iter().flatten())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    assert!(frob > 0.0);

    let out = avsqa(&["dump-attention", "--checkpoint", s(&t.run("audio_only").join("best.ckpt")), "--manifest", s(&t.manifest()), "--utterance-id", "nope", "--out", s(&dir.path().join("x.csv"))]);
    assert!(!out.status.success());
}

#[test]
fn predict_scores_a_wav_file() {
    let t = toy();
    let records = read_manifest(t.manifest()).unwrap();
    let r = &records[0];
    let corpus = t.manifest().parent().unwrap().to_path_buf();
    let (wav, video) = (corpus.join(&r.degraded_path), corpus.join(&r.video_path));
    let out = tempfile::tempdir().unwrap();
    let ckpt = t.run("multimodal").join("best.ckpt");
    let stdout = ok(&["predict", "--checkpoint", s(&ckpt), "--wav", s(&wav), "--video", s(&video), "--out", s(out.path())]);
    let scores: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(scores.as_array().unwrap().len(), 2);
    for f in ["frame_scores.csv", "attention.csv", "latent.csv"] {
        assert!(out.path().join(f).exists(), "{f}");
    }
    let no_video = avsqa(&["predict", "--checkpoint", s(&ckpt), "--wav", s(&wav), "--out", s(out.path())]);
    assert!(!no_video.status.success());
    assert!(String::from_utf8_lossy(&no_video.stderr).contains("video"));
}
