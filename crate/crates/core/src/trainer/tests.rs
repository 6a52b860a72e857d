use std::sync::OnceLock;

use super::*;
use crate::datagen::{build_corpus, CorpusConfig, Split, MANIFEST_FILE};
use crate::model::{Modality, Model, ModelConfig, TaskMode};
use crate::oracle::{eval_stats, Task};

struct Fixture {
    _dir: tempfile::TempDir,
    audio: Dataset,
    video: Dataset,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            n_train_speakers: 3,
            n_test_speakers: 1,
            duration_s: [1.3, 1.5],
            snr_grid: vec![-5.0, 5.0],
            noise_duration_s: 2.0,
            validation_fraction: 0.34,
            master_seed: 9,
            ..Default::default()
        };
        build_corpus(&cfg, dir.path()).unwrap();
        let m = dir.path().join(MANIFEST_FILE);
        Fixture { audio: Dataset::load(&m, false).unwrap(), video: Dataset::load(&m, true).unwrap(), _dir: dir }
    })
}

fn small(modality: Modality) -> ModelConfig {
    ModelConfig { width_multiplier: 0.0625, modality, ..Default::default() }
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig { learning_rate: 1e-3, max_epochs: epochs, batch_size: 2, seed: 3, ..Default::default() }
}

fn no_op() -> impl FnMut(&EpochEvent<'_>) -> Result<(), TrainerError> {
    |_| Ok(())
}

#[test]
fn dataset_splits_and_batches() {
    let d = &fixture().video;
    assert_eq!(d.indices(Split::Train).len(), 4);
    assert_eq!(d.indices(Split::Validation).len(), 2);
    assert_eq!(d.indices(Split::Test).len(), 4);
    assert_eq!(d.n_freq, 257);
    // the two test mixtures of each SNR share one clip
    let test = d.indices(Split::Test);
    let (b, targets) = d.batch::<f32>(&test, true).unwrap();
    let v = b.video.as_ref().unwrap();
    assert_eq!(v.frames.shape()[0], 1);
    assert_eq!(v.index, vec![0; 4]);
    assert_eq!(b.spec.shape()[0], 4);
    assert_eq!(targets.len(), 2);
    assert!(fixture().audio.batch::<f32>(&test, true).is_err());
}

#[test]
fn epoch_order_is_seeded_and_exhaustive() {
    let d = &fixture().audio;
    let idx: Vec<usize> = (0..d.len()).collect();
    let a = epoch_batches(d, &idx, 3, 1, 0);
    assert_eq!(a, epoch_batches(d, &idx, 3, 1, 0));
    let mut flat: Vec<usize> = a.concat();
    flat.sort();
    assert_eq!(flat, idx);
    assert!((1..6).any(|e| epoch_batches(d, &idx, 3, 1, e) != a));
}

#[test]
fn identical_seeds_identical_trajectories() {
    let d = &fixture().audio;
    let a = train(&small(Modality::AudioOnly), &quick(2), d, &mut no_op()).unwrap();
    let b = train(&small(Modality::AudioOnly), &quick(2), d, &mut no_op()).unwrap();
    assert_eq!(a.step_losses.len(), 4);
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.last, b.last);
    let c = train(&small(Modality::AudioOnly), &TrainConfig { seed: 4, ..quick(2) }, d, &mut no_op()).unwrap();
    assert_ne!(a.step_losses, c.step_losses);
}

#[test]
fn best_checkpoint_has_the_lowest_validation_loss() {
    let d = &fixture().audio;
    let out = train(&small(Modality::AudioOnly), &TrainConfig { learning_rate: 3e-3, ..quick(5) }, d, &mut no_op()).unwrap();
    let min = out.history.iter().map(|m| m.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best.best_val_loss, Some(min));
    assert_eq!(out.history[out.best.epoch - 1].val_loss, min);
    let m: Model<f32> = out.best.model().unwrap();
    let again = mean_loss(&m, d, &d.indices(Split::Validation), 2).unwrap();
    assert_eq!(again, min);
}

#[test]
fn interrupted_run_resumes_to_the_same_state() {
    let d = &fixture().video;
    let cfg = small(Modality::Multimodal);
    let full = train(&cfg, &quick(3), d, &mut no_op()).unwrap();

    let (mut last, mut best) = (None, None);
    let mut stop_after_first = |e: &EpochEvent<'_>| {
        last = Some(e.last.clone());
        if e.improved {
            best = Some(e.last.clone());
        }
        Err(TrainerError::Config("interrupted".into()))
    };
    assert!(train(&cfg, &quick(3), d, &mut stop_after_first).is_err());
    let last = Checkpoint::from_bytes(&last.unwrap().to_bytes().unwrap()).unwrap();
    let resumed = resume(&last, best, d, &mut no_op()).unwrap();
    assert_eq!(resumed.last, full.last);
    assert_eq!(resumed.best, full.best);
    assert_eq!(resumed.step_losses[..], full.step_losses[2..]);
}

#[test]
fn checkpoint_round_trip_evaluates_bit_identically() {
    let d = &fixture().video;
    let out = train(&small(Modality::Multimodal), &quick(1), d, &mut no_op()).unwrap();
    let test = d.indices(Split::Test);
    let in_memory: Model<f64> = out.best.model::<f32>().unwrap().cast();
    let reloaded: Model<f64> = Checkpoint::from_bytes(&out.best.to_bytes().unwrap()).unwrap().model().unwrap();
    let a = evaluate(&in_memory, d, &test).unwrap();
    let b = evaluate(&reloaded, d, &test).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.predictions_csv(), evaluate(&reloaded, d, &test).unwrap().predictions_csv());
}

#[test]
fn summary_recomputes_from_the_exported_csv() {
    let d = &fixture().audio;
    let out = train(&small(Modality::AudioOnly), &quick(2), d, &mut no_op()).unwrap();
    let model: Model<f64> = out.best.model().unwrap();
    let ev = evaluate(&model, d, &d.indices(Split::Test)).unwrap();
    let csv = ev.predictions_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[0].starts_with("utterance_id,condition,source,quality_truth"));
    // column 3 + 3k is truth and 5 + 3k the clamped prediction of task k
    for (k, task) in Task::ALL.iter().enumerate() {
        for cond in ["seen", "unseen"] {
            let (mut p, mut y) = (Vec::new(), Vec::new());
            for l in &lines[1..] {
                let f: Vec<&str> = l.split(',').collect();
                if f[1] == cond {
                    y.push(f[3 + 3 * k].parse::<f64>().unwrap());
                    p.push(f[5 + 3 * k].parse::<f64>().unwrap());
                }
            }
            let part = if cond == "seen" { crate::dsp::NoisePartition::Seen } else { crate::dsp::NoisePartition::Unseen };
            let cell = ev.summary.get(part, crate::oracle::SourceGroup::Pooled, *task).unwrap();
            assert_eq!(cell.n, p.len());
            assert_eq!(cell.stats, eval_stats(&p, &y).ok());
        }
    }
}

#[test]
fn predictions_pool_frames_and_normalize_attention() {
    let d = &fixture().video;
    let model: Model<f64> = Model::new(small(Modality::Multimodal), 5).unwrap();
    let test = d.indices(Split::Test);
    let (batch, _) = d.batch::<f64>(&test, true).unwrap();
    for heads in predict_batch(&model, &batch).unwrap() {
        for h in heads {
            // independent mean, not the network's pooling code
            let mean = h.frames.iter().sum::<f64>() / h.len() as f64;
            assert!((h.utterance - mean).abs() < 1e-9);
            for t in 0..h.len() {
                assert!((h.attention_row(t).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn single_task_models_report_one_task() {
    let d = &fixture().audio;
    let cfg = ModelConfig { tasks: TaskMode::IntelligibilityOnly, ..small(Modality::AudioOnly) };
    let model: Model<f64> = Model::new(cfg, 1).unwrap();
    let ev = evaluate(&model, d, &d.indices(Split::Test)).unwrap();
    assert!(ev.rows.iter().all(|r| r.scores.len() == 1 && r.scores[0].task == Task::Intelligibility));
    assert!(ev.summary.cells.iter().all(|c| c.task == Task::Intelligibility));
}

#[test]
fn clamping_keeps_raw_values() {
    assert_eq!(clamp_to_range(Task::Quality, 5.2), 4.5);
    assert_eq!(clamp_to_range(Task::Quality, 0.2), 1.0);
    assert_eq!(clamp_to_range(Task::Intelligibility, -0.1), 0.0);
    assert_eq!(clamp_to_range(Task::Intelligibility, 0.4), 0.4);
}

#[test]
fn non_finite_loss_reports_where() {
    let mut d = fixture().audio.clone();
    for e in &mut d.examples {
        e.spec[0] = f64::NAN;
    }
    match train(&small(Modality::AudioOnly), &quick(1), &d, &mut no_op()) {
        Err(TrainerError::Divergence { epoch: 0, step: 0, .. }) => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn rejects_missing_inputs() {
    let d = &fixture().audio;
    assert!(train(&small(Modality::Multimodal), &quick(1), d, &mut no_op()).is_err());
    let model: Model<f64> = Model::new(small(Modality::Multimodal), 1).unwrap();
    let wave = crate::dsp::Waveform::zeros(16000, 16000);
    assert!(matches!(predict_waveform(&model, &wave, None), Err(TrainerError::Model(_))));
}

#[test]
fn metrics_log_has_one_line_per_epoch() {
    let h = vec![
        EpochMetrics { epoch: 0, train_loss: 1.5, val_loss: 1.25, lr: 1e-4 },
        EpochMetrics { epoch: 1, train_loss: 1.0, val_loss: 1.125, lr: 1e-4 },
    ];
    assert_eq!(metrics_csv(&h), "epoch,train_loss,val_loss,lr\n0,1.5,1.25,0.0001\n1,1,1.125,0.0001\n");
}
