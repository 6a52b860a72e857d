use std::fmt::Write as _;

use super::data::{log_spectrogram, sequential_batches, Dataset};
use super::TrainerError;
use crate::datagen::VideoClip;
use crate::dsp::{NoisePartition, Waveform};
use crate::model::{pool_utterance, Batch, Modality, Mode, Model, ModelError, VideoBatch};
use crate::oracle::{EvalItem, EvalSummary, Source, Task, INTELLIGIBILITY_RANGE, QUALITY_RANGE};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

const EVAL_BATCH: usize = 8;

pub fn clamp_to_range(task: Task, v: f64) -> f64 {
    let (lo, hi) = match task {
        Task::Quality => QUALITY_RANGE,
        Task::Intelligibility => INTELLIGIBILITY_RANGE,
    };
    v.clamp(lo, hi)
}

/// One head's output on one utterance, padding removed.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadPrediction {
    pub task: Task,
    /// The network's pooled utterance score, unclamped.
    pub utterance: f64,
    pub frames: Vec<f64>,
    /// `T x T`, row-major.
    pub attention: Vec<f64>,
    /// `T x d_h` attention output.
    pub latent: Vec<f64>,
    pub d_h: usize,
}

impl HeadPrediction {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn attention_row(&self, t: usize) -> &[f64] {
        &self.attention[t * self.len()..(t + 1) * self.len()]
    }
}

/// Eval-mode outputs of every head for each utterance of `batch`.
pub fn predict_batch<T: Scalar>(model: &Model<T>, batch: &Batch<T>) -> Result<Vec<Vec<HeadPrediction>>, TrainerError> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, batch, Mode::Eval)?;
    let t_max = batch.max_len();
    let mut res = vec![Vec::new(); batch.size()];
    for h in &out.heads {
        let frames = g.value(h.frames).to_f64();
        let utt = g.value(h.utterance).to_f64();
        let att = g.value(h.attention).to_f64();
        let lat = g.value(h.attended).to_f64();
        let d_h = g.shape(h.attended)[2];
        for (b, &len) in batch.lengths.iter().enumerate() {
            let attention = (0..len).flat_map(|i| att[(b * t_max + i) * t_max..][..len].iter().copied()).collect();
            let latent = lat[b * t_max * d_h..][..len * d_h].to_vec();
            res[b].push(HeadPrediction {
                task: h.task,
                utterance: utt[b],
                frames: frames[b * t_max..][..len].to_vec(),
                attention,
                latent,
                d_h,
            });
        }
    }
    Ok(res)
}

/// Scores one degraded waveform, with its lip video for multimodal models.
pub fn predict_waveform<T: Scalar>(
    model: &Model<T>,
    wave: &Waveform,
    video: Option<&VideoClip>,
) -> Result<Vec<HeadPrediction>, TrainerError> {
    let (spec, frames) = log_spectrogram(wave)?;
    let f = spec.len() / frames;
    let video = match (model.config().modality, video) {
        (Modality::Multimodal, None) => {
            return Err(ModelError::Modality("a multimodal checkpoint needs the lip video".into()).into());
        }
        (Modality::Multimodal, Some(v)) => {
            let side = (v.frame(0).len() as f64).sqrt().round() as usize;
            Some(VideoBatch {
                frames: Tensor::from_f64(&[1, v.len(), side, side], &v.normalized()),
                lengths: vec![v.len()],
                index: vec![0],
            })
        }
        (Modality::AudioOnly, _) => None,
    };
    let batch = Batch { spec: Tensor::from_f64(&[1, frames, f], &spec), lengths: vec![frames], video };
    Ok(predict_batch(model, &batch)?.remove(0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskScore {
    pub task: Task,
    pub truth: f64,
    pub raw: f64,
    pub clamped: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub utterance_id: String,
    pub condition: NoisePartition,
    pub source: Source,
    pub scores: Vec<TaskScore>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub rows: Vec<PredictionRow>,
    /// Statistics of the clamped predictions.
    pub summary: EvalSummary,
}

impl Evaluation {
    pub fn items(&self) -> Vec<EvalItem> {
        self.rows
            .iter()
            .flat_map(|r| {
                r.scores.iter().map(move |s| EvalItem {
                    condition: r.condition,
                    source: r.source,
                    task: s.task,
                    predicted: s.clamped,
                    truth: s.truth,
                })
            })
            .collect()
    }

    /// One line per utterance; values are written in shortest round-trip form.
    pub fn predictions_csv(&self) -> String {
        let tasks: Vec<Task> = self.rows.first().map(|r| r.scores.iter().map(|s| s.task).collect()).unwrap_or_default();
        let mut s = String::from("utterance_id,condition,source");
        for t in &tasks {
            let n = t.name();
            write!(s, ",{n}_truth,{n}_predicted_raw,{n}_predicted_clamped").unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            let cond = match r.condition {
                NoisePartition::Seen => "seen",
                NoisePartition::Unseen => "unseen",
            };
            let src = match r.source {
                Source::Noisy => "noisy",
                Source::Enhanced => "enhanced",
            };
            write!(s, "{},{cond},{src}", r.utterance_id).unwrap();
            for sc in &r.scores {
                write!(s, ",{},{},{}", sc.truth, sc.raw, sc.clamped).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Predicts `indices` with dropout off and tabulates every active task.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, indices: &[usize]) -> Result<Evaluation, TrainerError> {
    let video = model.config().modality == Modality::Multimodal;
    let mut rows = Vec::with_capacity(indices.len());
    for idx in sequential_batches(indices, EVAL_BATCH) {
        let (batch, _) = data.batch::<T>(&idx, video)?;
        for (&i, heads) in idx.iter().zip(predict_batch(model, &batch)?) {
            let e = &data.examples[i];
            let scores = heads
                .iter()
                .map(|h| TaskScore {
                    task: h.task,
                    truth: e.label(h.task),
                    raw: h.utterance,
                    clamped: clamp_to_range(h.task, h.utterance),
                })
                .collect();
            rows.push(PredictionRow { utterance_id: e.id.clone(), condition: e.condition, source: e.source, scores });
        }
    }
    let mut ev = Evaluation { rows, summary: EvalSummary::default() };
    ev.summary = EvalSummary::compute(&ev.items());
    Ok(ev)
}

/// `task,t,w_0..w_{T-1}` attention rows and `task,t,h_0..h_{d-1}` latent rows.
pub fn attention_csv(heads: &[HeadPrediction]) -> (String, String) {
    let (mut att, mut lat) = (String::new(), String::new());
    if let Some(h) = heads.first() {
        let cols = |p: &str, n: usize| (0..n).map(|k| format!(",{p}{k}")).collect::<String>();
        writeln!(att, "task,t{}", cols("w", h.len())).unwrap();
        writeln!(lat, "task,t{}", cols("h", h.d_h)).unwrap();
    }
    for h in heads {
        for t in 0..h.len() {
            let row = |v: &[f64]| v.iter().map(|x| format!(",{x}")).collect::<String>();
            writeln!(att, "{},{t}{}", h.task.name(), row(h.attention_row(t))).unwrap();
            writeln!(lat, "{},{t}{}", h.task.name(), row(&h.latent[t * h.d_h..(t + 1) * h.d_h])).unwrap();
        }
    }
    (att, lat)
}

/// Mean of frame scores, the pooling rule the network implements.
pub fn mean_frame_score(h: &HeadPrediction) -> f64 {
    pool_utterance(&h.frames)
}
