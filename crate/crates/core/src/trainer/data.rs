use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainerError;
use crate::datagen::{derive_seed, read_manifest, Split, UtteranceRecord, VideoClip};
use crate::dsp::wav::read_wav;
use crate::dsp::{stft_magnitude, NoisePartition, StftConfig, Waveform};
use crate::model::{Batch, VideoBatch};
use crate::oracle::{LabelPair, Source, Task};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Network input features: `log(1 + |X|)` of the default STFT, row per frame.
pub fn log_spectrogram(wave: &Waveform) -> Result<(Vec<f64>, usize), TrainerError> {
    let spec = stft_magnitude(wave, StftConfig::default())?;
    if spec.frames() == 0 {
        return Err(TrainerError::Data(format!("{} samples give no STFT frame", wave.len())));
    }
    Ok((spec.mags().iter().map(|m| m.ln_1p()).collect(), spec.frames()))
}

#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub split: Split,
    pub condition: NoisePartition,
    pub source: Source,
    pub labels: LabelPair,
    /// `frames x n_freq` features.
    pub spec: Vec<f64>,
    pub frames: usize,
    /// Index into the dataset's clips; shared by every mixture of one clean utterance.
    pub clip: usize,
}

impl Example {
    pub fn label(&self, task: Task) -> f64 {
        match task {
            Task::Quality => self.labels.quality(),
            Task::Intelligibility => self.labels.intelligibility(),
        }
    }
}

/// Features and videos of a manifest, decoded once.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub n_freq: usize,
    pub examples: Vec<Example>,
    clip_paths: Vec<String>,
    /// Decoded only when the dataset was loaded with video.
    clips: Vec<Option<VideoClip>>,
}

impl Dataset {
    /// Reads `manifest` (paths relative to its directory). Videos are decoded
    /// when `with_video` is set.
    pub fn load(manifest: impl AsRef<Path>, with_video: bool) -> Result<Self, TrainerError> {
        let manifest = manifest.as_ref();
        let root = manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let records = read_manifest(manifest)?;
        Self::from_records(&root, &records, with_video)
    }

    pub fn from_records(root: &Path, records: &[UtteranceRecord], with_video: bool) -> Result<Self, TrainerError> {
        let mut clip_index: BTreeMap<String, usize> = BTreeMap::new();
        let mut clip_paths = Vec::new();
        let mut examples = Vec::with_capacity(records.len());
        let mut n_freq = None;
        for r in records {
            let wave = read_wav(root.join(&r.degraded_path))
                .map_err(|e| TrainerError::Data(format!("{}: {e}", r.utterance_id)))?;
            let (spec, frames) = log_spectrogram(&wave)?;
            let f = spec.len() / frames;
            if *n_freq.get_or_insert(f) != f {
                return Err(TrainerError::Data(format!("{}: {f} bins where others have {n_freq:?}", r.utterance_id)));
            }
            let next = clip_paths.len();
            let clip = *clip_index.entry(r.video_path.clone()).or_insert_with(|| {
                clip_paths.push(r.video_path.clone());
                next
            });
            examples.push(Example {
                id: r.utterance_id.clone(),
                split: r.split,
                condition: r.condition,
                source: r.source,
                labels: r.labels,
                spec,
                frames,
                clip,
            });
        }
        let clips = if with_video {
            clip_paths
                .iter()
                .map(|p| VideoClip::read_dir(root.join(p)).map(Some))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            vec![None; clip_paths.len()]
        };
        Ok(Self { n_freq: n_freq.unwrap_or(0), examples, clip_paths, clips })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn has_video(&self) -> bool {
        self.clips.iter().all(Option::is_some)
    }

    pub fn clip_path(&self, clip: usize) -> &str {
        &self.clip_paths[clip]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.examples[i].split == split).collect()
    }

    pub fn find(&self, id: &str) -> Option<usize> {
        self.examples.iter().position(|e| e.id == id)
    }

    /// Mean label of `task` over `indices`.
    pub fn label_mean(&self, indices: &[usize], task: Task) -> f64 {
        indices.iter().map(|&i| self.examples[i].label(task)).sum::<f64>() / indices.len() as f64
    }

    /// Padded batch of `indices` with targets for both tasks. Each clip
    /// appears once in the video tensor however many mixtures use it.
    pub fn batch<T: Scalar>(
        &self,
        indices: &[usize],
        with_video: bool,
    ) -> Result<(Batch<T>, Vec<(Task, Vec<f64>)>), TrainerError> {
        let f = self.n_freq;
        let lengths: Vec<usize> = indices.iter().map(|&i| self.examples[i].frames).collect();
        let t_max = *lengths.iter().max().ok_or_else(|| TrainerError::Data("empty batch".into()))?;
        let mut spec = vec![0.0; indices.len() * t_max * f];
        for (b, &i) in indices.iter().enumerate() {
            let e = &self.examples[i];
            spec[b * t_max * f..][..e.spec.len()].copy_from_slice(&e.spec);
        }
        let video = if with_video {
            let mut uniq: Vec<usize> = Vec::new();
            let index: Vec<usize> = indices
                .iter()
                .map(|&i| {
                    let c = self.examples[i].clip;
                    uniq.iter().position(|&u| u == c).unwrap_or_else(|| {
                        uniq.push(c);
                        uniq.len() - 1
                    })
                })
                .collect();
            let clips: Vec<&VideoClip> = uniq
                .iter()
                .map(|&c| {
                    self.clips[c].as_ref().ok_or_else(|| TrainerError::Data("dataset was loaded without video".into()))
                })
                .collect::<Result<_, _>>()?;
            let m_max = clips.iter().map(|c| c.len()).max().unwrap_or(0);
            let px = clips.first().map_or(0, |c| c.frame(0).len());
            let mut frames = vec![0.0; clips.len() * m_max * px];
            for (u, c) in clips.iter().enumerate() {
                let v = c.normalized();
                frames[u * m_max * px..][..v.len()].copy_from_slice(&v);
            }
            let side = (px as f64).sqrt().round() as usize;
            Some(VideoBatch {
                frames: Tensor::from_f64(&[clips.len(), m_max, side, side], &frames),
                lengths: clips.iter().map(|c| c.len()).collect(),
                index,
            })
        } else {
            None
        };
        let targets = Task::ALL
            .iter()
            .map(|&t| (t, indices.iter().map(|&i| self.examples[i].label(t)).collect()))
            .collect();
        Ok((Batch { spec: Tensor::from_f64(&[indices.len(), t_max, f], &spec), lengths, video }, targets))
    }
}

/// Batches for one epoch. Mixtures of the same clean utterance are kept
/// next to each other so a batch decodes few distinct clips; the order of
/// utterances and of mixtures within each is shuffled from `(seed, epoch)`.
pub fn epoch_batches(data: &Dataset, indices: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch/{epoch}")));
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        groups.entry(data.examples[i].clip).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.shuffle(&mut rng);
    for g in &mut groups {
        g.shuffle(&mut rng);
    }
    let order: Vec<usize> = groups.into_iter().flatten().collect();
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Fixed-order batches for evaluation passes.
pub fn sequential_batches(indices: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    indices.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
