use super::checkpoint::{Checkpoint, EpochMetrics};
use super::data::{epoch_batches, sequential_batches, Dataset};
use super::optim::{global_norm, Adam, EarlyStopping, PlateauScheduler};
use super::{TrainConfig, TrainerError};
use crate::datagen::{derive_seed, Split};
use crate::model::{Batch, Modality, Mode, Model, ModelConfig};
use crate::oracle::Task;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Passed to the epoch callback after every completed epoch.
pub struct EpochEvent<'a> {
    pub metrics: &'a EpochMetrics,
    /// State after this epoch; enough to resume.
    pub last: &'a Checkpoint,
    /// True when this epoch set a new best validation loss, so `last` is
    /// also the best checkpoint.
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochMetrics>,
    /// Training-mode total loss of every optimizer step run by this call.
    pub step_losses: Vec<f64>,
    pub stopped_early: bool,
}

struct State<T: Scalar> {
    model: Model<T>,
    adam: Adam<T>,
    cfg: TrainConfig,
    scheduler: PlateauScheduler,
    early: EarlyStopping,
    epoch: usize,
    steps: usize,
    history: Vec<EpochMetrics>,
    best: Option<Checkpoint>,
}

impl<T: Scalar> State<T> {
    fn capture(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.model,
            &self.adam,
            &self.cfg,
            self.cfg.seed,
            self.epoch,
            self.steps,
            &self.scheduler,
            &self.early,
            &self.history,
        )
    }
}

fn split_indices(data: &Dataset) -> Result<(Vec<usize>, Vec<usize>), TrainerError> {
    let (train, val) = (data.indices(Split::Train), data.indices(Split::Validation));
    if train.is_empty() || val.is_empty() {
        return Err(TrainerError::Data(format!(
            "need non-empty train and validation subsets, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    Ok((train, val))
}

fn check_data(cfg: &ModelConfig, data: &Dataset) -> Result<(), TrainerError> {
    if data.n_freq != cfg.n_freq {
        return Err(TrainerError::Data(format!("features have {} bins, model expects {}", data.n_freq, cfg.n_freq)));
    }
    if cfg.modality == Modality::Multimodal && !data.has_video() {
        return Err(TrainerError::Data("multimodal training needs a dataset loaded with video".into()));
    }
    Ok(())
}

/// Trains from scratch. `on_epoch` sees every epoch's state, e.g. to write
/// checkpoints and the metrics log.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochEvent<'_>) -> Result<(), TrainerError>,
) -> Result<TrainOutcome, TrainerError> {
    cfg.validate()?;
    model_cfg.validate()?;
    check_data(model_cfg, data)?;
    let (train_idx, _) = split_indices(data)?;
    let mut model = Model::<f32>::new(model_cfg.clone(), cfg.seed)?;
    if cfg.label_mean_bias {
        for &task in model_cfg.tasks.tasks() {
            model.set_head_bias(task, data.label_mean(&train_idx, task));
        }
    }
    let shapes: Vec<Vec<usize>> =
        model.params().trainable_ids().map(|id| model.params().get(id).shape().to_vec()).collect();
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let state = State {
        adam: Adam::new(&refs),
        model,
        cfg: cfg.clone(),
        scheduler: PlateauScheduler::new(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience),
        early: EarlyStopping::new(cfg.early_stop_patience),
        epoch: 0,
        steps: 0,
        history: Vec::new(),
        best: None,
    };
    run(state, data, on_epoch)
}

/// Continues from `last`, the state written after some epoch, with `best`
/// the best checkpoint written up to then.
pub fn resume(
    last: &Checkpoint,
    best: Option<Checkpoint>,
    data: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochEvent<'_>) -> Result<(), TrainerError>,
) -> Result<TrainOutcome, TrainerError> {
    check_data(&last.model_config, data)?;
    if last.early_stop.best.is_some() && best.is_none() {
        return Err(TrainerError::Checkpoint("resuming needs the best checkpoint as well".into()));
    }
    let model: Model<f32> = last.model()?;
    let state = State {
        adam: last.adam(&model)?,
        model,
        cfg: last.train_config.clone(),
        scheduler: last.scheduler.clone(),
        early: last.early_stop.clone(),
        epoch: last.epoch,
        steps: last.steps,
        history: last.history.clone(),
        best,
    };
    run(state, data, on_epoch)
}

/// Size-weighted mean eval-mode total loss over `indices`.
pub fn mean_loss<T: Scalar>(model: &Model<T>, data: &Dataset, indices: &[usize], batch_size: usize) -> Result<f64, TrainerError> {
    let video = model.config().modality == Modality::Multimodal;
    let mut sum = 0.0;
    for idx in sequential_batches(indices, batch_size) {
        let (batch, targets) = data.batch::<T>(&idx, video)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch, Mode::Eval)?;
        let (l, _) = model.loss(&mut g, &out, &targets, &batch.lengths)?;
        sum += g.value(l).item().to_f64().unwrap() * idx.len() as f64;
    }
    Ok(sum / indices.len() as f64)
}

/// Where a step sits in the run, for divergence reports.
struct StepAt {
    epoch: usize,
    step: usize,
    dropout_seed: u64,
}

/// One clipped Adam step on `batch`; returns the training-mode total loss.
fn optimizer_step<T: Scalar>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    batch: &Batch<T>,
    targets: &[(Task, Vec<f64>)],
    at: StepAt,
    clip_norm: f64,
    lr: f64,
) -> Result<f64, TrainerError> {
    let diverged = |value| TrainerError::Divergence { epoch: at.epoch, step: at.step, value };
    let mut g = Graph::new();
    let out = model.forward(&mut g, batch, Mode::Train { dropout_seed: at.dropout_seed })?;
    let (l, _) = model.loss(&mut g, &out, targets, &batch.lengths)?;
    let lv = g.value(l).item().to_f64().unwrap();
    if !lv.is_finite() {
        return Err(diverged(lv));
    }
    let grads = g.backward(l);
    let ids: Vec<usize> = model.params().trainable_ids().collect();
    let raw: Vec<Option<&Tensor<T>>> = ids.iter().map(|&id| grads.param(id)).collect();
    let norm = global_norm(&raw);
    if !norm.is_finite() {
        return Err(diverged(norm));
    }
    let clipped: Option<Vec<Option<Tensor<T>>>> = (norm > clip_norm).then(|| {
        let c = T::of(clip_norm / norm);
        raw.iter().map(|g| g.map(|g| g.map(|v| v * c))).collect()
    });
    let used: Vec<Option<&Tensor<T>>> = match &clipped {
        Some(c) => c.iter().map(Option::as_ref).collect(),
        None => raw,
    };
    model.update_running_stats(&g, &out);
    adam.update(&mut model.params_mut().trainable_values_mut(), &used, lr);
    Ok(lv)
}

/// Full-batch training on `indices` for up to `max_steps` steps, stopping
/// once the step loss drops below `target`. Dropout, clipping, the learning
/// rate and the seed come from `cfg`; the schedule and early stopping are
/// not used. Returns the loss of every step run.
pub fn overfit(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &Dataset,
    indices: &[usize],
    max_steps: usize,
    target: f64,
) -> Result<Vec<f64>, TrainerError> {
    cfg.validate()?;
    model_cfg.validate()?;
    check_data(model_cfg, data)?;
    let mut model = Model::<f32>::new(model_cfg.clone(), cfg.seed)?;
    if cfg.label_mean_bias {
        for &task in model_cfg.tasks.tasks() {
            model.set_head_bias(task, data.label_mean(indices, task));
        }
    }
    let shapes: Vec<Vec<usize>> =
        model.params().trainable_ids().map(|id| model.params().get(id).shape().to_vec()).collect();
    let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut adam = Adam::new(&refs);
    let (batch, targets) = data.batch::<f32>(indices, model_cfg.modality == Modality::Multimodal)?;
    let mut losses = Vec::new();
    for step in 0..max_steps {
        let at = StepAt { epoch: 0, step, dropout_seed: derive_seed(cfg.seed, &format!("dropout/{step}")) };
        let lv = optimizer_step(&mut model, &mut adam, &batch, &targets, at, cfg.grad_clip_norm, cfg.learning_rate)?;
        losses.push(lv);
        if lv < target {
            break;
        }
    }
    Ok(losses)
}

fn run<T: Scalar>(
    mut st: State<T>,
    data: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochEvent<'_>) -> Result<(), TrainerError>,
) -> Result<TrainOutcome, TrainerError> {
    let (train_idx, val_idx) = split_indices(data)?;
    let video = st.model.config().modality == Modality::Multimodal;
    let seed = st.cfg.seed;
    let mut step_losses = Vec::new();
    let mut stopped_early = st.early.should_stop();
    let mut last = st.capture();
    let out_of_steps = |steps: usize, cfg: &TrainConfig| cfg.max_steps.is_some_and(|m| steps >= m);

    while st.epoch < st.cfg.max_epochs && !stopped_early && !out_of_steps(st.steps, &st.cfg) {
        let epoch = st.epoch;
        let lr = st.scheduler.lr;
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for idx in epoch_batches(data, &train_idx, st.cfg.batch_size, seed, epoch) {
            if out_of_steps(st.steps, &st.cfg) {
                break;
            }
            let (batch, targets) = data.batch::<T>(&idx, video)?;
            let at = StepAt { epoch, step: st.steps, dropout_seed: derive_seed(seed, &format!("dropout/{}", st.steps)) };
            let lv = optimizer_step(&mut st.model, &mut st.adam, &batch, &targets, at, st.cfg.grad_clip_norm, lr)?;
            st.steps += 1;
            step_losses.push(lv);
            loss_sum += lv * idx.len() as f64;
            seen += idx.len();
        }
        let val_loss = mean_loss(&st.model, data, &val_idx, st.cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(TrainerError::Divergence { epoch, step: st.steps, value: val_loss });
        }
        let metrics = EpochMetrics { epoch, train_loss: loss_sum / seen.max(1) as f64, val_loss, lr };
        st.history.push(metrics.clone());
        let improved = st.early.observe(epoch, val_loss);
        st.scheduler.step(val_loss);
        st.epoch = epoch + 1;
        last = st.capture();
        if improved {
            st.best = Some(last.clone());
        }
        on_epoch(&EpochEvent { metrics: &metrics, last: &last, improved })?;
        stopped_early = st.early.should_stop();
    }
    let best = st.best.take().unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { best, last, history: st.history, step_losses, stopped_early })
}

/// `epoch,train_loss,val_loss,lr` lines.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for m in history {
        s.push_str(&format!("{},{},{},{}\n", m.epoch, m.train_loss, m.val_loss, m.lr));
    }
    s
}
