//! Finite-difference verification of the composed model.

use super::{Batch, Mode, Model};
use crate::oracle::Task;
use crate::tensor::gradcheck::{probe_indices, GradCheckReport, FD_REL_TOL, FD_STEP};
use crate::tensor::{ActivationPattern, Graph};

fn total_loss(
    model: &Model<f64>,
    batch: &Batch<f64>,
    targets: &[(Task, Vec<f64>)],
    mode: Mode,
    pattern: &ActivationPattern,
) -> f64 {
    let mut g = Graph::replaying(pattern.clone());
    let out = model.forward(&mut g, batch, mode).expect("forward");
    let (l, _) = model.loss(&mut g, &out, targets, &batch.lengths).expect("loss");
    g.value(l).item()
}

/// Compares reverse-mode gradients of the total loss with central
/// differences on up to `per_tensor` entries of every trainable parameter,
/// and of the spectrogram and video inputs when `inputs` is set.
///
/// The perturbed passes replay the rectifier and max-pool pattern of the
/// unperturbed pass. Without that, a 1e-4 step flips a few of the thousands
/// of gates in the network and the difference quotient picks up the jump.
pub fn check_model_gradients(
    model: &Model<f64>,
    batch: &Batch<f64>,
    targets: &[(Task, Vec<f64>)],
    mode: Mode,
    per_tensor: usize,
    inputs: bool,
    seed: u64,
) -> GradCheckReport {
    let mut g = Graph::recording();
    let out = model.forward_tracked(&mut g, batch, mode).expect("forward");
    let (l, _) = model.loss(&mut g, &out, targets, &batch.lengths).expect("loss");
    let grads = g.backward(l);
    let pattern = g.take_pattern().expect("recording graph");

    let mut report = GradCheckReport::default();
    let mut probe = model.clone();
    let ids: Vec<usize> = model.params().trainable_ids().collect();
    for (k, &id) in ids.iter().enumerate() {
        let name = model.params().entry(id).name.clone();
        let base = model.params().get(id).clone();
        let analytic = grads.param(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; base.len()]);
        for i in probe_indices(base.len(), per_tensor, seed.wrapping_mul(1000).wrapping_add(k as u64)) {
            probe.params_mut().get_mut(id).data_mut()[i] = base.data()[i] + FD_STEP;
            let up = total_loss(&probe, batch, targets, mode, &pattern);
            probe.params_mut().get_mut(id).data_mut()[i] = base.data()[i] - FD_STEP;
            let down = total_loss(&probe, batch, targets, mode, &pattern);
            probe.params_mut().get_mut(id).data_mut()[i] = base.data()[i];
            report.record(&format!("{name}[{i}]"), analytic[i], (up - down) / (2.0 * FD_STEP), FD_REL_TOL);
        }
    }

    if inputs {
        let spec_grad = grads.get(out.spec_input).expect("spectrogram gradient").data().to_vec();
        let mut b = batch.clone();
        for i in probe_indices(batch.spec.len(), per_tensor, seed ^ 0x5bec) {
            let v = batch.spec.data()[i];
            b.spec.data_mut()[i] = v + FD_STEP;
            let up = total_loss(model, &b, targets, mode, &pattern);
            b.spec.data_mut()[i] = v - FD_STEP;
            let down = total_loss(model, &b, targets, mode, &pattern);
            b.spec.data_mut()[i] = v;
            report.record(&format!("spectrogram[{i}]"), spec_grad[i], (up - down) / (2.0 * FD_STEP), FD_REL_TOL);
        }
        if let (Some(vx), Some(video)) = (out.video_input, batch.video.as_ref()) {
            let vg = grads.get(vx).expect("video gradient").data().to_vec();
            for i in probe_indices(video.frames.len(), per_tensor, seed ^ 0x71de0) {
                let v = video.frames.data()[i];
                let set = |b: &mut Batch<f64>, x: f64| b.video.as_mut().unwrap().frames.data_mut()[i] = x;
                set(&mut b, v + FD_STEP);
                let up = total_loss(model, &b, targets, mode, &pattern);
                set(&mut b, v - FD_STEP);
                let down = total_loss(model, &b, targets, mode, &pattern);
                set(&mut b, v);
                report.record(&format!("video[{i}]"), vg[i], (up - down) / (2.0 * FD_STEP), FD_REL_TOL);
            }
        }
    }
    report
}

/// Random padded batch for checks: utterance `i` has `lengths[i]` frames and
/// uses clip `i % clips.len()` with `clips[..]` frames. Targets are drawn in
/// the label ranges for every task.
pub fn random_batch(
    cfg: &super::ModelConfig,
    lengths: &[usize],
    clips: &[usize],
    seed: u64,
) -> (Batch<f64>, Vec<(Task, Vec<f64>)>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (b, t_max, f) = (lengths.len(), *lengths.iter().max().unwrap(), cfg.n_freq);
    let mut spec = vec![0.0; b * t_max * f];
    for (bi, &len) in lengths.iter().enumerate() {
        for v in &mut spec[bi * t_max * f..(bi * t_max + len) * f] {
            *v = rng.random_range(0.0..3.0);
        }
    }
    let video = (cfg.modality == super::Modality::Multimodal).then(|| {
        let (m_max, s) = (*clips.iter().max().unwrap(), cfg.frame_size);
        let mut px = vec![0.0; clips.len() * m_max * s * s];
        for (u, &m) in clips.iter().enumerate() {
            for v in &mut px[u * m_max * s * s..(u * m_max + m) * s * s] {
                *v = rng.random_range(0.0..1.0);
            }
        }
        super::VideoBatch {
            frames: crate::tensor::Tensor::from_vec(&[clips.len(), m_max, s, s], px),
            lengths: clips.to_vec(),
            index: (0..b).map(|i| i % clips.len()).collect(),
        }
    });
    let targets = vec![
        (Task::Quality, (0..b).map(|_| rng.random_range(1.0..4.5)).collect()),
        (Task::Intelligibility, (0..b).map(|_| rng.random_range(0.0..1.0)).collect()),
    ];
    (Batch { spec: crate::tensor::Tensor::from_vec(&[b, t_max, f], spec), lengths: lengths.to_vec(), video }, targets)
}
