use num_traits::Float;

use super::ModelError;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Utterance score as the arithmetic mean of frame scores.
pub fn pool_utterance<T: Float>(frames: &[T]) -> T {
    assert!(!frames.is_empty(), "pool_utterance needs at least one frame");
    // offsets from the first frame, so constant input comes back exactly
    let x0 = frames[0];
    let (mut s, mut c) = (T::zero(), T::zero());
    for &f in &frames[1..] {
        let v = f - x0;
        let t = s + v;
        c = c + if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    x0 + (s + c) / T::from(frames.len()).unwrap()
}

/// `(truth - utterance)^2 + alpha * mean_t (truth - frame_t)^2`.
pub fn loss_task<T: Float>(truth: T, utterance_pred: T, frames: &[T], alpha: T) -> T {
    let d = truth - utterance_pred;
    let frame_term = pool_utterance(&frames.iter().map(|&f| (truth - f) * (truth - f)).collect::<Vec<_>>());
    d * d + alpha * frame_term
}

/// `beta * l_quality + gamma * l_intelligibility`.
pub fn loss_total<T: Float>(l_quality: T, l_intelligibility: T, beta: T, gamma: T) -> Result<T, ModelError> {
    if beta < T::zero() || gamma < T::zero() {
        return Err(ModelError::Config("task weights must be non-negative".into()));
    }
    if beta == T::zero() && gamma == T::zero() {
        return Err(ModelError::Config("task weights beta and gamma are both zero".into()));
    }
    // a zero-weighted task contributes nothing, even if its loss is not finite
    let q = if beta == T::zero() { T::zero() } else { beta * l_quality };
    let i = if gamma == T::zero() { T::zero() } else { gamma * l_intelligibility };
    Ok(q + i)
}

/// Batch task loss on the graph: mean over utterances of [`loss_task`],
/// with padded frames (per `lengths`) excluded from the frame mean.
/// `frames` is `[B, T]`, `utterance` is `[B]`.
pub fn task_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    frames: Var,
    utterance: Var,
    truth: &[f64],
    lengths: &[usize],
    alpha: f64,
) -> Var {
    let shape = g.shape(frames).to_vec();
    let (b, t) = (shape[0], shape[1]);
    assert_eq!(truth.len(), b, "one target per utterance");
    let y = g.constant(Tensor::from_f64(&[b], truth));
    let d = g.sub(y, utterance);
    let utt = g.mul(d, d);
    let y_frames: Vec<f64> = truth.iter().flat_map(|&v| std::iter::repeat_n(v, t)).collect();
    let yf = g.constant(Tensor::from_f64(&[b, t], &y_frames));
    let df = g.sub(yf, frames);
    let sq = g.mul(df, df);
    let w: Vec<f64> = lengths
        .iter()
        .flat_map(|&len| (0..t).map(move |i| if i < len { 1.0 / len as f64 } else { 0.0 }))
        .collect();
    let wv = g.constant(Tensor::from_f64(&[b, t], &w));
    let masked = g.mul(sq, wv);
    let frame_term = g.sum_axis(masked, 1);
    let frame_term = g.scale(frame_term, T::of(alpha));
    let per_utt = g.add(utt, frame_term);
    g.mean(per_utt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_case() {
        assert_eq!(loss_task(3.0f64, 2.5, &[2.0, 3.0], 1.0), 0.75);
        assert_eq!(loss_task(3.0f64, 3.0, &[3.0, 3.0], 1.0), 0.0);
        assert_eq!(loss_task(3.0f64, 2.5, &[2.0, 3.0], 0.0), 0.25);
    }

    #[test]
    fn weighted_sum() {
        assert_eq!(loss_total(0.75f64, 0.25, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(loss_total(0.75f64, 0.25, 1.0, 0.0).unwrap(), 0.75);
        assert!((loss_total(0.1f64, 0.2, 2.0, 3.0).unwrap() - 0.8).abs() < 1e-15);
        assert!(loss_total(0.1f64, 0.2, 0.0, 0.0).is_err());
    }

    #[test]
    fn pooling() {
        assert!((pool_utterance(&[0.6f64, 0.8, 1.0]) - 0.8).abs() < 1e-15);
        assert_eq!(pool_utterance(&[0.3f64; 17]), 0.3);
    }

    #[test]
    fn graph_loss_matches_scalar_form() {
        let mut g = Graph::<f64>::new();
        // second utterance has one padded frame holding junk
        let frames = g.input(Tensor::from_vec(&[2, 3], vec![2.0, 3.0, 4.0, 1.0, 1.5, 99.0]));
        let utt = g.input(Tensor::from_vec(&[2], vec![2.5, 1.25]));
        let l = task_loss_graph(&mut g, frames, utt, &[3.0, 1.0], &[3, 2], 0.5);
        let want = (loss_task(3.0, 2.5, &[2.0, 3.0, 4.0], 0.5) + loss_task(1.0, 1.25, &[1.0, 1.5], 0.5)) / 2.0;
        assert!((g.value(l).item() - want).abs() < 1e-15);
        let grads = g.backward(l);
        assert_eq!(grads.get(frames).unwrap().data()[5], 0.0);
    }
}
