use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction. Moments are kept per trainable parameter in
/// the parameter's own precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One update of `params[k]` with `grads[k]`; missing gradients count as zero.
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
        let c1 = T::of(1.0 - ADAM_BETA1.powi(self.step as i32));
        let c2 = T::of(1.0 - ADAM_BETA2.powi(self.step as i32));
        let (lr, eps, one) = (T::of(lr), T::of(ADAM_EPS), T::one());
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let g = grads[k].map(|g| g.data());
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm of all gradients, accumulated in f64.
pub fn global_norm<T: Scalar>(grads: &[Option<&Tensor<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let v = v.to_f64().unwrap();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// epochs fail to improve on the best validation loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        Self { lr, factor, patience, best: None, bad_epochs: 0 }
    }

    /// Feeds one epoch's validation loss and returns the rate for the next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if self.best.is_none_or(|b| val_loss < b) {
            self.best = Some(val_loss);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr *= self.factor;
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, best_epoch: None, bad_epochs: 0 }
    }

    /// Returns true when `val_loss` is a new best.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if self.best.is_none_or(|b| val_loss < b) {
            self.best = Some(val_loss);
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plateau_on_flat_sequence() {
        let mut s = PlateauScheduler::new(1e-4, 0.1, 2);
        let lrs: Vec<f64> = (0..6).map(|_| s.step(1.0)).collect();
        assert_eq!(lrs[..2], [1e-4, 1e-4]);
        assert!((lrs[2] - 1e-5).abs() < 1e-20, "{lrs:?}");
        assert!((lrs[4] - 1e-6).abs() < 1e-21, "{lrs:?}");
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // bias-corrected first step is lr * g / (|g| + eps)
        let mut p = Tensor::<f64>::from_vec(&[3], vec![1.0, -2.0, 0.5]);
        let g = Tensor::<f64>::from_vec(&[3], vec![0.3, -4.0, 0.0]);
        let mut adam = Adam::<f64>::new(&[&[3]]);
        adam.update(&mut [&mut p], &[Some(&g)], 0.01);
        let want = [1.0 - 0.01 * 0.3 / (0.3 + 1e-8), -2.0 + 0.01 * 4.0 / (4.0 + 1e-8), 0.5];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} {b}");
        }
    }

    #[test]
    fn adam_matches_scalar_recurrence() {
        let mut p = Tensor::<f64>::from_vec(&[1], vec![0.0]);
        let mut adam = Adam::<f64>::new(&[&[1]]);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            let gv = (t as f64 * 0.7).sin();
            adam.update(&mut [&mut p], &[Some(&Tensor::from_vec(&[1], vec![gv]))], 1e-3);
            m = 0.9 * m + 0.1 * gv;
            v = 0.999 * v + 0.001 * gv * gv;
            x -= 1e-3 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((p.data()[0] - x).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn schedule_is_a_function_of_the_sequence(seq in prop::collection::vec(0.0f64..2.0, 1..30), patience in 1usize..5) {
            let run = || {
                let mut s = PlateauScheduler::new(1e-3, 0.1, patience);
                seq.iter().map(|&v| s.step(v)).collect::<Vec<_>>()
            };
            let a = run();
            prop_assert_eq!(&a, &run());
            // non-increasing, and every drop is exactly one factor
            for w in a.windows(2) {
                prop_assert!(w[1] == w[0] || (w[1] - w[0] * 0.1).abs() < 1e-18);
            }
        }

        #[test]
        fn early_stop_best_is_the_running_minimum(seq in prop::collection::vec(0.0f64..2.0, 1..30)) {
            let mut e = EarlyStopping::new(3);
            for (i, &v) in seq.iter().enumerate() {
                e.observe(i, v);
                let min = seq[..=i].iter().cloned().fold(f64::INFINITY, f64::min);
                prop_assert_eq!(e.best, Some(min));
                prop_assert_eq!(seq[e.best_epoch.unwrap()], min);
            }
        }
    }
}
