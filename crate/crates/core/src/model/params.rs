use std::f64::consts::PI;

use rand::{Rng, RngCore};

use super::ModelError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Batch-norm running statistics are buffers, not optimized.
    pub trainable: bool,
}

/// Named parameters in creation order. The index of an entry is its id on
/// the autodiff graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> usize {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, trainable });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.entries[id].value
    }

    pub fn entry(&self, id: usize) -> &ParamEntry<T> {
        &self.entries[id]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().enumerate().filter(|(_, e)| e.trainable).map(|(i, _)| i)
    }

    /// Trainable values in id order, for optimizer updates.
    pub fn trainable_values_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.entries.iter_mut().filter(|e| e.trainable).map(|e| &mut e.value).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), trainable: e.trainable })
                .collect(),
        }
    }

    /// Overwrites values from `(name, shape, data)` triples; every stored
    /// parameter must be present with a matching shape.
    pub fn load(&mut self, items: &[(String, Vec<usize>, Vec<f64>)]) -> Result<(), ModelError> {
        if items.len() != self.entries.len() {
            return Err(ModelError::Checkpoint(format!(
                "parameter count {} does not match model ({})",
                items.len(),
                self.entries.len()
            )));
        }
        for (name, shape, data) in items {
            let id = self.id(name).ok_or_else(|| ModelError::Checkpoint(format!("unknown parameter {name}")))?;
            if self.entries[id].value.shape() != &shape[..] {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {name}: shape {shape:?} does not match model {:?}",
                    self.entries[id].value.shape()
                )));
            }
            self.entries[id].value = Tensor::from_f64(shape, data);
        }
        Ok(())
    }
}

/// Uniform in `[-bound, bound]` with `bound = sqrt(gain / fan_in)`; gain 6
/// for layers followed by a rectifier, 3 otherwise.
pub fn fan_in_uniform<T: Scalar>(rng: &mut impl RngCore, shape: &[usize], fan_in: usize, relu: bool) -> Tensor<T> {
    let gain = if relu { 6.0 } else { 3.0 };
    let bound = (gain / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect())
}

fn gaussian(rng: &mut impl RngCore) -> f64 {
    // Box-Muller keeps the draw sequence independent of distribution-crate internals
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// `[n, n]` orthogonal matrix by Gram-Schmidt on a Gaussian draw.
pub fn orthogonal(rng: &mut impl RngCore, n: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| gaussian(rng)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    rows.concat()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 12;
        let q = orthogonal(&mut rng, n);
        for i in 0..n {
            for j in 0..n {
                let d: f64 = (0..n).map(|k| q[i * n + k] * q[j * n + k]).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn store_roundtrip_and_shape_checks() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(&[2, 3]), true);
        s.add("b.running_mean", Tensor::zeros(&[3]), false);
        assert_eq!(s.trainable_ids().collect::<Vec<_>>(), vec![0]);
        let items = vec![("a".to_string(), vec![2, 3], vec![1.0; 6]), ("b.running_mean".to_string(), vec![3], vec![2.0; 3])];
        s.load(&items).unwrap();
        assert_eq!(s.get(0).data()[0], 1.0);
        let bad = vec![("a".to_string(), vec![3, 2], vec![1.0; 6]), items[1].clone()];
        assert!(s.load(&bad).is_err());
    }

    #[test]
    fn fan_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t: Tensor<f64> = fan_in_uniform(&mut rng, &[100, 10], 24, true);
        assert!(t.data().iter().all(|v| v.abs() <= 0.5));
        assert!(t.data().iter().any(|v| v.abs() > 0.4));
    }
}
