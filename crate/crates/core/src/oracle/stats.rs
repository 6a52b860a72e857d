use num_traits::Float;
use serde::Serialize;

use super::{OracleError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalStats<T> {
    pub lcc: T,
    pub srcc: T,
    pub mse: T,
}

/// Which argument of [`eval_stats`] made a correlation undefined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Predicted,
    Truth,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Predicted => "predicted",
            Side::Truth => "truth",
        })
    }
}

fn mean<T: Float>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &b| a + b) / T::from(v.len()).unwrap()
}

fn pearson<T: Float>(x: &[T], y: &[T]) -> Result<T> {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (a - mx, b - my);
        sxy = sxy + a * b;
        sxx = sxx + a * a;
        syy = syy + b * b;
    }
    if sxy.is_nan() {
        return Err(OracleError::InvalidValue("non-finite input to correlation".into()));
    }
    if sxx == T::zero() {
        return Err(OracleError::DegenerateCorrelation(Side::Predicted));
    }
    if syy == T::zero() {
        return Err(OracleError::DegenerateCorrelation(Side::Truth));
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Ok(r.max(-T::one()).min(T::one()))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks<T: Float>(v: &[T]) -> Vec<T> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("NaN in rank input"));
    let mut ranks = vec![T::zero(); v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && v[idx[j]] == v[idx[i]] {
            j += 1;
        }
        // positions i..j hold ranks i+1..=j
        let r = T::from(i + j + 1).unwrap() / T::from(2).unwrap();
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        i = j;
    }
    ranks
}

/// Pearson correlation, Spearman rank correlation with average-rank ties, and
/// mean squared error of `predicted` against `truth`.
pub fn eval_stats<T: Float>(predicted: &[T], truth: &[T]) -> Result<EvalStats<T>> {
    if predicted.len() != truth.len() {
        return Err(OracleError::InvalidValue(format!(
            "length mismatch: {} predictions vs {} targets",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.len() < 2 {
        return Err(OracleError::InvalidValue(format!("need at least 2 pairs, got {}", predicted.len())));
    }
    if predicted.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(OracleError::InvalidValue("non-finite input to eval_stats".into()));
    }
    let lcc = pearson(predicted, truth)?;
    let srcc = pearson(&average_ranks(predicted), &average_ranks(truth))?;
    let mse = predicted.iter().zip(truth).fold(T::zero(), |a, (&p, &t)| a + (p - t) * (p - t))
        / T::from(predicted.len()).unwrap();
    Ok(EvalStats { lcc, srcc, mse })
}
