//! Central finite-difference comparison for reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};

/// Step used for central differences on 64-bit values.
pub const FD_STEP: f64 = 1e-4;
/// Accepted relative disagreement between analytic and numeric gradients.
pub const FD_REL_TOL: f64 = 1e-3;
/// Below this magnitude both gradients are treated as zero.
pub const FD_ABS_FLOOR: f64 = 1e-7;

/// `|a - n| / max(|a|, |n|)`, or 0 when both sit under [`FD_ABS_FLOOR`].
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < FD_ABS_FLOOR {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn record(&mut self, label: &str, analytic: f64, numeric: f64, tol: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_err {
            self.max_rel_err = e;
        }
        if !(e <= tol) {
            self.failures.push(format!("{label}: analytic {analytic:.6e} numeric {numeric:.6e} rel {e:.3e}"));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.failures.extend(other.failures);
    }
}

/// Entry indices to probe: all of them when `max_entries` covers the
/// tensor, otherwise a seeded sample.
pub fn probe_indices(len: usize, max_entries: usize, seed: u64) -> Vec<usize> {
    if len <= max_entries {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, len, max_entries).into_vec();
    idx.sort_unstable();
    idx
}

/// Checks `d f / d inputs` where `f` builds a scalar from input nodes.
pub fn check_inputs(
    inputs: &[Tensor<f64>],
    max_entries: usize,
    seed: u64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> GradCheckReport {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);

    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };

    let mut report = GradCheckReport::default();
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        for i in probe_indices(x.len(), max_entries, seed.wrapping_add(k as u64)) {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] = x.data()[i] + FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] = x.data()[i] - FD_STEP;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(&format!("input{k}[{i}]"), analytic.data()[i], numeric, FD_REL_TOL);
        }
    }
    report
}

fn seeded_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Scalar with a distinct random weight on every entry of `y`.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let w = g.constant(seeded_tensor(g.shape(y), seed));
    let p = g.mul(y, w);
    g.sum(p)
}

/// Gradient checks of every graph primitive on inputs drawn from `seed`.
/// Rectifier inputs are kept at least 0.05 from zero and max-pool inputs
/// are a permutation of a 0.01-spaced ladder, so the step never crosses a
/// kink or changes a winner.
pub fn primitive_suite(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    use super::BatchNormMode;
    use rand::seq::SliceRandom;
    let s = |k: u64| seed.wrapping_mul(1_000).wrapping_add(k);
    let r = |shape: &[usize], k: u64| seeded_tensor(shape, s(k));
    let mut out = Vec::new();

    out.push((
        "add, sub, mul, scale, add_scalar, tanh, sigmoid",
        check_inputs(&[r(&[3, 4], 1), r(&[3, 4], 2)], 64, s(3), |g, v| {
            let a = g.add(v[0], v[1]);
            let d = g.sub(a, v[1]);
            let m = g.mul(d, v[1]);
            let t = g.tanh(m);
            let sg = g.sigmoid(v[0]);
            let q = g.mul(t, sg);
            let sc = g.scale(q, 1.7);
            let o = g.add_scalar(sc, 0.3);
            weighted_sum(g, o, s(4))
        }),
    ));
    let x = r(&[24], 5).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v });
    out.push((
        "relu",
        check_inputs(&[x], 64, s(6), |g, v| {
            let y = g.relu(v[0]);
            weighted_sum(g, y, s(7))
        }),
    ));
    out.push((
        "matmul",
        check_inputs(&[r(&[3, 4], 8), r(&[4, 2], 9)], 64, s(10), |g, v| {
            let m = g.matmul(v[0], v[1]);
            weighted_sum(g, m, s(11))
        }),
    ));
    out.push((
        "bmm",
        check_inputs(&[r(&[2, 3, 4], 12), r(&[2, 5, 4], 13), r(&[2, 4, 5], 14)], 64, s(15), |g, v| {
            let a = g.bmm(v[0], v[1], true);
            let b = g.bmm(v[0], v[2], false);
            let u = g.mul(a, b);
            weighted_sum(g, u, s(16))
        }),
    ));
    out.push((
        "permute, concat_last, slice_last, reshape, select, stack, sum_axis, broadcast_to",
        check_inputs(&[r(&[2, 3, 4], 17), r(&[2, 3, 2], 18)], 64, s(19), |g, v| {
            let p = g.permute(v[0], &[2, 0, 1]);
            let p = g.permute(p, &[1, 2, 0]);
            let c = g.concat_last(&[p, v[1]]);
            let sl = g.slice_last(c, 1, 4);
            let re = g.reshape(sl, &[6, 4]);
            let sel = g.select(v[0], 1, 2);
            let st = g.stack(&[sel, sel], 1);
            let sa = g.sum_axis(st, 2);
            let bc = g.broadcast_to(sa, &[3, 2, 2]);
            let w1 = weighted_sum(g, re, s(20));
            let w2 = weighted_sum(g, bc, s(21));
            g.add(w1, w2)
        }),
    ));
    let maps = vec![vec![Some(1), Some(0), Some(0), Some(1), Some(2)], vec![Some(2), None, Some(1), Some(2), None]];
    out.push((
        "gather_axis1",
        check_inputs(&[r(&[2, 3, 2], 22)], 64, s(23), |g, v| {
            let y = g.gather_axis1(v[0], maps.clone());
            weighted_sum(g, y, s(24))
        }),
    ));
    out.push((
        "conv2d",
        check_inputs(&[r(&[2, 2, 5, 7], 25), r(&[3, 2, 3, 3], 26), r(&[3], 27)], 40, s(28), |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), (1, 2), (1, 1));
            weighted_sum(g, y, s(29))
        }),
    ));
    out.push((
        "conv3d",
        check_inputs(&[r(&[1, 2, 4, 6, 6], 30), r(&[2, 2, 3, 3, 3], 31)], 40, s(32), |g, v| {
            let y = g.conv3d(v[0], v[1], (1, 2, 2), (1, 1, 1));
            weighted_sum(g, y, s(33))
        }),
    ));
    let mut ladder: Vec<f64> = (0..50).map(|i| i as f64 * 0.01 - 0.25).collect();
    ladder.shuffle(&mut ChaCha8Rng::seed_from_u64(s(34)));
    out.push((
        "max_pool2d",
        check_inputs(&[Tensor::from_vec(&[1, 2, 5, 5], ladder)], 50, s(35), |g, v| {
            let y = g.max_pool2d(v[0], 3, 2, 1);
            weighted_sum(g, y, s(36))
        }),
    ));
    let mask = [true, false, true, true];
    out.push((
        "batch_norm (training, masked)",
        check_inputs(&[r(&[4, 3, 2, 2], 37), r(&[3], 38), r(&[3], 39)], 48, s(40), |g, v| {
            let y = g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train { mask: Some(&mask) }, 1e-5);
            weighted_sum(g, y, s(41))
        }),
    ));
    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 2.0]);
    out.push((
        "batch_norm (eval)",
        check_inputs(&[r(&[4, 3, 2, 2], 42), r(&[3], 43), r(&[3], 44)], 48, s(45), |g, v| {
            let y = g.batch_norm(v[0], v[1], v[2], BatchNormMode::Eval { mean: &mean, var: &var }, 1e-5);
            weighted_sum(g, y, s(46))
        }),
    ));
    let key_mask = [true, true, false, true, true, true, true, true];
    out.push((
        "masked_softmax",
        check_inputs(&[r(&[2, 3, 4], 47)], 64, s(48), |g, v| {
            let y = g.masked_softmax(v[0], Some(&key_mask));
            weighted_sum(g, y, s(49))
        }),
    ));
    out.push((
        "mean_spatial, sum, mean",
        check_inputs(&[r(&[2, 3, 2, 2], 50)], 64, s(51), |g, v| {
            let m = g.mean_spatial(v[0]);
            let sa = g.sum_axis(m, 0);
            let w = weighted_sum(g, sa, s(52));
            let mm = g.mean(v[0]);
            g.add(w, mm)
        }),
    ));
    out
}
