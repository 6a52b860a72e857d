use std::collections::HashMap;

use super::kernels::{self, Conv2dGeom, Conv3dGeom, PoolGeom};
use super::{numel, strides, Tensor};
use crate::scalar::{gemm, MatView, Scalar};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How a batch-norm node obtains its normalization statistics.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Batch statistics over samples whose mask entry is set (all when `None`).
    Train { mask: Option<&'a [bool]> },
    /// Fixed running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    /// `mask` is set when the gate came from a replayed pattern.
    Relu { x: Var, mask: Option<Vec<bool>> },
    Sigmoid(Var),
    Tanh(Var),
    BroadcastTo(Var),
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, tb: bool },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    SliceLast { x: Var, start: usize },
    ConcatLast(Vec<Var>),
    Select { x: Var, axis: usize, index: usize },
    Stack { parts: Vec<Var>, axis: usize },
    GatherAxis1 { x: Var, maps: Vec<Vec<Option<usize>>> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom },
    Conv3d { x: Var, w: Var, geom: Conv3dGeom },
    BatchNorm(Box<BnCache<T>>),
    MaxPool2d { x: Var, arg: Vec<usize> },
    MeanSpatial(Var),
    MaskedSoftmax(Var),
}

struct BnCache<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    valid: Option<Vec<bool>>,
    count: usize,
    train: bool,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations. Build a forward pass with the op methods,
/// then call [`Graph::backward`] on a scalar output.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
    pattern: PatternState,
}

/// Rectifier gates and max-pool winners of one forward pass, in op order.
/// Replaying a pattern evaluates the piecewise-smooth function on the piece
/// the recorded pass sat on, which is what its gradient describes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationPattern {
    relu: Vec<Vec<bool>>,
    pool: Vec<Vec<usize>>,
}

#[derive(Default)]
enum PatternState {
    #[default]
    Off,
    Record(ActivationPattern),
    Replay { pattern: ActivationPattern, relu: usize, pool: usize },
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), pattern: PatternState::Off }
    }

    /// Graph that records its activation pattern; see [`Graph::take_pattern`].
    pub fn recording() -> Self {
        Self { pattern: PatternState::Record(ActivationPattern::default()), ..Self::new() }
    }

    /// Graph whose rectifiers and max-pools follow `pattern` instead of
    /// their inputs. Ops must be issued in the recorded order and shapes.
    pub fn replaying(pattern: ActivationPattern) -> Self {
        Self { pattern: PatternState::Replay { pattern, relu: 0, pool: 0 }, ..Self::new() }
    }

    /// Pattern recorded so far by a [`Graph::recording`] graph.
    pub fn take_pattern(&mut self) -> Option<ActivationPattern> {
        match std::mem::take(&mut self.pattern) {
            PatternState::Record(p) => Some(p),
            other => {
                self.pattern = other;
                None
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input; its gradient is available after backward.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds parameter `id`. Repeated binds of the same id share one node.
    pub fn param(&mut self, id: usize, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Batch statistics recorded by a training-mode batch-norm node:
    /// `(mean, unbiased variance)`.
    pub fn batch_norm_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm(c) if c.train => Some((&c.batch_mean, &c.batch_var)),
            _ => None,
        }
    }

    // ------------------------------------------------------------ elementwise

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let value = self.value(a).zip_map(self.value(b), f);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(value, Op::Offset(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let rg = self.rg(x);
        if let PatternState::Replay { pattern, relu, .. } = &mut self.pattern {
            let mask = pattern.relu[*relu].clone();
            *relu += 1;
            let xv = &self.nodes[x.0].value;
            assert_eq!(mask.len(), xv.len(), "replayed rectifier pattern does not match");
            let data = xv.data().iter().zip(&mask).map(|(&v, &m)| if m { v } else { T::zero() }).collect();
            let value = Tensor::from_vec(xv.shape(), data);
            return self.push(value, Op::Relu { x, mask: Some(mask) }, rg);
        }
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        if let PatternState::Record(p) = &mut self.pattern {
            p.relu.push(self.nodes[x.0].value.data().iter().map(|&v| v > T::zero()).collect());
        }
        self.push(value, Op::Relu { x, mask: None }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    /// Numpy-style (right-aligned) broadcast.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Var {
        if self.shape(x) == shape {
            return x;
        }
        let st = kernels::broadcast_strides(self.shape(x), shape);
        let data = kernels::gather_strided(self.value(x).data(), shape, &st);
        let rg = self.rg(x);
        self.push(Tensor::from_vec(shape, data), Op::BroadcastTo(x), rg)
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sums out `axis` (the axis is removed).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, a, inner) = split3(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..a {
                let row = &src[(o * a + i) * inner..(o * a + i + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&oshape, out), Op::SumAxis { x, axis }, rg)
    }

    /// `[N, C, ...] -> [N, C]` mean over every trailing axis.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(shape.len() >= 3, "mean_spatial needs [N, C, ...]");
        let s: usize = shape[2..].iter().product();
        let inv = T::one() / T::of(s as f64);
        let out: Vec<T> = self.value(x).data().chunks(s).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&shape[..2], out), Op::MeanSpatial(x), rg)
    }

    // ------------------------------------------------------------ linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(MatView::new(self.value(a).data(), m, k), MatView::new(self.value(b).data(), k, n), &mut out, n, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b), rg)
    }

    /// `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]^T` when `tb`.
    pub fn bmm(&mut self, a: Var, b: Var, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm {sa:?} x {sb:?}");
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if tb { sb[1] } else { sb[2] };
        assert_eq!(if tb { sb[2] } else { sb[1] }, k, "bmm inner dimension");
        let mut out = vec![T::zero(); bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            let am = MatView::new(&ad[i * m * k..(i + 1) * m * k], m, k);
            let bslice = &bd[i * k * n..(i + 1) * k * n];
            let bm = if tb { MatView::t(bslice, k, n) } else { MatView::new(bslice, k, n) };
            gemm(am, bm, &mut out[i * m * n..(i + 1) * m * n], n, false);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[bs, m, n], out), Op::BatchMatMul { a, b, tb }, rg)
    }

    // ------------------------------------------------------------ shape ops

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        if self.shape(x) == shape {
            return x;
        }
        let value = self.value(x).clone().reshaped(shape);
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(perm.len(), shape.len(), "permute rank");
        let st = strides(&shape);
        let oshape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let ost: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let data = kernels::gather_strided(self.value(x).data(), &oshape, &ost);
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&oshape, data), Op::Permute { x, perm: perm.to_vec() }, rg)
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("slice_last on scalar");
        assert!(start + len <= d, "slice_last out of range");
        let data: Vec<T> =
            self.value(x).data().chunks(d).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut oshape = shape;
        *oshape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&oshape, data), Op::SliceLast { x, start }, rg)
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat_last leading shape mismatch");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut oshape = lead;
        oshape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(&oshape, data), Op::ConcatLast(parts.to_vec()), rg)
    }

    /// Picks entry `index` along `axis` (the axis is removed).
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, a, inner) = split3(&shape, axis);
        assert!(index < a, "select index out of range");
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * a + index) * inner..(o * a + index + 1) * inner]);
        }
        let mut oshape = shape;
        oshape.remove(axis);
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&oshape, data), Op::Select { x, axis, index }, rg)
    }

    /// Stacks equally shaped parts along a new `axis`.
    pub fn stack(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "stack of nothing");
        let pshape = self.shape(parts[0]).to_vec();
        for &p in parts {
            assert_eq!(self.shape(p), &pshape[..], "stack shape mismatch");
        }
        let outer: usize = pshape[..axis].iter().product();
        let inner: usize = pshape[axis..].iter().product();
        let mut data = Vec::with_capacity(outer * parts.len() * inner);
        for o in 0..outer {
            for &p in parts {
                data.extend_from_slice(&self.value(p).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut oshape = pshape;
        oshape.insert(axis, parts.len());
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(&oshape, data), Op::Stack { parts: parts.to_vec(), axis }, rg)
    }

    /// `[B, S, ...] -> [B, S', ...]`: output slot `j` of batch `b` copies
    /// source slot `maps[b][j]`, or zeros for `None`.
    pub fn gather_axis1(&mut self, x: Var, maps: Vec<Vec<Option<usize>>>) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(shape.len() >= 2 && maps.len() == shape[0], "gather_axis1 batch mismatch");
        let s_out = maps.first().map_or(0, |m| m.len());
        assert!(maps.iter().all(|m| m.len() == s_out), "gather_axis1 ragged maps");
        let inner: usize = shape[2..].iter().product();
        let src = self.value(x).data();
        let mut data = vec![T::zero(); shape[0] * s_out * inner];
        for (b, map) in maps.iter().enumerate() {
            for (j, m) in map.iter().enumerate() {
                if let Some(s) = *m {
                    assert!(s < shape[1], "gather_axis1 index out of range");
                    let from = &src[(b * shape[1] + s) * inner..(b * shape[1] + s + 1) * inner];
                    data[(b * s_out + j) * inner..(b * s_out + j + 1) * inner].copy_from_slice(from);
                }
            }
        }
        let mut oshape = shape;
        oshape[1] = s_out;
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&oshape, data), Op::GatherAxis1 { x, maps }, rg)
    }

    // ------------------------------------------------------------ neural ops

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize), pad: (usize, usize)) -> Var {
        let geom = Conv2dGeom::new(self.shape(x), self.shape(w), stride, pad);
        let bias = b.map(|b| self.value(b).data());
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), bias, &geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::from_vec(&[geom.n, geom.o, geom.ho, geom.wo], out), Op::Conv2d { x, w, b, geom }, rg)
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Var {
        let geom = Conv3dGeom::new(self.shape(x), self.shape(w), stride, pad);
        let out = kernels::conv3d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let rg = self.rg(x) || self.rg(w);
        let shape = [geom.n, geom.o, geom.dout, geom.ho, geom.wo];
        self.push(Tensor::from_vec(&shape, out), Op::Conv3d { x, w, geom }, rg)
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize, s: usize, p: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let geom = PoolGeom::new(&shape, k, s, p);
        let (out, arg) = match &mut self.pattern {
            PatternState::Replay { pattern, pool, .. } => {
                let arg = pattern.pool[*pool].clone();
                *pool += 1;
                let xd = self.nodes[x.0].value.data();
                (arg.iter().map(|&a| xd[a]).collect(), arg)
            }
            PatternState::Record(p) => {
                let (out, arg) = kernels::max_pool2d_forward(self.nodes[x.0].value.data(), &geom);
                p.pool.push(arg.clone());
                (out, arg)
            }
            PatternState::Off => kernels::max_pool2d_forward(self.value(x).data(), &geom),
        };
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&[shape[0], shape[1], geom.ho, geom.wo], out), Op::MaxPool2d { x, arg }, rg)
    }

    /// Per-channel normalization of `[N, C, ...]` followed by `gamma * xhat + beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BatchNormMode<'_, T>, eps: T) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(shape.len() >= 2, "batch_norm needs [N, C, ...]");
        let (n, c) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let (mean, var, valid, count, train) = match mode {
            BatchNormMode::Train { mask } => {
                if let Some(m) = mask {
                    assert_eq!(m.len(), n, "batch_norm mask length");
                }
                let (mu, v, count) = kernels::channel_stats(self.value(x).data(), n, c, s, mask);
                (mu, v, mask.map(<[bool]>::to_vec), count, true)
            }
            BatchNormMode::Eval { mean, var } => (mean.to_vec(), var.to_vec(), None, n * s, false),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        assert!(gd.len() == c && bd.len() == c, "batch_norm affine size");
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * s..(i * c + ch + 1) * s;
                for ((h, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&xd[r]) {
                    *h = (v - mean[ch]) * inv_std[ch];
                    *o = gd[ch] * *h + bd[ch];
                }
            }
        }
        let unbias = if count > 1 { T::of(count as f64 / (count as f64 - 1.0)) } else { T::one() };
        let batch_var = var.iter().map(|&v| v * unbias).collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let cache = BnCache { x, gamma, beta, xhat, inv_std, valid, count, train, batch_mean: mean, batch_var };
        self.push(Tensor::from_vec(&shape, out), Op::BatchNorm(Box::new(cache)), rg)
    }

    /// Softmax over the last axis of `[B, R, K]`; keys with a false entry
    /// in `key_mask` (`B * K` flags) get zero weight.
    pub fn masked_softmax(&mut self, x: Var, key_mask: Option<&[bool]>) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 3, "masked_softmax expects [B, R, K]");
        let (b, r, k) = (shape[0], shape[1], shape[2]);
        if let Some(m) = key_mask {
            assert_eq!(m.len(), b * k, "masked_softmax mask length");
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            let keep = |j: usize| key_mask.is_none_or(|m| m[bi * k + j]);
            for ri in 0..r {
                let row = &src[(bi * r + ri) * k..(bi * r + ri + 1) * k];
                let dst = &mut out[(bi * r + ri) * k..(bi * r + ri + 1) * k];
                let mx = (0..k).filter(|&j| keep(j)).map(|j| row[j]).fold(T::neg_infinity(), T::max);
                if mx == T::neg_infinity() {
                    continue;
                }
                let mut z = T::zero();
                for j in 0..k {
                    if keep(j) {
                        dst[j] = (row[j] - mx).exp();
                        z += dst[j];
                    }
                }
                dst.iter_mut().for_each(|v| *v /= z);
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&shape, out), Op::MaskedSoftmax(x), rg)
    }

    // ------------------------------------------------------------ backward

    /// Reverse pass from a single-element output.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Gradients { grads, params }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Tensor<T>) {
        if self.rg(v) {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.acc_with(grads, *a, || g.zip_map(self.value(*b), |d, y| d * y));
                self.acc_with(grads, *b, || g.zip_map(self.value(*a), |d, x| d * x));
            }
            Op::Scale(x, c) => self.acc_with(grads, *x, || g.map(|d| d * *c)),
            Op::Offset(x) => self.acc_with(grads, *x, || g.clone()),
            Op::Relu { x, mask: None } => {
                self.acc_with(grads, *x, || g.zip_map(out, |d, y| if y > T::zero() { d } else { T::zero() }))
            }
            Op::Relu { x, mask: Some(m) } => self.acc_with(grads, *x, || {
                Tensor::from_vec(g.shape(), g.data().iter().zip(m).map(|(&d, &k)| if k { d } else { T::zero() }).collect())
            }),
            Op::Sigmoid(x) => self.acc_with(grads, *x, || g.zip_map(out, |d, y| d * y * (T::one() - y))),
            Op::Tanh(x) => self.acc_with(grads, *x, || g.zip_map(out, |d, y| d * (T::one() - y * y))),
            Op::BroadcastTo(x) => self.acc_with(grads, *x, || {
                let in_shape = self.shape(*x);
                let st = kernels::broadcast_strides(in_shape, out.shape());
                let mut dx = Tensor::zeros(in_shape);
                kernels::scatter_add_strided(dx.data_mut(), g.data(), out.shape(), &st);
                dx
            }),
            Op::SumAll(x) => self.acc_with(grads, *x, || Tensor::full(self.shape(*x), g.item())),
            Op::SumAxis { x, axis } => self.acc_with(grads, *x, || {
                let shape = self.shape(*x);
                let (outer, a, inner) = split3(shape, *axis);
                let mut dx = Vec::with_capacity(outer * a * inner);
                for o in 0..outer {
                    for _ in 0..a {
                        dx.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                Tensor::from_vec(shape, dx)
            }),
            Op::MeanSpatial(x) => self.acc_with(grads, *x, || {
                let shape = self.shape(*x);
                let s: usize = shape[2..].iter().product();
                let inv = T::one() / T::of(s as f64);
                let dx = g.data().iter().flat_map(|&d| std::iter::repeat_n(d * inv, s)).collect();
                Tensor::from_vec(shape, dx)
            }),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                self.acc_with(grads, *a, || {
                    let mut da = vec![T::zero(); m * k];
                    gemm(MatView::new(g.data(), m, n), MatView::t(self.value(*b).data(), n, k), &mut da, k, false);
                    Tensor::from_vec(sa, da)
                });
                self.acc_with(grads, *b, || {
                    let mut db = vec![T::zero(); k * n];
                    gemm(MatView::t(self.value(*a).data(), k, m), MatView::new(g.data(), m, n), &mut db, n, false);
                    Tensor::from_vec(sb, db)
                });
            }
            Op::BatchMatMul { a, b, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = out.shape()[2];
                let (ad, bd, gd) = (self.value(*a).data(), self.value(*b).data(), g.data());
                self.acc_with(grads, *a, || {
                    let mut da = vec![T::zero(); bs * m * k];
                    for i in 0..bs {
                        let bsl = &bd[i * k * n..(i + 1) * k * n];
                        let bm = if *tb { MatView::new(bsl, n, k) } else { MatView::t(bsl, n, k) };
                        let gm = MatView::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                        gemm(gm, bm, &mut da[i * m * k..(i + 1) * m * k], k, false);
                    }
                    Tensor::from_vec(sa, da)
                });
                self.acc_with(grads, *b, || {
                    let mut db = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        let asl = &ad[i * m * k..(i + 1) * m * k];
                        let gsl = &gd[i * m * n..(i + 1) * m * n];
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if *tb {
                            gemm(MatView::t(gsl, n, m), MatView::new(asl, m, k), dst, k, false);
                        } else {
                            gemm(MatView::t(asl, k, m), MatView::new(gsl, m, n), dst, n, false);
                        }
                    }
                    Tensor::from_vec(sb, db)
                });
            }
            Op::Reshape(x) => self.acc_with(grads, *x, || g.clone().reshaped(self.shape(*x))),
            Op::Permute { x, perm } => self.acc_with(grads, *x, || {
                let in_shape = self.shape(*x);
                let st = strides(in_shape);
                let ost: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
                let mut dx = Tensor::zeros(in_shape);
                kernels::scatter_add_strided(dx.data_mut(), g.data(), out.shape(), &ost);
                dx
            }),
            Op::SliceLast { x, start } => self.acc_with(grads, *x, || {
                let in_shape = self.shape(*x);
                let d = *in_shape.last().unwrap();
                let len = *out.shape().last().unwrap();
                let mut dx = Tensor::zeros(in_shape);
                for (dst, src) in dx.data_mut().chunks_mut(d).zip(g.data().chunks(len)) {
                    dst[*start..*start + len].copy_from_slice(src);
                }
                dx
            }),
            Op::ConcatLast(parts) => {
                let total = *out.shape().last().unwrap();
                let mut off = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    self.acc_with(grads, p, || {
                        let data = g.data().chunks(total).flat_map(|row| row[off..off + w].iter().copied()).collect();
                        Tensor::from_vec(self.shape(p), data)
                    });
                    off += w;
                }
            }
            Op::Select { x, axis, index } => self.acc_with(grads, *x, || {
                let shape = self.shape(*x);
                let (outer, a, inner) = split3(shape, *axis);
                let mut dx = Tensor::zeros(shape);
                for o in 0..outer {
                    dx.data_mut()[(o * a + index) * inner..(o * a + index + 1) * inner]
                        .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
                dx
            }),
            Op::Stack { parts, axis } => {
                let pshape = self.shape(parts[0]);
                let outer: usize = pshape[..*axis].iter().product();
                let inner: usize = pshape[*axis..].iter().product();
                let np = parts.len();
                for (pi, &p) in parts.iter().enumerate() {
                    self.acc_with(grads, p, || {
                        let mut d = Vec::with_capacity(outer * inner);
                        for o in 0..outer {
                            d.extend_from_slice(&g.data()[(o * np + pi) * inner..(o * np + pi + 1) * inner]);
                        }
                        Tensor::from_vec(pshape, d)
                    });
                }
            }
            Op::GatherAxis1 { x, maps } => self.acc_with(grads, *x, || {
                let shape = self.shape(*x);
                let inner: usize = shape[2..].iter().product();
                let s_out = out.shape()[1];
                let mut dx = Tensor::zeros(shape);
                for (b, map) in maps.iter().enumerate() {
                    for (j, m) in map.iter().enumerate() {
                        if let Some(s) = *m {
                            let dst = &mut dx.data_mut()[(b * shape[1] + s) * inner..(b * shape[1] + s + 1) * inner];
                            for (d, &v) in dst.iter_mut().zip(&g.data()[(b * s_out + j) * inner..]) {
                                *d += v;
                            }
                        }
                    }
                }
                dx
            }),
            Op::Conv2d { x, w, b, geom } => {
                let need = (self.rg(*x), self.rg(*w), b.is_some_and(|b| self.rg(b)));
                let cg = kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), g.data(), geom, need);
                if let Some(dx) = cg.dx {
                    self.acc(grads, *x, Tensor::from_vec(self.shape(*x), dx));
                }
                if let Some(dw) = cg.dw {
                    self.acc(grads, *w, Tensor::from_vec(self.shape(*w), dw));
                }
                if let (Some(db), Some(b)) = (cg.db, b) {
                    self.acc(grads, *b, Tensor::from_vec(self.shape(*b), db));
                }
            }
            Op::Conv3d { x, w, geom } => {
                let need = (self.rg(*x), self.rg(*w));
                let cg = kernels::conv3d_backward(self.value(*x).data(), self.value(*w).data(), g.data(), geom, need);
                if let Some(dx) = cg.dx {
                    self.acc(grads, *x, Tensor::from_vec(self.shape(*x), dx));
                }
                if let Some(dw) = cg.dw {
                    self.acc(grads, *w, Tensor::from_vec(self.shape(*w), dw));
                }
            }
            Op::MaxPool2d { x, arg } => self.acc_with(grads, *x, || {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (&a, &d) in arg.iter().zip(g.data()) {
                    dx.data_mut()[a] += d;
                }
                dx
            }),
            Op::BatchNorm(c) => self.bn_backward(c, g, grads),
            Op::MaskedSoftmax(x) => self.acc_with(grads, *x, || {
                let k = out.shape()[2];
                let mut dx = Vec::with_capacity(out.len());
                for (yr, gr) in out.data().chunks(k).zip(g.data().chunks(k)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &d)| y * d).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&y, &d)| y * (d - dot)));
                }
                Tensor::from_vec(out.shape(), dx)
            }),
        }
    }

    fn bn_backward(&self, c: &BnCache<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let shape = self.shape(c.x);
        let (n, ch) = (shape[0], shape[1]);
        let s: usize = shape[2..].iter().product();
        let gd = g.data();
        let mut sum_dy = vec![T::zero(); ch];
        let mut sum_dy_xhat = vec![T::zero(); ch];
        for i in 0..n {
            for k in 0..ch {
                let r = (i * ch + k) * s..(i * ch + k + 1) * s;
                for (&d, &h) in gd[r.clone()].iter().zip(&c.xhat[r]) {
                    sum_dy[k] += d;
                    sum_dy_xhat[k] += d * h;
                }
            }
        }
        self.acc_with(grads, c.gamma, || Tensor::from_vec(&[ch], sum_dy_xhat.clone()));
        self.acc_with(grads, c.beta, || Tensor::from_vec(&[ch], sum_dy.clone()));
        self.acc_with(grads, c.x, || {
            let gamma = self.value(c.gamma).data();
            let inv_m = T::one() / T::of(c.count as f64);
            let mut dx = vec![T::zero(); gd.len()];
            for i in 0..n {
                let in_stats = c.train && c.valid.as_ref().is_none_or(|m| m[i]);
                for k in 0..ch {
                    let scale = gamma[k] * c.inv_std[k];
                    let r = (i * ch + k) * s..(i * ch + k + 1) * s;
                    for ((o, &d), &h) in dx[r.clone()].iter_mut().zip(&gd[r.clone()]).zip(&c.xhat[r]) {
                        *o = if in_stats {
                            scale * (d - inv_m * (sum_dy[k] + h * sum_dy_xhat[k]))
                        } else {
                            scale * d
                        };
                    }
                }
            }
            Tensor::from_vec(shape, dx)
        });
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of an input or parameter node; `None` when it does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// `(param id, gradient)` for every bound parameter that reached the root.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.params.iter().filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }

    pub fn param(&self, id: usize) -> Option<&Tensor<T>> {
        self.params.iter().find(|(pid, _)| *pid == id).and_then(|&(_, v)| self.get(v))
    }
}
