//! Forward/backward kernels for the structured ops: convolutions, pooling,
//! batch normalization and strided index shuffles.

use crate::scalar::{gemm, MatView, Scalar};

/// Visits every multi-index of `shape` in row-major order, passing the
/// matching offset into a buffer laid out with `src_strides`.
fn walk(shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let nd = shape.len();
    if nd == 0 {
        f(0, 0);
        return;
    }
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    let last = nd - 1;
    let (inner_n, inner_s) = (shape[last], src_strides[last]);
    let mut out = 0usize;
    loop {
        let mut o = off;
        for _ in 0..inner_n {
            f(out, o);
            out += 1;
            o += inner_s;
        }
        // carry into the outer dimensions
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= src_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// `out[i] = src[offset(i)]` for the strided view `(out_shape, src_strides)`.
pub(crate) fn gather_strided<T: Scalar>(src: &[T], out_shape: &[usize], src_strides: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(out_shape.iter().product());
    walk(out_shape, src_strides, |_, o| out.push(src[o]));
    out
}

/// Adjoint of [`gather_strided`]: `dst[offset(i)] += grad[i]`.
pub(crate) fn scatter_add_strided<T: Scalar>(dst: &mut [T], grad: &[T], out_shape: &[usize], dst_strides: &[usize]) {
    walk(out_shape, dst_strides, |i, o| dst[o] += grad[i]);
}

/// Strides that read `in_shape` broadcast (right-aligned) to `out_shape`.
pub(crate) fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    assert!(in_shape.len() <= out_shape.len(), "broadcast {in_shape:?} -> {out_shape:?}");
    let in_str = super::strides(in_shape);
    let lead = out_shape.len() - in_shape.len();
    (0..out_shape.len())
        .map(|d| {
            if d < lead {
                0
            } else {
                let k = d - lead;
                assert!(
                    in_shape[k] == out_shape[d] || in_shape[k] == 1,
                    "cannot broadcast {in_shape:?} -> {out_shape:?}"
                );
                if in_shape[k] == 1 {
                    0
                } else {
                    in_str[k]
                }
            }
        })
        .collect()
}

// ---------------------------------------------------------------- conv 2d

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeom {
    pub fn new(x: &[usize], w: &[usize], stride: (usize, usize), pad: (usize, usize)) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be [N, C, H, W]");
        assert_eq!(w.len(), 4, "conv2d kernel must be [O, C, kh, kw]");
        assert_eq!(x[1], w[1], "conv2d channel mismatch");
        let (h, wd) = (x[2], x[3]);
        let (kh, kw) = (w[2], w[3]);
        assert!(h + 2 * pad.0 >= kh && wd + 2 * pad.1 >= kw, "conv2d kernel larger than padded input");
        Self {
            n: x[0],
            c: x[1],
            h,
            w: wd,
            o: w[0],
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
            ho: (h + 2 * pad.0 - kh) / stride.0 + 1,
            wo: (wd + 2 * pad.1 - kw) / stride.1 + 1,
        }
    }

    fn ck(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn howo(&self) -> usize {
        self.ho * self.wo
    }

    /// Output columns `[lo, hi)` whose input column `ow*sw + kj - pw` is in range.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        valid_range(self.wo, self.sw, kj, self.pw, self.w)
    }
}

fn valid_range(n_out: usize, stride: usize, k: usize, pad: usize, n_in: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad < n_in
    let hi = if n_in + pad <= k { 0 } else { ((n_in + pad - k - 1) / stride + 1).min(n_out) };
    (lo.min(hi), hi)
}

fn im2col2d<T: Scalar>(x: &[T], g: &Conv2dGeom, col: &mut [T]) {
    let hw = g.howo();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (rlo, rhi) = valid_range(g.ho, g.sh, ki, g.ph, g.h);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let (clo, chi) = g.valid_cols(kj);
                for oh in 0..g.ho {
                    let d = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if oh < rlo || oh >= rhi {
                        d.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let ih = oh * g.sh + ki - g.ph;
                    let src = &plane[ih * g.w..(ih + 1) * g.w];
                    d[..clo].iter_mut().for_each(|v| *v = T::zero());
                    d[chi..].iter_mut().for_each(|v| *v = T::zero());
                    if chi <= clo {
                        continue;
                    }
                    if g.sw == 1 {
                        let start = clo + kj - g.pw;
                        d[clo..chi].copy_from_slice(&src[start..start + (chi - clo)]);
                    } else {
                        for ow in clo..chi {
                            d[ow] = src[ow * g.sw + kj - g.pw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im2d<T: Scalar>(col: &[T], g: &Conv2dGeom, dx: &mut [T]) {
    let hw = g.howo();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (rlo, rhi) = valid_range(g.ho, g.sh, ki, g.ph, g.h);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * hw..(row + 1) * hw];
                let (clo, chi) = g.valid_cols(kj);
                for oh in rlo..rhi {
                    let ih = oh * g.sh + ki - g.ph;
                    let d = &mut plane[ih * g.w..(ih + 1) * g.w];
                    let s = &src[oh * g.wo..(oh + 1) * g.wo];
                    for ow in clo..chi {
                        d[ow * g.sw + kj - g.pw] += s[ow];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &Conv2dGeom) -> Vec<T> {
    let (ck, hw) = (g.ck(), g.howo());
    let mut out = vec![T::zero(); g.n * g.o * hw];
    let mut col = vec![T::zero(); ck * hw];
    let in_sz = g.c * g.h * g.w;
    for n in 0..g.n {
        im2col2d(&x[n * in_sz..(n + 1) * in_sz], g, &mut col);
        let dst = &mut out[n * g.o * hw..(n + 1) * g.o * hw];
        gemm(MatView::new(w, g.o, ck), MatView::new(&col, ck, hw), dst, hw, false);
        if let Some(b) = bias {
            for (o, &bv) in b.iter().enumerate() {
                dst[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &Conv2dGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (ck, hw) = (g.ck(), g.howo());
    let in_sz = g.c * g.h * g.w;
    let mut dx = need.0.then(|| vec![T::zero(); g.n * in_sz]);
    let mut dw = need.1.then(|| vec![T::zero(); g.o * ck]);
    let mut db = need.2.then(|| vec![T::zero(); g.o]);
    let mut col = vec![T::zero(); ck * hw];
    for n in 0..g.n {
        let dyn_ = &dy[n * g.o * hw..(n + 1) * g.o * hw];
        if let Some(db) = db.as_mut() {
            for o in 0..g.o {
                db[o] += dyn_[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col2d(&x[n * in_sz..(n + 1) * in_sz], g, &mut col);
            gemm(MatView::new(dyn_, g.o, hw), MatView::t(&col, hw, ck), dw, ck, true);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(MatView::t(w, ck, g.o), MatView::new(dyn_, g.o, hw), &mut col, hw, false);
            col2im2d(&col, g, &mut dx[n * in_sz..(n + 1) * in_sz]);
        }
    }
    ConvGrads { dx, dw, db }
}

// ---------------------------------------------------------------- conv 3d

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: (usize, usize, usize),
    pub s: (usize, usize, usize),
    pub p: (usize, usize, usize),
    pub dout: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv3dGeom {
    pub fn new(x: &[usize], w: &[usize], s: (usize, usize, usize), p: (usize, usize, usize)) -> Self {
        assert_eq!(x.len(), 5, "conv3d input must be [N, C, D, H, W]");
        assert_eq!(w.len(), 5, "conv3d kernel must be [O, C, kd, kh, kw]");
        assert_eq!(x[1], w[1], "conv3d channel mismatch");
        let k = (w[2], w[3], w[4]);
        assert!(x[2] + 2 * p.0 >= k.0 && x[3] + 2 * p.1 >= k.1 && x[4] + 2 * p.2 >= k.2);
        Self {
            n: x[0],
            c: x[1],
            d: x[2],
            h: x[3],
            w: x[4],
            o: w[0],
            k,
            s,
            p,
            dout: (x[2] + 2 * p.0 - k.0) / s.0 + 1,
            ho: (x[3] + 2 * p.1 - k.1) / s.1 + 1,
            wo: (x[4] + 2 * p.2 - k.2) / s.2 + 1,
        }
    }

    fn ck(&self) -> usize {
        self.c * self.k.0 * self.k.1 * self.k.2
    }

    fn plane_geom(&self) -> Conv2dGeom {
        Conv2dGeom {
            n: 1,
            c: 1,
            h: self.h,
            w: self.w,
            o: self.o,
            kh: self.k.1,
            kw: self.k.2,
            sh: self.s.1,
            sw: self.s.2,
            ph: self.p.1,
            pw: self.p.2,
            ho: self.ho,
            wo: self.wo,
        }
    }
}

/// Column block for one output depth slice: rows `(c, kd, kh, kw)`.
/// Rows whose input depth falls in the padding are zero.
fn im2col3d_slice<T: Scalar>(x: &[T], g: &Conv3dGeom, od: usize, col: &mut [T]) {
    let pg = g.plane_geom();
    let hw = g.ho * g.wo;
    let khw = g.k.1 * g.k.2;
    let plane = g.h * g.w;
    for c in 0..g.c {
        for kd in 0..g.k.0 {
            let rows = &mut col[((c * g.k.0 + kd) * khw) * hw..((c * g.k.0 + kd + 1) * khw) * hw];
            let id = (od * g.s.0 + kd) as isize - g.p.0 as isize;
            if id < 0 || id as usize >= g.d {
                rows.iter_mut().for_each(|v| *v = T::zero());
                continue;
            }
            let src = &x[(c * g.d + id as usize) * plane..(c * g.d + id as usize + 1) * plane];
            im2col2d(src, &pg, rows);
        }
    }
}

fn col2im3d_slice<T: Scalar>(col: &[T], g: &Conv3dGeom, od: usize, dx: &mut [T]) {
    let pg = g.plane_geom();
    let hw = g.ho * g.wo;
    let khw = g.k.1 * g.k.2;
    let plane = g.h * g.w;
    for c in 0..g.c {
        for kd in 0..g.k.0 {
            let id = (od * g.s.0 + kd) as isize - g.p.0 as isize;
            if id < 0 || id as usize >= g.d {
                continue;
            }
            let rows = &col[((c * g.k.0 + kd) * khw) * hw..((c * g.k.0 + kd + 1) * khw) * hw];
            let dst = &mut dx[(c * g.d + id as usize) * plane..(c * g.d + id as usize + 1) * plane];
            col2im2d(rows, &pg, dst);
        }
    }
}

pub(crate) fn conv3d_forward<T: Scalar>(x: &[T], w: &[T], g: &Conv3dGeom) -> Vec<T> {
    let (ck, hw) = (g.ck(), g.ho * g.wo);
    let out_sample = g.o * g.dout * hw;
    let in_sample = g.c * g.d * g.h * g.w;
    let mut out = vec![T::zero(); g.n * out_sample];
    let mut col = vec![T::zero(); ck * hw];
    for n in 0..g.n {
        let xs = &x[n * in_sample..(n + 1) * in_sample];
        for od in 0..g.dout {
            im2col3d_slice(xs, g, od, &mut col);
            let base = n * out_sample + od * hw;
            let end = n * out_sample + (g.o - 1) * g.dout * hw + od * hw + hw;
            gemm(MatView::new(w, g.o, ck), MatView::new(&col, ck, hw), &mut out[base..end], g.dout * hw, false);
        }
    }
    out
}

pub(crate) fn conv3d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &Conv3dGeom,
    need: (bool, bool),
) -> ConvGrads<T> {
    let (ck, hw) = (g.ck(), g.ho * g.wo);
    let out_sample = g.o * g.dout * hw;
    let in_sample = g.c * g.d * g.h * g.w;
    let mut dx = need.0.then(|| vec![T::zero(); g.n * in_sample]);
    let mut dw = need.1.then(|| vec![T::zero(); g.o * ck]);
    let mut col = vec![T::zero(); ck * hw];
    let ld = g.dout * hw;
    for n in 0..g.n {
        for od in 0..g.dout {
            let base = n * out_sample + od * hw;
            let end = n * out_sample + (g.o - 1) * ld + od * hw + hw;
            let dys = &dy[base..end];
            if let Some(dw) = dw.as_mut() {
                im2col3d_slice(&x[n * in_sample..(n + 1) * in_sample], g, od, &mut col);
                gemm(MatView::new(dys, g.o, hw).with_ld(ld), MatView::t(&col, hw, ck), dw, ck, true);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(MatView::t(w, ck, g.o), MatView::new(dys, g.o, hw).with_ld(ld), &mut col, hw, false);
                col2im3d_slice(&col, g, od, &mut dx[n * in_sample..(n + 1) * in_sample]);
            }
        }
    }
    ConvGrads { dx, dw, db: None }
}

// ---------------------------------------------------------------- pooling

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub nc: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn new(x: &[usize], k: usize, s: usize, p: usize) -> Self {
        assert_eq!(x.len(), 4, "max_pool2d input must be [N, C, H, W]");
        assert!(p < k, "pool padding must be smaller than the window");
        Self {
            nc: x[0] * x[1],
            h: x[2],
            w: x[3],
            k,
            s,
            p,
            ho: (x[2] + 2 * p - k) / s + 1,
            wo: (x[3] + 2 * p - k) / s + 1,
        }
    }
}

/// Returns pooled values and, per output, the flat input index of the max.
/// Ties resolve to the first element in scan order.
pub(crate) fn max_pool2d_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.nc * g.ho * g.wo);
    let mut arg = Vec::with_capacity(g.nc * g.ho * g.wo);
    for plane in 0..g.nc {
        let base = plane * g.h * g.w;
        for oh in 0..g.ho {
            for ow in 0..g.wo {
                let mut best = T::neg_infinity();
                let mut bi = usize::MAX;
                for ki in 0..g.k {
                    let ih = (oh * g.s + ki) as isize - g.p as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    for kj in 0..g.k {
                        let iw = (ow * g.s + kj) as isize - g.p as isize;
                        if iw < 0 || iw as usize >= g.w {
                            continue;
                        }
                        let idx = base + ih as usize * g.w + iw as usize;
                        if bi == usize::MAX || x[idx] > best {
                            best = x[idx];
                            bi = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(bi);
            }
        }
    }
    (out, arg)
}

// ---------------------------------------------------------------- batch norm

/// Per-channel statistics over `[N, C, S]`, restricted to samples whose
/// mask entry is set. Returns `(mean, biased var, valid count)`.
pub(crate) fn channel_stats<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    s: usize,
    mask: Option<&[bool]>,
) -> (Vec<T>, Vec<T>, usize) {
    let valid: Vec<usize> = (0..n).filter(|&i| mask.is_none_or(|m| m[i])).collect();
    let count = valid.len() * s;
    assert!(count > 0, "batch norm needs at least one valid element per channel");
    let inv = T::one() / T::of(count as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for &i in &valid {
            acc += x[(i * c + ch) * s..(i * c + ch + 1) * s].iter().copied().sum::<T>();
        }
        let mu = acc * inv;
        let mut sq = T::zero();
        for &i in &valid {
            for &v in &x[(i * c + ch) * s..(i * c + ch + 1) * s] {
                let d = v - mu;
                sq += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = sq * inv;
    }
    (mean, var, count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn walk_permutes_like_transpose() {
        // [2,3] read as its transpose [3,2]
        let src = [0.0f64, 1.0, 2.0, 3.0, 4.0, 5.0];
        let out = gather_strided(&src, &[3, 2], &[1, 3]);
        assert_eq!(out, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn broadcast_strides_zero_singleton_dims() {
        assert_eq!(broadcast_strides(&[3, 1], &[2, 3, 4]), vec![0, 1, 0]);
        assert_eq!(broadcast_strides(&[4], &[2, 4]), vec![0, 1]);
    }

    #[test]
    fn valid_range_matches_bruteforce() {
        for n_in in 1..9 {
            for k in 0..5 {
                for pad in 0..3 {
                    for stride in 1..4 {
                        if n_in + 2 * pad < 5 {
                            continue;
                        }
                        let n_out = (n_in + 2 * pad - 5) / stride + 1;
                        let (lo, hi) = valid_range(n_out, stride, k, pad, n_in);
                        for o in 0..n_out {
                            let i = (o * stride + k) as isize - pad as isize;
                            let ok = i >= 0 && (i as usize) < n_in;
                            assert_eq!(ok, o >= lo && o < hi, "n_in={n_in} k={k} pad={pad} s={stride} o={o}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let g = Conv2dGeom::new(&[2, 2, 5, 6], &[3, 2, 3, 3], (1, 2), (1, 1));
        let x: Vec<f64> = (0..2 * 2 * 5 * 6).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 5 % 11) as f64) * 0.1 - 0.5).collect();
        let b = [0.5, -1.0, 2.0];
        let y = conv2d_forward(&x, &w, Some(&b), &g);
        for n in 0..2 {
            for o in 0..3 {
                for oh in 0..g.ho {
                    for ow in 0..g.wo {
                        let mut acc = b[o];
                        for c in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ih = (oh + ki) as isize - 1;
                                    let iw = (ow * 2 + kj) as isize - 1;
                                    if ih < 0 || iw < 0 || ih >= 5 || iw >= 6 {
                                        continue;
                                    }
                                    acc += x[((n * 2 + c) * 5 + ih as usize) * 6 + iw as usize]
                                        * w[((o * 2 + c) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                        let got = y[((n * 3 + o) * g.ho + oh) * g.wo + ow];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
