use super::ModelError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source position and blend weight for output row `t` of `t_out` rows
/// drawn from `m` source rows: `(lo, frac)` meaning
/// `(1 - frac) * src[lo] + frac * src[lo + 1]`.
pub fn interp_knot(t: usize, t_out: usize, m: usize) -> (usize, f64) {
    if m == 1 || t_out == 1 {
        return (0, 0.0);
    }
    // integer numerator keeps knots and endpoints exact
    let pos = (t * (m - 1)) as f64 / (t_out - 1) as f64;
    let lo = (pos.floor() as usize).min(m - 1);
    let frac = pos - lo as f64;
    if lo == m - 1 {
        (lo, 0.0)
    } else {
        (lo, frac)
    }
}

/// `[t_out, m]` linear-interpolation matrix, row-major.
pub fn interpolation_matrix(m: usize, t_out: usize) -> Vec<f64> {
    let mut w = vec![0.0; t_out * m];
    for t in 0..t_out {
        let (lo, frac) = interp_knot(t, t_out, m);
        w[t * m + lo] += 1.0 - frac;
        if frac > 0.0 {
            w[t * m + lo + 1] += frac;
        }
    }
    w
}

/// Stretches `[M, d]` embeddings to `[t_out, d]` by linear interpolation
/// along time; the endpoints land exactly on the first and last rows.
pub fn upsample_time<T: Scalar>(emb: &Tensor<T>, t_out: usize) -> Result<Tensor<T>, ModelError> {
    let s = emb.shape();
    if s.len() != 2 || s[0] == 0 || t_out == 0 {
        return Err(ModelError::Shape(format!("upsample_time needs [M >= 1, d] and T >= 1, got {s:?} -> {t_out}")));
    }
    let (m, d) = (s[0], s[1]);
    let mut out = Vec::with_capacity(t_out * d);
    for t in 0..t_out {
        let (lo, frac) = interp_knot(t, t_out, m);
        if frac == 0.0 {
            out.extend_from_slice(emb.row(lo));
        } else {
            let (a, b) = (emb.row(lo), emb.row(lo + 1));
            let f = T::of(frac);
            out.extend(a.iter().zip(b).map(|(&x, &y)| x + (y - x) * f));
        }
    }
    Ok(Tensor::from_vec(&[t_out, d], out))
}

/// Concatenates a `[T, F]` spectrogram with a `[T, d_v]` visual block; a
/// missing block becomes zeros of width `d_v`.
pub fn fuse<T: Scalar>(spec: &Tensor<T>, visual: Option<&Tensor<T>>, d_v: usize) -> Result<Tensor<T>, ModelError> {
    let s = spec.shape();
    if s.len() != 2 {
        return Err(ModelError::Shape(format!("spectrogram must be [T, F], got {s:?}")));
    }
    let (t, f) = (s[0], s[1]);
    if let Some(v) = visual {
        if v.shape() != [t, d_v] {
            return Err(ModelError::Shape(format!("visual block {:?} does not match T = {t}, d_v = {d_v}", v.shape())));
        }
    }
    let mut out = Vec::with_capacity(t * (f + d_v));
    for i in 0..t {
        out.extend_from_slice(spec.row(i));
        match visual {
            Some(v) => out.extend_from_slice(v.row(i)),
            None => out.extend(std::iter::repeat_n(T::zero(), d_v)),
        }
    }
    Ok(Tensor::from_vec(&[t, f + d_v], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_lengths_match() {
        let e = Tensor::<f64>::from_vec(&[4, 3], (0..12).map(|v| v as f64 * 0.37).collect());
        assert_eq!(upsample_time(&e, 4).unwrap(), e);
    }

    #[test]
    fn midpoint_of_two_rows() {
        let e = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 6.0]);
        let u = upsample_time(&e, 3).unwrap();
        assert_eq!(u.row(1), &[2.0, 4.0]);
        assert_eq!(u.row(2), &[3.0, 6.0]);
    }

    #[test]
    fn one_second_shapes_and_broadcast() {
        let e = Tensor::<f32>::zeros(&[25, 64]);
        assert_eq!(upsample_time(&e, 61).unwrap().shape(), &[61, 64]);
        let one = Tensor::<f64>::from_vec(&[1, 2], vec![5.0, 7.0]);
        let u = upsample_time(&one, 3).unwrap();
        assert!(u.data().chunks(2).all(|r| r == [5.0, 7.0]));
    }

    #[test]
    fn matrix_rows_are_convex() {
        for (m, t) in [(25, 61), (7, 7), (1, 5), (6, 9), (30, 2)] {
            let w = interpolation_matrix(m, t);
            for r in w.chunks(m) {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-15);
                assert!(r.iter().all(|&v| v >= 0.0));
            }
            assert_eq!(w[0], 1.0);
            assert_eq!(w[(t - 1) * m + m - 1], 1.0);
        }
    }

    #[test]
    fn fuse_layout() {
        let spec = Tensor::<f64>::from_vec(&[61, 257], vec![1.0; 61 * 257]);
        let f = fuse(&spec, None, 512).unwrap();
        assert_eq!(f.shape(), &[61, 769]);
        assert!(f.row(3)[..257].iter().all(|&v| v == 1.0));
        assert!(f.row(3)[257..].iter().all(|&v| v == 0.0));
        let vis = Tensor::<f64>::zeros(&[60, 512]);
        assert!(fuse(&spec, Some(&vis), 512).is_err());
    }
}
