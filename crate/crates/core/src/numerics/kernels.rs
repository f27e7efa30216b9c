//! Raw loops behind the graph primitives. All buffers are row-major and
//! the caller has already validated shapes.

use super::Element;

/// `out[b] += a[b] (m x k) * b[b] (k x n)` for every batch slab.
pub(crate) fn matmul_acc<T: Element>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    for p in 0..batch {
        let a = &a[p * m * k..(p + 1) * m * k];
        let b = &b[p * k * n..(p + 1) * k * n];
        let out = &mut out[p * m * n..(p + 1) * m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for q in 0..k {
                let aiq = a[i * k + q];
                if aiq == T::zero() {
                    continue;
                }
                let brow = &b[q * n..(q + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o = *o + aiq * bv;
                }
            }
        }
    }
}

/// `da[b] += g[b] (m x n) * b[b]^T` where `b[b]` is `k x n`.
pub(crate) fn matmul_grad_lhs<T: Element>(
    g: &[T],
    b: &[T],
    da: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    for p in 0..batch {
        let g = &g[p * m * n..(p + 1) * m * n];
        let b = &b[p * k * n..(p + 1) * k * n];
        let da = &mut da[p * m * k..(p + 1) * m * k];
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for q in 0..k {
                let brow = &b[q * n..(q + 1) * n];
                let dot = grow
                    .iter()
                    .zip(brow)
                    .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                da[i * k + q] = da[i * k + q] + dot;
            }
        }
    }
}

/// `db[b] += a[b]^T * g[b]` where `a[b]` is `m x k` and `g[b]` is `m x n`.
pub(crate) fn matmul_grad_rhs<T: Element>(
    a: &[T],
    g: &[T],
    db: &mut [T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    for p in 0..batch {
        let a = &a[p * m * k..(p + 1) * m * k];
        let g = &g[p * m * n..(p + 1) * m * n];
        let db = &mut db[p * k * n..(p + 1) * k * n];
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for q in 0..k {
                let aiq = a[i * k + q];
                if aiq == T::zero() {
                    continue;
                }
                let drow = &mut db[q * n..(q + 1) * n];
                for (d, &gv) in drow.iter_mut().zip(grow) {
                    *d = *d + aiq * gv;
                }
            }
        }
    }
}

/// Moves `data` laid out as `shape` into the axis order `axes`.
pub(crate) fn permute<T: Element>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Softmax of one row restricted to its first `visible` entries; the rest
/// are written as exact zeros.
pub(crate) fn softmax_row<T: Element>(x: &[T], out: &mut [T], visible: usize) {
    let max = x[..visible]
        .iter()
        .fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for (o, &v) in out[..visible].iter_mut().zip(&x[..visible]) {
        *o = (v - max).exp();
        total = total + *o;
    }
    for o in &mut out[..visible] {
        *o = *o / total;
    }
    for o in &mut out[visible..] {
        *o = T::zero();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_swaps_axes() {
        // 2 x 3 -> 3 x 2
        let data = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let out = permute(&data, &[2, 3], &[1, 0]);
        assert_eq!(out, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn permute_rank3_roundtrip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let p = permute(&data, &[2, 3, 4], &[2, 0, 1]);
        let back = permute(&p, &[4, 2, 3], &[1, 2, 0]);
        assert_eq!(back, data);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
    }
}
