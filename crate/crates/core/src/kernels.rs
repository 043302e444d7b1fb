//! Slice-level numeric kernels shared by the autodiff graph.
//!
//! Every reduction runs in a fixed order so results are bitwise reproducible.

use crate::tensor::Scalar;

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// `y += a * x`
#[inline]
pub fn axpy<T: Scalar>(a: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `out[m,n] = a[m,k] @ b[k,n]`
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_nn_acc(a, b, m, k, n, &mut out);
    out
}

/// `out[m,n] += a[m,k] @ b[k,n]`
pub fn matmul_nn_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut i = 0;
    // Four output rows at a time so each row of `b` is loaded once per block.
    while i + 4 <= m {
        let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let a0 = a[i * k + p];
            let a1 = a[(i + 1) * k + p];
            let a2 = a[(i + 2) * k + p];
            let a3 = a[(i + 3) * k + p];
            for j in 0..n {
                let bv = brow[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], orow);
        }
        i += 1;
    }
}

/// `out[m,n] = a[m,k] @ b[n,k]^T`
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `out[m,n] += a[k,m]^T @ b[k,n]`
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        let arow = &a[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            axpy(av, brow, &mut out[i * n..(i + 1) * n]);
        }
    }
}

/// `out[m,n] += a[m,k] @ b[n,k]^T`
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// In-place numerically stable softmax of one row. Entries with
/// `masked[j] == true` get probability exactly zero.
pub fn softmax_row<T: Scalar>(row: &mut [T], valid: usize) {
    let mx = row[..valid].iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row[..valid].iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row[..valid].iter_mut() {
        *v *= inv;
    }
    for v in row[valid..].iter_mut() {
        *v = T::zero();
    }
}

/// Multi-head scaled dot-product attention over contiguous segments.
///
/// `q`, `k`, `v` are `[tokens, heads*head_dim]`; tokens in different segments
/// never attend to each other. Returns the output and the attention
/// probabilities (one `len x len` block per segment and head) for backward.
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    heads: usize,
    head_dim: usize,
    segments: &[usize],
    causal: bool,
) -> (Vec<T>, Vec<T>) {
    let width = heads * head_dim;
    let total: usize = segments.iter().sum();
    let mut out = vec![T::zero(); total * width];
    let probs_len: usize = segments.iter().map(|l| l * l * heads).sum();
    let mut probs = Vec::with_capacity(probs_len);
    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
    let mut start = 0;
    let mut qh = Vec::new();
    let mut kh = Vec::new();
    let mut vh = Vec::new();
    for &len in segments {
        for h in 0..heads {
            gather_head(q, start, len, width, h, head_dim, &mut qh);
            gather_head(k, start, len, width, h, head_dim, &mut kh);
            gather_head(v, start, len, width, h, head_dim, &mut vh);
            let mut s = matmul_nt(&qh, &kh, len, head_dim, len);
            for i in 0..len {
                let row = &mut s[i * len..(i + 1) * len];
                for x in row.iter_mut() {
                    *x *= scale;
                }
                softmax_row(row, if causal { i + 1 } else { len });
            }
            let o = matmul_nn(&s, &vh, len, len, head_dim);
            scatter_head(&o, start, len, width, h, head_dim, &mut out);
            probs.extend_from_slice(&s);
        }
        start += len;
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    heads: usize,
    head_dim: usize,
    segments: &[usize],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let width = heads * head_dim;
    let total: usize = segments.iter().sum();
    let mut dq = vec![T::zero(); total * width];
    let mut dk = vec![T::zero(); total * width];
    let mut dv = vec![T::zero(); total * width];
    let scale = T::one() / T::from_usize(head_dim).unwrap().sqrt();
    let mut start = 0;
    let mut poff = 0;
    let (mut qh, mut kh, mut vh, mut doh) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &len in segments {
        for h in 0..heads {
            gather_head(q, start, len, width, h, head_dim, &mut qh);
            gather_head(k, start, len, width, h, head_dim, &mut kh);
            gather_head(v, start, len, width, h, head_dim, &mut vh);
            gather_head(dout, start, len, width, h, head_dim, &mut doh);
            let p = &probs[poff..poff + len * len];
            poff += len * len;
            // dP = dO V^T, then dS = P * (dP - rowsum(dP * P))
            let mut ds = matmul_nt(&doh, &vh, len, head_dim, len);
            for i in 0..len {
                let prow = &p[i * len..(i + 1) * len];
                let drow = &mut ds[i * len..(i + 1) * len];
                let c = dot(prow, drow);
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - c) * scale;
                }
            }
            let dqh = matmul_nn(&ds, &kh, len, len, head_dim);
            let mut dkh = vec![T::zero(); len * head_dim];
            matmul_tn_acc(&ds, &qh, len, len, head_dim, &mut dkh);
            let mut dvh = vec![T::zero(); len * head_dim];
            matmul_tn_acc(p, &doh, len, len, head_dim, &mut dvh);
            scatter_head(&dqh, start, len, width, h, head_dim, &mut dq);
            scatter_head(&dkh, start, len, width, h, head_dim, &mut dk);
            scatter_head(&dvh, start, len, width, h, head_dim, &mut dv);
        }
        start += len;
    }
    (dq, dk, dv)
}

fn gather_head<T: Scalar>(
    x: &[T],
    start: usize,
    len: usize,
    width: usize,
    h: usize,
    hd: usize,
    out: &mut Vec<T>,
) {
    out.clear();
    for t in start..start + len {
        let base = t * width + h * hd;
        out.extend_from_slice(&x[base..base + hd]);
    }
}

fn scatter_head<T: Scalar>(
    src: &[T],
    start: usize,
    len: usize,
    width: usize,
    h: usize,
    hd: usize,
    out: &mut [T],
) {
    for (i, t) in (start..start + len).enumerate() {
        let base = t * width + h * hd;
        out[base..base + hd].copy_from_slice(&src[i * hd..(i + 1) * hd]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let nn = matmul_nn(&a, &b, m, k, n);
        // transpose b into [n,k]
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let nt = matmul_nt(&a, &bt, m, k, n);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut tn = vec![0.0; m * n];
        matmul_tn_acc(&at, &b, m, k, n, &mut tn);
        for i in 0..m * n {
            assert!((nn[i] - nt[i]).abs() < 1e-12);
            assert!((nn[i] - tn[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_masks_tail() {
        let mut r = vec![1.0f64, 2.0, 3.0];
        softmax_row(&mut r, 2);
        assert_eq!(r[2], 0.0);
        assert!((r[0] + r[1] - 1.0).abs() < 1e-15);
    }
}
