//! Loop kernels shared by the tape's forward and backward passes.
//!
//! All kernels are single-threaded with a fixed summation order, so results
//! are bit-reproducible for a given input.

use std::ops::Range;

use crate::real::Real;

/// Inner product with eight independent accumulators.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
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

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// Products below this many multiply-adds skip the packed GEMM, whose
/// packing cost dominates on per-head attention blocks.
const GEMM_MIN_WORK: usize = 1 << 15;

/// `out[M,N] += a[M,K] * b[K,N]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    if m * k * n >= GEMM_MIN_WORK {
        return T::gemm_acc(m, k, n, a, [k as isize, 1], b, [n as isize, 1], out, [n as isize, 1]);
    }
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], row);
        }
    }
}

/// `out[M,N] += a[M,K] * b[N,K]^T`
pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    if m * k * n >= GEMM_MIN_WORK {
        return T::gemm_acc(m, k, n, a, [k as isize, 1], b, [1, k as isize], out, [n as isize, 1]);
    }
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[K,N] += a[M,K]^T * b[M,N]`
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    if m * k * n >= GEMM_MIN_WORK {
        return T::gemm_acc(k, m, n, a, [1, k as isize], b, [n as isize, 1], out, [n as isize, 1]);
    }
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], br, &mut out[p * n..(p + 1) * n]);
        }
    }
}

/// Visits the sub-block `ranges` of a row-major tensor of `shape` as runs
/// that are contiguous along the last axis. The callback receives the
/// source offset, the destination offset in a densely packed block and the
/// run length.
pub fn for_each_block(shape: &[usize], ranges: &[Range<usize>], mut f: impl FnMut(usize, usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 1);
        return;
    }
    if ranges.iter().any(|r| r.is_empty()) {
        return;
    }
    let mut strides = vec![1usize; rank];
    for a in (0..rank - 1).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    let run = ranges[rank - 1].len();
    let mut idx: Vec<usize> = ranges.iter().map(|r| r.start).collect();
    let mut dst = 0;
    loop {
        let src: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        f(src, dst, run);
        dst += run;
        // advance the outer axes odometer-style
        let mut a = rank - 1;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < ranges[a].end {
                break;
            }
            idx[a] = ranges[a].start;
        }
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * shape[a + 1];
    }
    s
}

/// Gathers `src` (with `shape`) into the axis order `perm`.
pub fn permute<T: Real>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_step = step[rank - 1];
    let mut idx = vec![0usize; rank];
    loop {
        let base: usize = idx.iter().zip(&step).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(src[base + j * inner_step]);
        }
        let mut a = rank - 1;
        loop {
            if a == 0 {
                return out;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
