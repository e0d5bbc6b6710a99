//! Small blocked matrix-multiply kernels backing conv2d, linear layers, and
//! attention.
//!
//! All three variants accumulate (`C += …`) over row-major slices. The inner
//! loops are written in lane-parallel form — per-column accumulate (axpy)
//! or eight-way partial sums — because LLVM will not reassociate a plain
//! `sum += a*b` floating-point reduction; these shapes vectorize without
//! `-ffast-math` semantics.

use crate::element::Element;

/// Column-panel width for the axpy kernels (stack accumulators).
const NC: usize = 256;
/// K-panel depth; keeps the active B panel inside L2.
const KC: usize = 256;

/// `C[M,N] += A[M,K] · B[K,N]`.
pub(crate) fn gemm_nn<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_panels(m, k, n, c, |i, kk| a[i * k + kk], b);
}

/// `C[M,N] += Aᵀ · B` where `A` is stored `[K,M]`.
pub(crate) fn gemm_tn<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_panels(m, k, n, c, |i, kk| a[kk * m + i], b);
}

/// `C[M,N] += A · Bᵀ` where `B` is stored `[N,K]`: every output is a dot
/// product of two contiguous rows, streamed with eight partial sums.
pub(crate) fn gemm_nt<E: Element>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cj) in crow.iter_mut().enumerate() {
            *cj += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product via eight independent lanes (vectorizes; summation order is
/// fixed and deterministic).
pub(crate) fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [E::zero(); 8];
    let chunks = a.len() / 8 * 8;
    let (ah, at) = a.split_at(chunks);
    let (bh, bt) = b.split_at(chunks);
    for (ca, cb) in ah.chunks_exact(8).zip(bh.chunks_exact(8)) {
        for l in 0..8 {
            lanes[l] += ca[l] * cb[l];
        }
    }
    let mut s = E::zero();
    for l in lanes {
        s += l;
    }
    for (&x, &y) in at.iter().zip(bt.iter()) {
        s += x * y;
    }
    s
}

/// Shared panel driver for the nn/tn kernels: `A` is abstracted behind an
/// element accessor so the two layouts share the blocked axpy body.
fn gemm_panels<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    c: &mut [E],
    a_at: impl Fn(usize, usize) -> E,
    b: &[E],
) {
    let mut jp = 0;
    while jp < n {
        let nb = NC.min(n - jp);
        let mut kp = 0;
        while kp < k {
            let kb = KC.min(k - kp);
            let mut i = 0;
            // Four-row blocks: each B row element feeds four accumulators.
            while i + 4 <= m {
                let mut acc = [[E::zero(); NC]; 4];
                for kk in kp..kp + kb {
                    let a0 = a_at(i, kk);
                    let a1 = a_at(i + 1, kk);
                    let a2 = a_at(i + 2, kk);
                    let a3 = a_at(i + 3, kk);
                    let brow = &b[kk * n + jp..kk * n + jp + nb];
                    for (j, &bj) in brow.iter().enumerate() {
                        acc[0][j] += a0 * bj;
                        acc[1][j] += a1 * bj;
                        acc[2][j] += a2 * bj;
                        acc[3][j] += a3 * bj;
                    }
                }
                for r in 0..4 {
                    let crow = &mut c[(i + r) * n + jp..(i + r) * n + jp + nb];
                    for (j, cj) in crow.iter_mut().enumerate() {
                        *cj += acc[r][j];
                    }
                }
                i += 4;
            }
            // Remainder rows, one at a time.
            while i < m {
                let mut acc = [E::zero(); NC];
                for kk in kp..kp + kb {
                    let ai = a_at(i, kk);
                    let brow = &b[kk * n + jp..kk * n + jp + nb];
                    for (j, &bj) in brow.iter().enumerate() {
                        acc[j] += ai * bj;
                    }
                }
                let crow = &mut c[i * n + jp..i * n + jp + nb];
                for (j, cj) in crow.iter_mut().enumerate() {
                    *cj += acc[j];
                }
                i += 1;
            }
            kp += kb;
        }
        jp += nb;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    fn pseudo(n: usize, salt: u64) -> Vec<f64> {
        (0..n)
            .map(|i| {
                let h = (i as u64).wrapping_mul(0x9e3779b97f4a7c15) ^ salt;
                (h % 1000) as f64 / 500.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn nn_matches_naive_across_panel_boundaries() {
        // Sizes straddle the 4-row blocks and the NC/KC panels.
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (4, 300, 260), (9, 257, 513)] {
            let a = pseudo(m * k, 1);
            let b = pseudo(k * n, 2);
            let want = naive(m, k, n, &a, &b);
            let mut c = vec![0.0; m * n];
            gemm_nn(m, k, n, &a, &b, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn tn_matches_naive() {
        let (m, k, n) = (6, 259, 31);
        let a_t = pseudo(k * m, 3); // stored [K,M]
        let b = pseudo(k * n, 4);
        let mut a = vec![0.0; m * k];
        for kk in 0..k {
            for i in 0..m {
                a[i * k + kk] = a_t[kk * m + i];
            }
        }
        let want = naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        gemm_tn(m, k, n, &a_t, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn nt_matches_naive() {
        let (m, k, n) = (5, 100, 8);
        let a = pseudo(m * k, 5);
        let b_t = pseudo(n * k, 6); // stored [N,K]
        let mut b = vec![0.0; k * n];
        for j in 0..n {
            for kk in 0..k {
                b[kk * n + j] = b_t[j * k + kk];
            }
        }
        let want = naive(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &b_t, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn accumulates_instead_of_overwriting() {
        let a = vec![1.0f64; 4];
        let b = vec![1.0f64; 4];
        let mut c = vec![10.0f64; 4];
        gemm_nn(2, 2, 2, &a, &b, &mut c);
        assert_eq!(c, vec![12.0; 4]);
    }
}
