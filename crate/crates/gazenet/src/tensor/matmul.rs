//! Blocked f64 matrix multiply for the convolution and dense layers.
//!
//! All matrices are row-major. Every entry point *accumulates* into `c`
//! (`C += op(A) * op(B)`); callers zero the output first when they want a
//! plain product. A and B are packed into MR x KC / KC x NR panels and fed
//! to an 8x16 register tile; on x86-64 with AVX-512 a hand-written kernel
//! is used (detected at runtime), otherwise a portable one that relies on
//! autovectorization.

const MR: usize = 8;
const NR: usize = 16;
const KC: usize = 384;
const MC: usize = 128;

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm(
        c,
        m,
        k,
        n,
        |dst, rows, pc, kc| pack_a(dst, a, k, rows, pc, kc),
        |dst, cols, pc, kc| pack_b(dst, b, n, cols, pc, kc),
    );
}

/// C[m,n] += A^T * B where A is [k,m] row-major.
pub fn matmul_at_b(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm(
        c,
        m,
        k,
        n,
        |dst, rows, pc, kc| pack_a_trans(dst, a, m, rows, pc, kc),
        |dst, cols, pc, kc| pack_b(dst, b, n, cols, pc, kc),
    );
}

/// C[m,n] += A * B^T where B is [n,k] row-major.
pub fn matmul_a_bt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    gemm(
        c,
        m,
        k,
        n,
        |dst, rows, pc, kc| pack_a(dst, a, k, rows, pc, kc),
        |dst, cols, pc, kc| pack_b_trans(dst, b, k, cols, pc, kc),
    );
}

#[cfg(target_arch = "x86_64")]
fn have_avx512() -> bool {
    use std::sync::OnceLock;
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| is_x86_feature_detected!("avx512f"))
}

/// Shared outer loop: block K, then M; B is packed per K-block, A per (M,K)-block.
fn gemm(
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    pack_rows: impl Fn(&mut [f64], core::ops::Range<usize>, usize, usize),
    pack_cols: impl Fn(&mut [f64], core::ops::Range<usize>, usize, usize),
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    let fast = have_avx512();
    #[cfg(not(target_arch = "x86_64"))]
    let fast = false;

    let n_panels = n.div_ceil(NR);
    let mut bpack = vec![0.0f64; KC * n_panels * NR];
    let mut apack = vec![0.0f64; MC.div_ceil(MR) * MR * KC];
    let mut ctile = [0.0f64; MR * NR];

    let mut pc = 0;
    while pc < k {
        let kc = KC.min(k - pc);
        pack_cols(&mut bpack[..kc * n_panels * NR], 0..n, pc, kc);

        let mut ic = 0;
        while ic < m {
            let mc = MC.min(m - ic);
            let row_panels = mc.div_ceil(MR);
            pack_rows(&mut apack[..row_panels * MR * kc], ic..ic + mc, pc, kc);

            for rp in 0..row_panels {
                let ap = &apack[rp * MR * kc..(rp + 1) * MR * kc];
                let rows = MR.min(mc - rp * MR);
                for cp in 0..n_panels {
                    let bp = &bpack[cp * NR * kc..(cp + 1) * NR * kc];
                    #[cfg(target_arch = "x86_64")]
                    if fast {
                        unsafe { kernel_avx512(&mut ctile, ap, bp, kc) };
                    } else {
                        kernel_portable(&mut ctile, ap, bp, kc);
                    }
                    #[cfg(not(target_arch = "x86_64"))]
                    kernel_portable(&mut ctile, ap, bp, kc);

                    let cols = NR.min(n - cp * NR);
                    let row0 = ic + rp * MR;
                    let col0 = cp * NR;
                    for r in 0..rows {
                        let dst = &mut c[(row0 + r) * n + col0..(row0 + r) * n + col0 + cols];
                        let src = &ctile[r * NR..r * NR + cols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
            ic += mc;
        }
        pc += kc;
    }
    let _ = fast;
}

/// acc = sum_p a_panel[p] (x) b_panel[p]. Panels are zero-padded so the loop
/// is branch-free.
#[inline]
fn kernel_portable(acc: &mut [f64; MR * NR], ap: &[f64], bp: &[f64], kc: usize) {
    acc.fill(0.0);
    for (a, b) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)).take(kc) {
        let b: &[f64; NR] = b.try_into().unwrap();
        for r in 0..MR {
            let ar = a[r];
            let row = &mut acc[r * NR..(r + 1) * NR];
            for (dst, bv) in row.iter_mut().zip(b) {
                *dst += ar * bv;
            }
        }
    }
}

/// Same contract as `kernel_portable`; 16 zmm accumulators.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn kernel_avx512(acc: &mut [f64; MR * NR], ap: &[f64], bp: &[f64], kc: usize) {
    use core::arch::x86_64::*;
    debug_assert!(ap.len() >= kc * MR && bp.len() >= kc * NR);
    let mut regs = [_mm512_setzero_pd(); 2 * MR];
    let mut a = ap.as_ptr();
    let mut b = bp.as_ptr();
    for _ in 0..kc {
        let b0 = _mm512_loadu_pd(b);
        let b1 = _mm512_loadu_pd(b.add(8));
        for r in 0..MR {
            let ar = _mm512_set1_pd(*a.add(r));
            regs[2 * r] = _mm512_fmadd_pd(ar, b0, regs[2 * r]);
            regs[2 * r + 1] = _mm512_fmadd_pd(ar, b1, regs[2 * r + 1]);
        }
        a = a.add(MR);
        b = b.add(NR);
    }
    let out = acc.as_mut_ptr();
    for r in 0..MR {
        _mm512_storeu_pd(out.add(r * NR), regs[2 * r]);
        _mm512_storeu_pd(out.add(r * NR + 8), regs[2 * r + 1]);
    }
}

/// Pack rows `rows` of A[.,k] at columns pc..pc+kc into MR-row panels,
/// column-major within a panel. Short panels are zero-padded.
fn pack_a(dst: &mut [f64], a: &[f64], k: usize, rows: core::ops::Range<usize>, pc: usize, kc: usize) {
    dst.fill(0.0);
    for (i, row) in rows.enumerate() {
        let panel = i / MR;
        let lane = i % MR;
        let src = &a[row * k + pc..row * k + pc + kc];
        let base = panel * MR * kc;
        for (p, &v) in src.iter().enumerate() {
            dst[base + p * MR + lane] = v;
        }
    }
}

/// Same as `pack_a` for A stored transposed ([k, m] row-major).
fn pack_a_trans(
    dst: &mut [f64],
    a: &[f64],
    m: usize,
    rows: core::ops::Range<usize>,
    pc: usize,
    kc: usize,
) {
    dst.fill(0.0);
    for (i, row) in rows.enumerate() {
        let panel = i / MR;
        let lane = i % MR;
        let base = panel * MR * kc;
        for p in 0..kc {
            dst[base + p * MR + lane] = a[(pc + p) * m + row];
        }
    }
}

/// Pack columns of B[k,.] at rows pc..pc+kc into NR-column panels.
fn pack_b(dst: &mut [f64], b: &[f64], n: usize, cols: core::ops::Range<usize>, pc: usize, kc: usize) {
    dst.fill(0.0);
    let n_panels = cols.len().div_ceil(NR);
    for cp in 0..n_panels {
        let col0 = cols.start + cp * NR;
        let width = NR.min(cols.end - col0);
        let base = cp * NR * kc;
        for p in 0..kc {
            let src = &b[(pc + p) * n + col0..(pc + p) * n + col0 + width];
            dst[base + p * NR..base + p * NR + width].copy_from_slice(src);
        }
    }
}

/// Same as `pack_b` for B stored transposed ([n, k] row-major).
fn pack_b_trans(
    dst: &mut [f64],
    b: &[f64],
    k: usize,
    cols: core::ops::Range<usize>,
    pc: usize,
    kc: usize,
) {
    dst.fill(0.0);
    let n_panels = cols.len().div_ceil(NR);
    for cp in 0..n_panels {
        let col0 = cols.start + cp * NR;
        let width = NR.min(cols.end - col0);
        let base = cp * NR * kc;
        for p in 0..kc {
            for j in 0..width {
                dst[base + p * NR + j] = b[(col0 + j) * k + pc + p];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn rand_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matches_naive_on_odd_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (17, 33, 19), (130, 400, 37), (8, 16, 16)] {
            let a = rand_vec(&mut rng, m * k);
            let b = rand_vec(&mut rng, k * n);
            let want = naive(&a, &b, m, k, n);

            let mut c = vec![0.0; m * n];
            matmul(&mut c, &a, &b, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "plain gemm mismatch at ({m},{k},{n})");
            }

            // A^T variant: store A transposed and ask for the same product.
            let mut at = vec![0.0; k * m];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let mut c = vec![0.0; m * n];
            matmul_at_b(&mut c, &at, &b, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "at_b gemm mismatch at ({m},{k},{n})");
            }

            // B^T variant.
            let mut bt = vec![0.0; n * k];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let mut c = vec![0.0; m * n];
            matmul_a_bt(&mut c, &a, &bt, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "a_bt gemm mismatch at ({m},{k},{n})");
            }
        }
    }

    #[test]
    fn accumulates_into_c() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = [10.0];
        matmul(&mut c, &a, &b, 1, 2, 1);
        assert_eq!(c[0], 10.0 + 11.0);
    }
}
