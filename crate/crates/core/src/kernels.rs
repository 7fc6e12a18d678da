//! Dense f32 matrix kernels used by the autodiff graph.
//!
//! All kernels take row-major slices with explicit row strides so that
//! per-head views of a wider activation buffer can be used without copies.
//! The microkernels are register-blocked (4 rows x 32 columns) so rustc can
//! keep the accumulators in vector registers; build with `target-cpu=native`
//! for full-width FMA.

const MR: usize = 4; // rows per microkernel tile
const NR: usize = 32; // columns per microkernel tile (two 16-lane vectors)
const LANES: usize = 16;

#[inline(always)]
fn fma_lane(acc: &mut [f32; LANES], a: f32, b: &[f32]) {
    for l in 0..LANES {
        acc[l] = a.mul_add(b[l], acc[l]);
    }
}

/// C(m x n) = A(m x k) * B(k x n), optionally accumulating into C.
///
/// `lda`/`ldb`/`ldc` are row strides (>= logical row length).
pub fn gemm(
    c: &mut [f32],
    ldc: usize,
    a: &[f32],
    lda: usize,
    b: &[f32],
    ldb: usize,
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    debug_assert!(a.len() >= m.saturating_sub(1) * lda + k || m == 0);
    debug_assert!(b.len() >= k.saturating_sub(1) * ldb + n || k == 0);
    debug_assert!(c.len() >= m.saturating_sub(1) * ldc + n || m == 0);

    if !accumulate {
        for i in 0..m {
            c[i * ldc..i * ldc + n].fill(0.0);
        }
    }

    let mut j0 = 0;
    while j0 + NR <= n {
        let mut i0 = 0;
        while i0 + MR <= m {
            kernel_4x32(c, ldc, a, lda, b, ldb, i0, j0, k);
            i0 += MR;
        }
        while i0 < m {
            kernel_1x32(c, ldc, a, lda, b, ldb, i0, j0, k);
            i0 += 1;
        }
        j0 += NR;
    }
    if j0 < n {
        // Column tail: plain axpy over the remaining strip.
        for i in 0..m {
            let a_row = &a[i * lda..i * lda + k];
            for (kk, &av) in a_row.iter().enumerate() {
                let b_row = &b[kk * ldb + j0..kk * ldb + n];
                let c_row = &mut c[i * ldc + j0..i * ldc + n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv = av.mul_add(bv, *cv);
                }
            }
        }
    }
}

#[inline(always)]
fn kernel_4x32(
    c: &mut [f32],
    ldc: usize,
    a: &[f32],
    lda: usize,
    b: &[f32],
    ldb: usize,
    i0: usize,
    j0: usize,
    k: usize,
) {
    let mut acc = [[0.0f32; LANES]; 8]; // 4 rows x 2 vectors
    for kk in 0..k {
        let bl: &[f32] = &b[kk * ldb + j0..kk * ldb + j0 + LANES];
        let bh: &[f32] = &b[kk * ldb + j0 + LANES..kk * ldb + j0 + NR];
        for r in 0..MR {
            let av = a[(i0 + r) * lda + kk];
            fma_lane(&mut acc[2 * r], av, bl);
            fma_lane(&mut acc[2 * r + 1], av, bh);
        }
    }
    for r in 0..MR {
        let row = &mut c[(i0 + r) * ldc + j0..(i0 + r) * ldc + j0 + NR];
        for l in 0..LANES {
            row[l] += acc[2 * r][l];
            row[LANES + l] += acc[2 * r + 1][l];
        }
    }
}

#[inline(always)]
fn kernel_1x32(
    c: &mut [f32],
    ldc: usize,
    a: &[f32],
    lda: usize,
    b: &[f32],
    ldb: usize,
    i0: usize,
    j0: usize,
    k: usize,
) {
    let mut acc = [[0.0f32; LANES]; 2];
    for kk in 0..k {
        let av = a[i0 * lda + kk];
        fma_lane(&mut acc[0], av, &b[kk * ldb + j0..kk * ldb + j0 + LANES]);
        fma_lane(&mut acc[1], av, &b[kk * ldb + j0 + LANES..kk * ldb + j0 + NR]);
    }
    let row = &mut c[i0 * ldc + j0..i0 * ldc + j0 + NR];
    for l in 0..LANES {
        row[l] += acc[0][l];
        row[LANES + l] += acc[1][l];
    }
}

#[inline(always)]
fn tree_sum(acc: &[f32; LANES]) -> f32 {
    let mut h = [0.0f32; 8];
    for l in 0..8 {
        h[l] = acc[l] + acc[l + 8];
    }
    let q = [h[0] + h[4], h[1] + h[5], h[2] + h[6], h[3] + h[7]];
    (q[0] + q[2]) + (q[1] + q[3])
}

/// C(m x n) = A(m x k) * B(n x k)^T, optionally accumulating.
///
/// Dot-product form; vectorizes along k. Used for attention scores and the
/// dX = dY * W^T side of matmul backward. Tiles 2 rows x 4 columns so the
/// vector accumulators amortize the horizontal reductions.
pub fn gemm_abt(
    c: &mut [f32],
    ldc: usize,
    a: &[f32],
    lda: usize,
    b: &[f32],
    ldb: usize,
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    let kv = k / LANES * LANES;
    let mb = m / 2 * 2;
    let nb = n / 4 * 4;
    let mut i = 0;
    while i < mb {
        let a0 = &a[i * lda..i * lda + k];
        let a1 = &a[(i + 1) * lda..(i + 1) * lda + k];
        let mut j = 0;
        while j < nb {
            let mut acc = [[0.0f32; LANES]; 8];
            for jj in 0..4 {
                let b_row = &b[(j + jj) * ldb..(j + jj) * ldb + kv];
                let (lo, hi) = acc.split_at_mut(4);
                let (acc0, acc1) = (&mut lo[jj], &mut hi[jj]);
                let mut kk = 0;
                while kk < kv {
                    fma_mul2(acc0, acc1, &a0[kk..kk + LANES], &a1[kk..kk + LANES], &b_row[kk..kk + LANES]);
                    kk += LANES;
                }
            }
            for jj in 0..4 {
                let mut d0 = tree_sum(&acc[jj]);
                let mut d1 = tree_sum(&acc[4 + jj]);
                let b_row = &b[(j + jj) * ldb..(j + jj) * ldb + k];
                for l in kv..k {
                    d0 = a0[l].mul_add(b_row[l], d0);
                    d1 = a1[l].mul_add(b_row[l], d1);
                }
                let c0 = &mut c[i * ldc + j + jj];
                *c0 = if accumulate { *c0 + d0 } else { d0 };
                let c1 = &mut c[(i + 1) * ldc + j + jj];
                *c1 = if accumulate { *c1 + d1 } else { d1 };
            }
            j += 4;
        }
        while j < n {
            let b_row = &b[j * ldb..j * ldb + k];
            let d0 = dot(a0, b_row, k, kv);
            let d1 = dot(a1, b_row, k, kv);
            let c0 = &mut c[i * ldc + j];
            *c0 = if accumulate { *c0 + d0 } else { d0 };
            let c1 = &mut c[(i + 1) * ldc + j];
            *c1 = if accumulate { *c1 + d1 } else { d1 };
            j += 1;
        }
        i += 2;
    }
    if i < m {
        let a0 = &a[i * lda..i * lda + k];
        for j in 0..n {
            let b_row = &b[j * ldb..j * ldb + k];
            let d0 = dot(a0, b_row, k, kv);
            let c0 = &mut c[i * ldc + j];
            *c0 = if accumulate { *c0 + d0 } else { d0 };
        }
    }
}

#[inline(always)]
fn fma_mul2(acc0: &mut [f32; LANES], acc1: &mut [f32; LANES], a0: &[f32], a1: &[f32], b: &[f32]) {
    for l in 0..LANES {
        acc0[l] = a0[l].mul_add(b[l], acc0[l]);
        acc1[l] = a1[l].mul_add(b[l], acc1[l]);
    }
}

#[inline(always)]
fn dot(a: &[f32], b: &[f32], k: usize, kv: usize) -> f32 {
    let mut acc = [0.0f32; LANES];
    let mut kk = 0;
    while kk < kv {
        fma_lane_dot(&mut acc, &a[kk..kk + LANES], &b[kk..kk + LANES]);
        kk += LANES;
    }
    let mut d = tree_sum(&acc);
    for l in kv..k {
        d = a[l].mul_add(b[l], d);
    }
    d
}

#[inline(always)]
fn fma_lane_dot(acc: &mut [f32; LANES], a: &[f32], b: &[f32]) {
    for l in 0..LANES {
        acc[l] = a[l].mul_add(b[l], acc[l]);
    }
}

/// C(k x n) = A(m x k)^T * B(m x n), optionally accumulating.
///
/// Rank-4 updates; used for the dW = X^T * dY side of matmul backward.
pub fn gemm_atb(
    c: &mut [f32],
    ldc: usize,
    a: &[f32],
    lda: usize,
    b: &[f32],
    ldb: usize,
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    if !accumulate {
        for r in 0..k {
            c[r * ldc..r * ldc + n].fill(0.0);
        }
    }
    let mb = m / MR * MR;
    let mut i0 = 0;
    while i0 < mb {
        for r in 0..k {
            let a0 = a[i0 * lda + r];
            let a1 = a[(i0 + 1) * lda + r];
            let a2 = a[(i0 + 2) * lda + r];
            let a3 = a[(i0 + 3) * lda + r];
            let c_row = &mut c[r * ldc..r * ldc + n];
            let b0 = &b[i0 * ldb..i0 * ldb + n];
            let b1 = &b[(i0 + 1) * ldb..(i0 + 1) * ldb + n];
            let b2 = &b[(i0 + 2) * ldb..(i0 + 2) * ldb + n];
            let b3 = &b[(i0 + 3) * ldb..(i0 + 3) * ldb + n];
            for j in 0..n {
                let s = a0.mul_add(b0[j], a1.mul_add(b1[j], a2.mul_add(b2[j], a3 * b3[j])));
                c_row[j] += s;
            }
        }
        i0 += MR;
    }
    for i in mb..m {
        for r in 0..k {
            let av = a[i * lda + r];
            let c_row = &mut c[r * ldc..r * ldc + n];
            let b_row = &b[i * ldb..i * ldb + n];
            for j in 0..n {
                c_row[j] = av.mul_add(b_row[j], c_row[j]);
            }
        }
    }
}

/// Naive reference used by the unit tests.
#[cfg(test)]
fn gemm_ref(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                c[i * n + j] += av * b[p * n + j];
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_vec(rng: &mut Rng, len: usize) -> Vec<f32> {
        (0..len).map(|_| rng.normal_f32()).collect()
    }

    fn assert_close(actual: &[f32], expected: &[f32], tol: f32) {
        assert_eq!(actual.len(), expected.len());
        for (i, (x, y)) in actual.iter().zip(expected).enumerate() {
            let scale = 1.0f32.max(y.abs());
            assert!(
                (x - y).abs() <= tol * scale,
                "element {i}: {x} vs {y}"
            );
        }
    }

    #[test]
    fn gemm_matches_reference_across_shapes() {
        let mut rng = Rng::new(7);
        for &(m, k, n) in &[
            (1, 1, 1),
            (4, 32, 32),
            (5, 17, 33),
            (13, 128, 384),
            (64, 32, 64),
            (3, 48, 31),
        ] {
            let a = rand_vec(&mut rng, m * k);
            let b = rand_vec(&mut rng, k * n);
            let expect = gemm_ref(&a, &b, m, k, n);

            let mut c = vec![0.0f32; m * n];
            gemm(&mut c, n, &a, k, &b, n, m, k, n, false);
            assert_close(&c, &expect, 1e-4);

            // A * B^T form: feed B transposed.
            let mut bt = vec![0.0f32; n * k];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let mut c2 = vec![0.0f32; m * n];
            gemm_abt(&mut c2, n, &a, k, &bt, k, m, k, n, false);
            assert_close(&c2, &expect, 1e-4);

            // A^T * B form: feed A transposed.
            let mut at = vec![0.0f32; k * m];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let mut c3 = vec![0.0f32; m * n];
            gemm_atb(&mut c3, n, &at, m, &b, n, k, m, n, false);
            assert_close(&c3, &expect, 1e-4);
        }
    }

    #[test]
    fn gemm_accumulate_adds_to_existing() {
        let mut rng = Rng::new(8);
        let (m, k, n) = (6, 40, 40);
        let a = rand_vec(&mut rng, m * k);
        let b = rand_vec(&mut rng, k * n);
        let base = rand_vec(&mut rng, m * n);
        let expect: Vec<f32> = gemm_ref(&a, &b, m, k, n)
            .iter()
            .zip(&base)
            .map(|(x, y)| x + y)
            .collect();
        let mut c = base.clone();
        gemm(&mut c, n, &a, k, &b, n, m, k, n, true);
        assert_close(&c, &expect, 1e-4);
    }

    #[test]
    fn gemm_strided_views() {
        // Compute on a 2-column-wide slice of a padded buffer.
        let mut rng = Rng::new(9);
        let (m, k, n) = (8, 16, 32);
        let lda = k + 5;
        let a_pad = rand_vec(&mut rng, m * lda);
        let b = rand_vec(&mut rng, k * n);
        let a: Vec<f32> = (0..m)
            .flat_map(|i| a_pad[i * lda..i * lda + k].to_vec())
            .collect();
        let expect = gemm_ref(&a, &b, m, k, n);
        let mut c = vec![0.0f32; m * n];
        gemm(&mut c, n, &a_pad, lda, &b, n, m, k, n, false);
        assert_close(&c, &expect, 1e-4);
    }

    #[test]
    #[ignore = "throughput probe; run with --ignored --nocapture"]
    fn kernel_throughput() {
        use std::time::Instant;
        let mut rng = Rng::new(1);
        for &(m, k, n) in &[(68usize, 128usize, 384usize), (260, 128, 384), (68, 128, 256), (256, 256, 256)] {
            let a = rand_vec(&mut rng, m * k);
            let b = rand_vec(&mut rng, k * n);
            let mut c = vec![0.0f32; m * n];
            let reps = (2e9 / (2.0 * (m * k * n) as f64)).max(1.0) as usize;
            let t = Instant::now();
            for _ in 0..reps {
                gemm(&mut c, n, &a, k, &b, n, m, k, n, false);
            }
            let el = t.elapsed().as_secs_f64();
            let gf = 2.0 * (m * k * n) as f64 * reps as f64 / el / 1e9;
            println!("gemm     {m}x{k}x{n}: {gf:.1} GFLOP/s");

            let t = Instant::now();
            for _ in 0..reps {
                gemm_abt(&mut c, n, &a, k, &b, k, m, k, n, false);
            }
            let el = t.elapsed().as_secs_f64();
            let gf = 2.0 * (m * k * n) as f64 * reps as f64 / el / 1e9;
            println!("gemm_abt {m}x{k}x{n}: {gf:.1} GFLOP/s");

            let t = Instant::now();
            for _ in 0..reps {
                gemm_atb(&mut c, n, &a, m, &b, n, k, m, n, false);
            }
            let el = t.elapsed().as_secs_f64();
            let gf = 2.0 * (m * k * n) as f64 * reps as f64 / el / 1e9;
            println!("gemm_atb {m}x{k}x{n}: {gf:.1} GFLOP/s");
        }
    }
}
