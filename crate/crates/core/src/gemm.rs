//! Single-threaded row-major GEMM with an AVX2+FMA microkernel.
//!
//! `gemm` computes `C = A * B` (C overwritten). The f32 path packs
//! cache-sized blocks and runs a 6x16 FMA microkernel; everything else
//! (f64, tiny problems, non-x86) uses a blocked scalar loop. Both paths
//! produce identical results up to the usual FMA reassociation, and the
//! tests pin them against a naive triple loop.

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

/// Below this many multiply-adds the packing overhead is not worth it.
const FAST_PATH_MIN_MADDS: usize = 4096;

/// C(m x n) = A(m x k) * B(k x n), all row-major contiguous.
pub fn gemm<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k, "gemm: A length");
    assert_eq!(b.len(), k * n, "gemm: B length");
    assert_eq!(c.len(), m * n, "gemm: C length");
    #[cfg(target_arch = "x86_64")]
    {
        if T::DTYPE == DType::F32 && m * k * n >= FAST_PATH_MIN_MADDS && avx2::available() {
            // Element is only implemented for f32/f64 and DTYPE discriminates,
            // so this reinterpretation is sound.
            let a32 = unsafe { std::slice::from_raw_parts(a.as_ptr() as *const f32, a.len()) };
            let b32 = unsafe { std::slice::from_raw_parts(b.as_ptr() as *const f32, b.len()) };
            let c32 =
                unsafe { std::slice::from_raw_parts_mut(c.as_mut_ptr() as *mut f32, c.len()) };
            unsafe { avx2::gemm_f32(m, k, n, a32, b32, c32) };
            return;
        }
    }
    gemm_scalar(m, k, n, a, b, c);
}

/// Blocked i-k-j scalar fallback (also the f64 path).
fn gemm_scalar<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    const IB: usize = 32;
    const KB: usize = 64;
    for v in c.iter_mut() {
        *v = T::zero();
    }
    let mut i0 = 0;
    while i0 < m {
        let im = (i0 + IB).min(m);
        let mut k0 = 0;
        while k0 < k {
            let km = (k0 + KB).min(k);
            for i in i0..im {
                let crow = &mut c[i * n..(i + 1) * n];
                for kk in k0..km {
                    let aik = a[i * k + kk];
                    let brow = &b[kk * n..kk * n + n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += aik * bv;
                    }
                }
            }
            k0 = km;
        }
        i0 = im;
    }
}

/// Reference implementation used by tests to pin both production paths.
#[doc(hidden)]
pub fn gemm_naive<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            for kk in 0..k {
                acc = acc + a[i * k + kk] * b[kk * n + j];
            }
            c[i * n + j] = acc;
        }
    }
}

/// `dst = src^T` for a row-major `rows x cols` slice.
pub fn transpose_slice<T: Element>(rows: usize, cols: usize, src: &[T], dst: &mut [T]) {
    assert_eq!(src.len(), rows * cols);
    assert_eq!(dst.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

/// Per-slice transpose: `dst[s] = src[s]^T` for `slices` row-major `m x n`
/// matrices laid out back to back. Tiled so both sides stay cache-resident.
pub fn transpose_slices<T: Element>(
    slices: usize,
    m: usize,
    n: usize,
    src: &[T],
    dst: &mut [T],
) {
    assert_eq!(src.len(), slices * m * n);
    assert_eq!(dst.len(), slices * m * n);
    const TILE: usize = 32;
    for s in 0..slices {
        let sp = &src[s * m * n..(s + 1) * m * n];
        let dp = &mut dst[s * m * n..(s + 1) * m * n];
        let mut i0 = 0;
        while i0 < m {
            let im = (i0 + TILE).min(m);
            let mut j0 = 0;
            while j0 < n {
                let jm = (j0 + TILE).min(n);
                for i in i0..im {
                    for j in j0..jm {
                        dp[j * m + i] = sp[i * n + j];
                    }
                }
                j0 = jm;
            }
            i0 = im;
        }
    }
}

/// Rank-2 matrix product.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(format!(
            "matmul needs rank-2 operands, got {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (m, ka) = (a.dims()[0], a.dims()[1]);
    let (kb, n) = (b.dims()[0], b.dims()[1]);
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, ka, n, a.as_slice(), b.as_slice(), &mut out);
    Tensor::new(vec![m, n], out)
}

/// [B,m,k] x [B,k,n] -> [B,m,n], one GEMM per batch entry.
pub fn batched_matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 3 || b.rank() != 3 {
        return Err(Error::shape(format!(
            "batched_matmul needs rank-3 operands, got {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (ba, m, ka) = (a.dims()[0], a.dims()[1], a.dims()[2]);
    let (bb, kb, n) = (b.dims()[0], b.dims()[1], b.dims()[2]);
    if ba != bb || ka != kb {
        return Err(Error::shape(format!(
            "batched_matmul dims differ: {:?} x {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = vec![T::zero(); ba * m * n];
    for s in 0..ba {
        gemm(
            m,
            ka,
            n,
            &a.as_slice()[s * m * ka..(s + 1) * m * ka],
            &b.as_slice()[s * ka * n..(s + 1) * ka * n],
            &mut out[s * m * n..(s + 1) * m * n],
        );
    }
    Tensor::new(vec![ba, m, n], out)
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    //! Packed-block GEMM: BLIS-style jc/pc/ic blocking around a 6x16
    //! register-tiled FMA microkernel.
    use std::arch::x86_64::*;
    use std::cell::RefCell;
    use std::sync::OnceLock;

    pub const MR: usize = 6;
    pub const NR: usize = 16;
    const MC: usize = 132; // A block rows (multiple of MR)
    const KC: usize = 256; // shared inner-dim block
    const NC: usize = 1024; // B block cols (multiple of NR)

    pub fn available() -> bool {
        static AVAIL: OnceLock<bool> = OnceLock::new();
        *AVAIL.get_or_init(|| {
            is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
        })
    }

    thread_local! {
        // Reused packing buffers; sized once, lives for the thread.
        static PACK: RefCell<(Vec<f32>, Vec<f32>)> =
            RefCell::new((vec![0.0; MC * KC], vec![0.0; KC * NC]));
    }

    /// # Safety
    /// Caller must have verified AVX2+FMA via [`available`].
    pub unsafe fn gemm_f32(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        PACK.with(|bufs| {
            let mut bufs = bufs.borrow_mut();
            let (apack, bpack) = &mut *bufs;
            let mut jc = 0;
            while jc < n {
                let nc = (n - jc).min(NC);
                let mut pc = 0;
                while pc < k {
                    let kc = (k - pc).min(KC);
                    let first_k_block = pc == 0;
                    pack_b(b, n, pc, jc, kc, nc, bpack);
                    let mut ic = 0;
                    while ic < m {
                        let mc = (m - ic).min(MC);
                        pack_a(a, k, ic, pc, mc, kc, apack);
                        run_block(apack, bpack, c, n, ic, jc, mc, nc, kc, first_k_block);
                        ic += mc;
                    }
                    pc += kc;
                }
                jc += nc;
            }
        });
    }

    /// Pack `mc x kc` of A into MR-row micro-panels, zero-padding ragged rows.
    fn pack_a(a: &[f32], lda: usize, i0: usize, k0: usize, mc: usize, kc: usize, dst: &mut [f32]) {
        let mut d = 0;
        let mut ir = 0;
        while ir < mc {
            let rows = (mc - ir).min(MR);
            for kk in 0..kc {
                for r in 0..MR {
                    dst[d] = if r < rows {
                        a[(i0 + ir + r) * lda + k0 + kk]
                    } else {
                        0.0
                    };
                    d += 1;
                }
            }
            ir += MR;
        }
    }

    /// Pack `kc x nc` of B into NR-column micro-panels, zero-padding ragged cols.
    fn pack_b(b: &[f32], ldb: usize, k0: usize, j0: usize, kc: usize, nc: usize, dst: &mut [f32]) {
        let mut d = 0;
        let mut jr = 0;
        while jr < nc {
            let cols = (nc - jr).min(NR);
            for kk in 0..kc {
                let src = &b[(k0 + kk) * ldb + j0 + jr..];
                for cidx in 0..NR {
                    dst[d] = if cidx < cols { src[cidx] } else { 0.0 };
                    d += 1;
                }
            }
            jr += NR;
        }
    }

    #[allow(clippy::too_many_arguments)]
    unsafe fn run_block(
        apack: &[f32],
        bpack: &[f32],
        c: &mut [f32],
        ldc: usize,
        ic: usize,
        jc: usize,
        mc: usize,
        nc: usize,
        kc: usize,
        overwrite: bool,
    ) {
        let mut jr = 0;
        while jr < nc {
            let nr = (nc - jr).min(NR);
            // Panels are packed back to back with the *current* kc.
            let bpanel = &bpack[(jr / NR) * kc * NR..];
            let mut ir = 0;
            while ir < mc {
                let mr = (mc - ir).min(MR);
                let apanel = &apack[(ir / MR) * kc * MR..];
                let coff = (ic + ir) * ldc + jc + jr;
                kernel_6x16(
                    kc,
                    apanel.as_ptr(),
                    bpanel.as_ptr(),
                    c[coff..].as_mut_ptr(),
                    ldc,
                    mr,
                    nr,
                    overwrite,
                );
                ir += MR;
            }
            jr += NR;
        }
    }

    /// 6x16 microkernel: 12 accumulator registers, one broadcast, two loads.
    #[target_feature(enable = "avx2,fma")]
    #[allow(clippy::too_many_arguments)]
    unsafe fn kernel_6x16(
        kc: usize,
        mut ap: *const f32,
        mut bp: *const f32,
        c: *mut f32,
        ldc: usize,
        mr: usize,
        nr: usize,
        overwrite: bool,
    ) {
        let mut acc = [[_mm256_setzero_ps(); 2]; MR];
        for _ in 0..kc {
            let b0 = _mm256_loadu_ps(bp);
            let b1 = _mm256_loadu_ps(bp.add(8));
            // Unrolled by the compiler; MR is a const.
            for r in 0..MR {
                let av = _mm256_broadcast_ss(&*ap.add(r));
                acc[r][0] = _mm256_fmadd_ps(av, b0, acc[r][0]);
                acc[r][1] = _mm256_fmadd_ps(av, b1, acc[r][1]);
            }
            ap = ap.add(MR);
            bp = bp.add(NR);
        }
        if mr == MR && nr == NR {
            for r in 0..MR {
                let cp = c.add(r * ldc);
                if overwrite {
                    _mm256_storeu_ps(cp, acc[r][0]);
                    _mm256_storeu_ps(cp.add(8), acc[r][1]);
                } else {
                    _mm256_storeu_ps(cp, _mm256_add_ps(_mm256_loadu_ps(cp), acc[r][0]));
                    _mm256_storeu_ps(
                        cp.add(8),
                        _mm256_add_ps(_mm256_loadu_ps(cp.add(8)), acc[r][1]),
                    );
                }
            }
        } else {
            // Ragged edge: spill to a scratch tile, then copy the live part.
            let mut tile = [0.0f32; MR * NR];
            for r in 0..MR {
                _mm256_storeu_ps(tile.as_mut_ptr().add(r * NR), acc[r][0]);
                _mm256_storeu_ps(tile.as_mut_ptr().add(r * NR + 8), acc[r][1]);
            }
            for r in 0..mr {
                for col in 0..nr {
                    let cp = c.add(r * ldc + col);
                    if overwrite {
                        *cp = tile[r * NR + col];
                    } else {
                        *cp += tile[r * NR + col];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_case<T: Element>(rng: &mut StdRng, m: usize, k: usize, n: usize) {
        let a: Vec<T> = (0..m * k)
            .map(|_| T::from_f64(rng.random_range(-1.0..1.0)))
            .collect();
        let b: Vec<T> = (0..k * n)
            .map(|_| T::from_f64(rng.random_range(-1.0..1.0)))
            .collect();
        let mut got = vec![T::zero(); m * n];
        let mut want = vec![T::zero(); m * n];
        gemm(m, k, n, &a, &b, &mut got);
        gemm_naive(m, k, n, &a, &b, &mut want);
        let tol = if T::DTYPE == DType::F32 { 1e-4 } else { 1e-12 };
        for (g, w) in got.iter().zip(&want) {
            let diff = (g.to_f64_lossy() - w.to_f64_lossy()).abs();
            assert!(
                diff <= tol * (1.0 + w.to_f64_lossy().abs()),
                "m={m} k={k} n={n}: {diff} over tol"
            );
        }
    }

    #[test]
    fn matches_naive_on_small_odd_shapes_f32() {
        let mut rng = StdRng::seed_from_u64(1);
        for &(m, k, n) in &[
            (1, 1, 1),
            (1, 7, 1),
            (3, 2, 5),
            (6, 4, 16),
            (7, 3, 17),
            (13, 9, 31),
            (5, 64, 5),
        ] {
            random_case::<f32>(&mut rng, m, k, n);
        }
    }


    #[test]
    fn row_results_independent_of_row_position_f32() {
        let mut rng = StdRng::seed_from_u64(5);
        let (m, k, n) = (13usize, 64usize, 32usize);
        let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut c = vec![0.0f32; m * n];
        gemm(m, k, n, &a, &b, &mut c);
        // Rotate rows of A by 5; row i of the rotated product must equal
        // row (i+5)%m of the original bitwise.
        let mut a2 = vec![0.0f32; m * k];
        for i in 0..m {
            let src = (i + 5) % m;
            a2[i * k..(i + 1) * k].copy_from_slice(&a[src * k..(src + 1) * k]);
        }
        let mut c2 = vec![0.0f32; m * n];
        gemm(m, k, n, &a2, &b, &mut c2);
        for i in 0..m {
            let src = (i + 5) % m;
            for j in 0..n {
                assert_eq!(c2[i * n + j].to_bits(), c[src * n + j].to_bits(), "row {i} col {j}");
            }
        }
        // Same check with a row COUNT change: first 6 rows of A alone.
        let mut c3 = vec![0.0f32; 6 * n];
        gemm(6, k, n, &a[..6 * k], &b, &mut c3);
        for i in 0..6 {
            for j in 0..n {
                assert_eq!(c3[i * n + j].to_bits(), c[i * n + j].to_bits(), "short row {i} col {j}");
            }
        }
    }

    #[test]
    fn matches_naive_across_block_boundaries_f32() {
        // Shapes straddling the MC/KC/NC and MR/NR edges of the packed path.
        let mut rng = StdRng::seed_from_u64(2);
        for &(m, k, n) in &[
            (6, 256, 16),
            (7, 257, 17),
            (132, 16, 16),
            (133, 300, 40),
            (67, 129, 211),
            (200, 64, 1030),
        ] {
            random_case::<f32>(&mut rng, m, k, n);
        }
    }

    #[test]
    fn matches_naive_f64() {
        let mut rng = StdRng::seed_from_u64(3);
        for &(m, k, n) in &[(1, 1, 1), (4, 4, 4), (9, 17, 5), (33, 65, 33)] {
            random_case::<f64>(&mut rng, m, k, n);
        }
    }

    #[test]
    fn matmul_validates_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(vec![4, 2]).unwrap();
        assert!(matmul(&a, &b).is_err());
        let b = Tensor::<f32>::zeros(vec![3, 4]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().dims(), &[2, 4]);
    }

    #[test]
    fn batched_matmul_matches_per_slice() {
        let mut rng = StdRng::seed_from_u64(4);
        let a = Tensor::<f64>::from_fn(vec![3, 4, 5], |_| rng.random_range(-1.0..1.0)).unwrap();
        let b = Tensor::<f64>::from_fn(vec![3, 5, 2], |_| rng.random_range(-1.0..1.0)).unwrap();
        let out = batched_matmul(&a, &b).unwrap();
        assert_eq!(out.dims(), &[3, 4, 2]);
        for s in 0..3 {
            let asl = Tensor::new(
                vec![4, 5],
                a.as_slice()[s * 20..(s + 1) * 20].to_vec(),
            )
            .unwrap();
            let bsl = Tensor::new(
                vec![5, 2],
                b.as_slice()[s * 10..(s + 1) * 10].to_vec(),
            )
            .unwrap();
            let want = matmul(&asl, &bsl).unwrap();
            for i in 0..4 {
                for j in 0..2 {
                    assert_eq!(out.at(&[s, i, j]), want.at(&[i, j]));
                }
            }
        }
    }

    #[test]
    #[ignore = "manual throughput probe; run with --release -- --ignored"]
    fn throughput_probe() {
        let (m, k, n) = (1024, 1024, 1024);
        let a = vec![1.0f32; m * k];
        let b = vec![1.0f32; k * n];
        let mut c = vec![0.0f32; m * n];
        gemm(m, k, n, &a, &b, &mut c); // warm up
        let reps = 5;
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            gemm(m, k, n, &a, &b, &mut c);
        }
        let secs = t0.elapsed().as_secs_f64() / reps as f64;
        let gflops = 2.0 * (m * k * n) as f64 / secs / 1e9;
        println!("gemm f32 {m}x{k}x{n}: {secs:.4}s/iter, {gflops:.1} GFLOP/s");
    }

    #[test]
    fn transpose_slice_round_trips() {
        let src: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let mut t = vec![0.0f32; 12];
        let mut back = vec![0.0f32; 12];
        transpose_slice(3, 4, &src, &mut t);
        transpose_slice(4, 3, &t, &mut back);
        assert_eq!(src, back);
        assert_eq!(t[0 * 3 + 2], src[2 * 4 + 0]);
    }
}
