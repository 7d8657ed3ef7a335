//! Single-head softmax self-attention over spatial tokens — the quadratic
//! scaling baseline for the complexity benchmark. Scores are produced in
//! query-by-key tiles with an online (running max/denominator) softmax, so
//! the full token-by-token matrix is never materialized and the resident
//! tile stays cache-sized no matter how many tokens there are.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gemm::gemm;
use crate::tensor::{DType, Element, Tensor};

/// Fixed random projections `[C, C]` for queries, keys, values.
pub struct AttentionBaseline<T: Element> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

/// Query rows per score tile. Large enough to amortize the per-GEMM packing
/// of the key tile across many rows.
const BQ: usize = 1024;
/// Key columns per score tile; the resident tile is at most `BQ x BK` floats.
const BK: usize = 1024;

impl<T: Element> AttentionBaseline<T> {
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (channels as f64).sqrt();
        let mut mk = || {
            Tensor::from_fn(vec![channels, channels], |_| {
                T::from_f64(rng.random_range(-scale..scale))
            })
        };
        Ok(AttentionBaseline { wq: mk()?, wk: mk()?, wv: mk()? })
    }

    /// `x [B, C, H, W] -> [B, C, H, W]`: softmax(QKᵀ/√C)·V over N = H·W
    /// tokens per sample.
    ///
    /// Key tiles stream through a running softmax: each query row keeps its
    /// max `m`, denominator `l`, and unnormalized output accumulator; a new
    /// tile rescales them by `exp(m_old − m_new)` before folding in its own
    /// contribution. One division per row at the very end normalizes.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let d = x.dims();
        if d.len() != 4 {
            return Err(Error::shape(format!("expected [B,C,H,W], got {:?}", d)));
        }
        let (b, c, h, w) = (d[0], d[1], d[2], d[3]);
        if c != self.wq.dims()[0] {
            return Err(Error::shape(format!(
                "baseline built for {} channels, got {c}",
                self.wq.dims()[0]
            )));
        }
        let n = h * w;
        let inv_sqrt_c = T::from_f64(1.0 / (c as f64).sqrt());
        let mut out = vec![T::zero(); b * c * n];

        // Per-sample scratch, reused across the batch.
        let mut tokens = vec![T::zero(); n * c];
        let mut q = vec![T::zero(); n * c];
        let mut k = vec![T::zero(); n * c];
        let mut v = vec![T::zero(); n * c];
        let mut acc = vec![T::zero(); n * c]; // unnormalized output rows
        let mut row_max = vec![T::zero(); n];
        let mut row_denom = vec![T::zero(); n];
        let bq = BQ.min(n);
        let bk = BK.min(n);
        let mut ktile = vec![T::zero(); c * bk];
        let mut stile = vec![T::zero(); bq * bk];
        let mut otile = vec![T::zero(); bq * c];
        let mut alphas = vec![T::one(); bq];
        for bi in 0..b {
            // [C, N] plane -> [N, C] token rows.
            let plane = &x.as_slice()[bi * c * n..(bi + 1) * c * n];
            for ci in 0..c {
                for t in 0..n {
                    tokens[t * c + ci] = plane[ci * n + t];
                }
            }
            gemm(n, c, c, &tokens, self.wq.as_slice(), &mut q);
            gemm(n, c, c, &tokens, self.wk.as_slice(), &mut k);
            gemm(n, c, c, &tokens, self.wv.as_slice(), &mut v);
            // Fold the 1/sqrt(C) score scale into Q once.
            for qv in q.iter_mut() {
                *qv = *qv * inv_sqrt_c;
            }
            for mv in row_max.iter_mut() {
                *mv = T::from_f64(f64::NEG_INFINITY);
            }
            for lv in row_denom.iter_mut() {
                *lv = T::zero();
            }
            for av in acc.iter_mut() {
                *av = T::zero();
            }

            for k0 in (0..n).step_by(bk) {
                let kw = bk.min(n - k0);
                // Kᵀ tile [C, kw] from key rows k0..k0+kw.
                for ci in 0..c {
                    for t in 0..kw {
                        ktile[ci * kw + t] = k[(k0 + t) * c + ci];
                    }
                }
                let vtile = &v[k0 * c..(k0 + kw) * c]; // [kw, C], contiguous
                for q0 in (0..n).step_by(bq) {
                    let qh = bq.min(n - q0);
                    let sc = &mut stile[..qh * kw];
                    gemm(qh, c, kw, &q[q0 * c..(q0 + qh) * c], &ktile[..c * kw], sc);
                    // Per row: fold this tile into the running softmax.
                    for r in 0..qh {
                        let row = &mut sc[r * kw..(r + 1) * kw];
                        let tile_max = max_row(row);
                        let old_max = row_max[q0 + r];
                        let new_max = if old_max.to_f64_lossy() >= tile_max.to_f64_lossy() {
                            old_max
                        } else {
                            tile_max
                        };
                        // exp(-inf) = 0 handles the first tile cleanly.
                        let alpha =
                            T::from_f64((old_max.to_f64_lossy() - new_max.to_f64_lossy()).exp());
                        let tile_sum = exp_shift_row(row, new_max);
                        row_denom[q0 + r] = row_denom[q0 + r] * alpha + tile_sum;
                        row_max[q0 + r] = new_max;
                        alphas[r] = alpha;
                    }
                    // [qh, kw] x [kw, C] -> [qh, C], then fold into acc.
                    let ot = &mut otile[..qh * c];
                    gemm(qh, kw, c, sc, vtile, ot);
                    for r in 0..qh {
                        let arow = &mut acc[(q0 + r) * c..(q0 + r + 1) * c];
                        let alpha = alphas[r];
                        for (av, &tv) in arow.iter_mut().zip(&ot[r * c..(r + 1) * c]) {
                            *av = *av * alpha + tv;
                        }
                    }
                }
            }
            // Normalize and scatter back to [C, N] layout.
            for t in 0..n {
                let inv = T::one() / row_denom[t];
                for ci in 0..c {
                    out[(bi * c + ci) * n + t] = acc[t * c + ci] * inv;
                }
            }
        }
        Tensor::new(vec![b, c, h, w], out)
    }
}

/// Maximum of a score row. The f32 path vectorizes the scan.
fn max_row<T: Element>(row: &[T]) -> T {
    #[cfg(target_arch = "x86_64")]
    {
        if T::DTYPE == DType::F32 && row.len() >= 32 && fast::available() {
            // Element is only implemented for f32/f64 and DTYPE discriminates,
            // so this reinterpretation is sound.
            let row32 =
                unsafe { std::slice::from_raw_parts(row.as_ptr() as *const f32, row.len()) };
            return T::from_f64(unsafe { fast::max_f32(row32) } as f64);
        }
    }
    let mut maxv = f64::NEG_INFINITY;
    for val in row.iter() {
        maxv = maxv.max(val.to_f64_lossy());
    }
    T::from_f64(maxv)
}

/// `row := exp(row - shift)` in place; returns the sum of the results. The
/// f32 path vectorizes the exp: at 256x256 inputs the score tiles hold ~4
/// billion entries per forward pass, which would dwarf the matmuls if sent
/// through libm one by one.
fn exp_shift_row<T: Element>(row: &mut [T], shift: T) -> T {
    #[cfg(target_arch = "x86_64")]
    {
        if T::DTYPE == DType::F32 && row.len() >= 32 && fast::available() {
            let row32 = unsafe {
                std::slice::from_raw_parts_mut(row.as_mut_ptr() as *mut f32, row.len())
            };
            let sum = unsafe { fast::exp_shift_f32(row32, shift.to_f64_lossy() as f32) };
            return T::from_f64(sum as f64);
        }
    }
    let s = shift.to_f64_lossy();
    let mut denom = 0.0f64;
    for val in row.iter_mut() {
        let e = (val.to_f64_lossy() - s).exp();
        denom += e;
        *val = T::from_f64(e);
    }
    T::from_f64(denom)
}

/// `row := softmax(row * scale)` in place. Exists for the tests that pin the
/// vectorized kernels against the f64 path; the attention forward composes
/// [`max_row`] and [`exp_shift_row`] tile by tile instead.
#[cfg(test)]
fn softmax_row<T: Element>(row: &mut [T], scale: T) {
    for val in row.iter_mut() {
        *val = *val * scale;
    }
    let maxv = max_row(row);
    let inv = T::one() / exp_shift_row(row, maxv);
    for val in row.iter_mut() {
        *val = *val * inv;
    }
}

#[cfg(target_arch = "x86_64")]
mod fast {
    //! AVX2 single-precision softmax row kernel.

    use std::arch::x86_64::*;

    pub fn available() -> bool {
        is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma")
    }

    /// Polynomial `exp` for 8 lanes, |rel err| < 3e-7 on [-87, 88]. Inputs
    /// are clamped to that range; the low clamp keeps results normal (no
    /// denormal stalls in the accumulation that follows).
    #[target_feature(enable = "avx2", enable = "fma")]
    unsafe fn exp8(x: __m256) -> __m256 {
        let hi = _mm256_set1_ps(88.376_26);
        let lo = _mm256_set1_ps(-87.0);
        let log2e = _mm256_set1_ps(std::f32::consts::LOG2_E);
        let ln2_hi = _mm256_set1_ps(0.693_359_4);
        let ln2_lo = _mm256_set1_ps(-2.121_944_4e-4);
        let x = _mm256_min_ps(_mm256_max_ps(x, lo), hi);
        // n = round(x / ln 2); r = x - n ln 2 in two pieces for accuracy.
        let n = _mm256_round_ps::<{ _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC }>(
            _mm256_mul_ps(x, log2e),
        );
        let r = _mm256_fnmadd_ps(n, ln2_hi, x);
        let r = _mm256_fnmadd_ps(n, ln2_lo, r);
        // exp(r) ~ degree-6 minimax polynomial on [-ln2/2, ln2/2].
        let mut p = _mm256_set1_ps(1.987_569_2e-4);
        p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(1.398_199_9e-3));
        p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(8.333_452e-3));
        p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(4.166_579_6e-2));
        p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(0.166_666_65));
        p = _mm256_fmadd_ps(p, r, _mm256_set1_ps(0.5));
        let r2 = _mm256_mul_ps(r, r);
        let mut y = _mm256_fmadd_ps(p, r2, r);
        y = _mm256_add_ps(y, _mm256_set1_ps(1.0));
        // y * 2^n via exponent-field arithmetic.
        let two_n = _mm256_castsi256_ps(_mm256_slli_epi32::<23>(_mm256_add_epi32(
            _mm256_cvtps_epi32(n),
            _mm256_set1_epi32(127),
        )));
        _mm256_mul_ps(y, two_n)
    }

    /// Maximum of the row.
    ///
    /// # Safety
    /// Caller must ensure AVX2+FMA are available (see [`available`]).
    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn max_f32(row: &[f32]) -> f32 {
        let n = row.len();
        let tail = n - n % 8;
        let mut vmax = _mm256_set1_ps(f32::NEG_INFINITY);
        for i in (0..tail).step_by(8) {
            vmax = _mm256_max_ps(vmax, _mm256_loadu_ps(row.as_ptr().add(i)));
        }
        let mut lanes = [0f32; 8];
        _mm256_storeu_ps(lanes.as_mut_ptr(), vmax);
        let mut maxv = lanes.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        for v in &row[tail..] {
            maxv = maxv.max(*v);
        }
        maxv
    }

    /// `row := exp(row - shift)` in place; returns the sum.
    ///
    /// # Safety
    /// Caller must ensure AVX2+FMA are available (see [`available`]).
    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn exp_shift_f32(row: &mut [f32], shift: f32) -> f32 {
        let n = row.len();
        let tail = n - n % 8;
        let vm = _mm256_set1_ps(shift);
        let mut vsum = _mm256_setzero_ps();
        for i in (0..tail).step_by(8) {
            let e = exp8(_mm256_sub_ps(_mm256_loadu_ps(row.as_ptr().add(i)), vm));
            _mm256_storeu_ps(row.as_mut_ptr().add(i), e);
            vsum = _mm256_add_ps(vsum, e);
        }
        let mut lanes = [0f32; 8];
        _mm256_storeu_ps(lanes.as_mut_ptr(), vsum);
        let mut denom: f32 = lanes.iter().sum();
        for v in &mut row[tail..] {
            *v = (*v - shift).exp();
            denom += *v;
        }
        denom
    }
}
