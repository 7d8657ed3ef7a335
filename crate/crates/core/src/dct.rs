//! Orthonormal 2-D DCT-II / DCT-III (inverse) as matrix products.
//!
//! For a field `A` of extent `M x N`, the transform is `B = C A D^T` where
//! `C[p][m] = alpha_p cos((2m+1) p pi / (2M))`, `alpha_0 = sqrt(1/M)`,
//! `alpha_p = sqrt(2/M)` for `p > 0`, and `D` is the same construction at
//! extent `N`. Orthonormality gives the inverse as `A = C^T B D`, and makes
//! the pair exact adjoints of each other — which is what the autodiff tape
//! relies on for their gradients.
//!
//! Leading dimensions are treated as batch: an `[.., M, N]` tensor is
//! transformed slice by slice, with the `D^T` product fused across all
//! slices into a single GEMM.

use std::any::Any;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::gemm::{gemm, matmul, transpose_slices};
use crate::tensor::{DType, Element, Tensor};

/// Precomputed transform matrices for one spatial extent.
pub struct DctPlan<T: Element> {
    rows: usize,
    cols: usize,
    /// `[rows, rows]`, row index = frequency.
    c: Tensor<T>,
    /// `[cols, cols]`, row index = frequency.
    d: Tensor<T>,
    ct: Tensor<T>,
    dt: Tensor<T>,
}

/// Orthonormal DCT-II matrix of extent `m`, computed in f64 and cast.
fn dct_matrix<T: Element>(m: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); m * m];
    for p in 0..m {
        let alpha = if p == 0 {
            (1.0 / m as f64).sqrt()
        } else {
            (2.0 / m as f64).sqrt()
        };
        for s in 0..m {
            let angle = (2 * s + 1) as f64 * p as f64 * std::f64::consts::PI / (2.0 * m as f64);
            data[p * m + s] = T::from_f64(alpha * angle.cos());
        }
    }
    Tensor::new(vec![m, m], data).expect("square matrix dims")
}

impl<T: Element> DctPlan<T> {
    fn build(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("plan extents must be positive"));
        }
        let c = dct_matrix::<T>(rows);
        let d = dct_matrix::<T>(cols);
        let ct = c.transpose2d()?;
        let dt = d.transpose2d()?;
        Ok(DctPlan { rows, cols, c, d, ct, dt })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-axis transform matrix (frequency-major).
    pub fn row_matrix(&self) -> &Tensor<T> {
        &self.c
    }

    /// Forward transform of the trailing two axes: `B = C A D^T`.
    pub fn dct2d(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(x, &self.dt, &self.ct)
    }

    /// Inverse transform of the trailing two axes: `A = C^T B D`.
    pub fn idct2d(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply(x, &self.d, &self.c)
    }

    /// All four plan matrices: `(C, D, Cᵀ, Dᵀ)`. The fused conduction path
    /// composes its own pipeline from them.
    pub(crate) fn matrices(&self) -> (&Tensor<T>, &Tensor<T>, &Tensor<T>, &Tensor<T>) {
        (&self.c, &self.d, &self.ct, &self.dt)
    }

    /// Shared pipeline for `out_s = L · x_s · right` on every trailing
    /// `[m, n]` slice, with `left_t = Lᵀ`. Both products run as single
    /// whole-batch GEMMs: the column side directly on `[slices·m, n]` rows,
    /// the row side as `(L · E)ᵀ = Eᵀ · Lᵀ` after a per-slice transpose.
    /// Keeping the GEMMs large is what holds the N^1.5 scaling down to
    /// small extents — per-slice calls drown in packing overhead there.
    fn apply(&self, x: &Tensor<T>, right: &Tensor<T>, left_t: &Tensor<T>) -> Result<Tensor<T>> {
        let dims = x.dims();
        if dims.len() < 2 {
            return Err(Error::shape(format!(
                "dct2d needs rank >= 2, got {:?}",
                dims
            )));
        }
        let (m, n) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        if m != self.rows || n != self.cols {
            return Err(Error::shape(format!(
                "plan is {}x{}, tensor trailing dims are {}x{}",
                self.rows, self.cols, m, n
            )));
        }
        let slices = x.numel() / (m * n);
        // E = x · right, all slices at once: [slices·m, n] x [n, n].
        let mut a = vec![T::zero(); x.numel()];
        gemm(slices * m, n, n, x.as_slice(), right.as_slice(), &mut a);
        // outᵀ = Eᵀ · Lᵀ: [slices·n, m] x [m, m], then restore layout.
        let mut b = vec![T::zero(); x.numel()];
        transpose_slices(slices, m, n, &a, &mut b);
        gemm(slices * n, m, m, &b, left_t.as_slice(), &mut a);
        transpose_slices(slices, n, m, &a, &mut b);
        Tensor::new(dims.to_vec(), b)
    }

    /// max |C C^T - I| over both axis matrices; a health probe used by the
    /// verification suite.
    pub fn orthonormality_error(&self) -> f64 {
        let err = |mat: &Tensor<T>| -> f64 {
            let gram = matmul(mat, &mat.transpose2d().unwrap()).unwrap();
            let m = mat.dims()[0];
            let mut worst = 0.0f64;
            for i in 0..m {
                for j in 0..m {
                    let want = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((gram.at(&[i, j]).to_f64_lossy() - want).abs());
                }
            }
            worst
        };
        err(&self.c).max(err(&self.d))
    }
}

/// Process-wide plan cache keyed by (rows, cols, dtype).
pub fn build_plan<T: Element>(rows: usize, cols: usize) -> Result<Arc<DctPlan<T>>> {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize, DType), Box<dyn Any + Send + Sync>>>> =
        OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().expect("plan cache poisoned");
    let key = (rows, cols, T::DTYPE);
    if let Some(entry) = map.get(&key) {
        let plan = entry
            .downcast_ref::<Arc<DctPlan<T>>>()
            .expect("plan cache dtype key out of sync");
        return Ok(Arc::clone(plan));
    }
    let plan = Arc::new(DctPlan::<T>::build(rows, cols)?);
    map.insert(key, Box::new(Arc::clone(&plan)));
    Ok(plan)
}

/// O(M^2 N^2) direct-sum forward DCT of a rank-2 field; the reference the
/// fast path is pinned against.
pub fn dct2d_naive<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    naive_transform(x, false)
}

/// Direct-sum inverse DCT of a rank-2 field.
pub fn idct2d_naive<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    naive_transform(x, true)
}

fn naive_transform<T: Element>(x: &Tensor<T>, inverse: bool) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::shape(format!(
            "naive transform is rank-2 only, got {:?}",
            x.dims()
        )));
    }
    let (m, n) = (x.dims()[0], x.dims()[1]);
    let pi = std::f64::consts::PI;
    let alpha = |idx: usize, extent: usize| -> f64 {
        if idx == 0 {
            (1.0 / extent as f64).sqrt()
        } else {
            (2.0 / extent as f64).sqrt()
        }
    };
    let mut out = vec![T::zero(); m * n];
    for a in 0..m {
        for b in 0..n {
            let mut acc = 0.0f64;
            for i in 0..m {
                for j in 0..n {
                    let v = x.at(&[i, j]).to_f64_lossy();
                    let (cr, cc) = if inverse {
                        // out[a,b] = sum_{p,q} alpha_p alpha_q X[p,q] cos(..a..) cos(..b..)
                        (
                            alpha(i, m) * ((2 * a + 1) as f64 * i as f64 * pi / (2.0 * m as f64)).cos(),
                            alpha(j, n) * ((2 * b + 1) as f64 * j as f64 * pi / (2.0 * n as f64)).cos(),
                        )
                    } else {
                        // out[p,q] = alpha_p alpha_q sum_{m,n} x[m,n] cos(..) cos(..)
                        (
                            alpha(a, m) * ((2 * i + 1) as f64 * a as f64 * pi / (2.0 * m as f64)).cos(),
                            alpha(b, n) * ((2 * j + 1) as f64 * b as f64 * pi / (2.0 * n as f64)).cos(),
                        )
                    };
                    acc += v * cr * cc;
                }
            }
            out[a * n + b] = T::from_f64(acc);
        }
    }
    Tensor::new(vec![m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn two_by_two_matrix_is_the_known_butterfly() {
        let plan = build_plan::<f64>(2, 2).unwrap();
        let c = plan.row_matrix();
        let h = 0.5f64.sqrt();
        let want = [[h, h], [h, -h]];
        for p in 0..2 {
            for m in 0..2 {
                assert!((c.at(&[p, m]) - want[p][m]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_by_two_transform_of_1234() {
        // Hand-computed: C [[1,2],[3,4]] C^T = [[5,-1],[-2,0]].
        let x = Tensor::<f64>::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let plan = build_plan::<f64>(2, 2).unwrap();
        let b = plan.dct2d(&x).unwrap();
        let want = [5.0, -1.0, -2.0, 0.0];
        for (got, want) in b.as_slice().iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn matrices_are_orthonormal() {
        for &(m, n) in &[(2, 2), (4, 4), (8, 16), (7, 5)] {
            let plan = build_plan::<f64>(m, n).unwrap();
            assert!(
                plan.orthonormality_error() < 1e-12,
                "extent {m}x{n}: {}",
                plan.orthonormality_error()
            );
        }
        let plan32 = build_plan::<f32>(16, 16).unwrap();
        assert!(plan32.orthonormality_error() < 1e-5);
    }

    #[test]
    fn fast_path_matches_naive_oracle_nonsquare() {
        let mut rng = StdRng::seed_from_u64(7);
        let x = Tensor::<f64>::from_fn(vec![5, 7], |_| rng.random_range(-2.0..2.0)).unwrap();
        let plan = build_plan::<f64>(5, 7).unwrap();
        let fast = plan.dct2d(&x).unwrap();
        let naive = dct2d_naive(&x).unwrap();
        assert!(fast.max_abs_diff(&naive) < 1e-12);
        let fast_inv = plan.idct2d(&x).unwrap();
        let naive_inv = idct2d_naive(&x).unwrap();
        assert!(fast_inv.max_abs_diff(&naive_inv) < 1e-12);
    }

    #[test]
    fn round_trip_recovers_input() {
        let mut rng = StdRng::seed_from_u64(8);
        let x64 = Tensor::<f64>::from_fn(vec![3, 12, 8], |_| rng.random_range(-1.0..1.0)).unwrap();
        let plan = build_plan::<f64>(12, 8).unwrap();
        let rt = plan.idct2d(&plan.dct2d(&x64).unwrap()).unwrap();
        assert!(rt.max_abs_diff(&x64) < 1e-12);

        let x32: Tensor<f32> = x64.cast();
        let plan32 = build_plan::<f32>(12, 8).unwrap();
        let rt32 = plan32.idct2d(&plan32.dct2d(&x32).unwrap()).unwrap();
        assert!(rt32.max_abs_diff(&x32) < 1e-5);
    }

    #[test]
    fn constant_field_maps_to_pure_dc() {
        let x = Tensor::<f64>::full(vec![4, 6], 2.5).unwrap();
        let plan = build_plan::<f64>(4, 6).unwrap();
        let b = plan.dct2d(&x).unwrap();
        // DC bin holds mean * sqrt(M*N); everything else is zero.
        assert!((b.at(&[0, 0]) - 2.5 * 24.0f64.sqrt()).abs() < 1e-12);
        for p in 0..4 {
            for q in 0..6 {
                if p + q > 0 {
                    assert!(b.at(&[p, q]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn parseval_energy_is_preserved() {
        let mut rng = StdRng::seed_from_u64(9);
        let x = Tensor::<f64>::from_fn(vec![9, 4], |_| rng.random_range(-1.0..1.0)).unwrap();
        let plan = build_plan::<f64>(9, 4).unwrap();
        let b = plan.dct2d(&x).unwrap();
        let energy = |t: &Tensor<f64>| t.as_slice().iter().map(|v| v * v).sum::<f64>();
        assert!((energy(&x) - energy(&b)).abs() < 1e-12);
    }

    #[test]
    fn single_cosine_mode_lights_one_bin() {
        let (m, n) = (8usize, 8usize);
        let (p0, q0) = (3usize, 5usize);
        let pi = std::f64::consts::PI;
        let x = Tensor::<f64>::from_fn(vec![m, n], |i| {
            let (r, c) = (i / n, i % n);
            ((2 * r + 1) as f64 * p0 as f64 * pi / (2.0 * m as f64)).cos()
                * ((2 * c + 1) as f64 * q0 as f64 * pi / (2.0 * n as f64)).cos()
        })
        .unwrap();
        let plan = build_plan::<f64>(m, n).unwrap();
        let b = plan.dct2d(&x).unwrap();
        for p in 0..m {
            for q in 0..n {
                if (p, q) == (p0, q0) {
                    // alpha_p alpha_q (M/2)(N/2) style mass: just require dominance.
                    assert!(b.at(&[p, q]).abs() > 1.0);
                } else {
                    assert!(b.at(&[p, q]).abs() < 1e-12, "leak at {p},{q}");
                }
            }
        }
    }

    #[test]
    fn batched_matches_per_slice() {
        let mut rng = StdRng::seed_from_u64(10);
        let x = Tensor::<f64>::from_fn(vec![2, 3, 4, 5], |_| rng.random_range(-1.0..1.0)).unwrap();
        let plan = build_plan::<f64>(4, 5).unwrap();
        let batched = plan.dct2d(&x).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let off = (b * 3 + c) * 20;
                let slice =
                    Tensor::new(vec![4, 5], x.as_slice()[off..off + 20].to_vec()).unwrap();
                let want = plan.dct2d(&slice).unwrap();
                for i in 0..4 {
                    for j in 0..5 {
                        assert_eq!(batched.at(&[b, c, i, j]), want.at(&[i, j]));
                    }
                }
            }
        }
    }

    #[test]
    fn plan_cache_returns_shared_instances() {
        let a = build_plan::<f64>(6, 6).unwrap();
        let b = build_plan::<f64>(6, 6).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        // Different dtype, same extents: distinct entry, no panic.
        let _ = build_plan::<f32>(6, 6).unwrap();
    }

    #[test]
    fn shape_validation() {
        let plan = build_plan::<f64>(4, 4).unwrap();
        let wrong = Tensor::<f64>::zeros(vec![3, 4]).unwrap();
        assert!(plan.dct2d(&wrong).is_err());
        let rank1 = Tensor::<f64>::zeros(vec![4]).unwrap();
        assert!(plan.dct2d(&rank1).is_err());
    }
}
