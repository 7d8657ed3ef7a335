//! Heat conduction operator: spectral evolution of a temperature field.
//!
//! A field `U0` with Neumann (zero-flux) boundaries evolves under the heat
//! equation by damping each cosine mode independently:
//!
//! ```text
//! U^t = idct2d( dct2d(U0) ∘ exp(-k (ω_p² + ω_q²) t) ),   ω_p = πp/M
//! ```
//!
//! Diffusivity `k` is not a single physical constant here — it is predicted
//! per frequency bin *and* per channel from a learned frequency-value
//! embedding (FVE) table, which lets the operator amplify as well as damp
//! selected bands. `k ≡ 0` makes the operator the identity; the DC
//! coefficient is always 1, so spatial means survive any `k`.

use std::sync::Arc;

use crate::autograd::{NodeId, Tape};
use crate::dct::DctPlan;
use crate::error::{Error, Result};
use crate::gemm::{gemm, matmul, transpose_slices};
use crate::ops;
use crate::tensor::{Element, Tensor};

/// Squared angular frequencies `ω_p² + ω_q²` for an M×N grid of cosine modes.
pub struct FrequencyGrid<T: Element> {
    m: usize,
    n: usize,
    omega2: Tensor<T>,
}

impl<T: Element> FrequencyGrid<T> {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::invalid("frequency grid extents must be positive"));
        }
        let pi = std::f64::consts::PI;
        let omega2 = Tensor::from_fn(vec![m, n], |i| {
            let (p, q) = (i / n, i % n);
            let wp = pi * p as f64 / m as f64;
            let wq = pi * q as f64 / n as f64;
            T::from_f64(wp * wp + wq * wq)
        })?;
        Ok(FrequencyGrid { m, n, omega2 })
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    /// `[M, N]` table of ω².
    pub fn omega2(&self) -> &Tensor<T> {
        &self.omega2
    }
}

/// Learned per-frequency embedding table, `[M, N, D]`.
#[derive(Clone)]
pub struct FveTable<T: Element> {
    table: Tensor<T>,
}

impl<T: Element> FveTable<T> {
    pub fn new(table: Tensor<T>) -> Result<Self> {
        if table.rank() != 3 {
            return Err(Error::shape(format!(
                "FVE table must be [M, N, D], got {:?}",
                table.dims()
            )));
        }
        Ok(FveTable { table })
    }

    pub fn table(&self) -> &Tensor<T> {
        &self.table
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.table.dims()[0], self.table.dims()[1])
    }

    pub fn dim(&self) -> usize {
        self.table.dims()[2]
    }

    /// Resize to a new frequency-grid extent, preserving continuous
    /// frequency: destination bin (i, j) bilinearly samples the zero-padded
    /// source at (i·M/M', j·N/N'). Same-extent resize is bit-identical;
    /// sampling never reaches past one padded row/column, upsampled tables
    /// blend toward zero only at the high-frequency edge.
    pub fn resize(&self, new_m: usize, new_n: usize) -> Result<FveTable<T>> {
        if new_m == 0 || new_n == 0 {
            return Err(Error::invalid("resize extents must be positive"));
        }
        let (m, n) = self.extents();
        let d = self.dim();
        if (new_m, new_n) == (m, n) {
            return Ok(self.clone());
        }
        let src = self.table.as_slice();
        // Zero beyond the source extent (the padded high-frequency region).
        let fetch = |i: usize, j: usize, ch: usize| -> T {
            if i < m && j < n {
                src[(i * n + j) * d + ch]
            } else {
                T::zero()
            }
        };
        let mut out = vec![T::zero(); new_m * new_n * d];
        for i in 0..new_m {
            // Exact rational sample coordinate i*m/new_m.
            let (i0, fi) = split_coord(i * m, new_m);
            for j in 0..new_n {
                let (j0, fj) = split_coord(j * n, new_n);
                for ch in 0..d {
                    let v = if fi == 0.0 && fj == 0.0 {
                        // Integer hit: copy the source value bit-for-bit.
                        fetch(i0, j0, ch)
                    } else {
                        let v00 = fetch(i0, j0, ch).to_f64_lossy();
                        let v01 = fetch(i0, j0 + 1, ch).to_f64_lossy();
                        let v10 = fetch(i0 + 1, j0, ch).to_f64_lossy();
                        let v11 = fetch(i0 + 1, j0 + 1, ch).to_f64_lossy();
                        T::from_f64(
                            v00 * (1.0 - fi) * (1.0 - fj)
                                + v01 * (1.0 - fi) * fj
                                + v10 * fi * (1.0 - fj)
                                + v11 * fi * fj,
                        )
                    };
                    out[(i * new_n + j) * d + ch] = v;
                }
            }
        }
        FveTable::new(Tensor::new(vec![new_m, new_n, d], out)?)
    }
}

/// Integer/fractional split of the rational num/den.
fn split_coord(num: usize, den: usize) -> (usize, f64) {
    let i0 = num / den;
    let rem = num % den;
    (i0, rem as f64 / den as f64)
}

/// A concrete diffusivity field with its decay coefficients.
pub struct ThermalField<T: Element> {
    /// `[C, M, N]` per-channel, per-frequency diffusivity (sign-free).
    pub k: Tensor<T>,
    /// Conduction time.
    pub t: T,
    /// `exp(-k ω² t)`, `[C, M, N]`.
    pub coeff: Tensor<T>,
}

impl<T: Element> ThermalField<T> {
    pub fn new(k: Tensor<T>, grid: &FrequencyGrid<T>, t: T) -> Result<Self> {
        if k.rank() != 3 || k.dims()[1] != grid.m || k.dims()[2] != grid.n {
            return Err(Error::shape(format!(
                "k must be [C, {}, {}], got {:?}",
                grid.m,
                grid.n,
                k.dims()
            )));
        }
        if !k.all_finite() {
            return Err(Error::NonFinite("diffusivity field contains NaN/Inf".into()));
        }
        let coeff = decay_coefficients(&k, grid, t)?;
        Ok(ThermalField { k, t, coeff })
    }

    /// Single diffusivity value for every channel, position, frequency.
    pub fn uniform(channels: usize, grid: &FrequencyGrid<T>, k: T, t: T) -> Result<Self> {
        let kt = Tensor::full(vec![channels, grid.m, grid.n], k)?;
        Self::new(kt, grid, t)
    }
}

/// Linear map FVE → diffusivity: `k[c,p,q] = Σ_d fve[p,q,d] w[d,c] + b[c]`.
pub fn predict_k<T: Element>(
    fve: &FveTable<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (m, n) = fve.extents();
    let d = fve.dim();
    if w.rank() != 2 || w.dims()[0] != d || b.rank() != 1 || b.dims()[0] != w.dims()[1] {
        return Err(Error::shape(format!(
            "k predictor wants w[{d}, C] and b[C], got {:?} and {:?}",
            w.dims(),
            b.dims()
        )));
    }
    let c = w.dims()[1];
    let flat = fve.table().reshape(vec![m * n, d])?;
    let k_mn_c = matmul(&flat, w)?; // [M*N, C]
    let biased = ops::binary_broadcast(&k_mn_c, b, |x, y| x + y)?;
    ops::permute(&biased.reshape(vec![m, n, c])?, &[2, 0, 1])
}

/// `coeff = exp(-k ∘ ω² · t)` for `k` of shape `[C, M, N]`.
pub fn decay_coefficients<T: Element>(
    k: &Tensor<T>,
    grid: &FrequencyGrid<T>,
    t: T,
) -> Result<Tensor<T>> {
    if !k.all_finite() {
        return Err(Error::NonFinite("diffusivity field contains NaN/Inf".into()));
    }
    let scaled = ops::binary_broadcast(k, grid.omega2(), move |kv, om| -kv * om * t)?;
    Ok(scaled.map(|v| v.exp()))
}

/// Evolve `U0 [B, C, M, N]` by one conduction application: spectrum in,
/// damp, spectrum out. Pure inference path (the tape mirror is
/// [`hco_tape`]).
///
/// The whole pipeline is fused: `Cᵀ((C U0 Dᵀ) ∘ coeff)D` runs as four
/// whole-batch GEMMs with the damping applied in place on the transposed
/// intermediate, so no per-slice matrix calls and no separate broadcast
/// allocation. Equivalent to `idct2d(dct2d(u0) ∘ coeff)` term for term.
pub fn hco_forward<T: Element>(
    plan: &DctPlan<T>,
    coeff: &Tensor<T>,
    u0: &Tensor<T>,
) -> Result<Tensor<T>> {
    validate_hco_shapes(plan, coeff, u0)?;
    let dims = u0.dims();
    let (channels, m, n) = (dims[1], dims[2], dims[3]);
    let slices = dims[0] * channels;
    let (cmat, dmat, ct, dt) = plan.matrices();
    let numel = u0.numel();

    let mut a = vec![T::zero(); numel];
    let mut b = vec![T::zero(); numel];
    // E = U0 · Dᵀ over all slices, then Sᵀ = Eᵀ · Cᵀ (S = C U0 Dᵀ).
    gemm(slices * m, n, n, u0.as_slice(), dt.as_slice(), &mut a);
    transpose_slices(slices, m, n, &a, &mut b);
    gemm(slices * n, m, m, &b, ct.as_slice(), &mut a);
    // Damp in place on the transposed spectrum: a[s][j, i] *= coeff[c][i, j].
    let broadcast_channel = coeff.dims()[0] == 1;
    for s in 0..slices {
        let ch = if broadcast_channel { 0 } else { s % channels };
        let cs = &coeff.as_slice()[ch * m * n..(ch + 1) * m * n];
        let asl = &mut a[s * m * n..(s + 1) * m * n];
        for j in 0..n {
            for i in 0..m {
                asl[j * m + i] = asl[j * m + i] * cs[i * n + j];
            }
        }
    }
    // U = Cᵀ S_d D via P = S_dᵀ · C, then U = Pᵀ · D.
    gemm(slices * n, m, m, &a, cmat.as_slice(), &mut b);
    transpose_slices(slices, n, m, &b, &mut a);
    gemm(slices * m, n, n, &a, dmat.as_slice(), &mut b);
    Tensor::new(dims.to_vec(), b)
}

fn validate_hco_shapes<T: Element>(
    plan: &DctPlan<T>,
    coeff: &Tensor<T>,
    u0: &Tensor<T>,
) -> Result<()> {
    if u0.rank() != 4 {
        return Err(Error::shape(format!(
            "conduction input must be [B, C, M, N], got {:?}",
            u0.dims()
        )));
    }
    let (m, n) = (u0.dims()[2], u0.dims()[3]);
    if (plan.rows(), plan.cols()) != (m, n) {
        return Err(Error::shape(format!(
            "plan {}x{} vs field {}x{}",
            plan.rows(),
            plan.cols(),
            m,
            n
        )));
    }
    let cd = coeff.dims();
    let ok = cd.len() == 3
        && (cd[0] == u0.dims()[1] || cd[0] == 1)
        && cd[1] == m
        && cd[2] == n;
    if !ok {
        return Err(Error::shape(format!(
            "coeff must be [C|1, {m}, {n}], got {:?}",
            cd
        )));
    }
    Ok(())
}

/// Differentiable conduction with predicted diffusivity, composed on the
/// tape: `fve -> k -> coeff -> spectral damp`. Returns the output node.
#[allow(clippy::too_many_arguments)]
pub fn hco_tape<T: Element>(
    tape: &mut Tape<T>,
    x: NodeId,
    fve: NodeId,
    w: NodeId,
    b: NodeId,
    grid: &FrequencyGrid<T>,
    t: T,
    plan: &Arc<DctPlan<T>>,
) -> Result<NodeId> {
    let k = predict_k_tape(tape, fve, w, b)?;
    let coeff = decay_coefficients_tape(tape, k, grid, t)?;
    hco_apply_tape(tape, x, coeff, plan)
}

/// Tape mirror of [`predict_k`].
pub fn predict_k_tape<T: Element>(
    tape: &mut Tape<T>,
    fve: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let fdims = tape.value(fve).dims().to_vec();
    if fdims.len() != 3 {
        return Err(Error::shape(format!("FVE node must be [M,N,D], got {:?}", fdims)));
    }
    let (m, n, d) = (fdims[0], fdims[1], fdims[2]);
    let c = tape.value(w).dims().get(1).copied().unwrap_or(0);
    let flat = tape.reshape(fve, vec![m * n, d])?;
    let k = tape.matmul(flat, w)?;
    let k = tape.add(k, b)?;
    let k = tape.reshape(k, vec![m, n, c])?;
    tape.permute(k, &[2, 0, 1])
}

/// Tape mirror of [`decay_coefficients`].
pub fn decay_coefficients_tape<T: Element>(
    tape: &mut Tape<T>,
    k: NodeId,
    grid: &FrequencyGrid<T>,
    t: T,
) -> Result<NodeId> {
    let om = tape.leaf(grid.omega2().clone());
    let prod = tape.mul(k, om)?;
    let scaled = tape.mul_scalar(prod, -t)?;
    tape.exp(scaled)
}

/// Tape mirror of [`hco_forward`] given a coeff node.
pub fn hco_apply_tape<T: Element>(
    tape: &mut Tape<T>,
    x: NodeId,
    coeff: NodeId,
    plan: &Arc<DctPlan<T>>,
) -> Result<NodeId> {
    validate_hco_shapes(plan, tape.value(coeff), tape.value(x))?;
    let spec = tape.dct2d(x, plan)?;
    let damped = tape.mul(spec, coeff)?;
    tape.idct2d(damped, plan)
}
