//! Finite-difference physics oracle for the conduction operator.
//!
//! An explicit FTCS march of the 2-D heat equation with zero-flux (Neumann)
//! boundaries, written with no code shared with the spectral path beyond
//! the tensor type. It exists to answer one question: does the learned
//! operator, with diffusivity pinned to a physical constant, evolve a field
//! the way physics does?

use crate::dct::build_plan;
use crate::error::{Error, Result};
use crate::hco::{hco_forward, FrequencyGrid, ThermalField};
use crate::tensor::Tensor;

/// Stability bound for the explicit scheme at unit grid spacing.
fn max_stable_dt(k: f64) -> f64 {
    if k <= 0.0 {
        f64::INFINITY
    } else {
        1.0 / (4.0 * k)
    }
}

/// One temperature field mid-march.
#[derive(Clone)]
pub struct HeatGrid {
    pub u: Tensor<f64>,
    pub k: f64,
    pub dt: f64,
}

impl HeatGrid {
    pub fn new(u: Tensor<f64>, k: f64, dt: f64) -> Result<Self> {
        if u.rank() != 2 {
            return Err(Error::shape(format!(
                "heat grid field must be rank 2, got {:?}",
                u.dims()
            )));
        }
        if k < 0.0 || !k.is_finite() {
            return Err(Error::invalid(format!("diffusivity {k} must be finite and >= 0")));
        }
        if dt <= 0.0 || !dt.is_finite() {
            return Err(Error::invalid(format!("time step {dt} must be finite and > 0")));
        }
        if dt > max_stable_dt(k) + 1e-15 {
            return Err(Error::Stability(format!(
                "dt = {dt} exceeds 1/(4k) = {} for k = {k}; the explicit march would diverge",
                max_stable_dt(k)
            )));
        }
        Ok(HeatGrid { u, k, dt })
    }

    pub fn total_heat(&self) -> f64 {
        self.u.as_slice().iter().sum()
    }
}

/// Advance one step: `u' = u + k dt L(u)`, 5-point Laplacian, mirrored
/// ghost cells (so boundary cells see their own value across the edge).
pub fn ftcs_step(grid: &HeatGrid) -> Result<HeatGrid> {
    let (h, w) = (grid.u.dims()[0], grid.u.dims()[1]);
    let u = grid.u.as_slice();
    let kdt = grid.k * grid.dt;
    let mut next = vec![0.0f64; h * w];
    for i in 0..h {
        for j in 0..w {
            let c = u[i * w + j];
            // Mirror: out-of-range neighbor reflects to the cell itself.
            let up = if i > 0 { u[(i - 1) * w + j] } else { c };
            let dn = if i + 1 < h { u[(i + 1) * w + j] } else { c };
            let lf = if j > 0 { u[i * w + j - 1] } else { c };
            let rt = if j + 1 < w { u[i * w + j + 1] } else { c };
            next[i * w + j] = c + kdt * (up + dn + lf + rt - 4.0 * c);
        }
    }
    Ok(HeatGrid { u: Tensor::new(vec![h, w], next)?, k: grid.k, dt: grid.dt })
}

/// March `u0` forward to time `t` in steps of `dt` (`t/dt` must be integral
/// within rounding).
pub fn ftcs_solve(u0: &Tensor<f64>, k: f64, t: f64, dt: f64) -> Result<Tensor<f64>> {
    if t < 0.0 {
        return Err(Error::invalid(format!("cannot march to negative time {t}")));
    }
    let steps_f = t / dt;
    let steps = steps_f.round();
    if (steps_f - steps).abs() > 1e-9 * steps.max(1.0) {
        return Err(Error::invalid(format!(
            "t/dt = {steps_f} is not an integral step count"
        )));
    }
    let mut grid = HeatGrid::new(u0.clone(), k, dt)?;
    for _ in 0..steps as u64 {
        grid = ftcs_step(&grid)?;
    }
    Ok(grid.u)
}

/// Synthesize a random field whose spectrum lives entirely in the low band
/// `p <= cutoff_p, q <= cutoff_q` (uniform random coefficients, DC removed
/// is *not* required — DC is conserved identically by both solvers).
pub fn band_limited_field(
    m: usize,
    n: usize,
    cutoff_p: usize,
    cutoff_q: usize,
    seed: u64,
) -> Result<Tensor<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let spec = Tensor::<f64>::from_fn(vec![m, n], |i| {
        let (p, q) = (i / n, i % n);
        if p <= cutoff_p && q <= cutoff_q {
            rng.random_range(-1.0..1.0)
        } else {
            0.0
        }
    })?;
    let plan = build_plan::<f64>(m, n)?;
    plan.idct2d(&spec)
}

/// Evolve the same field with both solvers and report
/// `||spectral - finite_difference||_2 / ||u0||_2`.
///
/// dt = min(0.01, 1/(8k)): half the stability bound, and small enough that
/// the O(dt) march error stays well under the discretization gap being
/// measured.
pub fn compare_hco_ftcs(u0: &Tensor<f64>, k: f64, t: f64) -> Result<f64> {
    if u0.rank() != 2 {
        return Err(Error::shape(format!(
            "comparison field must be rank 2, got {:?}",
            u0.dims()
        )));
    }
    let (m, n) = (u0.dims()[0], u0.dims()[1]);
    let dt_raw = if k > 0.0 { (1.0 / (8.0 * k)).min(0.01) } else { 0.01 };
    // Snap dt so t/dt is integral.
    let steps = (t / dt_raw).ceil().max(1.0);
    let dt = t / steps;

    let fd = ftcs_solve(u0, k, t, dt)?;

    let grid = FrequencyGrid::<f64>::new(m, n)?;
    let field = ThermalField::uniform(1, &grid, k, t)?;
    let plan = build_plan::<f64>(m, n)?;
    let spectral4 = hco_forward(&plan, &field.coeff, &u0.reshape(vec![1, 1, m, n])?)?;
    let spectral = spectral4.reshape(vec![m, n])?;

    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (s, f) in spectral.as_slice().iter().zip(fd.as_slice()) {
        num += (s - f) * (s - f);
    }
    for v in u0.as_slice() {
        den += v * v;
    }
    Ok((num / den.max(1e-300)).sqrt())
}
