//! Self-checking suites behind the `verify` command. Each check runs an
//! invariant of the numerical core, records the worst measured error, and
//! compares it against a pinned tolerance; the caller turns any failure
//! into a nonzero exit. Everything is deterministic for a given seed.

use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check, Tape};
use crate::dct::{build_plan, dct2d_naive};
use crate::error::{Error, Result};
use crate::hco::{decay_coefficients, hco_forward, hco_tape, FrequencyGrid, ThermalField};
use crate::layers::{heat_layer_forward, Conduction, Graph, HeatLayerParams, ParamId, ParamStore};
use crate::model::{build_model, Model, ModelConfig};
use crate::oracle::{band_limited_field, compare_hco_ftcs, ftcs_solve};
use crate::ops;
use crate::tensor::Tensor;

/// One invariant's outcome: its worst measured error against the pinned
/// tolerance.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: &'static str,
    pub measured: f64,
    pub tolerance: f64,
}

impl CheckResult {
    fn new(suite: &'static str, name: &'static str, measured: f64, tolerance: f64) -> Self {
        CheckResult { suite, name, measured, tolerance }
    }

    pub fn passed(&self) -> bool {
        self.measured.is_finite() && self.measured <= self.tolerance
    }

    /// One human-readable report line.
    pub fn line(&self) -> String {
        format!(
            "[{}] {}/{}: measured {:.3e}, tolerance {:.1e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

/// Which invariant family to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Dct,
    Hco,
    Oracle,
    Grad,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dct" => Ok(Suite::Dct),
            "hco" => Ok(Suite::Hco),
            "oracle" => Ok(Suite::Oracle),
            "grad" => Ok(Suite::Grad),
            "all" => Ok(Suite::All),
            other => Err(Error::invalid(format!(
                "unknown suite '{other}' (expected dct|hco|oracle|grad|all)"
            ))),
        }
    }
}

/// Run a suite (or all of them) and return every check's outcome.
pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    match suite {
        Suite::Dct => out.extend(dct_suite(seed)?),
        Suite::Hco => out.extend(hco_suite(seed)?),
        Suite::Oracle => out.extend(oracle_suite(seed)?),
        Suite::Grad => out.extend(grad_suite(seed, BACKBONE_SPOT_SAMPLES)?),
        Suite::All => {
            out.extend(dct_suite(seed)?);
            out.extend(hco_suite(seed)?);
            out.extend(oracle_suite(seed)?);
            out.extend(grad_suite(seed, BACKBONE_SPOT_SAMPLES)?);
        }
    }
    Ok(out)
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(CheckResult::passed)
}

/// Full report: one line per check plus a tally.
pub fn report(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&r.line());
        s.push('\n');
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed == 0 {
        s.push_str(&format!("all {} checks passed\n", results.len()));
    } else {
        s.push_str(&format!("{failed} of {} checks FAILED\n", results.len()));
    }
    s
}

/// `‖M Mᵀ − I‖∞` for a square matrix; zero exactly when M is orthonormal.
/// Public so a deliberately corrupted matrix can be fed through the same
/// check the suite uses.
pub fn orthonormality_defect(mat: &Tensor<f64>) -> Result<f64> {
    if mat.rank() != 2 || mat.dims()[0] != mat.dims()[1] {
        return Err(Error::shape(format!(
            "orthonormality wants a square matrix, got {:?}",
            mat.dims()
        )));
    }
    let m = mat.dims()[0];
    let v = mat.as_slice();
    let mut worst = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let mut acc = 0.0;
            for k in 0..m {
                acc += v[i * m + k] * v[j * m + k];
            }
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((acc - want).abs());
        }
    }
    Ok(worst)
}

fn randt(rng: &mut ChaCha8Rng, dims: Vec<usize>, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(-scale..scale)).unwrap()
}

// ---------------------------------------------------------------------------
// dct suite
// ---------------------------------------------------------------------------

fn dct_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0d01);

    // Orthonormality of every transform matrix up to 64.
    let mut worst_ortho = 0.0f64;
    for size in 1..=64usize {
        let plan = build_plan::<f64>(size, size)?;
        worst_ortho = worst_ortho.max(plan.orthonormality_error());
    }

    // Fast path against the quadruple-loop definition.
    let mut worst_naive = 0.0f64;
    for size in 1..=16usize {
        let plan = build_plan::<f64>(size, size)?;
        let x = randt(&mut rng, vec![size, size], 1.0);
        let fast = plan.dct2d(&x)?;
        let slow = dct2d_naive(&x)?;
        worst_naive = worst_naive.max(fast.max_abs_diff(&slow));
    }

    // Round-trip and Parseval in single precision.
    let mut worst_round = 0.0f64;
    let mut worst_parseval = 0.0f64;
    for &(m, n) in &[(8usize, 8usize), (16, 16), (24, 40), (32, 32), (64, 64)] {
        let plan = build_plan::<f32>(m, n)?;
        let x = Tensor::<f32>::from_fn(vec![m, n], |_| rng.random_range(-1.0..1.0f32))?;
        let spec = plan.dct2d(&x)?;
        let back = plan.idct2d(&spec)?;
        worst_round = worst_round.max(back.max_abs_diff(&x));
        let energy = |t: &Tensor<f32>| {
            t.as_slice().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
        };
        let (ex, es) = (energy(&x), energy(&spec));
        worst_parseval = worst_parseval.max((ex - es).abs() / ex.max(1e-30));
    }

    // Linearity in double precision.
    let plan = build_plan::<f64>(12, 12)?;
    let x = randt(&mut rng, vec![12, 12], 1.0);
    let y = randt(&mut rng, vec![12, 12], 1.0);
    let (a, b) = (0.7f64, -1.3f64);
    let mix = x.zip_map(&y, |xv, yv| a * xv + b * yv)?;
    let combined = plan.dct2d(&mix)?;
    let separate = plan.dct2d(&x)?.zip_map(&plan.dct2d(&y)?, |xv, yv| a * xv + b * yv)?;
    let worst_linear = combined.max_abs_diff(&separate);

    Ok(vec![
        CheckResult::new("dct", "orthonormality-sizes-1-64", worst_ortho, 1e-12),
        CheckResult::new("dct", "matches-naive-reference", worst_naive, 1e-12),
        CheckResult::new("dct", "round-trip-f32", worst_round, 1e-6),
        CheckResult::new("dct", "parseval-f32", worst_parseval, 1e-6),
        CheckResult::new("dct", "linearity-f64", worst_linear, 1e-12),
    ])
}

// ---------------------------------------------------------------------------
// hco suite
// ---------------------------------------------------------------------------

fn hco_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c0);
    let (m, n, c) = (32usize, 32usize, 4usize);

    // k = 0 freezes the field (single precision).
    let worst_identity = {
        let grid = FrequencyGrid::<f32>::new(m, n)?;
        let field = ThermalField::uniform(c, &grid, 0.0, 1.0)?;
        let plan = build_plan::<f32>(m, n)?;
        let u0 = Tensor::<f32>::from_fn(vec![2, c, m, n], |_| rng.random_range(-1.0..1.0f32))?;
        let u1 = hco_forward(&plan, &field.coeff, &u0)?;
        u1.max_abs_diff(&u0)
    };

    // Mean (DC) survives any finite diffusivity field.
    let worst_mean = {
        let grid = FrequencyGrid::<f32>::new(m, n)?;
        let k = Tensor::<f32>::from_fn(vec![c, m, n], |_| rng.random_range(0.0..2.0f32))?;
        let field = ThermalField::new(k, &grid, 1.0)?;
        let plan = build_plan::<f32>(m, n)?;
        let u0 = Tensor::<f32>::from_fn(vec![1, c, m, n], |_| rng.random_range(-1.0..1.0f32))?;
        let u1 = hco_forward(&plan, &field.coeff, &u0)?;
        let mut worst = 0.0f64;
        for ch in 0..c {
            let mean = |t: &Tensor<f32>| {
                t.as_slice()[ch * m * n..(ch + 1) * m * n]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
                    / (m * n) as f64
            };
            worst = worst.max((mean(&u1) - mean(&u0)).abs());
        }
        worst
    };

    // A pure cosine mode decays by exactly exp(-k (ωp² + ωq²) t).
    let worst_eigen = {
        let grid = FrequencyGrid::<f64>::new(m, n)?;
        let plan = build_plan::<f64>(m, n)?;
        let (k, t) = (0.9f64, 2.0f64);
        let field = ThermalField::uniform(1, &grid, k, t)?;
        let mut worst = 0.0f64;
        for &(p, q) in &[(1usize, 0usize), (0, 3), (2, 2), (5, 7)] {
            let hot = p * n + q;
            let spec = Tensor::<f64>::from_fn(vec![m, n], |i| if i == hot { 1.0 } else { 0.0 })?;
            let mode = plan.idct2d(&spec)?;
            let u0 = mode.reshape(vec![1, 1, m, n])?;
            let u1 = hco_forward(&plan, &field.coeff, &u0)?;
            let wp = std::f64::consts::PI * p as f64 / m as f64;
            let wq = std::f64::consts::PI * q as f64 / n as f64;
            let lambda = (-k * (wp * wp + wq * wq) * t).exp();
            let want = mode.map(|v| v * lambda).reshape(vec![1, 1, m, n])?;
            worst = worst.max(u1.max_abs_diff(&want));
        }
        worst
    };

    // Conduction for t₁ then t₂ equals conduction for t₁+t₂.
    let worst_semigroup = {
        let grid = FrequencyGrid::<f64>::new(m, n)?;
        let plan = build_plan::<f64>(m, n)?;
        let k = Tensor::<f64>::from_fn(vec![1, m, n], |_| rng.random_range(0.0..1.5))?;
        let (t1, t2) = (0.6, 1.7);
        let u0 = randt(&mut rng, vec![1, 1, m, n], 1.0);
        let step = |t: f64, u: &Tensor<f64>| -> Result<Tensor<f64>> {
            let coeff = decay_coefficients(&k, &grid, t)?;
            hco_forward(&plan, &coeff, u)
        };
        let two_steps = step(t2, &step(t1, &u0)?)?;
        let one_step = step(t1 + t2, &u0)?;
        two_steps.max_abs_diff(&one_step)
    };

    Ok(vec![
        CheckResult::new("hco", "zero-diffusivity-identity-f32", worst_identity, 1e-6),
        CheckResult::new("hco", "mean-preservation", worst_mean, 1e-6),
        CheckResult::new("hco", "eigenmode-decay-f64", worst_eigen, 1e-12),
        CheckResult::new("hco", "semigroup-f64", worst_semigroup, 1e-10),
    ])
}

// ---------------------------------------------------------------------------
// oracle suite
// ---------------------------------------------------------------------------

fn oracle_suite(seed: u64) -> Result<Vec<CheckResult>> {
    // Spectral evolution against the independent finite-difference march,
    // ten random band-limited fields.
    let mut worst_fd = 0.0f64;
    for s in 0..10u64 {
        let u0 = band_limited_field(32, 32, 8, 8, seed ^ (s + 1))?;
        worst_fd = worst_fd.max(compare_hco_ftcs(&u0, 1.0, 4.0)?);
    }

    // The march itself must conserve total heat under zero-flux boundaries.
    let worst_heat = {
        let u0 = band_limited_field(24, 24, 6, 6, seed ^ 77)?;
        let evolved = ftcs_solve(&u0, 1.0, 2.0, 0.01)?;
        let sum = |t: &Tensor<f64>| t.as_slice().iter().sum::<f64>();
        (sum(&evolved) - sum(&u0)).abs() / sum(&u0).abs().max(1.0)
    };

    Ok(vec![
        CheckResult::new("oracle", "band-limited-vs-finite-difference", worst_fd, 2e-2),
        CheckResult::new("oracle", "finite-difference-heat-conservation", worst_heat, 1e-10),
    ])
}

// ---------------------------------------------------------------------------
// grad suite
// ---------------------------------------------------------------------------

/// Parameters sampled in the whole-backbone spot check.
pub const BACKBONE_SPOT_SAMPLES: usize = 64;

fn grad_suite(seed: u64, backbone_samples: usize) -> Result<Vec<CheckResult>> {
    let mut out = vec![
        CheckResult::new("grad", "primitive-vjps", primitive_vjps(seed)?, 1e-5),
        CheckResult::new("grad", "heat-layer", heat_layer_grads(seed)?, 1e-5),
    ];
    out.push(CheckResult::new(
        "grad",
        "backbone-spot-check",
        backbone_spot_check(seed, backbone_samples)?,
        1e-4,
    ));
    Ok(out)
}

/// Central-difference check of every differentiable primitive, each probed
/// exhaustively at small extents. Returns the worst relative error.
fn primitive_vjps(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x97ad);
    let mut worst = 0.0f64;
    let mut fold = |r: Result<crate::autograd::GradCheckReport>| -> Result<()> {
        worst = worst.max(r?.max_rel_err);
        Ok(())
    };

    // Elementwise arithmetic and exp.
    let x = randt(&mut rng, vec![2, 3], 0.8);
    let y = randt(&mut rng, vec![2, 3], 0.8);
    fold(grad_check(
        |t, n| {
            let s = t.add(n[0], n[1])?;
            let d = t.sub(s, n[0])?;
            let p = t.mul(d, n[1])?;
            let half = t.mul_scalar(p, 0.5)?;
            let e = t.exp(half)?;
            t.sum_all(e)
        },
        &[x, y],
        1e-5,
    ))?;

    // Dense and batched matrix products.
    let a = randt(&mut rng, vec![3, 4], 0.8);
    let b = randt(&mut rng, vec![4, 2], 0.8);
    fold(grad_check(
        |t, n| {
            let m = t.matmul(n[0], n[1])?;
            let sq = t.mul(m, m)?;
            t.sum_all(sq)
        },
        &[a, b],
        1e-5,
    ))?;
    let a = randt(&mut rng, vec![2, 3, 4], 0.8);
    let b = randt(&mut rng, vec![2, 4, 2], 0.8);
    fold(grad_check(
        |t, n| {
            let m = t.batched_matmul(n[0], n[1])?;
            let sq = t.mul(m, m)?;
            t.sum_all(sq)
        },
        &[a, b],
        1e-5,
    ))?;

    // Data movement: reshape and permute.
    let x = randt(&mut rng, vec![2, 3, 4], 0.8);
    let y = randt(&mut rng, vec![4, 6], 0.8);
    fold(grad_check(
        |t, n| {
            let p = t.permute(n[0], &[2, 0, 1])?;
            let r = t.reshape(p, vec![4, 6])?;
            let m = t.mul(r, n[1])?;
            t.sum_all(m)
        },
        &[x, y],
        1e-5,
    ))?;

    // Convolutions.
    let x = randt(&mut rng, vec![1, 3, 6, 6], 0.8);
    let w = randt(&mut rng, vec![4, 3, 3, 3], 0.4);
    let b = randt(&mut rng, vec![4], 0.4);
    fold(grad_check(
        |t, n| {
            let c = t.conv2d(n[0], n[1], n[2], 2)?;
            let sq = t.mul(c, c)?;
            t.sum_all(sq)
        },
        &[x, w, b],
        1e-5,
    ))?;
    let x = randt(&mut rng, vec![1, 4, 5, 5], 0.8);
    let w = randt(&mut rng, vec![4, 3, 3], 0.4);
    let b = randt(&mut rng, vec![4], 0.4);
    fold(grad_check(
        |t, n| {
            let c = t.dwconv3x3(n[0], n[1], n[2])?;
            let sq = t.mul(c, c)?;
            t.sum_all(sq)
        },
        &[x, w, b],
        1e-5,
    ))?;

    // Normalization and activations.
    let x = randt(&mut rng, vec![2, 4, 3, 3], 0.8);
    let gamma = randt(&mut rng, vec![4], 0.5).map(|v| 1.0 + v);
    let beta = randt(&mut rng, vec![4], 0.5);
    fold(grad_check(
        |t, n| {
            let ln = t.layer_norm(n[0], n[1], n[2])?;
            let g = t.gelu(ln)?;
            let s = t.silu(g)?;
            t.sum_all(s)
        },
        &[x, gamma, beta],
        1e-5,
    ))?;

    // Softmax, spatial pooling, reductions, classification loss.
    let x = randt(&mut rng, vec![2, 5], 0.8);
    let y = randt(&mut rng, vec![2, 5], 0.8);
    fold(grad_check(
        |t, n| {
            let sm = t.softmax_last(n[0])?;
            let m = t.mul(sm, n[1])?;
            t.sum_all(m)
        },
        &[x, y],
        1e-5,
    ))?;
    let x = randt(&mut rng, vec![1, 3, 4, 4], 0.8);
    let y = randt(&mut rng, vec![1, 3], 0.8);
    fold(grad_check(
        |t, n| {
            let g = t.gap_spatial(n[0])?;
            let m = t.mul(g, n[1])?;
            t.mean_all(m)
        },
        &[x, y],
        1e-5,
    ))?;
    let logits = randt(&mut rng, vec![3, 5], 1.0);
    fold(grad_check(
        |t, n| t.cross_entropy(n[0], Arc::new(vec![0, 3, 2]), 0.1),
        &[logits],
        1e-5,
    ))?;

    // Spectral transforms and the conduction chain.
    let plan = build_plan::<f64>(4, 4)?;
    let x = randt(&mut rng, vec![1, 2, 4, 4], 0.8);
    let y = randt(&mut rng, vec![1, 2, 4, 4], 0.8);
    fold(grad_check(
        |t, n| {
            let spec = t.dct2d(n[0], &plan)?;
            let back = t.idct2d(spec, &plan)?;
            let m = t.mul(back, n[1])?;
            t.sum_all(m)
        },
        &[x, y],
        1e-5,
    ))?;
    let grid = FrequencyGrid::<f64>::new(4, 4)?;
    let x = randt(&mut rng, vec![1, 2, 4, 4], 0.8);
    let fve = randt(&mut rng, vec![4, 4, 3], 0.4);
    let w = randt(&mut rng, vec![3, 2], 0.4);
    let b = randt(&mut rng, vec![2], 0.2);
    fold(grad_check(
        |t, n| {
            let u = hco_tape(t, n[0], n[1], n[2], n[3], &grid, 0.7, &plan)?;
            let sq = t.mul(u, u)?;
            t.sum_all(sq)
        },
        &[x, fve, w, b],
        1e-5,
    ))?;

    Ok(worst)
}

/// Exhaustive central-difference check of one full conduction block
/// (norms, depthwise conv, gated mixer, FFN, residuals).
fn heat_layer_grads(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    let mut store = ParamStore::<f64>::new();
    let block = HeatLayerParams::build(&mut store, &mut rng, "chk", 4, Some(3), 2, 0.0)?;
    // The zero-initialized projections would hide gradient flow; randomize
    // them (small, for conditioning) before checking.
    for id in [block.out_proj.w, block.ffn2.w, block.k_pred.as_ref().unwrap().w] {
        let dims = store.get(id).value.dims().to_vec();
        store.set_value(id, randt(&mut rng, dims, 0.2));
    }
    let grid = FrequencyGrid::new(4, 4)?;
    let plan = build_plan::<f64>(4, 4)?;
    let x_t = randt(&mut rng, vec![1, 4, 4, 4], 0.8);
    let fve_t = randt(&mut rng, vec![4, 4, 3], 0.3);

    let mut inputs = vec![x_t, fve_t];
    let ids: Vec<ParamId> = store.ids().collect();
    for &id in &ids {
        inputs.push(store.get(id).value.clone());
    }
    let rep = grad_check(
        |tape, nodes| {
            let mut g = Graph::new(tape, &store);
            for (i, &id) in ids.iter().enumerate() {
                g.bind(id, nodes[i + 2]);
            }
            let cond = Conduction::Predicted { fve: nodes[1], grid: &grid };
            let y = heat_layer_forward(&mut g, &block, &cond, &plan, nodes[0], None)?;
            let sq = g.tape.mul(y, y)?;
            g.tape.sum_all(sq)
        },
        &inputs,
        1e-5,
    )?;
    Ok(rep.max_rel_err)
}

/// Analytic vs central-difference gradients for randomly sampled scalar
/// parameters of the full micro backbone, through the classification loss.
fn backbone_spot_check(seed: u64, samples: usize) -> Result<f64> {
    let mut cfg = ModelConfig::micro();
    cfg.drop_path = 0.0; // grad checking wants the eval graph exactly
    let mut model: Model<f64> = build_model(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba5e);
    let e = cfg.input_extent;
    let images = randt(&mut rng, vec![2, 3, e, e], 1.0);
    let labels = vec![3usize, 7];

    // Analytic pass.
    let mut tape = Tape::new();
    let pass = model.forward_on_tape(&mut tape, &images, None)?;
    let loss_node = tape.cross_entropy(pass.logits, Arc::new(labels.clone()), 0.0)?;
    let grads = tape.backward(loss_node)?;
    let node_of: std::collections::HashMap<usize, crate::autograd::NodeId> =
        pass.bound.iter().map(|&(pid, nid)| (pid.index(), nid)).collect();

    // Sample (parameter, element) pairs without replacement.
    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut pool: Vec<(ParamId, usize)> = Vec::new();
    for &id in &ids {
        for e in 0..model.store.get(id).value.numel() {
            pool.push((id, e));
        }
    }
    let n_samples = samples.min(pool.len());
    let mut picks = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let i = rng.random_range(0..pool.len());
        picks.push(pool.swap_remove(i));
    }

    let eval_loss = |model: &Model<f64>| -> Result<f64> {
        let logits = model.forward(&images)?;
        Ok(ops::cross_entropy_mean(&logits, &labels, 0.0)?.0)
    };

    let h = 1e-4;
    let mut worst = 0.0f64;
    for (pid, elem) in picks {
        let original = model.store.get(pid).value.clone();
        let dims = original.dims().to_vec();
        let bump = |delta: f64| -> Result<Tensor<f64>> {
            let mut data = original.to_vec();
            data[elem] += delta;
            Tensor::new(dims.clone(), data)
        };
        model.store.set_value(pid, bump(h)?);
        let up = eval_loss(&model)?;
        model.store.set_value(pid, bump(-h)?);
        let down = eval_loss(&model)?;
        model.store.set_value(pid, original);

        let numeric = (up - down) / (2.0 * h);
        let analytic = node_of
            .get(&pid.index())
            .and_then(|&nid| grads.get(nid))
            .map(|g| g.as_slice()[elem])
            .unwrap_or(0.0);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
