//! Heat-source conduction rendering: drop a one-hot source on a grid,
//! evolve it with the conduction operator at a series of times, and write
//! one grayscale image per time. The diffusivity is either a single
//! constant or a trained layer's predicted field.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::dct::build_plan;
use crate::error::{Error, Result};
use crate::hco::{decay_coefficients, hco_forward, predict_k, FrequencyGrid, FveTable};
use crate::model::{KMode, Model};
use crate::tensor::Tensor;

/// One rendered frame: where it was written and the hottest point of the
/// raw field before per-image normalization. Peaks are the quantity that
/// must decrease as heat spreads; pixel values are rescaled per image and
/// say nothing across frames.
#[derive(Debug, Clone)]
pub struct VizFrame {
    pub time: f64,
    pub path: PathBuf,
    /// max of the evolved field before normalization.
    pub peak: f64,
}

/// Write a binary (P5) PGM image, 8 bits per pixel.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape(format!(
            "pgm wants {width}x{height} = {} pixels, got {}",
            width * height,
            pixels.len()
        )));
    }
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(pixels)?;
    out.flush()?;
    Ok(())
}

/// Evolve a one-hot source at `(x, y)` (column, row) on the extents of
/// `k_plane [M, N]` for time `t`, returning the raw `[M, N]` field.
pub fn conduction_field(
    k_plane: &Tensor<f64>,
    source: (usize, usize),
    t: f64,
) -> Result<Tensor<f64>> {
    if k_plane.rank() != 2 {
        return Err(Error::shape(format!(
            "diffusivity plane must be [M, N], got {:?}",
            k_plane.dims()
        )));
    }
    let (m, n) = (k_plane.dims()[0], k_plane.dims()[1]);
    let (x, y) = source;
    if x >= n || y >= m {
        return Err(Error::invalid(format!(
            "source ({x}, {y}) outside {n}x{m} grid"
        )));
    }
    if !t.is_finite() || t < 0.0 {
        return Err(Error::invalid(format!("conduction time must be ≥ 0, got {t}")));
    }
    let grid = FrequencyGrid::<f64>::new(m, n)?;
    let k = k_plane.reshape(vec![1, m, n])?;
    let coeff = decay_coefficients(&k, &grid, t)?;
    let hot = y * n + x;
    let u0 = Tensor::from_fn(vec![1, 1, m, n], |i| if i == hot { 1.0 } else { 0.0 })?;
    let plan = build_plan::<f64>(m, n)?;
    let out = hco_forward(&plan, &coeff, &u0)?;
    out.reshape(vec![m, n])
}

/// Rescale a raw field to full 8-bit range, min → 0 and max → 255. A flat
/// field (the large-t mean limit) maps to uniform white.
pub fn normalize_to_u8(field: &Tensor<f64>) -> Vec<u8> {
    let vals = field.as_slice();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in vals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return vec![255u8; vals.len()];
    }
    vals.iter()
        .map(|&v| ((v - lo) / range * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// The per-frequency diffusivity a trained model would apply in its first
/// conduction block, reduced to one plane by averaging over channels. A
/// fixed-diffusivity model yields the constant plane it was built with.
pub fn model_diffusivity(model: &Model<f64>) -> Result<Tensor<f64>> {
    let extent = model.config.stage_extent(0);
    match model.config.k_mode {
        KMode::Fixed(k) => Tensor::full(vec![extent, extent], k),
        KMode::Predicted => {
            let stage = &model.stages[0];
            let fve_id = stage
                .fve
                .ok_or_else(|| Error::invalid("model has no frequency embedding table"))?;
            let pred = stage.blocks[0]
                .k_pred
                .as_ref()
                .ok_or_else(|| Error::invalid("model has no diffusivity predictor"))?;
            let fve = FveTable::new(model.store.get(fve_id).value.clone())?;
            let w = &model.store.get(pred.w).value;
            let b = &model.store.get(pred.b).value;
            let k = predict_k(&fve, w, b)?; // [C, M, N]
            let (c, m, n) = (k.dims()[0], k.dims()[1], k.dims()[2]);
            let inv_c = 1.0 / c as f64;
            Tensor::from_fn(vec![m, n], |flat| {
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += k.as_slice()[ch * m * n + flat];
                }
                acc * inv_c
            })
        }
    }
}

/// Render the conduction of a one-hot source under `k_plane [M, N]` at each
/// requested time, writing `conduction_t{t}.pgm` files into `out_dir`
/// (created if absent). Each image is normalized to [0, 255] on its own.
pub fn visualize_conduction(
    k_plane: &Tensor<f64>,
    source: (usize, usize),
    times: &[f64],
    out_dir: &Path,
) -> Result<Vec<VizFrame>> {
    if times.is_empty() {
        return Err(Error::invalid("need at least one conduction time"));
    }
    fs::create_dir_all(out_dir)?;
    let (m, n) = (k_plane.dims()[0], k_plane.dims()[1]);
    let mut frames = Vec::with_capacity(times.len());
    for &t in times {
        let field = conduction_field(k_plane, source, t)?;
        let peak = field.as_slice().iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let pixels = normalize_to_u8(&field);
        let path = out_dir.join(format!("conduction_t{}.pgm", fmt_time(t)));
        write_pgm(&path, n, m, &pixels)?;
        frames.push(VizFrame { time: t, path, peak });
    }
    Ok(frames)
}

/// Compact time tag for filenames: integers stay integers, fractions keep
/// their digits with `.` swapped for `p` (40.25 → "40p25").
fn fmt_time(t: f64) -> String {
    if t == t.trunc() && t.abs() < 1e15 {
        format!("{}", t as i64)
    } else {
        format!("{t}").replace('.', "p")
    }
}
