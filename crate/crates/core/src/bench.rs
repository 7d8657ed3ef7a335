//! Wall-clock complexity harness: times operator forward passes across a
//! resolution grid and fits the log-log growth rate of time against token
//! count N = resolution². Setup (plans, projections, coefficient fields) is
//! excluded from the timed region; only the forward pass is measured.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::AttentionBaseline;
use crate::dct::build_plan;
use crate::error::{Error, Result};
use crate::hco::{hco_forward, FrequencyGrid, ThermalField};
use crate::memory;
use crate::tensor::Tensor;

/// Fewer repeats than this gives a meaningless median.
pub const MIN_REPEATS: usize = 5;
/// Untimed runs before measurement starts (cache/branch warmup).
const WARMUP_RUNS: usize = 2;
/// Below this resolution fixed overheads dominate; the slope fit skips it.
pub const SLOPE_MIN_RESOLUTION: usize = 32;
/// Spread beyond this fraction of the median marks a record unreliable.
pub const SPREAD_LIMIT: f64 = 0.30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchOp {
    Hco,
    Attention,
    Dct,
}

impl FromStr for BenchOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hco" => Ok(BenchOp::Hco),
            "attention" => Ok(BenchOp::Attention),
            "dct" => Ok(BenchOp::Dct),
            other => Err(Error::invalid(format!(
                "unknown bench op {other:?} (expected hco, attention, or dct)"
            ))),
        }
    }
}

impl fmt::Display for BenchOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchOp::Hco => "hco",
            BenchOp::Attention => "attention",
            BenchOp::Dct => "dct",
        })
    }
}

/// One measured grid point.
#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub op: String,
    pub resolution: usize,
    pub tokens: usize,
    pub channels: usize,
    pub repeats: usize,
    pub median_s: f64,
    /// Bytes allocated above the pre-run baseline (best effort).
    pub peak_bytes: usize,
    /// (max − min) / median over the timed runs.
    pub spread: f64,
}

impl BenchRecord {
    /// Timing spread exceeded [`SPREAD_LIMIT`]; the median still stands but
    /// should be treated with suspicion.
    pub fn unreliable(&self) -> bool {
        self.spread > SPREAD_LIMIT
    }
}

/// Time `op` at every resolution and fit the growth exponent.
///
/// Inputs are `[1, channels, r, r]` f32 tensors with seeded uniform noise.
/// Each grid point runs `WARMUP_RUNS` untimed passes, then `repeats` timed
/// ones; the record keeps the median. The returned slope is the least-squares
/// fit of log(median seconds) against log(tokens), excluding resolutions
/// below [`SLOPE_MIN_RESOLUTION`]; it is NaN when fewer than two points
/// qualify.
pub fn run_bench(
    op: BenchOp,
    resolutions: &[usize],
    channels: usize,
    repeats: usize,
) -> Result<(Vec<BenchRecord>, f64)> {
    if repeats < MIN_REPEATS {
        return Err(Error::invalid(format!(
            "repeats must be at least {MIN_REPEATS}, got {repeats}"
        )));
    }
    if channels == 0 {
        return Err(Error::invalid("channels must be positive"));
    }
    if resolutions.is_empty() {
        return Err(Error::invalid("need at least one resolution"));
    }
    if !resolutions.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::invalid(format!(
            "resolutions must be strictly increasing, got {resolutions:?}"
        )));
    }

    let mut records = Vec::with_capacity(resolutions.len());
    for &r in resolutions {
        if r == 0 {
            return Err(Error::invalid("resolution 0 is meaningless"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(42 ^ r as u64);
        let x = Tensor::<f32>::from_fn(vec![1, channels, r, r], |_| {
            rng.random_range(-1.0f32..1.0)
        })?;

        // Setup outside the timed region.
        let mut run: Box<dyn FnMut() -> Result<()>> = match op {
            BenchOp::Dct => {
                let plan = build_plan::<f32>(r, r)?;
                Box::new(move || plan.dct2d(&x).map(drop))
            }
            BenchOp::Hco => {
                let plan = build_plan::<f32>(r, r)?;
                let grid = FrequencyGrid::<f32>::new(r, r)?;
                let field = ThermalField::uniform(channels, &grid, 1.0, 1.0)?;
                Box::new(move || hco_forward(&plan, &field.coeff, &x).map(drop))
            }
            BenchOp::Attention => {
                let base = AttentionBaseline::<f32>::new(channels, 7)?;
                Box::new(move || base.forward(&x).map(drop))
            }
        };

        for _ in 0..WARMUP_RUNS {
            run()?;
        }
        memory::reset_peak();
        let baseline = memory::current_bytes();
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t0 = Instant::now();
            run()?;
            times.push(t0.elapsed().as_secs_f64());
        }
        let peak = memory::peak_bytes().saturating_sub(baseline);

        let med = median(&mut times);
        let spread = if med > 0.0 {
            let lo = times.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = times.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (hi - lo) / med
        } else {
            0.0
        };
        records.push(BenchRecord {
            op: op.to_string(),
            resolution: r,
            tokens: r * r,
            channels,
            repeats,
            median_s: med,
            peak_bytes: peak,
            spread,
        });
    }
    let slope = fit_slope(&records);
    Ok((records, slope))
}

/// Least-squares slope of ln(median_s) vs ln(tokens) over records at or
/// above [`SLOPE_MIN_RESOLUTION`]. NaN if fewer than two points qualify.
pub fn fit_slope(records: &[BenchRecord]) -> f64 {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.resolution >= SLOPE_MIN_RESOLUTION && r.median_s > 0.0)
        .map(|r| ((r.tokens as f64).ln(), r.median_s.ln()))
        .collect();
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Render records to CSV. Every row repeats the whole-grid slope so the file
/// stands alone.
pub fn bench_csv(records: &[BenchRecord], slope: f64) -> String {
    let mut out = String::from("op,resolution,tokens,channels,repeats,median_s,peak_bytes,slope\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{:.9},{},{:.4}\n",
            r.op, r.resolution, r.tokens, r.channels, r.repeats, r.median_s, r.peak_bytes, slope
        ));
    }
    out
}

fn median(times: &mut [f64]) -> f64 {
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = times.len();
    if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    }
}
