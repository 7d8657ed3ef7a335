//! Model assembly: configuration presets, deterministic initialization,
//! whole-network forward, resolution transfer, and binary checkpoints.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::data::ChannelNorm;
use crate::dct::{build_plan, DctPlan};
use crate::error::{Error, Result};
use crate::hco::{FrequencyGrid, FveTable, ThermalField};
use crate::layers::{
    heat_layer_forward, Conduction, DownsampleParams, Graph, HeadParams, HeatLayerParams, Init,
    ParamId, ParamStore, StemParams,
};
use crate::tensor::{DType, Element, Tensor};

/// How blocks obtain thermal diffusivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMode {
    /// Per-layer linear predictor reading the stage's shared frequency
    /// embedding table.
    Predicted,
    /// One constant diffusivity for every channel and frequency.
    Fixed(f64),
}

impl Default for KMode {
    fn default() -> Self {
        KMode::Predicted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: [usize; 4],
    pub channels: [usize; 4],
    pub mlp_ratio: usize,
    pub drop_path: f64,
    pub num_classes: usize,
    pub input_extent: usize,
    pub dtype: DType,
    #[serde(default)]
    pub k_mode: KMode,
}

impl ModelConfig {
    /// Reference configuration (ImageNet scale).
    pub fn tiny() -> Self {
        ModelConfig {
            layers: [2, 2, 6, 2],
            channels: [96, 192, 384, 768],
            mlp_ratio: 4,
            drop_path: 0.1,
            num_classes: 1000,
            input_extent: 224,
            dtype: DType::F32,
            k_mode: KMode::Predicted,
        }
    }

    pub fn small() -> Self {
        ModelConfig { layers: [2, 2, 18, 2], ..Self::tiny() }
    }

    pub fn base() -> Self {
        ModelConfig {
            layers: [2, 2, 18, 2],
            channels: [128, 256, 512, 1024],
            ..Self::tiny()
        }
    }

    /// Desk-scale configuration: trains in minutes on a CPU.
    pub fn micro() -> Self {
        ModelConfig {
            layers: [2, 2, 2, 2],
            channels: [16, 32, 64, 128],
            mlp_ratio: 4,
            drop_path: 0.05,
            num_classes: 10,
            input_extent: 32,
            dtype: DType::F32,
            k_mode: KMode::Predicted,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_extent == 0 || self.input_extent % 32 != 0 {
            return Err(Error::invalid(format!(
                "input extent {} must be a positive multiple of 32",
                self.input_extent
            )));
        }
        if !self.channels.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid(format!(
                "channels must be strictly increasing, got {:?}",
                self.channels
            )));
        }
        if self.layers.iter().any(|&l| l == 0) {
            return Err(Error::invalid("every stage needs at least one block"));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::invalid("mlp ratio must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::invalid(format!("drop-path {} not in [0,1)", self.drop_path)));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if let KMode::Fixed(v) = self.k_mode {
            if !v.is_finite() {
                return Err(Error::invalid("fixed diffusivity must be finite"));
            }
        }
        Ok(())
    }

    /// Feature-map extent at stage `s` (0-based): `(E/4) / 2^s`.
    pub fn stage_extent(&self, s: usize) -> usize {
        (self.input_extent / 4) >> s
    }

    /// Closed-form scalar parameter count.
    pub fn analytic_param_count(&self) -> usize {
        let mut total = StemParams::analytic_param_count(self.channels[0]);
        for s in 0..4 {
            let c = self.channels[s];
            let e = self.stage_extent(s);
            let fve_dim = match self.k_mode {
                KMode::Predicted => Some(c),
                KMode::Fixed(_) => None,
            };
            if fve_dim.is_some() {
                total += e * e * c; // shared embedding table
            }
            total +=
                self.layers[s] * HeatLayerParams::analytic_param_count(c, fve_dim, self.mlp_ratio);
            if s < 3 {
                let cout = self.channels[s + 1];
                total += cout * c * 9 + cout + 2 * cout; // downsample conv + norm
            }
        }
        let c_last = self.channels[3];
        total += 2 * c_last + c_last * self.num_classes + self.num_classes;
        total
    }
}

pub struct StageParams {
    /// Shared frequency embedding table `[M, N, C]` (predicted mode only).
    pub fve: Option<ParamId>,
    pub blocks: Vec<HeatLayerParams>,
}

pub struct Model<T: Element> {
    pub config: ModelConfig,
    pub seed: u64,
    /// Input normalization the model was trained with.
    pub norm: ChannelNorm,
    pub store: ParamStore<T>,
    pub stem: StemParams,
    pub stages: Vec<StageParams>,
    pub downs: Vec<DownsampleParams>,
    pub head: HeadParams,
    grids: Vec<FrequencyGrid<T>>,
    plans: Vec<Arc<DctPlan<T>>>,
    /// Per-stage constant decay coefficients (fixed mode only).
    fixed_coeff: Vec<Option<Tensor<T>>>,
}

/// One recorded forward pass: the logits node plus every parameter leaf
/// that was bound, for gradient extraction.
pub struct ForwardPass {
    pub logits: NodeId,
    pub bound: Vec<(ParamId, NodeId)>,
}

/// Deterministically initialize a model from a seed.
pub fn build_model<T: Element>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();

    let stem = StemParams::build(&mut store, &mut rng, config.channels[0])?;

    let total_blocks: usize = config.layers.iter().sum();
    let mut grids = Vec::with_capacity(4);
    let mut plans = Vec::with_capacity(4);
    let mut fixed_coeff = Vec::with_capacity(4);
    let mut stages = Vec::with_capacity(4);
    let mut downs = Vec::with_capacity(3);
    let mut block_index = 0usize;

    for s in 0..4 {
        let c = config.channels[s];
        let e = config.stage_extent(s);
        let grid = FrequencyGrid::new(e, e)?;
        let plan = build_plan::<T>(e, e)?;
        let (fve, fve_dim, coeff) = match config.k_mode {
            KMode::Predicted => {
                let table = crate::layers::init_tensor(&mut rng, vec![e, e, c], Init::Normal)?;
                (Some(store.add(format!("stage{s}.fve"), table, false)), Some(c), None)
            }
            KMode::Fixed(v) => {
                let field = ThermalField::uniform(1, &grid, T::from_f64(v), T::one())?;
                (None, None, Some(field.coeff))
            }
        };
        let mut blocks = Vec::with_capacity(config.layers[s]);
        for i in 0..config.layers[s] {
            let rate = if total_blocks > 1 {
                config.drop_path * block_index as f64 / (total_blocks - 1) as f64
            } else {
                0.0
            };
            blocks.push(HeatLayerParams::build(
                &mut store,
                &mut rng,
                &format!("stage{s}.block{i}"),
                c,
                fve_dim,
                config.mlp_ratio,
                rate,
            )?);
            block_index += 1;
        }
        grids.push(grid);
        plans.push(plan);
        fixed_coeff.push(coeff);
        stages.push(StageParams { fve, blocks });
        if s < 3 {
            downs.push(DownsampleParams::build(
                &mut store,
                &mut rng,
                &format!("down{s}"),
                c,
                config.channels[s + 1],
            )?);
        }
    }

    let head = HeadParams::build(&mut store, &mut rng, config.channels[3], config.num_classes)?;
    Ok(Model {
        config: config.clone(),
        seed,
        norm: ChannelNorm::identity(),
        store,
        stem,
        stages,
        downs,
        head,
        grids,
        plans,
        fixed_coeff,
    })
}

impl<T: Element> Model<T> {
    pub fn num_params(&self) -> usize {
        self.store.total_len()
    }

    /// Record a forward pass on `tape`. `drop_rng` enables stochastic depth
    /// (training); `None` is eval mode, the exact identity on branch scale.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        mut drop_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        let d = images.dims();
        let e = self.config.input_extent;
        if d.len() != 4 || d[1] != 3 || d[2] != e || d[3] != e {
            return Err(Error::shape(format!(
                "expected [B,3,{e},{e}] input, got {:?} (resize the model for other extents)",
                d
            )));
        }
        let mut g = Graph::new(tape, &self.store);
        let mut x = g.tape.leaf(images.clone());
        x = self.stem.forward(&mut g, x)?;
        for s in 0..4 {
            let fve_node = self.stages[s].fve.map(|id| g.node(id));
            for block in &self.stages[s].blocks {
                let cond = match (fve_node, &self.fixed_coeff[s]) {
                    (Some(fve), _) => Conduction::Predicted { fve, grid: &self.grids[s] },
                    (None, Some(coeff)) => Conduction::Fixed { coeff },
                    (None, None) => unreachable!("one conduction source always set"),
                };
                x = heat_layer_forward(
                    &mut g,
                    block,
                    &cond,
                    &self.plans[s],
                    x,
                    drop_rng.as_deref_mut(),
                )?;
            }
            if s < 3 {
                x = self.downs[s].forward(&mut g, x)?;
            }
        }
        let logits = self.head.forward(&mut g, x)?;
        Ok(ForwardPass { logits, bound: g.touched() })
    }

    /// Eval-mode logits.
    pub fn forward(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let pass = self.forward_on_tape(&mut tape, images, None)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Transfer to a new input resolution by resizing every stage's
    /// frequency embedding table; all other parameters are shared.
    pub fn resize_input(&self, new_extent: usize) -> Result<Model<T>> {
        let mut config = self.config.clone();
        config.input_extent = new_extent;
        config.validate()?;
        let mut store = self.store.clone();
        let mut grids = Vec::with_capacity(4);
        let mut plans = Vec::with_capacity(4);
        let mut fixed_coeff = Vec::with_capacity(4);
        for s in 0..4 {
            let e = config.stage_extent(s);
            let grid = FrequencyGrid::new(e, e)?;
            let plan = build_plan::<T>(e, e)?;
            if let Some(fve_id) = self.stages[s].fve {
                let table = FveTable::new(store.get(fve_id).value.clone())?;
                store.set_value_resized(fve_id, table.resize(e, e)?.table().clone());
            }
            let coeff = match config.k_mode {
                KMode::Fixed(v) => {
                    Some(ThermalField::uniform(1, &grid, T::from_f64(v), T::one())?.coeff)
                }
                KMode::Predicted => None,
            };
            grids.push(grid);
            plans.push(plan);
            fixed_coeff.push(coeff);
        }
        Ok(Model {
            config,
            seed: self.seed,
            norm: self.norm,
            store,
            stem: self.stem.clone(),
            stages: self
                .stages
                .iter()
                .map(|s| StageParams { fve: s.fve, blocks: s.blocks.clone() })
                .collect(),
            downs: self.downs.clone(),
            head: self.head.clone(),
            grids,
            plans,
            fixed_coeff,
        })
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 8] = b"VHEAT001";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope {
    format_version: u32,
    config: ModelConfig,
    seed: u64,
    norm: ChannelNorm,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x1_0000_0001_b3))
}

/// Exact on-disk size of a model's checkpoint.
pub fn checkpoint_byte_len<T: Element>(model: &Model<T>) -> usize {
    let env = Envelope {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        seed: model.seed,
        norm: model.norm,
    };
    let json_len = serde_json::to_vec(&env).map(|v| v.len()).unwrap_or(0);
    let records: usize = model
        .store
        .iter()
        .map(|(_, p)| 4 + p.name.len() + 1 + 4 * p.value.rank() + 4 * p.value.numel())
        .sum();
    8 + 4 + json_len + 4 + records + 8
}

/// Serialize parameters as little-endian f32 with a trailing FNV-1a
/// checksum. Byte-exact for f32 models; f64 values are narrowed.
pub fn save_checkpoint<T: Element>(model: &Model<T>, path: &Path) -> Result<()> {
    let env = Envelope {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        seed: model.seed,
        norm: model.norm,
    };
    let json = serde_json::to_vec(&env)?;
    let mut out = Vec::with_capacity(checkpoint_byte_len(model));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.rank() as u8);
        for &d in p.value.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.as_slice() {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("unexpected EOF reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Rebuild a model from a checkpoint. The element type must match the
/// stored config's dtype.
pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 + 4 + 4 + 8 {
        return Err(Error::Format(format!("checkpoint too short ({} bytes)", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let actual = fnv1a(body);
    if stored != actual {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:#018x}, computed {actual:#018x}"
        )));
    }
    let mut cur = Cursor { buf: body, pos: 0 };
    let magic = cur.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected {:?}", magic, MAGIC)));
    }
    let json_len = cur.u32("config length")? as usize;
    let json = cur.take(json_len, "config JSON")?;
    let env: Envelope = serde_json::from_slice(json)?;
    if env.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unknown format version {} (supported: {FORMAT_VERSION})",
            env.format_version
        )));
    }
    if env.config.dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "checkpoint dtype {} does not match requested {}",
            env.config.dtype,
            T::DTYPE
        )));
    }

    let mut model = build_model::<T>(&env.config, env.seed)?;
    model.norm = env.norm;
    let count = cur.u32("record count")? as usize;
    if count != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {count} records, model wants {}",
            model.store.len()
        )));
    }
    let mut filled = vec![false; count];
    for r in 0..count {
        let ctx = format!("record {r}");
        let name_len = cur.u32(&format!("{ctx} name length"))? as usize;
        let name = std::str::from_utf8(cur.take(name_len, &format!("{ctx} name"))?)
            .map_err(|_| Error::Format(format!("{ctx}: name is not UTF-8")))?
            .to_string();
        let ctx = format!("record {r} ({name})");
        let ndim = cur.u8(&format!("{ctx} rank"))? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32(&format!("{ctx} dims"))? as usize);
        }
        let id = model
            .store
            .by_name(&name)
            .ok_or_else(|| Error::Format(format!("{ctx}: unknown parameter")))?;
        if filled[id.index()] {
            return Err(Error::Format(format!("{ctx}: duplicate record")));
        }
        let expect = model.store.get(id).value.dims();
        if expect != dims.as_slice() {
            return Err(Error::Format(format!(
                "{ctx}: dims {:?} do not match model {:?}",
                dims, expect
            )));
        }
        let numel: usize = dims.iter().product();
        let payload = cur.take(4 * numel, &format!("{ctx} payload"))?;
        let data: Vec<T> = payload
            .chunks_exact(4)
            .map(|c| T::from_f64(f64::from(f32::from_le_bytes(c.try_into().unwrap()))))
            .collect();
        model.store.set_value(id, Tensor::new(dims, data)?);
        filled[id.index()] = true;
    }
    if cur.pos != body.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last record",
            body.len() - cur.pos
        )));
    }
    Ok(model)
}

/// Peek at a checkpoint's stored configuration without loading parameters.
pub fn peek_config(path: &Path) -> Result<ModelConfig> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { buf: &bytes, pos: 0 };
    let magic = cur.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}, expected {:?}", magic, MAGIC)));
    }
    let json_len = cur.u32("config length")? as usize;
    let env: Envelope = serde_json::from_slice(cur.take(json_len, "config JSON")?)?;
    Ok(env.config)
}
