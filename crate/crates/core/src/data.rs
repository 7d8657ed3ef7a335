//! Dataset ingestion: IDX-format image/label files, a procedural rendered
//! digit corpus, and a synthetic dataset whose classes are defined by
//! dominant cosine-frequency content (so the spectral mixer is directly
//! exercised by the classification task).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dct::build_plan;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Conventional file names inside a dataset directory.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// In-memory split: images as `[N, 3, H, W]` f32 in `[0, 1]`, integer labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub num_classes: usize,
}

impl Dataset {
    fn plane(&self) -> usize {
        3 * self.h * self.w
    }

    /// One sample's `3*H*W` pixels.
    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.plane()..(i + 1) * self.plane()]
    }

    /// Zero-pad every image to `extent` x `extent`, content centered.
    pub fn pad_to(&self, extent: usize) -> Result<Dataset> {
        if extent < self.h || extent < self.w {
            return Err(Error::invalid(format!(
                "cannot pad {}x{} down to {extent}",
                self.h, self.w
            )));
        }
        let (oy, ox) = ((extent - self.h) / 2, (extent - self.w) / 2);
        let mut images = vec![0.0f32; self.n * 3 * extent * extent];
        for i in 0..self.n {
            let src = self.image(i);
            for c in 0..3 {
                for y in 0..self.h {
                    let srow = &src[(c * self.h + y) * self.w..][..self.w];
                    let dbase = ((i * 3 + c) * extent + oy + y) * extent + ox;
                    images[dbase..dbase + self.w].copy_from_slice(srow);
                }
            }
        }
        Ok(Dataset {
            images,
            labels: self.labels.clone(),
            n: self.n,
            h: extent,
            w: extent,
            num_classes: self.num_classes,
        })
    }

    /// Assemble a normalized `[B, 3, H, W]` batch for the given indices.
    pub fn batch<T: Element>(&self, idxs: &[usize], norm: &ChannelNorm) -> Result<Tensor<T>> {
        let plane = self.h * self.w;
        let mut data = Vec::with_capacity(idxs.len() * 3 * plane);
        for &i in idxs {
            if i >= self.n {
                return Err(Error::invalid(format!("sample {i} out of range ({})", self.n)));
            }
            let img = self.image(i);
            for c in 0..3 {
                let (m, s) = (norm.mean[c], norm.std[c]);
                data.extend(
                    img[c * plane..(c + 1) * plane]
                        .iter()
                        .map(|&v| T::from_f64((f64::from(v) - m) / s)),
                );
            }
        }
        Tensor::new(vec![idxs.len(), 3, self.h, self.w], data)
    }

    pub fn batch_labels(&self, idxs: &[usize]) -> Vec<usize> {
        idxs.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Per-channel affine normalization, estimated from the training split only.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ChannelNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelNorm {
    pub fn identity() -> Self {
        ChannelNorm { mean: [0.0; 3], std: [1.0; 3] }
    }

    pub fn from_train_split(train: &Dataset) -> Self {
        let plane = train.h * train.w;
        let mut mean = [0.0f64; 3];
        let mut var = [0.0f64; 3];
        let count = (train.n * plane) as f64;
        for i in 0..train.n {
            let img = train.image(i);
            for c in 0..3 {
                for &v in &img[c * plane..(c + 1) * plane] {
                    mean[c] += f64::from(v);
                }
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for i in 0..train.n {
            let img = train.image(i);
            for c in 0..3 {
                for &v in &img[c * plane..(c + 1) * plane] {
                    let d = f64::from(v) - mean[c];
                    var[c] += d * d;
                }
            }
        }
        let std = [
            (var[0] / count).sqrt().max(1e-6),
            (var[1] / count).sqrt().max(1e-6),
            (var[2] / count).sqrt().max(1e-6),
        ];
        ChannelNorm { mean, std }
    }
}

// ---------------------------------------------------------------------------
// IDX format
// ---------------------------------------------------------------------------

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Format(format!("unexpected EOF reading {what}")))?;
    Ok(u32::from_be_bytes(b))
}

/// Parse an IDX image/label file pair into a dataset. Grayscale pixels are
/// replicated across three channels and scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut ir = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut ir, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "image file magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(&mut ir, "image count")? as usize;
    let h = read_u32_be(&mut ir, "image rows")? as usize;
    let w = read_u32_be(&mut ir, "image cols")? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Format(format!("degenerate image dims {n}x{h}x{w}")));
    }
    let mut pixels = vec![0u8; n * h * w];
    ir.read_exact(&mut pixels).map_err(|_| {
        Error::Format(format!("image payload truncated (wanted {} bytes)", n * h * w))
    })?;

    let mut lr = BufReader::new(File::open(labels_path)?);
    let lmagic = read_u32_be(&mut lr, "label magic")?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "label file magic {lmagic:#010x}, expected {IDX_LABEL_MAGIC:#010x}"
        )));
    }
    let ln = read_u32_be(&mut lr, "label count")? as usize;
    if ln != n {
        return Err(Error::Format(format!("{n} images but {ln} labels")));
    }
    let mut raw_labels = vec![0u8; n];
    lr.read_exact(&mut raw_labels)
        .map_err(|_| Error::Format(format!("label payload truncated (wanted {n} bytes)")))?;

    let plane = h * w;
    let mut images = vec![0.0f32; n * 3 * plane];
    for i in 0..n {
        for p in 0..plane {
            let v = f32::from(pixels[i * plane + p]) / 255.0;
            for c in 0..3 {
                images[(i * 3 + c) * plane + p] = v;
            }
        }
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset { images, labels, n, h, w, num_classes })
}

pub fn write_idx_images(path: &Path, pixels: &[u8], n: usize, h: usize, w: usize) -> Result<()> {
    if pixels.len() != n * h * w {
        return Err(Error::invalid(format!(
            "pixel buffer {} != {n}*{h}*{w}",
            pixels.len()
        )));
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&IDX_IMAGE_MAGIC.to_be_bytes())?;
    f.write_all(&(n as u32).to_be_bytes())?;
    f.write_all(&(h as u32).to_be_bytes())?;
    f.write_all(&(w as u32).to_be_bytes())?;
    f.write_all(pixels)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&IDX_LABEL_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)?;
    Ok(())
}

/// Load `dir/{train,test}` IDX pairs using the conventional names.
pub fn load_digit_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let test = load_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// Procedural digit corpus
// ---------------------------------------------------------------------------

/// 5x7 bitmaps for 0-9, one string row per scanline.
const GLYPHS: [[&str; 7]; 10] = [
    [" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "],
    ["  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "],
    [" ### ", "#   #", "    #", "  ## ", " #   ", "#    ", "#####"],
    [" ### ", "#   #", "    #", "  ## ", "    #", "#   #", " ### "],
    ["   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "],
    ["#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "],
    [" ### ", "#    ", "#    ", "#### ", "#   #", "#   #", " ### "],
    ["#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "],
    [" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "],
    [" ### ", "#   #", "#   #", " ####", "    #", "    #", " ### "],
];

/// Render one 28x28 grayscale digit with randomized scale, offset and
/// intensity plus light background noise.
fn render_digit(digit: usize, rng: &mut ChaCha8Rng) -> [u8; 28 * 28] {
    let glyph = &GLYPHS[digit];
    let scale_x = rng.random_range(3..=4usize);
    let scale_y = rng.random_range(3..=4usize);
    let gw = 5 * scale_x;
    let gh = 7 * scale_y;
    let ox = rng.random_range(0..=(28 - gw));
    let oy = rng.random_range(0..=(28 - gh));
    let fg = rng.random_range(160..=255u32) as f32;
    let mut img = [0u8; 28 * 28];
    for (p, px) in img.iter_mut().enumerate() {
        let noise = rng.random_range(0.0..20.0f32);
        let (y, x) = (p / 28, p % 28);
        let inside = y >= oy && y < oy + gh && x >= ox && x < ox + gw;
        let lit = inside
            && glyph[(y - oy) / scale_y].as_bytes()[(x - ox) / scale_x] == b'#';
        let v = if lit { fg + noise } else { noise };
        *px = v.min(255.0) as u8;
    }
    img
}

/// Write a labeled train/test digit corpus in IDX format under `dir`.
pub fn make_digit_corpus(dir: &Path, n_train: usize, n_test: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut emit = |n: usize, img_name: &str, lab_name: &str| -> Result<()> {
        let mut pixels = Vec::with_capacity(n * 28 * 28);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let d = i % 10;
            pixels.extend_from_slice(&render_digit(d, &mut rng));
            labels.push(d as u8);
        }
        write_idx_images(&dir.join(img_name), &pixels, n, 28, 28)?;
        write_idx_labels(&dir.join(lab_name), &labels)
    };
    emit(n_train, TRAIN_IMAGES, TRAIN_LABELS)?;
    emit(n_test, TEST_IMAGES, TEST_LABELS)
}

// ---------------------------------------------------------------------------
// Synthetic frequency-class dataset
// ---------------------------------------------------------------------------

/// Classes are cosine modes: class `c` concentrates spectral energy at
/// index `(c mod 4, c div 4)`, with amplitude jitter and Gaussian pixel
/// noise (sigma 0.3). Class identity lives entirely in frequency content.
pub fn synth_dataset(classes: usize, n: usize, extent: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || classes > 16 {
        return Err(Error::invalid(format!("classes {classes} outside 1..=16")));
    }
    if extent < 4 {
        return Err(Error::invalid(format!("extent {extent} too small for 4x4 mode grid")));
    }
    let plan = build_plan::<f64>(extent, extent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f64, 0.3).expect("valid normal");
    // Coefficient scaled so the spatial pattern has O(1) peak amplitude at
    // any extent (orthonormal basis functions scale like 2/sqrt(M*N)).
    let coeff_scale = (extent * extent) as f64 / 2.0;

    let plane = extent * extent;
    let mut images = vec![0.0f32; n * 3 * plane];
    let mut labels = Vec::with_capacity(n);
    let mut spectrum = vec![0.0f64; plane];
    for i in 0..n {
        let c = i % classes;
        let (p, q) = (c % 4, c / 4);
        let amp = rng.random_range(0.75..1.25);
        spectrum.fill(0.0);
        spectrum[p * extent + q] = amp * coeff_scale.sqrt();
        let spec = Tensor::new(vec![extent, extent], spectrum.clone())?;
        let spatial = plan.idct2d(&spec)?;
        for ch in 0..3 {
            for (j, &v) in spatial.as_slice().iter().enumerate() {
                images[(i * 3 + ch) * plane + j] = (v + noise.sample(&mut rng)) as f32;
            }
        }
        labels.push(c);
    }
    Ok(Dataset { images, labels, n, h: extent, w: extent, num_classes: classes })
}
