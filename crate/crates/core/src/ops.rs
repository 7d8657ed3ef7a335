//! Pure tensor math: forward kernels and their VJP counterparts.
//!
//! Everything here is side-effect free; the autodiff tape composes these
//! and owns the saved-activation bookkeeping. Broadcasting follows the
//! usual trailing-axis alignment rules.

use crate::error::{Error, Result};
use crate::gemm::{gemm, transpose_slice};
use crate::tensor::{Element, Tensor};

// ---------------------------------------------------------------------------
// Broadcasting
// ---------------------------------------------------------------------------

/// Broadcast result shape for trailing-aligned operands.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} with {:?}",
                a, b
            )));
        };
    }
    Ok(out)
}

/// Per-output-axis element strides for an operand under broadcasting
/// (0 where the operand repeats).
fn effective_strides(out_dims: &[usize], dims: &[usize]) -> Vec<usize> {
    let rank = out_dims.len();
    let offset = rank - dims.len();
    // Row-major strides of the operand itself.
    let mut own = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        own[i] = own[i + 1] * dims[i + 1];
    }
    let mut eff = vec![0usize; rank];
    for i in 0..rank {
        if i >= offset && dims[i - offset] != 1 {
            eff[i] = own[i - offset];
        }
    }
    eff
}

/// Drive `f(out_linear, a_offset, b_offset)` over every output element.
fn for_each_bcast(
    out_dims: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_dims.iter().product();
    let rank = out_dims.len();
    let mut idx = vec![0usize; rank];
    let (mut ao, mut bo) = (0usize, 0usize);
    for lin in 0..numel {
        f(lin, ao, bo);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ao += sa[d];
            bo += sb[d];
            if idx[d] < out_dims[d] {
                break;
            }
            idx[d] = 0;
            ao -= sa[d] * out_dims[d];
            bo -= sb[d] * out_dims[d];
        }
    }
}

/// Elementwise combine with broadcasting.
pub fn binary_broadcast<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.dims() == b.dims() {
        return a.zip_map(b, f);
    }
    let out_dims = broadcast_shapes(a.dims(), b.dims())?;
    let sa = effective_strides(&out_dims, a.dims());
    let sb = effective_strides(&out_dims, b.dims());
    let mut out = vec![T::zero(); out_dims.iter().product()];
    let (av, bv) = (a.as_slice(), b.as_slice());
    for_each_bcast(&out_dims, &sa, &sb, |lin, ao, bo| {
        out[lin] = f(av[ao], bv[bo]);
    });
    Tensor::new(out_dims, out)
}

/// Sum `g` (shaped like the broadcast output) down to `target` dims.
/// This is the VJP of broadcasting itself.
pub fn reduce_to_shape<T: Element>(g: &Tensor<T>, target: &[usize]) -> Result<Tensor<T>> {
    if g.dims() == target {
        return Ok(g.clone());
    }
    let st = effective_strides(g.dims(), target);
    let zero = vec![0usize; g.rank()];
    let mut out = vec![T::zero(); target.iter().product()];
    let gv = g.as_slice();
    for_each_bcast(g.dims(), &st, &zero, |lin, toff, _| {
        out[toff] += gv[lin];
    });
    Tensor::new(target.to_vec(), out)
}

/// Sum `g * other` down to `target` dims; the VJP of broadcast multiply
/// with respect to the operand shaped `target`.
pub fn reduce_mul_to_shape<T: Element>(
    g: &Tensor<T>,
    other: &Tensor<T>,
    target: &[usize],
) -> Result<Tensor<T>> {
    let st = effective_strides(g.dims(), target);
    let so = effective_strides(g.dims(), other.dims());
    let mut out = vec![T::zero(); target.iter().product()];
    let (gv, ov) = (g.as_slice(), other.as_slice());
    for_each_bcast(g.dims(), &st, &so, |lin, toff, ooff| {
        out[toff] += gv[lin] * ov[ooff];
    });
    Tensor::new(target.to_vec(), out)
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

/// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
/// The tanh form *is* the definition here so the derivative below is exact.
pub fn gelu_scalar<T: Element>(x: T) -> T {
    let k0 = T::from_f64(0.7978845608028654);
    let k1 = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = k0 * (x + k1 * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_prime<T: Element>(x: T) -> T {
    let k0 = T::from_f64(0.7978845608028654);
    let k1 = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = k0 * (x + k1 * x * x * x);
    let t = u.tanh();
    let du = k0 * (T::one() + three * k1 * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// SiLU / swish: x * sigmoid(x).
pub fn silu_scalar<T: Element>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_prime<T: Element>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

// ---------------------------------------------------------------------------
// Softmax and cross-entropy
// ---------------------------------------------------------------------------

/// Numerically stable softmax over the last axis.
pub fn softmax_lastdim<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let last = *x.dims().last().expect("non-empty dims");
    let rows = x.numel() / last;
    let xv = x.as_slice();
    let mut out = vec![T::zero(); x.numel()];
    for r in 0..rows {
        let row = &xv[r * last..(r + 1) * last];
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = 0.0f64;
        for (o, &v) in out[r * last..(r + 1) * last].iter_mut().zip(row) {
            let e = (v - m).to_f64_lossy().exp();
            *o = T::from_f64(e);
            sum += e;
        }
        for o in &mut out[r * last..(r + 1) * last] {
            *o = T::from_f64(o.to_f64_lossy() / sum);
        }
    }
    Tensor::new(x.dims().to_vec(), out).expect("shape preserved")
}

/// dx = y * (g - <g, y>) per row, with y the saved softmax output.
pub fn softmax_vjp<T: Element>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let last = *y.dims().last().expect("non-empty dims");
    let rows = y.numel() / last;
    let (yv, gv) = (y.as_slice(), g.as_slice());
    let mut out = vec![T::zero(); y.numel()];
    for r in 0..rows {
        let o = r * last;
        let mut dot = 0.0f64;
        for i in 0..last {
            dot += (yv[o + i] * gv[o + i]).to_f64_lossy();
        }
        for i in 0..last {
            out[o + i] = yv[o + i] * (gv[o + i] - T::from_f64(dot));
        }
    }
    Tensor::new(y.dims().to_vec(), out).expect("shape preserved")
}

/// Mean label-smoothed cross-entropy over a batch of logits `[B, K]`.
/// Returns the scalar loss and the softmax probabilities (saved for the VJP).
pub fn cross_entropy_mean<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
    smoothing: f64,
) -> Result<(T, Tensor<T>)> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!(
            "cross entropy expects [batch, classes], got {:?}",
            logits.dims()
        )));
    }
    let (b, k) = (logits.dims()[0], logits.dims()[1]);
    if labels.len() != b {
        return Err(Error::shape(format!(
            "{} labels for batch of {}",
            labels.len(),
            b
        )));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::invalid(format!("smoothing {smoothing} not in [0,1)")));
    }
    let xv = logits.as_slice();
    let mut probs = vec![T::zero(); b * k];
    let mut total = 0.0f64;
    for r in 0..b {
        let y = labels[r];
        if y >= k {
            return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
        }
        let row = &xv[r * k..(r + 1) * k];
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max).to_f64_lossy();
        let mut lse = 0.0f64;
        for &v in row {
            lse += (v.to_f64_lossy() - m).exp();
        }
        let lse = m + lse.ln();
        let mut smooth_sum = 0.0f64;
        for (i, &v) in row.iter().enumerate() {
            let ls = v.to_f64_lossy() - lse;
            smooth_sum += ls;
            probs[r * k + i] = T::from_f64(ls.exp());
        }
        let target_ls = row[y].to_f64_lossy() - lse;
        total += -((1.0 - smoothing) * target_ls + smoothing / k as f64 * smooth_sum);
    }
    let loss = T::from_f64(total / b as f64);
    Ok((loss, Tensor::new(vec![b, k], probs)?))
}

/// dlogits = (probs - q) * upstream / B, with q the smoothed target.
pub fn cross_entropy_vjp<T: Element>(
    probs: &Tensor<T>,
    labels: &[usize],
    smoothing: f64,
    upstream: T,
) -> Tensor<T> {
    let (b, k) = (probs.dims()[0], probs.dims()[1]);
    let scale = upstream.to_f64_lossy() / b as f64;
    let off_target = smoothing / k as f64;
    let pv = probs.as_slice();
    let mut out = vec![T::zero(); b * k];
    for r in 0..b {
        for i in 0..k {
            let q = if i == labels[r] {
                1.0 - smoothing + off_target
            } else {
                off_target
            };
            out[r * k + i] = T::from_f64((pv[r * k + i].to_f64_lossy() - q) * scale);
        }
    }
    Tensor::new(vec![b, k], out).expect("shape preserved")
}

// ---------------------------------------------------------------------------
// Permute
// ---------------------------------------------------------------------------

/// Reorder axes: `out[idx[axes[0]], idx[axes[1]], ..] = x[idx]`-style, i.e.
/// output axis `i` is input axis `axes[i]`.
pub fn permute<T: Element>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    if axes.len() != rank {
        return Err(Error::invalid(format!(
            "permute axes {:?} for rank {rank}",
            axes
        )));
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return Err(Error::invalid(format!("bad permutation {:?}", axes)));
        }
        seen[a] = true;
    }
    let in_dims = x.dims();
    let out_dims: Vec<usize> = axes.iter().map(|&a| in_dims[a]).collect();
    // Row-major strides of the output.
    let mut out_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        out_strides[i] = out_strides[i + 1] * out_dims[i + 1];
    }
    // For input axis d: where does it land in the output?
    let mut out_stride_for_in_axis = vec![0usize; rank];
    for (opos, &a) in axes.iter().enumerate() {
        out_stride_for_in_axis[a] = out_strides[opos];
    }
    let xv = x.as_slice();
    let mut out = vec![T::zero(); x.numel()];
    let zero = vec![0usize; rank];
    for_each_bcast(in_dims, &out_stride_for_in_axis, &zero, |lin, ooff, _| {
        out[ooff] = xv[lin];
    });
    Tensor::new(out_dims, out)
}

/// The permutation that undoes `axes`.
pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

// ---------------------------------------------------------------------------
// 3x3 convolution (stride 1 or 2, zero padding 1) via im2col + GEMM
// ---------------------------------------------------------------------------

pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub ho: usize,
    pub wo: usize,
}

pub fn conv2d_dims<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Result<ConvDims> {
    if x.rank() != 4 || w.rank() != 4 || b.rank() != 1 {
        return Err(Error::shape(format!(
            "conv2d expects x[B,C,H,W] w[Co,Ci,3,3] b[Co], got {:?} {:?} {:?}",
            x.dims(),
            w.dims(),
            b.dims()
        )));
    }
    if w.dims()[2] != 3 || w.dims()[3] != 3 {
        return Err(Error::shape("conv2d kernel must be 3x3".to_string()));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::invalid(format!("conv2d stride {stride} not in {{1,2}}")));
    }
    let (batch, cin, h, w_ext) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    if w.dims()[1] != cin || b.dims()[0] != w.dims()[0] {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: x {:?}, w {:?}, b {:?}",
            x.dims(),
            w.dims(),
            b.dims()
        )));
    }
    Ok(ConvDims {
        batch,
        cin,
        h,
        w: w_ext,
        cout: w.dims()[0],
        ho: (h + 2 - 3) / stride + 1,
        wo: (w_ext + 2 - 3) / stride + 1,
    })
}

/// Lower x into `[B*Ho*Wo, Cin*9]` patches (zero padding 1).
fn im2col<T: Element>(x: &[T], d: &ConvDims, stride: usize) -> Vec<T> {
    let mut cols = vec![T::zero(); d.batch * d.ho * d.wo * d.cin * 9];
    let row_len = d.cin * 9;
    for b in 0..d.batch {
        for ho in 0..d.ho {
            for wo in 0..d.wo {
                let row = ((b * d.ho + ho) * d.wo + wo) * row_len;
                for ci in 0..d.cin {
                    let plane = (b * d.cin + ci) * d.h * d.w;
                    for kh in 0..3 {
                        let ih = (ho * stride + kh) as isize - 1;
                        for kw in 0..3 {
                            let iw = (wo * stride + kw) as isize - 1;
                            let v = if ih >= 0 && (ih as usize) < d.h && iw >= 0 && (iw as usize) < d.w
                            {
                                x[plane + ih as usize * d.w + iw as usize]
                            } else {
                                T::zero()
                            };
                            cols[row + (ci * 3 + kh) * 3 + kw] = v;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add `[B*Ho*Wo, Cin*9]` patch gradients back into image layout.
fn col2im<T: Element>(dcols: &[T], d: &ConvDims, stride: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); d.batch * d.cin * d.h * d.w];
    let row_len = d.cin * 9;
    for b in 0..d.batch {
        for ho in 0..d.ho {
            for wo in 0..d.wo {
                let row = ((b * d.ho + ho) * d.wo + wo) * row_len;
                for ci in 0..d.cin {
                    let plane = (b * d.cin + ci) * d.h * d.w;
                    for kh in 0..3 {
                        let ih = (ho * stride + kh) as isize - 1;
                        if ih < 0 || ih as usize >= d.h {
                            continue;
                        }
                        for kw in 0..3 {
                            let iw = (wo * stride + kw) as isize - 1;
                            if iw < 0 || iw as usize >= d.w {
                                continue;
                            }
                            dx[plane + ih as usize * d.w + iw as usize] +=
                                dcols[row + (ci * 3 + kh) * 3 + kw];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let d = conv2d_dims(x, w, b, stride)?;
    let cols = im2col(x.as_slice(), &d, stride);
    let kdim = d.cin * 9;
    let mut wt = vec![T::zero(); kdim * d.cout];
    transpose_slice(d.cout, kdim, w.as_slice(), &mut wt);
    let sites = d.batch * d.ho * d.wo;
    let mut rows = vec![T::zero(); sites * d.cout];
    gemm(sites, kdim, d.cout, &cols, &wt, &mut rows);
    // [site, Cout] -> [B, Cout, Ho, Wo], adding bias.
    let bv = b.as_slice();
    let mut out = vec![T::zero(); sites * d.cout];
    for s in 0..sites {
        let (bi, rest) = (s / (d.ho * d.wo), s % (d.ho * d.wo));
        for co in 0..d.cout {
            out[(bi * d.cout + co) * d.ho * d.wo + rest] = rows[s * d.cout + co] + bv[co];
        }
    }
    Tensor::new(vec![d.batch, d.cout, d.ho, d.wo], out)
}

/// Gradients w.r.t. (x, w, b). Patches are recomputed rather than saved:
/// it trades FLOPs for not holding an extra x9 activation per conv.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = conv2d_dims(x, w, b, stride)?;
    let sites = d.batch * d.ho * d.wo;
    let kdim = d.cin * 9;
    // [B, Cout, Ho, Wo] -> [site, Cout]
    let dov = dout.as_slice();
    let mut dout_rows = vec![T::zero(); sites * d.cout];
    for s in 0..sites {
        let (bi, rest) = (s / (d.ho * d.wo), s % (d.ho * d.wo));
        for co in 0..d.cout {
            dout_rows[s * d.cout + co] = dov[(bi * d.cout + co) * d.ho * d.wo + rest];
        }
    }
    let cols = im2col(x.as_slice(), &d, stride);
    // dW = dout_rows^T * cols
    let mut dout_t = vec![T::zero(); sites * d.cout];
    transpose_slice(sites, d.cout, &dout_rows, &mut dout_t);
    let mut dw = vec![T::zero(); d.cout * kdim];
    gemm(d.cout, sites, kdim, &dout_t, &cols, &mut dw);
    // db = column sums
    let mut db = vec![T::zero(); d.cout];
    for s in 0..sites {
        for co in 0..d.cout {
            db[co] += dout_rows[s * d.cout + co];
        }
    }
    // dx = col2im(dout_rows * w2d)
    let mut dcols = vec![T::zero(); sites * kdim];
    gemm(sites, d.cout, kdim, &dout_rows, w.as_slice(), &mut dcols);
    let dx = col2im(&dcols, &d, stride);
    Ok((
        Tensor::new(x.dims().to_vec(), dx)?,
        Tensor::new(w.dims().to_vec(), dw)?,
        Tensor::new(vec![d.cout], db)?,
    ))
}

// ---------------------------------------------------------------------------
// Depthwise 3x3 convolution (stride 1, zero padding 1)
// ---------------------------------------------------------------------------

fn dwconv_check<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if x.rank() != 4 || w.dims() != [x.dims()[1], 3, 3] || b.dims() != [x.dims()[1]] {
        return Err(Error::shape(format!(
            "dwconv3x3 expects x[B,C,H,W] w[C,3,3] b[C], got {:?} {:?} {:?}",
            x.dims(),
            w.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn dwconv3x3_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    dwconv_check(x, w, b)?;
    let (bs, c, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (xv, wv, bv) = (x.as_slice(), w.as_slice(), b.as_slice());
    let mut out = vec![T::zero(); x.numel()];
    for bi in 0..bs {
        for ci in 0..c {
            let plane = (bi * c + ci) * h * wd;
            let ker = &wv[ci * 9..ci * 9 + 9];
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = bv[ci];
                    for kh in 0..3 {
                        let ih = i as isize + kh as isize - 1;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for kw in 0..3 {
                            let iw = j as isize + kw as isize - 1;
                            if iw < 0 || iw as usize >= wd {
                                continue;
                            }
                            acc += ker[kh * 3 + kw] * xv[plane + ih as usize * wd + iw as usize];
                        }
                    }
                    out[plane + i * wd + j] = acc;
                }
            }
        }
    }
    Tensor::new(x.dims().to_vec(), out)
}

pub fn dwconv3x3_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    dout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    dwconv_check(x, w, b)?;
    let (bs, c, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (xv, wv, gv) = (x.as_slice(), w.as_slice(), dout.as_slice());
    let mut dx = vec![T::zero(); x.numel()];
    let mut dw = vec![T::zero(); w.numel()];
    let mut db = vec![T::zero(); c];
    for bi in 0..bs {
        for ci in 0..c {
            let plane = (bi * c + ci) * h * wd;
            let ker = &wv[ci * 9..ci * 9 + 9];
            for i in 0..h {
                for j in 0..wd {
                    let g = gv[plane + i * wd + j];
                    db[ci] += g;
                    for kh in 0..3 {
                        let ih = i as isize + kh as isize - 1;
                        if ih < 0 || ih as usize >= h {
                            continue;
                        }
                        for kw in 0..3 {
                            let iw = j as isize + kw as isize - 1;
                            if iw < 0 || iw as usize >= wd {
                                continue;
                            }
                            let xo = plane + ih as usize * wd + iw as usize;
                            dx[xo] += g * ker[kh * 3 + kw];
                            dw[ci * 9 + kh * 3 + kw] += g * xv[xo];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.dims().to_vec(), dx)?,
        Tensor::new(w.dims().to_vec(), dw)?,
        Tensor::new(vec![c], db)?,
    ))
}

// ---------------------------------------------------------------------------
// Layer norm over the channel axis
// ---------------------------------------------------------------------------

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Normalizes across channels at each spatial site. Accepts `[B, C]` or
/// `[B, C, H, W]`. Returns `(y, xhat, inv_std)`; the latter two feed the VJP.
pub fn layer_norm_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, sites, plane) = layer_norm_geometry(x, gamma, beta)?;
    let eps = T::from_f64(LAYER_NORM_EPS);
    let cn = T::from_f64(c as f64);
    let (xv, gv, bv) = (x.as_slice(), gamma.as_slice(), beta.as_slice());
    let mut y = vec![T::zero(); x.numel()];
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = vec![T::zero(); sites];
    for s in 0..sites {
        let base = site_base(s, c, plane);
        let mut mean = T::zero();
        for ci in 0..c {
            mean += xv[base + ci * plane];
        }
        mean = mean / cn;
        let mut var = T::zero();
        for ci in 0..c {
            let d = xv[base + ci * plane] - mean;
            var += d * d;
        }
        var = var / cn;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[s] = istd;
        for ci in 0..c {
            let off = base + ci * plane;
            let xh = (xv[off] - mean) * istd;
            xhat[off] = xh;
            y[off] = gv[ci] * xh + bv[ci];
        }
    }
    Ok((
        Tensor::new(x.dims().to_vec(), y)?,
        Tensor::new(x.dims().to_vec(), xhat)?,
        Tensor::new(vec![sites], inv_std)?,
    ))
}

/// Standard layer-norm VJP given saved xhat/inv_std.
pub fn layer_norm_backward<T: Element>(
    g: &Tensor<T>,
    gamma: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = gamma.dims()[0];
    let plane = if g.rank() == 4 { g.dims()[2] * g.dims()[3] } else { 1 };
    let sites = g.numel() / c;
    let cn = T::from_f64(c as f64);
    let (gv, gav, xhv, isv) = (g.as_slice(), gamma.as_slice(), xhat.as_slice(), inv_std.as_slice());
    let mut dx = vec![T::zero(); g.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..sites {
        let base = site_base(s, c, plane);
        let istd = isv[s];
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for ci in 0..c {
            let off = base + ci * plane;
            let dxh = gv[off] * gav[ci];
            s1 += dxh;
            s2 += dxh * xhv[off];
            dgamma[ci] += gv[off] * xhv[off];
            dbeta[ci] += gv[off];
        }
        for ci in 0..c {
            let off = base + ci * plane;
            let dxh = gv[off] * gav[ci];
            dx[off] = istd / cn * (cn * dxh - s1 - xhv[off] * s2);
        }
    }
    Ok((
        Tensor::new(g.dims().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

fn layer_norm_geometry<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    if !(x.rank() == 2 || x.rank() == 4) {
        return Err(Error::shape(format!(
            "layer norm expects [B,C] or [B,C,H,W], got {:?}",
            x.dims()
        )));
    }
    let c = x.dims()[1];
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::shape(format!(
            "layer norm affine params must be [{c}], got {:?} and {:?}",
            gamma.dims(),
            beta.dims()
        )));
    }
    let plane = if x.rank() == 4 { x.dims()[2] * x.dims()[3] } else { 1 };
    let sites = x.numel() / c;
    Ok((c, sites, plane))
}

/// Map site index -> base flat offset, where a site is (batch, h, w) and the
/// channel stride is `plane`.
fn site_base(s: usize, c: usize, plane: usize) -> usize {
    let (b, hw) = (s / plane, s % plane);
    b * c * plane + hw
}

// ---------------------------------------------------------------------------
// Global average pool over spatial axes
// ---------------------------------------------------------------------------

pub fn gap_forward<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::shape(format!(
            "gap expects [B,C,H,W], got {:?}",
            x.dims()
        )));
    }
    let (b, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let xv = x.as_slice();
    let mut out = vec![T::zero(); b * c];
    for bi in 0..b {
        for ci in 0..c {
            let plane = (bi * c + ci) * h * w;
            let mut acc = T::zero();
            for p in 0..h * w {
                acc += xv[plane + p];
            }
            out[bi * c + ci] = acc * inv;
        }
    }
    Tensor::new(vec![b, c], out)
}

pub fn gap_backward<T: Element>(x_dims: &[usize], g: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = (x_dims[0], x_dims[1], x_dims[2], x_dims[3]);
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let gv = g.as_slice();
    let mut dx = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let plane = (bi * c + ci) * h * w;
            let gval = gv[bi * c + ci] * inv;
            for p in 0..h * w {
                dx[plane + p] = gval;
            }
        }
    }
    Tensor::new(x_dims.to_vec(), dx)
}
