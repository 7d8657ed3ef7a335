//! Reverse-mode autodiff on an arena tape.
//!
//! Forward values are computed eagerly as nodes are pushed; `backward`
//! walks the arena once in reverse, accumulating vector-Jacobian products.
//! The op set is exactly what the backbone needs — dense primitives plus
//! the spectral pair, whose adjoints are each other thanks to
//! orthonormality.

use std::sync::Arc;

use crate::dct::DctPlan;
use crate::error::{Error, Result};
use crate::gemm;
use crate::ops;
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T: Element> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulScalar(NodeId, T),
    Exp(NodeId),
    Matmul(NodeId, NodeId),
    BatchedMatmul(NodeId, NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize },
    DwConv3x3 { x: NodeId, w: NodeId, b: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Tensor<T>, inv_std: Tensor<T> },
    Gelu(NodeId),
    Silu(NodeId),
    SoftmaxLast(NodeId),
    GapSpatial(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    CrossEntropy { logits: NodeId, labels: Arc<Vec<usize>>, smoothing: f64, probs: Tensor<T> },
    Dct2d { x: NodeId, plan: Arc<DctPlan<T>> },
    Idct2d { x: NodeId, plan: Arc<DctPlan<T>> },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Arena of computed values plus enough saved state to run backward once.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), check_finite: false }
    }

    /// Validate every forward value (and backward grad) for NaN/Inf as it
    /// is produced. Costs a full pass per tensor; meant for debugging and
    /// the verification suite.
    pub fn with_finite_checks() -> Self {
        Tape { nodes: Vec::new(), check_finite: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<NodeId> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(format!(
                "node {} produced NaN/Inf (dims {:?})",
                self.nodes.len(),
                value.dims()
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::binary_broadcast(self.value(a), self.value(b), |x, y| x + y)?;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::binary_broadcast(self.value(a), self.value(b), |x, y| x - y)?;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::binary_broadcast(self.value(a), self.value(b), |x, y| x * y)?;
        self.push(v, Op::Mul(a, b))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::MulScalar(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = gemm::matmul(self.value(a), self.value(b))?;
        self.push(v, Op::Matmul(a, b))
    }

    pub fn batched_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = gemm::batched_matmul(self.value(a), self.value(b))?;
        self.push(v, Op::BatchedMatmul(a, b))
    }

    pub fn reshape(&mut self, a: NodeId, dims: impl Into<Vec<usize>>) -> Result<NodeId> {
        let v = self.value(a).reshape(dims)?;
        self.push(v, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        let v = ops::permute(self.value(a), axes)?;
        self.push(v, Op::Permute(a, axes.to_vec()))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let v = ops::conv2d_forward(self.value(x), self.value(w), self.value(b), stride)?;
        self.push(v, Op::Conv2d { x, w, b, stride })
    }

    pub fn dwconv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::dwconv3x3_forward(self.value(x), self.value(w), self.value(b))?;
        self.push(v, Op::DwConv3x3 { x, w, b })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (y, xhat, inv_std) =
            ops::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta))?;
        self.push(y, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(ops::gelu_scalar);
        self.push(v, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(ops::silu_scalar);
        self.push(v, Op::Silu(a))
    }

    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::softmax_lastdim(self.value(a));
        self.push(v, Op::SoftmaxLast(a))
    }

    pub fn gap_spatial(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::gap_forward(self.value(a))?;
        self.push(v, Op::GapSpatial(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: T = self.value(a).as_slice().iter().cloned().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        let s: T = self.value(a).as_slice().iter().cloned().sum();
        self.push(
            Tensor::scalar(s / T::from_f64(n as f64)),
            Op::MeanAll(a),
        )
    }

    /// Mean label-smoothed cross-entropy; the scalar loss node.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: Arc<Vec<usize>>,
        smoothing: f64,
    ) -> Result<NodeId> {
        let (loss, probs) = ops::cross_entropy_mean(self.value(logits), &labels, smoothing)?;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels, smoothing, probs },
        )
    }

    /// Forward 2-D spectral transform of the trailing axes.
    pub fn dct2d(&mut self, x: NodeId, plan: &Arc<DctPlan<T>>) -> Result<NodeId> {
        let v = plan.dct2d(self.value(x))?;
        self.push(v, Op::Dct2d { x, plan: Arc::clone(plan) })
    }

    /// Inverse 2-D spectral transform of the trailing axes.
    pub fn idct2d(&mut self, x: NodeId, plan: &Arc<DctPlan<T>>) -> Result<NodeId> {
        let v = plan.idct2d(self.value(x))?;
        self.push(v, Op::Idct2d { x, plan: Arc::clone(plan) })
    }

    /// Reverse sweep from a scalar loss. Returns one gradient slot per node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.value(loss).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.check_finite && !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient at node {i} is NaN/Inf")));
            }
            self.apply_vjp(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn apply_vjp(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, ops::reduce_to_shape(g, self.value(*a).dims())?)?;
                accumulate(grads, *b, ops::reduce_to_shape(g, self.value(*b).dims())?)?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, ops::reduce_to_shape(g, self.value(*a).dims())?)?;
                let db = ops::reduce_to_shape(g, self.value(*b).dims())?.map(|v| -v);
                accumulate(grads, *b, db)?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, ops::reduce_mul_to_shape(g, bv, av.dims())?)?;
                accumulate(grads, *b, ops::reduce_mul_to_shape(g, av, bv.dims())?)?;
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|v| v * c))?;
            }
            Op::Exp(a) => {
                // d/dx e^x = e^x = saved output.
                accumulate(grads, *a, node.value.zip_map(g, |y, gv| y * gv)?)?;
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = gemm::matmul(g, &bv.transpose2d()?)?;
                let db = gemm::matmul(&av.transpose2d()?, g)?;
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
            Op::BatchedMatmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (av.dims()[0], av.dims()[1], av.dims()[2]);
                let n = bv.dims()[2];
                let mut da = vec![T::zero(); av.numel()];
                let mut db = vec![T::zero(); bv.numel()];
                let mut bt = vec![T::zero(); k * n];
                let mut at = vec![T::zero(); m * k];
                for s in 0..bs {
                    let gsl = &g.as_slice()[s * m * n..(s + 1) * m * n];
                    gemm::transpose_slice(k, n, &bv.as_slice()[s * k * n..(s + 1) * k * n], &mut bt);
                    gemm::gemm(m, n, k, gsl, &bt, &mut da[s * m * k..(s + 1) * m * k]);
                    gemm::transpose_slice(m, k, &av.as_slice()[s * m * k..(s + 1) * m * k], &mut at);
                    gemm::gemm(k, m, n, &at, gsl, &mut db[s * k * n..(s + 1) * k * n]);
                }
                accumulate(grads, *a, Tensor::new(av.dims().to_vec(), da)?)?;
                accumulate(grads, *b, Tensor::new(bv.dims().to_vec(), db)?)?;
            }
            Op::Reshape(a) => {
                accumulate(grads, *a, g.reshape(self.value(*a).dims().to_vec())?)?;
            }
            Op::Permute(a, axes) => {
                accumulate(grads, *a, ops::permute(g, &ops::inverse_axes(axes))?)?;
            }
            Op::Conv2d { x, w, b, stride } => {
                let (dx, dw, db) =
                    ops::conv2d_backward(self.value(*x), self.value(*w), self.value(*b), *stride, g)?;
                accumulate(grads, *x, dx)?;
                accumulate(grads, *w, dw)?;
                accumulate(grads, *b, db)?;
            }
            Op::DwConv3x3 { x, w, b } => {
                let (dx, dw, db) =
                    ops::dwconv3x3_backward(self.value(*x), self.value(*w), self.value(*b), g)?;
                accumulate(grads, *x, dx)?;
                accumulate(grads, *w, dw)?;
                accumulate(grads, *b, db)?;
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (dx, dgamma, dbeta) =
                    ops::layer_norm_backward(g, self.value(*gamma), xhat, inv_std)?;
                accumulate(grads, *x, dx)?;
                accumulate(grads, *gamma, dgamma)?;
                accumulate(grads, *beta, dbeta)?;
            }
            Op::Gelu(a) => {
                let da = self.value(*a).zip_map(g, |x, gv| ops::gelu_prime(x) * gv)?;
                accumulate(grads, *a, da)?;
            }
            Op::Silu(a) => {
                let da = self.value(*a).zip_map(g, |x, gv| ops::silu_prime(x) * gv)?;
                accumulate(grads, *a, da)?;
            }
            Op::SoftmaxLast(a) => {
                accumulate(grads, *a, ops::softmax_vjp(&node.value, g))?;
            }
            Op::GapSpatial(a) => {
                accumulate(grads, *a, ops::gap_backward(self.value(*a).dims(), g)?)?;
            }
            Op::SumAll(a) => {
                let gs = g.scalar_value()?;
                accumulate(grads, *a, Tensor::full(self.value(*a).dims().to_vec(), gs)?)?;
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel();
                let gs = g.scalar_value()? / T::from_f64(n as f64);
                accumulate(grads, *a, Tensor::full(self.value(*a).dims().to_vec(), gs)?)?;
            }
            Op::CrossEntropy { logits, labels, smoothing, probs } => {
                let up = g.scalar_value()?;
                accumulate(
                    grads,
                    *logits,
                    ops::cross_entropy_vjp(probs, labels, *smoothing, up),
                )?;
            }
            // The transforms are orthonormal linear maps, so each one's
            // adjoint is the other.
            Op::Dct2d { x, plan } => {
                accumulate(grads, *x, plan.idct2d(g)?)?;
            }
            Op::Idct2d { x, plan } => {
                accumulate(grads, *x, plan.dct2d(g)?)?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Element>(
    grads: &mut [Option<Tensor<T>>],
    id: NodeId,
    delta: Tensor<T>,
) -> Result<()> {
    grads[id.0] = Some(match grads[id.0].take() {
        Some(existing) => existing.zip_map(&delta, |a, b| a + b)?,
        None => delta,
    });
    Ok(())
}

/// Result of a backward sweep: one optional gradient per tape node.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss w.r.t. a node, if the node influenced the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

// ---------------------------------------------------------------------------
// Numerical gradient checking
// ---------------------------------------------------------------------------

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub elements_checked: usize,
}

/// Compare analytic gradients of `build` (a fresh forward graph each call,
/// leaves in the order of `inputs`, returning the scalar loss node) against
/// central differences at every element of every input.
///
/// The relative error per element is `|analytic - numeric| / max(|numeric|, 1)`.
/// Also verifies the forward pass is bitwise deterministic across rebuilds.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |e| (i, e)))
        .collect();
    grad_check_sampled(build, inputs, h, &all)
}

/// [`grad_check`] restricted to chosen `(input_index, element_index)` pairs —
/// for graphs too large to probe exhaustively.
pub fn grad_check_sampled<F>(
    build: F,
    inputs: &[Tensor<f64>],
    h: f64,
    samples: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &ids)?;
        let value = tape.value(loss).scalar_value()?;
        let grads = tape.backward(loss)?;
        let input_grads = ids
            .iter()
            .map(|&id| grads.get(id).cloned())
            .collect::<Vec<_>>();
        Ok((value, input_grads))
    };

    let (loss_a, analytic) = eval(inputs)?;
    let (loss_b, _) = eval(inputs)?;
    if loss_a.to_bits() != loss_b.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "two identical forward passes disagree: {loss_a:?} vs {loss_b:?}"
        )));
    }

    let mut max_rel = 0.0f64;
    for &(ti, ei) in samples {
        if ti >= inputs.len() || ei >= inputs[ti].numel() {
            return Err(Error::invalid(format!(
                "grad check sample ({ti},{ei}) out of range"
            )));
        }
        let perturbed = |delta: f64| -> Result<f64> {
            let mut tensors = inputs.to_vec();
            let mut data = tensors[ti].to_vec();
            data[ei] += delta;
            tensors[ti] = Tensor::new(tensors[ti].dims().to_vec(), data)?;
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
            let loss = build(&mut tape, &ids)?;
            tape.value(loss).scalar_value()
        };
        let numeric = (perturbed(h)? - perturbed(-h)?) / (2.0 * h);
        let analytic_v = analytic[ti]
            .as_ref()
            .map(|t| t.as_slice()[ei])
            .unwrap_or(0.0);
        let rel = (analytic_v - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, elements_checked: samples.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dct::build_plan;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn randt(rng: &mut StdRng, dims: Vec<usize>) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-6;

    #[test]
    fn backward_of_simple_chain() {
        // f(x) = sum(exp(2x)); df/dx = 2 exp(2x).
        let x = Tensor::<f64>::new(vec![3], vec![0.1, -0.4, 0.9]).unwrap();
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let two = tape.mul_scalar(xid, 2.0).unwrap();
        let e = tape.exp(two).unwrap();
        let loss = tape.sum_all(e).unwrap();
        let grads = tape.backward(loss).unwrap();
        let dx = grads.get(xid).unwrap();
        for i in 0..3 {
            let want = 2.0 * (2.0 * x.at(&[i])).exp();
            assert!((dx.at(&[i]) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]).unwrap());
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn grad_accumulates_across_fanout() {
        // f(x) = sum(x*x + x) uses x twice: df/dx = 2x + 1.
        let x = Tensor::<f64>::new(vec![2], vec![0.3, -0.7]).unwrap();
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone());
        let sq = tape.mul(xid, xid).unwrap();
        let s = tape.add(sq, xid).unwrap();
        let loss = tape.sum_all(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        let dx = grads.get(xid).unwrap();
        for i in 0..2 {
            assert!((dx.at(&[i]) - (2.0 * x.at(&[i]) + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_checks_catch_nan_forward() {
        let mut tape = Tape::<f64>::with_finite_checks();
        let x = tape.leaf(Tensor::new(vec![1], vec![800.0]).unwrap());
        let e = tape.exp(x); // exp(800) overflows to inf
        assert!(matches!(e, Err(Error::NonFinite(_))));
    }

    #[test]
    fn grad_check_elementwise_and_broadcast_ops() {
        let mut rng = StdRng::seed_from_u64(21);
        let a = randt(&mut rng, vec![2, 3]);
        let b = randt(&mut rng, vec![3]);
        let rep = grad_check(
            |tape, ids| {
                let s = tape.add(ids[0], ids[1])?; // broadcast add
                let m = tape.mul(s, ids[0])?;
                let d = tape.sub(m, ids[1])?; // broadcast sub
                let e = tape.exp(d)?;
                tape.mean_all(e)
            },
            &[a, b],
            H,
        )
        .unwrap();
        assert!(rep.max_rel_err < TOL, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn grad_check_matmul_chain() {
        let mut rng = StdRng::seed_from_u64(22);
        let a = randt(&mut rng, vec![3, 4]);
        let b = randt(&mut rng, vec![4, 2]);
        let rep = grad_check(
            |tape, ids| {
                let y = tape.matmul(ids[0], ids[1])?;
                let g = tape.gelu(y)?;
                tape.sum_all(g)
            },
            &[a, b],
            H,
        )
        .unwrap();
        assert!(rep.max_rel_err < TOL, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn grad_check_batched_matmul() {
        let mut rng = StdRng::seed_from_u64(23);
        let a = randt(&mut rng, vec![2, 3, 4]);
        let b = randt(&mut rng, vec![2, 4, 3]);
        let rep = grad_check(
            |tape, ids| {
                let y = tape.batched_matmul(ids[0], ids[1])?;
                let s = tape.silu(y)?;
                tape.sum_all(s)
            },
            &[a, b],
            H,
        )
        .unwrap();
        assert!(rep.max_rel_err < TOL, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn grad_check_softmax_reshape_permute() {
        let mut rng = StdRng::seed_from_u64(24);
        let x = randt(&mut rng, vec![2, 3, 4]);
        let w = randt(&mut rng, vec![2, 3, 4]);
        let rep = grad_check(
            |tape, ids| {
                let p = tape.permute(ids[0], &[0, 2, 1])?;
                let r = tape.reshape(p, vec![2, 12])?;
                let sm = tape.softmax_last(r)?;
                let back = tape.reshape(sm, vec![2, 4, 3])?;
                let unperm = tape.permute(back, &[0, 2, 1])?;
                let weighted = tape.mul(unperm, ids[1])?;
                tape.sum_all(weighted)
            },
            &[x, w],
            H,
        )
        .unwrap();
        assert!(rep.max_rel_err < TOL, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn grad_check_conv_and_pool() {
        let mut rng = StdRng::seed_from_u64(25);
        let x = randt(&mut rng, vec![1, 2, 4, 4]);
        let w = randt(&mut rng, vec![3, 2, 3, 3]);
        let b = randt(&mut rng, vec![3]);
        for stride in [1usize, 2] {
            let rep = grad_check(
                |tape, ids| {
                    let y = tape.conv2d(ids[0], ids[1], ids[2], stride)?;
                    let a = tape.gelu(y)?;
                    let p = tape.gap_spatial(a)?;
                    tape.sum_all(p)
                },
                &[x.clone(), w.clone(), b.clone()],
                H,
            )
            .unwrap();
            assert!(rep.max_rel_err < TOL, "stride {stride}: {}", rep.max_rel_err);
        }
    }

    #[test]
    fn grad_check_depthwise_conv() {
        let mut rng = StdRng::seed_from_u64(26);
        let x = randt(&mut rng, vec![2, 3, 4, 4]);
        let w = randt(&mut rng, vec![3, 3, 3]);
        let b = randt(&mut rng, vec![3]);
        let rep = grad_check(
            |tape, ids| {
                let y = tape.dwconv3x3(ids[0], ids[1], ids[2])?;
                let s = tape.silu(y)?;
                tape.mean_all(s)
            },
            &[x, w, b],
            H,
        )
        .unwrap();
        assert!(rep.max_rel_err < TOL, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn grad_check_layer_norm_both_ranks() {
        let mut rng = StdRng::seed_from_u64(27);
        for dims in [vec![3, 5], vec![2, 4, 3, 3]] {
            let x = randt(&mut rng, dims.clone());
            let gamma = randt(&mut rng, vec![dims[1]]).map(|v| v + 1.5);
            let beta = randt(&mut rng, vec![dims[1]]);
            let rep = grad_check(
                |tape, ids| {
                    let y = tape.layer_norm(ids[0], ids[1], ids[2])?;
                    let e = tape.gelu(y)?;
                    tape.sum_all(e)
                },
                &[x, gamma, beta],
                H,
            )
            .unwrap();
            assert!(rep.max_rel_err < TOL, "dims {dims:?}: {}", rep.max_rel_err);
        }
    }

    #[test]
    fn grad_check_cross_entropy() {
        let mut rng = StdRng::seed_from_u64(28);
        let logits = randt(&mut rng, vec![4, 5]);
        let labels = Arc::new(vec![0usize, 3, 2, 4]);
        for &smoothing in &[0.0, 0.1] {
            let labels = Arc::clone(&labels);
            let rep = grad_check(
                move |tape, ids| tape.cross_entropy(ids[0], Arc::clone(&labels), smoothing),
                &[logits.clone()],
                H,
            )
            .unwrap();
            assert!(rep.max_rel_err < TOL, "smoothing {smoothing}: {}", rep.max_rel_err);
        }
    }

    #[test]
    fn grad_check_spectral_pair() {
        let mut rng = StdRng::seed_from_u64(29);
        let x = randt(&mut rng, vec![2, 1, 4, 4]);
        let coeff = randt(&mut rng, vec![1, 4, 4]);
        let plan = build_plan::<f64>(4, 4).unwrap();
        let rep = grad_check(
            move |tape, ids| {
                let spec = tape.dct2d(ids[0], &plan)?;
                let damped = tape.mul(spec, ids[1])?;
                let back = tape.idct2d(damped, &plan)?;
                let sq = tape.mul(back, back)?;
                tape.sum_all(sq)
            },
            &[x, coeff],
            H,
        )
        .unwrap();
        assert!(rep.max_rel_err < TOL, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn backward_twice_on_one_tape_is_allowed_and_consistent() {
        // Two sweeps over the same (immutable) tape must agree bitwise.
        let mut rng = StdRng::seed_from_u64(30);
        let x = randt(&mut rng, vec![3, 3]);
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let y = tape.gelu(xid).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert!(g1.get(xid).unwrap().bitwise_eq(g2.get(xid).unwrap()));
    }

    #[test]
    fn grad_check_reports_determinism_violations() {
        // A build closure that injects fresh randomness must be rejected.
        use std::cell::Cell;
        let counter = Cell::new(0.0f64);
        let x = Tensor::<f64>::ones(vec![2]).unwrap();
        let res = grad_check(
            move |tape, ids| {
                counter.set(counter.get() + 1.0);
                let noise = tape.leaf(Tensor::scalar(counter.get()));
                let y = tape.mul(ids[0], noise)?;
                tape.sum_all(y)
            },
            &[x],
            H,
        );
        assert!(matches!(res, Err(Error::NonDeterministic(_))));
    }

    #[test]
    fn unused_input_reports_zero_gradient_path() {
        // An input disconnected from the loss yields rel err vs numeric 0.
        let a = Tensor::<f64>::ones(vec![2]).unwrap();
        let b = Tensor::<f64>::ones(vec![2]).unwrap();
        let rep = grad_check(
            |tape, ids| {
                let _unused = ids[1];
                tape.sum_all(ids[0])
            },
            &[a, b],
            H,
        )
        .unwrap();
        assert!(rep.max_rel_err < TOL);
    }
}
