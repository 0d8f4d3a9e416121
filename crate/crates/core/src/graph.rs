//! Reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in creation order,
//! which is already a topological order: a node can only reference nodes that
//! existed when it was created. [`Graph::backward`] walks that list once in
//! reverse and consumes the graph.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::param::{Param, ParamId};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward rule sees for one recorded operation.
pub struct BackwardCtx<'a, T> {
    /// Gradient of the loss with respect to this operation's output.
    pub grad: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    /// Which inputs need a gradient; rules may return `None` for the others.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one operation.
pub trait Backward<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one entry per input, shaped like that input.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>;

    /// Identifies which smooth piece of a piecewise op the inputs fall on
    /// (ReLU mask, pooling argmax). `None` for smooth ops.
    fn branch(&self, _inputs: &[&Tensor<T>]) -> Option<u64> {
        None
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward<T>>>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    train_params: bool,
    consumed: bool,
    branches: Option<DefaultHasher>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph whose parameters require gradients.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            train_params: true,
            consumed: false,
            branches: None,
        }
    }

    /// Graph for pure forward evaluation; nothing is recorded for backward.
    pub fn inference() -> Self {
        Graph {
            train_params: false,
            ..Self::new()
        }
    }

    /// Also fingerprints the branch taken by every piecewise op, see
    /// [`branch_signature`](Self::branch_signature).
    pub fn tracking_branches(mut self) -> Self {
        self.branches = Some(DefaultHasher::new());
        self
    }

    /// Hash of all branches taken so far. Two forward passes with equal
    /// signatures evaluated the same smooth piece of the function.
    pub fn branch_signature(&self) -> Option<u64> {
        self.branches.as_ref().map(|h| h.finish())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// An input that gradients are taken with respect to.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            op: None,
        })
    }

    /// Registers a model parameter; repeated calls return the same node.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.leaf(p.value.clone(), self.train_params);
        self.params.insert(p.id(), v);
        v
    }

    /// Makes later [`param`](Self::param) calls for `p` return `v` instead of
    /// a fresh leaf. Lets a parameter be driven by an arbitrary node.
    pub fn bind_param(&mut self, p: &Param<T>, v: Var) -> Result<()> {
        self.value(v).expect_shape(p.value.shape(), "bind_param")?;
        self.params.insert(p.id(), v);
        Ok(())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Appends the result of an operation. The backward rule is kept only
    /// when some input requires a gradient.
    pub fn record(
        &mut self,
        op: Box<dyn Backward<T>>,
        inputs: &[Var],
        value: Tensor<T>,
    ) -> Result<Var> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        if self.branches.is_some() {
            let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            if let Some(b) = op.branch(&values) {
                let h = self.branches.as_mut().expect("checked");
                (self.nodes.len(), b).hash(h);
            }
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node {
            value,
            requires_grad,
            inputs: if requires_grad {
                inputs.to_vec()
            } else {
                Vec::new()
            },
            op: requires_grad.then_some(op),
        }))
    }

    /// Back-propagates from a scalar loss. The graph can be differentiated only
    /// once; run a fresh forward pass for the next step.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }
        self.consumed = true;

        let mut pending: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves = HashMap::new();
        pending[loss.0] = Some(Tensor::full(root.value.shape(), T::one())?);

        for i in (0..=loss.0).rev() {
            let Some(grad) = pending[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let Some(op) = &node.op else {
                if node.requires_grad {
                    leaves.insert(i, grad);
                }
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                output: &node.value,
                needs: node
                    .inputs
                    .iter()
                    .map(|v| self.nodes[v.0].requires_grad)
                    .collect(),
            };
            let input_grads = op.backward(&ctx)?;
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", op.name());
            for (&input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                g.expect_shape(self.nodes[input.0].value.shape(), op.name())?;
                match &mut pending[input.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients {
            leaves,
            params: self.params.clone(),
        })
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.record(
            Box::new(Linear2 {
                name: "add",
                sign_b: 1.0,
            }),
            &[a, b],
            out,
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.record(
            Box::new(Linear2 {
                name: "sub",
                sign_b: -1.0,
            }),
            &[a, b],
            out,
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.record(Box::new(MulOp), &[a, b], out)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.record(Box::new(ScaleOp(c)), &[a], out)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.record(Box::new(ScaleOp(T::one())), &[a], out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.record(Box::new(ReluOp), &[a], out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.record(Box::new(SigmoidOp), &[a], out)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.record(Box::new(SumOp { scale: T::one() }), &[a], out)
    }

    /// `sum(a) / numel(a)`, computed exactly that way.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = T::of(self.value(a).len() as f64);
        let out = Tensor::scalar(self.value(a).sum() / n);
        self.record(
            Box::new(SumOp {
                scale: T::one() / n,
            }),
            &[a],
            out,
        )
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::invalid(format!(
                "mean_axis: axis {axis} invalid for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let inv = T::one() / T::of(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..len {
                let base = (o * len + k) * inner;
                for (d, &s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = Tensor::from_vec(&out_shape, out)?;
        self.record(Box::new(MeanAxisOp { outer, len, inner }), &[a], out)
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.record(Box::new(ReshapeOp), &[a], out)
    }

    /// Concatenates along axis 1 (channels). All other extents must agree.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let shape0 = self.shape(*first).to_vec();
        if shape0.len() < 2 {
            return Err(Error::invalid("concat_channels needs rank >= 2"));
        }
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != shape0.len() || s[0] != shape0[0] || s[2..] != shape0[2..] {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    left: shape0.clone(),
                    right: s.to_vec(),
                });
            }
            channels.push(s[1]);
        }
        let batch = shape0[0];
        let inner: usize = shape0[2..].iter().product();
        let total: usize = channels.iter().sum();
        let mut out = Vec::with_capacity(batch * total * inner);
        for n in 0..batch {
            for (&p, &c) in parts.iter().zip(&channels) {
                let src = self.value(p).data();
                out.extend_from_slice(&src[n * c * inner..(n + 1) * c * inner]);
            }
        }
        let mut out_shape = shape0.clone();
        out_shape[1] = total;
        let out = Tensor::from_vec(&out_shape, out)?;
        self.record(Box::new(ConcatOp { channels, inner }), parts, out)
    }

    /// Center-crops or zero-pads the last three axes of a 5-D tensor to
    /// `extents`. An odd difference puts the extra slice at the high index.
    pub fn crop_or_pad(&mut self, a: Var, extents: [usize; 3]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 5 || extents.contains(&0) {
            return Err(Error::invalid(format!(
                "crop_or_pad: need rank-5 input and positive extents, got {shape:?} -> {extents:?}"
            )));
        }
        let src_ext = [shape[2], shape[3], shape[4]];
        if src_ext == extents {
            let out = self.value(a).clone();
            return self.record(Box::new(ReshapeOp), &[a], out);
        }
        let map = Window::new(src_ext, extents);
        let planes = shape[0] * shape[1];
        let mut out_shape = shape.clone();
        out_shape[2..].copy_from_slice(&extents);
        let mut out = Tensor::zeros(&out_shape)?;
        map.copy(planes, self.value(a).data(), out.data_mut());
        self.record(Box::new(CropPadOp { map, planes }), &[a], out)
    }

    /// Applies an arbitrary recorded rule. Used for custom or test-only ops.
    pub fn custom(
        &mut self,
        op: Box<dyn Backward<T>>,
        inputs: &[Var],
        value: Tensor<T>,
    ) -> Result<Var> {
        self.record(op, inputs, value)
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    // Split by sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradients produced by one backward pass, for leaves and parameters.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf created with [`Graph::variable`] or [`Graph::param`].
    /// `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }
}

// ---- backward rules -------------------------------------------------------

struct Linear2 {
    name: &'static str,
    sign_b: f64,
}

impl<T: Scalar> Backward<T> for Linear2 {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let ga = ctx.needs[0].then(|| ctx.grad.clone());
        let gb = ctx.needs[1].then(|| {
            if self.sign_b > 0.0 {
                ctx.grad.clone()
            } else {
                ctx.grad.map(|g| -g)
            }
        });
        Ok(vec![ga, gb])
    }
}

struct MulOp;

impl<T: Scalar> Backward<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let ga = if ctx.needs[0] {
            Some(ctx.grad.zip_map(b, "mul", |g, y| g * y)?)
        } else {
            None
        };
        let gb = if ctx.needs[1] {
            Some(ctx.grad.zip_map(a, "mul", |g, x| g * x)?)
        } else {
            None
        };
        Ok(vec![ga, gb])
    }
}

struct ScaleOp<T>(T);

impl<T: Scalar> Backward<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let c = self.0;
        Ok(vec![Some(ctx.grad.map(|g| g * c))])
    }
}

struct ReluOp;

impl<T: Scalar> Backward<T> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let g = ctx.grad.zip_map(ctx.inputs[0], "relu", |g, x| {
            if x > T::zero() {
                g
            } else {
                T::zero()
            }
        })?;
        Ok(vec![Some(g)])
    }

    fn branch(&self, inputs: &[&Tensor<T>]) -> Option<u64> {
        let mut h = DefaultHasher::new();
        for &x in inputs[0].data() {
            (x > T::zero()).hash(&mut h);
        }
        Some(h.finish())
    }
}

struct SigmoidOp;

impl<T: Scalar> Backward<T> for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let g = ctx
            .grad
            .zip_map(ctx.output, "sigmoid", |g, s| g * s * (T::one() - s))?;
        Ok(vec![Some(g)])
    }
}

struct SumOp<T> {
    scale: T,
}

impl<T: Scalar> Backward<T> for SumOp<T> {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let g = ctx.grad.data()[0] * self.scale;
        Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), g)?)])
    }
}

struct MeanAxisOp {
    outer: usize,
    len: usize,
    inner: usize,
}

impl<T: Scalar> Backward<T> for MeanAxisOp {
    fn name(&self) -> &'static str {
        "mean_axis"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let inv = T::one() / T::of(self.len as f64);
        let g = ctx.grad.data();
        let mut out = Vec::with_capacity(self.outer * self.len * self.inner);
        for o in 0..self.outer {
            let row = &g[o * self.inner..(o + 1) * self.inner];
            for _ in 0..self.len {
                out.extend(row.iter().map(|&v| v * inv));
            }
        }
        Ok(vec![Some(Tensor::from_vec(ctx.inputs[0].shape(), out)?)])
    }
}

struct ReshapeOp;

impl<T: Scalar> Backward<T> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(ctx.grad.reshape(ctx.inputs[0].shape())?)])
    }
}

struct ConcatOp {
    channels: Vec<usize>,
    inner: usize,
}

impl<T: Scalar> Backward<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let batch = ctx.grad.shape()[0];
        let total: usize = self.channels.iter().sum();
        let g = ctx.grad.data();
        let mut grads = Vec::with_capacity(self.channels.len());
        let mut offset = 0;
        for (k, &c) in self.channels.iter().enumerate() {
            if !ctx.needs[k] {
                grads.push(None);
                offset += c;
                continue;
            }
            let mut part = Vec::with_capacity(batch * c * self.inner);
            for n in 0..batch {
                let start = (n * total + offset) * self.inner;
                part.extend_from_slice(&g[start..start + c * self.inner]);
            }
            grads.push(Some(Tensor::from_vec(ctx.inputs[k].shape(), part)?));
            offset += c;
        }
        Ok(grads)
    }
}

/// Index map between a source volume and a centered crop/pad of it.
#[derive(Debug, Clone, Copy)]
struct Window {
    src: [usize; 3],
    dst: [usize; 3],
    /// Source index of destination index 0, per axis.
    shift: [isize; 3],
}

impl Window {
    fn new(src: [usize; 3], dst: [usize; 3]) -> Self {
        let mut shift = [0isize; 3];
        for a in 0..3 {
            let diff = src[a] as isize - dst[a] as isize;
            // Floor of half the difference toward zero: crop drops the extra
            // slice at the high end, pad appends it at the high end.
            shift[a] = if diff >= 0 { diff / 2 } else { -((-diff) / 2) };
        }
        Window { src, dst, shift }
    }

    /// Copies the overlapping region of `src` into `dst`.
    fn copy<T: Scalar>(&self, planes: usize, src: &[T], dst: &mut [T]) {
        let [st, sh, sw] = self.src;
        let [dt, dh, dw] = self.dst;
        let (w_lo, w_hi) = overlap(dw, sw, self.shift[2]);
        for p in 0..planes {
            for t in 0..dt {
                let ti = t as isize + self.shift[0];
                if ti < 0 || ti >= st as isize {
                    continue;
                }
                for h in 0..dh {
                    let hi = h as isize + self.shift[1];
                    if hi < 0 || hi >= sh as isize {
                        continue;
                    }
                    let d0 = ((p * dt + t) * dh + h) * dw;
                    let s0 = ((p * st + ti as usize) * sh + hi as usize) * sw;
                    for w in w_lo..w_hi {
                        let wi = (w as isize + self.shift[2]) as usize;
                        dst[d0 + w] = src[s0 + wi];
                    }
                }
            }
        }
    }

    fn inverse(&self) -> Window {
        Window {
            src: self.dst,
            dst: self.src,
            shift: [-self.shift[0], -self.shift[1], -self.shift[2]],
        }
    }
}

/// Destination index range whose shifted source index lies in `[0, src)`.
fn overlap(dst: usize, src: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = ((src as isize - shift).max(0) as usize).min(dst);
    (lo.min(hi), hi)
}

struct CropPadOp {
    map: Window,
    planes: usize,
}

impl<T: Scalar> Backward<T> for CropPadOp {
    fn name(&self) -> &'static str {
        "crop_or_pad"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut g = ctx.inputs[0].zeros_like();
        // The window is injective, so the adjoint is the inverse copy.
        self.map
            .inverse()
            .copy(self.planes, ctx.grad.data(), g.data_mut());
        Ok(vec![Some(g)])
    }
}
