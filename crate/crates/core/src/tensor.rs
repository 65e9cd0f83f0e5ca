//! Minimal reverse-mode automatic differentiation over `[C, H, W]` feature
//! tensors.
//!
//! A [`Tensor`] owns its value and, when gradients are tracked, a node that
//! remembers the operation and the parent tensors that produced it. Dropping
//! the last handle to an untracked tensor frees it immediately, so inference
//! on large inputs only keeps the live activations in memory.

use std::cell::{Cell, RefCell};
use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayD, ArrayView2, ArrayView3, Axis, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId};

/// Floating point element type usable by the network.
pub trait Scalar:
    LinalgScalar
    + Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoints.
    const DTYPE: u8;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl Scalar for f32 {
    const DTYPE: u8 = 4;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 8;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

thread_local! {
    static NEXT_NODE: Cell<u64> = const { Cell::new(0) };
}

fn next_node_id() -> u64 {
    NEXT_NODE.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

thread_local! {
    static BRANCH_TRACE: RefCell<Option<DefaultHasher>> = const { RefCell::new(None) };
}

/// Runs `f` while fingerprinting every branch taken by the piecewise ops
/// (rectifier sign, maximum side, max-pool winner, probability clipping).
/// Two evaluations with equal fingerprints lie on the same smooth piece.
pub fn with_branch_trace<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let previous = BRANCH_TRACE.with(|t| t.borrow_mut().replace(DefaultHasher::new()));
    let out = f();
    let hasher = BRANCH_TRACE.with(|t| std::mem::replace(&mut *t.borrow_mut(), previous));
    (out, hasher.expect("trace active").finish())
}

fn trace_branches(decisions: impl FnOnce(&mut DefaultHasher)) {
    BRANCH_TRACE.with(|t| {
        if let Some(h) = t.borrow_mut().as_mut() {
            decisions(h);
        }
    });
}

/// Upper bound on the im2col scratch buffer, in elements.
const IM2COL_BUDGET: usize = 1 << 22;

#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    value: Arc<ArrayD<T>>,
    node: Option<Rc<Node<T>>>,
}

struct Node<T: Scalar> {
    id: u64,
    op: Op<T>,
}

enum Op<T: Scalar> {
    Param(ParamId),
    Conv2d {
        x: Tensor<T>,
        w: Tensor<T>,
        b: Option<Tensor<T>>,
        dilation: usize,
    },
    Relu(Tensor<T>),
    Sigmoid(Tensor<T>),
    Add(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Maximum(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    MaxPool2 {
        x: Tensor<T>,
        argmax: Vec<usize>,
    },
    AvgPool(Tensor<T>),
    Upsample(Tensor<T>),
    Concat(Vec<Tensor<T>>),
    Sum(Tensor<T>),
    Mse {
        pred: Tensor<T>,
        target: Arc<ArrayD<T>>,
    },
    Bce {
        prob: Tensor<T>,
        label: T,
    },
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("tracked", &self.requires_grad())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    /// A value that never receives gradient.
    pub fn constant(value: ArrayD<T>) -> Self {
        Self {
            value: Arc::new(value),
            node: None,
        }
    }

    pub(crate) fn shared_constant(value: Arc<ArrayD<T>>) -> Self {
        Self { value, node: None }
    }

    /// A leaf bound to a parameter slot; gradients flow back to `id`.
    pub(crate) fn param(value: Arc<ArrayD<T>>, id: ParamId) -> Self {
        Self::from_op(value, Op::Param(id))
    }

    fn from_op(value: Arc<ArrayD<T>>, op: Op<T>) -> Self {
        Self {
            value,
            node: Some(Rc::new(Node {
                id: next_node_id(),
                op,
            })),
        }
    }

    fn derive(value: ArrayD<T>, tracked: bool, op: impl FnOnce() -> Op<T>) -> Self {
        if tracked {
            Self::from_op(Arc::new(value), op())
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &ArrayD<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// True when both handles refer to the same graph node (or the same
    /// untracked buffer).
    pub fn same_node(&self, other: &Self) -> bool {
        match (&self.node, &other.node) {
            (Some(a), Some(b)) => Rc::ptr_eq(a, b),
            (None, None) => Arc::ptr_eq(&self.value, &other.value),
            _ => false,
        }
    }

    /// The value of a 0-d (or single element) tensor.
    pub fn item(&self) -> T {
        *self.value.iter().next().expect("non-empty tensor")
    }

    fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape() {
            [c, h, w] => Ok((c, h, w)),
            ref other => Err(Error::Shape(format!("expected a [C, H, W] tensor, got {other:?}"))),
        }
    }

    fn view3(&self) -> ArrayView3<'_, T> {
        self.value.view().into_dimensionality().expect("3-d tensor")
    }

    /// Same-padded 2D convolution with stride 1.
    ///
    /// `x: [C, H, W]`, `w: [O, C, k, k]` with odd `k`, `b: [O]`.
    pub fn conv2d(&self, w: &Tensor<T>, b: Option<&Tensor<T>>, dilation: usize) -> Result<Self> {
        let (c, h, wd) = self.dims3()?;
        let (o, k) = match *w.shape() {
            [o, wc, kh, kw] if wc == c && kh == kw && kh % 2 == 1 => (o, kh),
            ref other => {
                return Err(Error::Shape(format!(
                    "conv weight {other:?} incompatible with input of {c} channels"
                )))
            }
        };
        if dilation == 0 {
            return Err(Error::InvalidArgument("dilation must be at least 1".into()));
        }
        if let Some(b) = b {
            if b.shape() != [o] {
                return Err(Error::Shape(format!("conv bias {:?} != [{o}]", b.shape())));
            }
        }
        let wmat = w.value.view().into_shape_with_order((o, c * k * k)).expect("contiguous weight");
        let x = self.view3();
        let mut out = Array2::<T>::zeros((o, h * wd));
        if k == 1 {
            let x2 = x.into_shape_with_order((c, h * wd)).expect("contiguous input");
            ndarray::linalg::general_mat_mul(T::one(), &wmat, &x2, T::zero(), &mut out);
        } else {
            let rows = chunk_rows(c * k * k, h, wd);
            let mut row0 = 0;
            while row0 < h {
                let n = rows.min(h - row0);
                let cols = im2col(&x, k, dilation, row0, n);
                let mut dst = out.slice_mut(s![.., row0 * wd..(row0 + n) * wd]);
                ndarray::linalg::general_mat_mul(T::one(), &wmat, &cols, T::zero(), &mut dst);
                row0 += n;
            }
        }
        if let Some(b) = b {
            for (mut row, &bias) in out.outer_iter_mut().zip(b.value.iter()) {
                row.mapv_inplace(|v| v + bias);
            }
        }
        let out = out.into_shape_with_order(IxDyn(&[o, h, wd])).expect("reshape");
        let tracked = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        Ok(Self::derive(out, tracked, || Op::Conv2d {
            x: self.clone(),
            w: w.clone(),
            b: b.cloned(),
            dilation,
        }))
    }

    pub fn relu(&self) -> Self {
        let out = self.value.mapv(|v| if v > T::zero() { v } else { T::zero() });
        trace_branches(|h| self.value.iter().for_each(|v| (*v > T::zero()).hash(h)));
        Self::derive(out, self.requires_grad(), || Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Self {
        let out = self.value.mapv(sigmoid);
        Self::derive(out, self.requires_grad(), || Op::Sigmoid(self.clone()))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        same_shape(self, other, "add")?;
        let out = &*self.value + &*other.value;
        Ok(Self::derive(out, self.requires_grad() || other.requires_grad(), || {
            Op::Add(self.clone(), other.clone())
        }))
    }

    /// Elementwise product; `other` broadcasts to `self`'s shape along any
    /// axis where it has extent 1.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        if self.shape().len() != other.shape().len()
            || self
                .shape()
                .iter()
                .zip(other.shape())
                .any(|(&a, &b)| b != a && b != 1)
        {
            return Err(Error::Shape(format!(
                "mul: {:?} does not broadcast to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        let out = &*self.value * &*other.value;
        Ok(Self::derive(out, self.requires_grad() || other.requires_grad(), || {
            Op::Mul(self.clone(), other.clone())
        }))
    }

    /// Elementwise maximum. Ties send the gradient to `self`.
    pub fn maximum(&self, other: &Tensor<T>) -> Result<Self> {
        same_shape(self, other, "maximum")?;
        let mut out = (*self.value).clone();
        out.zip_mut_with(&other.value, |a, &b| {
            if b > *a {
                *a = b
            }
        });
        trace_branches(|h| {
            self.value.iter().zip(other.value.iter()).for_each(|(a, b)| (b > a).hash(h));
        });
        Ok(Self::derive(out, self.requires_grad() || other.requires_grad(), || {
            Op::Maximum(self.clone(), other.clone())
        }))
    }

    pub fn scale(&self, factor: T) -> Self {
        let out = self.value.mapv(|v| v * factor);
        Self::derive(out, self.requires_grad(), || Op::Scale(self.clone(), factor))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&self) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Shape(format!("max_pool2 on {h}x{w}")));
        }
        let x = self.value.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(if self.requires_grad() { c * oh * ow } else { 0 });
        for ch in 0..c {
            let base = ch * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let cands = [
                        base + 2 * i * w + 2 * j,
                        base + 2 * i * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ];
                    let mut best = cands[0];
                    for &idx in &cands[1..] {
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    if self.requires_grad() {
                        argmax.push(best);
                    }
                }
            }
        }
        trace_branches(|hs| {
            // winners are only recorded when tracking, so recompute them
            out.iter().zip(0..).for_each(|(m, k)| {
                let (ch, i, j) = (k / (oh * ow), (k / ow) % oh, k % ow);
                let top = ch * h * w + 2 * i * w + 2 * j;
                let pos = [top, top + 1, top + w, top + w + 1].iter().position(|&p| x[p] == *m);
                pos.hash(hs);
            })
        });
        let out = ArrayD::from_shape_vec(IxDyn(&[c, oh, ow]), out).expect("shape");
        Ok(Self::derive(out, self.requires_grad(), || Op::MaxPool2 {
            x: self.clone(),
            argmax,
        }))
    }

    /// Adaptive average pooling to `oh × ow` bins.
    pub fn avg_pool(&self, oh: usize, ow: usize) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(Error::Shape(format!("avg_pool {h}x{w} -> {oh}x{ow}")));
        }
        let x = self.value.as_slice().expect("standard layout");
        let mut out = ArrayD::<T>::zeros(IxDyn(&[c, oh, ow]));
        let o = out.as_slice_mut().expect("standard layout");
        for ch in 0..c {
            for i in 0..oh {
                let (r0, r1) = bin(i, h, oh);
                for j in 0..ow {
                    let (c0, c1) = bin(j, w, ow);
                    let mut acc = T::zero();
                    for r in r0..r1 {
                        let row = &x[ch * h * w + r * w..];
                        for &v in &row[c0..c1] {
                            acc += v;
                        }
                    }
                    o[(ch * oh + i) * ow + j] = acc / T::from_usize((r1 - r0) * (c1 - c0)).unwrap();
                }
            }
        }
        Ok(Self::derive(out, self.requires_grad(), || Op::AvgPool(self.clone())))
    }

    pub fn global_avg_pool(&self) -> Result<Self> {
        self.avg_pool(1, 1)
    }

    /// Bilinear resampling to `oh × ow` using half-pixel centers.
    pub fn upsample_bilinear(&self, oh: usize, ow: usize) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        if oh == 0 || ow == 0 {
            return Err(Error::Shape("upsample to an empty grid".into()));
        }
        let ys = interp_taps(h, oh);
        let xs = interp_taps(w, ow);
        let x = self.value.as_slice().expect("standard layout");
        let mut out = ArrayD::<T>::zeros(IxDyn(&[c, oh, ow]));
        let o = out.as_slice_mut().expect("standard layout");
        for ch in 0..c {
            let src = &x[ch * h * w..(ch + 1) * h * w];
            for (i, &(y0, y1, ly)) in ys.iter().enumerate() {
                let ly = T::lit(ly);
                for (j, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let lx = T::lit(lx);
                    let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                    o[(ch * oh + i) * ow + j] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
        Ok(Self::derive(out, self.requires_grad(), || Op::Upsample(self.clone())))
    }

    /// Concatenation along the channel axis.
    pub fn concat(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let (_, h, w) = first.dims3()?;
        for p in parts {
            let (_, ph, pw) = p.dims3()?;
            if (ph, pw) != (h, w) {
                return Err(Error::Shape(format!(
                    "concat: spatial {ph}x{pw} differs from {h}x{w}"
                )));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| p.value.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("validated shapes");
        let tracked = parts.iter().any(Tensor::requires_grad);
        Ok(Self::derive(out, tracked, || Op::Concat(parts.to_vec())))
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&self) -> Self {
        let out = ArrayD::from_elem(IxDyn(&[]), self.value.sum());
        Self::derive(out, self.requires_grad(), || Op::Sum(self.clone()))
    }

    /// Mean squared difference against a fixed target.
    pub fn mse(&self, target: &ArrayD<T>) -> Result<Self> {
        if self.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "mse: prediction {:?} vs target {:?}",
                self.shape(),
                target.shape()
            )));
        }
        let n = T::from_usize(target.len().max(1)).unwrap();
        let mut acc = T::zero();
        for (&p, &t) in self.value.iter().zip(target.iter()) {
            acc += (p - t) * (p - t);
        }
        let out = ArrayD::from_elem(IxDyn(&[]), acc / n);
        Ok(Self::derive(out, self.requires_grad(), || Op::Mse {
            pred: self.clone(),
            target: Arc::new(target.clone()),
        }))
    }

    /// Binary cross-entropy of a single probability with clipping to
    /// `[1e-7, 1 - 1e-7]`.
    pub fn bce(&self, label: T) -> Self {
        let p = clip_prob(self.item());
        trace_branches(|h| (p == self.item()).hash(h));
        let loss = -(label * p.ln() + (T::one() - label) * (T::one() - p).ln());
        let out = ArrayD::from_elem(IxDyn(&[]), loss);
        Self::derive(out, self.requires_grad(), || Op::Bce {
            prob: self.clone(),
            label,
        })
    }

    /// Reverse pass from a scalar output; gradients are gathered per
    /// parameter slot.
    pub fn backward(&self, n_params: usize) -> Gradients<T> {
        let mut grads = Gradients::empty(n_params);
        let Some(root) = &self.node else {
            return grads;
        };
        let order = topo_order(self);
        let mut pending: HashMap<u64, ArrayD<T>> = HashMap::new();
        pending.insert(root.id, ArrayD::from_elem(self.value.raw_dim(), T::one()));
        for t in order {
            let node = t.node.as_ref().expect("tracked");
            let Some(g) = pending.remove(&node.id) else {
                continue;
            };
            let mut send = |to: &Tensor<T>, grad: ArrayD<T>| {
                if let Some(n) = &to.node {
                    match pending.get_mut(&n.id) {
                        Some(acc) => *acc += &grad,
                        None => {
                            pending.insert(n.id, grad);
                        }
                    }
                }
            };
            match &node.op {
                Op::Param(id) => grads.accumulate(*id, g),
                Op::Conv2d { x, w, b, dilation } => {
                    let (gx, gw, gb) = conv2d_backward(x, w, *dilation, &g);
                    if x.requires_grad() {
                        send(x, gx);
                    }
                    if w.requires_grad() {
                        send(w, gw);
                    }
                    if let Some(b) = b {
                        if b.requires_grad() {
                            send(b, gb);
                        }
                    }
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    gx.zip_mut_with(&x.value, |gv, &xv| {
                        if xv <= T::zero() {
                            *gv = T::zero()
                        }
                    });
                    send(x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    gx.zip_mut_with(&t.value, |gv, &y| *gv *= y * (T::one() - y));
                    send(x, gx);
                }
                Op::Add(a, b) => {
                    if b.requires_grad() {
                        send(b, g.clone());
                    }
                    send(a, g);
                }
                Op::Mul(a, b) => {
                    if b.requires_grad() {
                        let mut gb = &g * &*a.value;
                        for (axis, (&da, &db)) in a.shape().iter().zip(b.shape()).enumerate() {
                            if db == 1 && da != 1 {
                                gb = gb.sum_axis(Axis(axis)).insert_axis(Axis(axis));
                            }
                        }
                        send(b, gb);
                    }
                    if a.requires_grad() {
                        send(a, &g * &*b.value);
                    }
                }
                Op::Maximum(a, b) => {
                    let mut ga = g.clone();
                    let mut gb = g;
                    ndarray::Zip::from(&mut ga)
                        .and(&mut gb)
                        .and(&*a.value)
                        .and(&*b.value)
                        .for_each(|ga, gb, &av, &bv| {
                            if av >= bv {
                                *gb = T::zero()
                            } else {
                                *ga = T::zero()
                            }
                        });
                    send(a, ga);
                    send(b, gb);
                }
                Op::Scale(x, f) => send(x, g.mapv(|v| v * *f)),
                Op::MaxPool2 { x, argmax } => {
                    let mut gx = ArrayD::<T>::zeros(x.value.raw_dim());
                    let dst = gx.as_slice_mut().expect("standard layout");
                    for (&idx, &gv) in argmax.iter().zip(g.iter()) {
                        dst[idx] += gv;
                    }
                    send(x, gx);
                }
                Op::AvgPool(x) => send(x, avg_pool_backward(x.shape(), &g)),
                Op::Upsample(x) => send(x, upsample_backward(x.shape(), &g)),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let c = p.shape()[0];
                        if p.requires_grad() {
                            send(p, g.slice_axis(Axis(0), (offset..offset + c).into()).to_owned());
                        }
                        offset += c;
                    }
                }
                Op::Sum(x) => {
                    let gv = g.iter().next().copied().unwrap_or_else(T::zero);
                    send(x, ArrayD::from_elem(x.value.raw_dim(), gv));
                }
                Op::Mse { pred, target } => {
                    let gv = g.iter().next().copied().unwrap_or_else(T::zero);
                    let k = T::lit(2.0) * gv / T::from_usize(target.len().max(1)).unwrap();
                    let mut gp = (*pred.value).clone();
                    gp.zip_mut_with(target, |p, &t| *p = (*p - t) * k);
                    send(pred, gp);
                }
                Op::Bce { prob, label } => {
                    let gv = g.iter().next().copied().unwrap_or_else(T::zero);
                    let raw = prob.item();
                    let p = clip_prob(raw);
                    // clipping is flat outside [lo, hi]
                    let d = if p != raw {
                        T::zero()
                    } else {
                        -(*label / p) + (T::one() - *label) / (T::one() - p)
                    };
                    send(prob, ArrayD::from_elem(prob.value.raw_dim(), d * gv));
                }
            }
        }
        grads
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn clip_prob<T: Scalar>(p: T) -> T {
    let lo = T::lit(1e-7);
    let hi = T::one() - lo;
    p.max(lo).min(hi)
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut seen = std::collections::HashSet::new();
    let mut stack = vec![root.clone()];
    let mut out = Vec::new();
    while let Some(t) = stack.pop() {
        let node = t.node.as_ref().expect("tracked");
        if !seen.insert(node.id) {
            continue;
        }
        let mut push = |p: &Tensor<T>| {
            if p.node.is_some() {
                stack.push(p.clone());
            }
        };
        match &node.op {
            Op::Param(_) => {}
            Op::Conv2d { x, w, b, .. } => {
                push(x);
                push(w);
                if let Some(b) = b {
                    push(b);
                }
            }
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Scale(x, _)
            | Op::MaxPool2 { x, .. }
            | Op::AvgPool(x)
            | Op::Upsample(x)
            | Op::Sum(x)
            | Op::Mse { pred: x, .. }
            | Op::Bce { prob: x, .. } => push(x),
            Op::Add(a, b) | Op::Mul(a, b) | Op::Maximum(a, b) => {
                push(a);
                push(b);
            }
            Op::Concat(parts) => parts.iter().for_each(push),
        }
        out.push(t);
    }
    // parents are always created before children
    out.sort_by_key(|t| std::cmp::Reverse(t.node.as_ref().unwrap().id));
    out
}

fn bin(i: usize, n: usize, bins: usize) -> (usize, usize) {
    let start = i * n / bins;
    let end = ((i + 1) * n).div_ceil(bins);
    (start, end)
}

/// Source taps for one axis: (lower index, upper index, upper weight).
fn interp_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let l = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, l)
        })
        .collect()
}

fn chunk_rows(patch: usize, h: usize, w: usize) -> usize {
    (IM2COL_BUDGET / (patch * w).max(1)).clamp(1, h)
}

/// Patch matrix `[C·k·k, n·W]` for output rows `row0..row0 + n`.
fn im2col<T: Scalar>(x: &ArrayView3<'_, T>, k: usize, dilation: usize, row0: usize, n: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let pad = (dilation * (k - 1) / 2) as isize;
    let src = x.as_slice().expect("standard layout");
    let mut cols = Array2::<T>::zeros((c * k * k, n * w));
    let dst = cols.as_slice_mut().expect("standard layout");
    let width = n * w;
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let r = (ch * k + ki) * k + kj;
                let out_row = &mut dst[r * width..(r + 1) * width];
                let dx = (kj * dilation) as isize - pad;
                let (lo, hi) = valid_range(w, dx);
                for oy in 0..n {
                    let iy = (row0 + oy) as isize + (ki * dilation) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let seg = &mut out_row[oy * w..(oy + 1) * w];
                    for ox in lo..hi {
                        seg[ox] = line[(ox as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(
    cols: &Array2<T>,
    dst: &mut [T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    dilation: usize,
    row0: usize,
    n: usize,
) {
    let pad = (dilation * (k - 1) / 2) as isize;
    let src = cols.as_slice().expect("standard layout");
    let width = n * w;
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let r = (ch * k + ki) * k + kj;
                let in_row = &src[r * width..(r + 1) * width];
                let dx = (kj * dilation) as isize - pad;
                let (lo, hi) = valid_range(w, dx);
                for oy in 0..n {
                    let iy = (row0 + oy) as isize + (ki * dilation) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let seg = &in_row[oy * w..(oy + 1) * w];
                    for ox in lo..hi {
                        line[(ox as isize + dx) as usize] += seg[ox];
                    }
                }
            }
        }
    }
}

/// Output columns `ox` for which `ox + dx` stays inside `[0, w)`.
fn valid_range(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx).clamp(0, w as isize) as usize;
    (lo.min(hi), hi)
}

fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dilation: usize,
    g: &ArrayD<T>,
) -> (ArrayD<T>, ArrayD<T>, ArrayD<T>) {
    let (c, h, wd) = x.value.dim().into_pattern_3();
    let o = w.shape()[0];
    let k = w.shape()[2];
    let g2: ArrayView2<'_, T> = g.view().into_shape_with_order((o, h * wd)).expect("contiguous grad");
    let gb = g2.sum_axis(Axis(1)).into_dyn();
    let wmat = w.value.view().into_shape_with_order((o, c * k * k)).expect("contiguous weight");
    let mut gw = Array2::<T>::zeros((o, c * k * k));
    let mut gx = ArrayD::<T>::zeros(IxDyn(&[c, h, wd]));
    let xv = x.view3();
    if k == 1 {
        let x2 = xv.into_shape_with_order((c, h * wd)).expect("contiguous input");
        ndarray::linalg::general_mat_mul(T::one(), &g2, &x2.t(), T::zero(), &mut gw);
        if x.requires_grad() {
            let gx2 = wmat.t().dot(&g2);
            gx.as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(gx2.as_standard_layout().as_slice().expect("standard layout"));
        }
    } else {
        let rows = chunk_rows(c * k * k, h, wd);
        let dst = gx.as_slice_mut().expect("standard layout");
        let mut row0 = 0;
        while row0 < h {
            let n = rows.min(h - row0);
            let cols = im2col(&xv, k, dilation, row0, n);
            let gc = g2.slice(s![.., row0 * wd..(row0 + n) * wd]);
            ndarray::linalg::general_mat_mul(T::one(), &gc, &cols.t(), T::one(), &mut gw);
            if x.requires_grad() {
                let gcols = wmat.t().dot(&gc);
                col2im_add(&gcols.as_standard_layout().to_owned(), dst, (c, h, wd), k, dilation, row0, n);
            }
            row0 += n;
        }
    }
    let gw = gw.into_shape_with_order(IxDyn(w.shape())).expect("reshape");
    (gx, gw, gb)
}

trait Pattern3 {
    fn into_pattern_3(self) -> (usize, usize, usize);
}

impl Pattern3 for IxDyn {
    fn into_pattern_3(self) -> (usize, usize, usize) {
        (self[0], self[1], self[2])
    }
}

fn avg_pool_backward<T: Scalar>(shape: &[usize], g: &ArrayD<T>) -> ArrayD<T> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let mut gx = ArrayD::<T>::zeros(IxDyn(shape));
    let dst = gx.as_slice_mut().expect("standard layout");
    let gs = g.as_slice().expect("standard layout");
    for ch in 0..c {
        for i in 0..oh {
            let (r0, r1) = bin(i, h, oh);
            for j in 0..ow {
                let (c0, c1) = bin(j, w, ow);
                let share = gs[(ch * oh + i) * ow + j] / T::from_usize((r1 - r0) * (c1 - c0)).unwrap();
                for r in r0..r1 {
                    for v in &mut dst[ch * h * w + r * w + c0..ch * h * w + r * w + c1] {
                        *v += share;
                    }
                }
            }
        }
    }
    gx
}

fn upsample_backward<T: Scalar>(shape: &[usize], g: &ArrayD<T>) -> ArrayD<T> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (g.shape()[1], g.shape()[2]);
    let ys = interp_taps(h, oh);
    let xs = interp_taps(w, ow);
    let mut gx = ArrayD::<T>::zeros(IxDyn(shape));
    let dst = gx.as_slice_mut().expect("standard layout");
    let gs = g.as_slice().expect("standard layout");
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for (i, &(y0, y1, ly)) in ys.iter().enumerate() {
            let ly = T::lit(ly);
            for (j, &(x0, x1, lx)) in xs.iter().enumerate() {
                let lx = T::lit(lx);
                let gv = gs[(ch * oh + i) * ow + j];
                let top = gv * (T::one() - ly);
                let bot = gv * ly;
                plane[y0 * w + x0] += top * (T::one() - lx);
                plane[y0 * w + x1] += top * lx;
                plane[y1 * w + x0] += bot * (T::one() - lx);
                plane[y1 * w + x1] += bot * lx;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(f(x) * r))/dx for a unary op.
    fn check_unary(shape: &[usize], f: impl Fn(&Tensor<f64>) -> Tensor<f64>) {
        let mut store = ParamStore::new();
        let id = store.add("x", random(shape, 1));
        let probe = random(&f(&Tensor::constant(store.value(id).clone())).shape().to_vec(), 2);
        let objective = |store: &ParamStore<f64>| {
            let x = Tensor::param(store.shared(id), id);
            let y = f(&x);
            let r = Tensor::constant(probe.clone());
            y.mul(&r).unwrap().sum()
        };
        let grads = objective(&store).backward(store.len());
        let analytic = grads.get(id).unwrap().clone();
        let eps = 1e-6;
        for i in 0..analytic.len() {
            let orig = store.value(id).as_slice().unwrap()[i];
            store.value_mut(id).as_slice_mut().unwrap()[i] = orig + eps;
            let up = objective(&store).item();
            store.value_mut(id).as_slice_mut().unwrap()[i] = orig - eps;
            let down = objective(&store).item();
            store.value_mut(id).as_slice_mut().unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.as_slice().unwrap()[i];
            assert!((a - numeric).abs() < 1e-6 * (1.0 + numeric.abs()), "elem {i}: {a} vs {numeric}");
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = random(&[2, 5, 6], 3);
        let w = random(&[3, 2, 3, 3], 4);
        let b = random(&[3], 5);
        let y = Tensor::constant(x.clone())
            .conv2d(&Tensor::constant(w.clone()), Some(&Tensor::constant(b.clone())), 2)
            .unwrap();
        for o in 0..3 {
            for i in 0..5isize {
                for j in 0..6isize {
                    let mut acc = b[[o]];
                    for c in 0..2 {
                        for ki in 0..3isize {
                            for kj in 0..3isize {
                                let (yy, xx) = (i + (ki - 1) * 2, j + (kj - 1) * 2);
                                if (0..5).contains(&yy) && (0..6).contains(&xx) {
                                    acc += w[[o, c, ki as usize, kj as usize]] * x[[c, yy as usize, xx as usize]];
                                }
                            }
                        }
                    }
                    let got = y.value()[[o, i as usize, j as usize]];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_input_gradient() {
        let w = random(&[3, 2, 3, 3], 7);
        check_unary(&[2, 5, 4], |x| x.conv2d(&Tensor::constant(w.clone()), None, 1).unwrap());
        let w1 = random(&[4, 2, 1, 1], 8);
        check_unary(&[2, 3, 4], |x| x.conv2d(&Tensor::constant(w1.clone()), None, 1).unwrap());
    }

    #[test]
    fn conv_weight_gradient() {
        let x = random(&[2, 6, 5], 9);
        check_unary(&[3, 2, 3, 3], |w| Tensor::constant(x.clone()).conv2d(w, None, 2).unwrap());
    }

    #[test]
    fn pooling_and_resampling_gradients() {
        check_unary(&[2, 6, 9], |x| x.avg_pool(3, 2).unwrap());
        check_unary(&[2, 3, 4], |x| x.upsample_bilinear(7, 9).unwrap());
        check_unary(&[1, 4, 6], |x| x.max_pool2().unwrap());
        check_unary(&[2, 3, 3], |x| x.sigmoid());
    }

    #[test]
    fn broadcast_mul_gradient() {
        let a = random(&[3, 4, 5], 11);
        check_unary(&[3, 1, 1], |g| Tensor::constant(a.clone()).mul(g).unwrap());
        check_unary(&[1, 4, 5], |g| Tensor::constant(a.clone()).mul(g).unwrap());
    }

    #[test]
    fn upsample_identity_when_same_size() {
        let x = random(&[2, 4, 5], 12);
        let y = Tensor::constant(x.clone()).upsample_bilinear(4, 5).unwrap();
        assert_eq!(y.value(), &x);
    }

    #[test]
    fn untracked_ops_build_no_graph() {
        let x = Tensor::constant(random(&[1, 2, 2], 13));
        assert!(!x.relu().sigmoid().requires_grad());
    }
}
