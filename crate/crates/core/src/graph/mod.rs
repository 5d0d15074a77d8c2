//! A small reverse-mode automatic differentiation tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every leaf created with [`Graph::param`]. Leaves created with
//! [`Graph::constant`] never receive gradients, and the kernels skip the work
//! for operands that cannot reach a parameter, so differentiating a frozen
//! network with respect to its input costs one extra pass, not two.

pub mod kernels;

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use kernels::ConvGeom;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Affine { x: usize, scale: T },
    SqrtFloor { x: usize, floor: T },
    Silu(usize),
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Linear { x: usize, w: usize, b: Option<usize> },
    AddChannelBias { x: usize, bias: usize },
    GroupNorm { x: usize, gamma: usize, beta: usize, groups: usize, stats: Vec<(T, T)> },
    Upsample2x(usize),
    Concat(usize, usize),
    Permute { x: usize, index: Arc<Vec<usize>> },
    Embedding { table: usize, ids: Vec<usize> },
    Filter { x: usize, th: Vec<T>, tw: Vec<T> },
    GlobalAvgPool(usize),
    MeanPerItem(usize),
    SumAll(usize),
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording tape. Not `Sync`; build one per forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

/// Gradients of the leaves that were created with [`Graph::param`].
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; a parameter that does not influence the root gets zeros.
    pub fn get(&self, v: Var<'_, T>) -> Tensor<T> {
        self.leaves
            .get(&v.id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Tensor<T> {
        self.leaves
            .remove(&v.id)
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::with_capacity(256)) }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, needs_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn derived(&self, inputs: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        inputs.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    pub fn param_shared(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.push_arc(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_shared(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        self.push_arc(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be a scalar, got {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), T::one()));
        let mut leaves = HashMap::new();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(id, g);
                continue;
            }
            backprop(&nodes, &node.op, &node.value, g, &mut grads)?;
        }
        Ok(Gradients { leaves })
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    g: Tensor<T>,
) -> Result<()> {
    if !nodes[id].needs_grad {
        return Ok(());
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g)?,
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    op: &Op<T>,
    out: &Tensor<T>,
    g: Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let val = |id: usize| -> &Tensor<T> { &nodes[id].value };
    let need = |id: usize| nodes[id].needs_grad;
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if need(b) {
                accumulate(nodes, grads, b, g.clone())?;
            }
            accumulate(nodes, grads, a, g)?;
        }
        Op::Sub(a, b) => {
            if need(b) {
                accumulate(nodes, grads, b, g.map(|v| -v))?;
            }
            accumulate(nodes, grads, a, g)?;
        }
        Op::Mul(a, b) => {
            if need(a) {
                accumulate(nodes, grads, a, g.zip_map(val(b), |d, y| d * y)?)?;
            }
            if need(b) {
                accumulate(nodes, grads, b, g.zip_map(val(a), |d, x| d * x)?)?;
            }
        }
        Op::Div(a, b) => {
            if need(a) {
                accumulate(nodes, grads, a, g.zip_map(val(b), |d, y| d / y)?)?;
            }
            if need(b) {
                // d(a/b)/db = -out / b
                let t = g.zip_map(out, |d, q| d * q)?;
                accumulate(nodes, grads, b, t.zip_map(val(b), |v, y| -v / y)?)?;
            }
        }
        Op::Affine { x, scale } => accumulate(nodes, grads, x, g.scale(scale))?,
        Op::SqrtFloor { x, floor } => {
            let d = g.zip_map(val(x), |d, v| {
                if v > floor {
                    d / (T::of(2.0) * v.sqrt())
                } else {
                    T::zero()
                }
            })?;
            accumulate(nodes, grads, x, d)?;
        }
        Op::Silu(x) => {
            let xv = val(x);
            let mut d = Tensor::zeros(xv.shape());
            T::sigmoid_slice(xv.data(), d.data_mut());
            for ((o, &v), &dy) in d.data_mut().iter_mut().zip(xv.data()).zip(g.data()) {
                let s = *o;
                *o = dy * s * (T::one() + v * (T::one() - s));
            }
            accumulate(nodes, grads, x, d)?;
        }
        Op::Conv2d { x, w, b, geom } => {
            let xv = val(x);
            let wv = val(w);
            let n = xv.shape()[0];
            let in_len = xv.item_len();
            let out_len = out.item_len();
            let mut dx = need(x).then(|| Tensor::zeros(xv.shape()));
            let mut dw = need(w).then(|| Tensor::zeros(wv.shape()));
            let mut db = b.filter(|&b| need(b)).map(|b| Tensor::zeros(val(b).shape()));
            let mut col = Vec::new();
            for i in 0..n {
                kernels::conv2d_item_backward(
                    &geom,
                    xv.item(i),
                    wv.data(),
                    &g.data()[i * out_len..(i + 1) * out_len],
                    dx.as_mut().map(|t| &mut t.data_mut()[i * in_len..(i + 1) * in_len]),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                    &mut col,
                );
            }
            if let Some(dx) = dx {
                accumulate(nodes, grads, x, dx)?;
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, w, dw)?;
            }
            if let (Some(b), Some(db)) = (b, db) {
                accumulate(nodes, grads, b, db)?;
            }
        }
        Op::Linear { x, w, b } => {
            let xv = val(x);
            let wv = val(w);
            let (n, d) = (xv.shape()[0], xv.shape()[1]);
            let o = wv.shape()[0];
            if need(x) {
                let mut dx = Tensor::zeros(xv.shape());
                crate::tensor::gemm(n, o, d, T::one(), g.data(), (o, 1), wv.data(), (d, 1), T::zero(), dx.data_mut(), (d, 1));
                accumulate(nodes, grads, x, dx)?;
            }
            if need(w) {
                let mut dw = Tensor::zeros(wv.shape());
                crate::tensor::gemm(o, n, d, T::one(), g.data(), (1, o), xv.data(), (d, 1), T::zero(), dw.data_mut(), (d, 1));
                accumulate(nodes, grads, w, dw)?;
            }
            if let Some(b) = b.filter(|&b| need(b)) {
                let mut db = Tensor::zeros(&[o]);
                for row in g.data().chunks(o) {
                    for (acc, &v) in db.data_mut().iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(nodes, grads, b, db)?;
            }
        }
        Op::AddChannelBias { x, bias } => {
            if need(bias) {
                let (n, c, h, w) = out.dims4()?;
                let hw = h * w;
                let mut db = Tensor::zeros(&[n, c]);
                for (i, d) in db.data_mut().iter_mut().enumerate() {
                    *d = kernels::sum(&g.data()[i * hw..(i + 1) * hw]);
                }
                accumulate(nodes, grads, bias, db)?;
            }
            accumulate(nodes, grads, x, g)?;
        }
        Op::GroupNorm { x, gamma, beta, groups, ref stats } => {
            let xv = val(x);
            let gam = val(gamma);
            let (n, c, h, w) = xv.dims4()?;
            let hw = h * w;
            let cpg = c / groups;
            let m = T::of((cpg * hw) as f64);
            let mut dx = need(x).then(|| Tensor::zeros(xv.shape()));
            let mut dgam = vec![T::zero(); c];
            let mut dbet = vec![T::zero(); c];
            for i in 0..n {
                for gi in 0..groups {
                    let (mean, rstd) = stats[i * groups + gi];
                    let base = (i * c + gi * cpg) * hw;
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for cc in 0..cpg {
                        let ch = gi * cpg + cc;
                        let off = base + cc * hw;
                        let xs = &xv.data()[off..off + hw];
                        let dys = &g.data()[off..off + hw];
                        let mut sd = [T::zero(); 8];
                        let mut sdx = [T::zero(); 8];
                        for (xc, dc) in xs.chunks(8).zip(dys.chunks(8)) {
                            for j in 0..xc.len() {
                                sd[j] += dc[j];
                                sdx[j] += dc[j] * (xc[j] - mean);
                            }
                        }
                        let sum_dy: T = sd.iter().copied().sum();
                        let sum_dy_xhat = sdx.iter().copied().sum::<T>() * rstd;
                        dgam[ch] += sum_dy_xhat;
                        dbet[ch] += sum_dy;
                        s1 += sum_dy * gam.data()[ch];
                        s2 += sum_dy_xhat * gam.data()[ch];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let (m1, m2) = (s1 / m, s2 / m);
                        for cc in 0..cpg {
                            let ch = gi * cpg + cc;
                            let off = base + cc * hw;
                            let k = rstd * gam.data()[ch];
                            let xs = &xv.data()[off..off + hw];
                            let dys = &g.data()[off..off + hw];
                            for ((o, &xval), &dy) in dx.data_mut()[off..off + hw].iter_mut().zip(xs).zip(dys) {
                                let xhat = (xval - mean) * rstd;
                                *o = k * dy - rstd * (m1 + xhat * m2);
                            }
                        }
                    }
                }
            }
            if let Some(dx) = dx {
                accumulate(nodes, grads, x, dx)?;
            }
            accumulate(nodes, grads, gamma, Tensor::new(&[c], dgam)?)?;
            accumulate(nodes, grads, beta, Tensor::new(&[c], dbet)?)?;
        }
        Op::Upsample2x(x) => {
            let (n, c, h, w) = val(x).dims4()?;
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            let w2 = 2 * w;
            for plane in 0..n * c {
                let src = &g.data()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                let dst = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
                for i in 0..2 * h {
                    for j in 0..w2 {
                        dst[(i / 2) * w + j / 2] += src[i * w2 + j];
                    }
                }
            }
            accumulate(nodes, grads, x, dx)?;
        }
        Op::Concat(a, b) => {
            let av = val(a);
            let bv = val(b);
            let n = av.shape()[0];
            let (la, lb) = (av.item_len(), bv.item_len());
            let mut da = need(a).then(|| Vec::with_capacity(av.numel()));
            let mut dbv = need(b).then(|| Vec::with_capacity(bv.numel()));
            for i in 0..n {
                let item = &g.data()[i * (la + lb)..(i + 1) * (la + lb)];
                if let Some(da) = da.as_mut() {
                    da.extend_from_slice(&item[..la]);
                }
                if let Some(db) = dbv.as_mut() {
                    db.extend_from_slice(&item[la..]);
                }
            }
            if let Some(da) = da {
                accumulate(nodes, grads, a, Tensor::new(av.shape(), da)?)?;
            }
            if let Some(db) = dbv {
                accumulate(nodes, grads, b, Tensor::new(bv.shape(), db)?)?;
            }
        }
        Op::Permute { x, ref index } => {
            let xv = val(x);
            let il = xv.item_len();
            let mut dx = Tensor::zeros(xv.shape());
            for i in 0..xv.shape()[0] {
                let src = &g.data()[i * il..(i + 1) * il];
                let dst = &mut dx.data_mut()[i * il..(i + 1) * il];
                for (o, &from) in index.iter().enumerate() {
                    dst[from] += src[o];
                }
            }
            accumulate(nodes, grads, x, dx)?;
        }
        Op::Embedding { table, ref ids } => {
            let tv = val(table);
            let d = tv.shape()[1];
            let mut dt = Tensor::zeros(tv.shape());
            for (row, &id) in ids.iter().enumerate() {
                for k in 0..d {
                    dt.data_mut()[id * d + k] += g.data()[row * d + k];
                }
            }
            accumulate(nodes, grads, table, dt)?;
        }
        Op::Filter { x, ref th, ref tw } => {
            let xv = val(x);
            let (n, c, h, w) = xv.dims4()?;
            let (_, _, ho, wo) = out.dims4()?;
            let mut dx = Tensor::zeros(xv.shape());
            let mut tmp = Vec::new();
            for p in 0..n * c {
                kernels::filter_plane_backward(
                    &g.data()[p * ho * wo..(p + 1) * ho * wo],
                    h,
                    w,
                    th,
                    tw,
                    &mut tmp,
                    &mut dx.data_mut()[p * h * w..(p + 1) * h * w],
                );
            }
            accumulate(nodes, grads, x, dx)?;
        }
        Op::GlobalAvgPool(x) => {
            let xv = val(x);
            let (_, _, h, w) = xv.dims4()?;
            let hw = h * w;
            let inv = T::one() / T::of(hw as f64);
            let mut dx = Tensor::zeros(xv.shape());
            for (p, &d) in g.data().iter().enumerate() {
                dx.data_mut()[p * hw..(p + 1) * hw].fill(d * inv);
            }
            accumulate(nodes, grads, x, dx)?;
        }
        Op::MeanPerItem(x) => {
            let xv = val(x);
            let il = xv.item_len();
            let inv = T::one() / T::of(il as f64);
            let mut dx = Tensor::zeros(xv.shape());
            for (i, &d) in g.data().iter().enumerate() {
                dx.data_mut()[i * il..(i + 1) * il].fill(d * inv);
            }
            accumulate(nodes, grads, x, dx)?;
        }
        Op::SumAll(x) => {
            let d = g.data()[0];
            accumulate(nodes, grads, x, Tensor::full(val(x).shape(), d))?;
        }
        Op::CrossEntropy { logits, ref labels, ref probs } => {
            let lv = val(logits);
            let (n, k) = (lv.shape()[0], lv.shape()[1]);
            let scale = g.data()[0] / T::of(n as f64);
            let mut d = probs.clone();
            for (i, &y) in labels.iter().enumerate() {
                d[i * k + y] -= T::one();
            }
            for v in &mut d {
                *v *= scale;
            }
            accumulate(nodes, grads, logits, Tensor::new(lv.shape(), d)?)?;
        }
    }
    Ok(())
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn needs_grad(&self) -> bool {
        self.graph.needs(self.id)
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let needs = self.graph.needs(self.id);
        self.graph.push(value, op, needs)
    }

    fn binary(&self, other: Var<'g, T>, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'g, T>> {
        let value = self.value().zip_map(&other.value(), f)?;
        let needs = self.graph.derived(&[self.id, other.id]);
        Ok(self.graph.push(value, op, needs))
    }

    pub fn add(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn sqr(&self) -> Result<Var<'g, T>> {
        self.mul(*self)
    }

    /// `scale * x + shift`.
    pub fn affine(&self, scale: T, shift: T) -> Var<'g, T> {
        let value = self.value().map(|v| scale * v + shift);
        self.unary(value, Op::Affine { x: self.id, scale })
    }

    pub fn scale(&self, s: T) -> Var<'g, T> {
        let value = self.value().map(|v| s * v);
        self.unary(value, Op::Affine { x: self.id, scale: s })
    }

    /// `sqrt(max(x, floor))`, with zero gradient below the floor.
    pub fn sqrt_floor(&self, floor: T) -> Var<'g, T> {
        let value = self.value().map(|v| v.max(floor).sqrt());
        self.unary(value, Op::SqrtFloor { x: self.id, floor })
    }

    pub fn silu(&self) -> Var<'g, T> {
        let xv = self.value();
        let mut value = Tensor::zeros(xv.shape());
        T::sigmoid_slice(xv.data(), value.data_mut());
        for (o, &v) in value.data_mut().iter_mut().zip(xv.data()) {
            *o *= v;
        }
        self.unary(value, Op::Silu(self.id))
    }

    /// 2-D convolution, `weight` is `c_out × c_in × k × k`.
    pub fn conv2d(
        &self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g, T>> {
        let xv = self.value();
        let wv = weight.value();
        let (n, c, h, w) = xv.dims4()?;
        let (o, ci, k, k2) = wv.dims4()?;
        if ci != c || k != k2 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Shape(format!(
                "conv2d: input {:?} incompatible with weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let geom = ConvGeom { c_in: c, c_out: o, h, w, k, stride, pad };
        let (ho, wo) = geom.out_hw();
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            if b.shape() != [o] {
                return Err(Error::Shape(format!("conv2d bias {:?} vs {o} outputs", b.shape())));
            }
        }
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        let ol = o * ho * wo;
        let mut col = Vec::new();
        for i in 0..n {
            kernels::conv2d_item(
                &geom,
                xv.item(i),
                wv.data(),
                bv.as_ref().map(|b| b.data()),
                &mut col,
                &mut out.data_mut()[i * ol..(i + 1) * ol],
            );
        }
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        let needs = self.graph.derived(&ids);
        Ok(self.graph.push(out, Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), geom }, needs))
    }

    /// `x · wᵀ + b` with `x: n×d`, `w: o×d`.
    pub fn linear(&self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let xv = self.value();
        let wv = weight.value();
        let (n, d) = match xv.shape() {
            [n, d] => (*n, *d),
            s => return Err(Error::Shape(format!("linear: expected rank-2 input, got {s:?}"))),
        };
        let o = match wv.shape() {
            [o, dd] if *dd == d => *o,
            s => return Err(Error::Shape(format!("linear: weight {s:?} vs input width {d}"))),
        };
        let mut out = Tensor::zeros(&[n, o]);
        crate::tensor::gemm(n, d, o, T::one(), xv.data(), (d, 1), wv.data(), (1, d), T::zero(), out.data_mut(), (o, 1));
        if let Some(b) = bias {
            let bv = b.value();
            if bv.shape() != [o] {
                return Err(Error::Shape(format!("linear bias {:?} vs {o} outputs", bv.shape())));
            }
            for row in out.data_mut().chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        let needs = self.graph.derived(&ids);
        Ok(self.graph.push(out, Op::Linear { x: self.id, w: weight.id, b: bias.map(|b| b.id) }, needs))
    }

    /// Adds a per-item, per-channel offset `bias: n×c` to `x: n×c×h×w`.
    pub fn add_channel_bias(&self, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let xv = self.value();
        let bv = bias.value();
        let (n, c, h, w) = xv.dims4()?;
        if bv.shape() != [n, c] {
            return Err(Error::Shape(format!("channel bias {:?} vs input {:?}", bv.shape(), xv.shape())));
        }
        let hw = h * w;
        let mut out = (*xv).clone();
        for (p, &b) in bv.data().iter().enumerate() {
            for v in &mut out.data_mut()[p * hw..(p + 1) * hw] {
                *v += b;
            }
        }
        let needs = self.graph.derived(&[self.id, bias.id]);
        Ok(self.graph.push(out, Op::AddChannelBias { x: self.id, bias: bias.id }, needs))
    }

    pub fn group_norm(&self, groups: usize, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Shape(format!("group_norm: {c} channels not divisible into {groups} groups")));
        }
        let gv = gamma.value();
        let bv = beta.value();
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::Shape("group_norm: affine parameters must have one entry per channel".into()));
        }
        let hw = h * w;
        let cpg = c / groups;
        let len = cpg * hw;
        let mut out = Tensor::zeros(xv.shape());
        let mut stats = Vec::with_capacity(n * groups);
        for i in 0..n {
            for gi in 0..groups {
                let base = (i * c + gi * cpg) * hw;
                let seg = &xv.data()[base..base + len];
                let mean = kernels::sum(seg) / T::of(len as f64);
                let mut acc = [T::zero(); 8];
                let mut chunks = seg.chunks_exact(8);
                for ch in &mut chunks {
                    for (a, &v) in acc.iter_mut().zip(ch) {
                        *a += (v - mean) * (v - mean);
                    }
                }
                let tail: T = chunks.remainder().iter().map(|&v| (v - mean) * (v - mean)).sum();
                let var = (acc.iter().copied().sum::<T>() + tail) / T::of(len as f64);
                let rstd = T::one() / (var + T::of(eps)).sqrt();
                stats.push((mean, rstd));
                for cc in 0..cpg {
                    let ch = gi * cpg + cc;
                    let a = rstd * gv.data()[ch];
                    let b = bv.data()[ch] - mean * a;
                    let off = base + cc * hw;
                    let src = &xv.data()[off..off + hw];
                    for (o, &v) in out.data_mut()[off..off + hw].iter_mut().zip(src) {
                        *o = v * a + b;
                    }
                }
            }
        }
        let needs = self.graph.derived(&[self.id, gamma.id, beta.id]);
        Ok(self.graph.push(
            out,
            Op::GroupNorm { x: self.id, gamma: gamma.id, beta: beta.id, groups, stats },
            needs,
        ))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&self) -> Result<Var<'g, T>> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4()?;
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let w2 = 2 * w;
        for plane in 0..n * c {
            let src = &xv.data()[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out.data_mut()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..w2 {
                    dst[i * w2 + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        Ok(self.unary(out, Op::Upsample2x(self.id)))
    }

    /// Channel concatenation of two `n×c×h×w` tensors.
    pub fn concat(&self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let av = self.value();
        let bv = other.value();
        let (n, ca, h, w) = av.dims4()?;
        let (nb, cb, hb, wb) = bv.dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!("concat: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for i in 0..n {
            data.extend_from_slice(av.item(i));
            data.extend_from_slice(bv.item(i));
        }
        let out = Tensor::new(&[n, ca + cb, h, w], data)?;
        let needs = self.graph.derived(&[self.id, other.id]);
        Ok(self.graph.push(out, Op::Concat(self.id, other.id), needs))
    }

    fn permute(&self, shape: [usize; 4], index: Arc<Vec<usize>>) -> Result<Var<'g, T>> {
        let xv = self.value();
        let il = xv.item_len();
        let mut data = Vec::with_capacity(xv.numel());
        for i in 0..xv.shape()[0] {
            let item = &xv.data()[i * il..(i + 1) * il];
            data.extend(index.iter().map(|&j| item[j]));
        }
        let out = Tensor::new(&shape, data)?;
        Ok(self.unary(out, Op::Permute { x: self.id, index }))
    }

    /// `n×c×h×w → n×(c·r²)×(h/r)×(w/r)`.
    pub fn space_to_depth(&self, r: usize) -> Result<Var<'g, T>> {
        let (n, c, h, w) = self.value().dims4()?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::Shape(format!("space_to_depth: {h}×{w} not divisible by {r}")));
        }
        let index = kernels::space_to_depth_index(c, h, w, r);
        self.permute([n, c * r * r, h / r, w / r], Arc::new(index))
    }

    /// Inverse of [`Var::space_to_depth`].
    pub fn depth_to_space(&self, r: usize) -> Result<Var<'g, T>> {
        let (n, c, h, w) = self.value().dims4()?;
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::Shape(format!("depth_to_space: {c} channels not divisible by {}", r * r)));
        }
        let forward = kernels::space_to_depth_index(c / (r * r), h * r, w * r, r);
        let mut index = vec![0; forward.len()];
        for (o, &i) in forward.iter().enumerate() {
            index[i] = o;
        }
        self.permute([n, c / (r * r), h * r, w * r], Arc::new(index))
    }

    /// Row lookup `table[ids[i]]`, giving `len(ids) × d`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'g, T>> {
        let tv = self.value();
        let (k, d) = match tv.shape() {
            [k, d] => (*k, *d),
            s => return Err(Error::Shape(format!("embedding table must be rank 2, got {s:?}"))),
        };
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= k {
                return Err(Error::Shape(format!("embedding id {id} out of range for {k} rows")));
            }
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.unary(out, Op::Embedding { table: self.id, ids: ids.to_vec() }))
    }

    /// Valid-mode separable window filter applied to every channel plane.
    pub fn filter(&self, th: &[T], tw: &[T]) -> Result<Var<'g, T>> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4()?;
        if th.is_empty() || tw.is_empty() || th.len() > h || tw.len() > w {
            return Err(Error::Shape(format!(
                "filter window {}×{} does not fit a {h}×{w} plane",
                th.len(),
                tw.len()
            )));
        }
        let (ho, wo) = (h + 1 - th.len(), w + 1 - tw.len());
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut tmp = Vec::new();
        for p in 0..n * c {
            kernels::filter_plane(
                &xv.data()[p * h * w..(p + 1) * h * w],
                h,
                w,
                th,
                tw,
                &mut tmp,
                &mut out.data_mut()[p * ho * wo..(p + 1) * ho * wo],
            );
        }
        Ok(self.unary(out, Op::Filter { x: self.id, th: th.to_vec(), tw: tw.to_vec() }))
    }

    /// `n×c×h×w → n×c` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Var<'g, T>> {
        let xv = self.value();
        let (n, c, h, w) = xv.dims4()?;
        let hw = h * w;
        let data = (0..n * c)
            .map(|p| kernels::sum(&xv.data()[p * hw..(p + 1) * hw]) / T::of(hw as f64))
            .collect();
        let out = Tensor::new(&[n, c], data)?;
        Ok(self.unary(out, Op::GlobalAvgPool(self.id)))
    }

    /// Mean over everything but the leading axis, giving shape `[n]`.
    pub fn mean_per_item(&self) -> Var<'g, T> {
        let xv = self.value();
        let n = xv.shape()[0];
        let il = xv.item_len();
        let data = (0..n)
            .map(|i| kernels::sum(xv.item(i)) / T::of(il as f64))
            .collect();
        let out = Tensor::new(&[n], data).expect("length matches");
        self.unary(out, Op::MeanPerItem(self.id))
    }

    pub fn sum_all(&self) -> Var<'g, T> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::SumAll(self.id))
    }

    /// Mean softmax cross-entropy of `n×k` logits against class labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'g, T>> {
        let lv = self.value();
        let (n, k) = match lv.shape() {
            [n, k] if *n == labels.len() => (*n, *k),
            s => return Err(Error::Shape(format!("cross_entropy: logits {s:?} vs {} labels", labels.len()))),
        };
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &lv.data()[i * k..(i + 1) * k];
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - mx).exp() / z;
            }
            let y = labels[i];
            if y >= k {
                return Err(Error::Shape(format!("label {y} out of range for {k} classes")));
            }
            loss += z.ln() - (row[y] - mx);
        }
        let out = Tensor::scalar(loss / T::of(n as f64));
        Ok(self.unary(out, Op::CrossEntropy { logits: self.id, labels: labels.to_vec(), probs }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `d f / d x` for a scalar-valued graph function.
    fn check_grad(shape: &[usize], seed: u64, f: impl for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Var<'g, f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Tensor::<f64>::randn(shape, &mut rng);
        let g = Graph::new();
        let x = g.param(x0.clone());
        let y = f(&g, x);
        let grad = g.backward(y).unwrap().get(x);
        let eval = |t: Tensor<f64>| {
            let g = Graph::new();
            let x = g.constant(t);
            f(&g, x).value().data()[0]
        };
        let h = 1e-6;
        for i in 0..x0.numel() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let fd = (eval(p) - eval(m)) / (2.0 * h);
            let an = grad.data()[i];
            let err = (fd - an).abs() / (1e-6 + fd.abs().max(an.abs()));
            assert!(err < 1e-5, "element {i}: analytic {an} vs numeric {fd}");
        }
    }

    fn weights<'g>(g: &'g Graph<f64>, shape: &[usize], seed: u64) -> Var<'g, f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        g.constant(Tensor::randn(shape, &mut rng).scale(0.5))
    }

    #[test]
    fn conv_gradients() {
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            check_grad(&[2, 3, 5, 6], 1, |g, x| {
                let w = weights(g, &[4, 3, k, k], 2);
                let b = weights(g, &[4], 3);
                x.conv2d(w, Some(b), s, p).unwrap().sqr().unwrap().sum_all()
            });
        }
    }

    #[test]
    fn conv_weight_gradients() {
        check_grad(&[4, 3, 3, 3], 4, |g, w| {
            let x = weights(g, &[2, 3, 6, 6], 5);
            x.conv2d(w, None, 2, 1).unwrap().sqr().unwrap().sum_all()
        });
    }

    #[test]
    fn group_norm_and_silu_gradients() {
        check_grad(&[2, 4, 3, 3], 6, |g, x| {
            let gamma = weights(g, &[4], 7);
            let beta = weights(g, &[4], 8);
            let probe = weights(g, &[2, 4, 3, 3], 9);
            x.group_norm(2, gamma, beta, 1e-5).unwrap().silu().mul(probe).unwrap().sum_all()
        });
    }

    #[test]
    fn layout_op_gradients() {
        check_grad(&[2, 2, 4, 4], 10, |g, x| {
            let probe = weights(g, &[2, 8, 2, 2], 11);
            let s = x.space_to_depth(2).unwrap();
            let y = s.mul(probe).unwrap().depth_to_space(2).unwrap();
            let up = y.upsample2x().unwrap();
            let cat = up.concat(up).unwrap();
            let probe2 = weights(g, &[2, 4, 8, 8], 12);
            cat.mul(probe2).unwrap().sum_all()
        });
    }

    #[test]
    fn space_to_depth_round_trip() {
        let g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.constant(Tensor::randn(&[2, 3, 4, 6], &mut rng));
        let y = x.space_to_depth(2).unwrap().depth_to_space(2).unwrap();
        assert_eq!(*y.value(), *x.value());
    }

    #[test]
    fn linear_embedding_and_bias_gradients() {
        check_grad(&[3, 5], 13, |g, x| {
            let w = weights(g, &[4, 5], 14);
            let b = weights(g, &[4], 15);
            let y = x.linear(w, Some(b)).unwrap().silu();
            let img = weights(g, &[3, 4, 2, 2], 16);
            img.add_channel_bias(y).unwrap().sqr().unwrap().sum_all()
        });
        check_grad(&[4, 3], 17, |g, table| {
            let probe = weights(g, &[3, 3], 18);
            table.embedding(&[2, 0, 2]).unwrap().mul(probe).unwrap().sum_all()
        });
    }

    #[test]
    fn filter_reduction_and_division_gradients() {
        check_grad(&[2, 2, 6, 5], 19, |_, x| {
            let f = x.filter(&[0.25, 0.5, 0.25], &[0.5, 0.5]).unwrap();
            let d = f.sqr().unwrap().affine(1.0, 0.3);
            let q = f.div(d).unwrap();
            let r = x.sqr().unwrap().sqrt_floor(1e-12).global_avg_pool().unwrap();
            q.mean_per_item().sum_all().add(r.sum_all()).unwrap()
        });
    }

    #[test]
    fn cross_entropy_gradient() {
        check_grad(&[3, 4], 20, |_, x| x.cross_entropy(&[1, 3, 0]).unwrap());
    }

    #[test]
    fn constants_receive_no_gradient_work() {
        let g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = c.conv2d(w, None, 1, 1).unwrap();
        assert!(!y.needs_grad());
        let p = g.param(Tensor::full(&[1, 1, 3, 3], 2.0));
        let z = y.mul(p).unwrap().sum_all();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(p), *y.value());
    }
}
