//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends a node holding its forward value and enough
//! bookkeeping to run its adjoint. Nodes are immutable once recorded.
//! `backward` walks the tape in reverse, accumulating gradients into the
//! tape-local buffers and into the grad buffer of every `Param` leaf that
//! requires a gradient. Calling `backward` twice accumulates.

use std::cell::{Ref, RefCell};

use super::conv::{self, four, ConvGeometry};
use super::spectral::{SpectralNormState, SIGMA_EPS};
use super::{Param, Tensor};
use crate::error::{Error, Result};

/// Norm floor for cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf(Option<Param>),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, scale: f64 },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Elu(usize),
    Tanh(usize),
    Sigmoid(usize),
    LogClamp { x: usize, eps: f64 },
    Abs(usize),
    Linear { x: usize, w: usize, b: Option<usize> },
    Conv2d { x: usize, w: usize, geom: ConvGeometry, out_c: usize },
    ConvTranspose2d { x: usize, w: usize, geom: ConvGeometry, in_c: usize },
    ChannelBias { x: usize, b: usize },
    AdaptiveAvgPool { x: usize, out_h: usize, out_w: usize },
    SpectralNorm { w: usize, u: Vec<f64>, v: Vec<f64>, sigma: f64, scaled: bool },
    Concat { parts: Vec<(usize, usize)>, inner: usize },
    Softmax(usize),
    LogSoftmax(usize),
    Pick { x: usize, idx: Vec<usize> },
    Cosine { a: usize, b: usize },
    TotalVariation(usize),
    SliceRows { x: usize, start: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf holding `value`; its gradient is readable through [`Tape::grad`].
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value.with_requires_grad(false), Op::Leaf(None), requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Records the current value of `param`. Whether a gradient flows back to
    /// it is decided by the parameter's `requires_grad` flag at this moment.
    pub fn param(&self, param: &Param) -> Var<'_> {
        let (value, needs) = {
            let t = param.borrow();
            (
                Tensor::new(t.shape(), t.data().to_vec()).expect("parameter shape is valid"),
                t.requires_grad(),
            )
        };
        self.push(value, Op::Leaf(needs.then(|| param.clone())), needs)
    }

    pub fn value(&self, v: Var<'_>) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.id].value)
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var<'_>) -> Option<Vec<f64>> {
        self.grads.borrow().get(v.id).cloned().flatten()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    /// Runs reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads = self.grads.borrow_mut();
        grads.resize(nodes.len(), None);
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        pending[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = pending[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let mut send = |target: usize, grad: Vec<f64>| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut pending[target] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(grad),
                }
            };
            let val = |i: usize| nodes[i].value.data();
            let y = node.value.data();
            match &node.op {
                Op::Leaf(param) => {
                    if let Some(p) = param {
                        p.borrow_mut().accumulate_grad(&g);
                    }
                    match &mut grads[id] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(g),
                    }
                }
                &Op::Add(a, b) => {
                    send(a, g.clone());
                    send(b, g);
                }
                &Op::Sub(a, b) => {
                    send(a, g.clone());
                    send(b, g.iter().map(|x| -x).collect());
                }
                &Op::Mul(a, b) => {
                    send(a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect());
                    send(b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect());
                }
                &Op::Affine { x, scale } => send(x, g.iter().map(|g| g * scale).collect()),
                &Op::Sum(x) => send(x, vec![g[0]; nodes[x].value.numel()]),
                &Op::Mean(x) => {
                    let n = nodes[x].value.numel();
                    send(x, vec![g[0] / n as f64; n]);
                }
                &Op::Reshape(x) => send(x, g),
                &Op::Elu(x) => send(
                    x,
                    g.iter()
                        .zip(val(x))
                        .zip(y)
                        .map(|((g, &x), y)| if x >= 0.0 { *g } else { g * (y + 1.0) })
                        .collect(),
                ),
                &Op::Tanh(x) => send(x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()),
                &Op::Sigmoid(x) => send(x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()),
                &Op::LogClamp { x, eps } => send(
                    x,
                    g.iter()
                        .zip(val(x))
                        .map(|(g, &x)| if x > eps { g / x } else { 0.0 })
                        .collect(),
                ),
                &Op::Abs(x) => send(
                    x,
                    g.iter()
                        .zip(val(x))
                        .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                        .collect(),
                ),
                &Op::Linear { x, w, b } => {
                    let xt = &nodes[x].value;
                    let wt = &nodes[w].value;
                    let (n, inp, out) = (xt.rows(), xt.cols(), wt.rows());
                    if nodes[x].needs_grad {
                        let mut gx = vec![0.0; n * inp];
                        super::gemm::gemm(n, out, inp, &g, false, wt.data(), false, &mut gx, 0.0);
                        send(x, gx);
                    }
                    if nodes[w].needs_grad {
                        let mut gw = vec![0.0; out * inp];
                        super::gemm::gemm(out, n, inp, &g, true, xt.data(), false, &mut gw, 0.0);
                        send(w, gw);
                    }
                    if let Some(b) = b {
                        let mut gb = vec![0.0; out];
                        for row in g.chunks(out) {
                            gb.iter_mut().zip(row).for_each(|(acc, v)| *acc += v);
                        }
                        send(b, gb);
                    }
                }
                Op::Conv2d { x, w, geom, out_c } => {
                    let (dx, dw) = conv::conv_backward(
                        val(*x),
                        val(*w),
                        *out_c,
                        geom,
                        &g,
                        nodes[*x].needs_grad,
                        nodes[*w].needs_grad,
                    );
                    if let Some(dx) = dx {
                        send(*x, dx);
                    }
                    if let Some(dw) = dw {
                        send(*w, dw);
                    }
                }
                Op::ConvTranspose2d { x, w, geom, in_c } => {
                    let (dx, dw) = conv::deconv_backward(
                        val(*x),
                        val(*w),
                        *in_c,
                        geom,
                        &g,
                        nodes[*x].needs_grad,
                        nodes[*w].needs_grad,
                    );
                    if let Some(dx) = dx {
                        send(*x, dx);
                    }
                    if let Some(dw) = dw {
                        send(*w, dw);
                    }
                }
                &Op::ChannelBias { x, b } => {
                    let shape = nodes[x].value.shape();
                    let (c, plane) = (shape[1], shape[2..].iter().product::<usize>());
                    if nodes[b].needs_grad {
                        let mut gb = vec![0.0; c];
                        for (i, chunk) in g.chunks(plane).enumerate() {
                            gb[i % c] += chunk.iter().sum::<f64>();
                        }
                        send(b, gb);
                    }
                    send(x, g);
                }
                &Op::AdaptiveAvgPool { x, out_h, out_w } => {
                    let [n, c, h, w] = four(nodes[x].value.shape(), "adaptive_avg_pool").unwrap();
                    let mut gx = vec![0.0; n * c * h * w];
                    for nc in 0..n * c {
                        let dst = &mut gx[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..out_h {
                            let (y0, y1) = pool_range(oy, h, out_h);
                            for ox in 0..out_w {
                                let (x0, x1) = pool_range(ox, w, out_w);
                                let share = g[(nc * out_h + oy) * out_w + ox]
                                    / ((y1 - y0) * (x1 - x0)) as f64;
                                for iy in y0..y1 {
                                    dst[iy * w + x0..iy * w + x1].iter_mut().for_each(|d| *d += share);
                                }
                            }
                        }
                    }
                    send(x, gx);
                }
                Op::SpectralNorm {
                    w,
                    u,
                    v,
                    sigma,
                    scaled,
                } => {
                    if !scaled {
                        send(*w, g);
                    } else {
                        // d(W/σ) with σ = uᵀWv and u, v held fixed.
                        let wv = val(*w);
                        let inner: f64 = g.iter().zip(wv).map(|(a, b)| a * b).sum();
                        let coef = inner / (sigma * sigma);
                        let cols = v.len();
                        let gw = g
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| gi / sigma - coef * u[i / cols] * v[i % cols])
                            .collect();
                        send(*w, gw);
                    }
                }
                Op::Concat { parts, inner } => {
                    let n = node.value.rows();
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let mut offset = 0;
                    for &(pid, width) in parts {
                        let mut gp = Vec::with_capacity(n * width * inner);
                        for r in 0..n {
                            let start = (r * total + offset) * inner;
                            gp.extend_from_slice(&g[start..start + width * inner]);
                        }
                        send(pid, gp);
                        offset += width;
                    }
                }
                &Op::Softmax(x) => {
                    let k = node.value.cols();
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, yr), out) in g.chunks(k).zip(y.chunks(k)).zip(gx.chunks_mut(k)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o = yi * (gi - dot);
                        }
                    }
                    send(x, gx);
                }
                &Op::LogSoftmax(x) => {
                    let k = node.value.cols();
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, yr), out) in g.chunks(k).zip(y.chunks(k)).zip(gx.chunks_mut(k)) {
                        let s: f64 = gr.iter().sum();
                        for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o = gi - yi.exp() * s;
                        }
                    }
                    send(x, gx);
                }
                Op::Pick { x, idx } => {
                    let k = nodes[*x].value.cols();
                    let mut gx = vec![0.0; nodes[*x].value.numel()];
                    for (r, &j) in idx.iter().enumerate() {
                        gx[r * k + j] += g[r];
                    }
                    send(*x, gx);
                }
                &Op::Cosine { a, b } => {
                    let d = nodes[a].value.cols();
                    let (av, bv) = (val(a), val(b));
                    let mut ga = vec![0.0; av.len()];
                    let mut gb = vec![0.0; bv.len()];
                    for r in 0..g.len() {
                        let ar = &av[r * d..(r + 1) * d];
                        let br = &bv[r * d..(r + 1) * d];
                        let na_raw = norm(ar);
                        let nb_raw = norm(br);
                        let (na, nb) = (na_raw.max(COSINE_EPS), nb_raw.max(COSINE_EPS));
                        let cos = y[r];
                        for i in 0..d {
                            let mut da = br[i] / (na * nb);
                            if na_raw > COSINE_EPS {
                                da -= cos * ar[i] / (na * na);
                            }
                            let mut db = ar[i] / (na * nb);
                            if nb_raw > COSINE_EPS {
                                db -= cos * br[i] / (nb * nb);
                            }
                            ga[r * d + i] = g[r] * da;
                            gb[r * d + i] = g[r] * db;
                        }
                    }
                    send(a, ga);
                    send(b, gb);
                }
                &Op::SliceRows { x, start } => {
                    let c = nodes[x].value.cols();
                    let mut gx = vec![0.0; nodes[x].value.numel()];
                    gx[start * c..start * c + g.len()].copy_from_slice(&g);
                    send(x, gx);
                }
                &Op::TotalVariation(x) => {
                    let [n, c, h, w] = four(nodes[x].value.shape(), "tv").unwrap();
                    let xv = val(x);
                    let scale = g[0] / (n * c * h * w) as f64;
                    let mut gx = vec![0.0; xv.len()];
                    for nc in 0..n * c {
                        let base = nc * h * w;
                        for i in 0..h {
                            for j in 0..w {
                                let p = base + i * w + j;
                                if i + 1 < h {
                                    let s = sign(xv[p + w] - xv[p]) * scale;
                                    gx[p + w] += s;
                                    gx[p] -= s;
                                }
                                if j + 1 < w {
                                    let s = sign(xv[p + 1] - xv[p]) * scale;
                                    gx[p + 1] += s;
                                    gx[p] -= s;
                                }
                            }
                        }
                    }
                    send(x, gx);
                }
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Input range `[start, end)` pooled into output cell `i` of `out` cells.
fn pool_range(i: usize, input: usize, out: usize) -> (usize, usize) {
    let start = i * input / out;
    let end = ((i + 1) * input).div_ceil(out);
    (start, end)
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            op,
            shape: b.to_vec(),
            reason: format!("expected shape {a:?}"),
        });
    }
    Ok(())
}

fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = {
            let v = self.value();
            Tensor::new(v.shape(), v.data().iter().map(|&x| f(x)).collect()).unwrap()
        };
        self.tape.push(out, op, self.requires_grad())
    }

    fn binary(self, other: Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let a = self.value();
        let b = other.value();
        same_shape(op, a.shape(), b.shape())?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((
            Tensor::new(a.shape(), data).unwrap(),
            self.requires_grad() || other.requires_grad(),
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (t, g) = self.binary(other, "add", |a, b| a + b)?;
        Ok(self.tape.push(t, Op::Add(self.id, other.id), g))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (t, g) = self.binary(other, "sub", |a, b| a - b)?;
        Ok(self.tape.push(t, Op::Sub(self.id, other.id), g))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (t, g) = self.binary(other, "mul", |a, b| a * b)?;
        Ok(self.tape.push(t, Op::Mul(self.id, other.id), g))
    }

    /// `scale · x + shift`
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        self.unary(Op::Affine { x: self.id, scale }, |x| scale * x + shift)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.affine(c, 0.0)
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'t> {
        let m = {
            let v = self.value();
            v.data().iter().sum::<f64>() / v.numel() as f64
        };
        self.tape.push(Tensor::scalar(m), Op::Mean(self.id), self.requires_grad())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let t = self.value().reshape(shape)?;
        Ok(self.tape.push(t, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Collapses every axis after the first.
    pub fn flatten(self) -> Var<'t> {
        let shape = self.shape();
        let rest = shape[1..].iter().product::<usize>().max(1);
        self.reshape(&[shape[0], rest]).unwrap()
    }

    /// ELU with α = 1.
    pub fn elu(self) -> Var<'t> {
        self.unary(Op::Elu(self.id), elu)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(self, eps: f64) -> Var<'t> {
        self.unary(Op::LogClamp { x: self.id, eps }, move |x| x.max(eps).ln())
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    /// `x · wᵀ + b` with `x: N×in` (trailing axes flattened), `w: out×in`, `b: out`.
    pub fn linear(self, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let wt = w.value();
            if wt.rank() != 2 {
                return Err(Error::Shape {
                    op: "linear",
                    shape: wt.shape().to_vec(),
                    reason: "weight must be rank 2".into(),
                });
            }
            let (n, inp, o) = (x.rows(), x.cols(), wt.rows());
            if wt.cols() != inp {
                return Err(Error::dim("linear", "inner (input features)", wt.cols(), inp));
            }
            let mut y = vec![0.0; n * o];
            if let Some(b) = b {
                let bt = b.value();
                if bt.numel() != o {
                    return Err(Error::dim("linear", "bias length", o, bt.numel()));
                }
                for row in y.chunks_mut(o) {
                    row.copy_from_slice(bt.data());
                }
            }
            super::gemm::gemm(n, inp, o, x.data(), false, wt.data(), true, &mut y, 1.0);
            Tensor::new(&[n, o], y).unwrap()
        };
        let needs = self.requires_grad() || w.requires_grad() || b.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(
            out,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            needs,
        ))
    }

    /// 2-D convolution, `weight: out_c × in_c × k × k`.
    pub fn conv2d(self, weight: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let (out, geom, out_c) = {
            let x = self.value();
            let w = weight.value();
            let [out_c, wc, kh, kw] = four(w.shape(), "conv2d weight")?;
            if kh != kw {
                return Err(Error::dim("conv2d", "kernel width", kh, kw));
            }
            let geom = ConvGeometry::for_conv(x.shape(), kh, stride, padding, "conv2d")?;
            if geom.c != wc {
                return Err(Error::dim("conv2d", "input channels (axis 1)", wc, geom.c));
            }
            let y = conv::conv_forward(x.data(), w.data(), out_c, &geom);
            (
                Tensor::new(&[geom.n, out_c, geom.oh, geom.ow], y).unwrap(),
                geom,
                out_c,
            )
        };
        let needs = self.requires_grad() || weight.requires_grad();
        Ok(self.tape.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                geom,
                out_c,
            },
            needs,
        ))
    }

    /// Transposed convolution, `weight: in_c × out_c × k × k`, the adjoint of
    /// [`Var::conv2d`] with the same weight, stride and padding.
    pub fn conv_transpose2d(
        self,
        weight: Var<'t>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var<'t>> {
        if stride == 0 {
            return Err(Error::arg("conv_transpose2d: stride must be >= 1"));
        }
        if output_padding >= stride {
            return Err(Error::arg("conv_transpose2d: output_padding must be < stride"));
        }
        let (out, geom, in_c) = {
            let x = self.value();
            let w = weight.value();
            let [n, xc, h, wd] = four(x.shape(), "conv_transpose2d")?;
            let [in_c, out_c, kh, kw] = four(w.shape(), "conv_transpose2d weight")?;
            if kh != kw {
                return Err(Error::dim("conv_transpose2d", "kernel width", kh, kw));
            }
            if xc != in_c {
                return Err(Error::dim("conv_transpose2d", "input channels (axis 1)", in_c, xc));
            }
            let out_dim = |d: usize| ((d - 1) * stride + kh + output_padding).checked_sub(2 * padding);
            let (oh, ow) = match (out_dim(h), out_dim(wd)) {
                (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                _ => return Err(Error::dim("conv_transpose2d", "spatial (padding too large)", kh, h)),
            };
            let geom = ConvGeometry {
                n,
                c: out_c,
                h: oh,
                w: ow,
                k: kh,
                stride,
                pad: padding,
                oh: h,
                ow: wd,
            };
            let y = conv::deconv_forward(x.data(), w.data(), in_c, &geom);
            (Tensor::new(&[n, out_c, oh, ow], y).unwrap(), geom, in_c)
        };
        let needs = self.requires_grad() || weight.requires_grad();
        Ok(self.tape.push(
            out,
            Op::ConvTranspose2d {
                x: self.id,
                w: weight.id,
                geom,
                in_c,
            },
            needs,
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` (axis 1).
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let b = bias.value();
            if x.rank() < 2 {
                return Err(Error::Shape {
                    op: "add_channel_bias",
                    shape: x.shape().to_vec(),
                    reason: "need a channel axis".into(),
                });
            }
            let c = x.shape()[1];
            if b.numel() != c {
                return Err(Error::dim("add_channel_bias", "channels (axis 1)", c, b.numel()));
            }
            let plane: usize = x.shape()[2..].iter().product();
            let mut data = x.data().to_vec();
            for (i, chunk) in data.chunks_mut(plane).enumerate() {
                let bv = b.data()[i % c];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
            Tensor::new(x.shape(), data).unwrap()
        };
        let needs = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            out,
            Op::ChannelBias {
                x: self.id,
                b: bias.id,
            },
            needs,
        ))
    }

    /// Averages near-equal spatial partitions down to `out_h × out_w`.
    pub fn adaptive_avg_pool2d(self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::arg("adaptive_avg_pool2d: output dims must be positive"));
        }
        let out = {
            let x = self.value();
            let [n, c, h, w] = four(x.shape(), "adaptive_avg_pool2d")?;
            if out_h > h {
                return Err(Error::dim("adaptive_avg_pool2d", "height (output <= input)", h, out_h));
            }
            if out_w > w {
                return Err(Error::dim("adaptive_avg_pool2d", "width (output <= input)", w, out_w));
            }
            let mut y = Vec::with_capacity(n * c * out_h * out_w);
            for plane in x.data().chunks(h * w) {
                for oy in 0..out_h {
                    let (y0, y1) = pool_range(oy, h, out_h);
                    for ox in 0..out_w {
                        let (x0, x1) = pool_range(ox, w, out_w);
                        let s: f64 = (y0..y1).map(|iy| plane[iy * w + x0..iy * w + x1].iter().sum::<f64>()).sum();
                        y.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                    }
                }
            }
            Tensor::new(&[n, c, out_h, out_w], y).unwrap()
        };
        Ok(self.tape.push(
            out,
            Op::AdaptiveAvgPool {
                x: self.id,
                out_h,
                out_w,
            },
            self.requires_grad(),
        ))
    }

    /// Divides the weight by its power-iteration spectral norm estimate,
    /// advancing `state` by `iters` steps first (0 reuses the stored
    /// vectors). A numerically zero weight passes through unchanged.
    pub fn spectral_normalize(self, state: &mut SpectralNormState, iters: usize) -> Result<Var<'t>> {
        let (out, scaled) = {
            let w = self.value();
            if w.rows() != state.rows() || w.cols() != state.cols() {
                return Err(Error::dim("spectral_normalize", "flattened weight rows", state.rows(), w.rows()));
            }
            let ok = state.update(w.data(), iters);
            if !ok {
                log::warn!("spectral_normalize: weight is numerically zero; sigma clamped to {SIGMA_EPS}");
                (w.clone(), false)
            } else {
                let s = state.sigma;
                (Tensor::new(w.shape(), w.data().iter().map(|x| x / s).collect()).unwrap(), true)
            }
        };
        Ok(self.tape.push(
            out,
            Op::SpectralNorm {
                w: self.id,
                u: state.u.clone(),
                v: state.v.clone(),
                sigma: state.sigma,
                scaled,
            },
            self.requires_grad(),
        ))
    }

    /// Concatenates along axis 1. All parts must agree on axis 0 and on
    /// every axis after 1.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::arg("concat of nothing"))?;
        let tape = first.tape;
        let s0 = first.shape();
        if s0.len() < 2 {
            return Err(Error::Shape {
                op: "concat",
                shape: s0,
                reason: "need rank >= 2".into(),
            });
        }
        let n = s0[0];
        let inner: usize = s0[2..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != s0.len() {
                return Err(Error::dim("concat", "rank", s0.len(), s.len()));
            }
            if s[0] != n {
                return Err(Error::dim("concat", "axis 0", n, s[0]));
            }
            for ax in 2..s.len() {
                if s[ax] != s0[ax] {
                    return Err(Error::dim("concat", format!("axis {ax}"), s0[ax], s[ax]));
                }
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total * inner);
        {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            for r in 0..n {
                for (v, &wdt) in vals.iter().zip(&widths) {
                    data.extend_from_slice(&v.data()[r * wdt * inner..(r + 1) * wdt * inner]);
                }
            }
        }
        let mut shape = s0.clone();
        shape[1] = total;
        let needs = parts.iter().any(|p| p.requires_grad());
        Ok(tape.push(
            Tensor::new(&shape, data).unwrap(),
            Op::Concat {
                parts: parts.iter().zip(&widths).map(|(p, &w)| (p.id, w)).collect(),
                inner,
            },
            needs,
        ))
    }

    /// Row-wise softmax over a `N×K` tensor.
    pub fn softmax(self) -> Var<'t> {
        let out = {
            let x = self.value();
            let k = x.cols();
            let mut y = x.data().to_vec();
            for row in y.chunks_mut(k) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|v| *v = (*v - m).exp());
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            Tensor::new(&[x.rows(), k], y).unwrap()
        };
        self.tape.push(out, Op::Softmax(self.id), self.requires_grad())
    }

    pub fn log_softmax(self) -> Var<'t> {
        let out = {
            let x = self.value();
            let k = x.cols();
            let mut y = x.data().to_vec();
            for row in y.chunks_mut(k) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Tensor::new(&[x.rows(), k], y).unwrap()
        };
        self.tape.push(out, Op::LogSoftmax(self.id), self.requires_grad())
    }

    /// `y[r] = x[r, idx[r]]`
    pub fn pick(self, idx: &[usize]) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let k = x.cols();
            if idx.len() != x.rows() {
                return Err(Error::dim("pick", "rows", x.rows(), idx.len()));
            }
            if let Some(&bad) = idx.iter().find(|&&j| j >= k) {
                return Err(Error::arg(format!("pick: column {bad} out of range 0..{k}")));
            }
            Tensor::new(&[idx.len()], idx.iter().enumerate().map(|(r, &j)| x.data()[r * k + j]).collect()).unwrap()
        };
        Ok(self.tape.push(
            out,
            Op::Pick {
                x: self.id,
                idx: idx.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Row-wise cosine similarity of two `N×D` tensors; norms are floored
    /// at [`COSINE_EPS`].
    pub fn cosine_similarity(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let b = other.value();
            same_shape("cosine_similarity", a.shape(), b.shape())?;
            let d = a.cols();
            let mut clamped = false;
            let sims = a
                .data()
                .chunks(d)
                .zip(b.data().chunks(d))
                .map(|(x, y)| {
                    let (nx, ny) = (norm(x), norm(y));
                    clamped |= nx < COSINE_EPS || ny < COSINE_EPS;
                    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                    dot / (nx.max(COSINE_EPS) * ny.max(COSINE_EPS))
                })
                .collect();
            if clamped {
                log::warn!("cosine_similarity: zero-norm embedding clamped to {COSINE_EPS}");
            }
            Tensor::new(&[a.rows()], sims).unwrap()
        };
        let needs = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            out,
            Op::Cosine {
                a: self.id,
                b: other.id,
            },
            needs,
        ))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if start >= end || end > x.rows() {
                return Err(Error::arg(format!("slice_rows: {start}..{end} out of 0..{}", x.rows())));
            }
            let c = x.cols();
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            Tensor::new(&shape, x.data()[start * c..end * c].to_vec()).unwrap()
        };
        Ok(self.tape.push(out, Op::SliceRows { x: self.id, start }, self.requires_grad()))
    }

    /// Anisotropic total variation, averaged over images and channels and
    /// normalized by the pixel count of one plane.
    pub fn total_variation(self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let [n, c, h, w] = four(x.shape(), "total_variation")?;
            let mut acc = 0.0;
            for plane in x.data().chunks(h * w) {
                for i in 0..h {
                    for j in 0..w {
                        let p = i * w + j;
                        if i + 1 < h {
                            acc += (plane[p + w] - plane[p]).abs();
                        }
                        if j + 1 < w {
                            acc += (plane[p + 1] - plane[p]).abs();
                        }
                    }
                }
            }
            Tensor::scalar(acc / (n * c * h * w) as f64)
        };
        Ok(self.tape.push(out, Op::TotalVariation(self.id), self.requires_grad()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]), true);
        tape.backward(x.sum()).unwrap();
        assert_eq!(tape.grad(x).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn inner_product_gives_twice_x() {
        let tape = Tape::new();
        let data = [0.3, -1.2, 2.0];
        let x = tape.leaf(t(&[3], &data), true);
        tape.backward(x.mul(x).unwrap().sum()).unwrap();
        let g = tape.grad(x).unwrap();
        for (gi, xi) in g.iter().zip(data) {
            assert!((gi - 2.0 * xi).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x.elu()), Err(Error::Argument(_))));
    }

    #[test]
    fn repeated_backward_accumulates_into_params() {
        let p = Param::new(t(&[2], &[1.0, 2.0]));
        let tape = Tape::new();
        let x = tape.param(&p);
        let loss = x.sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(p.borrow().grad().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn frozen_param_gets_no_grad() {
        let p = Param::new(t(&[2], &[1.0, 2.0]));
        p.set_requires_grad(false);
        let tape = Tape::new();
        let x = tape.param(&p);
        let y = tape.leaf(t(&[2], &[3.0, 4.0]), true);
        tape.backward(x.mul(y).unwrap().sum()).unwrap();
        assert!(p.borrow().grad().is_none());
        assert_eq!(tape.grad(y).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn activation_fixed_points() {
        let tape = Tape::new();
        let z = tape.constant(t(&[1], &[0.0]));
        assert_eq!(z.elu().item(), 0.0);
        assert_eq!(z.tanh().item(), 0.0);
        assert_eq!(z.sigmoid().item(), 0.5);
        let m = tape.constant(t(&[1], &[-20.0]));
        assert!((m.elu().item() + 1.0).abs() < 1e-8);
    }

    #[test]
    fn conv_ones_sum_to_nine() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = x.conv2d(w, 1, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
        assert!(y.value().data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_shape_errors_name_axis() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = x.conv2d(w, 1, 0).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
        let big = tape.constant(Tensor::zeros(&[1, 2, 7, 7]));
        let err = x.conv2d(big, 1, 0).unwrap_err().to_string();
        assert!(err.contains("channels") || err.contains("height"), "{err}");
    }

    #[test]
    fn identity_kernels() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|i| i as f64 * 0.1).collect();
        let x = tape.constant(t(&[2, 2, 3, 3], &data));
        let mut eye = Tensor::zeros(&[2, 2, 1, 1]);
        eye.data_mut()[0] = 1.0;
        eye.data_mut()[3] = 1.0;
        let w = tape.constant(eye);
        assert_eq!(x.conv2d(w, 1, 0).unwrap().value().data(), &data[..]);
        assert_eq!(x.conv_transpose2d(w, 1, 0, 0).unwrap().value().data(), &data[..]);
    }

    #[test]
    fn pool_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.adaptive_avg_pool2d(1, 1).unwrap().item(), 2.5);
        let c = tape.constant(Tensor::full(&[1, 2, 5, 3], 0.7));
        assert!(c
            .adaptive_avg_pool2d(2, 2)
            .unwrap()
            .value()
            .data()
            .iter()
            .all(|v| (v - 0.7).abs() < 1e-15));
        assert!(matches!(x.adaptive_avg_pool2d(0, 1), Err(Error::Argument(_))));
        assert!(x.adaptive_avg_pool2d(3, 1).is_err());
    }

    #[test]
    fn linear_identity_and_bias() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let w = tape.constant(eye);
        assert_eq!(x.linear(w, None).unwrap().value().data(), x.value().data());
        let z = tape.constant(Tensor::zeros(&[3, 3]));
        let b = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
        assert_eq!(
            x.linear(z, Some(b)).unwrap().value().data(),
            &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]
        );
        let bad = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(matches!(x.linear(bad, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn tv_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[0.0, 1.0]));
        assert_eq!(x.total_variation().unwrap().item(), 0.5);
        let c = tape.constant(Tensor::full(&[2, 3, 4, 4], 0.3));
        assert_eq!(c.total_variation().unwrap().item(), 0.0);
        let checker = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| {
            if (i / 4 + i % 4) % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }));
        assert!(checker.total_variation().unwrap().item() > 0.0);
    }

    #[test]
    fn cosine_cases() {
        let tape = Tape::new();
        let a = tape.constant(t(&[3, 2], &[1.0, 0.0, 1.0, 0.0, 1.0, 2.0]));
        let b = tape.constant(t(&[3, 2], &[0.0, 2.0, -3.0, 0.0, 1.0, 2.0]));
        let c = a.cosine_similarity(b).unwrap();
        let v = c.value();
        assert!((v.data()[0]).abs() < 1e-15);
        assert!((v.data()[1] + 1.0).abs() < 1e-15);
        assert!((v.data()[2] - 1.0).abs() < 1e-12);
    }
}
