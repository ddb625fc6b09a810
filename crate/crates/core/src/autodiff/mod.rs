//! Minimal reverse-mode differentiation over NCHW tensors.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value,
//! so insertion order is a topological order and [`Graph::backward`] walks it
//! once in reverse. Values are stored as f32; reductions accumulate in f64.

mod checkpoint;
pub mod kernels;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use params::{sgd_step, Gradients, Param, ParamStore};

use rayon::prelude::*;

use crate::error::{Error, Result};
use kernels::{conv_backward_data, conv_backward_weight, conv_forward, ConvGeom};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!("{} values for shape {shape}", data.len())));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(n, c, y, x)]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch normalization statistics source.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [f32], var: &'a [f32] },
    /// No normalization; only the per-channel affine transform.
    Affine,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        // Geometry of the equivalent forward convolution from y back to x.
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f64>,
        batch_mean: Vec<f32>,
        batch_var: Vec<f32>,
        train: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f32),
    SoftmaxChannels(Var),
    Expectation {
        p: Var,
        centers: Vec<f32>,
    },
    Clamp {
        x: Var,
        lo: f32,
        hi: f32,
    },
    NllLogits {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    NllProbs {
        probs: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    L1 {
        pred: Var,
        target: Vec<f32>,
        mask: Vec<bool>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Computation tape plus a registry of named parameter leaves.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Differentiable leaf registered under `name`.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let v = self.leaf(t.clone());
        self.params.push((name.to_string(), v));
        v
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape
    }

    /// Gradient of the last `backward` target with respect to `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Batch mean and (biased) variance of a training-mode batch norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f32], &[f32])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                batch_mean,
                batch_var,
                train: true,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    /// Cross-correlation. `w` is `out_c x in_c x kh x kw`, `b` is `1 x out_c x 1 x 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        if ws.c != xs.c {
            return Err(Error::Shape(format!("conv2d weight {ws} does not match input {xs}")));
        }
        if xs.h + 2 * pad < ws.h || xs.w + 2 * pad < ws.w {
            return Err(Error::Shape(format!(
                "conv2d kernel {ws} larger than padded input {xs}"
            )));
        }
        check_bias(self, b, ws.n)?;
        let geom = ConvGeom {
            in_c: xs.c,
            in_h: xs.h,
            in_w: xs.w,
            out_c: ws.n,
            out_h: (xs.h + 2 * pad - ws.h) / stride + 1,
            out_w: (xs.w + 2 * pad - ws.w) / stride + 1,
            kh: ws.h,
            kw: ws.w,
            stride,
            pad,
        };
        let out_shape = Shape::new(xs.n, geom.out_c, geom.out_h, geom.out_w);
        let mut out = init_with_bias(out_shape, b.map(|b| &self.value(b).data[..]));
        let (xv, wv) = (&self.value(x).data, &self.value(w).data);
        out.data
            .par_chunks_mut(geom.out_len())
            .zip(xv.par_chunks(geom.in_len()))
            .for_each(|(o, i)| conv_forward(&geom, i, wv, o));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, rg, Op::Conv { x, w, b, geom }))
    }

    /// Transposed convolution (gradient of conv2d with respect to its
    /// input). `w` is `in_c x out_c x kh x kw`; output size is
    /// `(in - 1) * stride - 2 * pad + k`.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if stride == 0 {
            return Err(Error::Shape("conv2d_transpose stride must be positive".into()));
        }
        if ws.n != xs.c {
            return Err(Error::Shape(format!(
                "conv2d_transpose weight {ws} does not match input {xs}"
            )));
        }
        let oh = ((xs.h - 1) * stride + ws.h).checked_sub(2 * pad);
        let ow = ((xs.w - 1) * stride + ws.w).checked_sub(2 * pad);
        let (oh, ow) = match (oh, ow) {
            (Some(h), Some(w)) if h > 0 && w > 0 => (h, w),
            _ => return Err(Error::Shape(format!("conv2d_transpose padding too large for {xs}"))),
        };
        check_bias(self, b, ws.c)?;
        let geom = ConvGeom {
            in_c: ws.c,
            in_h: oh,
            in_w: ow,
            out_c: xs.c,
            out_h: xs.h,
            out_w: xs.w,
            kh: ws.h,
            kw: ws.w,
            stride,
            pad,
        };
        let out_shape = Shape::new(xs.n, ws.c, oh, ow);
        let mut out = init_with_bias(out_shape, b.map(|b| &self.value(b).data[..]));
        let (xv, wv) = (&self.value(x).data, &self.value(w).data);
        out.data
            .par_chunks_mut(geom.in_len())
            .zip(xv.par_chunks(geom.out_len()))
            .for_each(|(o, i)| conv_backward_data(&geom, i, wv, o));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, rg, Op::ConvTranspose { x, w, b, geom }))
    }

    /// Per-channel batch normalization with affine `gamma`, `beta`
    /// (`1 x C x 1 x 1`).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<Var> {
        let s = self.shape(x);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != Shape::new(1, s.c, 1, 1) {
                return Err(Error::Shape(format!(
                    "batch_norm {name} {} for input {s}",
                    self.shape(v)
                )));
            }
        }
        let m = (s.n * s.plane()) as f64;
        let xv = &self.value(x).data;
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            BnMode::Train => (0..s.c)
                .map(|c| {
                    let (mut sum, mut sq) = (0.0f64, 0.0f64);
                    for n in 0..s.n {
                        let base = (n * s.c + c) * s.plane();
                        for &v in &xv[base..base + s.plane()] {
                            sum += v as f64;
                        }
                    }
                    let mu = sum / m;
                    for n in 0..s.n {
                        let base = (n * s.c + c) * s.plane();
                        for &v in &xv[base..base + s.plane()] {
                            let d = v as f64 - mu;
                            sq += d * d;
                        }
                    }
                    (mu, sq / m)
                })
                .unzip(),
            BnMode::Eval { mean, var } => {
                if mean.len() != s.c || var.len() != s.c {
                    return Err(Error::Shape(
                        "batch_norm running statistics do not match channels".into(),
                    ));
                }
                (
                    mean.iter().map(|v| *v as f64).collect(),
                    var.iter().map(|v| *v as f64).collect(),
                )
            }
            BnMode::Affine => (vec![0.0; s.c], vec![1.0; s.c]),
        };
        let inv_std: Vec<f64> = if matches!(mode, BnMode::Affine) {
            vec![1.0; s.c]
        } else {
            var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect()
        };
        let (gv, bv) = (&self.value(gamma).data, &self.value(beta).data);
        let mut out = Tensor::zeros(s);
        let mut xhat = vec![0.0f32; s.len()];
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * s.plane();
                for i in base..base + s.plane() {
                    let h = ((xv[i] as f64 - mean[c]) * inv_std[c]) as f32;
                    xhat[i] = h;
                    out.data[i] = gv[c] * h + bv[c];
                }
            }
        }
        let train = matches!(mode, BnMode::Train);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_mean: mean.iter().map(|v| *v as f32).collect(),
                batch_var: var.iter().map(|v| *v as f32).collect(),
                train,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape,
            data: t.data.iter().map(|v| v.max(0.0)).collect(),
        };
        let rg = self.rg(x);
        self.push(out, rg, Op::Relu(x))
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!("add of {sa} and {sb}")));
        }
        let out = Tensor {
            shape: sa,
            data: self
                .value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(x, y)| x + y)
                .collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape,
            data: t.data.iter().map(|v| v * s).collect(),
        };
        let rg = self.rg(x);
        self.push(out, rg, Op::Scale(x, s))
    }

    /// Softmax over the channel axis at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape;
        let mut out = Tensor::zeros(s);
        let plane = s.plane();
        for n in 0..s.n {
            let base = n * s.c * plane;
            for p in 0..plane {
                let at = |c: usize| base + c * plane + p;
                let mx = (0..s.c).map(|c| t.data[at(c)]).fold(f32::NEG_INFINITY, f32::max);
                let mut z = 0.0f64;
                for c in 0..s.c {
                    let e = ((t.data[at(c)] - mx) as f64).exp();
                    out.data[at(c)] = e as f32;
                    z += e;
                }
                let inv = 1.0 / z;
                for c in 0..s.c {
                    out.data[at(c)] = (out.data[at(c)] as f64 * inv) as f32;
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, rg, Op::SoftmaxChannels(x))
    }

    /// `sum_k p[k] * centers[k]` per pixel; output has one channel.
    pub fn expectation(&mut self, p: Var, centers: &[f32]) -> Result<Var> {
        let s = self.shape(p);
        if centers.len() != s.c {
            return Err(Error::Shape(format!(
                "{} bin centers for {} channels",
                centers.len(),
                s.c
            )));
        }
        let pv = &self.value(p).data;
        let plane = s.plane();
        let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
        for n in 0..s.n {
            for px in 0..plane {
                let mut acc = 0.0f64;
                for (c, &ck) in centers.iter().enumerate() {
                    acc += pv[(n * s.c + c) * plane + px] as f64 * ck as f64;
                }
                out.data[n * plane + px] = acc as f32;
            }
        }
        let rg = self.rg(p);
        Ok(self.push(
            out,
            rg,
            Op::Expectation {
                p,
                centers: centers.to_vec(),
            },
        ))
    }

    /// Clamp to `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape,
            data: t.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        };
        let rg = self.rg(x);
        self.push(out, rg, Op::Clamp { x, lo, hi })
    }

    fn check_targets(&self, v: Var, targets: &[usize], mask: &[bool], what: &'static str) -> Result<usize> {
        let s = self.shape(v);
        let px = s.n * s.plane();
        if targets.len() != px || mask.len() != px {
            return Err(Error::Shape(format!(
                "{what}: {} targets / {} mask entries for {px} pixels",
                targets.len(),
                mask.len()
            )));
        }
        for (t, m) in targets.iter().zip(mask) {
            if *m && *t >= s.c {
                return Err(Error::Domain(format!("{what}: target bin {t} outside [0, {})", s.c)));
            }
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::EmptyMask(what));
        }
        Ok(count)
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`
    /// over masked pixels, computed with a fused log-softmax.
    pub fn nll_logits(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let count = self.check_targets(logits, targets, mask, "classification loss")?;
        let t = self.value(logits);
        let s = t.shape;
        let plane = s.plane();
        let mut total = 0.0f64;
        for n in 0..s.n {
            for p in 0..plane {
                let i = n * plane + p;
                if !mask[i] {
                    continue;
                }
                let at = |c: usize| (n * s.c + c) * plane + p;
                let mx = (0..s.c).map(|c| t.data[at(c)] as f64).fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + (0..s.c).map(|c| (t.data[at(c)] as f64 - mx).exp()).sum::<f64>().ln();
                total += lse - t.data[at(targets[i])] as f64;
            }
        }
        let out = Tensor::scalar((total / count as f64) as f32);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            rg,
            Op::NllLogits {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    /// Mean `-ln p[target]` over masked pixels of an already normalized
    /// probability map.
    pub fn nll_probs(&mut self, probs: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let count = self.check_targets(probs, targets, mask, "classification loss")?;
        let t = self.value(probs);
        let s = t.shape;
        let plane = s.plane();
        let mut total = 0.0f64;
        for n in 0..s.n {
            for p in 0..plane {
                let i = n * plane + p;
                if mask[i] {
                    total -= (t.data[(n * s.c + targets[i]) * plane + p] as f64).ln();
                }
            }
        }
        let out = Tensor::scalar((total / count as f64) as f32);
        let rg = self.rg(probs);
        Ok(self.push(
            out,
            rg,
            Op::NllProbs {
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    /// Mean absolute error over masked elements.
    pub fn l1_loss(&mut self, pred: Var, target: &[f32], mask: &[bool]) -> Result<Var> {
        let s = self.shape(pred);
        if target.len() != s.len() || mask.len() != s.len() {
            return Err(Error::Shape(format!(
                "l1_loss: {} targets / {} mask entries for {s}",
                target.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::EmptyMask("regression loss"));
        }
        let pv = &self.value(pred).data;
        let total: f64 = (0..s.len())
            .filter(|&i| mask[i])
            .map(|i| (pv[i] as f64 - target[i] as f64).abs())
            .sum();
        let out = Tensor::scalar((total / count as f64) as f32);
        let rg = self.rg(pred);
        Ok(self.push(
            out,
            rg,
            Op::L1 {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    fn accumulate(&mut self, v: Var, g: &[f32]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn accumulate_f64(&mut self, v: Var, g: &[f64]) {
        let g32: Vec<f32> = g.iter().map(|x| *x as f32).collect();
        self.accumulate(v, &g32);
    }

    /// Back-propagates from a scalar node. Gradients of earlier calls are
    /// cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != Shape::scalar() {
            return Err(Error::Shape(format!("backward from non-scalar {}", self.shape(loss))));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = self.nodes[i].grad.take() else {
                continue;
            };
            self.backward_node(i, &dy);
            self.nodes[i].grad = Some(dy);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, dy: &[f32]) {
        // Detach the op so inputs can be mutated while reading saved state.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let n = self.shape(*x).n;
                if self.rg(*x) {
                    let wv = &self.value(*w).data;
                    let mut dx = vec![0.0f32; n * geom.in_len()];
                    dx.par_chunks_mut(geom.in_len())
                        .zip(dy.par_chunks(geom.out_len()))
                        .for_each(|(d, g)| conv_backward_data(geom, g, wv, d));
                    self.accumulate(*x, &dx);
                }
                if self.rg(*w) {
                    let dw = weight_grad(geom, &self.value(*x).data, dy, n);
                    self.accumulate_f64(*w, &dw);
                }
                if let Some(b) = b {
                    let db = bias_grad(dy, n, geom.out_c, geom.out_h * geom.out_w);
                    self.accumulate_f64(*b, &db);
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let n = self.shape(*x).n;
                if self.rg(*x) {
                    let wv = &self.value(*w).data;
                    let mut dx = vec![0.0f32; n * geom.out_len()];
                    dx.par_chunks_mut(geom.out_len())
                        .zip(dy.par_chunks(geom.in_len()))
                        .for_each(|(d, g)| conv_forward(geom, g, wv, d));
                    self.accumulate(*x, &dx);
                }
                if self.rg(*w) {
                    let dw = weight_grad(geom, dy, &self.value(*x).data, n);
                    self.accumulate_f64(*w, &dw);
                }
                if let Some(b) = b {
                    let db = bias_grad(dy, n, geom.in_c, geom.in_h * geom.in_w);
                    self.accumulate_f64(*b, &db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                ..
            } => {
                let s = self.shape(*x);
                let plane = s.plane();
                let m = (s.n * plane) as f64;
                let mut dgamma = vec![0.0f64; s.c];
                let mut dbeta = vec![0.0f64; s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let base = (n * s.c + c) * plane;
                        for j in base..base + plane {
                            dgamma[c] += dy[j] as f64 * xhat[j] as f64;
                            dbeta[c] += dy[j] as f64;
                        }
                    }
                }
                if self.rg(*x) {
                    let gv = &self.value(*gamma).data;
                    let mut dx = vec![0.0f32; s.len()];
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let base = (n * s.c + c) * plane;
                            let k = gv[c] as f64 * inv_std[c];
                            for j in base..base + plane {
                                dx[j] = if *train {
                                    (k * (dy[j] as f64 - dbeta[c] / m - xhat[j] as f64 * dgamma[c] / m)) as f32
                                } else {
                                    (k * dy[j] as f64) as f32
                                };
                            }
                        }
                    }
                    self.accumulate(*x, &dx);
                }
                self.accumulate_f64(*gamma, &dgamma);
                self.accumulate_f64(*beta, &dbeta);
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                let dx: Vec<f32> = xv
                    .iter()
                    .zip(dy)
                    .map(|(v, g)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, dy);
                self.accumulate(*b, dy);
            }
            Op::Scale(x, s) => {
                let dx: Vec<f32> = dy.iter().map(|g| g * s).collect();
                self.accumulate(*x, &dx);
            }
            Op::SoftmaxChannels(x) => {
                let p = &self.nodes[i].value;
                let s = p.shape;
                let plane = s.plane();
                let mut dx = vec![0.0f32; s.len()];
                for n in 0..s.n {
                    for px in 0..plane {
                        let at = |c: usize| (n * s.c + c) * plane + px;
                        let dot: f64 = (0..s.c).map(|c| dy[at(c)] as f64 * p.data[at(c)] as f64).sum();
                        for c in 0..s.c {
                            dx[at(c)] = (p.data[at(c)] as f64 * (dy[at(c)] as f64 - dot)) as f32;
                        }
                    }
                }
                self.accumulate(*x, &dx);
            }
            Op::Expectation { p, centers } => {
                let s = self.shape(*p);
                let plane = s.plane();
                let mut dp = vec![0.0f32; s.len()];
                for n in 0..s.n {
                    for (c, ck) in centers.iter().enumerate() {
                        for px in 0..plane {
                            dp[(n * s.c + c) * plane + px] = dy[n * plane + px] * ck;
                        }
                    }
                }
                self.accumulate(*p, &dp);
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &self.value(*x).data;
                let dx: Vec<f32> = xv
                    .iter()
                    .zip(dy)
                    .map(|(v, g)| if *v >= *lo && *v <= *hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(*x, &dx);
            }
            Op::NllLogits {
                logits,
                targets,
                mask,
                count,
            } => {
                let t = self.value(*logits);
                let s = t.shape;
                let plane = s.plane();
                let scale = dy[0] as f64 / *count as f64;
                let mut dx = vec![0.0f32; s.len()];
                for n in 0..s.n {
                    for px in 0..plane {
                        let idx = n * plane + px;
                        if !mask[idx] {
                            continue;
                        }
                        let at = |c: usize| (n * s.c + c) * plane + px;
                        let mx = (0..s.c).map(|c| t.data[at(c)] as f64).fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = (0..s.c).map(|c| (t.data[at(c)] as f64 - mx).exp()).sum();
                        for c in 0..s.c {
                            let p = (t.data[at(c)] as f64 - mx).exp() / z;
                            let hot = if c == targets[idx] { 1.0 } else { 0.0 };
                            dx[at(c)] = (scale * (p - hot)) as f32;
                        }
                    }
                }
                self.accumulate(*logits, &dx);
            }
            Op::NllProbs {
                probs,
                targets,
                mask,
                count,
            } => {
                let t = self.value(*probs);
                let s = t.shape;
                let plane = s.plane();
                let scale = dy[0] as f64 / *count as f64;
                let mut dx = vec![0.0f32; s.len()];
                for n in 0..s.n {
                    for px in 0..plane {
                        let idx = n * plane + px;
                        if mask[idx] {
                            let j = (n * s.c + targets[idx]) * plane + px;
                            dx[j] = (-scale / t.data[j] as f64) as f32;
                        }
                    }
                }
                self.accumulate(*probs, &dx);
            }
            Op::L1 {
                pred,
                target,
                mask,
                count,
            } => {
                let pv = &self.value(*pred).data;
                let scale = dy[0] / *count as f32;
                let dx: Vec<f32> = (0..pv.len())
                    .map(|j| {
                        let d = pv[j] - target[j];
                        if !mask[j] || d == 0.0 {
                            0.0
                        } else {
                            scale * d.signum()
                        }
                    })
                    .collect();
                self.accumulate(*pred, &dx);
            }
        }
        self.nodes[i].op = op;
    }

    /// Named gradients of every registered parameter (zeros where no
    /// gradient flowed).
    pub fn gradients(&self) -> Gradients {
        let entries = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = self
                    .grad(*v)
                    .map(<[f32]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.shape(*v).len()]);
                (name.clone(), g)
            })
            .collect();
        Gradients::new(entries)
    }
}

fn check_bias(g: &Graph, b: Option<Var>, channels: usize) -> Result<()> {
    match b {
        Some(b) if g.shape(b) != Shape::new(1, channels, 1, 1) => Err(Error::Shape(format!(
            "bias {} for {channels} output channels",
            g.shape(b)
        ))),
        _ => Ok(()),
    }
}

fn init_with_bias(shape: Shape, bias: Option<&[f32]>) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if let Some(b) = bias {
        let plane = shape.plane();
        for (k, chunk) in t.data.chunks_mut(plane).enumerate() {
            chunk.fill(b[k % shape.c]);
        }
    }
    t
}

/// Batch-summed weight gradient; per-image partial sums are reduced in
/// batch order so the result does not depend on thread scheduling.
/// `a` is the large side of the convolution and `b` the small side; for a
/// transposed conv that is (dy, x).
fn weight_grad(geom: &ConvGeom, a: &[f32], b: &[f32], n: usize) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut dw = vec![0.0f64; geom.weight_len()];
            let large = &a[k * geom.in_len()..(k + 1) * geom.in_len()];
            let small = &b[k * geom.out_len()..(k + 1) * geom.out_len()];
            conv_backward_weight(geom, large, small, &mut dw);
            dw
        })
        .collect();
    let mut total = vec![0.0f64; geom.weight_len()];
    for p in partials {
        total.iter_mut().zip(p).for_each(|(t, v)| *t += v);
    }
    total
}

fn bias_grad(dy: &[f32], n: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut db = vec![0.0f64; c];
    for k in 0..n {
        for (ch, acc) in db.iter_mut().enumerate() {
            let base = (k * c + ch) * plane;
            *acc += dy[base..base + plane].iter().map(|v| *v as f64).sum::<f64>();
        }
    }
    db
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values_and_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![-1.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data, vec![0.0, 2.0]);
        let l = g.l1_loss(y, &[-10.0, -10.0], &[true, true]).unwrap();
        g.backward(l).unwrap();
        let gx = g.grad(x).unwrap();
        assert_eq!(gx[0], 0.0);
        assert_eq!(gx[1], 0.5);
    }

    #[test]
    fn relu_is_not_additive() {
        let mut g = Graph::new();
        let a = g.input(Tensor::scalar(1.0));
        let b = g.input(Tensor::scalar(-2.0));
        let s = g.add(a, b).unwrap();
        let lhs = g.relu(s);
        let ra = g.relu(a);
        let rb = g.relu(b);
        let rhs = g.add(ra, rb).unwrap();
        assert_eq!(g.value(lhs).data[0], 0.0);
        assert_eq!(g.value(rhs).data[0], 1.0);
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f32> = (0..2 * 3 * 4 * 4).map(|i| (i as f32 * 0.37).sin()).collect();
        let x = g.input(Tensor::from_vec(Shape::new(2, 3, 4, 4), data.clone()).unwrap());
        let mut w = Tensor::zeros(Shape::new(3, 3, 1, 1));
        for c in 0..3 {
            w.data[c * 3 + c] = 1.0;
        }
        let w = g.input(w);
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data, data);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(Shape::new(2, 7, 3, 2)));
        let p = g.softmax_channels(x);
        assert!(g.value(p).data.iter().all(|v| (*v - 1.0 / 7.0).abs() < 1e-7));
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(Shape::new(1, 2, 3, 3)));
        let b = g.input(Tensor::zeros(Shape::new(1, 2, 3, 4)));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
        let w = g.input(Tensor::zeros(Shape::new(4, 3, 3, 3)));
        assert!(matches!(g.conv2d(a, w, None, 1, 1), Err(Error::Shape(_))));
        let wt = g.input(Tensor::zeros(Shape::new(3, 2, 4, 4)));
        assert!(matches!(g.conv2d_transpose(a, wt, None, 2, 1), Err(Error::Shape(_))));
        let gamma = g.input(Tensor::zeros(Shape::new(1, 3, 1, 1)));
        assert!(g.batch_norm(a, gamma, gamma, BnMode::Train).is_err());
    }

    #[test]
    fn transposed_conv_output_size() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(Shape::new(2, 3, 8, 6)));
        let w = g.input(Tensor::zeros(Shape::new(3, 5, 4, 4)));
        let y = g.conv2d_transpose(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), Shape::new(2, 5, 16, 12));
    }

    #[test]
    fn nll_examples() {
        let k = 101;
        let mut g = Graph::new();
        let z = g.leaf(Tensor::zeros(Shape::new(1, k, 1, 2)));
        let l = g.nll_logits(z, &[3, 50], &[true, true]).unwrap();
        assert!((g.value(l).data[0] as f64 - (k as f64).ln()).abs() < 1e-5);

        let mut one_hot = Tensor::zeros(Shape::new(1, 3, 1, 1));
        one_hot.data[1] = 1.0;
        let p = g.input(one_hot);
        let l = g.nll_probs(p, &[1], &[true]).unwrap();
        assert_eq!(g.value(l).data[0], 0.0);

        // Masked pixels do not count.
        let mut t = Tensor::filled(Shape::new(1, 2, 1, 2), 0.5);
        t.data[0] = 0.9;
        t.data[2] = 0.1;
        let p = g.input(t);
        let l = g.nll_probs(p, &[0, 0], &[true, false]).unwrap();
        assert!((g.value(l).data[0] as f64 + 0.9f64.ln()).abs() < 1e-6);
        assert!(matches!(
            g.nll_probs(p, &[0, 0], &[false, false]),
            Err(Error::EmptyMask(_))
        ));
        assert!(matches!(g.nll_probs(p, &[2, 0], &[true, false]), Err(Error::Domain(_))));
    }

    #[test]
    fn l1_constant_offset() {
        let mut g = Graph::new();
        let pred = g.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![1.5, 0.5, 2.5, -0.5]).unwrap());
        let target = [1.0, 1.0, 2.0, 0.0];
        let l = g.l1_loss(pred, &target, &[true; 4]).unwrap();
        assert!((g.value(l).data[0] - 0.5).abs() < 1e-7);
        g.backward(l).unwrap();
        assert_eq!(g.grad(pred).unwrap(), &[0.25, -0.25, 0.25, -0.25]);
        let same = g.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap());
        let l = g.l1_loss(same, &[1.0, 2.0], &[true, true]).unwrap();
        assert_eq!(g.value(l).data[0], 0.0);
        g.backward(l).unwrap();
        assert_eq!(g.grad(same).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.add(x, x).unwrap();
        let l = g.l1_loss(y, &[0.0], &[true]).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }
}
