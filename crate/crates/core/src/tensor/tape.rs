//! Dynamic reverse-mode autodiff tape.
//!
//! Each forward op appends a node holding its value and the information its
//! backward rule needs. A node is *tracked* when any of its inputs is; the
//! backward sweep only visits tracked nodes, so computation that hangs off
//! frozen parameters or constants costs nothing on the way back.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, ConvGeom, ConvTransposeGeom};
use super::{Exec, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// Tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    Gelu,
    /// `min(max(x, 0), 6)`.
    Relu6,
    None,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, m: usize, n: usize },
    Reshape(Var),
    SliceCols { a: Var, start: usize, cols: usize },
    ConcatCols(Vec<Var>),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvTransposeGeom },
    Act(Var, Activation),
    Sqrt(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    MeanRows { x: Var, rows: usize },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, label: usize, probs: Vec<T> },
    Clamp { x: Var, lo: T, hi: T },
    LowerBound { x: Var, bound: T },
    RoundSte(Var),
    LogisticRate { y: Var, mean: Var, log_scale: Var, num_pixels: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::Matmul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape(..) => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Act(_, Activation::Gelu) => "gelu",
            Op::Act(_, Activation::Relu6) => "relu6",
            Op::Act(_, Activation::None) => "identity",
            Op::Sqrt(..) => "sqrt",
            Op::LayerNorm { .. } => "layernorm",
            Op::Softmax(..) => "softmax",
            Op::MeanRows { .. } => "mean_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Clamp { .. } => "clamp",
            Op::LowerBound { .. } => "lower_bound",
            Op::RoundSte(..) => "round",
            Op::LogisticRate { .. } => "logistic_rate",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient w.r.t. any tracked node; `None` if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("grad shape"))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

/// Recording of one forward computation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    exec: Exec,
    bound: HashMap<String, Var>,
    bound_order: Vec<(String, Var)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::dim(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
            bound: HashMap::new(),
            bound_order: Vec::new(),
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Leaf that receives a gradient.
    pub fn var(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter as a leaf. Frozen parameters are bound as
    /// constants. Binding the same name twice returns the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let entry = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        let v = self.push(entry.value.clone(), Op::Leaf, !entry.frozen);
        self.bound.insert(name.to_string(), v);
        self.bound_order.push((name.to_string(), v));
        Ok(v)
    }

    /// First node whose value contains a NaN or infinity, as `(index, op name)`.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    fn unary(&mut self, a: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let tracked = self.any_tracked(&[a]);
        self.push(value, op, tracked)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let t = self.any_tracked(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let t = self.any_tracked(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let t = self.any_tracked(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), t))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.zip_with(a, b, |x, y| x / y);
        let t = self.any_tracked(&[a, b]);
        Ok(self.push(v, Op::Div(a, b), t))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.unary(a, v, Op::Scale(a, c))
    }

    /// Adds a `[D]` vector to every row of `a`, whose last axis is `D`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let d = *self.shape(a).last().expect("rank >= 1");
        if self.value(row).len() != d {
            return Err(shape_err("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.data(row);
        let data = self
            .data(a)
            .chunks(d)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        let v = Tensor::new(self.shape(a), data)?;
        let t = self.any_tracked(&[a, row]);
        Ok(self.push(v, Op::AddRow(a, row), t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul: inner dimensions differ, {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let c = kernels::matmul(self.exec, self.data(a), self.data(b), m, k, n);
        let v = Tensor::new(&[m, n], c)?;
        let t = self.any_tracked(&[a, b]);
        Ok(self.push(v, Op::Matmul { a, b, m, k, n }, t))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let v = Tensor::new(&[n, m], kernels::transpose(self.data(a), m, n))?;
        Ok(self.unary(a, v, Op::Transpose { a, m, n }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.unary(a, v, Op::Reshape(a)))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if len == 0 || start + len > cols {
            return Err(Error::dim(format!(
                "slice_cols {start}..{} out of range for {cols} columns",
                start + len
            )));
        }
        let data = self
            .data(a)
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let v = Tensor::new(&[rows, len], data)?;
        Ok(self.unary(a, v, Op::SliceCols { a, start, cols }))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
            }
        }
        let v = Tensor::new(&[rows, total], data)?;
        let t = self.any_tracked(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), t))
    }

    /// Cross-correlation of `x: [cin, h, w]` with `w: [cout, cin/groups, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3()?;
        let ws = self.shape(w).to_vec();
        let [cout, cin_g, kh, kw] = ws[..] else {
            return Err(Error::dim(format!("conv2d weight must be rank 4, got {ws:?}")));
        };
        if groups == 0 || cin % groups != 0 || cin / groups != cin_g {
            return Err(Error::dim(format!(
                "conv2d: input {:?} incompatible with weight {ws:?} at groups={groups}",
                self.shape(x)
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d bias", &[cout], self.shape(b)));
            }
        }
        let geom = ConvGeom::new(cin, h, wd, cout, kh, kw, stride, pad, groups)?;
        let out = kernels::conv2d_forward(
            self.exec,
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
            &geom,
        );
        let v = Tensor::new(&[cout, geom.hout, geom.wout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let t = self.any_tracked(&inputs);
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, t))
    }

    /// Transposed convolution of `x: [cin, h, w]` with `w: [cin, cout, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3()?;
        let ws = self.shape(w).to_vec();
        let [wcin, cout, kh, kw] = ws[..] else {
            return Err(Error::dim(format!(
                "conv_transpose2d weight must be rank 4, got {ws:?}"
            )));
        };
        if wcin != cin || kh != kw {
            return Err(shape_err("conv_transpose2d", self.shape(x), &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv_transpose2d bias", &[cout], self.shape(b)));
            }
        }
        let geom = ConvTransposeGeom::new(cin, h, wd, cout, kh, stride, pad, output_pad)?;
        let out = kernels::conv_transpose2d_forward(
            self.exec,
            self.data(x),
            self.data(w),
            b.map(|b| self.data(b)),
            &geom,
        );
        let (ho, wo) = geom.out_hw();
        let v = Tensor::new(&[cout, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let t = self.any_tracked(&inputs);
        Ok(self.push(v, Op::ConvTranspose2d { x, w, b, geom }, t))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let v = match kind {
            Activation::Gelu => self.value(x).map(|a| T::of(gelu(a.as_f64()))),
            Activation::Relu6 => self.value(x).map(|a| a.max(T::zero()).min(T::of(6.0))),
            Activation::None => self.value(x).clone(),
        };
        self.unary(x, v, Op::Act(x, kind))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.sqrt());
        self.unary(x, v, Op::Sqrt(x))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Contract("layernorm eps must be positive".into()));
        }
        let d = *self.shape(x).last().expect("rank >= 1");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layernorm", self.shape(x), self.shape(gamma)));
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = self.value(x).len() / d;
        let mut out = Vec::with_capacity(rows * d);
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let inv_d = T::of(1.0 / d as f64);
        for row in self.data(x).chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + T::of(eps)).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        let t = self.any_tracked(&[x, gamma, beta]);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            t,
        ))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = *self.shape(x).last().expect("rank >= 1");
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.data(x).chunks(d) {
            out.extend(softmax_row(row));
        }
        let v = Tensor::new(self.shape(x), out).expect("same shape");
        self.unary(x, v, Op::Softmax(x))
    }

    /// Mean over the rows of `[N, D]`, giving `[D]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.value(x).dims2()?;
        let inv = T::of(1.0 / rows as f64);
        let data = self.data(x);
        let out = (0..d)
            .map(|j| (0..rows).map(|i| data[i * d + j]).sum::<T>() * inv)
            .collect();
        let v = Tensor::new(&[d], out)?;
        Ok(self.unary(x, v, Op::MeanRows { x, rows }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.unary(x, v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let v = Tensor::scalar(self.value(x).sum() / T::of(n as f64));
        self.unary(x, v, Op::Mean(x))
    }

    /// Mean squared difference of two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// `-log softmax(logits)[label]` in log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.data(logits);
        if label >= z.len() {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} classes",
                z.len()
            )));
        }
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let probs = softmax_row(z);
        let v = Tensor::scalar(lse - z[label]);
        Ok(self.unary(
            logits,
            v,
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    /// Elementwise clamp; gradient passes inside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        self.unary(x, v, Op::Clamp { x, lo, hi })
    }

    /// `max(x, bound)`. The gradient also passes below the bound when it
    /// would push the value upward, so clamped parameters can recover.
    pub fn lower_bound(&mut self, x: Var, bound: T) -> Var {
        let v = self.value(x).map(|a| a.max(bound));
        self.unary(x, v, Op::LowerBound { x, bound })
    }

    /// Round half away from zero, with identity gradient.
    pub fn round_ste(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.round());
        self.unary(x, v, Op::RoundSte(x))
    }

    /// Estimated code length, in bits per pixel, of `y: [M, h, w]` under a
    /// per-channel discretized logistic density. See [`crate::codec::rate_bpp`].
    pub fn logistic_rate(
        &mut self,
        y: Var,
        mean: Var,
        log_scale: Var,
        num_pixels: usize,
    ) -> Result<Var> {
        let (m, h, w) = self.value(y).dims3()?;
        if self.shape(mean) != [m] || self.shape(log_scale) != [m] {
            return Err(shape_err("logistic_rate", self.shape(y), self.shape(mean)));
        }
        if num_pixels == 0 {
            return Err(Error::Contract("num_pixels must be positive".into()));
        }
        let plane = h * w;
        let (yd, md, sd) = (self.data(y), self.data(mean), self.data(log_scale));
        let mut bits = 0.0f64;
        for c in 0..m {
            let (mu, s) = (md[c].as_f64(), clamped_scale(sd[c].as_f64()));
            for &v in &yd[c * plane..(c + 1) * plane] {
                bits += bits_of(logistic_mass(v.as_f64() - mu, s).0);
            }
        }
        let v = Tensor::scalar(T::of(bits / num_pixels as f64));
        let t = self.any_tracked(&[y, mean, log_scale]);
        Ok(self.push(
            v,
            Op::LogisticRate {
                y,
                mean,
                log_scale,
                num_pixels,
            },
            t,
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.value(loss).is_finite() {
            let (idx, name) = self.first_non_finite().expect("loss itself is non-finite");
            return Err(Error::Numeric(format!(
                "non-finite loss; first non-finite value at node #{idx} ({name})"
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .bound_order
            .iter()
            .filter(|(_, v)| self.nodes[v.0].tracked)
            .map(|(name, v)| {
                let g = grads[v.0]
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); self.value(*v).len()]);
                (name.clone(), Tensor::new(self.shape(*v), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
            params,
        })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let g = self.backward(loss)?;
        store.accumulate(g.params())
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl Fn(usize) -> T) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let contrib = (0..self.value(v).len()).map(f).collect();
        self.acc(grads, v, contrib);
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let exec = self.exec;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc_with(grads, *a, |j| g[j] * bd[j]);
                self.acc_with(grads, *b, |j| g[j] * ad[j]);
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                self.acc_with(grads, *a, |j| g[j] / bd[j]);
                self.acc_with(grads, *b, |j| -g[j] * ad[j] / (bd[j] * bd[j]));
            }
            Op::Scale(a, c) => self.acc_with(grads, *a, |j| g[j] * *c),
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.to_vec());
                let d = self.value(*row).len();
                let mut gr = vec![T::zero(); d];
                for chunk in g.chunks(d) {
                    for (s, &v) in gr.iter_mut().zip(chunk) {
                        *s += v;
                    }
                }
                self.acc(grads, *row, gr);
            }
            Op::Matmul { a, b, m, k, n } => {
                if self.nodes[a.0].tracked {
                    let da = kernels::matmul_nt(exec, g, self.data(*b), *m, *n, *k);
                    self.acc(grads, *a, da);
                }
                if self.nodes[b.0].tracked {
                    let db = kernels::matmul_tn(exec, self.data(*a), g, *m, *k, *n);
                    self.acc(grads, *b, db);
                }
            }
            Op::Transpose { a, m, n } => self.acc(grads, *a, kernels::transpose(g, *n, *m)),
            Op::Reshape(a) => self.acc(grads, *a, g.to_vec()),
            Op::SliceCols { a, start, cols } => {
                let len = self.nodes[i].value.shape()[1];
                let mut ga = vec![T::zero(); self.value(*a).len()];
                for (r, grow) in g.chunks(len).enumerate() {
                    ga[r * cols + start..r * cols + start + len].copy_from_slice(grow);
                }
                self.acc(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let (rows, c) = self.value(p).dims2().expect("rank 2");
                    if self.nodes[p.0].tracked {
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        self.acc(grads, p, gp);
                    }
                    offset += c;
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(exec, self.data(*x), self.data(*w), g, geom);
                self.acc(grads, *x, dx);
                self.acc(grads, *w, dw);
                if let Some(b) = b {
                    self.acc(grads, *b, db);
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (dx, dw, db) =
                    kernels::conv_transpose2d_backward(exec, self.data(*x), self.data(*w), g, geom);
                self.acc(grads, *x, dx);
                self.acc(grads, *w, dw);
                if let Some(b) = b {
                    self.acc(grads, *b, db);
                }
            }
            Op::Act(x, kind) => {
                let xd = self.data(*x);
                match kind {
                    Activation::Gelu => {
                        self.acc_with(grads, *x, |j| g[j] * T::of(gelu_grad(xd[j].as_f64())))
                    }
                    Activation::Relu6 => self.acc_with(grads, *x, |j| {
                        if xd[j] > T::zero() && xd[j] < T::of(6.0) {
                            g[j]
                        } else {
                            T::zero()
                        }
                    }),
                    Activation::None => self.acc(grads, *x, g.to_vec()),
                }
            }
            Op::Sqrt(x) => {
                let y = self.nodes[i].value.data();
                self.acc_with(grads, *x, |j| g[j] * T::of(0.5) / y[j]);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = self.data(*gamma);
                let d = gm.len();
                if self.nodes[x.0].tracked {
                    let inv_d = T::of(1.0 / d as f64);
                    let mut dx = Vec::with_capacity(g.len());
                    for (r, (grow, xrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let dxh: Vec<T> = grow.iter().zip(gm).map(|(&a, &b)| a * b).collect();
                        let mean_dxh = dxh.iter().copied().sum::<T>() * inv_d;
                        let mean_dxh_xh =
                            dxh.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                        for (&dh, &xh) in dxh.iter().zip(xrow) {
                            dx.push(rstd[r] * (dh - mean_dxh - xh * mean_dxh_xh));
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] += grow[j] * xrow[j];
                        db[j] += grow[j];
                    }
                }
                self.acc(grads, *gamma, dg);
                self.acc(grads, *beta, db);
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data();
                let d = *self.nodes[i].value.shape().last().expect("rank >= 1");
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(d).zip(y.chunks(d)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    dx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                self.acc(grads, *x, dx);
            }
            Op::MeanRows { x, rows } => {
                let inv = T::of(1.0 / *rows as f64);
                let d = g.len();
                self.acc_with(grads, *x, |j| g[j % d] * inv);
            }
            Op::Sum(x) => self.acc_with(grads, *x, |_| g[0]),
            Op::Mean(x) => {
                let inv = T::of(1.0 / self.value(*x).len() as f64);
                self.acc_with(grads, *x, |_| g[0] * inv);
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => self.acc_with(grads, *logits, |j| {
                let onehot = if j == *label { T::one() } else { T::zero() };
                g[0] * (probs[j] - onehot)
            }),
            Op::Clamp { x, lo, hi } => {
                let xd = self.data(*x);
                self.acc_with(grads, *x, |j| {
                    if xd[j] >= *lo && xd[j] <= *hi {
                        g[j]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::LowerBound { x, bound } => {
                let xd = self.data(*x);
                self.acc_with(grads, *x, |j| {
                    if xd[j] >= *bound || g[j] < T::zero() {
                        g[j]
                    } else {
                        T::zero()
                    }
                });
            }
            Op::RoundSte(x) => self.acc(grads, *x, g.to_vec()),
            Op::LogisticRate {
                y,
                mean,
                log_scale,
                num_pixels,
            } => {
                let (m, h, w) = self.value(*y).dims3().expect("rank 3");
                let plane = h * w;
                let (yd, md, sd) = (self.data(*y), self.data(*mean), self.data(*log_scale));
                let scale = g[0].as_f64() / *num_pixels as f64;
                let mut dy = vec![T::zero(); yd.len()];
                let mut dmean = vec![T::zero(); m];
                let mut dls = vec![T::zero(); m];
                for c in 0..m {
                    let ls = sd[c].as_f64();
                    let s = clamped_scale(ls);
                    let ls_active = ls >= MIN_LOG_SCALE;
                    let (mut acc_mu, mut acc_ls) = (0.0, 0.0);
                    for j in c * plane..(c + 1) * plane {
                        let (p, dp_dy, dp_dls) = logistic_mass(yd[j].as_f64() - md[c].as_f64(), s);
                        if p <= PROB_FLOOR {
                            continue;
                        }
                        let dbits_dp = -1.0 / (p * std::f64::consts::LN_2);
                        dy[j] = T::of(scale * dbits_dp * dp_dy);
                        acc_mu -= dbits_dp * dp_dy;
                        acc_ls += dbits_dp * dp_dls;
                    }
                    dmean[c] = T::of(scale * acc_mu);
                    if ls_active {
                        dls[c] = T::of(scale * acc_ls);
                    }
                }
                self.acc(grads, *y, dy);
                self.acc(grads, *mean, dmean);
                self.acc(grads, *log_scale, dls);
            }
        }
    }
}

pub(crate) fn softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Smallest admissible logistic log-scale, `ln(1e-3)`.
pub const MIN_LOG_SCALE: f64 = -6.907_755_278_982_137;

/// Probability floor applied before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-9;

pub(crate) fn clamped_scale(log_scale: f64) -> f64 {
    log_scale.max(MIN_LOG_SCALE).exp()
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Mass of the unit-width bin centred at offset `d = y - mean` under a
/// logistic with scale `s`, with derivatives w.r.t. `d` and `ln s`.
///
/// Evaluated on the left tail (`d <= 0`) by symmetry so neither CDF
/// saturates near 1.
pub(crate) fn logistic_mass(d: f64, s: f64) -> (f64, f64, f64) {
    let sign = if d > 0.0 { -1.0 } else { 1.0 };
    let e = sign * d;
    let (hi, lo) = ((e + 0.5) / s, (e - 0.5) / s);
    let (sh, sl) = (sigmoid(hi), sigmoid(lo));
    let p = sh - sl;
    let (dh, dl) = (sh * (1.0 - sh), sl * (1.0 - sl));
    let dp_de = (dh - dl) / s;
    let dp_dls = -hi * dh + lo * dl;
    (p, sign * dp_de, dp_dls)
}

pub(crate) fn bits_of(p: f64) -> f64 {
    -p.max(PROB_FLOOR).log2()
}
