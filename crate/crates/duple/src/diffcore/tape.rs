//! The gradient tape: eager forward evaluation plus reverse-mode
//! differentiation.
//!
//! Nodes are appended in topological order by construction, so the
//! backward pass is a single reverse sweep.  All values are `f64`
//! tensors; scalars use shape `[1]`.

use crate::diffcore::kernels;
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};
use crate::util;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-node operation record with the operand handles and whatever
/// forward-pass state the backward rule needs.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    /// Elementwise product; either operand may be a `[1]` scalar that
    /// broadcasts over the other.
    Mul(Var, Var),
    ScaleConst(Var, f64),
    AddConst(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Ln(Var),
    Concat(Vec<Var>),
    Gather(Var, usize),
    SumElems(Var),
    MeanElems(Var),
    /// Max over elements; `usize` is the argmax captured at forward
    /// time (lowest index on ties) for the subgradient.
    MaxElems(Var, usize),
    Dot(Var, Var),
    Softmax(Var),
    LogSumExp(Var),
    Cosine(Var, Var),
    MeanVecs(Vec<Var>),
    /// `Σ_k w[k] · vec_k`; first operand is the weight vector.
    WeightedSum(Var, Vec<Var>),
    Linear {
        w: Var,
        x: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    MeanPool1d(Var),
    MeanPool2d(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the differentiated scalar with respect to `var`, or
    /// `None` when no gradient flowed there.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

/// A growing record of operations with eagerly computed values.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Clone of a node's value, detached from the graph.
    pub fn detach(&self, v: Var) -> Tensor {
        self.nodes[v.0].value.clone()
    }

    /// Whether gradients will flow into this node during backward.
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn any_needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.needs(*v))
    }

    /// Introduces an input tensor.  `needs_grad` marks trainable
    /// leaves; constants should pass `false` so the backward sweep can
    /// skip entire subgraphs.
    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Constant `[1]` scalar leaf.
    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data);
        let ng = self.any_needs(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data);
        let ng = self.any_needs(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Elementwise product; a `[1]` operand broadcasts.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        let t = if la == lb {
            self.same_shape("mul", a, b)?;
            let data: Vec<f64> = self
                .value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(x, y)| x * y)
                .collect();
            Tensor::new(self.value(a).shape().to_vec(), data)
        } else if lb == 1 {
            let s = self.value(b).item();
            let data: Vec<f64> = self.value(a).data().iter().map(|x| x * s).collect();
            Tensor::new(self.value(a).shape().to_vec(), data)
        } else if la == 1 {
            let s = self.value(a).item();
            let data: Vec<f64> = self.value(b).data().iter().map(|x| x * s).collect();
            Tensor::new(self.value(b).shape().to_vec(), data)
        } else {
            return Err(Error::shape(
                "mul",
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        };
        let ng = self.any_needs(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(t, Op::ScaleConst(a, c), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x + c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(t, Op::AddConst(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| f(*x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, util::softplus, Op::Softplus(a))
    }

    /// Natural logarithm; callers must guarantee positive inputs
    /// (softmax outputs, norms, ...).
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    /// Concatenates rank-1 tensors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no operands"));
        }
        let mut data = Vec::new();
        for &p in parts {
            if self.value(p).shape().len() != 1 {
                return Err(Error::shape(
                    "concat",
                    format!("rank-1 operands required, got {:?}", self.value(p).shape()),
                ));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::vector(&data);
        let ng = self.any_needs(parts);
        Ok(self.push(t, Op::Concat(parts.to_vec()), ng))
    }

    /// Extracts one element as a `[1]` scalar.
    pub fn gather(&mut self, a: Var, idx: usize) -> Result<Var> {
        if idx >= self.value(a).len() {
            return Err(Error::shape(
                "gather",
                format!("index {idx} out of {}", self.value(a).len()),
            ));
        }
        let t = Tensor::scalar(self.value(a).data()[idx]);
        let ng = self.needs(a);
        Ok(self.push(t, Op::Gather(a, idx), ng))
    }

    pub fn sum_elems(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        let ng = self.needs(a);
        self.push(t, Op::SumElems(a), ng)
    }

    pub fn mean_elems(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let t = Tensor::scalar(self.value(a).data().iter().sum::<f64>() / n);
        let ng = self.needs(a);
        self.push(t, Op::MeanElems(a), ng)
    }

    pub fn max_elems(&mut self, a: Var) -> Var {
        let arg = util::argmax(self.value(a).data());
        let t = Tensor::scalar(self.value(a).data()[arg]);
        let ng = self.needs(a);
        self.push(t, Op::MaxElems(a, arg), ng)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let t = Tensor::scalar(util::dot(self.value(a).data(), self.value(b).data()));
        let ng = self.any_needs(&[a, b]);
        Ok(self.push(t, Op::Dot(a, b), ng))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let xs = self.value(a).data();
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let data: Vec<f64> = exps.iter().map(|e| e / z).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data);
        let ng = self.needs(a);
        self.push(t, Op::Softmax(a), ng)
    }

    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(util::log_sum_exp(self.value(a).data()));
        let ng = self.needs(a);
        self.push(t, Op::LogSumExp(a), ng)
    }

    /// Cosine similarity of two equal-shape vectors, as a `[1]` scalar.
    /// The denominator is floored at 1e-12; below the floor the
    /// gradient is treated as zero.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine", a, b)?;
        let t = Tensor::scalar(util::cosine(self.value(a).data(), self.value(b).data()));
        let ng = self.any_needs(&[a, b]);
        Ok(self.push(t, Op::Cosine(a, b), ng))
    }

    /// Arithmetic mean of equal-shape vectors.
    pub fn mean_vecs(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("mean_vecs", "no operands"));
        }
        let shape = self.value(parts[0]).shape().to_vec();
        for &p in parts {
            if self.value(p).shape() != shape.as_slice() {
                return Err(Error::shape(
                    "mean_vecs",
                    format!("{:?} vs {:?}", self.value(p).shape(), shape),
                ));
            }
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        for &p in parts {
            for (d, x) in data.iter_mut().zip(self.value(p).data()) {
                *d += x;
            }
        }
        let inv = 1.0 / parts.len() as f64;
        for d in data.iter_mut() {
            *d *= inv;
        }
        let ng = self.any_needs(parts);
        Ok(self.push(Tensor::new(shape, data), Op::MeanVecs(parts.to_vec()), ng))
    }

    /// `Σ_k w[k] · vecs[k]` for a `[K]` weight vector and K equal-shape
    /// vectors.
    pub fn weighted_sum(&mut self, weights: Var, vecs: &[Var]) -> Result<Var> {
        if self.value(weights).len() != vecs.len() || vecs.is_empty() {
            return Err(Error::shape(
                "weighted_sum",
                format!(
                    "{} weights vs {} vectors",
                    self.value(weights).len(),
                    vecs.len()
                ),
            ));
        }
        let shape = self.value(vecs[0]).shape().to_vec();
        for &p in vecs {
            if self.value(p).shape() != shape.as_slice() {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("{:?} vs {:?}", self.value(p).shape(), shape),
                ));
            }
        }
        let n: usize = shape.iter().product();
        let mut data = vec![0.0; n];
        for (k, &p) in vecs.iter().enumerate() {
            let wk = self.value(weights).data()[k];
            for (d, x) in data.iter_mut().zip(self.value(p).data()) {
                *d += wk * x;
            }
        }
        let mut ops = vec![weights];
        ops.extend_from_slice(vecs);
        let ng = self.any_needs(&ops);
        Ok(self.push(
            Tensor::new(shape, data),
            Op::WeightedSum(weights, vecs.to_vec()),
            ng,
        ))
    }

    /// `w · x + b` for `w: [m, n]`, `x: [n]`, `b: [m]`.
    pub fn linear(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let ws = self.value(w).shape().to_vec();
        let xs = self.value(x).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if ws.len() != 2 || xs.len() != 1 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(Error::shape(
                "linear",
                format!("w {ws:?}, x {xs:?}, b {bs:?}"),
            ));
        }
        let (m, n) = (ws[0], ws[1]);
        let mut y = vec![0.0; m];
        kernels::matvec(
            self.value(w).data(),
            self.value(x).data(),
            Some(self.value(b).data()),
            m,
            n,
            &mut y,
        );
        let ng = self.any_needs(&[w, x, b]);
        Ok(self.push(Tensor::vector(&y), Op::Linear { w, x, b }, ng))
    }

    /// 1-D convolution: `x: [c_in, t]`, `w: [c_out, c_in, k]`,
    /// `b: [c_out]` → `[c_out, t_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 2 || ws.len() != 3 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(Error::shape(
                "conv1d",
                format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            ));
        }
        let (c_in, t) = (xs[0], xs[1]);
        let (c_out, k) = (ws[0], ws[2]);
        if t + 2 * pad < k {
            return Err(Error::shape(
                "conv1d",
                format!("window {k} exceeds padded input {}", t + 2 * pad),
            ));
        }
        let t_out = kernels::conv_out_len(t, k, stride, pad);
        let mut xc = vec![0.0; c_in * k * t_out];
        kernels::im2col1d(self.value(x).data(), c_in, t, k, stride, pad, t_out, &mut xc);
        let mut y = vec![0.0; c_out * t_out];
        kernels::gemm_axpy(
            &mut y,
            self.value(w).data(),
            &xc,
            c_out,
            c_in * k,
            t_out,
            Some(self.value(b).data()),
        );
        let ng = self.any_needs(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![c_out, t_out], y),
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        ))
    }

    /// 2-D convolution: `x: [c_in, h, w]`, `w: [c_out, c_in, kh, kw]`,
    /// `b: [c_out]` → `[c_out, h_out, w_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(Error::shape(
                "conv2d",
                format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            ));
        }
        let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} exceeds padded input {h}x{wd} (pad {pad})"),
            ));
        }
        let h_out = kernels::conv_out_len(h, kh, stride, pad);
        let w_out = kernels::conv_out_len(wd, kw, stride, pad);
        let n = h_out * w_out;
        let mut xc = vec![0.0; c_in * kh * kw * n];
        kernels::im2col2d(
            self.value(x).data(),
            c_in,
            h,
            wd,
            kh,
            kw,
            stride,
            pad,
            h_out,
            w_out,
            &mut xc,
        );
        let mut y = vec![0.0; c_out * n];
        kernels::gemm_axpy(
            &mut y,
            self.value(w).data(),
            &xc,
            c_out,
            c_in * kh * kw,
            n,
            Some(self.value(b).data()),
        );
        let ng = self.any_needs(&[x, w, b]);
        Ok(self.push(
            Tensor::new(vec![c_out, h_out, w_out], y),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        ))
    }

    /// Global average over the time axis: `[c, t]` → `[c]`.
    pub fn mean_pool1d(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("mean_pool1d", format!("x {xs:?}")));
        }
        let (c, t) = (xs[0], xs[1]);
        let data = self.value(x).data();
        let mut y = vec![0.0; c];
        for (ci, yv) in y.iter_mut().enumerate() {
            *yv = data[ci * t..(ci + 1) * t].iter().sum::<f64>() / t as f64;
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::vector(&y), Op::MeanPool1d(x), ng))
    }

    /// Global average over the spatial axes: `[c, h, w]` → `[c]`.
    pub fn mean_pool2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("mean_pool2d", format!("x {xs:?}")));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let data = self.value(x).data();
        let mut y = vec![0.0; c];
        for (ci, yv) in y.iter_mut().enumerate() {
            *yv = data[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::vector(&y), Op::MeanPool2d(x), ng))
    }

    /// Reverse sweep from a `[1]`-shaped root.  Returns per-node
    /// gradients; nodes that never influence the root (or that were
    /// introduced as constants) have `None`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", rv.shape()),
            ));
        }
        if !rv.all_finite() {
            return Err(Error::NonFinite("backward root".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.push_back(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `delta` into the gradient slot for `v`.
    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, delta: impl Fn(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape().to_vec()));
        }
        delta(slot.as_mut().unwrap().data_mut());
    }

    fn push_back(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| {
                    for (dv, gv) in d.iter_mut().zip(gd) {
                        *dv += gv;
                    }
                });
                self.acc(grads, *b, |d| {
                    for (dv, gv) in d.iter_mut().zip(gd) {
                        *dv += gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| {
                    for (dv, gv) in d.iter_mut().zip(gd) {
                        *dv += gv;
                    }
                });
                self.acc(grads, *b, |d| {
                    for (dv, gv) in d.iter_mut().zip(gd) {
                        *dv -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (la, lb) = (self.value(*a).len(), self.value(*b).len());
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if la == lb {
                    self.acc(grads, *a, |d| {
                        for ((dv, gv), bvv) in d.iter_mut().zip(gd).zip(bv) {
                            *dv += gv * bvv;
                        }
                    });
                    self.acc(grads, *b, |d| {
                        for ((dv, gv), avv) in d.iter_mut().zip(gd).zip(av) {
                            *dv += gv * avv;
                        }
                    });
                } else if lb == 1 {
                    let s = bv[0];
                    self.acc(grads, *a, |d| {
                        for (dv, gv) in d.iter_mut().zip(gd) {
                            *dv += gv * s;
                        }
                    });
                    let acc_b: f64 = gd.iter().zip(av).map(|(gv, avv)| gv * avv).sum();
                    self.acc(grads, *b, |d| d[0] += acc_b);
                } else {
                    let s = av[0];
                    self.acc(grads, *b, |d| {
                        for (dv, gv) in d.iter_mut().zip(gd) {
                            *dv += gv * s;
                        }
                    });
                    let acc_a: f64 = gd.iter().zip(bv).map(|(gv, bvv)| gv * bvv).sum();
                    self.acc(grads, *a, |d| d[0] += acc_a);
                }
            }
            Op::ScaleConst(a, c) => {
                let c = *c;
                self.acc(grads, *a, |d| {
                    for (dv, gv) in d.iter_mut().zip(gd) {
                        *dv += gv * c;
                    }
                });
            }
            Op::AddConst(a) => {
                self.acc(grads, *a, |d| {
                    for (dv, gv) in d.iter_mut().zip(gd) {
                        *dv += gv;
                    }
                });
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for ((dv, gv), xvv) in d.iter_mut().zip(gd).zip(xv) {
                        if *xvv > 0.0 {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = self.nodes[i].value.data();
                self.acc(grads, *a, |d| {
                    for ((dv, gv), y) in d.iter_mut().zip(gd).zip(yv) {
                        *dv += gv * (1.0 - y * y);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[i].value.data();
                self.acc(grads, *a, |d| {
                    for ((dv, gv), y) in d.iter_mut().zip(gd).zip(yv) {
                        *dv += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Softplus(a) => {
                let xv = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for ((dv, gv), x) in d.iter_mut().zip(gd).zip(xv) {
                        *dv += gv / (1.0 + (-x).exp());
                    }
                });
            }
            Op::Ln(a) => {
                let xv = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for ((dv, gv), x) in d.iter_mut().zip(gd).zip(xv) {
                        *dv += gv / x;
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let gslice = &gd[off..off + n];
                    self.acc(grads, p, |d| {
                        for (dv, gv) in d.iter_mut().zip(gslice) {
                            *dv += gv;
                        }
                    });
                    off += n;
                }
            }
            Op::Gather(a, idx) => {
                let (idx, g0) = (*idx, gd[0]);
                self.acc(grads, *a, |d| d[idx] += g0);
            }
            Op::SumElems(a) => {
                let g0 = gd[0];
                self.acc(grads, *a, |d| {
                    for dv in d.iter_mut() {
                        *dv += g0;
                    }
                });
            }
            Op::MeanElems(a) => {
                let g0 = gd[0] / self.value(*a).len() as f64;
                self.acc(grads, *a, |d| {
                    for dv in d.iter_mut() {
                        *dv += g0;
                    }
                });
            }
            Op::MaxElems(a, arg) => {
                let (arg, g0) = (*arg, gd[0]);
                self.acc(grads, *a, |d| d[arg] += g0);
            }
            Op::Dot(a, b) => {
                let g0 = gd[0];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |d| {
                    for (dv, bvv) in d.iter_mut().zip(bv) {
                        *dv += g0 * bvv;
                    }
                });
                self.acc(grads, *b, |d| {
                    for (dv, avv) in d.iter_mut().zip(av) {
                        *dv += g0 * avv;
                    }
                });
            }
            Op::Softmax(a) => {
                let yv = self.nodes[i].value.data();
                let inner: f64 = gd.iter().zip(yv).map(|(gv, y)| gv * y).sum();
                self.acc(grads, *a, |d| {
                    for ((dv, gv), y) in d.iter_mut().zip(gd).zip(yv) {
                        *dv += y * (gv - inner);
                    }
                });
            }
            Op::LogSumExp(a) => {
                let g0 = gd[0];
                let out = self.nodes[i].value.item();
                let xv = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for (dv, x) in d.iter_mut().zip(xv) {
                        *dv += g0 * (x - out).exp();
                    }
                });
            }
            Op::Cosine(a, b) => {
                let g0 = gd[0];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let na = util::norm(av);
                let nb = util::norm(bv);
                if na * nb <= 1e-12 {
                    return; // denominator floored: treat as constant
                }
                let cos = util::dot(av, bv) / (na * nb);
                self.acc(grads, *a, |d| {
                    for ((dv, &avv), &bvv) in d.iter_mut().zip(av).zip(bv) {
                        *dv += g0 * (bvv / (na * nb) - cos * avv / (na * na));
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((dv, &bvv), &avv) in d.iter_mut().zip(bv).zip(av) {
                        *dv += g0 * (avv / (na * nb) - cos * bvv / (nb * nb));
                    }
                });
            }
            Op::MeanVecs(parts) => {
                let inv = 1.0 / parts.len() as f64;
                for &p in parts {
                    self.acc(grads, p, |d| {
                        for (dv, gv) in d.iter_mut().zip(gd) {
                            *dv += gv * inv;
                        }
                    });
                }
            }
            Op::WeightedSum(w, vecs) => {
                let wv = self.value(*w).data().to_vec();
                for (k, &p) in vecs.iter().enumerate() {
                    let pk = self.value(p).data();
                    let dw: f64 = gd.iter().zip(pk).map(|(gv, x)| gv * x).sum();
                    self.acc(grads, *w, |d| d[k] += dw);
                    let wk = wv[k];
                    self.acc(grads, p, |d| {
                        for (dv, gv) in d.iter_mut().zip(gd) {
                            *dv += gv * wk;
                        }
                    });
                }
            }
            Op::Linear { w, x, b } => {
                let ws = self.value(*w).shape();
                let (m, n) = (ws[0], ws[1]);
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                let mut dw = vec![0.0; m * n];
                let mut dx = vec![0.0; n];
                kernels::matvec_back(gd, wv, xv, m, n, &mut dw, &mut dx);
                self.acc(grads, *w, |d| {
                    for (dv, s) in d.iter_mut().zip(&dw) {
                        *dv += s;
                    }
                });
                self.acc(grads, *x, |d| {
                    for (dv, s) in d.iter_mut().zip(&dx) {
                        *dv += s;
                    }
                });
                self.acc(grads, *b, |d| {
                    for (dv, gv) in d.iter_mut().zip(gd) {
                        *dv += gv;
                    }
                });
            }
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let (c_in, t) = (xs[0], xs[1]);
                let (c_out, k) = (ws[0], ws[2]);
                let t_out = kernels::conv_out_len(t, k, *stride, *pad);
                // Recompute the im2col buffer for the backward GEMM.
                let mut xc = vec![0.0; c_in * k * t_out];
                kernels::im2col1d(
                    self.value(*x).data(),
                    c_in,
                    t,
                    k,
                    *stride,
                    *pad,
                    t_out,
                    &mut xc,
                );
                let mut dw = vec![0.0; c_out * c_in * k];
                let mut dxc = vec![0.0; xc.len()];
                kernels::gemm_axpy_back(
                    gd,
                    self.value(*w).data(),
                    &xc,
                    c_out,
                    c_in * k,
                    t_out,
                    &mut dw,
                    &mut dxc,
                );
                self.acc(grads, *w, |d| {
                    for (dv, s) in d.iter_mut().zip(&dw) {
                        *dv += s;
                    }
                });
                if self.needs(*x) {
                    let mut dx = vec![0.0; c_in * t];
                    kernels::col2im1d(&dxc, c_in, t, k, *stride, *pad, t_out, &mut dx);
                    self.acc(grads, *x, |d| {
                        for (dv, s) in d.iter_mut().zip(&dx) {
                            *dv += s;
                        }
                    });
                }
                let mut db = vec![0.0; c_out];
                kernels::row_sums(gd, c_out, t_out, &mut db);
                self.acc(grads, *b, |d| {
                    for (dv, s) in d.iter_mut().zip(&db) {
                        *dv += s;
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let xs = self.value(*x).shape();
                let ws = self.value(*w).shape();
                let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
                let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
                let h_out = kernels::conv_out_len(h, kh, *stride, *pad);
                let w_out = kernels::conv_out_len(wd, kw, *stride, *pad);
                let n = h_out * w_out;
                let mut xc = vec![0.0; c_in * kh * kw * n];
                kernels::im2col2d(
                    self.value(*x).data(),
                    c_in,
                    h,
                    wd,
                    kh,
                    kw,
                    *stride,
                    *pad,
                    h_out,
                    w_out,
                    &mut xc,
                );
                let mut dw = vec![0.0; c_out * c_in * kh * kw];
                let mut dxc = vec![0.0; xc.len()];
                kernels::gemm_axpy_back(
                    gd,
                    self.value(*w).data(),
                    &xc,
                    c_out,
                    c_in * kh * kw,
                    n,
                    &mut dw,
                    &mut dxc,
                );
                self.acc(grads, *w, |d| {
                    for (dv, s) in d.iter_mut().zip(&dw) {
                        *dv += s;
                    }
                });
                if self.needs(*x) {
                    let mut dx = vec![0.0; c_in * h * wd];
                    kernels::col2im2d(
                        &dxc, c_in, h, wd, kh, kw, *stride, *pad, h_out, w_out, &mut dx,
                    );
                    self.acc(grads, *x, |d| {
                        for (dv, s) in d.iter_mut().zip(&dx) {
                            *dv += s;
                        }
                    });
                }
                let mut db = vec![0.0; c_out];
                kernels::row_sums(gd, c_out, n, &mut db);
                self.acc(grads, *b, |d| {
                    for (dv, s) in d.iter_mut().zip(&db) {
                        *dv += s;
                    }
                });
            }
            Op::MeanPool1d(x) => {
                let xs = self.value(*x).shape();
                let (c, t) = (xs[0], xs[1]);
                let inv = 1.0 / t as f64;
                self.acc(grads, *x, |d| {
                    for ci in 0..c {
                        let gv = gd[ci] * inv;
                        for dv in d[ci * t..(ci + 1) * t].iter_mut() {
                            *dv += gv;
                        }
                    }
                });
            }
            Op::MeanPool2d(x) => {
                let xs = self.value(*x).shape();
                let (c, hw) = (xs[0], xs[1] * xs[2]);
                let inv = 1.0 / hw as f64;
                self.acc(grads, *x, |d| {
                    for ci in 0..c {
                        let gv = gd[ci] * inv;
                        for dv in d[ci * hw..(ci + 1) * hw].iter_mut() {
                            *dv += gv;
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_mul_chain_matches_hand_derivative() {
        // f(a, b) = sum((a + b) * a); df/da = 2a + b, df/db = a
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(&[1.0, 2.0]), true);
        let b = tape.leaf(Tensor::vector(&[3.0, -1.0]), true);
        let s = tape.add(a, b).unwrap();
        let p = tape.mul(s, a).unwrap();
        let out = tape.sum_elems(p);
        assert_eq!(tape.value(out).item(), (1.0 + 3.0) + (2.0 - 1.0) * 2.0);
        let g = tape.backward(out).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[2.0 + 3.0, 4.0 - 1.0]);
        assert_eq!(g.wrt(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn scalar_broadcast_mul() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(&[1.0, -2.0, 0.5]), true);
        let s = tape.leaf(Tensor::scalar(3.0), true);
        let p = tape.mul(a, s).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, -6.0, 1.5]);
        let out = tape.sum_elems(p);
        let g = tape.backward(out).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[3.0, 3.0, 3.0]);
        assert_eq!(g.wrt(s).unwrap().item(), 1.0 - 2.0 + 0.5);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_is_orthogonal_to_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(&[0.2, -1.0, 3.0, 0.0]), true);
        let y = tape.softmax(a);
        let sum: f64 = tape.value(y).data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let g0 = tape.gather(y, 2).unwrap();
        let g = tape.backward(g0).unwrap();
        // Softmax gradients sum to zero across the input vector.
        let total: f64 = g.wrt(a).unwrap().data().iter().sum();
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_grad_is_softmax() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(&[1.0, 2.0, 3.0]), true);
        let l = tape.log_sum_exp(a);
        let g = tape.backward(l).unwrap();
        let sm = {
            let mut t2 = Tape::new();
            let v = t2.leaf(Tensor::vector(&[1.0, 2.0, 3.0]), false);
            let s = t2.softmax(v);
            t2.detach(s)
        };
        for (gv, sv) in g.wrt(a).unwrap().data().iter().zip(sm.data()) {
            assert!((gv - sv).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_of_parallel_vectors_is_one_with_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(&[1.0, 2.0, 2.0]), true);
        let b = tape.leaf(Tensor::vector(&[2.0, 4.0, 4.0]), false);
        let c = tape.cosine(a, b).unwrap();
        assert!((tape.value(c).item() - 1.0).abs() < 1e-12);
        let g = tape.backward(c).unwrap();
        // Cosine is scale-invariant, so the gradient at parallel
        // vectors is orthogonal to the vector itself.
        let ga = g.wrt(a).unwrap();
        let proj = util::dot(ga.data(), &[1.0, 2.0, 2.0]);
        assert!(proj.abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(&[1.0, 2.0]), true);
        let c = tape.constant(Tensor::vector(&[5.0, 5.0]));
        let s = tape.add(a, c).unwrap();
        let out = tape.sum_elems(s);
        let g = tape.backward(out).unwrap();
        assert!(g.wrt(c).is_none());
        assert!(g.wrt(a).is_some());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(&[1.0, 2.0]), true);
        assert!(matches!(tape.backward(a), Err(Error::Shape { .. })));
    }

    #[test]
    fn non_finite_root_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(-1.0), true);
        let l = tape.ln(a); // ln of a negative value: NaN
        assert!(matches!(tape.backward(l), Err(Error::NonFinite(_))));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(&[1.0, 2.0]), true);
        let b = tape.leaf(Tensor::vector(&[1.0, 2.0, 3.0]), true);
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(tape.dot(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn reused_operand_accumulates_both_paths() {
        // f = sum(a * a): df/da = 2a
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(&[1.5, -0.5]), true);
        let p = tape.mul(a, a).unwrap();
        let out = tape.sum_elems(p);
        let g = tape.backward(out).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn weighted_sum_grads() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::vector(&[0.25, 0.75]), true);
        let v1 = tape.leaf(Tensor::vector(&[1.0, 0.0]), true);
        let v2 = tape.leaf(Tensor::vector(&[0.0, 2.0]), true);
        let s = tape.weighted_sum(w, &[v1, v2]).unwrap();
        assert_eq!(tape.value(s).data(), &[0.25, 1.5]);
        let out = tape.sum_elems(s);
        let g = tape.backward(out).unwrap();
        assert_eq!(g.wrt(w).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(g.wrt(v1).unwrap().data(), &[0.25, 0.25]);
        assert_eq!(g.wrt(v2).unwrap().data(), &[0.75, 0.75]);
    }
}
