//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every op appends a node holding its output value and enough of its inputs
//! to run the vector-Jacobian product later. [`Tape::backward`] walks the
//! nodes in reverse and accumulates gradients for every node that depends on
//! a leaf with `requires_grad`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            stride: 1,
            padding: 0,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        params: Conv2dParams,
    },
    Relu(Var),
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Log(Var),
    Sum(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => vec![a, b],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => [Some(input), Some(weight), bias]
                .into_iter()
                .flatten()
                .collect(),
            Op::MaxPool2d { input, .. } => vec![input],
            Op::Relu(a)
            | Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Log(a)
            | Op::Sum(a) => vec![a],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Reshape(_) => "reshape",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Log(_) => "log",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a leaf. Gradients flow to it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Records a leaf that takes ownership of its data and never needs a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape_mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        linalg::gemm(
            m,
            k,
            n,
            self.value(a),
            (k, 1),
            self.value(b),
            (n, 1),
            &mut out,
            0.0,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), needs))
    }

    /// Adds a length-`n` bias to every row of an `(m, n)` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::shape_mismatch("add_bias", sx, sb));
        }
        let n = sx[1];
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let shape = sx.to_vec();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(shape, out, Op::AddBias(x, bias), needs))
    }

    /// 2-D convolution of `(N, C_in, H, W)` by `(C_out, C_in, kh, kw)`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        params: Conv2dParams,
    ) -> Result<Var> {
        let (si, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || params.stride == 0 {
            return Err(Error::shape_mismatch("conv2d", &si, &sw));
        }
        let geom = linalg::ConvGeom::new(&si, &sw, params)
            .ok_or_else(|| Error::shape_mismatch("conv2d", &si, &sw))?;
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::shape_mismatch(
                    "conv2d bias",
                    self.shape(b),
                    &[sw[0]],
                ));
            }
        }
        let mut out = vec![0.0; geom.n * geom.c_out * geom.out_len()];
        linalg::conv2d_forward(
            &geom,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &mut out,
        );
        let needs =
            self.needs(input) || self.needs(weight) || bias.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            vec![geom.n, geom.c_out, geom.h_out, geom.w_out],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                params,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(shape, out, Op::Relu(a), needs))
    }

    /// Max pooling over square windows of side `kernel` with stride `kernel`.
    pub fn max_pool2d(&mut self, a: Var, kernel: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || kernel == 0 || s[2] < kernel || s[3] < kernel {
            return Err(Error::config(format!(
                "max_pool2d: kernel {kernel} does not fit input {s:?}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / kernel, w / kernel);
        let x = self.value(a);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * kernel * w + ox * kernel;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * kernel + ky) * w + ox * kernel + kx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            vec![n, c, ho, wo],
            out,
            Op::MaxPool2d { input: a, argmax },
            needs,
        ))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape_mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(self.shape(a).to_vec())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let shape = self.same_shape(op.name(), a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|v| v * factor).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(shape, out, Op::Scale(a, factor), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape_mismatch("reshape", self.shape(a), shape));
        }
        let out = self.value(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), needs))
    }

    fn last_dim(&self, op: &str, a: Var) -> Result<usize> {
        match self.shape(a).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(Error::config(format!(
                "{op}: needs a nonempty last dimension, got {:?}",
                self.shape(a)
            ))),
        }
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let d = self.last_dim("softmax", a)?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(d) {
            linalg::softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(shape, out, Op::Softmax(a), needs))
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let d = self.last_dim("log_softmax", a)?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(shape, out, Op::LogSoftmax(a), needs))
    }

    /// Natural log. Nonpositive inputs are a numeric error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::Numeric {
                op: "log",
                detail: format!("input {bad} outside (0, inf)"),
            });
        }
        let out = self.value(a).iter().map(|v| v.ln()).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(shape, out, Op::Log(a), needs))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let needs = self.needs(a);
        Ok(self.push(vec![], vec![s], Op::Sum(a), needs))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::config("mean of an empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Populates gradients of every node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::usage("backward called twice on the same tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            for input in node.op.inputs() {
                let bad = grads[input.0]
                    .as_deref()
                    .and_then(|d| d.iter().find(|v| !v.is_finite()));
                if let Some(bad) = bad {
                    return Err(Error::Numeric {
                        op: node.op.name(),
                        detail: format!("non-finite gradient value {bad}"),
                    });
                }
            }
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// The piecewise-linear branch taken by every ReLU (active or not) and
    /// max-pool window (argmax) on the tape. Two tapes recording the same ops
    /// with equal patterns lie on the same smooth piece.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => out.extend(node.value.iter().map(|&v| usize::from(v > 0.0))),
                Op::MaxPool2d { argmax, .. } => out.extend_from_slice(argmax),
                _ => {}
            }
        }
        out
    }

    fn propagate(
        &self,
        op: &Op,
        out: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>| match &mut grads[v.0]
        {
            Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        };
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.needs(a) {
                    let mut da = vec![0.0; m * k];
                    // da = g (m,n) · bᵀ (n,k)
                    linalg::gemm(m, n, k, g, (n, 1), self.value(b), (1, n), &mut da, 0.0);
                    acc(grads, a, da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    // db = aᵀ (k,m) · g (m,n)
                    linalg::gemm(k, m, n, self.value(a), (1, k), g, (n, 1), &mut db, 0.0);
                    acc(grads, b, db);
                }
            }
            Op::AddBias(x, bias) => {
                if self.needs(x) {
                    acc(grads, x, g.to_vec());
                }
                if self.needs(bias) {
                    let n = self.shape(bias)[0];
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(grads, bias, db);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                params,
            } => {
                let geom = linalg::ConvGeom::new(self.shape(input), self.shape(weight), params)
                    .expect("validated in forward");
                let want_input = self.needs(input);
                let want_weight = self.needs(weight);
                let mut dx = want_input.then(|| vec![0.0; self.value(input).len()]);
                let mut dw = want_weight.then(|| vec![0.0; self.value(weight).len()]);
                linalg::conv2d_backward(
                    &geom,
                    self.value(input),
                    self.value(weight),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    acc(grads, input, dx);
                }
                if let Some(dw) = dw {
                    acc(grads, weight, dw);
                }
                if let Some(b) = bias.filter(|&b| self.needs(b)) {
                    let plane = geom.out_len();
                    let mut db = vec![0.0; geom.c_out];
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        db[i % geom.c_out] += chunk.iter().sum::<f64>();
                    }
                    acc(grads, b, db);
                }
            }
            Op::Relu(a) => {
                if self.needs(a) {
                    let d = g
                        .iter()
                        .zip(out)
                        .map(|(&gi, &o)| if o > 0.0 { gi } else { 0.0 })
                        .collect();
                    acc(grads, a, d);
                }
            }
            Op::MaxPool2d { input, ref argmax } => {
                if self.needs(input) {
                    let mut d = vec![0.0; self.value(input).len()];
                    for (&src, &gi) in argmax.iter().zip(g) {
                        d[src] += gi;
                    }
                    acc(grads, input, d);
                }
            }
            Op::Add(a, b) => {
                if self.needs(a) {
                    acc(grads, a, g.to_vec());
                }
                if self.needs(b) {
                    acc(grads, b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    acc(grads, a, g.to_vec());
                }
                if self.needs(b) {
                    acc(grads, b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let d = g.iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
                    acc(grads, a, d);
                }
                if self.needs(b) {
                    let d = g.iter().zip(self.value(a)).map(|(x, y)| x * y).collect();
                    acc(grads, b, d);
                }
            }
            Op::Scale(a, f) => {
                if self.needs(a) {
                    acc(grads, a, g.iter().map(|v| v * f).collect());
                }
            }
            Op::Reshape(a) => {
                if self.needs(a) {
                    acc(grads, a, g.to_vec());
                }
            }
            Op::Softmax(a) => {
                if self.needs(a) {
                    let dim = *self.shape(a).last().expect("checked in forward");
                    let mut d = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(dim).zip(out.chunks(dim)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        d.extend(gr.iter().zip(yr).map(|(x, y)| y * (x - dot)));
                    }
                    acc(grads, a, d);
                }
            }
            Op::LogSoftmax(a) => {
                if self.needs(a) {
                    let dim = *self.shape(a).last().expect("checked in forward");
                    let mut d = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(dim).zip(out.chunks(dim)) {
                        let total: f64 = gr.iter().sum();
                        d.extend(gr.iter().zip(yr).map(|(x, y)| x - y.exp() * total));
                    }
                    acc(grads, a, d);
                }
            }
            Op::Log(a) => {
                if self.needs(a) {
                    let d = g.iter().zip(self.value(a)).map(|(x, y)| x / y).collect();
                    acc(grads, a, d);
                }
            }
            Op::Sum(a) => {
                if self.needs(a) {
                    acc(grads, a, vec![g[0]; self.value(a).len()]);
                }
            }
        }
        Ok(())
    }
}

pub(crate) mod linalg {
    use super::Conv2dParams;

    /// `c = a·b + beta·c` with row/column strides `(rs, cs)` for `a` and `b`;
    /// `c` is dense row-major `(m, n)`.
    #[allow(clippy::too_many_arguments)]
    pub fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (usize, usize),
        b: &[f64],
        (rsb, csb): (usize, usize),
        c: &mut [f64],
        beta: f64,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        assert!(c.len() >= m * n);
        if k > 0 {
            assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
            assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
        }
        // SAFETY: bounds on a, b, c asserted above for the given strides.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    pub fn softmax_in_place(row: &mut [f64]) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }

    #[derive(Clone, Copy, Debug)]
    pub struct ConvGeom {
        pub n: usize,
        pub c_in: usize,
        pub h: usize,
        pub w: usize,
        pub c_out: usize,
        pub kh: usize,
        pub kw: usize,
        pub h_out: usize,
        pub w_out: usize,
        pub stride: usize,
        pub pad: usize,
    }

    impl ConvGeom {
        pub fn new(input: &[usize], weight: &[usize], p: Conv2dParams) -> Option<Self> {
            let (n, c_in, h, w) = (input[0], input[1], input[2], input[3]);
            let (c_out, kh, kw) = (weight[0], weight[2], weight[3]);
            if kh > h + 2 * p.padding || kw > w + 2 * p.padding || kh == 0 || kw == 0 {
                return None;
            }
            Some(ConvGeom {
                n,
                c_in,
                h,
                w,
                c_out,
                kh,
                kw,
                h_out: (h + 2 * p.padding - kh) / p.stride + 1,
                w_out: (w + 2 * p.padding - kw) / p.stride + 1,
                stride: p.stride,
                pad: p.padding,
            })
        }

        pub fn out_len(&self) -> usize {
            self.h_out * self.w_out
        }

        fn patch_len(&self) -> usize {
            self.c_in * self.kh * self.kw
        }

        /// Input offset for column row `r` at output position `(oy, ox)`, if in bounds.
        #[inline]
        fn source(&self, r: usize, oy: usize, ox: usize) -> Option<usize> {
            let kx = r % self.kw;
            let ky = (r / self.kw) % self.kh;
            let ci = r / (self.kw * self.kh);
            let y = (oy * self.stride + ky).checked_sub(self.pad)?;
            let x = (ox * self.stride + kx).checked_sub(self.pad)?;
            (y < self.h && x < self.w).then(|| (ci * self.h + y) * self.w + x)
        }

        fn im2col(&self, image: &[f64], col: &mut [f64]) {
            let l = self.out_len();
            for r in 0..self.patch_len() {
                let dst = &mut col[r * l..(r + 1) * l];
                for oy in 0..self.h_out {
                    for ox in 0..self.w_out {
                        dst[oy * self.w_out + ox] =
                            self.source(r, oy, ox).map(|s| image[s]).unwrap_or(0.0);
                    }
                }
            }
        }

        fn col2im_add(&self, col: &[f64], image: &mut [f64]) {
            let l = self.out_len();
            for r in 0..self.patch_len() {
                let src = &col[r * l..(r + 1) * l];
                for oy in 0..self.h_out {
                    for ox in 0..self.w_out {
                        if let Some(s) = self.source(r, oy, ox) {
                            image[s] += src[oy * self.w_out + ox];
                        }
                    }
                }
            }
        }
    }

    pub fn conv2d_forward(
        g: &ConvGeom,
        input: &[f64],
        weight: &[f64],
        bias: Option<&[f64]>,
        out: &mut [f64],
    ) {
        let (k, l) = (g.patch_len(), g.out_len());
        let in_len = g.c_in * g.h * g.w;
        let out_len = g.c_out * l;
        let mut col = vec![0.0; k * l];
        for s in 0..g.n {
            g.im2col(&input[s * in_len..(s + 1) * in_len], &mut col);
            let dst = &mut out[s * out_len..(s + 1) * out_len];
            if let Some(b) = bias {
                for (co, plane) in dst.chunks_mut(l).enumerate() {
                    plane.fill(b[co]);
                }
            }
            let beta = if bias.is_some() { 1.0 } else { 0.0 };
            gemm(g.c_out, k, l, weight, (k, 1), &col, (l, 1), dst, beta);
        }
    }

    pub fn conv2d_backward(
        g: &ConvGeom,
        input: &[f64],
        weight: &[f64],
        grad_out: &[f64],
        mut grad_input: Option<&mut [f64]>,
        mut grad_weight: Option<&mut [f64]>,
    ) {
        let (k, l) = (g.patch_len(), g.out_len());
        let in_len = g.c_in * g.h * g.w;
        let out_len = g.c_out * l;
        let mut col = vec![0.0; k * l];
        let mut dcol = vec![0.0; k * l];
        for s in 0..g.n {
            let go = &grad_out[s * out_len..(s + 1) * out_len];
            if let Some(dw) = grad_weight.as_deref_mut() {
                g.im2col(&input[s * in_len..(s + 1) * in_len], &mut col);
                // dw (c_out,k) += go (c_out,l) · colᵀ (l,k)
                gemm(g.c_out, l, k, go, (l, 1), &col, (1, l), dw, 1.0);
            }
            if let Some(dx) = grad_input.as_deref_mut() {
                // dcol (k,l) = wᵀ (k,c_out) · go (c_out,l)
                gemm(k, g.c_out, l, weight, (1, k), go, (l, 1), &mut dcol, 0.0);
                g.col2im_add(&dcol, &mut dx[s * in_len..(s + 1) * in_len]);
            }
        }
    }
}
