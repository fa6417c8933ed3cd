//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Ops evaluate eagerly; every node keeps its forward value so a single
//! reverse sweep can compute gradients. The op set is deliberately small:
//! elementwise arithmetic, matmul/affine, stride-1 2-D convolution, relu,
//! sigmoid, row softmax, log, sum/mean, 2x2 max-pool, concat, gather,
//! reshape, stop-gradient and gradient-reversal.
//!
//! Everything is `f64` and single-threaded; running the same graph twice
//! produces bit-identical values and gradients.

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{op}: incompatible shapes ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kh: usize,
        kw: usize,
        pad: Padding,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    Log(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Concat(Vec<NodeId>),
    Gather {
        x: NodeId,
        indices: Vec<usize>,
    },
    Reshape(NodeId),
    StopGrad(NodeId),
    GradReverse(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients from one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, densified to zeros when the node was unused.
    pub fn or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; gradient is accumulated for it.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    fn binary_same_shape(
        &mut self,
        opname: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), GraphError> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(GraphError::Shape {
                op: opname,
                detail: format!("lhs {sa:?} vs rhs {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary_same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary_same_shape("sub", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.binary_same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Scalar constant times tensor.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.value(a).map(|v| c * v);
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GraphError::Shape {
                op: "matmul",
                detail: format!("lhs {sa:?} vs rhs {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for i in 0..m {
                for kk in 0..k {
                    let aik = da[i * k + kk];
                    let brow = &db[kk * n..kk * n + n];
                    let orow = &mut out[i * n..i * n + n];
                    for j in 0..n {
                        orow[j] += aik * brow[j];
                    }
                }
            }
        }
        let t = Tensor::new(vec![m, n], out).unwrap();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Matmul(a, b), ng))
    }

    /// `x @ w + b` with `x` of shape (m, k), `w` (k, n) and `b` (n).
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != vec![sw[1]] {
            return Err(GraphError::Shape {
                op: "affine",
                detail: format!("x {sx:?}, w {sw:?}, b {sb:?}"),
            });
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let mut out = vec![0.0; m * n];
        {
            let dx = self.value(x).data();
            let dw = self.value(w).data();
            let db = self.value(b).data();
            for i in 0..m {
                let orow = &mut out[i * n..i * n + n];
                orow.copy_from_slice(db);
                for kk in 0..k {
                    let xik = dx[i * k + kk];
                    let wrow = &dw[kk * n..kk * n + n];
                    for j in 0..n {
                        orow[j] += xik * wrow[j];
                    }
                }
            }
        }
        let t = Tensor::new(vec![m, n], out).unwrap();
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(t, Op::Affine { x, w, b }, ng))
    }

    /// Stride-1 2-D convolution over an (h, w, ci) tensor.
    ///
    /// Filters are laid out as (co, kh*kw*ci) with the inner index
    /// `(dh*kw + dw)*ci + c`; `b` has shape (co). `Same` padding requires
    /// odd kernel dims.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        kh: usize,
        kw: usize,
        pad: Padding,
    ) -> Result<NodeId, GraphError> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sx.len() != 3 || sw.len() != 2 {
            return Err(GraphError::Shape {
                op: "conv2d",
                detail: format!("x {sx:?}, w {sw:?}"),
            });
        }
        let (h, wi, ci) = (sx[0], sx[1], sx[2]);
        let klen = kh * kw * ci;
        let co = sw[0];
        if sw[1] != klen || sb != vec![co] {
            return Err(GraphError::Shape {
                op: "conv2d",
                detail: format!("x {sx:?}, w {sw:?}, b {sb:?}, kernel {kh}x{kw}"),
            });
        }
        let (ph, pw, ho, wo) = match pad {
            Padding::Valid => {
                if h < kh || wi < kw {
                    return Err(GraphError::Shape {
                        op: "conv2d",
                        detail: format!("input {sx:?} smaller than kernel {kh}x{kw}"),
                    });
                }
                (0, 0, h - kh + 1, wi - kw + 1)
            }
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(GraphError::Shape {
                        op: "conv2d",
                        detail: format!("same padding needs odd kernel, got {kh}x{kw}"),
                    });
                }
                ((kh - 1) / 2, (kw - 1) / 2, h, wi)
            }
        };
        let mut out = vec![0.0; ho * wo * co];
        {
            let dx = self.value(x).data();
            let dw = self.value(w).data();
            let db = self.value(b).data();
            for oy in 0..ho {
                for ox in 0..wo {
                    let obase = (oy * wo + ox) * co;
                    out[obase..obase + co].copy_from_slice(db);
                    for dh in 0..kh {
                        let iy = oy + dh;
                        if iy < ph || iy - ph >= h {
                            continue;
                        }
                        let iy = iy - ph;
                        for dwk in 0..kw {
                            let ix = ox + dwk;
                            if ix < pw || ix - pw >= wi {
                                continue;
                            }
                            let ix = ix - pw;
                            let xoff = (iy * wi + ix) * ci;
                            let woff = (dh * kw + dwk) * ci;
                            for n in 0..co {
                                let wrow = &dw[n * klen + woff..n * klen + woff + ci];
                                let xrow = &dx[xoff..xoff + ci];
                                let mut s = 0.0;
                                for c in 0..ci {
                                    s += xrow[c] * wrow[c];
                                }
                                out[obase + n] += s;
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![ho, wo, co], out).unwrap();
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, kh, kw, pad }, ng))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.needs(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.needs(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    /// Softmax along the last axis of a 1-D or 2-D tensor.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.value(a).shape().to_vec();
        let (rows, cols) = match sa.len() {
            1 => (1, sa[0]),
            2 => (sa[0], sa[1]),
            _ => {
                return Err(GraphError::Shape {
                    op: "softmax",
                    detail: format!("expected 1-D or 2-D, got {sa:?}"),
                })
            }
        };
        let mut out = vec![0.0; rows * cols];
        {
            let d = self.value(a).data();
            for r in 0..rows {
                let row = &d[r * cols..(r + 1) * cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - m).exp();
                    out[r * cols + j] = e;
                    z += e;
                }
                for j in 0..cols {
                    out[r * cols + j] /= z;
                }
            }
        }
        let t = Tensor::new(sa, out).unwrap();
        let ng = self.needs(a);
        Ok(self.push(t, Op::SoftmaxRows(a), ng))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).map(f64::ln);
        let ng = self.needs(a);
        self.push(t, Op::Log(a), ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s / n), Op::Mean(a), ng)
    }

    /// 2x2 max-pool with stride 2 over (h, w, c); h and w must be even.
    pub fn maxpool2(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        let sa = self.value(a).shape().to_vec();
        if sa.len() != 3 || sa[0] % 2 != 0 || sa[1] % 2 != 0 {
            return Err(GraphError::Shape {
                op: "maxpool2",
                detail: format!("expected (even, even, c), got {sa:?}"),
            });
        }
        let (h, w, c) = (sa[0], sa[1], sa[2]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; ho * wo * c];
        let mut argmax = vec![0usize; ho * wo * c];
        {
            let d = self.value(a).data();
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut besti = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                if d[idx] > best {
                                    best = d[idx];
                                    besti = idx;
                                }
                            }
                        }
                        let o = (oy * wo + ox) * c + ch;
                        out[o] = best;
                        argmax[o] = besti;
                    }
                }
            }
        }
        let t = Tensor::new(vec![ho, wo, c], out).unwrap();
        let ng = self.needs(a);
        Ok(self.push(t, Op::MaxPool2 { x: a, argmax }, ng))
    }

    /// Concatenate along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(GraphError::Shape {
                op: "concat",
                detail: "no parts".into(),
            });
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.is_empty() {
            return Err(GraphError::Shape {
                op: "concat",
                detail: "scalar parts not supported".into(),
            });
        }
        let mut lead = 0usize;
        for &p in parts {
            let sp = self.value(p).shape();
            if sp.len() != first.len() || sp[1..] != first[1..] {
                return Err(GraphError::Shape {
                    op: "concat",
                    detail: format!("part {sp:?} vs {first:?}"),
                });
            }
            lead += sp[0];
        }
        let mut shape = first.clone();
        shape[0] = lead;
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(shape, data).unwrap();
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::Concat(parts.to_vec()), ng))
    }

    /// Index selection: `out[i] = x.flat[indices[i]]` reshaped to `out_shape`.
    ///
    /// Backward scatter-adds, so repeated indices accumulate.
    pub fn gather(
        &mut self,
        x: NodeId,
        indices: Vec<usize>,
        out_shape: Vec<usize>,
    ) -> Result<NodeId, GraphError> {
        let n = self.value(x).numel();
        let expected: usize = out_shape.iter().product();
        if expected != indices.len() {
            return Err(GraphError::Shape {
                op: "gather",
                detail: format!(
                    "{} indices vs out shape {out_shape:?}",
                    indices.len()
                ),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(GraphError::Shape {
                op: "gather",
                detail: format!("index {bad} out of range for {n} elements"),
            });
        }
        let d = self.value(x).data();
        let data: Vec<f64> = indices.iter().map(|&i| d[i]).collect();
        let t = Tensor::new(out_shape, data).unwrap();
        let ng = self.needs(x);
        Ok(self.push(t, Op::Gather { x, indices }, ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, GraphError> {
        let v = self.value(x);
        let t = v.reshaped(shape.clone()).map_err(|_| GraphError::Shape {
            op: "reshape",
            detail: format!("{:?} -> {shape:?}", v.shape()),
        })?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Identity forward, no gradient flows back.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).clone();
        self.push(t, Op::StopGrad(a), false)
    }

    /// Identity forward, gradient multiplied by -1 on the way back.
    pub fn grad_reverse(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a).clone();
        let ng = self.needs(a);
        self.push(t, Op::GradReverse(a), ng)
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += dv;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    /// Reverse sweep from a scalar root. Each node is visited exactly once
    /// in reverse creation order, so gradients are deterministic.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, GraphError> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(GraphError::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let g = grads[i].clone().unwrap();
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        Self::accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        Self::accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        Self::accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        Self::accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let vb = self.value(*b);
                        let d = g
                            .data()
                            .iter()
                            .zip(vb.data())
                            .map(|(gv, bv)| gv * bv)
                            .collect();
                        Self::accumulate(
                            &mut grads,
                            *a,
                            Tensor::new(g.shape().to_vec(), d).unwrap(),
                        );
                    }
                    if self.needs(*b) {
                        let va = self.value(*a);
                        let d = g
                            .data()
                            .iter()
                            .zip(va.data())
                            .map(|(gv, av)| gv * av)
                            .collect();
                        Self::accumulate(
                            &mut grads,
                            *b,
                            Tensor::new(g.shape().to_vec(), d).unwrap(),
                        );
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs(*a) {
                        Self::accumulate(&mut grads, *a, g.map(|v| c * v));
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = {
                        let sa = self.value(*a).shape();
                        (sa[0], sa[1])
                    };
                    let n = self.value(*b).shape()[1];
                    let gd = g.data();
                    if self.needs(*a) {
                        let db = self.value(*b).data();
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            for kk in 0..k {
                                let brow = &db[kk * n..kk * n + n];
                                let grow = &gd[i * n..i * n + n];
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += grow[j] * brow[j];
                                }
                                ga[i * k + kk] = s;
                            }
                        }
                        Self::accumulate(&mut grads, *a, Tensor::new(vec![m, k], ga).unwrap());
                    }
                    if self.needs(*b) {
                        let da = self.value(*a).data();
                        let mut gb = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &gd[i * n..i * n + n];
                            for kk in 0..k {
                                let aik = da[i * k + kk];
                                let gbrow = &mut gb[kk * n..kk * n + n];
                                for j in 0..n {
                                    gbrow[j] += aik * grow[j];
                                }
                            }
                        }
                        Self::accumulate(&mut grads, *b, Tensor::new(vec![k, n], gb).unwrap());
                    }
                }
                Op::Affine { x, w, b } => {
                    let (m, k) = {
                        let sx = self.value(*x).shape();
                        (sx[0], sx[1])
                    };
                    let n = self.value(*w).shape()[1];
                    let gd = g.data();
                    if self.needs(*x) {
                        let dw = self.value(*w).data();
                        let mut gx = vec![0.0; m * k];
                        for i in 0..m {
                            let grow = &gd[i * n..i * n + n];
                            for kk in 0..k {
                                let wrow = &dw[kk * n..kk * n + n];
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += grow[j] * wrow[j];
                                }
                                gx[i * k + kk] = s;
                            }
                        }
                        Self::accumulate(&mut grads, *x, Tensor::new(vec![m, k], gx).unwrap());
                    }
                    if self.needs(*w) {
                        let dx = self.value(*x).data();
                        let mut gw = vec![0.0; k * n];
                        for i in 0..m {
                            let grow = &gd[i * n..i * n + n];
                            for kk in 0..k {
                                let xik = dx[i * k + kk];
                                let gwrow = &mut gw[kk * n..kk * n + n];
                                for j in 0..n {
                                    gwrow[j] += xik * grow[j];
                                }
                            }
                        }
                        Self::accumulate(&mut grads, *w, Tensor::new(vec![k, n], gw).unwrap());
                    }
                    if self.needs(*b) {
                        let mut gb = vec![0.0; n];
                        for i in 0..m {
                            let grow = &gd[i * n..i * n + n];
                            for j in 0..n {
                                gb[j] += grow[j];
                            }
                        }
                        Self::accumulate(&mut grads, *b, Tensor::new(vec![n], gb).unwrap());
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    kh,
                    kw,
                    pad,
                } => {
                    let sx = self.value(*x).shape().to_vec();
                    let (h, wi, ci) = (sx[0], sx[1], sx[2]);
                    let klen = kh * kw * ci;
                    let co = self.value(*w).shape()[0];
                    let (ph, pw) = match pad {
                        Padding::Valid => (0usize, 0usize),
                        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
                    };
                    let (ho, wo) = (g.shape()[0], g.shape()[1]);
                    let gd = g.data();
                    let dx = self.value(*x).data();
                    let dw = self.value(*w).data();
                    let want_x = self.needs(*x);
                    let want_w = self.needs(*w);
                    let want_b = self.needs(*b);
                    let mut gx = if want_x { vec![0.0; dx.len()] } else { Vec::new() };
                    let mut gw = if want_w { vec![0.0; dw.len()] } else { Vec::new() };
                    let mut gb = if want_b { vec![0.0; co] } else { Vec::new() };
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let obase = (oy * wo + ox) * co;
                            if want_b {
                                for n in 0..co {
                                    gb[n] += gd[obase + n];
                                }
                            }
                            for dh in 0..*kh {
                                let iy = oy + dh;
                                if iy < ph || iy - ph >= h {
                                    continue;
                                }
                                let iy = iy - ph;
                                for dwk in 0..*kw {
                                    let ix = ox + dwk;
                                    if ix < pw || ix - pw >= wi {
                                        continue;
                                    }
                                    let ix = ix - pw;
                                    let xoff = (iy * wi + ix) * ci;
                                    let woff = (dh * kw + dwk) * ci;
                                    for n in 0..co {
                                        let gn = gd[obase + n];
                                        let wrow = n * klen + woff;
                                        if want_w {
                                            for c in 0..ci {
                                                gw[wrow + c] += gn * dx[xoff + c];
                                            }
                                        }
                                        if want_x {
                                            for c in 0..ci {
                                                gx[xoff + c] += gn * dw[wrow + c];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if want_x {
                        Self::accumulate(&mut grads, *x, Tensor::new(sx.clone(), gx).unwrap());
                    }
                    if want_w {
                        Self::accumulate(
                            &mut grads,
                            *w,
                            Tensor::new(vec![co, klen], gw).unwrap(),
                        );
                    }
                    if want_b {
                        Self::accumulate(&mut grads, *b, Tensor::new(vec![co], gb).unwrap());
                    }
                }
                Op::Relu(a) => {
                    if self.needs(*a) {
                        let va = self.value(*a);
                        let d = g
                            .data()
                            .iter()
                            .zip(va.data())
                            .map(|(gv, av)| if *av > 0.0 { *gv } else { 0.0 })
                            .collect();
                        Self::accumulate(
                            &mut grads,
                            *a,
                            Tensor::new(g.shape().to_vec(), d).unwrap(),
                        );
                    }
                }
                Op::Sigmoid(a) => {
                    if self.needs(*a) {
                        let s = &node.value;
                        let d = g
                            .data()
                            .iter()
                            .zip(s.data())
                            .map(|(gv, sv)| gv * sv * (1.0 - sv))
                            .collect();
                        Self::accumulate(
                            &mut grads,
                            *a,
                            Tensor::new(g.shape().to_vec(), d).unwrap(),
                        );
                    }
                }
                Op::SoftmaxRows(a) => {
                    if self.needs(*a) {
                        let p = node.value.data();
                        let shape = node.value.shape();
                        let (rows, cols) = if shape.len() == 1 {
                            (1, shape[0])
                        } else {
                            (shape[0], shape[1])
                        };
                        let gd = g.data();
                        let mut out = vec![0.0; rows * cols];
                        for r in 0..rows {
                            let base = r * cols;
                            let mut dot = 0.0;
                            for j in 0..cols {
                                dot += gd[base + j] * p[base + j];
                            }
                            for j in 0..cols {
                                out[base + j] = p[base + j] * (gd[base + j] - dot);
                            }
                        }
                        Self::accumulate(
                            &mut grads,
                            *a,
                            Tensor::new(shape.to_vec(), out).unwrap(),
                        );
                    }
                }
                Op::Log(a) => {
                    if self.needs(*a) {
                        let va = self.value(*a);
                        let d = g
                            .data()
                            .iter()
                            .zip(va.data())
                            .map(|(gv, av)| gv / av)
                            .collect();
                        Self::accumulate(
                            &mut grads,
                            *a,
                            Tensor::new(g.shape().to_vec(), d).unwrap(),
                        );
                    }
                }
                Op::Sum(a) => {
                    if self.needs(*a) {
                        let shape = self.value(*a).shape().to_vec();
                        Self::accumulate(&mut grads, *a, Tensor::full(shape, g.item()));
                    }
                }
                Op::Mean(a) => {
                    if self.needs(*a) {
                        let va = self.value(*a);
                        let n = va.numel() as f64;
                        Self::accumulate(
                            &mut grads,
                            *a,
                            Tensor::full(va.shape().to_vec(), g.item() / n),
                        );
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    if self.needs(*x) {
                        let shape = self.value(*x).shape().to_vec();
                        let mut gx = vec![0.0; self.value(*x).numel()];
                        for (o, &src) in argmax.iter().enumerate() {
                            gx[src] += g.data()[o];
                        }
                        Self::accumulate(&mut grads, *x, Tensor::new(shape, gx).unwrap());
                    }
                }
                Op::Concat(parts) => {
                    let gd = g.data();
                    let mut off = 0usize;
                    for &p in parts {
                        let len = self.value(p).numel();
                        if self.needs(p) {
                            let d = gd[off..off + len].to_vec();
                            Self::accumulate(
                                &mut grads,
                                p,
                                Tensor::new(self.value(p).shape().to_vec(), d).unwrap(),
                            );
                        }
                        off += len;
                    }
                }
                Op::Gather { x, indices } => {
                    if self.needs(*x) {
                        let shape = self.value(*x).shape().to_vec();
                        let mut gx = vec![0.0; self.value(*x).numel()];
                        for (o, &src) in indices.iter().enumerate() {
                            gx[src] += g.data()[o];
                        }
                        Self::accumulate(&mut grads, *x, Tensor::new(shape, gx).unwrap());
                    }
                }
                Op::Reshape(x) => {
                    if self.needs(*x) {
                        let shape = self.value(*x).shape().to_vec();
                        Self::accumulate(
                            &mut grads,
                            *x,
                            g.reshaped(shape).unwrap(),
                        );
                    }
                }
                Op::StopGrad(a) => {
                    // barrier: nothing flows back to the parent
                    let _ = a;
                }
                Op::GradReverse(a) => {
                    if self.needs(*a) {
                        Self::accumulate(&mut grads, *a, g.map(|v| -v));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central finite difference, over all coordinates.
///
/// Error per coordinate is `|analytic - fd| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, GraphError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, GraphError>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, eps, &coords)
}

/// Like [`grad_check`] but only probes the given flat coordinates, which
/// keeps finite differencing affordable on large parameter vectors.
pub fn grad_check_at<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64, GraphError>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId, GraphError>,
{
    let analytic = {
        let mut g = Graph::new();
        let xid = g.param(x.clone());
        let root = f(&mut g, xid)?;
        let rv = g.value(root);
        if !rv.is_scalar() {
            return Err(GraphError::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        if !rv.item().is_finite() {
            return Err(GraphError::NonFinite {
                what: "grad_check objective",
            });
        }
        let grads = g.backward(root)?;
        grads.or_zeros(xid, x.shape())
    };
    let eval = |pt: &Tensor| -> Result<f64, GraphError> {
        let mut g = Graph::new();
        let xid = g.param(pt.clone());
        let root = f(&mut g, xid)?;
        let v = g.value(root).item();
        if !v.is_finite() {
            return Err(GraphError::NonFinite {
                what: "grad_check objective",
            });
        }
        Ok(v)
    };
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &c in coords {
        let orig = probe.data()[c];
        probe.data_mut()[c] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[c] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[c] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[c];
        let err = (a - fd).abs() / 1.0f64.max(a.abs());
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let s = g.softmax_rows(x).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn convex_combination_grads() {
        // root = 0.3*a + 0.7*b -> da = 0.3, db = 0.7
        let mut g = Graph::new();
        let a = g.param(Tensor::scalar(2.0));
        let b = g.param(Tensor::scalar(-1.0));
        let sa = g.scale(a, 0.3);
        let sb = g.scale(b, 1.0 - 0.3);
        let root = g.add(sa, sb).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(a).unwrap().item(), 0.3);
        assert_eq!(grads.get(b).unwrap().item(), 0.7);
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let root = g.sum(x);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn unused_leaf_has_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let y = g.param(Tensor::scalar(2.0));
        let root = g.scale(x, 3.0);
        let grads = g.backward(root).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.or_zeros(y, &[]).item(), 0.0);
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let s = g.stop_grad(x);
        let y = g.mul(x, s).unwrap();
        let root = g.sum(y);
        let grads = g.backward(root).unwrap();
        // d(x * const)/dx = const = 3
        assert_eq!(grads.get(x).unwrap().item(), 3.0);
    }

    #[test]
    fn grad_reverse_negates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let r = g.grad_reverse(x);
        let root = g.sum(r);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[-1.0, -1.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, GraphError::NonScalarRoot { .. }));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![3, 3]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"));
        assert!(msg.contains("[2, 3]"));
        assert!(msg.contains("[3, 3]"));
    }

    #[test]
    fn cross_entropy_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = rand_tensor(&mut rng, vec![5], -2.0, 2.0);
        let target = 2usize;
        let f = move |g: &mut Graph, x: NodeId| {
            let p = g.softmax_rows(x)?;
            let lp = g.log(p);
            let mut onehot = vec![0.0; 5];
            onehot[target] = 1.0;
            let oh = g.input(Tensor::new(vec![5], onehot).unwrap());
            let picked = g.mul(lp, oh)?;
            let s = g.sum(picked);
            Ok(g.scale(s, -1.0))
        };
        let err = grad_check(f, &z, 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn sum_of_squares_grad_check() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let f = |g: &mut Graph, x: NodeId| {
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        };
        let err = grad_check(f, &x, 1e-5).unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn constant_objective_checks_clean() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let f = |g: &mut Graph, _x: NodeId| Ok(g.input(Tensor::scalar(5.0)));
        let err = grad_check(f, &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    // Each differentiable op, finite-difference checked over 100 seeds.
    #[test]
    fn every_op_passes_grad_check() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);

            let a = rand_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
            let b = rand_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
            let checks: Vec<(&str, f64)> = vec![
                ("add", {
                    let b = b.clone();
                    grad_check(
                        move |g, x| {
                            let bi = g.input(b.clone());
                            let y = g.add(x, bi)?;
                            Ok(g.sum(y))
                        },
                        &a,
                        1e-5,
                    )
                    .unwrap()
                }),
                ("sub", {
                    let b = b.clone();
                    grad_check(
                        move |g, x| {
                            let bi = g.input(b.clone());
                            let y = g.sub(bi, x)?;
                            let sq = g.mul(y, y)?;
                            Ok(g.sum(sq))
                        },
                        &a,
                        1e-5,
                    )
                    .unwrap()
                }),
                ("mul", {
                    let b = b.clone();
                    grad_check(
                        move |g, x| {
                            let bi = g.input(b.clone());
                            let y = g.mul(x, bi)?;
                            Ok(g.sum(y))
                        },
                        &a,
                        1e-5,
                    )
                    .unwrap()
                }),
                ("scale", grad_check(
                    |g, x| {
                        let y = g.scale(x, -1.7);
                        Ok(g.sum(y))
                    },
                    &a,
                    1e-5,
                )
                .unwrap()),
                ("mean", grad_check(
                    |g, x| {
                        let sq = g.mul(x, x)?;
                        Ok(g.mean(sq))
                    },
                    &a,
                    1e-5,
                )
                .unwrap()),
                ("reshape", grad_check(
                    |g, x| {
                        let r = g.reshape(x, vec![3, 2])?;
                        let sq = g.mul(r, r)?;
                        Ok(g.sum(sq))
                    },
                    &a,
                    1e-5,
                )
                .unwrap()),
            ];
            for (name, err) in checks {
                assert!(err < 1e-6, "seed {seed} op {name}: rel err {err}");
            }

            // matmul and affine
            let m = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
            let w = rand_tensor(&mut rng, vec![4, 2], -1.0, 1.0);
            let bias = rand_tensor(&mut rng, vec![2], -1.0, 1.0);
            {
                let w = w.clone();
                let err = grad_check(
                    move |g, x| {
                        let wi = g.input(w.clone());
                        let y = g.matmul(x, wi)?;
                        let sq = g.mul(y, y)?;
                        Ok(g.sum(sq))
                    },
                    &m,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "seed {seed} matmul lhs: {err}");
            }
            {
                let m2 = m.clone();
                let err = grad_check(
                    move |g, x| {
                        let mi = g.input(m2.clone());
                        let y = g.matmul(mi, x)?;
                        let sq = g.mul(y, y)?;
                        Ok(g.sum(sq))
                    },
                    &w,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "seed {seed} matmul rhs: {err}");
            }
            {
                let m2 = m.clone();
                let w2 = w.clone();
                let err = grad_check(
                    move |g, x| {
                        let mi = g.input(m2.clone());
                        let wi = g.input(w2.clone());
                        let y = g.affine(mi, wi, x)?;
                        let sq = g.mul(y, y)?;
                        Ok(g.sum(sq))
                    },
                    &bias,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "seed {seed} affine bias: {err}");
            }

            // conv2d, both paddings, w.r.t. input and filters
            let img = rand_tensor(&mut rng, vec![5, 4, 2], -1.0, 1.0);
            let filt = rand_tensor(&mut rng, vec![3, 3 * 3 * 2], -0.7, 0.7);
            let cb = rand_tensor(&mut rng, vec![3], -0.3, 0.3);
            for pad in [Padding::Valid, Padding::Same] {
                let (filt2, cb2) = (filt.clone(), cb.clone());
                let err = grad_check(
                    move |g, x| {
                        let wi = g.input(filt2.clone());
                        let bi = g.input(cb2.clone());
                        let y = g.conv2d(x, wi, bi, 3, 3, pad)?;
                        let sq = g.mul(y, y)?;
                        Ok(g.sum(sq))
                    },
                    &img,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "seed {seed} conv x ({pad:?}): {err}");
                let (img2, cb2) = (img.clone(), cb.clone());
                let err = grad_check(
                    move |g, x| {
                        let ii = g.input(img2.clone());
                        let bi = g.input(cb2.clone());
                        let y = g.conv2d(ii, x, bi, 3, 3, pad)?;
                        let sq = g.mul(y, y)?;
                        Ok(g.sum(sq))
                    },
                    &filt,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "seed {seed} conv w ({pad:?}): {err}");
            }

            // relu away from the kink
            let shifted = {
                let data: Vec<f64> = (0..8)
                    .map(|_| {
                        let m = rng.gen_range(0.05..1.0);
                        if rng.gen_bool(0.5) {
                            m
                        } else {
                            -m
                        }
                    })
                    .collect();
                Tensor::new(vec![8], data).unwrap()
            };
            let err = grad_check(
                |g, x| {
                    let y = g.relu(x);
                    let sq = g.mul(y, y)?;
                    Ok(g.sum(sq))
                },
                &shifted,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed} relu: {err}");

            // sigmoid, log, softmax
            let z = rand_tensor(&mut rng, vec![6], -2.0, 2.0);
            let err = grad_check(
                |g, x| {
                    let y = g.sigmoid(x);
                    Ok(g.sum(y))
                },
                &z,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed} sigmoid: {err}");

            let pos = rand_tensor(&mut rng, vec![6], 0.2, 2.0);
            let err = grad_check(
                |g, x| {
                    let y = g.log(x);
                    Ok(g.sum(y))
                },
                &pos,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed} log: {err}");

            let logits = rand_tensor(&mut rng, vec![2, 4], -2.0, 2.0);
            let err = grad_check(
                |g, x| {
                    let p = g.softmax_rows(x)?;
                    let sq = g.mul(p, p)?;
                    Ok(g.sum(sq))
                },
                &logits,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed} softmax: {err}");

            // maxpool
            let pool_in = rand_tensor(&mut rng, vec![4, 6, 3], -1.0, 1.0);
            let err = grad_check(
                |g, x| {
                    let y = g.maxpool2(x)?;
                    let sq = g.mul(y, y)?;
                    Ok(g.sum(sq))
                },
                &pool_in,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed} maxpool: {err}");

            // concat and gather
            let part = rand_tensor(&mut rng, vec![2, 3], -1.0, 1.0);
            {
                let part2 = part.clone();
                let err = grad_check(
                    move |g, x| {
                        let other = g.input(part2.clone());
                        let y = g.concat(&[x, other])?;
                        let sq = g.mul(y, y)?;
                        Ok(g.sum(sq))
                    },
                    &part,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-6, "seed {seed} concat: {err}");
            }
            let src = rand_tensor(&mut rng, vec![7], -1.0, 1.0);
            let idx: Vec<usize> = (0..5).map(|_| rng.gen_range(0..7)).collect();
            let err = grad_check(
                move |g, x| {
                    let y = g.gather(x, idx.clone(), vec![5])?;
                    let sq = g.mul(y, y)?;
                    Ok(g.sum(sq))
                },
                &src,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "seed {seed} gather: {err}");
        }
    }

    // backward(a*L1 + b*L2) == a*backward(L1) + b*backward(L2)
    #[test]
    fn gradient_linearity() {
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x = rand_tensor(&mut rng, vec![3, 3], -1.0, 1.0);
            let w = rand_tensor(&mut rng, vec![3, 3], -1.0, 1.0);
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));

            let mut g = Graph::new();
            let xid = g.param(x.clone());
            let wi = g.input(w.clone());
            let prod = g.matmul(xid, wi).unwrap();
            let l1 = g.sum(prod);
            let sq = g.mul(prod, prod).unwrap();
            let l2 = g.mean(sq);
            let sa = g.scale(l1, a);
            let sb = g.scale(l2, b);
            let combined = g.add(sa, sb).unwrap();

            let g1 = g.backward(l1).unwrap().or_zeros(xid, x.shape());
            let g2 = g.backward(l2).unwrap().or_zeros(xid, x.shape());
            let gc = g.backward(combined).unwrap().or_zeros(xid, x.shape());
            for i in 0..x.numel() {
                let expect = a * g1.data()[i] + b * g2.data()[i];
                assert!(
                    (gc.data()[i] - expect).abs() <= 1e-12,
                    "seed {seed} coord {i}: {} vs {expect}",
                    gc.data()[i]
                );
            }
        }
    }

    #[test]
    fn forward_backward_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let x = rand_tensor(&mut rng, vec![6, 6, 2], -1.0, 1.0);
            let w = rand_tensor(&mut rng, vec![4, 3 * 3 * 2], -0.5, 0.5);
            let b = rand_tensor(&mut rng, vec![4], -0.1, 0.1);
            let mut g = Graph::new();
            let xi = g.input(x);
            let wi = g.param(w.clone());
            let bi = g.param(b);
            let c = g.conv2d(xi, wi, bi, 3, 3, Padding::Same).unwrap();
            let r = g.relu(c);
            let p = g.maxpool2(r).unwrap();
            let root = g.mean(p);
            let grads = g.backward(root).unwrap();
            (
                g.value(root).item(),
                grads.or_zeros(wi, w.shape()),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert!(g1.bits_eq(&g2));
    }
}
