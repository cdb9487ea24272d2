//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological sort and the backward sweep is a single reverse pass.

use matrixmultiply::dgemm;

use crate::error::NnError;

/// Dense row-major array. Image-like values are `[h, w, c]`; the last
/// dimension is always the channel (feature) axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Value {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Value {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let numel: usize = dims.iter().product();
        if dims.is_empty() || numel != data.len() {
            return Err(NnError::Shape { op: "value", detail: format!("dims {dims:?} for {} values", data.len()) });
        }
        Ok(Value { dims, data })
    }

    pub fn scalar(v: f64) -> Self {
        Value { dims: vec![1], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last (channel) axis.
    pub fn channels(&self) -> usize {
        *self.dims.last().expect("values have at least one dim")
    }

    /// Number of channel vectors, i.e. `numel / channels`.
    pub fn rows(&self) -> usize {
        self.numel() / self.channels()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Same-padded 3×3 convolution; weight `[9·cin, cout]`, bias `[cout]`.
    Conv3x3 { x: NodeId, w: NodeId, b: NodeId },
    /// Per-row product `[.., cin] × [cin, cout]`.
    MatMul { x: NodeId, w: NodeId },
    Act(NodeId, Activation),
    Mean(NodeId),
    Sum(NodeId),
    Concat(Vec<NodeId>),
    /// 2×2 average pooling; odd edges average the pixels that exist.
    Pool2(NodeId),
    /// Nearest-neighbor upsampling by 2, cropped to `[h, w]`.
    Upsample2(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Conv3x3 { .. } => "conv3x3",
            Op::MatMul { .. } => "matmul",
            Op::Act(..) => "activation",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Concat(..) => "concat",
            Op::Pool2(..) => "pool2",
            Op::Upsample2(..) => "upsample2",
        }
    }
}

struct Node {
    op: Op,
    value: Value,
    needs_grad: bool,
}

/// Adjoints from one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.adjoints.get(id.0).and_then(|a| a.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.adjoints.get_mut(id.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> NnError {
    NnError::Shape { op, detail }
}

/// `C[m×n] (+)= A[m×k] · B[k×n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: isize, csa: isize, b: &[f64], rsb: isize, csb: isize, beta: f64, c: &mut [f64]) {
    // SAFETY: every caller passes slices whose extents match the strides.
    unsafe {
        dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Gathers 3×3 neighborhoods into rows of `9·c` values, zero outside.
fn im2col(x: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let k = 9 * c;
    let mut cols = vec![0.0; h * w * k];
    for r in 0..h {
        for q in 0..w {
            let row = &mut cols[(r * w + q) * k..(r * w + q + 1) * k];
            for (tap, (dr, dq)) in TAPS.iter().enumerate() {
                let (rr, qq) = (r as isize + dr, q as isize + dq);
                if rr >= 0 && qq >= 0 && (rr as usize) < h && (qq as usize) < w {
                    let src = (rr as usize * w + qq as usize) * c;
                    row[tap * c..(tap + 1) * c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters row gradients back onto the image.
fn col2im(cols: &[f64], h: usize, w: usize, c: usize, out: &mut [f64]) {
    let k = 9 * c;
    for r in 0..h {
        for q in 0..w {
            let row = &cols[(r * w + q) * k..(r * w + q + 1) * k];
            for (tap, (dr, dq)) in TAPS.iter().enumerate() {
                let (rr, qq) = (r as isize + dr, q as isize + dq);
                if rr >= 0 && qq >= 0 && (rr as usize) < h && (qq as usize) < w {
                    let dst = (rr as usize * w + qq as usize) * c;
                    for (o, g) in out[dst..dst + c].iter_mut().zip(&row[tap * c..(tap + 1) * c]) {
                        *o += g;
                    }
                }
            }
        }
    }
}

const TAPS: [(isize, isize); 9] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
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

    pub fn value(&self, id: NodeId) -> &Value {
        &self.nodes[id.0].value
    }

    fn node(&self, id: NodeId) -> Result<&Node, NnError> {
        self.nodes.get(id.0).ok_or_else(|| shape_err("lookup", format!("node {} not on tape", id.0)))
    }

    fn push(&mut self, op: Op, value: Value, needs_grad: bool) -> Result<NodeId, NnError> {
        let id = self.nodes.len();
        if value.data.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite { node: id, op: op.name() });
        }
        self.nodes.push(Node { op, value, needs_grad });
        Ok(NodeId(id))
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Value) -> Result<NodeId, NnError> {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Value) -> Result<NodeId, NnError> {
        self.push(Op::Leaf, value, true)
    }

    fn same_dims(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), NnError> {
        let (da, db) = (&self.node(a)?.value.dims, &self.node(b)?.value.dims);
        if da != db {
            return Err(shape_err(op, format!("{da:?} vs {db:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<NodeId, NnError> {
        self.same_dims(op.name(), a, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Value { dims: va.dims.clone(), data };
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(op, value, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId, NnError> {
        let n = self.node(a)?;
        let value = Value { dims: n.value.dims.clone(), data: n.value.data.iter().map(|v| v * k).collect() };
        let ng = n.needs_grad;
        self.push(Op::Scale(a, k), value, ng)
    }

    pub fn activation(&mut self, a: NodeId, act: Activation) -> Result<NodeId, NnError> {
        let n = self.node(a)?;
        let value = Value { dims: n.value.dims.clone(), data: n.value.data.iter().map(|&v| act.apply(v)).collect() };
        let ng = n.needs_grad;
        self.push(Op::Act(a, act), value, ng)
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let n = self.node(a)?;
        let v = n.value.data.iter().sum::<f64>() / n.value.numel() as f64;
        let ng = n.needs_grad;
        self.push(Op::Mean(a), Value::scalar(v), ng)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NnError> {
        let n = self.node(a)?;
        let v = n.value.data.iter().sum::<f64>();
        let ng = n.needs_grad;
        self.push(Op::Sum(a), Value::scalar(v), ng)
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let lead = self.node(*first)?.value.dims[..self.node(*first)?.value.dims.len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let d = &self.node(p)?.value.dims;
            if d[..d.len() - 1] != lead[..] {
                return Err(shape_err("concat", format!("leading dims {:?} vs {lead:?}", &d[..d.len() - 1])));
            }
            widths.push(*d.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &cw) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data[r * cw..(r + 1) * cw]);
            }
        }
        let mut dims = lead;
        dims.push(total);
        let ng = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(Op::Concat(parts.to_vec()), Value { dims, data }, ng)
    }

    fn image_dims(&self, op: &'static str, x: NodeId) -> Result<(usize, usize, usize), NnError> {
        let d = &self.node(x)?.value.dims;
        if d.len() != 3 {
            return Err(shape_err(op, format!("input must be [h, w, c], got {d:?}")));
        }
        Ok((d[0], d[1], d[2]))
    }

    pub fn pool2(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let (h, w, c) = self.image_dims("pool2", x)?;
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let src = &self.nodes[x.0].value.data;
        let mut data = vec![0.0; ho * wo * c];
        for r in 0..ho {
            for q in 0..wo {
                let (r1, q1) = ((2 * r + 2).min(h), (2 * q + 2).min(w));
                let inv = 1.0 / ((r1 - 2 * r) * (q1 - 2 * q)) as f64;
                let out = &mut data[(r * wo + q) * c..(r * wo + q + 1) * c];
                for rr in 2 * r..r1 {
                    for qq in 2 * q..q1 {
                        for (o, v) in out.iter_mut().zip(&src[(rr * w + qq) * c..(rr * w + qq + 1) * c]) {
                            *o += v * inv;
                        }
                    }
                }
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::Pool2(x), Value { dims: vec![ho, wo, c], data }, ng)
    }

    /// Nearest-neighbor upsampling to `[h, w]`, which must pool back to
    /// the input size.
    pub fn upsample2(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId, NnError> {
        let (hi, wi, c) = self.image_dims("upsample2", x)?;
        if h.div_ceil(2) != hi || w.div_ceil(2) != wi {
            return Err(shape_err("upsample2", format!("[{hi}, {wi}] cannot upsample to [{h}, {w}]")));
        }
        let src = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(h * w * c);
        for r in 0..h {
            for q in 0..w {
                let at = ((r / 2) * wi + q / 2) * c;
                data.extend_from_slice(&src[at..at + c]);
            }
        }
        let ng = self.nodes[x.0].needs_grad;
        self.push(Op::Upsample2(x), Value { dims: vec![h, w, c], data }, ng)
    }

    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, NnError> {
        let (vx, vw) = (&self.node(x)?.value, &self.node(w)?.value);
        if vw.dims.len() != 2 || vw.dims[0] != vx.channels() {
            return Err(shape_err("matmul", format!("input {:?} with weight {:?}", vx.dims, vw.dims)));
        }
        let (rows, cin, cout) = (vx.rows(), vw.dims[0], vw.dims[1]);
        let mut out = vec![0.0; rows * cout];
        gemm(rows, cin, cout, &vx.data, cin as isize, 1, &vw.data, cout as isize, 1, 0.0, &mut out);
        let mut dims = vx.dims.clone();
        *dims.last_mut().unwrap() = cout;
        let ng = self.nodes[x.0].needs_grad || self.nodes[w.0].needs_grad;
        self.push(Op::MatMul { x, w }, Value { dims, data: out }, ng)
    }

    pub fn conv3x3(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (vx, vw, vb) = (&self.node(x)?.value, &self.node(w)?.value, &self.node(b)?.value);
        if vx.dims.len() != 3 {
            return Err(shape_err("conv3x3", format!("input must be [h, w, c], got {:?}", vx.dims)));
        }
        let (h, wd, cin) = (vx.dims[0], vx.dims[1], vx.dims[2]);
        if vw.dims.len() != 2 || vw.dims[0] != 9 * cin || vb.dims != [vw.dims[1]] {
            return Err(shape_err("conv3x3", format!("input {:?}, weight {:?}, bias {:?}", vx.dims, vw.dims, vb.dims)));
        }
        let cout = vw.dims[1];
        let cols = im2col(&vx.data, h, wd, cin);
        let mut out: Vec<f64> = (0..h * wd).flat_map(|_| vb.data.iter().copied()).collect();
        gemm(h * wd, 9 * cin, cout, &cols, (9 * cin) as isize, 1, &vw.data, cout as isize, 1, 1.0, &mut out);
        let ng = [x, w, b].iter().any(|id| self.nodes[id.0].needs_grad);
        self.push(Op::Conv3x3 { x, w, b }, Value { dims: vec![h, wd, cout], data: out }, ng)
    }

    /// Backward sweep from a scalar node seeded with 1.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NnError> {
        let n = self.node(loss)?;
        if n.value.numel() != 1 {
            return Err(NnError::NotScalar(loss.0));
        }
        self.backward_with_seed(loss, vec![1.0])
    }

    /// Backward sweep from any node with an explicit adjoint seed.
    pub fn backward_with_seed(&self, root: NodeId, seed: Vec<f64>) -> Result<Gradients, NnError> {
        let n = self.node(root)?;
        if seed.len() != n.value.numel() {
            return Err(shape_err("backward", format!("seed of {} for node with {} values", seed.len(), n.value.numel())));
        }
        if !n.needs_grad {
            return Err(NnError::Disconnected);
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(&node.op, &node.value, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, op: &Op, out: &Value, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(&mut adj[a.0], g.to_vec());
                }
                if self.wants(b) {
                    accumulate(&mut adj[b.0], g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    accumulate(&mut adj[a.0], g.to_vec());
                }
                if self.wants(b) {
                    accumulate(&mut adj[b.0], g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    accumulate(&mut adj[a.0], g.iter().zip(&val(b).data).map(|(g, y)| g * y).collect());
                }
                if self.wants(b) {
                    accumulate(&mut adj[b.0], g.iter().zip(&val(a).data).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(a, k) => {
                if self.wants(a) {
                    accumulate(&mut adj[a.0], g.iter().map(|v| v * k).collect());
                }
            }
            Op::Act(a, act) => {
                if self.wants(a) {
                    accumulate(&mut adj[a.0], g.iter().zip(&val(a).data).map(|(g, &x)| g * act.derivative(x)).collect());
                }
            }
            Op::Mean(a) => {
                if self.wants(a) {
                    let n = val(a).numel();
                    accumulate(&mut adj[a.0], vec![g[0] / n as f64; n]);
                }
            }
            Op::Sum(a) => {
                if self.wants(a) {
                    accumulate(&mut adj[a.0], vec![g[0]; val(a).numel()]);
                }
            }
            Op::Concat(ref parts) => {
                let total = out.channels();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let cw = val(p).channels();
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(rows * cw);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + cw]);
                        }
                        accumulate(&mut adj[p.0], d);
                    }
                    offset += cw;
                }
            }
            Op::Pool2(x) => {
                if self.wants(x) {
                    let (h, w, c) = (val(x).dims[0], val(x).dims[1], val(x).dims[2]);
                    let wo = out.dims[1];
                    let mut d = vec![0.0; h * w * c];
                    for rr in 0..h {
                        for qq in 0..w {
                            let (r, q) = (rr / 2, qq / 2);
                            let n = (((2 * r + 2).min(h) - 2 * r) * ((2 * q + 2).min(w) - 2 * q)) as f64;
                            let src = &g[(r * wo + q) * c..(r * wo + q + 1) * c];
                            for (o, v) in d[(rr * w + qq) * c..(rr * w + qq + 1) * c].iter_mut().zip(src) {
                                *o = v / n;
                            }
                        }
                    }
                    accumulate(&mut adj[x.0], d);
                }
            }
            Op::Upsample2(x) => {
                if self.wants(x) {
                    let (wi, c) = (val(x).dims[1], val(x).dims[2]);
                    let (h, w) = (out.dims[0], out.dims[1]);
                    let mut d = vec![0.0; val(x).numel()];
                    for r in 0..h {
                        for q in 0..w {
                            let at = ((r / 2) * wi + q / 2) * c;
                            for (o, v) in d[at..at + c].iter_mut().zip(&g[(r * w + q) * c..(r * w + q + 1) * c]) {
                                *o += v;
                            }
                        }
                    }
                    accumulate(&mut adj[x.0], d);
                }
            }
            Op::MatMul { x, w } => {
                let (vx, vw) = (val(x), val(w));
                let (rows, cin, cout) = (vx.rows(), vw.dims[0], vw.dims[1]);
                if self.wants(x) {
                    // dX = G · Wᵀ
                    let mut d = vec![0.0; rows * cin];
                    gemm(rows, cout, cin, g, cout as isize, 1, &vw.data, 1, cout as isize, 0.0, &mut d);
                    accumulate(&mut adj[x.0], d);
                }
                if self.wants(w) {
                    // dW = Xᵀ · G
                    let mut d = vec![0.0; cin * cout];
                    gemm(cin, rows, cout, &vx.data, 1, cin as isize, g, cout as isize, 1, 0.0, &mut d);
                    accumulate(&mut adj[w.0], d);
                }
            }
            Op::Conv3x3 { x, w, b } => {
                let (vx, vw) = (val(x), val(w));
                let (h, wd, cin, cout) = (vx.dims[0], vx.dims[1], vx.dims[2], vw.dims[1]);
                let (p, k) = (h * wd, 9 * cin);
                if self.wants(b) {
                    let mut d = vec![0.0; cout];
                    for row in g.chunks_exact(cout) {
                        d.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    accumulate(&mut adj[b.0], d);
                }
                if self.wants(w) {
                    let cols = im2col(&vx.data, h, wd, cin);
                    let mut d = vec![0.0; k * cout];
                    gemm(k, p, cout, &cols, 1, k as isize, g, cout as isize, 1, 0.0, &mut d);
                    accumulate(&mut adj[w.0], d);
                }
                if self.wants(x) {
                    let mut dcols = vec![0.0; p * k];
                    gemm(p, cout, k, g, cout as isize, 1, &vw.data, 1, cout as isize, 0.0, &mut dcols);
                    let mut d = vec![0.0; p * cin];
                    col2im(&dcols, h, wd, cin, &mut d);
                    accumulate(&mut adj[x.0], d);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut tape = Tape::new();
        let w = tape.param(Value::scalar(3.0)).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[6.0]);
    }

    #[test]
    fn loss_must_be_scalar_and_connected() {
        let mut tape = Tape::new();
        let c = tape.constant(Value::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let s = tape.sum(c).unwrap();
        assert!(matches!(tape.backward(s), Err(NnError::Disconnected)));
        let p = tape.param(Value::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let m = tape.mul(p, c).unwrap();
        assert!(matches!(tape.backward(m), Err(NnError::NotScalar(_))));
    }

    #[test]
    fn nonfinite_reports_node() {
        let mut tape = Tape::new();
        let p = tape.param(Value::scalar(1e200)).unwrap();
        let err = tape.mul(p, p).unwrap_err();
        assert!(matches!(err, NnError::NonFinite { node: 1, op: "mul" }));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Value::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let mut wv = vec![0.0; 9];
        wv[4] = 1.0;
        let w = tape.param(Value::new(vec![9, 1], wv).unwrap()).unwrap();
        let b = tape.param(Value::new(vec![1], vec![0.5]).unwrap()).unwrap();
        let y = tape.conv3x3(x, w, b).unwrap();
        assert_eq!(tape.value(y).data, vec![1.5, 2.5, 3.5, 4.5]);
    }

    #[test]
    fn conv_sums_neighbors_with_zero_padding() {
        let mut tape = Tape::new();
        let x = tape.constant(Value::new(vec![2, 2, 1], vec![1.0; 4]).unwrap()).unwrap();
        let w = tape.param(Value::new(vec![9, 1], vec![1.0; 9]).unwrap()).unwrap();
        let b = tape.param(Value::new(vec![1], vec![0.0]).unwrap()).unwrap();
        let y = tape.conv3x3(x, w, b).unwrap();
        assert_eq!(tape.value(y).data, vec![4.0; 4]);
    }

    #[test]
    fn concat_interleaves_channels() {
        let mut tape = Tape::new();
        let a = tape.constant(Value::new(vec![2, 1], vec![1.0, 2.0]).unwrap()).unwrap();
        let b = tape.constant(Value::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap()).unwrap();
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c).dims, vec![2, 3]);
        assert_eq!(tape.value(c).data, vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn pool_and_upsample() {
        let mut tape = Tape::new();
        let x = tape.constant(Value::new(vec![3, 3, 1], (1..=9).map(f64::from).collect()).unwrap()).unwrap();
        let p = tape.pool2(x).unwrap();
        assert_eq!(tape.value(p).data, vec![3.0, 4.5, 7.5, 9.0]);
        let u = tape.upsample2(p, 3, 3).unwrap();
        assert_eq!(tape.value(u).data, vec![3.0, 3.0, 4.5, 3.0, 3.0, 4.5, 7.5, 7.5, 9.0]);
        assert!(tape.upsample2(p, 5, 3).is_err());
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Value::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let b = tape.constant(Value::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        assert!(matches!(tape.add(a, b), Err(NnError::Shape { op: "add", .. })));
        let w = tape.param(Value::new(vec![3, 1], vec![0.0; 3]).unwrap()).unwrap();
        assert!(matches!(tape.matmul(a, w), Err(NnError::Shape { op: "matmul", .. })));
    }
}
