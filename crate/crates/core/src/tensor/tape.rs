use std::sync::Arc;

use super::linalg::{gemm_acc, matmul, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
    Min,
}

/// Neighbor lists over the rows of a node-feature matrix, stored compressed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Graph {
    /// Undirected graph from an edge list. Duplicate edges are kept once.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut lists = vec![Vec::new(); num_nodes];
        for &(a, b) in edges {
            if a >= num_nodes || b >= num_nodes {
                return Err(Error::invalid(format!(
                    "edge ({a}, {b}) out of range for {num_nodes} nodes"
                )));
            }
            if a == b {
                continue;
            }
            lists[a].push(b);
            lists[b].push(a);
        }
        for l in &mut lists {
            l.sort_unstable();
            l.dedup();
        }
        Ok(Self::from_lists(&lists))
    }

    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for l in lists {
            neighbors.extend_from_slice(l);
            offsets.push(neighbors.len());
        }
        Graph { offsets, neighbors }
    }

    /// `copies` disjoint copies of this graph, node blocks laid out consecutively.
    pub fn repeat(&self, copies: usize) -> Self {
        let n = self.num_nodes();
        let mut offsets = Vec::with_capacity(n * copies + 1);
        let mut neighbors = Vec::with_capacity(self.neighbors.len() * copies);
        offsets.push(0);
        for c in 0..copies {
            for p in 0..n {
                neighbors.extend(self.neighbors(p).iter().map(|&q| q + c * n));
                offsets.push(neighbors.len());
            }
        }
        Graph { offsets, neighbors }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary { kind: BinaryKind, a: Var, b: Var, bc: Broadcast },
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sqrt(Var),
    Square(Var),
    Softmax(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Reduce { x: Var, kind: ReduceKind, axis: usize, arg: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    SqDist(Var, Var),
    GraphMean { x: Var, graph: Arc<Graph> },
    Bilinear { map: Var, coords: Var },
    Clamp { x: Var, lo: f64, hi: f64 },
    ViewStats { xs: Vec<Var>, valid: Vec<Vec<bool>>, argmax: Vec<u32> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Record of a forward computation, replayed in reverse by [`Tape::backward`].
///
/// A tape is single-threaded and append-only. Nodes whose inputs need no
/// gradient are stored as constants and cost nothing on the backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by the original handles.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strided walk over a broadcast binary op: output index plus the flat
/// index into each operand. The last axis is the inner loop.
#[derive(Clone, Debug)]
struct Broadcast {
    out: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
}

fn broadcast_strides(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        strides[i + rank - input.len()] = if input[i] == 1 { 0 } else { acc };
        acc *= input[i];
    }
    strides
}

impl Broadcast {
    fn new(out: &[usize], a: &[usize], b: &[usize]) -> Self {
        let n: usize = out.iter().product();
        if a == b {
            return Broadcast { out: vec![n], sa: vec![1], sb: vec![1] };
        }
        Broadcast { out: out.to_vec(), sa: broadcast_strides(out, a), sb: broadcast_strides(out, b) }
    }

    #[inline]
    fn walk(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out.len();
        let total: usize = self.out.iter().product();
        if rank == 0 {
            if total == 1 {
                f(0, 0, 0);
            }
            return;
        }
        let inner = self.out[rank - 1];
        if inner == 0 || total == 0 {
            return;
        }
        let (da, db) = (self.sa[rank - 1], self.sb[rank - 1]);
        let mut idx = vec![0usize; rank - 1];
        let (mut ia, mut ib) = (0usize, 0usize);
        let mut i = 0;
        while i < total {
            for k in 0..inner {
                f(i + k, ia + k * da, ib + k * db);
            }
            i += inner;
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                ia += self.sa[d];
                ib += self.sb[d];
                if idx[d] < self.out[d] {
                    break;
                }
                ia -= self.sa[d] * idx[d];
                ib -= self.sb[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let mut cols = vec![0.0; c * k * k * ho * wo];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[ci * h * w + iy as usize * w..ci * h * w + (iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], dx: &mut [f64], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) {
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[ci * h * w + iy as usize * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

struct BilinearTap {
    idx: [usize; 4],
    wts: [f64; 4],
    // d weight / dx and d weight / dy for each of the four taps
    dx: [f64; 4],
    dy: [f64; 4],
}

fn bilinear_tap(h: usize, w: usize, x: f64, y: f64) -> BilinearTap {
    let x0 = if w >= 2 { (x.floor() as usize).min(w - 2) } else { 0 };
    let y0 = if h >= 2 { (y.floor() as usize).min(h - 2) } else { 0 };
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let (gx, gy) = (if w >= 2 { 1.0 } else { 0.0 }, if h >= 2 { 1.0 } else { 0.0 });
    BilinearTap {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        wts: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        dx: [-(1.0 - fy) * gx, (1.0 - fy) * gx, -fy * gx, fy * gx],
        dy: [-(1.0 - fx) * gy, -fx * gy, (1.0 - fx) * gy, fx * gy],
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant: recorded, but never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, requires_grad: false, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, requires_grad: true, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &[sa, sb]));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = matmul(
            MatRef::new(self.value(a).data(), n, k),
            MatRef::new(self.value(b).data(), k, m),
        );
        let value = Tensor::new([n, m], out)?;
        Ok(self.push(value, &[a, b], Op::MatMul(a, b)))
    }

    fn binary(&mut self, kind: BinaryKind, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &[&sa, &sb]))?;
        let bc = Broadcast::new(&out_shape, &sa, &sb);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match kind {
            BinaryKind::Add => bc.walk(|_, ia, ib| data.push(va[ia] + vb[ib])),
            BinaryKind::Sub => bc.walk(|_, ia, ib| data.push(va[ia] - vb[ib])),
            BinaryKind::Mul => bc.walk(|_, ia, ib| data.push(va[ia] * vb[ib])),
            BinaryKind::Div => bc.walk(|_, ia, ib| data.push(va[ia] / vb[ib])),
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, &[a, b], Op::Binary { kind, a, b, bc }))
    }

    /// Elementwise sum with broadcasting over leading/unit dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, "div", a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.push(value, &[a], Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, &[a], Op::Offset(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, &[a], Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|&v| v < 0.0) {
            return Err(Error::NonFinite("sqrt of a negative value".into()));
        }
        let value = t.map(f64::sqrt);
        Ok(self.push(value, &[a], Op::Sqrt(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        self.push(value, &[a], Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(value, &[a], Op::Clamp { x: a, lo, hi })
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let last = *t.shape().last().ok_or_else(|| Error::shape("softmax", &[t.shape()]))?;
        if last == 0 {
            return Err(Error::shape("softmax", &[t.shape()]));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(last) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(value, &[a], Op::Softmax(a)))
    }

    // ---- convolution ----------------------------------------------------

    /// 2D convolution of a single `C×H×W` image with `O×C×k×k` weights and `O` biases.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let ok = sx.len() == 3
            && sw.len() == 4
            && sb.len() == 1
            && sw[1] == sx[0]
            && sw[2] == sw[3]
            && sb[0] == sw[0]
            && stride >= 1
            && sx[1] + 2 * pad >= sw[2]
            && sx[2] + 2 * pad >= sw[2];
        if !ok {
            return Err(Error::shape("conv2d", &[sx, sw, sb]));
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (o, k) = (sw[0], sw[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let cols = im2col(self.value(x).data(), c, h, wd, k, stride, pad, ho, wo);
        let mut out = Vec::with_capacity(o * ho * wo);
        for &bias in self.value(b).data() {
            out.extend(std::iter::repeat(bias).take(ho * wo));
        }
        gemm_acc(
            MatRef::new(self.value(w).data(), o, c * k * k),
            MatRef::new(&cols, c * k * k, ho * wo),
            &mut out,
        );
        let value = Tensor::new([o, ho, wo], out)?;
        Ok(self.push(value, &[x, w, b], Op::Conv2d { x, w, b, stride, pad }))
    }

    /// 2×2 max-pool with stride 2 over a `C×H×W` map with even extents.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::shape("max_pool2", &[s]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = usize::MAX;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ci * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                        if best == usize::MAX || v[i] > v[best] {
                            best = i;
                        }
                    }
                    out.push(v[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new([c, ho, wo], out)?;
        Ok(self.push(value, &[x], Op::MaxPool2 { x, argmax }))
    }

    // ---- reductions and layout -----------------------------------------

    /// Reduces `axis` away. Max/min route the gradient to the first attaining index.
    pub fn reduce(&mut self, x: Var, kind: ReduceKind, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || (s[axis] == 0 && matches!(kind, ReduceKind::Max | ReduceKind::Min | ReduceKind::Mean)) {
            return Err(Error::shape("reduce", &[&s]));
        }
        let (outer, len, inner) = shape_split(&s, axis);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let mut acc = 0.0;
                        for k in 0..len {
                            acc += v[base + k * inner];
                        }
                        if kind == ReduceKind::Mean {
                            acc /= len as f64;
                        }
                        out.push(acc);
                    }
                    ReduceKind::Max | ReduceKind::Min => {
                        let mut best = 0;
                        for k in 1..len {
                            let (cand, cur) = (v[base + k * inner], v[base + best * inner]);
                            let better = if kind == ReduceKind::Max { cand > cur } else { cand < cur };
                            if better {
                                best = k;
                            }
                        }
                        out.push(v[base + best * inner]);
                        arg.push(best);
                    }
                }
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, &[x], Op::Reduce { x, kind, axis, arg }))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, [n])?;
        self.reduce(flat, ReduceKind::Sum, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, [n])?;
        self.reduce(flat, ReduceKind::Mean, 0)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::shape("reshape", &[t.shape(), &shape]));
        }
        let value = Tensor::new(shape, t.data().to_vec())?;
        Ok(self.push(value, &[x], Op::Reshape(x)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &[&base]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !same {
                let shapes: Vec<&[usize]> = xs.iter().map(|&v| self.shape(v)).collect();
                return Err(Error::shape("concat", &shapes));
            }
            total += s[axis];
        }
        let (outer, _, inner) = shape_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, xs, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(xs.len());
        for &v in xs {
            let mut shape = vec![1];
            shape.extend_from_slice(self.shape(v));
            lifted.push(self.reshape(v, shape)?);
        }
        self.concat(&lifted, 0)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape("narrow", &[&s]));
        }
        let (outer, full, inner) = shape_split(&s, axis);
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, &[x], Op::Narrow { x, axis, start }))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::shape("gather_rows", &[&s]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[0]) {
            return Err(Error::invalid(format!("gather_rows: index {bad} out of range for {} rows", s[0])));
        }
        let row: usize = s[1..].iter().product();
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&v[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, &[x], Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Pairwise squared Euclidean distances between the rows of `a` (n×d) and `b` (m×d).
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("sq_dist", &[sa, sb]));
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let pa = &va[i * d..(i + 1) * d];
            for j in 0..m {
                let pb = &vb[j * d..(j + 1) * d];
                out.push(pa.iter().zip(pb).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        let value = Tensor::new([n, m], out)?;
        Ok(self.push(value, &[a, b], Op::SqDist(a, b)))
    }

    /// Row `p` of the output is the mean of rows `N(p)` of `x`; zero for isolated nodes.
    pub fn graph_mean(&mut self, x: Var, graph: &Arc<Graph>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != graph.num_nodes() {
            return Err(Error::shape("graph_mean", &[&s, &[graph.num_nodes()]]));
        }
        let d = s[1];
        let v = self.value(x).data();
        let mut out = vec![0.0; s[0] * d];
        for p in 0..s[0] {
            let nb = graph.neighbors(p);
            if nb.is_empty() {
                continue;
            }
            let dst = &mut out[p * d..(p + 1) * d];
            for &q in nb {
                for (o, &xv) in dst.iter_mut().zip(&v[q * d..(q + 1) * d]) {
                    *o += xv;
                }
            }
            let inv = 1.0 / nb.len() as f64;
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(value, &[x], Op::GraphMean { x, graph: Arc::clone(graph) }))
    }

    /// Mean ‖ max ‖ std over views of equally shaped `P×C` inputs, giving
    /// `P×3C`. Only views with `valid[k][p]` contribute to row `p`; rows no view
    /// sees are zero. The std is `sqrt(var + eps)` with the population variance.
    pub fn view_stats(&mut self, xs: &[Var], valid: &[Vec<bool>], eps: f64) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("view_stats: no views"))?;
        let shape = self.shape(first).to_vec();
        let ok = shape.len() == 2
            && valid.len() == xs.len()
            && xs.iter().zip(valid).all(|(&v, m)| self.shape(v) == shape.as_slice() && m.len() == shape[0]);
        if !ok {
            let mut shapes: Vec<&[usize]> = xs.iter().map(|&v| self.shape(v)).collect();
            let lens: Vec<usize> = valid.iter().map(Vec::len).collect();
            shapes.push(&lens);
            return Err(Error::shape("view_stats", &shapes));
        }
        let (p, c) = (shape[0], shape[1]);
        let vals: Vec<&[f64]> = xs.iter().map(|&v| self.value(v).data()).collect();
        let mut out = vec![0.0; p * 3 * c];
        let mut argmax = vec![0u32; p * c];
        for i in 0..p {
            let seen: Vec<usize> = (0..xs.len()).filter(|&k| valid[k][i]).collect();
            if seen.is_empty() {
                continue;
            }
            let inv = 1.0 / seen.len() as f64;
            let row = &mut out[i * 3 * c..(i + 1) * 3 * c];
            for ch in 0..c {
                let (mut sum, mut best, mut arg) = (0.0, f64::NEG_INFINITY, seen[0]);
                for &k in &seen {
                    let v = vals[k][i * c + ch];
                    sum += v;
                    if v > best {
                        best = v;
                        arg = k;
                    }
                }
                let mean = sum * inv;
                let var = seen.iter().map(|&k| (vals[k][i * c + ch] - mean).powi(2)).sum::<f64>() * inv;
                row[ch] = mean;
                row[c + ch] = vals[arg][i * c + ch];
                row[2 * c + ch] = (var + eps).sqrt();
                argmax[i * c + ch] = arg as u32;
            }
        }
        let value = Tensor::new([p, 3 * c], out)?;
        Ok(self.push(value, xs, Op::ViewStats { xs: xs.to_vec(), valid: valid.to_vec(), argmax }))
    }

    /// Bilinear lookup of a `C×H×W` map at `P×2` coordinates `(x, y)`, giving `P×C`.
    ///
    /// Coordinates must already lie in `[0, W-1] × [0, H-1]`.
    pub fn bilinear(&mut self, map: Var, coords: Var) -> Result<Var> {
        let (sm, sc) = (self.shape(map), self.shape(coords));
        if sm.len() != 3 || sc.len() != 2 || sc[1] != 2 || sm[1] == 0 || sm[2] == 0 {
            return Err(Error::shape("bilinear", &[sm, sc]));
        }
        let (c, h, w) = (sm[0], sm[1], sm[2]);
        let p = sc[0];
        let (m, xy) = (self.value(map).data(), self.value(coords).data());
        let tol = 1e-9;
        let mut out = Vec::with_capacity(p * c);
        for i in 0..p {
            let (x, y) = (xy[2 * i], xy[2 * i + 1]);
            if !(x >= -tol && x <= (w - 1) as f64 + tol && y >= -tol && y <= (h - 1) as f64 + tol) {
                return Err(Error::invalid(format!(
                    "bilinear: coordinate ({x}, {y}) outside {w}x{h} map"
                )));
            }
            let tap = bilinear_tap(h, w, x.clamp(0.0, (w - 1) as f64), y.clamp(0.0, (h - 1) as f64));
            for ch in 0..c {
                let plane = &m[ch * h * w..(ch + 1) * h * w];
                out.push((0..4).map(|t| tap.wts[t] * plane[tap.idx[t]]).sum());
            }
        }
        let value = Tensor::new([p, c], out)?;
        Ok(self.push(value, &[map, coords], Op::Bilinear { map, coords }))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes;
        let lt = &nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", &[lt.shape()]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape().to_vec(), 1.0));

        fn buf<'g>(grads: &'g mut [Option<Tensor>], nodes: &[Node], v: Var) -> Option<&'g mut [f64]> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(nodes[v.0].value.shape().to_vec()));
            }
            slot.as_mut().map(|t| t.data_mut())
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let g = g.data();
            let out = node.value.data();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (n, k, m) = (sa[0], sa[1], sb[1]);
                    let gm = MatRef::new(g, n, m);
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(ga) = buf(&mut grads, &nodes, *a) {
                        gemm_acc(gm, MatRef::new(bv, k, m).t(), ga);
                    }
                    if let Some(gb) = buf(&mut grads, &nodes, *b) {
                        gemm_acc(MatRef::new(av, n, k).t(), gm, gb);
                    }
                }
                Op::Binary { kind, a, b, bc } => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(ga) = buf(&mut grads, &nodes, *a) {
                        match kind {
                            BinaryKind::Add | BinaryKind::Sub => bc.walk(|j, ia, _| ga[ia] += g[j]),
                            BinaryKind::Mul => bc.walk(|j, ia, ib| ga[ia] += g[j] * vb[ib]),
                            BinaryKind::Div => bc.walk(|j, ia, ib| ga[ia] += g[j] / vb[ib]),
                        }
                    }
                    if let Some(gb) = buf(&mut grads, &nodes, *b) {
                        match kind {
                            BinaryKind::Add => bc.walk(|j, _, ib| gb[ib] += g[j]),
                            BinaryKind::Sub => bc.walk(|j, _, ib| gb[ib] -= g[j]),
                            BinaryKind::Mul => bc.walk(|j, ia, ib| gb[ib] += g[j] * va[ia]),
                            BinaryKind::Div => bc.walk(|j, ia, ib| gb[ib] -= g[j] * va[ia] / (vb[ib] * vb[ib])),
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(ga) = buf(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(g).for_each(|(x, &gj)| *x += c * gj);
                    }
                }
                Op::Offset(a) | Op::Reshape(a) => {
                    if let Some(ga) = buf(&mut grads, &nodes, *a) {
                        ga.iter_mut().zip(g).for_each(|(x, &gj)| *x += gj);
                    }
                }
                Op::Relu(a) => {
                    let va = nodes[a.0].value.data();
                    if let Some(ga) = buf(&mut grads, &nodes, *a) {
                        for j in 0..g.len() {
                            if va[j] > 0.0 {
                                ga[j] += g[j];
                            }
                        }
                    }
                }
                Op::Sqrt(a) => {
                    if let Some(ga) = buf(&mut grads, &nodes, *a) {
                        for j in 0..g.len() {
                            ga[j] += g[j] * 0.5 / out[j];
                        }
                    }
                }
                Op::Square(a) => {
                    let va = nodes[a.0].value.data();
                    if let Some(ga) = buf(&mut grads, &nodes, *a) {
                        for j in 0..g.len() {
                            ga[j] += 2.0 * va[j] * g[j];
                        }
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let vx = nodes[x.0].value.data();
                    if let Some(gx) = buf(&mut grads, &nodes, *x) {
                        for j in 0..g.len() {
                            if vx[j] >= *lo && vx[j] <= *hi {
                                gx[j] += g[j];
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    let last = *node.value.shape().last().unwrap();
                    if let Some(ga) = buf(&mut grads, &nodes, *a) {
                        for ((gr, yr), dr) in g.chunks_exact(last).zip(out.chunks_exact(last)).zip(ga.chunks_exact_mut(last)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..last {
                                dr[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (sx, sw) = (nodes[x.0].value.shape().to_vec(), nodes[w.0].value.shape().to_vec());
                    let (c, h, wd) = (sx[0], sx[1], sx[2]);
                    let (o, k) = (sw[0], sw[2]);
                    let os = node.value.shape();
                    let (ho, wo) = (os[1], os[2]);
                    let gm = MatRef::new(g, o, ho * wo);
                    if nodes[w.0].requires_grad {
                        let cols = im2col(nodes[x.0].value.data(), c, h, wd, k, *stride, *pad, ho, wo);
                        let gw = buf(&mut grads, &nodes, *w).unwrap();
                        gemm_acc(gm, MatRef::new(&cols, c * k * k, ho * wo).t(), gw);
                    }
                    if let Some(gb) = buf(&mut grads, &nodes, *b) {
                        for (oi, row) in g.chunks_exact(ho * wo).enumerate() {
                            gb[oi] += row.iter().sum::<f64>();
                        }
                    }
                    if nodes[x.0].requires_grad {
                        let wv = MatRef::new(nodes[w.0].value.data(), o, c * k * k);
                        let dcols = matmul(wv.t(), gm);
                        let gx = buf(&mut grads, &nodes, *x).unwrap();
                        col2im(&dcols, gx, c, h, wd, k, *stride, *pad, ho, wo);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    if let Some(gx) = buf(&mut grads, &nodes, *x) {
                        for (j, &src) in argmax.iter().enumerate() {
                            gx[src] += g[j];
                        }
                    }
                }
                Op::Reduce { x, kind, axis, arg } => {
                    let s = nodes[x.0].value.shape().to_vec();
                    let (outer, len, inner) = shape_split(&s, *axis);
                    if let Some(gx) = buf(&mut grads, &nodes, *x) {
                        for o in 0..outer {
                            for i in 0..inner {
                                let j = o * inner + i;
                                let base = o * len * inner + i;
                                match kind {
                                    ReduceKind::Sum => (0..len).for_each(|k| gx[base + k * inner] += g[j]),
                                    ReduceKind::Mean => {
                                        let gj = g[j] / len as f64;
                                        (0..len).for_each(|k| gx[base + k * inner] += gj)
                                    }
                                    ReduceKind::Max | ReduceKind::Min => gx[base + arg[j] * inner] += g[j],
                                }
                            }
                        }
                    }
                }
                Op::Concat { xs, axis } => {
                    let s = node.value.shape();
                    let (outer, total, inner) = shape_split(s, *axis);
                    let mut offset = 0;
                    for v in xs {
                        let len = nodes[v.0].value.shape()[*axis];
                        if let Some(gv) = buf(&mut grads, &nodes, *v) {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                                gv[o * len * inner..(o + 1) * len * inner]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, s)| *d += s);
                            }
                        }
                        offset += len;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let s = nodes[x.0].value.shape().to_vec();
                    let (outer, full, inner) = shape_split(&s, *axis);
                    let len = node.value.shape()[*axis];
                    if let Some(gx) = buf(&mut grads, &nodes, *x) {
                        for o in 0..outer {
                            let base = o * full * inner + start * inner;
                            gx[base..base + len * inner]
                                .iter_mut()
                                .zip(&g[o * len * inner..(o + 1) * len * inner])
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                }
                Op::GatherRows { x, idx } => {
                    let row: usize = nodes[x.0].value.shape()[1..].iter().product();
                    if let Some(gx) = buf(&mut grads, &nodes, *x) {
                        for (j, &r) in idx.iter().enumerate() {
                            gx[r * row..(r + 1) * row]
                                .iter_mut()
                                .zip(&g[j * row..(j + 1) * row])
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                }
                Op::SqDist(a, b) => {
                    let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                    let (n, m, d) = (sa[0], sb[0], sa[1]);
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(ga) = buf(&mut grads, &nodes, *a) {
                        for i in 0..n {
                            for j in 0..m {
                                let gij = 2.0 * g[i * m + j];
                                for t in 0..d {
                                    ga[i * d + t] += gij * (va[i * d + t] - vb[j * d + t]);
                                }
                            }
                        }
                    }
                    if let Some(gb) = buf(&mut grads, &nodes, *b) {
                        for i in 0..n {
                            for j in 0..m {
                                let gij = 2.0 * g[i * m + j];
                                for t in 0..d {
                                    gb[j * d + t] -= gij * (va[i * d + t] - vb[j * d + t]);
                                }
                            }
                        }
                    }
                }
                Op::GraphMean { x, graph } => {
                    let d = node.value.shape()[1];
                    if let Some(gx) = buf(&mut grads, &nodes, *x) {
                        for p in 0..graph.num_nodes() {
                            let nb = graph.neighbors(p);
                            if nb.is_empty() {
                                continue;
                            }
                            let inv = 1.0 / nb.len() as f64;
                            let gp = &g[p * d..(p + 1) * d];
                            for &q in nb {
                                gx[q * d..(q + 1) * d]
                                    .iter_mut()
                                    .zip(gp)
                                    .for_each(|(dst, s)| *dst += s * inv);
                            }
                        }
                    }
                }
                Op::ViewStats { xs, valid, argmax } => {
                    let s = nodes[xs[0].0].value.shape();
                    let (p, c) = (s[0], s[1]);
                    for (k, v) in xs.iter().enumerate() {
                        let vk = nodes[v.0].value.data();
                        let Some(gx) = buf(&mut grads, &nodes, *v) else { continue };
                        for i in 0..p {
                            if !valid[k][i] {
                                continue;
                            }
                            let inv = 1.0 / valid.iter().filter(|m| m[i]).count() as f64;
                            let (gr, or) = (&g[i * 3 * c..(i + 1) * 3 * c], &out[i * 3 * c..(i + 1) * 3 * c]);
                            for ch in 0..c {
                                let d = vk[i * c + ch] - or[ch];
                                let mut acc = inv * (gr[ch] + gr[2 * c + ch] * d / or[2 * c + ch]);
                                if argmax[i * c + ch] as usize == k {
                                    acc += gr[c + ch];
                                }
                                gx[i * c + ch] += acc;
                            }
                        }
                    }
                }
                Op::Bilinear { map, coords } => {
                    let sm = nodes[map.0].value.shape().to_vec();
                    let (c, h, w) = (sm[0], sm[1], sm[2]);
                    let xy = nodes[coords.0].value.data();
                    let p = xy.len() / 2;
                    let taps: Vec<BilinearTap> = (0..p)
                        .map(|i| {
                            bilinear_tap(h, w, xy[2 * i].clamp(0.0, (w - 1) as f64), xy[2 * i + 1].clamp(0.0, (h - 1) as f64))
                        })
                        .collect();
                    if nodes[coords.0].requires_grad {
                        let m = nodes[map.0].value.data();
                        let mut gc = vec![0.0; 2 * p];
                        for (i, tap) in taps.iter().enumerate() {
                            let mut at_tap = [0.0; 4];
                            for ch in 0..c {
                                let plane = &m[ch * h * w..(ch + 1) * h * w];
                                let gi = g[i * c + ch];
                                for t in 0..4 {
                                    at_tap[t] += gi * plane[tap.idx[t]];
                                }
                            }
                            for t in 0..4 {
                                gc[2 * i] += tap.dx[t] * at_tap[t];
                                gc[2 * i + 1] += tap.dy[t] * at_tap[t];
                            }
                        }
                        let dst = buf(&mut grads, &nodes, *coords).unwrap();
                        dst.iter_mut().zip(&gc).for_each(|(d, s)| *d += s);
                    }
                    if let Some(gm) = buf(&mut grads, &nodes, *map) {
                        for (i, tap) in taps.iter().enumerate() {
                            for ch in 0..c {
                                let gi = g[i * c + ch];
                                for t in 0..4 {
                                    gm[ch * h * w + tap.idx[t]] += gi * tap.wts[t];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}
