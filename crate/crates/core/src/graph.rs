//! Reverse-mode autodiff over a flat op tape.
//!
//! Ops evaluate eagerly as they are recorded; `backward` replays the
//! tape in reverse. All node values are 2-D row-major matrices and all
//! loops are sequential, so a fixed op sequence is bit-reproducible.
//!
//! Non-finite values do not panic mid-graph: the first offending op
//! poisons the graph and the error surfaces from `scalar_value` /
//! `backward` with the op name attached.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    AddScalar(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    TakePerRow(NodeId, Vec<u32>),
    RowMean(NodeId),
    RowScale(NodeId, NodeId),
    AddRowVec(NodeId, NodeId),
    MulRowVec(NodeId, NodeId),
    RsqrtEps(NodeId),
    Silu(NodeId),
    Abs(NodeId),
    Sum(NodeId),
    Embed { table: NodeId, ids: Vec<u32> },
    Rope { input: NodeId, positions: Vec<u32>, theta: f32, head_dim: usize },
    DepthwiseConv1d { input: NodeId, kernel: NodeId },
    StopGrad(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::TakePerRow(..) => "take_per_row",
            Op::RowMean(..) => "row_mean",
            Op::RowScale(..) => "row_scale",
            Op::AddRowVec(..) => "add_row_vec",
            Op::MulRowVec(..) => "mul_row_vec",
            Op::RsqrtEps(..) => "rsqrt_eps",
            Op::Silu(..) => "silu",
            Op::Abs(..) => "abs",
            Op::Sum(..) => "sum",
            Op::Embed { .. } => "embed",
            Op::Rope { .. } => "rope",
            Op::DepthwiseConv1d { .. } => "depthwise_conv1d",
            Op::StopGrad(..) => "stop_grad",
        }
    }
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    poisoned: Option<&'static str>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t.rows(), t.cols(), t.into_data())
    }

    /// Trainable input; `grad` covers it after `backward`.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t.rows(), t.cols(), t.into_data())
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.idx()];
        (n.rows, n.cols)
    }

    pub fn data(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.idx()].data
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.idx()];
        Tensor::new(n.rows, n.cols, n.data.clone())
    }

    /// First non-finite forward op, if any.
    pub fn forward_error(&self) -> Option<CoreError> {
        self.poisoned.map(|op| CoreError::NonFiniteForward { op })
    }

    /// Value of a `[1, 1]` node, failing if the graph is poisoned.
    pub fn scalar_value(&self, id: NodeId) -> Result<f32, CoreError> {
        if let Some(e) = self.forward_error() {
            return Err(e);
        }
        let n = &self.nodes[id.idx()];
        assert!(n.rows == 1 && n.cols == 1, "expected scalar, got ({}, {})", n.rows, n.cols);
        Ok(n.data[0])
    }

    /// Gradient of the last `backward` with respect to `id`; zero for
    /// nodes the loss never touched.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.idx()];
        match &n.grad {
            Some(g) => Tensor::new(n.rows, n.cols, g.clone()),
            None => Tensor::zeros(n.rows, n.cols),
        }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, data: Vec<f32>) -> NodeId {
        debug_assert_eq!(rows * cols, data.len());
        if self.poisoned.is_none() && !data.iter().all(|v| v.is_finite()) {
            self.poisoned = Some(op.name());
        }
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, rows, cols, data, grad: None });
        id
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.idx()]
    }

    // ---- op constructors -------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.assert_same_shape(a, b, "add");
        let data = zip_map(&self.node(a).data, &self.node(b).data, |x, y| x + y);
        self.push(Op::Add(a, b), r, c, data)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.assert_same_shape(a, b, "sub");
        let data = zip_map(&self.node(a).data, &self.node(b).data, |x, y| x - y);
        self.push(Op::Sub(a, b), r, c, data)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.assert_same_shape(a, b, "mul");
        let data = zip_map(&self.node(a).data, &self.node(b).data, |x, y| x * y);
        self.push(Op::Mul(a, b), r, c, data)
    }

    pub fn scale(&mut self, a: NodeId, k: f32) -> NodeId {
        let (r, c) = self.shape(a);
        let data = self.node(a).data.iter().map(|x| x * k).collect();
        self.push(Op::Scale(a, k), r, c, data)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f32) -> NodeId {
        let (r, c) = self.shape(a);
        let data = self.node(a).data.iter().map(|x| x + k).collect();
        self.push(Op::AddScalar(a), r, c, data)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul: inner dims {ka} vs {kb}");
        let mut out = vec![0.0f32; m * n];
        {
            let ad = &self.node(a).data;
            let bd = &self.node(b).data;
            for i in 0..m {
                for k in 0..ka {
                    let aik = ad[i * ka + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bd[k * n..(k + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aik * brow[j];
                    }
                }
            }
        }
        self.push(Op::Matmul(a, b), m, n, out)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let ad = &self.node(a).data;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ad[i * c + j];
            }
        }
        self.push(Op::Transpose(a), c, r, out)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice_cols out of range");
        let ad = &self.node(a).data;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&ad[i * c + start..i * c + start + len]);
        }
        self.push(Op::SliceCols(a, start, len), r, len, out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let r = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        for &p in parts {
            assert_eq!(self.shape(p).0, r, "concat_cols: row mismatch");
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let (_, c) = self.shape(p);
                out.extend_from_slice(&self.node(p).data[i * c..(i + 1) * c]);
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), r, total, out)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let c = self.shape(parts[0]).1;
        let total: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut out = Vec::with_capacity(total * c);
        for &p in parts {
            assert_eq!(self.shape(p).1, c, "concat_rows: col mismatch");
            out.extend_from_slice(&self.node(p).data);
        }
        self.push(Op::ConcatRows(parts.to_vec()), total, c, out)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(c > 0, "softmax_rows: empty rows");
        let ad = &self.node(a).data;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &ad[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for j in 0..c {
                let e = math::exp(row[j] - m);
                out[i * c + j] = e;
                z += e;
            }
            let inv = 1.0 / z;
            for j in 0..c {
                out[i * c + j] *= inv;
            }
        }
        self.push(Op::SoftmaxRows(a), r, c, out)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(c > 0, "log_softmax_rows: empty rows");
        let ad = &self.node(a).data;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let row = &ad[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for j in 0..c {
                z += math::exp(row[j] - m);
            }
            let lz = math::ln(z) + m;
            for j in 0..c {
                out[i * c + j] = row[j] - lz;
            }
        }
        self.push(Op::LogSoftmaxRows(a), r, c, out)
    }

    /// `y[i, 0] = a[i, idx[i]]`.
    pub fn take_per_row(&mut self, a: NodeId, idx: &[u32]) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(idx.len(), r, "take_per_row: index count != rows");
        let ad = &self.node(a).data;
        let mut out = Vec::with_capacity(r);
        for (i, &j) in idx.iter().enumerate() {
            assert!((j as usize) < c, "take_per_row: index {j} out of {c}");
            out.push(ad[i * c + j as usize]);
        }
        self.push(Op::TakePerRow(a, idx.to_vec()), r, 1, out)
    }

    pub fn row_mean(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(c > 0);
        let ad = &self.node(a).data;
        let inv = 1.0 / c as f32;
        let out = (0..r)
            .map(|i| ad[i * c..(i + 1) * c].iter().sum::<f32>() * inv)
            .collect();
        self.push(Op::RowMean(a), r, 1, out)
    }

    /// `y[i, j] = a[i, j] * s[i, 0]`.
    pub fn row_scale(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(s), (r, 1), "row_scale: scale must be [rows, 1]");
        let ad = &self.node(a).data;
        let sd = &self.node(s).data;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = ad[i * c + j] * sd[i];
            }
        }
        self.push(Op::RowScale(a, s), r, c, out)
    }

    /// `y[i, j] = a[i, j] + v[0, j]`.
    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(v), (1, c), "add_row_vec: vector must be [1, cols]");
        let ad = &self.node(a).data;
        let vd = &self.node(v).data;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = ad[i * c + j] + vd[j];
            }
        }
        self.push(Op::AddRowVec(a, v), r, c, out)
    }

    /// `y[i, j] = a[i, j] * v[0, j]`.
    pub fn mul_row_vec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(v), (1, c), "mul_row_vec: vector must be [1, cols]");
        let ad = &self.node(a).data;
        let vd = &self.node(v).data;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = ad[i * c + j] * vd[j];
            }
        }
        self.push(Op::MulRowVec(a, v), r, c, out)
    }

    /// `y = 1 / sqrt(x + eps)`.
    pub fn rsqrt_eps(&mut self, a: NodeId, eps: f32) -> NodeId {
        let (r, c) = self.shape(a);
        let data = self.node(a).data.iter().map(|&x| 1.0 / math::sqrt(x + eps)).collect();
        self.push(Op::RsqrtEps(a), r, c, data)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let data = self.node(a).data.iter().map(|&x| x * math::sigmoid(x)).collect();
        self.push(Op::Silu(a), r, c, data)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let data = self.node(a).data.iter().map(|x| x.abs()).collect();
        self.push(Op::Abs(a), r, c, data)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f32 = self.node(a).data.iter().sum();
        self.push(Op::Sum(a), 1, 1, vec![total])
    }

    /// Gather rows of `table` by id.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let (v, d) = self.shape(table);
        let td = &self.node(table).data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!((id as usize) < v, "embed: id {id} out of table size {v}");
            out.extend_from_slice(&td[id as usize * d..(id as usize + 1) * d]);
        }
        self.push(Op::Embed { table, ids: ids.to_vec() }, ids.len(), d, out)
    }

    /// Rotate adjacent value pairs within each `head_dim` block by
    /// position-dependent angles. Input is `[len, n_heads * head_dim]`.
    pub fn rope(&mut self, input: NodeId, positions: &[u32], theta: f32, head_dim: usize) -> NodeId {
        let (r, c) = self.shape(input);
        assert_eq!(positions.len(), r, "rope: positions != rows");
        assert!(head_dim % 2 == 0, "rope: head_dim must be even");
        assert!(c % head_dim == 0, "rope: cols not a multiple of head_dim");
        let ad = &self.node(input).data;
        let mut out = vec![0.0f32; r * c];
        rope_apply(ad, &mut out, r, c, positions, theta, head_dim, false);
        self.push(
            Op::Rope { input, positions: positions.to_vec(), theta, head_dim },
            r,
            c,
            out,
        )
    }

    /// Per-channel 1-D convolution with zero same-padding.
    /// Input `[len, channels]`, kernel `[width, channels]`.
    pub fn depthwise_conv1d(&mut self, input: NodeId, kernel: NodeId) -> NodeId {
        let (t, c) = self.shape(input);
        let (k, ck) = self.shape(kernel);
        assert_eq!(c, ck, "depthwise_conv1d: channel mismatch");
        assert!(k % 2 == 1, "depthwise_conv1d: kernel width must be odd");
        let pad = k / 2;
        let xd = &self.node(input).data;
        let wd = &self.node(kernel).data;
        let mut out = vec![0.0f32; t * c];
        for ti in 0..t {
            for ki in 0..k {
                let src = ti as isize + ki as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xrow = &xd[src as usize * c..(src as usize + 1) * c];
                let wrow = &wd[ki * c..(ki + 1) * c];
                let orow = &mut out[ti * c..(ti + 1) * c];
                for ch in 0..c {
                    orow[ch] += xrow[ch] * wrow[ch];
                }
            }
        }
        self.push(Op::DepthwiseConv1d { input, kernel }, t, c, out)
    }

    /// Identity forward, zero backward.
    pub fn stop_grad(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let data = self.node(a).data.clone();
        self.push(Op::StopGrad(a), r, c, data)
    }

    // ---- composites ------------------------------------------------------

    /// Sum of squared entries, as a scalar node.
    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let sq = self.mul(a, a);
        self.sum(sq)
    }

    /// Mean of all entries, as a scalar node.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, 1.0 / (r * c) as f32)
    }

    /// Straight-through copy: forward takes `quantized`, backward routes
    /// entirely into `pre_quant`.
    pub fn straight_through(&mut self, quantized: NodeId, pre_quant: NodeId) -> NodeId {
        let diff = self.sub(quantized, pre_quant);
        let frozen = self.stop_grad(diff);
        self.add(pre_quant, frozen)
    }

    // ---- backward --------------------------------------------------------

    /// Accumulate the gradient of `loss` into every node's grad buffer.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), CoreError> {
        if let Some(e) = self.forward_error() {
            return Err(e);
        }
        {
            let n = self.node(loss);
            assert!(n.rows == 1 && n.cols == 1, "backward: loss must be scalar");
        }
        for n in self.nodes.iter_mut() {
            n.grad = Some(vec![0.0f32; n.rows * n.cols]);
        }
        self.nodes[loss.idx()].grad.as_mut().unwrap()[0] = 1.0;

        for idx in (0..=loss.idx()).rev() {
            let op = self.nodes[idx].op.clone();
            let name = op.name();
            self.backprop_node(idx, &op);
            if let Some(bad) = self.first_nonfinite_grad_of_inputs(&op) {
                let _ = bad;
                return Err(CoreError::NonFiniteBackward { op: name });
            }
        }
        Ok(())
    }

    fn first_nonfinite_grad_of_inputs(&self, op: &Op) -> Option<NodeId> {
        let check = |id: NodeId| -> Option<NodeId> {
            let g = self.nodes[id.idx()].grad.as_ref()?;
            if g.iter().all(|v| v.is_finite()) {
                None
            } else {
                Some(id)
            }
        };
        match op {
            Op::Leaf => None,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => {
                check(*a).or_else(|| check(*b))
            }
            Op::RowScale(a, s) => check(*a).or_else(|| check(*s)),
            Op::AddRowVec(a, v) | Op::MulRowVec(a, v) => check(*a).or_else(|| check(*v)),
            Op::DepthwiseConv1d { input, kernel } => check(*input).or_else(|| check(*kernel)),
            Op::ConcatCols(ps) | Op::ConcatRows(ps) => ps.iter().copied().find_map(check),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::SliceCols(a, _, _)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::TakePerRow(a, _)
            | Op::RowMean(a)
            | Op::RsqrtEps(a)
            | Op::Silu(a)
            | Op::Abs(a)
            | Op::Sum(a)
            | Op::StopGrad(a) => check(*a),
            Op::Embed { table, .. } => check(*table),
            Op::Rope { input, .. } => check(*input),
        }
    }

    fn backprop_node(&mut self, idx: usize, op: &Op) {
        let gy = self.nodes[idx].grad.as_ref().unwrap().clone();
        if gy.iter().all(|&v| v == 0.0) {
            return;
        }
        let (rows, cols) = (self.nodes[idx].rows, self.nodes[idx].cols);
        match op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::Add(a, b) => {
                self.accum(*a, &gy);
                self.accum(*b, &gy);
            }
            Op::Sub(a, b) => {
                self.accum(*a, &gy);
                let neg: Vec<f32> = gy.iter().map(|v| -v).collect();
                self.accum(*b, &neg);
            }
            Op::Mul(a, b) => {
                let bd = self.nodes[b.idx()].data.clone();
                let ad = self.nodes[a.idx()].data.clone();
                let ga: Vec<f32> = zip_map(&gy, &bd, |g, x| g * x);
                let gb: Vec<f32> = zip_map(&gy, &ad, |g, x| g * x);
                self.accum(*a, &ga);
                self.accum(*b, &gb);
            }
            Op::Scale(a, k) => {
                let ga: Vec<f32> = gy.iter().map(|g| g * k).collect();
                self.accum(*a, &ga);
            }
            Op::AddScalar(a) => self.accum(*a, &gy),
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.idx()].rows, self.nodes[a.idx()].cols);
                let n = self.nodes[b.idx()].cols;
                let ad = self.nodes[a.idx()].data.clone();
                let bd = self.nodes[b.idx()].data.clone();
                // da = gy . b^T
                let mut ga = vec![0.0f32; m * k];
                for i in 0..m {
                    for kk in 0..k {
                        let mut acc = 0.0f32;
                        let grow = &gy[i * n..(i + 1) * n];
                        let brow = &bd[kk * n..(kk + 1) * n];
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        ga[i * k + kk] = acc;
                    }
                }
                // db = a^T . gy
                let mut gb = vec![0.0f32; k * n];
                for i in 0..m {
                    let grow = &gy[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let aik = ad[i * k + kk];
                        if aik == 0.0 {
                            continue;
                        }
                        let brow = &mut gb[kk * n..(kk + 1) * n];
                        for j in 0..n {
                            brow[j] += aik * grow[j];
                        }
                    }
                }
                self.accum(*a, &ga);
                self.accum(*b, &gb);
            }
            Op::Transpose(a) => {
                let (ar, ac) = (self.nodes[a.idx()].rows, self.nodes[a.idx()].cols);
                let mut ga = vec![0.0f32; ar * ac];
                for i in 0..rows {
                    for j in 0..cols {
                        ga[j * ac + i] = gy[i * cols + j];
                    }
                }
                self.accum(*a, &ga);
            }
            Op::SliceCols(a, start, len) => {
                let ac = self.nodes[a.idx()].cols;
                let ar = self.nodes[a.idx()].rows;
                let mut ga = vec![0.0f32; ar * ac];
                for i in 0..rows {
                    for j in 0..*len {
                        ga[i * ac + start + j] = gy[i * len + j];
                    }
                }
                self.accum(*a, &ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0usize;
                for &p in parts {
                    let pc = self.nodes[p.idx()].cols;
                    let pr = self.nodes[p.idx()].rows;
                    let mut gp = vec![0.0f32; pr * pc];
                    for i in 0..rows {
                        for j in 0..pc {
                            gp[i * pc + j] = gy[i * cols + offset + j];
                        }
                    }
                    self.accum(p, &gp);
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0usize;
                for &p in parts {
                    let pr = self.nodes[p.idx()].rows;
                    let gp = gy[offset * cols..(offset + pr) * cols].to_vec();
                    self.accum(p, &gp);
                    offset += pr;
                }
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[idx].data.clone();
                let mut ga = vec![0.0f32; rows * cols];
                for i in 0..rows {
                    let yrow = &y[i * cols..(i + 1) * cols];
                    let grow = &gy[i * cols..(i + 1) * cols];
                    let dot: f32 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for j in 0..cols {
                        ga[i * cols + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accum(*a, &ga);
            }
            Op::LogSoftmaxRows(a) => {
                let y = self.nodes[idx].data.clone();
                let mut ga = vec![0.0f32; rows * cols];
                for i in 0..rows {
                    let yrow = &y[i * cols..(i + 1) * cols];
                    let grow = &gy[i * cols..(i + 1) * cols];
                    let gsum: f32 = grow.iter().sum();
                    for j in 0..cols {
                        ga[i * cols + j] = grow[j] - math::exp(yrow[j]) * gsum;
                    }
                }
                self.accum(*a, &ga);
            }
            Op::TakePerRow(a, ids) => {
                let ac = self.nodes[a.idx()].cols;
                let ar = self.nodes[a.idx()].rows;
                let mut ga = vec![0.0f32; ar * ac];
                for (i, &j) in ids.iter().enumerate() {
                    ga[i * ac + j as usize] = gy[i];
                }
                self.accum(*a, &ga);
            }
            Op::RowMean(a) => {
                let ac = self.nodes[a.idx()].cols;
                let ar = self.nodes[a.idx()].rows;
                let inv = 1.0 / ac as f32;
                let mut ga = vec![0.0f32; ar * ac];
                for i in 0..ar {
                    let g = gy[i] * inv;
                    for j in 0..ac {
                        ga[i * ac + j] = g;
                    }
                }
                self.accum(*a, &ga);
            }
            Op::RowScale(a, s) => {
                let ad = self.nodes[a.idx()].data.clone();
                let sd = self.nodes[s.idx()].data.clone();
                let mut ga = vec![0.0f32; rows * cols];
                let mut gs = vec![0.0f32; rows];
                for i in 0..rows {
                    let mut acc = 0.0f32;
                    for j in 0..cols {
                        ga[i * cols + j] = gy[i * cols + j] * sd[i];
                        acc += gy[i * cols + j] * ad[i * cols + j];
                    }
                    gs[i] = acc;
                }
                self.accum(*a, &ga);
                self.accum(*s, &gs);
            }
            Op::AddRowVec(a, v) => {
                self.accum(*a, &gy);
                let mut gv = vec![0.0f32; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        gv[j] += gy[i * cols + j];
                    }
                }
                self.accum(*v, &gv);
            }
            Op::MulRowVec(a, v) => {
                let ad = self.nodes[a.idx()].data.clone();
                let vd = self.nodes[v.idx()].data.clone();
                let mut ga = vec![0.0f32; rows * cols];
                let mut gv = vec![0.0f32; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        ga[i * cols + j] = gy[i * cols + j] * vd[j];
                        gv[j] += gy[i * cols + j] * ad[i * cols + j];
                    }
                }
                self.accum(*a, &ga);
                self.accum(*v, &gv);
            }
            Op::RsqrtEps(a) => {
                let y = self.nodes[idx].data.clone();
                let ga: Vec<f32> = gy
                    .iter()
                    .zip(&y)
                    .map(|(g, y)| g * (-0.5) * y * y * y)
                    .collect();
                self.accum(*a, &ga);
            }
            Op::Silu(a) => {
                let xd = self.nodes[a.idx()].data.clone();
                let ga: Vec<f32> = gy
                    .iter()
                    .zip(&xd)
                    .map(|(g, &x)| {
                        let s = math::sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                self.accum(*a, &ga);
            }
            Op::Abs(a) => {
                let xd = self.nodes[a.idx()].data.clone();
                let ga: Vec<f32> = gy
                    .iter()
                    .zip(&xd)
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -*g } else { 0.0 })
                    .collect();
                self.accum(*a, &ga);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.idx()].rows * self.nodes[a.idx()].cols;
                let ga = vec![gy[0]; n];
                self.accum(*a, &ga);
            }
            Op::Embed { table, ids } => {
                let (tv, td) = (self.nodes[table.idx()].rows, self.nodes[table.idx()].cols);
                let mut gt = vec![0.0f32; tv * td];
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id as usize * td..(id as usize + 1) * td];
                    let src = &gy[i * td..(i + 1) * td];
                    for j in 0..td {
                        dst[j] += src[j];
                    }
                }
                self.accum(*table, &gt);
            }
            Op::Rope { input, positions, theta, head_dim } => {
                let mut ga = vec![0.0f32; rows * cols];
                rope_apply(&gy, &mut ga, rows, cols, positions, *theta, *head_dim, true);
                self.accum(*input, &ga);
            }
            Op::DepthwiseConv1d { input, kernel } => {
                let (t, c) = (self.nodes[input.idx()].rows, self.nodes[input.idx()].cols);
                let k = self.nodes[kernel.idx()].rows;
                let pad = k / 2;
                let xd = self.nodes[input.idx()].data.clone();
                let wd = self.nodes[kernel.idx()].data.clone();
                let mut gx = vec![0.0f32; t * c];
                let mut gw = vec![0.0f32; k * c];
                for ti in 0..t {
                    let grow = &gy[ti * c..(ti + 1) * c];
                    for ki in 0..k {
                        let src = ti as isize + ki as isize - pad as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let s = src as usize;
                        for ch in 0..c {
                            gx[s * c + ch] += grow[ch] * wd[ki * c + ch];
                            gw[ki * c + ch] += grow[ch] * xd[s * c + ch];
                        }
                    }
                }
                self.accum(*input, &gx);
                self.accum(*kernel, &gw);
            }
        }
    }

    fn accum(&mut self, id: NodeId, g: &[f32]) {
        let dst = self.nodes[id.idx()].grad.as_mut().unwrap();
        debug_assert_eq!(dst.len(), g.len());
        for (d, s) in dst.iter_mut().zip(g) {
            *d += s;
        }
    }

    fn assert_same_shape(&self, a: NodeId, b: NodeId, op: &str) -> (usize, usize) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert_eq!(sa, sb, "{op}: shape mismatch {sa:?} vs {sb:?}");
        sa
    }
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Shared forward/backward rotation kernel. `inverse` rotates by the
/// negated angles, which is the exact adjoint of the forward rotation.
#[allow(clippy::too_many_arguments)]
fn rope_apply(
    src: &[f32],
    dst: &mut [f32],
    rows: usize,
    cols: usize,
    positions: &[u32],
    theta: f32,
    head_dim: usize,
    inverse: bool,
) {
    let half = head_dim / 2;
    let n_heads = cols / head_dim;
    for i in 0..rows {
        let pos = positions[i] as f32;
        for h in 0..n_heads {
            let base = i * cols + h * head_dim;
            for p in 0..half {
                let freq = math::powf(theta, -2.0 * p as f32 / head_dim as f32);
                let mut angle = pos * freq;
                if inverse {
                    angle = -angle;
                }
                let (s, c) = (math::sin(angle), math::cos(angle));
                let x1 = src[base + 2 * p];
                let x2 = src[base + 2 * p + 1];
                dst[base + 2 * p] = x1 * c - x2 * s;
                dst[base + 2 * p + 1] = x1 * s + x2 * c;
            }
        }
    }
}
