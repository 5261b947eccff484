use std::borrow::Cow;
use std::collections::BTreeMap;

use super::gemm::{gemm, MatMut, MatRef};
use super::params::{GradBuf, Gradients, ParamKey};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A contiguous run of rows `[start, start + len)` in a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Segment { start, len }
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Builds back-to-back segments from a list of lengths.
pub fn pack_segments(lens: impl IntoIterator<Item = usize>) -> Vec<Segment> {
    let mut start = 0;
    lens.into_iter()
        .map(|len| {
            let s = Segment { start, len };
            start += len;
            s
        })
        .collect()
}

enum Op {
    Leaf,
    Param(ParamKey),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Gather { table: Var, ids: Vec<usize> },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    SegSoftmax { x: Var, segs: Vec<Segment> },
    SegWeightedSum { w: Var, v: Var, segs: Vec<Segment> },
    SegAttention {
        q: Var,
        k: Var,
        v: Var,
        segs: Vec<Segment>,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    op: Op,
    needs_grad: bool,
}

impl Node<'_> {
    fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

/// Record of one forward pass. Nodes are appended in execution order, so
/// index order is a topological order and backward walks it in reverse.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f64>>>,
    done: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn head_view(data: &[f64], offset: usize, rows: usize, cols: usize, ld: usize) -> MatRef<'_> {
    MatRef {
        data,
        offset,
        rows,
        cols,
        rs: ld,
        cs: 1,
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<'p> {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(data),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Cow<'p, [f64]>, op: Op, ng: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad: ng,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- leaves -------------------------------------------------------

    /// Owned constant; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, Cow::Owned(t.into_data()), Op::Leaf, false)
    }

    /// Owned leaf that receives a gradient when `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push_leaf(shape, Cow::Owned(t.into_data()), Op::Leaf, ng)
    }

    /// Borrowed constant (frozen parameter).
    pub fn frozen(&mut self, t: &'p Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, false)
    }

    /// Borrowed trainable parameter; its gradient is reported under `key`.
    pub fn param(&mut self, t: &'p Tensor, key: ParamKey) -> Var {
        self.push_leaf(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Param(key),
            true,
        )
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let shape = n.shape.clone();
        let data = n.value.to_vec();
        self.push_leaf(shape, Cow::Owned(data), Op::Leaf, false)
    }

    // ---- accessors ----------------------------------------------------

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Gradient of the last backward pass w.r.t. `v`. Gradient-tracking
    /// nodes that the loss does not depend on report zeros.
    pub fn grad(&self, v: Var) -> Option<Vec<f64>> {
        if !self.done || !self.ng(v) {
            return None;
        }
        Some(
            self.grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| vec![0.0; self.node(v).value.len()]),
        )
    }

    // ---- shape helpers -----------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.node(a).shape, &self.node(b).shape);
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = &self.node(v).shape;
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s.clone(),
                rhs: vec![0, 0],
            });
        }
        Ok((s[0], s[1]))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let n = self.node(x);
        let shape = n.shape.clone();
        let data = n.value.iter().map(|&v| f(v)).collect();
        let ng = n.needs_grad;
        self.push(name, shape, data, op, ng)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (na, nb) = (self.node(a), self.node(b));
        let data = na.value.iter().zip(nb.value.iter()).map(|(&x, &y)| f(x, y)).collect();
        let shape = na.shape.clone();
        let ng = na.needs_grad || nb.needs_grad;
        self.push(name, shape, data, op, ng)
    }

    // ---- elementwise --------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * s, Op::Scale(x, s))
    }

    /// Multiplies every element of `x` by the scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.node(s).value.len() != 1 {
            return Err(Error::NotScalar(self.node(s).shape.clone()));
        }
        let sv = self.node(s).value[0];
        let ng = self.ng(x) || self.ng(s);
        let n = self.node(x);
        let shape = n.shape.clone();
        let data = n.value.iter().map(|v| v * sv).collect();
        self.push("scale_by", shape, data, Op::ScaleBy(x, s), ng)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(
            "softplus",
            x,
            |v| v.max(0.0) + (-v.abs()).exp().ln_1p(),
            Op::Softplus(x),
        )
    }

    /// Adds a bias vector of length `cols` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (nx, nb) = (self.node(x), self.node(b));
        let c = nx.cols();
        if nb.value.len() != c {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: nx.shape.clone(),
                rhs: nb.shape.clone(),
            });
        }
        let mut data = nx.value.to_vec();
        for row in data.chunks_mut(c.max(1)) {
            add_into(row, &nb.value);
        }
        let shape = nx.shape.clone();
        let ng = nx.needs_grad || nb.needs_grad;
        self.push("add_row", shape, data, Op::AddRow(x, b), ng)
    }

    // ---- linear algebra ----------------------------------------------

    fn matmul_general(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims2("matmul", a)?;
        let (br, bc) = self.dims2("matmul", b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let (na, nb) = (self.node(a), self.node(b));
            let av = MatRef::rm(&na.value, 0, ar, ac, ac);
            let bv = MatRef::rm(&nb.value, 0, br, bc, bc);
            gemm(
                1.0,
                if ta { av.t() } else { av },
                if tb { bv.t() } else { bv },
                0.0,
                MatMut::rm(&mut out, 0, n),
            );
        }
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, ta, tb }, ng)
    }

    /// `a · b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, false)
    }

    /// `a · bᵀ` for 2-D operands.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, true)
    }

    /// `x · w + b` with `w` of shape `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", x)?;
        let n = self.node(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = n.value[i * c + j];
            }
        }
        let ng = n.needs_grad;
        self.push("transpose", vec![c, r], out, Op::Transpose(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.node(x);
        if shape.iter().product::<usize>() != n.value.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: n.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = n.value.to_vec();
        let ng = n.needs_grad;
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x), ng)
    }

    // ---- normalization & softmax -------------------------------------

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (nx, ngn, nb) = (self.node(x), self.node(gain), self.node(bias));
        let c = nx.cols();
        if ngn.value.len() != c || nb.value.len() != c {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: nx.shape.clone(),
                rhs: ngn.shape.clone(),
            });
        }
        let rows = nx.rows();
        let track = nx.needs_grad || ngn.needs_grad || nb.needs_grad;
        let mut out = vec![0.0; rows * c];
        let mut xhat = if track { vec![0.0; rows * c] } else { Vec::new() };
        let mut inv_std = if track { vec![0.0; rows] } else { Vec::new() };
        for r in 0..rows {
            let row = &nx.value[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                let h = (row[j] - mean) * inv;
                out[r * c + j] = h * ngn.value[j] + nb.value[j];
                if track {
                    xhat[r * c + j] = h;
                }
            }
            if track {
                inv_std[r] = inv;
            }
        }
        let shape = nx.shape.clone();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            track,
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x);
        if n.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax input"));
        }
        let c = n.cols();
        let mut out = vec![0.0; n.value.len()];
        for (src, dst) in n.value.chunks(c.max(1)).zip(out.chunks_mut(c.max(1))) {
            super::softmax_into(src, dst);
        }
        let shape = n.shape.clone();
        let ng = n.needs_grad;
        self.push("softmax", shape, out, Op::Softmax(x), ng)
    }

    /// Softmax along `axis` of a 1-D or 2-D tensor.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let rank = self.shape(x).len().max(1);
        if axis >= rank {
            return Err(Error::invalid(format!("axis {axis} out of range for rank {rank}")));
        }
        if axis == rank - 1 {
            return self.softmax(x);
        }
        let t = self.transpose(x)?;
        let s = self.softmax(t)?;
        self.transpose(s)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x);
        if n.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log_softmax input"));
        }
        let c = n.cols();
        let mut out = n.value.to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let lse = super::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = n.shape.clone();
        let ng = n.needs_grad;
        self.push("log_softmax", shape, out, Op::LogSoftmax(x), ng)
    }

    // ---- reductions ---------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x);
        let s = n.value.iter().sum();
        let ng = n.needs_grad;
        self.push("sum", vec![], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x);
        if n.value.is_empty() {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let s = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let ng = n.needs_grad;
        self.push("mean", vec![], vec![s], Op::Mean(x), ng)
    }

    // ---- indexing -----------------------------------------------------

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("gather", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange { id: bad, vocab: v });
        }
        let n = self.node(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&n.value[i * d..(i + 1) * d]);
        }
        let ng = n.needs_grad;
        self.push(
            "gather",
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_rows", x)?;
        if start + len > r {
            return Err(Error::invalid(format!("rows {start}..{} out of {r}", start + len)));
        }
        let n = self.node(x);
        let data = n.value[start * c..(start + len) * c].to_vec();
        let ng = n.needs_grad;
        self.push("slice_rows", vec![len, c], data, Op::SliceRows { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat of nothing"));
        };
        let (_, c) = self.dims2("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut ng = false;
        for &p in parts {
            let (r, pc) = self.dims2("concat_rows", p)?;
            if pc != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![r, pc],
                    rhs: vec![r, c],
                });
            }
            rows += r;
            data.extend_from_slice(&self.node(p).value);
            ng |= self.ng(p);
        }
        self.push("concat_rows", vec![rows, c], data, Op::ConcatRows(parts.to_vec()), ng)
    }

    // ---- segmented ops over packed sequences -------------------------

    fn check_segments(&self, op: &'static str, rows: usize, segs: &[Segment]) -> Result<()> {
        if segs.iter().any(|s| s.start + s.len > rows) {
            return Err(Error::invalid(format!("{op}: segment exceeds {rows} rows")));
        }
        Ok(())
    }

    /// Softmax of a score vector within each segment. Rows outside every
    /// segment get weight 0.
    pub fn segment_softmax(&mut self, x: Var, segs: &[Segment]) -> Result<Var> {
        let n = self.node(x);
        if n.cols() != 1 && n.shape.len() > 1 {
            return Err(Error::invalid("segment_softmax expects a column of scores"));
        }
        let len = n.value.len();
        self.check_segments("segment_softmax", len, segs)?;
        let mut out = vec![0.0; len];
        for s in segs {
            super::softmax_into(&n.value[s.range()], &mut out[s.range()]);
        }
        let shape = n.shape.clone();
        let ng = n.needs_grad;
        self.push(
            "segment_softmax",
            shape,
            out,
            Op::SegSoftmax {
                x,
                segs: segs.to_vec(),
            },
            ng,
        )
    }

    /// `out[s] = Σ_{t∈s} w[t] · v[t]`; an empty segment yields a zero row.
    pub fn segment_weighted_sum(&mut self, w: Var, v: Var, segs: &[Segment]) -> Result<Var> {
        let (t, d) = self.dims2("segment_weighted_sum", v)?;
        if self.node(w).value.len() != t {
            return Err(Error::ShapeMismatch {
                op: "segment_weighted_sum",
                lhs: self.node(w).shape.clone(),
                rhs: vec![t, d],
            });
        }
        self.check_segments("segment_weighted_sum", t, segs)?;
        let (nw, nv) = (self.node(w), self.node(v));
        let mut out = vec![0.0; segs.len() * d];
        for (si, s) in segs.iter().enumerate() {
            let o = &mut out[si * d..(si + 1) * d];
            for r in s.range() {
                let wr = nw.value[r];
                o.iter_mut()
                    .zip(&nv.value[r * d..(r + 1) * d])
                    .for_each(|(a, b)| *a += wr * b);
            }
        }
        let ng = nw.needs_grad || nv.needs_grad;
        self.push(
            "segment_weighted_sum",
            vec![segs.len(), d],
            out,
            Op::SegWeightedSum {
                w,
                v,
                segs: segs.to_vec(),
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product self-attention restricted to each
    /// segment. `q`, `k`, `v` are `[T, d]` with `d` divisible by `heads`.
    /// Rows outside every segment produce zeros.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segs: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        self.same_shape("segment_attention", q, k)?;
        self.same_shape("segment_attention", q, v)?;
        let (t, d) = self.dims2("segment_attention", q)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("{d} not divisible into {heads} heads")));
        }
        self.check_segments("segment_attention", t, segs)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let (nq, nk, nv) = (self.node(q), self.node(k), self.node(v));
        let mut out = vec![0.0; t * d];
        let mut probs = Vec::new();
        let mut scratch = Vec::new();
        for s in segs {
            let l = s.len;
            if l == 0 {
                continue;
            }
            scratch.resize(l * l, 0.0);
            for h in 0..heads {
                let off = s.start * d + h * dh;
                let qv = MatRef { data: &nq.value, offset: off, rows: l, cols: dh, rs: d, cs: 1 };
                let kv = MatRef { data: &nk.value, offset: off, rows: l, cols: dh, rs: d, cs: 1 };
                let vv = MatRef { data: &nv.value, offset: off, rows: l, cols: dh, rs: d, cs: 1 };
                gemm(scale, qv, kv.t(), 0.0, MatMut::rm(&mut scratch, 0, l));
                for row in scratch.chunks_mut(l) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        z += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= z);
                }
                gemm(
                    1.0,
                    MatRef::rm(&scratch, 0, l, l, l),
                    vv,
                    0.0,
                    MatMut { data: &mut out, offset: off, rs: d, cs: 1 },
                );
                if ng {
                    probs.extend_from_slice(&scratch);
                }
            }
        }
        self.push(
            "segment_attention",
            vec![t, d],
            out,
            Op::SegAttention {
                q,
                k,
                v,
                segs: segs.to_vec(),
                heads,
                probs,
            },
            ng,
        )
    }

    // ---- composite losses ----------------------------------------------

    /// `−Σ target · log_softmax(logits)` averaged over rows. The target may
    /// itself be a graph node; detach it if no gradient should reach it.
    pub fn cross_entropy(&mut self, target: Var, logits: Var) -> Result<Var> {
        self.same_shape("cross_entropy", target, logits)?;
        let rows = self.node(logits).rows();
        let ls = self.log_softmax(logits)?;
        let prod = self.mul(target, ls)?;
        let s = self.sum(prod)?;
        self.scale(s, -1.0 / rows as f64)
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Returns the gradients of all
    /// [`Graph::param`] leaves; other leaves can be queried via
    /// [`Graph::grad`]. A graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.done {
            return Err(Error::BackwardTwice);
        }
        let ln = self.node(loss);
        if ln.value.len() != 1 {
            return Err(Error::NotScalar(ln.shape.clone()));
        }
        let loss_tracked = ln.needs_grad;
        self.done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut sparse: BTreeMap<ParamKey, GradBuf> = BTreeMap::new();
        if loss_tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        let nodes = &self.nodes;

        fn slot<'a>(
            grads: &'a mut [Option<Vec<f64>>],
            nodes: &[Node<'_>],
            v: Var,
        ) -> Option<&'a mut Vec<f64>> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let n = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Add(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        add_into(ga, &gy);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        add_into(gb, &gy);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        add_into(ga, &gy);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        gb.iter_mut().zip(&gy).for_each(|(x, g)| *x -= g);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for j in 0..gy.len() {
                            ga[j] += gy[j] * vb[j];
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for j in 0..gy.len() {
                            gb[j] += gy[j] * va[j];
                        }
                    }
                }
                Op::AddRow(x, b) => {
                    let c = node.cols().max(1);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        add_into(gx, &gy);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for row in gy.chunks(c) {
                            add_into(gb, row);
                        }
                    }
                }
                Op::Scale(x, s) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&gy).for_each(|(a, g)| *a += s * g);
                    }
                }
                Op::ScaleBy(x, s) => {
                    let sv = nodes[s.0].value[0];
                    let vx = &nodes[x.0].value;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().zip(&gy).for_each(|(a, g)| *a += sv * g);
                    }
                    if let Some(gs) = slot(&mut grads, nodes, *s) {
                        gs[0] += gy.iter().zip(vx.iter()).map(|(g, v)| g * v).sum::<f64>();
                    }
                }
                Op::Tanh(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for j in 0..gy.len() {
                            gx[j] += gy[j] * (1.0 - y[j] * y[j]);
                        }
                    }
                }
                Op::Gelu(x) => {
                    let vx = &nodes[x.0].value;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for j in 0..gy.len() {
                            gx[j] += gy[j] * gelu_parts(vx[j]).1;
                        }
                    }
                }
                Op::Exp(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for j in 0..gy.len() {
                            gx[j] += gy[j] * y[j];
                        }
                    }
                }
                Op::Softplus(x) => {
                    let vx = &nodes[x.0].value;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for j in 0..gy.len() {
                            gx[j] += gy[j] / (1.0 + (-vx[j]).exp());
                        }
                    }
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (na, nb) = (&nodes[a.0], &nodes[b.0]);
                    let (ar, ac) = (na.shape[0], na.shape[1]);
                    let (br, bc) = (nb.shape[0], nb.shape[1]);
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let av = MatRef::rm(&na.value, 0, ar, ac, ac);
                    let bv = MatRef::rm(&nb.value, 0, br, bc, bc);
                    let opa = if *ta { av.t() } else { av };
                    let opb = if *tb { bv.t() } else { bv };
                    let dc = MatRef::rm(&gy, 0, m, n, n);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        let out = MatMut::rm(ga, 0, ac);
                        if *ta {
                            gemm(1.0, opb, dc.t(), 1.0, out);
                        } else {
                            gemm(1.0, dc, opb.t(), 1.0, out);
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        let out = MatMut::rm(gb, 0, bc);
                        if *tb {
                            gemm(1.0, dc.t(), opa, 1.0, out);
                        } else {
                            gemm(1.0, opa.t(), dc, 1.0, out);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let c = node.cols();
                    let rows = node.rows();
                    let gv = &nodes[gain.0].value;
                    if let Some(gg) = slot(&mut grads, nodes, *gain) {
                        for r in 0..rows {
                            for j in 0..c {
                                gg[j] += gy[r * c + j] * xhat[r * c + j];
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *bias) {
                        for row in gy.chunks(c) {
                            add_into(gb, row);
                        }
                    }
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let cf = c as f64;
                        for r in 0..rows {
                            let base = r * c;
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..c {
                                let dh = gy[base + j] * gv[j];
                                s1 += dh;
                                s2 += dh * xhat[base + j];
                            }
                            for j in 0..c {
                                let dh = gy[base + j] * gv[j];
                                gx[base + j] +=
                                    inv_std[r] / cf * (cf * dh - s1 - xhat[base + j] * s2);
                            }
                        }
                    }
                }
                Op::Softmax(x) => {
                    let c = node.cols().max(1);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ((yr, gr), xr) in y.chunks(c).zip(gy.chunks(c)).zip(gx.chunks_mut(c)) {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                xr[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::LogSoftmax(x) => {
                    let c = node.cols().max(1);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ((yr, gr), xr) in y.chunks(c).zip(gy.chunks(c)).zip(gx.chunks_mut(c)) {
                            let total: f64 = gr.iter().sum();
                            for j in 0..c {
                                xr[j] += gr[j] - yr[j].exp() * total;
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().for_each(|a| *a += gy[0]);
                    }
                }
                Op::Mean(x) => {
                    let n = nodes[x.0].value.len() as f64;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().for_each(|a| *a += gy[0] / n);
                    }
                }
                Op::Gather { table, ids } => {
                    let d = node.cols();
                    if let Op::Param(key) = nodes[table.0].op {
                        let entry = sparse.entry(key).or_insert_with(|| GradBuf::Rows {
                            width: d,
                            rows: BTreeMap::new(),
                        });
                        if let GradBuf::Rows { rows, .. } = entry {
                            for (r, &id) in ids.iter().enumerate() {
                                let acc = rows.entry(id).or_insert_with(|| vec![0.0; d]);
                                add_into(acc, &gy[r * d..(r + 1) * d]);
                            }
                        }
                    } else if let Some(gt) = slot(&mut grads, nodes, *table) {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut gt[id * d..(id + 1) * d], &gy[r * d..(r + 1) * d]);
                        }
                    }
                }
                Op::SliceRows { x, start } => {
                    let c = node.cols();
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        add_into(&mut gx[start * c..start * c + gy.len()], &gy);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = nodes[p.0].value.len();
                        if let Some(gp) = slot(&mut grads, nodes, *p) {
                            add_into(gp, &gy[off..off + n]);
                        }
                        off += n;
                    }
                }
                Op::Transpose(x) => {
                    let (c, r) = (node.shape[0], node.shape[1]);
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for i2 in 0..r {
                            for j in 0..c {
                                gx[i2 * c + j] += gy[j * r + i2];
                            }
                        }
                    }
                }
                Op::Reshape(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        add_into(gx, &gy);
                    }
                }
                Op::SegSoftmax { x, segs } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for s in segs {
                            let r = s.range();
                            let dot: f64 = y[r.clone()].iter().zip(&gy[r.clone()]).map(|(a, b)| a * b).sum();
                            for j in r {
                                gx[j] += y[j] * (gy[j] - dot);
                            }
                        }
                    }
                }
                Op::SegWeightedSum { w, v, segs } => {
                    let d = node.cols();
                    let (vw, vv) = (&nodes[w.0].value, &nodes[v.0].value);
                    if let Some(gw) = slot(&mut grads, nodes, *w) {
                        for (si, s) in segs.iter().enumerate() {
                            let go = &gy[si * d..(si + 1) * d];
                            for r in s.range() {
                                gw[r] += go.iter().zip(&vv[r * d..(r + 1) * d]).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                    if let Some(gv) = slot(&mut grads, nodes, *v) {
                        for (si, s) in segs.iter().enumerate() {
                            let go = &gy[si * d..(si + 1) * d];
                            for r in s.range() {
                                let wr = vw[r];
                                gv[r * d..(r + 1) * d].iter_mut().zip(go).for_each(|(a, g)| *a += wr * g);
                            }
                        }
                    }
                }
                Op::SegAttention {
                    q,
                    k,
                    v,
                    segs,
                    heads,
                    probs,
                } => {
                    let d = node.cols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let (vq, vk, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
                    let (nq, nk, nvv) = (nodes[q.0].needs_grad, nodes[k.0].needs_grad, nodes[v.0].needs_grad);
                    let mut gq = nq.then(|| vec![0.0; vq.len()]);
                    let mut gk = nk.then(|| vec![0.0; vk.len()]);
                    let mut gvb = nvv.then(|| vec![0.0; vv.len()]);
                    let mut dp = Vec::new();
                    let mut poff = 0;
                    for s in segs {
                        let l = s.len;
                        if l == 0 {
                            continue;
                        }
                        dp.resize(l * l, 0.0);
                        for h in 0..*heads {
                            let off = s.start * d + h * dh;
                            let p = &probs[poff..poff + l * l];
                            poff += l * l;
                            let view = |data| head_view(data, off, l, dh, d);
                            let pv = MatRef::rm(p, 0, l, l, l);
                            let dov = view(&gy);
                            if let Some(gvv) = gvb.as_mut() {
                                gemm(1.0, pv.t(), dov, 1.0, MatMut { data: gvv, offset: off, rs: d, cs: 1 });
                            }
                            // dP = dO · Vᵀ, then through the row softmax.
                            gemm(1.0, dov, view(vv).t(), 0.0, MatMut::rm(&mut dp, 0, l));
                            for r in 0..l {
                                let pr = &p[r * l..(r + 1) * l];
                                let dr = &mut dp[r * l..(r + 1) * l];
                                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                                for j in 0..l {
                                    dr[j] = pr[j] * (dr[j] - dot);
                                }
                            }
                            let dsv = MatRef::rm(&dp, 0, l, l, l);
                            if let Some(g) = gq.as_mut() {
                                gemm(scale, dsv, view(vk), 1.0, MatMut { data: g, offset: off, rs: d, cs: 1 });
                            }
                            if let Some(g) = gk.as_mut() {
                                gemm(scale, dsv.t(), view(vq), 1.0, MatMut { data: g, offset: off, rs: d, cs: 1 });
                            }
                        }
                    }
                    for (var, g) in [(*q, gq), (*k, gk), (*v, gvb)] {
                        if let Some(g) = g {
                            if let Some(dst) = slot(&mut grads, nodes, var) {
                                add_into(dst, &g);
                            }
                        }
                    }
                }
            }
            grads[i] = Some(gy);
        }

        let mut out = Gradients::new();
        for (i, node) in nodes.iter().enumerate() {
            if let Op::Param(key) = node.op {
                if let Some(g) = &grads[i] {
                    out.add(key, GradBuf::Dense(g.clone()));
                }
            }
        }
        for (key, g) in sparse {
            out.add(key, g);
        }
        self.grads = grads;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        for &p in g.value(s) {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let s = g.softmax(x).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(g.value(s)[0], e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(g.value(s)[0], 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(g.value(s)[1], 0.2689, epsilon = 1e-4);
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
        let s = g.softmax(x).unwrap();
        assert_abs_diff_eq!(g.value(s)[0], 1.0, epsilon = 1e-15);
        assert!(g.value(s)[1] >= 0.0 && g.value(s)[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![f64::NAN, 0.0]));
        assert!(matches!(g.softmax(x), Err(Error::NonFinite(_))));
        let x = g.constant(Tensor::vector(vec![f64::INFINITY, 0.0]));
        assert!(g.softmax(x).is_err());
    }

    #[test]
    fn softmax_axis_zero_normalizes_columns() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 5.0, 3.0, 5.0]));
        let s = g.softmax_axis(x, 0).unwrap();
        let v = g.value(s);
        assert_abs_diff_eq!(v[0] + v[2], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 0.5, epsilon = 1e-12);
        assert!(g.softmax_axis(x, 2).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let tgt = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let lg = g.constant(Tensor::vector(vec![10.0, -10.0]));
        let ce = g.cross_entropy(tgt, lg).unwrap();
        // -log(1/(1+e^-20)) = ln(1+e^-20)
        assert_abs_diff_eq!(g.scalar(ce), (-20f64).exp().ln_1p(), epsilon = 1e-14);
        assert_abs_diff_eq!(g.scalar(ce), 2.06e-9, epsilon = 1e-11);

        let lg = g.constant(Tensor::vector(vec![0.3; 5]));
        let p = g.softmax(lg).unwrap();
        let ce = g.cross_entropy(p, lg).unwrap();
        assert_abs_diff_eq!(g.scalar(ce), 5f64.ln(), epsilon = 1e-12);

        let tgt = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let lg = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let ce = g.cross_entropy(tgt, lg).unwrap();
        assert_abs_diff_eq!(g.scalar(ce), 2f64.ln(), epsilon = 1e-15);

        let bad = g.constant(Tensor::vector(vec![0.0; 3]));
        assert!(matches!(g.cross_entropy(tgt, bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn cross_entropy_averages_over_rows() {
        let mut g = Graph::new();
        let tgt = g.constant(t(&[2, 2], &[1.0, 0.0, 1.0, 0.0]));
        let lg = g.constant(t(&[2, 2], &[0.0, 0.0, 0.0, 0.0]));
        let ce = g.cross_entropy(tgt, lg).unwrap();
        assert_abs_diff_eq!(g.scalar(ce), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let b = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let m = g.mse(a, a).unwrap();
        assert_eq!(g.scalar(m), 0.0);
        let m = g.mse(a, b).unwrap();
        assert_eq!(g.scalar(m), 1.0);
        let a = g.constant(Tensor::vector(vec![2.0, 0.0]));
        let b2 = g.constant(Tensor::vector(vec![0.0, 2.0]));
        let m = g.mse(a, b2).unwrap();
        assert_eq!(g.scalar(m), 4.0);
        let c = g.constant(Tensor::vector(vec![0.0; 3]));
        assert!(g.mse(a, c).is_err());
    }

    #[test]
    fn backward_sum_and_disconnected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]).with_requires_grad(true));
        let z = g.input(Tensor::vector(vec![4.0]).with_requires_grad(true));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), vec![1.0, 1.0, 1.0]);
        assert_eq!(g.grad(z).unwrap(), vec![0.0]);
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![3.0]).with_requires_grad(true));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), vec![7.0]);
    }

    #[test]
    fn gather_rejects_bad_ids() {
        let mut g = Graph::new();
        let tab = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.gather(tab, &[3]), Err(Error::TokenOutOfRange { id: 3, vocab: 3 })));
    }

    #[test]
    fn sparse_param_gradient_for_gather() {
        let table = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut g = Graph::new();
        let key = ParamKey { group: 0, index: 0 };
        let tab = g.param(&table, key);
        let rows = g.gather(tab, &[2, 2, 0]).unwrap();
        let s = g.sum(rows).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(
            grads.get(key).unwrap().to_dense(6),
            vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
        );
    }

    #[test]
    fn segment_ops_ignore_rows_outside_segments() {
        let mut g = Graph::new();
        let sc = g.constant(t(&[4, 1], &[0.0, 0.0, 9.0, 1.0]));
        let segs = [Segment::new(0, 2), Segment::new(3, 0)];
        let w = g.segment_softmax(sc, &segs).unwrap();
        assert_eq!(g.value(w), &[0.5, 0.5, 0.0, 0.0]);
        let v = g.constant(t(&[4, 1], &[2.0, 4.0, 100.0, 100.0]));
        let o = g.segment_weighted_sum(w, v, &segs).unwrap();
        assert_eq!(g.value(o), &[3.0, 0.0]);
    }
}
