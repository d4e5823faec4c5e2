//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep. A tape is single-use: after a
//! backward pass it must be [`Tape::reset`] before recording again.

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom, MatMut, MatRef};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

/// One level of a multi-scale value map for deformable sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeformLevel {
    pub h: usize,
    pub w: usize,
    /// First token row of this level in the value matrix.
    pub start: usize,
}

/// Block structure for [`Tape::attention`].
///
/// Queries are `blocks * q_len` rows, keys and values `blocks * k_len` rows;
/// attention never crosses a block. Dense attention is a single block.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub heads: usize,
    pub blocks: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// `allowed[(b * q_len + i) * k_len + j]`; `None` allows every pair.
    pub allowed: Option<Vec<bool>>,
    /// Row of the bias table used by pair `(i, j)` (`i * k_len + j`), shared by
    /// all blocks. Required when a bias table is passed.
    pub bias_index: Option<Vec<usize>>,
}

impl AttentionLayout {
    pub fn dense(heads: usize, q_len: usize, k_len: usize) -> Self {
        AttentionLayout {
            heads,
            blocks: 1,
            q_len,
            k_len,
            allowed: None,
            bias_index: None,
        }
    }
}

/// Gradients of every parameter leaf touched by a tape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamGrads {
    grads: BTreeMap<ParamId, Vec<f64>>,
}

impl ParamGrads {
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Vec<f64>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(&id).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Elementwise sum, used to merge per-worker results in a fixed order.
    pub fn merge(&mut self, other: ParamGrads) {
        for (id, g) in other.grads {
            match self.grads.get_mut(&id) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Reshape(VarId),
    Transpose(VarId),
    ConcatRows(Vec<VarId>),
    SliceRows { x: VarId, start: usize },
    GatherRows { x: VarId, index: Vec<Option<usize>> },
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    AddRow { x: VarId, row: VarId },
    Scale(VarId, f64),
    AddScalar(VarId),
    Sum(VarId),
    Mean(VarId),
    MatMul { a: VarId, b: VarId, ta: bool, tb: bool },
    Affine { x: VarId, w: VarId, b: VarId },
    Sigmoid(VarId),
    Gelu(VarId),
    Softmax { x: VarId, axis: usize },
    LayerNorm { x: VarId, gamma: VarId, beta: VarId, mean: Vec<f64>, rstd: Vec<f64> },
    GroupNorm { x: VarId, gamma: VarId, beta: VarId, groups: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: VarId, k: VarId, bias: Option<VarId>, geom: ConvGeom },
    BilinearSample { f: VarId, pts: VarId },
    Attention { q: VarId, k: VarId, v: VarId, table: Option<VarId>, layout: Box<AttentionLayout>, probs: Vec<f64> },
    MsDeform { value: VarId, offsets: VarId, weights: VarId, refs: Vec<f64>, levels: Vec<DeformLevel>, heads: usize, points: usize },
    BceWithLogits { x: VarId, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: BTreeMap<ParamId, VarId>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_leaves.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> VarId {
        debug_assert_eq!(numel(&shape), value.len());
        debug_assert!(!self.consumed, "recording on a consumed tape");
        self.nodes.push(Node {
            shape,
            value,
            needs_grad,
            op,
        });
        VarId(self.nodes.len() - 1)
    }

    fn node(&self, v: VarId) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[VarId]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: VarId) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: VarId) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: VarId) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: VarId) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape invariant")
    }

    pub fn requires_grad(&self, v: VarId) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---------------------------------------------------------------- leaves

    /// Non-differentiable input.
    pub fn constant(&mut self, t: &Tensor) -> VarId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<VarId> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(shape_err("constant", format!("{:?} vs {}", shape, data.len())));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// Leaf whose gradient can be read back with [`Tape::grad`].
    pub fn input(&mut self, t: &Tensor) -> VarId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Leaf bound to a trainable parameter. Repeated calls share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> VarId {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let t = store.tensor(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param, true);
        self.param_leaves.insert(id, v);
        v
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: VarId) -> VarId {
        let n = self.node(x);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    // ----------------------------------------------------------- shape ops

    pub fn reshape(&mut self, x: VarId, shape: impl Into<Vec<usize>>) -> Result<VarId> {
        let shape = shape.into();
        let n = self.node(x);
        if numel(&shape) != n.value.len() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", n.shape, shape)));
        }
        let value = n.value.clone();
        let ng = n.needs_grad;
        Ok(self.push(shape, value, Op::Reshape(x), ng))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: VarId) -> Result<VarId> {
        let n = self.node(x);
        if n.shape.len() != 2 {
            return Err(shape_err("transpose", format!("rank {}", n.shape.len())));
        }
        let (r, c) = (n.shape[0], n.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = n.value[i * c + j];
            }
        }
        let ng = n.needs_grad;
        Ok(self.push(vec![c, r], out, Op::Transpose(x), ng))
    }

    /// Concatenation along axis 0.
    pub fn concat_rows(&mut self, xs: &[VarId]) -> Result<VarId> {
        let first = xs.first().ok_or_else(|| shape_err("concat_rows", "no inputs"))?;
        let tail = self.node(*first).shape[1..].to_vec();
        let mut rows = 0;
        let mut value = Vec::new();
        for &x in xs {
            let n = self.node(x);
            if n.shape.is_empty() || n.shape[1..] != tail[..] {
                return Err(shape_err("concat_rows", format!("{:?} vs tail {:?}", n.shape, tail)));
            }
            rows += n.shape[0];
            value.extend_from_slice(&n.value);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let ng = self.ng(xs);
        Ok(self.push(shape, value, Op::ConcatRows(xs.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let n = self.node(x);
        if n.shape.is_empty() || start + len > n.shape[0] {
            return Err(shape_err("slice_rows", format!("{start}+{len} of {:?}", n.shape)));
        }
        let row: usize = numel(&n.shape[1..]);
        let value = n.value[start * row..(start + len) * row].to_vec();
        let mut shape = n.shape.clone();
        shape[0] = len;
        let ng = n.needs_grad;
        Ok(self.push(shape, value, Op::SliceRows { x, start }, ng))
    }

    /// Row gather on a 2-D tensor; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: VarId, index: Vec<Option<usize>>) -> Result<VarId> {
        let n = self.node(x);
        if n.shape.len() != 2 {
            return Err(shape_err("gather_rows", format!("rank {}", n.shape.len())));
        }
        let (rows, c) = (n.shape[0], n.shape[1]);
        let mut value = vec![0.0; index.len() * c];
        for (r, ix) in index.iter().enumerate() {
            if let Some(i) = *ix {
                if i >= rows {
                    return Err(shape_err("gather_rows", format!("row {i} of {rows}")));
                }
                value[r * c..(r + 1) * c].copy_from_slice(&n.value[i * c..(i + 1) * c]);
            }
        }
        let ng = n.needs_grad;
        Ok(self.push(vec![index.len(), c], value, Op::GatherRows { x, index }, ng))
    }

    // ------------------------------------------------------ elementwise ops

    fn binary(&mut self, a: VarId, b: VarId, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape {
            return Err(shape_err(name, format!("{:?} vs {:?}", na.shape, nb.shape)));
        }
        let v = na.value.iter().zip(&nb.value).map(|(x, y)| f(*x, *y)).collect();
        Ok((na.shape.clone(), v))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (s, v) = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(s, v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (s, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(s, v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (s, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(s, v, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (s, v) = self.binary(a, b, "div", |x, y| x / y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(s, v, Op::Div(a, b), ng))
    }

    /// `x[.., j] + row[j]` with `row` broadcast over the leading axes.
    pub fn add_row(&mut self, x: VarId, row: VarId) -> Result<VarId> {
        let (nx, nr) = (self.node(x), self.node(row));
        let c = *nx.shape.last().unwrap_or(&1);
        if nr.value.len() != c || nx.shape.is_empty() {
            return Err(shape_err("add_row", format!("{:?} + {:?}", nx.shape, nr.shape)));
        }
        let mut v = nx.value.clone();
        for chunk in v.chunks_exact_mut(c) {
            chunk.iter_mut().zip(&nr.value).for_each(|(a, b)| *a += b);
        }
        let shape = nx.shape.clone();
        let ng = self.ng(&[x, row]);
        Ok(self.push(shape, v, Op::AddRow { x, row }, ng))
    }

    pub fn scale(&mut self, x: VarId, s: f64) -> VarId {
        let n = self.node(x);
        let v = n.value.iter().map(|a| a * s).collect();
        let (shape, ng) = (n.shape.clone(), n.needs_grad);
        self.push(shape, v, Op::Scale(x, s), ng)
    }

    pub fn add_scalar(&mut self, x: VarId, c: f64) -> VarId {
        let n = self.node(x);
        let v = n.value.iter().map(|a| a + c).collect();
        let (shape, ng) = (n.shape.clone(), n.needs_grad);
        self.push(shape, v, Op::AddScalar(x), ng)
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let n = self.node(x);
        let s = n.value.iter().sum();
        let ng = n.needs_grad;
        self.push(vec![], vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: VarId) -> VarId {
        let n = self.node(x);
        let s = n.value.iter().sum::<f64>() / n.value.len().max(1) as f64;
        let ng = n.needs_grad;
        self.push(vec![], vec![s], Op::Mean(x), ng)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let n = self.node(x);
        let v = n.value.iter().map(|&a| kernels::sigmoid(a)).collect();
        let (shape, ng) = (n.shape.clone(), n.needs_grad);
        self.push(shape, v, Op::Sigmoid(x), ng)
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let n = self.node(x);
        let v = n.value.iter().map(|&a| kernels::gelu(a)).collect();
        let (shape, ng) = (n.shape.clone(), n.needs_grad);
        self.push(shape, v, Op::Gelu(x), ng)
    }

    pub fn softmax(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        let n = self.node(x);
        if axis >= n.shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: n.shape.len(),
            });
        }
        let len = n.shape[axis];
        let inner: usize = numel(&n.shape[axis + 1..]);
        let outer: usize = numel(&n.shape[..axis]);
        let mut v = n.value.clone();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for k in 0..len {
                    m = m.max(v[idx(k)]);
                }
                let mut z = 0.0;
                for k in 0..len {
                    let e = (v[idx(k)] - m).exp();
                    v[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    v[idx(k)] /= z;
                }
            }
        }
        let (shape, ng) = (n.shape.clone(), n.needs_grad);
        Ok(self.push(shape, v, Op::Softmax { x, axis }, ng))
    }

    // ------------------------------------------------------- linear algebra

    /// `op(a) @ op(b)` for 2-D operands, `op` optionally transposing.
    pub fn matmul(&mut self, a: VarId, b: VarId, ta: bool, tb: bool) -> Result<VarId> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape.len() != 2 || nb.shape.len() != 2 {
            return Err(shape_err("matmul", format!("{:?} @ {:?}", na.shape, nb.shape)));
        }
        let mut ma = MatRef::new(&na.value, na.shape[0], na.shape[1]);
        let mut mb = MatRef::new(&nb.value, nb.shape[0], nb.shape[1]);
        if ta {
            ma = ma.t();
        }
        if tb {
            mb = mb.t();
        }
        if ma.cols != mb.rows {
            return Err(shape_err("matmul", format!("{:?} @ {:?} (ta={ta}, tb={tb})", na.shape, nb.shape)));
        }
        let (m, n) = (ma.rows, mb.cols);
        let mut out = vec![0.0; m * n];
        kernels::gemm(1.0, ma, mb, 0.0, MatMut::new(&mut out, n));
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb }, ng))
    }

    /// `y[.., j] = sum_i x[.., i] w[i, j] + b[j]`.
    pub fn affine(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (nx, nw, nb) = (self.node(x), self.node(w), self.node(b));
        if nx.shape.is_empty() || nw.shape.len() != 2 || nb.shape != [nw.shape[1]] || *nx.shape.last().unwrap() != nw.shape[0] {
            return Err(shape_err(
                "affine",
                format!("x {:?}, w {:?}, b {:?}", nx.shape, nw.shape, nb.shape),
            ));
        }
        let (din, dout) = (nw.shape[0], nw.shape[1]);
        let rows = nx.value.len() / din;
        let mut out = Vec::with_capacity(rows * dout);
        for _ in 0..rows {
            out.extend_from_slice(&nb.value);
        }
        kernels::gemm(
            1.0,
            MatRef::new(&nx.value, rows, din),
            MatRef::new(&nw.value, din, dout),
            1.0,
            MatMut::new(&mut out, dout),
        );
        let mut shape = nx.shape.clone();
        *shape.last_mut().unwrap() = dout;
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(shape, out, Op::Affine { x, w, b }, ng))
    }

    // --------------------------------------------------------- normalisation

    /// Normalisation over the last axis followed by a per-channel affine.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f64) -> Result<VarId> {
        let (nx, ng_, nb) = (self.node(x), self.node(gamma), self.node(beta));
        let d = *nx.shape.last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        if d == 0 || ng_.shape != [d] || nb.shape != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", nx.shape, ng_.shape, nb.shape),
            ));
        }
        let rows = nx.value.len() / d;
        let mut out = vec![0.0; nx.value.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &nx.value[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (xr[j] - mean) * rstd * ng_.value[j] + nb.value[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let shape = nx.shape.clone();
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            ng,
        ))
    }

    /// Group normalisation of a `[C, H, W]` map.
    pub fn group_norm(&mut self, x: VarId, groups: usize, gamma: VarId, beta: VarId, eps: f64) -> Result<VarId> {
        let (nx, ng_, nb) = (self.node(x), self.node(gamma), self.node(beta));
        if nx.shape.len() != 3 {
            return Err(shape_err("group_norm", format!("expected [C,H,W], got {:?}", nx.shape)));
        }
        let c = nx.shape[0];
        if groups == 0 || c % groups != 0 {
            return Err(Error::InvalidGroups { channels: c, groups });
        }
        if ng_.shape != [c] || nb.shape != [c] {
            return Err(shape_err("group_norm", format!("gamma {:?}, beta {:?}", ng_.shape, nb.shape)));
        }
        let hw = nx.shape[1] * nx.shape[2];
        let cpg = c / groups;
        let len = cpg * hw;
        let mut out = vec![0.0; nx.value.len()];
        let mut means = Vec::with_capacity(groups);
        let mut rstds = Vec::with_capacity(groups);
        for g in 0..groups {
            let xs = &nx.value[g * len..(g + 1) * len];
            let mean = xs.iter().sum::<f64>() / len as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for ci in 0..cpg {
                let ch = g * cpg + ci;
                for p in 0..hw {
                    let i = ch * hw + p;
                    out[i] = (nx.value[i] - mean) * rstd * ng_.value[ch] + nb.value[ch];
                }
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let shape = nx.shape.clone();
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            ng,
        ))
    }

    // ----------------------------------------------------------- convolution

    /// Cross-correlation of `x: [Cin,H,W]` with `k: [Cout,Cin,kh,kw]`
    /// (`[C,1,kh,kw]` when depthwise) and zero padding.
    pub fn conv2d(&mut self, x: VarId, k: VarId, bias: Option<VarId>, stride: usize, pad: usize, depthwise: bool) -> Result<VarId> {
        if stride < 1 {
            return Err(Error::InvalidStride);
        }
        let (nx, nk) = (self.node(x), self.node(k));
        if nx.shape.len() != 3 || nk.shape.len() != 4 {
            return Err(shape_err("conv2d", format!("x {:?}, k {:?}", nx.shape, nk.shape)));
        }
        let geom = ConvGeom {
            cin: nx.shape[0],
            h: nx.shape[1],
            w: nx.shape[2],
            cout: nk.shape[0],
            kh: nk.shape[2],
            kw: nk.shape[3],
            stride,
            pad,
            depthwise,
        };
        let cin_per = if depthwise { 1 } else { geom.cin };
        if nk.shape[1] != cin_per || (depthwise && geom.cout != geom.cin) || !geom.valid() {
            return Err(shape_err(
                "conv2d",
                format!("x {:?}, k {:?}, depthwise={depthwise}", nx.shape, nk.shape),
            ));
        }
        let bias_val = match bias {
            Some(b) => {
                let nb = self.node(b);
                if nb.shape != [geom.cout] {
                    return Err(shape_err("conv2d", format!("bias {:?}", nb.shape)));
                }
                Some(nb.value.as_slice())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(&nx.value, &nk.value, bias_val, &geom);
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        let ng = self.ng(&inputs);
        Ok(self.push(
            vec![geom.cout, geom.out_h(), geom.out_w()],
            out,
            Op::Conv2d { x, k, bias, geom },
            ng,
        ))
    }

    // -------------------------------------------------------------- sampling

    /// Bilinear reads of `f: [C,H,W]` at continuous pixel positions
    /// `pts: [P,2]` given as `(x, y)`. Returns `[P, C]`.
    pub fn bilinear_sample(&mut self, f: VarId, pts: VarId) -> Result<VarId> {
        let (nf, np) = (self.node(f), self.node(pts));
        if nf.shape.len() != 3 || np.shape.len() != 2 || np.shape[1] != 2 {
            return Err(shape_err("bilinear_sample", format!("f {:?}, pts {:?}", nf.shape, np.shape)));
        }
        let (c, h, w) = (nf.shape[0], nf.shape[1], nf.shape[2]);
        let p = np.shape[0];
        let mut out = vec![0.0; p * c];
        for (i, xy) in np.value.chunks_exact(2).enumerate() {
            let taps = kernels::bilinear_taps(xy[0], xy[1], h, w);
            let row = &mut out[i * c..(i + 1) * c];
            for t in &taps {
                if let Some(ix) = t.index {
                    if t.weight == 0.0 {
                        continue;
                    }
                    for (ch, o) in row.iter_mut().enumerate() {
                        *o += t.weight * nf.value[ch * h * w + ix];
                    }
                }
            }
        }
        let ng = self.ng(&[f, pts]);
        Ok(self.push(vec![p, c], out, Op::BilinearSample { f, pts }, ng))
    }

    /// Bilinear resize of `x: [C,H,W]` to `[C,out_h,out_w]` on the
    /// half-pixel grid, sample positions clamped to the input centre hull.
    pub fn interpolate(&mut self, x: VarId, out_h: usize, out_w: usize) -> Result<VarId> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidSize(out_h, out_w));
        }
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(shape_err("interpolate", format!("{:?}", s)));
        }
        let pts = kernels::resize_points(s[1], s[2], out_h, out_w);
        let pts = self.constant_from(vec![out_h * out_w, 2], pts)?;
        let sampled = self.bilinear_sample(x, pts)?;
        let t = self.transpose(sampled)?;
        self.reshape(t, vec![s[0], out_h, out_w])
    }

    // ------------------------------------------------------------- attention

    /// Scaled dot-product multi-head attention, optionally block-diagonal,
    /// masked, and with a learned relative bias table `[rows, heads]`.
    pub fn attention(&mut self, q: VarId, k: VarId, v: VarId, table: Option<VarId>, layout: AttentionLayout) -> Result<VarId> {
        let (nq, nk, nv) = (self.node(q), self.node(k), self.node(v));
        let d = *nq.shape.last().unwrap_or(&0);
        let heads = layout.heads;
        let ok = nq.shape.len() == 2
            && nk.shape.len() == 2
            && nv.shape.len() == 2
            && nk.shape[1] == d
            && nv.shape[1] == d
            && heads > 0
            && d % heads == 0
            && nq.shape[0] == layout.blocks * layout.q_len
            && nk.shape[0] == layout.blocks * layout.k_len
            && nv.shape[0] == nk.shape[0];
        if !ok {
            return Err(shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}, heads {heads}", nq.shape, nk.shape, nv.shape),
            ));
        }
        if let Some(allowed) = &layout.allowed {
            if allowed.len() != layout.blocks * layout.q_len * layout.k_len {
                return Err(shape_err("attention", "mask length"));
            }
        }
        let table_val = match table {
            Some(t) => {
                let nt = self.node(t);
                let idx = layout
                    .bias_index
                    .as_ref()
                    .ok_or_else(|| shape_err("attention", "bias table without index"))?;
                if nt.shape.len() != 2 || nt.shape[1] != heads || idx.len() != layout.q_len * layout.k_len || idx.iter().any(|&i| i >= nt.shape[0]) {
                    return Err(shape_err("attention", format!("bias table {:?}", nt.shape)));
                }
                Some(nt.value.as_slice())
            }
            None => None,
        };
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (ql, kl) = (layout.q_len, layout.k_len);
        let mut probs = vec![0.0; layout.blocks * heads * ql * kl];
        let mut out = vec![0.0; nq.value.len()];
        let qm = MatRef::new(&nq.value, nq.shape[0], d);
        let km = MatRef::new(&nk.value, nk.shape[0], d);
        let vm = MatRef::new(&nv.value, nv.shape[0], d);
        for b in 0..layout.blocks {
            for h in 0..heads {
                let pbase = (b * heads + h) * ql * kl;
                let p = &mut probs[pbase..pbase + ql * kl];
                kernels::gemm(
                    scale,
                    qm.rows(b * ql, ql).cols(h * dh, dh),
                    km.rows(b * kl, kl).cols(h * dh, dh).t(),
                    0.0,
                    MatMut::new(p, kl),
                );
                for i in 0..ql {
                    let row = &mut p[i * kl..(i + 1) * kl];
                    if let (Some(tv), Some(idx)) = (table_val, layout.bias_index.as_ref()) {
                        for j in 0..kl {
                            row[j] += tv[idx[i * kl + j] * heads + h];
                        }
                    }
                    if let Some(allowed) = &layout.allowed {
                        let a = &allowed[(b * ql + i) * kl..(b * ql + i + 1) * kl];
                        for j in 0..kl {
                            if !a[j] {
                                row[j] = f64::NEG_INFINITY;
                            }
                        }
                    }
                    softmax_row(row);
                }
                kernels::gemm(
                    1.0,
                    MatRef::new(p, ql, kl),
                    vm.rows(b * kl, kl).cols(h * dh, dh),
                    0.0,
                    MatMut {
                        data: &mut out,
                        offset: b * ql * d + h * dh,
                        row_stride: d as isize,
                        col_stride: 1,
                    },
                );
            }
        }
        let shape = nq.shape.clone();
        let mut inputs = vec![q, k, v];
        inputs.extend(table);
        let ng = self.ng(&inputs);
        Ok(self.push(
            shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                table,
                layout: Box::new(layout),
                probs,
            },
            ng,
        ))
    }

    /// Multi-scale deformable sampling core.
    ///
    /// `value: [Nv, d]` holds every level's tokens (level `l` at rows
    /// `levels[l].start ..`). For query `q`, head `h`, level `l`, point `p`
    /// the sample position in level pixels is `ref[q] * (w_l, h_l) + offset`,
    /// with offsets laid out as `[Nq, heads*L*P*2]` and softmaxed weights as
    /// `[Nq, heads*L*P]`. Output `[Nq, d]`.
    pub fn ms_deform_attn(
        &mut self,
        value: VarId,
        offsets: VarId,
        weights: VarId,
        refs: Vec<f64>,
        levels: Vec<DeformLevel>,
        heads: usize,
        points: usize,
    ) -> Result<VarId> {
        let (nv, no, nw) = (self.node(value), self.node(offsets), self.node(weights));
        let nl = levels.len();
        let nq = refs.len() / 2;
        let d = *nv.shape.last().unwrap_or(&0);
        let ok = nv.shape.len() == 2
            && heads > 0
            && d % heads == 0
            && refs.len() == nq * 2
            && no.shape == [nq, heads * nl * points * 2]
            && nw.shape == [nq, heads * nl * points]
            && levels.iter().all(|l| l.start + l.h * l.w <= nv.shape[0]);
        if !ok {
            return Err(shape_err(
                "ms_deform_attn",
                format!("value {:?}, offsets {:?}, weights {:?}, queries {nq}", nv.shape, no.shape, nw.shape),
            ));
        }
        let dh = d / heads;
        let n_off = heads * nl * points * 2;
        let n_w = heads * nl * points;
        let mut out = vec![0.0; nq * d];
        for q in 0..nq {
            let (rx, ry) = (refs[q * 2], refs[q * 2 + 1]);
            for h in 0..heads {
                let o = &mut out[q * d + h * dh..q * d + (h + 1) * dh];
                for (l, lv) in levels.iter().enumerate() {
                    for p in 0..points {
                        let s = (h * nl + l) * points + p;
                        let px = rx * lv.w as f64 + no.value[q * n_off + s * 2];
                        let py = ry * lv.h as f64 + no.value[q * n_off + s * 2 + 1];
                        let aw = nw.value[q * n_w + s];
                        for t in kernels::bilinear_taps(px, py, lv.h, lv.w) {
                            if let Some(ix) = t.index {
                                let coef = aw * t.weight;
                                let row = &nv.value[(lv.start + ix) * d + h * dh..(lv.start + ix) * d + (h + 1) * dh];
                                o.iter_mut().zip(row).for_each(|(a, b)| *a += coef * b);
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(&[value, offsets, weights]);
        Ok(self.push(
            vec![nq, d],
            out,
            Op::MsDeform {
                value,
                offsets,
                weights,
                refs,
                levels,
                heads,
                points,
            },
            ng,
        ))
    }

    // ----------------------------------------------------------------- losses

    /// Mean binary cross-entropy between `sigmoid(x)` and soft targets.
    pub fn bce_with_logits(&mut self, x: VarId, target: Vec<f64>) -> Result<VarId> {
        let n = self.node(x);
        if n.value.len() != target.len() || target.is_empty() {
            return Err(shape_err("bce_with_logits", format!("{:?} vs {}", n.shape, target.len())));
        }
        let mut s = 0.0;
        for (&z, &t) in n.value.iter().zip(&target) {
            s += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        let v = s / target.len() as f64;
        let ng = n.needs_grad;
        Ok(self.push(vec![], vec![v], Op::BceWithLogits { x, target }, ng))
    }

    // --------------------------------------------------------------- backward

    /// Gradient of a leaf (input or parameter) after a backward pass.
    pub fn grad(&self, v: VarId) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients gathered after a backward pass.
    pub fn param_grads(&self) -> ParamGrads {
        let mut grads = BTreeMap::new();
        for (&id, &v) in &self.param_leaves {
            if let Some(g) = self.grad(v) {
                grads.insert(id, g.to_vec());
            }
        }
        ParamGrads { grads }
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = &self.node(loss).shape;
        if numel(shape) != 1 {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        self.backward_seeded(vec![(loss, vec![1.0])])
    }

    /// Reverse sweep with explicit output cotangents, used to chain a tape
    /// onto gradients computed elsewhere.
    pub fn backward_seeded(&mut self, seeds: Vec<(VarId, Vec<f64>)>) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes.is_empty() {
            return Err(shape_err("backward", "empty tape"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            if g.len() != self.nodes[v.0].value.len() {
                return Err(shape_err("backward", format!("seed length {} for {:?}", g.len(), self.nodes[v.0].shape)));
            }
            top = top.max(v.0);
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        for i in (0..=top).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf | Op::Param);
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        self.grads = grads;
        self.consumed = true;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        // accumulate into an input's gradient buffer, if it wants one
        let acc = |grads: &mut [Option<Vec<f64>>], v: VarId, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].needs_grad {
                let n = nodes[v.0].value.len();
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                f(buf);
            }
        };
        let wants = |v: VarId| nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Reshape(x) => acc(grads, *x, &mut |b| add_into(b, g)),
            Op::Transpose(x) => {
                let (r, c) = (node.shape[1], node.shape[0]);
                acc(grads, *x, &mut |b| {
                    for i in 0..r {
                        for j in 0..c {
                            b[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = nodes[x.0].value.len();
                    acc(grads, x, &mut |b| add_into(b, &g[off..off + n]));
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let row = numel(&node.shape[1..]);
                let s = start * row;
                acc(grads, *x, &mut |b| add_into(&mut b[s..s + g.len()], g));
            }
            Op::GatherRows { x, index } => {
                let c = node.shape[1];
                acc(grads, *x, &mut |b| {
                    for (r, ix) in index.iter().enumerate() {
                        if let Some(i) = *ix {
                            add_into(&mut b[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(grads, *a, &mut |buf| add_into(buf, g));
                acc(grads, *b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |buf| add_into(buf, g));
                acc(grads, *b, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(grads, *a, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] * vb[k];
                    }
                });
                acc(grads, *b, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] * va[k];
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(grads, *a, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] += g[k] / vb[k];
                    }
                });
                acc(grads, *b, &mut |buf| {
                    for k in 0..buf.len() {
                        buf[k] -= g[k] * va[k] / (vb[k] * vb[k]);
                    }
                });
            }
            Op::AddRow { x, row } => {
                acc(grads, *x, &mut |buf| add_into(buf, g));
                let c = nodes[row.0].value.len();
                acc(grads, *row, &mut |buf| {
                    for chunk in g.chunks_exact(c) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::Scale(x, s) => acc(grads, *x, &mut |b| b.iter_mut().zip(g).for_each(|(a, v)| *a += s * v)),
            Op::AddScalar(x) => acc(grads, *x, &mut |b| add_into(b, g)),
            Op::Sum(x) => acc(grads, *x, &mut |b| b.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(grads, *x, &mut |b| b.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (na, nb) = (&nodes[a.0], &nodes[b.0]);
                let mut ma = MatRef::new(&na.value, na.shape[0], na.shape[1]);
                let mut mb = MatRef::new(&nb.value, nb.shape[0], nb.shape[1]);
                if *ta {
                    ma = ma.t();
                }
                if *tb {
                    mb = mb.t();
                }
                let (m, n) = (ma.rows, mb.cols);
                let gm = MatRef::new(g, m, n);
                if wants(*a) {
                    acc(grads, *a, &mut |buf| {
                        // dA (stored layout) = g op(B)^T, or its transpose
                        if *ta {
                            kernels::gemm(1.0, mb, gm.t(), 1.0, MatMut::new(buf, na.shape[1]));
                        } else {
                            kernels::gemm(1.0, gm, mb.t(), 1.0, MatMut::new(buf, na.shape[1]));
                        }
                    });
                }
                if wants(*b) {
                    acc(grads, *b, &mut |buf| {
                        if *tb {
                            kernels::gemm(1.0, gm.t(), ma, 1.0, MatMut::new(buf, nb.shape[1]));
                        } else {
                            kernels::gemm(1.0, ma.t(), gm, 1.0, MatMut::new(buf, nb.shape[1]));
                        }
                    });
                }
            }
            Op::Affine { x, w, b } => {
                let (nx, nw) = (&nodes[x.0], &nodes[w.0]);
                let (din, dout) = (nw.shape[0], nw.shape[1]);
                let rows = nx.value.len() / din;
                let gm = MatRef::new(g, rows, dout);
                if wants(*x) {
                    acc(grads, *x, &mut |buf| {
                        kernels::gemm(1.0, gm, MatRef::new(&nw.value, din, dout).t(), 1.0, MatMut::new(buf, din));
                    });
                }
                if wants(*w) {
                    acc(grads, *w, &mut |buf| {
                        kernels::gemm(1.0, MatRef::new(&nx.value, rows, din).t(), gm, 1.0, MatMut::new(buf, dout));
                    });
                }
                acc(grads, *b, &mut |buf| {
                    for chunk in g.chunks_exact(dout) {
                        add_into(buf, chunk);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(grads, *x, &mut |b| {
                    for k in 0..b.len() {
                        b[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                acc(grads, *x, &mut |b| {
                    for k in 0..b.len() {
                        b[k] += g[k] * kernels::gelu_grad(xv[k]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let len = node.shape[*axis];
                let inner = numel(&node.shape[axis + 1..]);
                let outer = numel(&node.shape[..*axis]);
                acc(grads, *x, &mut |b| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                b[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xv = &nodes[x.0].value;
                let gv = &nodes[gamma.0].value;
                let d = gv.len();
                let rows = xv.len() / d;
                if wants(*gamma) || wants(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            let xh = (xv[r * d + j] - mean[r]) * rstd[r];
                            dg[j] += g[r * d + j] * xh;
                            db[j] += g[r * d + j];
                        }
                    }
                    acc(grads, *gamma, &mut |b| add_into(b, &dg));
                    acc(grads, *beta, &mut |b| add_into(b, &db));
                }
                acc(grads, *x, &mut |b| {
                    let mut dxh = vec![0.0; d];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let xh = (xv[r * d + j] - mean[r]) * rstd[r];
                            dxh[j] = g[r * d + j] * gv[j];
                            m1 += dxh[j];
                            m2 += dxh[j] * xh;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let xh = (xv[r * d + j] - mean[r]) * rstd[r];
                            b[r * d + j] += rstd[r] * (dxh[j] - m1 - xh * m2);
                        }
                    }
                });
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let nx = &nodes[x.0];
                let xv = &nx.value;
                let gv = &nodes[gamma.0].value;
                let c = nx.shape[0];
                let hw = nx.shape[1] * nx.shape[2];
                let cpg = c / groups;
                if wants(*gamma) || wants(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for ch in 0..c {
                        let gi = ch / cpg;
                        for p in 0..hw {
                            let k = ch * hw + p;
                            dg[ch] += g[k] * (xv[k] - mean[gi]) * rstd[gi];
                            db[ch] += g[k];
                        }
                    }
                    acc(grads, *gamma, &mut |b| add_into(b, &dg));
                    acc(grads, *beta, &mut |b| add_into(b, &db));
                }
                acc(grads, *x, &mut |b| {
                    let len = (cpg * hw) as f64;
                    for gi in 0..*groups {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for ci in 0..cpg {
                            let ch = gi * cpg + ci;
                            for p in 0..hw {
                                let k = ch * hw + p;
                                let dxh = g[k] * gv[ch];
                                m1 += dxh;
                                m2 += dxh * (xv[k] - mean[gi]) * rstd[gi];
                            }
                        }
                        m1 /= len;
                        m2 /= len;
                        for ci in 0..cpg {
                            let ch = gi * cpg + ci;
                            for p in 0..hw {
                                let k = ch * hw + p;
                                let xh = (xv[k] - mean[gi]) * rstd[gi];
                                b[k] += rstd[gi] * (g[k] * gv[ch] - m1 - xh * m2);
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, k, bias, geom } => {
                let (dx, dk, db) = kernels::conv2d_backward(&nodes[x.0].value, &nodes[k.0].value, g, geom, wants(*x), wants(*k));
                if let Some(dx) = dx {
                    acc(grads, *x, &mut |b| add_into(b, &dx));
                }
                if let Some(dk) = dk {
                    acc(grads, *k, &mut |b| add_into(b, &dk));
                }
                if let Some(bv) = bias {
                    acc(grads, *bv, &mut |b| add_into(b, &db));
                }
            }
            Op::BilinearSample { f, pts } => {
                let nf = &nodes[f.0];
                let pv = &nodes[pts.0].value;
                let (c, h, w) = (nf.shape[0], nf.shape[1], nf.shape[2]);
                let want_f = wants(*f);
                let want_p = wants(*pts);
                let mut df = want_f.then(|| vec![0.0; nf.value.len()]);
                let mut dp = want_p.then(|| vec![0.0; pv.len()]);
                for (i, xy) in pv.chunks_exact(2).enumerate() {
                    let gr = &g[i * c..(i + 1) * c];
                    for t in kernels::bilinear_taps(xy[0], xy[1], h, w) {
                        let Some(ix) = t.index else { continue };
                        if let Some(df) = df.as_mut() {
                            for ch in 0..c {
                                df[ch * h * w + ix] += t.weight * gr[ch];
                            }
                        }
                        if let Some(dp) = dp.as_mut() {
                            let s: f64 = (0..c).map(|ch| gr[ch] * nf.value[ch * h * w + ix]).sum();
                            dp[i * 2] += t.dx * s;
                            dp[i * 2 + 1] += t.dy * s;
                        }
                    }
                }
                if let Some(df) = df {
                    acc(grads, *f, &mut |b| add_into(b, &df));
                }
                if let Some(dp) = dp {
                    acc(grads, *pts, &mut |b| add_into(b, &dp));
                }
            }
            Op::Attention { q, k, v, table, layout, probs } => {
                self.attention_backward(g, *q, *k, *v, *table, layout, probs, grads);
            }
            Op::MsDeform { value, offsets, weights, refs, levels, heads, points } => {
                let nv = &nodes[value.0];
                let ov = &nodes[offsets.0].value;
                let wv = &nodes[weights.0].value;
                let d = nv.shape[1];
                let dh = d / heads;
                let nl = levels.len();
                let nq = refs.len() / 2;
                let n_off = heads * nl * points * 2;
                let n_w = heads * nl * points;
                let mut dv = wants(*value).then(|| vec![0.0; nv.value.len()]);
                let mut doff = vec![0.0; ov.len()];
                let mut dw = vec![0.0; wv.len()];
                for q in 0..nq {
                    let (rx, ry) = (refs[q * 2], refs[q * 2 + 1]);
                    for h in 0..*heads {
                        let gq = &g[q * d + h * dh..q * d + (h + 1) * dh];
                        for (l, lv) in levels.iter().enumerate() {
                            for p in 0..*points {
                                let s = (h * nl + l) * points + p;
                                let px = rx * lv.w as f64 + ov[q * n_off + s * 2];
                                let py = ry * lv.h as f64 + ov[q * n_off + s * 2 + 1];
                                let aw = wv[q * n_w + s];
                                let mut dpx = 0.0;
                                let mut dpy = 0.0;
                                let mut dwt = 0.0;
                                for t in kernels::bilinear_taps(px, py, lv.h, lv.w) {
                                    let Some(ix) = t.index else { continue };
                                    let base = (lv.start + ix) * d + h * dh;
                                    let row = &nv.value[base..base + dh];
                                    let gdotv: f64 = gq.iter().zip(row).map(|(a, b)| a * b).sum();
                                    dwt += t.weight * gdotv;
                                    dpx += aw * t.dx * gdotv;
                                    dpy += aw * t.dy * gdotv;
                                    if let Some(dv) = dv.as_mut() {
                                        let coef = aw * t.weight;
                                        dv[base..base + dh].iter_mut().zip(gq).for_each(|(a, b)| *a += coef * b);
                                    }
                                }
                                dw[q * n_w + s] += dwt;
                                doff[q * n_off + s * 2] += dpx;
                                doff[q * n_off + s * 2 + 1] += dpy;
                            }
                        }
                    }
                }
                if let Some(dv) = dv {
                    acc(grads, *value, &mut |b| add_into(b, &dv));
                }
                acc(grads, *offsets, &mut |b| add_into(b, &doff));
                acc(grads, *weights, &mut |b| add_into(b, &dw));
            }
            Op::BceWithLogits { x, target } => {
                let xv = &nodes[x.0].value;
                let n = target.len() as f64;
                acc(grads, *x, &mut |b| {
                    for k in 0..b.len() {
                        b[k] += g[0] * (kernels::sigmoid(xv[k]) - target[k]) / n;
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: VarId,
        k: VarId,
        v: VarId,
        table: Option<VarId>,
        layout: &AttentionLayout,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let (nq, nk, nv) = (&nodes[q.0], &nodes[k.0], &nodes[v.0]);
        let d = nq.shape[1];
        let heads = layout.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (ql, kl) = (layout.q_len, layout.k_len);
        let mut dq = vec![0.0; nq.value.len()];
        let mut dk = vec![0.0; nk.value.len()];
        let mut dv = vec![0.0; nv.value.len()];
        let mut dtable = table.map(|t| vec![0.0; nodes[t.0].value.len()]);
        let qm = MatRef::new(&nq.value, nq.shape[0], d);
        let km = MatRef::new(&nk.value, nk.shape[0], d);
        let vm = MatRef::new(&nv.value, nv.shape[0], d);
        let gm = MatRef::new(g, nq.shape[0], d);
        let mut ds = vec![0.0; ql * kl];
        for b in 0..layout.blocks {
            for h in 0..heads {
                let pbase = (b * heads + h) * ql * kl;
                let p = &probs[pbase..pbase + ql * kl];
                let go = gm.rows(b * ql, ql).cols(h * dh, dh);
                // dP = dO V^T
                kernels::gemm(1.0, go, vm.rows(b * kl, kl).cols(h * dh, dh).t(), 0.0, MatMut::new(&mut ds, kl));
                // dV += P^T dO
                kernels::gemm(
                    1.0,
                    MatRef::new(p, ql, kl).t(),
                    go,
                    1.0,
                    MatMut {
                        data: &mut dv,
                        offset: b * kl * d + h * dh,
                        row_stride: d as isize,
                        col_stride: 1,
                    },
                );
                for i in 0..ql {
                    let pr = &p[i * kl..(i + 1) * kl];
                    let dr = &mut ds[i * kl..(i + 1) * kl];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..kl {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                }
                if let (Some(dt), Some(idx)) = (dtable.as_mut(), layout.bias_index.as_ref()) {
                    for (ij, &r) in idx.iter().enumerate() {
                        dt[r * heads + h] += ds[ij];
                    }
                }
                kernels::gemm(
                    scale,
                    MatRef::new(&ds, ql, kl),
                    km.rows(b * kl, kl).cols(h * dh, dh),
                    1.0,
                    MatMut {
                        data: &mut dq,
                        offset: b * ql * d + h * dh,
                        row_stride: d as isize,
                        col_stride: 1,
                    },
                );
                kernels::gemm(
                    scale,
                    MatRef::new(&ds, ql, kl).t(),
                    qm.rows(b * ql, ql).cols(h * dh, dh),
                    1.0,
                    MatMut {
                        data: &mut dk,
                        offset: b * kl * d + h * dh,
                        row_stride: d as isize,
                        col_stride: 1,
                    },
                );
            }
        }
        let mut put = |v: VarId, src: &[f64]| {
            if nodes[v.0].needs_grad {
                let n = nodes[v.0].value.len();
                add_into(grads[v.0].get_or_insert_with(|| vec![0.0; n]), src);
            }
        };
        put(q, &dq);
        put(k, &dk);
        put(v, &dv);
        if let (Some(t), Some(dt)) = (table, dtable) {
            put(t, &dt);
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

/// In-place softmax; a row with no finite entry becomes all zeros.
fn softmax_row(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}
