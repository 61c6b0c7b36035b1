use std::collections::HashMap;

use super::kernels::gemm;
use super::{numel, Tensor};
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
enum Bcast {
    Same,
    /// Right operand is a vector matching the trailing axis.
    Row,
    /// Right operand holds a single value.
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
        bcast: Bcast,
    },
    Scale(Var, f64),
    Div(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        b_t: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_t: bool,
    },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LogSoftmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        width: usize,
        rstd: Vec<f64>,
    },
    SelectRows {
        src: Var,
        idx: Vec<usize>,
        width: usize,
    },
    ScatterRows {
        src: Var,
        idx: Vec<usize>,
        width: usize,
    },
    ScaleRows {
        x: Var,
        s: Var,
        width: usize,
    },
    Pick {
        x: Var,
        cols: Vec<usize>,
        width: usize,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        src_index: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    SumAxis {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        w: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Records operations in execution order; [`Tape::backward`] replays them in
/// reverse. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    no_grad: bool,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let n = shape[axis];
    let inner = numel(&shape[axis + 1..]);
    (outer, n, inner)
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records values only: parameters bind as constants and
    /// nothing is tracked.
    pub fn no_grad() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`, along with any
    /// parameter bindings and gradients that refer to them.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.nodes.len() {
            return;
        }
        self.nodes.truncate(len);
        self.params.retain(|_, v| v.0 < len);
        self.param_order.retain(|(_, v)| v.0 < len);
        self.leaf_grads.retain(|&i, _| i < len);
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let tracked = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf_node(&mut self, shape: Vec<usize>, value: Vec<f64>, tracked: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            tracked: tracked && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.leaf_node(t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.leaf_node(shape, t.into_data(), false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::dim("constant", shape, &[data.len()]));
        }
        Ok(self.leaf_node(shape.to_vec(), data, false))
    }

    /// Binds a named parameter. Binding the same name twice returns the same
    /// leaf, so aliased parameters collect gradient from every use.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf_node(t.shape().to_vec(), t.data().to_vec(), true);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        v
    }

    pub fn bound_param(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let (shape, value) = (node.shape.clone(), node.value.clone());
        self.leaf_node(shape, value, false)
    }

    pub fn value(&self, x: Var) -> &[f64] {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        &self.nodes[x.0].shape
    }

    pub fn is_tracked(&self, x: Var) -> bool {
        self.nodes[x.0].tracked
    }

    pub fn scalar(&self, x: Var) -> f64 {
        self.nodes[x.0].value[0]
    }

    pub fn tensor(&self, x: Var) -> Tensor {
        let n = &self.nodes[x.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self, x: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&x.0).map(Vec::as_slice)
    }

    /// Gradients of bound parameters in binding order.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, Option<&[f64]>)> {
        self.param_order
            .iter()
            .map(|(name, v)| (name.as_str(), self.grad(*v)))
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.clear();
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let bcast = if sa == sb {
            Bcast::Same
        } else if numel(sb) == 1 {
            Bcast::Scalar
        } else if sb.len() == 1 && sa.last() == Some(&sb[0]) {
            Bcast::Row
        } else {
            return Err(Error::dim(name, sa, sb));
        };
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let w = vb.len();
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
        };
        let out: Vec<f64> = match bcast {
            Bcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => va.iter().map(|&x| f(x, vb[0])).collect(),
            Bcast::Row => va
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, vb[i % w]))
                .collect(),
        };
        let shape = sa.clone();
        Ok(self.push(shape, out, Op::Binary { kind, a, b, bcast }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Scale(x, c), &[x])
    }

    /// `x / c`, exact where `x * (1/c)` would round.
    pub fn div_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| v / c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Div(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| v.exp()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|v| v.ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, out, Op::Log(x), &[x])
    }

    /// Replaces positions where `mask` is true with `value`; those positions
    /// pass no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: Vec<bool>, value: f64) -> Result<Var> {
        let node = &self.nodes[x.0];
        if mask.len() != node.value.len() {
            return Err(Error::dim("masked_fill", &node.shape, &[mask.len()]));
        }
        let out = node
            .value
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let shape = node.shape.clone();
        Ok(self.push(shape, out, Op::MaskedFill { x, mask }, &[x]))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `a[..., k] · b[k, n]`, or `a · bᵀ` for `b[n, k]` when `b_t`. Leading
    /// axes of `a` are kept.
    pub fn matmul_ex(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.is_empty() || sb.len() != 2 {
            return Err(Error::dim("matmul", sa, sb));
        }
        let k = *sa.last().unwrap();
        let (bk, n) = if b_t { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != bk {
            return Err(Error::dim("matmul", sa, sb));
        }
        let m = numel(sa) / k;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.nodes[a.0].value,
            false,
            &self.nodes[b.0].value,
            b_t,
            &mut out,
            false,
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Ok(self.push(shape, out, Op::MatMul { a, b, m, k, n, b_t }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// Batched product over matching leading axes: `a[.., m, k] · b[.., k, n]`
    /// (`b[.., n, k]` transposed when `b_t`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() < 3 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::dim("batch_matmul", sa, sb));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (bk, n) = if b_t {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != bk {
            return Err(Error::dim("batch_matmul", sa, sb));
        }
        let batch = numel(&sa[..r - 2]);
        let mut out = vec![0.0; batch * m * n];
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                false,
                &vb[i * k * n..(i + 1) * k * n],
                b_t,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.push(
            shape,
            out,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_t,
            },
            &[a, b],
        ))
    }

    // ---- normalisation -----------------------------------------------------

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = &self.nodes[x.0].shape;
        if axis >= shape.len() {
            return Err(Error::dim(op, shape, &[axis]));
        }
        Ok(split_axis(shape, axis))
    }

    /// Softmax along `axis`, stabilised by subtracting the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("softmax", x, axis)?;
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| v[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (v[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, out, Op::Softmax { x, outer, n, inner }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("log_softmax", x, axis)?;
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| v[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = (0..n).map(|j| (v[at(j)] - max).exp()).sum::<f64>().ln() + max;
                for j in 0..n {
                    out[at(j)] = v[at(j)] - lse;
                }
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, out, Op::LogSoftmax { x, outer, n, inner }, &[x]))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let width = *shape.last().ok_or_else(|| Error::dim("layer_norm", &shape, &[]))?;
        for p in [gamma, beta] {
            if self.nodes[p.0].shape != [width] {
                return Err(Error::dim("layer_norm", &shape, &self.nodes[p.0].shape));
            }
        }
        let v = &self.nodes[x.0].value;
        let (g, b) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let rows = v.len() / width;
        let mut out = vec![0.0; v.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &v[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / width as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..width {
                out[r * width + j] = (row[j] - mean) * s * g[j] + b[j];
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                width,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- indexing ----------------------------------------------------------

    /// Rows `idx` of `src` viewed as `[N, ...]`. Also serves as embedding
    /// lookup; the backward pass scatter-adds.
    pub fn select_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let shape = &self.nodes[src.0].shape;
        if shape.is_empty() {
            return Err(Error::dim("select_rows", shape, &[]));
        }
        let rows = shape[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "select_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let width = numel(&shape[1..]);
        let v = &self.nodes[src.0].value;
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            out.extend_from_slice(&v[i * width..(i + 1) * width]);
        }
        let mut out_shape = vec![idx.len()];
        out_shape.extend_from_slice(&shape[1..]);
        let idx = idx.to_vec();
        Ok(self.push(out_shape, out, Op::SelectRows { src, idx, width }, &[src]))
    }

    /// Places row `r` of `src` at row `idx[r]` of an `n_rows` tensor of zeros.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let shape = &self.nodes[src.0].shape;
        if shape.is_empty() || shape[0] != idx.len() {
            return Err(Error::dim("scatter_rows", shape, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_rows) {
            return Err(Error::contract(format!(
                "scatter_rows: index {bad} out of range for {n_rows} rows"
            )));
        }
        let width = numel(&shape[1..]);
        let v = &self.nodes[src.0].value;
        let mut out = vec![0.0; n_rows * width];
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..width {
                out[i * width + j] += v[r * width + j];
            }
        }
        let mut out_shape = vec![n_rows];
        out_shape.extend_from_slice(&shape[1..]);
        let idx = idx.to_vec();
        Ok(self.push(out_shape, out, Op::ScatterRows { src, idx, width }, &[src]))
    }

    /// Multiplies row `r` of `x` (viewed as `[N, ...]`) by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (&self.nodes[x.0].shape, &self.nodes[s.0].shape);
        if sx.is_empty() || numel(ss) != sx[0] {
            return Err(Error::dim("scale_rows", sx, ss));
        }
        let width = numel(&sx[1..]);
        let (vx, vs) = (&self.nodes[x.0].value, &self.nodes[s.0].value);
        let out = vx
            .iter()
            .enumerate()
            .map(|(i, &v)| v * vs[i / width])
            .collect();
        let shape = sx.clone();
        Ok(self.push(shape, out, Op::ScaleRows { x, s, width }, &[x, s]))
    }

    /// `out[r] = x[r, cols[r]]` over the last axis.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let shape = &self.nodes[x.0].shape;
        let width = *shape.last().ok_or_else(|| Error::dim("pick", shape, &[]))?;
        let rows = numel(shape) / width;
        if cols.len() != rows {
            return Err(Error::dim("pick", shape, &[cols.len()]));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= width) {
            return Err(Error::contract(format!(
                "pick: index {bad} out of range for width {width}"
            )));
        }
        let v = &self.nodes[x.0].value;
        let out = cols
            .iter()
            .enumerate()
            .map(|(r, &c)| v[r * width + c])
            .collect();
        let out_shape = shape[..shape.len() - 1].to_vec();
        let cols = cols.to_vec();
        Ok(self.push(out_shape, out, Op::Pick { x, cols, width }, &[x]))
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = &self.nodes[x.0].shape;
        if numel(old) != numel(shape) || shape.contains(&0) {
            return Err(Error::dim("reshape", old, shape));
        }
        let value = self.nodes[x.0].value.clone();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let r = shape.len();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", &shape, axes));
        }
        let mut in_strides = vec![1; r];
        for d in (0..r.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let total = numel(&shape);
        let mut src_index = Vec::with_capacity(total);
        let mut counter = vec![0usize; r];
        let mut offset = 0usize;
        for _ in 0..total {
            src_index.push(offset);
            for d in (0..r).rev() {
                counter[d] += 1;
                offset += strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                offset -= strides[d] * out_shape[d];
                counter[d] = 0;
            }
        }
        let v = &self.nodes[x.0].value;
        let out = src_index.iter().map(|&i| v[i]).collect();
        Ok(self.push(out_shape, out, Op::Permute { x, src_index }, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.nodes[x.0].shape.len();
        if r < 2 {
            return Err(Error::dim("transpose", &self.nodes[x.0].shape, &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.nodes[first.0].shape.clone();
        if axis >= base.len() {
            return Err(Error::dim("concat", &base, &[axis]));
        }
        let mut total_axis = 0;
        for x in xs {
            let s = &self.nodes[x.0].shape;
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total_axis += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let chunks: Vec<usize> = xs
            .iter()
            .map(|x| self.nodes[x.0].shape[axis] * inner)
            .collect();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for (x, &c) in xs.iter().zip(&chunks) {
                out.extend_from_slice(&self.nodes[x.0].value[o * c..(o + 1) * c]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                chunks,
            },
            xs,
        ))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.check_axis("sum_axis", x, axis)?;
        let v = &self.nodes[x.0].value;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += v[o * n * inner + j * inner + i];
                }
            }
        }
        let mut shape = self.nodes[x.0].shape.clone();
        shape.remove(axis);
        Ok(self.push(shape, out, Op::SumAxis { x, outer, n, inner }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        self.push(vec![], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len() as f64;
        let s = self.sum(x);
        self.div_scalar(s, n)
    }

    /// `Σ w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<f64>) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if w.len() != v.len() {
            return Err(Error::dim("weighted_sum", &self.nodes[x.0].shape, &[w.len()]));
        }
        let s = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        Ok(self.push(vec![], vec![s], Op::WeightedSum { x, w }, &[x]))
    }

    /// Sum over positions where `keep` is true.
    pub fn masked_sum(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let w = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        self.weighted_sum(x, w)
    }

    /// Mean over positions where `keep` is true.
    pub fn masked_mean(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::contract("masked_mean over an empty selection"));
        }
        let w = keep
            .iter()
            .map(|&k| if k { 1.0 / count as f64 } else { 0.0 })
            .collect();
        self.weighted_sum(x, w)
    }

    /// Index of the maximum along the last axis; not differentiable.
    pub fn argmax(&self, x: Var) -> Vec<usize> {
        let node = &self.nodes[x.0];
        super::argmax_rows(&node.value, node.shape.last().copied().unwrap_or(1))
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates d(loss)/d(·) to every tracked leaf. Leaf gradients add up
    /// across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        if !node.tracked {
            return Err(Error::contract("backward on a value that is not tracked"));
        }
        let Tape {
            nodes, leaf_grads, ..
        } = self;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.tracked {
                continue;
            }
            let val = |v: Var| nodes[v.0].value.as_slice();
            let tracked = |v: Var| nodes[v.0].tracked;
            match &node.op {
                Op::Leaf => match leaf_grads.get_mut(&i) {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        leaf_grads.insert(i, g);
                    }
                },
                &Op::Binary { kind, a, b, bcast } => {
                    let (va, vb) = (val(a), val(b));
                    let w = vb.len();
                    let bi = |j: usize| match bcast {
                        Bcast::Same => j,
                        Bcast::Row => j % w,
                        Bcast::Scalar => 0,
                    };
                    if tracked(a) {
                        let ga = acc(&mut grads, a, va.len());
                        for (j, gv) in g.iter().enumerate() {
                            ga[j] += match kind {
                                BinKind::Mul => gv * vb[bi(j)],
                                _ => *gv,
                            };
                        }
                    }
                    if tracked(b) {
                        let gb = acc(&mut grads, b, w);
                        for (j, gv) in g.iter().enumerate() {
                            gb[bi(j)] += match kind {
                                BinKind::Add => *gv,
                                BinKind::Sub => -gv,
                                BinKind::Mul => gv * va[j],
                            };
                        }
                    }
                }
                &Op::Scale(x, c) => {
                    let gx = acc(&mut grads, x, g.len());
                    gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b * c);
                }
                &Op::Div(x, c) => {
                    let gx = acc(&mut grads, x, g.len());
                    gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b / c);
                }
                &Op::MatMul { a, b, m, k, n, b_t } => {
                    if tracked(a) {
                        let ga = acc(&mut grads, a, m * k);
                        gemm(m, n, k, &g, false, val(b), !b_t, ga, true);
                    }
                    if tracked(b) {
                        let gb = acc(&mut grads, b, k * n);
                        if b_t {
                            gemm(n, m, k, &g, true, val(a), false, gb, true);
                        } else {
                            gemm(k, m, n, val(a), true, &g, false, gb, true);
                        }
                    }
                }
                &Op::BatchMatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    b_t,
                } => {
                    let (sa, sb, sc) = (m * k, k * n, m * n);
                    if tracked(a) {
                        let vb = val(b);
                        let ga = acc(&mut grads, a, batch * sa);
                        for t in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[t * sc..(t + 1) * sc],
                                false,
                                &vb[t * sb..(t + 1) * sb],
                                !b_t,
                                &mut ga[t * sa..(t + 1) * sa],
                                true,
                            );
                        }
                    }
                    if tracked(b) {
                        let va = val(a);
                        let gb = acc(&mut grads, b, batch * sb);
                        for t in 0..batch {
                            let (gs, as_, bs) = (
                                &g[t * sc..(t + 1) * sc],
                                &va[t * sa..(t + 1) * sa],
                                &mut gb[t * sb..(t + 1) * sb],
                            );
                            if b_t {
                                gemm(n, m, k, gs, true, as_, false, bs, true);
                            } else {
                                gemm(k, m, n, as_, true, gs, false, bs, true);
                            }
                        }
                    }
                }
                &Op::Relu(x) => {
                    let vx = val(x);
                    let gx = acc(&mut grads, x, g.len());
                    for j in 0..g.len() {
                        if vx[j] > 0.0 {
                            gx[j] += g[j];
                        }
                    }
                }
                &Op::Exp(x) => {
                    let y = &node.value;
                    let gx = acc(&mut grads, x, g.len());
                    for j in 0..g.len() {
                        gx[j] += g[j] * y[j];
                    }
                }
                &Op::Log(x) => {
                    let vx = val(x);
                    let gx = acc(&mut grads, x, g.len());
                    for j in 0..g.len() {
                        gx[j] += g[j] / vx[j];
                    }
                }
                &Op::Softmax { x, outer, n, inner } => {
                    let y = &node.value;
                    let gx = acc(&mut grads, x, g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
                &Op::LogSoftmax { x, outer, n, inner } => {
                    let y = &node.value;
                    let gx = acc(&mut grads, x, g.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let total: f64 = (0..n).map(|j| g[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] += g[at(j)] - y[at(j)].exp() * total;
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    width,
                    rstd,
                } => {
                    let (x, gamma, beta, width) = (*x, *gamma, *beta, *width);
                    let vx = val(x);
                    let gam = val(gamma);
                    let rows = vx.len() / width;
                    let wf = width as f64;
                    let mut xhat = vec![0.0; width];
                    let mut gxhat = vec![0.0; width];
                    let mut dgamma = vec![0.0; width];
                    let mut dbeta = vec![0.0; width];
                    let mut dx = if tracked(x) {
                        Some(vec![0.0; vx.len()])
                    } else {
                        None
                    };
                    for r in 0..rows {
                        let row = &vx[r * width..(r + 1) * width];
                        let grow = &g[r * width..(r + 1) * width];
                        let mean = row.iter().sum::<f64>() / wf;
                        for j in 0..width {
                            xhat[j] = (row[j] - mean) * rstd[r];
                            gxhat[j] = grow[j] * gam[j];
                            dgamma[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                        }
                        if let Some(dx) = dx.as_mut() {
                            let m1 = gxhat.iter().sum::<f64>() / wf;
                            let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / wf;
                            for j in 0..width {
                                dx[r * width + j] = rstd[r] * (gxhat[j] - m1 - xhat[j] * m2);
                            }
                        }
                    }
                    if let Some(dx) = dx {
                        let gx = acc(&mut grads, x, vx.len());
                        gx.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
                    }
                    if tracked(gamma) {
                        let gg = acc(&mut grads, gamma, width);
                        gg.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b);
                    }
                    if tracked(beta) {
                        let gb = acc(&mut grads, beta, width);
                        gb.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b);
                    }
                }
                Op::SelectRows { src, idx, width } => {
                    let len = nodes[src.0].value.len();
                    let gs = acc(&mut grads, *src, len);
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..*width {
                            gs[i * width + j] += g[r * width + j];
                        }
                    }
                }
                Op::ScatterRows { src, idx, width } => {
                    let len = nodes[src.0].value.len();
                    let gs = acc(&mut grads, *src, len);
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..*width {
                            gs[r * width + j] += g[i * width + j];
                        }
                    }
                }
                &Op::ScaleRows { x, s, width } => {
                    let (vx, vs) = (val(x), val(s));
                    if tracked(x) {
                        let gx = acc(&mut grads, x, vx.len());
                        for j in 0..g.len() {
                            gx[j] += g[j] * vs[j / width];
                        }
                    }
                    if tracked(s) {
                        let gs = acc(&mut grads, s, vs.len());
                        for j in 0..g.len() {
                            gs[j / width] += g[j] * vx[j];
                        }
                    }
                }
                Op::Pick { x, cols, width } => {
                    let len = nodes[x.0].value.len();
                    let gx = acc(&mut grads, *x, len);
                    for (r, &c) in cols.iter().enumerate() {
                        gx[r * width + c] += g[r];
                    }
                }
                Op::MaskedFill { x, mask } => {
                    let gx = acc(&mut grads, *x, g.len());
                    for j in 0..g.len() {
                        if !mask[j] {
                            gx[j] += g[j];
                        }
                    }
                }
                &Op::Reshape(x) => {
                    let gx = acc(&mut grads, x, g.len());
                    gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Permute { x, src_index } => {
                    let gx = acc(&mut grads, *x, g.len());
                    for (o, &i) in src_index.iter().enumerate() {
                        gx[i] += g[o];
                    }
                }
                Op::Concat { xs, outer, chunks } => {
                    let row: usize = chunks.iter().sum();
                    let mut start = 0;
                    for (x, &c) in xs.iter().zip(chunks) {
                        if tracked(*x) {
                            let gx = acc(&mut grads, *x, outer * c);
                            for o in 0..*outer {
                                for j in 0..c {
                                    gx[o * c + j] += g[o * row + start + j];
                                }
                            }
                        }
                        start += c;
                    }
                }
                &Op::SumAxis { x, outer, n, inner } => {
                    let gx = acc(&mut grads, x, outer * n * inner);
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                gx[o * n * inner + j * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
                &Op::Sum(x) => {
                    let len = nodes[x.0].value.len();
                    let gx = acc(&mut grads, x, len);
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
                Op::WeightedSum { x, w } => {
                    let gx = acc(&mut grads, *x, w.len());
                    gx.iter_mut().zip(w).for_each(|(a, b)| *a += g[0] * b);
                }
            }
        }
        Ok(())
    }
}
