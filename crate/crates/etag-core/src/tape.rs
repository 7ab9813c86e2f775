//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive as it executes; nodes are appended in
//! execution order, which is a topological order by construction. `backward`
//! walks the record once in reverse, accumulating gradients into every node
//! that (transitively) depends on a differentiable leaf. Leaves carry their
//! own `requires_grad` flag, so binding a frozen snapshot simply records
//! constants and no gradient can reach it.
//!
//! Conventions, applied uniformly and mirrored by the finite-difference
//! checks in [`crate::gradcheck`]:
//! - `ln` and the KL ratio clamp their argument below at [`CLAMP_FLOOR`];
//! - `relu` and `sqrt` take derivative 0 at the kink;
//! - KL uses `0 * ln(0/q) = 0`;
//! - no broadcasting beyond the explicit scalar and bias ops.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::Tensor;

/// Lower clamp applied inside `ln` and the KL ratio.
pub const CLAMP_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    AddBias(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    MeanAll(usize),
    SumAll(usize),
    SumCols(usize),
    Softmax { x: usize, tau: f64 },
    CrossEntropy { logits: usize, labels: Vec<usize> },
    KlDiv { p: usize, q: usize },
    Conv2d { x: usize, w: usize, dims: ConvDims },
    GlobalAvgPool(usize),
    ConcatCols(usize, usize),
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    Reshape(usize),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Row-wise numerically stabilized softmax with temperature.
fn softmax_rows(x: &[f64], cols: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, out_row) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = ((v - max) / tau).exp();
            z += *o;
        }
        for o in out_row.iter_mut() {
            *o /= z;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, shape, values, grad: None, requires_grad });
        Var(nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records a leaf honoring the tensor's own `requires_grad` flag.
    pub fn input(&self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.values().to_vec(), t.requires_grad)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.values().to_vec(), false)
    }

    /// Records a differentiable leaf.
    pub fn param(&self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.values().to_vec(), true)
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.values.clone()).expect("node invariant")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        if n.values.len() != 1 {
            return Err(Error::shape(format!("expected scalar node, got shape {:?}", n.shape)));
        }
        Ok(n.values[0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires(v)
    }

    /// Gradient of the last `backward` with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.shape.clone(), g.clone()).expect("grad shape invariant"))
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) -> Result<(Vec<usize>, bool)> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        if na.shape != nb.shape {
            return Err(Error::shape(format!(
                "{name}: shape {:?} vs {:?}",
                na.shape, nb.shape
            )));
        }
        Ok((na.shape.clone(), na.requires_grad || nb.requires_grad))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary_same_shape(a, b, "add")?;
        let vals = {
            let nodes = self.nodes.borrow();
            nodes[a.0].values.iter().zip(&nodes[b.0].values).map(|(x, y)| x + y).collect()
        };
        Ok(self.push(Op::Add(a.0, b.0), shape, vals, rg))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary_same_shape(a, b, "sub")?;
        let vals = {
            let nodes = self.nodes.borrow();
            nodes[a.0].values.iter().zip(&nodes[b.0].values).map(|(x, y)| x - y).collect()
        };
        Ok(self.push(Op::Sub(a.0, b.0), shape, vals, rg))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary_same_shape(a, b, "mul")?;
        let vals = {
            let nodes = self.nodes.borrow();
            nodes[a.0].values.iter().zip(&nodes[b.0].values).map(|(x, y)| x * y).collect()
        };
        Ok(self.push(Op::Mul(a.0, b.0), shape, vals, rg))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let (shape, vals, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (n.shape.clone(), n.values.iter().map(|x| x * c).collect(), n.requires_grad)
        };
        self.push(Op::Scale(a.0, c), shape, vals, rg)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let (shape, vals, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (n.shape.clone(), n.values.iter().map(|x| x + c).collect(), n.requires_grad)
        };
        self.push(Op::AddScalar(a.0, c), shape, vals, rg)
    }

    fn unary_map(&self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (shape, vals, rg) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (n.shape.clone(), n.values.iter().map(|&x| f(x)).collect(), n.requires_grad)
        };
        self.push(op, shape, vals, rg)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary_map(a, Op::Relu(a.0), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary_map(a, Op::Exp(a.0), f64::exp)
    }

    /// Natural log, clamped below at [`CLAMP_FLOOR`].
    pub fn ln(&self, a: Var) -> Var {
        self.unary_map(a, Op::Ln(a.0), |x| x.max(CLAMP_FLOOR).ln())
    }

    /// Square root on the nonnegative domain; derivative 0 at the origin.
    pub fn sqrt(&self, a: Var) -> Var {
        self.unary_map(a, Op::Sqrt(a.0), |x| x.max(0.0).sqrt())
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let (n, rg, sum) = {
            let nodes = self.nodes.borrow();
            let nd = &nodes[a.0];
            (nd.values.len(), nd.requires_grad, nd.values.iter().sum::<f64>())
        };
        if n == 0 {
            return Err(Error::domain("mean of an empty tensor".to_string()));
        }
        Ok(self.push(Op::MeanAll(a.0), vec![], vec![sum / n as f64], rg))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let (rg, sum) = {
            let nodes = self.nodes.borrow();
            let nd = &nodes[a.0];
            (nd.requires_grad, nd.values.iter().sum::<f64>())
        };
        self.push(Op::SumAll(a.0), vec![], vec![sum], rg)
    }

    /// Per-row sum of a 2-d tensor: `[n, m] -> [n]`.
    pub fn sum_cols(&self, a: Var) -> Result<Var> {
        let (rows, vals, rg) = {
            let nodes = self.nodes.borrow();
            let nd = &nodes[a.0];
            if nd.shape.len() != 2 {
                return Err(Error::shape(format!("sum_cols expects 2-d, got {:?}", nd.shape)));
            }
            let m = nd.shape[1];
            let vals: Vec<f64> = nd.values.chunks(m).map(|r| r.iter().sum()).collect();
            (nd.shape[0], vals, nd.requires_grad)
        };
        Ok(self.push(Op::SumCols(a.0), vec![rows], vals, rg))
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (n, k, m, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
                return Err(Error::shape(format!(
                    "matmul: {:?} x {:?}",
                    na.shape, nb.shape
                )));
            }
            (na.shape[0], na.shape[1], nb.shape[1], na.requires_grad || nb.requires_grad)
        };
        let vals = {
            let nodes = self.nodes.borrow();
            kernels::matmul(&nodes[a.0].values, &nodes[b.0].values, n, k, m)
        };
        Ok(self.push(Op::Matmul(a.0, b.0), vec![n, m], vals, rg))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (n, m, vals, rg) = {
            let nodes = self.nodes.borrow();
            let nd = &nodes[a.0];
            if nd.shape.len() != 2 {
                return Err(Error::shape(format!("transpose expects 2-d, got {:?}", nd.shape)));
            }
            let (n, m) = (nd.shape[0], nd.shape[1]);
            (n, m, transpose_vals(&nd.values, n, m), nd.requires_grad)
        };
        Ok(self.push(Op::Transpose(a.0), vec![m, n], vals, rg))
    }

    /// `x [n, m] + bias [m]`, broadcast over rows.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (shape, vals, rg) = {
            let nodes = self.nodes.borrow();
            let (nx, nb) = (&nodes[x.0], &nodes[bias.0]);
            if nx.shape.len() != 2 || nb.shape.len() != 1 || nb.shape[0] != nx.shape[1] {
                return Err(Error::shape(format!(
                    "add_bias: {:?} + {:?}",
                    nx.shape, nb.shape
                )));
            }
            let m = nx.shape[1];
            let mut vals = nx.values.clone();
            for row in vals.chunks_mut(m) {
                for (v, b) in row.iter_mut().zip(&nb.values) {
                    *v += b;
                }
            }
            (nx.shape.clone(), vals, nx.requires_grad || nb.requires_grad)
        };
        Ok(self.push(Op::AddBias(x.0, bias.0), shape, vals, rg))
    }

    /// Fully connected layer `x [n, in] * w [out, in]^T (+ bias [out])`.
    pub fn linear(&self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let wt = self.transpose(w)?;
        let y = self.matmul(x, wt)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    // ── probability ops ──────────────────────────────────────────────

    /// Row-wise softened softmax `exp(x_i / tau) / sum_j exp(x_j / tau)`,
    /// stabilized by max subtraction. Accepts `[m]` or `[n, m]`.
    pub fn softmax(&self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::domain(format!("softmax temperature must be positive, got {tau}")));
        }
        let (shape, vals, rg) = {
            let nodes = self.nodes.borrow();
            let nd = &nodes[x.0];
            let cols = match nd.shape.len() {
                1 => nd.shape[0],
                2 => nd.shape[1],
                _ => {
                    return Err(Error::shape(format!(
                        "softmax expects 1-d or 2-d, got {:?}",
                        nd.shape
                    )))
                }
            };
            (nd.shape.clone(), softmax_rows(&nd.values, cols, tau), nd.requires_grad)
        };
        Ok(self.push(Op::Softmax { x: x.0, tau }, shape, vals, rg))
    }

    /// Mean over rows of `-ln softmax(logits)[label]` on `[n, m]` logits.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (vals, rg) = {
            let nodes = self.nodes.borrow();
            let nd = &nodes[logits.0];
            if nd.shape.len() != 2 {
                return Err(Error::shape(format!(
                    "cross_entropy expects 2-d logits, got {:?}",
                    nd.shape
                )));
            }
            let (n, m) = (nd.shape[0], nd.shape[1]);
            if n == 0 {
                return Err(Error::domain("cross_entropy on an empty batch".to_string()));
            }
            if labels.len() != n {
                return Err(Error::shape(format!(
                    "cross_entropy: {} labels for {} rows",
                    labels.len(),
                    n
                )));
            }
            let mut total = 0.0;
            for (row, &y) in nd.values.chunks(m).zip(labels) {
                if y >= m {
                    return Err(Error::domain(format!("label {y} out of range for width {m}")));
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
            (vec![total / n as f64], nd.requires_grad)
        };
        Ok(self.push(
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec() },
            vec![],
            vals,
            rg,
        ))
    }

    /// `KL(p || q) = sum_i p_i ln(p_i / q_i)` with `0 ln(0/q) = 0` and `q`
    /// clamped below at [`CLAMP_FLOOR`]. On `[n, m]` inputs the row KLs are
    /// averaged. Callers supply proper distributions; only lengths are
    /// checked here.
    pub fn kl_div(&self, p: Var, q: Var) -> Result<Var> {
        let (vals, rg) = {
            let nodes = self.nodes.borrow();
            let (np, nq) = (&nodes[p.0], &nodes[q.0]);
            if np.shape != nq.shape {
                return Err(Error::shape(format!(
                    "kl_div: shape {:?} vs {:?}",
                    np.shape, nq.shape
                )));
            }
            if np.shape.is_empty() || np.shape.len() > 2 {
                return Err(Error::shape(format!("kl_div expects 1-d or 2-d, got {:?}", np.shape)));
            }
            let rows = if np.shape.len() == 2 { np.shape[0] } else { 1 };
            if rows == 0 {
                return Err(Error::domain("kl_div on an empty batch".to_string()));
            }
            let mut total = 0.0;
            for (&pv, &qv) in np.values.iter().zip(&nq.values) {
                if pv != 0.0 {
                    total += pv * (pv.max(CLAMP_FLOOR) / qv.max(CLAMP_FLOOR)).ln();
                }
            }
            (vec![total / rows as f64], np.requires_grad || nq.requires_grad)
        };
        Ok(self.push(Op::KlDiv { p: p.0, q: q.0 }, vec![], vals, rg))
    }

    // ── convolution and pooling ──────────────────────────────────────

    /// 3x3 convolution with zero padding 1. `x [n, c_in, h, w]`,
    /// `w [c_out, c_in, 3, 3]`, stride 1 or 2.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize) -> Result<Var> {
        if stride != 1 && stride != 2 {
            return Err(Error::domain(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        let dims = {
            let nodes = self.nodes.borrow();
            let (nx, nw) = (&nodes[x.0], &nodes[w.0]);
            if nx.shape.len() != 4 {
                return Err(Error::shape(format!("conv2d input must be 4-d, got {:?}", nx.shape)));
            }
            if nw.shape.len() != 4 || nw.shape[2] != 3 || nw.shape[3] != 3 {
                return Err(Error::shape(format!(
                    "conv2d weight must be [c_out, c_in, 3, 3], got {:?}",
                    nw.shape
                )));
            }
            if nw.shape[1] != nx.shape[1] {
                return Err(Error::shape(format!(
                    "conv2d channels: input {:?} vs weight {:?}",
                    nx.shape, nw.shape
                )));
            }
            ConvDims {
                n: nx.shape[0],
                c_in: nx.shape[1],
                h: nx.shape[2],
                w: nx.shape[3],
                c_out: nw.shape[0],
                stride,
            }
        };
        let (vals, rg) = {
            let nodes = self.nodes.borrow();
            (
                kernels::conv2d_forward(&nodes[x.0].values, &nodes[w.0].values, &dims),
                nodes[x.0].requires_grad || nodes[w.0].requires_grad,
            )
        };
        let shape = vec![dims.n, dims.c_out, dims.out_h(), dims.out_w()];
        Ok(self.push(Op::Conv2d { x: x.0, w: w.0, dims }, shape, vals, rg))
    }

    /// Spatial mean: `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let (shape, vals, rg) = {
            let nodes = self.nodes.borrow();
            let nd = &nodes[x.0];
            if nd.shape.len() != 4 {
                return Err(Error::shape(format!(
                    "global_avg_pool expects 4-d, got {:?}",
                    nd.shape
                )));
            }
            let (n, c, h, w) = (nd.shape[0], nd.shape[1], nd.shape[2], nd.shape[3]);
            let plane = h * w;
            let mut vals = vec![0.0; n * c];
            for (i, v) in vals.iter_mut().enumerate() {
                let base = i * plane;
                *v = nd.values[base..base + plane].iter().sum::<f64>() / plane as f64;
            }
            (vec![n, c], vals, nd.requires_grad)
        };
        Ok(self.push(Op::GlobalAvgPool(x.0), shape, vals, rg))
    }

    // ── shape ops ────────────────────────────────────────────────────

    /// Concatenates two 2-d tensors along columns.
    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, vals, rg) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[0] != nb.shape[0] {
                return Err(Error::shape(format!(
                    "concat_cols: {:?} vs {:?}",
                    na.shape, nb.shape
                )));
            }
            let (n, ma, mb) = (na.shape[0], na.shape[1], nb.shape[1]);
            let mut vals = Vec::with_capacity(n * (ma + mb));
            for i in 0..n {
                vals.extend_from_slice(&na.values[i * ma..(i + 1) * ma]);
                vals.extend_from_slice(&nb.values[i * mb..(i + 1) * mb]);
            }
            (vec![n, ma + mb], vals, na.requires_grad || nb.requires_grad)
        };
        Ok(self.push(Op::ConcatCols(a.0, b.0), shape, vals, rg))
    }

    /// Columns `start..end` of a 2-d tensor.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (shape, vals, rg) = {
            let nodes = self.nodes.borrow();
            let nd = &nodes[x.0];
            if nd.shape.len() != 2 {
                return Err(Error::shape(format!("slice_cols expects 2-d, got {:?}", nd.shape)));
            }
            let (n, m) = (nd.shape[0], nd.shape[1]);
            if start >= end || end > m {
                return Err(Error::domain(format!(
                    "slice_cols {start}..{end} out of range for width {m}"
                )));
            }
            let mut vals = Vec::with_capacity(n * (end - start));
            for i in 0..n {
                vals.extend_from_slice(&nd.values[i * m + start..i * m + end]);
            }
            (vec![n, end - start], vals, nd.requires_grad)
        };
        Ok(self.push(Op::SliceCols { x: x.0, start }, shape, vals, rg))
    }

    /// Rows `start..end` of a 2-d tensor.
    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (shape, vals, rg) = {
            let nodes = self.nodes.borrow();
            let nd = &nodes[x.0];
            if nd.shape.len() != 2 {
                return Err(Error::shape(format!("slice_rows expects 2-d, got {:?}", nd.shape)));
            }
            let (n, m) = (nd.shape[0], nd.shape[1]);
            if start >= end || end > n {
                return Err(Error::domain(format!(
                    "slice_rows {start}..{end} out of range for {n} rows"
                )));
            }
            (vec![end - start, m], nd.values[start * m..end * m].to_vec(), nd.requires_grad)
        };
        Ok(self.push(Op::SliceRows { x: x.0, start }, shape, vals, rg))
    }

    pub fn reshape(&self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let (vals, rg) = {
            let nodes = self.nodes.borrow();
            let nd = &nodes[x.0];
            let numel: usize = shape.iter().product();
            if numel != nd.values.len() {
                return Err(Error::shape(format!(
                    "reshape {:?} -> {:?} changes element count",
                    nd.shape, shape
                )));
            }
            (nd.values.clone(), nd.requires_grad)
        };
        Ok(self.push(Op::Reshape(x.0), shape, vals, rg))
    }

    // ── composites ───────────────────────────────────────────────────

    /// Reparameterized Gaussian sample `mu + exp(logvar / 2) * eps` with
    /// externally supplied noise.
    pub fn reparam_sample(&self, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
        let half = self.scale(logvar, 0.5);
        let sigma = self.exp(half);
        let scaled = self.mul(sigma, eps)?;
        self.add(mu, scaled)
    }

    /// Per-row Euclidean norms of a 2-d tensor: `[n, m] -> [n]`.
    pub fn row_l2_norms(&self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        let sums = self.sum_cols(sq)?;
        Ok(self.sqrt(sums))
    }

    /// Sum of squares over all elements.
    pub fn squared_l2(&self, x: Var) -> Result<Var> {
        let sq = self.mul(x, x)?;
        Ok(self.sum_all(sq))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar output; seeds with 1.0 and visits every
    /// recorded op exactly once in reverse order. Gradients land on every
    /// node with `requires_grad`, leaves included; earlier gradients are
    /// cleared first so repeated calls are idempotent.
    pub fn backward(&self, out: Var) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[out.0].values.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got shape {:?}",
                nodes[out.0].shape
            )));
        }
        for n in nodes.iter_mut() {
            n.grad = None;
        }
        if !nodes[out.0].requires_grad {
            return Ok(());
        }
        nodes[out.0].grad = Some(vec![1.0]);

        for i in (0..=out.0).rev() {
            let Some(g) = nodes[i].grad.clone() else { continue };
            let op = nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    add_grad(&mut nodes, a, &g);
                    add_grad(&mut nodes, b, &g);
                }
                Op::Sub(a, b) => {
                    add_grad(&mut nodes, a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_grad(&mut nodes, b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f64> =
                        g.iter().zip(&nodes[b].values).map(|(gv, bv)| gv * bv).collect();
                    let db: Vec<f64> =
                        g.iter().zip(&nodes[a].values).map(|(gv, av)| gv * av).collect();
                    add_grad(&mut nodes, a, &da);
                    add_grad(&mut nodes, b, &db);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                    add_grad(&mut nodes, a, &da);
                }
                Op::AddScalar(a, _) => add_grad(&mut nodes, a, &g),
                Op::AddBias(x, b) => {
                    add_grad(&mut nodes, x, &g);
                    let m = nodes[b].values.len();
                    let mut db = vec![0.0; m];
                    for row in g.chunks(m) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    add_grad(&mut nodes, b, &db);
                }
                Op::Matmul(a, b) => {
                    let (n, k) = (nodes[a].shape[0], nodes[a].shape[1]);
                    let m = nodes[b].shape[1];
                    // da = g * b^T, db = a^T * g
                    let bt = transpose_vals(&nodes[b].values, k, m);
                    let da = kernels::matmul(&g, &bt, n, m, k);
                    add_grad(&mut nodes, a, &da);
                    let at = transpose_vals(&nodes[a].values, n, k);
                    let db = kernels::matmul(&at, &g, k, n, m);
                    add_grad(&mut nodes, b, &db);
                }
                Op::Transpose(a) => {
                    let (m, n) = (nodes[i].shape[0], nodes[i].shape[1]);
                    let da = transpose_vals(&g, m, n);
                    add_grad(&mut nodes, a, &da);
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&nodes[a].values)
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    add_grad(&mut nodes, a, &da);
                }
                Op::Exp(a) => {
                    let da: Vec<f64> =
                        g.iter().zip(&nodes[i].values).map(|(gv, y)| gv * y).collect();
                    add_grad(&mut nodes, a, &da);
                }
                Op::Ln(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&nodes[a].values)
                        .map(|(gv, &x)| if x >= CLAMP_FLOOR { gv / x } else { 0.0 })
                        .collect();
                    add_grad(&mut nodes, a, &da);
                }
                Op::Sqrt(a) => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&nodes[i].values)
                        .map(|(gv, &y)| if y > 0.0 { gv / (2.0 * y) } else { 0.0 })
                        .collect();
                    add_grad(&mut nodes, a, &da);
                }
                Op::MeanAll(a) => {
                    let n = nodes[a].values.len() as f64;
                    let da = vec![g[0] / n; nodes[a].values.len()];
                    add_grad(&mut nodes, a, &da);
                }
                Op::SumAll(a) => {
                    let da = vec![g[0]; nodes[a].values.len()];
                    add_grad(&mut nodes, a, &da);
                }
                Op::SumCols(a) => {
                    let m = nodes[a].shape[1];
                    let mut da = vec![0.0; nodes[a].values.len()];
                    for (row, &gv) in da.chunks_mut(m).zip(&g) {
                        for d in row {
                            *d = gv;
                        }
                    }
                    add_grad(&mut nodes, a, &da);
                }
                Op::Softmax { x, tau } => {
                    let cols = *nodes[i].shape.last().expect("softmax shape");
                    let y = &nodes[i].values;
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in
                        y.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot) / tau;
                        }
                    }
                    add_grad(&mut nodes, x, &dx);
                }
                Op::CrossEntropy { logits, ref labels } => {
                    let m = nodes[logits].shape[1];
                    let n = nodes[logits].shape[0];
                    let probs = softmax_rows(&nodes[logits].values, m, 1.0);
                    let scale = g[0] / n as f64;
                    let mut dz = probs;
                    for (row, &y) in dz.chunks_mut(m).zip(labels) {
                        row[y] -= 1.0;
                        for v in row {
                            *v *= scale;
                        }
                    }
                    add_grad(&mut nodes, logits, &dz);
                }
                Op::KlDiv { p, q } => {
                    let rows =
                        if nodes[p].shape.len() == 2 { nodes[p].shape[0] } else { 1 };
                    let scale = g[0] / rows as f64;
                    let pv = &nodes[p].values;
                    let qv = &nodes[q].values;
                    let dp: Vec<f64> = pv
                        .iter()
                        .zip(qv)
                        .map(|(&a, &b)| {
                            scale * ((a.max(CLAMP_FLOOR) / b.max(CLAMP_FLOOR)).ln() + 1.0)
                        })
                        .collect();
                    let dq: Vec<f64> = pv
                        .iter()
                        .zip(qv)
                        .map(|(&a, &b)| -scale * a / b.max(CLAMP_FLOOR))
                        .collect();
                    add_grad(&mut nodes, p, &dp);
                    add_grad(&mut nodes, q, &dq);
                }
                Op::Conv2d { x, w, dims } => {
                    if nodes[x].requires_grad {
                        let dx = kernels::conv2d_grad_input(&g, &nodes[w].values, &dims);
                        add_grad(&mut nodes, x, &dx);
                    }
                    if nodes[w].requires_grad {
                        let dw = kernels::conv2d_grad_weight(&g, &nodes[x].values, &dims);
                        add_grad(&mut nodes, w, &dw);
                    }
                }
                Op::GlobalAvgPool(a) => {
                    let (h, w) = (nodes[a].shape[2], nodes[a].shape[3]);
                    let plane = h * w;
                    let mut da = vec![0.0; nodes[a].values.len()];
                    for (chunk, &gv) in da.chunks_mut(plane).zip(&g) {
                        let v = gv / plane as f64;
                        for d in chunk {
                            *d = v;
                        }
                    }
                    add_grad(&mut nodes, a, &da);
                }
                Op::ConcatCols(a, b) => {
                    let (n, ma) = (nodes[a].shape[0], nodes[a].shape[1]);
                    let mb = nodes[b].shape[1];
                    let mut da = vec![0.0; n * ma];
                    let mut db = vec![0.0; n * mb];
                    for i2 in 0..n {
                        let row = &g[i2 * (ma + mb)..(i2 + 1) * (ma + mb)];
                        da[i2 * ma..(i2 + 1) * ma].copy_from_slice(&row[..ma]);
                        db[i2 * mb..(i2 + 1) * mb].copy_from_slice(&row[ma..]);
                    }
                    add_grad(&mut nodes, a, &da);
                    add_grad(&mut nodes, b, &db);
                }
                Op::SliceCols { x, start } => {
                    let (n, m) = (nodes[x].shape[0], nodes[x].shape[1]);
                    let width = nodes[i].shape[1];
                    let mut dx = vec![0.0; n * m];
                    for i2 in 0..n {
                        dx[i2 * m + start..i2 * m + start + width]
                            .copy_from_slice(&g[i2 * width..(i2 + 1) * width]);
                    }
                    add_grad(&mut nodes, x, &dx);
                }
                Op::SliceRows { x, start } => {
                    let m = nodes[x].shape[1];
                    let mut dx = vec![0.0; nodes[x].values.len()];
                    dx[start * m..start * m + g.len()].copy_from_slice(&g);
                    add_grad(&mut nodes, x, &dx);
                }
                Op::Reshape(a) => add_grad(&mut nodes, a, &g),
            }
        }
        Ok(())
    }
}

fn transpose_vals(v: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = v[i * m + j];
        }
    }
    out
}

fn add_grad(nodes: &mut [Node], idx: usize, contrib: &[f64]) {
    let node = &mut nodes[idx];
    if !node.requires_grad {
        return;
    }
    let len = node.values.len();
    let g = node.grad.get_or_insert_with(|| vec![0.0; len]);
    for (a, b) in g.iter_mut().zip(contrib) {
        *a += b;
    }
}

// ── finite-difference checking ───────────────────────────────────────

pub const GRAD_CHECK_EPS: f64 = 1e-5;

/// Max relative error between reverse-mode and central-difference gradients
/// of a scalar-valued closure over several input tensors:
/// `|analytic - numeric| / max(1, |analytic|)`, maximized over coordinates.
pub fn grad_check_params<F>(f: F, points: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor]| -> Result<(f64, Option<Vec<Tensor>>, &'static str)> {
        let tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.param(p)).collect();
        let out = f(&tape, &vars)?;
        let val = tape.scalar(out)?;
        if !val.is_finite() {
            return Err(Error::Eval(format!("closure produced non-finite value {val}")));
        }
        Ok((val, None, ""))
    };

    // Analytic gradients at the base point.
    let tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p)).collect();
    let out = f(&tape, &vars)?;
    let base = tape.scalar(out)?;
    if !base.is_finite() {
        return Err(Error::Eval(format!("closure produced non-finite value {base}")));
    }
    tape.backward(out)?;
    let grads: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();

    let mut max_err = 0.0f64;
    for pi in 0..points.len() {
        for c in 0..points[pi].numel() {
            let mut plus = points.to_vec();
            plus[pi].values_mut()[c] += eps;
            let mut minus = points.to_vec();
            minus[pi].values_mut()[c] -= eps;
            let fd = (eval(&plus)?.0 - eval(&minus)?.0) / (2.0 * eps);
            let analytic = grads[pi].values()[c];
            let err = (analytic - fd).abs() / f64::max(1.0, analytic.abs());
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

/// Single-input form of [`grad_check_params`].
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    grad_check_params(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn t1(vals: &[f64]) -> Tensor {
        Tensor::from_vec(vals.to_vec())
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(&t1(&[0.0, 0.0, 0.0]));
        let p = tape.softmax(x, 1.0).unwrap();
        for v in tape.value(p).values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let x = tape.constant(&t1(&[0.0, 2f64.ln()]));
        let p = tape.value(tape.softmax(x, 1.0).unwrap());
        assert!((p.values()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((p.values()[1] - 2.0 / 3.0).abs() < 1e-12);

        let x = tape.constant(&t1(&[0.0, 2.0]));
        let p = tape.value(tape.softmax(x, 1e6).unwrap());
        assert!((p.values()[0] - 0.5).abs() < 1e-5);
        assert!((p.values()[1] - 0.5).abs() < 1e-5);

        assert!(tape.softmax(x, 0.0).is_err());
        assert!(tape.softmax(x, -1.0).is_err());
    }

    #[test]
    fn softmax_output_sums_to_one() {
        let tape = Tape::new();
        let x = tape.constant(&t1(&[3.4, -1.2, 0.07, 11.0]));
        let p = tape.value(tape.softmax(x, 3.0).unwrap());
        let sum: f64 = p.values().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let tape = Tape::new();
        let p = tape.constant(&t1(&[0.3, 0.7]));
        let q = tape.constant(&t1(&[0.3, 0.7]));
        assert!(tape.scalar(tape.kl_div(p, q).unwrap()).unwrap().abs() < 1e-15);

        let p = tape.constant(&t1(&[0.5, 0.5]));
        let q = tape.constant(&t1(&[0.25, 0.75]));
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let got = tape.scalar(tape.kl_div(p, q).unwrap()).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.14384).abs() < 1e-5);

        // Zero-term convention.
        let p = tape.constant(&t1(&[1.0, 0.0]));
        let q = tape.constant(&t1(&[0.5, 0.5]));
        let got = tape.scalar(tape.kl_div(p, q).unwrap()).unwrap();
        assert!((got - 2f64.ln()).abs() < 1e-12);

        let bad = tape.constant(&t1(&[0.5, 0.25, 0.25]));
        assert!(tape.kl_div(p, bad).is_err());
    }

    #[test]
    fn backward_square_and_product() {
        let tape = Tape::new();
        let x = tape.param(&Tensor::scalar(3.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().values(), &[6.0]);

        let tape = Tape::new();
        let x = tape.param(&Tensor::scalar(2.0));
        let y = tape.param(&Tensor::scalar(5.0));
        let z = tape.mul(x, y).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap().values(), &[5.0]);
        assert_eq!(tape.grad(y).unwrap().values(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(&t1(&[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn kl_of_softmax_with_itself_has_zero_gradient() {
        // Both arguments share the same source; the total derivative at the
        // minimum must vanish even though each partial is nonzero.
        let tape = Tape::new();
        let a = tape.param(&t1(&[0.3, -1.1, 0.8]));
        let p = tape.softmax(a, 1.0).unwrap();
        let q = tape.softmax(a, 1.0).unwrap();
        let kl = tape.kl_div(p, q).unwrap();
        tape.backward(kl).unwrap();
        let g = tape.grad(a).unwrap();
        for v in g.values() {
            assert!(v.is_finite());
            assert!(v.abs() < 1e-9, "stationary point gradient {v}");
        }
    }

    #[test]
    fn grad_check_quadratic_is_tight() {
        let err = grad_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.sum_all(sq))
            },
            &t1(&[1.0, 2.0, 3.0]),
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(err < 1e-7, "quadratic grad check error {err}");
    }

    #[test]
    fn grad_check_reports_eval_error_on_nan() {
        let res = grad_check(
            |tape, x| {
                let l = tape.ln(x);
                Ok(tape.sum_all(l))
            },
            &t1(&[f64::NAN]),
            GRAD_CHECK_EPS,
        );
        assert!(matches!(res, Err(Error::Eval(_))));
    }

    #[test]
    fn cross_entropy_uniform_two_class() {
        let tape = Tape::new();
        let logits = tape.constant(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let ce = tape.cross_entropy(logits, &[0]).unwrap();
        assert!((tape.scalar(ce).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_empty_and_bad_labels() {
        let tape = Tape::new();
        let empty = tape.constant(&Tensor::new(vec![0, 3], vec![]).unwrap());
        assert!(tape.cross_entropy(empty, &[]).is_err());
        let logits = tape.constant(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        assert!(tape.cross_entropy(logits, &[2]).is_err());
    }

    #[test]
    fn slices_and_concat_round_trip() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let left = tape.slice_cols(x, 0, 2).unwrap();
        let right = tape.slice_cols(x, 2, 3).unwrap();
        let back = tape.concat_cols(left, right).unwrap();
        assert_eq!(tape.value(back).values(), tape.value(x).values());

        let top = tape.slice_rows(x, 0, 1).unwrap();
        assert_eq!(tape.value(top).values(), &[1., 2., 3.]);
        assert!(tape.slice_rows(x, 1, 1).is_err());
        assert!(tape.slice_cols(x, 0, 4).is_err());
    }

    #[test]
    fn reparam_is_exact_at_unit_noise() {
        let tape = Tape::new();
        let mu = tape.constant(&t1(&[0.7]));
        let logvar = tape.constant(&t1(&[0.4]));
        let eps0 = tape.constant(&t1(&[0.0]));
        let eps1 = tape.constant(&t1(&[1.0]));
        let z0 = tape.reparam_sample(mu, logvar, eps0).unwrap();
        assert!((tape.scalar(z0).unwrap() - 0.7).abs() < 1e-15);
        let z1 = tape.reparam_sample(mu, logvar, eps1).unwrap();
        let sigma = (0.4f64 / 2.0).exp();
        assert!((tape.scalar(z1).unwrap() - (0.7 + sigma)).abs() < 1e-15);
    }

    #[test]
    fn no_gradient_reaches_constants() {
        let tape = Tape::new();
        let frozen = tape.constant(&t1(&[1.0, 2.0]));
        let live = tape.param(&t1(&[3.0, 4.0]));
        let prod = tape.mul(frozen, live).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert_eq!(tape.grad(live).unwrap().values(), &[1.0, 2.0]);
    }

    /// Random compositions of up to 20 primitives agree with central
    /// differences.
    #[test]
    fn random_graphs_match_finite_differences() {
        let mut rng = crate::rng::substream(42, 0, "tape-random-graphs");
        for case in 0..10 {
            let rows = 2 + (case % 2);
            let cols = 3;
            let point = Tensor::new(
                vec![rows, cols],
                (0..rows * cols).map(|_| rng.gen_range(0.2..1.4)).collect(),
            )
            .unwrap();
            let ops: Vec<u32> = (0..20).map(|_| rng.gen_range(0u32..8)).collect();
            let err = grad_check(
                |tape, x| {
                    let mut cur = x;
                    for &op in &ops {
                        cur = match op {
                            0 => tape.mul(cur, cur)?,
                            1 => tape.add(cur, x)?,
                            2 => tape.scale(cur, 0.5),
                            3 => tape.add_scalar(cur, 0.3),
                            4 => tape.softmax(cur, 2.0)?,
                            5 => tape.relu(tape.add_scalar(cur, 0.05)),
                            6 => {
                                let e = tape.exp(tape.scale(cur, -0.5));
                                tape.add(e, cur)?
                            }
                            _ => {
                                let s = tape.add_scalar(cur, 1.5);
                                tape.ln(s)
                            }
                        };
                    }
                    tape.mean_all(cur)
                },
                &point,
                GRAD_CHECK_EPS,
            )
            .unwrap();
            assert!(err < 1e-4, "random graph {case} grad error {err}");
        }
    }
}
