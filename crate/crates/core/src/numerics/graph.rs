//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation evaluates
//! eagerly and records its parents, so insertion order is a topological
//! order and [`Graph::backward`] is a single reverse sweep.
//!
//! ```
//! use kdlab::numerics::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

use super::tensor::{
    log_softmax_in_place, matmul_at_into, matmul_bt_into, matmul_into, softmax_in_place, Scalar, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

const LN_EPS: Scalar = 1e-5;
const GELU_C: Scalar = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, Scalar),
    Shift(Var),
    Exp(Var),
    Ln(Var),
    Gelu(Var),
    Minimum(Var, Var),
    Clip(Var, Scalar, Scalar),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<Scalar>,
        rstd: Vec<Scalar>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceFlat {
        x: Var,
        start: usize,
    },
    PickPerRow {
        x: Var,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<Scalar>,
        probs: Vec<Scalar>,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Vec<Scalar>,
        weights: Vec<Scalar>,
        probs: Vec<Scalar>,
    },
    MulConst(Var, Vec<Scalar>),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only differentiation graph. Parent ids are always smaller than
/// the child id.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Adds a leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Var {
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[Scalar]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<Scalar>> {
        self.nodes[v.0].value.grad.take()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[Scalar] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map_unary(&mut self, a: Var, op: Op, f: impl Fn(Scalar) -> Scalar) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(src.shape(), data).expect("shape preserved");
        self.push(out, op, &[a])
    }

    fn zip_binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(Scalar, Scalar) -> Scalar) -> Var {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(self.shape(a), data).expect("shape preserved");
        self.push(out, op, &[a, b])
    }

    // ------------------------------------------------------------------
    // operations

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_bt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        matmul_bt_into(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        Ok(self.zip_binary(a, b, Op::Minimum(a, b), Scalar::min))
    }

    /// Adds a row vector `b` (length `n`) to every row of `a: [m×n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.value(a).dims2();
        if self.value(b).numel() != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(b)));
        }
        let bias = self.data(b).to_vec();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(t, Op::AddRow(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: Scalar) -> Var {
        self.map_unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: Scalar) -> Var {
        self.map_unary(a, Op::Shift(a), |x| x + c)
    }

    /// Adds a constant tensor of the same size.
    pub fn add_const(&mut self, a: Var, c: &[Scalar]) -> Result<Var> {
        if c.len() != self.value(a).numel() {
            return Err(Error::shape("add_const", self.shape(a), &[c.len()]));
        }
        let data = self.data(a).iter().zip(c).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Shift(a), &[a]))
    }

    /// Multiplies elementwise by a constant tensor of the same size.
    pub fn mul_const(&mut self, a: Var, c: &[Scalar]) -> Result<Var> {
        if c.len() != self.value(a).numel() {
            return Err(Error::shape("mul_const", self.shape(a), &[c.len()]));
        }
        let data = self.data(a).iter().zip(c).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::MulConst(a, c.to_vec()), &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Exp(a), Scalar::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Ln(a), Scalar::ln)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
        })
    }

    /// Clamps into `[lo, hi]`; the gradient passes where the input is inside
    /// the closed interval.
    pub fn clip(&mut self, a: Var, lo: Scalar, hi: Scalar) -> Var {
        self.map_unary(a, Op::Clip(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (_, c) = src.dims2();
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(src.shape(), out).expect("shape preserved");
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Softmax of a square score matrix where row `i` only sees columns
    /// `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let (r, c) = src.dims2();
        if r != c {
            return Err(Error::shape("causal_softmax", src.shape(), &[r, r]));
        }
        let mut out = src.data().to_vec();
        for (i, row) in out.chunks_mut(c).enumerate() {
            softmax_in_place(&mut row[..=i]);
            row[i + 1..].fill(0.0);
        }
        let t = Tensor::new(src.shape(), out)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (_, c) = src.dims2();
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(c) {
            log_softmax_in_place(row);
        }
        let t = Tensor::new(src.shape(), out).expect("shape preserved");
        self.push(t, Op::LogSoftmax(a), &[a])
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<Scalar>() / c as Scalar;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / c as Scalar;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, c) = self.value(table).dims2();
        if ids.is_empty() {
            return Err(Error::Input("embedding lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!("embedding id {bad} out of range 0..{rows}")));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(&[ids.len(), c], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if len == 0 || start + len > c {
            return Err(Error::Input(format!("column slice {start}+{len} out of 0..{c}")));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new(&[r, len], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let (r, _) = self.value(first).dims2();
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2();
            if pr != r {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(&[r, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Contiguous range of the flattened tensor as a 1-D tensor.
    pub fn slice_flat(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.value(x).numel();
        if len == 0 || start + len > n {
            return Err(Error::Input(format!("slice {start}+{len} out of 0..{n}")));
        }
        let t = Tensor::new(&[len], self.data(x)[start..start + len].to_vec())?;
        Ok(self.push(t, Op::SliceFlat { x, start }, &[x]))
    }

    /// `out[r] = x[r, idx[r]]`.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if idx.len() != r || idx.iter().any(|&i| i >= c) {
            return Err(Error::Input(format!("pick_per_row needs {r} indices below {c}")));
        }
        let src = self.data(x);
        let out = idx.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        let t = Tensor::new(&[r], out)?;
        Ok(self.push(t, Op::PickPerRow { x, idx: idx.to_vec() }, &[x]))
    }

    /// Weighted negative log-likelihood `−Σ_r w_r · log softmax(logits_r)[t_r]`
    /// as a single fused node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[Scalar]) -> Result<Var> {
        let (r, c) = self.value(logits).dims2();
        if targets.len() != r || weights.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                self.shape(logits),
                &[targets.len(), weights.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Input(format!("target id {bad} out of range 0..{c}")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            if weights[i] != 0.0 {
                let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<Scalar>().ln();
                loss -= weights[i] * (row[targets[i]] - lse);
            }
            softmax_in_place(row);
        }
        let t = Tensor::scalar(loss);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Soft-target cross-entropy `−Σ_r w_r Σ_j t_rj · log softmax(logits_r)_j`
    /// as a fused node. `targets` holds one probability row per logit row;
    /// the gradient `w_r · (softmax_r − t_r)` assumes each row sums to 1 and
    /// is exactly zero when `t_r` equals the logits' own softmax.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &[Scalar], weights: &[Scalar]) -> Result<Var> {
        let (r, c) = self.value(logits).dims2();
        if targets.len() != r * c || weights.len() != r {
            return Err(Error::shape(
                "soft_cross_entropy",
                self.shape(logits),
                &[targets.len(), weights.len()],
            ));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (i, row) in probs.chunks_mut(c).enumerate() {
            if weights[i] != 0.0 {
                let max = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<Scalar>().ln();
                let t = &targets[i * c..(i + 1) * c];
                let dot: Scalar = row
                    .iter()
                    .zip(t)
                    .filter(|(_, &p)| p != 0.0)
                    .map(|(v, p)| p * (v - lse))
                    .sum();
                loss -= weights[i] * dot;
            }
            softmax_in_place(row);
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<Scalar>() / d.len() as Scalar;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    // ------------------------------------------------------------------
    // reverse sweep

    /// Propagates `∂root/∂leaf` into every tracked leaf's gradient buffer.
    /// Leaf gradients accumulate across calls until [`Graph::zero_grads`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<Scalar>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let value = &mut self.nodes[id].value;
                match &mut value.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => value.grad = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[Scalar], grads: &mut [Option<Vec<Scalar>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [Scalar])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().1;
                acc(*a, &mut |da| matmul_bt_into(g, self.data(*b), da, m, n, k));
                acc(*b, &mut |db| matmul_at_into(self.data(*a), g, db, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let n = self.value(*b).dims2().0;
                acc(*a, &mut |da| matmul_into(g, self.data(*b), da, m, n, k));
                acc(*b, &mut |db| matmul_at_into(g, self.data(*a), db, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                let n = self.value(*b).numel();
                acc(*b, &mut |d| {
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::Shift(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::MulConst(a, c) => acc(*a, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * c[i];
                }
            }),
            Op::Exp(a) => acc(*a, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i];
                }
            }),
            Op::Ln(a) => {
                let x = self.data(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / x[i];
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        let xi = x[i];
                        let u = GELU_C * (xi + 0.044715 * xi * xi * xi);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * xi * xi);
                        d[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du);
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if av[i] <= bv[i] {
                            d[i] += g[i];
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        if av[i] > bv[i] {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Clip(a, lo, hi) => {
                let x = self.data(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let (_, c) = node.value.dims2();
                acc(*a, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: Scalar = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (_, c) = node.value.dims2();
                acc(*a, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let gsum: Scalar = grow.iter().sum();
                        for j in 0..c {
                            drow[j] += grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (_, c) = node.value.dims2();
                let gv = self.data(*gain);
                acc(*x, &mut |d| {
                    let mut dxhat = vec![0.0; c];
                    for (i, (drow, grow)) in d.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        let xh = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<Scalar>() / c as Scalar;
                        let m2 = dxhat.iter().zip(xh).map(|(p, q)| p * q).sum::<Scalar>() / c as Scalar;
                        for j in 0..c {
                            drow[j] += rstd[i] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for (grow, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            d[j] += grow[j] * xh[j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for grow in g.chunks(c) {
                        add_into(d, grow);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let c = node.value.dims2().1;
                acc(*table, &mut |d| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut d[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let (r, len) = node.value.dims2();
                let c = self.value(*x).dims2().1;
                acc(*x, &mut |d| {
                    for i in 0..r {
                        add_into(&mut d[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).dims2().1;
                    acc(p, &mut |d| {
                        for i in 0..r {
                            add_into(
                                &mut d[i * pc..(i + 1) * pc],
                                &g[i * total + offset..i * total + offset + pc],
                            );
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceFlat { x, start } => {
                let len = node.value.numel();
                acc(*x, &mut |d| add_into(&mut d[*start..start + len], g));
            }
            Op::PickPerRow { x, idx } => {
                let c = self.value(*x).dims2().1;
                acc(*x, &mut |d| {
                    for (i, &j) in idx.iter().enumerate() {
                        d[i * c + j] += g[i];
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.value(*logits).dims2().1;
                acc(*logits, &mut |d| {
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let s = g[0] * w;
                        let drow = &mut d[i * c..(i + 1) * c];
                        for (dv, p) in drow.iter_mut().zip(&probs[i * c..(i + 1) * c]) {
                            *dv += s * p;
                        }
                        drow[t] -= s;
                    }
                });
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.value(*logits).dims2().1;
                acc(*logits, &mut |d| {
                    for (i, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let s = g[0] * w;
                        let span = i * c..(i + 1) * c;
                        for ((dv, q), t) in d[span.clone()].iter_mut().zip(&probs[span.clone()]).zip(&targets[span]) {
                            *dv += s * (q - t);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => acc(*a, &mut |d| {
                let s = g[0] / d.len() as Scalar;
                d.iter_mut().for_each(|x| *x += s);
            }),
        }
    }
}

fn add_into(dst: &mut [Scalar], src: &[Scalar]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
