//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive op in execution order. Nodes are only
//! ever appended, so the recording order is already a topological order and
//! [`Tape::backward`] walks it in reverse from a scalar root.
//!
//! Matrices are row-major with one token (or sample) per row. Row-wise ops
//! (`layer_norm`, `masked_softmax`, `log_softmax`, `l2_normalize_rows`) act on
//! the trailing dimension.

use std::rc::Rc;

use crate::tensor::{
    gelu_grad_scalar, gelu_scalar, gemm, layer_norm_rows, masked_softmax_rows, shape_err, Tensor,
    TensorError,
};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    AddRow { a: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    L2Normalize { x: Var, norms: Vec<f64> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    Sum(Var),
    WeightedSum { a: Var, weights: Rc<Tensor> },
    MeanRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Confined to one thread; build one per independent pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, or `None` if `v` does not
    /// require gradients or is unreachable from the root.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient matches node shape"))
    }

    /// Like [`Gradients::get`] but yields zeros for unreachable nodes.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<(), TensorError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        value: Tensor,
        op: Op,
        parents: &[Var],
        name: &'static str,
    ) -> Result<Var, TensorError> {
        check_finite(&value, name)?;
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf whose gradient backward will report.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.nodes[v.0].value.shape();
        if s.len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(shape_err(
                "matmul",
                format!("[{m}x{k}] x [{br}x{bc}] (transposed rhs: {trans_b})"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let value = Tensor::matrix(m, n, out)?;
        self.push_checked(value, Op::MatMul { a, b, trans_b }, &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        self.dims2(a, "transpose")?;
        let value = self.value(a).transpose();
        self.push_checked(value, Op::Transpose(a), &[a], "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push_checked(value, Op::Add(a, b), &[a, b], "add")
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(bias));
        let n = va.cols();
        if vb.len() != n {
            return Err(shape_err("add_row", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            row.iter_mut().zip(vb.data()).for_each(|(x, b)| *x += b);
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push_checked(value, Op::AddRow { a, bias }, &[a, bias], "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push_checked(value, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push_checked(value, Op::Scale(a, c), &[a], "scale")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| gelu_scalar(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push_checked(value, Op::Gelu(a), &[a], "gelu")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let n = vx.cols();
        if n < 2 || vg.len() != n || vb.len() != n {
            return Err(shape_err(
                "layer_norm",
                format!("x {:?}, gain {:?}, bias {:?}", vx.shape(), vg.shape(), vb.shape()),
            ));
        }
        let (out, xhat, inv_std) = layer_norm_rows(vx.data(), vg.data(), vb.data(), eps);
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push_checked(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
            "layer_norm",
        )
    }

    /// Row-wise softmax of `logits + mask`; blocked entries come out exactly 0.
    pub fn masked_softmax(&mut self, logits: Var, mask: Option<&Tensor>) -> Result<Var, TensorError> {
        let vl = self.value(logits);
        if let Some(m) = mask {
            if m.shape() != vl.shape() {
                return Err(shape_err(
                    "masked_softmax",
                    format!("logits {:?} vs mask {:?}", vl.shape(), m.shape()),
                ));
            }
        }
        let mut out = vec![0.0; vl.len()];
        masked_softmax_rows(vl.data(), mask.map(Tensor::data), vl.cols(), &mut out)?;
        let value = Tensor::new(vl.shape().to_vec(), out)?;
        self.push_checked(value, Op::Softmax(logits), &[logits], "masked_softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let va = self.value(a);
        let n = va.cols();
        let mut out = va.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        self.push_checked(value, Op::LogSoftmax(a), &[a], "log_softmax")
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let vx = self.value(x);
        let n = vx.cols();
        let mut out = vx.data().to_vec();
        let mut norms = Vec::with_capacity(vx.rows());
        for (r, row) in out.chunks_exact_mut(n).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(TensorError::ZeroNorm { row: r });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push_checked(value, Op::L2Normalize { x, norms }, &[x], "l2_normalize_rows")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(a, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(shape_err("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::matrix(len, c, data)?;
        self.push_checked(value, Op::SliceRows { a, start }, &[a], "slice_rows")
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(a, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let value = Tensor::matrix(r, len, data)?;
        self.push_checked(value, Op::SliceCols { a, start }, &[a], "slice_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let c = match parts.first() {
            Some(&p) => self.dims2(p, "concat_rows")?.1,
            None => return Err(shape_err("concat_rows", "no inputs")),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(shape_err("concat_rows", format!("column count {pc} vs {c}")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let value = Tensor::matrix(rows, c, data)?;
        self.push_checked(value, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let r = match parts.first() {
            Some(&p) => self.dims2(p, "concat_cols")?.0,
            None => return Err(shape_err("concat_cols", "no inputs")),
        };
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", format!("row count {pr} vs {r}")));
            }
            total += pc;
        }
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            let pc = v.cols();
            for i in 0..r {
                data[i * total + offset..i * total + offset + pc].copy_from_slice(v.row(i));
            }
            offset += pc;
        }
        let value = Tensor::matrix(r, total, data)?;
        self.push_checked(value, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Embedding lookup: row `i` of the result is row `ids[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(shape_err("gather_rows", "no ids"));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(shape_err("gather_rows", format!("id {id} out of {r} rows")));
            }
            data.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        let value = Tensor::matrix(ids.len(), c, data)?;
        self.push_checked(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "gather_rows",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.push_checked(Tensor::scalar(s), Op::Sum(a), &[a], "sum")
    }

    /// `Σ a ∘ weights` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor) -> Result<Var, TensorError> {
        let va = self.value(a);
        if va.shape() != weights.shape() {
            return Err(shape_err(
                "weighted_sum",
                format!("{:?} vs {:?}", va.shape(), weights.shape()),
            ));
        }
        let s = va.data().iter().zip(weights.data()).map(|(x, w)| x * w).sum();
        self.push_checked(
            Tensor::scalar(s),
            Op::WeightedSum {
                a,
                weights: Rc::new(weights),
            },
            &[a],
            "weighted_sum",
        )
    }

    /// Column means of a matrix as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(a, "mean_rows")?;
        let src = self.value(a).data();
        let mut data = vec![0.0; c];
        for i in 0..r {
            data.iter_mut().zip(&src[i * c..(i + 1) * c]).for_each(|(d, s)| *d += s);
        }
        data.iter_mut().for_each(|d| *d /= r as f64);
        let value = Tensor::matrix(1, c, data)?;
        self.push_checked(value, Op::MeanRows(a), &[a], "mean_rows")
    }

    /// Propagates d(root)/d(node) to every node that requires gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only requires-grad nodes keep a buffer.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = node.value.shape()[1];
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, vb.data(), !trans_b, ga, true);
                }
                if wants(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        gemm(n, m, k, g, true, va.data(), false, gb, true);
                    } else {
                        gemm(k, m, n, va.data(), true, g, false, gb, true);
                    }
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                    let ga = accumulate(&mut grads[a.0], r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        let gv = accumulate(&mut grads[v.0], g.len());
                        gv.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if wants(*bias) {
                    let n = val(*bias).len();
                    let gb = accumulate(&mut grads[bias.0], n);
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += s * y;
                    }
                }
                if wants(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(va) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s * c);
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let x = val(*a).data();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((d, s), &xv) in ga.iter_mut().zip(g).zip(x) {
                        *d += s * gelu_grad_scalar(xv);
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
                let gv = val(*gain).data();
                let n = gv.len();
                if wants(*gain) {
                    let gg = accumulate(&mut grads[gain.0], n);
                    for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = accumulate(&mut grads[bias.0], n);
                    for grow in g.chunks_exact(n) {
                        gb.iter_mut().zip(grow).for_each(|(d, s)| *d += s);
                    }
                }
                if wants(*x) {
                    let gx = accumulate(&mut grads[x.0], g.len());
                    let mut dh = vec![0.0; n];
                    for (r, ((grow, hrow), out)) in g
                        .chunks_exact(n)
                        .zip(xhat.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                        .enumerate()
                    {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..n {
                            dh[j] = grow[j] * gv[j];
                            sum_dh += dh[j];
                            sum_dh_h += dh[j] * hrow[j];
                        }
                        let scale = inv_std[r] / n as f64;
                        for j in 0..n {
                            out[j] += scale * (n as f64 * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((yrow, grow), out) in y
                        .chunks_exact(n)
                        .zip(g.chunks_exact(n))
                        .zip(ga.chunks_exact_mut(n))
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            out[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if wants(*a) {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((yrow, grow), out) in y
                        .chunks_exact(n)
                        .zip(g.chunks_exact(n))
                        .zip(ga.chunks_exact_mut(n))
                    {
                        let total: f64 = grow.iter().sum();
                        for j in 0..n {
                            out[j] += grow[j] - yrow[j].exp() * total;
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if wants(*x) {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let gx = accumulate(&mut grads[x.0], g.len());
                    for (r, ((yrow, grow), out)) in y
                        .chunks_exact(n)
                        .zip(g.chunks_exact(n))
                        .zip(gx.chunks_exact_mut(n))
                        .enumerate()
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            out[j] += (grow[j] - yrow[j] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                if wants(*a) {
                    let c = node.value.cols();
                    let total = val(*a).len();
                    let ga = accumulate(&mut grads[a.0], total);
                    ga[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::SliceCols { a, start } => {
                if wants(*a) {
                    let len = node.value.cols();
                    let c = val(*a).cols();
                    let total = val(*a).len();
                    let ga = accumulate(&mut grads[a.0], total);
                    for (i, grow) in g.chunks_exact(len).enumerate() {
                        ga[i * c + start..i * c + start + len]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    if wants(p) {
                        let gp = accumulate(&mut grads[p.0], len);
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, s)| *d += s);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (r, pc) = (val(p).rows(), val(p).cols());
                    if wants(p) {
                        let gp = accumulate(&mut grads[p.0], r * pc);
                        for i in 0..r {
                            gp[i * pc..(i + 1) * pc]
                                .iter_mut()
                                .zip(&g[i * total + offset..i * total + offset + pc])
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += pc;
                }
            }
            Op::GatherRows { table, ids } => {
                if wants(*table) {
                    let c = node.value.cols();
                    let total = val(*table).len();
                    let gt = accumulate(&mut grads[table.0], total);
                    for (grow, &id) in g.chunks_exact(c).zip(ids) {
                        gt[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let len = val(*a).len();
                    let ga = accumulate(&mut grads[a.0], len);
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::WeightedSum { a, weights } => {
                if wants(*a) {
                    let ga = accumulate(&mut grads[a.0], weights.len());
                    ga.iter_mut()
                        .zip(weights.data())
                        .for_each(|(d, w)| *d += g[0] * w);
                }
            }
            Op::MeanRows(a) => {
                if wants(*a) {
                    let va = val(*a);
                    let (r, c) = (va.rows(), va.cols());
                    let ga = accumulate(&mut grads[a.0], r * c);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j] / r as f64;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::MASK_SENTINEL;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Five-point central-difference gradient of `f` w.r.t. every
    /// coordinate of `inputs[which]`.
    fn numeric_grad(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], which: usize) -> Vec<f64> {
        let h = 1e-3;
        let mut work = inputs.to_vec();
        (0..inputs[which].len())
            .map(|i| {
                let orig = work[which].data()[i];
                let mut at = |d: f64| {
                    work[which].data_mut()[i] = orig + d;
                    let v = f(&work);
                    work[which].data_mut()[i] = orig;
                    v
                };
                let (f1, b1, f2, b2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
                (8.0 * (f1 - b1) - (f2 - b2)) / (12.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-8);
            assert!(rel < tol, "analytic {x} vs numeric {y}: rel {rel}");
        }
    }

    #[test]
    fn sum_of_param_has_unit_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::zeros(&[2, 3]));
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let data = vec![1.5, -2.0, 0.25];
        let p = tape.param(Tensor::vector(data.clone()).unwrap());
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap().get(p).unwrap();
        let expect: Vec<f64> = data.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.data(), expect.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(p), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::filled(&[1, 2], 3.0));
        let p = tape.param(Tensor::filled(&[1, 2], 2.0));
        let m = tape.mul(c, p).unwrap();
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = vec![
            rand_matrix(&mut rng, 3, 4),
            rand_matrix(&mut rng, 4, 4),
            rand_matrix(&mut rng, 1, 4),
            rand_matrix(&mut rng, 1, 4),
            rand_matrix(&mut rng, 5, 4),
        ];
        let mut mask = Tensor::zeros(&[3, 5]);
        mask.data_mut()[1] = MASK_SENTINEL;
        mask.data_mut()[7] = MASK_SENTINEL;
        let weights = rand_matrix(&mut rng, 3, 5);
        let build = |tape: &mut Tape, vars: &[Var]| -> Var {
            let h = tape.matmul(vars[0], vars[1]).unwrap();
            let h = tape.layer_norm(h, vars[2], vars[3], 1e-5).unwrap();
            let h = tape.gelu(h).unwrap();
            let logits = tape.matmul_t(h, vars[4]).unwrap();
            let logits = tape.scale(logits, 0.7).unwrap();
            let attn = tape.masked_softmax(logits, Some(&mask)).unwrap();
            let ctx = tape.matmul(attn, vars[4]).unwrap();
            let left = tape.slice_cols(ctx, 0, 2).unwrap();
            let right = tape.slice_cols(ctx, 2, 2).unwrap();
            let swapped = tape.concat_cols(&[right, left]).unwrap();
            let top = tape.slice_rows(swapped, 0, 1).unwrap();
            let stacked = tape.concat_rows(&[swapped, top]).unwrap();
            let normed = tape.l2_normalize_rows(stacked).unwrap();
            let t = tape.transpose(normed).unwrap();
            let sim = tape.matmul(normed, t).unwrap();
            let ls = tape.log_softmax(sim).unwrap();
            let mean = tape.mean_rows(ls).unwrap();
            let picked = tape.gather_rows(vars[4], &[0, 3, 3]).unwrap();
            let ws = tape.weighted_sum(attn, weights.clone()).unwrap();
            let s1 = tape.sum(mean).unwrap();
            let s2 = tape.sum(picked).unwrap();
            let s3 = tape.add(s1, s2).unwrap();
            let b = tape.add_row(s3, ws).unwrap();
            tape.sum(b).unwrap()
        };
        let f = |ins: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
            let root = build(&mut tape, &vars);
            tape.value(root).data()[0]
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root).unwrap();
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).unwrap();
            let numeric = numeric_grad(&f, &inputs, i);
            assert_close(analytic.data(), &numeric, 1e-5);
        }
    }

    #[test]
    fn masked_softmax_gradient_is_zero_on_blocked_entries() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::matrix(1, 3, vec![0.3, -0.2, 0.9]).unwrap());
        let mask = Tensor::matrix(1, 3, vec![0.0, MASK_SENTINEL, 0.0]).unwrap();
        let y = tape.masked_softmax(p, Some(&mask)).unwrap();
        let w = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let s = tape.weighted_sum(y, w).unwrap();
        let g = tape.backward(s).unwrap().get(p).unwrap();
        assert_eq!(g.data()[1], 0.0);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::scalar(1e300));
        assert!(matches!(tape.mul(p, p), Err(TensorError::NonFinite { .. })));
        let z = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.l2_normalize_rows(z), Err(TensorError::ZeroNorm { row: 0 })));
    }

    proptest! {
        #[test]
        fn masked_softmax_is_a_distribution(
            logits in proptest::collection::vec(-30.0f64..30.0, 1..12),
            seed in any::<u64>(),
        ) {
            let n = logits.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut mask: Vec<f64> = (0..n)
                .map(|_| if rng.random_bool(0.4) { MASK_SENTINEL } else { 0.0 })
                .collect();
            let keep = rng.random_range(0..n);
            mask[keep] = 0.0;
            let mask = Tensor::vector(mask).unwrap();
            let out = crate::tensor::masked_softmax(&Tensor::vector(logits.clone()).unwrap(), &mask).unwrap();
            let total: f64 = out.data().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            for (p, m) in out.data().iter().zip(mask.data()) {
                prop_assert!(*p >= 0.0);
                if *m != 0.0 {
                    prop_assert_eq!(*p, 0.0);
                }
            }
            let shift = rng.random_range(-50.0..50.0);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let out2 = crate::tensor::masked_softmax(&Tensor::vector(shifted).unwrap(), &mask).unwrap();
            for (a, b) in out.data().iter().zip(out2.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn matmul_is_associative(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5, p in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_matrix(&mut rng, m, k);
            let b = rand_matrix(&mut rng, k, n);
            let c = rand_matrix(&mut rng, n, p);
            use crate::tensor::matmul;
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.data().iter().zip(right.data()) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }

        #[test]
        fn random_composites_match_finite_differences(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_matrix(&mut rng, 2, 3);
            let w = rand_matrix(&mut rng, 3, 3);
            let f = |ins: &[Tensor]| {
                let mut tape = Tape::new();
                let a = tape.constant(ins[0].clone());
                let b = tape.constant(ins[1].clone());
                let h = tape.matmul(a, b).unwrap();
                let h = tape.gelu(h).unwrap();
                let h = tape.log_softmax(h).unwrap();
                let s = tape.sum(h).unwrap();
                tape.value(s).data()[0]
            };
            let mut tape = Tape::new();
            let a = tape.param(x.clone());
            let b = tape.param(w.clone());
            let h = tape.matmul(a, b).unwrap();
            let h = tape.gelu(h).unwrap();
            let h = tape.log_softmax(h).unwrap();
            let s = tape.sum(h).unwrap();
            let g = tape.backward(s).unwrap();
            let inputs = vec![x, w];
            for (i, v) in [a, b].into_iter().enumerate() {
                let numeric = numeric_grad(&f, &inputs, i);
                for (p, q) in g.get(v).unwrap().data().iter().zip(&numeric) {
                    let rel = (p - q).abs() / p.abs().max(q.abs()).max(1e-8);
                    prop_assert!(rel < 1e-5, "{} vs {}", p, q);
                }
            }
        }
    }
}
