//! Reverse-mode differentiation over a dynamically recorded op list.
//!
//! Every op appends one node holding its forward value. Node indices are a
//! valid topological order, so [`Tape::backward`] is a single reverse sweep.

use super::params::{GradBuffer, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{input_err, shape_err, Result};

/// Additive stabiliser inside every logarithm.
pub const LOG_EPS: f64 = 1e-10;
/// Variance stabiliser for layer and graph normalisation.
pub const NORM_EPS: f64 = 1e-5;

/// Reference to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    /// aᵀ · b
    TMatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Relu(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GraphNorm { x: Var, valid: Vec<bool>, xhat: Vec<f64>, inv_std: Vec<f64> },
    MaskRows(Var, Vec<bool>),
    GatherRows(Var, Vec<Option<usize>>),
    MeanRows(Var, Vec<bool>),
    KlRowwise { p: Var, q: Var, valid: Vec<bool> },
    Frobenius(Var),
    RowEntropy(Var, Vec<bool>),
    Nll(Var, usize),
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds the gradient of every parameter leaf on `tape` into `buffer`.
    pub fn accumulate_params(&self, tape: &Tape, buffer: &mut GradBuffer) {
        for (idx, node) in tape.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[idx]) {
                buffer.get_mut(*id).add_assign(g);
            }
        }
    }

    pub fn param_grads(&self, tape: &Tape, store: &ParamStore) -> GradBuffer {
        let mut buffer = GradBuffer::zeros_like(store);
        self.accumulate_params(tape, &mut buffer);
        buffer
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(shape_err!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
    }
}

fn check_flags(len: usize, flags: &[bool], what: &str) -> Result<()> {
    if flags.len() == len {
        Ok(())
    } else {
        Err(shape_err!("{what}: {} flags for {} rows", flags.len(), len))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Free leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a parameter in `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    /// `aᵀ · b`
    pub fn t_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).t_matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::TMatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// `a + 1·row`, broadcasting a `1 × d` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(shape_err!("add_row {:?} with {:?}", x.shape(), r.shape()));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// Scales every column `j` of `a` by `row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(shape_err!("mul_row {:?} with {:?}", x.shape(), r.shape()));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Row softmax restricted to entries where `allowed` is true.
    ///
    /// `allowed` is row-major with the shape of `scores`. Forbidden entries are
    /// exactly zero; rows with no allowed entry are all-zero.
    pub fn masked_softmax(&mut self, scores: Var, allowed: &[bool]) -> Result<Var> {
        let x = self.value(scores);
        if allowed.len() != x.len() {
            return Err(shape_err!("mask of {} entries for {:?}", allowed.len(), x.shape()));
        }
        let out = masked_softmax_value(x, allowed);
        let rg = self.rg(scores);
        Ok(self.push(out, Op::MaskedSoftmax(scores), rg))
    }

    /// Unmasked row softmax.
    pub fn softmax_rows(&mut self, scores: Var) -> Var {
        let n = self.value(scores).len();
        self.masked_softmax(scores, &vec![true; n]).expect("mask sized to input")
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = x.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for o in out.row_mut(i) {
                *o -= lse;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Per-row normalisation followed by the affine map `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        for p in [gain, bias] {
            let pv = self.value(p);
            if pv.rows() != 1 || pv.cols() != d {
                return Err(shape_err!("layer_norm affine {:?} for width {d}", pv.shape()));
            }
        }
        if d == 0 {
            return Err(shape_err!("layer_norm over zero-width rows"));
        }
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[i] = s;
            for j in 0..d {
                xhat[i * d + j] = (row[j] - mean) * s;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let out = Tensor::from_fn(n, d, |i, j| g.data()[j] * xhat[i * d + j] + b.data()[j]);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Per-feature normalisation over the rows flagged `valid`; other rows are zero.
    pub fn graph_norm(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        check_flags(n, valid, "graph_norm")?;
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(input_err!("graph_norm needs at least one valid node"));
        }
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; d];
        for j in 0..d {
            let mean = (0..n).filter(|&i| valid[i]).map(|i| xv.get(i, j)).sum::<f64>() / count as f64;
            let var = (0..n)
                .filter(|&i| valid[i])
                .map(|i| (xv.get(i, j) - mean).powi(2))
                .sum::<f64>()
                / count as f64;
            let s = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[j] = s;
            for i in (0..n).filter(|&i| valid[i]) {
                xhat[i * d + j] = (xv.get(i, j) - mean) * s;
            }
        }
        let out = Tensor::from_vec(n, d, xhat.clone())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::GraphNorm { x, valid: valid.to_vec(), xhat, inv_std }, rg))
    }

    /// Zeroes every row whose flag is false.
    pub fn mask_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let x = self.value(a);
        check_flags(x.rows(), keep, "mask_rows")?;
        let mut out = x.clone();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                out.row_mut(i).fill(0.0);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::MaskRows(a, keep.to_vec()), rg))
    }

    /// Row lookup into `table`; `None` produces a zero row.
    pub fn gather_rows(&mut self, table: Var, index: &[Option<usize>]) -> Result<Var> {
        let t = self.value(table);
        let d = t.cols();
        let mut out = Tensor::zeros(index.len(), d);
        for (i, idx) in index.iter().enumerate() {
            if let Some(r) = *idx {
                if r >= t.rows() {
                    return Err(input_err!("row index {r} out of range for {} rows", t.rows()));
                }
                out.row_mut(i).copy_from_slice(t.row(r));
            }
        }
        let rg = self.rg(table);
        Ok(self.push(out, Op::GatherRows(table, index.to_vec()), rg))
    }

    /// `1 × d` mean over rows flagged valid (zero row when none are).
    pub fn mean_rows(&mut self, a: Var, valid: &[bool]) -> Result<Var> {
        let x = self.value(a);
        check_flags(x.rows(), valid, "mean_rows")?;
        let count = valid.iter().filter(|&&v| v).count();
        let mut out = Tensor::zeros(1, x.cols());
        if count > 0 {
            for i in (0..x.rows()).filter(|&i| valid[i]) {
                for (o, v) in out.data_mut().iter_mut().zip(x.row(i)) {
                    *o += v;
                }
            }
            out.scale_in_place(1.0 / count as f64);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::MeanRows(a, valid.to_vec()), rg))
    }

    /// Mean over valid rows of `Σ_j p_ij·ln((p_ij+ε)/(q_ij+ε))`.
    pub fn kl_divergence_rowwise(&mut self, p: Var, q: Var, valid: &[bool]) -> Result<Var> {
        let (pv, qv) = (self.value(p), self.value(q));
        check_same(pv, qv, "kl_divergence_rowwise")?;
        check_flags(pv.rows(), valid, "kl_divergence_rowwise")?;
        let count = valid.iter().filter(|&&v| v).count();
        let mut total = 0.0;
        for i in (0..pv.rows()).filter(|&i| valid[i]) {
            for (a, b) in pv.row(i).iter().zip(qv.row(i)) {
                if *a != 0.0 {
                    total += a * ((a + LOG_EPS) / (b + LOG_EPS)).ln();
                }
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(Tensor::scalar(value), Op::KlRowwise { p, q, valid: valid.to_vec() }, rg))
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let value = self.value(a).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let rg = self.rg(a);
        self.push(Tensor::scalar(value), Op::Frobenius(a), rg)
    }

    /// Mean over valid rows of `−Σ_r s·ln(s+ε)`.
    pub fn row_entropy_sum(&mut self, s: Var, valid: &[bool]) -> Result<Var> {
        let sv = self.value(s);
        check_flags(sv.rows(), valid, "row_entropy_sum")?;
        let count = valid.iter().filter(|&&v| v).count();
        let mut total = 0.0;
        for i in (0..sv.rows()).filter(|&i| valid[i]) {
            for &x in sv.row(i) {
                if x != 0.0 {
                    total -= x * (x + LOG_EPS).ln();
                }
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(s);
        Ok(self.push(Tensor::scalar(value), Op::RowEntropy(s, valid.to_vec()), rg))
    }

    /// `−log_probs[label]` for a `1 × 2` log-probability row.
    pub fn nll_loss(&mut self, log_probs: Var, label: usize) -> Result<Var> {
        let lp = self.value(log_probs);
        if lp.len() != 2 {
            return Err(shape_err!("nll_loss expects two classes, got {:?}", lp.shape()));
        }
        if label > 1 {
            return Err(input_err!("label {label} is not a binary class"));
        }
        let value = -lp.data()[label];
        let rg = self.rg(log_probs);
        Ok(self.push(Tensor::scalar(value), Op::Nll(log_probs, label), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(value), Op::Sum(a), rg)
    }

    /// Exact reverse-mode gradients of the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(input_err!("backward needs a scalar loss, got {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut send = |v: Var, contribution: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;

        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.matmul_t(val(*b)).expect("recorded shapes"));
                }
                if self.rg(*b) {
                    send(*b, val(*a).t_matmul(g).expect("recorded shapes"));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.rg(*a) {
                    send(*a, g.matmul(val(*b)).expect("recorded shapes"));
                }
                if self.rg(*b) {
                    send(*b, g.t_matmul(val(*a)).expect("recorded shapes"));
                }
            }
            Op::TMatMul(a, b) => {
                // out = aᵀ b: da = b gᵀ, db = a g
                if self.rg(*a) {
                    send(*a, val(*b).matmul_t(g).expect("recorded shapes"));
                }
                if self.rg(*b) {
                    send(*b, val(*a).matmul(g).expect("recorded shapes"));
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.zip_map(val(*b), |x, y| x * y).expect("recorded shapes"));
                }
                if self.rg(*b) {
                    send(*b, g.zip_map(val(*a), |x, y| x * y).expect("recorded shapes"));
                }
            }
            Op::Scale(a, f) => send(*a, g.map(|x| x * f)),
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                if self.rg(*row) {
                    let mut r = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, v) in r.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    send(*row, r);
                }
            }
            Op::MulRow(a, row) => {
                let (x, r) = (val(*a), val(*row));
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        for (o, s) in ga.row_mut(i).iter_mut().zip(r.data()) {
                            *o *= s;
                        }
                    }
                    send(*a, ga);
                }
                if self.rg(*row) {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            gr.data_mut()[j] += g.get(i, j) * x.get(i, j);
                        }
                    }
                    send(*row, gr);
                }
            }
            Op::Relu(a) => {
                let x = val(*a);
                send(*a, g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }).expect("recorded shapes"));
            }
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(p, q)| p * q).sum();
                    for j in 0..y.cols() {
                        ga.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                send(*a, ga);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut ga = g.clone();
                for i in 0..y.rows() {
                    let total: f64 = g.row(i).iter().sum();
                    for j in 0..y.cols() {
                        ga.set(i, j, g.get(i, j) - y.get(i, j).exp() * total);
                    }
                }
                send(*a, ga);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = val(*gain);
                let (n, d) = (g.rows(), g.cols());
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = Tensor::zeros(1, d);
                    let mut db = Tensor::zeros(1, d);
                    for i in 0..n {
                        for j in 0..d {
                            dg.data_mut()[j] += g.get(i, j) * xhat[i * d + j];
                            db.data_mut()[j] += g.get(i, j);
                        }
                    }
                    send(*gain, dg);
                    send(*bias, db);
                }
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(n, d);
                    for i in 0..n {
                        let gh: Vec<f64> = (0..d).map(|j| g.get(i, j) * gv.data()[j]).collect();
                        let mean_g = gh.iter().sum::<f64>() / d as f64;
                        let mean_gx =
                            (0..d).map(|j| gh[j] * xhat[i * d + j]).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx.set(i, j, inv_std[i] * (gh[j] - mean_g - xhat[i * d + j] * mean_gx));
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::GraphNorm { x, valid, xhat, inv_std } => {
                let (n, d) = (g.rows(), g.cols());
                let count = valid.iter().filter(|&&v| v).count() as f64;
                let mut dx = Tensor::zeros(n, d);
                for j in 0..d {
                    let rows = || (0..n).filter(|&i| valid[i]);
                    let mean_g = rows().map(|i| g.get(i, j)).sum::<f64>() / count;
                    let mean_gx = rows().map(|i| g.get(i, j) * xhat[i * d + j]).sum::<f64>() / count;
                    for i in rows() {
                        dx.set(i, j, inv_std[j] * (g.get(i, j) - mean_g - xhat[i * d + j] * mean_gx));
                    }
                }
                send(*x, dx);
            }
            Op::MaskRows(a, keep) => {
                let mut ga = g.clone();
                for (i, &k) in keep.iter().enumerate() {
                    if !k {
                        ga.row_mut(i).fill(0.0);
                    }
                }
                send(*a, ga);
            }
            Op::GatherRows(table, index) => {
                let t = val(*table);
                let mut gt = Tensor::zeros(t.rows(), t.cols());
                for (i, idx) in index.iter().enumerate() {
                    if let Some(r) = *idx {
                        for (o, v) in gt.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
                send(*table, gt);
            }
            Op::MeanRows(a, valid) => {
                let x = val(*a);
                let count = valid.iter().filter(|&&v| v).count();
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                if count > 0 {
                    let w = 1.0 / count as f64;
                    for i in (0..x.rows()).filter(|&i| valid[i]) {
                        for (o, v) in ga.row_mut(i).iter_mut().zip(g.data()) {
                            *o = v * w;
                        }
                    }
                }
                send(*a, ga);
            }
            Op::KlRowwise { p, q, valid } => {
                let (pv, qv) = (val(*p), val(*q));
                let count = valid.iter().filter(|&&v| v).count();
                if count == 0 {
                    return;
                }
                let scale = g.item() / count as f64;
                let mut gp = Tensor::zeros(pv.rows(), pv.cols());
                let mut gq = Tensor::zeros(pv.rows(), pv.cols());
                for i in (0..pv.rows()).filter(|&i| valid[i]) {
                    for j in 0..pv.cols() {
                        let (a, b) = (pv.get(i, j), qv.get(i, j));
                        gp.set(i, j, scale * (((a + LOG_EPS) / (b + LOG_EPS)).ln() + a / (a + LOG_EPS)));
                        gq.set(i, j, -scale * a / (b + LOG_EPS));
                    }
                }
                if self.rg(*p) {
                    send(*p, gp);
                }
                if self.rg(*q) {
                    send(*q, gq);
                }
            }
            Op::Frobenius(a) => {
                let norm = node.value.item();
                if norm > 0.0 {
                    let f = g.item() / norm;
                    send(*a, val(*a).map(|x| x * f));
                } else {
                    let x = val(*a);
                    send(*a, Tensor::zeros(x.rows(), x.cols()));
                }
            }
            Op::RowEntropy(s, valid) => {
                let sv = val(*s);
                let count = valid.iter().filter(|&&v| v).count();
                let mut gs = Tensor::zeros(sv.rows(), sv.cols());
                if count > 0 {
                    let scale = g.item() / count as f64;
                    for i in (0..sv.rows()).filter(|&i| valid[i]) {
                        for j in 0..sv.cols() {
                            let x = sv.get(i, j);
                            gs.set(i, j, -scale * ((x + LOG_EPS).ln() + x / (x + LOG_EPS)));
                        }
                    }
                }
                send(*s, gs);
            }
            Op::Nll(lp, label) => {
                let mut ga = Tensor::zeros(1, 2);
                ga.data_mut()[*label] = -g.item();
                let shape = val(*lp).shape();
                send(*lp, Tensor::from_vec(shape[0], shape[1], ga.into_data()).expect("two entries"));
            }
            Op::Sum(a) => {
                let x = val(*a);
                send(*a, Tensor::filled(x.rows(), x.cols(), g.item()));
            }
        }
    }
}

/// Forward value of [`Tape::masked_softmax`].
pub fn masked_softmax_value(x: &Tensor, allowed: &[bool]) -> Tensor {
    let (n, m) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let mask = &allowed[i * m..(i + 1) * m];
        let row = x.row(i);
        let max = row
            .iter()
            .zip(mask)
            .filter(|(_, &a)| a)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let out_row = out.row_mut(i);
        let mut total = 0.0;
        for j in 0..m {
            if mask[j] {
                let e = (row[j] - max).exp();
                out_row[j] = e;
                total += e;
            }
        }
        for v in out_row.iter_mut() {
            *v /= total;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]));
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &Tensor::filled(2, 2, 1.0));
    }

    #[test]
    fn squared_norm_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let xv = Tensor::from_rows(&[vec![1.0, -2.0, 0.25]]);
        let x = tape.leaf(xv.clone());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &xv.map(|v| 2.0 * v));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(crate::Error::Input(_))));
    }

    #[test]
    fn matmul_shape_error() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(2, 3));
        let b = tape.leaf(Tensor::zeros(2, 3));
        assert!(matches!(tape.matmul(a, b), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let x = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.0, 4.0]]);
        let i2 = tape.constant(Tensor::identity(2));
        let xv = tape.constant(x.clone());
        let p = tape.matmul(i2, xv).unwrap();
        assert_eq!(tape.value(p), &x);

        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(Tensor::from_rows(&[vec![0.0], vec![1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &Tensor::from_rows(&[vec![2.0], vec![4.0]]));
    }

    #[test]
    fn masked_softmax_contract() {
        let mut tape = Tape::new();
        let s = tape.constant(Tensor::from_rows(&[vec![0.7, 0.7], vec![0.0, 5.0], vec![1.0, 2.0]]));
        let allowed = [true, true, true, false, false, false];
        let y = tape.masked_softmax(s, &allowed).unwrap();
        let y = tape.value(y);
        assert_eq!(y.row(0), &[0.5, 0.5]);
        assert_eq!(y.row(1), &[1.0, 0.0]);
        assert_eq!(y.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![3.0, 3.0, 3.0], vec![1.0, -1.0, 0.0]]));
        let g = tape.constant(Tensor::filled(1, 3, 1.0));
        let b = tape.constant(Tensor::zeros(1, 3));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert_eq!(tape.value(y).row(0), &[0.0, 0.0, 0.0]);

        let x = tape.constant(Tensor::from_rows(&[vec![1.0, -1.0]]));
        let g = tape.constant(Tensor::filled(1, 2, 1.0));
        let b = tape.constant(Tensor::zeros(1, 2));
        let y = tape.layer_norm(x, g, b).unwrap();
        let row = tape.value(y).row(0).to_vec();
        assert!((row[0] - 1.0).abs() < 1e-5 && (row[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn graph_norm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![2.5, -1.0], vec![0.0, 0.0]]));
        let y = tape.graph_norm(x, &[true, false]).unwrap();
        assert_eq!(tape.value(y), &Tensor::zeros(2, 2));

        let x = tape.constant(Tensor::from_rows(&[vec![0.3], vec![-0.3]]));
        let y = tape.graph_norm(x, &[true, true]).unwrap();
        let v = tape.value(y);
        // c = 0.3 gives variance 0.09; ε shifts the result by ~5e-5
        assert!((v.get(0, 0) - 1.0).abs() < 1e-3 && (v.get(1, 0) + 1.0).abs() < 1e-3);
        assert!((v.get(0, 0) + v.get(1, 0)).abs() < 1e-15);

        let x = tape.constant(Tensor::zeros(2, 2));
        assert!(matches!(tape.graph_norm(x, &[false, false]), Err(crate::Error::Input(_))));
    }

    #[test]
    fn loss_primitive_closed_forms() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let q = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5]]));
        let kl = tape.kl_divergence_rowwise(p, q, &[true]).unwrap();
        assert!((tape.value(kl).item() - 2f64.ln()).abs() < 1e-9);
        let same = tape.kl_divergence_rowwise(q, q, &[true]).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);

        let z = tape.constant(Tensor::zeros(3, 3));
        let f = tape.frobenius_norm(z);
        assert_eq!(tape.value(f).item(), 0.0);
        let m = tape.constant(Tensor::from_rows(&[vec![3.0, 4.0]]));
        let f = tape.frobenius_norm(m);
        assert_eq!(tape.value(f).item(), 5.0);

        let onehot = tape.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        let h = tape.row_entropy_sum(onehot, &[true, true]).unwrap();
        assert!(tape.value(h).item().abs() < 1e-9);
        let uniform = tape.constant(Tensor::filled(1, 4, 0.25));
        let h = tape.row_entropy_sum(uniform, &[true]).unwrap();
        assert!((tape.value(h).item() - 4f64.ln()).abs() < 1e-9);

        let lp = tape.constant(Tensor::row_vector(vec![(1.0 + LOG_EPS).ln(), LOG_EPS.ln()]));
        let l = tape.nll_loss(lp, 0).unwrap();
        assert!(tape.value(l).item().abs() < 1e-9);
        let lp = tape.constant(Tensor::row_vector(vec![0.5f64.ln(), 0.5f64.ln()]));
        let l = tape.nll_loss(lp, 1).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(tape.nll_loss(lp, 2), Err(crate::Error::Input(_))));
    }

    #[test]
    fn frobenius_subgradient_at_zero() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(2, 2));
        let f = tape.frobenius_norm(z);
        let grads = tape.backward(f).unwrap();
        assert_eq!(grads.wrt(z).unwrap(), &Tensor::zeros(2, 2));
    }
}
