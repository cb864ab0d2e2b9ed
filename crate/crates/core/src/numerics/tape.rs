//! Tensor-level reverse-mode differentiation.
//!
//! Every tracked operation appends a node holding its output value and
//! enough saved state to propagate gradients. [`Tape::backward`] walks the
//! nodes once, newest first, and returns one gradient per node that
//! influences the loss.

use std::collections::HashMap;

use super::param::ParamNode;
use super::tensor::{self, DenseTensor};
use crate::error::{MixerError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse derivative of a scalar loss with respect to the cosine logits
/// `z_i · w_c`.
#[derive(Debug, Clone)]
pub(crate) struct CosineGrad {
    pub sample: usize,
    pub category: usize,
    pub coef: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Reshape(Var),
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: DenseTensor,
        inv_std: Vec<f64>,
    },
    BatchNormInfer {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: DenseTensor,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    GroupMean {
        x: Var,
        group: usize,
    },
    GroupedScores {
        keys: Var,
        queries: Var,
        group: usize,
    },
    GroupedWeightedSum {
        weights: Var,
        values: Var,
        group: usize,
    },
    EmbedMean {
        table: Var,
        tokens: Vec<Vec<usize>>,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    SumSquares(Var),
    WeightedSum {
        x: Var,
        weights: DenseTensor,
    },
    CosineLoss {
        z: Var,
        w: Var,
        grads: Vec<CosineGrad>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Reshape(_) => "reshape",
            Op::BatchNormTrain { .. } => "batch_norm_train",
            Op::BatchNormInfer { .. } => "batch_norm_infer",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::GroupMean { .. } => "group_mean",
            Op::GroupedScores { .. } => "grouped_scores",
            Op::GroupedWeightedSum { .. } => "grouped_weighted_sum",
            Op::EmbedMean { .. } => "embed_mean",
            Op::ConcatRows(_) => "concat_rows",
            Op::Sum(_) => "sum",
            Op::SumSquares(_) => "sum_squares",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::CosineLoss { .. } => "cosine_loss",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: DenseTensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of tracked operations.
#[derive(Debug, Default)]
pub struct ComputeTape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

pub type Tape = ComputeTape;

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseTensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseTensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Node indices of non-leaf ops, in the order the reverse pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }

    /// Adds the gradient of every trainable param bound on `tape` into its
    /// `grad` buffer. Non-trainable params are left untouched.
    pub fn accumulate_into<'a>(
        &self,
        tape: &ComputeTape,
        params: impl IntoIterator<Item = &'a mut ParamNode>,
    ) {
        for p in params {
            if !p.trainable {
                continue;
            }
            if let Some(v) = tape.param_var(&p.name) {
                if let Some(g) = self.get(v) {
                    p.grad.add_assign(g);
                }
            }
        }
    }
}

fn expect_matrix(t: &DenseTensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(MixerError::InvalidTensor(format!(
            "{op} expects a matrix, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl ComputeTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: DenseTensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(MixerError::NonFinite(op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: DenseTensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked (used for inputs under gradient checks).
    pub fn input(&mut self, value: DenseTensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter. Binding the same name twice returns the same leaf,
    /// so shared weights accumulate gradient from every use.
    pub fn param(&mut self, p: &ParamNode) -> Var {
        if let Some(&v) = self.params.get(&p.name) {
            return v;
        }
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            requires_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(p.name.clone(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    /// `x[r×c] + bias[c]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let c = xv.cols();
        if bv.len() != c {
            return Err(MixerError::shape("add_row_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddRowBias(x, bias), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Batch normalization with batch statistics (biased variance).
    /// Returns the output and the per-feature batch mean and variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.value(x);
        let (n, c) = expect_matrix(xv, "batch_norm_train")?;
        if n < 2 {
            return Err(MixerError::BatchTooSmall(n));
        }
        check_len(self.value(gamma), c, "batch_norm gamma", xv)?;
        check_len(self.value(beta), c, "batch_norm beta", xv)?;
        let mut mean = vec![0.0; c];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(xv.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for i in 0..n {
            for (j, h) in xhat.row_mut(i).iter_mut().enumerate() {
                *h = (*h - mean[j]) * inv_std[j];
            }
        }
        let out = affine_rows(&xhat, self.value(gamma), self.value(beta));
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )?;
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = expect_matrix(xv, "batch_norm_infer")?;
        check_len(self.value(gamma), c, "batch_norm gamma", xv)?;
        check_len(self.value(beta), c, "batch_norm beta", xv)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(MixerError::shape(
                "batch_norm_infer",
                xv.shape(),
                &[running_mean.len()],
            ));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        for i in 0..n {
            for (j, h) in xhat.row_mut(i).iter_mut().enumerate() {
                *h = (*h - running_mean[j]) * inv_std[j];
            }
        }
        let out = affine_rows(&xhat, self.value(gamma), self.value(beta));
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            out,
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(a))?;
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Normalizes every row to unit length; degenerate rows are errors.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let xv = self.value(a);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let row = out.row_mut(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > tensor::EPS_NORM) {
                return Err(MixerError::DegenerateNorm {
                    norm,
                    eps: tensor::EPS_NORM,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::L2NormalizeRows { x: a, norms }, rg)
    }

    /// Mean over consecutive blocks of `group` rows: `[b·g × n] → [b × n]`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = expect_matrix(xv, "group_mean")?;
        if group == 0 || r % group != 0 {
            return Err(MixerError::shape("group_mean", xv.shape(), &[group]));
        }
        let b = r / group;
        let mut out = DenseTensor::zeros(&[b, c]);
        for i in 0..b {
            let o = out.row_mut(i);
            for j in 0..group {
                for (acc, v) in o.iter_mut().zip(xv.row(i * group + j)) {
                    *acc += v;
                }
            }
            o.iter_mut().for_each(|v| *v /= group as f64);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::GroupMean { x, group }, rg)
    }

    /// `out[i][j] = keys[i·g + j] · queries[i]`: `[b·g × d], [b × d] → [b × g]`.
    pub fn grouped_scores(&mut self, keys: Var, queries: Var, group: usize) -> Result<Var> {
        let kv = self.value(keys);
        let qv = self.value(queries);
        let (kr, kc) = expect_matrix(kv, "grouped_scores")?;
        let (qr, qc) = expect_matrix(qv, "grouped_scores")?;
        if kc != qc || group == 0 || kr != qr * group {
            return Err(MixerError::shape("grouped_scores", kv.shape(), qv.shape()));
        }
        let mut out = DenseTensor::zeros(&[qr, group]);
        for i in 0..qr {
            for j in 0..group {
                out.row_mut(i)[j] = tensor::dot(kv.row(i * group + j), qv.row(i));
            }
        }
        let rg = self.rg(&[keys, queries]);
        self.push(
            out,
            Op::GroupedScores {
                keys,
                queries,
                group,
            },
            rg,
        )
    }

    /// `out[i] = Σ_j weights[i][j] · values[i·g + j]`: `[b × g], [b·g × d] → [b × d]`.
    pub fn grouped_weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let wv = self.value(weights);
        let vv = self.value(values);
        let (b, group) = expect_matrix(wv, "grouped_weighted_sum")?;
        let (vr, d) = expect_matrix(vv, "grouped_weighted_sum")?;
        if vr != b * group {
            return Err(MixerError::shape("grouped_weighted_sum", wv.shape(), vv.shape()));
        }
        let mut out = DenseTensor::zeros(&[b, d]);
        for i in 0..b {
            for j in 0..group {
                let w = wv.get(i, j);
                let src = vv.row(i * group + j);
                for (o, v) in out.row_mut(i).iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
        let rg = self.rg(&[weights, values]);
        self.push(
            out,
            Op::GroupedWeightedSum {
                weights,
                values,
                group,
            },
            rg,
        )
    }

    /// Mean of embedding-table rows per token list: `[V × d] → [b × d]`.
    pub fn embed_mean(&mut self, table: Var, tokens: &[Vec<usize>]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = expect_matrix(tv, "embed_mean")?;
        if tokens.is_empty() {
            return Err(MixerError::InvalidTokens("empty batch".into()));
        }
        let mut out = DenseTensor::zeros(&[tokens.len(), d]);
        for (i, toks) in tokens.iter().enumerate() {
            if toks.is_empty() {
                return Err(MixerError::InvalidTokens("empty token list".into()));
            }
            let row = out.row_mut(i);
            for &t in toks {
                if t >= vocab {
                    return Err(MixerError::TokenOutOfVocab { token: t, vocab });
                }
                for (o, v) in row.iter_mut().zip(tv.row(t)) {
                    *o += v;
                }
            }
            row.iter_mut().for_each(|v| *v /= toks.len() as f64);
        }
        let rg = self.rg(&[table]);
        self.push(
            out,
            Op::EmbedMean {
                table,
                tokens: tokens.to_vec(),
            },
            rg,
        )
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(MixerError::InvalidTensor("concat of nothing".into()));
        }
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c || pv.shape().len() != 2 {
                return Err(MixerError::shape(
                    "concat_rows",
                    self.value(parts[0]).shape(),
                    pv.shape(),
                ));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = DenseTensor::matrix(rows, c, data)?;
        let rg = self.rg(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = DenseTensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let out = DenseTensor::scalar(self.value(a).data().iter().map(|v| v * v).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::SumSquares(a), rg)
    }

    /// Scalar probe `Σ x ⊙ weights`.
    pub fn weighted_sum(&mut self, a: Var, weights: DenseTensor) -> Result<Var> {
        let av = self.value(a);
        if av.len() != weights.len() {
            return Err(MixerError::shape("weighted_sum", av.shape(), weights.shape()));
        }
        let out = DenseTensor::scalar(tensor::dot(av.data(), weights.data()));
        let rg = self.rg(&[a]);
        self.push(out, Op::WeightedSum { x: a, weights }, rg)
    }

    /// Records a scalar loss whose gradient is sparse in the cosine logits
    /// `z[sample] · w[category]`.
    pub(crate) fn cosine_loss(
        &mut self,
        z: Var,
        w: Var,
        loss: f64,
        grads: Vec<CosineGrad>,
    ) -> Result<Var> {
        let rg = self.rg(&[z, w]);
        self.push(DenseTensor::scalar(loss), Op::CosineLoss { z, w, grads }, rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(MixerError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<DenseTensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(DenseTensor::filled(lv.shape(), 1.0));
        let mut visited = Vec::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited.push(idx);
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(MixerError::NonFinite("backward"));
            }
        }
        Ok(Gradients { grads, visited })
    }

    /// Reverse pass that writes gradients into the given params.
    pub fn backward_into<'a>(
        &self,
        loss: Var,
        params: impl IntoIterator<Item = &'a mut ParamNode>,
    ) -> Result<Gradients> {
        let g = self.backward(loss)?;
        g.accumulate_into(self, params);
        Ok(g)
    }

    fn send(&self, grads: &mut [Option<DenseTensor>], to: Var, g: DenseTensor) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &DenseTensor, grads: &mut [Option<DenseTensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    let ga = tensor::matmul(g, &tensor::transpose(bv)?)?;
                    self.send(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = tensor::matmul(&tensor::transpose(av)?, g)?;
                    self.send(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let ga = tensor::transpose(g)?;
                self.send(grads, *a, ga);
            }
            Op::AddRowBias(x, b) => {
                self.send(grads, *x, g.clone());
                if self.requires_grad(*b) {
                    let bv = self.value(*b);
                    let mut gb = DenseTensor::zeros(bv.shape());
                    for i in 0..g.rows() {
                        for (acc, v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    self.send(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Scale(a, k) => {
                let k = *k;
                self.send(grads, *a, g.map(|v| v * k));
            }
            Op::Relu(a) => {
                let gx = self.value(*a).zip_map(g, |x, gv| if x > 0.0 { gv } else { 0.0 })?;
                self.send(grads, *a, gx);
            }
            Op::Reshape(a) => {
                let ga = g.reshape(self.value(*a).shape())?;
                self.send(grads, *a, ga);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = (xhat.rows(), xhat.cols());
                let gv = self.value(*gamma);
                let (gg, gb) = affine_param_grads(g, xhat);
                self.send(grads, *gamma, gg);
                self.send(grads, *beta, gb);
                if self.requires_grad(*x) {
                    // dxhat = g·γ; dx = inv_std/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
                    let mut sum_d = vec![0.0; c];
                    let mut sum_dx = vec![0.0; c];
                    for i in 0..n {
                        for j in 0..c {
                            let d = g.get(i, j) * gv.data()[j];
                            sum_d[j] += d;
                            sum_dx[j] += d * xhat.get(i, j);
                        }
                    }
                    let nf = n as f64;
                    let mut gx = DenseTensor::zeros(xhat.shape());
                    for i in 0..n {
                        for j in 0..c {
                            let d = g.get(i, j) * gv.data()[j];
                            gx.row_mut(i)[j] = inv_std[j] / nf
                                * (nf * d - sum_d[j] - xhat.get(i, j) * sum_dx[j]);
                        }
                    }
                    self.send(grads, *x, gx);
                }
            }
            Op::BatchNormInfer {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let (gg, gb) = affine_param_grads(g, xhat);
                self.send(grads, *gamma, gg);
                self.send(grads, *beta, gb);
                if self.requires_grad(*x) {
                    let mut gx = g.clone();
                    for i in 0..gx.rows() {
                        for (j, v) in gx.row_mut(i).iter_mut().enumerate() {
                            *v *= gv.data()[j] * inv_std[j];
                        }
                    }
                    self.send(grads, *x, gx);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut gx = DenseTensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let inner = tensor::dot(yr, gr);
                    for (o, (yv, gv)) in gx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - inner);
                    }
                }
                self.send(grads, *a, gx);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut gx = DenseTensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let inner = tensor::dot(yr, gr);
                    for (o, (yv, gv)) in gx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = (gv - yv * inner) / norms[i];
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::GroupMean { x, group } => {
                let xv = self.value(*x);
                let mut gx = DenseTensor::zeros(xv.shape());
                for r in 0..xv.rows() {
                    let src = g.row(r / group);
                    for (o, v) in gx.row_mut(r).iter_mut().zip(src) {
                        *o = v / *group as f64;
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::GroupedScores {
                keys,
                queries,
                group,
            } => {
                let kv = self.value(*keys);
                let qv = self.value(*queries);
                if self.requires_grad(*keys) {
                    let mut gk = DenseTensor::zeros(kv.shape());
                    for i in 0..qv.rows() {
                        for j in 0..*group {
                            let s = g.get(i, j);
                            for (o, q) in gk.row_mut(i * group + j).iter_mut().zip(qv.row(i)) {
                                *o = s * q;
                            }
                        }
                    }
                    self.send(grads, *keys, gk);
                }
                if self.requires_grad(*queries) {
                    let mut gq = DenseTensor::zeros(qv.shape());
                    for i in 0..qv.rows() {
                        for j in 0..*group {
                            let s = g.get(i, j);
                            for (o, k) in gq.row_mut(i).iter_mut().zip(kv.row(i * group + j)) {
                                *o += s * k;
                            }
                        }
                    }
                    self.send(grads, *queries, gq);
                }
            }
            Op::GroupedWeightedSum {
                weights,
                values,
                group,
            } => {
                let wv = self.value(*weights);
                let vv = self.value(*values);
                if self.requires_grad(*weights) {
                    let mut gw = DenseTensor::zeros(wv.shape());
                    for i in 0..wv.rows() {
                        for j in 0..*group {
                            gw.row_mut(i)[j] = tensor::dot(g.row(i), vv.row(i * group + j));
                        }
                    }
                    self.send(grads, *weights, gw);
                }
                if self.requires_grad(*values) {
                    let mut gvals = DenseTensor::zeros(vv.shape());
                    for i in 0..wv.rows() {
                        for j in 0..*group {
                            let w = wv.get(i, j);
                            for (o, gi) in gvals.row_mut(i * group + j).iter_mut().zip(g.row(i)) {
                                *o = w * gi;
                            }
                        }
                    }
                    self.send(grads, *values, gvals);
                }
            }
            Op::EmbedMean { table, tokens } => {
                let tv = self.value(*table);
                let mut gt = DenseTensor::zeros(tv.shape());
                for (i, toks) in tokens.iter().enumerate() {
                    let scale = 1.0 / toks.len() as f64;
                    for &t in toks {
                        for (o, v) in gt.row_mut(t).iter_mut().zip(g.row(i)) {
                            *o += v * scale;
                        }
                    }
                }
                self.send(grads, *table, gt);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.len();
                    let slice = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    self.send(grads, p, DenseTensor::new(pv.shape().to_vec(), slice)?);
                }
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                self.send(grads, *a, DenseTensor::filled(self.value(*a).shape(), s));
            }
            Op::SumSquares(a) => {
                let s = g.data()[0];
                self.send(grads, *a, self.value(*a).map(|v| 2.0 * v * s));
            }
            Op::WeightedSum { x, weights } => {
                let s = g.data()[0];
                let gx = DenseTensor::new(
                    self.value(*x).shape().to_vec(),
                    weights.data().iter().map(|w| w * s).collect(),
                )?;
                self.send(grads, *x, gx);
            }
            Op::CosineLoss { z, w, grads: coefs } => {
                let s = g.data()[0];
                let zv = self.value(*z);
                let wv = self.value(*w);
                if self.requires_grad(*z) {
                    let mut gz = DenseTensor::zeros(zv.shape());
                    for cg in coefs {
                        let k = cg.coef * s;
                        for (o, wc) in gz.row_mut(cg.sample).iter_mut().zip(wv.row(cg.category)) {
                            *o += k * wc;
                        }
                    }
                    self.send(grads, *z, gz);
                }
                if self.requires_grad(*w) {
                    let mut gw = DenseTensor::zeros(wv.shape());
                    for cg in coefs {
                        let k = cg.coef * s;
                        for (o, zi) in gw.row_mut(cg.category).iter_mut().zip(zv.row(cg.sample)) {
                            *o += k * zi;
                        }
                    }
                    self.send(grads, *w, gw);
                }
            }
        }
        Ok(())
    }
}

fn check_len(t: &DenseTensor, want: usize, what: &'static str, x: &DenseTensor) -> Result<()> {
    if t.len() != want {
        return Err(MixerError::shape(what, x.shape(), t.shape()));
    }
    Ok(())
}

fn affine_rows(xhat: &DenseTensor, gamma: &DenseTensor, beta: &DenseTensor) -> DenseTensor {
    let mut out = xhat.clone();
    for i in 0..out.rows() {
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = *v * gamma.data()[j] + beta.data()[j];
        }
    }
    out
}

fn affine_param_grads(g: &DenseTensor, xhat: &DenseTensor) -> (DenseTensor, DenseTensor) {
    let c = xhat.cols();
    let mut gg = DenseTensor::zeros(&[c]);
    let mut gb = DenseTensor::zeros(&[c]);
    for i in 0..xhat.rows() {
        for j in 0..c {
            gg.data_mut()[j] += g.get(i, j) * xhat.get(i, j);
            gb.data_mut()[j] += g.get(i, j);
        }
    }
    (gg, gb)
}
