use super::ops::{self, AttentionShape};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Gelu {
        x: Var,
        tanh: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        beta: Var,
    },
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Option<Vec<bool>>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Linear record of a forward computation, replayed in reverse by
/// [`Tape::backward`].
///
/// A tape is built for one loss evaluation and then dropped. Values recorded
/// on it are always finite: an op producing NaN or infinity fails with
/// [`Error::Numeric`] instead of recording.
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar with respect to every node that needed them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a value that is not differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true, "parameter")
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = ops::matmul_dims(self.value(a), self.value(b))?;
        let c = ops::matmul_fwd(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m, n], c)?, Op::MatMul(a, b), ng, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            return Err(Error::Contract(format!("add: {:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng, "add")
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        ops::bias_dims(self.value(x), self.value(bias))?;
        let out = ops::add_bias_fwd(self.value(x).data(), self.value(bias).data());
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let ng = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddBias(x, bias), ng, "add_bias")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            return Err(Error::Contract(format!("mul: {:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng, "mul")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng, "scale")
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng, "sum")
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s: T = x.data().iter().copied().sum::<T>() / T::lit(x.len() as f64);
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng, "mean")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (y, tanh) = ops::gelu_fwd(self.value(x).data());
        let out = Tensor::new(self.value(x).shape().to_vec(), y)?;
        let ng = self.needs(x);
        self.push(out, Op::Gelu { x, tanh }, ng, "gelu")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        ops::layer_norm_dims(self.value(x), self.value(gamma), self.value(beta))?;
        let o = ops::layer_norm_fwd(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            T::lit(ops::LAYER_NORM_EPS),
        );
        let out = Tensor::new(self.value(x).shape().to_vec(), o.y)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: o.xhat,
            rstd: o.rstd,
        };
        self.push(out, op, ng, "layer_norm")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.value(x).dims2()?;
        let y = ops::softmax_fwd(self.value(x).data(), cols);
        let out = Tensor::new(self.value(x).shape().to_vec(), y)?;
        let ng = self.needs(x);
        self.push(out, Op::Softmax(x), ng, "softmax")
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, dim) = self.value(table).dims2()?;
        ops::check_ids(ids, rows)?;
        if ids.is_empty() {
            return Err(Error::Contract("embedding: no ids given".into()));
        }
        let out = ops::embedding_fwd(self.value(table).data(), dim, ids);
        let out = Tensor::new(vec![ids.len(), dim], out)?;
        let ng = self.needs(table);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push(out, op, ng, "embedding")
    }

    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Result<Var> {
        let d = ops::attention_dims(self.value(q), self.value(k), self.value(v), shape)?;
        let (out, probs) = ops::attention_fwd(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            shape,
        );
        let out = Tensor::new(self.value(q).shape().to_vec(), out)?;
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        let op = Op::Attention { q, k, v, shape, probs };
        self.push(out, op, ng, "attention")
    }

    /// Mean next-token NLL over unmasked rows, shape `[1]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        let loss = ops::cross_entropy(self.value(logits), targets, mask)?;
        let count = mask.map_or(targets.len(), |m| m.iter().filter(|&&b| b).count());
        let ng = self.needs(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.map(<[bool]>::to_vec),
            count,
        };
        self.push(Tensor::scalar(loss), op, ng, "cross_entropy")
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let l = self.value(loss);
        if l.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                l.shape()
            )));
        }
        l.ensure_finite("loss")?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(l.shape().to_vec(), vec![T::one()])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (m, k, n) = ops::matmul_dims(self.value(*a), self.value(*b))?;
                    if self.needs(*a) {
                        let da = ops::matmul_bwd_lhs(g.data(), self.value(*b).data(), m, k, n);
                        self.accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let db = ops::matmul_bwd_rhs(g.data(), self.value(*a).data(), m, k, n);
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        self.accumulate(&mut grads, *a, g.data().to_vec());
                    }
                    if self.needs(*b) {
                        self.accumulate(&mut grads, *b, g.into_data());
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.needs(*bias) {
                        let cols = self.value(*bias).len();
                        self.accumulate(&mut grads, *bias, ops::column_sums(g.data(), cols));
                    }
                    if self.needs(*x) {
                        self.accumulate(&mut grads, *x, g.into_data());
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let d = g
                            .data()
                            .iter()
                            .zip(self.value(*b).data())
                            .map(|(&p, &q)| p * q)
                            .collect();
                        self.accumulate(&mut grads, *a, d);
                    }
                    if self.needs(*b) {
                        let d = g
                            .data()
                            .iter()
                            .zip(self.value(*a).data())
                            .map(|(&p, &q)| p * q)
                            .collect();
                        self.accumulate(&mut grads, *b, d);
                    }
                }
                Op::Scale(a, c) => {
                    let d = g.data().iter().map(|&p| p * *c).collect();
                    self.accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    self.accumulate(&mut grads, *a, vec![g.data()[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    let v = g.data()[0] / T::lit(n as f64);
                    self.accumulate(&mut grads, *a, vec![v; n]);
                }
                Op::Gelu { x, tanh } => {
                    let d = ops::gelu_bwd(self.value(*x).data(), tanh, g.data());
                    self.accumulate(&mut grads, *x, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (dx, dg, db) = ops::layer_norm_bwd(g.data(), xhat, rstd, self.value(*gamma).data());
                    if self.needs(*x) {
                        self.accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*gamma) {
                        self.accumulate(&mut grads, *gamma, dg);
                    }
                    if self.needs(*beta) {
                        self.accumulate(&mut grads, *beta, db);
                    }
                }
                Op::Softmax(x) => {
                    let cols = *node.value.shape().last().unwrap_or(&1);
                    let d = ops::softmax_bwd(node.value.data(), g.data(), cols);
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Embedding { table, ids } => {
                    let (rows, dim) = self.value(*table).dims2()?;
                    let d = ops::embedding_bwd(g.data(), rows, dim, ids);
                    self.accumulate(&mut grads, *table, d);
                }
                Op::Attention { q, k, v, shape, probs } => {
                    let d = self.value(*q).shape()[1];
                    let (dq, dk, dv) = ops::attention_bwd(
                        self.value(*q).data(),
                        self.value(*k).data(),
                        self.value(*v).data(),
                        probs,
                        g.data(),
                        d,
                        *shape,
                    );
                    for (var, dvar) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if self.needs(var) {
                            self.accumulate(&mut grads, var, dvar);
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                    count,
                } => {
                    let lv = self.value(*logits);
                    let vocab = lv.shape()[1];
                    let w = g.data()[0] / T::lit(*count as f64);
                    let mut d = vec![T::zero(); lv.len()];
                    for (i, (row, out)) in lv.data().chunks_exact(vocab).zip(d.chunks_exact_mut(vocab)).enumerate() {
                        if mask.as_ref().is_some_and(|m| !m[i]) {
                            continue;
                        }
                        out.copy_from_slice(row);
                        ops::softmax_row_in_place(out);
                        out[targets[i]] = out[targets[i]] - T::one();
                        for x in out.iter_mut() {
                            *x = *x * w;
                        }
                    }
                    self.accumulate(&mut grads, *logits, d);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Vec<T>) {
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.data_mut().iter_mut().zip(delta) {
                    *a = *a + d;
                }
            }
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("gradient matches value shape"));
            }
        }
    }
}
