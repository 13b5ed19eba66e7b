//! Forward kernels and their vector-Jacobian products.
//!
//! The public functions are pure: identical inputs give bit-identical
//! outputs, inputs are validated for shape and finiteness, and nothing is
//! broadcast beyond the bias-row case the transformer needs. The
//! `*_fwd`/`*_bwd` pairs are shared with the tape.

use super::gemm::{gemm, MatMut, MatRef};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn shape_err(op: &str, detail: String) -> Error {
    Error::Contract(format!("{op}: {detail}"))
}

fn check_inputs<T: Scalar>(op: &str, inputs: &[&Tensor<T>]) -> Result<()> {
    for (i, t) in inputs.iter().enumerate() {
        t.ensure_finite(&format!("{op} input {i}"))?;
    }
    Ok(())
}

fn finish<T: Scalar>(op: &str, t: Tensor<T>) -> Result<Tensor<T>> {
    t.ensure_finite(op)?;
    Ok(t)
}

// ----------------------------------------------------------------------------
// matmul

pub(crate) fn matmul_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(shape_err(
            "matmul",
            format!("inner dimensions differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    Ok((m, k, n))
}

pub(crate) fn matmul_fwd<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm(
        T::one(),
        MatRef::row_major(a, 0, m, k, k),
        MatRef::row_major(b, 0, k, n, n),
        T::zero(),
        MatMut::row_major(&mut c, 0, m, n, n),
    );
    c
}

/// `dA = dC * B^T`
pub(crate) fn matmul_bwd_lhs<T: Scalar>(dc: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut da = vec![T::zero(); m * k];
    gemm(
        T::one(),
        MatRef::row_major(dc, 0, m, n, n),
        MatRef::row_major(b, 0, k, n, n).t(),
        T::zero(),
        MatMut::row_major(&mut da, 0, m, k, k),
    );
    da
}

/// `dB = A^T * dC`
pub(crate) fn matmul_bwd_rhs<T: Scalar>(dc: &[T], a: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut db = vec![T::zero(); k * n];
    gemm(
        T::one(),
        MatRef::row_major(a, 0, m, k, k).t(),
        MatRef::row_major(dc, 0, m, n, n),
        T::zero(),
        MatMut::row_major(&mut db, 0, k, n, n),
    );
    db
}

/// `[m, k] x [k, n] -> [m, n]`
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = matmul_dims(a, b)?;
    check_inputs("matmul", &[a, b])?;
    finish(
        "matmul",
        Tensor::new(vec![m, n], matmul_fwd(a.data(), b.data(), m, k, n))?,
    )
}

// ----------------------------------------------------------------------------
// elementwise

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if !a.same_shape(b) {
        return Err(shape_err("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    check_inputs("add", &[a, b])?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    finish("add", Tensor::new(a.shape().to_vec(), data)?)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if !a.same_shape(b) {
        return Err(shape_err("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    check_inputs("mul", &[a, b])?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    finish("mul", Tensor::new(a.shape().to_vec(), data)?)
}

pub(crate) fn bias_dims<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize)> {
    let (rows, cols) = x.dims2()?;
    if bias.shape() != [cols] {
        return Err(shape_err(
            "add_bias",
            format!("bias {:?} does not match {cols} columns", bias.shape()),
        ));
    }
    Ok((rows, cols))
}

pub(crate) fn add_bias_fwd<T: Scalar>(x: &[T], bias: &[T]) -> Vec<T> {
    let cols = bias.len();
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(cols) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o = *o + b;
        }
    }
    out
}

/// Column sums of a `[rows, cols]` gradient.
pub(crate) fn column_sums<T: Scalar>(dy: &[T], cols: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); cols];
    for row in dy.chunks_exact(cols) {
        for (a, &g) in acc.iter_mut().zip(row) {
            *a = *a + g;
        }
    }
    acc
}

/// Adds a `[cols]` bias to every row of a `[rows, cols]` tensor.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    bias_dims(x, bias)?;
    check_inputs("add_bias", &[x, bias])?;
    finish(
        "add_bias",
        Tensor::new(x.shape().to_vec(), add_bias_fwd(x.data(), bias.data()))?,
    )
}

// ----------------------------------------------------------------------------
// gelu (tanh approximation)

/// Returns `(y, tanh(u))`; the tanh values are reused by the backward pass.
pub(crate) fn gelu_fwd<T: Scalar>(x: &[T]) -> (Vec<T>, Vec<T>) {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let th: Vec<T> = x.iter().map(|&v| (c * (v + a * v * v * v)).gelu_tanh()).collect();
    let y = x.iter().zip(&th).map(|(&v, &t)| half * v * (T::one() + t)).collect();
    (y, th)
}

pub(crate) fn gelu_bwd<T: Scalar>(x: &[T], th: &[T], dy: &[T]) -> Vec<T> {
    let c = T::lit(GELU_C);
    let a3 = T::lit(3.0 * GELU_A);
    let half = T::lit(0.5);
    x.iter()
        .zip(th)
        .zip(dy)
        .map(|((&v, &t), &g)| {
            let du = c * (T::one() + a3 * v * v);
            g * (half * (T::one() + t) + half * v * (T::one() - t * t) * du)
        })
        .collect()
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_inputs("gelu", &[x])?;
    finish("gelu", Tensor::new(x.shape().to_vec(), gelu_fwd(x.data()).0)?)
}

// ----------------------------------------------------------------------------
// layer norm over the last dimension

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) struct LayerNormOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_dims<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize)> {
    let (rows, cols) = x.dims2()?;
    if gamma.shape() != [cols] || beta.shape() != [cols] {
        return Err(shape_err(
            "layer_norm",
            format!(
                "gain {:?} / shift {:?} do not match {cols} features",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok((rows, cols))
}

pub(crate) fn layer_norm_fwd<T: Scalar>(x: &[T], gamma: &[T], beta: &[T], eps: T) -> LayerNormOut<T> {
    let cols = gamma.len();
    let n = T::lit(cols as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / cols);
    for ((row, yrow), hrow) in x
        .chunks_exact(cols)
        .zip(y.chunks_exact_mut(cols))
        .zip(xhat.chunks_exact_mut(cols))
    {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        for j in 0..cols {
            let h = (row[j] - mean) * r;
            hrow[j] = h;
            yrow[j] = h * gamma[j] + beta[j];
        }
        rstd.push(r);
    }
    LayerNormOut { y, xhat, rstd }
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_bwd<T: Scalar>(dy: &[T], xhat: &[T], rstd: &[T], gamma: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cols = gamma.len();
    let n = T::lit(cols as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); cols];
    let mut dbeta = vec![T::zero(); cols];
    let mut dxhat = vec![T::zero(); cols];
    for (((g, h), &r), out) in dy
        .chunks_exact(cols)
        .zip(xhat.chunks_exact(cols))
        .zip(rstd)
        .zip(dx.chunks_exact_mut(cols))
    {
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..cols {
            dgamma[j] = dgamma[j] + g[j] * h[j];
            dbeta[j] = dbeta[j] + g[j];
            dxhat[j] = g[j] * gamma[j];
            m1 = m1 + dxhat[j];
            m2 = m2 + dxhat[j] * h[j];
        }
        m1 = m1 / n;
        m2 = m2 / n;
        for j in 0..cols {
            out[j] = r * (dxhat[j] - m1 - h[j] * m2);
        }
    }
    (dx, dgamma, dbeta)
}

pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    layer_norm_dims(x, gamma, beta)?;
    check_inputs("layer_norm", &[x, gamma, beta])?;
    let out = layer_norm_fwd(x.data(), gamma.data(), beta.data(), T::lit(LAYER_NORM_EPS));
    finish("layer_norm", Tensor::new(x.shape().to_vec(), out.y)?)
}

// ----------------------------------------------------------------------------
// row softmax

pub(crate) fn softmax_row_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

pub(crate) fn softmax_fwd<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut y = x.to_vec();
    for row in y.chunks_exact_mut(cols) {
        softmax_row_in_place(row);
    }
    y
}

pub(crate) fn softmax_bwd<T: Scalar>(y: &[T], dy: &[T], cols: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, gr), out) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for j in 0..cols {
            out[j] = yr[j] * (gr[j] - dot);
        }
    }
    dx
}

/// Softmax over each row of a 2-D tensor.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, cols) = x.dims2()?;
    check_inputs("softmax", &[x])?;
    finish("softmax", Tensor::new(x.shape().to_vec(), softmax_fwd(x.data(), cols))?)
}

// ----------------------------------------------------------------------------
// embedding gather

pub(crate) fn check_ids(ids: &[usize], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&id| id >= vocab) {
        Some(id) => Err(Error::Contract(format!(
            "embedding id {id} out of range for table of {vocab} rows"
        ))),
        None => Ok(()),
    }
}

pub(crate) fn embedding_fwd<T: Scalar>(table: &[T], dim: usize, ids: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(ids.len() * dim);
    for &id in ids {
        out.extend_from_slice(&table[id * dim..(id + 1) * dim]);
    }
    out
}

pub(crate) fn embedding_bwd<T: Scalar>(dy: &[T], rows: usize, dim: usize, ids: &[usize]) -> Vec<T> {
    let mut dt = vec![T::zero(); rows * dim];
    for (g, &id) in dy.chunks_exact(dim).zip(ids) {
        for (d, &v) in dt[id * dim..(id + 1) * dim].iter_mut().zip(g) {
            *d = *d + v;
        }
    }
    dt
}

/// Gathers rows of a `[vocab, dim]` table.
pub fn embedding<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let (rows, dim) = table.dims2()?;
    check_ids(ids, rows)?;
    if ids.is_empty() {
        return Err(shape_err("embedding", "no ids given".into()));
    }
    check_inputs("embedding", &[table])?;
    Tensor::new(vec![ids.len(), dim], embedding_fwd(table.data(), dim, ids))
}

// ----------------------------------------------------------------------------
// fused causal self-attention

/// Layout of packed attention inputs: `batch` sequences of `seq` positions,
/// rows `[b * seq + i]`, features split evenly across `heads`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

pub(crate) fn attention_dims<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    s: AttentionShape,
) -> Result<usize> {
    let (rows, d) = q.dims2()?;
    if !q.same_shape(k) || !q.same_shape(v) {
        return Err(shape_err(
            "attention",
            format!("q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    if s.heads == 0 || d % s.heads != 0 {
        return Err(shape_err("attention", format!("{d} features over {} heads", s.heads)));
    }
    if rows != s.batch * s.seq {
        return Err(shape_err(
            "attention",
            format!("{rows} rows for {} x {} positions", s.batch, s.seq),
        ));
    }
    Ok(d)
}

/// Returns `(output, probabilities)`; probabilities are `[batch, heads, seq, seq]`
/// with exact zeros above the diagonal.
pub(crate) fn attention_fwd<T: Scalar>(q: &[T], k: &[T], v: &[T], d: usize, s: AttentionShape) -> (Vec<T>, Vec<T>) {
    let t = s.seq;
    let dh = d / s.heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut probs = vec![T::zero(); s.batch * s.heads * t * t];
    let mut out = vec![T::zero(); s.batch * t * d];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = b * t * d + h * dh;
            let p = &mut probs[(b * s.heads + h) * t * t..][..t * t];
            gemm(
                scale,
                MatRef::row_major(q, off, t, dh, d),
                MatRef::row_major(k, off, t, dh, d).t(),
                T::zero(),
                MatMut::row_major(p, 0, t, t, t),
            );
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                softmax_row_in_place(&mut row[..=i]);
                row[i + 1..].fill(T::zero());
            }
            gemm(
                T::one(),
                MatRef::row_major(p, 0, t, t, t),
                MatRef::row_major(v, off, t, dh, d),
                T::zero(),
                MatMut::row_major(&mut out, off, t, dh, d),
            );
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub(crate) fn attention_bwd<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    d: usize,
    s: AttentionShape,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let t = s.seq;
    let dh = d / s.heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut ds = vec![T::zero(); t * t];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let off = b * t * d + h * dh;
            let p = &probs[(b * s.heads + h) * t * t..][..t * t];
            // dP = dO V^T
            gemm(
                T::one(),
                MatRef::row_major(dout, off, t, dh, d),
                MatRef::row_major(v, off, t, dh, d).t(),
                T::zero(),
                MatMut::row_major(&mut ds, 0, t, t, t),
            );
            // dV = P^T dO
            gemm(
                T::one(),
                MatRef::row_major(p, 0, t, t, t).t(),
                MatRef::row_major(dout, off, t, dh, d),
                T::zero(),
                MatMut::row_major(&mut dv, off, t, dh, d),
            );
            for i in 0..t {
                let prow = &p[i * t..(i + 1) * t];
                let drow = &mut ds[i * t..(i + 1) * t];
                let dot: T = prow[..=i].iter().zip(&drow[..=i]).map(|(&a, &g)| a * g).sum();
                for j in 0..=i {
                    drow[j] = prow[j] * (drow[j] - dot) * scale;
                }
                drow[i + 1..].fill(T::zero());
            }
            gemm(
                T::one(),
                MatRef::row_major(&ds, 0, t, t, t),
                MatRef::row_major(k, off, t, dh, d),
                T::zero(),
                MatMut::row_major(&mut dq, off, t, dh, d),
            );
            gemm(
                T::one(),
                MatRef::row_major(&ds, 0, t, t, t).t(),
                MatRef::row_major(q, off, t, dh, d),
                T::zero(),
                MatMut::row_major(&mut dk, off, t, dh, d),
            );
        }
    }
    (dq, dk, dv)
}

/// Multi-head scaled dot-product attention with a causal mask inside each
/// packed sequence.
pub fn causal_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    shape: AttentionShape,
) -> Result<Tensor<T>> {
    let d = attention_dims(q, k, v, shape)?;
    check_inputs("attention", &[q, k, v])?;
    let (out, _) = attention_fwd(q.data(), k.data(), v.data(), d, shape);
    finish("attention", Tensor::new(q.shape().to_vec(), out)?)
}

// ----------------------------------------------------------------------------
// next-token cross-entropy

pub(crate) fn check_targets<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: Option<&[bool]>,
) -> Result<(usize, usize)> {
    let (rows, vocab) = logits.dims2()?;
    if targets.len() != rows || mask.is_some_and(|m| m.len() != rows) {
        return Err(shape_err(
            "cross_entropy",
            format!("{rows} logit rows but {} targets", targets.len()),
        ));
    }
    for (i, &t) in targets.iter().enumerate() {
        if mask.is_none_or(|m| m[i]) && t >= vocab {
            return Err(Error::Contract(format!(
                "target id {t} out of range for vocabulary {vocab}"
            )));
        }
    }
    Ok((rows, vocab))
}

/// Negative log-likelihood of `target` under the softmax of each logit row.
pub(crate) fn row_nll<T: Scalar>(row: &[T], target: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    lse - row[target]
}

/// Per-row negative log-likelihood of `targets` (nats).
pub fn token_nll<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<Vec<T>> {
    let (_, vocab) = check_targets(logits, targets, None)?;
    check_inputs("token_nll", &[logits])?;
    Ok(logits
        .data()
        .chunks_exact(vocab)
        .zip(targets)
        .map(|(row, &t)| row_nll(row, t))
        .collect())
}

/// Mean NLL over unmasked rows.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &[usize], mask: Option<&[bool]>) -> Result<T> {
    let (rows, vocab) = check_targets(logits, targets, mask)?;
    check_inputs("cross_entropy", &[logits])?;
    let mut sum = T::zero();
    let mut count = 0usize;
    for i in 0..rows {
        if mask.is_none_or(|m| m[i]) {
            sum = sum + row_nll(&logits.data()[i * vocab..(i + 1) * vocab], targets[i]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Contract("cross_entropy: every position is masked".into()));
    }
    let loss = sum / T::lit(count as f64);
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("cross_entropy: loss {loss}")));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul_returns_rhs() {
        let eye = t2(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let a = t2(&[&[1.5, -2.0, 3.0], &[0.25, 7.0, -1.0], &[4.0, 0.0, 9.5]]);
        assert_eq!(matmul(&eye, &a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::from_rows(&[&[1.0f32, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[5.0f32], &[6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let a = Tensor::new(vec![1, 2], vec![1.0f32, f32::NAN]).unwrap();
        let b = Tensor::<f32>::zeros(vec![2, 1]);
        assert!(matches!(matmul(&a, &b), Err(Error::Numeric(_))));
        assert!(matches!(gelu(&a), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = Tensor::<f32>::zeros(vec![1, 3]);
        let y = softmax_rows(&x).unwrap();
        for &p in y.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f32 * 1.7).sin() * 30.0).collect()).unwrap();
        let y = softmax_rows(&x).unwrap();
        for row in y.data().chunks(4) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let x = t2(&[&[1.0, 2.0, 3.0, 4.0], &[-5.0, 0.0, 5.0, 10.0]]);
        let g = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let b = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        let y = layer_norm(&x, &g, &b).unwrap();
        for row in y.data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_reference_points() {
        let x = Tensor::new(vec![3], vec![0.0f64, 1.0, -1.0]).unwrap();
        let y = gelu(&x).unwrap();
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841_192).abs() < 1e-5);
        assert!((y.data()[2] + 0.158_808).abs() < 1e-5);
    }

    #[test]
    fn embedding_gathers_and_checks_range() {
        let table = t2(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let out = embedding(&table, &[2, 0, 2]).unwrap();
        assert_eq!(out.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        assert!(matches!(embedding(&table, &[3]), Err(Error::Contract(_))));
    }

    #[test]
    fn attention_first_position_copies_its_value() {
        // Position 0 can only attend to itself.
        let s = AttentionShape {
            batch: 1,
            seq: 3,
            heads: 2,
        };
        let q = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let k = q.map(|x| -x);
        let v = Tensor::new(vec![3, 4], (0..12).map(|i| (i * i) as f64).collect()).unwrap();
        let out = causal_attention(&q, &k, &v, s).unwrap();
        assert_eq!(&out.data()[..4], &v.data()[..4]);
    }

    #[test]
    fn attention_is_causal() {
        let s = AttentionShape {
            batch: 2,
            seq: 5,
            heads: 2,
        };
        let mk = |seed: f64| Tensor::new(vec![10, 4], (0..40).map(|i| ((i as f64) * seed).sin()).collect()).unwrap();
        let (q, k, v) = (mk(0.3), mk(0.7), mk(1.1));
        let base = causal_attention(&q, &k, &v, s).unwrap();
        // Perturb row 3 of sequence 0 in k and v.
        let mut k2 = k.clone();
        let mut v2 = v.clone();
        for j in 0..4 {
            k2.data_mut()[3 * 4 + j] += 5.0;
            v2.data_mut()[3 * 4 + j] -= 2.0;
        }
        let pert = causal_attention(&q, &k2, &v2, s).unwrap();
        assert_eq!(&base.data()[..12], &pert.data()[..12]);
        assert_ne!(&base.data()[12..16], &pert.data()[12..16]);
        assert_eq!(&base.data()[20..], &pert.data()[20..]);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_vocab() {
        let logits = Tensor::<f32>::zeros(vec![5, 16]);
        let loss = cross_entropy(&logits, &[0, 3, 15, 7, 2], None).unwrap();
        assert!((loss - 16f32.ln()).abs() < 1e-6);
        let nll = token_nll(&logits, &[1, 2, 3, 4, 5]).unwrap();
        assert!(nll.iter().all(|&x| (x - 16f32.ln()).abs() < 1e-6));
    }

    #[test]
    fn masked_rows_do_not_count() {
        let logits = Tensor::new(vec![2, 2], vec![0.0f64, 0.0, 10.0, -10.0]).unwrap();
        let l = cross_entropy(&logits, &[0, 1], Some(&[true, false])).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&logits, &[0, 1], Some(&[false, false])).is_err());
    }
}
