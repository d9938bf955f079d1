//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] records nodes in creation order, so every node's inputs precede
//! it and the node list is already topologically sorted. [`Graph::backward`]
//! walks the list in reverse and sums contributions into per-node gradient
//! accumulators in that fixed order, which makes gradients reproducible.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, NormStats, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// Elementwise product with a constant (dropout masks).
    MulConst(Var, Arc<Tensor<T>>),
    /// Addition of a constant (attention biases); gradient passes through.
    AddConst(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<T>,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
    },
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<(usize, usize)>,
        probs: Vec<Vec<T>>,
    },
    Sum(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | MatMulNt(a, b) | Add(a, b) | AddBias(a, b) | Mul(a, b) => vec![*a, *b],
            BatchMatMul { a, b, .. } => vec![*a, *b],
            Scale(x, _) | MulConst(x, _) | AddConst(x) | Gelu(x) | Reshape(x) | Sum(x) => vec![*x],
            Softmax { x, .. } | SplitHeads { x, .. } | MergeHeads { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Gather { table, .. } => vec![*table],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Arc<Tensor<T>>,
    requires_grad: bool,
}

/// A recorded computation. One graph per forward/backward step.
#[derive(Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`, or `None` when it does not influence the loss or
    /// does not require gradients.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, grad: Tensor<T>) {
    match slot {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .for_each(|(a, &b)| *a += b),
        None => *slot = Some(grad),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), true)
    }

    /// Trainable leaf sharing storage with the caller.
    pub fn param_shared(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.leaf(value, true)
    }

    /// Constant leaf; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `a · bᵀ` with `b` of shape `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMulNt(a, b), out))
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let out = tensor::batch_matmul(self.value(a), self.value(b), transpose_b)?;
        Ok(self.push(Op::BatchMatMul { a, b, transpose_b }, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), out))
    }

    /// `x + bias` with `bias` broadcast over every row of the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let h = xv.last_dim();
        if bv.numel() != h {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(h) {
            row.iter_mut().zip(bv.data()).for_each(|(a, &b)| *a += b);
        }
        Ok(self.push(Op::AddBias(x, bias), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(x, factor), out)
    }

    pub fn mul_const(&mut self, x: Var, mask: Tensor<T>) -> Result<Var> {
        let out = self.value(x).mul(&mask)?;
        Ok(self.push(Op::MulConst(x, Arc::new(mask)), out))
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let out = self.value(x).add(c)?;
        Ok(self.push(Op::AddConst(x), out))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = tensor::gelu(self.value(x));
        self.push(Op::Gelu(x), out)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax(self.value(x), axis)?;
        Ok(self.push(Op::Softmax { x, axis }, out))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (out, stats) =
            tensor::layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            out,
        ))
    }

    /// Selects rows of a 2-D `table`: output is `[rows.len(), cols]`.
    /// Used for embedding lookup and [CLS] pooling.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= tv.shape()[0]) {
            return Err(Error::Dimension {
                op: "gather",
                lhs: tv.shape().to_vec(),
                rhs: vec![rows.len()],
            });
        }
        let cols = tv.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(&tv.data()[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::new(vec![rows.len(), cols], data)?;
        Ok(self.push(
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            out,
        ))
    }

    /// `[batch*len, heads*dh]` → `[batch*heads, len, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let hidden = xv.last_dim();
        if xv.numel() != batch * len * hidden || hidden % heads != 0 {
            return Err(Error::Dimension {
                op: "split_heads",
                lhs: xv.shape().to_vec(),
                rhs: vec![batch, len, heads],
            });
        }
        let dh = hidden / heads;
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for t in 0..len {
                for h in 0..heads {
                    let from = (b * len + t) * hidden + h * dh;
                    let to = ((b * heads + h) * len + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let out = Tensor::new(vec![batch * heads, len, dh], out)?;
        Ok(self.push(
            Op::SplitHeads {
                x,
                batch,
                len,
                heads,
            },
            out,
        ))
    }

    /// `[batch*heads, len, dh]` → `[batch*len, heads*dh]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 || xv.shape()[0] != batch * heads || xv.shape()[1] != len {
            return Err(Error::Dimension {
                op: "merge_heads",
                lhs: xv.shape().to_vec(),
                rhs: vec![batch, len, heads],
            });
        }
        let dh = xv.shape()[2];
        let hidden = heads * dh;
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for t in 0..len {
                for h in 0..heads {
                    let to = (b * len + t) * hidden + h * dh;
                    let from = ((b * heads + h) * len + t) * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let out = Tensor::new(vec![batch * len, hidden], out)?;
        Ok(self.push(
            Op::MergeHeads {
                x,
                batch,
                len,
                heads,
            },
            out,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), out))
    }

    /// Mean cross entropy over labeled `(row, token)` pairs; scalar output.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[(usize, usize)]) -> Result<Var> {
        let (loss, probs) = tensor::cross_entropy_with_probs(self.value(logits), labels)?;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            for (input, g) in self.local_grads(node, &upstream)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], g);
                }
            }
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, node: &Node<T>, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = av.last_dim();
                let m = av.numel() / k;
                let n = bv.shape()[1];
                if self.wants(*a) {
                    // dA = dY · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        dy.data(),
                        n as isize,
                        1,
                        bv.data(),
                        1,
                        n as isize,
                        &mut da,
                        false,
                    );
                    out.push((*a, Tensor::new(av.shape().to_vec(), da)?));
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dY
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        1,
                        k as isize,
                        dy.data(),
                        n as isize,
                        1,
                        &mut db,
                        false,
                    );
                    out.push((*b, Tensor::new(bv.shape().to_vec(), db)?));
                }
            }
            Op::MatMulNt(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = av.last_dim();
                let m = av.numel() / k;
                let n = bv.shape()[0];
                if self.wants(*a) {
                    // dA = dY · B
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        dy.data(),
                        n as isize,
                        1,
                        bv.data(),
                        k as isize,
                        1,
                        &mut da,
                        false,
                    );
                    out.push((*a, Tensor::new(av.shape().to_vec(), da)?));
                }
                if self.wants(*b) {
                    // dB = dYᵀ · A
                    let mut db = vec![T::zero(); n * k];
                    T::gemm(
                        n,
                        m,
                        k,
                        dy.data(),
                        1,
                        n as isize,
                        av.data(),
                        k as isize,
                        1,
                        &mut db,
                        false,
                    );
                    out.push((*b, Tensor::new(bv.shape().to_vec(), db)?));
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = dy.shape()[2];
                let (sa, sb, sy) = (m * k, k * n, m * n);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); batch * sa];
                    for i in 0..batch {
                        // dA = dY · Bᵀ, where B is k×n (or stored n×k when transposed).
                        let (rs, cs) = if *transpose_b {
                            (k as isize, 1)
                        } else {
                            (1, n as isize)
                        };
                        T::gemm(
                            m,
                            n,
                            k,
                            &dy.data()[i * sy..(i + 1) * sy],
                            n as isize,
                            1,
                            &bv.data()[i * sb..(i + 1) * sb],
                            rs,
                            cs,
                            &mut da[i * sa..(i + 1) * sa],
                            false,
                        );
                    }
                    out.push((*a, Tensor::new(av.shape().to_vec(), da)?));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); batch * sb];
                    for i in 0..batch {
                        let a_i = &av.data()[i * sa..(i + 1) * sa];
                        let dy_i = &dy.data()[i * sy..(i + 1) * sy];
                        let db_i = &mut db[i * sb..(i + 1) * sb];
                        if *transpose_b {
                            // B stored n×k: dB = dYᵀ · A
                            T::gemm(
                                n, m, k, dy_i, 1, n as isize, a_i, k as isize, 1, db_i, false,
                            );
                        } else {
                            // dB = Aᵀ · dY
                            T::gemm(
                                k, m, n, a_i, 1, k as isize, dy_i, n as isize, 1, db_i, false,
                            );
                        }
                    }
                    out.push((*b, Tensor::new(bv.shape().to_vec(), db)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, dy.clone()));
                out.push((*b, dy.clone()));
            }
            Op::AddBias(x, bias) => {
                out.push((*x, dy.clone()));
                if self.wants(*bias) {
                    let bv = self.value(*bias);
                    let h = bv.numel();
                    let mut db = vec![T::zero(); h];
                    for row in dy.data().chunks(h) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                    }
                    out.push((*bias, Tensor::new(bv.shape().to_vec(), db)?));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, dy.mul(self.value(*b))?));
                }
                if self.wants(*b) {
                    out.push((*b, dy.mul(self.value(*a))?));
                }
            }
            Op::Scale(x, f) => out.push((*x, dy.map(|v| v * *f))),
            Op::MulConst(x, mask) => out.push((*x, dy.mul(mask)?)),
            Op::AddConst(x) => out.push((*x, dy.clone())),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                out.push((
                    *x,
                    dy.zip_map(xv, "gelu", |g, v| g * tensor::gelu_grad_scalar(v))?,
                ));
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = tensor::axis_layout(y.shape(), *axis)?;
                let mut dx = vec![T::zero(); y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: T = (0..len)
                            .map(|j| y.data()[base + j * inner] * dy.data()[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            dx[p] = y.data()[p] * (dy.data()[p] - dot);
                        }
                    }
                }
                out.push((*x, Tensor::new(y.shape().to_vec(), dx)?));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let gv = self.value(*gamma);
                let h = gv.numel();
                let rows = dy.numel() / h;
                let hn = T::from_usize(h).unwrap();
                let mut dgamma = vec![T::zero(); h];
                let mut dbeta = vec![T::zero(); h];
                let mut dx = vec![T::zero(); dy.numel()];
                for r in 0..rows {
                    let dyr = &dy.data()[r * h..(r + 1) * h];
                    let xh = &stats.normalized[r * h..(r + 1) * h];
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..h {
                        dgamma[j] += dyr[j] * xh[j];
                        dbeta[j] += dyr[j];
                        let d = dyr[j] * gv.data()[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                    }
                    mean_d /= hn;
                    mean_dx /= hn;
                    let rstd = stats.inv_std[r];
                    for j in 0..h {
                        let d = dyr[j] * gv.data()[j];
                        dx[r * h + j] = rstd * (d - mean_d - xh[j] * mean_dx);
                    }
                }
                out.push((*x, Tensor::new(dy.shape().to_vec(), dx)?));
                out.push((*gamma, Tensor::new(gv.shape().to_vec(), dgamma)?));
                out.push((
                    *beta,
                    Tensor::new(self.value(*beta).shape().to_vec(), dbeta)?,
                ));
            }
            Op::Gather { table, rows } => {
                let tv = self.value(*table);
                let cols = tv.shape()[1];
                let mut dt = Tensor::zeros(tv.shape());
                let d = dt.data_mut();
                for (i, &r) in rows.iter().enumerate() {
                    d[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(&dy.data()[i * cols..(i + 1) * cols])
                        .for_each(|(a, &b)| *a += b);
                }
                out.push((*table, dt));
            }
            Op::SplitHeads {
                x,
                batch,
                len,
                heads,
            } => {
                // Gradient of a permutation is the inverse permutation.
                let mut scratch = Graph::new();
                let v = scratch.constant(dy.clone());
                let merged = scratch.merge_heads(v, *batch, *len, *heads)?;
                let g = scratch
                    .value(merged)
                    .clone()
                    .reshape(self.value(*x).shape())?;
                out.push((*x, g));
            }
            Op::MergeHeads {
                x,
                batch,
                len,
                heads,
            } => {
                let mut scratch = Graph::new();
                let v = scratch.constant(dy.clone());
                let split = scratch.split_heads(v, *batch, *len, *heads)?;
                out.push((*x, scratch.value(split).clone()));
            }
            Op::Reshape(x) => out.push((*x, dy.clone().reshape(self.value(*x).shape())?)),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let lv = self.value(*logits);
                let vocab = lv.last_dim();
                let scale = dy.item() / T::from_usize(labels.len()).unwrap();
                let mut dl = Tensor::zeros(lv.shape());
                let d = dl.data_mut();
                for (&(pos, tok), p) in labels.iter().zip(probs) {
                    let row = &mut d[pos * vocab..(pos + 1) * vocab];
                    for (j, &pj) in p.iter().enumerate() {
                        row[j] += scale * pj;
                    }
                    row[tok] -= scale;
                }
                out.push((*logits, dl));
            }
            Op::Sum(x) => {
                let g = dy.item();
                out.push((*x, Tensor::full(self.value(*x).shape(), g)));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let data = [1.0, -2.0, 3.0, 0.5];
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[4], &data).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        let grads = g.backward(half).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &data);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::full(&[3], 2.0));
        let c = g.constant(Tensor::full(&[3], 5.0));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn split_merge_heads_round_trip() {
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[6, 4], &data).unwrap());
        let s = g.split_heads(x, 2, 3, 2).unwrap();
        assert_eq!(g.shape(s), &[4, 3, 2]);
        let m = g.merge_heads(s, 2, 3, 2).unwrap();
        assert_eq!(g.value(m).data(), &data[..]);
    }

    #[test]
    fn repeated_forward_is_bit_identical() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.param(Tensor::from_f64(&[2, 3], &[0.3, -1.2, 2.0, 0.7, 0.1, -0.5]).unwrap());
            let w =
                g.param(Tensor::from_f64(&[3, 2], &[0.5, -0.25, 1.5, 0.75, -1.0, 2.0]).unwrap());
            let y = g.matmul(x, w).unwrap();
            let y = g.gelu(y);
            let y = g.softmax(y, 1).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
