//! Dense row-major tensors and the forward kernels shared by the autodiff graph.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default layer-norm epsilon (BERT convention).
pub const LAYER_NORM_EPS: f64 = 1e-12;

const GELU_COEF: f64 = 0.044_715;
// sqrt(2 / pi)
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(shape));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            data.iter().map(|&x| T::from_f64_lossy(x)).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the last dimension (1 for a scalar).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts element type, e.g. f64 → f32 for checkpoint storage.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.to_f64_lossy()))
                .collect(),
        }
    }
}

/// Matrix product over the last axis of `a` and the first axis of a 2-D `b`.
///
/// Leading dimensions of `a` are treated as rows, so `[batch, len, k] × [k, n]`
/// yields `[batch, len, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mismatch = || Error::Dimension {
        op: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    if a.rank() < 2 || b.rank() != 2 {
        return Err(mismatch());
    }
    let k = a.last_dim();
    if b.shape[0] != k {
        return Err(mismatch());
    }
    let m = a.numel() / k;
    let n = b.shape[1];
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m, k, n, &a.data, k as isize, 1, &b.data, n as isize, 1, &mut out, false,
    );
    let mut shape = a.shape[..a.rank() - 1].to_vec();
    shape.push(n);
    Ok(Tensor { shape, data: out })
}

/// `a · bᵀ` for a 2-D `b` of shape `[n, k]`; leading dimensions of `a` are rows.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mismatch = || Error::Dimension {
        op: "matmul_nt",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    if a.rank() < 2 || b.rank() != 2 || b.shape[1] != a.last_dim() {
        return Err(mismatch());
    }
    let k = a.last_dim();
    let m = a.numel() / k;
    let n = b.shape[0];
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        m, k, n, &a.data, k as isize, 1, &b.data, 1, k as isize, &mut out, false,
    );
    let mut shape = a.shape[..a.rank() - 1].to_vec();
    shape.push(n);
    Ok(Tensor { shape, data: out })
}

/// Batched product of `[batch, m, k]` with `[batch, k, n]`
/// (or `[batch, n, k]` when `transpose_b`).
pub fn batch_matmul<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    transpose_b: bool,
) -> Result<Tensor<T>> {
    let mismatch = || Error::Dimension {
        op: "batch_matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    if a.rank() != 3 || b.rank() != 3 || a.shape[0] != b.shape[0] {
        return Err(mismatch());
    }
    let (batch, m, k) = (a.shape[0], a.shape[1], a.shape[2]);
    let (kb, n) = if transpose_b {
        (b.shape[2], b.shape[1])
    } else {
        (b.shape[1], b.shape[2])
    };
    if kb != k {
        return Err(mismatch());
    }
    let mut out = vec![T::zero(); batch * m * n];
    let (rsb, csb) = if transpose_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    for i in 0..batch {
        T::gemm(
            m,
            k,
            n,
            &a.data[i * m * k..(i + 1) * m * k],
            k as isize,
            1,
            &b.data[i * k * n..(i + 1) * k * n],
            rsb,
            csb,
            &mut out[i * m * n..(i + 1) * m * n],
            false,
        );
    }
    Ok(Tensor {
        shape: vec![batch, m, n],
        data: out,
    })
}

/// `(outer, len, inner)` decomposition of a tensor around `axis`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout(&x.shape, axis)?;
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..len)
                .map(|j| out[idx(j)])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (out[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Per-row statistics kept by the layer-norm forward for its backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormStats<T> {
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_with_stats<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let h = x.last_dim();
    if gamma.numel() != h || beta.numel() != h {
        return Err(Error::Dimension {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    let rows = x.numel() / h;
    let hn = T::from_usize(h).unwrap();
    let mut out = vec![T::zero(); x.numel()];
    let mut normalized = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data[r * h..(r + 1) * h];
        let mean = row.iter().copied().sum::<T>() / hn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hn;
        let rstd = (var + eps).sqrt().recip();
        inv_std.push(rstd);
        for j in 0..h {
            let n = (row[j] - mean) * rstd;
            normalized[r * h + j] = n;
            out[r * h + j] = n * gamma.data[j] + beta.data[j];
        }
    }
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        NormStats {
            normalized,
            inv_std,
        },
    ))
}

/// Layer normalization over the last axis with affine `gamma`/`beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm_with_stats(x, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(SQRT_2_OVER_PI);
    let k = T::from_f64_lossy(GELU_COEF);
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(SQRT_2_OVER_PI);
    let k = T::from_f64_lossy(GELU_COEF);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Row-wise softmax of the labeled rows and the mean negative log-likelihood.
pub(crate) fn cross_entropy_with_probs<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[(usize, usize)],
) -> Result<(T, Vec<Vec<T>>)> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let vocab = logits.last_dim();
    let rows = logits.numel() / vocab;
    let mut total = T::zero();
    let mut probs = Vec::with_capacity(labels.len());
    for &(position, token) in labels {
        if position >= rows || token >= vocab {
            return Err(Error::LabelRange {
                position,
                token,
                rows,
                vocab,
            });
        }
        let row = &logits.data[position * vocab..(position + 1) * vocab];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut p: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = p.iter().copied().sum();
        total += z.ln() + max - row[token];
        p.iter_mut().for_each(|v| *v /= z);
        probs.push(p);
    }
    Ok((total / T::from_usize(labels.len()).unwrap(), probs))
}

/// Mean cross entropy over the labeled `(row, token)` pairs of `logits`
/// (rows = all leading dimensions flattened). Unlabeled rows contribute nothing.
pub fn cross_entropy_masked<T: Scalar>(logits: &Tensor<T>, labels: &[(usize, usize)]) -> Result<T> {
    cross_entropy_with_probs(logits, labels).map(|(loss, _)| loss)
}
