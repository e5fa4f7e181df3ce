//! Building blocks of the encoder, each with its backward pass.

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Matrix};

/// Sinusoidal position table: `P[i][2j] = sin(i / 10000^(2j/d))`,
/// `P[i][2j+1] = cos(i / 10000^(2j/d))`, positions counted from 0.
/// An odd `d` is computed as `d + 1` and truncated.
pub fn positional_encoding(h: usize, d: usize) -> Matrix {
    let even = d + d % 2;
    let mut p = Matrix::zeros(h, d);
    for i in 0..h {
        for pair in 0..even / 2 {
            let angle = i as f64 / 10000f64.powf((2 * pair) as f64 / even as f64);
            p[(i, 2 * pair)] = angle.sin();
            if 2 * pair + 1 < d {
                p[(i, 2 * pair + 1)] = angle.cos();
            }
        }
    }
    p
}

/// Row-softmax of `Q Kᵀ / √d_k` with masked key columns at weight zero,
/// followed by the weighted sum of `V`. Returns `(output, weights)`.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix, mask: &[bool]) -> Result<(Matrix, Matrix)> {
    if q.cols() != k.cols() || k.rows() != v.rows() || mask.len() != k.rows() {
        return Err(Error::Shape(format!(
            "attention shapes q {:?}, k {:?}, v {:?}, mask {}",
            q.shape(),
            k.shape(),
            v.shape(),
            mask.len()
        )));
    }
    if mask.iter().all(|&m| m) {
        return Err(Error::InvalidArgument("degenerate mask: every key position is masked".into()));
    }
    let weights = attention_weights(q, k, mask);
    let out = weights.matmul(v);
    Ok((out, weights))
}

pub(crate) fn attention_weights(q: &Matrix, k: &Matrix, mask: &[bool]) -> Matrix {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut s = q.matmul_t(k);
    for i in 0..s.rows() {
        let row = s.row_mut(i);
        for (x, &m) in row.iter_mut().zip(mask) {
            *x = if m { f64::NEG_INFINITY } else { *x * scale };
        }
        softmax_in_place(row);
    }
    s
}

/// Gradient through the row softmax: `dS = A ⊙ (dA − rowsum(dA ⊙ A))`.
pub(crate) fn softmax_rows_backward(a: &Matrix, da: &Matrix) -> Matrix {
    let mut ds = Matrix::zeros(a.rows(), a.cols());
    for i in 0..a.rows() {
        let ar = a.row(i);
        let dr = da.row(i);
        let inner: f64 = ar.iter().zip(dr).map(|(x, y)| x * y).sum();
        for ((o, &x), &y) in ds.row_mut(i).iter_mut().zip(ar).zip(dr) {
            *o = x * (y - inner);
        }
    }
    ds
}

pub const LN_EPS: f64 = 1e-5;

pub(crate) struct LayerNormCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &Matrix, gamma: &[f64], beta: &[f64]) -> (Matrix, LayerNormCache) {
    let (n, d) = x.shape();
    let mut y = Matrix::zeros(n, d);
    let mut xhat = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / d as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let h = (r[j] - mean) * is;
            xhat[(i, j)] = h;
            y[(i, j)] = gamma[j] * h + beta[j];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `dx`; accumulates `dgamma`, `dbeta`.
pub(crate) fn layer_norm_backward(
    dy: &Matrix,
    cache: &LayerNormCache,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Matrix {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let dr = dy.row(i);
        let hr = cache.xhat.row(i);
        for j in 0..d {
            dgamma[j] += dr[j] * hr[j];
            dbeta[j] += dr[j];
            dxhat[j] = dr[j] * gamma[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = is * (dxhat[j] - mean_d - hr[j] * mean_dh);
        }
    }
    dx
}

/// Bottleneck adapter: `x + relu(x·down + down_b)·up + up_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub down: Matrix,
    pub down_b: Matrix,
    pub up: Matrix,
    pub up_b: Matrix,
}

impl Adapter {
    pub fn zeros(d: usize, m: usize) -> Self {
        Adapter {
            down: Matrix::zeros(d, m),
            down_b: Matrix::zeros(1, m),
            up: Matrix::zeros(m, d),
            up_b: Matrix::zeros(1, d),
        }
    }

    /// `2·m·d + d + m`.
    pub fn parameter_count(&self) -> usize {
        self.down.len() + self.down_b.len() + self.up.len() + self.up_b.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.down.shape()
    }
}

pub(crate) struct AdapterCache {
    pub input: Matrix,
    pub hidden: Matrix,
}

pub(crate) fn adapter_forward(x: &Matrix, a: &Adapter) -> (Matrix, AdapterCache) {
    let mut hidden = x.matmul(&a.down);
    hidden.add_row_vector(a.down_b.data());
    hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    let mut delta = hidden.matmul(&a.up);
    delta.add_row_vector(a.up_b.data());
    let mut y = x.clone();
    y.add_assign(&delta);
    (
        y,
        AdapterCache {
            input: x.clone(),
            hidden,
        },
    )
}

/// Single-vector adapter application.
pub fn adapter_apply(x: &[f64], a: &Adapter) -> Vec<f64> {
    let m = Matrix::from_vec(1, x.len(), x.to_vec());
    adapter_forward(&m, a).0.data().to_vec()
}

pub(crate) fn adapter_backward(dy: &Matrix, cache: &AdapterCache, a: &Adapter, g: &mut Adapter) -> Matrix {
    cache.hidden.t_matmul_acc(dy, &mut g.up);
    dy.col_sums_acc(g.up_b.data_mut());
    let mut dh = dy.matmul_t(&a.up);
    for (d, h) in dh.data_mut().iter_mut().zip(cache.hidden.data()) {
        if *h <= 0.0 {
            *d = 0.0;
        }
    }
    cache.input.t_matmul_acc(&dh, &mut g.down);
    dh.col_sums_acc(g.down_b.data_mut());
    let mut dx = dy.clone();
    dx.add_assign(&dh.matmul_t(&a.down));
    dx
}
