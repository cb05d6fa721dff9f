//! Dense f64 tensor with the handful of primitives the encoder stack needs.
//! Row-major storage; everything is 64-bit so gradient checks stay sharp.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor {
            shape: vec![r, c],
            data,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal() * std).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row count of a 2-d tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    /// Column count of a 2-d tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape("add", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape("sub", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn mul_elem(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape("mul_elem", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Tensor, s: f64) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    /// Broadcast-add a length-n vector to every row of an [m, n] matrix.
    pub fn add_row_broadcast(&self, bias: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || bias.shape != [self.shape[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.shape.clone(),
                rhs: bias.shape.clone(),
            });
        }
        let mut out = self.clone();
        let n = self.shape[1];
        for r in 0..self.shape[0] {
            for j in 0..n {
                out.data[r * n + j] += bias.data[j];
            }
        }
        Ok(out)
    }

    /// Copy of rows [lo, hi).
    pub fn slice_rows(&self, lo: usize, hi: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![hi - lo, c],
            data: self.data[lo * c..hi * c].to_vec(),
        }
    }

    pub fn transpose2(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    /// Matrix product. For rank-2 operands this is the plain [m,k]x[k,n]
    /// product; rank-3 operands are multiplied per leading index.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        match (self.shape.len(), other.shape.len()) {
            (2, 2) => {
                if self.shape[1] != other.shape[0] {
                    return Err(Error::ShapeMismatch {
                        op: "matmul",
                        lhs: self.shape.clone(),
                        rhs: other.shape.clone(),
                    });
                }
                let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
                let mut out = Tensor::zeros(&[m, n]);
                matmul_into(&self.data, &other.data, &mut out.data, m, k, n);
                Ok(out)
            }
            (3, 3) => {
                if self.shape[0] != other.shape[0] || self.shape[2] != other.shape[1] {
                    return Err(Error::ShapeMismatch {
                        op: "matmul",
                        lhs: self.shape.clone(),
                        rhs: other.shape.clone(),
                    });
                }
                let (b, m, k) = (self.shape[0], self.shape[1], self.shape[2]);
                let n = other.shape[2];
                let mut out = Tensor::zeros(&[b, m, n]);
                for i in 0..b {
                    matmul_into(
                        &self.data[i * m * k..(i + 1) * m * k],
                        &other.data[i * k * n..(i + 1) * k * n],
                        &mut out.data[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                Ok(out)
            }
            _ => Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            }),
        }
    }

    /// self^T * other without materializing the transpose: [k,m]^T x [k,n] -> [m,n].
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[0] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (k, m, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for t in 0..k {
            let arow = &self.data[t * m..(t + 1) * m];
            let brow = &other.data[t * n..(t + 1) * n];
            for i in 0..m {
                let a = arow[i];
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(out)
    }

    /// self * other^T: [m,k] x [n,k]^T -> [m,n].
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[0]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out.data[i * n..(i + 1) * n];
            for j in 0..n {
                let brow = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for t in 0..k {
                    acc += arow[t] * brow[t];
                }
                orow[j] = acc;
            }
        }
        Ok(out)
    }

    /// Column sums of a 2-d tensor, as a length-n vector.
    pub fn sum_rows(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[n]);
        for i in 0..m {
            for j in 0..n {
                out.data[j] += self.data[i * n + j];
            }
        }
        out
    }

    fn check_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }
}

fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (m, n) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let row = x.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = out.row_mut(i);
        let mut sum = 0.0;
        for j in 0..n {
            let e = (row[j] - max).exp();
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Gradient of softmax_rows: given weights w and upstream dw, returns d(scores).
pub fn softmax_rows_backward(w: &Tensor, dw: &Tensor) -> Tensor {
    let (m, n) = (w.rows(), w.cols());
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let wr = w.row(i);
        let dr = dw.row(i);
        let dot: f64 = wr.iter().zip(dr).map(|(a, b)| a * b).sum();
        let orow = out.row_mut(i);
        for j in 0..n {
            orow[j] = wr[j] * (dr[j] - dot);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Per-row layer normalization over the last axis of an [m, d] tensor,
/// followed by the (gamma, beta) affine.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    layer_norm_fwd(x, gamma, beta, eps).0
}

pub fn layer_norm_fwd(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> (Tensor, LayerNormCache) {
    let (m, d) = (x.rows(), x.cols());
    debug_assert_eq!(gamma.shape(), [d]);
    debug_assert_eq!(beta.shape(), [d]);
    let mut out = Tensor::zeros(&[m, d]);
    let mut xhat = Tensor::zeros(&[m, d]);
    let mut inv_std = vec![0.0; m];
    for i in 0..m {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[i] = istd;
        for j in 0..d {
            let xh = (row[j] - mean) * istd;
            xhat.data[i * d + j] = xh;
            out.data[i * d + j] = gamma.data[j] * xh + beta.data[j];
        }
    }
    (out, LayerNormCache { xhat, inv_std })
}

/// Returns (dx, dgamma, dbeta).
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (m, d) = (dy.rows(), dy.cols());
    let mut dx = Tensor::zeros(&[m, d]);
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    for i in 0..m {
        let dyr = dy.row(i);
        let xhr = cache.xhat.row(i);
        let istd = cache.inv_std[i];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dyr[j] * gamma.data[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhr[j];
            dgamma.data[j] += dyr[j] * xhr[j];
            dbeta.data[j] += dyr[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxh = dyr[j] * gamma.data[j];
            dx.data[i * d + j] = istd * (dxh - mean_dxhat - xhr[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-form GELU. The closed form keeps the analytic derivative exact.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    assert_eq!(x.shape(), dy.shape());
    let mut out = x.clone();
    for (o, (&xv, &g)) in out
        .data
        .iter_mut()
        .zip(x.data.iter().zip(dy.data.iter()))
    {
        let u = GELU_C * (xv + GELU_A * xv * xv * xv);
        let t = u.tanh();
        let sech2 = 1.0 - t * t;
        let du = GELU_C * (1.0 + 3.0 * GELU_A * xv * xv);
        *o = g * (0.5 * (1.0 + t) + 0.5 * xv * sech2 * du);
    }
    out
}
