//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! taped (training) and untaped (decoding) forward passes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("dimensions must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, data has {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Leading dimension of a matrix (1 for vectors).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn with_data(&self, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(data.len(), self.data.len());
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Bitwise equality, distinguishing `0.0` from `-0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub(crate) mod kernels {
    //! Plain slice kernels. Matrices are row-major `rows x cols`.

    pub const LN_EPS: f64 = 1e-5;
    /// Score assigned to masked attention positions; exp() of it underflows to 0.
    pub const MASKED_SCORE: f64 = -1e30;

    /// `C = op(A) * op(B)` where `op` optionally transposes. `A` is stored
    /// row-major as `m x k` (or `k x m` when `ta`), `B` as `k x n` (or `n x k` when `tb`).
    #[allow(clippy::too_many_arguments)]
    pub fn gemm(a: &[f64], ta: bool, b: &[f64], tb: bool, m: usize, k: usize, n: usize, out: &mut [f64], accumulate: bool) {
        assert_eq!(a.len(), m * k);
        assert_eq!(b.len(), k * n);
        assert_eq!(out.len(), m * n);
        let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: the length assertions above guarantee every index reachable
        // through the (row, column) strides lies inside the three slices.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        gemm(a, false, b, false, m, k, n, &mut out, false);
        out
    }

    pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
        let mut out = x.to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        out
    }

    /// Returns (output, normalized input, per-row inverse std).
    pub fn layer_norm_rows(x: &[f64], gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = gamma.len();
        let rows = x.len() / d;
        let mut out = vec![0.0; x.len()];
        let mut normed = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let nj = (xr[j] - mean) * is;
                normed[r * d + j] = nj;
                out[r * d + j] = gamma[j] * nj + beta[j];
            }
        }
        (out, normed, inv_std)
    }

    /// Scaled dot-product scores `scale * q k^T`; with `causal`, query row `i`
    /// may only see key rows `j <= i + offset`.
    pub fn attention_scores(q: &[f64], k: &[f64], tq: usize, tk: usize, d: usize, scale: f64, causal: Option<usize>) -> Vec<f64> {
        let mut s = vec![0.0; tq * tk];
        gemm(q, false, k, true, tq, d, tk, &mut s, false);
        for i in 0..tq {
            for j in 0..tk {
                let v = &mut s[i * tk + j];
                match causal {
                    Some(offset) if j > i + offset => *v = MASKED_SCORE,
                    _ => *v *= scale,
                }
            }
        }
        s
    }

    pub fn add_row_bias(x: &mut [f64], bias: &[f64]) {
        for row in x.chunks_mut(bias.len()) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
    }

    /// Sinusoidal position encoding for positions `start..start + len`.
    pub fn sinusoid(start: usize, len: usize, d: usize) -> Vec<f64> {
        let half = d / 2;
        let mut out = vec![0.0; len * d];
        for t in 0..len {
            let pos = (start + t) as f64;
            for i in 0..half {
                let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
                out[t * d + i] = (pos * freq).sin();
                out[t * d + half + i] = (pos * freq).cos();
            }
        }
        out
    }
}
