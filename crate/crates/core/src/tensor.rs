//! Dense row-major `f64` tensors and the raw numeric kernels shared by the tape.
//!
//! Every kernel here is a plain function over slices so the tape can reuse it
//! in both the forward and backward direction.

use thiserror::Error;

/// Additive mask value for blocked attention entries.
///
/// A finite stand-in for −∞: masked slots are detected by comparison against
/// half this value and their softmax weight is written as an exact zero.
pub const MASK_SENTINEL: f64 = -1e30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("every position of a softmax row is masked (row {row})")]
    DegenerateMask { row: usize },
    #[error("mask entry {value} is neither 0 nor the blocking sentinel")]
    InvalidMask { value: f64 },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("zero-norm row {row} cannot be normalized")]
    ZeroNorm { row: usize },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err("new", format!("dimensions must be positive: {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    /// Product of all leading dimensions (1 for vectors).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }
}

/// `c (+)= op(a) · op(b)` where `op` optionally transposes.
///
/// `a` is `m×k` after `op`, `b` is `k×n` after `op`; `c` is `m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: lengths were checked above; strides describe exactly the
    // row-major (or transposed row-major) layout of each buffer.
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
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(shape_err(
            "matmul",
            format!("{:?} x {:?}", a.shape, b.shape),
        ));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, false, &b.data, false, &mut out, false);
    Tensor::matrix(m, n, out)
}

fn is_blocked(m: f64) -> Result<bool, TensorError> {
    if m == 0.0 {
        Ok(false)
    } else if m <= MASK_SENTINEL * 0.5 {
        Ok(true)
    } else {
        Err(TensorError::InvalidMask { value: m })
    }
}

/// Row-wise softmax of `logits + mask` written into `out`.
pub(crate) fn masked_softmax_rows(
    logits: &[f64],
    mask: Option<&[f64]>,
    cols: usize,
    out: &mut [f64],
) -> Result<(), TensorError> {
    for (r, (row, dst)) in logits
        .chunks_exact(cols)
        .zip(out.chunks_exact_mut(cols))
        .enumerate()
    {
        let mrow = mask.map(|m| &m[r * cols..(r + 1) * cols]);
        let blocked = |j: usize| -> Result<bool, TensorError> {
            match mrow {
                Some(m) => is_blocked(m[j]),
                None => Ok(false),
            }
        };
        let mut max = f64::NEG_INFINITY;
        let mut any_open = false;
        for (j, &x) in row.iter().enumerate() {
            if !blocked(j)? {
                any_open = true;
                max = max.max(x);
            }
        }
        if !any_open {
            return Err(TensorError::DegenerateMask { row: r });
        }
        let mut sum = 0.0;
        for (j, (&x, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
            *d = if blocked(j)? { 0.0 } else { (x - max).exp() };
            sum += *d;
        }
        let inv = 1.0 / sum;
        dst.iter_mut().for_each(|v| *v *= inv);
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(TensorError::NonFinite { op: "masked_softmax" });
    }
    Ok(())
}

/// Softmax of a single vector under an additive `{0, sentinel}` mask.
pub fn masked_softmax(logits: &Tensor, mask: &Tensor) -> Result<Tensor, TensorError> {
    if logits.shape != mask.shape {
        return Err(shape_err(
            "masked_softmax",
            format!("logits {:?} vs mask {:?}", logits.shape, mask.shape),
        ));
    }
    let mut out = vec![0.0; logits.len()];
    masked_softmax_rows(&logits.data, Some(&mask.data), logits.cols(), &mut out)?;
    Tensor::new(logits.shape.clone(), out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Tanh-approximated GELU, elementwise.
pub fn gelu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| gelu_scalar(v)).collect(),
    }
}

/// Row-wise layer normalization. Returns `(out, xhat, inv_std)`.
pub(crate) fn layer_norm_rows(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = gain.len();
    let rows = x.len() / n;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for j in 0..n {
            let h = (row[j] - mean) * inv;
            xhat[r * n + j] = h;
            out[r * n + j] = h * gain[j] + bias[j];
        }
    }
    (out, xhat, inv_std)
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor, TensorError> {
    let n = x.cols();
    if n < 2 || gain.len() != n || bias.len() != n {
        return Err(shape_err(
            "layer_norm",
            format!("x {:?}, gain {:?}, bias {:?}", x.shape, gain.shape, bias.shape),
        ));
    }
    let (out, _, _) = layer_norm_rows(&x.data, &gain.data, &bias.data, eps);
    Tensor::new(x.shape.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let id = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let row = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let col = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&row, &col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 4, 5);
        let b = random(&mut rng, 5, 3);
        let got = matmul(&a, &b).unwrap();
        for (x, y) in got.data().iter().zip(brute_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn gemm_transposed_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 5, 4);
        let mut c = vec![0.0; 15];
        gemm(3, 4, 5, a.data(), false, b.data(), true, &mut c, false);
        let expect = brute_matmul(&a, &b.transpose());
        for (x, y) in c.iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut d = vec![0.0; 16];
        gemm(4, 3, 4, a.data(), true, a.data(), false, &mut d, false);
        let expect = brute_matmul(&a.transpose(), &a);
        for (x, y) in d.iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_softmax_examples() {
        let v = |d: &[f64]| Tensor::vector(d.to_vec()).unwrap();
        let out = masked_softmax(&v(&[0.0, 0.0]), &v(&[0.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
        let out = masked_softmax(&v(&[5.0, 1.0]), &v(&[0.0, MASK_SENTINEL])).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0]);
        let out = masked_softmax(&v(&[1.0, 2.0, 3.0]), &v(&[0.0, 0.0, MASK_SENTINEL])).unwrap();
        let e = std::f64::consts::E;
        assert!((out.data()[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((out.data()[1] - e / (1.0 + e)).abs() < 1e-15);
        assert_eq!(out.data()[2], 0.0);
    }

    #[test]
    fn masked_softmax_accepts_infinity_and_rejects_degenerate() {
        let v = |d: &[f64]| Tensor::vector(d.to_vec()).unwrap();
        let out = masked_softmax(&v(&[1.0, 2.0]), &v(&[f64::NEG_INFINITY, 0.0])).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0]);
        let err = masked_softmax(&v(&[1.0, 2.0]), &v(&[MASK_SENTINEL, MASK_SENTINEL]));
        assert_eq!(err, Err(TensorError::DegenerateMask { row: 0 }));
        let err = masked_softmax(&v(&[1.0, 2.0]), &v(&[-3.0, 0.0]));
        assert!(matches!(err, Err(TensorError::InvalidMask { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let x = Tensor::vector(vec![1.0; 4]).unwrap();
        let g = Tensor::filled(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        assert_eq!(layer_norm(&x, &g, &b, 1e-5).unwrap().data(), &[0.0; 4]);

        let x = Tensor::vector(vec![-1.0, 1.0]).unwrap();
        let g = Tensor::filled(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let out = layer_norm(&x, &g, &b, 1e-300).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-15 && (out.data()[1] - 1.0).abs() < 1e-15);

        let x = Tensor::vector(vec![3.0]).unwrap();
        assert!(layer_norm(&x, &Tensor::zeros(&[1]), &Tensor::zeros(&[1]), 1e-5).is_err());
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 1, 9);
        let out = layer_norm(&x, &Tensor::filled(&[9], 1.0), &Tensor::zeros(&[9]), 1e-12).unwrap();
        let mean = out.data().iter().sum::<f64>() / 9.0;
        let var = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gelu_values() {
        let t = Tensor::vector(vec![0.0, 1.0, 20.0, -20.0]).unwrap();
        let out = gelu(&t);
        assert_eq!(out.data()[0], 0.0);
        assert!((out.data()[1] - 0.8412).abs() < 1e-4);
        assert!((out.data()[2] - 20.0).abs() < 1e-9);
        assert!(out.data()[3].abs() < 1e-9);
        let mut prev = 0.0;
        for i in 1..200 {
            let y = gelu_scalar(i as f64 * 0.05);
            assert!(y > prev);
            prev = y;
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
