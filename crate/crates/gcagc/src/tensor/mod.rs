//! Dense f64 tensors and the reverse-mode differentiation tape.
//!
//! Data is row-major (last axis fastest) and everything is 64-bit: at desk
//! scale, gradient-check fidelity matters more than speed. There is no
//! broadcasting; elementwise ops require identical shapes and the few
//! scalar-broadcast cases are explicit ops.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_diff_check, run_op_suite, OpCheck, DEFAULT_FD_STEP, OP_TOLERANCE};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// A dense n-dimensional array of f64, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform entries in [lo, hi) from a deterministic stream.
    pub fn random_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut SplitMix64) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
        Tensor { shape, data }
    }

    /// He-style fan-in scaled uniform init: entries in
    /// [-sqrt(6/fan_in), sqrt(6/fan_in)).
    pub fn he_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut SplitMix64) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        Self::random_uniform(shape, -bound, bound, rng)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row-major flat offset of a multi-index. Test/debug helper.
    pub fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &ext)) in idx.iter().zip(self.shape.iter()).enumerate() {
            assert!(ix < ext, "index {ix} out of range for axis {i} (extent {ext})");
            off = off * ext + ix;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::DimMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Split a shape around `axis` into (outer, len, inner) extents so that the
/// flat offset of (o, a, i) is (o * len + a) * inner + i.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    debug_assert!(axis < shape.len());
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

// ── Dense GEMM kernels ──────────────────────────────────────────────────
//
// The inner product kernel is matrixmultiply's dgemm; transposed operands are
// expressed through strides so no copies are made. All our matrices are
// row-major. `beta` selects overwrite (0.0) or accumulate (1.0).

/// c[m×n] = alpha * a[m×k] · b[k×n] + beta * c
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c[m×n] = alpha * a[m×k] · b[n×k]ᵀ + beta * c
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c[m×n] = alpha * a[k×m]ᵀ · b[k×n] + beta * c
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let mut rng = SplitMix64::new(11);
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let expect = naive_mm(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, 0.0, &mut c);
        for (x, y) in c.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // b transposed storage (n×k), same logical product.
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, 0.0, &mut c2);
        for (x, y) in c2.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-12);
        }

        // a transposed storage (k×m).
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c3 = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, 0.0, &mut c3);
        for (x, y) in c3.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_accumulates_with_beta_one() {
        let a = vec![1.0, 2.0];
        let b = vec![3.0, 4.0];
        let mut c = vec![10.0];
        gemm_nn(1, 2, 1, &a, &b, 1.0, &mut c);
        assert_eq!(c[0], 10.0 + 11.0);
    }

    #[test]
    fn tensor_offset_row_major() {
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(|i| i as f64).collect());
        assert_eq!(t.at(&[0, 0, 0]), 0.0);
        assert_eq!(t.at(&[0, 0, 3]), 3.0);
        assert_eq!(t.at(&[0, 1, 0]), 4.0);
        assert_eq!(t.at(&[1, 0, 0]), 12.0);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
    }

    #[test]
    fn reshape_checks_numel() {
        let t = Tensor::zeros(vec![2, 3]);
        assert!(t.clone().reshaped(vec![3, 2]).is_ok());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }
}
