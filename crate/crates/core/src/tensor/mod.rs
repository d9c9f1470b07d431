//! Dense `f64` matrices, the matmul kernels, and parameter initialization.
//!
//! Everything in the model is a 2-D row-major matrix; sequences are stacked as
//! rows, feature dimensions as columns.  Batching never pads: examples are
//! concatenated along the row axis and sliced apart again where an op (such as
//! attention) must not mix examples.

pub mod optim;
pub mod tape;

pub use optim::Adam;
pub use tape::{Tape, Var};

use rand::Rng;

use crate::error::{Error, Result};

/// Dense 2-D matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![1.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{}x{} tensor needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// 1x1 tensor holding a single value.
    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    /// Gaussian init, mean 0.  Box-Muller on the supplied stream keeps every
    /// draw reproducible for a fixed seed.
    pub fn randn(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Self {
        let data = (0..rows * cols).map(|_| std * randn_sample(rng)).collect();
        Tensor { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Extract the value of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert!(self.rows == 1 && self.cols == 1, "item() on {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    /// `self += c * other`, shapes must match.
    pub fn add_scaled(&mut self, other: &Tensor, c: f64) {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "add_scaled shape mismatch"
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Column-wise mean: `[rows x cols] -> [cols]`.
    pub fn mean_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.rows as f64;
        for o in &mut out {
            *o *= inv;
        }
        out
    }
}

/// One standard normal draw (Box-Muller).
fn randn_sample(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ── matmul kernels ──────────────────────────────────────────────────────────
// All three orderings keep the innermost loop walking contiguous rows.

/// `a · b`
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dim mismatch");
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate() {
            let brow = b.row(p);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dim mismatch");
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = b.row(j);
            *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b`
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dim mismatch");
    let mut out = Tensor::zeros(a.cols, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let brow = b.row(i);
        for (p, &av) in arow.iter().enumerate() {
            let orow = out.row_mut(p);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(2, 3, vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(2, 3, vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_known_values() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_identity_is_noop() {
        let a = Tensor::from_vec(2, 2, vec![1.5, -2.0, 0.25, 4.0]).unwrap();
        let eye = Tensor::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &eye), a);
    }

    #[test]
    fn transposed_kernels_agree_with_plain_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&mut rng, 4, 3, 1.0);
        let b = Tensor::randn(&mut rng, 5, 3, 1.0);
        // a·bᵀ  via explicit transpose
        let mut bt = Tensor::zeros(3, 5);
        for i in 0..5 {
            for j in 0..3 {
                *bt.at_mut(j, i) = b.at(i, j);
            }
        }
        let direct = matmul_nt(&a, &b);
        let via_t = matmul(&a, &bt);
        for (x, y) in direct.data.iter().zip(&via_t.data) {
            assert!((x - y).abs() < 1e-12);
        }

        let c = Tensor::randn(&mut rng, 3, 6, 1.0);
        let d = Tensor::randn(&mut rng, 3, 2, 1.0);
        let mut ct = Tensor::zeros(6, 3);
        for i in 0..3 {
            for j in 0..6 {
                *ct.at_mut(j, i) = c.at(i, j);
            }
        }
        let direct = matmul_tn(&c, &d);
        let via_t = matmul(&ct, &d);
        for (x, y) in direct.data.iter().zip(&via_t.data) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let a = Tensor::randn(&mut ChaCha8Rng::seed_from_u64(42), 8, 8, 0.02);
        let b = Tensor::randn(&mut ChaCha8Rng::seed_from_u64(42), 8, 8, 0.02);
        assert_eq!(a, b);
    }

    #[test]
    fn randn_moments_are_plausible() {
        let t = Tensor::randn(&mut ChaCha8Rng::seed_from_u64(1), 200, 200, 1.0);
        let n = t.len() as f64;
        let mean: f64 = t.data.iter().sum::<f64>() / n;
        let var: f64 = t.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn mean_rows_pools_columns() {
        let t = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(t.mean_rows(), vec![2.0, 3.0, 4.0]);
    }
}
