//! Dense `f64` linear algebra sized for desk-scale experiments.
//!
//! Everything here is deliberately plain: row-major storage, straightforward
//! triple loops with a fixed accumulation order, no threading. Determinism
//! across runs and platforms is a hard requirement for the rest of the crate
//! (bitwise-identical checkpoints depend on it), and at the matrix sizes used
//! by the adapters (tens to a few hundred per side) naive loops are plenty.

pub mod adam;
pub mod gradcheck;
pub mod rng;

pub use adam::AdamState;
pub use rng::SeededRng;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from row-major data; the length must be `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "Matrix::from_vec",
                left: format!("{rows}x{cols}"),
                right: format!("len {}", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        assert!(r < self.rows && c < self.cols, "index ({r},{c}) out of {0}x{1}", self.rows, self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        assert!(r < self.rows && c < self.cols, "index ({r},{c}) out of {0}x{1}", self.rows, self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// `self * other`, accumulated left to right in index order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.cols != x.len() {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("len {}", x.len()),
            });
        }
        let mut out = vec![0.0; self.rows];
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
        Ok(out)
    }

    /// `self^T * u` without materialising the transpose.
    pub fn matvec_t(&self, u: &[f64]) -> Result<Vec<f64>> {
        if self.rows != u.len() {
            return Err(Error::ShapeMismatch {
                op: "matvec_t",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("len {}", u.len()),
            });
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let coeff = u[r];
            if coeff == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += coeff * a;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_scaled",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }
}

/// Dot product with left-to-right accumulation.
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len(), "dot: lengths {} vs {}", u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Euclidean norm.
pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Numerically stable softmax: shifts by the maximum before exponentiating.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax", "empty input"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Shannon entropy `-sum p_i ln p_i` of a probability vector, in nats.
///
/// Entries at exactly zero contribute zero (the `p ln p -> 0` limit). The
/// input is not renormalised; callers pass probabilities that already sum
/// to one, e.g. softmax outputs or batch-mean routing probabilities.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum()
}

/// Cosine similarity `u . v / (|u| |v|)`.
///
/// Errors on length mismatch and on zero-norm inputs, where the quantity is
/// undefined.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            left: format!("len {}", u.len()),
            right: format!("len {}", v.len()),
        });
    }
    if u.is_empty() {
        return Err(Error::invalid("cosine_similarity", "empty vectors"));
    }
    let nu = norm2(u);
    let nv = norm2(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::invalid(
            "cosine_similarity",
            "zero-norm vector has no direction",
        ));
    }
    Ok(dot(u, v) / (nu * nv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        // Textbook triple loop in a different traversal order than the
        // implementation, as an independent reference.
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_small_known_product() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dim() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "message: {msg}");
    }

    #[test]
    fn matvec_matches_matmul_column() {
        let a = Matrix::from_fn(4, 3, |r, c| (r * 3 + c) as f64 * 0.5 - 2.0);
        let x = vec![1.5, -0.5, 2.0];
        let col = Matrix::from_vec(3, 1, x.clone()).unwrap();
        let via_mm = a.matmul(&col).unwrap();
        assert_eq!(a.matvec(&x).unwrap(), via_mm.as_slice());
    }

    #[test]
    fn matvec_t_is_transpose_matvec() {
        let a = Matrix::from_fn(4, 3, |r, c| ((r + 1) * (c + 2)) as f64);
        let u = vec![0.25, -1.0, 3.0, 0.5];
        assert_eq!(a.matvec_t(&u).unwrap(), a.transpose().matvec(&u).unwrap());
    }

    #[test]
    fn identity_is_neutral() {
        let a = Matrix::from_fn(3, 3, |r, c| (r as f64) - (c as f64) * 0.3);
        let i = Matrix::identity(3);
        assert_eq!(a.matmul(&i).unwrap(), a);
        assert_eq!(i.matmul(&a).unwrap(), a);
    }

    #[test]
    fn softmax_basic_properties() {
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
        assert!(p[2] > p[1] && p[1] > p[0]);
        // Stable under large shifts.
        let q = softmax(&[1001.0, 1002.0, 1003.0]).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[1.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn entropy_known_values() {
        // Point mass has zero entropy; uniform over n has ln n.
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0);
        let n = 8;
        let uniform = vec![1.0 / n as f64; n];
        assert!((entropy(&uniform) - (n as f64).ln()).abs() < 1e-12);
        // Coin with p = 1/4: -(1/4)ln(1/4) - (3/4)ln(3/4).
        let want = -(0.25f64.ln() * 0.25 + 0.75f64.ln() * 0.75);
        assert!((entropy(&[0.25, 0.75]) - want).abs() < 1e-15);
    }

    #[test]
    fn cosine_similarity_known_values() {
        assert!((cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap()).abs() < 1e-15);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_similarity(&[1.0, 0.0], &[-1.0, 0.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn matmul_agrees_with_oracle(
            m in 1usize..6, k in 1usize..6, n in 1usize..6,
            seed in any::<u64>(),
        ) {
            let mut rng = SeededRng::new(seed);
            let a = Matrix::from_fn(m, k, |_, _| rng.uniform(-2.0, 2.0));
            let b = Matrix::from_fn(k, n, |_, _| rng.uniform(-2.0, 2.0));
            let got = a.matmul(&b).unwrap();
            let want = matmul_oracle(&a, &b);
            for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
                prop_assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()));
            }
        }

        #[test]
        fn softmax_sums_to_one_and_orders(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..20)
        ) {
            let p = softmax(&logits).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
            for i in 0..logits.len() {
                for j in 0..logits.len() {
                    if logits[i] > logits[j] {
                        prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }

        #[test]
        fn entropy_of_softmax_bounded_by_log_n(
            logits in proptest::collection::vec(-20.0f64..20.0, 1..16)
        ) {
            let h = entropy(&softmax(&logits).unwrap());
            prop_assert!(h >= -1e-12);
            prop_assert!(h <= (logits.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn cosine_similarity_bounded(
            u in proptest::collection::vec(-10.0f64..10.0, 3),
            v in proptest::collection::vec(-10.0f64..10.0, 3),
        ) {
            prop_assume!(norm2(&u) > 1e-6 && norm2(&v) > 1e-6);
            let c = cosine_similarity(&u, &v).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        }
    }
}
