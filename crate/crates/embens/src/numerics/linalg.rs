//! Small dense linear algebra: 2×2 covariances, symmetric eigendecomposition
//! (cyclic Jacobi), and dense Cholesky with optional jitter.
//!
//! Matrices here are at most a few hundred rows (block kernels over a handful
//! of inputs and models), so the O(n³) Jacobi sweeps are more than fast enough
//! and need no external LAPACK backend.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// Entries of a symmetric 2×2 covariance matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cov2 {
    pub s11: f64,
    pub s12: f64,
    pub s22: f64,
}

impl Cov2 {
    pub fn new(s11: f64, s12: f64, s22: f64) -> Self {
        Cov2 { s11, s12, s22 }
    }

    /// PSD check with the relative slack used throughout: the off-diagonal
    /// may exceed the geometric mean by at most a 1e-9 relative margin.
    pub fn validate(&self) -> Result<()> {
        if !(self.s11.is_finite() && self.s12.is_finite() && self.s22.is_finite()) {
            return Err(Error::NonFinite("Cov2".into()));
        }
        if self.s11 < 0.0 || self.s22 < 0.0 {
            return Err(Error::NotPsd(format!(
                "negative variance: s11={}, s22={}",
                self.s11, self.s22
            )));
        }
        if self.s12 * self.s12 > self.s11 * self.s22 * (1.0 + 1e-9) {
            return Err(Error::NotPsd(format!(
                "s12^2 = {} exceeds s11*s22 = {}",
                self.s12 * self.s12,
                self.s11 * self.s22
            )));
        }
        Ok(())
    }

    pub fn det(&self) -> f64 {
        self.s11 * self.s22 - self.s12 * self.s12
    }

    /// Correlation coefficient, clamped into the open interval (-1, 1); zero
    /// when either variance vanishes. Identical inputs produce ρ = ±1 exactly,
    /// and the clamp keeps downstream arccos/whitening finite.
    pub fn correlation(&self) -> f64 {
        let denom = (self.s11 * self.s22).sqrt();
        if denom <= 0.0 {
            return 0.0;
        }
        (self.s12 / denom).clamp(-1.0 + 1e-12, 1.0 - 1e-12)
    }
}

/// Lower-triangular Cholesky factor of a PSD 2×2 covariance.
///
/// Degenerate (rank-1 or zero) inputs factor cleanly: the trailing pivot is
/// clamped to zero when rounding drives it slightly negative.
pub fn cholesky2(c: &Cov2) -> Result<[[f64; 2]; 2]> {
    c.validate()?;
    let l11 = c.s11.max(0.0).sqrt();
    let l21 = if l11 > 0.0 {
        c.s12 / l11
    } else {
        // s11 = 0 forces s12 = 0 for a PSD matrix (validate tolerates ulp
        // noise, which we drop here).
        0.0
    };
    let l22 = (c.s22 - l21 * l21).max(0.0).sqrt();
    Ok([[l11, 0.0], [l21, l22]])
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues ascending and
/// eigenvectors in the corresponding columns, so `a = V diag(λ) Vᵀ`.
pub fn sym_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "sym_eigen needs a square matrix");
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    if n <= 1 {
        return (m.diag().to_owned(), v);
    }

    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j] ] * m[[i, j]];
            }
        }
        let scale: f64 = m.diag().iter().map(|d| d * d).sum::<f64>() + 2.0 * off;
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].partial_cmp(&m[[j, j]]).unwrap());
    let vals = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vecs = Array2::<f64>::zeros((n, n));
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vecs[[k, new_col]] = v[[k, old_col]];
        }
    }
    (vals, vecs)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &Array2<f64>) -> f64 {
    let (vals, _) = sym_eigen(a);
    vals[0]
}

/// Dense lower Cholesky of a symmetric PSD matrix, retrying with `jitter`
/// added to the diagonal when the bare factorization hits a negative pivot.
pub fn cholesky_jitter(a: &Array2<f64>, jitter: f64) -> Result<Array2<f64>> {
    match cholesky_dense(a, 0.0) {
        Ok(l) => Ok(l),
        Err(_) if jitter > 0.0 => cholesky_dense(a, jitter),
        Err(e) => Err(e),
    }
}

fn cholesky_dense(a: &Array2<f64>, jitter: f64) -> Result<Array2<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]] + if i == j { jitter } else { 0.0 };
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                // Exactly singular PSD matrices (zero covariance) are fine;
                // anything meaningfully negative is not.
                if sum < -1e-12 * a[[i, i]].abs().max(1.0) {
                    return Err(Error::NotPsd(format!(
                        "cholesky pivot {i} is negative: {sum}"
                    )));
                }
                l[[i, j]] = sum.max(0.0).sqrt();
            } else {
                l[[i, j]] = if l[[j, j]] > 0.0 { sum / l[[j, j]] } else { 0.0 };
            }
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cholesky2_identity() {
        let l = cholesky2(&Cov2::new(1.0, 0.0, 1.0)).unwrap();
        assert_eq!(l, [[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn cholesky2_hand_case() {
        let l = cholesky2(&Cov2::new(4.0, 2.0, 2.0)).unwrap();
        assert_abs_diff_eq!(l[0][0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l[1][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l[1][1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cholesky2_rank_one() {
        let l = cholesky2(&Cov2::new(1.0, 1.0, 1.0)).unwrap();
        assert_abs_diff_eq!(l[0][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l[1][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l[1][1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn cholesky2_reconstructs() {
        let c = Cov2::new(2.3, -0.7, 1.1);
        let l = cholesky2(&c).unwrap();
        assert_abs_diff_eq!(l[0][0] * l[0][0], c.s11, epsilon = 1e-12 * c.s11);
        assert_abs_diff_eq!(l[1][0] * l[0][0], c.s12, epsilon = 1e-12);
        assert_abs_diff_eq!(l[1][0] * l[1][0] + l[1][1] * l[1][1], c.s22, epsilon = 1e-12);
    }

    #[test]
    fn cholesky2_rejects_non_psd() {
        assert!(cholesky2(&Cov2::new(1.0, 1.5, 1.0)).is_err());
        assert!(cholesky2(&Cov2::new(-1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn jacobi_matches_hand_eigenvalues() {
        let a = array![[2.0, 1.0], [1.0, 2.0]];
        let (vals, vecs) = sym_eigen(&a);
        assert_abs_diff_eq!(vals[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(vals[1], 3.0, epsilon = 1e-12);
        // Reconstruction a = V diag(λ) Vᵀ.
        let recon = vecs.dot(&Array2::from_diag(&vals)).dot(&vecs.t());
        for (x, y) in recon.iter().zip(a.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn jacobi_random_reconstruction() {
        use rand::Rng;
        let mut rng = crate::numerics::Seed::new(3).rng();
        let n = 12;
        let mut a = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let x: f64 = rng.random::<f64>() - 0.5;
                a[[i, j]] = x;
                a[[j, i]] = x;
            }
        }
        let (vals, vecs) = sym_eigen(&a);
        let recon = vecs.dot(&Array2::from_diag(&vals)).dot(&vecs.t());
        for (x, y) in recon.iter().zip(a.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-10);
        }
        // Ascending order.
        for w in vals.as_slice().unwrap().windows(2) {
            assert!(w[0] <= w[1] + 1e-12);
        }
    }

    #[test]
    fn dense_cholesky_roundtrip() {
        let a = array![[4.0, 2.0, 0.4], [2.0, 3.0, 0.1], [0.4, 0.1, 1.0]];
        let l = cholesky_jitter(&a, 0.0).unwrap();
        let recon = l.dot(&l.t());
        for (x, y) in recon.iter().zip(a.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn dense_cholesky_zero_matrix() {
        let a = Array2::<f64>::zeros((3, 3));
        let l = cholesky_jitter(&a, 0.0).unwrap();
        assert!(l.iter().all(|&x| x == 0.0));
    }
}
