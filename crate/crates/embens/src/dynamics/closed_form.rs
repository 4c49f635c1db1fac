//! GP sampling of initial outputs and the analytic MSE output dynamics
//! `δf_t = e^{-Θ t/B} δf_0`, via the symmetric eigendecomposition of the
//! train-train kernel block.

use super::{expand_targets, BlockKernel};
use crate::error::{Error, Result};
use crate::numerics::{cholesky_jitter, sym_eigen, Seed};
use ndarray::{Array1, Array2};
use rand_distr::{Distribution, StandardNormal};

/// Draw initial outputs f₀ ~ N(0, cov) independently per class channel.
/// Cholesky retries with jitter 1e-10·trace/dim; a covariance that still
/// fails is reported as non-PSD.
pub fn gp_sample_outputs(
    cov: &Array2<f64>,
    n_classes: usize,
    seed: Seed,
) -> Result<Array2<f64>> {
    let dim = cov.nrows();
    if cov.ncols() != dim {
        return Err(Error::DimensionMismatch("covariance must be square".into()));
    }
    let jitter = 1e-10 * cov.diag().sum().abs() / dim.max(1) as f64;
    let l = cholesky_jitter(cov, jitter)?;
    let mut rng = seed.rng();
    let mut out = Array2::zeros((dim, n_classes));
    for c in 0..n_classes {
        let z: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let f = l.dot(&z);
        out.column_mut(c).assign(&f);
    }
    Ok(out)
}

/// Precomputed eigendecomposition of the train block, reusable across times.
#[derive(Debug, Clone)]
pub struct MseDynamics {
    evals: Array1<f64>,
    evecs: Array2<f64>,
    y_expanded: Array1<f64>,
    /// The batch size B entering df/dt = -(1/B) Θ δf: the number of train
    /// points per model (full-batch gradient flow).
    b: f64,
}

impl MseDynamics {
    /// `targets` has one value per train point; models share them.
    pub fn new(k: &BlockKernel, targets: &[f64], m: usize) -> Result<Self> {
        let rows = k.n_train_rows();
        if m == 0 || rows % m != 0 || rows / m != targets.len() {
            return Err(Error::DimensionMismatch(format!(
                "kernel rows {rows} vs m = {m} and {} targets",
                targets.len()
            )));
        }
        let (evals, evecs) = sym_eigen(&k.train_train);
        Ok(MseDynamics {
            evals,
            evecs,
            y_expanded: expand_targets(targets, m),
            b: targets.len() as f64,
        })
    }

    /// Train outputs at time t: f_t = y + Q e^{-λ t/B} Qᵀ (f₀ - y).
    pub fn train_outputs(&self, f0_train: &Array1<f64>, t: f64) -> Result<Array1<f64>> {
        if f0_train.len() != self.y_expanded.len() {
            return Err(Error::DimensionMismatch("f0 length".into()));
        }
        if t < 0.0 {
            return Err(Error::InvalidSpec("time must be >= 0".into()));
        }
        let delta0 = f0_train - &self.y_expanded;
        let coeffs = self.evecs.t().dot(&delta0);
        let damped = Array1::from_iter(
            coeffs
                .iter()
                .zip(self.evals.iter())
                .map(|(c, l)| c * (-l * t / self.b).exp()),
        );
        Ok(&self.y_expanded + &self.evecs.dot(&damped))
    }

    /// Test outputs at time t:
    /// f_t(x) = f₀(x) - Θ_{x,tr} Θ_tr⁺ (I - e^{-Θ_tr t/B}) δf₀,
    /// with the pseudo-inverse cutting eigenvalues below 1e-10·λ_max (null
    /// directions of a PSD joint kernel cannot reach the test block).
    pub fn test_outputs(
        &self,
        k: &BlockKernel,
        f0_train: &Array1<f64>,
        f0_test: &Array1<f64>,
        t: f64,
    ) -> Result<Array1<f64>> {
        if f0_test.len() != k.n_test_rows() {
            return Err(Error::DimensionMismatch("f0_test length".into()));
        }
        let delta0 = f0_train - &self.y_expanded;
        let coeffs = self.evecs.t().dot(&delta0);
        let lmax = self
            .evals
            .iter()
            .fold(0.0f64, |acc, &l| acc.max(l.abs()));
        let cutoff = 1e-10 * lmax;
        let weighted = Array1::from_iter(coeffs.iter().zip(self.evals.iter()).map(|(c, &l)| {
            if l > cutoff {
                c * (1.0 - (-l * t / self.b).exp()) / l
            } else {
                0.0
            }
        }));
        let correction = k.test_train.dot(&self.evecs.dot(&weighted));
        Ok(f0_test - &correction)
    }
}

/// Closed-form MSE train outputs at time t (one-shot convenience wrapper).
pub fn mse_closed_form(
    k: &BlockKernel,
    f0_train: &Array1<f64>,
    targets: &[f64],
    t: f64,
) -> Result<Array1<f64>> {
    let m = f0_train.len() / targets.len().max(1);
    MseDynamics::new(k, targets, m)?.train_outputs(f0_train, t)
}

/// Closed-form MSE test predictions at time t.
pub fn mse_test_prediction(
    k: &BlockKernel,
    f0_train: &Array1<f64>,
    f0_test: &Array1<f64>,
    targets: &[f64],
    t: f64,
) -> Result<Array1<f64>> {
    let m = f0_train.len() / targets.len().max(1);
    MseDynamics::new(k, targets, m)?.test_outputs(k, f0_train, f0_test, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn zero_covariance_samples_zero() {
        let cov = Array2::zeros((4, 4));
        let f = gp_sample_outputs(&cov, 2, Seed::new(1)).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_draw() {
        let cov = array![[1.0, 0.3], [0.3, 2.0]];
        let a = gp_sample_outputs(&cov, 3, Seed::new(9)).unwrap();
        let b = gp_sample_outputs(&cov, 3, Seed::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn block_diagonal_covariance_decorrelates_models() {
        // Cross-model sample covariance over 10^4 draws within 3σ of 0.
        let cov = array![[1.0, 0.0], [0.0, 1.0]];
        let n = 10_000;
        let mut acc = 0.0;
        for s in 0..n {
            let f = gp_sample_outputs(&cov, 1, Seed::new(1000 + s)).unwrap();
            acc += f[[0, 0]] * f[[1, 0]];
        }
        let mean = acc / n as f64;
        // Var(f0 f1) = 1 under independence, so σ of the mean is 1/sqrt(n).
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean = {mean}");
    }

    #[test]
    fn closed_form_at_zero_is_identity() {
        let k = BlockKernel {
            train_train: array![[2.0, 0.3], [0.3, 1.0]],
            test_train: Array2::zeros((0, 2)),
        };
        let f0 = array![0.7, -1.2];
        let y = [0.1, 0.4];
        let f = mse_closed_form(&k, &f0, &y, 0.0).unwrap();
        for (a, b) in f.iter().zip(f0.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn identity_kernel_decays_exponentially() {
        // Θ = I, B = 1, δf0 = 1 → δf_t = e^{-t}.
        let k = BlockKernel {
            train_train: array![[1.0]],
            test_train: Array2::zeros((0, 1)),
        };
        let f0 = array![1.0];
        let y = [0.0];
        for t in [0.0, 0.5, 1.0, 3.0] {
            let f = mse_closed_form(&k, &f0, &y, t).unwrap();
            assert_abs_diff_eq!(f[0], (-t).exp(), epsilon = 1e-12);
        }
    }

    #[test]
    fn test_point_on_train_point_interpolates() {
        // Full-rank kernel, a test point identical to train point 0:
        // prediction converges to that point's target as t → ∞.
        let train_train = array![[2.0, 0.5], [0.5, 1.5]];
        let test_train = array![[2.0, 0.5]];
        let k = BlockKernel {
            train_train,
            test_train,
        };
        let f0_train = array![0.3, -0.8];
        let f0_test = array![0.3];
        let y = [1.0, -1.0];
        let f = mse_test_prediction(&k, &f0_train, &f0_test, &y, 1e4).unwrap();
        assert_abs_diff_eq!(f[0], 1.0, epsilon = 1e-8);
        // And at t = 0 the prediction is f0.
        let f = mse_test_prediction(&k, &f0_train, &f0_test, &y, 0.0).unwrap();
        assert_abs_diff_eq!(f[0], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn rank_deficient_kernel_is_handled() {
        // Rank-1 PSD kernel: the null direction of δf0 must stay put.
        let train_train = array![[1.0, 1.0], [1.0, 1.0]];
        let k = BlockKernel {
            train_train,
            test_train: Array2::zeros((0, 2)),
        };
        let f0 = array![1.0, 0.0];
        let y = [0.0, 0.0];
        let f = mse_closed_form(&k, &f0, &y, 1e6).unwrap();
        // δf0 = (1,0) = (1,1)/2 + (1,-1)/2; only the (1,1) mode decays.
        assert_abs_diff_eq!(f[0], 0.5, epsilon = 1e-9);
        assert_abs_diff_eq!(f[1], -0.5, epsilon = 1e-9);
    }
}
