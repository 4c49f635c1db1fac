//! Linearized (kernel-regime) training dynamics of ensemble outputs.
//!
//! With a constant ensemble NTK Θ the outputs follow
//! `df/dt = -(1/B) Θ ∇_f L` with B the number of train points. MSE integrates
//! in closed form through the symmetric eigendecomposition of the train
//! block; other losses integrate with classic RK4. Vectors are model-major:
//! index α·n + i for model α and point i, one column per output class.

mod closed_form;
mod ode;

pub use closed_form::{gp_sample_outputs, mse_closed_form, mse_test_prediction, MseDynamics};
pub use ode::{ode_integrate, KernelDynamicsState};

use crate::error::{Error, Result};
use ndarray::Array2;
use std::path::Path;

/// Train/test blocks of an assembled ensemble kernel.
#[derive(Debug, Clone)]
pub struct BlockKernel {
    /// (M·n_tr) × (M·n_tr), symmetric PSD.
    pub train_train: Array2<f64>,
    /// (M·n_te) × (M·n_tr).
    pub test_train: Array2<f64>,
}

impl BlockKernel {
    /// Split an assembled (M·n)×(M·n) kernel over n = n_tr + n_te points
    /// (train rows first within each model block) into its dynamics blocks.
    pub fn from_assembled(k: &Array2<f64>, m: usize, n_train: usize) -> Result<BlockKernel> {
        if m == 0 || k.nrows() != k.ncols() || k.nrows() % m != 0 {
            return Err(Error::DimensionMismatch(format!(
                "kernel of shape {:?} is not an m = {m} block matrix",
                k.dim()
            )));
        }
        let n = k.nrows() / m;
        if n_train > n {
            return Err(Error::DimensionMismatch(format!(
                "n_train = {n_train} exceeds {n} points per model"
            )));
        }
        let n_test = n - n_train;
        let pick_train = |i: usize| -> usize { (i / n_train) * n + i % n_train };
        let pick_test = |i: usize| -> usize { (i / n_test) * n + n_train + i % n_test };
        let mut train_train = Array2::zeros((m * n_train, m * n_train));
        for r in 0..m * n_train {
            for c in 0..m * n_train {
                train_train[[r, c]] = k[[pick_train(r), pick_train(c)]];
            }
        }
        let mut test_train = Array2::zeros((m * n_test, m * n_train));
        for r in 0..m * n_test {
            for c in 0..m * n_train {
                test_train[[r, c]] = k[[pick_test(r), pick_train(c)]];
            }
        }
        Ok(BlockKernel {
            train_train,
            test_train,
        })
    }

    pub fn n_train_rows(&self) -> usize {
        self.train_train.nrows()
    }

    pub fn n_test_rows(&self) -> usize {
        self.test_train.nrows()
    }
}

/// Expand per-point targets to the model-major layout (every model sees the
/// same targets).
pub(crate) fn expand_targets(y: &[f64], m: usize) -> ndarray::Array1<f64> {
    let n = y.len();
    ndarray::Array1::from_iter((0..m * n).map(|i| y[i % n]))
}

/// Trajectory export: one row per (t, model, point, class), points indexed
/// over the train set then the test set.
pub fn write_trajectory_csv(path: &Path, states: &[KernelDynamicsState], m: usize) -> Result<()> {
    let io_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    w.write_record(["t", "model", "point", "class", "value"])
        .map_err(io_err)?;
    for s in states {
        let n_tr = s.f_train.nrows() / m;
        let n_te = s.f_test.nrows() / m;
        let c = s.f_train.ncols();
        for alpha in 0..m {
            for p in 0..n_tr + n_te {
                for ch in 0..c {
                    let v = if p < n_tr {
                        s.f_train[[alpha * n_tr + p, ch]]
                    } else {
                        s.f_test[[alpha * n_te + (p - n_tr), ch]]
                    };
                    w.write_record([
                        format!("{:.12e}", s.t),
                        alpha.to_string(),
                        p.to_string(),
                        ch.to_string(),
                        format!("{:.17e}", v),
                    ])
                    .map_err(io_err)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
