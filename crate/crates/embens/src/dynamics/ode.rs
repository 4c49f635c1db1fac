//! RK4 integration of the kernel output dynamics for arbitrary losses.

use super::{expand_targets, BlockKernel};
use crate::error::{Error, Result};
use crate::net::{LossKind, Targets};
use ndarray::{Array1, Array2};

/// Outputs of every model on train and test points at one time, plus the
/// shared targets and loss.
#[derive(Debug, Clone)]
pub struct KernelDynamicsState {
    /// (M·n_tr, C)
    pub f_train: Array2<f64>,
    /// (M·n_te, C)
    pub f_test: Array2<f64>,
    /// Per train point, shared across models.
    pub targets: Targets,
    pub t: f64,
    pub loss_kind: LossKind,
}

impl KernelDynamicsState {
    pub fn new(
        f_train: Array2<f64>,
        f_test: Array2<f64>,
        targets: Targets,
        loss_kind: LossKind,
    ) -> Self {
        KernelDynamicsState {
            f_train,
            f_test,
            targets,
            t: 0.0,
            loss_kind,
        }
    }

    fn n_models(&self) -> usize {
        self.f_train.nrows() / self.targets.len().max(1)
    }

    /// Per-point loss derivative ∂L/∂f on the train set, shape (M·n_tr, C).
    fn loss_grad(&self) -> Array2<f64> {
        let m = self.n_models();
        match (&self.loss_kind, &self.targets) {
            (LossKind::Mse, Targets::Regression(y)) => {
                let ye = expand_targets(y, m);
                let mut g = self.f_train.clone();
                for (mut row, y) in g.rows_mut().into_iter().zip(ye.iter()) {
                    row[0] -= y;
                }
                g
            }
            (LossKind::CrossEntropy, Targets::Classes(cs)) => {
                let n = cs.len();
                let mut g = crate::net::softmax_probs(&self.f_train);
                for (r, mut row) in g.rows_mut().into_iter().enumerate() {
                    row[cs[r % n]] -= 1.0;
                }
                g
            }
            _ => panic!("loss kind and target kind disagree"),
        }
    }

    /// Σ_α (1/B) Σ_b L(f_α(x_b), y_b): the quantity gradient flow descends.
    pub fn total_train_loss(&self) -> f64 {
        let m = self.n_models();
        let b = self.targets.len();
        match (&self.loss_kind, &self.targets) {
            (LossKind::Mse, Targets::Regression(y)) => {
                let ye = expand_targets(y, m);
                self.f_train
                    .column(0)
                    .iter()
                    .zip(ye.iter())
                    .map(|(f, y)| (f - y) * (f - y) / 2.0)
                    .sum::<f64>()
                    / b as f64
            }
            (LossKind::CrossEntropy, Targets::Classes(cs)) => {
                let mut total = 0.0;
                for (r, row) in self.f_train.rows().into_iter().enumerate() {
                    let c = cs[r % cs.len()];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                    total += logsum - row[c];
                }
                total / b as f64
            }
            _ => panic!("loss kind and target kind disagree"),
        }
    }
}

fn derivative(
    k: &BlockKernel,
    state: &KernelDynamicsState,
) -> (Array2<f64>, Array2<f64>) {
    let g = state.loss_grad();
    let inv_b = 1.0 / state.targets.len() as f64;
    let d_train = k.train_train.dot(&g) * (-inv_b);
    let d_test = k.test_train.dot(&g) * (-inv_b);
    (d_train, d_test)
}

/// Classic 4th-order Runge–Kutta on the gradient-flow output dynamics,
/// recording snapshots at `record_times` (each is hit exactly; the end time
/// is always recorded). A non-finite state aborts.
pub fn ode_integrate(
    k: &BlockKernel,
    state0: &KernelDynamicsState,
    t_end: f64,
    dt: f64,
    record_times: &[f64],
) -> Result<Vec<KernelDynamicsState>> {
    if dt <= 0.0 {
        return Err(Error::InvalidSpec("dt must be positive".into()));
    }
    if state0.f_train.nrows() != k.n_train_rows() || state0.f_test.nrows() != k.n_test_rows() {
        return Err(Error::DimensionMismatch(
            "state shape does not match kernel blocks".into(),
        ));
    }

    // Time grid: multiples of dt plus every record time, all <= t_end.
    let mut marks: Vec<f64> = record_times
        .iter()
        .copied()
        .filter(|t| *t > 0.0 && *t < t_end)
        .collect();
    marks.push(t_end);
    marks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    marks.dedup();

    let mut state = state0.clone();
    state.t = 0.0;
    let mut out = Vec::with_capacity(marks.len() + 1);
    if record_times.contains(&0.0) {
        out.push(state.clone());
    }

    for &mark in &marks {
        while state.t < mark - 1e-15 * t_end.max(1.0) {
            let h = dt.min(mark - state.t);
            rk4_step(k, &mut state, h)?;
        }
        state.t = mark;
        out.push(state.clone());
    }
    Ok(out)
}

fn rk4_step(k: &BlockKernel, state: &mut KernelDynamicsState, h: f64) -> Result<()> {
    let (k1_tr, k1_te) = derivative(k, state);
    let mut s2 = state.clone();
    s2.f_train = &state.f_train + &(&k1_tr * (h / 2.0));
    s2.f_test = &state.f_test + &(&k1_te * (h / 2.0));
    let (k2_tr, k2_te) = derivative(k, &s2);
    let mut s3 = state.clone();
    s3.f_train = &state.f_train + &(&k2_tr * (h / 2.0));
    s3.f_test = &state.f_test + &(&k2_te * (h / 2.0));
    let (k3_tr, k3_te) = derivative(k, &s3);
    let mut s4 = state.clone();
    s4.f_train = &state.f_train + &(&k3_tr * h);
    s4.f_test = &state.f_test + &(&k3_te * h);
    let (k4_tr, k4_te) = derivative(k, &s4);

    state.f_train = &state.f_train
        + &((&k1_tr + &(&k2_tr * 2.0) + &(&k3_tr * 2.0) + &k4_tr) * (h / 6.0));
    state.f_test =
        &state.f_test + &((&k1_te + &(&k2_te * 2.0) + &(&k3_te * 2.0) + &k4_te) * (h / 6.0));
    state.t += h;
    if state.f_train.iter().any(|v| !v.is_finite())
        || state.f_test.iter().any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("kernel dynamics state".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::mse_closed_form;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    fn random_psd(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::numerics::Seed::new(seed).rng();
        let mut a = Array2::<f64>::zeros((n, n));
        for v in a.iter_mut() {
            *v = rng.random::<f64>() - 0.5;
        }
        a.dot(&a.t())
    }

    #[test]
    fn zero_kernel_keeps_state_constant() {
        let k = BlockKernel {
            train_train: Array2::zeros((2, 2)),
            test_train: Array2::zeros((1, 2)),
        };
        let s0 = KernelDynamicsState::new(
            array![[1.0], [2.0]],
            array![[0.5]],
            Targets::Regression(vec![0.0, 0.0]),
            LossKind::Mse,
        );
        let out = ode_integrate(&k, &s0, 2.0, 0.1, &[]).unwrap();
        let end = out.last().unwrap();
        assert_eq!(end.f_train, s0.f_train);
        assert_eq!(end.f_test, s0.f_test);
    }

    #[test]
    fn rk4_matches_closed_form_mse() {
        let n = 8;
        let kmat = random_psd(n, 3);
        let k = BlockKernel {
            train_train: kmat,
            test_train: Array2::zeros((0, n)),
        };
        let mut rng = crate::numerics::Seed::new(4).rng();
        let f0: Array1<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();

        let s0 = KernelDynamicsState::new(
            f0.clone().insert_axis(ndarray::Axis(1)),
            Array2::zeros((0, 1)),
            Targets::Regression(y.clone()),
            LossKind::Mse,
        );
        let out = ode_integrate(&k, &s0, 1.0, 1e-3, &[]).unwrap();
        let rk4 = out.last().unwrap().f_train.column(0).to_owned();
        let exact = mse_closed_form(&k, &f0, &y, 1.0).unwrap();
        for (a, b) in rk4.iter().zip(exact.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn rk4_is_fourth_order() {
        // Halving dt shrinks the endpoint change by ~16; spec demands >= 10.
        let n = 4;
        let k = BlockKernel {
            train_train: random_psd(n, 7),
            test_train: Array2::zeros((0, n)),
        };
        let mut rng = crate::numerics::Seed::new(8).rng();
        let f0: Array2<f64> = Array2::from_shape_fn((n, 1), |_| rng.random::<f64>());
        let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let s0 = KernelDynamicsState::new(
            f0,
            Array2::zeros((0, 1)),
            Targets::Regression(y),
            LossKind::Mse,
        );
        let end = |dt: f64| {
            ode_integrate(&k, &s0, 1.0, dt, &[])
                .unwrap()
                .last()
                .unwrap()
                .f_train
                .clone()
        };
        let e1 = end(0.2);
        let e2 = end(0.1);
        let e3 = end(0.05);
        let d12: f64 = (&e1 - &e2).iter().map(|v| v * v).sum::<f64>().sqrt();
        let d23: f64 = (&e2 - &e3).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(d23 <= d12 / 10.0, "d12 = {d12:e}, d23 = {d23:e}");
    }

    #[test]
    fn cross_entropy_loss_descends() {
        // 2-class 2-point separable toy with a PSD kernel: total train loss
        // strictly decreasing along the trajectory.
        let k = BlockKernel {
            train_train: array![[1.0, 0.2], [0.2, 1.0]],
            test_train: Array2::zeros((0, 2)),
        };
        let s0 = KernelDynamicsState::new(
            array![[0.3, -0.1], [-0.4, 0.2]],
            Array2::zeros((0, 2)),
            Targets::Classes(vec![0, 1]),
            LossKind::CrossEntropy,
        );
        let times: Vec<f64> = (0..=10).map(|i| i as f64 * 0.5).collect();
        let out = ode_integrate(&k, &s0, 5.0, 1e-2, &times).unwrap();
        let losses: Vec<f64> = out.iter().map(|s| s.total_train_loss()).collect();
        for w in losses.windows(2) {
            assert!(
                w[1] < w[0] + 1e-9 * w[0].abs(),
                "loss not descending: {losses:?}"
            );
        }
    }

    #[test]
    fn block_diagonal_dynamics_are_model_local() {
        // With block-diagonal Θ and block f0, model 0's trajectory is
        // bit-identical no matter what the other model's block contains.
        let a = random_psd(2, 11);
        let b1 = random_psd(2, 12);
        let b2 = random_psd(2, 13);
        let build = |b: &Array2<f64>| {
            let mut k = Array2::zeros((4, 4));
            for i in 0..2 {
                for j in 0..2 {
                    k[[i, j]] = a[[i, j]];
                    k[[2 + i, 2 + j]] = b[[i, j]];
                }
            }
            BlockKernel {
                train_train: k,
                test_train: Array2::zeros((0, 4)),
            }
        };
        let s0 = KernelDynamicsState::new(
            array![[0.5], [-0.3], [0.8], [0.1]],
            Array2::zeros((0, 1)),
            Targets::Regression(vec![0.0, 1.0]),
            LossKind::Mse,
        );
        let run = |k: &BlockKernel| {
            ode_integrate(k, &s0, 2.0, 0.05, &[])
                .unwrap()
                .last()
                .unwrap()
                .f_train
                .clone()
        };
        let f1 = run(&build(&b1));
        let f2 = run(&build(&b2));
        assert_eq!(f1[[0, 0]], f2[[0, 0]]);
        assert_eq!(f1[[1, 0]], f2[[1, 0]]);
        assert_ne!(f1[[2, 0]], f2[[2, 0]]);
    }

    #[test]
    fn rejects_bad_dt() {
        let k = BlockKernel {
            train_train: Array2::zeros((1, 1)),
            test_train: Array2::zeros((0, 1)),
        };
        let s0 = KernelDynamicsState::new(
            array![[1.0]],
            Array2::zeros((0, 1)),
            Targets::Regression(vec![0.0]),
            LossKind::Mse,
        );
        assert!(ode_integrate(&k, &s0, 1.0, 0.0, &[]).is_err());
    }
}
