//! Class-reduced NTK variants, inter-model interaction metrics, and the
//! per-model decomposition of one SGD step's output change.

use crate::error::{Error, Result};
use crate::net::{
    backward_model, forward_cached, loss_and_grads, sgd_step, softmax_probs, ArchSpec, Batch,
    EnsembleParams, Targets, TrainConfig,
};
use crate::numerics::{split_rng, Seed};
use ndarray::{Array2, Array3, Array4, Array6};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Softmax probabilities per (model, point, class) for the current outputs.
pub fn softmax_predictions(
    params: &EnsembleParams,
    arch: &ArchSpec,
    batch: &Batch,
) -> Result<Array3<f64>> {
    let preds = super::model_predictions(params, arch, &batch.inputs.view())?;
    let (m, n, c) = preds.dim();
    let mut out = Array3::zeros((m, n, c));
    for alpha in 0..m {
        let probs = softmax_probs(&preds.index_axis(ndarray::Axis(0), alpha).to_owned());
        out.index_axis_mut(ndarray::Axis(0), alpha).assign(&probs);
    }
    Ok(out)
}

/// "nll" reduction: contract the class indices of the full NTK with the
/// cross-entropy loss derivatives p_i - δ_{ic} on both sides:
/// Θ^nll_{αβ}(x_a, x_b) = Σ_{ij} g_{iα}(x_a) Θ_{ij,αβ}(x_a,x_b) g_{jβ}(x_b).
pub fn ntk_reduce_nll(
    class_ntk: &Array6<f64>,
    probs: &Array3<f64>,
    targets: &[usize],
) -> Result<Array4<f64>> {
    let (c1, c2, m, m2, n, n2) = class_ntk.dim();
    let (pm, pn, pc) = probs.dim();
    if c1 != c2 || m != m2 || n != n2 || pm != m || pn != n || pc != c1 || targets.len() != n {
        return Err(Error::DimensionMismatch(
            "class NTK, probs, and targets shapes disagree".into(),
        ));
    }
    let g = |alpha: usize, a: usize, i: usize| -> f64 {
        probs[[alpha, a, i]] - if targets[a] == i { 1.0 } else { 0.0 }
    };
    let mut out = Array4::zeros((m, m, n, n));
    for alpha in 0..m {
        for beta in 0..m {
            for a in 0..n {
                for b in 0..n {
                    let mut acc = 0.0;
                    for i in 0..c1 {
                        for j in 0..c1 {
                            acc += g(alpha, a, i)
                                * class_ntk[[i, j, alpha, beta, a, b]]
                                * g(beta, b, j);
                        }
                    }
                    out[[alpha, beta, a, b]] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// "target" reduction: select the (c_a, c_b) class entry per point pair.
pub fn ntk_reduce_target(class_ntk: &Array6<f64>, targets: &[usize]) -> Result<Array4<f64>> {
    let (c1, _c2, m, _m2, n, _n2) = class_ntk.dim();
    if targets.len() != n || targets.iter().any(|c| *c >= c1) {
        return Err(Error::DimensionMismatch("targets out of range".into()));
    }
    let mut out = Array4::zeros((m, m, n, n));
    for alpha in 0..m {
        for beta in 0..m {
            for a in 0..n {
                for b in 0..n {
                    out[[alpha, beta, a, b]] =
                        class_ntk[[targets[a], targets[b], alpha, beta, a, b]];
                }
            }
        }
    }
    Ok(out)
}

/// Inter-model interaction statistics of an (M, M, B, B) reduced kernel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InteractionMetrics {
    /// (i): mean Θ²_{α≠β} / mean Θ²_{αα}.
    pub offdiag_ratio: f64,
    /// (ii): the coherent-sum ratio over a fixed m-subset of other models —
    /// Σ_{α,a} (B⁻¹ Σ_{b, β∈S} Θ_{αβ}(x_a,x_b))² over the same with β = α.
    pub coherent_ratio: f64,
    /// Seeded model order from which each α takes its first m others.
    pub subset_order: Vec<usize>,
}

/// Compute both interaction metrics; `m_subset` is the paper's m < M, and the
/// subset order is a seeded shuffle so "any set of models" is reproducible.
pub fn interaction_metrics(
    reduced: &Array4<f64>,
    m_subset: usize,
    seed: Seed,
) -> Result<InteractionMetrics> {
    let (m, m2, nb, nb2) = reduced.dim();
    if m != m2 || nb != nb2 {
        return Err(Error::DimensionMismatch("reduced kernel not square".into()));
    }
    if m_subset == 0 || m_subset >= m {
        return Err(Error::InvalidSpec("need M > m_subset >= 1".into()));
    }

    let mut off = 0.0;
    let mut diag = 0.0;
    for alpha in 0..m {
        for beta in 0..m {
            for a in 0..nb {
                for b in 0..nb {
                    let v = reduced[[alpha, beta, a, b]];
                    if alpha == beta {
                        diag += v * v;
                    } else {
                        off += v * v;
                    }
                }
            }
        }
    }
    let offdiag_ratio =
        (off / ((m * (m - 1) * nb * nb) as f64)) / (diag / ((m * nb * nb) as f64));

    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = seed.rng();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }

    let mut num = 0.0;
    let mut den = 0.0;
    for alpha in 0..m {
        let subset: Vec<usize> = order
            .iter()
            .copied()
            .filter(|b| *b != alpha)
            .take(m_subset)
            .collect();
        for a in 0..nb {
            let mut cross = 0.0;
            let mut own = 0.0;
            for b in 0..nb {
                own += reduced[[alpha, alpha, a, b]];
                for beta in &subset {
                    cross += reduced[[alpha, *beta, a, b]];
                }
            }
            num += (cross / nb as f64).powi(2);
            den += (own / nb as f64).powi(2);
        }
    }
    if den == 0.0 {
        return Err(Error::Numerical("zero same-model reduction".into()));
    }
    Ok(InteractionMetrics {
        offdiag_ratio,
        coherent_ratio: num / den,
        subset_order: order,
    })
}

/// The per-model contributions Δ_β f_α of one SGD step, per batch point and
/// class: the shared-weight inner product scaled by -η_w γ(M)/M, plus the
/// model-diagonal trainable-modulation term at -η_u. Summed over β it matches
/// the realized output change to O(η²).
#[derive(Debug, Clone)]
pub struct ContributionDecomposition {
    /// (M, M, B, C): contribution of model β's loss gradient to Δf_α(x_b).
    pub delta: Array4<f64>,
}

impl ContributionDecomposition {
    /// Σ_β Δ_β f_α(x_b)_c, the first-order prediction of the step's effect.
    pub fn predicted_total(&self) -> Array3<f64> {
        let (m, _m2, nb, c) = self.delta.dim();
        let mut out = Array3::zeros((m, nb, c));
        for alpha in 0..m {
            for beta in 0..m {
                for b in 0..nb {
                    for ch in 0..c {
                        out[[alpha, b, ch]] += self.delta[[alpha, beta, b, ch]];
                    }
                }
            }
        }
        out
    }
}

pub fn contribution_decomposition(
    params: &EnsembleParams,
    arch: &ArchSpec,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<ContributionDecomposition> {
    batch.validate(arch)?;
    let m = arch.n_models;
    let nb = batch.len();
    let c = arch.output_dim;
    let (_losses, loss_grads) = loss_and_grads(params, arch, batch, cfg.loss_kind)?;
    let flat_loss: Vec<_> = super::ntk::flat_loss_grads(&loss_grads.per_model);
    let gamma_over_m = cfg.gamma_mode.gamma(m) / m as f64;

    let cache = forward_cached(params, arch, batch.inputs.view())?;
    let mut delta = Array4::zeros((m, m, nb, c));
    for alpha in 0..m {
        for b in 0..nb {
            for ch in 0..c {
                let mut upstream = Array2::zeros((nb, c));
                upstream[[b, ch]] = 1.0;
                let out_grad =
                    backward_model(params, arch, &cache.per_model[alpha], alpha, &upstream, false);
                let w_flat = out_grad.flat_weights();
                let u_flat = out_grad.flat_mods();
                for beta in 0..m {
                    let mut v = -cfg.eta_w * gamma_over_m * w_flat.dot(&flat_loss[beta].0);
                    if beta == alpha {
                        v += -cfg.eta_u * u_flat.dot(&flat_loss[alpha].1);
                    }
                    delta[[alpha, beta, b, ch]] = v;
                }
            }
        }
    }
    Ok(ContributionDecomposition { delta })
}

/// Realized output change of one SGD step on the batch inputs, (M, B, C).
pub fn actual_step_delta(
    params: &EnsembleParams,
    arch: &ArchSpec,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<Array3<f64>> {
    let before = super::model_predictions(params, arch, &batch.inputs.view())?;
    let (_l, g) = loss_and_grads(params, arch, batch, cfg.loss_kind)?;
    let mut stepped = params.clone();
    sgd_step(&mut stepped, &g, cfg);
    let after = super::model_predictions(&stepped, arch, &batch.inputs.view())?;
    Ok(after - before)
}

/// Convenience: class labels for reductions from a classification batch.
pub fn class_targets(batch: &Batch) -> Result<Vec<usize>> {
    match &batch.targets {
        Targets::Classes(c) => Ok(c.clone()),
        _ => Err(Error::InvalidSpec(
            "class-reduced kernels need classification targets".into(),
        )),
    }
}

/// Fixed m-subset helper mirroring the metric's seeded order (exposed for
/// report reproducibility).
pub fn seeded_model_order(m: usize, seed: Seed) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = split_rng(seed, 0).rng();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}
