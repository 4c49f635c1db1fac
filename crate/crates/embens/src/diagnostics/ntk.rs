//! Empirical (finite-width) ensemble NTK from exact gradient inner products,
//! its class-indexed variant, and the training drift of the kernel.

use crate::error::{Error, Result};
use crate::net::{
    backward_model, forward_cached, ArchSpec, EnsembleParams, GammaMode, ModelGrads,
};
use ndarray::{Array1, Array2, Array4, Array6, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

/// Metadata carried with an empirical kernel measurement.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KernelMeta {
    /// Widest hidden layer of the measured network.
    pub width: usize,
    /// Seed of the parameter draw, when the caller tracks it.
    pub seed: Option<crate::numerics::Seed>,
}

/// Θ̂_{αβ}(x_i, x_j) for one output channel.
#[derive(Debug, Clone)]
pub struct EmpiricalKernel {
    /// (M, M, n, n)
    pub values: Array4<f64>,
    pub gamma_mode: GammaMode,
    pub meta: KernelMeta,
}

impl EmpiricalKernel {
    /// Flatten to the model-major (M·n)×(M·n) matrix (row α·n + i).
    pub fn flattened(&self) -> Array2<f64> {
        let (m, _, n, _) = self.values.dim();
        let mut out = Array2::zeros((m * n, m * n));
        for alpha in 0..m {
            for beta in 0..m {
                for i in 0..n {
                    for j in 0..n {
                        out[[alpha * n + i, beta * n + j]] = self.values[[alpha, beta, i, j]];
                    }
                }
            }
        }
        out
    }

    /// Mean of Θ̂²  over off-diagonal model pairs divided by the same-model
    /// mean (interaction metric (i) of the reduced-kernel family, computed
    /// directly on a scalar-channel kernel).
    pub fn offdiag_ratio(&self) -> f64 {
        let (m, _, n, _) = self.values.dim();
        let mut off = 0.0;
        let mut diag = 0.0;
        for alpha in 0..m {
            for beta in 0..m {
                for i in 0..n {
                    for j in 0..n {
                        let v = self.values[[alpha, beta, i, j]];
                        if alpha == beta {
                            diag += v * v;
                        } else {
                            off += v * v;
                        }
                    }
                }
            }
        }
        let n_off = (m * (m - 1) * n * n).max(1) as f64;
        let n_diag = (m * n * n) as f64;
        (off / n_off) / (diag / n_diag)
    }
}

fn widest(arch: &ArchSpec) -> usize {
    arch.layers.iter().map(|l| l.width).max().unwrap_or(0)
}

/// Per-(model, point) gradient vectors of one output channel.
fn output_grads(
    params: &EnsembleParams,
    arch: &ArchSpec,
    x: &ArrayView2<'_, f64>,
    channel: usize,
) -> Result<Vec<Vec<(Array1<f64>, Array1<f64>)>>> {
    if channel >= arch.output_dim {
        return Err(Error::DimensionMismatch(format!(
            "channel {channel} out of {} outputs",
            arch.output_dim
        )));
    }
    let cache = forward_cached(params, arch, *x)?;
    let n = x.nrows();
    let mut all = Vec::with_capacity(arch.n_models);
    for (alpha, mc) in cache.per_model.iter().enumerate() {
        let mut per_point = Vec::with_capacity(n);
        for i in 0..n {
            let mut upstream = Array2::zeros((n, arch.output_dim));
            upstream[[i, channel]] = 1.0;
            let g = backward_model(params, arch, mc, alpha, &upstream, false);
            per_point.push((g.flat_weights(), g.flat_mods()));
        }
        all.push(per_point);
    }
    Ok(all)
}

fn dot(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.dot(b)
}

/// Empirical ensemble NTK on the given inputs and output channel:
/// Θ̂_{αβ} = (γ(M)/M)·⟨∂f_α/∂w, ∂f_β/∂w⟩ + δ_{αβ}·⟨∂f_α/∂ũ_α, ∂f_α/∂ũ_α⟩,
/// from exact reverse-mode gradients.
pub fn empirical_ntk(
    params: &EnsembleParams,
    arch: &ArchSpec,
    x: &ArrayView2<'_, f64>,
    gamma_mode: GammaMode,
    channel: usize,
) -> Result<EmpiricalKernel> {
    let m = arch.n_models;
    let n = x.nrows();
    let grads = output_grads(params, arch, x, channel)?;
    let g_over_m = gamma_mode.gamma(m) / m as f64;
    let mut values = Array4::zeros((m, m, n, n));
    for alpha in 0..m {
        for beta in alpha..m {
            for i in 0..n {
                for j in 0..n {
                    if beta == alpha && j < i {
                        continue;
                    }
                    let mut v = g_over_m * dot(&grads[alpha][i].0, &grads[beta][j].0);
                    if alpha == beta {
                        v += dot(&grads[alpha][i].1, &grads[alpha][j].1);
                        values[[alpha, alpha, i, j]] = v;
                        values[[alpha, alpha, j, i]] = v;
                    } else {
                        // Θ̂[α,β,i,j] = Θ̂[β,α,j,i] is the full symmetry.
                        values[[alpha, beta, i, j]] = v;
                        values[[beta, alpha, j, i]] = v;
                    }
                }
            }
        }
    }
    Ok(EmpiricalKernel {
        values,
        gamma_mode,
        meta: KernelMeta {
            width: widest(arch),
            seed: None,
        },
    })
}

/// Class-indexed empirical NTK Θ̂_{ij,αβ}(x_a, x_b) as a
/// (C, C, M, M, n, n) tensor. Intended for small n, C, M (the reduced-kernel
/// diagnostics), as it materializes one gradient vector per (class, model,
/// point).
pub fn empirical_class_ntk(
    params: &EnsembleParams,
    arch: &ArchSpec,
    x: &ArrayView2<'_, f64>,
    gamma_mode: GammaMode,
) -> Result<Array6<f64>> {
    let m = arch.n_models;
    let n = x.nrows();
    let c = arch.output_dim;
    let g_over_m = gamma_mode.gamma(m) / m as f64;
    let mut per_channel = Vec::with_capacity(c);
    for ch in 0..c {
        per_channel.push(output_grads(params, arch, x, ch)?);
    }
    let mut out = Array6::zeros((c, c, m, m, n, n));
    for c1 in 0..c {
        for c2 in 0..c {
            for alpha in 0..m {
                for beta in 0..m {
                    for i in 0..n {
                        for j in 0..n {
                            let mut v = g_over_m
                                * dot(&per_channel[c1][alpha][i].0, &per_channel[c2][beta][j].0);
                            if alpha == beta {
                                v += dot(
                                    &per_channel[c1][alpha][i].1,
                                    &per_channel[c2][alpha][j].1,
                                );
                            }
                            out[[c1, c2, alpha, beta, i, j]] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Relative Frobenius change of the empirical NTK between two parameter
/// states of the same architecture on the same inputs.
pub fn ntk_drift(
    params_t: &EnsembleParams,
    params_0: &EnsembleParams,
    arch: &ArchSpec,
    x: &ArrayView2<'_, f64>,
    gamma_mode: GammaMode,
    channel: usize,
) -> Result<f64> {
    let kt = empirical_ntk(params_t, arch, x, gamma_mode, channel)?;
    let k0 = empirical_ntk(params_0, arch, x, gamma_mode, channel)?;
    let num: f64 = (&kt.values - &k0.values).iter().map(|v| v * v).sum::<f64>();
    let den: f64 = k0.values.iter().map(|v| v * v).sum::<f64>();
    if den == 0.0 {
        return Err(Error::Numerical("zero reference NTK".into()));
    }
    Ok((num / den).sqrt())
}

/// Mean gradients used by several diagnostics: per-model flattened
/// (shared-weight, trainable-modulation) loss gradients.
pub(crate) fn flat_loss_grads(grads: &[ModelGrads]) -> Vec<(Array1<f64>, Array1<f64>)> {
    grads
        .iter()
        .map(|g| (g.flat_weights(), g.flat_mods()))
        .collect()
}

/// Per-model per-point outputs (M, n, C) for prediction diagnostics.
pub fn model_predictions(
    params: &EnsembleParams,
    arch: &ArchSpec,
    x: &ArrayView2<'_, f64>,
) -> Result<ndarray::Array3<f64>> {
    let outs = crate::net::forward_batch(params, arch, *x)?;
    let (n, c) = outs[0].dim();
    let mut arr = ndarray::Array3::zeros((outs.len(), n, c));
    for (alpha, o) in outs.iter().enumerate() {
        arr.index_axis_mut(Axis(0), alpha).assign(o);
    }
    Ok(arr)
}
