//! Layer-wise recursions for the infinite-width GP covariance and ensemble
//! NTK over a fixed input set.
//!
//! Per layer and input pair the 2×2 pre-activation covariance feeds the Φ
//! expectations, and
//!
//! ```text
//! Σ_same' = U2 Φ_same                 Σ_diff' = U1² Φ_diff
//! Θcom_same' = U2 V2 Φ̇_same Θcom_same + U2 Φ_same
//! Θcom_diff' = U1² V1² Φ̇_diff Θcom_diff + U1² Φ_diff
//! Θind_same' = U2 V2 Φ̇_same Θind_same + T(u) Φ_same + T(v) U2 Φz_same
//! ```
//!
//! The common/individual split exists because the assembled ensemble kernel
//! scales only the common part by γ(M)/M; the individual part is
//! model-diagonal, so it propagates with the same-model multiplier. Summing
//! the two accumulators reproduces the total NTK recursion.

use super::phi::{phi_expect, phid_expect, phiz_expect, PairMode};
use crate::error::{Error, Result};
use crate::net::{Activation, ArchSpec, GammaMode, ModulationSpec};
use crate::numerics::{min_eigenvalue, Cov2, QuadratureSpec};
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// First and second moments of a modulation distribution, with its
/// trainability flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModulationMoments {
    pub m1: f64,
    pub m2: f64,
    pub trainable: bool,
}

impl ModulationMoments {
    /// Moments of the absent modulation: deterministic 1, frozen.
    pub fn unit() -> Self {
        ModulationMoments {
            m1: 1.0,
            m2: 1.0,
            trainable: false,
        }
    }
}

/// Exact first two moments of a modulation spec.
pub fn moments(spec: &ModulationSpec) -> Result<ModulationMoments> {
    spec.validate()?;
    let (m1, m2) = spec.raw_moments();
    if m2 < m1 * m1 - 1e-12 {
        return Err(Error::InvalidSpec(format!(
            "modulation moments violate m2 >= m1^2: ({m1}, {m2})"
        )));
    }
    Ok(ModulationMoments {
        m1,
        m2,
        trainable: spec.trainable,
    })
}

pub(crate) fn moments_or_unit(spec: Option<&ModulationSpec>) -> Result<ModulationMoments> {
    match spec {
        Some(s) => moments(s),
        None => Ok(ModulationMoments::unit()),
    }
}

/// Kernels of one layer over an input set of n points: the GP covariance for
/// same/different model pairs and the ensemble NTK split into its common
/// (shared-weight) and individual (per-model) parts. The individual part is
/// model-diagonal so it has no diff channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKernels {
    pub sigma_same: Array2<f64>,
    pub sigma_diff: Array2<f64>,
    pub theta_com_same: Array2<f64>,
    pub theta_com_diff: Array2<f64>,
    pub theta_ind_same: Array2<f64>,
}

impl LayerKernels {
    pub fn n_points(&self) -> usize {
        self.sigma_same.nrows()
    }

    /// Total same-model NTK Θ_αα = Θcom_same + Θind_same.
    pub fn theta_same_total(&self) -> Array2<f64> {
        &self.theta_com_same + &self.theta_ind_same
    }
}

/// First-layer kernels: Σ¹ = X Xᵀ / N₀ for every model pair (modulations act
/// only from layer 1's activation onward), and Θ¹ = Σ¹ with no individual
/// part yet.
pub fn sigma_init(x: &ArrayView2<'_, f64>) -> LayerKernels {
    let n0 = x.ncols() as f64;
    let gram = x.dot(&x.t()) / n0;
    LayerKernels {
        sigma_same: gram.clone(),
        sigma_diff: gram.clone(),
        theta_com_same: gram.clone(),
        theta_com_diff: gram,
        theta_ind_same: Array2::zeros((x.nrows(), x.nrows())),
    }
}

/// Φ values of one input pair needed by a layer step.
struct PairPhis {
    phi_s: f64,
    phi_d: f64,
    phid_s: f64,
    phid_d: f64,
    phiz_s: f64,
}

/// Evaluate the Φ family on every input pair (upper triangle, mirrored).
/// `need_*` flags skip integrals whose multiplier is exactly zero.
fn pair_phis(
    prev: &LayerKernels,
    v_spec: &ModulationSpec,
    act: Activation,
    q: &QuadratureSpec,
    need_diff: bool,
    need_phid_s: bool,
    need_phiz_s: bool,
) -> Result<Vec<PairPhis>> {
    let n = prev.n_points();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i..n).map(move |j| (i, j)))
        .collect();
    pairs
        .par_iter()
        .map(|&(i, j)| {
            let cs = Cov2::new(
                prev.sigma_same[[i, i]],
                prev.sigma_same[[i, j]],
                prev.sigma_same[[j, j]],
            );
            let cd = Cov2::new(
                prev.sigma_same[[i, i]],
                prev.sigma_diff[[i, j]],
                prev.sigma_same[[j, j]],
            );
            let phi_s = phi_expect(act, &cs, v_spec, PairMode::SameModel, q)?;
            let phi_d = if need_diff {
                phi_expect(act, &cd, v_spec, PairMode::DiffModel, q)?
            } else {
                0.0
            };
            let phid_s = if need_phid_s {
                phid_expect(act, &cs, v_spec, PairMode::SameModel, q)?
            } else {
                0.0
            };
            let phid_d = if need_diff {
                phid_expect(act, &cd, v_spec, PairMode::DiffModel, q)?
            } else {
                0.0
            };
            let phiz_s = if need_phiz_s {
                phiz_expect(act, &cs, v_spec, PairMode::SameModel, q)?
            } else {
                0.0
            };
            Ok(PairPhis {
                phi_s,
                phi_d,
                phid_s,
                phid_d,
                phiz_s,
            })
        })
        .collect()
}

fn fill_symmetric(n: usize, pairs: &[(usize, usize)], vals: impl Fn(usize) -> f64) -> Array2<f64> {
    let mut out = Array2::zeros((n, n));
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let v = vals(k);
        out[[i, j]] = v;
        out[[j, i]] = v;
    }
    out
}

/// GP covariance step (Σ^{l} → Σ^{l+1}) given layer l's modulation moments.
pub fn sigma_step(
    prev: &LayerKernels,
    u_mom: &ModulationMoments,
    v_spec: &ModulationSpec,
    act: Activation,
    q: &QuadratureSpec,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = prev.n_points();
    let u1sq = u_mom.m1 * u_mom.m1;
    let phis = pair_phis(prev, v_spec, act, q, u1sq != 0.0, false, false)?;
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i..n).map(move |j| (i, j)))
        .collect();
    let same = fill_symmetric(n, &pairs, |k| u_mom.m2 * phis[k].phi_s);
    let diff = fill_symmetric(n, &pairs, |k| u1sq * phis[k].phi_d);
    Ok((same, diff))
}

/// Ensemble NTK step (Θ^{l} → Θ^{l+1}); trainability comes from the moments'
/// flags: T(u) adds Φ and T(v) adds U2 Φ_z to the individual accumulator.
pub fn ntk_step(
    prev: &LayerKernels,
    u_mom: &ModulationMoments,
    v_mom: &ModulationMoments,
    v_spec: &ModulationSpec,
    act: Activation,
    q: &QuadratureSpec,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let n = prev.n_points();
    let u1sq = u_mom.m1 * u_mom.m1;
    let v1sq = v_mom.m1 * v_mom.m1;
    let phis = pair_phis(
        prev,
        v_spec,
        act,
        q,
        u1sq != 0.0,
        true,
        v_mom.trainable,
    )?;
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i..n).map(move |j| (i, j)))
        .collect();
    let t_u = if u_mom.trainable { 1.0 } else { 0.0 };
    let t_v = if v_mom.trainable { 1.0 } else { 0.0 };

    let com_same = fill_symmetric(n, &pairs, |k| {
        let (i, j) = pairs[k];
        u_mom.m2 * v_mom.m2 * phis[k].phid_s * prev.theta_com_same[[i, j]]
            + u_mom.m2 * phis[k].phi_s
    });
    let com_diff = fill_symmetric(n, &pairs, |k| {
        let (i, j) = pairs[k];
        u1sq * v1sq * phis[k].phid_d * prev.theta_com_diff[[i, j]] + u1sq * phis[k].phi_d
    });
    let ind_same = fill_symmetric(n, &pairs, |k| {
        let (i, j) = pairs[k];
        u_mom.m2 * v_mom.m2 * phis[k].phid_s * prev.theta_ind_same[[i, j]]
            + t_u * phis[k].phi_s
            + t_v * u_mom.m2 * phis[k].phiz_s
    });
    Ok((com_same, com_diff, ind_same))
}

/// Run the full recursion over the input rows of `x`, returning the kernels
/// of layers 1..=L+1 (the last entry is the network output layer).
pub fn run_recursion(
    arch: &ArchSpec,
    x: &ArrayView2<'_, f64>,
    q: &QuadratureSpec,
) -> Result<Vec<LayerKernels>> {
    arch.validate()?;
    q.validate()?;
    if x.ncols() != arch.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "inputs have dim {}, arch wants {}",
            x.ncols(),
            arch.input_dim
        )));
    }
    if arch.input_mod.is_some() || arch.output_mod.is_some() {
        return Err(Error::InvalidSpec(
            "the wide-width recursion does not cover input/output modulations".into(),
        ));
    }

    let mut layers = Vec::with_capacity(arch.depth() + 1);
    layers.push(sigma_init(x));
    for layer in arch.layers.iter() {
        let prev = layers.last().unwrap();
        let u_mom = moments_or_unit(layer.post_mod.as_ref())?;
        let v_mom = moments_or_unit(layer.pre_mod.as_ref())?;
        let unit_spec = ModulationSpec::deterministic(1.0);
        let v_spec = layer.pre_mod.as_ref().unwrap_or(&unit_spec);
        let (sigma_same, sigma_diff) = sigma_step(prev, &u_mom, v_spec, arch.activation, q)?;
        let (theta_com_same, theta_com_diff, theta_ind_same) =
            ntk_step(prev, &u_mom, &v_mom, v_spec, arch.activation, q)?;
        layers.push(LayerKernels {
            sigma_same,
            sigma_diff,
            theta_com_same,
            theta_com_diff,
            theta_ind_same,
        });
    }
    Ok(layers)
}

fn psd_check(k: &Array2<f64>, what: &str) -> Result<()> {
    let n = k.nrows();
    let trace: f64 = k.diag().sum();
    let min = min_eigenvalue(k);
    if min < -1e-8 * trace.abs().max(f64::MIN_POSITIVE) / n as f64 {
        return Err(Error::NotPsd(format!(
            "{what}: min eigenvalue {min} vs trace {trace} over {n} rows"
        )));
    }
    Ok(())
}

/// Assemble the (M·n)×(M·n) ensemble NTK block kernel from the output-layer
/// kernels: diagonal blocks (γ(M)/M)·Θcom_same + Θind_same, off-diagonal
/// blocks (γ(M)/M)·Θcom_diff. Index layout is model-major: row α·n + i.
pub fn assemble_ntk(
    out_layer: &LayerKernels,
    m: usize,
    gamma_mode: GammaMode,
) -> Result<Array2<f64>> {
    if m == 0 {
        return Err(Error::InvalidSpec("need m >= 1".into()));
    }
    let n = out_layer.n_points();
    let g = gamma_mode.gamma(m) / m as f64;
    let mut k = Array2::zeros((m * n, m * n));
    for alpha in 0..m {
        for beta in 0..m {
            for i in 0..n {
                for j in 0..n {
                    k[[alpha * n + i, beta * n + j]] = if alpha == beta {
                        g * out_layer.theta_com_same[[i, j]] + out_layer.theta_ind_same[[i, j]]
                    } else {
                        g * out_layer.theta_com_diff[[i, j]]
                    };
                }
            }
        }
    }
    psd_check(&k, "assembled ensemble NTK")?;
    Ok(k)
}

/// The (M·n)×(M·n) GP covariance of the outputs at initialization: diagonal
/// blocks Σ_same, off-diagonal blocks Σ_diff. Model-major layout.
pub fn gp_covariance_blocks(out_layer: &LayerKernels, m: usize) -> Result<Array2<f64>> {
    if m == 0 {
        return Err(Error::InvalidSpec("need m >= 1".into()));
    }
    let n = out_layer.n_points();
    let mut k = Array2::zeros((m * n, m * n));
    for alpha in 0..m {
        for beta in 0..m {
            for i in 0..n {
                for j in 0..n {
                    k[[alpha * n + i, beta * n + j]] = if alpha == beta {
                        out_layer.sigma_same[[i, j]]
                    } else {
                        out_layer.sigma_diff[[i, j]]
                    };
                }
            }
        }
    }
    psd_check(&k, "GP output covariance")?;
    Ok(k)
}
