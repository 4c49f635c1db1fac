//! Finite-width statistics the wide-width theory predicts: Monte-Carlo
//! output covariances, gradient cosines and norm spreads, and binarized
//! prediction correlations.

use crate::error::{Error, Result};
use crate::net::{forward_batch, grads, ArchSpec, Batch, EnsembleParams, LossKind, init_params};
use crate::numerics::{split_rng, Seed};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

/// Monte-Carlo estimate of E[f_α(x_i) f_β(x_j)] over fresh initializations,
/// split into same-model and different-model pair averages, with standard
/// errors over seeds.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub same: Array2<f64>,
    pub diff: Array2<f64>,
    pub se_same: Array2<f64>,
    pub se_diff: Array2<f64>,
    pub n_seeds: usize,
}

/// Empirical output covariance on channel `channel` over `n_seeds` fresh
/// parameter draws (seeds split off `seed`). Needs M >= 2 for the diff
/// channel; per-seed pair averages are the samples behind the standard
/// errors.
pub fn empirical_covariance(
    arch: &ArchSpec,
    x: &ArrayView2<'_, f64>,
    n_seeds: usize,
    seed: Seed,
    channel: usize,
) -> Result<CovarianceEstimate> {
    if n_seeds < 2 {
        return Err(Error::InvalidSpec("need n_seeds >= 2".into()));
    }
    if channel >= arch.output_dim {
        return Err(Error::DimensionMismatch("channel out of range".into()));
    }
    let m = arch.n_models;
    let n = x.nrows();
    let mut sum_same = Array2::<f64>::zeros((n, n));
    let mut sum2_same = Array2::<f64>::zeros((n, n));
    let mut sum_diff = Array2::<f64>::zeros((n, n));
    let mut sum2_diff = Array2::<f64>::zeros((n, n));

    for s in 0..n_seeds {
        let params = init_params(arch, split_rng(seed, s as u64))?;
        let outs = forward_batch(&params, arch, *x)?;
        let f: Vec<Vec<f64>> = outs.iter().map(|o| o.column(channel).to_vec()).collect();
        for i in 0..n {
            for j in 0..n {
                let mut same = 0.0;
                for alpha in 0..m {
                    same += f[alpha][i] * f[alpha][j];
                }
                same /= m as f64;
                sum_same[[i, j]] += same;
                sum2_same[[i, j]] += same * same;
                if m >= 2 {
                    let mut diff = 0.0;
                    for alpha in 0..m {
                        for beta in 0..m {
                            if alpha != beta {
                                diff += f[alpha][i] * f[beta][j];
                            }
                        }
                    }
                    diff /= (m * (m - 1)) as f64;
                    sum_diff[[i, j]] += diff;
                    sum2_diff[[i, j]] += diff * diff;
                }
            }
        }
    }

    let k = n_seeds as f64;
    let finish = |sum: &Array2<f64>, sum2: &Array2<f64>| {
        let mean = sum / k;
        let var = (sum2 / k - &(&mean * &mean)).mapv(|v| v.max(0.0));
        let se = var.mapv(|v| (v / (k - 1.0)).sqrt());
        (mean, se)
    };
    let (same, se_same) = finish(&sum_same, &sum2_same);
    let (diff, se_diff) = finish(&sum_diff, &sum2_diff);
    Ok(CovarianceEstimate {
        same,
        diff,
        se_same,
        se_diff,
        n_seeds,
    })
}

/// Mean and standard deviation of |⟨∇_w L_α, ∇_w L_β⟩| / (‖∇_w L_α‖‖∇_w L_β‖)
/// over model pairs α < β, shared-weight gradients only. Zero-norm gradients
/// exclude their pairs, with the count reported.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCosineStats {
    pub mean: f64,
    pub std: f64,
    pub n_pairs: usize,
    pub n_excluded: usize,
}

pub fn grad_cosine(
    params: &EnsembleParams,
    arch: &ArchSpec,
    batch: &Batch,
    loss_kind: LossKind,
) -> Result<GradCosineStats> {
    if arch.n_models < 2 {
        return Err(Error::InvalidSpec("grad_cosine needs M >= 2".into()));
    }
    let g = grads(params, arch, batch, loss_kind)?;
    let flats: Vec<_> = g.per_model.iter().map(|mg| mg.flat_weights()).collect();
    let norms: Vec<f64> = flats.iter().map(|f| f.dot(f).sqrt()).collect();
    let mut vals = Vec::new();
    let mut excluded = 0usize;
    for alpha in 0..flats.len() {
        for beta in (alpha + 1)..flats.len() {
            if norms[alpha] == 0.0 || norms[beta] == 0.0 {
                excluded += 1;
                continue;
            }
            vals.push((flats[alpha].dot(&flats[beta]) / (norms[alpha] * norms[beta])).abs());
        }
    }
    if vals.is_empty() {
        return Err(Error::Numerical(
            "all model pairs excluded (zero gradients)".into(),
        ));
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    Ok(GradCosineStats {
        mean,
        std: var.sqrt(),
        n_pairs: vals.len(),
        n_excluded: excluded,
    })
}

/// Histogram of per-(layer, model) shared-weight gradient norms in log-spaced
/// bins, plus the max/min spread of total per-model norms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradNormHist {
    /// ‖∇_{W^l} L_α‖ indexed by (layer, model).
    pub norms: Vec<Vec<f64>>,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Norms that were exactly zero (not representable in log bins).
    pub zero_count: usize,
    /// max_α / min_α of the total per-model gradient norm.
    pub model_spread: f64,
}

pub fn grad_norm_hist(
    params: &EnsembleParams,
    arch: &ArchSpec,
    batch: &Batch,
    loss_kind: LossKind,
    bins: usize,
) -> Result<GradNormHist> {
    if bins == 0 {
        return Err(Error::InvalidSpec("need bins >= 1".into()));
    }
    let g = grads(params, arch, batch, loss_kind)?;
    let n_layers = arch.depth() + 1;
    let m = arch.n_models;
    let mut norms = vec![vec![0.0; m]; n_layers];
    let mut totals = vec![0.0; m];
    for (alpha, mg) in g.per_model.iter().enumerate() {
        for (l, w) in mg.weights.iter().enumerate() {
            let sq: f64 = w.iter().map(|v| v * v).sum();
            norms[l][alpha] = sq.sqrt();
            totals[alpha] += sq;
        }
    }
    let totals: Vec<f64> = totals.iter().map(|v| v.sqrt()).collect();

    let positives: Vec<f64> = norms
        .iter()
        .flatten()
        .copied()
        .filter(|v| *v > 0.0)
        .collect();
    let zero_count = n_layers * m - positives.len();
    let (bin_edges, counts) = if positives.is_empty() {
        (vec![], vec![0; bins])
    } else {
        let lo = positives.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = positives.iter().cloned().fold(0.0f64, f64::max) * (1.0 + 1e-12);
        let log_lo = lo.ln();
        let log_w = ((hi.ln() - log_lo) / bins as f64).max(1e-12);
        let edges: Vec<f64> = (0..=bins).map(|b| (log_lo + b as f64 * log_w).exp()).collect();
        let mut counts = vec![0usize; bins];
        for v in &positives {
            let b = (((v.ln() - log_lo) / log_w).floor() as usize).min(bins - 1);
            counts[b] += 1;
        }
        (edges, counts)
    };

    let max = totals.iter().cloned().fold(0.0f64, f64::max);
    let min = totals.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(GradNormHist {
        norms,
        bin_edges,
        counts,
        zero_count,
        model_spread: if min > 0.0 { max / min } else { f64::INFINITY },
    })
}

/// Mean pairwise Pearson correlation of the correct/incorrect indicator
/// vectors 1{argmax f_α(x) = label} over model pairs α < β. Models with a
/// constant indicator are excluded pairwise, with the count reported.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinCorrStats {
    pub mean: f64,
    pub n_pairs: usize,
    pub n_excluded: usize,
}

pub fn binarized_correlation(
    predictions: &Array3<f64>,
    labels: &[usize],
) -> Result<BinCorrStats> {
    let (m, n, _c) = predictions.dim();
    if m < 2 || n < 2 || labels.len() != n {
        return Err(Error::InvalidSpec(
            "need >= 2 models, >= 2 points, matching labels".into(),
        ));
    }
    let mut indicators = Array2::<f64>::zeros((m, n));
    for alpha in 0..m {
        for p in 0..n {
            let row = predictions.index_axis(Axis(0), alpha);
            let row = row.index_axis(Axis(0), p);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            indicators[[alpha, p]] = if best == labels[p] { 1.0 } else { 0.0 };
        }
    }
    let means: Vec<f64> = (0..m)
        .map(|a| indicators.row(a).sum() / n as f64)
        .collect();
    let stds: Vec<f64> = (0..m)
        .map(|a| {
            (indicators
                .row(a)
                .iter()
                .map(|v| (v - means[a]) * (v - means[a]))
                .sum::<f64>()
                / n as f64)
                .sqrt()
        })
        .collect();
    let mut vals = Vec::new();
    let mut excluded = 0usize;
    for alpha in 0..m {
        for beta in (alpha + 1)..m {
            if stds[alpha] == 0.0 || stds[beta] == 0.0 {
                excluded += 1;
                continue;
            }
            let cov = indicators
                .row(alpha)
                .iter()
                .zip(indicators.row(beta).iter())
                .map(|(a, b)| (a - means[alpha]) * (b - means[beta]))
                .sum::<f64>()
                / n as f64;
            vals.push(cov / (stds[alpha] * stds[beta]));
        }
    }
    if vals.is_empty() {
        return Err(Error::Numerical(
            "all pairs excluded (constant indicators)".into(),
        ));
    }
    Ok(BinCorrStats {
        mean: vals.iter().sum::<f64>() / vals.len() as f64,
        n_pairs: vals.len(),
        n_excluded: excluded,
    })
}
