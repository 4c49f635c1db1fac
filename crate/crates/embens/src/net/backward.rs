//! Manual reverse-mode differentiation of the modulated forward pass, the
//! per-model losses of the update rules, and the fused LLD training path.

use super::forward::{forward_cached, lld_shared_features, ModelCache};
use super::{ArchSpec, Batch, EnsembleParams, LossKind, Targets, TrainConfig};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, Axis};

/// Gradients for one ensemble model. Weight gradients are always present;
/// modulation slots are `Some` only when that modulation exists and is
/// trainable (the remaining slots are absent by the update rules).
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub weights: Vec<Array2<f64>>,
    pub pre_mods: Vec<Option<Array1<f64>>>,
    pub post_mods: Vec<Option<Array1<f64>>>,
    pub input_mods: Option<Array1<f64>>,
    pub output_mods: Option<Array1<f64>>,
}

impl ModelGrads {
    /// Flattened shared-weight gradient (layer by layer, row-major).
    pub fn flat_weights(&self) -> Array1<f64> {
        let total: usize = self.weights.iter().map(|w| w.len()).sum();
        let mut out = Array1::zeros(total);
        let mut at = 0;
        for w in &self.weights {
            for &v in w.iter() {
                out[at] = v;
                at += 1;
            }
        }
        out
    }

    /// Flattened trainable-modulation gradient (fixed slot order).
    pub fn flat_mods(&self) -> Array1<f64> {
        let mut vals = Vec::new();
        if let Some(g) = &self.input_mods {
            vals.extend(g.iter().copied());
        }
        for (pre, post) in self.pre_mods.iter().zip(&self.post_mods) {
            if let Some(g) = pre {
                vals.extend(g.iter().copied());
            }
            if let Some(g) = post {
                vals.extend(g.iter().copied());
            }
        }
        if let Some(g) = &self.output_mods {
            vals.extend(g.iter().copied());
        }
        Array1::from(vals)
    }

    pub fn squared_norm(&self) -> f64 {
        let w: f64 = self
            .weights
            .iter()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum();
        let m: f64 = self
            .pre_mods
            .iter()
            .chain(self.post_mods.iter())
            .filter_map(|g| g.as_ref())
            .chain(self.input_mods.iter())
            .chain(self.output_mods.iter())
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum();
        w + m
    }
}

/// Per-model gradients of the per-model losses L_α.
#[derive(Debug, Clone)]
pub struct EnsembleGrads {
    pub per_model: Vec<ModelGrads>,
}

fn mod_row<'a>(mods: &'a Option<Array2<f64>>, alpha: usize) -> Option<ArrayView1<'a, f64>> {
    mods.as_ref().map(|m| m.row(alpha))
}

fn trainable(spec: &Option<super::ModulationSpec>) -> bool {
    spec.as_ref().map(|s| s.trainable).unwrap_or(false)
}

fn sum_rows(x: &Array2<f64>) -> Array1<f64> {
    x.sum_axis(Axis(0))
}

/// Reverse pass for one model given `upstream = ∂loss/∂f` of shape (B, C).
/// `keep_all_mod_grads` bypasses the trainability filter (used by the
/// dynamics-side diagnostics that need raw ∂f/∂u inner products).
pub(crate) fn backward_model(
    params: &EnsembleParams,
    arch: &ArchSpec,
    cache: &ModelCache,
    alpha: usize,
    upstream: &Array2<f64>,
    keep_all_mod_grads: bool,
) -> ModelGrads {
    let act = arch.activation;
    let depth = arch.depth();
    let keep = |t: bool| t || keep_all_mod_grads;

    let mut g = upstream.clone();
    let output_mods = if params.output_mods.is_some() {
        let grad = sum_rows(&(&g * &cache.out_pre));
        let v = mod_row(&params.output_mods, alpha).unwrap();
        for mut row in g.axis_iter_mut(Axis(0)) {
            row *= &v;
        }
        keep(trainable(&arch.output_mod)).then_some(grad)
    } else {
        None
    };

    let mut weights = vec![Array2::zeros((0, 0)); depth + 1];
    let mut pre_mods = vec![None; depth];
    let mut post_mods = vec![None; depth];

    // Output layer weights.
    let x_last = if depth == 0 { &cache.x0 } else { &cache.xs[depth - 1] };
    weights[depth] = x_last.t().dot(&g) * arch.scale(depth + 1);
    let mut gx = g.dot(&params.weights[depth].t()) * arch.scale(depth + 1);

    for l in (1..=depth).rev() {
        let i = l - 1;
        let layer = &arch.layers[i];
        // x^l = u ⊙ h, h = φ(a), a = v ⊙ z.
        if params.post_mods[i].is_some() {
            let grad = sum_rows(&(&gx * &cache.hs[i]));
            let u = mod_row(&params.post_mods[i], alpha).unwrap();
            for mut row in gx.axis_iter_mut(Axis(0)) {
                row *= &u;
            }
            if keep(trainable(&layer.post_mod)) {
                post_mods[i] = Some(grad);
            }
        }
        let mut ga = gx;
        ga.zip_mut_with(&cache.aas[i], |g, &a| *g *= act.deriv(a));
        if params.pre_mods[i].is_some() {
            let grad = sum_rows(&(&ga * &cache.zs[i]));
            let v = mod_row(&params.pre_mods[i], alpha).unwrap();
            for mut row in ga.axis_iter_mut(Axis(0)) {
                row *= &v;
            }
            if keep(trainable(&layer.pre_mod)) {
                pre_mods[i] = Some(grad);
            }
        }
        let below = if i == 0 { &cache.x0 } else { &cache.xs[i - 1] };
        weights[i] = below.t().dot(&ga) * arch.scale(l);
        gx = ga.dot(&params.weights[i].t()) * arch.scale(l);
    }

    let input_mods = if params.input_mods.is_some() {
        let grad = sum_rows(&(&gx * &cache.raw));
        keep(trainable(&arch.input_mod)).then_some(grad)
    } else {
        None
    };

    ModelGrads {
        weights,
        pre_mods,
        post_mods,
        input_mods,
        output_mods,
    }
}

/// Softmax probabilities row-wise, with the max-shift for stability.
pub(crate) fn softmax(f: &Array2<f64>) -> Array2<f64> {
    let mut p = f.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Mean single-point loss of one model's outputs against the batch targets.
pub(crate) fn mean_loss(outputs: &Array2<f64>, targets: &Targets, loss_kind: LossKind) -> f64 {
    let b = outputs.nrows() as f64;
    match (loss_kind, targets) {
        (LossKind::Mse, Targets::Regression(ys)) => {
            outputs
                .column(0)
                .iter()
                .zip(ys)
                .map(|(f, y)| (f - y) * (f - y) / 2.0)
                .sum::<f64>()
                / b
        }
        (LossKind::CrossEntropy, Targets::Classes(cs)) => {
            let mut total = 0.0;
            for (row, &c) in outputs.axis_iter(Axis(0)).zip(cs) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                total += logsum - row[c];
            }
            total / b
        }
        (LossKind::Mse, Targets::Classes(_)) => {
            panic!("MSE loss needs regression targets")
        }
        (LossKind::CrossEntropy, Targets::Regression(_)) => {
            panic!("cross-entropy loss needs class targets")
        }
    }
}

/// ∂(mean loss)/∂f for one model, shape (B, C): (f - y)/B for MSE,
/// (softmax - onehot)/B for cross-entropy.
pub(crate) fn loss_grad(outputs: &Array2<f64>, targets: &Targets, loss_kind: LossKind) -> Array2<f64> {
    let b = outputs.nrows() as f64;
    match (loss_kind, targets) {
        (LossKind::Mse, Targets::Regression(ys)) => {
            let mut g = outputs.clone();
            for (mut row, &y) in g.axis_iter_mut(Axis(0)).zip(ys) {
                row[0] = (row[0] - y) / b;
            }
            g
        }
        (LossKind::CrossEntropy, Targets::Classes(cs)) => {
            let mut g = softmax(outputs);
            for (mut row, &c) in g.axis_iter_mut(Axis(0)).zip(cs) {
                row[c] -= 1.0;
            }
            g.mapv_inplace(|v| v / b);
            g
        }
        _ => panic!("loss kind and target kind disagree"),
    }
}

fn check_loss_targets(batch: &Batch, loss_kind: LossKind) -> Result<()> {
    match (loss_kind, &batch.targets) {
        (LossKind::Mse, Targets::Regression(_)) => Ok(()),
        (LossKind::CrossEntropy, Targets::Classes(_)) => Ok(()),
        _ => Err(Error::InvalidSpec(
            "loss kind and target kind disagree (MSE needs regression targets, cross-entropy needs classes)"
                .into(),
        )),
    }
}

/// Per-model empirical losses L_α = (1/B) Σ_b L(f_α(x_b), y_b).
pub fn per_model_loss(
    params: &EnsembleParams,
    arch: &ArchSpec,
    batch: &Batch,
    loss_kind: LossKind,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::InvalidSpec("empty batch".into()));
    }
    batch.validate(arch)?;
    check_loss_targets(batch, loss_kind)?;
    let cache = forward_cached(params, arch, batch.inputs.view())?;
    Ok(cache
        .per_model
        .iter()
        .map(|c| mean_loss(&c.out, &batch.targets, loss_kind))
        .collect())
}

/// Exact reverse-mode gradients of every per-model loss, with respect to the
/// shared weights and the trainable modulations of that model.
pub fn grads(
    params: &EnsembleParams,
    arch: &ArchSpec,
    batch: &Batch,
    loss_kind: LossKind,
) -> Result<EnsembleGrads> {
    Ok(loss_and_grads(params, arch, batch, loss_kind)?.1)
}

/// Losses and gradients from a single forward/backward sweep.
pub fn loss_and_grads(
    params: &EnsembleParams,
    arch: &ArchSpec,
    batch: &Batch,
    loss_kind: LossKind,
) -> Result<(Vec<f64>, EnsembleGrads)> {
    if batch.is_empty() {
        return Err(Error::InvalidSpec("empty batch".into()));
    }
    batch.validate(arch)?;
    check_loss_targets(batch, loss_kind)?;
    let cache = forward_cached(params, arch, batch.inputs.view())?;
    let mut losses = Vec::with_capacity(arch.n_models);
    let mut per_model = Vec::with_capacity(arch.n_models);
    for (alpha, c) in cache.per_model.iter().enumerate() {
        losses.push(mean_loss(&c.out, &batch.targets, loss_kind));
        let upstream = loss_grad(&c.out, &batch.targets, loss_kind);
        per_model.push(backward_model(params, arch, c, alpha, &upstream, false));
    }
    Ok((losses, EnsembleGrads { per_model }))
}

/// Result of the fused LLD training computation: the scaled ensemble loss
/// (γ(M)/M) Σ_α L_α and its gradient with respect to the shared weights,
/// equal to the accumulated gradient the shared-weight SGD step consumes.
#[derive(Debug, Clone)]
pub struct LldFusedGrads {
    pub loss: f64,
    pub per_model_loss: Vec<f64>,
    pub weight_grads: Vec<Array2<f64>>,
}

/// Fused LLD training pass: all M model outputs from one shared feature-map
/// pass, one shared backward pass. Requires the LLD layout (random masks only
/// at the last hidden layer's post slot) with non-trainable masks, so the
/// shared-weight gradient is the whole gradient.
pub fn lld_fused_train_loss(
    params: &EnsembleParams,
    arch: &ArchSpec,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<LldFusedGrads> {
    if batch.is_empty() {
        return Err(Error::InvalidSpec("empty batch".into()));
    }
    batch.validate(arch)?;
    check_loss_targets(batch, cfg.loss_kind)?;
    let depth = arch.depth();
    let (zs, hs, h_last, c_out) = lld_shared_features(params, arch, batch.inputs.view())?;
    let mask_spec = arch.layers[depth - 1].post_mod.as_ref().unwrap();
    if mask_spec.trainable {
        return Err(Error::InvalidSpec(
            "fused LLD training expects non-trainable last-layer masks".into(),
        ));
    }
    let masks = params.post_mods[depth - 1].as_ref().unwrap();
    let m = arch.n_models;
    let gamma_over_m = cfg.gamma_mode.gamma(m) / m as f64;
    let scale_out = arch.scale(depth + 1);
    let w_out = &params.weights[depth];

    let mut loss = 0.0;
    let mut per_model_loss = Vec::with_capacity(m);
    let mut g_wout = Array2::<f64>::zeros(w_out.dim());
    let mut g_h = Array2::<f64>::zeros(h_last.dim());
    for alpha in 0..m {
        let u = masks.row(alpha);
        let mut feats = h_last.clone();
        for mut row in feats.axis_iter_mut(Axis(0)) {
            row *= &u;
        }
        let out = feats.dot(w_out) * (scale_out * c_out);
        let l_alpha = mean_loss(&out, &batch.targets, cfg.loss_kind);
        per_model_loss.push(l_alpha);
        loss += gamma_over_m * l_alpha;
        let mut g = loss_grad(&out, &batch.targets, cfg.loss_kind);
        g.mapv_inplace(|v| v * gamma_over_m * scale_out * c_out);
        g_wout = g_wout + feats.t().dot(&g);
        let mut gxl = g.dot(&w_out.t());
        for mut row in gxl.axis_iter_mut(Axis(0)) {
            row *= &u;
        }
        g_h += &gxl;
    }

    // Shared backward through the feature map.
    let act = arch.activation;
    let (c_in, pres, posts) = {
        // The layout was validated inside lld_shared_features.
        let det = |spec: &Option<super::ModulationSpec>| -> f64 {
            match spec {
                None => 1.0,
                Some(s) => match s.kind {
                    super::ModulationKind::Deterministic(c) => c,
                    _ => 1.0,
                },
            }
        };
        let pres: Vec<f64> = arch.layers.iter().map(|l| det(&l.pre_mod)).collect();
        let posts: Vec<f64> = arch
            .layers
            .iter()
            .take(depth - 1)
            .map(|l| det(&l.post_mod))
            .collect();
        (det(&arch.input_mod), pres, posts)
    };

    let mut weight_grads = vec![Array2::zeros((0, 0)); depth + 1];
    weight_grads[depth] = g_wout;
    let mut gx = g_h;
    for l in (1..=depth).rev() {
        let i = l - 1;
        if l < depth {
            gx.mapv_inplace(|v| v * posts[i]);
        }
        let mut ga = gx;
        ga.zip_mut_with(&zs[i], |g, &z| *g *= pres[i] * act.deriv(pres[i] * z));
        let below: Array2<f64> = if i == 0 {
            batch.inputs.to_owned() * c_in
        } else {
            &hs[i - 1] * posts[i - 1]
        };
        weight_grads[i] = below.t().dot(&ga) * arch.scale(l);
        gx = ga.dot(&params.weights[i].t()) * arch.scale(l);
    }

    Ok(LldFusedGrads {
        loss,
        per_model_loss,
        weight_grads,
    })
}
