//! Modulated forward pass and the fused last-layer-dropout inference path.

use super::{ArchSpec, EnsembleParams, ModulationSpec};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

/// Everything the backward pass needs, for one model.
#[derive(Debug, Clone)]
pub struct ModelCache {
    /// x^0 after input modulation (B, N_0).
    pub x0: Array2<f64>,
    /// Raw inputs (B, N_0); equals x0 when no input modulation.
    pub raw: Array2<f64>,
    /// Pre-activations z^l per hidden layer (B, N_l).
    pub zs: Vec<Array2<f64>>,
    /// Modulated pre-activations a^l = v^l ⊙ z^l.
    pub aas: Vec<Array2<f64>>,
    /// Activation values h^l = φ(a^l).
    pub hs: Vec<Array2<f64>>,
    /// Layer outputs x^l = u^l ⊙ h^l.
    pub xs: Vec<Array2<f64>>,
    /// Final pre-activation z^{L+1} (B, C).
    pub out_pre: Array2<f64>,
    /// Model output f (B, C), after any output modulation.
    pub out: Array2<f64>,
}

/// Per-model caches for a batch of inputs.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub per_model: Vec<ModelCache>,
}

impl ForwardCache {
    /// Outputs as (M, B, C).
    pub fn outputs(&self) -> Vec<ArrayView2<'_, f64>> {
        self.per_model.iter().map(|c| c.out.view()).collect()
    }
}

fn mod_row<'a>(mods: &'a Option<Array2<f64>>, alpha: usize) -> Option<ArrayView1<'a, f64>> {
    mods.as_ref().map(|m| m.row(alpha))
}

fn scale_rows(x: &mut Array2<f64>, row: ArrayView1<'_, f64>) {
    for mut r in x.axis_iter_mut(Axis(0)) {
        r *= &row;
    }
}

fn check_shapes(params: &EnsembleParams, arch: &ArchSpec, inputs: &ArrayView2<'_, f64>) -> Result<()> {
    if inputs.ncols() != arch.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "input dim {} != arch input dim {}",
            inputs.ncols(),
            arch.input_dim
        )));
    }
    let widths = arch.widths();
    if params.weights.len() != widths.len() - 1 {
        return Err(Error::DimensionMismatch(format!(
            "params have {} weight layers, arch wants {}",
            params.weights.len(),
            widths.len() - 1
        )));
    }
    for (l, w) in params.weights.iter().enumerate() {
        if w.nrows() != widths[l] || w.ncols() != widths[l + 1] {
            return Err(Error::DimensionMismatch(format!(
                "weight layer {} has shape {:?}, expected ({}, {})",
                l + 1,
                w.dim(),
                widths[l],
                widths[l + 1]
            )));
        }
    }
    Ok(())
}

/// Forward pass for one model over a batch, building the cache.
pub(crate) fn forward_model(
    params: &EnsembleParams,
    arch: &ArchSpec,
    inputs: ArrayView2<'_, f64>,
    alpha: usize,
) -> ModelCache {
    let act = arch.activation;
    let raw = inputs.to_owned();
    let mut x0 = raw.clone();
    if let Some(u0) = mod_row(&params.input_mods, alpha) {
        scale_rows(&mut x0, u0);
    }

    let depth = arch.depth();
    let mut zs = Vec::with_capacity(depth);
    let mut aas = Vec::with_capacity(depth);
    let mut hs = Vec::with_capacity(depth);
    let mut xs = Vec::with_capacity(depth);

    let mut cur = x0.clone();
    for l in 1..=depth {
        let z = cur.dot(&params.weights[l - 1]) * arch.scale(l);
        let mut a = z.clone();
        if let Some(v) = mod_row(&params.pre_mods[l - 1], alpha) {
            scale_rows(&mut a, v);
        }
        let h = a.mapv(|t| act.apply(t));
        let mut x = h.clone();
        if let Some(u) = mod_row(&params.post_mods[l - 1], alpha) {
            scale_rows(&mut x, u);
        }
        zs.push(z);
        aas.push(a);
        hs.push(h);
        cur = x.clone();
        xs.push(x);
    }

    let out_pre = cur.dot(&params.weights[depth]) * arch.scale(depth + 1);
    let mut out = out_pre.clone();
    if let Some(vout) = mod_row(&params.output_mods, alpha) {
        scale_rows(&mut out, vout);
    }

    ModelCache {
        x0,
        raw,
        zs,
        aas,
        hs,
        xs,
        out_pre,
        out,
    }
}

/// Forward pass over a batch for every model, keeping per-layer caches.
pub fn forward_cached(
    params: &EnsembleParams,
    arch: &ArchSpec,
    inputs: ArrayView2<'_, f64>,
) -> Result<ForwardCache> {
    check_shapes(params, arch, &inputs)?;
    let per_model = (0..arch.n_models)
        .map(|alpha| forward_model(params, arch, inputs, alpha))
        .collect();
    Ok(ForwardCache { per_model })
}

/// Per-model outputs f_α(x_b) as an (M, B, C) stack.
pub fn forward_batch(
    params: &EnsembleParams,
    arch: &ArchSpec,
    inputs: ArrayView2<'_, f64>,
) -> Result<Vec<Array2<f64>>> {
    check_shapes(params, arch, &inputs)?;
    Ok((0..arch.n_models)
        .map(|alpha| forward_model(params, arch, inputs, alpha).out)
        .collect())
}

/// Per-model outputs f_α(x) for a single input, shape (M, output_dim).
pub fn forward(
    params: &EnsembleParams,
    arch: &ArchSpec,
    x: ArrayView1<'_, f64>,
) -> Result<Array2<f64>> {
    let input = x.insert_axis(ndarray::Axis(0));
    let outs = forward_batch(params, arch, input)?;
    let mut f = Array2::zeros((arch.n_models, arch.output_dim));
    for (alpha, o) in outs.iter().enumerate() {
        f.row_mut(alpha).assign(&o.row(0));
    }
    Ok(f)
}

fn deterministic_value(spec: &Option<ModulationSpec>, what: &str) -> Result<f64> {
    match spec {
        None => Ok(1.0),
        Some(s) => match s.kind {
            super::ModulationKind::Deterministic(c) => Ok(c),
            _ => Err(Error::InvalidSpec(format!(
                "fused LLD path requires deterministic or absent {what}"
            ))),
        },
    }
}

/// Check the LLD shape: per-model randomness only in the last hidden layer's
/// post-modulation; everything else deterministic. Returns the deterministic
/// scalars for (input, per-layer pre, per-layer post except L, output).
fn lld_layout(arch: &ArchSpec) -> Result<(f64, Vec<f64>, Vec<f64>, f64)> {
    let depth = arch.depth();
    if depth == 0 {
        return Err(Error::InvalidSpec("LLD needs at least one hidden layer".into()));
    }
    let input = deterministic_value(&arch.input_mod, "input modulation")?;
    let output = deterministic_value(&arch.output_mod, "output modulation")?;
    let mut pres = Vec::with_capacity(depth);
    let mut posts = Vec::with_capacity(depth - 1);
    for (i, layer) in arch.layers.iter().enumerate() {
        pres.push(deterministic_value(&layer.pre_mod, "pre-activation modulation")?);
        if i + 1 < depth {
            posts.push(deterministic_value(
                &layer.post_mod,
                "post-activation modulation below the last hidden layer",
            )?);
        }
    }
    if arch.layers[depth - 1].post_mod.is_none() {
        return Err(Error::InvalidSpec(
            "LLD needs a post-activation modulation at the last hidden layer".into(),
        ));
    }
    Ok((input, pres, posts, output))
}

/// Shared feature-map pass up to h^L = φ(v^L z^L), with all deterministic
/// modulation scalars folded in. Used by both fused LLD paths.
pub(crate) fn lld_shared_features(
    params: &EnsembleParams,
    arch: &ArchSpec,
    inputs: ArrayView2<'_, f64>,
) -> Result<(Vec<Array2<f64>>, Vec<Array2<f64>>, Array2<f64>, f64)> {
    check_shapes(params, arch, &inputs)?;
    let (c_in, pres, posts, c_out) = lld_layout(arch)?;
    let act = arch.activation;
    let depth = arch.depth();

    let mut zs = Vec::with_capacity(depth);
    let mut hs = Vec::with_capacity(depth);
    let mut cur = inputs.to_owned() * c_in;
    for l in 1..=depth {
        let z = cur.dot(&params.weights[l - 1]) * arch.scale(l);
        let h = z.mapv(|t| act.apply(pres[l - 1] * t));
        cur = if l < depth { &h * posts[l - 1] } else { h.clone() };
        zs.push(z);
        hs.push(h);
    }
    Ok((zs, hs, cur, c_out))
}

/// Single-pass LLD ensemble inference with the averaged modulation
/// ū = (1/M) Σ_α u_α: exactly the mean of the per-model outputs, computed at
/// roughly single-model cost.
pub fn lld_fused_inference(
    params: &EnsembleParams,
    arch: &ArchSpec,
    x: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    let input = x.insert_axis(ndarray::Axis(0));
    let depth = arch.depth();
    let (_, _, h_last, c_out) = lld_shared_features(params, arch, input)?;
    let u = params.post_mods[depth - 1]
        .as_ref()
        .ok_or_else(|| Error::InvalidSpec("missing last-layer masks".into()))?;
    let u_bar = u.mean_axis(Axis(0)).unwrap();
    let mut features = h_last;
    scale_rows(&mut features, u_bar.view());
    let out = features.dot(&params.weights[depth]) * arch.scale(depth + 1) * c_out;
    Ok(out.row(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, Activation, ArchSpec, LayerSpec, ModulationSpec, Parametrization};
    use crate::numerics::Seed;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn zero_weights_give_zero_outputs() {
        let arch = ArchSpec::uniform(3, 2, 4, 2, Activation::Relu, 2, None, None);
        let mut p = init_params(&arch, Seed::new(1)).unwrap();
        for w in &mut p.weights {
            w.fill(0.0);
        }
        let f = forward(&p, &arch, array![1.0, -2.0, 0.5].view()).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_modulated_layer() {
        // N0=2, L=1, N1=1, C=1; x=(1,1), W1=(1,1)ᵀ, u=2, v=0.5, ReLU, W2=(1):
        // z1 = sqrt(2), x1 = 2 * relu(sqrt(2)/2) = sqrt(2), f = sqrt(2).
        let arch = ArchSpec {
            input_dim: 2,
            layers: vec![LayerSpec::with_mods(
                1,
                Some(ModulationSpec::deterministic(0.5)),
                Some(ModulationSpec::deterministic(2.0)),
            )],
            output_dim: 1,
            activation: Activation::Relu,
            parametrization: Parametrization::Ntk,
            n_models: 1,
            input_mod: None,
            output_mod: None,
        };
        let mut p = init_params(&arch, Seed::new(0)).unwrap();
        p.weights[0] = array![[1.0], [1.0]];
        p.weights[1] = array![[1.0]];
        let f = forward(&p, &arch, array![1.0, 1.0].view()).unwrap();
        assert_abs_diff_eq!(f[[0, 0]], 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn identity_deterministic_models_coincide() {
        let arch = ArchSpec::uniform(
            4,
            2,
            6,
            3,
            Activation::Identity,
            5,
            Some(ModulationSpec::deterministic(1.0)),
            Some(ModulationSpec::deterministic(1.0)),
        );
        let p = init_params(&arch, Seed::new(3)).unwrap();
        let f = forward(&p, &arch, array![0.3, -1.0, 2.0, 0.7].view()).unwrap();
        for alpha in 1..5 {
            for c in 0..3 {
                assert_abs_diff_eq!(f[[alpha, c]], f[[0, c]], epsilon = 0.0);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let arch = ArchSpec::uniform(3, 1, 4, 1, Activation::Relu, 1, None, None);
        let p = init_params(&arch, Seed::new(0)).unwrap();
        assert!(forward(&p, &arch, array![1.0, 2.0].view()).is_err());
    }

    #[test]
    fn no_hidden_layer_is_plain_linear_map() {
        let arch = ArchSpec {
            input_dim: 4,
            layers: vec![],
            output_dim: 1,
            activation: Activation::Relu,
            parametrization: Parametrization::Ntk,
            n_models: 1,
            input_mod: None,
            output_mod: None,
        };
        let p = init_params(&arch, Seed::new(2)).unwrap();
        let x = array![1.0, -0.5, 2.0, 0.1];
        let f = forward(&p, &arch, x.view()).unwrap();
        let expect = x.dot(&p.weights[0]) / 2.0;
        assert_abs_diff_eq!(f[[0, 0]], expect[0], epsilon = 1e-15);
    }

    #[test]
    fn lld_fused_equals_per_model_mean() {
        let mut arch = ArchSpec::uniform(3, 2, 8, 2, Activation::Relu, 8, None, None);
        arch.layers[1].post_mod = Some(ModulationSpec::gaussian(0.0, 1.0, false));
        let p = init_params(&arch, Seed::new(4)).unwrap();
        let x = array![0.2, -1.3, 0.8];
        let fused = lld_fused_inference(&p, &arch, x.view()).unwrap();
        let per_model = forward(&p, &arch, x.view()).unwrap();
        let mean = per_model.mean_axis(Axis(0)).unwrap();
        for c in 0..2 {
            assert_abs_diff_eq!(fused[c], mean[c], epsilon = 1e-12);
        }
    }

    #[test]
    fn lld_rejects_random_mods_elsewhere() {
        let mut arch = ArchSpec::uniform(3, 2, 8, 1, Activation::Relu, 4, None, None);
        arch.layers[1].post_mod = Some(ModulationSpec::gaussian(0.0, 1.0, false));
        arch.layers[0].pre_mod = Some(ModulationSpec::gaussian(0.0, 1.0, false));
        let p = init_params(&arch, Seed::new(4)).unwrap();
        let x = array![0.2, -1.3, 0.8];
        assert!(lld_fused_inference(&p, &arch, x.view()).is_err());
    }
}
