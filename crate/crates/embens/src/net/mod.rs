//! Finite-width embedded-ensemble networks.
//!
//! An ensemble of `M` models shares the weight matrices `W^l` of a reference
//! network and differs only in per-model modulation vectors: `v^l` scales the
//! pre-activation, `u^l` scales the activation output,
//!
//! ```text
//! z^l = (x^{l-1} W^l) / sqrt(N_{l-1})        (no 1/sqrt under standard param)
//! x^l = u^l ⊙ φ(v^l ⊙ z^l)
//! ```
//!
//! with no bias terms anywhere. The output is the last pre-activation.
//! Trainable modulations follow their own learning rate; the shared-weight
//! update accumulates per-model gradients with the scaling `γ(M)/M`.

mod backward;
mod checkpoint;
mod forward;
mod train;

pub use backward::{
    grads, lld_fused_train_loss, per_model_loss, EnsembleGrads, LldFusedGrads, ModelGrads,
};
pub use backward::loss_and_grads;
pub(crate) use backward::{backward_model, softmax as softmax_probs};
pub use forward::ModelCache;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use forward::{forward, forward_batch, forward_cached, lld_fused_inference, ForwardCache};
pub use train::{
    evaluate, sgd_step, train, DivergenceRecord, EpochRecord, EvalMetrics, TrainHistory,
    TrainResult,
};

use crate::error::{Error, Result};
use crate::numerics::{split_rng, Seed};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Pointwise activation, fixed across layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Sigmoid,
    Erf,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Erf => libm::erf(z),
        }
    }

    #[inline]
    pub fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s)
            }
            Activation::Erf => 2.0 / std::f64::consts::PI.sqrt() * (-z * z).exp(),
        }
    }

    /// Points where the activation or its derivative is non-smooth; the
    /// kernel quadrature splits its panels there.
    pub fn breakpoints(self) -> &'static [f64] {
        match self {
            Activation::Relu => &[0.0],
            _ => &[],
        }
    }
}

/// Weight initialization / forward-scaling convention.
///
/// `Ntk` carries explicit 1/sqrt(N) factors in the forward pass with unit
/// weight variance; `Standard` folds the factor into the initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parametrization {
    Ntk,
    Standard,
}

/// Distribution family of one modulation slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModulationKind {
    Deterministic(f64),
    Gaussian { mean: f64, variance: f64 },
    Discrete { values: Vec<f64>, probs: Vec<f64> },
}

/// A modulation slot: its initialization distribution and whether gradient
/// descent updates it (the paper's T(u)/T(v) flags).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulationSpec {
    pub kind: ModulationKind,
    #[serde(default)]
    pub trainable: bool,
}

impl ModulationSpec {
    pub fn deterministic(c: f64) -> Self {
        ModulationSpec {
            kind: ModulationKind::Deterministic(c),
            trainable: false,
        }
    }

    pub fn gaussian(mean: f64, variance: f64, trainable: bool) -> Self {
        ModulationSpec {
            kind: ModulationKind::Gaussian { mean, variance },
            trainable,
        }
    }

    /// The shifted family N(p, 1-p²): p = 0 is a standard Gaussian, p = 1 is
    /// the trivial all-ones modulation.
    pub fn shifted(p: f64, trainable: bool) -> Self {
        Self::gaussian(p, 1.0 - p * p, trainable)
    }

    /// Symmetric ternary mask {-1, 0, 1} with P(±1) = q/2 each.
    pub fn symmetric_ternary(q: f64) -> Self {
        ModulationSpec {
            kind: ModulationKind::Discrete {
                values: vec![-1.0, 0.0, 1.0],
                probs: vec![q / 2.0, 1.0 - q, q / 2.0],
            },
            trainable: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            ModulationKind::Deterministic(c) => {
                if !c.is_finite() {
                    return Err(Error::InvalidSpec(
                        "deterministic modulation not finite".into(),
                    ));
                }
            }
            ModulationKind::Gaussian { mean, variance } => {
                if !mean.is_finite() || !variance.is_finite() || *variance < 0.0 {
                    return Err(Error::InvalidSpec(format!(
                        "gaussian modulation needs finite mean and variance >= 0, got ({mean}, {variance})"
                    )));
                }
            }
            ModulationKind::Discrete { values, probs } => {
                if values.is_empty() || values.len() != probs.len() {
                    return Err(Error::InvalidSpec(
                        "discrete modulation needs matching nonempty values/probs".into(),
                    ));
                }
                if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
                    return Err(Error::InvalidSpec(
                        "discrete probs must be nonnegative".into(),
                    ));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidSpec(format!(
                        "discrete probs must sum to 1, got {total}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// First two moments (m1, m2), exact per family.
    pub fn raw_moments(&self) -> (f64, f64) {
        match &self.kind {
            ModulationKind::Deterministic(c) => (*c, c * c),
            ModulationKind::Gaussian { mean, variance } => (*mean, variance + mean * mean),
            ModulationKind::Discrete { values, probs } => {
                let m1 = values.iter().zip(probs).map(|(v, p)| v * p).sum();
                let m2 = values.iter().zip(probs).map(|(v, p)| v * v * p).sum();
                (m1, m2)
            }
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match &self.kind {
            ModulationKind::Deterministic(c) => *c,
            ModulationKind::Gaussian { mean, variance } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + variance.sqrt() * z
            }
            ModulationKind::Discrete { values, probs } => {
                let mut t: f64 = rng.random();
                for (v, p) in values.iter().zip(probs) {
                    if t < *p {
                        return *v;
                    }
                    t -= p;
                }
                *values.last().unwrap()
            }
        }
    }

    /// True when every draw equals 1 (the "absent modulation" value).
    pub fn is_deterministic_one(&self) -> bool {
        matches!(self.kind, ModulationKind::Deterministic(c) if c == 1.0)
    }

    /// True when all models receive identical values.
    pub fn is_deterministic(&self) -> bool {
        matches!(self.kind, ModulationKind::Deterministic(_))
    }
}

/// One hidden layer: its width and optional pre-/post-activation modulations.
/// An absent modulation behaves as deterministic(1), non-trainable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    #[serde(default)]
    pub pre_mod: Option<ModulationSpec>,
    #[serde(default)]
    pub post_mod: Option<ModulationSpec>,
}

impl LayerSpec {
    pub fn plain(width: usize) -> Self {
        LayerSpec {
            width,
            pre_mod: None,
            post_mod: None,
        }
    }

    pub fn with_mods(
        width: usize,
        pre_mod: Option<ModulationSpec>,
        post_mod: Option<ModulationSpec>,
    ) -> Self {
        LayerSpec {
            width,
            pre_mod,
            post_mod,
        }
    }
}

/// Full ensemble architecture.
///
/// `layers` holds the hidden layers 1..=L; an empty list degenerates to the
/// plain linear map `f = Wᵀx / sqrt(N0)` (no modulations). Input modulations
/// (`u^0`, applied to the network input) and output modulations (`v^{L+1}`,
/// applied to the final pre-activation) are representable but default to
/// absent; the wide-width theory does not cover them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub output_dim: usize,
    pub activation: Activation,
    pub parametrization: Parametrization,
    pub n_models: usize,
    #[serde(default)]
    pub input_mod: Option<ModulationSpec>,
    #[serde(default)]
    pub output_mod: Option<ModulationSpec>,
}

impl ArchSpec {
    /// BatchEnsemble-style arch: `depth` equal-width hidden layers, the same
    /// modulation pair on every hidden layer, NTK parametrization.
    pub fn uniform(
        input_dim: usize,
        depth: usize,
        width: usize,
        output_dim: usize,
        activation: Activation,
        n_models: usize,
        pre_mod: Option<ModulationSpec>,
        post_mod: Option<ModulationSpec>,
    ) -> Self {
        ArchSpec {
            input_dim,
            layers: (0..depth)
                .map(|_| LayerSpec::with_mods(width, pre_mod.clone(), post_mod.clone()))
                .collect(),
            output_dim,
            activation,
            parametrization: Parametrization::Ntk,
            n_models,
            input_mod: None,
            output_mod: None,
        }
    }

    /// Number of hidden layers L.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Layer widths [N_0, N_1, ..., N_{L+1}].
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.layers.len() + 2);
        w.push(self.input_dim);
        w.extend(self.layers.iter().map(|l| l.width));
        w.push(self.output_dim);
        w
    }

    /// Forward-pass scaling of weight layer `l` (1-based).
    pub fn scale(&self, l: usize) -> f64 {
        match self.parametrization {
            Parametrization::Ntk => 1.0 / (self.widths()[l - 1] as f64).sqrt(),
            Parametrization::Standard => 1.0,
        }
    }

    /// Initialization std of weight layer `l` (1-based).
    pub fn weight_std(&self, l: usize) -> f64 {
        match self.parametrization {
            Parametrization::Ntk => 1.0,
            Parametrization::Standard => 1.0 / (self.widths()[l - 1] as f64).sqrt(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidSpec("zero input/output dimension".into()));
        }
        if self.n_models == 0 {
            return Err(Error::InvalidSpec("n_models must be >= 1".into()));
        }
        for layer in &self.layers {
            if layer.width == 0 {
                return Err(Error::InvalidSpec("zero layer width".into()));
            }
            if let Some(m) = &layer.pre_mod {
                m.validate()?;
            }
            if let Some(m) = &layer.post_mod {
                m.validate()?;
            }
        }
        if let Some(m) = &self.input_mod {
            m.validate()?;
        }
        if let Some(m) = &self.output_mod {
            m.validate()?;
        }
        Ok(())
    }
}

/// Parameters of an ensemble: shared weights plus per-model modulations.
/// Modulation arrays are (M, width) with one row per model; a slot is `Some`
/// exactly when the corresponding spec is present in the architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleParams {
    /// W^l with shape (N_{l-1}, N_l), l = 1..=L+1.
    pub weights: Vec<Array2<f64>>,
    /// v^l per hidden layer.
    pub pre_mods: Vec<Option<Array2<f64>>>,
    /// u^l per hidden layer.
    pub post_mods: Vec<Option<Array2<f64>>>,
    /// u^0 applied to the input.
    pub input_mods: Option<Array2<f64>>,
    /// v^{L+1} applied to the output pre-activation.
    pub output_mods: Option<Array2<f64>>,
}

impl EnsembleParams {
    /// Total scalar parameter count (shared weights + all modulations).
    pub fn n_params(&self) -> usize {
        let w: usize = self.weights.iter().map(|w| w.len()).sum();
        let m: usize = self
            .pre_mods
            .iter()
            .chain(self.post_mods.iter())
            .filter_map(|m| m.as_ref())
            .chain(self.input_mods.iter())
            .chain(self.output_mods.iter())
            .map(|m| m.len())
            .sum();
        w + m
    }
}

/// Gradient accumulation scaling γ(M) for the shared-weight update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaMode {
    One,
    M,
    Custom(f64),
}

impl GammaMode {
    pub fn gamma(&self, m: usize) -> f64 {
        match self {
            GammaMode::One => 1.0,
            GammaMode::M => m as f64,
            GammaMode::Custom(g) => *g,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// SGD hyperparameters for the update rules: per-model modulation steps at
/// rate `eta_u`, shared-weight step at `eta_w · γ(M)/M` times the accumulated
/// per-model gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta_w: f64,
    pub eta_u: f64,
    pub gamma_mode: GammaMode,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_kind: LossKind,
    /// Redraw non-trainable modulations before every forward pass during
    /// training (the classical-dropout mode); fixed masks otherwise.
    #[serde(default)]
    pub dropout_resample: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eta_w < 0.0 || self.eta_u < 0.0 {
            return Err(Error::InvalidSpec("negative learning rate".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Training/evaluation targets: scalar regression values or class indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Regression(Vec<f64>),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(v) => v.len(),
            Targets::Classes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Regression(v) => Targets::Regression(idx.iter().map(|&i| v[i]).collect()),
            Targets::Classes(v) => Targets::Classes(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// A batch of inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// (B, N_0)
    pub inputs: Array2<f64>,
    pub targets: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        if self.inputs.ncols() != arch.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "batch input dim {} != arch input dim {}",
                self.inputs.ncols(),
                arch.input_dim
            )));
        }
        if self.targets.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "batch has {} inputs but {} targets",
                self.len(),
                self.targets.len()
            )));
        }
        match &self.targets {
            Targets::Regression(_) => {
                if arch.output_dim != 1 {
                    return Err(Error::DimensionMismatch(
                        "regression targets need output_dim = 1".into(),
                    ));
                }
            }
            Targets::Classes(cs) => {
                if cs.iter().any(|c| *c >= arch.output_dim) {
                    return Err(Error::InvalidSpec("class index out of range".into()));
                }
            }
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Batch {
        let mut inputs = Array2::zeros((idx.len(), self.inputs.ncols()));
        for (row, &i) in idx.iter().enumerate() {
            inputs.row_mut(row).assign(&self.inputs.row(i));
        }
        Batch {
            inputs,
            targets: self.targets.subset(idx),
        }
    }
}

/// Stable stream ids for the modulation slots, so adding or removing one slot
/// never shifts another slot's draws.
fn mod_slot_id(layer: usize, pre: bool, depth: usize) -> u64 {
    // input_mod = 0; hidden layer l: pre = 2l-1, post = 2l; output_mod = 2L+1.
    if layer == 0 {
        0
    } else if layer == depth + 1 {
        2 * depth as u64 + 1
    } else if pre {
        2 * layer as u64 - 1
    } else {
        2 * layer as u64
    }
}

/// Draw fresh parameters: shared weights from their parametrization's
/// Gaussian, modulations i.i.d. from their specs per model and neuron.
///
/// Weight streams do not depend on `n_models` or on which modulation slots
/// are present, so ensembles of different sizes built from the same seed
/// share bit-identical reference weights.
pub fn init_params(arch: &ArchSpec, seed: Seed) -> Result<EnsembleParams> {
    arch.validate()?;
    let widths = arch.widths();
    let n_layers = widths.len() - 1;
    let m = arch.n_models;

    let w_master = split_rng(seed, 0);
    let mut weights = Vec::with_capacity(n_layers);
    for l in 1..=n_layers {
        let std = arch.weight_std(l);
        let mut rng = split_rng(w_master, l as u64).rng();
        let mut w = Array2::<f64>::zeros((widths[l - 1], widths[l]));
        for v in w.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = std * z;
        }
        weights.push(w);
    }

    let mod_master = split_rng(seed, 1);
    let depth = arch.depth();
    let sample_slot = |spec: &ModulationSpec, slot: u64, width: usize| -> Array2<f64> {
        let slot_seed = split_rng(mod_master, slot);
        let mut out = Array2::<f64>::zeros((m, width));
        for alpha in 0..m {
            let mut rng = split_rng(slot_seed, alpha as u64).rng();
            for v in out.row_mut(alpha).iter_mut() {
                *v = spec.sample(&mut rng);
            }
        }
        out
    };

    let input_mods = arch
        .input_mod
        .as_ref()
        .map(|s| sample_slot(s, mod_slot_id(0, false, depth), arch.input_dim));
    let mut pre_mods = Vec::with_capacity(depth);
    let mut post_mods = Vec::with_capacity(depth);
    for (i, layer) in arch.layers.iter().enumerate() {
        let l = i + 1;
        pre_mods.push(
            layer
                .pre_mod
                .as_ref()
                .map(|s| sample_slot(s, mod_slot_id(l, true, depth), layer.width)),
        );
        post_mods.push(
            layer
                .post_mod
                .as_ref()
                .map(|s| sample_slot(s, mod_slot_id(l, false, depth), layer.width)),
        );
    }
    let output_mods = arch
        .output_mod
        .as_ref()
        .map(|s| sample_slot(s, mod_slot_id(depth + 1, false, depth), arch.output_dim));

    Ok(EnsembleParams {
        weights,
        pre_mods,
        post_mods,
        input_mods,
        output_mods,
    })
}

/// Redraw every non-trainable modulation in place from its spec (the
/// dropout-resampling mode). Trainable modulations are untouched.
pub fn resample_frozen_mods<R: Rng>(params: &mut EnsembleParams, arch: &ArchSpec, rng: &mut R) {
    let mut redraw = |arr: &mut Option<Array2<f64>>, spec: &Option<ModulationSpec>| {
        if let (Some(arr), Some(spec)) = (arr.as_mut(), spec.as_ref()) {
            if !spec.trainable {
                for v in arr.iter_mut() {
                    *v = spec.sample(rng);
                }
            }
        }
    };
    redraw(&mut params.input_mods, &arch.input_mod);
    for (i, layer) in arch.layers.iter().enumerate() {
        redraw(&mut params.pre_mods[i], &layer.pre_mod);
        redraw(&mut params.post_mods[i], &layer.post_mod);
    }
    redraw(&mut params.output_mods, &arch.output_mod);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_arch(m: usize) -> ArchSpec {
        ArchSpec::uniform(
            3,
            2,
            5,
            2,
            Activation::Relu,
            m,
            Some(ModulationSpec::gaussian(0.0, 1.0, true)),
            Some(ModulationSpec::gaussian(0.0, 1.0, true)),
        )
    }

    #[test]
    fn init_is_deterministic() {
        let arch = toy_arch(3);
        let a = init_params(&arch, Seed::new(11)).unwrap();
        let b = init_params(&arch, Seed::new(11)).unwrap();
        assert_eq!(a, b);
        let c = init_params(&arch, Seed::new(12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn deterministic_one_mods_are_all_ones() {
        let mut arch = toy_arch(4);
        for layer in &mut arch.layers {
            layer.pre_mod = Some(ModulationSpec::deterministic(1.0));
            layer.post_mod = Some(ModulationSpec::deterministic(1.0));
        }
        let p = init_params(&arch, Seed::new(0)).unwrap();
        for mods in p.pre_mods.iter().chain(p.post_mods.iter()) {
            assert!(mods.as_ref().unwrap().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn shared_weights_identical_across_ensemble_sizes() {
        let seed = Seed::new(7);
        let w1 = init_params(&toy_arch(1), seed).unwrap().weights;
        let w16 = init_params(&toy_arch(16), seed).unwrap().weights;
        assert_eq!(w1, w16);
        // And independent of which modulation slots exist.
        let mut plain = toy_arch(1);
        for layer in &mut plain.layers {
            layer.pre_mod = None;
            layer.post_mod = None;
        }
        assert_eq!(w1, init_params(&plain, seed).unwrap().weights);
    }

    #[test]
    fn centered_mods_have_small_sample_mean() {
        // Law of large numbers: mean of 10^4 standard-Gaussian draws is
        // within 4σ/sqrt(n) of zero.
        let arch = ArchSpec::uniform(
            2,
            1,
            10_000,
            1,
            Activation::Relu,
            2,
            None,
            Some(ModulationSpec::gaussian(0.0, 1.0, false)),
        );
        let p = init_params(&arch, Seed::new(5)).unwrap();
        let u = p.post_mods[0].as_ref().unwrap();
        for alpha in 0..2 {
            let mean = u.row(alpha).mean().unwrap();
            assert!(mean.abs() < 4.0 / (10_000f64).sqrt(), "mean = {mean}");
        }
    }

    #[test]
    fn discrete_sampling_respects_probs() {
        let spec = ModulationSpec::symmetric_ternary(0.5);
        let mut rng = Seed::new(9).rng();
        let n = 20_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let v = spec.sample(&mut rng);
            if v < -0.5 {
                counts[0] += 1;
            } else if v > 0.5 {
                counts[2] += 1;
            } else {
                counts[1] += 1;
            }
        }
        let f = |c: usize| c as f64 / n as f64;
        assert!((f(counts[0]) - 0.25).abs() < 0.02);
        assert!((f(counts[1]) - 0.50).abs() < 0.02);
        assert!((f(counts[2]) - 0.25).abs() < 0.02);
    }

    #[test]
    fn moments_match_families() {
        assert_eq!(ModulationSpec::deterministic(2.0).raw_moments(), (2.0, 4.0));
        let (m1, m2) = ModulationSpec::shifted(0.6, false).raw_moments();
        assert!((m1 - 0.6).abs() < 1e-15);
        assert!((m2 - 1.0).abs() < 1e-15);
        let (m1, m2) = ModulationSpec::symmetric_ternary(0.3).raw_moments();
        assert!(m1.abs() < 1e-15);
        assert!((m2 - 0.3).abs() < 1e-15);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ModulationSpec::gaussian(0.0, -1.0, false)
            .validate()
            .is_err());
        let bad = ModulationSpec {
            kind: ModulationKind::Discrete {
                values: vec![1.0, 2.0],
                probs: vec![0.6, 0.6],
            },
            trainable: false,
        };
        assert!(bad.validate().is_err());
        let mut arch = toy_arch(0);
        assert!(init_params(&arch, Seed::new(0)).is_err());
        arch.n_models = 1;
        arch.layers[0].width = 0;
        assert!(init_params(&arch, Seed::new(0)).is_err());
    }
}
