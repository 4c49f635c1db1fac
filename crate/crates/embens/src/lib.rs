//! Embedded ensembles at finite width and in the infinite-width limit.
//!
//! An *embedded ensemble* (EE) shares a single set of reference-network
//! weights `w` across `M` models that differ only in small per-model,
//! per-neuron multiplicative *modulations* applied before (`v`) and after
//! (`u`) each activation. BatchEnsembles (trainable modulations) and
//! MC-dropout ensembles (frozen masks) are the two special cases covered.
//!
//! The crate has two faces that are built to agree with each other:
//!
//! * [`net`] — finite-width ensembles: modulated forward pass, manual
//!   backpropagation, shared-weight SGD with the gradient scaling `γ(M)`,
//!   dropout resampling, and the fused last-layer-dropout (LLD) paths.
//! * [`kernel`] — the exact infinite-width theory: modulation moments, the
//!   Gaussian expectations Φ/Φ̇/Φ_z, and the layer recursions for the GP
//!   output covariance and the ensemble NTK, kept split into common
//!   (shared-weight) and individual (per-model) parts so `γ(M)` can be
//!   applied when assembling the block kernel.
//!
//! [`dynamics`] integrates the kernel-regime training dynamics (closed form
//! for MSE, RK4 otherwise), [`diagnostics`] measures the finite-width
//! quantities the theory predicts (empirical NTK/covariance, gradient
//! cosines, reduced NTK interaction metrics, NTK drift), and [`exp`] wires
//! everything into deterministic, seeded experiment drivers with CSV/JSON
//! reports. [`numerics`] holds the shared plumbing: splittable RNG streams,
//! small dense linear algebra, and Gaussian quadrature.
//!
//! Every operation is deterministic given its [`numerics::Seed`]; see the
//! `examples/` directory for one runnable program per capability.

pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod exp;
pub mod kernel;
pub mod net;
pub mod numerics;

pub use error::{Error, Result};
