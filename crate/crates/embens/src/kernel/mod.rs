//! Exact infinite-width theory: modulation moments, the Φ/Φ̇/Φ_z Gaussian
//! expectations, and the layer recursions producing the GP output covariance
//! and the ensemble NTK split into common and individual parts.

mod export;
mod phi;
mod recursion;

pub use export::{read_kernels_blob, write_kernels_blob, write_kernels_csv};
pub use phi::{
    phi_expect, phi_relu_closed_form, phid_expect, phid_relu_closed_form, phiz_expect, PairMode,
};
pub use recursion::{
    assemble_ntk, gp_covariance_blocks, moments, ntk_step, run_recursion, sigma_init, sigma_step,
    LayerKernels, ModulationMoments,
};
