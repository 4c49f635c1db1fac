//! The Gaussian expectations Φ, Φ̇, Φ_z of modulated activation products:
//!
//! ```text
//! Φ   = E[ φ(v1 z1) φ(v2 z2) ]
//! Φ̇   = E[ φ̇(v1 z1) φ̇(v2 z2) ]
//! Φ_z = E[ z1 φ̇(v1 z1) · z2 φ̇(v2 z2) ]
//! ```
//!
//! with (z1, z2) ~ N(0, c) and (v1, v2) drawn from the pre-modulation spec:
//! one shared draw for a same-model pair, independent draws otherwise.
//!
//! Integration is nested 1D quadrature after whitening z1 = a ξ1,
//! z2 = b ξ1 + c ξ2, with the Gaussian variables integrated by panels split
//! at the activation's kink (z = 0) and, for Gaussian modulations, at v = 0
//! where the kink location flips. Each panel then sees an analytic integrand,
//! so ReLU indicator jumps cost no accuracy. For independent draws the double
//! v-average factorizes through the modulated mean m(z) = E_v[f(v, z)],
//! keeping the cost at O(nodes²) instead of O(nodes⁴).
//!
//! Φ_z integrates z·φ̇(vz) per argument (the form the NTK recursion's
//! pre-modulation term produces); for v = 1 and ReLU it coincides with Φ.

use crate::error::Result;
use crate::net::{Activation, ModulationKind, ModulationSpec};
use crate::numerics::{piecewise_normal_rule, Cov2, QuadratureSpec};
use serde::{Deserialize, Serialize};

/// Whether the two modulation arguments are coupled to one draw (same model)
/// or drawn independently (different models).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    SameModel,
    DiffModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum PhiKind {
    Phi,
    PhiDot,
    PhiZ,
}

#[inline]
fn factor(kind: PhiKind, act: Activation, v: f64, z: f64) -> f64 {
    match kind {
        PhiKind::Phi => act.apply(v * z),
        PhiKind::PhiDot => act.deriv(v * z),
        PhiKind::PhiZ => z * act.deriv(v * z),
    }
}

/// Weighted atoms realizing the expectation over one modulation draw.
/// Gaussian specs split at v = 0 when the activation is kinked, because the
/// z-kink location k/v changes sides there.
fn v_atoms(spec: &ModulationSpec, act: Activation, n_nodes: usize) -> Vec<(f64, f64)> {
    match &spec.kind {
        ModulationKind::Deterministic(c) => vec![(*c, 1.0)],
        ModulationKind::Discrete { values, probs } => values
            .iter()
            .zip(probs)
            .filter(|(_, p)| **p > 0.0)
            .map(|(v, p)| (*v, *p))
            .collect(),
        ModulationKind::Gaussian { mean, variance } => {
            let breaks: &[f64] = if act.breakpoints().is_empty() {
                &[]
            } else {
                &[0.0]
            };
            piecewise_normal_rule(*mean, variance.sqrt(), breaks, n_nodes, false)
        }
    }
}

/// z-space breakpoints of z ↦ factor(kind, act, v, z) at a fixed v.
fn z_breaks(act: Activation, v: f64, out: &mut Vec<f64>) {
    out.clear();
    if v != 0.0 {
        for k in act.breakpoints() {
            out.push(k / v);
        }
    }
}

/// Whitening of the 2×2 covariance: z1 = a ξ1, z2 = b ξ1 + c ξ2. A rank-1
/// covariance (ρ = ±1 from identical inputs or models) collapses exactly to
/// c = 0 so the degenerate case is a point evaluation, not a NaN; otherwise
/// the correlation is clamped into (-1, 1).
fn whiten(c: &Cov2, q: &QuadratureSpec) -> (f64, f64, f64) {
    let a = c.s11.max(0.0).sqrt();
    if a == 0.0 {
        return (0.0, 0.0, c.s22.max(0.0).sqrt());
    }
    if c.det() < q.degenerate_eps * c.s11 * c.s22 {
        return (a, c.s12.signum() * c.s22.max(0.0).sqrt(), 0.0);
    }
    let rho = c.correlation();
    let b = rho * c.s22.max(0.0).sqrt();
    let cvar = (c.s22.max(0.0) - b * b).max(0.0).sqrt();
    (a, b, cvar)
}

pub(crate) fn phi_general(
    kind: PhiKind,
    act: Activation,
    c: &Cov2,
    v_spec: &ModulationSpec,
    mode: PairMode,
    q: &QuadratureSpec,
) -> Result<f64> {
    q.validate()?;
    c.validate()?;
    v_spec.validate()?;
    let n = q.nodes_per_dim;
    let (a, b, cvar) = whiten(c, q);
    let atoms = v_atoms(v_spec, act, n);

    // ξ1-breakpoints: the first factor f(v, a ξ1) kinks at ξ1 = k/(a v); for
    // the activations here k = 0, and after averaging over v only ξ1 = 0
    // survives. When cvar = 0 the second factor contributes the same point.
    let outer_breaks: &[f64] = if act.breakpoints().is_empty() || a == 0.0 {
        &[]
    } else {
        &[0.0]
    };
    let outer_rule =
        piecewise_normal_rule(0.0, if a == 0.0 { 0.0 } else { 1.0 }, outer_breaks, n, true);

    let mut zb = Vec::new();
    let mut total = 0.0;
    match mode {
        PairMode::SameModel => {
            for &(v, wv) in &atoms {
                if wv == 0.0 {
                    continue;
                }
                z_breaks(act, v, &mut zb);
                let mut acc = 0.0;
                for &(xi1, w1) in &outer_rule {
                    let f1 = factor(kind, act, v, a * xi1);
                    if f1 == 0.0 {
                        continue;
                    }
                    let inner: f64 = piecewise_normal_rule(b * xi1, cvar, &zb, n, false)
                        .iter()
                        .map(|&(z2, w2)| w2 * factor(kind, act, v, z2))
                        .sum();
                    acc += w1 * f1 * inner;
                }
                total += wv * acc;
            }
        }
        PairMode::DiffModel => {
            // Modulated means m(z) = E_v[f(v, z)]; independent draws let the
            // double average factorize conditional on ξ1.
            let m_of = |z: f64| -> f64 {
                atoms
                    .iter()
                    .map(|&(v, wv)| wv * factor(kind, act, v, z))
                    .sum()
            };
            // After v-averaging the kink of m sits at z = 0 (all kinks k/v
            // collapse there for k = 0).
            let m_breaks: &[f64] = if act.breakpoints().is_empty() {
                &[]
            } else {
                &[0.0]
            };
            for &(xi1, w1) in &outer_rule {
                let f1 = m_of(a * xi1);
                if f1 == 0.0 {
                    continue;
                }
                let inner: f64 = piecewise_normal_rule(b * xi1, cvar, m_breaks, n, false)
                    .iter()
                    .map(|&(z2, w2)| w2 * m_of(z2))
                    .sum();
                total += w1 * f1 * inner;
            }
        }
    }
    Ok(total)
}

/// Φ = E[φ(v1 z1) φ(v2 z2)].
pub fn phi_expect(
    act: Activation,
    c: &Cov2,
    v_spec: &ModulationSpec,
    mode: PairMode,
    q: &QuadratureSpec,
) -> Result<f64> {
    phi_general(PhiKind::Phi, act, c, v_spec, mode, q)
}

/// Φ̇ = E[φ̇(v1 z1) φ̇(v2 z2)].
pub fn phid_expect(
    act: Activation,
    c: &Cov2,
    v_spec: &ModulationSpec,
    mode: PairMode,
    q: &QuadratureSpec,
) -> Result<f64> {
    phi_general(PhiKind::PhiDot, act, c, v_spec, mode, q)
}

/// Φ_z = E[z1 φ̇(v1 z1) · z2 φ̇(v2 z2)].
pub fn phiz_expect(
    act: Activation,
    c: &Cov2,
    v_spec: &ModulationSpec,
    mode: PairMode,
    q: &QuadratureSpec,
) -> Result<f64> {
    phi_general(PhiKind::PhiZ, act, c, v_spec, mode, q)
}

/// Arc-cosine closed form of Φ for ReLU with v ≡ 1. Validation-only fast
/// path; the quadrature above is the reference for every combination.
pub fn phi_relu_closed_form(c: &Cov2) -> f64 {
    let rho = c.correlation();
    let scale = (c.s11 * c.s22).sqrt();
    scale * ((1.0 - rho * rho).sqrt() + rho * (std::f64::consts::PI - rho.acos()))
        / (2.0 * std::f64::consts::PI)
}

/// Arc-cosine closed form of Φ̇ for ReLU with v ≡ 1.
pub fn phid_relu_closed_form(c: &Cov2) -> f64 {
    let rho = c.correlation();
    (std::f64::consts::PI - rho.acos()) / (2.0 * std::f64::consts::PI)
}
