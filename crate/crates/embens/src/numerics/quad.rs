//! Gaussian-expectation quadrature.
//!
//! Two rules cover everything in the crate:
//!
//! * probabilists' Gauss–Hermite (weight e^{-z²/2}/√(2π)), so nodes live in
//!   the z-units of Gaussian pre-activations and no rescaling happens at call
//!   sites;
//! * composite Gauss–Legendre panels against an explicit normal density,
//!   split at caller-declared breakpoints, for integrands that are only
//!   piecewise smooth (ReLU kinks and indicator jumps).

use crate::error::{Error, Result};
use crate::numerics::linalg::{cholesky2, sym_eigen, Cov2};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

/// Resolution knobs for the Gaussian expectations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    /// Nodes per integration dimension.
    pub nodes_per_dim: usize,
    /// Relative determinant threshold below which a 2×2 covariance is treated
    /// as rank-1 and the expectation falls back to a 1D rule. ρ = ±1 arises
    /// for identical inputs or models and must be exact, not NaN.
    pub degenerate_eps: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            nodes_per_dim: 64,
            degenerate_eps: 1e-12,
        }
    }
}

impl QuadratureSpec {
    pub fn with_nodes(nodes_per_dim: usize) -> Self {
        QuadratureSpec {
            nodes_per_dim,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes_per_dim < 1 {
            return Err(Error::InvalidSpec("nodes_per_dim must be >= 1".into()));
        }
        Ok(())
    }
}

fn rule_cache() -> &'static Mutex<HashMap<(u8, usize), Arc<(Vec<f64>, Vec<f64>)>>> {
    static CACHE: OnceLock<Mutex<HashMap<(u8, usize), Arc<(Vec<f64>, Vec<f64>)>>>> =
        OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Golub–Welsch: nodes are the eigenvalues of the symmetric tridiagonal
/// Jacobi matrix, weights are `mu0` times the squared first components of the
/// normalized eigenvectors.
fn golub_welsch(offdiag: &[f64], mu0: f64) -> (Vec<f64>, Vec<f64>) {
    let n = offdiag.len() + 1;
    let mut j = Array2::<f64>::zeros((n, n));
    for (k, &b) in offdiag.iter().enumerate() {
        j[[k, k + 1]] = b;
        j[[k + 1, k]] = b;
    }
    let (vals, vecs) = sym_eigen(&j);
    let nodes: Vec<f64> = vals.to_vec();
    let weights: Vec<f64> = (0..n).map(|i| mu0 * vecs[[0, i]] * vecs[[0, i]]).collect();
    (nodes, weights)
}

/// Probabilists' Gauss–Hermite rule: E over N(0,1). Weights sum to 1 and
/// polynomials up to degree 2n-1 integrate exactly.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "gauss_hermite needs n >= 1");
    if let Some(rule) = rule_cache().lock().unwrap().get(&(0, n)) {
        return (rule.0.clone(), rule.1.clone());
    }
    // He_{k+1} = x He_k - k He_{k-1}: zero diagonal, off-diagonal sqrt(k).
    let offdiag: Vec<f64> = (1..n).map(|k| (k as f64).sqrt()).collect();
    let rule = golub_welsch(&offdiag, 1.0);
    rule_cache()
        .lock()
        .unwrap()
        .insert((0, n), Arc::new(rule.clone()));
    rule
}

/// Gauss–Legendre rule on [-1, 1] (weights sum to 2).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "gauss_legendre needs n >= 1");
    if let Some(rule) = rule_cache().lock().unwrap().get(&(1, n)) {
        return (rule.0.clone(), rule.1.clone());
    }
    let offdiag: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    let rule = golub_welsch(&offdiag, 2.0);
    rule_cache()
        .lock()
        .unwrap()
        .insert((1, n), Arc::new(rule.clone()));
    rule
}

/// Tensor-product Gauss–Hermite estimate of E[g(z1, z2)] for
/// (z1, z2) ~ N(0, c), after Cholesky whitening of the covariance.
///
/// Falls back to a 1D rule along the rank-1 direction when the covariance is
/// degenerate. Non-finite values of `g` surface as an evaluation error.
pub fn expect_bivariate<G>(g: G, c: &Cov2, q: &QuadratureSpec) -> Result<f64>
where
    G: Fn(f64, f64) -> f64,
{
    q.validate()?;
    c.validate()?;
    // Canonical order (larger variance drives the whitening) makes the
    // estimate invariant under simultaneous swap of g's arguments and
    // (s11 <-> s22).
    let (c, swapped) = if c.s22 > c.s11 {
        (Cov2::new(c.s22, c.s12, c.s11), true)
    } else {
        (*c, false)
    };
    let c = &c;
    let g = move |z1: f64, z2: f64| if swapped { g(z2, z1) } else { g(z1, z2) };
    let (nodes, weights) = gauss_hermite(q.nodes_per_dim);

    let check = |v: f64| -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("expect_bivariate integrand".into()))
        }
    };

    // Degenerate covariance: integrate along the rank-1 direction.
    if c.det() < q.degenerate_eps * c.s11 * c.s22 || c.s11 == 0.0 || c.s22 == 0.0 {
        let a = c.s11.sqrt();
        let b = c.s12.signum() * c.s22.sqrt();
        if a == 0.0 && c.s22 == 0.0 {
            return check(g(0.0, 0.0));
        }
        if a == 0.0 {
            let s = c.s22.sqrt();
            let mut acc = 0.0;
            for (x, w) in nodes.iter().zip(&weights) {
                acc += w * check(g(0.0, s * x))?;
            }
            return Ok(acc);
        }
        if c.s22 == 0.0 {
            let mut acc = 0.0;
            for (x, w) in nodes.iter().zip(&weights) {
                acc += w * check(g(a * x, 0.0))?;
            }
            return Ok(acc);
        }
        let mut acc = 0.0;
        for (x, w) in nodes.iter().zip(&weights) {
            acc += w * check(g(a * x, b * x))?;
        }
        return Ok(acc);
    }

    let l = cholesky2(c)?;
    let mut acc = 0.0;
    for (x1, w1) in nodes.iter().zip(&weights) {
        let z1 = l[0][0] * x1;
        let shift = l[1][0] * x1;
        let mut inner = 0.0;
        for (x2, w2) in nodes.iter().zip(&weights) {
            inner += w2 * check(g(z1, shift + l[1][1] * x2))?;
        }
        acc += w1 * inner;
    }
    Ok(acc)
}

/// Node/weight atoms realizing E over x ~ N(mean, std²) of a piecewise-smooth
/// function: composite Gauss–Legendre panels against the explicit normal
/// density, split at the declared breakpoints.
///
/// A zero (or negative) `std` collapses to the single atom (mean, 1). The
/// range is [mean - 10σ, mean + 10σ], divided into max(1, n_nodes/8) panels
/// carrying a 16-point rule each, so resolution scales with the node budget
/// while even the coarsest budget stays integrable.
///
/// `grade_cuts` refines the panels touching an internal cut geometrically:
/// needed when the integrand is not merely kinked at the cut but carries a
/// boundary layer of unknown width there (an inner integral smoothed across
/// its own kink). Piecewise-analytic integrands don't need it.
pub fn piecewise_normal_rule(
    mean: f64,
    std: f64,
    breaks: &[f64],
    n_nodes: usize,
    grade_cuts: bool,
) -> Vec<(f64, f64)> {
    if std <= 0.0 {
        return vec![(mean, 1.0)];
    }
    const GL_ORDER: usize = 16;
    let (gl_nodes, gl_weights) = gauss_legendre(GL_ORDER);

    let lo = mean - 10.0 * std;
    let hi = mean + 10.0 * std;
    let mut cuts: Vec<f64> = breaks
        .iter()
        .copied()
        .filter(|b| *b > lo && *b < hi)
        .collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup();

    let mut bounds = Vec::with_capacity(cuts.len() + 2);
    bounds.push(lo);
    bounds.extend_from_slice(&cuts);
    bounds.push(hi);

    let total_panels = (n_nodes / 8).max(1);
    let span = hi - lo;
    let inv_norm = 1.0 / (std * (2.0 * std::f64::consts::PI).sqrt());

    let mut rule = Vec::with_capacity(bounds.len() * GL_ORDER * 2);
    let mut emit_panel = |pa: f64, pb: f64, rule: &mut Vec<(f64, f64)>| {
        let mid = 0.5 * (pa + pb);
        let half = 0.5 * (pb - pa);
        for (t, w) in gl_nodes.iter().zip(&gl_weights) {
            let x = mid + half * t;
            let u = (x - mean) / std;
            rule.push((x, w * half * inv_norm * (-0.5 * u * u).exp()));
        }
    };
    let cascade = |from_cut: f64, away: f64, rule: &mut Vec<(f64, f64)>| {
        let mut near = from_cut;
        let w = away - from_cut;
        for k in (1..=GRADE_LEVELS).rev() {
            let far = from_cut + w / (1 << (k - 1)) as f64;
            emit_panel(near.min(far), near.max(far), rule);
            near = far;
        }
    };
    let n_segs = bounds.len() - 1;
    for (s, seg) in bounds.windows(2).enumerate() {
        let (a, b) = (seg[0], seg[1]);
        if b <= a {
            continue;
        }
        let cut_left = grade_cuts && s > 0;
        let cut_right = grade_cuts && s + 1 < n_segs;
        let panels = ((b - a) / span * total_panels as f64).ceil().max(1.0) as usize;
        let h = (b - a) / panels as f64;
        for p in 0..panels {
            let pa = a + p as f64 * h;
            let pb = pa + h;
            if p == 0 && cut_left {
                cascade(pa, pb, &mut rule);
            } else if p == panels - 1 && cut_right {
                cascade(pb, pa, &mut rule);
            } else {
                emit_panel(pa, pb, &mut rule);
            }
        }
    }
    rule
}

const GRADE_LEVELS: usize = 7;

/// E over x ~ N(mean, std²) of a piecewise-smooth `f`; see
/// [`piecewise_normal_rule`] for the scheme.
pub fn gauss_expect_piecewise<F>(f: F, mean: f64, std: f64, breaks: &[f64], n_nodes: usize) -> f64
where
    F: Fn(f64) -> f64,
{
    piecewise_normal_rule(mean, std, breaks, n_nodes, true)
        .iter()
        .map(|&(x, w)| w * f(x))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hermite_small_rules() {
        let (x, w) = gauss_hermite(1);
        assert_abs_diff_eq!(x[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(w[0], 1.0, epsilon = 1e-14);

        let (x, w) = gauss_hermite(2);
        assert_abs_diff_eq!(x[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 0.5, epsilon = 1e-12);

        let (x, w) = gauss_hermite(3);
        assert_abs_diff_eq!(x[0], -(3.0f64.sqrt()), epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[2], 3.0f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(w[0], 1.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[2], 1.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn hermite_weights_sum_to_one() {
        for n in [1, 2, 3, 8, 16, 64, 128] {
            let (_, w) = gauss_hermite(n);
            assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn hermite_polynomial_exactness() {
        // Degree 2n-1 exactness: moments of N(0,1) are (k-1)!! for even k,
        // 0 for odd k. Tolerances are relative to the neighbouring even
        // moment, the natural scale of the node values being summed.
        let n = 8;
        let (x, w) = gauss_hermite(n);
        let mut moments = vec![1.0f64; 2 * n + 2];
        for k in (2..moments.len()).step_by(2) {
            moments[k] = moments[k - 2] * (k - 1) as f64;
        }
        for k in 0..(2 * n) {
            let quad: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(k as i32)).sum();
            let (exact, scale) = if k % 2 == 1 {
                (0.0, moments[k + 1])
            } else {
                (moments[k], moments[k])
            };
            assert_abs_diff_eq!(quad, exact, epsilon = 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(8);
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-12);
        let quad: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        assert_abs_diff_eq!(quad, 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn bivariate_second_moment() {
        let q = QuadratureSpec::default();
        for rho in [-1.0, -0.7, 0.0, 0.3, 0.99, 1.0] {
            let c = Cov2::new(1.0, rho, 1.0);
            let v = expect_bivariate(|z1, z2| z1 * z2, &c, &q).unwrap();
            assert_abs_diff_eq!(v, rho, epsilon = 1e-10);
        }
    }

    #[test]
    fn bivariate_polynomial_exactness() {
        let q = QuadratureSpec::with_nodes(8);
        let c = Cov2::new(2.0, 0.6, 1.5);
        // E[z1^2 z2^2] = s11 s22 + 2 s12^2 by Isserlis.
        let v = expect_bivariate(|z1, z2| z1 * z1 * z2 * z2, &c, &q).unwrap();
        assert_abs_diff_eq!(v, c.s11 * c.s22 + 2.0 * c.s12 * c.s12, epsilon = 1e-12);
    }

    #[test]
    fn bivariate_relu_independent() {
        // E[relu(z1)] E[relu(z2)] = 1/(2π). Plain Gauss–Hermite carries the
        // ReLU kink error (~2e-3 at 64 nodes); the kernel module's phi
        // machinery is the kink-exact path and pins this value to 1e-10.
        let q = QuadratureSpec::default();
        let c = Cov2::new(1.0, 0.0, 1.0);
        let v = expect_bivariate(|z1, z2| z1.max(0.0) * z2.max(0.0), &c, &q).unwrap();
        assert_abs_diff_eq!(v, 1.0 / (2.0 * std::f64::consts::PI), epsilon = 5e-3);
    }

    #[test]
    fn bivariate_swap_symmetry() {
        // Canonical whitening order makes the swap bit-exact for unequal
        // variances; equal variances agree to quadrature accuracy on smooth g.
        let q = QuadratureSpec::with_nodes(32);
        let c = Cov2::new(2.0, -0.4, 0.7);
        let cs = Cov2::new(0.7, -0.4, 2.0);
        let g = |z1: f64, z2: f64| z1.max(0.0) * (z2 * 1.7).tanh();
        let a = expect_bivariate(g, &c, &q).unwrap();
        let b = expect_bivariate(|z1, z2| g(z2, z1), &cs, &q).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-15);

        let q64 = QuadratureSpec::default();
        let ceq = Cov2::new(1.3, 0.5, 1.3);
        let gs = |z1: f64, z2: f64| (0.8 * z1 - 0.1).tanh() * (1.9 * z2).sin();
        let a = expect_bivariate(gs, &ceq, &q64).unwrap();
        let b = expect_bivariate(|z1, z2| gs(z2, z1), &ceq, &q64).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-9);
    }

    #[test]
    fn bivariate_degenerate_exact() {
        let q = QuadratureSpec::default();
        // ρ = 1: E[relu(z)^2] = 1/2.
        let c = Cov2::new(1.0, 1.0, 1.0);
        let v = expect_bivariate(|z1, z2| z1.max(0.0) * z2.max(0.0), &c, &q).unwrap();
        assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
        // Zero covariance.
        let c0 = Cov2::new(0.0, 0.0, 0.0);
        let v0 = expect_bivariate(|z1, z2| (z1 + z2 + 1.0).powi(2), &c0, &q).unwrap();
        assert_abs_diff_eq!(v0, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn bivariate_rejects_non_finite() {
        let q = QuadratureSpec::with_nodes(4);
        let c = Cov2::new(1.0, 0.0, 1.0);
        assert!(expect_bivariate(|z1, _| 1.0 / (z1 - z1), &c, &q).is_err());
    }

    #[test]
    fn piecewise_matches_moments() {
        // Smooth case: E[x^2] with x ~ N(μ, σ²).
        let v = gauss_expect_piecewise(|x| x * x, 0.3, 1.7, &[], 64);
        assert_abs_diff_eq!(v, 1.7 * 1.7 + 0.3 * 0.3, epsilon = 1e-10);
        // Kinked case: E|x| for x ~ N(0,1) = sqrt(2/π), exact after the split.
        let v = gauss_expect_piecewise(|x| x.abs(), 0.0, 1.0, &[0.0], 64);
        assert_abs_diff_eq!(v, (2.0 / std::f64::consts::PI).sqrt(), epsilon = 1e-10);
        // Jump case: P(x > 0.4) for x ~ N(0.1, 2.25).
        let v = gauss_expect_piecewise(
            |x| if x > 0.4 { 1.0 } else { 0.0 },
            0.1,
            1.5,
            &[0.4],
            64,
        );
        let exact = 0.5 * libm::erfc((0.4 - 0.1) / (1.5 * std::f64::consts::SQRT_2));
        assert_abs_diff_eq!(v, exact, epsilon = 1e-10);
    }

    #[test]
    fn piecewise_degenerate_std() {
        let v = gauss_expect_piecewise(|x| 3.0 * x, 2.0, 0.0, &[0.0], 64);
        assert_eq!(v, 6.0);
    }
}
