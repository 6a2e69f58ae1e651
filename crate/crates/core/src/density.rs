//! Energy densities on symmetric 2×2 matrices.
//!
//! * [`f_lambda`]: the weight-penalized compliance density, `0` at the zero
//!   matrix and `λ + |ξ|²` elsewhere.
//! * [`qc_envelope`]: its closed-form 2-quasiconvex envelope.
//! * [`g_lambda`]: the envelope rescaled by `λ^{-1/2}`, the density the
//!   finite-λ solver minimizes.
//! * [`limit_density`]: `2ρ⁰`, the Michell density reached as `λ → ∞`.
//!
//! The `*_smooth` variants replace `|x|` by `√(x² + ε²)` and come with
//! analytic gradients with respect to the entries `(a, b, d)`. Gradients are
//! returned packed in a [`Sym2`] whose `b` slot holds `∂/∂b` for the single
//! off-diagonal variable.

use crate::error::{Error, Result};
use crate::sym2::Sym2;

/// Parameters shared by the finite-λ densities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyParams {
    pub lambda: f64,
    pub smooth_eps: f64,
    pub interface_tol: f64,
}

impl EnergyParams {
    pub fn new(lambda: f64) -> Result<Self> {
        Self::with_smoothing(lambda, 0.0)
    }

    pub fn with_smoothing(lambda: f64, smooth_eps: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        if !(smooth_eps >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "smoothing width must be nonnegative, got {smooth_eps}"
            )));
        }
        Ok(Self {
            lambda,
            smooth_eps,
            interface_tol: 0.0,
        })
    }

    pub fn sqrt_lambda(&self) -> f64 {
        self.lambda.sqrt()
    }
}

pub fn f_lambda(xi: Sym2, p: &EnergyParams) -> f64 {
    if xi.is_zero() {
        0.0
    } else {
        p.lambda + xi.norm_sq()
    }
}

/// True when `ξ` lies on the low (laminated) branch `ρ⁰(ξ) ≤ √λ`.
pub fn on_low_branch(xi: Sym2, p: &EnergyParams) -> bool {
    xi.rho0() <= p.sqrt_lambda()
}

pub fn qc_envelope(xi: Sym2, p: &EnergyParams) -> f64 {
    let sl = p.sqrt_lambda();
    let rho = xi.rho0();
    if rho <= sl {
        2.0 * sl * rho - 2.0 * xi.det().abs()
    } else {
        xi.norm_sq() + p.lambda
    }
}

pub fn g_lambda(xi: Sym2, p: &EnergyParams) -> f64 {
    let sl = p.sqrt_lambda();
    let rho = xi.rho0();
    if rho <= sl {
        2.0 * (rho - xi.det().abs() / sl)
    } else {
        sl + xi.norm_sq() / sl
    }
}

pub fn limit_density(xi: Sym2) -> f64 {
    2.0 * xi.rho0()
}

const GAP_FLOOR: f64 = 1e-300;

/// Smoothed `ρ⁰` and its gradient with respect to `(a, b, d)`.
fn rho0_smooth_with_grad(xi: Sym2, eps: f64) -> (f64, Sym2) {
    let m = 0.5 * xi.trace();
    let r = xi.half_gap().max(GAP_FLOOR);
    let (l1, l2) = (m + r, m - r);
    let s1 = (l1 * l1 + eps * eps).sqrt();
    let s2 = (l2 * l2 + eps * eps).sqrt();
    let (p1, p2) = (l1 / s1, l2 / s2);
    // ∂λ₁,₂/∂a = ½ ± (a−d)/(4r), ∂λ₁,₂/∂b = ±b/r, ∂λ₁,₂/∂d = ½ ∓ (a−d)/(4r)
    let sum = 0.5 * (p1 + p2);
    let diff = p1 - p2;
    let q = (xi.a - xi.d) / (4.0 * r);
    let grad = Sym2::new(sum + diff * q, diff * xi.b / r, sum - diff * q);
    (s1 + s2, grad)
}

fn det_smooth_with_grad(xi: Sym2, eps: f64) -> (f64, Sym2) {
    let det = xi.det();
    let e2 = eps * eps;
    let s = (det * det + e2 * e2).sqrt();
    let k = det / s;
    (s, Sym2::new(k * xi.d, -2.0 * k * xi.b, k * xi.a))
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 {
        Ok(())
    } else {
        Err(Error::ZeroSmoothing)
    }
}

/// Smoothed `ρ⁰` (each `|λᵢ|` replaced by `√(λᵢ² + ε²)`).
pub fn rho0_smooth(xi: Sym2, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    Ok(rho0_smooth_with_grad(xi, eps).0)
}

/// Value and gradient of the smoothed finite-λ density.
///
/// Branch selection uses the smoothed `ρ⁰`; the high branch is already
/// smooth and is evaluated exactly.
pub fn g_lambda_smooth_with_grad(xi: Sym2, p: &EnergyParams) -> Result<(f64, Sym2)> {
    check_eps(p.smooth_eps)?;
    let sl = p.sqrt_lambda();
    let (rho, drho) = rho0_smooth_with_grad(xi, p.smooth_eps);
    if rho <= sl {
        let (det, ddet) = det_smooth_with_grad(xi, p.smooth_eps);
        let v = 2.0 * (rho - det / sl);
        let g = 2.0 * drho - (2.0 / sl) * ddet;
        Ok((v, g))
    } else {
        let v = sl + xi.norm_sq() / sl;
        let g = (2.0 / sl) * Sym2::new(xi.a, 2.0 * xi.b, xi.d);
        Ok((v, g))
    }
}

pub fn g_lambda_smooth(xi: Sym2, p: &EnergyParams) -> Result<f64> {
    g_lambda_smooth_with_grad(xi, p).map(|(v, _)| v)
}

pub fn g_lambda_smooth_grad(xi: Sym2, p: &EnergyParams) -> Result<Sym2> {
    g_lambda_smooth_with_grad(xi, p).map(|(_, g)| g)
}

pub fn limit_density_smooth_with_grad(xi: Sym2, eps: f64) -> Result<(f64, Sym2)> {
    check_eps(eps)?;
    let (r, g) = rho0_smooth_with_grad(xi, eps);
    Ok((2.0 * r, 2.0 * g))
}

pub fn limit_density_smooth(xi: Sym2, eps: f64) -> Result<f64> {
    limit_density_smooth_with_grad(xi, eps).map(|(v, _)| v)
}

pub fn limit_density_smooth_grad(xi: Sym2, eps: f64) -> Result<Sym2> {
    limit_density_smooth_with_grad(xi, eps).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(lambda: f64) -> EnergyParams {
        EnergyParams::new(lambda).unwrap()
    }

    fn ps(lambda: f64, eps: f64) -> EnergyParams {
        EnergyParams::with_smoothing(lambda, eps).unwrap()
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn params_validation() {
        assert!(EnergyParams::new(0.0).is_err());
        assert!(EnergyParams::new(-1.0).is_err());
        assert!(EnergyParams::with_smoothing(1.0, -0.1).is_err());
    }

    #[test]
    fn f_lambda_examples() {
        assert_eq!(f_lambda(Sym2::ZERO, &p(1.0)), 0.0);
        assert_eq!(f_lambda(Sym2::IDENTITY, &p(1.0)), 3.0);
        assert_eq!(f_lambda(Sym2::new(0.0, 1.0, 0.0), &p(4.0)), 6.0);
        // any nonzero entry leaves the zero state
        assert_eq!(f_lambda(Sym2::new(0.0, 0.0, 1e-300), &p(4.0)), 4.0);
    }

    #[test]
    fn envelope_examples() {
        assert_eq!(qc_envelope(Sym2::diag(1.0, 0.0), &p(4.0)), 4.0);
        assert_eq!(qc_envelope(Sym2::IDENTITY, &p(1.0)), 3.0);
        assert_eq!(qc_envelope(Sym2::ZERO, &p(3.7)), 0.0);
    }

    #[test]
    fn g_lambda_examples() {
        assert_eq!(g_lambda(Sym2::diag(1.0, 0.0), &p(4.0)), 2.0);
        assert!(close(
            g_lambda(Sym2::diag(1.0, -1.0), &p(100.0)),
            3.8,
            1e-15
        ));
        assert_eq!(g_lambda(Sym2::ZERO, &p(9.0)), 0.0);
        // consistent with the rescaled envelope on both branches
        for xi in [Sym2::new(0.3, -0.2, 0.7), Sym2::new(5.0, 2.0, -3.0)] {
            let pp = p(10.0);
            assert!(close(
                g_lambda(xi, &pp),
                qc_envelope(xi, &pp) / 10f64.sqrt(),
                1e-14
            ));
        }
    }

    #[test]
    fn limit_density_examples() {
        assert_eq!(limit_density(Sym2::diag(1.0, 0.0)), 2.0);
        assert_eq!(limit_density(Sym2::diag(1.0, -1.0)), 4.0);
        assert_eq!(limit_density(Sym2::ZERO), 0.0);
    }

    #[test]
    fn smooth_examples() {
        let v = g_lambda_smooth(Sym2::ZERO, &ps(1.0, 0.1)).unwrap();
        // 2·(2·0.1 − 0.1²) from eigenvalues (0, 0)
        assert!(close(v, 2.0 * (2.0 * 0.1 - 0.01), 1e-14));
        for eps in [1e-2, 1e-4, 1e-6] {
            let v = g_lambda_smooth(Sym2::diag(1.0, 0.0), &ps(4.0, eps)).unwrap();
            assert!((v - 2.0).abs() <= 4.0 * eps);
        }
        let big = Sym2::new(30.0, 4.0, -12.0);
        let pp = ps(9.0, 0.05);
        assert_eq!(
            g_lambda_smooth(big, &pp).unwrap(),
            (big.norm_sq() + 9.0) / 3.0
        );
        assert!(matches!(
            g_lambda_smooth(big, &p(9.0)),
            Err(Error::ZeroSmoothing)
        ));

        assert!(close(
            limit_density_smooth(Sym2::ZERO, 0.1).unwrap(),
            0.4,
            1e-15
        ));
        let v = limit_density_smooth(Sym2::diag(3.0, -4.0), 1e-4).unwrap();
        assert!((v - 14.0).abs() < 1e-6);
        assert!(limit_density_smooth(Sym2::ZERO, 0.0).is_err());
    }

    fn fd_grad(f: impl Fn(Sym2) -> f64, xi: Sym2, h: f64) -> Sym2 {
        let da = (f(xi + Sym2::new(h, 0.0, 0.0)) - f(xi - Sym2::new(h, 0.0, 0.0))) / (2.0 * h);
        let db = (f(xi + Sym2::new(0.0, h, 0.0)) - f(xi - Sym2::new(0.0, h, 0.0))) / (2.0 * h);
        let dd = (f(xi + Sym2::new(0.0, 0.0, h)) - f(xi - Sym2::new(0.0, 0.0, h))) / (2.0 * h);
        Sym2::new(da, db, dd)
    }

    fn grad_close(g: Sym2, fd: Sym2, rel: f64) -> bool {
        (g - fd).norm() <= rel * g.norm().max(fd.norm()).max(1e-8)
    }

    #[test]
    fn gradient_at_zero_vanishes() {
        let g = g_lambda_smooth_grad(Sym2::ZERO, &ps(4.0, 0.1)).unwrap();
        assert!(g.max_abs() < 1e-15);
        let g = limit_density_smooth_grad(Sym2::ZERO, 0.1).unwrap();
        assert!(g.max_abs() < 1e-15);
    }

    #[test]
    fn smooth_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pp = ps(10.0, 1e-2);
        let sl = pp.sqrt_lambda();
        let mut checked = 0;
        while checked < 200 {
            let xi = Sym2::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let rs = rho0_smooth(xi, pp.smooth_eps).unwrap();
            if (rs - sl).abs() < 1e-3 {
                continue;
            }
            let g = g_lambda_smooth_grad(xi, &pp).unwrap();
            let fd = fd_grad(|m| g_lambda_smooth(m, &pp).unwrap(), xi, 1e-6);
            assert!(grad_close(g, fd, 1e-5), "{xi:?}: {g:?} vs {fd:?}");
            checked += 1;
        }
    }

    #[test]
    fn gradient_large_lambda_is_twice_rho_gradient() {
        let pp = ps(1e6, 1e-3);
        let xi = Sym2::diag(2.0, 1.0);
        let g = g_lambda_smooth_grad(xi, &pp).unwrap();
        let fd = fd_grad(|m| g_lambda_smooth(m, &pp).unwrap(), xi, 1e-6);
        assert!(grad_close(g, fd, 1e-5));
        let rho_fd = fd_grad(|m| 2.0 * rho0_smooth(m, 1e-3).unwrap(), xi, 1e-6);
        assert!((g - rho_fd).norm() < 5e-3);
    }

    #[test]
    fn limit_gradient_examples() {
        let g = limit_density_smooth_grad(Sym2::diag(3.0, -4.0), 1e-3).unwrap();
        assert!((g - Sym2::diag(2.0, -2.0)).norm() < 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let xi = Sym2::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let g = limit_density_smooth_grad(xi, 1e-2).unwrap();
            let fd = fd_grad(|m| limit_density_smooth(m, 1e-2).unwrap(), xi, 1e-6);
            assert!(grad_close(g, fd, 1e-5));
        }
    }

    #[test]
    fn gradient_at_repeated_eigenvalues_is_finite() {
        let g = g_lambda_smooth_grad(Sym2::diag(0.5, 0.5), &ps(4.0, 1e-2)).unwrap();
        assert!(g.a.is_finite() && g.b.is_finite() && g.d.is_finite());
        assert!(g.b.abs() < 1e-12 && (g.a - g.d).abs() < 1e-12);
    }

    #[test]
    fn smoothed_density_converges_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<Sym2> = (0..500)
            .map(|_| {
                Sym2::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                )
            })
            .collect();
        let sup_err = |eps: f64| {
            let pp = ps(100.0, eps);
            samples
                .iter()
                .map(|&xi| (g_lambda_smooth(xi, &pp).unwrap() - g_lambda(xi, &pp)).abs())
                .fold(0.0, f64::max)
        };
        let mut prev = f64::INFINITY;
        for eps in [1e-1, 1e-2, 1e-3, 1e-4] {
            let e = sup_err(eps);
            assert!(e <= 4.0 * eps + 1e-12, "eps={eps} err={e}");
            assert!(e < prev);
            prev = e;
        }
    }

    #[test]
    fn pointwise_limit_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let xi = Sym2::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let lambda = xi.rho0().powi(2).max(1.0) * rng.gen_range(1.0..100.0);
            let gap = (g_lambda(xi, &p(lambda)) - limit_density(xi)).abs();
            let expect = 2.0 * xi.det().abs() / lambda.sqrt();
            assert!((gap - expect).abs() <= 1e-12 * limit_density(xi).max(1.0));
        }
    }

    fn sym() -> impl Strategy<Value = Sym2> {
        (-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64).prop_map(|(a, b, d)| Sym2::new(a, b, d))
    }

    fn lam() -> impl Strategy<Value = f64> {
        prop_oneof![Just(1.0), Just(10.0), Just(100.0), 0.01..1e4f64]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn lower_bound_half_rho(xi in sym(), l in lam()) {
            prop_assert!(0.5 * xi.rho0() <= g_lambda(xi, &p(l)) * (1.0 + 1e-14));
        }

        #[test]
        fn low_branch_upper_bound(xi in sym(), l in lam()) {
            let pp = p(l);
            if on_low_branch(xi, &pp) {
                prop_assert!(g_lambda(xi, &pp) <= 2.0 * xi.rho0() * (1.0 + 1e-14));
            }
        }

        #[test]
        fn envelope_below_density(xi in sym(), l in lam()) {
            let pp = p(l);
            prop_assert!(qc_envelope(xi, &pp) <= f_lambda(xi, &pp) * (1.0 + 1e-14));
        }

        #[test]
        fn branches_meet_on_the_interface(xi in sym(), l in lam()) {
            prop_assume!(xi.rho0() > 1e-6);
            let sl = l.sqrt();
            let x = (sl / xi.rho0()) * xi;
            let low = 2.0 * sl * x.rho0() - 2.0 * x.det().abs();
            let high = x.norm_sq() + l;
            prop_assert!(close(low, high, 1e-9), "{low} {high}");
        }

        #[test]
        fn scaling_law(xi in sym(), l in lam()) {
            let sl = l.sqrt();
            let lhs = qc_envelope(xi, &p(l));
            let rhs = l * qc_envelope((1.0 / sl) * xi, &p(1.0));
            prop_assert!(close(lhs, rhs, 1e-12), "{lhs} {rhs}");
        }

        #[test]
        fn quasi_triangle_with_sixteen(a in sym(), b in sym(), l in lam()) {
            let pp = p(l);
            let lhs = g_lambda(a + b, &pp);
            prop_assert!(lhs <= 16.0 * (g_lambda(a, &pp) + g_lambda(b, &pp)) * (1.0 + 1e-14) + 1e-300);
        }

        #[test]
        fn envelope_rotation_invariant(xi in sym(), l in lam(), theta in -7.0..7.0f64) {
            let pp = p(l);
            prop_assert!(close(qc_envelope(xi.conjugate(theta), &pp), qc_envelope(xi, &pp), 1e-12));
        }
    }
}
