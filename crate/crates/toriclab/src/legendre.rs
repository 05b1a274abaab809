//! Legendre duality between symplectic potentials `u(xi)` on the polytope
//! and Kahler potentials `f(x)` in log-affine coordinates.
//!
//! The gradient map `x = grad u(xi)` is inverted by damped Newton; dual
//! jets then follow from exact chain rules, so the dual side is evaluable
//! to fourth order without any dual-side grid:
//!   D^2 f = (D^2 u)^{-1}
//!   f_abc = -V_ap V_bq V_cr u_pqr                       (V = (D^2 u)^{-1})
//!   f_abcd = sum of three t-pairings - V^{x4} u_pqrs
//! with `t` the already-lowered third derivative of `f`.

use crate::field::{AnalyticPart, FieldError, SplitPotential};
use crate::linalg::{Mat2, Sym3, Sym4, Vec2};
use crate::polytope::Domain;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LegendreError {
    #[error("gradient inversion failed at x = ({}, {}): residual {residual:.3e} after {iters} iterations", .target.x, .target.y)]
    InversionFailed { target: Vec2, residual: f64, iters: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
}

pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITERS: usize = 50;

/// Moment coordinates of a point: `x = grad u(xi)`.
pub fn gradient_map(u: &SplitPotential, xi: Vec2) -> Result<Vec2, FieldError> {
    u.gradient(xi)
}

/// Solves `grad u(xi) = x` by damped Newton from `seed` (domain inner point
/// when `None`). Steps are shortened to stay strictly inside the domain and
/// halved until the residual decreases.
pub fn invert_gradient(
    u: &SplitPotential,
    x: Vec2,
    seed: Option<Vec2>,
) -> Result<Vec2, LegendreError> {
    let mut xi = seed.unwrap_or_else(|| u.domain.inner_point());
    let mut residual = (u.gradient(xi)? - x).norm();
    for iter in 0..NEWTON_MAX_ITERS {
        if residual <= NEWTON_TOL {
            return Ok(xi);
        }
        let jet = u.jet(xi, 2)?;
        let step = jet.inv_hessian.mul_vec(x - jet.gradient);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = xi + step * t;
            if u.domain.contains(cand) {
                if let Ok(g) = u.gradient(cand) {
                    let r = (g - x).norm();
                    if r < residual {
                        xi = cand;
                        residual = r;
                        accepted = true;
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(LegendreError::InversionFailed { target: x, residual, iters: iter + 1 });
        }
    }
    if residual <= NEWTON_TOL {
        Ok(xi)
    } else {
        Err(LegendreError::InversionFailed {
            target: x,
            residual,
            iters: NEWTON_MAX_ITERS,
        })
    }
}

fn sym3_to_array(t: &Sym3) -> [[[f64; 2]; 2]; 2] {
    let mut a = [[[0.0; 2]; 2]; 2];
    for (i, row) in a.iter_mut().enumerate() {
        for (j, col) in row.iter_mut().enumerate() {
            for (k, v) in col.iter_mut().enumerate() {
                *v = t.get(i, j, k);
            }
        }
    }
    a
}

fn sym4_to_array(t: &Sym4) -> [[[[f64; 2]; 2]; 2]; 2] {
    let mut a = [[[[0.0; 2]; 2]; 2]; 2];
    for (i, b1) in a.iter_mut().enumerate() {
        for (j, b2) in b1.iter_mut().enumerate() {
            for (k, b3) in b2.iter_mut().enumerate() {
                for (l, v) in b3.iter_mut().enumerate() {
                    *v = t.get(i, j, k, l);
                }
            }
        }
    }
    a
}

/// Dual third derivative: `f_abc = -V_ap V_bq V_cr u_pqr`.
pub fn dual_third(inv_hessian: &Mat2, third: &Sym3) -> Sym3 {
    let u3 = sym3_to_array(third);
    let v = inv_hessian;
    let mut out = Sym3::ZERO;
    for (a, b, c) in [(0, 0, 0), (0, 0, 1), (0, 1, 1), (1, 1, 1)] {
        let mut acc = 0.0;
        for p in 0..2 {
            for q in 0..2 {
                for r in 0..2 {
                    acc += v.get(a, p) * v.get(b, q) * v.get(c, r) * u3[p][q][r];
                }
            }
        }
        out.set(a, b, c, -acc);
    }
    out
}

/// Dual fourth derivative from primal jets; `t3` must be the dual third
/// derivative at the same point.
pub fn dual_fourth(inv_hessian: &Mat2, third: &Sym3, fourth: &Sym4, t3: &Sym3) -> Sym4 {
    let u3 = sym3_to_array(third);
    let u4 = sym4_to_array(fourth);
    let f3 = sym3_to_array(t3);
    let v = inv_hessian;
    let mut out = Sym4::ZERO;
    for (a, b, c, d) in [(0, 0, 0, 0), (0, 0, 0, 1), (0, 0, 1, 1), (0, 1, 1, 1), (1, 1, 1, 1)] {
        let mut acc = 0.0;
        for p in 0..2 {
            for q in 0..2 {
                for r in 0..2 {
                    // d/dx_d of -V_ap V_bq V_cr u_pqr; dV_xy/dx_d = f_xyd.
                    acc -= f3[a][p][d] * v.get(b, q) * v.get(c, r) * u3[p][q][r];
                    acc -= v.get(a, p) * f3[b][q][d] * v.get(c, r) * u3[p][q][r];
                    acc -= v.get(a, p) * v.get(b, q) * f3[c][r][d] * u3[p][q][r];
                    for s in 0..2 {
                        acc -= v.get(a, p) * v.get(b, q) * v.get(c, r) * v.get(d, s) * u4[p][q][r][s];
                    }
                }
            }
        }
        out.set(a, b, c, d, acc);
    }
    out
}

/// Legendre dual of a split potential, evaluable with exact jets through
/// gradient inversion and the dual chain rules.
#[derive(Debug, Clone)]
pub struct DualPotential {
    pub primal: SplitPotential,
}

impl DualPotential {
    fn pullback(&self, x: Vec2) -> Option<(Vec2, crate::field::JetSample)> {
        let xi = invert_gradient(&self.primal, x, None).ok()?;
        let jet = self.primal.jet(xi, 4).ok()?;
        Some((xi, jet))
    }
}

impl AnalyticPart for DualPotential {
    fn value(&self, x: Vec2) -> Option<f64> {
        let (xi, _) = self.pullback(x)?;
        let uval = self.primal.value(xi).ok()?;
        Some(x.dot(xi) - uval)
    }
    fn gradient(&self, x: Vec2) -> Option<Vec2> {
        Some(self.pullback(x)?.0)
    }
    fn hessian(&self, x: Vec2) -> Option<Mat2> {
        Some(self.pullback(x)?.1.inv_hessian)
    }
    fn third(&self, x: Vec2) -> Option<Sym3> {
        let (_, jet) = self.pullback(x)?;
        Some(dual_third(&jet.inv_hessian, &jet.third))
    }
    fn fourth(&self, x: Vec2) -> Option<Sym4> {
        let (_, jet) = self.pullback(x)?;
        let t3 = dual_third(&jet.inv_hessian, &jet.third);
        Some(dual_fourth(&jet.inv_hessian, &jet.third, jet.fourth.as_ref()?, &t3))
    }
    fn describe(&self) -> String {
        format!("legendre-dual({})", self.primal.label)
    }
}

/// A matched primal/dual pair sharing one potential.
#[derive(Debug, Clone)]
pub struct DualPair {
    pub u: SplitPotential,
    pub f: SplitPotential,
}

impl DualPair {
    /// Largest violation of the Fenchel identity
    /// `u(xi) + f(grad u(xi)) = <xi, grad u(xi)>` over sample points.
    pub fn fenchel_defect(&self, samples: &[Vec2]) -> Result<f64, LegendreError> {
        let mut worst: f64 = 0.0;
        for &xi in samples {
            let x = self.u.gradient(xi)?;
            let lhs = self.u.value(xi)? + self.f.value(x)?;
            worst = worst.max((lhs - xi.dot(x)).abs());
        }
        Ok(worst)
    }

    /// Largest deviation of `D^2 f (grad u) * D^2 u` from the identity.
    pub fn hessian_defect(&self, samples: &[Vec2]) -> Result<f64, LegendreError> {
        let mut worst: f64 = 0.0;
        for &xi in samples {
            let ju = self.u.jet(xi, 2)?;
            let x = ju.gradient;
            let jf = self.f.jet(x, 2)?;
            let prod = jf.hessian.mul_mat(&ju.hessian);
            worst = worst.max(prod.sub_mat(&Mat2::IDENTITY).max_abs());
        }
        Ok(worst)
    }
}

/// Builds the Legendre dual as a split potential on all of R^2 (the moment
/// image of a compact polytope interior). Jets come from the primal via
/// exact chain rules, matching the closed duals of the model potentials to
/// rounding error.
pub fn legendre_transform(u: &SplitPotential) -> DualPair {
    let label = format!("dual[{}]", u.label);
    let dual = DualPotential { primal: u.clone() };
    DualPair {
        u: u.clone(),
        f: SplitPotential::analytic_only(Domain::All, Arc::new(dual), label),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{HalfPlaneDualPart, LogSumExpPart};
    use crate::polytope::DelzantPolytope;

    #[test]
    fn inverts_gradient_on_square() {
        let u = SplitPotential::guillemin(DelzantPolytope::unit_square());
        let xi0 = Vec2::new(0.23, 0.71);
        let x = gradient_map(&u, xi0).unwrap();
        let xi = invert_gradient(&u, x, None).unwrap();
        assert!((xi - xi0).norm() < 1e-9);
        // Far targets map deep into the corner regions but still converge.
        let xi_far = invert_gradient(&u, Vec2::new(12.0, -9.0), None).unwrap();
        assert!(u.domain.contains(xi_far));
        let g = u.gradient(xi_far).unwrap();
        assert!((g - Vec2::new(12.0, -9.0)).norm() < 1e-9);
    }

    #[test]
    fn square_dual_matches_closed_form() {
        let pair = legendre_transform(&SplitPotential::guillemin(DelzantPolytope::unit_square()));
        let closed = LogSumExpPart::square_dual();
        for &(x, y) in &[(0.0, 0.0), (1.3, -0.4), (-2.0, 2.5)] {
            let p = Vec2::new(x, y);
            let jet = pair.f.jet(p, 4).unwrap();
            assert!((jet.value - closed.value(p).unwrap()).abs() < 1e-9);
            assert!((jet.gradient - closed.gradient(p).unwrap()).norm() < 1e-10);
            assert!(jet.hessian.sub_mat(&closed.hessian(p).unwrap()).max_abs() < 1e-10);
            let t3c = closed.third(p).unwrap();
            let t4c = closed.fourth(p).unwrap();
            for k in 0..4 {
                assert!((jet.third.0[k] - t3c.0[k]).abs() < 1e-9);
            }
            for k in 0..5 {
                assert!((jet.fourth.unwrap().0[k] - t4c.0[k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn simplex_dual_matches_closed_form() {
        let pair =
            legendre_transform(&SplitPotential::guillemin(DelzantPolytope::standard_simplex()));
        let closed = LogSumExpPart::simplex_dual();
        let p = Vec2::new(0.7, -0.9);
        let jet = pair.f.jet(p, 4).unwrap();
        assert!((jet.value - closed.value(p).unwrap()).abs() < 1e-10);
        assert!(jet.hessian.sub_mat(&closed.hessian(p).unwrap()).max_abs() < 1e-10);
        for k in 0..5 {
            assert!((jet.fourth.unwrap().0[k] - closed.fourth(p).unwrap().0[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn half_plane_dual_matches_closed_form() {
        let u = SplitPotential::half_plane_patch(50.0, 0.0, 50.0);
        let pair = legendre_transform(&u);
        let closed = HalfPlaneDualPart;
        let p = Vec2::new(0.8, 1.1);
        let jet = pair.f.jet(p, 4).unwrap();
        assert!((jet.value - closed.value(p).unwrap()).abs() < 1e-9);
        assert!(jet.hessian.sub_mat(&closed.hessian(p).unwrap()).max_abs() < 1e-9);
        for k in 0..5 {
            assert!((jet.fourth.unwrap().0[k] - closed.fourth(p).unwrap().0[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn fenchel_and_hessian_defects_vanish() {
        let pair = legendre_transform(&SplitPotential::guillemin(DelzantPolytope::unit_square()));
        let samples = [
            Vec2::new(0.5, 0.5),
            Vec2::new(0.1, 0.8),
            Vec2::new(0.9, 0.2),
            Vec2::new(0.33, 0.44),
        ];
        assert!(pair.fenchel_defect(&samples).unwrap() < 1e-10);
        assert!(pair.hessian_defect(&samples).unwrap() < 1e-9);
    }

    #[test]
    fn dual_jets_match_finite_differences() {
        // Chain-rule third/fourth derivatives vs FD of the dual Hessian on
        // a potential with no special structure.
        // 2x2 square with the (2,2) corner chopped off.
        let poly = DelzantPolytope::from_normals(&[
            ((1, 0), 0.0),
            ((0, 1), 0.0),
            ((-1, 0), -2.0),
            ((-1, -1), -3.0),
            ((0, -1), -2.0),
        ])
        .unwrap();
        let pair = legendre_transform(&SplitPotential::guillemin(poly));
        let p = Vec2::new(0.4, -0.7);
        let h = 1e-5;
        let jet = pair.f.jet(p, 4).unwrap();
        let hess = |q: Vec2| pair.f.jet(q, 2).unwrap().hessian;
        let fd_111 = (hess(Vec2::new(p.x + h, p.y)).a - hess(Vec2::new(p.x - h, p.y)).a) / (2.0 * h);
        let fd_122 = (hess(Vec2::new(p.x + h, p.y)).d - hess(Vec2::new(p.x - h, p.y)).d) / (2.0 * h);
        assert!((jet.third.get(0, 0, 0) - fd_111).abs() < 1e-5);
        assert!((jet.third.get(0, 1, 1) - fd_122).abs() < 1e-5);
        let third = |q: Vec2| {
            let j = pair.f.jet(q, 3).unwrap();
            j.third
        };
        let fd_1112 = (third(Vec2::new(p.x, p.y + h)).get(0, 0, 0)
            - third(Vec2::new(p.x, p.y - h)).get(0, 0, 0))
            / (2.0 * h);
        assert!((jet.fourth.unwrap().get(0, 0, 0, 1) - fd_1112).abs() < 1e-4);
    }

    #[test]
    fn double_dual_recovers_potential() {
        let u = SplitPotential::guillemin(DelzantPolytope::unit_square());
        let pair = legendre_transform(&u);
        let double = legendre_transform(&pair.f);
        for &(x, y) in &[(0.5, 0.5), (0.2, 0.7)] {
            let xi = Vec2::new(x, y);
            let a = u.value(xi).unwrap();
            let b = double.f.value(xi).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }
}
