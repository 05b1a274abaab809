//! The Abreu scalar-curvature operator on both sides of the Legendre
//! transform, and a prescribed-curvature solver for `S(u) = K`.
//!
//! On the polytope side `S(u) = -sum U^{ij} w_ij` with `w = det(u_ij)^{-1}`
//! and `U` the cofactor matrix of the Hessian; on the complex side
//! `S(f) = -sum f^{ij} (log det f_kl)_ij`. The two sides are related by
//! `S(f)(x) = S(u)(grad f(x))`, which the tests exercise over genuinely
//! independent code paths: the `u` side differentiates a materialized `w`
//! field while the `f` side contracts closed-form jets of `log det`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Expr, ExprError};
use crate::field::{FieldError, Grid, NodeClass, ScalarField, SplitPotential};
use crate::invariants::{log_det_gradient, log_det_hessian};
use crate::linalg::{Mat2, Vec2};
use crate::polytope::{DelzantPolytope, Domain};

#[derive(Debug, Error)]
pub enum AbreuError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    /// The current iterate itself violates convexity. With validated
    /// acceptance this can only happen through the initial guess, so it
    /// signals a broken precondition rather than a step-size problem.
    #[error("potential lost convexity at iteration {iteration}")]
    ConvexityLost { iteration: usize },
    /// No acceptable step exists within the halving budget, or the residual
    /// exploded. Reported for oversized pseudo-time steps instead of
    /// crashing.
    #[error("relaxation diverged at iteration {iteration} (sup residual {linf:.3e})")]
    Diverged { iteration: usize, linf: f64 },
    #[error(
        "no convergence in {iterations} iterations (sup residual {linf:.3e}, tol {tol:.3e})"
    )]
    MaxIterations { iterations: usize, linf: f64, tol: f64 },
    /// log|S| was requested where the curvature crosses or touches zero, so
    /// its logarithmic gradient does not exist.
    #[error("curvature vanishes near ({:.4}, {:.4}), log|S| undefined", point.x, point.y)]
    VanishingCurvature { point: Vec2 },
}

/// Ring depth (in grid units) of the nodes where the equation is enforced
/// and psi is evolved; everything shallower is closed by quadratic-ray
/// extrapolation, since the singular boundary behavior is carried entirely
/// by the analytic part.
const UPDATE_DEPTH: u16 = 3;

/// Budget of step halvings inside one iteration before the solver gives up.
const MAX_HALVINGS: usize = 20;

// ---------------------------------------------------------------------------
// prescribed curvature
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
enum Curvature {
    Constant(f64),
    Formula { expr: Expr, src: String },
}

/// Prescribed scalar curvature for `S(u) = K`: a constant or a closed-form
/// expression in `(xi1, xi2)`, plus an optional supremum bound consumed by
/// the monitor inequalities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvatureSpec {
    curvature: Curvature,
    /// Bound `N >= sup |K|` (and the derivatives the caller vouches for)
    /// used by the Tchebychev-type monitors; not needed to solve.
    pub sup_bound: Option<f64>,
}

impl CurvatureSpec {
    pub fn constant(k: f64) -> Self {
        CurvatureSpec { curvature: Curvature::Constant(k), sup_bound: None }
    }

    /// `K = a0 + a1*xi1 + a2*xi2`.
    pub fn affine(a0: f64, a1: f64, a2: f64) -> Self {
        let expr = Expr::Add(
            Box::new(Expr::Add(
                Box::new(Expr::Const(a0)),
                Box::new(Expr::Mul(Box::new(Expr::Const(a1)), Box::new(Expr::Xi(0)))),
            )),
            Box::new(Expr::Mul(Box::new(Expr::Const(a2)), Box::new(Expr::Xi(1)))),
        );
        let src = format!("{a0} + {a1}*xi1 + {a2}*xi2");
        CurvatureSpec { curvature: Curvature::Formula { expr, src }, sup_bound: None }
    }

    /// Parses an expression in `xi1`, `xi2` (see the `expr` module grammar).
    pub fn parse(src: &str) -> Result<Self, ExprError> {
        let expr = Expr::parse(src)?;
        Ok(CurvatureSpec {
            curvature: Curvature::Formula { expr, src: src.to_string() },
            sup_bound: None,
        })
    }

    pub fn with_sup_bound(mut self, n: f64) -> Self {
        self.sup_bound = Some(n);
        self
    }

    pub fn eval(&self, xi: Vec2) -> f64 {
        match &self.curvature {
            Curvature::Constant(k) => *k,
            Curvature::Formula { expr, .. } => expr.eval(xi),
        }
    }

    pub fn describe(&self) -> String {
        match &self.curvature {
            Curvature::Constant(k) => format!("K = {k}"),
            Curvature::Formula { src, .. } => format!("K = {src}"),
        }
    }

    /// Indices of polytope edges on which `K` vanishes somewhere (sampled on
    /// the open edge). A vanishing edge puts the boundary outside the
    /// nondegenerate class, so solvers warn about it.
    pub fn vanishing_edges(&self, poly: &DelzantPolytope) -> Vec<usize> {
        let scale = poly.polygon().widths();
        let tol = 1e-12 * (1.0 + scale.x.max(scale.y));
        let mut bad = Vec::new();
        for (a, _) in poly.edges().iter().enumerate() {
            let ends: Vec<Vec2> = poly
                .vertices()
                .iter()
                .copied()
                .filter(|&v| poly.edges()[a].l(v).abs() < 1e-9)
                .collect();
            if ends.len() != 2 {
                continue;
            }
            let vanishes = (1..32).any(|k| {
                let t = k as f64 / 32.0;
                let p = ends[0] * (1.0 - t) + ends[1] * t;
                self.eval(p).abs() <= tol
            });
            if vanishes {
                bad.push(a);
            }
        }
        bad
    }
}

// ---------------------------------------------------------------------------
// the operator
// ---------------------------------------------------------------------------

/// Fourth-order central first-derivative stencil (divide by `h`).
const D1_4TH: [(isize, f64); 4] =
    [(-2, 1.0 / 12.0), (-1, -2.0 / 3.0), (1, 2.0 / 3.0), (2, -1.0 / 12.0)];

/// Fourth-order central second-derivative stencil (divide by `h^2`).
const D2_4TH: [(isize, f64); 5] = [
    (-2, -1.0 / 12.0),
    (-1, 4.0 / 3.0),
    (0, -5.0 / 2.0),
    (1, 4.0 / 3.0),
    (2, -1.0 / 12.0),
];

/// Second derivatives `(w_xx, w_xy, w_yy)` of a 5x5 sample block with
/// spacing `h`; exact through fifth-degree polynomials per axis, which
/// covers the closed-form `w` of both model polytopes exactly.
fn block_second_derivs(w: &[[f64; 5]; 5], h: f64) -> (f64, f64, f64) {
    let mut wxx = 0.0;
    let mut wyy = 0.0;
    for (off, c) in D2_4TH {
        wxx += c * w[(2 + off) as usize][2];
        wyy += c * w[2][(2 + off) as usize];
    }
    let mut wxy = 0.0;
    for (ox, cx) in D1_4TH {
        for (oy, cy) in D1_4TH {
            wxy += cx * cy * w[(2 + ox) as usize][(2 + oy) as usize];
        }
    }
    (wxx / (h * h), wxy / (h * h), wyy / (h * h))
}

/// Step for the local stencil that differentiates `w` around a point: small
/// against the domain, clear of the boundary (the block reaches `2h sqrt 2`
/// diagonally), and never below the spacing of a gridded psi, where finer
/// probes would only re-read one smooth interpolation cell.
fn local_step(u: &SplitPotential, xi: Vec2) -> f64 {
    let scale = u.domain.min_width();
    let mut h = if scale.is_finite() { 5e-3 * scale } else { 5e-3 };
    if let Some(psi) = &u.psi {
        h = h.max(psi.grid.h);
    }
    let clear = u.domain.clearance(xi);
    if clear.is_finite() {
        h = h.min(clear / 3.0);
    }
    h.max(1e-8)
}

fn contract_cofactor(cof: &Mat2, wxx: f64, wxy: f64, wyy: f64) -> f64 {
    -(cof.get(0, 0) * wxx + 2.0 * cof.get(0, 1) * wxy + cof.get(1, 1) * wyy)
}

/// `S(u) = -sum U^{ij} w_ij` at a point, with `w = det(u_ij)^{-1}`
/// materialized on a local block and differentiated there. This is the
/// default route; [`abreu_s_u_direct`] is the jet-expansion cross-check.
pub fn abreu_s_u(u: &SplitPotential, xi: Vec2) -> Result<f64, AbreuError> {
    let jet = u.jet(xi, 2)?;
    let h = local_step(u, xi);
    let mut w = [[0.0f64; 5]; 5];
    for (ix, col) in w.iter_mut().enumerate() {
        for (iy, v) in col.iter_mut().enumerate() {
            let q = xi + Vec2::new((ix as f64 - 2.0) * h, (iy as f64 - 2.0) * h);
            *v = 1.0 / u.jet(q, 2)?.det_hessian;
        }
    }
    let (wxx, wxy, wyy) = block_second_derivs(&w, h);
    Ok(contract_cofactor(&jet.hessian.cofactor(), wxx, wxy, wyy))
}

/// Direct fourth-order expansion from a single jet. With `B = D^2 u` and
/// `L = log det B`, differentiating `w = (det B)^{-1}` gives
/// `w_i = -w L_i` and `w_ij = w (L_i L_j - L_ij)`, and since
/// `U^{ij} = det B * B^{ij}` the operator collapses to
/// `S(u) = B^{ij} L_ij - B^{ij} L_i L_j`.
pub fn abreu_s_u_direct(u: &SplitPotential, xi: Vec2) -> Result<f64, AbreuError> {
    let jet = u.jet(xi, 4)?;
    let li = log_det_gradient(&jet);
    let lij = log_det_hessian(&jet);
    Ok(jet.inv_hessian.mul_mat(&lij).trace() - jet.inv_hessian.form(li, li))
}

/// `S(f) = -sum f^{ij} d^2/dx_i dx_j log det(f_kl)` on the complex side,
/// contracted from one order-4 jet.
pub fn abreu_s_f(f: &SplitPotential, x: Vec2) -> Result<f64, AbreuError> {
    let jet = f.jet(x, 4)?;
    let lij = log_det_hessian(&jet);
    Ok(-jet.inv_hessian.mul_mat(&lij).trace())
}

/// Squared length of `grad log |S(f)|` in the metric of `f` at `x`. The
/// curvature gradient is a fifth derivative of `f` in disguise, so it is
/// taken by central differences at step `h`; the index is raised through
/// the inverse Hessian like every other gradient norm here.
pub fn grad_log_s_sq(f: &SplitPotential, x: Vec2, h: f64) -> Result<f64, AbreuError> {
    let jet = f.jet(x, 2)?;
    let mut g = Vec2::ZERO;
    for ax in 0..2 {
        let step = Vec2::ZERO.with_comp(ax, h);
        let sp = abreu_s_f(f, x + step)?;
        let sm = abreu_s_f(f, x - step)?;
        if sp * sm <= 0.0 {
            return Err(AbreuError::VanishingCurvature { point: x });
        }
        g = g.with_comp(ax, (sp.abs().ln() - sm.abs().ln()) / (2.0 * h));
    }
    Ok(jet.inv_hessian.form(g, g))
}

/// Certifies the operator orientation: the unit-square Guillemin potential
/// must give `S = +4`. With that orientation the linearization
/// `dS(phi) = d_i d_j (u^{ik} u^{jl} phi_kl)` is positive semidefinite
/// (pair against `phi` and integrate by parts twice), so the stable
/// relaxation is `psi <- psi - tau * (S(u) - K)`. Returns the sign the
/// solver multiplies into its update.
pub fn sign_convention_probe() -> i32 {
    let u = SplitPotential::guillemin(DelzantPolytope::unit_square());
    let s = abreu_s_u_direct(&u, Vec2::new(0.37, 0.52)).expect("probe point is interior");
    assert!(
        (s.abs() - 4.0).abs() < 1e-6,
        "square probe expected |S| = 4, got {s}"
    );
    if s > 0.0 {
        1
    } else {
        -1
    }
}

// ---------------------------------------------------------------------------
// residual on a grid
// ---------------------------------------------------------------------------

/// `S(u) - K` sampled on the enforcement nodes of a grid, with norms.
/// The field is zero outside ring depth [`UPDATE_DEPTH`]; `l2` is the
/// area-weighted discrete norm `sqrt(sum r^2 h^2)` and `linf` the sup over
/// the same nodes.
#[derive(Debug, Clone)]
pub struct Residual {
    pub field: ScalarField,
    pub l2: f64,
    pub linf: f64,
    pub nodes: usize,
}

/// Fills the listed nodes of `f` by multi-pass quadratic-ray settling from
/// interior nodes that already carry values, mirroring the boundary closure
/// of psi itself.
fn settle_from_rays(f: &mut ScalarField, targets: &[(usize, usize)]) {
    const RAYS: [(isize, isize); 8] =
        [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
    let grid = f.grid.clone();
    let (nx, ny) = (grid.nx as isize, grid.ny as isize);
    for &(i, j) in targets {
        f.set(i, j, f64::NAN);
    }
    let value = |vals: &[f64], i: isize, j: isize| -> Option<f64> {
        if i < 0 || j < 0 || i >= nx || j >= ny {
            return None;
        }
        if grid.class(i as usize, j as usize) != NodeClass::Interior {
            return None;
        }
        let v = vals[grid.index(i as usize, j as usize)];
        if v.is_nan() {
            None
        } else {
            Some(v)
        }
    };
    let mut remaining: Vec<(isize, isize)> =
        targets.iter().map(|&(i, j)| (i as isize, j as isize)).collect();
    // Snapshot per pass: sources must come from earlier passes, never
    // from neighbors settled moments ago in the same sweep.
    while !remaining.is_empty() {
        let snapshot = f.values().to_vec();
        let mut next = Vec::with_capacity(remaining.len());
        let mut progressed = false;
        for &(i, j) in &remaining {
            let mut acc = 0.0;
            let mut cnt = 0;
            for (di, dj) in RAYS {
                if let (Some(a), Some(b), Some(c)) = (
                    value(&snapshot, i + di, j + dj),
                    value(&snapshot, i + 2 * di, j + 2 * dj),
                    value(&snapshot, i + 3 * di, j + 3 * dj),
                ) {
                    acc += 3.0 * a - 3.0 * b + c;
                    cnt += 1;
                }
            }
            if cnt > 0 {
                f.set(i as usize, j as usize, acc / cnt as f64);
                progressed = true;
            } else {
                next.push((i, j));
            }
        }
        if !progressed {
            for &(i, j) in &next {
                'nearest: for r in 1..nx.max(ny) {
                    for dj in -r..=r {
                        for di in -r..=r {
                            if let Some(v) = value(&snapshot, i + di, j + dj) {
                                f.set(i as usize, j as usize, v);
                                break 'nearest;
                            }
                        }
                    }
                }
            }
            break;
        }
        remaining = next;
    }
}

/// `S(u)` at the listed nodes via the materialized-w route: `w` is sampled
/// from jets on every interior node and differentiated with the radius-2
/// stencils, the cofactor comes from the node jet. Deep nodes only read
/// interior `w` values, so no ghost fill is needed.
///
/// Shallow nodes live off extrapolated psi values whose finite-difference
/// Hessian is not trustworthy, so a convexity failure there only demotes
/// the node to ray-settled `w`; at enforcement depth it is a hard error.
fn s_u_on_grid(
    u: &SplitPotential,
    grid: &Arc<Grid>,
    nodes: &[(usize, usize)],
) -> Result<Vec<f64>, AbreuError> {
    let interior: Vec<(usize, usize)> = grid.interior_nodes().collect();
    let wvals: Vec<Result<f64, FieldError>> = interior
        .par_iter()
        .map(|&(i, j)| Ok(1.0 / u.jet(grid.point(i, j), 2)?.det_hessian))
        .collect();
    let mut w = ScalarField::zeros(grid.clone());
    let mut demoted = Vec::new();
    for (&(i, j), v) in interior.iter().zip(wvals) {
        match v {
            Ok(v) => w.set(i, j, v),
            // Near the wall the extension under psi is untrustworthy (or,
            // when evaluating on a finer grid than psi's, not even
            // differentiable); those nodes get a ray-settled w instead.
            Err(
                FieldError::NotConvexHere { .. } | FieldError::StencilOutOfDomain { .. },
            ) if grid.depth(i, j) < UPDATE_DEPTH => {
                demoted.push((i, j));
            }
            Err(e) => return Err(e.into()),
        }
    }
    if !demoted.is_empty() {
        settle_from_rays(&mut w, &demoted);
    }
    let h = grid.h;
    let svals: Result<Vec<f64>, FieldError> = nodes
        .par_iter()
        .map(|&(i, j)| {
            let jet = u.jet(grid.point(i, j), 2)?;
            let mut blk = [[0.0f64; 5]; 5];
            for (ix, col) in blk.iter_mut().enumerate() {
                for (iy, v) in col.iter_mut().enumerate() {
                    *v = w.get(i + ix - 2, j + iy - 2);
                }
            }
            let (wxx, wxy, wyy) = block_second_derivs(&blk, h);
            Ok(contract_cofactor(&jet.hessian.cofactor(), wxx, wxy, wyy))
        })
        .collect();
    Ok(svals?)
}

/// Residual `S(u) - K` over the enforcement nodes of `grid`.
pub fn residual(
    u: &SplitPotential,
    spec: &CurvatureSpec,
    grid: &Arc<Grid>,
) -> Result<Residual, AbreuError> {
    let deep: Vec<(usize, usize)> = grid.deep_nodes(UPDATE_DEPTH).collect();
    if deep.is_empty() {
        return Err(FieldError::SpacingTooCoarse { interior: grid.interior_count() }.into());
    }
    // A psi gridded elsewhere (e.g. a certificate run on a refined grid) is
    // resampled first; see SplitPotential::regrid.
    let resampled = match &u.psi {
        Some(psi) if !psi.grid.same_layout(grid) => Some(u.regrid(grid, UPDATE_DEPTH)?),
        _ => None,
    };
    let u = resampled.as_ref().unwrap_or(u);
    let s = s_u_on_grid(u, grid, &deep)?;
    let mut field = ScalarField::zeros(grid.clone());
    let mut l2 = 0.0;
    let mut linf = 0.0f64;
    for (&(i, j), sv) in deep.iter().zip(&s) {
        let r = sv - spec.eval(grid.point(i, j));
        field.set(i, j, r);
        l2 += r * r;
        linf = linf.max(r.abs());
    }
    Ok(Residual { field, l2: (l2 * grid.h * grid.h).sqrt(), linf, nodes: deep.len() })
}

// ---------------------------------------------------------------------------
// solver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveMode {
    /// Explicit pseudo-time relaxation with adaptive step.
    Relax,
    /// Newton steps through a banded direct solve of the assembled
    /// linearization.
    Newton,
}

impl fmt::Display for SolveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SolveMode::Relax => "relax",
            SolveMode::Newton => "newton",
        })
    }
}

impl FromStr for SolveMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "relax" => Ok(SolveMode::Relax),
            "newton" => Ok(SolveMode::Newton),
            other => Err(format!("unknown solve mode `{other}` (expected relax|newton)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    /// Grid spacing; `None` spans the longest polytope width with 64 cells.
    pub h: Option<f64>,
    /// Initial pseudo-time step; `None` starts at the stability estimate
    /// `0.5 / max diag(dS)`.
    pub tau0: Option<f64>,
    /// Sup-norm residual target.
    pub tol: f64,
    pub max_iter: usize,
    pub mode: SolveMode,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { h: None, tau0: None, tol: 1e-4, max_iter: 400, mode: SolveMode::Relax }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    /// Accepted update steps (0 when the initial guess already meets tol).
    pub iterations: usize,
    /// Norm histories indexed by accepted iterate, entry 0 = initial state.
    pub residual_l2: Vec<f64>,
    pub residual_linf: Vec<f64>,
    /// Trial steps rejected for breaking convexity.
    pub convexity_violations: usize,
    /// Total affine gauge `c + <b, xi>` removed from psi.
    pub gauge_constant: f64,
    pub gauge_slope: Vec2,
    pub tau_final: f64,
    pub mode: SolveMode,
    pub h: f64,
    pub tol: f64,
    /// Enforcement nodes (ring depth >= 3).
    pub nodes: usize,
    pub warnings: Vec<String>,
    /// Final psi (also carried by the returned potential); skipped in JSON,
    /// exported separately as a field snapshot.
    #[serde(skip)]
    pub psi: ScalarField,
    /// Wall-clock time; skipped in JSON so reports stay byte-deterministic.
    #[serde(skip)]
    pub seconds: f64,
}

impl SolveReport {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("iter,residual_l2,residual_linf\n");
        for (k, (l2, linf)) in self.residual_l2.iter().zip(&self.residual_linf).enumerate() {
            out.push_str(&format!(
                "{k},{},{}\n",
                crate::field::fmt_f64(*l2),
                crate::field::fmt_f64(*linf)
            ));
        }
        out
    }
}

/// Least-squares affine fit `c + <b, xi>` over the interior nodes.
fn affine_fit(f: &ScalarField) -> (f64, Vec2) {
    let grid = &f.grid;
    let mut n = 0.0;
    let mut mean = Vec2::ZERO;
    let mut mv = 0.0;
    for (i, j) in grid.interior_nodes() {
        n += 1.0;
        mean += grid.point(i, j);
        mv += f.get(i, j);
    }
    if n == 0.0 {
        return (0.0, Vec2::ZERO);
    }
    mean = mean / n;
    mv /= n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    let mut sv = Vec2::ZERO;
    for (i, j) in grid.interior_nodes() {
        let d = grid.point(i, j) - mean;
        let v = f.get(i, j) - mv;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
        sv += d * v;
    }
    let b = Mat2::sym(sxx, sxy, syy)
        .inverse()
        .map(|inv| inv.mul_vec(sv))
        .unwrap_or(Vec2::ZERO);
    (mv - b.dot(mean), b)
}

fn subtract_affine(f: &mut ScalarField, c: f64, b: Vec2) {
    let grid = f.grid.clone();
    for (i, j) in grid.nodes() {
        if grid.class(i, j) != NodeClass::Outside {
            let p = grid.point(i, j);
            f.set(i, j, f.get(i, j) - c - b.dot(p));
        }
    }
}

/// Frozen-coefficient diagonal of the linearization
/// `dS(phi) = d_i d_j (u^{ik} u^{jl} phi_kl)`: central stencil weights are
/// `6/h^4` on the pure fourth derivatives and `4/h^4` on `d_xx d_yy`, with
/// coefficient `2 g11 g22 + 4 g12^2` collected over index arrangements.
fn linearization_diag(inv_hessian: &Mat2, h: f64) -> f64 {
    let g11 = inv_hessian.get(0, 0);
    let g12 = inv_hessian.get(0, 1);
    let g22 = inv_hessian.get(1, 1);
    (6.0 * g11 * g11 + 6.0 * g22 * g22 + 4.0 * (2.0 * g11 * g22 + 4.0 * g12 * g12)) / h.powi(4)
}

/// Banded matrix in LAPACK-style column-major band storage with room for
/// partial-pivoting fill: entry `(i, j)` lives at band row `kl + ku + i - j`
/// of column `j`, where `ku` already includes the extra `kl` fill
/// diagonals.
struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    lda: usize,
    ab: Vec<f64>,
    ipiv: Vec<usize>,
}

impl BandedLu {
    fn new(n: usize, bandwidth: usize) -> Self {
        let kl = bandwidth.min(n.saturating_sub(1));
        let ku = kl + kl;
        let lda = kl + ku + 1;
        BandedLu { n, kl, ku, lda, ab: vec![0.0; lda * n], ipiv: vec![0; n] }
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i + self.ku >= j && j + self.kl >= i, "({i},{j}) outside band");
        self.ku + i - j + j * self.lda
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.ab[self.slot(i, j)]
    }

    #[inline]
    fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j);
        self.ab[s] += v;
    }

    /// Row `i` of `A v` summed over the stored band.
    fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.kl);
                let hi = (i + self.ku).min(self.n - 1);
                (lo..=hi).map(|j| self.get(i, j) * v[j]).sum()
            })
            .collect()
    }

    /// In-place LU factorization with partial pivoting; `Err` on a zero or
    /// non-finite pivot.
    fn factor(&mut self) -> Result<(), ()> {
        let (n, kl, ku, lda) = (self.n, self.kl, self.ku, self.lda);
        for j in 0..n {
            let jmax = (j + kl).min(n - 1);
            let mut piv = j;
            let mut pmax = self.get(j, j).abs();
            for i in (j + 1)..=jmax {
                let v = self.get(i, j).abs();
                if v > pmax {
                    pmax = v;
                    piv = i;
                }
            }
            self.ipiv[j] = piv;
            if pmax == 0.0 || !pmax.is_finite() {
                return Err(());
            }
            let ju = (j + ku).min(n - 1);
            if piv != j {
                for c in j..=ju {
                    let (a, b) = (self.get(j, c), self.get(piv, c));
                    let (sa, sb) = (self.slot(j, c), self.slot(piv, c));
                    self.ab[sa] = b;
                    self.ab[sb] = a;
                }
            }
            let d = self.get(j, j);
            for i in (j + 1)..=jmax {
                let s = self.slot(i, j);
                self.ab[s] /= d;
            }
            if jmax == j {
                continue;
            }
            let rows = jmax - j;
            let mult_base = self.slot(j + 1, j);
            for c in (j + 1)..=ju {
                let ajc = self.get(j, c);
                if ajc == 0.0 {
                    continue;
                }
                let tgt_base = self.slot(j + 1, c);
                debug_assert!(mult_base + rows <= c * lda && tgt_base + rows <= self.ab.len());
                let (lo, hi) = self.ab.split_at_mut(c * lda);
                let mult = &lo[mult_base..mult_base + rows];
                let tgt = &mut hi[tgt_base - c * lda..tgt_base - c * lda + rows];
                for (t, m) in tgt.iter_mut().zip(mult) {
                    *t -= m * ajc;
                }
            }
        }
        Ok(())
    }

    /// Solves `A x = b` in place using the computed factorization.
    fn solve(&self, b: &mut [f64]) {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        for j in 0..n {
            let p = self.ipiv[j];
            if p != j {
                b.swap(j, p);
            }
            let imax = (j + kl).min(n - 1);
            for i in (j + 1)..=imax {
                b[i] -= self.get(i, j) * b[j];
            }
        }
        for j in (0..n).rev() {
            b[j] /= self.get(j, j);
            let lo = j.saturating_sub(ku);
            for i in lo..j {
                b[i] -= self.get(i, j) * b[j];
            }
        }
    }
}

/// Second-order jet stencil of the Hessian at a node: per offset `(di, dj)`
/// the weights of psi in `(B_11, B_12, B_22)`, before the `1/h^2` factor.
const HESSIAN_STENCIL: [(isize, isize, f64, f64, f64); 9] = [
    (-1, -1, 0.0, 0.25, 0.0),
    (0, -1, 0.0, 0.0, 1.0),
    (1, -1, 0.0, -0.25, 0.0),
    (-1, 0, 1.0, 0.0, 0.0),
    (0, 0, -2.0, 0.0, -2.0),
    (1, 0, 1.0, 0.0, 0.0),
    (-1, 1, 0.0, -0.25, 0.0),
    (0, 1, 0.0, 0.0, 1.0),
    (1, 1, 0.0, 0.25, 0.0),
];

/// Assembles the exact Jacobian of the reduced residual map over the update
/// nodes. Writing `S_m = -U_m : D^2 w` the derivative has the chain through
/// `w` at each stencil node, `dw_n = -w_n^2 U_n : dB_n`, plus the variation
/// of the row's own cofactor `U_m`. Psi variations at shallow and margin
/// nodes follow the deep values through the extrapolation response `resp`,
/// so those columns are redistributed onto the deep nodes each row actually
/// depends on. Columns through a demoted (ray-settled) `w` node are
/// dropped, freezing that value; the line search absorbs the mismatch.
///
/// The reduced map is invariant under affine increments (the extension is
/// exact on them and the Hessian stencils annihilate them), so the raw
/// matrix has a three-dimensional kernel; a relative diagonal shift of
/// `1e-8` makes the factorization well posed, and the gauge fix removes the
/// affine component the shift lets through.
fn assemble_jacobian(
    u: &SplitPotential,
    grid: &Arc<Grid>,
    deep: &[(usize, usize)],
    resp: &[Option<Vec<(usize, f64)>>],
) -> Result<BandedLu, AbreuError> {
    let n = deep.len();
    let mut dense = vec![usize::MAX; grid.nx * grid.ny];
    for (k, &(i, j)) in deep.iter().enumerate() {
        dense[grid.index(i, j)] = k;
    }

    // w and w^2 * cofactor per interior node; demoted nodes keep a settled
    // w value and a zero coefficient.
    let interior: Vec<(usize, usize)> = grid.interior_nodes().collect();
    let jets: Vec<Result<(f64, Mat2), FieldError>> = interior
        .par_iter()
        .map(|&(i, j)| {
            let jet = u.jet(grid.point(i, j), 2)?;
            let w = 1.0 / jet.det_hessian;
            Ok((w, jet.hessian.cofactor()))
        })
        .collect();
    let mut w = ScalarField::zeros(grid.clone());
    let mut coef = vec![Mat2::ZERO; grid.nx * grid.ny];
    let mut demoted = Vec::new();
    for (&(i, j), v) in interior.iter().zip(jets) {
        match v {
            Ok((wv, cof)) => {
                w.set(i, j, wv);
                coef[grid.index(i, j)] = cof.scale(wv * wv);
            }
            Err(
                FieldError::NotConvexHere { .. } | FieldError::StencilOutOfDomain { .. },
            ) if grid.depth(i, j) < UPDATE_DEPTH => {
                demoted.push((i, j));
            }
            Err(e) => return Err(e.into()),
        }
    }
    if !demoted.is_empty() {
        settle_from_rays(&mut w, &demoted);
    }

    let rows: Vec<Result<BTreeMap<usize, f64>, FieldError>> = deep
        .par_iter()
        .map(|&(mi, mj)| {
            let mut row = BTreeMap::new();
            let mut add_col = |gi: usize, v: f64| {
                let c = dense[gi];
                if c != usize::MAX {
                    *row.entry(c).or_insert(0.0) += v;
                } else if let Some(weights) = &resp[gi] {
                    for &(k, wgt) in weights {
                        let ck = dense[k];
                        debug_assert!(ck != usize::MAX, "extension weight on non-deep node");
                        *row.entry(ck).or_insert(0.0) += v * wgt;
                    }
                }
            };
            let h2 = grid.h * grid.h;
            let jet = u.jet(grid.point(mi, mj), 2)?;
            let um = jet.hessian.cofactor();

            // Outer weights: U_m contracted with the fourth-order second
            // derivative stencils, so that S_m = -sum ow(dn) w_n / h^2.
            let mut ow = [[0.0f64; 5]; 5];
            for (o, c) in D2_4TH {
                ow[(2 + o) as usize][2] += um.get(0, 0) * c;
                ow[2][(2 + o) as usize] += um.get(1, 1) * c;
            }
            for (ox, cx) in D1_4TH {
                for (oy, cy) in D1_4TH {
                    ow[(2 + ox) as usize][(2 + oy) as usize] += 2.0 * um.get(0, 1) * cx * cy;
                }
            }

            let mut blk = [[0.0f64; 5]; 5];
            for (ix, col) in blk.iter_mut().enumerate() {
                for (iy, v) in col.iter_mut().enumerate() {
                    *v = w.get(mi + ix - 2, mj + iy - 2);
                }
            }
            let (wxx, wxy, wyy) = block_second_derivs(&blk, grid.h);

            // Chain through w: sum_dn ow(dn)/h^2 * w_n^2 (U_n : S(k-n)) / h^2.
            for (dnx, orow) in ow.iter().enumerate() {
                for (dny, &c_out) in orow.iter().enumerate() {
                    if c_out == 0.0 {
                        continue;
                    }
                    let (ni, nj) = (mi + dnx - 2, mj + dny - 2);
                    let cf = coef[grid.index(ni, nj)];
                    if cf.max_abs() == 0.0 {
                        continue;
                    }
                    for (di, dj, sxx, sxy, syy) in HESSIAN_STENCIL {
                        let (ki, kj) = (ni as isize + di, nj as isize + dj);
                        if ki < 0 || kj < 0 || ki >= grid.nx as isize || kj >= grid.ny as isize
                        {
                            continue;
                        }
                        let inner =
                            cf.get(0, 0) * sxx + 2.0 * cf.get(0, 1) * sxy + cf.get(1, 1) * syy;
                        add_col(
                            grid.index(ki as usize, kj as usize),
                            c_out / h2 * inner / h2,
                        );
                    }
                }
            }

            // Variation of the cofactor U_m itself: dU^{11} = dB_22 and so on.
            for (di, dj, sxx, sxy, syy) in HESSIAN_STENCIL {
                let (ki, kj) = (mi as isize + di, mj as isize + dj);
                if ki < 0 || kj < 0 || ki >= grid.nx as isize || kj >= grid.ny as isize {
                    continue;
                }
                add_col(
                    grid.index(ki as usize, kj as usize),
                    -(syy * wxx - 2.0 * sxy * wxy + sxx * wyy) / h2,
                );
            }

            // Kernel shift, relative to the row scale.
            let diag = linearization_diag(&jet.inv_hessian, grid.h);
            let r = dense[grid.index(mi, mj)];
            *row.entry(r).or_insert(0.0) += 1e-8 * diag;
            Ok(row)
        })
        .collect();

    let mut bandwidth = 0usize;
    for (r, row) in rows.iter().enumerate() {
        if let Ok(row) = row {
            for (&c, _) in row.iter() {
                bandwidth = bandwidth.max(r.abs_diff(c));
            }
        }
    }
    let mut lu = BandedLu::new(n, bandwidth);
    for (r, row) in rows.into_iter().enumerate() {
        for (c, v) in row? {
            lu.add(r, c, v);
        }
    }
    Ok(lu)
}

/// Newton direction `d` solving the assembled linearization `J d = r` by
/// banded LU. `None` when the factorization breaks down.
fn newton_direction(
    u: &SplitPotential,
    grid: &Arc<Grid>,
    deep: &[(usize, usize)],
    resp: &[Option<Vec<(usize, f64)>>],
    res: &Residual,
) -> Result<Option<Vec<f64>>, AbreuError> {
    let mut lu = assemble_jacobian(u, grid, deep, resp)?;
    if lu.factor().is_err() {
        return Ok(None);
    }
    let mut d: Vec<f64> = deep.iter().map(|&(i, j)| res.field.get(i, j)).collect();
    lu.solve(&mut d);
    if d.iter().all(|v| v.is_finite()) {
        Ok(Some(d))
    } else {
        Ok(None)
    }
}

/// Solves `S(u) = K` for `u = Guillemin(poly) + psi` by gauge-fixed
/// pseudo-time relaxation, optionally with Newton endgame steps.
///
/// psi is evolved on nodes at ring depth >= 3 (about `2h` from the
/// boundary) and extended shallower by second-order extrapolation each
/// step; after every accepted step the best-fit affine function is removed
/// from psi, killing the three-dimensional kernel of the linearization.
/// Trial steps that raise the sup residual or break convexity are rejected
/// and halve the step; acceptance grows it by 1.1x.
pub fn solve(
    poly: &DelzantPolytope,
    spec: &CurvatureSpec,
    init: Option<&dyn Fn(Vec2) -> f64>,
    options: &SolveOptions,
) -> Result<(SplitPotential, SolveReport), AbreuError> {
    let t0 = Instant::now();
    let widths = poly.polygon().widths();
    let h = options.h.unwrap_or_else(|| widths.x.max(widths.y) / 64.0);
    let grid = Grid::new(Domain::Polytope(poly.clone()), h, 2)?;
    let deep: Vec<(usize, usize)> = grid.deep_nodes(UPDATE_DEPTH).collect();
    if deep.is_empty() {
        return Err(FieldError::SpacingTooCoarse { interior: grid.interior_count() }.into());
    }

    let mut warnings = Vec::new();
    let vanishing = spec.vanishing_edges(poly);
    if !vanishing.is_empty() {
        warnings.push(format!(
            "prescribed curvature vanishes on edge(s) {vanishing:?}; boundary data is degenerate there"
        ));
    }

    let mut psi = ScalarField::zeros(grid.clone());
    if let Some(f) = init {
        for &(i, j) in &deep {
            psi.set(i, j, f(grid.point(i, j)));
        }
    }
    psi.extrapolate_shallow(UPDATE_DEPTH);
    let (mut gauge_c, mut gauge_b) = affine_fit(&psi);
    subtract_affine(&mut psi, gauge_c, gauge_b);
    let resp = ScalarField::extrapolation_weights(&grid, UPDATE_DEPTH);

    // +1 certifies the S(square) = +4 orientation, under which the
    // linearization is positive and the residual decays along -(S - K).
    let flow = sign_convention_probe() as f64;

    let mut u = SplitPotential::guillemin(poly.clone()).with_psi(psi);
    let mut res = match residual(&u, spec, &grid) {
        Ok(r) => r,
        Err(AbreuError::Field(FieldError::NotConvexHere { .. })) => {
            return Err(AbreuError::ConvexityLost { iteration: 0 })
        }
        Err(e) => return Err(e),
    };
    if !res.linf.is_finite() {
        return Err(AbreuError::Diverged { iteration: 0, linf: res.linf });
    }
    let explosion_cap = 1e3 * (1.0 + res.linf);

    let mut tau = options.tau0.unwrap_or_else(|| {
        let dmax = deep
            .iter()
            .map(|&(i, j)| {
                let jet = u.jet(grid.point(i, j), 2).expect("residual sweep validated jets");
                linearization_diag(&jet.inv_hessian, h)
            })
            .fold(0.0f64, f64::max);
        0.5 / dmax
    });

    let mut hist_l2 = vec![res.l2];
    let mut hist_linf = vec![res.linf];
    let mut convexity_violations = 0usize;
    let mut iterations = 0usize;

    let finish = |u: SplitPotential,
                  iterations: usize,
                  hist_l2: Vec<f64>,
                  hist_linf: Vec<f64>,
                  convexity_violations: usize,
                  gauge_c: f64,
                  gauge_b: Vec2,
                  tau: f64,
                  mut warnings: Vec<String>| {
        let burn = hist_linf.len() / 4;
        if hist_linf
            .windows(2)
            .skip(burn)
            .any(|w| w[1] > w[0] * (1.0 + 1e-9))
        {
            warnings.push("residual history not monotone after burn-in".into());
        }
        let report = SolveReport {
            iterations,
            residual_l2: hist_l2,
            residual_linf: hist_linf,
            convexity_violations,
            gauge_constant: gauge_c,
            gauge_slope: gauge_b,
            tau_final: tau,
            mode: options.mode,
            h,
            tol: options.tol,
            nodes: deep.len(),
            warnings,
            psi: u.psi.clone().expect("solver potentials carry psi"),
            seconds: t0.elapsed().as_secs_f64(),
        };
        (u, report)
    };

    while res.linf >= options.tol {
        if iterations >= options.max_iter {
            return Err(AbreuError::MaxIterations {
                iterations,
                linf: res.linf,
                tol: options.tol,
            });
        }

        // Direction to subtract: the residual itself (relaxation) or the
        // Newton correction; scaled by tau or a line-search factor.
        let (direction, mut scale) = match options.mode {
            SolveMode::Relax => {
                let d: Vec<f64> =
                    deep.iter().map(|&(i, j)| res.field.get(i, j)).collect();
                (d, flow * tau)
            }
            SolveMode::Newton => match newton_direction(&u, &grid, &deep, &resp, &res)? {
                Some(d) => (d, 1.0),
                None => {
                    let d: Vec<f64> =
                        deep.iter().map(|&(i, j)| res.field.get(i, j)).collect();
                    (d, flow * tau)
                }
            },
        };

        let mut halvings = 0usize;
        loop {
            let psi_now = u.psi.as_ref().expect("solver potentials carry psi");
            let mut cand = psi_now.clone();
            for (k, &(i, j)) in deep.iter().enumerate() {
                cand.set(i, j, cand.get(i, j) - scale * direction[k]);
            }
            cand.extrapolate_shallow(UPDATE_DEPTH);
            let (dc, db) = affine_fit(&cand);
            subtract_affine(&mut cand, dc, db);
            let cand_u = u.clone().with_psi(cand);
            match residual(&cand_u, spec, &grid) {
                Err(AbreuError::Field(FieldError::NotConvexHere { .. })) => {
                    convexity_violations += 1;
                    halvings += 1;
                    scale *= 0.5;
                }
                Err(e) => return Err(e),
                Ok(new_res) => {
                    if !new_res.linf.is_finite() || new_res.linf > explosion_cap {
                        return Err(AbreuError::Diverged {
                            iteration: iterations,
                            linf: new_res.linf,
                        });
                    }
                    if new_res.linf <= res.linf * (1.0 + 1e-12) {
                        u = cand_u;
                        res = new_res;
                        gauge_c += dc;
                        gauge_b += db;
                        if options.mode == SolveMode::Relax {
                            tau = scale.abs() / flow.abs() * 1.1;
                        }
                        break;
                    }
                    halvings += 1;
                    scale *= 0.5;
                }
            }
            if halvings > MAX_HALVINGS {
                // The base iterate is convex (its residual evaluated), so
                // exhausting the budget means no step size can proceed.
                return Err(AbreuError::Diverged { iteration: iterations, linf: res.linf });
            }
        }
        iterations += 1;
        hist_l2.push(res.l2);
        hist_linf.push(res.linf);
    }

    Ok(finish(
        u,
        iterations,
        hist_l2,
        hist_linf,
        convexity_violations,
        gauge_c,
        gauge_b,
        tau,
        warnings,
    ))
}
