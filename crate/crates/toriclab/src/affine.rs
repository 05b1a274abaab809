//! Affine changes of variables for symplectic potentials and the
//! normalization procedures built on them: transported potentials
//! `u*(xi) = lambda u(A^{-1}(xi - a0))`, John-ellipse normalization of a
//! polygon, sections (tilted sublevel polygons), blow-up normalization at a
//! point, divisor-preserving half-plane transformations, and the minimal
//! normalized form near a divisor.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abreu::{grad_log_s_sq, AbreuError};
use crate::field::{AnalyticPart, FieldError, Grid, ScalarField, SplitPotential};
use crate::invariants::{complex_w, psi, ricci_norm_k, Chart, InvariantError};
use crate::legendre::legendre_transform;
use crate::linalg::{Mat2, Sym3, Sym4, Vec2};
use crate::polytope::{ConvexPolygon, Domain, PolytopeError};

#[derive(Debug, Error)]
pub enum AffineError {
    #[error("affine map needs invertible A and positive lambda (det {det:.3e}, lambda {lambda:.3e})")]
    BadMap { det: f64, lambda: f64 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("domain shape does not survive this map; only similarities keep disks round and only wall-fixing axis scalings keep half-plane patches")]
    UnrepresentableDomain,
    #[error("resample target node ({:.4}, {:.4}) pulls back outside the source field", point.x, point.y)]
    ResampleOutOfDomain { point: Vec2 },
    #[error("section at sigma {sigma:.4} is not compactly contained in the domain")]
    NotCompact { sigma: f64 },
    #[error("bisection failed: {0}")]
    BisectionFailed(String),
    #[error("potential does not live on a half-plane patch")]
    NotHalfPlane,
    #[error("bad map JSON: {0}")]
    Json(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
    #[error(transparent)]
    Curvature(#[from] AbreuError),
}

// ---------------------------------------------------------------------------
// affine maps
// ---------------------------------------------------------------------------

/// Invertible affine change of moment coordinates together with the value
/// scaling: points map by `xi -> A xi + a0`, potentials by
/// `u*(xi) = lambda u(A^{-1}(xi - a0))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AffineMapWire", into = "AffineMapWire")]
pub struct AffineMap {
    pub a: Mat2,
    pub a0: Vec2,
    pub lambda: f64,
}

/// Serialized shape: {"A": [[..],[..]], "a0": [..], "lambda": ..} with A in
/// row-major order.
#[derive(Serialize, Deserialize)]
struct AffineMapWire {
    #[serde(rename = "A")]
    a: [[f64; 2]; 2],
    a0: [f64; 2],
    lambda: f64,
}

impl From<AffineMap> for AffineMapWire {
    fn from(m: AffineMap) -> Self {
        AffineMapWire {
            a: [[m.a.get(0, 0), m.a.get(0, 1)], [m.a.get(1, 0), m.a.get(1, 1)]],
            a0: [m.a0.x, m.a0.y],
            lambda: m.lambda,
        }
    }
}

impl TryFrom<AffineMapWire> for AffineMap {
    type Error = AffineError;
    fn try_from(w: AffineMapWire) -> Result<Self, AffineError> {
        AffineMap::new(
            Mat2::new(w.a[0][0], w.a[0][1], w.a[1][0], w.a[1][1]),
            Vec2::new(w.a0[0], w.a0[1]),
            w.lambda,
        )
    }
}

impl AffineMap {
    pub fn new(a: Mat2, a0: Vec2, lambda: f64) -> Result<Self, AffineError> {
        if !a.is_finite() || !a0.is_finite() || a.det().abs() < 1e-14 || !(lambda > 0.0) || !lambda.is_finite() {
            return Err(AffineError::BadMap { det: a.det(), lambda });
        }
        Ok(AffineMap { a, a0, lambda })
    }

    pub fn identity() -> Self {
        AffineMap { a: Mat2::IDENTITY, a0: Vec2::ZERO, lambda: 1.0 }
    }

    /// Map with trivial value scaling.
    pub fn base(a: Mat2, a0: Vec2) -> Result<Self, AffineError> {
        AffineMap::new(a, a0, 1.0)
    }

    fn a_inv(&self) -> Mat2 {
        self.a.inverse().expect("determinant checked at construction")
    }

    pub fn forward(&self, xi: Vec2) -> Vec2 {
        self.a.mul_vec(xi) + self.a0
    }

    pub fn backward(&self, xi: Vec2) -> Vec2 {
        self.a_inv().mul_vec(xi - self.a0)
    }

    pub fn inverse(&self) -> AffineMap {
        let inv = self.a_inv();
        AffineMap { a: inv, a0: -inv.mul_vec(self.a0), lambda: 1.0 / self.lambda }
    }

    /// `self.compose(&other)` applies `other` first: the result sends `xi`
    /// to `self.forward(other.forward(xi))`.
    pub fn compose(&self, other: &AffineMap) -> AffineMap {
        AffineMap {
            a: self.a.mul_mat(&other.a),
            a0: self.a.mul_vec(other.a0) + self.a0,
            lambda: self.lambda * other.lambda,
        }
    }

    /// L-bounded in the normalization sense: translation within L and every
    /// unit vector stretched by a factor inside [1/L, L].
    pub fn is_l_bounded(&self, l: f64) -> bool {
        let sv = self.a.singular_values();
        let (smax, smin) = (sv[0].max(sv[1]), sv[0].min(sv[1]));
        self.a0.norm() <= l && smax <= l && smin >= 1.0 / l
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("affine map serializes")
    }

    pub fn from_json(text: &str) -> Result<AffineMap, AffineError> {
        serde_json::from_str(text).map_err(|e| AffineError::Json(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// transported potentials
// ---------------------------------------------------------------------------

/// Analytic part of a transported potential: the inner part is evaluated at
/// the pulled-back point and rescaled, with an optional extra affine term
/// (used by blow-up and half-plane normalizations).
#[derive(Debug)]
struct AffineImagePart {
    inner: Arc<dyn AnalyticPart>,
    minv: Mat2,
    a0: Vec2,
    lambda: f64,
    add_grad: Vec2,
    add_const: f64,
}

impl AffineImagePart {
    fn pull(&self, p: Vec2) -> Vec2 {
        self.minv.mul_vec(p - self.a0)
    }
}

impl AnalyticPart for AffineImagePart {
    fn value(&self, p: Vec2) -> Option<f64> {
        let q = self.pull(p);
        Some(self.lambda * self.inner.value(q)? + self.add_grad.dot(p) + self.add_const)
    }
    fn gradient(&self, p: Vec2) -> Option<Vec2> {
        let q = self.pull(p);
        Some(self.minv.transpose().mul_vec(self.inner.gradient(q)?) * self.lambda + self.add_grad)
    }
    fn hessian(&self, p: Vec2) -> Option<Mat2> {
        let q = self.pull(p);
        let h = self.inner.hessian(q)?;
        Some(self.minv.transpose().mul_mat(&h).mul_mat(&self.minv).scale(self.lambda))
    }
    fn third(&self, p: Vec2) -> Option<Sym3> {
        let q = self.pull(p);
        Some(self.inner.third(q)?.transform(&self.minv).scale(self.lambda))
    }
    fn fourth(&self, p: Vec2) -> Option<Sym4> {
        let q = self.pull(p);
        Some(self.inner.fourth(q)?.transform(&self.minv).scale(self.lambda))
    }
    fn describe(&self) -> String {
        format!("affine[{}]", self.inner.describe())
    }
}

fn image_domain(domain: &Domain, map: &AffineMap) -> Result<Domain, AffineError> {
    match domain {
        Domain::Polytope(p) => Ok(Domain::Polygon(p.polygon().transform(&map.a, map.a0))),
        Domain::Polygon(p) => Ok(Domain::Polygon(p.transform(&map.a, map.a0))),
        Domain::Disk { center, radius } => {
            let sv = map.a.singular_values();
            if (sv[0] - sv[1]).abs() > 1e-12 * sv[0].max(sv[1]) {
                return Err(AffineError::UnrepresentableDomain);
            }
            Ok(Domain::Disk { center: map.forward(*center), radius: radius * sv[0] })
        }
        Domain::HalfPlanePatch { depth, center, halfwidth } => {
            let a = map.a;
            let diagonal = a.get(0, 1).abs() < 1e-14
                && a.get(1, 0).abs() < 1e-14
                && a.get(0, 0) > 0.0
                && a.get(1, 1) > 0.0;
            if !diagonal || map.a0.x.abs() > 1e-14 {
                return Err(AffineError::UnrepresentableDomain);
            }
            Ok(Domain::HalfPlanePatch {
                depth: a.get(0, 0) * depth,
                center: a.get(1, 1) * center + map.a0.y,
                halfwidth: a.get(1, 1) * halfwidth,
            })
        }
        Domain::Rect { lo, hi } => {
            let corners = ConvexPolygon::new(vec![
                *lo,
                Vec2::new(hi.x, lo.y),
                *hi,
                Vec2::new(lo.x, hi.y),
            ])?;
            Ok(Domain::Polygon(corners.transform(&map.a, map.a0)))
        }
        Domain::All => Ok(Domain::All),
    }
}

/// Depth of the ring where a resampled psi keeps interpolated values;
/// everything shallower is rebuilt by ray extension, matching the band the
/// solver treats the same way.
const RESAMPLE_DEPTH: u16 = 3;

/// Transported potential `u*(xi) = lambda u(A^{-1}(xi - a0))`. The analytic
/// part transforms symbolically; a gridded psi is resampled onto an image
/// grid of comparable node count.
pub fn apply_affine(u: &SplitPotential, map: &AffineMap) -> Result<SplitPotential, AffineError> {
    apply_affine_with(u, map, Vec2::ZERO, 0.0)
}

/// `apply_affine` plus an extra affine term `add_grad . xi + add_const` on
/// the image side; the normalizations below use it to absorb tangent-plane
/// subtractions into one analytic node.
pub(crate) fn apply_affine_with(
    u: &SplitPotential,
    map: &AffineMap,
    add_grad: Vec2,
    add_const: f64,
) -> Result<SplitPotential, AffineError> {
    let identity_map =
        map.a.sub_mat(&Mat2::IDENTITY).max_abs() == 0.0 && map.a0 == Vec2::ZERO && map.lambda == 1.0;
    if identity_map && add_grad == Vec2::ZERO && add_const == 0.0 {
        return Ok(u.clone());
    }
    let domain = image_domain(&u.domain, map)?;
    let part = AffineImagePart {
        inner: u.analytic.clone(),
        minv: map.a_inv(),
        a0: map.a0,
        lambda: map.lambda,
        add_grad,
        add_const,
    };
    let label = format!("affine({})", u.label);
    let mut out = SplitPotential::analytic_only(domain, Arc::new(part), label);
    if let Some(psi) = &u.psi {
        if identity_map {
            // The grid is unchanged and psi* = lambda psi = psi.
            out.psi = Some(psi.clone());
        } else {
            let h = psi.grid.h * map.a.det().abs().sqrt();
            let grid = Grid::new(out.domain.clone(), h, psi.grid.margin)?;
            let mut field = ScalarField::zeros(grid.clone());
            for (i, j) in grid.deep_nodes(RESAMPLE_DEPTH) {
                let q = map.backward(grid.point(i, j));
                let v = psi
                    .interpolate(q)
                    .map_err(|_| AffineError::ResampleOutOfDomain { point: grid.point(i, j) })?;
                field.set(i, j, map.lambda * v);
            }
            field.extrapolate_shallow(RESAMPLE_DEPTH);
            out.psi = Some(field);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// John normalization
// ---------------------------------------------------------------------------

/// Normalizing map of a convex polygon: the minimum-area ellipse E centered
/// at the center of mass and containing the polygon is computed, and the
/// returned base map T sends E to the unit disk, so that
/// `2^{-3/2} D_1(0) c T(omega) c D_1(0)`.
pub fn john_normalize(omega: &ConvexPolygon) -> Result<(AffineMap, ConvexPolygon), AffineError> {
    if omega.area() < 1e-12 {
        return Err(AffineError::Degenerate("polygon area below 1e-12".into()));
    }
    let c = omega.centroid();
    let verts: Vec<Vec2> = omega.vertices().iter().map(|v| *v - c).collect();
    let m = centered_mvee(&verts)?;
    let q = m
        .inverse()
        .ok_or_else(|| AffineError::Degenerate("ellipse matrix is singular".into()))?
        .scale(0.5);
    let a = q
        .sym_sqrt()
        .ok_or_else(|| AffineError::Degenerate("ellipse matrix is not positive".into()))?;
    let map = AffineMap::base(a, -a.mul_vec(c))?;
    let image = omega.transform(&a, map.a0);
    Ok((map, image))
}

/// Shape matrix M of the minimum-area centered ellipse {x : x^T M^{-1} x <= 2}
/// containing the given points, by Fedorov exchange on the design weights
/// (Wolfe-Atwood ascent with away steps). The optimality condition in the
/// plane is kappa_i = v_i^T M^{-1} v_i <= 2 with equality on the support.
fn centered_mvee(verts: &[Vec2]) -> Result<Mat2, AffineError> {
    let n = verts.len();
    let mut lam = vec![1.0 / n as f64; n];
    let tol = 5e-13;
    let mut last = Mat2::IDENTITY;
    for _ in 0..500_000 {
        let mut m = Mat2::ZERO;
        for (v, &l) in verts.iter().zip(&lam) {
            m = m.add_mat(&Mat2::sym(v.x * v.x * l, v.x * v.y * l, v.y * v.y * l));
        }
        last = m;
        let minv = m
            .inverse()
            .ok_or_else(|| AffineError::Degenerate("vertex set is essentially collinear".into()))?;
        let mut k_hi = f64::NEG_INFINITY;
        let mut i_hi = 0;
        let mut k_lo = f64::INFINITY;
        let mut i_lo = 0;
        for (i, v) in verts.iter().enumerate() {
            let k = minv.form(*v, *v);
            if k > k_hi {
                k_hi = k;
                i_hi = i;
            }
            if lam[i] > 0.0 && k < k_lo {
                k_lo = k;
                i_lo = i;
            }
        }
        if k_hi <= 2.0 * (1.0 + tol) && k_lo >= 2.0 * (1.0 - tol) {
            return Ok(m);
        }
        // Move the weight of whichever side violates optimality more.
        let (idx, k, floor) = if k_hi - 2.0 >= 2.0 - k_lo {
            (i_hi, k_hi, f64::NEG_INFINITY)
        } else {
            (i_lo, k_lo, -lam[i_lo] / (1.0 - lam[i_lo]))
        };
        // Unconstrained optimum of the rank-one update. Valid only for k > 1:
        // below that the objective improves all the way to the simplex face,
        // so the away step removes the vertex outright.
        let t = if k > 1.0 + 1e-12 {
            ((k - 2.0) / (2.0 * (k - 1.0))).max(floor)
        } else {
            floor
        };
        if !t.is_finite() || t >= 1.0 {
            return Err(AffineError::Degenerate("ellipse step left the simplex".into()));
        }
        for (i, l) in lam.iter_mut().enumerate() {
            *l *= 1.0 - t;
            if i == idx {
                *l += t;
            }
        }
    }
    // Accept a slightly looser certificate rather than loop forever.
    let minv = last.inverse().ok_or_else(|| AffineError::Degenerate("singular ellipse".into()))?;
    let worst = verts.iter().map(|v| minv.form(*v, *v)).fold(f64::NEG_INFINITY, f64::max);
    if worst <= 2.0 * (1.0 + 1e-9) {
        Ok(last)
    } else {
        Err(AffineError::Degenerate(format!(
            "ellipse iteration stalled with max support value {worst:.12}"
        )))
    }
}

/// Maximal axis-parallel chord lengths (wd_1, wd_2) of a convex polygon.
pub fn widths(omega: &ConvexPolygon) -> Vec2 {
    omega.widths()
}

// ---------------------------------------------------------------------------
// sections
// ---------------------------------------------------------------------------

/// Polygonal approximation of a section S_u(p, sigma): the sublevel set of
/// the potential tilted by its tangent plane at p.
#[derive(Debug, Clone)]
pub struct SectionPolygon {
    pub base: Vec2,
    pub sigma: f64,
    pub polygon: ConvexPolygon,
    /// Sections are closed curves by construction; the flag travels with
    /// serialized copies so partial extractions stay representable.
    pub closed: bool,
}

/// Nodes per side of the marching grid.
const SECTION_NODES: usize = 257;

/// Section of `u` at `p` with height `sigma > 0`: the set where
/// `u <= u(p) + grad u(p).(xi - p) + sigma`, extracted by marching squares
/// on a local grid and convexified. Errors with NotCompact when the sublevel
/// set touches nodes where the potential stops being evaluable (the domain
/// boundary, at grid resolution).
pub fn section(u: &SplitPotential, p: Vec2, sigma: f64) -> Result<SectionPolygon, AffineError> {
    if !(sigma > 0.0) {
        return Err(AffineError::Degenerate(format!("section height must be positive, got {sigma}")));
    }
    let base_val = u.value(p)?;
    let base_grad = u.gradient(p)?;
    let tilt = |q: Vec2| -> Option<f64> {
        u.value(q).ok().map(|v| v - base_val - base_grad.dot(q - p) - sigma)
    };

    let windows: Vec<(Vec2, Vec2)> = match &u.domain {
        Domain::All => (0..40)
            .map(|k| {
                let r = 2.0f64.powi(k);
                (p - Vec2::new(r, r), p + Vec2::new(r, r))
            })
            .collect(),
        d => {
            let (lo, hi) = d.bbox();
            let pad = Vec2::new(hi.x - lo.x, hi.y - lo.y) * 0.01;
            vec![(lo - pad, hi + pad)]
        }
    };

    let unbounded = matches!(u.domain, Domain::All);
    for (lo, hi) in windows {
        match march_section(&tilt, p, sigma, lo, hi, unbounded)? {
            Some(polygon) => {
                return Ok(SectionPolygon { base: p, sigma, polygon, closed: true });
            }
            None => continue, // sublevel set hit the window edge; widen
        }
    }
    Err(AffineError::NotCompact { sigma })
}

/// One marching-squares pass over the window. Returns Ok(None) when the
/// sublevel set reaches the window border (caller widens on unbounded
/// domains), and NotCompact when it sits against non-evaluable nodes of a
/// bounded domain.
fn march_section(
    tilt: &(dyn Fn(Vec2) -> Option<f64> + Sync),
    p: Vec2,
    sigma: f64,
    lo: Vec2,
    hi: Vec2,
    unbounded: bool,
) -> Result<Option<ConvexPolygon>, AffineError> {
    let n = SECTION_NODES;
    let hx = (hi.x - lo.x) / (n - 1) as f64;
    let hy = (hi.y - lo.y) / (n - 1) as f64;
    let at = |i: usize, j: usize| Vec2::new(lo.x + i as f64 * hx, lo.y + j as f64 * hy);
    let vals: Vec<Vec<Option<f64>>> = (0..n)
        .into_par_iter()
        .map(|j| (0..n).map(|i| tilt(at(i, j))).collect())
        .collect();

    let inside = |v: &Option<f64>| matches!(v, Some(x) if *x <= 0.0);
    for k in 0..n {
        for (i, j) in [(k, 0), (k, n - 1), (0, k), (n - 1, k)] {
            if inside(&vals[j][i]) {
                return if unbounded { Ok(None) } else { Err(AffineError::NotCompact { sigma }) };
            }
        }
    }

    let mut crossings: Vec<Vec2> = Vec::new();
    let mut any_inside = false;
    for j in 0..n {
        for i in 0..n {
            let v = &vals[j][i];
            if inside(v) {
                any_inside = true;
            }
            // Compactness at grid resolution: an occupied cell may not touch
            // a node where the potential is not evaluable.
            if i + 1 < n && j + 1 < n {
                let cell = [&vals[j][i], &vals[j][i + 1], &vals[j + 1][i], &vals[j + 1][i + 1]];
                if cell.iter().any(|c| inside(c)) && cell.iter().any(|c| c.is_none()) {
                    return Err(AffineError::NotCompact { sigma });
                }
            }
            // Sign-change crossings on the east and north edges.
            for (i2, j2) in [(i + 1, j), (i, j + 1)] {
                if i2 >= n || j2 >= n {
                    continue;
                }
                if let (Some(a), Some(b)) = (vals[j][i], vals[j2][i2]) {
                    if (a <= 0.0) != (b <= 0.0) {
                        let t = a / (a - b);
                        let q0 = at(i, j);
                        let q1 = at(i2, j2);
                        crossings.push(q0 + (q1 - q0) * t);
                    }
                }
            }
        }
    }
    if !any_inside || crossings.len() < 3 {
        return Err(AffineError::Degenerate(format!(
            "section at sigma {sigma} is below grid resolution"
        )));
    }
    let hull = convex_hull(crossings);
    if hull.len() < 3 {
        return Err(AffineError::Degenerate("section hull collapsed".into()));
    }
    let polygon = ConvexPolygon::new(hull)?;
    if !polygon.contains(p) {
        return Err(AffineError::Degenerate("section polygon lost its base point".into()));
    }
    Ok(Some(polygon))
}

/// Counterclockwise convex hull (monotone chain); collinear points are
/// dropped.
fn convex_hull(mut pts: Vec<Vec2>) -> Vec<Vec2> {
    pts.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).expect("finite coordinates"));
    pts.dedup_by(|a, b| (a.x - b.x).abs() < 1e-14 && (a.y - b.y).abs() < 1e-14);
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: Vec2, a: Vec2, b: Vec2| (a - o).cross(b - o);
    let mut lower: Vec<Vec2> = Vec::new();
    for &q in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], q) <= 0.0 {
            lower.pop();
        }
        lower.push(q);
    }
    let mut upper: Vec<Vec2> = Vec::new();
    for &q in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], q) <= 0.0 {
            upper.pop();
        }
        upper.push(q);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

// ---------------------------------------------------------------------------
// blow-up normalization
// ---------------------------------------------------------------------------

/// Blow-up normalization at an interior point: subtract the tangent plane at
/// p, move p to the origin, scale values by lambda and choose the linear map
/// that makes the Hessian at the origin the identity. Returns the potential
/// and the map (for provenance and for pushing other data through).
pub fn blowup_normalize(
    u: &SplitPotential,
    p: Vec2,
    lambda: f64,
) -> Result<(SplitPotential, AffineMap), AffineError> {
    let jet = u.jet(p, 2)?;
    let a = jet
        .hessian
        .scale(lambda)
        .sym_sqrt()
        .ok_or_else(|| AffineError::Degenerate("Hessian not positive at blow-up point".into()))?;
    let map = AffineMap::new(a, -a.mul_vec(p), lambda)?;
    let ainv_t = map.a_inv().transpose();
    let add_grad = -(ainv_t.mul_vec(jet.gradient)) * lambda;
    let add_const = -lambda * jet.value;
    let out = apply_affine_with(u, &map, add_grad, add_const)?;
    Ok((out, map))
}

// ---------------------------------------------------------------------------
// half-plane transformations
// ---------------------------------------------------------------------------

/// Parameters of a divisor-preserving renormalization
/// `u~(xi) = alpha u(xi_1/alpha, (xi_2-gamma)/beta) + eta xi_1 + b xi_2 + c`
/// (the moment map is `xi -> (alpha xi_1, beta xi_2 + gamma)` with value
/// weight lambda = alpha).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfPlaneParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub eta: f64,
    pub b: f64,
    pub c: f64,
}

impl HalfPlaneParams {
    pub fn identity() -> Self {
        HalfPlaneParams { alpha: 1.0, beta: 1.0, gamma: 0.0, eta: 0.0, b: 0.0, c: 0.0 }
    }

    fn validate(&self) -> Result<(), AffineError> {
        let ok = self.alpha > 0.0
            && self.beta > 0.0
            && [self.alpha, self.beta, self.gamma, self.eta, self.b, self.c]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(AffineError::BadMap { det: self.alpha * self.beta, lambda: self.alpha })
        }
    }
}

/// The three coordinate faces of one half-plane renormalization: the moment
/// map on xi, the base map B on x = grad u(xi), and the action on the
/// holomorphic coordinates (z_1, w_2).
#[derive(Debug, Clone, Copy)]
pub struct HalfPlaneMaps {
    pub params: HalfPlaneParams,
}

impl HalfPlaneMaps {
    pub fn moment_map(&self) -> AffineMap {
        AffineMap {
            a: Mat2::diag(self.params.alpha, self.params.beta),
            a0: Vec2::new(0.0, self.params.gamma),
            lambda: self.params.alpha,
        }
    }

    /// Base map B(x) = (x_1 + eta, (alpha/beta) x_2 + b).
    pub fn base_forward(&self, x: Vec2) -> Vec2 {
        Vec2::new(x.x + self.params.eta, (self.params.alpha / self.params.beta) * x.y + self.params.b)
    }

    pub fn base_backward(&self, x: Vec2) -> Vec2 {
        Vec2::new(x.x - self.params.eta, (x.y - self.params.b) * self.params.beta / self.params.alpha)
    }

    /// Multiplier of z_1 in the holomorphic map (e^{eta/2} z_1, ...).
    pub fn z1_scale(&self) -> f64 {
        (self.params.eta / 2.0).exp()
    }

    /// Coefficients (scale, shift) of the w_2 component
    /// `w_2 -> (alpha/beta) w_2 + b`.
    pub fn w2_affine(&self) -> (f64, f64) {
        (self.params.alpha / self.params.beta, self.params.b)
    }
}

/// Half-plane renormalization of a wall potential. The moment-side map must
/// fix the wall, so it is the axis scaling (alpha, beta) plus a shift along
/// the wall; the added affine term carries (eta, b, c).
pub fn halfplane_affine(
    u: &SplitPotential,
    params: HalfPlaneParams,
) -> Result<(SplitPotential, HalfPlaneMaps), AffineError> {
    params.validate()?;
    if !matches!(u.domain, Domain::HalfPlanePatch { .. }) {
        return Err(AffineError::NotHalfPlane);
    }
    let maps = HalfPlaneMaps { params };
    let out = apply_affine_with(
        u,
        &maps.moment_map(),
        Vec2::new(params.eta, params.b),
        params.c,
    )?;
    Ok((out, maps))
}

/// One transported-quantity identity evaluated from both ends.
#[derive(Debug, Clone, Copy)]
pub struct BulletCheck {
    pub name: &'static str,
    pub transported: f64,
    pub predicted: f64,
}

impl BulletCheck {
    pub fn rel_error(&self) -> f64 {
        (self.transported - self.predicted).abs()
            / self.transported.abs().max(self.predicted.abs()).max(1e-12)
    }
}

/// Evaluates the five transported quantities of a half-plane renormalization
/// at the images of the moment point `xi`: the dual potential value, W, Psi,
/// the Ricci norm K, and |grad log |S||^2 in the dual metric. Each entry
/// pairs the directly transported value with the prediction from the source
/// side, which agree as identities.
pub fn halfplane_bullets(
    source: &SplitPotential,
    transformed: &SplitPotential,
    maps: &HalfPlaneMaps,
    xi: Vec2,
) -> Result<[BulletCheck; 5], AffineError> {
    let p = maps.params;
    let xi_t = maps.moment_map().forward(xi);
    let x = source.gradient(xi)?;
    let x_t = transformed.gradient(xi_t)?;
    let f = legendre_transform(source).f;
    let f_t = legendre_transform(transformed).f;

    let fv = xi.dot(x) - source.value(xi)?;
    let fv_t = xi_t.dot(x_t) - transformed.value(xi_t)?;
    let dual = BulletCheck {
        name: "dual potential",
        transported: fv_t,
        predicted: p.alpha * fv + p.gamma * x_t.y - p.gamma * p.b - p.c,
    };

    let w = BulletCheck {
        name: "W",
        transported: complex_w(&f_t, x_t, Chart::Mixed)?,
        predicted: p.beta * p.beta * (-p.eta).exp() * complex_w(&f, x, Chart::Mixed)?,
    };
    let psi_check = BulletCheck {
        name: "Psi",
        transported: psi(&f_t, x_t, Chart::Mixed)?,
        predicted: psi(&f, x, Chart::Mixed)? / p.alpha,
    };
    let k = BulletCheck {
        name: "K",
        transported: ricci_norm_k(&f_t, x_t)?.total,
        predicted: ricci_norm_k(&f, x)?.total / p.alpha,
    };
    let h = 1e-4;
    let grad_log_s = BulletCheck {
        name: "grad log |S|",
        transported: grad_log_s_sq(&f_t, x_t, h * (1.0 + x_t.norm()))?,
        predicted: grad_log_s_sq(&f, x, h * (1.0 + x.norm()))? / p.alpha,
    };
    Ok([dual, w, psi_check, k, grad_log_s])
}

// ---------------------------------------------------------------------------
// minimal normalized triple
// ---------------------------------------------------------------------------

/// Result of putting a wall potential into minimal normalized form: the
/// interior minimum sits at the image of the caller's point, the boundary
/// minimum p_check sits at the origin with value zero, and the unit-arc
/// divisor window has measure 10.
#[derive(Debug, Clone)]
pub struct NormalizedTriple {
    pub potential: SplitPotential,
    /// Image of the interior minimum (the caller certifies its unit distance
    /// to the wall; this construction never rescales xi_1).
    pub p_min: Vec2,
    /// Boundary minimum; the construction places it at the origin.
    pub p_check: Vec2,
    /// Achieved measure of the divisor window (10 within 1e-4).
    pub s0: f64,
    /// The composed transformation from the input potential.
    pub params: HalfPlaneParams,
}

/// Composition state for wall transforms with alpha = 1:
/// `u~(xi) = u(xi_1, (xi_2 - gamma)/beta) + eta xi_1 + b xi_2 + c`.
#[derive(Debug, Clone, Copy)]
struct WallStage {
    beta: f64,
    gamma: f64,
    eta: f64,
    b: f64,
    c: f64,
}

impl WallStage {
    /// Applies `next` after `self`.
    fn then(self, next: WallStage) -> WallStage {
        WallStage {
            beta: self.beta * next.beta,
            gamma: next.gamma + next.beta * self.gamma,
            eta: self.eta + next.eta,
            b: self.b / next.beta + next.b,
            c: self.c + next.c - self.b * next.gamma / next.beta,
        }
    }

    fn params(self) -> HalfPlaneParams {
        HalfPlaneParams {
            alpha: 1.0,
            beta: self.beta,
            gamma: self.gamma,
            eta: self.eta,
            b: self.b,
            c: self.c,
        }
    }
}

/// Evaluating the analytic part here makes `xi_1 log xi_1`-type wall terms
/// vanish at machine precision while keeping every evaluation guard happy.
const WALL_EPS: f64 = 1e-300;

/// Wall restriction u(0, s) of a half-plane potential: the analytic limit
/// plus the interpolated psi value on the wall.
fn wall_value(u: &SplitPotential, s: f64) -> Result<f64, AffineError> {
    let a = u
        .analytic
        .value(Vec2::new(WALL_EPS, s))
        .ok_or(FieldError::OutsideDomain { point: Vec2::new(0.0, s) })?;
    let psi = match &u.psi {
        Some(f) => f.interpolate(Vec2::new(0.0, s))?,
        None => 0.0,
    };
    Ok(a + psi)
}

/// Golden-section minimizer for a unimodal function on [lo, hi].
fn golden_min(
    f: &dyn Fn(f64) -> Result<f64, AffineError>,
    lo: f64,
    hi: f64,
) -> Result<(f64, f64), AffineError> {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1)?;
    let mut f2 = f(x2)?;
    for _ in 0..200 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2)?;
        }
        if (b - a).abs() < 1e-13 * (1.0 + x1.abs()) {
            break;
        }
    }
    let x = 0.5 * (a + b);
    Ok((x, f(x)?))
}

/// Length of the straight moment-space chord from `p` to the wall point
/// (0, t) in the metric of u. The substitution tau = 1 - q^2 absorbs the
/// integrable 1/sqrt(xi_1) blow-up of the metric at the wall.
fn chord_length_to_wall(u: &SplitPotential, p: Vec2, t: f64) -> Result<f64, AffineError> {
    let w = Vec2::new(0.0, t);
    let d = w - p;
    let integrand = |q: f64| -> Result<f64, AffineError> {
        let tau = 1.0 - q * q;
        let xi = p + d * tau;
        let h = u.jet(xi, 2)?.hessian;
        Ok(2.0 * q * h.form(d, d).max(0.0).sqrt())
    };
    // Composite Simpson on q in [eps, 1]; the integrand is smooth there.
    // eps^2 must stay above machine epsilon or the first sample rounds onto
    // the wall itself; the skipped mass is O(eps) of a bounded integrand.
    let n = 128;
    let q0 = 1e-7;
    let step = (1.0 - q0) / n as f64;
    let mut acc = integrand(q0)? + integrand(1.0)?;
    for k in 1..n {
        let q = q0 + k as f64 * step;
        acc += integrand(q)? * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    Ok(acc * step / 3.0)
}

/// Number of wall candidates scanned for the divisor reference point.
const WALL_SCAN: usize = 129;

/// Minimal normalized form of a wall potential. `p_min` is the moment image
/// of the caller's base point, certified by the caller to lie at unit
/// distance from the wall (that gauge is not touched here: every step keeps
/// lambda = alpha = 1). Steps: subtract the tangent plane at p_min so it
/// becomes the interior minimum; find the wall minimum p_check, zero its
/// value and translate it to the origin; pick the divisor reference point
/// z* nearest to p_min (straight-chord metric estimate, first argmin in
/// scan order); bisect the wall scaling beta until the divisor window of
/// unit arc-radius around z* has measure 10.
pub fn minimal_normalize_triple(
    u: &SplitPotential,
    p_min: Vec2,
) -> Result<NormalizedTriple, AffineError> {
    let Domain::HalfPlanePatch { center, halfwidth, .. } = u.domain else {
        return Err(AffineError::NotHalfPlane);
    };
    if !u.domain.contains(p_min) {
        return Err(FieldError::OutsideDomain { point: p_min }.into());
    }
    let g = u.gradient(p_min)?;
    let s_lo = center - halfwidth;
    let s_hi = center + halfwidth;
    let inset = 1e-3 * halfwidth;

    // Stage 1: subtract the tangent plane at p_min.
    let mut stage = WallStage { beta: 1.0, gamma: 0.0, eta: -g.x, b: -g.y, c: 0.0 };

    // Stage 2: wall minimum of the tilted potential, in source coordinates.
    let tilted_wall = |s: f64| -> Result<f64, AffineError> { Ok(wall_value(u, s)? - g.y * s) };
    let (s_check, v_check) = golden_min(&tilted_wall, s_lo + inset, s_hi - inset)?;
    if s_check - (s_lo + inset) < inset || (s_hi - inset) - s_check < inset {
        return Err(AffineError::Degenerate(
            "wall minimum sits at the patch edge; enlarge the patch".into(),
        ));
    }
    // Zero the value there, then translate it to the origin.
    stage = stage.then(WallStage { beta: 1.0, gamma: 0.0, eta: 0.0, b: 0.0, c: -v_check });
    stage = stage.then(WallStage { beta: 1.0, gamma: -s_check, eta: 0.0, b: 0.0, c: 0.0 });

    // Divisor reference point: wall candidate nearest to p_min in the metric
    // (which every remaining stage preserves), first argmin in scan order.
    let mut s_star = s_lo + inset;
    let mut best = f64::INFINITY;
    for k in 0..WALL_SCAN {
        let s = s_lo + inset + (s_hi - s_lo - 2.0 * inset) * k as f64 / (WALL_SCAN - 1) as f64;
        match chord_length_to_wall(u, p_min, s) {
            Ok(len) if len < best => {
                best = len;
                s_star = s;
            }
            _ => {}
        }
    }
    if !best.is_finite() {
        return Err(AffineError::Degenerate("no wall candidate is metrically reachable".into()));
    }

    // Wall arc length element sqrt(d^2/ds^2 u(0,s)) and the wall moment
    // coordinate x_2(s) = d/ds u(0,s), by central differences of the exact
    // wall restriction. Both are invariant data of the source potential: the
    // remaining stages only relabel them.
    let fd = 1e-4;
    let wall_d1 = |s: f64| -> Result<f64, AffineError> {
        let h = fd * (1.0 + s.abs());
        Ok((wall_value(u, s + h)? - wall_value(u, s - h)?) / (2.0 * h))
    };
    let wall_d2 = |s: f64| -> Result<f64, AffineError> {
        let h = fd * (1.0 + s.abs());
        Ok((wall_value(u, s + h)? - 2.0 * wall_value(u, s)? + wall_value(u, s - h)?) / (h * h))
    };

    // March the cumulative arc from s_star until it reaches 1 on each side.
    let arc_limit = |dir: f64| -> Result<f64, AffineError> {
        let end = if dir > 0.0 { s_hi - inset } else { s_lo + inset };
        let n = 8192;
        let step = (end - s_star) / n as f64;
        let mut arc = 0.0;
        let mut prev = wall_d2(s_star)?.max(0.0).sqrt();
        for k in 1..=n {
            let s = s_star + step * k as f64;
            let cur = wall_d2(s)?.max(0.0).sqrt();
            let inc = 0.5 * (prev + cur) * step.abs();
            if arc + inc >= 1.0 {
                let frac = (1.0 - arc) / inc;
                return Ok(s_star + step * (k as f64 - 1.0 + frac));
            }
            arc += inc;
            prev = cur;
        }
        Err(AffineError::BisectionFailed(format!(
            "unit divisor arc leaves the wall range (reached {arc:.4} of 1)"
        )))
    };
    let s_plus = arc_limit(1.0)?;
    let s_minus = arc_limit(-1.0)?;

    // Window measure before scaling; scaling by beta divides it by beta.
    let spread = wall_d1(s_plus)? - wall_d1(s_minus)?;
    if !(spread > 0.0) {
        return Err(AffineError::BisectionFailed(format!(
            "divisor window has nonpositive measure {spread:.3e}"
        )));
    }
    let measure = |beta: f64| spread / beta;
    let (mut b_lo, mut b_hi) = (1e-4, 1e4);
    if (measure(b_lo) - 10.0) * (measure(b_hi) - 10.0) > 0.0 {
        return Err(AffineError::BisectionFailed(format!(
            "|S0| = 10 not bracketed on beta in [1e-4, 1e4] (unscaled measure {spread:.3e})"
        )));
    }
    let mut beta = 1.0;
    for _ in 0..80 {
        beta = 0.5 * (b_lo + b_hi);
        let m = measure(beta);
        if (m - 10.0).abs() <= 1e-6 {
            break;
        }
        if m > 10.0 {
            b_lo = beta;
        } else {
            b_hi = beta;
        }
    }
    let s0 = measure(beta);
    if (s0 - 10.0).abs() > 1e-4 {
        return Err(AffineError::BisectionFailed(format!(
            "bisection stalled at |S0| = {s0:.8}"
        )));
    }
    stage = stage.then(WallStage { beta, gamma: 0.0, eta: 0.0, b: 0.0, c: 0.0 });

    let params = stage.params();
    let (potential, maps) = halfplane_affine(u, params)?;
    let p_min_image = maps.moment_map().forward(p_min);

    // The construction pins these; verify rather than trust the algebra.
    let final_check = wall_value(&potential, 0.0)?;
    if final_check.abs() > 1e-8 {
        return Err(AffineError::Degenerate(format!(
            "boundary minimum value {final_check:.3e} did not normalize to zero"
        )));
    }
    Ok(NormalizedTriple { potential, p_min: p_min_image, p_check: Vec2::ZERO, s0, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abreu::abreu_s_u;
    use crate::field::{HalfPlanePart, PolyPart, QuadraticPart, SumPart};
    use crate::invariants::theta;
    use crate::polytope::DelzantPolytope;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2, TAU};

    // -- oracles ------------------------------------------------------------

    /// Brute-force centered-MVEE oracle: zoomed grid search for the SPD Q
    /// maximizing det Q subject to v^T Q v <= 2 on every vertex, so that
    /// E = {x : x^T Q x <= 2} is the minimal centered ellipse.
    fn mvee_grid_oracle(verts: &[Vec2], rounds: usize) -> Mat2 {
        let r2 = verts.iter().map(|v| v.norm_sq()).fold(0.0, f64::max);
        let hi = 6.0 / r2;
        let (mut c11, mut c12, mut c22) = (0.5 * hi, 0.0, 0.5 * hi);
        let mut span = 0.5 * hi;
        let mut best = (f64::NEG_INFINITY, c11, c12, c22);
        for _ in 0..rounds {
            let n = 20i32;
            for i in -n..=n {
                for j in -n..=n {
                    for k in -n..=n {
                        let q11 = c11 + span * i as f64 / n as f64;
                        let q12 = c12 + span * j as f64 / n as f64;
                        let q22 = c22 + span * k as f64 / n as f64;
                        let det = q11 * q22 - q12 * q12;
                        if q11 <= 0.0 || det <= best.0.max(0.0) {
                            continue;
                        }
                        let q = Mat2::sym(q11, q12, q22);
                        if verts.iter().all(|v| q.form(*v, *v) <= 2.0) {
                            best = (det, q11, q12, q22);
                        }
                    }
                }
            }
            (c11, c12, c22) = (best.1, best.2, best.3);
            span /= 10.0;
        }
        Mat2::sym(best.1, best.2, best.3)
    }

    fn sandwich_ok(image: &ConvexPolygon) {
        let r_in = 2f64.powf(-1.5);
        for v in image.vertices() {
            assert!(v.norm() <= 1.0 + 1e-6, "vertex at radius {} left the unit disk", v.norm());
        }
        let c = image.clearance(Vec2::ZERO);
        assert!(c >= r_in - 1e-6, "inner clearance {c} below 2^-3/2");
    }

    fn random_polygon(rng: &mut ChaCha8Rng) -> ConvexPolygon {
        loop {
            let k = rng.random_range(6..14);
            let off = Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let pts: Vec<Vec2> = (0..k)
                .map(|_| {
                    let ang = rng.random_range(0.0..TAU);
                    let r = rng.random_range(0.3..2.5);
                    off + Vec2::new(r * ang.cos(), r * ang.sin())
                })
                .collect();
            let hull = convex_hull(pts);
            if hull.len() >= 3 {
                let p = ConvexPolygon::new(hull).unwrap();
                if p.area() > 0.05 {
                    return p;
                }
            }
        }
    }

    /// Random convex polygon containing the origin (angles spread over the
    /// whole circle).
    fn random_star_polygon(rng: &mut ChaCha8Rng) -> ConvexPolygon {
        loop {
            let k = rng.random_range(8..16);
            let pts: Vec<Vec2> = (0..k)
                .map(|i| {
                    let gap = TAU / k as f64;
                    let ang = gap * (i as f64 + rng.random_range(-0.2..0.2));
                    let r = rng.random_range(0.4..2.0);
                    Vec2::new(r * ang.cos(), r * ang.sin())
                })
                .collect();
            let hull = convex_hull(pts);
            if hull.len() >= 3 {
                let p = ConvexPolygon::new(hull).unwrap();
                if p.contains(Vec2::ZERO) && p.clearance(Vec2::ZERO) > 0.05 {
                    return p;
                }
            }
        }
    }

    // -- affine maps ----------------------------------------------------------

    #[test]
    fn map_json_uses_the_documented_shape() {
        let m = AffineMap::new(Mat2::new(2.0, 1.0, 0.0, 1.0), Vec2::new(0.3, -0.2), 1.7).unwrap();
        let text = m.to_json();
        assert!(text.contains("\"A\"") && text.contains("\"a0\"") && text.contains("\"lambda\""));
        let back = AffineMap::from_json(&text).unwrap();
        assert_eq!(m, back);
        assert!(AffineMap::from_json("{\"A\": [[1,0],[2,0]], \"a0\": [0,0], \"lambda\": 1}").is_err());
        assert!(AffineMap::from_json("not json").is_err());
    }

    #[test]
    fn l_bound_examples() {
        assert!(AffineMap::identity().is_l_bounded(1.0));
        let stretch = AffineMap::base(Mat2::diag(3.0, 1.0), Vec2::ZERO).unwrap();
        assert!(!stretch.is_l_bounded(2.0));
        let ok = AffineMap::base(Mat2::diag(2.0, 0.5), Vec2::new(1.0, 0.0)).unwrap();
        assert!(ok.is_l_bounded(2.0));
        assert!(!ok.is_l_bounded(1.9));
    }

    fn random_map(rng: &mut ChaCha8Rng) -> AffineMap {
        loop {
            let a = Mat2::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            if a.det().abs() > 0.1 {
                let a0 = Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                return AffineMap::new(a, a0, rng.random_range(0.2..3.0)).unwrap();
            }
        }
    }

    proptest! {
        #[test]
        fn composition_and_inverse_act_on_points(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m1 = random_map(&mut rng);
            let m2 = random_map(&mut rng);
            let p = Vec2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            let composed = m1.compose(&m2);
            prop_assert!((composed.forward(p) - m1.forward(m2.forward(p))).norm() < 1e-9);
            prop_assert!((m1.inverse().forward(m1.forward(p)) - p).norm() < 1e-9 * (1.0 + p.norm()));
            prop_assert!((m1.backward(m1.forward(p)) - p).norm() < 1e-9 * (1.0 + p.norm()));
            prop_assert!(((composed.lambda) - m1.lambda * m2.lambda).abs() < 1e-12);
        }
    }

    // -- transported potentials ---------------------------------------------

    #[test]
    fn identity_map_reproduces_the_potential() {
        let mut u = SplitPotential::guillemin(DelzantPolytope::unit_square());
        let grid = Grid::new(u.domain.clone(), 1.0 / 16.0, 2).unwrap();
        let mut psi = ScalarField::zeros(grid.clone());
        for (i, j) in grid.deep_nodes(RESAMPLE_DEPTH) {
            let p = grid.point(i, j);
            psi.set(i, j, 0.01 * p.x * p.y);
        }
        psi.extrapolate_shallow(RESAMPLE_DEPTH);
        u = u.with_psi(psi);
        let out = apply_affine(&u, &AffineMap::identity()).unwrap();
        for &(x, y) in &[(0.3, 0.4), (0.5, 0.5), (0.8, 0.2)] {
            let p = Vec2::new(x, y);
            assert!((out.value(p).unwrap() - u.value(p).unwrap()).abs() < 1e-12);
            let (a, b) = (out.jet(p, 4).unwrap(), u.jet(p, 4).unwrap());
            assert!(a.hessian.sub_mat(&b.hessian).max_abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_lambda_doubles_values() {
        let u = SplitPotential::guillemin(DelzantPolytope::unit_square());
        let m = AffineMap::new(Mat2::IDENTITY, Vec2::ZERO, 2.0).unwrap();
        let out = apply_affine(&u, &m).unwrap();
        for &(x, y) in &[(0.25, 0.6), (0.5, 0.5), (0.9, 0.1)] {
            let p = Vec2::new(x, y);
            assert!((out.value(p).unwrap() - 2.0 * u.value(p).unwrap()).abs() < 1e-12);
        }
        // Theta halves under lambda = 2
        let p = Vec2::new(0.3, 0.7);
        let ratio = theta(&out, p).unwrap() / theta(&u, p).unwrap();
        assert!((ratio - 0.5).abs() < 1e-10, "theta ratio {ratio}");
    }

    #[test]
    fn transported_jets_follow_the_affine_rules() {
        let u = SplitPotential::guillemin(DelzantPolytope::unit_square());
        let map = AffineMap::new(Mat2::new(2.0, 1.0, 0.0, 1.0), Vec2::new(0.3, -0.2), 1.7).unwrap();
        let out = apply_affine(&u, &map).unwrap();
        let ainv = map.a.inverse().unwrap();
        for &(x, y) in &[(0.2, 0.3), (0.5, 0.5), (0.7, 0.2), (0.35, 0.8), (0.9, 0.6)] {
            let xi = Vec2::new(x, y);
            let im = map.forward(xi);
            let ju = u.jet(xi, 2).unwrap();
            let jt = out.jet(im, 2).unwrap();
            let det_pred =
                map.lambda * map.lambda / (map.a.det() * map.a.det()) * ju.det_hessian;
            assert!(
                (jt.det_hessian - det_pred).abs() < 1e-8 * det_pred.abs(),
                "determinant rule broke at {xi:?}"
            );
            let h_pred = ainv.transpose().mul_mat(&ju.hessian).mul_mat(&ainv).scale(map.lambda);
            assert!(jt.hessian.sub_mat(&h_pred).max_abs() < 1e-8 * h_pred.max_abs());
            let th = theta(&out, im).unwrap();
            let th_pred = theta(&u, xi).unwrap() / map.lambda;
            assert!((th - th_pred).abs() < 1e-8 * th_pred.abs().max(1e-3));
            let s = abreu_s_u(&out, im).unwrap();
            let s_pred = abreu_s_u(&u, xi).unwrap() / map.lambda;
            assert!((s - s_pred).abs() < 1e-8 * s_pred.abs().max(1.0), "S rule broke at {xi:?}");
        }
    }

    #[test]
    fn disks_only_survive_similarities() {
        let u = SplitPotential::analytic_only(
            Domain::Disk { center: Vec2::ZERO, radius: 1.0 },
            Arc::new(QuadraticPart::isotropic(1.0)),
            "disk quadratic",
        );
        let shear = AffineMap::base(Mat2::new(1.0, 0.5, 0.0, 1.0), Vec2::ZERO).unwrap();
        assert!(matches!(apply_affine(&u, &shear), Err(AffineError::UnrepresentableDomain)));
        let rot = Mat2::new(0.6, -0.8, 0.8, 0.6);
        let sim = AffineMap::base(rot.scale(2.0), Vec2::new(1.0, 1.0)).unwrap();
        let out = apply_affine(&u, &sim).unwrap();
        match out.domain {
            Domain::Disk { center, radius } => {
                assert!((center - Vec2::new(1.0, 1.0)).norm() < 1e-12);
                assert!((radius - 2.0).abs() < 1e-12);
            }
            other => panic!("expected a disk, got {other:?}"),
        }
    }

    // -- John normalization ---------------------------------------------------

    #[test]
    fn john_rectangle_matches_centered_ellipse_oracle() {
        let rect = ConvexPolygon::new(vec![
            Vec2::ZERO,
            Vec2::new(2.0, 0.0),
            Vec2::new(2.0, 1.0),
            Vec2::new(0.0, 1.0),
        ])
        .unwrap();
        let c = rect.centroid();
        let centered: Vec<Vec2> = rect.vertices().iter().map(|v| *v - c).collect();
        let q = mvee_grid_oracle(&centered, 5);
        assert!((q.get(0, 0) - 1.0).abs() < 1e-3, "oracle q11 {}", q.get(0, 0));
        assert!((q.get(1, 1) - 4.0).abs() < 1e-3, "oracle q22 {}", q.get(1, 1));
        assert!(q.get(0, 1).abs() < 1e-3);
        let (t, image) = john_normalize(&rect).unwrap();
        assert!((t.a.get(0, 0) - FRAC_1_SQRT_2).abs() < 1e-9);
        assert!((t.a.get(1, 1) - SQRT_2).abs() < 1e-9);
        assert!(t.a.get(0, 1).abs() < 1e-9 && t.a.get(1, 0).abs() < 1e-9);
        assert!((t.a0 + t.a.mul_vec(c)).norm() < 1e-12);
        let a_oracle = q.scale(0.5).sym_sqrt().unwrap();
        assert!(a_oracle.sub_mat(&t.a).max_abs() < 1e-4);
        sandwich_ok(&image);
    }

    #[test]
    fn john_triangle_matches_oracle() {
        let tri =
            ConvexPolygon::new(vec![Vec2::ZERO, Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)]).unwrap();
        let c = tri.centroid();
        let centered: Vec<Vec2> = tri.vertices().iter().map(|v| *v - c).collect();
        let q = mvee_grid_oracle(&centered, 5);
        // All three vertices sit on the centered minimal ellipse, which pins
        // Q = [[6, 3], [3, 6]].
        assert!((q.get(0, 0) - 6.0).abs() < 2e-3, "oracle q11 {}", q.get(0, 0));
        assert!((q.get(0, 1) - 3.0).abs() < 2e-3, "oracle q12 {}", q.get(0, 1));
        assert!((q.get(1, 1) - 6.0).abs() < 2e-3);
        let (t, image) = john_normalize(&tri).unwrap();
        let exp = Mat2::sym(1.6730326074756157, 0.4482877360840267, 1.6730326074756157);
        assert!(t.a.sub_mat(&exp).max_abs() < 1e-6, "normalizer {:?}", t.a);
        sandwich_ok(&image);
    }

    #[test]
    fn john_fixes_the_unit_disk() {
        let n = 256;
        let verts: Vec<Vec2> = (0..n)
            .map(|k| {
                let a = TAU * k as f64 / n as f64;
                Vec2::new(a.cos(), a.sin())
            })
            .collect();
        let disk = ConvexPolygon::new(verts).unwrap();
        let (t, _) = john_normalize(&disk).unwrap();
        assert!(t.a.sub_mat(&Mat2::IDENTITY).max_abs() < 1e-3);
        assert!(t.a0.norm() < 1e-9);
    }

    #[test]
    fn john_random_polygons_sandwich_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for round in 0..20 {
            let omega = random_polygon(&mut rng);
            let (_, image) = john_normalize(&omega).unwrap();
            sandwich_ok(&image);
            let (t2, _) = john_normalize(&image).unwrap();
            assert!(
                t2.a.sub_mat(&Mat2::IDENTITY).max_abs() < 1e-3 && t2.a0.norm() < 1e-3,
                "round {round}: renormalization moved, map {t2:?}"
            );
        }
    }

    #[test]
    fn john_map_obeys_the_radius_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..12 {
            let omega = random_star_polygon(&mut rng);
            let r = omega.clearance(Vec2::ZERO);
            let big_r = omega.vertices().iter().map(|v| v.norm()).fold(0.0, f64::max);
            let (t, _) = john_normalize(&omega).unwrap();
            let sv = t.a.singular_values();
            let (smax, smin) = (sv[0].max(sv[1]), sv[0].min(sv[1]));
            assert!(smin >= 2f64.powf(-2.5) / big_r - 1e-9, "smin {smin} vs R {big_r}");
            assert!(smax <= 2.0 / r + 1e-9, "smax {smax} vs r {r}");
            assert!(t.a.mul_vec(omega.centroid()).norm() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn widths_of_reference_shapes() {
        let square = DelzantPolytope::unit_square().polygon();
        assert!((widths(&square) - Vec2::new(1.0, 1.0)).norm() < 1e-12);
        let tri =
            ConvexPolygon::new(vec![Vec2::ZERO, Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)]).unwrap();
        assert!((widths(&tri) - Vec2::new(1.0, 1.0)).norm() < 1e-12);
        let rect = ConvexPolygon::new(vec![
            Vec2::ZERO,
            Vec2::new(2.0, 0.0),
            Vec2::new(2.0, 1.0),
            Vec2::new(0.0, 1.0),
        ])
        .unwrap();
        assert!((widths(&rect) - Vec2::new(2.0, 1.0)).norm() < 1e-12);
    }

    // -- sections -------------------------------------------------------------

    #[test]
    fn section_of_quadratic_is_a_disk() {
        let u = SplitPotential::analytic_only(
            Domain::All,
            Arc::new(QuadraticPart::isotropic(1.0)),
            "quadratic",
        );
        let p = Vec2::new(0.3, -0.2);
        let s = section(&u, p, 0.5).unwrap();
        assert!(s.closed && s.polygon.contains(p));
        for v in s.polygon.vertices() {
            assert!(((*v - p).norm() - 1.0).abs() < 1e-3, "radius {}", (*v - p).norm());
        }
        assert!((s.polygon.area() - PI).abs() < 2e-3);
        let half = section(&u, p, 0.125).unwrap();
        for v in half.polygon.vertices() {
            assert!(((*v - p).norm() - 0.5).abs() < 1e-3);
        }
    }

    #[test]
    fn guillemin_sections_are_compact_and_monotone() {
        let u = SplitPotential::guillemin(DelzantPolytope::unit_square());
        let p = Vec2::new(0.5, 0.5);
        let small = section(&u, p, 0.05).unwrap();
        let big = section(&u, p, 0.1).unwrap();
        let square = DelzantPolytope::unit_square().polygon();
        for v in big.polygon.vertices() {
            assert!(square.clearance(*v) > 0.0, "section vertex {v:?} not strictly inside");
        }
        for v in small.polygon.vertices() {
            assert!(big.polygon.clearance(*v) > -1e-6, "monotonicity broke at {v:?}");
        }
        match section(&u, p, 2.0) {
            Err(AffineError::NotCompact { .. }) => {}
            other => panic!("expected NotCompact, got {other:?}"),
        }
    }

    #[test]
    fn wall_sections_detect_the_wall() {
        let u = SplitPotential::half_plane_patch(1.0, 0.0, 2.0);
        let p = Vec2::new(0.5, 0.0);
        let ok = section(&u, p, 0.05).unwrap();
        for v in ok.polygon.vertices() {
            assert!(v.x > 0.0);
        }
        match section(&u, p, 1.0) {
            Err(AffineError::NotCompact { .. }) => {}
            other => panic!("expected NotCompact, got {other:?}"),
        }
    }

    // -- blow-up ----------------------------------------------------------------

    #[test]
    fn blowup_flattens_quadratics() {
        let u = SplitPotential::analytic_only(
            Domain::All,
            Arc::new(PolyPart { terms: vec![(2, 0, 2.0), (0, 2, 0.5), (1, 0, 0.3), (0, 1, -0.2)] }),
            "anisotropic quadratic",
        );
        let p = Vec2::new(0.7, -0.3);
        let (out, map) = blowup_normalize(&u, p, 1.0).unwrap();
        assert!(map.a.sub_mat(&Mat2::diag(2.0, 1.0)).max_abs() < 1e-12, "map {:?}", map.a);
        let jet = out.jet(Vec2::ZERO, 2).unwrap();
        assert!(jet.value.abs() < 1e-8);
        assert!(jet.gradient.norm() < 1e-8);
        assert!(jet.hessian.sub_mat(&Mat2::IDENTITY).max_abs() < 1e-8);
    }

    #[test]
    fn blowup_theta_scales_inversely() {
        let u = SplitPotential::guillemin(DelzantPolytope::unit_square());
        let p = Vec2::new(0.3, 0.4);
        let lambda = 0.5;
        let (out, _) = blowup_normalize(&u, p, lambda).unwrap();
        let jet = out.jet(Vec2::ZERO, 2).unwrap();
        assert!(jet.value.abs() < 1e-10 && jet.gradient.norm() < 1e-10);
        assert!(jet.hessian.sub_mat(&Mat2::IDENTITY).max_abs() < 1e-10);
        let lhs = theta(&out, Vec2::ZERO).unwrap();
        let rhs = theta(&u, p).unwrap() / lambda;
        assert!((lhs - rhs).abs() < 1e-8 * rhs.abs().max(1.0), "theta {lhs} vs {rhs}");
    }

    // -- half-plane transformations ---------------------------------------------

    fn perturbed_wall_potential() -> SplitPotential {
        let sum = SumPart {
            parts: vec![
                Arc::new(HalfPlanePart),
                Arc::new(PolyPart { terms: vec![(2, 0, 0.2), (1, 2, 0.1)] }),
            ],
        };
        SplitPotential::analytic_only(
            Domain::HalfPlanePatch { depth: 0.8, center: 0.0, halfwidth: 1.0 },
            Arc::new(sum),
            "perturbed wall model",
        )
    }

    #[test]
    fn halfplane_identity_params_change_nothing() {
        let u = perturbed_wall_potential();
        let (out, maps) = halfplane_affine(&u, HalfPlaneParams::identity()).unwrap();
        assert!((maps.z1_scale() - 1.0).abs() < 1e-15);
        assert_eq!(maps.w2_affine(), (1.0, 0.0));
        for &(x, y) in &[(0.2, 0.1), (0.5, -0.4), (0.7, 0.6)] {
            let p = Vec2::new(x, y);
            assert!((out.value(p).unwrap() - u.value(p).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn halfplane_bullets_hold_as_identities() {
        let u = perturbed_wall_potential();
        let cases = [
            HalfPlaneParams { alpha: 1.3, beta: 0.7, gamma: 0.15, eta: 0.4, b: -0.3, c: 0.2 },
            HalfPlaneParams { alpha: 0.6, beta: 1.8, gamma: -0.2, eta: -0.5, b: 0.25, c: -0.1 },
        ];
        for params in cases {
            let (out, maps) = halfplane_affine(&u, params).unwrap();
            for &(x, y) in &[(0.3, 0.1), (0.5, -0.2), (0.2, 0.3)] {
                let xi = Vec2::new(x, y);
                let checks = halfplane_bullets(&u, &out, &maps, xi).unwrap();
                for c in checks {
                    assert!(
                        c.rel_error() < 1e-6,
                        "{} at {xi:?}: transported {} predicted {} (rel {:.2e})",
                        c.name,
                        c.transported,
                        c.predicted,
                        c.rel_error()
                    );
                }
            }
        }
    }

    // -- minimal normalized triple -----------------------------------------------

    #[test]
    fn minimal_triple_on_the_model() {
        let u = SplitPotential::half_plane_patch(2.0, 0.0, 2.0);
        let t = minimal_normalize_triple(&u, Vec2::new(1.0, 0.0)).unwrap();
        assert!((t.s0 - 10.0).abs() < 1e-4, "S0 {}", t.s0);
        let beta_expected = 2.0 * SQRT_2 / 10.0;
        assert!((t.params.beta - beta_expected).abs() < 1e-6, "beta {}", t.params.beta);
        assert_eq!(t.p_check, Vec2::ZERO);
        assert!((t.p_min - Vec2::new(1.0, 0.0)).norm() < 1e-9);
        assert!(wall_value(&t.potential, 0.0).unwrap().abs() < 1e-8);
        assert!(wall_value(&t.potential, 0.3).unwrap() > -1e-12);
        assert!(wall_value(&t.potential, -0.3).unwrap() > -1e-12);
        let g = t.potential.gradient(t.p_min).unwrap();
        assert!(g.norm() < 1e-8, "gradient at the minimum: {g:?}");
        // explicit form of the normalized model: xi1 log xi1 + (xi2/beta)^2 - xi1
        let xi = Vec2::new(0.5, 0.3);
        let expect = 0.5 * 0.5f64.ln() + (0.3 / t.params.beta).powi(2) - 0.5;
        assert!((t.potential.value(xi).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn minimal_triple_ignores_wall_translations() {
        let base = SplitPotential::half_plane_patch(2.0, 0.0, 2.0);
        let t0 = minimal_normalize_triple(&base, Vec2::new(1.0, 0.0)).unwrap();
        let shifted = SplitPotential::half_plane_patch(2.0, 5.0, 2.0);
        let t5 = minimal_normalize_triple(&shifted, Vec2::new(1.0, 5.0)).unwrap();
        assert!((t0.params.beta - t5.params.beta).abs() < 1e-9);
        assert!((t0.s0 - t5.s0).abs() < 1e-9);
        assert!((t5.p_min - t0.p_min).norm() < 1e-9, "p_min images {:?} vs {:?}", t5.p_min, t0.p_min);
        for &(x, y) in &[(0.5, 0.2), (1.5, -0.3), (0.8, 0.0)] {
            let xi = Vec2::new(x, y);
            let (a, b) = (t0.potential.value(xi).unwrap(), t5.potential.value(xi).unwrap());
            assert!((a - b).abs() < 1e-9, "triples disagree at {xi:?}: {a} vs {b}");
        }
    }

    #[test]
    fn minimal_triple_flags_short_walls() {
        let u = SplitPotential::half_plane_patch(2.0, 0.0, 0.3);
        match minimal_normalize_triple(&u, Vec2::new(1.0, 0.0)) {
            Err(AffineError::BisectionFailed(_)) => {}
            other => panic!("expected BisectionFailed, got {other:?}"),
        }
    }
}
