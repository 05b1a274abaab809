//! Delzant polytopes in the plane, generic convex domains, and the
//! closed-form jets of the Guillemin potential and the half-plane model.
//!
//! An edge record is an inward integer normal `v` and an offset `lambda`;
//! the polytope is `{ xi : l_a(xi) > 0 for all a }` with
//! `l_a(xi) = <xi, v_a> - lambda_a`. Edges are stored in counterclockwise
//! order and consecutive normals must form a unimodular pair.

use crate::linalg::{Mat2, Sym3, Sym4, Vec2};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

/// Geometric containment/classification tolerance.
pub const EPS_GEOM: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum PolytopeError {
    #[error("a polytope needs at least 3 edges, got {0}")]
    TooFewEdges(usize),
    #[error("edge {0} has zero normal")]
    ZeroNormal(usize),
    #[error("edges {0} and {1} have normal determinant {2}, expected +1 (Delzant, counterclockwise)")]
    NotDelzant(usize, usize, i64),
    #[error("normals span at most a half-plane; the region is unbounded")]
    Unbounded,
    #[error("the edge arrangement has empty interior")]
    EmptyInterior,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// One facet: inward integer normal and offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub normal: [i64; 2],
    pub lambda: f64,
}

impl Edge {
    pub fn normal_f(&self) -> Vec2 {
        Vec2::new(self.normal[0] as f64, self.normal[1] as f64)
    }

    pub fn l(&self, xi: Vec2) -> f64 {
        xi.dot(self.normal_f()) - self.lambda
    }
}

/// Where a point sits relative to a polytope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Containment {
    Interior,
    /// On edge `i` (within [`EPS_GEOM`]), strictly inside all other facets.
    BoundaryEdge(usize),
    /// On the vertex shared by edges `i` and `i+1`.
    BoundaryVertex(usize),
    Outside,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelzantPolytope {
    edges: Vec<Edge>,
    vertices: Vec<Vec2>,
}

impl DelzantPolytope {
    /// Validates the edge list and computes vertices. Vertex `i` is the
    /// intersection of edge lines `i` and `i+1` (cyclic).
    pub fn new(edges: Vec<Edge>) -> Result<Self, PolytopeError> {
        let n = edges.len();
        if n < 3 {
            return Err(PolytopeError::TooFewEdges(n));
        }
        for (i, e) in edges.iter().enumerate() {
            if e.normal == [0, 0] {
                return Err(PolytopeError::ZeroNormal(i));
            }
        }
        // Positive span: if all normals fit in a closed half-plane the
        // intersection of half-planes is unbounded.
        if !normals_span_plane(&edges) {
            return Err(PolytopeError::Unbounded);
        }
        for i in 0..n {
            let j = (i + 1) % n;
            let a = edges[i].normal;
            let b = edges[j].normal;
            let det = a[0] * b[1] - a[1] * b[0];
            if det != 1 {
                return Err(PolytopeError::NotDelzant(i, j, det));
            }
        }
        let mut vertices = Vec::with_capacity(n);
        for i in 0..n {
            let j = (i + 1) % n;
            let m = Mat2::from_rows(edges[i].normal_f(), edges[j].normal_f());
            // det == 1 by the check above.
            let rhs = Vec2::new(edges[i].lambda, edges[j].lambda);
            let v = m.inverse().expect("unimodular").mul_vec(rhs);
            vertices.push(v);
        }
        // Every vertex must satisfy every other constraint, and some point
        // must be strictly interior; otherwise the cyclic arrangement does
        // not bound a convex polygon.
        let centroid = vertices.iter().fold(Vec2::ZERO, |s, v| s + *v) / n as f64;
        for v in &vertices {
            if edges.iter().any(|e| e.l(*v) < -1e-9 * (1.0 + v.norm())) {
                return Err(PolytopeError::EmptyInterior);
            }
        }
        if edges.iter().any(|e| e.l(centroid) <= EPS_GEOM) {
            return Err(PolytopeError::EmptyInterior);
        }
        Ok(DelzantPolytope { edges, vertices })
    }

    pub fn from_normals(list: &[((i64, i64), f64)]) -> Result<Self, PolytopeError> {
        Self::new(
            list.iter()
                .map(|&((a, b), lambda)| Edge { normal: [a, b], lambda })
                .collect(),
        )
    }

    /// Unit square `[0,1]^2`.
    pub fn unit_square() -> Self {
        Self::from_normals(&[
            ((1, 0), 0.0),
            ((0, 1), 0.0),
            ((-1, 0), -1.0),
            ((0, -1), -1.0),
        ])
        .expect("unit square is Delzant")
    }

    /// Standard simplex `{ xi_i > 0, xi_1 + xi_2 < 1 }`.
    pub fn standard_simplex() -> Self {
        Self::from_normals(&[((1, 0), 0.0), ((0, 1), 0.0), ((-1, -1), -1.0)])
            .expect("standard simplex is Delzant")
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// The affine functions `l_a(xi)`, in edge order.
    pub fn l_values(&self, xi: Vec2) -> Vec<f64> {
        self.edges.iter().map(|e| e.l(xi)).collect()
    }

    pub fn l_min(&self, xi: Vec2) -> f64 {
        self.edges
            .iter()
            .map(|e| e.l(xi))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, xi: Vec2) -> Containment {
        let l = self.l_values(xi);
        if l.iter().any(|&v| v < -EPS_GEOM) {
            return Containment::Outside;
        }
        let on: Vec<usize> = (0..l.len()).filter(|&i| l[i] <= EPS_GEOM).collect();
        match on.len() {
            0 => Containment::Interior,
            1 => Containment::BoundaryEdge(on[0]),
            _ => {
                // Two active constraints meet at the vertex indexed by the
                // first of the (cyclically) adjacent pair.
                let n = self.edges.len();
                for &i in &on {
                    if on.contains(&((i + 1) % n)) {
                        return Containment::BoundaryVertex(i);
                    }
                }
                Containment::BoundaryVertex(on[0])
            }
        }
    }

    pub fn polygon(&self) -> ConvexPolygon {
        ConvexPolygon::new(self.vertices.clone()).expect("polytope vertices form a polygon")
    }

    pub fn centroid(&self) -> Vec2 {
        self.polygon().centroid()
    }

    /// Guillemin potential `v = sum l_a log l_a`. Errors outside the open
    /// polytope.
    pub fn guillemin_value(&self, xi: Vec2) -> Option<f64> {
        let mut acc = 0.0;
        for e in &self.edges {
            let l = e.l(xi);
            if l <= 0.0 {
                return None;
            }
            acc += l * l.ln();
        }
        Some(acc)
    }

    pub fn guillemin_gradient(&self, xi: Vec2) -> Option<Vec2> {
        let mut g = Vec2::ZERO;
        for e in &self.edges {
            let l = e.l(xi);
            if l <= 0.0 {
                return None;
            }
            g += e.normal_f() * (l.ln() + 1.0);
        }
        Some(g)
    }

    /// Hessian `v_jk = sum v_a^j v_a^k / l_a`.
    pub fn guillemin_hessian(&self, xi: Vec2) -> Option<Mat2> {
        let mut h = Mat2::new(0.0, 0.0, 0.0, 0.0);
        for e in &self.edges {
            let l = e.l(xi);
            if l <= 0.0 {
                return None;
            }
            let v = e.normal_f();
            h = h.add_mat(&Mat2::sym(v.x * v.x / l, v.x * v.y / l, v.y * v.y / l));
        }
        Some(h)
    }

    pub fn guillemin_third(&self, xi: Vec2) -> Option<Sym3> {
        let mut t = Sym3::ZERO;
        for e in &self.edges {
            let l = e.l(xi);
            if l <= 0.0 {
                return None;
            }
            let v = e.normal_f();
            let s = -1.0 / (l * l);
            t = t.add(&Sym3([
                s * v.x * v.x * v.x,
                s * v.x * v.x * v.y,
                s * v.x * v.y * v.y,
                s * v.y * v.y * v.y,
            ]));
        }
        Some(t)
    }

    pub fn guillemin_fourth(&self, xi: Vec2) -> Option<Sym4> {
        let mut t = Sym4::ZERO;
        for e in &self.edges {
            let l = e.l(xi);
            if l <= 0.0 {
                return None;
            }
            let v = e.normal_f();
            let s = 2.0 / (l * l * l);
            t = t.add(&Sym4([
                s * v.x * v.x * v.x * v.x,
                s * v.x * v.x * v.x * v.y,
                s * v.x * v.x * v.y * v.y,
                s * v.x * v.y * v.y * v.y,
                s * v.y * v.y * v.y * v.y,
            ]));
        }
        Some(t)
    }

    /// Parses the edge-per-line text format: `v1 v2 lambda`, `#` comments.
    pub fn parse(text: &str) -> Result<Self, PolytopeError> {
        let mut edges = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(PolytopeError::Parse {
                    line: idx + 1,
                    msg: format!("expected `v1 v2 lambda`, got {parts:?}"),
                });
            }
            let v1: i64 = parts[0].parse().map_err(|e| PolytopeError::Parse {
                line: idx + 1,
                msg: format!("bad integer `{}`: {e}", parts[0]),
            })?;
            let v2: i64 = parts[1].parse().map_err(|e| PolytopeError::Parse {
                line: idx + 1,
                msg: format!("bad integer `{}`: {e}", parts[1]),
            })?;
            let lambda: f64 = parts[2].parse().map_err(|e| PolytopeError::Parse {
                line: idx + 1,
                msg: format!("bad real `{}`: {e}", parts[2]),
            })?;
            edges.push(Edge { normal: [v1, v2], lambda });
        }
        Self::new(edges)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# edges: v1 v2 lambda (counterclockwise, inward normals)\n");
        for e in &self.edges {
            let _ = writeln!(s, "{} {} {}", e.normal[0], e.normal[1], e.lambda);
        }
        s
    }
}

fn normals_span_plane(edges: &[Edge]) -> bool {
    // The normals positively span the plane iff no closed half-plane
    // contains them all: for every normal direction, some other normal has
    // strictly negative cross AND strictly positive cross component.
    let dirs: Vec<Vec2> = edges.iter().map(|e| e.normal_f()).collect();
    for d in &dirs {
        let mut pos = false;
        let mut neg = false;
        for o in &dirs {
            let c = d.cross(*o);
            if c > 0.0 {
                pos = true;
            }
            if c < 0.0 {
                neg = true;
            }
        }
        if !(pos && neg) {
            // All other normals on one side of the line through `d`:
            // check whether the half-plane with boundary through d covers
            // everything (it does unless some normal points strictly
            // against d while neither side is crossed, which cannot happen
            // in 2-D). Treat as unbounded.
            return false;
        }
    }
    true
}

/// Convex polygon with counterclockwise vertices; used for transformed
/// domains, sections and the normalization machinery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexPolygon {
    vertices: Vec<Vec2>,
}

impl ConvexPolygon {
    pub fn new(vertices: Vec<Vec2>) -> Result<Self, PolytopeError> {
        if vertices.len() < 3 {
            return Err(PolytopeError::TooFewEdges(vertices.len()));
        }
        let p = ConvexPolygon { vertices };
        if p.signed_area() <= 0.0 {
            return Err(PolytopeError::EmptyInterior);
        }
        Ok(p)
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        let mut a = 0.0;
        for i in 0..n {
            a += self.vertices[i].cross(self.vertices[(i + 1) % n]);
        }
        0.5 * a
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// Area centroid.
    pub fn centroid(&self) -> Vec2 {
        let n = self.vertices.len();
        let mut cx = 0.0;
        let mut cy = 0.0;
        let mut a = 0.0;
        for i in 0..n {
            let p = self.vertices[i];
            let q = self.vertices[(i + 1) % n];
            let w = p.cross(q);
            a += w;
            cx += (p.x + q.x) * w;
            cy += (p.y + q.y) * w;
        }
        Vec2::new(cx / (3.0 * a), cy / (3.0 * a))
    }

    /// Signed inward clearance: positive inside, negative outside
    /// (Euclidean distance to the nearest edge line).
    pub fn clearance(&self, p: Vec2) -> f64 {
        let n = self.vertices.len();
        let mut min = f64::INFINITY;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            let t = b - a;
            let len = t.norm();
            if len < EPS_GEOM {
                continue;
            }
            // Inward normal for counterclockwise order.
            let inward = Vec2::new(-t.y, t.x) / len;
            min = min.min((p - a).dot(inward));
        }
        min
    }

    pub fn contains(&self, p: Vec2) -> bool {
        self.clearance(p) > 0.0
    }

    /// Support function `max_{x in polygon} <x, dir>`.
    pub fn support(&self, dir: Vec2) -> f64 {
        self.vertices
            .iter()
            .map(|v| v.dot(dir))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn bbox(&self) -> (Vec2, Vec2) {
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            lo.x = lo.x.min(v.x);
            lo.y = lo.y.min(v.y);
            hi.x = hi.x.max(v.x);
            hi.y = hi.y.max(v.y);
        }
        (lo, hi)
    }

    /// Maximal axis-parallel chord lengths `(wd_1, wd_2)`.
    ///
    /// The chord length at a fixed ordinate is concave piecewise-linear, so
    /// the maximum is attained at a vertex ordinate.
    pub fn widths(&self) -> Vec2 {
        let chord = |axis: usize, t: f64| -> f64 {
            // Intersect the line {xi_axis-other = t} with the polygon.
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let n = self.vertices.len();
            for i in 0..n {
                let a = self.vertices[i];
                let b = self.vertices[(i + 1) % n];
                let (pa, sa) = if axis == 0 { (a.y, a.x) } else { (a.x, a.y) };
                let (pb, sb) = if axis == 0 { (b.y, b.x) } else { (b.x, b.y) };
                if (pa - t) * (pb - t) <= 0.0 && (pa - pb).abs() > EPS_GEOM {
                    let s = sa + (t - pa) / (pb - pa) * (sb - sa);
                    lo = lo.min(s);
                    hi = hi.max(s);
                }
            }
            if hi > lo {
                hi - lo
            } else {
                0.0
            }
        };
        let mut wd = Vec2::ZERO;
        for axis in 0..2 {
            let mut best: f64 = 0.0;
            for v in &self.vertices {
                let t = if axis == 0 { v.y } else { v.x };
                best = best.max(chord(axis, t));
            }
            wd = wd.with_comp(axis, best);
        }
        wd
    }

    /// Applies `p -> m p + shift` to all vertices, reversing orientation if
    /// the map flips it.
    pub fn transform(&self, m: &Mat2, shift: Vec2) -> ConvexPolygon {
        let mut vertices: Vec<Vec2> =
            self.vertices.iter().map(|v| m.mul_vec(*v) + shift).collect();
        if m.det() < 0.0 {
            vertices.reverse();
        }
        ConvexPolygon { vertices }
    }
}

/// Convex evaluation domain for grids, geodesics and solvers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Domain {
    Polytope(DelzantPolytope),
    Polygon(ConvexPolygon),
    Disk { center: Vec2, radius: f64 },
    /// Bounded patch `0 < xi_1 < depth`, `|xi_2 - center| < halfwidth` of the
    /// half-plane model. Only the `xi_1 = 0` edge is a true (singular)
    /// boundary; the other three sides are patch cutoffs.
    HalfPlanePatch { depth: f64, center: f64, halfwidth: f64 },
    /// Axis-aligned open rectangle (used for log-affine coordinate boxes on
    /// the complex side, where no boundary is singular).
    Rect { lo: Vec2, hi: Vec2 },
    /// All of R^2 (moment images of compact polytopes, dual potentials).
    All,
}

impl Domain {
    pub fn contains(&self, p: Vec2) -> bool {
        self.clearance(p) > 0.0
    }

    /// Signed inward clearance in Euclidean units (positive inside). For
    /// polytopes this normalizes the integer normals.
    pub fn clearance(&self, p: Vec2) -> f64 {
        match self {
            Domain::Polytope(poly) => poly
                .edges()
                .iter()
                .map(|e| e.l(p) / e.normal_f().norm())
                .fold(f64::INFINITY, f64::min),
            Domain::Polygon(poly) => poly.clearance(p),
            Domain::Disk { center, radius } => radius - (p - *center).norm(),
            Domain::HalfPlanePatch { depth, center, halfwidth } => p
                .x
                .min(depth - p.x)
                .min(halfwidth - (p.y - center).abs()),
            Domain::Rect { lo, hi } => (p.x - lo.x)
                .min(hi.x - p.x)
                .min(p.y - lo.y)
                .min(hi.y - p.y),
            Domain::All => f64::INFINITY,
        }
    }

    /// Clearance to the singular part of the boundary only (`None` when the
    /// domain has no singular boundary).
    pub fn singular_clearance(&self, p: Vec2) -> Option<f64> {
        match self {
            Domain::Polytope(poly) => Some(
                poly.edges()
                    .iter()
                    .map(|e| e.l(p) / e.normal_f().norm())
                    .fold(f64::INFINITY, f64::min),
            ),
            Domain::HalfPlanePatch { .. } => Some(p.x),
            _ => None,
        }
    }

    pub fn bbox(&self) -> (Vec2, Vec2) {
        match self {
            Domain::Polytope(poly) => poly.polygon().bbox(),
            Domain::Polygon(poly) => poly.bbox(),
            Domain::Disk { center, radius } => (
                Vec2::new(center.x - radius, center.y - radius),
                Vec2::new(center.x + radius, center.y + radius),
            ),
            Domain::HalfPlanePatch { depth, center, halfwidth } => (
                Vec2::new(0.0, center - halfwidth),
                Vec2::new(*depth, center + halfwidth),
            ),
            Domain::Rect { lo, hi } => (*lo, *hi),
            // Nominal plotting window; All is never gridded.
            Domain::All => (Vec2::new(-8.0, -8.0), Vec2::new(8.0, 8.0)),
        }
    }

    /// A reference interior point (used as default gradient-inversion seed).
    pub fn inner_point(&self) -> Vec2 {
        match self {
            Domain::Polytope(poly) => poly.centroid(),
            Domain::Polygon(poly) => poly.centroid(),
            Domain::Disk { center, .. } => *center,
            Domain::HalfPlanePatch { depth, center, .. } => Vec2::new(0.5 * depth, *center),
            Domain::Rect { lo, hi } => (*lo + *hi) * 0.5,
            Domain::All => Vec2::ZERO,
        }
    }

    pub fn min_width(&self) -> f64 {
        match self {
            Domain::Polytope(poly) => {
                let wd = poly.polygon().widths();
                wd.x.min(wd.y)
            }
            Domain::Polygon(poly) => {
                let wd = poly.widths();
                wd.x.min(wd.y)
            }
            Domain::Disk { radius, .. } => 2.0 * radius,
            Domain::HalfPlanePatch { depth, halfwidth, .. } => depth.min(2.0 * halfwidth),
            Domain::Rect { lo, hi } => (hi.x - lo.x).min(hi.y - lo.y),
            Domain::All => f64::INFINITY,
        }
    }
}

/// The half-plane model potential `v_H = xi_1 log xi_1 + xi_2^2` on
/// `{xi_1 > 0}`: value and jets.
pub struct HalfPlaneModel;

impl HalfPlaneModel {
    pub fn value(xi: Vec2) -> Option<f64> {
        if xi.x <= 0.0 {
            return None;
        }
        Some(xi.x * xi.x.ln() + xi.y * xi.y)
    }

    pub fn gradient(xi: Vec2) -> Option<Vec2> {
        if xi.x <= 0.0 {
            return None;
        }
        Some(Vec2::new(xi.x.ln() + 1.0, 2.0 * xi.y))
    }

    pub fn hessian(xi: Vec2) -> Option<Mat2> {
        if xi.x <= 0.0 {
            return None;
        }
        Some(Mat2::diag(1.0 / xi.x, 2.0))
    }

    pub fn third(xi: Vec2) -> Option<Sym3> {
        if xi.x <= 0.0 {
            return None;
        }
        Some(Sym3([-1.0 / (xi.x * xi.x), 0.0, 0.0, 0.0]))
    }

    pub fn fourth(xi: Vec2) -> Option<Sym4> {
        if xi.x <= 0.0 {
            return None;
        }
        Some(Sym4([2.0 / (xi.x * xi.x * xi.x), 0.0, 0.0, 0.0, 0.0]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_square_vertices() {
        let sq = DelzantPolytope::unit_square();
        let expect = [
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(0.0, 1.0),
        ];
        for (v, e) in sq.vertices().iter().zip(expect.iter()) {
            assert!((*v - *e).norm() < EPS_GEOM);
        }
    }

    #[test]
    fn simplex_vertices() {
        let s = DelzantPolytope::standard_simplex();
        let expect = [Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)];
        // Vertex i = intersection of edges i, i+1.
        // edges: x>0, y>0, 1-x-y>0 -> v0 = (0,0), v1 = line y=0 with x+y=1 -> (1,0)? v1 is
        // edges 1,2: y=0 and x+y=1 -> (1,0). v2 is edges 2,0: x+y=1, x=0 -> (0,1).
        let got = s.vertices();
        assert!((got[0] - expect[0]).norm() < EPS_GEOM);
        assert!((got[1] - expect[1]).norm() < EPS_GEOM);
        assert!((got[2] - expect[2]).norm() < EPS_GEOM);
    }

    #[test]
    fn rejects_non_delzant_pair() {
        // det((1,0), (1,1)) = 1 but det((1,1), (-1,0)) = 1, try a genuinely
        // bad pair: (1,0) then (1,2) -> det 2.
        let r = DelzantPolytope::from_normals(&[
            ((1, 0), 0.0),
            ((1, 2), 0.0),
            ((-1, 0), -1.0),
            ((0, -1), -1.0),
        ]);
        assert!(matches!(r, Err(PolytopeError::NotDelzant(0, 1, 2))));
    }

    #[test]
    fn rejects_clockwise_order() {
        // Unit square edges listed clockwise: consecutive dets are -1.
        let r = DelzantPolytope::from_normals(&[
            ((1, 0), 0.0),
            ((0, -1), -1.0),
            ((-1, 0), -1.0),
            ((0, 1), 0.0),
        ]);
        assert!(matches!(r, Err(PolytopeError::NotDelzant(0, 1, -1))));
    }

    #[test]
    fn rejects_half_plane_span() {
        let r = DelzantPolytope::from_normals(&[((1, 0), 0.0), ((0, 1), 0.0), ((1, 1), 0.0)]);
        assert!(matches!(r, Err(PolytopeError::Unbounded)));
    }

    #[test]
    fn rejects_empty_interior() {
        // Square constraints but offsets force xi_1 > 2 and xi_1 < 1.
        let r = DelzantPolytope::from_normals(&[
            ((1, 0), 2.0),
            ((0, 1), 0.0),
            ((-1, 0), -1.0),
            ((0, -1), -1.0),
        ]);
        assert!(matches!(r, Err(PolytopeError::EmptyInterior)));
    }

    #[test]
    fn containment_classification() {
        let sq = DelzantPolytope::unit_square();
        assert_eq!(sq.contains(Vec2::new(0.5, 0.5)), Containment::Interior);
        assert_eq!(sq.contains(Vec2::new(0.0, 0.5)), Containment::BoundaryEdge(0));
        assert_eq!(sq.contains(Vec2::new(0.5, 0.0)), Containment::BoundaryEdge(1));
        assert_eq!(sq.contains(Vec2::new(0.0, 0.0)), Containment::BoundaryVertex(0));
        assert_eq!(sq.contains(Vec2::new(1.5, 0.5)), Containment::Outside);
        assert_eq!(sq.contains(Vec2::new(-1e-6, 0.5)), Containment::Outside);
    }

    #[test]
    fn guillemin_square_center_jets() {
        let sq = DelzantPolytope::unit_square();
        let c = Vec2::new(0.5, 0.5);
        // v = 4 * (1/2 log 1/2) = -2 log 2
        let v = sq.guillemin_value(c).unwrap();
        assert!((v - (-2.0 * 2.0f64.ln())).abs() < 1e-14);
        let g = sq.guillemin_gradient(c).unwrap();
        assert!(g.norm() < 1e-14);
        let h = sq.guillemin_hessian(c).unwrap();
        assert!(h.sub_mat(&Mat2::diag(4.0, 4.0)).max_abs() < 1e-14);
        assert!((h.det() - 16.0).abs() < 1e-13);
        // Third derivatives vanish at the center by symmetry.
        assert!(sq.guillemin_third(c).unwrap().max_abs() < 1e-14);
        // v_1111 = 2(1/l0^3 + 1/l2^3) = 2(8+8) = 32.
        let d4 = sq.guillemin_fourth(c).unwrap();
        assert!((d4.get(0, 0, 0, 0) - 32.0).abs() < 1e-12);
        assert!((d4.get(1, 1, 1, 1) - 32.0).abs() < 1e-12);
        assert!(d4.get(0, 0, 0, 1).abs() < 1e-14);
    }

    #[test]
    fn guillemin_1d_factor_matches_square() {
        // Along xi_2 = 1/2 the square potential restricts to the 1-D factor
        // xi log xi + (1-xi) log(1-xi) + const; check u'' = 1/(xi(1-xi)).
        let sq = DelzantPolytope::unit_square();
        for &x in &[0.1, 0.25, 0.5, 0.9] {
            let h = sq.guillemin_hessian(Vec2::new(x, 0.5)).unwrap();
            assert!((h.a - 1.0 / (x * (1.0 - x))).abs() < 1e-12);
            assert!(h.b.abs() < 1e-14);
        }
    }

    #[test]
    fn parse_roundtrip() {
        let text = "# unit square\n1 0 0.0\n0 1 0.0\n-1 0 -1.0\n0 -1 -1.0\n";
        let p = DelzantPolytope::parse(text).unwrap();
        assert_eq!(p.n_edges(), 4);
        let p2 = DelzantPolytope::parse(&p.to_text()).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn parse_errors_carry_line() {
        let bad = "1 0 0.0\n0 1 zero\n";
        match DelzantPolytope::parse(bad) {
            Err(PolytopeError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn polygon_widths_rectangle() {
        let poly = ConvexPolygon::new(vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(3.0, 0.0),
            Vec2::new(3.0, 1.0),
            Vec2::new(0.0, 1.0),
        ])
        .unwrap();
        let wd = poly.widths();
        assert!((wd.x - 3.0).abs() < 1e-12);
        assert!((wd.y - 1.0).abs() < 1e-12);
        assert!((poly.area() - 3.0).abs() < 1e-12);
        assert!((poly.centroid() - Vec2::new(1.5, 0.5)).norm() < 1e-12);
    }

    #[test]
    fn polygon_widths_triangle() {
        let poly = ConvexPolygon::new(vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(0.0, 1.0),
        ])
        .unwrap();
        let wd = poly.widths();
        assert!((wd.x - 1.0).abs() < 1e-12);
        assert!((wd.y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_plane_model_jets() {
        let p = Vec2::new(0.25, -1.0);
        assert!((HalfPlaneModel::value(p).unwrap() - (0.25 * 0.25f64.ln() + 1.0)).abs() < 1e-14);
        let h = HalfPlaneModel::hessian(p).unwrap();
        assert!((h.a - 4.0).abs() < 1e-14);
        assert!((h.d - 2.0).abs() < 1e-14);
        assert!(HalfPlaneModel::value(Vec2::new(-0.1, 0.0)).is_none());
        assert!((HalfPlaneModel::third(p).unwrap().get(0, 0, 0) + 16.0).abs() < 1e-12);
        assert!((HalfPlaneModel::fourth(p).unwrap().get(0, 0, 0, 0) - 128.0).abs() < 1e-11);
    }

    #[test]
    fn domain_clearance() {
        let d = Domain::Polytope(DelzantPolytope::unit_square());
        assert!((d.clearance(Vec2::new(0.5, 0.5)) - 0.5).abs() < 1e-12);
        assert!((d.clearance(Vec2::new(0.1, 0.5)) - 0.1).abs() < 1e-12);
        assert!(d.clearance(Vec2::new(-0.1, 0.5)) < 0.0);
        let disk = Domain::Disk { center: Vec2::ZERO, radius: 2.0 };
        assert!((disk.clearance(Vec2::new(1.0, 0.0)) - 1.0).abs() < 1e-12);
        let hp = Domain::HalfPlanePatch { depth: 1.0, center: 0.0, halfwidth: 2.0 };
        assert!((hp.clearance(Vec2::new(0.25, 0.5)) - 0.25).abs() < 1e-12);
        assert_eq!(hp.singular_clearance(Vec2::new(0.25, 0.5)), Some(0.25));
    }
}
