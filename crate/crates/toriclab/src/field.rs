//! Uniform grids over convex domains, scalar fields, and the split
//! representation `u = analytic + psi` of symplectic potentials.
//!
//! Finite differences act on the gridded smooth part `psi` only; the
//! analytic part supplies closed-form jets, so stencils never touch the
//! boundary log singularities. All stencils are central, second-order
//! accurate, radius at most 2.

use crate::linalg::{Mat2, Sym3, Sym4, Vec2};
use crate::polytope::Domain;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("grid spacing must be positive and finite, got {0}")]
    BadSpacing(f64),
    #[error("grid too coarse: only {interior} interior nodes (need at least 8)")]
    SpacingTooCoarse { interior: usize },
    #[error("point ({}, {}) is outside the domain", .point.x, .point.y)]
    OutsideDomain { point: Vec2 },
    #[error("Hessian not positive definite at ({}, {})", .point.x, .point.y)]
    NotConvexHere { point: Vec2 },
    #[error("stencil leaves the defined region near ({}, {})", .point.x, .point.y)]
    StencilOutOfDomain { point: Vec2 },
    #[error("snapshot does not match grid: {0}")]
    SnapshotMismatch(String),
    #[error("snapshot parse error at line {line}: {msg}")]
    SnapshotParse { line: usize, msg: String },
}

/// 1-D central stencils, second-order accurate, for derivative orders 0..=4.
/// Each entry is `(offset, weight)`; divide by `h^order` after summation.
pub const STENCILS_1D: [&[(isize, f64)]; 5] = [
    &[(0, 1.0)],
    &[(-1, -0.5), (1, 0.5)],
    &[(-1, 1.0), (0, -2.0), (1, 1.0)],
    &[(-2, -0.5), (-1, 1.0), (1, -1.0), (2, 0.5)],
    &[(-2, 1.0), (-1, -4.0), (0, 6.0), (1, -4.0), (2, 1.0)],
];

/// Node classification on a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeClass {
    /// Strictly inside the domain.
    Interior,
    /// Outside the domain but within `margin` rings of an interior node;
    /// carries extrapolated values so interior stencils close.
    Margin,
    Outside,
}

/// Uniform grid covering a convex domain plus a margin ring.
#[derive(Debug, Clone)]
pub struct Grid {
    pub domain: Domain,
    pub h: f64,
    pub margin: usize,
    pub origin: Vec2,
    pub nx: usize,
    pub ny: usize,
    class: Vec<NodeClass>,
    /// For interior nodes: Chebyshev ring distance to the nearest
    /// non-interior node (>= 1). Zero for non-interior nodes.
    depth: Vec<u16>,
    interior_count: usize,
}

impl Grid {
    pub fn new(domain: Domain, h: f64, margin: usize) -> Result<Arc<Grid>, FieldError> {
        if !(h.is_finite() && h > 0.0) {
            return Err(FieldError::BadSpacing(h));
        }
        let (lo, hi) = domain.bbox();
        let m = margin as f64;
        let origin = Vec2::new(lo.x - m * h, lo.y - m * h);
        // A hair of slack so dyadic boundaries land on nodes.
        let nx = (((hi.x + m * h - origin.x) / h) + 1e-9).floor() as usize + 1;
        let ny = (((hi.y + m * h - origin.y) / h) + 1e-9).floor() as usize + 1;
        let mut class = vec![NodeClass::Outside; nx * ny];
        let mut interior_count = 0;
        for j in 0..ny {
            for i in 0..nx {
                let p = Vec2::new(origin.x + i as f64 * h, origin.y + j as f64 * h);
                if domain.contains(p) {
                    class[j * nx + i] = NodeClass::Interior;
                    interior_count += 1;
                }
            }
        }
        if interior_count < 8 {
            return Err(FieldError::SpacingTooCoarse { interior: interior_count });
        }
        // Margin: non-interior nodes within `margin` Chebyshev rings of an
        // interior node.
        if margin > 0 {
            let mi = margin as isize;
            for j in 0..ny as isize {
                for i in 0..nx as isize {
                    let idx = (j as usize) * nx + i as usize;
                    if class[idx] != NodeClass::Outside {
                        continue;
                    }
                    'scan: for dj in -mi..=mi {
                        for di in -mi..=mi {
                            let (a, b) = (i + di, j + dj);
                            if a < 0 || b < 0 || a >= nx as isize || b >= ny as isize {
                                continue;
                            }
                            if class[(b as usize) * nx + a as usize] == NodeClass::Interior {
                                class[idx] = NodeClass::Margin;
                                break 'scan;
                            }
                        }
                    }
                }
            }
        }
        let mut depth = vec![0u16; nx * ny];
        for j in 0..ny as isize {
            for i in 0..nx as isize {
                let idx = (j as usize) * nx + i as usize;
                if class[idx] != NodeClass::Interior {
                    continue;
                }
                let mut d = 1u16;
                'grow: while d < u16::MAX {
                    let r = d as isize;
                    for dj in -r..=r {
                        for di in -r..=r {
                            if di.abs() != r && dj.abs() != r {
                                continue;
                            }
                            let (a, b) = (i + di, j + dj);
                            let inside = a >= 0
                                && b >= 0
                                && a < nx as isize
                                && b < ny as isize
                                && class[(b as usize) * nx + a as usize] == NodeClass::Interior;
                            if !inside {
                                break 'grow;
                            }
                        }
                    }
                    d += 1;
                }
                depth[idx] = d;
            }
        }
        Ok(Arc::new(Grid {
            domain,
            h,
            margin,
            origin,
            nx,
            ny,
            class,
            depth,
            interior_count,
        }))
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn point(&self, i: usize, j: usize) -> Vec2 {
        Vec2::new(
            self.origin.x + i as f64 * self.h,
            self.origin.y + j as f64 * self.h,
        )
    }

    pub fn class(&self, i: usize, j: usize) -> NodeClass {
        self.class[self.index(i, j)]
    }

    /// Ring distance of an interior node to the nearest non-interior node
    /// (zero for non-interior nodes).
    pub fn depth(&self, i: usize, j: usize) -> u16 {
        self.depth[self.index(i, j)]
    }

    pub fn interior_count(&self) -> usize {
        self.interior_count
    }

    pub fn nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let nx = self.nx;
        (0..self.nx * self.ny).map(move |k| (k % nx, k / nx))
    }

    pub fn interior_nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes()
            .filter(move |&(i, j)| self.class(i, j) == NodeClass::Interior)
    }

    /// Interior nodes whose ring distance to the boundary is at least `d`.
    pub fn deep_nodes(&self, d: u16) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes().filter(move |&(i, j)| self.depth(i, j) >= d)
    }

    /// True when two grids share spacing, origin and extent, so fields on
    /// one index directly into the other.
    pub fn same_layout(&self, other: &Grid) -> bool {
        self.h == other.h
            && self.origin.x == other.origin.x
            && self.origin.y == other.origin.y
            && self.nx == other.nx
            && self.ny == other.ny
    }

    /// Nearest node to a point, if the point lies on a node up to `tol*h`.
    pub fn node_at(&self, p: Vec2, tol: f64) -> Option<(usize, usize)> {
        let fi = (p.x - self.origin.x) / self.h;
        let fj = (p.y - self.origin.y) / self.h;
        let (i, j) = (fi.round(), fj.round());
        if i < 0.0 || j < 0.0 || i >= self.nx as f64 || j >= self.ny as f64 {
            return None;
        }
        if (fi - i).abs() <= tol && (fj - j).abs() <= tol {
            Some((i as usize, j as usize))
        } else {
            None
        }
    }

    /// FNV-1a hash over geometry and the node mask; stored in snapshot
    /// sidecars to detect mismatched reloads.
    pub fn mask_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(&self.nx.to_le_bytes());
        eat(&self.ny.to_le_bytes());
        eat(&self.h.to_le_bytes());
        eat(&self.origin.x.to_le_bytes());
        eat(&self.origin.y.to_le_bytes());
        eat(&(self.margin as u64).to_le_bytes());
        for c in &self.class {
            eat(&[match c {
                NodeClass::Interior => 1u8,
                NodeClass::Margin => 2,
                NodeClass::Outside => 3,
            }]);
        }
        h
    }
}

/// Scalar samples on a grid; values are defined on interior and margin
/// nodes, NaN elsewhere.
#[derive(Debug, Clone)]
pub struct ScalarField {
    pub grid: Arc<Grid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Arc<Grid>) -> Self {
        let mut values = vec![f64::NAN; grid.nx * grid.ny];
        for (i, j) in grid.nodes() {
            if grid.class(i, j) != NodeClass::Outside {
                values[grid.index(i, j)] = 0.0;
            }
        }
        ScalarField { grid, values }
    }

    /// Fills interior nodes from a closure; margin nodes get quadratic
    /// extrapolation via [`ScalarField::fill_ghosts`].
    pub fn from_fn(
        grid: Arc<Grid>,
        f: impl Fn(Vec2) -> Result<f64, FieldError>,
    ) -> Result<Self, FieldError> {
        let mut field = ScalarField::zeros(grid.clone());
        for (i, j) in grid.interior_nodes() {
            let v = f(grid.point(i, j))?;
            field.set(i, j, v);
        }
        field.fill_ghosts();
        Ok(field)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let idx = self.grid.index(i, j);
        self.values[idx] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Second-order (three-point) extrapolation of non-deep values from the
    /// interior. Rewrites every defined node whose interior depth is below
    /// `keep_depth` (all margin nodes included), so boundary closure is a
    /// deterministic function of the deep values. Each node settles from the
    /// average of its complete collinear 3-point rays, which keeps the fill
    /// exact on quadratic polynomials; multiple sweeps let corners settle
    /// after the faces feeding them.
    pub fn extrapolate_shallow(&mut self, keep_depth: u16) {
        const RAYS: [(isize, isize); 8] =
            [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
        let grid = self.grid.clone();
        let nx = grid.nx as isize;
        let ny = grid.ny as isize;
        let defined = |i: isize, j: isize| -> bool {
            i >= 0
                && j >= 0
                && i < nx
                && j < ny
                && grid.class(i as usize, j as usize) != NodeClass::Outside
        };
        let mut targets: Vec<(isize, isize)> = grid
            .nodes()
            .filter(|&(i, j)| {
                grid.class(i, j) != NodeClass::Outside && grid.depth(i, j) < keep_depth
            })
            .map(|(i, j)| (i as isize, j as isize))
            .collect();
        for &(i, j) in &targets {
            let idx = grid.index(i as usize, j as usize);
            self.values[idx] = f64::NAN;
        }
        let settled = |vals: &[f64], i: isize, j: isize| -> Option<f64> {
            if !defined(i, j) {
                return None;
            }
            let v = vals[grid.index(i as usize, j as usize)];
            if v.is_nan() {
                None
            } else {
                Some(v)
            }
        };
        // Each pass reads a frozen snapshot so a ring settles only from
        // rings already settled in earlier passes; otherwise nodes would
        // feed on same-pass neighbors in sweep order and chain
        // extrapolations of extrapolations.
        while !targets.is_empty() {
            let snapshot = self.values.clone();
            let mut progressed = false;
            let mut remaining = Vec::with_capacity(targets.len());
            for &(i, j) in &targets {
                let mut acc = 0.0;
                let mut cnt = 0;
                for (di, dj) in RAYS {
                    let (v1, v2, v3) = (
                        settled(&snapshot, i + di, j + dj),
                        settled(&snapshot, i + 2 * di, j + 2 * dj),
                        settled(&snapshot, i + 3 * di, j + 3 * dj),
                    );
                    if let (Some(a), Some(b), Some(c)) = (v1, v2, v3) {
                        acc += 3.0 * a - 3.0 * b + c;
                        cnt += 1;
                    }
                }
                if cnt > 0 {
                    let idx = grid.index(i as usize, j as usize);
                    self.values[idx] = acc / cnt as f64;
                    progressed = true;
                } else {
                    remaining.push((i, j));
                }
            }
            if !progressed {
                // Slivers with no complete ray: copy the nearest settled
                // value (constant extension).
                for &(i, j) in &remaining {
                    let idx = grid.index(i as usize, j as usize);
                    'fallback: for r in 1..(nx.max(ny)) {
                        for dj in -r..=r {
                            for di in -r..=r {
                                if let Some(v) = settled(&snapshot, i + di, j + dj) {
                                    self.values[idx] = v;
                                    break 'fallback;
                                }
                            }
                        }
                    }
                }
                break;
            }
            targets = remaining;
        }
    }

    /// Extrapolates margin nodes from the interior (keeps all interior
    /// values).
    pub fn fill_ghosts(&mut self) {
        self.extrapolate_shallow(1);
    }

    /// Linear response of [`Self::extrapolate_shallow`]: for every node it
    /// settles, the sparse weights over kept nodes (grid indices, depth at
    /// least `keep_depth`) that reproduce its extrapolated value exactly.
    /// Kept, outside, and never-settled nodes map to `None`. The pass
    /// structure mirrors the value version, so the two stay in lockstep.
    pub fn extrapolation_weights(
        grid: &Grid,
        keep_depth: u16,
    ) -> Vec<Option<Vec<(usize, f64)>>> {
        const RAYS: [(isize, isize); 8] =
            [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)];
        let nx = grid.nx as isize;
        let ny = grid.ny as isize;
        let mut rows: Vec<Option<Vec<(usize, f64)>>> = vec![None; grid.nx * grid.ny];
        let node = |i: isize, j: isize| -> Option<usize> {
            if i < 0 || j < 0 || i >= nx || j >= ny {
                return None;
            }
            let (a, b) = (i as usize, j as usize);
            if grid.class(a, b) == NodeClass::Outside {
                None
            } else {
                Some(grid.index(a, b))
            }
        };
        let kept = |idx: usize| grid.depth(idx % grid.nx, idx / grid.nx) >= keep_depth;
        let mut targets: Vec<(isize, isize)> = grid
            .nodes()
            .filter(|&(i, j)| {
                grid.class(i, j) != NodeClass::Outside && grid.depth(i, j) < keep_depth
            })
            .map(|(i, j)| (i as isize, j as isize))
            .collect();
        let settled_now: Vec<bool> = (0..grid.nx * grid.ny)
            .map(|idx| {
                grid.class(idx % grid.nx, idx / grid.nx) != NodeClass::Outside && kept(idx)
            })
            .collect();
        let mut settled = settled_now;
        while !targets.is_empty() {
            let frozen = settled.clone();
            // Weights of a frozen source: a kept node is itself, a settled
            // target carries its accumulated row.
            let merge = |rows: &[Option<Vec<(usize, f64)>>],
                         acc: &mut std::collections::BTreeMap<usize, f64>,
                         idx: usize,
                         scale: f64| {
                if kept(idx) {
                    *acc.entry(idx).or_insert(0.0) += scale;
                } else {
                    for &(k, w) in rows[idx].as_ref().expect("settled row") {
                        *acc.entry(k).or_insert(0.0) += scale * w;
                    }
                }
            };
            let mut progressed = false;
            let mut remaining = Vec::with_capacity(targets.len());
            let mut pass_rows = Vec::new();
            for &(i, j) in &targets {
                let mut acc = std::collections::BTreeMap::new();
                let mut cnt = 0;
                for (di, dj) in RAYS {
                    let srcs = (
                        node(i + di, j + dj).filter(|&s| frozen[s]),
                        node(i + 2 * di, j + 2 * dj).filter(|&s| frozen[s]),
                        node(i + 3 * di, j + 3 * dj).filter(|&s| frozen[s]),
                    );
                    if let (Some(a), Some(b), Some(c)) = srcs {
                        merge(&rows, &mut acc, a, 3.0);
                        merge(&rows, &mut acc, b, -3.0);
                        merge(&rows, &mut acc, c, 1.0);
                        cnt += 1;
                    }
                }
                let idx = grid.index(i as usize, j as usize);
                if cnt > 0 {
                    let inv = 1.0 / cnt as f64;
                    pass_rows.push((
                        idx,
                        acc.into_iter().map(|(k, w)| (k, w * inv)).collect::<Vec<_>>(),
                    ));
                    progressed = true;
                } else {
                    remaining.push((i, j));
                }
            }
            for (idx, row) in pass_rows {
                rows[idx] = Some(row);
                settled[idx] = true;
            }
            if !progressed {
                for &(i, j) in &remaining {
                    let idx = grid.index(i as usize, j as usize);
                    'fallback: for r in 1..(nx.max(ny)) {
                        for dj in -r..=r {
                            for di in -r..=r {
                                if let Some(s) =
                                    node(i + di, j + dj).filter(|&s| frozen[s])
                                {
                                    rows[idx] = if kept(s) {
                                        Some(vec![(s, 1.0)])
                                    } else {
                                        rows[s].clone()
                                    };
                                    break 'fallback;
                                }
                            }
                        }
                    }
                }
                break;
            }
            targets = remaining;
        }
        rows
    }

    /// Central finite difference of multi-index `(ax, ay)` at a node. All
    /// stencil nodes must carry values.
    pub fn fd(&self, i: usize, j: usize, ax: usize, ay: usize) -> Result<f64, FieldError> {
        debug_assert!(ax + ay <= 4 && ax <= 4 && ay <= 4);
        let grid = &self.grid;
        let sx = STENCILS_1D[ax];
        let sy = STENCILS_1D[ay];
        let mut acc = 0.0;
        for &(ox, wx) in sx {
            for &(oy, wy) in sy {
                let a = i as isize + ox;
                let b = j as isize + oy;
                if a < 0 || b < 0 || a >= grid.nx as isize || b >= grid.ny as isize {
                    return Err(FieldError::StencilOutOfDomain { point: grid.point(i, j) });
                }
                let v = self.values[grid.index(a as usize, b as usize)];
                if v.is_nan() {
                    return Err(FieldError::StencilOutOfDomain { point: grid.point(i, j) });
                }
                acc += wx * wy * v;
            }
        }
        Ok(acc / grid.h.powi(ax as i32 + ay as i32))
    }

    /// Tensor-product 4-point Lagrange interpolation (exact on bicubic
    /// polynomials). The window is clamped to the grid near edges. `deriv`
    /// interpolates the given node-wise FD derivative instead of the value.
    pub fn interpolate(&self, p: Vec2) -> Result<f64, FieldError> {
        self.interpolate_fd(p, 0, 0)
    }

    pub fn interpolate_fd(&self, p: Vec2, ax: usize, ay: usize) -> Result<f64, FieldError> {
        let grid = &self.grid;
        let fx = (p.x - grid.origin.x) / grid.h;
        let fy = (p.y - grid.origin.y) / grid.h;
        if !fx.is_finite() || !fy.is_finite() {
            return Err(FieldError::OutsideDomain { point: p });
        }
        // Base index of the 4x4 window, clamped to the grid.
        let bx = ((fx.floor() as isize) - 1)
            .clamp(0, grid.nx as isize - 4) as usize;
        let by = ((fy.floor() as isize) - 1)
            .clamp(0, grid.ny as isize - 4) as usize;
        if grid.nx < 4 || grid.ny < 4 {
            return Err(FieldError::StencilOutOfDomain { point: p });
        }
        let mut wx = [0.0; 4];
        let mut wy = [0.0; 4];
        lagrange4(fx - bx as f64, &mut wx);
        lagrange4(fy - by as f64, &mut wy);
        let mut acc = 0.0;
        for (dj, &wyj) in wy.iter().enumerate() {
            for (di, &wxi) in wx.iter().enumerate() {
                let v = if ax == 0 && ay == 0 {
                    let raw = self.values[grid.index(bx + di, by + dj)];
                    if raw.is_nan() {
                        return Err(FieldError::StencilOutOfDomain { point: p });
                    }
                    raw
                } else {
                    self.fd(bx + di, by + dj, ax, ay)?
                };
                acc += wxi * wyj * v;
            }
        }
        Ok(acc)
    }

    /// Writes `xi1,xi2,value` rows for interior nodes in row-major order.
    pub fn snapshot_csv(&self) -> String {
        let mut s = String::from("xi1,xi2,value\n");
        for (i, j) in self.grid.interior_nodes() {
            let p = self.grid.point(i, j);
            let _ = writeln!(s, "{},{},{}", fmt_f64(p.x), fmt_f64(p.y), fmt_f64(self.get(i, j)));
        }
        s
    }

    pub fn snapshot_sidecar(&self) -> SnapshotSidecar {
        let (lo, hi) = self.grid.domain.bbox();
        SnapshotSidecar {
            h: self.grid.h,
            margin: self.grid.margin,
            bbox: [lo.x, lo.y, hi.x, hi.y],
            origin: [self.grid.origin.x, self.grid.origin.y],
            nx: self.grid.nx,
            ny: self.grid.ny,
            mask_hash: format!("{:016x}", self.grid.mask_hash()),
        }
    }

    /// Reloads a snapshot onto a freshly built grid; margin values are
    /// re-extrapolated, so residual evaluations reproduce exactly.
    pub fn from_snapshot(
        grid: Arc<Grid>,
        csv: &str,
        sidecar: &SnapshotSidecar,
    ) -> Result<Self, FieldError> {
        let expect = format!("{:016x}", grid.mask_hash());
        if sidecar.mask_hash != expect {
            return Err(FieldError::SnapshotMismatch(format!(
                "mask hash {} != grid {}",
                sidecar.mask_hash, expect
            )));
        }
        if (sidecar.h - grid.h).abs() > 1e-15 {
            return Err(FieldError::SnapshotMismatch("spacing differs".into()));
        }
        let mut field = ScalarField::zeros(grid.clone());
        let mut seen = 0usize;
        for (lineno, line) in csv.lines().enumerate() {
            if lineno == 0 {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(FieldError::SnapshotParse {
                    line: lineno + 1,
                    msg: format!("expected 3 columns, got {}", parts.len()),
                });
            }
            let x: f64 = parts[0].parse().map_err(|e| FieldError::SnapshotParse {
                line: lineno + 1,
                msg: format!("{e}"),
            })?;
            let y: f64 = parts[1].parse().map_err(|e| FieldError::SnapshotParse {
                line: lineno + 1,
                msg: format!("{e}"),
            })?;
            let v: f64 = parts[2].parse().map_err(|e| FieldError::SnapshotParse {
                line: lineno + 1,
                msg: format!("{e}"),
            })?;
            let (i, j) = grid
                .node_at(Vec2::new(x, y), 1e-9)
                .ok_or_else(|| FieldError::SnapshotParse {
                    line: lineno + 1,
                    msg: format!("({x}, {y}) is not a grid node"),
                })?;
            field.set(i, j, v);
            seen += 1;
        }
        if seen != grid.interior_count() {
            return Err(FieldError::SnapshotMismatch(format!(
                "snapshot has {seen} rows, grid has {} interior nodes",
                grid.interior_count()
            )));
        }
        field.fill_ghosts();
        Ok(field)
    }
}

/// Deterministic shortest-roundtrip float formatting for exports.
pub fn fmt_f64(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

fn lagrange4(t: f64, w: &mut [f64; 4]) {
    // Nodes at 0,1,2,3; interpolation weights for position t.
    w[0] = -(t - 1.0) * (t - 2.0) * (t - 3.0) / 6.0;
    w[1] = t * (t - 2.0) * (t - 3.0) / 2.0;
    w[2] = -t * (t - 1.0) * (t - 3.0) / 2.0;
    w[3] = t * (t - 1.0) * (t - 2.0) / 6.0;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotSidecar {
    pub h: f64,
    pub margin: usize,
    pub bbox: [f64; 4],
    pub origin: [f64; 2],
    pub nx: usize,
    pub ny: usize,
    pub mask_hash: String,
}

/// Closed-form part of a split potential: value and jets to fourth order.
/// `None` marks points outside the part's natural domain.
pub trait AnalyticPart: Send + Sync + std::fmt::Debug {
    fn value(&self, p: Vec2) -> Option<f64>;
    fn gradient(&self, p: Vec2) -> Option<Vec2>;
    fn hessian(&self, p: Vec2) -> Option<Mat2>;
    fn third(&self, p: Vec2) -> Option<Sym3>;
    fn fourth(&self, p: Vec2) -> Option<Sym4>;
    fn describe(&self) -> String;
}

/// Identically zero analytic part (fully gridded potentials).
#[derive(Debug, Clone, Copy)]
pub struct ZeroPart;

impl AnalyticPart for ZeroPart {
    fn value(&self, _p: Vec2) -> Option<f64> {
        Some(0.0)
    }
    fn gradient(&self, _p: Vec2) -> Option<Vec2> {
        Some(Vec2::ZERO)
    }
    fn hessian(&self, _p: Vec2) -> Option<Mat2> {
        Some(Mat2::new(0.0, 0.0, 0.0, 0.0))
    }
    fn third(&self, _p: Vec2) -> Option<Sym3> {
        Some(Sym3::ZERO)
    }
    fn fourth(&self, _p: Vec2) -> Option<Sym4> {
        Some(Sym4::ZERO)
    }
    fn describe(&self) -> String {
        "zero".into()
    }
}

/// Quadratic form `1/2 p^T Q p + b . p + c`.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticPart {
    pub q: Mat2,
    pub b: Vec2,
    pub c: f64,
}

impl QuadraticPart {
    pub fn isotropic(scale: f64) -> Self {
        QuadraticPart { q: Mat2::diag(scale, scale), b: Vec2::ZERO, c: 0.0 }
    }
}

impl AnalyticPart for QuadraticPart {
    fn value(&self, p: Vec2) -> Option<f64> {
        Some(0.5 * self.q.form(p, p) + self.b.dot(p) + self.c)
    }
    fn gradient(&self, p: Vec2) -> Option<Vec2> {
        Some(self.q.mul_vec(p) + self.b)
    }
    fn hessian(&self, _p: Vec2) -> Option<Mat2> {
        Some(self.q)
    }
    fn third(&self, _p: Vec2) -> Option<Sym3> {
        Some(Sym3::ZERO)
    }
    fn fourth(&self, _p: Vec2) -> Option<Sym4> {
        Some(Sym4::ZERO)
    }
    fn describe(&self) -> String {
        "quadratic".into()
    }
}

/// Guillemin potential of a Delzant polytope.
#[derive(Debug, Clone)]
pub struct GuilleminPart {
    pub polytope: crate::polytope::DelzantPolytope,
}

impl AnalyticPart for GuilleminPart {
    fn value(&self, p: Vec2) -> Option<f64> {
        self.polytope.guillemin_value(p)
    }
    fn gradient(&self, p: Vec2) -> Option<Vec2> {
        self.polytope.guillemin_gradient(p)
    }
    fn hessian(&self, p: Vec2) -> Option<Mat2> {
        self.polytope.guillemin_hessian(p)
    }
    fn third(&self, p: Vec2) -> Option<Sym3> {
        self.polytope.guillemin_third(p)
    }
    fn fourth(&self, p: Vec2) -> Option<Sym4> {
        self.polytope.guillemin_fourth(p)
    }
    fn describe(&self) -> String {
        format!("guillemin({} edges)", self.polytope.n_edges())
    }
}

/// Half-plane model `xi_1 log xi_1 + xi_2^2`.
#[derive(Debug, Clone, Copy)]
pub struct HalfPlanePart;

impl AnalyticPart for HalfPlanePart {
    fn value(&self, p: Vec2) -> Option<f64> {
        crate::polytope::HalfPlaneModel::value(p)
    }
    fn gradient(&self, p: Vec2) -> Option<Vec2> {
        crate::polytope::HalfPlaneModel::gradient(p)
    }
    fn hessian(&self, p: Vec2) -> Option<Mat2> {
        crate::polytope::HalfPlaneModel::hessian(p)
    }
    fn third(&self, p: Vec2) -> Option<Sym3> {
        crate::polytope::HalfPlaneModel::third(p)
    }
    fn fourth(&self, p: Vec2) -> Option<Sym4> {
        crate::polytope::HalfPlaneModel::fourth(p)
    }
    fn describe(&self) -> String {
        "half-plane model".into()
    }
}

/// `log sum_s exp(a_s . x)` over a finite outcome set. Derivatives are the
/// cumulant tensors of the softmax distribution over the outcomes, which
/// gives exact jets of the Legendre duals of the square and simplex
/// Guillemin potentials:
/// outcomes {0, e1, e2, e1+e2} -> dual of the unit square,
/// outcomes {0, e1, e2} -> dual of the standard simplex.
#[derive(Debug, Clone)]
pub struct LogSumExpPart {
    pub outcomes: Vec<Vec2>,
}

impl LogSumExpPart {
    pub fn square_dual() -> Self {
        LogSumExpPart {
            outcomes: vec![
                Vec2::new(0.0, 0.0),
                Vec2::new(1.0, 0.0),
                Vec2::new(0.0, 1.0),
                Vec2::new(1.0, 1.0),
            ],
        }
    }

    pub fn simplex_dual() -> Self {
        LogSumExpPart {
            outcomes: vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)],
        }
    }

    fn weights(&self, x: Vec2) -> (Vec<f64>, f64) {
        let exps: Vec<f64> = self.outcomes.iter().map(|a| a.dot(x)).collect();
        let m = exps.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let ws: Vec<f64> = exps.iter().map(|&e| (e - m).exp()).collect();
        let z: f64 = ws.iter().sum();
        (ws.iter().map(|w| w / z).collect(), m + z.ln())
    }
}

impl AnalyticPart for LogSumExpPart {
    fn value(&self, p: Vec2) -> Option<f64> {
        Some(self.weights(p).1)
    }
    fn gradient(&self, p: Vec2) -> Option<Vec2> {
        let (w, _) = self.weights(p);
        let mut g = Vec2::ZERO;
        for (a, wi) in self.outcomes.iter().zip(&w) {
            g += *a * *wi;
        }
        Some(g)
    }
    fn hessian(&self, p: Vec2) -> Option<Mat2> {
        let (w, _) = self.weights(p);
        let mu = self.gradient(p)?;
        let mut h = Mat2::new(0.0, 0.0, 0.0, 0.0);
        for (a, wi) in self.outcomes.iter().zip(&w) {
            let c = *a - mu;
            h = h.add_mat(&Mat2::sym(c.x * c.x, c.x * c.y, c.y * c.y).scale(*wi));
        }
        Some(h)
    }
    fn third(&self, p: Vec2) -> Option<Sym3> {
        let (w, _) = self.weights(p);
        let mu = self.gradient(p)?;
        let mut t = Sym3::ZERO;
        for (a, wi) in self.outcomes.iter().zip(&w) {
            let c = *a - mu;
            t = t.add(&Sym3([
                c.x * c.x * c.x,
                c.x * c.x * c.y,
                c.x * c.y * c.y,
                c.y * c.y * c.y,
            ]).scale(*wi));
        }
        Some(t)
    }
    fn fourth(&self, p: Vec2) -> Option<Sym4> {
        // Fourth cumulant = fourth central moment minus the three pairings
        // of second cumulants.
        let (w, _) = self.weights(p);
        let mu = self.gradient(p)?;
        let k2 = self.hessian(p)?;
        let mut m4 = Sym4::ZERO;
        for (a, wi) in self.outcomes.iter().zip(&w) {
            let c = *a - mu;
            let cc = [c.x, c.y];
            let mut t = Sym4::ZERO;
            for i in 0..2 {
                for j in i..2 {
                    for k in j..2 {
                        for l in k..2 {
                            t.set(i, j, k, l, cc[i] * cc[j] * cc[k] * cc[l]);
                        }
                    }
                }
            }
            m4 = m4.add(&t.scale(*wi));
        }
        let mut k4 = Sym4::ZERO;
        for i in 0..2 {
            for j in i..2 {
                for k in j..2 {
                    for l in k..2 {
                        let pair = k2.get(i, j) * k2.get(k, l)
                            + k2.get(i, k) * k2.get(j, l)
                            + k2.get(i, l) * k2.get(j, k);
                        k4.set(i, j, k, l, m4.get(i, j, k, l) - pair);
                    }
                }
            }
        }
        Some(k4)
    }
    fn describe(&self) -> String {
        format!("log-sum-exp({} outcomes)", self.outcomes.len())
    }
}

/// Dual of the half-plane model: `exp(x_1 - 1) + x_2^2 / 4`.
#[derive(Debug, Clone, Copy)]
pub struct HalfPlaneDualPart;

impl AnalyticPart for HalfPlaneDualPart {
    fn value(&self, p: Vec2) -> Option<f64> {
        Some((p.x - 1.0).exp() + 0.25 * p.y * p.y)
    }
    fn gradient(&self, p: Vec2) -> Option<Vec2> {
        Some(Vec2::new((p.x - 1.0).exp(), 0.5 * p.y))
    }
    fn hessian(&self, p: Vec2) -> Option<Mat2> {
        Some(Mat2::diag((p.x - 1.0).exp(), 0.5))
    }
    fn third(&self, p: Vec2) -> Option<Sym3> {
        Some(Sym3([(p.x - 1.0).exp(), 0.0, 0.0, 0.0]))
    }
    fn fourth(&self, p: Vec2) -> Option<Sym4> {
        Some(Sym4([(p.x - 1.0).exp(), 0.0, 0.0, 0.0, 0.0]))
    }
    fn describe(&self) -> String {
        "half-plane dual".into()
    }
}

/// `x_1^2 / (2(1+x_2)) + (1+x_2)^3 / 6` on `x_2 > -1`; det Hess = 1.
#[derive(Debug, Clone, Copy)]
pub struct UnimodularModelPart;

impl AnalyticPart for UnimodularModelPart {
    fn value(&self, p: Vec2) -> Option<f64> {
        let s = 1.0 + p.y;
        if s <= 0.0 {
            return None;
        }
        Some(p.x * p.x / (2.0 * s) + s * s * s / 6.0)
    }
    fn gradient(&self, p: Vec2) -> Option<Vec2> {
        let s = 1.0 + p.y;
        if s <= 0.0 {
            return None;
        }
        Some(Vec2::new(p.x / s, -p.x * p.x / (2.0 * s * s) + 0.5 * s * s))
    }
    fn hessian(&self, p: Vec2) -> Option<Mat2> {
        let s = 1.0 + p.y;
        if s <= 0.0 {
            return None;
        }
        Some(Mat2::sym(
            1.0 / s,
            -p.x / (s * s),
            p.x * p.x / (s * s * s) + s,
        ))
    }
    fn third(&self, p: Vec2) -> Option<Sym3> {
        let s = 1.0 + p.y;
        if s <= 0.0 {
            return None;
        }
        Some(Sym3([
            0.0,
            -1.0 / (s * s),
            2.0 * p.x / (s * s * s),
            -3.0 * p.x * p.x / (s * s * s * s) + 1.0,
        ]))
    }
    fn fourth(&self, p: Vec2) -> Option<Sym4> {
        let s = 1.0 + p.y;
        if s <= 0.0 {
            return None;
        }
        Some(Sym4([
            0.0,
            0.0,
            2.0 / (s * s * s),
            -6.0 * p.x / (s * s * s * s),
            12.0 * p.x * p.x / (s * s * s * s * s),
        ]))
    }
    fn describe(&self) -> String {
        "unimodular model".into()
    }
}

/// Bivariate polynomial with explicit `(deg_x, deg_y, coeff)` terms.
#[derive(Debug, Clone)]
pub struct PolyPart {
    pub terms: Vec<(u32, u32, f64)>,
}

impl PolyPart {
    fn deriv_eval(&self, p: Vec2, dx: u32, dy: u32) -> f64 {
        let mut acc = 0.0;
        for &(px, py, c) in &self.terms {
            if px < dx || py < dy {
                continue;
            }
            let mut coeff = c;
            for k in 0..dx {
                coeff *= (px - k) as f64;
            }
            for k in 0..dy {
                coeff *= (py - k) as f64;
            }
            acc += coeff * p.x.powi((px - dx) as i32) * p.y.powi((py - dy) as i32);
        }
        acc
    }
}

impl AnalyticPart for PolyPart {
    fn value(&self, p: Vec2) -> Option<f64> {
        Some(self.deriv_eval(p, 0, 0))
    }
    fn gradient(&self, p: Vec2) -> Option<Vec2> {
        Some(Vec2::new(self.deriv_eval(p, 1, 0), self.deriv_eval(p, 0, 1)))
    }
    fn hessian(&self, p: Vec2) -> Option<Mat2> {
        Some(Mat2::sym(
            self.deriv_eval(p, 2, 0),
            self.deriv_eval(p, 1, 1),
            self.deriv_eval(p, 0, 2),
        ))
    }
    fn third(&self, p: Vec2) -> Option<Sym3> {
        Some(Sym3([
            self.deriv_eval(p, 3, 0),
            self.deriv_eval(p, 2, 1),
            self.deriv_eval(p, 1, 2),
            self.deriv_eval(p, 0, 3),
        ]))
    }
    fn fourth(&self, p: Vec2) -> Option<Sym4> {
        Some(Sym4([
            self.deriv_eval(p, 4, 0),
            self.deriv_eval(p, 3, 1),
            self.deriv_eval(p, 2, 2),
            self.deriv_eval(p, 1, 3),
            self.deriv_eval(p, 0, 4),
        ]))
    }
    fn describe(&self) -> String {
        format!("polynomial({} terms)", self.terms.len())
    }
}

/// Sum of analytic parts.
#[derive(Debug, Clone)]
pub struct SumPart {
    pub parts: Vec<Arc<dyn AnalyticPart>>,
}

impl AnalyticPart for SumPart {
    fn value(&self, p: Vec2) -> Option<f64> {
        self.parts.iter().map(|a| a.value(p)).sum()
    }
    fn gradient(&self, p: Vec2) -> Option<Vec2> {
        let mut g = Vec2::ZERO;
        for a in &self.parts {
            g += a.gradient(p)?;
        }
        Some(g)
    }
    fn hessian(&self, p: Vec2) -> Option<Mat2> {
        let mut h = Mat2::new(0.0, 0.0, 0.0, 0.0);
        for a in &self.parts {
            h = h.add_mat(&a.hessian(p)?);
        }
        Some(h)
    }
    fn third(&self, p: Vec2) -> Option<Sym3> {
        let mut t = Sym3::ZERO;
        for a in &self.parts {
            t = t.add(&a.third(p)?);
        }
        Some(t)
    }
    fn fourth(&self, p: Vec2) -> Option<Sym4> {
        let mut t = Sym4::ZERO;
        for a in &self.parts {
            t = t.add(&a.fourth(p)?);
        }
        Some(t)
    }
    fn describe(&self) -> String {
        let names: Vec<String> = self.parts.iter().map(|a| a.describe()).collect();
        format!("sum({})", names.join(" + "))
    }
}

/// Pointwise derivative data of a potential: value, gradient, Hessian with
/// inverse and determinant, third and (optionally) fourth derivatives.
#[derive(Debug, Clone)]
pub struct JetSample {
    pub point: Vec2,
    pub value: f64,
    pub gradient: Vec2,
    pub hessian: Mat2,
    pub inv_hessian: Mat2,
    pub det_hessian: f64,
    pub third: Sym3,
    pub fourth: Option<Sym4>,
}

/// Split potential `u = analytic + psi` over a convex domain.
#[derive(Debug, Clone)]
pub struct SplitPotential {
    pub domain: Domain,
    pub analytic: Arc<dyn AnalyticPart>,
    pub psi: Option<ScalarField>,
    pub label: String,
}

impl SplitPotential {
    pub fn analytic_only(
        domain: Domain,
        analytic: Arc<dyn AnalyticPart>,
        label: impl Into<String>,
    ) -> Self {
        SplitPotential { domain, analytic, psi: None, label: label.into() }
    }

    pub fn guillemin(polytope: crate::polytope::DelzantPolytope) -> Self {
        let label = format!("guillemin[{} edges]", polytope.n_edges());
        SplitPotential {
            domain: Domain::Polytope(polytope.clone()),
            analytic: Arc::new(GuilleminPart { polytope }),
            psi: None,
            label,
        }
    }

    pub fn half_plane_patch(depth: f64, center: f64, halfwidth: f64) -> Self {
        SplitPotential {
            domain: Domain::HalfPlanePatch { depth, center, halfwidth },
            analytic: Arc::new(HalfPlanePart),
            psi: None,
            label: "half-plane model".into(),
        }
    }

    pub fn with_psi(mut self, psi: ScalarField) -> Self {
        self.psi = Some(psi);
        self
    }

    /// Resamples psi onto `grid`: values are interpolated at nodes of depth
    /// at least `keep_depth` and the shallow band is extended along rays, so
    /// subsequent jets run through native node stencils. Differentiating the
    /// interpolant directly on a foreign grid is too rough for that. Without
    /// psi this is a plain clone.
    pub fn regrid(&self, grid: &Arc<Grid>, keep_depth: u16) -> Result<SplitPotential, FieldError> {
        let Some(psi) = &self.psi else {
            return Ok(self.clone());
        };
        let mut out = ScalarField::zeros(grid.clone());
        for (i, j) in grid.deep_nodes(keep_depth) {
            out.set(i, j, psi.interpolate(grid.point(i, j))?);
        }
        out.extrapolate_shallow(keep_depth);
        Ok(self.clone().with_psi(out))
    }

    /// Smooth-part jet via gridded central differences; the fourth slot is
    /// filled only when requested.
    fn psi_jet(&self, p: Vec2, order: usize) -> Result<(f64, Vec2, Mat2, Sym3, Option<Sym4>), FieldError> {
        let Some(psi) = &self.psi else {
            return Ok((0.0, Vec2::ZERO, Mat2::new(0.0, 0.0, 0.0, 0.0), Sym3::ZERO, Some(Sym4::ZERO)));
        };
        // On-node fast path with exact stencils; off-node values come from
        // interpolating the node-wise FD fields.
        let node = psi.grid.node_at(p, 1e-9);
        let take = |ax: usize, ay: usize| -> Result<f64, FieldError> {
            match node {
                Some((i, j)) => psi.fd(i, j, ax, ay),
                None => psi.interpolate_fd(p, ax, ay),
            }
        };
        let value = take(0, 0)?;
        let gradient = Vec2::new(take(1, 0)?, take(0, 1)?);
        let hessian = Mat2::sym(take(2, 0)?, take(1, 1)?, take(0, 2)?);
        let third = if order >= 3 {
            Sym3([take(3, 0)?, take(2, 1)?, take(1, 2)?, take(0, 3)?])
        } else {
            Sym3::ZERO
        };
        let fourth = if order >= 4 {
            Some(Sym4([
                take(4, 0)?,
                take(3, 1)?,
                take(2, 2)?,
                take(1, 3)?,
                take(0, 4)?,
            ]))
        } else {
            None
        };
        Ok((value, gradient, hessian, third, fourth))
    }

    pub fn value(&self, p: Vec2) -> Result<f64, FieldError> {
        if !self.domain.contains(p) {
            return Err(FieldError::OutsideDomain { point: p });
        }
        let a = self
            .analytic
            .value(p)
            .ok_or(FieldError::OutsideDomain { point: p })?;
        let psi = match &self.psi {
            Some(f) => f.interpolate(p)?,
            None => 0.0,
        };
        Ok(a + psi)
    }

    pub fn gradient(&self, p: Vec2) -> Result<Vec2, FieldError> {
        if !self.domain.contains(p) {
            return Err(FieldError::OutsideDomain { point: p });
        }
        let a = self
            .analytic
            .gradient(p)
            .ok_or(FieldError::OutsideDomain { point: p })?;
        let g = match &self.psi {
            Some(f) => Vec2::new(f.interpolate_fd(p, 1, 0)?, f.interpolate_fd(p, 0, 1)?),
            None => Vec2::ZERO,
        };
        Ok(a + g)
    }

    /// Full jet with convexity check. `order` is 2, 3 or 4.
    pub fn jet(&self, p: Vec2, order: usize) -> Result<JetSample, FieldError> {
        assert!((2..=4).contains(&order), "jet order must be 2..=4");
        if !self.domain.contains(p) {
            return Err(FieldError::OutsideDomain { point: p });
        }
        let oob = FieldError::OutsideDomain { point: p };
        let av = self.analytic.value(p).ok_or_else(|| oob_clone(&oob))?;
        let ag = self.analytic.gradient(p).ok_or_else(|| oob_clone(&oob))?;
        let ah = self.analytic.hessian(p).ok_or_else(|| oob_clone(&oob))?;
        let a3 = if order >= 3 {
            self.analytic.third(p).ok_or_else(|| oob_clone(&oob))?
        } else {
            Sym3::ZERO
        };
        let a4 = if order >= 4 {
            Some(self.analytic.fourth(p).ok_or_else(|| oob_clone(&oob))?)
        } else {
            None
        };
        let (pv, pg, ph, p3, p4) = self.psi_jet(p, order)?;
        let hessian = ah.add_mat(&ph);
        if !hessian.is_positive_definite() {
            return Err(FieldError::NotConvexHere { point: p });
        }
        let inv_hessian = hessian.inverse().ok_or(FieldError::NotConvexHere { point: p })?;
        let fourth = match (a4, p4) {
            (Some(a), Some(b)) => Some(a.add(&b)),
            (Some(a), None) => Some(a),
            _ => None,
        };
        Ok(JetSample {
            point: p,
            value: av + pv,
            gradient: ag + pg,
            hessian,
            inv_hessian,
            det_hessian: hessian.det(),
            third: a3.add(&p3),
            fourth: if order >= 4 { fourth } else { None },
        })
    }
}

fn oob_clone(e: &FieldError) -> FieldError {
    match e {
        FieldError::OutsideDomain { point } => FieldError::OutsideDomain { point: *point },
        _ => unreachable!(),
    }
}

/// Anything that can be sampled at a point (gridded fields, closures over
/// jets, composite quantities).
pub trait ScalarSource {
    fn eval(&self, p: Vec2) -> Result<f64, FieldError>;
}

impl ScalarSource for ScalarField {
    fn eval(&self, p: Vec2) -> Result<f64, FieldError> {
        self.interpolate(p)
    }
}

pub struct FnSource<F: Fn(Vec2) -> Result<f64, FieldError>>(pub F);

impl<F: Fn(Vec2) -> Result<f64, FieldError>> ScalarSource for FnSource<F> {
    fn eval(&self, p: Vec2) -> Result<f64, FieldError> {
        self.0(p)
    }
}

/// Divergence-form Laplace-Beltrami operator of the Hessian metric
/// `G = D^2 u`:
/// `Delta_G s = (1/sqrt(det G)) d_i (sqrt(det G) G^{ij} d_j s)`.
///
/// Because `G` is a Hessian its cofactor field is divergence-free, which
/// collapses the drift to
/// `Delta_G s = G^{ij} s_ij - (1/2) <grad log det G, grad s>_G`;
/// metric factors come from closed-form jets, `s` is sampled on a local
/// central stencil of step `h`.
pub fn laplace_beltrami(
    potential: &SplitPotential,
    s: &dyn ScalarSource,
    p: Vec2,
    h: f64,
) -> Result<f64, FieldError> {
    let jet = potential.jet(p, 3)?;
    let binv = jet.inv_hessian;
    let sample = |dx: f64, dy: f64| s.eval(Vec2::new(p.x + dx, p.y + dy));
    let s_c = sample(0.0, 0.0)?;
    let s_px = sample(h, 0.0)?;
    let s_mx = sample(-h, 0.0)?;
    let s_py = sample(0.0, h)?;
    let s_my = sample(0.0, -h)?;
    let s_pp = sample(h, h)?;
    let s_pm = sample(h, -h)?;
    let s_mp = sample(-h, h)?;
    let s_mm = sample(-h, -h)?;
    let s1 = Vec2::new((s_px - s_mx) / (2.0 * h), (s_py - s_my) / (2.0 * h));
    let s11 = (s_px - 2.0 * s_c + s_mx) / (h * h);
    let s22 = (s_py - 2.0 * s_c + s_my) / (h * h);
    let s12 = (s_pp - s_pm - s_mp + s_mm) / (4.0 * h * h);
    let main = binv.a * s11 + 2.0 * binv.b * s12 + binv.d * s22;
    // grad log det G via third jets: (log det)_k = B^{ij} f_ijk.
    let mut logdet_grad = Vec2::ZERO;
    for k in 0..2 {
        let mut acc = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                acc += binv.get(i, j) * jet.third.get(i, j, k);
            }
        }
        logdet_grad = logdet_grad.with_comp(k, acc);
    }
    let drift = binv.form(logdet_grad, s1);
    Ok(main - 0.5 * drift)
}
