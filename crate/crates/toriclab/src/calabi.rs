//! The Calabi metric `G = Hess u` of a convex potential: connection,
//! Fubini-Pick tensor, curvature, geodesics, and distance estimates.
//!
//! Geodesics run in arclength parametrization, which regularizes boundary
//! approach: for a Guillemin-type edge (`u_nn ~ 1/l`) the normal coordinate
//! is quadratic in arclength, so fixed-step RK4 stays accurate all the way
//! in and the remaining length admits the tail estimate `2 l / (-dl/ds)`.

use crate::field::{FieldError, SplitPotential};
use crate::linalg::{Mat2, Sym3, Vec2};
use rayon::prelude::*;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalabiError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("geodesic left the domain at arclength {reached:.6}")]
    LeftDomain { reached: f64, path: GeodesicPath },
    #[error("no geodesic found from ({}, {}) to ({}, {}): best miss {best_miss:.3e}", .a.x, .a.y, .b.x, .b.y)]
    NoPathFound { a: Vec2, b: Vec2, best_miss: f64 },
}

/// Default arclength step for geodesic integration.
pub const DEFAULT_STEP: f64 = 1e-2;
/// Fan resolution for boundary-distance estimates.
pub const DEFAULT_FAN_RAYS: usize = 64;

/// Pointwise metric data: `G`, its inverse, Christoffel symbols
/// `Gamma^k_ij = 1/2 G^{kl} u_ijl`, Fubini-Pick `A_ijk = -1/2 u_ijk`,
/// curvature `R_ijkl = G^{mh}(A_jkm A_hil - A_ikm A_hjl)`, and Ricci
/// `R_ik = G^{jl} R_ijkl`.
#[derive(Debug, Clone)]
pub struct MetricSample {
    pub point: Vec2,
    pub g: Mat2,
    pub g_inv: Mat2,
    /// Indexed `[k][i][j]`, symmetric in `(i, j)`.
    pub christoffel: [[[f64; 2]; 2]; 2],
    pub fubini_pick: Sym3,
    /// Indexed `[i][j][k][l]`.
    pub riemann: [[[[f64; 2]; 2]; 2]; 2],
    pub ricci: Mat2,
}

pub fn metric_sample(p: &SplitPotential, point: Vec2) -> Result<MetricSample, FieldError> {
    let jet = p.jet(point, 3)?;
    let g = jet.hessian;
    let g_inv = jet.inv_hessian;
    let mut christoffel = [[[0.0; 2]; 2]; 2];
    for (k, plane) in christoffel.iter_mut().enumerate() {
        for (i, row) in plane.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for l in 0..2 {
                    acc += g_inv.get(k, l) * jet.third.get(i, j, l);
                }
                *v = 0.5 * acc;
            }
        }
    }
    let fubini_pick = jet.third.scale(-0.5);
    let a = &fubini_pick;
    let mut riemann = [[[[0.0; 2]; 2]; 2]; 2];
    for (i, b1) in riemann.iter_mut().enumerate() {
        for (j, b2) in b1.iter_mut().enumerate() {
            for (k, b3) in b2.iter_mut().enumerate() {
                for (l, v) in b3.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for m in 0..2 {
                        for h in 0..2 {
                            acc += g_inv.get(m, h)
                                * (a.get(j, k, m) * a.get(h, i, l)
                                    - a.get(i, k, m) * a.get(h, j, l));
                        }
                    }
                    *v = acc;
                }
            }
        }
    }
    let mut ricci = Mat2::new(0.0, 0.0, 0.0, 0.0);
    for i in 0..2 {
        for k in 0..2 {
            let mut acc = 0.0;
            for j in 0..2 {
                for l in 0..2 {
                    acc += g_inv.get(j, l) * riemann[i][j][k][l];
                }
            }
            ricci.set(i, k, acc);
        }
    }
    Ok(MetricSample { point, g, g_inv, christoffel, fubini_pick, riemann, ricci })
}

#[derive(Debug, Clone, Copy)]
pub struct PathSample {
    pub s: f64,
    pub point: Vec2,
    pub velocity: Vec2,
}

#[derive(Debug, Clone)]
pub struct GeodesicPath {
    pub samples: Vec<PathSample>,
    pub length: f64,
}

impl GeodesicPath {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,x1,x2,v1,v2\n");
        for smp in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                crate::field::fmt_f64(smp.s),
                crate::field::fmt_f64(smp.point.x),
                crate::field::fmt_f64(smp.point.y),
                crate::field::fmt_f64(smp.velocity.x),
                crate::field::fmt_f64(smp.velocity.y)
            );
        }
        out
    }

    /// Point at arclength `s` by linear interpolation between samples.
    pub fn at(&self, s: f64) -> Vec2 {
        let smp = &self.samples;
        if s <= smp[0].s {
            return smp[0].point;
        }
        for w in smp.windows(2) {
            if s <= w[1].s {
                let t = (s - w[0].s) / (w[1].s - w[0].s).max(1e-300);
                return w[0].point + (w[1].point - w[0].point) * t;
            }
        }
        smp[smp.len() - 1].point
    }
}

/// How a ray integration ended.
#[derive(Debug, Clone, Copy, PartialEq)]
enum RayEnd {
    ReachedLength,
    /// Stopped against the boundary: last clearance and its arclength
    /// derivative, plus whether the active boundary piece is singular.
    Boundary { clearance: f64, dclearance_ds: f64, singular: bool },
}

fn acceleration(p: &SplitPotential, x: Vec2, v: Vec2) -> Result<Vec2, FieldError> {
    let jet = p.jet(x, 3)?;
    // a^k = -1/2 G^{kl} u_ijl v^i v^j.
    let mut quad = Vec2::ZERO;
    for l in 0..2 {
        let mut acc = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                acc += jet.third.get(i, j, l) * v.comp(i) * v.comp(j);
            }
        }
        quad = quad.with_comp(l, acc);
    }
    Ok(jet.inv_hessian.mul_vec(quad) * -0.5)
}

fn g_norm(p: &SplitPotential, x: Vec2, v: Vec2) -> Result<f64, FieldError> {
    let jet = p.jet(x, 2)?;
    Ok(jet.hessian.form(v, v).max(0.0).sqrt())
}

/// Integrates the unit-speed geodesic with fixed-step RK4, halving the step
/// against the boundary until it underflows.
fn integrate(
    p: &SplitPotential,
    start: Vec2,
    direction: Vec2,
    l_max: f64,
    step: f64,
) -> Result<(GeodesicPath, RayEnd), FieldError> {
    let n0 = g_norm(p, start, direction)?;
    if !(n0 > 0.0) {
        return Err(FieldError::OutsideDomain { point: start });
    }
    let mut x = start;
    let mut v = direction * (1.0 / n0);
    let mut s = 0.0;
    let mut samples = vec![PathSample { s, point: x, velocity: v }];
    let clearance_of = |q: Vec2| -> (f64, bool) {
        match p.domain.singular_clearance(q) {
            Some(sc) => {
                let c = p.domain.clearance(q);
                if sc <= c * (1.0 + 1e-9) {
                    (c, true)
                } else {
                    (c, false)
                }
            }
            None => (p.domain.clearance(q), false),
        }
    };
    // Stop against the boundary once the clearance drops below this floor;
    // the caller's tail estimate covers the remaining sliver (its error
    // scales like sqrt(floor)).
    let w_scale = match p.domain.min_width() {
        w if w.is_finite() => w.max(1e-6),
        _ => 1.0,
    };
    let c_floor = 1e-11 * w_scale;
    let c_capture = 1e-8 * w_scale;
    let mut last_clear = clearance_of(x);
    let mut last_slope = -1.0_f64;
    // Hard cap: full-length march plus generous cascade/bounce budget.
    let max_iters = ((l_max / step).ceil() as usize).saturating_mul(8) + 10_000;
    let mut iters = 0usize;
    let end = loop {
        iters += 1;
        if s >= l_max - 1e-15 || iters > max_iters {
            break RayEnd::ReachedLength;
        }
        if last_clear.0 < c_floor {
            break RayEnd::Boundary {
                clearance: last_clear.0,
                dclearance_ds: last_slope.min(-1e-12),
                singular: last_clear.1,
            };
        }
        let mut ds = step.min(l_max - s);
        // Approaching the boundary, resolve the closing parabola: never step
        // more than half the linear clearance-crossing time, or RK4 flips
        // the normal velocity and the ray bounces.
        if last_slope < -1e-300 {
            ds = ds.min(0.5 * last_clear.0 / -last_slope);
        }
        let mut advanced = false;
        // Halve against the boundary until a full RK4 step fits.
        for _ in 0..60 {
            let k1x = v;
            let k1v = match acceleration(p, x, v) {
                Ok(a) => a,
                Err(_) => break,
            };
            let try_stage = |xx: Vec2, vv: Vec2| -> Option<(Vec2, Vec2)> {
                match acceleration(p, xx, vv) {
                    Ok(a) => Some((vv, a)),
                    Err(_) => None,
                }
            };
            let Some((k2x, k2v)) = try_stage(x + k1x * (0.5 * ds), v + k1v * (0.5 * ds)) else {
                ds *= 0.5;
                continue;
            };
            let Some((k3x, k3v)) = try_stage(x + k2x * (0.5 * ds), v + k2v * (0.5 * ds)) else {
                ds *= 0.5;
                continue;
            };
            let Some((k4x, k4v)) = try_stage(x + k3x * ds, v + k3v * ds) else {
                ds *= 0.5;
                continue;
            };
            let nx = x + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (ds / 6.0);
            let nv = v + (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (ds / 6.0);
            if !p.domain.contains(nx) {
                ds *= 0.5;
                continue;
            }
            let nn = match g_norm(p, nx, nv) {
                Ok(n) if n > 0.0 => n,
                _ => {
                    ds *= 0.5;
                    continue;
                }
            };
            x = nx;
            v = nv * (1.0 / nn);
            s += ds;
            advanced = true;
            break;
        }
        if !advanced || ds < 1e-14 * step {
            break RayEnd::Boundary {
                clearance: last_clear.0,
                dclearance_ds: last_slope.min(-1e-12),
                singular: last_clear.1,
            };
        }
        let new_clear = clearance_of(x);
        let new_slope = (new_clear.0 - last_clear.0) / ds;
        // Backstop: a slope sign change hard against the wall is an
        // integration artifact of the contact, not a grazing turn.
        if last_slope < 0.0 && new_slope > 0.0 && new_clear.0 < c_capture {
            samples.push(PathSample { s, point: x, velocity: v });
            break RayEnd::Boundary {
                clearance: new_clear.0,
                dclearance_ds: last_slope.min(-1e-12),
                singular: new_clear.1,
            };
        }
        last_slope = new_slope;
        last_clear = new_clear;
        samples.push(PathSample { s, point: x, velocity: v });
    };
    Ok((GeodesicPath { length: s, samples }, end))
}

/// Shoots a unit-speed geodesic for arclength `l`. Leaving the domain is an
/// error carrying the partial path.
pub fn geodesic_shoot(
    p: &SplitPotential,
    start: Vec2,
    direction: Vec2,
    l: f64,
    step: f64,
) -> Result<GeodesicPath, CalabiError> {
    let (path, end) = integrate(p, start, direction, l, step)?;
    match end {
        RayEnd::ReachedLength => Ok(path),
        RayEnd::Boundary { .. } => {
            Err(CalabiError::LeftDomain { reached: path.length, path })
        }
    }
}

fn golden_min(mut lo: f64, mut hi: f64, iters: usize, mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Closest approach of a path to a target: `(arclength, distance)` with
/// parabolic refinement across the discrete minimum.
fn closest_approach(path: &GeodesicPath, target: Vec2) -> (f64, f64) {
    let smp = &path.samples;
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (idx, ps) in smp.iter().enumerate() {
        let d = (ps.point - target).norm();
        if d < best_d {
            best_d = d;
            best = idx;
        }
    }
    if best == 0 || best + 1 >= smp.len() {
        return (smp[best].s, best_d);
    }
    // Parabola through (s, d^2) triples.
    let (s0, s1, s2) = (smp[best - 1].s, smp[best].s, smp[best + 1].s);
    let f0 = (smp[best - 1].point - target).norm().powi(2);
    let f1 = best_d * best_d;
    let f2 = (smp[best + 1].point - target).norm().powi(2);
    let denom = (s0 - s1) * (s0 - s2) * (s1 - s2);
    if denom.abs() < 1e-300 {
        return (s1, best_d);
    }
    let a = (s2 * (f1 - f0) + s1 * (f0 - f2) + s0 * (f2 - f1)) / denom;
    let b = (s2 * s2 * (f0 - f1) + s1 * s1 * (f2 - f0) + s0 * s0 * (f1 - f2)) / denom;
    if a <= 0.0 {
        return (s1, best_d);
    }
    let sstar = (-b / (2.0 * a)).clamp(s0, s2);
    let dstar = (a * sstar * sstar + b * sstar + (f1 - a * s1 * s1 - b * s1)).max(0.0).sqrt();
    (sstar, dstar.min(best_d))
}

/// Two-point geodesic distance: golden-section shooting on the initial
/// angle, then Gauss-Seidel sweeps of discrete path-energy minimization.
pub fn distance(
    p: &SplitPotential,
    a: Vec2,
    b: Vec2,
    step: f64,
) -> Result<f64, CalabiError> {
    let chord = b - a;
    let ga = p.jet(a, 2)?.hessian;
    let gb = p.jet(b, 2)?.hessian;
    let scale = 0.5 * (ga.form(chord, chord).sqrt() + gb.form(chord, chord).sqrt());
    let l_max = 6.0 * scale + 10.0 * step;
    let theta0 = chord.y.atan2(chord.x);
    let mut shots = 0usize;
    let mut miss = |theta: f64| -> f64 {
        shots += 1;
        let dir = Vec2::new(theta.cos(), theta.sin());
        match integrate(p, a, dir, l_max, step) {
            Ok((path, _)) => closest_approach(&path, b).1,
            Err(_) => f64::INFINITY,
        }
    };
    let (mut theta_best, mut miss_best) = golden_min(theta0 - 0.9, theta0 + 0.9, 40, &mut miss);
    if miss_best > 1e-6 * (1.0 + chord.norm()) {
        // Wide scan fallback for strongly curved cases.
        let mut coarse_best = (theta0, miss_best);
        for k in 0..96 {
            let th = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * k as f64 / 96.0;
            let m = miss(th);
            if m < coarse_best.1 {
                coarse_best = (th, m);
            }
        }
        let window = 2.0 * std::f64::consts::PI / 96.0;
        let (t, m) = golden_min(coarse_best.0 - window, coarse_best.0 + window, 48, &mut miss);
        if m < miss_best {
            theta_best = t;
            miss_best = m;
        }
    }
    let _ = shots;
    if !miss_best.is_finite() || miss_best > 1e-3 * (1.0 + chord.norm()) {
        return Err(CalabiError::NoPathFound { a, b, best_miss: miss_best });
    }
    let dir = Vec2::new(theta_best.cos(), theta_best.sin());
    let (path, _) = integrate(p, a, dir, l_max, step)?;
    let (s_star, _) = closest_approach(&path, b);
    // Resample the hit segment uniformly and append the exact endpoint.
    let n = ((s_star / step).ceil() as usize).clamp(32, 4096);
    let mut pts: Vec<Vec2> = (0..=n)
        .map(|k| path.at(s_star * k as f64 / n as f64))
        .collect();
    pts[0] = a;
    pts[n] = b;
    gauss_seidel_energy(p, &mut pts, 20)?;
    path_length(p, &pts).map_err(Into::into)
}

/// In-place discrete geodesic-energy relaxation: each interior node takes a
/// damped Newton step of its local energy, using exact metric jets for the
/// gradient (no finite-difference noise).
fn gauss_seidel_energy(
    p: &SplitPotential,
    pts: &mut [Vec2],
    sweeps: usize,
) -> Result<(), CalabiError> {
    let n = pts.len();
    for _ in 0..sweeps {
        for k in 1..n - 1 {
            let (prev, cur, next) = (pts[k - 1], pts[k], pts[k + 1]);
            let seg = |from: Vec2, to: Vec2| -> Result<(Mat2, Sym3, Vec2), FieldError> {
                let mid = (from + to) * 0.5;
                let jet = p.jet(mid, 3)?;
                Ok((jet.hessian, jet.third, to - from))
            };
            let Ok((g1, t1, d1)) = seg(prev, cur) else { continue };
            let Ok((g2, t2, d2)) = seg(cur, next) else { continue };
            let mut grad = g1.mul_vec(d1) - g2.mul_vec(d2);
            for l in 0..2 {
                let mut c = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        c += t1.get(i, j, l) * d1.comp(i) * d1.comp(j)
                            + t2.get(i, j, l) * d2.comp(i) * d2.comp(j);
                    }
                }
                grad = grad.with_comp(l, grad.comp(l) + 0.25 * c);
            }
            let h = g1.add_mat(&g2);
            let Some(hinv) = h.inverse() else { continue };
            let full_step = hinv.mul_vec(grad);
            let mut t = 1.0;
            for _ in 0..20 {
                let cand = cur - full_step * t;
                if p.domain.contains(cand) && p.jet(cand, 2).is_ok() {
                    pts[k] = cand;
                    break;
                }
                t *= 0.5;
            }
        }
    }
    Ok(())
}

/// Discrete length with midpoint metric sampling.
fn path_length(p: &SplitPotential, pts: &[Vec2]) -> Result<f64, FieldError> {
    let mut total = 0.0;
    for w in pts.windows(2) {
        let mid = (w[0] + w[1]) * 0.5;
        let g = p.jet(mid, 2)?.hessian;
        let d = w[1] - w[0];
        total += g.form(d, d).max(0.0).sqrt();
    }
    Ok(total)
}

/// Boundary-distance estimate from a direction fan.
#[derive(Debug, Clone)]
pub struct BoundaryDistance {
    pub distance: f64,
    pub rays: usize,
    pub best_angle: f64,
    /// True when no ray exited within the length cap.
    pub unbounded: bool,
}

/// Exit length of one ray: integration length plus the clearance tail
/// `kappa * l / (-dl/ds)` (`kappa` = 2 against singular boundary pieces
/// where the metric grows like 1/l, 1 against plain ones).
fn ray_exit_length(p: &SplitPotential, start: Vec2, theta: f64, l_cap: f64, step: f64) -> f64 {
    let dir = Vec2::new(theta.cos(), theta.sin());
    match integrate(p, start, dir, l_cap, step) {
        Ok((path, RayEnd::Boundary { clearance, dclearance_ds, singular })) => {
            let kappa = if singular { 2.0 } else { 1.0 };
            path.length + kappa * clearance / (-dclearance_ds).max(1e-12)
        }
        _ => f64::INFINITY,
    }
}

/// Infimum of geodesic exit length over a direction fan, with golden-section
/// refinement of the best ray. Upper-envelope estimate; the fan resolution
/// is part of the result.
pub fn distance_to_boundary(
    p: &SplitPotential,
    a: Vec2,
    rays: usize,
    step: f64,
) -> Result<BoundaryDistance, CalabiError> {
    p.jet(a, 2)?;
    let scale = match p.domain.min_width() {
        w if w.is_finite() => w,
        _ => 1.0,
    };
    let l_cap = 64.0 * (1.0 + scale);
    let fan: Vec<(f64, f64)> = (0..rays)
        .into_par_iter()
        .map(|r| {
            let theta = 2.0 * std::f64::consts::PI * r as f64 / rays as f64;
            (theta, ray_exit_length(p, a, theta, l_cap, step))
        })
        .collect();
    let (mut best_theta, mut best_len) = (0.0, f64::INFINITY);
    for &(theta, len) in &fan {
        if len < best_len {
            best_len = len;
            best_theta = theta;
        }
    }
    if !best_len.is_finite() {
        return Ok(BoundaryDistance {
            distance: f64::INFINITY,
            rays,
            best_angle: best_theta,
            unbounded: true,
        });
    }
    let window = 2.0 * std::f64::consts::PI / rays as f64;
    let (theta_ref, len_ref) = golden_min(best_theta - window, best_theta + window, 48, |t| {
        ray_exit_length(p, a, t, l_cap, step)
    });
    let (theta_out, len_out) = if len_ref < best_len {
        (theta_ref, len_ref)
    } else {
        (best_theta, best_len)
    };
    Ok(BoundaryDistance { distance: len_out, rays, best_angle: theta_out, unbounded: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::QuadraticPart;
    use crate::polytope::{DelzantPolytope, Domain};
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn square_potential() -> SplitPotential {
        SplitPotential::guillemin(DelzantPolytope::unit_square())
    }

    fn flat_disk() -> SplitPotential {
        SplitPotential::analytic_only(
            Domain::Disk { center: Vec2::ZERO, radius: 1.0 },
            Arc::new(QuadraticPart::isotropic(1.0)),
            "flat disk",
        )
    }

    #[test]
    fn metric_sample_flat_for_quadratic() {
        let p = flat_disk();
        let ms = metric_sample(&p, Vec2::new(0.2, -0.3)).unwrap();
        assert!(ms.g.sub_mat(&Mat2::IDENTITY).max_abs() < 1e-14);
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(ms.christoffel[k][i][j], 0.0);
                    for l in 0..2 {
                        assert_eq!(ms.riemann[k][i][j][l], 0.0);
                    }
                }
            }
        }
        assert!(ms.ricci.max_abs() == 0.0);
    }

    #[test]
    fn metric_sample_square_center() {
        let ms = metric_sample(&square_potential(), Vec2::new(0.5, 0.5)).unwrap();
        assert!(ms.g.sub_mat(&Mat2::diag(4.0, 4.0)).max_abs() < 1e-12);
        // Odd derivatives vanish at the center.
        assert!(ms.fubini_pick.get(0, 0, 0).abs() < 1e-12);
        // 1-D factor at xi = 1/4.
        let ms2 = metric_sample(&square_potential(), Vec2::new(0.25, 0.5)).unwrap();
        assert!((ms2.g.a - 16.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn metric_sample_symmetries() {
        let u = square_potential();
        let ms = metric_sample(&u, Vec2::new(0.37, 0.61)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    assert_eq!(ms.christoffel[k][i][j], ms.christoffel[k][j][i]);
                    for l in 0..2 {
                        assert!((ms.riemann[i][j][k][l] + ms.riemann[j][i][k][l]).abs() < 1e-12);
                        assert!((ms.riemann[i][j][k][l] - ms.riemann[k][l][i][j]).abs() < 1e-12);
                    }
                }
            }
        }
        assert!((ms.ricci.b - ms.ricci.c).abs() < 1e-12);
    }

    #[test]
    fn curvature_matches_fd_christoffels() {
        // Second route: R^h_skl = d_k Gamma^h_ls - d_l Gamma^h_ks
        //                        + Gamma^h_km Gamma^m_ls - Gamma^h_lm Gamma^m_ks,
        // lowered with G on the first index. Agrees with the Fubini-Pick
        // route componentwise (same sign) against O(h^2) noise.
        let u = SplitPotential::analytic_only(
            Domain::Rect { lo: Vec2::new(-1.0, -1.0), hi: Vec2::new(1.0, 1.0) },
            Arc::new(crate::field::PolyPart {
                terms: vec![
                    (2, 0, 0.5),
                    (0, 2, 0.5),
                    (2, 2, 0.125),
                    (3, 1, 0.05),
                    (4, 0, 0.02),
                ],
            }),
            "quartic",
        );
        let p = Vec2::new(0.21, -0.33);
        let h = 1e-4;
        let gamma = |q: Vec2| metric_sample(&u, q).unwrap().christoffel;
        let dgam = |k: usize| {
            let (mut qp, mut qm) = (p, p);
            if k == 0 {
                qp.x += h;
                qm.x -= h;
            } else {
                qp.y += h;
                qm.y -= h;
            }
            let (gp, gm) = (gamma(qp), gamma(qm));
            let mut out = [[[0.0; 2]; 2]; 2];
            for a in 0..2 {
                for b in 0..2 {
                    for c in 0..2 {
                        out[a][b][c] = (gp[a][b][c] - gm[a][b][c]) / (2.0 * h);
                    }
                }
            }
            out
        };
        let dg = [dgam(0), dgam(1)];
        let ms = metric_sample(&u, p).unwrap();
        let gam = ms.christoffel;
        let mut r_fd = [[[[0.0; 2]; 2]; 2]; 2];
        for hh in 0..2 {
            for s in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        let mut v = dg[k][hh][l][s] - dg[l][hh][k][s];
                        for m in 0..2 {
                            v += gam[hh][k][m] * gam[m][l][s] - gam[hh][l][m] * gam[m][k][s];
                        }
                        r_fd[hh][s][k][l] = v;
                    }
                }
            }
        }
        // Lower the first index.
        let mut r_low = [[[[0.0; 2]; 2]; 2]; 2];
        for i in 0..2 {
            for s in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        let mut v = 0.0;
                        for hh in 0..2 {
                            v += ms.g.get(i, hh) * r_fd[hh][s][k][l];
                        }
                        r_low[i][s][k][l] = v;
                    }
                }
            }
        }
        let mut max_diff: f64 = 0.0;
        let mut max_mag: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        max_diff = max_diff.max((r_low[i][j][k][l] - ms.riemann[i][j][k][l]).abs());
                        max_mag = max_mag.max(ms.riemann[i][j][k][l].abs());
                    }
                }
            }
        }
        assert!(max_mag > 1e-3, "test instance should be curved, got {max_mag}");
        assert!(max_diff < 1e-6, "routes disagree: {max_diff:.3e} (mag {max_mag:.3e})");
    }

    #[test]
    fn shoot_straight_on_flat() {
        let p = flat_disk();
        let path = geodesic_shoot(&p, Vec2::ZERO, Vec2::new(3.0, 4.0), 0.5, 1e-2).unwrap();
        assert!((path.length - 0.5).abs() < 1e-12);
        let end = path.samples.last().unwrap();
        assert!((end.point - Vec2::new(0.3, 0.4)).norm() < 1e-10);
        // Unit speed throughout.
        for s in &path.samples {
            let n = g_norm(&p, s.point, s.velocity).unwrap();
            assert!((n - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn shoot_direction_scale_invariant() {
        let u = square_potential();
        let a = geodesic_shoot(&u, Vec2::new(0.3, 0.4), Vec2::new(0.5, 0.2), 0.7, 1e-2).unwrap();
        let b = geodesic_shoot(&u, Vec2::new(0.3, 0.4), Vec2::new(3.5, 1.4), 0.7, 1e-2).unwrap();
        let pa = a.samples.last().unwrap().point;
        let pb = b.samples.last().unwrap().point;
        assert!((pa - pb).norm() < 1e-12);
    }

    #[test]
    fn shoot_hits_arcsine_point() {
        // 1-D factor: from xi1 = 1/4 toward +e1, the point xi1 = 3/4 sits at
        // arclength pi/3.
        let u = square_potential();
        let path = geodesic_shoot(&u, Vec2::new(0.25, 0.5), Vec2::new(1.0, 0.0), PI / 3.0, 1e-3)
            .unwrap();
        let end = path.samples.last().unwrap().point;
        assert!((end.x - 0.75).abs() < 1e-7, "end.x = {}", end.x);
        assert!((end.y - 0.5).abs() < 1e-12);
    }

    #[test]
    fn shoot_left_domain_carries_partial_path() {
        let p = flat_disk();
        let err = geodesic_shoot(&p, Vec2::ZERO, Vec2::new(1.0, 0.0), 5.0, 1e-2).unwrap_err();
        match err {
            CalabiError::LeftDomain { reached, path } => {
                assert!((reached - 1.0).abs() < 1e-6);
                assert!(path.samples.len() > 50);
            }
            other => panic!("expected LeftDomain, got {other:?}"),
        }
    }

    #[test]
    fn distance_flat_is_euclidean() {
        let p = flat_disk();
        let d = distance(&p, Vec2::new(-0.3, -0.1), Vec2::new(0.4, 0.25), 1e-2).unwrap();
        let expect = (Vec2::new(0.7, 0.35)).norm();
        assert!((d - expect).abs() < 1e-6, "d = {d}, expect {expect}");
    }

    #[test]
    fn distance_arcsine_closed_form() {
        let u = square_potential();
        let d = distance(&u, Vec2::new(0.25, 0.5), Vec2::new(0.75, 0.5), 1e-3).unwrap();
        assert!((d - PI / 3.0).abs() < 1e-5, "d = {d}, pi/3 = {}", PI / 3.0);
    }

    #[test]
    fn boundary_distance_flat_disk() {
        let p = flat_disk();
        let bd = distance_to_boundary(&p, Vec2::ZERO, 64, 1e-2).unwrap();
        assert!(!bd.unbounded);
        assert!((bd.distance - 1.0).abs() < 1e-4, "bd = {}", bd.distance);
    }

    #[test]
    fn boundary_distance_square_center() {
        let u = square_potential();
        let bd = distance_to_boundary(&u, Vec2::new(0.5, 0.5), 64, 1e-2).unwrap();
        assert!((bd.distance - PI / 2.0).abs() < 1e-3, "bd = {}", bd.distance);
        // Fan self-convergence.
        let bd128 = distance_to_boundary(&u, Vec2::new(0.5, 0.5), 128, 1e-2).unwrap();
        assert!((bd.distance - bd128.distance).abs() < 1e-3);
    }

    #[test]
    fn legendre_isometry_on_random_pairs() {
        let u = square_potential();
        let f = SplitPotential::analytic_only(
            Domain::All,
            Arc::new(crate::field::LogSumExpPart::square_dual()),
            "square dual",
        );
        let pairs = [
            (Vec2::new(0.3, 0.4), Vec2::new(0.6, 0.55)),
            (Vec2::new(0.2, 0.7), Vec2::new(0.45, 0.35)),
            (Vec2::new(0.52, 0.48), Vec2::new(0.7, 0.62)),
        ];
        for (a, b) in pairs {
            let du = distance(&u, a, b, 5e-3).unwrap();
            let fa = u.gradient(a).unwrap();
            let fb = u.gradient(b).unwrap();
            let df = distance(&f, fa, fb, 5e-3).unwrap();
            assert!(
                (du - df).abs() < 1e-4 * du.max(1e-6),
                "du = {du}, df = {df}"
            );
        }
    }
}
