//! Pointwise invariants of a convex potential: the real quantities rho, Phi,
//! J, Theta built from the Calabi metric, the complex quantities W, V, Psi,
//! P, T, Q of the associated torus-invariant Kahler metric, and the Ricci
//! norm K.
//!
//! Complex quantities depend on the chart. With w = log z^2 the complex
//! Hessian on the torus chart is B/4 for real Hessian B; on the mixed chart,
//! where z_1 stays holomorphic, it is D (B/4) D with D = diag(2 e^{-x1/2}, 1).
//! Every complex-side formula below is the real reduction of the standard
//! complex contraction under those conventions. The chart table is frozen
//! here and validated in the tests against finite differences over realified
//! coordinates, which know nothing about the table.

use thiserror::Error;

use crate::field::{fmt_f64, FieldError, JetSample, SplitPotential};
use crate::linalg::{Mat2, Vec2};

#[derive(Debug, Error)]
pub enum InvariantError {
    #[error(transparent)]
    Field(#[from] FieldError),
    /// Nested finite differences at steps h and 2h disagree by more than 10%
    /// of the value: the six derivative orders behind grad^2 Ric exceed what
    /// this potential resolves at this point.
    #[error("finite-difference noise {noise:.3e} exceeds 10% of value {value:.3e}")]
    InsufficientResolution { value: f64, noise: f64 },
}

/// Values of Phi and Psi below this are clamped to zero in reports so that
/// ratio-type consumers do not divide rounding dust by rounding dust.
pub const DEGENERATE_EPS: f64 = 1e-14;

pub const DEFAULT_KAPPA: f64 = 0.125;
pub const DEFAULT_ALPHA: f64 = 1.0 / 3.0;
pub const DEFAULT_N1: f64 = 100.0;

/// Complex chart for the torus-invariant Kahler metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Chart {
    /// Both coordinates logarithmic: w_i = log z_i^2, x_i = Re w_i.
    Torus,
    /// z_1 kept holomorphic across its divisor, w_2 logarithmic;
    /// x_1 = log|z_1|^2, x_2 = Re w_2.
    Mixed,
}

impl Chart {
    pub fn name(self) -> &'static str {
        match self {
            Chart::Torus => "torus",
            Chart::Mixed => "mixed",
        }
    }

    /// W = det of the complex Hessian, from the real Hessian determinant.
    pub fn w_from_real(self, det_hessian: f64, x: Vec2) -> f64 {
        match self {
            Chart::Torus => det_hessian / 16.0,
            Chart::Mixed => 0.25 * det_hessian * (-x.x).exp(),
        }
    }

    /// Gradient of V = log W over the log-affine coordinates, from the
    /// gradient of log det of the real Hessian.
    pub fn log_w_gradient(self, log_det_grad: Vec2) -> Vec2 {
        match self {
            Chart::Torus => log_det_grad,
            Chart::Mixed => Vec2::new(log_det_grad.x - 1.0, log_det_grad.y),
        }
    }

    /// |z|^2 on the torus-invariant locus.
    pub fn z_norm_sq(self, x: Vec2) -> f64 {
        match self {
            Chart::Torus => x.x.exp() + x.y.exp(),
            Chart::Mixed => x.x.exp() + x.y * x.y,
        }
    }

    /// Complex Hessian on the invariant locus as a real symmetric matrix.
    pub fn complex_hessian(self, b: &Mat2, x: Vec2) -> Mat2 {
        let quarter = b.scale(0.25);
        match self {
            Chart::Torus => quarter,
            Chart::Mixed => {
                let d = Mat2::diag(2.0 * (-0.5 * x.x).exp(), 1.0);
                d.mul_mat(&quarter).mul_mat(&d)
            }
        }
    }
}

impl std::fmt::Display for Chart {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// L_i = (log det Hess f)_i = tr(B^{-1} d_i B). Needs an order-3 jet.
pub(crate) fn log_det_gradient(j: &JetSample) -> Vec2 {
    let mut g = [0.0; 2];
    for (i, gi) in g.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..2 {
            for l in 0..2 {
                acc += j.inv_hessian.get(k, l) * j.third.get(k, l, i);
            }
        }
        *gi = acc;
    }
    Vec2::new(g[0], g[1])
}

/// L_ij = (log det Hess f)_ij
///      = tr(B^{-1} d_ij B) - tr(B^{-1} d_i B B^{-1} d_j B).
/// Needs an order-4 jet.
pub(crate) fn log_det_hessian(j: &JetSample) -> Mat2 {
    let fourth = j.fourth.as_ref().expect("log_det_hessian needs an order-4 jet");
    let db = |i: usize| {
        Mat2::sym(j.third.get(0, 0, i), j.third.get(0, 1, i), j.third.get(1, 1, i))
    };
    let ddb = |i: usize, k: usize| {
        Mat2::sym(fourth.get(0, 0, i, k), fourth.get(0, 1, i, k), fourth.get(1, 1, i, k))
    };
    let mut out = Mat2::new(0.0, 0.0, 0.0, 0.0);
    for i in 0..2 {
        for k in i..2 {
            let t1 = j.inv_hessian.mul_mat(&ddb(i, k)).trace();
            let t2 = j
                .inv_hessian
                .mul_mat(&db(i))
                .mul_mat(&j.inv_hessian)
                .mul_mat(&db(k))
                .trace();
            let v = t1 - t2;
            out.set(i, k, v);
            out.set(k, i, v);
        }
    }
    out
}

fn phi_from_jet(j: &JetSample) -> f64 {
    // rho = det(B)^{-1/4}, so grad rho / rho = -L/4 and
    // Phi = |grad rho|^2_G / rho^2 = G^{ij} L_i L_j / 16.
    let l = log_det_gradient(j);
    j.inv_hessian.form(l, l) / 16.0
}

fn pick_j_from_jet(j: &JetSample) -> f64 {
    // 4 n (n-1) J = f^{il} f^{jm} f^{kn} f_ijk f_lmn, n = 2.
    let b = &j.inv_hessian;
    let mut acc = 0.0;
    for i in 0..2 {
        for jj in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    for m in 0..2 {
                        for n in 0..2 {
                            acc += b.get(i, l)
                                * b.get(jj, m)
                                * b.get(k, n)
                                * j.third.get(i, jj, k)
                                * j.third.get(l, m, n);
                        }
                    }
                }
            }
        }
    }
    acc / 8.0
}

fn psi_from_jet(j: &JetSample, chart: Chart) -> f64 {
    // Psi = sum f^{i jbar} V_i V_jbar. In real reduction the chart factors
    // cancel pairwise and only the gradient of log W survives:
    // Psi = B^{ij} V_i V_j with V the chart's log W over x.
    let v = chart.log_w_gradient(log_det_gradient(j));
    j.inv_hessian.form(v, v)
}

/// rho = det(f_ij)^{-1/(n+2)} with n = 2.
pub fn rho(p: &SplitPotential, point: Vec2) -> Result<f64, InvariantError> {
    let j = p.jet(point, 2)?;
    Ok(j.det_hessian.powf(-0.25))
}

/// Phi = |grad rho|^2_G / rho^2.
pub fn phi(p: &SplitPotential, point: Vec2) -> Result<f64, InvariantError> {
    let j = p.jet(point, 3)?;
    Ok(phi_from_jet(&j))
}

/// Pick invariant J from 4n(n-1) J = sum f^{il} f^{jm} f^{kn} f_ijk f_lmn.
pub fn pick_j(p: &SplitPotential, point: Vec2) -> Result<f64, InvariantError> {
    let j = p.jet(point, 3)?;
    Ok(pick_j_from_jet(&j))
}

/// Theta = J + Phi.
pub fn theta(p: &SplitPotential, point: Vec2) -> Result<f64, InvariantError> {
    let j = p.jet(point, 3)?;
    Ok(phi_from_jet(&j) + pick_j_from_jet(&j))
}

/// W = det of the complex Hessian in the given chart.
pub fn complex_w(p: &SplitPotential, point: Vec2, chart: Chart) -> Result<f64, InvariantError> {
    let j = p.jet(point, 2)?;
    Ok(chart.w_from_real(j.det_hessian, point))
}

/// V = log W.
pub fn complex_v(p: &SplitPotential, point: Vec2, chart: Chart) -> Result<f64, InvariantError> {
    Ok(complex_w(p, point, chart)?.ln())
}

/// Psi = |grad V|^2 in the metric of the potential.
pub fn psi(p: &SplitPotential, point: Vec2, chart: Chart) -> Result<f64, InvariantError> {
    let j = p.jet(point, 3)?;
    Ok(psi_from_jet(&j, chart))
}

/// P = exp(kappa W^alpha) sqrt(W) Psi.
pub fn p_quantity(
    p: &SplitPotential,
    point: Vec2,
    chart: Chart,
    kappa: f64,
    alpha: f64,
) -> Result<f64, InvariantError> {
    let j = p.jet(point, 3)?;
    let w = chart.w_from_real(j.det_hessian, point);
    Ok((kappa * w.powf(alpha)).exp() * w.sqrt() * psi_from_jet(&j, chart))
}

/// T = sum f^{i ibar} against a reference metric, given as the real Hessian
/// of the reference potential; None means the flat reference (identity).
/// Chart factors cancel: T = tr(B^{-1} B_ref).
pub fn trace_t(
    p: &SplitPotential,
    point: Vec2,
    reference: Option<&Mat2>,
) -> Result<f64, InvariantError> {
    let j = p.jet(point, 2)?;
    let r = reference.copied().unwrap_or(Mat2::IDENTITY);
    Ok(j.inv_hessian.mul_mat(&r).trace())
}

/// Q = exp(N1 (|z|^2 - A)) sqrt(W) T with the flat reference for T.
pub fn q_quantity(
    p: &SplitPotential,
    point: Vec2,
    chart: Chart,
    n1: f64,
    a: f64,
) -> Result<f64, InvariantError> {
    let j = p.jet(point, 2)?;
    let w = chart.w_from_real(j.det_hessian, point);
    let t = j.inv_hessian.trace();
    Ok((n1 * (chart.z_norm_sq(point) - a)).exp() * w.sqrt() * t)
}

/// The Ricci norm K = |Ric| + |grad Ric|^{2/3} + |grad^2 Ric|^{1/2} and its
/// three summands as they enter the total. `noise` is the disagreement of
/// the total between nested finite-difference steps h and 2h.
#[derive(Debug, Clone, Copy)]
pub struct RicciNorm {
    pub total: f64,
    pub ric: f64,
    pub grad_ric: f64,
    pub grad2_ric: f64,
    pub noise: f64,
}

/// K for the torus-invariant Kahler metric of the potential.
///
/// Computed in the torus-chart real reduction, where every chart constant
/// cancels against the metric contractions: with B the real Hessian and
/// L = log det B,
///   |Ric|^2        = tr(B^{-1} HessL B^{-1} HessL),
///   C_kij          = d_k L_ij - B^{ml} B_ilk L_mj   (holomorphic derivative),
///   |grad Ric|^2   = B^{kk'} B^{ii'} B^{jj'} C_kij C_k'i'j',
///   D_lkij         = d_l C_kij - Gamma-corrections on k and i,
///   |grad^2 Ric|^2 = full B^{-1} contraction of D with itself.
/// Norms contract the holomorphic-derivative components; this convention is
/// scale-equivalent to any other and is the one frozen here. HessL comes
/// from order-4 jets; the k and l derivatives are nested central
/// differences, with an h-vs-2h noise estimate that raises
/// InsufficientResolution when it exceeds 10% of the value.
pub fn ricci_norm_k(p: &SplitPotential, point: Vec2) -> Result<RicciNorm, InvariantError> {
    let h = fd_step(p, point);
    let fine = ricci_norm_at(p, point, h)?;
    let coarse = ricci_norm_at(p, point, 2.0 * h)?;
    let noise = (fine.0 - coarse.0).abs();
    if noise > 0.1 * fine.0 + 1e-9 {
        return Err(InvariantError::InsufficientResolution { value: fine.0, noise });
    }
    // Each summand has an even error expansion in h, so the h/2h pair that
    // feeds the noise estimate also buys one Richardson order.
    let ric = ((4.0 * fine.1 - coarse.1) / 3.0).max(0.0);
    let grad_ric = ((4.0 * fine.2 - coarse.2) / 3.0).max(0.0);
    let grad2_ric = ((4.0 * fine.3 - coarse.3) / 3.0).max(0.0);
    Ok(RicciNorm { total: ric + grad_ric + grad2_ric, ric, grad_ric, grad2_ric, noise })
}

fn fd_step(p: &SplitPotential, point: Vec2) -> f64 {
    let scale = 1.0 + point.x.abs().max(point.y.abs());
    let mut h = 1e-3 * scale;
    if let Some(psi) = &p.psi {
        // Steps below the grid spacing only re-read one interpolation cell,
        // which is smooth however wrong it is; probe across cells so the
        // h-vs-2h estimate sees genuine grid noise.
        h = h.max(psi.grid.h);
    }
    let c = p.domain.clearance(point);
    if c.is_finite() {
        // The nested stencil at step 2h reaches 4h out; keep it interior.
        h = h.min(c / 16.0);
    }
    h.max(1e-8)
}

fn axis(i: usize) -> Vec2 {
    if i == 0 {
        Vec2::new(1.0, 0.0)
    } else {
        Vec2::new(0.0, 1.0)
    }
}

type Ten3 = [[[f64; 2]; 2]; 2];
type Ten4 = [[[[f64; 2]; 2]; 2]; 2];

fn ricci_norm_at(
    p: &SplitPotential,
    point: Vec2,
    h: f64,
) -> Result<(f64, f64, f64, f64), InvariantError> {
    let lh = |q: Vec2| -> Result<Mat2, InvariantError> {
        let j = p.jet(q, 4)?;
        Ok(log_det_hessian(&j))
    };
    let j0 = p.jet(point, 4)?;
    let binv = j0.inv_hessian;
    let l0 = lh(point)?;

    let m = binv.mul_mat(&l0);
    let ric2 = m.mul_mat(&m).trace();
    let ric = ric2.max(0.0).sqrt();

    let ctilde = |q: Vec2| -> Result<Ten3, InvariantError> {
        let jq = p.jet(q, 3)?;
        let lq = lh(q)?;
        let mut l3 = [Mat2::new(0.0, 0.0, 0.0, 0.0); 2];
        for (k, slot) in l3.iter_mut().enumerate() {
            let e = axis(k);
            let lp = lh(q + e * h)?;
            let lm = lh(q - e * h)?;
            *slot = lp.sub_mat(&lm).scale(1.0 / (2.0 * h));
        }
        let mut c = [[[0.0; 2]; 2]; 2];
        for (k, ck) in c.iter_mut().enumerate() {
            for (i, cki) in ck.iter_mut().enumerate() {
                for (jj, v) in cki.iter_mut().enumerate() {
                    let mut corr = 0.0;
                    for mm in 0..2 {
                        for l in 0..2 {
                            corr += jq.inv_hessian.get(mm, l)
                                * jq.third.get(i, l, k)
                                * lq.get(mm, jj);
                        }
                    }
                    *v = l3[k].get(i, jj) - corr;
                }
            }
        }
        Ok(c)
    };

    let c0 = ctilde(point)?;
    let grad_ric2 = contract3(&binv, &c0);
    let grad_ric_norm = grad_ric2.max(0.0).sqrt();

    let mut dc = [[[[0.0; 2]; 2]; 2]; 2];
    for l in 0..2 {
        let e = axis(l);
        let cp = ctilde(point + e * h)?;
        let cm = ctilde(point - e * h)?;
        for k in 0..2 {
            for i in 0..2 {
                for jj in 0..2 {
                    dc[l][k][i][jj] = (cp[k][i][jj] - cm[k][i][jj]) / (2.0 * h);
                }
            }
        }
    }
    let mut d: Ten4 = [[[[0.0; 2]; 2]; 2]; 2];
    for (l, dl) in d.iter_mut().enumerate() {
        for (k, dlk) in dl.iter_mut().enumerate() {
            for (i, dlki) in dlk.iter_mut().enumerate() {
                for (jj, v) in dlki.iter_mut().enumerate() {
                    let mut corr = 0.0;
                    for mm in 0..2 {
                        for pp in 0..2 {
                            corr += binv.get(mm, pp)
                                * (j0.third.get(pp, k, l) * c0[mm][i][jj]
                                    + j0.third.get(pp, i, l) * c0[k][mm][jj]);
                        }
                    }
                    *v = dc[l][k][i][jj] - corr;
                }
            }
        }
    }
    let grad2_ric2 = contract4(&binv, &d);
    let grad2_ric_norm = grad2_ric2.max(0.0).sqrt();

    let s1 = ric;
    let s2 = grad_ric_norm.powf(2.0 / 3.0);
    let s3 = grad2_ric_norm.sqrt();
    Ok((s1 + s2 + s3, s1, s2, s3))
}

fn contract3(binv: &Mat2, c: &Ten3) -> f64 {
    let mut acc = 0.0;
    for k in 0..2 {
        for i in 0..2 {
            for j in 0..2 {
                for k2 in 0..2 {
                    for i2 in 0..2 {
                        for j2 in 0..2 {
                            acc += binv.get(k, k2)
                                * binv.get(i, i2)
                                * binv.get(j, j2)
                                * c[k][i][j]
                                * c[k2][i2][j2];
                        }
                    }
                }
            }
        }
    }
    acc
}

fn contract4(binv: &Mat2, d: &Ten4) -> f64 {
    let mut acc = 0.0;
    for l in 0..2 {
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    for l2 in 0..2 {
                        for k2 in 0..2 {
                            for i2 in 0..2 {
                                for j2 in 0..2 {
                                    acc += binv.get(l, l2)
                                        * binv.get(k, k2)
                                        * binv.get(i, i2)
                                        * binv.get(j, j2)
                                        * d[l][k][i][j]
                                        * d[l2][k2][i2][j2];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    acc
}

/// Parameters for the composite quantities in a report. `a` plays the role
/// of the constant A in Q (A = N2^2 + 1 for domain radius bound N2; the
/// default corresponds to N2 = 1). `reference` is the real Hessian of the
/// reference potential behind T.
#[derive(Debug, Clone, Copy)]
pub struct ReportParams {
    pub kappa: f64,
    pub alpha: f64,
    pub n1: f64,
    pub a: f64,
    pub reference: Mat2,
}

impl Default for ReportParams {
    fn default() -> Self {
        ReportParams {
            kappa: DEFAULT_KAPPA,
            alpha: DEFAULT_ALPHA,
            n1: DEFAULT_N1,
            a: 2.0,
            reference: Mat2::IDENTITY,
        }
    }
}

/// Everything pointwise in one place. Phi and Psi are clamped to zero below
/// `DEGENERATE_EPS`; theta is the sum of the clamped Phi and J so that
/// theta = Phi + J holds exactly inside any report.
#[derive(Debug, Clone)]
pub struct InvariantReport {
    pub point: Vec2,
    pub chart: Chart,
    pub rho: f64,
    pub phi: f64,
    pub pick_j: f64,
    pub theta: f64,
    pub w: f64,
    pub v: f64,
    pub psi: f64,
    pub p: f64,
    pub t: f64,
    pub q: f64,
    pub ricci: RicciNorm,
}

fn clamp_degenerate(v: f64) -> f64 {
    if v < DEGENERATE_EPS {
        0.0
    } else {
        v
    }
}

pub fn invariant_report(
    pot: &SplitPotential,
    point: Vec2,
    chart: Chart,
    params: &ReportParams,
) -> Result<InvariantReport, InvariantError> {
    let j = pot.jet(point, 3)?;
    let rho_v = j.det_hessian.powf(-0.25);
    let phi_v = clamp_degenerate(phi_from_jet(&j));
    let j_v = pick_j_from_jet(&j);
    let w_v = chart.w_from_real(j.det_hessian, point);
    let psi_v = clamp_degenerate(psi_from_jet(&j, chart));
    let t_v = j.inv_hessian.mul_mat(&params.reference).trace();
    let ricci = ricci_norm_k(pot, point)?;
    Ok(InvariantReport {
        point,
        chart,
        rho: rho_v,
        phi: phi_v,
        pick_j: j_v,
        theta: phi_v + j_v,
        w: w_v,
        v: w_v.ln(),
        psi: psi_v,
        p: (params.kappa * w_v.powf(params.alpha)).exp() * w_v.sqrt() * psi_v,
        t: t_v,
        q: (params.n1 * (chart.z_norm_sq(point) - params.a)).exp() * w_v.sqrt() * t_v,
        ricci,
    })
}

/// CSV map of the report over the given points.
pub fn invariant_map_csv(
    pot: &SplitPotential,
    points: &[Vec2],
    chart: Chart,
    params: &ReportParams,
) -> Result<String, InvariantError> {
    let mut out = String::from("xi1,xi2,rho,phi,J,theta,W,psi,P,T,Q,K\n");
    for &pt in points {
        let r = invariant_report(pot, pt, chart, params)?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            fmt_f64(pt.x),
            fmt_f64(pt.y),
            fmt_f64(r.rho),
            fmt_f64(r.phi),
            fmt_f64(r.pick_j),
            fmt_f64(r.theta),
            fmt_f64(r.w),
            fmt_f64(r.psi),
            fmt_f64(r.p),
            fmt_f64(r.t),
            fmt_f64(r.q),
            fmt_f64(r.ricci.total),
        ));
    }
    Ok(out)
}
