//! Small fixed-size linear algebra for the 2-D plane: vectors, symmetric and
//! general 2x2 matrices, and the symmetric 3- and 4-tensors that store third
//! and fourth derivatives of potentials.

use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Pivot threshold below which a Hessian is treated as not positive definite.
pub const CHOLESKY_PIVOT_MIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// Scalar cross product (signed area of the parallelogram).
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn comp(self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            _ => panic!("Vec2 index out of range: {i}"),
        }
    }

    pub fn with_comp(mut self, i: usize, v: f64) -> Self {
        match i {
            0 => self.x = v,
            1 => self.y = v,
            _ => panic!("Vec2 index out of range: {i}"),
        }
        self
    }

    pub fn unit_angle(theta: f64) -> Vec2 {
        Vec2::new(theta.cos(), theta.sin())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Mul<Vec2> for f64 {
    type Output = Vec2;
    fn mul(self, v: Vec2) -> Vec2 {
        v * self
    }
}

impl Div<f64> for Vec2 {
    type Output = Vec2;
    fn div(self, s: f64) -> Vec2 {
        Vec2::new(self.x / s, self.y / s)
    }
}

/// General 2x2 matrix in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2 {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 1.0,
    };

    pub const ZERO: Mat2 = Mat2 {
        a: 0.0,
        b: 0.0,
        c: 0.0,
        d: 0.0,
    };

    pub fn new(a: f64, b: f64, c: f64, d: f64) -> Self {
        Mat2 { a, b, c, d }
    }

    pub fn from_rows(r0: Vec2, r1: Vec2) -> Self {
        Mat2::new(r0.x, r0.y, r1.x, r1.y)
    }

    pub fn diag(a: f64, d: f64) -> Self {
        Mat2::new(a, 0.0, 0.0, d)
    }

    pub fn sym(a: f64, b: f64, d: f64) -> Self {
        Mat2::new(a, b, b, d)
    }

    pub fn det(&self) -> f64 {
        self.a * self.d - self.b * self.c
    }

    pub fn trace(&self) -> f64 {
        self.a + self.d
    }

    pub fn transpose(&self) -> Mat2 {
        Mat2::new(self.a, self.c, self.b, self.d)
    }

    pub fn inverse(&self) -> Option<Mat2> {
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        Some(Mat2::new(self.d / det, -self.b / det, -self.c / det, self.a / det))
    }

    /// Cofactor matrix: `m * cofactor(m)^T = det(m) * I`.
    pub fn cofactor(&self) -> Mat2 {
        Mat2::new(self.d, -self.c, -self.b, self.a)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match (i, j) {
            (0, 0) => self.a,
            (0, 1) => self.b,
            (1, 0) => self.c,
            (1, 1) => self.d,
            _ => panic!("Mat2 index out of range: ({i},{j})"),
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        match (i, j) {
            (0, 0) => self.a = v,
            (0, 1) => self.b = v,
            (1, 0) => self.c = v,
            (1, 1) => self.d = v,
            _ => panic!("Mat2 index out of range: ({i},{j})"),
        }
    }

    pub fn mul_vec(&self, v: Vec2) -> Vec2 {
        Vec2::new(self.a * v.x + self.b * v.y, self.c * v.x + self.d * v.y)
    }

    pub fn mul_mat(&self, o: &Mat2) -> Mat2 {
        Mat2::new(
            self.a * o.a + self.b * o.c,
            self.a * o.b + self.b * o.d,
            self.c * o.a + self.d * o.c,
            self.c * o.b + self.d * o.d,
        )
    }

    /// Quadratic form `v^T M w`.
    pub fn form(&self, v: Vec2, w: Vec2) -> f64 {
        v.dot(self.mul_vec(w))
    }

    /// Positive-definiteness via Cholesky with pivot threshold
    /// [`CHOLESKY_PIVOT_MIN`]. Only meaningful for symmetric matrices.
    pub fn is_positive_definite(&self) -> bool {
        if self.a <= CHOLESKY_PIVOT_MIN {
            return false;
        }
        let l11 = self.a.sqrt();
        let l21 = self.b / l11;
        let pivot2 = self.d - l21 * l21;
        pivot2 > CHOLESKY_PIVOT_MIN
    }

    /// Eigen-decomposition of a symmetric matrix; returns (eigenvalues
    /// ascending, orthonormal eigenvectors as columns).
    pub fn sym_eigen(&self) -> ([f64; 2], Mat2) {
        let half_tr = 0.5 * (self.a + self.d);
        let half_diff = 0.5 * (self.a - self.d);
        let disc = (half_diff * half_diff + self.b * self.b).sqrt();
        let l0 = half_tr - disc;
        let l1 = half_tr + disc;
        // Eigenvector for l1: rotate so the larger off-diagonal branch is stable.
        let (c, s) = if self.b.abs() > 1e-300 {
            let t = (l1 - self.a) / self.b;
            let n = (1.0 + t * t).sqrt();
            (1.0 / n, t / n)
        } else if self.a <= self.d {
            (0.0, 1.0)
        } else {
            (1.0, 0.0)
        };
        // Columns: eigenvector of l0, eigenvector of l1.
        ([l0, l1], Mat2::new(-s, c, c, s))
    }

    /// Symmetric positive-definite square root.
    pub fn sym_sqrt(&self) -> Option<Mat2> {
        let ([l0, l1], q) = self.sym_eigen();
        if l0 <= 0.0 {
            return None;
        }
        let d = Mat2::diag(l0.sqrt(), l1.sqrt());
        Some(q.mul_mat(&d).mul_mat(&q.transpose()))
    }

    /// Singular values ascending.
    pub fn singular_values(&self) -> [f64; 2] {
        let m = self.transpose().mul_mat(self);
        let ([l0, l1], _) = Mat2::sym(m.a, 0.5 * (m.b + m.c), m.d).sym_eigen();
        [l0.max(0.0).sqrt(), l1.max(0.0).sqrt()]
    }

    pub fn scale(&self, s: f64) -> Mat2 {
        Mat2::new(self.a * s, self.b * s, self.c * s, self.d * s)
    }

    pub fn add_mat(&self, o: &Mat2) -> Mat2 {
        Mat2::new(self.a + o.a, self.b + o.b, self.c + o.c, self.d + o.d)
    }

    pub fn sub_mat(&self, o: &Mat2) -> Mat2 {
        Mat2::new(self.a - o.a, self.b - o.b, self.c - o.c, self.d - o.d)
    }

    pub fn max_abs(&self) -> f64 {
        self.a.abs().max(self.b.abs()).max(self.c.abs()).max(self.d.abs())
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.c.is_finite() && self.d.is_finite()
    }
}

/// Symmetric rank-3 tensor on the plane, stored as the four distinct
/// components `[t111, t112, t122, t222]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Sym3(pub [f64; 4]);

impl Sym3 {
    pub const ZERO: Sym3 = Sym3([0.0; 4]);

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.0[i + j + k]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.0[i + j + k] = v;
    }

    pub fn scale(&self, s: f64) -> Sym3 {
        Sym3([self.0[0] * s, self.0[1] * s, self.0[2] * s, self.0[3] * s])
    }

    pub fn add(&self, o: &Sym3) -> Sym3 {
        let mut r = [0.0; 4];
        for (i, v) in r.iter_mut().enumerate() {
            *v = self.0[i] + o.0[i];
        }
        Sym3(r)
    }

    /// Pull-back through a linear map: `out_abc = sum t_ijk m_ia m_jb m_kc`.
    pub fn transform(&self, m: &Mat2) -> Sym3 {
        let mut out = Sym3::ZERO;
        for a in 0..2 {
            for b in a..2 {
                for c in b..2 {
                    let mut acc = 0.0;
                    for i in 0..2 {
                        for j in 0..2 {
                            for k in 0..2 {
                                acc += self.get(i, j, k) * m.get(i, a) * m.get(j, b) * m.get(k, c);
                            }
                        }
                    }
                    out.set(a, b, c, acc);
                }
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Symmetric rank-4 tensor on the plane, stored as
/// `[t1111, t1112, t1122, t1222, t2222]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Sym4(pub [f64; 5]);

impl Sym4 {
    pub const ZERO: Sym4 = Sym4([0.0; 5]);

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.0[i + j + k + l]
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        self.0[i + j + k + l] = v;
    }

    pub fn scale(&self, s: f64) -> Sym4 {
        let mut r = self.0;
        for v in &mut r {
            *v *= s;
        }
        Sym4(r)
    }

    pub fn add(&self, o: &Sym4) -> Sym4 {
        let mut r = [0.0; 5];
        for (i, v) in r.iter_mut().enumerate() {
            *v = self.0[i] + o.0[i];
        }
        Sym4(r)
    }

    /// Pull-back through a linear map over all four slots.
    pub fn transform(&self, m: &Mat2) -> Sym4 {
        let mut out = Sym4::ZERO;
        for a in 0..2 {
            for b in a..2 {
                for c in b..2 {
                    for d in c..2 {
                        let mut acc = 0.0;
                        for i in 0..2 {
                            for j in 0..2 {
                                for k in 0..2 {
                                    for l in 0..2 {
                                        acc += self.get(i, j, k, l)
                                            * m.get(i, a)
                                            * m.get(j, b)
                                            * m.get(k, c)
                                            * m.get(l, d);
                                    }
                                }
                            }
                        }
                        out.set(a, b, c, d, acc);
                    }
                }
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_roundtrip() {
        let m = Mat2::new(3.0, 1.0, -2.0, 4.0);
        let inv = m.inverse().unwrap();
        let id = m.mul_mat(&inv);
        assert!((id.a - 1.0).abs() < 1e-14);
        assert!(id.b.abs() < 1e-14);
        assert!(id.c.abs() < 1e-14);
        assert!((id.d - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sym_eigen_reconstructs() {
        let m = Mat2::sym(4.0, 1.5, 2.0);
        let ([l0, l1], q) = m.sym_eigen();
        let rec = q.mul_mat(&Mat2::diag(l0, l1)).mul_mat(&q.transpose());
        assert!(rec.sub_mat(&m).max_abs() < 1e-12);
        // Orthonormality.
        let qtq = q.transpose().mul_mat(&q);
        assert!(qtq.sub_mat(&Mat2::IDENTITY).max_abs() < 1e-12);
    }

    #[test]
    fn sym_sqrt_squares_back() {
        let m = Mat2::sym(5.0, -1.0, 3.0);
        let r = m.sym_sqrt().unwrap();
        assert!(r.mul_mat(&r).sub_mat(&m).max_abs() < 1e-12);
    }

    #[test]
    fn cholesky_pd_detects_indefinite() {
        assert!(Mat2::sym(2.0, 0.5, 1.0).is_positive_definite());
        assert!(!Mat2::sym(1.0, 2.0, 1.0).is_positive_definite());
        assert!(!Mat2::sym(-1.0, 0.0, 1.0).is_positive_definite());
        // Pivot right at the threshold counts as not PD.
        assert!(!Mat2::sym(1e-13, 0.0, 1.0).is_positive_definite());
    }

    #[test]
    fn singular_values_of_diag() {
        let sv = Mat2::diag(-3.0, 0.5).singular_values();
        assert!((sv[0] - 0.5).abs() < 1e-14);
        assert!((sv[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn sym3_transform_matches_direct_sum() {
        // Compare against an unsymmetrized brute-force contraction.
        let t = Sym3([1.0, -0.5, 2.0, 0.25]);
        let m = Mat2::new(1.2, 0.3, -0.4, 0.9);
        let out = t.transform(&m);
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    let mut acc = 0.0;
                    for i in 0..2 {
                        for j in 0..2 {
                            for k in 0..2 {
                                acc += t.get(i, j, k) * m.get(i, a) * m.get(j, b) * m.get(k, c);
                            }
                        }
                    }
                    assert!((out.get(a, b, c) - acc).abs() < 1e-13);
                }
            }
        }
    }
}
