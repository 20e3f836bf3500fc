//! Small fixed-size linear algebra used per triangle and per vertex.

use num_complex::Complex64;

pub type Vec3 = [f64; 3];

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Symmetric 2x2 tensor `[[xx, xy], [xy, yy]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub const IDENTITY: Sym2 = Sym2 {
        xx: 1.0,
        xy: 0.0,
        yy: 1.0,
    };

    pub fn new(xx: f64, xy: f64, yy: f64) -> Self {
        Self { xx, xy, yy }
    }

    pub fn scaled_identity(s: f64) -> Self {
        Self::new(s, 0.0, s)
    }

    /// `R diag(l0, l1) R^T` with `R` the rotation by `angle`.
    pub fn from_eigen(l0: f64, l1: f64, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(
            c * c * l0 + s * s * l1,
            c * s * (l0 - l1),
            s * s * l0 + c * c * l1,
        )
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let half_tr = 0.5 * self.trace();
        let diff = 0.5 * (self.xx - self.yy);
        let r = (diff * diff + self.xy * self.xy).sqrt();
        (half_tr - r, half_tr + r)
    }

    /// Rotation angle of an orthonormal eigenbasis.
    fn eigen_angle(&self) -> f64 {
        0.5 * (2.0 * self.xy).atan2(self.xx - self.yy)
    }

    pub fn inverse(&self) -> Self {
        let d = self.det();
        Self::new(self.yy / d, -self.xy / d, self.xx / d)
    }

    /// Applies a scalar function to the eigenvalues.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> Self {
        let angle = self.eigen_angle();
        let (s, c) = angle.sin_cos();
        // eigenvalue along (c, s)
        let l_major = c * c * self.xx + 2.0 * c * s * self.xy + s * s * self.yy;
        let l_minor = s * s * self.xx - 2.0 * c * s * self.xy + c * c * self.yy;
        Self::from_eigen(f(l_major), f(l_minor), angle)
    }

    pub fn sqrt(&self) -> Self {
        self.map_spectrum(f64::sqrt)
    }

    pub fn inv_sqrt(&self) -> Self {
        self.map_spectrum(|l| 1.0 / l.sqrt())
    }

    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.xx * v[0] + self.xy * v[1],
            self.xy * v[0] + self.yy * v[1],
        ]
    }

    pub fn quad(&self, u: [f64; 2], v: [f64; 2]) -> f64 {
        let w = self.apply(v);
        u[0] * w[0] + u[1] * w[1]
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.xx * s, self.xy * s, self.yy * s)
    }

    pub fn add(&self, o: &Sym2) -> Self {
        Self::new(self.xx + o.xx, self.xy + o.xy, self.yy + o.yy)
    }

    pub fn to_mat(self) -> Mat2 {
        Mat2([[self.xx, self.xy], [self.xy, self.yy]])
    }

    /// `P^T S P` for a general 2x2 `P`.
    pub fn congruence(&self, p: &Mat2) -> Sym2 {
        let m = p.transpose().mul(&self.to_mat()).mul(p);
        Sym2::new(m.0[0][0], 0.5 * (m.0[0][1] + m.0[1][0]), m.0[1][1])
    }

    /// Largest absolute entry difference, used for tolerance checks.
    pub fn max_abs_diff(&self, o: &Sym2) -> f64 {
        (self.xx - o.xx)
            .abs()
            .max((self.xy - o.xy).abs())
            .max((self.yy - o.yy).abs())
    }

    pub fn frobenius(&self) -> f64 {
        (self.xx * self.xx + 2.0 * self.xy * self.xy + self.yy * self.yy).sqrt()
    }
}

/// General real 2x2 matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub fn mul(&self, o: &Mat2) -> Mat2 {
        let a = &self.0;
        let b = &o.0;
        Mat2([
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ])
    }

    pub fn transpose(&self) -> Mat2 {
        let a = &self.0;
        Mat2([[a[0][0], a[1][0]], [a[0][1], a[1][1]]])
    }

    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        let a = &self.0;
        [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
    }

    pub fn det(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn inverse(&self) -> Mat2 {
        let d = self.det();
        let a = &self.0;
        Mat2([[a[1][1] / d, -a[0][1] / d], [-a[1][0] / d, a[0][0] / d]])
    }
}

/// Complex 2x2 matrix acting on covectors in a metric-orthonormal frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CMat2(pub [[Complex64; 2]; 2]);

impl CMat2 {
    pub fn from_real(s: &Sym2) -> Self {
        let r = |x: f64| Complex64::new(x, 0.0);
        CMat2([[r(s.xx), r(s.xy)], [r(s.xy), r(s.yy)]])
    }

    pub fn scale(&self, s: Complex64) -> Self {
        let a = &self.0;
        CMat2([[a[0][0] * s, a[0][1] * s], [a[1][0] * s, a[1][1] * s]])
    }

    pub fn add(&self, o: &CMat2) -> Self {
        let a = &self.0;
        let b = &o.0;
        CMat2([
            [a[0][0] + b[0][0], a[0][1] + b[0][1]],
            [a[1][0] + b[1][0], a[1][1] + b[1][1]],
        ])
    }

    pub fn adjoint(&self) -> Self {
        let a = &self.0;
        CMat2([
            [a[0][0].conj(), a[1][0].conj()],
            [a[0][1].conj(), a[1][1].conj()],
        ])
    }

    /// Hermitian part `(B + B*)/2`; its smallest eigenvalue bounds `Re <B xi, xi>` from below.
    pub fn hermitian_part_min_eig(&self) -> f64 {
        let a = &self.0;
        let h00 = a[0][0].re;
        let h11 = a[1][1].re;
        let h01 = 0.5 * (a[0][1] + a[1][0].conj());
        let half_tr = 0.5 * (h00 + h11);
        let diff = 0.5 * (h00 - h11);
        half_tr - (diff * diff + h01.norm_sqr()).sqrt()
    }

    /// Norm of the skew-Hermitian part `(B - B*)/(2i)`.
    pub fn skew_part_norm(&self) -> f64 {
        let a = &self.0;
        let s00 = a[0][0].im;
        let s11 = a[1][1].im;
        let s01 = (a[0][1] - a[1][0].conj()) / Complex64::new(0.0, 2.0);
        let half_tr = 0.5 * (s00 + s11);
        let diff = 0.5 * (s00 - s11);
        let r = (diff * diff + s01.norm_sqr()).sqrt();
        (half_tr - r).abs().max((half_tr + r).abs())
    }

    /// Spectral (operator) norm.
    pub fn op_norm(&self) -> f64 {
        let a = &self.0;
        // B^* B is Hermitian 2x2
        let g00 = a[0][0].norm_sqr() + a[1][0].norm_sqr();
        let g11 = a[0][1].norm_sqr() + a[1][1].norm_sqr();
        let g01 = a[0][0].conj() * a[0][1] + a[1][0].conj() * a[1][1];
        let half_tr = 0.5 * (g00 + g11);
        let diff = 0.5 * (g00 - g11);
        (half_tr + (diff * diff + g01.norm_sqr()).sqrt()).sqrt()
    }

    pub fn is_real_symmetric(&self, tol: f64) -> bool {
        let a = &self.0;
        a.iter().flatten().all(|z| z.im.abs() <= tol) && (a[0][1].re - a[1][0].re).abs() <= tol
    }

    pub fn real_part_sym(&self) -> Sym2 {
        let a = &self.0;
        Sym2::new(a[0][0].re, 0.5 * (a[0][1].re + a[1][0].re), a[1][1].re)
    }

    pub fn max_abs_diff(&self, o: &CMat2) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(o.0.iter().flatten())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sym2_spectral_functions() {
        let s = Sym2::from_eigen(4.0, 9.0, 0.3);
        let (l0, l1) = s.eigenvalues();
        assert!((l0 - 4.0).abs() < 1e-12 && (l1 - 9.0).abs() < 1e-12);
        let r = s.sqrt();
        let back = r.to_mat().mul(&r.to_mat());
        assert!((back.0[0][0] - s.xx).abs() < 1e-12);
        assert!((back.0[0][1] - s.xy).abs() < 1e-12);
        let inv = s.inverse().to_mat().mul(&s.to_mat());
        assert!((inv.0[0][0] - 1.0).abs() < 1e-12 && inv.0[0][1].abs() < 1e-12);
        let isq = s.inv_sqrt();
        let id = s.congruence(&isq.to_mat());
        assert!(id.max_abs_diff(&Sym2::IDENTITY) < 1e-12);
    }

    #[test]
    fn cmat2_bounds() {
        let i = Complex64::new(0.0, 1.0);
        let b = CMat2([
            [Complex64::new(2.0, 0.0), i * 0.5],
            [i * 0.5, Complex64::new(1.0, 0.0)],
        ]);
        assert!((b.hermitian_part_min_eig() - 1.0).abs() < 1e-14);
        assert!((b.skew_part_norm() - 0.5).abs() < 1e-14);
        let id = CMat2::from_real(&Sym2::IDENTITY).scale(Complex64::new(3.0, 0.0));
        assert!((id.op_norm() - 3.0).abs() < 1e-14);
    }
}
