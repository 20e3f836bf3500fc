//! Independent dense oracles shared by the integration suites.
#![allow(dead_code)]

use std::sync::Arc;

use faer::{c64, Mat};
use geoflow::fem::{self, CoefficientField, DiscreteSpaces, EllipticOperator, GradDivPair, MassKind};
use geoflow::mesh::{RoughMetric, TriangleMesh};
use geoflow::sparse::Csr;
use nalgebra::{Complex, DMatrix, DVector};

pub type Spaces = (Arc<DiscreteSpaces>, Arc<GradDivPair>);

pub fn spaces(mesh: &TriangleMesh, kind: MassKind) -> Spaces {
    let (s, p) = fem::assemble(mesh, &RoughMetric::induced(mesh), kind).unwrap();
    (Arc::new(s), Arc::new(p))
}

pub fn operator(sp: &Spaces, coeff: CoefficientField) -> EllipticOperator {
    fem::make_operator(sp.0.clone(), sp.1.clone(), coeff, None).unwrap()
}

pub fn dense(a: &Csr) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows(), a.ncols());
    for (i, j, v) in a.triplets() {
        m[(i, j)] += v;
    }
    m
}

pub fn to_nalgebra(a: &Mat<c64>) -> DMatrix<Complex<f64>> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

pub fn from_nalgebra(a: &DMatrix<Complex<f64>>) -> Mat<c64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

pub fn max_abs(a: &Mat<c64>) -> f64 {
    let mut m = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            m = m.max(a[(i, j)].norm());
        }
    }
    m
}

/// `max |a − b| / max |b|`.
pub fn rel_diff(a: &Mat<c64>, b: &Mat<c64>) -> f64 {
    max_abs(&(a - b)) / max_abs(b).max(f64::MIN_POSITIVE)
}

pub fn rel_diff_vec(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n.max(f64::MIN_POSITIVE)
}

/// Mean-zero solution of `K u = F` through the spectral pseudoinverse of the symmetric
/// `K`, then the weighted mean removed.
pub fn pseudoinverse_solve(k: &Csr, load: &[f64], weights: &[f64]) -> Vec<f64> {
    let kd = dense(k);
    let kd = (&kd + kd.transpose()) * 0.5;
    let eig = kd.symmetric_eigen();
    let cutoff = 1e-10 * eig.eigenvalues.amax();
    let f = DVector::from_column_slice(load);
    let mut u = DVector::zeros(load.len());
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        if l.abs() > cutoff {
            let v = eig.eigenvectors.column(j);
            u += v * (v.dot(&f) / l);
        }
    }
    let mean = u.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>() / weights.iter().sum::<f64>();
    u.iter().map(|a| a - mean).collect()
}

/// Principal square root by complex Schur form and the upper-triangular recurrence
/// `U_ii² = T_ii`, `(U_ii + U_jj) U_ij = T_ij − Σ U_ik U_kj`.
pub fn schur_sqrt(a: &Mat<c64>) -> Mat<c64> {
    let n = a.nrows();
    let (q, t) = to_nalgebra(a).schur().unpack();
    let amax = (0..n).map(|i| t[(i, i)].norm()).fold(0.0, f64::max);
    let mut u = DMatrix::<Complex<f64>>::zeros(n, n);
    for i in 0..n {
        // a rounded null eigenvalue ε would otherwise contribute √ε
        let d = t[(i, i)];
        u[(i, i)] = if d.norm() <= 1e-12 * amax { Complex::new(0.0, 0.0) } else { d.sqrt() };
    }
    for d in 1..n {
        for i in 0..n - d {
            let j = i + d;
            let mut s = t[(i, j)];
            for k in i + 1..j {
                s -= u[(i, k)] * u[(k, j)];
            }
            let den = u[(i, i)] + u[(j, j)];
            u[(i, j)] = if den.norm() > 0.0 { s / den } else { Complex::new(0.0, 0.0) };
        }
    }
    from_nalgebra(&(&q * u * q.adjoint()))
}

/// `f(A) = V f(D) V⁻¹` from a dense eigendecomposition, with a check that the
/// eigenbasis reproduces `A`.
pub fn eigen_function(a: &Mat<c64>, f: impl Fn(c64) -> c64) -> Mat<c64> {
    use faer::prelude::Solve;
    let n = a.nrows();
    let evd = a.eigen().unwrap();
    let v = evd.U().to_owned();
    let d: Vec<c64> = (0..n).map(|i| evd.S()[i]).collect();
    let vd = Mat::from_fn(n, n, |i, j| v[(i, j)] * d[j]);
    let recon = (&vd - a * &v).norm_l2() / (a.norm_l2() * v.norm_l2()).max(f64::MIN_POSITIVE);
    assert!(recon < 1e-10, "eigenbasis residual {recon}");
    let vf = Mat::from_fn(n, n, |i, j| v[(i, j)] * f(d[j]));
    // f(A) = V F V⁻¹, computed as (V⁻ᵀ (V F)ᵀ)ᵀ
    let lu = v.transpose().partial_piv_lu();
    lu.solve(vf.transpose()).transpose().to_owned()
}

/// `A (I + A²)⁻¹`, the rational Ψ-function in closed form.
pub fn rational_psi(a: &Mat<c64>) -> Mat<c64> {
    let na = to_nalgebra(a);
    let n = a.nrows();
    let den = DMatrix::<Complex<f64>>::identity(n, n) + &na * &na;
    let inv = den.lu().try_inverse().unwrap();
    from_nalgebra(&(na * inv))
}

/// Dense generalized eigenvalues of `(K, M)`, ascending, through `M^{-1/2} K M^{-1/2}`.
pub fn generalized_eigenvalues(k: &Csr, m: &Csr) -> Vec<f64> {
    let (kd, md) = (dense(k), dense(m));
    let chol = md.cholesky().unwrap();
    let l = chol.l();
    let linv = l.clone().try_inverse().unwrap();
    let s = &linv * kd * linv.transpose();
    let s = (&s + s.transpose()) * 0.5;
    let mut v: Vec<f64> = s.symmetric_eigen().eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}
