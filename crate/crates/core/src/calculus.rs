//! Holomorphic functional calculus for finite-dimensional bisectorial operators.
//!
//! An operator is stored in coordinates that are orthonormal for its inner product
//! and reduced once to Hessenberg form `T̃ = Q H Q*`. Every resolvent on a contour is
//! then an `O(n²)` shifted Hessenberg solve, which keeps contour integrals with a
//! thousand nodes affordable at desk scale.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::io::Write;
use std::sync::{Arc, OnceLock};

use faer::linalg::triangular_solve::solve_lower_triangular_in_place;
use faer::{c64, Mat, Par, Side};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{self, CoefficientField, DiscreteSpaces, EllipticOperator, GradDivPair, SpectralDecomposition};
use crate::rng;
use crate::solver;
use crate::sparse::{Csr, SpdFactor};
use crate::tensor::CMat2;

/// Relative size below which the integrand is dropped when truncating a contour.
pub const TRUNCATION: f64 = 1e-16;
/// Relative change between successive trapezoid halvings accepted as converged.
pub const QUADRATURE_TOL: f64 = 1e-11;
/// Eigenvalues smaller than this fraction of the largest one count as zero.
pub const NULL_TOL: f64 = 1e-9;
/// Relative distance to an eigenvalue at which resolvents are refused.
pub const PROXIMITY_TOL: f64 = 1e-10;

const ZERO: c64 = c64 { re: 0.0, im: 0.0 };
const ONE: c64 = c64 { re: 1.0, im: 0.0 };
const I: c64 = c64 { re: 0.0, im: 1.0 };
const MAX_HALVINGS: usize = 7;
const NODE_CHUNK: usize = 32;

/// Unitary reduction `A = Q H Q*` with `H` upper Hessenberg.
#[derive(Debug, Clone)]
struct Hessenberg {
    q: Mat<c64>,
    h: Mat<c64>,
}

fn hessenberg(a: &Mat<c64>) -> Hessenberg {
    let n = a.nrows();
    let mut h = a.clone();
    let mut q = Mat::<c64>::identity(n, n);
    let mut v = vec![ZERO; n];
    let mut s = vec![ZERO; n];
    for k in 0..n.saturating_sub(2) {
        let col = h.col_as_slice(k);
        let norm = col[k + 1..].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let tail = col[k + 2..].iter().map(|z| z.norm_sqr()).sum::<f64>();
        if tail == 0.0 {
            continue;
        }
        let x0 = col[k + 1];
        let phase = if x0.norm() > 0.0 { x0 / x0.norm() } else { ONE };
        let alpha = -phase * norm;
        v.fill(ZERO);
        v[k + 1..].copy_from_slice(&col[k + 1..]);
        v[k + 1] -= alpha;
        let vn = v[k + 1..].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        for x in &mut v[k + 1..] {
            *x /= vn;
        }
        for j in k + 1..n {
            let c = h.col_as_slice_mut(j);
            let d: c64 = (k + 1..n).map(|i| v[i].conj() * c[i]).sum();
            for i in k + 1..n {
                c[i] -= 2.0 * v[i] * d;
            }
        }
        let c = h.col_as_slice_mut(k);
        c[k + 1] = alpha;
        c[k + 2..].fill(ZERO);
        reflect_right(&mut h, &v, k + 1, &mut s);
        reflect_right(&mut q, &v, k + 1, &mut s);
    }
    Hessenberg { q, h }
}

/// `A ← A (I − 2 v v*)` for `v` supported on `start..`.
fn reflect_right(a: &mut Mat<c64>, v: &[c64], start: usize, s: &mut [c64]) {
    let n = a.nrows();
    s.fill(ZERO);
    for (j, &vj) in v.iter().enumerate().skip(start) {
        let c = a.col_as_slice(j);
        for i in 0..n {
            s[i] += c[i] * vj;
        }
    }
    for (j, &vj) in v.iter().enumerate().skip(start) {
        let w = 2.0 * vj.conj();
        let c = a.col_as_slice_mut(j);
        for i in 0..n {
            c[i] -= s[i] * w;
        }
    }
}

/// LU factors of `ζ − H` with adjacent-row pivoting.
struct ShiftedLu {
    u: Mat<c64>,
    swaps: Vec<bool>,
    mult: Vec<c64>,
}

impl ShiftedLu {
    fn new(h: &Mat<c64>, zeta: c64) -> Result<Self> {
        let n = h.nrows();
        let mut u = Mat::from_fn(n, n, |i, j| if i > j + 1 { ZERO } else { -h[(i, j)] });
        for i in 0..n {
            u[(i, i)] += zeta;
        }
        let mut swaps = vec![false; n.saturating_sub(1)];
        let mut mult = vec![ZERO; n.saturating_sub(1)];
        for k in 0..n.saturating_sub(1) {
            if u[(k + 1, k)].norm() > u[(k, k)].norm() {
                swaps[k] = true;
                for j in k..n {
                    let t = u[(k, j)];
                    u[(k, j)] = u[(k + 1, j)];
                    u[(k + 1, j)] = t;
                }
            }
            let p = u[(k, k)];
            if p == ZERO {
                continue;
            }
            let l = u[(k + 1, k)] / p;
            mult[k] = l;
            u[(k + 1, k)] = ZERO;
            if l != ZERO {
                for j in k + 1..n {
                    let t = u[(k, j)];
                    u[(k + 1, j)] -= l * t;
                }
            }
        }
        let scale = (0..n).map(|i| u[(i, i)].norm()).fold(0.0, f64::max).max(zeta.norm());
        if let Some(i) = (0..n).find(|&i| !(u[(i, i)].norm() > f64::EPSILON * 1e-6 * scale)) {
            return Err(Error::SpectrumProximity {
                zeta,
                distance: u[(i, i)].norm(),
            });
        }
        Ok(Self { u, swaps, mult })
    }

    fn solve(&self, b: &mut [c64]) {
        let n = b.len();
        for k in 0..n.saturating_sub(1) {
            if self.swaps[k] {
                b.swap(k, k + 1);
            }
            let t = b[k];
            b[k + 1] -= self.mult[k] * t;
        }
        for j in (0..n).rev() {
            let c = self.u.col_as_slice(j);
            b[j] /= c[j];
            let x = b[j];
            for i in 0..j {
                b[i] -= c[i] * x;
            }
        }
    }

    /// Solves with `(ζ − H)*`.
    fn solve_adjoint(&self, b: &mut [c64]) {
        let n = b.len();
        for j in 0..n {
            let c = self.u.col_as_slice(j);
            let s: c64 = (0..j).map(|i| c[i].conj() * b[i]).sum();
            b[j] = (b[j] - s) / c[j].conj();
        }
        for k in (0..n.saturating_sub(1)).rev() {
            let t = b[k + 1];
            b[k] -= self.mult[k].conj() * t;
            if self.swaps[k] {
                b.swap(k, k + 1);
            }
        }
    }

    fn solve_mat(&self, b: &mut Mat<c64>) {
        for j in 0..b.ncols() {
            self.solve(b.col_as_slice_mut(j));
        }
    }
}

/// A holomorphic function on the open bisector with `|ψ(ζ)| ≲ min(|ζ|^α, |ζ|^{-α})`.
#[derive(Clone)]
pub struct PsiFunction {
    name: &'static str,
    alpha: f64,
    symbol: Arc<dyn Fn(c64) -> c64 + Send + Sync>,
}

impl fmt::Debug for PsiFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PsiFunction")
            .field("name", &self.name)
            .field("alpha", &self.alpha)
            .finish()
    }
}

impl PsiFunction {
    pub fn new(name: &'static str, alpha: f64, symbol: impl Fn(c64) -> c64 + Send + Sync + 'static) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::OutOfRange(format!("decay exponent must be positive, got {alpha}")));
        }
        Ok(Self {
            name,
            alpha,
            symbol: Arc::new(symbol),
        })
    }

    /// `ζ / (1 + ζ²)`.
    pub fn rational() -> Self {
        Self::new("rational", 1.0, |z| z / (ONE + z * z)).expect("valid exponent")
    }

    /// `ζ² / (1 + ζ²)²`.
    pub fn rational_squared() -> Self {
        Self::new("rational_squared", 2.0, |z| {
            let d = ONE + z * z;
            z * z / (d * d)
        })
        .expect("valid exponent")
    }

    /// `[ζ] e^{−[ζ]}` with `[ζ] = √(ζ²)`, the branch with positive real part.
    pub fn exponential() -> Self {
        Self::new("exponential", 1.0, |z| {
            let r = (z * z).sqrt();
            r * (-r).exp()
        })
        .expect("valid exponent")
    }

    /// Every function the library ships.
    pub fn shipped() -> Vec<Self> {
        vec![Self::rational(), Self::rational_squared(), Self::exponential()]
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eval(&self, z: c64) -> c64 {
        (self.symbol)(z)
    }

    /// Smallest `c` with `|ψ(ζ)| ≤ c |ζ|^α / (1 + |ζ|^{2α})` on the four rays at angle `mu`,
    /// sampled over `|ζ| ∈ [1e-6, 1e6]`.
    pub fn decay_constant(&self, mu: f64) -> f64 {
        let mut c = 0.0f64;
        for d in contour_directions(mu) {
            for k in 0..=240 {
                let r = 10f64.powf(-6.0 + 0.05 * k as f64);
                let ra = r.powf(self.alpha);
                let bound = ra / (1.0 + ra * ra);
                c = c.max(self.eval(d * r).norm() / bound);
            }
        }
        c
    }
}

fn contour_directions(mu: f64) -> [c64; 4] {
    [
        c64::from_polar(1.0, mu),
        c64::from_polar(1.0, -mu),
        c64::from_polar(1.0, PI - mu),
        c64::from_polar(1.0, PI + mu),
    ]
}

/// A ray `s ↦ e^s d` of the contour with its orientation sign.
#[derive(Debug, Clone, Copy)]
struct Ray {
    dir: c64,
    sign: f64,
}

/// Operator with spectrum in a closed double sector, stored with its inner product.
#[derive(Debug, Clone)]
pub struct BisectorialOperator {
    matrix: Mat<c64>,
    /// Lower Cholesky factor of the Gram matrix, `G = L Lᵀ`.
    gram_factor: Mat<f64>,
    reduced: Hessenberg,
    eigenvalues: Vec<c64>,
    omega: f64,
    mu: f64,
    resolvent_bound: f64,
    null_tol: f64,
    null: OnceLock<NullProjector>,
}

/// Spectral projection onto `N(H)` along the range, `P = V (W* V)⁻¹ W*`.
#[derive(Debug, Clone)]
struct NullProjector {
    right: Mat<c64>,
    left_dual: Mat<c64>,
}

impl NullProjector {
    fn remove(&self, x: &mut Mat<c64>) {
        if self.right.ncols() == 0 {
            return;
        }
        let coeff = &self.left_dual * &*x;
        *x -= &self.right * coeff;
    }
}

fn orthonormalize(x: &mut Mat<c64>) {
    for _ in 0..2 {
        for j in 0..x.ncols() {
            for i in 0..j {
                let (qi, qj) = (x.col_as_slice(i).to_vec(), x.col_as_slice(j));
                let d: c64 = qi.iter().zip(qj).map(|(a, b)| a.conj() * b).sum();
                let cj = x.col_as_slice_mut(j);
                for (c, q) in cj.iter_mut().zip(&qi) {
                    *c -= d * q;
                }
            }
            let cj = x.col_as_slice_mut(j);
            let nrm = cj.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            cj.iter_mut().for_each(|z| *z /= nrm);
        }
    }
}

impl BisectorialOperator {
    /// `matrix` acts on coordinates whose inner product is `gram`. `omega_hint` is a
    /// sector angle known a priori; the angle actually used is at least the measured one.
    pub fn new(matrix: Mat<c64>, gram: &Mat<f64>, omega_hint: Option<f64>) -> Result<Self> {
        let n = matrix.nrows();
        if matrix.ncols() != n || gram.nrows() != n || gram.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "operator {}x{} with Gram matrix {}x{}",
                matrix.nrows(),
                matrix.ncols(),
                gram.nrows(),
                gram.ncols()
            )));
        }
        if let Some(w) = omega_hint {
            if !(0.0..FRAC_PI_2).contains(&w) {
                return Err(Error::OutOfRange(format!("sector angle {w} outside [0, π/2)")));
            }
        }
        let llt = gram
            .llt(Side::Lower)
            .map_err(|e| Error::InvalidMetric(format!("Gram matrix is not positive definite: {e:?}")))?;
        let l = llt.L().to_owned();
        let lc = Mat::from_fn(n, n, |i, j| c64::new(l[(i, j)], 0.0));
        // T̃ = Lᵀ T L⁻ᵀ
        let mut tt = matrix.transpose().to_owned();
        solve_lower_triangular_in_place(lc.as_ref(), tt.as_mut(), Par::Seq);
        let similar = lc.transpose() * tt.transpose();
        let eigenvalues = similar.eigenvalues().map_err(|e| Error::Eigen(format!("{e:?}")))?;
        let scale = eigenvalues.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let null_tol = NULL_TOL * scale;
        let measured = eigenvalues
            .iter()
            .filter(|z| z.norm() > null_tol)
            .map(|z| sector_angle(*z))
            .fold(0.0, f64::max);
        if measured >= FRAC_PI_2 - 1e-6 {
            return Err(Error::Ellipticity(format!(
                "an eigenvalue lies at angle {measured} from the real axis"
            )));
        }
        let omega = measured.max(omega_hint.unwrap_or(0.0));
        let mu = 0.5 * (omega + FRAC_PI_2);
        let reduced = hessenberg(&similar);
        let mut op = Self {
            matrix,
            gram_factor: l,
            reduced,
            eigenvalues,
            omega,
            mu,
            resolvent_bound: f64::NAN,
            null_tol,
            null: OnceLock::new(),
        };
        op.resolvent_bound = op.estimate_resolvent_bound(8)?;
        Ok(op)
    }

    /// Diagonal operator in the Euclidean inner product.
    pub fn diagonal(values: &[c64]) -> Result<Self> {
        let n = values.len();
        let m = Mat::from_fn(n, n, |i, j| if i == j { values[i] } else { ZERO });
        Self::new(m, &Mat::<f64>::identity(n, n), None)
    }

    /// `b M⁻¹ K` on vertex functions with the mass inner product; the a-priori angle is
    /// `arctan(max |Im part| / κ) + max |arg b|`.
    pub fn from_elliptic(op: &EllipticOperator) -> Result<Self> {
        let gram = op.spaces().mass().to_dense();
        Self::new(op.dense_complex(), &gram, Some(elliptic_angle(op.coefficients(), op.multiplier())))
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// The operator in its original coordinates.
    pub fn matrix(&self) -> &Mat<c64> {
        &self.matrix
    }

    pub fn eigenvalues(&self) -> &[c64] {
        &self.eigenvalues
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Largest sampled `|ζ| ‖(ζ − T)⁻¹‖` on the contour.
    pub fn resolvent_bound(&self) -> f64 {
        self.resolvent_bound
    }

    pub fn inner(&self, x: &[c64], y: &[c64]) -> c64 {
        let a = self.to_orthonormal(x);
        let b = self.to_orthonormal(y);
        a.iter().zip(&b).map(|(p, q)| p.conj() * q).sum()
    }

    pub fn norm(&self, x: &[c64]) -> f64 {
        self.to_orthonormal(x).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    fn nonzero_range(&self) -> Option<(f64, f64)> {
        let nz: Vec<f64> = self
            .eigenvalues
            .iter()
            .map(|z| z.norm())
            .filter(|&r| r > self.null_tol)
            .collect();
        if nz.is_empty() {
            return None;
        }
        Some((nz.iter().copied().fold(f64::INFINITY, f64::min), nz.iter().copied().fold(0.0, f64::max)))
    }

    fn has_sector(&self, right: bool) -> bool {
        self.eigenvalues
            .iter()
            .any(|z| z.norm() > self.null_tol && (z.re > 0.0) == right)
    }

    fn rays(&self) -> Vec<Ray> {
        let [up, down, left_up, left_down] = contour_directions(self.mu);
        let mut rays = Vec::new();
        if self.has_sector(true) {
            rays.push(Ray { dir: up, sign: -1.0 });
            rays.push(Ray { dir: down, sign: 1.0 });
        }
        if self.has_sector(false) {
            rays.push(Ray { dir: left_up, sign: 1.0 });
            rays.push(Ray { dir: left_down, sign: -1.0 });
        }
        rays
    }

    /// `Lᵀ x`: coordinates orthonormal for the inner product.
    fn to_orthonormal(&self, x: &[c64]) -> Vec<c64> {
        let l = &self.gram_factor;
        (0..x.len())
            .map(|i| {
                let c = l.col_as_slice(i);
                (i..x.len()).map(|j| x[j] * c[j]).sum()
            })
            .collect()
    }

    /// `L⁻ᵀ y`.
    fn from_orthonormal(&self, y: &[c64]) -> Vec<c64> {
        let l = &self.gram_factor;
        let n = y.len();
        let mut x = vec![ZERO; n];
        for i in (0..n).rev() {
            let c = l.col_as_slice(i);
            let s: c64 = (i + 1..n).map(|j| x[j] * c[j]).sum();
            x[i] = (y[i] - s) / c[i];
        }
        x
    }

    /// Columns of `x` in Hessenberg coordinates `Q* Lᵀ x`.
    fn to_reduced(&self, x: &Mat<c64>) -> Mat<c64> {
        let mut y = Mat::zeros(x.nrows(), x.ncols());
        for j in 0..x.ncols() {
            let col = self.to_orthonormal(x.col_as_slice(j));
            y.col_as_slice_mut(j).copy_from_slice(&col);
        }
        self.reduced.q.adjoint() * &y
    }

    fn from_reduced(&self, y: &Mat<c64>) -> Mat<c64> {
        let z = &self.reduced.q * y;
        let mut x = Mat::zeros(y.nrows(), y.ncols());
        for j in 0..y.ncols() {
            let col = self.from_orthonormal(z.col_as_slice(j));
            x.col_as_slice_mut(j).copy_from_slice(&col);
        }
        x
    }

    /// Distance from `zeta` to the spectrum, refusing points closer than the proximity tolerance.
    pub fn check_proximity(&self, zeta: c64) -> Result<f64> {
        let d = self
            .eigenvalues
            .iter()
            .map(|z| (zeta - z).norm())
            .fold(f64::INFINITY, f64::min);
        if d <= PROXIMITY_TOL * zeta.norm().max(1.0) {
            return Err(Error::SpectrumProximity { zeta, distance: d });
        }
        Ok(d)
    }

    fn factor(&self, zeta: c64) -> Result<ShiftedLu> {
        ShiftedLu::new(&self.reduced.h, zeta)
    }

    /// Dense `(ζ − T)⁻¹` in the original coordinates.
    pub fn resolvent(&self, zeta: c64) -> Result<Mat<c64>> {
        self.check_proximity(zeta)?;
        let n = self.dim();
        let lu = self.factor(zeta)?;
        let mut y = self.to_reduced(&Mat::<c64>::identity(n, n));
        lu.solve_mat(&mut y);
        Ok(self.from_reduced(&y))
    }

    /// `(ζ − T)⁻¹ u`.
    pub fn resolvent_apply(&self, zeta: c64, u: &[c64]) -> Result<Vec<c64>> {
        self.check_proximity(zeta)?;
        let lu = self.factor(zeta)?;
        let mut y = self.to_reduced(&column(u));
        lu.solve_mat(&mut y);
        Ok(self.from_reduced(&y).col_as_slice(0).to_vec())
    }

    /// Power iteration for `|ζ| ‖(ζ − T)⁻¹‖` at `per_ray` radii on each active ray.
    fn estimate_resolvent_bound(&self, per_ray: usize) -> Result<f64> {
        let Some((lo, hi)) = self.nonzero_range() else {
            return Ok(1.0);
        };
        let (a, b) = (lo.ln() - 2.0, hi.ln() + 2.0);
        let n = self.dim();
        let mut r = rng::stream(0xb15e, 0);
        let start: Vec<c64> = (0..n).map(|_| c64::new(rng::normal(&mut r), rng::normal(&mut r))).collect();
        let mut points = Vec::new();
        for ray in self.rays() {
            for k in 0..per_ray {
                let s = a + (b - a) * k as f64 / (per_ray.max(2) - 1) as f64;
                points.push(ray.dir * s.exp());
            }
        }
        let bounds: Vec<f64> = points
            .par_iter()
            .map(|&zeta| {
                let lu = self.factor(zeta)?;
                let mut x = start.clone();
                let mut est = 0.0f64;
                for _ in 0..30 {
                    let nx = x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                    x.iter_mut().for_each(|z| *z /= nx);
                    lu.solve(&mut x);
                    let ny = x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                    lu.solve_adjoint(&mut x);
                    let converged = (ny - est).abs() <= 1e-6 * ny;
                    est = ny;
                    if converged {
                        break;
                    }
                }
                Ok(est * zeta.norm())
            })
            .collect::<Result<_>>()?;
        Ok(bounds.into_iter().fold(1.0, f64::max))
    }

    /// `ψ(T) u` by the contour integral over the boundary of the bisector at angle `μ`.
    pub fn apply_psi(&self, psi: &PsiFunction, u: &[c64]) -> Result<Vec<c64>> {
        Ok(self.apply_psi_many(psi, &column(u))?.col_as_slice(0).to_vec())
    }

    /// `ψ(T)` applied to every column of `x`.
    pub fn apply_psi_many(&self, psi: &PsiFunction, x: &Mat<c64>) -> Result<Mat<c64>> {
        let y = self.to_reduced(x);
        let rays = self.rays();
        let Some((lo, hi)) = self.nonzero_range() else {
            return Ok(Mat::zeros(x.nrows(), x.ncols()));
        };
        if rays.is_empty() {
            return Ok(Mat::zeros(x.nrows(), x.ncols()));
        }
        let reach = TRUNCATION.recip().ln() / psi.alpha();
        let (a, b) = (lo.ln().min(0.0) - reach, hi.ln().max(0.0) + reach);
        let peak = rays
            .iter()
            .flat_map(|r| (0..=64).map(move |k| r.dir * (a + (b - a) * k as f64 / 64.0).exp()))
            .map(|z| psi.eval(z).norm())
            .fold(0.0, f64::max);
        let floor = peak * frobenius(&y);
        let weight = 1.0 / (2.0 * PI * I);
        let integral = nested_trapezoid(a, b, floor, |s| {
            let mut acc = Mat::<c64>::zeros(y.nrows(), y.ncols());
            for ray in &rays {
                let zeta = ray.dir * s.exp();
                let lu = self.factor(zeta)?;
                let mut r = y.clone();
                lu.solve_mat(&mut r);
                let c = weight * ray.sign * psi.eval(zeta) * zeta;
                acc += faer::Scale(c) * &r;
            }
            Ok(acc)
        })?;
        Ok(self.from_reduced(&integral))
    }

    /// Null projector in Hessenberg coordinates, by block inverse iteration at a shift
    /// far below the smallest nonzero eigenvalue.
    fn null_projector(&self) -> Result<&NullProjector> {
        if let Some(p) = self.null.get() {
            return Ok(p);
        }
        let n = self.dim();
        let k = self.eigenvalues.iter().filter(|z| z.norm() <= self.null_tol).count();
        let projector = match self.nonzero_range() {
            Some((lo, _)) if k > 0 => {
                let lu = self.factor(c64::new(1e-6 * lo, 0.0))?;
                let mut r = rng::stream(0x2e40, k as u64);
                let mut right = Mat::from_fn(n, k, |_, _| c64::new(rng::normal(&mut r), rng::normal(&mut r)));
                let mut left = right.clone();
                for _ in 0..3 {
                    for j in 0..k {
                        lu.solve(right.col_as_slice_mut(j));
                        lu.solve_adjoint(left.col_as_slice_mut(j));
                    }
                    orthonormalize(&mut right);
                    orthonormalize(&mut left);
                }
                let pairing = left.adjoint() * &right;
                let left_dual = {
                    use faer::prelude::Solve;
                    pairing.partial_piv_lu().solve(left.adjoint().to_owned())
                };
                NullProjector { right, left_dual }
            }
            _ => NullProjector {
                right: Mat::zeros(n, 0),
                left_dual: Mat::zeros(0, n),
            },
        };
        let _ = self.null.set(projector);
        Ok(self.null.get().expect("just set"))
    }

    /// `√T x` for `T` with spectrum in the open right half-plane, through
    /// `√T = (2/π) ∫ e^s (T + e^{2s})⁻¹ T ds`.
    pub fn sqrt_many(&self, x: &Mat<c64>) -> Result<Mat<c64>> {
        if self.has_sector(false) {
            return Err(Error::Ellipticity("square root needs the spectrum in the right half-plane".into()));
        }
        let mut y = self.to_reduced(x);
        let Some((lo, hi)) = self.nonzero_range() else {
            return Ok(Mat::zeros(x.nrows(), x.ncols()));
        };
        // Rounding in the null direction would be amplified by 1/e^{2s} near the lower
        // end, so the null component is projected out of the data and of every solve.
        let null = self.null_projector()?;
        null.remove(&mut y);
        let mut hy = &self.reduced.h * &y;
        null.remove(&mut hy);
        let reach = TRUNCATION.recip().ln();
        let (a, b) = (0.5 * lo.ln() - reach, 0.5 * hi.ln() + reach);
        let floor = lo.sqrt() * frobenius(&y);
        let integral = nested_trapezoid(a, b, floor, |s| {
            let lu = self.factor(c64::new(-(2.0 * s).exp(), 0.0))?;
            let mut r = hy.clone();
            lu.solve_mat(&mut r);
            null.remove(&mut r);
            Ok(faer::Scale(c64::new(-2.0 / PI * s.exp(), 0.0)) * &r)
        })?;
        Ok(self.from_reduced(&integral))
    }

    pub fn sqrt_apply(&self, u: &[c64]) -> Result<Vec<c64>> {
        Ok(self.sqrt_many(&column(u))?.col_as_slice(0).to_vec())
    }

    /// `sgn(T) x = (1/π) ∫ e^s [(T − i e^s)⁻¹ + (T + i e^s)⁻¹] x ds`.
    pub fn sgn_many(&self, x: &Mat<c64>) -> Result<Mat<c64>> {
        let mut y = self.to_reduced(x);
        let Some((lo, hi)) = self.nonzero_range() else {
            return Ok(Mat::zeros(x.nrows(), x.ncols()));
        };
        // The weight is only O(|ζ|) near the origin, so null-space rounding is removed
        // as in the square root; sgn vanishes on N(T) anyway.
        let null = self.null_projector()?;
        null.remove(&mut y);
        let reach = TRUNCATION.recip().ln();
        let (a, b) = (lo.ln() - reach, hi.ln() + reach);
        let floor = frobenius(&y);
        let integral = nested_trapezoid(a, b, floor, |s| {
            let e = s.exp();
            let mut acc = y.clone();
            self.factor(I * e)?.solve_mat(&mut acc);
            let mut other = y.clone();
            self.factor(-I * e)?.solve_mat(&mut other);
            acc += &other;
            null.remove(&mut acc);
            Ok(faer::Scale(c64::new(-e / PI, 0.0)) * &acc)
        })?;
        Ok(self.from_reduced(&integral))
    }

    /// `χ+(T)`, `χ−(T)` and the projection onto `N(T)`, as dense matrices.
    pub fn sgn_projections(&self) -> Result<SgnProjections> {
        let n = self.dim();
        let id = Mat::<c64>::identity(n, n);
        let sgn = self.sgn_many(&id)?;
        let sq = &sgn * &sgn;
        let half = faer::Scale(c64::new(0.5, 0.0));
        Ok(SgnProjections {
            chi_plus: half * (&sq + &sgn),
            chi_minus: half * (&sq - &sgn),
            null: &id - &sq,
            sgn,
        })
    }

    /// `∫ ‖ψ(tT)u‖² dt/t` over `t_range`, in the log variable.
    ///
    /// The resolvents `(ζ_j − T)⁻¹ u` on the contour are computed once and reused for
    /// every `t`; accuracy is checked by halving both the contour and the `log t` step.
    pub fn quadratic_estimate(&self, psi: &PsiFunction, u: &[c64], t_range: (f64, f64)) -> Result<QuadraticEstimate> {
        let (t_lo, t_hi) = t_range;
        if !(t_lo > 0.0 && t_hi > t_lo && t_hi.is_finite()) {
            return Err(Error::OutOfRange(format!("invalid t range [{t_lo}, {t_hi}]")));
        }
        let Some((lo, hi)) = self.nonzero_range() else {
            return Ok(QuadraticEstimate::default());
        };
        if t_lo > 1.0 / hi || t_hi < 1.0 / lo {
            return Err(Error::Unresolved(format!(
                "t range [{t_lo:e}, {t_hi:e}] does not cover [1/|λ|max, 1/|λ|min] = [{:e}, {:e}]",
                1.0 / hi,
                1.0 / lo
            )));
        }
        let mut y = self.to_reduced(&column(u));
        // ψ vanishes on N(T); removing that component keeps rounding out of the integral
        self.null_projector()?.remove(&mut y);
        let floor = 1e-10 * y.norm_l2().powi(2);
        let rays = self.rays();
        let reach = TRUNCATION.recip().ln() / psi.alpha();
        let a = lo.ln().min(-t_hi.ln()) - reach;
        let b = hi.ln().max(-t_lo.ln()) + reach;
        let (tau_a, tau_b) = (t_lo.ln(), t_hi.ln());
        let tau_steps = ((tau_b - tau_a) / 0.05).ceil() as usize;
        let taus: Vec<f64> = (0..=tau_steps)
            .map(|k| tau_a + (tau_b - tau_a) * k as f64 / tau_steps as f64)
            .collect();

        let n = self.dim();
        let weight = 1.0 / (2.0 * PI * I);
        // resolvent samples (ζ, weight ζ (ζ − H)⁻¹ y) on the current grid
        let sample = |s: f64| -> Result<Vec<(c64, Vec<c64>)>> {
            rays.iter()
                .map(|ray| {
                    let zeta = ray.dir * s.exp();
                    let mut r = y.col_as_slice(0).to_vec();
                    self.factor(zeta)?.solve(&mut r);
                    let c = weight * ray.sign * zeta;
                    Ok((zeta, r.into_iter().map(|x| c * x).collect()))
                })
                .collect()
        };
        let profile = |nodes: &[(f64, Vec<(c64, Vec<c64>)>)], h: f64| -> Vec<f64> {
            taus.par_iter()
                .map(|&tau| {
                    let t = tau.exp();
                    let mut v = vec![ZERO; n];
                    for (_, per_ray) in nodes {
                        for (zeta, r) in per_ray {
                            let c = psi.eval(*zeta * t) * h;
                            for (vi, ri) in v.iter_mut().zip(r) {
                                *vi += c * ri;
                            }
                        }
                    }
                    v.iter().map(|z| z.norm_sqr()).sum::<f64>()
                })
                .collect()
        };
        let integrate = |f: &[f64], stride: usize| -> f64 {
            let h = (tau_b - tau_a) / tau_steps as f64 * stride as f64;
            let pts: Vec<f64> = f.iter().step_by(stride).copied().collect();
            let m = pts.len();
            h * (pts.iter().sum::<f64>() - 0.5 * (pts[0] + pts[m - 1]))
        };

        let mut count = ((b - a) / 0.25).ceil() as usize;
        let mut h = (b - a) / count as f64;
        let mut nodes: Vec<(f64, Vec<(c64, Vec<c64>)>)> = (0..=count)
            .into_par_iter()
            .map(|k| {
                let s = a + k as f64 * h;
                Ok((s, sample(s)?))
            })
            .collect::<Result<_>>()?;
        let mut previous = integrate(&profile(&nodes, h), 1);
        for _ in 0..MAX_HALVINGS {
            let fresh: Vec<(f64, Vec<(c64, Vec<c64>)>)> = (0..count)
                .into_par_iter()
                .map(|k| {
                    let s = a + (k as f64 + 0.5) * h;
                    Ok((s, sample(s)?))
                })
                .collect::<Result<_>>()?;
            nodes.extend(fresh);
            nodes.sort_by(|p, q| p.0.total_cmp(&q.0));
            count *= 2;
            h *= 0.5;
            let f = profile(&nodes, h);
            let value = integrate(&f, 1);
            let contour_error = (value - previous).abs();
            if contour_error <= QUADRATURE_TOL * value.abs().max(floor) || value == 0.0 {
                let tau_error = (value - integrate(&f, 2)).abs();
                let m = f.len();
                return Ok(QuadraticEstimate {
                    value,
                    truncation_error: (f[0] + f[m - 1]) / (2.0 * psi.alpha()),
                    quadrature_error: contour_error + tau_error,
                });
            }
            previous = value;
        }
        Err(Error::Quadrature {
            estimate: (previous - integrate(&profile(&nodes, h), 1)).abs(),
        })
    }
}

/// Largest angle between a nonzero eigenvalue and the real axis.
fn sector_angle(z: c64) -> f64 {
    let a = z.arg().abs();
    a.min(PI - a)
}

/// `arctan(max |skew part| / κ) + max |arg b|`, capped below `π/2`.
pub fn elliptic_angle(coefficients: &CoefficientField, multiplier: Option<&[c64]>) -> f64 {
    let skew = (0..coefficients.len())
        .map(|t| coefficients.as_complex(t).skew_part_norm())
        .fold(0.0, f64::max);
    let b = multiplier.map_or(0.0, |b| b.iter().map(|z| z.arg().abs()).fold(0.0, f64::max));
    ((skew / coefficients.kappa()).atan() + b).min(FRAC_PI_2 - 1e-3)
}

fn column(u: &[c64]) -> Mat<c64> {
    Mat::from_fn(u.len(), 1, |i, _| u[i])
}

fn frobenius(m: &Mat<c64>) -> f64 {
    m.norm_l2()
}

/// Trapezoid rule on `[a, b]`, halving the step until two successive values agree to
/// `QUADRATURE_TOL` relative to `max(‖I‖, floor)`. Nodes are evaluated in parallel
/// chunks and summed in node order.
fn nested_trapezoid<F>(a: f64, b: f64, floor: f64, f: F) -> Result<Mat<c64>>
where
    F: Fn(f64) -> Result<Mat<c64>> + Sync,
{
    let mut count = ((b - a) / 0.5).ceil().max(2.0) as usize;
    let mut h = (b - a) / count as f64;
    let level0: Vec<f64> = (0..=count).map(|k| a + k as f64 * h).collect();
    let mut sum = sum_nodes(&level0, &f, true)?;
    let mut previous = faer::Scale(c64::new(h, 0.0)) * &sum;
    let mut estimate = f64::INFINITY;
    for _ in 0..MAX_HALVINGS {
        let fresh: Vec<f64> = (0..count).map(|k| a + (k as f64 + 0.5) * h).collect();
        sum += sum_nodes(&fresh, &f, false)?;
        count *= 2;
        h *= 0.5;
        let current = faer::Scale(c64::new(h, 0.0)) * &sum;
        let diff = (&current - &previous).norm_l2();
        let scale = current.norm_l2().max(floor);
        estimate = if diff == 0.0 { 0.0 } else { diff / scale };
        if estimate <= QUADRATURE_TOL {
            return Ok(current);
        }
        previous = current;
    }
    Err(Error::Quadrature { estimate })
}

fn sum_nodes<F>(nodes: &[f64], f: &F, endpoints_halved: bool) -> Result<Mat<c64>>
where
    F: Fn(f64) -> Result<Mat<c64>> + Sync,
{
    let mut total: Option<Mat<c64>> = None;
    let last = nodes.len() - 1;
    for (c, chunk) in nodes.chunks(NODE_CHUNK).enumerate() {
        let values: Vec<Mat<c64>> = chunk.par_iter().map(|&s| f(s)).collect::<Result<_>>()?;
        for (k, v) in values.into_iter().enumerate() {
            let idx = c * NODE_CHUNK + k;
            let v = if endpoints_halved && (idx == 0 || idx == last) {
                faer::Scale(c64::new(0.5, 0.0)) * &v
            } else {
                v
            };
            total = Some(match total {
                None => v,
                Some(t) => t + v,
            });
        }
    }
    Ok(total.expect("at least one node"))
}

#[derive(Debug, Clone)]
pub struct SgnProjections {
    pub sgn: Mat<c64>,
    pub chi_plus: Mat<c64>,
    pub chi_minus: Mat<c64>,
    pub null: Mat<c64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QuadraticEstimate {
    pub value: f64,
    /// Tail mass outside the `t` range, extrapolated from the decay exponent.
    pub truncation_error: f64,
    /// Change under halving of the contour step plus doubling of the `log t` step.
    pub quadrature_error: f64,
}

/// `√L` for an elliptic operator `L = −b div B ∇`.
#[derive(Debug, Clone)]
pub struct SquareRoot {
    op: BisectorialOperator,
}

/// Square root of `op` through the contour calculus.
pub fn sqrt_op(op: &EllipticOperator) -> Result<SquareRoot> {
    if op.coefficients().kappa() <= 0.0 {
        return Err(Error::Ellipticity("coefficients are not elliptic".into()));
    }
    Ok(SquareRoot {
        op: BisectorialOperator::from_elliptic(op)?,
    })
}

impl SquareRoot {
    pub fn operator(&self) -> &BisectorialOperator {
        &self.op
    }

    pub fn apply(&self, u: &[c64]) -> Result<Vec<c64>> {
        self.op.sqrt_apply(u)
    }

    pub fn apply_real(&self, u: &[f64]) -> Result<Vec<c64>> {
        self.apply(&complexify(u))
    }

    /// Columns are `√L` applied to each probe.
    pub fn apply_probes(&self, probes: &[Vec<f64>]) -> Result<Mat<c64>> {
        let n = self.op.dim();
        let x = Mat::from_fn(n, probes.len(), |i, j| c64::new(probes[j][i], 0.0));
        self.op.sqrt_many(&x)
    }

    /// Dense matrix of `√L`.
    pub fn to_dense(&self) -> Result<Mat<c64>> {
        let n = self.op.dim();
        self.op.sqrt_many(&Mat::<c64>::identity(n, n))
    }
}

pub fn complexify(u: &[f64]) -> Vec<c64> {
    u.iter().map(|&x| c64::new(x, 0.0)).collect()
}

fn csr_apply(a: &Csr, x: &[c64]) -> Vec<c64> {
    let re: Vec<f64> = x.iter().map(|z| z.re).collect();
    let im: Vec<f64> = x.iter().map(|z| z.im).collect();
    let (r, i) = (a.matvec(&re), a.matvec(&im));
    r.into_iter().zip(i).map(|(p, q)| c64::new(p, q)).collect()
}

fn csr_apply_transpose(a: &Csr, x: &[c64]) -> Vec<c64> {
    let re: Vec<f64> = x.iter().map(|z| z.re).collect();
    let im: Vec<f64> = x.iter().map(|z| z.im).collect();
    let (r, i) = (a.matvec_transpose(&re), a.matvec_transpose(&im));
    r.into_iter().zip(i).map(|(p, q)| c64::new(p, q)).collect()
}

/// `M`-norm of a complex vertex function.
pub fn vertex_norm(spaces: &DiscreteSpaces, x: &[c64]) -> f64 {
    let re: Vec<f64> = x.iter().map(|z| z.re).collect();
    let im: Vec<f64> = x.iter().map(|z| z.im).collect();
    (spaces.inner_vertex(&re, &re) + spaces.inner_vertex(&im, &im)).max(0.0).sqrt()
}

/// The Dirac-type operator `Π_B = Γ + B1 Γ* B2` on vertex functions ⊕ triangle covectors.
#[derive(Debug, Clone)]
pub struct DiracBlock {
    spaces: Arc<DiscreteSpaces>,
    pair: Arc<GradDivPair>,
    b: Vec<c64>,
    big_b: Vec<CMat2>,
    omega_hint: f64,
}

impl DiracBlock {
    /// The unperturbed block `Π = Γ + Γ*`.
    pub fn new(spaces: Arc<DiscreteSpaces>, pair: Arc<GradDivPair>) -> Self {
        let nv = spaces.num_vertices();
        let nt = spaces.num_triangles();
        Self {
            spaces,
            pair,
            b: vec![ONE; nv],
            big_b: vec![CMat2::from_real(&crate::tensor::Sym2::IDENTITY); nt],
            omega_hint: 0.0,
        }
    }

    /// `B1 = b` on functions and `B2 = B` on covectors, taken from `op`.
    pub fn from_operator(op: &EllipticOperator) -> Self {
        let mut block = Self::new(op.spaces().clone(), op.pair().clone());
        if let Some(b) = op.multiplier() {
            block.b = b.to_vec();
        }
        block.big_b = (0..op.coefficients().len()).map(|t| op.coefficients().as_complex(t)).collect();
        block.omega_hint = 0.5 * elliptic_angle(op.coefficients(), op.multiplier());
        block
    }

    pub fn num_vertices(&self) -> usize {
        self.spaces.num_vertices()
    }

    pub fn num_covectors(&self) -> usize {
        2 * self.spaces.num_triangles()
    }

    pub fn dim(&self) -> usize {
        self.num_vertices() + self.num_covectors()
    }

    pub fn spaces(&self) -> &Arc<DiscreteSpaces> {
        &self.spaces
    }

    pub fn pair(&self) -> &Arc<GradDivPair> {
        &self.pair
    }

    fn split<'a>(&self, x: &'a [c64]) -> (&'a [c64], &'a [c64]) {
        x.split_at(self.num_vertices())
    }

    /// `(u, w) ↦ (0, ∇u)`.
    pub fn apply_gamma(&self, x: &[c64]) -> Vec<c64> {
        let (u, _) = self.split(x);
        let mut out = vec![ZERO; self.num_vertices()];
        out.extend(csr_apply(self.pair.gradient_matrix(), u));
        out
    }

    /// `(u, w) ↦ (−div w, 0)`, the adjoint of `Γ` in the product inner product.
    pub fn apply_gamma_star(&self, x: &[c64]) -> Vec<c64> {
        let (_, w) = self.split(x);
        let mut out = self.minus_div(w);
        out.extend(std::iter::repeat(ZERO).take(self.num_covectors()));
        out
    }

    fn minus_div(&self, w: &[c64]) -> Vec<c64> {
        let cw = self.spaces.covector_weights();
        let weighted: Vec<c64> = w.iter().enumerate().map(|(k, z)| z * cw[k / 2]).collect();
        let load = csr_apply_transpose(self.pair.gradient_matrix(), &weighted);
        let re: Vec<f64> = load.iter().map(|z| z.re).collect();
        let im: Vec<f64> = load.iter().map(|z| z.im).collect();
        let (r, i) = (self.spaces.solve_mass(&re), self.spaces.solve_mass(&im));
        r.into_iter().zip(i).map(|(p, q)| c64::new(p, q)).collect()
    }

    /// `B1`: multiplication by `b` on the function part.
    pub fn apply_b1(&self, x: &[c64]) -> Vec<c64> {
        let nv = self.num_vertices();
        x.iter()
            .enumerate()
            .map(|(i, z)| if i < nv { self.b[i] * z } else { *z })
            .collect()
    }

    /// `B2`: `B` on each triangle's covector.
    pub fn apply_b2(&self, x: &[c64]) -> Vec<c64> {
        let nv = self.num_vertices();
        let mut out = x.to_vec();
        for (t, bt) in self.big_b.iter().enumerate() {
            let (p, q) = (x[nv + 2 * t], x[nv + 2 * t + 1]);
            out[nv + 2 * t] = bt.0[0][0] * p + bt.0[0][1] * q;
            out[nv + 2 * t + 1] = bt.0[1][0] * p + bt.0[1][1] * q;
        }
        out
    }

    /// `Π = Γ + Γ*`.
    pub fn apply_pi(&self, x: &[c64]) -> Vec<c64> {
        let g = self.apply_gamma(x);
        let s = self.apply_gamma_star(x);
        g.iter().zip(&s).map(|(p, q)| p + q).collect()
    }

    /// `Π_B = Γ + B1 Γ* B2`.
    pub fn apply_pi_b(&self, x: &[c64]) -> Vec<c64> {
        let g = self.apply_gamma(x);
        let s = self.apply_b1(&self.apply_gamma_star(&self.apply_b2(x)));
        g.iter().zip(&s).map(|(p, q)| p + q).collect()
    }

    /// Product inner product `⟨x, y⟩ = x* G y`.
    pub fn inner(&self, x: &[c64], y: &[c64]) -> c64 {
        let nv = self.num_vertices();
        let (xu, xw) = x.split_at(nv);
        let (yu, yw) = y.split_at(nv);
        let my = csr_apply(self.spaces.mass(), yu);
        let cw = self.spaces.covector_weights();
        let a: c64 = xu.iter().zip(&my).map(|(p, q)| p.conj() * q).sum();
        let b: c64 = xw.iter().zip(yw).enumerate().map(|(k, (p, q))| p.conj() * q * cw[k / 2]).sum();
        a + b
    }

    pub fn norm(&self, x: &[c64]) -> f64 {
        self.inner(x, x).re.max(0.0).sqrt()
    }

    /// Dense Gram matrix `blockdiag(M, W ⊗ I₂)`.
    pub fn gram(&self) -> Mat<f64> {
        let nv = self.num_vertices();
        let n = self.dim();
        let mut g = Mat::<f64>::zeros(n, n);
        for (i, j, v) in self.spaces.mass().triplets() {
            g[(i, j)] += v;
        }
        for (k, w) in self.spaces.covector_weights().iter().enumerate() {
            g[(nv + 2 * k, nv + 2 * k)] = *w;
            g[(nv + 2 * k + 1, nv + 2 * k + 1)] = *w;
        }
        g
    }

    fn dense_of(&self, f: impl Fn(&[c64]) -> Vec<c64> + Sync) -> Mat<c64> {
        let n = self.dim();
        let cols: Vec<Vec<c64>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let mut e = vec![ZERO; n];
                e[j] = ONE;
                f(&e)
            })
            .collect();
        Mat::from_fn(n, n, |i, j| cols[j][i])
    }

    pub fn dense_gamma(&self) -> Mat<c64> {
        self.dense_of(|x| self.apply_gamma(x))
    }

    pub fn dense_gamma_star(&self) -> Mat<c64> {
        self.dense_of(|x| self.apply_gamma_star(x))
    }

    pub fn dense_pi(&self) -> Mat<c64> {
        self.dense_of(|x| self.apply_pi(x))
    }

    pub fn dense_pi_b(&self) -> Mat<c64> {
        self.dense_of(|x| self.apply_pi_b(x))
    }

    /// `Π_B` as a bisectorial operator in the product inner product.
    pub fn operator(&self) -> Result<BisectorialOperator> {
        BisectorialOperator::new(self.dense_pi_b(), &self.gram(), Some(self.omega_hint))
    }

    /// Relative distance of `x` from `R(Π) = (mean-zero functions) ⊕ R(∇)`.
    pub fn range_residual(&self, x: &[f64]) -> Result<f64> {
        let factor = pinned_laplacian(&self.spaces, &self.pair)?;
        Ok(self.range_residual_with(x, &factor))
    }

    fn range_residual_with(&self, x: &[f64], laplacian: &SpdFactor) -> f64 {
        let (u, w) = x.split_at(self.num_vertices());
        let sp = &self.spaces;
        let nu = sp.norm_vertex(u);
        let mean_part = sp.integral(u).abs() / sp.total_measure().sqrt();
        let nw = sp.norm_covector(w);
        let covector_part = if nw > 0.0 {
            // least-squares fit of w by a gradient
            let phi = laplacian.solve(&self.pair.divergence_load(sp, w));
            let gp = self.pair.gradient(&phi);
            let r: Vec<f64> = w.iter().zip(&gp).map(|(a, b)| a - b).collect();
            sp.norm_covector(&r)
        } else {
            0.0
        };
        let total = (nu * nu + nw * nw).sqrt();
        if total == 0.0 {
            return 0.0;
        }
        (mean_part * mean_part + covector_part * covector_part).sqrt() / total
    }
}

fn pinned_laplacian(spaces: &Arc<DiscreteSpaces>, pair: &Arc<GradDivPair>) -> Result<SpdFactor> {
    let lap = fem::make_operator(
        spaces.clone(),
        pair.clone(),
        CoefficientField::identity(spaces.num_triangles()),
        None,
    )?;
    SpdFactor::new(&solver::pinned(lap.stiffness()?).0)
}

/// Extreme ratios `‖√L u‖ / ‖∇u‖` over a probe set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KatoConstants {
    pub c_low: f64,
    pub c_high: f64,
    pub probes_used: usize,
    /// Probes with vanishing gradient (constants), left out of the ratio.
    pub skipped: usize,
}

/// The first `eigen` nonconstant eigenfunctions of `spec` followed by `random`
/// seeded mean-zero vectors.
pub fn probe_set(spaces: &DiscreteSpaces, spec: &SpectralDecomposition, eigen: usize, random: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut probes: Vec<Vec<f64>> = (1..spec.count().min(eigen + 1)).map(|k| spec.vector(k)).collect();
    let mut r = rng::stream(seed, 31);
    for _ in 0..random {
        let v = rng::normal_vec(&mut r, spaces.num_vertices());
        probes.push(spaces.split_mean(&v).1);
    }
    probes
}

fn is_degenerate(spaces: &DiscreteSpaces, pair: &GradDivPair, u: &[f64]) -> bool {
    let g = spaces.norm_covector(&pair.gradient(u));
    !(g > 1e-12 * spaces.norm_vertex(u).max(f64::MIN_POSITIVE))
}

/// `‖√L u‖ / ‖∇u‖` extremes over `probes` for `L = −b div B ∇`.
pub fn kato_ratio(op: &EllipticOperator, probes: &[Vec<f64>]) -> Result<KatoConstants> {
    let sp = op.spaces();
    let pair = op.pair();
    let (kept, skipped): (Vec<&Vec<f64>>, Vec<&Vec<f64>>) = probes.iter().partition(|u| !is_degenerate(sp, pair, u));
    if kept.is_empty() {
        return Err(Error::OutOfRange("every probe is constant".into()));
    }
    let root = sqrt_op(op)?;
    let kept_owned: Vec<Vec<f64>> = kept.iter().map(|u| u.to_vec()).collect();
    let images = root.apply_probes(&kept_owned)?;
    let mut c_low = f64::INFINITY;
    let mut c_high = 0.0f64;
    for (j, u) in kept_owned.iter().enumerate() {
        let ratio = vertex_norm(sp, images.col_as_slice(j)) / sp.norm_covector(&pair.gradient(u));
        c_low = c_low.min(ratio);
        c_high = c_high.max(ratio);
    }
    Ok(KatoConstants {
        c_low,
        c_high,
        probes_used: kept_owned.len(),
        skipped: skipped.len(),
    })
}

/// Perturbation direction `(B̃, b̃)` for the Lipschitz experiment.
#[derive(Debug, Clone)]
pub struct Perturbation {
    pub coefficient: Vec<CMat2>,
    pub multiplier: Option<Vec<c64>>,
}

impl Perturbation {
    /// `B̃ = identity`, `b̃ = 0`.
    pub fn identity(num_triangles: usize) -> Self {
        Self {
            coefficient: vec![CMat2::from_real(&crate::tensor::Sym2::IDENTITY); num_triangles],
            multiplier: None,
        }
    }

    /// Seeded complex direction normalized to `sup ‖B̃‖ = 1` and `sup |b̃| = 1`.
    pub fn random(num_triangles: usize, num_vertices: usize, with_multiplier: bool, seed: u64) -> Self {
        let mut r = rng::stream(seed, 41);
        let mut z = || c64::new(rng::normal(&mut r), rng::normal(&mut r));
        let mut coefficient: Vec<CMat2> = (0..num_triangles).map(|_| CMat2([[z(), z()], [z(), z()]])).collect();
        let sup = coefficient.iter().map(|c| c.op_norm()).fold(0.0, f64::max);
        for c in &mut coefficient {
            *c = c.scale(c64::new(1.0 / sup, 0.0));
        }
        let multiplier = with_multiplier.then(|| {
            let b: Vec<c64> = (0..num_vertices).map(|_| z()).collect();
            let sup = b.iter().map(|x| x.norm()).fold(0.0, f64::max);
            b.into_iter().map(|x| x / sup).collect()
        });
        Self { coefficient, multiplier }
    }

    fn sup_coefficient(&self) -> f64 {
        self.coefficient.iter().map(|c| c.op_norm()).fold(0.0, f64::max)
    }

    fn sup_multiplier(&self) -> f64 {
        self.multiplier
            .as_ref()
            .map_or(0.0, |b| b.iter().map(|z| z.norm()).fold(0.0, f64::max))
    }

    /// Largest admissible magnitude: the perturbation must stay below the ellipticity
    /// constants of both `B` and `b`.
    pub fn margin(&self, op: &EllipticOperator) -> f64 {
        let kb = op.coefficients().kappa();
        let km = op.multiplier().map_or(1.0, |b| b.iter().map(|z| z.re).fold(f64::INFINITY, f64::min));
        let mut m = f64::INFINITY;
        let sc = self.sup_coefficient();
        if sc > 0.0 {
            m = m.min(kb / sc);
        }
        let sm = self.sup_multiplier();
        if sm > 0.0 {
            m = m.min(km / sm);
        }
        m
    }

    /// `(b + s b̃) div (B + s B̃) ∇` on the spaces of `op`.
    pub fn apply_to(&self, op: &EllipticOperator, s: f64) -> Result<EllipticOperator> {
        let nt = op.coefficients().len();
        if self.coefficient.len() != nt {
            return Err(Error::DimensionMismatch("perturbation tensor count".into()));
        }
        let sc = c64::new(s, 0.0);
        let tensors: Vec<CMat2> = (0..nt)
            .map(|t| op.coefficients().as_complex(t).add(&self.coefficient[t].scale(sc)))
            .collect();
        let coefficient = CoefficientField::complex(tensors)?;
        let multiplier = match (op.multiplier(), &self.multiplier) {
            (None, None) => None,
            (b, d) => {
                let n = op.num_vertices();
                Some(
                    (0..n)
                        .map(|i| b.map_or(ONE, |b| b[i]) + d.as_ref().map_or(ZERO, |d| d[i]) * s)
                        .collect(),
                )
            }
        };
        fem::make_operator(op.spaces().clone(), op.pair().clone(), coefficient, multiplier)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzRow {
    pub magnitude: f64,
    pub lipschitz_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzSweep {
    pub rows: Vec<LipschitzRow>,
    /// Least-squares slope of `log ratio` against `log magnitude` over positive magnitudes.
    pub slope: f64,
    pub margin: f64,
}

/// For each magnitude `m`, the largest `‖(√L − √L_m) u‖ / ‖∇u‖` over the probes.
pub fn lipschitz_sweep(
    op: &EllipticOperator,
    direction: &Perturbation,
    magnitudes: &[f64],
    probes: &[Vec<f64>],
) -> Result<LipschitzSweep> {
    let margin = direction.margin(op);
    if let Some(&m) = magnitudes.iter().find(|&&m| !(m.abs() < margin)) {
        return Err(Error::OutOfRange(format!("magnitude {m} not below the ellipticity margin {margin}")));
    }
    let sp = op.spaces();
    let pair = op.pair();
    let kept: Vec<Vec<f64>> = probes.iter().filter(|u| !is_degenerate(sp, pair, u)).cloned().collect();
    if kept.is_empty() {
        return Err(Error::OutOfRange("every probe is constant".into()));
    }
    let grads: Vec<f64> = kept.iter().map(|u| sp.norm_covector(&pair.gradient(u))).collect();
    let base = sqrt_op(op)?.apply_probes(&kept)?;
    let mut rows = Vec::with_capacity(magnitudes.len());
    for &m in magnitudes {
        if m == 0.0 {
            rows.push(LipschitzRow {
                magnitude: m,
                lipschitz_ratio: 0.0,
            });
            continue;
        }
        let moved = sqrt_op(&direction.apply_to(op, m)?)?.apply_probes(&kept)?;
        let diff = &base - &moved;
        let ratio = (0..kept.len())
            .map(|j| vertex_norm(sp, diff.col_as_slice(j)) / grads[j])
            .fold(0.0, f64::max);
        rows.push(LipschitzRow {
            magnitude: m,
            lipschitz_ratio: ratio,
        });
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.magnitude > 0.0 && r.lipschitz_ratio > 0.0)
        .map(|r| (r.magnitude.ln(), r.lipschitz_ratio.ln()))
        .collect();
    Ok(LipschitzSweep {
        slope: loglog_slope(&pts),
        rows,
        margin,
    })
}

/// Least-squares slope through `(x, y)` pairs; NaN with fewer than two points.
pub fn loglog_slope(pts: &[(f64, f64)]) -> f64 {
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoercivityConstants {
    /// Smallest `C1` with `‖u‖ ≤ C1 ‖Πu‖` on the probes.
    pub c1: f64,
    /// Smallest `C2` with `‖∇f‖ + ‖div w‖ + ‖u‖ ≤ C2 ‖Πu‖` for `u = (f, w)`.
    pub c2: f64,
    pub probes_used: usize,
    /// Zero probes, for which the inequalities are vacuous.
    pub skipped: usize,
}

/// Probes spanning low and generic parts of `R(Π)`: `(φ_k, 0)`, `(0, ∇φ_k)` and
/// seeded `(f, ∇g)` with `f` mean-zero.
pub fn coercivity_probes(block: &DiracBlock, spec: &SpectralDecomposition, eigen: usize, random: usize, seed: u64) -> Vec<Vec<f64>> {
    let sp = block.spaces();
    let pair = block.pair();
    let nv = block.num_vertices();
    let nc = block.num_covectors();
    let mut probes = Vec::new();
    for k in 1..spec.count().min(eigen + 1) {
        let phi = spec.vector(k);
        let mut a = phi.clone();
        a.extend(std::iter::repeat(0.0).take(nc));
        probes.push(a);
        let mut b = vec![0.0; nv];
        b.extend(pair.gradient(&phi));
        probes.push(b);
    }
    let mut r = rng::stream(seed, 51);
    for _ in 0..random {
        let f = sp.split_mean(&rng::normal_vec(&mut r, nv)).1;
        let g = rng::normal_vec(&mut r, nv);
        let mut x = f;
        x.extend(pair.gradient(&g));
        probes.push(x);
    }
    probes
}

/// Constants of `‖u‖ ≤ C1 ‖Πu‖` and `‖∇u‖ + ‖u‖ ≤ C2 ‖Πu‖` on `R(Π)` for the
/// unperturbed block, where `‖∇(f, w)‖` is taken as `‖∇f‖ + ‖div w‖`.
pub fn coercivity_check(block: &DiracBlock, probes: &[Vec<f64>]) -> Result<CoercivityConstants> {
    let sp = block.spaces();
    let pair = block.pair();
    let nv = block.num_vertices();
    let mut c1 = 0.0f64;
    let mut c2 = 0.0f64;
    let mut used = 0;
    let mut skipped = 0;
    let laplacian = pinned_laplacian(sp, pair)?;
    for x in probes {
        if x.len() != block.dim() {
            return Err(Error::DimensionMismatch("probe length".into()));
        }
        let (f, w) = x.split_at(nv);
        let size = (sp.inner_vertex(f, f) + sp.inner_covector(w, w)).sqrt();
        if size == 0.0 {
            skipped += 1;
            continue;
        }
        let residual = block.range_residual_with(x, &laplacian);
        if residual > 1e-10 {
            return Err(Error::ProbeNotInRange(residual));
        }
        let grad_f = sp.norm_covector(&pair.gradient(f));
        let div_w = sp.norm_vertex(&pair.divergence(sp, w));
        let pi_norm = (grad_f * grad_f + div_w * div_w).sqrt();
        c1 = c1.max(size / pi_norm);
        c2 = c2.max((grad_f + div_w + size) / pi_norm);
        used += 1;
    }
    Ok(CoercivityConstants {
        c1,
        c2,
        probes_used: used,
        skipped,
    })
}

pub const LIPSCHITZ_HEADER: &str = "magnitude,lipschitz_ratio";
pub const KATO_LEVELS_HEADER: &str = "level,c_low,c_high";

pub fn write_lipschitz_csv<W: Write>(mut w: W, sweep: &LipschitzSweep) -> std::io::Result<()> {
    writeln!(w, "{LIPSCHITZ_HEADER}")?;
    for r in &sweep.rows {
        writeln!(w, "{:.17e},{:.17e}", r.magnitude, r.lipschitz_ratio)?;
    }
    Ok(())
}

pub fn write_kato_levels_csv<W: Write>(mut w: W, levels: &[(u32, KatoConstants)]) -> std::io::Result<()> {
    writeln!(w, "{KATO_LEVELS_HEADER}")?;
    for (level, k) in levels {
        writeln!(w, "{level},{:.17e},{:.17e}", k.c_low, k.c_high)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{assemble, laplacian, make_operator, MassKind};
    use crate::mesh::{build_icosphere, RoughMetric};

    fn random_matrix(n: usize, seed: u64) -> Mat<c64> {
        let mut r = rng::stream(seed, 0);
        Mat::from_fn(n, n, |_, _| c64::new(rng::normal(&mut r), rng::normal(&mut r)))
    }

    fn max_abs(m: &Mat<c64>) -> f64 {
        let mut x = 0.0f64;
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                x = x.max(m[(i, j)].norm());
            }
        }
        x
    }

    fn sphere_laplacian(level: u32) -> EllipticOperator {
        let mesh = build_icosphere(level).unwrap();
        laplacian(&mesh, &RoughMetric::induced(&mesh), MassKind::Consistent).unwrap()
    }

    #[test]
    fn hessenberg_reduction_is_unitary_and_exact() {
        let a = random_matrix(25, 1);
        let hs = hessenberg(&a);
        let n = a.nrows();
        let qq = hs.q.adjoint() * &hs.q;
        assert!(max_abs(&(&qq - Mat::<c64>::identity(n, n))) < 1e-13);
        let back = &hs.q * &hs.h * hs.q.adjoint();
        assert!(max_abs(&(&back - &a)) < 1e-12);
        for j in 0..n {
            for i in j + 2..n {
                assert_eq!(hs.h[(i, j)], ZERO);
            }
        }
    }

    #[test]
    fn shifted_solves_and_adjoint_solves() {
        let a = random_matrix(20, 2);
        let hs = hessenberg(&a);
        let zeta = c64::new(0.3, -1.7);
        let lu = ShiftedLu::new(&hs.h, zeta).unwrap();
        let mut r = rng::stream(3, 0);
        let b: Vec<c64> = (0..20).map(|_| c64::new(rng::normal(&mut r), 0.0)).collect();
        let shifted = Mat::from_fn(20, 20, |i, j| if i == j { zeta } else { ZERO }) - &hs.h;
        let mut x = b.clone();
        lu.solve(&mut x);
        let ax = &shifted * column(&x);
        let mut y = b.clone();
        lu.solve_adjoint(&mut y);
        let ay = shifted.adjoint() * column(&y);
        for i in 0..20 {
            assert!((ax[(i, 0)] - b[i]).norm() < 1e-12);
            assert!((ay[(i, 0)] - b[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn resolvent_examples() {
        let zero = BisectorialOperator::diagonal(&[ZERO, ZERO]).unwrap();
        let r = zero.resolvent(ONE).unwrap();
        assert!(max_abs(&(&r - Mat::<c64>::identity(2, 2))) < 1e-15);

        let t = BisectorialOperator::diagonal(&[c64::new(1.0, 0.0), c64::new(4.0, 0.0)]).unwrap();
        let r = t.resolvent(I).unwrap();
        assert!((r[(0, 0)] - ONE / (I - 1.0)).norm() < 1e-14);
        assert!((r[(1, 1)] - ONE / (I - 4.0)).norm() < 1e-14);
        assert!(r[(0, 1)].norm() < 1e-15);
        assert!(matches!(t.resolvent(c64::new(4.0, 0.0)), Err(Error::SpectrumProximity { .. })));
        assert!(t.resolvent_bound() >= 1.0 && t.resolvent_bound().is_finite());
    }

    #[test]
    fn psi_on_diagonal_matches_scalar_calculus() {
        let lambdas = [0.5, 1.0, 3.0, 10.0, -2.0];
        let vals: Vec<c64> = lambdas.iter().map(|&l| c64::new(l, 0.0)).collect();
        let t = BisectorialOperator::diagonal(&vals).unwrap();
        for psi in PsiFunction::shipped() {
            let u = vec![ONE; 5];
            let out = t.apply_psi(&psi, &u).unwrap();
            for (k, &l) in vals.iter().enumerate() {
                let want = psi.eval(l);
                assert!((out[k] - want).norm() < 1e-10 * want.norm().max(1e-3), "{} at {l}", psi.name());
            }
        }
    }

    #[test]
    fn psi_annihilates_the_null_space() {
        let vals = [ZERO, c64::new(2.0, 0.0), c64::new(-1.0, 0.0)];
        let t = BisectorialOperator::diagonal(&vals).unwrap();
        let out = t.apply_psi(&PsiFunction::rational(), &[ONE, ZERO, ZERO]).unwrap();
        assert!(out.iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn sgn_projections_of_simple_operators() {
        let t = BisectorialOperator::diagonal(&[c64::new(-1.0, 0.0), c64::new(1.0, 0.0)]).unwrap();
        let p = t.sgn_projections().unwrap();
        let e0 = Mat::from_fn(2, 2, |i, j| if i == 0 && j == 0 { ONE } else { ZERO });
        let e1 = Mat::from_fn(2, 2, |i, j| if i == 1 && j == 1 { ONE } else { ZERO });
        assert!(max_abs(&(&p.chi_minus - &e0)) < 1e-10);
        assert!(max_abs(&(&p.chi_plus - &e1)) < 1e-10);
        assert!(max_abs(&p.null) < 1e-10);

        let a = random_matrix(6, 4);
        let spd = &a * a.adjoint() + Mat::<c64>::identity(6, 6);
        let t = BisectorialOperator::new(spd, &Mat::<f64>::identity(6, 6), None).unwrap();
        let p = t.sgn_projections().unwrap();
        assert!(max_abs(&(&p.chi_plus - Mat::<c64>::identity(6, 6))) < 1e-10);
        assert!(max_abs(&p.chi_minus) < 1e-10);
    }

    #[test]
    fn quadratic_estimate_of_rational_psi_is_one_half() {
        let vals: Vec<c64> = [0.7, 2.0, 9.0].iter().map(|&l| c64::new(l, 0.0)).collect();
        let t = BisectorialOperator::diagonal(&vals).unwrap();
        let u = vec![c64::new(0.6, 0.0), c64::new(0.0, 0.0), c64::new(0.8, 0.0)];
        let q = t
            .quadratic_estimate(&PsiFunction::rational(), &u, (1e-4 / 9.0, 1e4 / 0.7))
            .unwrap();
        assert!((q.value - 0.5).abs() < 1e-6, "{q:?}");
        assert!(q.truncation_error < 1e-7);
        assert!(matches!(
            t.quadratic_estimate(&PsiFunction::rational(), &u, (1.0, 2.0)),
            Err(Error::Unresolved(_))
        ));
    }

    #[test]
    fn laplacian_square_root_reproduces_gradient_norm() {
        let op = sphere_laplacian(1);
        let root = sqrt_op(&op).unwrap();
        let sp = op.spaces();
        let mut r = rng::stream(5, 0);
        let u = sp.split_mean(&rng::normal_vec(&mut r, sp.num_vertices())).1;
        let s = root.apply_real(&u).unwrap();
        let g = sp.norm_covector(&op.pair().gradient(&u));
        assert!((vertex_norm(sp, &s) - g).abs() < 1e-10 * g);

        let four = make_operator(
            sp.clone(),
            op.pair().clone(),
            CoefficientField::scaled_identity(sp.num_triangles(), 4.0).unwrap(),
            None,
        )
        .unwrap();
        let s4 = sqrt_op(&four).unwrap().apply_real(&u).unwrap();
        for (a, b) in s4.iter().zip(&s) {
            assert!((a - 2.0 * b).norm() < 1e-10 * g);
        }
    }

    #[test]
    fn dirac_block_structure() {
        let mesh = build_icosphere(0).unwrap();
        let (sp, pr) = assemble(&mesh, &RoughMetric::induced(&mesh), MassKind::Consistent).unwrap();
        let block = DiracBlock::new(Arc::new(sp), Arc::new(pr));
        let g = block.dense_gamma();
        let gs = block.dense_gamma_star();
        assert_eq!(max_abs(&(&g * &g)), 0.0);
        assert_eq!(max_abs(&(&gs * &gs)), 0.0);
        let gram = block.gram();
        let gc = Mat::from_fn(gram.nrows(), gram.ncols(), |i, j| c64::new(gram[(i, j)], 0.0));
        let pi = block.dense_pi();
        let gp = &gc * &pi;
        let asym = &gp - gp.adjoint();
        assert!(max_abs(&asym) < 1e-12 * max_abs(&gp));
    }

    #[test]
    fn kato_ratio_for_identity_coefficients_is_one() {
        let op = sphere_laplacian(1);
        let mesh = build_icosphere(1).unwrap();
        let spec = fem::eigensolve(&op, 12).unwrap();
        let mut probes = probe_set(op.spaces(), &spec, 10, 4, 9);
        probes.push(vec![1.0; mesh.num_vertices()]);
        let k = kato_ratio(&op, &probes).unwrap();
        assert_eq!(k.skipped, 1);
        assert!((k.c_low - 1.0).abs() < 1e-10 && (k.c_high - 1.0).abs() < 1e-10, "{k:?}");
    }

    #[test]
    fn identity_perturbation_has_closed_form_difference() {
        let op = sphere_laplacian(1);
        let spec = fem::eigensolve(&op, 4).unwrap();
        let probes = probe_set(op.spaces(), &spec, 3, 2, 1);
        let eps = 0.05;
        let dir = Perturbation::identity(op.coefficients().len());
        let sweep = lipschitz_sweep(&op, &dir, &[0.0, eps], &probes).unwrap();
        assert_eq!(sweep.rows[0].lipschitz_ratio, 0.0);
        let want = ((1.0 + eps).sqrt() - 1.0f64).abs();
        assert!((sweep.rows[1].lipschitz_ratio - want).abs() < 1e-10, "{sweep:?}");
        assert!(lipschitz_sweep(&op, &dir, &[1.5], &probes).is_err());
    }

    #[test]
    fn shipped_psi_functions_satisfy_their_decay_bound() {
        for psi in PsiFunction::shipped() {
            let c = psi.decay_constant(1.0);
            assert!(c.is_finite() && c < 10.0, "{}: {c}", psi.name());
        }
    }
}
