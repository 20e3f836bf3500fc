//! P1 finite elements: mass forms, gradient/divergence, weighted elliptic operators
//! and their spectra.
//!
//! Vertex functions are piecewise linear. Covector fields are constant per triangle
//! and stored as two coordinates per triangle in a frame that is orthonormal for the
//! triangle's metric, so the covector mass form is diagonal.

use std::sync::Arc;

use faer::linalg::triangular_solve::{solve_lower_triangular_in_place, solve_upper_triangular_in_place};
use faer::{c64, Mat, Par, Side};
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mesh::{MetricPair, RoughMetric, TriangleMesh};
use crate::rng::{self, SmoothField};
use crate::sparse::{self, Csr, SpdFactor};
use crate::tensor::{CMat2, Sym2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MassKind {
    #[default]
    Consistent,
    Lumped,
}

/// The two Hilbert spaces: vertex functions and per-triangle covectors.
#[derive(Debug, Clone)]
pub struct DiscreteSpaces {
    mass: Csr,
    mass_factor: SpdFactor,
    vertex_weights: Vec<f64>,
    covector_weights: Vec<f64>,
    kind: MassKind,
    total_measure: f64,
}

impl DiscreteSpaces {
    /// Mass forms for triangle measures `weights`.
    pub fn from_triangle_weights(mesh: &TriangleMesh, weights: &[f64], kind: MassKind) -> Result<Self> {
        Self::with_measures(mesh, weights, weights, kind)
    }

    /// Vertex functions integrated against `vertex_measure` and covectors against
    /// `covector_measure`, both given per triangle.
    ///
    /// Distinct measures express a divergence-form operator of one metric on the
    /// function space of another.
    pub fn with_measures(
        mesh: &TriangleMesh,
        vertex_measure: &[f64],
        covector_measure: &[f64],
        kind: MassKind,
    ) -> Result<Self> {
        let nt = mesh.num_triangles();
        if vertex_measure.len() != nt || covector_measure.len() != nt {
            return Err(Error::DimensionMismatch("one measure weight per triangle expected".into()));
        }
        if vertex_measure.iter().chain(covector_measure).any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidMetric("triangle measures must be positive".into()));
        }
        let mut trip = Vec::with_capacity(9 * nt);
        for (t, tri) in mesh.triangles().iter().enumerate() {
            let w = vertex_measure[t];
            for a in 0..3 {
                match kind {
                    MassKind::Consistent => {
                        for b in 0..3 {
                            let f = if a == b { 2.0 } else { 1.0 };
                            trip.push((tri[a], tri[b], w * f / 12.0));
                        }
                    }
                    MassKind::Lumped => trip.push((tri[a], tri[a], w / 3.0)),
                }
            }
        }
        let n = mesh.num_vertices();
        let mass = Csr::from_triplets(n, n, &trip);
        let mass_factor = SpdFactor::new(&mass)?;
        let vertex_weights = mass.matvec(&vec![1.0; n]);
        Ok(Self {
            total_measure: vertex_measure.iter().sum(),
            mass,
            mass_factor,
            vertex_weights,
            covector_weights: covector_measure.to_vec(),
            kind,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.vertex_weights.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.covector_weights.len()
    }

    pub fn mass(&self) -> &Csr {
        &self.mass
    }

    pub fn mass_kind(&self) -> MassKind {
        self.kind
    }

    /// `M 1`, the integration weights of the vertex measure.
    pub fn vertex_weights(&self) -> &[f64] {
        &self.vertex_weights
    }

    /// Measure of each triangle; the covector form is `w_t` times the identity on each block.
    pub fn covector_weights(&self) -> &[f64] {
        &self.covector_weights
    }

    pub fn total_measure(&self) -> f64 {
        self.total_measure
    }

    pub fn apply_mass(&self, u: &[f64]) -> Vec<f64> {
        self.mass.matvec(u)
    }

    pub fn solve_mass(&self, b: &[f64]) -> Vec<f64> {
        self.mass_factor.solve(b)
    }

    pub fn solve_mass_mat(&self, b: &Mat<f64>) -> Mat<f64> {
        self.mass_factor.solve_mat(b)
    }

    pub fn inner_vertex(&self, u: &[f64], v: &[f64]) -> f64 {
        sparse::dot(u, &self.mass.matvec(v))
    }

    pub fn norm_vertex(&self, u: &[f64]) -> f64 {
        self.inner_vertex(u, u).max(0.0).sqrt()
    }

    pub fn inner_covector(&self, w: &[f64], z: &[f64]) -> f64 {
        self.covector_weights
            .iter()
            .enumerate()
            .map(|(t, c)| c * (w[2 * t] * z[2 * t] + w[2 * t + 1] * z[2 * t + 1]))
            .sum()
    }

    pub fn norm_covector(&self, w: &[f64]) -> f64 {
        self.inner_covector(w, w).sqrt()
    }

    /// `∫ u dμ`.
    pub fn integral(&self, u: &[f64]) -> f64 {
        sparse::dot(&self.vertex_weights, u)
    }

    pub fn mean(&self, u: &[f64]) -> f64 {
        self.integral(u) / self.total_measure
    }

    /// Splits `u` into its mean and the mean-zero remainder.
    pub fn split_mean(&self, u: &[f64]) -> (f64, Vec<f64>) {
        let m = self.mean(u);
        (m, u.iter().map(|x| x - m).collect())
    }
}

/// P1 gradient into metric-orthonormal covector coordinates, and its negative adjoint.
#[derive(Debug, Clone)]
pub struct GradDivPair {
    gradient: Csr,
    gradient_t: Csr,
}

impl GradDivPair {
    /// Sparse `(2 nT) x nV` gradient matrix.
    pub fn gradient_matrix(&self) -> &Csr {
        &self.gradient
    }

    pub fn gradient(&self, u: &[f64]) -> Vec<f64> {
        self.gradient.matvec(u)
    }

    /// `Gᵀ W w`: the load vector of `-div w` tested against hat functions.
    pub fn divergence_load(&self, spaces: &DiscreteSpaces, w: &[f64]) -> Vec<f64> {
        let weighted: Vec<f64> = w
            .iter()
            .enumerate()
            .map(|(k, x)| x * spaces.covector_weights[k / 2])
            .collect();
        self.gradient_t.matvec(&weighted)
    }

    /// `div w = -M⁻¹ Gᵀ W w`.
    pub fn divergence(&self, spaces: &DiscreteSpaces, w: &[f64]) -> Vec<f64> {
        let load = self.divergence_load(spaces, w);
        spaces.solve_mass(&load).into_iter().map(|x| -x).collect()
    }
}

/// Barycentric gradients of a triangle in its embedding frame, one column per corner.
pub fn local_gradients(mesh: &TriangleMesh, t: usize) -> [[f64; 3]; 2] {
    let p = mesh.frame(t).coords;
    let twice_area = p[1][0] * p[2][1] - p[2][0] * p[1][1];
    let mut d = [[0.0; 3]; 2];
    for i in 0..3 {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        let e = [p[k][0] - p[j][0], p[k][1] - p[j][1]];
        d[0][i] = -e[1] / twice_area;
        d[1][i] = e[0] / twice_area;
    }
    d
}

/// Builds the mass forms and gradient/divergence pair of `metric` on `mesh`.
pub fn assemble(mesh: &TriangleMesh, metric: &RoughMetric, kind: MassKind) -> Result<(DiscreteSpaces, GradDivPair)> {
    metric.check_mesh(mesh)?;
    let weights: Vec<f64> = (0..mesh.num_triangles()).map(|t| metric.area(mesh, t)).collect();
    let mean = weights.iter().sum::<f64>() / weights.len() as f64;
    let threshold = 1e-14 * mean;
    if let Some((index, &area)) = weights.iter().enumerate().find(|(_, &w)| !(w > threshold)) {
        return Err(Error::DegenerateTriangle { index, area, threshold });
    }
    let mut trip = Vec::with_capacity(6 * mesh.num_triangles());
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let d = local_gradients(mesh, t);
        let w = metric.tensor(t).inv_sqrt();
        for c in 0..3 {
            let g = w.apply([d[0][c], d[1][c]]);
            trip.push((2 * t, tri[c], g[0]));
            trip.push((2 * t + 1, tri[c], g[1]));
        }
    }
    let gradient = Csr::from_triplets(2 * mesh.num_triangles(), mesh.num_vertices(), &trip);
    let gradient_t = gradient.transpose();
    let spaces = DiscreteSpaces::from_triangle_weights(mesh, &weights, kind)?;
    Ok((spaces, GradDivPair { gradient, gradient_t }))
}

/// Recovered vertex derivative: row `2x + k` maps `u` to `du(f_k)` at vertex `x`, where
/// `(f_1, f_2)` is [`TriangleMesh::vertex_frame`]. Incident triangle derivatives are
/// averaged with their embedding areas as weights.
pub fn vertex_derivative_matrix(mesh: &TriangleMesh) -> Csr {
    let mut trip = Vec::new();
    for x in 0..mesh.num_vertices() {
        let frame = mesh.vertex_frame(x);
        let tris = mesh.vertex_triangles(x);
        let total: f64 = tris.iter().map(|&t| mesh.frame(t).area).sum();
        for &t in tris {
            let tf = mesh.frame(t);
            let d = local_gradients(mesh, t);
            let s = tf.area / total;
            for k in 0..2 {
                let f = tf.project(frame[k]);
                for c in 0..3 {
                    let val = s * (d[0][c] * f[0] + d[1][c] * f[1]);
                    trip.push((2 * x + k, mesh.triangles()[t][c], val));
                }
            }
        }
    }
    Csr::from_triplets(2 * mesh.num_vertices(), mesh.num_vertices(), &trip)
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientTensors {
    Real(Vec<Sym2>),
    Complex(Vec<CMat2>),
}

/// Per-triangle coefficient acting on metric-orthonormal covector coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField {
    tensors: CoefficientTensors,
    kappa: f64,
    lambda: f64,
}

impl CoefficientField {
    pub fn identity(num_triangles: usize) -> Self {
        Self::real(vec![Sym2::IDENTITY; num_triangles]).expect("identity is elliptic")
    }

    pub fn scaled_identity(num_triangles: usize, s: f64) -> Result<Self> {
        Self::real(vec![Sym2::scaled_identity(s); num_triangles])
    }

    /// Real symmetric field; `kappa` and `Lambda` are the extreme eigenvalues.
    pub fn real(tensors: Vec<Sym2>) -> Result<Self> {
        let mut kappa = f64::INFINITY;
        let mut lambda = 0.0f64;
        for (t, a) in tensors.iter().enumerate() {
            let (l0, l1) = a.eigenvalues();
            if !(l0 > 0.0) || !l1.is_finite() {
                return Err(Error::Ellipticity(format!("triangle {t}: eigenvalues {l0:e}, {l1:e}")));
            }
            kappa = kappa.min(l0);
            lambda = lambda.max(l1);
        }
        Ok(Self {
            tensors: CoefficientTensors::Real(tensors),
            kappa,
            lambda,
        })
    }

    /// General complex field; `kappa` bounds the Hermitian part from below, `Lambda` the norm.
    pub fn complex(tensors: Vec<CMat2>) -> Result<Self> {
        let mut kappa = f64::INFINITY;
        let mut lambda = 0.0f64;
        for (t, b) in tensors.iter().enumerate() {
            let k = b.hermitian_part_min_eig();
            if !(k > 0.0) {
                return Err(Error::Ellipticity(format!("triangle {t}: Re<B u, u> lower bound {k:e}")));
            }
            kappa = kappa.min(k);
            lambda = lambda.max(b.op_norm());
        }
        Ok(Self {
            tensors: CoefficientTensors::Complex(tensors),
            kappa,
            lambda,
        })
    }

    /// Checks declared bounds against the measured ones.
    pub fn with_bounds(self, kappa: f64, lambda: f64) -> Result<Self> {
        let tol = 1e-12 * lambda.abs().max(1.0);
        if self.kappa < kappa - tol {
            return Err(Error::Ellipticity(format!(
                "measured ellipticity {} below declared {kappa}",
                self.kappa
            )));
        }
        if self.lambda > lambda + tol {
            return Err(Error::Ellipticity(format!("measured norm {} above declared {lambda}", self.lambda)));
        }
        Ok(Self { kappa, lambda, ..self })
    }

    /// Seeded smooth real symmetric field with eigenvalues in `[kappa, lambda]`.
    pub fn random_real(mesh: &TriangleMesh, kappa: f64, lambda: f64, seed: u64) -> Result<Self> {
        if !(kappa > 0.0 && lambda >= kappa) {
            return Err(Error::OutOfRange(format!("need 0 < kappa <= Lambda, got {kappa}, {lambda}")));
        }
        let mut r = rng::stream(seed, 11);
        let f: Vec<SmoothField> = (0..3).map(|_| SmoothField::for_mesh(&mut r, mesh)).collect();
        let tensors = (0..mesh.num_triangles())
            .map(|t| {
                let c = mesh.centroid(t);
                let span = lambda - kappa;
                let l0 = kappa + span * 0.5 * (1.0 + f[0].eval(c));
                let l1 = kappa + span * 0.5 * (1.0 + f[1].eval(c));
                Sym2::from_eigen(l0, l1, std::f64::consts::PI * f[2].eval(c))
            })
            .collect();
        Self::real(tensors)?.with_bounds(kappa, lambda)
    }

    /// Seeded smooth complex field `S + sJ + iC` with `Re<Bξ,ξ> ≥ kappa|ξ|²` and `|B| ≤ lambda`.
    pub fn random_complex(mesh: &TriangleMesh, kappa: f64, lambda: f64, seed: u64) -> Result<Self> {
        if !(kappa > 0.0 && lambda >= 2.0 * kappa) {
            return Err(Error::OutOfRange(format!("need 0 < 2 kappa <= Lambda, got {kappa}, {lambda}")));
        }
        let mut r = rng::stream(seed, 12);
        let f: Vec<SmoothField> = (0..6).map(|_| SmoothField::for_mesh(&mut r, mesh)).collect();
        let i = Complex64::new(0.0, 1.0);
        let tensors = (0..mesh.num_triangles())
            .map(|t| {
                let c = mesh.centroid(t);
                let half = 0.5 * lambda;
                let pos = |v: f64| kappa + (half - kappa) * 0.5 * (1.0 + v);
                let s = Sym2::from_eigen(pos(f[0].eval(c)), pos(f[1].eval(c)), std::f64::consts::PI * f[2].eval(c));
                let skew = 0.25 * lambda * f[3].eval(c);
                let im = Sym2::from_eigen(0.25 * lambda * f[4].eval(c), -0.25 * lambda * f[5].eval(c), 0.3);
                let j = CMat2([
                    [Complex64::new(0.0, 0.0), Complex64::new(skew, 0.0)],
                    [Complex64::new(-skew, 0.0), Complex64::new(0.0, 0.0)],
                ]);
                CMat2::from_real(&s).add(&j).add(&CMat2::from_real(&im).scale(i))
            })
            .collect();
        Self::complex(tensors)?.with_bounds(kappa, lambda)
    }

    pub fn tensors(&self) -> &CoefficientTensors {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        match &self.tensors {
            CoefficientTensors::Real(v) => v.len(),
            CoefficientTensors::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn is_real(&self) -> bool {
        matches!(self.tensors, CoefficientTensors::Real(_))
    }

    pub fn as_complex(&self, t: usize) -> CMat2 {
        match &self.tensors {
            CoefficientTensors::Real(v) => CMat2::from_real(&v[t]),
            CoefficientTensors::Complex(v) => v[t],
        }
    }

    /// `self + s * direction`, re-measuring the bounds.
    pub fn perturbed(&self, direction: &CoefficientField, s: f64) -> Result<Self> {
        match (&self.tensors, &direction.tensors) {
            (CoefficientTensors::Real(a), CoefficientTensors::Real(p)) => {
                Self::real(a.iter().zip(p).map(|(x, y)| x.add(&y.scale(s))).collect())
            }
            _ => {
                let n = self.len();
                let s = Complex64::new(s, 0.0);
                Self::complex((0..n).map(|t| self.as_complex(t).add(&direction.as_complex(t).scale(s))).collect())
            }
        }
    }

    /// Maps each tensor through `f` (real fields only).
    pub fn map_real(&self, f: impl Fn(usize, &Sym2) -> Sym2) -> Result<Self> {
        match &self.tensors {
            CoefficientTensors::Real(a) => Self::real(a.iter().enumerate().map(|(t, x)| f(t, x)).collect()),
            CoefficientTensors::Complex(_) => Err(Error::NotSelfAdjoint("expected a real coefficient field".into())),
        }
    }

    /// Largest per-triangle operator-norm difference.
    pub fn sup_distance(&self, other: &CoefficientField) -> f64 {
        (0..self.len())
            .map(|t| {
                let d = self.as_complex(t).add(&other.as_complex(t).scale(Complex64::new(-1.0, 0.0)));
                d.op_norm()
            })
            .fold(0.0, f64::max)
    }
}

/// `u ↦ -b div(A ∇u)`, defined through the form `J_A[u, v] = ⟨A∇u, ∇v⟩`.
#[derive(Debug, Clone)]
pub struct EllipticOperator {
    spaces: Arc<DiscreteSpaces>,
    pair: Arc<GradDivPair>,
    coefficients: CoefficientField,
    multiplier: Option<Vec<Complex64>>,
    stiffness: Option<Csr>,
}

impl EllipticOperator {
    pub fn spaces(&self) -> &Arc<DiscreteSpaces> {
        &self.spaces
    }

    pub fn pair(&self) -> &Arc<GradDivPair> {
        &self.pair
    }

    pub fn coefficients(&self) -> &CoefficientField {
        &self.coefficients
    }

    pub fn multiplier(&self) -> Option<&[Complex64]> {
        self.multiplier.as_deref()
    }

    pub fn num_vertices(&self) -> usize {
        self.spaces.num_vertices()
    }

    /// Real symmetric coefficients and no multiplier.
    pub fn is_self_adjoint(&self) -> bool {
        self.stiffness.is_some() && self.multiplier.is_none()
    }

    /// Stiffness `Gᵀ W A G` for real coefficients.
    pub fn stiffness(&self) -> Result<&Csr> {
        self.stiffness
            .as_ref()
            .ok_or_else(|| Error::NotSelfAdjoint("complex coefficients have no real stiffness matrix".into()))
    }

    /// Dense complex stiffness `K_ij = J_A[φ_j, φ_i]`.
    pub fn stiffness_complex(&self) -> Mat<c64> {
        let n = self.num_vertices();
        let g = self.pair.gradient_matrix();
        let w = self.spaces.covector_weights();
        let mut k = Mat::<c64>::zeros(n, n);
        for t in 0..w.len() {
            let a = self.coefficients.as_complex(t);
            let r0: Vec<(usize, f64)> = g.row(2 * t).collect();
            let r1: Vec<(usize, f64)> = g.row(2 * t + 1).collect();
            let rows = [&r0, &r1];
            for p in 0..2 {
                for q in 0..2 {
                    let apq = a.0[p][q] * w[t];
                    for &(i, gi) in rows[p] {
                        for &(j, gj) in rows[q] {
                            k[(i, j)] += apq * (gi * gj);
                        }
                    }
                }
            }
        }
        k
    }

    /// `J_A[u, u] = ⟨A∇u, ∇u⟩` for real coefficients, computed from the covector side.
    pub fn energy(&self, u: &[f64]) -> Result<f64> {
        let CoefficientTensors::Real(a) = &self.coefficients.tensors else {
            return Err(Error::NotSelfAdjoint("energy needs real coefficients".into()));
        };
        let g = self.pair.gradient(u);
        Ok(self
            .spaces
            .covector_weights()
            .iter()
            .enumerate()
            .map(|(t, w)| w * a[t].quad([g[2 * t], g[2 * t + 1]], [g[2 * t], g[2 * t + 1]]))
            .sum())
    }

    /// `L u = M⁻¹ K u` (real coefficients, no multiplier).
    pub fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        if !self.is_self_adjoint() {
            return Err(Error::NotSelfAdjoint("use the dense complex operator".into()));
        }
        let k = self.stiffness()?;
        Ok(self.spaces.solve_mass(&k.matvec(u)))
    }

    /// Dense complex matrix of `b M⁻¹ K` acting on vertex values.
    pub fn dense_complex(&self) -> Mat<c64> {
        let n = self.num_vertices();
        let k = self.stiffness_complex();
        let mdense = self.spaces.mass().to_dense();
        let lu = Mat::<c64>::from_fn(n, n, |i, j| c64::new(mdense[(i, j)], 0.0));
        let mut out = {
            use faer::prelude::Solve;
            lu.partial_piv_lu().solve(&k)
        };
        if let Some(b) = &self.multiplier {
            for i in 0..n {
                for j in 0..n {
                    out[(i, j)] *= b[i];
                }
            }
        }
        out
    }
}

/// Builds `L_A`, optionally with a scalar multiplier `b` (`Re b > 0`).
pub fn make_operator(
    spaces: Arc<DiscreteSpaces>,
    pair: Arc<GradDivPair>,
    coefficients: CoefficientField,
    multiplier: Option<Vec<Complex64>>,
) -> Result<EllipticOperator> {
    if coefficients.len() != spaces.num_triangles() {
        return Err(Error::DimensionMismatch(format!(
            "{} coefficient tensors for {} triangles",
            coefficients.len(),
            spaces.num_triangles()
        )));
    }
    if let Some(b) = &multiplier {
        if b.len() != spaces.num_vertices() {
            return Err(Error::DimensionMismatch("multiplier length".into()));
        }
        if let Some(i) = b.iter().position(|z| !(z.re > 0.0)) {
            return Err(Error::Ellipticity(format!("multiplier at vertex {i} has Re b = {}", b[i].re)));
        }
    }
    let stiffness = match &coefficients.tensors {
        CoefficientTensors::Real(a) => Some(real_stiffness(&spaces, &pair, a)),
        CoefficientTensors::Complex(_) => None,
    };
    let op = EllipticOperator {
        spaces,
        pair,
        coefficients,
        multiplier,
        stiffness,
    };
    if op.stiffness.is_some() {
        check_garding(&op)?;
    }
    Ok(op)
}

fn real_stiffness(spaces: &DiscreteSpaces, pair: &GradDivPair, a: &[Sym2]) -> Csr {
    let g = pair.gradient_matrix();
    let w = spaces.covector_weights();
    let mut trip = Vec::with_capacity(9 * a.len());
    for (t, at) in a.iter().enumerate() {
        let r0: Vec<(usize, f64)> = g.row(2 * t).collect();
        let r1: Vec<(usize, f64)> = g.row(2 * t + 1).collect();
        for c in 0..r0.len() {
            for d in 0..r0.len() {
                let gi = [r0[c].1, r1[c].1];
                let gj = [r0[d].1, r1[d].1];
                trip.push((r0[c].0, r0[d].0, w[t] * at.quad(gi, gj)));
            }
        }
    }
    let n = spaces.num_vertices();
    Csr::from_triplets(n, n, &trip)
}

fn check_garding(op: &EllipticOperator) -> Result<()> {
    let mut r = rng::stream(0x6a5d, 0);
    let k = op.stiffness()?;
    for _ in 0..4 {
        let u: Vec<f64> = (0..op.num_vertices()).map(|_| r.gen::<f64>() - 0.5).collect();
        let form = sparse::dot(&u, &k.matvec(&u));
        let grad = op.pair.gradient(&u);
        let g2 = op.spaces.inner_covector(&grad, &grad);
        if form < op.coefficients.kappa * g2 * (1.0 - 1e-10) {
            return Err(Error::Ellipticity(format!(
                "form {form:e} below kappa * |grad u|^2 = {:e}",
                op.coefficients.kappa * g2
            )));
        }
    }
    Ok(())
}

/// Eigenpairs of `K φ = λ M φ`, orthonormal in the vertex mass form.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    values: Vec<f64>,
    vectors: Mat<f64>,
    total_measure: f64,
    max_residual: f64,
}

impl SpectralDecomposition {
    pub fn count(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `n x count`, column `k` is `φ_k`.
    pub fn vectors(&self) -> &Mat<f64> {
        &self.vectors
    }

    pub fn vector(&self, k: usize) -> Vec<f64> {
        self.vectors.col(k).iter().copied().collect()
    }

    pub fn lambda1(&self) -> f64 {
        self.values.get(1).copied().unwrap_or(f64::NAN)
    }

    pub fn total_measure(&self) -> f64 {
        self.total_measure
    }

    /// Largest relative residual `‖Kφ − λMφ‖_{M⁻¹} / (λ‖φ‖_M)` over nonzero modes.
    pub fn max_residual(&self) -> f64 {
        self.max_residual
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EigenMethod {
    /// Dense below 600 vertices or when most of the spectrum is requested.
    #[default]
    Auto,
    Dense,
    ShiftInvert,
}

pub const EIGEN_RESIDUAL_TOL: f64 = 1e-10;

pub fn eigensolve(op: &EllipticOperator, count: usize) -> Result<SpectralDecomposition> {
    eigensolve_with(op, count, EigenMethod::Auto)
}

pub fn eigensolve_with(op: &EllipticOperator, count: usize, method: EigenMethod) -> Result<SpectralDecomposition> {
    if !op.is_self_adjoint() {
        return Err(Error::NotSelfAdjoint(
            "eigensolve needs real symmetric coefficients and no multiplier".into(),
        ));
    }
    let n = op.num_vertices();
    if count == 0 || count > n {
        return Err(Error::OutOfRange(format!("mode count {count} outside [1, {n}]")));
    }
    let k = op.stiffness()?;
    let m = op.spaces.mass();
    let dense = match method {
        EigenMethod::Dense => true,
        EigenMethod::ShiftInvert => false,
        EigenMethod::Auto => n < 600 || 4 * count > n,
    };
    let (mut values, mut vectors) = if dense {
        let (v, x) = generalized_eigen_dense(&k.to_dense(), &m.to_dense())?;
        (v[..count].to_vec(), x.subcols(0, count).to_owned())
    } else {
        shift_invert(k, m, count)?
    };
    // the constant mode is known exactly
    let mu = op.spaces.total_measure();
    values[0] = 0.0;
    let c = 1.0 / mu.sqrt();
    for i in 0..n {
        vectors[(i, 0)] = c;
    }
    let mut max_residual = 0.0f64;
    for j in 1..count {
        let phi: Vec<f64> = vectors.col(j).iter().copied().collect();
        let mut r = k.matvec(&phi);
        sparse::axpy(&mut r, -values[j], &m.matvec(&phi));
        let dual = sparse::dot(&r, &op.spaces.solve_mass(&r)).max(0.0).sqrt();
        let rel = dual / (values[j].abs() * op.spaces.norm_vertex(&phi));
        max_residual = max_residual.max(rel);
    }
    if values.len() > 1 && values[1] < 1e-12 {
        return Err(Error::Unresolved(format!("second eigenvalue {:e} is not separated from zero", values[1])));
    }
    if max_residual > EIGEN_RESIDUAL_TOL {
        return Err(Error::Eigen(format!("relative residual {max_residual:e}")));
    }
    Ok(SpectralDecomposition {
        values,
        vectors,
        total_measure: mu,
        max_residual,
    })
}

/// Full dense solve of `K x = λ M x` with `M` symmetric positive definite.
pub fn generalized_eigen_dense(k: &Mat<f64>, m: &Mat<f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let n = k.nrows();
    let llt = m
        .llt(Side::Lower)
        .map_err(|e| Error::Eigen(format!("mass form is not positive definite: {e:?}")))?;
    let l = llt.L();
    let mut x = k.clone();
    solve_lower_triangular_in_place(l, x.as_mut(), Par::Seq);
    let mut c = x.transpose().to_owned();
    solve_lower_triangular_in_place(l, c.as_mut(), Par::Seq);
    let c = Mat::from_fn(n, n, |i, j| 0.5 * (c[(i, j)] + c[(j, i)]));
    let evd = c
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    let values: Vec<f64> = (0..n).map(|i| evd.S()[i]).collect();
    let mut vectors = evd.U().to_owned();
    solve_upper_triangular_in_place(l.transpose(), vectors.as_mut(), Par::Seq);
    Ok((values, vectors))
}

fn m_orthonormalize(x: &mut Mat<f64>, m: &Csr) {
    let p = x.ncols();
    for _ in 0..2 {
        for j in 0..p {
            let mut v: Vec<f64> = x.col(j).iter().copied().collect();
            let mv = m.matvec(&v);
            for i in 0..j {
                let q: Vec<f64> = x.col(i).iter().copied().collect();
                let h = sparse::dot(&q, &mv);
                sparse::axpy(&mut v, -h, &q);
            }
            let nrm = sparse::dot(&v, &m.matvec(&v)).sqrt();
            for (i, vi) in v.iter().enumerate() {
                x[(i, j)] = vi / nrm;
            }
        }
    }
}

/// Subspace iteration with `(K + σM)⁻¹ M` and Rayleigh–Ritz on a widened block.
fn shift_invert(k: &Csr, m: &Csr, count: usize) -> Result<(Vec<f64>, Mat<f64>)> {
    let n = k.nrows();
    let p = (2 * count).max(count + 8).min(n);
    let kd = k.diagonal();
    let md = m.diagonal();
    let sigma = kd.iter().sum::<f64>() / md.iter().sum::<f64>() / n as f64;
    let shifted = k.add_scaled(m, sigma);
    let factor = SpdFactor::new(&shifted)?;
    let mut r = rng::stream(0x5eed, 1);
    let mut x = Mat::from_fn(n, p, |_, _| rng::normal(&mut r));
    m_orthonormalize(&mut x, m);
    let mut values = vec![0.0; p];
    for _ in 0..1000 {
        let mx = Mat::from_fn(n, p, |i, j| {
            let col: Vec<f64> = x.col(j).iter().copied().collect();
            m.row(i).map(|(c, v)| v * col[c]).sum::<f64>()
        });
        let mut y = factor.solve_mat(&mx);
        m_orthonormalize(&mut y, m);
        let ky = sparse_times(k, &y);
        let my = sparse_times(m, &y);
        let kr = y.transpose() * &ky;
        let mr = y.transpose() * &my;
        let kr = Mat::from_fn(p, p, |i, j| 0.5 * (kr[(i, j)] + kr[(j, i)]));
        let mr = Mat::from_fn(p, p, |i, j| 0.5 * (mr[(i, j)] + mr[(j, i)]));
        let (vals, z) = generalized_eigen_dense(&kr, &mr)?;
        x = &y * &z;
        values = vals;
        let kx = sparse_times(k, &x);
        let mxx = sparse_times(m, &x);
        let mut worst = 0.0f64;
        for j in 1..count {
            let res: Vec<f64> = (0..n).map(|i| kx[(i, j)] - values[j] * mxx[(i, j)]).collect();
            let nrm: f64 = (0..n).map(|i| x[(i, j)] * mxx[(i, j)]).sum::<f64>().sqrt();
            let scale = values[j].abs().max(1e-300) * nrm;
            // Euclidean residual against the mass-diagonal scale as a cheap proxy
            let approx = sparse::norm(&res) / (scale * md.iter().cloned().fold(0.0, f64::max).sqrt());
            worst = worst.max(approx);
        }
        if worst < 1e-2 * EIGEN_RESIDUAL_TOL {
            break;
        }
    }
    Ok((values[..count].to_vec(), x.subcols(0, count).to_owned()))
}

fn sparse_times(a: &Csr, x: &Mat<f64>) -> Mat<f64> {
    let mut out = Mat::zeros(a.nrows(), x.ncols());
    for j in 0..x.ncols() {
        let col: Vec<f64> = x.col(j).iter().copied().collect();
        let y = a.matvec(&col);
        for (i, v) in y.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

/// Sharp constant `1/√λ₁` in `‖u − mean u‖ ≤ C ‖∇u‖`.
pub fn poincare_constant(spec: &SpectralDecomposition) -> Result<f64> {
    let l1 = spec.lambda1();
    if !(l1 >= 1e-12) {
        return Err(Error::Unresolved(format!("lambda_1 = {l1:e}")));
    }
    Ok(1.0 / l1.sqrt())
}

/// `mean(u) 1 ⊥ (u − mean(u))` check; returns the pair and their mass inner product.
pub fn orthogonal_split(spaces: &DiscreteSpaces, u: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let (m, rest) = spaces.split_mean(u);
    let c = vec![m; u.len()];
    let ip = spaces.inner_vertex(&c, &rest);
    (c, rest, ip)
}

/// Convenience: background spaces, pair and Laplacian of `metric`.
pub fn laplacian(mesh: &TriangleMesh, metric: &RoughMetric, kind: MassKind) -> Result<EllipticOperator> {
    let (s, p) = assemble(mesh, metric, kind)?;
    make_operator(Arc::new(s), Arc::new(p), CoefficientField::identity(mesh.num_triangles()), None)
}

/// Laplacian of `pair.metric_b` written as `θ⁻¹ div_a θ B⁻¹ ∇` on the gradient of
/// `pair.metric_a`, with functions integrated against `θ μ_a`.
///
/// Agrees with [`laplacian`] of the second metric up to roundoff.
pub fn divergence_form_laplacian(mesh: &TriangleMesh, pair: &MetricPair, kind: MassKind) -> Result<EllipticOperator> {
    let (background, grad) = assemble(mesh, &pair.metric_a, kind)?;
    let area_a = background.covector_weights();
    let weighted: Vec<f64> = area_a.iter().zip(&pair.theta).map(|(w, th)| w * th).collect();
    let spaces = DiscreteSpaces::with_measures(mesh, &weighted, area_a, kind)?;
    let coeff = CoefficientField::real((0..mesh.num_triangles()).map(|t| pair.divergence_coefficient(t)).collect())?;
    make_operator(Arc::new(spaces), Arc::new(grad), coeff, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_flat_torus, build_icosphere, build_tetrahedron};

    fn setup(s: u32) -> (TriangleMesh, DiscreteSpaces, GradDivPair) {
        let mesh = build_icosphere(s).unwrap();
        let g = RoughMetric::induced(&mesh);
        let (sp, pr) = assemble(&mesh, &g, MassKind::Consistent).unwrap();
        (mesh, sp, pr)
    }

    #[test]
    fn gradient_kills_constants() {
        let (mesh, _, pair) = setup(1);
        let g = pair.gradient(&vec![3.5; mesh.num_vertices()]);
        assert!(g.iter().all(|x| x.abs() < 1e-13));
    }

    #[test]
    fn linear_function_on_flat_triangle() {
        let mesh = build_flat_torus(4, 4.0).unwrap();
        let (_, pair) = assemble(&mesh, &RoughMetric::induced(&mesh), MassKind::Consistent).unwrap();
        // x-coordinate is linear on the first triangle (no wrap)
        let u: Vec<f64> = mesh.vertices().iter().map(|p| p[0]).collect();
        let g = pair.gradient(&u);
        let f = mesh.frame(0);
        let ambient = [g[0] * f.e1[0] + g[1] * f.e2[0], g[0] * f.e1[1] + g[1] * f.e2[1]];
        assert!((ambient[0] - 1.0).abs() < 1e-14 && ambient[1].abs() < 1e-14);
    }

    #[test]
    fn scaled_identity_scales_stiffness() {
        let (_, sp, pr) = setup(1);
        let (sp, pr) = (Arc::new(sp), Arc::new(pr));
        let nt = sp.num_triangles();
        let l1 = make_operator(sp.clone(), pr.clone(), CoefficientField::identity(nt), None).unwrap();
        let l2 = make_operator(sp, pr, CoefficientField::scaled_identity(nt, 2.0).unwrap(), None).unwrap();
        let d = l2.stiffness().unwrap().add_scaled(l1.stiffness().unwrap(), -2.0);
        assert!(d.triplets().all(|(_, _, v)| v.abs() < 1e-13));
    }

    #[test]
    fn tetrahedron_spectrum_dense_vs_shift_invert() {
        let mesh = build_tetrahedron().unwrap();
        let op = laplacian(&mesh, &RoughMetric::induced(&mesh), MassKind::Consistent).unwrap();
        let a = eigensolve_with(&op, 4, EigenMethod::Dense).unwrap();
        let b = eigensolve_with(&op, 2, EigenMethod::ShiftInvert).unwrap();
        assert_eq!(a.values()[0], 0.0);
        assert!((a.values()[1] - b.values()[1]).abs() < 1e-10 * a.values()[1]);
    }

    #[test]
    fn shift_invert_matches_dense() {
        let (mesh, _, _) = setup(3);
        let op = laplacian(&mesh, &RoughMetric::induced(&mesh), MassKind::Consistent).unwrap();
        let a = eigensolve_with(&op, 10, EigenMethod::Dense).unwrap();
        let b = eigensolve_with(&op, 10, EigenMethod::ShiftInvert).unwrap();
        for k in 0..10 {
            assert!((a.values()[k] - b.values()[k]).abs() <= 1e-9 * a.values()[k].max(1.0), "{k}");
        }
        assert!(b.max_residual() <= EIGEN_RESIDUAL_TOL);
    }

    #[test]
    fn rejects_nonelliptic_and_mismatch() {
        let (_, sp, pr) = setup(0);
        let bad = CoefficientField::real(vec![Sym2::new(1.0, 0.0, -1.0); sp.num_triangles()]);
        assert!(matches!(bad, Err(Error::Ellipticity(_))));
        let short = CoefficientField::identity(3);
        assert!(make_operator(Arc::new(sp), Arc::new(pr), short, None).is_err());
    }
}
