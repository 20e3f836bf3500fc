//! Heat kernels by truncated eigen-expansion with a certified truncation time, or by
//! uniformization when exact positivity matters.

use std::io::Write;

use faer::Mat;

use crate::error::{Error, Result};
use crate::fem::{self, EllipticOperator, MassKind, SpectralDecomposition};
use crate::mesh::TriangleMesh;
use crate::sparse::Csr;

/// Relative size of the discarded tail, measured against the diagonal value.
pub const TAIL_TOL: f64 = 1e-8;

/// How kernel values are evaluated.
#[derive(Debug, Clone)]
enum Evaluation {
    /// Truncated eigen-expansion.
    Spectral {
        spec: SpectralDecomposition,
        /// Recovered frame derivatives of every mode, `2n x K`.
        mode_derivatives: Mat<f64>,
    },
    /// `exp(-t M⁻¹K)` by uniformization of a lumped-mass generator with nonnegative
    /// off-diagonal rates: every series term is nonnegative, so kernel values are
    /// nonnegative to the last bit instead of suffering cancellation.
    Uniformized {
        /// `N = s I − M⁻¹K`, entrywise nonnegative.
        jump: Csr,
        rate: f64,
        recovery: Csr,
    },
}

#[derive(Debug, Clone)]
pub struct HeatKernel {
    eval: Evaluation,
    vertex_weights: Vec<f64>,
    t_min: f64,
}

/// `y ↦ ρ_t(x, y)`.
#[derive(Debug, Clone)]
pub struct KernelSlice {
    pub x: usize,
    pub t: f64,
    pub values: Vec<f64>,
}

impl KernelSlice {
    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "y_vertex,value")?;
        for (y, v) in self.values.iter().enumerate() {
            writeln!(w, "{y},{v:.17e}")?;
        }
        Ok(())
    }
}

impl HeatKernel {
    /// Expands the kernel of `op` (a self-adjoint operator, typically the Laplacian of the
    /// metric whose measure is `op`'s mass form) in its lowest `modes` eigenpairs; `None`
    /// keeps the full spectrum.
    pub fn new(mesh: &TriangleMesh, op: &EllipticOperator, modes: Option<usize>) -> Result<Self> {
        let n = op.num_vertices();
        let k = modes.unwrap_or(n).min(n);
        let spec = fem::eigensolve(op, k)?;
        Self::from_spectrum(mesh, op, spec)
    }

    pub fn from_spectrum(mesh: &TriangleMesh, op: &EllipticOperator, spec: SpectralDecomposition) -> Result<Self> {
        let spaces = op.spaces();
        let n = spaces.num_vertices();
        if spec.vectors().nrows() != n || mesh.num_vertices() != n {
            return Err(Error::DimensionMismatch("spectrum does not match the mesh".into()));
        }
        let weights = spaces.vertex_weights();
        let complete = spec.count() == n;
        // Σ_k φ_k(x)² = (M⁻¹)_xx for the full basis; the consistent element mass
        // dominates a quarter of the lumped one.
        let min_w = weights.iter().copied().fold(f64::INFINITY, f64::min);
        let diag_bound = match spaces.mass_kind() {
            MassKind::Lumped => 1.0 / min_w,
            MassKind::Consistent => 4.0 / min_w,
        };
        let t_min = if complete {
            0.0
        } else {
            let lam = *spec.values().last().unwrap();
            let ratio = diag_bound * spaces.total_measure() / TAIL_TOL;
            (ratio.ln() / lam).max(0.0)
        };
        let r = fem::vertex_derivative_matrix(mesh);
        let mut mode_derivatives = Mat::zeros(2 * n, spec.count());
        for k in 0..spec.count() {
            let d = r.matvec(&spec.vector(k));
            for (i, v) in d.into_iter().enumerate() {
                mode_derivatives[(i, k)] = v;
            }
        }
        Ok(Self {
            eval: Evaluation::Spectral { spec, mode_derivatives },
            vertex_weights: weights.to_vec(),
            t_min,
        })
    }

    /// Exact-positivity evaluation for a lumped-mass operator whose stiffness has no
    /// positive off-diagonal entries (non-obtuse triangles in the metric).
    ///
    /// Nothing is truncated, so `t_min` is zero.
    pub fn uniformized(mesh: &TriangleMesh, op: &EllipticOperator) -> Result<Self> {
        let spaces = op.spaces();
        let n = spaces.num_vertices();
        if mesh.num_vertices() != n {
            return Err(Error::DimensionMismatch("operator does not match the mesh".into()));
        }
        if spaces.mass_kind() != MassKind::Lumped {
            return Err(Error::InvalidMetric("uniformized kernels need the lumped mass".into()));
        }
        let k = op.stiffness()?;
        let w = spaces.vertex_weights();
        let diag = k.diagonal();
        let scale = diag.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        let mut triplets = Vec::with_capacity(k.nnz());
        let mut rate = 0.0f64;
        for (i, d) in diag.iter().enumerate() {
            rate = rate.max(d / w[i]);
        }
        for (i, j, v) in k.triplets() {
            if i != j {
                if v > 1e-12 * scale {
                    return Err(Error::InvalidMetric(format!(
                        "stiffness entry ({i}, {j}) = {v:.3e} is positive; uniformization needs non-obtuse triangles"
                    )));
                }
                if v < 0.0 {
                    triplets.push((i, j, -v / w[i]));
                }
            }
        }
        for (i, d) in diag.iter().enumerate() {
            triplets.push((i, i, rate - d / w[i]));
        }
        Ok(Self {
            eval: Evaluation::Uniformized {
                jump: Csr::from_triplets(n, n, &triplets),
                rate,
                recovery: fem::vertex_derivative_matrix(mesh),
            },
            vertex_weights: w.to_vec(),
            t_min: 0.0,
        })
    }

    /// The eigen-expansion, when the kernel is evaluated from one.
    pub fn spectrum(&self) -> Option<&SpectralDecomposition> {
        match &self.eval {
            Evaluation::Spectral { spec, .. } => Some(spec),
            Evaluation::Uniformized { .. } => None,
        }
    }

    pub fn is_uniformized(&self) -> bool {
        matches!(self.eval, Evaluation::Uniformized { .. })
    }

    /// Number of modes kept; the full dimension for uniformized kernels.
    pub fn modes(&self) -> usize {
        self.spectrum().map_or(self.num_vertices(), |s| s.count())
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn num_vertices(&self) -> usize {
        self.vertex_weights.len()
    }

    /// Raises `t_min` so that every slice is nonnegative at each `t` in `grid` not below it.
    ///
    /// Scans the grid downward and stops at the first time with a negative value.
    pub fn certify_positivity(&mut self, grid: &[f64]) -> f64 {
        let mut sorted: Vec<f64> = grid.iter().copied().filter(|&t| t >= self.t_min).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let mut certified = f64::INFINITY;
        for &t in &sorted {
            if self.all_pairs_min(t) < 0.0 {
                break;
            }
            certified = t;
        }
        self.t_min = self.t_min.max(certified);
        self.t_min
    }

    /// Smallest `ρ_t(x, y)` over all vertex pairs.
    pub fn all_pairs_min(&self, t: f64) -> f64 {
        match &self.eval {
            Evaluation::Spectral { spec, .. } => {
                let phi = spec.vectors();
                let scaled = Mat::from_fn(phi.nrows(), phi.ncols(), |i, k| phi[(i, k)] * (-spec.values()[k] * t).exp());
                let full = &scaled * phi.transpose();
                let mut m = f64::INFINITY;
                for j in 0..full.ncols() {
                    for i in 0..full.nrows() {
                        m = m.min(full[(i, j)]);
                    }
                }
                m
            }
            Evaluation::Uniformized { .. } => (0..self.num_vertices())
                .map(|x| self.slice_values(x, t).into_iter().fold(f64::INFINITY, f64::min))
                .fold(f64::INFINITY, f64::min),
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t > 0.0) || t < self.t_min {
            return Err(Error::Truncation { t, t_min: self.t_min });
        }
        Ok(())
    }

    fn check_vertex(&self, x: usize) -> Result<()> {
        if x >= self.num_vertices() {
            return Err(Error::OutOfRange(format!("vertex {x}")));
        }
        Ok(())
    }

    /// `ρ_t(x, ·) = Σ e^{-λ_k t} φ_k(x) φ_k(·)`.
    pub fn kernel_slice(&self, x: usize, t: f64) -> Result<KernelSlice> {
        self.check_time(t)?;
        self.check_vertex(x)?;
        Ok(KernelSlice {
            x,
            t,
            values: self.slice_values(x, t),
        })
    }

    fn slice_values(&self, x: usize, t: f64) -> Vec<f64> {
        match &self.eval {
            Evaluation::Spectral { spec, .. } => {
                let phi = spec.vectors();
                let coeffs: Vec<f64> = (0..spec.count())
                    .map(|k| (-spec.values()[k] * t).exp() * phi[(x, k)])
                    .collect();
                combine(phi, &coeffs)
            }
            Evaluation::Uniformized { jump, rate, .. } => {
                let mut e = vec![0.0; self.num_vertices()];
                e[x] = 1.0 / self.vertex_weights[x];
                propagate(jump, *rate, t, e)
            }
        }
    }

    /// `η_{t,x,v} = d_x ρ_t(x, ·)(v)` with `v` in the vertex frame at `x`.
    pub fn kernel_x_derivative(&self, x: usize, v: [f64; 2], t: f64) -> Result<Vec<f64>> {
        self.check_time(t)?;
        self.check_vertex(x)?;
        if v == [0.0, 0.0] {
            return Ok(vec![0.0; self.num_vertices()]);
        }
        Ok(match &self.eval {
            Evaluation::Spectral { spec, mode_derivatives: d } => {
                let coeffs: Vec<f64> = (0..spec.count())
                    .map(|k| (-spec.values()[k] * t).exp() * (v[0] * d[(2 * x, k)] + v[1] * d[(2 * x + 1, k)]))
                    .collect();
                combine(spec.vectors(), &coeffs)
            }
            Evaluation::Uniformized { jump, rate, recovery } => {
                // ρ_t is symmetric, so η = ρ_t r with r the recovery row at x paired with v.
                let mut load = vec![0.0; self.num_vertices()];
                for (z, c) in recovery.row(2 * x) {
                    load[z] += v[0] * c;
                }
                for (z, c) in recovery.row(2 * x + 1) {
                    load[z] += v[1] * c;
                }
                for (l, w) in load.iter_mut().zip(&self.vertex_weights) {
                    *l /= w;
                }
                propagate(jump, *rate, t, load)
            }
        })
    }

    /// `∫ f dμ` for the kernel's measure.
    pub fn integral(&self, f: &[f64]) -> f64 {
        f.iter().zip(&self.vertex_weights).map(|(a, b)| a * b).sum()
    }
}

fn combine(phi: &Mat<f64>, coeffs: &[f64]) -> Vec<f64> {
    (0..phi.nrows())
        .map(|y| coeffs.iter().enumerate().map(|(k, c)| c * phi[(y, k)]).sum())
        .collect()
}

/// Largest `s·τ` per substep; `e^{-30}` is far from underflow and the series stays short.
const UNIFORMIZATION_STEP: f64 = 30.0;

/// `exp(t (N - s I)) u` as `e^{-sτ} Σ (sτ)^k/k! (N/s)^k u` over equal substeps.
fn propagate(jump: &Csr, rate: f64, t: f64, mut u: Vec<f64>) -> Vec<f64> {
    if rate <= 0.0 {
        return u;
    }
    let steps = (rate * t / UNIFORMIZATION_STEP).ceil().max(1.0) as usize;
    let tau = t / steps as f64;
    let st = rate * tau;
    let decay = (-st).exp();
    for _ in 0..steps {
        let mut term = u.clone();
        let mut sum = u.clone();
        let mut k = 1usize;
        loop {
            let next = jump.matvec(&term);
            let f = tau / k as f64;
            let mut term_norm = 0.0f64;
            for (a, b) in term.iter_mut().zip(&next) {
                *a = b * f;
                term_norm += a.abs();
            }
            let sum_norm: f64 = sum.iter().map(|a| a.abs()).sum();
            for (s, a) in sum.iter_mut().zip(&term) {
                *s += a;
            }
            k += 1;
            if (k as f64) > st && term_norm <= 1e-18 * sum_norm {
                break;
            }
        }
        for s in &mut sum {
            *s *= decay;
        }
        u = sum;
    }
    u
}

/// Recovered vertex derivatives `du(f_k)` for every vertex, as a `2n` vector.
pub fn recovered_derivative(mesh: &TriangleMesh, u: &[f64]) -> Vec<f64> {
    let r: Csr = fem::vertex_derivative_matrix(mesh);
    r.matvec(u)
}
