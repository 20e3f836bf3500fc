//! Heat-kernel metric flow: per vertex and direction, a weighted elliptic problem
//! whose solution paired with the kernel derivative gives the evolved metric `g_t`.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fem::{self, CoefficientField, DiscreteSpaces, EllipticOperator, GradDivPair, MassKind};
use crate::heat::HeatKernel;
use crate::mesh::{MetricPair, TriangleMesh};
use crate::solver::{self, Measure, SolverOptions};
use crate::sparse::{self, SpdFactor};
use crate::tensor::{self, Sym2, Vec3};

/// Relative agreement demanded between the pairing and integral forms, and of `g12` with `g21`.
pub const FORM_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub t_values: Vec<f64>,
    pub nonsingular: Vec<usize>,
    pub frames: Vec<[Vec3; 2]>,
}

impl FlowConfig {
    /// `N` is every vertex farther than `exclusion_rings` edges from a declared singular vertex.
    pub fn new(mesh: &TriangleMesh, t_values: Vec<f64>, exclusion_rings: usize) -> Result<Self> {
        if t_values.is_empty() || t_values.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(Error::OutOfRange("flow times must be positive and finite".into()));
        }
        let nonsingular = mesh.nonsingular_interior(exclusion_rings.max(usize::from(!mesh.singular().is_empty())));
        if nonsingular.is_empty() {
            return Err(Error::OutOfRange("non-singular set is empty".into()));
        }
        let frames = (0..mesh.num_vertices()).map(|v| mesh.vertex_frame(v)).collect();
        Ok(Self {
            t_values,
            nonsingular,
            frames,
        })
    }

    pub fn check_times(&self, hk: &HeatKernel) -> Result<()> {
        match self.t_values.iter().find(|&&t| t < hk.t_min()) {
            Some(&t) => Err(Error::Truncation { t, t_min: hk.t_min() }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowSolution {
    pub x: usize,
    pub v: [f64; 2],
    pub t: f64,
    pub phi: Vec<f64>,
    pub eta: Vec<f64>,
    /// Relative residual of the discrete equation.
    pub residual: f64,
}

/// `g_t(x)` in the vertex frame, with the diagnostics of its computation.
#[derive(Debug, Clone, Copy)]
pub struct MetricSample {
    pub x: usize,
    pub t: f64,
    /// Pairing form `⟨η_i, φ_j⟩`, symmetrized.
    pub tensor: Sym2,
    /// Integral form `∫ g̃(∇φ_i, ∇φ_j) ρ_t(x, ·) dμ_g̃`.
    pub integral: Sym2,
    /// `|g12 − g21|` relative to the trace.
    pub asymmetry: f64,
    /// Largest entry difference of the two forms relative to the trace.
    pub form_gap: f64,
    /// Smallest kernel value in the slice.
    pub kernel_min: f64,
}

/// Everything the per-vertex problems share.
pub struct GmFlow<'a> {
    mesh: &'a TriangleMesh,
    pair: &'a MetricPair,
    hk: &'a HeatKernel,
    cfg: FlowConfig,
    spaces_a: Arc<DiscreteSpaces>,
    grad_a: Arc<GradDivPair>,
    spaces_b: DiscreteSpaces,
    grad_b: GradDivPair,
    measure_b: Measure,
    symbolic: faer::sparse::linalg::solvers::SymbolicLlt<usize>,
}

impl<'a> GmFlow<'a> {
    /// `hk` must be the heat kernel of the second metric of `pair` (its measure is `μ_g̃`).
    pub fn new(
        mesh: &'a TriangleMesh,
        pair: &'a MetricPair,
        hk: &'a HeatKernel,
        cfg: FlowConfig,
        mass: MassKind,
    ) -> Result<Self> {
        if hk.num_vertices() != mesh.num_vertices() {
            return Err(Error::DimensionMismatch("heat kernel and mesh differ".into()));
        }
        cfg.check_times(hk)?;
        let (sa, ga) = fem::assemble(mesh, &pair.metric_a, mass)?;
        let (sb, gb) = fem::assemble(mesh, &pair.metric_b, mass)?;
        let measure_b = Measure::of(&sb);
        let (sa, ga) = (Arc::new(sa), Arc::new(ga));
        let probe = fem::make_operator(sa.clone(), ga.clone(), CoefficientField::identity(mesh.num_triangles()), None)?;
        let symbolic = SpdFactor::symbolic(&solver::pinned(probe.stiffness()?).0)?;
        Ok(Self {
            mesh,
            pair,
            hk,
            cfg,
            spaces_a: sa,
            grad_a: ga,
            spaces_b: sb,
            grad_b: gb,
            measure_b,
            symbolic,
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn measure(&self) -> &Measure {
        &self.measure_b
    }

    fn triangle_average(&self, rho: &[f64]) -> Vec<f64> {
        self.mesh
            .triangles()
            .iter()
            .map(|&[a, b, c]| (rho[a] + rho[b] + rho[c]) / 3.0)
            .collect()
    }

    /// Coefficient `ρ_t(x, ·) θ B⁻¹` on the background covectors.
    pub fn coefficient(&self, rho: &[f64]) -> Result<CoefficientField> {
        let avg = self.triangle_average(rho);
        CoefficientField::real(
            (0..self.mesh.num_triangles())
                .map(|t| self.pair.divergence_coefficient(t).scale(avg[t]))
                .collect(),
        )
    }

    fn operator(&self, x: usize, t: f64) -> Result<(EllipticOperator, Vec<f64>, f64)> {
        if !self.cfg.nonsingular.binary_search(&x).is_ok() {
            return Err(Error::OutOfRange(format!("vertex {x} is not in the non-singular set")));
        }
        let rho = self.hk.kernel_slice(x, t)?.values;
        let kmin = rho.iter().copied().fold(f64::INFINITY, f64::min);
        if !(kmin > 0.0) {
            return Err(Error::Ellipticity(format!(
                "heat kernel slice at vertex {x}, t = {t} has minimum {kmin:e}"
            )));
        }
        let coeff = self.coefficient(&rho)?;
        let op = fem::make_operator(self.spaces_a.clone(), self.grad_a.clone(), coeff, None)?;
        Ok((op, rho, kmin))
    }

    fn solve_with(&self, op: &EllipticOperator, factor: &SpdFactor, x: usize, v: [f64; 2], t: f64) -> Result<FlowSolution> {
        let eta = self.hk.kernel_x_derivative(x, v, t)?;
        let load = self.spaces_b.apply_mass(&eta);
        let problem = solver::MeanZeroProblem::from_load(op, load, self.measure_b.clone())?;
        let opts = SolverOptions {
            tol: 1e-10,
            ..Default::default()
        };
        let report = solver::pcg(op.stiffness()?, problem.load(), problem.measure(), &opts, |r| {
            solver::remean(&factor.solve(r), &self.measure_b)
        })?;
        Ok(FlowSolution {
            x,
            v,
            t,
            phi: report.u,
            eta,
            residual: report.residual,
        })
    }

    fn factor(&self, op: &EllipticOperator) -> Result<SpdFactor> {
        SpdFactor::with_symbolic(self.symbolic.clone(), &solver::pinned(op.stiffness()?).0)
    }

    /// Solves the continuity equation at `x` in direction `v` (vertex-frame components).
    pub fn solve_continuity(&self, x: usize, v: [f64; 2], t: f64) -> Result<FlowSolution> {
        if v == [0.0, 0.0] {
            let n = self.mesh.num_vertices();
            return Ok(FlowSolution {
                x,
                v,
                t,
                phi: vec![0.0; n],
                eta: vec![0.0; n],
                residual: 0.0,
            });
        }
        let (op, _, _) = self.operator(x, t)?;
        let f = self.factor(&op)?;
        self.solve_with(&op, &f, x, v, t)
    }

    /// `g_t(x)` from the solutions for both frame vectors.
    pub fn assemble_metric(&self, x: usize, t: f64) -> Result<MetricSample> {
        let (op, rho, kmin) = self.operator(x, t)?;
        let f = self.factor(&op)?;
        let s = [
            self.solve_with(&op, &f, x, [1.0, 0.0], t)?,
            self.solve_with(&op, &f, x, [0.0, 1.0], t)?,
        ];
        self.metric_from_solutions(x, t, &s, &rho, kmin)
    }

    fn metric_from_solutions(&self, x: usize, t: f64, s: &[FlowSolution; 2], rho: &[f64], kmin: f64) -> Result<MetricSample> {
        let mut g = [[0.0; 2]; 2];
        for i in 0..2 {
            let m_eta = self.spaces_b.apply_mass(&s[i].eta);
            for j in 0..2 {
                g[i][j] = sparse::dot(&m_eta, &s[j].phi);
            }
        }
        let avg = self.triangle_average(rho);
        let grads = [self.grad_b.gradient(&s[0].phi), self.grad_b.gradient(&s[1].phi)];
        let w = self.spaces_b.covector_weights();
        let mut h = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                h[i][j] = (0..w.len())
                    .map(|k| w[k] * avg[k] * (grads[i][2 * k] * grads[j][2 * k] + grads[i][2 * k + 1] * grads[j][2 * k + 1]))
                    .sum();
            }
        }
        let scale = (g[0][0].abs() + g[1][1].abs()).max(f64::MIN_POSITIVE);
        let asymmetry = (g[0][1] - g[1][0]).abs() / scale;
        if asymmetry > FORM_TOL {
            return Err(Error::Consistency(format!(
                "g_t at vertex {x}, t = {t} is not symmetric (relative gap {asymmetry:e})"
            )));
        }
        let tensor = Sym2::new(g[0][0], 0.5 * (g[0][1] + g[1][0]), g[1][1]);
        let integral = Sym2::new(h[0][0], 0.5 * (h[0][1] + h[1][0]), h[1][1]);
        let form_gap = tensor.max_abs_diff(&integral) / scale;
        Ok(MetricSample {
            x,
            t,
            tensor,
            integral,
            asymmetry,
            form_gap,
            kernel_min: kmin,
        })
    }

    /// `g_t` at every vertex of `N` for every configured time, in parallel over vertices.
    pub fn evolved_metric(&self) -> Result<EvolvedMetric> {
        self.evolved_metric_on(&self.cfg.nonsingular)
    }

    pub fn evolved_metric_on(&self, vertices: &[usize]) -> Result<EvolvedMetric> {
        let mut samples = Vec::with_capacity(self.cfg.t_values.len());
        for &t in &self.cfg.t_values {
            let row: Vec<MetricSample> = vertices
                .par_iter()
                .map(|&x| self.assemble_metric(x, t))
                .collect::<Result<_>>()?;
            samples.push(row);
        }
        Ok(EvolvedMetric {
            t_values: self.cfg.t_values.clone(),
            vertices: vertices.to_vec(),
            samples,
        })
    }

    /// `t ↦ g_t(x)(v, v)` with a polynomial fit; the slope is the fitted derivative
    /// extrapolated to t = 0, to be compared with `−2 Ric(v, v)`.
    pub fn ricci_tangency(&self, x: usize, v: [f64; 2], t_list: &[f64]) -> Result<TangencyFit> {
        let values: Vec<f64> = t_list
            .iter()
            .map(|&t| {
                let s = self.assemble_metric(x, t)?;
                Ok(s.tensor.quad(v, v))
            })
            .collect::<Result<_>>()?;
        fit_tangency(t_list, &values)
    }
}

#[derive(Debug, Clone)]
pub struct TangencyFit {
    pub t_values: Vec<f64>,
    pub values: Vec<f64>,
    /// Fitted `d/dt g_t(v, v)` at `t = 0`.
    pub slope: f64,
    /// Fitted value extrapolated to `t = 0`.
    pub intercept: f64,
    /// Root-mean-square fit residual relative to the mean value.
    pub fit_residual: f64,
}

/// Least-squares quadratic (linear for two points) fit of `values` against `t_values`.
pub fn fit_tangency(t_values: &[f64], values: &[f64]) -> Result<TangencyFit> {
    if t_values.len() != values.len() || t_values.len() < 2 {
        return Err(Error::OutOfRange("tangency fit needs at least two samples".into()));
    }
    let degree = if t_values.len() >= 4 { 2 } else { 1 };
    let coef = polyfit(t_values, values, degree)?;
    let eval = |t: f64| coef.iter().rev().fold(0.0, |acc, c| acc * t + c);
    // Derivative of the fit at t = 0, not at the smallest sample.
    let slope = coef[1];
    let mean = values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64;
    let rms = (t_values.iter().zip(values).map(|(&t, &v)| (eval(t) - v).powi(2)).sum::<f64>() / values.len() as f64).sqrt();
    Ok(TangencyFit {
        t_values: t_values.to_vec(),
        values: values.to_vec(),
        slope,
        intercept: coef[0],
        fit_residual: rms / mean.max(f64::MIN_POSITIVE),
    })
}

fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    let n = degree + 1;
    let mut a = faer::Mat::<f64>::zeros(n, n);
    let mut b = faer::Mat::<f64>::zeros(n, 1);
    for (&xi, &yi) in x.iter().zip(y) {
        for r in 0..n {
            b[(r, 0)] += xi.powi(r as i32) * yi;
            for c in 0..n {
                a[(r, c)] += xi.powi((r + c) as i32);
            }
        }
    }
    use faer::prelude::Solve;
    let sol = a.partial_piv_lu().solve(&b);
    let out: Vec<f64> = (0..n).map(|i| sol[(i, 0)]).collect();
    if out.iter().any(|c| !c.is_finite()) {
        return Err(Error::Unresolved("degenerate tangency fit".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct EvolvedMetric {
    pub t_values: Vec<f64>,
    pub vertices: Vec<usize>,
    /// `samples[i][k]` is `g_{t_i}` at `vertices[k]`.
    pub samples: Vec<Vec<MetricSample>>,
}

impl EvolvedMetric {
    pub fn max_form_gap(&self) -> f64 {
        self.samples.iter().flatten().map(|s| s.form_gap).fold(0.0, f64::max)
    }

    pub fn max_asymmetry(&self) -> f64 {
        self.samples.iter().flatten().map(|s| s.asymmetry).fold(0.0, f64::max)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.samples
            .iter()
            .flatten()
            .map(|s| s.tensor.eigenvalues().0)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn tensor(&self, t_index: usize, x: usize) -> Option<Sym2> {
        let k = self.vertices.binary_search(&x).ok()?;
        Some(self.samples[t_index][k].tensor)
    }

    /// CSV `t,vertex,g11,g12,g22`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,vertex,g11,g12,g22")?;
        for (i, &t) in self.t_values.iter().enumerate() {
            for s in &self.samples[i] {
                writeln!(w, "{t},{},{:.17e},{:.17e},{:.17e}", s.x, s.tensor.xx, s.tensor.xy, s.tensor.yy)?;
            }
        }
        Ok(())
    }
}

/// Rotation taking unit vector `from` to unit vector `to` about their common normal.
pub fn minimal_rotation(from: Vec3, to: Vec3) -> [[f64; 3]; 3] {
    let axis = tensor::cross(from, to);
    let s = tensor::norm(axis);
    let c = tensor::dot(from, to);
    let mut r = [[0.0; 3]; 3];
    if s < 1e-15 {
        for (i, row) in r.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        return r;
    }
    let k = tensor::scale(axis, 1.0 / s);
    for i in 0..3 {
        let mut e = [0.0; 3];
        e[i] = 1.0;
        let rotated = tensor::add(
            tensor::add(tensor::scale(e, c), tensor::scale(tensor::cross(k, e), s)),
            tensor::scale(k, tensor::dot(k, e) * (1.0 - c)),
        );
        for j in 0..3 {
            r[j][i] = rotated[j];
        }
    }
    r
}

/// Expresses `g`, given in the frame at `y`, in the frame at `x` after transporting
/// `T_y` to `T_x` by the minimal rotation between their normals.
pub fn transport_tensor(mesh: &TriangleMesh, g: &Sym2, y: usize, x: usize) -> Sym2 {
    let fy = mesh.vertex_frame(y);
    let fx = mesh.vertex_frame(x);
    let r = minimal_rotation(mesh.vertex_normal(y), mesh.vertex_normal(x));
    let rot = |v: Vec3| -> Vec3 { [0, 1, 2].map(|i| tensor::dot(r[i], v)) };
    let ty = [rot(fy[0]), rot(fy[1])];
    // c[i][a]: component of x-frame vector i along transported y-frame vector a
    let c = [
        [tensor::dot(fx[0], ty[0]), tensor::dot(fx[0], ty[1])],
        [tensor::dot(fx[1], ty[0]), tensor::dot(fx[1], ty[1])],
    ];
    let p = tensor::Mat2([[c[0][0], c[1][0]], [c[0][1], c[1][1]]]);
    g.congruence(&p)
}

#[derive(Debug, Clone, Copy)]
pub struct EdgeDifference {
    pub v0: usize,
    pub v1: usize,
    pub edge_length: f64,
    /// Frobenius norm of `g_t(v0) − g_t(v1)` in a shared frame.
    pub frobenius_diff: f64,
    /// `|tr g_t(v0) − tr g_t(v1)|`, independent of frames.
    pub trace_diff: f64,
}

#[derive(Debug, Clone)]
pub struct ContinuityTable {
    pub t: f64,
    pub rows: Vec<EdgeDifference>,
}

impl ContinuityTable {
    pub fn max_difference(&self) -> f64 {
        self.rows.iter().map(|r| r.frobenius_diff).fold(0.0, f64::max)
    }

    pub fn max_trace_difference(&self) -> f64 {
        self.rows.iter().map(|r| r.trace_diff).fold(0.0, f64::max)
    }

    pub fn max_ratio(&self) -> f64 {
        self.rows.iter().map(|r| r.frobenius_diff / r.edge_length).fold(0.0, f64::max)
    }

    /// CSV `t,edge_v0,edge_v1,edge_length,frobenius_diff`.
    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        write_continuity_csv(w, std::slice::from_ref(self))
    }

    /// CSV `t,edge_v0,edge_v1,edge_length,trace_diff`.
    pub fn write_scalar_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,edge_v0,edge_v1,edge_length,trace_diff")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{:.17e},{:.17e}", self.t, r.v0, r.v1, r.edge_length, r.trace_diff)?;
        }
        Ok(())
    }
}

pub const MODULUS_HEADER: &str = "t,edge_v0,edge_v1,edge_length,frobenius_diff";

/// Several tables (one per time) under a single header.
pub fn write_continuity_csv<W: Write>(mut w: W, tables: &[ContinuityTable]) -> std::io::Result<()> {
    writeln!(w, "{MODULUS_HEADER}")?;
    for table in tables {
        for r in &table.rows {
            writeln!(w, "{},{},{},{:.17e},{:.17e}", table.t, r.v0, r.v1, r.edge_length, r.frobenius_diff)?;
        }
    }
    Ok(())
}

/// Differences of `g_t` across every mesh edge with both ends in the computed set.
pub fn continuity_modulus(mesh: &TriangleMesh, metric: &EvolvedMetric, t_index: usize) -> ContinuityTable {
    let rows = mesh
        .edges()
        .iter()
        .filter_map(|&[a, b]| {
            let ga = metric.tensor(t_index, a)?;
            let gb = metric.tensor(t_index, b)?;
            let moved = transport_tensor(mesh, &gb, b, a);
            let d = ga.add(&moved.scale(-1.0));
            Some(EdgeDifference {
                v0: a,
                v1: b,
                edge_length: mesh.edge_length(a, b),
                frobenius_diff: d.frobenius(),
                trace_diff: (ga.trace() - gb.trace()).abs(),
            })
        })
        .collect();
    ContinuityTable {
        t: metric.t_values[t_index],
        rows,
    }
}

/// CSV `t,vertex,direction,value,slope_fit`.
pub fn write_tangency_csv<W: Write>(mut w: W, x: usize, direction: usize, fit: &TangencyFit) -> std::io::Result<()> {
    for (t, v) in fit.t_values.iter().zip(&fit.values) {
        writeln!(w, "{t},{x},{direction},{v:.17e},{:.17e}", fit.slope)?;
    }
    Ok(())
}

pub const TANGENCY_HEADER: &str = "t,vertex,direction,value,slope_fit";

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_maps_normals() {
        let a = tensor::normalize([0.2, 0.1, 1.0]);
        let b = tensor::normalize([-0.1, 0.3, 1.0]);
        let r = minimal_rotation(a, b);
        let ra = [0, 1, 2].map(|i| tensor::dot(r[i], a));
        assert!(tensor::norm(tensor::sub(ra, b)) < 1e-14);
    }

    #[test]
    fn quadratic_fit_recovers_slope() {
        let t = [0.1, 0.15, 0.2, 0.25, 0.3];
        let v: Vec<f64> = t.iter().map(|x| 1.0 - 2.0 * x + 0.5 * x * x).collect();
        let fit = fit_tangency(&t, &v).unwrap();
        assert!((fit.slope + 2.0).abs() < 1e-10);
        assert!((fit.intercept - 1.0).abs() < 1e-10);
    }
}
