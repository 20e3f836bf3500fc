//! Continuity of mean-zero solutions and of square roots under perturbation of real
//! symmetric coefficients and of the data.

use std::io::Write;
use std::sync::Arc;

use faer::Mat;

use crate::calculus::loglog_slope;
use crate::error::{Error, Result};
use crate::fem::{self, CoefficientField, CoefficientTensors, DiscreteSpaces, EllipticOperator, GradDivPair};
use crate::heat::HeatKernel;
use crate::mesh::TriangleMesh;
use crate::solver::{self, Measure, MeanZeroProblem, SolverOptions};
use crate::tensor::Sym2;

/// Relative mean tolerated in data before it is treated as incompatible.
pub const MEAN_TOL: f64 = 1e-8;

/// `s ↦ (A_x + s P, η_x + s δη)` for `|s| ≤ ζ`, with `‖P‖_∞ = 1` (or `P = 0`).
#[derive(Debug, Clone)]
pub struct PerturbationFamily {
    base: CoefficientField,
    direction: Vec<Sym2>,
    data: Vec<f64>,
    data_direction: Vec<f64>,
    margin: f64,
}

impl PerturbationFamily {
    /// Normalizes `direction` to unit sup norm and removes the (tolerated) means of the data.
    pub fn new(
        spaces: &DiscreteSpaces,
        base: CoefficientField,
        direction: Vec<Sym2>,
        data: Vec<f64>,
        data_direction: Vec<f64>,
        margin: f64,
    ) -> Result<Self> {
        if !base.is_real() {
            return Err(Error::NotSelfAdjoint("perturbation families need real symmetric coefficients".into()));
        }
        if direction.len() != base.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} direction tensors for {} triangles",
                direction.len(),
                base.len()
            )));
        }
        let n = spaces.num_vertices();
        if data.len() != n || data_direction.len() != n {
            return Err(Error::DimensionMismatch("data length".into()));
        }
        if !(margin >= 0.0 && margin < base.kappa()) {
            return Err(Error::OutOfRange(format!(
                "margin {margin} must lie in [0, κ_x = {})",
                base.kappa()
            )));
        }
        let sup = direction.iter().map(sup_norm).fold(0.0, f64::max);
        let direction = if sup > 0.0 {
            direction.iter().map(|p| p.scale(1.0 / sup)).collect()
        } else {
            direction
        };
        Ok(Self {
            base,
            direction,
            data: mean_free(spaces, data)?,
            data_direction: mean_free(spaces, data_direction)?,
            margin,
        })
    }

    pub fn base(&self) -> &CoefficientField {
        &self.base
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn kappa(&self) -> f64 {
        self.base.kappa()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn coefficients_at(&self, s: f64) -> Result<CoefficientField> {
        if s.abs() > self.margin {
            return Err(Error::OutOfRange(format!("magnitude {s} exceeds the margin {}", self.margin)));
        }
        let CoefficientTensors::Real(a) = self.base.tensors() else {
            unreachable!("checked in the constructor")
        };
        CoefficientField::real(a.iter().zip(&self.direction).map(|(x, p)| x.add(&p.scale(s))).collect())
    }

    pub fn data_at(&self, s: f64) -> Vec<f64> {
        self.data.iter().zip(&self.data_direction).map(|(a, d)| a + s * d).collect()
    }
}

fn sup_norm(p: &Sym2) -> f64 {
    let (a, b) = p.eigenvalues();
    a.abs().max(b.abs())
}

fn mean_free(spaces: &DiscreteSpaces, u: Vec<f64>) -> Result<Vec<f64>> {
    let integral = spaces.integral(&u);
    let scale = spaces.norm_vertex(&u) * spaces.total_measure().sqrt();
    if integral.abs() > MEAN_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Compatibility {
            integral: integral.abs(),
            tolerance: MEAN_TOL * scale,
        });
    }
    Ok(spaces.split_mean(&u).1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuityRow {
    pub magnitude: f64,
    pub lhs_norm: f64,
    pub rhs_bound: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuitySweep {
    pub rows: Vec<ContinuityRow>,
    /// Log-log slope of `lhs_norm` against magnitude over the positive rows.
    pub slope: f64,
    /// Largest `lhs / (‖A_x − A_y‖ ‖η_x‖ + ‖η_x − η_y‖)` for solution sweeps, or
    /// `lhs / ‖A_x − A_y‖` for square-root sweeps.
    pub constant: f64,
}

fn sweep_slope(rows: &[ContinuityRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.magnitude > 0.0 && r.lhs_norm > 0.0)
        .map(|r| (r.magnitude.ln(), r.lhs_norm.ln()))
        .collect();
    loglog_slope(&pts)
}

fn check_magnitudes(family: &PerturbationFamily, magnitudes: &[f64]) -> Result<()> {
    match magnitudes.iter().find(|m| !(m.abs() <= family.margin)) {
        Some(m) => Err(Error::OutOfRange(format!("magnitude {m} exceeds the margin {}", family.margin))),
        None => Ok(()),
    }
}

/// `√L` of a real symmetric operator through its mass-orthonormal eigenbasis.
#[derive(Debug, Clone)]
pub struct SpectralRoot {
    roots: Vec<f64>,
    vectors: Mat<f64>,
    mass: Mat<f64>,
}

impl SpectralRoot {
    pub fn new(op: &EllipticOperator) -> Result<Self> {
        let k = op.stiffness()?.to_dense();
        let mass = op.spaces().mass().to_dense();
        let (values, vectors) = fem::generalized_eigen_dense(&k, &mass)?;
        Ok(Self {
            roots: values.iter().map(|l| l.max(0.0).sqrt()).collect(),
            vectors,
            mass,
        })
    }

    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let n = u.len();
        let col = Mat::from_fn(n, 1, |i, _| u[i]);
        let coeff = self.vectors.transpose() * (&self.mass * &col);
        let scaled = Mat::from_fn(n, 1, |i, _| coeff[(i, 0)] * self.roots[i]);
        let out = &self.vectors * scaled;
        (0..n).map(|i| out[(i, 0)]).collect()
    }
}

/// Per magnitude, the largest `‖(√L_x − √L_y) u‖ / ‖∇u‖` over the probes, against
/// `‖A_x − A_y‖_∞`.
pub fn sqrt_difference_sweep(
    spaces: &Arc<DiscreteSpaces>,
    pair: &Arc<GradDivPair>,
    family: &PerturbationFamily,
    magnitudes: &[f64],
    probes: &[Vec<f64>],
) -> Result<ContinuitySweep> {
    check_magnitudes(family, magnitudes)?;
    let probes: Vec<&Vec<f64>> = probes
        .iter()
        .filter(|u| spaces.norm_covector(&pair.gradient(u)) > 1e-12 * spaces.norm_vertex(u))
        .collect();
    if probes.is_empty() {
        return Err(Error::OutOfRange("every probe is constant".into()));
    }
    let grads: Vec<f64> = probes.iter().map(|u| spaces.norm_covector(&pair.gradient(u))).collect();
    let base_op = fem::make_operator(spaces.clone(), pair.clone(), family.base.clone(), None)?;
    let base = SpectralRoot::new(&base_op)?;
    let base_images: Vec<Vec<f64>> = probes.iter().map(|u| base.apply(u)).collect();
    let mut rows = Vec::with_capacity(magnitudes.len());
    for &m in magnitudes {
        let coeff = family.coefficients_at(m)?;
        let gap = family.base.sup_distance(&coeff);
        let lhs = if m == 0.0 {
            0.0
        } else {
            let op = fem::make_operator(spaces.clone(), pair.clone(), coeff, None)?;
            let root = SpectralRoot::new(&op)?;
            probes
                .iter()
                .zip(&base_images)
                .zip(&grads)
                .map(|((u, bx), g)| {
                    let by = root.apply(u);
                    let d: Vec<f64> = bx.iter().zip(&by).map(|(a, b)| a - b).collect();
                    spaces.norm_vertex(&d) / g
                })
                .fold(0.0, f64::max)
        };
        rows.push(ContinuityRow {
            magnitude: m,
            lhs_norm: lhs,
            rhs_bound: gap,
            ratio: if gap > 0.0 { lhs / gap } else { 0.0 },
        });
    }
    Ok(ContinuitySweep {
        slope: sweep_slope(&rows),
        constant: rows.iter().map(|r| r.ratio).fold(0.0, f64::max),
        rows,
    })
}

/// Mean-zero solution of `L_A u = η` with the pinned Cholesky factor as an exact preconditioner.
pub fn solve_exact(op: &EllipticOperator, data: &[f64]) -> Result<Vec<f64>> {
    let problem = MeanZeroProblem::new(op, data, Measure::of(op.spaces()))?;
    let opts = SolverOptions {
        tol: 1e-13,
        ..Default::default()
    };
    Ok(solver::solve_mean_zero_with(&problem, &opts)?.u)
}

/// Comparison of two solved problems `L_x u_x = η_x`, `L_y u_y = η_y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolutionDifference {
    /// `‖u_x − u_y‖`.
    pub difference: f64,
    pub solution_norm: f64,
    /// `‖A_x − A_y‖_∞`.
    pub coefficient_gap: f64,
    pub data_norm: f64,
    /// `‖η_x − η_y‖`.
    pub data_gap: f64,
    /// `ΔA ‖η_y‖ / (κ_x κ_y λ₁) + ‖Δη‖ / (κ_x λ₁)`, from Gårding and Poincaré.
    pub a_priori_bound: f64,
}

impl SolutionDifference {
    /// `‖u_x − u_y‖ / (ΔA ‖η_x‖ + ‖Δη‖)`.
    pub fn empirical_constant(&self) -> f64 {
        let d = self.coefficient_gap * self.data_norm + self.data_gap;
        if d > 0.0 {
            self.difference / d
        } else {
            0.0
        }
    }
}

/// Solves both problems and compares them. `lambda1` is the first nonzero eigenvalue
/// of the background Laplacian on the same spaces.
pub fn solution_difference(
    spaces: &Arc<DiscreteSpaces>,
    pair: &Arc<GradDivPair>,
    lambda1: f64,
    x: (&CoefficientField, &[f64]),
    y: (&CoefficientField, &[f64]),
) -> Result<SolutionDifference> {
    let op_x = fem::make_operator(spaces.clone(), pair.clone(), x.0.clone(), None)?;
    let op_y = fem::make_operator(spaces.clone(), pair.clone(), y.0.clone(), None)?;
    let ux = solve_exact(&op_x, x.1)?;
    let uy = solve_exact(&op_y, y.1)?;
    let du: Vec<f64> = ux.iter().zip(&uy).map(|(a, b)| a - b).collect();
    let de: Vec<f64> = x.1.iter().zip(y.1).map(|(a, b)| a - b).collect();
    let gap = x.0.sup_distance(y.0);
    let (kx, ky) = (x.0.kappa(), y.0.kappa());
    let data_gap = spaces.norm_vertex(&de);
    Ok(SolutionDifference {
        difference: spaces.norm_vertex(&du),
        solution_norm: spaces.norm_vertex(&ux),
        coefficient_gap: gap,
        data_norm: spaces.norm_vertex(x.1),
        data_gap,
        a_priori_bound: gap * spaces.norm_vertex(y.1) / (kx * ky * lambda1) + data_gap / (kx * lambda1),
    })
}

/// Per magnitude `s`, `‖u_0 − u_s‖` against the a-priori bound; `ratio = lhs / rhs ≤ 1`
/// up to solver tolerance.
pub fn solution_difference_sweep(
    spaces: &Arc<DiscreteSpaces>,
    pair: &Arc<GradDivPair>,
    lambda1: f64,
    family: &PerturbationFamily,
    magnitudes: &[f64],
) -> Result<ContinuitySweep> {
    check_magnitudes(family, magnitudes)?;
    let mut rows = Vec::with_capacity(magnitudes.len());
    let mut constant = 0.0f64;
    for &m in magnitudes {
        let coeff = family.coefficients_at(m)?;
        let data = family.data_at(m);
        let d = solution_difference(spaces, pair, lambda1, (&family.base, &family.data), (&coeff, &data))?;
        constant = constant.max(d.empirical_constant());
        rows.push(ContinuityRow {
            magnitude: m,
            lhs_norm: d.difference,
            rhs_bound: d.a_priori_bound,
            ratio: if d.a_priori_bound > 0.0 {
                d.difference / d.a_priori_bound
            } else {
                0.0
            },
        });
    }
    Ok(ContinuitySweep {
        slope: sweep_slope(&rows),
        constant,
        rows,
    })
}

/// Heat-kernel coefficients `ρ_t(x, ·) I` with data `d_xρ_t(x, ·)(v)`, for the vertex `x`.
pub fn heat_kernel_problem(
    mesh: &TriangleMesh,
    hk: &HeatKernel,
    x: usize,
    v: [f64; 2],
    t: f64,
) -> Result<(CoefficientField, Vec<f64>)> {
    let rho = hk.kernel_slice(x, t)?.values;
    let coeff = CoefficientField::real(
        mesh.triangles()
            .iter()
            .map(|&[a, b, c]| Sym2::scaled_identity((rho[a] + rho[b] + rho[c]) / 3.0))
            .collect(),
    )?;
    Ok((coeff, hk.kernel_x_derivative(x, v, t)?))
}

/// The family moving the heat-kernel problem at `x` toward the one at `y`: the full
/// step is `s = ‖A_y − A_x‖_∞`, and the margin is `min(s, margin_fraction κ_x)`.
pub fn heat_kernel_family(
    mesh: &TriangleMesh,
    spaces: &DiscreteSpaces,
    hk: &HeatKernel,
    (x, y): (usize, usize),
    v: [f64; 2],
    t: f64,
    margin_fraction: f64,
) -> Result<PerturbationFamily> {
    let (ax, ex) = heat_kernel_problem(mesh, hk, x, v, t)?;
    let (ay, ey) = heat_kernel_problem(mesh, hk, y, v, t)?;
    let step = ax.sup_distance(&ay);
    if !(step > 0.0) {
        return Err(Error::OutOfRange("the two kernel slices coincide".into()));
    }
    let (CoefficientTensors::Real(a), CoefficientTensors::Real(b)) = (ax.tensors(), ay.tensors()) else {
        unreachable!("heat-kernel coefficients are real")
    };
    let direction: Vec<Sym2> = a.iter().zip(b).map(|(p, q)| q.add(&p.scale(-1.0)).scale(1.0 / step)).collect();
    let data_direction: Vec<f64> = ex.iter().zip(&ey).map(|(p, q)| (q - p) / step).collect();
    let margin = step.min(margin_fraction * ax.kappa());
    PerturbationFamily::new(spaces, ax, direction, ex, data_direction, margin)
}

/// True when the differences fall strictly as the magnitude falls.
pub fn is_monotone(sweep: &ContinuitySweep) -> bool {
    let mut rows = sweep.rows.clone();
    rows.sort_by(|a, b| a.magnitude.abs().total_cmp(&b.magnitude.abs()));
    rows.windows(2).all(|w| w[0].lhs_norm < w[1].lhs_norm)
}

pub const CONTINUITY_HEADER: &str = "magnitude,lhs_norm,rhs_bound,ratio";

pub fn write_sweep_csv<W: Write>(mut w: W, sweep: &ContinuitySweep) -> std::io::Result<()> {
    writeln!(w, "{CONTINUITY_HEADER}")?;
    for r in &sweep.rows {
        writeln!(w, "{:.17e},{:.17e},{:.17e},{:.17e}", r.magnitude, r.lhs_norm, r.rhs_bound, r.ratio)?;
    }
    Ok(())
}
