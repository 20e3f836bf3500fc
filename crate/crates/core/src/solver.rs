//! Mean-zero solves of `L_A u = f` on the range of the operator.

use std::io::Write;

use faer::prelude::Solve;
use faer::{c64, Mat};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fem::{DiscreteSpaces, EllipticOperator};
use crate::sparse::{self, Csr, SpdFactor};

pub const SOLVE_TOL: f64 = 1e-10;
pub const COMPATIBILITY_TOL: f64 = 1e-10;

/// Integration weights defining which mean must vanish.
#[derive(Debug, Clone, PartialEq)]
pub struct Measure {
    weights: Vec<f64>,
    total: f64,
}

impl Measure {
    pub fn of(spaces: &DiscreteSpaces) -> Self {
        Self::from_weights(spaces.vertex_weights().to_vec()).expect("mass weights are positive")
    }

    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::OutOfRange("measure must have positive total mass".into()));
        }
        Ok(Self { weights, total })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn integral(&self, u: &[f64]) -> f64 {
        sparse::dot(&self.weights, u)
    }
}

/// `u − (∫u dμ)/μ(M)`.
pub fn remean(u: &[f64], measure: &Measure) -> Vec<f64> {
    assert_eq!(u.len(), measure.weights.len());
    let m = measure.integral(u) / measure.total;
    u.iter().map(|x| x - m).collect()
}

/// `K u = F` with `1ᵀF = 0`, normalized to mean zero against `measure`.
#[derive(Debug, Clone)]
pub struct MeanZeroProblem<'a> {
    op: &'a EllipticOperator,
    load: Vec<f64>,
    measure: Measure,
}

impl<'a> MeanZeroProblem<'a> {
    /// Data `f` as vertex values; the load is `M f` in the operator's own mass form.
    pub fn new(op: &'a EllipticOperator, f: &[f64], measure: Measure) -> Result<Self> {
        if f.len() != op.num_vertices() {
            return Err(Error::DimensionMismatch("rhs length".into()));
        }
        let load = op.spaces().apply_mass(f);
        Self::from_load(op, load, measure)
    }

    /// Data given directly as a load vector (tested against hat functions).
    pub fn from_load(op: &'a EllipticOperator, load: Vec<f64>, measure: Measure) -> Result<Self> {
        let n = op.num_vertices();
        if load.len() != n || measure.weights.len() != n {
            return Err(Error::DimensionMismatch("load or measure length".into()));
        }
        let spaces = op.spaces();
        let integral: f64 = load.iter().sum();
        let dual_norm = sparse::dot(&load, &spaces.solve_mass(&load)).max(0.0).sqrt();
        let tolerance = COMPATIBILITY_TOL * dual_norm * spaces.total_measure().sqrt();
        if integral.abs() > tolerance {
            return Err(Error::Compatibility { integral, tolerance });
        }
        Ok(Self { op, load, measure })
    }

    pub fn load(&self) -> &[f64] {
        &self.load
    }

    pub fn measure(&self) -> &Measure {
        &self.measure
    }

    pub fn operator(&self) -> &EllipticOperator {
        self.op
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Preconditioner {
    Jacobi,
    /// Cholesky factor of the stiffness with one vertex pinned.
    #[default]
    PinnedCholesky,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub preconditioner: Preconditioner,
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            preconditioner: Preconditioner::default(),
            tol: SOLVE_TOL,
            max_iterations: 5000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub u: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

pub fn solve_mean_zero(p: &MeanZeroProblem) -> Result<Vec<f64>> {
    Ok(solve_mean_zero_with(p, &SolverOptions::default())?.u)
}

/// The stiffness plus `s e_p e_pᵀ`, which is positive definite and solves `K u = F`
/// exactly (with `u_p = 0`) whenever `1ᵀF = 0`.
pub fn pinned(k: &Csr) -> (Csr, usize) {
    let d = k.diagonal();
    let p = (0..d.len()).max_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap_or(0);
    let bump = Csr::from_triplets(k.nrows(), k.ncols(), &[(p, p, d[p])]);
    (k.add_scaled(&bump, 1.0), p)
}

/// Projected preconditioned conjugate gradients.
pub fn solve_mean_zero_with(p: &MeanZeroProblem, opts: &SolverOptions) -> Result<SolveReport> {
    let k = p.op.stiffness()?;
    let factor = match opts.preconditioner {
        Preconditioner::PinnedCholesky => Some(SpdFactor::new(&pinned(k).0)?),
        Preconditioner::Jacobi => None,
    };
    let diag = k.diagonal();
    let precondition = |r: &[f64]| -> Vec<f64> {
        let z = match &factor {
            Some(f) => f.solve(r),
            None => r.iter().zip(&diag).map(|(a, d)| a / d).collect(),
        };
        remean(&z, &p.measure)
    };
    pcg(k, &p.load, &p.measure, opts, precondition)
}

/// Same iteration with a caller-supplied preconditioner.
pub fn pcg(
    k: &Csr,
    load: &[f64],
    measure: &Measure,
    opts: &SolverOptions,
    precondition: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<SolveReport> {
    let n = load.len();
    let weights = k.diagonal();
    let f = project_range(load, &weights);
    let fnorm = sparse::norm(&f);
    if fnorm == 0.0 {
        return Ok(SolveReport {
            u: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
        });
    }
    let mut u = vec![0.0; n];
    let mut r = f.clone();
    let mut z = precondition(&r);
    let mut d = z.clone();
    let mut rz = sparse::dot(&r, &z);
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < opts.max_iterations {
        let rel = sparse::norm(&r) / fnorm;
        history.push(rel);
        if rel <= 0.1 * opts.tol {
            break;
        }
        let kd = k.matvec(&d);
        let alpha = rz / sparse::dot(&d, &kd);
        sparse::axpy(&mut u, alpha, &d);
        sparse::axpy(&mut r, -alpha, &kd);
        r = project_range(&r, &weights);
        z = precondition(&r);
        let rz_new = sparse::dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for (di, zi) in d.iter_mut().zip(&z) {
            *di = zi + beta * *di;
        }
        iterations += 1;
    }
    let mut res = k.matvec(&u);
    sparse::axpy(&mut res, -1.0, &f);
    let residual = sparse::norm(&res) / fnorm;
    let u = remean(&u, measure);
    if residual > opts.tol || !residual.is_finite() {
        return Err(Error::NonConvergence {
            iterations,
            residual,
            history,
        });
    }
    Ok(SolveReport { u, iterations, residual })
}

/// Projects onto `range(K) = 1^⊥` along `diag(K)`.
///
/// The discarded amount is roundoff; spreading it in proportion to the local stiffness keeps
/// it away from regions where the coefficient is tiny and any error would be amplified.
fn project_range(r: &[f64], weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let m = r.iter().sum::<f64>() / total;
    r.iter().zip(weights).map(|(x, w)| x - m * w).collect()
}

/// Dense solve of `b M⁻¹ K u = f` for complex coefficients or multipliers.
///
/// Compatibility requires `∫ f / b dμ = 0`; the solution is normalized against `measure`.
pub fn solve_mean_zero_complex(op: &EllipticOperator, f: &[Complex64], measure: &Measure) -> Result<Vec<Complex64>> {
    let n = op.num_vertices();
    if f.len() != n {
        return Err(Error::DimensionMismatch("rhs length".into()));
    }
    let scaled: Vec<Complex64> = match op.multiplier() {
        Some(b) => f.iter().zip(b).map(|(x, y)| x / y).collect(),
        None => f.to_vec(),
    };
    let m = op.spaces().mass();
    let re: Vec<f64> = m.matvec(&scaled.iter().map(|z| z.re).collect::<Vec<_>>());
    let im: Vec<f64> = m.matvec(&scaled.iter().map(|z| z.im).collect::<Vec<_>>());
    let integral = Complex64::new(re.iter().sum(), im.iter().sum());
    let fnorm = (sparse::dot(&re, &op.spaces().solve_mass(&re)) + sparse::dot(&im, &op.spaces().solve_mass(&im))).sqrt();
    let tolerance = COMPATIBILITY_TOL * fnorm * op.spaces().total_measure().sqrt();
    if integral.norm() > tolerance {
        return Err(Error::Compatibility {
            integral: integral.norm(),
            tolerance,
        });
    }
    if fnorm == 0.0 {
        return Ok(vec![Complex64::new(0.0, 0.0); n]);
    }
    let mut k = op.stiffness_complex();
    let p = (0..n).max_by(|&a, &b| k[(a, a)].norm().total_cmp(&k[(b, b)].norm())).unwrap();
    let kp = k[(p, p)];
    k[(p, p)] += kp;
    let rhs = Mat::<c64>::from_fn(n, 1, |i, _| c64::new(re[i], im[i]));
    let sol = k.partial_piv_lu().solve(&rhs);
    let u: Vec<Complex64> = (0..n).map(|i| sol[(i, 0)]).collect();
    let mean = u
        .iter()
        .zip(measure.weights())
        .map(|(z, w)| z * w)
        .sum::<Complex64>()
        / measure.total();
    Ok(u.into_iter().map(|z| z - mean).collect())
}

pub fn write_solution_csv<W: Write>(mut w: W, u: &[f64]) -> std::io::Result<()> {
    writeln!(w, "vertex_id,value")?;
    for (i, v) in u.iter().enumerate() {
        writeln!(w, "{i},{v:.17e}")?;
    }
    Ok(())
}

pub fn write_complex_solution_csv<W: Write>(mut w: W, u: &[Complex64]) -> std::io::Result<()> {
    writeln!(w, "vertex_id,re,im")?;
    for (i, v) in u.iter().enumerate() {
        writeln!(w, "{i},{:.17e},{:.17e}", v.re, v.im)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{eigensolve, laplacian, MassKind};
    use crate::mesh::{build_icosphere, RoughMetric};

    #[test]
    fn zero_rhs_and_eigenfunction() {
        let mesh = build_icosphere(2).unwrap();
        let op = laplacian(&mesh, &RoughMetric::induced(&mesh), MassKind::Consistent).unwrap();
        let meas = Measure::of(op.spaces());
        let zero = solve_mean_zero(&MeanZeroProblem::new(&op, &vec![0.0; 162], meas.clone()).unwrap()).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let spec = eigensolve(&op, 6).unwrap();
        let phi = spec.vector(4);
        let u = solve_mean_zero(&MeanZeroProblem::new(&op, &phi, meas.clone()).unwrap()).unwrap();
        let lam = spec.values()[4];
        let err = u.iter().zip(&phi).map(|(a, b)| (a - b / lam).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
        for pre in [Preconditioner::Jacobi, Preconditioner::PinnedCholesky] {
            let opts = SolverOptions {
                preconditioner: pre,
                ..Default::default()
            };
            let rep = solve_mean_zero_with(&MeanZeroProblem::new(&op, &phi, meas.clone()).unwrap(), &opts).unwrap();
            assert!(rep.residual <= SOLVE_TOL);
        }
    }

    #[test]
    fn incompatible_data_rejected() {
        let mesh = build_icosphere(1).unwrap();
        let op = laplacian(&mesh, &RoughMetric::induced(&mesh), MassKind::Consistent).unwrap();
        let f = vec![1.0; mesh.num_vertices()];
        assert!(matches!(
            MeanZeroProblem::new(&op, &f, Measure::of(op.spaces())),
            Err(Error::Compatibility { .. })
        ));
    }

    #[test]
    fn remean_properties() {
        let meas = Measure::from_weights(vec![1.0, 2.0, 3.0]).unwrap();
        let c = remean(&[4.0, 4.0, 4.0], &meas);
        assert!(c.iter().all(|v| v.abs() < 1e-15));
        let u = remean(&[1.0, -2.0, 0.5], &meas);
        let again = remean(&u, &meas);
        assert!(u.iter().zip(&again).all(|(a, b)| (a - b).abs() < 1e-15));
    }
}
