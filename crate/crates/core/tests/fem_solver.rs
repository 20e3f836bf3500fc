mod common;

use std::sync::Arc;

use common::*;
use geoflow::fem::{self, CoefficientField, DiscreteSpaces, MassKind};
use geoflow::mesh::{self, build_flat_torus, build_icosphere, build_tetrahedron, compare_metrics, RoughMetric, TriangleMesh};
use geoflow::rng;
use geoflow::solver::{self, remean, Measure, MeanZeroProblem};
use geoflow::sparse;
use geoflow::tensor::Sym2;
use nalgebra::{Matrix2, Vector2};
use proptest::prelude::*;

fn random_metric(mesh: &TriangleMesh, seed: u64) -> RoughMetric {
    let mut r = rng::stream(seed, 90);
    RoughMetric::new(
        (0..mesh.num_triangles())
            .map(|_| {
                let a = 0.5 + 1.5 * rand::Rng::gen::<f64>(&mut r);
                let b = 0.5 + 1.5 * rand::Rng::gen::<f64>(&mut r);
                Sym2::from_eigen(a, b, 3.0 * rand::Rng::gen::<f64>(&mut r))
            })
            .collect(),
    )
    .unwrap()
}

fn mean_zero_data(sp: &DiscreteSpaces, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, 91);
    sp.split_mean(&rng::normal_vec(&mut r, sp.num_vertices())).1
}

fn sym(s: &Sym2) -> Matrix2<f64> {
    let m = s.to_mat().0;
    Matrix2::new(m[0][0], m[0][1], m[1][0], m[1][1])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn comparison_tensor_solves_the_defining_relation(seed in any::<u64>()) {
        let mesh = build_tetrahedron().unwrap();
        let (a, b) = (random_metric(&mesh, seed), random_metric(&mesh, seed ^ 0x5555));
        let ab = compare_metrics(&a, &b).unwrap();
        let ba = compare_metrics(&b, &a).unwrap();
        for t in 0..mesh.num_triangles() {
            let (ga, gb) = (sym(a.tensor(t)), sym(b.tensor(t)));
            // a(Bu, v) = b(u, v) on the basis, solved independently
            let oracle = ga.lu().solve(&gb).unwrap();
            let bl = ab.b_local(t).0;
            let bl = Matrix2::new(bl[0][0], bl[0][1], bl[1][0], bl[1][1]);
            prop_assert!((bl - oracle).norm() <= 1e-12 * oracle.norm());
            let back = ba.b_local(t).0;
            let back = Matrix2::new(back[0][0], back[0][1], back[1][0], back[1][1]);
            prop_assert!((bl * back - Matrix2::identity()).norm() < 1e-12);
            let ratio = b.area(&mesh, t) / a.area(&mesh, t);
            prop_assert!((ab.theta[t] - ratio).abs() <= 1e-12 * ratio);
            for k in 0..8 {
                let ang = k as f64 * 0.4;
                let u = Vector2::new(ang.cos(), ang.sin());
                let (na, nb) = ((u.transpose() * ga * u)[0].sqrt(), (u.transpose() * gb * u)[0].sqrt());
                prop_assert!(nb <= ab.closeness * na * (1.0 + 1e-12));
                prop_assert!(na <= ab.closeness * nb * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn gradient_and_divergence_are_adjoint(seed in any::<u64>(), level in 0u32..3, rough in any::<bool>()) {
        let mesh = build_icosphere(level).unwrap();
        let metric = if rough { random_metric(&mesh, seed) } else { RoughMetric::induced(&mesh) };
        let (sp, pr) = fem::assemble(&mesh, &metric, MassKind::Consistent).unwrap();
        let mut r = rng::stream(seed, 1);
        let u = rng::normal_vec(&mut r, mesh.num_vertices());
        let w = rng::normal_vec(&mut r, 2 * mesh.num_triangles());
        let lhs = sp.inner_covector(&pr.gradient(&u), &w);
        let rhs = sp.inner_vertex(&u, &pr.divergence(&sp, &w));
        let scale = sp.norm_covector(&pr.gradient(&u)) * sp.norm_covector(&w) + sp.norm_vertex(&u) * sp.norm_vertex(&pr.divergence(&sp, &w));
        prop_assert!((lhs + rhs).abs() <= 1e-12 * scale);
        let g1 = pr.gradient(&vec![1.7; mesh.num_vertices()]);
        prop_assert!(sparse::norm(&g1) < 1e-12);
    }

    #[test]
    fn operator_form_matches_energy(seed in any::<u64>(), level in 0u32..3) {
        let mesh = build_icosphere(level).unwrap();
        let sp = spaces(&mesh, MassKind::Consistent);
        let op = operator(&sp, CoefficientField::random_real(&mesh, 0.5, 2.0, seed).unwrap());
        let mut r = rng::stream(seed, 2);
        let u = rng::normal_vec(&mut r, mesh.num_vertices());
        let lhs = sp.0.inner_vertex(&op.apply(&u).unwrap(), &u);
        let rhs = op.energy(&u).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs());
        prop_assert!(rhs >= 0.5 * sp.0.norm_covector(&sp.1.gradient(&u)).powi(2) * (1.0 - 1e-12));
    }

    #[test]
    fn orthogonal_splitting(seed in any::<u64>()) {
        let mesh = build_icosphere(2).unwrap();
        let sp = spaces(&mesh, MassKind::Consistent);
        let mut r = rng::stream(seed, 3);
        let u = rng::normal_vec(&mut r, mesh.num_vertices());
        let (c, rest, ip) = fem::orthogonal_split(&sp.0, &u);
        prop_assert!(sp.0.integral(&rest).abs() < 1e-12 * sp.0.norm_vertex(&u));
        prop_assert!(ip.abs() < 1e-12 * sp.0.norm_vertex(&u).powi(2));
        let sum: Vec<f64> = c.iter().zip(&rest).map(|(a, b)| a + b).collect();
        prop_assert!(rel_diff_vec(&sum, &u) < 1e-14);
    }

    #[test]
    fn solver_is_linear_and_stable(seed in any::<u64>()) {
        let mesh = build_icosphere(2).unwrap();
        let sp = spaces(&mesh, MassKind::Consistent);
        let op = operator(&sp, CoefficientField::random_real(&mesh, 0.5, 2.0, seed).unwrap());
        let l1 = fem::eigensolve(&op, 2).unwrap().lambda1();
        let (f, h) = (mean_zero_data(&sp.0, seed), mean_zero_data(&sp.0, seed.wrapping_add(1)));
        let solve = |g: &[f64]| solver::solve_mean_zero(&MeanZeroProblem::new(&op, g, Measure::of(&sp.0)).unwrap()).unwrap();
        let (uf, uh) = (solve(&f), solve(&h));
        let mix: Vec<f64> = f.iter().zip(&h).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        let umix = solve(&mix);
        let want: Vec<f64> = uf.iter().zip(&uh).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        prop_assert!(rel_diff_vec(&umix, &want) < 1e-9);
        prop_assert!(sp.0.norm_vertex(&uf) <= sp.0.norm_vertex(&f) / l1 * (1.0 + 1e-9));
    }
}

#[test]
fn tetrahedron_solutions_match_pseudoinverse() {
    let mesh = build_tetrahedron().unwrap();
    let sp = spaces(&mesh, MassKind::Consistent);
    for seed in 0..10 {
        let op = operator(&sp, CoefficientField::random_real(&mesh, 0.5, 2.0, seed).unwrap());
        let f = mean_zero_data(&sp.0, seed);
        let u = solver::solve_mean_zero(&MeanZeroProblem::new(&op, &f, Measure::of(&sp.0)).unwrap()).unwrap();
        let oracle = pseudoinverse_solve(op.stiffness().unwrap(), &sp.0.apply_mass(&f), sp.0.vertex_weights());
        assert!(rel_diff_vec(&u, &oracle) < 1e-9, "seed {seed}: {}", rel_diff_vec(&u, &oracle));
    }
}

#[test]
fn tetrahedron_spectrum_matches_dense_diagonalization() {
    let mesh = build_tetrahedron().unwrap();
    let sp = spaces(&mesh, MassKind::Consistent);
    let op = operator(&sp, CoefficientField::identity(mesh.num_triangles()));
    let spec = fem::eigensolve(&op, 4).unwrap();
    let oracle = generalized_eigenvalues(op.stiffness().unwrap(), sp.0.mass());
    for (a, b) in spec.values().iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-10 * oracle[3], "{a} vs {b}");
    }
    assert!(spec.values()[0].abs() < 1e-10);
    let phi0 = spec.vector(0);
    assert!(phi0.iter().all(|v| (v - phi0[0]).abs() < 1e-10 * phi0[0].abs()));
}

#[test]
fn spectral_gap_and_poincare_inequality() {
    let mesh = build_icosphere(1).unwrap();
    let sp = spaces(&mesh, MassKind::Consistent);
    let lap = operator(&sp, CoefficientField::identity(mesh.num_triangles()));
    let spec = fem::eigensolve(&lap, 8).unwrap();
    let c = fem::poincare_constant(&spec).unwrap();
    for seed in 0..10 {
        let op = operator(&sp, CoefficientField::random_real(&mesh, 0.5, 2.0, seed).unwrap());
        assert!(fem::eigensolve(&op, 2).unwrap().lambda1() >= 0.5 * spec.lambda1());
        let mut r = rng::stream(seed, 4);
        let u = rng::normal_vec(&mut r, mesh.num_vertices());
        let lhs = sp.0.norm_vertex(&sp.0.split_mean(&u).1);
        assert!(lhs <= c * sp.0.norm_covector(&sp.1.gradient(&u)) + 1e-10);
    }
    // equality on the first eigenfunction
    let phi = spec.vector(1);
    let lhs = sp.0.norm_vertex(&phi);
    let rhs = c * sp.0.norm_covector(&sp.1.gradient(&phi));
    assert!((lhs - rhs).abs() < 1e-9 * lhs);
}

#[test]
fn first_sphere_eigenvalue_converges_to_two() {
    let mut errs = Vec::new();
    for level in 1..=4 {
        let mesh = build_icosphere(level).unwrap();
        let lap = fem::laplacian(&mesh, &RoughMetric::induced(&mesh), MassKind::Consistent).unwrap();
        let spec = fem::eigensolve(&lap, 5).unwrap();
        let v = spec.values();
        errs.push((v[1] - 2.0).abs() / 2.0);
        assert!((v[3] - v[1]).abs() < 1e-6 * v[1], "multiplicity three at level {level}");
        if level == 4 {
            assert!(errs[3] < 0.02);
            assert!((fem::poincare_constant(&spec).unwrap() - 0.5f64.sqrt()).abs() < 0.02 * 0.5f64.sqrt());
        }
    }
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
}

#[test]
fn remean_targets_the_requested_measure() {
    let mesh = build_icosphere(2).unwrap();
    let g = RoughMetric::induced(&mesh);
    let mut r = rng::stream(5, 5);
    let u = rng::normal_vec(&mut r, mesh.num_vertices());
    let base = Measure::of(&fem::assemble(&mesh, &g, MassKind::Consistent).unwrap().0);
    // a uniform rescaling of the metric rescales the measure, so both means vanish
    let scaled = Measure::of(&fem::assemble(&mesh, &g.scaled(4.0).unwrap(), MassKind::Consistent).unwrap().0);
    let v = remean(&u, &scaled);
    assert!(scaled.integral(&v).abs() < 1e-12 * scaled.total());
    assert!(base.integral(&v).abs() < 1e-12 * base.total());
    // a genuinely rough metric moves the mean
    let rough = Measure::of(&fem::assemble(&mesh, &random_metric(&mesh, 9), MassKind::Consistent).unwrap().0);
    let w = remean(&u, &rough);
    assert!(rough.integral(&w).abs() < 1e-12 * rough.total());
    assert!(base.integral(&w).abs() > 1e-6 * base.total());
    assert_eq!(remean(&w, &rough).iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) < 1e-15, true);
    assert!(sparse::norm(&remean(&vec![3.0; mesh.num_vertices()], &rough)) < 1e-13);
}

#[test]
fn torus_and_cone_meshes_assemble() {
    let torus = build_flat_torus(10, 6.0).unwrap();
    let sp = spaces(&torus, MassKind::Consistent);
    assert!((sp.0.total_measure() - 36.0).abs() < 1e-10);
    let cone = mesh::build_cone_sphere(std::f64::consts::PI, 2).unwrap();
    let (s, _) = fem::assemble(&cone.mesh, &cone.metric, MassKind::Consistent).unwrap();
    assert!(s.total_measure() > 0.0);
    let apex_tris = cone.mesh.vertex_triangles(cone.apex).to_vec();
    for t in 0..cone.mesh.num_triangles() {
        let (l0, l1) = cone.metric.tensor(t).eigenvalues();
        assert!(l0 > 0.0 && l1.is_finite());
        if !apex_tris.contains(&t) {
            assert!(l0 >= 0.2 && l1 <= 1.0 + 1e-12, "triangle {t}: {l0} {l1}");
        }
    }
    let _: Arc<DiscreteSpaces> = sp.0;
}

