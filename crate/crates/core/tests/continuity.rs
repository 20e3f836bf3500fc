mod common;

use common::*;
use geoflow::continuity::*;
use geoflow::fem::{self, CoefficientField, CoefficientTensors, MassKind};
use geoflow::heat::HeatKernel;
use geoflow::mesh::{build_icosphere, RoughMetric, TriangleMesh};
use geoflow::rng;
use geoflow::tensor::Sym2;
use proptest::prelude::*;

fn random_direction(mesh: &TriangleMesh, seed: u64) -> Vec<Sym2> {
    let mut r = rng::stream(seed, 40);
    (0..mesh.num_triangles())
        .map(|_| Sym2::new(rng::normal(&mut r), rng::normal(&mut r), rng::normal(&mut r)))
        .collect()
}

fn mean_free(sp: &Spaces, seed: u64, stream: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, stream);
    sp.0.split_mean(&rng::normal_vec(&mut r, sp.0.num_vertices())).1
}

/// A random elliptic family with random mean-zero data and data direction.
fn random_family(mesh: &TriangleMesh, sp: &Spaces, seed: u64, data_scale: f64) -> PerturbationFamily {
    let base = CoefficientField::random_real(mesh, 0.5, 2.0, seed).unwrap();
    let data = mean_free(sp, seed, 41).into_iter().map(|v| v * data_scale).collect();
    let shift = mean_free(sp, seed, 42).into_iter().map(|v| v * data_scale).collect();
    PerturbationFamily::new(&sp.0, base, random_direction(mesh, seed), data, shift, 0.4).unwrap()
}

fn lambda1(mesh: &TriangleMesh, kind: MassKind) -> f64 {
    fem::eigensolve(&fem::laplacian(mesh, &RoughMetric::induced(mesh), kind).unwrap(), 2)
        .unwrap()
        .lambda1()
}

fn decades(top: f64, count: i32) -> Vec<f64> {
    (0..count).map(|k| top * 10f64.powi(-k)).collect()
}

#[test]
fn heat_kernel_instance_vanishes_monotonically_with_a_stable_constant() {
    let mut constants = Vec::new();
    for level in [2, 3] {
        let mesh = build_icosphere(level).unwrap();
        let sp = spaces(&mesh, MassKind::Lumped);
        let lap = fem::laplacian(&mesh, &RoughMetric::induced(&mesh), MassKind::Lumped).unwrap();
        let hk = HeatKernel::uniformized(&mesh, &lap).unwrap();
        let y = mesh.vertex_neighbors(0)[0];
        // at short times the slice nearly vanishes at the antipode and κ_x degenerates
        let family = heat_kernel_family(&mesh, &sp.0, &hk, (0, y), [1.0, 0.0], 1.0, 0.5).unwrap();
        let mut magnitudes = decades(family.margin(), 8);
        magnitudes.push(0.0);
        let sweep = solution_difference_sweep(&sp.0, &sp.1, lambda1(&mesh, MassKind::Lumped), &family, &magnitudes).unwrap();
        let ux = solve_exact(&operator(&sp, family.base().clone()), family.data()).unwrap();
        let norm = sp.0.norm_vertex(&ux);

        assert!(is_monotone(&sweep));
        let smallest = sweep.rows.iter().filter(|r| r.magnitude > 0.0).map(|r| r.lhs_norm).fold(f64::INFINITY, f64::min);
        assert!(smallest < 1e-6 * norm, "level {level}: {smallest:e}");
        assert_eq!(sweep.rows.last().unwrap().lhs_norm, 0.0);
        assert!(sweep.rows.iter().all(|r| r.ratio <= 1.0 + 1e-8), "{:?}", sweep.rows);
        assert!((sweep.slope - 1.0).abs() < 0.05, "{}", sweep.slope);
        constants.push(sweep.constant);
    }
    let drift = (constants[1] - constants[0]).abs() / constants[0];
    assert!(drift < 0.2, "{constants:?}");
}

#[test]
fn empirical_constant_is_homogeneous_in_the_data() {
    let mesh = build_icosphere(2).unwrap();
    let sp = spaces(&mesh, MassKind::Consistent);
    let l1 = lambda1(&mesh, MassKind::Consistent);
    let magnitudes = decades(0.1, 4);
    let unit = solution_difference_sweep(&sp.0, &sp.1, l1, &random_family(&mesh, &sp, 3, 1.0), &magnitudes).unwrap();
    for scale in [1e-3, 25.0] {
        let scaled = solution_difference_sweep(&sp.0, &sp.1, l1, &random_family(&mesh, &sp, 3, scale), &magnitudes).unwrap();
        assert!((scaled.constant - unit.constant).abs() <= 1e-8 * unit.constant);
        for (a, b) in unit.rows.iter().zip(&scaled.rows) {
            assert!((b.lhs_norm - scale * a.lhs_norm).abs() <= 1e-8 * scale * a.lhs_norm);
            assert!((b.ratio - a.ratio).abs() <= 1e-8 * a.ratio);
        }
    }
}

#[test]
fn square_root_sweep_is_lipschitz_in_a_random_direction() {
    let mesh = build_icosphere(1).unwrap();
    let sp = spaces(&mesh, MassKind::Consistent);
    let n = mesh.num_vertices();
    let base = CoefficientField::random_real(&mesh, 0.5, 2.0, 11).unwrap();
    let family = PerturbationFamily::new(&sp.0, base.clone(), random_direction(&mesh, 11), vec![0.0; n], vec![0.0; n], 0.4).unwrap();
    let spec = fem::eigensolve(&operator(&sp, base), 11).unwrap();
    let probes: Vec<Vec<f64>> = (1..11).map(|k| spec.vector(k)).chain((0..10).map(|s| mean_free(&sp, s, 43))).collect();
    let mut magnitudes = decades(0.1, 4);
    magnitudes.push(0.0);
    let sweep = sqrt_difference_sweep(&sp.0, &sp.1, &family, &magnitudes, &probes).unwrap();
    assert!((sweep.slope - 1.0).abs() < 0.1, "{}", sweep.slope);
    assert!(is_monotone(&sweep));
    assert_eq!(sweep.rows.last().unwrap().lhs_norm, 0.0);
    // constant probes carry no gradient and are dropped
    let only_constant = vec![vec![1.0; n]];
    assert!(sqrt_difference_sweep(&sp.0, &sp.1, &family, &magnitudes, &only_constant).is_err());
}

#[test]
fn margins_are_enforced_by_the_sweeps() {
    let mesh = build_icosphere(1).unwrap();
    let sp = spaces(&mesh, MassKind::Consistent);
    let family = random_family(&mesh, &sp, 5, 1.0);
    let l1 = lambda1(&mesh, MassKind::Consistent);
    assert!(solution_difference_sweep(&sp.0, &sp.1, l1, &family, &[0.1, 0.5]).is_err());
    assert!(family.coefficients_at(-0.4).is_ok());
    let CoefficientTensors::Real(perturbed) = family.coefficients_at(0.4).unwrap().tensors().clone() else {
        panic!("real family")
    };
    assert!(perturbed.iter().all(|a| a.eigenvalues().0 > 0.0));
}

#[test]
fn sweep_csv_has_the_declared_header() {
    let mesh = build_icosphere(1).unwrap();
    let sp = spaces(&mesh, MassKind::Consistent);
    let family = random_family(&mesh, &sp, 6, 1.0);
    let sweep = solution_difference_sweep(&sp.0, &sp.1, lambda1(&mesh, MassKind::Consistent), &family, &[0.1, 0.0]).unwrap();
    let mut out = Vec::new();
    write_sweep_csv(&mut out, &sweep).unwrap();
    let text = String::from_utf8(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CONTINUITY_HEADER));
    assert_eq!(lines.count(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn a_priori_bound_is_never_violated(seed in 0u64..1000, level in 0u32..2, top in 0.01f64..0.39) {
        let mesh = build_icosphere(level).unwrap();
        let sp = spaces(&mesh, MassKind::Consistent);
        let family = random_family(&mesh, &sp, seed, 1.0);
        let sweep = solution_difference_sweep(&sp.0, &sp.1, lambda1(&mesh, MassKind::Consistent), &family, &[top, -top, 0.1 * top]).unwrap();
        for row in &sweep.rows {
            prop_assert!(row.ratio <= 1.0 + 1e-8, "{:?}", row);
            prop_assert!(row.lhs_norm > 0.0);
        }
    }
}
