mod common;

use std::sync::Arc;

use geoflow::fem::{self, DiscreteSpaces, MassKind};
use geoflow::heat::HeatKernel;
use geoflow::mesh::{build_cone_sphere, build_icosphere, compare_metrics, RoughMetric, TriangleMesh};
use geoflow::Error;
use proptest::prelude::*;

fn kernels(level: u32) -> (TriangleMesh, HeatKernel, HeatKernel) {
    let (mesh, _, spectral, uniform) = kernels_with_spaces(level);
    (mesh, spectral, uniform)
}

fn kernels_with_spaces(level: u32) -> (TriangleMesh, Arc<DiscreteSpaces>, HeatKernel, HeatKernel) {
    let mesh = build_icosphere(level).unwrap();
    let g = RoughMetric::induced(&mesh);
    let consistent = fem::laplacian(&mesh, &g, MassKind::Consistent).unwrap();
    let spectral = HeatKernel::new(&mesh, &consistent, None).unwrap();
    let uniform = HeatKernel::uniformized(&mesh, &fem::laplacian(&mesh, &g, MassKind::Lumped).unwrap()).unwrap();
    (mesh, consistent.spaces().clone(), spectral, uniform)
}

/// Relative gap in `∫ ρ_t(x, z) ρ_s(z, y) dz = ρ_{t+s}(x, y)` under the given pairing.
fn semigroup_gap(hk: &HeatKernel, pairing: impl Fn(&[f64], &[f64]) -> f64, (x, y): (usize, usize), (t, s): (f64, f64)) -> f64 {
    let a = hk.kernel_slice(x, t).unwrap().values;
    let b = hk.kernel_slice(y, s).unwrap().values;
    let want = hk.kernel_slice(x, t + s).unwrap().values[y];
    (pairing(&a, &b) - want).abs() / want
}

#[test]
fn semigroup_composition_on_level_three() {
    let (mesh, spaces, spectral, uniform) = kernels_with_spaces(3);
    let n = mesh.num_vertices();
    let lumped = |a: &[f64], b: &[f64]| uniform.integral(&a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>());
    for pair in [(0, 1), (5, n / 2), (17, n - 1)] {
        for times in [(0.05, 0.1), (0.2, 0.3)] {
            // the consistent-mass kernel composes in its own mass pairing
            assert!(semigroup_gap(&spectral, |a, b| spaces.inner_vertex(a, b), pair, times) < 1e-8);
            assert!(semigroup_gap(&uniform, lumped, pair, times) < 1e-8);
        }
    }
}

#[test]
fn derivative_is_compatible_on_level_three() {
    let (mesh, spectral, uniform) = kernels(3);
    for hk in [&spectral, &uniform] {
        for x in [0, 100, mesh.num_vertices() - 1] {
            let eta = hk.kernel_x_derivative(x, [0.3, -0.8], 0.1).unwrap();
            let norm = hk.integral(&eta.iter().map(|e| e * e).collect::<Vec<_>>()).sqrt();
            let measure = hk.integral(&vec![1.0; eta.len()]);
            assert!(hk.integral(&eta).abs() <= 1e-8 * norm * measure.sqrt());
            assert!(norm > 0.0);
        }
    }
}

#[test]
fn positivity_from_the_minimum_time() {
    let (_, mut spectral, uniform) = kernels(2);
    // consistent-mass kernels dip below zero at short times
    assert!(spectral.all_pairs_min(0.01) < 0.0);
    let t_min = spectral.certify_positivity(&[0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0]);
    assert!(t_min > 0.01 && t_min <= 1.0, "{t_min}");
    assert_eq!(spectral.t_min(), t_min);
    for t in [t_min, 1.0, 5.0] {
        assert!(spectral.all_pairs_min(t) >= 0.0);
    }
    assert!(matches!(spectral.kernel_slice(0, 0.5 * t_min), Err(Error::Truncation { .. })));
    for t in [1e-3, 0.01, 0.1, 1.0] {
        assert!(uniform.all_pairs_min(t) >= 0.0, "t {t}");
    }
    assert!(uniform.all_pairs_min(1.0) > 0.0);
}

#[test]
fn truncated_kernels_refuse_small_times() {
    let mesh = build_icosphere(2).unwrap();
    let lap = fem::laplacian(&mesh, &RoughMetric::induced(&mesh), MassKind::Consistent).unwrap();
    let hk = HeatKernel::new(&mesh, &lap, Some(40)).unwrap();
    assert!(hk.t_min() > 0.0);
    assert!(matches!(hk.kernel_slice(0, 0.5 * hk.t_min()), Err(Error::Truncation { .. })));
    let s = hk.kernel_slice(0, hk.t_min()).unwrap();
    assert!((hk.integral(&s.values) - 1.0).abs() < 1e-10);
}

#[test]
fn rough_metric_kernel_equals_divergence_form_kernel() {
    let cone = build_cone_sphere(std::f64::consts::PI, 2).unwrap();
    let g = RoughMetric::induced(&cone.mesh);
    let pair = compare_metrics(&g, &cone.metric).unwrap();
    let direct = fem::laplacian(&cone.mesh, &cone.metric, MassKind::Consistent).unwrap();
    let div_form = fem::divergence_form_laplacian(&cone.mesh, &pair, MassKind::Consistent).unwrap();
    let a = HeatKernel::new(&cone.mesh, &direct, None).unwrap();
    let b = HeatKernel::new(&cone.mesh, &div_form, None).unwrap();
    for x in [0, 7, 100] {
        for t in [0.05, 0.3] {
            let (sa, sb) = (a.kernel_slice(x, t).unwrap().values, b.kernel_slice(x, t).unwrap().values);
            let scale = sa.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let gap = sa.iter().zip(&sb).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
            assert!(gap <= 1e-8 * scale, "x {x} t {t}: {gap:e}");
        }
    }
}

#[test]
fn long_time_limit_is_uniform() {
    let (_, spectral, _) = kernels(1);
    let s = spectral.kernel_slice(3, 50.0).unwrap();
    let total = spectral.integral(&vec![1.0; s.values.len()]);
    assert!(s.values.iter().all(|v| (v - 1.0 / total).abs() < 1e-10));
    let mut out = Vec::new();
    s.write_csv(&mut out).unwrap();
    assert!(String::from_utf8(out).unwrap().starts_with("y_vertex,value\n"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mass_symmetry_and_linearity(x in 0usize..162, y in 0usize..162, t in 0.01f64..1.0, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        thread_local! {
            static KERNELS: (TriangleMesh, HeatKernel, HeatKernel) = kernels(2);
        }
        KERNELS.with(|(_, spectral, uniform)| {
            for hk in [spectral, uniform] {
                let sx = hk.kernel_slice(x, t).unwrap().values;
                let sy = hk.kernel_slice(y, t).unwrap().values;
                assert!((hk.integral(&sx) - 1.0).abs() < 1e-10);
                assert!((sx[y] - sy[x]).abs() <= 1e-10 * sx[x].max(sy[y]));
                let u = hk.kernel_x_derivative(x, [1.0, 0.0], t).unwrap();
                let v = hk.kernel_x_derivative(x, [0.0, 1.0], t).unwrap();
                let w = hk.kernel_x_derivative(x, [a, b], t).unwrap();
                let scale = u.iter().chain(&v).fold(0.0f64, |m, z| m.max(z.abs()));
                assert!(w.iter().zip(u.iter().zip(&v)).all(|(w, (u, v))| (w - a * u - b * v).abs() <= 1e-12 * scale));
                assert!(hk.kernel_x_derivative(x, [0.0, 0.0], t).unwrap().iter().all(|z| *z == 0.0));
            }
        });
    }
}
