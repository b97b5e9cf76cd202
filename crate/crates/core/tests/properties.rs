use std::sync::Arc;

use minn::geometry::{dist, Domain, Point};
use minn::mesh::{build_mesh, l2_norm, mesh_metrics, p1_gradient, FeFunction, Mesh};
use minn::nn::{make_dense_seeded, make_mesh_informed_seeded, Activation, MeshRegistry, MinnModel};
use minn::operators::{area_elementwise, distance_family, hl_maximal, DistanceFamilyParams};
use minn::randfield::{discrete_kl, field_from_coefficients, CovKernel};
use minn::sparsity::{prop1_bound, support_pattern};
use minn::train::{train, Dataset, TrainConfig};
use minn::vascular::{hypoxic_fraction, sample_poisson_points, solve_oxygen, voronoi_network, OxygenConfig};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn domain_strategy() -> impl Strategy<Value = Domain> {
    prop_oneof![
        (0.5..2.0f64, 0.5..2.0f64).prop_map(|(w, h)| Domain::rect([0.0, 0.0], [w, h])),
        (0.5..1.5f64).prop_map(|r| Domain::disk([0.1, -0.2], r)),
        Just(Domain::crescent()),
        Just(Domain::holed_disk()),
    ]
}

fn points(seed: u64, n: usize, lo: f64, hi: f64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [rng.random_range(lo..hi), rng.random_range(lo..hi)]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn mesh_metrics_match_stored(domain in domain_strategy(), h in 0.15..0.5f64) {
        let mesh = build_mesh(&domain, h).unwrap();
        let (hh, hmin, sigma) = mesh_metrics(&mesh).unwrap();
        prop_assert!((hh - mesh.h()).abs() <= 1e-12);
        prop_assert!((hmin - mesh.h_min()).abs() <= 1e-12);
        prop_assert!((sigma - mesh.sigma()).abs() <= 1e-12);
    }

    #[test]
    fn mass_matrix_symmetric_positive_definite(domain in domain_strategy(), h in 0.2..0.5f64) {
        let mesh = build_mesh(&domain, h).unwrap();
        prop_assume!(mesh.n_nodes() <= 500);
        let m = mesh.mass_matrix().to_dense();
        prop_assert_eq!((&m - m.transpose()).abs().max(), 0.0);
        let min = SymmetricEigen::new(m).eigenvalues.min();
        prop_assert!(min > 0.0);
    }

    #[test]
    fn l2_norm_vanishes_only_at_zero(seed in any::<u64>(), zero in any::<bool>()) {
        let mesh = Arc::new(build_mesh(&Domain::unit_disk(), 0.4).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs: Vec<f64> = (0..mesh.n_nodes())
            .map(|_| if zero { 0.0 } else { rng.random_range(-1.0..1.0) })
            .collect();
        let n = l2_norm(&FeFunction::new(mesh, coeffs).unwrap());
        prop_assert!(n >= 0.0);
        prop_assert_eq!(n == 0.0, zero);
    }

    #[test]
    fn p1_gradient_exact_on_affine(a in -3.0..3.0f64, b in -3.0..3.0f64, c in -3.0..3.0f64, domain in domain_strategy()) {
        let mesh = Arc::new(build_mesh(&domain, 0.3).unwrap());
        let f = FeFunction::interpolate(mesh, |x| a * x[0] + b * x[1] + c);
        for g in p1_gradient(&f) {
            prop_assert!((g[0] - a).abs() <= 1e-12 && (g[1] - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn support_monotone_exact_and_symmetric(seed in any::<u64>(), r1 in 0.05..1.0f64, dr in 0.0..1.0f64) {
        let x = points(seed, 40, -1.0, 1.0);
        let xp = points(seed ^ 1, 30, -1.0, 1.0);
        let small = support_pattern(&x, &xp, r1).unwrap();
        let large = support_pattern(&x, &xp, r1 + dr).unwrap();
        for (i, j) in small.entries() {
            prop_assert!(large.contains(i, j));
        }
        for i in 0..xp.len() {
            for j in 0..x.len() {
                let d2 = (x[j][0] - xp[i][0]).powi(2) + (x[j][1] - xp[i][1]).powi(2);
                prop_assert_eq!(small.contains(i, j), d2 <= r1 * r1);
            }
        }
        let sym = support_pattern(&x, &x, r1).unwrap();
        for (i, j) in sym.entries() {
            prop_assert!(sym.contains(j, i));
        }
    }

    #[test]
    fn nnz_within_bound(h_in in 0.1..0.4f64, h_out in 0.1..0.4f64, r in 0.05..1.0f64, domain in domain_strategy()) {
        let a = build_mesh(&domain, h_in).unwrap();
        let b = build_mesh(&domain, h_out).unwrap();
        let p = support_pattern(a.vertices(), b.vertices(), r).unwrap();
        prop_assert!(p.nnz() as f64 <= prop1_bound(&a, &b, r));
    }

    #[test]
    fn scatter_equivalence_and_counts(seed in any::<u64>(), r in 0.3..1.2f64) {
        let a = build_mesh(&Domain::unit_disk(), 0.35).unwrap();
        let b = build_mesh(&Domain::unit_disk(), 0.5).unwrap();
        let mi = make_mesh_informed_seeded(&a, &b, r, Activation::LeakyRelu, seed).unwrap();
        let mut dense = make_dense_seeded(a.n_nodes(), b.n_nodes(), Activation::LeakyRelu, 0).unwrap();
        let w = mi.weight_matrix();
        dense.set_dense_weights(&w).unwrap();
        dense.bias_mut().copy_from_slice(mi.bias());
        prop_assert_eq!(w.iter().filter(|v| **v != 0.0).count(), mi.nnz());
        prop_assert_eq!(mi.param_count(), mi.nnz() + b.n_nodes());
        prop_assert_eq!(dense.param_count(), a.n_nodes() * b.n_nodes() + b.n_nodes());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let v: Vec<f64> = (0..a.n_nodes()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (y1, y2) = (mi.forward(&v).unwrap(), dense.forward(&v).unwrap());
            let diff = y1.iter().zip(&y2).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            prop_assert!(diff <= 1e-10);
        }
    }

    #[test]
    fn zero_bias_layer_is_positively_homogeneous(seed in any::<u64>(), alpha in 0.01..10.0f64) {
        let a = build_mesh(&Domain::unit_disk(), 0.4).unwrap();
        let mut mi = make_mesh_informed_seeded(&a, &a, 0.6, Activation::LeakyRelu, seed).unwrap();
        mi.bias_mut().iter_mut().for_each(|b| *b = 0.0);
        let v: Vec<f64> = points(seed, a.n_nodes(), -1.0, 1.0).iter().map(|p| p[0]).collect();
        let scaled: Vec<f64> = v.iter().map(|x| alpha * x).collect();
        let (y, ys) = (mi.forward(&v).unwrap(), mi.forward(&scaled).unwrap());
        for (p, q) in y.iter().zip(&ys) {
            prop_assert!((alpha * p - q).abs() <= 1e-12 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn kl_field_linear_in_coefficients(seed in any::<u64>()) {
        let mesh = Arc::new(build_mesh(&Domain::unit_disk(), 0.35).unwrap());
        let basis = discrete_kl(CovKernel::Gauss, mesh, 10).unwrap();
        let xi: Vec<f64> = points(seed, 10, -2.0, 2.0).iter().map(|p| p[0]).collect();
        let twice: Vec<f64> = xi.iter().map(|x| 2.0 * x).collect();
        let (f, g) = (field_from_coefficients(&basis, &xi), field_from_coefficients(&basis, &twice));
        for (a, b) in f.coeffs().iter().zip(g.coeffs()) {
            prop_assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn operator_invariants(seed in any::<u64>()) {
        let mesh = Arc::new(build_mesh(&Domain::unit_disk(), 0.3).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_fn = || FeFunction::new(mesh.clone(), (0..mesh.n_nodes()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (f, g) = (rand_fn(), rand_fn());
        for (a, b) in area_elementwise(&f).iter().zip(area_elementwise(&f.map(|v| 2.0 * v))) {
            prop_assert!(b >= *a);
        }
        let sum = FeFunction::new(mesh.clone(), f.coeffs().iter().zip(g.coeffs()).map(|(a, b)| a + b).collect()).unwrap();
        let (mf, mg, ms) = (hl_maximal(&f, 10, 2.0).unwrap(), hl_maximal(&g, 10, 2.0).unwrap(), hl_maximal(&sum, 10, 2.0).unwrap());
        for i in 0..mesh.n_nodes() {
            prop_assert!(ms.coeffs()[i] <= mf.coeffs()[i] + mg.coeffs()[i] + 1e-12);
        }
        let crescent = Arc::new(build_mesh(&Domain::crescent(), 0.2).unwrap());
        let d = distance_family(&DistanceFamilyParams::sample(&mut rng), &crescent).unwrap();
        prop_assert!(d.coeffs().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn hypoxic_fraction_nonincreasing(seed in any::<u64>(), bump in 0.0..0.2f64, node in 0usize..1000) {
        let mesh = Arc::new(build_mesh(&Domain::unit_disk(), 0.2).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..mesh.n_nodes()).map(|_| rng.random_range(0.0..0.2)).collect();
        let mut raised = u.clone();
        raised[node % mesh.n_nodes()] += bump;
        let q0 = hypoxic_fraction(&FeFunction::new(mesh.clone(), u).unwrap(), 0.1);
        let q1 = hypoxic_fraction(&FeFunction::new(mesh, raised).unwrap(), 0.1);
        prop_assert!(q1 <= q0);
    }

    #[test]
    fn voronoi_points_equidistant(seed in any::<u64>(), lambda in 0.5..4.0f64) {
        let pts = sample_poisson_points(lambda, seed).unwrap();
        prop_assume!(pts.len() >= 2);
        let net = voronoi_network(&pts).unwrap();
        for &(a, b) in net.segments() {
            let m = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
            let mut d: Vec<f64> = pts.iter().map(|p| dist(*p, m)).collect();
            d.sort_by(f64::total_cmp);
            prop_assert!(d[1] - d[0] <= 1e-8);
        }
    }
}

#[test]
fn oxygen_solves_are_bitwise_repeatable() {
    let mesh = Arc::new(build_mesh(&Domain::unit_disk(), 0.15).unwrap());
    let net = voronoi_network(&sample_poisson_points(2.0, 11).unwrap()).unwrap();
    let cfg = OxygenConfig::default();
    let a = solve_oxygen(&net, &cfg, &mesh).unwrap();
    let b = solve_oxygen(&net, &cfg, &mesh).unwrap();
    assert!(a.coeffs().iter().zip(b.coeffs()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn training_keeps_off_pattern_weights_zero() {
    let a = Arc::new(build_mesh(&Domain::unit_disk(), 0.4).unwrap());
    let b = Arc::new(build_mesh(&Domain::unit_disk(), 0.3).unwrap());
    let mut registry = MeshRegistry::new();
    registry.insert("a".into(), a.clone());
    registry.insert("b".into(), b.clone());
    let model: MinnModel = minn::nn::parse_architecture("input(a) > mi(a, b, 0.5) > mi(b, b, 0.4)", &registry, 5).unwrap();
    let inputs: Vec<Vec<f64>> = (0..8).map(|s| points(s, a.n_nodes(), -1.0, 1.0).iter().map(|p| p[0]).collect()).collect();
    let targets: Vec<Vec<f64>> = (0..8).map(|s| points(s + 50, b.n_nodes(), -1.0, 1.0).iter().map(|p| p[1]).collect()).collect();
    let data = Dataset::new(inputs, targets, b.clone()).unwrap();
    let (trained, trace) = train(&model, &data, &TrainConfig { epochs: 5, ..TrainConfig::default() }).unwrap();
    for w in trace.windows(2) {
        assert!(w[1].loss <= w[0].loss);
    }
    for layer in trained.layers() {
        let w: DMatrix<f64> = layer.weight_matrix();
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                if !layer.pattern().contains(i, j) {
                    assert_eq!(w[(i, j)], 0.0);
                }
            }
        }
    }
}

fn audit_exhaustive(mesh: &Mesh, samples: usize, seed: u64) -> f64 {
    let (lo, hi) = mesh.domain().bbox();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut taken = 0;
    while taken < samples {
        let p = [rng.random_range(lo[0]..=hi[0]), rng.random_range(lo[1]..=hi[1])];
        if mesh.domain().contains(p) {
            worst = worst.max(mesh.distance_to(p));
            taken += 1;
        }
    }
    worst
}

#[test]
fn mesh_covers_domain_within_h() {
    for domain in [Domain::crescent(), Domain::slotted_rectangle(), Domain::unit_disk(), Domain::holed_disk()] {
        let mesh = build_mesh(&domain, 0.1).unwrap();
        let gap = audit_exhaustive(&mesh, 10_000, 17);
        assert!(gap <= mesh.h(), "{domain}: gap {gap} > h {}", mesh.h());
    }
}
