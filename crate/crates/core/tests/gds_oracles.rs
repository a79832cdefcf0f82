mod common;

use common::oracles::{brute_nearest, gds_oracle};

use gdsplat::density::{
    all_nearest_gds, build_index, densify_and_prune, gds, nearest_gds, nearest_neighbor, plan_densification, Decision,
    DensifyReport, GdsConfig, GdsForm,
};
use gdsplat::gaussian::{build_covariance, Gaussian3D, GaussianCloud};
use nalgebra::Vector3;
use rand::Rng;

#[test]
fn both_forms_match_dense_eigen_oracle() {
    let mut rng = common::rng(21);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let a = common::random_gaussian(&mut rng, 1.0, (0.2, 1.5), (0.1, 0.9));
        let b = common::random_gaussian(&mut rng, 1.0, (0.2, 1.5), (0.1, 0.9));
        for form in [GdsForm::Wasserstein, GdsForm::Literal] {
            let err = (gds(&a, &b, form).unwrap() - gds_oracle(&a, &b, form)).abs();
            worst = worst.max(err);
        }
    }
    assert!(worst <= 1e-8, "worst deviation {worst:e}");
}

#[test]
fn self_distance_is_zero() {
    let mut rng = common::rng(22);
    for _ in 0..200 {
        let g = common::random_gaussian(&mut rng, 2.0, (0.01, 2.0), (0.1, 0.9));
        assert!(gds(&g, &g, GdsForm::Wasserstein).unwrap().abs() <= 1e-8);
    }
}

#[test]
fn wasserstein_is_symmetric_and_nonnegative() {
    let mut rng = common::rng(23);
    for _ in 0..200 {
        let a = common::random_gaussian(&mut rng, 1.0, (0.02, 1.0), (0.1, 0.9));
        let b = common::random_gaussian(&mut rng, 1.0, (0.02, 1.0), (0.1, 0.9));
        let ab = gds(&a, &b, GdsForm::Wasserstein).unwrap();
        let ba = gds(&b, &a, GdsForm::Wasserstein).unwrap();
        assert!(ab >= 0.0);
        assert!((ab - ba).abs() <= 1e-8);
    }
}

#[test]
fn vanishing_covariances_leave_the_position_term() {
    let mut rng = common::rng(24);
    let mut a = common::random_gaussian(&mut rng, 1.0, (0.1, 0.2), (0.1, 0.9));
    let mut b = common::random_gaussian(&mut rng, 1.0, (0.1, 0.2), (0.1, 0.9));
    a.log_scale = a.log_scale.add_scalar(-12.0);
    b.log_scale = b.log_scale.add_scalar(-12.0);
    let pos = (a.mu - b.mu).norm_squared();
    assert!((gds(&a, &b, GdsForm::Wasserstein).unwrap() - pos).abs() < 1e-9);
}

#[test]
fn trace_identity_from_factorization() {
    let mut rng = common::rng(25);
    for _ in 0..1000 {
        let g = common::random_gaussian(&mut rng, 1.0, (0.01, 3.0), (0.1, 0.9));
        let full = build_covariance(&g).unwrap().trace();
        let factored: f64 = g.log_scale.iter().map(|l| (2.0 * l).exp()).sum();
        assert!((full - factored).abs() <= 1e-10 * factored.max(1.0), "{full} vs {factored}");
        assert!((g.covariance_trace() - factored).abs() <= 1e-12 * factored.max(1.0));
    }
}

fn check_against_brute_force(n: usize, seed: u64) {
    let mut rng = common::rng(seed);
    let cloud = common::random_cloud(&mut rng, n, 1.0, (0.01, 0.1), (0.1, 0.9));
    let index = build_index(&cloud);
    for i in 0..n {
        let j = brute_nearest(&cloud, i);
        assert_eq!(nearest_neighbor(&cloud, &index, i).unwrap(), j, "query {i}");
        let expect = gds(&cloud.gaussians()[i], &cloud.gaussians()[j], GdsForm::Wasserstein).unwrap();
        assert_eq!(nearest_gds(&cloud, &index, i, GdsForm::Wasserstein).unwrap(), expect);
    }
}

#[test]
fn nearest_gds_equals_brute_force_500() {
    check_against_brute_force(500, 26);
}

#[test]
fn nearest_gds_equals_brute_force_2000() {
    check_against_brute_force(2000, 27);
}

#[test]
fn duplicate_positions_resolve_to_smallest_id() {
    // A lattice has many equidistant neighbours.
    let mut gs = Vec::new();
    for x in 0..6 {
        for y in 0..6 {
            for z in 0..6 {
                gs.push(Gaussian3D::isotropic(Vector3::new(x as f64, y as f64, z as f64), 0.1, 0.5, Vector3::zeros()));
            }
        }
    }
    gs.push(gs[40]);
    let cloud = GaussianCloud::from_gaussians(gs);
    let index = build_index(&cloud);
    for i in 0..cloud.len() {
        assert_eq!(nearest_neighbor(&cloud, &index, i).unwrap(), brute_nearest(&cloud, i));
    }
}

#[test]
fn two_gaussian_pair_is_symmetric() {
    let mut rng = common::rng(28);
    let cloud = common::random_cloud(&mut rng, 2, 1.0, (0.05, 0.3), (0.1, 0.9));
    let v = all_nearest_gds(&cloud, GdsForm::Wasserstein).unwrap();
    assert!((v[0] - v[1]).abs() <= 1e-12);
}

fn iso(x: f64, scale: f64, opacity: f64) -> Gaussian3D {
    Gaussian3D::isotropic(Vector3::new(x, 0.0, 0.0), scale, opacity, Vector3::repeat(0.5))
}

#[test]
fn scripted_scene_follows_rule_table() {
    // Scene extent 10: split above 0.1 max scale.
    let mut cloud = GaussianCloud::from_gaussians(vec![
        iso(0.0, 0.01, 0.5),   // large gradient, far neighbour, small: clone
        iso(1.0, 0.5, 0.5),    // large gradient, far neighbour, big: split
        iso(5.0, 0.02, 0.5),   // large gradient, close twin: blocked
        iso(5.05, 0.02, 0.5),  // large gradient, close twin: blocked
        iso(10.0, 0.02, 0.001), // small gradient: kept, then pruned
        iso(20.0, 0.02, 0.5),  // never visible: kept
    ]);
    for (i, g) in [1e-3, 1e-3, 1e-3, 1e-3, 1e-5].iter().enumerate() {
        cloud.accumulate_grad(i, *g);
    }
    let cfg = GdsConfig::default();
    let plan = plan_densification(&cloud, &cfg, 10.0);
    use Decision::*;
    assert_eq!(plan, vec![Clone, Split, Blocked, Blocked, Keep, Keep]);

    let ids_before = cloud.ids().to_vec();
    let mut rng = common::rng(29);
    let report = densify_and_prune(&mut cloud, &cfg, 10.0, &mut rng);
    assert_eq!(report, DensifyReport { n_split: 1, n_clone: 1, n_prune: 1, n_gds_blocked: 2 });
    // 6 − split parent − pruned + clone + 2 children.
    assert_eq!(cloud.len(), 7);
    assert_eq!(&cloud.ids()[..4], &[ids_before[0], ids_before[2], ids_before[3], ids_before[5]]);
    assert!(cloud.ids()[4..].iter().all(|&id| id >= 6));
    assert!(cloud.grad_accum().iter().all(|a| *a == [0.0, 0.0]));
    // Children carry the shrunk scale.
    let child = &cloud.gaussians()[5];
    assert!((child.scales().x - 0.5 / 1.6).abs() < 1e-12);
}

#[test]
fn gate_off_never_blocks() {
    let mut rng = common::rng(30);
    let mut cloud = common::random_cloud(&mut rng, 200, 0.3, (0.01, 0.05), (0.1, 0.9));
    for i in 0..cloud.len() {
        cloud.accumulate_grad(i, rng.random_range(0.0..1e-3));
    }
    let cfg = GdsConfig { threshold: 0.0, ..GdsConfig::default() };
    let report = densify_and_prune(&mut cloud, &cfg, 2.0, &mut rng);
    assert_eq!(report.n_gds_blocked, 0);
    assert!(report.densified() > 0);
}
