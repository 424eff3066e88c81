use lsap_core::properties::{
    check_many_to_one, check_scale_invariance, construct_w_prime, find_z_prime, probe_w,
    rank_deficient_fixture, run_property_suite, solve_alignment_shift, PIXEL_TOLERANCE,
};
use lsap_core::rng::{sample_standard_normal, RngState};
use lsap_core::{Generator, GeneratorConfig, Tensor};
use nalgebra::{DMatrix, DVector};
use std::sync::OnceLock;

fn gen() -> &'static Generator {
    static G: OnceLock<Generator> = OnceLock::new();
    G.get_or_init(|| Generator::init(GeneratorConfig::default(), 1).unwrap())
}

fn normal(seed: u64, shape: &[usize]) -> Tensor {
    sample_standard_normal(&mut RngState::new(seed), shape).unwrap()
}

fn matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.shape()[0], t.shape()[1], t.data())
}

/// `‖(I − A A⁺) r‖` via an SVD pseudo-inverse.
fn projection_residual(a: &Tensor, rhs: &[f64]) -> f64 {
    let m = matrix(a);
    let pinv = m.clone().pseudo_inverse(1e-12).unwrap();
    let r = DVector::from_column_slice(rhs);
    (&r - &m * (pinv * &r)).norm()
}

#[test]
fn scale_checks() {
    let g = gen();
    for l in 0..g.k() {
        assert_eq!(check_scale_invariance(g, 3, l, 1.0).unwrap().deviation, 0.0);
        for a in [2.5, 1e-6] {
            let r = check_scale_invariance(g, 3, l, a).unwrap();
            assert!(r.passed && r.deviation < 1e-9, "layer {} a {}: {:e}", l, a, r.deviation);
        }
    }
    assert!(check_scale_invariance(g, 3, 0, 0.0).is_err());
    assert!(check_scale_invariance(g, 3, 6, 2.0).is_err());
}

#[test]
fn shift_of_unit_scale_is_zero() {
    let aff = &gen().affines[2];
    let ls = solve_alignment_shift(&aff.weight, &aff.bias, 1.0).unwrap();
    assert!(ls.solution.iter().all(|v| *v == 0.0));
    assert_eq!(ls.residual, 0.0);
}

#[test]
fn square_shift_matches_direct_solve() {
    let a = normal(1, &[8, 8]);
    let b = normal(2, &[8]);
    let ls = solve_alignment_shift(&a, &b, 3.0).unwrap();
    let rhs = DVector::from_iterator(8, b.data().iter().map(|v| 2.0 * v));
    let direct = matrix(&a).lu().solve(&rhs).unwrap();
    assert!(ls.residual < 1e-10);
    assert_eq!(ls.rank, 8);
    for (x, y) in ls.solution.iter().zip(direct.iter()) {
        assert!((x - y).abs() < 1e-10 * y.abs().max(1.0));
    }
}

#[test]
fn residual_matches_pseudo_inverse() {
    // full-row-rank generator layers, a tall overdetermined system and a rank-2 product
    let u = normal(3, &[6, 2]);
    let v = normal(4, &[2, 5]);
    let low_rank = {
        let p = matrix(&u) * matrix(&v);
        Tensor::new(vec![6, 5], p.transpose().as_slice().to_vec()).unwrap()
    };
    let mut cases = vec![(normal(5, &[10, 4]), normal(6, &[10])), (low_rank, normal(7, &[6]))];
    for aff in &gen().affines {
        cases.push((aff.weight.clone(), aff.bias.clone()));
    }
    for (a_mat, b) in &cases {
        for a in [0.5, 3.0] {
            let ls = solve_alignment_shift(a_mat, b, a).unwrap();
            let rhs: Vec<f64> = b.data().iter().map(|v| (a - 1.0) * v).collect();
            let want = projection_residual(a_mat, &rhs);
            assert!((ls.residual - want).abs() < 1e-10, "{} vs {}", ls.residual, want);
        }
    }
}

#[test]
fn w_prime_chain_on_every_layer() {
    let g = gen();
    let w = probe_w(g, 5).unwrap();
    for l in 0..g.k() {
        let same = construct_w_prime(g, &w, l, 1.0).unwrap();
        assert_eq!(same.w_prime, w);
        assert_eq!(same.deviation, 0.0);
        for a in [0.5, 3.0] {
            let wp = construct_w_prime(g, &w, l, a).unwrap();
            assert!(wp.residual < 1e-10);
            assert!(wp.deviation < 1e-8, "layer {} a {}: {:e}", l, a, wp.deviation);
            assert!(wp.w_prime.max_abs_diff(&w) > 1e-6);
        }
    }
}

#[test]
fn many_to_one_on_every_layer() {
    let g = gen();
    let w = probe_w(g, 6).unwrap();
    for l in 0..g.k() {
        let r = check_many_to_one(g, &w, l, 1.0, 6).unwrap();
        assert_eq!(r.pixel_deviation, Some(0.0));
        let r = check_many_to_one(g, &w, l, 3.0, 6).unwrap();
        assert!(r.passed, "{:?}", r);
        assert!(r.pixel_deviation.unwrap() < PIXEL_TOLERANCE);
        assert!(r.style_deviation.unwrap() < 1e-8);
        assert!(r.residual.unwrap() < 1e-10);
    }
}

#[test]
fn rank_deficient_fixture_reports_its_residual() {
    let g = gen();
    let f = rank_deficient_fixture(g, 0).unwrap();
    let aff = &f.affines[0];
    let ls = solve_alignment_shift(&aff.weight, &aff.bias, 3.0).unwrap();
    let rhs: Vec<f64> = aff.bias.data().iter().map(|v| 2.0 * v).collect();
    assert!(ls.residual > 1e-3);
    assert!((ls.residual - projection_residual(&aff.weight, &rhs)).abs() < 1e-10);
    assert_eq!(ls.rank, aff.weight.shape()[0] - 1);
    let r = check_many_to_one(&f, &probe_w(g, 7).unwrap(), 0, 3.0, 7).unwrap();
    assert!(!r.passed);
    assert!((r.residual.unwrap() - ls.residual).abs() < 1e-12);
    assert!(r.note.is_some());
}

#[test]
fn z_prime_at_unit_scale_is_immediate() {
    let g = gen();
    let z = g.sample_z(8, 0).unwrap();
    let zp = find_z_prime(g, &z, 0, 1.0, 100, 8).unwrap();
    assert!(zp.deviation < 1e-10 && zp.converged);
    assert_eq!(zp.steps_run, 0);
}

#[test]
fn z_prime_non_convergence_is_a_report() {
    let g = gen();
    let z = g.sample_z(9, 0).unwrap();
    let zp = find_z_prime(g, &z, 0, 2.0, 5, 9).unwrap();
    assert!(!zp.converged);
    assert!(zp.deviation > 1e-2);
}

#[test]
fn z_prime_search_succeeds_on_most_seeds() {
    let g = gen();
    let mut ok = 0;
    for seed in 0..10 {
        let z = g.sample_z(100 + seed, 0).unwrap();
        let zp = find_z_prime(g, &z, 0, 2.0, 20_000, seed).unwrap();
        if zp.deviation < 1e-3 && zp.distance > 1e-6 {
            ok += 1;
        }
    }
    assert!(ok >= 8, "{}/10 seeds converged", ok);
}

#[test]
fn suite_is_pure_and_complete() {
    let g = gen();
    let a = run_property_suite(g, 11, 0, 0).unwrap();
    let b = run_property_suite(g, 11, 0, 0).unwrap();
    assert_eq!(a, b);
    let count = |name: &str| a.iter().filter(|r| r.check == name).count();
    assert_eq!(count("scale_invariance"), 24);
    assert_eq!(count("alignment_shift"), 12);
    assert_eq!(count("w_prime"), 12);
    assert_eq!(count("many_to_one"), 12);
    assert_eq!(count("rank_deficient_fixture"), 1);
    assert!(a.iter().all(|r| r.passed), "{:?}", a.iter().find(|r| !r.passed));
    assert!(a.iter().all(|r| r.deviation >= 0.0));
}
