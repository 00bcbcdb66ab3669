mod common;

use common::*;
use frk_core::em::{e_step, fit_em, fit_em_from, init_params, phi_newton_terms, q_function, update_alpha, update_beta, update_sigma2, EmConfig};
use frk_core::geometry::{BoundingBox, Location};
use frk_core::model::{build_design_matrices, observation_vector, CorrelationFactor, ModelParams, SufficientStats};
use frk_core::synthetic::{gen_frk, truth_basis, Sampling, ScenarioSpec};
use frk_core::trend::TrendSpec;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn stats(p: &Problem) -> SufficientStats {
    let dm = build_design_matrices(&p.obs, &p.basis, &p.trend).unwrap();
    SufficientStats::new(&observation_vector(&p.obs), &dm).unwrap()
}

/// Q(theta; theta_tilde) from its definition with dense N x N algebra,
/// dropping the same (N + r)/2 ln(2 pi) constant.
fn dense_q(p: &Problem, theta: &ModelParams, m: &DVector<f64>, c: &DMatrix<f64>) -> f64 {
    let s = dense_s(p);
    let e = y(p) - dense_t(p) * DVector::from_column_slice(&theta.alpha) - &s * m;
    let n = p.obs.len() as f64;
    let k = k_matrix(&p.basis, theta.beta, theta.phi);
    let kinv = k.clone().try_inverse().unwrap();
    let v = c + m * m.transpose();
    -0.5 * n * theta.sigma2.ln() - 0.5 * (e.norm_squared() + (s.transpose() * &s * c).trace()) / theta.sigma2
        - 0.5 * k.determinant().ln()
        - 0.5 * (kinv * v).trace()
}

#[test]
fn q_matches_dense_definition() {
    for seed in 0..6 {
        let p = random_problem(70, 6, 100 + seed);
        let post = e_step(&p.obs, &p.basis, &p.trend, &p.params).unwrap();
        let mut theta = p.params.clone();
        theta.sigma2 *= 1.3;
        theta.beta *= 0.7;
        theta.phi += 0.2;
        theta.alpha[1] += 0.1;
        let corr = CorrelationFactor::new(&p.basis.distance_matrix(), theta.phi).unwrap();
        let fast = q_function(&theta, &post, &stats(&p), &corr);
        let dense = dense_q(&p, &theta, &post.mean, &post.cov);
        assert!(rel_err(fast, dense) < 1e-8, "{fast} vs {dense}");
    }
}

#[test]
fn phi_gradient_and_curvature_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..20 {
        let p = random_problem(90, 4 + k % 8, 500 + k as u64);
        let post = e_step(&p.obs, &p.basis, &p.trend, &p.params).unwrap();
        let st = stats(&p);
        let dist = p.basis.distance_matrix();
        let mut theta = p.params.clone();
        theta.phi = rng.random_range(3.0..6.5);
        theta.beta = rng.random_range(0.05..3.0);
        let q_at = |phi: f64| {
            let mut t = theta.clone();
            t.phi = phi;
            q_function(&t, &post, &st, &CorrelationFactor::new(&dist, phi).unwrap())
        };
        let h = 1e-4;
        let fd1 = (q_at(theta.phi + h) - q_at(theta.phi - h)) / (2.0 * h);
        let fd2 = (q_at(theta.phi + h) - 2.0 * q_at(theta.phi) + q_at(theta.phi - h)) / (h * h);
        let corr = CorrelationFactor::new(&dist, theta.phi).unwrap();
        let terms = phi_newton_terms(&corr, &dist, theta.beta, &post.second_moment);
        let g = terms.gradient(theta.phi);
        assert!((g - fd1).abs() <= 1e-5 * fd1.abs().max(1e-3), "dQ/dphi {g} vs {fd1}");
        let c = terms.curvature(theta.phi);
        assert!((c - fd2).abs() <= 1e-3 * fd2.abs().max(1e-2), "d2Q/dphi2 {c} vs {fd2}");
    }
}

#[test]
fn closed_form_updates_are_stationary_points_of_q() {
    let p = random_problem(120, 7, 77);
    let post = e_step(&p.obs, &p.basis, &p.trend, &p.params).unwrap();
    let st = stats(&p);
    let corr = CorrelationFactor::new(&p.basis.distance_matrix(), p.params.phi).unwrap();
    let alpha = update_alpha(&st, &post);
    let sigma2 = update_sigma2(&st, &alpha, &post, 1e-12);
    let beta = update_beta(&post, &corr.inverse).unwrap();
    let best = ModelParams { alpha: alpha.as_slice().to_vec(), sigma2, beta, phi: p.params.phi };
    let q0 = q_function(&best, &post, &st, &corr);
    for (i, step) in [(0usize, 0.01), (1, 0.001)] {
        for sign in [-1.0, 1.0] {
            let mut t = best.clone();
            t.alpha[i] += sign * step;
            assert!(q_function(&t, &post, &st, &corr) < q0);
        }
    }
    for f in [0.99, 1.01] {
        let mut t = best.clone();
        t.sigma2 *= f;
        assert!(q_function(&t, &post, &st, &corr) < q0);
        let mut t = best.clone();
        t.beta *= f;
        assert!(q_function(&t, &post, &st, &corr) < q0);
    }
}

#[test]
fn sigma2_update_recovers_noise_level_in_large_sample() {
    // Field known exactly (very small posterior spread): the update is the
    // mean squared residual, which should sit near the generating variance.
    let bbox = BoundingBox::new(0.0, 0.0, 800.0, 800.0).unwrap();
    let spec = ScenarioSpec {
        bbox,
        sampling: Sampling::Uniform { n: 20_000 },
        trend: TrendSpec::omni(Location::new(400.0, 400.0)),
        alpha: vec![-40.0, 2.73],
        noise_var: 3.0,
        seed: 9,
    };
    let basis = truth_basis(&bbox, 200.0).unwrap();
    let truth = ModelParams { alpha: spec.alpha.clone(), sigma2: 3.0, beta: 0.1, phi: 5.0 };
    let (obs, _) = gen_frk(&spec, &basis, truth.beta, truth.phi).unwrap();
    let dm = build_design_matrices(&obs, &basis, &spec.trend).unwrap();
    let st = SufficientStats::new(&observation_vector(&obs), &dm).unwrap();
    let post = e_step(&obs, &basis, &spec.trend, &truth).unwrap();
    let s2 = update_sigma2(&st, &truth.alpha_vec(), &post, 1e-12);
    assert!((s2 - 3.0).abs() < 0.15, "{s2}");
}

#[test]
fn initialization_is_data_driven_and_seed_free() {
    let p = random_problem(150, 5, 3);
    let cfg = EmConfig::default();
    let a = init_params(&stats(&p), p.basis.tau, &cfg).unwrap();
    let b = init_params(&stats(&p), p.basis.tau, &cfg).unwrap();
    assert_eq!(a, b);
    assert!((a.phi - (p.basis.tau / 5.0).ln()).abs() < 1e-15);
    assert!((a.sigma2 - 1.0 / a.beta).abs() < 1e-12);
}

#[test]
fn likelihood_never_decreases() {
    for seed in 0..3 {
        let p = random_problem(300, 9, 40 + seed);
        let cfg = EmConfig { max_iter: 300, ..EmConfig::default() };
        let st = stats(&p);
        let init = init_params(&st, p.basis.tau, &cfg).unwrap();
        let (_, trace) = fit_em_from(&st, &p.basis, init, &cfg).unwrap();
        let ll = trace.log_likelihoods();
        for w in ll.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
        for rec in &trace.records {
            assert!(rec.q_next >= rec.q_current - 1e-9 * rec.q_current.abs().max(1.0));
        }
    }
}

#[test]
fn fit_is_reproducible() {
    let p = random_problem(200, 6, 8);
    let cfg = EmConfig { max_iter: 200, ..EmConfig::default() };
    let (m1, t1) = fit_em(&p.obs, &p.basis, &p.trend, &cfg).unwrap();
    let (m2, t2) = fit_em(&p.obs, &p.basis, &p.trend, &cfg).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(t1, t2);
}
