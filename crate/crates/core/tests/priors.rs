mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use s3ribp::condbern::RowSumPmf;
use s3ribp::model::negbin_log_pmf;
use s3ribp::priors::{sample_3p_ibp, sample_3r_ibp, sample_ibp, sample_pi_truncated, three_param_new_dish_rate};
use s3ribp::HyperParams;

#[test]
fn ibp_row_sum_mean_alpha_three() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draws: Vec<f64> = (0..100_000).map(|_| sample_ibp(3.0, 1, &mut rng).unwrap().row_sums()[0] as f64).collect();
    let (m, se) = iid_mean_se(&draws);
    assert!((m - 3.0).abs() < 3.0 * se, "mean {m}, se {se}");
}

#[test]
fn ibp_rows_are_exchangeable() {
    let (alpha, n_rows, reps) = (2.0, 8, 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut per_row = vec![Vec::with_capacity(reps); n_rows];
    for _ in 0..reps {
        let z = sample_ibp(alpha, n_rows, &mut rng).unwrap();
        for (n, s) in z.row_sums().into_iter().enumerate() {
            per_row[n].push(s as f64);
        }
    }
    for (n, xs) in per_row.iter().enumerate() {
        let (m, se) = iid_mean_se(xs);
        assert!((m - alpha).abs() < 3.0 * se, "row {n}: mean {m}, se {se}");
    }
}

#[test]
fn ibp_expected_features() {
    let (alpha, n_rows) = (2.0, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k: Vec<f64> = (0..10_000).map(|_| sample_ibp(alpha, n_rows, &mut rng).unwrap().k_plus() as f64).collect();
    let want = alpha * (1..=n_rows).map(|i| 1.0 / i as f64).sum::<f64>();
    assert!((want - 10.375).abs() < 1e-3);
    let (m, se) = iid_mean_se(&k);
    assert!((m - want).abs() < 3.0 * se);
}

#[test]
fn three_param_rate_cancels() {
    assert!((three_param_new_dish_rate(2.0, 1.0, 0.0, 5) - 2.0 / 5.0).abs() < 1e-12);
}

#[test]
fn three_param_matches_ibp() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = histogram((0..10_000).map(|_| sample_ibp(1.5, 30, &mut rng).unwrap().k_plus()));
    let b = histogram((0..10_000).map(|_| sample_3p_ibp(1.5, 1.0, 0.0, 30, &mut rng).unwrap().k_plus()));
    let (_, p) = chi_square_two_sample(&a, &b);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn stable_exponent_thickens_the_tail() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let flat: Vec<f64> =
        (0..10_000).map(|_| sample_3p_ibp(2.0, 1.0, 0.0, 50, &mut rng).unwrap().k_plus() as f64).collect();
    let stable: Vec<f64> =
        (0..10_000).map(|_| sample_3p_ibp(2.0, 1.0, 0.5, 50, &mut rng).unwrap().k_plus() as f64).collect();
    let p = mann_whitney_greater(&flat, &stable);
    assert!(p < 0.01, "p = {p}");
}

#[test]
fn truncated_atoms_follow_levy_density() {
    let (c, sigma, eps) = (1.0, 0.5, 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut xs: Vec<f64> =
        (0..100).flat_map(|_| sample_pi_truncated(1.0, c, sigma, 1_000, eps, &mut rng).unwrap()).collect();
    assert!(xs.iter().all(|&p| (eps..1.0).contains(&p)));
    xs.sort_by(f64::total_cmp);
    let g = move |p: f64| p.powf(-1.0 - sigma) * (1.0 - p).powf(c + sigma - 1.0);
    let cdf = quadrature_cdf(g, eps, &xs);
    let d = ks_distance(&xs, &cdf);
    assert!(d < 0.02, "KS distance {d}");
}

#[test]
fn finite_beta_model_when_sigma_is_zero() {
    let (alpha, k_max, eps) = (2.0, 1_000, 1e-6);
    let a = alpha / k_max as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut xs: Vec<f64> =
        (0..100).flat_map(|_| sample_pi_truncated(alpha, 1.0, 0.0, k_max, eps, &mut rng).unwrap()).collect();
    xs.sort_by(f64::total_cmp);
    // Beta(a, 1) restricted to [eps, 1) has CDF (x^a - eps^a) / (1 - eps^a).
    let cdf: Vec<f64> = xs.iter().map(|&x| (x.powf(a) - eps.powf(a)) / (1.0 - eps.powf(a))).collect();
    let d = ks_distance(&xs, &cdf);
    assert!(d < 0.02, "KS distance {d}");
}

#[test]
fn combined_prior_row_sums_follow_f() {
    let (r, p, k_max) = (2.0, 0.5, 30);
    let probs: Vec<f64> = (0..=k_max).map(|s| negbin_log_pmf(s as u64, r, p).unwrap().exp()).collect();
    for seed in [8, 9] {
        let hp = HyperParams { nb_r: r, nb_p: p, k_max, sigma: 0.5, c: 1.0, ..HyperParams::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = sample_3r_ibp(&hp, 10_000, &mut rng).unwrap();
        let mut observed = histogram(z.row_sums());
        observed.resize(k_max + 1, 0);
        let (_, pval) = chi_square_gof(&observed, &probs);
        assert!(pval > 0.01, "seed {seed}: p = {pval}");
    }
}

#[test]
fn default_row_sum_prior_mean_is_nine() {
    let hp = HyperParams { nb_r: 1.0, nb_p: 0.1, ..HyperParams::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let z = sample_3r_ibp(&hp, 10_000, &mut rng).unwrap();
    let sums: Vec<f64> = z.row_sums().into_iter().map(|s| s as f64).collect();
    let (m, se) = iid_mean_se(&sums);
    assert!((m - 9.0).abs() < 3.0 * se, "mean {m}, se {se}");
}

#[test]
fn clamped_pmf_puts_the_tail_on_k_max() {
    let f = RowSumPmf::negative_binomial_clamped(1.0, 0.1, 5).unwrap();
    let tail: f64 = (5..2_000).map(|s| negbin_log_pmf(s, 1.0, 0.1).unwrap().exp()).sum();
    assert!((f.ln_pmf(5).exp() - tail).abs() < 1e-12);
}
