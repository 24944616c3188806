//! Forward samplers for the IBP family and the truncated atom measure.

use ndarray::Array2;
use rand::Rng;
use statrs::function::gamma::ln_gamma;

use crate::condbern::{ln_odds, sample_row_given_sum_ln};
use crate::error::{Error, Result};
use crate::model::HyperParams;
use crate::quadrature;
use crate::random;

/// A binary feature matrix with no all-zero columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryFeatureMatrix {
    z: Array2<bool>,
    column_counts: Vec<usize>,
}

impl BinaryFeatureMatrix {
    /// Builds from per-row lists of active columns; columns that end up empty
    /// are dropped and the rest keep their relative order.
    fn from_row_lists(rows: &[Vec<usize>], n_cols: usize) -> Self {
        let mut counts = vec![0usize; n_cols];
        for r in rows {
            for &k in r {
                counts[k] += 1;
            }
        }
        let keep: Vec<usize> = (0..n_cols).filter(|&k| counts[k] > 0).collect();
        let mut remap = vec![usize::MAX; n_cols];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let mut z = Array2::from_elem((rows.len(), keep.len()), false);
        for (n, r) in rows.iter().enumerate() {
            for &k in r {
                z[[n, remap[k]]] = true;
            }
        }
        BinaryFeatureMatrix { z, column_counts: keep.iter().map(|&k| counts[k]).collect() }
    }

    pub fn matrix(&self) -> &Array2<bool> {
        &self.z
    }

    pub fn n_rows(&self) -> usize {
        self.z.nrows()
    }

    /// Number of (non-empty) columns.
    pub fn k_plus(&self) -> usize {
        self.z.ncols()
    }

    /// `m_k = Σ_n z_nk`.
    pub fn column_counts(&self) -> &[usize] {
        &self.column_counts
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.z.rows().into_iter().map(|r| r.iter().filter(|&&v| v).count()).collect()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::param("alpha", format!("must be positive, got {alpha}")))
    }
}

fn check_c_sigma(c: f64, sigma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sigma) {
        return Err(Error::param("sigma", format!("must lie in [0, 1), got {sigma}")));
    }
    if !(c > -sigma && c.is_finite()) {
        return Err(Error::param("c", format!("must exceed -sigma, got {c}")));
    }
    Ok(())
}

/// Sequential (culinary) IBP sampler: customer `n` takes dish `k` with
/// probability `m_k / n` and `Poisson(α / n)` new dishes.
pub fn sample_ibp<R: Rng + ?Sized>(alpha: f64, n_rows: usize, rng: &mut R) -> Result<BinaryFeatureMatrix> {
    check_alpha(alpha)?;
    let mut counts: Vec<usize> = Vec::new();
    let mut rows = Vec::with_capacity(n_rows);
    for n in 1..=n_rows {
        let mut row = Vec::new();
        for (k, m) in counts.iter_mut().enumerate() {
            if rng.random::<f64>() * (n as f64) < *m as f64 {
                *m += 1;
                row.push(k);
            }
        }
        let new = random::poisson(alpha / n as f64, rng) as usize;
        for _ in 0..new {
            row.push(counts.len());
            counts.push(1);
        }
        rows.push(row);
    }
    Ok(BinaryFeatureMatrix::from_row_lists(&rows, counts.len()))
}

/// Expected number of new dishes for customer `n` (1-based) in the
/// three-parameter IBP: `α Γ(1+c) Γ(n-1+c+σ) / (Γ(n+c) Γ(c+σ))`.
pub fn three_param_new_dish_rate(alpha: f64, c: f64, sigma: f64, n: usize) -> f64 {
    let n = n as f64;
    alpha * (ln_gamma(1.0 + c) + ln_gamma(n - 1.0 + c + sigma) - ln_gamma(n + c) - ln_gamma(c + sigma)).exp()
}

/// Sequential three-parameter IBP sampler. Existing dish `k` is taken with
/// probability `(m_k - σ) / (n - 1 + c)`.
pub fn sample_3p_ibp<R: Rng + ?Sized>(
    alpha: f64,
    c: f64,
    sigma: f64,
    n_rows: usize,
    rng: &mut R,
) -> Result<BinaryFeatureMatrix> {
    check_alpha(alpha)?;
    check_c_sigma(c, sigma)?;
    let mut counts: Vec<usize> = Vec::new();
    let mut rows = Vec::with_capacity(n_rows);
    for n in 1..=n_rows {
        let denom = n as f64 - 1.0 + c;
        let mut row = Vec::new();
        for (k, m) in counts.iter_mut().enumerate() {
            if rng.random::<f64>() * denom < *m as f64 - sigma {
                *m += 1;
                row.push(k);
            }
        }
        let new = random::poisson(three_param_new_dish_rate(alpha, c, sigma, n), rng) as usize;
        for _ in 0..new {
            row.push(counts.len());
            counts.push(1);
        }
        rows.push(row);
    }
    Ok(BinaryFeatureMatrix::from_row_lists(&rows, counts.len()))
}

/// Density of a single atom weight, `∝ π^{a-1} (1-π)^{b-1}` on `[eps, 1)`.
///
/// With `σ > 0` this is the restricted Lévy density of the three-parameter
/// weight measure (`a = -σ`, `b = c + σ`); with `σ = 0` it is the finite
/// `Beta(αc/K, c)` approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomPrior {
    a: f64,
    b: f64,
    eps: f64,
}

impl AtomPrior {
    pub fn new(alpha: f64, c: f64, sigma: f64, k_max: usize, eps: f64) -> Result<Self> {
        check_c_sigma(c, sigma)?;
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::param("eps_trunc", format!("must lie in (0, 1), got {eps}")));
        }
        if k_max == 0 {
            return Err(Error::param("k_max", "must be at least 1"));
        }
        let (a, b) = if sigma > 0.0 {
            (-sigma, c + sigma)
        } else {
            check_alpha(alpha)?;
            (alpha * c / k_max as f64, c)
        };
        Ok(AtomPrior { a, b, eps })
    }

    pub fn from_hyper(hp: &HyperParams, alpha: f64) -> Result<Self> {
        Self::new(alpha, hp.c, hp.sigma, hp.k_max, hp.eps_trunc)
    }

    /// Exponents `(a, b)` of `π^{a-1} (1-π)^{b-1}`.
    pub fn exponents(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    pub fn floor(&self) -> f64 {
        self.eps
    }

    /// Unnormalized log density; `-∞` outside `[eps, 1)`.
    #[inline]
    pub fn ln_density(&self, pi: f64) -> f64 {
        if !(pi >= self.eps && pi < 1.0) {
            return f64::NEG_INFINITY;
        }
        (self.a - 1.0) * pi.ln() + (self.b - 1.0) * (-pi).ln_1p()
    }

    /// Exact draw by rejection from a two-piece envelope: `π^{a-1}` below
    /// the split point and `(1-π)^{b-1}` above it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let (a, b, eps) = (self.a, self.b, self.eps);
        let split = eps.max(0.5);
        let ln_eps = eps.ln();
        let ln_split = split.ln();
        let span = ln_split - ln_eps;
        // ln ∫_eps^split π^{a-1} dπ
        let ln_left_int = if span == 0.0 {
            f64::NEG_INFINITY
        } else if (a * span).abs() < 1e-12 {
            span.ln()
        } else {
            // (split^a - eps^a) / a = eps^a * expm1(a * span) / a
            a * ln_eps + ((a * span).exp_m1() / a).ln()
        };
        let ln_left_bound = if b < 1.0 { (b - 1.0) * (1.0 - split).ln() } else { 0.0 };
        let ln_right_bound = if a < 1.0 { (a - 1.0) * ln_split } else { 0.0 };
        let ln_right_int = b * (1.0 - split).ln() - b.ln();
        let ln_left = ln_left_int + ln_left_bound;
        let ln_right = ln_right_int + ln_right_bound;
        let p_left = if ln_left == f64::NEG_INFINITY { 0.0 } else { 1.0 / (1.0 + (ln_right - ln_left).exp()) };
        loop {
            let u = random::open01(rng);
            let v = random::open01(rng);
            if rng.random::<f64>() < p_left {
                let ln_pi = if (a * span).abs() < 1e-12 {
                    ln_eps + u * span
                } else {
                    ln_eps + (u * (a * span).exp_m1()).ln_1p() / a
                };
                let pi = ln_pi.exp().clamp(eps, split);
                let ln_accept = (b - 1.0) * (-pi).ln_1p() - ln_left_bound;
                if pi < 1.0 && v.ln() < ln_accept {
                    return pi;
                }
            } else {
                let y = (1.0 - split) * u.powf(1.0 / b);
                let pi = 1.0 - y;
                if pi >= 1.0 || pi < split {
                    continue;
                }
                let ln_accept = (a - 1.0) * pi.ln() - ln_right_bound;
                if v.ln() < ln_accept {
                    return pi;
                }
            }
        }
    }
}

/// Draws `k_max` atom weights iid from the truncated atom density and sorts
/// them in descending order.
pub fn sample_pi_truncated<R: Rng + ?Sized>(
    alpha: f64,
    c: f64,
    sigma: f64,
    k_max: usize,
    eps_trunc: f64,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let prior = AtomPrior::new(alpha, c, sigma, k_max, eps_trunc)?;
    let mut pi: Vec<f64> = (0..k_max).map(|_| prior.sample(rng)).collect();
    pi.sort_by(|x, y| y.total_cmp(x));
    Ok(pi)
}

/// `C(c, σ) = Γ(1+c) / (Γ(1-σ) Γ(c+σ))`, the normalizer of the
/// three-parameter Lévy density.
pub fn levy_constant(c: f64, sigma: f64) -> f64 {
    (ln_gamma(1.0 + c) - ln_gamma(1.0 - sigma) - ln_gamma(c + sigma)).exp()
}

/// `M = ∫_eps^1 C(c,σ) π^{-1-σ} (1-π)^{c+σ-1} dπ`, the expected number of
/// atoms above the floor per unit mass, by adaptive quadrature (relative
/// tolerance `1e-8`).
pub fn levy_mass(eps: f64, c: f64, sigma: f64) -> Result<f64> {
    check_c_sigma(c, sigma)?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::param("eps_trunc", format!("must lie in (0, 1), got {eps}")));
    }
    const TOL: f64 = 1e-8;
    let b = c + sigma;
    let split = eps.max(0.5);
    // Below the split, integrate over u = ln π (the integrand is smooth there).
    let left = if split > eps {
        quadrature::integrate(|u: f64| (-sigma * u + (b - 1.0) * (-u.exp_m1()).ln()).exp(), eps.ln(), split.ln(), TOL)?
    } else {
        0.0
    };
    // Above it, y = 1 - π and v = y^b remove the endpoint singularity:
    // ∫_0^{1-split} y^{b-1} (1-y)^{-1-σ} dy = (1/b) ∫_0^{(1-split)^b} (1 - v^{1/b})^{-1-σ} dv.
    let upper = (1.0 - split).powf(b);
    let right = quadrature::integrate(|v: f64| (1.0 - v.powf(1.0 / b)).powf(-1.0 - sigma), 0.0, upper, TOL)? / b;
    Ok(levy_constant(c, sigma) * (left + right))
}

/// Fills each row by conditional-Bernoulli sampling with the given row sums.
pub fn sample_rows_with_sums<R: Rng + ?Sized>(pi: &[f64], sums: &[usize], rng: &mut R) -> Result<BinaryFeatureMatrix> {
    if let Some(p) = pi.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::Domain(format!("feature weights must lie in (0, 1), got {p}")));
    }
    let log_w: Vec<f64> = pi.iter().map(|&p| ln_odds(p)).collect();
    let mut rows = Vec::with_capacity(sums.len());
    for &s in sums {
        let z = sample_row_given_sum_ln(&log_w, s, rng)?;
        rows.push(z.iter().enumerate().filter(|(_, &v)| v).map(|(k, _)| k).collect::<Vec<_>>());
    }
    Ok(BinaryFeatureMatrix::from_row_lists(&rows, pi.len()))
}

/// Row-sum draw from `NegativeBinomial(r, p)` clamped to `k_max`.
pub fn sample_row_sum<R: Rng + ?Sized>(r: f64, p: f64, k_max: usize, rng: &mut R) -> usize {
    // Gamma–Poisson mixture: λ ~ Gamma(r, scale (1-p)/p), s ~ Poisson(λ).
    let lambda = random::gamma(r, p / (1.0 - p), rng);
    let s = random::poisson(lambda, rng) as usize;
    if s > k_max {
        log::warn!("row-sum draw {s} exceeds k_max = {k_max}; clamping");
        k_max
    } else {
        s
    }
}

/// Combined prior: weights from the truncated atom measure (α drawn from its
/// Gamma prior), row sums from the clamped negative binomial, rows by
/// conditional-Bernoulli sampling.
pub fn sample_3r_ibp<R: Rng + ?Sized>(hp: &HyperParams, n_rows: usize, rng: &mut R) -> Result<BinaryFeatureMatrix> {
    hp.validate()?;
    let alpha = random::gamma(hp.alpha_prior_shape, 1.0 / hp.alpha_prior_scale, rng);
    let pi = sample_pi_truncated(alpha, hp.c, hp.sigma, hp.k_max, hp.eps_trunc, rng)?;
    let sums: Vec<usize> = (0..n_rows).map(|_| sample_row_sum(hp.nb_r, hp.nb_p, hp.k_max, rng)).collect();
    sample_rows_with_sums(&pi, &sums, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_customer_takes_only_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let z = sample_ibp(3.0, 1, &mut rng).unwrap();
            assert_eq!(z.row_sums(), vec![z.k_plus()]);
            assert!(z.column_counts().iter().all(|&m| m == 1));
        }
    }

    #[test]
    fn new_dish_rate_reduces_to_ibp() {
        assert!((three_param_new_dish_rate(2.0, 1.0, 0.0, 1) - 2.0).abs() < 1e-12);
        assert!((three_param_new_dish_rate(2.0, 1.0, 0.0, 5) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!(sample_3p_ibp(1.0, -0.5, 0.2, 3, &mut rng).is_err());
        assert!(sample_3p_ibp(1.0, 1.0, 1.0, 3, &mut rng).is_err());
        assert!(sample_pi_truncated(1.0, 1.0, 0.5, 4, 1.0, &mut rng).is_err());
    }

    #[test]
    fn atoms_stay_in_support_and_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (c, sigma, eps) in [(50.0, 0.999, 1e-6), (1.0, 0.0, 1e-3), (0.2, 0.5, 0.6), (0.1, 0.0, 1e-6)] {
            let pi = sample_pi_truncated(2.0, c, sigma, 200, eps, &mut rng).unwrap();
            assert!(pi.iter().all(|&p| p >= eps && p < 1.0));
            assert!(pi.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn levy_mass_closed_forms() {
        // σ = 0, c = 1: ∫ π^{-1} = ln(1/eps).
        for eps in [1e-2, 1e-6, 1e-12] {
            let m = levy_mass(eps, 1.0, 0.0).unwrap();
            assert!((m - (1.0 / eps).ln()).abs() < 1e-7 * m);
        }
        // σ = 0.5, c = 0.5: C = 1/2 and ∫ π^{-3/2} = 2 (eps^{-1/2} - 1).
        let eps = 1e-4f64;
        let m = levy_mass(eps, 0.5, 0.5).unwrap();
        let want = 0.5 * 2.0 * (eps.powf(-0.5) - 1.0);
        assert!((m - want).abs() < 1e-7 * want);
    }

    #[test]
    fn levy_mass_handles_endpoint_singularity() {
        // b = c + σ = 0.3 < 1: (1-π)^{-0.7} is integrable at 1.
        // With σ = 0, C = Γ(1.3)/Γ(0.3) = 0.3 and
        // ∫_eps^1 π^{-1} (1-π)^{-0.7} = ln(1/eps) + Σ_{n≥1} (0.7)_n/n! · (1 - eps^n)/n.
        // The coefficients decay like n^{-0.3}, so the series tail past N is
        // closed off with coef_N / 0.3.
        let eps = 1e-3f64;
        let mut series = (1.0 / eps).ln();
        let mut coef = 1.0;
        for n in 1..200_000 {
            coef *= (0.7 + n as f64 - 1.0) / n as f64;
            series += coef * (1.0 - eps.powi(n as i32)) / n as f64;
        }
        series += coef / 0.3;
        let want = 0.3 * series;
        let got = levy_mass(eps, 0.3, 0.0).unwrap();
        assert!((got - want).abs() < 1e-4 * want, "got {got} want {want}");
    }

    #[test]
    fn zero_row_sums_give_empty_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = sample_rows_with_sums(&[0.3, 0.6, 0.2], &[0, 0, 0, 0], &mut rng).unwrap();
        assert_eq!(z.k_plus(), 0);
        assert_eq!(z.row_sums(), vec![0; 4]);
    }

    #[test]
    fn rows_respect_requested_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sums = [0, 3, 1, 5, 2];
        let z = sample_rows_with_sums(&[0.9, 0.1, 0.5, 0.5, 0.01], &sums, &mut rng).unwrap();
        assert_eq!(z.row_sums(), sums.to_vec());
    }
}
