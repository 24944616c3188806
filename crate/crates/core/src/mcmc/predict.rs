use crate::condbern::ln_sum_exp;
use crate::model::{poisson_ln_pmf_unchecked, PosteriorSummary};

/// `ln (1/S) Σ_s Poisson(x; λ_s)` with `λ_s = Σ_k z^s_nk B^s_kd`.
///
/// Returns `-inf` when no retained sample gives `x` positive probability, or
/// when nothing was retained.
pub fn predictive_log_lik(summary: &PosteriorSummary, cell: (usize, usize), x: u64) -> f64 {
    let (n, d) = cell;
    let terms: Vec<f64> = summary.samples.iter().map(|s| poisson_ln_pmf_unchecked(x, s.rate(n, d))).collect();
    if terms.is_empty() {
        return f64::NEG_INFINITY;
    }
    ln_sum_exp(terms.iter().copied()) - (terms.len() as f64).ln()
}
