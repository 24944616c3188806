//! Bernoulli vectors conditioned on their sum.
//!
//! For independent `z_k ~ Bernoulli(π_k)` with odds `w_k = π_k / (1 - π_k)`,
//! `P(z | Σz = s) = Π_{k∈z} w_k / e_s(w)` where `e_s` is the elementary
//! symmetric polynomial of degree `s`. Everything here works with `ln e_s`
//! so odds spanning many orders of magnitude stay representable.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::negbin_log_pmf;

/// `ln(e^a + e^b)` with `-∞` as the additive identity.
#[inline]
pub(crate) fn ln_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln Σ exp(x_i)`.
pub(crate) fn ln_sum_exp(xs: impl IntoIterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = xs.into_iter().collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Log odds `ln(π / (1 - π))`.
#[inline]
pub fn ln_odds(pi: f64) -> f64 {
    pi.ln() - (-pi).ln_1p()
}

/// `ln e_0 … ln e_K` of an odds vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LogEspTable {
    log_e: Vec<f64>,
}

impl LogEspTable {
    /// Builds the table from log odds with the `O(K²)` recurrence
    /// `e_s ← e_s + w_k e_{s-1}`.
    pub fn from_log_odds(log_w: &[f64]) -> Self {
        let mut log_e = vec![f64::NEG_INFINITY; log_w.len() + 1];
        log_e[0] = 0.0;
        for (k, &lw) in log_w.iter().enumerate() {
            for s in (1..=k + 1).rev() {
                log_e[s] = ln_add(log_e[s], lw + log_e[s - 1]);
            }
        }
        LogEspTable { log_e }
    }

    /// `ln e_s`; `-∞` above the degree.
    #[inline]
    pub fn ln(&self, s: usize) -> f64 {
        self.log_e.get(s).copied().unwrap_or(f64::NEG_INFINITY)
    }

    /// Number of odds the table was built from.
    pub fn degree(&self) -> usize {
        self.log_e.len() - 1
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.log_e
    }
}

/// Log elementary symmetric polynomials of non-negative odds.
pub fn log_esp(odds: &[f64]) -> Result<LogEspTable> {
    if let Some(w) = odds.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::Domain(format!("odds must be finite and non-negative, got {w}")));
    }
    let log_w: Vec<f64> = odds.iter().map(|w| w.ln()).collect();
    Ok(LogEspTable::from_log_odds(&log_w))
}

fn check_weights(pi: &[f64]) -> Result<()> {
    match pi.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        Some(p) => Err(Error::Domain(format!("feature weights must lie in (0, 1), got {p}"))),
        None => Ok(()),
    }
}

/// `P(z_k = 1 | Σ z = s)` for every `k`.
pub fn inclusion_probs(pi: &[f64], s: usize) -> Result<Vec<f64>> {
    check_weights(pi)?;
    let k_len = pi.len();
    if s > k_len {
        return Err(Error::Domain(format!("target sum {s} exceeds {k_len} coordinates")));
    }
    if s == 0 {
        return Ok(vec![0.0; k_len]);
    }
    if s == k_len {
        return Ok(vec![1.0; k_len]);
    }
    let log_w: Vec<f64> = pi.iter().map(|&p| ln_odds(p)).collect();
    let full = LogEspTable::from_log_odds(&log_w);
    let mut rest = Vec::with_capacity(k_len - 1);
    Ok((0..k_len)
        .map(|k| {
            rest.clear();
            rest.extend(log_w.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, &v)| v));
            let without = LogEspTable::from_log_odds(&rest);
            (log_w[k] + without.ln(s - 1) - full.ln(s)).exp()
        })
        .collect())
}

/// Exact draw of a binary vector with `Σ z = s` from the conditional
/// Bernoulli distribution, by a sequential pass over suffix ESP tables.
pub fn sample_row_given_sum<R: Rng + ?Sized>(pi: &[f64], s: usize, rng: &mut R) -> Result<Vec<bool>> {
    check_weights(pi)?;
    let log_w: Vec<f64> = pi.iter().map(|&p| ln_odds(p)).collect();
    sample_row_given_sum_ln(&log_w, s, rng)
}

pub(crate) fn sample_row_given_sum_ln<R: Rng + ?Sized>(log_w: &[f64], s: usize, rng: &mut R) -> Result<Vec<bool>> {
    let k_len = log_w.len();
    if s > k_len {
        return Err(Error::Domain(format!("target sum {s} exceeds {k_len} coordinates")));
    }
    let mut z = vec![false; k_len];
    if s == 0 {
        return Ok(z);
    }
    // suffix[k][j] = ln e_j(w_k, …, w_{K-1}), for j ≤ s.
    let width = s + 1;
    let mut suffix = vec![f64::NEG_INFINITY; (k_len + 1) * width];
    suffix[k_len * width] = 0.0;
    for k in (0..k_len).rev() {
        let (head, tail) = suffix.split_at_mut((k + 1) * width);
        let next = &tail[..width];
        let cur = &mut head[k * width..];
        cur[0] = 0.0;
        for j in 1..width {
            cur[j] = ln_add(next[j], log_w[k] + next[j - 1]);
        }
    }
    let mut remaining = s;
    for k in 0..k_len {
        if remaining == 0 {
            break;
        }
        if k_len - k == remaining {
            z[k..].iter_mut().for_each(|v| *v = true);
            break;
        }
        let ln_p = log_w[k] + suffix[(k + 1) * width + remaining - 1] - suffix[k * width + remaining];
        if ln_p.is_nan() {
            return Err(Error::Numerical("NaN inclusion probability".into()));
        }
        if rng.random::<f64>() < ln_p.exp() {
            z[k] = true;
            remaining -= 1;
        }
    }
    Ok(z)
}

/// A pmf over the number of active features per row, supported on `0..=K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSumPmf {
    log_pmf: Vec<f64>,
}

impl RowSumPmf {
    /// Normalizes non-negative weights over `0..weights.len()`.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Domain("row-sum weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Domain("row-sum weights have no mass".into()));
        }
        Ok(RowSumPmf { log_pmf: weights.iter().map(|w| (w / total).ln()).collect() })
    }

    /// Wraps log-probabilities that already sum to one.
    pub fn from_log_pmf(log_pmf: Vec<f64>) -> Result<Self> {
        if log_pmf.is_empty() || log_pmf.iter().any(|v| v.is_nan() || *v > 0.0) {
            return Err(Error::Domain("invalid log pmf".into()));
        }
        let total = ln_sum_exp(log_pmf.iter().copied());
        if total.abs() > 1e-9 {
            return Err(Error::Domain(format!("log pmf sums to exp({total}), not 1")));
        }
        Ok(RowSumPmf { log_pmf })
    }

    /// Negative binomial with the mass above `k_max` collapsed onto `k_max`.
    pub fn negative_binomial_clamped(r: f64, p: f64, k_max: usize) -> Result<Self> {
        let mut log_pmf = Vec::with_capacity(k_max + 1);
        for s in 0..k_max {
            log_pmf.push(negbin_log_pmf(s as u64, r, p)?);
        }
        // Tail mass Σ_{s ≥ k_max} summed directly, stopping once terms stop
        // contributing.
        let mean = crate::model::negbin_mean(r, p);
        let mut acc = f64::NEG_INFINITY;
        let mut s = k_max as u64;
        loop {
            let t = negbin_log_pmf(s, r, p)?;
            acc = ln_add(acc, t);
            let past_mode = s as f64 > mean;
            if past_mode && (t < acc - 40.0 || acc == f64::NEG_INFINITY) || s > k_max as u64 + 10_000_000 {
                break;
            }
            s += 1;
        }
        log_pmf.push(acc);
        Ok(RowSumPmf { log_pmf })
    }

    pub fn uniform(k_max: usize) -> Self {
        let v = -((k_max + 1) as f64).ln();
        RowSumPmf { log_pmf: vec![v; k_max + 1] }
    }

    pub fn degenerate(s0: usize, k_max: usize) -> Result<Self> {
        if s0 > k_max {
            return Err(Error::Domain(format!("point mass {s0} outside 0..={k_max}")));
        }
        let mut log_pmf = vec![f64::NEG_INFINITY; k_max + 1];
        log_pmf[s0] = 0.0;
        Ok(RowSumPmf { log_pmf })
    }

    /// Distribution of `Σ z_k` for independent `z_k ~ Bernoulli(π_k)`.
    pub fn poisson_binomial(pi: &[f64]) -> Result<Self> {
        check_weights(pi)?;
        let log_w: Vec<f64> = pi.iter().map(|&p| ln_odds(p)).collect();
        let esp = LogEspTable::from_log_odds(&log_w);
        let base: f64 = pi.iter().map(|p| (-p).ln_1p()).sum();
        Ok(RowSumPmf { log_pmf: esp.as_slice().iter().map(|e| base + e).collect() })
    }

    #[inline]
    pub fn ln_pmf(&self, s: usize) -> f64 {
        self.log_pmf.get(s).copied().unwrap_or(f64::NEG_INFINITY)
    }

    /// Largest supported sum.
    pub fn k_max(&self) -> usize {
        self.log_pmf.len() - 1
    }

    /// Inverse-CDF draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (s, lp) in self.log_pmf.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                return s;
            }
        }
        self.log_pmf.iter().rposition(|lp| *lp > f64::NEG_INFINITY).unwrap_or(0)
    }
}

/// The restricted row prior for a fixed weight vector: log odds and their ESP
/// table, computed once and shared across rows.
#[derive(Debug, Clone)]
pub struct RestrictedRowPrior<'a> {
    f: &'a RowSumPmf,
    log_w: Vec<f64>,
    esp: LogEspTable,
}

impl<'a> RestrictedRowPrior<'a> {
    pub fn new(pi: &[f64], f: &'a RowSumPmf) -> Result<Self> {
        check_weights(pi)?;
        if f.k_max() < pi.len() {
            return Err(Error::Domain(format!(
                "row-sum pmf covers 0..={} but there are {} features",
                f.k_max(),
                pi.len()
            )));
        }
        let log_w: Vec<f64> = pi.iter().map(|&p| ln_odds(p)).collect();
        let esp = LogEspTable::from_log_odds(&log_w);
        Ok(RestrictedRowPrior { f, log_w, esp })
    }

    pub fn log_odds(&self) -> &[f64] {
        &self.log_w
    }

    /// `ln f(|z|) + Σ_{k∈z} ln w_k - ln e_|z|(w)`.
    pub fn ln_prob(&self, z: &[bool]) -> f64 {
        let s = z.iter().filter(|&&v| v).count();
        let lf = self.f.ln_pmf(s);
        if lf == f64::NEG_INFINITY {
            return lf;
        }
        let lw: f64 = z.iter().zip(&self.log_w).filter(|(&v, _)| v).map(|(_, w)| w).sum();
        lf + lw - self.esp.ln(s)
    }

    /// Log odds of `z_k = 1` in its full conditional given the other
    /// coordinates sum to `s_minus`, plus a caller-supplied likelihood ratio.
    pub fn entry_logodds(&self, s_minus: usize, k: usize, loglik_ratio: f64) -> Result<f64> {
        let lf0 = self.f.ln_pmf(s_minus);
        let lf1 = self.f.ln_pmf(s_minus + 1);
        if lf0 == f64::NEG_INFINITY && lf1 == f64::NEG_INFINITY {
            return Err(Error::InvalidState(format!("row-sum prior has no mass at {s_minus} or {}", s_minus + 1)));
        }
        let prior = if lf1 == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else if lf0 == f64::NEG_INFINITY {
            f64::INFINITY
        } else {
            lf1 - lf0 + self.log_w[k] + self.esp.ln(s_minus) - self.esp.ln(s_minus + 1)
        };
        let lo = prior + loglik_ratio;
        if lo.is_nan() {
            return Err(Error::InvalidState(format!(
                "feature {k}: prior forces one value and the likelihood forbids it"
            )));
        }
        Ok(lo)
    }
}

/// Log probability of a row under the restricted prior with weights `pi` and
/// row-sum pmf `f`. Returns `-∞` when `f(|z|) = 0`.
pub fn restricted_row_log_prior(z: &[bool], pi: &[f64], f: &RowSumPmf) -> Result<f64> {
    if z.len() != pi.len() {
        return Err(Error::Domain(format!("row has {} entries but {} weights", z.len(), pi.len())));
    }
    Ok(RestrictedRowPrior::new(pi, f)?.ln_prob(z))
}

/// Log odds of `z_k = 1` given the rest of the row (the current value of
/// `row[k]` is ignored).
pub fn gibbs_z_entry_logodds(row: &[bool], k: usize, pi: &[f64], f: &RowSumPmf, loglik_ratio: f64) -> Result<f64> {
    if row.len() != pi.len() || k >= row.len() {
        return Err(Error::Domain("row, weights and index disagree".into()));
    }
    let s_minus = row.iter().enumerate().filter(|&(j, &v)| v && j != k).count();
    RestrictedRowPrior::new(pi, f)?.entry_logodds(s_minus, k, loglik_ratio)
}
