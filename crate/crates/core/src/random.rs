// Thin wrappers over rand_distr that keep the call sites short and handle the
// small-shape Gamma case without underflowing through `U^(1/a)`.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson, StandardNormal};

/// Draws from Gamma(shape, rate). Shapes below one use the
/// `G(a) = G(a + 1) * U^(1/a)` identity evaluated in log space.
pub(crate) fn gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    debug_assert!(shape > 0.0 && rate > 0.0);
    if shape >= 1.0 {
        let g = Gamma::new(shape, 1.0 / rate).expect("validated gamma parameters");
        g.sample(rng)
    } else {
        let g = Gamma::new(shape + 1.0, 1.0).expect("validated gamma parameters");
        let base: f64 = g.sample(rng);
        let u: f64 = open01(rng);
        (base.ln() + u.ln() / shape).exp() / rate
    }
}

pub(crate) fn poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    let p = Poisson::new(lambda).expect("finite positive poisson rate");
    p.sample(rng) as u64
}

pub(crate) fn binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial").sample(rng)
}

pub(crate) fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform on the open interval (0, 1).
pub(crate) fn open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Multinomial draw by sequential conditional binomials.
pub(crate) fn multinomial<R: Rng + ?Sized>(n: u64, weights: &[f64], rng: &mut R) -> Vec<u64> {
    let mut remaining_mass: f64 = weights.iter().sum();
    let mut remaining = n;
    let mut out = vec![0u64; weights.len()];
    for (k, &w) in weights.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if w <= 0.0 {
            continue;
        }
        let draw = if w >= remaining_mass || k + 1 == weights.len() {
            remaining
        } else {
            binomial(remaining, w / remaining_mass, rng)
        };
        out[k] = draw;
        remaining -= draw;
        remaining_mass -= w;
    }
    if remaining > 0 {
        // Rounding left mass behind; give it to the last positive weight.
        if let Some(last) = weights.iter().rposition(|&w| w > 0.0) {
            out[last] += remaining;
        }
    }
    out
}

/// Bernoulli draw from a log-odds value, exact at ±∞.
pub(crate) fn bernoulli_logit<R: Rng + ?Sized>(log_odds: f64, rng: &mut R) -> bool {
    if log_odds == f64::INFINITY {
        return true;
    }
    if log_odds == f64::NEG_INFINITY {
        return false;
    }
    let p = if log_odds >= 0.0 {
        1.0 / (1.0 + (-log_odds).exp())
    } else {
        let e = log_odds.exp();
        e / (1.0 + e)
    };
    rng.random::<f64>() < p
}
