#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use s3ribp::{CountMatrix, HyperParams};

pub const PLANTED_ROWS: usize = 60;
pub const PLANTED_COLS: usize = 40;
pub const PLANTED_K: usize = 4;
pub const BLOCK_RATE: f64 = 3.0;

/// Four disjoint 10-column blocks. Row `n` carries feature `n mod 4` and,
/// with probability 0.3, one other feature. B is 3 on a feature's block and
/// exactly 0 elsewhere.
pub struct Planted {
    pub data: CountMatrix,
    pub blocks: Vec<BTreeSet<usize>>,
}

pub fn planted(seed: u64) -> Planted {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = PLANTED_COLS / PLANTED_K;
    let mut data = CountMatrix::with_default_labels(PLANTED_ROWS, PLANTED_COLS).unwrap();
    for n in 0..PLANTED_ROWS {
        let mut features = vec![n % PLANTED_K];
        if rng.random::<f64>() < 0.3 {
            features.push((n % PLANTED_K + 1 + rng.random_range(0..PLANTED_K - 1)) % PLANTED_K);
        }
        for d in 0..PLANTED_COLS {
            let rate = BLOCK_RATE * features.iter().filter(|&&k| d / width == k).count() as f64;
            if rate > 0.0 {
                let x = Poisson::new(rate).unwrap().sample(&mut rng) as u64;
                data.set(n, d, x).unwrap();
            }
        }
    }
    let blocks = (0..PLANTED_K).map(|k| (k * width..(k + 1) * width).collect()).collect();
    Planted { data, blocks }
}

/// Fit settings for the planted model: row-sum prior NB(1, 0.7) (mean
/// about 0.43, close to the planted one-or-two features once the empty row
/// is excluded) and a Gamma(0.1, mean 3) prior on B.
pub fn planted_fit(seed: u64) -> HyperParams {
    HyperParams {
        k_max: 10,
        nb_r: 1.0,
        nb_p: 0.7,
        alpha_b: 0.1,
        mu_b: BLOCK_RATE,
        burn_in: 5_000,
        n_samples: 500,
        seed,
        ..HyperParams::default()
    }
}

/// Chi-square statistic and p-value of `observed` counts against expected
/// probabilities, merging adjacent cells from the right until every
/// expected count is at least 5.
pub fn chi_square_gof(observed: &[u64], probs: &[f64]) -> (f64, f64) {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let total: u64 = observed.iter().sum();
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut o, mut e) = (0.0, 0.0);
    for (&obs, &p) in observed.iter().zip(probs).rev() {
        o += obs as f64;
        e += p * total as f64;
        if e >= 5.0 {
            cells.push((o, e));
            o = 0.0;
            e = 0.0;
        }
    }
    if e > 0.0 || o > 0.0 {
        match cells.last_mut() {
            Some(last) => {
                last.0 += o;
                last.1 += e;
            }
            None => cells.push((o, e)),
        }
    }
    let stat: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    let dof = cells.len().saturating_sub(1).max(1) as f64;
    (stat, 1.0 - ChiSquared::new(dof).unwrap().cdf(stat))
}

/// Two-sample chi-square test of homogeneity over a shared support; cells
/// are merged until the pooled count is at least 10.
pub fn chi_square_two_sample(a: &[u64], b: &[u64]) -> (f64, f64) {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let len = a.len().max(b.len());
    let get = |v: &[u64], i: usize| v.get(i).copied().unwrap_or(0) as f64;
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let (mut ca, mut cb) = (0.0, 0.0);
    for i in 0..len {
        ca += get(a, i);
        cb += get(b, i);
        if ca + cb >= 10.0 {
            cells.push((ca, cb));
            ca = 0.0;
            cb = 0.0;
        }
    }
    if ca + cb > 0.0 {
        if let Some(last) = cells.last_mut() {
            last.0 += ca;
            last.1 += cb;
        } else {
            cells.push((ca, cb));
        }
    }
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let total = na + nb;
    let mut stat = 0.0;
    for &(x, y) in &cells {
        let col = x + y;
        let (ea, eb) = (na * col / total, nb * col / total);
        stat += (x - ea).powi(2) / ea + (y - eb).powi(2) / eb;
    }
    let dof = cells.len().saturating_sub(1).max(1) as f64;
    (stat, 1.0 - ChiSquared::new(dof).unwrap().cdf(stat))
}

pub fn histogram(values: impl IntoIterator<Item = usize>) -> Vec<u64> {
    let mut h = Vec::new();
    for v in values {
        if v >= h.len() {
            h.resize(v + 1, 0);
        }
        h[v] += 1;
    }
    h
}

/// Mean and standard error from non-overlapping batch means.
pub fn batch_mean_se(xs: &[f64], n_batches: usize) -> (f64, f64) {
    let size = xs.len() / n_batches;
    let means: Vec<f64> =
        (0..n_batches).map(|b| xs[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let m = means.iter().sum::<f64>() / n_batches as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n_batches as f64 - 1.0);
    (m, (var / n_batches as f64).sqrt())
}

/// Mean and standard error of independent draws.
pub fn iid_mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Kolmogorov–Smirnov distance between the sorted sample `xs` and a CDF
/// given at the sample points.
pub fn ks_distance(xs_sorted: &[f64], cdf_at: &[f64]) -> f64 {
    let n = xs_sorted.len() as f64;
    cdf_at
        .iter()
        .enumerate()
        .map(|(i, &f)| (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs()))
        .fold(0.0, f64::max)
}

/// CDF of the unnormalized density `g` on `[lo, 1)` at each sorted point,
/// accumulated by quadrature between consecutive points.
pub fn quadrature_cdf(g: impl Fn(f64) -> f64 + Copy, lo: f64, xs_sorted: &[f64]) -> Vec<f64> {
    use s3ribp::quadrature::integrate;
    let total = integrate(g, lo, 0.5, 1e-10).unwrap() + integrate(g, 0.5, 1.0, 1e-10).unwrap();
    let mut acc = 0.0;
    let mut prev = lo;
    xs_sorted
        .iter()
        .map(|&x| {
            if x > prev {
                acc += integrate(g, prev, x, 1e-10).unwrap();
                prev = x;
            }
            acc / total
        })
        .collect()
}

/// One-sided Mann–Whitney test that `b` tends to exceed `a`; normal
/// approximation with tie correction. Returns the p-value.
pub fn mann_whitney_greater(a: &[f64], b: &[f64]) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let mut all: Vec<(f64, bool)> = a.iter().map(|&x| (x, false)).chain(b.iter().map(|&x| (x, true))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        for r in &mut ranks[i..=j] {
            *r = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let rank_b: f64 = all.iter().zip(&ranks).filter(|(x, _)| x.1).map(|(_, r)| r).sum();
    let u = rank_b - nb * (nb + 1.0) / 2.0;
    let mean = na * nb / 2.0;
    let nn = na + nb;
    let var = na * nb / 12.0 * ((nn + 1.0) - tie_term / (nn * (nn - 1.0)));
    let z = (u - mean) / var.sqrt();
    1.0 - Normal::standard().cdf(z)
}
