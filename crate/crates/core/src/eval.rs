//! Held-out perplexity, topic coherence, sparsity qq checks, cross-fold
//! feature matching and the two-layer meta-feature run.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::{predictive_log_lik, run_chain, ChainConfig};
use crate::model::{poisson_ln_pmf_unchecked, CountMatrix, HyperParams, ObservationMask, PosteriorSummary};

/// Negative mean predictive log-likelihood over the held-out cells.
pub fn log_perplexity(summary: &PosteriorSummary, data: &CountMatrix, mask: &ObservationMask) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::Domain("log-perplexity needs at least one held-out cell".into()));
    }
    mask.check_fits(data)?;
    let total: f64 = mask.held_out().map(|(n, d)| predictive_log_lik(summary, (n, d), data.get(n, d))).sum();
    Ok(-total / mask.len() as f64)
}

/// Log-perplexity of a Poisson model whose rate for row `n` is the mean of
/// the row's training cells. Rows with no training mass fall back to the
/// global training mean.
pub fn row_mean_baseline_log_perplexity(data: &CountMatrix, mask: &ObservationMask) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::Domain("log-perplexity needs at least one held-out cell".into()));
    }
    mask.check_fits(data)?;
    let (n_rows, n_cols) = (data.n_rows(), data.n_cols());
    let mut sums = vec![0u64; n_rows];
    let mut cells = vec![n_cols as u64; n_rows];
    for (n, _) in mask.held_out() {
        cells[n] -= 1;
    }
    for (n, d, x) in data.iter_nonzero() {
        if !mask.is_held_out(n, d) {
            sums[n] += x;
        }
    }
    let all_cells: u64 = cells.iter().sum();
    let global = if all_cells == 0 { 0.0 } else { sums.iter().sum::<u64>() as f64 / all_cells as f64 };
    let rate = |n: usize| {
        if sums[n] == 0 || cells[n] == 0 {
            global
        } else {
            sums[n] as f64 / cells[n] as f64
        }
    };
    let total: f64 = mask.held_out().map(|(n, d)| poisson_ln_pmf_unchecked(data.get(n, d), rate(n))).sum();
    Ok(-total / mask.len() as f64)
}

/// Posterior-mean B with the rows of non-live features zeroed.
pub fn live_b_mean(summary: &PosteriorSummary) -> Array2<f64> {
    let mut b = Array2::zeros(summary.b_mean.dim());
    for k in summary.live_features() {
        b.row_mut(k).assign(&summary.b_mean.row(k));
    }
    b
}

/// Column indices of the `top_m` largest positive weights, ties to the
/// lower index.
fn top_columns(weights: ndarray::ArrayView1<'_, f64>, top_m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).filter(|&d| weights[d] > 0.0).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    idx.truncate(top_m);
    idx
}

/// Document frequencies and co-occurrence counts of `x > 0` over rows.
struct Cooccurrence {
    rows: Vec<BTreeSet<usize>>,
}

impl Cooccurrence {
    fn new(data: &CountMatrix) -> Self {
        let mut rows = vec![BTreeSet::new(); data.n_rows()];
        for (n, d, _) in data.iter_nonzero() {
            rows[n].insert(d);
        }
        Cooccurrence { rows }
    }

    fn single(&self, v: usize) -> usize {
        self.rows.iter().filter(|r| r.contains(&v)).count()
    }

    fn pair(&self, u: usize, v: usize) -> usize {
        self.rows.iter().filter(|r| r.contains(&u) && r.contains(&v)).count()
    }
}

fn coherence_of(top: &[usize], co: &Cooccurrence) -> f64 {
    let mut c = 0.0;
    for m in 1..top.len() {
        for l in 0..m {
            let dl = co.single(top[l]);
            // An unseen conditioning column leaves the ratio undefined.
            if dl == 0 {
                continue;
            }
            c += ((co.pair(top[m], top[l]) as f64 + 1.0) / dl as f64).ln();
        }
    }
    c
}

/// UMass coherence of every feature (row of `b`) with a positive weight,
/// in row order.
pub fn feature_coherences(b: ArrayView2<'_, f64>, data: &CountMatrix, top_m: usize) -> Result<Vec<(usize, f64)>> {
    if top_m == 0 {
        return Err(Error::param("top_m", "must be at least 1"));
    }
    if b.ncols() != data.n_cols() {
        return Err(Error::Domain(format!("weights have {} columns but the data has {}", b.ncols(), data.n_cols())));
    }
    let co = Cooccurrence::new(data);
    Ok(b.outer_iter()
        .enumerate()
        .filter(|(_, row)| row.iter().any(|&w| w > 0.0))
        .map(|(k, row)| (k, coherence_of(&top_columns(row, top_m), &co)))
        .collect())
}

/// Mean UMass coherence over features with a positive weight.
pub fn umass_coherence(b: ArrayView2<'_, f64>, data: &CountMatrix, top_m: usize) -> Result<f64> {
    let per = feature_coherences(b, data, top_m)?;
    if per.is_empty() {
        return Err(Error::Domain("every feature has all-zero weights".into()));
    }
    Ok(per.iter().map(|&(_, c)| c).sum::<f64>() / per.len() as f64)
}

fn sorted_row_nonzeros(mut nz: impl FnMut(usize, usize) -> bool, n_rows: usize, n_cols: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = (0..n_rows).map(|n| (0..n_cols).filter(|&d| nz(n, d)).count()).collect();
    counts.sort_unstable();
    counts
}

fn qq_pairs<R, F>(data: &CountMatrix, n_draws: usize, rng: &mut R, mut replicate: F) -> Result<Vec<(f64, f64)>>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Vec<usize>,
{
    if n_draws == 0 {
        return Err(Error::param("n_draws", "must be at least 1"));
    }
    let mut empirical = data.row_nonzeros();
    empirical.sort_unstable();
    let mut acc = vec![0.0; empirical.len()];
    for _ in 0..n_draws {
        for (a, c) in acc.iter_mut().zip(replicate(rng)) {
            *a += c as f64;
        }
    }
    Ok(empirical.into_iter().zip(acc).map(|(e, a)| (e as f64, a / n_draws as f64)).collect())
}

/// Sorted per-row non-zero counts of `data` against the mean sorted counts of
/// posterior-predictive replicates; each replicate uses a uniformly chosen
/// retained sample.
pub fn qq_row_nonzeros<R: Rng + ?Sized>(
    summary: &PosteriorSummary,
    data: &CountMatrix,
    n_draws: usize,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>> {
    if summary.samples.is_empty() {
        return Err(Error::Domain("summary has no retained samples".into()));
    }
    let (n_rows, n_cols) = (data.n_rows(), data.n_cols());
    qq_pairs(data, n_draws, rng, |rng| {
        let s = &summary.samples[rng.random_range(0..summary.samples.len())];
        let zero_prob = Array2::from_shape_fn((n_rows, n_cols), |(n, d)| (-s.rate(n, d)).exp());
        sorted_row_nonzeros(|n, d| rng.random::<f64>() >= zero_prob[[n, d]], n_rows, n_cols)
    })
}

/// Entry probabilities `min(1, k_n k_d / W)` of the diversity-ubiquity
/// binomial baseline.
pub fn binomial_baseline_probs(data: &CountMatrix) -> Array2<f64> {
    let (kn, kd) = (data.row_nonzeros(), data.col_nonzeros());
    let w = data.nnz() as f64;
    Array2::from_shape_fn((data.n_rows(), data.n_cols()), |(n, d)| {
        if w == 0.0 {
            0.0
        } else {
            (kn[n] as f64 * kd[d] as f64 / w).min(1.0)
        }
    })
}

/// The qq pairing of [`qq_row_nonzeros`] under the binomial baseline.
pub fn binomial_baseline_qq<R: Rng + ?Sized>(
    data: &CountMatrix,
    n_draws: usize,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>> {
    let p = binomial_baseline_probs(data);
    let (n_rows, n_cols) = p.dim();
    qq_pairs(data, n_draws, rng, |rng| sorted_row_nonzeros(|n, d| rng.random::<f64>() < p[[n, d]], n_rows, n_cols))
}

/// Mean absolute gap between the two coordinates of qq points.
pub fn qq_mean_abs_gap(points: &[(f64, f64)]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    points.iter().map(|(e, p)| (e - p).abs()).sum::<f64>() / points.len() as f64
}

pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatch {
    pub a: usize,
    pub b: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchTable {
    pub pairs: Vec<FeatureMatch>,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
}

impl MatchTable {
    pub fn mean_score(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        self.pairs.iter().map(|p| p.score).sum::<f64>() / self.pairs.len() as f64
    }

    /// The same matching seen from the other side.
    pub fn transposed(&self) -> MatchTable {
        MatchTable {
            pairs: self.pairs.iter().map(|p| FeatureMatch { a: p.b, b: p.a, score: p.score }).collect(),
            unmatched_a: self.unmatched_b.clone(),
            unmatched_b: self.unmatched_a.clone(),
        }
    }
}

/// Greedy matching: repeatedly pairs the most similar unmatched sets, ties
/// to the lowest `(i, j)`.
pub fn jaccard_match(a: &[BTreeSet<usize>], b: &[BTreeSet<usize>]) -> MatchTable {
    let mut scored: Vec<(f64, usize, usize)> = Vec::with_capacity(a.len() * b.len());
    for (i, sa) in a.iter().enumerate() {
        for (j, sb) in b.iter().enumerate() {
            scored.push((jaccard(sa, sb), i, j));
        }
    }
    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut pairs = Vec::new();
    for (score, i, j) in scored {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push(FeatureMatch { a: i, b: j, score });
        }
    }
    let unmatched = |used: &[bool]| used.iter().enumerate().filter(|(_, &u)| !u).map(|(i, _)| i).collect();
    MatchTable { unmatched_a: unmatched(&used_a), unmatched_b: unmatched(&used_b), pairs }
}

/// Top-`m` column sets of every feature with a positive weight.
pub fn top_sets(b: ArrayView2<'_, f64>, top_m: usize) -> Vec<BTreeSet<usize>> {
    b.outer_iter()
        .filter(|row| row.iter().any(|&w| w > 0.0))
        .map(|row| top_columns(row, top_m).into_iter().collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub feature: usize,
    pub entries: Vec<(String, f64)>,
}

impl fmt::Display for FeatureReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "F{}:", self.feature)?;
        for (i, (label, w)) in self.entries.iter().enumerate() {
            let sep = if i == 0 { " " } else { ", " };
            write!(f, "{sep}{label} ({w:.2})")?;
        }
        Ok(())
    }
}

/// Highest-weight labels per feature; rows with all-zero weights are
/// omitted and ties go to the lower column index.
pub fn top_features(b: ArrayView2<'_, f64>, col_labels: &[String], top_m: usize) -> Result<Vec<FeatureReport>> {
    if top_m == 0 {
        return Err(Error::param("top_m", "must be at least 1"));
    }
    if col_labels.len() != b.ncols() {
        return Err(Error::Domain(format!("{} labels for {} columns", col_labels.len(), b.ncols())));
    }
    Ok(b.outer_iter()
        .enumerate()
        .filter(|(_, row)| row.iter().any(|&w| w > 0.0))
        .map(|(k, row)| FeatureReport {
            feature: k,
            entries: top_columns(row, top_m).into_iter().map(|d| (col_labels[d].clone(), row[d])).collect(),
        })
        .collect())
}

/// Posterior-mean Z of the live features, thresholded at `>= 0.5`.
pub fn binarize_features(summary: &PosteriorSummary) -> Result<CountMatrix> {
    let live = summary.live_features();
    let mut m = CountMatrix::new(
        (0..summary.n_rows).map(|n| format!("r{n}")).collect(),
        live.iter().map(|k| format!("F{k}")).collect(),
    )?;
    for n in 0..summary.n_rows {
        for (j, &k) in live.iter().enumerate() {
            if summary.z_mean[[n, k]] >= 0.5 {
                m.set(n, j, 1)?;
            }
        }
    }
    if m.nnz() == 0 {
        return Err(Error::Domain("binarized feature matrix is all zero".into()));
    }
    Ok(m)
}

/// Second layer: fits the model to the binarized first-layer features.
pub fn meta_features(summary: &PosteriorSummary, config: &ChainConfig) -> Result<PosteriorSummary> {
    let input = binarize_features(summary)?;
    run_chain(&input, &ObservationMask::none(), config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (zero for fewer than two values).
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let std =
            if xs.len() < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
        MeanStd { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub seed: u64,
    pub held_out: usize,
    pub log_perplexity: f64,
    pub baseline_log_perplexity: f64,
    pub coherence: Option<f64>,
    pub live_features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_folds: usize,
    pub top_m: usize,
    pub folds: Vec<FoldReport>,
    pub log_perplexity: MeanStd,
    pub baseline_log_perplexity: MeanStd,
    pub coherence: MeanStd,
    /// Model qq points from fold 0.
    pub qq_points: Vec<(f64, f64)>,
    /// Binomial-baseline qq points (a stand-in, not the model).
    pub baseline_qq_points: Vec<(f64, f64)>,
    /// Top-set matches of fold 0 against each later fold.
    pub feature_matches: Vec<MatchTable>,
}

pub struct EvalOptions {
    pub top_m: usize,
    pub qq_draws: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { top_m: 10, qq_draws: 100 }
    }
}

/// Fits one chain per mask (in parallel; fold `i` uses seed `hp.seed + i`)
/// and gathers the metrics.
pub fn evaluate_folds(
    data: &CountMatrix,
    masks: &[ObservationMask],
    hp: &HyperParams,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if masks.is_empty() {
        return Err(Error::Domain("no folds to evaluate".into()));
    }
    let fits: Vec<(FoldReport, PosteriorSummary)> = masks
        .par_iter()
        .enumerate()
        .map(|(fold, mask)| {
            let seed = hp.seed.wrapping_add(fold as u64);
            let config = ChainConfig::new(HyperParams { seed, ..hp.clone() });
            let summary = run_chain(data, mask, &config)?;
            let live = live_b_mean(&summary);
            let coherence = umass_coherence(live.view(), data, options.top_m).ok();
            let report = FoldReport {
                fold,
                seed,
                held_out: mask.len(),
                log_perplexity: log_perplexity(&summary, data, mask)?,
                baseline_log_perplexity: row_mean_baseline_log_perplexity(data, mask)?,
                coherence,
                live_features: summary.live_features().len(),
            };
            Ok((report, summary))
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let qq_points = qq_row_nonzeros(&fits[0].1, data, options.qq_draws, &mut rng)?;
    let baseline_qq_points = binomial_baseline_qq(data, options.qq_draws, &mut rng)?;
    let reference = top_sets(live_b_mean(&fits[0].1).view(), options.top_m);
    let feature_matches = fits[1..]
        .iter()
        .map(|(_, s)| jaccard_match(&reference, &top_sets(live_b_mean(s).view(), options.top_m)))
        .collect();
    let folds: Vec<FoldReport> = fits.into_iter().map(|(r, _)| r).collect();
    let collect = |f: &dyn Fn(&FoldReport) -> Option<f64>| folds.iter().filter_map(f).collect::<Vec<f64>>();
    Ok(EvalReport {
        n_folds: folds.len(),
        top_m: options.top_m,
        log_perplexity: MeanStd::of(&collect(&|r| Some(r.log_perplexity))),
        baseline_log_perplexity: MeanStd::of(&collect(&|r| Some(r.baseline_log_perplexity))),
        coherence: MeanStd::of(&collect(&|r| r.coherence)),
        folds,
        qq_points,
        baseline_qq_points,
        feature_matches,
    })
}
