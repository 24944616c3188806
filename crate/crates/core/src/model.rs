//! Domain types and the densities shared by the samplers.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Observed count matrix `X ∈ ℕ^{N×D}`. Only positive counts are stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    n_rows: usize,
    n_cols: usize,
    entries: BTreeMap<(usize, usize), u64>,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
}

fn check_unique(labels: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(labels.len());
    for l in labels {
        if !seen.insert(l.as_str()) {
            return Err(Error::Data(format!("duplicate {what} label `{l}`")));
        }
    }
    Ok(())
}

impl CountMatrix {
    /// Empty (all-zero) matrix with the given labels.
    pub fn new(row_labels: Vec<String>, col_labels: Vec<String>) -> Result<Self> {
        if row_labels.is_empty() || col_labels.is_empty() {
            return Err(Error::Data("count matrix needs at least one row and one column".into()));
        }
        check_unique(&row_labels, "row")?;
        check_unique(&col_labels, "column")?;
        Ok(CountMatrix {
            n_rows: row_labels.len(),
            n_cols: col_labels.len(),
            entries: BTreeMap::new(),
            row_labels,
            col_labels,
        })
    }

    /// Empty matrix labelled `r0..`, `c0..`.
    pub fn with_default_labels(n_rows: usize, n_cols: usize) -> Result<Self> {
        Self::new((0..n_rows).map(|n| format!("r{n}")).collect(), (0..n_cols).map(|d| format!("c{d}")).collect())
    }

    pub fn from_dense(dense: ArrayView2<'_, u64>) -> Result<Self> {
        let mut m = Self::with_default_labels(dense.nrows(), dense.ncols())?;
        for ((n, d), &x) in dense.indexed_iter() {
            m.set(n, d, x)?;
        }
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(Error::Data("ragged rows".into()));
        }
        let mut m = Self::with_default_labels(rows.len(), n_cols)?;
        for (n, row) in rows.iter().enumerate() {
            for (d, &x) in row.iter().enumerate() {
                m.set(n, d, x)?;
            }
        }
        Ok(m)
    }

    /// Stores `x` at `(n, d)`; a zero removes the entry.
    pub fn set(&mut self, n: usize, d: usize, x: u64) -> Result<()> {
        if n >= self.n_rows || d >= self.n_cols {
            return Err(Error::Domain(format!("cell ({n}, {d}) outside {}x{} matrix", self.n_rows, self.n_cols)));
        }
        if x == 0 {
            self.entries.remove(&(n, d));
        } else {
            self.entries.insert((n, d), x);
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, n: usize, d: usize) -> u64 {
        self.entries.get(&(n, d)).copied().unwrap_or(0)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row_labels(&self) -> &[String] {
        &self.row_labels
    }

    pub fn col_labels(&self) -> &[String] {
        &self.col_labels
    }

    /// Positive entries in row-major order.
    pub fn iter_nonzero(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.entries.iter().map(|(&(n, d), &x)| (n, d, x))
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Fraction of non-zero cells.
    pub fn density(&self) -> f64 {
        self.nnz() as f64 / (self.n_rows * self.n_cols) as f64
    }

    /// Fraction of zero cells (`1 - density`).
    pub fn sparsity(&self) -> f64 {
        1.0 - self.density()
    }

    pub fn total(&self) -> u64 {
        self.entries.values().sum()
    }

    /// Number of non-zero cells in each row.
    pub fn row_nonzeros(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_rows];
        for &(n, _) in self.entries.keys() {
            out[n] += 1;
        }
        out
    }

    /// Number of non-zero cells in each column.
    pub fn col_nonzeros(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_cols];
        for &(_, d) in self.entries.keys() {
            out[d] += 1;
        }
        out
    }

    pub fn to_dense(&self) -> Array2<u64> {
        let mut out = Array2::zeros((self.n_rows, self.n_cols));
        for (&(n, d), &x) in &self.entries {
            out[[n, d]] = x;
        }
        out
    }

    /// SHA-256 over shape, labels and entries; used to pair checkpoints with
    /// the data they were produced from.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_rows as u64).to_le_bytes());
        h.update((self.n_cols as u64).to_le_bytes());
        for l in self.row_labels.iter().chain(&self.col_labels) {
            h.update(l.as_bytes());
            h.update([0u8]);
        }
        for (&(n, d), &x) in &self.entries {
            h.update((n as u64).to_le_bytes());
            h.update((d as u64).to_le_bytes());
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// The set of held-out cells. Everything else is training data.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationMask {
    held_out: BTreeSet<(usize, usize)>,
}

impl ObservationMask {
    /// No held-out cells: every entry is used for training.
    pub fn none() -> Self {
        Self::default()
    }

    /// Every cell held out; the chain then samples from the prior.
    pub fn all(data: &CountMatrix) -> Self {
        let held_out = (0..data.n_rows()).flat_map(|n| (0..data.n_cols()).map(move |d| (n, d))).collect();
        ObservationMask { held_out }
    }

    pub fn new(data: &CountMatrix, cells: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut held_out = BTreeSet::new();
        for (n, d) in cells {
            if n >= data.n_rows() || d >= data.n_cols() {
                return Err(Error::Domain(format!("held-out cell ({n}, {d}) outside the data")));
            }
            held_out.insert((n, d));
        }
        Ok(ObservationMask { held_out })
    }

    #[inline]
    pub fn is_held_out(&self, n: usize, d: usize) -> bool {
        self.held_out.contains(&(n, d))
    }

    pub fn held_out(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.held_out.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.held_out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.held_out.is_empty()
    }

    /// Checks that every held-out cell indexes into `data`.
    pub fn check_fits(&self, data: &CountMatrix) -> Result<()> {
        match self.held_out.iter().find(|&&(n, d)| n >= data.n_rows() || d >= data.n_cols()) {
            Some(&(n, d)) => Err(Error::Domain(format!("held-out cell ({n}, {d}) outside the data"))),
            None => Ok(()),
        }
    }
}

/// Fixed and prior parameters of the model and its sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperParams {
    /// Gamma prior on the mass parameter α (shape, scale).
    pub alpha_prior_shape: f64,
    pub alpha_prior_scale: f64,
    /// Concentration; must satisfy `c > -sigma`.
    pub c: f64,
    /// Stable exponent in `[0, 1)`.
    pub sigma: f64,
    /// Negative-binomial row-sum prior `f`.
    pub nb_r: f64,
    pub nb_p: f64,
    /// Gamma prior on factor loadings, in shape/mean form.
    pub alpha_b: f64,
    pub mu_b: f64,
    pub k_max: usize,
    /// Atom floor of the truncated weight measure.
    pub eps_trunc: f64,
    /// Initial random-walk scale for π in logit space.
    pub mh_step: f64,
    pub burn_in: u64,
    pub n_samples: u64,
    pub thin: u64,
    pub seed: u64,
}

/// A requested `sigma = 1` is mapped to this value.
pub const SIGMA_NEAR_ONE: f64 = 1.0 - 1e-3;

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha_prior_shape: 1.0,
            alpha_prior_scale: 1.0,
            c: 50.0,
            sigma: SIGMA_NEAR_ONE,
            nb_r: 1.0,
            nb_p: 0.1,
            alpha_b: 0.01,
            mu_b: 1.0,
            k_max: 50,
            eps_trunc: 1e-6,
            mh_step: 0.5,
            burn_in: 30_000,
            n_samples: 1_000,
            thin: 1,
            seed: 1,
        }
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be a positive finite number, got {v}")))
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        positive("alpha_prior_shape", self.alpha_prior_shape)?;
        positive("alpha_prior_scale", self.alpha_prior_scale)?;
        positive("nb_r", self.nb_r)?;
        positive("alpha_b", self.alpha_b)?;
        positive("mu_b", self.mu_b)?;
        positive("eps_trunc", self.eps_trunc)?;
        positive("mh_step", self.mh_step)?;
        if !(0.0..1.0).contains(&self.sigma) {
            return Err(Error::param("sigma", format!("must lie in [0, 1), got {}", self.sigma)));
        }
        if !(self.c.is_finite() && self.c > -self.sigma) {
            return Err(Error::param("c", format!("must exceed -sigma = {}, got {}", -self.sigma, self.c)));
        }
        if !(self.nb_p > 0.0 && self.nb_p < 1.0) {
            return Err(Error::param("nb_p", format!("must lie in (0, 1), got {}", self.nb_p)));
        }
        if self.eps_trunc >= 1.0 {
            return Err(Error::param("eps_trunc", "must be below 1"));
        }
        if self.k_max == 0 {
            return Err(Error::param("k_max", "must be at least 1"));
        }
        if self.n_samples == 0 {
            return Err(Error::param("n_samples", "must be at least 1"));
        }
        if self.thin == 0 {
            return Err(Error::param("thin", "must be at least 1"));
        }
        Ok(())
    }

    /// Maps a requested `sigma == 1` onto [`SIGMA_NEAR_ONE`] (with a warning)
    /// and validates the result.
    pub fn normalized(mut self) -> Result<Self> {
        if self.sigma == 1.0 {
            log::warn!("sigma = 1 lies outside [0, 1); using {SIGMA_NEAR_ONE}");
            self.sigma = SIGMA_NEAR_ONE;
        }
        self.validate()?;
        Ok(self)
    }

    /// Rate of the Gamma prior on B (`alpha_b / mu_b`).
    pub fn b_rate(&self) -> f64 {
        self.alpha_b / self.mu_b
    }

    pub fn total_iterations(&self) -> u64 {
        self.burn_in + self.n_samples * self.thin
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("hyperparameters serialize");
        hex::encode(Sha256::digest(&json))
    }
}

/// Auxiliary split of one observed positive count over the active features.
/// Only features with a positive share are listed, in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxCell {
    pub row: usize,
    pub col: usize,
    pub counts: Vec<(usize, u64)>,
}

/// One state of the Markov chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    /// Binary feature assignments, N × K_max.
    pub z: Array2<bool>,
    /// Non-negative loadings, K_max × D.
    pub b: Array2<f64>,
    /// Atom weights, one per feature slot.
    pub pi: Vec<f64>,
    pub alpha: f64,
    /// One entry per observed positive training cell, row-major.
    pub aux: Vec<AuxCell>,
}

impl LatentState {
    pub fn n_rows(&self) -> usize {
        self.z.nrows()
    }

    pub fn k_max(&self) -> usize {
        self.z.ncols()
    }

    pub fn row_sum(&self, n: usize) -> usize {
        self.z.row(n).iter().filter(|&&z| z).count()
    }

    pub fn column_counts(&self) -> Vec<usize> {
        self.z.columns().into_iter().map(|c| c.iter().filter(|&&z| z).count()).collect()
    }

    /// Number of non-empty columns of Z.
    pub fn k_plus(&self) -> usize {
        self.column_counts().iter().filter(|&&m| m > 0).count()
    }

    /// Checks the auxiliary identity against the training cells: every
    /// observed positive count is split exactly, and only over active
    /// features.
    pub fn check_aux(&self, data: &CountMatrix, mask: &ObservationMask) -> Result<()> {
        let mut expected = data.iter_nonzero().filter(|&(n, d, _)| !mask.is_held_out(n, d));
        for cell in &self.aux {
            let (n, d, x) = expected.next().ok_or_else(|| {
                Error::InvalidState(format!("aux entry for unexpected cell ({}, {})", cell.row, cell.col))
            })?;
            if (n, d) != (cell.row, cell.col) {
                return Err(Error::InvalidState(format!(
                    "aux cell ({}, {}) does not match training cell ({n}, {d})",
                    cell.row, cell.col
                )));
            }
            let total: u64 = cell.counts.iter().map(|&(_, c)| c).sum();
            if total != x {
                return Err(Error::InvalidState(format!("aux counts at ({n}, {d}) sum to {total}, expected {x}")));
            }
            if let Some(&(k, _)) = cell.counts.iter().find(|&&(k, c)| c > 0 && !self.z[[n, k]]) {
                return Err(Error::InvalidState(format!("aux count at ({n}, {d}) assigned to inactive feature {k}")));
            }
        }
        if let Some((n, d, _)) = expected.next() {
            return Err(Error::InvalidState(format!("training cell ({n}, {d}) has no aux entry")));
        }
        Ok(())
    }
}

fn ln_factorial(x: u64) -> f64 {
    ln_gamma(x as f64 + 1.0)
}

/// `log P(x | λ)` for a Poisson rate `λ ≥ 0`; `λ = 0` is a point mass at zero.
pub fn poisson_log_pmf(x: u64, lambda: f64) -> Result<f64> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Domain(format!("poisson rate must be finite and >= 0, got {lambda}")));
    }
    Ok(poisson_ln_pmf_unchecked(x, lambda))
}

#[inline]
pub(crate) fn poisson_ln_pmf_unchecked(x: u64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return if x == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if x == 0 {
        return -lambda;
    }
    x as f64 * lambda.ln() - lambda - ln_factorial(x)
}

/// Gamma log-density with shape `shape` and mean `mean` (rate `shape / mean`).
pub fn gamma_log_pdf_shape_mean(b: f64, shape: f64, mean: f64) -> Result<f64> {
    for (name, v) in [("b", b), ("shape", shape), ("mean", mean)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::Domain(format!("gamma {name} must be positive, got {v}")));
        }
    }
    let rate = shape / mean;
    Ok(shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * b.ln() - rate * b)
}

/// Negative-binomial pmf `Γ(s+r)/(Γ(r) s!) p^r (1-p)^s`, mean `r(1-p)/p`.
pub fn negbin_log_pmf(s: u64, r: f64, p: f64) -> Result<f64> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Domain(format!("negative binomial r must be positive, got {r}")));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("negative binomial p must lie in (0, 1), got {p}")));
    }
    let s_f = s as f64;
    Ok(ln_gamma(s_f + r) - ln_gamma(r) - ln_factorial(s) + r * p.ln() + s_f * (-p).ln_1p())
}

pub fn negbin_mean(r: f64, p: f64) -> f64 {
    r * (1.0 - p) / p
}

/// Poisson rate of cell `(n, d)`: `Σ_k z_nk B_kd`.
pub fn row_rate(state: &LatentState, n: usize, d: usize) -> f64 {
    state.z.row(n).iter().zip(state.b.column(d)).filter(|(&z, _)| z).map(|(_, &b)| b).sum()
}

/// How RCA values become counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RcaMode {
    /// Round to the nearest integer.
    #[default]
    Round,
    /// 1 where RCA >= 1, else 0.
    Binary,
}

/// Balassa index `(E_nd / Σ_d E_nd) / (Σ_n E_nd / Σ_nd E_nd)`.
pub fn rca_index(raw: ArrayView2<'_, f64>, row_labels: &[String], col_labels: &[String]) -> Result<Array2<f64>> {
    if raw.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::Data("export values must be finite and non-negative".into()));
    }
    let row_tot: Vec<f64> = raw.rows().into_iter().map(|r| r.sum()).collect();
    let col_tot: Vec<f64> = raw.columns().into_iter().map(|c| c.sum()).collect();
    if let Some(n) = row_tot.iter().position(|&t| t <= 0.0) {
        return Err(Error::Data(format!("row `{}` has no positive exports", row_labels[n])));
    }
    if let Some(d) = col_tot.iter().position(|&t| t <= 0.0) {
        return Err(Error::Data(format!("column `{}` has no positive exports", col_labels[d])));
    }
    let grand: f64 = row_tot.iter().sum();
    Ok(Array2::from_shape_fn(raw.dim(), |(n, d)| {
        let share = raw[[n, d]] / row_tot[n];
        let world = col_tot[d] / grand;
        share / world
    }))
}

/// Converts raw export values into a count matrix via the RCA index.
pub fn rca_transform(
    raw: ArrayView2<'_, f64>,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    mode: RcaMode,
) -> Result<CountMatrix> {
    if raw.nrows() != row_labels.len() || raw.ncols() != col_labels.len() {
        return Err(Error::Data("label count does not match matrix shape".into()));
    }
    let rca = rca_index(raw, &row_labels, &col_labels)?;
    let mut out = CountMatrix::new(row_labels, col_labels)?;
    for ((n, d), &v) in rca.indexed_iter() {
        let x = match mode {
            RcaMode::Round => v.round() as u64,
            RcaMode::Binary => u64::from(v >= 1.0),
        };
        out.set(n, d, x)?;
    }
    Ok(out)
}

/// A retained posterior sample, restricted to the non-empty columns of Z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub alpha: f64,
    /// Feature slots with at least one active row, ascending.
    pub active: Vec<usize>,
    /// N × |active| assignments.
    pub z: Array2<bool>,
    /// |active| × D loadings.
    pub b: Array2<f64>,
}

impl SampleRecord {
    pub fn from_state(state: &LatentState) -> Self {
        let counts = state.column_counts();
        let active: Vec<usize> = (0..state.k_max()).filter(|&k| counts[k] > 0).collect();
        let z = state.z.select(ndarray::Axis(1), &active);
        let b = state.b.select(ndarray::Axis(0), &active);
        SampleRecord { alpha: state.alpha, active, z, b }
    }

    /// Poisson rate of `(n, d)` under this sample.
    pub fn rate(&self, n: usize, d: usize) -> f64 {
        self.z.row(n).iter().zip(self.b.column(d)).filter(|(&z, _)| z).map(|(_, &b)| b).sum()
    }

    pub fn k_plus(&self) -> usize {
        self.active.len()
    }
}

/// Output of a chain: retained samples plus posterior averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub n_rows: usize,
    pub n_cols: usize,
    pub k_max: usize,
    pub hyper: HyperParams,
    pub held_out: ObservationMask,
    pub samples: Vec<SampleRecord>,
    /// Posterior mean of Z (N × K_max).
    pub z_mean: Array2<f64>,
    /// Posterior mean of B (K_max × D).
    pub b_mean: Array2<f64>,
    /// K⁺ at every retained iteration.
    pub k_plus_trace: Vec<usize>,
    pub alpha_trace: Vec<f64>,
    /// π acceptance during burn-in and during retention.
    pub burn_in_acceptance: f64,
    pub acceptance: f64,
    /// Random-walk scale in force during retention.
    pub mh_step: f64,
    /// Wall-clock seconds; not serialized so summaries stay reproducible.
    #[serde(skip)]
    pub wall_clock_secs: Option<f64>,
}

impl PosteriorSummary {
    /// Columns of the posterior-mean Z whose mean activity exceeds `1/N`.
    pub fn live_features(&self) -> Vec<usize> {
        let threshold = 1.0 / self.n_rows as f64;
        (0..self.k_max).filter(|&k| self.z_mean.column(k).mean().unwrap_or(0.0) > threshold).collect()
    }

    pub fn mean_k_plus(&self) -> f64 {
        self.k_plus_trace.iter().sum::<usize>() as f64 / self.k_plus_trace.len().max(1) as f64
    }

    /// Canonical JSON encoding; identical chains give identical bytes.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
