// One iteration of the sampler: Z (auxiliary counts integrated out), π by
// Metropolis–Hastings in logit space, B and the auxiliary counts from their
// conjugate conditionals, then α.

use std::ops::Range;

use ndarray::Array2;
use rand::Rng;

use crate::condbern::{ln_odds, LogEspTable, RestrictedRowPrior, RowSumPmf};
use crate::error::{Error, Result};
use crate::model::{AuxCell, CountMatrix, HyperParams, LatentState, ObservationMask};
use crate::priors::{levy_mass, AtomPrior};
use crate::random;

/// Training cells of a data set, indexed for the row-wise sweeps.
#[derive(Debug, Clone)]
pub struct TrainingView {
    n_rows: usize,
    n_cols: usize,
    /// Observed positive cells `(d, x)`, row-major.
    cells: Vec<(usize, u64)>,
    row_ranges: Vec<Range<usize>>,
    /// Held-out columns of each row.
    row_held_out: Vec<Vec<usize>>,
    /// Held-out rows of each column.
    col_held_out: Vec<Vec<usize>>,
}

impl TrainingView {
    pub fn new(data: &CountMatrix, mask: &ObservationMask) -> Result<Self> {
        mask.check_fits(data)?;
        let (n_rows, n_cols) = (data.n_rows(), data.n_cols());
        let mut cells = Vec::with_capacity(data.nnz());
        let mut row_ranges = Vec::with_capacity(n_rows);
        let mut nz = data.iter_nonzero().filter(|&(n, d, _)| !mask.is_held_out(n, d)).peekable();
        for n in 0..n_rows {
            let start = cells.len();
            while let Some(&(row, d, x)) = nz.peek() {
                if row != n {
                    break;
                }
                cells.push((d, x));
                nz.next();
            }
            row_ranges.push(start..cells.len());
        }
        let mut row_held_out = vec![Vec::new(); n_rows];
        let mut col_held_out = vec![Vec::new(); n_cols];
        for (n, d) in mask.held_out() {
            row_held_out[n].push(d);
            col_held_out[d].push(n);
        }
        Ok(TrainingView { n_rows, n_cols, cells, row_ranges, row_held_out, col_held_out })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Observed positive cells of row `n` as `(column, count)`.
    pub fn row_cells(&self, n: usize) -> &[(usize, u64)] {
        &self.cells[self.row_ranges[n].clone()]
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }
}

/// Multinomial split of `x` over features in proportion to `rates`.
pub fn sample_aux_counts<R: Rng + ?Sized>(x: u64, rates: &[f64], rng: &mut R) -> Result<Vec<u64>> {
    if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Domain("feature rates must be finite and non-negative".into()));
    }
    if x > 0 && rates.iter().all(|&r| r == 0.0) {
        return Err(Error::InvalidState(format!("count {x} with every feature rate zero")));
    }
    Ok(random::multinomial(x, rates, rng))
}

/// Resamples the auxiliary split of every training cell given Z and B.
pub fn refresh_aux<R: Rng + ?Sized>(state: &mut LatentState, view: &TrainingView, rng: &mut R) -> Result<()> {
    let k_max = state.k_max();
    let mut aux = Vec::with_capacity(view.n_cells());
    let mut active = Vec::with_capacity(k_max);
    let mut rates = Vec::with_capacity(k_max);
    for n in 0..view.n_rows() {
        active.clear();
        active.extend((0..k_max).filter(|&k| state.z[[n, k]]));
        for &(d, x) in view.row_cells(n) {
            rates.clear();
            rates.extend(active.iter().map(|&k| state.b[[k, d]]));
            let split =
                sample_aux_counts(x, &rates, rng).map_err(|e| Error::InvalidState(format!("cell ({n}, {d}): {e}")))?;
            let counts = active.iter().zip(split).filter(|&(_, c)| c > 0).map(|(&k, c)| (k, c)).collect();
            aux.push(AuxCell { row: n, col: d, counts });
        }
    }
    state.aux = aux;
    Ok(())
}

/// `Σ_n x'_{nd,k}` as a K × D table.
pub fn aux_sums(state: &LatentState, n_cols: usize) -> Array2<u64> {
    let mut out = Array2::zeros((state.k_max(), n_cols));
    for cell in &state.aux {
        for &(k, c) in &cell.counts {
            out[[k, cell.col]] += c;
        }
    }
    out
}

/// `Σ_{n: (n,d) observed} z_nk` as a K × D table.
pub fn activity_sums(state: &LatentState, view: &TrainingView) -> Array2<u64> {
    let counts = state.column_counts();
    Array2::from_shape_fn((state.k_max(), view.n_cols()), |(k, d)| {
        let held = view.col_held_out[d].iter().filter(|&&n| state.z[[n, k]]).count();
        (counts[k] - held) as u64
    })
}

/// Conjugate update `B_kd ~ Gamma(α_B + Σx', α_B/μ_B + Σz)`, drawn in
/// `(k, d)` lexicographic order.
pub fn gibbs_update_b<R: Rng + ?Sized>(
    aux_sums: &Array2<u64>,
    activity_sums: &Array2<u64>,
    hp: &HyperParams,
    rng: &mut R,
) -> Array2<f64> {
    let prior_rate = hp.b_rate();
    let mut b = Array2::zeros(aux_sums.dim());
    for ((k, d), slot) in b.indexed_iter_mut() {
        let shape = hp.alpha_b + aux_sums[[k, d]] as f64;
        let rate = prior_rate + activity_sums[[k, d]] as f64;
        *slot = random::gamma(shape, rate, rng);
    }
    b
}

fn rate_without(state: &LatentState, n: usize, d: usize, skip: usize) -> f64 {
    (0..state.k_max()).filter(|&j| j != skip && state.z[[n, j]]).map(|j| state.b[[j, d]]).sum()
}

/// Gibbs sweep over every `z_nk` (row-major) using the exact marginal
/// Poisson likelihood ratio; the auxiliary counts are refreshed afterwards.
pub fn sweep_z<R: Rng + ?Sized>(
    state: &mut LatentState,
    view: &TrainingView,
    f: &RowSumPmf,
    rng: &mut R,
) -> Result<()> {
    let k_max = state.k_max();
    let prior = RestrictedRowPrior::new(&state.pi, f)?;
    let b_totals: Vec<f64> = state.b.rows().into_iter().map(|r| r.sum()).collect();
    let mut lambda: Vec<f64> = Vec::new();
    for n in 0..view.n_rows() {
        let cells = view.row_cells(n);
        let exposure: Vec<f64> = (0..k_max)
            .map(|k| {
                let held: f64 = view.row_held_out[n].iter().map(|&d| state.b[[k, d]]).sum();
                (b_totals[k] - held).max(0.0)
            })
            .collect();
        let recompute = |state: &LatentState, lambda: &mut Vec<f64>| {
            lambda.clear();
            lambda.extend(cells.iter().map(|&(d, _)| crate::model::row_rate(state, n, d)));
        };
        recompute(state, &mut lambda);
        let mut s = state.row_sum(n);
        for k in 0..k_max {
            let current = state.z[[n, k]];
            let s_minus = s - usize::from(current);
            let mut llr = -exposure[k];
            for (c, &(d, x)) in cells.iter().enumerate() {
                let bkd = state.b[[k, d]];
                if bkd == 0.0 {
                    continue;
                }
                let (l0, l1) = if current {
                    let mut l0 = lambda[c] - bkd;
                    if l0 < 1e-9 * lambda[c] {
                        l0 = rate_without(state, n, d, k);
                    }
                    (l0, lambda[c])
                } else {
                    (lambda[c], lambda[c] + bkd)
                };
                if l0 <= 0.0 {
                    llr = f64::INFINITY;
                    break;
                }
                llr += x as f64 * (l1.ln() - l0.ln());
            }
            let log_odds = prior.entry_logodds(s_minus, k, llr)?;
            let proposed = random::bernoulli_logit(log_odds, rng);
            if proposed != current {
                state.z[[n, k]] = proposed;
                s = s_minus + usize::from(proposed);
                recompute(state, &mut lambda);
            }
        }
    }
    refresh_aux(state, view, rng)
}

/// Log target of the atom weights, one coordinate at a time.
pub trait PiTarget {
    /// Log density (w.r.t. Lebesgue measure on π) of atom `k` as a function
    /// of its value, with the other atoms fixed at `pi`.
    fn atom_conditional(&self, pi: &[f64], k: usize) -> impl Fn(f64) -> f64 + '_;
}

/// Posterior target for π given Z: the atom prior times the restricted row
/// prior of every row. The rows enter only through the column counts `m_k`
/// and the histogram of row sums.
#[derive(Debug, Clone)]
pub struct RestrictedPiTarget {
    prior: AtomPrior,
    column_counts: Vec<usize>,
    /// `(s, number of rows with Σz = s)`, for `s > 0`.
    row_sums: Vec<(usize, usize)>,
}

impl RestrictedPiTarget {
    pub fn new(prior: AtomPrior, z: &Array2<bool>) -> Self {
        let k_max = z.ncols();
        let mut hist = vec![0usize; k_max + 1];
        for row in z.rows() {
            hist[row.iter().filter(|&&v| v).count()] += 1;
        }
        let column_counts = z.columns().into_iter().map(|c| c.iter().filter(|&&v| v).count()).collect();
        RestrictedPiTarget {
            prior,
            column_counts,
            row_sums: hist.into_iter().enumerate().filter(|&(s, h)| s > 0 && h > 0).collect(),
        }
    }
}

impl PiTarget for RestrictedPiTarget {
    fn atom_conditional(&self, pi: &[f64], k: usize) -> impl Fn(f64) -> f64 + '_ {
        // e_s(w) = e_s(w_{-k}) + w_k e_{s-1}(w_{-k})
        let others: Vec<f64> = pi.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, &p)| ln_odds(p)).collect();
        let loo = LogEspTable::from_log_odds(&others);
        let m_k = self.column_counts[k] as f64;
        move |p: f64| {
            let base = self.prior.ln_density(p);
            if base == f64::NEG_INFINITY {
                return base;
            }
            let lw = ln_odds(p);
            let norm: f64 = self
                .row_sums
                .iter()
                .map(|&(s, h)| h as f64 * crate::condbern::ln_add(loo.ln(s), lw + loo.ln(s - 1)))
                .sum();
            base + m_k * lw - norm
        }
    }
}

/// Log acceptance ratio of a logit-space random-walk move from `current` to
/// `proposed`, including the Jacobian `π(1-π)` of the transform.
pub fn mh_log_accept_ratio(target: impl Fn(f64) -> f64, current: f64, proposed: f64) -> f64 {
    if current == proposed {
        return 0.0;
    }
    let jac = |p: f64| p.ln() + (-p).ln_1p();
    let num = target(proposed);
    if num == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    num + jac(proposed) - target(current) - jac(current)
}

/// One Metropolis–Hastings pass over the atoms in ascending order. Returns
/// per-atom acceptance flags.
pub fn mh_update_pi<R: Rng + ?Sized, T: PiTarget>(pi: &mut [f64], target: &T, step: f64, rng: &mut R) -> Vec<bool> {
    let mut accepted = Vec::with_capacity(pi.len());
    for k in 0..pi.len() {
        let current = pi[k];
        let theta = ln_odds(current) + step * random::normal(rng);
        let proposed = 1.0 / (1.0 + (-theta).exp());
        let u = random::open01(rng);
        let ok = if proposed > 0.0 && proposed < 1.0 {
            let cond = target.atom_conditional(pi, k);
            u.ln() < mh_log_accept_ratio(cond, current, proposed)
        } else {
            false
        };
        if ok {
            pi[k] = proposed;
        }
        accepted.push(ok);
    }
    accepted
}

/// `α ~ Gamma(a + K⁺, 1/scale + M)` with a precomputed exposure mass `M`.
pub fn sample_alpha_with_mass<R: Rng + ?Sized>(k_plus: usize, hp: &HyperParams, mass: f64, rng: &mut R) -> f64 {
    let shape = hp.alpha_prior_shape + k_plus as f64;
    let rate = 1.0 / hp.alpha_prior_scale + mass;
    random::gamma(shape, rate, rng)
}

/// Resamples α given K⁺; the exposure mass is computed by quadrature.
pub fn sample_alpha<R: Rng + ?Sized>(k_plus: usize, hp: &HyperParams, rng: &mut R) -> Result<f64> {
    let mass = levy_mass(hp.eps_trunc, hp.c, hp.sigma)?;
    Ok(sample_alpha_with_mass(k_plus, hp, mass, rng))
}

/// Acceptance bookkeeping for one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub accepted: u64,
    pub proposed: u64,
}

/// Model constants for the transition kernel.
#[derive(Debug, Clone)]
pub struct Kernel {
    hp: HyperParams,
    row_sums: RowSumPmf,
    mass: f64,
}

impl Kernel {
    pub fn new(hp: &HyperParams) -> Result<Self> {
        hp.validate()?;
        Ok(Kernel {
            hp: hp.clone(),
            row_sums: RowSumPmf::negative_binomial_clamped(hp.nb_r, hp.nb_p, hp.k_max)?,
            mass: levy_mass(hp.eps_trunc, hp.c, hp.sigma)?,
        })
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hp
    }

    /// The row-sum prior `f`, clamped to `0..=k_max`.
    pub fn row_sum_pmf(&self) -> &RowSumPmf {
        &self.row_sums
    }

    /// Exposure mass used by the α update.
    pub fn levy_mass(&self) -> f64 {
        self.mass
    }

    pub fn atom_prior(&self, alpha: f64) -> Result<AtomPrior> {
        AtomPrior::from_hyper(&self.hp, alpha)
    }

    /// One full iteration in the order Z, π, (B, X'), α.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &mut LatentState,
        view: &TrainingView,
        mh_step: f64,
        rng: &mut R,
    ) -> Result<StepStats> {
        sweep_z(state, view, &self.row_sums, rng)?;

        let target = RestrictedPiTarget::new(self.atom_prior(state.alpha)?, &state.z);
        let flags = mh_update_pi(&mut state.pi, &target, mh_step, rng);

        let sums = aux_sums(state, view.n_cols());
        let activity = activity_sums(state, view);
        state.b = gibbs_update_b(&sums, &activity, &self.hp, rng);
        refresh_aux(state, view, rng)?;

        state.alpha = sample_alpha_with_mass(state.k_plus(), &self.hp, self.mass, rng);
        if state.pi.iter().chain(state.b.iter()).any(|v| v.is_nan()) || state.alpha.is_nan() {
            return Err(Error::Numerical("NaN in sampler state".into()));
        }
        Ok(StepStats { accepted: flags.iter().filter(|&&a| a).count() as u64, proposed: flags.len() as u64 })
    }
}
