use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernel::{refresh_aux, Kernel, TrainingView};
use crate::condbern::{ln_odds, sample_row_given_sum_ln};
use crate::error::{Error, Result};
use crate::model::{AuxCell, CountMatrix, HyperParams, LatentState, ObservationMask, PosteriorSummary, SampleRecord};
use crate::priors::sample_pi_truncated;
use crate::random;

pub const CHECKPOINT_SCHEMA: &str = "s3ribp.chain-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Iterations per step-size adaptation window during burn-in.
const ADAPT_WINDOW: u64 = 50;
const TARGET_ACCEPT: (f64, f64) = (0.2, 0.4);
const INIT_ATTEMPTS: usize = 1_000;

#[derive(Debug, Clone, Default)]
pub enum InitMode {
    /// `z_nk ~ Bernoulli(1/2)` (redrawn per row until the likelihood is
    /// positive), everything else from the prior.
    #[default]
    Random,
    /// Start from a given state; its auxiliary counts are redrawn.
    State(LatentState),
}

#[derive(Debug, Clone)]
pub struct ChainConfig {
    pub hyper: HyperParams,
    /// Emit a checkpoint every this many iterations.
    pub checkpoint_every: Option<u64>,
    pub init: InitMode,
    /// Tune the π random-walk scale during burn-in.
    pub adapt_step: bool,
}

impl ChainConfig {
    pub fn new(hyper: HyperParams) -> Self {
        ChainConfig { hyper, checkpoint_every: None, init: InitMode::Random, adapt_step: true }
    }
}

/// Running sums over retained iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accumulator {
    pub z_sum: Array2<u64>,
    pub b_sum: Array2<f64>,
    pub samples: Vec<SampleRecord>,
    pub k_plus_trace: Vec<usize>,
    pub alpha_trace: Vec<f64>,
}

impl Accumulator {
    fn new(n_rows: usize, k_max: usize, n_cols: usize) -> Self {
        Accumulator {
            z_sum: Array2::zeros((n_rows, k_max)),
            b_sum: Array2::zeros((k_max, n_cols)),
            samples: Vec::new(),
            k_plus_trace: Vec::new(),
            alpha_trace: Vec::new(),
        }
    }

    fn record(&mut self, state: &LatentState) {
        self.z_sum.zip_mut_with(&state.z, |s, &z| *s += u64::from(z));
        self.b_sum += &state.b;
        let sample = SampleRecord::from_state(state);
        self.k_plus_trace.push(sample.k_plus());
        self.alpha_trace.push(state.alpha);
        self.samples.push(sample);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub mh_step: f64,
    pub adapt_step: bool,
    pub window_accepted: u64,
    pub window_proposed: u64,
    pub burn_accepted: u64,
    pub burn_proposed: u64,
    pub kept_accepted: u64,
    pub kept_proposed: u64,
}

/// ChaCha8 position: key, stream and word offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal string; the offset is a 128-bit integer.
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self.word_pos.parse().map_err(|e| Error::Checkpoint(format!("rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything needed to continue a chain bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainCheckpoint {
    pub schema: String,
    pub version: u32,
    /// Completed iterations.
    pub iteration: u64,
    pub hyper: HyperParams,
    pub hyper_digest: String,
    pub data_digest: String,
    pub held_out: ObservationMask,
    pub state: LatentState,
    pub rng: RngState,
    pub sampler: SamplerState,
    pub accumulated: Accumulator,
}

impl ChainCheckpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Parses and checks schema id, version and the hyperparameter digest.
    pub fn from_json(json: &str) -> Result<Self> {
        let probe: serde_json::Value = serde_json::from_str(json)?;
        let schema = probe.get("schema").and_then(|v| v.as_str()).unwrap_or_default();
        if schema != CHECKPOINT_SCHEMA {
            return Err(Error::Checkpoint(format!("unknown schema `{schema}`")));
        }
        let version = probe.get("version").and_then(|v| v.as_u64()).unwrap_or_default();
        if version != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let cp: ChainCheckpoint = serde_json::from_value(probe)?;
        if cp.hyper.digest() != cp.hyper_digest {
            return Err(Error::Checkpoint("hyperparameter digest mismatch".into()));
        }
        Ok(cp)
    }
}

/// A running Markov chain over one data set and mask.
#[derive(Debug, Clone)]
pub struct Chain {
    data_digest: String,
    mask: ObservationMask,
    view: TrainingView,
    kernel: Kernel,
    state: LatentState,
    rng: ChaCha8Rng,
    iteration: u64,
    sampler: SamplerState,
    acc: Accumulator,
}

fn row_supported(state: &LatentState, n: usize, cells: &[(usize, u64)]) -> bool {
    cells.iter().all(|&(d, _)| (0..state.k_max()).any(|k| state.z[[n, k]] && state.b[[k, d]] > 0.0))
}

impl Chain {
    pub fn new(data: &CountMatrix, mask: &ObservationMask, config: &ChainConfig) -> Result<Self> {
        let hp = &config.hyper;
        let kernel = Kernel::new(hp)?;
        let view = TrainingView::new(data, mask)?;
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let mut state = match &config.init {
            InitMode::Random => random_state(hp, &view, &mut rng)?,
            InitMode::State(s) => {
                if s.z.dim() != (data.n_rows(), hp.k_max) || s.b.dim() != (hp.k_max, data.n_cols()) {
                    return Err(Error::InvalidState("initial state has the wrong shape".into()));
                }
                s.clone()
            }
        };
        for n in 0..view.n_rows() {
            if !row_supported(&state, n, view.row_cells(n)) {
                return Err(Error::InvalidState(format!("initial state gives row {n} zero likelihood")));
            }
        }
        refresh_aux(&mut state, &view, &mut rng)?;
        Ok(Chain {
            data_digest: data.digest(),
            mask: mask.clone(),
            view,
            acc: Accumulator::new(data.n_rows(), hp.k_max, data.n_cols()),
            kernel,
            state,
            rng,
            iteration: 0,
            sampler: SamplerState {
                mh_step: hp.mh_step,
                adapt_step: config.adapt_step,
                window_accepted: 0,
                window_proposed: 0,
                burn_accepted: 0,
                burn_proposed: 0,
                kept_accepted: 0,
                kept_proposed: 0,
            },
        })
    }

    /// Rebuilds a chain from a checkpoint; `data` must be the matrix the
    /// checkpoint was taken on.
    pub fn from_checkpoint(data: &CountMatrix, cp: ChainCheckpoint) -> Result<Self> {
        if cp.schema != CHECKPOINT_SCHEMA || cp.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint("schema or version mismatch".into()));
        }
        if cp.hyper.digest() != cp.hyper_digest {
            return Err(Error::Checkpoint("hyperparameter digest mismatch".into()));
        }
        let digest = data.digest();
        if digest != cp.data_digest {
            return Err(Error::Checkpoint("data does not match the checkpointed run".into()));
        }
        let kernel = Kernel::new(&cp.hyper)?;
        let view = TrainingView::new(data, &cp.held_out)?;
        if cp.state.z.dim() != (data.n_rows(), cp.hyper.k_max) || cp.state.b.dim() != (cp.hyper.k_max, data.n_cols()) {
            return Err(Error::Checkpoint("state shape does not match the data".into()));
        }
        cp.state.check_aux(data, &cp.held_out)?;
        Ok(Chain {
            data_digest: digest,
            mask: cp.held_out,
            view,
            kernel,
            state: cp.state,
            rng: cp.rng.restore()?,
            iteration: cp.iteration,
            sampler: cp.sampler,
            acc: cp.accumulated,
        })
    }

    pub fn checkpoint(&self) -> ChainCheckpoint {
        let hyper = self.kernel.hyper().clone();
        ChainCheckpoint {
            schema: CHECKPOINT_SCHEMA.to_string(),
            version: CHECKPOINT_VERSION,
            iteration: self.iteration,
            hyper_digest: hyper.digest(),
            hyper,
            data_digest: self.data_digest.clone(),
            held_out: self.mask.clone(),
            state: self.state.clone(),
            rng: RngState::capture(&self.rng),
            sampler: self.sampler.clone(),
            accumulated: self.acc.clone(),
        }
    }

    pub fn state(&self) -> &LatentState {
        &self.state
    }

    pub fn hyper(&self) -> &HyperParams {
        self.kernel.hyper()
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn mask(&self) -> &ObservationMask {
        &self.mask
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.hyper().total_iterations()
    }

    /// Whether the most recent iteration was retained.
    pub fn just_retained(&self) -> bool {
        let hp = self.hyper();
        self.iteration > hp.burn_in && (self.iteration - hp.burn_in).is_multiple_of(hp.thin)
    }

    pub fn current_step_size(&self) -> f64 {
        self.sampler.mh_step
    }

    /// Runs one iteration and updates retention and adaptation bookkeeping.
    pub fn step(&mut self) -> Result<()> {
        let stats = self.kernel.step(&mut self.state, &self.view, self.sampler.mh_step, &mut self.rng)?;
        self.iteration += 1;
        let burn_in = self.hyper().burn_in;
        if self.iteration <= burn_in {
            let s = &mut self.sampler;
            s.burn_accepted += stats.accepted;
            s.burn_proposed += stats.proposed;
            s.window_accepted += stats.accepted;
            s.window_proposed += stats.proposed;
            if s.adapt_step && self.iteration.is_multiple_of(ADAPT_WINDOW) && s.window_proposed > 0 {
                let rate = s.window_accepted as f64 / s.window_proposed as f64;
                if rate < TARGET_ACCEPT.0 {
                    s.mh_step *= 0.8;
                } else if rate > TARGET_ACCEPT.1 {
                    s.mh_step *= 1.25;
                }
                s.window_accepted = 0;
                s.window_proposed = 0;
            }
        } else {
            self.sampler.kept_accepted += stats.accepted;
            self.sampler.kept_proposed += stats.proposed;
            if self.just_retained() {
                self.acc.record(&self.state);
            }
        }
        Ok(())
    }

    /// Runs to completion, calling `hook` after every iteration.
    pub fn run_with<F>(mut self, mut hook: F) -> Result<PosteriorSummary>
    where
        F: FnMut(&Chain) -> Result<()>,
    {
        let started = Instant::now();
        while !self.is_finished() {
            self.step()?;
            hook(&self)?;
        }
        let mut summary = self.finish();
        summary.wall_clock_secs = Some(started.elapsed().as_secs_f64());
        Ok(summary)
    }

    pub fn run(self) -> Result<PosteriorSummary> {
        self.run_with(|_| Ok(()))
    }

    /// Builds the summary from what has been retained so far.
    pub fn finish(self) -> PosteriorSummary {
        let hp = self.kernel.hyper().clone();
        let kept = self.acc.samples.len().max(1) as f64;
        let rate = |a: u64, p: u64| if p == 0 { 0.0 } else { a as f64 / p as f64 };
        PosteriorSummary {
            n_rows: self.view.n_rows(),
            n_cols: self.view.n_cols(),
            k_max: hp.k_max,
            held_out: self.mask,
            z_mean: self.acc.z_sum.mapv(|c| c as f64 / kept),
            b_mean: self.acc.b_sum.mapv(|b| b / kept),
            samples: self.acc.samples,
            k_plus_trace: self.acc.k_plus_trace,
            alpha_trace: self.acc.alpha_trace,
            burn_in_acceptance: rate(self.sampler.burn_accepted, self.sampler.burn_proposed),
            acceptance: rate(self.sampler.kept_accepted, self.sampler.kept_proposed),
            mh_step: self.sampler.mh_step,
            hyper: hp,
            wall_clock_secs: None,
        }
    }
}

fn random_state<R: Rng + ?Sized>(hp: &HyperParams, view: &TrainingView, rng: &mut R) -> Result<LatentState> {
    let alpha = random::gamma(hp.alpha_prior_shape, 1.0 / hp.alpha_prior_scale, rng);
    let pi = sample_pi_truncated(alpha, hp.c, hp.sigma, hp.k_max, hp.eps_trunc, rng)?;
    let b = Array2::from_shape_simple_fn((hp.k_max, view.n_cols()), || random::gamma(hp.alpha_b, hp.b_rate(), rng));
    let mut state =
        LatentState { z: Array2::from_elem((view.n_rows(), hp.k_max), false), b, pi, alpha, aux: Vec::new() };
    for n in 0..view.n_rows() {
        let cells = view.row_cells(n);
        let mut attempts = 0;
        loop {
            for k in 0..hp.k_max {
                state.z[[n, k]] = rng.random::<bool>();
            }
            if row_supported(&state, n, cells) {
                break;
            }
            attempts += 1;
            if attempts >= INIT_ATTEMPTS {
                return Err(Error::InvalidState(format!("could not initialize row {n} with positive likelihood")));
            }
        }
    }
    Ok(state)
}

/// Runs a chain to completion.
pub fn run_chain(data: &CountMatrix, mask: &ObservationMask, config: &ChainConfig) -> Result<PosteriorSummary> {
    run_chain_with(data, mask, config, |_| Ok(()))
}

/// Runs a chain, handing a checkpoint to `on_checkpoint` every
/// `config.checkpoint_every` iterations.
pub fn run_chain_with<F>(
    data: &CountMatrix,
    mask: &ObservationMask,
    config: &ChainConfig,
    mut on_checkpoint: F,
) -> Result<PosteriorSummary>
where
    F: FnMut(&ChainCheckpoint) -> Result<()>,
{
    let every = config.checkpoint_every;
    Chain::new(data, mask, config)?.run_with(|chain| checkpoint_hook(chain, every, &mut on_checkpoint))
}

/// Continues a checkpointed chain to completion.
pub fn resume_chain<F>(
    data: &CountMatrix,
    checkpoint: ChainCheckpoint,
    checkpoint_every: Option<u64>,
    mut on_checkpoint: F,
) -> Result<PosteriorSummary>
where
    F: FnMut(&ChainCheckpoint) -> Result<()>,
{
    Chain::from_checkpoint(data, checkpoint)?
        .run_with(|chain| checkpoint_hook(chain, checkpoint_every, &mut on_checkpoint))
}

fn checkpoint_hook<F>(chain: &Chain, every: Option<u64>, on_checkpoint: &mut F) -> Result<()>
where
    F: FnMut(&ChainCheckpoint) -> Result<()>,
{
    match every {
        Some(e) if e > 0 && chain.iteration().is_multiple_of(e) && !chain.is_finished() => {
            on_checkpoint(&chain.checkpoint())
        }
        _ => Ok(()),
    }
}

/// Draws `(state, X)` from the full generative model with every cell
/// observed; the state's auxiliary counts are the per-feature Poisson draws
/// that sum to `X`.
pub fn sample_joint_prior<R: Rng + ?Sized>(
    kernel: &Kernel,
    n_rows: usize,
    n_cols: usize,
    rng: &mut R,
) -> Result<(LatentState, CountMatrix)> {
    let hp = kernel.hyper();
    let alpha = random::gamma(hp.alpha_prior_shape, 1.0 / hp.alpha_prior_scale, rng);
    let prior = kernel.atom_prior(alpha)?;
    let pi: Vec<f64> = (0..hp.k_max).map(|_| prior.sample(rng)).collect();
    let log_w: Vec<f64> = pi.iter().map(|&p| ln_odds(p)).collect();
    let mut z = Array2::from_elem((n_rows, hp.k_max), false);
    for n in 0..n_rows {
        let s = kernel.row_sum_pmf().sample(rng);
        let row = sample_row_given_sum_ln(&log_w, s, rng)?;
        for (k, v) in row.into_iter().enumerate() {
            z[[n, k]] = v;
        }
    }
    let b = Array2::from_shape_simple_fn((hp.k_max, n_cols), || random::gamma(hp.alpha_b, hp.b_rate(), rng));
    let mut state = LatentState { z, b, pi, alpha, aux: Vec::new() };
    let data = redraw_counts(&mut state, rng)?;
    Ok((state, data))
}

/// Draws `x'_{nd,k} ~ Poisson(z_nk B_kd)` for every cell, stores them as the
/// state's auxiliary counts, and returns `X = Σ_k x'`.
pub fn redraw_counts<R: Rng + ?Sized>(state: &mut LatentState, rng: &mut R) -> Result<CountMatrix> {
    let (n_rows, n_cols) = (state.n_rows(), state.b.ncols());
    let mut data = CountMatrix::with_default_labels(n_rows, n_cols)?;
    let mut aux = Vec::new();
    for n in 0..n_rows {
        for d in 0..n_cols {
            let counts: Vec<(usize, u64)> = (0..state.k_max())
                .filter(|&k| state.z[[n, k]])
                .map(|k| (k, random::poisson(state.b[[k, d]], rng)))
                .filter(|&(_, c)| c > 0)
                .collect();
            let x: u64 = counts.iter().map(|&(_, c)| c).sum();
            if x > 0 {
                data.set(n, d, x)?;
                aux.push(AuxCell { row: n, col: d, counts });
            }
        }
    }
    state.aux = aux;
    Ok(data)
}
