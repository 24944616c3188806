//! Posterior inference: the transition kernel, the chain driver with
//! checkpointing, and posterior-predictive evaluation.

mod chain;
mod kernel;
mod predict;

pub use chain::{
    redraw_counts, resume_chain, run_chain, run_chain_with, sample_joint_prior, Accumulator, Chain, ChainCheckpoint,
    ChainConfig, InitMode, RngState, SamplerState, CHECKPOINT_SCHEMA, CHECKPOINT_VERSION,
};
pub use kernel::{
    activity_sums, aux_sums, gibbs_update_b, mh_log_accept_ratio, mh_update_pi, refresh_aux, sample_alpha,
    sample_alpha_with_mass, sample_aux_counts, sweep_z, Kernel, PiTarget, RestrictedPiTarget, StepStats, TrainingView,
};
pub use predict::predictive_log_lik;
