//! Symmetric cross-entropy objective, optimizer, training loop and synthetic data.
mod loss;
mod optim;
mod sweep;
mod synth;
mod train;

pub use loss::{
    build_loss, evaluate_loss, forward_ce, reverse_ce, symmetric_loss, LossEval, LossOptions, LossTerms, LossVars,
    DEFAULT_BETA, REVERSE_SAMPLES,
};
pub use optim::{Adam, Plateau, DEFAULT_LR};
pub use sweep::{alpha_sweep, format_sweep_table, sweep_csv, SweepRow};
pub use synth::{micro_episode, synth_fork, synth_fork_with, Branch, ForkConfig, ForkDataset};
pub use train::{
    prepare_all, sample_all, train, train_model, validate, write_train_log, EpochLog, TrainConfig, TrainOutcome,
    Validation, BEST_CHECKPOINT, LAST_CHECKPOINT, TRAIN_LOG,
};

#[cfg(test)]
mod tests;
