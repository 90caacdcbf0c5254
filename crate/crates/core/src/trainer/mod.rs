//! Staged training orchestration: the optimizer, the warm-stable-decay
//! learning-rate schedule with per-expansion re-warmups, checkpointing, and
//! the stage/expansion loop itself.

pub mod checkpoint;
pub mod optim;
pub mod run;

pub use checkpoint::{checkpoint_load, checkpoint_save, CheckpointData};
pub use optim::{adamw_step, clip_global_norm, OptimizerState};
pub use run::{
    run_emo, stage_specs_from_schedule, source_from_checkpoint, train_stage, EmoRunResult,
    RunState, ScheduleContext, StageSpec, TrainerIo,
};

use crate::error::{Error, Result};

/// Run-level training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Tokens consumed per optimizer step (B).
    pub batch_tokens: usize,
    pub seq_len: usize,
    /// Total token budget for the run (D).
    pub total_tokens: f64,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    /// Fraction of total steps after which the final stage starts decaying.
    pub decay_start_fraction: f64,
    /// lr at the last step as a fraction of peak.
    pub final_lr_ratio: f64,
    /// Length of the 0-to-peak re-warmup after each expansion.
    pub expansion_warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub eval_interval_steps: usize,
}

impl TrainConfig {
    pub fn desk_default() -> Self {
        Self {
            batch_tokens: 8192,
            seq_len: 256,
            total_tokens: 2e7,
            peak_lr: 3e-3,
            warmup_steps: 200,
            decay_start_fraction: 0.9,
            final_lr_ratio: 0.01,
            expansion_warmup_steps: 50,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.05,
            clip_norm: 1.0,
            seed: 0,
            eval_interval_steps: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay_start_fraction > 0.0 && self.decay_start_fraction < 1.0) {
            return Err(Error::Config(format!(
                "decay_start_fraction {} outside (0, 1)",
                self.decay_start_fraction
            )));
        }
        if !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "final_lr_ratio {} outside (0, 1]",
                self.final_lr_ratio
            )));
        }
        if self.batch_tokens == 0 || self.seq_len < 2 || self.batch_tokens % self.seq_len != 0 {
            return Err(Error::Config(format!(
                "batch_tokens {} must be a positive multiple of seq_len {}",
                self.batch_tokens, self.seq_len
            )));
        }
        if self.total_tokens <= 0.0 || self.peak_lr <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("budget, peak lr, and clip norm must be positive".into()));
        }
        Ok(())
    }

    /// Whole optimizer steps covering `tokens`.
    pub fn steps_for_tokens(&self, tokens: f64) -> usize {
        (tokens / self.batch_tokens as f64).ceil() as usize
    }
}

/// Learning rate for a 1-based `global_step` of `total_steps`.
///
/// `steps_into_stage` is 1-based within the current stage. The first stage
/// warms up linearly over `warmup_steps`; each later stage re-warms from 0
/// over `expansion_warmup_steps`. The rate then holds at peak, and in the
/// final stage decays linearly from `decay_start_fraction * total_steps` to
/// `peak * final_lr_ratio` at the last step.
pub fn wsd_lr(
    global_step: usize,
    total_steps: usize,
    steps_into_stage: usize,
    config: &TrainConfig,
    is_final_stage: bool,
) -> f64 {
    debug_assert!(global_step >= 1 && steps_into_stage >= 1);
    let in_first_stage = global_step == steps_into_stage;
    let warmup = if in_first_stage {
        if config.warmup_steps == 0 {
            1.0
        } else {
            (global_step as f64 / config.warmup_steps as f64).min(1.0)
        }
    } else if config.expansion_warmup_steps == 0 {
        1.0
    } else {
        (steps_into_stage as f64 / config.expansion_warmup_steps as f64).min(1.0)
    };

    let mut decay = 1.0;
    if is_final_stage {
        let decay_start = (config.decay_start_fraction * total_steps as f64).ceil() as usize;
        if global_step >= decay_start && total_steps > decay_start {
            let frac = (global_step - decay_start) as f64 / (total_steps - decay_start) as f64;
            decay = 1.0 - (1.0 - config.final_lr_ratio) * frac;
        } else if global_step >= decay_start {
            decay = config.final_lr_ratio;
        }
    }
    config.peak_lr * warmup * decay
}
