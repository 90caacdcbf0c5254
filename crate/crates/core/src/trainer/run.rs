//! The stage loop: train within a stage, expand the expert pool between
//! stages, and record metrics, utilization snapshots, and checkpoints.

use std::io::Write;
use std::path::PathBuf;

use crate::datagen::DataSource;
use crate::error::{Error, Result};
use crate::expansion::{expand, reset_optimizer, ExpansionSpec, InitStrategy};
use crate::metrics::{utilization_from_decisions, UtilizationReport};
use crate::model::{lm_loss_and_grad, ModelConfig, ModelParams};
use crate::trainer::checkpoint::{checkpoint_save, CheckpointData};
use crate::trainer::{adamw_step, clip_global_norm, wsd_lr, OptimizerState, TrainConfig};

/// One entry of the expansion schedule: the expert count to train at and the
/// token budget to spend there.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    /// 1-based stage number.
    pub stage: usize,
    /// Routed expert count during this stage.
    pub e: usize,
    pub allocated_tokens: f64,
    /// How the pool grows on entry to this stage (ignored when the model
    /// already holds `e` experts).
    pub strategy: InitStrategy,
}

/// Progress counters that survive checkpointing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunState {
    pub global_step: u64,
    pub tokens_consumed: f64,
    /// Stage currently being trained; 0 before the first step.
    pub current_stage: usize,
    /// Completed steps within the current stage.
    pub stage_step: u64,
    /// Per-step `(global_step, cross_entropy)` in nats.
    pub loss_history: Vec<(u64, f64)>,
}

impl RunState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Where training output goes. `sink()` discards everything, which keeps
/// library tests quiet; the CLI wires in a metrics stream and a directory.
pub struct TrainerIo {
    pub metrics: Option<Box<dyn Write>>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Routing-count snapshots taken every `eval_interval_steps`.
    pub utilization: Vec<UtilizationReport>,
    header_written: bool,
}

impl TrainerIo {
    pub fn sink() -> Self {
        Self {
            metrics: None,
            checkpoint_dir: None,
            utilization: Vec::new(),
            header_written: false,
        }
    }

    pub fn with_metrics(mut self, w: Box<dyn Write>) -> Self {
        self.metrics = Some(w);
        self
    }

    pub fn with_checkpoint_dir(mut self, dir: PathBuf) -> Self {
        self.checkpoint_dir = Some(dir);
        self
    }

    fn metrics_line(
        &mut self,
        step: u64,
        tokens: f64,
        stage: usize,
        e: usize,
        lr: f64,
        loss: f64,
        lb_penalty: f64,
    ) -> Result<()> {
        let Some(w) = self.metrics.as_mut() else {
            return Ok(());
        };
        if !self.header_written {
            writeln!(w, "step,tokens,stage,E,lr,loss,lb_penalty")?;
            self.header_written = true;
        }
        writeln!(w, "{step},{tokens},{stage},{e},{lr},{loss},{lb_penalty}")?;
        w.flush()?;
        Ok(())
    }
}

/// Step bookkeeping that spans stages, fixed before the run starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleContext {
    /// Optimizer steps across the whole run.
    pub total_steps: usize,
    /// Optimizer steps in this stage.
    pub stage_steps: usize,
    pub is_final_stage: bool,
}

impl ScheduleContext {
    /// Context for a run that is this single stage.
    pub fn single_stage(cfg: &TrainConfig, allocated_tokens: f64) -> Self {
        let steps = cfg.steps_for_tokens(allocated_tokens);
        Self {
            total_steps: steps,
            stage_steps: steps,
            is_final_stage: true,
        }
    }
}

fn save_state(
    io: &TrainerIo,
    label: &str,
    params: &ModelParams,
    opt: &OptimizerState,
    run: &RunState,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    source: &DataSource,
) -> Result<()> {
    let Some(dir) = &io.checkpoint_dir else {
        return Ok(());
    };
    let data = CheckpointData {
        model_cfg: model_cfg.clone(),
        train_cfg: cfg.clone(),
        data: source.snapshot(),
        params: params.clone(),
        opt: opt.clone(),
        run: run.clone(),
    };
    checkpoint_save(&data, &dir.join(format!("{label}.emoc")))
}

/// Rebuild the data source a checkpoint was taken against, positioned at the
/// exact batch it would have produced next.
pub fn source_from_checkpoint(data: &CheckpointData) -> Result<DataSource> {
    DataSource::from_spec(data.data.clone())
}

/// Train one stage, continuing from `run` if it is already mid-stage.
///
/// Steps run from `run.stage_step + 1` through `ctx.stage_steps`; entering a
/// stage the run state has not seen resets the in-stage counter. Every step
/// draws one batch, takes one clipped AdamW step at the scheduled rate,
/// appends to the loss history, and emits one metrics line. Every
/// `eval_interval_steps` the step's routing counts are snapshotted and, when
/// a checkpoint directory is set, the full state is saved as `step{N}.emoc`.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    run: &mut RunState,
    stage: &StageSpec,
    source: &mut DataSource,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    ctx: &ScheduleContext,
    io: &mut TrainerIo,
) -> Result<()> {
    cfg.validate()?;
    if stage.allocated_tokens <= 0.0 {
        return Err(Error::Train(format!(
            "stage {} has non-positive token allocation",
            stage.stage
        )));
    }
    let live_e = params.n_experts();
    if live_e != Some(stage.e) {
        return Err(Error::Train(format!(
            "stage {} trains E={}, model holds {:?} experts",
            stage.stage, stage.e, live_e
        )));
    }
    if model_cfg.n_experts != stage.e {
        return Err(Error::Train(format!(
            "stage {} trains E={}, config says {}",
            stage.stage, stage.e, model_cfg.n_experts
        )));
    }
    if model_cfg.seq_len != cfg.seq_len || source.seq_len() != cfg.seq_len {
        return Err(Error::Train(format!(
            "sequence lengths disagree: model {}, data {}, trainer {}",
            model_cfg.seq_len,
            source.seq_len(),
            cfg.seq_len
        )));
    }
    if source.vocab_size() != model_cfg.vocab_size {
        return Err(Error::Train(format!(
            "data vocab {} does not fit model vocab {}",
            source.vocab_size(),
            model_cfg.vocab_size
        )));
    }
    if opt.len() != params.n_params() {
        return Err(Error::Train(format!(
            "optimizer holds {} moments for {} parameters",
            opt.len(),
            params.n_params()
        )));
    }

    if run.current_stage != stage.stage {
        run.current_stage = stage.stage;
        run.stage_step = 0;
    }
    let n_seqs = cfg.batch_tokens / cfg.seq_len;
    let first = run.stage_step as usize + 1;
    for step_in_stage in first..=ctx.stage_steps {
        let global = run.global_step as usize + 1;
        let lr = wsd_lr(global, ctx.total_steps, step_in_stage, cfg, ctx.is_final_stage);
        let batch = source.next_batch(n_seqs);
        let (breakdown, mut grads) = lm_loss_and_grad(params, model_cfg, &batch.tokens)
            .map_err(|e| Error::Train(format!("stage {} step {global}: {e}", stage.stage)))?;
        if !breakdown.total.is_finite() {
            return Err(Error::Train(format!(
                "non-finite loss {} at stage {} step {global}; aborting before the update",
                breakdown.total, stage.stage
            )));
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        adamw_step(params, &grads, opt, lr, cfg)?;

        run.global_step = global as u64;
        run.stage_step = step_in_stage as u64;
        run.tokens_consumed += cfg.batch_tokens as f64;
        run.loss_history.push((run.global_step, breakdown.cross_entropy));
        io.metrics_line(
            run.global_step,
            run.tokens_consumed,
            stage.stage,
            stage.e,
            lr,
            breakdown.cross_entropy,
            breakdown.load_balance,
        )?;

        if cfg.eval_interval_steps > 0 && global % cfg.eval_interval_steps == 0 {
            io.utilization.push(UtilizationReport {
                counts: utilization_from_decisions(&breakdown.decisions),
                total_tokens: cfg.batch_tokens as u64,
                top_k: model_cfg.top_k,
                step: run.global_step,
            });
            save_state(
                io,
                &format!("step{global}"),
                params,
                opt,
                run,
                model_cfg,
                cfg,
                source,
            )?;
        }
    }
    Ok(())
}

/// A finished run: the trained model, the config reflecting its final expert
/// count, and the accumulated optimizer and progress state.
#[derive(Debug)]
pub struct EmoRunResult {
    pub params: ModelParams,
    pub model_cfg: ModelConfig,
    pub opt: OptimizerState,
    pub run: RunState,
    /// Optimizer steps each stage actually ran, in stage order.
    pub stage_step_counts: Vec<usize>,
    /// `(stage, global step completed when its expansion fired)` for every
    /// stage that grew the pool.
    pub expansion_steps: Vec<(usize, u64)>,
    /// Wall-clock seconds spent training each stage.
    pub stage_seconds: Vec<f64>,
}

/// Run the full schedule: for each stage, grow the pool to its expert count
/// (resetting optimizer moments), then train on its token allocation.
///
/// A first stage matching the model's expert count trains without expanding.
/// Stage boundaries with a checkpoint directory set are bracketed by
/// `stage{n}_pre_expansion.emoc` and `stage{n}_post_expansion.emoc` saves.
/// Per-stage step counts round up; the final stage absorbs the rounding so
/// the whole run takes exactly `ceil(sum of allocations / batch_tokens)`
/// steps.
pub fn run_emo(
    params: ModelParams,
    model_cfg: &ModelConfig,
    stages: &[StageSpec],
    source: &mut DataSource,
    cfg: &TrainConfig,
    io: &mut TrainerIo,
) -> Result<EmoRunResult> {
    cfg.validate()?;
    if stages.is_empty() {
        return Err(Error::Train("schedule has no stages".into()));
    }
    for (i, s) in stages.iter().enumerate() {
        if s.stage != i + 1 {
            return Err(Error::Train(format!(
                "stages must be numbered 1..; position {} holds stage {}",
                i + 1,
                s.stage
            )));
        }
        if s.allocated_tokens <= 0.0 {
            return Err(Error::Train(format!(
                "stage {} has non-positive token allocation",
                s.stage
            )));
        }
        if i > 0 && s.e <= stages[i - 1].e {
            return Err(Error::Train(format!(
                "expert counts must strictly increase: stage {} has E={} after E={}",
                s.stage,
                s.e,
                stages[i - 1].e
            )));
        }
    }

    let mut params = params;
    let mut live_cfg = model_cfg.clone();
    let current_e = params
        .n_experts()
        .ok_or_else(|| Error::Train("model has no routed experts to grow".into()))?;
    if live_cfg.n_experts != current_e {
        return Err(Error::Train(format!(
            "config says {} experts, model holds {current_e}",
            live_cfg.n_experts
        )));
    }
    if stages[0].e < current_e {
        return Err(Error::Train(format!(
            "first stage wants E={}, model already holds {current_e}",
            stages[0].e
        )));
    }

    let total_alloc: f64 = stages.iter().map(|s| s.allocated_tokens).sum();
    let slack = cfg.batch_tokens as f64 + 1e-9 * cfg.total_tokens.abs();
    if (total_alloc - cfg.total_tokens).abs() > slack {
        return Err(Error::Train(format!(
            "stage allocations sum to {total_alloc}, budget is {}",
            cfg.total_tokens
        )));
    }
    let total_steps = cfg.steps_for_tokens(total_alloc);
    let mut per_stage: Vec<usize> = stages
        .iter()
        .map(|s| cfg.steps_for_tokens(s.allocated_tokens))
        .collect();
    let head: usize = per_stage[..per_stage.len() - 1].iter().sum();
    if head >= total_steps {
        return Err(Error::Train(
            "rounding leaves no steps for the final stage".into(),
        ));
    }
    *per_stage.last_mut().unwrap() = total_steps - head;

    let mut opt = OptimizerState::zeros(&params);
    let mut run = RunState::new();
    let mut expansion_steps = Vec::new();
    let mut stage_seconds = Vec::with_capacity(stages.len());
    for (i, stage) in stages.iter().enumerate() {
        let live_e = params.n_experts().unwrap_or(0);
        if stage.e != live_e {
            expansion_steps.push((stage.stage, run.global_step));
            save_state(
                io,
                &format!("stage{}_pre_expansion", stage.stage),
                &params,
                &opt,
                &run,
                &live_cfg,
                cfg,
                source,
            )?;
            let spec = ExpansionSpec {
                e_from: live_e,
                e_to: stage.e,
                strategy: stage.strategy,
                seed: cfg.seed,
            };
            let last_counts = io.utilization.last().map(|u| u.counts.clone());
            params = expand(&params, &spec, last_counts.as_deref())?;
            opt = reset_optimizer(opt, &params);
            live_cfg.n_experts = stage.e;
            save_state(
                io,
                &format!("stage{}_post_expansion", stage.stage),
                &params,
                &opt,
                &run,
                &live_cfg,
                cfg,
                source,
            )?;
        }
        let ctx = ScheduleContext {
            total_steps,
            stage_steps: per_stage[i],
            is_final_stage: i == stages.len() - 1,
        };
        let started = std::time::Instant::now();
        train_stage(
            &mut params, &mut opt, &mut run, stage, source, &live_cfg, cfg, &ctx, io,
        )?;
        stage_seconds.push(started.elapsed().as_secs_f64());
    }
    Ok(EmoRunResult {
        params,
        model_cfg: live_cfg,
        opt,
        run,
        stage_step_counts: per_stage,
        expansion_steps,
        stage_seconds,
    })
}

/// Turn a token-allocation schedule into trainable stage specs, all growing
/// the pool the same way.
pub fn stage_specs_from_schedule(
    schedule: &crate::allocation::Schedule,
    strategy: InitStrategy,
) -> Vec<StageSpec> {
    schedule
        .stages
        .iter()
        .map(|p| StageSpec {
            stage: p.stage,
            e: p.e as usize,
            allocated_tokens: p.allocated,
            strategy,
        })
        .collect()
}
