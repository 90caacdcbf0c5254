//! Growing the routed expert pool mid-run.
//!
//! Expansion appends experts and router rows while leaving every existing
//! parameter bit-identical, so the model's behavior changes only through the
//! new rows' selection scores. Dense layers can be upcycled into MoE layers
//! by replication, which preserves the dense function exactly.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{gaussian, ExpertParams, FeedForward, ModelParams, MoELayerParams, RouterParams};
use crate::numerics::Tensor;
use crate::rng::{self, substream};
use crate::trainer::OptimizerState;

/// How freshly added experts and router rows are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// New experts and router rows drawn from N(0, noise_std^2); existing
    /// router biases kept, new bias entries zero.
    Gaussian,
    /// Same draw, then every router bias entry (old and new) set to zero.
    GaussianBiasReset,
    /// New experts clone a parent expert and its router row, plus
    /// N(0, noise_std^2) perturbation; biases copied from the parent.
    CopyFromParent,
}

/// Parent choice for [`InitKind::CopyFromParent`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParentSelection {
    /// Expert with the highest token count in the supplied utilization
    /// snapshot; falls back to round-robin when no snapshot is given.
    MostUtilized,
    RoundRobin,
    FixedIndex(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitStrategy {
    pub kind: InitKind,
    pub noise_std: f64,
    pub parent_selection: ParentSelection,
}

impl InitStrategy {
    pub fn gaussian(noise_std: f64) -> Self {
        Self {
            kind: InitKind::Gaussian,
            noise_std,
            parent_selection: ParentSelection::RoundRobin,
        }
    }

    pub fn gaussian_bias_reset(noise_std: f64) -> Self {
        Self {
            kind: InitKind::GaussianBiasReset,
            noise_std,
            parent_selection: ParentSelection::RoundRobin,
        }
    }

    pub fn copy_from_parent(noise_std: f64, parent_selection: ParentSelection) -> Self {
        Self {
            kind: InitKind::CopyFromParent,
            noise_std,
            parent_selection,
        }
    }
}

impl Default for InitStrategy {
    /// The main-schedule default: fresh Gaussian experts with a router bias
    /// reset, noise scale 0.02.
    fn default() -> Self {
        Self::gaussian_bias_reset(0.02)
    }
}

/// One pool-growth step.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionSpec {
    pub e_from: usize,
    pub e_to: usize,
    pub strategy: InitStrategy,
    pub seed: u64,
}

impl ExpansionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.e_to <= self.e_from {
            return Err(Error::Config(format!(
                "expansion must grow the pool: {} -> {}",
                self.e_from, self.e_to
            )));
        }
        if self.e_from == 0 {
            return Err(Error::Config("cannot expand an empty pool".into()));
        }
        if self.strategy.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        if let ParentSelection::FixedIndex(i) = self.strategy.parent_selection {
            if i >= self.e_from {
                return Err(Error::Config(format!(
                    "parent index {i} outside existing pool of {}",
                    self.e_from
                )));
            }
        }
        Ok(())
    }
}

/// Converts a dense FFN into an MoE layer whose function is unchanged: all
/// `e` routed experts are exact copies, the router is zero (uniform scores,
/// index-ordered ties), and the shared expert starts at zero.
pub fn upcycle_dense(dense_ffn: &ExpertParams, e: usize, top_k: usize) -> MoELayerParams {
    assert!(e >= 1, "pool needs at least one expert");
    assert!(top_k >= 1 && top_k <= e, "top_k {top_k} outside 1..={e}");
    let d_hidden = dense_ffn.w_gate.shape()[0];
    let d_model = dense_ffn.w_gate.shape()[1];
    MoELayerParams {
        router: RouterParams {
            weight: Tensor::zeros(&[e, d_model]),
            bias: Tensor::zeros(&[e]),
        },
        routed_experts: vec![dense_ffn.clone(); e],
        shared_expert: Some(ExpertParams::zeros(d_model, d_hidden)),
    }
}

fn perturbed(parent: &Tensor, noise_std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut out = parent.clone();
    if noise_std > 0.0 {
        for v in out.data_mut() {
            *v += rng::next_normal(rng) * noise_std;
        }
    } else {
        // Keep the stream position independent of noise_std.
        for _ in 0..out.numel() {
            rng::next_normal(rng);
        }
    }
    out
}

fn pick_parent(
    selection: ParentSelection,
    e_from: usize,
    new_ordinal: usize,
    utilization: Option<&[u64]>,
) -> usize {
    match selection {
        ParentSelection::FixedIndex(i) => i,
        ParentSelection::RoundRobin => new_ordinal % e_from,
        ParentSelection::MostUtilized => match utilization {
            Some(counts) => {
                let mut best = 0;
                for (i, &c) in counts.iter().enumerate() {
                    if c > counts[best] {
                        best = i;
                    }
                }
                best
            }
            None => new_ordinal % e_from,
        },
    }
}

/// Grows every MoE layer from `e_from` to `e_to` experts.
///
/// `utilization` optionally supplies per-layer token counts (one slice per
/// MoE layer in depth order, each of length `e_from`) for most-utilized
/// parent selection. Existing experts, router rows, and dense layers come
/// through bit-identical.
pub fn expand(
    params: &ModelParams,
    spec: &ExpansionSpec,
    utilization: Option<&[Vec<u64>]>,
) -> Result<ModelParams> {
    spec.validate()?;
    let mut out = params.clone();
    let mut moe_idx = 0usize;
    for (li, layer) in out.layers.iter_mut().enumerate() {
        let moe = match &mut layer.ffn {
            FeedForward::Dense(_) => continue,
            FeedForward::Moe(m) => m,
        };
        if moe.routed_experts.len() != spec.e_from {
            return Err(Error::Train(format!(
                "layer {li} has {} experts, expansion spec expects {}",
                moe.routed_experts.len(),
                spec.e_from
            )));
        }
        let util = match utilization {
            Some(u) => {
                let counts = u.get(moe_idx).ok_or_else(|| {
                    Error::Train(format!("utilization snapshot missing MoE layer {moe_idx}"))
                })?;
                if counts.len() != spec.e_from {
                    return Err(Error::Train(format!(
                        "utilization snapshot has {} experts for a pool of {}",
                        counts.len(),
                        spec.e_from
                    )));
                }
                Some(counts.as_slice())
            }
            None => None,
        };

        let d_model = moe.router.weight.shape()[1];
        let mut rng = substream(spec.seed, &format!("expand/{}to{}/layer{li}", spec.e_from, spec.e_to));

        let mut weight = Tensor::zeros(&[spec.e_to, d_model]);
        weight.data_mut()[..spec.e_from * d_model].copy_from_slice(moe.router.weight.data());
        let mut bias = Tensor::zeros(&[spec.e_to]);
        bias.data_mut()[..spec.e_from].copy_from_slice(moe.router.bias.data());

        for j in spec.e_from..spec.e_to {
            let ordinal = j - spec.e_from;
            match spec.strategy.kind {
                InitKind::Gaussian | InitKind::GaussianBiasReset => {
                    let row = gaussian(&[d_model], spec.strategy.noise_std, &mut rng);
                    weight.data_mut()[j * d_model..(j + 1) * d_model].copy_from_slice(row.data());
                    // bias stays zero for new rows
                    let h = moe.routed_experts[0].w_gate.shape()[0];
                    moe.routed_experts.push(ExpertParams {
                        w_gate: gaussian(&[h, d_model], spec.strategy.noise_std, &mut rng),
                        w_up: gaussian(&[h, d_model], spec.strategy.noise_std, &mut rng),
                        w_down: gaussian(&[d_model, h], spec.strategy.noise_std, &mut rng),
                    });
                }
                InitKind::CopyFromParent => {
                    let p = pick_parent(spec.strategy.parent_selection, spec.e_from, ordinal, util);
                    let parent_row = Tensor::new(
                        vec![d_model],
                        moe.router.weight.data()[p * d_model..(p + 1) * d_model].to_vec(),
                    )?;
                    let row = perturbed(&parent_row, spec.strategy.noise_std, &mut rng);
                    weight.data_mut()[j * d_model..(j + 1) * d_model].copy_from_slice(row.data());
                    bias.data_mut()[j] = moe.router.bias.data()[p];
                    let parent = moe.routed_experts[p].clone();
                    moe.routed_experts.push(ExpertParams {
                        w_gate: perturbed(&parent.w_gate, spec.strategy.noise_std, &mut rng),
                        w_up: perturbed(&parent.w_up, spec.strategy.noise_std, &mut rng),
                        w_down: perturbed(&parent.w_down, spec.strategy.noise_std, &mut rng),
                    });
                }
            }
        }
        if spec.strategy.kind == InitKind::GaussianBiasReset {
            bias.data_mut().fill(0.0);
        }
        moe.router = RouterParams { weight, bias };
        moe_idx += 1;
    }
    if moe_idx == 0 {
        return Err(Error::Train("model has no MoE layers to expand".into()));
    }
    Ok(out)
}

/// Discards the old accumulators and returns fresh zero state sized to the
/// expanded model; the next update then bias-corrects as step 1.
pub fn reset_optimizer(old: OptimizerState, new_params: &ModelParams) -> OptimizerState {
    drop(old);
    OptimizerState::zeros(new_params)
}
