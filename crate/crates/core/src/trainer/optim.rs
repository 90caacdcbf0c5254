//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::model::ModelParams;

use super::TrainConfig;

/// First and second moment accumulators, stored flat in the model's fixed
/// tensor traversal order so they mirror the parameter record element for
/// element.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Completed update count; bias correction uses `step + 1` during the
    /// next update.
    pub step: u64,
}

impl OptimizerState {
    pub fn zeros(params: &ModelParams) -> Self {
        let n = params.n_params();
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// One AdamW update on a contiguous slice of parameters.
///
/// `t` is the 1-based step number used for bias correction. Weight decay is
/// decoupled: `p -= lr * wd * p` on top of the Adam direction, applied to
/// every parameter uniformly.
pub fn adamw_update_slice(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &TrainConfig,
) {
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    // Decay first, multiplicatively, so a zero-gradient step scales the
    // parameter by (1 - lr*wd) exactly.
    let decay = 1.0 - lr * cfg.weight_decay;
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] = p[i] * decay - lr * (mhat / (vhat.sqrt() + cfg.adam_eps));
    }
}

/// Applies one optimizer step in place and advances the step counter.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    opt: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = params.n_params();
    if opt.len() != n {
        return Err(Error::Train(format!(
            "optimizer state holds {} moments for {} parameters",
            opt.len(),
            n
        )));
    }
    let gflat = grads.flatten();
    if gflat.len() != n {
        return Err(Error::Train(format!(
            "gradient record holds {} values for {} parameters",
            gflat.len(),
            n
        )));
    }
    let t = opt.step + 1;
    let mut off = 0;
    params.for_each_tensor_mut(&mut |_, tensor| {
        let k = tensor.numel();
        adamw_update_slice(
            tensor.data_mut(),
            &gflat[off..off + k],
            &mut opt.m[off..off + k],
            &mut opt.v[off..off + k],
            t,
            lr,
            cfg,
        );
        off += k;
    });
    opt.step = t;
    Ok(())
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip threshold must be positive");
    let mut sq = 0.0;
    grads.for_each_tensor(&mut |_, t| {
        sq += t.data().iter().map(|x| x * x).sum::<f64>();
    });
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.for_each_tensor_mut(&mut |_, t| {
            for x in t.data_mut() {
                *x *= scale;
            }
        });
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelParams};
    use crate::rng::substream;
    use crate::trainer::TrainConfig;

    fn tiny_model() -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_q_heads: 2,
            n_kv_heads: 1,
            d_head: 4,
            vocab_size: 11,
            seq_len: 4,
            rope_base: 1e4,
            dense_prefix_layers: 0,
            n_experts: 2,
            top_k: 1,
            d_expert_hidden: 5,
            n_shared_experts: 1,
            lb_coeff: 0.01,
            router_bias_enabled: true,
        };
        let p = ModelParams::init(&cfg, &mut substream(1, "opt-model")).unwrap();
        (cfg, p)
    }

    #[test]
    fn zero_gradient_applies_pure_decay() {
        let (_, mut params) = tiny_model();
        let before = params.flatten();
        let grads = params.zeros_like();
        let mut opt = OptimizerState::zeros(&params);
        let mut cfg = TrainConfig::desk_default();
        cfg.weight_decay = 0.05;
        adamw_step(&mut params, &grads, &mut opt, 1e-3, &cfg).unwrap();
        let after = params.flatten();
        for (b, a) in before.iter().zip(&after) {
            assert_eq!(*a, b * (1.0 - 1e-3 * 0.05), "decay must be exact");
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn matches_hand_computed_scalar_trace() {
        let mut cfg = TrainConfig::desk_default();
        cfg.beta1 = 0.9;
        cfg.beta2 = 0.95;
        cfg.adam_eps = 1e-8;
        cfg.weight_decay = 0.05;
        let lr = 0.1;
        let gs = [0.5, -0.3, 0.2];

        // Reference trace written out step by step with plain arithmetic.
        let (mut rm, mut rv, mut rp) = (0.0f64, 0.0f64, 1.0f64);
        let mut reference = Vec::new();
        for (i, &g) in gs.iter().enumerate() {
            let t = (i + 1) as i32;
            rm = 0.9 * rm + (1.0 - 0.9) * g;
            rv = 0.95 * rv + (1.0 - 0.95) * g * g;
            let mhat = rm / (1.0 - 0.9f64.powi(t));
            let vhat = rv / (1.0 - 0.95f64.powi(t));
            rp = rp * (1.0 - lr * 0.05) - lr * (mhat / (vhat.sqrt() + 1e-8));
            reference.push(rp);
        }

        let mut p = [1.0f64];
        let mut m = [0.0f64];
        let mut v = [0.0f64];
        for (i, &g) in gs.iter().enumerate() {
            adamw_update_slice(&mut p, &[g], &mut m, &mut v, (i + 1) as u64, lr, &cfg);
            assert_eq!(p[0], reference[i], "diverged at step {}", i + 1);
        }
        // First step has a sign-like magnitude: |update| close to lr.
        let first_move = 1.0 - reference[0];
        assert!((first_move - lr * (1.0 + 0.05)).abs() < 1e-6, "{first_move}");
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let (mcfg, mut pa) = tiny_model();
        let mut pb = pa.clone();
        let mut oa = OptimizerState::zeros(&pa);
        let mut ob = OptimizerState::zeros(&pb);
        let tcfg = TrainConfig::desk_default();
        let tokens = [1u32, 4, 9, 2, 7, 0, 3, 10];
        for _ in 0..3 {
            let (_, ga) = crate::model::lm_loss_and_grad(&pa, &mcfg, &tokens).unwrap();
            let (_, gb) = crate::model::lm_loss_and_grad(&pb, &mcfg, &tokens).unwrap();
            adamw_step(&mut pa, &ga, &mut oa, 1e-3, &tcfg).unwrap();
            adamw_step(&mut pb, &gb, &mut ob, 1e-3, &tcfg).unwrap();
        }
        assert_eq!(pa.flatten(), pb.flatten());
        assert_eq!(oa, ob);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let (_, params) = tiny_model();
        let mut grads = params.zeros_like();
        // Two known entries: norm 5.
        grads.token_embedding.data_mut()[0] = 3.0;
        grads.token_embedding.data_mut()[1] = 4.0;
        let norm = clip_global_norm(&mut grads, 1.0);
        assert_eq!(norm, 5.0);
        assert!((grads.token_embedding.data()[0] - 0.6).abs() < 1e-15);
        assert!((grads.token_embedding.data()[1] - 0.8).abs() < 1e-15);
        let mut sq = 0.0;
        grads.for_each_tensor(&mut |_, t| sq += t.data().iter().map(|x| x * x).sum::<f64>());
        assert!(sq.sqrt() <= 1.0 + 1e-12);

        let mut small = params.zeros_like();
        small.token_embedding.data_mut()[0] = 0.3;
        small.token_embedding.data_mut()[1] = 0.4;
        let norm = clip_global_norm(&mut small, 1.0);
        assert_eq!(norm, 0.5);
        assert_eq!(small.token_embedding.data()[0], 0.3, "below threshold stays put");
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let (_, mut params) = tiny_model();
        let grads = params.zeros_like();
        let mut opt = OptimizerState::zeros(&params);
        opt.m.pop();
        opt.v.pop();
        let cfg = TrainConfig::desk_default();
        assert!(adamw_step(&mut params, &grads, &mut opt, 1e-3, &cfg).is_err());
    }
}
