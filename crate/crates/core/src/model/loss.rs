//! Next-token language-model loss over the full transformer, forward and
//! backward.
//!
//! A batch is a flat slice of token ids holding whole sequences of
//! `cfg.seq_len` tokens. Every position attends causally within its
//! sequence; position `i` predicts token `i + 1`, so each sequence
//! contributes `seq_len - 1` cross-entropy rows (the last position predicts
//! nothing and its logits are never formed). The training loss adds
//! `lb_coeff` times each MoE layer's load-balance penalty.

use crate::error::{Error, Result};
use crate::numerics::ops::{
    cross_entropy_probs, cross_entropy_probs_vjp, linear, linear_vjp, rms_norm, rms_norm_vjp,
    swiglu_batch, swiglu_batch_vjp, SwigluCache,
};
use crate::numerics::Tensor;

use super::attention::{attention_backward, attention_forward, AttnCache};
use super::moe::{add_into, load_balance_penalty, moe_backward, moe_forward_cached, MoeCache, RoutingDecision};
use super::{FeedForward, ModelConfig, ModelParams, RMS_EPS};

/// Loss components for one batch.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    /// Mean next-token cross-entropy in nats.
    pub cross_entropy: f64,
    /// Sum of per-MoE-layer load-balance penalties, before the coefficient.
    pub load_balance: f64,
    /// `cross_entropy + lb_coeff * load_balance`; the quantity optimized.
    pub total: f64,
    /// Routing decisions of the MoE layers in depth order.
    pub decisions: Vec<RoutingDecision>,
}

enum FfnCache {
    Dense(SwigluCache),
    Moe(MoeCache),
}

struct LayerCache {
    x_in: Tensor,
    normed_attn: Tensor,
    attn: AttnCache,
    h_mid: Tensor,
    normed_ffn: Tensor,
    ffn: FfnCache,
}

struct ForwardPass {
    caches: Vec<LayerCache>,
    h_last: Tensor,
    hf_sel: Tensor,
    probs: Tensor,
    predict_rows: Vec<u32>,
    targets: Vec<u32>,
    breakdown: LossBreakdown,
}

fn forward(params: &ModelParams, cfg: &ModelConfig, tokens: &[u32]) -> Result<ForwardPass> {
    cfg.validate()?;
    let s = cfg.seq_len;
    let n = tokens.len();
    if n == 0 || n % s != 0 {
        return Err(Error::Data(format!(
            "{n} tokens do not form whole {s}-token sequences"
        )));
    }
    let v = cfg.vocab_size;
    for &t in tokens {
        if t as usize >= v {
            return Err(Error::Data(format!("token id {t} outside vocab {v}")));
        }
    }
    let d = cfg.d_model;
    let n_seqs = n / s;

    let mut x = Tensor::zeros(&[n, d]);
    for (i, &t) in tokens.iter().enumerate() {
        x.data_mut()[i * d..(i + 1) * d]
            .copy_from_slice(&params.token_embedding.data()[t as usize * d..(t as usize + 1) * d]);
    }

    let mut caches = Vec::with_capacity(params.layers.len());
    let mut decisions = Vec::new();
    let mut lb_sum = 0.0;
    for layer in &params.layers {
        let normed_attn = rms_norm(&x, &layer.attn_norm, RMS_EPS)?;
        let (attn_out, attn_cache) =
            attention_forward(&normed_attn, &layer.wq, &layer.wk, &layer.wv, &layer.wo, cfg)?;
        let mut h_mid = x.clone();
        add_into(&mut h_mid, &attn_out);

        let normed_ffn = rms_norm(&h_mid, &layer.ffn_norm, RMS_EPS)?;
        let (ffn_out, ffn_cache) = match &layer.ffn {
            FeedForward::Dense(e) => {
                let (y, c) = swiglu_batch(&normed_ffn, &e.w_gate, &e.w_up, &e.w_down)?;
                (y, FfnCache::Dense(c))
            }
            FeedForward::Moe(m) => {
                let (y, decision, c) = moe_forward_cached(&normed_ffn, m, cfg.top_k)?;
                lb_sum += load_balance_penalty(&decision, m.n_experts());
                decisions.push(decision);
                (y, FfnCache::Moe(c))
            }
        };
        let mut h_out = h_mid.clone();
        add_into(&mut h_out, &ffn_out);

        caches.push(LayerCache {
            x_in: x,
            normed_attn,
            attn: attn_cache,
            h_mid,
            normed_ffn,
            ffn: ffn_cache,
        });
        x = h_out;
    }
    let h_last = x;
    let hf = rms_norm(&h_last, &params.final_norm, RMS_EPS)?;

    let n_pred = n_seqs * (s - 1);
    let mut predict_rows = Vec::with_capacity(n_pred);
    let mut targets = Vec::with_capacity(n_pred);
    for seq in 0..n_seqs {
        for pos in 0..s - 1 {
            predict_rows.push((seq * s + pos) as u32);
            targets.push(tokens[seq * s + pos + 1]);
        }
    }
    let hf_sel = super::moe::gather_rows(&hf, &predict_rows);
    let logits = linear(&hf_sel, &params.output_head)?;
    let (ce, probs) = cross_entropy_probs(&logits, &targets)?;
    let total = ce + cfg.lb_coeff * lb_sum;
    if !total.is_finite() {
        return Err(Error::Train(format!(
            "non-finite loss: cross_entropy {ce}, load_balance {lb_sum}"
        )));
    }

    Ok(ForwardPass {
        caches,
        h_last,
        hf_sel,
        probs,
        predict_rows,
        targets,
        breakdown: LossBreakdown {
            cross_entropy: ce,
            load_balance: lb_sum,
            total,
            decisions,
        },
    })
}

/// Forward-only loss evaluation.
pub fn lm_forward_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &[u32],
) -> Result<LossBreakdown> {
    Ok(forward(params, cfg, tokens)?.breakdown)
}

/// Loss plus the gradient of `total` with respect to every parameter,
/// returned as a parameter record of matching structure.
pub fn lm_loss_and_grad(
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &[u32],
) -> Result<(LossBreakdown, ModelParams)> {
    let pass = forward(params, cfg, tokens)?;
    let mut grads = params.zeros_like();
    let d = cfg.d_model;
    let n = tokens.len();

    let grad_logits = cross_entropy_probs_vjp(pass.probs, &pass.targets, 1.0);
    let (grad_hf_sel, grad_head) = linear_vjp(&pass.hf_sel, &params.output_head, &grad_logits)?;
    add_into(&mut grads.output_head, &grad_head);

    let mut grad_hf = Tensor::zeros(&[n, d]);
    for (row, &r) in pass.predict_rows.iter().enumerate() {
        grad_hf.data_mut()[r as usize * d..(r as usize + 1) * d]
            .copy_from_slice(&grad_hf_sel.data()[row * d..(row + 1) * d]);
    }
    let (mut grad_h, grad_final_gain) =
        rms_norm_vjp(&pass.h_last, &params.final_norm, RMS_EPS, &grad_hf);
    add_into(&mut grads.final_norm, &grad_final_gain);

    let mut decision_idx = pass.breakdown.decisions.len();
    for (li, cache) in pass.caches.iter().enumerate().rev() {
        let layer = &params.layers[li];
        let glayer = &mut grads.layers[li];

        // FFN block: h_out = h_mid + ffn(norm(h_mid)).
        let grad_ffn_out = grad_h.clone();
        let grad_normed_ffn = match (&layer.ffn, &cache.ffn) {
            (FeedForward::Dense(e), FfnCache::Dense(c)) => {
                let (gx, gg, gu, gd) = swiglu_batch_vjp(
                    &cache.normed_ffn,
                    &e.w_gate,
                    &e.w_up,
                    &e.w_down,
                    c,
                    &grad_ffn_out,
                )?;
                let ge = match &mut glayer.ffn {
                    FeedForward::Dense(g) => g,
                    _ => unreachable!("gradient record mirrors parameter structure"),
                };
                add_into(&mut ge.w_gate, &gg);
                add_into(&mut ge.w_up, &gu);
                add_into(&mut ge.w_down, &gd);
                gx
            }
            (FeedForward::Moe(m), FfnCache::Moe(c)) => {
                decision_idx -= 1;
                let decision = &pass.breakdown.decisions[decision_idx];
                let gm = match &mut glayer.ffn {
                    FeedForward::Moe(g) => g,
                    _ => unreachable!("gradient record mirrors parameter structure"),
                };
                moe_backward(&cache.normed_ffn, m, decision, c, &grad_ffn_out, cfg.lb_coeff, gm)?
            }
            _ => unreachable!("cache kind follows layer kind"),
        };
        let (grad_h_mid_norm, grad_ffn_gain) =
            rms_norm_vjp(&cache.h_mid, &layer.ffn_norm, RMS_EPS, &grad_normed_ffn);
        add_into(&mut glayer.ffn_norm, &grad_ffn_gain);
        let mut grad_h_mid = grad_h;
        add_into(&mut grad_h_mid, &grad_h_mid_norm);

        // Attention block: h_mid = x_in + attn(norm(x_in)).
        let (grad_normed_attn, attn_grads) = attention_backward(
            &cache.normed_attn,
            &layer.wq,
            &layer.wk,
            &layer.wv,
            &layer.wo,
            cfg,
            &cache.attn,
            &grad_h_mid,
        )?;
        add_into(&mut glayer.wq, &attn_grads.wq);
        add_into(&mut glayer.wk, &attn_grads.wk);
        add_into(&mut glayer.wv, &attn_grads.wv);
        add_into(&mut glayer.wo, &attn_grads.wo);
        let (grad_x_norm, grad_attn_gain) =
            rms_norm_vjp(&cache.x_in, &layer.attn_norm, RMS_EPS, &grad_normed_attn);
        add_into(&mut glayer.attn_norm, &grad_attn_gain);
        let mut grad_x = grad_h_mid;
        add_into(&mut grad_x, &grad_x_norm);
        grad_h = grad_x;
    }

    // Embedding lookup adjoint: scatter-add rows by token id, in position
    // order so the reduction is deterministic.
    for (i, &t) in tokens.iter().enumerate() {
        let src = &grad_h.data()[i * d..(i + 1) * d];
        let dst =
            &mut grads.token_embedding.data_mut()[t as usize * d..(t as usize + 1) * d];
        for (a, b) in dst.iter_mut().zip(src) {
            *a += b;
        }
    }

    Ok((pass.breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check_coords;
    use crate::rng::substream;

    fn micro_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_q_heads: 2,
            n_kv_heads: 1,
            d_head: 4,
            vocab_size: 11,
            seq_len: 4,
            rope_base: 1e4,
            dense_prefix_layers: 1,
            n_experts: 3,
            top_k: 2,
            d_expert_hidden: 5,
            n_shared_experts: 1,
            lb_coeff: 0.05,
            router_bias_enabled: true,
        }
    }

    fn micro_tokens() -> Vec<u32> {
        vec![1, 4, 9, 2, 7, 0, 3, 10]
    }

    #[test]
    fn untrained_model_sits_at_the_uniform_baseline() {
        let mut cfg = micro_cfg();
        cfg.vocab_size = 64;
        cfg.seq_len = 8;
        let params = ModelParams::init(&cfg, &mut substream(1, "model")).unwrap();
        let mut rng = substream(2, "tokens");
        let tokens: Vec<u32> = (0..64)
            .map(|_| crate::rng::next_index(&mut rng, 64) as u32)
            .collect();
        let out = lm_forward_loss(&params, &cfg, &tokens).unwrap();
        let baseline = 64f64.ln();
        assert!(
            (out.cross_entropy - baseline).abs() < 0.05 * baseline,
            "cross-entropy {} vs uniform baseline {baseline}",
            out.cross_entropy
        );
        assert!(out.load_balance >= 0.0);
        assert!((out.total - out.cross_entropy - cfg.lb_coeff * out.load_balance).abs() < 1e-15);
        assert_eq!(out.decisions.len(), 1);
    }

    #[test]
    fn rejects_out_of_range_tokens_and_ragged_batches() {
        let cfg = micro_cfg();
        let params = ModelParams::init(&cfg, &mut substream(3, "model")).unwrap();
        assert!(lm_forward_loss(&params, &cfg, &[0, 1, 2, 11, 0, 0, 0, 0]).is_err());
        assert!(lm_forward_loss(&params, &cfg, &[0, 1, 2]).is_err());
        assert!(lm_forward_loss(&params, &cfg, &[]).is_err());
    }

    #[test]
    fn forward_only_matches_grad_path_loss() {
        let cfg = micro_cfg();
        let params = ModelParams::init(&cfg, &mut substream(4, "model")).unwrap();
        let tokens = micro_tokens();
        let a = lm_forward_loss(&params, &cfg, &tokens).unwrap();
        let (b, _) = lm_loss_and_grad(&params, &cfg, &tokens).unwrap();
        assert_eq!(a.total, b.total);
        assert_eq!(a.cross_entropy, b.cross_entropy);
        assert_eq!(a.load_balance, b.load_balance);
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let cfg = micro_cfg();
        let params = ModelParams::init(&cfg, &mut substream(5, "model")).unwrap();
        let tokens = micro_tokens();
        let (_, grads) = lm_loss_and_grad(&params, &cfg, &tokens).unwrap();

        let point = params.flatten();
        let analytic = grads.flatten();
        let n = point.len();
        // Spread sampled coordinates across every tensor in the record.
        let stride = (n / 97).max(1);
        let coords: Vec<usize> = (0..n).step_by(stride).collect();
        let template = params.clone();
        let report = grad_check_coords(
            "lm_loss/params",
            &point,
            1e-4,
            &coords,
            |p| {
                let mut m = template.clone();
                m.unflatten_into(p);
                lm_forward_loss(&m, &cfg, &tokens).unwrap().total
            },
            |_| analytic.clone(),
        );
        assert!(report.passed, "{}", report.summary());
    }

    #[test]
    fn router_bias_receives_no_gradient() {
        let mut cfg = micro_cfg();
        cfg.lb_coeff = 0.2;
        let mut params = ModelParams::init(&cfg, &mut substream(6, "model")).unwrap();
        // Give the bias distinct values so selection actually uses it.
        for layer in params.layers.iter_mut() {
            if let FeedForward::Moe(m) = &mut layer.ffn {
                for (i, b) in m.router.bias.data_mut().iter_mut().enumerate() {
                    *b = 0.01 * i as f64;
                }
            }
        }
        let (_, grads) = lm_loss_and_grad(&params, &cfg, &micro_tokens()).unwrap();
        for layer in &grads.layers {
            if let FeedForward::Moe(m) = &layer.ffn {
                assert!(m.router.bias.data().iter().all(|&v| v == 0.0));
                assert!(m.router.weight.data().iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn a_single_repeated_sequence_is_memorized() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_q_heads: 2,
            n_kv_heads: 1,
            d_head: 8,
            vocab_size: 8,
            seq_len: 8,
            rope_base: 1e4,
            dense_prefix_layers: 1,
            n_experts: 2,
            top_k: 1,
            d_expert_hidden: 16,
            n_shared_experts: 0,
            lb_coeff: 0.0,
            router_bias_enabled: false,
        };
        let mut params = ModelParams::init(&cfg, &mut substream(7, "model")).unwrap();
        let tokens: Vec<u32> = vec![1, 5, 2, 7, 3, 6, 4, 0];
        let mut last = f64::INFINITY;
        for _ in 0..400 {
            let (out, grads) = lm_loss_and_grad(&params, &cfg, &tokens).unwrap();
            last = out.total;
            // Plain gradient descent with a norm cap keeps this test
            // self-contained; the optimizer proper lives elsewhere.
            let mut sq = 0.0;
            grads.for_each_tensor(&mut |_, t| {
                sq += t.data().iter().map(|v| v * v).sum::<f64>()
            });
            let scale = if sq.sqrt() > 1.0 { 1.0 / sq.sqrt() } else { 1.0 };
            let lr = 0.5;
            let gflat = grads.flatten();
            let mut pflat = params.flatten();
            for (p, g) in pflat.iter_mut().zip(&gflat) {
                *p -= lr * scale * g;
            }
            params.unflatten_into(&pflat);
        }
        assert!(last < 0.1, "memorization stalled at loss {last}");
    }

    #[test]
    fn loss_gradient_reaches_unselected_experts_through_balance_term() {
        let mut cfg = micro_cfg();
        cfg.n_experts = 4;
        cfg.top_k = 1;
        cfg.lb_coeff = 0.1;
        let params = ModelParams::init(&cfg, &mut substream(8, "model")).unwrap();
        let (out, grads) = lm_loss_and_grad(&params, &cfg, &micro_tokens()).unwrap();
        // With top_k = 1 some experts never fire, yet every router row must
        // still feel the balance penalty.
        let _ = out;
        for layer in &grads.layers {
            if let FeedForward::Moe(m) = &layer.ffn {
                let d = cfg.d_model;
                for e in 0..cfg.n_experts {
                    let row = &m.router.weight.data()[e * d..(e + 1) * d];
                    assert!(
                        row.iter().any(|&v| v != 0.0),
                        "router row {e} saw no gradient"
                    );
                }
            }
        }
    }

    #[test]
    fn dense_prefix_uses_no_routing() {
        let mut cfg = micro_cfg();
        cfg.dense_prefix_layers = 2;
        let params = ModelParams::init(&cfg, &mut substream(9, "model")).unwrap();
        let out = lm_forward_loss(&params, &cfg, &micro_tokens()).unwrap();
        assert!(out.decisions.is_empty());
        assert_eq!(out.load_balance, 0.0);
    }
}
