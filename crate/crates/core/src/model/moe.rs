//! Sigmoid top-k routing, the mixture layer, and the entropy-gap load
//! balance penalty.
//!
//! Selection and gating are deliberately decoupled: the router bias is added
//! to the sigmoid scores only to pick which experts fire, while the gate
//! weights renormalize the bias-free sigmoid scores of the selected set.
//! Zeroing the bias therefore resets routing preference without touching any
//! gate value, and the bias itself receives no gradient from the loss.

use crate::error::{Error, Result};
use crate::numerics::ops::{
    linear, linear_vjp, sigmoid_scalar, swiglu_batch, swiglu_batch_vjp, SwigluCache,
};
use crate::numerics::Tensor;

use super::{MoELayerParams, RouterParams};

/// Routing outcome for a batch of tokens.
#[derive(Debug, Clone)]
pub struct RoutingDecision {
    pub n_tokens: usize,
    pub n_experts: usize,
    pub top_k: usize,
    /// `[n_tokens * top_k]`, ordered by descending selection score per token.
    pub selected_indices: Vec<u32>,
    /// `[n_tokens * top_k]`, aligned with `selected_indices`; sums to 1 per
    /// token.
    pub gates: Vec<f64>,
    /// `[n_tokens * n_experts]` bias-free sigmoid scores.
    pub raw_scores: Vec<f64>,
}

impl RoutingDecision {
    /// Selected expert indices for one token.
    pub fn token_experts(&self, t: usize) -> &[u32] {
        &self.selected_indices[t * self.top_k..(t + 1) * self.top_k]
    }

    pub fn token_gates(&self, t: usize) -> &[f64] {
        &self.gates[t * self.top_k..(t + 1) * self.top_k]
    }
}

/// Scores every token against the router and picks `top_k` experts.
///
/// Selection score: `sigmoid(W x) + bias` (bias optional); score ties break
/// toward the lower expert index. Gates renormalize the bias-free sigmoid
/// scores of the selected set.
pub fn route(x: &Tensor, router: &RouterParams, top_k: usize) -> Result<RoutingDecision> {
    route_inner(x, router, top_k, true)
}

/// `route` with the bias term disabled regardless of its contents.
pub fn route_without_bias(x: &Tensor, router: &RouterParams, top_k: usize) -> Result<RoutingDecision> {
    route_inner(x, router, top_k, false)
}

fn route_inner(
    x: &Tensor,
    router: &RouterParams,
    top_k: usize,
    use_bias: bool,
) -> Result<RoutingDecision> {
    let e = router.n_experts();
    if top_k == 0 || top_k > e {
        return Err(Error::Config(format!("top_k {top_k} outside 1..={e}")));
    }
    let n = x.shape()[0];
    let logits = linear(x, &router.weight)?;
    let mut raw = logits.into_data();
    for v in raw.iter_mut() {
        *v = sigmoid_scalar(*v);
    }
    let bias = router.bias.data();
    let mut selected = Vec::with_capacity(n * top_k);
    let mut gates = Vec::with_capacity(n * top_k);
    let mut order: Vec<u32> = Vec::with_capacity(e);
    for t in 0..n {
        let sig = &raw[t * e..(t + 1) * e];
        order.clear();
        order.extend(0..e as u32);
        order.sort_by(|&a, &b| {
            let sa = sig[a as usize] + if use_bias { bias[a as usize] } else { 0.0 };
            let sb = sig[b as usize] + if use_bias { bias[b as usize] } else { 0.0 };
            sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
        });
        let chosen = &order[..top_k];
        let denom: f64 = chosen.iter().map(|&i| sig[i as usize]).sum();
        selected.extend_from_slice(chosen);
        for &i in chosen {
            gates.push(sig[i as usize] / denom);
        }
    }
    Ok(RoutingDecision {
        n_tokens: n,
        n_experts: e,
        top_k,
        selected_indices: selected,
        gates,
        raw_scores: raw,
    })
}

/// Forward cache for one MoE layer application.
pub struct MoeCache {
    /// Token row indices dispatched to each expert, ascending.
    pub expert_tokens: Vec<Vec<u32>>,
    /// Gate applied per dispatched row, aligned with `expert_tokens`.
    pub expert_gates: Vec<Vec<f64>>,
    pub expert_caches: Vec<Option<SwigluCache>>,
    /// Raw expert outputs before gating, `[rows, d_model]` per expert.
    pub expert_outputs: Vec<Option<Tensor>>,
    pub shared_cache: Option<SwigluCache>,
}

/// Mixture layer: `shared(x) + sum over selected experts of gate * expert(x)`.
pub fn moe_forward(
    x: &Tensor,
    layer: &MoELayerParams,
    top_k: usize,
) -> Result<(Tensor, RoutingDecision)> {
    let (y, decision, _) = moe_forward_cached(x, layer, top_k)?;
    Ok((y, decision))
}

/// `moe_forward` that also returns the caches the backward pass needs.
pub fn moe_forward_cached(
    x: &Tensor,
    layer: &MoELayerParams,
    top_k: usize,
) -> Result<(Tensor, RoutingDecision, MoeCache)> {
    layer.validate()?;
    let decision = route(x, &layer.router, top_k)?;
    let n = decision.n_tokens;
    let e = decision.n_experts;
    let d = x.shape()[1];

    // Group dispatched rows by expert in token order.
    let mut expert_tokens: Vec<Vec<u32>> = vec![Vec::new(); e];
    let mut expert_gates: Vec<Vec<f64>> = vec![Vec::new(); e];
    for t in 0..n {
        for (slot, &ei) in decision.token_experts(t).iter().enumerate() {
            expert_tokens[ei as usize].push(t as u32);
            expert_gates[ei as usize].push(decision.gates[t * top_k + slot]);
        }
    }

    let mut out = if let Some(shared) = &layer.shared_expert {
        let (y, cache) = swiglu_batch(x, &shared.w_gate, &shared.w_up, &shared.w_down)?;
        (y, Some(cache))
    } else {
        (Tensor::zeros(&[n, d]), None)
    };

    let mut expert_caches = Vec::with_capacity(e);
    let mut expert_outputs = Vec::with_capacity(e);
    for ei in 0..e {
        if expert_tokens[ei].is_empty() {
            expert_caches.push(None);
            expert_outputs.push(None);
            continue;
        }
        let xe = gather_rows(x, &expert_tokens[ei]);
        let p = &layer.routed_experts[ei];
        let (ye, cache) = swiglu_batch(&xe, &p.w_gate, &p.w_up, &p.w_down)?;
        let out_data = out.0.data_mut();
        for (row, (&t, &g)) in expert_tokens[ei].iter().zip(&expert_gates[ei]).enumerate() {
            let src = &ye.data()[row * d..(row + 1) * d];
            let dst = &mut out_data[t as usize * d..(t as usize + 1) * d];
            for (o, s) in dst.iter_mut().zip(src) {
                *o += g * s;
            }
        }
        expert_caches.push(Some(cache));
        expert_outputs.push(Some(ye));
    }

    Ok((
        out.0,
        decision,
        MoeCache {
            expert_tokens,
            expert_gates,
            expert_caches,
            expert_outputs,
            shared_cache: out.1,
        },
    ))
}

/// Backward pass of one MoE layer.
///
/// `lb_scale` is the upstream gradient of the layer's load-balance penalty
/// (the training loss adds `lb_coeff * penalty`, so it is `lb_coeff` there).
/// Accumulates parameter gradients into `grads` and returns the input
/// gradient. The router bias steers selection only, so it gets none.
pub fn moe_backward(
    x: &Tensor,
    layer: &MoELayerParams,
    decision: &RoutingDecision,
    cache: &MoeCache,
    grad_out: &Tensor,
    lb_scale: f64,
    grads: &mut MoELayerParams,
) -> Result<Tensor> {
    let n = decision.n_tokens;
    let e = decision.n_experts;
    let d = x.shape()[1];
    let k = decision.top_k;
    let mut grad_x = Tensor::zeros(&[n, d]);

    if let (Some(shared), Some(sc)) = (&layer.shared_expert, &cache.shared_cache) {
        let gs = grads
            .shared_expert
            .as_mut()
            .expect("gradient record must mirror parameter structure");
        let (gx, gg, gu, gd) =
            swiglu_batch_vjp(x, &shared.w_gate, &shared.w_up, &shared.w_down, sc, grad_out)?;
        add_into(&mut grad_x, &gx);
        add_into(&mut gs.w_gate, &gg);
        add_into(&mut gs.w_up, &gu);
        add_into(&mut gs.w_down, &gd);
    }

    // Gradient w.r.t. each selected gate value: dot(grad_out_t, expert_out_t).
    let mut grad_gate = vec![0.0; n * k];
    for ei in 0..e {
        let tokens = &cache.expert_tokens[ei];
        if tokens.is_empty() {
            continue;
        }
        let ye = cache.expert_outputs[ei].as_ref().unwrap();
        let sw = cache.expert_caches[ei].as_ref().unwrap();
        // Upstream gradient for this expert's rows: gate * grad_out.
        let mut dye = Tensor::zeros(&[tokens.len(), d]);
        for (row, (&t, &g)) in tokens.iter().zip(&cache.expert_gates[ei]).enumerate() {
            let t = t as usize;
            let go = &grad_out.data()[t * d..(t + 1) * d];
            let yrow = &ye.data()[row * d..(row + 1) * d];
            let dst = &mut dye.data_mut()[row * d..(row + 1) * d];
            let mut dot = 0.0;
            for j in 0..d {
                dst[j] = g * go[j];
                dot += go[j] * yrow[j];
            }
            // Locate this (token, expert) slot to record the gate gradient.
            let slot = decision
                .token_experts(t)
                .iter()
                .position(|&s| s as usize == ei)
                .expect("dispatched expert must appear in the token's selection");
            grad_gate[t * k + slot] = dot;
        }
        let xe = gather_rows(x, tokens);
        let p = &layer.routed_experts[ei];
        let (gxe, gg, gu, gd) = swiglu_batch_vjp(&xe, &p.w_gate, &p.w_up, &p.w_down, sw, &dye)?;
        let ge = &mut grads.routed_experts[ei];
        add_into(&mut ge.w_gate, &gg);
        add_into(&mut ge.w_up, &gu);
        add_into(&mut ge.w_down, &gd);
        for (row, &t) in tokens.iter().enumerate() {
            let src = &gxe.data()[row * d..(row + 1) * d];
            let dst = &mut grad_x.data_mut()[t as usize * d..(t as usize + 1) * d];
            for (o, s) in dst.iter_mut().zip(src) {
                *o += s;
            }
        }
    }

    // Gate normalization: g_i = sig_i / sum_K sig, so
    // d/dsig_j = (dgate_j - sum_i dgate_i * g_i) / sum_K sig for j in K.
    let mut grad_sig = vec![0.0; n * e];
    for t in 0..n {
        let experts = decision.token_experts(t);
        let gates = decision.token_gates(t);
        let sig_sum: f64 = experts
            .iter()
            .map(|&i| decision.raw_scores[t * e + i as usize])
            .sum();
        let mut dot = 0.0;
        for s in 0..k {
            dot += grad_gate[t * k + s] * gates[s];
        }
        for s in 0..k {
            let j = experts[s] as usize;
            grad_sig[t * e + j] += (grad_gate[t * k + s] - dot) / sig_sum;
        }
    }

    // Load-balance penalty path touches every expert's score of every token.
    if lb_scale != 0.0 {
        let pbar = mean_normalized_scores(decision);
        let logp: Vec<f64> = pbar.iter().map(|&p| if p > 0.0 { p.ln() + 1.0 } else { 0.0 }).collect();
        let inv_t = 1.0 / n as f64;
        for t in 0..n {
            let sig = &decision.raw_scores[t * e..(t + 1) * e];
            let s_full: f64 = sig.iter().sum();
            let mut avg = 0.0;
            for i in 0..e {
                avg += logp[i] * sig[i] / s_full;
            }
            for j in 0..e {
                grad_sig[t * e + j] += lb_scale * inv_t * (logp[j] - avg) / s_full;
            }
        }
    }

    // Through the sigmoid into the router weight; bias gets no gradient.
    let mut dz = Tensor::zeros(&[n, e]);
    {
        let dzd = dz.data_mut();
        for i in 0..n * e {
            let s = decision.raw_scores[i];
            dzd[i] = grad_sig[i] * s * (1.0 - s);
        }
    }
    let (gx_router, gw_router) = linear_vjp(x, &layer.router.weight, &dz)?;
    add_into(&mut grad_x, &gx_router);
    add_into(&mut grads.router.weight, &gw_router);

    Ok(grad_x)
}

/// Mean over tokens of the normalized full-score distribution.
fn mean_normalized_scores(decision: &RoutingDecision) -> Vec<f64> {
    let (n, e) = (decision.n_tokens, decision.n_experts);
    let mut pbar = vec![0.0; e];
    for t in 0..n {
        let sig = &decision.raw_scores[t * e..(t + 1) * e];
        let s: f64 = sig.iter().sum();
        for i in 0..e {
            pbar[i] += sig[i] / s;
        }
    }
    for v in pbar.iter_mut() {
        *v /= n as f64;
    }
    pbar
}

/// Entropy gap of the mean normalized score distribution: `ln E - H(pbar)`.
/// Zero iff scores are perfectly balanced across the pool.
pub fn load_balance_penalty(decision: &RoutingDecision, e: usize) -> f64 {
    assert!(decision.n_tokens > 0, "penalty needs at least one token");
    assert_eq!(decision.n_experts, e, "decision was made over a different pool");
    let pbar = mean_normalized_scores(decision);
    let mut h = 0.0;
    for &p in &pbar {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    ((e as f64).ln() - h).max(0.0)
}

pub(crate) fn gather_rows(x: &Tensor, rows: &[u32]) -> Tensor {
    let d = x.shape()[1];
    let mut out = Tensor::zeros(&[rows.len(), d]);
    for (i, &r) in rows.iter().enumerate() {
        out.data_mut()[i * d..(i + 1) * d]
            .copy_from_slice(&x.data()[r as usize * d..(r as usize + 1) * d]);
    }
    out
}

pub(crate) fn add_into(acc: &mut Tensor, delta: &Tensor) {
    debug_assert_eq!(acc.shape(), delta.shape());
    for (a, b) in acc.data_mut().iter_mut().zip(delta.data()) {
        *a += b;
    }
}
