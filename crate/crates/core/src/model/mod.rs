//! Decoder-only transformer with mixture-of-experts feed-forward layers.
//!
//! Layers below `dense_prefix_layers` use a single dense FFN; all later
//! layers route each token to `top_k` of `n_experts` gated FFN experts via a
//! sigmoid-scored router with a selection-only bias, plus an always-on shared
//! expert. Parameter accounting distinguishes total from activated-per-token
//! counts, which is what makes the expert pool free at fixed `top_k` in
//! step-FLOPs terms.

pub mod attention;
pub mod loss;
pub mod moe;

pub use loss::{lm_forward_loss, lm_loss_and_grad, LossBreakdown};
pub use moe::{load_balance_penalty, moe_forward, route, RoutingDecision};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;
use rand_chacha::ChaCha8Rng;

pub const RMS_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub rope_base: f64,
    /// Layers before the first MoE layer; these carry a dense FFN.
    pub dense_prefix_layers: usize,
    /// Routed experts per MoE layer at construction time. After an expansion
    /// the live count is `ModelParams::n_experts`.
    pub n_experts: usize,
    pub top_k: usize,
    pub d_expert_hidden: usize,
    pub n_shared_experts: usize,
    pub lb_coeff: f64,
    pub router_bias_enabled: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: a model small enough to train in minutes while
    /// keeping every architectural element of the full-size recipe.
    pub fn desk_default() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_q_heads: 4,
            n_kv_heads: 2,
            d_head: 32,
            vocab_size: 512,
            seq_len: 256,
            rope_base: 100_000.0,
            dense_prefix_layers: 1,
            n_experts: 2,
            top_k: 2,
            d_expert_hidden: 64,
            n_shared_experts: 1,
            lb_coeff: 1e-4,
            router_bias_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k < 1 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top_k {} outside 1..={}",
                self.top_k, self.n_experts
            )));
        }
        if self.n_q_heads == 0 || self.n_kv_heads == 0 || self.n_q_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_q_heads {} must be a positive multiple of n_kv_heads {}",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if self.dense_prefix_layers > self.n_layers {
            return Err(Error::Config(format!(
                "dense_prefix_layers {} exceeds n_layers {}",
                self.dense_prefix_layers, self.n_layers
            )));
        }
        if self.lb_coeff < 0.0 {
            return Err(Error::Config("lb_coeff must be >= 0".into()));
        }
        if self.d_head % 2 != 0 {
            return Err(Error::Config("d_head must be even for rotary pairs".into()));
        }
        if self.n_shared_experts > 1 {
            return Err(Error::Config(
                "at most one shared expert per layer is supported".into(),
            ));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("seq_len must be at least 2".into()));
        }
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    /// `[n_experts, d_model]`.
    pub weight: Tensor,
    /// Selection-only bias, length `n_experts`.
    pub bias: Tensor,
}

impl RouterParams {
    pub fn n_experts(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    /// `[d_expert_hidden, d_model]`.
    pub w_gate: Tensor,
    /// `[d_expert_hidden, d_model]`.
    pub w_up: Tensor,
    /// `[d_model, d_expert_hidden]`.
    pub w_down: Tensor,
}

impl ExpertParams {
    pub fn zeros(d_model: usize, d_hidden: usize) -> Self {
        Self {
            w_gate: Tensor::zeros(&[d_hidden, d_model]),
            w_up: Tensor::zeros(&[d_hidden, d_model]),
            w_down: Tensor::zeros(&[d_model, d_hidden]),
        }
    }

    pub fn n_params(&self) -> usize {
        self.w_gate.numel() + self.w_up.numel() + self.w_down.numel()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoELayerParams {
    pub router: RouterParams,
    pub routed_experts: Vec<ExpertParams>,
    pub shared_expert: Option<ExpertParams>,
}

impl MoELayerParams {
    pub fn n_experts(&self) -> usize {
        self.routed_experts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.router.n_experts() != self.routed_experts.len() {
            return Err(Error::Shape(format!(
                "router has {} rows for {} experts",
                self.router.n_experts(),
                self.routed_experts.len()
            )));
        }
        if self.router.bias.numel() != self.routed_experts.len() {
            return Err(Error::Shape("router bias length != expert count".into()));
        }
        Ok(())
    }
}

/// Feed-forward block of one layer: dense in prefix layers, MoE above.
#[derive(Debug, Clone, PartialEq)]
pub enum FeedForward {
    Dense(ExpertParams),
    Moe(MoELayerParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    /// `[n_q_heads * d_head, d_model]`.
    pub wq: Tensor,
    /// `[n_kv_heads * d_head, d_model]`.
    pub wk: Tensor,
    /// `[n_kv_heads * d_head, d_model]`.
    pub wv: Tensor,
    /// `[d_model, n_q_heads * d_head]`.
    pub wo: Tensor,
    pub ffn_norm: Tensor,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `[vocab_size, d_model]`.
    pub token_embedding: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    /// Untied `[vocab_size, d_model]` output projection.
    pub output_head: Tensor,
}

impl ModelParams {
    /// Fresh random initialization; every tensor is drawn in the fixed
    /// traversal order from the provided stream, so equal seeds give equal
    /// models.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let h = cfg.d_expert_hidden;
        let expert = |rng: &mut ChaCha8Rng| ExpertParams {
            w_gate: gaussian(&[h, d], INIT_STD, rng),
            w_up: gaussian(&[h, d], INIT_STD, rng),
            w_down: gaussian(&[d, h], INIT_STD, rng),
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for li in 0..cfg.n_layers {
            let ffn = if li < cfg.dense_prefix_layers {
                FeedForward::Dense(expert(rng))
            } else {
                let router = RouterParams {
                    weight: gaussian(&[cfg.n_experts, d], INIT_STD, rng),
                    bias: Tensor::zeros(&[cfg.n_experts]),
                };
                let routed = (0..cfg.n_experts).map(|_| expert(rng)).collect();
                let shared = (cfg.n_shared_experts == 1).then(|| expert(rng));
                FeedForward::Moe(MoELayerParams {
                    router,
                    routed_experts: routed,
                    shared_expert: shared,
                })
            };
            layers.push(LayerParams {
                attn_norm: Tensor::new(vec![d], vec![1.0; d])?,
                wq: gaussian(&[cfg.n_q_heads * cfg.d_head, d], INIT_STD, rng),
                wk: gaussian(&[cfg.n_kv_heads * cfg.d_head, d], INIT_STD, rng),
                wv: gaussian(&[cfg.n_kv_heads * cfg.d_head, d], INIT_STD, rng),
                wo: gaussian(&[d, cfg.n_q_heads * cfg.d_head], INIT_STD, rng),
                ffn_norm: Tensor::new(vec![d], vec![1.0; d])?,
                ffn,
            });
        }
        Ok(Self {
            token_embedding: gaussian(&[cfg.vocab_size, d], INIT_STD, rng),
            layers,
            final_norm: Tensor::new(vec![d], vec![1.0; d])?,
            output_head: gaussian(&[cfg.vocab_size, d], INIT_STD, rng),
        })
    }

    /// Zero-filled parameter record with identical structure, used as the
    /// gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_tensor_mut(&mut |_, t| t.data_mut().fill(0.0));
        out
    }

    /// Live routed-expert count (uniform across MoE layers by construction).
    pub fn n_experts(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match &l.ffn {
            FeedForward::Moe(m) => Some(m.n_experts()),
            FeedForward::Dense(_) => None,
        })
    }

    /// Visits `(name, tensor)` pairs in a fixed, documented order. This order
    /// defines optimizer-state alignment and the checkpoint layout.
    pub fn for_each_tensor<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("token_embedding".into(), &self.token_embedding);
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            f(format!("{p}.attn_norm"), &layer.attn_norm);
            f(format!("{p}.wq"), &layer.wq);
            f(format!("{p}.wk"), &layer.wk);
            f(format!("{p}.wv"), &layer.wv);
            f(format!("{p}.wo"), &layer.wo);
            f(format!("{p}.ffn_norm"), &layer.ffn_norm);
            match &layer.ffn {
                FeedForward::Dense(e) => {
                    f(format!("{p}.dense.w_gate"), &e.w_gate);
                    f(format!("{p}.dense.w_up"), &e.w_up);
                    f(format!("{p}.dense.w_down"), &e.w_down);
                }
                FeedForward::Moe(m) => {
                    f(format!("{p}.moe.router.weight"), &m.router.weight);
                    f(format!("{p}.moe.router.bias"), &m.router.bias);
                    if let Some(s) = &m.shared_expert {
                        f(format!("{p}.moe.shared.w_gate"), &s.w_gate);
                        f(format!("{p}.moe.shared.w_up"), &s.w_up);
                        f(format!("{p}.moe.shared.w_down"), &s.w_down);
                    }
                    for (j, e) in m.routed_experts.iter().enumerate() {
                        f(format!("{p}.moe.expert.{j}.w_gate"), &e.w_gate);
                        f(format!("{p}.moe.expert.{j}.w_up"), &e.w_up);
                        f(format!("{p}.moe.expert.{j}.w_down"), &e.w_down);
                    }
                }
            }
        }
        f("final_norm".into(), &self.final_norm);
        f("output_head".into(), &self.output_head);
    }

    /// Mutable traversal in the same order as [`Self::for_each_tensor`].
    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("token_embedding".into(), &mut self.token_embedding);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{i}");
            f(format!("{p}.attn_norm"), &mut layer.attn_norm);
            f(format!("{p}.wq"), &mut layer.wq);
            f(format!("{p}.wk"), &mut layer.wk);
            f(format!("{p}.wv"), &mut layer.wv);
            f(format!("{p}.wo"), &mut layer.wo);
            f(format!("{p}.ffn_norm"), &mut layer.ffn_norm);
            match &mut layer.ffn {
                FeedForward::Dense(e) => {
                    f(format!("{p}.dense.w_gate"), &mut e.w_gate);
                    f(format!("{p}.dense.w_up"), &mut e.w_up);
                    f(format!("{p}.dense.w_down"), &mut e.w_down);
                }
                FeedForward::Moe(m) => {
                    f(format!("{p}.moe.router.weight"), &mut m.router.weight);
                    f(format!("{p}.moe.router.bias"), &mut m.router.bias);
                    if let Some(s) = &mut m.shared_expert {
                        f(format!("{p}.moe.shared.w_gate"), &mut s.w_gate);
                        f(format!("{p}.moe.shared.w_up"), &mut s.w_up);
                        f(format!("{p}.moe.shared.w_down"), &mut s.w_down);
                    }
                    for (j, e) in m.routed_experts.iter_mut().enumerate() {
                        f(format!("{p}.moe.expert.{j}.w_gate"), &mut e.w_gate);
                        f(format!("{p}.moe.expert.{j}.w_up"), &mut e.w_up);
                        f(format!("{p}.moe.expert.{j}.w_down"), &mut e.w_down);
                    }
                }
            }
        }
        f("final_norm".into(), &mut self.final_norm);
        f("output_head".into(), &mut self.output_head);
    }

    /// Named tensor list in traversal order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.for_each_tensor(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn n_params(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |_, t| n += t.numel());
        n
    }

    /// Flattens every parameter into one vector in traversal order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.for_each_tensor(&mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Writes a flat vector produced by [`Self::flatten`] back into place.
    pub fn unflatten_into(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.for_each_tensor_mut(&mut |_, t| {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len(), "flat parameter vector length mismatch");
    }
}

pub(crate) fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng::next_normal(rng) * std;
    }
    t
}

/// Total and per-token-activated parameter counts for a config at routed
/// pool size `e`. Activated parameters cover embeddings, the output head,
/// attention, norms, routers, shared experts, and `top_k` routed experts per
/// MoE layer; the routed pool beyond `top_k` contributes to the total only.
pub fn count_params(cfg: &ModelConfig, e: usize) -> (usize, usize) {
    let d = cfg.d_model;
    let expert = 2 * cfg.d_expert_hidden * d + d * cfg.d_expert_hidden;
    let attn = (cfg.n_q_heads * cfg.d_head * d) * 2 + (cfg.n_kv_heads * cfg.d_head * d) * 2;
    let mut total = 0;
    let mut act = 0;

    let emb = cfg.vocab_size * d;
    total += emb * 2; // embedding + untied head
    act += emb * 2;
    total += d; // final norm
    act += d;

    for li in 0..cfg.n_layers {
        total += attn + 2 * d;
        act += attn + 2 * d;
        if li < cfg.dense_prefix_layers {
            total += expert;
            act += expert;
        } else {
            let router = e * d + if cfg.router_bias_enabled { e } else { 0 };
            let shared = cfg.n_shared_experts * expert;
            total += router + shared + e * expert;
            act += router + shared + cfg.top_k * expert;
        }
    }
    (total, act)
}

/// Forward-plus-backward training FLOPs for one optimizer step, counted by
/// the standard six-FLOPs-per-token-per-active-parameter rule. Independent
/// of the routed pool size at fixed `top_k`, which is exactly why growing
/// the pool mid-run is free in step terms.
pub fn flops_per_step(batch_tokens: usize, n_act: usize) -> f64 {
    6.0 * batch_tokens as f64 * n_act as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_q_heads: 2,
            n_kv_heads: 1,
            d_head: 4,
            vocab_size: 11,
            seq_len: 6,
            rope_base: 1e4,
            dense_prefix_layers: 1,
            n_experts: 3,
            top_k: 2,
            d_expert_hidden: 5,
            n_shared_experts: 1,
            lb_coeff: 0.01,
            router_bias_enabled: true,
        }
    }

    #[test]
    fn validate_catches_bad_configs() {
        let mut cfg = tiny_cfg();
        cfg.top_k = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.n_q_heads = 3;
        cfg.n_kv_heads = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.dense_prefix_layers = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.lb_coeff = -1.0;
        assert!(cfg.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = tiny_cfg();
        let a = ModelParams::init(&cfg, &mut substream(9, "model")).unwrap();
        let b = ModelParams::init(&cfg, &mut substream(9, "model")).unwrap();
        let c = ModelParams::init(&cfg, &mut substream(10, "model")).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn traversal_order_is_stable_and_complete() {
        let cfg = tiny_cfg();
        let p = ModelParams::init(&cfg, &mut substream(1, "model")).unwrap();
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "token_embedding");
        assert!(names.contains(&"layers.0.dense.w_gate".to_string()));
        assert!(names.contains(&"layers.1.moe.router.weight".to_string()));
        assert!(names.contains(&"layers.1.moe.expert.2.w_down".to_string()));
        assert_eq!(names.last().unwrap(), "output_head");
        // Flatten/unflatten round-trips.
        let flat = p.flatten();
        assert_eq!(flat.len(), p.n_params());
        let mut q = p.zeros_like();
        q.unflatten_into(&flat);
        assert_eq!(p, q);
    }

    #[test]
    fn count_params_matches_instantiated_model() {
        let cfg = tiny_cfg();
        let p = ModelParams::init(&cfg, &mut substream(2, "model")).unwrap();
        let (total, act) = count_params(&cfg, cfg.n_experts);
        assert_eq!(total, p.n_params());
        assert!(act < total);
        // With the full pool selected, every parameter is active.
        let mut full = cfg.clone();
        full.top_k = full.n_experts;
        let (t2, a2) = count_params(&full, full.n_experts);
        assert_eq!(t2, a2);
    }

    #[test]
    fn activated_params_ignore_pool_size() {
        let cfg = tiny_cfg();
        let (_, a3) = count_params(&cfg, 3);
        let (_, a8) = count_params(&cfg, 8);
        // Router rows grow with the pool; expert work does not.
        let router_growth = (8 - 3) * (cfg.n_layers - cfg.dense_prefix_layers) * (cfg.d_model + 1);
        assert_eq!(a8 - a3, router_growth);
        let (t3, _) = count_params(&cfg, 3);
        let (t8, _) = count_params(&cfg, 8);
        assert!(t8 > t3);
    }

    #[test]
    fn flops_rule_matches_reference_point() {
        let f = flops_per_step(8_388_608, 1_100_000_000);
        assert!((f - 5.536e16).abs() / 5.536e16 < 1e-3, "got {f:e}");
        // Pool size invariance at fixed top_k and batch.
        let cfg = tiny_cfg();
        let (_, a_small) = count_params(&cfg, 3);
        let (_, a_big) = count_params(&cfg, 12);
        let fixed_router = |a: usize, e: usize| {
            a - e * (cfg.n_layers - cfg.dense_prefix_layers) * (cfg.d_model + 1)
        };
        assert_eq!(
            flops_per_step(4096, fixed_router(a_small, 3)),
            flops_per_step(4096, fixed_router(a_big, 12))
        );
    }
}
