//! Causal grouped-query attention over flat `[tokens, d_model]` batches.
//!
//! The batch is a concatenation of fixed-length sequences; attention never
//! crosses a sequence boundary. Query heads outnumber key/value heads by an
//! integer factor and read their group's shared key/value stream. Rotary
//! position embedding is applied to queries and keys before scoring.

use crate::error::{Error, Result};
use crate::numerics::ops::{linear, linear_vjp, rope_apply, rope_vjp, softmax_vjp};
use crate::numerics::tensor::{matmul, transpose};
use crate::numerics::Tensor;

use super::moe::add_into;
use super::ModelConfig;

/// Everything the backward pass reuses from the forward pass.
pub struct AttnCache {
    /// Post-rotation queries `[tokens, n_q_heads * d_head]`.
    q: Tensor,
    /// Post-rotation keys `[tokens, n_kv_heads * d_head]`.
    k: Tensor,
    v: Tensor,
    /// Softmaxed attention weights, one `[seq, seq]` tensor per
    /// `(sequence, q_head)` pair in row-major order.
    probs: Vec<Tensor>,
    /// Concatenated head outputs `[tokens, n_q_heads * d_head]`.
    ctx: Tensor,
}

/// Gradients for the four projection matrices.
pub struct AttnGrads {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

fn check_batch(x: &Tensor, cfg: &ModelConfig) -> Result<usize> {
    let n = x.shape()[0];
    if x.ndim() != 2 || x.shape()[1] != cfg.d_model {
        return Err(Error::Shape(format!(
            "attention input {:?}, want [tokens, {}]",
            x.shape(),
            cfg.d_model
        )));
    }
    if n == 0 || n % cfg.seq_len != 0 {
        return Err(Error::Shape(format!(
            "{n} tokens do not split into {}-token sequences",
            cfg.seq_len
        )));
    }
    Ok(n / cfg.seq_len)
}

/// Copy one head's columns out of a projected row block.
/// Scaled causal softmax over an `[s, s]` score matrix: row `i` is
/// normalized over positions `0..=i` and zeroed beyond. Matches masking with
/// negative infinity followed by a full-row softmax, value for value, while
/// never exponentiating the masked entries.
fn causal_softmax_inplace(scores: &mut Tensor, s: usize, scale: f64) {
    let sd = scores.data_mut();
    for i in 0..s {
        let row = &mut sd[i * s..(i + 1) * s];
        for v in row[..=i].iter_mut() {
            *v *= scale;
        }
        let m = row[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row[..=i].iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row[..=i].iter_mut() {
            *v /= sum;
        }
        for v in row[i + 1..].iter_mut() {
            *v = 0.0;
        }
    }
}

fn head_block(src: &Tensor, row0: usize, rows: usize, col0: usize, dh: usize) -> Tensor {
    let width = src.shape()[1];
    let mut out = Tensor::zeros(&[rows, dh]);
    for r in 0..rows {
        out.data_mut()[r * dh..(r + 1) * dh]
            .copy_from_slice(&src.data()[(row0 + r) * width + col0..(row0 + r) * width + col0 + dh]);
    }
    out
}

fn head_block_add(dst: &mut Tensor, delta: &Tensor, row0: usize, col0: usize) {
    let width = dst.shape()[1];
    let (rows, dh) = (delta.shape()[0], delta.shape()[1]);
    for r in 0..rows {
        let d = &delta.data()[r * dh..(r + 1) * dh];
        let o = &mut dst.data_mut()[(row0 + r) * width + col0..(row0 + r) * width + col0 + dh];
        for (a, b) in o.iter_mut().zip(d) {
            *a += b;
        }
    }
}

/// Rotate every head of every sequence in a `[tokens, heads * d_head]`
/// projection, in place. `sign` selects forward (+1) or adjoint (-1).
fn rotate_sequences(
    proj: &mut Tensor,
    n_seqs: usize,
    seq_len: usize,
    heads: usize,
    dh: usize,
    base: f64,
    sign: f64,
) -> Result<()> {
    let width = heads * dh;
    for s in 0..n_seqs {
        let row0 = s * seq_len;
        let block = Tensor::new(
            vec![seq_len, heads, dh],
            proj.data()[row0 * width..(row0 + seq_len) * width].to_vec(),
        )?;
        let rotated = if sign > 0.0 {
            rope_apply(&block, base)?
        } else {
            rope_vjp(&block, base)?
        };
        proj.data_mut()[row0 * width..(row0 + seq_len) * width].copy_from_slice(rotated.data());
    }
    Ok(())
}

pub fn attention_forward(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    cfg: &ModelConfig,
) -> Result<(Tensor, AttnCache)> {
    let n_seqs = check_batch(x, cfg)?;
    let (s, nq, nkv, dh) = (cfg.seq_len, cfg.n_q_heads, cfg.n_kv_heads, cfg.d_head);
    let group = nq / nkv;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut q = linear(x, wq)?;
    let mut k = linear(x, wk)?;
    let v = linear(x, wv)?;
    rotate_sequences(&mut q, n_seqs, s, nq, dh, cfg.rope_base, 1.0)?;
    rotate_sequences(&mut k, n_seqs, s, nkv, dh, cfg.rope_base, 1.0)?;

    let n = n_seqs * s;
    let mut ctx = Tensor::zeros(&[n, nq * dh]);
    let mut probs = Vec::with_capacity(n_seqs * nq);
    for seq in 0..n_seqs {
        let row0 = seq * s;
        for h in 0..nq {
            let qh = head_block(&q, row0, s, h * dh, dh);
            let kh = head_block(&k, row0, s, (h / group) * dh, dh);
            let vh = head_block(&v, row0, s, (h / group) * dh, dh);
            let mut scores = matmul(&qh, &transpose(&kh))?;
            causal_softmax_inplace(&mut scores, s, scale);
            let p = scores;
            let ctx_h = matmul(&p, &vh)?;
            head_block_add(&mut ctx, &ctx_h, row0, h * dh);
            probs.push(p);
        }
    }
    let out = linear(&ctx, wo)?;
    Ok((out, AttnCache { q, k, v, probs, ctx }))
}

pub fn attention_backward(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    cfg: &ModelConfig,
    cache: &AttnCache,
    grad_out: &Tensor,
) -> Result<(Tensor, AttnGrads)> {
    let n_seqs = check_batch(x, cfg)?;
    let (s, nq, nkv, dh) = (cfg.seq_len, cfg.n_q_heads, cfg.n_kv_heads, cfg.d_head);
    let group = nq / nkv;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = n_seqs * s;

    let (grad_ctx, grad_wo) = linear_vjp(&cache.ctx, wo, grad_out)?;

    let mut dq = Tensor::zeros(&[n, nq * dh]);
    let mut dk = Tensor::zeros(&[n, nkv * dh]);
    let mut dv = Tensor::zeros(&[n, nkv * dh]);
    for seq in 0..n_seqs {
        let row0 = seq * s;
        for h in 0..nq {
            let p = &cache.probs[seq * nq + h];
            let qh = head_block(&cache.q, row0, s, h * dh, dh);
            let kh = head_block(&cache.k, row0, s, (h / group) * dh, dh);
            let vh = head_block(&cache.v, row0, s, (h / group) * dh, dh);
            let gctx_h = head_block(&grad_ctx, row0, s, h * dh, dh);

            let dp = matmul(&gctx_h, &transpose(&vh))?;
            let dvh = matmul(&transpose(p), &gctx_h)?;
            let mut dscores = softmax_vjp(p, &dp);
            for v in dscores.data_mut() {
                *v *= scale;
            }
            let dqh = matmul(&dscores, &kh)?;
            let dkh = matmul(&transpose(&dscores), &qh)?;

            head_block_add(&mut dq, &dqh, row0, h * dh);
            head_block_add(&mut dk, &dkh, row0, (h / group) * dh);
            head_block_add(&mut dv, &dvh, row0, (h / group) * dh);
        }
    }

    rotate_sequences(&mut dq, n_seqs, s, nq, dh, cfg.rope_base, -1.0)?;
    rotate_sequences(&mut dk, n_seqs, s, nkv, dh, cfg.rope_base, -1.0)?;

    let (gx_q, grad_wq) = linear_vjp(x, wq, &dq)?;
    let (gx_k, grad_wk) = linear_vjp(x, wk, &dk)?;
    let (mut grad_x, grad_wv) = linear_vjp(x, wv, &dv)?;
    add_into(&mut grad_x, &gx_q);
    add_into(&mut grad_x, &gx_k);

    Ok((
        grad_x,
        AttnGrads {
            wq: grad_wq,
            wk: grad_wk,
            wv: grad_wv,
            wo: grad_wo,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gaussian;
    use crate::numerics::{grad_check, Tensor};
    use crate::rng::substream;

    fn attn_cfg(seq_len: usize, nq: usize, nkv: usize, dh: usize, d: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: d,
            n_q_heads: nq,
            n_kv_heads: nkv,
            d_head: dh,
            vocab_size: 11,
            seq_len,
            rope_base: 1e4,
            dense_prefix_layers: 1,
            n_experts: 2,
            top_k: 1,
            d_expert_hidden: 4,
            n_shared_experts: 0,
            lb_coeff: 0.0,
            router_bias_enabled: true,
        }
    }

    struct Weights {
        wq: Tensor,
        wk: Tensor,
        wv: Tensor,
        wo: Tensor,
    }

    fn weights(cfg: &ModelConfig, seed: u64) -> Weights {
        let mut rng = substream(seed, "attn-w");
        let d = cfg.d_model;
        Weights {
            wq: gaussian(&[cfg.n_q_heads * cfg.d_head, d], 0.3, &mut rng),
            wk: gaussian(&[cfg.n_kv_heads * cfg.d_head, d], 0.3, &mut rng),
            wv: gaussian(&[cfg.n_kv_heads * cfg.d_head, d], 0.3, &mut rng),
            wo: gaussian(&[d, cfg.n_q_heads * cfg.d_head], 0.3, &mut rng),
        }
    }

    #[test]
    fn output_shape_and_finiteness() {
        let cfg = attn_cfg(5, 2, 1, 4, 6);
        let w = weights(&cfg, 1);
        let x = gaussian(&[10, 6], 1.0, &mut substream(2, "x"));
        let (y, _) = attention_forward(&x, &w.wq, &w.wk, &w.wv, &w.wo, &cfg).unwrap();
        assert_eq!(y.shape(), &[10, 6]);
        assert!(y.is_finite());
    }

    #[test]
    fn rejects_ragged_batches() {
        let cfg = attn_cfg(5, 2, 1, 4, 6);
        let w = weights(&cfg, 1);
        let x = gaussian(&[7, 6], 1.0, &mut substream(2, "x"));
        assert!(attention_forward(&x, &w.wq, &w.wk, &w.wv, &w.wo, &cfg).is_err());
    }

    #[test]
    fn later_tokens_cannot_influence_earlier_outputs() {
        let cfg = attn_cfg(6, 2, 2, 4, 8);
        let w = weights(&cfg, 3);
        let mut rng = substream(4, "x");
        let x1 = gaussian(&[6, 8], 1.0, &mut rng);
        let mut x2 = x1.clone();
        for v in x2.data_mut()[5 * 8..].iter_mut() {
            *v += 1.0;
        }
        let (y1, _) = attention_forward(&x1, &w.wq, &w.wk, &w.wv, &w.wo, &cfg).unwrap();
        let (y2, _) = attention_forward(&x2, &w.wq, &w.wk, &w.wv, &w.wo, &cfg).unwrap();
        assert_eq!(&y1.data()[..5 * 8], &y2.data()[..5 * 8]);
        assert_ne!(&y1.data()[5 * 8..], &y2.data()[5 * 8..]);
    }

    #[test]
    fn sequences_do_not_attend_across_boundaries() {
        let cfg = attn_cfg(3, 1, 1, 4, 4);
        let w = weights(&cfg, 5);
        let mut rng = substream(6, "x");
        let a = gaussian(&[3, 4], 1.0, &mut rng);
        let b = gaussian(&[3, 4], 1.0, &mut rng);
        let c = gaussian(&[3, 4], 1.0, &mut rng);
        let mut ab = Tensor::zeros(&[6, 4]);
        ab.data_mut()[..12].copy_from_slice(a.data());
        ab.data_mut()[12..].copy_from_slice(b.data());
        let mut ac = Tensor::zeros(&[6, 4]);
        ac.data_mut()[..12].copy_from_slice(a.data());
        ac.data_mut()[12..].copy_from_slice(c.data());
        let (y_ab, _) = attention_forward(&ab, &w.wq, &w.wk, &w.wv, &w.wo, &cfg).unwrap();
        let (y_ac, _) = attention_forward(&ac, &w.wq, &w.wk, &w.wv, &w.wo, &cfg).unwrap();
        assert_eq!(&y_ab.data()[..12], &y_ac.data()[..12]);
    }

    #[test]
    fn single_token_sequence_passes_value_through() {
        let cfg = attn_cfg(1, 2, 1, 4, 6);
        let w = weights(&cfg, 7);
        let x = gaussian(&[1, 6], 1.0, &mut substream(8, "x"));
        let (y, _) = attention_forward(&x, &w.wq, &w.wk, &w.wv, &w.wo, &cfg).unwrap();
        // With one token the attention weight is 1, so out = wo . concat(v, v).
        let v = linear(&x, &w.wv).unwrap();
        let mut ctx = Tensor::zeros(&[1, 8]);
        ctx.data_mut()[..4].copy_from_slice(v.data());
        ctx.data_mut()[4..].copy_from_slice(v.data());
        let want = linear(&ctx, &w.wo).unwrap();
        for (a, b) in y.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Finite differences against the analytic backward pass for each input.
    #[test]
    fn gradients_match_finite_differences() {
        let cfg = attn_cfg(3, 2, 1, 4, 5);
        let w = weights(&cfg, 9);
        let x = gaussian(&[6, 5], 0.8, &mut substream(10, "x"));
        let r = gaussian(&[6, 5], 1.0, &mut substream(11, "r"));
        let score = |y: &Tensor| -> f64 {
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };

        let (_, cache) = attention_forward(&x, &w.wq, &w.wk, &w.wv, &w.wo, &cfg).unwrap();
        let (gx, gw) =
            attention_backward(&x, &w.wq, &w.wk, &w.wv, &w.wo, &cfg, &cache, &r).unwrap();

        let report = grad_check(
            "attention/x",
            x.data(),
            1e-4,
            |xd| {
                let xp = Tensor::new(x.shape().to_vec(), xd.to_vec()).unwrap();
                let (y, _) = attention_forward(&xp, &w.wq, &w.wk, &w.wv, &w.wo, &cfg).unwrap();
                score(&y)
            },
            |_| gx.data().to_vec(),
        );
        assert!(report.passed, "{}", report.summary());

        let cases = [
            ("wq", &w.wq, &gw.wq),
            ("wk", &w.wk, &gw.wk),
            ("wv", &w.wv, &gw.wv),
            ("wo", &w.wo, &gw.wo),
        ];
        for (slot, (name, point, analytic)) in cases.into_iter().enumerate() {
            let report = grad_check(
                name,
                point.data(),
                1e-4,
                |wd| {
                    let t = Tensor::new(point.shape().to_vec(), wd.to_vec()).unwrap();
                    let mut wfull = Weights {
                        wq: w.wq.clone(),
                        wk: w.wk.clone(),
                        wv: w.wv.clone(),
                        wo: w.wo.clone(),
                    };
                    match slot {
                        0 => wfull.wq = t,
                        1 => wfull.wk = t,
                        2 => wfull.wv = t,
                        _ => wfull.wo = t,
                    }
                    let (y, _) =
                        attention_forward(&x, &wfull.wq, &wfull.wk, &wfull.wv, &wfull.wo, &cfg)
                            .unwrap();
                    score(&y)
                },
                |_| analytic.data().to_vec(),
            );
            assert!(report.passed, "{}", report.summary());
        }
    }
}
