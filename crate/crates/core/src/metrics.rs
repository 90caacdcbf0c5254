//! Routing and training diagnostics: expert utilization, Gini imbalance,
//! and expansion-spike recovery detection, plus plain-text report emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::datagen::TokenBatch;
use crate::error::{Error, Result};
use crate::model::{lm_forward_loss, ModelConfig, ModelParams, RoutingDecision};

/// Per-layer token-per-expert counts from one routing snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationReport {
    /// `[moe_layer][expert]` counts of (token, selected expert) pairs.
    pub counts: Vec<Vec<u64>>,
    /// Tokens routed per layer.
    pub total_tokens: u64,
    pub top_k: usize,
    /// Step the snapshot was taken at (0 for offline evaluation).
    pub step: u64,
}

impl UtilizationReport {
    /// Per-layer counts must sum to `tokens * top_k` exactly.
    pub fn check_conservation(&self) -> Result<()> {
        let want = self.total_tokens * self.top_k as u64;
        for (li, layer) in self.counts.iter().enumerate() {
            let got: u64 = layer.iter().sum();
            if got != want {
                return Err(Error::Train(format!(
                    "layer {li} utilization sums to {got}, want {want}"
                )));
            }
        }
        Ok(())
    }
}

/// Tally selected experts from per-layer routing decisions.
pub fn utilization_from_decisions(decisions: &[RoutingDecision]) -> Vec<Vec<u64>> {
    decisions
        .iter()
        .map(|d| {
            let mut counts = vec![0u64; d.n_experts];
            for &e in &d.selected_indices {
                counts[e as usize] += 1;
            }
            counts
        })
        .collect()
}

/// Routes `eval_batches` through the model and counts expert assignments
/// per MoE layer.
pub fn collect_utilization(
    params: &ModelParams,
    cfg: &ModelConfig,
    eval_batches: &[TokenBatch],
    step: u64,
) -> Result<UtilizationReport> {
    let mut counts: Vec<Vec<u64>> = Vec::new();
    let mut total_tokens = 0u64;
    for batch in eval_batches {
        let out = lm_forward_loss(params, cfg, &batch.tokens)?;
        total_tokens += batch.tokens.len() as u64;
        if counts.is_empty() {
            counts = vec![vec![0; cfg.n_experts]; out.decisions.len()];
        }
        for (layer, d) in utilization_from_decisions(&out.decisions).iter().enumerate() {
            for (c, &v) in counts[layer].iter_mut().zip(d) {
                *c += v;
            }
        }
    }
    let report = UtilizationReport {
        counts,
        total_tokens,
        top_k: cfg.top_k,
        step,
    };
    report.check_conservation()?;
    Ok(report)
}

/// Utilization split by the domain label of each sequence:
/// `[domain][moe_layer][expert]`.
pub fn collect_utilization_by_domain(
    params: &ModelParams,
    cfg: &ModelConfig,
    eval_batches: &[TokenBatch],
    n_domains: usize,
) -> Result<Vec<Vec<Vec<u64>>>> {
    let mut out: Vec<Vec<Vec<u64>>> = vec![Vec::new(); n_domains];
    for batch in eval_batches {
        let fwd = lm_forward_loss(params, cfg, &batch.tokens)?;
        let s = batch.seq_len;
        for (layer, d) in fwd.decisions.iter().enumerate() {
            for (seq, &label) in batch.domain_labels.iter().enumerate() {
                let dom = &mut out[label as usize];
                if dom.is_empty() {
                    *dom = vec![vec![0; cfg.n_experts]; fwd.decisions.len()];
                }
                for t in seq * s..(seq + 1) * s {
                    for &e in d.token_experts(t) {
                        dom[layer][e as usize] += 1;
                    }
                }
            }
        }
    }
    for dom in out.iter_mut() {
        if dom.is_empty() {
            *dom = vec![vec![0; cfg.n_experts]; 0];
        }
    }
    Ok(out)
}

/// Pairwise mean-difference Gini coefficient:
/// `G = sum_ij |u_i - u_j| / (2 E^2 mean(u))`. 0 is perfect balance;
/// `(E-1)/E` is total collapse onto one expert.
pub fn gini(counts: &[f64]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::Train("gini of an empty count vector".into()));
    }
    if counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return Err(Error::Train("gini requires nonnegative finite counts".into()));
    }
    let e = counts.len() as f64;
    let mean = counts.iter().sum::<f64>() / e;
    if mean == 0.0 {
        return Err(Error::Train("gini undefined for all-zero counts".into()));
    }
    let mut pairwise = 0.0;
    for &a in counts {
        for &b in counts {
            pairwise += (a - b).abs();
        }
    }
    Ok(pairwise / (2.0 * e * e * mean))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GiniReport {
    pub per_layer: Vec<f64>,
    /// Gini of the counts pooled (summed) across layers.
    pub aggregate: f64,
}

pub fn gini_report(util: &UtilizationReport) -> Result<GiniReport> {
    let per_layer = util
        .counts
        .iter()
        .map(|layer| gini(&layer.iter().map(|&c| c as f64).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let e = util.counts.first().map(|l| l.len()).unwrap_or(0);
    let mut pooled = vec![0.0; e];
    for layer in &util.counts {
        for (p, &c) in pooled.iter_mut().zip(layer) {
            *p += c as f64;
        }
    }
    Ok(GiniReport {
        per_layer,
        aggregate: gini(&pooled)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikeReport {
    pub expansion_step: u64,
    /// Trailing-window mean loss at the expansion step.
    pub pre_expansion_baseline: f64,
    pub recovery_step: Option<u64>,
    pub recovered: bool,
}

/// Finds when the smoothed loss first returns to its pre-expansion level.
///
/// Smoothing is a trailing mean over `smoothing_window` consecutive history
/// entries. The baseline is the smoothed loss at `expansion_step`; recovery
/// is the first later step whose smoothed loss is at or below it, and counts
/// as recovered when it happens within `budget_steps` (inclusive).
pub fn detect_spike_recovery(
    loss_history: &[(u64, f64)],
    expansion_step: u64,
    smoothing_window: usize,
    budget_steps: u64,
) -> Result<SpikeReport> {
    if smoothing_window == 0 {
        return Err(Error::Config("smoothing window must be positive".into()));
    }
    let idx = loss_history
        .iter()
        .position(|&(s, _)| s == expansion_step)
        .ok_or_else(|| {
            Error::Train(format!("history does not contain expansion step {expansion_step}"))
        })?;
    if idx + 1 < smoothing_window {
        return Err(Error::Train(format!(
            "only {} steps of pre-expansion history for a window of {smoothing_window}",
            idx + 1
        )));
    }
    let smoothed = |at: usize| -> f64 {
        let lo = at + 1 - smoothing_window;
        loss_history[lo..=at].iter().map(|&(_, l)| l).sum::<f64>() / smoothing_window as f64
    };
    let baseline = smoothed(idx);
    let mut recovery_step = None;
    for i in idx + 1..loss_history.len() {
        if i + 1 < smoothing_window {
            continue;
        }
        if smoothed(i) <= baseline {
            recovery_step = Some(loss_history[i].0);
            break;
        }
    }
    let recovered =
        recovery_step.map(|s| s <= expansion_step + budget_steps).unwrap_or(false);
    Ok(SpikeReport {
        expansion_step,
        pre_expansion_baseline: baseline,
        recovery_step,
        recovered,
    })
}

/// Serialize a utilization matrix: one line per layer, counts separated by
/// commas.
pub fn format_utilization_matrix(counts: &[Vec<u64>]) -> String {
    let mut s = String::new();
    for layer in counts {
        let row: Vec<String> = layer.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

pub fn parse_utilization_matrix(text: &str) -> Result<Vec<Vec<u64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split(',')
                .map(|f| {
                    f.trim()
                        .parse::<u64>()
                        .map_err(|e| Error::Parse(format!("bad count {f:?}: {e}")))
                })
                .collect()
        })
        .collect()
}

/// Writes the three report files into `dir` and returns their paths:
/// `utilization.csv`, `gini.csv`, and `spikes.txt`.
pub fn emit_reports(
    util: &UtilizationReport,
    gini: &GiniReport,
    spikes: &[SpikeReport],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let util_path = dir.join("utilization.csv");
    std::fs::write(&util_path, format_utilization_matrix(&util.counts))?;

    let gini_path = dir.join("gini.csv");
    let mut g = String::from("layer,gini\n");
    for (li, v) in gini.per_layer.iter().enumerate() {
        let _ = writeln!(g, "{li},{v}");
    }
    let _ = writeln!(g, "aggregate,{}", gini.aggregate);
    std::fs::write(&gini_path, g)?;

    let spike_path = dir.join("spikes.txt");
    let mut s = String::new();
    for sp in spikes {
        let _ = writeln!(
            s,
            "expansion_step={} baseline={} recovery_step={} recovered={}",
            sp.expansion_step,
            sp.pre_expansion_baseline,
            sp.recovery_step.map(|v| v.to_string()).unwrap_or_else(|| "none".into()),
            sp.recovered
        );
    }
    std::fs::write(&spike_path, s)?;
    Ok(vec![util_path, gini_path, spike_path])
}
