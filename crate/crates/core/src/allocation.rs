//! Stage-wise token planning from a fitted loss model: compute-optimal
//! cumulative tokens per expert count, incremental differences, and
//! normalization onto a fixed training budget.

use crate::error::{Error, Result};
use crate::scaling_law::ScalingLawParams;

#[derive(Debug, Clone, PartialEq)]
pub struct StagePlan {
    /// 1-based stage number.
    pub stage: usize,
    pub e: u32,
    /// Compute-optimal cumulative tokens for this expert count.
    pub cumulative_opt: f64,
    /// Difference of consecutive cumulative optima (the first stage keeps
    /// its full cumulative value).
    pub incremental_opt: f64,
    /// Tokens actually assigned after normalizing onto the budget.
    pub allocated: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub stages: Vec<StagePlan>,
    pub total_tokens: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Allocation("schedule has no stages".into()));
        }
        let mut frac_sum = 0.0;
        let mut alloc_sum = 0.0;
        for (i, st) in self.stages.iter().enumerate() {
            if st.stage != i + 1 {
                return Err(Error::Allocation(format!(
                    "stage numbering broken at index {i}: {}",
                    st.stage
                )));
            }
            if i > 0 && st.e <= self.stages[i - 1].e {
                return Err(Error::Allocation(format!(
                    "expert counts must strictly increase: stage {} has E={}",
                    st.stage, st.e
                )));
            }
            if !(st.allocated > 0.0) {
                return Err(Error::Allocation(format!(
                    "stage {} allocation must be positive, got {}",
                    st.stage, st.allocated
                )));
            }
            frac_sum += st.fraction;
            alloc_sum += st.allocated;
        }
        if (frac_sum - 1.0).abs() > 1e-12 {
            return Err(Error::Allocation(format!(
                "fractions sum to {frac_sum}, want 1"
            )));
        }
        if (alloc_sum - self.total_tokens).abs() > 1.0 {
            return Err(Error::Allocation(format!(
                "allocations sum to {alloc_sum}, want {}",
                self.total_tokens
            )));
        }
        Ok(())
    }
}

fn coefficients_and_exponents(
    p: &ScalingLawParams,
    e: u32,
) -> Result<(f64, f64, f64, f64)> {
    let (m, n) = p.coefficients(e)?;
    let (mu, nu) = p.exponents(e)?;
    if !(mu < 0.0 && nu < 0.0) {
        return Err(Error::Allocation(format!(
            "exponents must both be negative at E={e}: mu={mu}, nu={nu}"
        )));
    }
    if !(m > 0.0 && n > 0.0) {
        return Err(Error::Allocation(format!(
            "term coefficients must be positive at E={e}: m={m}, n={n}"
        )));
    }
    Ok((m, n, mu, nu))
}

/// Compute-optimal token count for budget `f` (FLOPs) at expert count `e`,
/// minimizing the loss along the constraint F = 6 N D:
/// `D* = (n nu / (m mu))^(-1/(mu+nu)) * (F/6)^(mu/(mu+nu))`.
pub fn optimal_tokens_closed_form(p: &ScalingLawParams, f: f64, e: u32) -> Result<f64> {
    if !(f > 0.0) {
        return Err(Error::Allocation(format!("budget must be positive, got {f}")));
    }
    let (m, n, mu, nu) = coefficients_and_exponents(p, e)?;
    let ratio = (n * nu) / (m * mu);
    let d = ratio.powf(-1.0 / (mu + nu)) * (f / 6.0).powf(mu / (mu + nu));
    if !d.is_finite() || d <= 0.0 {
        return Err(Error::Allocation(format!(
            "closed form produced unusable D*={d} at F={f}, E={e}"
        )));
    }
    Ok(d)
}

/// Activated parameters at the compute optimum for budget `f`.
fn optimal_n_act(p: &ScalingLawParams, f: f64, e: u32) -> Result<f64> {
    Ok(f / 6.0 / optimal_tokens_closed_form(p, f, e)?)
}

/// Compute-optimal cumulative tokens at expert count `e` for a model of
/// `n_act_bar` activated parameters: bisects the budget F until the
/// compute-optimal N* matches `n_act_bar`, then returns that optimum's D*.
pub fn cumulative_for_fixed_nact(
    p: &ScalingLawParams,
    n_act_bar: f64,
    e: u32,
) -> Result<f64> {
    if !(n_act_bar > 0.0) {
        return Err(Error::Allocation(format!(
            "n_act must be positive, got {n_act_bar}"
        )));
    }
    let target = n_act_bar.ln();
    let miss = |f: f64| -> Result<f64> { Ok(optimal_n_act(p, f, e)?.ln() - target) };

    let mut lo = 6.0 * n_act_bar * 1e2;
    let mut hi = 6.0 * n_act_bar * 1e9;
    let mut miss_lo = miss(lo)?;
    let mut miss_hi = miss(hi)?;
    // N*(F) is monotone increasing for well-signed exponents; widen the
    // bracket geometrically if the root lies outside.
    for _ in 0..64 {
        if miss_lo.signum() != miss_hi.signum() {
            break;
        }
        if miss_lo > 0.0 {
            lo /= 100.0;
            miss_lo = miss(lo)?;
        } else {
            hi *= 100.0;
            miss_hi = miss(hi)?;
        }
    }
    if miss_lo.signum() == miss_hi.signum() {
        return Err(Error::Allocation(format!(
            "could not bracket the budget for n_act={n_act_bar} at E={e}"
        )));
    }
    if miss_lo > miss_hi {
        return Err(Error::Allocation(format!(
            "optimal N* is decreasing in the budget at E={e}; refusing to plan"
        )));
    }
    let (mut llo, mut lhi) = (lo.ln(), hi.ln());
    for _ in 0..200 {
        let mid = 0.5 * (llo + lhi);
        let m = miss(mid.exp())?;
        if m.abs() <= 1e-12 {
            llo = mid;
            lhi = mid;
            break;
        }
        if m < 0.0 {
            llo = mid;
        } else {
            lhi = mid;
        }
        if lhi - llo < 1e-14 {
            break;
        }
    }
    let f_star = (0.5 * (llo + lhi)).exp();
    let achieved = optimal_n_act(p, f_star, e)?;
    if ((achieved - n_act_bar) / n_act_bar).abs() > 1e-9 {
        return Err(Error::Allocation(format!(
            "bisection stalled: N*={achieved} vs target {n_act_bar} at E={e}"
        )));
    }
    optimal_tokens_closed_form(p, f_star, e)
}

fn differenced_schedule(
    cumulatives: &[f64],
    experts: &[u32],
    d_total: f64,
) -> Result<Schedule> {
    if cumulatives.len() != experts.len() || cumulatives.is_empty() {
        return Err(Error::Allocation(format!(
            "{} cumulative optima for {} expert counts",
            cumulatives.len(),
            experts.len()
        )));
    }
    if !(d_total > 0.0) {
        return Err(Error::Allocation(format!(
            "token budget must be positive, got {d_total}"
        )));
    }
    for (i, w) in experts.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(Error::Allocation(format!(
                "expert counts must strictly increase: stage {} has E={} after E={}",
                i + 2,
                w[1],
                w[0]
            )));
        }
    }
    let mut increments = Vec::with_capacity(cumulatives.len());
    let mut prev = 0.0;
    for (i, &c) in cumulatives.iter().enumerate() {
        let inc = c - prev;
        if !(inc > 0.0) {
            return Err(Error::Allocation(format!(
                "fit pathology: cumulative optimum not increasing in E at stage {} \
                 (D*={c} after {prev})",
                i + 1
            )));
        }
        increments.push(inc);
        prev = c;
    }
    let sum: f64 = increments.iter().sum();
    let stages = increments
        .iter()
        .enumerate()
        .map(|(i, &inc)| {
            let fraction = inc / sum;
            StagePlan {
                stage: i + 1,
                e: experts[i],
                cumulative_opt: cumulatives[i],
                incremental_opt: inc,
                allocated: d_total * fraction,
                fraction,
            }
        })
        .collect();
    let schedule = Schedule {
        stages,
        total_tokens: d_total,
    };
    schedule.validate()?;
    Ok(schedule)
}

/// Plans the full stage schedule: cumulative optima from the fitted law,
/// differenced into increments, normalized onto `d_total` tokens.
pub fn make_schedule(
    p: &ScalingLawParams,
    n_act_bar: f64,
    experts: &[u32],
    d_total: f64,
) -> Result<Schedule> {
    let cumulatives = experts
        .iter()
        .map(|&e| cumulative_for_fixed_nact(p, n_act_bar, e))
        .collect::<Result<Vec<_>>>()?;
    differenced_schedule(&cumulatives, experts, d_total)
}

/// Builds a schedule from externally supplied cumulative optima, skipping
/// the fit entirely.
pub fn schedule_from_cumulatives(
    cumulatives: &[f64],
    experts: &[u32],
    d_total: f64,
) -> Result<Schedule> {
    differenced_schedule(cumulatives, experts, d_total)
}

/// One line per stage: `stage,e,cumulative_opt,incremental_opt,allocated,fraction`.
pub fn format_schedule(s: &Schedule) -> String {
    let mut out = String::from("stage,e,cumulative_opt,incremental_opt,allocated,fraction\n");
    for st in &s.stages {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            st.stage, st.e, st.cumulative_opt, st.incremental_opt, st.allocated, st.fraction
        ));
    }
    out
}

pub fn parse_schedule(text: &str) -> Result<Schedule> {
    let mut stages = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line.starts_with("stage,") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 6 {
            return Err(Error::Parse(format!(
                "line {}: expected 6 fields, got {}",
                ln + 1,
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Parse(format!("line {}: bad {what}", ln + 1));
        stages.push(StagePlan {
            stage: fields[0].parse().map_err(|_| bad("stage"))?,
            e: fields[1].parse().map_err(|_| bad("expert count"))?,
            cumulative_opt: fields[2].parse().map_err(|_| bad("cumulative"))?,
            incremental_opt: fields[3].parse().map_err(|_| bad("increment"))?,
            allocated: fields[4].parse().map_err(|_| bad("allocation"))?,
            fraction: fields[5].parse().map_err(|_| bad("fraction"))?,
        });
    }
    let schedule = Schedule {
        total_tokens: stages.iter().map(|s| s.allocated).sum(),
        stages,
    };
    schedule.validate()?;
    Ok(schedule)
}
