//! Joint loss model L(N_act, E, D) over activated parameters, expert count,
//! and training tokens, with robust fitting.
//!
//! The expert count enters through a saturating transform Ê bounded by
//! `e_max`; coefficients and exponents are smooth functions of Ê:
//! `L = a·Ê^δ · N^(α+γ·ln Ê) + b·Ê^ω · D^(β+ζ·ln Ê) + c`. Fitting minimizes
//! a Huber penalty on log-space residuals with multi-start L-BFGS.

pub mod lbfgs;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{next_index, next_normal, substream};
use lbfgs::{minimize, MinimizeOptions};

pub const DEFAULT_E_START: f64 = 1.0;
pub const DEFAULT_E_MAX: f64 = 512.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingLawParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub delta: f64,
    pub omega: f64,
    pub e_start: f64,
    pub e_max: f64,
}

impl ScalingLawParams {
    /// Effective exponents (mu, nu) of N and D at expert count `e`.
    pub fn exponents(&self, e: u32) -> Result<(f64, f64)> {
        let le = ehat(e, self.e_start, self.e_max)?.ln();
        Ok((self.alpha + self.gamma * le, self.beta + self.zeta * le))
    }

    /// Coefficients (m, n) of the N and D terms at expert count `e`.
    pub fn coefficients(&self, e: u32) -> Result<(f64, f64)> {
        let eh = ehat(e, self.e_start, self.e_max)?;
        Ok((self.a * eh.powf(self.delta), self.b * eh.powf(self.omega)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub n_act: f64,
    pub e: u32,
    pub d: f64,
    pub loss: f64,
}

impl Observation {
    fn validate(&self) -> Result<()> {
        if !(self.n_act > 0.0 && self.d > 0.0 && self.loss > 0.0) || self.e < 1 {
            return Err(Error::Data(format!(
                "observation fields must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub huber_delta: f64,
    /// Initial points in internal coordinates
    /// `[log a, log b, c_raw, alpha, beta, gamma, zeta, delta, omega]`
    /// where `c = softplus(c_raw)`.
    pub starts: Vec<[f64; 9]>,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
    pub e_start: f64,
    pub e_max: f64,
}

impl FitConfig {
    pub fn desk_default(seed: u64) -> Self {
        Self {
            huber_delta: 0.01,
            starts: default_start_grid(seed),
            max_iterations: 300,
            convergence_tol: 1e-10,
            holdout_fraction: 0.1,
            seed,
            e_start: DEFAULT_E_START,
            e_max: DEFAULT_E_MAX,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config("huber_delta must be positive".into()));
        }
        if self.starts.is_empty() {
            return Err(Error::Config("need at least one start".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction <= 0.5) {
            return Err(Error::Config("holdout_fraction must be in (0, 0.5]".into()));
        }
        check_anchors(self.e_start, self.e_max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: ScalingLawParams,
    pub r_squared: f64,
    pub rmse_train: f64,
    pub rmse_holdout: f64,
    pub objective: f64,
    pub start_index: usize,
}

fn check_anchors(e_start: f64, e_max: f64) -> Result<()> {
    if !(e_start >= 1.0 && e_start < e_max && e_max.is_finite()) {
        return Err(Error::Config(format!(
            "invalid anchors: e_start={e_start}, e_max={e_max}"
        )));
    }
    Ok(())
}

/// Saturating reparameterization of the expert count:
/// `1/Ê = 1/(E - 1 + (1/e_start - 1/e_max)^(-1)) + 1/e_max`.
/// Strictly increasing in E, equals `e_start` at E=1, approaches `e_max`.
pub fn ehat(e: u32, e_start: f64, e_max: f64) -> Result<f64> {
    check_anchors(e_start, e_max)?;
    if e < 1 {
        return Err(Error::Config("expert count must be at least 1".into()));
    }
    let k = 1.0 / (1.0 / e_start - 1.0 / e_max);
    let inv = 1.0 / (e as f64 - 1.0 + k) + 1.0 / e_max;
    Ok(1.0 / inv)
}

/// `L = m(Ê)·N^mu(Ê) + n(Ê)·D^nu(Ê) + c`.
pub fn predict_loss(p: &ScalingLawParams, n_act: f64, e: u32, d: f64) -> Result<f64> {
    if !(n_act > 0.0 && d > 0.0) {
        return Err(Error::Config(format!(
            "predict_loss needs positive n_act and d, got {n_act}, {d}"
        )));
    }
    let eh = ehat(e, p.e_start, p.e_max)?;
    let le = eh.ln();
    let m = p.a * eh.powf(p.delta);
    let n = p.b * eh.powf(p.omega);
    let mu = p.alpha + p.gamma * le;
    let nu = p.beta + p.zeta * le;
    Ok(m * n_act.powf(mu) + n * d.powf(nu) + p.c)
}

/// `r^2/2` inside the threshold, linear `delta*(|r| - delta/2)` outside.
pub fn huber(residual: f64, delta: f64) -> f64 {
    let r = residual.abs();
    if r <= delta {
        0.5 * residual * residual
    } else {
        delta * (r - 0.5 * delta)
    }
}

fn huber_value_slope(residual: f64, delta: f64) -> (f64, f64) {
    if residual.abs() <= delta {
        (0.5 * residual * residual, residual)
    } else {
        (delta * (residual.abs() - 0.5 * delta), delta * residual.signum())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    // Inverse of ln(1 + e^x): x = y + ln(1 - e^(-y)).
    y + (-(-y).exp()).ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Default multi-start grid in internal coordinates, subsampled to at most
/// 256 points by a seeded shuffle of the full cartesian product.
pub fn default_start_grid(seed: u64) -> Vec<[f64; 9]> {
    let log_ab = [0.0, 2.0, 4.0];
    let cs = [softplus_inv(0.5), softplus_inv(1.0)];
    let base_exp = [-0.2, -0.35, -0.5];
    let slopes = [-0.05, 0.0, 0.05];
    let mut grid = Vec::new();
    for &la in &log_ab {
        for &lb in &log_ab {
            for &c in &cs {
                for &al in &base_exp {
                    for &be in &base_exp {
                        for &ga in &slopes {
                            for &ze in &slopes {
                                for &de in &slopes {
                                    for &om in &slopes {
                                        grid.push([la, lb, c, al, be, ga, ze, de, om]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let mut rng = substream(seed, "fit/start-grid");
    for i in (1..grid.len()).rev() {
        let j = next_index(&mut rng, i + 1);
        grid.swap(i, j);
    }
    grid.truncate(256);
    grid
}

/// Precomputed logs for one observation.
#[derive(Debug, Clone, Copy)]
struct PreppedObs {
    ln_eh: f64,
    ln_n: f64,
    ln_d: f64,
    ln_loss: f64,
}

fn prep(obs: &[Observation], e_start: f64, e_max: f64) -> Result<Vec<PreppedObs>> {
    obs.iter()
        .map(|o| {
            Ok(PreppedObs {
                ln_eh: ehat(o.e, e_start, e_max)?.ln(),
                ln_n: o.n_act.ln(),
                ln_d: o.d.ln(),
                ln_loss: o.loss.ln(),
            })
        })
        .collect()
}

/// Huber objective on log-space residuals, with its gradient in the internal
/// coordinates.
fn objective_and_grad(theta: &[f64], obs: &[PreppedObs], delta: f64) -> (f64, Vec<f64>) {
    let (la, lb, craw) = (theta[0], theta[1], theta[2]);
    let (al, be, ga, ze, de, om) =
        (theta[3], theta[4], theta[5], theta[6], theta[7], theta[8]);
    let c = softplus(craw);
    let dc = sigmoid(craw);
    let mut total = 0.0;
    let mut g = vec![0.0; 9];
    for o in obs {
        let mu = al + ga * o.ln_eh;
        let nu = be + ze * o.ln_eh;
        let t1 = (la + de * o.ln_eh + mu * o.ln_n).exp();
        let t2 = (lb + om * o.ln_eh + nu * o.ln_d).exp();
        let pred = t1 + t2 + c;
        let r = pred.ln() - o.ln_loss;
        let (h, slope) = huber_value_slope(r, delta);
        total += h;
        let w = slope / pred;
        g[0] += w * t1;
        g[1] += w * t2;
        g[2] += w * dc;
        g[3] += w * t1 * o.ln_n;
        g[4] += w * t2 * o.ln_d;
        g[5] += w * t1 * o.ln_eh * o.ln_n;
        g[6] += w * t2 * o.ln_eh * o.ln_d;
        g[7] += w * t1 * o.ln_eh;
        g[8] += w * t2 * o.ln_eh;
    }
    (total, g)
}

fn params_from_theta(theta: &[f64], e_start: f64, e_max: f64) -> ScalingLawParams {
    ScalingLawParams {
        a: theta[0].exp(),
        b: theta[1].exp(),
        c: softplus(theta[2]),
        alpha: theta[3],
        beta: theta[4],
        gamma: theta[5],
        zeta: theta[6],
        delta: theta[7],
        omega: theta[8],
        e_start,
        e_max,
    }
}

pub fn r_squared_rmse(predicted: &[f64], observed: &[f64]) -> (f64, f64) {
    assert_eq!(predicted.len(), observed.len());
    let n = observed.len() as f64;
    let mean = observed.iter().sum::<f64>() / n;
    let ss_res: f64 = predicted
        .iter()
        .zip(observed)
        .map(|(p, o)| (p - o) * (p - o))
        .sum();
    let ss_tot: f64 = observed.iter().map(|o| (o - mean) * (o - mean)).sum();
    let r2 = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    (r2, (ss_res / n).sqrt())
}

/// Standard R-squared and RMSE of predicted vs observed loss.
pub fn evaluate(p: &ScalingLawParams, observations: &[Observation]) -> Result<(f64, f64)> {
    if observations.is_empty() {
        return Err(Error::Fit("evaluate needs at least one observation".into()));
    }
    let mut preds = Vec::with_capacity(observations.len());
    let mut obs = Vec::with_capacity(observations.len());
    for o in observations {
        preds.push(predict_loss(p, o.n_act, o.e, o.d)?);
        obs.push(o.loss);
    }
    Ok(r_squared_rmse(&preds, &obs))
}

fn canonical_order(observations: &[Observation]) -> Vec<Observation> {
    let mut sorted = observations.to_vec();
    sorted.sort_by(|x, y| {
        x.n_act
            .total_cmp(&y.n_act)
            .then(x.e.cmp(&y.e))
            .then(x.d.total_cmp(&y.d))
            .then(x.loss.total_cmp(&y.loss))
    });
    sorted
}

/// Fits the law to observations. Minimizes the Huber objective from every
/// start and keeps the best final objective (ties break toward the lowest
/// start index). The holdout split is a seeded shuffle, independent of the
/// order observations are supplied in.
pub fn fit(observations: &[Observation], config: &FitConfig) -> Result<FitReport> {
    config.validate()?;
    for o in observations {
        o.validate()?;
    }
    if observations.len() < 20 {
        return Err(Error::Fit(format!(
            "need at least 20 observations, got {}",
            observations.len()
        )));
    }
    let mut es: Vec<u32> = observations.iter().map(|o| o.e).collect();
    es.sort_unstable();
    es.dedup();
    if es.len() < 3 {
        return Err(Error::Fit(format!(
            "observations span only {} expert count(s); need at least 3",
            es.len()
        )));
    }
    let mut ds: Vec<u64> = observations.iter().map(|o| o.d.to_bits()).collect();
    ds.sort_unstable();
    ds.dedup();
    if ds.len() < 2 {
        return Err(Error::Fit(
            "observations have a single token count; the D term is unidentifiable".into(),
        ));
    }

    let sorted = canonical_order(observations);
    let n = sorted.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = substream(config.seed, "fit/holdout");
    for i in (1..n).rev() {
        let j = next_index(&mut rng, i + 1);
        idx.swap(i, j);
    }
    let n_holdout = ((config.holdout_fraction * n as f64).round() as usize).max(1);
    let mut holdout_idx = idx[..n_holdout].to_vec();
    let mut train_idx = idx[n_holdout..].to_vec();
    holdout_idx.sort_unstable();
    train_idx.sort_unstable();
    let train: Vec<Observation> = train_idx.iter().map(|&i| sorted[i]).collect();
    let holdout: Vec<Observation> = holdout_idx.iter().map(|&i| sorted[i]).collect();

    let prepped = prep(&train, config.e_start, config.e_max)?;
    let opts = MinimizeOptions {
        max_iterations: config.max_iterations,
        grad_tol: config.convergence_tol,
        history: 10,
    };

    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    for (si, start) in config.starts.iter().enumerate() {
        let mut f = |theta: &[f64]| objective_and_grad(theta, &prepped, config.huber_delta);
        let r = minimize(&mut f, start, &opts);
        let better = match &best {
            None => r.objective.is_finite(),
            Some((obj, _, _)) => r.objective < *obj,
        };
        if better {
            best = Some((r.objective, si, r.x));
        }
    }
    let (objective, start_index, theta) =
        best.ok_or_else(|| Error::Fit("no start produced a finite objective".into()))?;
    let params = params_from_theta(&theta, config.e_start, config.e_max);
    let (r_squared, rmse_train) = evaluate(&params, &train)?;
    let (_, rmse_holdout) = evaluate(&params, &holdout)?;
    Ok(FitReport {
        params,
        r_squared,
        rmse_train,
        rmse_holdout,
        objective,
        start_index,
    })
}

/// Cartesian grid of observations generated from known parameters, with
/// optional multiplicative log-normal noise.
pub fn generate_observations(
    p: &ScalingLawParams,
    n_acts: &[f64],
    es: &[u32],
    ds: &[f64],
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<Observation>> {
    let mut rng: ChaCha8Rng = substream(seed, "scaling-law/synthetic");
    let mut out = Vec::with_capacity(n_acts.len() * es.len() * ds.len());
    for &n in n_acts {
        for &e in es {
            for &d in ds {
                let clean = predict_loss(p, n, e, d)?;
                let loss = if noise_sigma > 0.0 {
                    clean * (noise_sigma * next_normal(&mut rng)).exp()
                } else {
                    clean
                };
                out.push(Observation { n_act: n, e, d, loss });
            }
        }
    }
    Ok(out)
}

/// Parses `n_act,e,d,loss` lines. `#` starts a comment; a leading header
/// line is skipped.
pub fn parse_observations(text: &str) -> Result<Vec<Observation>> {
    let mut out = Vec::new();
    let mut first_data_line = true;
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse(format!(
                "line {}: expected 4 comma-separated fields, got {}",
                ln + 1,
                fields.len()
            )));
        }
        let n_act = fields[0].parse::<f64>();
        let e = fields[1].parse::<u32>();
        let d = fields[2].parse::<f64>();
        let loss = fields[3].parse::<f64>();
        match (n_act, e, d, loss) {
            (Ok(n_act), Ok(e), Ok(d), Ok(loss)) => {
                let o = Observation { n_act, e, d, loss };
                o.validate()?;
                out.push(o);
            }
            _ if first_data_line => {
                // Header line.
            }
            _ => {
                return Err(Error::Parse(format!(
                    "line {}: unparseable observation {line:?}",
                    ln + 1
                )));
            }
        }
        first_data_line = false;
    }
    Ok(out)
}

pub fn format_observations(obs: &[Observation]) -> String {
    let mut s = String::from("n_act,e,d,loss\n");
    for o in obs {
        s.push_str(&format!("{},{},{},{}\n", o.n_act, o.e, o.d, o.loss));
    }
    s
}

pub fn format_fit_params(p: &ScalingLawParams) -> String {
    format!(
        "a={}\nb={}\nc={}\nalpha={}\nbeta={}\ngamma={}\nzeta={}\ndelta={}\nomega={}\ne_start={}\ne_max={}\n",
        p.a, p.b, p.c, p.alpha, p.beta, p.gamma, p.zeta, p.delta, p.omega, p.e_start, p.e_max
    )
}

pub fn format_fit_report(r: &FitReport) -> String {
    format!(
        "{}r_squared={}\nrmse_train={}\nrmse_holdout={}\nobjective={}\nstart_index={}\n",
        format_fit_params(&r.params),
        r.r_squared,
        r.rmse_train,
        r.rmse_holdout,
        r.objective,
        r.start_index
    )
}

/// Reads `key=value` lines; unknown keys are ignored so a full fit-report
/// document parses as a parameter file.
pub fn parse_fit_params(text: &str) -> Result<ScalingLawParams> {
    let mut get = std::collections::HashMap::new();
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("bad value for {k}: {e}")))?;
            get.insert(k.trim().to_string(), v);
        }
    }
    let need = |k: &str| -> Result<f64> {
        get.get(k)
            .copied()
            .ok_or_else(|| Error::Parse(format!("missing parameter {k}")))
    };
    Ok(ScalingLawParams {
        a: need("a")?,
        b: need("b")?,
        c: need("c")?,
        alpha: need("alpha")?,
        beta: need("beta")?,
        gamma: need("gamma")?,
        zeta: need("zeta")?,
        delta: need("delta")?,
        omega: need("omega")?,
        e_start: need("e_start")?,
        e_max: need("e_max")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth() -> ScalingLawParams {
        ScalingLawParams {
            a: 50.0,
            b: 100.0,
            c: 0.8,
            alpha: -0.30,
            beta: -0.28,
            gamma: -0.010,
            zeta: -0.015,
            delta: 0.03,
            omega: 0.05,
            e_start: DEFAULT_E_START,
            e_max: DEFAULT_E_MAX,
        }
    }

    fn grid() -> (Vec<f64>, Vec<u32>, Vec<f64>) {
        (
            vec![1e7, 6e7, 4e8, 1e9],
            vec![1, 2, 8, 32, 128],
            vec![3e8, 5e9, 8e10],
        )
    }

    #[test]
    fn ehat_matches_defining_identity() {
        let eh = ehat(8, 1.0, 256.0).unwrap();
        assert!((eh - 7.7613).abs() < 5e-4, "{eh}");
        // Direct identity check.
        let k = 1.0 / (1.0 - 1.0 / 256.0);
        assert!((1.0 / eh - (1.0 / (7.0 + k) + 1.0 / 256.0)).abs() < 1e-15);
        // At E=1 the transform returns the lower anchor.
        assert!((ehat(1, 1.0, 256.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((ehat(1, 2.0, 64.0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ehat_degenerates_to_identity_for_huge_e_max() {
        for e in [1u32, 2, 8, 100, 512, 1000] {
            let eh = ehat(e, 1.0, 1e12).unwrap();
            assert!((eh - e as f64).abs() / e as f64 <= 1e-6, "E={e}: {eh}");
        }
    }

    #[test]
    fn ehat_is_monotone_and_bounded() {
        let mut prev = 0.0;
        for e in 1..=512u32 {
            let eh = ehat(e, 1.0, 256.0).unwrap();
            assert!(eh > prev, "not increasing at E={e}");
            assert!(eh < 256.0);
            prev = eh;
        }
        assert!(ehat(8, 256.0, 256.0).is_err());
        assert!(ehat(8, 300.0, 256.0).is_err());
        assert!(ehat(0, 1.0, 256.0).is_err());
    }

    #[test]
    fn predict_floor_only_and_hand_case() {
        let mut p = truth();
        p.a = 0.0;
        p.b = 0.0;
        for (n, e, d) in [(1e6, 1u32, 1e9), (5e8, 64, 2e11)] {
            assert_eq!(predict_loss(&p, n, e, d).unwrap(), p.c);
        }
        let hand = ScalingLawParams {
            a: 1.0,
            b: 0.0,
            c: 1.0,
            alpha: -0.5,
            beta: -0.3,
            gamma: 0.0,
            zeta: 0.0,
            delta: 0.0,
            omega: 0.0,
            e_start: 1.0,
            e_max: 512.0,
        };
        let l = predict_loss(&hand, 4.0, 16, 1e9).unwrap();
        assert!((l - 1.5).abs() < 1e-12, "{l}");
        assert!(predict_loss(&hand, -1.0, 2, 1e9).is_err());
        assert!(predict_loss(&hand, 1.0, 2, 0.0).is_err());
    }

    #[test]
    fn zero_slopes_reduce_to_expert_free_form() {
        let mut p = truth();
        p.gamma = 0.0;
        p.zeta = 0.0;
        p.delta = 0.0;
        p.omega = 0.0;
        let (n, d) = (3e8f64, 7e9f64);
        let want = p.a * n.powf(p.alpha) + p.b * d.powf(p.beta) + p.c;
        for e in [1u32, 4, 64, 256] {
            let l = predict_loss(&p, n, e, d).unwrap();
            assert!((l - want).abs() < 1e-12, "E={e}: {l} vs {want}");
        }
    }

    #[test]
    fn huber_branches_and_continuity() {
        assert_eq!(huber(0.0, 0.01), 0.0);
        assert!((huber(0.005, 0.01) - 1.25e-5).abs() < 1e-20);
        assert!((huber(0.02, 0.01) - 1.5e-4).abs() < 1e-19);
        assert!((huber(-0.02, 0.01) - 1.5e-4).abs() < 1e-19);
        let at = huber(0.01, 0.01);
        let just_out = huber(0.01 + 1e-12, 0.01);
        assert!((at - 5e-5).abs() < 1e-18);
        assert!((just_out - at).abs() < 1e-13);
    }

    #[test]
    fn evaluate_known_cases() {
        let obs = generate_observations(&truth(), &grid().0, &grid().1, &grid().2, 0.0, 0)
            .unwrap();
        let (r2, rmse) = evaluate(&truth(), &obs).unwrap();
        assert_eq!(r2, 1.0);
        assert_eq!(rmse, 0.0);

        // Constant predictor at the observed mean has R^2 = 0.
        let two = [
            Observation { n_act: 1e8, e: 2, d: 1e9, loss: 1.0 },
            Observation { n_act: 2e8, e: 4, d: 2e9, loss: 2.0 },
        ];
        let mut flat = truth();
        flat.a = 0.0;
        flat.b = 0.0;
        flat.c = 1.5;
        let (r2, _) = evaluate(&flat, &two).unwrap();
        assert!(r2.abs() < 1e-12);

        let (_, rmse) = r_squared_rmse(&[1.0, 1.8], &[1.0, 2.0]);
        assert!((rmse - 0.02f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn predictions_decrease_in_n_and_d() {
        let p = truth();
        for e in [1u32, 8, 128] {
            let (mu, nu) = p.exponents(e).unwrap();
            assert!(mu < 0.0 && nu < 0.0);
            assert!(
                predict_loss(&p, 2e8, e, 1e10).unwrap()
                    < predict_loss(&p, 1e8, e, 1e10).unwrap()
            );
            assert!(
                predict_loss(&p, 1e8, e, 2e10).unwrap()
                    < predict_loss(&p, 1e8, e, 1e10).unwrap()
            );
        }
    }

    #[test]
    fn noiseless_fit_reproduces_the_generating_law() {
        let (ns, es, ds) = grid();
        let obs = generate_observations(&truth(), &ns, &es, &ds, 0.0, 0).unwrap();
        let report = fit(&obs, &FitConfig::desk_default(7)).unwrap();
        assert!(report.rmse_train <= 1e-6, "train rmse {}", report.rmse_train);
        assert!(report.rmse_holdout <= 1e-6, "holdout rmse {}", report.rmse_holdout);
        assert!(report.r_squared > 1.0 - 1e-9);
    }

    #[test]
    fn noisy_fit_meets_quality_targets() {
        let (ns, es, ds) = grid();
        let obs = generate_observations(&truth(), &ns, &es, &ds, 0.005, 11).unwrap();
        let report = fit(&obs, &FitConfig::desk_default(7)).unwrap();
        assert!(report.rmse_holdout <= 0.01, "holdout rmse {}", report.rmse_holdout);
        assert!(report.r_squared >= 0.99, "r2 {}", report.r_squared);
    }

    fn small_config() -> FitConfig {
        let mut c = FitConfig::desk_default(3);
        c.starts.truncate(24);
        c.max_iterations = 120;
        c
    }

    #[test]
    fn fit_is_deterministic_and_order_invariant() {
        let (ns, es, ds) = grid();
        let obs = generate_observations(&truth(), &ns, &es, &ds, 0.005, 5).unwrap();
        let cfg = small_config();
        let a = fit(&obs, &cfg).unwrap();
        let b = fit(&obs, &cfg).unwrap();
        let mut rev = obs.clone();
        rev.reverse();
        let c = fit(&rev, &cfg).unwrap();
        for other in [&b, &c] {
            assert_eq!(a.objective.to_bits(), other.objective.to_bits());
            assert_eq!(a.start_index, other.start_index);
            assert_eq!(a.params.a.to_bits(), other.params.a.to_bits());
            assert_eq!(a.params.omega.to_bits(), other.params.omega.to_bits());
            assert_eq!(a.rmse_holdout.to_bits(), other.rmse_holdout.to_bits());
        }
    }

    #[test]
    fn degenerate_data_is_rejected() {
        let (ns, _, ds) = grid();
        let single_e = generate_observations(&truth(), &ns, &[8], &ds, 0.0, 0).unwrap();
        assert!(fit(&single_e, &small_config()).is_err());
        let single_d =
            generate_observations(&truth(), &ns, &[1, 2, 4, 8, 16], &[1e9], 0.0, 0).unwrap();
        assert!(fit(&single_d, &small_config()).is_err());
        let few = &single_d[..4];
        assert!(fit(few, &small_config()).is_err());
    }

    #[test]
    fn objective_matches_direct_recomputation() {
        let (ns, es, ds) = grid();
        let obs = generate_observations(&truth(), &ns, &es, &ds, 0.005, 9).unwrap();
        let prepped = prep(&obs, DEFAULT_E_START, DEFAULT_E_MAX).unwrap();
        let theta = [3.9, 4.6, softplus_inv(0.8), -0.3, -0.28, -0.01, -0.015, 0.03, 0.05];
        let (obj, _) = objective_and_grad(&theta, &prepped, 0.01);
        let p = params_from_theta(&theta, DEFAULT_E_START, DEFAULT_E_MAX);
        let mut direct = 0.0;
        for o in &obs {
            let pred = predict_loss(&p, o.n_act, o.e, o.d).unwrap();
            direct += huber(pred.ln() - o.loss.ln(), 0.01);
        }
        assert!((obj - direct).abs() < 1e-12, "{obj} vs {direct}");
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let (ns, es, ds) = grid();
        let obs = generate_observations(&truth(), &ns, &es, &ds, 0.01, 13).unwrap();
        let prepped = prep(&obs, DEFAULT_E_START, DEFAULT_E_MAX).unwrap();
        let theta = [3.5, 4.2, 0.3, -0.25, -0.33, 0.01, -0.02, 0.04, 0.02];
        let report = crate::numerics::grad_check(
            "fit objective",
            &theta,
            1e-6,
            |t| objective_and_grad(t, &prepped, 0.01).0,
            |t| objective_and_grad(t, &prepped, 0.01).1,
        );
        assert!(report.passed, "{}", report.summary());
    }

    #[test]
    fn start_grid_is_capped_and_seeded() {
        let g0 = default_start_grid(0);
        let g1 = default_start_grid(0);
        let g2 = default_start_grid(1);
        assert_eq!(g0.len(), 256);
        assert_eq!(g0, g1);
        assert_ne!(g0, g2);
    }

    #[test]
    fn observation_text_round_trips() {
        let (ns, es, ds) = grid();
        let obs = generate_observations(&truth(), &ns[..2], &es[..3], &ds[..2], 0.003, 2)
            .unwrap();
        let text = format_observations(&obs);
        let back = parse_observations(&text).unwrap();
        assert_eq!(obs.len(), back.len());
        for (a, b) in obs.iter().zip(&back) {
            assert_eq!(a.n_act.to_bits(), b.n_act.to_bits());
            assert_eq!(a.e, b.e);
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
        let commented = format!("# corpus sweep\n{text}\n# trailing note\n");
        assert_eq!(parse_observations(&commented).unwrap().len(), obs.len());
        assert!(parse_observations("1,2,3\n").is_err());
        assert!(parse_observations("n_act,e,d,loss\n1e8,0,1e9,2.0\n").is_err());
    }

    #[test]
    fn fit_report_text_round_trips() {
        let r = FitReport {
            params: truth(),
            r_squared: 0.9957,
            rmse_train: 0.0085,
            rmse_holdout: 0.0092,
            objective: 1.25e-4,
            start_index: 17,
        };
        let text = format_fit_report(&r);
        let p = parse_fit_params(&text).unwrap();
        assert_eq!(p.a.to_bits(), truth().a.to_bits());
        assert_eq!(p.zeta.to_bits(), truth().zeta.to_bits());
        assert_eq!(p.e_max.to_bits(), truth().e_max.to_bits());
        assert!(parse_fit_params("a=1\nb=2\n").is_err());
    }
}
