//! Limited-memory BFGS minimizer with backtracking line search.
//!
//! Small and self-contained: the fitting problem has nine free parameters,
//! so the two-loop recursion with a short history is plenty.

#[derive(Debug, Clone)]
pub struct MinimizeOptions {
    pub max_iterations: usize,
    /// Stop when the gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Number of (s, y) pairs kept for the two-loop recursion.
    pub history: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            grad_tol: 1e-10,
            history: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Objective value after each accepted step (starting value first).
    pub trace: Vec<f64>,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Minimizes `f` from `x0`. `f` returns the objective and its gradient.
/// Non-finite objectives at the start point yield an infinite-objective
/// result rather than a panic, so multi-start drivers can skip bad starts.
pub fn minimize(
    f: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
    x0: &[f64],
    opts: &MinimizeOptions,
) -> MinimizeResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut gx) = f(&x);
    let mut trace = vec![fx];
    if !fx.is_finite() || gx.iter().any(|g| !g.is_finite()) {
        return MinimizeResult {
            x,
            objective: f64::INFINITY,
            iterations: 0,
            trace,
            converged: false,
        };
    }

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    for iter in 0..opts.max_iterations {
        if inf_norm(&gx) < opts.grad_tol {
            return MinimizeResult {
                x,
                objective: fx,
                iterations: iter,
                trace,
                converged: true,
            };
        }

        // Two-loop recursion for the search direction d = -H g.
        let mut q = gx.clone();
        let k = s_hist.len();
        let mut alphas = vec![0.0; k];
        for i in (0..k).rev() {
            let a = rho_hist[i] * dot(&s_hist[i], &q);
            alphas[i] = a;
            for (qj, yj) in q.iter_mut().zip(&y_hist[i]) {
                *qj -= a * yj;
            }
        }
        if k > 0 {
            let last = k - 1;
            let scale = dot(&s_hist[last], &y_hist[last]) / dot(&y_hist[last], &y_hist[last]);
            if scale.is_finite() && scale > 0.0 {
                for qj in q.iter_mut() {
                    *qj *= scale;
                }
            }
        }
        for i in 0..k {
            let beta = rho_hist[i] * dot(&y_hist[i], &q);
            for (qj, sj) in q.iter_mut().zip(&s_hist[i]) {
                *qj += (alphas[i] - beta) * sj;
            }
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&gx, &d);
        if !(slope < 0.0) || !slope.is_finite() {
            // Not a descent direction; fall back to steepest descent.
            d = gx.iter().map(|v| -v).collect();
            slope = dot(&gx, &d);
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
        }

        // Weak-Wolfe line search by bracketing: shrink on an Armijo
        // failure, grow while the directional derivative stays too
        // negative. Guarantees positive curvature s.y on full acceptance.
        let c1 = 1e-4;
        let c2 = 0.9;
        let mut lo = 0.0f64;
        let mut hi = f64::INFINITY;
        let mut t = 1.0f64;
        let mut accepted = None;
        for _ in 0..60 {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            let (ft, gt) = f(&xt);
            let armijo = ft.is_finite() && ft <= fx + c1 * t * slope;
            if !armijo {
                hi = t;
            } else if gt.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() < c2 * slope {
                // Sufficient decrease but the slope is still steep: the
                // step is too short. Remember it and push further.
                lo = t;
                accepted = Some((xt, ft, gt));
            } else {
                accepted = Some((xt, ft, gt));
                break;
            }
            t = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * t };
            if t > 1e12 {
                break;
            }
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            if !s_hist.is_empty() {
                // The quasi-Newton direction stalled; drop the curvature
                // history and retry from steepest descent.
                s_hist.clear();
                y_hist.clear();
                rho_hist.clear();
                continue;
            }
            // Even steepest descent finds no decrease: converged to the
            // achievable accuracy.
            return MinimizeResult {
                x,
                objective: fx,
                iterations: iter,
                trace,
                converged: inf_norm(&gx) < opts.grad_tol.max(1e-6),
            };
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let curvature_ok = sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt();
        if curvature_ok && sy.is_finite() {
            if s_hist.len() == opts.history {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            rho_hist.push(1.0 / sy);
            s_hist.push(s);
            y_hist.push(y);
        }

        x = x_new;
        fx = f_new;
        gx = g_new;
        trace.push(fx);
        if n == 0 {
            break;
        }
    }

    let converged = inf_norm(&gx) < opts.grad_tol;
    MinimizeResult {
        x,
        objective: fx,
        iterations: opts.max_iterations,
        trace,
        converged,
    }
}
