//! Central finite-difference gradient verification.
//!
//! Every analytic gradient in the crate is held to the same contract: at a
//! point where the function is differentiable, the relative error against a
//! central difference with scaled step must stay at or below the threshold.

/// Outcome of checking one gradient at one point.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    /// Largest relative error over the checked coordinates.
    pub max_rel_err: f64,
    /// Coordinate index attaining `max_rel_err`.
    pub worst_coord: usize,
    /// Analytic and numeric values at the worst coordinate.
    pub worst_pair: (f64, f64),
    pub threshold: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        format!(
            "{}: max rel err {:.3e} at coord {} (analytic {:.6e}, numeric {:.6e}), {} coords, threshold {:.1e} -> {}",
            self.op,
            self.max_rel_err,
            self.worst_coord,
            self.worst_pair.0,
            self.worst_pair.1,
            self.coords_checked,
            self.threshold,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

/// Checks an analytic gradient of a scalar-valued function against central
/// finite differences over every coordinate of `point`.
pub fn grad_check<F, G>(
    op: &str,
    point: &[f64],
    threshold: f64,
    f: F,
    analytic_grad: G,
) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
    G: FnOnce(&[f64]) -> Vec<f64>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(op, point, threshold, &coords, f, analytic_grad)
}

/// Same contract as [`grad_check`] restricted to a subset of coordinates, for
/// functions whose full parameter vector is too large to difference entirely.
pub fn grad_check_coords<F, G>(
    op: &str,
    point: &[f64],
    threshold: f64,
    coords: &[usize],
    f: F,
    analytic_grad: G,
) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
    G: FnOnce(&[f64]) -> Vec<f64>,
{
    let grad = analytic_grad(point);
    assert_eq!(
        grad.len(),
        point.len(),
        "{op}: analytic gradient length mismatch"
    );
    let mut work = point.to_vec();
    let mut max_rel = 0.0;
    let mut worst = 0usize;
    let mut worst_pair = (0.0, 0.0);
    for &i in coords {
        let x0 = work[i];
        let h = 1e-5 * x0.abs().max(1.0);
        work[i] = x0 + h;
        let fp = f(&work);
        work[i] = x0 - h;
        let fm = f(&work);
        work[i] = x0;
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grad[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
            worst_pair = (analytic, numeric);
        }
    }
    GradCheckReport {
        op: op.to_string(),
        max_rel_err: max_rel,
        worst_coord: worst,
        worst_pair,
        threshold,
        coords_checked: coords.len(),
        passed: max_rel <= threshold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_correct_gradient_of_smooth_function() {
        // f(x) = sum sin(x_i) * x_i^2
        let point: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.8).collect();
        let f = |x: &[f64]| x.iter().map(|v| v.sin() * v * v).sum::<f64>();
        let g = |x: &[f64]| {
            x.iter()
                .map(|v| v.cos() * v * v + 2.0 * v * v.sin())
                .collect::<Vec<_>>()
        };
        let report = grad_check("smooth", &point, 1e-4, f, g);
        assert!(report.passed, "{}", report.summary());
        assert!(report.max_rel_err < 1e-7);
    }

    #[test]
    fn rejects_wrong_gradient() {
        let point = vec![0.5, -0.25];
        let f = |x: &[f64]| x[0] * x[0] + x[1];
        let g = |x: &[f64]| vec![2.0 * x[0] + 0.1, 1.0];
        let report = grad_check("broken", &point, 1e-4, f, g);
        assert!(!report.passed, "{}", report.summary());
        assert_eq!(report.worst_coord, 0);
    }

    #[test]
    fn subset_check_only_touches_requested_coords() {
        let point = vec![1.0, 2.0, 3.0, 4.0];
        let f = |x: &[f64]| x.iter().product::<f64>();
        let g = |x: &[f64]| {
            let p: f64 = x.iter().product();
            x.iter().map(|v| p / v).collect::<Vec<_>>()
        };
        let report = grad_check_coords("subset", &point, 1e-4, &[1, 3], f, g);
        assert!(report.passed, "{}", report.summary());
        assert_eq!(report.coords_checked, 2);
    }

    #[test]
    fn step_scales_with_coordinate_magnitude() {
        // A function whose curvature would break a fixed small step at large x.
        let point = vec![1e6];
        let f = |x: &[f64]| x[0].powi(2) / 1e6;
        let g = |x: &[f64]| vec![2.0 * x[0] / 1e6];
        let report = grad_check("scaled-step", &point, 1e-4, f, g);
        assert!(report.passed, "{}", report.summary());
    }
}
