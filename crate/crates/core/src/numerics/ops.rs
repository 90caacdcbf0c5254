//! Differentiable operations with hand-written vector-Jacobian products.
//!
//! Conventions: 2-d inputs are treated row-wise (softmax, rms_norm,
//! cross-entropy operate per row), all reductions run in index order, and
//! every `_vjp` takes whatever forward cache it needs explicitly.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Row-wise softmax with max subtraction.
pub fn softmax(x: &Tensor) -> Tensor {
    let (rows, cols) = row_view(x);
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// VJP of softmax given the forward output `y`.
pub fn softmax_vjp(y: &Tensor, grad_out: &Tensor) -> Tensor {
    assert_eq!(y.shape(), grad_out.shape());
    let (rows, cols) = row_view(y);
    let mut gx = y.zeros_like();
    for r in 0..rows {
        let yr = &y.data()[r * cols..(r + 1) * cols];
        let gr = &grad_out.data()[r * cols..(r + 1) * cols];
        let mut dot = 0.0;
        for j in 0..cols {
            dot += yr[j] * gr[j];
        }
        let out = &mut gx.data_mut()[r * cols..(r + 1) * cols];
        for j in 0..cols {
            out[j] = yr[j] * (gr[j] - dot);
        }
    }
    gx
}

/// Elementwise logistic function.
pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = sigmoid_scalar(*v);
    }
    out
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    // Split by sign so the exponential never overflows.
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// VJP of sigmoid given the forward output `y`.
pub fn sigmoid_vjp(y: &Tensor, grad_out: &Tensor) -> Tensor {
    assert_eq!(y.shape(), grad_out.shape());
    let mut gx = y.zeros_like();
    for ((g, y), out) in grad_out
        .data()
        .iter()
        .zip(y.data())
        .zip(gx.data_mut())
    {
        *out = g * y * (1.0 - y);
    }
    gx
}

/// Row-wise RMS normalization with learned gain:
/// `y = x / sqrt(mean(x^2) + eps) * gain`.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    let (rows, cols) = row_view(x);
    if gain.numel() != cols {
        return Err(Error::Shape(format!(
            "rms_norm gain has {} entries for width {cols}",
            gain.numel()
        )));
    }
    let g = gain.data();
    let mut out = x.clone();
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        let mut ms = 0.0;
        for v in row.iter() {
            ms += v * v;
        }
        let inv = 1.0 / (ms / cols as f64 + eps).sqrt();
        for (v, gj) in row.iter_mut().zip(g) {
            *v *= inv * gj;
        }
    }
    Ok(out)
}

/// VJP of rms_norm for the input and the gain.
pub fn rms_norm_vjp(
    x: &Tensor,
    gain: &Tensor,
    eps: f64,
    grad_out: &Tensor,
) -> (Tensor, Tensor) {
    assert_eq!(x.shape(), grad_out.shape());
    let (rows, cols) = row_view(x);
    let g = gain.data();
    let mut gx = x.zeros_like();
    let mut ggain = Tensor::zeros(&[cols]);
    let d = cols as f64;
    for r in 0..rows {
        let xr = &x.data()[r * cols..(r + 1) * cols];
        let gr = &grad_out.data()[r * cols..(r + 1) * cols];
        let mut ms = 0.0;
        for v in xr {
            ms += v * v;
        }
        let rms = (ms / d + eps).sqrt();
        let inv = 1.0 / rms;
        // dot = sum_i grad_i * gain_i * x_i
        let mut dot = 0.0;
        for j in 0..cols {
            dot += gr[j] * g[j] * xr[j];
        }
        let inv3 = inv * inv * inv;
        let out = &mut gx.data_mut()[r * cols..(r + 1) * cols];
        for j in 0..cols {
            out[j] = gr[j] * g[j] * inv - xr[j] * dot * inv3 / d;
        }
        let gg = ggain.data_mut();
        for j in 0..cols {
            gg[j] += gr[j] * xr[j] * inv;
        }
    }
    (gx, ggain)
}

/// Rotary position embedding over `[seq, heads, d_head]`, adjacent-pair
/// convention: pair `i` of position `p` rotates by `p * base^(-2i/d_head)`.
pub fn rope_apply(x: &Tensor, base: f64) -> Result<Tensor> {
    rope_rotate(x, base, 1.0)
}

/// VJP of rope_apply; rotation is orthogonal so the adjoint rotates by the
/// negated angle.
pub fn rope_vjp(grad_out: &Tensor, base: f64) -> Result<Tensor> {
    rope_rotate(grad_out, base, -1.0)
}

fn rope_rotate(x: &Tensor, base: f64, sign: f64) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(Error::Shape("rope expects [seq, heads, d_head]".into()));
    }
    let (seq, heads, dh) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if dh % 2 != 0 {
        return Err(Error::Shape("rope head dim must be even".into()));
    }
    let mut out = x.clone();
    let half = dh / 2;
    // Angle increments per pair index, shared across positions.
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / dh as f64))
        .collect();
    for p in 0..seq {
        for h in 0..heads {
            let off = (p * heads + h) * dh;
            let row = &mut out.data_mut()[off..off + dh];
            for i in 0..half {
                let theta = sign * p as f64 * freqs[i];
                let (s, c) = theta.sin_cos();
                let x0 = row[2 * i];
                let x1 = row[2 * i + 1];
                row[2 * i] = c * x0 - s * x1;
                row[2 * i + 1] = s * x0 + c * x1;
            }
        }
    }
    Ok(out)
}

/// Gated feed-forward on a single vector:
/// `w_down . (silu(w_gate . x) * (w_up . x))`.
pub fn swiglu(x: &Tensor, w_gate: &Tensor, w_up: &Tensor, w_down: &Tensor) -> Result<Tensor> {
    let xb = x.clone().reshaped(vec![1, x.numel()])?;
    let (y, _) = swiglu_batch(&xb, w_gate, w_up, w_down)?;
    y.reshaped(vec![w_down.shape()[0]])
}

/// Forward cache for the batched gated feed-forward.
pub struct SwigluCache {
    /// Pre-activation of the gate branch, `[n, hidden]`.
    pub pre_gate: Tensor,
    /// Pre-activation of the up branch, `[n, hidden]`.
    pub pre_up: Tensor,
    /// Gated hidden state fed to the down projection, `[n, hidden]`.
    pub hidden: Tensor,
}

/// Batched gated feed-forward over rows of `x: [n, d_in]`. Weights are stored
/// `[out, in]`, matching how linear layers hold them everywhere else.
pub fn swiglu_batch(
    x: &Tensor,
    w_gate: &Tensor,
    w_up: &Tensor,
    w_down: &Tensor,
) -> Result<(Tensor, SwigluCache)> {
    let pre_gate = linear(x, w_gate)?;
    let pre_up = linear(x, w_up)?;
    let mut hidden = pre_up.clone();
    for (h, a) in hidden.data_mut().iter_mut().zip(pre_gate.data()) {
        *h *= silu_scalar(*a);
    }
    let y = linear(&hidden, w_down)?;
    Ok((
        y,
        SwigluCache {
            pre_gate,
            pre_up,
            hidden,
        },
    ))
}

/// VJP of `swiglu_batch`: returns `(grad_x, grad_w_gate, grad_w_up, grad_w_down)`.
pub fn swiglu_batch_vjp(
    x: &Tensor,
    w_gate: &Tensor,
    w_up: &Tensor,
    w_down: &Tensor,
    cache: &SwigluCache,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let (grad_hidden, grad_w_down) = linear_vjp(&cache.hidden, w_down, grad_out)?;
    let n = grad_hidden.numel();
    let mut grad_pre_gate = Tensor::zeros(grad_hidden.shape());
    let mut grad_pre_up = Tensor::zeros(grad_hidden.shape());
    {
        let gh = grad_hidden.data();
        let a = cache.pre_gate.data();
        let u = cache.pre_up.data();
        let gpg = grad_pre_gate.data_mut();
        let gpu = grad_pre_up.data_mut();
        for i in 0..n {
            let s = sigmoid_scalar(a[i]);
            let silu = a[i] * s;
            // d silu / da = s * (1 + a * (1 - s))
            gpg[i] = gh[i] * u[i] * s * (1.0 + a[i] * (1.0 - s));
            gpu[i] = gh[i] * silu;
        }
    }
    let (gx_gate, grad_w_gate) = linear_vjp(x, w_gate, &grad_pre_gate)?;
    let (gx_up, grad_w_up) = linear_vjp(x, w_up, &grad_pre_up)?;
    let mut grad_x = gx_gate;
    for (a, b) in grad_x.data_mut().iter_mut().zip(gx_up.data()) {
        *a += b;
    }
    Ok((grad_x, grad_w_gate, grad_w_up, grad_w_down))
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

/// `y = x . w^T` for `x: [n, d_in]`, `w: [d_out, d_in]`.
pub fn linear(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[1] {
        return Err(Error::Shape(format!(
            "linear shapes {:?} x {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let wt = super::tensor::transpose(w);
    super::tensor::matmul(x, &wt)
}

/// VJP of `linear`: returns `(grad_x, grad_w)`.
pub fn linear_vjp(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    // grad_x = g . w ; grad_w = g^T . x
    let grad_x = super::tensor::matmul(grad_out, w)?;
    let gt = super::tensor::transpose(grad_out);
    let grad_w = super::tensor::matmul(&gt, x)?;
    Ok((grad_x, grad_w))
}

/// Mean cross-entropy between rows of `logits: [n, vocab]` and integer
/// `targets`, computed via log-sum-exp with max subtraction.
pub fn cross_entropy_logits(logits: &Tensor, targets: &[u32]) -> Result<f64> {
    let (rows, cols) = row_view(logits);
    if targets.len() != rows {
        return Err(Error::Shape(format!(
            "{} targets for {} logit rows",
            targets.len(),
            rows
        )));
    }
    let mut total = 0.0;
    for r in 0..rows {
        let t = targets[r] as usize;
        if t >= cols {
            return Err(Error::Data(format!("target {t} out of vocab {cols}")));
        }
        let row = &logits.data()[r * cols..(r + 1) * cols];
        total += row_lse(row) - row[t];
    }
    Ok(total / rows as f64)
}

/// VJP of `cross_entropy_logits` given the upstream scalar gradient:
/// `(softmax(row) - onehot(target)) * grad / n` per row.
pub fn cross_entropy_logits_vjp(logits: &Tensor, targets: &[u32], grad: f64) -> Tensor {
    let (rows, cols) = row_view(logits);
    assert_eq!(targets.len(), rows);
    let mut out = softmax(logits);
    let scale = grad / rows as f64;
    for r in 0..rows {
        let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
        row[targets[r] as usize] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    out
}

fn row_lse(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in row {
        sum += (v - m).exp();
    }
    m + sum.ln()
}

/// Mean cross-entropy plus the row-wise softmax of the logits, sharing one
/// exponentiation pass. The loss equals `cross_entropy_logits` and the
/// probabilities equal `softmax` exactly, operation for operation.
pub fn cross_entropy_probs(logits: &Tensor, targets: &[u32]) -> Result<(f64, Tensor)> {
    let (rows, cols) = row_view(logits);
    if targets.len() != rows {
        return Err(Error::Shape(format!(
            "{} targets for {} logit rows",
            targets.len(),
            rows
        )));
    }
    let mut probs = logits.clone();
    let mut total = 0.0;
    for r in 0..rows {
        let t = targets[r] as usize;
        if t >= cols {
            return Err(Error::Data(format!("target {t} out of vocab {cols}")));
        }
        let row = &mut probs.data_mut()[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logit_t = row[t];
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
        total += (m + sum.ln()) - logit_t;
    }
    Ok((total / rows as f64, probs))
}

/// VJP of the mean cross-entropy given the probabilities cached by
/// `cross_entropy_probs`; consumes them in place.
pub fn cross_entropy_probs_vjp(mut probs: Tensor, targets: &[u32], grad: f64) -> Tensor {
    let (rows, cols) = row_view(&probs);
    assert_eq!(targets.len(), rows);
    let scale = grad / rows as f64;
    for r in 0..rows {
        let row = &mut probs.data_mut()[r * cols..(r + 1) * cols];
        row[targets[r] as usize] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    probs
}

/// Treats a 1-d tensor as a single row, 2-d as [rows, cols].
fn row_view(x: &Tensor) -> (usize, usize) {
    match x.ndim() {
        1 => (1, x.numel()),
        2 => (x.shape()[0], x.shape()[1]),
        _ => panic!("row-wise op expects a 1-d or 2-d tensor, got {:?}", x.shape()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    fn assert_close(got: f64, want: f64, tol: f64, what: &str) {
        assert!(
            (got - want).abs() <= tol,
            "{what}: got {got}, want {want}"
        );
    }

    #[test]
    fn softmax_known_values_and_row_sums() {
        let x = Tensor::from_vec(vec![0.0, 3f64.ln()]);
        let y = softmax(&x);
        assert_close(y.data()[0], 0.25, 1e-15, "softmax[0]");
        assert_close(y.data()[1], 0.75, 1e-15, "softmax[1]");

        let x = Tensor::from_vec(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]);
        let y = softmax(&x);
        for (got, want) in y.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 0.5]) {
            assert_close(*got, want, 1e-15, "softmax ratio");
        }

        let x = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64).sin() * 30.0).collect()).unwrap();
        let y = softmax(&x);
        for r in 0..3 {
            let s: f64 = y.data()[r * 4..(r + 1) * 4].iter().sum();
            assert_close(s, 1.0, 1e-12, "row sum");
        }
    }

    #[test]
    fn softmax_survives_extreme_logits() {
        let x = Tensor::from_vec(vec![1e4, -1e4, 0.0]);
        let y = softmax(&x);
        assert!(y.is_finite());
        assert_close(y.data()[0], 1.0, 1e-12, "saturated softmax");
    }

    #[test]
    fn sigmoid_known_values() {
        let x = Tensor::from_vec(vec![0.0, 3f64.ln(), -(3f64.ln()), 1.0]);
        let y = sigmoid(&x);
        assert_close(y.data()[0], 0.5, 1e-15, "sigmoid(0)");
        assert_close(y.data()[1], 0.75, 1e-15, "sigmoid(ln 3)");
        assert_close(y.data()[2], 0.25, 1e-15, "sigmoid(-ln 3)");
        assert_close(y.data()[3], 0.7310585786300049, 1e-15, "sigmoid(1)");
        // Saturation stays finite and ordered.
        let y = sigmoid(&Tensor::from_vec(vec![-745.0, 745.0]));
        assert!(y.is_finite());
        assert!(y.data()[0] < 1e-300 && y.data()[1] == 1.0);
    }

    #[test]
    fn rms_norm_known_vector() {
        let x = Tensor::from_vec(vec![3.0, 4.0]);
        let gain = Tensor::from_vec(vec![1.0, 1.0]);
        let y = rms_norm(&x, &gain, 0.0).unwrap();
        // rms of [3,4] is sqrt(12.5)
        assert_close(y.data()[0], 3.0 / 12.5f64.sqrt(), 1e-15, "rms_norm[0]");
        assert_close(y.data()[1], 4.0 / 12.5f64.sqrt(), 1e-15, "rms_norm[1]");
        assert_close(y.data()[0], 0.84853, 1e-5, "rms_norm[0] decimal");
        assert_close(y.data()[1], 1.13137, 1e-5, "rms_norm[1] decimal");
    }

    #[test]
    fn rms_norm_output_has_unit_rms() {
        let x = Tensor::new(vec![4, 8], (0..32).map(|i| (i as f64 * 0.7).cos() * 5.0).collect())
            .unwrap();
        let gain = Tensor::from_vec(vec![1.0; 8]);
        let y = rms_norm(&x, &gain, 0.0).unwrap();
        for r in 0..4 {
            let row = &y.data()[r * 8..(r + 1) * 8];
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt();
            assert_close(rms, 1.0, 1e-10, "unit rms");
        }
    }

    #[test]
    fn rope_rotates_first_pair_by_position_angle() {
        let x = Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let y = rope_apply(&x, 100_000.0).unwrap();
        // Position 0 is untouched; position 1 pair 0 rotates by exactly 1 rad.
        assert_close(y.data()[0], 1.0, 1e-15, "pos0 x");
        assert_close(y.data()[1], 0.0, 1e-15, "pos0 y");
        assert_close(y.data()[2], 1f64.cos(), 1e-15, "pos1 cos");
        assert_close(y.data()[3], 1f64.sin(), 1e-15, "pos1 sin");
    }

    #[test]
    fn rope_preserves_norms_and_inverts() {
        let x = Tensor::new(
            vec![5, 2, 8],
            (0..80).map(|i| ((i * 13 % 17) as f64 - 8.0) * 0.3).collect(),
        )
        .unwrap();
        let y = rope_apply(&x, 1e5).unwrap();
        for p in 0..5 {
            for h in 0..2 {
                let off = (p * 2 + h) * 8;
                let nx: f64 = x.data()[off..off + 8].iter().map(|v| v * v).sum();
                let ny: f64 = y.data()[off..off + 8].iter().map(|v| v * v).sum();
                assert_close(ny, nx, 1e-10, "rope norm");
            }
        }
        let back = rope_vjp(&y, 1e5).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert_close(*a, *b, 1e-12, "rope inverse");
        }
    }

    #[test]
    fn swiglu_unit_example() {
        // 1-wide everything with unit weights collapses to silu(1).
        let x = Tensor::from_vec(vec![1.0]);
        let w = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let y = swiglu(&x, &w, &w, &w).unwrap();
        assert_close(y.data()[0], 0.7310585786300049, 1e-15, "silu(1)");
        assert_close(y.data()[0], 0.73106, 1e-5, "silu(1) decimal");
    }

    #[test]
    fn cross_entropy_known_values() {
        let logits = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let l = cross_entropy_logits(&logits, &[0]).unwrap();
        assert_close(l, 2f64.ln(), 1e-15, "uniform 2-way");

        let logits = Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let l = cross_entropy_logits(&logits, &[0]).unwrap();
        // Probability of class 0 is 0.25.
        assert_close(l, 4f64.ln(), 1e-15, "[0, ln 3] target 0");

        let v = 512;
        let logits = Tensor::zeros(&[3, v]);
        let l = cross_entropy_logits(&logits, &[5, 100, 511]).unwrap();
        assert_close(l, (v as f64).ln(), 1e-12, "uniform vocab");
    }

    #[test]
    fn cross_entropy_rejects_bad_targets() {
        let logits = Tensor::zeros(&[2, 4]);
        assert!(cross_entropy_logits(&logits, &[0, 4]).is_err());
        assert!(cross_entropy_logits(&logits, &[0]).is_err());
    }

    #[test]
    fn cross_entropy_stable_at_huge_logits() {
        let logits = Tensor::new(vec![1, 3], vec![1e5, 0.0, -1e5]).unwrap();
        let l = cross_entropy_logits(&logits, &[0]).unwrap();
        assert!(l.is_finite() && l >= 0.0);
        assert_close(l, 0.0, 1e-12, "confident correct prediction");
    }

    #[test]
    fn linear_matches_manual_product() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 0.5, -1.0, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 3], vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5]).unwrap();
        let y = linear(&x, &w).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        assert_close(y.data()[0], 1.0 - 3.0, 1e-15, "y[0,0]");
        assert_close(y.data()[1], 2.0 + 2.0 + 1.5, 1e-15, "y[0,1]");
    }
}
