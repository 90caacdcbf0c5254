//! Dense row-major f64 tensors and the matrix-multiply kernel.
//!
//! The kernel accumulates each output element as a strict serial sum over the
//! inner dimension using fused multiply-add, so results are bit-identical
//! across the scalar, AVX2, and AVX-512 dispatch paths and across any
//! row-block parallel split.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows of a 2-d tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.ndim(), 2, "rows() needs a 2-d tensor");
        self.shape[0]
    }

    /// Columns of a 2-d tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.ndim(), 2, "cols() needs a 2-d tensor");
        self.shape[1]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// `out[r] = a[m x k] . b[k x n]`, row-major, `out` fully overwritten.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(Error::Shape("matmul needs 2-d tensors".into()));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nn(m, k, n, &a.data, &b.data, &mut out.data);
    Ok(out)
}

/// Vector-Jacobian product of `matmul` for both arguments.
pub fn matmul_vjp(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, _) = (a.shape[0], a.shape[1]);
    let (_, n) = (b.shape[0], b.shape[1]);
    if grad_out.shape() != [m, n] {
        return Err(Error::Shape(format!(
            "matmul grad shape {:?}, expected [{m}, {n}]",
            grad_out.shape()
        )));
    }
    // dA = g . B^T, dB = A^T . g
    let bt = transpose(b);
    let at = transpose(a);
    let da = matmul(grad_out, &bt)?;
    let db = matmul(&at, grad_out)?;
    Ok((da, db))
}

/// Out-of-place transpose of a 2-d tensor.
pub fn transpose(a: &Tensor) -> Tensor {
    assert_eq!(a.ndim(), 2, "transpose needs a 2-d tensor");
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = Tensor::zeros(&[n, m]);
    const B: usize = 32;
    let src = &a.data;
    let dst = &mut out.data;
    for i0 in (0..m).step_by(B) {
        for j0 in (0..n).step_by(B) {
            for i in i0..(i0 + B).min(m) {
                for j in j0..(j0 + B).min(n) {
                    dst[j * m + i] = src[i * n + j];
                }
            }
        }
    }
    out
}

/// Multiply-accumulate into an existing buffer: `c += a . b`.
pub fn gemm_nn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    dispatch(m, k, n, a, b, c);
}

/// `c = a . b` into a zeroed buffer.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    c.fill(0.0);
    gemm_nn_acc(m, k, n, a, b, c);
}

fn dispatch(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    // Row-block parallelism writes disjoint slices of c, so the result does
    // not depend on the number of worker threads.
    let flops = 2.0 * m as f64 * k as f64 * n as f64;
    if flops > 4e6 && rayon::current_num_threads() > 1 && m >= 32 {
        let threads = rayon::current_num_threads();
        let rows_per = m.div_ceil(threads).max(8);
        rayon::scope(|s| {
            let mut rest = c;
            let mut i0 = 0usize;
            while i0 < m {
                let rows = rows_per.min(m - i0);
                let (head, tail) = rest.split_at_mut(rows * n);
                let a_block = &a[i0 * k..(i0 + rows) * k];
                s.spawn(move |_| kernel_entry(rows, k, n, a_block, b, head));
                rest = tail;
                i0 += rows;
            }
        });
    } else {
        kernel_entry(m, k, n, a, b, c);
    }
}

fn kernel_entry(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if is_x86_feature_detected!("avx512f") && is_x86_feature_detected!("fma") {
            unsafe { gemm_avx512(m, k, n, a, b, c) };
            return;
        }
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            unsafe { gemm_avx2(m, k, n, a, b, c) };
            return;
        }
    }
    gemm_tile::<4, 8>(m, k, n, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx512vl,fma")]
unsafe fn gemm_avx512(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_tile::<4, 16>(m, k, n, a, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_avx2(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_tile::<4, 8>(m, k, n, a, b, c);
}

/// Register-tiled accumulation. Each `c` element is a serial fused
/// multiply-add chain over the inner dimension, in index order, for every
/// tile size, so all instantiations produce identical bits.
#[inline(always)]
fn gemm_tile<const MR: usize, const NR: usize>(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
) {
    let n_full = n - n % NR;
    let mut i0 = 0;
    while i0 + MR <= m {
        let mut j0 = 0;
        while j0 < n_full {
            let mut acc = [[0.0f64; NR]; MR];
            for kk in 0..k {
                let brow = &b[kk * n + j0..kk * n + j0 + NR];
                for i in 0..MR {
                    let aik = a[(i0 + i) * k + kk];
                    for j in 0..NR {
                        acc[i][j] = aik.mul_add(brow[j], acc[i][j]);
                    }
                }
            }
            for i in 0..MR {
                let crow = &mut c[(i0 + i) * n + j0..(i0 + i) * n + j0 + NR];
                for j in 0..NR {
                    crow[j] += acc[i][j];
                }
            }
            j0 += NR;
        }
        i0 += MR;
    }
    // Row remainder under full column tiles.
    for i in i0..m {
        let mut j0 = 0;
        while j0 < n_full {
            let mut acc = [0.0f64; NR];
            for kk in 0..k {
                let aik = a[i * k + kk];
                let brow = &b[kk * n + j0..kk * n + j0 + NR];
                for j in 0..NR {
                    acc[j] = aik.mul_add(brow[j], acc[j]);
                }
            }
            let crow = &mut c[i * n + j0..i * n + j0 + NR];
            for j in 0..NR {
                crow[j] += acc[j];
            }
            j0 += NR;
        }
    }
    // Column remainder, all rows.
    if n_full < n {
        for i in 0..m {
            for j in n_full..n {
                let mut acc = 0.0f64;
                for kk in 0..k {
                    acc = a[i * k + kk].mul_add(b[kk * n + j], acc);
                }
                c[i * n + j] += acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_lengths() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_identity_is_identity() {
        let n = 17;
        let mut eye = Tensor::zeros(&[n, n]);
        for i in 0..n {
            eye.data_mut()[i * n + i] = 1.0;
        }
        let x = Tensor::new(
            vec![n, n],
            (0..n * n).map(|i| (i as f64).sin()).collect(),
        )
        .unwrap();
        let y = matmul(&x, &eye).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn gemm_matches_naive_reference_on_awkward_shapes() {
        // Sizes chosen to exercise every remainder branch of the tiling.
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (4, 16, 16), (5, 3, 17), (9, 2, 33), (37, 19, 23)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 + 11) % 19) as f64 - 9.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 29 + 7) % 23) as f64 - 11.0).collect();
            let mut c = vec![0.0; m * n];
            gemm_nn(m, k, n, &a, &b, &mut c);
            for i in 0..m {
                for j in 0..n {
                    let mut want = 0.0;
                    for kk in 0..k {
                        want += a[i * k + kk] * b[kk * n + j];
                    }
                    let got = c[i * n + j];
                    assert!(
                        (got - want).abs() <= 1e-9 * want.abs().max(1.0),
                        "({m},{k},{n}) at ({i},{j}): got {got}, want {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn transpose_round_trips() {
        let a = Tensor::new(
            vec![5, 9],
            (0..45).map(|i| i as f64 * 0.5 - 3.0).collect(),
        )
        .unwrap();
        let att = transpose(&transpose(&a));
        assert_eq!(a, att);
        let at = transpose(&a);
        assert_eq!(at.shape(), &[9, 5]);
        assert_eq!(at.data()[2 * 5 + 3], a.data()[3 * 9 + 2]);
    }

    #[test]
    #[ignore = "diagnostic: prints matmul throughput"]
    fn bench_gemm_throughput() {
        for &(m, k, n) in &[(8192, 64, 512), (8192, 512, 64), (8192, 64, 64), (64, 32, 64)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.001).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.002).cos()).collect();
            let mut c = vec![0.0; m * n];
            let reps = (2e9 / (2.0 * (m * k * n) as f64)).ceil().max(1.0) as usize;
            let t0 = std::time::Instant::now();
            for _ in 0..reps {
                gemm_nn(m, k, n, &a, &b, &mut c);
            }
            let dt = t0.elapsed().as_secs_f64();
            let gflops = 2.0 * (m * k * n * reps) as f64 / dt / 1e9;
            println!("gemm {m}x{k}x{n}: {gflops:.2} GFLOP/s ({reps} reps, {dt:.3}s)");
        }
    }

    #[test]
    fn matmul_vjp_shapes_and_values() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 1.5, -1.0]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![2.0, 0.0, -1.0, 1.0, 0.5, 2.0]).unwrap();
        let g = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (da, db) = matmul_vjp(&a, &b, &g).unwrap();
        // With g = I: dA = B^T, dB = A^T.
        assert_eq!(da.data(), transpose(&b).data());
        assert_eq!(db.data(), transpose(&a).data());
    }
}
