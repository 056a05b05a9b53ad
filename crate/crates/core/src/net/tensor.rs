//! Dense row-major tensors and the small GEMM kernels the layers build on.
//!
//! Activations use the layout `[batch, height, width, channels]` (channels
//! fastest), which lets convolution lower to patch-matrix products with
//! contiguous inner loops. All kernels are deterministic: parallelism only
//! splits output rows, never summation order.

use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimension (batch size for activations).
    pub fn n(&self) -> usize {
        self.shape[0]
    }

    /// Elements per leading-index block.
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Below this many multiply-adds a kernel stays single-threaded; threading
/// overhead dominates otherwise.
const PAR_THRESHOLD: usize = 1 << 20;

/// C[m x n] += A[m x k] * B[k x n]
pub fn gemm_nn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row_job = |(i, crow): (usize, &mut [f64])| {
        let arow = &a[i * k..(i + 1) * k];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row_job);
    } else {
        c.chunks_mut(n).enumerate().for_each(row_job);
    }
}

/// C[m x k] += A[m x n] * B[k x n]^T  (rows of C are dots against rows of B)
pub fn gemm_nt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    let row_job = |(i, crow): (usize, &mut [f64])| {
        let arow = &a[i * n..(i + 1) * n];
        for (l, cv) in crow.iter_mut().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(k).enumerate().for_each(row_job);
    } else {
        c.chunks_mut(k).enumerate().for_each(row_job);
    }
}

/// C[k x n] += A[m x k]^T * B[m x n]  (reduction over m, sequential rank-1
/// updates so the summation order is fixed)
pub fn gemm_tn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn arange(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 7 + 3) % 11) as f64 * scale - 2.0).collect()
    }

    #[test]
    fn gemm_variants_match_naive() {
        let (m, k, n) = (5, 7, 6);
        let a = arange(m * k, 0.5);
        let b = arange(k * n, 0.25);

        let mut c = vec![0.0; m * n];
        gemm_nn(&mut c, &a, &b, m, k, n);
        assert_eq!(c, naive_mm(&a, &b, m, k, n));

        // A^T * B with A as [k x m]
        let at = arange(k * m, 0.5);
        let mut c2 = vec![0.0; m * n];
        gemm_tn(&mut c2, &at, &b, k, m, n);
        let mut a_t = vec![0.0; m * k];
        for i in 0..k {
            for j in 0..m {
                a_t[j * k + i] = at[i * m + j];
            }
        }
        assert_eq!(c2, naive_mm(&a_t, &b, m, k, n));

        // A * B^T with B as [n x k]
        let bt = arange(n * k, 0.25);
        let mut c3 = vec![0.0; m * n];
        gemm_nt(&mut c3, &a, &bt, m, k, n);
        let mut b_t = vec![0.0; k * n];
        for i in 0..n {
            for j in 0..k {
                b_t[j * n + i] = bt[i * k + j];
            }
        }
        assert_eq!(c3, naive_mm(&a, &b_t, m, k, n));
    }

    #[test]
    fn tensor_sample_views() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.sample(0), &[1.0, 2.0, 3.0]);
        assert_eq!(t.sample(1), &[4.0, 5.0, 6.0]);
        assert_eq!(t.sample_len(), 3);
    }
}
