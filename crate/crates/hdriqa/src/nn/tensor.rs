//! Dense row-major tensors in double precision.

use crate::error::{Error, Result};

/// An n-dimensional real array. Data is a flat row-major buffer; the last
/// axis is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Element-wise in-place accumulate: `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|a| *a = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Error if any element is NaN or infinite; `what` names the tensor in
    /// the diagnostic.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!("non-finite values in {what}")))
        }
    }
}

// Register-blocked kernel geometry: IB x JB output accumulators stay in
// vector registers across the whole k sweep; k is additionally tiled so the
// streamed slab of `b` stays cache-resident.
const MM_IB: usize = 4;
const MM_JB: usize = 16;
const MM_KT: usize = 256;

/// Generic accumulation used for block tails.
#[inline]
fn mm_tail(a: &[f64], b: &[f64], out: &mut [f64], n: usize, rows: &[usize], k0: usize, k1: usize, js: usize, je: usize, a_stride: AStride) {
    for &i in rows {
        for p in k0..k1 {
            let a_ip = match a_stride {
                AStride::Row(k) => a[i * k + p],
                AStride::Col(m) => a[p * m + i],
            };
            let b_row = &b[p * n + js..p * n + je];
            let out_row = &mut out[i * n + js..i * n + je];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * bv;
            }
        }
    }
}

#[derive(Clone, Copy)]
enum AStride {
    /// `a` stored row-major m x k.
    Row(usize),
    /// `a` stored k x m (transposed access).
    Col(usize),
}

/// One register-blocked output panel of width JB starting at column j0,
/// over the k-tile [k0, k1).
#[inline]
fn mm_panel<const JB: usize>(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    m: usize,
    n: usize,
    k0: usize,
    k1: usize,
    j0: usize,
    astride: AStride,
) {
    let mut i0 = 0;
    while i0 + MM_IB <= m {
        let mut acc = [[0.0f64; JB]; MM_IB];
        for (ii, accr) in acc.iter_mut().enumerate() {
            accr.copy_from_slice(&out[(i0 + ii) * n + j0..(i0 + ii) * n + j0 + JB]);
        }
        for p in k0..k1 {
            let b_seg = &b[p * n + j0..p * n + j0 + JB];
            for (ii, accr) in acc.iter_mut().enumerate() {
                let a_ip = match astride {
                    AStride::Row(stride) => a[(i0 + ii) * stride + p],
                    AStride::Col(stride) => a[p * stride + i0 + ii],
                };
                for (av, &bv) in accr.iter_mut().zip(b_seg.iter()) {
                    *av += a_ip * bv;
                }
            }
        }
        for (ii, accr) in acc.iter().enumerate() {
            out[(i0 + ii) * n + j0..(i0 + ii) * n + j0 + JB].copy_from_slice(accr);
        }
        i0 += MM_IB;
    }
    if i0 < m {
        let rows: Vec<usize> = (i0..m).collect();
        mm_tail(a, b, out, n, &rows, k0, k1, j0, j0 + JB, astride);
    }
}

/// Shared blocked driver for `out += A * B` with A either m x k row-major
/// or k x m (accessed transposed). Full 4 x 16 output blocks are held in
/// registers while sweeping a k-tile of `b`; narrower 4-wide panels cover
/// most of the column tail.
fn mm_blocked(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize, astride: AStride) {
    let mut k0 = 0;
    while k0 < k {
        let k1 = (k0 + MM_KT).min(k);
        let mut j0 = 0;
        while j0 + MM_JB <= n {
            mm_panel::<MM_JB>(a, b, out, m, n, k0, k1, j0, astride);
            j0 += MM_JB;
        }
        while j0 + 4 <= n {
            mm_panel::<4>(a, b, out, m, n, k0, k1, j0, astride);
            j0 += 4;
        }
        if j0 < n {
            let rows: Vec<usize> = (0..m).collect();
            mm_tail(a, b, out, n, &rows, k0, k1, j0, n, astride);
        }
        k0 = k1;
    }
}

/// Row-major matrix product `out[m][n] += a[m][k] * b[k][n]`.
/// `out` must already be sized m*n; it is accumulated into, not cleared.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 1 {
        // matrix-vector: contiguous dot per output row
        for i in 0..m {
            out[i] += dot(&a[i * k..(i + 1) * k], b);
        }
        return;
    }
    mm_blocked(a, b, out, m, k, n, AStride::Row(k));
}

/// `out[m][n] += a^T[m][k] * b[k][n]` where `a` is stored as k x m.
pub fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 1 {
        // out[0..m] += b[p] * row p of a, row by row (contiguous axpy)
        for p in 0..k {
            let bv = b[p];
            if bv == 0.0 {
                continue;
            }
            let a_row = &a[p * m..(p + 1) * m];
            for (o, &av) in out.iter_mut().zip(a_row.iter()) {
                *o += bv * av;
            }
        }
        return;
    }
    mm_blocked(a, b, out, m, k, n, AStride::Col(m));
}

/// Dot product with eight independent accumulator chains, so the FMA
/// latency of one chain does not serialize the whole sum.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let i = 8 * c;
        for lane in 0..8 {
            acc[lane] += a[i + lane] * b[i + lane];
        }
    }
    let mut tail = 0.0;
    for i in 8 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `out[m][n] += a[m][k] * b^T[k][n]` where `b` is stored as n x k.
/// 2 x 4 output blocks share operand loads so the dot chains interleave.
pub fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if k == 1 {
        // rank-1 outer product; b is one contiguous column
        for i in 0..m {
            let av = a[i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b.iter()) {
                *o += av * bv;
            }
        }
        return;
    }
    let mut i0 = 0;
    while i0 + 2 <= m {
        let a0 = &a[i0 * k..(i0 + 1) * k];
        let a1 = &a[(i0 + 1) * k..(i0 + 2) * k];
        let mut j0 = 0;
        while j0 + 4 <= n {
            let mut acc = [[0.0f64; 4]; 2];
            for p in 0..k {
                let (av0, av1) = (a0[p], a1[p]);
                for jj in 0..4 {
                    let bv = b[(j0 + jj) * k + p];
                    acc[0][jj] += av0 * bv;
                    acc[1][jj] += av1 * bv;
                }
            }
            for ii in 0..2 {
                for jj in 0..4 {
                    out[(i0 + ii) * n + j0 + jj] += acc[ii][jj];
                }
            }
            j0 += 4;
        }
        for j in j0..n {
            out[i0 * n + j] += dot(a0, &b[j * k..(j + 1) * k]);
            out[(i0 + 1) * n + j] += dot(a1, &b[j * k..(j + 1) * k]);
        }
        i0 += 2;
    }
    for i in i0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::from_vec(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.clone().reshaped(&[4]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[3]).is_err());
    }

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul_acc(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);

        // a^T path: a stored as k x m
        let mut out2 = [0.0; 4];
        let a_t = [1.0, 3.0, 2.0, 4.0]; // transpose of a, stored 2x2
        matmul_at_acc(&a_t, &b, &mut out2, 2, 2, 2);
        assert_eq!(out2, [19.0, 22.0, 43.0, 50.0]);

        // b^T path: b stored as n x k
        let mut out3 = [0.0; 4];
        let b_t = [5.0, 7.0, 6.0, 8.0];
        matmul_bt_acc(&a, &b_t, &mut out3, 2, 2, 2);
        assert_eq!(out3, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn finite_check() {
        let mut t = Tensor::zeros(&[2]);
        assert!(t.check_finite("t").is_ok());
        t.data_mut()[0] = f64::NAN;
        assert!(t.check_finite("t").is_err());
    }
}
