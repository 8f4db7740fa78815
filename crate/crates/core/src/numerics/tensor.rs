use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Lower clamp for probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Dense row-major array of `f64`.
///
/// Most of the model works on 2-D tensors; for those, `rows()` is the
/// product of all leading extents and `cols()` the last extent.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidShape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        match self.cols() {
            0 => 0,
            c => self.data.len() / c,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::InvalidShape(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies rows `[start, end)` into a new 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        Tensor {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::InvalidShape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self · rhs` for 2-D operands.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::InvalidShape(format!(
                "matmul {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        Ok(Tensor {
            shape: vec![m, n],
            data: kernels::matmul(&self.data, &rhs.data, m, k, n),
        })
    }

    pub fn rms(&self) -> f64 {
        rms(&self.data)
    }
}

/// Root-mean-square magnitude per entry. Empty input gives 0.
pub fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

pub fn l2(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// In-place softmax of a single row, max-subtracted.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(t: &Tensor) -> Result<Tensor> {
    if t.shape.is_empty() || t.cols() == 0 {
        return Err(Error::InvalidShape(format!(
            "softmax needs a non-empty last extent, got {:?}",
            t.shape
        )));
    }
    let mut out = t.clone();
    let c = out.cols();
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub fn log_softmax_rows(t: &Tensor) -> Result<Tensor> {
    if t.shape.is_empty() || t.cols() == 0 {
        return Err(Error::InvalidShape(format!(
            "log_softmax needs a non-empty last extent, got {:?}",
            t.shape
        )));
    }
    let mut out = t.clone();
    let c = out.cols();
    for row in out.data.chunks_mut(c) {
        let lse = log_sum_exp(row);
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Ok(out)
}

/// KL divergence of a single row pair, `p` against `q`, with `q` clamped
/// at [`PROB_FLOOR`].
pub fn kl_row(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv.ln() - qv.max(PROB_FLOOR).ln()))
        .sum()
}

/// Mean over rows of `KL(p_row || q_row)`.
pub fn kl_rows(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape != q.shape || p.cols() == 0 {
        return Err(Error::InvalidShape(format!(
            "kl_rows {:?} vs {:?}",
            p.shape, q.shape
        )));
    }
    let rows = p.rows();
    if rows == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..rows).map(|r| kl_row(p.row(r), q.row(r))).sum();
    Ok(total / rows as f64)
}

/// Total-variation distance between two distributions.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub mod kernels {
    //! Row-major matrix kernels. Loop order keeps the inner loop contiguous so
    //! it vectorizes.

    /// `C[m,n] = A[m,k] · B[k,n]`
    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        matmul_acc(a, b, &mut c, m, k, n);
        c
    }

    /// `C[m,n] += A[m,k] · B[k,n]`
    pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        let mut i = 0;
        // Four output rows share each pass over a row of B.
        while i + 4 <= m {
            let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            for p in 0..k {
                let bp = &b[p * n..(p + 1) * n];
                let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
                for j in 0..n {
                    let bv = bp[j];
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
            i += 4;
        }
        for i in i..m {
            let ci = &mut c[i * n..(i + 1) * n];
            let ai = &a[i * k..(i + 1) * k];
            for (p, &aip) in ai.iter().enumerate() {
                let bp = &b[p * n..(p + 1) * n];
                for (cv, &bv) in ci.iter_mut().zip(bp) {
                    *cv += aip * bv;
                }
            }
        }
    }

    /// `C[m,n] += A[m,k] · B[n,k]ᵀ`
    pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        matmul_acc(a, &bt, c, m, k, n);
    }

    /// `C[k,n] += A[m,k]ᵀ · B[m,n]`
    pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let ai = &a[i * k..(i + 1) * k];
            let bi = &b[i * n..(i + 1) * n];
            for (p, &aip) in ai.iter().enumerate() {
                let cp = &mut c[p * n..(p + 1) * n];
                for (cv, &bv) in cp.iter_mut().zip(bi) {
                    *cv += aip * bv;
                }
            }
        }
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        // Four independent accumulators; fixed association order keeps the
        // result bit-stable.
        let mut acc = [0.0f64; 4];
        let chunks = a.len() / 4;
        for c in 0..chunks {
            let i = c * 4;
            acc[0] += a[i] * b[i];
            acc[1] += a[i + 1] * b[i + 1];
            acc[2] += a[i + 2] * b[i + 2];
            acc[3] += a[i + 3] * b[i + 3];
        }
        let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for i in chunks * 4..a.len() {
            s += a[i] * b[i];
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_examples() {
        let t = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(softmax_rows(&t).unwrap().data(), &[0.5, 0.5]);

        let t = Tensor::new(vec![1, 2], vec![0.0, 2f64.ln()]).unwrap();
        let s = softmax_rows(&t).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_empty_last_extent() {
        let t = Tensor::new(vec![3, 0], vec![]).unwrap();
        assert!(matches!(softmax_rows(&t), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let t = Tensor::new(vec![1, 3], vec![1e300, -1e300, 0.0]).unwrap();
        let s = softmax_rows(&t).unwrap();
        assert!(s.all_finite());
        assert_eq!(s.data()[0], 1.0);
    }

    #[test]
    fn kl_examples() {
        let p = Tensor::new(vec![1, 2], vec![0.3, 0.7]).unwrap();
        assert_eq!(kl_rows(&p, &p).unwrap(), 0.0);

        let p = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let q = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert!((kl_rows(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_clamps_zero_q() {
        let p = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let q = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let kl = kl_rows(&p, &q).unwrap();
        assert!(kl.is_finite() && kl > 10.0);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let v = rng.random_range(2..20);
            let a = softmax_rows(&Tensor::randn(&[1, v], 2.0, &mut rng)).unwrap();
            let b = softmax_rows(&Tensor::randn(&[1, v], 2.0, &mut rng)).unwrap();
            assert!(kl_rows(&a, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn kernels_agree_with_naive_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (5, 7, 3);
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let naive = |i: usize, j: usize| (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum::<f64>();
        let c = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                assert!((c.data()[i * n + j] - naive(i, j)).abs() < 1e-12);
            }
        }
        // A·Bᵀ with B stored transposed
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b.data()[p * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        kernels::matmul_nt_acc(a.data(), &bt, &mut c2, m, k, n);
        // Aᵀ·C with A stored transposed
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a.data()[i * k + p];
            }
        }
        let mut c3 = vec![0.0; m * n];
        kernels::matmul_tn_acc(&at, b.data(), &mut c3, k, m, n);
        for i in 0..m * n {
            assert!((c2[i] - c.data()[i]).abs() < 1e-12);
            assert!((c3[i] - c.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }

    #[test]
    fn rms_of_three_four() {
        assert!((rms(&[3.0, 4.0]) - (12.5f64).sqrt()).abs() < 1e-15);
    }
}
