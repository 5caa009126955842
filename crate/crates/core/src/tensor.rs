//! Dense row-major tensors of `f64`.
//!
//! Tensors are small by design: vectors and matrices for feed-forward
//! networks. There are no views or strides; every operation allocates its
//! result. Rank-1 tensors act as column vectors in [`Tensor::matmul`].

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
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

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { shape: vec![n, n], data }
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// Matrix product. `self` must be `[m, k]`; `rhs` is `[k, n]` or a
    /// `[k]` vector, giving `[m, n]` or `[m]` respectively.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim("matmul", format!("lhs must be a matrix, got {:?}", self.shape)));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        match rhs.shape.as_slice() {
            [kk] if *kk == k => {
                let out = (0..m).map(|i| dot(&self.data[i * k..(i + 1) * k], &rhs.data)).collect();
                Ok(Tensor::vector(out))
            }
            [kk, n] if *kk == k => {
                let n = *n;
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    let row = &mut out[i * n..(i + 1) * n];
                    for p in 0..k {
                        let a = self.data[i * k + p];
                        if a != 0.0 {
                            axpy(a, &rhs.data[p * n..(p + 1) * n], row);
                        }
                    }
                }
                Tensor::new(vec![m, n], out)
            }
            _ => Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}: inner dimensions disagree", self.shape, rhs.shape),
            )),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose", format!("{:?}", self.shape)));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_map(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_map(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_map(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add_scalar(&self, k: f64) -> Tensor {
        self.map(|v| v + k)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn abs(&self) -> Tensor {
        self.map(f64::abs)
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn square(&self) -> Tensor {
        self.map(|v| v * v)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.data.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::numeric("log", format!("non-positive input {bad}")));
        }
        Ok(self.map(f64::ln))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    fn require_finite(&self, op: &'static str) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::numeric(op, "non-finite input"));
        }
        if self.data.is_empty() {
            return Err(Error::dim(op, "empty input"));
        }
        Ok(())
    }

    /// Softmax over all entries, computed with max-subtraction.
    pub fn softmax(&self) -> Result<Tensor> {
        self.require_finite("softmax")?;
        let m = self.max();
        let exps: Vec<f64> = self.data.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: exps.into_iter().map(|e| e / z).collect(),
        })
    }

    pub fn log_softmax(&self) -> Result<Tensor> {
        let lse = self.log_sum_exp()?;
        Ok(self.map(|v| v - lse))
    }

    pub fn log_sum_exp(&self) -> Result<f64> {
        self.require_finite("log_sum_exp")?;
        let m = self.max();
        let z: f64 = self.data.iter().map(|&v| (v - m).exp()).sum();
        Ok(m + z.ln())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let id = Tensor::identity(2);
        let col = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        assert_eq!(id.matmul(&col).unwrap().data(), &[1.0, 2.0]);

        let row = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let rhs = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        let out = row.matmul(&rhs).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ta = Tensor::matrix(4, 3, a.clone()).unwrap();
        let tb = Tensor::matrix(3, 2, b.clone()).unwrap();
        let got = ta.matmul(&tb).unwrap();
        let want = naive_matmul(&a, &b, 4, 3, 2);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        // the vector path agrees with the [k, 1] matrix path
        let v = Tensor::vector(b[..3].to_vec());
        let got_v = ta.matmul(&v).unwrap();
        let want_v = naive_matmul(&a, &b[..3], 4, 3, 1);
        for (g, w) in got_v.data().iter().zip(&want_v) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_cases() {
        let s = Tensor::vector(vec![0.0, 0.0]).softmax().unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let big = Tensor::vector(vec![1000.0, 0.0]).softmax().unwrap();
        // shifted evaluation: softmax([0, -1000])
        let shifted = Tensor::vector(vec![0.0, -1000.0]).softmax().unwrap();
        assert_eq!(big.data(), shifted.data());
        assert_eq!(big.data()[0], 1.0);
        assert!(big.data()[1] >= 0.0 && big.data()[1] < 1e-300);

        assert!(Tensor::vector(vec![f64::NAN, 0.0]).softmax().is_err());
    }

    #[test]
    fn relu_and_log() {
        assert_eq!(Tensor::vector(vec![-1.0, 2.0]).relu().data(), &[0.0, 2.0]);
        assert!(Tensor::vector(vec![0.0]).log().is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.3, 0.7, 0.7]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_a_distribution(v in proptest::collection::vec(-15.0f64..15.0, 1..12)) {
            let s = Tensor::vector(v).softmax().unwrap();
            let total: f64 = s.data().iter().sum();
            proptest::prop_assert!((total - 1.0).abs() <= 1e-12);
            for &p in s.data() {
                proptest::prop_assert!(p > 0.0 && p < 1.0 || s.len() == 1);
            }
        }
    }
}
