//! Dense f64 kernels: row-major matrices, vectors, the LSTM nonlinearities
//! and a seedable generator.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking the log in [`cross_entropy`].
pub const CE_FLOOR: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Mat::from_vec",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite matrix entry at index {pos}")));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Mat::from_rows", format!("{cols} cols"), format!("{} cols", r.len())));
            }
            data.extend_from_slice(r);
        }
        Mat::from_vec(rows.len(), cols, data)
    }

    /// Entries drawn i.i.d. from uniform(-range, range).
    pub fn uniform(rows: usize, cols: usize, range: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform(-range, range)).collect();
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `out += self · x`
    pub(crate) fn gemv_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o += dot(row, x);
        }
    }

    /// `out += selfᵀ · v`
    pub(crate) fn gemv_t_acc(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&vr, row) in v.iter().zip(self.data.chunks_exact(self.cols.max(1))) {
            if vr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(row) {
                *o += vr * w;
            }
        }
    }

    /// `self += a · bᵀ`
    pub(crate) fn outer_acc(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        let cols = self.cols.max(1);
        for (&ar, row) in a.iter().zip(self.data.chunks_exact_mut(cols)) {
            if ar == 0.0 {
                continue;
            }
            for (w, &bc) in row.iter_mut().zip(b) {
                *w += ar * bc;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector { data: vec![0.0; len] }
    }

    pub fn filled(len: usize, v: f64) -> Self {
        Vector { data: vec![v; len] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector { data }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `W·x + b`.
pub fn affine(w: &Mat, x: &Vector, b: &Vector) -> Result<Vector> {
    if w.cols() != x.len() {
        return Err(Error::shape(
            "affine",
            format!("W {}x{}", w.rows(), w.cols()),
            format!("x len {}", x.len()),
        ));
    }
    if w.rows() != b.len() {
        return Err(Error::shape(
            "affine",
            format!("W {}x{}", w.rows(), w.cols()),
            format!("b len {}", b.len()),
        ));
    }
    let mut out = b.as_slice().to_vec();
    w.gemv_acc(x.as_slice(), &mut out);
    Ok(Vector::from_vec(out))
}

/// Logistic function, branched on sign so `exp` never overflows.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Vector) -> Vector {
    Vector::from_vec(x.as_slice().iter().map(|&v| sigmoid_scalar(v)).collect())
}

pub fn tanh(x: &Vector) -> Vector {
    Vector::from_vec(x.as_slice().iter().map(|v| v.tanh()).collect())
}

/// In-place stable softmax over a non-empty slice.
pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(z: &Vector) -> Result<Vector> {
    if z.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let mut out = z.as_slice().to_vec();
    softmax_in_place(&mut out);
    Ok(Vector::from_vec(out))
}

/// `-ln(max(p[label], 1e-12))`.
pub fn cross_entropy(p: &Vector, label: usize) -> Result<f64> {
    if label >= p.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            p.len()
        )));
    }
    let total: f64 = p.as_slice().iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("probabilities sum to {total}, expected 1")));
    }
    Ok(ce_unchecked(p.as_slice(), label))
}

#[inline]
pub(crate) fn ce_unchecked(p: &[f64], label: usize) -> f64 {
    -p[label].max(CE_FLOOR).ln()
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Identifier of the generator algorithm, written into checkpoint manifests.
pub const RNG_ID: &str = "chacha8 (rand_chacha 0.9, 64-bit seed)";

/// Seedable generator. Single owner; use [`Rng::fork`] to hand a stream to another task.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derives an independent child generator.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.random())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random::<f64>() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use crate::numeric::Rng;

    #[test]
    fn affine_examples() {
        let out = affine(&Mat::identity(2), &vec![3.0, -1.0].into(), &Vector::zeros(2)).unwrap();
        assert_eq!(out.as_slice(), &[3.0, -1.0]);

        let w = Mat::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]).unwrap();
        let out = affine(&w, &vec![1.0, 1.0].into(), &vec![1.0, 0.0].into()).unwrap();
        assert_eq!(out.as_slice(), &[4.0, 1.0]);

        let out = affine(&Mat::zeros(2, 2), &vec![7.0, -3.0].into(), &vec![5.0, 5.0].into()).unwrap();
        assert_eq!(out.as_slice(), &[5.0, 5.0]);
    }

    #[test]
    fn affine_shape_error_names_operands() {
        let err = affine(&Mat::zeros(2, 3), &Vector::zeros(2), &Vector::zeros(2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("W 2x3") && msg.contains("x len 2"), "{msg}");
        let err = affine(&Mat::zeros(2, 2), &Vector::zeros(2), &Vector::zeros(3)).unwrap_err();
        assert!(err.to_string().contains("b len 3"));
    }

    #[test]
    fn nonlinearity_examples() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(tanh(&vec![0.0].into()).as_slice(), &[0.0]);
        assert_abs_diff_eq!(sigmoid_scalar(2.0), 0.8807970779778823, epsilon = 1e-15);
        assert_eq!(sigmoid_scalar(-1000.0), 0.0);
        assert_eq!(sigmoid_scalar(1000.0), 1.0);
        assert!(sigmoid_scalar(-745.0).is_finite());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&vec![0.0, 0.0, 0.0].into()).unwrap();
        for &v in p.as_slice() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = softmax(&vec![1000.0, 1000.0].into()).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
        let p = softmax(&vec![1.0, 2.0].into()).unwrap();
        assert_abs_diff_eq!(p[0], 0.2689414213699951, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.7310585786300049, epsilon = 1e-15);
        assert!(softmax(&Vector::zeros(0)).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&vec![1.0, 0.0].into(), 0).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cross_entropy(&vec![0.5, 0.5].into(), 1).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            cross_entropy(&vec![0.0, 1.0].into(), 0).unwrap(),
            27.631021115928547,
            epsilon = 1e-12
        );
        assert!(cross_entropy(&vec![0.5, 0.5].into(), 2).is_err());
        assert!(cross_entropy(&vec![0.5, 0.6].into(), 0).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.5, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[1.0]), 0);
    }

    #[test]
    fn same_seed_same_matrices() {
        let a = Mat::uniform(4, 5, 0.3, &mut Rng::new(11));
        let b = Mat::uniform(4, 5, 0.3, &mut Rng::new(11));
        let c = Mat::uniform(4, 5, 0.3, &mut Rng::new(12));
        assert_eq!(
            a.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(a, c);
    }

    #[test]
    fn from_vec_rejects_nan() {
        assert!(Mat::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Mat::from_vec(1, 2, vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn affine_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let mut rng = Rng::new(seed);
            let w = Mat::uniform(8, 8, 1.0, &mut rng);
            let x: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let y: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
            let zero = Vector::zeros(8);
            let lhs = affine(&w, &combo.into(), &zero).unwrap();
            let ax = affine(&w, &x.into(), &zero).unwrap();
            let ay = affine(&w, &y.into(), &zero).unwrap();
            for r in 0..8 {
                prop_assert!((lhs[r] - (alpha * ax[r] + beta * ay[r])).abs() < 1e-10);
            }
        }

        #[test]
        fn softmax_is_a_distribution(z in proptest::collection::vec(-1e6f64..1e6, 1..12), shift in -1e3f64..1e3) {
            let p = softmax(&z.clone().into()).unwrap();
            let sum: f64 = p.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(p.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted.into()).unwrap();
            for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn sigmoid_tanh_ranges_and_monotone(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(sigmoid_scalar(lo) <= sigmoid_scalar(hi));
            prop_assert!(lo.tanh() <= hi.tanh());
            let s = sigmoid_scalar(a);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!((-1.0..=1.0).contains(&a.tanh()));
        }
    }
}
