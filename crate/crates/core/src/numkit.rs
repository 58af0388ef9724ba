//! Dense-math substrate shared by every other module.
//!
//! Storage is `f32` by default; reductions accumulate in `f64`. The matrix
//! type is generic over [`Real`] so the same network code can run on a
//! 64-bit shadow copy of the parameters for finite-difference checks.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type usable by [`Mat`] and the policy network.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Default + Send + Sync + 'static
{
    fn from_f64_lossy(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Debug for Mat<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mat({}x{})", self.rows, self.cols)
    }
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Domain(format!(
                "buffer of {} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    /// Entries drawn from `N(0, std^2)`.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Self {
        Self::from_fn(rows, cols, |_, _| T::from_f64_lossy(rng.normal() * std))
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.as_f64()))
                .collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self · other`, accumulating each dot product in `f64`.
    pub fn matmul(&self, other: &Mat<T>) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Domain(format!(
                "matmul shape mismatch: {}x{} · {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        let mut acc = vec![0.0f64; other.cols];
        for r in 0..self.rows {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (k, &a) in self.row(r).iter().enumerate() {
                let a = a.as_f64();
                if a == 0.0 {
                    continue;
                }
                for (slot, &b) in acc.iter_mut().zip(other.row(k)) {
                    *slot += a * b.as_f64();
                }
            }
            for (o, &a) in out.row_mut(r).iter_mut().zip(&acc) {
                *o = T::from_f64_lossy(a);
            }
        }
        Ok(out)
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Mat<T>, scale: T) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Domain(format!(
                "add_scaled shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + scale * b;
        }
        Ok(())
    }

    /// Squared Frobenius norm in `f64`.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64() * x.as_f64()).sum()
    }
}

/// Numerically stable softmax. Accumulates in `f64`.
pub fn softmax_stable<T: Real>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("softmax input is not finite".into()));
    }
    let max = v.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
    let exps: Vec<f64> = v.iter().map(|x| (x.as_f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| T::from_f64_lossy(e / total)).collect())
}

/// Result of [`cosine_sim`]: the similarity and whether an input had zero norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub zero_norm: bool,
}

/// Cosine similarity clamped to `[-1, 1]`. A zero-norm input yields 0 with
/// `zero_norm` set.
pub fn cosine_sim<T: Real>(a: &[T], b: &[T]) -> Result<Cosine> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            zero_norm: true,
        });
    }
    Ok(Cosine {
        value: (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0),
        zero_norm: false,
    })
}

/// Population mean, standard deviation, and coefficient of variation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    /// `None` when the mean is exactly zero.
    pub cv: Option<f64>,
}

pub fn mean_std_cv<T: Real>(xs: &[T]) -> Result<Moments> {
    if xs.is_empty() {
        return Err(Error::Domain("statistics of an empty sample".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().map(|x| x.as_f64()).sum::<f64>() / n;
    let var = xs
        .iter()
        .map(|x| {
            let d = x.as_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    let cv = if mean == 0.0 { None } else { Some(std / mean) };
    Ok(Moments { mean, std, cv })
}

/// Seedable, host-independent random stream. `(seed, stream_id)` fully
/// determines the sequence; distinct stream ids are independent ChaCha streams.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            inner,
        }
    }

    /// A child stream keyed by `(self.seed, hash(stream_id, tag))`.
    pub fn derive(&self, tag: u64) -> RngStream {
        RngStream::new(
            self.seed,
            mix64(self.stream_id ^ mix64(tag.wrapping_add(1))),
        )
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Standard Gumbel draw.
    pub fn gumbel(&mut self) -> f64 {
        let u = self.uniform().max(f64::MIN_POSITIVE);
        -(-u.ln()).ln()
    }

    pub fn shuffle<X>(&mut self, xs: &mut [X]) {
        use rand::seq::SliceRandom;
        xs.shuffle(&mut self.inner);
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_symmetric_and_shift_invariant() {
        let p = softmax_stable(&[0.0f32, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
        let p = softmax_stable(&[1000.0f32, 1000.0, 1000.0]).unwrap();
        for x in p {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-7);
        }
    }

    #[test]
    fn softmax_matches_f64_reference() {
        let mut rng = RngStream::new(7, 0);
        let v: Vec<f32> = (0..8).map(|_| (rng.normal() * 5.0) as f32).collect();
        // reference: direct exp/sum in f64 without the max shift
        let ex: Vec<f64> = v.iter().map(|&x| (x as f64).exp()).collect();
        let z: f64 = ex.iter().sum();
        let p = softmax_stable(&v).unwrap();
        for (a, e) in p.iter().zip(&ex) {
            assert_abs_diff_eq!(*a as f64, e / z, epsilon = 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax_stable(&[1.0f32, f32::NAN]),
            Err(Error::Domain(_))
        ));
        assert!(softmax_stable::<f32>(&[]).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[3.0f32, 4.0], &[3.0, 4.0]).unwrap().value, 1.0);
        assert_eq!(cosine_sim(&[1.0f32, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        // 32 / (sqrt(14) * sqrt(77))
        let c = cosine_sim(&[1.0f32, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_abs_diff_eq!(c.value, 0.974_631_846_197_075_8, epsilon = 1e-9);
        let z = cosine_sim(&[0.0f32, 0.0], &[1.0, 2.0]).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.zero_norm);
    }

    #[test]
    fn moments_examples() {
        let m = mean_std_cv(&[5.0f32, 5.0, 5.0]).unwrap();
        assert_eq!((m.mean, m.std, m.cv), (5.0, 0.0, Some(0.0)));
        let m = mean_std_cv(&[1.0f32, 3.0]).unwrap();
        assert_eq!((m.mean, m.std, m.cv), (2.0, 1.0, Some(0.5)));
        assert_eq!(mean_std_cv(&[-1.0f32, 1.0]).unwrap().cv, None);
    }

    #[test]
    fn moments_match_two_pass_oracle() {
        let mut rng = RngStream::new(11, 3);
        let xs: Vec<f32> = (0..100).map(|_| rng.uniform() as f32).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().map(|&x| x as f64).sum::<f64>() / n;
        let sq = xs.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / n;
        let std = (sq - mean * mean).sqrt();
        let m = mean_std_cv(&xs).unwrap();
        assert_abs_diff_eq!(m.mean, mean, epsilon = 1e-6);
        assert_abs_diff_eq!(m.std, std, epsilon = 1e-6);
        assert_abs_diff_eq!(m.cv.unwrap(), std / mean, epsilon = 1e-6);
    }

    #[test]
    fn matmul_identity_and_transpose_rule() {
        let mut rng = RngStream::new(1, 1);
        let a: Mat = Mat::randn(3, 4, 1.0, &mut rng);
        let b: Mat = Mat::randn(4, 2, 1.0, &mut rng);
        assert_eq!(Mat::identity(3).matmul(&a).unwrap(), a);

        let ab_t = a.matmul(&b).unwrap().transpose();
        // naive triple loop oracle for B^T A^T
        let (bt, at) = (b.transpose(), a.transpose());
        for i in 0..2 {
            for j in 0..3 {
                let mut s = 0.0f64;
                for k in 0..4 {
                    s += bt.get(i, k) as f64 * at.get(k, j) as f64;
                }
                assert_abs_diff_eq!(ab_t.get(i, j) as f64, s, epsilon = 1e-5);
            }
        }

        let x = Mat::from_vec(1, 1, vec![3.0f32]).unwrap();
        let y = Mat::from_vec(1, 1, vec![-2.5f32]).unwrap();
        assert_eq!(x.matmul(&y).unwrap().get(0, 0), -7.5);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn add_scaled_checks_shape() {
        let mut a = Mat::<f32>::zeros(2, 2);
        assert!(a.add_scaled(&Mat::zeros(2, 3), 1.0).is_err());
        a.add_scaled(&Mat::identity(2), 2.0).unwrap();
        assert_eq!(a.data(), &[2.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn rng_replay_and_independence() {
        let draw = |seed, stream| {
            let mut r = RngStream::new(seed, stream);
            (0..64).map(|_| r.next_u64()).collect::<Vec<_>>()
        };
        assert_eq!(draw(5, 9), draw(5, 9));
        assert_ne!(draw(5, 9), draw(5, 10));
        assert_ne!(draw(5, 9), draw(6, 9));
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(v in prop::collection::vec(-1e3f32..1e3, 1..32), shift in -50f32..50.0) {
            let p = softmax_stable(&v).unwrap();
            let total: f64 = p.iter().map(|&x| x as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let shifted: Vec<f32> = v.iter().map(|x| x + shift).collect();
            let q = softmax_stable(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-4);
            }
        }

        #[test]
        fn cosine_symmetric_scale_invariant(
            a in prop::collection::vec(-10f32..10.0, 4),
            b in prop::collection::vec(-10f32..10.0, 4),
            lambda in 0.01f32..100.0,
        ) {
            let ab = cosine_sim(&a, &b).unwrap().value;
            let ba = cosine_sim(&b, &a).unwrap().value;
            prop_assert_eq!(ab, ba);
            let scaled: Vec<f32> = a.iter().map(|x| x * lambda).collect();
            let sb = cosine_sim(&scaled, &b).unwrap().value;
            prop_assert!((ab - sb).abs() < 1e-6);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn softmax_probability_over_1000_random_vectors() {
        let mut rng = RngStream::new(99, 0);
        for _ in 0..1000 {
            let n = 1 + rng.below(16);
            let v: Vec<f32> = (0..n).map(|_| (rng.normal() * 30.0) as f32).collect();
            let p = softmax_stable(&v).unwrap();
            let total: f64 = p.iter().map(|&x| x as f64).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }
}
