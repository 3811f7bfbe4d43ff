//! Dense matrices, seeded randomness and the small probability kernels the
//! rest of the crate is built on.
//!
//! Everything here is generic over [`Scalar`], implemented for `f32` and
//! `f64`. Logarithms are natural throughout.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Floating point element type: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal into this type.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }

    fn count(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("count representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> RealMatrix<S> {
    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> S {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: S) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[S]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Gathers the listed rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "vstack of {} and {} columns",
                self.cols, other.cols
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self · weightᵀ + bias`, the affine map of a layer whose weight is
    /// stored as (out × in).
    pub fn affine(&self, weight: &Self, bias: &[S]) -> Self {
        debug_assert_eq!(self.cols, weight.cols);
        debug_assert_eq!(weight.rows, bias.len());
        let mut out = Self::zeros(self.rows, weight.rows);
        for i in 0..self.rows {
            let x = self.row(i);
            let o = out.row_mut(i);
            for (j, (oj, bj)) in o.iter_mut().zip(bias).enumerate() {
                *oj = dot(x, weight.row(j)) + *bj;
            }
        }
        out
    }

    /// `selfᵀ · other`, used for weight gradients.
    pub fn t_matmul(&self, other: &Self) -> Self {
        debug_assert_eq!(self.rows, other.rows);
        let mut out = Self::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            for (i, &ai) in a.iter().enumerate() {
                if ai == S::zero() {
                    continue;
                }
                let o = out.row_mut(i);
                for (oj, &bj) in o.iter_mut().zip(b) {
                    *oj = *oj + ai * bj;
                }
            }
        }
        out
    }

    /// `self · other` for (n × m)(m × p).
    pub fn matmul(&self, other: &Self) -> Self {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == S::zero() {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(other.row(k)) {
                    *oj = *oj + aik * bkj;
                }
            }
        }
        out
    }

    /// Column sums.
    pub fn col_sums(&self) -> Vec<S> {
        let mut sums = vec![S::zero(); self.cols];
        for row in self.iter_rows() {
            for (s, &x) in sums.iter_mut().zip(row) {
                *s = *s + x;
            }
        }
        sums
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, factor: S) -> Self {
        self.map(|x| x * factor)
    }

    /// Converts every entry to another scalar type.
    pub fn cast<T: Scalar>(&self) -> RealMatrix<T> {
        RealMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| T::lit(x.as_f64())).collect(),
        }
    }
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter()
        .zip(b)
        .fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub fn norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// Index of the smallest entry; ties resolve to the lowest index.
pub fn argmin<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = k;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax<S: Scalar>(v: &[S]) -> Result<Vec<S>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    if v.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked<S: Scalar>(v: &[S]) -> Vec<S> {
    let max = v.iter().copied().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows<S: Scalar>(logits: &RealMatrix<S>) -> RealMatrix<S> {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let p = softmax_unchecked(logits.row(i));
        out.row_mut(i).copy_from_slice(&p);
    }
    out
}

/// `u·v / (‖u‖‖v‖)`.
pub fn cosine_similarity<S: Scalar>(u: &[S], v: &[S]) -> Result<S> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == S::zero() || nv == S::zero() {
        return Err(Error::ZeroVector("cosine similarity".into()));
    }
    Ok(clamp_unit(dot(u, v) / (nu * nv)))
}

/// `1 − cosine_similarity(u, v)`.
pub fn cosine_distance<S: Scalar>(u: &[S], v: &[S]) -> Result<S> {
    Ok(S::one() - cosine_similarity(u, v)?)
}

#[inline]
pub(crate) fn clamp_unit<S: Scalar>(c: S) -> S {
    c.max(-S::one()).min(S::one())
}

/// `−Σ p log p` with `0·log 0 = 0`.
pub fn shannon_entropy<S: Scalar>(p: &[S]) -> Result<S> {
    if let Some(x) = p.iter().find(|x| !x.is_finite() || **x < S::zero()) {
        return Err(Error::InvalidInput(format!(
            "entropy of a vector with entry {x}"
        )));
    }
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked<S: Scalar>(p: &[S]) -> S {
    p.iter()
        .filter(|&&x| x > S::zero())
        .fold(S::zero(), |acc, &x| acc - x * x.ln())
}

/// Middle order statistic; mean of the two middle values for even lengths.
pub fn median<S: Scalar>(xs: &[S]) -> Result<S> {
    if xs.is_empty() {
        return Err(Error::InvalidInput("median of an empty list".into()));
    }
    if xs.iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("median input".into()));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN"));
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / S::lit(2.0)
    })
}

/// Deterministic random source. One owner at a time.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a named sub-phase, a pure function of
    /// `(seed, tag)`.
    pub fn derive(&self, tag: &str) -> SeededRng {
        SeededRng::new(derive_seed(self.seed, tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

/// splitmix64 finalizer over the seed and an FNV-1a hash of the tag.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `n` draws from `Normal(mean, std)`, each clamped to `[0, 1]`.
pub fn sample_normal_clamped<S: Scalar>(
    rng: &mut SeededRng,
    mean: f64,
    std: f64,
    n: usize,
) -> Result<Vec<S>> {
    if !(std >= 0.0) || !mean.is_finite() || !std.is_finite() {
        return Err(Error::InvalidInput(format!(
            "normal(mean={mean}, std={std})"
        )));
    }
    Ok((0..n)
        .map(|_| S::lit(clamp_draw(mean + std * rng.standard_normal())))
        .collect())
}

#[inline]
pub(crate) fn clamp_draw(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[1.0f64, 1.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(softmax(&[0.0f64; 4]).unwrap(), vec![0.25; 4]);
        assert!(softmax(&[1.0f64, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn cosine_examples() {
        let u = [0.3f64, -1.2, 2.0];
        assert_abs_diff_eq!(cosine_similarity(&u, &u).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(cosine_similarity(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let neg: Vec<f64> = u.iter().map(|x| -x).collect();
        assert_abs_diff_eq!(cosine_similarity(&u, &neg).unwrap(), -1.0, epsilon = 1e-15);
        assert!(matches!(
            cosine_similarity(&[0.0f64, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector(_))
        ));
        assert_abs_diff_eq!(cosine_distance(&[1.0f64, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn entropy_examples() {
        assert_abs_diff_eq!(
            shannon_entropy(&[0.25f64; 4]).unwrap(),
            4f64.ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(shannon_entropy(&[0.25f64; 4]).unwrap(), 1.386294, epsilon = 1e-6);
        assert_eq!(shannon_entropy(&[0.0f64, 1.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(shannon_entropy(&[0.5f64, 0.5]).unwrap(), 0.693147, epsilon = 1e-6);
        assert!(shannon_entropy(&[-0.1f64, 1.1]).is_err());
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0f64, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[1.0f64, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert_eq!(median(&[7.0f64]).unwrap(), 7.0);
        assert!(median::<f64>(&[]).is_err());
    }

    #[test]
    fn normal_draws_are_reproducible_and_clamped() {
        let a: Vec<f64> = sample_normal_clamped(&mut SeededRng::new(7), 0.85, 0.15, 64).unwrap();
        let b: Vec<f64> = sample_normal_clamped(&mut SeededRng::new(7), 0.85, 0.15, 64).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|x| (0.0..=1.0).contains(x)));
        assert_eq!(clamp_draw(1.3), 1.0);
        assert_eq!(clamp_draw(-0.2), 0.0);
        assert!(sample_normal_clamped::<f64>(&mut SeededRng::new(1), 0.5, -1.0, 3).is_err());
    }

    /// E[clamp(X, 0, 1)] for X ~ N(mean, std) by composite Simpson quadrature.
    fn clamped_mean_by_quadrature(mean: f64, std: f64) -> f64 {
        let pdf = |x: f64| {
            (-(x - mean).powi(2) / (2.0 * std * std)).exp()
                / (std * (2.0 * std::f64::consts::PI).sqrt())
        };
        let simpson = |f: &dyn Fn(f64) -> f64, a: f64, b: f64| {
            let n = 20_000;
            let h = (b - a) / n as f64;
            let mut s = f(a) + f(b);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * f(a + i as f64 * h);
            }
            s * h / 3.0
        };
        let hi = mean + 12.0 * std;
        // mass below 0 contributes 0, mass above 1 contributes 1
        let inside = simpson(&|x| x * pdf(x), 0.0, 1.0);
        let above = simpson(&|x| pdf(x), 1.0, hi.max(1.0));
        inside + above
    }

    #[test]
    fn clamped_normal_mean_matches_quadrature() {
        let expected = clamped_mean_by_quadrature(0.85, 0.15);
        // clamping at 1 pulls the mean down by about 0.0125
        assert!((expected - 0.83750).abs() < 1e-4, "{expected}");
        let draws: Vec<f64> =
            sample_normal_clamped(&mut SeededRng::new(2020), 0.85, 0.15, 100_000).unwrap();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - expected).abs() < 0.005, "{mean} vs {expected}");
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        let r = SeededRng::new(2020);
        assert_ne!(r.derive("a").seed(), r.derive("b").seed());
        assert_eq!(r.derive("a").seed(), SeededRng::new(2020).derive("a").seed());
    }

    #[test]
    fn matrix_rejects_bad_input() {
        assert!(RealMatrix::<f64>::new(2, 2, vec![1.0; 3]).is_err());
        assert!(RealMatrix::<f64>::new(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn matrix_products_agree() {
        let a = RealMatrix::<f64>::from_fn(3, 4, |i, j| (i * 4 + j) as f64 - 5.0);
        let b = RealMatrix::<f64>::from_fn(4, 2, |i, j| (i as f64) * 0.5 - j as f64);
        let ab = a.matmul(&b);
        let ab2 = a.affine(&b.transpose(), &[0.0, 0.0]);
        assert_eq!(ab, ab2);
        assert_eq!(a.transpose().matmul(&ab), a.t_matmul(&ab));
    }

    #[test]
    fn works_in_single_precision() {
        let p = softmax(&[0.0f32, 0.0]).unwrap();
        assert_eq!(p, vec![0.5f32, 0.5]);
        assert!((shannon_entropy(&p).unwrap() - 2f32.ln()).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..12), c in -100.0f64..100.0) {
            let p = softmax(&v).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_is_symmetric_and_scale_invariant(
            u in prop::collection::vec(0.1f64..5.0, 4),
            v in prop::collection::vec(-5.0f64..5.0, 4),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&v) > 1e-6);
            let s = cosine_similarity(&u, &v).unwrap();
            prop_assert!((s - cosine_similarity(&v, &u).unwrap()).abs() < 1e-15);
            let su: Vec<f64> = u.iter().map(|x| a * x).collect();
            let sv: Vec<f64> = v.iter().map(|x| b * x).collect();
            prop_assert!((s - cosine_similarity(&su, &sv).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn entropy_bounded_by_log_len(raw in prop::collection::vec(0.0f64..1.0, 1..10)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-9);
            let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let h = shannon_entropy(&p).unwrap();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn median_is_permutation_invariant(mut xs in prop::collection::vec(-1e3f64..1e3, 1..30), seed in any::<u64>()) {
            let m = median(&xs).unwrap();
            SeededRng::new(seed).shuffle(&mut xs);
            prop_assert_eq!(m, median(&xs).unwrap());
        }
    }
}
