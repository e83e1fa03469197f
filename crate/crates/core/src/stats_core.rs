//! Rank, ECDF and empirical-quantile kernels.
//!
//! Ties receive midranks, so the rank sum of a sample of size `n` is always
//! `n(n+1)/2`. Quantiles use the left-continuous inverse of the ECDF
//! (order statistic at index `ceil(alpha * n)`). NaN is rejected everywhere.

use std::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    Empty,
    #[error("sample contains NaN at position {0}")]
    NaN(usize),
    #[error("quantile level {0} outside (0, 1]")]
    LevelOutOfRange(f64),
}

fn check_finite_order(sample: &[f64]) -> Result<(), StatsError> {
    if sample.is_empty() {
        return Err(StatsError::Empty);
    }
    match sample.iter().position(|v| v.is_nan()) {
        Some(i) => Err(StatsError::NaN(i)),
        None => Ok(()),
    }
}

/// Total order on non-NaN floats.
#[inline]
pub(crate) fn cmp_f64(a: &f64, b: &f64) -> Ordering {
    a.partial_cmp(b).expect("NaN reached an ordered comparison")
}

/// Midranks aligned with the input order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankVector {
    pub values: Vec<f64>,
}

impl RankVector {
    pub fn n(&self) -> usize {
        self.values.len()
    }
}

/// Midranks of `sample` (average of the tied positions, 1-based).
pub fn ranks(sample: &[f64]) -> Result<RankVector, StatsError> {
    check_finite_order(sample)?;
    let mut order: Vec<usize> = (0..sample.len()).collect();
    order.sort_by(|&a, &b| cmp_f64(&sample[a], &sample[b]));
    let mut values = vec![0.0; sample.len()];
    let mut start = 0;
    while start < order.len() {
        let v = sample[order[start]];
        let mut end = start + 1;
        while end < order.len() && sample[order[end]] == v {
            end += 1;
        }
        // positions start+1 ..= end share the average rank
        let mid = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            values[i] = mid;
        }
        start = end;
    }
    Ok(RankVector { values })
}

/// Rank `x` would receive among `sample ∪ {x}` under midranks:
/// `1 + #{s < x} + 0.5 * #{s = x}`.
pub fn insertion_rank(sample: &[f64], x: f64) -> f64 {
    let mut below = 0usize;
    let mut equal = 0usize;
    for &s in sample {
        if s < x {
            below += 1;
        } else if s == x {
            equal += 1;
        }
    }
    1.0 + below as f64 + 0.5 * equal as f64
}

/// Index `ceil(alpha * n)` (1-based) with floating products that land within
/// rounding error of an integer snapped to it, so that e.g. `0.26 * 100`
/// selects the 26th order statistic rather than the 27th.
pub(crate) fn ceil_index(alpha: f64, n: usize) -> usize {
    let pos = alpha * n as f64;
    let nearest = pos.round();
    let k = if (pos - nearest).abs() <= 1e-9 * pos.abs().max(1.0) {
        nearest
    } else {
        pos.ceil()
    };
    (k as usize).clamp(1, n)
}

/// Empirical distribution of a finite sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf {
    sorted: Vec<f64>,
}

impl Ecdf {
    pub fn new(mut sample: Vec<f64>) -> Result<Self, StatsError> {
        check_finite_order(&sample)?;
        sample.sort_by(cmp_f64);
        Ok(Self { sorted: sample })
    }

    /// Wraps an already ascending sample without re-sorting.
    pub fn from_sorted(sorted: Vec<f64>) -> Result<Self, StatsError> {
        check_finite_order(&sorted)?;
        debug_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
        Ok(Self { sorted })
    }

    pub fn n(&self) -> usize {
        self.sorted.len()
    }

    pub fn sorted_sample(&self) -> &[f64] {
        &self.sorted
    }

    pub fn into_sorted(self) -> Vec<f64> {
        self.sorted
    }

    /// `#{s <= y}`.
    pub fn count_le(&self, y: f64) -> usize {
        self.sorted.partition_point(|&s| s <= y)
    }

    /// `#{s < y}`.
    pub fn count_lt(&self, y: f64) -> usize {
        self.sorted.partition_point(|&s| s < y)
    }

    /// `n⁻¹ · #{s <= y}`.
    pub fn eval(&self, y: f64) -> f64 {
        self.count_le(y) as f64 / self.n() as f64
    }

    /// ECDF just below `y`: `n⁻¹ · #{s < y}`.
    pub fn eval_below(&self, y: f64) -> f64 {
        self.count_lt(y) as f64 / self.n() as f64
    }

    /// 1-based order statistic.
    pub fn order_statistic(&self, k: usize) -> f64 {
        self.sorted[k.clamp(1, self.n()) - 1]
    }

    /// Left-continuous inverse: order statistic at `ceil(alpha * n)`.
    pub fn quantile(&self, alpha: f64) -> Result<f64, StatsError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(StatsError::LevelOutOfRange(alpha));
        }
        Ok(self.order_statistic(ceil_index(alpha, self.n())))
    }

    pub fn min(&self) -> f64 {
        self.sorted[0]
    }

    pub fn max(&self) -> f64 {
        self.sorted[self.n() - 1]
    }
}

/// Free-function form of [`Ecdf::eval`].
pub fn ecdf_eval(ecdf: &Ecdf, y: f64) -> f64 {
    ecdf.eval(y)
}

/// Free-function form of [`Ecdf::quantile`].
pub fn empirical_quantile(ecdf: &Ecdf, alpha: f64) -> Result<f64, StatsError> {
    ecdf.quantile(alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranks_strict_and_tied() {
        assert_eq!(ranks(&[3.2, 1.1, 5.0]).unwrap().values, vec![2.0, 1.0, 3.0]);
        assert_eq!(
            ranks(&[1.0, 2.0, 2.0, 3.0]).unwrap().values,
            vec![1.0, 2.5, 2.5, 4.0]
        );
        assert_eq!(ranks(&[7.0]).unwrap().values, vec![1.0]);
    }

    #[test]
    fn ranks_reject_empty_and_nan() {
        assert_eq!(ranks(&[]), Err(StatsError::Empty));
        assert_eq!(ranks(&[1.0, f64::NAN]), Err(StatsError::NaN(1)));
        assert!(Ecdf::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn insertion_rank_examples() {
        let sample: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(insertion_rank(&sample, 50.5), 51.0);
        assert_eq!(insertion_rank(&sample, -3.0), 1.0);
        assert_eq!(insertion_rank(&[5.0], 5.0), 1.5);
    }

    #[test]
    fn ecdf_examples() {
        let e = Ecdf::new((1..=20).map(f64::from).collect()).unwrap();
        assert_eq!(e.eval(10.0), 0.5);
        assert_eq!(e.eval(0.0), 0.0);
        assert_eq!(e.eval(20.0), 1.0);
    }

    #[test]
    fn quantile_examples() {
        let e = Ecdf::new(vec![40.0, 10.0, 30.0, 20.0]).unwrap();
        assert_eq!(e.quantile(0.5).unwrap(), 20.0);
        assert_eq!(e.quantile(1.0).unwrap(), 40.0);
        assert!(e.quantile(0.0).is_err());
        assert!(e.quantile(1.2).is_err());

        // brute-force order statistic for alpha = 0.26, n = 100
        let sample: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64 * 1.5).collect();
        let mut sorted = sample.clone();
        sorted.sort_by(cmp_f64);
        let e = Ecdf::new(sample).unwrap();
        assert_eq!(e.quantile(0.26).unwrap(), sorted[25]);
    }

    fn sample_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50i32..50, 1..200)
            .prop_map(|v| v.into_iter().map(|x| x as f64 * 0.5).collect())
    }

    proptest! {
        #[test]
        fn rank_sum_is_invariant(sample in sample_strategy()) {
            let n = sample.len() as f64;
            let r = ranks(&sample).unwrap();
            let sum: f64 = r.values.iter().sum();
            prop_assert_eq!(sum, n * (n + 1.0) / 2.0);
            prop_assert!(r.values.iter().all(|&v| v >= 1.0 && v <= n));
        }

        #[test]
        fn ranks_permutation_equivariant(sample in sample_strategy(), seed in 0u64..1000) {
            let n = sample.len();
            let perm: Vec<usize> = {
                let mut p: Vec<usize> = (0..n).collect();
                // deterministic shuffle from seed
                let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
                for i in (1..n).rev() {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let j = (state >> 33) as usize % (i + 1);
                    p.swap(i, j);
                }
                p
            };
            let permuted: Vec<f64> = perm.iter().map(|&i| sample[i]).collect();
            let r = ranks(&sample).unwrap().values;
            let rp = ranks(&permuted).unwrap().values;
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(rp[k], r[i]);
            }
        }

        #[test]
        fn ranks_invariant_under_monotone_map(sample in sample_strategy()) {
            let mapped: Vec<f64> = sample.iter().map(|&x| x.powi(3) + 2.0 * x).collect();
            prop_assert_eq!(ranks(&sample).unwrap(), ranks(&mapped).unwrap());
        }

        #[test]
        fn insertion_rank_matches_full_ranking(sample in sample_strategy(), x in -60i32..60) {
            let x = x as f64 * 0.5;
            let mut all = sample.clone();
            all.push(x);
            let r = ranks(&all).unwrap();
            prop_assert_eq!(insertion_rank(&sample, x), r.values[sample.len()]);
        }

        #[test]
        fn ecdf_quantile_roundtrip(sample in sample_strategy(), a in 1u32..=1000) {
            let alpha = a as f64 / 1000.0;
            let e = Ecdf::new(sample).unwrap();
            let q = e.quantile(alpha).unwrap();
            prop_assert!(e.eval(q) >= alpha - 1e-12);
        }

        #[test]
        fn ecdf_monotone(sample in sample_strategy(), a in -60i32..60, b in -60i32..60) {
            let e = Ecdf::new(sample).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(e.eval(lo as f64 * 0.5) <= e.eval(hi as f64 * 0.5));
        }
    }
}
