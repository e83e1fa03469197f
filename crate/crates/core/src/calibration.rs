//! PIT accumulation and calibration scores (Δq, Kolmogorov-Smirnov,
//! Cramér-von Mises) against the uniform reference.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats_core::{cmp_f64, Ecdf, StatsError};

/// Default quantile levels for Δq.
pub const DEFAULT_LEVELS: [f64; 9] = [0.01, 0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95, 0.99];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("empty PIT sample")]
    Empty,
    #[error("PIT value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("quantile levels must be strictly increasing inside (0, 1)")]
    InvalidLevels,
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Exact PIT values of many forecast cases.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PitSample {
    values: Vec<f64>,
}

impl PitSample {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self, CalibrationError> {
        if let Some(&bad) = values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(CalibrationError::OutOfRange(bad));
        }
        Ok(Self { values })
    }

    pub fn push(&mut self, p: f64) -> Result<(), CalibrationError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(CalibrationError::OutOfRange(p));
        }
        self.values.push(p);
        Ok(())
    }

    pub fn extend(&mut self, other: &PitSample) {
        self.values.extend_from_slice(&other.values);
    }

    /// Multiset union.
    pub fn merge(mut self, other: PitSample) -> PitSample {
        self.values.extend(other.values);
        self
    }

    pub fn m(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn sorted(&self) -> Result<Vec<f64>, CalibrationError> {
        if self.values.is_empty() {
            return Err(CalibrationError::Empty);
        }
        let mut s = self.values.clone();
        s.sort_by(cmp_f64);
        Ok(s)
    }

    /// Counts per equal-width bin on [0, 1]; 1.0 falls in the last bin.
    pub fn histogram(&self, bins: usize) -> Vec<usize> {
        let mut counts = vec![0usize; bins.max(1)];
        let b = counts.len();
        for &p in &self.values {
            counts[((p * b as f64) as usize).min(b - 1)] += 1;
        }
        counts
    }
}

fn check_levels(levels: &[f64]) -> Result<(), CalibrationError> {
    let inside = levels.iter().all(|&a| a > 0.0 && a < 1.0);
    let increasing = levels.windows(2).all(|w| w[0] < w[1]);
    if levels.is_empty() || !inside || !increasing {
        return Err(CalibrationError::InvalidLevels);
    }
    Ok(())
}

/// Sum of absolute differences between empirical PIT quantiles and levels.
pub fn delta_q(sample: &PitSample, levels: &[f64]) -> Result<f64, CalibrationError> {
    check_levels(levels)?;
    let ecdf = Ecdf::from_sorted(sample.sorted()?)?;
    levels
        .iter()
        .map(|&a| Ok((ecdf.quantile(a)? - a).abs()))
        .sum()
}

/// Upper bound of Δq for the given levels. Empirical quantiles are
/// non-decreasing in the level, so the sum is maximal when every quantile is
/// 0 or every quantile is 1.
pub fn delta_q_bound(levels: &[f64]) -> f64 {
    let low: f64 = levels.iter().sum();
    let high: f64 = levels.iter().map(|&a| 1.0 - a).sum();
    low.max(high)
}

/// `sqrt(m) * sup |G_m - U|`.
pub fn ks_stat(sample: &PitSample) -> Result<f64, CalibrationError> {
    let s = sample.sorted()?;
    Ok(ks_sorted(&s))
}

fn ks_sorted(s: &[f64]) -> f64 {
    let m = s.len() as f64;
    let sup = s
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let i = i as f64;
            ((i + 1.0) / m - p).max(p - i / m)
        })
        .fold(0.0f64, f64::max);
    m.sqrt() * sup
}

/// `m * ∫ (G_m - U)² dU` in closed form.
pub fn cvm_stat(sample: &PitSample) -> Result<f64, CalibrationError> {
    let s = sample.sorted()?;
    Ok(cvm_sorted(&s))
}

fn cvm_sorted(s: &[f64]) -> f64 {
    let m = s.len() as f64;
    let sum: f64 = s
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let d = p - (2.0 * i as f64 + 1.0) / (2.0 * m);
            d * d
        })
        .sum();
    1.0 / (12.0 * m) + sum
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub m: usize,
    pub delta_q: f64,
    pub ks: f64,
    pub cvm: f64,
    pub levels: Vec<f64>,
}

impl CalibrationReport {
    pub fn from_sample(sample: &PitSample, levels: &[f64]) -> Result<Self, CalibrationError> {
        check_levels(levels)?;
        let s = sample.sorted()?;
        let ecdf = Ecdf::from_sorted(s)?;
        let delta_q = levels
            .iter()
            .map(|&a| Ok((ecdf.quantile(a)? - a).abs()))
            .sum::<Result<f64, CalibrationError>>()?;
        let s = ecdf.sorted_sample();
        Ok(Self {
            m: s.len(),
            delta_q,
            ks: ks_sorted(s),
            cvm: cvm_sorted(s),
            levels: levels.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(v: &[f64]) -> PitSample {
        PitSample::from_values(v.to_vec()).unwrap()
    }

    #[test]
    fn delta_q_degenerate_samples() {
        assert_abs_diff_eq!(delta_q(&sample(&[0.5; 40]), &DEFAULT_LEVELS).unwrap(), 3.18, epsilon = 1e-12);
        assert_abs_diff_eq!(delta_q(&sample(&[0.0; 40]), &DEFAULT_LEVELS).unwrap(), 4.5, epsilon = 1e-12);
        assert_abs_diff_eq!(delta_q(&sample(&[1.0; 7]), &DEFAULT_LEVELS).unwrap(), 4.5, epsilon = 1e-12);
        assert_abs_diff_eq!(delta_q_bound(&DEFAULT_LEVELS), 4.5, epsilon = 1e-12);
    }

    #[test]
    fn delta_q_perfect() {
        // 100 values k/100: the ceil(100a)-th order statistic equals a
        let v: Vec<f64> = (1..=100).map(|k| k as f64 / 100.0).collect();
        assert_abs_diff_eq!(delta_q(&sample(&v), &DEFAULT_LEVELS).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn errors() {
        assert_eq!(delta_q(&PitSample::new(), &DEFAULT_LEVELS), Err(CalibrationError::Empty));
        assert_eq!(ks_stat(&PitSample::new()), Err(CalibrationError::Empty));
        assert_eq!(cvm_stat(&PitSample::new()), Err(CalibrationError::Empty));
        assert_eq!(delta_q(&sample(&[0.2]), &[0.5, 0.4]), Err(CalibrationError::InvalidLevels));
        assert_eq!(delta_q(&sample(&[0.2]), &[0.0, 0.4]), Err(CalibrationError::InvalidLevels));
        assert!(PitSample::new().push(1.5).is_err());
        assert!(PitSample::new().push(f64::NAN).is_err());
    }

    #[test]
    fn ks_examples() {
        assert_abs_diff_eq!(ks_stat(&sample(&[0.5])).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(ks_stat(&sample(&[0.5, 0.5])).unwrap(), 0.5 * 2f64.sqrt(), epsilon = 1e-15);
        for m in [1usize, 5, 50, 400] {
            let v: Vec<f64> = (1..=m).map(|i| i as f64 / (m + 1) as f64).collect();
            let mf = m as f64;
            assert_abs_diff_eq!(ks_stat(&sample(&v)).unwrap(), mf.sqrt() / (mf + 1.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn cvm_examples() {
        assert_abs_diff_eq!(cvm_stat(&sample(&[0.5])).unwrap(), 1.0 / 12.0, epsilon = 1e-15);
        for m in [1usize, 10, 300] {
            let v: Vec<f64> = (1..=m).map(|i| (2 * i - 1) as f64 / (2 * m) as f64).collect();
            assert_abs_diff_eq!(cvm_stat(&sample(&v)).unwrap(), 1.0 / (12.0 * m as f64), epsilon = 1e-14);
        }
    }

    /// Exact integral of (G_m(x) - x)² over [0,1]: piecewise quadratic between
    /// sorted sample points.
    fn cvm_piecewise(v: &[f64]) -> f64 {
        let mut s = v.to_vec();
        s.sort_by(cmp_f64);
        let m = s.len() as f64;
        let mut knots = vec![0.0];
        knots.extend(&s);
        knots.push(1.0);
        let mut total = 0.0;
        for i in 0..knots.len() - 1 {
            let (a, b) = (knots[i], knots[i + 1]);
            let g = i as f64 / m;
            // ∫_a^b (g - x)² dx
            total += ((b - g).powi(3) - (a - g).powi(3)) / 3.0;
        }
        m * total
    }

    #[test]
    fn report_matches_individual_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..500).map(|_| rng.random()).collect();
        let s = sample(&v);
        let r = CalibrationReport::from_sample(&s, &DEFAULT_LEVELS).unwrap();
        assert_eq!(r.m, 500);
        assert_eq!(r.delta_q, delta_q(&s, &DEFAULT_LEVELS).unwrap());
        assert_eq!(r.ks, ks_stat(&s).unwrap());
        assert_eq!(r.cvm, cvm_stat(&s).unwrap());
        assert_abs_diff_eq!(r.cvm, cvm_piecewise(&v), epsilon = 1e-9);
    }

    #[test]
    fn uniform_samples_score_small() {
        let mut within = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = sample(&(0..10_000).map(|_| rng.random::<f64>()).collect::<Vec<_>>());
            let r = CalibrationReport::from_sample(&s, &DEFAULT_LEVELS).unwrap();
            if r.delta_q <= 0.10 && r.ks <= 2.0 {
                within += 1;
            }
        }
        assert!(within >= 99, "{within}");
    }

    #[test]
    fn histogram_counts() {
        let s = sample(&[0.0, 0.05, 0.1, 0.55, 1.0]);
        assert_eq!(s.histogram(10), vec![2, 1, 0, 0, 0, 1, 0, 0, 0, 1]);
    }

    fn pits() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0u32..=1000, 0..60).prop_map(|v| v.into_iter().map(|x| x as f64 / 1000.0).collect())
    }

    proptest! {
        #[test]
        fn delta_q_within_bounds(v in pits()) {
            prop_assume!(!v.is_empty());
            let d = delta_q(&sample(&v), &DEFAULT_LEVELS).unwrap();
            prop_assert!(d >= 0.0 && d <= delta_q_bound(&DEFAULT_LEVELS) + 1e-12);
        }

        #[test]
        fn merge_commutes_and_associates(a in pits(), b in pits(), c in pits()) {
            let (sa, sb, sc) = (sample(&a), sample(&b), sample(&c));
            let ab = sa.clone().merge(sb.clone());
            let ba = sb.clone().merge(sa.clone());
            prop_assert_eq!(ab.m(), a.len() + b.len());
            if !ab.is_empty() {
                prop_assert_eq!(
                    CalibrationReport::from_sample(&ab, &DEFAULT_LEVELS).unwrap(),
                    CalibrationReport::from_sample(&ba, &DEFAULT_LEVELS).unwrap()
                );
            }
            let left = sa.clone().merge(sb.clone()).merge(sc.clone());
            let right = sa.clone().merge(sb.merge(sc));
            if !left.is_empty() {
                prop_assert_eq!(
                    CalibrationReport::from_sample(&left, &DEFAULT_LEVELS).unwrap(),
                    CalibrationReport::from_sample(&right, &DEFAULT_LEVELS).unwrap()
                );
            }
            prop_assert_eq!(sa.clone().merge(PitSample::new()), sa);
        }

        #[test]
        fn scores_permutation_invariant(v in pits()) {
            prop_assume!(!v.is_empty());
            let mut r = v.clone();
            r.reverse();
            prop_assert_eq!(ks_stat(&sample(&v)).unwrap(), ks_stat(&sample(&r)).unwrap());
            prop_assert_eq!(cvm_stat(&sample(&v)).unwrap(), cvm_stat(&sample(&r)).unwrap());
        }

        #[test]
        fn cvm_matches_exact_integral(v in pits()) {
            prop_assume!(!v.is_empty());
            let c = cvm_stat(&sample(&v)).unwrap();
            prop_assert!((c - cvm_piecewise(&v)).abs() <= 1e-8 * c.max(1.0));
        }
    }
}
