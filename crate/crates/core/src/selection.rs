//! Candidate sets and reference-class selectors.
//!
//! A candidate set holds every firm-year inside the backward window of a
//! forecast case whose h-year outcome is observed. Selectors pick a subset of
//! at least [`MIN_CLASS_SIZE`] members. Candidates are kept in ascending
//! (year, firm_id) order, and that order breaks every distance tie.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel_store::{FirmYear, Panel, VariableKey};
use crate::pca_engine::{self, Matrix, PcaError, PcaModel, PcaOptions, Transform};
use crate::stats_core::{ceil_index, cmp_f64};

/// Smallest admissible reference class.
pub const MIN_CLASS_SIZE: usize = 20;
/// Upper bound of the corrected per-variable size for intersections.
pub const INTERSECTION_SIZE_CAP: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("{found} candidates (< {MIN_CLASS_SIZE})")]
    InsufficientCandidates { found: usize },
    #[error("reference class has {size} members (< {MIN_CLASS_SIZE})")]
    UndersizedClass { size: usize },
    #[error("candidate window {first}..={last} is outside the panel years {start}..={end}")]
    WindowOutsidePanel { first: i32, last: i32, start: i32, end: i32 },
    #[error("target lacks {0}")]
    MissingTargetValue(String),
    #[error("target has {got} values, expected {expected}")]
    TargetDimension { expected: usize, got: usize },
    #[error("invalid selector configuration: {0}")]
    InvalidConfig(String),
    #[error("pca: {0}")]
    Pca(#[from] PcaError),
}

/// One forecast challenge: firm `target` at base year t, horizon h, window w.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecastCase {
    pub target: FirmYear,
    pub horizon: u32,
    pub reference_variables: Vec<VariableKey>,
    pub window: u32,
}

impl ForecastCase {
    /// Candidate years `t-h-w+1 ..= t-h`.
    pub fn window_years(&self) -> (i32, i32) {
        window_years(self.target.year, self.horizon, self.window)
    }
}

pub fn window_years(base_year: i32, horizon: u32, window: u32) -> (i32, i32) {
    let last = base_year - horizon as i32;
    (last - window as i32 + 1, last)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Availability {
    /// Every reference variable must be observed.
    AllVariables,
    /// Availability tracked per variable; a member needs at least one.
    PerVariable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub key: FirmYear,
    pub values: Vec<Option<f64>>,
    pub outcome: f64,
    pub sic: Option<u32>,
    pub sales: Option<f64>,
}

/// One reference variable over the candidates: observed members, their values
/// sorted, and midranks among the observed candidates.
#[derive(Debug, Clone)]
pub(crate) struct RankColumn {
    observed: Vec<usize>,
    values: Vec<f64>,
    ranks: Vec<f64>,
    sorted: Vec<f64>,
}

impl RankColumn {
    fn new(entries: impl Iterator<Item = (usize, f64)>) -> Self {
        let (observed, values): (Vec<usize>, Vec<f64>) = entries.unzip();
        let mut sorted = values.clone();
        sorted.sort_by(cmp_f64);
        let ranks = values
            .iter()
            .map(|&v| {
                let below = sorted.partition_point(|&s| s < v);
                let upto = sorted.partition_point(|&s| s <= v);
                below as f64 + (upto - below + 1) as f64 / 2.0
            })
            .collect();
        Self {
            observed,
            values,
            ranks,
            sorted,
        }
    }

    fn from_options(column: &[Option<f64>]) -> Self {
        Self::new(column.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v))))
    }

    fn from_dense(column: &[f64]) -> Self {
        Self::new(column.iter().copied().enumerate())
    }

    fn len(&self) -> usize {
        self.observed.len()
    }

    /// Absolute rank deviation of every observed member from `x`, with ranks
    /// taken over the observed candidates plus the target.
    fn deviations(&self, x: f64) -> impl Iterator<Item = (usize, f64)> + '_ {
        let below = self.sorted.partition_point(|&s| s < x);
        let upto = self.sorted.partition_point(|&s| s <= x);
        let target_rank = 1.0 + below as f64 + 0.5 * (upto - below) as f64;
        self.observed
            .iter()
            .zip(self.values.iter().zip(&self.ranks))
            .map(move |(&m, (&v, &r))| {
                let shift = if x < v {
                    1.0
                } else if x == v {
                    0.5
                } else {
                    0.0
                };
                (m, (r + shift - target_rank).abs())
            })
    }
}

#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub base_year: i32,
    pub horizon: u32,
    pub window: u32,
    pub variables: Vec<VariableKey>,
    pub members: Vec<Candidate>,
    columns: Vec<RankColumn>,
}

impl CandidateSet {
    pub fn new(
        base_year: i32,
        horizon: u32,
        window: u32,
        variables: Vec<VariableKey>,
        mut members: Vec<Candidate>,
    ) -> Result<Self, SelectionError> {
        if members.len() < MIN_CLASS_SIZE {
            return Err(SelectionError::InsufficientCandidates {
                found: members.len(),
            });
        }
        members.sort_by(|a, b| (a.key.year, &a.key.firm_id).cmp(&(b.key.year, &b.key.firm_id)));
        let columns = (0..variables.len())
            .map(|v| {
                let col: Vec<Option<f64>> = members.iter().map(|m| m.values[v]).collect();
                RankColumn::from_options(&col)
            })
            .collect();
        Ok(Self {
            base_year,
            horizon,
            window,
            variables,
            members,
            columns,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Number of members observing variable `v`.
    pub fn observed_count(&self, v: usize) -> usize {
        self.columns[v].len()
    }

    fn class_from(&self, mut idx: Vec<usize>, config: Option<&SelectorConfig>) -> Result<ReferenceClass, SelectionError> {
        if idx.len() < MIN_CLASS_SIZE {
            return Err(SelectionError::UndersizedClass { size: idx.len() });
        }
        idx.sort_unstable();
        idx.dedup();
        Ok(ReferenceClass {
            members: idx.iter().map(|&i| self.members[i].key.clone()).collect(),
            outcomes: idx.iter().map(|&i| self.members[i].outcome).collect(),
            indices: idx,
            candidate_count: self.len(),
            components: None,
            config: config.cloned(),
        })
    }
}

/// Collects the candidates of a forecast case from the panel.
pub fn build_candidates(panel: &Panel, case: &ForecastCase, availability: Availability) -> Result<CandidateSet, SelectionError> {
    let (first, last) = case.window_years();
    if first < panel.start_year() || last > panel.end_year() {
        return Err(SelectionError::WindowOutsidePanel {
            first,
            last,
            start: panel.start_year(),
            end: panel.end_year(),
        });
    }
    let vars = &case.reference_variables;
    let mut members = Vec::new();
    for year in first..=last {
        for obs in panel.year(year) {
            let Some(outcome) = panel.forward_growth(&obs.key.firm_id, year, case.horizon) else {
                continue;
            };
            let values: Vec<Option<f64>> = vars.iter().map(|&v| obs.get(v)).collect();
            let keep = match availability {
                Availability::AllVariables => values.iter().all(Option::is_some),
                Availability::PerVariable => vars.is_empty() || values.iter().any(Option::is_some),
            };
            if keep {
                members.push(Candidate {
                    key: obs.key.clone(),
                    values,
                    outcome,
                    sic: obs.sic,
                    sales: obs.get(VariableKey::SALES),
                });
            }
        }
    }
    CandidateSet::new(case.target.year, case.horizon, case.window, vars.clone(), members)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    MarketClimate,
    GroupMajor,
    GroupIndustry,
    McDeciles,
    RankDeviation,
    PcaRankDeviation,
}

impl Algorithm {
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::MarketClimate => "market",
            Algorithm::GroupMajor => "group_major",
            Algorithm::GroupIndustry => "group_industry",
            Algorithm::McDeciles => "mc",
            Algorithm::RankDeviation => "rd",
            Algorithm::PcaRankDeviation => "pca",
        }
    }

    /// Whether the algorithm consumes reference variables.
    pub fn uses_variables(self) -> bool {
        matches!(self, Algorithm::RankDeviation | Algorithm::PcaRankDeviation)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "market" | "market_climate" => Algorithm::MarketClimate,
            "group_major" | "group2" => Algorithm::GroupMajor,
            "group_industry" | "group3" => Algorithm::GroupIndustry,
            "mc" | "mc_deciles" => Algorithm::McDeciles,
            "rd" | "rank_deviation" => Algorithm::RankDeviation,
            "pca" | "pca_rank_deviation" => Algorithm::PcaRankDeviation,
            _ => return Err(format!("unknown algorithm `{s}`")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combination {
    Lard,
    Union,
    Intersection,
}

impl Combination {
    pub fn label(self) -> &'static str {
        match self {
            Combination::Lard => "lard",
            Combination::Union => "union",
            Combination::Intersection => "intersection",
        }
    }
}

impl fmt::Display for Combination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Combination {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "lard" => Combination::Lard,
            "union" => Combination::Union,
            "intersection" | "inters" => Combination::Intersection,
            _ => return Err(format!("unknown combination `{s}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub algorithm: Algorithm,
    #[serde(default = "default_size")]
    pub size: f64,
    #[serde(default = "default_combination")]
    pub combination: Combination,
    #[serde(default)]
    pub correction: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pca: Option<PcaOptions>,
}

fn default_size() -> f64 {
    0.05
}

fn default_combination() -> Combination {
    Combination::Lard
}

impl SelectorConfig {
    pub fn market_climate() -> Self {
        Self::benchmark(Algorithm::MarketClimate)
    }

    pub fn benchmark(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            size: default_size(),
            combination: Combination::Lard,
            correction: false,
            pca: None,
        }
    }

    pub fn rank_deviation(size: f64, combination: Combination, correction: bool) -> Self {
        Self {
            algorithm: Algorithm::RankDeviation,
            size,
            combination,
            correction: correction && combination != Combination::Lard,
            pca: None,
        }
    }

    pub fn pca_rank_deviation(size: f64, combination: Combination, correction: bool, pca: PcaOptions) -> Self {
        Self {
            algorithm: Algorithm::PcaRankDeviation,
            pca: Some(pca),
            ..Self::rank_deviation(size, combination, correction)
        }
    }

    pub fn validate(&self) -> Result<(), SelectionError> {
        if self.algorithm.uses_variables() && !(self.size > 0.0 && self.size < 1.0) {
            return Err(SelectionError::InvalidConfig(format!("size {} outside (0,1)", self.size)));
        }
        if self.algorithm == Algorithm::PcaRankDeviation && self.pca.is_none() {
            return Err(SelectionError::InvalidConfig("pca options missing".into()));
        }
        Ok(())
    }

    /// Candidate availability this selector needs.
    pub fn availability(&self) -> Availability {
        match (self.algorithm, self.combination) {
            (Algorithm::MarketClimate, _) => Availability::PerVariable,
            (Algorithm::RankDeviation, Combination::Union) => Availability::PerVariable,
            _ => Availability::AllVariables,
        }
    }

    /// Variables the candidate set must carry for `variables` under this
    /// selector (benchmarks need none of the reference variables).
    pub fn candidate_variables(&self, variables: &[VariableKey]) -> Vec<VariableKey> {
        match self.algorithm {
            Algorithm::RankDeviation | Algorithm::PcaRankDeviation => variables.to_vec(),
            Algorithm::McDeciles => vec![VariableKey::SALES],
            Algorithm::GroupMajor | Algorithm::GroupIndustry | Algorithm::MarketClimate => Vec::new(),
        }
    }
}

/// Selected members (in candidate order) with their realized outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceClass {
    pub members: Vec<FirmYear>,
    pub outcomes: Vec<f64>,
    /// Positions of the members in the candidate set.
    pub indices: Vec<usize>,
    pub candidate_count: usize,
    /// Principal components used, for PCA selection.
    pub components: Option<usize>,
    pub config: Option<SelectorConfig>,
}

impl ReferenceClass {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// `ceil(fraction * n)` with near-integer products snapped first.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    ceil_index(fraction, n)
}

/// Per-variable size after the union/intersection correction.
pub fn corrected_size(size: f64, kappa: usize, combination: Combination, correction: bool) -> f64 {
    match (combination, correction) {
        (Combination::Union, true) => size / kappa as f64,
        (Combination::Intersection, true) => (size * kappa as f64).min(INTERSECTION_SIZE_CAP),
        _ => size,
    }
}

/// Indices of the `k` smallest deviations, ties broken by candidate order,
/// returned ascending.
fn nearest(mut deviations: Vec<(usize, f64)>, k: usize) -> Vec<usize> {
    let k = k.min(deviations.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &(usize, f64), b: &(usize, f64)| cmp_f64(&a.1, &b.1).then(a.0.cmp(&b.0));
    if k < deviations.len() {
        deviations.select_nth_unstable_by(k - 1, cmp);
        deviations.truncate(k);
    }
    let mut idx: Vec<usize> = deviations.into_iter().map(|(i, _)| i).collect();
    idx.sort_unstable();
    idx
}

/// Single-variable building block: the `k` observed candidates with least
/// absolute rank deviation from `x`.
pub(crate) fn single_variable_nearest(column: &RankColumn, x: f64, k: usize) -> Vec<usize> {
    nearest(column.deviations(x).collect(), k)
}

/// Nearest `k` candidates to `x` by rank deviation on one dense column, with
/// no minimum-size floor. Exposed for tests and diagnostics.
pub fn nearest_by_rank(values: &[f64], x: f64, k: usize) -> Vec<usize> {
    single_variable_nearest(&RankColumn::from_dense(values), x, k)
}

fn per_variable_size(fraction: f64, observed: usize) -> usize {
    fraction_count(fraction, observed).max(MIN_CLASS_SIZE).min(observed)
}

fn rank_deviation_indices(
    columns: &[RankColumn],
    n_members: usize,
    target: &[f64],
    size: f64,
    combination: Combination,
    correction: bool,
) -> Result<Vec<usize>, SelectionError> {
    let kappa = columns.len();
    if kappa == 0 {
        return Err(SelectionError::InvalidConfig("no reference variables".into()));
    }
    if target.len() != kappa {
        return Err(SelectionError::TargetDimension {
            expected: kappa,
            got: target.len(),
        });
    }
    match combination {
        Combination::Lard => {
            // members observed in every column
            let mut count = vec![0usize; n_members];
            let mut dist = vec![0.0f64; n_members];
            for (col, &x) in columns.iter().zip(target) {
                for (m, d) in col.deviations(x) {
                    count[m] += 1;
                    dist[m] += d;
                }
            }
            let devs: Vec<(usize, f64)> = (0..n_members)
                .filter(|&m| count[m] == kappa)
                .map(|m| (m, dist[m]))
                .collect();
            let k = per_variable_size(size, devs.len());
            Ok(nearest(devs, k))
        }
        Combination::Union | Combination::Intersection => {
            let c = corrected_size(size, kappa, combination, correction);
            let mut classes = columns
                .iter()
                .zip(target)
                .map(|(col, &x)| single_variable_nearest(col, x, per_variable_size(c, col.len())));
            let first: BTreeSet<usize> = classes.next().unwrap_or_default().into_iter().collect();
            let set = classes.fold(first, |acc, class| {
                let other: BTreeSet<usize> = class.into_iter().collect();
                if combination == Combination::Union {
                    acc.union(&other).copied().collect()
                } else {
                    acc.intersection(&other).copied().collect()
                }
            });
            Ok(set.into_iter().collect())
        }
    }
}

/// The whole candidate set.
pub fn select_market_climate(cands: &CandidateSet) -> Result<ReferenceClass, SelectionError> {
    cands.class_from((0..cands.len()).collect(), Some(&SelectorConfig::market_climate()))
}

/// Candidates sharing the leading `digits` SIC digits with the target.
pub fn select_group(cands: &CandidateSet, target_sic: u32, digits: u32) -> Result<ReferenceClass, SelectionError> {
    let idx = group_indices(cands, target_sic, digits)?;
    let algorithm = if digits == 2 {
        Algorithm::GroupMajor
    } else {
        Algorithm::GroupIndustry
    };
    cands.class_from(idx, Some(&SelectorConfig::benchmark(algorithm)))
}

fn group_indices(cands: &CandidateSet, target_sic: u32, digits: u32) -> Result<Vec<usize>, SelectionError> {
    if !(1..=4).contains(&digits) {
        return Err(SelectionError::InvalidConfig(format!("sic digits {digits}")));
    }
    let div = 10u32.pow(4 - digits);
    let prefix = target_sic / div;
    Ok(cands
        .members
        .iter()
        .enumerate()
        .filter(|(_, m)| m.sic.is_some_and(|s| s / div == prefix))
        .map(|(i, _)| i)
        .collect())
}

/// Sales-decile classes plus a top-percentile class.
pub fn select_mc(cands: &CandidateSet, target_sales: f64) -> Result<ReferenceClass, SelectionError> {
    let idx = mc_indices(cands, target_sales)?;
    cands.class_from(idx, Some(&SelectorConfig::benchmark(Algorithm::McDeciles)))
}

fn mc_indices(cands: &CandidateSet, target_sales: f64) -> Result<Vec<usize>, SelectionError> {
    let observed: Vec<(usize, f64)> = cands
        .members
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.sales.map(|s| (i, s)))
        .collect();
    if observed.len() < MIN_CLASS_SIZE {
        return Err(SelectionError::InsufficientCandidates {
            found: observed.len(),
        });
    }
    let mut sorted: Vec<f64> = observed.iter().map(|&(_, s)| s).collect();
    sorted.sort_by(cmp_f64);
    let n = sorted.len();
    // order statistic at ceil(k n / d), computed in integers
    let stat = |k: usize, d: usize| sorted[(k * n).div_ceil(d).clamp(1, n) - 1];
    let top = stat(99, 100);
    let (lo, hi) = if target_sales > top {
        (top, f64::INFINITY)
    } else {
        let bounds: Vec<f64> = (1..10).map(|k| stat(k, 10)).collect();
        let d = bounds.iter().position(|&b| target_sales <= b).unwrap_or(9);
        let lo = if d == 0 { f64::NEG_INFINITY } else { bounds[d - 1] };
        let hi = if d == 9 { f64::INFINITY } else { bounds[d] };
        (lo, hi)
    };
    Ok(observed
        .iter()
        .filter(|&&(_, s)| s > lo && s <= hi)
        .map(|&(i, _)| i)
        .collect())
}

/// Rank-deviation selection on the candidate set's reference variables.
pub fn select_rank_deviation(cands: &CandidateSet, target_values: &[f64], config: &SelectorConfig) -> Result<ReferenceClass, SelectionError> {
    let idx = rank_deviation_indices(
        &cands.columns,
        cands.len(),
        target_values,
        config.size,
        config.combination,
        config.correction,
    )?;
    cands.class_from(idx, Some(config))
}

/// PCA state fit once per candidate set and reused for every target.
#[derive(Debug, Clone)]
pub struct PreparedPca {
    pub model: PcaModel,
    options: PcaOptions,
    raw: Matrix,
    /// Sorted raw columns, for ranking the target under the ranks transform.
    raw_sorted: Vec<Vec<f64>>,
    columns: Vec<RankColumn>,
}

impl PreparedPca {
    pub fn new(cands: &CandidateSet, options: PcaOptions) -> Result<Self, SelectionError> {
        let rows: Option<Vec<Vec<f64>>> = cands
            .members
            .iter()
            .map(|m| m.values.iter().copied().collect::<Option<Vec<f64>>>())
            .collect();
        let rows = rows.ok_or_else(|| {
            SelectionError::InvalidConfig("pca selection needs every variable observed".into())
        })?;
        let raw = Matrix::from_rows(&rows);
        let (model, transformed) = pca_engine::fit_candidates(&raw, &options)?;
        let projected_rows = match options.transform {
            Transform::Trim => &raw,
            _ => &transformed.data,
        };
        let placeholder = vec![0.0; raw.cols()];
        let (projected, _) = pca_engine::project(&model, projected_rows, &placeholder)?;
        let columns = (0..projected.cols())
            .map(|c| RankColumn::from_dense(&projected.column(c)))
            .collect();
        let raw_sorted = (0..raw.cols())
            .map(|j| {
                let mut c = raw.column(j);
                c.sort_by(cmp_f64);
                c
            })
            .collect();
        Ok(Self {
            model,
            options,
            raw,
            raw_sorted,
            columns,
        })
    }

    pub fn components(&self) -> usize {
        self.model.n_components
    }

    /// Projected target coordinates.
    pub fn project_target(&self, target: &[f64]) -> Result<Vec<f64>, SelectionError> {
        if target.len() != self.raw.cols() {
            return Err(SelectionError::TargetDimension {
                expected: self.raw.cols(),
                got: target.len(),
            });
        }
        let transformed: Vec<f64> = match self.options.transform {
            Transform::Ranks => target
                .iter()
                .zip(&self.raw_sorted)
                .map(|(&x, s)| {
                    let below = s.partition_point(|&v| v < x);
                    let upto = s.partition_point(|&v| v <= x);
                    1.0 + below as f64 + 0.5 * (upto - below) as f64
                })
                .collect(),
            t => pca_engine::transform_target(&self.raw, target, t),
        };
        let empty = Matrix::zeros(0, self.raw.cols());
        Ok(pca_engine::project(&self.model, &empty, &transformed)?.1)
    }

    /// Projected candidate coordinate `component` (0-based).
    pub fn projected_column(&self, component: usize) -> Vec<f64> {
        let col = &self.columns[component];
        let mut out = vec![0.0; col.len()];
        for (&m, &v) in col.observed.iter().zip(&col.values) {
            out[m] = v;
        }
        out
    }

    pub fn select(&self, cands: &CandidateSet, target_values: &[f64], config: &SelectorConfig) -> Result<ReferenceClass, SelectionError> {
        let idx = self.select_indices(cands, target_values, config)?;
        let mut class = cands.class_from(idx, Some(config))?;
        class.components = Some(self.components());
        Ok(class)
    }

    fn select_indices(&self, cands: &CandidateSet, target_values: &[f64], config: &SelectorConfig) -> Result<Vec<usize>, SelectionError> {
        let t = self.project_target(target_values)?;
        rank_deviation_indices(
            &self.columns,
            cands.len(),
            &t,
            config.size,
            config.combination,
            config.correction,
        )
    }
}

/// PCA preprocessing followed by rank deviation on the first L components.
pub fn select_pca_rank_deviation(cands: &CandidateSet, target_values: &[f64], config: &SelectorConfig) -> Result<ReferenceClass, SelectionError> {
    let options = config
        .pca
        .ok_or_else(|| SelectionError::InvalidConfig("pca options missing".into()))?;
    PreparedPca::new(cands, options)?.select(cands, target_values, config)
}

/// What a selector needs to know about the target firm-year.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub values: Vec<f64>,
    pub sic: Option<u32>,
    pub sales: Option<f64>,
}

impl Target {
    /// Reads the target's reference variables from the panel.
    pub fn from_panel(panel: &Panel, key: &FirmYear, variables: &[VariableKey]) -> Result<Self, SelectionError> {
        let obs = panel
            .get(&key.firm_id, key.year)
            .ok_or_else(|| SelectionError::MissingTargetValue(format!("observation {key}")))?;
        let values = variables
            .iter()
            .map(|&v| obs.get(v).ok_or_else(|| SelectionError::MissingTargetValue(v.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            values,
            sic: obs.sic,
            sales: obs.get(VariableKey::SALES),
        })
    }
}

/// A selector bound to one candidate set, holding any per-set precomputation.
#[derive(Debug)]
pub struct Selector<'a> {
    cands: &'a CandidateSet,
    config: &'a SelectorConfig,
    pca: Option<PreparedPca>,
}

impl<'a> Selector<'a> {
    pub fn prepare(cands: &'a CandidateSet, config: &'a SelectorConfig) -> Result<Self, SelectionError> {
        config.validate()?;
        let pca = match config.algorithm {
            Algorithm::PcaRankDeviation => Some(PreparedPca::new(cands, config.pca.expect("validated"))?),
            _ => None,
        };
        Ok(Self { cands, config, pca })
    }

    pub fn select(&self, target: &Target) -> Result<ReferenceClass, SelectionError> {
        let idx = self.select_indices(target)?;
        let mut class = self.cands.class_from(idx, Some(self.config))?;
        class.components = self.components();
        Ok(class)
    }

    /// Candidate positions of the class, ascending, without materializing it.
    pub fn select_indices(&self, target: &Target) -> Result<Vec<usize>, SelectionError> {
        let missing = |what: &str| SelectionError::MissingTargetValue(what.to_string());
        let cands = self.cands;
        let idx = match self.config.algorithm {
            Algorithm::MarketClimate => (0..cands.len()).collect(),
            Algorithm::GroupMajor => group_indices(cands, target.sic.ok_or_else(|| missing("sic"))?, 2)?,
            Algorithm::GroupIndustry => group_indices(cands, target.sic.ok_or_else(|| missing("sic"))?, 3)?,
            Algorithm::McDeciles => mc_indices(cands, target.sales.ok_or_else(|| missing("sales"))?)?,
            Algorithm::RankDeviation => rank_deviation_indices(
                &cands.columns,
                cands.len(),
                &target.values,
                self.config.size,
                self.config.combination,
                self.config.correction,
            )?,
            Algorithm::PcaRankDeviation => self
                .pca
                .as_ref()
                .expect("prepared")
                .select_indices(cands, &target.values, self.config)?,
        };
        if idx.len() < MIN_CLASS_SIZE {
            return Err(SelectionError::UndersizedClass { size: idx.len() });
        }
        Ok(idx)
    }

    /// Principal components in use, for PCA selection.
    pub fn components(&self) -> Option<usize> {
        self.pca.as_ref().map(PreparedPca::components)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel_store::Observation;
    use crate::pca_engine::PcCountRule;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cand(i: usize, values: Vec<Option<f64>>) -> Candidate {
        Candidate {
            key: FirmYear::new(format!("F{i:05}"), 1990),
            values,
            outcome: i as f64,
            sic: None,
            sales: None,
        }
    }

    fn set_from(values: &[Vec<Option<f64>>]) -> CandidateSet {
        let k = values.first().map_or(0, Vec::len);
        let vars = crate::panel_store::CONTEMPORANEOUS[..k].to_vec();
        let members = values.iter().enumerate().map(|(i, v)| cand(i, v.clone())).collect();
        CandidateSet::new(2000, 1, 5, vars, members).unwrap()
    }

    fn one_column(values: &[f64]) -> CandidateSet {
        set_from(&values.iter().map(|&v| vec![Some(v)]).collect::<Vec<_>>())
    }

    fn values_of(set: &CandidateSet, class: &ReferenceClass) -> Vec<f64> {
        class.indices.iter().map(|&i| set.members[i].values[0].unwrap()).collect()
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(window_years(2000, 3, 10), (1988, 1997));
        assert_eq!(window_years(2000, 1, 1), (1999, 1999));
    }

    #[test]
    fn building_block_ten_nearest() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        let k = fraction_count(0.10, 100);
        assert_eq!(k, 10);
        let idx = nearest_by_rank(&values, 50.5, k);
        let picked: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        assert_eq!(picked, (46..=55).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn minimum_size_floor_widens_class() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        let set = one_column(&values);
        let cfg = SelectorConfig::rank_deviation(0.10, Combination::Lard, false);
        let class = select_rank_deviation(&set, &[50.5], &cfg).unwrap();
        assert_eq!(values_of(&set, &class), (41..=60).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn lower_tail_takes_bottom_fraction() {
        let values: Vec<f64> = (1..=1000).map(f64::from).collect();
        let set = one_column(&values);
        let cfg = SelectorConfig::rank_deviation(0.05, Combination::Lard, false);
        let class = select_rank_deviation(&set, &[-5.0], &cfg).unwrap();
        assert_eq!(values_of(&set, &class), (1..=50).map(f64::from).collect::<Vec<_>>());
        let class = select_rank_deviation(&set, &[5000.0], &cfg).unwrap();
        assert_eq!(values_of(&set, &class), (951..=1000).map(f64::from).collect::<Vec<_>>());
    }

    #[test]
    fn disjoint_intersection_is_undersized() {
        // variable 0 ascending, variable 1 descending: nearest sets at opposite ends
        let rows: Vec<Vec<Option<f64>>> = (0..200)
            .map(|i| vec![Some(i as f64), Some(-(i as f64))])
            .collect();
        let set = set_from(&rows);
        let cfg = SelectorConfig::rank_deviation(0.05, Combination::Intersection, false);
        assert!(matches!(
            select_rank_deviation(&set, &[0.0, -199.0], &cfg),
            Err(SelectionError::UndersizedClass { size: 0 })
        ));
    }

    #[test]
    fn corrected_sizes() {
        assert_eq!(corrected_size(0.05, 2, Combination::Union, true), 0.025);
        assert_eq!(corrected_size(0.05, 2, Combination::Intersection, true), 0.10);
        assert_eq!(corrected_size(0.05, 10, Combination::Intersection, true), 0.25);
        assert_eq!(corrected_size(0.05, 2, Combination::Union, false), 0.05);
        assert_eq!(corrected_size(0.05, 2, Combination::Lard, true), 0.05);
    }

    #[test]
    fn union_tolerates_missing_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<Option<f64>>> = (0..400)
            .map(|i| {
                let a = if i % 3 == 0 { None } else { Some(rng.random::<f64>()) };
                let b = if i % 3 == 1 { None } else { Some(rng.random::<f64>()) };
                vec![a, b]
            })
            .collect();
        let set = set_from(&rows);
        assert_eq!(set.observed_count(0), 400 - 134);
        let cfg = SelectorConfig::rank_deviation(0.1, Combination::Union, false);
        let class = select_rank_deviation(&set, &[0.5, 0.5], &cfg).unwrap();
        assert!(class.len() >= 20);
        // each per-variable class has ceil(0.1 * N_v) members
        assert!(class.len() <= 2 * fraction_count(0.1, 400 - 133));
    }

    #[test]
    fn market_climate_sizes() {
        let set = one_column(&(0..500).map(f64::from).collect::<Vec<_>>());
        assert_eq!(select_market_climate(&set).unwrap().len(), 500);
        let set = one_column(&(0..20).map(f64::from).collect::<Vec<_>>());
        assert_eq!(select_market_climate(&set).unwrap().len(), 20);
        let members = (0..19).map(|i| cand(i, vec![])).collect();
        assert!(matches!(
            CandidateSet::new(2000, 1, 5, vec![], members),
            Err(SelectionError::InsufficientCandidates { found: 19 })
        ));
    }

    #[test]
    fn group_prefixes() {
        let sics = [2834u32, 2836, 2810, 2911, 3571];
        let members: Vec<Candidate> = (0..100)
            .map(|i| Candidate {
                sic: Some(sics[i % 5]),
                ..cand(i, vec![])
            })
            .collect();
        let set = CandidateSet::new(2000, 1, 5, vec![], members).unwrap();
        let major = select_group(&set, 2834, 2).unwrap();
        assert_eq!(major.len(), 60);
        let industry = select_group(&set, 2834, 3).unwrap();
        assert_eq!(industry.len(), 40);
        assert!(industry.indices.iter().all(|i| major.indices.contains(i)));
        assert!(matches!(
            select_group(&set, 7372, 2),
            Err(SelectionError::UndersizedClass { size: 0 })
        ));
    }

    fn sales_set(n: usize, seed: u64) -> (CandidateSet, Vec<f64>) {
        let mut sales: Vec<f64> = (1..=n).map(|i| i as f64 * 3.0).collect();
        sales.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let members = sales
            .iter()
            .enumerate()
            .map(|(i, &s)| Candidate {
                sales: Some(s),
                ..cand(i, vec![])
            })
            .collect();
        (CandidateSet::new(2000, 1, 5, vec![], members).unwrap(), sales)
    }

    #[test]
    fn mc_deciles_brute_force() {
        let (set, sales) = sales_set(2000, 1);
        let mut sorted = sales.clone();
        sorted.sort_by(cmp_f64);
        // 35th percentile target
        let target = sorted[699] + 1.0;
        let class = select_mc(&set, target).unwrap();
        assert_eq!(class.len(), 200);
        // brute force: fourth decile = sorted positions 600..800
        let expect: BTreeSet<u64> = sorted[600..800].iter().map(|v| *v as u64).collect();
        let got: BTreeSet<u64> = class.indices.iter().map(|&i| sales[i] as u64).collect();
        assert_eq!(got, expect);

        let top = select_mc(&set, 1e9).unwrap();
        assert_eq!(top.len(), 20);
        assert!(top.indices.iter().all(|&i| sales[i] > sorted[1979]));

        // exactly on the first decile boundary: lower decile
        let boundary = sorted[199];
        let class = select_mc(&set, boundary).unwrap();
        assert!(class.indices.iter().all(|&i| sales[i] <= boundary));
        assert_eq!(class.len(), 200);
    }

    #[test]
    fn mc_undersized() {
        let (set, _) = sales_set(150, 2);
        // top percentile of 150 is 1 member
        assert!(matches!(
            select_mc(&set, 1e9),
            Err(SelectionError::UndersizedClass { .. })
        ));
    }

    #[test]
    fn kappa_one_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let values: Vec<f64> = (0..300).map(|_| rng.random::<f64>()).collect();
        let set = one_column(&values);
        let x = [0.37];
        let base = nearest_by_rank(&values, x[0], fraction_count(0.05, 300).max(20));
        for (comb, cor) in [
            (Combination::Lard, false),
            (Combination::Union, false),
            (Combination::Union, true),
            (Combination::Intersection, false),
            (Combination::Intersection, true),
        ] {
            let cfg = SelectorConfig::rank_deviation(0.05, comb, cor);
            assert_eq!(select_rank_deviation(&set, &x, &cfg).unwrap().indices, base);
        }
    }

    #[test]
    fn lard_nesting() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let rows: Vec<Vec<Option<f64>>> = (0..2000)
            .map(|_| vec![Some(rng.random()), Some(rng.random()), Some(rng.random())])
            .collect();
        let set = set_from(&rows);
        let t = [0.2, 0.5, 0.9];
        let small = select_rank_deviation(&set, &t, &SelectorConfig::rank_deviation(0.01, Combination::Lard, false)).unwrap();
        let large = select_rank_deviation(&set, &t, &SelectorConfig::rank_deviation(0.05, Combination::Lard, false)).unwrap();
        assert!(small.indices.iter().all(|i| large.indices.contains(i)));
    }

    #[test]
    fn monotone_transform_leaves_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let rows: Vec<Vec<Option<f64>>> = (0..500)
            .map(|_| vec![Some(rng.random::<f64>() * 4.0 - 2.0), Some(rng.random())])
            .collect();
        let warped: Vec<Vec<Option<f64>>> = rows
            .iter()
            .map(|r| vec![r[0].map(|v| v.powi(3) + v), r[1]])
            .collect();
        let (a, b) = (set_from(&rows), set_from(&warped));
        for comb in [Combination::Lard, Combination::Union, Combination::Intersection] {
            let cfg = SelectorConfig::rank_deviation(0.05, comb, true);
            let x = 0.3f64;
            let ca = select_rank_deviation(&a, &[x, 0.6], &cfg);
            let cb = select_rank_deviation(&b, &[x.powi(3) + x, 0.6], &cfg);
            match (ca, cb) {
                (Ok(ca), Ok(cb)) => assert_eq!(ca.indices, cb.indices),
                (Err(ea), Err(eb)) => assert_eq!(ea, eb),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn pca_single_component_reduces_to_first_pc() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let rows: Vec<Vec<Option<f64>>> = (0..600)
            .map(|_| {
                let a: f64 = rng.random();
                vec![Some(a), Some(a + 0.3 * rng.random::<f64>()), Some(rng.random())]
            })
            .collect();
        let set = set_from(&rows);
        let opts = PcaOptions::new(Transform::Ranks, PcCountRule::Fixed(1));
        let cfg = SelectorConfig::pca_rank_deviation(0.05, Combination::Union, true, opts);
        let t = [0.4, 0.5, 0.6];
        let class = select_pca_rank_deviation(&set, &t, &cfg).unwrap();
        assert_eq!(class.components, Some(1));
        let prep = PreparedPca::new(&set, opts).unwrap();
        let pc1 = prep.projected_column(0);
        let tp = prep.project_target(&t).unwrap();
        let expect = nearest_by_rank(&pc1, tp[0], fraction_count(0.05, 600).max(20));
        assert_eq!(class.indices, expect);
    }

    #[test]
    fn pca_requires_complete_rows() {
        let rows: Vec<Vec<Option<f64>>> = (0..40)
            .map(|i| vec![Some(i as f64), if i == 3 { None } else { Some((i * 7 % 11) as f64) }])
            .collect();
        let set = set_from(&rows);
        let cfg = SelectorConfig::pca_rank_deviation(
            0.05,
            Combination::Lard,
            false,
            PcaOptions::new(Transform::Identity, PcCountRule::Fixed(2)),
        );
        assert!(matches!(
            select_pca_rank_deviation(&set, &[1.0, 1.0], &cfg),
            Err(SelectionError::InvalidConfig(_))
        ));
    }

    #[test]
    fn build_candidates_window_and_availability() {
        let mut obs = Vec::new();
        for f in 0..30 {
            for y in 1985..=2005 {
                let mut o = Observation::new(FirmYear::new(format!("F{f:02}"), y), Some(2800 + f))
                    .with(VariableKey::SALES, 100.0 + y as f64 + f as f64);
                if f % 2 == 0 {
                    o.set(VariableKey::OPMAR, Some(f as f64));
                }
                obs.push(o);
            }
        }
        let panel = Panel::with_inferred_range(obs).unwrap();
        let case = ForecastCase {
            target: FirmYear::new("F00", 2000),
            horizon: 3,
            reference_variables: vec![VariableKey::SALES],
            window: 10,
        };
        let set = build_candidates(&panel, &case, Availability::AllVariables).unwrap();
        assert_eq!(set.len(), 30 * 10);
        assert!(set.members.iter().all(|m| (1988..=1997).contains(&m.key.year)));
        assert!(set.members.windows(2).all(|w| (w[0].key.year, &w[0].key.firm_id) < (w[1].key.year, &w[1].key.firm_id)));

        let one = ForecastCase { window: 1, ..case.clone() };
        let set = build_candidates(&panel, &one, Availability::AllVariables).unwrap();
        assert!(set.members.iter().all(|m| m.key.year == 1997));

        let with_opmar = ForecastCase {
            reference_variables: vec![VariableKey::SALES, VariableKey::OPMAR],
            window: 1,
            ..case.clone()
        };
        let set = build_candidates(&panel, &with_opmar, Availability::PerVariable).unwrap();
        assert_eq!(set.len(), 30);
        assert!(matches!(
            build_candidates(&panel, &with_opmar, Availability::AllVariables),
            Err(SelectionError::InsufficientCandidates { found: 15 })
        ));

        let missing = ForecastCase {
            reference_variables: vec![VariableKey::BETA],
            ..case.clone()
        };
        assert!(matches!(
            build_candidates(&panel, &missing, Availability::AllVariables),
            Err(SelectionError::InsufficientCandidates { found: 0 })
        ));

        let outside = ForecastCase { window: 30, ..case };
        assert!(matches!(
            build_candidates(&panel, &outside, Availability::AllVariables),
            Err(SelectionError::WindowOutsidePanel { .. })
        ));
    }
}
