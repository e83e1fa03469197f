//! Backtests: eligible cases, option grids, per-configuration PIT samples,
//! ranking, and the forward-selection and brute-force variable searches.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibrationError, CalibrationReport, PitSample, DEFAULT_LEVELS};
use crate::panel_store::{FirmYear, Panel, VariableKey, CONTEMPORANEOUS};
use crate::pca_engine::{PcCountRule, PcaOptions, Transform};
use crate::selection::{build_candidates, Algorithm, Combination, ForecastCase, Selector, SelectorConfig, Target};

pub const HORIZONS: [u32; 4] = [1, 3, 5, 10];
pub const WINDOWS: [u32; 4] = [5, 10, 20, 30];
pub const SIZES: [f64; 3] = [0.05, 0.025, 0.01];
/// Combination mode and correction flag pairs.
pub const COMBINATION_VARIANTS: [(Combination, bool); 5] = [
    (Combination::Lard, false),
    (Combination::Union, false),
    (Combination::Union, true),
    (Combination::Intersection, false),
    (Combination::Intersection, true),
];
pub const RANK_DEVIATION_OPTIONS: usize = 60;
pub const PCA_OPTIONS: usize = 1200;
pub const DEFAULT_BRUTE_FORCE_CAP: usize = 7;
/// Sets kept per forward-selection stage.
pub const STAGE_WIDTH: usize = 3;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("invalid backtest configuration: {0}")]
    InvalidSpec(String),
    #[error("{count} variables exceed the brute-force cap of {cap}; raise the cap explicitly")]
    CapExceeded { count: usize, cap: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

/// Window, size and combination options searched per variable set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionGrid {
    #[serde(default = "default_windows")]
    pub windows: Vec<u32>,
    #[serde(default = "default_sizes")]
    pub sizes: Vec<f64>,
    #[serde(default = "default_variants")]
    pub combinations: Vec<(Combination, bool)>,
}

fn default_windows() -> Vec<u32> {
    WINDOWS.to_vec()
}

fn default_sizes() -> Vec<f64> {
    SIZES.to_vec()
}

fn default_variants() -> Vec<(Combination, bool)> {
    COMBINATION_VARIANTS.to_vec()
}

impl Default for OptionGrid {
    fn default() -> Self {
        Self {
            windows: default_windows(),
            sizes: default_sizes(),
            combinations: default_variants(),
        }
    }
}

impl OptionGrid {
    pub fn is_full(&self) -> bool {
        *self == Self::default()
    }

    /// (window, selector) pairs for rank deviation.
    pub fn rank_deviation(&self) -> Vec<(u32, SelectorConfig)> {
        let mut out = Vec::new();
        for &w in &self.windows {
            for &size in &self.sizes {
                for &(comb, cor) in &self.combinations {
                    out.push((w, SelectorConfig::rank_deviation(size, comb, cor)));
                }
            }
        }
        if self.is_full() {
            assert_eq!(out.len(), RANK_DEVIATION_OPTIONS);
        }
        out
    }

    /// (window, selector) pairs for PCA rank deviation.
    pub fn pca(&self, transforms: &[Transform], rules: &[PcCountRule]) -> Vec<(u32, SelectorConfig)> {
        let mut out = Vec::new();
        for &t in transforms {
            for &rule in rules {
                for (w, rd) in self.rank_deviation() {
                    let opts = PcaOptions::new(t, rule);
                    out.push((w, SelectorConfig::pca_rank_deviation(rd.size, rd.combination, rd.correction, opts)));
                }
            }
        }
        if self.is_full() && transforms == Transform::ALL && rules == PcCountRule::ALL {
            assert_eq!(out.len(), PCA_OPTIONS);
        }
        out
    }

    /// Benchmark selectors over the grid's windows.
    pub fn benchmarks(&self, algorithms: &[Algorithm]) -> Vec<(u32, SelectorConfig)> {
        let mut out = Vec::new();
        for &a in algorithms.iter().filter(|a| !a.uses_variables()) {
            for &w in &self.windows {
                out.push((w, SelectorConfig::benchmark(a)));
            }
        }
        out
    }
}

/// One evaluable configuration: selector, variable set, window, horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub horizon: u32,
    pub window: u32,
    pub variables: Vec<VariableKey>,
    pub selector: SelectorConfig,
}

impl RunConfig {
    pub fn new(horizon: u32, window: u32, variables: Vec<VariableKey>, selector: SelectorConfig) -> Self {
        let variables = if selector.algorithm.uses_variables() {
            variables
        } else {
            Vec::new()
        };
        Self {
            horizon,
            window,
            variables,
            selector,
        }
    }

    /// Result-table columns identifying the configuration.
    pub fn row_key(&self) -> ResultKey {
        let s = &self.selector;
        let rd = s.algorithm.uses_variables();
        ResultKey {
            horizon: self.horizon,
            algorithm: s.algorithm.label().to_string(),
            ref_var: if rd {
                self.variables.iter().map(ToString::to_string).collect::<Vec<_>>().join("+")
            } else {
                "-".into()
            },
            transf: s.pca.map_or("-".into(), |p| p.transform.label().to_string()),
            n_pc: s.pca.map_or("-".into(), |p| p.rule.to_string()),
            comb: if rd { s.combination.label().to_string() } else { "-".into() },
            cor: if rd && s.combination != Combination::Lard {
                if s.correction { "yes" } else { "no" }.into()
            } else {
                "-".into()
            },
            w: self.window,
            size: if rd { format!("{}", s.size) } else { "-".into() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResultKey {
    pub horizon: u32,
    pub algorithm: String,
    pub ref_var: String,
    pub transf: String,
    pub n_pc: String,
    pub comb: String,
    pub cor: String,
    pub w: u32,
    pub size: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestResult {
    pub config: RunConfig,
    /// `None` when no case produced a forecast.
    pub report: Option<CalibrationReport>,
    pub m: usize,
    pub skipped: usize,
    /// Mean number of principal components used, for PCA selection.
    pub realized_pc: Option<f64>,
}

impl BacktestResult {
    pub fn usable(&self) -> bool {
        self.report.is_some()
    }

    pub fn eligible(&self) -> usize {
        self.m + self.skipped
    }

    pub fn delta_q(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.delta_q)
    }

    pub fn row(&self) -> ResultRow {
        let k = self.config.row_key();
        ResultRow {
            algorithm: k.algorithm,
            ref_var: k.ref_var,
            transf: k.transf,
            n_pc: k.n_pc,
            comb: k.comb,
            cor: k.cor,
            w: k.w,
            size: k.size,
            delta_q: self.report.as_ref().map(|r| r.delta_q),
            ks: self.report.as_ref().map(|r| r.ks),
            cvm: self.report.as_ref().map(|r| r.cvm),
            m: self.m,
            skipped: self.skipped,
            horizon: k.horizon,
            realized_pc: self.realized_pc,
        }
    }
}

/// One line of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub algorithm: String,
    pub ref_var: String,
    pub transf: String,
    pub n_pc: String,
    pub comb: String,
    pub cor: String,
    pub w: u32,
    pub size: String,
    pub delta_q: Option<f64>,
    pub ks: Option<f64>,
    pub cvm: Option<f64>,
    pub m: usize,
    pub skipped: usize,
    pub horizon: u32,
    pub realized_pc: Option<f64>,
}

impl ResultRow {
    pub fn key(&self) -> ResultKey {
        ResultKey {
            horizon: self.horizon,
            algorithm: self.algorithm.clone(),
            ref_var: self.ref_var.clone(),
            transf: self.transf.clone(),
            n_pc: self.n_pc.clone(),
            comb: self.comb.clone(),
            cor: self.cor.clone(),
            w: self.w,
            size: self.size.clone(),
        }
    }
}

/// First and last eligible base year.
pub fn eligible_years(panel: &Panel, horizon: u32, window: u32) -> (i32, i32) {
    (
        panel.start_year() + window as i32 + horizon as i32 - 1,
        panel.end_year() - horizon as i32,
    )
}

/// Every case with all variables observed at t, the h-year outcome observed,
/// and t inside the eligible years. Ordered by (t, firm_id).
pub fn enumerate_cases(panel: &Panel, horizon: u32, window: u32, variables: &[VariableKey]) -> Vec<ForecastCase> {
    let (first, last) = eligible_years(panel, horizon, window);
    let mut out = Vec::new();
    for t in first..=last {
        for obs in panel.year(t) {
            if obs.values_of(variables).is_none() {
                continue;
            }
            if panel.forward_growth(&obs.key.firm_id, t, horizon).is_none() {
                continue;
            }
            out.push(ForecastCase {
                target: obs.key.clone(),
                horizon,
                reference_variables: variables.to_vec(),
                window,
            });
        }
    }
    out
}

struct YearOutcome {
    pits: Vec<f64>,
    skipped: usize,
    components: Option<usize>,
}

fn run_year(panel: &Panel, cfg: &RunConfig, cases: &[ForecastCase]) -> YearOutcome {
    let all_skipped = |n| YearOutcome {
        pits: Vec::new(),
        skipped: n,
        components: None,
    };
    let vars = cfg.selector.candidate_variables(&cfg.variables);
    let template = ForecastCase {
        reference_variables: vars.clone(),
        ..cases[0].clone()
    };
    let Ok(cands) = build_candidates(panel, &template, cfg.selector.availability()) else {
        return all_skipped(cases.len());
    };
    let Ok(selector) = Selector::prepare(&cands, &cfg.selector) else {
        return all_skipped(cases.len());
    };
    let outcomes: Vec<f64> = cands.members.iter().map(|m| m.outcome).collect();
    let mut pits = Vec::with_capacity(cases.len());
    let mut skipped = 0;
    for case in cases {
        let realized = panel
            .forward_growth(&case.target.firm_id, case.target.year, case.horizon)
            .expect("eligible case has an outcome");
        let idx = Target::from_panel(panel, &case.target, &vars).and_then(|t| selector.select_indices(&t));
        match idx {
            Ok(idx) => {
                let below = idx.iter().filter(|&&i| outcomes[i] <= realized).count();
                pits.push(below as f64 / idx.len() as f64);
            }
            Err(_) => skipped += 1,
        }
    }
    YearOutcome {
        pits,
        skipped,
        components: selector.components(),
    }
}

fn thread_pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}

/// Evaluates one configuration over every eligible case. The result does not
/// depend on `workers`.
pub fn run_config(panel: &Panel, cfg: &RunConfig, levels: &[f64], workers: usize) -> Result<BacktestResult, BacktestError> {
    thread_pool(workers).install(|| run_config_in_pool(panel, cfg, levels))
}

fn run_config_in_pool(panel: &Panel, cfg: &RunConfig, levels: &[f64]) -> Result<BacktestResult, BacktestError> {
    cfg.selector
        .validate()
        .map_err(|e| BacktestError::InvalidSpec(e.to_string()))?;
    let cases = enumerate_cases(panel, cfg.horizon, cfg.window, &cfg.variables);
    let mut by_year: BTreeMap<i32, Vec<ForecastCase>> = BTreeMap::new();
    for c in cases {
        by_year.entry(c.target.year).or_default().push(c);
    }
    let groups: Vec<Vec<ForecastCase>> = by_year.into_values().collect();
    let years: Vec<YearOutcome> = groups.par_iter().map(|cases| run_year(panel, cfg, cases)).collect();
    let mut sample = PitSample::new();
    let mut skipped = 0;
    let mut components = Vec::new();
    for y in years {
        for p in y.pits {
            sample.push(p)?;
        }
        skipped += y.skipped;
        components.extend(y.components);
    }
    let report = if sample.is_empty() {
        None
    } else {
        Some(CalibrationReport::from_sample(&sample, levels)?)
    };
    let realized_pc = (!components.is_empty()).then(|| components.iter().sum::<usize>() as f64 / components.len() as f64);
    Ok(BacktestResult {
        config: cfg.clone(),
        report,
        m: sample.m(),
        skipped,
        realized_pc,
    })
}

/// Runs several configurations on one pool, in order.
pub fn run_configs(panel: &Panel, configs: &[RunConfig], levels: &[f64], workers: usize) -> Result<Vec<BacktestResult>, BacktestError> {
    let pool = thread_pool(workers);
    pool.install(|| configs.iter().map(|c| run_config_in_pool(panel, c, levels)).collect())
}

/// Sorts by Δq ascending; unusable results last; ties keep input order.
pub fn rank_results(results: &mut [BacktestResult]) {
    results.sort_by(|a, b| match (a.delta_q(), b.delta_q()) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
}

/// JSON backtest configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestSpec {
    #[serde(default)]
    pub panel: Option<PathBuf>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<u32>,
    #[serde(default = "default_windows")]
    pub windows: Vec<u32>,
    #[serde(default = "default_sizes")]
    pub sizes: Vec<f64>,
    #[serde(default = "default_variants")]
    pub combinations: Vec<(Combination, bool)>,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algorithm>,
    #[serde(default = "default_transforms")]
    pub transforms: Vec<Transform>,
    #[serde(default = "default_rules")]
    pub pc_rules: Vec<PcCountRule>,
    #[serde(default)]
    pub variable_sets: Vec<Vec<VariableKey>>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub start_year: Option<i32>,
    #[serde(default)]
    pub end_year: Option<i32>,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
    #[serde(default = "default_cap")]
    pub brute_force_cap: usize,
    /// Variables forward selection may add.
    #[serde(default)]
    pub pool: Vec<VariableKey>,
    /// Forward-selection starting sets; computed in-run when empty.
    #[serde(default)]
    pub seeds: Vec<VariableKey>,
}

fn default_horizons() -> Vec<u32> {
    vec![1]
}

fn default_algorithms() -> Vec<Algorithm> {
    vec![Algorithm::MarketClimate, Algorithm::RankDeviation]
}

fn default_transforms() -> Vec<Transform> {
    Transform::ALL.to_vec()
}

fn default_rules() -> Vec<PcCountRule> {
    PcCountRule::ALL.to_vec()
}

fn default_workers() -> usize {
    1
}

fn default_levels() -> Vec<f64> {
    DEFAULT_LEVELS.to_vec()
}

fn default_cap() -> usize {
    DEFAULT_BRUTE_FORCE_CAP
}

impl Default for BacktestSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl BacktestSpec {
    pub fn from_json(text: &str) -> Result<Self, BacktestError> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, BacktestError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), BacktestError> {
        let bad = |m: &str| Err(BacktestError::InvalidSpec(m.to_string()));
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return bad("horizons must be non-empty and positive");
        }
        if self.windows.is_empty() || self.windows.contains(&0) {
            return bad("windows must be non-empty and positive");
        }
        if self.sizes.is_empty() || self.sizes.iter().any(|&c| !(c > 0.0 && c < 1.0)) {
            return bad("sizes must be non-empty and inside (0, 1)");
        }
        if self.combinations.is_empty() || self.algorithms.is_empty() {
            return bad("combinations and algorithms must be non-empty");
        }
        if self.algorithms.iter().any(|a| a.uses_variables()) && self.variable_sets.iter().any(Vec::is_empty) {
            return bad("empty variable set");
        }
        if self.workers == 0 {
            return bad("workers must be positive");
        }
        Ok(())
    }

    pub fn grid(&self) -> OptionGrid {
        OptionGrid {
            windows: self.windows.clone(),
            sizes: self.sizes.clone(),
            combinations: self.combinations.clone(),
        }
    }

    /// Every configuration of the backtest, in a fixed order.
    pub fn configs(&self) -> Vec<RunConfig> {
        let grid = self.grid();
        let mut out = Vec::new();
        for &h in &self.horizons {
            for (w, sel) in grid.benchmarks(&self.algorithms) {
                out.push(RunConfig::new(h, w, Vec::new(), sel));
            }
            for vars in &self.variable_sets {
                if self.algorithms.contains(&Algorithm::RankDeviation) {
                    for (w, sel) in grid.rank_deviation() {
                        out.push(RunConfig::new(h, w, vars.clone(), sel));
                    }
                }
                if self.algorithms.contains(&Algorithm::PcaRankDeviation) && vars.len() >= 2 {
                    for (w, sel) in grid.pca(&self.transforms, &self.pc_rules) {
                        out.push(RunConfig::new(h, w, vars.clone(), sel));
                    }
                }
            }
        }
        out
    }
}

/// Appends result rows to a CSV file, one flush per row.
pub struct CheckpointWriter {
    writer: csv::Writer<BufWriter<File>>,
}

impl CheckpointWriter {
    /// Opens `path`, appending when `resume` and the file exists.
    pub fn open(path: &Path, resume: bool) -> Result<Self, BacktestError> {
        let append = resume && path.exists() && std::fs::metadata(path)?.len() > 0;
        let file = if append {
            OpenOptions::new().append(true).open(path)?
        } else {
            File::create(path)?
        };
        let writer = csv::WriterBuilder::new()
            .has_headers(!append)
            .from_writer(BufWriter::new(file));
        Ok(Self { writer })
    }

    pub fn write(&mut self, row: &ResultRow) -> Result<(), BacktestError> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, BacktestError> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_results<W: Write>(writer: W, results: &[BacktestResult]) -> Result<(), BacktestError> {
    let mut w = csv::Writer::from_writer(writer);
    for r in results {
        w.serialize(r.row())?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every configuration of `spec`, writing rows to `output` as they
/// finish. With `resume`, configurations already in `output` are skipped.
/// Returns the newly computed results, ranked.
pub fn run_spec(panel: &Panel, spec: &BacktestSpec, output: Option<&Path>, resume: bool) -> Result<Vec<BacktestResult>, BacktestError> {
    spec.validate()?;
    let done: HashSet<ResultKey> = match output {
        Some(p) if resume && p.exists() => read_results(p)?.iter().map(ResultRow::key).collect(),
        _ => HashSet::new(),
    };
    let mut writer = output.map(|p| CheckpointWriter::open(p, resume)).transpose()?;
    let pool = thread_pool(spec.workers);
    let mut results = Vec::new();
    for cfg in spec.configs() {
        if done.contains(&cfg.row_key()) {
            continue;
        }
        let r = pool.install(|| run_config_in_pool(panel, &cfg, &spec.levels))?;
        if let Some(w) = writer.as_mut() {
            w.write(&r.row())?;
        }
        results.push(r);
    }
    rank_results(&mut results);
    Ok(results)
}

/// Best result of a variable set over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub variables: Vec<VariableKey>,
    pub best: BacktestResult,
}

impl ScoredSet {
    pub fn delta_q(&self) -> Option<f64> {
        self.best.delta_q()
    }
}

fn score_set(
    panel: &Panel,
    horizon: u32,
    variables: &[VariableKey],
    grid: &OptionGrid,
    levels: &[f64],
) -> Result<Option<ScoredSet>, BacktestError> {
    let mut results = grid
        .rank_deviation()
        .into_iter()
        .map(|(w, sel)| run_config_in_pool(panel, &RunConfig::new(horizon, w, variables.to_vec(), sel), levels))
        .collect::<Result<Vec<_>, _>>()?;
    rank_results(&mut results);
    Ok(results
        .into_iter()
        .next()
        .filter(BacktestResult::usable)
        .map(|best| ScoredSet {
            variables: variables.to_vec(),
            best,
        }))
}

fn rank_sets(sets: &mut [ScoredSet]) {
    sets.sort_by(|a, b| {
        a.delta_q()
            .unwrap_or(f64::INFINITY)
            .total_cmp(&b.delta_q().unwrap_or(f64::INFINITY))
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub index: usize,
    /// Best sets of the stage, best first.
    pub sets: Vec<ScoredSet>,
    /// Whether the stage improved on the best Δq so far.
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardReport {
    pub horizon: u32,
    /// Stage 0 holds the seed sets.
    pub stages: Vec<Stage>,
}

impl ForwardReport {
    /// Best set over all stages.
    pub fn best(&self) -> Option<&ScoredSet> {
        self.stages
            .iter()
            .flat_map(|s| s.sets.first())
            .min_by(|a, b| {
                a.delta_q()
                    .unwrap_or(f64::INFINITY)
                    .total_cmp(&b.delta_q().unwrap_or(f64::INFINITY))
            })
    }

    pub fn extension_stages(&self) -> usize {
        self.stages.len().saturating_sub(1)
    }
}

/// Greedy forward selection. Seeds default to the three best single
/// variables of `pool`. Each stage extends the three best sets of the
/// previous stage with every pool variable they lack. The search stops after
/// a stage that fails to improve, once a following lookahead stage fails too.
pub fn forward_selection(
    panel: &Panel,
    horizon: u32,
    seeds: &[VariableKey],
    pool: &[VariableKey],
    grid: &OptionGrid,
    levels: &[f64],
    workers: usize,
) -> Result<ForwardReport, BacktestError> {
    thread_pool(workers).install(|| forward_in_pool(panel, horizon, seeds, pool, grid, levels))
}

fn forward_in_pool(
    panel: &Panel,
    horizon: u32,
    seeds: &[VariableKey],
    pool: &[VariableKey],
    grid: &OptionGrid,
    levels: &[f64],
) -> Result<ForwardReport, BacktestError> {
    let score_all = |sets: Vec<Vec<VariableKey>>| -> Result<Vec<ScoredSet>, BacktestError> {
        let mut scored: Vec<ScoredSet> = sets
            .iter()
            .map(|s| score_set(panel, horizon, s, grid, levels))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .flatten()
            .collect();
        rank_sets(&mut scored);
        Ok(scored)
    };
    let seed_vars: Vec<VariableKey> = if seeds.is_empty() { pool.to_vec() } else { seeds.to_vec() };
    let mut current = score_all(seed_vars.iter().map(|&v| vec![v]).collect())?;
    current.truncate(STAGE_WIDTH);
    let mut best = current.first().and_then(ScoredSet::delta_q).unwrap_or(f64::INFINITY);
    let mut stages = vec![Stage {
        index: 0,
        sets: current.clone(),
        improved: true,
    }];
    let mut misses = 0;
    while !current.is_empty() && misses < 2 {
        let mut seen = BTreeSet::new();
        let mut candidates = Vec::new();
        for set in &current {
            for &v in pool {
                if set.variables.contains(&v) {
                    continue;
                }
                let mut ext = set.variables.clone();
                ext.push(v);
                let mut key = ext.clone();
                key.sort();
                if seen.insert(key) {
                    candidates.push(ext);
                }
            }
        }
        if candidates.is_empty() {
            break;
        }
        let mut scored = score_all(candidates)?;
        scored.truncate(STAGE_WIDTH);
        let stage_best = scored.first().and_then(ScoredSet::delta_q).unwrap_or(f64::INFINITY);
        let improved = stage_best < best;
        if improved {
            best = stage_best;
            misses = 0;
        } else {
            misses += 1;
        }
        stages.push(Stage {
            index: stages.len(),
            sets: scored.clone(),
            improved,
        });
        current = scored;
    }
    Ok(ForwardReport { horizon, stages })
}

/// All non-empty subsets of `variables`, by bitmask order.
pub fn subsets(variables: &[VariableKey]) -> Vec<Vec<VariableKey>> {
    (1u32..(1 << variables.len()))
        .map(|mask| {
            variables
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &v)| v)
                .collect()
        })
        .collect()
}

/// Every non-empty subset crossed with the rank-deviation grid, ranked.
pub fn brute_force(
    panel: &Panel,
    horizon: u32,
    variables: &[VariableKey],
    grid: &OptionGrid,
    cap: usize,
    levels: &[f64],
    workers: usize,
) -> Result<Vec<BacktestResult>, BacktestError> {
    if variables.len() > cap {
        return Err(BacktestError::CapExceeded {
            count: variables.len(),
            cap,
        });
    }
    let configs: Vec<RunConfig> = subsets(variables)
        .into_iter()
        .flat_map(|vars| {
            grid.rank_deviation()
                .into_iter()
                .map(move |(w, sel)| RunConfig::new(horizon, w, vars.clone(), sel))
        })
        .collect();
    let mut results = run_configs(panel, &configs, levels, workers)?;
    rank_results(&mut results);
    Ok(results)
}

/// Contemporaneous variables the brute-force search uses by default.
pub fn contemporaneous() -> Vec<VariableKey> {
    CONTEMPORANEOUS.to_vec()
}

/// Eligible base years of every firm, for diagnostics.
pub fn eligible_targets(cases: &[ForecastCase]) -> Vec<FirmYear> {
    cases.iter().map(|c| c.target.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, GeneratorSpec};

    #[test]
    fn full_grid_counts() {
        let g = OptionGrid::default();
        assert_eq!(g.rank_deviation().len(), 60);
        assert_eq!(g.pca(&Transform::ALL, &PcCountRule::ALL).len(), 1200);
        let bench = g.benchmarks(&[
            Algorithm::MarketClimate,
            Algorithm::GroupMajor,
            Algorithm::GroupIndustry,
            Algorithm::McDeciles,
            Algorithm::RankDeviation,
        ]);
        assert_eq!(bench.len(), 16);
    }

    #[test]
    fn lard_ignores_correction_in_grid() {
        let g = OptionGrid::default();
        assert!(g
            .rank_deviation()
            .iter()
            .all(|(_, s)| s.combination != Combination::Lard || !s.correction));
    }

    #[test]
    fn eligible_year_bounds() {
        let spec = GeneratorSpec::independent(5, 1950, 2019, 1);
        let panel = generate(&spec).unwrap().panel;
        assert_eq!(eligible_years(&panel, 1, 5), (1955, 2018));
        assert_eq!(eligible_years(&panel, 10, 30), (1989, 2009));
        let cases = enumerate_cases(&panel, 1, 5, &[VariableKey::OPMAR]);
        assert_eq!(cases.len(), 5 * 64);
    }

    #[test]
    fn survivorship_excludes_case() {
        let spec = GeneratorSpec {
            exit_hazard: 0.1,
            ..GeneratorSpec::independent(40, 1980, 2010, 2)
        };
        let panel = generate(&spec).unwrap().panel;
        let cases = enumerate_cases(&panel, 3, 5, &[]);
        assert!(cases
            .iter()
            .all(|c| panel.get(&c.target.firm_id, c.target.year + 3).is_some()));
        let last_years: Vec<i32> = panel
            .firms()
            .map(|f| panel.firm(f).map(|o| o.key.year).max().unwrap())
            .collect();
        assert!(last_years.iter().any(|&y| y < 2010));
    }

    #[test]
    fn impossible_window_is_unusable() {
        let panel = generate(&GeneratorSpec::independent(30, 2000, 2009, 3)).unwrap().panel;
        let cfg = RunConfig::new(3, 10, vec![], SelectorConfig::market_climate());
        let r = run_config(&panel, &cfg, &DEFAULT_LEVELS, 1).unwrap();
        assert!(!r.usable());
        assert_eq!(r.m, 0);
        assert!(r.row().delta_q.is_none());
    }

    #[test]
    fn spec_defaults_and_json() {
        let spec = BacktestSpec::from_json(r#"{"variable_sets": [["opmar", "salesGR_1"]], "workers": 2}"#).unwrap();
        assert_eq!(spec.windows, WINDOWS.to_vec());
        assert_eq!(spec.configs().len(), 4 + 60);
        assert!(BacktestSpec::from_json(r#"{"sizes": [1.5]}"#).is_err());
        assert!(BacktestSpec::from_json(r#"{"workers": 0}"#).is_err());
        let pca = BacktestSpec::from_json(r#"{"variable_sets": [["opmar", "at"]], "algorithms": ["pca_rank_deviation"]}"#).unwrap();
        assert_eq!(pca.configs().len(), 1200);
    }

    #[test]
    fn brute_force_subset_counts() {
        let vars = contemporaneous();
        assert_eq!(subsets(&vars[..3]).len(), 7);
        assert_eq!(subsets(&vars).len(), 127);
        let panel = generate(&GeneratorSpec::independent(5, 2000, 2005, 1)).unwrap().panel;
        let mut too_many = vars.clone();
        too_many.push(VariableKey::sales_growth(1).unwrap());
        assert!(matches!(
            brute_force(&panel, 1, &too_many, &OptionGrid::default(), 7, &DEFAULT_LEVELS, 1),
            Err(BacktestError::CapExceeded { count: 8, cap: 7 })
        ));
    }

    #[test]
    fn ranking_is_stable() {
        let mk = |dq: Option<f64>, w: u32| BacktestResult {
            config: RunConfig::new(1, w, vec![], SelectorConfig::market_climate()),
            report: dq.map(|d| CalibrationReport {
                m: 1,
                delta_q: d,
                ks: 0.0,
                cvm: 0.0,
                levels: vec![0.5],
            }),
            m: 1,
            skipped: 0,
            realized_pc: None,
        };
        let mut v = vec![mk(None, 1), mk(Some(0.2), 2), mk(Some(0.1), 3), mk(Some(0.2), 4)];
        rank_results(&mut v);
        let order: Vec<u32> = v.iter().map(|r| r.config.window).collect();
        assert_eq!(order, vec![3, 2, 4, 1]);
    }

    #[test]
    fn checkpoint_resume_skips_done_configs() {
        let panel = generate(&GeneratorSpec::single_signal(40, 1990, 2009, 4)).unwrap().panel;
        let spec = BacktestSpec::from_json(
            r#"{"windows": [5], "sizes": [0.05], "combinations": [["lard", false], ["union", true]], "variable_sets": [["opmar"], ["opmar", "at"]]}"#,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("results.csv");
        let first = run_spec(&panel, &spec, Some(&out), false).unwrap();
        assert_eq!(first.len(), 5);
        // drop the last two rows, as if interrupted
        let text = std::fs::read_to_string(&out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        std::fs::write(&out, lines[..lines.len() - 2].join("\n") + "\n").unwrap();
        let resumed = run_spec(&panel, &spec, Some(&out), true).unwrap();
        assert_eq!(resumed.len(), 2);
        let rows = read_results(&out).unwrap();
        assert_eq!(rows.len(), 5);
        let full: BTreeSet<ResultKey> = first.iter().map(|r| r.config.row_key()).collect();
        let got: BTreeSet<ResultKey> = rows.iter().map(ResultRow::key).collect();
        assert_eq!(full, got);
    }

    #[test]
    fn forward_selection_pool_of_one() {
        let panel = generate(&GeneratorSpec::single_signal(40, 1990, 2009, 4)).unwrap().panel;
        let grid = OptionGrid {
            windows: vec![5],
            sizes: vec![0.05],
            combinations: vec![(Combination::Lard, false)],
        };
        let seeds = [VariableKey::OPMAR, VariableKey::AT, VariableKey::SEQ];
        let r = forward_selection(&panel, 1, &seeds, &[VariableKey::BETA], &grid, &DEFAULT_LEVELS, 2).unwrap();
        assert_eq!(r.extension_stages(), 1);
        assert_eq!(r.stages[0].sets.len(), 3);
        assert!(r.stages[1].sets.iter().all(|s| s.variables.len() == 2));
        let empty = forward_selection(&panel, 1, &seeds, &[], &grid, &DEFAULT_LEVELS, 1).unwrap();
        assert_eq!(empty.extension_stages(), 0);
    }
}
