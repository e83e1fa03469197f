//! Distributional forecasts from reference classes: PIT, quantiles,
//! estimate assessment, base-rate tables and historic tracking.

use std::fmt::Write as _;
use std::io::Read;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel_store::{annualize_growth, trimmed_mean, trimmed_std, FirmYear, Panel, PanelError, VariableKey};
use crate::selection::{build_candidates, ForecastCase, ReferenceClass, SelectionError, Selector, SelectorConfig, Target, MIN_CLASS_SIZE};
use crate::stats_core::{Ecdf, StatsError};

/// Levels reported by default in forecast reports.
pub const REPORT_LEVELS: [f64; 9] = [0.01, 0.05, 0.10, 0.25, 0.50, 0.75, 0.90, 0.95, 0.99];
/// Levels tracked per year.
pub const TRACK_LEVELS: [f64; 5] = [0.10, 0.25, 0.50, 0.75, 0.90];
/// Upper edges of the CAGR bins below the open top bin.
pub const BIN_EDGES: [f64; 15] = [
    -25.0, -20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0,
];
/// Tail fraction trimmed for the base-rate summary rows.
pub const BASE_RATE_TRIM: f64 = 0.025;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("reference class has {0} members (< {MIN_CLASS_SIZE})")]
    Undersized(usize),
    #[error("invalid outcome {0}")]
    InvalidOutcome(f64),
    #[error("{0}")]
    Domain(String),
    #[error("firm {0} not in panel")]
    FirmAbsent(String),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionalForecast {
    ecdf: Ecdf,
    pub horizon: u32,
    pub case: Option<FirmYear>,
    pub candidate_count: usize,
}

pub fn make_forecast(class: &ReferenceClass, horizon: u32) -> Result<DistributionalForecast, ForecastError> {
    let mut f = forecast_from_outcomes(class.outcomes.clone(), horizon)?;
    f.candidate_count = class.candidate_count;
    Ok(f)
}

/// Forecast straight from a list of growth outcomes (percent).
pub fn forecast_from_outcomes(outcomes: Vec<f64>, horizon: u32) -> Result<DistributionalForecast, ForecastError> {
    if outcomes.len() < MIN_CLASS_SIZE {
        return Err(ForecastError::Undersized(outcomes.len()));
    }
    if let Some(&bad) = outcomes.iter().find(|v| !v.is_finite() || **v < -100.0) {
        return Err(ForecastError::InvalidOutcome(bad));
    }
    let n = outcomes.len();
    Ok(DistributionalForecast {
        ecdf: Ecdf::new(outcomes)?,
        horizon,
        case: None,
        candidate_count: n,
    })
}

impl DistributionalForecast {
    pub fn with_case(mut self, case: FirmYear) -> Self {
        self.case = Some(case);
        self
    }

    pub fn n(&self) -> usize {
        self.ecdf.n()
    }

    /// Sorted outcomes.
    pub fn outcomes(&self) -> &[f64] {
        self.ecdf.sorted_sample()
    }

    pub fn ecdf(&self) -> &Ecdf {
        &self.ecdf
    }

    /// Fraction of reference outcomes `<= realized`.
    pub fn pit(&self, realized: f64) -> f64 {
        self.ecdf.eval(realized)
    }

    pub fn quantile(&self, alpha: f64) -> Result<f64, ForecastError> {
        Ok(self.ecdf.quantile(alpha)?)
    }

    /// Central interval between the `(1-coverage)/2` and `(1+coverage)/2`
    /// quantiles.
    pub fn interval(&self, coverage: f64) -> Result<(f64, f64), ForecastError> {
        if !(coverage > 0.0 && coverage < 1.0) {
            return Err(ForecastError::Domain(format!("coverage {coverage} outside (0,1)")));
        }
        Ok((self.quantile((1.0 - coverage) / 2.0)?, self.quantile((1.0 + coverage) / 2.0)?))
    }
}

pub fn pit(forecast: &DistributionalForecast, realized: f64) -> f64 {
    forecast.pit(realized)
}

/// PIT thresholds below/above which an estimate is flagged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarningThresholds {
    pub low: f64,
    pub high: f64,
}

impl Default for WarningThresholds {
    fn default() -> Self {
        Self { low: 0.05, high: 0.95 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    pub pits: Vec<f64>,
    /// Forecast mass between the lowest and highest estimate, both included.
    pub coverage: f64,
    pub warning: bool,
}

pub fn assess_estimates(forecast: &DistributionalForecast, estimates: &[f64]) -> Result<Assessment, ForecastError> {
    assess_estimates_with(forecast, estimates, WarningThresholds::default())
}

pub fn assess_estimates_with(
    forecast: &DistributionalForecast,
    estimates: &[f64],
    thresholds: WarningThresholds,
) -> Result<Assessment, ForecastError> {
    if estimates.is_empty() {
        return Err(ForecastError::Domain("no estimates".into()));
    }
    if estimates.iter().any(|e| e.is_nan()) {
        return Err(ForecastError::Domain("estimate is NaN".into()));
    }
    let pits: Vec<f64> = estimates.iter().map(|&e| forecast.pit(e)).collect();
    let lo = estimates.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = estimates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let coverage = forecast.ecdf.eval(hi) - forecast.ecdf.eval_below(lo);
    let warning = pits.iter().any(|&p| p < thresholds.low || p > thresholds.high);
    Ok(Assessment {
        pits,
        coverage,
        warning,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaseRateBin {
    pub label: String,
    /// Exclusive lower edge; `None` for the open bottom bin.
    pub lower: Option<f64>,
    /// Inclusive upper edge; `None` for the open top bin.
    pub upper: Option<f64>,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaseRateTable {
    pub horizon: u32,
    pub n: usize,
    pub bins: Vec<BaseRateBin>,
    pub trimmed_mean: f64,
    pub median: f64,
    pub trimmed_std: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Bin index of a CAGR value: `≤ -25` is 0, `> 45` is 15.
pub fn bin_index(cagr: f64) -> usize {
    BIN_EDGES.partition_point(|&e| e < cagr)
}

fn bin_label(i: usize) -> String {
    match i {
        0 => format!("<= {}", BIN_EDGES[0]),
        i if i == BIN_EDGES.len() => format!("> {}", BIN_EDGES[i - 1]),
        i => format!("({}, {}]", BIN_EDGES[i - 1], BIN_EDGES[i]),
    }
}

/// Binned CAGR distribution and summary rows of a forecast.
pub fn base_rates(forecast: &DistributionalForecast) -> Result<BaseRateTable, ForecastError> {
    if forecast.horizon == 0 {
        return Err(ForecastError::Domain("horizon must be at least 1".into()));
    }
    let cagr: Vec<f64> = if forecast.horizon == 1 {
        forecast.outcomes().to_vec()
    } else {
        forecast
            .outcomes()
            .iter()
            .map(|&g| annualize_growth(g, forecast.horizon))
            .collect::<Result<_, _>>()?
    };
    let n = cagr.len();
    let mut counts = vec![0usize; BIN_EDGES.len() + 1];
    for &v in &cagr {
        counts[bin_index(v)] += 1;
    }
    let bins = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| BaseRateBin {
            label: bin_label(i),
            lower: (i > 0).then(|| BIN_EDGES[i - 1]),
            upper: BIN_EDGES.get(i).copied(),
            percent: 100.0 * c as f64 / n as f64,
        })
        .collect();
    let ecdf = Ecdf::new(cagr.clone())?;
    Ok(BaseRateTable {
        horizon: forecast.horizon,
        n,
        bins,
        trimmed_mean: trimmed_mean(&cagr, BASE_RATE_TRIM)?,
        median: ecdf.quantile(0.5)?,
        trimmed_std: trimmed_std(&cagr, BASE_RATE_TRIM)?,
        q025: ecdf.quantile(0.025)?,
        q975: ecdf.quantile(0.975)?,
    })
}

/// Selects a class for one case and turns it into a forecast.
pub fn forecast_case(
    panel: &Panel,
    case: &ForecastCase,
    config: &SelectorConfig,
) -> Result<(DistributionalForecast, ReferenceClass), ForecastError> {
    let vars = config.candidate_variables(&case.reference_variables);
    let target = Target::from_panel(panel, &case.target, &vars)?;
    let cand_case = ForecastCase {
        reference_variables: vars,
        ..case.clone()
    };
    let cands = build_candidates(panel, &cand_case, config.availability())?;
    let selector = Selector::prepare(&cands, config)?;
    let class = selector.select(&target)?;
    let forecast = make_forecast(&class, case.horizon)?.with_case(case.target.clone());
    Ok((forecast, class))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackRecord {
    pub year: i32,
    /// Forecast quantiles at [`TRACK_LEVELS`].
    pub quantiles: Option<[f64; 5]>,
    pub realized: Option<f64>,
    pub class_size: Option<usize>,
    pub skipped: Option<String>,
}

/// Forecast quantiles and realized growth of one firm over a range of base
/// years.
pub fn historic_track(
    panel: &Panel,
    firm: &str,
    years: RangeInclusive<i32>,
    horizon: u32,
    variables: &[VariableKey],
    window: u32,
    config: &SelectorConfig,
) -> Result<Vec<TrackRecord>, ForecastError> {
    if !panel.contains_firm(firm) {
        return Err(ForecastError::FirmAbsent(firm.to_string()));
    }
    let mut out = Vec::new();
    for year in years {
        let realized = panel.forward_growth(firm, year, horizon);
        let case = ForecastCase {
            target: FirmYear::new(firm, year),
            horizon,
            reference_variables: variables.to_vec(),
            window,
        };
        let record = match forecast_case(panel, &case, config) {
            Ok((f, class)) => {
                let mut q = [0.0; 5];
                for (slot, &a) in q.iter_mut().zip(&TRACK_LEVELS) {
                    *slot = f.quantile(a)?;
                }
                TrackRecord {
                    year,
                    quantiles: Some(q),
                    realized,
                    class_size: Some(class.len()),
                    skipped: None,
                }
            }
            Err(e) => TrackRecord {
                year,
                quantiles: None,
                realized,
                class_size: None,
                skipped: Some(e.to_string()),
            },
        };
        out.push(record);
    }
    Ok(out)
}

/// One analyst estimate row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub firm_id: String,
    pub year: i32,
    pub horizon: u32,
    pub estimate_pct: f64,
}

pub fn read_estimates<R: Read>(reader: R) -> Result<Vec<Estimate>, ForecastError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let rows = rdr.deserialize().collect::<Result<Vec<Estimate>, _>>()?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

/// Quantiles, base-rate table and sizes of a forecast.
pub fn render_report(forecast: &DistributionalForecast, levels: &[f64], format: ReportFormat) -> Result<String, ForecastError> {
    let table = base_rates(forecast)?;
    let quantiles = levels
        .iter()
        .map(|&a| Ok((a, forecast.quantile(a)?)))
        .collect::<Result<Vec<_>, ForecastError>>()?;
    let case = forecast.case.as_ref().map(ToString::to_string).unwrap_or_default();
    let summary = [
        ("trimmed_mean", table.trimmed_mean),
        ("median", table.median),
        ("trimmed_std", table.trimmed_std),
        ("q2.5", table.q025),
        ("q97.5", table.q975),
    ];
    let mut s = String::new();
    match format {
        ReportFormat::Csv => {
            s.push_str("section,key,value\n");
            let _ = writeln!(s, "case,target,{case}");
            let _ = writeln!(s, "case,horizon,{}", forecast.horizon);
            let _ = writeln!(s, "case,class_size,{}", forecast.n());
            let _ = writeln!(s, "case,candidates,{}", forecast.candidate_count);
            for (a, q) in &quantiles {
                let _ = writeln!(s, "quantile,{a},{q}");
            }
            for b in &table.bins {
                let _ = writeln!(s, "cagr_bin,\"{}\",{}", b.label, b.percent);
            }
            for (k, v) in summary {
                let _ = writeln!(s, "cagr_summary,{k},{v}");
            }
        }
        ReportFormat::Text => {
            let _ = writeln!(s, "target      {case}");
            let _ = writeln!(s, "horizon     {}", forecast.horizon);
            let _ = writeln!(s, "class size  {}", forecast.n());
            let _ = writeln!(s, "candidates  {}", forecast.candidate_count);
            s.push_str("\ngrowth quantiles (%)\n");
            for (a, q) in &quantiles {
                let _ = writeln!(s, "  {:>6.2}%  {:>10.2}", a * 100.0, q);
            }
            s.push_str("\nCAGR (%)        share (%)\n");
            for b in &table.bins {
                let _ = writeln!(s, "  {:<14}{:>8.2}", b.label, b.percent);
            }
            for (k, v) in summary {
                let _ = writeln!(s, "  {k:<14}{v:>8.2}");
            }
        }
    }
    Ok(s)
}
