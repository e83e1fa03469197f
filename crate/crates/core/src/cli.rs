//! Command-line entry point.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtest::{
    brute_force, contemporaneous, forward_selection, read_results, run_spec, write_results, BacktestError, BacktestSpec,
    ResultRow,
};
use crate::forecast::{
    assess_estimates, forecast_case, historic_track, read_estimates, render_report, ForecastError, ReportFormat,
    REPORT_LEVELS,
};
use crate::panel_store::{
    ingest_csv, parse_variable_list, read_cpi_csv, Panel, PanelError, Schema, VariableKey, YearRange,
};
use crate::pca_engine::{PcCountRule, PcaOptions, Transform};
use crate::selection::{Algorithm, Combination, ForecastCase, SelectorConfig};
use crate::synthgen::{generate, GeneratorSpec, SynthError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Backtest(#[from] BacktestError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "refclass", version, about = "Reference class forecasts of firm sales growth")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read a panel CSV, optionally deflate it, and write it back normalized.
    Ingest(IngestArgs),
    /// Add growth and margin-delta lags 1..10 to a panel.
    Derive(DeriveArgs),
    /// Distributional forecast for one firm-year.
    Forecast(ForecastArgs),
    /// PIT of analyst estimates under reference class forecasts.
    Assess(AssessArgs),
    /// Forecast quantiles and realized growth of one firm over base years.
    Track(TrackArgs),
    /// Run a backtest configuration file.
    Backtest(BacktestArgs),
    /// Search reference variable sets.
    Search(SearchArgs),
    /// Generate a synthetic panel and its true conditional laws.
    Synth(SynthArgs),
    /// Rank a results CSV.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Text => ReportFormat::Text,
            Format::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    #[value(name = "best-h1")]
    BestH1,
    #[value(name = "best-h3")]
    BestH3,
    #[value(name = "best-h5")]
    BestH5,
    #[value(name = "best-h10")]
    BestH10,
}

/// Reference variables, window and selector of a forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSetup {
    pub variables: Vec<VariableKey>,
    pub window: u32,
    pub selector: SelectorConfig,
}

fn lags(tau: u8) -> Vec<VariableKey> {
    (1..=tau)
        .flat_map(|l| [VariableKey::sales_growth(l).expect("lag"), VariableKey::opmar_delta(l).expect("lag")])
        .collect()
}

impl Preset {
    /// Best configuration shape per horizon of the published backtests.
    pub fn setup(self) -> ForecastSetup {
        let contemporaneous = contemporaneous();
        let (variables, transform, pcs, window) = match self {
            Preset::BestH1 => ([contemporaneous, lags(1)].concat(), Transform::Ranks, 3, 30),
            Preset::BestH3 => ([contemporaneous, lags(3)].concat(), Transform::Trim, 3, 20),
            Preset::BestH5 => ([contemporaneous, lags(5)].concat(), Transform::Trim, 2, 30),
            Preset::BestH10 => {
                let base = vec![VariableKey::SALES, VariableKey::OPMAR, VariableKey::AT, VariableKey::SEQ];
                ([base, lags(5)].concat(), Transform::Trim, 2, 30)
            }
        };
        ForecastSetup {
            variables,
            window,
            selector: SelectorConfig::pca_rank_deviation(
                0.01,
                Combination::Union,
                true,
                PcaOptions::new(transform, PcCountRule::Fixed(pcs)),
            ),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SelectorArgs {
    /// Preset configuration; overrides the other selector flags.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// JSON file with `variables`, `window` and `selector`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "rd")]
    pub algorithm: String,
    /// Comma-separated reference variables.
    #[arg(long, default_value = "opmar")]
    pub variables: String,
    #[arg(long, default_value_t = 30)]
    pub window: u32,
    #[arg(long, default_value_t = 0.05)]
    pub size: f64,
    #[arg(long, default_value = "lard")]
    pub combination: String,
    #[arg(long)]
    pub correction: bool,
    #[arg(long, default_value = "ranks")]
    pub transform: String,
    #[arg(long, default_value = "var_mean")]
    pub pc_rule: String,
}

impl SelectorArgs {
    pub fn setup(&self) -> Result<ForecastSetup, CliError> {
        if let Some(p) = self.preset {
            return Ok(p.setup());
        }
        if let Some(path) = &self.config {
            let text = read_text(path)?;
            let setup: ForecastSetup = serde_json::from_str(&text).map_err(|source| CliError::Json {
                path: path.clone(),
                source,
            })?;
            setup.selector.validate().map_err(|e| usage(e.to_string()))?;
            return Ok(setup);
        }
        let algorithm: Algorithm = self.algorithm.parse().map_err(|e: String| usage(e))?;
        let combination: Combination = self.combination.parse().map_err(|e: String| usage(e))?;
        let selector = match algorithm {
            Algorithm::MarketClimate => SelectorConfig::market_climate(),
            Algorithm::RankDeviation => SelectorConfig::rank_deviation(self.size, combination, self.correction),
            Algorithm::PcaRankDeviation => {
                let transform: Transform = self.transform.parse().map_err(|e: String| usage(e))?;
                let rule: PcCountRule = self.pc_rule.parse().map_err(|e: String| usage(e))?;
                SelectorConfig::pca_rank_deviation(self.size, combination, self.correction, PcaOptions::new(transform, rule))
            }
            other => SelectorConfig::benchmark(other),
        };
        selector.validate().map_err(|e| usage(e.to_string()))?;
        let variables = if algorithm.uses_variables() {
            parse_variable_list(&self.variables).map_err(|e| usage(e.to_string()))?
        } else {
            Vec::new()
        };
        Ok(ForecastSetup {
            variables,
            window: self.window,
            selector,
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub panel: PathBuf,
    /// CPI CSV (`year,index` or `year,month,index`) for deflating dollar values.
    #[arg(long)]
    pub cpi: Option<PathBuf>,
    /// Index level the dollar values are expressed in; defaults to the last
    /// CPI year.
    #[arg(long)]
    pub base_index: Option<f64>,
    #[arg(long)]
    pub start_year: Option<i32>,
    #[arg(long)]
    pub end_year: Option<i32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DeriveArgs {
    #[arg(long)]
    pub panel: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ForecastArgs {
    #[arg(long)]
    pub panel: PathBuf,
    #[arg(long)]
    pub firm: String,
    #[arg(long)]
    pub year: i32,
    #[arg(long)]
    pub horizon: u32,
    #[command(flatten)]
    pub selector: SelectorArgs,
    /// Comma-separated quantile levels.
    #[arg(long, value_delimiter = ',')]
    pub quantiles: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    /// Also write the sorted class outcomes, one per line.
    #[arg(long)]
    pub outcomes: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AssessArgs {
    #[arg(long)]
    pub panel: PathBuf,
    /// CSV with `firm_id,year,horizon,estimate_pct`.
    #[arg(long)]
    pub estimates: PathBuf,
    #[command(flatten)]
    pub selector: SelectorArgs,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrackArgs {
    #[arg(long)]
    pub panel: PathBuf,
    #[arg(long)]
    pub firm: String,
    #[arg(long)]
    pub from: i32,
    #[arg(long)]
    pub to: i32,
    #[arg(long)]
    pub horizon: u32,
    #[command(flatten)]
    pub selector: SelectorArgs,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BacktestArgs {
    /// JSON backtest configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the panel named in the configuration.
    #[arg(long)]
    pub panel: Option<PathBuf>,
    /// Overrides the output named in the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Skip configurations already present in the output.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SearchMode {
    Forward,
    Brute,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[arg(value_enum)]
    pub mode: SearchMode,
    #[arg(long)]
    pub horizon: u32,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub panel: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// JSON generator settings.
    #[arg(long)]
    pub spec: PathBuf,
    /// Directory receiving `panel.csv` and `sidecar.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the generator settings.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Results CSV written by `backtest` or `search`.
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub top: Option<usize>,
    #[arg(long)]
    pub horizon: Option<u32>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create(path: &Path) -> Result<File, CliError> {
    File::create(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Machine output goes to `out` when given, standard output otherwise.
fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => create(p)?.write_all(text.as_bytes()).map_err(|source| CliError::Io {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|source| CliError::Io {
                path: PathBuf::from("<stdout>"),
                source,
            })
        }
    }
}

fn load_panel(path: &Path) -> Result<Panel, CliError> {
    Ok(ingest_csv(path, &Schema::standard())?)
}

/// Loads a panel and derives lags when a needed lagged variable is absent
/// from every row.
fn load_for(path: &Path, variables: &[VariableKey]) -> Result<Panel, CliError> {
    let panel = load_panel(path)?;
    let absent = |v: &VariableKey| v.lag() > 0 && panel.observations().iter().all(|o| o.get(*v).is_none());
    if variables.iter().any(absent) {
        Ok(panel.derive_all()?)
    } else {
        Ok(panel)
    }
}

fn restrict(panel: Panel, start: Option<i32>, end: Option<i32>) -> Result<Panel, CliError> {
    if start.is_none() && end.is_none() {
        return Ok(panel);
    }
    let range = YearRange {
        start: start.unwrap_or(panel.start_year()),
        end: end.unwrap_or(panel.end_year()),
    };
    let obs = panel.observations().iter().filter(|o| range.contains(o.key.year)).cloned().collect();
    Ok(Panel::new(obs, range)?)
}

fn panel_text(panel: &Panel) -> Result<String, CliError> {
    let mut buf = Vec::new();
    panel.write_csv(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

fn run_ingest(a: &IngestArgs) -> Result<(), CliError> {
    let mut panel = restrict(load_panel(&a.panel)?, a.start_year, a.end_year)?;
    if let Some(cpi_path) = &a.cpi {
        let cpi = read_cpi_csv(cpi_path)?;
        let base = match a.base_index {
            Some(b) => b,
            None => *cpi.values().next_back().ok_or_else(|| usage("empty CPI file"))?,
        };
        panel = panel.deflate(&cpi, base)?;
    } else if a.base_index.is_some() {
        return Err(usage("--base-index requires --cpi"));
    }
    eprintln!(
        "{} observations, {} firms, years {}..={}",
        panel.len(),
        panel.firm_count(),
        panel.start_year(),
        panel.end_year()
    );
    emit(a.out.as_deref(), &panel_text(&panel)?)
}

fn run_derive(a: &DeriveArgs) -> Result<(), CliError> {
    let panel = load_panel(&a.panel)?.derive_all()?;
    emit(a.out.as_deref(), &panel_text(&panel)?)
}

fn case_for(setup: &ForecastSetup, firm: &str, year: i32, horizon: u32) -> ForecastCase {
    ForecastCase {
        target: crate::panel_store::FirmYear::new(firm, year),
        horizon,
        reference_variables: setup.variables.clone(),
        window: setup.window,
    }
}

fn run_forecast(a: &ForecastArgs) -> Result<(), CliError> {
    if a.horizon == 0 {
        return Err(usage("--horizon must be positive"));
    }
    let levels = a.quantiles.clone().unwrap_or_else(|| REPORT_LEVELS.to_vec());
    if levels.iter().any(|&q| !(q > 0.0 && q <= 1.0)) {
        return Err(usage("quantile levels must lie in (0, 1]"));
    }
    let setup = a.selector.setup()?;
    let panel = load_for(&a.panel, &setup.variables)?;
    let (forecast, _) = forecast_case(&panel, &case_for(&setup, &a.firm, a.year, a.horizon), &setup.selector)?;
    if let Some(path) = &a.outcomes {
        let mut w = BufWriter::new(create(path)?);
        let io_err = |source| CliError::Io {
            path: path.clone(),
            source,
        };
        for v in forecast.outcomes() {
            writeln!(w, "{v}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
    }
    emit(a.out.as_deref(), &render_report(&forecast, &levels, a.format.into())?)
}

#[derive(Debug, Serialize)]
struct AssessRow {
    firm_id: String,
    year: i32,
    horizon: u32,
    estimate_pct: f64,
    pit: f64,
    class_size: usize,
    coverage: f64,
    warning: bool,
}

fn run_assess(a: &AssessArgs) -> Result<(), CliError> {
    let setup = a.selector.setup()?;
    let file = File::open(&a.estimates).map_err(|source| CliError::Io {
        path: a.estimates.clone(),
        source,
    })?;
    let estimates = read_estimates(file)?;
    let panel = load_for(&a.panel, &setup.variables)?;
    let mut groups: BTreeMap<(String, i32, u32), Vec<f64>> = BTreeMap::new();
    for e in &estimates {
        groups.entry((e.firm_id.clone(), e.year, e.horizon)).or_default().push(e.estimate_pct);
    }
    let mut rows = Vec::new();
    for ((firm, year, h), values) in groups {
        let (forecast, _) = forecast_case(&panel, &case_for(&setup, &firm, year, h), &setup.selector)?;
        let assessment = assess_estimates(&forecast, &values)?;
        for (v, p) in values.iter().zip(&assessment.pits) {
            rows.push(AssessRow {
                firm_id: firm.clone(),
                year,
                horizon: h,
                estimate_pct: *v,
                pit: *p,
                class_size: forecast.n(),
                coverage: assessment.coverage,
                warning: assessment.warning,
            });
        }
    }
    let text = match a.format {
        Format::Csv => csv_text(&rows)?,
        Format::Text => {
            let mut s = format!(
                "{:<12}{:>6}{:>4}{:>12}{:>8}{:>7}{:>10}  {}\n",
                "firm", "year", "h", "estimate", "pit", "n", "coverage", "warning"
            );
            for r in &rows {
                s.push_str(&format!(
                    "{:<12}{:>6}{:>4}{:>12.2}{:>8.3}{:>7}{:>10.3}  {}\n",
                    r.firm_id,
                    r.year,
                    r.horizon,
                    r.estimate_pct,
                    r.pit,
                    r.class_size,
                    r.coverage,
                    if r.warning { "yes" } else { "" }
                ));
            }
            s
        }
    };
    emit(a.out.as_deref(), &text)
}

fn csv_text<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Serialize)]
struct TrackRow {
    year: i32,
    q10: Option<f64>,
    q25: Option<f64>,
    q50: Option<f64>,
    q75: Option<f64>,
    q90: Option<f64>,
    realized: Option<f64>,
    class_size: Option<usize>,
    skipped: Option<String>,
}

fn run_track(a: &TrackArgs) -> Result<(), CliError> {
    if a.from > a.to {
        return Err(usage("--from must not exceed --to"));
    }
    let setup = a.selector.setup()?;
    let panel = load_for(&a.panel, &setup.variables)?;
    let records = historic_track(&panel, &a.firm, a.from..=a.to, a.horizon, &setup.variables, setup.window, &setup.selector)?;
    let rows: Vec<TrackRow> = records
        .into_iter()
        .map(|r| {
            let q = |i: usize| r.quantiles.map(|q| q[i]);
            TrackRow {
                year: r.year,
                q10: q(0),
                q25: q(1),
                q50: q(2),
                q75: q(3),
                q90: q(4),
                realized: r.realized,
                class_size: r.class_size,
                skipped: r.skipped,
            }
        })
        .collect();
    let text = match a.format {
        Format::Csv => csv_text(&rows)?,
        Format::Text => {
            let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
            let mut s = format!(
                "{:>6}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}{:>7}\n",
                "year", "q10", "q25", "q50", "q75", "q90", "realized", "n"
            );
            for r in &rows {
                s.push_str(&format!(
                    "{:>6}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}{:>7}\n",
                    r.year,
                    cell(r.q10),
                    cell(r.q25),
                    cell(r.q50),
                    cell(r.q75),
                    cell(r.q90),
                    cell(r.realized),
                    r.class_size.map_or("-".to_string(), |n| n.to_string())
                ));
            }
            s
        }
    };
    emit(a.out.as_deref(), &text)
}

fn load_spec(config: &Path, panel: Option<&PathBuf>, workers: Option<usize>) -> Result<(BacktestSpec, Panel), CliError> {
    let mut spec = BacktestSpec::load(config)?;
    if let Some(w) = workers {
        spec.workers = w;
    }
    spec.validate()?;
    let path = panel
        .cloned()
        .or_else(|| spec.panel.clone())
        .ok_or_else(|| usage("no panel: pass --panel or set `panel` in the configuration"))?;
    let mut vars: Vec<VariableKey> = spec.variable_sets.iter().flatten().copied().collect();
    vars.extend(&spec.pool);
    vars.extend(&spec.seeds);
    let panel = restrict(load_for(&path, &vars)?, spec.start_year, spec.end_year)?;
    Ok((spec, panel))
}

fn run_backtest(a: &BacktestArgs) -> Result<(), CliError> {
    let (spec, panel) = load_spec(&a.config, a.panel.as_ref(), a.workers)?;
    let output = a.out.clone().or_else(|| spec.output.clone());
    let results = run_spec(&panel, &spec, output.as_deref(), a.resume)?;
    eprintln!("{} configurations evaluated", results.len());
    if output.is_none() {
        write_results(io::stdout().lock(), &results)?;
    }
    Ok(())
}

fn run_search(a: &SearchArgs) -> Result<(), CliError> {
    if a.horizon == 0 {
        return Err(usage("--horizon must be positive"));
    }
    let (spec, panel) = load_spec(&a.config, a.panel.as_ref(), a.workers)?;
    let pool = if spec.pool.is_empty() { contemporaneous() } else { spec.pool.clone() };
    match a.mode {
        SearchMode::Forward => {
            let report = forward_selection(&panel, a.horizon, &spec.seeds, &pool, &spec.grid(), &spec.levels, spec.workers)?;
            let mut s = String::from("stage,rank,variables,delta_q,w,size,comb,cor\n");
            for stage in &report.stages {
                for (rank, set) in stage.sets.iter().enumerate() {
                    let row = set.best.row();
                    s.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        stage.index,
                        rank + 1,
                        row.ref_var,
                        row.delta_q.map_or(String::new(), |d| d.to_string()),
                        row.w,
                        row.size,
                        row.comb,
                        row.cor
                    ));
                }
            }
            if let Some(best) = report.best() {
                let vars: Vec<String> = best.variables.iter().map(ToString::to_string).collect();
                eprintln!("best set {} with delta_q {:?}", vars.join("+"), best.delta_q());
            }
            emit(a.out.as_deref(), &s)
        }
        SearchMode::Brute => {
            let results = brute_force(&panel, a.horizon, &pool, &spec.grid(), spec.brute_force_cap, &spec.levels, spec.workers)?;
            let mut buf = Vec::new();
            write_results(&mut buf, &results)?;
            emit(a.out.as_deref(), &String::from_utf8(buf).expect("csv output is utf-8"))
        }
    }
}

fn run_synth(a: &SynthArgs) -> Result<(), CliError> {
    let text = read_text(&a.spec)?;
    let mut spec: GeneratorSpec = serde_json::from_str(&text).map_err(|source| CliError::Json {
        path: a.spec.clone(),
        source,
    })?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let generated = generate(&spec)?;
    std::fs::create_dir_all(&a.out).map_err(|source| CliError::Io {
        path: a.out.clone(),
        source,
    })?;
    generated.panel.export_csv(&a.out.join("panel.csv"))?;
    generated.sidecar.write_csv(create(&a.out.join("sidecar.csv"))?)?;
    eprintln!(
        "{} observations, {} sidecar entries written to {}",
        generated.panel.len(),
        generated.sidecar.len(),
        a.out.display()
    );
    Ok(())
}

fn run_report(a: &ReportArgs) -> Result<(), CliError> {
    let mut rows: Vec<ResultRow> = read_results(&a.results)?;
    if let Some(h) = a.horizon {
        rows.retain(|r| r.horizon == h);
    }
    rows.sort_by(|x, y| {
        x.delta_q
            .unwrap_or(f64::INFINITY)
            .total_cmp(&y.delta_q.unwrap_or(f64::INFINITY))
    });
    if let Some(n) = a.top {
        rows.truncate(n);
    }
    let text = match a.format {
        Format::Csv => csv_text(&rows)?,
        Format::Text => {
            let num = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
            let mut s = format!(
                "{:<8}{:<40}{:<8}{:<8}{:<8}{:<5}{:>4}{:>7}{:>9}{:>8}{:>8}{:>8}{:>8}\n",
                "alg", "ref_var", "transf", "n_pc", "comb", "cor", "w", "size", "delta_q", "ks", "cvm", "m", "skipped"
            );
            for r in &rows {
                s.push_str(&format!(
                    "{:<8}{:<40}{:<8}{:<8}{:<8}{:<5}{:>4}{:>7}{:>9}{:>8}{:>8}{:>8}{:>8}\n",
                    r.algorithm,
                    r.ref_var,
                    r.transf,
                    r.n_pc,
                    r.comb,
                    r.cor,
                    r.w,
                    r.size,
                    num(r.delta_q, 4),
                    num(r.ks, 3),
                    num(r.cvm, 3),
                    r.m,
                    r.skipped
                ));
            }
            s
        }
    };
    emit(a.out.as_deref(), &text)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Ingest(a) => run_ingest(a),
        Command::Derive(a) => run_derive(a),
        Command::Forecast(a) => run_forecast(a),
        Command::Assess(a) => run_assess(a),
        Command::Track(a) => run_track(a),
        Command::Backtest(a) => run_backtest(a),
        Command::Search(a) => run_search(a),
        Command::Synth(a) => run_synth(a),
        Command::Report(a) => run_report(a),
    }
}

/// Parses `args` and runs the command. Returns 0 on success, 1 on usage
/// errors and 2 on data errors.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
