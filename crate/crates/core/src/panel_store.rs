//! Firm-year panel: ingestion, deflation, derived growth variables and
//! indexed read-only views.
//!
//! Missing values are absent entries (`None`), never sentinel numbers.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::stats_core::cmp_f64;

/// Largest lag for the derived growth variables.
pub const MAX_LAG: u8 = 10;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: cannot parse {value:?}")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("duplicate observation for firm {firm_id} in {year}")]
    Duplicate { firm_id: String, year: i32 },
    #[error("firm {firm_id}: year {year} outside panel range {start}..={end}")]
    YearOutOfRange {
        firm_id: String,
        year: i32,
        start: i32,
        end: i32,
    },
    #[error("invalid value for {variable} at firm {firm_id}, {year}: {value}")]
    InvalidValue {
        firm_id: String,
        year: i32,
        variable: VariableKey,
        value: f64,
    },
    #[error("cpi index missing for years {0:?}")]
    MissingCpi(Vec<i32>),
    #[error("invalid variable `{0}`")]
    UnknownVariable(String),
    #[error("lag {0} outside 1..=10")]
    InvalidLag(u8),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("empty panel")]
    Empty,
}

/// Firm identifier plus calendar year.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FirmYear {
    pub firm_id: String,
    pub year: i32,
}

impl FirmYear {
    pub fn new(firm_id: impl Into<String>, year: i32) -> Self {
        Self {
            firm_id: firm_id.into(),
            year,
        }
    }
}

impl fmt::Display for FirmYear {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.firm_id, self.year)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Base {
    Sales,
    Opmar,
    At,
    Seq,
    Sic,
    Beta,
    Pe,
    Pb,
    SalesGr,
    OpmarDelta,
}

impl Base {
    fn name(self) -> &'static str {
        match self {
            Base::Sales => "sales",
            Base::Opmar => "opmar",
            Base::At => "at",
            Base::Seq => "seq",
            Base::Sic => "sic",
            Base::Beta => "beta",
            Base::Pe => "pe",
            Base::Pb => "pb",
            Base::SalesGr => "salesGR",
            Base::OpmarDelta => "opmarDelta",
        }
    }

    fn is_lagged(self) -> bool {
        matches!(self, Base::SalesGr | Base::OpmarDelta)
    }

    /// Dollar-denominated bases, subject to deflation.
    pub fn is_dollar(self) -> bool {
        matches!(self, Base::Sales | Base::At | Base::Seq)
    }
}

/// A reference variable: base name plus lag in years.
///
/// The lag is 0 for every base except `salesGR` and `opmarDelta`, whose lag
/// lies in `1..=10`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VariableKey {
    base: Base,
    lag: u8,
}

/// Value slots: 7 contemporaneous variables, then 10 growth lags, then 10
/// margin-delta lags. SIC lives on the observation itself.
const N_SLOTS: usize = 7 + 2 * MAX_LAG as usize;

impl VariableKey {
    pub const SALES: Self = Self::contemporaneous(Base::Sales);
    pub const OPMAR: Self = Self::contemporaneous(Base::Opmar);
    pub const AT: Self = Self::contemporaneous(Base::At);
    pub const SEQ: Self = Self::contemporaneous(Base::Seq);
    pub const SIC: Self = Self::contemporaneous(Base::Sic);
    pub const BETA: Self = Self::contemporaneous(Base::Beta);
    pub const PE: Self = Self::contemporaneous(Base::Pe);
    pub const PB: Self = Self::contemporaneous(Base::Pb);

    const fn contemporaneous(base: Base) -> Self {
        Self { base, lag: 0 }
    }

    pub fn new(base: Base, lag: u8) -> Result<Self, PanelError> {
        if base.is_lagged() {
            if lag == 0 || lag > MAX_LAG {
                return Err(PanelError::InvalidLag(lag));
            }
        } else if lag != 0 {
            return Err(PanelError::InvalidLag(lag));
        }
        Ok(Self { base, lag })
    }

    pub fn sales_growth(lag: u8) -> Result<Self, PanelError> {
        Self::new(Base::SalesGr, lag)
    }

    pub fn opmar_delta(lag: u8) -> Result<Self, PanelError> {
        Self::new(Base::OpmarDelta, lag)
    }

    pub fn base(&self) -> Base {
        self.base
    }

    pub fn lag(&self) -> u8 {
        self.lag
    }

    fn slot(&self) -> Option<usize> {
        let lag = self.lag as usize;
        Some(match self.base {
            Base::Sales => 0,
            Base::Opmar => 1,
            Base::At => 2,
            Base::Seq => 3,
            Base::Beta => 4,
            Base::Pe => 5,
            Base::Pb => 6,
            Base::SalesGr => 6 + lag,
            Base::OpmarDelta => 16 + lag,
            Base::Sic => return None,
        })
    }

    fn from_slot(slot: usize) -> Self {
        match slot {
            0 => Self::SALES,
            1 => Self::OPMAR,
            2 => Self::AT,
            3 => Self::SEQ,
            4 => Self::BETA,
            5 => Self::PE,
            6 => Self::PB,
            7..=16 => Self {
                base: Base::SalesGr,
                lag: (slot - 6) as u8,
            },
            _ => Self {
                base: Base::OpmarDelta,
                lag: (slot - 16) as u8,
            },
        }
    }

    /// Every value column in export order (SIC excluded).
    pub fn all_value_keys() -> Vec<Self> {
        (0..N_SLOTS).map(Self::from_slot).collect()
    }
}

/// The seven contemporaneous reference variables (SIC excluded).
pub const CONTEMPORANEOUS: [VariableKey; 7] = [
    VariableKey::SALES,
    VariableKey::OPMAR,
    VariableKey::AT,
    VariableKey::SEQ,
    VariableKey::BETA,
    VariableKey::PE,
    VariableKey::PB,
];

impl fmt::Display for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.base.is_lagged() {
            write!(f, "{}_{}", self.base.name(), self.lag)
        } else {
            f.write_str(self.base.name())
        }
    }
}

impl FromStr for VariableKey {
    type Err = PanelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let unknown = || PanelError::UnknownVariable(s.to_string());
        let (name, lag) = match s.split_once('_') {
            Some((name, lag)) => (name, lag.parse::<u8>().map_err(|_| unknown())?),
            None => (s, 0),
        };
        let base = match name.to_ascii_lowercase().as_str() {
            "sales" => Base::Sales,
            "opmar" => Base::Opmar,
            "at" => Base::At,
            "seq" => Base::Seq,
            "sic" => Base::Sic,
            "beta" => Base::Beta,
            "pe" => Base::Pe,
            "pb" => Base::Pb,
            "salesgr" => Base::SalesGr,
            "opmardelta" => Base::OpmarDelta,
            _ => return Err(unknown()),
        };
        Self::new(base, lag)
    }
}

impl Serialize for VariableKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VariableKey {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Parses a comma-separated list such as `opmar,salesGR_1`.
pub fn parse_variable_list(s: &str) -> Result<Vec<VariableKey>, PanelError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// One firm-year record.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub key: FirmYear,
    pub sic: Option<u32>,
    values: [Option<f64>; N_SLOTS],
}

impl Observation {
    pub fn new(key: FirmYear, sic: Option<u32>) -> Self {
        Self {
            key,
            sic,
            values: [None; N_SLOTS],
        }
    }

    pub fn get(&self, var: VariableKey) -> Option<f64> {
        match var.slot() {
            Some(slot) => self.values[slot],
            None => self.sic.map(f64::from),
        }
    }

    pub fn set(&mut self, var: VariableKey, value: Option<f64>) {
        match var.slot() {
            Some(slot) => self.values[slot] = value,
            None => self.sic = value.map(|v| v as u32),
        }
    }

    pub fn with(mut self, var: VariableKey, value: f64) -> Self {
        self.set(var, Some(value));
        self
    }

    /// Values for `vars` in order, `None` when any is missing.
    pub fn values_of(&self, vars: &[VariableKey]) -> Option<Vec<f64>> {
        vars.iter().map(|&v| self.get(v)).collect()
    }

    fn validate(&self) -> Result<(), PanelError> {
        let invalid = |variable: VariableKey, value: f64| PanelError::InvalidValue {
            firm_id: self.key.firm_id.clone(),
            year: self.key.year,
            variable,
            value,
        };
        for (slot, v) in self.values.iter().enumerate() {
            if let Some(v) = *v {
                let key = VariableKey::from_slot(slot);
                if !v.is_finite() {
                    return Err(invalid(key, v));
                }
                if key.base == Base::Sales && v < 0.0 {
                    return Err(invalid(key, v));
                }
                if key.base == Base::SalesGr && v < -100.0 {
                    return Err(invalid(key, v));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearRange {
    pub start: i32,
    pub end: i32,
}

impl Default for YearRange {
    fn default() -> Self {
        Self {
            start: 1950,
            end: 2019,
        }
    }
}

impl YearRange {
    pub fn contains(&self, year: i32) -> bool {
        (self.start..=self.end).contains(&year)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub source: Option<PathBuf>,
    pub deflated: bool,
    pub derived_growth: Vec<u8>,
    pub derived_opmar_delta: Vec<u8>,
}

/// Immutable firm-year panel, indexed by firm and by year.
#[derive(Debug, Clone)]
pub struct Panel {
    observations: Vec<Observation>,
    by_year: BTreeMap<i32, Range<usize>>,
    by_firm: HashMap<String, Vec<usize>>,
    range: YearRange,
    pub provenance: Provenance,
}

impl Panel {
    /// Builds a panel, rejecting duplicate firm-years, out-of-range years and
    /// invalid values.
    pub fn new(mut observations: Vec<Observation>, range: YearRange) -> Result<Self, PanelError> {
        for obs in &observations {
            if !range.contains(obs.key.year) {
                return Err(PanelError::YearOutOfRange {
                    firm_id: obs.key.firm_id.clone(),
                    year: obs.key.year,
                    start: range.start,
                    end: range.end,
                });
            }
            obs.validate()?;
        }
        observations.sort_by(|a, b| {
            (a.key.year, &a.key.firm_id).cmp(&(b.key.year, &b.key.firm_id))
        });
        if let Some(w) = observations.windows(2).find(|w| w[0].key == w[1].key) {
            return Err(PanelError::Duplicate {
                firm_id: w[0].key.firm_id.clone(),
                year: w[0].key.year,
            });
        }
        let mut by_year: BTreeMap<i32, Range<usize>> = BTreeMap::new();
        let mut by_firm: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, obs) in observations.iter().enumerate() {
            by_year
                .entry(obs.key.year)
                .and_modify(|r| r.end = i + 1)
                .or_insert(i..i + 1);
            by_firm.entry(obs.key.firm_id.clone()).or_default().push(i);
        }
        Ok(Self {
            observations,
            by_year,
            by_firm,
            range,
            provenance: Provenance::default(),
        })
    }

    /// Builds a panel whose range spans the observed years.
    pub fn with_inferred_range(observations: Vec<Observation>) -> Result<Self, PanelError> {
        let start = observations.iter().map(|o| o.key.year).min();
        let end = observations.iter().map(|o| o.key.year).max();
        match (start, end) {
            (Some(start), Some(end)) => Self::new(observations, YearRange { start, end }),
            _ => Err(PanelError::Empty),
        }
    }

    pub fn range(&self) -> YearRange {
        self.range
    }

    pub fn start_year(&self) -> i32 {
        self.range.start
    }

    pub fn end_year(&self) -> i32 {
        self.range.end
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// All observations ordered by (year, firm_id).
    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn firm_count(&self) -> usize {
        self.by_firm.len()
    }

    pub fn firms(&self) -> impl Iterator<Item = &str> {
        self.by_firm.keys().map(String::as_str)
    }

    pub fn contains_firm(&self, firm_id: &str) -> bool {
        self.by_firm.contains_key(firm_id)
    }

    /// Observations of one year, ordered by firm_id.
    pub fn year(&self, year: i32) -> &[Observation] {
        match self.by_year.get(&year) {
            Some(r) => &self.observations[r.clone()],
            None => &[],
        }
    }

    /// Observations of one firm, ordered by year.
    pub fn firm(&self, firm_id: &str) -> impl Iterator<Item = &Observation> {
        self.by_firm
            .get(firm_id)
            .into_iter()
            .flatten()
            .map(|&i| &self.observations[i])
    }

    pub fn get(&self, firm_id: &str, year: i32) -> Option<&Observation> {
        let idx = self.by_firm.get(firm_id)?;
        idx.binary_search_by_key(&year, |&i| self.observations[i].key.year)
            .ok()
            .map(|p| &self.observations[idx[p]])
    }

    pub fn value(&self, firm_id: &str, year: i32, var: VariableKey) -> Option<f64> {
        self.get(firm_id, year)?.get(var)
    }

    /// Realized `horizon`-year sales growth (percent) from `year` to
    /// `year + horizon`.
    pub fn forward_growth(&self, firm_id: &str, year: i32, horizon: u32) -> Option<f64> {
        let from = self.value(firm_id, year, VariableKey::SALES)?;
        let to = self.value(firm_id, year + horizon as i32, VariableKey::SALES)?;
        growth_pct(from, to)
    }

    fn map_values<F>(mut self, mut f: F) -> Result<Self, PanelError>
    where
        F: FnMut(&Panel, usize) -> Vec<(VariableKey, Option<f64>)>,
    {
        let updates: Vec<_> = (0..self.observations.len()).map(|i| f(&self, i)).collect();
        for (obs, upd) in self.observations.iter_mut().zip(updates) {
            for (k, v) in upd {
                obs.set(k, v);
            }
            obs.validate()?;
        }
        Ok(self)
    }

    /// Scales sales, at and seq by `base_index / cpi[year]`.
    pub fn deflate(self, cpi: &BTreeMap<i32, f64>, base_index: f64) -> Result<Self, PanelError> {
        let missing: Vec<i32> = self
            .by_year
            .keys()
            .copied()
            .filter(|y| !cpi.get(y).is_some_and(|c| *c > 0.0))
            .collect();
        if !missing.is_empty() {
            return Err(PanelError::MissingCpi(missing));
        }
        let mut panel = self.map_values(|p, i| {
            let obs = &p.observations[i];
            let factor = base_index / cpi[&obs.key.year];
            [VariableKey::SALES, VariableKey::AT, VariableKey::SEQ]
                .into_iter()
                .map(|k| (k, obs.get(k).map(|v| v * factor)))
                .collect()
        })?;
        panel.provenance.deflated = true;
        Ok(panel)
    }

    /// Adds `salesGR_tau`: percent growth of sales over `tau` years. Zero base
    /// sales yields a missing value.
    pub fn derive_growth(self, tau: u8) -> Result<Self, PanelError> {
        let key = VariableKey::sales_growth(tau)?;
        let mut panel = self.map_values(|p, i| {
            let obs = &p.observations[i];
            let past = p.value(&obs.key.firm_id, obs.key.year - tau as i32, VariableKey::SALES);
            let now = obs.get(VariableKey::SALES);
            let g = match (past, now) {
                (Some(from), Some(to)) => growth_pct(from, to),
                _ => None,
            };
            vec![(key, g)]
        })?;
        panel.provenance.derived_growth.push(tau);
        Ok(panel)
    }

    /// Adds `opmarDelta_tau`: change in operating margin over `tau` years in
    /// percentage points.
    pub fn derive_opmar_delta(self, tau: u8) -> Result<Self, PanelError> {
        let key = VariableKey::opmar_delta(tau)?;
        let mut panel = self.map_values(|p, i| {
            let obs = &p.observations[i];
            let past = p.value(&obs.key.firm_id, obs.key.year - tau as i32, VariableKey::OPMAR);
            let d = match (past, obs.get(VariableKey::OPMAR)) {
                (Some(a), Some(b)) => Some(b - a),
                _ => None,
            };
            vec![(key, d)]
        })?;
        panel.provenance.derived_opmar_delta.push(tau);
        Ok(panel)
    }

    /// Derives every growth and margin-delta lag 1..=10.
    pub fn derive_all(self) -> Result<Self, PanelError> {
        let mut panel = self;
        for tau in 1..=MAX_LAG {
            panel = panel.derive_growth(tau)?.derive_opmar_delta(tau)?;
        }
        Ok(panel)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), PanelError> {
        let mut w = csv::Writer::from_writer(writer);
        let keys = VariableKey::all_value_keys();
        let mut header = vec!["firm_id".to_string(), "year".to_string(), "sic".to_string()];
        header.extend(keys.iter().map(ToString::to_string));
        w.write_record(&header)?;
        for obs in &self.observations {
            let mut row = vec![
                obs.key.firm_id.clone(),
                obs.key.year.to_string(),
                obs.sic.map(|s| s.to_string()).unwrap_or_default(),
            ];
            row.extend(
                keys.iter()
                    .map(|&k| obs.get(k).map(|v| v.to_string()).unwrap_or_default()),
            );
            w.write_record(&row)?;
        }
        w.flush().map_err(|source| PanelError::Io {
            path: PathBuf::from("<writer>"),
            source,
        })?;
        Ok(())
    }

    pub fn export_csv(&self, path: &Path) -> Result<(), PanelError> {
        let file = std::fs::File::create(path).map_err(|source| PanelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// `(to / from - 1) * 100`, missing when `from` is not positive.
pub fn growth_pct(from: f64, to: f64) -> Option<f64> {
    if from > 0.0 {
        Some((to / from - 1.0) * 100.0)
    } else {
        None
    }
}

/// Column-name mapping used by [`ingest_csv`].
#[derive(Debug, Clone)]
pub struct Schema {
    pub firm_column: String,
    pub year_column: String,
    pub sic_column: Option<String>,
    pub variables: Vec<(String, VariableKey)>,
}

impl Schema {
    /// `firm_id,year,sic,sales,opmar,at,seq,beta,pe,pb` plus the optional
    /// derived columns `salesGR_1..10`, `opmarDelta_1..10`.
    pub fn standard() -> Self {
        Self {
            firm_column: "firm_id".into(),
            year_column: "year".into(),
            sic_column: Some("sic".into()),
            variables: VariableKey::all_value_keys()
                .into_iter()
                .map(|k| (k.to_string(), k))
                .collect(),
        }
    }
}

fn parse_cell<T: FromStr>(raw: &str, row: usize, column: &str) -> Result<Option<T>, PanelError> {
    let s = raw.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<T>().map(Some).map_err(|_| PanelError::Parse {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    })
}

/// Reads observations from CSV. Row indices in errors are 1-based data rows.
pub fn read_observations<R: Read>(reader: R, schema: &Schema) -> Result<Vec<Observation>, PanelError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let firm_idx = find(&schema.firm_column)
        .ok_or_else(|| PanelError::MissingColumn(schema.firm_column.clone()))?;
    let year_idx = find(&schema.year_column)
        .ok_or_else(|| PanelError::MissingColumn(schema.year_column.clone()))?;
    let sic_idx = schema.sic_column.as_deref().and_then(find);
    let var_cols: Vec<(usize, &str, VariableKey)> = schema
        .variables
        .iter()
        .filter_map(|(name, key)| find(name).map(|i| (i, name.as_str(), *key)))
        .collect();

    let mut out = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let firm = record.get(firm_idx).unwrap_or("").to_string();
        if firm.is_empty() {
            return Err(PanelError::Parse {
                row,
                column: schema.firm_column.clone(),
                value: firm,
            });
        }
        let year: i32 = parse_cell(record.get(year_idx).unwrap_or(""), row, &schema.year_column)?
            .ok_or_else(|| PanelError::Parse {
                row,
                column: schema.year_column.clone(),
                value: String::new(),
            })?;
        let sic = match sic_idx {
            Some(i) => parse_cell::<u32>(record.get(i).unwrap_or(""), row, "sic")?,
            None => None,
        };
        let mut obs = Observation::new(FirmYear::new(firm, year), sic);
        for &(i, name, key) in &var_cols {
            let v = parse_cell::<f64>(record.get(i).unwrap_or(""), row, name)?;
            if v.is_some_and(|x| !x.is_finite()) {
                return Err(PanelError::Parse {
                    row,
                    column: name.to_string(),
                    value: record.get(i).unwrap_or("").to_string(),
                });
            }
            obs.set(key, v);
        }
        out.push(obs);
    }
    Ok(out)
}

fn open(path: &Path) -> Result<std::fs::File, PanelError> {
    std::fs::File::open(path).map_err(|source| PanelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Ingests a panel CSV; the year range spans the observed years.
pub fn ingest_csv(path: &Path, schema: &Schema) -> Result<Panel, PanelError> {
    ingest_csv_with_range(path, schema, None)
}

/// Ingests a panel CSV with an explicit year range (rows outside it are an
/// error) or, when `range` is `None`, the observed range.
pub fn ingest_csv_with_range(
    path: &Path,
    schema: &Schema,
    range: Option<YearRange>,
) -> Result<Panel, PanelError> {
    let obs = read_observations(open(path)?, schema)?;
    let mut panel = match range {
        Some(r) => Panel::new(obs, r)?,
        None => Panel::with_inferred_range(obs)?,
    };
    panel.provenance.source = Some(path.to_path_buf());
    Ok(panel)
}

/// Reads `year,index` (or `year,month,index`) and averages all rows of a
/// year into one annual index.
pub fn read_cpi<R: Read>(reader: R) -> Result<BTreeMap<i32, f64>, PanelError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let year_idx = headers
        .iter()
        .position(|h| h == "year")
        .ok_or_else(|| PanelError::MissingColumn("year".into()))?;
    let index_idx = headers
        .iter()
        .position(|h| h == "index")
        .ok_or_else(|| PanelError::MissingColumn("index".into()))?;
    let mut sums: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let year: Option<i32> = parse_cell(record.get(year_idx).unwrap_or(""), r + 1, "year")?;
        let index: Option<f64> = parse_cell(record.get(index_idx).unwrap_or(""), r + 1, "index")?;
        if let (Some(y), Some(i)) = (year, index) {
            let e = sums.entry(y).or_insert((0.0, 0));
            e.0 += i;
            e.1 += 1;
        }
    }
    Ok(sums.into_iter().map(|(y, (s, n))| (y, s / n as f64)).collect())
}

pub fn read_cpi_csv(path: &Path) -> Result<BTreeMap<i32, f64>, PanelError> {
    read_cpi(open(path)?)
}

/// Compound annual growth rate in percent.
pub fn cagr(start_value: f64, end_value: f64, years: u32) -> Result<f64, PanelError> {
    if !(start_value > 0.0) {
        return Err(PanelError::Domain(format!(
            "cagr start value must be positive, got {start_value}"
        )));
    }
    if years == 0 {
        return Err(PanelError::Domain("cagr needs at least one year".into()));
    }
    if end_value < 0.0 {
        return Err(PanelError::Domain(format!(
            "cagr end value must be non-negative, got {end_value}"
        )));
    }
    if end_value == 0.0 {
        return Ok(-100.0);
    }
    Ok(((end_value / start_value).powf(1.0 / years as f64) - 1.0) * 100.0)
}

/// Annualizes a cumulative growth rate (percent) over `years`.
pub fn annualize_growth(growth_pct: f64, years: u32) -> Result<f64, PanelError> {
    cagr(100.0, 100.0 + growth_pct, years)
}

fn trimmed_slice(sample: &[f64], alpha: f64) -> Result<Vec<f64>, PanelError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(PanelError::Domain(format!("trim level {alpha} outside (0,1)")));
    }
    if sample.iter().any(|v| v.is_nan()) {
        return Err(PanelError::Domain("NaN in trimmed sample".into()));
    }
    let n = sample.len();
    let cut = (alpha * n as f64).floor() as usize;
    if n == 0 || 2 * cut >= n {
        return Err(PanelError::Domain(format!(
            "nothing left after trimming {cut} of {n} from each tail"
        )));
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(cmp_f64);
    Ok(sorted[cut..n - cut].to_vec())
}

/// Mean after dropping `floor(alpha * n)` observations from each tail.
pub fn trimmed_mean(sample: &[f64], alpha: f64) -> Result<f64, PanelError> {
    let kept = trimmed_slice(sample, alpha)?;
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Standard deviation (denominator `n - 1`) of the trimmed sample; 0 when a
/// single element remains.
pub fn trimmed_std(sample: &[f64], alpha: f64) -> Result<f64, PanelError> {
    let kept = trimmed_slice(sample, alpha)?;
    if kept.len() < 2 {
        return Ok(0.0);
    }
    let mean = kept.iter().sum::<f64>() / kept.len() as f64;
    let ss: f64 = kept.iter().map(|v| (v - mean).powi(2)).sum();
    Ok((ss / (kept.len() - 1) as f64).sqrt())
}
