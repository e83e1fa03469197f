//! Synthetic firm panels with a known conditional outcome law.
//!
//! Each firm carries latent covariates `x_v` (stationary AR(1) around a
//! year-level common factor). One-year log sales growth is normal with
//! location `intercept + Σ b_v x_v` and scale `exp(log_scale + Σ d_v x_v)`, so
//! percentage growth `100 (exp(L) - 1)` is a shifted log-normal on
//! (-100, ∞). The sidecar records the true location and scale of the
//! cumulative log growth over each horizon.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::panel_store::{Base, FirmYear, Observation, Panel, PanelError, VariableKey, YearRange};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("no sidecar entry for {firm_id}/{year} at horizon {horizon}")]
    MissingEntry { firm_id: String, year: i32, horizon: u32 },
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// One latent covariate process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessSpec {
    pub variable: VariableKey,
    #[serde(default)]
    pub mean: f64,
    /// AR(1) coefficient of the firm-specific part.
    #[serde(default = "default_persistence")]
    pub persistence: f64,
    /// Stationary standard deviation of the firm-specific part.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Stationary standard deviation of the year-level common factor.
    #[serde(default)]
    pub drift: f64,
    #[serde(default = "default_persistence")]
    pub drift_persistence: f64,
    /// Report `exp(x)` instead of `x`.
    #[serde(default)]
    pub skew: bool,
    /// Location loading of the outcome law.
    #[serde(default)]
    pub loading: f64,
    /// Log-scale loading of the outcome law.
    #[serde(default)]
    pub scale_loading: f64,
}

fn default_persistence() -> f64 {
    0.7
}

fn default_noise() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub firms: usize,
    pub start_year: i32,
    pub end_year: i32,
    #[serde(default)]
    pub seed: u64,
    pub processes: Vec<ProcessSpec>,
    /// Location intercept of one-year log growth.
    #[serde(default)]
    pub intercept: f64,
    /// Log of the baseline scale of one-year log growth; `None` gives a
    /// degenerate zero-scale law.
    #[serde(default = "default_log_scale")]
    pub log_scale: Option<f64>,
    /// Probability that a covariate value is reported missing.
    #[serde(default)]
    pub missing_rate: f64,
    /// Per-year probability that a firm leaves the panel.
    #[serde(default)]
    pub exit_hazard: f64,
    #[serde(default = "default_sic_codes")]
    pub sic_codes: Vec<u32>,
    /// Horizons recorded in the sidecar.
    #[serde(default = "default_horizons")]
    pub horizons: Vec<u32>,
}

fn default_log_scale() -> Option<f64> {
    Some(0.2f64.ln())
}

fn default_sic_codes() -> Vec<u32> {
    vec![2834, 2836, 2810, 3571, 3572, 3674, 4911, 5411, 7372, 7373]
}

fn default_horizons() -> Vec<u32> {
    vec![1]
}

impl GeneratorSpec {
    /// Panel whose outcome location depends on operating margin only; the
    /// margin drifts cross-sectionally over the years. Other contemporaneous
    /// covariates are pure noise.
    pub fn single_signal(firms: usize, start_year: i32, end_year: i32, seed: u64) -> Self {
        let noise = |variable| ProcessSpec {
            variable,
            mean: 0.0,
            persistence: 0.7,
            noise: 1.0,
            drift: 0.0,
            drift_persistence: 0.7,
            skew: false,
            loading: 0.0,
            scale_loading: 0.0,
        };
        let mut processes = vec![ProcessSpec {
            mean: 0.1,
            noise: 0.1,
            drift: 0.1,
            drift_persistence: 0.9,
            loading: 1.0,
            ..noise(VariableKey::OPMAR)
        }];
        processes.extend(
            [VariableKey::AT, VariableKey::SEQ, VariableKey::BETA, VariableKey::PE, VariableKey::PB]
                .into_iter()
                .map(noise),
        );
        Self {
            firms,
            start_year,
            end_year,
            seed,
            processes,
            intercept: 0.05,
            log_scale: Some(0.15f64.ln()),
            missing_rate: 0.0,
            exit_hazard: 0.0,
            sic_codes: default_sic_codes(),
            horizons: default_horizons(),
        }
    }

    /// Same covariates, outcome law independent of all of them.
    pub fn independent(firms: usize, start_year: i32, end_year: i32, seed: u64) -> Self {
        let mut spec = Self::single_signal(firms, start_year, end_year, seed);
        for p in &mut spec.processes {
            p.loading = 0.0;
            p.scale_loading = 0.0;
        }
        spec
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.firms == 0 {
            return bad("firms must be positive");
        }
        if self.end_year < self.start_year {
            return bad("end_year before start_year");
        }
        if !(0.0..1.0).contains(&self.missing_rate) || !(0.0..1.0).contains(&self.exit_hazard) {
            return bad("missing_rate and exit_hazard must lie in [0, 1)");
        }
        if self.sic_codes.is_empty() || self.sic_codes.iter().any(|&s| s > 9999) {
            return bad("sic_codes must be non-empty four-digit codes");
        }
        if self.horizons.contains(&0) {
            return bad("horizons must be positive");
        }
        for p in &self.processes {
            if p.variable.lag() != 0 || matches!(p.variable.base(), Base::Sales | Base::Sic) {
                return bad(&format!("{} cannot be a generated covariate", p.variable));
            }
            if !(p.persistence.abs() < 1.0 && p.drift_persistence.abs() < 1.0) {
                return bad("persistence must lie in (-1, 1)");
            }
            if p.noise < 0.0 || p.drift < 0.0 {
                return bad("noise and drift must be non-negative");
            }
        }
        let mut vars: Vec<_> = self.processes.iter().map(|p| p.variable).collect();
        vars.sort();
        vars.dedup();
        if vars.len() != self.processes.len() {
            return bad("duplicate covariate");
        }
        Ok(())
    }
}

/// True law parameters of cumulative log growth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawParams {
    pub loc: f64,
    pub scale: f64,
}

impl LawParams {
    /// CDF of percentage growth `100 (exp(L) - 1)` with `L ~ N(loc, scale²)`.
    pub fn cdf(&self, growth_pct: f64) -> f64 {
        if growth_pct <= -100.0 {
            return 0.0;
        }
        let z = (1.0 + growth_pct / 100.0).ln();
        if self.scale == 0.0 {
            let tol = 1e-12 * self.loc.abs().max(1.0);
            return if z >= self.loc - tol { 1.0 } else { 0.0 };
        }
        0.5 * erfc(-(z - self.loc) / (self.scale * std::f64::consts::SQRT_2))
    }

    /// Median growth in percent.
    pub fn median(&self) -> f64 {
        100.0 * (self.loc.exp() - 1.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sidecar {
    entries: BTreeMap<(String, i32, u32), LawParams>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarRow {
    firm_id: String,
    year: i32,
    horizon: u32,
    loc: f64,
    scale: f64,
}

impl Sidecar {
    pub fn insert(&mut self, firm_id: &str, year: i32, horizon: u32, law: LawParams) {
        self.entries.insert((firm_id.to_string(), year, horizon), law);
    }

    pub fn get(&self, firm_id: &str, year: i32, horizon: u32) -> Option<LawParams> {
        self.entries.get(&(firm_id.to_string(), year, horizon)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SynthError> {
        let mut w = csv::Writer::from_writer(writer);
        for ((firm_id, year, horizon), law) in &self.entries {
            w.serialize(SidecarRow {
                firm_id: firm_id.clone(),
                year: *year,
                horizon: *horizon,
                loc: law.loc,
                scale: law.scale,
            })?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, SynthError> {
        let mut sidecar = Sidecar::default();
        for row in csv::Reader::from_reader(reader).deserialize() {
            let r: SidecarRow = row?;
            sidecar.insert(&r.firm_id, r.year, r.horizon, LawParams { loc: r.loc, scale: r.scale });
        }
        Ok(sidecar)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedPanel {
    pub panel: Panel,
    pub sidecar: Sidecar,
}

/// True conditional CDF at the realized growth.
pub fn oracle_pit(sidecar: &Sidecar, case: &FirmYear, horizon: u32, realized: f64) -> Result<f64, SynthError> {
    sidecar
        .get(&case.firm_id, case.year, horizon)
        .map(|law| law.cdf(realized))
        .ok_or_else(|| SynthError::MissingEntry {
            firm_id: case.firm_id.clone(),
            year: case.year,
            horizon,
        })
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Draws a panel. Seeded runs are bit-reproducible.
pub fn generate(spec: &GeneratorSpec) -> Result<GeneratedPanel, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let years = (spec.end_year - spec.start_year + 1) as usize;
    let k = spec.processes.len();

    // year-level common factors
    let common: Vec<Vec<f64>> = spec
        .processes
        .iter()
        .map(|p| {
            let innov = (1.0 - p.drift_persistence * p.drift_persistence).sqrt();
            let mut c = p.drift * normal(&mut rng);
            (0..years)
                .map(|y| {
                    if y > 0 {
                        c = p.drift_persistence * c + p.drift * innov * normal(&mut rng);
                    }
                    c
                })
                .collect()
        })
        .collect();

    let width = spec.firms.to_string().len();
    let mut observations = Vec::with_capacity(spec.firms * years);
    let mut sidecar = Sidecar::default();
    for f in 0..spec.firms {
        let firm_id = format!("S{f:0width$}");
        let sic = spec.sic_codes[rng.random_range(0..spec.sic_codes.len())];
        let mut sales = 100.0 * (0.8 * normal(&mut rng)).exp();
        let mut idio: Vec<f64> = spec.processes.iter().map(|p| p.noise * normal(&mut rng)).collect();
        // one-year law per year, for sidecar accumulation
        let mut laws: Vec<LawParams> = Vec::with_capacity(years);
        for y in 0..years {
            if y > 0 {
                for (a, p) in idio.iter_mut().zip(&spec.processes) {
                    let innov = (1.0 - p.persistence * p.persistence).sqrt();
                    *a = p.persistence * *a + p.noise * innov * normal(&mut rng);
                }
            }
            let year = spec.start_year + y as i32;
            let mut obs = Observation::new(FirmYear::new(firm_id.clone(), year), Some(sic)).with(VariableKey::SALES, sales);
            let mut loc = spec.intercept;
            let mut log_scale = spec.log_scale.unwrap_or(0.0);
            for (j, p) in spec.processes.iter().enumerate() {
                let latent = p.mean + common[j][y] + idio[j];
                let value = if p.skew { latent.exp() } else { latent };
                loc += p.loading * value;
                log_scale += p.scale_loading * value;
                let missing = spec.missing_rate > 0.0 && rng.random::<f64>() < spec.missing_rate;
                if !missing {
                    obs.set(p.variable, Some(value));
                }
            }
            let scale = if spec.log_scale.is_some() { log_scale.exp() } else { 0.0 };
            observations.push(obs);
            laws.push(LawParams { loc, scale });
            let log_growth = loc + scale * normal(&mut rng);
            sales *= log_growth.exp();
            let exits = spec.exit_hazard > 0.0 && rng.random::<f64>() < spec.exit_hazard;
            if exits {
                break;
            }
        }
        debug_assert!(k == 0 || !laws.is_empty());
        let present = laws.len();
        for &h in &spec.horizons {
            let h = h as usize;
            for start in 0..present.saturating_sub(h) {
                let window = &laws[start..start + h];
                let loc = window.iter().map(|l| l.loc).sum();
                let scale = window.iter().map(|l| l.scale * l.scale).sum::<f64>().sqrt();
                sidecar.insert(&firm_id, spec.start_year + start as i32, h as u32, LawParams { loc, scale });
            }
        }
    }
    let panel = Panel::new(
        observations,
        YearRange {
            start: spec.start_year,
            end: spec.end_year,
        },
    )?;
    Ok(GeneratedPanel { panel, sidecar })
}
