//! Run configuration: paths to the grid, series and parameter files plus
//! evaluation mode and numeric options. Paths resolve relative to the
//! config file's directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use lempart::costs::DeviationMode;
use lempart::grid::Grid;
use lempart::params::CostParams;
use lempart::timeseries::{apply_forecast_noise, NoiseSpec, ProsumptionSet};

use crate::formats;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub grid: String,
    /// Forecast series; absent means perfect forecasts unless noise is set.
    #[serde(default)]
    pub forecast: Option<String>,
    pub realized: String,
    pub params: String,
    /// `externalities` or `no_externalities`.
    pub mode: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_cap")]
    pub cap: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_seed() -> u64 {
    42
}
fn default_cap() -> usize {
    10
}
fn default_tol() -> f64 {
    1e-6
}

impl RunConfig {
    /// Standard bundle layout used by the emitted fixtures.
    pub fn bundle(mode: &str, seed: u64) -> Self {
        Self {
            grid: "grid.json".into(),
            forecast: Some("forecast.csv".into()),
            realized: "realized.csv".into(),
            params: "params.json".into(),
            mode: mode.into(),
            seed,
            cap: 10,
            tol: 1e-6,
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub mode: Option<String>,
    /// Regenerate forecasts from realizations with this noise level.
    pub sigma: Option<f64>,
    pub seed: Option<u64>,
    pub cap: Option<usize>,
    pub tol: Option<f64>,
}

/// A fully loaded and validated case.
pub struct Case {
    pub grid: Grid,
    pub set: ProsumptionSet,
    pub params: CostParams,
    pub noise: Option<NoiseSpec>,
    pub mode: DeviationMode,
    pub seed: u64,
    pub cap: usize,
    pub tol: f64,
}

pub fn parse_mode(s: &str) -> Result<DeviationMode> {
    match s {
        "externalities" => Ok(DeviationMode::Externalities),
        "no_externalities" | "no-externalities" => Ok(DeviationMode::NoExternalities),
        other => bail!("unknown mode '{other}' (expected 'externalities' or 'no_externalities')"),
    }
}

pub fn load_case(config_path: &Path, overrides: &Overrides) -> Result<Case> {
    let text = std::fs::read_to_string(config_path)
        .with_context(|| format!("reading config {}", config_path.display()))?;
    let mut config: RunConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", config_path.display()))?;
    if let Some(m) = &overrides.mode {
        config.mode = m.clone();
    }
    if let Some(s) = overrides.seed {
        config.seed = s;
    }
    if let Some(c) = overrides.cap {
        config.cap = c;
    }
    if let Some(t) = overrides.tol {
        config.tol = t;
    }
    let base = config_path.parent().unwrap_or(Path::new("."));
    let resolve = |rel: &str| -> PathBuf { base.join(rel) };

    let grid = formats::load_grid(&resolve(&config.grid))?;
    let params_file = formats::load_params(&resolve(&config.params))?;
    let realized = formats::load_series(&resolve(&config.realized))?;

    let prosumer_ids: Vec<_> = grid.prosumers().iter().map(|&p| grid.node_id(p)).collect();
    params_file.costs.validate(&prosumer_ids)?;

    let base_set = ProsumptionSet::perfect(realized)?;
    let set = if let Some(sigma) = overrides.sigma {
        let spec = NoiseSpec {
            sigma,
            scale_bound: 0.0,
            shift_bound: 0,
            seed: config.seed,
        };
        apply_forecast_noise(&base_set, &spec)?
    } else if let Some(forecast_rel) = &config.forecast {
        let forecast = formats::load_series(&resolve(forecast_rel))?;
        ProsumptionSet::new(forecast, base_set.realizations().clone())?
    } else if let Some(noise) = &params_file.noise {
        apply_forecast_noise(&base_set, noise)?
    } else {
        base_set
    };

    Ok(Case {
        grid,
        set,
        params: params_file.costs,
        noise: params_file.noise,
        mode: parse_mode(&config.mode)?,
        seed: config.seed,
        cap: config.cap,
        tol: config.tol,
    })
}
