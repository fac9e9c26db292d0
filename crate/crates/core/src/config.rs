//! Experiment configuration: a flat `key = value` file plus overrides.
//!
//! ```text
//! # comments start with '#'
//! scenario = bird-migration
//! grid_size = 15
//! sensors = 16          # count (random placement) or "row,col; row,col; ..."
//! M = 10000
//! T = 30
//! K = 3
//! methods = baseline, naive, swsbp1, swsbp2
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CgmError, Result};
use crate::sbp::{SbpOptions, DEFAULT_MAX_SWEEPS, DEFAULT_TOLERANCE};
use crate::window::WindowVariant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    RandomHmm,
    BirdMigration,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensorLayout {
    /// This many sensors at seeded uniform-random cells.
    Random(usize),
    Fixed(Vec<(usize, usize)>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Naive,
    Swsbp1,
    Swsbp2,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Naive, Method::Swsbp1, Method::Swsbp2];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Naive => "naive",
            Method::Swsbp1 => "swsbp1",
            Method::Swsbp2 => "swsbp2",
        }
    }

    /// The sliding-window variant, or `None` for the full-chain baseline.
    pub fn variant(self) -> Option<WindowVariant> {
        match self {
            Method::Baseline => None,
            Method::Naive => Some(WindowVariant::Naive),
            Method::Swsbp1 => Some(WindowVariant::ConstrainedMarginal),
            Method::Swsbp2 => Some(WindowVariant::PotentialUpdate),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CgmError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CgmError::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = CgmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(CgmError::Config(format!("unknown report format `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    /// State (and symbol) count of the random-HMM scenario.
    pub d: usize,
    pub grid_size: usize,
    pub sensors: SensorLayout,
    pub sensor_seed: u64,
    pub lambda: f64,
    pub wind_deg: f64,
    #[serde(rename = "M")]
    pub population: u64,
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "K")]
    pub window: usize,
    pub methods: Vec<Method>,
    pub trials: usize,
    pub seed: u64,
    #[serde(rename = "tol")]
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub out: Option<PathBuf>,
    pub format: ReportFormat,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::RandomHmm,
            d: 50,
            grid_size: 15,
            sensors: SensorLayout::Random(16),
            sensor_seed: 0,
            lambda: 1.0,
            wind_deg: 45.0,
            population: 10_000,
            horizon: 30,
            window: 5,
            methods: Method::ALL.to_vec(),
            trials: 10,
            seed: 0,
            tolerance: DEFAULT_TOLERANCE,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            out: None,
            format: ReportFormat::Csv,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| CgmError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_sensors(value: &str) -> Result<SensorLayout> {
    if !value.contains(',') {
        return Ok(SensorLayout::Random(parse_num("sensors", value)?));
    }
    let mut cells = Vec::new();
    for pair in value.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (r, c) = pair
            .split_once(',')
            .ok_or_else(|| CgmError::Config(format!("`sensors`: expected `row,col`, got `{pair}`")))?;
        cells.push((parse_num("sensors", r.trim())?, parse_num("sensors", c.trim())?));
    }
    Ok(SensorLayout::Fixed(cells))
}

fn parse_methods(value: &str) -> Result<Vec<Method>> {
    let mut methods = value
        .split(',')
        .map(str::trim)
        .filter(|m| !m.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<Method>>>()?;
    methods.sort();
    methods.dedup();
    Ok(methods)
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CgmError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(CgmError::Config(format!("line {}: duplicate key `{key}`", n + 1)));
            }
            seen.push(key);
            config.set(key, value.trim())?;
        }
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| CgmError::Io { path: path.to_owned(), source })?;
        Self::parse(&text)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "scenario" => {
                self.scenario = match value {
                    "random-hmm" => ScenarioKind::RandomHmm,
                    "bird-migration" => ScenarioKind::BirdMigration,
                    _ => return Err(CgmError::Config(format!("unknown scenario `{value}`"))),
                }
            }
            "d" => self.d = parse_num(key, value)?,
            "grid_size" => self.grid_size = parse_num(key, value)?,
            "sensors" => self.sensors = parse_sensors(value)?,
            "sensor_seed" => self.sensor_seed = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "wind_deg" => self.wind_deg = parse_num(key, value)?,
            "M" => self.population = parse_num(key, value)?,
            "T" => self.horizon = parse_num(key, value)?,
            "K" => self.window = parse_num(key, value)?,
            "methods" => self.methods = parse_methods(value)?,
            "trials" => self.trials = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "tol" => self.tolerance = parse_num(key, value)?,
            "max_sweeps" => self.max_sweeps = parse_num(key, value)?,
            "out" => self.out = (!value.is_empty()).then(|| PathBuf::from(value)),
            "format" => self.format = value.parse()?,
            _ => return Err(CgmError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` override strings in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CgmError::Config(format!("override `{o}` is not `key=value`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d as u64),
            ("M", self.population),
            ("T", self.horizon as u64),
            ("K", self.window as u64),
            ("trials", self.trials as u64),
            ("max_sweeps", self.max_sweeps as u64),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CgmError::Config(format!("`{k}` must be positive")));
        }
        if self.window > self.horizon {
            return Err(CgmError::Config(format!("K = {} exceeds T = {}", self.window, self.horizon)));
        }
        if self.methods.is_empty() {
            return Err(CgmError::Config("no methods selected".into()));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(CgmError::Config("`tol` must be positive".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) || !self.wind_deg.is_finite() {
            return Err(CgmError::Config("`lambda` must be positive and `wind_deg` finite".into()));
        }
        if self.scenario == ScenarioKind::BirdMigration {
            if self.grid_size < 2 {
                return Err(CgmError::Config("`grid_size` must be at least 2".into()));
            }
            match &self.sensors {
                SensorLayout::Random(0) => return Err(CgmError::Config("need at least one sensor".into())),
                SensorLayout::Fixed(s) if s.is_empty() => {
                    return Err(CgmError::Config("need at least one sensor".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn sbp_options(&self) -> SbpOptions {
        SbpOptions { tolerance: self.tolerance, max_sweeps: self.max_sweeps, observation_floor: None }
    }
}
