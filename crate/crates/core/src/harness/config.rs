use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::SigmaPointParams;
use crate::error::{Error, Result};
use crate::evaluation::nonfinite::format_value;
use crate::scenarios::{scenario_by_name, ScenarioOverrides, ScenarioSpec};

pub const DEFAULT_REF_PARTICLES: usize = 100_000;

/// A filter and its parameters, written `name[:param]` on the command line.
#[derive(Clone, Debug, PartialEq)]
pub enum FilterSpec {
    Pukf { threshold: f64 },
    Ekf,
    /// Second-order EKF with analytic derivatives.
    Ekf2,
    Ukf(SigmaPointParams),
    Iekf { iterations: usize },
    Ruf { steps: usize },
    Pf { particles: usize },
}

/// Templates accepted by [`FilterSpec::from_str`] with a short description.
pub const FILTER_TEMPLATES: [(&str, &str); 7] = [
    ("pukf:<threshold>", "partitioned update, threshold -inf, 0.1, 1, inf or any real"),
    ("ekf", "extended Kalman filter"),
    ("ekf2", "second-order EKF with analytic Hessians"),
    ("ukf[:alpha:kappa:beta]", "unscented Kalman filter, default 0.001:0:2"),
    ("iekf:<iterations>", "iterated EKF"),
    ("ruf:<steps>", "recursive update filter"),
    ("pf:<particles>", "bootstrap particle filter"),
];

/// Filters run when none are configured explicitly.
pub const DEFAULT_FILTERS: [&str; 11] = [
    "pukf:-inf", "pukf:0.1", "pukf:1", "pukf:inf", "ekf", "ekf2", "ukf", "iekf:10", "ruf:3", "ruf:10", "ruf:20",
];

impl FilterSpec {
    /// Family name used in reports.
    pub fn name(&self) -> &'static str {
        match self {
            Self::Pukf { .. } => "pukf",
            Self::Ekf => "ekf",
            Self::Ekf2 => "ekf2",
            Self::Ukf(_) => "ukf",
            Self::Iekf { .. } => "iekf",
            Self::Ruf { .. } => "ruf",
            Self::Pf { .. } => "pf",
        }
    }

    /// Parameter string used in reports, empty for parameterless filters.
    pub fn param(&self) -> String {
        match self {
            Self::Pukf { threshold } => format_value(*threshold),
            Self::Ekf | Self::Ekf2 => String::new(),
            Self::Ukf(p) if *p == SigmaPointParams::default() => String::new(),
            Self::Ukf(p) => format!("{}:{}:{}", p.alpha, p.kappa, p.beta),
            Self::Iekf { iterations } => iterations.to_string(),
            Self::Ruf { steps } => steps.to_string(),
            Self::Pf { particles } => particles.to_string(),
        }
    }
}

impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let param = self.param();
        if param.is_empty() {
            f.write_str(self.name())
        } else {
            write!(f, "{}:{param}", self.name())
        }
    }
}

fn parse_count(text: Option<&str>, what: &str) -> Result<usize> {
    let text = text.ok_or_else(|| Error::Config(format!("{what} missing")))?;
    match text.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::Config(format!("{what} must be a positive integer, got '{text}'"))),
    }
}

fn parse_real(text: &str) -> Result<f64> {
    text.parse::<f64>()
        .map_err(|_| Error::Config(format!("'{text}' is not a number")))
}

impl FromStr for FilterSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, param) = match s.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s, None),
        };
        let no_param = |spec: FilterSpec| match param {
            None => Ok(spec),
            Some(_) => Err(Error::Config(format!("filter '{name}' takes no parameter"))),
        };
        match name {
            "pukf" => {
                let threshold = parse_real(param.ok_or_else(|| Error::Config("pukf needs a threshold".into()))?)?;
                if threshold.is_nan() {
                    return Err(Error::Config("pukf threshold is NaN".into()));
                }
                Ok(Self::Pukf { threshold })
            }
            "ekf" => no_param(Self::Ekf),
            "ekf2" => no_param(Self::Ekf2),
            "ukf" => match param {
                None => Ok(Self::Ukf(SigmaPointParams::default())),
                Some(p) => {
                    let v: Vec<f64> = p.split(':').map(parse_real).collect::<Result<_>>()?;
                    let [alpha, kappa, beta] = v[..] else {
                        return Err(Error::Config("ukf parameters are alpha:kappa:beta".into()));
                    };
                    Ok(Self::Ukf(SigmaPointParams { alpha, kappa, beta }))
                }
            },
            "iekf" => Ok(Self::Iekf {
                iterations: parse_count(param, "iekf iteration count")?,
            }),
            "ruf" => Ok(Self::Ruf {
                steps: parse_count(param, "ruf step count")?,
            }),
            "pf" => Ok(Self::Pf {
                particles: parse_count(param, "pf particle count")?,
            }),
            other => Err(Error::Config(format!("unknown filter '{other}'"))),
        }
    }
}

/// Output file format.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

fn default_ref_particles() -> usize {
    DEFAULT_REF_PARTICLES
}

fn default_filters() -> Vec<String> {
    DEFAULT_FILTERS.iter().map(|s| s.to_string()).collect()
}

/// Campaign settings as read from a JSON file. Flags on the command line
/// override individual fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub scenario: String,
    #[serde(default)]
    pub overrides: ScenarioOverrides,
    #[serde(default = "default_filters")]
    pub filters: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    pub seed: u64,
    /// Particles of the reference filter used for KL divergences; 0 skips
    /// the reference.
    #[serde(default = "default_ref_particles")]
    pub ref_particles: usize,
    /// Worker threads, 0 for one per core.
    #[serde(default)]
    pub jobs: usize,
    /// Report median wall-clock time per update.
    #[serde(default)]
    pub timing: bool,
    /// JSON-lines file of completed runs used to resume a campaign.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub format: OutputFormat,
}

impl CampaignConfig {
    pub fn new(scenario: &str, filters: &[&str], seed: u64) -> Self {
        Self {
            scenario: scenario.into(),
            overrides: ScenarioOverrides::default(),
            filters: filters.iter().map(|s| s.to_string()).collect(),
            runs: None,
            steps: None,
            seed,
            ref_particles: DEFAULT_REF_PARTICLES,
            jobs: 0,
            timing: false,
            checkpoint: None,
            out: None,
            format: OutputFormat::Csv,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Resolves the scenario with run and step counts applied.
    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        let mut overrides = self.overrides.clone();
        overrides.runs = self.runs.or(overrides.runs);
        overrides.steps = self.steps.or(overrides.steps);
        scenario_by_name(&self.scenario, &overrides)
    }

    pub fn filter_specs(&self) -> Result<Vec<FilterSpec>> {
        if self.filters.is_empty() {
            return Err(Error::Config("no filters configured".into()));
        }
        let specs: Vec<FilterSpec> = self.filters.iter().map(|f| f.parse()).collect::<Result<_>>()?;
        for (i, a) in specs.iter().enumerate() {
            if specs[..i].iter().any(|b| b.to_string() == a.to_string()) {
                return Err(Error::Config(format!("filter '{a}' listed twice")));
            }
        }
        Ok(specs)
    }

    /// Checks everything that can be checked before running.
    pub fn validate(&self) -> Result<(ScenarioSpec, Vec<FilterSpec>)> {
        let filters = self.filter_specs()?;
        let spec = self.scenario_spec()?;
        Ok((spec, filters))
    }

    /// SHA-256 over the settings that determine the results.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Identity<'a> {
            scenario: &'a str,
            overrides: &'a ScenarioOverrides,
            filters: Vec<String>,
            runs: Option<usize>,
            steps: Option<usize>,
            seed: u64,
            ref_particles: usize,
            timing: bool,
        }
        let filters = match self.filter_specs() {
            Ok(specs) => specs.iter().map(|f| f.to_string()).collect(),
            Err(_) => self.filters.clone(),
        };
        let identity = Identity {
            scenario: &self.scenario,
            overrides: &self.overrides,
            filters,
            runs: self.runs,
            steps: self.steps,
            seed: self.seed,
            ref_particles: self.ref_particles,
            timing: self.timing,
        };
        let bytes = serde_json::to_vec(&identity).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
