//! Run configuration for the `run`, `inspect` and `match` commands.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::{GainModel, TuneConfig, Variant};
use crate::motion::FitConfig;
use crate::recognize::{FlowParams, Gains, Mode, DEFAULT_RATIOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchConfig {
    /// Frames observed before the rollout whose kernels are scored.
    pub observed: usize,
    pub horizon: usize,
    pub size: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            observed: 4,
            horizon: 9,
            size: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportToggles {
    pub svg: bool,
    pub gain_traces: bool,
    pub kernel_match: bool,
}

impl Default for ReportToggles {
    fn default() -> Self {
        ReportToggles {
            svg: false,
            gain_traces: true,
            kernel_match: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub fit: FitConfig,
    pub modes: Vec<Mode>,
    pub ratios: Vec<f64>,
    /// Gain model files; zero parameters when absent.
    pub kf_model: Option<PathBuf>,
    pub kf2_model: Option<PathBuf>,
    /// Fine-tune the gain models on the training split before evaluating.
    pub tune: Option<TuneConfig>,
    /// Observation ratio of the reported gain traces.
    pub trace_ratio: f64,
    pub flow: FlowParams,
    #[serde(rename = "match")]
    pub matching: MatchConfig,
    pub report: ReportToggles,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            out: None,
            fit: FitConfig::default(),
            modes: vec![Mode::Baseline, Mode::Rollout, Mode::Kf2],
            ratios: DEFAULT_RATIOS.to_vec(),
            kf_model: None,
            kf2_model: None,
            tune: None,
            trace_ratio: 1.0,
            flow: FlowParams::default(),
            matching: MatchConfig::default(),
            report: ReportToggles::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        if self.modes.is_empty() {
            return Err(Error::Config("no modes".into()));
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
            return Err(Error::Config("ratios must be nonempty and in (0, 1]".into()));
        }
        if !(self.trace_ratio > 0.0 && self.trace_ratio <= 1.0) {
            return Err(Error::Config(format!("trace_ratio {}", self.trace_ratio)));
        }
        if let Some(t) = &self.tune {
            t.validate()?;
        }
        let f = &self.flow;
        if f.radius == 0 || f.patch % 2 == 0 || !(f.sigma >= 0.0) || !(f.support_tau >= 0.0) {
            return Err(Error::Config("flow radius >= 1, odd patch, sigma and support_tau >= 0".into()));
        }
        let m = &self.matching;
        if !self.fit.sizes.contains(&m.size) {
            return Err(Error::Config(format!("match size {} is not a fitted size", m.size)));
        }
        if m.horizon == 0 {
            return Err(Error::Config("match horizon must be positive".into()));
        }
        Ok(())
    }

    /// Gain models named by the config, relative paths taken from `base`.
    pub fn gains(&self, base: &Path) -> Result<Gains> {
        let load = |p: &Option<PathBuf>, variant: Variant| -> Result<GainModel> {
            match p {
                None => Ok(GainModel::zeros(variant)),
                Some(p) => {
                    let m = GainModel::from_json(&fs::read_to_string(base.join(p))?)?;
                    if m.variant != variant {
                        return Err(Error::Config(format!("{} holds a {:?} model", p.display(), m.variant)));
                    }
                    Ok(m)
                }
            }
        };
        Ok(Gains {
            kf: load(&self.kf_model, Variant::KF)?,
            kf2: load(&self.kf2_model, Variant::KF2)?,
        })
    }
}
