//! Experiment configuration: a flat TOML file, every key optional, unknown
//! keys rejected. Defaults are the standard simulation settings.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::StrategyKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Case {
    /// Smooth loss, power-law learning rate.
    #[serde(rename = "I")]
    Smooth,
    /// Strongly convex loss, constant learning rate.
    #[serde(rename = "II")]
    StronglyConvex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Ridge,
    Nonconvex,
    /// Classifier over IDX image/label files.
    Idx,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Ridge => "ridge",
            TaskKind::Nonconvex => "nonconvex",
            TaskKind::Idx => "idx",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    Static,
    Redraw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoxLimit {
    Uniform(f64),
    PerDevice(Vec<f64>),
}

impl BoxLimit {
    pub fn expand(&self, devices: usize) -> Result<Vec<f64>> {
        let v = match self {
            BoxLimit::Uniform(b) => vec![*b; devices],
            BoxLimit::PerDevice(v) => {
                if v.len() != devices {
                    return Err(Error::Config(format!(
                        "b_max: {} entries for {devices} devices",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        if v.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return Err(Error::Config("b_max: entries must be positive and finite".into()));
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub case: Case,
    pub task: TaskKind,
    pub devices: usize,
    pub per_device: usize,
    /// Ridge feature dimension.
    pub dim: usize,
    pub noise_std: f64,
    pub ridge_coeff: f64,
    pub dim_in: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Label skew of the device partition, 0 (i.i.d.) to 1 (sorted).
    pub skew: f64,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    pub channel_mean: f64,
    pub sigma2: f64,
    pub channel_mode: ChannelMode,
    pub b_max: BoxLimit,
    pub theta_th: f64,
    pub strategies: Vec<StrategyKind>,
    pub p: f64,
    pub eta: f64,
    pub rounds: usize,
    /// Number of run seeds, `0..seeds`.
    pub seeds: usize,
    /// Seeds the task data and the static channel.
    pub master_seed: u64,
    pub target_s: Option<f64>,
    pub target_eps: Option<f64>,
    /// Overrides the default `F(w^1)` estimate of the expected loss drop.
    pub delta_f: Option<f64>,
    pub batch_size: Option<usize>,
    pub tol_r: f64,
    pub smoothness_pairs: usize,
    pub output_dir: Option<PathBuf>,
}

pub const DEFAULT_EPS: f64 = 0.1;

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            case: Case::Smooth,
            task: TaskKind::Ridge,
            devices: 20,
            per_device: 50,
            dim: 10,
            noise_std: 0.001,
            ridge_coeff: 0.001,
            dim_in: 4,
            hidden: 8,
            classes: 3,
            skew: 0.0,
            idx_images: None,
            idx_labels: None,
            channel_mean: 1e-5,
            sigma2: 1e-7,
            channel_mode: ChannelMode::Static,
            b_max: BoxLimit::Uniform(5f64.sqrt()),
            theta_th: std::f64::consts::FRAC_PI_3,
            strategies: vec![StrategyKind::Normalized],
            p: 0.75,
            eta: 0.01,
            rounds: 500,
            seeds: 20,
            master_seed: 1,
            target_s: None,
            target_eps: None,
            delta_f: None,
            batch_size: None,
            tol_r: crate::optimizer::DEFAULT_TOL_R,
            smoothness_pairs: crate::tasks::DEFAULT_SMOOTHNESS_PAIRS,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.devices == 0 || self.per_device == 0 {
            return bad("devices and per_device must be positive".into());
        }
        if self.rounds == 0 || self.seeds == 0 {
            return bad("rounds and seeds must be positive".into());
        }
        if !(self.channel_mean > 0.0) || !(self.sigma2 >= 0.0) || !self.sigma2.is_finite() {
            return bad(format!(
                "channel_mean must be > 0 and sigma2 >= 0 (got {}, {})",
                self.channel_mean, self.sigma2
            ));
        }
        if !(self.theta_th >= 0.0 && self.theta_th < std::f64::consts::FRAC_PI_2) {
            return bad(format!("theta_th = {} outside [0, pi/2)", self.theta_th));
        }
        if !(self.skew >= 0.0 && self.skew <= 1.0) {
            return bad(format!("skew = {} outside [0, 1]", self.skew));
        }
        if self.strategies.is_empty() {
            return bad("strategies must not be empty".into());
        }
        if !(self.tol_r > 0.0) {
            return bad("tol_r must be positive".into());
        }
        self.b_max.expand(self.devices)?;
        match self.case {
            Case::Smooth => {
                if !(self.p > 0.5 && self.p < 1.0) {
                    return bad(format!("p = {} outside (1/2, 1)", self.p));
                }
                if self.target_s.is_some() || self.target_eps.is_some() {
                    return bad("target_s / target_eps apply to case II only".into());
                }
            }
            Case::StronglyConvex => {
                if !(self.eta > 0.0) {
                    return bad(format!("eta must be positive, got {}", self.eta));
                }
                if self.target_s.is_some() && self.target_eps.is_some() {
                    return bad("set at most one of target_s and target_eps".into());
                }
                if self.task != TaskKind::Ridge {
                    return bad("case II needs a strongly convex task (task = \"ridge\")".into());
                }
            }
        }
        if self.task == TaskKind::Idx && (self.idx_images.is_none() || self.idx_labels.is_none()) {
            return bad("task = \"idx\" needs idx_images and idx_labels".into());
        }
        if let Some(d) = self.delta_f {
            if !(d > 0.0) {
                return bad(format!("delta_f must be positive, got {d}"));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, ignoring `output_dir`.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.seeds as u64).collect()
    }
}
