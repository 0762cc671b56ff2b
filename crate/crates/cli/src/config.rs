//! Run configuration: one file (TOML or JSON) holding every section, with
//! command-line overrides applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ttpose_core::eval::{CURVE_WINDOW, SAVGOL_POLY, SAVGOL_WINDOW};
use ttpose_core::posenet::ModelConfig;
use ttpose_core::puppet::DatasetConfig;
use ttpose_core::trainer::TrainConfig;
use ttpose_core::ttp::TtpConfig;
use ttpose_core::{Error, Result};

/// Environment variable consulted for the seed when neither the command
/// line nor the config file sets one.
pub const SEED_ENV: &str = "TTPK_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub smooth: bool,
    pub savgol_window: usize,
    pub savgol_poly: usize,
    pub curve_window: usize,
    pub vis_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            smooth: false,
            savgol_window: SAVGOL_WINDOW,
            savgol_poly: SAVGOL_POLY,
            curve_window: CURVE_WINDOW,
            vis_threshold: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; when set it replaces every section's seed.
    pub seed: Option<u64>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ttp: TtpConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            data_dir: PathBuf::from("run/data"),
            out_dir: PathBuf::from("run"),
            data: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            ttp: TtpConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config file, choosing JSON for `.json` and TOML otherwise.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_file(p),
            None => Ok(Self::default()),
        }
    }

    /// Applies the seed precedence: command line, then config file, then
    /// the environment.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<()> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        self.seed = flag.or(self.seed).or(env);
        if let Some(s) = self.seed {
            self.data.seed = s;
            self.train.seed = s;
            self.ttp.seed = s;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.ttp.validate()?;
        if self.data.k_sup != self.model.k_sup {
            return Err(Error::Config(format!(
                "dataset labels {} joints but the model predicts {}",
                self.data.k_sup, self.model.k_sup
            )));
        }
        if self.data.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "dataset images are {} px but the model expects {}",
                self.data.image_size, self.model.image_size
            )));
        }
        if self.eval.savgol_window.is_multiple_of(2) || self.eval.savgol_poly >= self.eval.savgol_window {
            return Err(Error::Config(
                "savgol_window must be odd and larger than savgol_poly".into(),
            ));
        }
        if self.eval.curve_window == 0 {
            return Err(Error::Config("curve_window must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn model_dir(&self, variant: &str) -> PathBuf {
        self.out_dir.join("models").join(variant)
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.out_dir.join("predictions")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_dir.join("report")
    }
}
