//! Run configuration: a flat TOML file whose keys can be overridden by flags.
//!
//! ```toml
//! seed = 7
//! size = "64x64"
//! head = "dicl"          # dot | cosine | mlp3 | reduced-dicl | dicl
//! dap = true
//! context = true
//! lr = 0.001
//! iters = 400
//! batch = 2
//! loss_weights = [1.0, 0.75, 0.5, 0.5, 0.5]
//! precision = "f64"      # f32 | f64
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselinecosts::CostHeadKind;
use crate::error::{DiclError, Result};
use crate::featurenet::SIZE_MULTIPLE;
use crate::flowdata::SyntheticKind;
use crate::pyramidflow::{ModelConfig, LOSS_WEIGHTS};
use crate::train::TrainConfig;

/// `HxW`, e.g. `64x96`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ImageSize {
    pub height: usize,
    pub width: usize,
}

impl FromStr for ImageSize {
    type Err = DiclError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || DiclError::Config(format!("size must look like HxW, got '{s}'"));
        let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let height = h.trim().parse().map_err(|_| bad())?;
        let width = w.trim().parse().map_err(|_| bad())?;
        if height == 0 || width == 0 {
            return Err(bad());
        }
        Ok(Self { height, width })
    }
}

impl TryFrom<String> for ImageSize {
    type Error = DiclError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ImageSize> for String {
    fn from(s: ImageSize) -> String {
        s.to_string()
    }
}

impl fmt::Display for ImageSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = DiclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(DiclError::Config(format!("precision must be f32 or f64, got '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub size: ImageSize,
    pub head: CostHeadKind,
    pub dap: bool,
    pub context: bool,
    pub context_all_levels: bool,
    pub lr: f64,
    pub iters: usize,
    pub batch: usize,
    pub loss_weights: Vec<f64>,
    pub max_mag: f64,
    pub kinds: Vec<SyntheticKind>,
    pub eval_every: usize,
    pub eval_count: usize,
    pub precision: Precision,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = ModelConfig::default();
        Self {
            seed: t.seed,
            size: ImageSize { height: t.size.0, width: t.size.1 },
            head: m.head,
            dap: m.dap,
            context: m.context,
            context_all_levels: m.context_all_levels,
            lr: t.lr,
            iters: t.iters,
            batch: t.batch,
            loss_weights: LOSS_WEIGHTS.to_vec(),
            max_mag: t.max_mag,
            kinds: t.kinds,
            eval_every: t.eval_every,
            eval_count: t.eval_count,
            precision: Precision::F64,
            out_dir: "runs".into(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| DiclError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !self.size.height.is_multiple_of(SIZE_MULTIPLE) || !self.size.width.is_multiple_of(SIZE_MULTIPLE) {
            return Err(DiclError::Config(format!(
                "training size {} must be a multiple of {SIZE_MULTIPLE} in both extents",
                self.size
            )));
        }
        self.train_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            head: self.head,
            dap: self.dap,
            context: self.context,
            context_all_levels: self.context_all_levels,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            size: (self.size.height, self.size.width),
            iters: self.iters,
            batch: self.batch,
            lr: self.lr,
            max_mag: self.max_mag,
            kinds: self.kinds.clone(),
            loss_weights: self.loss_weights.clone(),
            eval_every: self.eval_every,
            eval_count: self.eval_count,
        }
    }
}
