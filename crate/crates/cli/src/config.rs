//! Optional JSON config file. Every section falls back to defaults, and
//! command-line flags override whatever the file sets.

use std::path::Path;

use deepj_core::cmd::CmdConfig;
use deepj_core::corpus::GenConfig;
use deepj_core::gsl::GslConfig;
use deepj_core::head::ModelConfig;
use deepj_core::interpret::DEFAULT_THRESHOLD;
use deepj_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::manifest::read_text;

pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub gen: GenConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub cv: CvSection,
    pub interpret: InterpretSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_blocks: usize,
    pub clusters: Vec<usize>,
    pub p_max: usize,
    pub c_max: usize,
    /// Feed-forward width; `0` means four times `d_model`.
    pub ffn_hidden: usize,
    pub classifier_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let gsl = GslConfig::default();
        Self {
            d_model: gsl.d_model,
            n_blocks: gsl.n_blocks,
            clusters: CmdConfig::default().clusters,
            p_max: gsl.p_max,
            c_max: gsl.c_max,
            ffn_hidden: 0,
            classifier_hidden: 0,
        }
    }
}

impl ModelSection {
    /// Model template; `t_max` is set per fold from training data.
    pub fn to_model_config(&self, vocab_size: usize) -> ModelConfig {
        let ffn_hidden = if self.ffn_hidden == 0 { 4 * self.d_model } else { self.ffn_hidden };
        ModelConfig {
            gsl: GslConfig {
                d_model: self.d_model,
                n_blocks: self.n_blocks,
                t_max: 1.0,
                p_max: self.p_max,
                c_max: self.c_max,
                ffn_hidden,
            },
            cmd: CmdConfig { clusters: self.clusters.clone() },
            vocab_size,
            classifier_hidden: self.classifier_hidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSection {
    pub folds: usize,
    /// Train and evaluate only the first fold.
    pub single_split: bool,
}

impl Default for CvSection {
    fn default() -> Self {
        Self { folds: DEFAULT_FOLDS, single_split: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretSection {
    pub threshold: f64,
    pub k: usize,
}

impl Default for InterpretSection {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, k: DEFAULT_TOP_K }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = read_text(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Replaces `slot` when the flag was given.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}
