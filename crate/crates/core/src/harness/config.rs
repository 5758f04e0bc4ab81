use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Aggregator;
use crate::numeric::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Subtype,
    Survival,
}

/// Which fusion stages the model uses.
///
/// `OmicOnly` and `WsiOnly` are the unimodal baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Dual,
    EarlyOnly,
    LateOnly,
    OmicOnly,
    WsiOnly,
}

impl FusionMode {
    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Dual => "dual",
            FusionMode::EarlyOnly => "early_only",
            FusionMode::LateOnly => "late_only",
            FusionMode::OmicOnly => "omic_only",
            FusionMode::WsiOnly => "wsi_only",
        }
    }

    pub fn uses_early_fusion(self) -> bool {
        matches!(self, FusionMode::Dual | FusionMode::EarlyOnly)
    }

    pub fn uses_late_fusion(self) -> bool {
        matches!(self, FusionMode::Dual | FusionMode::LateOnly)
    }

    pub fn uses_attention(self) -> bool {
        !matches!(self, FusionMode::OmicOnly)
    }

    pub fn uses_omics(self) -> bool {
        !matches!(self, FusionMode::WsiOnly)
    }
}

/// Layer widths. Input widths left unset are taken from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub omic_features: Option<usize>,
    pub patch_dim: Option<usize>,
    pub omic_dim: usize,
    pub snn_hidden: usize,
    pub fuse_hidden: usize,
    pub attn_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            omic_features: None,
            patch_dim: None,
            omic_dim: 256,
            snn_hidden: 1024,
            fuse_hidden: 512,
            attn_hidden: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub fusion: FusionMode,
    pub aggregator: Aggregator,
    pub dims: ModelDims,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    /// Slides per optimizer step; gradients are averaged over the batch.
    pub batch_size: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub n_bins: usize,
    pub folds: usize,
    pub snn_dropout: f64,
    pub fuse_dropout: f64,
    pub rho_dropout: f64,
    pub epsilon: f64,
    /// Inverse-frequency class weights in the cross-entropy.
    pub class_weights: bool,
    /// Keep this many omic features, chosen on the training fold.
    pub select_features: Option<usize>,
    pub normalize_omics: bool,
    /// Rescale each step's gradient to at most this global L2 norm, if set.
    pub grad_clip: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            task: Task::Subtype,
            fusion: FusionMode::Dual,
            aggregator: Aggregator::Moab,
            dims: ModelDims::default(),
            optimizer: AdamConfig::default(),
            epochs: 30,
            batch_size: 1,
            max_steps: None,
            n_bins: 4,
            folds: 2,
            snn_dropout: 0.25,
            fuse_dropout: 0.1,
            rho_dropout: 0.1,
            epsilon: 1e-8,
            class_weights: false,
            select_features: None,
            normalize_omics: true,
            grad_clip: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let widths = [d.omic_dim, d.snn_hidden, d.fuse_hidden, d.attn_hidden];
        if widths.contains(&0) || d.omic_features == Some(0) || d.patch_dim == Some(0) {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        if self.task == Task::Survival && self.n_bins < 2 {
            return Err(Error::Config("survival needs at least 2 time bins".into()));
        }
        for (name, p) in [
            ("snn_dropout", self.snn_dropout),
            ("fuse_dropout", self.fuse_dropout),
            ("rho_dropout", self.rho_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        if self.select_features == Some(0) {
            return Err(Error::Config("select_features must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"fusion": "late_only", "aggregator": "kp", "dims": {"omic_dim": 16}}"#).unwrap();
        assert_eq!(cfg.fusion, FusionMode::LateOnly);
        assert_eq!(cfg.aggregator, Aggregator::Kp);
        assert_eq!(cfg.dims.omic_dim, 16);
        assert_eq!(cfg.dims.snn_hidden, 1024);
        assert_eq!(cfg.optimizer.learning_rate, 2e-4);
        assert_eq!(cfg.epochs, 30);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let cfg = RunConfig {
            folds: 1,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        cfg.dims.omic_dim = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = RunConfig {
            snn_dropout: 1.0,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
