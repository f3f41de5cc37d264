//! Run configuration.
//!
//! Every field has a default, so a config file only needs to list what it
//! changes. The full configuration is serialized as TOML and embedded in
//! every checkpoint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SivtError};

/// Which feature extractor backs the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Convolution stages loaded from a weights archive.
    PretrainedCnn,
    /// Fixed-seed random convolution stages.
    SyntheticDeterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    /// Stage indices whose outputs are resized and concatenated.
    pub layers: Vec<usize>,
    pub target_size: usize,
    pub expected_channels: usize,
    /// Output channels of every synthetic stage. Empty means derive from
    /// `layers` and `expected_channels`.
    pub stage_channels: Vec<usize>,
    /// Seed of the synthetic extractor.
    pub seed: u64,
    /// Weights archive for `pretrained-cnn`.
    pub weights: Option<PathBuf>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        // Stage widths follow EfficientNet-b4 (24, 32, 56, 112, 160); stages
        // 0, 1, 2 and 4 sum to 272 channels.
        Self {
            kind: BackboneKind::SyntheticDeterministic,
            layers: vec![0, 1, 2, 4],
            target_size: 32,
            expected_channels: 272,
            stage_channels: vec![24, 32, 56, 112, 160],
            seed: 0,
            weights: None,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(SivtError::Config("backbone layer selection is empty".into()));
        }
        if self.target_size == 0 {
            return Err(SivtError::Config("backbone target size must be positive".into()));
        }
        if self.expected_channels == 0 {
            return Err(SivtError::Config("backbone expected channels must be positive".into()));
        }
        if self.kind == BackboneKind::PretrainedCnn && self.weights.is_none() {
            return Err(SivtError::Config(
                "pretrained-cnn backbone requires a weights path".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalScheme {
    FixedSinusoidal,
    Learnable,
}

/// Reconstruction route used for training and scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconstructionMode {
    /// Self-induction: every latent is produced without seeing its own token.
    Sivt,
    /// Plain autoencoding baseline.
    Vanilla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub patch_size: usize,
    pub subsets: usize,
    pub embed_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub layer_norm_eps: f64,
    pub positional: PositionalScheme,
    pub init_std: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            patch_size: 2,
            subsets: 4,
            embed_dim: 240,
            encoder_depth: 12,
            decoder_depth: 8,
            heads: 8,
            mlp_ratio: 4,
            layer_norm_eps: 1e-6,
            positional: PositionalScheme::FixedSinusoidal,
            init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub lambda: f64,
    /// Gaussian smoothing std in image pixels; 0 disables smoothing.
    pub sigma: f64,
    pub cosine_eps: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            sigma: 4.0,
            cosine_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    /// Draw a fresh partition per optimization step and sample.
    pub train_resample: bool,
    pub inference_seed: u64,
    /// Number of partitions averaged at inference.
    pub ensemble: usize,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            train_resample: true,
            inference_seed: 0,
            ensemble: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip. Off by default: non-finite losses abort.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// Save a checkpoint every this many epochs; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Extract backbone features once and reuse them across epochs.
    pub cache_features: bool,
    /// Skip unreadable images with a warning instead of failing.
    pub skip_unreadable: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 8,
            shuffle_seed: 0,
            checkpoint_every: 0,
            cache_features: true,
            skip_unreadable: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seed: u64,
    pub mode: ReconstructionMode,
    pub input_resolution: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub backbone: BackboneSpec,
    pub model: TransformerConfig,
    pub scoring: ScoringConfig,
    pub partition: PartitionConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: ReconstructionMode::Sivt,
            input_resolution: 256,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            backbone: BackboneSpec::default(),
            model: TransformerConfig::default(),
            scoring: ScoringConfig::default(),
            partition: PartitionConfig::default(),
            optimizer: OptimizerConfig::default(),
            training: TrainingConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small configuration used by the desk-scale recipe and CI: 64×64
    /// inputs, 16×16×72 features, D=32, depths 2/2, 4 heads.
    pub fn toy() -> Self {
        Self {
            input_resolution: 64,
            backbone: BackboneSpec {
                kind: BackboneKind::SyntheticDeterministic,
                layers: vec![0, 1, 2],
                target_size: 16,
                expected_channels: 72,
                stage_channels: vec![16, 24, 32, 48],
                seed: 0,
                weights: None,
            },
            model: TransformerConfig {
                embed_dim: 32,
                encoder_depth: 2,
                decoder_depth: 2,
                heads: 4,
                ..TransformerConfig::default()
            },
            optimizer: OptimizerConfig {
                lr: 1e-2,
                ..OptimizerConfig::default()
            },
            training: TrainingConfig {
                epochs: 50,
                ..TrainingConfig::default()
            },
            ..Self::default()
        }
    }

    /// Number of tokens `L = (H/P)·(W/P)`.
    pub fn num_tokens(&self) -> usize {
        let side = self.backbone.target_size / self.model.patch_size.max(1);
        side * side
    }

    /// Width of a flattened feature patch, `P·P·C`.
    pub fn patch_dim(&self) -> usize {
        self.model.patch_size * self.model.patch_size * self.backbone.expected_channels
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let m = &self.model;
        if self.input_resolution == 0 {
            return Err(SivtError::Config("input resolution must be positive".into()));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(SivtError::Config("normalization std must be positive".into()));
        }
        if m.patch_size == 0 || !self.backbone.target_size.is_multiple_of(m.patch_size) {
            return Err(SivtError::Config(format!(
                "patch size {} does not divide feature size {}",
                m.patch_size, self.backbone.target_size
            )));
        }
        let l = self.num_tokens();
        if m.subsets == 0 || m.subsets > l {
            return Err(SivtError::Config(format!(
                "subset count {} outside 1..={l}",
                m.subsets
            )));
        }
        if m.embed_dim == 0 || m.heads == 0 || !m.embed_dim.is_multiple_of(m.heads) {
            return Err(SivtError::Config(format!(
                "embedding dim {} not divisible by {} heads",
                m.embed_dim, m.heads
            )));
        }
        if m.mlp_ratio == 0 {
            return Err(SivtError::Config("mlp ratio must be positive".into()));
        }
        if self.scoring.lambda < 0.0 || self.scoring.sigma < 0.0 {
            return Err(SivtError::Config("lambda and sigma must be nonnegative".into()));
        }
        if self.partition.ensemble == 0 {
            return Err(SivtError::Config("ensemble size must be at least 1".into()));
        }
        if self.training.batch_size == 0 {
            return Err(SivtError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self =
            toml::from_str(text).map_err(|e| SivtError::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SivtError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| SivtError::io(path, e))
    }
}
