//! Runtime configuration. One JSON file covers model, training and
//! synthetic-data settings; every field has a default and may be overridden
//! individually.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

/// Model architecture and loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Number of entity categories |C|.
    pub entity_classes: usize,
    /// Number of predicate categories |R|, including `bg` at index 0.
    pub predicate_classes: usize,
    /// Width D of the appearance features supplied by the dataset.
    pub feature_dim: usize,
    /// Width D' of the shared visual projection.
    pub visual_proj_dim: usize,
    /// Init gain of the visual projection; larger values raise activation
    /// scale so the classifier readouts converge at small learning rates.
    pub visual_proj_gain: f64,
    /// Word-embedding width E.
    pub embed_dim: usize,
    /// Common relation-space width S; the transformed relation is 3*S wide.
    pub semantic_dim: usize,
    /// Output width of the graph self-attention module (after the adapter).
    pub attention_dim: usize,
    /// Number of attention heads K.
    pub attention_heads: usize,
    /// Hidden width of the two classification heads.
    pub mlp_hidden: usize,
    /// Negative slope shared by all LeakyReLU activations.
    pub leaky_slope: f64,
    /// Overlap-neighbor rule threshold.
    pub iou_threshold: f64,
    /// Relative-neighbor rule threshold on distance / image diagonal.
    pub distance_ratio_threshold: f64,
    /// Union-box expansion, as a fraction of union width/height per side.
    pub union_margin: f64,
    pub lambda_entity: f64,
    pub lambda_relation: f64,
    pub lambda_semantic: f64,
    pub weight_decay: f64,
    /// Background pairs sampled per positive pair during training.
    pub bg_sample_ratio: usize,
    /// Word-embedding file; when absent, embeddings are randomly initialized.
    pub embeddings_path: Option<PathBuf>,
    /// Overrides the default trainability of the embedding tables
    /// (random-initialized tables train, loaded tables are frozen).
    pub train_embeddings: Option<bool>,
    /// Ablation switch: semantic transformation and its loss term.
    pub use_semantic: bool,
    /// Ablation switch: graph self-attention.
    pub use_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            entity_classes: 150,
            predicate_classes: 51,
            feature_dim: 512,
            visual_proj_dim: 500,
            visual_proj_gain: 1.0,
            embed_dim: 300,
            semantic_dim: 500,
            attention_dim: 500,
            attention_heads: 8,
            mlp_hidden: 500,
            leaky_slope: 0.2,
            iou_threshold: 0.5,
            distance_ratio_threshold: 0.5,
            union_margin: 0.05,
            lambda_entity: 4.0,
            lambda_relation: 1.0,
            lambda_semantic: 1.0,
            weight_decay: 1e-5,
            bg_sample_ratio: 3,
            embeddings_path: None,
            train_embeddings: None,
            use_semantic: true,
            use_attention: true,
        }
    }
}

impl ModelConfig {
    /// Per-head width M'. The adapter projects K*M' back to `attention_dim`,
    /// which also absorbs the remainder when K does not divide the width.
    pub fn head_dim(&self) -> usize {
        self.attention_dim / self.attention_heads
    }

    /// Width of the transformed relation representation.
    pub fn relation_repr_dim(&self) -> usize {
        3 * self.semantic_dim
    }

    /// Width of a node context f': projected feature plus relation summary.
    pub fn node_context_dim(&self) -> usize {
        if self.use_semantic {
            self.visual_proj_dim + self.relation_repr_dim()
        } else {
            self.visual_proj_dim
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("entity_classes", self.entity_classes),
            ("feature_dim", self.feature_dim),
            ("visual_proj_dim", self.visual_proj_dim),
            ("embed_dim", self.embed_dim),
            ("semantic_dim", self.semantic_dim),
            ("attention_dim", self.attention_dim),
            ("attention_heads", self.attention_heads),
            ("mlp_hidden", self.mlp_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.predicate_classes < 2 {
            return Err(ConfigError::Invalid(
                "predicate_classes must include bg and at least one predicate".into(),
            ));
        }
        if self.head_dim() == 0 {
            return Err(ConfigError::Invalid(format!(
                "attention_dim {} too small for {} heads",
                self.attention_dim, self.attention_heads
            )));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "leaky_slope must lie in (0,1), got {}",
                self.leaky_slope
            )));
        }
        if self.union_margin < 0.0 {
            return Err(ConfigError::Invalid("union_margin must be >= 0".into()));
        }
        Ok(())
    }
}

/// Optimizer and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs between periodic checkpoints; 0 disables all but the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 20,
            epochs: 10,
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ConfigError::Invalid("learning_rate must be positive".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(ConfigError::Invalid(format!("{name} must lie in [0,1)")));
            }
        }
        Ok(())
    }
}

/// Synthetic dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_images: usize,
    pub entities_per_image: usize,
    pub entity_classes: usize,
    /// Includes bg; the generator supports up to 9 (bg + 8 spatial rules).
    pub predicate_classes: usize,
    pub feature_dim: usize,
    pub seed: u64,
    /// Std-dev of the Gaussian noise added to class prototypes.
    pub noise_sigma: f64,
    /// Probability that an entity's initial score vector peaks on the true class.
    pub score_correct_prob: f64,
    /// Probability mass spread uniformly across classes in a score vector.
    pub score_softness: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_images: 100,
            entities_per_image: 5,
            entity_classes: 10,
            predicate_classes: 6,
            feature_dim: 16,
            seed: 0,
            noise_sigma: 0.25,
            score_correct_prob: 0.8,
            score_softness: 0.3,
        }
    }
}
