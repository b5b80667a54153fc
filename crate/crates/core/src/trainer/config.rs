use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::{LossWeights, SoftLabels, Variant};

/// Which pooled features feed the kernel MMD.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSource {
    Activated,
    PreActivation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub variant: Variant,
    pub lambda_r: f64,
    pub lambda_m: f64,
    /// One discriminator step for every `k` iterations.
    pub k: usize,
    /// Soft-argmax temperature `L`.
    pub temperature: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the adversarial loop below `epochs × batches per epoch`.
    pub iterations: Option<u64>,
    pub warmup_epochs: usize,
    pub soft_labels: SoftLabels,
    /// Minibatches in the moving window of feature statistics.
    pub stats_window: usize,
    pub mmd_features: FeatureSource,
    /// Real sentences used for the median-heuristic bandwidths.
    pub bandwidth_sample: usize,
    pub ae_epochs: usize,
    pub ae_lr: f64,
    pub disc_pretrain_epochs: usize,
    pub disc_pretrain_lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk(vocab_size: usize) -> Self {
        TrainConfig {
            model: ModelConfig::desk(vocab_size),
            variant: Variant::Mmd,
            lambda_r: 1.0,
            lambda_m: 0.01,
            k: 5,
            temperature: 100.0,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            batch_size: 32,
            epochs: 20,
            iterations: None,
            warmup_epochs: 2,
            soft_labels: SoftLabels { real: 0.9, fake: 0.1 },
            stats_window: 10,
            mmd_features: FeatureSource::Activated,
            bandwidth_sample: 256,
            ae_epochs: 20,
            ae_lr: 2e-3,
            disc_pretrain_epochs: 5,
            disc_pretrain_lr: 1e-3,
            seed: 0,
        }
    }

    /// Full-size dimensions and optimization settings.
    pub fn paper(vocab_size: usize) -> Self {
        let mut cfg = Self::desk(vocab_size);
        cfg.apply_paper_scale();
        cfg
    }

    /// Overrides the dimensions and optimizer settings with the full-size
    /// values, leaving everything else alone.
    pub fn apply_paper_scale(&mut self) {
        let share = self.model.share_embedding;
        self.model = ModelConfig::paper(self.model.vocab_size);
        self.model.share_embedding = share;
        self.lr = 5e-5;
        self.batch_size = 256;
        self.k = 5;
        self.clip_norm = 5.0;
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda_r, self.lambda_m)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights()?;
        let positive = [
            ("temperature", self.temperature),
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("clip_norm", self.clip_norm),
            ("ae_lr", self.ae_lr),
            ("disc_pretrain_lr", self.disc_pretrain_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        for (name, v) in [
            ("k", self.k),
            ("batch_size", self.batch_size),
            ("stats_window", self.stats_window),
            ("bandwidth_sample", self.bandwidth_sample),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.bandwidth_sample < 2 {
            return Err(Error::Config("bandwidth_sample must be at least 2".into()));
        }
        for (name, p) in [("soft label real", self.soft_labels.real), ("soft label fake", self.soft_labels.fake)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.variant == Variant::MmdL && self.model.compress_dim.is_none() {
            return Err(Error::Config("variant MMD-L needs a compressing network (compress_dim)".into()));
        }
        Ok(())
    }
}
