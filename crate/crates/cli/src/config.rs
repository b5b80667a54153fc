//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are either run
//! settings (paths, preprocessing, evaluation sizes) or training settings
//! applied on top of the desk-scale defaults, after the paper-scale preset
//! when `paper_scale = true`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use textgan::trainer::{FeatureSource, TrainConfig};
use textgan::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Checkpoint read by generate, interpolate, eval and diagnose; defaults
    /// to the trained model in `out_dir`.
    pub checkpoint: Option<PathBuf>,
    pub min_count: usize,
    pub t_max: usize,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub paper_scale: bool,
    pub skip_pretrain: bool,
    pub num_sentences: usize,
    pub interp_steps: usize,
    pub eval_repeats: usize,
    pub eval_samples: usize,
    /// Training keys in the order they were set.
    train: Vec<(String, String)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: None,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            checkpoint: None,
            min_count: 1,
            t_max: 32,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            paper_scale: false,
            skip_pretrain: false,
            num_sentences: 10,
            interp_steps: 5,
            eval_repeats: 10,
            eval_samples: 320,
            train: Vec::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn parse_optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

/// Sets one training key; `Ok(false)` when the key is not a training key.
pub fn apply_train_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<bool> {
    let m = &mut cfg.model;
    match key {
        "variant" => cfg.variant = value.parse()?,
        "lambda_r" => cfg.lambda_r = parse(key, value)?,
        "lambda_m" => cfg.lambda_m = parse(key, value)?,
        "k" => cfg.k = parse(key, value)?,
        "temperature" => cfg.temperature = parse(key, value)?,
        "lr" => cfg.lr = parse(key, value)?,
        "beta1" => cfg.beta1 = parse(key, value)?,
        "beta2" => cfg.beta2 = parse(key, value)?,
        "adam_eps" => cfg.adam_eps = parse(key, value)?,
        "clip_norm" => cfg.clip_norm = parse(key, value)?,
        "batch_size" => cfg.batch_size = parse(key, value)?,
        "epochs" => cfg.epochs = parse(key, value)?,
        "iterations" => cfg.iterations = parse_optional(key, value)?,
        "warmup_epochs" => cfg.warmup_epochs = parse(key, value)?,
        "soft_label_real" => cfg.soft_labels.real = parse(key, value)?,
        "soft_label_fake" => cfg.soft_labels.fake = parse(key, value)?,
        "stats_window" => cfg.stats_window = parse(key, value)?,
        "mmd_features" => {
            cfg.mmd_features = match value {
                "activated" => FeatureSource::Activated,
                "pre_activation" => FeatureSource::PreActivation,
                _ => {
                    return Err(Error::Config(format!(
                        "`mmd_features`: expected activated or pre_activation, got `{value}`"
                    )))
                }
            }
        }
        "bandwidth_sample" => cfg.bandwidth_sample = parse(key, value)?,
        "ae_epochs" => cfg.ae_epochs = parse(key, value)?,
        "ae_lr" => cfg.ae_lr = parse(key, value)?,
        "disc_pretrain_epochs" => cfg.disc_pretrain_epochs = parse(key, value)?,
        "disc_pretrain_lr" => cfg.disc_pretrain_lr = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "embed_dim" => m.embed_dim = parse(key, value)?,
        "windows" => {
            m.windows = value
                .split(',')
                .map(|w| parse(key, w.trim()))
                .collect::<Result<Vec<usize>>>()?
        }
        "filters" => m.filters = parse(key, value)?,
        "disc_hidden" => m.disc_hidden = parse(key, value)?,
        "enc_hidden" => m.enc_hidden = parse(key, value)?,
        "gen_hidden" => m.gen_hidden = parse(key, value)?,
        "latent_dim" => m.latent_dim = parse(key, value)?,
        "compress_dim" => m.compress_dim = parse_optional(key, value)?,
        "share_embedding" => m.share_embedding = parse_bool(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

impl RunConfig {
    /// Sets a key from the file or a `--set` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "corpus" => self.corpus = Some(PathBuf::from(value)),
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "min_count" => self.min_count = parse(key, value)?,
            "t_max" => self.t_max = parse(key, value)?,
            "valid_fraction" => self.valid_fraction = parse(key, value)?,
            "test_fraction" => self.test_fraction = parse(key, value)?,
            "paper_scale" => self.paper_scale = parse_bool(key, value)?,
            "skip_pretrain" => self.skip_pretrain = parse_bool(key, value)?,
            "num_sentences" => self.num_sentences = parse(key, value)?,
            "interp_steps" => self.interp_steps = parse(key, value)?,
            "eval_repeats" => self.eval_repeats = parse(key, value)?,
            "eval_samples" => self.eval_samples = parse(key, value)?,
            _ => {
                // Validate now so that a bad value fails before any work.
                let mut probe = TrainConfig::desk(8);
                if !apply_train_key(&mut probe, key, value)? {
                    return Err(Error::Config(format!("unknown configuration key `{key}`")));
                }
                self.train.push((key.to_string(), value.to_string()));
            }
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_config(e))))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse_text(&text)
    }

    /// Training configuration for a vocabulary of `vocab_size` entries.
    pub fn train_config(&self, vocab_size: usize) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::desk(vocab_size);
        if self.paper_scale {
            cfg.apply_paper_scale();
        }
        for (k, v) in &self.train {
            apply_train_key(&mut cfg, k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_max < 2 {
            return Err(Error::Config(format!("t_max must be at least 2, got {}", self.t_max)));
        }
        if self.min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let (v, t) = (self.valid_fraction, self.test_fraction);
        if !(v >= 0.0 && t >= 0.0 && v + t < 1.0) {
            return Err(Error::Config(format!(
                "split fractions must be nonnegative and leave room for training, got valid {v}, test {t}"
            )));
        }
        self.train_config(8).map(|_| ())
    }

    /// Every setting after resolution, in the file format.
    pub fn render(&self, train: &TrainConfig) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        if let Some(c) = &self.corpus {
            kv("corpus", path_string(c));
        }
        kv("data_dir", path_string(&self.data_dir));
        kv("out_dir", path_string(&self.out_dir));
        if let Some(c) = &self.checkpoint {
            kv("checkpoint", path_string(c));
        }
        kv("min_count", self.min_count.to_string());
        kv("t_max", self.t_max.to_string());
        kv("valid_fraction", self.valid_fraction.to_string());
        kv("test_fraction", self.test_fraction.to_string());
        kv("paper_scale", self.paper_scale.to_string());
        kv("skip_pretrain", self.skip_pretrain.to_string());
        kv("num_sentences", self.num_sentences.to_string());
        kv("interp_steps", self.interp_steps.to_string());
        kv("eval_repeats", self.eval_repeats.to_string());
        kv("eval_samples", self.eval_samples.to_string());
        for (k, v) in train_pairs(train) {
            kv(k, v);
        }
        out
    }
}

/// Training settings as `(key, value)` strings, readable by
/// [`apply_train_key`].
pub fn train_pairs(c: &TrainConfig) -> Vec<(&'static str, String)> {
    let m = &c.model;
    let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
    vec![
        ("seed", c.seed.to_string()),
        ("variant", c.variant.to_string()),
        ("lambda_r", c.lambda_r.to_string()),
        ("lambda_m", c.lambda_m.to_string()),
        ("k", c.k.to_string()),
        ("temperature", c.temperature.to_string()),
        ("lr", c.lr.to_string()),
        ("beta1", c.beta1.to_string()),
        ("beta2", c.beta2.to_string()),
        ("adam_eps", c.adam_eps.to_string()),
        ("clip_norm", c.clip_norm.to_string()),
        ("batch_size", c.batch_size.to_string()),
        ("epochs", c.epochs.to_string()),
        ("iterations", opt(c.iterations.map(|i| i.to_string()))),
        ("warmup_epochs", c.warmup_epochs.to_string()),
        ("soft_label_real", c.soft_labels.real.to_string()),
        ("soft_label_fake", c.soft_labels.fake.to_string()),
        ("stats_window", c.stats_window.to_string()),
        (
            "mmd_features",
            match c.mmd_features {
                FeatureSource::Activated => "activated".into(),
                FeatureSource::PreActivation => "pre_activation".into(),
            },
        ),
        ("bandwidth_sample", c.bandwidth_sample.to_string()),
        ("ae_epochs", c.ae_epochs.to_string()),
        ("ae_lr", c.ae_lr.to_string()),
        ("disc_pretrain_epochs", c.disc_pretrain_epochs.to_string()),
        ("disc_pretrain_lr", c.disc_pretrain_lr.to_string()),
        ("embed_dim", m.embed_dim.to_string()),
        (
            "windows",
            m.windows.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        ),
        ("filters", m.filters.to_string()),
        ("disc_hidden", m.disc_hidden.to_string()),
        ("enc_hidden", m.enc_hidden.to_string()),
        ("gen_hidden", m.gen_hidden.to_string()),
        ("latent_dim", m.latent_dim.to_string()),
        ("compress_dim", opt(m.compress_dim.map(|d| d.to_string()))),
        ("share_embedding", m.share_embedding.to_string()),
    ]
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}
