//! Parameter layout shared by the discriminator and generator.
//!
//! Names under `disc.` belong to the CNN encoder and its heads, names under
//! `gen.` to the LSTM generator. The word embedding `disc.embed` is stored
//! as `V × k` (one row per token) and row `PAD` is held at zero.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::rng::{stream_rng, Stream};

pub type ParamSet = BTreeMap<String, Tensor>;

pub const DISC_PREFIX: &str = "disc.";
pub const GEN_PREFIX: &str = "gen.";
pub const EMBED: &str = "disc.embed";
pub const GEN_EMBED: &str = "gen.embed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Word embedding dimension `k`.
    pub embed_dim: usize,
    /// Convolution window sizes `h`.
    pub windows: Vec<usize>,
    /// Filters per window size `p`.
    pub filters: usize,
    pub disc_hidden: usize,
    pub enc_hidden: usize,
    pub gen_hidden: usize,
    pub latent_dim: usize,
    /// Output dimension of the compressing network; `None` disables it.
    pub compress_dim: Option<usize>,
    pub share_embedding: bool,
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 64,
            windows: vec![3, 4, 5],
            filters: 32,
            disc_hidden: 32,
            enc_hidden: 96,
            gen_hidden: 64,
            latent_dim: 96,
            compress_dim: Some(32),
            share_embedding: true,
        }
    }

    /// Dimensions used for the full-size experiments: 3×300 features, a
    /// 900-200-2 classifier, a 900-900-900 encoder and a 500-unit LSTM.
    pub fn paper(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 300,
            windows: vec![3, 4, 5],
            filters: 300,
            disc_hidden: 200,
            enc_hidden: 900,
            gen_hidden: 500,
            latent_dim: 900,
            compress_dim: Some(200),
            share_embedding: true,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.windows.len() * self.filters
    }

    pub fn max_window(&self) -> usize {
        self.windows.iter().copied().max().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("filters", self.filters),
            ("disc_hidden", self.disc_hidden),
            ("enc_hidden", self.enc_hidden),
            ("gen_hidden", self.gen_hidden),
            ("latent_dim", self.latent_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocabulary must hold the reserved tokens".into()));
        }
        if self.windows.is_empty() || self.windows.contains(&0) {
            return Err(Error::Config("window sizes must be positive and non-empty".into()));
        }
        if let Some(d) = self.compress_dim {
            if d == 0 || d >= self.feature_dim() {
                return Err(Error::Config(format!(
                    "compress_dim {d} must lie in 1..{}",
                    self.feature_dim()
                )));
            }
        }
        Ok(())
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, k, f) = (self.vocab_size, self.embed_dim, self.feature_dim());
        let mut out = vec![(EMBED.to_string(), vec![v, k])];
        for &h in &self.windows {
            out.push((conv_w(h), vec![h * k, self.filters]));
            out.push((conv_b(h), vec![self.filters]));
        }
        let mut dense = |prefix: &str, dims: &[usize]| {
            for (layer, pair) in dims.windows(2).enumerate() {
                out.push((format!("{prefix}.w{}", layer + 1), vec![pair[0], pair[1]]));
                out.push((format!("{prefix}.b{}", layer + 1), vec![pair[1]]));
            }
        };
        dense("disc.cls", &[f, self.disc_hidden, 2]);
        dense("disc.rec", &[f, self.enc_hidden, self.latent_dim]);
        if let Some(d) = self.compress_dim {
            dense("disc.cmp", &[f, d, d]);
        }
        let (hid, z) = (self.gen_hidden, self.latent_dim);
        if !self.share_embedding {
            out.push((GEN_EMBED.to_string(), vec![v, k]));
        }
        out.push(("gen.init".into(), vec![z, hid]));
        out.push(("gen.lstm.wx".into(), vec![k + z, 4 * hid]));
        out.push(("gen.lstm.wh".into(), vec![hid, 4 * hid]));
        out.push(("gen.lstm.b".into(), vec![4 * hid]));
        out.push(("gen.out".into(), vec![hid, v]));
        out
    }

    /// Name of the table the generator feeds back through.
    pub fn feedback_embedding(&self) -> &'static str {
        if self.share_embedding {
            EMBED
        } else {
            GEN_EMBED
        }
    }
}

pub fn conv_w(h: usize) -> String {
    format!("disc.conv{h}.w")
}

pub fn conv_b(h: usize) -> String {
    format!("disc.conv{h}.b")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

impl Model {
    /// Glorot-uniform matrices, zero biases (LSTM forget gate at one),
    /// uniform ±0.5 embeddings with a zero PAD row. The output layer starts
    /// at zero, so the untrained generator predicts a uniform distribution.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, Stream::Init);
        let mut params = ParamSet::new();
        let hid = cfg.gen_hidden;
        for (name, shape) in cfg.param_shapes() {
            let mut t = Tensor::zeros(&shape);
            if name == EMBED || name == GEN_EMBED {
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
                zero_pad_row(&mut t);
            } else if shape.len() == 2 && name != "gen.out" {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
            } else if name == "gen.lstm.b" {
                t.data_mut()[hid..2 * hid].iter_mut().for_each(|v| *v = 1.0);
            }
            params.insert(name, t);
        }
        Ok(Model { cfg, params })
    }

    /// All-zero parameters of the right shapes.
    pub fn zeros(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let params = cfg
            .param_shapes()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .collect();
        Ok(Model { cfg, params })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    /// Checks that the parameter set matches the configured layout.
    pub fn check_layout(&self) -> Result<()> {
        let shapes = self.cfg.param_shapes();
        if shapes.len() != self.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                shapes.len(),
                self.params.len()
            )));
        }
        for (name, shape) in shapes {
            let t = self.param(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::CheckpointShape {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Re-zeroes the PAD embedding rows after an update.
    pub fn pin_pad_embedding(&mut self) {
        for name in [EMBED, GEN_EMBED] {
            if let Some(t) = self.params.get_mut(name) {
                zero_pad_row(t);
            }
        }
    }
}

fn zero_pad_row(t: &mut Tensor) {
    let k = t.shape()[1];
    t.data_mut()[PAD * k..(PAD + 1) * k].iter_mut().for_each(|v| *v = 0.0);
}
