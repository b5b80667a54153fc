//! Pre-training, the adversarial loop, optimization and checkpoints.
//!
//! Iterations are numbered from 1. Iteration `i` updates the discriminator
//! when `i % K == 0` and the generator otherwise, so `N` iterations hold
//! `⌊N/K⌋` discriminator updates. The minibatch and latent draw of an
//! iteration depend only on the seed and the iteration number, which is what
//! lets a resumed run replay an uninterrupted one exactly.

mod checkpoint;
mod config;
mod optim;
mod pretrain;

use std::fmt::Write as _;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use config::{FeatureSource, TrainConfig};
pub use optim::{clip_gradients, global_norm, Adam};
pub use pretrain::{
    autoencoder_codes, corpus_nll, discrimination_accuracy, exact_reconstructions, pretrain_autoencoder,
    pretrain_discriminator, reconstruct, tweaked_pairs, AutoencoderTrainer,
};

use crate::corpus::{EncodedCorpus, SentenceBatch, PAD};
use crate::discriminator::FeaturePair;
use crate::error::{Error, Result};
use crate::generator::sample_latent;
use crate::model::{Model, ParamSet, DISC_PREFIX, EMBED, GEN_EMBED, GEN_PREFIX};
use crate::numeric::{Graph, Tensor, Var};
use crate::objectives::{
    cov_match_loss, discriminator_objective, gan_loss_soft, mean_match_loss, median_heuristic_bandwidths,
    mmd2, mmd2_value, recon_loss, FeatureStats, KernelMixture, Side, Variant,
};
use crate::rng::{indexed_rng, Stream};

pub const METRICS_HEADER: &str = "step,epoch,loss_name,loss_value,d_real,d_fake,mmd";
/// Loss name logged for discriminator updates.
pub const DISC_LOSS_NAME: &str = "disc";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub loss_name: String,
    pub loss_value: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub mmd: f64,
}

impl MetricsRow {
    pub fn is_discriminator(&self) -> bool {
        self.loss_name == DISC_LOSS_NAME
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.epoch, self.loss_name, self.loss_value, self.d_real, self.d_fake, self.mmd
        )
    }
}

/// Header plus one line per row.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Data("metrics log does not start with the expected header".into()));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad = || Error::Data(format!("metrics line {}: `{line}`", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(MetricsRow {
                step: f[0].parse().map_err(|_| bad())?,
                epoch: f[1].parse().map_err(|_| bad())?,
                loss_name: f[2].to_string(),
                loss_value: num(f[3])?,
                d_real: num(f[4])?,
                d_fake: num(f[5])?,
                mmd: num(f[6])?,
            })
        })
        .collect()
}

/// Everything needed to continue adversarial training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub disc_opt: Adam,
    pub gen_opt: Adam,
    pub stats: FeatureStats,
    pub bandwidths: Option<KernelMixture>,
    pub compressed_bandwidths: Option<KernelMixture>,
    /// Number of completed iterations.
    pub iteration: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig, model: Model) -> Result<Self> {
        config.validate()?;
        if model.cfg != config.model {
            return Err(Error::Config("model dimensions differ from the training configuration".into()));
        }
        model.check_layout()?;
        let adam = || Adam::with_betas(config.lr, config.beta1, config.beta2, config.adam_eps);
        Ok(TrainState {
            disc_opt: adam(),
            gen_opt: adam(),
            stats: FeatureStats::new(config.model.feature_dim(), config.stats_window)?,
            bandwidths: None,
            compressed_bandwidths: None,
            iteration: 0,
            model,
            config,
        })
    }
}

pub fn is_discriminator_step(iteration: u64, k: usize) -> bool {
    iteration.is_multiple_of(k as u64)
}

/// Iterations in a full run over `corpus`.
pub fn total_iterations(config: &TrainConfig, corpus: &EncodedCorpus) -> u64 {
    let full = (config.epochs * corpus.batches_per_epoch(config.batch_size)) as u64;
    config.iterations.map_or(full, |cap| cap.min(full))
}

/// Epoch and batch indices of iteration `i` (1-based).
pub fn iteration_batch(config: &TrainConfig, corpus: &EncodedCorpus, i: u64) -> (u64, Vec<usize>) {
    let b = config.batch_size;
    let bpe = corpus.batches_per_epoch(b) as u64;
    let epoch = (i - 1) / bpe;
    let j = ((i - 1) % bpe) as usize;
    let order = corpus.epoch_order(config.seed, epoch);
    let end = ((j + 1) * b).min(order.len());
    (epoch, order[j * b..end].to_vec())
}

/// Latent codes of iteration `i`.
pub fn iteration_latent(config: &TrainConfig, i: u64, n: usize) -> Tensor {
    let mut rng = indexed_rng(config.seed, Stream::Latent, i);
    sample_latent(&mut rng, n, config.model.latent_dim)
}

/// Median-heuristic kernels from real features of the start of an epoch.
pub fn refresh_bandwidths(state: &mut TrainState, corpus: &EncodedCorpus, epoch: u64) -> Result<()> {
    let cfg = &state.config;
    let order = corpus.epoch_order(cfg.seed, epoch);
    let n = order.len().min(cfg.bandwidth_sample);
    if n < 2 {
        return Err(Error::Data("bandwidth selection needs at least two sentences".into()));
    }
    let batch = corpus.batch(&order[..n]);
    let mut g = Graph::inference();
    let f = state.model.encode_batch(&mut g, &batch)?;
    let source = mmd_source(cfg, f);
    state.bandwidths = Some(median_heuristic_bandwidths(g.value(source))?);
    state.compressed_bandwidths = if cfg.model.compress_dim.is_some() {
        let c = state.model.compress(&mut g, f.act)?;
        Some(median_heuristic_bandwidths(g.value(c))?)
    } else {
        None
    };
    Ok(())
}

fn mmd_source(cfg: &TrainConfig, f: FeaturePair) -> Var {
    match cfg.mmd_features {
        config::FeatureSource::Activated => f.act,
        config::FeatureSource::PreActivation => f.pre,
    }
}

fn mean_col0(t: &Tensor) -> f64 {
    let (r, c) = t.dims2().expect("matrix");
    (0..r).map(|i| t.data()[i * c]).sum::<f64>() / r as f64
}

/// One step's graph: the scalar to descend and the values to log.
struct Step {
    g: Graph,
    descend: Var,
    loss_name: &'static str,
    loss_value: f64,
    d_real: f64,
    d_fake: f64,
    mmd: f64,
    fake_pre: Tensor,
}

struct Encoded {
    real: FeaturePair,
    fake: FeaturePair,
    z: Var,
}

fn encode_both(model: &Model, g: &mut Graph, batch: &SentenceBatch, z: &Tensor, temperature: f64) -> Result<Encoded> {
    let real = model.encode_batch(g, batch)?;
    let z = g.constant(z.clone());
    let roll = model.soft_generate(g, z, batch.t_max, temperature)?;
    let x = model.rollout_sentences(g, &roll)?;
    let fake = model.encode_features(g, x)?;
    Ok(Encoded { real, fake, z })
}

fn kernels(k: &Option<KernelMixture>) -> Result<&KernelMixture> {
    k.as_ref()
        .ok_or_else(|| Error::Config("kernel bandwidths have not been selected".into()))
}

fn discriminator_step(state: &TrainState, batch: &SentenceBatch, z: &Tensor) -> Result<Step> {
    let cfg = &state.config;
    let model = &state.model;
    let mut g = Graph::new();
    g.freeze_prefix(GEN_PREFIX);
    let e = encode_both(model, &mut g, batch, z, cfg.temperature)?;
    let pr = model.class_probs(&mut g, e.real.act)?;
    let pf = model.class_probs(&mut g, e.fake.act)?;
    let gan = gan_loss_soft(&mut g, pr, pf, cfg.soft_labels)?;
    let z_hat = model.reconstruct_latent(&mut g, e.fake.act)?;
    let recon = recon_loss(&mut g, z_hat, e.z)?;
    let (fr, ff) = (mmd_source(cfg, e.real), mmd_source(cfg, e.fake));
    let plain = mmd2(&mut g, fr, ff, kernels(&state.bandwidths)?)?;
    let mmd = if cfg.variant == Variant::MmdL {
        let cr = model.compress(&mut g, e.real.act)?;
        let cf = model.compress(&mut g, e.fake.act)?;
        mmd2(&mut g, cr, cf, kernels(&state.compressed_bandwidths)?)?
    } else {
        plain
    };
    let objective = discriminator_objective(&mut g, gan, recon, mmd, cfg.weights()?)?;
    let descend = g.scale(objective, -1.0);
    Ok(Step {
        loss_name: DISC_LOSS_NAME,
        loss_value: g.value(objective).item(),
        d_real: mean_col0(g.value(pr)),
        d_fake: mean_col0(g.value(pf)),
        mmd: g.value(plain).item(),
        fake_pre: g.value(e.fake.pre).clone(),
        descend,
        g,
    })
}

fn generator_step(state: &mut TrainState, batch: &SentenceBatch, z: &Tensor, variant: Variant) -> Result<Step> {
    let cfg = state.config.clone();
    let model = &state.model;
    let mut g = Graph::new();
    g.freeze_prefix(DISC_PREFIX);
    let e = encode_both(model, &mut g, batch, z, cfg.temperature)?;
    let (fr, ff) = (mmd_source(&cfg, e.real), mmd_source(&cfg, e.fake));
    let loss = match variant {
        Variant::Mmd => mmd2(&mut g, fr, ff, kernels(&state.bandwidths)?)?,
        Variant::MmdL => {
            let cr = model.compress(&mut g, e.real.act)?;
            let cf = model.compress(&mut g, e.fake.act)?;
            mmd2(&mut g, cr, cf, kernels(&state.compressed_bandwidths)?)?
        }
        Variant::Cm => {
            let (mu_r, cov_r) = state.stats.moments(Side::Real)?;
            let d = mu_r.len();
            let (mu_s, cov_s) = state.stats.live_moments(&mut g, e.fake.pre, Side::Synthetic)?;
            let mu_r = g.constant(Tensor::new(vec![1, d], mu_r)?);
            let cov_r = g.constant(cov_r);
            cov_match_loss(&mut g, mu_s, cov_s, mu_r, cov_r)?
        }
        Variant::Mm => mean_match_loss(&mut g, e.real.act, e.fake.act)?,
    };
    let mmd = if variant == Variant::Mmd {
        g.value(loss).item()
    } else {
        mmd2_value(g.value(fr), g.value(ff), kernels(&state.bandwidths)?)?
    };
    let pr = model.class_probs(&mut g, e.real.act)?;
    let pf = model.class_probs(&mut g, e.fake.act)?;
    Ok(Step {
        loss_name: variant.loss_name(),
        loss_value: g.value(loss).item(),
        d_real: mean_col0(g.value(pr)),
        d_fake: mean_col0(g.value(pf)),
        mmd,
        fake_pre: g.value(e.fake.pre).clone(),
        descend: loss,
        g,
    })
}

/// Clips and applies one group's gradients, keeping the PAD embedding at
/// zero.
pub(crate) fn apply_gradients(model: &mut Model, opt: &mut Adam, mut grads: ParamSet, clip: f64, what: &str) -> Result<()> {
    for (name, t) in &grads {
        t.check_finite(&format!("gradient of `{name}` ({what})"))?;
    }
    for name in [EMBED, GEN_EMBED] {
        if let Some(t) = grads.get_mut(name) {
            let k = t.shape()[1];
            t.data_mut()[PAD * k..(PAD + 1) * k].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    clip_gradients(&mut grads, clip)?;
    opt.step(&mut model.params, &grads)?;
    model.pin_pad_embedding();
    for (name, t) in &model.params {
        t.check_finite(&format!("parameter `{name}` ({what})"))?;
    }
    Ok(())
}

/// Runs one iteration and returns its metrics row.
pub fn train_iteration(state: &mut TrainState, corpus: &EncodedCorpus) -> Result<MetricsRow> {
    let i = state.iteration + 1;
    let cfg = state.config.clone();
    let (epoch, indices) = iteration_batch(&cfg, corpus, i);
    let bpe = corpus.batches_per_epoch(cfg.batch_size) as u64;
    if (i - 1).is_multiple_of(bpe) || state.bandwidths.is_none() {
        refresh_bandwidths(state, corpus, epoch)?;
    }
    let batch = corpus.batch(&indices);
    let z = iteration_latent(&cfg, i, batch.size());
    let (real_pre, _) = state.model.features(&batch)?;
    state.stats.update(&real_pre, Side::Real)?;

    let disc = is_discriminator_step(i, cfg.k);
    let mut step = if disc {
        discriminator_step(state, &batch, &z)?
    } else {
        let variant = if epoch < cfg.warmup_epochs as u64 { Variant::Mm } else { cfg.variant };
        generator_step(state, &batch, &z, variant)?
    };
    if !step.loss_value.is_finite() {
        return Err(Error::NonFinite(format!("loss `{}` at step {i}", step.loss_name)));
    }
    step.g.backward(step.descend)?;
    let grads = step.g.param_grads();
    let what = format!("step {i}");
    if disc {
        apply_gradients(&mut state.model, &mut state.disc_opt, grads, cfg.clip_norm, &what)?;
    } else {
        apply_gradients(&mut state.model, &mut state.gen_opt, grads, cfg.clip_norm, &what)?;
    }
    state.stats.update(&step.fake_pre, Side::Synthetic)?;
    state.iteration = i;
    Ok(MetricsRow {
        step: i,
        epoch,
        loss_name: step.loss_name.to_string(),
        loss_value: step.loss_value,
        d_real: step.d_real,
        d_fake: step.d_fake,
        mmd: step.mmd,
    })
}

/// Continues adversarial training up to iteration `until` (default: the
/// configured length), returning the rows of the iterations run.
pub fn train_textgan(corpus: &EncodedCorpus, state: &mut TrainState, until: Option<u64>) -> Result<Vec<MetricsRow>> {
    if corpus.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    if corpus.t_max < state.config.model.max_window() {
        return Err(Error::Config(format!(
            "sentence length {} is shorter than the widest filter {}",
            corpus.t_max,
            state.config.model.max_window()
        )));
    }
    let total = total_iterations(&state.config, corpus);
    let end = until.map_or(total, |u| u.min(total));
    let mut rows = Vec::new();
    while state.iteration < end {
        rows.push(train_iteration(state, corpus)?);
    }
    Ok(rows)
}
