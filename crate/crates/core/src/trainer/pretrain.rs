//! Autoencoder and permutation pre-training.
//!
//! The autoencoder encodes a sentence with the CNN and the reconstruction
//! head (`f → ẑ`) and decodes `ẑ` with the LSTM under teacher forcing. The
//! decoder doubles as the AE baseline.

use crate::corpus::{permute_swap, EncodedCorpus, SentenceBatch};
use crate::error::{Error, Result};
use crate::model::{Model, GEN_PREFIX};
use crate::numeric::{Graph, Tensor, Var};
use crate::objectives::{gan_loss_soft, SoftLabels};
use crate::rng::{indexed_rng, Stream};

use super::{apply_gradients, Adam, TrainConfig};

fn encode_codes(model: &Model, g: &mut Graph, batch: &SentenceBatch) -> Result<Var> {
    let f = model.encode_batch(g, batch)?;
    model.reconstruct_latent(g, f.act)
}

/// Latent codes the encoder assigns to a batch.
pub fn autoencoder_codes(model: &Model, batch: &SentenceBatch) -> Result<Tensor> {
    let mut g = Graph::inference();
    let z = encode_codes(model, &mut g, batch)?;
    Ok(g.value(z).clone())
}

/// Greedy reconstruction of every sentence in the corpus.
pub fn reconstruct(model: &Model, corpus: &EncodedCorpus) -> Result<Vec<Vec<usize>>> {
    let all: Vec<usize> = (0..corpus.len()).collect();
    let batch = corpus.batch(&all);
    let z = autoencoder_codes(model, &batch)?;
    model.generate(&z, corpus.t_max)
}

/// Number of sentences reconstructed word for word (through EOS).
pub fn exact_reconstructions(model: &Model, corpus: &EncodedCorpus) -> Result<usize> {
    let out = reconstruct(model, corpus)?;
    Ok(out
        .iter()
        .enumerate()
        .filter(|(i, s)| s.as_slice() == &corpus.rows[*i][..corpus.lengths[*i]])
        .count())
}

/// Token-weighted mean teacher-forced NLL of the autoencoder.
pub fn corpus_nll(model: &Model, corpus: &EncodedCorpus, batch_size: usize) -> Result<f64> {
    let order: Vec<usize> = (0..corpus.len()).collect();
    let (mut total, mut tokens) = (0.0, 0usize);
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = corpus.batch(chunk);
        let mut g = Graph::inference();
        let z = encode_codes(model, &mut g, &batch)?;
        let nll = model.teacher_forced_nll(&mut g, &batch, z)?;
        let n: usize = batch.lengths.iter().sum();
        total += g.value(nll).item() * n as f64;
        tokens += n;
    }
    Ok(total / tokens.max(1) as f64)
}

/// Epoch-by-epoch autoencoder training with its own optimizer.
#[derive(Clone, Debug)]
pub struct AutoencoderTrainer {
    pub opt: Adam,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub epoch: u64,
}

impl AutoencoderTrainer {
    pub fn new(cfg: &TrainConfig) -> Self {
        AutoencoderTrainer {
            opt: Adam::with_betas(cfg.ae_lr, cfg.beta1, cfg.beta2, cfg.adam_eps),
            batch_size: cfg.batch_size,
            clip_norm: cfg.clip_norm,
            seed: cfg.seed,
            epoch: 0,
        }
    }

    /// One pass over the corpus; returns the corpus NLL afterwards.
    pub fn run_epoch(&mut self, model: &mut Model, corpus: &EncodedCorpus) -> Result<f64> {
        let epoch = self.epoch;
        for batch in corpus.minibatches(self.batch_size, self.seed, epoch)? {
            let mut g = Graph::new();
            let z = encode_codes(model, &mut g, &batch)?;
            let nll = model.teacher_forced_nll(&mut g, &batch, z)?;
            let value = g.value(nll).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("autoencoder NLL in epoch {epoch}")));
            }
            g.backward(nll)?;
            let what = format!("autoencoder epoch {epoch}");
            apply_gradients(model, &mut self.opt, g.param_grads(), self.clip_norm, &what)?;
        }
        self.epoch += 1;
        corpus_nll(model, corpus, self.batch_size)
    }
}

/// Trains the CNN-LSTM autoencoder for `cfg.ae_epochs` epochs and returns
/// the NLL after each.
pub fn pretrain_autoencoder(model: &mut Model, corpus: &EncodedCorpus, cfg: &TrainConfig) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(Error::Data("autoencoder pre-training needs a nonempty corpus".into()));
    }
    let mut trainer = AutoencoderTrainer::new(cfg);
    (0..cfg.ae_epochs).map(|_| trainer.run_epoch(model, corpus)).collect()
}

/// Real sentences of one epoch paired with a swapped copy, in shuffled
/// order. Sentences that cannot be tweaked are left out.
pub fn tweaked_pairs(corpus: &EncodedCorpus, seed: u64, epoch: u64) -> Vec<(usize, Vec<usize>)> {
    let mut rng = indexed_rng(seed, Stream::Permute, epoch);
    corpus
        .epoch_order(seed, epoch)
        .into_iter()
        .filter_map(|i| permute_swap(&corpus.rows[i], corpus.lengths[i], &mut rng).map(|row| (i, row)))
        .collect()
}

fn pair_batches(corpus: &EncodedCorpus, pairs: &[(usize, Vec<usize>)]) -> Result<(SentenceBatch, SentenceBatch)> {
    let idx: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let real = corpus.batch(&idx);
    let rows: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.clone()).collect();
    let tweaked = SentenceBatch::from_rows(&rows, &real.lengths)?;
    Ok((real, tweaked))
}

/// Fraction of real and tweaked sentences the classifier puts on the
/// correct side of 0.5.
pub fn discrimination_accuracy(model: &Model, real: &SentenceBatch, tweaked: &SentenceBatch) -> Result<f64> {
    let mut g = Graph::inference();
    let fr = model.encode_batch(&mut g, real)?;
    let ft = model.encode_batch(&mut g, tweaked)?;
    let pr = model.discriminate(&mut g, fr.act)?;
    let pt = model.discriminate(&mut g, ft.act)?;
    let right = g.value(pr).data().iter().filter(|p| **p > 0.5).count()
        + g.value(pt).data().iter().filter(|p| **p < 0.5).count();
    Ok(right as f64 / (real.size() + tweaked.size()) as f64)
}

/// Trains the discriminator to tell real sentences from swapped copies,
/// with one tweaked sentence per real one in every batch. Returns the
/// accuracy on each epoch's pairs after that epoch.
pub fn pretrain_discriminator(model: &mut Model, corpus: &EncodedCorpus, cfg: &TrainConfig) -> Result<Vec<f64>> {
    if tweaked_pairs(corpus, cfg.seed, 0).is_empty() {
        return Err(Error::Config(
            "no sentence has two distinct swappable words; permutation pre-training is impossible".into(),
        ));
    }
    let mut opt = Adam::with_betas(cfg.disc_pretrain_lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut curve = Vec::with_capacity(cfg.disc_pretrain_epochs);
    for epoch in 0..cfg.disc_pretrain_epochs as u64 {
        let pairs = tweaked_pairs(corpus, cfg.seed, epoch);
        for chunk in pairs.chunks(cfg.batch_size) {
            let (real, tweaked) = pair_batches(corpus, chunk)?;
            let mut g = Graph::new();
            g.freeze_prefix(GEN_PREFIX);
            let fr = model.encode_batch(&mut g, &real)?;
            let ft = model.encode_batch(&mut g, &tweaked)?;
            let pr = model.class_probs(&mut g, fr.act)?;
            let pt = model.class_probs(&mut g, ft.act)?;
            let ll = gan_loss_soft(&mut g, pr, pt, SoftLabels::HARD)?;
            if !g.value(ll).item().is_finite() {
                return Err(Error::NonFinite(format!("permutation loss in epoch {epoch}")));
            }
            let loss = g.scale(ll, -1.0);
            g.backward(loss)?;
            let what = format!("permutation epoch {epoch}");
            apply_gradients(model, &mut opt, g.param_grads(), cfg.clip_norm, &what)?;
        }
        let (real, tweaked) = pair_batches(corpus, &pairs)?;
        curve.push(discrimination_accuracy(model, &real, &tweaked)?);
    }
    Ok(curve)
}
