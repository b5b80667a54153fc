//! CNN sentence encoder with classifier, latent-reconstruction and
//! compressing heads.
//!
//! For each window size `h`, a sentence `[T, k]` is unfolded into its
//! `T − h + 1` windows and multiplied by a `(h·k) × p` filter bank, which is
//! the valid convolution of every filter at once. Max-over-time pooling of
//! the raw responses gives the pre-activation features; since `tanh` is
//! monotone, `tanh` of the pooled value equals pooling after activation.

use crate::corpus::SentenceBatch;
use crate::error::{Error, Result};
use crate::model::{conv_b, conv_w, Model, EMBED};
use crate::numeric::{Graph, Tensor, Var};

/// Pooled features before and after the `tanh` activation, each `[B, m·p]`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePair {
    pub pre: Var,
    pub act: Var,
}

impl Model {
    /// Looks up word embeddings: `[B, T, k]`.
    pub fn embed(&self, g: &mut Graph, batch: &SentenceBatch) -> Result<Var> {
        let table = g.bind(&self.params, EMBED)?;
        let rows = g.gather_rows(table, &batch.ids)?;
        g.reshape(rows, vec![batch.size(), batch.t_max, self.cfg.embed_dim])
    }

    /// Encodes `[B, T, k]` embedded sentences into pooled features, in
    /// (window size, filter index) order.
    pub fn encode_features(&self, g: &mut Graph, x: Var) -> Result<FeaturePair> {
        let shape = g.value(x).shape().to_vec();
        let [_, t, k] = shape[..] else {
            return Err(Error::shape(format!("expected [B,T,k] input, found {shape:?}")));
        };
        if k != self.cfg.embed_dim {
            return Err(Error::shape(format!(
                "embedding width {k} but model expects {}",
                self.cfg.embed_dim
            )));
        }
        if t < self.cfg.max_window() {
            return Err(Error::shape(format!(
                "sentence length {t} shorter than window {}; pad before encoding",
                self.cfg.max_window()
            )));
        }
        let mut pooled = Vec::with_capacity(self.cfg.windows.len());
        for &h in &self.cfg.windows {
            let w = g.bind(&self.params, &conv_w(h))?;
            let b = g.bind(&self.params, &conv_b(h))?;
            let cols = g.im2col(x, h)?;
            let conv = g.matmul(cols, w)?;
            let conv = g.add_row(conv, b)?;
            pooled.push(g.segment_max(conv, t - h + 1)?);
        }
        let pre = if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat_cols(&pooled)?
        };
        let act = g.tanh(pre);
        Ok(FeaturePair { pre, act })
    }

    /// Encodes a single `k × T` sentence matrix (columns are word vectors).
    pub fn encode_matrix(&self, g: &mut Graph, x: Var) -> Result<FeaturePair> {
        let (k, t) = g.value(x).dims2()?;
        let xt = g.transpose(x)?;
        let x3 = g.reshape(xt, vec![1, t, k])?;
        self.encode_features(g, x3)
    }

    pub fn encode_batch(&self, g: &mut Graph, batch: &SentenceBatch) -> Result<FeaturePair> {
        let x = self.embed(g, batch)?;
        self.encode_features(g, x)
    }

    fn dense2(&self, g: &mut Graph, prefix: &str, f: Var) -> Result<Var> {
        let w1 = g.bind(&self.params, &format!("{prefix}.w1"))?;
        let b1 = g.bind(&self.params, &format!("{prefix}.b1"))?;
        let w2 = g.bind(&self.params, &format!("{prefix}.w2"))?;
        let b2 = g.bind(&self.params, &format!("{prefix}.b2"))?;
        let hidden = g.matmul(f, w1)?;
        let hidden = g.add_row(hidden, b1)?;
        let hidden = g.sigmoid(hidden);
        let out = g.matmul(hidden, w2)?;
        g.add_row(out, b2)
    }

    /// Class probabilities `[B, 2]`; column 0 is "real", column 1 "fake".
    pub fn class_probs(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let logits = self.dense2(g, "disc.cls", f)?;
        g.softmax_temperature(logits, 1.0)
    }

    /// `D(X)`: probability that each sentence is real, `[B, 1]`.
    pub fn discriminate(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let p = self.class_probs(g, f)?;
        g.slice_cols(p, 0, 1)
    }

    /// Reconstructed latent code `ẑ ∈ (−1, 1)^{dim z}`, `[B, dim z]`.
    pub fn reconstruct_latent(&self, g: &mut Graph, f: Var) -> Result<Var> {
        let out = self.dense2(g, "disc.rec", f)?;
        Ok(g.tanh(out))
    }

    /// Low-dimensional features for the compressed MMD, `[B, d_f]`.
    pub fn compress(&self, g: &mut Graph, f: Var) -> Result<Var> {
        if self.cfg.compress_dim.is_none() {
            return Err(Error::Config("compressing network is not configured".into()));
        }
        self.dense2(g, "disc.cmp", f)
    }

    /// Features of a batch of id sentences, evaluated without a tape.
    pub fn features(&self, batch: &SentenceBatch) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::inference();
        let f = self.encode_batch(&mut g, batch)?;
        Ok((g.value(f.pre).clone(), g.value(f.act).clone()))
    }
}
