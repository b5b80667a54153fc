//! LSTM sentence generator.
//!
//! The first hidden state is `tanh(z·C)` and the first word is read from it
//! directly. Each later step consumes `[y_prev ; z]`, where `y_prev` is the
//! embedding of the previous word: a table row under hard decoding, or a
//! temperature-softmax mixture of rows under soft decoding.

use rand::Rng;

use crate::corpus::{SentenceBatch, EOS};
use crate::error::{Error, Result};
use crate::model::{Model, EMBED};
use crate::numeric::{first_argmax, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

/// Output of a soft rollout. `inputs` holds the soft word vectors in the
/// discriminator's embedding space, `[B, k]` per step.
#[derive(Clone, Debug)]
pub struct SoftRollout {
    pub inputs: Vec<Var>,
    pub logits: Vec<Var>,
}

/// Codes drawn from the uniform prior on `[−1, 1]^{dim}`, `[n, dim]`.
pub fn sample_latent<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize) -> Tensor {
    let data = (0..n * dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    Tensor::new(vec![n, dim], data).expect("latent shape")
}

impl Model {
    fn check_latent(&self, g: &Graph, z: Var) -> Result<usize> {
        let (b, d) = g.value(z).dims2()?;
        if d != self.cfg.latent_dim {
            return Err(Error::shape(format!(
                "latent code of dimension {d}, model expects {}",
                self.cfg.latent_dim
            )));
        }
        Ok(b)
    }

    /// `h₁ = tanh(z·C)`, zero cell state.
    pub fn init_state(&self, g: &mut Graph, z: Var) -> Result<LstmState> {
        let b = self.check_latent(g, z)?;
        let c_mat = g.bind(&self.params, "gen.init")?;
        let pre = g.matmul(z, c_mat)?;
        let h = g.tanh(pre);
        let c = g.constant(Tensor::zeros(&[b, self.cfg.gen_hidden]));
        Ok(LstmState { h, c })
    }

    /// One LSTM transition on input `[y_prev ; z]` with gates in
    /// (input, forget, output, candidate) order.
    pub fn lstm_step(&self, g: &mut Graph, y_prev: Var, state: LstmState, z: Var) -> Result<LstmState> {
        let hid = self.cfg.gen_hidden;
        let wx = g.bind(&self.params, "gen.lstm.wx")?;
        let wh = g.bind(&self.params, "gen.lstm.wh")?;
        let bias = g.bind(&self.params, "gen.lstm.b")?;
        let x = g.concat_cols(&[y_prev, z])?;
        let from_x = g.matmul(x, wx)?;
        let from_h = g.matmul(state.h, wh)?;
        let gates = g.add(from_x, from_h)?;
        let gates = g.add_row(gates, bias)?;
        let i = g.slice_cols(gates, 0, hid)?;
        let f = g.slice_cols(gates, hid, hid)?;
        let o = g.slice_cols(gates, 2 * hid, hid)?;
        let cand = g.slice_cols(gates, 3 * hid, hid)?;
        let (i, f, o, cand) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o), g.tanh(cand));
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        Ok(LstmState { h, c })
    }

    /// Vocabulary logits `h·V`, `[B, V]`.
    pub fn word_logits(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let v = g.bind(&self.params, "gen.out")?;
        g.matmul(h, v)
    }

    /// Greedy decoding of each row of `z` (`[B, dim z]` or `[dim z]`).
    /// Every sequence ends at its first EOS (included) or at `t_max` words.
    pub fn generate(&self, z: &Tensor, t_max: usize) -> Result<Vec<Vec<usize>>> {
        if t_max == 0 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        let (b, d) = z.dims2()?;
        let z = z.clone().reshape(vec![b, d])?;
        let mut g = Graph::inference();
        let zv = g.constant(z);
        let mut state = self.init_state(&mut g, zv)?;
        let table = g.bind(&self.params, self.cfg.feedback_embedding())?;
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        for t in 0..t_max {
            let logits = self.word_logits(&mut g, state.h)?;
            let lv = g.value(logits);
            let vocab = self.cfg.vocab_size;
            let words: Vec<usize> = (0..b).map(|r| first_argmax(&lv.data()[r * vocab..(r + 1) * vocab])).collect();
            for (r, &w) in words.iter().enumerate() {
                if !done[r] {
                    out[r].push(w);
                    done[r] = w == EOS;
                }
            }
            if t + 1 == t_max || done.iter().all(|d| *d) {
                break;
            }
            let y = g.gather_rows(table, &words)?;
            state = self.lstm_step(&mut g, y, state, zv)?;
        }
        Ok(out)
    }

    /// Differentiable rollout of fixed length `t_max` with soft-argmax
    /// feedback `y = softmax(L · V h)·W_e`.
    pub fn soft_generate(&self, g: &mut Graph, z: Var, t_max: usize, temperature: f64) -> Result<SoftRollout> {
        if !(temperature > 0.0) {
            return Err(Error::Domain(format!(
                "soft-argmax temperature must be positive, got {temperature}"
            )));
        }
        let mut state = self.init_state(g, z)?;
        let disc_table = g.bind(&self.params, EMBED)?;
        let feedback_table = g.bind(&self.params, self.cfg.feedback_embedding())?;
        let mut inputs = Vec::with_capacity(t_max);
        let mut logits = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let l = self.word_logits(g, state.h)?;
            let p = g.softmax_temperature(l, temperature)?;
            let y = g.matmul(p, disc_table)?;
            inputs.push(y);
            logits.push(l);
            if t + 1 < t_max {
                let fb = if feedback_table == disc_table {
                    y
                } else {
                    g.matmul(p, feedback_table)?
                };
                state = self.lstm_step(g, fb, state, z)?;
            }
        }
        Ok(SoftRollout { inputs, logits })
    }

    /// Stacks a soft rollout into the `[B, T, k]` input of the encoder.
    pub fn rollout_sentences(&self, g: &mut Graph, rollout: &SoftRollout) -> Result<Var> {
        g.stack_steps(&rollout.inputs)
    }

    /// Mean cross-entropy of each ground-truth word given its prefix and
    /// the sentence's code, over non-PAD positions.
    pub fn teacher_forced_nll(&self, g: &mut Graph, batch: &SentenceBatch, z: Var) -> Result<Var> {
        let b = self.check_latent(g, z)?;
        if b != batch.size() {
            return Err(Error::shape(format!(
                "{b} latent codes for {} sentences",
                batch.size()
            )));
        }
        let steps = batch.lengths.iter().copied().max().unwrap_or(0);
        let table = g.bind(&self.params, self.cfg.feedback_embedding())?;
        let mut state = self.init_state(g, z)?;
        let mut all_logits = Vec::with_capacity(steps);
        let mut targets = Vec::with_capacity(steps * b);
        for t in 0..steps {
            all_logits.push(self.word_logits(g, state.h)?);
            let words: Vec<usize> = (0..b).map(|r| batch.row(r)[t]).collect();
            targets.extend(
                words
                    .iter()
                    .zip(&batch.lengths)
                    .map(|(&w, &len)| (t < len).then_some(w)),
            );
            if t + 1 < steps {
                let y = g.gather_rows(table, &words)?;
                state = self.lstm_step(g, y, state, z)?;
            }
        }
        if all_logits.is_empty() {
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        let logits = g.concat_rows(&all_logits)?;
        g.cross_entropy(logits, &targets)
    }
}
