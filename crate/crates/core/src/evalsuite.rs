//! Corpus BLEU, Parzen-window scoring, latent interpolation and feature
//! moment diagnostics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use crate::corpus::{EncodedCorpus, SentenceBatch, EOS, PAD};
use crate::error::{Error, Result};
use crate::generator::sample_latent;
use crate::model::Model;
use crate::numeric::{cholesky, Tensor};
use crate::objectives::RIDGE;
use crate::rng::{indexed_rng, Stream};

/// Floor on modified precisions before taking logarithms.
pub const BLEU_EPSILON: f64 = 1e-9;

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-`n` of `candidates` against the whole reference set.
///
/// Each candidate n-gram count is clipped by its largest count in any single
/// reference; the precisions of orders `1..=n` are pooled over candidates and
/// combined by geometric mean (each floored at [`BLEU_EPSILON`]). The
/// brevity penalty compares the total candidate length with the summed
/// closest reference lengths (shorter reference on ties).
pub fn corpus_bleu<T: Eq + Hash + Clone>(candidates: &[Vec<T>], references: &[Vec<T>], n: usize) -> Result<f64> {
    if candidates.is_empty() || references.is_empty() {
        return Err(Error::Data("BLEU needs candidates and references".into()));
    }
    if n == 0 {
        return Err(Error::Config("BLEU order must be at least 1".into()));
    }
    let mut ref_lengths: Vec<usize> = references.iter().map(Vec::len).collect();
    ref_lengths.sort_unstable();
    ref_lengths.dedup();

    let mut log_sum = 0.0;
    for order in 1..=n {
        let mut max_ref: HashMap<Vec<T>, usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, order) {
                let slot = max_ref.entry(g).or_insert(0);
                *slot = (*slot).max(c);
            }
        }
        let (mut matched, mut total) = (0usize, 0usize);
        for c in candidates {
            for (g, count) in ngram_counts(c, order) {
                total += count;
                matched += count.min(max_ref.get(&g).copied().unwrap_or(0));
            }
        }
        let p = if total == 0 { 0.0 } else { matched as f64 / total as f64 };
        log_sum += p.max(BLEU_EPSILON).ln();
    }

    let c: usize = candidates.iter().map(Vec::len).sum();
    if c == 0 {
        return Ok(0.0);
    }
    let r: usize = candidates
        .iter()
        .map(|cand| {
            let len = cand.len();
            *ref_lengths
                .iter()
                .min_by_key(|&&rl| (rl.abs_diff(len), rl))
                .expect("nonempty references")
        })
        .sum();
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / n as f64).exp())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// BLEU-2/3/4 with mean and (population) standard deviation over repeats.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuResult {
    pub orders: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BleuResult {
    /// `scores[r][i]` is the score of repeat `r` at `orders[i]`.
    pub fn from_repeats(orders: &[usize], scores: &[Vec<f64>]) -> Result<Self> {
        if scores.is_empty() || scores.iter().any(|s| s.len() != orders.len()) {
            return Err(Error::Data("BLEU repeats do not match the orders".into()));
        }
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for i in 0..orders.len() {
            let col: Vec<f64> = scores.iter().map(|s| s[i]).collect();
            let (m, s) = mean_std(&col);
            mean.push(m);
            std.push(s);
        }
        Ok(BleuResult {
            orders: orders.to_vec(),
            mean,
            std,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,mean,std\n");
        for i in 0..self.orders.len() {
            let _ = writeln!(out, "{},{},{}", self.orders[i], self.mean[i], self.std[i]);
        }
        out
    }
}

/// Mean Parzen log-likelihood (nats) with spread over repeats.
#[derive(Clone, Debug, PartialEq)]
pub struct KdeResult {
    pub mean_nats: f64,
    pub std: f64,
}

impl KdeResult {
    pub fn from_repeats(values: &[f64]) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("KDE scores must be finite: {values:?}")));
        }
        let (mean_nats, std) = mean_std(values);
        Ok(KdeResult { mean_nats, std })
    }

    pub fn to_csv(&self) -> String {
        format!("mean_nats,std\n{},{}\n", self.mean_nats, self.std)
    }
}

/// `log (1/n) Σ_i N(y; c_i, Σ)` for every query row `y`.
pub fn kde_log_likelihoods(centers: &Tensor, queries: &Tensor, cov: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = centers.dims2()?;
    let (_, dq) = queries.dims2()?;
    if d != dq || cov.dims2()? != (d, d) {
        return Err(Error::shape(format!("KDE dimensions: centers {d}, queries {dq}, cov {:?}", cov.shape())));
    }
    if n == 0 {
        return Err(Error::Data("KDE needs at least one center".into()));
    }
    let l = cholesky(cov)?;
    let l = l.data();
    let log_det: f64 = 2.0 * (0..d).map(|i| l[i * d + i].ln()).sum::<f64>();
    let norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
    let mut out = Vec::with_capacity(queries.dims2()?.0);
    let mut diff = vec![0.0; d];
    let mut exps = vec![0.0; n];
    for q in 0..queries.dims2()?.0 {
        let y = queries.row(q);
        for (i, e) in exps.iter_mut().enumerate() {
            for (k, slot) in diff.iter_mut().enumerate() {
                *slot = y[k] - centers.row(i)[k];
            }
            // Forward substitution: L u = y − c, so the Mahalanobis term is ‖u‖².
            for r in 0..d {
                let s: f64 = (0..r).map(|k| l[r * d + k] * diff[k]).sum();
                diff[r] = (diff[r] - s) / l[r * d + r];
            }
            *e = norm - 0.5 * diff.iter().map(|u| u * u).sum::<f64>();
        }
        let m = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + exps.iter().map(|e| (e - m).exp()).sum::<f64>().ln();
        out.push(lse - (n as f64).ln());
    }
    Ok(out)
}

/// Mean log-likelihood of generated features under a Parzen estimator
/// centered on the real features, with the real-feature covariance (plus
/// ridge) as kernel covariance.
pub fn kde_score(real: &Tensor, generated: &Tensor) -> Result<f64> {
    let (n, d) = real.dims2()?;
    if n < 2 {
        return Err(Error::Data("KDE covariance needs at least two real features".into()));
    }
    if generated.dims2()?.1 != d {
        return Err(Error::shape("KDE feature dimension mismatch"));
    }
    let mut cov = real.covariance()?;
    for i in 0..d {
        cov.data_mut()[i * d + i] += RIDGE;
    }
    let ll = kde_log_likelihoods(real, generated, &cov)?;
    Ok(ll.iter().sum::<f64>() / ll.len().max(1) as f64)
}

/// Decodes `steps` codes evenly spaced on the segment from `z_a` to `z_b`.
pub fn interpolate(model: &Model, z_a: &[f64], z_b: &[f64], steps: usize, t_max: usize) -> Result<Vec<(f64, Vec<usize>)>> {
    if steps < 2 {
        return Err(Error::Config("interpolation needs at least two steps".into()));
    }
    if z_a.len() != z_b.len() {
        return Err(Error::shape("interpolation endpoints differ in dimension"));
    }
    let ts: Vec<f64> = (0..steps).map(|i| i as f64 / (steps - 1) as f64).collect();
    let data: Vec<f64> = ts
        .iter()
        .flat_map(|&t| z_a.iter().zip(z_b).map(move |(a, b)| (1.0 - t) * a + t * b))
        .collect();
    let z = Tensor::new(vec![steps, z_a.len()], data)?;
    let sentences = model.generate(&z, t_max)?;
    Ok(ts.into_iter().zip(sentences).collect())
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Real-versus-generated feature moments: one mean pair per dimension and
/// one covariance pair per `i ≤ j`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentDiagnostics {
    pub mean_pairs: Vec<(f64, f64)>,
    pub cov_pairs: Vec<(usize, usize, f64, f64)>,
    /// Pearson correlation of the mean scatter; NaN when a side is constant.
    pub mean_corr: f64,
    pub cov_corr: f64,
}

impl MomentDiagnostics {
    pub fn mean_csv(&self) -> String {
        let mut out = String::from("dim,real,generated\n");
        for (i, (a, b)) in self.mean_pairs.iter().enumerate() {
            let _ = writeln!(out, "{i},{a},{b}");
        }
        out
    }

    pub fn cov_csv(&self) -> String {
        let mut out = String::from("i,j,real,generated\n");
        for (i, j, a, b) in &self.cov_pairs {
            let _ = writeln!(out, "{i},{j},{a},{b}");
        }
        out
    }

    pub fn corr_csv(&self) -> String {
        format!("table,pearson\nmean,{}\ncov,{}\n", self.mean_corr, self.cov_corr)
    }
}

pub fn moment_diagnostics(real: &Tensor, generated: &Tensor) -> Result<MomentDiagnostics> {
    let (nr, d) = real.dims2()?;
    let (ng, dg) = generated.dims2()?;
    if nr < 2 || ng < 2 {
        return Err(Error::Data("moment diagnostics need two samples per side".into()));
    }
    if d != dg {
        return Err(Error::shape("moment diagnostics dimension mismatch"));
    }
    let (mr, mg) = (real.mean_rows()?, generated.mean_rows()?);
    let (cr, cg) = (real.covariance()?, generated.covariance()?);
    let mean_pairs: Vec<(f64, f64)> = mr.into_iter().zip(mg).collect();
    let cov_pairs: Vec<(usize, usize, f64, f64)> = (0..d)
        .flat_map(|i| (i..d).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, cr.at(i, j), cg.at(i, j)))
        .collect();
    let split = |v: Vec<(f64, f64)>| -> (Vec<f64>, Vec<f64>) { v.into_iter().unzip() };
    let (a, b) = split(mean_pairs.clone());
    let mean_corr = pearson(&a, &b);
    let (a, b) = split(cov_pairs.iter().map(|p| (p.2, p.3)).collect());
    let cov_corr = pearson(&a, &b);
    Ok(MomentDiagnostics {
        mean_pairs,
        cov_pairs,
        mean_corr,
        cov_corr,
    })
}

/// Pads decoded sentences into a batch for feature extraction.
pub fn sentence_batch(sentences: &[Vec<usize>], t_max: usize) -> Result<SentenceBatch> {
    let rows: Vec<Vec<usize>> = sentences
        .iter()
        .map(|s| {
            let mut r: Vec<usize> = s.iter().copied().take(t_max).collect();
            r.resize(t_max, PAD);
            r
        })
        .collect();
    let lengths: Vec<usize> = sentences.iter().map(|s| s.len().clamp(1, t_max)).collect();
    SentenceBatch::from_rows(&rows, &lengths)
}

/// Word ids of a sentence without its EOS.
pub fn strip_eos(sentence: &[usize]) -> Vec<usize> {
    sentence.iter().copied().take_while(|&t| t != EOS).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub repeats: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            repeats: 10,
            samples: 320,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub bleu: BleuResult,
    pub kde: KdeResult,
}

/// Sentences decoded from uniform codes for one evaluation repeat.
pub fn generate_repeat(generator: &Model, t_max: usize, samples: usize, seed: u64, repeat: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = indexed_rng(seed, Stream::Eval, repeat);
    let z = sample_latent(&mut rng, samples, generator.cfg.latent_dim);
    generator.generate(&z, t_max)
}

/// BLEU-2/3/4 against the whole test set and KDE under the frozen
/// `encoder`'s features, over seeded generation repeats.
pub fn evaluate(generator: &Model, encoder: &Model, test: &EncodedCorpus, settings: EvalSettings) -> Result<EvalReport> {
    if settings.repeats == 0 || settings.samples == 0 {
        return Err(Error::Config("evaluation needs at least one repeat and one sample".into()));
    }
    let references: Vec<Vec<usize>> = test.rows.iter().map(|r| strip_eos(r)).collect();
    let all: Vec<usize> = (0..test.len()).collect();
    let (_, real_f) = encoder.features(&test.batch(&all))?;
    let orders = [2, 3, 4];
    let mut bleu = Vec::new();
    let mut kde = Vec::new();
    for r in 0..settings.repeats as u64 {
        let sentences = generate_repeat(generator, test.t_max, settings.samples, settings.seed, r)?;
        let cands: Vec<Vec<usize>> = sentences.iter().map(|s| strip_eos(s)).collect();
        bleu.push(
            orders
                .iter()
                .map(|&n| corpus_bleu(&cands, &references, n))
                .collect::<Result<Vec<f64>>>()?,
        );
        let (_, gen_f) = encoder.features(&sentence_batch(&sentences, test.t_max)?)?;
        kde.push(kde_score(&real_f, &gen_f)?);
    }
    Ok(EvalReport {
        bleu: BleuResult::from_repeats(&orders, &bleu)?,
        kde: KdeResult::from_repeats(&kde)?,
    })
}
