//! Training objectives.
//!
//! All losses are built on a [`Graph`] so they can be differentiated with
//! respect to the synthetic-side features. The kernel is the isotropic
//! Gaussian `k(x, y) = exp(−‖x − y‖² / (2σ))`, averaged over a mixture of
//! bandwidths.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{cholesky, pairwise_sq_dist, Graph, Tensor, Var};

/// Probabilities are clamped here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-7;
/// Ridge added to covariance estimates before inversion.
pub const RIDGE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelMixture {
    pub bandwidths: Vec<f64>,
}

impl KernelMixture {
    pub fn new(bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() || bandwidths.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!(
                "bandwidths must be positive and finite: {bandwidths:?}"
            )));
        }
        Ok(KernelMixture { bandwidths })
    }

    pub fn single(sigma: f64) -> Result<Self> {
        Self::new(vec![sigma])
    }

    /// Mixture kernel value for two points.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        self.eval_sq_dist(d2)
    }

    pub fn eval_sq_dist(&self, d2: f64) -> f64 {
        let total: f64 = self.bandwidths.iter().map(|s| (-d2 / (2.0 * s)).exp()).sum();
        total / self.bandwidths.len() as f64
    }
}

/// Generator objective variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Kernel MMD² on the full feature vectors.
    Mmd,
    /// Kernel MMD² on compressed features.
    MmdL,
    /// Gaussian covariance matching on pre-activation features.
    Cm,
    /// Squared distance between feature means.
    Mm,
}

impl Variant {
    /// Name written to the metrics log.
    pub fn loss_name(self) -> &'static str {
        match self {
            Variant::Mmd => "mmd",
            Variant::MmdL => "mmd_l",
            Variant::Cm => "cm",
            Variant::Mm => "mean_match",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Mmd => "MMD",
            Variant::MmdL => "MMD-L",
            Variant::Cm => "CM",
            Variant::Mm => "MM",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('_', "-").as_str() {
            "MMD" => Ok(Variant::Mmd),
            "MMD-L" => Ok(Variant::MmdL),
            "CM" => Ok(Variant::Cm),
            "MM" => Ok(Variant::Mm),
            _ => Err(Error::Config(format!(
                "unknown loss variant `{s}` (expected MMD, MMD-L, CM or MM)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub mmd: f64,
}

impl LossWeights {
    pub fn new(recon: f64, mmd: f64) -> Result<Self> {
        if !(recon >= 0.0) || !(mmd >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative, got λ_r={recon}, λ_m={mmd}"
            )));
        }
        Ok(LossWeights { recon, mmd })
    }
}

/// Discriminator targets for the real and fake classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftLabels {
    pub real: f64,
    pub fake: f64,
}

impl SoftLabels {
    pub const HARD: SoftLabels = SoftLabels { real: 1.0, fake: 0.0 };
}

fn check_probs(g: &Graph, v: Var, what: &str) -> Result<()> {
    let (_, c) = g.value(v).dims2()?;
    if c != 1 {
        return Err(Error::shape(format!("{what} must be a column of probabilities")));
    }
    Ok(())
}

/// `mean log D(real) + mean log(1 − D(fake))` with probabilities clamped at
/// [`PROB_FLOOR`].
pub fn gan_loss(g: &mut Graph, d_real: Var, d_fake: Var) -> Result<Var> {
    check_probs(g, d_real, "D(real)")?;
    check_probs(g, d_fake, "D(fake)")?;
    let log_real = g.log_clamped(d_real, PROB_FLOOR);
    let neg = g.scale(d_fake, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let log_fake = g.log_clamped(one_minus, PROB_FLOOR);
    let a = g.mean(log_real);
    let b = g.mean(log_fake);
    g.add(a, b)
}

/// GAN objective on two-class probabilities `[B, 2]` (real, fake) with soft
/// targets: the log-likelihood of `labels.real` on real sentences and of
/// `labels.fake` on synthetic ones. Equals [`gan_loss`] for hard labels.
pub fn gan_loss_soft(g: &mut Graph, real_probs: Var, fake_probs: Var, labels: SoftLabels) -> Result<Var> {
    let side = |g: &mut Graph, probs: Var, target: f64| -> Result<Var> {
        let (b, c) = g.value(probs).dims2()?;
        if c != 2 {
            return Err(Error::shape("class probabilities must have two columns"));
        }
        let logp = g.log_clamped(probs, PROB_FLOOR);
        let weights = g.constant(Tensor::new(vec![2, 1], vec![target, 1.0 - target])?);
        let per_row = g.matmul(logp, weights)?;
        let s = g.sum(per_row);
        Ok(g.scale(s, 1.0 / b as f64))
    };
    let a = side(g, real_probs, labels.real)?;
    let b = side(g, fake_probs, labels.fake)?;
    g.add(a, b)
}

/// Mean over the batch of `‖ẑ − z‖²`.
pub fn recon_loss(g: &mut Graph, z_hat: Var, z: Var) -> Result<Var> {
    let diff = g.sub(z_hat, z)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    let (b, _) = g.value(z_hat).dims2()?;
    Ok(g.scale(total, 1.0 / b as f64))
}

/// Biased MMD² estimate between the rows of `x` (`n × d`) and `y` (`m × d`),
/// computed as the quadratic form `wᵀ K w` over the joint Gram matrix with
/// `w = (1/n, …, −1/m, …)`, floored at zero.
pub fn mmd2(g: &mut Graph, x: Var, y: Var, kernels: &KernelMixture) -> Result<Var> {
    let (n, d) = g.value(x).dims2()?;
    let (m, d2) = g.value(y).dims2()?;
    if d != d2 {
        return Err(Error::shape(format!("feature dimension {d} vs {d2}")));
    }
    if n == 0 || m == 0 {
        return Err(Error::shape("mmd2 needs at least one sample per side"));
    }
    let joint = g.concat_rows(&[x, y])?;
    let dist = g.pairwise_sq_dist(joint, joint)?;
    let mut gram = None;
    for &s in &kernels.bandwidths {
        let scaled = g.scale(dist, -1.0 / (2.0 * s));
        let k = g.exp(scaled);
        gram = Some(match gram {
            None => k,
            Some(acc) => g.add(acc, k)?,
        });
    }
    let gram = g.scale(gram.expect("non-empty mixture"), 1.0 / kernels.bandwidths.len() as f64);
    let weights: Vec<f64> = (0..n).map(|_| 1.0 / n as f64).chain((0..m).map(|_| -1.0 / m as f64)).collect();
    let w_col = g.constant(Tensor::new(vec![n + m, 1], weights.clone())?);
    let w_row = g.constant(Tensor::new(vec![1, n + m], weights)?);
    let left = g.matmul(w_row, gram)?;
    let q = g.matmul(left, w_col)?;
    let q = g.reshape(q, vec![])?;
    // The quadratic form is a squared norm; cancellation can leave it a few
    // ulps below zero.
    Ok(g.map(q, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 }))
}

/// [`mmd2`] on plain tensors.
pub fn mmd2_value(x: &Tensor, y: &Tensor, kernels: &KernelMixture) -> Result<f64> {
    let mut g = Graph::inference();
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let out = mmd2(&mut g, xv, yv, kernels)?;
    Ok(g.value(out).item())
}

/// Median of the pairwise squared distances between distinct rows.
pub fn median_sq_distance(features: &Tensor) -> Result<f64> {
    let (n, _) = features.dims2()?;
    if n < 2 {
        return Err(Error::Data("median heuristic needs at least two samples".into()));
    }
    let dist = pairwise_sq_dist(features, features)?;
    let mut pairs: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| dist.at(i, j))
        .collect();
    pairs.sort_by(f64::total_cmp);
    let mid = pairs.len() / 2;
    Ok(if pairs.len() % 2 == 1 {
        pairs[mid]
    } else {
        0.5 * (pairs[mid - 1] + pairs[mid])
    })
}

/// Five bandwidths `{M/8, M/4, M/2, M, 2M}` around the median squared
/// distance `M` of the sample; all ones when `M = 0`.
pub fn median_heuristic_bandwidths(features: &Tensor) -> Result<KernelMixture> {
    let m = median_sq_distance(features)?;
    if !(m > 0.0) {
        return KernelMixture::new(vec![1.0; 5]);
    }
    KernelMixture::new([0.125, 0.25, 0.5, 1.0, 2.0].iter().map(|f| f * m).collect())
}

/// `‖mean(F) − mean(F̃)‖²`.
pub fn mean_match_loss(g: &mut Graph, real: Var, synthetic: Var) -> Result<Var> {
    let a = g.mean_rows(real)?;
    let b = g.mean_rows(synthetic)?;
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::shape("mean_match_loss dimension mismatch"));
    }
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.sum(sq))
}

/// Attempts a Cholesky factorization, reporting the failing pivot.
pub fn check_positive_definite(m: &Tensor, what: &str) -> Result<()> {
    match cholesky(m) {
        Ok(_) => Ok(()),
        Err(Error::Numerical(msg)) => Err(Error::Numerical(format!("{what} is {msg}"))),
        Err(e) => Err(e),
    }
}

/// `tr(Σ̃⁻¹Σ + Σ⁻¹Σ̃) + (μ̃ − μ)ᵀ(Σ̃⁻¹ + Σ⁻¹)(μ̃ − μ)`.
///
/// Means are `1 × d` rows; covariances `d × d`. Any argument may live on the
/// graph; the real side is usually a constant.
pub fn cov_match_loss(g: &mut Graph, mu_syn: Var, cov_syn: Var, mu_real: Var, cov_real: Var) -> Result<Var> {
    check_positive_definite(g.value(cov_syn), "synthetic covariance")?;
    check_positive_definite(g.value(cov_real), "real covariance")?;
    let (_, d) = g.value(mu_syn).dims2()?;
    if g.value(cov_syn).dims2()? != (d, d) || g.value(cov_real).dims2()? != (d, d) || g.value(mu_real).dims2()? != (1, d) {
        return Err(Error::shape("cov_match_loss dimension mismatch"));
    }
    let inv_syn = g.inverse(cov_syn)?;
    let inv_real = g.inverse(cov_real)?;
    let a = g.matmul(inv_syn, cov_real)?;
    let b = g.matmul(inv_real, cov_syn)?;
    let ta = g.trace(a)?;
    let tb = g.trace(b)?;
    let traces = g.add(ta, tb)?;
    let delta = g.sub(mu_syn, mu_real)?;
    let precision = g.add(inv_syn, inv_real)?;
    let dt = g.transpose(delta)?;
    let left = g.matmul(delta, precision)?;
    let quad = g.matmul(left, dt)?;
    let quad = g.reshape(quad, vec![])?;
    g.add(traces, quad)
}

/// [`cov_match_loss`] on plain tensors.
pub fn cov_match_value(mu_syn: &[f64], cov_syn: &Tensor, mu_real: &[f64], cov_real: &Tensor) -> Result<f64> {
    let mut g = Graph::inference();
    let ms = g.constant(Tensor::new(vec![1, mu_syn.len()], mu_syn.to_vec())?);
    let cs = g.constant(cov_syn.clone());
    let mr = g.constant(Tensor::new(vec![1, mu_real.len()], mu_real.to_vec())?);
    let cr = g.constant(cov_real.clone());
    let out = cov_match_loss(&mut g, ms, cs, mr, cr)?;
    Ok(g.value(out).item())
}

/// Which data stream a feature batch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Real,
    Synthetic,
}

/// Sliding-window Gaussian sufficient statistics of real and synthetic
/// features over the most recent `window` minibatches. Before any batch
/// arrives a side reports zero mean and identity covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub dim: usize,
    pub window: usize,
    pub ridge: f64,
    real: VecDeque<Tensor>,
    synthetic: VecDeque<Tensor>,
}

impl FeatureStats {
    pub fn new(dim: usize, window: usize) -> Result<Self> {
        if window == 0 || dim == 0 {
            return Err(Error::Config("feature statistics need positive window and dimension".into()));
        }
        Ok(FeatureStats {
            dim,
            window,
            ridge: RIDGE,
            real: VecDeque::new(),
            synthetic: VecDeque::new(),
        })
    }

    /// Rebuilds statistics from stored windows, oldest batch first.
    pub fn from_batches(dim: usize, window: usize, ridge: f64, real: Vec<Tensor>, synthetic: Vec<Tensor>) -> Result<Self> {
        let mut stats = FeatureStats::new(dim, window)?;
        if !(ridge >= 0.0) {
            return Err(Error::Config(format!("ridge must be nonnegative, got {ridge}")));
        }
        stats.ridge = ridge;
        if real.len() > window || synthetic.len() > window {
            return Err(Error::Config("more stored batches than the window holds".into()));
        }
        for t in &real {
            stats.update(t, Side::Real)?;
        }
        for t in &synthetic {
            stats.update(t, Side::Synthetic)?;
        }
        Ok(stats)
    }

    fn side(&self, side: Side) -> &VecDeque<Tensor> {
        match side {
            Side::Real => &self.real,
            Side::Synthetic => &self.synthetic,
        }
    }

    fn side_mut(&mut self, side: Side) -> &mut VecDeque<Tensor> {
        match side {
            Side::Real => &mut self.real,
            Side::Synthetic => &mut self.synthetic,
        }
    }

    /// Batches currently held for `side`, oldest first.
    pub fn batches(&self, side: Side) -> impl Iterator<Item = &Tensor> {
        self.side(side).iter()
    }

    pub fn update(&mut self, batch: &Tensor, side: Side) -> Result<()> {
        let (_, d) = batch.dims2()?;
        if d != self.dim {
            return Err(Error::shape(format!(
                "feature batch of width {d}, statistics track {}",
                self.dim
            )));
        }
        let window = self.window;
        let q = self.side_mut(side);
        q.push_back(batch.clone());
        while q.len() > window {
            q.pop_front();
        }
        Ok(())
    }

    /// Window mean and ridge-regularized covariance of one side.
    pub fn moments(&self, side: Side) -> Result<(Vec<f64>, Tensor)> {
        let q = self.side(side);
        if q.is_empty() {
            return Ok((vec![0.0; self.dim], Tensor::identity(self.dim)));
        }
        let parts: Vec<&Tensor> = q.iter().collect();
        let all = Tensor::concat_rows(&parts)?;
        let mean = all.mean_rows()?;
        let mut cov = all.covariance()?;
        for i in 0..self.dim {
            cov.data_mut()[i * self.dim + i] += self.ridge;
        }
        Ok((mean, cov))
    }

    /// Mean `[1, d]` and covariance `[d, d]` on the graph, over the newest
    /// `window − 1` stored batches of `side` plus the live batch `current`.
    pub fn live_moments(&self, g: &mut Graph, current: Var, side: Side) -> Result<(Var, Var)> {
        let q = self.side(side);
        let keep = q.len().min(self.window - 1);
        let mut parts: Vec<Var> = q.iter().skip(q.len() - keep).map(|t| g.constant(t.clone())).collect();
        parts.push(current);
        let all = if parts.len() == 1 { current } else { g.concat_rows(&parts)? };
        let (n, d) = g.value(all).dims2()?;
        if d != self.dim {
            return Err(Error::shape("live feature batch width mismatch"));
        }
        let mu = g.mean_rows(all)?;
        let neg = g.scale(mu, -1.0);
        let centered = g.add_row(all, neg)?;
        let ct = g.transpose(centered)?;
        let cov = g.matmul(ct, centered)?;
        let cov = g.scale(cov, 1.0 / n as f64);
        let ridge = g.constant(Tensor::identity(d).map(|v| v * self.ridge));
        let cov = g.add(cov, ridge)?;
        Ok((mu, cov))
    }
}

/// `L_D = L_GAN − λ_r·L_recon + λ_m·L_MMD²`, to be maximized by the
/// discriminator.
pub fn discriminator_objective(g: &mut Graph, gan: Var, recon: Var, mmd: Var, weights: LossWeights) -> Result<Var> {
    let r = g.scale(recon, -weights.recon);
    let m = g.scale(mmd, weights.mmd);
    let partial = g.add(gan, r)?;
    g.add(partial, m)
}

/// Candidate generator losses computed on one batch; only the one selected
/// by the variant needs to be present.
#[derive(Clone, Copy, Debug, Default)]
pub struct GeneratorParts {
    pub mmd: Option<Var>,
    pub mmd_compressed: Option<Var>,
    pub cov_match: Option<Var>,
    pub mean_match: Option<Var>,
}

pub fn generator_objective(parts: GeneratorParts, variant: Variant) -> Result<Var> {
    let chosen = match variant {
        Variant::Mmd => parts.mmd,
        Variant::MmdL => parts.mmd_compressed,
        Variant::Cm => parts.cov_match,
        Variant::Mm => parts.mean_match,
    };
    chosen.ok_or_else(|| Error::Config(format!("loss for variant {variant} was not computed")))
}
