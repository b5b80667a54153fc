//! Acceptance criteria. Each test writes one `PASS`/`FAIL` line to stderr
//! (bypassing libtest's capture) and then asserts on the outcome.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use textgan::corpus::{toy_grammar, EncodedCorpus, SentenceBatch, Vocabulary, EOS};
use textgan::evalsuite::{corpus_bleu, kde_log_likelihoods, kde_score, moment_diagnostics, sentence_batch};
use textgan::generator::sample_latent;
use textgan::model::{Model, ModelConfig, EMBED};
use textgan::numeric::{first_argmax, grad_check, GradCheckReport};
use textgan::objectives::{
    cov_match_loss, gan_loss, mean_match_loss, median_heuristic_bandwidths, mmd2, mmd2_value, recon_loss,
    KernelMixture, Variant,
};
use textgan::trainer::{
    encode_checkpoint, decode_checkpoint, metrics_csv, pretrain_autoencoder, pretrain_discriminator,
    train_textgan, AutoencoderTrainer, TrainConfig, TrainState,
};
use textgan::{Graph, Result, Tensor, Var};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

type Outcome = std::result::Result<String, String>;

fn run(id: u32, title: &str, limit: Option<Duration>, body: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let mut outcome = body();
    let elapsed = start.elapsed();
    if let (Ok(detail), Some(limit)) = (&outcome, limit) {
        if elapsed > limit {
            outcome = Err(format!("{detail}; took {elapsed:.1?}, limit {limit:?}"));
        }
    }
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d.as_str()),
        Err(d) => ("FAIL", d.as_str()),
    };
    let _ = writeln!(
        std::io::stderr(),
        "acceptance {id:>2} {tag}: {title} ({elapsed:.2?}) {detail}"
    );
    if let Err(detail) = outcome {
        panic!("criterion {id} failed: {detail}");
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn spd(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    let m = random(rng, &[d, d]);
    let mut s = m.matmul(&m.transpose().unwrap()).unwrap();
    for i in 0..d {
        s.data_mut()[i * d + i] += 0.5;
    }
    s
}

/// Weighted sum with fixed random weights, so every output entry gets a
/// distinct upstream gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(random(&mut rng, &shape));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn mini_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        embed_dim: 8,
        windows: vec![2, 3],
        filters: 4,
        disc_hidden: 16,
        enc_hidden: 16,
        gen_hidden: 16,
        latent_dim: 8,
        compress_dim: None,
        share_embedding: true,
    }
}

/// A mini model whose output layer is random rather than zero.
fn mini_model(seed: u64) -> Model {
    let mut model = Model::init(mini_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in model.param_mut("gen.out").unwrap().data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    model
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, t: usize, vocab: usize) -> SentenceBatch {
    let rows: Vec<Vec<usize>> = (0..b).map(|_| (0..t).map(|_| rng.gen_range(3..vocab)).collect()).collect();
    SentenceBatch::from_rows(&rows, &vec![t; b]).unwrap()
}

type Case = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

fn primitive_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Tensor, Case)> {
    let a = random(rng, &[3, 4]);
    let b = random(rng, &[4, 2]);
    let c = random(rng, &[3, 4]);
    let row = random(rng, &[4]);
    let seq = random(rng, &[2, 6]);
    let filt = random(rng, &[2, 3]);
    let bias = random(rng, &[4]);
    let other = random(rng, &[4, 2]);
    let mut cases: Vec<(&'static str, Tensor, Case)> = Vec::new();
    {
        let b = b.clone();
        cases.push(("matmul lhs", a.clone(), Box::new(move |g, x| {
            let k = g.constant(b.clone());
            let y = g.matmul(x, k)?;
            project(g, y, 1)
        })));
    }
    {
        let a = a.clone();
        cases.push(("matmul rhs", b.clone(), Box::new(move |g, x| {
            let k = g.constant(a.clone());
            let y = g.matmul(k, x)?;
            project(g, y, 2)
        })));
    }
    {
        let c = c.clone();
        cases.push(("add", a.clone(), Box::new(move |g, x| {
            let k = g.constant(c.clone());
            let y = g.add(x, k)?;
            let y = g.mul(y, y)?;
            project(g, y, 3)
        })));
    }
    {
        let c = c.clone();
        cases.push(("sub", a.clone(), Box::new(move |g, x| {
            let k = g.constant(c.clone());
            let y = g.sub(k, x)?;
            let y = g.mul(y, y)?;
            project(g, y, 4)
        })));
    }
    {
        let c = c.clone();
        cases.push(("mul", a.clone(), Box::new(move |g, x| {
            let k = g.constant(c.clone());
            let y = g.mul(x, k)?;
            project(g, y, 5)
        })));
    }
    {
        let a = a.clone();
        cases.push(("add_row", row, Box::new(move |g, r| {
            let k = g.constant(a.clone());
            let y = g.add_row(k, r)?;
            let y = g.tanh(y);
            project(g, y, 6)
        })));
    }
    cases.push(("scale/add_scalar", a.clone(), Box::new(|g, x| {
        let y = g.scale(x, -1.7);
        let y = g.add_scalar(y, 0.3);
        let y = g.mul(y, y)?;
        project(g, y, 7)
    })));
    cases.push(("tanh", a.clone(), Box::new(|g, x| {
        let y = g.tanh(x);
        project(g, y, 8)
    })));
    cases.push(("sigmoid", a.clone(), Box::new(|g, x| {
        let y = g.sigmoid(x);
        project(g, y, 9)
    })));
    cases.push(("exp", a.clone(), Box::new(|g, x| {
        let y = g.exp(x);
        project(g, y, 10)
    })));
    cases.push(("log", a.map(|v| v.abs() + 0.5), Box::new(|g, x| {
        let y = g.log_clamped(x, 1e-7);
        project(g, y, 11)
    })));
    cases.push(("map", a.clone(), Box::new(|g, x| {
        let y = g.map(x, f64::sin, |x, _| x.cos());
        project(g, y, 12)
    })));
    cases.push(("softmax_temperature", a.clone(), Box::new(|g, x| {
        let y = g.softmax_temperature(x, 2.5)?;
        project(g, y, 13)
    })));
    cases.push(("l2_norm", a.clone(), Box::new(|g, x| Ok(g.l2_norm(x)))));
    cases.push(("transpose", a.clone(), Box::new(|g, x| {
        let y = g.transpose(x)?;
        project(g, y, 14)
    })));
    cases.push(("reshape", a.clone(), Box::new(|g, x| {
        let y = g.reshape(x, vec![2, 6])?;
        let y = g.sigmoid(y);
        project(g, y, 15)
    })));
    cases.push(("slice/concat", a.clone(), Box::new(|g, x| {
        let l = g.slice_cols(x, 0, 1)?;
        let r = g.slice_cols(x, 1, 3)?;
        let y = g.concat_cols(&[r, l, r])?;
        let y = g.concat_rows(&[y, y])?;
        let y = g.tanh(y);
        project(g, y, 16)
    })));
    cases.push(("sum/mean/mean_rows", a.clone(), Box::new(|g, x| {
        let m = g.mean_rows(x)?;
        let m = g.mul(m, m)?;
        let s = g.sum(m);
        let t = g.mean(x);
        let t = g.mul(t, t)?;
        g.add(s, t)
    })));
    cases.push(("max_over_time", random(rng, &[3, 5]), Box::new(|g, x| {
        let (y, _) = g.max_over_time(x)?;
        let y = g.tanh(y);
        project(g, y, 17)
    })));
    cases.push(("segment_max", random(rng, &[6, 3]), Box::new(|g, x| {
        let y = g.segment_max(x, 3)?;
        project(g, y, 18)
    })));
    cases.push(("stack_steps/im2col", random(rng, &[2, 3]), Box::new(|g, x| {
        let s1 = g.tanh(x);
        let s2 = g.scale(x, -0.7);
        let s3 = g.sigmoid(x);
        let st = g.stack_steps(&[s1, s2, s3, s1])?;
        let y = g.im2col(st, 2)?;
        project(g, y, 19)
    })));
    cases.push(("gather_rows", random(rng, &[5, 3]), Box::new(|g, x| {
        let y = g.gather_rows(x, &[4, 0, 4, 2])?;
        let y = g.tanh(y);
        project(g, y, 20)
    })));
    cases.push(("pairwise_sq_dist", random(rng, &[3, 2]), Box::new(move |g, x| {
        let o = g.constant(other.clone());
        let d = g.pairwise_sq_dist(x, o)?;
        let e = g.pairwise_sq_dist(x, x)?;
        let s = project(g, d, 21)?;
        let t = project(g, e, 22)?;
        g.add(s, t)
    })));
    cases.push(("inverse/trace", spd(rng, 3), Box::new(|g, x| {
        let inv = g.inverse(x)?;
        let t = g.trace(inv)?;
        let p = project(g, inv, 23)?;
        g.add(t, p)
    })));
    cases.push(("cross_entropy", a.clone(), Box::new(|g, x| {
        g.cross_entropy(x, &[Some(1), None, Some(3)])
    })));
    {
        let (f, b) = (filt.clone(), bias.clone());
        cases.push(("conv1d input", seq.clone(), Box::new(move |g, x| {
            let w = g.constant(f.clone());
            let bb = g.constant(b.clone());
            let y = g.conv1d_valid(x, w, bb)?;
            let y = g.tanh(y);
            project(g, y, 24)
        })));
    }
    {
        let (s, b) = (seq.clone(), bias.clone());
        cases.push(("conv1d filter", filt.clone(), Box::new(move |g, w| {
            let x = g.constant(s.clone());
            let bb = g.constant(b.clone());
            let y = g.conv1d_valid(x, w, bb)?;
            let y = g.tanh(y);
            project(g, y, 25)
        })));
    }
    cases.push(("conv1d bias", bias, Box::new(move |g, b| {
        let x = g.constant(seq.clone());
        let w = g.constant(filt.clone());
        let y = g.conv1d_valid(x, w, b)?;
        let y = g.tanh(y);
        project(g, y, 26)
    })));
    cases
}

fn checked(name: &str, report: Result<GradCheckReport>, worst: &mut f64) -> std::result::Result<(), String> {
    let report = report.map_err(|e| format!("{name}: {e}"))?;
    *worst = worst.max(report.max_rel_error);
    ensure(report.passed(), || format!("{name}: {report}"))
}

#[test]
fn criterion_01_gradient_integrity() {
    run(1, "gradient integrity", Some(Duration::from_secs(60)), || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst: f64 = 0.0;
        let cases = primitive_cases(&mut rng);
        let n_primitives = cases.len();
        for (name, theta, f) in cases {
            checked(name, grad_check(|g, x| f(g, x), &theta, EPS, TOL), &mut worst)?;
        }

        let t = 6;
        let b = 3;
        for seed in 0..3u64 {
            let model = mini_model(100 + seed);
            let cfg = &model.cfg;
            let real = random_batch(&mut rng, 4, t, cfg.vocab_size);
            let (_, real_f) = model.features(&real).unwrap();
            let kernels = median_heuristic_bandwidths(&real_f).unwrap();

            let z0 = random(&mut rng, &[b, cfg.latent_dim]);
            let path_a = |g: &mut Graph, z: Var| -> Result<Var> {
                let roll = model.soft_generate(g, z, t, 5.0)?;
                let x = model.rollout_sentences(g, &roll)?;
                let f = model.encode_features(g, x)?;
                let r = g.constant(real_f.clone());
                mmd2(g, f.act, r, &kernels)
            };
            checked("z → soft_generate → encode → mmd2", grad_check(path_a, &z0, EPS, TOL), &mut worst)?;

            let f0 = random(&mut rng, &[b, cfg.feature_dim()]);
            let target = random(&mut rng, &[b, cfg.latent_dim]);
            let path_b = |g: &mut Graph, f: Var| -> Result<Var> {
                let z_hat = model.reconstruct_latent(g, f)?;
                let z = g.constant(target.clone());
                recon_loss(g, z_hat, z)
            };
            checked("f → reconstruct_latent → recon", grad_check(path_b, &f0, EPS, TOL), &mut worst)?;

            let x0 = random(&mut rng, &[b, t, cfg.embed_dim]);
            let fake = random(&mut rng, &[b, t, cfg.embed_dim]);
            let path_c = |g: &mut Graph, x: Var| -> Result<Var> {
                let fr = model.encode_features(g, x)?;
                let xf = g.constant(fake.clone());
                let ff = model.encode_features(g, xf)?;
                let dr = model.discriminate(g, fr.act)?;
                let df = model.discriminate(g, ff.act)?;
                gan_loss(g, dr, df)
            };
            checked("X → encode → discriminate → gan", grad_check(path_c, &x0, EPS, TOL), &mut worst)?;
            let path_c_fake = |g: &mut Graph, x: Var| -> Result<Var> {
                let xr = g.constant(x0.clone());
                let fr = model.encode_features(g, xr)?;
                let ff = model.encode_features(g, x)?;
                let dr = model.discriminate(g, fr.act)?;
                let df = model.discriminate(g, ff.act)?;
                gan_loss(g, dr, df)
            };
            checked("X̃ → encode → discriminate → gan", grad_check(path_c_fake, &fake, EPS, TOL), &mut worst)?;
        }
        Ok(format!("{n_primitives} primitives, 3 composite paths × 3 models; worst rel. err {worst:.2e}"))
    });
}

/// Direct double loop over every pair, each kernel evaluated on its own.
fn mmd2_oracle(x: &Tensor, y: &Tensor, bandwidths: &[f64]) -> f64 {
    let k = |a: &[f64], b: &[f64]| -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
        bandwidths.iter().map(|s| (-d2 / (2.0 * s)).exp()).sum::<f64>() / bandwidths.len() as f64
    };
    let (n, m) = (x.shape()[0], y.shape()[0]);
    let mut xx = 0.0;
    for i in 0..n {
        for j in 0..n {
            xx += k(x.row(i), x.row(j));
        }
    }
    let mut yy = 0.0;
    for i in 0..m {
        for j in 0..m {
            yy += k(y.row(i), y.row(j));
        }
    }
    let mut xy = 0.0;
    for i in 0..n {
        for j in 0..m {
            xy += k(x.row(i), y.row(j));
        }
    }
    xx / (n * n) as f64 + yy / (m * m) as f64 - 2.0 * xy / (n * m) as f64
}

#[test]
fn criterion_02_mmd_oracle() {
    run(2, "MMD oracle equivalence", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst: f64 = 0.0;
        for case in 0..50 {
            let n = rng.gen_range(1..=16);
            let m = rng.gen_range(1..=16);
            let d = rng.gen_range(1..=8);
            let x = random(&mut rng, &[n, d]);
            let y = random(&mut rng, &[m, d]);
            let bw: Vec<f64> = (0..rng.gen_range(1..=5)).map(|_| rng.gen_range(0.1..4.0)).collect();
            let kernels = KernelMixture::new(bw.clone()).unwrap();
            let fast = mmd2_value(&x, &y, &kernels).unwrap();
            let slow = mmd2_oracle(&x, &y, &bw);
            worst = worst.max((fast - slow).abs());
            ensure((fast - slow).abs() <= 1e-10, || format!("case {case}: {fast} vs oracle {slow}"))?;
            ensure(fast >= 0.0, || format!("case {case}: negative MMD² {fast}"))?;
            let same = mmd2_value(&x, &x, &kernels).unwrap();
            ensure(same >= 0.0 && same.abs() <= 1e-12, || format!("case {case}: MMD²(x, x) = {same}"))?;
        }
        let k = KernelMixture::single(0.5).unwrap();
        let col = |v: &[f64]| Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap();
        let a = mmd2_value(&col(&[0.0]), &col(&[1.0]), &k).unwrap();
        let b = mmd2_value(&col(&[0.0, 2.0]), &col(&[1.0]), &k).unwrap();
        ensure((a - 1.26424).abs() < 5e-6, || format!("F={{0}}, F̃={{1}}: {a:.6}"))?;
        ensure((b - 0.77340).abs() < 5e-6, || format!("F={{0,2}}, F̃={{1}}: {b:.6}"))?;
        Ok(format!("50 random pairs, max |diff| {worst:.1e}; hand values {a:.5}, {b:.5}"))
    });
}

#[test]
fn criterion_03_covariance_matching_identities() {
    run(3, "covariance-matching identities", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut details = Vec::new();
        for d in [1usize, 2, 5] {
            let mu: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cov = spd(&mut rng, d);
            let mut g = Graph::inference();
            let (m1, c1) = (g.constant(Tensor::vector(mu.clone())), g.constant(cov.clone()));
            let (m2, c2) = (g.constant(Tensor::vector(mu)), g.constant(cov));
            let l = cov_match_loss(&mut g, m1, c1, m2, c2).unwrap();
            let v = g.value(l).item();
            ensure((v - 2.0 * d as f64).abs() <= 1e-10, || format!("d={d}: {v} at identical statistics"))?;

            for trial in 0..10 {
                let fr = random(&mut rng, &[7, d]);
                let fs = random(&mut rng, &[5, d]).map(|v| 2.0 * v + 0.3);
                let mut g = Graph::inference();
                let (fv_r, fv_s) = (g.constant(fr.clone()), g.constant(fs.clone()));
                let mm = mean_match_loss(&mut g, fv_r, fv_s).unwrap();
                let mm = g.value(mm).item();
                let mu_r = g.constant(Tensor::vector(fr.mean_rows().unwrap()));
                let mu_s = g.constant(Tensor::vector(fs.mean_rows().unwrap()));
                let eye = g.constant(Tensor::identity(d));
                let l = cov_match_loss(&mut g, mu_s, eye, mu_r, eye).unwrap();
                let v = g.value(l).item();
                let want = 2.0 * d as f64 + 2.0 * mm;
                ensure((v - want).abs() <= 1e-10, || format!("d={d} trial {trial}: {v} vs 2d + 2·mm = {want}"))?;
            }
            details.push(format!("d={d}: {v}"));
        }
        Ok(details.join(", "))
    });
}

/// Greedy decoding replayed step by step, keeping the logits.
fn hard_trajectory(model: &Model, z: &Tensor, t_max: usize) -> (Vec<usize>, Vec<Vec<f64>>) {
    let mut g = Graph::inference();
    let zv = g.constant(z.clone());
    let table = g.bind(&model.params, model.cfg.feedback_embedding()).unwrap();
    let mut state = model.init_state(&mut g, zv).unwrap();
    let (mut words, mut logits) = (Vec::new(), Vec::new());
    for t in 0..t_max {
        let l = model.word_logits(&mut g, state.h).unwrap();
        let row = g.value(l).data().to_vec();
        let w = first_argmax(&row);
        words.push(w);
        logits.push(row);
        if w == EOS || t + 1 == t_max {
            break;
        }
        let y = g.gather_rows(table, &[w]).unwrap();
        state = model.lstm_step(&mut g, y, state, zv).unwrap();
    }
    (words, logits)
}

fn top_gap(row: &[f64]) -> f64 {
    let mut sorted = row.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[0] - sorted[1]
}

#[test]
fn criterion_04_soft_argmax_limit() {
    run(4, "soft-argmax limit", None, || {
        let t_max = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut qualifying, mut worst) = (0, 0.0f64);
        for draw in 0..100u64 {
            let model = mini_model(1000 + draw);
            let z = sample_latent(&mut rng, 1, model.cfg.latent_dim);
            let (words, logits) = hard_trajectory(&model, &z, t_max);
            let generated = model.generate(&z, t_max).unwrap();
            ensure(generated[0] == words, || format!("draw {draw}: replay {words:?} vs generate {:?}", generated[0]))?;
            if logits.iter().any(|l| top_gap(l) <= 0.01) {
                continue;
            }
            qualifying += 1;
            let mut g = Graph::inference();
            let zv = g.constant(z.clone());
            let roll = model.soft_generate(&mut g, zv, t_max, 1e3).unwrap();
            let table = model.param(EMBED).unwrap();
            for (t, &w) in words.iter().enumerate() {
                let soft_word = first_argmax(g.value(roll.logits[t]).data());
                ensure(soft_word == w, || format!("draw {draw} step {t}: soft {soft_word} vs hard {w}"))?;
                let y = g.value(roll.inputs[t]).data();
                let dist = y
                    .iter()
                    .zip(table.row(w))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                worst = worst.max(dist);
                ensure(dist <= 1e-3, || format!("draw {draw} step {t}: ‖y − e_w‖ = {dist:.3e}"))?;
            }
        }
        ensure(qualifying > 0, || "no draw had all logit gaps above 0.01".into())?;
        Ok(format!("{qualifying}/100 draws with gaps > 0.01 matched; max y distance {worst:.2e}"))
    });
}

/// Independent BLEU: string n-grams, explicit union of reference counts.
fn bleu_reference(cands: &[&str], refs: &[&str], n: usize) -> f64 {
    let toks = |s: &str| s.split(' ').filter(|w| !w.is_empty()).map(String::from).collect::<Vec<_>>();
    let grams = |t: &[String], k: usize| -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        if t.len() >= k {
            for i in 0..=t.len() - k {
                *m.entry(t[i..i + k].join(" ")).or_insert(0.0) += 1.0;
            }
        }
        m
    };
    let cands: Vec<Vec<String>> = cands.iter().map(|c| toks(c)).collect();
    let refs: Vec<Vec<String>> = refs.iter().map(|r| toks(r)).collect();
    let mut log_p = 0.0;
    for k in 1..=n {
        let mut union: BTreeMap<String, f64> = BTreeMap::new();
        for r in &refs {
            for (gram, c) in grams(r, k) {
                let e = union.entry(gram).or_insert(0.0);
                if c > *e {
                    *e = c;
                }
            }
        }
        let (mut num, mut den) = (0.0, 0.0);
        for c in &cands {
            for (gram, cnt) in grams(c, k) {
                den += cnt;
                num += cnt.min(*union.get(&gram).unwrap_or(&0.0));
            }
        }
        let p = if den > 0.0 { num / den } else { 0.0 };
        log_p += (if p > 1e-9 { p } else { 1e-9 }).ln() / n as f64;
    }
    let c: f64 = cands.iter().map(|c| c.len() as f64).sum();
    let mut r = 0.0;
    for cand in &cands {
        let mut best = usize::MAX;
        for rf in &refs {
            let (dl, db) = (rf.len().abs_diff(cand.len()), best.abs_diff(cand.len()));
            if best == usize::MAX || dl < db || (dl == db && rf.len() < best) {
                best = rf.len();
            }
        }
        r += best as f64;
    }
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * log_p.exp()
}

#[test]
fn criterion_05_bleu_oracle() {
    run(5, "BLEU oracle", None, || {
        let split = |v: &[&str]| -> Vec<Vec<String>> {
            v.iter().map(|s| s.split(' ').map(String::from).collect()).collect()
        };
        let cases: [(&[&str], &[&str]); 3] = [
            // Clipping against several references.
            (
                &["the the the the the the", "the cat sat on the mat"],
                &["the cat is on the mat", "there is a cat on the mat"],
            ),
            // Short candidates: brevity penalty and a tie in reference length.
            (
                &["a cat sat", "on the mat today"],
                &["a cat sat down", "the cat sat on the mat", "on a mat", "on the red mat ok"],
            ),
            // Mixed lengths, one candidate too short for 3- and 4-grams.
            (
                &["john loves mary very much", "mary", "she loves john too and he loves her"],
                &["john loves mary", "mary loves john too", "and he loves her very much indeed"],
            ),
        ];
        let mut worst: f64 = 0.0;
        for (i, (c, r)) in cases.iter().enumerate() {
            for n in [2, 3, 4] {
                let ours = corpus_bleu(&split(c), &split(r), n).unwrap();
                let theirs = bleu_reference(c, r, n);
                worst = worst.max((ours - theirs).abs());
                ensure((ours - theirs).abs() <= 1e-6, || format!("case {i} n={n}: {ours} vs {theirs}"))?;
                ensure((0.0..=1.0).contains(&ours), || format!("case {i} n={n}: {ours} outside [0, 1]"))?;
            }
        }
        let same = split(&["the quick brown fox jumps", "over the lazy dog again", "a b c d e f"]);
        for n in [2, 3, 4] {
            let s = corpus_bleu(&same, &same, n).unwrap();
            ensure(s == 1.0, || format!("identity at n={n} scored {s}"))?;
        }
        Ok(format!("3 cases × n=2,3,4, max |diff| {worst:.1e}; identity = 1.0"))
    });
}

fn det_and_inverse(a: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let d = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..d).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    let mut det = 1.0;
    for c in 0..d {
        let p = (c..d).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
        if p != c {
            m.swap(p, c);
            det = -det;
        }
        let piv = m[c][c];
        det *= piv;
        for v in m[c].iter_mut() {
            *v /= piv;
        }
        for r in 0..d {
            if r != c {
                let f = m[r][c];
                let pivot_row = m[c].clone();
                for (v, p) in m[r].iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
            }
        }
    }
    (det, m.into_iter().map(|r| r[d..].to_vec()).collect())
}

/// Mean of `ln((1/n) Σ N(y; f_i, Σ))` by plain summation of densities.
fn kde_oracle(real: &[Vec<f64>], gen: &[Vec<f64>]) -> f64 {
    let (n, d) = (real.len(), real[0].len());
    let mean: Vec<f64> = (0..d).map(|j| real.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let cov: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let c = real.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / n as f64;
                    if i == j {
                        c + 1e-4
                    } else {
                        c
                    }
                })
                .collect()
        })
        .collect();
    let (det, inv) = det_and_inverse(&cov);
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).powi(d as i32) * det).sqrt();
    let mut total = 0.0;
    for y in gen {
        let mut density = 0.0;
        for f in real {
            let diff: Vec<f64> = (0..d).map(|j| y[j] - f[j]).collect();
            let mut q = 0.0;
            for i in 0..d {
                for j in 0..d {
                    q += diff[i] * inv[i][j] * diff[j];
                }
            }
            density += norm * (-0.5 * q).exp();
        }
        total += (density / n as f64).ln();
    }
    total / gen.len() as f64
}

#[test]
fn criterion_06_kde_oracle() {
    run(6, "KDE oracle", None, || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst: f64 = 0.0;
        for case in 0..20 {
            let d = rng.gen_range(1..=4);
            let n = rng.gen_range(d + 3..=d + 10);
            let m = rng.gen_range(1..=6);
            let real: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let gen: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let ours = kde_score(&Tensor::from_rows(&real).unwrap(), &Tensor::from_rows(&gen).unwrap()).unwrap();
            let theirs = kde_oracle(&real, &gen);
            worst = worst.max((ours - theirs).abs());
            ensure((ours - theirs).abs() <= 1e-8, || format!("case {case}: {ours} vs oracle {theirs}"))?;
        }
        let origin = Tensor::zeros(&[1, 2]);
        let ll = kde_log_likelihoods(&origin, &origin, &Tensor::identity(2)).unwrap()[0];
        ensure((ll + 1.83788).abs() <= 1e-5, || format!("single point at d=2 gave {ll}"))?;
        Ok(format!("20 cases, max |diff| {worst:.1e}; single point {ll:.5}"))
    });
}

fn toy_corpus(n: usize) -> (Vocabulary, EncodedCorpus) {
    let s = toy_grammar(n, 0);
    let vocab = Vocabulary::build(&s, 1).unwrap();
    let corpus = EncodedCorpus::encode(&s, &vocab, 10).unwrap();
    (vocab, corpus)
}

fn moving_average(values: &[f64], window: usize, end: usize) -> f64 {
    let slice = &values[end - window..end];
    slice.iter().sum::<f64>() / window as f64
}

#[test]
fn criterion_07_training_smoke_test() {
    run(7, "training smoke test", Some(Duration::from_secs(600)), || {
        let (vocab, corpus) = toy_corpus(100);
        ensure(vocab.len() == 50, || format!("toy vocabulary has {} entries", vocab.len()))?;
        let mut cfg = TrainConfig::desk(vocab.len());
        cfg.variant = Variant::Mmd;
        cfg.epochs = 1000;
        // 500 generator steps with one discriminator step in every five.
        cfg.iterations = Some(625);
        let mut model = Model::init(cfg.model.clone(), cfg.seed).map_err(|e| e.to_string())?;
        let ae = pretrain_autoencoder(&mut model, &corpus, &cfg).map_err(|e| e.to_string())?;
        let perm = pretrain_discriminator(&mut model, &corpus, &cfg).map_err(|e| e.to_string())?;
        let mut state = TrainState::new(cfg.clone(), model).map_err(|e| e.to_string())?;
        let rows = train_textgan(&corpus, &mut state, None).map_err(|e| e.to_string())?;

        let g_rows: Vec<_> = rows.iter().filter(|r| !r.is_discriminator()).collect();
        ensure(g_rows.len() == 500, || format!("{} generator steps", g_rows.len()))?;
        let mmd_losses: Vec<f64> = g_rows.iter().filter(|r| r.loss_name == "mmd").map(|r| r.loss_value).collect();
        ensure(mmd_losses.len() >= 100, || format!("only {} MMD generator steps", mmd_losses.len()))?;
        let early = moving_average(&mmd_losses, 50, 50);
        let late = moving_average(&mmd_losses, 50, mmd_losses.len());

        let all: Vec<usize> = (0..corpus.len()).collect();
        let (_, real_f) = state.model.features(&corpus.batch(&all)).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = sample_latent(&mut rng, 320, cfg.model.latent_dim);
        let sentences = state.model.generate(&z, corpus.t_max).map_err(|e| e.to_string())?;
        let batch = sentence_batch(&sentences, corpus.t_max).map_err(|e| e.to_string())?;
        let (_, gen_f) = state.model.features(&batch).map_err(|e| e.to_string())?;
        let diag = moment_diagnostics(&real_f, &gen_f).map_err(|e| e.to_string())?;

        let finite = ae.iter().chain(&perm).all(|v| v.is_finite())
            && rows.iter().all(|r| [r.loss_value, r.d_real, r.d_fake, r.mmd].iter().all(|v| v.is_finite()))
            && state.model.params.values().all(|t| t.data().iter().all(|v| v.is_finite()));
        let detail = format!(
            "AE NLL {:.3}→{:.3}, perm acc {:.2}, L_G moving average {early:.4} (step 50) → {late:.4} (end), mean-scatter ρ {:.3}",
            ae[0],
            ae[ae.len() - 1],
            perm[perm.len() - 1],
            diag.mean_corr
        );
        ensure(finite, || format!("non-finite value; {detail}"))?;
        ensure(late < early, || format!("(a) loss did not decrease; {detail}"))?;
        ensure(diag.mean_corr >= 0.8, || format!("(b) mean correlation below 0.8; {detail}"))?;
        Ok(detail)
    });
}

fn schedule_config(vocab: usize) -> TrainConfig {
    let mut cfg = TrainConfig::desk(vocab);
    cfg.model = ModelConfig {
        vocab_size: vocab,
        embed_dim: 8,
        windows: vec![2, 3],
        filters: 6,
        disc_hidden: 8,
        enc_hidden: 12,
        gen_hidden: 12,
        latent_dim: 6,
        compress_dim: Some(4),
        share_embedding: true,
    };
    cfg.batch_size = 8;
    cfg.stats_window = 3;
    cfg.seed = 8;
    cfg
}

#[test]
fn criterion_08_schedule_and_reproducibility() {
    run(8, "schedule and reproducibility", None, || {
        let (vocab, corpus) = toy_corpus(40);
        let mut cfg = schedule_config(vocab.len());
        cfg.k = 5;
        cfg.epochs = 1000;
        cfg.iterations = Some(1000);
        let once = || -> Result<(String, Vec<u8>, usize, u64)> {
            let model = Model::init(cfg.model.clone(), cfg.seed)?;
            let mut state = TrainState::new(cfg.clone(), model)?;
            let rows = train_textgan(&corpus, &mut state, None)?;
            let d = rows.iter().filter(|r| r.is_discriminator()).count();
            Ok((metrics_csv(&rows), encode_checkpoint(&state)?, d, state.disc_opt.t))
        };
        let (log_a, ckpt_a, d_a, adam_t) = once().map_err(|e| e.to_string())?;
        let (log_b, ckpt_b, _, _) = once().map_err(|e| e.to_string())?;
        let lines = log_a.lines().count() - 1;
        ensure(lines == 1000, || format!("{lines} iterations logged"))?;
        ensure(d_a == 200 && adam_t == 200, || format!("{d_a} discriminator rows, {adam_t} optimizer steps"))?;
        ensure(log_a == log_b, || "metrics logs differ between identical runs".into())?;
        ensure(ckpt_a == ckpt_b, || "checkpoints differ between identical runs".into())?;
        Ok(format!("1000 iterations, {d_a} discriminator updates; logs and {}-byte checkpoints identical", ckpt_a.len()))
    });
}

#[test]
fn criterion_09_autoencoder_memorization() {
    run(9, "autoencoder memorization", Some(Duration::from_secs(120)), || {
        let (vocab, corpus) = toy_corpus(5);
        let cfg = TrainConfig::desk(vocab.len());
        let mut model = Model::init(cfg.model.clone(), cfg.seed).map_err(|e| e.to_string())?;
        let mut trainer = AutoencoderTrainer::new(&cfg);
        for epoch in 1..=200 {
            let nll = trainer.run_epoch(&mut model, &corpus).map_err(|e| e.to_string())?;
            let exact = textgan::trainer::exact_reconstructions(&model, &corpus).map_err(|e| e.to_string())?;
            if exact == corpus.len() {
                return Ok(format!("all 5 sentences reconstructed after {epoch} epochs (NLL {nll:.4})"));
            }
        }
        let exact = textgan::trainer::exact_reconstructions(&model, &corpus).map_err(|e| e.to_string())?;
        Err(format!("{exact}/5 sentences reconstructed after 200 epochs"))
    });
}

#[test]
fn criterion_10_checkpoint_round_trip() {
    run(10, "checkpoint round trip", None, || {
        let (vocab, corpus) = toy_corpus(40);
        let mut cfg = schedule_config(vocab.len());
        cfg.epochs = 4;
        let fresh = || -> Result<TrainState> {
            let model = Model::init(cfg.model.clone(), cfg.seed)?;
            TrainState::new(cfg.clone(), model)
        };
        let inner = || -> Result<std::result::Result<String, String>> {
            let mut straight = fresh()?;
            let full = train_textgan(&corpus, &mut straight, None)?;

            let mut first = fresh()?;
            let mut resumed_rows = train_textgan(&corpus, &mut first, Some(9))?;
            let dir = tempfile::tempdir().map_err(|e| textgan::Error::io(std::path::Path::new("tempdir"), e))?;
            let path = dir.path().join("mid.ckpt");
            textgan::trainer::save_checkpoint(&first, &path)?;
            let mut loaded = textgan::trainer::load_checkpoint(&path)?;
            let bytes = std::fs::read(&path).map_err(|e| textgan::Error::io(&path, e))?;
            let again = encode_checkpoint(&loaded)?;
            if bytes != again {
                return Ok(Err("save → load → save changed the bytes".into()));
            }
            if decode_checkpoint(&again)? != first {
                return Ok(Err("decoded state differs from the saved one".into()));
            }
            resumed_rows.extend(train_textgan(&corpus, &mut loaded, None)?);
            if metrics_csv(&full) != metrics_csv(&resumed_rows) {
                return Ok(Err("resumed metrics log differs from the uninterrupted run".into()));
            }
            if encode_checkpoint(&loaded)? != encode_checkpoint(&straight)? {
                return Ok(Err("final checkpoints differ".into()));
            }
            Ok(Ok(format!(
                "{}-byte checkpoint stable; resumed at 9 of {} iterations, logs identical",
                bytes.len(),
                full.len()
            )))
        };
        inner().map_err(|e| e.to_string())?
    });
}
