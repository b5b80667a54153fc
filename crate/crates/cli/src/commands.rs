use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use textgan::corpus::{read_corpus, tokenize, EncodedCorpus, Vocabulary};
use textgan::evalsuite::{
    corpus_bleu, evaluate, interpolate, kde_score, moment_diagnostics, sentence_batch, strip_eos, BleuResult,
    EvalSettings, KdeResult,
};
use textgan::generator::sample_latent;
use textgan::model::Model;
use textgan::rng::{indexed_rng, stream_rng, Stream};
use textgan::trainer::{
    load_checkpoint, metrics_csv, parse_metrics, pretrain_autoencoder, pretrain_discriminator, save_checkpoint,
    train_textgan, TrainConfig, TrainState,
};
use textgan::{Error, Result};

use crate::config::RunConfig;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const SPLITS: [&str; 3] = ["train", "valid", "test"];
pub const AUTOENCODER_CKPT: &str = "autoencoder.ckpt";
pub const PRETRAINED_CKPT: &str = "pretrained.ckpt";
pub const TRAINED_CKPT: &str = "textgan.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require(path: PathBuf, producer: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact {
            path,
            producer: producer.to_string(),
        })
    }
}

/// Writes the resolved settings, seed included, next to a command's outputs.
fn echo_config(dir: &Path, command: &str, run: &RunConfig, train: &TrainConfig) -> Result<()> {
    let text = format!("# textgan {command}\n{}", run.render(train));
    write(&dir.join(format!("{command}.config")), &text)
}

fn split_path(run: &RunConfig, split: &str) -> PathBuf {
    run.data_dir.join(format!("{split}.txt"))
}

fn load_vocab(run: &RunConfig) -> Result<Vocabulary> {
    Vocabulary::load(&require(run.data_dir.join(VOCAB_FILE), "textgan preprocess")?)
}

fn load_split(run: &RunConfig, split: &str) -> Result<EncodedCorpus> {
    let path = require(split_path(run, split), "textgan preprocess")?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    EncodedCorpus::from_file_string(&text, run.t_max)
        .map_err(|e| Error::Data(format!("{}: {e} (was it preprocessed with a different t_max?)", path.display())))
}

fn load_model(path: &Path, vocab: &Vocabulary) -> Result<Model> {
    let state = load_checkpoint(path)?;
    if state.model.cfg.vocab_size != vocab.len() {
        return Err(Error::Data(format!(
            "{} was trained on {} words but the vocabulary has {}",
            path.display(),
            state.model.cfg.vocab_size,
            vocab.len()
        )));
    }
    Ok(state.model)
}

fn trained_checkpoint(run: &RunConfig) -> Result<PathBuf> {
    match &run.checkpoint {
        Some(p) => require(p.clone(), "textgan train"),
        None => require(run.out_dir.join(TRAINED_CKPT), "textgan train"),
    }
}

fn sentence_text(vocab: &Vocabulary, ids: &[usize]) -> String {
    vocab.decode(ids).join(" ")
}

pub fn preprocess(run: &RunConfig) -> Result<()> {
    let corpus = run
        .corpus
        .clone()
        .ok_or_else(|| Error::Config("preprocess needs a corpus (`corpus = PATH` or --corpus)".into()))?;
    let train_cfg = run.train_config(8)?;
    let sentences = read_corpus(&corpus)?;
    let n = sentences.len();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(train_cfg.seed, Stream::Split));
    let n_test = (n as f64 * run.test_fraction).round() as usize;
    let n_valid = ((n as f64 * run.valid_fraction).round() as usize).min(n - n_test);
    let mut parts = [
        order[n_test + n_valid..].to_vec(),
        order[n_test..n_test + n_valid].to_vec(),
        order[..n_test].to_vec(),
    ];
    for p in &mut parts {
        p.sort_unstable();
    }
    if parts[0].is_empty() {
        return Err(Error::Data(format!("{n} sentences leave nothing for the training split")));
    }

    let train_sentences: Vec<Vec<String>> = parts[0].iter().map(|&i| sentences[i].clone()).collect();
    let vocab = Vocabulary::build(&train_sentences, run.min_count)?;
    if vocab.is_degenerate() {
        eprintln!(
            "warning: vocabulary holds only the reserved tokens (min_count = {}); every word encodes as <unk>",
            run.min_count
        );
    }
    ensure_dir(&run.data_dir)?;
    vocab.save(&run.data_dir.join(VOCAB_FILE))?;
    for (split, idx) in SPLITS.iter().zip(&parts) {
        let picked: Vec<Vec<String>> = idx.iter().map(|&i| sentences[i].clone()).collect();
        let encoded = EncodedCorpus::encode(&picked, &vocab, run.t_max)?;
        write(&split_path(run, split), &encoded.to_file_string())?;
    }
    echo_config(&run.data_dir, "preprocess", run, &train_cfg)?;
    println!(
        "{} sentences → train {}, valid {}, test {}; vocabulary {} entries in {}",
        n,
        parts[0].len(),
        parts[1].len(),
        parts[2].len(),
        vocab.len(),
        run.data_dir.display()
    );
    Ok(())
}

pub fn pretrain(run: &RunConfig) -> Result<()> {
    let vocab = load_vocab(run)?;
    let corpus = load_split(run, "train")?;
    let cfg = run.train_config(vocab.len())?;
    ensure_dir(&run.out_dir)?;
    echo_config(&run.out_dir, "pretrain", run, &cfg)?;

    let mut model = Model::init(cfg.model.clone(), cfg.seed)?;
    let ae = pretrain_autoencoder(&mut model, &corpus, &cfg)?;
    save_checkpoint(&TrainState::new(cfg.clone(), model.clone())?, &run.out_dir.join(AUTOENCODER_CKPT))?;
    let perm = pretrain_discriminator(&mut model, &corpus, &cfg)?;
    save_checkpoint(&TrainState::new(cfg.clone(), model)?, &run.out_dir.join(PRETRAINED_CKPT))?;

    let mut ae_csv = String::from("epoch,nll\n");
    for (i, v) in ae.iter().enumerate() {
        let _ = writeln!(ae_csv, "{},{v}", i + 1);
    }
    let mut perm_csv = String::from("epoch,accuracy\n");
    for (i, v) in perm.iter().enumerate() {
        let _ = writeln!(perm_csv, "{},{v}", i + 1);
    }
    write(&run.out_dir.join("pretrain_ae.csv"), &ae_csv)?;
    write(&run.out_dir.join("pretrain_disc.csv"), &perm_csv)?;
    println!(
        "autoencoder NLL {} → {}; permutation accuracy {}",
        ae.first().map_or("-".into(), |v| format!("{v:.4}")),
        ae.last().map_or("-".into(), |v| format!("{v:.4}")),
        perm.last().map_or("-".into(), |v| format!("{v:.3}")),
    );
    Ok(())
}

pub fn train(run: &RunConfig, resume: bool) -> Result<()> {
    let vocab = load_vocab(run)?;
    let corpus = load_split(run, "train")?;
    let cfg = run.train_config(vocab.len())?;
    let ckpt_path = run.out_dir.join(TRAINED_CKPT);
    let metrics_path = run.out_dir.join(METRICS_FILE);

    let (mut state, mut rows) = if resume {
        let mut state = load_checkpoint(&require(ckpt_path.clone(), "textgan train")?)?;
        // Schedule and optimizer settings may change between sessions; the
        // architecture may not.
        if cfg.model != state.config.model {
            return Err(Error::Config(format!(
                "{} was built with different model dimensions than the current configuration",
                ckpt_path.display()
            )));
        }
        state.config = cfg;
        let text = fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        (state, parse_metrics(&text)?)
    } else {
        let model = if run.skip_pretrain {
            Model::init(cfg.model.clone(), cfg.seed)?
        } else {
            load_checkpoint(&require(run.out_dir.join(PRETRAINED_CKPT), "textgan pretrain")?)?.model
        };
        (TrainState::new(cfg, model)?, Vec::new())
    };
    ensure_dir(&run.out_dir)?;
    echo_config(&run.out_dir, "train", run, &state.config)?;

    let new_rows = train_textgan(&corpus, &mut state, None)?;
    rows.extend(new_rows);
    write(&metrics_path, &metrics_csv(&rows))?;
    save_checkpoint(&state, &ckpt_path)?;
    let last_g = rows.iter().rev().find(|r| !r.is_discriminator());
    println!(
        "{} iterations ({}); last generator loss {}",
        state.iteration,
        state.config.variant,
        last_g.map_or("-".into(), |r| format!("{} = {:.5}", r.loss_name, r.loss_value))
    );
    Ok(())
}

pub fn generate(run: &RunConfig, n: usize) -> Result<()> {
    let vocab = load_vocab(run)?;
    let model = load_model(&trained_checkpoint(run)?, &vocab)?;
    let cfg = run.train_config(vocab.len())?;
    ensure_dir(&run.out_dir)?;
    echo_config(&run.out_dir, "generate", run, &cfg)?;
    let z = sample_latent(&mut indexed_rng(cfg.seed, Stream::Generate, 0), n, model.cfg.latent_dim);
    let mut out = String::new();
    for s in model.generate(&z, run.t_max)? {
        out.push_str(&sentence_text(&vocab, &s));
        out.push('\n');
    }
    write(&run.out_dir.join("generated.txt"), &out)?;
    print!("{out}");
    Ok(())
}

pub fn interpolate_cmd(run: &RunConfig, steps: usize) -> Result<()> {
    let vocab = load_vocab(run)?;
    let model = load_model(&trained_checkpoint(run)?, &vocab)?;
    let cfg = run.train_config(vocab.len())?;
    ensure_dir(&run.out_dir)?;
    echo_config(&run.out_dir, "interpolate", run, &cfg)?;
    let ends = sample_latent(&mut indexed_rng(cfg.seed, Stream::Interpolate, 0), 2, model.cfg.latent_dim);
    let path = interpolate(&model, ends.row(0), ends.row(1), steps, run.t_max)?;
    let mut out = String::new();
    for (t, s) in path {
        let _ = writeln!(out, "{t:.4}\t{}", sentence_text(&vocab, &s));
    }
    write(&run.out_dir.join("interp.txt"), &out)?;
    print!("{out}");
    Ok(())
}

fn candidate_ids(path: &Path, vocab: &Vocabulary, t_max: usize) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sentences: Vec<Vec<String>> = text.lines().map(tokenize).filter(|s| !s.is_empty()).collect();
    if sentences.is_empty() {
        return Err(Error::Data(format!("{} contains no candidate sentences", path.display())));
    }
    let encoded = EncodedCorpus::encode(&sentences, vocab, t_max)?;
    Ok(encoded.rows.iter().zip(&encoded.lengths).map(|(r, &l)| r[..l].to_vec()).collect())
}

pub fn eval(run: &RunConfig, candidates: Option<&Path>) -> Result<()> {
    let vocab = load_vocab(run)?;
    let test = load_split(run, "test")?;
    if test.len() < 2 {
        return Err(Error::Data(format!(
            "the test split has {} sentence(s); BLEU references and the KDE covariance need at least two",
            test.len()
        )));
    }
    let encoder = load_model(&require(run.out_dir.join(AUTOENCODER_CKPT), "textgan pretrain")?, &vocab)?;
    let cfg = run.train_config(vocab.len())?;

    let (bleu, kde) = match candidates {
        Some(path) => {
            let cands = candidate_ids(path, &vocab, run.t_max)?;
            let stripped: Vec<Vec<usize>> = cands.iter().map(|c| strip_eos(c)).collect();
            let refs: Vec<Vec<usize>> = test.rows.iter().map(|r| strip_eos(r)).collect();
            let orders = [2, 3, 4];
            let scores = orders
                .iter()
                .map(|&n| corpus_bleu(&stripped, &refs, n))
                .collect::<Result<Vec<f64>>>()?;
            let all: Vec<usize> = (0..test.len()).collect();
            let (_, real_f) = encoder.features(&test.batch(&all))?;
            let (_, gen_f) = encoder.features(&sentence_batch(&cands, run.t_max)?)?;
            (
                BleuResult::from_repeats(&orders, &[scores])?,
                KdeResult::from_repeats(&[kde_score(&real_f, &gen_f)?])?,
            )
        }
        None => {
            let generator = load_model(&trained_checkpoint(run)?, &vocab)?;
            let settings = EvalSettings {
                repeats: run.eval_repeats,
                samples: run.eval_samples,
                seed: cfg.seed,
            };
            let report = evaluate(&generator, &encoder, &test, settings)?;
            (report.bleu, report.kde)
        }
    };
    ensure_dir(&run.out_dir)?;
    echo_config(&run.out_dir, "eval", run, &cfg)?;
    write(&run.out_dir.join("bleu.csv"), &bleu.to_csv())?;
    write(&run.out_dir.join("kde.csv"), &kde.to_csv())?;
    print!("{}{}", bleu.to_csv(), kde.to_csv());
    Ok(())
}

pub fn diagnose(run: &RunConfig) -> Result<()> {
    let vocab = load_vocab(run)?;
    let corpus = load_split(run, "train")?;
    let model = load_model(&trained_checkpoint(run)?, &vocab)?;
    let cfg = run.train_config(vocab.len())?;
    ensure_dir(&run.out_dir)?;
    echo_config(&run.out_dir, "diagnose", run, &cfg)?;

    let all: Vec<usize> = (0..corpus.len()).collect();
    let (_, real_f) = model.features(&corpus.batch(&all))?;
    let z = sample_latent(
        &mut indexed_rng(cfg.seed, Stream::Eval, 0),
        run.eval_samples,
        model.cfg.latent_dim,
    );
    let generated = model.generate(&z, run.t_max)?;
    let (_, gen_f) = model.features(&sentence_batch(&generated, run.t_max)?)?;
    let diag = moment_diagnostics(&real_f, &gen_f)?;
    write(&run.out_dir.join("moments_mean.csv"), &diag.mean_csv())?;
    write(&run.out_dir.join("moments_cov.csv"), &diag.cov_csv())?;
    write(&run.out_dir.join("moments_corr.csv"), &diag.corr_csv())?;
    print!("{}", diag.corr_csv());
    Ok(())
}
