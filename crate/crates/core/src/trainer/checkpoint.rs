//! Binary checkpoints.
//!
//! Layout: the magic bytes `FMTG`, a version byte, a little-endian `u32`
//! header length, a UTF-8 JSON header, then every tensor as little-endian
//! `f64` in row-major order. Header offsets are byte positions within the
//! payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ParamSet};
use crate::numeric::Tensor;
use crate::objectives::{FeatureStats, KernelMixture, Side};

use super::{Adam, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"FMTG";
pub const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct StatsMeta {
    dim: usize,
    window: usize,
    ridge: f64,
    real: usize,
    synthetic: usize,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    iteration: u64,
    disc_adam: AdamMeta,
    gen_adam: AdamMeta,
    stats: StatsMeta,
    bandwidths: Option<KernelMixture>,
    compressed_bandwidths: Option<KernelMixture>,
    tensors: Vec<Entry>,
}

fn adam_meta(a: &Adam) -> AdamMeta {
    AdamMeta {
        lr: a.lr,
        beta1: a.beta1,
        beta2: a.beta2,
        eps: a.eps,
        t: a.t,
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let mut named: Vec<(String, &Tensor)> = Vec::new();
    for (n, t) in &state.model.params {
        named.push((format!("param:{n}"), t));
    }
    for (tag, opt) in [("disc", &state.disc_opt), ("gen", &state.gen_opt)] {
        for (n, t) in &opt.m {
            named.push((format!("adam.{tag}.m:{n}"), t));
        }
        for (n, t) in &opt.v {
            named.push((format!("adam.{tag}.v:{n}"), t));
        }
    }
    let real: Vec<&Tensor> = state.stats.batches(Side::Real).collect();
    let synthetic: Vec<&Tensor> = state.stats.batches(Side::Synthetic).collect();
    for (i, t) in real.iter().enumerate() {
        named.push((format!("stats.real:{i}"), t));
    }
    for (i, t) in synthetic.iter().enumerate() {
        named.push((format!("stats.synthetic:{i}"), t));
    }

    let mut offset = 0;
    let mut tensors = Vec::with_capacity(named.len());
    for (name, t) in &named {
        tensors.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel() * 8;
    }
    let header = Header {
        config: state.config.clone(),
        iteration: state.iteration,
        disc_adam: adam_meta(&state.disc_opt),
        gen_adam: adam_meta(&state.gen_opt),
        stats: StatsMeta {
            dim: state.stats.dim,
            window: state.stats.window,
            ridge: state.stats.ridge,
            real: real.len(),
            synthetic: synthetic.len(),
        },
        bandwidths: state.bandwidths.clone(),
        compressed_bandwidths: state.compressed_bandwidths.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::MalformedHeader("header too large".into()))?;
    let mut out = Vec::with_capacity(9 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(Error::MalformedHeader("missing FMTG magic bytes".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::MalformedHeader(format!("unsupported version {}", bytes[4])));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().expect("four bytes")) as usize;
    let body = &bytes[9..];
    if body.len() < header_len {
        return Err(Error::MalformedHeader(format!(
            "header declares {header_len} bytes but only {} follow",
            body.len()
        )));
    }
    let header: Header =
        serde_json::from_slice(&body[..header_len]).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let payload = &body[header_len..];

    let mut expected = 0;
    for e in &header.tensors {
        if e.offset != expected {
            return Err(Error::MalformedHeader(format!("tensor `{}` is not contiguous", e.name)));
        }
        expected += e.shape.iter().product::<usize>() * 8;
    }
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::MalformedHeader(format!(
            "{} bytes after the last tensor",
            payload.len() - expected
        )));
    }

    let cfg = header.config;
    cfg.validate()?;
    let shapes: ParamSet = cfg
        .model
        .param_shapes()
        .into_iter()
        .map(|(n, s)| (n, Tensor::zeros(&s)))
        .collect();
    let mut params = ParamSet::new();
    let mut disc = Adam::with_betas(header.disc_adam.lr, header.disc_adam.beta1, header.disc_adam.beta2, header.disc_adam.eps);
    disc.t = header.disc_adam.t;
    let mut gen = Adam::with_betas(header.gen_adam.lr, header.gen_adam.beta1, header.gen_adam.beta2, header.gen_adam.eps);
    gen.t = header.gen_adam.t;
    let mut real = Vec::new();
    let mut synthetic = Vec::new();

    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let data = payload[e.offset..e.offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        let (kind, name) = e
            .name
            .split_once(':')
            .ok_or_else(|| Error::MalformedHeader(format!("bad tensor name `{}`", e.name)))?;
        let check_param = |name: &str| -> Result<()> {
            let want = shapes
                .get(name)
                .ok_or_else(|| Error::MalformedHeader(format!("unknown parameter `{name}`")))?;
            if want.shape() != e.shape.as_slice() {
                return Err(Error::CheckpointShape {
                    name: name.to_string(),
                    expected: want.shape().to_vec(),
                    found: e.shape.clone(),
                });
            }
            Ok(())
        };
        match kind {
            "param" => {
                check_param(name)?;
                params.insert(name.to_string(), t);
            }
            "adam.disc.m" | "adam.disc.v" | "adam.gen.m" | "adam.gen.v" => {
                check_param(name)?;
                let opt = if kind.starts_with("adam.disc") { &mut disc } else { &mut gen };
                let slot = if kind.ends_with(".m") { &mut opt.m } else { &mut opt.v };
                slot.insert(name.to_string(), t);
            }
            "stats.real" => real.push(t),
            "stats.synthetic" => synthetic.push(t),
            _ => return Err(Error::MalformedHeader(format!("unknown tensor kind `{kind}`"))),
        }
    }
    if real.len() != header.stats.real || synthetic.len() != header.stats.synthetic {
        return Err(Error::MalformedHeader("feature statistics counts disagree".into()));
    }
    let model = Model {
        cfg: cfg.model.clone(),
        params,
    };
    model.check_layout()?;
    let stats = FeatureStats::from_batches(header.stats.dim, header.stats.window, header.stats.ridge, real, synthetic)?;
    Ok(TrainState {
        config: cfg,
        model,
        disc_opt: disc,
        gen_opt: gen,
        stats,
        bandwidths: header.bandwidths,
        compressed_bandwidths: header.compressed_bandwidths,
        iteration: header.iteration,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
