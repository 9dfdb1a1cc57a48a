//! Binary checkpoint: `ACTGCKPT`, a little-endian `u32` version, a `u64`
//! header length, a JSON header, then every number as little-endian `f64`:
//! parameters in registration order, running mean and variance of each
//! norm, then the Adam moments (`m` then `v` per tensor) of the generator
//! and of the critics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, Model};
use crate::critics::CriticConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::motiondata::NormalizationStats;
use crate::nn::Group;
use crate::textproc::Vocab;

const MAGIC: &[u8; 8] = b"ACTGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    name: String,
    group: Group,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormHeader {
    name: String,
    group: Group,
    features: usize,
    momentum: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    step: u64,
    generator: GeneratorConfig,
    critic: CriticConfig,
    vocab: String,
    stats: NormalizationStats,
    tensors: Vec<TensorHeader>,
    norms: Vec<NormHeader>,
    opt_generator: Adam,
    opt_critic: Adam,
}

pub struct Checkpoint {
    pub step: u64,
    pub model: Model,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub vocab: Vocab,
    pub stats: NormalizationStats,
}

fn push(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(
    path: &Path,
    step: u64,
    model: &Model,
    opt_g: &Adam,
    opt_d: &Adam,
    vocab: &Vocab,
    stats: &NormalizationStats,
) -> Result<()> {
    let header = Header {
        step,
        generator: model.gen_cfg.clone(),
        critic: model.critic_cfg.clone(),
        vocab: vocab.to_text(),
        stats: stats.clone(),
        tensors: model
            .params
            .iter()
            .map(|(_, p)| TensorHeader {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        norms: model
            .norms
            .entries()
            .iter()
            .map(|e| NormHeader {
                name: e.name.clone(),
                group: e.group,
                features: e.state.features(),
                momentum: e.state.momentum,
                eps: e.state.eps,
            })
            .collect(),
        opt_generator: opt_g.clone(),
        opt_critic: opt_d.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.params.iter() {
        push(&mut out, p.value.data());
    }
    for e in model.norms.entries() {
        push(&mut out, &e.state.running_mean);
        push(&mut out, &e.state.running_var);
    }
    for opt in [opt_g, opt_d] {
        for (m, v) in opt.m.iter().zip(&opt.v) {
            push(&mut out, m);
            push(&mut out, v);
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Contract("checkpoint is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn floats(&mut self, dst: &mut [f64]) -> Result<()> {
        let raw = self.take(dst.len() * 8)?;
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Config(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    let mut model = Model::build(&header.generator, &header.critic)?;
    if header.tensors.len() != model.params.len() || header.norms.len() != model.norms.len() {
        return Err(Error::Config(
            "checkpoint layout does not match its configuration".into(),
        ));
    }
    for (id, t) in model.params.ids().collect::<Vec<_>>().into_iter().zip(&header.tensors) {
        let p = model.params.get_mut(id);
        if p.name != t.name || p.value.shape() != t.shape.as_slice() || p.group != t.group {
            return Err(Error::Config(format!(
                "checkpoint tensor {} does not match {}",
                t.name, p.name
            )));
        }
        r.floats(p.value.data_mut())?;
    }
    for (e, h) in model.norms.entries_mut().iter_mut().zip(&header.norms) {
        if e.name != h.name || e.state.features() != h.features {
            return Err(Error::Config(format!(
                "checkpoint norm {} does not match {}",
                h.name, e.name
            )));
        }
        (e.state.momentum, e.state.eps) = (h.momentum, h.eps);
        r.floats(&mut e.state.running_mean)?;
        r.floats(&mut e.state.running_var)?;
    }
    let mut opts = [header.opt_generator, header.opt_critic];
    for opt in &mut opts {
        let fresh = Adam::new(&model.params, opt.group, opt.lr, opt.beta1, opt.beta2, opt.eps)?;
        (opt.m, opt.v) = (fresh.m, fresh.v);
        for (m, v) in opt.m.iter_mut().zip(opt.v.iter_mut()) {
            r.floats(m)?;
            r.floats(v)?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Contract("checkpoint has trailing bytes".into()));
    }
    let [opt_g, opt_d] = opts;
    Ok(Checkpoint {
        step: header.step,
        model,
        opt_g,
        opt_d,
        vocab: Vocab::from_text(&header.vocab)?,
        stats: header.stats,
    })
}
