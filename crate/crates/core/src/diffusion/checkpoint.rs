//! Single-file checkpoints carrying the weights, schedule, vocabulary and
//! (optionally) the optimizer state needed to resume training.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DiffusionModel, TrainConfig, TrainState, UNet, UNetConfig};
use crate::container;
use crate::error::{Error, Result};
use crate::nn::{AdamConfig, AdamW, ParamStore};
use crate::schedule::ConditionLabel;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: &str = "stainprompt-checkpoint/1";

#[derive(Clone)]
pub struct Checkpoint {
    pub model: DiffusionModel<f32>,
    pub train_config: TrainConfig,
    pub iteration: usize,
    pub state: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
struct RngRecord {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct OptimRecord {
    cfg: AdamConfig,
    step: u64,
    rng: RngRecord,
    ema: bool,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: String,
    architecture: UNetConfig,
    vocabulary: Vec<ConditionLabel>,
    schedule_alpha_bar_hash: String,
    train_config: TrainConfig,
    iteration: usize,
    weights_hash: String,
    train_state: Option<OptimRecord>,
}

fn push_store<'a>(out: &mut Vec<(String, &'a Tensor<f32>)>, prefix: &str, store: &'a ParamStore<f32>) {
    for (name, v) in store.names().iter().zip(store.values()) {
        out.push((format!("{prefix}.{name}"), v));
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tensors = Vec::new();
    push_store(&mut tensors, "model", ckpt.model.net.params());
    let train_state = ckpt.state.as_ref().map(|s| {
        push_store(&mut tensors, "raw", &s.raw);
        if let Some(e) = &s.ema {
            push_store(&mut tensors, "ema", e);
        }
        for (i, (m, v)) in s.optimizer.m.iter().zip(&s.optimizer.v).enumerate() {
            tensors.push((format!("adam_m.{i:04}"), m));
            tensors.push((format!("adam_v.{i:04}"), v));
        }
        OptimRecord {
            cfg: s.optimizer.cfg,
            step: s.optimizer.step,
            rng: RngRecord {
                seed: hex::encode(s.rng.get_seed()),
                stream: s.rng.get_stream(),
                word_pos: s.rng.get_word_pos().to_string(),
            },
            ema: s.ema.is_some(),
        }
    });
    let meta = Meta {
        version: CHECKPOINT_VERSION.into(),
        architecture: ckpt.model.net.config().clone(),
        vocabulary: ckpt.model.vocab.clone(),
        schedule_alpha_bar_hash: ckpt.model.schedule.hash(),
        train_config: ckpt.train_config.clone(),
        iteration: ckpt.iteration,
        weights_hash: ckpt.model.net.params().hash(),
        train_state,
    };
    container::write(path, &tensors, &meta)
}

fn take_store(
    tensors: &mut std::collections::BTreeMap<String, Tensor<f32>>,
    prefix: &str,
    template: &ParamStore<f32>,
) -> Result<ParamStore<f32>> {
    let mut store = template.clone();
    let values = template
        .names()
        .iter()
        .map(|n| {
            tensors
                .remove(&format!("{prefix}.{n}"))
                .ok_or_else(|| Error::Load(format!("checkpoint is missing tensor {prefix}.{n}")))
        })
        .collect::<Result<Vec<_>>>()?;
    store.load(values)?;
    Ok(store)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (mut tensors, meta): (_, Meta) = container::read(path)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Load(format!(
            "{}: checkpoint version {:?}, expected {CHECKPOINT_VERSION:?}",
            path.display(),
            meta.version
        )));
    }
    let schedule = meta.train_config.schedule.build()?;
    if schedule.hash() != meta.schedule_alpha_bar_hash {
        return Err(Error::Load(format!("{}: stored schedule does not match its parameters", path.display())));
    }
    let mut net = UNet::<f32>::new(meta.architecture.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let template = net.params().clone();
    *net.params_mut() = take_store(&mut tensors, "model", &template)?;
    if net.params().hash() != meta.weights_hash {
        return Err(Error::Load(format!("{}: weight hash mismatch", path.display())));
    }
    let state = match meta.train_state {
        None => None,
        Some(rec) => {
            let raw = take_store(&mut tensors, "raw", &template)?;
            let ema = if rec.ema { Some(take_store(&mut tensors, "ema", &template)?) } else { None };
            let mut m = Vec::new();
            let mut v = Vec::new();
            for i in 0..template.len() {
                for (dst, key) in [(&mut m, "adam_m"), (&mut v, "adam_v")] {
                    dst.push(
                        tensors
                            .remove(&format!("{key}.{i:04}"))
                            .ok_or_else(|| Error::Load(format!("checkpoint is missing optimizer tensor {key}.{i:04}")))?,
                    );
                }
            }
            let seed: [u8; 32] = hex::decode(&rec.rng.seed)
                .ok()
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| Error::Load("bad rng seed record".into()))?;
            let mut rng = ChaCha8Rng::from_seed(seed);
            rng.set_stream(rec.rng.stream);
            rng.set_word_pos(rec.rng.word_pos.parse().map_err(|_| Error::Load("bad rng position record".into()))?);
            let optimizer = AdamW { cfg: rec.cfg, step: rec.step, m, v };
            Some(TrainState { iteration: meta.iteration, raw, optimizer, ema, rng })
        }
    };
    let model = DiffusionModel::new(net, meta.vocabulary, schedule)?;
    Ok(Checkpoint { model, train_config: meta.train_config, iteration: meta.iteration, state })
}
