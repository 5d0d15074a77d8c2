//! ε-prediction training with null-label dropout, flips and AdamW.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{label_vocabulary, DiffusionModel, ScheduleConfig, UNet, UNetConfig};
use crate::datasets::Corpus;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{AdamConfig, AdamW, ParamStore};
use crate::schedule::ConditionLabel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Linear learning-rate warmup length.
    #[serde(default)]
    pub warmup: usize,
    pub image_size: usize,
    /// Stain domains plus the null label.
    pub num_classes: usize,
    pub seed: u64,
    #[serde(default = "yes")]
    pub flip_horizontal: bool,
    #[serde(default = "yes")]
    pub flip_vertical: bool,
    #[serde(default = "default_p_null")]
    pub p_null: f64,
    /// Decay of the weight average used for inference; 0 disables averaging.
    #[serde(default)]
    pub ema_decay: f64,
    #[serde(default)]
    pub model: UNetConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_p_null() -> f64 {
    0.1
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.p_null) || !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("p_null must be in [0, 1] and ema_decay in [0, 1)".into()));
        }
        if self.model.num_labels != self.num_classes {
            return Err(Error::Config(format!(
                "num_classes {} disagrees with the network's {} label embeddings",
                self.num_classes, self.model.num_labels
            )));
        }
        Ok(())
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone)]
pub struct TrainState {
    pub iteration: usize,
    pub raw: ParamStore<f32>,
    pub optimizer: AdamW<f32>,
    pub ema: Option<ParamStore<f32>>,
    pub rng: ChaCha8Rng,
}

pub struct TrainOutcome {
    pub model: DiffusionModel<f32>,
    pub state: TrainState,
    /// `(iteration, loss)` for every iteration run in this call (1-based).
    pub losses: Vec<(usize, f64)>,
}

struct Example {
    image: Tensor<f32>,
    label: usize,
}

fn load_examples(corpus: &Corpus, vocab: &[ConditionLabel], image_size: usize) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for r in corpus.select(None, Some("train")) {
        let image = corpus.load(r)?;
        if image.shape()[2] != image_size || image.shape()[3] != image_size {
            return Err(Error::Config(format!(
                "record {}: image is {:?}, training expects {image_size}×{image_size}",
                r.id,
                image.shape()
            )));
        }
        let label = vocab.iter().position(|&c| c == ConditionLabel::Domain(r.domain)).expect("vocabulary built from corpus");
        out.push(Example { image, label });
    }
    Ok(out)
}

fn flip(img: &Tensor<f32>, horizontal: bool, vertical: bool) -> Tensor<f32> {
    if !horizontal && !vertical {
        return img.clone();
    }
    let (_, c, h, w) = img.dims4().expect("image is 4-d");
    let src = img.data();
    let mut out = vec![0f32; src.len()];
    for k in 0..c {
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if horizontal { w - 1 - x } else { x };
                out[(k * h + y) * w + x] = src[(k * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(img.shape(), out).expect("same length")
}

/// Trains from a fresh seeded initialization, or continues `resume` until
/// the iteration counter reaches `cfg.iterations`.
pub fn train_conditional_denoiser(
    corpus: &Corpus,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let schedule = cfg.schedule.build()?;
    let domain_ids: Vec<u8> = corpus.domains().iter().map(|d| d.id).collect();
    if domain_ids.len() + 1 != cfg.num_classes {
        return Err(Error::Config(format!(
            "corpus defines {} domains, so num_classes must be {} (with null), got {}",
            domain_ids.len(),
            domain_ids.len() + 1,
            cfg.num_classes
        )));
    }
    let counts = corpus.counts_by_domain();
    for d in corpus.domains() {
        let train = corpus.select(Some(d.id), Some("train")).len();
        if train == 0 {
            return Err(Error::Config(format!(
                "class {} ({}) has no training images ({} records overall)",
                d.id,
                d.name,
                counts.get(&d.id).copied().unwrap_or(0)
            )));
        }
    }
    let vocab = label_vocabulary(&domain_ids);
    let null = vocab.len() - 1;
    let examples = load_examples(corpus, &vocab, cfg.image_size)?;

    let mut state = match resume {
        Some(s) => s,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let net = UNet::<f32>::new(cfg.model.clone(), &mut rng)?;
            let raw = net.params().clone();
            let optimizer = AdamW::new(
                AdamConfig::adamw(cfg.learning_rate, cfg.weight_decay),
                raw.values().map(|v| v.shape()),
            );
            TrainState { iteration: 0, ema: (cfg.ema_decay > 0.0).then(|| raw.clone()), raw, optimizer, rng }
        }
    };
    let mut net = UNet::<f32>::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    net.params_mut().load(state.raw.values().cloned().collect())?;
    let mut ema = if cfg.ema_decay > 0.0 { Some(state.ema.take().unwrap_or_else(|| state.raw.clone())) } else { None };

    let t_max = schedule.total_steps();
    let n = cfg.batch_size;
    let end = cfg.iterations;
    let mut losses = Vec::with_capacity(end.saturating_sub(state.iteration));
    while state.iteration < end {
        let it = state.iteration + 1;
        let rng = &mut state.rng;
        let mut images = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut ts = Vec::with_capacity(n);
        for _ in 0..n {
            let ex = &examples[rng.random_range(0..examples.len())];
            let fh = cfg.flip_horizontal && rng.random::<bool>();
            let fv = cfg.flip_vertical && rng.random::<bool>();
            images.push(flip(&ex.image, fh, fv));
            labels.push(if rng.random::<f64>() < cfg.p_null { null } else { ex.label });
            ts.push(rng.random_range(1..=t_max));
        }
        let x0 = Tensor::stack(&images)?;
        let noise: Tensor<f32> = Tensor::randn(x0.shape(), rng);
        let il = x0.item_len();
        let mut xt = x0.clone();
        for (i, &t) in ts.iter().enumerate() {
            let ab = schedule.alpha_bar_at(t);
            let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            let dst = &mut xt.data_mut()[i * il..(i + 1) * il];
            for (v, &e) in dst.iter_mut().zip(&noise.data()[i * il..(i + 1) * il]) {
                *v = a * *v + b * e;
            }
        }

        let g = Graph::new();
        let p = net.params().bind(&g, true);
        let pred = net.forward(&g, &p, g.constant(xt), &ts, &labels)?;
        let loss = pred.sub(g.constant(noise))?.sqr()?.mean_per_item().sum_all().scale(1.0 / n as f32);
        let lv = loss.value().data()[0] as f64;
        if !lv.is_finite() {
            return Err(Error::Training(format!("loss became non-finite at iteration {it}")));
        }
        let mut grads = g.backward(loss)?;
        let grads = p.gradients(&mut grads);
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Training(format!("non-finite gradient at iteration {it}")));
        }
        drop(g);
        let warm = if cfg.warmup > 0 { (it as f64 / cfg.warmup as f64).min(1.0) } else { 1.0 };
        state.optimizer.cfg.lr = cfg.learning_rate * warm;
        state.optimizer.update_store(net.params_mut(), &grads)?;
        if let Some(e) = ema.as_mut() {
            let d = cfg.ema_decay.min((1.0 + it as f64) / (10.0 + it as f64)) as f32;
            let avg = e
                .values()
                .zip(net.params().values())
                .map(|(a, w)| a.zip_map(w, |a, w| d * a + (1.0 - d) * w))
                .collect::<Result<Vec<_>>>()?;
            e.load(avg)?;
        }
        state.iteration = it;
        losses.push((it, lv));
        progress(it, lv);
    }
    state.raw = net.params().clone();
    let mut inference = net;
    if let Some(e) = &ema {
        inference.params_mut().load(e.values().cloned().collect())?;
    }
    state.ema = ema;
    let model = DiffusionModel::new(inference, vocab, schedule)?;
    Ok(TrainOutcome { model, state, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flips_reverse_axes() {
        let img = Tensor::new(&[1, 1, 2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(flip(&img, true, false).data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
        assert_eq!(flip(&img, false, true).data(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
        assert_eq!(flip(&flip(&img, true, true), true, true), img);
    }
}
