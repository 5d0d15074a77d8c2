//! The class-conditional noise predictor: training, checkpoints and
//! unconditional sampling.

pub mod checkpoint;
pub mod train;
pub mod unet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::schedule::{ddim_reverse_step, make_linear_schedule, ConditionLabel, EpsilonModel, NoiseSchedule};
use crate::tensor::{Scalar, Tensor};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use train::{train_conditional_denoiser, TrainConfig, TrainOutcome, TrainState};
pub use unet::{UNet, UNetConfig};

/// Parameters of the training noise schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 1000, beta_min: 1e-4, beta_max: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

/// Label vocabulary: one entry per stain domain followed by the null label.
pub fn label_vocabulary(domain_ids: &[u8]) -> Vec<ConditionLabel> {
    domain_ids.iter().map(|&d| ConditionLabel::Domain(d)).chain([ConditionLabel::Null]).collect()
}

/// A trained network together with its training schedule and vocabulary.
#[derive(Clone)]
pub struct DiffusionModel<T: Scalar> {
    pub net: UNet<T>,
    pub vocab: Vec<ConditionLabel>,
    pub schedule: NoiseSchedule,
    hash: String,
}

impl<T: Scalar> DiffusionModel<T> {
    pub fn new(net: UNet<T>, vocab: Vec<ConditionLabel>, schedule: NoiseSchedule) -> Result<Self> {
        if !vocab.contains(&ConditionLabel::Null) {
            return Err(Error::Config("label vocabulary must contain the null label".into()));
        }
        if vocab.len() != net.config().num_labels {
            return Err(Error::Config(format!(
                "vocabulary of {} labels does not match a network with {} label embeddings",
                vocab.len(),
                net.config().num_labels
            )));
        }
        let hash = net.params().hash();
        Ok(Self { net, vocab, schedule, hash })
    }

    pub fn label_index(&self, cond: ConditionLabel) -> Result<usize> {
        self.vocab
            .iter()
            .position(|&c| c == cond)
            .ok_or_else(|| Error::Config(format!("label {cond} is not in the model vocabulary")))
    }

    /// Schedules used for inference must be subsamples of the training schedule.
    pub fn check_schedule(&self, s: &NoiseSchedule) -> Result<()> {
        for t in 0..=s.total_steps() {
            let mt = s.model_timestep(t);
            if mt > self.schedule.total_steps() || s.alpha_bar_at(t) != self.schedule.alpha_bar_at(mt) {
                return Err(Error::Config(format!(
                    "schedule step {t} (model timestep {mt}) does not come from the model's training schedule"
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> DiffusionModel<U> {
        DiffusionModel::new(self.net.cast(), self.vocab.clone(), self.schedule.clone()).expect("validated already")
    }
}

impl<T: Scalar> EpsilonModel<T> for DiffusionModel<T> {
    fn predict_var<'g>(
        &self,
        graph: &'g Graph<T>,
        x: Var<'g, T>,
        t: usize,
        schedule: &NoiseSchedule,
        cond: ConditionLabel,
    ) -> Result<Var<'g, T>> {
        if t > schedule.total_steps() {
            return Err(Error::Domain(format!("timestep {t} beyond schedule length {}", schedule.total_steps())));
        }
        let n = x.shape().first().copied().unwrap_or(0);
        let label = self.label_index(cond)?;
        let p = self.net.params().bind(graph, false);
        self.net.forward(graph, &p, x, &vec![schedule.model_timestep(t); n], &vec![label; n])
    }

    fn accepts(&self, cond: ConditionLabel) -> bool {
        self.vocab.contains(&cond)
    }

    fn weights_hash(&self) -> String {
        self.hash.clone()
    }
}

/// Plain DDIM sampling from `x_T` to `x_0` under `cond`.
pub fn ddim_sample<T: Scalar, M: EpsilonModel<T> + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    x_t: &Tensor<T>,
    cond: ConditionLabel,
) -> Result<Tensor<T>> {
    let mut x = x_t.clone();
    for t in (1..=schedule.total_steps()).rev() {
        let eps = model.predict(&x, t, schedule, cond)?;
        x = ddim_reverse_step(&x, &eps, t, schedule)?;
    }
    Ok(x)
}

/// `n` deterministic null-label DDIM samples from seeded Gaussian latents.
pub fn sample_unconditional<T: Scalar>(
    model: &DiffusionModel<T>,
    schedule: &NoiseSchedule,
    n: usize,
    image_size: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    model.check_schedule(schedule)?;
    let c = model.net.config().image_channels;
    if n == 0 {
        return Tensor::new(&[0, c, image_size, image_size], Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z: Tensor<T> = Tensor::<f64>::randn(&[n, c, image_size, image_size], &mut rng).cast();
    let out = ddim_sample(model, schedule, &z, ConditionLabel::Null)?;
    if !out.all_finite() {
        return Err(Error::Numeric("sampling produced non-finite values".into()));
    }
    Ok(out)
}
