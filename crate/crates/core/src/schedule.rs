//! Noise schedules and the deterministic DDIM update in both directions.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Cumulative signal coefficients `ᾱ_0..ᾱ_T` with `ᾱ_0 = 1`.
///
/// `model_timesteps[i]` is the timestep the noise predictor was trained with
/// for schedule index `i`; it differs from `i` once a long training schedule
/// is subsampled to fewer DDIM steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    model_timesteps: Vec<usize>,
}

impl NoiseSchedule {
    /// Validates and wraps an explicit coefficient sequence.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>, model_timesteps: Vec<usize>) -> Result<Self> {
        if alpha_bar.is_empty() || alpha_bar.len() != model_timesteps.len() {
            return Err(Error::Config(format!(
                "schedule needs matching non-empty coefficient and timestep lists ({} vs {})",
                alpha_bar.len(),
                model_timesteps.len()
            )));
        }
        let a0 = alpha_bar[0];
        if !(a0 > 1.0 - 1e-6 && a0 <= 1.0) {
            return Err(Error::Config(format!("alpha_bar[0] must lie in (1-1e-6, 1], got {a0}")));
        }
        for (t, w) in alpha_bar.windows(2).enumerate() {
            if !(w[1] < w[0]) {
                return Err(Error::Config(format!(
                    "alpha_bar must be strictly decreasing: alpha_bar[{}]={} >= alpha_bar[{t}]={}",
                    t + 1,
                    w[1],
                    w[0]
                )));
            }
        }
        if let Some(bad) = alpha_bar.iter().find(|&&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config(format!("alpha_bar value {bad} outside (0, 1]")));
        }
        Ok(Self { alpha_bar, model_timesteps })
    }

    pub fn total_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn model_timestep(&self, t: usize) -> usize {
        self.model_timesteps[t]
    }

    pub fn model_timesteps(&self) -> &[usize] {
        &self.model_timesteps
    }

    /// Uniform `steps`-step DDIM schedule over this (training) schedule,
    /// taking indices `i * T / steps`. `steps = 0` keeps only `ᾱ_0`.
    pub fn subsample(&self, steps: usize) -> Result<Self> {
        let t_train = self.total_steps();
        if steps > t_train {
            return Err(Error::Config(format!(
                "cannot subsample {steps} steps from a {t_train}-step schedule"
            )));
        }
        let idx: Vec<usize> = if steps == 0 {
            vec![0]
        } else {
            (0..=steps).map(|i| i * t_train / steps).collect()
        };
        Ok(Self {
            alpha_bar: idx.iter().map(|&i| self.alpha_bar[i]).collect(),
            model_timesteps: idx.iter().map(|&i| self.model_timesteps[i]).collect(),
        })
    }

    /// Hex sha256 over the coefficients and model timesteps.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for a in &self.alpha_bar {
            h.update(a.to_le_bytes());
        }
        for t in &self.model_timesteps {
            h.update((*t as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// `ᾱ_t = Π_{s=1..t} (1 − β_s)` with `β_1..β_T` linearly spaced over
/// `[beta_min, beta_max]` and `ᾱ_0 = 1`.
pub fn make_linear_schedule(total_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if total_steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::Config(format!(
            "beta bounds must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    linear_schedule_unchecked(total_steps, beta_min, beta_max)
}

fn linear_schedule_unchecked(total_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    let mut alpha_bar = Vec::with_capacity(total_steps + 1);
    alpha_bar.push(1.0);
    let mut prod = 1.0;
    for s in 0..total_steps {
        let beta = if total_steps == 1 {
            beta_min
        } else {
            beta_min + (beta_max - beta_min) * s as f64 / (total_steps - 1) as f64
        };
        prod *= 1.0 - beta;
        alpha_bar.push(prod);
    }
    NoiseSchedule::from_alpha_bar(alpha_bar, (0..=total_steps).collect())
}

/// Coefficients `(a, b)` with `x_to = a·x_from + b·eps` for a DDIM move from
/// signal level `ab_from` to `ab_to`. Equal levels give exactly `(1, 0)`.
pub fn ddim_coefficients(ab_from: f64, ab_to: f64) -> (f64, f64) {
    let a = (ab_to / ab_from).sqrt();
    let b = (1.0 - ab_to).sqrt() - (1.0 - ab_from).sqrt() * a;
    (a, b)
}

fn check_eps<T: Scalar>(x: &Tensor<T>, eps: &Tensor<T>) -> Result<()> {
    x.same_shape(eps)?;
    if !eps.all_finite() {
        return Err(Error::Numeric("noise prediction contains non-finite values".into()));
    }
    Ok(())
}

/// DDIM move between two arbitrary signal levels.
pub fn ddim_step_between<T: Scalar>(x: &Tensor<T>, eps: &Tensor<T>, ab_from: f64, ab_to: f64) -> Result<Tensor<T>> {
    check_eps(x, eps)?;
    let (a, b) = ddim_coefficients(ab_from, ab_to);
    let (a, b) = (T::of(a), T::of(b));
    x.zip_map(eps, |x, e| a * x + b * e)
}

/// Denoising step from `t` to `t − 1`.
pub fn ddim_reverse_step<T: Scalar>(
    x_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t == 0 || t > schedule.total_steps() {
        return Err(Error::Domain(format!(
            "reverse step needs 1 <= t <= {}, got t={t}",
            schedule.total_steps()
        )));
    }
    ddim_step_between(x_t, eps, schedule.alpha_bar_at(t), schedule.alpha_bar_at(t - 1))
}

/// Noising (inversion) step from `t` to `t + 1`.
pub fn ddim_inverse_step<T: Scalar>(
    x_t: &Tensor<T>,
    eps: &Tensor<T>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t >= schedule.total_steps() {
        return Err(Error::Domain(format!(
            "inverse step needs 0 <= t < {}, got t={t}",
            schedule.total_steps()
        )));
    }
    ddim_step_between(x_t, eps, schedule.alpha_bar_at(t), schedule.alpha_bar_at(t + 1))
}

/// Differentiable reverse step, elementwise identical to [`ddim_reverse_step`].
pub fn ddim_reverse_step_var<'g, T: Scalar>(
    x_t: Var<'g, T>,
    eps: Var<'g, T>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Var<'g, T>> {
    if t == 0 || t > schedule.total_steps() {
        return Err(Error::Domain(format!("reverse step needs 1 <= t <= {}, got t={t}", schedule.total_steps())));
    }
    let (a, b) = ddim_coefficients(schedule.alpha_bar_at(t), schedule.alpha_bar_at(t - 1));
    x_t.scale(T::of(a)).add(eps.scale(T::of(b)))
}

/// Conditioning label understood by the noise predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionLabel {
    Null,
    Domain(u8),
}

impl std::fmt::Display for ConditionLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConditionLabel::Null => f.write_str("null"),
            ConditionLabel::Domain(d) => write!(f, "domain{d}"),
        }
    }
}

/// Noise predictor `ε_θ(x_t, t, c)`. `t` is a schedule index; implementations
/// map it through [`NoiseSchedule::model_timestep`] themselves if they need
/// the training timestep, which is why the schedule is passed along.
pub trait EpsilonModel<T: Scalar>: Sync {
    /// Differentiable prediction recorded on `graph`.
    fn predict_var<'g>(
        &self,
        graph: &'g Graph<T>,
        x: Var<'g, T>,
        t: usize,
        schedule: &NoiseSchedule,
        cond: ConditionLabel,
    ) -> Result<Var<'g, T>>;

    fn predict(&self, x: &Tensor<T>, t: usize, schedule: &NoiseSchedule, cond: ConditionLabel) -> Result<Tensor<T>> {
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.predict_var(&g, xv, t, schedule, cond)?;
        Ok((*out.value()).clone())
    }

    /// Whether `cond` is part of the label vocabulary.
    fn accepts(&self, cond: ConditionLabel) -> bool;

    /// Stable identity of the weights (hex digest).
    fn weights_hash(&self) -> String;
}

/// Predictor that returns the same tensor (broadcast per item) for every input.
#[derive(Debug, Clone)]
pub struct ConstantEpsilon<T> {
    pub eps: Tensor<T>,
}

impl<T: Scalar> EpsilonModel<T> for ConstantEpsilon<T> {
    fn predict_var<'g>(
        &self,
        graph: &'g Graph<T>,
        x: Var<'g, T>,
        _t: usize,
        _schedule: &NoiseSchedule,
        _cond: ConditionLabel,
    ) -> Result<Var<'g, T>> {
        let shape = x.shape();
        let n = shape[0];
        if self.eps.numel() * n != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("constant noise {:?} vs latent {shape:?}", self.eps.shape())));
        }
        let data: Vec<T> = (0..n).flat_map(|_| self.eps.data().iter().copied()).collect();
        Ok(graph.constant(Tensor::new(&shape, data)?))
    }

    fn accepts(&self, _cond: ConditionLabel) -> bool {
        true
    }

    fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.eps.to_le_bytes());
        hex::encode(h.finalize())
    }
}
