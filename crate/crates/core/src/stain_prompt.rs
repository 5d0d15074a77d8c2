//! Stage 2: per-timestep prompt images optimized against the structural and
//! style paths while the noise predictor stays frozen.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container;
use crate::dual_path::Trajectory;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hash::key_hash;
use crate::nn::{AdamConfig, AdamW};
use crate::schedule::{ddim_reverse_step, ddim_reverse_step_var, ConditionLabel, EpsilonModel, NoiseSchedule};
use crate::tensor::{Scalar, Tensor};

/// Side length of the uniform SSIM window.
pub const SSIM_WINDOW: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityVariant {
    /// Windowed luminance·contrast·structure mean.
    StandardSsim,
    /// Global per-image ratio
    /// `2(σ_zσ_y + c1)(σ_zy + c2) / ((σ_z² + σ_y² + c1)(σ_zσ_y + c2))`
    /// with σ the standard deviations and σ_zy the covariance.
    LiteralEq8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the structural term; the style term gets `1 − lambda`.
    pub lambda: f64,
    #[serde(default = "tiny")]
    pub c1: f64,
    #[serde(default = "tiny")]
    pub c2: f64,
    #[serde(default = "default_ist")]
    pub ist_init: usize,
    #[serde(default = "default_inner_lr")]
    pub inner_learning_rate: f64,
    #[serde(default = "default_variant")]
    pub variant: SimilarityVariant,
}

fn tiny() -> f64 {
    1e-8
}

fn default_ist() -> usize {
    50
}

fn default_inner_lr() -> f64 {
    1e-2
}

fn default_variant() -> SimilarityVariant {
    SimilarityVariant::StandardSsim
}

impl LossConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            c1: tiny(),
            c2: tiny(),
            ist_init: default_ist(),
            inner_learning_rate: default_inner_lr(),
            variant: default_variant(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Config(format!("c1 and c2 must be positive, got {} and {}", self.c1, self.c2)));
        }
        if self.ist_init == 0 {
            return Err(Error::Config("ist_init must be at least 1".into()));
        }
        if !(self.inner_learning_rate > 0.0) {
            return Err(Error::Config(format!("inner_learning_rate must be positive, got {}", self.inner_learning_rate)));
        }
        Ok(())
    }
}

/// Windowed SSIM of each item, as a differentiable `[n]` vector. The window
/// shrinks to the image when the image is smaller than [`SSIM_WINDOW`].
pub fn ssim_per_item<'g, T: Scalar>(z: Var<'g, T>, y: Var<'g, T>, c1: f64, c2: f64) -> Result<Var<'g, T>> {
    let shape = z.shape();
    if shape != y.shape() {
        return Err(Error::Shape(format!("similarity of {shape:?} and {:?}", y.shape())));
    }
    let (_, _, h, w) = z.value().dims4()?;
    let (kh, kw) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let th = vec![T::of(1.0 / kh as f64); kh];
    let tw = vec![T::of(1.0 / kw as f64); kw];
    let (c1, c2) = (T::of(c1), T::of(c2));
    let one = T::one();
    let mz = z.filter(&th, &tw)?;
    let my = y.filter(&th, &tw)?;
    let mzz = mz.sqr()?;
    let myy = my.sqr()?;
    let mzy = mz.mul(my)?;
    let vz = z.sqr()?.filter(&th, &tw)?.sub(mzz)?;
    let vy = y.sqr()?.filter(&th, &tw)?.sub(myy)?;
    let czy = z.mul(y)?.filter(&th, &tw)?.sub(mzy)?;
    let num = mzy.scale(T::of(2.0)).affine(one, c1).mul(czy.scale(T::of(2.0)).affine(one, c2))?;
    let den = mzz.add(myy)?.affine(one, c1).mul(vz.add(vy)?.affine(one, c2))?;
    Ok(num.div(den)?.mean_per_item())
}

/// The printed global-statistics ratio per item, as a `[n]` vector.
pub fn literal_similarity_per_item<'g, T: Scalar>(z: Var<'g, T>, y: Var<'g, T>, c1: f64, c2: f64) -> Result<Var<'g, T>> {
    if z.shape() != y.shape() {
        return Err(Error::Shape(format!("similarity of {:?} and {:?}", z.shape(), y.shape())));
    }
    let (c1, c2) = (T::of(c1), T::of(c2));
    let one = T::one();
    let mz = z.mean_per_item();
    let my = y.mean_per_item();
    let vz = z.sqr()?.mean_per_item().sub(mz.sqr()?)?;
    let vy = y.sqr()?.mean_per_item().sub(my.sqr()?)?;
    let czy = z.mul(y)?.mean_per_item().sub(mz.mul(my)?)?;
    let sz = vz.sqrt_floor(T::zero());
    let sy = vy.sqrt_floor(T::zero());
    let szy = sz.mul(sy)?;
    let num = szy.affine(one, c1).scale(T::of(2.0)).mul(czy.affine(one, c2))?;
    let den = vz.add(vy)?.affine(one, c1).mul(szy.affine(one, c2))?;
    num.div(den)
}

/// Batch-mean similarity between `z` and `y`, higher meaning more alike.
pub fn struct_similarity_var<'g, T: Scalar>(
    z: Var<'g, T>,
    y: Var<'g, T>,
    c1: f64,
    c2: f64,
    variant: SimilarityVariant,
) -> Result<Var<'g, T>> {
    let per_item = match variant {
        SimilarityVariant::StandardSsim => ssim_per_item(z, y, c1, c2)?,
        SimilarityVariant::LiteralEq8 => literal_similarity_per_item(z, y, c1, c2)?,
    };
    let n = per_item.shape()[0];
    Ok(per_item.sum_all().scale(T::of(1.0 / n as f64)))
}

pub fn struct_similarity<T: Scalar>(z: &Tensor<T>, y: &Tensor<T>, c1: f64, c2: f64, variant: SimilarityVariant) -> Result<f64> {
    let g = Graph::new();
    let s = struct_similarity_var(g.constant(z.clone()), g.constant(y.clone()), c1, c2, variant)?;
    let v = s.value().data()[0].f64();
    Ok(v)
}

/// `1 − similarity`, the minimized structural term.
pub fn struct_loss_var<'g, T: Scalar>(z: Var<'g, T>, y: Var<'g, T>, cfg: &LossConfig) -> Result<Var<'g, T>> {
    Ok(struct_similarity_var(z, y, cfg.c1, cfg.c2, cfg.variant)?.affine(-T::one(), T::one()))
}

pub fn struct_loss<T: Scalar>(z: &Tensor<T>, y: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    Ok(1.0 - struct_similarity(z, y, cfg.c1, cfg.c2, cfg.variant)?)
}

/// Mean squared elementwise difference.
pub fn style_loss_var<'g, T: Scalar>(y_star: Var<'g, T>, y: Var<'g, T>) -> Result<Var<'g, T>> {
    let d = y.sub(y_star)?.sqr()?;
    let n = d.shape()[0];
    Ok(d.mean_per_item().sum_all().scale(T::of(1.0 / n as f64)))
}

pub fn style_loss<T: Scalar>(y_star: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let g = Graph::new();
    let v = style_loss_var(g.constant(y_star.clone()), g.constant(y.clone()))?.value().data()[0].f64();
    Ok(v)
}

/// Inner update count at timestep `t`: `max(1, ⌊(1 − t/T)·ist_init⌋)`.
pub fn ist_steps(t: usize, total: usize, ist_init: usize) -> Result<usize> {
    if t > total {
        return Err(Error::Domain(format!("timestep {t} beyond {total}")));
    }
    if total == 0 {
        return Ok(ist_init.max(1));
    }
    Ok(((total - t) * ist_init / total).max(1))
}

/// Prompt images `φ_1..φ_T`; `get(t)` returns `φ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptStack<T> {
    prompts: Vec<Tensor<T>>,
}

impl<T: Scalar> PromptStack<T> {
    pub fn zeros(steps: usize, shape: &[usize]) -> Self {
        Self { prompts: (0..steps).map(|_| Tensor::zeros(shape)).collect() }
    }

    pub fn from_prompts(prompts: Vec<Tensor<T>>) -> Result<Self> {
        if let Some(first) = prompts.first() {
            if prompts.iter().any(|p| p.shape() != first.shape() || !p.all_finite()) {
                return Err(Error::Config("prompts must share one shape and be finite".into()));
            }
        }
        Ok(Self { prompts })
    }

    pub fn steps(&self) -> usize {
        self.prompts.len()
    }

    pub fn get(&self, t: usize) -> &Tensor<T> {
        &self.prompts[t - 1]
    }

    pub fn prompts(&self) -> &[Tensor<T>] {
        &self.prompts
    }

    pub fn is_zero(&self) -> bool {
        self.prompts.iter().all(|p| p.data().iter().all(|v| *v == T::zero()))
    }
}

/// One inner-loop evaluation, taken before that step's update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub t: usize,
    pub inner_step: usize,
    pub struct_loss: f64,
    pub style_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct PromptOutcome<T> {
    pub prompts: PromptStack<T>,
    /// `ȳ_T, ȳ_{T−1}, …, ȳ_0`.
    pub trace: Vec<Tensor<T>>,
    pub log: Vec<LossRecord>,
}

impl<T: Scalar> PromptOutcome<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.trace.last().expect("trace holds at least the pivot")
    }
}

/// One prompted denoising step from `t` to `t − 1`; shared with Stage 3 so
/// the optimization trace and the final sample agree bitwise.
pub fn prompted_step<T: Scalar, M: EpsilonModel<T> + ?Sized>(
    y_t: &Tensor<T>,
    prompt: &Tensor<T>,
    model: &M,
    schedule: &NoiseSchedule,
    t: usize,
    cond: ConditionLabel,
) -> Result<Tensor<T>> {
    let input = y_t.add(prompt)?;
    let eps = model.predict(&input, t, schedule, cond)?;
    ddim_reverse_step(&input, &eps, t, schedule)
}

/// Optimizes `φ_T..φ_1` in turn, starting from the pivot `ȳ_T = x*_T`.
pub fn optimize_prompts<T: Scalar, M: EpsilonModel<T> + ?Sized>(
    x_traj: &Trajectory<T>,
    y_traj: &Trajectory<T>,
    model: &M,
    schedule: &NoiseSchedule,
    target: ConditionLabel,
    cfg: &LossConfig,
) -> Result<PromptOutcome<T>> {
    cfg.validate()?;
    x_traj.check_provenance(model, schedule)?;
    y_traj.check_provenance(model, schedule)?;
    if x_traj.at(0).shape() != y_traj.at(0).shape() {
        return Err(Error::Config(format!(
            "structural latents {:?} and style latents {:?} differ in shape",
            x_traj.at(0).shape(),
            y_traj.at(0).shape()
        )));
    }
    if !model.accepts(target) {
        return Err(Error::Config(format!("model does not accept target label {target}")));
    }
    let total = schedule.total_steps();
    let shape = x_traj.at(0).shape().to_vec();
    let lam = cfg.lambda;
    let mut prompts = vec![Tensor::<T>::zeros(&shape); total];
    let mut trace = vec![x_traj.terminal().clone()];
    let mut log = Vec::new();
    for t in (1..=total).rev() {
        let y_bar = trace.last().expect("nonempty").clone();
        let x_star = x_traj.at(t - 1);
        let y_star = y_traj.at(t - 1);
        let mut phi = Tensor::<T>::zeros(&shape);
        let mut adam = AdamW::<T>::new(AdamConfig::adam(cfg.inner_learning_rate), [shape.as_slice()]);
        for k in 0..ist_steps(t, total, cfg.ist_init)? {
            let g = Graph::new();
            let phi_v = g.param(phi.clone());
            let input = g.constant(y_bar.clone()).add(phi_v)?;
            let eps = model.predict_var(&g, input, t, schedule, target)?;
            let y_prev = ddim_reverse_step_var(input, eps, t, schedule)?;
            // Inactive terms stay off the tape so the other path cannot leak in.
            let s_term = (lam > 0.0).then(|| struct_loss_var(g.constant(x_star.clone()), y_prev, cfg)).transpose()?;
            let y_term = (lam < 1.0).then(|| style_loss_var(g.constant(y_star.clone()), y_prev)).transpose()?;
            let loss = match (s_term, y_term) {
                (Some(s), Some(y)) => s.scale(T::of(lam)).add(y.scale(T::of(1.0 - lam)))?,
                (Some(s), None) => s,
                (None, Some(y)) => y,
                (None, None) => unreachable!("lambda lies in [0, 1]"),
            };
            let value = |v: Option<Var<'_, T>>| v.map(|v| v.value().data()[0].f64());
            let yv = y_prev.value();
            let struct_v = value(s_term).map_or_else(|| struct_loss(x_star, &yv, cfg), Ok)?;
            let style_v = value(y_term).map_or_else(|| style_loss(y_star, &yv), Ok)?;
            let total_v = loss.value().data()[0].f64();
            if !total_v.is_finite() {
                return Err(Error::Optimization { t, step: k, msg: format!("loss is {total_v}") });
            }
            log.push(LossRecord { t, inner_step: k, struct_loss: struct_v, style_loss: style_v, total: total_v });
            let grad = g.backward(loss)?.take(phi_v);
            if !grad.all_finite() {
                return Err(Error::Optimization { t, step: k, msg: "prompt gradient is non-finite".into() });
            }
            drop(g);
            adam.update(&mut [&mut phi], &[grad])?;
            if !phi.all_finite() {
                return Err(Error::Optimization { t, step: k, msg: "prompt became non-finite".into() });
            }
        }
        let next = prompted_step(&y_bar, &phi, model, schedule, t, target)?;
        prompts[t - 1] = phi;
        trace.push(next);
    }
    Ok(PromptOutcome { prompts: PromptStack { prompts }, trace, log })
}

#[derive(Serialize, Deserialize)]
struct PromptRecord {
    steps: usize,
    key: String,
    log: Vec<LossRecord>,
}

/// Prompt stacks stored next to the trajectory cache.
#[derive(Debug, Clone)]
pub struct PromptCache {
    pub dir: PathBuf,
}

impl PromptCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Key over both trajectories, the target label and every loss setting.
    pub fn key(x_traj_hash: &str, y_traj_hash: &str, target: ConditionLabel, cfg: &LossConfig) -> String {
        let cfg = serde_json::to_string(cfg).expect("config serializes");
        key_hash(&["prompts", x_traj_hash, y_traj_hash, &target.to_string(), &cfg])
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.dir.join("prompts").join(format!("{key}.safetensors"))
    }

    pub fn load<T: Scalar>(&self, key: &str) -> Result<Option<(PromptStack<T>, Vec<LossRecord>)>> {
        let path = self.path(key);
        if !path.exists() {
            return Ok(None);
        }
        read_prompts(&path, key).map(Some)
    }

    pub fn store<T: Scalar>(&self, key: &str, prompts: &PromptStack<T>, log: &[LossRecord]) -> Result<PathBuf> {
        let path = self.path(key);
        let names: Vec<String> = (1..=prompts.steps()).map(|t| format!("phi.{t:05}")).collect();
        let tensors: Vec<(String, &Tensor<T>)> = names.into_iter().zip(prompts.prompts.iter()).collect();
        container::write(&path, &tensors, &PromptRecord { steps: prompts.steps(), key: key.into(), log: log.to_vec() })?;
        Ok(path)
    }
}

fn read_prompts<T: Scalar>(path: &Path, key: &str) -> Result<(PromptStack<T>, Vec<LossRecord>)> {
    let (mut tensors, rec): (_, PromptRecord) = container::read(path)?;
    if rec.key != key {
        return Err(Error::Load(format!("{}: stored key does not match", path.display())));
    }
    let prompts = (1..=rec.steps)
        .map(|t| {
            tensors
                .remove(&format!("phi.{t:05}"))
                .ok_or_else(|| Error::Load(format!("{}: missing prompt {t}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((PromptStack::from_prompts(prompts)?, rec.log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn ist_schedule() {
        assert_eq!(ist_steps(0, 100, 50).unwrap(), 50);
        assert_eq!(ist_steps(50, 100, 50).unwrap(), 25);
        assert_eq!(ist_steps(100, 100, 50).unwrap(), 1);
        assert_eq!(ist_steps(99, 100, 50).unwrap(), 1);
        assert!(ist_steps(101, 100, 50).is_err());
    }

    #[test]
    fn self_similarity_is_exactly_one_for_standard_ssim() {
        let a = img(&[2, 3, 9, 11], 1);
        assert_eq!(struct_similarity(&a, &a, 1e-8, 1e-8, SimilarityVariant::StandardSsim).unwrap(), 1.0);
        assert_eq!(struct_loss(&a, &a, &LossConfig::with_lambda(0.5)).unwrap(), 0.0);
    }

    #[test]
    fn literal_ratio_at_identity_exceeds_one_by_its_constant() {
        // With z = y the printed ratio is 2(s² + c1)/(2s² + c1), not 1.
        let a = img(&[1, 3, 8, 8], 2);
        let n = a.numel() as f64;
        let mean = a.data().iter().sum::<f64>() / n;
        let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let c = 1e-3;
        let want = 2.0 * (var + c) / (2.0 * var + c);
        let got = struct_similarity(&a, &a, c, c, SimilarityVariant::LiteralEq8).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn negated_zero_mean_image_has_negative_ssim() {
        // 2×2 single-channel image; the window covers all four pixels.
        let y = Tensor::new(&[1, 1, 2, 2], vec![0.5, -0.5, 0.25, -0.25]).unwrap();
        let z = y.map(|v| -v);
        let mean = 0.0;
        let var = (0.25 + 0.25 + 0.0625 + 0.0625) / 4.0 - mean;
        let cov = -var;
        let c = 1e-8;
        let want = (2.0 * 0.0 + c) * (2.0 * cov + c) / ((0.0 + c) * (2.0 * var + c));
        let got = struct_similarity(&z, &y, c, c, SimilarityVariant::StandardSsim).unwrap();
        assert!(got < 0.0);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    /// Direct per-window SSIM for one plane.
    fn scalar_ssim(a: &[f64], b: &[f64], h: usize, w: usize, k: usize, c1: f64, c2: f64) -> f64 {
        let mut acc = 0.0;
        let mut count = 0.0;
        for y in 0..=h - k {
            for x in 0..=w - k {
                let px: Vec<(f64, f64)> =
                    (0..k).flat_map(|i| (0..k).map(move |j| (y + i) * w + x + j)).map(|p| (a[p], b[p])).collect();
                let n = px.len() as f64;
                let ma = px.iter().map(|p| p.0).sum::<f64>() / n;
                let mb = px.iter().map(|p| p.1).sum::<f64>() / n;
                let va = px.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / n;
                let vb = px.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / n;
                let cv = px.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / n;
                acc += (2.0 * ma * mb + c1) * (2.0 * cv + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        acc / count
    }

    #[test]
    fn offset_checkerboards_match_the_scalar_formula() {
        let board = |shift: usize| -> Vec<f64> {
            (0..64).map(|p| if ((p / 8) + (p % 8) + shift).is_multiple_of(2) { 0.8 } else { -0.6 }).collect()
        };
        let (a, b) = (board(0), board(1));
        let want = scalar_ssim(&a, &b, 8, 8, 7, 1e-4, 9e-4);
        let ta = Tensor::new(&[1, 1, 8, 8], a).unwrap();
        let tb = Tensor::new(&[1, 1, 8, 8], b).unwrap();
        let got = struct_similarity(&ta, &tb, 1e-4, 9e-4, SimilarityVariant::StandardSsim).unwrap();
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    #[test]
    fn style_loss_unit_offset_and_two_pass_oracle() {
        let a = img(&[1, 3, 5, 5], 3);
        assert_eq!(style_loss(&a, &a).unwrap(), 0.0);
        assert!((style_loss(&a, &a.map(|v| v + 1.0)).unwrap() - 1.0).abs() < 1e-12);
        let b = img(&[1, 3, 5, 5], 4);
        let diffs: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let want = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        assert!((style_loss(&a, &b).unwrap() - want).abs() < 1e-10);
    }

    fn central_diff(f: impl Fn(&Tensor<f64>) -> f64, at: &Tensor<f64>, h: f64) -> Vec<f64> {
        (0..at.numel())
            .map(|i| {
                let mut p = at.clone();
                p.data_mut()[i] += h;
                let mut m = at.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check_grad(variant: SimilarityVariant) {
        let z = img(&[1, 1, 4, 4], 5);
        let y = img(&[1, 1, 4, 4], 6);
        let cfg = LossConfig { variant, ..LossConfig::with_lambda(1.0) };
        let g = Graph::new();
        let yv = g.param(y.clone());
        let loss = struct_loss_var(g.constant(z.clone()), yv, &cfg).unwrap();
        let grad = g.backward(loss).unwrap().take(yv);
        let fd = central_diff(|y| struct_loss(&z, y, &cfg).unwrap(), &y, 1e-6);
        for (a, n) in grad.data().iter().zip(&fd) {
            assert!((a - n).abs() <= 1e-3 * n.abs().max(1e-3), "{a} vs {n}");
        }
    }

    #[test]
    fn struct_loss_gradient_matches_finite_differences() {
        check_grad(SimilarityVariant::StandardSsim);
        check_grad(SimilarityVariant::LiteralEq8);
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::with_lambda(1.5).validate().is_err());
        assert!(LossConfig { c1: 0.0, ..LossConfig::with_lambda(0.5) }.validate().is_err());
        assert!(LossConfig { ist_init: 0, ..LossConfig::with_lambda(0.5) }.validate().is_err());
        let parsed: LossConfig = serde_json::from_str(r#"{"lambda": 0.3}"#).unwrap();
        assert_eq!(parsed, LossConfig::with_lambda(0.3));
        assert!(serde_json::from_str::<LossConfig>(r#"{"lambda": 0.3, "lamda": 1}"#).is_err());
    }
}
