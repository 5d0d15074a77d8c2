//! Stage 1: the structural and style inversion paths, and the feature
//! adapters that supply the style reference image.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::datasets::{io, Corpus, StainDomain};
use crate::error::{Error, Result};
use crate::hash::{key_hash, tensor_hash};
use crate::schedule::{ddim_inverse_step, ConditionLabel, EpsilonModel, NoiseSchedule};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    Structural,
    Style,
}

/// Latents `x_0..x_T` of one deterministic inversion under a single condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    latents: Vec<Tensor<T>>,
    pub condition: ConditionLabel,
    pub kind: PathKind,
    pub schedule_hash: String,
    pub model_hash: String,
}

impl<T: Scalar> Trajectory<T> {
    /// Wraps latents computed elsewhere, stamped with the given provenance.
    /// Nothing is re-derived here; [`Trajectory::verify`] does that.
    pub fn from_latents<M: EpsilonModel<T> + ?Sized>(
        latents: Vec<Tensor<T>>,
        condition: ConditionLabel,
        kind: PathKind,
        schedule: &NoiseSchedule,
        model: &M,
    ) -> Result<Self> {
        let Some(first) = latents.first() else {
            return Err(Error::Shape("a trajectory needs at least one latent".into()));
        };
        if let Some(bad) = latents.iter().find(|l| l.shape() != first.shape()) {
            return Err(Error::Shape(format!("latent shapes {:?} and {:?} within one trajectory", first.shape(), bad.shape())));
        }
        Ok(Self { latents, condition, kind, schedule_hash: schedule.hash(), model_hash: model.weights_hash() })
    }

    pub fn steps(&self) -> usize {
        self.latents.len() - 1
    }

    pub fn latents(&self) -> &[Tensor<T>] {
        &self.latents
    }

    pub fn at(&self, t: usize) -> &Tensor<T> {
        &self.latents[t]
    }

    /// The pivot `x_T`.
    pub fn terminal(&self) -> &Tensor<T> {
        self.latents.last().expect("trajectory is never empty")
    }

    /// Digest of every latent plus provenance.
    pub fn hash(&self) -> String {
        let hashes: Vec<String> = self.latents.iter().map(tensor_hash).collect();
        let mut parts: Vec<&str> = hashes.iter().map(String::as_str).collect();
        let cond = self.condition.to_string();
        parts.extend([cond.as_str(), &self.schedule_hash, &self.model_hash]);
        key_hash(&parts)
    }

    /// Recomputes every step from its predecessor and demands bitwise equality.
    pub fn verify<M: EpsilonModel<T> + ?Sized>(&self, model: &M, schedule: &NoiseSchedule) -> Result<()> {
        self.check_provenance(model, schedule)?;
        for t in 0..self.steps() {
            let next = inverse_step(&self.latents[t], model, schedule, t, self.condition)?;
            if next != self.latents[t + 1] {
                return Err(Error::Numeric(format!("trajectory step {t}→{} does not re-derive", t + 1)));
            }
        }
        Ok(())
    }

    pub fn check_provenance<M: EpsilonModel<T> + ?Sized>(&self, model: &M, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps() != schedule.total_steps() || self.schedule_hash != schedule.hash() {
            return Err(Error::Config(format!(
                "trajectory of {} steps was built for a different schedule than the {}-step one supplied",
                self.steps(),
                schedule.total_steps()
            )));
        }
        if self.model_hash != model.weights_hash() {
            return Err(Error::Config("trajectory was built with different model weights".into()));
        }
        Ok(())
    }
}

fn inverse_step<T: Scalar, M: EpsilonModel<T> + ?Sized>(
    x: &Tensor<T>,
    model: &M,
    schedule: &NoiseSchedule,
    t: usize,
    cond: ConditionLabel,
) -> Result<Tensor<T>> {
    let eps = model.predict(x, t, schedule, cond)?;
    let next = ddim_inverse_step(x, &eps, t, schedule).map_err(|e| Error::Numeric(format!("at timestep {t}: {e}")))?;
    if !next.all_finite() {
        return Err(Error::Numeric(format!("latent became non-finite at timestep {}", t + 1)));
    }
    Ok(next)
}

/// Inverts `x0` from `t = 0` to `T` under one condition.
pub fn invert<T: Scalar, M: EpsilonModel<T> + ?Sized>(
    x0: &Tensor<T>,
    model: &M,
    schedule: &NoiseSchedule,
    cond: ConditionLabel,
    kind: PathKind,
) -> Result<Trajectory<T>> {
    if !model.accepts(cond) {
        return Err(Error::Config(format!("model does not accept label {cond}")));
    }
    x0.dims4()?;
    if !x0.all_finite() {
        return Err(Error::Input("input image contains non-finite values".into()));
    }
    let mut latents = Vec::with_capacity(schedule.total_steps() + 1);
    latents.push(x0.clone());
    for t in 0..schedule.total_steps() {
        let next = inverse_step(&latents[t], model, schedule, t, cond)?;
        latents.push(next);
    }
    Ok(Trajectory { latents, condition: cond, kind, schedule_hash: schedule.hash(), model_hash: model.weights_hash() })
}

/// Structural target path: the source image inverted under its own label.
pub fn build_structural_trajectory<T: Scalar, M: EpsilonModel<T> + ?Sized>(
    x0: &Tensor<T>,
    model: &M,
    schedule: &NoiseSchedule,
    source: ConditionLabel,
) -> Result<Trajectory<T>> {
    invert(x0, model, schedule, source, PathKind::Structural)
}

/// Style target path: `F(x0)` computed once, then inverted under `style_cond`
/// (the null label unless deliberately overridden).
pub fn build_style_trajectory<T: Scalar, M: EpsilonModel<T> + ?Sized>(
    sample_id: &str,
    x0: &Tensor<T>,
    adapter: &dyn FeatureAdapter,
    model: &M,
    schedule: &NoiseSchedule,
    style_cond: ConditionLabel,
) -> Result<Trajectory<T>> {
    let y0 = adapt(adapter, sample_id, &x0.cast())?;
    invert(&y0.cast(), model, schedule, style_cond, PathKind::Style)
}

/// Applies `adapter` and validates that the result is a usable image.
pub fn adapt(adapter: &dyn FeatureAdapter, sample_id: &str, x0: &Tensor<f64>) -> Result<Tensor<f64>> {
    let y = adapter.apply(sample_id, x0)?;
    if y.shape() != x0.shape() {
        return Err(Error::Adapter(format!(
            "{} returned shape {:?} for input {:?}",
            adapter.describe(),
            y.shape(),
            x0.shape()
        )));
    }
    if y.data().iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
        return Err(Error::Adapter(format!("{} produced values outside [-1, 1] for {sample_id}", adapter.describe())));
    }
    Ok(y)
}

/// Image-to-image function supplying a target-style reference `F(x)`.
pub trait FeatureAdapter: Sync {
    /// `image` is `1×3×H×W` in `[−1, 1]`; `sample_id` identifies it for
    /// adapters that work from precomputed or paired data.
    fn apply(&self, sample_id: &str, image: &Tensor<f64>) -> Result<Tensor<f64>>;

    /// Stable description used in cache keys and run records.
    fn describe(&self) -> String;
}

/// Returns its input unchanged.
pub struct IdentityAdapter;

impl FeatureAdapter for IdentityAdapter {
    fn apply(&self, _sample_id: &str, image: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(image.clone())
    }

    fn describe(&self) -> String {
        "identity".into()
    }
}

/// Perfect recoloring. With a paired corpus attached it returns the stored
/// target-domain render of the sample; otherwise it recovers the density
/// field under `source` and re-renders it with `target` at 8-bit levels.
pub struct OracleAdapter {
    pub source: StainDomain,
    pub target: StainDomain,
    paired: Option<Corpus>,
}

pub fn oracle_recolor_adapter(source: StainDomain, target: StainDomain) -> Result<OracleAdapter> {
    source.validate()?;
    target.validate()?;
    Ok(OracleAdapter { source, target, paired: None })
}

impl OracleAdapter {
    /// Serves ground truth from `corpus` for sample ids it contains.
    pub fn with_corpus(mut self, corpus: Corpus) -> Self {
        self.paired = Some(corpus);
        self
    }
}

impl FeatureAdapter for OracleAdapter {
    fn apply(&self, sample_id: &str, image: &Tensor<f64>) -> Result<Tensor<f64>> {
        if let Some(r) = self.paired.as_ref().and_then(|c| c.find(sample_id, self.target.id)) {
            let truth = self.paired.as_ref().expect("checked").load(r)?.cast();
            if truth.shape() != image.shape() {
                return Err(Error::Adapter(format!("paired render of {sample_id} has shape {:?}", truth.shape())));
            }
            return Ok(truth);
        }
        let content = self.source.invert(image)?;
        Ok(io::quantize(&self.target.render::<f64>(&content)?))
    }

    fn describe(&self) -> String {
        let paired = if self.paired.is_some() { ":paired" } else { "" };
        format!("oracle:{}->{}{paired}", self.source.name, self.target.name)
    }
}

/// Oracle output plus a smooth per-channel perturbation whose RMS is
/// `noise_level`, seeded from `seed` and the input's content hash.
pub struct NoisyOracleAdapter {
    pub oracle: OracleAdapter,
    pub noise_level: f64,
    /// Gaussian blur radius (pixels) that sets the perturbation's spatial scale.
    pub smoothness: f64,
    pub seed: u64,
}

pub fn noisy_oracle_adapter(
    source: StainDomain,
    target: StainDomain,
    noise_level: f64,
    smoothness: f64,
    seed: u64,
) -> Result<NoisyOracleAdapter> {
    if !(noise_level >= 0.0) || !(smoothness >= 0.0) {
        return Err(Error::Config(format!(
            "noise_level and smoothness must be nonnegative, got {noise_level} and {smoothness}"
        )));
    }
    Ok(NoisyOracleAdapter { oracle: oracle_recolor_adapter(source, target)?, noise_level, smoothness, seed })
}

/// Same-size Gaussian blur with edge clamping.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let o = j as isize - r;
                    let (yy, xx) = if horizontal {
                        (y as isize, (x as isize + o).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + o).clamp(0, h as isize - 1), x as isize)
                    };
                    s += kv * src[yy as usize * w + xx as usize];
                }
                out[y * w + x] = s / ks;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

impl FeatureAdapter for NoisyOracleAdapter {
    fn apply(&self, sample_id: &str, image: &Tensor<f64>) -> Result<Tensor<f64>> {
        let clean = self.oracle.apply(sample_id, image)?;
        if self.noise_level == 0.0 {
            return Ok(clean);
        }
        let (_, c, h, w) = clean.dims4()?;
        let digest = key_hash(&[&self.seed.to_string(), &tensor_hash(image)]);
        let mut seed = [0u8; 32];
        hex::decode_to_slice(&digest, &mut seed).expect("sha256 hex");
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut out = clean.data().to_vec();
        for k in 0..c {
            let white: Tensor<f64> = Tensor::randn(&[h * w], &mut rng);
            let field = gaussian_blur(white.data(), h, w, self.smoothness);
            let rms = (field.iter().map(|v| v * v).sum::<f64>() / field.len() as f64).sqrt().max(1e-12);
            for (o, f) in out[k * h * w..(k + 1) * h * w].iter_mut().zip(&field) {
                *o = (*o + self.noise_level * f / rms).clamp(-1.0, 1.0);
            }
        }
        Ok(io::quantize(&Tensor::new(clean.shape(), out)?))
    }

    fn describe(&self) -> String {
        format!("noisy-{}:level={}:smooth={}:seed={}", self.oracle.describe(), self.noise_level, self.smoothness, self.seed)
    }
}

/// Per-channel rank-quantile mapping onto the pooled distribution of a
/// reference image set.
pub struct HistogramMatchAdapter {
    /// Sorted pooled values per channel.
    pooled: Vec<Vec<f64>>,
    hash: String,
}

pub fn histogram_match_adapter(reference: &[Tensor<f64>]) -> Result<HistogramMatchAdapter> {
    if reference.is_empty() {
        return Err(Error::Config("histogram matching needs at least one reference image".into()));
    }
    let c = reference[0].dims4()?.1;
    let mut pooled = vec![Vec::new(); c];
    let mut hashes = Vec::new();
    for r in reference {
        let (n, rc, h, w) = r.dims4()?;
        if rc != c {
            return Err(Error::Shape(format!("reference images mix {c} and {rc} channels")));
        }
        for i in 0..n {
            let item = &r.data()[i * c * h * w..(i + 1) * c * h * w];
            for (k, p) in pooled.iter_mut().enumerate() {
                p.extend_from_slice(&item[k * h * w..(k + 1) * h * w]);
            }
        }
        hashes.push(tensor_hash(r));
    }
    for p in &mut pooled {
        p.sort_by(f64::total_cmp);
    }
    let parts: Vec<&str> = hashes.iter().map(String::as_str).collect();
    Ok(HistogramMatchAdapter { pooled, hash: key_hash(&parts) })
}

impl HistogramMatchAdapter {
    pub fn pooled_means(&self) -> Vec<f64> {
        self.pooled.iter().map(|p| p.iter().sum::<f64>() / p.len() as f64).collect()
    }
}

impl FeatureAdapter for HistogramMatchAdapter {
    fn apply(&self, _sample_id: &str, image: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (n, c, h, w) = image.dims4()?;
        if c != self.pooled.len() {
            return Err(Error::Shape(format!("image has {c} channels, reference {}", self.pooled.len())));
        }
        let hw = h * w;
        let mut out = vec![0f64; image.numel()];
        let mut order: Vec<usize> = (0..hw).collect();
        for plane in 0..n * c {
            let src = &image.data()[plane * hw..(plane + 1) * hw];
            let refv = &self.pooled[plane % c];
            order.sort_by(|&a, &b| src[a].total_cmp(&src[b]).then(a.cmp(&b)));
            for (rank, &p) in order.iter().enumerate() {
                let q = (rank as f64 + 0.5) / hw as f64;
                out[plane * hw + p] = refv[((q * refv.len() as f64) as usize).min(refv.len() - 1)];
            }
        }
        Tensor::new(image.shape(), out)
    }

    fn describe(&self) -> String {
        format!("histogram-match:{}", &self.hash[..16])
    }
}

/// Precomputed images from another tool, looked up by sample id.
pub struct ExternalImageAdapter {
    table: BTreeMap<String, PathBuf>,
}

pub fn external_image_adapter(table: BTreeMap<String, PathBuf>) -> Result<ExternalImageAdapter> {
    if let Some((id, p)) = table.iter().find(|(_, p)| !p.is_file()) {
        return Err(Error::Config(format!("external image for {id} not found at {}", p.display())));
    }
    Ok(ExternalImageAdapter { table })
}

impl FeatureAdapter for ExternalImageAdapter {
    fn apply(&self, sample_id: &str, _image: &Tensor<f64>) -> Result<Tensor<f64>> {
        let path = self
            .table
            .get(sample_id)
            .ok_or_else(|| Error::Adapter(format!("no external image registered for sample {sample_id}")))?;
        io::load_png(path)
    }

    fn describe(&self) -> String {
        let mut parts = Vec::new();
        for (k, v) in &self.table {
            parts.push(k.clone());
            parts.push(v.display().to_string());
        }
        let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
        format!("external:{}", &key_hash(&refs)[..16])
    }
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    condition: ConditionLabel,
    kind: PathKind,
    steps: usize,
    schedule_hash: String,
    model_hash: String,
}

/// On-disk store of trajectories keyed by everything that determines them.
#[derive(Debug, Clone)]
pub struct TrajectoryCache {
    pub dir: PathBuf,
}

impl TrajectoryCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// `origin` is the hash of `x0` for structural paths and of the adapter
    /// description plus `x0` for style paths.
    pub fn key(model_hash: &str, schedule: &NoiseSchedule, origin: &str, cond: ConditionLabel, kind: PathKind) -> String {
        let kind = serde_json::to_string(&kind).expect("enum serializes");
        key_hash(&["trajectory", model_hash, &schedule.hash(), origin, &cond.to_string(), &kind])
    }

    pub fn path(&self, key: &str) -> PathBuf {
        self.dir.join("trajectories").join(format!("{key}.safetensors"))
    }

    pub fn load<T: Scalar>(&self, key: &str) -> Result<Option<Trajectory<T>>> {
        let path = self.path(key);
        if !path.exists() {
            return Ok(None);
        }
        read_trajectory(&path).map(Some)
    }

    pub fn store<T: Scalar>(&self, key: &str, traj: &Trajectory<T>) -> Result<PathBuf> {
        let path = self.path(key);
        write_trajectory(&path, traj)?;
        Ok(path)
    }

    /// Returns the cached trajectory or builds and stores it; the flag is
    /// `true` on a cache hit.
    pub fn get_or_build<T: Scalar>(
        &self,
        key: &str,
        build: impl FnOnce() -> Result<Trajectory<T>>,
    ) -> Result<(Trajectory<T>, bool)> {
        if let Some(t) = self.load(key)? {
            return Ok((t, true));
        }
        let t = build()?;
        self.store(key, &t)?;
        Ok((t, false))
    }
}

pub fn write_trajectory<T: Scalar>(path: &Path, traj: &Trajectory<T>) -> Result<()> {
    let names: Vec<String> = (0..traj.latents.len()).map(|t| format!("latent.{t:05}")).collect();
    let tensors: Vec<(String, &Tensor<T>)> = names.into_iter().zip(traj.latents.iter()).collect();
    let rec = TrajectoryRecord {
        condition: traj.condition,
        kind: traj.kind,
        steps: traj.steps(),
        schedule_hash: traj.schedule_hash.clone(),
        model_hash: traj.model_hash.clone(),
    };
    container::write(path, &tensors, &rec)
}

pub fn read_trajectory<T: Scalar>(path: &Path) -> Result<Trajectory<T>> {
    let (mut tensors, rec): (_, TrajectoryRecord) = container::read(path)?;
    let latents = (0..=rec.steps)
        .map(|t| {
            tensors
                .remove(&format!("latent.{t:05}"))
                .ok_or_else(|| Error::Load(format!("{}: missing latent {t}", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        latents,
        condition: rec.condition,
        kind: rec.kind,
        schedule_hash: rec.schedule_hash,
        model_hash: rec.model_hash,
    })
}
