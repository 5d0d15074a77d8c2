//! Stage 3 and the end-to-end transfer pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{io, Corpus};
use crate::dual_path::{
    adapt, external_image_adapter, histogram_match_adapter, invert, noisy_oracle_adapter, oracle_recolor_adapter,
    FeatureAdapter, IdentityAdapter, PathKind, Trajectory, TrajectoryCache,
};
use crate::error::{Error, Result, Stage};
use crate::hash::{key_hash, tensor_hash, write_atomic};
use crate::schedule::{ConditionLabel, EpsilonModel, NoiseSchedule};
use crate::stain_prompt::{optimize_prompts, prompted_step, LossConfig, LossRecord, PromptCache, PromptStack, SimilarityVariant};
use crate::tensor::{Scalar, Tensor};

/// Runs `y_{t−1} = reverse_step(y_t + φ_t)` from the pivot down to `t = 0`.
pub fn prompted_sample<T: Scalar, M: EpsilonModel<T> + ?Sized>(
    pivot: &Tensor<T>,
    prompts: &PromptStack<T>,
    model: &M,
    schedule: &NoiseSchedule,
    cond: ConditionLabel,
) -> Result<Tensor<T>> {
    if prompts.steps() != schedule.total_steps() {
        return Err(Error::Config(format!(
            "{} prompts for a {}-step schedule",
            prompts.steps(),
            schedule.total_steps()
        )));
    }
    if let Some(p) = prompts.prompts().first() {
        if p.shape() != pivot.shape() {
            return Err(Error::Config(format!("prompt shape {:?} vs pivot {:?}", p.shape(), pivot.shape())));
        }
    }
    if !pivot.all_finite() {
        return Err(Error::Input("pivot contains non-finite values".into()));
    }
    let mut y = pivot.clone();
    for t in (1..=schedule.total_steps()).rev() {
        y = prompted_step(&y, prompts.get(t), model, schedule, t, cond)?;
    }
    Ok(y)
}

/// Where the style reference `F(x0)` comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdapterSpec {
    Identity,
    /// Paired ground truth when the corpus has it, else exact recoloring.
    Oracle,
    NoisyOracle {
        noise_level: f64,
        #[serde(default = "default_smoothness")]
        smoothness: f64,
    },
    /// Matches channel distributions to target-domain training images.
    HistogramMatch {
        #[serde(default = "default_reference_images")]
        reference_images: usize,
    },
    /// Two-column `sample_id,path` file of precomputed images.
    External { table: PathBuf },
}

fn default_smoothness() -> f64 {
    2.0
}

fn default_reference_images() -> usize {
    32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    /// Reuse entries and fill missing ones.
    #[default]
    ReadWrite,
    /// Recompute everything and overwrite entries.
    Refresh,
    /// Neither read nor write.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    /// Structure weight; style gets `1 − lambda`.
    pub lambda: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_ist")]
    pub ist_init: usize,
    #[serde(default = "tiny")]
    pub c1: f64,
    #[serde(default = "tiny")]
    pub c2: f64,
    #[serde(default = "default_inner_lr")]
    pub inner_learning_rate: f64,
    #[serde(default = "default_variant")]
    pub variant: SimilarityVariant,
    pub source: u8,
    pub target: u8,
    /// Condition of the style path; the learned null label by default.
    #[serde(default = "null_label")]
    pub style_label: ConditionLabel,
    #[serde(default = "default_adapter")]
    pub adapter: AdapterSpec,
    pub seed: u64,
    #[serde(default)]
    pub cache: CachePolicy,
}

fn default_steps() -> usize {
    100
}
fn default_ist() -> usize {
    50
}
fn tiny() -> f64 {
    1e-8
}
fn default_inner_lr() -> f64 {
    1e-2
}
fn default_variant() -> SimilarityVariant {
    SimilarityVariant::StandardSsim
}
fn null_label() -> ConditionLabel {
    ConditionLabel::Null
}
fn default_adapter() -> AdapterSpec {
    AdapterSpec::Oracle
}

impl TransferConfig {
    pub fn new(lambda: f64, source: u8, target: u8, seed: u64) -> Self {
        Self {
            lambda,
            steps: default_steps(),
            ist_init: default_ist(),
            c1: tiny(),
            c2: tiny(),
            inner_learning_rate: default_inner_lr(),
            variant: default_variant(),
            source,
            target,
            style_label: null_label(),
            adapter: default_adapter(),
            seed,
            cache: CachePolicy::default(),
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            c1: self.c1,
            c2: self.c2,
            ist_init: self.ist_init,
            inner_learning_rate: self.inner_learning_rate,
            variant: self.variant,
        }
    }

    pub fn source_label(&self) -> ConditionLabel {
        ConditionLabel::Domain(self.source)
    }

    pub fn target_label(&self) -> ConditionLabel {
        ConditionLabel::Domain(self.target)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        if let AdapterSpec::NoisyOracle { noise_level, smoothness } = self.adapter {
            if !(noise_level >= 0.0 && smoothness >= 0.0) {
                return Err(Error::Config("noise_level and smoothness must be nonnegative".into()));
            }
        }
        Ok(())
    }
}

/// Builds the adapter named by `cfg`. Corpus-backed adapters need `corpus`.
pub fn build_adapter(cfg: &TransferConfig, corpus: Option<&Corpus>) -> Result<Box<dyn FeatureAdapter>> {
    let need = || corpus.ok_or_else(|| Error::Config("this adapter needs a corpus".into()));
    Ok(match &cfg.adapter {
        AdapterSpec::Identity => Box::new(IdentityAdapter),
        AdapterSpec::Oracle => {
            let c = need()?;
            let a = oracle_recolor_adapter(c.domain(cfg.source)?.clone(), c.domain(cfg.target)?.clone())?;
            Box::new(a.with_corpus(c.clone()))
        }
        AdapterSpec::NoisyOracle { noise_level, smoothness } => {
            let c = need()?;
            let mut a =
                noisy_oracle_adapter(c.domain(cfg.source)?.clone(), c.domain(cfg.target)?.clone(), *noise_level, *smoothness, cfg.seed)?;
            a.oracle = a.oracle.with_corpus(c.clone());
            Box::new(a)
        }
        AdapterSpec::HistogramMatch { reference_images } => {
            let c = need()?;
            let refs = c
                .select(Some(cfg.target), Some("train"))
                .into_iter()
                .take(*reference_images)
                .map(|r| Ok(c.load(r)?.cast()))
                .collect::<Result<Vec<_>>>()?;
            Box::new(histogram_match_adapter(&refs)?)
        }
        AdapterSpec::External { table } => Box::new(external_image_adapter(read_lookup_table(table)?)?),
    })
}

/// Parses a `sample_id,path` table; relative paths resolve against the table's directory.
pub fn read_lookup_table(path: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("sample_id")) {
            continue;
        }
        let (id, p) = line
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected `sample_id,path`", path.display(), i + 1)))?;
        out.insert(id.trim().to_string(), base.join(p.trim()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub trajectory_s: f64,
    pub optimization_s: f64,
    pub sampling_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheKeys {
    pub structural: String,
    pub style: String,
    pub prompts: String,
    pub structural_hit: bool,
    pub style_hit: bool,
    pub prompts_hit: bool,
}

#[derive(Debug, Clone)]
pub struct TransferResult<T> {
    pub sample_id: String,
    /// Final latent `y_0`, unclamped.
    pub output: Tensor<T>,
    /// The adapter's reference image `y*_0`.
    pub adapter_output: Tensor<T>,
    pub pivot_hash: String,
    pub structural_hash: String,
    pub style_hash: String,
    pub prompts: PromptStack<T>,
    pub log: Vec<LossRecord>,
    pub config: TransferConfig,
    pub adapter: String,
    pub model_hash: String,
    pub cache: Option<CacheKeys>,
    pub timings: StageTimings,
    /// Filled by the evaluation step.
    pub metrics: BTreeMap<String, f64>,
}

impl<T: Scalar> TransferResult<T> {
    /// The output as exported: clamped to `[−1, 1]` and quantized to 8 bits.
    pub fn exported(&self) -> Tensor<T> {
        io::quantize(&self.output)
    }
}

fn trajectories<T: Scalar, M: EpsilonModel<T> + ?Sized>(
    sample_id: &str,
    x0: &Tensor<T>,
    cfg: &TransferConfig,
    model: &M,
    schedule: &NoiseSchedule,
    adapter: &dyn FeatureAdapter,
    cache: Option<&TrajectoryCache>,
) -> Result<(Trajectory<T>, Trajectory<T>, Tensor<T>, Option<(String, String, bool, bool)>)> {
    let image_hash = tensor_hash(x0);
    let y0 = adapt(adapter, sample_id, &x0.cast())?.cast::<T>();
    let build_x = || invert(x0, model, schedule, cfg.source_label(), PathKind::Structural);
    let build_y = || invert(&y0, model, schedule, cfg.style_label, PathKind::Style);
    let Some(cache) = cache else {
        return Ok((build_x()?, build_y()?, y0, None));
    };
    let mh = model.weights_hash();
    let xk = TrajectoryCache::key(&mh, schedule, &image_hash, cfg.source_label(), PathKind::Structural);
    let style_origin = key_hash(&[&adapter.describe(), sample_id, &image_hash, &tensor_hash(&y0)]);
    let yk = TrajectoryCache::key(&mh, schedule, &style_origin, cfg.style_label, PathKind::Style);
    let fetch = |key: &str, build: &dyn Fn() -> Result<Trajectory<T>>| -> Result<(Trajectory<T>, bool)> {
        if cfg.cache == CachePolicy::ReadWrite {
            if let Some(t) = cache.load(key)? {
                t.check_provenance(model, schedule)?;
                return Ok((t, true));
            }
        }
        let t = build()?;
        cache.store(key, &t)?;
        Ok((t, false))
    };
    let (x, xh) = fetch(&xk, &build_x)?;
    let (y, yh) = fetch(&yk, &build_y)?;
    Ok((x, y, y0, Some((xk, yk, xh, yh))))
}

/// Full pipeline for one image: dual-path inversion, prompt optimization and
/// prompted sampling from the structural pivot. `base_schedule` is the
/// model's training schedule; it is subsampled to `cfg.steps`.
pub fn transfer<T: Scalar, M: EpsilonModel<T> + ?Sized>(
    sample_id: &str,
    x0: &Tensor<T>,
    cfg: &TransferConfig,
    model: &M,
    base_schedule: &NoiseSchedule,
    adapter: &dyn FeatureAdapter,
    cache_dir: Option<&Path>,
) -> Result<TransferResult<T>> {
    cfg.validate()?;
    let (target, source) = (cfg.target_label(), cfg.source_label());
    for label in [source, target, cfg.style_label] {
        if !model.accepts(label) {
            return Err(Error::Config(format!("model does not accept label {label}")));
        }
    }
    let schedule = base_schedule.subsample(cfg.steps)?;
    let cache_dir = cache_dir.filter(|_| cfg.cache != CachePolicy::Off);
    let traj_cache = cache_dir.map(TrajectoryCache::new);
    let prompt_cache = cache_dir.map(PromptCache::new);
    let mut timings = StageTimings::default();

    let clock = Instant::now();
    let (x_traj, y_traj, y0, traj_keys) =
        trajectories(sample_id, x0, cfg, model, &schedule, adapter, traj_cache.as_ref()).map_err(|e| e.in_stage(Stage::Trajectory))?;
    timings.trajectory_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let loss_cfg = cfg.loss_config();
    let (xh, yh) = (x_traj.hash(), y_traj.hash());
    let pkey = PromptCache::key(&xh, &yh, target, &loss_cfg);
    let cached = match (&prompt_cache, cfg.cache) {
        (Some(pc), CachePolicy::ReadWrite) => pc.load::<T>(&pkey).map_err(|e| e.in_stage(Stage::Optimization))?,
        _ => None,
    };
    let prompts_hit = cached.is_some();
    let (prompts, log) = match cached {
        Some(hit) => hit,
        None => {
            let out = optimize_prompts(&x_traj, &y_traj, model, &schedule, target, &loss_cfg)
                .map_err(|e| e.in_stage(Stage::Optimization))?;
            if let Some(pc) = &prompt_cache {
                pc.store(&pkey, &out.prompts, &out.log).map_err(|e| e.in_stage(Stage::Optimization))?;
            }
            (out.prompts, out.log)
        }
    };
    timings.optimization_s = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let output = prompted_sample(x_traj.terminal(), &prompts, model, &schedule, target).map_err(|e| e.in_stage(Stage::Sampling))?;
    timings.sampling_s = clock.elapsed().as_secs_f64();

    let cache = traj_keys.map(|(structural, style, structural_hit, style_hit)| CacheKeys {
        structural,
        style,
        prompts: pkey,
        structural_hit,
        style_hit,
        prompts_hit,
    });
    Ok(TransferResult {
        sample_id: sample_id.into(),
        output,
        adapter_output: y0,
        pivot_hash: tensor_hash(x_traj.terminal()),
        structural_hash: xh,
        style_hash: yh,
        prompts,
        log,
        config: cfg.clone(),
        adapter: adapter.describe(),
        model_hash: model.weights_hash(),
        cache,
        timings,
        metrics: BTreeMap::new(),
    })
}

#[derive(Serialize)]
struct Sidecar<'a> {
    sample_id: &'a str,
    image: String,
    output_hash: String,
    config: &'a TransferConfig,
    adapter: &'a str,
    model_hash: &'a str,
    structural_trajectory_hash: &'a str,
    style_trajectory_hash: &'a str,
    cache: &'a Option<CacheKeys>,
    timings: &'a StageTimings,
    metrics: &'a BTreeMap<String, f64>,
    final_losses: Option<&'a LossRecord>,
}

/// Writes `<dir>/<id>.png` and the `<id>.json` run record; returns the image path.
pub fn write_result<T: Scalar>(dir: &Path, r: &TransferResult<T>) -> Result<PathBuf> {
    let png = dir.join(format!("{}.png", r.sample_id));
    let exported = r.exported();
    io::save_png(&png, &exported)?;
    let rec = Sidecar {
        sample_id: &r.sample_id,
        image: png.file_name().expect("has name").to_string_lossy().into_owned(),
        output_hash: tensor_hash(&exported),
        config: &r.config,
        adapter: &r.adapter,
        model_hash: &r.model_hash,
        structural_trajectory_hash: &r.structural_hash,
        style_trajectory_hash: &r.style_hash,
        cache: &r.cache,
        timings: &r.timings,
        metrics: &r.metrics,
        final_losses: r.log.last(),
    };
    let json = serde_json::to_vec_pretty(&rec)?;
    write_atomic(&dir.join(format!("{}.json", r.sample_id)), &json)?;
    Ok(png)
}

/// One image to transfer.
pub struct SweepInput<'a, T> {
    pub sample_id: &'a str,
    pub image: &'a Tensor<T>,
}

/// Transfers every input at every λ, reusing Stage-1 trajectories through the
/// cache, and hands each λ's results to `evaluate`.
pub fn lambda_sweep<T: Scalar, M: EpsilonModel<T> + ?Sized, R>(
    inputs: &[SweepInput<'_, T>],
    grid: &[f64],
    cfg: &TransferConfig,
    model: &M,
    base_schedule: &NoiseSchedule,
    adapter: &dyn FeatureAdapter,
    cache_dir: Option<&Path>,
    mut evaluate: impl FnMut(f64, &[TransferResult<T>]) -> Result<R>,
) -> Result<Vec<(f64, R)>> {
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    if let Some(l) = grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Config(format!("lambda {l} outside [0, 1]")));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let c = TransferConfig { lambda, ..cfg.clone() };
        let results = inputs
            .iter()
            .map(|i| transfer(i.sample_id, i.image, &c, model, base_schedule, adapter, cache_dir))
            .collect::<Result<Vec<_>>>()?;
        rows.push((lambda, evaluate(lambda, &results)?));
    }
    Ok(rows)
}
