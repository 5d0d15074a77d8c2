use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use stainprompt::datasets::{io, Corpus};
use stainprompt::diffusion::DiffusionModel;
use stainprompt::dual_path::FeatureAdapter;
use stainprompt::hash::write_atomic;
use stainprompt::metrics::{metric_report, write_metrics_csv, Evaluated, Featurizer, MetricBundle};
use stainprompt::sampler::{build_adapter, transfer, write_result, TransferConfig, TransferResult};
use stainprompt::Tensor;

use super::{create_dir, obtain_featurizer, open_corpus_recorded, open_model, parallel_map, FeaturizerSection, Globals, Item, Selection};
use crate::config::{int, load, parse, section_with, substream, Loaded};
use crate::manifest::Recorder;
use crate::plot::{line_plot, Series};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferCommandConfig {
    pub seed: u64,
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    #[serde(default)]
    pub samples: Selection,
    /// Pipeline settings; `seed` is derived from the top-level seed.
    pub transfer: toml::Table,
    pub featurizer: Option<FeaturizerSection>,
    /// Present only in sweep configs.
    #[serde(default)]
    pub sweep: Option<toml::Table>,
}

/// Everything a transfer or sweep run needs, opened once.
pub struct Session {
    pub cfg: Loaded<TransferCommandConfig>,
    pub out: PathBuf,
    pub corpus: Corpus,
    pub model: DiffusionModel<f32>,
    pub transfer: TransferConfig,
    pub adapter: Box<dyn FeatureAdapter>,
    pub items: Vec<Item>,
    pub featurizer: Option<Featurizer>,
    pub rec: Recorder,
}

pub fn open_session(g: &Globals, command: &str) -> Result<Session> {
    let cfg = load::<TransferCommandConfig>(g.config, g.seed)?;
    let c = &cfg.config;
    match (command, &c.sweep) {
        ("transfer", Some(_)) => anyhow::bail!("`sweep` belongs in sweep configs"),
        ("sweep", None) => anyhow::bail!("sweep config needs a [sweep] table"),
        _ => {}
    }
    let out = cfg.path(&c.out);
    create_dir(&out)?;
    let mut rec = Recorder::new(command, g.config, &cfg.table, c.seed, g.workers)?;
    let corpus = open_corpus_recorded(&cfg.path(&c.corpus), &mut rec)?;
    let model = open_model(&cfg.path(&c.checkpoint), &mut rec)?;
    let tseed = substream(c.seed, "transfer");
    rec.substream("transfer", tseed);
    let mut transfer: TransferConfig = parse(&section_with(&cfg.table, "transfer", &[("seed", int(tseed))])?).context("invalid [transfer] section")?;
    if let stainprompt::sampler::AdapterSpec::External { table } = &transfer.adapter {
        transfer.adapter = stainprompt::sampler::AdapterSpec::External { table: cfg.path(table) };
    }
    transfer.validate()?;
    let adapter = build_adapter(&transfer, Some(&corpus))?;
    let items = c.samples.load(&corpus, transfer.source)?;
    let featurizer = match &c.featurizer {
        Some(f) => Some(obtain_featurizer(f, &cfg.path(&f.path), &corpus, c.seed, &mut rec)?),
        None => None,
    };
    Ok(Session { out, corpus, model, transfer, adapter, items, featurizer, rec, cfg })
}

pub fn transfer_all(s: &Session, cfg: &TransferConfig, workers: usize, cache: Option<&Path>) -> Result<Vec<TransferResult<f32>>> {
    parallel_map(&s.items, workers, |it| {
        transfer(&it.id, &it.image, cfg, &s.model, &s.model.schedule, s.adapter.as_ref(), cache).with_context(|| format!("transferring {}", it.id))
    })
}

/// Target-domain images of the selection's split, the reference set for
/// Fréchet distances.
pub fn reference_set(corpus: &Corpus, target: u8, split: &str) -> Result<Vec<Tensor<f32>>> {
    corpus.select(Some(target), Some(split)).into_iter().map(|r| Ok(corpus.load(r)?)).collect()
}

/// Scores exported outputs against the paired target renders; `None` when
/// the corpus has no ground truth for some image.
pub fn score(
    corpus: &Corpus,
    outputs: &[(String, Tensor<f32>)],
    target: u8,
    lambda: Option<f64>,
    reference: &[Tensor<f32>],
    featurizer: Option<&Featurizer>,
    seed: u64,
) -> Result<Option<MetricBundle>> {
    let mut truths = Vec::with_capacity(outputs.len());
    for (id, _) in outputs {
        match corpus.find(id, target) {
            Some(r) => truths.push(corpus.load(r)?),
            None => return Ok(None),
        }
    }
    let items: Vec<Evaluated> =
        outputs.iter().zip(&truths).map(|((id, o), t)| Evaluated { image_id: id, output: o, truth: t }).collect();
    Ok(Some(metric_report(&items, lambda, reference, featurizer, seed)?))
}

/// Writes images, adapter references, loss logs and metrics for one result
/// set into `dir`; returns the metric bundle if ground truth exists.
pub fn write_set(
    s: &mut Session,
    dir: &Path,
    results: &mut [TransferResult<f32>],
    lambda: Option<f64>,
    reference: &[Tensor<f32>],
) -> Result<Option<MetricBundle>> {
    let images = dir.join("images");
    let adapter_dir = dir.join("adapter");
    create_dir(&images)?;
    create_dir(&adapter_dir)?;
    let outputs: Vec<(String, Tensor<f32>)> = results.iter().map(|r| (r.sample_id.clone(), r.exported())).collect();
    let bundle = score(&s.corpus, &outputs, s.transfer.target, lambda, reference, s.featurizer.as_ref(), substream(s.cfg.config.seed, "bootstrap"))?;
    if let Some(b) = &bundle {
        for (r, m) in results.iter_mut().zip(&b.rows) {
            r.metrics.insert("ssim".into(), m.ssim);
            r.metrics.insert("ms_ssim".into(), m.ms_ssim);
            r.metrics.insert("psnr_db".into(), m.psnr_db);
        }
    }
    let mut log = String::from("sample_id,t,inner_step,struct_loss,style_loss,total\n");
    let mut curves = Vec::new();
    for r in results.iter() {
        let png = write_result(&images, r)?;
        s.rec.output(&png);
        s.rec.output(png.with_extension("json"));
        let ap = adapter_dir.join(format!("{}.png", r.sample_id));
        io::save_png(&ap, &r.adapter_output)?;
        s.rec.output(ap);
        for l in &r.log {
            writeln!(log, "{},{},{},{},{},{}", r.sample_id, l.t, l.inner_step, l.struct_loss, l.style_loss, l.total).expect("string write");
        }
        if curves.len() < 6 {
            curves.push(Series::new(&r.sample_id, r.log.iter().enumerate().map(|(k, l)| (k as f64, l.total)).collect()));
        }
        for (k, v) in [("trajectory", r.timings.trajectory_s), ("optimization", r.timings.optimization_s), ("sampling", r.timings.sampling_s)] {
            s.rec.time(k, v);
        }
    }
    let log_path = dir.join("losses.csv");
    write_atomic(&log_path, log.as_bytes())?;
    s.rec.output(&log_path);
    let plot = dir.join("loss_vs_inner_step.png");
    line_plot(&plot, "Prompt objective", "inner step (all timesteps, T to 1)", "loss", &curves)?;
    s.rec.output(&plot);
    if let Some(b) = &bundle {
        let p = dir.join("metrics.csv");
        write_metrics_csv(&p, std::slice::from_ref(b))?;
        s.rec.output(p);
    }
    Ok(bundle)
}

pub fn print_bundle(label: &str, b: &MetricBundle) {
    let fr = b.frechet.map(|f| format!("  frechet {f:.4}")).unwrap_or_default();
    println!(
        "{label}: n={}  ssim {:.4} ± {:.4}  ms_ssim {:.4}  psnr {:.2} dB{fr}",
        b.count, b.ssim.mean, b.ssim.se, b.ms_ssim.mean, b.psnr_db.mean
    );
}

pub fn run(g: &Globals) -> Result<()> {
    let mut s = open_session(g, "transfer")?;
    let cfg = s.transfer.clone();
    let reference = if s.featurizer.is_some() { reference_set(&s.corpus, cfg.target, &s.cfg.config.samples.split)? } else { Vec::new() };
    let mut results = transfer_all(&s, &cfg, g.workers, g.cache_dir.as_deref())?;
    let out = s.out.clone();
    let bundle = write_set(&mut s, &out, &mut results, Some(cfg.lambda), &reference)?;
    match &bundle {
        Some(b) => print_bundle(&format!("lambda {}", cfg.lambda), b),
        None => println!("no paired ground truth; metrics skipped"),
    }
    s.rec.finish(&out)?;
    println!("{} outputs in {}", results.len(), out.join("images").display());
    Ok(())
}
