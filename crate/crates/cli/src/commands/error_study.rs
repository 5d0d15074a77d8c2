//! Round-trip reconstruction error against the number of DDIM steps.
//!
//! A condition is written `sampling/inversion`: the image is inverted under
//! the second label and sampled back under the first. `none` and `null` both
//! name the learned null label. With prompts, the structural trajectory is
//! tracked with `lambda = 1`, so the prompts only pull the sample back onto
//! the inversion path.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stainprompt::datasets::io;
use stainprompt::diffusion::{ddim_sample, DiffusionModel};
use stainprompt::dual_path::{invert, PathKind};
use stainprompt::hash::write_atomic;
use stainprompt::metrics::{bootstrap_se, ssim, BOOTSTRAP_RESAMPLES};
use stainprompt::schedule::ConditionLabel;
use stainprompt::stain_prompt::{optimize_prompts, LossConfig, SimilarityVariant};
use stainprompt::Tensor;

use super::{create_dir, open_corpus_recorded, open_model, parallel_map, Globals, Item, Selection};
use crate::config::{load, substream};
use crate::manifest::Recorder;
use crate::plot::{line_plot, Series};

fn default_steps() -> Vec<usize> {
    vec![10, 25, 50, 100]
}
fn default_conditions() -> Vec<String> {
    ["null/null", "source/source", "target/source", "none/target"].map(String::from).to_vec()
}
fn yes() -> bool {
    true
}
fn default_ist() -> usize {
    50
}
fn default_inner_lr() -> f64 {
    1e-2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorStudyConfig {
    pub seed: u64,
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub source: u8,
    pub target: u8,
    #[serde(default)]
    pub samples: Selection,
    #[serde(default = "default_steps")]
    pub steps: Vec<usize>,
    #[serde(default = "default_conditions")]
    pub conditions: Vec<String>,
    /// Also run every condition with optimized prompts.
    #[serde(default = "yes")]
    pub prompts: bool,
    #[serde(default = "default_ist")]
    pub ist_init: usize,
    #[serde(default = "default_inner_lr")]
    pub inner_learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pair {
    pub sampling: ConditionLabel,
    pub inversion: ConditionLabel,
}

pub fn parse_condition(s: &str, source: u8, target: u8) -> Result<Pair> {
    let label = |w: &str| match w.trim() {
        "null" | "none" => Ok(ConditionLabel::Null),
        "source" => Ok(ConditionLabel::Domain(source)),
        "target" => Ok(ConditionLabel::Domain(target)),
        other => bail!("unknown condition {other:?} in {s:?} (expected null, none, source or target)"),
    };
    let (a, b) = s.split_once('/').with_context(|| format!("condition {s:?} must be `sampling/inversion`"))?;
    Ok(Pair { sampling: label(a)?, inversion: label(b)? })
}

fn rmse(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let n = a.numel().max(1) as f64;
    (a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Debug, Clone)]
pub struct Row {
    pub condition: String,
    pub steps: usize,
    pub prompts: bool,
    pub image_id: String,
    pub rmse: f64,
    pub ssim: f64,
}

/// Plain and (optionally) prompted reconstructions of one image.
pub fn round_trip(
    x0: &Tensor<f32>,
    model: &DiffusionModel<f32>,
    steps: usize,
    pair: Pair,
    prompt_cfg: Option<&LossConfig>,
) -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
    let schedule = model.schedule.subsample(steps)?;
    let traj = invert(x0, model, &schedule, pair.inversion, PathKind::Structural)?;
    let plain = ddim_sample(model, &schedule, traj.terminal(), pair.sampling)?;
    let prompted = match prompt_cfg {
        Some(c) => Some(optimize_prompts(&traj, &traj, model, &schedule, pair.sampling, c)?.output().clone()),
        None => None,
    };
    Ok((plain, prompted))
}

pub fn run(g: &Globals) -> Result<()> {
    let cfg = load::<ErrorStudyConfig>(g.config, g.seed)?;
    let c = &cfg.config;
    let out = cfg.path(&c.out);
    create_dir(&out)?;
    let mut rec = Recorder::new("error-study", g.config, &cfg.table, c.seed, g.workers)?;
    let corpus = open_corpus_recorded(&cfg.path(&c.corpus), &mut rec)?;
    let model = open_model(&cfg.path(&c.checkpoint), &mut rec)?;
    rec.substream("bootstrap", substream(c.seed, "bootstrap"));
    if c.steps.is_empty() || c.conditions.is_empty() {
        bail!("steps and conditions must be non-empty");
    }
    let pairs: Vec<(String, Pair)> =
        c.conditions.iter().map(|s| Ok((s.clone(), parse_condition(s, c.source, c.target)?))).collect::<Result<_>>()?;
    let loss = LossConfig {
        lambda: 1.0,
        ist_init: c.ist_init,
        inner_learning_rate: c.inner_learning_rate,
        variant: SimilarityVariant::StandardSsim,
        ..LossConfig::with_lambda(1.0)
    };
    loss.validate()?;
    let items: Vec<Item> = c.samples.load(&corpus, c.source)?;

    let mut rows = Vec::new();
    let clock = std::time::Instant::now();
    for (name, pair) in &pairs {
        for &steps in &c.steps {
            let t0 = std::time::Instant::now();
            let per = parallel_map(&items, g.workers, |it| {
                let (plain, prompted) = round_trip(&it.image, &model, steps, *pair, c.prompts.then_some(&loss))
                    .with_context(|| format!("{name} at {steps} steps, image {}", it.id))?;
                let mut v = Vec::new();
                for (p, img) in [(false, Some(plain)), (true, prompted)] {
                    if let Some(img) = img {
                        let q = io::quantize(&img);
                        v.push(Row { condition: name.clone(), steps, prompts: p, image_id: it.id.clone(), rmse: rmse(&q, &it.image), ssim: ssim(&q, &it.image)? });
                    }
                }
                Ok(v)
            })?;
            rows.extend(per.into_iter().flatten());
            println!("{name:<14} T={steps:<4} done ({:.1}s)", t0.elapsed().as_secs_f64());
        }
    }
    rec.time("study", clock.elapsed().as_secs_f64());

    let mut csv = String::from("condition,sampling,inversion,steps,prompts,image_id,rmse,ssim\n");
    let label = |n: &str| pairs.iter().find(|p| p.0 == n).map(|p| p.1).expect("known condition");
    for r in &rows {
        let p = label(&r.condition);
        writeln!(csv, "{},{},{},{},{},{},{},{}", r.condition, p.sampling, p.inversion, r.steps, r.prompts, r.image_id, r.rmse, r.ssim).expect("string write");
    }
    let p = out.join("error_study.csv");
    write_atomic(&p, csv.as_bytes())?;
    rec.output(p);

    let mut groups: BTreeMap<(String, bool, usize), Vec<&Row>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.condition.clone(), r.prompts, r.steps)).or_default().push(r);
    }
    let bseed = substream(c.seed, "bootstrap");
    let mut summary = String::from("condition,steps,prompts,count,rmse_mean,ssim_mean,ssim_se\n");
    let mut means: BTreeMap<(String, bool, usize), (f64, f64)> = BTreeMap::new();
    for ((name, prompts, steps), rs) in &groups {
        let n = rs.len() as f64;
        let rm = rs.iter().map(|r| r.rmse).sum::<f64>() / n;
        let ss: Vec<f64> = rs.iter().map(|r| r.ssim).collect();
        let sm = ss.iter().sum::<f64>() / n;
        writeln!(summary, "{name},{steps},{prompts},{},{rm},{sm},{}", rs.len(), bootstrap_se(&ss, BOOTSTRAP_RESAMPLES, bseed)).expect("string write");
        means.insert((name.clone(), *prompts, *steps), (rm, sm));
    }
    let p = out.join("error_summary.csv");
    write_atomic(&p, summary.as_bytes())?;
    rec.output(p);

    // UDM is null/null, CDM the source-inverted, target-sampled path.
    let udm = "null/null";
    let cdm = "target/source";
    if means.keys().any(|k| k.0 == udm) && means.keys().any(|k| k.0 == cdm) {
        let mut t = String::from("steps,UDM,UDM+prompt,CDM,CDM+prompt\n");
        for &steps in &c.steps {
            let get = |n: &str, p: bool| means.get(&(n.into(), p, steps)).map(|m| m.1.to_string()).unwrap_or_default();
            writeln!(t, "{steps},{},{},{},{}", get(udm, false), get(udm, true), get(cdm, false), get(cdm, true)).expect("string write");
        }
        let p = out.join("comparison.csv");
        write_atomic(&p, t.as_bytes())?;
        rec.output(p);
        print!("{t}");
    }

    for (metric, idx, ylab) in [("rmse", 0usize, "RMSE to input"), ("ssim", 1, "SSIM to input")] {
        let mut series = Vec::new();
        for (name, _) in &pairs {
            for prompts in [false, true] {
                let pts: Vec<(f64, f64)> = c
                    .steps
                    .iter()
                    .filter_map(|&s| means.get(&(name.clone(), prompts, s)).map(|m| (s as f64, if idx == 0 { m.0 } else { m.1 })))
                    .collect();
                if !pts.is_empty() {
                    let mut sr = Series::new(if prompts { format!("{name} + prompts") } else { name.clone() }, pts);
                    sr.dashed = prompts;
                    series.push(sr);
                }
            }
        }
        let p = out.join(format!("{metric}_vs_steps.png"));
        line_plot(&p, &format!("Round-trip {metric} vs DDIM steps"), "steps T", ylab, &series)?;
        rec.output(p);
    }

    let mut sorted = c.steps.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() >= 2 {
        if let Some((name, _)) = pairs.iter().find(|p| p.1.sampling == ConditionLabel::Null && p.1.inversion == ConditionLabel::Null) {
            let e: Vec<f64> = sorted.iter().map(|&s| means[&(name.clone(), false, s)].0).collect();
            let down = e.windows(2).filter(|w| w[1] < w[0]).count();
            println!("unconditional RMSE decreases in {down} of {} step increases", e.len() - 1);
        }
    }
    rec.finish(&out)?;
    Ok(())
}
