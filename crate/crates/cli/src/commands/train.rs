use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stainprompt::diffusion::{load_checkpoint, save_checkpoint, train_conditional_denoiser, Checkpoint, ScheduleConfig, TrainConfig, UNetConfig};
use stainprompt::hash::write_atomic;
use stainprompt::schedule::EpsilonModel;

use super::{create_dir, open_corpus_recorded, Globals};
use crate::config::{load, parse, substream};
use crate::manifest::Recorder;
use crate::plot::{line_plot, Series};

pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const LOSS_LOG: &str = "loss.csv";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub seed: u64,
    pub corpus: PathBuf,
    pub out: PathBuf,
    /// Total iteration target; a resumed run stops here too.
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub warmup: usize,
    #[serde(default = "yes")]
    pub flip_horizontal: bool,
    #[serde(default = "yes")]
    pub flip_vertical: bool,
    #[serde(default = "default_p_null")]
    pub p_null: f64,
    #[serde(default)]
    pub ema_decay: f64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub resume: bool,
    /// Partial network config; unspecified fields keep their defaults and
    /// `num_labels` always comes from the corpus.
    #[serde(default)]
    pub model: toml::Table,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

fn default_weight_decay() -> f64 {
    1e-4
}
fn yes() -> bool {
    true
}
fn default_p_null() -> f64 {
    0.1
}
fn default_checkpoint_every() -> usize {
    1000
}

fn network_config(partial: &toml::Table, num_labels: usize) -> Result<UNetConfig> {
    if partial.contains_key("num_labels") {
        bail!("`model.num_labels` is derived from the corpus and must not be set");
    }
    let mut t = toml::Table::try_from(UNetConfig::default())?;
    for (k, v) in partial {
        t.insert(k.clone(), v.clone());
    }
    t.insert("num_labels".into(), toml::Value::Integer(num_labels as i64));
    parse(&t).context("invalid [model] section")
}

fn read_losses(path: &std::path::Path, up_to: usize) -> Result<Vec<(usize, f64)>> {
    let Ok(text) = std::fs::read_to_string(path) else { return Ok(Vec::new()) };
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let Some((i, l)) = line.split_once(',') else { continue };
        let i: usize = i.parse().with_context(|| format!("{}: bad row {line:?}", path.display()))?;
        if i <= up_to {
            out.push((i, l.parse().with_context(|| format!("{}: bad row {line:?}", path.display()))?));
        }
    }
    Ok(out)
}

fn write_losses(path: &std::path::Path, losses: &[(usize, f64)]) -> Result<()> {
    let mut s = String::from("iteration,loss\n");
    for (i, l) in losses {
        writeln!(s, "{i},{l}").expect("string write");
    }
    Ok(write_atomic(path, s.as_bytes())?)
}

fn smoothed(losses: &[(usize, f64)], window: usize) -> Vec<(f64, f64)> {
    let mut acc = 0.0;
    let mut out = Vec::new();
    for (k, &(i, l)) in losses.iter().enumerate() {
        acc += l;
        if k >= window {
            acc -= losses[k - window].1;
        }
        let n = (k + 1).min(window);
        out.push((i as f64, acc / n as f64));
    }
    out
}

pub fn run(g: &Globals) -> Result<()> {
    let cfg = load::<TrainCommandConfig>(g.config, g.seed)?;
    let c = &cfg.config;
    if c.checkpoint_every == 0 {
        bail!("checkpoint_every must be at least 1");
    }
    let out = cfg.path(&c.out);
    create_dir(&out)?;
    let mut rec = Recorder::new("train", g.config, &cfg.table, c.seed, g.workers)?;
    let corpus = open_corpus_recorded(&cfg.path(&c.corpus), &mut rec)?;
    let image_size = corpus.load(corpus.records().first().context("corpus is empty")?)?.shape()[2];
    let num_classes = corpus.domains().len() + 1;
    let train_seed = substream(c.seed, "train");
    rec.substream("train", train_seed);
    let base = TrainConfig {
        iterations: c.iterations,
        batch_size: c.batch_size,
        learning_rate: c.learning_rate,
        weight_decay: c.weight_decay,
        warmup: c.warmup,
        image_size,
        num_classes,
        seed: train_seed,
        flip_horizontal: c.flip_horizontal,
        flip_vertical: c.flip_vertical,
        p_null: c.p_null,
        ema_decay: c.ema_decay,
        model: network_config(&c.model, num_classes)?,
        schedule: c.schedule,
    };
    base.validate()?;

    let ckpt_path = out.join(CHECKPOINT_NAME);
    let loss_path = out.join(LOSS_LOG);
    let (mut state, mut model, mut losses) = if ckpt_path.exists() {
        if !c.resume {
            bail!("{} already exists; set `resume = true` to continue it", ckpt_path.display());
        }
        let ck = load_checkpoint(&ckpt_path)?;
        let same = TrainConfig { iterations: base.iterations, ..ck.train_config.clone() };
        if same != base {
            bail!("{} was trained with a different configuration; only `iterations` may change on resume", ckpt_path.display());
        }
        let Some(state) = ck.state else {
            bail!("{} holds weights only and cannot be resumed", ckpt_path.display());
        };
        println!("resuming from iteration {}", ck.iteration);
        let losses = read_losses(&loss_path, ck.iteration)?;
        (Some(state), Some(ck.model), losses)
    } else {
        (None, None, Vec::new())
    };

    let clock = Instant::now();
    loop {
        let done = state.as_ref().map_or(0, |s| s.iteration);
        if done >= base.iterations {
            break;
        }
        let stop = (done + c.checkpoint_every).min(base.iterations);
        let chunk_cfg = TrainConfig { iterations: stop, ..base.clone() };
        let t0 = Instant::now();
        let o = train_conditional_denoiser(&corpus, &chunk_cfg, state.take(), |_, _| {})?;
        let mean = o.losses.iter().map(|l| l.1).sum::<f64>() / o.losses.len().max(1) as f64;
        println!("iteration {stop:>7}  mean loss {mean:.5}  ({:.1}s)", t0.elapsed().as_secs_f64());
        losses.extend(o.losses);
        save_checkpoint(
            &ckpt_path,
            &Checkpoint { model: o.model.clone(), train_config: base.clone(), iteration: stop, state: Some(o.state.clone()) },
        )?;
        write_losses(&loss_path, &losses)?;
        state = Some(o.state);
        model = Some(o.model);
    }
    rec.time("train", clock.elapsed().as_secs_f64());
    let model = model.context("no training was run")?;
    if !loss_path.exists() {
        write_losses(&loss_path, &losses)?;
    }
    let plot_path = out.join("loss.png");
    let raw: Vec<(f64, f64)> = losses.iter().map(|&(i, l)| (i as f64, l)).collect();
    line_plot(&plot_path, "Training loss", "iteration", "loss", &[Series::new("per batch", raw), Series::new("moving mean (100)", smoothed(&losses, 100))])?;

    rec.checkpoint(&model.weights_hash());
    rec.output(&ckpt_path);
    rec.output(&loss_path);
    rec.output(&plot_path);
    rec.finish(&out)?;
    println!("checkpoint {} (weights {})", ckpt_path.display(), &model.weights_hash()[..16]);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_model_sections_keep_defaults() {
        let t: toml::Table = "channels = [8, 16]\ngroups = 4\n".parse().unwrap();
        let m = network_config(&t, 3).unwrap();
        assert_eq!(m.channels, vec![8, 16]);
        assert_eq!(m.num_labels, 3);
        assert_eq!(m.embed_dim, UNetConfig::default().embed_dim);
        let bad: toml::Table = "num_labels = 4\n".parse().unwrap();
        assert!(network_config(&bad, 3).is_err());
        let typo: toml::Table = "chanels = [8]\n".parse().unwrap();
        assert!(network_config(&typo, 3).is_err());
    }

    #[test]
    fn moving_mean() {
        let s = smoothed(&[(1, 1.0), (2, 3.0), (3, 5.0)], 2);
        assert_eq!(s, vec![(1.0, 1.0), (2.0, 2.0), (3.0, 4.0)]);
    }
}
