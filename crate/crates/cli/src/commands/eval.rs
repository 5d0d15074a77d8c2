use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stainprompt::datasets::io;
use stainprompt::dual_path::adapt;
use stainprompt::metrics::write_metrics_csv;
use stainprompt::sampler::{build_adapter, AdapterSpec, TransferConfig};
use stainprompt::Tensor;

use super::transfer::{print_bundle, reference_set, score};
use super::{create_dir, obtain_featurizer, open_corpus_recorded, parallel_map, FeaturizerSection, Globals, Selection};
use crate::config::{load, substream};
use crate::manifest::Recorder;

/// What gets scored.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvalInputs {
    /// Every `<sample_id>.png` in a directory, e.g. a transfer run's `images/`.
    Directory { path: PathBuf },
    /// Adapter references computed directly from source images, bypassing
    /// the diffusion pipeline.
    Adapter { source: u8, adapter: AdapterSpec },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub target: u8,
    /// Used by adapter inputs; also names the split of the Fréchet reference set.
    #[serde(default)]
    pub samples: Selection,
    pub inputs: EvalInputs,
    pub featurizer: Option<FeaturizerSection>,
}

pub fn run(g: &Globals) -> Result<()> {
    let cfg = load::<EvalConfig>(g.config, g.seed)?;
    let c = &cfg.config;
    let out = cfg.path(&c.out);
    create_dir(&out)?;
    let mut rec = Recorder::new("eval", g.config, &cfg.table, c.seed, g.workers)?;
    let corpus = open_corpus_recorded(&cfg.path(&c.corpus), &mut rec)?;
    corpus.domain(c.target)?;

    let outputs: Vec<(String, Tensor<f32>)> = match &c.inputs {
        EvalInputs::Directory { path } => {
            let dir = cfg.path(path);
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .collect();
            files.sort();
            if files.is_empty() {
                bail!("no .png files in {}", dir.display());
            }
            let mut v = Vec::with_capacity(files.len());
            for f in files {
                let id = f.file_stem().expect("png has a stem").to_string_lossy().into_owned();
                rec.input_file(&format!("image:{id}"), &f)?;
                v.push((id, io::load_png(&f)?));
            }
            v
        }
        EvalInputs::Adapter { source, adapter } => {
            let tseed = substream(c.seed, "transfer");
            rec.substream("transfer", tseed);
            let tc = TransferConfig { adapter: adapter.clone(), ..TransferConfig::new(1.0, *source, c.target, tseed) };
            tc.validate()?;
            let a = build_adapter(&tc, Some(&corpus))?;
            let items = c.samples.load(&corpus, *source)?;
            let images = out.join("images");
            create_dir(&images)?;
            let v = parallel_map(&items, g.workers, |it| {
                let y = adapt(a.as_ref(), &it.id, &it.image.cast())?;
                Ok((it.id.clone(), io::quantize(&y.cast::<f32>())))
            })?;
            for (id, img) in &v {
                let p = images.join(format!("{id}.png"));
                io::save_png(&p, img)?;
                rec.output(p);
            }
            println!("adapter: {}", a.describe());
            v
        }
    };

    let featurizer = match &c.featurizer {
        Some(f) => Some(obtain_featurizer(f, &cfg.path(&f.path), &corpus, c.seed, &mut rec)?),
        None => None,
    };
    let reference = if featurizer.is_some() { reference_set(&corpus, c.target, &c.samples.split)? } else { Vec::new() };
    let bundle = score(&corpus, &outputs, c.target, None, &reference, featurizer.as_ref(), substream(c.seed, "bootstrap"))?
        .context("some images have no paired ground truth in the target domain")?;
    let p = out.join("metrics.csv");
    write_metrics_csv(&p, std::slice::from_ref(&bundle))?;
    rec.output(p);
    print_bundle("eval", &bundle);
    rec.finish(&out)?;
    Ok(())
}
