//! One module per verb, plus helpers they share.

pub mod error_study;
pub mod eval;
pub mod gen_data;
pub mod report;
pub mod sweep;
pub mod train;
pub mod transfer;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stainprompt::datasets::{load_corpus, Corpus, MANIFEST_FILE};
use stainprompt::diffusion::{load_checkpoint, DiffusionModel};
use stainprompt::metrics::{train_featurizer, Featurizer, FeaturizerConfig};
use stainprompt::Tensor;

use crate::config::substream;
use crate::manifest::{corpus_hash, Recorder};

pub struct Globals<'a> {
    pub config: &'a Path,
    pub seed: Option<u64>,
    pub workers: usize,
    pub cache_dir: Option<PathBuf>,
}

/// Accepts either a corpus directory or its manifest file.
pub fn open_corpus(path: &Path) -> Result<Corpus> {
    let manifest = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    Ok(load_corpus(&manifest)?)
}

pub fn open_corpus_recorded(path: &Path, rec: &mut Recorder) -> Result<Corpus> {
    let c = open_corpus(path)?;
    rec.input("corpus", corpus_hash(&c)?);
    Ok(c)
}

pub fn open_model(path: &Path, rec: &mut Recorder) -> Result<DiffusionModel<f32>> {
    let ck = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    rec.input_file("checkpoint_file", path)?;
    rec.checkpoint(&stainprompt::schedule::EpsilonModel::weights_hash(&ck.model));
    Ok(ck.model)
}

fn default_split() -> String {
    "test".into()
}

/// Which source-domain records a command works on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selection {
    #[serde(default = "default_split")]
    pub split: String,
    /// Keep the first `limit` matches (manifest order).
    pub limit: Option<usize>,
    /// Restrict to these sample ids.
    pub ids: Option<Vec<String>>,
}

impl Default for Selection {
    fn default() -> Self {
        Self { split: default_split(), limit: None, ids: None }
    }
}

pub struct Item {
    pub id: String,
    pub image: Tensor<f32>,
}

impl Selection {
    pub fn load(&self, corpus: &Corpus, domain: u8) -> Result<Vec<Item>> {
        let mut recs = corpus.select(Some(domain), Some(&self.split));
        if let Some(ids) = &self.ids {
            for id in ids {
                if !recs.iter().any(|r| &r.id == id) {
                    bail!("sample {id} is not in split {:?} of domain {domain}", self.split);
                }
            }
            recs.retain(|r| ids.contains(&r.id));
        }
        if let Some(n) = self.limit {
            recs.truncate(n);
        }
        if recs.is_empty() {
            bail!("no images of domain {domain} in split {:?}", self.split);
        }
        recs.into_iter().map(|r| Ok(Item { id: r.id.clone(), image: corpus.load(r)? })).collect()
    }
}

/// Ordered map over `items` on up to `workers` threads.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().map_err(|_| anyhow::anyhow!("worker thread panicked"))??);
        }
        Ok(out)
    })
}

fn default_featurizer_iterations() -> usize {
    FeaturizerConfig::new(0).iterations
}

/// Featurizer for Fréchet distances: loaded from `path` if present, else
/// trained on the corpus and saved there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturizerSection {
    pub path: PathBuf,
    #[serde(default = "default_featurizer_iterations")]
    pub iterations: usize,
}

pub fn obtain_featurizer(sec: &FeaturizerSection, path: &Path, corpus: &Corpus, seed: u64, rec: &mut Recorder) -> Result<Featurizer> {
    let f = if path.is_file() {
        Featurizer::load(path)?
    } else {
        let s = substream(seed, "featurizer");
        rec.substream("featurizer", s);
        let cfg = FeaturizerConfig { iterations: sec.iterations, ..FeaturizerConfig::new(s) };
        let f = train_featurizer(corpus, &cfg)?;
        f.save(path)?;
        println!("featurizer trained: test accuracy {:.3}, saved to {}", f.test_accuracy, path.display());
        f
    };
    rec.input("featurizer", f.hash().to_string());
    Ok(f)
}

pub fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}
