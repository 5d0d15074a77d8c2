//! Synthetic paired stain corpus, its manifest, and patch ingestion.
//!
//! Every synthetic sample is one density field rendered under each domain,
//! so renders of the same sample id are exact cross-domain ground truth.

pub mod content;
pub mod domain;
pub mod io;
pub mod patches;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::write_atomic;
use crate::tensor::Tensor;
pub use content::{generate_content, ContentParams};
pub use domain::{default_domains, identity_domain, linear_tone_domains, StainDomain};
pub use patches::{extract_patches, IngestConfig, Patch, PatchSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONTENT_DIR: &str = "content";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub domain: u8,
    /// Relative paths resolve against the corpus root.
    pub path: PathBuf,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub corpus_root: PathBuf,
    pub seed: u64,
    pub domains: Vec<StainDomain>,
    pub samples: Vec<SampleRecord>,
}

impl CorpusManifest {
    pub fn resolve(&self, record: &SampleRecord) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.corpus_root.join(&record.path)
        }
    }

    /// Structural checks that do not touch the file system.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for d in &self.domains {
            d.validate()?;
            if !ids.insert(d.id) {
                return Err(Error::Load(format!("domain id {} defined twice", d.id)));
            }
        }
        let mut split_of: HashMap<&str, &str> = HashMap::new();
        let mut seen = BTreeSet::new();
        for r in &self.samples {
            if !ids.contains(&r.domain) {
                return Err(Error::Load(format!("record {}: unknown domain {}", r.id, r.domain)));
            }
            if r.split != "train" && r.split != "test" {
                return Err(Error::Load(format!("record {}: split must be train or test, got {:?}", r.id, r.split)));
            }
            if let Some(prev) = split_of.insert(&r.id, &r.split) {
                if prev != r.split {
                    return Err(Error::Load(format!("sample {} appears in both splits", r.id)));
                }
            }
            if !seen.insert((&r.id, r.domain)) {
                return Err(Error::Load(format!("record {} duplicated for domain {}", r.id, r.domain)));
            }
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        write_atomic(path, text.as_bytes())
    }
}

/// Parameters of [`generate_synthetic_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    pub image_size: usize,
    pub seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub content: ContentParams,
    #[serde(default = "default_domains")]
    pub domains: Vec<StainDomain>,
}

fn default_test_fraction() -> f64 {
    0.2
}

/// In-memory synthetic sample.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub sample_id: String,
    pub content: Tensor<f64>,
    pub renders: BTreeMap<u8, Tensor<f32>>,
}

pub fn sample_id(i: usize) -> String {
    format!("s{i:05}")
}

/// Density field and renders for sample `index`; a pure function of the inputs.
pub fn synthesize_sample(cfg: &SyntheticConfig, index: usize) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let content = generate_content(cfg.image_size, &cfg.content, &mut rng);
    let renders = cfg
        .domains
        .iter()
        .map(|d| Ok((d.id, d.render(&content)?)))
        .collect::<Result<_>>()?;
    Ok(SyntheticSample { sample_id: sample_id(index), content, renders })
}

/// Seeded split: `round(test_fraction · n)` sample indices go to test.
pub fn assign_splits(n: usize, test_fraction: f64, seed: u64) -> Vec<&'static str> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut split = vec!["train"; n];
    for &i in &order[..n_test.min(n)] {
        split[i] = "test";
    }
    split
}

/// Writes content fields, every domain render and `manifest.json` under `root`.
pub fn generate_synthetic_corpus(root: &Path, cfg: &SyntheticConfig) -> Result<CorpusManifest> {
    if cfg.n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    if cfg.domains.len() < 2 {
        return Err(Error::Config("a corpus needs at least two domains".into()));
    }
    if cfg.image_size == 0 {
        return Err(Error::Config("image_size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.test_fraction) {
        return Err(Error::Config(format!("test_fraction {} outside [0, 1]", cfg.test_fraction)));
    }
    let mut names = BTreeSet::new();
    for d in &cfg.domains {
        d.validate()?;
        if !names.insert(d.name.as_str()) || d.name == CONTENT_DIR {
            return Err(Error::Config(format!("domain name {:?} is duplicated or reserved", d.name)));
        }
    }
    let splits = assign_splits(cfg.n_samples, cfg.test_fraction, cfg.seed);
    let mut samples = Vec::with_capacity(cfg.n_samples * cfg.domains.len());
    for (i, split) in splits.iter().enumerate() {
        let s = synthesize_sample(cfg, i)?;
        io::save_field_png(&root.join(CONTENT_DIR).join(format!("{}.png", s.sample_id)), &s.content)?;
        for d in &cfg.domains {
            let rel = PathBuf::from(&d.name).join(format!("{}.png", s.sample_id));
            io::save_png(&root.join(&rel), &s.renders[&d.id])?;
            samples.push(SampleRecord { id: s.sample_id.clone(), domain: d.id, path: rel, split: split.to_string() });
        }
    }
    // On disk the root is the manifest's own directory, so the corpus can move.
    let mut manifest = CorpusManifest { corpus_root: PathBuf::from("."), seed: cfg.seed, domains: cfg.domains.clone(), samples };
    manifest.validate()?;
    manifest.write(&root.join(MANIFEST_FILE))?;
    manifest.corpus_root = root.to_path_buf();
    Ok(manifest)
}

/// Loaded manifest with lazy image access.
#[derive(Debug, Clone)]
pub struct Corpus {
    manifest: CorpusManifest,
}

/// Parses and checks a manifest; every referenced file must exist. A relative
/// `corpus_root` is taken relative to the manifest's directory.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let mut manifest: CorpusManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Load(format!("{}: malformed manifest: {e}", manifest_path.display())))?;
    manifest.validate()?;
    if manifest.corpus_root.is_relative() {
        let base = manifest_path.parent().unwrap_or(Path::new(""));
        let rel = manifest.corpus_root.components().filter(|c| *c != std::path::Component::CurDir);
        manifest.corpus_root = base.join(rel.collect::<PathBuf>());
    }
    for r in &manifest.samples {
        let p = manifest.resolve(r);
        if !p.is_file() {
            return Err(Error::Load(format!("record {} (domain {}): missing file {}", r.id, r.domain, p.display())));
        }
    }
    Ok(Corpus { manifest })
}

impl Corpus {
    pub fn from_manifest(manifest: CorpusManifest) -> Result<Self> {
        manifest.validate()?;
        Ok(Self { manifest })
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn domains(&self) -> &[StainDomain] {
        &self.manifest.domains
    }

    pub fn domain(&self, id: u8) -> Result<&StainDomain> {
        self.manifest
            .domains
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::Config(format!("corpus has no domain {id}")))
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.manifest.samples
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    /// Records of `domain` (any domain if `None`) in `split` (any if `None`), in manifest order.
    pub fn select(&self, domain: Option<u8>, split: Option<&str>) -> Vec<&SampleRecord> {
        self.manifest
            .samples
            .iter()
            .filter(|r| domain.is_none_or(|d| r.domain == d) && split.is_none_or(|s| r.split == s))
            .collect()
    }

    /// Sorted sample ids of a split.
    pub fn sample_ids(&self, split: &str) -> Vec<String> {
        let set: BTreeSet<&str> = self.manifest.samples.iter().filter(|r| r.split == split).map(|r| r.id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn find(&self, id: &str, domain: u8) -> Option<&SampleRecord> {
        self.manifest.samples.iter().find(|r| r.id == id && r.domain == domain)
    }

    pub fn counts_by_domain(&self) -> BTreeMap<u8, usize> {
        let mut m = BTreeMap::new();
        for r in &self.manifest.samples {
            *m.entry(r.domain).or_insert(0) += 1;
        }
        m
    }

    pub fn path(&self, record: &SampleRecord) -> PathBuf {
        self.manifest.resolve(record)
    }

    pub fn load(&self, record: &SampleRecord) -> Result<Tensor<f32>> {
        io::load_png(&self.path(record))
    }

    /// Image of sample `id` rendered in `domain`.
    pub fn load_render(&self, id: &str, domain: u8) -> Result<Tensor<f32>> {
        let r = self
            .find(id, domain)
            .ok_or_else(|| Error::Load(format!("no record for sample {id} in domain {domain}")))?;
        self.load(r)
    }

    /// Stored density field of a synthetic sample, if present.
    pub fn load_content(&self, id: &str) -> Result<Tensor<f64>> {
        io::load_field_png(&self.manifest.corpus_root.join(CONTENT_DIR).join(format!("{id}.png")))
    }
}
