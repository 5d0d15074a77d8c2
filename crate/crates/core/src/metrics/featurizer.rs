//! Small stain-domain classifier whose penultimate activations serve as the
//! embedding for Fréchet distances.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::datasets::Corpus;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{AdamConfig, AdamW, Bound, Conv2d, GroupNorm, Linear, ParamStore};
use crate::tensor::Tensor;

const VERSION: &str = "stainprompt-featurizer/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturizerConfig {
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub seed: u64,
}

fn default_dim() -> usize {
    64
}
fn default_iterations() -> usize {
    300
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    2e-3
}

impl FeaturizerConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            embedding_dim: default_dim(),
            iterations: default_iterations(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed,
        }
    }
}

#[derive(Debug, Clone)]
struct Layers {
    convs: [Conv2d; 3],
    norms: [GroupNorm; 3],
    embed: Linear,
    head: Linear,
}

impl Layers {
    fn new(store: &mut ParamStore<f32>, dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let widths = [3, 16, 32, 64];
        let convs = [0, 1, 2].map(|i| Conv2d::new(store, &format!("conv{i}"), widths[i], widths[i + 1], 3, 2, false, rng));
        let norms = [0, 1, 2].map(|i| GroupNorm::new(store, &format!("norm{i}"), widths[i + 1], 8));
        let embed = Linear::new(store, "embed", 64, dim, rng);
        let head = Linear::new(store, "head", dim, classes, rng);
        Self { convs, norms, embed, head }
    }

    fn embedding<'g>(&self, p: &Bound<'g, f32>, x: Var<'g, f32>) -> Result<Var<'g, f32>> {
        let mut h = x;
        for (c, n) in self.convs.iter().zip(&self.norms) {
            h = n.forward(p, c.forward(p, h)?)?.silu();
        }
        Ok(self.embed.forward(p, h.global_avg_pool()?)?.silu())
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: String,
    config: FeaturizerConfig,
    domain_ids: Vec<u8>,
    test_accuracy: f64,
}

/// Trained classifier; embeddings are computed one image at a time so they do
/// not depend on how a set is batched.
#[derive(Clone)]
pub struct Featurizer {
    config: FeaturizerConfig,
    domain_ids: Vec<u8>,
    layers: Layers,
    params: ParamStore<f32>,
    pub test_accuracy: f64,
    hash: String,
}

impl Featurizer {
    fn build(config: FeaturizerConfig, domain_ids: Vec<u8>) -> (Self, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let layers = Layers::new(&mut params, config.embedding_dim, domain_ids.len(), &mut rng);
        let hash = params.hash();
        (Self { config, domain_ids, layers, params, test_accuracy: f64::NAN, hash }, rng)
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn embed(&self, image: &Tensor<f32>) -> Result<Vec<f64>> {
        if image.dims4()?.0 != 1 {
            return Err(Error::Shape(format!("embed expects one image, got {:?}", image.shape())));
        }
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let e = self.layers.embedding(&p, g.constant(image.clone()))?;
        let v = e.value().data().iter().map(|&v| v as f64).collect();
        Ok(v)
    }

    pub fn embed_all(&self, images: &[Tensor<f32>]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|i| self.embed(i)).collect()
    }

    /// Predicted domain id.
    pub fn classify(&self, image: &Tensor<f32>) -> Result<u8> {
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let logits = self.layers.head.forward(&p, self.layers.embedding(&p, g.constant(image.clone()))?)?;
        let v = logits.value();
        let best = (0..v.numel()).max_by(|&a, &b| v.data()[a].total_cmp(&v.data()[b])).expect("nonempty");
        Ok(self.domain_ids[best])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, &Tensor<f32>)> = self.params.names().iter().cloned().zip(self.params.values()).collect();
        let meta = Meta {
            version: VERSION.into(),
            config: self.config.clone(),
            domain_ids: self.domain_ids.clone(),
            test_accuracy: self.test_accuracy,
        };
        container::write(path, &tensors, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (mut tensors, meta): (_, Meta) = container::read(path)?;
        if meta.version != VERSION {
            return Err(Error::Load(format!("{}: featurizer version {:?}", path.display(), meta.version)));
        }
        let (mut f, _) = Self::build(meta.config, meta.domain_ids);
        let values = f
            .params
            .names()
            .iter()
            .map(|n| tensors.remove(n).ok_or_else(|| Error::Load(format!("{}: missing tensor {n}", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        f.params.load(values)?;
        f.hash = f.params.hash();
        f.test_accuracy = meta.test_accuracy;
        Ok(f)
    }
}

fn flip(img: &Tensor<f32>, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (_, c, h, w) = img.dims4().expect("image");
    let (fh, fv): (bool, bool) = (rng.random(), rng.random());
    let d = img.data();
    let mut out = vec![0f32; d.len()];
    for k in 0..c {
        for y in 0..h {
            let sy = if fv { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if fh { w - 1 - x } else { x };
                out[(k * h + y) * w + x] = d[(k * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(img.shape(), out).expect("same size")
}

/// Trains the classifier on the corpus train split and records its accuracy
/// on the test split.
pub fn train_featurizer(corpus: &Corpus, cfg: &FeaturizerConfig) -> Result<Featurizer> {
    if cfg.iterations == 0 || cfg.batch_size == 0 || cfg.embedding_dim == 0 {
        return Err(Error::Config("featurizer iterations, batch_size and embedding_dim must be positive".into()));
    }
    let domain_ids: Vec<u8> = corpus.domains().iter().map(|d| d.id).collect();
    let load = |split: &str| -> Result<Vec<(Tensor<f32>, usize)>> {
        corpus
            .select(None, Some(split))
            .into_iter()
            .map(|r| Ok((corpus.load(r)?, domain_ids.iter().position(|&d| d == r.domain).expect("known domain"))))
            .collect()
    };
    let train = load("train")?;
    if train.is_empty() {
        return Err(Error::Config("featurizer needs training images".into()));
    }
    let (mut f, mut rng) = Featurizer::build(cfg.clone(), domain_ids.clone());
    let mut adam = AdamW::<f32>::new(AdamConfig::adam(cfg.learning_rate), f.params.values().map(|v| v.shape()));
    for it in 0..cfg.iterations {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..train.len())).collect();
        let batch = Tensor::stack(&picks.iter().map(|&i| flip(&train[i].0, &mut rng)).collect::<Vec<_>>())?;
        let labels: Vec<usize> = picks.iter().map(|&i| train[i].1).collect();
        let g = Graph::new();
        let p = f.params.bind(&g, true);
        let logits = f.layers.head.forward(&p, f.layers.embedding(&p, g.constant(batch))?)?;
        let loss = logits.cross_entropy(&labels)?;
        let lv = loss.value().data()[0];
        if !lv.is_finite() {
            return Err(Error::Training(format!("featurizer loss became non-finite at iteration {}", it + 1)));
        }
        let grads = p.gradients(&mut g.backward(loss)?);
        drop(g);
        adam.update_store(&mut f.params, &grads)?;
    }
    f.hash = f.params.hash();
    let test = load("test")?;
    if !test.is_empty() {
        let correct = test
            .iter()
            .map(|(img, label)| Ok((f.classify(img)? == f.domain_ids[*label]) as usize))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum::<usize>();
        f.test_accuracy = correct as f64 / test.len() as f64;
    }
    Ok(f)
}
