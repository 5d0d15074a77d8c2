use std::path::PathBuf;

use anyhow::Result;
use serde::{Deserialize, Serialize};
use stainprompt::datasets::{default_domains, generate_synthetic_corpus, ContentParams, StainDomain, SyntheticConfig, MANIFEST_FILE};

use super::{open_corpus, Globals};
use crate::config::{load, substream};
use crate::manifest::{corpus_hash, Recorder};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub n_samples: usize,
    pub image_size: usize,
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

pub fn run(g: &Globals) -> Result<()> {
    let cfg = load::<GenDataConfig>(g.config, g.seed)?;
    let c = &cfg.config;
    let out = cfg.path(&c.out);
    let mut rec = Recorder::new("gen-data", g.config, &cfg.table, c.seed, g.workers)?;
    let data_seed = substream(c.seed, "data");
    rec.substream("data", data_seed);
    let synth = SyntheticConfig {
        n_samples: c.n_samples,
        image_size: c.image_size,
        seed: data_seed,
        test_fraction: c.test_fraction,
        content: c.content.clone(),
        domains: c.domains.clone(),
    };
    let clock = std::time::Instant::now();
    generate_synthetic_corpus(&out, &synth)?;
    rec.time("generate", clock.elapsed().as_secs_f64());

    let corpus = open_corpus(&out)?;
    let hash = corpus_hash(&corpus)?;
    for r in corpus.records() {
        rec.output(corpus.path(r));
    }
    rec.output(out.join(MANIFEST_FILE));
    rec.input("corpus_generated", hash.clone());
    rec.finish(&out)?;

    println!("corpus {} ({} images, {}×{})", out.display(), corpus.len(), c.image_size, c.image_size);
    for d in corpus.domains() {
        let train = corpus.select(Some(d.id), Some("train")).len();
        let test = corpus.select(Some(d.id), Some("test")).len();
        println!("  domain {} {:<6} train {train:>5}  test {test:>5}", d.id, d.name);
    }
    println!("corpus hash {hash}");
    Ok(())
}
