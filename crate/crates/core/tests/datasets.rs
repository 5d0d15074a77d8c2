use std::collections::BTreeSet;

use proptest::prelude::*;
use stainprompt::datasets::{
    extract_patches, generate_synthetic_corpus, linear_tone_domains, load_corpus, synthesize_sample, CorpusManifest,
    PatchSpec, SyntheticConfig,
};
use stainprompt::metrics::ssim;
use stainprompt::{Error, Tensor};

fn config(n: usize, size: usize, seed: u64) -> SyntheticConfig {
    serde_json::from_value(serde_json::json!({ "n_samples": n, "image_size": size, "seed": seed })).unwrap()
}

fn ramp(h: usize, w: usize) -> Tensor<f32> {
    let data = (0..3 * h * w).map(|i| (i % 251) as f32 / 251.0).collect();
    Tensor::new(&[1, 3, h, w], data).unwrap()
}

/// Every top-left corner of a `size` window that lies inside `len`, visited
/// one pixel at a time, keeping those on the stride grid plus the flush-right one.
fn brute_force_origins(len: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut v = Vec::new();
    for o in 0..len {
        if o + size > len {
            break;
        }
        if o % stride == 0 {
            v.push(o);
        }
    }
    if v.last().is_some_and(|&o| o + size < len) {
        v.push(len - size);
    }
    v
}

#[test]
fn patch_count_matches_brute_force_enumeration() {
    let spec = PatchSpec::default();
    let patches = extract_patches(&ramp(512, 512), &spec).unwrap();
    let per_axis = brute_force_origins(512, 256, 64);
    assert_eq!(per_axis, vec![0, 64, 128, 192, 256]);
    assert_eq!(patches.len(), per_axis.len() * per_axis.len());
    let coords: Vec<(usize, usize)> = patches.iter().map(|p| (p.y, p.x)).collect();
    let expected: Vec<(usize, usize)> =
        per_axis.iter().flat_map(|&y| per_axis.iter().map(move |&x| (y, x))).collect();
    assert_eq!(coords, expected);
}

#[test]
fn patch_pixels_are_copied_from_their_origin() {
    let img = ramp(40, 50);
    let spec = PatchSpec { size: 16, overlap: 4 };
    for p in extract_patches(&img, &spec).unwrap() {
        for (ch, row, col) in [(0, 0, 0), (1, 7, 3), (2, 15, 15)] {
            let got = p.image.data()[(ch * 16 + row) * 16 + col];
            let want = img.data()[(ch * 40 + p.y + row) * 50 + p.x + col];
            assert_eq!(got, want);
        }
    }
}

proptest! {
    #[test]
    fn patches_tile_the_image(size in 1usize..12, overlap_frac in 0.0f64..1.0, extra_h in 0usize..20, extra_w in 0usize..20) {
        let overlap = ((size as f64 * overlap_frac) as usize).min(size - 1);
        let spec = PatchSpec { size, overlap };
        let (h, w) = (size + extra_h, size + extra_w);
        let patches = extract_patches(&ramp(h, w), &spec).unwrap();
        let mut covered = vec![false; h * w];
        let mut seen = BTreeSet::new();
        for p in &patches {
            prop_assert!(seen.insert((p.y, p.x)), "duplicate origin {:?}", (p.y, p.x));
            prop_assert!(p.y + size <= h && p.x + size <= w);
            for y in p.y..p.y + size {
                for x in p.x..p.x + size {
                    covered[y * w + x] = true;
                }
            }
        }
        prop_assert!(covered.iter().all(|&c| c));
        prop_assert_eq!(patches.len(), brute_force_origins(h, size, spec.stride()).len() * brute_force_origins(w, size, spec.stride()).len());
    }
}

#[test]
fn generate_then_load_counts_match_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_corpus(dir.path(), &config(6, 16, 5)).unwrap();
    let corpus = load_corpus(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(corpus.len(), m.samples.len());
    assert_eq!(corpus.len(), 6 * m.domains.len());
    for d in &m.domains {
        let want = m.samples.iter().filter(|r| r.domain == d.id).count();
        assert_eq!(corpus.counts_by_domain()[&d.id], want);
        assert_eq!(corpus.select(Some(d.id), Some("test")).len(), m.samples.iter().filter(|r| r.domain == d.id && r.split == "test").count());
    }
    let r = &corpus.records()[0];
    assert_eq!(corpus.load(r).unwrap().shape(), &[1, 3, 16, 16]);
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_synthetic_corpus(a.path(), &config(3, 16, 9)).unwrap();
    generate_synthetic_corpus(b.path(), &config(3, 16, 9)).unwrap();
    for r in &ma.samples {
        assert_eq!(std::fs::read(a.path().join(&r.path)).unwrap(), std::fs::read(b.path().join(&r.path)).unwrap());
    }
    let manifest = |p: &std::path::Path| std::fs::read(p.join("manifest.json")).unwrap();
    assert_eq!(manifest(a.path()), manifest(b.path()));
}

#[test]
fn a_moved_corpus_still_loads() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let m = generate_synthetic_corpus(&first, &config(2, 8, 4)).unwrap();
    let moved = dir.path().join("elsewhere/second");
    std::fs::create_dir_all(moved.parent().unwrap()).unwrap();
    std::fs::rename(&first, &moved).unwrap();
    let corpus = load_corpus(&moved.join("manifest.json")).unwrap();
    assert_eq!(corpus.len(), m.samples.len());
    assert_eq!(corpus.manifest().resolve(&corpus.records()[0]), moved.join(&m.samples[0].path));
    corpus.load(&corpus.records()[0]).unwrap();
}

#[test]
fn empty_manifest_is_an_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let m = CorpusManifest { corpus_root: dir.path().into(), seed: 0, domains: vec![], samples: vec![] };
    let p = dir.path().join("manifest.json");
    m.write(&p).unwrap();
    assert!(load_corpus(&p).unwrap().is_empty());
}

#[test]
fn deleted_file_is_a_load_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_corpus(dir.path(), &config(2, 8, 1)).unwrap();
    let victim = dir.path().join(&m.samples[1].path);
    std::fs::remove_file(&victim).unwrap();
    let err = load_corpus(&dir.path().join("manifest.json")).unwrap_err();
    assert!(matches!(err, Error::Load(_)), "{err:?}");
    assert!(err.to_string().contains(&victim.display().to_string()), "{err}");
}

#[test]
fn inverting_any_render_recovers_the_content_field() {
    let cfg = config(4, 32, 21);
    for i in 0..cfg.n_samples {
        let s = synthesize_sample(&cfg, i).unwrap();
        for d in &cfg.domains {
            let back = d.invert(&s.renders[&d.id].cast::<f64>()).unwrap();
            let err = back.data().iter().zip(s.content.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            // Renders are f32, so the recovered field carries f32 rounding.
            assert!(err < 1e-5, "sample {i} domain {}: {err}", d.name);
        }
    }
}

#[test]
fn inverting_a_double_precision_render_is_exact_to_1e6() {
    let cfg = config(3, 32, 4);
    for i in 0..cfg.n_samples {
        let s = synthesize_sample(&cfg, i).unwrap();
        for d in &cfg.domains {
            let back = d.invert(&d.render::<f64>(&s.content).unwrap()).unwrap();
            let err = back.data().iter().zip(s.content.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "sample {i} domain {}: {err}", d.name);
        }
    }
}

fn luminance(img: &Tensor<f32>) -> Tensor<f64> {
    let (_, _, h, w) = img.dims4().unwrap();
    let hw = h * w;
    let d = img.data();
    let data = (0..hw).map(|p| 0.299 * d[p] as f64 + 0.587 * d[hw + p] as f64 + 0.114 * d[2 * hw + p] as f64).collect();
    Tensor::new(&[1, 1, h, w], data).unwrap()
}

#[test]
fn linear_tone_renders_share_structure() {
    let mut cfg = config(8, 64, 7);
    cfg.domains = linear_tone_domains();
    for i in 0..cfg.n_samples {
        let s = synthesize_sample(&cfg, i).unwrap();
        for a in &cfg.domains {
            for b in &cfg.domains {
                if a.id < b.id {
                    let v = ssim(&luminance(&s.renders[&a.id]), &luminance(&s.renders[&b.id])).unwrap();
                    assert!(v > 0.8, "sample {i} {}/{}: {v}", a.name, b.name);
                }
            }
        }
    }
}
