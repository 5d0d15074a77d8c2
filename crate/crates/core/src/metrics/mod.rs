//! Image-quality and distribution metrics: SSIM, MS-SSIM, PSNR and a
//! Fréchet distance over featurizer embeddings.

pub mod featurizer;

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::io::to_u8;
use crate::error::{Error, Result};
use crate::hash::write_atomic;
use crate::tensor::{Scalar, Tensor};
pub use featurizer::{train_featurizer, Featurizer, FeaturizerConfig};

/// SSIM is scored on intensities `(v + 1) / 2` in `[0, 1]`, the 8-bit
/// convention scaled to unit range. On signed pixel values the luminance
/// term degenerates wherever window means straddle zero.
pub const DATA_RANGE: f64 = 1.0;
pub const WINDOW: usize = 7;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn constants() -> (f64, f64) {
    ((0.01 * DATA_RANGE).powi(2), (0.03 * DATA_RANGE).powi(2))
}

/// Valid-mode `k×k` box mean of one plane.
fn box_mean(p: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let wo = w + 1 - k;
    let ho = h + 1 - k;
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = p[y * w + x..y * w + x + k].iter().sum::<f64>();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| rows[(y + i) * wo + x]).sum::<f64>() / (k * k) as f64;
        }
    }
    out
}

/// Mean SSIM map and mean contrast·structure map over one plane pair.
fn plane_stats(a: &[f64], b: &[f64], h: usize, w: usize, k: usize, c1: f64, c2: f64) -> (f64, f64) {
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let ma = box_mean(a, h, w, k);
    let mb = box_mean(b, h, w, k);
    let saa = box_mean(&prod(a, a), h, w, k);
    let sbb = box_mean(&prod(b, b), h, w, k);
    let sab = box_mean(&prod(a, b), h, w, k);
    let (mut s, mut cs) = (0.0, 0.0);
    for i in 0..ma.len() {
        let (mu_a, mu_b) = (ma[i], mb[i]);
        let va = saa[i] - mu_a * mu_a;
        let vb = sbb[i] - mu_b * mu_b;
        let cov = sab[i] - mu_a * mu_b;
        let c = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1);
        s += l * c;
        cs += c;
    }
    let n = ma.len() as f64;
    (s / n, cs / n)
}

/// `(ssim, cs)` averaged over every item and channel.
fn ssim_cs(a: &[f64], b: &[f64], planes: usize, h: usize, w: usize) -> (f64, f64) {
    let (c1, c2) = constants();
    let k = WINDOW.min(h).min(w);
    let hw = h * w;
    let (mut s, mut cs) = (0.0, 0.0);
    for p in 0..planes {
        let (ps, pc) = plane_stats(&a[p * hw..(p + 1) * hw], &b[p * hw..(p + 1) * hw], h, w, k, c1, c2);
        s += ps;
        cs += pc;
    }
    (s / planes as f64, cs / planes as f64)
}

fn intensities<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| (v.f64() + 1.0) / 2.0).collect()
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    a.same_shape(b)?;
    a.dims4()
}

/// Standard SSIM (7×7 uniform window, k1 = 0.01, k2 = 0.03) of `[−1, 1]` images.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let (n, c, h, w) = check_pair(a, b)?;
    Ok(ssim_cs(&intensities(a), &intensities(b), n * c, h, w).0)
}

/// Largest number of scales (≤ 5) that a `h×w` image supports.
pub fn max_ms_ssim_scales(h: usize, w: usize) -> usize {
    (1..=5).rev().find(|s| (1usize << (s - 1)) * WINDOW <= h.min(w)).unwrap_or(0)
}

fn downsample(p: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * ho * wo];
    for q in 0..planes {
        for y in 0..ho {
            for x in 0..wo {
                let at = |dy: usize, dx: usize| p[q * h * w + (2 * y + dy) * w + 2 * x + dx];
                out[q * ho * wo + y * wo + x] = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
            }
        }
    }
    (out, ho, wo)
}

/// Multi-scale SSIM over `scales` dyadic levels, using the leading
/// conventional weights renormalized to sum to one. Negative per-scale terms
/// are clipped to zero before exponentiation.
pub fn ms_ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, scales: usize) -> Result<f64> {
    let (n, c, mut h, mut w) = check_pair(a, b)?;
    if scales == 0 || scales > 5 {
        return Err(Error::Input(format!("MS-SSIM supports 1 to 5 scales, got {scales}")));
    }
    if (1usize << (scales - 1)) * WINDOW > h.min(w) {
        return Err(Error::Input(format!(
            "{h}×{w} images are too small for {scales} scales (need at least {} pixels per side)",
            (1usize << (scales - 1)) * WINDOW
        )));
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = weights.iter().sum();
    let (mut pa, mut pb) = (intensities(a), intensities(b));
    let mut out = 1.0;
    for (j, wgt) in weights.iter().enumerate() {
        let (s, cs) = ssim_cs(&pa, &pb, n * c, h, w);
        let term = if j + 1 == scales { s } else { cs };
        out *= term.max(0.0).powf(wgt / total);
        if j + 1 < scales {
            let (da, h2, w2) = downsample(&pa, n * c, h, w);
            pb = downsample(&pb, n * c, h, w).0;
            pa = da;
            (h, w) = (h2, w2);
        }
    }
    Ok(out)
}

/// `10·log10(peak² / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("PSNR of {} and {} values", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() })
}

/// PSNR of two `[−1, 1]` images after mapping both to 8-bit levels.
pub fn psnr_8bit<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.same_shape(b)?;
    let levels = |t: &Tensor<T>| t.data().iter().map(|v| to_u8(v.f64()) as f64).collect::<Vec<_>>();
    psnr(&levels(a), &levels(b), 255.0)
}

/// Mean and covariance (divisor `n − 1`, or 1 for a single sample).
pub fn gaussian_fit(emb: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = emb.first().map(Vec::len).ok_or_else(|| Error::Input("embedding set is empty".into()))?;
    if emb.iter().any(|e| e.len() != d) {
        return Err(Error::Shape("embeddings differ in dimension".into()));
    }
    let n = emb.len();
    let mut mean = DVector::zeros(d);
    for e in emb {
        mean += DVector::from_column_slice(e);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for e in emb {
        let v = DVector::from_column_slice(e) - &mean;
        cov += &v * v.transpose();
    }
    cov /= (n.max(2) - 1) as f64;
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let root = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(ΣaΣb)^{1/2})` with `1e-6·I` added to both
/// covariances; the trace of the root comes from the symmetric form
/// `(Σa^{1/2} Σb Σa^{1/2})^{1/2}`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, mut ca) = gaussian_fit(a)?;
    let (mb, mut cb) = gaussian_fit(b)?;
    if ma.len() != mb.len() {
        return Err(Error::Shape(format!("embedding dimensions {} and {}", ma.len(), mb.len())));
    }
    let d = ma.len();
    ca += DMatrix::identity(d, d) * 1e-6;
    cb += DMatrix::identity(d, d) * 1e-6;
    let ra = sym_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let diff = (&ma - &mb).norm_squared();
    Ok((diff + ca.trace() + cb.trace() - 2.0 * tr_root).max(0.0))
}

/// Fréchet distance between two image sets in the featurizer's embedding space.
pub fn frechet_feature_distance(a: &[Tensor<f32>], b: &[Tensor<f32>], featurizer: &Featurizer) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("Fréchet distance needs two nonempty image sets".into()));
    }
    frechet_distance(&featurizer.embed_all(a)?, &featurizer.embed_all(b)?)
}

/// Standard error of the mean from `resamples` seeded bootstrap draws.
pub fn bootstrap_se(values: &[f64], resamples: usize, seed: u64) -> f64 {
    let n = values.len();
    if n < 2 || resamples < 2 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let m = means.iter().sum::<f64>() / resamples as f64;
    (means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (resamples - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub lambda: Option<f64>,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub psnr_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub lambda: Option<f64>,
    pub rows: Vec<ImageMetrics>,
    pub count: usize,
    pub ssim: Aggregate,
    pub ms_ssim: Aggregate,
    /// Mean over finite values; `infinite_psnr` counts exact matches.
    pub psnr_db: Aggregate,
    pub infinite_psnr: usize,
    pub ms_ssim_scales: usize,
    pub frechet: Option<f64>,
    pub featurizer_hash: Option<String>,
}

pub struct Evaluated<'a> {
    pub image_id: &'a str,
    pub output: &'a Tensor<f32>,
    pub truth: &'a Tensor<f32>,
}

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

fn aggregate(values: &[f64], seed: u64) -> Aggregate {
    let n = values.len().max(1) as f64;
    Aggregate { mean: values.iter().sum::<f64>() / n, se: bootstrap_se(values, BOOTSTRAP_RESAMPLES, seed) }
}

/// Per-image metrics against paired ground truth, their means with bootstrap
/// standard errors, and (given a featurizer) the Fréchet distance between
/// the outputs and `reference`.
pub fn metric_report(
    items: &[Evaluated<'_>],
    lambda: Option<f64>,
    reference: &[Tensor<f32>],
    featurizer: Option<&Featurizer>,
    seed: u64,
) -> Result<MetricBundle> {
    if items.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let (_, _, h, w) = items[0].output.dims4()?;
    let scales = max_ms_ssim_scales(h, w);
    if scales == 0 {
        return Err(Error::Input(format!("{h}×{w} images are smaller than the {WINDOW}-pixel window")));
    }
    let rows = items
        .iter()
        .map(|it| {
            Ok(ImageMetrics {
                image_id: it.image_id.to_string(),
                lambda,
                ssim: ssim(it.output, it.truth)?,
                ms_ssim: ms_ssim(it.output, it.truth, scales)?,
                psnr_db: psnr_8bit(it.output, it.truth)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&ImageMetrics) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let psnr_all = col(|r| r.psnr_db);
    let finite: Vec<f64> = psnr_all.iter().copied().filter(|v| v.is_finite()).collect();
    let frechet = match featurizer {
        Some(f) if !reference.is_empty() => {
            let outs: Vec<Tensor<f32>> = items.iter().map(|i| i.output.clone()).collect();
            Some(frechet_feature_distance(&outs, reference, f)?)
        }
        _ => None,
    };
    Ok(MetricBundle {
        lambda,
        count: rows.len(),
        ssim: aggregate(&col(|r| r.ssim), seed),
        ms_ssim: aggregate(&col(|r| r.ms_ssim), seed.wrapping_add(1)),
        psnr_db: aggregate(&finite, seed.wrapping_add(2)),
        infinite_psnr: psnr_all.len() - finite.len(),
        ms_ssim_scales: scales,
        frechet,
        featurizer_hash: featurizer.map(|f| f.hash().to_string()),
        rows,
    })
}

pub const CSV_HEADER: &str = "image_id,lambda,ssim,ms_ssim,psnr_db,frechet";

fn num(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v}")
    }
}

/// Per-image rows followed by one `corpus` row per bundle.
pub fn metrics_csv(bundles: &[MetricBundle]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let lam = |l: Option<f64>| l.map(num).unwrap_or_default();
    for b in bundles {
        for r in &b.rows {
            out.push_str(&format!("{},{},{},{},{},\n", r.image_id, lam(r.lambda), num(r.ssim), num(r.ms_ssim), num(r.psnr_db)));
        }
    }
    for b in bundles {
        let psnr = if b.infinite_psnr == b.count { f64::INFINITY } else { b.psnr_db.mean };
        out.push_str(&format!(
            "corpus,{},{},{},{},{}\n",
            lam(b.lambda),
            num(b.ssim.mean),
            num(b.ms_ssim.mean),
            num(psnr),
            b.frechet.map(num).unwrap_or_default()
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, bundles: &[MetricBundle]) -> Result<()> {
    let mut buf = Vec::new();
    buf.write_all(metrics_csv(bundles).as_bytes()).map_err(|e| Error::io(path, e))?;
    write_atomic(path, &buf)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Input("rank correlation needs two equal-length series of at least 2".into()));
    }
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for k in i..=j {
                r[idx[k]] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (rank(x), rank(y));
    let m = (x.len() - 1) as f64 / 2.0;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - m) * (b - m)).sum();
    let vx: f64 = rx.iter().map(|a| (a - m).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - m).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_img(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    /// Per-window SSIM written directly from the definition, over
    /// intensities `(v + 1) / 2` with unit dynamic range.
    fn reference_ssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let (a, b) = (&a.map(|v| (v + 1.0) / 2.0), &b.map(|v| (v + 1.0) / 2.0));
        let (n, c, h, w) = a.dims4().unwrap();
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for p in 0..n * c {
            let at = |t: &Tensor<f64>, y: usize, x: usize| t.data()[p * h * w + y * w + x];
            for y0 in 0..=h - 7 {
                for x0 in 0..=w - 7 {
                    let mut s = [0.0f64; 5];
                    for y in y0..y0 + 7 {
                        for x in x0..x0 + 7 {
                            let (u, v) = (at(a, y, x), at(b, y, x));
                            s[0] += u;
                            s[1] += v;
                        }
                    }
                    let (mu, mv) = (s[0] / 49.0, s[1] / 49.0);
                    for y in y0..y0 + 7 {
                        for x in x0..x0 + 7 {
                            let (u, v) = (at(a, y, x) - mu, at(b, y, x) - mv);
                            s[2] += u * u;
                            s[3] += v * v;
                            s[4] += u * v;
                        }
                    }
                    let (va, vb, cv) = (s[2] / 49.0, s[3] / 49.0, s[4] / 49.0);
                    acc += (2.0 * mu * mv + c1) * (2.0 * cv + c2) / ((mu * mu + mv * mv + c1) * (va + vb + c2));
                    cnt += 1.0;
                }
            }
        }
        acc / cnt
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a = rand_img(1, &[1, 3, 16, 16]);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(ms_ssim(&a, &a, 2).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_constant_shift_matches_reference() {
        // Intensities in [0, 1] and a shift of 0.1 in intensity units.
        let a = rand_img(2, &[1, 3, 20, 20]).map(|v| 2.0 * v - 1.0);
        let b = a.map(|v| v + 0.2);
        let got = ssim(&a, &b).unwrap();
        let want = reference_ssim(&a, &b);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        assert!((ssim(&b, &a).unwrap() - got).abs() < 1e-15);
    }

    #[test]
    fn inverted_checkerboard_has_negative_ssim() {
        let board: Vec<f64> = (0..256).map(|p| if (p / 16 + p % 16) % 2 == 0 { 0.5 } else { -0.5 }).collect();
        let a = Tensor::new(&[1, 1, 16, 16], board).unwrap();
        let b = a.map(|v| -v);
        let got = ssim(&a, &b).unwrap();
        assert!(got < 0.0);
        assert!((got - reference_ssim(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn metric_ssim_agrees_with_the_loss_implementation() {
        use crate::stain_prompt::{struct_similarity, SimilarityVariant};
        let a = rand_img(3, &[1, 3, 12, 12]);
        let b = rand_img(4, &[1, 3, 12, 12]);
        let (c1, c2) = constants();
        let shift = |t: &Tensor<f64>| t.map(|v| (v + 1.0) / 2.0);
        let loss_form = struct_similarity(&shift(&a), &shift(&b), c1, c2, SimilarityVariant::StandardSsim).unwrap();
        assert!((ssim(&a, &b).unwrap() - loss_form).abs() < 1e-12);
    }

    #[test]
    fn ms_ssim_rejects_small_images() {
        let a = rand_img(5, &[1, 3, 64, 64]);
        let b = rand_img(6, &[1, 3, 64, 64]);
        assert_eq!(max_ms_ssim_scales(64, 64), 4);
        assert!(matches!(ms_ssim(&a, &b, 5), Err(Error::Input(_))));
        let v = ms_ssim(&a, &b, 4).unwrap();
        assert!((0.0..=1.0).contains(&v));
        assert!((ms_ssim(&b, &a, 4).unwrap() - v).abs() < 1e-12);
    }

    #[test]
    fn psnr_cases() {
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
        let b: Vec<f64> = a.iter().map(|v| v + 255.0).collect();
        assert!(psnr(&a, &b, 255.0).unwrap().abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..255.0)).collect();
        let y: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..255.0)).collect();
        let mut sq = 0.0;
        for (p, q) in x.iter().zip(&y) {
            let d = p - q;
            sq += d * d;
        }
        let want = 10.0 * (255.0f64.powi(2) / (sq / 500.0)).log10();
        assert!((psnr(&x, &y, 255.0).unwrap() - want).abs() < 1e-9);
    }

    fn cloud(n: usize, d: usize, offset: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|k| Distribution::<f64>::sample(&StandardNormal, &mut rng) + if k == 0 { offset } else { 0.0 }).collect())
            .collect()
    }

    #[test]
    fn frechet_identical_sets_is_zero_and_symmetric() {
        let a = cloud(50, 4, 0.0, 1);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
        let b = cloud(60, 4, 0.5, 2);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
        assert!(frechet_distance(&[], &a).is_err());
    }

    #[test]
    fn frechet_of_unit_clouds_is_the_squared_offset() {
        let a = cloud(20000, 3, 0.0, 3);
        let b = cloud(20000, 3, 2.0, 4);
        let d = frechet_distance(&a, &b).unwrap();
        assert!((d - 4.0).abs() < 0.15, "{d}");
    }

    #[test]
    fn bootstrap_se_tracks_the_analytic_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v: Vec<f64> = (0..400).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let m = v.iter().sum::<f64>() / 400.0;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 399.0).sqrt();
        let se = bootstrap_se(&v, BOOTSTRAP_RESAMPLES, 1);
        let want = sd / 20.0;
        assert!((se - want).abs() < 0.1 * want, "{se} vs {want}");
        assert_eq!(se, bootstrap_se(&v, BOOTSTRAP_RESAMPLES, 1));
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn report_rows_are_order_independent_and_csv_has_fixed_header() {
        let imgs: Vec<Tensor<f32>> = (0..4).map(|i| rand_img(10 + i, &[1, 3, 16, 16]).map(|v| 2.0 * v - 1.0).cast()).collect();
        let truth: Vec<Tensor<f32>> = imgs.iter().map(|t| t.map(|v| (v * 0.9).clamp(-1.0, 1.0))).collect();
        let ids = ["a", "b", "c", "d"];
        let items: Vec<Evaluated> =
            (0..4).map(|i| Evaluated { image_id: ids[i], output: &imgs[i], truth: &truth[i] }).collect();
        let rev: Vec<Evaluated> =
            (0..4).rev().map(|i| Evaluated { image_id: ids[i], output: &imgs[i], truth: &truth[i] }).collect();
        let r1 = metric_report(&items, Some(0.5), &[], None, 0).unwrap();
        let r2 = metric_report(&rev, Some(0.5), &[], None, 0).unwrap();
        assert!((r1.ssim.mean - r2.ssim.mean).abs() < 1e-15);
        assert_eq!(r1.count, 4);
        let self_items: Vec<Evaluated> =
            (0..4).map(|i| Evaluated { image_id: ids[i], output: &imgs[i], truth: &imgs[i] }).collect();
        let perfect = metric_report(&self_items, None, &[], None, 0).unwrap();
        assert_eq!(perfect.ssim.mean, 1.0);
        assert_eq!(perfect.infinite_psnr, 4);
        let csv = metrics_csv(&[r1, perfect]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 1 + 8 + 2);
        assert!(lines.last().unwrap().starts_with("corpus,,1,1,inf,"));
    }
}
