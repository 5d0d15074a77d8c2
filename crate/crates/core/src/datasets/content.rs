//! Procedural tissue-like density fields.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Knobs of the density generator. Counts are per 64×64 area and scale with
/// image area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContentParams {
    pub blobs: f64,
    pub blob_sigma: (f64, f64),
    pub nuclei: f64,
    pub nucleus_sigma: (f64, f64),
    pub ridges: f64,
    pub ridge_length: (f64, f64),
    pub ridge_width: (f64, f64),
    /// Overall density gain before the soft saturation `1 − exp(−s)`.
    pub gain: f64,
}

impl Default for ContentParams {
    fn default() -> Self {
        Self {
            blobs: 5.0,
            blob_sigma: (3.0, 8.0),
            nuclei: 18.0,
            nucleus_sigma: (0.9, 1.6),
            ridges: 4.0,
            ridge_length: (20.0, 60.0),
            ridge_width: (0.8, 1.6),
            gain: 1.6,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn count<R: Rng + ?Sized>(rng: &mut R, per_tile: f64, area_scale: f64) -> usize {
    let mean = per_tile * area_scale;
    let jitter = 0.5 + rng.random::<f64>();
    (mean * jitter).round().max(1.0) as usize
}

/// Adds an anisotropic Gaussian bump of amplitude `amp`.
fn splat_bump(field: &mut [f64], h: usize, w: usize, cy: f64, cx: f64, sy: f64, sx: f64, theta: f64, amp: f64) {
    let reach = 3.5 * sy.max(sx);
    let (sin, cos) = theta.sin_cos();
    let y0 = ((cy - reach).floor().max(0.0)) as usize;
    let y1 = ((cy + reach).ceil().min(h as f64 - 1.0)).max(0.0) as usize;
    let x0 = ((cx - reach).floor().max(0.0)) as usize;
    let x1 = ((cx + reach).ceil().min(w as f64 - 1.0)).max(0.0) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            field[y * w + x] += amp * (-0.5 * (u * u / (sx * sx) + v * v / (sy * sy))).exp();
        }
    }
}

/// Thin curvilinear ridge traced by a heading random walk; each pixel takes
/// the maximum profile over the path so overlapping samples do not stack.
fn splat_ridge<R: Rng + ?Sized>(field: &mut [f64], h: usize, w: usize, p: &ContentParams, rng: &mut R) {
    let len = uniform(rng, p.ridge_length).round() as usize;
    let width = uniform(rng, p.ridge_width);
    let amp = uniform(rng, (0.6, 1.2));
    let turn = Normal::new(0.0, 0.12).expect("valid sigma");
    let mut y = rng.random::<f64>() * h as f64;
    let mut x = rng.random::<f64>() * w as f64;
    let mut heading = rng.random::<f64>() * std::f64::consts::TAU;
    let mut ridge = vec![0f64; h * w];
    let reach = (3.0 * width).ceil() as isize;
    for _ in 0..len {
        let (iy, ix) = (y.round() as isize, x.round() as isize);
        for yy in (iy - reach).max(0)..=(iy + reach).min(h as isize - 1) {
            for xx in (ix - reach).max(0)..=(ix + reach).min(w as isize - 1) {
                let d2 = (yy as f64 - y).powi(2) + (xx as f64 - x).powi(2);
                let v = amp * (-0.5 * d2 / (width * width)).exp();
                let cell = &mut ridge[yy as usize * w + xx as usize];
                *cell = cell.max(v);
            }
        }
        heading += turn.sample(rng);
        y += heading.sin();
        x += heading.cos();
    }
    for (f, r) in field.iter_mut().zip(&ridge) {
        *f += r;
    }
}

/// Density field in `[0, 1)` of shape `1×1×size×size`.
pub fn generate_content<R: Rng + ?Sized>(size: usize, params: &ContentParams, rng: &mut R) -> Tensor<f64> {
    let (h, w) = (size, size);
    let area_scale = (h * w) as f64 / (64.0 * 64.0);
    let mut field = vec![0f64; h * w];
    for _ in 0..count(rng, params.blobs, area_scale) {
        let s1 = uniform(rng, params.blob_sigma);
        let s2 = s1 * uniform(rng, (0.35, 1.0));
        let (cy, cx) = (rng.random::<f64>() * h as f64, rng.random::<f64>() * w as f64);
        let theta = rng.random::<f64>() * std::f64::consts::PI;
        let amp = uniform(rng, (0.3, 0.9));
        splat_bump(&mut field, h, w, cy, cx, s1, s2, theta, amp);
    }
    for _ in 0..count(rng, params.nuclei, area_scale) {
        let s = uniform(rng, params.nucleus_sigma);
        let (cy, cx) = (rng.random::<f64>() * h as f64, rng.random::<f64>() * w as f64);
        let amp = uniform(rng, (0.8, 1.6));
        splat_bump(&mut field, h, w, cy, cx, s, s * uniform(rng, (0.7, 1.0)), rng.random::<f64>() * 3.2, amp);
    }
    for _ in 0..count(rng, params.ridges, area_scale) {
        splat_ridge(&mut field, h, w, params, rng);
    }
    let data = field.into_iter().map(|s| 1.0 - (-params.gain * s).exp()).collect();
    Tensor::new(&[1, 1, h, w], data).expect("length matches")
}
