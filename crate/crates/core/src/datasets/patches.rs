//! Sliding-window patch extraction and ingestion of external image folders.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::{load_png, save_png};
use super::SampleRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSpec {
    pub size: usize,
    pub overlap: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { size: 256, overlap: 192 }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.overlap >= self.size {
            return Err(Error::Config(format!(
                "patch spec needs 0 <= overlap < size, got size {} overlap {}",
                self.size, self.overlap
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.size - self.overlap
    }

    /// Window origins along an axis of length `len`; the last window is
    /// clamped to the far edge.
    pub fn origins(&self, len: usize) -> Vec<usize> {
        let mut out: Vec<usize> = (0..).map(|i| i * self.stride()).take_while(|&o| o + self.size <= len).collect();
        if let Some(&last) = out.last() {
            if last + self.size < len {
                out.push(len - self.size);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub y: usize,
    pub x: usize,
    pub image: Tensor<f32>,
}

/// Raster-order windows over a `1×C×H×W` image.
pub fn extract_patches(image: &Tensor<f32>, spec: &PatchSpec) -> Result<Vec<Patch>> {
    spec.validate()?;
    let (n, c, h, w) = image.dims4()?;
    if n != 1 {
        return Err(Error::Input(format!("expected a single image, got batch of {n}")));
    }
    if h < spec.size || w < spec.size {
        return Err(Error::Input(format!("image {h}×{w} is smaller than patch size {}", spec.size)));
    }
    let s = spec.size;
    let mut out = Vec::new();
    for y in spec.origins(h) {
        for x in spec.origins(w) {
            let mut data = Vec::with_capacity(c * s * s);
            for ch in 0..c {
                for row in y..y + s {
                    let start = (ch * h + row) * w + x;
                    data.extend_from_slice(&image.data()[start..start + s]);
                }
            }
            out.push(Patch { y, x, image: Tensor::new(&[1, c, s, s], data)? });
        }
    }
    Ok(out)
}

/// Fraction of pixels darker than `background` (mean over channels, in
/// `[−1, 1]` units). Bright slide background counts as empty.
pub fn foreground_fraction(image: &Tensor<f32>, background: f32) -> f64 {
    let c = image.shape()[1];
    let hw = image.item_len() / c;
    let d = image.data();
    let dark = (0..hw)
        .filter(|&p| (0..c).map(|k| d[k * hw + p]).sum::<f32>() / (c as f32) < background)
        .count();
    dark as f64 / hw as f64
}

/// Options for turning a folder of large images into corpus patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    pub patch: PatchSpec,
    /// Patches whose foreground fraction is below this are dropped.
    pub min_foreground: f64,
    pub background_level: f32,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { patch: PatchSpec::default(), min_foreground: 0.1, background_level: 0.8 }
    }
}

/// Cuts every PNG in `src` into patches written under `out_dir`, returning
/// one record per kept patch, tagged with `domain` and `split`.
pub fn ingest_folder(src: &Path, out_dir: &Path, domain: u8, split: &str, cfg: &IngestConfig) -> Result<Vec<SampleRecord>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(src)
        .map_err(|e| Error::io(src, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    let mut records = Vec::new();
    for f in files {
        let img: Tensor<f32> = load_png(&f)?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        for p in extract_patches(&img, &cfg.patch)? {
            if foreground_fraction(&p.image, cfg.background_level) < cfg.min_foreground {
                continue;
            }
            let id = format!("{stem}_y{}_x{}", p.y, p.x);
            let path = out_dir.join(format!("{id}.png"));
            save_png(&path, &p.image)?;
            records.push(SampleRecord { id, domain, path, split: split.to_string() });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor<f32> {
        let data = (0..3 * h * w).map(|i| (i % 97) as f32 / 97.0).collect();
        Tensor::new(&[1, 3, h, w], data).unwrap()
    }

    #[test]
    fn window_equal_to_image_gives_one_patch() {
        let p = extract_patches(&ramp(256, 256), &PatchSpec::default()).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].y, p[0].x), (0, 0));
    }

    #[test]
    fn wide_image_gets_two_columns() {
        let img = ramp(256, 320);
        let p = extract_patches(&img, &PatchSpec::default()).unwrap();
        let xs: Vec<usize> = p.iter().map(|p| p.x).collect();
        assert_eq!(xs, vec![0, 64]);
        assert_eq!(p[1].image.data()[0], img.data()[64]);
    }

    #[test]
    fn trailing_window_is_clamped() {
        let spec = PatchSpec { size: 4, overlap: 1 };
        assert_eq!(spec.origins(10), vec![0, 3, 6]);
        assert_eq!(spec.origins(11), vec![0, 3, 6, 7]);
        assert_eq!(spec.origins(3), Vec::<usize>::new());
    }

    #[test]
    fn small_image_and_bad_spec_are_rejected() {
        assert!(matches!(extract_patches(&ramp(100, 300), &PatchSpec::default()), Err(Error::Input(_))));
        let bad = PatchSpec { size: 8, overlap: 8 };
        assert!(extract_patches(&ramp(16, 16), &bad).is_err());
    }

    #[test]
    fn foreground_counts_dark_pixels() {
        let mut img = Tensor::full(&[1, 3, 2, 2], 1.0f32);
        for k in 0..3 {
            img.data_mut()[k * 4] = -0.5;
        }
        assert_eq!(foreground_fraction(&img, 0.8), 0.25);
    }
}
