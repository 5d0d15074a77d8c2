//! 8-bit PNG storage with the affine mapping `u8 = round((v + 1) / 2 · 255)`.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::hash::write_atomic;
use crate::tensor::{Scalar, Tensor};

pub fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8
}

pub fn from_u8(b: u8) -> f64 {
    b as f64 / 255.0 * 2.0 - 1.0
}

/// Rounds each value to the nearest level representable in an 8-bit file,
/// clamping to `[−1, 1]` first.
pub fn quantize<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    image.map(|v| T::of(from_u8(to_u8(v.f64()))))
}

fn encode_png<P: image::Pixel<Subpixel = S> + image::PixelWithColorType, S: image::Primitive>(
    buf: ImageBuffer<P, Vec<S>>,
) -> Result<Vec<u8>>
where
    [S]: image::EncodableLayout,
{
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    Ok(bytes)
}

/// Writes a `1×3×H×W` image in `[−1, 1]` (values outside are clamped).
pub fn save_png<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("save_png expects 1×3×H×W, got {:?}", image.shape())));
    }
    let hw = h * w;
    let d = image.data();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|k| to_u8(d[k * hw + p].f64())))
    });
    write_atomic(path, &encode_png(buf)?)
}

/// Reads an RGB PNG into a `1×3×H×W` tensor in `[−1, 1]`.
pub fn load_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Load(format!("{}: {other}", path.display())),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let hw = h * w;
    let mut data = vec![T::zero(); 3 * hw];
    for (x, y, px) in rgb.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for k in 0..3 {
            data[k * hw + p] = T::of(from_u8(px.0[k]));
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}

/// Writes a `1×1×H×W` field in `[0, 1]` as a 16-bit grayscale PNG.
pub fn save_field_png(path: &Path, field: &Tensor<f64>) -> Result<()> {
    let (n, c, h, w) = field.dims4()?;
    if n != 1 || c != 1 {
        return Err(Error::Shape(format!("save_field_png expects 1×1×H×W, got {:?}", field.shape())));
    }
    let d = field.data();
    let buf = ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
        Luma([(d[y as usize * w + x as usize].clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    write_atomic(path, &encode_png(buf)?)
}

pub fn load_field_png(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let g = img.to_luma16();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let data = g.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
    Tensor::new(&[1, 1, h, w], data)
}
