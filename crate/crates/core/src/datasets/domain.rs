//! Stain domains as invertible intensity-to-colour maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Colour model of one stain: `rgb = bias + mix · [c^γ₀, c^γ₁, c^γ₂]`,
/// rendered into `[−1, 1]` as `2·rgb − 1`. `c` is structure density in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StainDomain {
    pub id: u8,
    pub name: String,
    pub mix: [[f64; 3]; 3],
    pub bias: [f64; 3],
    pub gamma: [f64; 3],
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inv3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let d = det3(m);
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    [
        [c(1, 1, 2, 2) / d, -c(0, 1, 2, 2) / d, c(0, 1, 1, 2) / d],
        [-c(1, 0, 2, 2) / d, c(0, 0, 2, 2) / d, -c(0, 0, 1, 2) / d],
        [c(1, 0, 2, 1) / d, -c(0, 0, 2, 1) / d, c(0, 0, 1, 1) / d],
    ]
}

impl StainDomain {
    /// Renders structure `c` to `rgb` in `[0, 1]` (before the `[−1, 1]` mapping).
    pub fn rgb(&self, c: f64) -> [f64; 3] {
        let u = [c.powf(self.gamma[0]), c.powf(self.gamma[1]), c.powf(self.gamma[2])];
        let mut out = self.bias;
        for (k, o) in out.iter_mut().enumerate() {
            for (j, uj) in u.iter().enumerate() {
                *o += self.mix[k][j] * uj;
            }
        }
        out
    }

    /// Checks invertibility and that every density renders inside `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if det3(&self.mix).abs() < 1e-9 {
            return Err(Error::Domain(format!("domain {}: mixing matrix is singular", self.name)));
        }
        if self.gamma.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return Err(Error::Domain(format!("domain {}: tone exponents must be positive", self.name)));
        }
        for i in 0..=1000 {
            let rgb = self.rgb(i as f64 / 1000.0);
            if rgb.iter().any(|&v| !(-1e-12..=1.0 + 1e-12).contains(&v)) {
                return Err(Error::Domain(format!(
                    "domain {}: density {} renders outside [0, 1]: {rgb:?}",
                    self.name,
                    i as f64 / 1000.0
                )));
            }
        }
        Ok(())
    }

    /// Renders a `1×1×H×W` density field as a `1×3×H×W` image in `[−1, 1]`.
    pub fn render<T: Scalar>(&self, content: &Tensor<f64>) -> Result<Tensor<T>> {
        let (n, c, h, w) = content.dims4()?;
        if n != 1 || c != 1 {
            return Err(Error::Shape(format!("content field must be 1×1×H×W, got {:?}", content.shape())));
        }
        let hw = h * w;
        let mut out = vec![T::zero(); 3 * hw];
        for (p, &v) in content.data().iter().enumerate() {
            let rgb = self.rgb(v);
            for k in 0..3 {
                out[k * hw + p] = T::of(2.0 * rgb[k] - 1.0);
            }
        }
        Tensor::new(&[1, 3, h, w], out)
    }

    /// Recovers the density field from an image rendered by this domain.
    /// Each channel gives an estimate; their mean is returned, clamped to `[0, 1]`.
    pub fn invert<T: Scalar>(&self, image: &Tensor<T>) -> Result<Tensor<f64>> {
        let (n, c, h, w) = image.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::Shape(format!("expected a 1×3×H×W image, got {:?}", image.shape())));
        }
        let inv = inv3(&self.mix);
        let hw = h * w;
        let d = image.data();
        let mut out = vec![0f64; hw];
        for (p, o) in out.iter_mut().enumerate() {
            let rgb = [0, 1, 2].map(|k| (d[k * hw + p].f64() + 1.0) / 2.0 - self.bias[k]);
            let mut est = 0.0;
            for j in 0..3 {
                let u: f64 = (0..3).map(|k| inv[j][k] * rgb[k]).sum();
                est += u.clamp(0.0, 1.0).powf(1.0 / self.gamma[j]);
            }
            *o = est / 3.0;
        }
        Tensor::new(&[1, 1, h, w], out)
    }
}

fn diag_mix(bg: [f64; 3], ink: [f64; 3], cross: f64) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for k in 0..3 {
        m[k][k] = (ink[k] - bg[k]) * (1.0 - 2.0 * cross);
        for j in 0..3 {
            if j != k {
                m[k][j] = (ink[k] - bg[k]) * cross;
            }
        }
    }
    m
}

fn preset(id: u8, name: &str, bg: [f64; 3], ink: [f64; 3], gamma: [f64; 3]) -> StainDomain {
    StainDomain { id, name: name.into(), mix: diag_mix(bg, ink, 0.08), bias: bg, gamma }
}

/// Four stain analogues: dark structure on a light, tinted background, with
/// hue shifting through the midtones via distinct per-channel tone curves.
pub fn default_domains() -> Vec<StainDomain> {
    vec![
        preset(0, "he", [0.96, 0.86, 0.93], [0.38, 0.12, 0.52], [0.8, 1.1, 1.5]),
        preset(1, "mas", [0.90, 0.93, 0.97], [0.55, 0.18, 0.20], [1.4, 0.9, 0.7]),
        preset(2, "pas", [0.97, 0.91, 0.95], [0.62, 0.10, 0.45], [1.0, 1.3, 0.8]),
        preset(3, "pasm", [0.93, 0.92, 0.88], [0.10, 0.10, 0.12], [1.2, 1.0, 0.85]),
    ]
}

/// Same presets with every tone exponent set to 1.
pub fn linear_tone_domains() -> Vec<StainDomain> {
    default_domains()
        .into_iter()
        .map(|mut d| {
            d.gamma = [1.0; 3];
            d
        })
        .collect()
}

/// `rgb = (c, c, c)`.
pub fn identity_domain(id: u8) -> StainDomain {
    StainDomain {
        id,
        name: format!("identity{id}"),
        mix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        bias: [0.0; 3],
        gamma: [1.0; 3],
    }
}
