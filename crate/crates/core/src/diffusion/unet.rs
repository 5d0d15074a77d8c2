//! Small class-conditional U-shaped noise predictor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{sinusoidal_embedding, Bound, Conv2d, GroupNorm, Linear, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub image_channels: usize,
    /// Pixel-unshuffle factor applied before the first convolution.
    pub patch: usize,
    /// Channel width per resolution level.
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    pub time_features: usize,
    pub embed_dim: usize,
    pub groups: usize,
    /// Number of labels including the null label.
    pub num_labels: usize,
    /// Zero-initialize residual and output branches.
    pub zero_init: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            patch: 2,
            channels: vec![32, 64, 64],
            blocks_per_level: 1,
            time_features: 32,
            embed_dim: 128,
            groups: 8,
            num_labels: 5,
            zero_init: true,
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        cfg: &UNetConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), c_in, cfg.groups),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1, false, rng),
            emb: Linear::new(store, &format!("{name}.emb"), cfg.embed_dim, c_out, rng),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), c_out, cfg.groups),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, cfg.zero_init, rng),
            skip: (c_in != c_out).then(|| Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1, 1, false, rng)),
        }
    }

    fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>, emb: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.conv1.forward(p, self.norm1.forward(p, x)?.silu())?;
        let h = h.add_channel_bias(self.emb.forward(p, emb)?)?;
        let h = self.conv2.forward(p, self.norm2.forward(p, h)?.silu())?;
        let skip = match &self.skip {
            Some(c) => c.forward(p, x)?,
            None => x,
        };
        skip.add(h)
    }
}

/// Noise predictor `ε(x, t, c)` over `n×C×H×W` images.
#[derive(Clone)]
pub struct UNet<T: Scalar> {
    cfg: UNetConfig,
    params: ParamStore<T>,
    time1: Linear,
    time2: Linear,
    labels: ParamId,
    conv_in: Conv2d,
    down: Vec<Vec<ResBlock>>,
    downsample: Vec<Conv2d>,
    mid: [ResBlock; 2],
    up: Vec<Vec<ResBlock>>,
    upsample: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl<T: Scalar> UNet<T> {
    pub fn new<R: Rng + ?Sized>(cfg: UNetConfig, rng: &mut R) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.patch == 0 || cfg.blocks_per_level == 0 || cfg.num_labels < 2 {
            return Err(Error::Config(format!("invalid network configuration {cfg:?}")));
        }
        let mut s = ParamStore::new();
        let time1 = Linear::new(&mut s, "time.fc1", cfg.time_features, cfg.embed_dim, rng);
        let time2 = Linear::new(&mut s, "time.fc2", cfg.embed_dim, cfg.embed_dim, rng);
        let labels = s.add(
            "label.table",
            Tensor::<f64>::randn(&[cfg.num_labels, cfg.embed_dim], rng).cast(),
        );
        let c_pix = cfg.image_channels * cfg.patch * cfg.patch;
        let c0 = cfg.channels[0];
        let conv_in = Conv2d::new(&mut s, "conv_in", c_pix, c0, 3, 1, false, rng);
        let levels = cfg.channels.len();
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut skips = vec![c0];
        let mut c = c0;
        for (l, &cl) in cfg.channels.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks_per_level {
                blocks.push(ResBlock::new(&mut s, &format!("down{l}.res{b}"), c, cl, &cfg, rng));
                c = cl;
                skips.push(c);
            }
            down.push(blocks);
            if l + 1 < levels {
                downsample.push(Conv2d::new(&mut s, &format!("down{l}.downsample"), c, c, 3, 2, false, rng));
                skips.push(c);
            }
        }
        let mid = [
            ResBlock::new(&mut s, "mid.res0", c, c, &cfg, rng),
            ResBlock::new(&mut s, "mid.res1", c, c, &cfg, rng),
        ];
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for l in (0..levels).rev() {
            let cl = cfg.channels[l];
            let mut blocks = Vec::new();
            for b in 0..=cfg.blocks_per_level {
                let skip_c = skips.pop().expect("one skip per block");
                blocks.push(ResBlock::new(&mut s, &format!("up{l}.res{b}"), c + skip_c, cl, &cfg, rng));
                c = cl;
            }
            up.push(blocks);
            if l > 0 {
                upsample.push(Conv2d::new(&mut s, &format!("up{l}.upsample"), c, c, 3, 1, false, rng));
            }
        }
        let norm_out = GroupNorm::new(&mut s, "norm_out", c, cfg.groups);
        let conv_out = Conv2d::new(&mut s, "conv_out", c, c_pix, 3, 1, cfg.zero_init, rng);
        Ok(Self { cfg, params: s, time1, time2, labels, conv_in, down, downsample, mid, up, upsample, norm_out, conv_out })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same architecture with parameters converted to `U`.
    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        UNet {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            time1: self.time1,
            time2: self.time2,
            labels: self.labels,
            conv_in: self.conv_in,
            down: self.down.clone(),
            downsample: self.downsample.clone(),
            mid: self.mid.clone(),
            up: self.up.clone(),
            upsample: self.upsample.clone(),
            norm_out: self.norm_out,
            conv_out: self.conv_out,
        }
    }

    /// Spatial size must be divisible by `patch · 2^(levels−1)`.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let factor = self.cfg.patch << (self.cfg.channels.len() - 1);
        match shape {
            [_, c, h, w] if *c == self.cfg.image_channels && h % factor == 0 && w % factor == 0 && *h > 0 && *w > 0 => Ok(()),
            _ => Err(Error::Shape(format!(
                "network expects n×{}×H×W with H, W multiples of {factor}, got {shape:?}",
                self.cfg.image_channels
            ))),
        }
    }

    /// Forward pass with the parameters already bound to `graph`.
    pub fn forward<'g>(
        &self,
        graph: &'g Graph<T>,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        timesteps: &[usize],
        labels: &[usize],
    ) -> Result<Var<'g, T>> {
        let shape = x.shape();
        self.check_input(&shape)?;
        let n = shape[0];
        if timesteps.len() != n || labels.len() != n {
            return Err(Error::Shape(format!(
                "batch of {n} needs as many timesteps and labels, got {} and {}",
                timesteps.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.cfg.num_labels) {
            return Err(Error::Shape(format!("label index {bad} outside vocabulary of {}", self.cfg.num_labels)));
        }
        let tfeat = graph.constant(sinusoidal_embedding(timesteps, self.cfg.time_features));
        let temb = self.time2.forward(p, self.time1.forward(p, tfeat)?.silu())?;
        let emb = temb.add(p.var(self.labels).embedding(labels)?)?.silu();

        let mut h = self.conv_in.forward(p, x.space_to_depth(self.cfg.patch)?)?;
        let mut skips = vec![h];
        for (l, blocks) in self.down.iter().enumerate() {
            for b in blocks {
                h = b.forward(p, h, emb)?;
                skips.push(h);
            }
            if let Some(ds) = self.downsample.get(l) {
                h = ds.forward(p, h)?;
                skips.push(h);
            }
        }
        for b in &self.mid {
            h = b.forward(p, h, emb)?;
        }
        for (i, blocks) in self.up.iter().enumerate() {
            for b in blocks {
                let s = skips.pop().expect("one skip per block");
                h = b.forward(p, h.concat(s)?, emb)?;
            }
            if let Some(us) = self.upsample.get(i) {
                h = us.forward(p, h.upsample2x()?)?;
            }
        }
        let out = self.conv_out.forward(p, self.norm_out.forward(p, h)?.silu())?;
        out.depth_to_space(self.cfg.patch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> UNetConfig {
        UNetConfig {
            image_channels: 3,
            patch: 2,
            channels: vec![4, 8],
            blocks_per_level: 1,
            time_features: 8,
            embed_dim: 8,
            groups: 2,
            num_labels: 3,
            zero_init: false,
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = UNet::<f32>::new(UNetConfig::default(), &mut rng).unwrap();
        let g = Graph::new();
        let p = net.params().bind(&g, false);
        let x = g.constant(Tensor::randn(&[2, 3, 16, 16], &mut rng));
        let y = net.forward(&g, &p, x, &[3, 900], &[0, 4]).unwrap();
        assert_eq!(y.shape(), vec![2, 3, 16, 16]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = UNet::<f64>::new(tiny_config(), &mut rng).unwrap();
        let g = Graph::new();
        let p = net.params().bind(&g, false);
        let odd = g.constant(Tensor::zeros(&[1, 3, 6, 6]));
        assert!(net.forward(&g, &p, odd, &[0], &[0]).is_err());
        let x = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(net.forward(&g, &p, x, &[0], &[3]).is_err());
        assert!(net.forward(&g, &p, x, &[0, 1], &[0]).is_err());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = UNet::<f64>::new(tiny_config(), &mut rng).unwrap();
        let x0 = Tensor::<f64>::randn(&[1, 3, 8, 8], &mut rng);
        let probe = Tensor::<f64>::randn(&[1, 3, 8, 8], &mut rng);
        let f = |x: Tensor<f64>, grad: bool| {
            let g = Graph::new();
            let p = net.params().bind(&g, false);
            let xv = if grad { g.param(x) } else { g.constant(x) };
            let y = net.forward(&g, &p, xv, &[40], &[1]).unwrap();
            let loss = y.mul(g.constant(probe.clone())).unwrap().sum_all();
            let v = loss.value().data()[0];
            let gr = grad.then(|| g.backward(loss).unwrap().get(xv));
            (v, gr)
        };
        let analytic = f(x0.clone(), true).1.unwrap();
        let h = 1e-5;
        for i in (0..x0.numel()).step_by(7) {
            let mut a = x0.clone();
            a.data_mut()[i] += h;
            let mut b = x0.clone();
            b.data_mut()[i] -= h;
            let fd = (f(a, false).0 - f(b, false).0) / (2.0 * h);
            let an = analytic.data()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "element {i}: {an} vs {fd}");
        }
    }

    #[test]
    fn weight_gradients_reach_every_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = UNet::<f64>::new(tiny_config(), &mut rng).unwrap();
        let g = Graph::new();
        let p = net.params().bind(&g, true);
        let x = g.constant(Tensor::randn(&[2, 3, 8, 8], &mut rng));
        let y = net.forward(&g, &p, x, &[5, 70], &[0, 2]).unwrap();
        let loss = y.sqr().unwrap().sum_all();
        let mut grads = g.backward(loss).unwrap();
        let all = p.gradients(&mut grads);
        for (gr, name) in all.iter().zip(net.params().names()) {
            if name.starts_with("label") {
                continue;
            }
            assert!(gr.max_abs() > 0.0, "{name} received no gradient");
        }
    }
}
