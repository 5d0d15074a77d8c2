//! Named parameter storage, the handful of layers the networks are built
//! from, and AdamW.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Ordered collection of named tensors.
#[derive(Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn values(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.values.iter().map(|v| v.as_ref())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Replaces every tensor, keeping names and shapes.
    pub fn load(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.values.len() {
            return Err(Error::Load(format!("expected {} tensors, got {}", self.values.len(), tensors.len())));
        }
        for ((slot, t), name) in self.values.iter_mut().zip(tensors).zip(&self.names) {
            if slot.shape() != t.shape() {
                return Err(Error::Load(format!(
                    "parameter {name}: stored shape {:?} does not match architecture {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = Arc::new(t);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
        }
    }

    /// Records every parameter on `graph`, as differentiable leaves if
    /// `trainable` and as constants otherwise.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    graph.param_shared(Arc::clone(v))
                } else {
                    graph.constant_shared(Arc::clone(v))
                }
            })
            .collect();
        Bound { vars }
    }

    /// Hex sha256 over names, shapes and little-endian values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for d in v.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Parameters of a [`ParamStore`] recorded on one graph.
pub struct Bound<'g, T: Scalar> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Scalar> Bound<'g, T> {
    pub fn var(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    /// Gradients in store order.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

fn init_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    Tensor::<f64>::randn(shape, rng).scale(std).cast()
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    /// `k×k` convolution with "same" padding for stride 1. `zero` initializes
    /// the weights to zero (used on residual and output branches).
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let w = if zero {
            Tensor::zeros(&[c_out, c_in, k, k])
        } else {
            init_normal(&[c_out, c_in, k, k], fan_in.recip().sqrt(), rng)
        };
        Self {
            w: store.add(format!("{name}.weight"), w),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv2d(p.var(self.w), Some(p.var(self.b)), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.weight"), init_normal(&[d_out, d_in], (d_in as f64).recip().sqrt(), rng)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.linear(p.var(self.w), Some(p.var(self.b)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        let groups = largest_divisor_at_most(channels, groups);
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.group_norm(self.groups, p.var(self.gamma), p.var(self.beta), 1e-5)
    }
}

fn largest_divisor_at_most(n: usize, k: usize) -> usize {
    (1..=k.min(n)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1)
}

/// Hyperparameters for [`AdamW`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied only to tensors of rank ≥ 2.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self { weight_decay, ..Self::adam(lr) }
    }
}

/// Adaptive moment estimation with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<'a>(cfg: AdamConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes.into_iter().map(|s| (Tensor::zeros(s), Tensor::zeros(s))).unzip();
        Self { cfg, step: 0, m, v }
    }

    /// One update of `params` in place from `grads` (same order).
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let step_size = T::of(c.lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            p.same_shape(g)?;
            let decay = if p.shape().len() >= 2 { T::of(1.0 - c.lr * c.weight_decay) } else { T::one() };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *w = *w * decay - step_size * *mi / ((*vi).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }

    /// Updates every tensor of `store` from gradients in store order.
    pub fn update_store(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        let mut owned: Vec<Tensor<T>> = store.values.iter().map(|v| (**v).clone()).collect();
        {
            let mut refs: Vec<&mut Tensor<T>> = owned.iter_mut().collect();
            self.update(&mut refs, grads)?;
        }
        store.values = owned.into_iter().map(Arc::new).collect();
        Ok(())
    }
}

/// `[sin(t·f_k), cos(t·f_k)]` features with geometric frequencies, `n × dim`.
pub fn sinusoidal_embedding<T: Scalar>(timesteps: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let mut row = vec![T::zero(); dim];
        for k in 0..half {
            let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
            row[k] = T::of((t as f64 * f).sin());
            row[half + k] = T::of((t as f64 * f).cos());
        }
        data.extend(row);
    }
    Tensor::new(&[timesteps.len(), dim], data).expect("length matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Tensor::<f64>::new(&[2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(&[2], vec![0.3, -5.0]).unwrap();
        let mut opt = AdamW::new(AdamConfig::adam(0.01), [p.shape()]);
        opt.update(&mut [&mut p], &[g]).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-9);
        assert!((p.data()[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn weight_decay_skips_vectors() {
        let mut w = Tensor::<f64>::full(&[1, 1], 1.0);
        let mut b = Tensor::<f64>::full(&[1], 1.0);
        let z = Tensor::zeros(&[1, 1]);
        let zb = Tensor::zeros(&[1]);
        let mut opt = AdamW::new(AdamConfig::adamw(0.1, 0.5), [w.shape(), b.shape()]);
        opt.update(&mut [&mut w, &mut b], &[z, zb]).unwrap();
        assert!((w.data()[0] - 0.95).abs() < 1e-12);
        assert_eq!(b.data()[0], 1.0);
    }

    #[test]
    fn group_count_falls_back_to_a_divisor() {
        assert_eq!(largest_divisor_at_most(12, 8), 6);
        assert_eq!(largest_divisor_at_most(32, 8), 8);
        assert_eq!(largest_divisor_at_most(3, 8), 3);
    }

    #[test]
    fn sinusoidal_embedding_at_zero() {
        let e = sinusoidal_embedding::<f64>(&[0], 4);
        assert_eq!(e.data(), &[0.0, 0.0, 1.0, 1.0]);
    }
}
