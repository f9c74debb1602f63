use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::rng::SeededRng;

/// Affine map `x W + b` on row vectors.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// He-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Result<Self> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.range(-bound, bound)).collect();
        Self::with_weights(store, name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Self::with_weights(store, name, Tensor::zeros(&[fan_in, fan_out]))
    }

    /// Small uniform weights in `[-scale, scale]`.
    pub fn scaled(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        scale: f64,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let data = (0..fan_in * fan_out).map(|_| rng.range(-scale, scale)).collect();
        Self::with_weights(store, name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    fn with_weights(store: &mut ParamStore, name: &str, w: Tensor) -> Result<Self> {
        let (fan_in, fan_out) = (w.rows(), w.cols());
        let w = store.add(&format!("{name}.w"), w)?;
        let b = store.add(&format!("{name}.b"), Tensor::zeros(&[1, fan_out]))?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// Stack of [`Linear`] layers with ReLU between them, and optionally after
/// the last one.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_relu: bool,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        widths: &[usize],
        final_relu: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = fan_in;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.{i}"), prev, w, rng)?);
            prev = w;
        }
        Ok(Self { layers, final_relu })
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i + 1 < n || self.final_relu {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }
}
