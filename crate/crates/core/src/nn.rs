//! Parameterised building blocks. Each layer only remembers the names of
//! its tensors; values live in the [`ParamStore`].

use alloc::format;
use alloc::string::String;

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/√fan_in, 1/√fan_in)`, the usual default for dense and conv layers.
    FanIn,
    /// `U(-bound, bound)`.
    Uniform(f64),
    /// `N(0, std²)`.
    Normal(f64),
    Zeros,
}

impl Init {
    fn sample<R: Rng + ?Sized>(self, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
        match self {
            Init::FanIn => {
                let b = 1.0 / libm::sqrt(fan_in as f64);
                Tensor::uniform(shape, -b, b, rng)
            }
            Init::Uniform(b) => Tensor::uniform(shape, -b, b, rng),
            Init::Normal(s) => Tensor::randn(shape, s, rng),
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight_init: Init,
        bias_init: Init,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        store.insert(weight.clone(), weight_init.sample(&[out_dim, in_dim], in_dim, rng));
        store.insert(bias.clone(), bias_init.sample(&[out_dim], in_dim, rng));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x [M, in] -> [M, out]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.p(&self.weight);
        let b = g.p(&self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Square conv with "same"-style padding `kernel / 2`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        let fan_in = in_ch * kernel * kernel;
        store.insert(weight.clone(), init.sample(&[out_ch, in_ch, kernel, kernel], fan_in, rng));
        let bias_init = match init {
            Init::Zeros => Init::Zeros,
            _ => Init::FanIn,
        };
        store.insert(bias.clone(), bias_init.sample(&[out_ch], fan_in, rng));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.p(&self.weight);
        let b = g.p(&self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}
