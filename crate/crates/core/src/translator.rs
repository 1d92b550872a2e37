//! Photo-to-drawing translator: a five-level U-Net whose two coarsest decoder
//! blocks are normalised with SPADE driven by the semantic map.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{mean_var, Graph, Var};
use crate::labels::NUM_CLASSES;
use crate::nn::{Conv2d, Init};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslatorConfig {
    /// Widths at scales 1, 1/2, 1/4, 1/8, 1/16.
    pub channels: Vec<usize>,
    pub spade_hidden: usize,
    pub use_spade: bool,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        Self {
            channels: alloc::vec![64, 128, 256, 512, 512],
            spade_hidden: 128,
            use_spade: true,
        }
    }
}

impl TranslatorConfig {
    pub fn desk() -> Self {
        Self {
            channels: alloc::vec![8, 16, 32, 64, 64],
            spade_hidden: 16,
            use_spade: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 5 || self.channels.contains(&0) || self.spade_hidden == 0 {
            return Err(Error::Config("translator needs five positive widths and a positive SPADE width".into()));
        }
        Ok(())
    }

    /// Input sides must be divisible by this.
    pub fn granularity(&self) -> usize {
        1 << (self.channels.len() - 1)
    }
}

/// Spatially-adaptive denormalisation: instance norm, then
/// `x̂ · (1 + γ(S)) + β(S)` with `γ`, `β` from a two-layer conv head.
#[derive(Clone, Debug, PartialEq)]
pub struct Spade {
    shared: Conv2d,
    gamma: Conv2d,
    beta: Conv2d,
}

impl Spade {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize, hidden: usize) -> Self {
        Self {
            shared: Conv2d::new(store, rng, &format!("{name}.shared"), NUM_CLASSES, hidden, 3, 1, Init::FanIn),
            gamma: Conv2d::new(store, rng, &format!("{name}.gamma"), hidden, channels, 3, 1, Init::FanIn),
            beta: Conv2d::new(store, rng, &format!("{name}.beta"), hidden, channels, 3, 1, Init::FanIn),
        }
    }

    /// Names of the γ/β conv tensors.
    pub fn modulation_params(&self) -> [&str; 4] {
        [&self.gamma.weight, &self.gamma.bias, &self.beta.weight, &self.beta.bias]
    }

    /// `x [B, C, h, w]`, `semantics [B, 19, H, W]` (resized here).
    pub fn forward(&self, g: &mut Graph, x: Var, semantics: Var) -> Var {
        let n = g.instance_norm(x, NORM_EPS);
        self.modulate(g, n, semantics)
    }

    /// `x̂ · (1 + γ(S)) + β(S)` for an already normalised `x̂`.
    fn modulate(&self, g: &mut Graph, normalized: Var, semantics: Var) -> Var {
        let xs = g.shape(normalized).to_vec();
        let s = g.resize_nearest(semantics, xs[2], xs[3]);
        let a = self.shared.forward(g, s);
        let a = g.relu(a);
        let gamma = self.gamma.forward(g, a);
        let beta = self.beta.forward(g, a);
        let scale = g.add_scalar(gamma, 1.0);
        let y = g.mul(normalized, scale);
        g.add(y, beta)
    }
}

/// Tensor-level SPADE on a single `[C, h, w]` map.
pub fn spade_normalize(spade: &Spade, params: &ParamStore, features: &Tensor, semantics: &Tensor) -> Result<Tensor> {
    if features.ndim() != 3 || semantics.ndim() != 3 || semantics.shape()[0] != NUM_CLASSES {
        return Err(shape_err("spade_normalize", features.shape(), semantics.shape()));
    }
    let mut g = Graph::inference(params);
    let mut f4 = alloc::vec![1];
    f4.extend_from_slice(features.shape());
    let mut s4 = alloc::vec![1];
    s4.extend_from_slice(semantics.shape());
    let x = g.constant(features.clone().reshape(&f4)?);
    let s = g.constant(semantics.clone().reshape(&s4)?);
    let y = spade.forward(&mut g, x, s);
    g.value(y).clone().reshape(features.shape())
}

/// Per-plane `(mean, 1/std)` of every instance norm in one translator pass,
/// in evaluation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormStats(pub Vec<(Vec<f64>, Vec<f64>)>);

pub enum NormTrace<'a> {
    Live,
    Record(&'a mut NormStats),
    Replay(&'a NormStats, usize),
}

impl NormTrace<'_> {
    fn normalize(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            NormTrace::Live => Ok(g.instance_norm(x, NORM_EPS)),
            NormTrace::Record(stats) => {
                let xs = g.shape(x).to_vec();
                let n = xs[2] * xs[3];
                let (mut mu, mut is) = (Vec::new(), Vec::new());
                for plane in g.value(x).data().chunks(n) {
                    let (m, v) = mean_var(plane);
                    mu.push(m);
                    is.push(1.0 / libm::sqrt(v + NORM_EPS));
                }
                stats.0.push((mu, is));
                Ok(g.instance_norm(x, NORM_EPS))
            }
            NormTrace::Replay(stats, at) => {
                let (mu, is) = stats
                    .0
                    .get(*at)
                    .ok_or_else(|| Error::Argument("norm trace is shorter than the pass".into()))?;
                *at += 1;
                let xs = g.shape(x).to_vec();
                if mu.len() != xs[0] * xs[1] {
                    return Err(shape_err("norm replay", &xs[..2], &[mu.len()]));
                }
                let shift: Vec<f64> = mu.iter().zip(is).map(|(m, i)| -m * i).collect();
                let sc = g.constant(Tensor::from_vec(&xs[..2], is.clone()));
                let sh = g.constant(Tensor::from_vec(&xs[..2], shift));
                Ok(g.channel_affine(x, sc, sh))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct UpBlock {
    conv: Conv2d,
    spade: Option<Spade>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Translator {
    pub cfg: TranslatorConfig,
    down: Vec<Conv2d>,
    up: Vec<UpBlock>,
    out: Conv2d,
}

impl Translator {
    pub const PREFIX: &'static str = "translator.";

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: TranslatorConfig) -> Result<Self> {
        cfg.validate()?;
        let c = &cfg.channels;
        let levels = c.len();
        let mut down = Vec::new();
        down.push(Conv2d::new(store, rng, "translator.down.0", 3, c[0], 3, 1, Init::FanIn));
        for k in 1..levels {
            down.push(Conv2d::new(store, rng, &format!("translator.down.{k}"), c[k - 1], c[k], 3, 2, Init::FanIn));
        }
        // decoder blocks from the coarsest scale up; block k works at scale 1/2^k
        let mut up = Vec::new();
        for k in (0..levels).rev() {
            let cin = if k == levels - 1 { c[k] } else { c[k + 1] + c[k] };
            let conv = Conv2d::new(store, rng, &format!("translator.up.{k}.conv"), cin, c[k], 3, 1, Init::FanIn);
            let spade = (cfg.use_spade && k + 2 >= levels)
                .then(|| Spade::new(store, rng, &format!("translator.up.{k}.spade"), c[k], cfg.spade_hidden));
            up.push(UpBlock { conv, spade });
        }
        let out = Conv2d::new(store, rng, "translator.out", c[0], 3, 3, 1, Init::FanIn);
        Ok(Self { cfg, down, up, out })
    }

    pub fn spade_blocks(&self) -> impl Iterator<Item = &Spade> {
        self.up.iter().filter_map(|b| b.spade.as_ref())
    }

    /// `image [B, 3, H, W]` and `semantics [B, 19, H, W]` (probabilities) to a
    /// drawing `[B, 3, H, W]` in `[-1, 1]`.
    pub fn forward(&self, g: &mut Graph, image: Var, semantics: Var) -> Result<Var> {
        self.forward_traced(g, image, semantics, &mut NormTrace::Live)
    }

    /// [`Translator::forward`] with instance-norm statistics recorded or
    /// replayed from an earlier pass.
    pub fn forward_traced(&self, g: &mut Graph, image: Var, semantics: Var, trace: &mut NormTrace) -> Result<Var> {
        let is = g.shape(image).to_vec();
        let ss = g.shape(semantics).to_vec();
        if is.len() != 4 || is[1] != 3 {
            return Err(shape_err("translate image", &[is.first().copied().unwrap_or(0), 3, 0, 0], &is));
        }
        if ss.len() != 4 || ss[0] != is[0] || ss[1] != NUM_CLASSES || ss[2..] != is[2..] {
            return Err(shape_err("translate semantics", &[is[0], NUM_CLASSES, is[2], is[3]], &ss));
        }
        let gran = self.cfg.granularity();
        if is[2] % gran != 0 || is[3] % gran != 0 {
            return Err(Error::Argument(format!(
                "translator input {}x{} must be divisible by {gran}",
                is[2], is[3]
            )));
        }
        let mut skips = Vec::with_capacity(self.down.len());
        let mut x = image;
        for (k, conv) in self.down.iter().enumerate() {
            x = conv.forward(g, x);
            if k > 0 {
                x = trace.normalize(g, x)?;
            }
            x = g.leaky_relu(x, 0.2);
            skips.push(x);
        }
        let mut d = skips.pop().unwrap();
        for (i, block) in self.up.iter().enumerate() {
            if i > 0 {
                d = g.upsample_nearest(d, 2);
                let skip = skips.pop().unwrap();
                d = g.concat(&[d, skip], 1);
            }
            d = block.conv.forward(g, d);
            d = trace.normalize(g, d)?;
            if let Some(sp) = &block.spade {
                d = sp.modulate(g, d, semantics);
            }
            d = g.leaky_relu(d, 0.2);
        }
        let y = self.out.forward(g, d);
        Ok(g.tanh(y))
    }

    /// Radius in full-resolution pixels beyond which a change of the semantic
    /// map cannot reach an output pixel except through instance-norm
    /// statistics.
    pub fn semantic_reach(&self) -> usize {
        let levels = self.cfg.channels.len();
        let mut reach = 0;
        for (i, block) in self.up.iter().enumerate() {
            let k = levels - 1 - i;
            let cell = 1usize << k;
            if block.spade.is_some() {
                // nearest sampling offset, two 3x3 convs, one cell of upsampling slack
                let here = cell + 2 * cell + cell;
                // path from this block to the output: later decoder convs and the head
                let rest: usize = (0..k).map(|j| 1usize << j).sum::<usize>() + 1;
                reach = reach.max(here + rest);
            }
        }
        reach
    }
}
