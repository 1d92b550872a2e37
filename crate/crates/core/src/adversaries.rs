//! Progressive convolutional discriminators and the R1 gradient penalty.
//!
//! Every resolution block is allocated at construction, so switching the
//! working resolution never adds or alters parameters.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Trainable, Var};
use crate::labels::NUM_CLASSES;
use crate::nn::{Conv2d, Init, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Step used by the finite-difference R1 surrogate, relative to input scale.
pub const R1_FD_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscRole {
    Semantic,
    Image,
    Drawing,
}

impl DiscRole {
    pub fn in_channels(self) -> usize {
        match self {
            DiscRole::Semantic => NUM_CLASSES,
            DiscRole::Image | DiscRole::Drawing => 3,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            DiscRole::Semantic => "disc.semantic",
            DiscRole::Image => "disc.image",
            DiscRole::Drawing => "disc.drawing",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscConfig {
    /// Width at the largest resolution; doubles per halving up to `max_channels`.
    pub base_channels: usize,
    pub max_channels: usize,
    pub max_resolution: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            max_channels: 400,
            max_resolution: 256,
        }
    }
}

impl DiscConfig {
    pub fn desk() -> Self {
        Self {
            base_channels: 4,
            max_channels: 32,
            max_resolution: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.max_channels == 0 {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        if !self.max_resolution.is_power_of_two() || self.max_resolution < 4 {
            return Err(Error::Config("discriminator max_resolution must be a power of two >= 4".into()));
        }
        Ok(())
    }

    pub fn width(&self, res: usize) -> usize {
        let mut c = self.base_channels;
        let mut r = self.max_resolution;
        while r > res && c < self.max_channels {
            c *= 2;
            r /= 2;
        }
        c.min(self.max_channels)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    conv: Conv2d,
    down: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub role: DiscRole,
    pub cfg: DiscConfig,
    from_input: BTreeMap<usize, Conv2d>,
    blocks: BTreeMap<usize, Block>,
    head: Linear,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, role: DiscRole, cfg: DiscConfig) -> Result<Self> {
        cfg.validate()?;
        let p = role.prefix();
        let mut from_input = BTreeMap::new();
        let mut blocks = BTreeMap::new();
        let mut r = cfg.max_resolution;
        while r >= 4 {
            let c = cfg.width(r);
            from_input.insert(
                r,
                Conv2d::new(store, rng, &format!("{p}.from_input.{r}"), role.in_channels(), c, 1, 1, Init::FanIn),
            );
            if r > 4 {
                let c2 = cfg.width(r / 2);
                blocks.insert(
                    r,
                    Block {
                        conv: Conv2d::new(store, rng, &format!("{p}.block.{r}.conv"), c, c, 3, 1, Init::FanIn),
                        down: Conv2d::new(store, rng, &format!("{p}.block.{r}.down"), c, c2, 3, 2, Init::FanIn),
                    },
                );
            }
            r /= 2;
        }
        let c4 = cfg.width(4);
        let head = Linear::new(store, rng, &format!("{p}.head"), c4 * 16, 1, Init::FanIn, Init::Zeros);
        Ok(Self {
            role,
            cfg,
            from_input,
            blocks,
            head,
        })
    }

    pub fn prefix(&self) -> &'static str {
        self.role.prefix()
    }

    /// Per-sample logits `[B]` for `x [B, C, R, R]`, `R` a power of two.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != self.role.in_channels() {
            return Err(shape_err(
                "discriminate",
                &[xs.first().copied().unwrap_or(0), self.role.in_channels(), 0, 0],
                &xs,
            ));
        }
        let r = xs[2];
        if xs[3] != r {
            return Err(Error::Argument(format!("discriminator input must be square, got {}x{}", xs[2], xs[3])));
        }
        let entry = self
            .from_input
            .get(&r)
            .ok_or_else(|| Error::Argument(format!("discriminator has no stage for resolution {r}")))?;
        let mut h = entry.forward(g, x);
        h = g.leaky_relu(h, 0.2);
        let mut cur = r;
        while cur > 4 {
            let b = &self.blocks[&cur];
            h = b.conv.forward(g, h);
            h = g.leaky_relu(h, 0.2);
            h = b.down.forward(g, h);
            h = g.leaky_relu(h, 0.2);
            cur /= 2;
        }
        let bsz = xs[0];
        let c = g.shape(h)[1];
        let flat = g.reshape(h, &[bsz, c * 16]);
        let out = self.head.forward(g, flat);
        Ok(g.reshape(out, &[bsz]))
    }

    /// Forward-only scores.
    pub fn discriminate(&self, params: &ParamStore, batch: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::inference(params);
        let x = g.constant(batch.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Exact penalty `mean_b ‖∂D(x_b)/∂x_b‖²` over a real batch.
    pub fn r1_penalty(&self, params: &ParamStore, real: &Tensor) -> Result<f64> {
        let grad = input_gradient(Some(params), real, |g, x| self.forward(g, x))?;
        Ok(r1_from_gradient(&grad))
    }

    /// R1 term for a discriminator update inside `g`.
    ///
    /// The returned variable evaluates to the exact penalty. Its parameter
    /// gradient comes from a central-difference surrogate along the
    /// per-sample input-gradient direction `u_b = g_b / ‖g_b‖`:
    /// `(1/B) Σ_b ‖g_b‖ (D(x_b + εu_b) - D(x_b - εu_b)) / ε`, whose θ-gradient
    /// equals `∂/∂θ mean_b ‖g_b‖²` up to `O(ε²)`.
    pub fn r1_term(&self, g: &mut Graph, real: &Tensor) -> Result<(Var, f64)> {
        let grad = input_gradient(g.store(), real, |g, x| self.forward(g, x))?;
        let exact = r1_from_gradient(&grad);
        let loss = r1_surrogate(g, real, &grad, exact, |g, x| self.forward(g, x))?;
        Ok((loss, exact))
    }
}

/// `∂ Σ_b f(x)_b / ∂x`: per-sample input gradients of a score function with
/// no coupling across the batch.
pub fn input_gradient<F>(params: Option<&ParamStore>, x: &Tensor, f: F) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = match params {
        Some(p) => Graph::new(p, Trainable::None),
        None => Graph::detached(),
    };
    let xv = g.input(x.clone());
    let scores = f(&mut g, xv)?;
    let total = g.sum(scores);
    let grads = g.backward(total);
    Ok(grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// `mean_b ‖grad_b‖²` with the batch on the leading axis.
pub fn r1_from_gradient(grad: &Tensor) -> f64 {
    let b = grad.shape()[0];
    if b == 0 {
        return 0.0;
    }
    let per = grad.numel() / b;
    grad.data()
        .chunks(per)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / b as f64
}

/// Penalty of an arbitrary score function, computed exactly.
pub fn r1_penalty_with<F>(params: Option<&ParamStore>, real: &Tensor, f: F) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    Ok(r1_from_gradient(&input_gradient(params, real, f)?))
}

/// Finite-difference surrogate node: value `exact`, θ-gradient of the penalty.
pub fn r1_surrogate<F>(g: &mut Graph, real: &Tensor, grad: &Tensor, exact: f64, f: F) -> Result<Var>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let b = real.shape()[0];
    let per = real.numel() / b.max(1);
    let scale = real.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let eps = R1_FD_EPS * scale;
    let mut plus = real.clone();
    let mut minus = real.clone();
    let mut norms = Vec::with_capacity(b);
    for k in 0..b {
        let gk = &grad.data()[k * per..(k + 1) * per];
        let n = libm::sqrt(gk.iter().map(|v| v * v).sum::<f64>());
        norms.push(n);
        if n > 0.0 {
            for i in 0..per {
                let u = gk[i] / n;
                plus.data_mut()[k * per + i] += eps * u;
                minus.data_mut()[k * per + i] -= eps * u;
            }
        }
    }
    let both = Tensor::stack(&[plus, minus])?;
    let mut shape = alloc::vec![2 * b];
    shape.extend_from_slice(&real.shape()[1..]);
    let xv = g.constant(both.reshape(&shape)?);
    let scores = f(g, xv)?;
    let weights: Vec<f64> = norms
        .iter()
        .map(|n| n / (eps * b as f64))
        .chain(norms.iter().map(|n| -n / (eps * b as f64)))
        .collect();
    let wv = g.constant(Tensor::new(&[2 * b], weights)?);
    let s = g.mul(scores, wv);
    let s = g.sum(s);
    let frozen = g.detach(s);
    let zero = g.sub(s, frozen);
    Ok(g.add_scalar(zero, exact))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny(max_res: usize) -> DiscConfig {
        DiscConfig {
            base_channels: 2,
            max_channels: 4,
            max_resolution: max_res,
        }
    }

    #[test]
    fn roles_fix_input_channels() {
        let mut s = ParamStore::new();
        let d = Discriminator::new(&mut s, &mut rng(1), DiscRole::Semantic, tiny(8)).unwrap();
        assert_eq!(d.role.in_channels(), 19);
        assert_eq!(DiscRole::Image.in_channels(), 3);
        assert_eq!(DiscRole::Drawing.in_channels(), 3);
        assert!(s.names().all(|n| n.starts_with("disc.semantic.")));
        let bad = Tensor::zeros(&[1, 3, 8, 8]);
        assert!(d.discriminate(&s, &bad).is_err());
    }

    #[test]
    fn one_score_per_sample_and_no_batch_coupling() {
        let mut s = ParamStore::new();
        let d = Discriminator::new(&mut s, &mut rng(2), DiscRole::Image, tiny(16)).unwrap();
        let x = Tensor::uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut rng(3));
        let y = Tensor::uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut rng(4));
        let batch = Tensor::stack(&[x.select(0), y.select(0), x.select(0)]).unwrap();
        let scores = d.discriminate(&s, &batch).unwrap();
        assert_eq!(scores.len(), 3);
        assert_eq!(scores[0].to_bits(), scores[2].to_bits());
        assert_eq!(scores[0].to_bits(), d.discriminate(&s, &x).unwrap()[0].to_bits());
        // smaller resolutions reuse the same parameters
        let before = s.clone();
        let small = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut rng(5));
        assert_eq!(d.discriminate(&s, &small).unwrap().len(), 2);
        assert!(s.diff(&before).is_empty());
        assert!(d.discriminate(&s, &Tensor::zeros(&[1, 3, 32, 32])).is_err());
    }

    #[test]
    fn score_input_gradient_checks() {
        let mut s = ParamStore::new();
        let d = Discriminator::new(&mut s, &mut rng(6), DiscRole::Image, tiny(8)).unwrap();
        let x = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut rng(7));
        let c = gradcheck::check_input_in(&s, &x, 1e-6, |g, xv| {
            let y = d.forward(g, xv).unwrap();
            g.sum(y)
        });
        assert!(c.passes(1e-3), "{c:?}");
    }

    #[test]
    fn constant_and_linear_critics() {
        let x = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng(8));
        let zero = r1_penalty_with(None, &x, |g, _| Ok(g.constant(Tensor::zeros(&[3])))).unwrap();
        assert_eq!(zero, 0.0);
        let a = [0.5, -1.5, 2.0, 0.25];
        let lin = r1_penalty_with(None, &x, |g, xv| {
            let w = g.constant(Tensor::from_vec(&[1, 4], a.to_vec()));
            let y = g.linear(xv, w, None);
            Ok(g.reshape(y, &[3]))
        })
        .unwrap();
        let want: f64 = a.iter().map(|v| v * v).sum();
        assert_eq!(lin, want);
    }

    #[test]
    fn penalty_matches_finite_difference_gradient_norm() {
        let mut s = ParamStore::new();
        let d = Discriminator::new(&mut s, &mut rng(9), DiscRole::Drawing, tiny(8)).unwrap();
        let x = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut rng(10));
        let got = d.r1_penalty(&s, &x).unwrap();
        // oracle: central differences of each sample's own score
        let h = 1e-6;
        let mut total = 0.0;
        for b in 0..2 {
            let xb = x.select(b).reshape(&[1, 3, 8, 8]).unwrap();
            for i in 0..xb.numel() {
                let mut p = xb.clone();
                p.data_mut()[i] += h;
                let mut m = xb.clone();
                m.data_mut()[i] -= h;
                let gi = (d.discriminate(&s, &p).unwrap()[0] - d.discriminate(&s, &m).unwrap()[0]) / (2.0 * h);
                total += gi * gi;
            }
        }
        let want = total / 2.0;
        assert!(((got - want) / want).abs() < 1e-3, "{got} vs {want}");
        assert!(got >= 0.0);
    }

    #[test]
    fn surrogate_has_the_penalty_parameter_gradient() {
        let mut s = ParamStore::new();
        let d = Discriminator::new(&mut s, &mut rng(11), DiscRole::Image, tiny(8)).unwrap();
        let x = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut rng(12));
        for name in ["disc.image.block.8.conv.weight", "disc.image.head.weight", "disc.image.from_input.8.bias"] {
            let analytic = {
                let mut g = Graph::new(&s, Trainable::All);
                let (loss, exact) = d.r1_term(&mut g, &x).unwrap();
                assert_eq!(g.value(loss).item(), exact);
                g.backward(loss).param(name).unwrap().clone()
            };
            let h = 1e-5;
            let mut work = s.clone();
            let mut worst: f64 = 0.0;
            let scale = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..analytic.numel() {
                let orig = s.get(name).unwrap().data()[i];
                work.get_mut(name).unwrap().data_mut()[i] = orig + h;
                let fp = d.r1_penalty(&work, &x).unwrap();
                work.get_mut(name).unwrap().data_mut()[i] = orig - h;
                let fm = d.r1_penalty(&work, &x).unwrap();
                work.get_mut(name).unwrap().data_mut()[i] = orig;
                let num = (fp - fm) / (2.0 * h);
                let a = analytic.data()[i];
                let den = a.abs().max(num.abs()).max(1e-6 * (1.0 + scale));
                worst = worst.max((a - num).abs() / den);
            }
            assert!(worst < 1e-3, "{name}: {worst}");
        }
    }
}
