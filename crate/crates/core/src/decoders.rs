//! Semantic and image decoders.
//!
//! Both are built from one blueprint: three stages of nearest 2x upsample,
//! 3x3 conv, leaky ReLU and AdaIN driven by `w_s`. Every stage has a 1x1 output
//! head; head outputs are nearest-upsampled to the final resolution and summed.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::labels::NUM_CLASSES;
use crate::nn::{Conv2d, Init, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const ADAIN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Output channels of the three upsampling stages.
    pub channels: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            channels: alloc::vec![128, 64, 32],
        }
    }
}

impl DecoderConfig {
    pub fn desk() -> Self {
        Self {
            channels: alloc::vec![16, 8, 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 3 || self.channels.contains(&0) {
            return Err(Error::Config("decoder needs three positive stage widths".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Image,
    Semantic,
}

impl DecoderKind {
    pub fn out_channels(self) -> usize {
        match self {
            DecoderKind::Image => 3,
            DecoderKind::Semantic => NUM_CLASSES,
        }
    }

    pub fn prefix(self) -> &'static str {
        match self {
            DecoderKind::Image => "decoder.image",
            DecoderKind::Semantic => "decoder.semantic",
        }
    }
}

/// Maps `w_s` to per-channel `(scale, shift)`; the scale bias starts at 1.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaIn {
    pub affine: Linear,
    pub channels: usize,
}

impl AdaIn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d_s: usize, channels: usize) -> Self {
        let affine = Linear::new(store, rng, name, d_s, 2 * channels, Init::FanIn, Init::Zeros);
        let bias = store.get_mut(&affine.bias).unwrap();
        bias.data_mut()[..channels].iter_mut().for_each(|b| *b = 1.0);
        Self { affine, channels }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, w_s: Var) -> Var {
        let ss = self.affine.forward(g, w_s);
        let scale = g.narrow(ss, 1, 0, self.channels);
        let shift = g.narrow(ss, 1, self.channels, self.channels);
        adain(g, x, scale, shift)
    }
}

/// Instance-normalize `x [B, C, H, W]` and apply `scale`/`shift [B, C]`.
pub fn adain(g: &mut Graph, x: Var, scale: Var, shift: Var) -> Var {
    let n = g.instance_norm(x, ADAIN_EPS);
    g.channel_affine(n, scale, shift)
}

/// Tensor-level AdaIN on a single `[C, H, W]` map.
pub fn adain_modulate(features: &Tensor, scale: &[f64], shift: &[f64]) -> Result<Tensor> {
    if features.ndim() != 3 {
        return Err(shape_err("adain_modulate", &[0, 0, 0], features.shape()));
    }
    let (c, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    if scale.len() != c || shift.len() != c {
        return Err(shape_err("adain_modulate affine", &[c], &[scale.len()]));
    }
    let mut g = Graph::detached();
    let x = g.constant(features.clone().reshape(&[1, c, h, w])?);
    let sc = g.constant(Tensor::new(&[1, c], scale.to_vec())?);
    let sh = g.constant(Tensor::new(&[1, c], shift.to_vec())?);
    let y = adain(&mut g, x, sc, sh);
    g.value(y).clone().reshape(&[c, h, w])
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    conv: Conv2d,
    adain: AdaIn,
    head: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub kind: DecoderKind,
    stages: Vec<Stage>,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        kind: DecoderKind,
        in_channels: usize,
        d_s: usize,
        cfg: &DecoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let prefix = kind.prefix();
        let mut stages = Vec::new();
        let mut cin = in_channels;
        for (k, &cout) in cfg.channels.iter().enumerate() {
            let conv = Conv2d::new(store, rng, &format!("{prefix}.stage{k}.conv"), cin, cout, 3, 1, Init::FanIn);
            let adain = AdaIn::new(store, rng, &format!("{prefix}.stage{k}.adain"), d_s, cout);
            let head = Conv2d::new(
                store,
                rng,
                &format!("{prefix}.stage{k}.head"),
                cout,
                kind.out_channels(),
                1,
                1,
                Init::FanIn,
            );
            stages.push(Stage { conv, adain, head });
            cin = cout;
        }
        Ok(Self { kind, stages })
    }

    /// Names of the output-head parameters, coarsest first.
    pub fn head_params(&self) -> Vec<(String, String)> {
        self.stages
            .iter()
            .map(|s| (s.head.weight.clone(), s.head.bias.clone()))
            .collect()
    }

    /// Per-stage head outputs at their own resolutions, coarsest first.
    pub fn heads(&self, g: &mut Graph, features: Var, w_s: Var) -> Vec<Var> {
        let mut x = features;
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            x = g.upsample_nearest(x, 2);
            x = s.conv.forward(g, x);
            x = g.leaky_relu(x, 0.2);
            x = s.adain.forward(g, x, w_s);
            out.push(s.head.forward(g, x));
        }
        out
    }

    /// Summed multi-scale output before the final activation,
    /// `[B, out, 8H, 8W]`.
    pub fn forward_raw(&self, g: &mut Graph, features: Var, w_s: Var) -> Result<Var> {
        let fs = g.shape(features).to_vec();
        if fs.len() != 4 {
            return Err(shape_err("decoder input", &[0, 0, 0, 0], &fs));
        }
        let conv0 = &self.stages[0].conv;
        if fs[1] != conv0.in_ch {
            return Err(shape_err("decoder input channels", &[conv0.in_ch], &fs[1..2]));
        }
        let heads = self.heads(g, features, w_s);
        let (oh, ow) = (fs[2] * 8, fs[3] * 8);
        let mut acc: Option<Var> = None;
        for h in heads {
            let up = g.resize_nearest(h, oh, ow);
            acc = Some(match acc {
                Some(a) => g.add(a, up),
                None => up,
            });
        }
        Ok(acc.unwrap())
    }

    /// Image decoder: tanh output in `[-1, 1]`. Semantic decoder: logits.
    pub fn forward(&self, g: &mut Graph, features: Var, w_s: Var) -> Result<Var> {
        let raw = self.forward_raw(g, features, w_s)?;
        Ok(match self.kind {
            DecoderKind::Image => g.tanh(raw),
            DecoderKind::Semantic => raw,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::labels::SemanticMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_modulation_standardizes_channels() {
        let x = Tensor::uniform(&[3, 5, 6], -2.0, 5.0, &mut rng(1));
        let y = adain_modulate(&x, &[1.0; 3], &[0.0; 3]).unwrap();
        for ch in y.data().chunks(30) {
            let mean = ch.iter().sum::<f64>() / 30.0;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 30.0;
            assert!(mean.abs() < 1e-5);
            assert!((libm::sqrt(var) - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_scale_gives_constant_shift() {
        let x = Tensor::uniform(&[2, 4, 4], -1.0, 1.0, &mut rng(2));
        let y = adain_modulate(&x, &[0.0, 0.0], &[0.3, -2.0]).unwrap();
        assert!(y.data()[..16].iter().all(|v| *v == 0.3));
        assert!(y.data()[16..].iter().all(|v| *v == -2.0));
    }

    #[test]
    fn adain_matches_direct_statistics() {
        let x = Tensor::uniform(&[4, 3, 5], -1.0, 3.0, &mut rng(3));
        let scale = [0.5, -1.2, 2.0, 0.1];
        let shift = [0.0, 1.0, -0.5, 3.0];
        let y = adain_modulate(&x, &scale, &shift).unwrap();
        for c in 0..4 {
            let ch = &x.data()[c * 15..(c + 1) * 15];
            let mean = ch.iter().sum::<f64>() / 15.0;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 15.0;
            for i in 0..15 {
                let want = (ch[i] - mean) / libm::sqrt(var + ADAIN_EPS) * scale[c] + shift[c];
                assert!((y.data()[c * 15 + i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adain_ignores_affine_input_rescaling() {
        let x = Tensor::uniform(&[2, 6, 6], -1.0, 1.0, &mut rng(4));
        let x2 = x.map(|v| 3.7 * v - 1.3);
        let a = adain_modulate(&x, &[1.5, 0.7], &[0.2, -0.1]).unwrap();
        let b = adain_modulate(&x2, &[1.5, 0.7], &[0.2, -0.1]).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-4);
    }

    #[test]
    fn adain_gradients_check() {
        let x = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng(5));
        let sc = Tensor::uniform(&[2, 3], 0.5, 1.5, &mut rng(6));
        let sh = Tensor::uniform(&[2, 3], -0.5, 0.5, &mut rng(7));
        let proj = Tensor::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng(8));
        let c = gradcheck::check_input(&x, 1e-6, |g, x| {
            let s = g.constant(sc.clone());
            let t = g.constant(sh.clone());
            let y = adain(g, x, s, t);
            let p = g.constant(proj.clone());
            let y = g.mul(y, p);
            g.sum(y)
        });
        assert!(c.passes(1e-3), "{c:?}");
        let mut store = ParamStore::new();
        let a = AdaIn::new(&mut store, &mut rng(9), "a", 5, 3);
        let ws = Tensor::randn(&[2, 5], 1.0, &mut rng(10));
        let c = gradcheck::check_param(&store, "a.weight", 1e-6, |g| {
            let xv = g.constant(x.clone());
            let w = g.constant(ws.clone());
            let y = a.forward(g, xv, w);
            let p = g.constant(proj.clone());
            let y = g.mul(y, p);
            g.sum(y)
        });
        assert!(c.passes(1e-3), "{c:?}");
    }

    fn setup(kind: DecoderKind) -> (ParamStore, Decoder, Tensor, Tensor) {
        let mut store = ParamStore::new();
        let d = Decoder::new(&mut store, &mut rng(11), kind, 6, 4, &DecoderConfig { channels: alloc::vec![5, 4, 3] }).unwrap();
        let f = Tensor::randn(&[2, 6, 3, 3], 1.0, &mut rng(12));
        let w = Tensor::randn(&[2, 4], 1.0, &mut rng(13));
        (store, d, f, w)
    }

    #[test]
    fn image_decoder_shape_and_range() {
        let (store, d, f, w) = setup(DecoderKind::Image);
        let mut g = Graph::inference(&store);
        let (fv, wv) = (g.constant(f), g.constant(w));
        let y = d.forward(&mut g, fv, wv).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 24, 24]);
        assert!(g.value(y).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn coarsest_head_alone_gives_its_upsampled_output() {
        let (mut store, d, f, w) = setup(DecoderKind::Image);
        for (wn, bn) in d.head_params().into_iter().skip(1) {
            store.get_mut(&wn).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
            store.get_mut(&bn).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::inference(&store);
        let (fv, wv) = (g.constant(f), g.constant(w));
        let heads = d.heads(&mut g, fv, wv);
        let coarse = g.value(heads[0]).clone();
        let y = d.forward(&mut g, fv, wv).unwrap();
        // oracle: nearest 4x replication of the 6x6 head, then tanh
        let out = g.value(y);
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..24 {
                    for j in 0..24 {
                        let want = libm::tanh(coarse.data()[((b * 3 + c) * 6 + i / 4) * 6 + j / 4]);
                        assert_eq!(out.data()[((b * 3 + c) * 24 + i) * 24 + j], want);
                    }
                }
            }
        }
    }

    #[test]
    fn semantic_decoder_shares_the_blueprint() {
        let (si, _, _, _) = setup(DecoderKind::Image);
        let (ss, ds, f, w) = setup(DecoderKind::Semantic);
        let strip = |n: &String| String::from(n.split_once('.').unwrap().1.split_once('.').unwrap().1);
        let names_i: Vec<_> = si.names().map(strip).collect();
        let names_s: Vec<_> = ss.names().map(strip).collect();
        assert_eq!(names_i, names_s);
        for (ni, ns) in si.names().zip(ss.names()) {
            let (a, b) = (si.get(ni).unwrap().shape(), ss.get(ns).unwrap().shape());
            if ni.contains(".head.") {
                assert_eq!(a[0], 3);
                assert_eq!(b[0], 19);
                assert_eq!(a[1..], b[1..]);
            } else {
                assert_eq!(a, b);
            }
        }
        let mut g = Graph::inference(&ss);
        let (fv, wv) = (g.constant(f), g.constant(w));
        let y = ds.forward(&mut g, fv, wv).unwrap();
        let logits = g.value(y).select(0);
        let m = SemanticMap::from_logits(logits).unwrap().normalize();
        assert!(m.simplex_error() < 1e-5);
        assert!(m.argmax().iter().all(|l| *l < 19));
    }

    #[test]
    fn decoder_parameter_gradients_check() {
        let mut store = ParamStore::new();
        let d = Decoder::new(&mut store, &mut rng(21), DecoderKind::Image, 2, 3, &DecoderConfig { channels: alloc::vec![3, 2, 2] }).unwrap();
        let f = Tensor::randn(&[1, 2, 2, 2], 1.0, &mut rng(22));
        let w = Tensor::randn(&[1, 3], 1.0, &mut rng(23));
        for name in ["decoder.image.stage0.conv.weight", "decoder.image.stage1.adain.weight", "decoder.image.stage2.head.bias"] {
            let c = gradcheck::check_param(&store, name, 1e-6, |g| {
                let (fv, wv) = (g.constant(f.clone()), g.constant(w.clone()));
                let y = d.forward(g, fv, wv).unwrap();
                let y = g.square(y);
                g.sum(y)
            });
            assert!(c.passes(1e-3), "{name}: {c:?}");
        }
    }
}
