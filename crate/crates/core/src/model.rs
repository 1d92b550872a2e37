//! The assembled generator (projector, decoders, optional translator) and
//! its discriminators.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adversaries::{DiscConfig, DiscRole, Discriminator};
use crate::decoders::{Decoder, DecoderConfig, DecoderKind};
use crate::error::{shape_err, Error, Result};
use crate::geometry::CameraPose;
use crate::graph::{Graph, Var};
use crate::labels::NUM_CLASSES;
use crate::params::ParamStore;
use crate::projector::{ProjectMode, Projection, Projector, ProjectorConfig, StyleParams, StyleVars};
use crate::tensor::Tensor;
use crate::translator::{Translator, TranslatorConfig};

/// Decoded images are this many times the render resolution.
pub const UPSAMPLE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Train every module jointly on drawings from scratch.
    pub end_to_end: bool,
    /// Without a translator, drawings come straight from the image decoder.
    pub use_translator: bool,
    pub use_spade: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            end_to_end: false,
            use_translator: true,
            use_spade: true,
        }
    }
}

impl Ablation {
    /// The four variants compared in the training-strategy ablation.
    pub fn table_rows() -> [(&'static str, Ablation); 4] {
        let none = Ablation {
            end_to_end: false,
            use_translator: false,
            use_spade: false,
        };
        [
            ("end2end", Ablation { end_to_end: true, ..none }),
            ("two-stage", none),
            (
                "two-stage+unet",
                Ablation {
                    use_translator: true,
                    ..none
                },
            ),
            ("two-stage+unet+spade", Ablation::default()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_spade && !self.use_translator {
            return Err(Error::Config("use_spade requires use_translator".into()));
        }
        Ok(())
    }

    /// Parses `end_to_end`, `no_translator`, `no_spade` (comma separated) or a
    /// table row name.
    pub fn parse(flags: &str) -> Result<Ablation> {
        if let Some((_, a)) = Self::table_rows().into_iter().find(|(n, _)| *n == flags) {
            return Ok(a);
        }
        let mut a = Ablation::default();
        for f in flags.split(',').map(str::trim).filter(|f| !f.is_empty()) {
            match f {
                "end_to_end" | "end2end" => a.end_to_end = true,
                "no_translator" => {
                    a.use_translator = false;
                    a.use_spade = false;
                }
                "no_spade" | "unet" => a.use_spade = false,
                other => return Err(Error::Config(format!("unknown ablation flag `{other}`"))),
            }
        }
        a.validate()?;
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub projector: ProjectorConfig,
    pub decoder: DecoderConfig,
    pub translator: TranslatorConfig,
    pub disc: DiscConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            projector: ProjectorConfig::default(),
            decoder: DecoderConfig::default(),
            translator: TranslatorConfig::default(),
            disc: DiscConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn desk() -> Self {
        Self {
            projector: ProjectorConfig::desk(),
            decoder: DecoderConfig::desk(),
            translator: TranslatorConfig::desk(),
            disc: DiscConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.projector.validate()?;
        self.decoder.validate()?;
        self.translator.validate()?;
        self.disc.validate()
    }
}

/// Forward-pass handles of one generator evaluation.
#[derive(Clone, Debug)]
pub struct GenVars {
    pub projection: Projection,
    pub semantic_logits: Var,
    /// Per-pixel softmax of the logits.
    pub semantics: Var,
    pub image: Var,
    pub drawing: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub projector: Projector,
    pub semantic: Decoder,
    pub image: Decoder,
    pub translator: Option<Translator>,
}

impl Generator {
    pub fn prefixes(&self) -> Vec<&'static str> {
        let mut p = alloc::vec![Projector::PREFIX, "decoder."];
        if self.translator.is_some() {
            p.push(Translator::PREFIX);
        }
        p
    }

    /// `(logits, probabilities, image)` from a feature grid.
    pub fn decode(&self, g: &mut Graph, features: Var, w_s: Var) -> Result<(Var, Var, Var)> {
        let logits = self.semantic.forward(g, features, w_s)?;
        let probs = g.softmax_channels(logits);
        let image = self.image.forward(g, features, w_s)?;
        Ok((logits, probs, image))
    }

    /// Translator output, or the photo itself without a translator.
    pub fn draw(&self, g: &mut Graph, image: Var, semantics: Var) -> Result<Var> {
        match &self.translator {
            Some(t) => t.forward(g, image, semantics),
            None => Ok(image),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        style: &StyleVars,
        poses: &[CameraPose],
        render: usize,
        mode: ProjectMode<'_>,
    ) -> Result<GenVars> {
        let projection = self.projector.project(g, style, poses, (render, render), mode)?;
        let (semantic_logits, semantics, image) = self.decode(g, projection.features, projection.w_s)?;
        let drawing = self.draw(g, image, semantics)?;
        Ok(GenVars {
            projection,
            semantic_logits,
            semantics,
            image,
            drawing,
        })
    }
}

/// Plain tensors of one evaluation-mode generation.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// `[B, 3, 8R, 8R]`
    pub drawing: Tensor,
    pub image: Tensor,
    /// Probabilities `[B, 19, 8R, 8R]`.
    pub semantics: Tensor,
    pub rgb_lowres: Tensor,
    pub depth: Tensor,
    /// `F [B, C_F, R, R]`
    pub features: Tensor,
    pub w_s: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub ablation: Ablation,
    pub generator: Generator,
    pub d_semantic: Discriminator,
    pub d_image: Discriminator,
    pub d_drawing: Discriminator,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl Model {
    /// Builds every module and initialises its parameters. Each module draws
    /// from its own seeded stream, so toggling the translator leaves the
    /// other initial values unchanged.
    pub fn init(cfg: ModelConfig, ablation: Ablation, seed: u64) -> Result<(Model, ParamStore)> {
        let mut store = ParamStore::new();
        let m = Self::build(&mut store, cfg, ablation, seed)?;
        Ok((m, store))
    }

    fn build(store: &mut ParamStore, mut cfg: ModelConfig, ablation: Ablation, seed: u64) -> Result<Model> {
        ablation.validate()?;
        cfg.translator.use_spade = ablation.use_spade;
        cfg.validate()?;
        let projector = Projector::new(store, &mut stream(seed, 1), cfg.projector.clone())?;
        let (cf, ds) = (cfg.projector.feature_channels, cfg.projector.d_s);
        let semantic = Decoder::new(store, &mut stream(seed, 2), DecoderKind::Semantic, cf, ds, &cfg.decoder)?;
        let image = Decoder::new(store, &mut stream(seed, 3), DecoderKind::Image, cf, ds, &cfg.decoder)?;
        let translator = if ablation.use_translator {
            Some(Translator::new(store, &mut stream(seed, 4), cfg.translator.clone())?)
        } else {
            None
        };
        let d_semantic = Discriminator::new(store, &mut stream(seed, 5), DiscRole::Semantic, cfg.disc.clone())?;
        let d_image = Discriminator::new(store, &mut stream(seed, 6), DiscRole::Image, cfg.disc.clone())?;
        let d_drawing = Discriminator::new(store, &mut stream(seed, 7), DiscRole::Drawing, cfg.disc.clone())?;
        Ok(Model {
            cfg,
            ablation,
            generator: Generator {
                projector,
                semantic,
                image,
                translator,
            },
            d_semantic,
            d_image,
            d_drawing,
        })
    }

    /// Fresh initial values for the modules under `prefixes`.
    pub fn fresh_params(&self, seed: u64, prefixes: &[&str]) -> Result<ParamStore> {
        let (_, mut s) = Self::init(self.cfg.clone(), self.ablation, seed)?;
        s.retain(|n| prefixes.iter().any(|p| n.starts_with(p)));
        Ok(s)
    }

    /// Rebuilds the architecture for an existing parameter set. Every
    /// generator parameter must be present with the expected shape;
    /// discriminator parameters may be absent but must match if present.
    pub fn attach(cfg: ModelConfig, ablation: Ablation, params: &ParamStore) -> Result<Model> {
        let mut scratch = ParamStore::new();
        let m = Self::build(&mut scratch, cfg, ablation, 0)?;
        for (name, t) in scratch.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Architecture(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None if name.starts_with("disc.") => {}
                None => return Err(Error::MissingParam(name.clone())),
            }
        }
        if !ablation.use_spade {
            if let Some(n) = params.names().find(|n| n.contains(".spade.")) {
                return Err(Error::Architecture(format!("SPADE parameter `{n}` in a model without SPADE")));
            }
        }
        Ok(m)
    }

    pub fn discriminator(&self, role: DiscRole) -> &Discriminator {
        match role {
            DiscRole::Semantic => &self.d_semantic,
            DiscRole::Image => &self.d_image,
            DiscRole::Drawing => &self.d_drawing,
        }
    }

    pub fn image_resolution(render: usize) -> usize {
        render * UPSAMPLE
    }

    /// `n` latent codes from the standard normal, one per row.
    pub fn sample_latents(&self, rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        let d = self.cfg.projector.d_z;
        let v: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::from_vec(&[n, d], v)
    }

    /// Latent code for `seed`, `[1, d_z]`.
    pub fn latent_for_seed(&self, seed: u64) -> Tensor {
        self.sample_latents(&mut ChaCha8Rng::seed_from_u64(seed), 1)
    }

    pub fn style(&self, params: &ParamStore, z: &Tensor) -> Result<StyleParams> {
        self.generator.projector.style_params(params, z)
    }

    pub fn generate(&self, params: &ParamStore, z: &Tensor, poses: &[CameraPose], render: usize) -> Result<Generation> {
        let style = self.style(params, z)?;
        self.generate_styled(params, &style, poses, render)
    }

    /// Evaluation-mode generation from post-mapping codes.
    pub fn generate_styled(
        &self,
        params: &ParamStore,
        style: &StyleParams,
        poses: &[CameraPose],
        render: usize,
    ) -> Result<Generation> {
        if !style.is_finite() {
            return Err(Error::Argument("non-finite style parameters".into()));
        }
        let mut g = Graph::inference(params);
        let sv = style.to_vars(&mut g);
        let out = self.generator.forward(&mut g, &sv, poses, render, ProjectMode::Eval)?;
        Ok(Generation {
            drawing: g.value(out.drawing).clone(),
            image: g.value(out.image).clone(),
            semantics: g.value(out.semantics).clone(),
            rgb_lowres: g.value(out.projection.rgb_pri).clone(),
            depth: out.projection.depth.clone(),
            features: g.value(out.projection.features).clone(),
            w_s: style.w_s.clone(),
        })
    }

    /// Decodes an existing feature grid with this model's decoders and
    /// translator.
    pub fn decode_features(&self, params: &ParamStore, features: &Tensor, w_s: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let fs = features.shape();
        if fs.len() != 4 || fs[1] != self.cfg.projector.feature_channels {
            return Err(shape_err("features", &[0, self.cfg.projector.feature_channels, 0, 0], fs));
        }
        if w_s.shape() != [fs[0], self.cfg.projector.d_s] {
            return Err(shape_err("w_s", &[fs[0], self.cfg.projector.d_s], w_s.shape()));
        }
        let mut g = Graph::inference(params);
        let f = g.constant(features.clone());
        let w = g.constant(w_s.clone());
        let (_, probs, image) = self.generator.decode(&mut g, f, w)?;
        let drawing = self.generator.draw(&mut g, image, probs)?;
        Ok((g.value(drawing).clone(), g.value(image).clone(), g.value(probs).clone()))
    }

    /// Drawing for a photo and a semantic map (`[B, 19, H, W]` probabilities).
    pub fn translate(&self, params: &ParamStore, image: &Tensor, semantics: &Tensor) -> Result<Tensor> {
        if semantics.ndim() != 4 || semantics.shape()[1] != NUM_CLASSES {
            return Err(shape_err("semantics", &[0, NUM_CLASSES, 0, 0], semantics.shape()));
        }
        let mut g = Graph::inference(params);
        let i = g.constant(image.clone());
        let s = g.constant(semantics.clone());
        let d = self.generator.draw(&mut g, i, s)?;
        Ok(g.value(d).clone())
    }

    /// Names of generator parameters (projector, decoders, translator).
    pub fn generator_params<'a>(&self, params: &'a ParamStore) -> Vec<&'a String> {
        let p = self.generator.prefixes();
        params.names().filter(|n| p.iter().any(|x| n.starts_with(x))).collect()
    }
}
