//! Feature projector: mapping network, FiLM-conditioned implicit field,
//! volume rendering and stereo feature mixup.
//!
//! Points are expressed in box coordinates (world position divided by
//! `box_half_extent`) before entering the field, and densities are per unit of
//! box length. With the default camera the visible depth range spans two box
//! units, so a freshly initialised field is already partly opaque.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::{self, CameraPose, PinholeCamera, PoseDistribution, WarpResult};
use crate::graph::{Graph, SamplePlan, Var};
use crate::nn::{Init, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectorConfig {
    pub d_z: usize,
    pub d_s: usize,
    pub mapping_hidden: usize,
    pub mapping_layers: usize,
    pub film_layers: usize,
    pub film_hidden: usize,
    pub feature_channels: usize,
    pub n_samples: usize,
    /// `γ = freq_scale · f + freq_bias` for the raw mapping output `f`.
    pub freq_scale: f64,
    pub freq_bias: f64,
    pub box_half_extent: f64,
    pub poses: PoseDistribution,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            d_z: 256,
            d_s: 256,
            mapping_hidden: 256,
            mapping_layers: 3,
            film_layers: 8,
            film_hidden: 256,
            feature_channels: 256,
            n_samples: 24,
            freq_scale: 15.0,
            freq_bias: 30.0,
            box_half_extent: 0.12,
            poses: PoseDistribution::default(),
        }
    }
}

impl ProjectorConfig {
    pub fn desk() -> Self {
        Self {
            d_z: 64,
            d_s: 64,
            mapping_hidden: 64,
            film_hidden: 32,
            feature_channels: 32,
            n_samples: 16,
            freq_scale: 7.5,
            freq_bias: 15.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_z", self.d_z),
            ("d_s", self.d_s),
            ("mapping_hidden", self.mapping_hidden),
            ("film_layers", self.film_layers),
            ("film_hidden", self.film_hidden),
            ("feature_channels", self.feature_channels),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("projector.{name} must be positive")));
            }
        }
        if self.n_samples < 2 {
            return Err(Error::Config(format!("n_samples must be at least 2, got {}", self.n_samples)));
        }
        if !(self.box_half_extent > 0.0) {
            return Err(Error::Config("box_half_extent must be positive".into()));
        }
        self.poses.validate()
    }

    fn mapping_out(&self) -> usize {
        2 * self.film_layers * self.film_hidden + self.d_s
    }
}

/// Post-mapping codes for a batch: per FiLM layer a frequency and a phase
/// vector `[B, film_hidden]`, plus the decoder style `w_s [B, d_s]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub freqs: Vec<Tensor>,
    pub phases: Vec<Tensor>,
    pub w_s: Tensor,
}

impl StyleParams {
    pub fn batch(&self) -> usize {
        self.w_s.shape()[0]
    }

    pub fn layers(&self) -> usize {
        self.freqs.len()
    }

    /// `(1 - t) · self + t · other` on every vector.
    pub fn lerp(&self, other: &StyleParams, t: f64) -> Result<StyleParams> {
        if self.freqs.len() != other.freqs.len() {
            return Err(Error::Architecture("style codes have different FiLM depth".into()));
        }
        let l = |a: &Tensor, b: &Tensor| a.zip_map(b, |x, y| (1.0 - t) * x + t * y);
        Ok(StyleParams {
            freqs: self.freqs.iter().zip(&other.freqs).map(|(a, b)| l(a, b)).collect::<Result<_>>()?,
            phases: self.phases.iter().zip(&other.phases).map(|(a, b)| l(a, b)).collect::<Result<_>>()?,
            w_s: l(&self.w_s, &other.w_s)?,
        })
    }

    /// Replace the decoder style, keeping the content code.
    pub fn with_style(&self, w_s: Tensor) -> StyleParams {
        StyleParams {
            w_s,
            ..self.clone()
        }
    }

    pub fn select(&self, b: usize) -> StyleParams {
        let pick = |t: &Tensor| {
            let d = t.shape()[1];
            Tensor::from_vec(&[1, d], t.data()[b * d..(b + 1) * d].to_vec())
        };
        StyleParams {
            freqs: self.freqs.iter().map(pick).collect(),
            phases: self.phases.iter().map(pick).collect(),
            w_s: pick(&self.w_s),
        }
    }

    pub fn concat(items: &[StyleParams]) -> Result<StyleParams> {
        let first = items.first().ok_or_else(|| Error::Empty("no style codes".into()))?;
        let cat = |get: &dyn Fn(&StyleParams) -> &Tensor| -> Result<Tensor> {
            let d = get(first).shape()[1];
            let mut data = Vec::new();
            let mut rows = 0;
            for s in items {
                let t = get(s);
                if t.shape()[1] != d {
                    return Err(shape_err("StyleParams::concat", &[d], &t.shape()[1..]));
                }
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            Tensor::new(&[rows, d], data)
        };
        let layers = first.layers();
        Ok(StyleParams {
            freqs: (0..layers).map(|l| cat(&|s| &s.freqs[l])).collect::<Result<_>>()?,
            phases: (0..layers).map(|l| cat(&|s| &s.phases[l])).collect::<Result<_>>()?,
            w_s: cat(&|s| &s.w_s)?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.freqs.iter().chain(&self.phases).all(Tensor::is_finite) && self.w_s.is_finite()
    }

    pub fn to_vars(&self, g: &mut Graph) -> StyleVars {
        StyleVars {
            freqs: self.freqs.iter().map(|t| g.constant(t.clone())).collect(),
            phases: self.phases.iter().map(|t| g.constant(t.clone())).collect(),
            w_s: g.constant(self.w_s.clone()),
        }
    }
}

/// [`StyleParams`] living in a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVars {
    pub freqs: Vec<Var>,
    pub phases: Vec<Var>,
    pub w_s: Var,
}

impl StyleVars {
    pub fn to_params(&self, g: &Graph) -> StyleParams {
        StyleParams {
            freqs: self.freqs.iter().map(|v| g.value(*v).clone()).collect(),
            phases: self.phases.iter().map(|v| g.value(*v).clone()).collect(),
            w_s: g.value(self.w_s).clone(),
        }
    }
}

/// Field outputs at `P` points per batch item.
#[derive(Clone, Copy, Debug)]
pub struct FieldOutput {
    /// `[B, P]`, non-negative.
    pub density: Var,
    /// `[B, P, C_F]`.
    pub features: Var,
    /// `[B, P, 3]` in `[-1, 1]`.
    pub rgb: Var,
}

/// Composited render of a batch of views.
#[derive(Clone, Debug)]
pub struct RenderVars {
    /// `[B, C_F, H, W]`.
    pub features: Var,
    /// `[B, 3, H, W]`.
    pub rgb: Var,
    /// `[B·H·W, N]`.
    pub weights: Var,
    /// Ray depth `[B, H, W]`, detached.
    pub depth: Tensor,
    /// Sample distances `[B·H·W, N]`.
    pub t: Tensor,
    pub resolution: (usize, usize),
}

/// Tensor-level render result for a single batch.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub features: Tensor,
    pub rgb_lowres: Tensor,
    pub depth: Tensor,
    pub weights: Tensor,
}

impl RenderVars {
    pub fn to_output(&self, g: &Graph) -> RenderOutput {
        RenderOutput {
            features: g.value(self.features).clone(),
            rgb_lowres: g.value(self.rgb).clone(),
            depth: self.depth.clone(),
            weights: g.value(self.weights).clone(),
        }
    }
}

/// Bin placement along each ray.
pub enum Sampling<'r> {
    /// Bin midpoints; output does not depend on any random state.
    Midpoint,
    /// One uniform draw inside each bin.
    Stratified(&'r mut dyn RngCore),
}

/// Composite an arbitrary field along the rays of `cams` (one per batch item).
///
/// `field` receives box-coordinate points `[B, H·W·N, 3]`. The interval
/// length `δ = (far - near) / (N · box_half_extent)` is the same for every
/// sample.
#[allow(clippy::too_many_arguments)]
pub fn render_field<F>(
    g: &mut Graph,
    cams: &[PinholeCamera],
    resolution: (usize, usize),
    near: f64,
    far: f64,
    n_samples: usize,
    box_half_extent: f64,
    sampling: Sampling<'_>,
    field: F,
) -> Result<RenderVars>
where
    F: FnOnce(&mut Graph, Var) -> FieldOutput,
{
    if n_samples < 2 {
        return Err(Error::Config(format!("n_samples must be at least 2, got {n_samples}")));
    }
    if !(near < far) {
        return Err(Error::Argument(format!("near {near} must be below far {far}")));
    }
    let (h, w) = resolution;
    if h == 0 || w == 0 || cams.is_empty() {
        return Err(Error::Argument("render needs a non-empty batch and resolution".into()));
    }
    let bsz = cams.len();
    let rays = h * w;
    let n = n_samples;
    let bin = (far - near) / n as f64;
    let mut sampling = sampling;
    let mut t = Vec::with_capacity(bsz * rays * n);
    let mut pts = Vec::with_capacity(bsz * rays * n * 3);
    for cam in cams {
        let bundle = geometry::rays_for_camera(cam, resolution);
        for r in 0..rays {
            let o = bundle.origin(r);
            let d = bundle.direction(r);
            for k in 0..n {
                let u = match &mut sampling {
                    Sampling::Midpoint => 0.5,
                    Sampling::Stratified(rng) => rng.random::<f64>(),
                };
                let tk = near + (k as f64 + u) * bin;
                t.push(tk);
                for a in 0..3 {
                    pts.push((o[a] + tk * d[a]) / box_half_extent);
                }
            }
        }
    }
    let points = g.constant(Tensor::from_vec(&[bsz, rays * n, 3], pts));
    let out = field(g, points);
    let c = g.shape(out.features)[2];

    let sigma = g.reshape(out.density, &[bsz * rays, n]);
    let delta = Arc::new(vec![bin / box_half_extent; bsz * rays * n]);
    let weights = g.render_weights(sigma, delta);

    let feats = g.reshape(out.features, &[bsz * rays, n, c]);
    let feats = g.composite(weights, feats);
    let feats = g.reshape(feats, &[bsz, h, w, c]);
    let features = g.permute(feats, &[0, 3, 1, 2]);

    let rgb = g.reshape(out.rgb, &[bsz * rays, n, 3]);
    let rgb = g.composite(weights, rgb);
    let rgb = g.reshape(rgb, &[bsz, h, w, 3]);
    let rgb = g.permute(rgb, &[0, 3, 1, 2]);

    let t = Tensor::from_vec(&[bsz * rays, n], t);
    let depth = geometry::expected_depth(g.value(weights), &t, far)?.reshape(&[bsz, h, w])?;
    Ok(RenderVars {
        features,
        rgb,
        weights,
        depth,
        t,
        resolution,
    })
}

/// Result of [`Projector::project`].
#[derive(Clone, Debug)]
pub struct Projection {
    /// Mixed feature grid `F [B, C_F, H, W]` (equal to `F_pri` in eval mode).
    pub features: Var,
    pub w_s: Var,
    /// Low-resolution primary render `[B, 3, H, W]`.
    pub rgb_pri: Var,
    /// Auxiliary render warped into the primary view.
    pub i_warp: Option<Var>,
    /// `[B, 1, H, W]` of 0/1.
    pub mask: Option<Tensor>,
    pub depth: Tensor,
    pub weights: Var,
    pub aux_poses: Vec<CameraPose>,
    pub mix: f64,
}

pub enum ProjectMode<'r> {
    Eval,
    /// Auxiliary poses, the mix coefficient and the stratified jitter are all
    /// drawn from this stream.
    Train(&'r mut dyn RngCore),
}

/// Feature projector `G_F`, including the mapping network.
#[derive(Clone, Debug, PartialEq)]
pub struct Projector {
    pub cfg: ProjectorConfig,
    mapping: Vec<Linear>,
    film: Vec<Linear>,
    density: Linear,
    feature: Linear,
    rgb: Linear,
}

impl Projector {
    pub const PREFIX: &'static str = "projector.";

    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: ProjectorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut mapping = Vec::new();
        let mut din = cfg.d_z;
        // kaiming gain for leaky relu 0.2
        let gain = libm::sqrt(2.0 / (1.0 + 0.04));
        for i in 0..cfg.mapping_layers {
            let std = gain / libm::sqrt(din as f64);
            mapping.push(Linear::new(
                store,
                rng,
                &format!("projector.mapping.{i}"),
                din,
                cfg.mapping_hidden,
                Init::Normal(std),
                Init::Zeros,
            ));
            din = cfg.mapping_hidden;
        }
        let b = 0.25 / libm::sqrt(din as f64);
        mapping.push(Linear::new(
            store,
            rng,
            &format!("projector.mapping.{}", cfg.mapping_layers),
            din,
            cfg.mapping_out(),
            Init::Uniform(b),
            Init::Zeros,
        ));

        let hdim = cfg.film_hidden;
        let mut film = Vec::new();
        for l in 0..cfg.film_layers {
            let (din, wi) = if l == 0 {
                (3, Init::Uniform(1.0 / 3.0))
            } else {
                (hdim, Init::Uniform(libm::sqrt(6.0 / hdim as f64) / 25.0))
            };
            film.push(Linear::new(store, rng, &format!("projector.film.{l}"), din, hdim, wi, Init::FanIn));
        }
        let density = Linear::new(store, rng, "projector.head.density", hdim, 1, Init::FanIn, Init::FanIn);
        let feature = Linear::new(
            store,
            rng,
            "projector.head.feature",
            hdim,
            cfg.feature_channels,
            Init::FanIn,
            Init::FanIn,
        );
        let rgb = Linear::new(store, rng, "projector.head.rgb", hdim, 3, Init::FanIn, Init::FanIn);
        Ok(Self {
            cfg,
            mapping,
            film,
            density,
            feature,
            rgb,
        })
    }

    /// `z [B, d_z] -> StyleVars`.
    pub fn mapping(&self, g: &mut Graph, z: Var) -> Result<StyleVars> {
        let zs = g.shape(z).to_vec();
        if zs.len() != 2 || zs[1] != self.cfg.d_z {
            return Err(shape_err("mapping_network", &[zs.first().copied().unwrap_or(1), self.cfg.d_z], &zs));
        }
        let (last, hidden) = self.mapping.split_last().unwrap();
        let mut h = z;
        for layer in hidden {
            h = layer.forward(g, h);
            h = g.leaky_relu(h, 0.2);
        }
        let out = last.forward(g, h);
        let (nl, hd) = (self.cfg.film_layers, self.cfg.film_hidden);
        let mut freqs = Vec::with_capacity(nl);
        let mut phases = Vec::with_capacity(nl);
        for l in 0..nl {
            let f = g.narrow(out, 1, l * hd, hd);
            let f = g.scale(f, self.cfg.freq_scale);
            freqs.push(g.add_scalar(f, self.cfg.freq_bias));
            phases.push(g.narrow(out, 1, (nl + l) * hd, hd));
        }
        let w_s = g.narrow(out, 1, 2 * nl * hd, self.cfg.d_s);
        Ok(StyleVars { freqs, phases, w_s })
    }

    /// Forward-only mapping of `z [B, d_z]`.
    pub fn style_params(&self, params: &ParamStore, z: &Tensor) -> Result<StyleParams> {
        let mut g = Graph::inference(params);
        let zv = g.constant(z.clone());
        let s = self.mapping(&mut g, zv)?;
        Ok(s.to_params(&g))
    }

    /// Evaluate the field at box-coordinate points `[B, P, 3]`.
    pub fn field(&self, g: &mut Graph, style: &StyleVars, points: Var) -> FieldOutput {
        let ps = g.shape(points).to_vec();
        let (bsz, p) = (ps[0], ps[1]);
        let hd = self.cfg.film_hidden;
        let mut h = points;
        for (l, layer) in self.film.iter().enumerate() {
            let flat = g.reshape(h, &[bsz * p, layer.in_dim]);
            let lin = layer.forward(g, flat);
            let lin = g.reshape(lin, &[bsz, p, hd]);
            h = g.film_sin(lin, style.freqs[l], style.phases[l]);
        }
        let flat = g.reshape(h, &[bsz * p, hd]);
        let raw = self.density.forward(g, flat);
        let density = g.softplus(raw);
        let density = g.reshape(density, &[bsz, p]);
        let feat = self.feature.forward(g, flat);
        let features = g.reshape(feat, &[bsz, p, self.cfg.feature_channels]);
        let c = self.rgb.forward(g, flat);
        let c = g.sigmoid(c);
        let c = g.scale(c, 2.0);
        let c = g.add_scalar(c, -1.0);
        let rgb = g.reshape(c, &[bsz, p, 3]);
        FieldOutput {
            density,
            features,
            rgb,
        }
    }

    /// Render one view per batch item.
    pub fn render(
        &self,
        g: &mut Graph,
        style: &StyleVars,
        poses: &[CameraPose],
        resolution: (usize, usize),
        sampling: Sampling<'_>,
    ) -> Result<RenderVars> {
        let first = poses.first().ok_or_else(|| Error::Empty("no poses to render".into()))?;
        if g.shape(style.w_s)[0] != poses.len() {
            return Err(shape_err("render batch", &[g.shape(style.w_s)[0]], &[poses.len()]));
        }
        let mut cams = Vec::with_capacity(poses.len());
        for p in poses {
            p.validate()?;
            if p.near != first.near || p.far != first.far {
                return Err(Error::Argument("all poses in a batch must share near/far".into()));
            }
            cams.push(p.camera());
        }
        render_field(
            g,
            &cams,
            resolution,
            first.near,
            first.far,
            self.cfg.n_samples,
            self.cfg.box_half_extent,
            sampling,
            |g, pts| self.field(g, style, pts),
        )
    }

    /// Render the primary view and, in training mode, an auxiliary view that
    /// is warped into the primary frame and mixed into its features.
    pub fn project(
        &self,
        g: &mut Graph,
        style: &StyleVars,
        poses: &[CameraPose],
        resolution: (usize, usize),
        mode: ProjectMode<'_>,
    ) -> Result<Projection> {
        match mode {
            ProjectMode::Eval => {
                let r = self.render(g, style, poses, resolution, Sampling::Midpoint)?;
                Ok(Projection {
                    features: r.features,
                    w_s: style.w_s,
                    rgb_pri: r.rgb,
                    i_warp: None,
                    mask: None,
                    depth: r.depth,
                    weights: r.weights,
                    aux_poses: Vec::new(),
                    mix: 1.0,
                })
            }
            ProjectMode::Train(rng) => {
                let mut aux = Vec::with_capacity(poses.len());
                for _ in poses {
                    aux.push(geometry::sample_viewpoint(rng, &self.cfg.poses)?);
                }
                let mix = rng.random::<f64>();
                self.project_pair(g, style, poses, &aux, resolution, mix, Sampling::Stratified(rng))
            }
        }
    }

    /// Training-mode projection with explicit auxiliary poses and mix value.
    #[allow(clippy::too_many_arguments)]
    pub fn project_pair(
        &self,
        g: &mut Graph,
        style: &StyleVars,
        primary: &[CameraPose],
        auxiliary: &[CameraPose],
        resolution: (usize, usize),
        mix: f64,
        sampling: Sampling<'_>,
    ) -> Result<Projection> {
        if !(0.0..=1.0).contains(&mix) {
            return Err(Error::Argument(format!("mix {mix} outside [0, 1]")));
        }
        if primary.len() != auxiliary.len() {
            return Err(shape_err("project_pair", &[primary.len()], &[auxiliary.len()]));
        }
        let (pri, aux) = match sampling {
            Sampling::Midpoint => (
                self.render(g, style, primary, resolution, Sampling::Midpoint)?,
                self.render(g, style, auxiliary, resolution, Sampling::Midpoint)?,
            ),
            Sampling::Stratified(rng) => (
                self.render(g, style, primary, resolution, Sampling::Stratified(&mut *rng))?,
                self.render(g, style, auxiliary, resolution, Sampling::Stratified(&mut *rng))?,
            ),
        };
        let (h, w) = resolution;
        let bsz = primary.len();
        let mut taps = Vec::with_capacity(bsz * h * w);
        let mut mask = Vec::with_capacity(bsz * h * w);
        for b in 0..bsz {
            let depth = &pri.depth.data()[b * h * w..(b + 1) * h * w];
            let (t, m) = geometry::warp_taps(depth, &primary[b].camera(), &auxiliary[b].camera(), (h, w), (h, w));
            taps.extend(t);
            mask.extend(m.into_iter().map(|v| if v { 1.0 } else { 0.0 }));
        }
        let plan = Arc::new(SamplePlan {
            batch: bsz,
            src_hw: (h, w),
            dst_hw: (h, w),
            taps,
        });
        let i_warp = g.gather_bilinear(aux.rgb, plan.clone());
        let f_warp = g.gather_bilinear(aux.features, plan);
        let mask = Tensor::from_vec(&[bsz, 1, h, w], mask);
        let features = mix_features(g, pri.features, f_warp, &mask, mix);
        Ok(Projection {
            features,
            w_s: style.w_s,
            rgb_pri: pri.rgb,
            i_warp: Some(i_warp),
            mask: Some(mask),
            depth: pri.depth,
            weights: pri.weights,
            aux_poses: auxiliary.to_vec(),
            mix,
        })
    }
}

/// Per-pixel blend weight on the warped grid: `valid · (1 - mix)`, broadcast
/// over `c` channels.
fn warp_weight(mask: &Tensor, c: usize, mix: f64) -> Tensor {
    let (bsz, h, w) = (mask.shape()[0], mask.shape()[2], mask.shape()[3]);
    let n = h * w;
    let mut out = Vec::with_capacity(bsz * c * n);
    for b in 0..bsz {
        let m = &mask.data()[b * n..(b + 1) * n];
        for _ in 0..c {
            out.extend(m.iter().map(|v| if *v > 0.0 { 1.0 - mix } else { 0.0 }));
        }
    }
    Tensor::from_vec(&[bsz, c, h, w], out)
}

/// `mix · a + (1 - mix) · b` where `mask` is set, `a` elsewhere.
fn mix_features(g: &mut Graph, a: Var, b: Var, mask: &Tensor, mix: f64) -> Var {
    let c = g.shape(a)[1];
    let wb = warp_weight(mask, c, mix);
    let wa = wb.map(|x| 1.0 - x);
    let wa = g.constant(wa);
    let wb = g.constant(wb);
    let pa = g.mul(a, wa);
    let pb = g.mul(b, wb);
    g.add(pa, pb)
}

/// Blend a primary grid `[C, H, W]` with a warped one.
pub fn stereo_mixup(f_pri: &Tensor, f_warp: &WarpResult, mix: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::Argument(format!("mix {mix} outside [0, 1]")));
    }
    if f_pri.shape() != f_warp.warped.shape() || f_pri.ndim() != 3 {
        return Err(shape_err("stereo_mixup", f_pri.shape(), f_warp.warped.shape()));
    }
    let n = f_pri.shape()[1] * f_pri.shape()[2];
    if f_warp.validity_mask.len() != n {
        return Err(shape_err("stereo_mixup mask", &[n], &[f_warp.validity_mask.len()]));
    }
    let out = f_pri
        .data()
        .iter()
        .zip(f_warp.warped.data())
        .enumerate()
        .map(|(i, (a, b))| {
            if f_warp.validity_mask[i % n] {
                mix * a + (1.0 - mix) * b
            } else {
                *a
            }
        })
        .collect();
    Tensor::new(f_pri.shape(), out)
}


#[cfg(test)]
mod quadrature {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent dense quadrature: per-ray transmittance accumulated with
    /// an explicit loop over fine bins.
    fn dense_oracle(p: &Projector, store: &ParamStore, s: &StyleParams, pose: &CameraPose, hw: (usize, usize), n: usize) -> (Vec<f64>, Vec<f64>) {
        let cam = pose.camera();
        let mut feats = Vec::new();
        let mut rgbs = Vec::new();
        let bin = (pose.far - pose.near) / n as f64;
        for i in 0..hw.0 {
            for j in 0..hw.1 {
                let d = cam.ray_direction(i, j, hw.0, hw.1);
                let mut pts = Vec::with_capacity(3 * n);
                for k in 0..n {
                    let t = pose.near + (k as f64 + 0.5) * bin;
                    let x = cam.position + d * t;
                    pts.extend(x.iter().map(|v| v / p.cfg.box_half_extent));
                }
                let mut g = Graph::inference(store);
                let sv = s.to_vars(&mut g);
                let x = g.constant(Tensor::from_vec(&[1, n, 3], pts));
                let out = p.field(&mut g, &sv, x);
                let sig = g.value(out.density).data();
                let f = g.value(out.features).data();
                let c = g.value(out.rgb).data();
                let cf = p.cfg.feature_channels;
                let mut acc_f = vec![0.0; cf];
                let mut acc_c = [0.0; 3];
                let mut optical = 0.0;
                let step = bin / p.cfg.box_half_extent;
                for k in 0..n {
                    let a = crate::math::exp(-optical) - crate::math::exp(-(optical + sig[k] * step));
                    optical += sig[k] * step;
                    for ch in 0..cf {
                        acc_f[ch] += a * f[k * cf + ch];
                    }
                    for ch in 0..3 {
                        acc_c[ch] += a * c[k * 3 + ch];
                    }
                }
                feats.push(acc_f);
                rgbs.push(acc_c);
            }
        }
        let (h, w) = hw;
        let cf = p.cfg.feature_channels;
        let mut fo = vec![0.0; cf * h * w];
        let mut co = vec![0.0; 3 * h * w];
        for r in 0..h * w {
            for ch in 0..cf {
                fo[ch * h * w + r] = feats[r][ch];
            }
            for ch in 0..3 {
                co[ch * h * w + r] = rgbs[r][ch];
            }
        }
        (fo, co)
    }

    #[test]
    fn coarse_render_matches_dense_quadrature() {
        let cfg = ProjectorConfig {
            n_samples: 64,
            ..ProjectorConfig::desk()
        };
        let mut worst: f64 = 0.0;
        for seed in 0..5u64 {
            let mut store = ParamStore::new();
            let p = Projector::new(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), cfg.clone()).unwrap();
            let z = Tensor::randn(&[1, cfg.d_z], 1.0, &mut ChaCha8Rng::seed_from_u64(100 + seed));
            let s = p.style_params(&store, &z).unwrap();
            let pose = CameraPose::frontal().with_angles(0.2 * seed as f64 - 0.3, 0.1);
            let hw = (4, 4);
            let mut g = Graph::inference(&store);
            let sv = s.to_vars(&mut g);
            let r = p.render(&mut g, &sv, &[pose], hw, Sampling::Midpoint).unwrap();
            let (fo, co) = dense_oracle(&p, &store, &s, &pose, hw, 4096);
            let df = g.value(r.features).data().iter().zip(&fo).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let dc = g.value(r.rgb).data().iter().zip(&co).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(df).max(dc);
        }
        assert!(worst <= 1e-2, "worst {worst}");
    }
}
