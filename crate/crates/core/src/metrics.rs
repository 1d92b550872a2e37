//! Fréchet distance, FID / SIFID, sliced Wasserstein distance and per-view
//! quality curves.
//!
//! Images are `[C, H, W]` tensors. Embedders map an image to a spatial
//! feature map; FID pools it to one vector per image, SIFID keeps every
//! spatial position as a sample.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::CameraPose;
use crate::graph::Graph;
use crate::model::Model;
use crate::nn::{Conv2d, Init};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Eigenvalues down to this value are treated as round-off and clipped to 0.
pub const EIGEN_CLIP: f64 = -1e-6;

/// Gaussian fit of a feature distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
}

impl FeatureStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(shape_err("feature covariance", &[d, d], &[cov.len()]));
        }
        for i in 0..d {
            for j in 0..i {
                if libm::fabs(cov[i * d + j] - cov[j * d + i]) > 1e-8 {
                    return Err(Error::Argument(format!("covariance is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Mean and unbiased covariance of `n` samples stored row-major in
    /// `data [n, d]`. A single sample has zero covariance.
    pub fn from_samples(data: &[f64], d: usize) -> Result<Self> {
        if d == 0 || data.is_empty() {
            return Err(Error::Empty("no feature samples".into()));
        }
        if data.len() % d != 0 {
            return Err(shape_err("feature samples", &[0, d], &[data.len()]));
        }
        let n = data.len() / d;
        let mut mean = vec![0.0; d];
        for row in data.chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        if n > 1 {
            let mut centered = data.to_vec();
            for row in centered.chunks_mut(d) {
                row.iter_mut().zip(&mean).for_each(|(x, m)| *x -= m);
            }
            crate::tensor::gemm(d, n, d, &centered, true, &centered, false, 0.0, &mut cov);
            let k = 1.0 / (n - 1) as f64;
            for i in 0..d {
                for j in i..d {
                    let v = 0.5 * (cov[i * d + j] + cov[j * d + i]) * k;
                    cov[i * d + j] = v;
                    cov[j * d + i] = v;
                }
            }
        }
        Ok(Self { mean, cov })
    }
}

fn clipped(lambda: f64, scale: f64) -> Result<f64> {
    if lambda < EIGEN_CLIP * scale {
        return Err(Error::Argument(format!("covariance product has eigenvalue {lambda}")));
    }
    Ok(lambda.max(0.0))
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^{1/2})`.
///
/// The trace of the square root is evaluated as `Tr((√Σ_a Σ_b √Σ_a)^{1/2})`,
/// which keeps every decomposition symmetric.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.cov.len() != d * d || b.cov.len() != d * d {
        return Err(shape_err("frechet_distance", &[d], &[b.dim()]));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let scale = sa.amax().max(sb.amax()).max(1.0);
    let ea = SymmetricEigen::new(sa.clone());
    let mut roots = Vec::with_capacity(d);
    for &l in ea.eigenvalues.iter() {
        roots.push(libm::sqrt(clipped(l, scale)?));
    }
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(roots)) * ea.eigenvectors.transpose();
    let m = &sqrt_a * &sb * &sqrt_a;
    let m = (&m + m.transpose()) * 0.5;
    let em = SymmetricEigen::new(m);
    let mut tr_sqrt = 0.0;
    for &l in em.eigenvalues.iter() {
        tr_sqrt += libm::sqrt(clipped(l, scale * scale)?);
    }
    let value = mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// Spatial features of one image: `positions` samples of `dim` values,
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub dim: usize,
    pub positions: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn stats(&self) -> Result<FeatureStats> {
        FeatureStats::from_samples(&self.data, self.dim)
    }

    /// Mean over positions.
    pub fn pooled(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for row in self.data.chunks(self.dim) {
            v.iter_mut().zip(row).for_each(|(a, x)| *a += x);
        }
        v.iter_mut().for_each(|a| *a /= self.positions.max(1) as f64);
        v
    }
}

pub trait Embedder {
    /// Stable identifier recorded in metric reports.
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn feature_map(&self, image: &Tensor) -> Result<FeatureMap>;
}

/// Three stride-2/2/1 convolutions with fixed random weights and leaky-ReLU,
/// producing 32-channel maps at a quarter of the input size.
pub struct RandomConvEmbedder {
    seed: u64,
    store: ParamStore,
    layers: Vec<Conv2d>,
}

impl RandomConvEmbedder {
    pub const DEFAULT_SEED: u64 = 0x5A6E_EB0D;

    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = [(3, 16, 2), (16, 32, 2), (32, 32, 1)];
        let layers = spec
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, s))| {
                let std = libm::sqrt(2.0 / (ci * 9) as f64);
                Conv2d::new(&mut store, &mut rng, &format!("embed.{i}"), ci, co, 3, s, Init::Normal(std))
            })
            .collect();
        Self { seed, store, layers }
    }
}

impl Default for RandomConvEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SEED)
    }
}

impl Embedder for RandomConvEmbedder {
    fn id(&self) -> String {
        format!("random-conv-3x32-seed{}", self.seed)
    }

    fn dim(&self) -> usize {
        32
    }

    fn feature_map(&self, image: &Tensor) -> Result<FeatureMap> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(shape_err("embed", &[3, 0, 0], s));
        }
        if s[1] < 4 || s[2] < 4 {
            return Err(Error::Argument(format!("image {}x{} is too small to embed", s[1], s[2])));
        }
        let mut g = Graph::inference(&self.store);
        let mut h = g.constant(image.clone().reshape(&[1, 3, s[1], s[2]])?);
        for l in &self.layers {
            h = l.forward(&mut g, h);
            h = g.leaky_relu(h, 0.2);
        }
        let hs = g.shape(h).to_vec();
        let (c, n) = (hs[1], hs[2] * hs[3]);
        let v = g.value(h).data();
        let mut data = vec![0.0; n * c];
        for ch in 0..c {
            for p in 0..n {
                data[p * c + ch] = v[ch * n + p];
            }
        }
        Ok(FeatureMap { dim: c, positions: n, data })
    }
}

fn non_empty(name: &str, set: &[Tensor]) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Empty(format!("{name} image set is empty")));
    }
    Ok(())
}

/// Fréchet distance between Gaussian fits of pooled embeddings.
pub fn fid(generated: &[Tensor], real: &[Tensor], embedder: &dyn Embedder) -> Result<f64> {
    non_empty("generated", generated)?;
    non_empty("real", real)?;
    let pooled = |set: &[Tensor]| -> Result<FeatureStats> {
        let mut data = Vec::with_capacity(set.len() * embedder.dim());
        for img in set {
            data.extend(embedder.feature_map(img)?.pooled());
        }
        FeatureStats::from_samples(&data, embedder.dim())
    };
    frechet_distance(&pooled(generated)?, &pooled(real)?)
}

/// Which real image each generated image is compared with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pairing {
    /// Generated `i` against real `i mod n_real`.
    #[default]
    Index,
    /// Generated `i` against the real image with the smallest distance.
    Nearest,
}

/// Per-image distances behind [`sifid`].
pub fn sifid_per_image(
    generated: &[Tensor],
    real: &[Tensor],
    embedder: &dyn Embedder,
    pairing: Pairing,
) -> Result<Vec<f64>> {
    non_empty("generated", generated)?;
    non_empty("real", real)?;
    let real_stats = real
        .iter()
        .map(|r| embedder.feature_map(r)?.stats())
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(generated.len());
    for (i, img) in generated.iter().enumerate() {
        let gs = embedder.feature_map(img)?.stats()?;
        let d = match pairing {
            Pairing::Index => frechet_distance(&gs, &real_stats[i % real_stats.len()])?,
            Pairing::Nearest => {
                let mut best = f64::INFINITY;
                for rs in &real_stats {
                    best = best.min(frechet_distance(&gs, rs)?);
                }
                best
            }
        };
        out.push(d);
    }
    Ok(out)
}

/// Mean single-image Fréchet distance over spatial feature positions.
pub fn sifid(generated: &[Tensor], real: &[Tensor], embedder: &dyn Embedder, pairing: Pairing) -> Result<f64> {
    let d = sifid_per_image(generated, real, embedder, pairing)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

// ----- sliced Wasserstein -------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwdConfig {
    pub n_projections: usize,
    /// Side of the square patch descriptors.
    pub patch: usize,
    pub descriptors_per_image: usize,
    /// Coarsest pyramid level kept.
    pub min_resolution: usize,
    pub seed: u64,
}

impl Default for SwdConfig {
    fn default() -> Self {
        Self {
            n_projections: 256,
            patch: 7,
            descriptors_per_image: 128,
            min_resolution: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwdResult {
    /// Per pyramid level, finest first, scaled by 1e3.
    pub per_level: Vec<f64>,
    /// Mean over levels, scaled by 1e3.
    pub value: f64,
}

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

/// Separable 5-tap binomial blur with reflected borders, `[C, H, W]`.
fn blur(x: &[f64], c: usize, h: usize, w: usize, gain: f64) -> Vec<f64> {
    let mut tmp = vec![0.0; c * h * w];
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let p = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                tmp[ch * h * w + y * w + xx] = (0..5)
                    .map(|k| BINOMIAL5[k] * p[y * w + reflect(xx as isize + k as isize - 2, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for xx in 0..w {
                out[ch * h * w + y * w + xx] = gain
                    * (0..5)
                        .map(|k| BINOMIAL5[k] * tmp[ch * h * w + reflect(y as isize + k as isize - 2, h) * w + xx])
                        .sum::<f64>();
            }
        }
    }
    out
}

fn pyr_down(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let b = blur(x, c, h, w, 1.0);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out.push(b[ch * h * w + 2 * y * w + 2 * xx]);
            }
        }
    }
    (out, oh, ow)
}

fn pyr_up(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut z = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..h.min(oh.div_ceil(2)) {
            for xx in 0..w.min(ow.div_ceil(2)) {
                z[ch * oh * ow + 2 * y * ow + 2 * xx] = x[ch * h * w + y * w + xx];
            }
        }
    }
    blur(&z, c, oh, ow, 4.0)
}

/// Laplacian pyramid, finest level first; the last level is the residual
/// low-pass image.
pub fn laplacian_pyramid(image: &Tensor, min_resolution: usize) -> Result<Vec<Tensor>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(shape_err("laplacian_pyramid", &[0, 0, 0], s));
    }
    let (c, mut h, mut w) = (s[0], s[1], s[2]);
    let mut cur = image.data().to_vec();
    let mut levels = Vec::new();
    while h.min(w) / 2 >= min_resolution.max(1) && h > 1 && w > 1 {
        let (down, dh, dw) = pyr_down(&cur, c, h, w);
        let up = pyr_up(&down, c, dh, dw, h, w);
        let lap: Vec<f64> = cur.iter().zip(&up).map(|(a, b)| a - b).collect();
        levels.push(Tensor::from_vec(&[c, h, w], lap));
        cur = down;
        h = dh;
        w = dw;
    }
    levels.push(Tensor::from_vec(&[c, h, w], cur));
    Ok(levels)
}

fn level_rng(seed: u64, level: usize, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (tag << 48) ^ ((level as u64) << 32))
}

/// Patch positions used at one level; shared by every image of both sets.
fn patch_positions(cfg: &SwdConfig, level: usize, h: usize, w: usize) -> Vec<(usize, usize)> {
    let (ny, nx) = (h - cfg.patch + 1, w - cfg.patch + 1);
    let total = ny * nx;
    let mut rng = level_rng(cfg.seed, level, 1);
    let flat: Vec<usize> = if cfg.descriptors_per_image <= total {
        index::sample(&mut rng, total, cfg.descriptors_per_image).into_vec()
    } else {
        (0..cfg.descriptors_per_image).map(|_| rng.random_range(0..total)).collect()
    };
    flat.into_iter().map(|i| (i / nx, i % nx)).collect()
}

/// Normalized patch descriptors per pyramid level for an image set.
pub fn level_descriptors(images: &[Tensor], cfg: &SwdConfig) -> Result<Vec<Vec<Vec<f64>>>> {
    non_empty("swd", images)?;
    if cfg.patch == 0 || cfg.descriptors_per_image == 0 || cfg.n_projections == 0 {
        return Err(Error::Config("swd patch, descriptor and projection counts must be positive".into()));
    }
    let shape = images[0].shape().to_vec();
    let pyramids = images
        .iter()
        .map(|img| {
            if img.shape() != shape.as_slice() {
                return Err(shape_err("swd image", &shape, img.shape()));
            }
            laplacian_pyramid(img, cfg.min_resolution)
        })
        .collect::<Result<Vec<_>>>()?;
    let p = cfg.patch;
    let mut out = Vec::new();
    for level in 0..pyramids[0].len() {
        let ls = pyramids[0][level].shape().to_vec();
        let (c, h, w) = (ls[0], ls[1], ls[2]);
        if h < p || w < p {
            if level == 0 {
                return Err(Error::Argument(format!("image {h}x{w} is smaller than the {p}x{p} patch")));
            }
            break;
        }
        let pos = patch_positions(cfg, level, h, w);
        let mut descs = Vec::with_capacity(images.len() * pos.len());
        for pyr in &pyramids {
            let v = pyr[level].data();
            for &(y, x) in &pos {
                let mut d = Vec::with_capacity(c * p * p);
                for ch in 0..c {
                    for dy in 0..p {
                        let row = ch * h * w + (y + dy) * w + x;
                        d.extend_from_slice(&v[row..row + p]);
                    }
                }
                descs.push(d);
            }
        }
        normalize_descriptors(&mut descs, c, p * p);
        out.push(descs);
    }
    Ok(out)
}

/// Per-channel standardization over all descriptors of a set.
fn normalize_descriptors(descs: &mut [Vec<f64>], channels: usize, per_channel: usize) {
    for ch in 0..channels {
        let r = ch * per_channel..(ch + 1) * per_channel;
        let n = (descs.len() * per_channel) as f64;
        let mean = descs.iter().flat_map(|d| d[r.clone()].iter()).sum::<f64>() / n;
        let var = descs.iter().flat_map(|d| d[r.clone()].iter()).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let sd = libm::sqrt(var);
        let inv = if sd > 0.0 { 1.0 / sd } else { 1.0 };
        for d in descs.iter_mut() {
            d[r.clone()].iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
    }
}

/// `n` unit directions in `dim` dimensions.
pub fn random_directions<R: Rng + ?Sized>(rng: &mut R, dim: usize, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Directions used at one pyramid level.
pub fn level_directions(cfg: &SwdConfig, level: usize, dim: usize) -> Vec<Vec<f64>> {
    random_directions(&mut level_rng(cfg.seed, level, 2), dim, cfg.n_projections)
}

/// Exact 1-D Wasserstein-1 distance between the empirical distributions of
/// two sorted samples, which may differ in size.
pub fn wasserstein_1d_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len(), b.len());
    if na == nb {
        return a.iter().zip(b).map(|(x, y)| libm::fabs(x - y)).sum::<f64>() / na as f64;
    }
    // integrate |F_a^{-1}(q) - F_b^{-1}(q)| over merged quantile breakpoints
    let (mut i, mut j, mut q, mut acc) = (0usize, 0usize, 0.0f64, 0.0f64);
    while i < na && j < nb {
        let qa = (i + 1) as f64 / na as f64;
        let qb = (j + 1) as f64 / nb as f64;
        let next = qa.min(qb);
        acc += (next - q) * libm::fabs(a[i] - b[j]);
        q = next;
        if qa <= next {
            i += 1;
        }
        if qb <= next {
            j += 1;
        }
    }
    acc
}

/// Mean over `directions` of the 1-D Wasserstein distance between the
/// projected point sets (no scaling).
pub fn sliced_wasserstein_points(a: &[Vec<f64>], b: &[Vec<f64>], directions: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("point set is empty".into()));
    }
    if directions.is_empty() {
        return Err(Error::Argument("no projection directions".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|p| p.len() != d) || directions.iter().any(|u| u.len() != d) {
        return Err(Error::Argument("point and direction dimensions differ".into()));
    }
    let project = |set: &[Vec<f64>], u: &[f64]| {
        let mut v: Vec<f64> = set.iter().map(|p| p.iter().zip(u).map(|(x, y)| x * y).sum()).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let total: f64 = directions
        .iter()
        .map(|u| wasserstein_1d_sorted(&project(a, u), &project(b, u)))
        .sum();
    Ok(total / directions.len() as f64)
}

/// Sliced Wasserstein distance between two image sets over Laplacian-pyramid
/// patch descriptors, reported ×1e3.
pub fn sliced_wasserstein(a: &[Tensor], b: &[Tensor], cfg: &SwdConfig) -> Result<SwdResult> {
    non_empty("first", a)?;
    non_empty("second", b)?;
    if a[0].shape() != b[0].shape() {
        return Err(shape_err("sliced_wasserstein", a[0].shape(), b[0].shape()));
    }
    let da = level_descriptors(a, cfg)?;
    let db = level_descriptors(b, cfg)?;
    let mut per_level = Vec::with_capacity(da.len());
    for (level, (la, lb)) in da.iter().zip(&db).enumerate() {
        let dirs = level_directions(cfg, level, la[0].len());
        per_level.push(1e3 * sliced_wasserstein_points(la, lb, &dirs)?);
    }
    let value = per_level.iter().sum::<f64>() / per_level.len() as f64;
    Ok(SwdResult { per_level, value })
}

// ----- per-view curves ----------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRow {
    pub pose_index: usize,
    pub yaw: f64,
    pub pitch: f64,
    pub sifid: f64,
}

/// Splits `[B, C, H, W]` into `B` images.
pub fn unbatch(x: &Tensor) -> Vec<Tensor> {
    (0..x.shape()[0]).map(|i| x.select(i)).collect()
}

/// SIFID of the model's drawings at each pose, using the same latents
/// `z [N, d_z]` for every pose.
#[allow(clippy::too_many_arguments)]
pub fn per_view_curve(
    model: &Model,
    params: &ParamStore,
    z: &Tensor,
    poses: &[CameraPose],
    render: usize,
    real: &[Tensor],
    embedder: &dyn Embedder,
    pairing: Pairing,
) -> Result<Vec<ViewRow>> {
    if poses.is_empty() {
        return Err(Error::Empty("pose list is empty".into()));
    }
    let n = z.shape()[0];
    poses
        .iter()
        .enumerate()
        .map(|(i, pose)| {
            let gen = model.generate(params, z, &vec![*pose; n], render)?;
            let imgs = unbatch(&gen.drawing);
            Ok(ViewRow {
                pose_index: i,
                yaw: pose.yaw,
                pitch: pose.pitch,
                sifid: sifid(&imgs, real, embedder, pairing)?,
            })
        })
        .collect()
}

/// Boxed default embedder.
pub fn default_embedder() -> Box<dyn Embedder> {
    Box::new(RandomConvEmbedder::default())
}
