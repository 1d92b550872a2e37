//! In-memory photo/drawing + mask datasets, a procedural face generator,
//! photo-to-drawing stylizers and dataset augmentation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::labels::{self, class_index, NUM_CLASSES};
use crate::tensor::Tensor;

/// One image (`[3, H, W]` in `[-1, 1]`) with its label map (`H·W` values in
/// `0..19`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub labels: Vec<u8>,
}

impl Sample {
    pub fn hw(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(shape_err("sample image", &[3, 0, 0], s));
        }
        if self.labels.len() != s[1] * s[2] {
            return Err(Error::Argument(format!(
                "sample {}: mask has {} pixels, image has {}",
                self.id,
                self.labels.len(),
                s[1] * s[2]
            )));
        }
        if let Some(l) = self.labels.iter().find(|l| **l as usize >= NUM_CLASSES) {
            return Err(Error::Argument(format!("sample {}: label {l} outside 0..19", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

/// A training batch at a fixed resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, 3, H, W]`
    pub images: Tensor,
    /// One-hot `[B, 19, H, W]`.
    pub semantics: Tensor,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            s.validate()?;
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Images area-resampled and masks nearest-resampled to `hw`.
    pub fn batch(&self, indices: &[usize], hw: (usize, usize)) -> Result<Batch> {
        if indices.is_empty() {
            return Err(Error::Empty("batch of zero samples".into()));
        }
        let mut images = Vec::with_capacity(indices.len());
        let mut sems = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self
                .samples
                .get(i)
                .ok_or_else(|| Error::OutOfBounds(format!("sample {i} of {}", self.len())))?;
            let (h, w) = s.hw();
            images.push(resize_image(&s.image, hw)?);
            let l = resize_labels(&s.labels, (h, w), hw);
            sems.push(labels::one_hot(&l, hw.0, hw.1)?);
        }
        Ok(Batch {
            images: Tensor::stack(&images)?,
            semantics: Tensor::stack(&sems)?,
        })
    }
}

/// Seeded epoch-wise shuffling.
#[derive(Clone, Debug)]
pub struct BatchOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    pub fn new(len: usize, seed: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::Empty("dataset has no records".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Ok(Self { rng, order, pos: 0 })
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Box-filter downsampling for integer factors, bilinear otherwise.
pub fn resize_image(img: &Tensor, (oh, ow): (usize, usize)) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(shape_err("resize_image", &[0, 0, 0], s));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (oh, ow) {
        return Ok(img.clone());
    }
    let d = img.data();
    let mut out = vec![0.0; c * oh * ow];
    if h % oh == 0 && w % ow == 0 {
        let (fy, fx) = (h / oh, w / ow);
        let norm = 1.0 / (fy * fx) as f64;
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for y in 0..fy {
                        for x in 0..fx {
                            acc += d[(ch * h + i * fy + y) * w + j * fx + x];
                        }
                    }
                    out[(ch * oh + i) * ow + j] = acc * norm;
                }
            }
        }
    } else {
        for ch in 0..c {
            for i in 0..oh {
                let y = ((i as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                let y0 = y as usize;
                let y1 = (y0 + 1).min(h - 1);
                let ty = y - y0 as f64;
                for j in 0..ow {
                    let x = ((j as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                    let x0 = x as usize;
                    let x1 = (x0 + 1).min(w - 1);
                    let tx = x - x0 as f64;
                    let p = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx];
                    let top = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                    let bot = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                    out[(ch * oh + i) * ow + j] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

/// Nearest-neighbour resampling of a label map.
pub fn resize_labels(labels: &[u8], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<u8> {
    if (h, w) == (oh, ow) {
        return labels.to_vec();
    }
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let y = ((2 * i + 1) * h / (2 * oh)).min(h - 1);
        for j in 0..ow {
            let x = ((2 * j + 1) * w / (2 * ow)).min(w - 1);
            out.push(labels[y * w + x]);
        }
    }
    out
}

// ----- procedural faces --------------------------------------------------------

fn cls(name: &str) -> u8 {
    class_index(name).expect("known class") as u8
}

fn in_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
    dx * dx + dy * dy <= 1.0
}

struct FaceParams {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    hair_drop: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    mouth_w: f64,
    mouth_y: f64,
    glasses: bool,
    hat: bool,
    colors: [[f64; 3]; NUM_CLASSES],
}

impl FaceParams {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut colors = [[0.0; 3]; NUM_CLASSES];
        let jitter = |rng: &mut ChaCha8Rng, base: [f64; 3], amt: f64| {
            base.map(|c| (c + rng.random_range(-amt..=amt)).clamp(0.0, 1.0))
        };
        let skin = jitter(rng, [0.85, 0.65, 0.55], 0.15);
        let hair = jitter(rng, [0.25, 0.18, 0.12], 0.2);
        colors[cls("background") as usize] = jitter(rng, [0.5, 0.5, 0.5], 0.4);
        for n in ["skin", "nose", "l_ear", "r_ear", "neck"] {
            colors[cls(n) as usize] = skin;
        }
        colors[cls("nose") as usize] = skin.map(|c| c * 0.92);
        colors[cls("neck") as usize] = skin.map(|c| c * 0.85);
        colors[cls("hair") as usize] = hair;
        for n in ["l_brow", "r_brow"] {
            colors[cls(n) as usize] = hair.map(|c| c * 0.7);
        }
        for n in ["l_eye", "r_eye"] {
            colors[cls(n) as usize] = [0.12, 0.1, 0.1];
        }
        colors[cls("eye_g") as usize] = [0.05, 0.05, 0.08];
        colors[cls("u_lip") as usize] = jitter(rng, [0.7, 0.3, 0.3], 0.1);
        colors[cls("l_lip") as usize] = colors[cls("u_lip") as usize].map(|c| c * 0.9);
        colors[cls("mouth") as usize] = [0.3, 0.05, 0.05];
        colors[cls("hat") as usize] = jitter(rng, [0.3, 0.3, 0.6], 0.3);
        colors[cls("ear_r") as usize] = [0.9, 0.85, 0.3];
        colors[cls("neck_l") as usize] = [0.85, 0.85, 0.9];
        colors[cls("cloth") as usize] = jitter(rng, [0.4, 0.4, 0.4], 0.35);
        Self {
            cx: 0.5 + rng.random_range(-0.04..=0.04),
            cy: 0.46 + rng.random_range(-0.03..=0.03),
            rx: rng.random_range(0.2..=0.26),
            ry: rng.random_range(0.27..=0.32),
            hair_drop: rng.random_range(0.0..=0.25),
            eye_dx: rng.random_range(0.085..=0.11),
            eye_y: rng.random_range(-0.07..=-0.03),
            eye_r: rng.random_range(0.022..=0.035),
            mouth_w: rng.random_range(0.06..=0.1),
            mouth_y: rng.random_range(0.14..=0.18),
            glasses: rng.random_bool(0.2),
            hat: rng.random_bool(0.15),
            colors,
        }
    }

    fn label(&self, x: f64, y: f64) -> u8 {
        let (cx, cy, rx, ry) = (self.cx, self.cy, self.rx, self.ry);
        let face = in_ellipse(x, y, cx, cy, rx, ry);
        let mut l = cls("background");
        if y > cy + ry * 0.85 && (x - cx).abs() < rx * 2.0 - (y - 1.0).abs() * 0.5 {
            l = cls("cloth");
        }
        if (x - cx).abs() < rx * 0.45 && y > cy && y < cy + ry * 1.25 {
            l = cls("neck");
        }
        if in_ellipse(x, y, cx, cy - ry * 0.15, rx * 1.18, ry * 1.05) && y < cy + ry * self.hair_drop {
            l = cls("hair");
        }
        for (side, name) in [(-1.0, "l_ear"), (1.0, "r_ear")] {
            if in_ellipse(x, y, cx + side * rx * 0.98, cy, rx * 0.13, ry * 0.2) {
                l = cls(name);
            }
        }
        if face && y > cy - ry * 0.55 {
            l = cls("skin");
        }
        if !face {
            if self.hat && y < cy - ry * 0.75 && (x - cx).abs() < rx * 1.2 {
                l = cls("hat");
            }
            return l;
        }
        let ey = cy + self.eye_y;
        for (side, eye, brow) in [(-1.0, "l_eye", "l_brow"), (1.0, "r_eye", "r_brow")] {
            let ex = cx + side * self.eye_dx;
            if self.glasses && in_ellipse(x, y, ex, ey, self.eye_r * 2.2, self.eye_r * 1.8) {
                l = cls("eye_g");
            }
            if in_ellipse(x, y, ex, ey - self.eye_r * 2.2, self.eye_r * 1.8, self.eye_r * 0.5) {
                l = cls(brow);
            }
            if in_ellipse(x, y, ex, ey, self.eye_r * 1.4, self.eye_r) {
                l = cls(eye);
            }
        }
        if (x - cx).abs() < 0.03 - (y - ey) * 0.05 && y > ey + 0.01 && y < cy + 0.09 {
            l = cls("nose");
        }
        let my = cy + self.mouth_y;
        if in_ellipse(x, y, cx, my, self.mouth_w, 0.035) {
            l = if y < my - 0.006 {
                cls("u_lip")
            } else if y > my + 0.006 {
                cls("l_lip")
            } else {
                cls("mouth")
            };
        }
        l
    }
}

/// `n` procedural face photos with exact 19-class masks at `h × w`.
/// Deterministic in `seed`; sample `i` depends only on `(seed, i)`.
pub fn synthetic_faces(n: usize, (h, w): (usize, usize), seed: u64) -> Dataset {
    let mut samples = Vec::with_capacity(n);
    for idx in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let face = FaceParams::sample(&mut rng);
        let light = rng.random_range(-0.25..=0.25);
        let mut labels_out = Vec::with_capacity(h * w);
        let mut img = vec![0.0; 3 * h * w];
        for i in 0..h {
            let y = (i as f64 + 0.5) / h as f64;
            for j in 0..w {
                let x = (j as f64 + 0.5) / w as f64;
                let l = face.label(x, y);
                labels_out.push(l);
                let shade = 1.0 + light * (x - 0.5) - 0.15 * (y - 0.5);
                let base = face.colors[l as usize];
                for (c, b) in base.iter().enumerate() {
                    let noise = rng.random_range(-0.02..=0.02);
                    img[(c * h + i) * w + j] = ((b * shade + noise).clamp(0.0, 1.0)) * 2.0 - 1.0;
                }
            }
        }
        samples.push(Sample {
            id: format!("face_{seed}_{idx:05}"),
            image: Tensor::from_vec(&[3, h, w], img),
            labels: labels_out,
        });
    }
    Dataset { samples }
}

// ----- stylizers -----------------------------------------------------------------

/// Photo-to-drawing mapping used to synthesise drawing datasets.
pub trait Stylizer {
    fn name(&self) -> String;
    /// `[3, H, W]` in `[-1, 1]` to a drawing of the same shape.
    fn stylize(&self, photo: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityStylizer;

impl Stylizer for IdentityStylizer {
    fn name(&self) -> String {
        "identity".into()
    }

    fn stylize(&self, photo: &Tensor) -> Result<Tensor> {
        Ok(photo.clone())
    }
}

/// Difference-of-Gaussians line extractor: white paper, dark strokes where
/// the luminance band-pass response is strong.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeStylizer {
    pub sigma: f64,
    pub k: f64,
    pub gain: f64,
}

impl Default for EdgeStylizer {
    fn default() -> Self {
        Self {
            sigma: 0.8,
            k: 1.6,
            gain: 12.0,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = libm::ceil(3.0 * sigma) as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of one `h × w` plane with edge clamping.
pub fn gaussian_blur(plane: &[f64], (h, w): (usize, usize), sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = k.iter().enumerate().map(|(t, kv)| kv * plane[i * w + clamp(j as i64 + t as i64 - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = k.iter().enumerate().map(|(t, kv)| kv * tmp[clamp(i as i64 + t as i64 - r, h) * w + j]).sum();
        }
    }
    out
}

impl Stylizer for EdgeStylizer {
    fn name(&self) -> String {
        format!("dog-edges(sigma={},k={},gain={})", self.sigma, self.k, self.gain)
    }

    fn stylize(&self, photo: &Tensor) -> Result<Tensor> {
        let s = photo.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(shape_err("stylize", &[3, 0, 0], s));
        }
        let (h, w) = (s[1], s[2]);
        let n = h * w;
        let d = photo.data();
        let lum: Vec<f64> = (0..n).map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i]).collect();
        let a = gaussian_blur(&lum, (h, w), self.sigma);
        let b = gaussian_blur(&lum, (h, w), self.sigma * self.k);
        let ink: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 1.0 - 2.0 * libm::tanh(self.gain * libm::fabs(x - y))).collect();
        let mut out = Vec::with_capacity(3 * n);
        for _ in 0..3 {
            out.extend_from_slice(&ink);
        }
        Tensor::new(&[3, h, w], out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentManifest {
    pub stylizer: String,
    pub inputs: usize,
    pub outputs: usize,
    pub skipped: usize,
    pub skipped_ids: Vec<String>,
}

/// Maps every photo through `stylizer`, keeping the masks. Records whose
/// stylized output changes shape (or fails) are skipped and counted.
pub fn augment_dataset(photos: &Dataset, stylizer: &dyn Stylizer) -> (Dataset, AugmentManifest) {
    let mut out = Vec::with_capacity(photos.len());
    let mut skipped_ids = Vec::new();
    for s in &photos.samples {
        match stylizer.stylize(&s.image) {
            Ok(d) if d.shape() == s.image.shape() && d.is_finite() => out.push(Sample {
                id: s.id.clone(),
                image: d,
                labels: s.labels.clone(),
            }),
            _ => skipped_ids.push(s.id.clone()),
        }
    }
    let manifest = AugmentManifest {
        stylizer: stylizer.name(),
        inputs: photos.len(),
        outputs: out.len(),
        skipped: skipped_ids.len(),
        skipped_ids,
    };
    (Dataset { samples: out }, manifest)
}
