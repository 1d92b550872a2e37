//! Semantic editing, cross-model style transfer and identity interpolation.
//!
//! Every call reads parameters only; nothing here mutates a checkpoint.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::geometry::CameraPose;
use crate::graph::Graph;
use crate::labels::NUM_CLASSES;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::translator::{NormStats, NormTrace};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditMode {
    /// Region pixels become hard one-hot `class`.
    #[default]
    Set,
    /// Region pixels whose most likely class is `class` become background.
    Clear,
}

/// Region of an edit in output-image pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    /// Vertices `[x, y]` with `x` along columns; a pixel is inside when its
    /// center is (even-odd rule).
    Polygon(Vec<[f64; 2]>),
    Mask { width: usize, height: usize, pixels: Vec<bool> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditOp {
    #[serde(flatten)]
    pub region: Region,
    pub class: u8,
    #[serde(default)]
    pub mode: EditMode,
}

impl EditOp {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.class as usize >= NUM_CLASSES {
            return Err(Error::Argument(format!("class {} outside 0..{}", self.class, NUM_CLASSES - 1)));
        }
        match &self.region {
            Region::Polygon(pts) => {
                if pts.len() < 3 {
                    return Err(Error::Argument("polygon needs at least three vertices".into()));
                }
                for &[x, y] in pts {
                    if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 || x > w as f64 || y > h as f64 {
                        return Err(Error::OutOfBounds(format!("vertex ({x}, {y}) outside the {w}x{h} image")));
                    }
                }
            }
            Region::Mask { width, height, pixels } => {
                if (*height, *width) != (h, w) || pixels.len() != h * w {
                    return Err(Error::OutOfBounds(format!(
                        "mask {width}x{height} does not match the {w}x{h} image"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Row-major membership of every pixel.
    pub fn rasterize(&self, h: usize, w: usize) -> Result<Vec<bool>> {
        self.validate(h, w)?;
        Ok(match &self.region {
            Region::Mask { pixels, .. } => pixels.clone(),
            Region::Polygon(pts) => {
                let mut out = vec![false; h * w];
                for i in 0..h {
                    let py = i as f64 + 0.5;
                    for j in 0..w {
                        let px = j as f64 + 0.5;
                        let mut inside = false;
                        let mut k = pts.len() - 1;
                        for (l, &[xl, yl]) in pts.iter().enumerate() {
                            let [xk, yk] = pts[k];
                            if (yl > py) != (yk > py) && px < (xk - xl) * (py - yl) / (yk - yl) + xl {
                                inside = !inside;
                            }
                            k = l;
                        }
                        out[i * w + j] = inside;
                    }
                }
                out
            }
        })
    }
}

/// Applies `edits` in order to probabilities `[B, 19, H, W]`. Returns the
/// edited map and the per-pixel changed flags `[H * W]`.
pub fn apply_edits(semantics: &Tensor, edits: &[EditOp]) -> Result<(Tensor, Vec<bool>)> {
    let s = semantics.shape();
    if s.len() != 4 || s[1] != NUM_CLASSES {
        return Err(shape_err("apply_edits", &[0, NUM_CLASSES, 0, 0], s));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let n = h * w;
    let mut out = semantics.clone();
    let mut changed = vec![false; n];
    for op in edits {
        let region = op.rasterize(h, w)?;
        let class = op.class as usize;
        let data = out.data_mut();
        for bi in 0..b {
            let base = bi * NUM_CLASSES * n;
            for p in (0..n).filter(|&p| region[p]) {
                let target = match op.mode {
                    EditMode::Set => class,
                    EditMode::Clear => {
                        let mut top = 0;
                        for c in 1..NUM_CLASSES {
                            if data[base + c * n + p] > data[base + top * n + p] {
                                top = c;
                            }
                        }
                        if top != class {
                            continue;
                        }
                        0
                    }
                };
                for c in 0..NUM_CLASSES {
                    let v = if c == target { 1.0 } else { 0.0 };
                    let slot = &mut data[base + c * n + p];
                    if *slot != v {
                        *slot = v;
                        changed[p] = true;
                    }
                }
            }
        }
    }
    Ok((out, changed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditResult {
    pub drawing_original: Tensor,
    pub semantics_original: Tensor,
    pub semantics_edited: Tensor,
    pub drawing_edited: Tensor,
    /// Pixels whose semantic distribution was changed.
    pub changed: Vec<bool>,
    /// Pixels within the translator's semantic reach of a changed pixel.
    pub footprint: Vec<bool>,
}

/// Generates `(P̂, Ŝ)` for `z` at `pose`, edits `Ŝ` and translates again.
pub fn semantic_edit(
    model: &Model,
    params: &ParamStore,
    z: &Tensor,
    pose: &CameraPose,
    render: usize,
    edits: &[EditOp],
) -> Result<EditResult> {
    let translator = model
        .generator
        .translator
        .as_ref()
        .ok_or_else(|| Error::Architecture("semantic editing needs a model with a translator".into()))?;
    let n = z.shape()[0];
    let gen = model.generate(params, z, &vec![*pose; n], render)?;
    let (h, w) = (gen.semantics.shape()[2], gen.semantics.shape()[3]);
    let (edited, changed) = apply_edits(&gen.semantics, edits)?;
    let drawing_edited = if changed.iter().any(|&c| c) {
        model.translate(params, &gen.image, &edited)?
    } else {
        gen.drawing.clone()
    };
    let footprint = dilate(&changed, h, w, translator.semantic_reach());
    Ok(EditResult {
        drawing_original: gen.drawing,
        semantics_original: gen.semantics,
        semantics_edited: edited,
        drawing_edited,
        changed,
        footprint,
    })
}

/// Square dilation of a row-major mask by `radius` pixels.
pub fn dilate(mask: &[bool], h: usize, w: usize, radius: usize) -> Vec<bool> {
    let mut rows = vec![false; h * w];
    for i in 0..h {
        for j in (0..w).filter(|&j| mask[i * w + j]) {
            let (lo, hi) = (j.saturating_sub(radius), (j + radius).min(w - 1));
            rows[i * w + lo..=i * w + hi].iter_mut().for_each(|v| *v = true);
        }
    }
    let mut out = vec![false; h * w];
    for j in 0..w {
        for i in (0..h).filter(|&i| rows[i * w + j]) {
            let (lo, hi) = (i.saturating_sub(radius), (i + radius).min(h - 1));
            for r in lo..=hi {
                out[r * w + j] = true;
            }
        }
    }
    out
}

/// Translates `image` with `semantics` while reusing the instance-norm
/// statistics of the pass on `reference`. With statistics frozen, output
/// pixels outside the semantic reach of every changed pixel are unaffected.
pub fn translate_frozen_norms(
    model: &Model,
    params: &ParamStore,
    image: &Tensor,
    reference: &Tensor,
    semantics: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let translator = model
        .generator
        .translator
        .as_ref()
        .ok_or_else(|| Error::Architecture("model has no translator".into()))?;
    let mut stats = NormStats::default();
    let run = |sem: &Tensor, trace: &mut NormTrace| -> Result<Tensor> {
        let mut g = Graph::inference(params);
        let i = g.constant(image.clone());
        let s = g.constant(sem.clone());
        let y = translator.forward_traced(&mut g, i, s, trace)?;
        Ok(g.value(y).clone())
    };
    let a = run(reference, &mut NormTrace::Record(&mut stats))?;
    let a_replay = run(reference, &mut NormTrace::Replay(&stats, 0))?;
    let b = run(semantics, &mut NormTrace::Replay(&stats, 0))?;
    debug_assert!(a.max_abs_diff(&a_replay) < 1e-9);
    Ok((a_replay, b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transfer {
    pub drawing: Tensor,
    pub image: Tensor,
    pub semantics: Tensor,
    /// Content features taken from the content model.
    pub features: Tensor,
}

/// Content features `F` from model A with `z1`, decoder style `w_s` from
/// model B with `z2`, decoded and translated by model B.
#[allow(clippy::too_many_arguments)]
pub fn style_transfer(
    content: (&Model, &ParamStore),
    style: (&Model, &ParamStore),
    z1: &Tensor,
    z2: &Tensor,
    pose: &CameraPose,
    render: usize,
) -> Result<Transfer> {
    let (ma, pa) = content;
    let (mb, pb) = style;
    if ma.cfg != mb.cfg || ma.ablation != mb.ablation {
        return Err(Error::Architecture("content and style models differ in architecture".into()));
    }
    if z1.shape() != z2.shape() {
        return Err(shape_err("style_transfer latents", z1.shape(), z2.shape()));
    }
    let n = z1.shape()[0];
    let features = ma.generate(pa, z1, &vec![*pose; n], render)?.features;
    let w_s = mb.style(pb, z2)?.w_s;
    let (drawing, image, semantics) = mb.decode_features(pb, &features, &w_s)?;
    Ok(Transfer {
        drawing,
        image,
        semantics,
        features,
    })
}

/// Drawings along the straight line between `(z1, x1)` and `(z2, x2)` in
/// post-mapping code space and pose space; `steps` frames including both
/// endpoints, which reproduce direct generation exactly.
#[allow(clippy::too_many_arguments)]
pub fn identity_interpolate(
    model: &Model,
    params: &ParamStore,
    z1: &Tensor,
    z2: &Tensor,
    x1: &CameraPose,
    x2: &CameraPose,
    steps: usize,
    render: usize,
) -> Result<Vec<Tensor>> {
    if steps < 2 {
        return Err(Error::Argument(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    if z1.shape() != z2.shape() {
        return Err(shape_err("identity_interpolate latents", z1.shape(), z2.shape()));
    }
    let s1 = model.style(params, z1)?;
    let s2 = model.style(params, z2)?;
    let n = z1.shape()[0];
    (0..steps)
        .map(|k| {
            let (style, pose) = match k {
                0 => (s1.clone(), *x1),
                k if k == steps - 1 => (s2.clone(), *x2),
                _ => {
                    let t = k as f64 / (steps - 1) as f64;
                    (s1.lerp(&s2, t)?, x1.lerp(x2, t))
                }
            };
            Ok(model.generate_styled(params, &style, &vec![pose; n], render)?.drawing)
        })
        .collect()
}
