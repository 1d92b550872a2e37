//! Adversarial objectives, SSIM and the reprojection loss.
//!
//! Discriminators minimise `softplus(-D(real)) + softplus(D(fake)) + λ1·R1`;
//! generators minimise `softplus(-D(fake))`. Both are batch means.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::adversaries::Discriminator;
use crate::error::{shape_err, Error, Result};
use crate::graph::{self, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// R1 weight.
    pub lambda1: f64,
    /// Reconstruction weight.
    pub lambda2: f64,
    /// Share of L1 in the reconstruction loss (the rest is DSSIM).
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 1.0,
            lambda3: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("lambda1 and lambda2 must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda3) {
            return Err(Error::Config(format!("lambda3 {} outside [0, 1]", self.lambda3)));
        }
        Ok(())
    }
}

/// `f(u) = -log(1 + e^{-u})`.
pub fn f_transform(u: f64) -> f64 {
    -graph::softplus(-u)
}

// ----- SSIM ------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct SsimWindow {
    pub size: usize,
    pub sigma: f64,
    kernel: Arc<Vec<f64>>,
}

impl SsimWindow {
    pub fn new(size: usize, sigma: f64) -> Self {
        let c = (size as f64 - 1.0) / 2.0;
        let mut k: Vec<f64> = (0..size)
            .map(|i| {
                let d = i as f64 - c;
                crate::math::exp(-d * d / (2.0 * sigma * sigma))
            })
            .collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        Self {
            size,
            sigma,
            kernel: Arc::new(k),
        }
    }

    /// 11x11, σ = 1.5.
    pub fn standard() -> Self {
        Self::new(11, 1.5)
    }

    /// The standard window, shrunk (odd size, proportional σ) to fit an
    /// `h × w` image.
    pub fn fitting(h: usize, w: usize) -> Result<Self> {
        let side = h.min(w);
        if side == 0 {
            return Err(Error::Argument("SSIM on an empty image".into()));
        }
        if side >= 11 {
            return Ok(Self::standard());
        }
        let size = if side % 2 == 1 { side } else { side - 1 };
        Ok(Self::new(size, 1.5 * size as f64 / 11.0))
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// SSIM map over valid window positions for `[B, C, H, W]` inputs in
/// `[-1, 1]` (rescaled to `[0, 1]`, dynamic range 1).
pub fn ssim_map(g: &mut Graph, a: Var, b: Var, window: &SsimWindow) -> Result<Var> {
    let sa = g.shape(a).to_vec();
    if sa != g.shape(b) || sa.len() != 4 {
        return Err(shape_err("ssim", &sa, g.shape(b)));
    }
    if sa[2] < window.size || sa[3] < window.size {
        return Err(Error::Argument(format!(
            "image {}x{} smaller than the {}x{} SSIM window",
            sa[2], sa[3], window.size, window.size
        )));
    }
    let to01 = |g: &mut Graph, x: Var| {
        let y = g.add_scalar(x, 1.0);
        g.scale(y, 0.5)
    };
    let x = to01(g, a);
    let y = to01(g, b);
    let k = window.kernel.clone();
    let mx = g.separable_filter_valid(x, k.clone());
    let my = g.separable_filter_valid(y, k.clone());
    let xx = g.mul(x, x);
    let yy = g.mul(y, y);
    let xy = g.mul(x, y);
    let exx = g.separable_filter_valid(xx, k.clone());
    let eyy = g.separable_filter_valid(yy, k.clone());
    let exy = g.separable_filter_valid(xy, k);
    let mx2 = g.mul(mx, mx);
    let my2 = g.mul(my, my);
    let mxy = g.mul(mx, my);
    let vx = g.sub(exx, mx2);
    let vy = g.sub(eyy, my2);
    let cxy = g.sub(exy, mxy);
    let l_num = g.scale(mxy, 2.0);
    let l_num = g.add_scalar(l_num, SSIM_C1);
    let c_num = g.scale(cxy, 2.0);
    let c_num = g.add_scalar(c_num, SSIM_C2);
    let l_den = g.add(mx2, my2);
    let l_den = g.add_scalar(l_den, SSIM_C1);
    let c_den = g.add(vx, vy);
    let c_den = g.add_scalar(c_den, SSIM_C2);
    let num = g.mul(l_num, c_num);
    let den = g.mul(l_den, c_den);
    Ok(g.div(num, den))
}

/// Mean SSIM of two batches, as a graph node.
pub fn ssim_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let m = ssim_map(g, a, b, &SsimWindow::standard())?;
    Ok(g.mean(m))
}

fn as_batch(t: &Tensor) -> Result<Tensor> {
    match t.ndim() {
        3 => {
            let mut s = alloc::vec![1];
            s.extend_from_slice(t.shape());
            t.clone().reshape(&s)
        }
        4 => Ok(t.clone()),
        _ => Err(shape_err("ssim input", &[0, 0, 0], t.shape())),
    }
}

/// Mean SSIM of two images (`[C, H, W]` or `[B, C, H, W]`) in `[-1, 1]`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err("ssim", a.shape(), b.shape()));
    }
    let mut g = Graph::detached();
    let av = g.constant(as_batch(a)?);
    let bv = g.constant(as_batch(b)?);
    let s = ssim_var(&mut g, av, bv)?;
    Ok(g.value(s).item())
}

// ----- reconstruction ----------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct Reconstruction {
    pub loss: Var,
    /// No valid pixel: the loss is zero and carries no gradient.
    pub empty_mask: bool,
}

/// `λ3 · masked mean |a - b| + (1 - λ3) · (1 - SSIM) / 2`.
///
/// `mask [B, 1, H, W]` holds 0/1. The L1 term averages over valid pixels and
/// channels; the SSIM term averages the SSIM map over window positions whose
/// window lies entirely on valid pixels. Images smaller than 11 pixels use a
/// proportionally shrunk window.
pub fn reconstruction_loss(g: &mut Graph, a: Var, b: Var, mask: &Tensor, lambda3: f64) -> Result<Reconstruction> {
    let s = g.shape(a).to_vec();
    if s.len() != 4 || g.shape(b) != s.as_slice() {
        return Err(shape_err("reconstruction_loss", &s, g.shape(b)));
    }
    let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
    if mask.shape() != [bsz, 1, h, w] {
        return Err(shape_err("reconstruction mask", &[bsz, 1, h, w], mask.shape()));
    }
    let valid: f64 = mask.data().iter().sum();
    if valid == 0.0 {
        return Ok(Reconstruction {
            loss: g.constant(Tensor::scalar(0.0)),
            empty_mask: true,
        });
    }
    let n = h * w;
    let mut mfull = Vec::with_capacity(bsz * c * n);
    for bi in 0..bsz {
        for _ in 0..c {
            mfull.extend_from_slice(&mask.data()[bi * n..(bi + 1) * n]);
        }
    }
    let mv = g.constant(Tensor::from_vec(&s, mfull));
    let d = g.sub(a, b);
    let d = g.abs(d);
    let d = g.mul(d, mv);
    let l1 = g.sum(d);
    let l1 = g.scale(l1, 1.0 / (valid * c as f64));

    let window = SsimWindow::fitting(h, w)?;
    // window positions fully inside the valid region
    let mut mg = Graph::detached();
    let mm = mg.constant(mask.clone());
    let cover = mg.separable_filter_valid(mm, window.kernel.clone());
    let (oh, ow) = (h - window.size + 1, w - window.size + 1);
    let pos: Vec<f64> = mg.value(cover).data().iter().map(|v| if *v >= 1.0 - 1e-9 { 1.0 } else { 0.0 }).collect();
    let npos: f64 = pos.iter().sum();
    let dssim = if npos > 0.0 {
        let mut pfull = Vec::with_capacity(bsz * c * oh * ow);
        for bi in 0..bsz {
            for _ in 0..c {
                pfull.extend_from_slice(&pos[bi * oh * ow..(bi + 1) * oh * ow]);
            }
        }
        let pv = g.constant(Tensor::from_vec(&[bsz, c, oh, ow], pfull));
        let map = ssim_map(g, a, b, &window)?;
        let map = g.mul(map, pv);
        let mean = g.sum(map);
        let mean = g.scale(mean, 1.0 / (npos * c as f64));
        // (1 - ssim) / 2
        let neg = g.scale(mean, -0.5);
        Some(g.add_scalar(neg, 0.5))
    } else {
        None
    };
    let l1w = g.scale(l1, lambda3);
    let loss = match dssim {
        Some(dv) => {
            let dw = g.scale(dv, 1.0 - lambda3);
            g.add(l1w, dw)
        }
        None => l1w,
    };
    Ok(Reconstruction {
        loss,
        empty_mask: false,
    })
}

// ----- adversarial terms ------------------------------------------------------

/// `mean softplus(-real) + mean softplus(fake)`.
pub fn d_adversarial(g: &mut Graph, real: Var, fake: Var) -> Var {
    let nr = g.neg(real);
    let a = g.softplus(nr);
    let a = g.mean(a);
    let b = g.softplus(fake);
    let b = g.mean(b);
    g.add(a, b)
}

/// `mean softplus(-fake)`.
pub fn g_adversarial(g: &mut Graph, fake: Var) -> Var {
    let n = g.neg(fake);
    let s = g.softplus(n);
    g.mean(s)
}

#[derive(Clone, Copy, Debug)]
pub struct DiscLoss {
    pub total: Var,
    pub adversarial: f64,
    pub r1: f64,
}

/// One discriminator objective; `real`/`fake` are plain tensors (the fake
/// batch carries no generator gradient).
pub fn discriminator_loss(
    g: &mut Graph,
    d: &Discriminator,
    real: &Tensor,
    fake: &Tensor,
    lambda1: f64,
) -> Result<DiscLoss> {
    let rv = g.constant(real.clone());
    let fv = g.constant(fake.clone());
    let sr = d.forward(g, rv)?;
    let sf = d.forward(g, fv)?;
    let adv = d_adversarial(g, sr, sf);
    let adversarial = g.value(adv).item();
    if lambda1 == 0.0 {
        return Ok(DiscLoss {
            total: adv,
            adversarial,
            r1: 0.0,
        });
    }
    let (r1v, r1) = d.r1_term(g, real)?;
    let r1w = g.scale(r1v, lambda1);
    Ok(DiscLoss {
        total: g.add(adv, r1w),
        adversarial,
        r1,
    })
}

/// `(L_{D_s}, L_{D_I})`.
#[allow(clippy::too_many_arguments)]
pub fn stage1_d_losses(
    g: &mut Graph,
    d_s: &Discriminator,
    d_i: &Discriminator,
    real_semantics: &Tensor,
    real_images: &Tensor,
    fake_semantics: &Tensor,
    fake_images: &Tensor,
    w: &LossWeights,
) -> Result<(DiscLoss, DiscLoss)> {
    let ls = discriminator_loss(g, d_s, real_semantics, fake_semantics, w.lambda1)?;
    let li = discriminator_loss(g, d_i, real_images, fake_images, w.lambda1)?;
    Ok((ls, li))
}

#[derive(Clone, Copy, Debug)]
pub struct GenLoss {
    pub total: Var,
    pub adv_semantic: f64,
    pub adv_image: f64,
    pub reconstruction: f64,
    pub empty_mask: bool,
}

/// Inputs of the reprojection term: primary render, warped auxiliary render
/// and validity mask.
pub struct ReconInputs<'a> {
    pub primary: Var,
    pub warped: Var,
    pub mask: &'a Tensor,
}

/// `softplus(-D_s(Ŝ)) + softplus(-D_I(Î)) + λ2 · L_rec`.
pub fn stage1_g_loss(
    g: &mut Graph,
    d_s: &Discriminator,
    d_i: &Discriminator,
    fake_semantics: Var,
    fake_images: Var,
    recon: Option<ReconInputs<'_>>,
    w: &LossWeights,
) -> Result<GenLoss> {
    let ss = d_s.forward(g, fake_semantics)?;
    let si = d_i.forward(g, fake_images)?;
    let a = g_adversarial(g, ss);
    let b = g_adversarial(g, si);
    let (adv_semantic, adv_image) = (g.value(a).item(), g.value(b).item());
    let mut total = g.add(a, b);
    let mut reconstruction = 0.0;
    let mut empty_mask = false;
    if let Some(r) = recon {
        if w.lambda2 != 0.0 {
            let rec = reconstruction_loss(g, r.primary, r.warped, r.mask, w.lambda3)?;
            reconstruction = g.value(rec.loss).item();
            empty_mask = rec.empty_mask;
            let rw = g.scale(rec.loss, w.lambda2);
            total = g.add(total, rw);
        }
    }
    Ok(GenLoss {
        total,
        adv_semantic,
        adv_image,
        reconstruction,
        empty_mask,
    })
}

/// Generator objective of the second stage: `softplus(-D_s(Ŝ)) + softplus(-D_p(P̂))`.
pub fn stage2_g_loss(
    g: &mut Graph,
    d_s: &Discriminator,
    d_p: &Discriminator,
    fake_semantics: Var,
    fake_drawings: Var,
) -> Result<GenLoss> {
    let ss = d_s.forward(g, fake_semantics)?;
    let sp = d_p.forward(g, fake_drawings)?;
    let a = g_adversarial(g, ss);
    let b = g_adversarial(g, sp);
    let (adv_semantic, adv_image) = (g.value(a).item(), g.value(b).item());
    Ok(GenLoss {
        total: g.add(a, b),
        adv_semantic,
        adv_image,
        reconstruction: 0.0,
        empty_mask: false,
    })
}

/// `(L_{D_p}, L_G^{(2)})`. The first is built in `gd` (drawing discriminator
/// trainable), the second in `gg` (generator trainable).
#[allow(clippy::too_many_arguments)]
pub fn stage2_losses(
    gd: &mut Graph,
    gg: &mut Graph,
    d_p: &Discriminator,
    d_s: &Discriminator,
    real_drawings: &Tensor,
    fake_drawings_detached: &Tensor,
    fake_semantics: Var,
    fake_drawings: Var,
    w: &LossWeights,
) -> Result<(DiscLoss, GenLoss)> {
    let ld = discriminator_loss(gd, d_p, real_drawings, fake_drawings_detached, w.lambda1)?;
    let lg = stage2_g_loss(gg, d_s, d_p, fake_semantics, fake_drawings)?;
    Ok((ld, lg))
}
