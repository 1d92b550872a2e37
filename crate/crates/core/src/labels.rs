//! The 19-class face-parsing taxonomy and semantic map helpers.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 19;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "background", "skin", "nose", "eye_g", "l_eye", "r_eye", "l_brow", "r_brow", "l_ear", "r_ear", "mouth", "u_lip",
    "l_lip", "hair", "hat", "ear_r", "neck_l", "neck", "cloth",
];

/// Display colours, indexed by class.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0, 0, 0],
    [204, 0, 0],
    [76, 153, 0],
    [204, 204, 0],
    [51, 51, 255],
    [204, 0, 204],
    [0, 255, 255],
    [255, 204, 204],
    [102, 51, 0],
    [255, 0, 0],
    [102, 204, 0],
    [255, 255, 0],
    [0, 0, 153],
    [0, 0, 204],
    [255, 51, 153],
    [0, 204, 204],
    [0, 51, 0],
    [255, 153, 51],
    [0, 204, 0],
];

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|n| *n == name)
}

/// A `19 × H × W` map holding either raw logits or per-pixel probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticMap {
    pub values: Tensor,
    pub normalized: bool,
}

impl SemanticMap {
    pub fn from_logits(values: Tensor) -> Result<Self> {
        Self::check(&values)?;
        Ok(Self {
            values,
            normalized: false,
        })
    }

    pub fn from_probs(values: Tensor) -> Result<Self> {
        Self::check(&values)?;
        Ok(Self {
            values,
            normalized: true,
        })
    }

    fn check(values: &Tensor) -> Result<()> {
        if values.ndim() != 3 || values.shape()[0] != NUM_CLASSES {
            return Err(shape_err("SemanticMap", &[NUM_CLASSES, 0, 0], values.shape()));
        }
        Ok(())
    }

    /// Hard one-hot map from a label image.
    pub fn from_labels(labels: &[u8], h: usize, w: usize) -> Result<Self> {
        Ok(Self {
            values: one_hot(labels, h, w)?,
            normalized: true,
        })
    }

    pub fn hw(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    /// Per-pixel softmax (no-op if already normalized).
    pub fn normalize(&self) -> SemanticMap {
        if self.normalized {
            return self.clone();
        }
        let (h, w) = self.hw();
        let x = self.values.clone().reshape(&[1, NUM_CLASSES, h, w]).unwrap();
        let y = graph::softmax_channels(&x).reshape(&[NUM_CLASSES, h, w]).unwrap();
        SemanticMap {
            values: y,
            normalized: true,
        }
    }

    pub fn argmax(&self) -> Vec<u8> {
        argmax_channels(&self.values)
    }

    /// Largest deviation of a per-pixel channel sum from 1 (normalized maps).
    pub fn simplex_error(&self) -> f64 {
        simplex_error(&self.normalize().values)
    }
}

/// `[H·W]` labels → `[19, H, W]` one-hot.
pub fn one_hot(labels: &[u8], h: usize, w: usize) -> Result<Tensor> {
    if labels.len() != h * w {
        return Err(shape_err("one_hot", &[h * w], &[labels.len()]));
    }
    let n = h * w;
    let mut out = vec![0.0; NUM_CLASSES * n];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= NUM_CLASSES {
            return Err(Error::Argument(alloc::format!("label {l} outside 0..{NUM_CLASSES}")));
        }
        out[l as usize * n + i] = 1.0;
    }
    Tensor::new(&[NUM_CLASSES, h, w], out)
}

/// Channel argmax of `[C, H, W]` (first maximum wins).
pub fn argmax_channels(x: &Tensor) -> Vec<u8> {
    let c = x.shape()[0];
    let n = x.shape()[1] * x.shape()[2];
    let d = x.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for ch in 1..c {
                if d[ch * n + i] > d[best * n + i] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect()
}

/// `max |Σ_c x[c, i] - 1|` over pixels of `[C, H, W]` or `[B, C, H, W]`,
/// or infinity if any entry is negative.
pub fn simplex_error(x: &Tensor) -> f64 {
    let s = x.shape();
    let (bsz, c, n) = if s.len() == 4 { (s[0], s[1], s[2] * s[3]) } else { (1, s[0], s[1] * s[2]) };
    let d = x.data();
    if d.iter().any(|v| *v < 0.0) {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for b in 0..bsz {
        for i in 0..n {
            let sum: f64 = (0..c).map(|ch| d[(b * c + ch) * n + i]).sum();
            worst = worst.max(libm::fabs(sum - 1.0));
        }
    }
    worst
}

/// RGB visualisation of a label image.
pub fn colorize(labels: &[u8]) -> Vec<u8> {
    labels.iter().flat_map(|l| PALETTE[(*l as usize).min(NUM_CLASSES - 1)]).collect()
}
