//! Dataset directories: `images/{id}.png` (RGB) next to `masks/{id}.png`
//! (labels), matched by file stem.

use std::path::{Path, PathBuf};

use sage_core::data::{Dataset, Sample};

use crate::error::{Error, Result};
use crate::imageio;

pub const IMAGES: &str = "images";
pub const MASKS: &str = "masks";

/// Sorted PNG files directly inside `dir`.
pub fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let images = png_files(&dir.join(IMAGES))?;
    if images.is_empty() {
        return Err(Error::Config(format!("no images in {}", dir.join(IMAGES).display())));
    }
    let mut samples = Vec::with_capacity(images.len());
    for path in images {
        let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
        let image = imageio::load_rgb(&path)?;
        let mask_path = dir.join(MASKS).join(format!("{id}.png"));
        let (labels, h, w) = imageio::load_labels(&mask_path)?;
        if image.shape()[1..] != [h, w] {
            return Err(Error::format(&mask_path, "mask size differs from its image"));
        }
        samples.push(Sample { id, image, labels });
    }
    Ok(Dataset::new(samples)?)
}

pub fn save(dir: &Path, data: &Dataset) -> Result<()> {
    for s in &data.samples {
        let (h, w) = s.hw();
        imageio::save_rgb(&dir.join(IMAGES).join(format!("{}.png", s.id)), &s.image)?;
        imageio::save_labels(&dir.join(MASKS).join(format!("{}.png", s.id)), &s.labels, h, w)?;
    }
    Ok(())
}
