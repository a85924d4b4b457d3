//! Reconstructing a directory of images from a checkpoint.

use std::path::Path;

use super::checkpoint::Checkpoint;
use super::data::{self, write_ppm};
use super::train::{Trainer, GRID_IMAGES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReconstructOptions {
    /// Centre-crop and resize inputs whose size differs from the model's;
    /// otherwise such inputs are an error.
    pub resize: bool,
}

/// Writes `<stem>.ppm` (original | reconstruction) for every image in
/// `input_dir`, plus `grid.ppm` with the first four originals followed by
/// their reconstructions. Returns the number of images processed.
pub fn reconstruct_dir(
    checkpoint: &Path,
    input_dir: &Path,
    output_dir: &Path,
    options: ReconstructOptions,
) -> Result<usize> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut trainer = Trainer::from_checkpoint(&ck)?;
    let size = ck.spec.model.image_size;
    let files = data::list_images(input_dir)?;
    if files.is_empty() {
        log::warn!("no images in {}", input_dir.display());
        return Ok(0);
    }
    std::fs::create_dir_all(output_dir)?;
    let mut originals = Vec::with_capacity(files.len());
    for path in &files {
        let img = data::read_image(path)?;
        let t = if img.width == size && img.height == size {
            data::to_tensor(&img)
        } else if options.resize {
            data::prepare(&img, size)?
        } else {
            return Err(Error::config(format!(
                "{} is {}x{} but the checkpoint expects {size}x{size}",
                path.display(),
                img.width,
                img.height
            )));
        };
        originals.push(t);
    }
    let recons = trainer.reconstruct(&originals)?;
    for ((path, orig), recon) in files.iter().zip(&originals).zip(&recons) {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy();
        let pair = data::tile(&[vec![orig.clone(), recon.clone()]])?;
        write_ppm(&output_dir.join(format!("{stem}.ppm")), &pair)?;
    }
    let k = GRID_IMAGES.min(originals.len());
    let mut row: Vec<Tensor> = originals[..k].to_vec();
    row.extend_from_slice(&recons[..k]);
    write_ppm(&output_dir.join("grid.ppm"), &data::tile(&[row])?)?;
    Ok(files.len())
}
