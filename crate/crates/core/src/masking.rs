//! Random block masks for the student's corrupted view.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// Side length of a square masked block, in pixels.
    pub block_size: usize,
    /// Fraction of blocks masked per sample.
    pub mask_ratio: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            block_size: 16,
            mask_ratio: 0.5,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.block_size == 0 || image_size % self.block_size != 0 {
            return Err(Error::config(
                "mask.block_size",
                format!(
                    "{} does not divide the image size {image_size}",
                    self.block_size
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::config(
                "mask.mask_ratio",
                format!("{} is outside [0, 1]", self.mask_ratio),
            ));
        }
        Ok(())
    }

    /// Number of masked blocks: `round_half_even(ratio * total)`.
    pub fn masked_count(&self, total_blocks: usize) -> usize {
        let x = self.mask_ratio * total_blocks as f64;
        let r = x.round_ties_even();
        (r as usize).min(total_blocks)
    }
}

/// Block grid; `true` marks a masked block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub block_size: usize,
    pub blocks_per_side: usize,
    pub grid: Vec<bool>,
}

impl Mask {
    pub fn empty(image_size: usize, block_size: usize) -> Self {
        let side = image_size / block_size;
        Self {
            block_size,
            blocks_per_side: side,
            grid: vec![false; side * side],
        }
    }

    pub fn masked_blocks(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    pub fn image_size(&self) -> usize {
        self.block_size * self.blocks_per_side
    }

    pub fn set(&mut self, by: usize, bx: usize, masked: bool) {
        self.grid[by * self.blocks_per_side + bx] = masked;
    }
}

pub fn generate_mask<R: Rng + ?Sized>(
    config: &MaskConfig,
    image_size: usize,
    rng: &mut R,
) -> Result<Mask> {
    config.validate(image_size)?;
    let mut mask = Mask::empty(image_size, config.block_size);
    let total = mask.grid.len();
    for idx in sample(rng, total, config.masked_count(total)) {
        mask.grid[idx] = true;
    }
    Ok(mask)
}

pub fn apply_mask(image: &GrayImage, mask: &Mask) -> Result<GrayImage> {
    let side = mask.image_size();
    if image.height != side || image.width != side {
        return Err(Error::shape(
            format!("{side}x{side} image"),
            format!("{}x{}", image.height, image.width),
        ));
    }
    let mut out = image.clone();
    let b = mask.block_size;
    for by in 0..mask.blocks_per_side {
        for bx in 0..mask.blocks_per_side {
            if !mask.grid[by * mask.blocks_per_side + bx] {
                continue;
            }
            for y in by * b..(by + 1) * b {
                out.pixels[y * side + bx * b..y * side + (bx + 1) * b].fill(0.0);
            }
        }
    }
    Ok(out)
}
