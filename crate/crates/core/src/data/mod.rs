//! Synthetic manipulated images, augmentation, attacks and on-disk datasets.

pub mod attacks;
pub mod augment;
pub mod generate;
pub mod io;

pub use attacks::{apply_attack, AttackSpec};
pub use augment::augment;
pub use generate::{generate, GenParams};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One manipulated image with its ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ManipSample {
    /// `[3,H,W]`, values in `[0,1]`.
    pub image: Tensor,
    /// `[1,H,W]`, values in `{0,1}`.
    pub mask: Tensor,
    pub kind: String,
    pub seed: u64,
}

impl ManipSample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }

    pub fn mask_fraction(&self) -> f64 {
        self.mask.sum() / self.mask.numel() as f64
    }
}

/// Stacks images and masks into `[B,3,H,W]` / `[B,1,H,W]` batches.
pub fn stack(samples: &[&ManipSample]) -> Result<(Tensor, Tensor)> {
    let Some(first) = samples.first() else {
        return Err(Error::dim("stack", "empty batch"));
    };
    let (h, w) = first.size();
    let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.size() != (h, w) {
            return Err(Error::dim("stack", format!("sample {:?} vs {:?}", s.size(), (h, w))));
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    let b = samples.len();
    Ok((Tensor::new(&[b, 3, h, w], images)?, Tensor::new(&[b, 1, h, w], masks)?))
}

/// Stacks bare images `[3,H,W]` into a batch.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::dim("stack_images", "empty batch"));
    };
    let shape = first.shape().to_vec();
    let mut data: Vec<Real> = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::dim("stack_images", format!("{:?} vs {shape:?}", img.shape())));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}
