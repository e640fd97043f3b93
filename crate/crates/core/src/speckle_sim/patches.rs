use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::GrayImage;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Sliding-window patch layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub stride: usize,
    /// Keep at most this many patches (after shuffling, when enabled).
    pub max_patches: Option<usize>,
    /// Shuffle the anchor list with this seed before truncation.
    pub shuffle_seed: Option<u64>,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            patch_size: 65,
            stride: 32,
            max_patches: None,
            shuffle_seed: None,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::invalid("patch size must be at least 1"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("patch stride must be at least 1"));
        }
        Ok(())
    }
}

/// Top-left anchors of every patch that fits entirely inside a
/// `height x width` image, in row-major order. Windows that would cross
/// the border are dropped, never padded.
pub fn patch_positions(height: usize, width: usize, spec: &PatchSpec) -> Result<Vec<(usize, usize)>> {
    spec.validate()?;
    if spec.patch_size > height || spec.patch_size > width {
        return Err(Error::invalid(format!(
            "patch size {} exceeds {height}x{width} image",
            spec.patch_size
        )));
    }
    let rows = (height - spec.patch_size) / spec.stride + 1;
    let cols = (width - spec.patch_size) / spec.stride + 1;
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push((i * spec.stride, j * spec.stride));
        }
    }
    if let Some(seed) = spec.shuffle_seed {
        out.shuffle(&mut rng_from_seed(seed));
    }
    if let Some(max) = spec.max_patches {
        out.truncate(max);
    }
    Ok(out)
}

pub fn extract_patches(image: &GrayImage, spec: &PatchSpec) -> Result<Vec<GrayImage>> {
    patch_positions(image.height(), image.width(), spec)?
        .into_iter()
        .map(|(r, c)| image.crop(r, c, spec.patch_size, spec.patch_size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> GrayImage {
        GrayImage::from_fn(h, w, |r, c| (r * w + c) as f64).unwrap()
    }

    fn spec(patch_size: usize, stride: usize) -> PatchSpec {
        PatchSpec {
            patch_size,
            stride,
            max_patches: None,
            shuffle_seed: None,
        }
    }

    #[test]
    fn grid_count_matches_index_arithmetic() {
        let img = ramp(256, 256);
        let patches = extract_patches(&img, &spec(65, 64)).unwrap();
        assert_eq!(patches.len(), 9);
        let truncated = PatchSpec {
            max_patches: Some(4),
            ..spec(65, 64)
        };
        assert_eq!(extract_patches(&img, &truncated).unwrap().len(), 4);
    }

    #[test]
    fn exact_fit_yields_single_patch() {
        let img = ramp(65, 65);
        for stride in [1, 7, 65, 1000] {
            let patches = extract_patches(&img, &spec(65, stride)).unwrap();
            assert_eq!(patches.len(), 1);
            assert_eq!(patches[0], img);
        }
    }

    #[test]
    fn oversize_patch_is_rejected() {
        let img = ramp(30, 40);
        assert!(matches!(
            extract_patches(&img, &spec(31, 1)),
            Err(Error::InvalidArgument(_))
        ));
        assert!(extract_patches(&img, &spec(5, 0)).is_err());
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let mut s = spec(8, 3);
        let plain = patch_positions(40, 33, &s).unwrap();
        s.shuffle_seed = Some(4);
        let shuffled = patch_positions(40, 33, &s).unwrap();
        assert_ne!(plain, shuffled);
        let mut sorted = shuffled.clone();
        sorted.sort();
        assert_eq!(sorted, plain);
        assert_eq!(shuffled, patch_positions(40, 33, &s).unwrap());
    }

    proptest! {
        #[test]
        fn patches_are_verbatim_sub_blocks(
            h in 3usize..40, w in 3usize..40, size in 1usize..12, stride in 1usize..9, seed in any::<u64>()
        ) {
            prop_assume!(size <= h && size <= w);
            let img = ramp(h, w);
            let s = PatchSpec { patch_size: size, stride, max_patches: None, shuffle_seed: Some(seed) };
            let anchors = patch_positions(h, w, &s).unwrap();
            let patches = extract_patches(&img, &s).unwrap();
            prop_assert_eq!(anchors.len(), patches.len());
            for ((r0, c0), p) in anchors.iter().zip(&patches) {
                for r in 0..size {
                    for c in 0..size {
                        prop_assert_eq!(p.get(r, c), img.data()[(r0 + r) * w + c0 + c]);
                    }
                }
            }
        }
    }
}
