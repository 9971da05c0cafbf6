//! Object and target masks.
//!
//! The object mask marks the source object's footprint and comes from a
//! saliency matte, a prompt-driven segmenter, or the user. The target mask is
//! harvested from the target branch's cross-attention to the prompt's content
//! tokens during synthesis. Both meet in the blend mask that decides which
//! latent cells the target branch may change.

mod binary;
mod prompted;
mod saliency;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::PixelImage;
use crate::scalar::Scalar;

pub use binary::BinaryMask;
pub use prompted::ColorKeywordSegmenter;
pub use saliency::BorderContrastSaliency;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskProvenance {
    Saliency,
    TextPrompted,
    UserSupplied,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskOptions {
    /// Minimum fraction of set pixels for a valid object mask.
    pub min_area: f64,
    /// Components smaller than this fraction of the image are dropped.
    pub min_component: f64,
    /// Pixel-to-latent downsampling factor.
    pub latent_factor: usize,
    /// Dilation of the blend mask, in latent cells.
    pub dilation_radius: usize,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self {
            min_area: 0.005,
            min_component: 0.001,
            latent_factor: 8,
            dilation_radius: 2,
        }
    }
}

/// Binary footprint of the source object.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectMask {
    pub pixel_mask: BinaryMask,
    pub latent_mask: BinaryMask,
    pub provenance: MaskProvenance,
    pub dilation_radius: usize,
}

impl ObjectMask {
    /// Validates the minimum area and derives the latent mask.
    pub fn new(pixel_mask: BinaryMask, provenance: MaskProvenance, opts: &MaskOptions) -> Result<Self> {
        let coverage = pixel_mask.coverage();
        if coverage < opts.min_area {
            return Err(Error::EmptyMask {
                coverage,
                min_area: opts.min_area,
            });
        }
        let (h, w) = pixel_mask.dim();
        let latent_mask = downsample_mask(&pixel_mask, h / opts.latent_factor.max(1), w / opts.latent_factor.max(1))?;
        Ok(Self {
            pixel_mask,
            latent_mask,
            provenance,
            dilation_radius: opts.dilation_radius,
        })
    }
}

/// Area-average downsample with the `>= 0.5` tie rule.
pub fn downsample_mask(mask: &BinaryMask, rows: usize, cols: usize) -> Result<BinaryMask> {
    mask.downsample(rows, cols)
}

/// Soft foreground matte in `[0, 1]` with the image's spatial size.
pub trait SaliencyMatting: Send + Sync {
    fn matte(&self, image: &PixelImage<f32>) -> Result<Array2<f32>>;
}

/// Soft mask of the object described by `prompt`.
pub trait PromptedSegmenter: Send + Sync {
    fn segment(&self, image: &PixelImage<f32>, prompt: &str) -> Result<Array2<f32>>;
}

/// Object-mask extraction with pluggable backends.
pub struct MaskExtractor {
    saliency: Box<dyn SaliencyMatting>,
    prompted: Option<Box<dyn PromptedSegmenter>>,
    options: MaskOptions,
}

impl Default for MaskExtractor {
    fn default() -> Self {
        Self::new(
            Box::new(BorderContrastSaliency::default()),
            Some(Box::new(ColorKeywordSegmenter::default())),
            MaskOptions::default(),
        )
    }
}

impl MaskExtractor {
    pub fn new(
        saliency: Box<dyn SaliencyMatting>,
        prompted: Option<Box<dyn PromptedSegmenter>>,
        options: MaskOptions,
    ) -> Self {
        Self {
            saliency,
            prompted,
            options,
        }
    }

    pub fn options(&self) -> &MaskOptions {
        &self.options
    }

    /// Saliency path without a prompt, prompted segmentation with one.
    pub fn extract<T: Scalar>(&self, image: &PixelImage<T>, object_prompt: Option<&str>) -> Result<ObjectMask> {
        let (h, w) = (image.height(), image.width());
        let f = self.options.latent_factor;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::invalid(format!(
                "image {w}x{h} is not divisible by the latent factor {f}"
            )));
        }
        let image = image.cast::<f32>();
        let prompt = object_prompt.map(str::trim).filter(|p| !p.is_empty());
        let (soft, provenance) = match prompt {
            None => (self.saliency.matte(&image)?, MaskProvenance::Saliency),
            Some(p) => {
                let seg = self.prompted.as_ref().ok_or_else(|| {
                    Error::invalid("no prompted segmentation backend configured")
                })?;
                (seg.segment(&image, p)?, MaskProvenance::TextPrompted)
            }
        };
        if soft.dim() != (h, w) {
            return Err(Error::Internal(format!(
                "matte has shape {:?}, expected {:?}",
                soft.dim(),
                (h, w)
            )));
        }
        let binary = BinaryMask::new(soft.mapv(|a| a >= 0.5));
        let min_cells = (self.options.min_component * (h * w) as f64).ceil() as usize;
        let cleaned = binary.remove_small_components(min_cells).fill_holes();
        ObjectMask::new(cleaned, provenance, &self.options)
    }

    /// Validates a user-drawn mask without running either extractor.
    pub fn from_user_mask(&self, pixel_mask: BinaryMask) -> Result<ObjectMask> {
        ObjectMask::new(pixel_mask, MaskProvenance::UserSupplied, &self.options)
    }
}

/// Cross-attention probabilities captured at one site and step.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionMap {
    /// Query grid `(rows, cols)`.
    pub grid: (usize, usize),
    /// Per head, `(rows * cols, key_tokens)`.
    pub heads: Vec<Array2<f64>>,
}

/// Footprint of the generated object.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMask {
    /// Max-normalized to 1 (all zeros when nothing was attended).
    pub soft_map: Array2<f64>,
    pub binary: BinaryMask,
    pub token_indices: Vec<usize>,
    pub threshold: f64,
}

pub const DEFAULT_TARGET_THRESHOLD: f64 = 0.5;

/// Averages attention to `token_indices` over heads, maps and tokens, then
/// max-normalizes and thresholds with `>=`.
pub fn aggregate_target_mask(
    maps: &[CrossAttentionMap],
    token_indices: &[usize],
    threshold: f64,
) -> Result<TargetMask> {
    if token_indices.is_empty() {
        return Err(Error::invalid("target mask needs at least one token index"));
    }
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("no cross-attention maps to aggregate"))?;
    let (rows, cols) = first.grid;
    let mut acc = Array2::<f64>::zeros((rows, cols));
    let mut count = 0usize;
    for map in maps {
        if map.grid != first.grid {
            return Err(Error::invalid("cross-attention maps differ in resolution"));
        }
        for head in &map.heads {
            if head.nrows() != rows * cols {
                return Err(Error::invalid("cross-attention map rows do not match its grid"));
            }
            if let Some(&bad) = token_indices.iter().find(|&&k| k >= head.ncols()) {
                return Err(Error::invalid(format!("token index {bad} out of range")));
            }
            for q in 0..rows * cols {
                let v: f64 = token_indices.iter().map(|&k| head[[q, k]]).sum::<f64>()
                    / token_indices.len() as f64;
                acc[[q / cols, q % cols]] += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("cross-attention maps carry no heads"));
    }
    acc.mapv_inplace(|v| v / count as f64);
    let max = acc.fold(0.0f64, |m, &v| m.max(v));
    if max > 0.0 {
        acc.mapv_inplace(|v| v / max);
    }
    let binary = BinaryMask::new(acc.mapv(|v| v >= threshold));
    Ok(TargetMask {
        soft_map: acc,
        binary,
        token_indices: token_indices.to_vec(),
        threshold,
    })
}

/// Blend region: `dilate(object_latent ∪ target_at_latent_res, radius)`.
pub fn fuse_blend_mask(
    object_latent: &BinaryMask,
    target: Option<&TargetMask>,
    radius: usize,
) -> Result<BinaryMask> {
    let (rows, cols) = object_latent.dim();
    let fused = match target {
        Some(t) => object_latent.union(&t.binary.upsample(rows, cols)?)?,
        None => object_latent.clone(),
    };
    Ok(fused.dilate(radius))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_head(grid: (usize, usize), rows: &[[f64; 2]]) -> CrossAttentionMap {
        let mut a = Array2::zeros((grid.0 * grid.1, 2));
        for (q, r) in rows.iter().enumerate() {
            a[[q, 0]] = r[0];
            a[[q, 1]] = r[1];
        }
        CrossAttentionMap { grid, heads: vec![a] }
    }

    #[test]
    fn uniform_map_is_all_ones() {
        let m = one_head((2, 2), &[[0.5, 0.5]; 4]);
        let t = aggregate_target_mask(&[m], &[1], 0.3).unwrap();
        assert!(t.soft_map.iter().all(|&v| v == 1.0));
        assert_eq!(t.binary.area(), 4);
    }

    #[test]
    fn two_map_average_normalize_threshold() {
        // token 1 values: map a {0.1, 0.6}, map b {0.3, 1.0} -> mean {0.2, 0.8}
        let a = one_head((1, 2), &[[0.9, 0.1], [0.4, 0.6]]);
        let b = one_head((1, 2), &[[0.7, 0.3], [0.0, 1.0]]);
        let t = aggregate_target_mask(&[a, b], &[1], 0.3).unwrap();
        assert!((t.soft_map[[0, 0]] - 0.25).abs() < 1e-12);
        assert!((t.soft_map[[0, 1]] - 1.0).abs() < 1e-12);
        assert!(!t.binary.get(0, 0) && t.binary.get(0, 1));
    }

    #[test]
    fn empty_token_indices_rejected() {
        let m = one_head((1, 1), &[[1.0, 0.0]]);
        assert!(matches!(
            aggregate_target_mask(&[m], &[], 0.3),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn user_mask_bypasses_extractors() {
        let ex = MaskExtractor::default();
        let m = BinaryMask::from_fn(64, 64, |y, x| (16..48).contains(&y) && (16..48).contains(&x));
        let om = ex.from_user_mask(m.clone()).unwrap();
        assert_eq!(om.provenance, MaskProvenance::UserSupplied);
        assert_eq!(om.pixel_mask, m);
        assert_eq!(om.latent_mask.dim(), (8, 8));
        assert_eq!(om.latent_mask.area(), 16);
        assert!(matches!(
            ex.from_user_mask(BinaryMask::filled(64, 64, false)),
            Err(Error::EmptyMask { .. })
        ));
    }

    #[test]
    fn blend_mask_contains_both_footprints() {
        let obj = BinaryMask::from_fn(16, 16, |y, x| y < 4 && x < 4);
        let target = TargetMask {
            soft_map: Array2::zeros((4, 4)),
            binary: BinaryMask::from_fn(4, 4, |y, x| y == 3 && x == 3),
            token_indices: vec![1],
            threshold: 0.3,
        };
        let blend = fuse_blend_mask(&obj, Some(&target), 2).unwrap();
        assert!(blend.get(0, 0) && blend.get(15, 15) && blend.get(5, 1));
        assert!(!blend.get(8, 0));
    }
}
