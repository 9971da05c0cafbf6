//! End-to-end extraction: mask, encode, invert, optimize nulls.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, LatentImage};
use crate::error::{Error, Result};
use crate::image::PixelImage;
use crate::inversion::{
    ddim_invert, optimize_null_embeddings, InversionRecord, NullOptimizationOptions, StepReport,
};
use crate::masks::{BinaryMask, MaskExtractor, ObjectMask};
use crate::progress::{reborrow, report, Phase, ProgressFn};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionOptions {
    pub num_inference_steps: usize,
    pub guidance_scale: f64,
    pub null_optimization: NullOptimizationOptions,
    /// Records below this reconstruction PSNR (dB) are not usable for edits.
    pub min_reconstruction_psnr: f64,
}

impl Default for ExtractionOptions {
    fn default() -> Self {
        Self {
            num_inference_steps: 50,
            guidance_scale: 7.5,
            null_optimization: NullOptimizationOptions::default(),
            min_reconstruction_psnr: 25.0,
        }
    }
}

/// How the object mask is obtained.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskSource {
    Saliency,
    Prompted(String),
    User(BinaryMask),
}

impl MaskSource {
    pub fn from_prompt(object_prompt: Option<&str>) -> Self {
        match object_prompt.map(str::trim) {
            Some(p) if !p.is_empty() => MaskSource::Prompted(p.to_string()),
            _ => MaskSource::Saliency,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Extraction<T> {
    pub record: InversionRecord<T>,
    pub steps: Vec<StepReport>,
    /// Latent reached by guided replay with the optimized embeddings.
    pub reconstruction: LatentImage<T>,
}

/// Letterboxes an arbitrary image to the backbone's working resolution.
pub fn prepare_image<T: Scalar, B: Backbone<T> + ?Sized>(backbone: &B, image: &PixelImage<T>) -> PixelImage<T> {
    let size = backbone.spec().working_resolution;
    if image.height() == size && image.width() == size {
        image.clone()
    } else {
        image.letterbox(size)
    }
}

pub fn object_mask<T: Scalar>(
    extractor: &MaskExtractor,
    image: &PixelImage<T>,
    source: &MaskSource,
) -> Result<ObjectMask> {
    match source {
        MaskSource::Saliency => extractor.extract(image, None),
        MaskSource::Prompted(p) => extractor.extract(image, Some(p)),
        MaskSource::User(m) => extractor.from_user_mask(m.clone()),
    }
}

/// Runs the extraction phase on an image already at working resolution.
///
/// The mask comes first so an unusable image fails before the expensive
/// inversion. The returned record carries its reconstruction PSNR; callers
/// decide whether it clears `min_reconstruction_psnr`.
pub fn extract<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    extractor: &MaskExtractor,
    image: &PixelImage<T>,
    caption: &str,
    mask_source: &MaskSource,
    opts: &ExtractionOptions,
    mut progress: Option<ProgressFn<'_>>,
) -> Result<Extraction<T>> {
    let size = backbone.spec().working_resolution;
    if image.height() != size || image.width() != size {
        return Err(Error::invalid(format!(
            "image is {}x{}, expected {size}x{size}",
            image.width(),
            image.height()
        )));
    }
    if opts.guidance_scale < 1.0 {
        return Err(Error::invalid(format!(
            "null optimization needs guidance scale >= 1, got {}",
            opts.guidance_scale
        )));
    }
    let mask = object_mask(extractor, image, mask_source)?;
    report(&mut progress, Phase::Masking, 1, 1)?;

    let latent = backbone.encode_image(image)?;
    let schedule = backbone.make_schedule(opts.num_inference_steps)?;
    let cond = backbone.encode_text(caption);
    let trajectory = ddim_invert(backbone, &latent, &cond, &schedule, reborrow(&mut progress))?;
    let (nulls, psnr) = optimize_null_embeddings(
        backbone,
        &trajectory,
        image,
        opts.guidance_scale,
        &opts.null_optimization,
        reborrow(&mut progress),
    )?;
    log::info!("extraction finished: reconstruction {psnr:.2} dB");
    Ok(Extraction {
        record: InversionRecord {
            trajectory,
            null_embeddings: nulls.null_embeddings,
            guidance_scale: opts.guidance_scale,
            reconstruction_psnr: psnr,
            object_mask: Some(mask),
        },
        steps: nulls.steps,
        reconstruction: nulls.final_latent,
    })
}
