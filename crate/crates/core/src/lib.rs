//! Training-free concept transfer on latent diffusion models.
//!
//! The pipeline has two phases. *Extraction* inverts a source photograph
//! into a DDIM noise trajectory, optimizes one unconditional embedding per
//! step so guided sampling replays the source, and segments the source
//! object. *Synthesis* then runs a source branch and a target branch side by
//! side: the target branch attends into the source branch's self-attention
//! keys and values with a fade-in weight, restricted to the object
//! footprint, while latent blending pins the background.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision used by the service and CLI.

pub mod backbone;
pub mod error;
pub mod fixtures;
pub mod image;
pub mod inversion;
pub mod masks;
pub mod pipeline;
pub mod progress;
pub mod scalar;
pub mod store;
pub mod transfer;

pub use backbone::reference::{ReferenceBackbone, ReferenceConfig};
pub use backbone::{
    AttentionCall, AttentionController, AttentionKind, AttentionSite, Backbone, BackboneSpec,
    Branch, LatentImage, NoisePredictor, NoiseSchedule, PassThrough, TextEmbedding,
};
pub use error::{Error, Result};
pub use image::PixelImage;
pub use inversion::{InversionRecord, LatentTrajectory, NullOptimizationOptions};
pub use masks::{BinaryMask, MaskExtractor, ObjectMask, TargetMask};
pub use pipeline::{ExtractionOptions, MaskSource};
pub use progress::{Phase, Progress};
pub use scalar::Scalar;
pub use transfer::{AttentionControlConfig, EditRequest, EditResult};

/// Precision used by the service and CLI.
pub type Real = f32;
pub type Image = PixelImage<Real>;
pub type Latent = LatentImage<Real>;
pub type Embedding = TextEmbedding<Real>;
pub type Record = InversionRecord<Real>;
pub type Edit = EditResult<Real>;
pub type Model = ReferenceBackbone<Real>;

/// Double-precision variants, used by numerical tests.
pub type Image64 = PixelImage<f64>;
pub type Record64 = InversionRecord<f64>;
pub type Model64 = ReferenceBackbone<f64>;
