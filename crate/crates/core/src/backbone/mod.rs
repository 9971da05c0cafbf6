//! Facade over a latent text-to-image diffusion model.
//!
//! Everything above this module talks to the model through [`NoisePredictor`]
//! and [`Backbone`]. Attention sites are exposed to an optional
//! [`AttentionController`] so that editing logic can rewrite attention
//! outputs without the model knowing about branches or masks.

pub mod attention;
pub mod reference;
pub mod schedule;
pub mod text;

use ndarray::{Array2, Array3, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::PixelImage;
use crate::scalar::Scalar;

pub use schedule::{make_schedule, NoiseLevel, NoiseSchedule};

/// Encoded prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding<T> {
    pub tokens: Vec<u32>,
    /// `(sequence_length, embed_dim)`.
    pub embedding: Array2<T>,
    pub prompt_text: String,
    pub is_null: bool,
}

impl<T: Scalar> TextEmbedding<T> {
    /// Same tokens and prompt with a replaced embedding matrix. Used for the
    /// optimized unconditional embeddings.
    pub fn with_embedding(&self, embedding: Array2<T>) -> Self {
        Self {
            tokens: self.tokens.clone(),
            embedding,
            prompt_text: self.prompt_text.clone(),
            is_null: self.is_null,
        }
    }
}

/// Latent-space image, `(channels, height / f, width / f)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentImage<T> {
    pub data: Array3<T>,
    pub pixel_height: usize,
    pub pixel_width: usize,
    pub timestep: Option<usize>,
}

impl<T: Scalar> LatentImage<T> {
    pub fn new(data: Array3<T>, pixel_height: usize, pixel_width: usize) -> Self {
        Self {
            data,
            pixel_height,
            pixel_width,
            timestep: None,
        }
    }

    pub fn with_data(&self, data: Array3<T>, timestep: Option<usize>) -> Self {
        Self {
            data,
            pixel_height: self.pixel_height,
            pixel_width: self.pixel_width,
            timestep,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &LatentImage<T>) -> f64 {
        Zip::from(&self.data)
            .and(&other.data)
            .fold(0.0f64, |m, &a, &b| m.max((a - b).abs().as_f64()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    SelfAttention,
    CrossAttention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Source,
    Target,
}

/// Address of one attention evaluation inside a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AttentionSite {
    /// Position among sites of the same kind, in traversal order.
    pub layer_index: usize,
    pub kind: AttentionKind,
    /// Side length of the square token grid that issues the queries.
    pub resolution: usize,
    pub branch: Branch,
}

/// What a controller sees at an attention site. Rows of `query` are spatial
/// tokens in row-major order; head `h` owns columns `h*d..(h+1)*d`.
pub struct AttentionCall<'a, T> {
    pub query: ArrayView2<'a, T>,
    pub key: ArrayView2<'a, T>,
    pub value: ArrayView2<'a, T>,
    pub heads: usize,
    /// Per-head attention probabilities `(query_tokens, key_tokens)`.
    pub probs: &'a [Array2<T>],
    pub output: ArrayView2<'a, T>,
}

/// Hook consulted at every attention site of a forward pass.
///
/// Returning `Ok(None)` keeps the raw output untouched.
pub trait AttentionController<T: Scalar> {
    fn branch(&self) -> Branch {
        Branch::Target
    }

    fn attend(&mut self, site: &AttentionSite, call: &AttentionCall<'_, T>)
        -> Result<Option<Array2<T>>>;
}

/// Controller that never alters anything.
#[derive(Debug, Default, Clone, Copy)]
pub struct PassThrough;

impl<T: Scalar> AttentionController<T> for PassThrough {
    fn attend(&mut self, _: &AttentionSite, _: &AttentionCall<'_, T>) -> Result<Option<Array2<T>>> {
        Ok(None)
    }
}

/// A predictor specialised to one `(latent, timestep)` pair. Evaluating it
/// for many embeddings reuses the text-independent part of the network.
pub trait FrozenPredictor<T: Scalar> {
    fn noise(&self, cond: &TextEmbedding<T>) -> Result<Array3<T>>;

    /// Vector-Jacobian product: gradient of `<upstream, noise(cond)>` with
    /// respect to `cond.embedding`.
    fn embedding_vjp(&self, cond: &TextEmbedding<T>, upstream: &Array3<T>) -> Result<Array2<T>>;
}

/// Noise estimator consumed by every DDIM formula.
pub trait NoisePredictor<T: Scalar> {
    fn predict_noise(
        &self,
        latent: &LatentImage<T>,
        t: usize,
        cond: &TextEmbedding<T>,
        controller: Option<&mut dyn AttentionController<T>>,
    ) -> Result<Array3<T>>;

    fn freeze<'a>(&'a self, latent: &LatentImage<T>, t: usize)
        -> Result<Box<dyn FrozenPredictor<T> + 'a>>;
}

/// Fixed geometry of a backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub latent_channels: usize,
    pub downsample_factor: usize,
    pub sequence_length: usize,
    pub embed_dim: usize,
    pub working_resolution: usize,
    /// Side lengths of attention token grids at the working resolution,
    /// in traversal order of the self-attention layers.
    pub self_attention_resolutions: Vec<usize>,
}

impl BackboneSpec {
    pub fn latent_resolution(&self) -> usize {
        self.working_resolution / self.downsample_factor
    }
}

/// Full model facade: text encoder, autoencoder and noise predictor.
pub trait Backbone<T: Scalar>: NoisePredictor<T> + Send + Sync {
    fn spec(&self) -> &BackboneSpec;

    fn training_alpha_bar(&self) -> &[f64];

    fn encode_text(&self, prompt: &str) -> TextEmbedding<T>;

    fn encode_image(&self, image: &PixelImage<T>) -> Result<LatentImage<T>>;

    /// Output is clamped to `[0, 1]`.
    fn decode_latent(&self, latent: &LatentImage<T>) -> Result<PixelImage<T>>;

    fn make_schedule(&self, num_inference_steps: usize) -> Result<NoiseSchedule> {
        NoiseSchedule::new(num_inference_steps, self.training_alpha_bar())
    }
}

/// `eps_u + scale * (eps_c - eps_u)`.
///
/// `scale == 1` and `eps_u == eps_c` both return `eps_c` verbatim so the
/// degenerate identities hold bit for bit.
pub fn combine_guidance<T: Scalar>(eps_uncond: &Array3<T>, eps_cond: &Array3<T>, scale: T) -> Array3<T> {
    if scale == T::one() || eps_uncond == eps_cond {
        return eps_cond.clone();
    }
    let mut out = eps_cond - eps_uncond;
    Zip::from(&mut out)
        .and(eps_uncond)
        .for_each(|o, &u| *o = u + scale * *o);
    out
}

/// Classifier-free guided noise estimate with optional per-pass controllers.
///
/// The unconditional pass is skipped when it cannot influence the result
/// (`scale == 1` or identical embeddings).
pub fn guided_noise_with<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    predictor: &P,
    latent: &LatentImage<T>,
    t: usize,
    cond: &TextEmbedding<T>,
    uncond: &TextEmbedding<T>,
    scale: T,
    uncond_controller: Option<&mut dyn AttentionController<T>>,
    cond_controller: Option<&mut dyn AttentionController<T>>,
) -> Result<Array3<T>> {
    if scale < T::zero() || !scale.is_finite() {
        return Err(Error::invalid(format!("guidance scale must be >= 0, got {scale}")));
    }
    if scale == T::one() || cond.embedding == uncond.embedding {
        return predictor.predict_noise(latent, t, cond, cond_controller);
    }
    let eps_u = predictor.predict_noise(latent, t, uncond, uncond_controller)?;
    let eps_c = predictor.predict_noise(latent, t, cond, cond_controller)?;
    Ok(combine_guidance(&eps_u, &eps_c, scale))
}

pub fn guided_noise<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    predictor: &P,
    latent: &LatentImage<T>,
    t: usize,
    cond: &TextEmbedding<T>,
    uncond: &TextEmbedding<T>,
    scale: T,
) -> Result<Array3<T>> {
    guided_noise_with(predictor, latent, t, cond, uncond, scale, None, None)
}

pub(crate) fn ensure_finite<T: Scalar>(arr: &Array3<T>, what: &str) -> Result<()> {
    if arr.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(None, format!("{what} produced non-finite values")))
    }
}
