//! Dual-branch synthesis: the target branch borrows self-attention content
//! from a live replay of the source, faded in over the denoising steps, and
//! latent blending keeps everything outside the edit region on the source
//! trajectory.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::attention::{multi_head_attention, MASKED_KEY_BIAS};
use crate::backbone::text::content_token_indices;
use crate::backbone::{
    guided_noise_with, AttentionCall, AttentionController, AttentionKind, AttentionSite, Backbone,
    Branch, LatentImage, NoiseLevel, TextEmbedding,
};
use crate::error::{Error, Result};
use crate::image::{mean_abs_diff_outside, PixelImage};
use crate::inversion::{ddim_step, InversionRecord};
use crate::masks::{
    aggregate_target_mask, fuse_blend_mask, BinaryMask, CrossAttentionMap, TargetMask,
    DEFAULT_TARGET_THRESHOLD,
};
use crate::progress::{report, Phase, ProgressFn};
use crate::scalar::Scalar;

/// Where and how strongly source content is injected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionControlConfig {
    /// First denoising step with a non-zero fade weight.
    pub start_step: usize,
    /// Step at which the fade weight reaches `lambda_max`.
    pub ramp_end_step: usize,
    /// First self-attention layer (traversal order) that is rewritten.
    pub start_layer: usize,
    pub lambda_max: f64,
    /// Restrict source-keyed attention to the object footprint.
    pub mask_gated: bool,
    pub blending: bool,
    pub blend_start_step: usize,
    /// Cross-attention maps are collected from this step on; the blend
    /// region is frozen right after this step's harvest.
    pub harvest_start_step: usize,
    pub target_threshold: f64,
    /// Latent cells added around the fused blend region.
    pub dilation_radius: usize,
}

impl Default for AttentionControlConfig {
    fn default() -> Self {
        Self {
            start_step: 4,
            ramp_end_step: 10,
            start_layer: 10,
            lambda_max: 1.0,
            mask_gated: true,
            blending: true,
            blend_start_step: 4,
            harvest_start_step: 10,
            target_threshold: DEFAULT_TARGET_THRESHOLD,
            dilation_radius: 2,
        }
    }
}

impl AttentionControlConfig {
    /// No injection and no blending: synthesis reduces to plain guided
    /// sampling with the target prompt.
    pub fn degenerate() -> Self {
        Self {
            lambda_max: 0.0,
            blending: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, num_inference_steps: usize) -> Result<()> {
        let n = num_inference_steps;
        if self.start_step > self.ramp_end_step || self.ramp_end_step >= n {
            return Err(Error::invalid(format!(
                "need start_step <= ramp_end_step < {n}, got {} and {}",
                self.start_step, self.ramp_end_step
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_max) {
            return Err(Error::invalid(format!("lambda_max {} outside [0, 1]", self.lambda_max)));
        }
        if self.harvest_start_step >= n {
            return Err(Error::invalid(format!(
                "harvest_start_step {} must be below {n}",
                self.harvest_start_step
            )));
        }
        if self.blend_start_step >= n {
            return Err(Error::invalid(format!(
                "blend_start_step {} must be below {n}",
                self.blend_start_step
            )));
        }
        if !(self.target_threshold > 0.0 && self.target_threshold <= 1.0) {
            return Err(Error::invalid(format!(
                "target_threshold {} outside (0, 1]",
                self.target_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub target_prompt: String,
    #[serde(default)]
    pub config: AttentionControlConfig,
    #[serde(default = "default_guidance")]
    pub guidance_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_guidance() -> f64 {
    7.5
}

impl EditRequest {
    pub fn new(target_prompt: impl Into<String>) -> Self {
        Self {
            target_prompt: target_prompt.into(),
            config: AttentionControlConfig::default(),
            guidance_scale: default_guidance(),
            seed: 0,
        }
    }

    pub fn validate(&self, num_inference_steps: usize) -> Result<()> {
        if self.target_prompt.trim().is_empty() {
            return Err(Error::invalid("target prompt is empty"));
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::invalid(format!("guidance scale {} must be >= 0", self.guidance_scale)));
        }
        self.config.validate(num_inference_steps)
    }
}

/// Everything needed to replay a generation from the same record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedEdit {
    pub request: EditRequest,
    pub num_inference_steps: usize,
    pub train_steps: usize,
    pub source_caption: String,
    pub model: String,
    /// `false` for seeded free generation (no source record involved).
    pub from_record: bool,
}

#[derive(Clone, Debug)]
pub struct EditResult<T> {
    pub image: PixelImage<T>,
    pub latent: LatentImage<T>,
    pub target_mask: TargetMask,
    /// Latent-resolution blend region, frozen at the harvest start step.
    pub blend_mask: BinaryMask,
    /// Seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub config_echo: ResolvedEdit,
}

/// Fade-in weight for denoising step `step`: zero before `start_step`,
/// linear up to `lambda_max` at `ramp_end_step`, constant afterwards.
pub fn fade_weight(step: usize, config: &AttentionControlConfig) -> f64 {
    if step < config.start_step {
        0.0
    } else if step >= config.ramp_end_step {
        config.lambda_max
    } else {
        let span = (config.ramp_end_step - config.start_step) as f64;
        config.lambda_max * (step - config.start_step) as f64 / span
    }
}

/// Source-branch keys and values captured at one self-attention site.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceKeys<T> {
    pub key: Array2<T>,
    pub value: Array2<T>,
}

/// Mask gating at one attention resolution (row-major token grids).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGate {
    /// Target queries that receive source content.
    pub query_footprint: BinaryMask,
    /// Source keys those queries may attend to.
    pub source_keys: BinaryMask,
}

/// Mutual self-attention at one target-branch site.
///
/// Returns `Ok(None)` when the site is left untouched (cross-attention,
/// `layer_index < start_layer`, zero weight, or an empty gate). Otherwise
/// rows are `(1 - lambda) * raw + lambda * Attn(Q_t, K_s, V_s)`; with a gate,
/// the source term only sees keys inside `source_keys` and rows outside
/// `query_footprint` keep the raw output.
pub fn mutual_attention<T: Scalar>(
    site: &AttentionSite,
    call: &AttentionCall<'_, T>,
    source: &SourceKeys<T>,
    gate: Option<&AttentionGate>,
    lambda: f64,
    config: &AttentionControlConfig,
) -> Result<Option<Array2<T>>> {
    if site.kind != AttentionKind::SelfAttention || site.layer_index < config.start_layer || lambda <= 0.0 {
        return Ok(None);
    }
    if source.key.dim() != call.key.dim() || source.value.dim() != call.value.dim() {
        return Err(Error::Internal(format!(
            "branch desynchronization at layer {}: source keys {:?}, target keys {:?}",
            site.layer_index,
            source.key.dim(),
            call.key.dim()
        )));
    }
    let tokens = call.query.nrows();
    let bias = match gate {
        None => None,
        Some(g) => {
            if g.query_footprint.cells().len() != tokens || g.source_keys.cells().len() != source.key.nrows() {
                return Err(Error::Internal(format!(
                    "gate at layer {} does not match {tokens} tokens",
                    site.layer_index
                )));
            }
            if g.query_footprint.area() == 0 || g.source_keys.area() == 0 {
                return Ok(None);
            }
            let masked = T::of(MASKED_KEY_BIAS);
            Some(Array1::from_iter(
                g.source_keys.cells().iter().map(|&on| if on { T::zero() } else { masked }),
            ))
        }
    };
    let mixed = multi_head_attention(
        call.query,
        source.key.view(),
        source.value.view(),
        call.heads,
        bias.as_ref(),
    )?
    .output;
    let lam = T::of(lambda);
    let keep = T::one() - lam;
    let mut out = call.output.to_owned();
    let inside: Vec<bool> = match gate {
        Some(g) => g.query_footprint.cells().iter().copied().collect(),
        None => vec![true; tokens],
    };
    for ((mut row, src), on) in out.rows_mut().into_iter().zip(mixed.rows()).zip(inside) {
        if on {
            row.zip_mut_with(&src, |r, &s| *r = keep * *r + lam * s);
        }
    }
    Ok(Some(out))
}

/// `mask ⊙ target + (1 - mask) ⊙ source` from `blend_start_step` on;
/// earlier steps (or blending off) return `target` unchanged.
pub fn blend_background<T: Scalar>(
    target: &LatentImage<T>,
    source: &LatentImage<T>,
    blend_mask: &BinaryMask,
    step: usize,
    config: &AttentionControlConfig,
) -> Result<LatentImage<T>> {
    if !config.blending || step < config.blend_start_step {
        return Ok(target.clone());
    }
    let (c, h, w) = target.data.dim();
    if source.data.dim() != (c, h, w) || source.timestep != target.timestep {
        return Err(Error::Internal(format!(
            "cannot blend latents {:?}@{:?} and {:?}@{:?}",
            target.data.dim(),
            target.timestep,
            source.data.dim(),
            source.timestep
        )));
    }
    if blend_mask.dim() != (h, w) {
        return Err(Error::invalid(format!(
            "blend mask {:?} does not match latent grid {:?}",
            blend_mask.dim(),
            (h, w)
        )));
    }
    let mut data = target.data.clone();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if !blend_mask.get(y, x) {
                    data[[ch, y, x]] = source.data[[ch, y, x]];
                }
            }
        }
    }
    Ok(target.with_data(data, target.timestep))
}

/// Records self-attention keys/values of one source-branch pass.
#[derive(Default)]
struct SourceRecorder<T> {
    sites: Vec<Option<SourceKeys<T>>>,
}

impl<T: Scalar> SourceRecorder<T> {
    fn clear(&mut self) {
        self.sites.clear();
    }

    fn get(&self, layer: usize) -> Option<&SourceKeys<T>> {
        self.sites.get(layer).and_then(Option::as_ref)
    }
}

impl<T: Scalar> AttentionController<T> for SourceRecorder<T> {
    fn branch(&self) -> Branch {
        Branch::Source
    }

    fn attend(&mut self, site: &AttentionSite, call: &AttentionCall<'_, T>) -> Result<Option<Array2<T>>> {
        if site.kind == AttentionKind::SelfAttention {
            if self.sites.len() <= site.layer_index {
                self.sites.resize_with(site.layer_index + 1, || None);
            }
            self.sites[site.layer_index] = Some(SourceKeys {
                key: call.key.to_owned(),
                value: call.value.to_owned(),
            });
        }
        Ok(None)
    }
}

/// Gates for every attention resolution of the backbone.
struct GateTable {
    by_res: BTreeMap<usize, AttentionGate>,
}

impl GateTable {
    fn new(footprint: &BinaryMask, source_keys: &BinaryMask, resolutions: &[usize]) -> Result<Self> {
        let mut by_res = BTreeMap::new();
        for &res in resolutions {
            if !by_res.contains_key(&res) {
                let gate = AttentionGate {
                    query_footprint: footprint.downsample(res, res)?,
                    source_keys: source_keys.downsample(res, res)?,
                };
                by_res.insert(res, gate);
            }
        }
        Ok(Self { by_res })
    }

    fn at(&self, site: &AttentionSite) -> Result<&AttentionGate> {
        self.by_res.get(&site.resolution).ok_or_else(|| {
            Error::Internal(format!("no gate for resolution {} at layer {}", site.resolution, site.layer_index))
        })
    }
}

/// Target-branch controller for one pass: mutual attention against the
/// matching source pass, plus optional cross-attention harvesting.
struct TargetController<'a, T> {
    source: Option<&'a SourceRecorder<T>>,
    gates: Option<&'a GateTable>,
    lambda: f64,
    config: &'a AttentionControlConfig,
    harvest: Option<Harvest<'a>>,
}

struct Harvest<'a> {
    resolution: usize,
    columns: &'a [usize],
    maps: &'a mut Vec<CrossAttentionMap>,
}

impl<T: Scalar> AttentionController<T> for TargetController<'_, T> {
    fn attend(&mut self, site: &AttentionSite, call: &AttentionCall<'_, T>) -> Result<Option<Array2<T>>> {
        match site.kind {
            AttentionKind::CrossAttention => {
                if let Some(h) = self.harvest.as_mut() {
                    if site.resolution == h.resolution {
                        let heads = call
                            .probs
                            .iter()
                            .map(|p| {
                                Array2::from_shape_fn((p.nrows(), h.columns.len()), |(q, j)| {
                                    p[[q, h.columns[j]]].as_f64()
                                })
                            })
                            .collect();
                        h.maps.push(CrossAttentionMap {
                            grid: (site.resolution, site.resolution),
                            heads,
                        });
                    }
                }
                Ok(None)
            }
            AttentionKind::SelfAttention => {
                if self.lambda <= 0.0 || site.layer_index < self.config.start_layer {
                    return Ok(None);
                }
                let Some(src) = self.source.and_then(|s| s.get(site.layer_index)) else {
                    return Err(Error::Internal(format!(
                        "no source keys recorded for layer {}",
                        site.layer_index
                    )));
                };
                let gate = match self.gates {
                    Some(g) => Some(g.at(site)?),
                    None => None,
                };
                mutual_attention(site, call, src, gate, self.lambda, self.config)
            }
        }
    }
}

/// Resolution at which cross-attention is harvested: the finest attention
/// grid of the backbone.
pub fn harvest_resolution<T: Scalar, B: Backbone<T> + ?Sized>(backbone: &B) -> usize {
    backbone
        .spec()
        .self_attention_resolutions
        .iter()
        .copied()
        .max()
        .unwrap_or(1)
}

fn finish_target_mask(
    maps: &[CrossAttentionMap],
    token_indices: &[usize],
    threshold: f64,
    fallback_grid: usize,
) -> Result<TargetMask> {
    if maps.is_empty() {
        let soft_map = Array2::zeros((fallback_grid, fallback_grid));
        return Ok(TargetMask {
            binary: BinaryMask::filled(fallback_grid, fallback_grid, false),
            soft_map,
            token_indices: token_indices.to_vec(),
            threshold,
        });
    }
    let columns: Vec<usize> = (0..token_indices.len()).collect();
    let mut mask = aggregate_target_mask(maps, &columns, threshold)?;
    mask.token_indices = token_indices.to_vec();
    Ok(mask)
}

/// Both branches right after one denoising step (blending included).
pub struct StepTrace<'a, T> {
    pub step: usize,
    pub source: &'a LatentImage<T>,
    pub target: &'a LatentImage<T>,
    /// Mask used for blending at this step.
    pub blend_mask: &'a BinaryMask,
    pub blended: bool,
}

pub type TraceFn<'a, T> = &'a mut dyn FnMut(StepTrace<'_, T>);

/// Dual-branch synthesis from an inversion record.
pub fn synthesize<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    record: &InversionRecord<T>,
    request: &EditRequest,
    progress: Option<ProgressFn<'_>>,
) -> Result<EditResult<T>> {
    synthesize_traced(backbone, record, request, progress, None)
}

/// [`synthesize`] with a per-step observer of both branches.
pub fn synthesize_traced<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    record: &InversionRecord<T>,
    request: &EditRequest,
    mut progress: Option<ProgressFn<'_>>,
    mut trace: Option<TraceFn<'_, T>>,
) -> Result<EditResult<T>> {
    let started = Instant::now();
    record.validate()?;
    let schedule = &record.trajectory.schedule;
    let n = schedule.num_inference_steps();
    request.validate(n)?;
    let config = &request.config;
    let needs_mask = config.blending || (config.mask_gated && config.lambda_max > 0.0);
    let object_latent = match &record.object_mask {
        Some(m) => m.latent_mask.clone(),
        None if needs_mask => {
            return Err(Error::invalid("record has no object mask; masked editing needs one"))
        }
        None => {
            let (_, h, w) = record.trajectory.terminal().data.dim();
            BinaryMask::filled(h, w, true)
        }
    };

    let cond_s = &record.trajectory.source_embedding;
    let cond_t = backbone.encode_text(&request.target_prompt);
    let scale = T::of(request.guidance_scale);
    let token_indices = content_token_indices(&request.target_prompt, backbone.spec().sequence_length);
    let harvest_res = harvest_resolution(backbone);

    let provisional = object_latent.dilate(config.dilation_radius);
    let mut blend_mask: Option<BinaryMask> = None;
    let mut harvested: Vec<CrossAttentionMap> = Vec::new();
    let resolutions = backbone.spec().self_attention_resolutions.clone();
    let mut gates = GateTable::new(&object_latent, &object_latent, &resolutions)?;
    let mut rec_u = SourceRecorder::<T>::default();
    let mut rec_c = SourceRecorder::<T>::default();

    let mut z_s = record.trajectory.terminal().clone();
    let mut z_t = z_s.clone();
    for (i, null) in record.null_embeddings.iter().enumerate() {
        let (t, next) = schedule.denoise_levels(i);
        if z_s.timestep != z_t.timestep || z_s.data.dim() != z_t.data.dim() {
            return Err(Error::Internal(format!("branches out of sync at step {i}")));
        }
        let lambda = fade_weight(i, config);
        let inject = lambda > 0.0;

        rec_u.clear();
        rec_c.clear();
        let eps_s = {
            let (u, c): (Option<&mut dyn AttentionController<T>>, Option<&mut dyn AttentionController<T>>) =
                if inject { (Some(&mut rec_u), Some(&mut rec_c)) } else { (None, None) };
            guided_noise_with(backbone, &z_s, t, cond_s, null, scale, u, c).map_err(|e| e.at_step(i))?
        };

        let harvesting = i >= config.harvest_start_step;
        let mut step_maps = Vec::new();
        let gated = config.mask_gated && inject;
        let eps_t = {
            // The unconditional source pass is skipped when it cannot matter.
            let src_u = if rec_u.sites.is_empty() { &rec_c } else { &rec_u };
            let gate_ref = gated.then_some(&gates);
            let mut ctl_u = TargetController {
                source: Some(src_u),
                gates: gate_ref,
                lambda,
                config,
                harvest: None,
            };
            let mut ctl_c = TargetController {
                source: Some(&rec_c),
                gates: gate_ref,
                lambda,
                config,
                harvest: harvesting.then_some(Harvest {
                    resolution: harvest_res,
                    columns: &token_indices,
                    maps: &mut step_maps,
                }),
            };
            guided_noise_with(backbone, &z_t, t, &cond_t, null, scale, Some(&mut ctl_u), Some(&mut ctl_c))
                .map_err(|e| e.at_step(i))?
        };
        harvested.append(&mut step_maps);

        z_s = ddim_step(&z_s, &eps_s, NoiseLevel::Step(t), next, schedule)?;
        let stepped = ddim_step(&z_t, &eps_t, NoiseLevel::Step(t), next, schedule)?;
        if !stepped.is_finite() || !z_s.is_finite() {
            return Err(Error::numerical(Some(i), "synthesis produced non-finite latent"));
        }

        if i == config.harvest_start_step {
            let target = finish_target_mask(&harvested, &token_indices, config.target_threshold, harvest_res)?;
            let fused = fuse_blend_mask(&object_latent, Some(&target), config.dilation_radius)?;
            gates = GateTable::new(&fused, &object_latent, &resolutions)?;
            blend_mask = Some(fused);
        }
        let active = blend_mask.as_ref().unwrap_or(&provisional);
        z_t = blend_background(&stepped, &z_s, active, i, config)?;
        if let Some(cb) = trace.as_deref_mut() {
            cb(StepTrace {
                step: i,
                source: &z_s,
                target: &z_t,
                blend_mask: active,
                blended: config.blending && i >= config.blend_start_step,
            });
        }
        report(&mut progress, Phase::Synthesis, i + 1, n)?;
    }
    let sampling = started.elapsed().as_secs_f64();

    let decode_start = Instant::now();
    let image = backbone.decode_latent(&z_t)?;
    let decoding = decode_start.elapsed().as_secs_f64();

    let target_mask = finish_target_mask(&harvested, &token_indices, config.target_threshold, harvest_res)?;
    let blend_mask = match blend_mask {
        Some(m) => m,
        None => fuse_blend_mask(&object_latent, Some(&target_mask), config.dilation_radius)?,
    };
    let timings = BTreeMap::from([("sampling".to_string(), sampling), ("decode".to_string(), decoding)]);
    Ok(EditResult {
        image,
        latent: z_t,
        target_mask,
        blend_mask,
        timings,
        config_echo: ResolvedEdit {
            request: request.clone(),
            num_inference_steps: n,
            train_steps: schedule.train_steps(),
            source_caption: cond_s.prompt_text.clone(),
            model: backbone.spec().name.clone(),
            from_record: true,
        },
    })
}

/// Seeded Gaussian latent at the backbone's working resolution.
pub fn seeded_noise<T: Scalar, B: Backbone<T> + ?Sized>(backbone: &B, seed: u64) -> LatentImage<T> {
    let spec = backbone.spec();
    let side = spec.latent_resolution();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array3::from_shape_simple_fn((spec.latent_channels, side, side), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        T::of(z)
    });
    LatentImage::new(data, spec.working_resolution, spec.working_resolution)
}

/// Text-only generation from seeded noise (no source, no blending). The
/// target mask is still harvested for reporting.
pub fn generate_free<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    request: &EditRequest,
    num_inference_steps: usize,
    mut progress: Option<ProgressFn<'_>>,
) -> Result<EditResult<T>> {
    let started = Instant::now();
    let schedule = backbone.make_schedule(num_inference_steps)?;
    request.validate(num_inference_steps)?;
    let config = &request.config;
    let cond = backbone.encode_text(&request.target_prompt);
    let null: TextEmbedding<T> = backbone.encode_text("");
    let scale = T::of(request.guidance_scale);
    let token_indices = content_token_indices(&request.target_prompt, backbone.spec().sequence_length);
    let harvest_res = harvest_resolution(backbone);
    let mut harvested = Vec::new();

    let mut z = seeded_noise(backbone, request.seed);
    z.timestep = Some(schedule.timesteps()[0]);
    for i in 0..num_inference_steps {
        let (t, next) = schedule.denoise_levels(i);
        let mut ctl = TargetController::<T> {
            source: None,
            gates: None,
            lambda: 0.0,
            config,
            harvest: (i >= config.harvest_start_step).then_some(Harvest {
                resolution: harvest_res,
                columns: &token_indices,
                maps: &mut harvested,
            }),
        };
        let eps = guided_noise_with(backbone, &z, t, &cond, &null, scale, None, Some(&mut ctl))
            .map_err(|e| e.at_step(i))?;
        z = ddim_step(&z, &eps, NoiseLevel::Step(t), next, &schedule)?;
        if !z.is_finite() {
            return Err(Error::numerical(Some(i), "generation produced non-finite latent"));
        }
        report(&mut progress, Phase::Synthesis, i + 1, num_inference_steps)?;
    }
    let sampling = started.elapsed().as_secs_f64();
    let decode_start = Instant::now();
    let image = backbone.decode_latent(&z)?;
    let decoding = decode_start.elapsed().as_secs_f64();
    let target_mask = finish_target_mask(&harvested, &token_indices, config.target_threshold, harvest_res)?;
    let (_, h, w) = z.data.dim();
    let blend_mask = target_mask.binary.upsample(h, w)?.dilate(config.dilation_radius);
    Ok(EditResult {
        image,
        latent: z,
        target_mask,
        blend_mask,
        timings: BTreeMap::from([("sampling".to_string(), sampling), ("decode".to_string(), decoding)]),
        config_echo: ResolvedEdit {
            request: request.clone(),
            num_inference_steps,
            train_steps: schedule.train_steps(),
            source_caption: String::new(),
            model: backbone.spec().name.clone(),
            from_record: false,
        },
    })
}

/// Pixel margin added around the upsampled blend mask before comparing
/// backgrounds; decoder receptive fields bleed a few pixels past the mask.
pub const BACKGROUND_BLEED_PX: usize = 8;

/// Mean absolute difference between `result` and `reference` outside the
/// blend mask grown by `bleed_px`. `None` when nothing is left to compare.
pub fn background_difference<T: Scalar>(
    result: &EditResult<T>,
    reference: &PixelImage<T>,
    bleed_px: usize,
) -> Result<Option<f64>> {
    let (h, w) = (result.image.height(), result.image.width());
    let exclude = result.blend_mask.upsample(h, w)?.dilate(bleed_px);
    mean_abs_diff_outside(&result.image, reference, &exclude)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::attention::softmax_rows;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    fn site(layer: usize, kind: AttentionKind) -> AttentionSite {
        AttentionSite {
            layer_index: layer,
            kind,
            resolution: 2,
            branch: Branch::Target,
        }
    }

    fn qkv(offset: f64) -> Array2<f64> {
        Array2::from_shape_fn((4, 4), |(i, j)| ((i * 4 + j) as f64 * 0.37 + offset).sin())
    }

    fn call_parts() -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>, Vec<Array2<f64>>) {
        let (q, k, v) = (qkv(0.0), qkv(1.0), qkv(2.0));
        let raw = multi_head_attention(q.view(), k.view(), v.view(), 2, None).unwrap();
        (q, k, v, raw.output, raw.probs)
    }

    #[test]
    fn fade_weight_examples() {
        let c = AttentionControlConfig::default();
        assert_eq!(fade_weight(0, &c), 0.0);
        assert_eq!(fade_weight(c.ramp_end_step, &c), c.lambda_max);
        assert!((fade_weight(7, &c) - 0.5).abs() < 1e-15);
        assert_eq!(fade_weight(49, &c), 1.0);
    }

    proptest! {
        #[test]
        fn fade_weight_monotone_and_bounded(start in 0usize..20, len in 0usize..20, lmax in 0.0f64..=1.0) {
            let c = AttentionControlConfig { start_step: start, ramp_end_step: start + len, lambda_max: lmax, ..Default::default() };
            let mut prev = 0.0;
            for step in 0..50 {
                let w = fade_weight(step, &c);
                prop_assert!(w >= prev && w >= 0.0 && w <= lmax);
                prev = w;
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(AttentionControlConfig::default().validate(50).is_ok());
        let bad = AttentionControlConfig { ramp_end_step: 50, ..Default::default() };
        assert!(bad.validate(50).is_err());
        let bad = AttentionControlConfig { start_step: 11, ..Default::default() };
        assert!(bad.validate(50).is_err());
        let bad = AttentionControlConfig { lambda_max: 1.5, ..Default::default() };
        assert!(bad.validate(50).is_err());
        assert!(EditRequest::new("  ").validate(50).is_err());
    }

    #[test]
    fn zero_weight_and_early_layers_are_untouched() {
        let (q, k, v, out, probs) = call_parts();
        let call = AttentionCall { query: q.view(), key: k.view(), value: v.view(), heads: 2, probs: &probs, output: out.view() };
        let src = SourceKeys { key: qkv(5.0), value: qkv(6.0) };
        let c = AttentionControlConfig::default();
        assert!(mutual_attention(&site(12, AttentionKind::SelfAttention), &call, &src, None, 0.0, &c).unwrap().is_none());
        assert!(mutual_attention(&site(3, AttentionKind::SelfAttention), &call, &src, None, 1.0, &c).unwrap().is_none());
        assert!(mutual_attention(&site(12, AttentionKind::CrossAttention), &call, &src, None, 1.0, &c).unwrap().is_none());
    }

    #[test]
    fn identical_branches_reproduce_plain_attention() {
        let (q, k, v, out, probs) = call_parts();
        let call = AttentionCall { query: q.view(), key: k.view(), value: v.view(), heads: 2, probs: &probs, output: out.view() };
        let src = SourceKeys { key: k.clone(), value: v.clone() };
        let c = AttentionControlConfig::default();
        let got = mutual_attention(&site(12, AttentionKind::SelfAttention), &call, &src, None, 1.0, &c).unwrap().unwrap();
        assert_eq!(got, out);
    }

    #[test]
    fn interpolates_between_target_and_source_terms() {
        let (q, k, v, out, probs) = call_parts();
        let call = AttentionCall { query: q.view(), key: k.view(), value: v.view(), heads: 2, probs: &probs, output: out.view() };
        let src = SourceKeys { key: qkv(5.0), value: qkv(6.0) };
        let c = AttentionControlConfig::default();
        let got = mutual_attention(&site(12, AttentionKind::SelfAttention), &call, &src, None, 0.25, &c).unwrap().unwrap();
        let other = multi_head_attention(q.view(), src.key.view(), src.value.view(), 2, None).unwrap().output;
        let want = &out * 0.75 + &other * 0.25;
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_keeps_outside_rows_and_restricts_keys() {
        let (q, k, v, out, probs) = call_parts();
        let call = AttentionCall { query: q.view(), key: k.view(), value: v.view(), heads: 2, probs: &probs, output: out.view() };
        let src = SourceKeys { key: qkv(5.0), value: qkv(6.0) };
        let gate = AttentionGate {
            query_footprint: BinaryMask::new(array![[true, false], [false, true]]),
            source_keys: BinaryMask::new(array![[true, true], [false, false]]),
        };
        let c = AttentionControlConfig::default();
        let got = mutual_attention(&site(12, AttentionKind::SelfAttention), &call, &src, Some(&gate), 1.0, &c)
            .unwrap()
            .unwrap();
        assert_eq!(got.row(1), out.row(1));
        assert_eq!(got.row(2), out.row(2));

        // Oracle: per head, softmax over the two unmasked source keys only.
        let hd = 2;
        for qi in [0usize, 3] {
            for h in 0..2 {
                let cols = h * hd..(h + 1) * hd;
                let qh = q.slice(ndarray::s![qi, cols.clone()]);
                let mut scores = Array2::from_shape_fn((1, 2), |(_, j)| {
                    qh.dot(&src.key.slice(ndarray::s![j, cols.clone()])) / (hd as f64).sqrt()
                });
                softmax_rows(&mut scores);
                for d in 0..hd {
                    let want = scores[[0, 0]] * src.value[[0, h * hd + d]] + scores[[0, 1]] * src.value[[1, h * hd + d]];
                    assert!((got[[qi, h * hd + d]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gated_rows_are_distributions() {
        let (q, _, _, _, _) = call_parts();
        let src = qkv(5.0);
        let bias = Array1::from(vec![0.0, MASKED_KEY_BIAS, 0.0, MASKED_KEY_BIAS]);
        let att = multi_head_attention(q.view(), src.view(), src.view(), 2, Some(&bias)).unwrap();
        for p in &att.probs {
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert_eq!(row[1], 0.0);
                assert_eq!(row[3], 0.0);
            }
        }
    }

    #[test]
    fn empty_gate_falls_back_to_raw() {
        let (q, k, v, out, probs) = call_parts();
        let call = AttentionCall { query: q.view(), key: k.view(), value: v.view(), heads: 2, probs: &probs, output: out.view() };
        let src = SourceKeys { key: qkv(5.0), value: qkv(6.0) };
        let gate = AttentionGate {
            query_footprint: BinaryMask::filled(2, 2, true),
            source_keys: BinaryMask::filled(2, 2, false),
        };
        let c = AttentionControlConfig::default();
        let got = mutual_attention(&site(12, AttentionKind::SelfAttention), &call, &src, Some(&gate), 1.0, &c).unwrap();
        assert!(got.is_none());
    }

    #[test]
    fn branch_shape_mismatch_is_internal() {
        let (q, k, v, out, probs) = call_parts();
        let call = AttentionCall { query: q.view(), key: k.view(), value: v.view(), heads: 2, probs: &probs, output: out.view() };
        let src = SourceKeys { key: Array2::zeros((9, 4)), value: Array2::zeros((9, 4)) };
        let c = AttentionControlConfig::default();
        let err = mutual_attention(&site(12, AttentionKind::SelfAttention), &call, &src, None, 1.0, &c).unwrap_err();
        assert!(matches!(err, Error::Internal(_)));
    }

    fn latent(fill: f64) -> LatentImage<f64> {
        let mut l = LatentImage::new(Array3::from_elem((2, 2, 2), fill), 16, 16);
        l.timestep = Some(21);
        l
    }

    #[test]
    fn blend_selects_cellwise() {
        let c = AttentionControlConfig::default();
        let (t, s) = (latent(1.0), latent(-1.0));
        let ones = BinaryMask::filled(2, 2, true);
        let zeros = BinaryMask::filled(2, 2, false);
        assert_eq!(blend_background(&t, &s, &ones, 10, &c).unwrap(), t);
        assert_eq!(blend_background(&t, &s, &zeros, 10, &c).unwrap().data, s.data);
        let half = BinaryMask::new(array![[true, false], [true, false]]);
        let b = blend_background(&t, &s, &half, 10, &c).unwrap();
        for ch in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(b.data[[ch, y, x]], if x == 0 { 1.0 } else { -1.0 });
                }
            }
        }
        assert_eq!(blend_background(&t, &s, &zeros, 3, &c).unwrap(), t);
        let off = AttentionControlConfig { blending: false, ..Default::default() };
        assert_eq!(blend_background(&t, &s, &zeros, 10, &off).unwrap(), t);
    }

    #[test]
    fn blend_rejects_mismatched_timesteps() {
        let c = AttentionControlConfig::default();
        let t = latent(1.0);
        let mut s = latent(0.0);
        s.timestep = Some(1);
        let m = BinaryMask::filled(2, 2, false);
        assert!(matches!(blend_background(&t, &s, &m, 10, &c), Err(Error::Internal(_))));
    }
}
