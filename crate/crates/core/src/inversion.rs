//! Deterministic DDIM inversion and per-step unconditional-embedding
//! optimization.

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::backbone::{
    combine_guidance, guided_noise, Backbone, LatentImage, NoiseLevel, NoisePredictor,
    NoiseSchedule, TextEmbedding,
};
use crate::error::{Error, Result};
use crate::image::{psnr, PixelImage};
use crate::masks::ObjectMask;
use crate::progress::{report, Phase, ProgressFn};
use crate::scalar::Scalar;

/// Latents visited by inversion: index `i` holds the latent after `i` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTrajectory<T> {
    pub latents: Vec<LatentImage<T>>,
    pub schedule: NoiseSchedule,
    pub source_embedding: TextEmbedding<T>,
}

impl<T: Scalar> LatentTrajectory<T> {
    pub fn source(&self) -> &LatentImage<T> {
        &self.latents[0]
    }

    pub fn terminal(&self) -> &LatentImage<T> {
        self.latents.last().expect("trajectory is never empty")
    }
}

/// Output of the extraction phase for one source image.
#[derive(Clone, Debug, PartialEq)]
pub struct InversionRecord<T> {
    pub trajectory: LatentTrajectory<T>,
    /// One per denoising step, noisiest first.
    pub null_embeddings: Vec<TextEmbedding<T>>,
    pub guidance_scale: f64,
    pub reconstruction_psnr: f64,
    pub object_mask: Option<ObjectMask>,
}

impl<T: Scalar> InversionRecord<T> {
    pub fn validate(&self) -> Result<()> {
        let n = self.trajectory.schedule.num_inference_steps();
        if self.trajectory.latents.len() != n + 1 {
            return Err(Error::invalid(format!(
                "trajectory has {} latents, expected {}",
                self.trajectory.latents.len(),
                n + 1
            )));
        }
        if self.null_embeddings.len() != n {
            return Err(Error::invalid(format!(
                "record has {} null embeddings, expected {n}",
                self.null_embeddings.len()
            )));
        }
        Ok(())
    }

    /// Usable records reconstruct the source at or above `floor_db`.
    pub fn ensure_usable(&self, floor_db: f64) -> Result<()> {
        self.validate()?;
        if self.reconstruction_psnr >= floor_db {
            Ok(())
        } else {
            Err(Error::UnusableRecord {
                psnr: self.reconstruction_psnr,
                floor: floor_db,
            })
        }
    }
}

/// Deterministic DDIM update between two noise levels, usable in both
/// directions:
/// `sqrt(a_next) * x0 + sqrt(1 - a_next) * eps` with
/// `x0 = (latent - sqrt(1 - a_t) * eps) / sqrt(a_t)`.
pub fn ddim_step<T: Scalar>(
    latent: &LatentImage<T>,
    eps: &Array3<T>,
    t: NoiseLevel,
    t_next: NoiseLevel,
    schedule: &NoiseSchedule,
) -> Result<LatentImage<T>> {
    let data = ddim_update(
        &latent.data,
        eps,
        schedule.alpha_bar_at(t),
        schedule.alpha_bar_at(t_next),
    )?;
    let timestep = match t_next {
        NoiseLevel::Clean => None,
        NoiseLevel::Step(s) => Some(s),
    };
    Ok(latent.with_data(data, timestep))
}

/// [`ddim_step`] on raw arrays with explicit coefficients.
pub fn ddim_update<T: Scalar>(
    latent: &Array3<T>,
    eps: &Array3<T>,
    alpha_t: f64,
    alpha_next: f64,
) -> Result<Array3<T>> {
    if latent.dim() != eps.dim() {
        return Err(Error::invalid(format!(
            "noise shape {:?} does not match latent {:?}",
            eps.dim(),
            latent.dim()
        )));
    }
    if !(alpha_t > 0.0) || !alpha_t.is_finite() {
        return Err(Error::numerical(None, format!("alpha_bar_t = {alpha_t}")));
    }
    if alpha_t == alpha_next {
        return Ok(latent.clone());
    }
    let (sa, sb) = (alpha_t.sqrt(), (1.0 - alpha_t).sqrt());
    let (na, nb) = (alpha_next.sqrt(), (1.0 - alpha_next).max(0.0).sqrt());
    // folded into one affine map evaluated in f64, so f32 latents round
    // once per step
    let (keep, mix) = (na / sa, nb - na * sb / sa);
    let mut out = latent.clone();
    Zip::from(&mut out).and(eps).for_each(|z, &e| {
        *z = T::of(keep * z.as_f64() + mix * e.as_f64());
    });
    Ok(out)
}

/// Inverts a clean latent up to the terminal noise level with conditional
/// (scale 1) noise estimates.
pub fn ddim_invert<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    predictor: &P,
    source_latent: &LatentImage<T>,
    source_embedding: &TextEmbedding<T>,
    schedule: &NoiseSchedule,
    mut progress: Option<ProgressFn<'_>>,
) -> Result<LatentTrajectory<T>> {
    let n = schedule.num_inference_steps();
    let mut latents = Vec::with_capacity(n + 1);
    latents.push(source_latent.clone());
    for i in 0..n {
        let (from, t) = schedule.inversion_levels(i);
        let current = &latents[i];
        let eps = predictor
            .predict_noise(current, t, source_embedding, None)
            .map_err(|e| e.at_step(i))?;
        let next = ddim_step(current, &eps, from, NoiseLevel::Step(t), schedule)?;
        if !next.is_finite() {
            return Err(Error::numerical(Some(i), "inversion produced non-finite latent"));
        }
        latents.push(next);
        report(&mut progress, Phase::Inversion, i + 1, n)?;
    }
    Ok(LatentTrajectory {
        latents,
        schedule: schedule.clone(),
        source_embedding: source_embedding.clone(),
    })
}

/// Guided DDIM sampling from `start` down to the clean level.
/// `uncond[i]` is the unconditional embedding for denoising step `i`.
pub fn sample_guided<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    predictor: &P,
    start: &LatentImage<T>,
    schedule: &NoiseSchedule,
    cond: &TextEmbedding<T>,
    uncond: &[TextEmbedding<T>],
    guidance_scale: f64,
    mut progress: Option<ProgressFn<'_>>,
) -> Result<LatentImage<T>> {
    let n = schedule.num_inference_steps();
    if uncond.len() != n {
        return Err(Error::invalid(format!(
            "{} unconditional embeddings for {n} steps",
            uncond.len()
        )));
    }
    let mut z = start.clone();
    for (i, null) in uncond.iter().enumerate() {
        let (t, next) = schedule.denoise_levels(i);
        let eps = guided_noise(predictor, &z, t, cond, null, T::of(guidance_scale))
            .map_err(|e| e.at_step(i))?;
        z = ddim_step(&z, &eps, NoiseLevel::Step(t), next, schedule)?;
        report(&mut progress, Phase::Synthesis, i + 1, n)?;
    }
    Ok(z)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NullOptimizationOptions {
    pub inner_iters: usize,
    pub learning_rate: f64,
    pub early_stop_tol: f64,
}

impl Default for NullOptimizationOptions {
    fn default() -> Self {
        Self {
            inner_iters: 10,
            learning_rate: 1e-2,
            early_stop_tol: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub timestep: usize,
    /// Loss of every evaluated iterate, in order.
    pub losses: Vec<f64>,
    pub best_loss: f64,
    pub early_stopped: bool,
}

impl StepReport {
    /// Running minimum of `losses`.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.losses
            .iter()
            .scan(f64::INFINITY, |best, &l| {
                *best = best.min(l);
                Some(*best)
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct NullOptimization<T> {
    pub null_embeddings: Vec<TextEmbedding<T>>,
    /// Latent reached by replaying the trajectory with the optimized embeddings.
    pub final_latent: LatentImage<T>,
    pub steps: Vec<StepReport>,
}

/// First-order optimizer with bias-corrected moment estimates.
struct Adam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Array2<T>,
    v: Array2<T>,
}

impl<T: Scalar> Adam<T> {
    fn new(shape: (usize, usize), lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
        }
    }

    fn step(&mut self, params: &mut Array2<T>, grad: &Array2<T>) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t));
        let c2 = T::of(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        Zip::from(params)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
}

fn mse<T: Scalar>(a: &Array3<T>, b: &Array3<T>) -> f64 {
    Zip::from(a).and(b).fold(0.0f64, |acc, &x, &y| {
        let d = (x - y).as_f64();
        acc + d * d
    }) / a.len() as f64
}

/// Optimizes one unconditional embedding per denoising step so that guided
/// sampling at `guidance_scale` follows the inverted trajectory.
///
/// Steps are processed from the noisiest end; each step starts from the
/// previous step's optimum and the running latent advances with the best
/// iterate found.
pub fn optimize_null_latents<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    predictor: &P,
    trajectory: &LatentTrajectory<T>,
    initial_null: &TextEmbedding<T>,
    guidance_scale: f64,
    opts: &NullOptimizationOptions,
    mut progress: Option<ProgressFn<'_>>,
) -> Result<NullOptimization<T>> {
    if guidance_scale < 1.0 || !guidance_scale.is_finite() {
        return Err(Error::invalid(format!(
            "null optimization needs guidance_scale >= 1, got {guidance_scale}"
        )));
    }
    let schedule = &trajectory.schedule;
    let n = schedule.num_inference_steps();
    if trajectory.latents.len() != n + 1 {
        return Err(Error::invalid("trajectory is incomplete"));
    }
    let scale = T::of(guidance_scale);
    let cond = &trajectory.source_embedding;
    let mut z = trajectory.terminal().clone();
    let mut null = initial_null.clone();
    let mut nulls = Vec::with_capacity(n);
    let mut reports = Vec::with_capacity(n);

    for i in 0..n {
        let (t, next) = schedule.denoise_levels(i);
        let target = &trajectory.latents[n - 1 - i];
        let (a_t, a_next) = (schedule.alpha_bar_at(NoiseLevel::Step(t)), schedule.alpha_bar_at(next));
        // d z_next / d eps of the DDIM update
        let eps_coef = (1.0 - a_next).sqrt() - a_next.sqrt() * (1.0 - a_t).sqrt() / a_t.sqrt();
        let frozen = predictor.freeze(&z, t).map_err(|e| e.at_step(i))?;
        let eps_cond = frozen.noise(cond).map_err(|e| e.at_step(i))?;

        let mut adam = Adam::new(null.embedding.dim(), opts.learning_rate);
        let mut losses = Vec::with_capacity(opts.inner_iters + 1);
        let mut best: Option<(f64, Array2<T>, LatentImage<T>)> = None;
        let mut early_stopped = false;
        for iter in 0..=opts.inner_iters {
            let eps_uncond = frozen.noise(&null).map_err(|e| e.at_step(i))?;
            let eps = combine_guidance(&eps_uncond, &eps_cond, scale);
            let stepped = ddim_step(&z, &eps, NoiseLevel::Step(t), next, schedule)?;
            let loss = mse(&stepped.data, &target.data);
            if !loss.is_finite() {
                return Err(Error::numerical(Some(i), "null optimization loss is not finite"));
            }
            losses.push(loss);
            if best.as_ref().map_or(true, |(b, _, _)| loss < *b) {
                best = Some((loss, null.embedding.clone(), stepped.clone()));
            }
            if loss < opts.early_stop_tol {
                early_stopped = true;
                break;
            }
            if iter == opts.inner_iters {
                break;
            }
            let n_elems = T::of(stepped.data.len() as f64);
            let factor = T::of(2.0 * eps_coef) * (T::one() - scale) / n_elems;
            let mut upstream = &stepped.data - &target.data;
            upstream.mapv_inplace(|d| d * factor);
            let grad = frozen
                .embedding_vjp(&null, &upstream)
                .map_err(|e| e.at_step(i))?;
            adam.step(&mut null.embedding, &grad);
        }
        let (best_loss, best_embedding, best_latent) = best.expect("at least one evaluation");
        null = null.with_embedding(best_embedding);
        nulls.push(null.clone());
        z = best_latent;
        reports.push(StepReport {
            step: i,
            timestep: t,
            losses,
            best_loss,
            early_stopped,
        });
        report(&mut progress, Phase::NullOptimization, i + 1, n)?;
    }
    Ok(NullOptimization {
        null_embeddings: nulls,
        final_latent: z,
        steps: reports,
    })
}

/// [`optimize_null_latents`] from the backbone's empty-prompt embedding,
/// plus the PSNR of the decoded reconstruction against `source_image`.
pub fn optimize_null_embeddings<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    trajectory: &LatentTrajectory<T>,
    source_image: &PixelImage<T>,
    guidance_scale: f64,
    opts: &NullOptimizationOptions,
    progress: Option<ProgressFn<'_>>,
) -> Result<(NullOptimization<T>, f64)> {
    let null = backbone.encode_text("");
    let result = optimize_null_latents(backbone, trajectory, &null, guidance_scale, opts, progress)?;
    let image = backbone.decode_latent(&result.final_latent)?;
    let quality = psnr(&image, source_image)?;
    Ok((result, quality))
}

/// Guided replay of the record's terminal latent, decoded.
pub fn reconstruct_latent<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    predictor: &P,
    record: &InversionRecord<T>,
) -> Result<LatentImage<T>> {
    record.validate()?;
    sample_guided(
        predictor,
        record.trajectory.terminal(),
        &record.trajectory.schedule,
        &record.trajectory.source_embedding,
        &record.null_embeddings,
        record.guidance_scale,
        None,
    )
}

pub fn reconstruct<T: Scalar, B: Backbone<T> + ?Sized>(
    backbone: &B,
    record: &InversionRecord<T>,
) -> Result<PixelImage<T>> {
    backbone.decode_latent(&reconstruct_latent(backbone, record)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::reference::{ReferenceBackbone, ReferenceConfig};
    use crate::backbone::{make_schedule, AttentionController, FrozenPredictor};
    use crate::fixtures::SamplePhoto;
    use proptest::prelude::*;

    /// Predicts the same noise for every latent and timestep.
    struct ConstantNoise(Array3<f64>);

    impl FrozenPredictor<f64> for ConstantNoise {
        fn noise(&self, _: &TextEmbedding<f64>) -> Result<Array3<f64>> {
            Ok(self.0.clone())
        }

        fn embedding_vjp(&self, cond: &TextEmbedding<f64>, _: &Array3<f64>) -> Result<Array2<f64>> {
            Ok(Array2::zeros(cond.embedding.dim()))
        }
    }

    impl NoisePredictor<f64> for ConstantNoise {
        fn predict_noise(
            &self,
            _: &LatentImage<f64>,
            _: usize,
            _: &TextEmbedding<f64>,
            _: Option<&mut dyn AttentionController<f64>>,
        ) -> Result<Array3<f64>> {
            Ok(self.0.clone())
        }

        fn freeze<'a>(&'a self, _: &LatentImage<f64>, _: usize) -> Result<Box<dyn FrozenPredictor<f64> + 'a>> {
            Ok(Box::new(ConstantNoise(self.0.clone())))
        }
    }

    fn embedding(prompt: &str) -> TextEmbedding<f64> {
        TextEmbedding {
            tokens: vec![],
            embedding: Array2::zeros((4, 2)),
            prompt_text: prompt.into(),
            is_null: prompt.is_empty(),
        }
    }

    fn arr(values: &[f64]) -> Array3<f64> {
        Array3::from_shape_vec((1, 2, 4), values.to_vec()).unwrap()
    }

    #[test]
    fn step_to_same_level_is_identity() {
        let s = make_schedule(50, 1000).unwrap();
        let z = LatentImage::new(arr(&[0.3, -1.0, 2.0, 0.1, 0.0, 5.0, -0.2, 1.5]), 16, 32);
        let eps = arr(&[1.0; 8]);
        let out = ddim_step(&z, &eps, NoiseLevel::Step(981), NoiseLevel::Step(981), &s).unwrap();
        assert_eq!(out.data, z.data);
        assert_eq!(ddim_update(&z.data, &eps, 1.0, 1.0).unwrap(), z.data);
    }

    #[test]
    fn zero_alpha_is_numerical_failure() {
        let z = arr(&[0.0; 8]);
        assert!(matches!(
            ddim_update(&z, &z, 0.0, 0.5),
            Err(Error::NumericalFailure { .. })
        ));
    }

    #[test]
    fn trajectory_shape_and_source_preserved() {
        let s = make_schedule(50, 1000).unwrap();
        let z = LatentImage::new(arr(&[0.5; 8]), 16, 32);
        let mock = ConstantNoise(arr(&[0.1; 8]));
        let traj = ddim_invert(&mock, &z, &embedding("c"), &s, None).unwrap();
        assert_eq!(traj.latents.len(), 51);
        assert_eq!(traj.source(), &z);
        assert_eq!(traj.terminal().timestep, Some(981));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn constant_noise_round_trip(
            z in proptest::collection::vec(-3.0f64..3.0, 8),
            e in proptest::collection::vec(-2.0f64..2.0, 8),
        ) {
            let s = make_schedule(50, 1000).unwrap();
            let start = LatentImage::new(arr(&z), 16, 32);
            let mock = ConstantNoise(arr(&e));
            let c = embedding("c");
            let traj = ddim_invert(&mock, &start, &c, &s, None).unwrap();
            let nulls = vec![embedding(""); 50];
            let back = sample_guided(&mock, traj.terminal(), &s, &c, &nulls, 1.0, None).unwrap();
            prop_assert!(back.max_abs_diff(&start) <= 1e-5);
        }
    }

    fn small_setup(steps: usize) -> (ReferenceBackbone<f64>, PixelImage<f64>, LatentTrajectory<f64>) {
        let model = ReferenceBackbone::<f64>::new(ReferenceConfig::at_resolution(128)).unwrap();
        let image = SamplePhoto::Bag.render::<f64>(128);
        let latent = model.encode_image(&image).unwrap();
        let schedule = model.make_schedule(steps).unwrap();
        let cond = model.encode_text(SamplePhoto::Bag.caption());
        let traj = ddim_invert(&model, &latent, &cond, &schedule, None).unwrap();
        (model, image, traj)
    }

    #[test]
    fn scale_one_optimization_is_a_no_op() {
        let (model, image, traj) = small_setup(10);
        let (opt, _) =
            optimize_null_embeddings(&model, &traj, &image, 1.0, &NullOptimizationOptions::default(), None).unwrap();
        let null = model.encode_text("");
        assert!(opt.null_embeddings.iter().all(|e| e.embedding == null.embedding));
        let nulls = vec![null; 10];
        let replay = sample_guided(&model, traj.terminal(), &traj.schedule, &traj.source_embedding, &nulls, 1.0, None)
            .unwrap();
        assert!(opt.final_latent.max_abs_diff(&replay) < 1e-6);
        // guidance 1 ignores the null embedding: every iterate sees the same loss
        for step in &opt.steps {
            assert!(step.losses.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn best_loss_is_monotone_and_reconstruction_matches_record() {
        let (model, image, traj) = small_setup(10);
        let opts = NullOptimizationOptions::default();
        let (opt, quality) = optimize_null_embeddings(&model, &traj, &image, 7.5, &opts, None).unwrap();
        assert_eq!(opt.null_embeddings.len(), 10);
        for step in &opt.steps {
            let best = step.best_so_far();
            assert!(best.windows(2).all(|w| w[1] <= w[0]));
            assert_eq!(*best.last().unwrap(), step.best_loss);
            assert!(step.losses.len() <= opts.inner_iters + 1);
        }
        let record = InversionRecord {
            trajectory: traj,
            null_embeddings: opt.null_embeddings,
            guidance_scale: 7.5,
            reconstruction_psnr: quality,
            object_mask: None,
        };
        let again = psnr(&reconstruct(&model, &record).unwrap(), &image).unwrap();
        assert_eq!(again, record.reconstruction_psnr);
        assert_eq!(reconstruct_latent(&model, &record).unwrap(), opt.final_latent);
    }

    #[test]
    fn optimization_beats_unoptimized_guidance() {
        let (model, image, traj) = small_setup(10);
        let (_, optimized) =
            optimize_null_embeddings(&model, &traj, &image, 7.5, &NullOptimizationOptions::default(), None).unwrap();
        let nulls = vec![model.encode_text(""); 10];
        let plain = sample_guided(&model, traj.terminal(), &traj.schedule, &traj.source_embedding, &nulls, 7.5, None)
            .unwrap();
        let plain = psnr(&model.decode_latent(&plain).unwrap(), &image).unwrap();
        assert!(optimized > plain, "optimized {optimized} vs plain {plain}");
    }

    #[test]
    fn usability_floor() {
        let (model, image, traj) = small_setup(4);
        let (opt, quality) =
            optimize_null_embeddings(&model, &traj, &image, 7.5, &NullOptimizationOptions::default(), None).unwrap();
        let record = InversionRecord {
            trajectory: traj,
            null_embeddings: opt.null_embeddings,
            guidance_scale: 7.5,
            reconstruction_psnr: quality,
            object_mask: None,
        };
        assert!(record.ensure_usable(0.0).is_ok());
        assert!(matches!(record.ensure_usable(1000.0), Err(Error::UnusableRecord { .. })));
        let mut broken = record.clone();
        broken.null_embeddings.pop();
        assert!(broken.validate().is_err());
    }

    #[test]
    fn cancellation_stops_inversion() {
        let s = make_schedule(50, 1000).unwrap();
        let z = LatentImage::new(arr(&[0.5; 8]), 16, 32);
        let mock = ConstantNoise(arr(&[0.1; 8]));
        let mut seen = 0;
        let mut cb = |p: crate::progress::Progress| {
            seen = p.step;
            p.step < 3
        };
        let err = ddim_invert(&mock, &z, &embedding("c"), &s, Some(&mut cb)).unwrap_err();
        assert!(matches!(err, Error::Cancelled(3)));
        assert_eq!(seen, 3);
    }
}
