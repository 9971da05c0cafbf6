//! Compute backends behind the job worker.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use icontra_core::backbone::Backbone;
use icontra_core::image::psnr;
use icontra_core::masks::{MaskExtractor, TargetMask};
use icontra_core::pipeline::{extract, prepare_image, ExtractionOptions, MaskSource};
use icontra_core::progress::{Phase, Progress, ProgressFn};
use icontra_core::store::{
    self, load_record, read_json, read_mask_png, read_rgb_png, save_record, save_result,
    write_json, ResultManifest, RECONSTRUCTION_FILE,
};
use icontra_core::transfer::{background_difference, synthesize, ResolvedEdit, BACKGROUND_BLEED_PX};
use icontra_core::{
    BinaryMask, EditRequest, EditResult, Error, Image, LatentImage, Model, ReferenceConfig, Result,
};

/// Where the object mask for an extraction comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskInput {
    Saliency,
    Prompt(String),
    /// Pixel mask file; falls back to saliency when it is too small.
    File(PathBuf),
}

impl MaskInput {
    pub fn from_prompt(object_prompt: Option<&str>) -> Self {
        match MaskSource::from_prompt(object_prompt) {
            MaskSource::Prompted(p) => MaskInput::Prompt(p),
            _ => MaskInput::Saliency,
        }
    }
}

pub struct ExtractJob<'a> {
    /// Image already at working resolution.
    pub image_path: &'a Path,
    pub caption: &'a str,
    pub mask: &'a MaskInput,
    pub record_dir: &'a Path,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExtractOutcome {
    pub reconstruction_psnr: f64,
    pub min_psnr: f64,
}

impl ExtractOutcome {
    pub fn usable(&self) -> bool {
        self.reconstruction_psnr >= self.min_psnr
    }
}

pub struct GenerateJob<'a> {
    pub record_dir: &'a Path,
    pub session_dir: &'a Path,
    pub cell: usize,
    pub ordinal: usize,
    pub request: &'a EditRequest,
}

/// Extraction and synthesis as seen by the service. Calls are blocking and
/// only ever made from the single worker thread.
pub trait Engine: Send + Sync + 'static {
    fn working_resolution(&self) -> usize;

    fn num_inference_steps(&self) -> usize;

    /// Writes a record into `job.record_dir`.
    fn extract(&self, job: &ExtractJob<'_>, progress: ProgressFn<'_>) -> Result<ExtractOutcome>;

    /// Writes `results/cell_<k>_<n>.*` under `job.session_dir`.
    fn generate(&self, job: &GenerateJob<'_>, progress: ProgressFn<'_>) -> Result<ResultManifest>;
}

/// Loads the backbone named by a model path: a JSON reference config, or a
/// directory holding `config.json`. `None` gives the default model.
pub fn load_model(path: Option<&Path>) -> Result<Model> {
    let config = match path {
        None => ReferenceConfig::default(),
        Some(p) if p.is_dir() => ReferenceConfig::load(&p.join("config.json"))?,
        Some(p) => ReferenceConfig::load(p)?,
    };
    Model::new(config)
}

/// The real pipeline on the reference backbone.
pub struct PipelineEngine {
    model: Model,
    masks: MaskExtractor,
    options: ExtractionOptions,
}

impl PipelineEngine {
    pub fn new(model: Model, options: ExtractionOptions) -> Self {
        Self {
            model,
            masks: MaskExtractor::default(),
            options,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    fn mask_source(&self, input: &MaskInput) -> Result<MaskSource> {
        Ok(match input {
            MaskInput::Saliency => MaskSource::Saliency,
            MaskInput::Prompt(p) => MaskSource::Prompted(p.clone()),
            MaskInput::File(path) => MaskSource::User(read_mask_png(path)?),
        })
    }
}

/// Quality checks stored with every result.
pub fn result_checks(result: &EditResult<f32>, reconstruction: Option<&Image>) -> Result<BTreeMap<String, f64>> {
    let mut checks = BTreeMap::new();
    checks.insert("blend_mask_coverage".into(), result.blend_mask.coverage());
    checks.insert("target_mask_coverage".into(), result.target_mask.binary.coverage());
    if let Some(recon) = reconstruction {
        if recon.height() == result.image.height() && recon.width() == result.image.width() {
            checks.insert("psnr_vs_reconstruction".into(), psnr(&result.image, recon)?);
            if let Some(d) = background_difference(result, recon, BACKGROUND_BLEED_PX)? {
                checks.insert("background_mean_abs_diff".into(), d);
            }
        }
    }
    Ok(checks)
}

impl Engine for PipelineEngine {
    fn working_resolution(&self) -> usize {
        self.model.spec().working_resolution
    }

    fn num_inference_steps(&self) -> usize {
        self.options.num_inference_steps
    }

    fn extract(&self, job: &ExtractJob<'_>, progress: ProgressFn<'_>) -> Result<ExtractOutcome> {
        let image: Image = prepare_image(&self.model, &read_rgb_png(job.image_path)?);
        let source = self.mask_source(job.mask)?;
        let mut progress = Some(progress);
        let extraction = match extract(
            &self.model,
            &self.masks,
            &image,
            job.caption,
            &source,
            &self.options,
            icontra_core::progress::reborrow(&mut progress),
        ) {
            Err(Error::EmptyMask { coverage, .. }) if matches!(job.mask, MaskInput::File(_)) => {
                log::warn!("inherited mask covers {coverage:.4}; using saliency instead");
                extract(
                    &self.model,
                    &self.masks,
                    &image,
                    job.caption,
                    &MaskSource::Saliency,
                    &self.options,
                    progress,
                )?
            }
            other => other?,
        };
        let reconstruction = self.model.decode_latent(&extraction.reconstruction)?;
        save_record(
            job.record_dir,
            &extraction.record,
            &self.model.spec().name,
            Some(&image),
            Some(&reconstruction),
        )?;
        Ok(ExtractOutcome {
            reconstruction_psnr: extraction.record.reconstruction_psnr,
            min_psnr: self.options.min_reconstruction_psnr,
        })
    }

    fn generate(&self, job: &GenerateJob<'_>, progress: ProgressFn<'_>) -> Result<ResultManifest> {
        let (record, _) = load_record(job.record_dir, &self.model)?;
        record.ensure_usable(self.options.min_reconstruction_psnr)?;
        let result = synthesize(&self.model, &record, job.request, Some(progress))?;
        let recon_path = job.record_dir.join(RECONSTRUCTION_FILE);
        let recon: Option<Image> = recon_path.is_file().then(|| read_rgb_png(&recon_path)).transpose()?;
        let checks = result_checks(&result, recon.as_ref())?;
        save_result(job.session_dir, job.cell, job.ordinal, &result, checks)
    }
}

const FAKE_RECORD_FILE: &str = "fake_record.json";

/// Marker text: extraction reports an empty mask.
pub const FAKE_EMPTY_MASK: &str = "[empty]";
/// Marker text: generation fails with a numerical error.
pub const FAKE_FAIL: &str = "[fail]";
/// Marker text: the call spins until cancelled.
pub const FAKE_STALL: &str = "[stall]";

/// Instrumented stand-in with the same file contract and progress shape as
/// [`PipelineEngine`], without any model math. Behaviour is steered by
/// marker substrings in captions and prompts.
pub struct FakeEngine {
    resolution: usize,
    steps: usize,
    step_delay: Duration,
    active: AtomicUsize,
    max_active: AtomicUsize,
    calls: Mutex<Vec<String>>,
    stall_all: AtomicBool,
}

impl FakeEngine {
    pub fn new(resolution: usize, steps: usize, step_delay: Duration) -> Self {
        Self {
            resolution,
            steps,
            step_delay,
            active: AtomicUsize::new(0),
            max_active: AtomicUsize::new(0),
            calls: Mutex::new(Vec::new()),
            stall_all: AtomicBool::new(false),
        }
    }

    /// Makes every later call spin until cancelled, as if the process hung.
    pub fn stall_everything(&self) {
        self.stall_all.store(true, Ordering::SeqCst);
    }

    /// Most engine calls ever observed running at once.
    pub fn max_concurrency(&self) -> usize {
        self.max_active.load(Ordering::SeqCst)
    }

    /// `"extract:<caption>"` / `"generate:<prompt>"` in start order.
    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().unwrap().clone()
    }

    fn enter(&self, call: String) -> ActiveGuard<'_> {
        self.calls.lock().unwrap().push(call);
        let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_active.fetch_max(now, Ordering::SeqCst);
        ActiveGuard(&self.active)
    }

    fn run_phase(&self, phase: Phase, total: usize, stall: bool, progress: &mut ProgressFn<'_>) -> Result<()> {
        let stall = stall || self.stall_all.load(Ordering::SeqCst);
        for step in 1..=total {
            std::thread::sleep(self.step_delay);
            if stall && step == total {
                // hold just short of the end until cancelled
                loop {
                    std::thread::sleep(Duration::from_millis(2));
                    if !progress(Progress { phase, step: step - 1, total }) {
                        return Err(Error::Cancelled(step - 1));
                    }
                }
            }
            if !progress(Progress { phase, step, total }) {
                return Err(Error::Cancelled(step));
            }
        }
        Ok(())
    }
}

struct ActiveGuard<'a>(&'a AtomicUsize);

impl Drop for ActiveGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Engine for FakeEngine {
    fn working_resolution(&self) -> usize {
        self.resolution
    }

    fn num_inference_steps(&self) -> usize {
        self.steps
    }

    fn extract(&self, job: &ExtractJob<'_>, mut progress: ProgressFn<'_>) -> Result<ExtractOutcome> {
        let _guard = self.enter(format!("extract:{}", job.caption));
        let image: Image = read_rgb_png(job.image_path)?;
        if job.caption.contains(FAKE_EMPTY_MASK) {
            return Err(Error::EmptyMask {
                coverage: 0.0,
                min_area: 0.005,
            });
        }
        let stall = job.caption.contains(FAKE_STALL);
        self.run_phase(Phase::Masking, 1, false, &mut progress)?;
        self.run_phase(Phase::Inversion, self.steps, stall, &mut progress)?;
        self.run_phase(Phase::NullOptimization, self.steps, false, &mut progress)?;
        std::fs::create_dir_all(job.record_dir).map_err(|e| Error::io(job.record_dir, e))?;
        store::write_rgb_png(&job.record_dir.join(store::SOURCE_FILE), &image)?;
        write_json(
            &job.record_dir.join(FAKE_RECORD_FILE),
            &serde_json::json!({ "caption": job.caption, "mask": format!("{:?}", job.mask) }),
        )?;
        Ok(ExtractOutcome {
            reconstruction_psnr: 30.0,
            min_psnr: 25.0,
        })
    }

    fn generate(&self, job: &GenerateJob<'_>, mut progress: ProgressFn<'_>) -> Result<ResultManifest> {
        let prompt = &job.request.target_prompt;
        let _guard = self.enter(format!("generate:{prompt}"));
        let record: serde_json::Value = read_json(&job.record_dir.join(FAKE_RECORD_FILE))?;
        if prompt.contains(FAKE_FAIL) {
            return Err(Error::numerical(Some(0), "injected failure"));
        }
        self.run_phase(Phase::Synthesis, self.steps, prompt.contains(FAKE_STALL), &mut progress)?;

        // colour is a pure function of prompt and seed, independent of cell
        let hash = prompt
            .bytes()
            .fold(job.request.seed ^ 0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        let rgb = [0, 8, 16].map(|s| ((hash >> s) & 0xff) as f32 / 255.0);
        let size = self.resolution;
        let latent_side = (size / 8).max(1);
        let blank = BinaryMask::filled(latent_side, latent_side, false);
        let result = EditResult {
            image: Image::from_fn(size, size, |_, _| rgb),
            latent: LatentImage::new(ndarray::Array3::zeros((4, latent_side, latent_side)), size, size),
            target_mask: TargetMask {
                soft_map: ndarray::Array2::zeros((latent_side, latent_side)),
                binary: blank.clone(),
                token_indices: Vec::new(),
                threshold: 0.5,
            },
            blend_mask: blank,
            timings: BTreeMap::new(),
            config_echo: ResolvedEdit {
                request: job.request.clone(),
                num_inference_steps: self.steps,
                train_steps: 1000,
                source_caption: record["caption"].as_str().unwrap_or_default().to_string(),
                model: "fake".into(),
                from_record: true,
            },
        };
        save_result(job.session_dir, job.cell, job.ordinal, &result, BTreeMap::new())
    }
}
