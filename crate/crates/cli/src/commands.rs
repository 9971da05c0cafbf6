use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use icontra_core::backbone::Backbone;
use icontra_core::image::{mean_abs_diff_outside, psnr};
use icontra_core::inversion::{reconstruct, sample_guided};
use icontra_core::masks::MaskExtractor;
use icontra_core::pipeline::{extract, prepare_image, ExtractionOptions, MaskSource};
use icontra_core::store::{
    has_record, list_results, load_record, read_mask_png, save_record, save_result, DirLock, RESULTS_DIR,
};
use icontra_core::transfer::synthesize;
use icontra_core::{AttentionControlConfig, BinaryMask, EditRequest, Image, Model, ReferenceConfig};
use icontra_service::engine::result_checks;
use serde::Deserialize;
use serde_json::json;

use crate::error::{CliError, CliResult};

/// Largest background change `--check` accepts, mean absolute per channel.
pub const BACKGROUND_TOLERANCE: f64 = 0.02;

pub struct ModelChoice {
    pub path: Option<PathBuf>,
    pub resolution: Option<usize>,
}

impl ModelChoice {
    pub fn load(&self) -> CliResult<Model> {
        if let Some(p) = &self.path {
            require_exists(p, "model config")?;
        }
        let mut config = match &self.path {
            None => ReferenceConfig::default(),
            Some(p) if p.is_dir() => ReferenceConfig::load(&p.join("config.json"))?,
            Some(p) => ReferenceConfig::load(p)?,
        };
        if let Some(r) = self.resolution {
            config.working_resolution = r;
        }
        Ok(Model::new(config)?)
    }
}

fn require_exists(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Input(format!("{what} not found: {}", path.display())))
    }
}

/// Decodes any PNG or JPEG to RGB in `[0, 1]`.
pub fn read_image(path: &Path) -> CliResult<Image> {
    require_exists(path, "image")?;
    let img = image::open(path).map_err(|e| CliError::Input(format!("cannot decode {}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    Ok(Image::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())?)
}

/// Fits a user mask to the working canvas the same way its photo is fitted.
fn fit_mask(mask: &BinaryMask, size: usize) -> BinaryMask {
    let (h, w) = mask.dim();
    if (h, w) == (size, size) {
        return mask.clone();
    }
    let as_image = Image::from_fn(h, w, |y, x| [if mask.get(y, x) { 1.0 } else { 0.0 }; 3]);
    let fitted = as_image.letterbox(size);
    BinaryMask::from_fn(size, size, |y, x| fitted.pixel(y, x)[0] >= 0.5)
}

/// Locks `dir`, and the service data directory around it when there is one.
fn lock_for_writing(dir: &Path) -> CliResult<Vec<DirLock>> {
    let mut locks = vec![DirLock::acquire(dir)?];
    let data_dir = dir.ancestors().skip(1).find_map(|a| {
        let parent = a.parent()?;
        (a.file_name()? == "sessions" && parent.join("jobs").is_dir()).then(|| parent.to_path_buf())
    });
    if let Some(data) = data_dir {
        locks.push(DirLock::acquire(&data)?);
    }
    Ok(locks)
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).unwrap_or_default());
}

#[derive(Args, Debug, Clone)]
pub struct InvertArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Record directory to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "")]
    pub caption: String,
    /// Segment the object named here instead of the most salient one.
    #[arg(long, conflicts_with = "mask")]
    pub object_prompt: Option<String>,
    /// Binary PNG object mask.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 7.5)]
    pub guidance: f64,
}

pub fn invert(model: &ModelChoice, args: &InvertArgs) -> CliResult<()> {
    let image = read_image(&args.image)?;
    let mask = match &args.mask {
        Some(p) => {
            require_exists(p, "mask")?;
            Some(read_mask_png(p)?)
        }
        None => None,
    };
    let model = model.load()?;
    let report = run_invert(&model, &image, &args.caption, args.object_prompt.as_deref(), mask, &args.out, args.steps, args.guidance)?;
    print_json(&report);
    unusable_error(&report)
}

fn unusable_error(report: &serde_json::Value) -> CliResult<()> {
    if report["usable"] == true {
        Ok(())
    } else {
        Err(CliError::from(icontra_core::Error::UnusableRecord {
            psnr: report["reconstruction_psnr"].as_f64().unwrap_or(f64::NAN),
            floor: ExtractionOptions::default().min_reconstruction_psnr,
        }))
    }
}

#[allow(clippy::too_many_arguments)]
fn run_invert(
    model: &Model,
    image: &Image,
    caption: &str,
    object_prompt: Option<&str>,
    mask: Option<BinaryMask>,
    out: &Path,
    steps: usize,
    guidance: f64,
) -> CliResult<serde_json::Value> {
    let _locks = lock_for_writing(out)?;
    let size = model.spec().working_resolution;
    // quantize like an upload so CLI and service records agree
    let fitted = prepare_image(model, image);
    let fitted = Image::from_rgb8(size, size, &fitted.to_rgb8())?;
    let source = match mask {
        Some(m) => MaskSource::User(fit_mask(&m, size)),
        None => MaskSource::from_prompt(object_prompt),
    };
    let options = ExtractionOptions {
        num_inference_steps: steps,
        guidance_scale: guidance,
        ..Default::default()
    };
    let extraction = extract(model, &MaskExtractor::default(), &fitted, caption, &source, &options, None)?;
    let reconstruction = model.decode_latent(&extraction.reconstruction)?;
    save_record(out, &extraction.record, &model.spec().name, Some(&fitted), Some(&reconstruction))?;
    let psnr = extraction.record.reconstruction_psnr;
    Ok(json!({
        "record": out,
        "reconstruction_psnr": psnr,
        "usable": psnr >= options.min_reconstruction_psnr,
    }))
}

#[derive(Args, Debug, Clone)]
pub struct EditArgs {
    /// Record directory written by `invert` (or a service session directory).
    #[arg(long)]
    pub record: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Cell the result is filed under.
    #[arg(long, default_value_t = 0)]
    pub cell: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 7.5)]
    pub guidance: f64,
    /// JSON file with attention-control settings; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Disable all attention control and blending (plain guided replay).
    #[arg(long)]
    pub degenerate: bool,
    /// Verify the result; exit 4 when a check fails.
    #[arg(long)]
    pub check: bool,
    #[arg(long)]
    pub lambda_max: Option<f64>,
    #[arg(long)]
    pub start_step: Option<usize>,
    #[arg(long)]
    pub ramp_end_step: Option<usize>,
    #[arg(long)]
    pub start_layer: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub dilation: Option<usize>,
    #[arg(long)]
    pub no_mask_gate: bool,
    #[arg(long)]
    pub no_blend: bool,
}

impl EditArgs {
    fn request(&self) -> CliResult<EditRequest> {
        let mut config = match &self.config {
            Some(p) => {
                require_exists(p, "config")?;
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
                serde_json::from_str::<AttentionControlConfig>(&text)
                    .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
            }
            None => AttentionControlConfig::default(),
        };
        if self.degenerate {
            config = AttentionControlConfig::degenerate();
        }
        if let Some(v) = self.lambda_max {
            config.lambda_max = v;
        }
        if let Some(v) = self.start_step {
            config.start_step = v;
        }
        if let Some(v) = self.ramp_end_step {
            config.ramp_end_step = v;
        }
        if let Some(v) = self.start_layer {
            config.start_layer = v;
        }
        if let Some(v) = self.threshold {
            config.target_threshold = v;
        }
        if let Some(v) = self.dilation {
            config.dilation_radius = v;
        }
        config.mask_gated &= !self.no_mask_gate;
        config.blending &= !self.no_blend;
        Ok(EditRequest {
            target_prompt: self.prompt.clone(),
            config,
            guidance_scale: self.guidance,
            seed: self.seed,
        })
    }
}

pub fn edit(model: &ModelChoice, args: &EditArgs) -> CliResult<()> {
    require_exists(&args.record, "record directory")?;
    if !has_record(&args.record) {
        return Err(CliError::Input(format!("no record in {}", args.record.display())));
    }
    let request = args.request()?;
    let model = model.load()?;
    let (summary, failures) = run_edit(&model, &args.record, args.cell, &request, args.degenerate)?;
    print_json(&summary);
    check_outcome(args.check, failures)
}

fn check_outcome(check: bool, failures: Vec<String>) -> CliResult<()> {
    if check && !failures.is_empty() {
        Err(CliError::Check(failures.join("; ")))
    } else {
        Ok(())
    }
}

fn next_ordinal(dir: &Path, cell: usize) -> CliResult<usize> {
    Ok(list_results(dir)?
        .iter()
        .filter(|m| m.cell == cell)
        .map(|m| m.ordinal + 1)
        .max()
        .unwrap_or(0))
}

/// Runs one edit and files it under `record_dir/results`. Returns a summary
/// and the checks that did not hold.
pub fn run_edit(
    model: &Model,
    record_dir: &Path,
    cell: usize,
    request: &EditRequest,
    degenerate: bool,
) -> CliResult<(serde_json::Value, Vec<String>)> {
    let _locks = lock_for_writing(record_dir)?;
    let (record, _) = load_record(record_dir, model)?;
    record.ensure_usable(ExtractionOptions::default().min_reconstruction_psnr)?;
    let result = synthesize(model, &record, request, None)?;
    let recon = reconstruct(model, &record)?;
    let mut checks = result_checks(&result, Some(&recon))?;
    let mut failures = Vec::new();
    if degenerate {
        let cond = model.encode_text(&request.target_prompt);
        let vanilla = sample_guided(
            model,
            record.trajectory.terminal(),
            &record.trajectory.schedule,
            &cond,
            &record.null_embeddings,
            request.guidance_scale,
            None,
        )?;
        let max_diff = vanilla
            .data
            .iter()
            .zip(result.latent.data.iter())
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max);
        checks.insert("degenerate_max_abs_latent_diff".into(), max_diff);
        if vanilla.data != result.latent.data {
            failures.push(format!("degenerate edit differs from plain sampling by up to {max_diff:e}"));
        }
    }
    if !degenerate {
        if let Some(&d) = checks.get("background_mean_abs_diff") {
            if d > BACKGROUND_TOLERANCE {
                failures.push(format!("background changed by {d:.4} > {BACKGROUND_TOLERANCE}"));
            }
        }
    }
    let ordinal = next_ordinal(record_dir, cell)?;
    let manifest = save_result(record_dir, cell, ordinal, &result, checks.clone())?;
    let summary = json!({
        "image": record_dir.join(RESULTS_DIR).join(&manifest.image),
        "cell": cell,
        "ordinal": ordinal,
        "checks": checks,
        "failed_checks": failures,
    });
    Ok((summary, failures))
}

#[derive(Args, Debug, Clone)]
pub struct MetricsArgs {
    /// Record directory to summarize.
    #[arg(long, conflicts_with_all = ["a", "b"])]
    pub record: Option<PathBuf>,
    #[arg(long, requires = "b")]
    pub a: Option<PathBuf>,
    #[arg(long, requires = "a")]
    pub b: Option<PathBuf>,
    /// Pixels to leave out of the masked difference.
    #[arg(long, requires = "a")]
    pub exclude: Option<PathBuf>,
}

pub fn metrics(_model: &ModelChoice, args: &MetricsArgs) -> CliResult<()> {
    if let Some(dir) = &args.record {
        require_exists(dir, "record directory")?;
        let manifest: icontra_core::store::RecordManifest =
            icontra_core::store::read_json(&dir.join(icontra_core::store::RECORD_FILE))?;
        let results: Vec<_> = list_results(dir)?
            .into_iter()
            .map(|m| json!({ "cell": m.cell, "ordinal": m.ordinal, "prompt": m.config.request.target_prompt, "checks": m.checks }))
            .collect();
        print_json(&json!({
            "caption": manifest.caption,
            "reconstruction_psnr": manifest.reconstruction_psnr,
            "results": results,
        }));
        return Ok(());
    }
    let (Some(a), Some(b)) = (&args.a, &args.b) else {
        return Err(CliError::Input("give --record, or --a and --b".into()));
    };
    let (a, b) = (read_image(a)?, read_image(b)?);
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(CliError::Input(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let mut out = BTreeMap::new();
    out.insert("psnr", json!(psnr(&a, &b)?));
    let none = BinaryMask::filled(a.height(), a.width(), false);
    out.insert("mean_abs_diff", json!(mean_abs_diff_outside(&a, &b, &none)?));
    if let Some(p) = &args.exclude {
        require_exists(p, "mask")?;
        let mask = read_mask_png(p)?;
        out.insert("mean_abs_diff_outside", json!(mean_abs_diff_outside(&a, &b, &mask)?));
    }
    print_json(&json!(out));
    Ok(())
}

#[derive(Args, Debug, Clone)]
pub struct BatchArgs {
    /// JSON manifest; relative paths resolve against its directory.
    pub manifest: PathBuf,
    /// Apply `--check` to every edit.
    #[arg(long)]
    pub check: bool,
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct BatchManifest {
    items: Vec<BatchItem>,
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct BatchItem {
    image: PathBuf,
    out: PathBuf,
    #[serde(default)]
    caption: String,
    #[serde(default)]
    object_prompt: Option<String>,
    #[serde(default)]
    mask: Option<PathBuf>,
    #[serde(default)]
    edits: Vec<BatchEdit>,
}

#[derive(Deserialize, Debug)]
#[serde(deny_unknown_fields)]
struct BatchEdit {
    prompt: String,
    #[serde(default)]
    cell: usize,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    guidance_scale: Option<f64>,
    #[serde(default)]
    config: Option<AttentionControlConfig>,
    #[serde(default)]
    degenerate: bool,
}

/// Items whose output already holds a record are not re-inverted. Failures
/// are collected; the exit code is that of the most severe one.
pub fn batch(model: &ModelChoice, args: &BatchArgs) -> CliResult<()> {
    require_exists(&args.manifest, "manifest")?;
    let text = std::fs::read_to_string(&args.manifest)
        .map_err(|e| CliError::Input(format!("{}: {e}", args.manifest.display())))?;
    let manifest: BatchManifest =
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", args.manifest.display())))?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let model = model.load()?;

    let mut failures: Vec<CliError> = Vec::new();
    let mut report = Vec::new();
    for item in &manifest.items {
        let out = base.join(&item.out);
        let inverted = if has_record(&out) {
            Ok(())
        } else {
            read_image(&base.join(&item.image)).and_then(|image| {
                let mask = item.mask.as_ref().map(|m| read_mask_png(&base.join(m))).transpose()?;
                let r = run_invert(&model, &image, &item.caption, item.object_prompt.as_deref(), mask, &out, 50, 7.5)?;
                report.push(r.clone());
                unusable_error(&r)
            })
        };
        if let Err(e) = inverted {
            report.push(json!({ "out": out, "error": e.to_string() }));
            failures.push(e);
            continue;
        }
        for e in &item.edits {
            let mut request = EditRequest::new(e.prompt.clone());
            request.seed = e.seed;
            if let Some(g) = e.guidance_scale {
                request.guidance_scale = g;
            }
            if let Some(c) = &e.config {
                request.config = c.clone();
            }
            if e.degenerate {
                request.config = AttentionControlConfig::degenerate();
            }
            match run_edit(&model, &out, e.cell, &request, e.degenerate) {
                Ok((summary, failed)) => {
                    report.push(summary);
                    if let Err(err) = check_outcome(args.check, failed) {
                        failures.push(err);
                    }
                }
                Err(err) => {
                    report.push(json!({ "out": out, "prompt": e.prompt, "error": err.to_string() }));
                    failures.push(err);
                }
            }
        }
    }
    print_json(&json!({ "results": report, "failures": failures.len() }));
    match failures.into_iter().max_by_key(CliError::exit_code) {
        Some(worst) => Err(worst),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fitted_masks_follow_the_photo_letterbox() {
        let mask = BinaryMask::from_fn(64, 128, |y, x| (16..48).contains(&y) && (32..96).contains(&x));
        let fitted = fit_mask(&mask, 128);
        assert_eq!(fitted.dim(), (128, 128));
        // the wide mask is scaled by 1 and centred vertically
        assert!(fitted.get(64, 64));
        assert!(!fitted.get(64, 10));
        assert!((fitted.coverage() - mask.coverage() / 2.0).abs() < 0.01);
    }

    #[test]
    fn edit_flags_override_the_config_file() {
        let args = EditArgs {
            record: PathBuf::new(),
            prompt: "a lamp".into(),
            cell: 0,
            seed: 3,
            guidance: 5.0,
            config: None,
            degenerate: false,
            check: false,
            lambda_max: Some(0.5),
            start_step: None,
            ramp_end_step: None,
            start_layer: Some(12),
            threshold: None,
            dilation: None,
            no_mask_gate: true,
            no_blend: false,
        };
        let req = args.request().unwrap();
        assert_eq!(req.config.lambda_max, 0.5);
        assert_eq!(req.config.start_layer, 12);
        assert!(!req.config.mask_gated);
        assert!(req.config.blending);
        assert_eq!((req.seed, req.guidance_scale), (3, 5.0));

        let degenerate = EditArgs {
            degenerate: true,
            lambda_max: None,
            start_layer: None,
            no_mask_gate: false,
            ..args
        };
        assert_eq!(degenerate.request().unwrap().config, AttentionControlConfig::degenerate());
    }
}
