//! On-disk layout shared by the CLI and the service.
//!
//! A record directory holds `trajectory.bin`, `nulls.bin`, `record.json`,
//! `object_mask.png`, `source.png` and `reconstruction.png`. Result bundles
//! live under `results/` as `cell_<k>_<n>.png` with a JSON sidecar and the
//! two mask PNGs.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::backbone::{Backbone, LatentImage, TextEmbedding};
use crate::error::{Error, Result};
use crate::image::PixelImage;
use crate::inversion::{InversionRecord, LatentTrajectory};
use crate::masks::{BinaryMask, MaskOptions, MaskProvenance, ObjectMask, TargetMask};
use crate::scalar::Scalar;
use crate::transfer::{EditResult, ResolvedEdit};

pub const TENSOR_MAGIC: &[u8; 4] = b"ICTR";
pub const TENSOR_VERSION: u16 = 1;
pub const TENSOR_HEADER_LEN: usize = 24;

pub const TRAJECTORY_FILE: &str = "trajectory.bin";
pub const NULLS_FILE: &str = "nulls.bin";
pub const RECORD_FILE: &str = "record.json";
pub const OBJECT_MASK_FILE: &str = "object_mask.png";
pub const SOURCE_FILE: &str = "source.png";
pub const RECONSTRUCTION_FILE: &str = "reconstruction.png";
pub const RESULTS_DIR: &str = "results";
pub const LOCK_FILE: &str = ".lock";

/// A stack of equally shaped `f32` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorStack {
    pub dims: [u32; 4],
    pub data: Vec<Vec<f32>>,
}

impl TensorStack {
    fn element_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

pub fn encode_tensors(stack: &TensorStack) -> Result<Vec<u8>> {
    let count = u16::try_from(stack.data.len())
        .map_err(|_| Error::invalid(format!("{} tensors exceed the u16 count field", stack.data.len())))?;
    let per = stack.element_count();
    let mut out = Vec::with_capacity(TENSOR_HEADER_LEN + per * stack.data.len() * 4);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for d in stack.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for t in &stack.data {
        if t.len() != per {
            return Err(Error::invalid(format!("tensor has {} elements, expected {per}", t.len())));
        }
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tensors(path: &Path, bytes: &[u8]) -> Result<TensorStack> {
    if bytes.len() < TENSOR_HEADER_LEN {
        return Err(Error::format(path, "file shorter than header"));
    }
    if &bytes[0..4] != TENSOR_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TENSOR_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let count = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let mut dims = [0u32; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 8 + 4 * i;
        *d = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    }
    let per: usize = dims.iter().map(|&d| d as usize).product();
    let body = &bytes[TENSOR_HEADER_LEN..];
    if body.len() != count * per * 4 {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, header implies {}", body.len(), count * per * 4),
        ));
    }
    let data = body
        .chunks_exact(per * 4)
        .take(count)
        .map(|chunk| {
            chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect()
        })
        .collect();
    Ok(TensorStack { dims, data })
}

/// Writes `bytes` to a sibling temp file, syncs it, then renames it over
/// `path`, so readers see the old or the new contents and nothing between.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        let file = w.into_inner().map_err(|e| Error::io(&tmp, e.into_error()))?;
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let text = serde_json::to_vec_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    atomic_write(path, &text)
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

fn png_bytes(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut w = enc.write_header().map_err(|e| Error::Internal(e.to_string()))?;
        w.write_image_data(data).map_err(|e| Error::Internal(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_rgb_png<T: Scalar>(path: &Path, image: &PixelImage<T>) -> Result<()> {
    let bytes = png_bytes(
        image.width(),
        image.height(),
        png::ColorType::Rgb,
        png::BitDepth::Eight,
        &image.to_rgb8(),
    )?;
    atomic_write(path, &bytes)
}

fn decode_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Reads 8-bit grey, grey+alpha, RGB or RGBA PNGs; alpha is dropped.
pub fn read_rgb_png<T: Scalar>(path: &Path) -> Result<PixelImage<T>> {
    let (info, buf) = decode_png(path)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let rgb: Vec<u8> = buf
        .chunks_exact(channels)
        .flat_map(|px| match channels {
            1 | 2 => [px[0], px[0], px[0]],
            _ => [px[0], px[1], px[2]],
        })
        .collect();
    PixelImage::from_rgb8(w, h, &rgb)
}

/// 1-bit greyscale PNG, set cells white.
pub fn write_mask_png(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.dim();
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let bytes = png_bytes(w, h, png::ColorType::Grayscale, png::BitDepth::One, &packed)?;
    atomic_write(path, &bytes)
}

/// Any greyscale or colour PNG; a pixel is set when its first channel is
/// at least half intensity.
pub fn read_mask_png(path: &Path) -> Result<BinaryMask> {
    let (info, buf) = decode_png(path)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let line = info.line_size;
    let depth_bits = info.bit_depth as u8 as usize;
    Ok(BinaryMask::from_fn(h, w, |y, x| {
        let row = &buf[y * line..(y + 1) * line];
        if depth_bits < 8 {
            let bit = x * channels * depth_bits;
            let max = (1u8 << depth_bits) - 1;
            let v = (row[bit / 8] >> (8 - depth_bits - bit % 8)) & max;
            2 * v as usize > max as usize
        } else {
            row[x * channels * (depth_bits / 8)] >= 128
        }
    }))
}

/// Scale up a latent-resolution mask to pixels by nearest neighbour.
pub fn mask_to_pixels(mask: &BinaryMask, height: usize, width: usize) -> Result<BinaryMask> {
    mask.upsample(height, width)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMaskManifest {
    pub file: String,
    pub provenance: MaskProvenance,
    pub dilation_radius: usize,
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordManifest {
    pub format_version: u16,
    pub model: String,
    pub caption: String,
    pub guidance_scale: f64,
    pub reconstruction_psnr: f64,
    pub num_inference_steps: usize,
    pub train_steps: usize,
    pub timesteps: Vec<usize>,
    pub pixel_height: usize,
    pub pixel_width: usize,
    pub trajectory_file: String,
    pub nulls_file: String,
    pub object_mask: Option<ObjectMaskManifest>,
}

fn array3_to_vec<T: Scalar>(a: &Array3<T>) -> Vec<f32> {
    a.iter().map(|v| v.to_f32_lossy()).collect()
}

/// Saves the record files into `dir`. Optional images are written when given.
pub fn save_record<T: Scalar>(
    dir: &Path,
    record: &InversionRecord<T>,
    model: &str,
    source: Option<&PixelImage<T>>,
    reconstruction: Option<&PixelImage<T>>,
) -> Result<RecordManifest> {
    record.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let traj = &record.trajectory;
    let (c, h, w) = traj.source().data.dim();
    let trajectory = TensorStack {
        dims: [c as u32, h as u32, w as u32, 1],
        data: traj.latents.iter().map(|l| array3_to_vec(&l.data)).collect(),
    };
    atomic_write(&dir.join(TRAJECTORY_FILE), &encode_tensors(&trajectory)?)?;
    let (s, e) = traj.source_embedding.embedding.dim();
    let nulls = TensorStack {
        dims: [s as u32, e as u32, 1, 1],
        data: record
            .null_embeddings
            .iter()
            .map(|n| n.embedding.iter().map(|v| v.to_f32_lossy()).collect())
            .collect(),
    };
    atomic_write(&dir.join(NULLS_FILE), &encode_tensors(&nulls)?)?;

    let object_mask = match &record.object_mask {
        Some(m) => {
            write_mask_png(&dir.join(OBJECT_MASK_FILE), &m.pixel_mask)?;
            Some(ObjectMaskManifest {
                file: OBJECT_MASK_FILE.into(),
                provenance: m.provenance,
                dilation_radius: m.dilation_radius,
                coverage: m.pixel_mask.coverage(),
            })
        }
        None => None,
    };
    if let Some(img) = source {
        write_rgb_png(&dir.join(SOURCE_FILE), img)?;
    }
    if let Some(img) = reconstruction {
        write_rgb_png(&dir.join(RECONSTRUCTION_FILE), img)?;
    }
    let source_latent = traj.source();
    let manifest = RecordManifest {
        format_version: TENSOR_VERSION,
        model: model.to_string(),
        caption: traj.source_embedding.prompt_text.clone(),
        guidance_scale: record.guidance_scale,
        reconstruction_psnr: record.reconstruction_psnr,
        num_inference_steps: traj.schedule.num_inference_steps(),
        train_steps: traj.schedule.train_steps(),
        timesteps: traj.schedule.timesteps().to_vec(),
        pixel_height: source_latent.pixel_height,
        pixel_width: source_latent.pixel_width,
        trajectory_file: TRAJECTORY_FILE.into(),
        nulls_file: NULLS_FILE.into(),
        object_mask,
    };
    write_json(&dir.join(RECORD_FILE), &manifest)?;
    Ok(manifest)
}

pub fn has_record(dir: &Path) -> bool {
    dir.join(RECORD_FILE).is_file()
}

/// Loads a record saved by [`save_record`], rebuilding embeddings' token
/// metadata and the schedule with `backbone`.
pub fn load_record<T: Scalar, B: Backbone<T> + ?Sized>(
    dir: &Path,
    backbone: &B,
) -> Result<(InversionRecord<T>, RecordManifest)> {
    let manifest_path = dir.join(RECORD_FILE);
    let manifest: RecordManifest = read_json(&manifest_path)?;
    if manifest.model != backbone.spec().name {
        return Err(Error::format(
            &manifest_path,
            format!("record was made with model {:?}, loaded with {:?}", manifest.model, backbone.spec().name),
        ));
    }
    let schedule = backbone.make_schedule(manifest.num_inference_steps)?;
    if schedule.timesteps() != manifest.timesteps.as_slice() || schedule.train_steps() != manifest.train_steps {
        return Err(Error::format(&manifest_path, "schedule does not match this model"));
    }
    let size = backbone.spec().working_resolution;
    if (manifest.pixel_height, manifest.pixel_width) != (size, size) {
        return Err(Error::format(
            &manifest_path,
            format!(
                "record is {}x{} px, model works at {size}x{size}",
                manifest.pixel_width, manifest.pixel_height
            ),
        ));
    }
    let n = manifest.num_inference_steps;

    let traj_path = dir.join(&manifest.trajectory_file);
    let stack = decode_tensors(&traj_path, &fs::read(&traj_path).map_err(|e| Error::io(&traj_path, e))?)?;
    let [c, h, w, one] = stack.dims.map(|d| d as usize);
    if stack.data.len() != n + 1 || one != 1 {
        return Err(Error::format(&traj_path, format!("expected {} latents, found {}", n + 1, stack.data.len())));
    }
    let latents = stack
        .data
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let data = Array3::from_shape_vec((c, h, w), v.into_iter().map(|x| T::of(x as f64)).collect())
                .map_err(|e| Error::format(&traj_path, e.to_string()))?;
            let mut l = LatentImage::new(data, manifest.pixel_height, manifest.pixel_width);
            l.timestep = if i == 0 { None } else { Some(schedule.timesteps()[n - i]) };
            Ok(l)
        })
        .collect::<Result<Vec<_>>>()?;

    let nulls_path = dir.join(&manifest.nulls_file);
    let stack = decode_tensors(&nulls_path, &fs::read(&nulls_path).map_err(|e| Error::io(&nulls_path, e))?)?;
    let [s, e, ..] = stack.dims.map(|d| d as usize);
    if stack.data.len() != n {
        return Err(Error::format(&nulls_path, format!("expected {n} embeddings, found {}", stack.data.len())));
    }
    let null = backbone.encode_text("");
    let null_embeddings = stack
        .data
        .into_iter()
        .map(|v| {
            let emb = Array2::from_shape_vec((s, e), v.into_iter().map(|x| T::of(x as f64)).collect())
                .map_err(|err| Error::format(&nulls_path, err.to_string()))?;
            Ok(null.with_embedding(emb))
        })
        .collect::<Result<Vec<TextEmbedding<T>>>>()?;

    let object_mask = match &manifest.object_mask {
        Some(m) => {
            let pixel_mask = read_mask_png(&dir.join(&m.file))?;
            let opts = MaskOptions {
                dilation_radius: m.dilation_radius,
                min_area: 0.0,
                ..MaskOptions::default()
            };
            Some(ObjectMask::new(pixel_mask, m.provenance, &opts)?)
        }
        None => None,
    };
    let record = InversionRecord {
        trajectory: LatentTrajectory {
            latents,
            schedule,
            source_embedding: backbone.encode_text(&manifest.caption),
        },
        null_embeddings,
        guidance_scale: manifest.guidance_scale,
        reconstruction_psnr: manifest.reconstruction_psnr,
        object_mask,
    };
    record.validate()?;
    Ok((record, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMaskManifest {
    pub file: String,
    pub threshold: f64,
    pub token_indices: Vec<usize>,
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultManifest {
    pub cell: usize,
    pub ordinal: usize,
    pub image: String,
    pub target_mask: TargetMaskManifest,
    pub blend_mask: String,
    pub blend_mask_coverage: f64,
    pub config: ResolvedEdit,
    pub timings: BTreeMap<String, f64>,
    /// Named numeric checks, for example PSNR against the reconstruction.
    #[serde(default)]
    pub checks: BTreeMap<String, f64>,
}

pub fn result_stem(cell: usize, ordinal: usize) -> String {
    format!("cell_{cell}_{ordinal}")
}

pub fn result_manifest_path(session_dir: &Path, cell: usize, ordinal: usize) -> PathBuf {
    session_dir
        .join(RESULTS_DIR)
        .join(format!("{}.json", result_stem(cell, ordinal)))
}

/// Writes `results/cell_<k>_<n>.png` and its sidecars under `session_dir`.
pub fn save_result<T: Scalar>(
    session_dir: &Path,
    cell: usize,
    ordinal: usize,
    result: &EditResult<T>,
    checks: BTreeMap<String, f64>,
) -> Result<ResultManifest> {
    let dir = session_dir.join(RESULTS_DIR);
    let stem = result_stem(cell, ordinal);
    let (h, w) = (result.image.height(), result.image.width());
    let image = format!("{stem}.png");
    write_rgb_png(&dir.join(&image), &result.image)?;
    let target_file = format!("{stem}_target_mask.png");
    write_mask_png(&dir.join(&target_file), &mask_to_pixels(&result.target_mask.binary, h, w)?)?;
    let blend_file = format!("{stem}_blend_mask.png");
    write_mask_png(&dir.join(&blend_file), &mask_to_pixels(&result.blend_mask, h, w)?)?;
    let manifest = ResultManifest {
        cell,
        ordinal,
        image,
        target_mask: target_manifest(&result.target_mask, target_file),
        blend_mask: blend_file,
        blend_mask_coverage: result.blend_mask.coverage(),
        config: result.config_echo.clone(),
        timings: result.timings.clone(),
        checks,
    };
    write_json(&dir.join(format!("{stem}.json")), &manifest)?;
    Ok(manifest)
}

fn target_manifest(mask: &TargetMask, file: String) -> TargetMaskManifest {
    TargetMaskManifest {
        file,
        threshold: mask.threshold,
        token_indices: mask.token_indices.clone(),
        coverage: mask.binary.coverage(),
    }
}

/// Result manifests in `session_dir/results`, sorted by cell then ordinal.
pub fn list_results(session_dir: &Path) -> Result<Vec<ResultManifest>> {
    let dir = session_dir.join(RESULTS_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        let is_manifest = path.extension().is_some_and(|e| e == "json")
            && path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("cell_"));
        if is_manifest {
            out.push(read_json::<ResultManifest>(&path)?);
        }
    }
    out.sort_by_key(|m| (m.cell, m.ordinal));
    Ok(out)
}

/// Advisory exclusive lock on a data directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    _file: File,
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        match file.try_lock() {
            Ok(()) => Ok(Self { _file: file, path }),
            Err(std::fs::TryLockError::WouldBlock) => Err(Error::invalid(format!(
                "{} is locked by another process",
                dir.display()
            ))),
            Err(std::fs::TryLockError::Error(e)) => Err(Error::io(&path, e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let stack = TensorStack {
            dims: [2, 1, 1, 1],
            data: vec![vec![1.0, -2.5]],
        };
        let bytes = encode_tensors(&stack).unwrap();
        assert_eq!(&bytes[..4], b"ICTR");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), TENSOR_HEADER_LEN + 8);
        assert_eq!(f32::from_le_bytes(bytes[28..32].try_into().unwrap()), -2.5);
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let stack = TensorStack {
            dims: [3, 1, 1, 1],
            data: vec![vec![1.0, 2.0, 3.0]; 2],
        };
        let bytes = encode_tensors(&stack).unwrap();
        let p = Path::new("x.bin");
        assert!(matches!(decode_tensors(p, &bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensors(p, &bad), Err(Error::Format { .. })));
        assert!(matches!(decode_tensors(p, &bytes[..10]), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn tensor_round_trip(
            dims in (1u32..4, 1u32..4, 1u32..3, 1u32..3),
            count in 0usize..4,
            seed in any::<u32>(),
        ) {
            let dims = [dims.0, dims.1, dims.2, dims.3];
            let per: usize = dims.iter().map(|&d| d as usize).product();
            let data: Vec<Vec<f32>> = (0..count)
                .map(|k| (0..per).map(|i| ((seed as f32) * 1e-3 + (k * per + i) as f32).sin() * 1e3).collect())
                .collect();
            let stack = TensorStack { dims, data };
            let back = decode_tensors(Path::new("t"), &encode_tensors(&stack).unwrap()).unwrap();
            prop_assert_eq!(back, stack);
        }

        #[test]
        fn mask_png_round_trip(cells in proptest::collection::vec(any::<bool>(), 1..200), width in 1usize..20) {
            let h = cells.len().div_ceil(width);
            let mask = BinaryMask::from_fn(h, width, |y, x| cells.get(y * width + x).copied().unwrap_or(false));
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.png");
            write_mask_png(&p, &mask).unwrap();
            prop_assert_eq!(read_mask_png(&p).unwrap(), mask);
        }
    }

    #[test]
    fn rgb_png_round_trip_is_exact_on_8bit_values() {
        let img = PixelImage::<f32>::from_fn(5, 7, |y, x| {
            [(y * 40) as f32 / 255.0, (x * 30) as f32 / 255.0, 128.0 / 255.0]
        });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        write_rgb_png(&p, &img).unwrap();
        let back: PixelImage<f32> = read_rgb_png(&p).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/f.json");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        let leftovers: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let first = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(first);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }
}
