//! On-disk formats: JSON manifests with PNG images and RLE masks, the GKV1
//! raw volume container, the checkpoint tensor archive, and prediction
//! records.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curation::Volume3D;
use crate::datamodel::{DatasetManifest, ImageSample, Modality, Split, TaskKind, VqaSample};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png: {0}")]
    Png(#[from] image::ImageError),
    #[error("bad file format: {0}")]
    Format(String),
}

/// Run-length encoding of a binary mask: row-major alternating
/// zero-run/one-run counts, starting with a zero-run.
pub fn rle_encode(mask: &Array2<u8>) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = 0u8;
    let mut run = 0usize;
    for &v in mask.iter() {
        let bit = (v > 0) as u8;
        if bit == current {
            run += 1;
        } else {
            runs.push(run);
            current = bit;
            run = 1;
        }
    }
    runs.push(run);
    runs
}

pub fn rle_decode(runs: &[usize], shape: (usize, usize)) -> Result<Array2<u8>, IoError> {
    let total: usize = runs.iter().sum();
    if total != shape.0 * shape.1 {
        return Err(IoError::Format(format!(
            "rle length {total} does not cover {}x{}",
            shape.0, shape.1
        )));
    }
    let mut flat = Vec::with_capacity(total);
    for (i, &run) in runs.iter().enumerate() {
        let bit = (i % 2) as u8;
        flat.extend(std::iter::repeat(bit).take(run));
    }
    Array2::from_shape_vec(shape, flat).map_err(|e| IoError::Format(e.to_string()))
}

pub fn save_mask_png(path: &Path, mask: &Array2<u8>) -> Result<(), IoError> {
    let (h, w) = mask.dim();
    let buf: Vec<u8> = mask.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| IoError::Format("mask buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn load_mask_png(path: &Path) -> Result<Array2<u8>, IoError> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    let flat: Vec<u8> = img.into_raw().iter().map(|&v| (v >= 128) as u8).collect();
    Array2::from_shape_vec((h as usize, w as usize), flat)
        .map_err(|e| IoError::Format(e.to_string()))
}

/// Save [0,1] pixels as 16-bit grayscale PNG.
pub fn save_image_png(path: &Path, pixels: &Array2<f64>) -> Result<(), IoError> {
    let (h, w) = pixels.dim();
    let buf: Vec<u16> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| IoError::Format("image buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn load_image_png(path: &Path) -> Result<Array2<f64>, IoError> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let flat: Vec<f64> = img.into_raw().iter().map(|&v| v as f64 / 65535.0).collect();
    Array2::from_shape_vec((h as usize, w as usize), flat)
        .map_err(|e| IoError::Format(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageRecord {
    path: String,
    modality: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    volume_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    slice_index: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum MaskRecord {
    Rle { rle: Vec<usize>, shape: [usize; 2] },
    Path { path: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    image: ImageRecord,
    question: String,
    answer: String,
    task: TaskKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    target_mask: Option<MaskRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    seed: u64,
    samples: Vec<SampleRecord>,
    split: BTreeMap<String, Split>,
}

/// Write manifest.json plus one PNG per image under `dir/images/`. Masks
/// are embedded as RLE.
pub fn save_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<PathBuf, IoError> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir)?;
    let mut records = Vec::with_capacity(manifest.samples.len());
    for sample in &manifest.samples {
        let rel = format!("images/{}.png", sample.id);
        save_image_png(&dir.join(&rel), &sample.image.pixels)?;
        records.push(SampleRecord {
            id: sample.id.clone(),
            image: ImageRecord {
                path: rel,
                modality: sample.image.modality.as_str().to_string(),
                volume_id: sample.image.volume_id.clone(),
                slice_index: sample.image.slice_index,
            },
            question: sample.question.clone(),
            answer: sample.answer.clone(),
            task: sample.task,
            target_mask: sample.target_mask.as_ref().map(|m| MaskRecord::Rle {
                rle: rle_encode(m),
                shape: [m.dim().0, m.dim().1],
            }),
        });
    }
    let file = ManifestFile {
        seed: manifest.seed,
        samples: records,
        split: manifest.split.clone(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&file)?)?;
    Ok(path)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, IoError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let file: ManifestFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    let mut samples = Vec::with_capacity(file.samples.len());
    for rec in file.samples {
        let pixels = load_image_png(&dir.join(&rec.image.path))?;
        let modality: Modality = rec
            .image
            .modality
            .parse()
            .map_err(IoError::Format)?;
        let target_mask = match rec.target_mask {
            None => None,
            Some(MaskRecord::Rle { rle, shape }) => {
                Some(rle_decode(&rle, (shape[0], shape[1]))?)
            }
            Some(MaskRecord::Path { path: p }) => Some(load_mask_png(&dir.join(p))?),
        };
        samples.push(VqaSample {
            id: rec.id,
            image: ImageSample {
                pixels,
                modality,
                volume_id: rec.image.volume_id,
                slice_index: rec.image.slice_index,
            },
            question: rec.question,
            answer: rec.answer,
            target_mask,
            task: rec.task,
        });
    }
    Ok(DatasetManifest { samples, split: file.split, seed: file.seed })
}

const GKV_MAGIC: &[u8; 4] = b"GKV1";
const GKV_DTYPE_F32: u8 = 0;
const GKV_DTYPE_U8: u8 = 1;

/// Write a raw volume container: magic "GKV1", dtype code, D,H,W as
/// little-endian u32, then row-major data.
pub fn save_gkv_volume(path: &Path, voxels: &Array3<f64>) -> Result<(), IoError> {
    let (d, h, w) = voxels.dim();
    let mut f = fs::File::create(path)?;
    f.write_all(GKV_MAGIC)?;
    f.write_all(&[GKV_DTYPE_F32])?;
    for dim in [d, h, w] {
        f.write_all(&(dim as u32).to_le_bytes())?;
    }
    for &v in voxels.iter() {
        f.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn save_gkv_mask(path: &Path, mask: &Array3<u8>) -> Result<(), IoError> {
    let (d, h, w) = mask.dim();
    let mut f = fs::File::create(path)?;
    f.write_all(GKV_MAGIC)?;
    f.write_all(&[GKV_DTYPE_U8])?;
    for dim in [d, h, w] {
        f.write_all(&(dim as u32).to_le_bytes())?;
    }
    let flat: Vec<u8> = mask.iter().cloned().collect();
    f.write_all(&flat)?;
    Ok(())
}

fn read_gkv_header(f: &mut impl Read) -> Result<(u8, usize, usize, usize), IoError> {
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != GKV_MAGIC {
        return Err(IoError::Format("not a GKV1 file".into()));
    }
    let mut dtype = [0u8; 1];
    f.read_exact(&mut dtype)?;
    let mut dims = [0usize; 3];
    for dim in &mut dims {
        let mut b = [0u8; 4];
        f.read_exact(&mut b)?;
        *dim = u32::from_le_bytes(b) as usize;
    }
    Ok((dtype[0], dims[0], dims[1], dims[2]))
}

pub fn load_gkv_volume(path: &Path) -> Result<Array3<f64>, IoError> {
    let mut f = fs::File::open(path)?;
    let (dtype, d, h, w) = read_gkv_header(&mut f)?;
    if dtype != GKV_DTYPE_F32 {
        return Err(IoError::Format(format!("expected f32 volume, dtype code {dtype}")));
    }
    let mut data = Vec::with_capacity(d * h * w);
    let mut buf = [0u8; 4];
    for _ in 0..d * h * w {
        f.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    Array3::from_shape_vec((d, h, w), data).map_err(|e| IoError::Format(e.to_string()))
}

pub fn load_gkv_mask(path: &Path) -> Result<Array3<u8>, IoError> {
    let mut f = fs::File::open(path)?;
    let (dtype, d, h, w) = read_gkv_header(&mut f)?;
    if dtype != GKV_DTYPE_U8 {
        return Err(IoError::Format(format!("expected u8 mask, dtype code {dtype}")));
    }
    let mut data = vec![0u8; d * h * w];
    f.read_exact(&mut data)?;
    Array3::from_shape_vec((d, h, w), data).map_err(|e| IoError::Format(e.to_string()))
}

/// Load a volume plus its optional `<stem>.mask.gkv` sibling.
pub fn load_gkv_pair(path: &Path, modality: Modality) -> Result<Volume3D, IoError> {
    let voxels = load_gkv_volume(path)?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| IoError::Format("bad volume path".into()))?
        .to_string();
    let mask_path = path.with_file_name(format!("{stem}.mask.gkv"));
    let mut vol = Volume3D::new(stem, voxels, modality);
    if mask_path.exists() {
        vol.masks = Some(load_gkv_mask(&mask_path)?);
    }
    Ok(vol)
}

const CKPT_MAGIC: &[u8; 4] = b"GKPT";

#[derive(Debug, Serialize, Deserialize)]
struct TensorIndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: serde_json::Value,
    tensors: Vec<TensorIndexEntry>,
}

/// Single-archive checkpoint: magic, u32 header length, JSON header
/// (config + name→shape,offset index), then row-major little-endian f32
/// tensor data.
pub fn save_tensor_archive(
    path: &Path,
    config: serde_json::Value,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
) -> Result<(), IoError> {
    let mut offset = 0usize;
    let mut index = Vec::new();
    for (name, shape, data) in tensors {
        index.push(TensorIndexEntry { name: name.clone(), shape: shape.clone(), offset });
        offset += data.len();
    }
    let header = serde_json::to_vec(&CheckpointHeader { config, tensors: index })?;
    let mut f = fs::File::create(path)?;
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&(header.len() as u32).to_le_bytes())?;
    f.write_all(&header)?;
    for (_, _, data) in tensors {
        for &v in data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

#[allow(clippy::type_complexity)]
pub fn load_tensor_archive(
    path: &Path,
) -> Result<(serde_json::Value, Vec<(String, Vec<usize>, Vec<f32>)>), IoError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 8 || &bytes[0..4] != CKPT_MAGIC {
        return Err(IoError::Format("not a GKPT checkpoint".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + header_len])?;
    let data_start = 8 + header_len;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let len: usize = entry.shape.iter().product();
        let start = data_start + entry.offset * 4;
        let end = start + len * 4;
        if end > bytes.len() {
            return Err(IoError::Format(format!("tensor {} out of bounds", entry.name)));
        }
        let data: Vec<f32> = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((entry.name, entry.shape, data));
    }
    Ok((header.config, tensors))
}

/// One line of the predictions JSONL consumed by `eval`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub answer: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
}

pub fn save_predictions(path: &Path, records: &[PredictionRecord]) -> Result<(), IoError> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>, IoError> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(IoError::from))
        .collect()
}
