//! Loading image/mask datasets from disk.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use scalessl_core::synth::{DatasetManifest, MANIFEST_FILE};
use scalessl_core::{ImageRecord, ScaleSpec, Split};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tiff::decoder::{Decoder, DecodingResult};

use crate::HarnessError;

/// Intensity statistics used to standardize a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub records: Vec<ImageRecord>,
    pub num_classes: usize,
    pub stats: NormStats,
}

impl Dataset {
    pub fn base_l(&self) -> Option<usize> {
        ScaleSpec::base_l_of(self.records.iter().map(|r| r.shape()))
    }

    pub fn split(&self, split: Split) -> Vec<ImageRecord> {
        self.records.iter().filter(|r| r.split == split).cloned().collect()
    }
}

/// Reads a dataset and standardizes intensities to zero mean, unit variance.
pub fn ingest_dataset(path: &Path) -> Result<Dataset, HarnessError> {
    let mut ds = read_dataset(path)?;
    let stats = dataset_stats(&ds.records);
    for r in &mut ds.records {
        r.map_pixels(|v| ((v as f64 - stats.mean) / stats.std) as f32)?;
    }
    ds.stats = stats;
    Ok(ds)
}

/// Reads a dataset without normalization. `path` may be a manifest file, a
/// directory holding `manifest.json`, or a directory of `<id>.png` /
/// `<id>_mask.png` pairs and TIFF stacks.
pub fn read_dataset(path: &Path) -> Result<Dataset, HarnessError> {
    let manifest = if path.is_file() {
        Some(path.to_path_buf())
    } else if path.join(MANIFEST_FILE).is_file() {
        Some(path.join(MANIFEST_FILE))
    } else {
        None
    };
    let ds = match manifest {
        Some(m) => read_manifest(&m)?,
        None => read_directory(path)?,
    };
    if ds.records.is_empty() {
        return Err(HarnessError::Format(format!(
            "no images found under {}",
            path.display()
        )));
    }
    for r in &ds.records {
        if r.split != Split::Pretrain && r.mask().is_none() {
            return Err(HarnessError::MissingMask(r.id.clone()));
        }
    }
    Ok(ds)
}

fn dataset_stats(records: &[ImageRecord]) -> NormStats {
    let mut n = 0.0;
    let mut sum = 0.0;
    let mut sq = 0.0;
    for r in records {
        for &v in r.pixels() {
            n += 1.0;
            sum += v as f64;
            sq += (v as f64) * (v as f64);
        }
    }
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0);
    NormStats {
        mean,
        std: if var > 0.0 { var.sqrt() } else { 1.0 },
    }
}

fn read_manifest(path: &Path) -> Result<Dataset, HarnessError> {
    let manifest = DatasetManifest::load(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let (lo, hi) = manifest.intensity_range;
    let mut records = Vec::with_capacity(manifest.records.len());
    for e in &manifest.records {
        let pixels = read_png_gray(&root.join(&e.image), Some((lo, hi)))?;
        if pixels.dim() != (e.height, e.width) {
            return Err(HarnessError::InconsistentShape(format!(
                "{}: manifest says {}x{}, file is {:?}",
                e.id,
                e.height,
                e.width,
                pixels.dim()
            )));
        }
        let mask = match &e.mask {
            Some(m) => Some(read_png_mask(&root.join(m))?),
            None => None,
        };
        records.push(make_record(e.id.clone(), pixels, mask, e.split)?);
    }
    let name = manifest
        .spec
        .as_ref()
        .map(|s| s.kind.to_string())
        .unwrap_or_else(|| dir_name(root));
    Ok(Dataset {
        name,
        records,
        num_classes: manifest.num_classes,
        stats: NormStats { mean: 0.0, std: 1.0 },
    })
}

fn dir_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

fn make_record(
    id: String,
    pixels: Array2<f32>,
    mask: Option<Array2<u8>>,
    split: Split,
) -> Result<ImageRecord, HarnessError> {
    if let Some(m) = &mask {
        if m.dim() != pixels.dim() {
            return Err(HarnessError::InconsistentShape(format!(
                "{id}: image {:?} but mask {:?}",
                pixels.dim(),
                m.dim()
            )));
        }
    }
    Ok(ImageRecord::new(id, pixels, mask, split)?)
}

/// Deterministic 60/20/10/10 split from a hash of the id.
pub fn hash_split(id: &str) -> Split {
    let d = Sha256::digest(id.as_bytes());
    let v = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % 100;
    match v {
        0..=59 => Split::Pretrain,
        60..=79 => Split::Train,
        80..=89 => Split::Val,
        _ => Split::Test,
    }
}

fn is_tiff(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("tif" | "tiff")
    )
}

fn is_png(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

fn mask_sibling(p: &Path) -> PathBuf {
    let stem = p.file_stem().unwrap_or_default().to_string_lossy();
    let ext = p.extension().unwrap_or_default().to_string_lossy();
    p.with_file_name(format!("{stem}_mask.{ext}"))
}

fn read_directory(dir: &Path) -> Result<Dataset, HarnessError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_png(p) || is_tiff(p))
        .filter(|p| !p.file_stem().unwrap_or_default().to_string_lossy().ends_with("_mask"))
        .collect();
    files.sort();
    let mut records = Vec::new();
    let mut max_label = 0u8;
    for f in files {
        let stem = f.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let mask_path = mask_sibling(&f);
        if is_tiff(&f) {
            let pages = read_tiff_stack(&f)?;
            let masks = if mask_path.is_file() {
                let m = read_tiff_stack(&mask_path)?;
                if m.len() != pages.len() {
                    return Err(HarnessError::InconsistentShape(format!(
                        "{stem}: {} image pages but {} mask pages",
                        pages.len(),
                        m.len()
                    )));
                }
                m.into_iter()
                    .map(|a| Some(a.mapv(|v| v.round().clamp(0.0, 255.0) as u8)))
                    .collect()
            } else {
                vec![None; pages.len()]
            };
            for (i, (img, mask)) in pages.into_iter().zip(masks).enumerate() {
                let id = format!("{stem}_{i:03}");
                if let Some(m) = &mask {
                    max_label = max_label.max(m.iter().copied().max().unwrap_or(0));
                }
                let split = if mask.is_some() {
                    hash_split(&id)
                } else {
                    Split::Pretrain
                };
                records.push(make_record(id, img, mask, split)?);
            }
        } else {
            let img = read_png_gray(&f, None)?;
            let mask = if mask_path.is_file() {
                Some(read_png_mask(&mask_path)?)
            } else {
                None
            };
            if let Some(m) = &mask {
                max_label = max_label.max(m.iter().copied().max().unwrap_or(0));
            }
            let split = if mask.is_some() {
                hash_split(&stem)
            } else {
                Split::Pretrain
            };
            records.push(make_record(stem, img, mask, split)?);
        }
    }
    Ok(Dataset {
        name: dir_name(dir),
        records,
        num_classes: if max_label > 1 { max_label as usize + 1 } else { 1 },
        stats: NormStats { mean: 0.0, std: 1.0 },
    })
}

/// Grayscale PNG as floats; 16-bit values are mapped back through `range`.
fn read_png_gray(path: &Path, range: Option<(f64, f64)>) -> Result<Array2<f32>, HarnessError> {
    let img = image::open(path).map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))?;
    let g = img.into_luma16();
    let (w, h) = g.dimensions();
    let (lo, hi) = range.unwrap_or((0.0, 65535.0));
    let scale = (hi - lo) / 65535.0;
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        (lo + g.get_pixel(c as u32, r as u32)[0] as f64 * scale) as f32
    }))
}

fn read_png_mask(path: &Path) -> Result<Array2<u8>, HarnessError> {
    let img = image::open(path).map_err(|e| HarnessError::Format(format!("{}: {e}", path.display())))?;
    let g = img.into_luma8();
    let (w, h) = g.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
        g.get_pixel(c as u32, r as u32)[0]
    }))
}

/// Every page of a grayscale TIFF as a float image.
pub fn read_tiff_stack(path: &Path) -> Result<Vec<Array2<f32>>, HarnessError> {
    let fmt = |e: tiff::TiffError| HarnessError::Format(format!("{}: {e}", path.display()));
    let mut dec = Decoder::new(BufReader::new(File::open(path)?)).map_err(fmt)?;
    let mut pages = Vec::new();
    loop {
        let (w, h) = dec.dimensions().map_err(fmt)?;
        let data: Vec<f32> = match dec.read_image().map_err(fmt)? {
            DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
            DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
            DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
            DecodingResult::I8(v) => v.into_iter().map(f32::from).collect(),
            DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
            DecodingResult::F32(v) => v,
            DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
            _ => {
                return Err(HarnessError::Format(format!(
                    "{}: unsupported sample type",
                    path.display()
                )))
            }
        };
        let page = Array2::from_shape_vec((h as usize, w as usize), data).map_err(|_| {
            HarnessError::Format(format!(
                "{}: page {} is not single-channel",
                path.display(),
                pages.len()
            ))
        })?;
        pages.push(page);
        if !dec.more_images() {
            break;
        }
        dec.next_image().map_err(fmt)?;
    }
    Ok(pages)
}

/// `floor(L / divisor)` rounded down to a multiple of the encoder stride.
pub fn resolve_patch_size(
    records: &[ImageRecord],
    divisor: usize,
    stride_product: usize,
) -> Result<usize, HarnessError> {
    if ![2, 4, 8].contains(&divisor) {
        return Err(HarnessError::Invalid(format!(
            "divisor must be 2, 4 or 8, got {divisor}"
        )));
    }
    let base = ScaleSpec::base_l_of(records.iter().map(|r| r.shape()))
        .ok_or_else(|| HarnessError::Invalid("no records".into()))?;
    floor_to_stride(base / divisor, stride_product)
}

/// Largest multiple of `stride_product` not above `size`; at least 8.
pub fn floor_to_stride(size: usize, stride_product: usize) -> Result<usize, HarnessError> {
    let p = size / stride_product.max(1) * stride_product.max(1);
    if p < 8 {
        return Err(HarnessError::TooSmall(p));
    }
    Ok(p)
}
