//! Procedural image/mask datasets with thin, small, and large targets.

use std::f64::consts::PI;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use ndarray::Array2;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;
use crate::types::{ImageRecord, ShapeError, Split};

pub const GENERATOR_VERSION: &str = "scalessl-synth-1";
pub const MANIFEST_SCHEMA: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

const MAX_THIN_FRACTION: f64 = 0.05;
const MAX_BLOB_FRACTION: f64 = 0.08;
const REGION_FRACTION: (f64, f64) = (0.25, 0.60);

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    ThinCurves,
    SmallBlobs,
    LargeBands,
    LargeRegions,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] = [
        SynthKind::ThinCurves,
        SynthKind::SmallBlobs,
        SynthKind::LargeBands,
        SynthKind::LargeRegions,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::ThinCurves => "thin_curves",
            SynthKind::SmallBlobs => "small_blobs",
            SynthKind::LargeBands => "large_bands",
            SynthKind::LargeRegions => "large_regions",
        }
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SynthKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SynthKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| SynthError::Spec(format!("unknown kind {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    None,
    LayeredReflectors,
    Granular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub image_size: (usize, usize),
    pub count: usize,
    /// Expected structures per image.
    pub density: f64,
    pub thickness_px: Option<usize>,
    pub radius_px: Option<usize>,
    pub band_count: Option<usize>,
    pub noise_sigma: f64,
    pub texture: Texture,
    pub seed: u64,
    /// Pretrain / train / val / test shares.
    #[serde(default = "default_splits")]
    pub split_fractions: [f64; 4],
}

fn default_splits() -> [f64; 4] {
    [0.6, 0.2, 0.1, 0.1]
}

impl SynthSpec {
    pub fn default_for(kind: SynthKind) -> Self {
        let base = Self {
            kind,
            image_size: (96, 96),
            count: 500,
            density: 1.0,
            thickness_px: None,
            radius_px: None,
            band_count: None,
            noise_sigma: 0.2,
            texture: Texture::None,
            seed: 0,
            split_fractions: default_splits(),
        };
        match kind {
            SynthKind::ThinCurves => Self {
                density: 3.0,
                thickness_px: Some(2),
                texture: Texture::LayeredReflectors,
                ..base
            },
            SynthKind::SmallBlobs => Self {
                density: 8.0,
                radius_px: Some(4),
                texture: Texture::Granular,
                ..base
            },
            SynthKind::LargeBands => Self {
                band_count: Some(4),
                texture: Texture::LayeredReflectors,
                ..base
            },
            SynthKind::LargeRegions => Self {
                texture: Texture::Granular,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.to_string()));
        let (h, w) = self.image_size;
        if h < 16 || w < 16 {
            return bad("image sides must be at least 16");
        }
        if !(self.density >= 0.0 && self.density.is_finite()) {
            return bad("density must be a finite non-negative number");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative");
        }
        let sum: f64 = self.split_fractions.iter().sum();
        if self.split_fractions.iter().any(|&f| f < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return bad("split fractions must be non-negative and sum to 1");
        }
        match self.kind {
            SynthKind::ThinCurves => match self.thickness_px {
                Some(t) if (1..=3).contains(&t) => {}
                _ => return bad("thin_curves needs thickness_px in 1..=3"),
            },
            SynthKind::SmallBlobs => match self.radius_px {
                Some(r) if (1..=5).contains(&r) => {}
                _ => return bad("small_blobs needs radius_px in 1..=5"),
            },
            SynthKind::LargeBands => match self.band_count {
                // Every band must be able to span at least a tenth of the rows.
                Some(k) if (1..=10).contains(&k) && h / k >= 4 => {}
                _ => return bad("large_bands needs band_count in 1..=10 with at least 4 rows per band"),
            },
            SynthKind::LargeRegions => {}
        }
        Ok(())
    }

    /// Number of mask classes: 1 means binary foreground/background.
    pub fn num_classes(&self) -> usize {
        match self.kind {
            SynthKind::LargeBands => self.band_count.unwrap_or(1).max(2),
            _ => 1,
        }
    }
}

fn image_rng(spec: &SynthSpec, i: usize) -> RngStream {
    RngStream::new(spec.seed, format!("synth/{}/{i}", spec.kind))
}

fn poisson(lambda: f64, rng: &mut RngStream) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("positive rate").sample(rng) as usize
}

fn add_noise(img: &mut Array2<f32>, sigma: f64, rng: &mut RngStream) {
    if sigma > 0.0 {
        img.mapv_inplace(|v| v + (sigma * rng.normal()) as f32);
    }
}

/// Sum of sinusoids in a warped depth coordinate.
struct Reflectors {
    waves: Vec<(f64, f64, f64)>,
    undulation: (f64, f64, f64),
}

impl Reflectors {
    fn sample(rng: &mut RngStream, wavelength: (f64, f64)) -> Self {
        let waves = (0..3)
            .map(|_| {
                (
                    rng.uniform_range(wavelength.0, wavelength.1),
                    rng.uniform_range(0.4, 1.0),
                    rng.uniform_range(0.0, 2.0 * PI),
                )
            })
            .collect();
        let undulation = (
            rng.uniform_range(1.0, 4.0),
            rng.uniform_range(40.0, 120.0),
            rng.uniform_range(0.0, 2.0 * PI),
        );
        Self { waves, undulation }
    }

    fn at(&self, r: f64, c: f64) -> f64 {
        let (ua, ul, up) = self.undulation;
        let depth = r + ua * (2.0 * PI * c / ul + up).sin();
        let norm: f64 = self.waves.iter().map(|w| w.1).sum();
        self.waves
            .iter()
            .map(|&(l, a, p)| a * (2.0 * PI * depth / l + p).sin())
            .sum::<f64>()
            / norm
    }
}

/// Box-blurred white noise rescaled to unit standard deviation.
fn granular(shape: (usize, usize), rng: &mut RngStream) -> Array2<f32> {
    let mut g = Array2::from_shape_fn(shape, |_| rng.normal() as f32);
    for _ in 0..2 {
        let src = g.clone();
        let (h, w) = shape;
        for r in 0..h {
            for c in 0..w {
                let mut s = 0.0;
                let mut n = 0.0;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                        if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                            s += src[[rr as usize, cc as usize]];
                            n += 1.0;
                        }
                    }
                }
                g[[r, c]] = s / n;
            }
        }
    }
    let mean = g.mean().unwrap_or(0.0);
    let std = g.mapv(|v| (v - mean).powi(2)).mean().unwrap_or(1.0).sqrt().max(1e-6);
    g.mapv(|v| (v - mean) / std)
}

fn base_texture(texture: Texture, shape: (usize, usize), rng: &mut RngStream) -> Array2<f32> {
    match texture {
        Texture::None => Array2::zeros(shape),
        Texture::Granular => granular(shape, rng).mapv(|v| 0.5 * v),
        Texture::LayeredReflectors => {
            let refl = Reflectors::sample(rng, (5.0, 14.0));
            Array2::from_shape_fn(shape, |(r, c)| refl.at(r as f64, c as f64) as f32)
        }
    }
}

fn foreground_fraction(mask: &Array2<u8>) -> f64 {
    mask.iter().filter(|&&v| v > 0).count() as f64 / mask.len() as f64
}

/// A near-vertical fault trace over rows `top..bottom`.
struct Fault {
    top: usize,
    bottom: usize,
    cols: Vec<f64>,
    throw: f64,
}

impl Fault {
    fn sample(shape: (usize, usize), rng: &mut RngStream) -> Self {
        let (h, w) = shape;
        let len = ((h as f64) * rng.uniform_range(0.4, 0.8)).round() as usize;
        let top = rng.index(h - len + 1);
        let mut c = rng.uniform_range(6.0, w as f64 - 6.0);
        let slope = rng.uniform_range(-0.35, 0.35);
        let mut cols = Vec::with_capacity(len);
        for _ in 0..len {
            cols.push(c);
            c = (c + slope + 0.3 * rng.normal()).clamp(2.0, w as f64 - 3.0);
        }
        let throw = rng.uniform_range(3.0, 7.0) * if rng.bernoulli(0.5) { 1.0 } else { -1.0 };
        Self {
            top,
            bottom: top + len,
            cols,
            throw,
        }
    }

    /// Vertical offset of the hanging wall at `(r, c)`, tapered at the tips.
    fn shift(&self, r: usize, c: usize) -> f64 {
        if r < self.top || r >= self.bottom {
            return 0.0;
        }
        let i = r - self.top;
        if (c as f64) <= self.cols[i] {
            return 0.0;
        }
        let len = (self.bottom - self.top) as f64;
        let edge = (i as f64).min(len - 1.0 - i as f64);
        self.throw * (edge / 6.0).min(1.0)
    }

    fn paint(&self, mask: &mut Array2<u8>, thickness: usize) {
        let w = mask.ncols() as i64;
        for (i, &c) in self.cols.iter().enumerate() {
            let start = (c - thickness as f64 / 2.0).round() as i64;
            for cc in start..start + thickness as i64 {
                if cc >= 0 && cc < w {
                    mask[[self.top + i, cc as usize]] = 1;
                }
            }
        }
    }
}

/// Layered background cut by thin near-vertical faults with vertical throw.
pub fn gen_thin_curves(spec: &SynthSpec) -> Result<Vec<ImageRecord>, SynthError> {
    spec.validate()?;
    if spec.kind != SynthKind::ThinCurves {
        return Err(SynthError::Spec("gen_thin_curves needs kind thin_curves".into()));
    }
    let thickness = spec.thickness_px.expect("validated");
    let shape = spec.image_size;
    let splits = assign_splits(spec);
    (0..spec.count)
        .map(|i| {
            let mut rng = image_rng(spec, i);
            let refl = Reflectors::sample(&mut rng, (5.0, 14.0));
            let n = poisson(spec.density, &mut rng);
            let mut mask = Array2::<u8>::zeros(shape);
            let mut faults = Vec::new();
            for _ in 0..n {
                let f = Fault::sample(shape, &mut rng);
                let mut trial = mask.clone();
                f.paint(&mut trial, thickness);
                if foreground_fraction(&trial) < MAX_THIN_FRACTION {
                    mask = trial;
                    faults.push(f);
                }
            }
            let mut img = Array2::from_shape_fn(shape, |(r, c)| {
                let shift: f64 = faults.iter().map(|f| f.shift(r, c)).sum();
                match spec.texture {
                    Texture::LayeredReflectors => refl.at(r as f64 + shift, c as f64) as f32,
                    _ => 0.0,
                }
            });
            if spec.texture == Texture::Granular {
                img = img + granular(shape, &mut rng).mapv(|v| 0.5 * v);
            }
            add_noise(&mut img, spec.noise_sigma, &mut rng);
            Ok(ImageRecord::new(record_id(spec, i), img, Some(mask), splits[i])?)
        })
        .collect()
}

/// Granular background with sparse, non-overlapping small ellipses.
pub fn gen_small_blobs(spec: &SynthSpec) -> Result<Vec<ImageRecord>, SynthError> {
    spec.validate()?;
    if spec.kind != SynthKind::SmallBlobs {
        return Err(SynthError::Spec("gen_small_blobs needs kind small_blobs".into()));
    }
    let radius = spec.radius_px.expect("validated") as f64;
    let (h, w) = spec.image_size;
    let splits = assign_splits(spec);
    (0..spec.count)
        .map(|i| {
            let mut rng = image_rng(spec, i);
            let mut img = base_texture(spec.texture, (h, w), &mut rng);
            let mut mask = Array2::<u8>::zeros((h, w));
            let n = poisson(spec.density, &mut rng);
            let mut placed: Vec<(f64, f64, f64)> = Vec::new();
            for _ in 0..n {
                for _attempt in 0..50 {
                    let a = rng.uniform_range((radius / 2.0).max(1.0), radius);
                    let b = rng.uniform_range((radius / 2.0).max(1.0), radius);
                    let ext = a.max(b);
                    let cu = rng.uniform_range(ext + 1.0, h as f64 - ext - 2.0).round();
                    let cv = rng.uniform_range(ext + 1.0, w as f64 - ext - 2.0).round();
                    let clear = placed
                        .iter()
                        .all(|&(pu, pv, pe)| ((pu - cu).powi(2) + (pv - cv).powi(2)).sqrt() > pe + ext + 2.0);
                    if !clear {
                        continue;
                    }
                    let mut trial = mask.clone();
                    let contrast = rng.uniform_range(0.8, 1.2) as f32;
                    let mut pix = Vec::new();
                    let rr = ext.ceil() as i64;
                    for du in -rr..=rr {
                        for dv in -rr..=rr {
                            let q = (du as f64 / a).powi(2) + (dv as f64 / b).powi(2);
                            if q <= 1.0 {
                                let (u, v) = ((cu as i64 + du) as usize, (cv as i64 + dv) as usize);
                                trial[[u, v]] = 1;
                                pix.push((u, v));
                            }
                        }
                    }
                    if foreground_fraction(&trial) >= MAX_BLOB_FRACTION {
                        break;
                    }
                    mask = trial;
                    for (u, v) in pix {
                        img[[u, v]] += contrast;
                    }
                    placed.push((cu, cv, ext));
                    break;
                }
            }
            add_noise(&mut img, spec.noise_sigma, &mut rng);
            Ok(ImageRecord::new(record_id(spec, i), img, Some(mask), splits[i])?)
        })
        .collect()
}

/// Dispatches to the band or region generator.
pub fn gen_large_structures(spec: &SynthSpec) -> Result<Vec<ImageRecord>, SynthError> {
    spec.validate()?;
    match spec.kind {
        SynthKind::LargeBands => gen_bands(spec),
        SynthKind::LargeRegions => gen_regions(spec),
        _ => Err(SynthError::Spec("gen_large_structures needs a large_* kind".into())),
    }
}

/// Horizontal bands whose boundaries undulate with the column. Textures
/// alternate between two families so a band's class is only resolvable
/// from its position in the stack.
fn gen_bands(spec: &SynthSpec) -> Result<Vec<ImageRecord>, SynthError> {
    let k = spec.band_count.expect("validated");
    let (h, w) = spec.image_size;
    let splits = assign_splits(spec);
    (0..spec.count)
        .map(|i| {
            let mut rng = image_rng(spec, i);
            let min_rows = (h as f64 * 0.1).ceil().max(2.0);
            let mut bounds: Vec<Vec<f64>> = Vec::with_capacity(k.saturating_sub(1));
            for b in 1..k {
                let base = h as f64 * b as f64 / k as f64 + rng.uniform_range(-0.25, 0.25) * h as f64 / k as f64;
                let amp = rng.uniform_range(0.05, 0.2) * h as f64 / k as f64;
                let wl = rng.uniform_range(0.6, 1.5) * w as f64;
                let ph = rng.uniform_range(0.0, 2.0 * PI);
                let amp2 = amp * rng.uniform_range(0.0, 0.5);
                let ph2 = rng.uniform_range(0.0, 2.0 * PI);
                let line = (0..w)
                    .map(|c| {
                        let x = c as f64;
                        base + amp * (2.0 * PI * x / wl + ph).sin() + amp2 * (6.0 * PI * x / wl + ph2).sin()
                    })
                    .collect();
                bounds.push(line);
            }
            // Keep every band at least `min_rows` thick in every column.
            for c in 0..w {
                for b in 0..bounds.len() {
                    let lo = if b == 0 { min_rows } else { bounds[b - 1][c] + min_rows };
                    let hi = h as f64 - min_rows * (bounds.len() - b) as f64;
                    bounds[b][c] = bounds[b][c].clamp(lo, hi.max(lo));
                }
            }
            let families = [
                Reflectors::sample(&mut rng, (4.0, 7.0)),
                Reflectors::sample(&mut rng, (8.0, 14.0)),
            ];
            let gain: Vec<f32> = (0..k).map(|_| rng.uniform_range(0.8, 1.2) as f32).collect();
            let mask = Array2::from_shape_fn((h, w), |(r, c)| {
                bounds.iter().filter(|b| (r as f64) >= b[c]).count() as u8
            });
            let mut img = Array2::from_shape_fn((h, w), |(r, c)| {
                let class = mask[[r, c]] as usize;
                let v = match spec.texture {
                    Texture::None => 0.0,
                    _ => families[class % 2].at(r as f64, c as f64) as f32,
                };
                v * gain[class]
            });
            if spec.texture == Texture::Granular {
                img = img + granular((h, w), &mut rng).mapv(|v| 0.3 * v);
            }
            add_noise(&mut img, spec.noise_sigma, &mut rng);
            Ok(ImageRecord::new(record_id(spec, i), img, Some(mask), splits[i])?)
        })
        .collect()
}

/// One star-shaped region covering a quarter to 60% of the image.
fn gen_regions(spec: &SynthSpec) -> Result<Vec<ImageRecord>, SynthError> {
    let (h, w) = spec.image_size;
    let splits = assign_splits(spec);
    (0..spec.count)
        .map(|i| {
            let mut rng = image_rng(spec, i);
            let target = rng.uniform_range(0.3, 0.5);
            let cu = h as f64 * rng.uniform_range(0.42, 0.58);
            let cv = w as f64 * rng.uniform_range(0.42, 0.58);
            let harmonics: Vec<(f64, f64)> = (2..6)
                .map(|_| (rng.uniform_range(0.0, 0.12), rng.uniform_range(0.0, 2.0 * PI)))
                .collect();
            let star = |r0: f64| {
                Array2::from_shape_fn((h, w), |(r, c)| {
                    let (du, dv) = (r as f64 + 0.5 - cu, c as f64 + 0.5 - cv);
                    let th = du.atan2(dv);
                    let rad = r0
                        * (1.0
                            + harmonics
                                .iter()
                                .enumerate()
                                .map(|(j, &(a, p))| a * ((j + 2) as f64 * th + p).cos())
                                .sum::<f64>());
                    u8::from((du * du + dv * dv).sqrt() <= rad)
                })
            };
            let mut r0 = (target * (h * w) as f64 / PI).sqrt();
            let mut mask = star(r0);
            for _ in 0..20 {
                let f = foreground_fraction(&mask);
                if (REGION_FRACTION.0..=REGION_FRACTION.1).contains(&f) && (f - target).abs() < 0.05 {
                    break;
                }
                r0 *= (target / f.max(1e-3)).sqrt();
                mask = star(r0);
            }
            let f = foreground_fraction(&mask);
            if !(REGION_FRACTION.0..=REGION_FRACTION.1).contains(&f) {
                return Err(SynthError::Spec(format!("region coverage {f:.3} outside [0.25, 0.60]")));
            }
            let inside = granular((h, w), &mut rng);
            let outside = base_texture(spec.texture, (h, w), &mut rng);
            let offset = rng.uniform_range(0.3, 0.6) as f32;
            let mut img = Array2::from_shape_fn((h, w), |(r, c)| {
                if mask[[r, c]] > 0 {
                    0.8 * inside[[r, c]] + offset
                } else {
                    outside[[r, c]]
                }
            });
            add_noise(&mut img, spec.noise_sigma, &mut rng);
            Ok(ImageRecord::new(record_id(spec, i), img, Some(mask), splits[i])?)
        })
        .collect()
}

/// Generates the dataset described by `spec`.
pub fn generate(spec: &SynthSpec) -> Result<Vec<ImageRecord>, SynthError> {
    match spec.kind {
        SynthKind::ThinCurves => gen_thin_curves(spec),
        SynthKind::SmallBlobs => gen_small_blobs(spec),
        SynthKind::LargeBands | SynthKind::LargeRegions => gen_large_structures(spec),
    }
}

fn record_id(spec: &SynthSpec, i: usize) -> String {
    format!("{}_{i:05}", spec.kind)
}

/// Seeded permutation cut into pretrain/train/val/test blocks.
pub fn assign_splits(spec: &SynthSpec) -> Vec<Split> {
    let n = spec.count;
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::new(spec.seed, "synth/splits").shuffle(&mut order);
    let mut bounds = [0usize; 4];
    let mut acc = 0.0;
    for (b, f) in bounds.iter_mut().zip(spec.split_fractions) {
        acc += f;
        *b = (acc * n as f64).round() as usize;
    }
    let mut out = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        out[idx] = Split::ALL[bounds.iter().position(|&b| rank < b).unwrap_or(3)];
    }
    out
}

/// Areas of the 4-connected foreground components of `mask`.
pub fn component_areas(mask: &Array2<u8>) -> Vec<usize> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 0 || seen[[r, c]] {
                continue;
            }
            let label = mask[[r, c]];
            let mut area = 0;
            seen[[r, c]] = true;
            stack.push((r, c));
            while let Some((u, v)) = stack.pop() {
                area += 1;
                let mut visit = |uu: usize, vv: usize| {
                    if mask[[uu, vv]] == label && !seen[[uu, vv]] {
                        seen[[uu, vv]] = true;
                        stack.push((uu, vv));
                    }
                };
                if u > 0 {
                    visit(u - 1, v);
                }
                if u + 1 < h {
                    visit(u + 1, v);
                }
                if v > 0 {
                    visit(u, v - 1);
                }
                if v + 1 < w {
                    visit(u, v + 1);
                }
            }
            areas.push(area);
        }
    }
    areas
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub image: String,
    #[serde(default)]
    pub mask: Option<String>,
    pub height: usize,
    pub width: usize,
}

/// JSON sidecar describing a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub generator_version: String,
    #[serde(default)]
    pub spec: Option<SynthSpec>,
    /// Intensity that 0 and 65535 in the 16-bit images map back to.
    pub intensity_range: (f64, f64),
    pub num_classes: usize,
    pub records: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, SynthError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Writes 16-bit image PNGs, 8-bit mask PNGs and `manifest.json`.
pub fn write_dataset(records: &[ImageRecord], spec: &SynthSpec, dir: &Path) -> Result<PathBuf, SynthError> {
    fs::create_dir_all(dir)?;
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for r in records {
        for &v in r.pixels() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    let scale = 65535.0 / (hi as f64 - lo as f64);
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let (h, w) = r.shape();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let v = (r.pixels()[[y as usize, x as usize]] as f64 - lo as f64) * scale;
            Luma([v.round().clamp(0.0, 65535.0) as u16])
        });
        let image_file = format!("{}.png", r.id);
        img.save(dir.join(&image_file))?;
        let mask_file = match r.mask() {
            Some(m) => {
                let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
                    ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([m[[y as usize, x as usize]]]));
                let name = format!("{}_mask.png", r.id);
                buf.save(dir.join(&name))?;
                Some(name)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: r.id.clone(),
            split: r.split,
            image: image_file,
            mask: mask_file,
            height: h,
            width: w,
        });
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA,
        generator_version: GENERATOR_VERSION.to_string(),
        spec: Some(spec.clone()),
        intensity_range: (lo as f64, hi as f64),
        num_classes: spec.num_classes(),
        records: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let out = BufWriter::new(fs::File::create(&path)?);
    serde_json::to_writer_pretty(out, &manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: SynthKind, count: usize) -> SynthSpec {
        SynthSpec {
            count,
            ..SynthSpec::default_for(kind)
        }
    }

    #[test]
    fn zero_density_gives_empty_masks() {
        for kind in [SynthKind::ThinCurves, SynthKind::SmallBlobs] {
            let spec = SynthSpec {
                density: 0.0,
                ..small(kind, 5)
            };
            for r in generate(&spec).unwrap() {
                assert!(r.mask().unwrap().iter().all(|&v| v == 0));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in SynthKind::ALL {
            let spec = small(kind, 3);
            assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        }
    }

    #[test]
    fn thin_curve_foreground_fraction() {
        let recs = generate(&small(SynthKind::ThinCurves, 100)).unwrap();
        let fr: Vec<f64> = recs.iter().map(|r| foreground_fraction(r.mask().unwrap())).collect();
        assert!(fr.iter().all(|&f| f < 0.05));
        let mean = fr.iter().sum::<f64>() / fr.len() as f64;
        assert!(mean > 0.005 && mean < 0.05, "{mean}");
    }

    #[test]
    fn unit_radius_blobs_are_tiny() {
        let spec = SynthSpec {
            radius_px: Some(1),
            ..small(SynthKind::SmallBlobs, 20)
        };
        for r in generate(&spec).unwrap() {
            assert!(component_areas(r.mask().unwrap()).iter().all(|&a| a <= 5));
            assert!(foreground_fraction(r.mask().unwrap()) < 0.08);
        }
    }

    #[test]
    fn single_band_is_one_class() {
        let spec = SynthSpec {
            band_count: Some(1),
            ..small(SynthKind::LargeBands, 3)
        };
        for r in generate(&spec).unwrap() {
            assert!(r.mask().unwrap().iter().all(|&v| v == 0));
        }
    }

    #[test]
    fn bands_are_column_functions_and_wide() {
        let spec = small(SynthKind::LargeBands, 20);
        let k = spec.band_count.unwrap();
        let mut rows = vec![0usize; k];
        for r in generate(&spec).unwrap() {
            let m = r.mask().unwrap();
            for col in m.columns() {
                assert!(col.windows(2).into_iter().all(|p| p[1] >= p[0]));
            }
            for &v in m.iter() {
                rows[v as usize] += 1;
            }
        }
        let total: usize = rows.iter().sum();
        assert!(rows.iter().all(|&n| n as f64 / total as f64 >= 0.1), "{rows:?}");
    }

    #[test]
    fn regions_cover_a_quarter_to_sixty_percent() {
        for r in generate(&small(SynthKind::LargeRegions, 50)).unwrap() {
            let f = foreground_fraction(r.mask().unwrap());
            assert!((0.25..=0.60).contains(&f), "{f}");
            assert_eq!(component_areas(r.mask().unwrap()).len(), 1);
        }
    }

    #[test]
    fn splits_are_exhaustive_with_expected_sizes() {
        let splits = assign_splits(&small(SynthKind::ThinCurves, 500));
        let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
        assert_eq!(
            [
                count(Split::Pretrain),
                count(Split::Train),
                count(Split::Val),
                count(Split::Test)
            ],
            [300, 100, 50, 50]
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            SynthSpec {
                thickness_px: Some(4),
                ..small(SynthKind::ThinCurves, 1)
            },
            SynthSpec {
                radius_px: Some(6),
                ..small(SynthKind::SmallBlobs, 1)
            },
            SynthSpec {
                density: -1.0,
                ..small(SynthKind::SmallBlobs, 1)
            },
        ];
        for s in bad {
            assert!(matches!(generate(&s), Err(SynthError::Spec(_))));
        }
    }

    #[test]
    fn write_dataset_manifest_echoes_spec() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small(SynthKind::SmallBlobs, 4);
        let recs = generate(&spec).unwrap();
        let path = write_dataset(&recs, &spec, dir.path()).unwrap();
        let m = DatasetManifest::load(&path).unwrap();
        assert_eq!(m.spec.as_ref(), Some(&spec));
        assert_eq!(m.records.len(), 4);
        assert!(dir.path().join(format!("{}_mask.png", recs[0].id)).exists());
    }
}
