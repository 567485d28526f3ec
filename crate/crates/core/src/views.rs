//! Scale-aware view construction.
//!
//! A view is `augment(crop(x, window), descriptor)`. Windows are drawn either
//! uniformly over the valid-center rectangle, or (for the second view of a
//! pair) uniformly among integer centers strictly closer than `delta` to the
//! first center. Full-view pairs use the whole slice, resized bilinearly to
//! the encoder input side.

use crate::config::{AugmentParams, Sampling, ValidatedConfig};
use crate::rng::RngStream;
use crate::types::{valid_center_range, ImageRecord, ShapeError, Window};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ViewError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("no integer center within distance {delta} of {first} is valid for a {h}x{w} crop")]
    InfeasibleConstraint {
        first: Window,
        delta: f64,
        h: usize,
        w: usize,
    },
    #[error("patch contains non-finite values")]
    NonFinite,
    #[error("view log: {0}")]
    Log(String),
}

/// Draws a window whose center is uniform over the valid-center rectangle.
pub fn sample_window_random(
    image_shape: (usize, usize),
    size: (usize, usize),
    rng: &mut RngStream,
) -> Result<Window, ViewError> {
    let (ih, iw) = image_shape;
    let (h, w) = size;
    let (Some((u_lo, u_hi)), Some((v_lo, v_hi))) = (valid_center_range(ih, h), valid_center_range(iw, w)) else {
        return Err(ShapeError::CropTooLarge {
            crop: size,
            image: image_shape,
        }
        .into());
    };
    let u = rng.int_inclusive(u_lo as i64, u_hi as i64) as usize;
    let v = rng.int_inclusive(v_lo as i64, v_hi as i64) as usize;
    Ok(Window::new(u, v, h, w, image_shape)?)
}

/// Draws a second window whose center lies strictly within `delta` of
/// `first`'s center, uniformly over the feasible integer centers.
///
/// Rejection sampling over the bounding box of the disc clipped to the valid
/// rectangle; the first center is always feasible when it is itself valid
/// for `size`, so the loop terminates with probability one.
pub fn sample_window_proximal(
    first: &Window,
    image_shape: (usize, usize),
    size: (usize, usize),
    delta: f64,
    rng: &mut RngStream,
) -> Result<Window, ViewError> {
    let (ih, iw) = image_shape;
    let (h, w) = size;
    let (Some((u_lo, u_hi)), Some((v_lo, v_hi))) = (valid_center_range(ih, h), valid_center_range(iw, w)) else {
        return Err(ShapeError::CropTooLarge {
            crop: size,
            image: image_shape,
        }
        .into());
    };
    let infeasible = || ViewError::InfeasibleConstraint {
        first: *first,
        delta,
        h,
        w,
    };
    if !(delta > 0.0) {
        return Err(infeasible());
    }
    let (cu, cv) = (first.center_u as i64, first.center_v as i64);
    // Largest integer offset r with r < delta.
    let reach = if delta.is_finite() {
        (delta.ceil() as i64 - 1).max(0)
    } else {
        i64::MAX / 4
    };
    let lo_u = (cu - reach).max(u_lo as i64);
    let hi_u = (cu + reach).min(u_hi as i64);
    let lo_v = (cv - reach).max(v_lo as i64);
    let hi_v = (cv + reach).min(v_hi as i64);
    if lo_u > hi_u || lo_v > hi_v {
        return Err(infeasible());
    }
    let first_feasible = (u_lo as i64..=u_hi as i64).contains(&cu) && (v_lo as i64..=v_hi as i64).contains(&cv);
    let delta2 = delta * delta;
    let max_tries = if first_feasible { u64::MAX } else { 1_000_000 };
    for _ in 0..max_tries {
        let u = rng.int_inclusive(lo_u, hi_u);
        let v = rng.int_inclusive(lo_v, hi_v);
        let du = (u - cu) as f64;
        let dv = (v - cv) as f64;
        if du * du + dv * dv < delta2 {
            return Ok(Window::new(u as usize, v as usize, h, w, image_shape)?);
        }
    }
    Err(infeasible())
}

/// The exact sub-array under `window`; no padding or interpolation.
pub fn crop<T: Clone>(image: &Array2<T>, window: &Window) -> Result<Array2<T>, ShapeError> {
    window.check_extent(image.dim())?;
    Ok(image
        .slice(ndarray::s![
            window.top()..window.bottom(),
            window.left()..window.right()
        ])
        .to_owned())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub scale: f64,
}

/// Fully determines one augmentation; replaying it reproduces the view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationDescriptor {
    pub hflip: bool,
    pub vflip: bool,
    pub intensity_scale: f64,
    pub intensity_shift: f64,
    /// `None` is the identity transform.
    pub affine: Option<AffineParams>,
}

impl AugmentationDescriptor {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            vflip: false,
            intensity_scale: 1.0,
            intensity_shift: 0.0,
            affine: None,
        }
    }

    /// Draws a descriptor. `intensity_range` is `max - min` of the patch the
    /// descriptor will be applied to; the additive shift is a fraction of it.
    pub fn sample(params: &AugmentParams, intensity_range: f64, rng: &mut RngStream) -> Self {
        if !params.enabled {
            return Self::identity();
        }
        let hflip = rng.bernoulli(params.hflip_prob);
        let vflip = rng.bernoulli(params.vflip_prob);
        let affine = if rng.bernoulli(params.affine_prob) {
            Some(AffineParams {
                rotation_deg: rng.uniform_range(-params.max_rotation_deg, params.max_rotation_deg),
                shear_deg: rng.uniform_range(-params.max_shear_deg, params.max_shear_deg),
                scale: rng.uniform_range(params.scale_min, params.scale_max),
            })
        } else {
            None
        };
        let intensity_scale = rng.uniform_range(params.intensity_scale_min, params.intensity_scale_max);
        let shift_frac = rng.uniform_range(-params.intensity_shift, params.intensity_shift);
        Self {
            hflip,
            vflip,
            intensity_scale,
            intensity_shift: shift_frac * intensity_range.max(0.0),
            affine,
        }
    }
}

fn reflect(x: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let last = (n - 1) as f64;
    let period = 2.0 * last;
    let mut y = x.rem_euclid(period);
    if y > last {
        y = period - y;
    }
    y
}

fn sample_bilinear_reflect(img: &Array2<f32>, r: f64, c: f64) -> f32 {
    let (h, w) = img.dim();
    let r = reflect(r, h);
    let c = reflect(c, w);
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let top = img[[r0, c0]] as f64 * (1.0 - fc) + img[[r0, c1]] as f64 * fc;
    let bot = img[[r1, c0]] as f64 * (1.0 - fc) + img[[r1, c1]] as f64 * fc;
    (top * (1.0 - fr) + bot * fr) as f32
}

fn apply_affine(patch: &Array2<f32>, p: &AffineParams) -> Array2<f32> {
    let (h, w) = patch.dim();
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let th = p.rotation_deg.to_radians();
    let sh = p.shear_deg.to_radians().tan();
    // Forward map on (x = col, y = row) offsets: rotation * shear * scale.
    let (cos, sin) = (th.cos(), th.sin());
    let a = [
        [p.scale * cos, p.scale * (cos * sh - sin)],
        [p.scale * sin, p.scale * (sin * sh + cos)],
    ];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    Array2::from_shape_fn((h, w), |(r, c)| {
        let x = c as f64 - cc;
        let y = r as f64 - cr;
        let sx = inv[0][0] * x + inv[0][1] * y + cc;
        let sy = inv[1][0] * x + inv[1][1] * y + cr;
        sample_bilinear_reflect(patch, sy, sx)
    })
}

/// Applies the transform encoded by `descriptor`: flips, then the affine warp
/// (bilinear, reflection padding), then `scale * x + shift`.
pub fn augment(patch: &Array2<f32>, descriptor: &AugmentationDescriptor) -> Result<Array2<f32>, ViewError> {
    if patch.iter().any(|v| !v.is_finite()) {
        return Err(ViewError::NonFinite);
    }
    let mut out = patch.clone();
    if descriptor.hflip {
        out.invert_axis(ndarray::Axis(1));
    }
    if descriptor.vflip {
        out.invert_axis(ndarray::Axis(0));
    }
    if let Some(p) = &descriptor.affine {
        out = apply_affine(&out.as_standard_layout().to_owned(), p);
    }
    let (a, b) = (descriptor.intensity_scale, descriptor.intensity_shift);
    if a != 1.0 || b != 0.0 {
        out.mapv_inplace(|x| (a * x as f64 + b) as f32);
    }
    Ok(out.as_standard_layout().to_owned())
}

/// Bilinear resize with half-pixel centers. Identity when shapes match.
pub fn resize_bilinear(img: &Array2<f32>, size: (usize, usize)) -> Array2<f32> {
    let (h, w) = img.dim();
    if (h, w) == size {
        return img.clone();
    }
    let (oh, ow) = size;
    let sr = h as f64 / oh as f64;
    let sc = w as f64 / ow as f64;
    Array2::from_shape_fn(size, |(r, c)| {
        let y = ((r as f64 + 0.5) * sr - 0.5).clamp(0.0, (h - 1) as f64);
        let x = ((c as f64 + 0.5) * sc - 0.5).clamp(0.0, (w - 1) as f64);
        sample_bilinear_reflect(img, y, x)
    })
}

fn intensity_range(a: &Array2<f32>) -> f64 {
    let (lo, hi) = a.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    (hi - lo) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view1: Array2<f32>,
    pub view2: Array2<f32>,
    pub window1: Window,
    pub window2: Window,
    pub aug1: AugmentationDescriptor,
    pub aug2: AugmentationDescriptor,
    pub source_id: String,
}

impl ViewPair {
    pub fn log_record(&self) -> ViewLogRecord {
        ViewLogRecord {
            source_id: self.source_id.clone(),
            window1: self.window1,
            window2: self.window2,
            aug1: self.aug1,
            aug2: self.aug2,
        }
    }
}

/// Per-run view construction settings resolved from a config.
#[derive(Clone, Debug)]
pub struct ViewSampler {
    pub sampling: Sampling,
    /// Crop side for patch sampling, or the encoder input side for full view.
    pub view_size: usize,
    pub delta: f64,
    pub augment: AugmentParams,
}

impl ViewSampler {
    /// `view_size` is the resolved crop side (patch sampling) or the encoder
    /// input side (full view).
    pub fn from_config(config: &ValidatedConfig, view_size: usize) -> Self {
        Self {
            sampling: config.sampling,
            view_size,
            delta: config.effective_delta(view_size),
            augment: config.augment.clone(),
        }
    }

    fn view_of(
        &self,
        image: &ImageRecord,
        window: &Window,
        rng: &mut RngStream,
    ) -> Result<(Array2<f32>, AugmentationDescriptor), ViewError> {
        let mut patch = crop(image.pixels(), window)?;
        if self.sampling == Sampling::FullView {
            patch = resize_bilinear(&patch, (self.view_size, self.view_size));
        }
        let desc = AugmentationDescriptor::sample(&self.augment, intensity_range(&patch), rng);
        let view = augment(&patch, &desc)?;
        Ok((view, desc))
    }

    pub fn make_view_pair(&self, image: &ImageRecord, rng: &mut RngStream) -> Result<ViewPair, ViewError> {
        let shape = image.shape();
        let size = (self.view_size, self.view_size);
        let (window1, window2) = match self.sampling {
            Sampling::FullView => (Window::whole(shape), Window::whole(shape)),
            Sampling::Random => {
                let w1 = sample_window_random(shape, size, rng)?;
                let w2 = sample_window_random(shape, size, rng)?;
                (w1, w2)
            }
            Sampling::Proximity => {
                let w1 = sample_window_random(shape, size, rng)?;
                let w2 = sample_window_proximal(&w1, shape, size, self.delta, rng)?;
                (w1, w2)
            }
        };
        let (view1, aug1) = self.view_of(image, &window1, rng)?;
        let (view2, aug2) = self.view_of(image, &window2, rng)?;
        Ok(ViewPair {
            view1,
            view2,
            window1,
            window2,
            aug1,
            aug2,
            source_id: image.id.clone(),
        })
    }

    /// Rebuilds a logged pair from its windows and descriptors.
    pub fn replay(&self, image: &ImageRecord, rec: &ViewLogRecord) -> Result<ViewPair, ViewError> {
        let render = |w: &Window, d: &AugmentationDescriptor| -> Result<Array2<f32>, ViewError> {
            let mut patch = crop(image.pixels(), w)?;
            if self.sampling == Sampling::FullView {
                patch = resize_bilinear(&patch, (self.view_size, self.view_size));
            }
            augment(&patch, d)
        };
        Ok(ViewPair {
            view1: render(&rec.window1, &rec.aug1)?,
            view2: render(&rec.window2, &rec.aug2)?,
            window1: rec.window1,
            window2: rec.window2,
            aug1: rec.aug1,
            aug2: rec.aug2,
            source_id: rec.source_id.clone(),
        })
    }
}

/// Convenience wrapper: sampler resolved from `config` for one pair.
pub fn make_view_pair(
    image: &ImageRecord,
    config: &ValidatedConfig,
    view_size: usize,
    rng: &mut RngStream,
) -> Result<ViewPair, ViewError> {
    ViewSampler::from_config(config, view_size).make_view_pair(image, rng)
}

/// One line of the view log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewLogRecord {
    pub source_id: String,
    pub window1: Window,
    pub window2: Window,
    pub aug1: AugmentationDescriptor,
    pub aug2: AugmentationDescriptor,
}

pub fn write_view_log<W: Write>(out: &mut W, rec: &ViewLogRecord) -> Result<(), ViewError> {
    let line = serde_json::to_string(rec).map_err(|e| ViewError::Log(e.to_string()))?;
    writeln!(out, "{line}").map_err(|e| ViewError::Log(e.to_string()))
}

pub fn read_view_log<R: BufRead>(input: R) -> Result<Vec<ViewLogRecord>, ViewError> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| ViewError::Log(e.to_string()))?;
            serde_json::from_str(&l).map_err(|e| ViewError::Log(e.to_string()))
        })
        .collect()
}
