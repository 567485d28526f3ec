//! Domain types shared by every stage of the pipeline.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Smallest image side accepted anywhere in the pipeline.
pub const MIN_IMAGE_SIDE: usize = 8;
/// Smallest window side.
pub const MIN_WINDOW_SIDE: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("image is {h}x{w}; both sides must be at least {MIN_IMAGE_SIDE}")]
    ImageTooSmall { h: usize, w: usize },
    #[error("mask shape {mask:?} does not match pixel shape {pixels:?}")]
    MaskMismatch {
        pixels: (usize, usize),
        mask: (usize, usize),
    },
    #[error("non-finite intensity at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("window {h}x{w} is smaller than the {MIN_WINDOW_SIDE}-pixel minimum")]
    WindowTooSmall { h: usize, w: usize },
    #[error("window {window} does not fit inside a {h}x{w} image")]
    OutOfBounds { window: Window, h: usize, w: usize },
    #[error("crop {crop:?} exceeds image {image:?}")]
    CropTooLarge {
        crop: (usize, usize),
        image: (usize, usize),
    },
    #[error("expected shape {expected:?}, got {actual:?}")]
    Mismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}'")),
        }
    }
}

/// A 2-D grayscale slice with an optional label mask.
///
/// Masks hold class indices: `{0, 1}` for binary targets or `0..C` for
/// multiclass targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pixels: Array2<f32>,
    mask: Option<Array2<u8>>,
    pub split: Split,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        pixels: Array2<f32>,
        mask: Option<Array2<u8>>,
        split: Split,
    ) -> Result<Self, ShapeError> {
        let (h, w) = pixels.dim();
        if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
            return Err(ShapeError::ImageTooSmall { h, w });
        }
        if let Some(m) = &mask {
            if m.dim() != (h, w) {
                return Err(ShapeError::MaskMismatch {
                    pixels: (h, w),
                    mask: m.dim(),
                });
            }
        }
        if let Some(((r, c), _)) = pixels.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(ShapeError::NonFinite(r, c));
        }
        Ok(Self {
            id: id.into(),
            pixels,
            mask,
            split,
        })
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn mask(&self) -> Option<&Array2<u8>> {
        self.mask.as_ref()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    /// Applies `f` to every intensity. Fails if the result is non-finite.
    pub fn map_pixels(&mut self, f: impl Fn(f32) -> f32) -> Result<(), ShapeError> {
        self.pixels.mapv_inplace(f);
        if let Some(((r, c), _)) = self.pixels.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(ShapeError::NonFinite(r, c));
        }
        Ok(())
    }

    pub fn into_parts(self) -> (String, Array2<f32>, Option<Array2<u8>>, Split) {
        (self.id, self.pixels, self.mask, self.split)
    }
}

/// A crop specification: integer center plus extent.
///
/// The covered rows are `[center_u - h/2, center_u - h/2 + h)` (integer
/// division), and likewise for columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub center_u: usize,
    pub center_v: usize,
    pub h: usize,
    pub w: usize,
}

impl Window {
    /// Builds a window and checks that it fits inside an `image_h x image_w` image.
    pub fn new(
        center_u: usize,
        center_v: usize,
        h: usize,
        w: usize,
        image_shape: (usize, usize),
    ) -> Result<Self, ShapeError> {
        let win = Self {
            center_u,
            center_v,
            h,
            w,
        };
        win.check_in_bounds(image_shape)?;
        Ok(win)
    }

    /// The window whose top-left corner is `(top, left)`.
    pub fn from_origin(
        top: usize,
        left: usize,
        h: usize,
        w: usize,
        image_shape: (usize, usize),
    ) -> Result<Self, ShapeError> {
        Self::new(top + h / 2, left + w / 2, h, w, image_shape)
    }

    /// The window covering an entire image.
    pub fn whole(image_shape: (usize, usize)) -> Self {
        let (h, w) = image_shape;
        Self {
            center_u: h / 2,
            center_v: w / 2,
            h,
            w,
        }
    }

    pub fn top(&self) -> usize {
        self.center_u - self.h / 2
    }

    pub fn left(&self) -> usize {
        self.center_v - self.w / 2
    }

    pub fn bottom(&self) -> usize {
        self.top() + self.h
    }

    pub fn right(&self) -> usize {
        self.left() + self.w
    }

    pub fn check_in_bounds(&self, image_shape: (usize, usize)) -> Result<(), ShapeError> {
        if self.h < MIN_WINDOW_SIDE || self.w < MIN_WINDOW_SIDE {
            return Err(ShapeError::WindowTooSmall { h: self.h, w: self.w });
        }
        self.check_extent(image_shape)
    }

    /// Bounds check only, without the minimum-size rule.
    pub fn check_extent(&self, (ih, iw): (usize, usize)) -> Result<(), ShapeError> {
        let fits_u = self.center_u >= self.h / 2 && self.center_u - self.h / 2 + self.h <= ih;
        let fits_v = self.center_v >= self.w / 2 && self.center_v - self.w / 2 + self.w <= iw;
        if fits_u && fits_v {
            Ok(())
        } else {
            Err(ShapeError::OutOfBounds {
                window: *self,
                h: ih,
                w: iw,
            })
        }
    }

    /// Squared Euclidean distance between two window centers.
    pub fn center_dist2(&self, other: &Window) -> f64 {
        let du = self.center_u as f64 - other.center_u as f64;
        let dv = self.center_v as f64 - other.center_v as f64;
        du * du + dv * dv
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}@({},{})", self.h, self.w, self.center_u, self.center_v)
    }
}

/// Valid window-center range along one axis of length `extent` for a window
/// side `size`: `[size/2, extent - ceil(size/2)]`.
pub fn valid_center_range(extent: usize, size: usize) -> Option<(usize, usize)> {
    if size > extent {
        return None;
    }
    Some((size / 2, extent - size.div_ceil(2)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum CropDivisor {
    Half,
    Quarter,
    Eighth,
}

impl CropDivisor {
    pub const ALL: [CropDivisor; 3] = [CropDivisor::Half, CropDivisor::Quarter, CropDivisor::Eighth];

    pub fn value(self) -> usize {
        match self {
            CropDivisor::Half => 2,
            CropDivisor::Quarter => 4,
            CropDivisor::Eighth => 8,
        }
    }
}

impl TryFrom<u32> for CropDivisor {
    type Error = String;

    fn try_from(v: u32) -> Result<Self, Self::Error> {
        match v {
            2 => Ok(CropDivisor::Half),
            4 => Ok(CropDivisor::Quarter),
            8 => Ok(CropDivisor::Eighth),
            other => Err(format!("crop divisor must be 2, 4 or 8, got {other}")),
        }
    }
}

impl From<CropDivisor> for u32 {
    fn from(d: CropDivisor) -> u32 {
        d.value() as u32
    }
}

impl fmt::Display for CropDivisor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L/{}", self.value())
    }
}

/// Patch scale relative to the smallest image side `L` of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSpec {
    pub base_l: usize,
    pub divisor: CropDivisor,
    pub resolved_size: usize,
}

impl ScaleSpec {
    pub fn new(base_l: usize, divisor: CropDivisor) -> Result<Self, ShapeError> {
        let resolved_size = base_l / divisor.value();
        if resolved_size < MIN_WINDOW_SIDE {
            return Err(ShapeError::WindowTooSmall {
                h: resolved_size,
                w: resolved_size,
            });
        }
        Ok(Self {
            base_l,
            divisor,
            resolved_size,
        })
    }

    /// `L` for a collection of image shapes: the minimum of `min(H, W)`.
    pub fn base_l_of(shapes: impl IntoIterator<Item = (usize, usize)>) -> Option<usize> {
        shapes.into_iter().map(|(h, w)| h.min(w)).min()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn record_rejects_small_or_mismatched() {
        assert!(matches!(
            ImageRecord::new("a", Array2::zeros((7, 16)), None, Split::Train),
            Err(ShapeError::ImageTooSmall { .. })
        ));
        assert!(matches!(
            ImageRecord::new("a", Array2::zeros((8, 8)), Some(Array2::zeros((8, 9))), Split::Train),
            Err(ShapeError::MaskMismatch { .. })
        ));
        let mut px = Array2::<f32>::zeros((8, 8));
        px[[2, 3]] = f32::NAN;
        assert_eq!(
            ImageRecord::new("a", px, None, Split::Train),
            Err(ShapeError::NonFinite(2, 3))
        );
    }

    #[test]
    fn window_extent_uses_floor_half() {
        let w = Window::new(8, 8, 16, 16, (16, 16)).unwrap();
        assert_eq!((w.top(), w.bottom(), w.left(), w.right()), (0, 16, 0, 16));
        let odd = Window::new(2, 2, 5, 5, (5, 5)).unwrap();
        assert_eq!((odd.top(), odd.bottom()), (0, 5));
        assert!(Window::new(3, 2, 5, 5, (5, 5)).is_err());
        assert!(Window::new(1, 1, 3, 3, (8, 8)).is_err());
    }

    #[test]
    fn whole_window_is_in_bounds_for_odd_shapes() {
        for shape in [(8, 8), (9, 13), (31, 10)] {
            let w = Window::whole(shape);
            w.check_in_bounds(shape).unwrap();
            assert_eq!((w.top(), w.left()), (0, 0));
        }
    }

    #[test]
    fn valid_center_range_matches_definition() {
        assert_eq!(valid_center_range(64, 16), Some((8, 56)));
        assert_eq!(valid_center_range(16, 16), Some((8, 8)));
        assert_eq!(valid_center_range(15, 5), Some((2, 12)));
        assert_eq!(valid_center_range(4, 5), None);
    }

    #[test]
    fn scale_spec_floors() {
        let s = ScaleSpec::new(96, CropDivisor::Eighth).unwrap();
        assert_eq!(s.resolved_size, 12);
        assert!(ScaleSpec::new(24, CropDivisor::Eighth).is_err());
        assert_eq!(ScaleSpec::base_l_of([(128, 96), (200, 100)]), Some(96));
    }

    #[test]
    fn divisor_serde() {
        let d: CropDivisor = serde_json::from_str("8").unwrap();
        assert_eq!(d, CropDivisor::Eighth);
        assert!(serde_json::from_str::<CropDivisor>("3").is_err());
        assert_eq!(serde_json::to_string(&CropDivisor::Quarter).unwrap(), "4");
    }
}
