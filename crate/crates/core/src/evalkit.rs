//! Stitched full-slice inference and the Dice / Hausdorff metrics.

use std::io::{Read, Write};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::{SegmentationModel, Tensor};
use crate::types::{ImageRecord, ShapeError, Window};

/// Default distance reported when exactly one of the two masks is empty.
pub const DEFAULT_HD_CAP: f64 = 200.0;
/// Windows evaluated per network call during stitching.
const STITCH_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("stride {s} must be smaller than the window {h}x{w}")]
    Stride { s: usize, h: usize, w: usize },
    #[error("record {0} has no mask")]
    MissingMask(String),
    #[error("model returned {got} outputs for {expected} patches")]
    ModelOutput { expected: usize, got: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Ordered sliding windows over one image plus per-pixel coverage counts.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchPlan {
    pub windows: Vec<Window>,
    pub stride: usize,
    pub coverage: Array2<u32>,
}

impl StitchPlan {
    pub fn image_shape(&self) -> (usize, usize) {
        self.coverage.dim()
    }

    pub fn patch_size(&self) -> (usize, usize) {
        let w = self.windows[0];
        (w.h, w.w)
    }
}

/// Window origins `0, s, 2s, ...` with one extra window flush to the end.
fn axis_origins(extent: usize, size: usize, s: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    while o + size <= extent {
        out.push(o);
        o += s;
    }
    let last = extent - size;
    if *out.last().expect("size <= extent") != last {
        out.push(last);
    }
    out
}

/// Plans a stride-`s` sliding window of `h x w` over `image_shape`,
/// enumerated row-major.
pub fn build_stitch_plan(image_shape: (usize, usize), h: usize, w: usize, s: usize) -> Result<StitchPlan, EvalError> {
    let (ih, iw) = image_shape;
    if h > ih || w > iw {
        return Err(ShapeError::CropTooLarge {
            crop: (h, w),
            image: image_shape,
        }
        .into());
    }
    // A single window covering the whole image needs no stride.
    let single = h == ih && w == iw;
    if s == 0 || (!single && (s >= h || s >= w)) {
        return Err(EvalError::Stride { s, h, w });
    }
    plan_unchecked(image_shape, h, w, s)
}

fn plan_unchecked(image_shape: (usize, usize), h: usize, w: usize, s: usize) -> Result<StitchPlan, EvalError> {
    let rows = axis_origins(image_shape.0, h, s);
    let cols = axis_origins(image_shape.1, w, s);
    let mut windows = Vec::with_capacity(rows.len() * cols.len());
    let mut coverage = Array2::<u32>::zeros(image_shape);
    for &top in &rows {
        for &left in &cols {
            let win = Window::from_origin(top, left, h, w, image_shape)?;
            coverage
                .slice_mut(ndarray::s![top..top + h, left..left + w])
                .mapv_inplace(|c| c + 1);
            windows.push(win);
        }
    }
    Ok(StitchPlan {
        windows,
        stride: s,
        coverage,
    })
}

/// A model mapping equally sized patches to per-class probability maps
/// (`C x h x w`, with `C = 1` for binary tasks).
pub trait PatchModel: Sync {
    fn patch_size(&self) -> (usize, usize);
    fn num_classes(&self) -> usize;
    fn predict_patches(&self, patches: &[Array2<f32>]) -> Vec<Array3<f32>>;
}

impl PatchModel for SegmentationModel {
    fn patch_size(&self) -> (usize, usize) {
        SegmentationModel::patch_size(self)
    }

    fn num_classes(&self) -> usize {
        SegmentationModel::num_classes(self)
    }

    fn predict_patches(&self, patches: &[Array2<f32>]) -> Vec<Array3<f32>> {
        if patches.is_empty() {
            return Vec::new();
        }
        let probs = self.predict(&Tensor::from_images(patches));
        let [n, c, h, w] = probs.shape();
        (0..n)
            .map(|i| Array3::from_shape_vec((c, h, w), probs.sample(i).to_vec()).expect("shape matches"))
            .collect()
    }
}

/// Mean of patch probabilities over every covering window, `C x H x W`.
pub fn stitch_predict(
    image: &Array2<f32>,
    model: &dyn PatchModel,
    plan: &StitchPlan,
) -> Result<Array3<f32>, EvalError> {
    if image.dim() != plan.image_shape() {
        return Err(ShapeError::Mismatch {
            expected: plan.image_shape(),
            actual: image.dim(),
        }
        .into());
    }
    if model.patch_size() != plan.patch_size() {
        return Err(ShapeError::Mismatch {
            expected: model.patch_size(),
            actual: plan.patch_size(),
        }
        .into());
    }
    let (ih, iw) = image.dim();
    let c = model.num_classes();
    let mut acc = Array3::<f64>::zeros((c, ih, iw));
    for chunk in plan.windows.chunks(STITCH_BATCH) {
        let patches: Vec<Array2<f32>> = chunk
            .iter()
            .map(|w| crate::views::crop(image, w))
            .collect::<Result<_, _>>()?;
        let preds = model.predict_patches(&patches);
        if preds.len() != patches.len() {
            return Err(EvalError::ModelOutput {
                expected: patches.len(),
                got: preds.len(),
            });
        }
        for (win, p) in chunk.iter().zip(&preds) {
            let mut view = acc.slice_mut(ndarray::s![.., win.top()..win.bottom(), win.left()..win.right()]);
            view.zip_mut_with(p, |a, &b| *a += b as f64);
        }
    }
    let cov = plan.coverage.mapv(|v| v as f64);
    for mut plane in acc.axis_iter_mut(Axis(0)) {
        plane /= &cov;
    }
    Ok(acc.mapv(|v| v as f32))
}

/// Strict `p > 0.5` for binary maps, per-pixel argmax (lowest index on ties)
/// otherwise.
pub fn threshold_probs(probs: &Array3<f32>) -> Array2<u8> {
    let (c, h, w) = probs.dim();
    if c == 1 {
        return probs.index_axis(Axis(0), 0).mapv(|p| u8::from(p > 0.5));
    }
    Array2::from_shape_fn((h, w), |(r, q)| {
        let mut best = 0;
        for k in 1..c {
            if probs[[k, r, q]] > probs[[best, r, q]] {
                best = k;
            }
        }
        best as u8
    })
}

fn check_same(a: (usize, usize), b: (usize, usize)) -> Result<(), ShapeError> {
    if a != b {
        return Err(ShapeError::Mismatch { expected: a, actual: b });
    }
    Ok(())
}

/// `2|A n B| / (|A| + |B|)`, 1 when both are empty.
pub fn dice_score(pred: &Array2<bool>, gt: &Array2<bool>) -> Result<f64, ShapeError> {
    check_same(gt.dim(), pred.dim())?;
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

fn foreground(mask: &Array2<bool>) -> Vec<(i64, i64)> {
    mask.indexed_iter()
        .filter(|(_, &v)| v)
        .map(|((r, c), _)| (r as i64, c as i64))
        .collect()
}

/// Symmetric Hausdorff distance between foreground pixel sets. Exactly one
/// empty set gives `cap`; two empty sets give 0.
pub fn hausdorff(pred: &Array2<bool>, gt: &Array2<bool>, cap: f64) -> Result<f64, ShapeError> {
    check_same(gt.dim(), pred.dim())?;
    let na = pred.iter().filter(|&&v| v).count();
    let nb = gt.iter().filter(|&&v| v).count();
    if na * nb <= 1 << 16 {
        hausdorff_exhaustive(pred, gt, cap)
    } else {
        hausdorff_edt(pred, gt, cap)
    }
}

/// All-pairs version, quadratic in the number of foreground pixels.
pub fn hausdorff_exhaustive(pred: &Array2<bool>, gt: &Array2<bool>, cap: f64) -> Result<f64, ShapeError> {
    check_same(gt.dim(), pred.dim())?;
    let a = foreground(pred);
    let b = foreground(gt);
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(cap),
        _ => {}
    }
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| -> i64 {
        from.iter()
            .map(|&(r, c)| {
                to.iter()
                    .map(|&(r2, c2)| (r - r2).pow(2) + (c - c2).pow(2))
                    .min()
                    .expect("non-empty")
            })
            .max()
            .expect("non-empty")
    };
    Ok((directed(&a, &b).max(directed(&b, &a)) as f64).sqrt())
}

/// Distance-transform version: linear in the image size.
pub fn hausdorff_edt(pred: &Array2<bool>, gt: &Array2<bool>, cap: f64) -> Result<f64, ShapeError> {
    check_same(gt.dim(), pred.dim())?;
    let any_a = pred.iter().any(|&v| v);
    let any_b = gt.iter().any(|&v| v);
    match (any_a, any_b) {
        (false, false) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(cap),
        _ => {}
    }
    let to_b = squared_edt(gt);
    let to_a = squared_edt(pred);
    let mut worst = 0.0f64;
    for ((&p, &g), (&db, &da)) in pred.iter().zip(gt).zip(to_b.iter().zip(&to_a)) {
        if p {
            worst = worst.max(db);
        }
        if g {
            worst = worst.max(da);
        }
    }
    Ok(worst.sqrt())
}

/// Exact squared Euclidean distance to the nearest `true` pixel
/// (separable lower-envelope-of-parabolas transform).
pub fn squared_edt(mask: &Array2<bool>) -> Array2<f64> {
    let (h, w) = mask.dim();
    let inf = ((h * h + w * w) as f64 + 1.0) * 4.0;
    let mut grid = mask.mapv(|v| if v { 0.0 } else { inf });
    let mut buf = Vec::new();
    for c in 0..w {
        let col: Vec<f64> = grid.column(c).to_vec();
        edt_1d(&col, &mut buf);
        grid.column_mut(c).iter_mut().zip(&buf).for_each(|(d, &v)| *d = v);
    }
    for r in 0..h {
        let row: Vec<f64> = grid.row(r).to_vec();
        edt_1d(&row, &mut buf);
        grid.row_mut(r).iter_mut().zip(&buf).for_each(|(d, &v)| *d = v);
    }
    grid
}

fn edt_1d(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, 0.0);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| -> f64 {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64)
    };
    for q in 1..n {
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Per-record metrics from [`evaluate_split`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordEval {
    pub id: String,
    pub dice: f64,
    pub hd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub records: Vec<RecordEval>,
    pub mean_dice: f64,
    pub mean_hd: f64,
}

/// Dice and Hausdorff of a label map against ground truth. Binary tasks use
/// the foreground class; multiclass tasks average over every class present
/// in either map.
pub fn label_metrics(
    pred: &Array2<u8>,
    gt: &Array2<u8>,
    num_classes: usize,
    cap: f64,
) -> Result<(f64, f64), ShapeError> {
    if num_classes <= 1 {
        let p = pred.mapv(|v| v > 0);
        let g = gt.mapv(|v| v > 0);
        return Ok((dice_score(&p, &g)?, hausdorff(&p, &g, cap)?));
    }
    let mut dice = 0.0;
    let mut hd = 0.0;
    let mut n = 0;
    for k in 0..num_classes as u8 {
        let p = pred.mapv(|v| v == k);
        let g = gt.mapv(|v| v == k);
        if !p.iter().any(|&v| v) && !g.iter().any(|&v| v) {
            continue;
        }
        dice += dice_score(&p, &g)?;
        hd += hausdorff(&p, &g, cap)?;
        n += 1;
    }
    if n == 0 {
        return Ok((1.0, 0.0));
    }
    Ok((dice / n as f64, hd / n as f64))
}

/// Stitches, thresholds and scores every record; means are unweighted.
pub fn evaluate_split(
    model: &dyn PatchModel,
    records: &[ImageRecord],
    stride: usize,
    cap: f64,
) -> Result<EvalSummary, EvalError> {
    let (h, w) = model.patch_size();
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let gt = rec.mask().ok_or_else(|| EvalError::MissingMask(rec.id.clone()))?;
        let plan = build_stitch_plan(rec.shape(), h, w, stride)?;
        let probs = stitch_predict(rec.pixels(), model, &plan)?;
        let pred = threshold_probs(&probs);
        let (dice, hd) = label_metrics(&pred, gt, model.num_classes(), cap)?;
        out.push(RecordEval {
            id: rec.id.clone(),
            dice,
            hd,
        });
    }
    let n = out.len().max(1) as f64;
    Ok(EvalSummary {
        mean_dice: out.iter().map(|r| r.dice).sum::<f64>() / n,
        mean_hd: out.iter().map(|r| r.hd).sum::<f64>() / n,
        records: out,
    })
}

/// One row of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub method: String,
    pub sampling: String,
    pub patch_divisor: String,
    pub hd: f64,
    pub dice: f64,
    pub seed: u64,
}

pub fn write_rows_csv<W: Write>(out: W, rows: &[EvalRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_rows_csv<R: Read>(input: R) -> Result<Vec<EvalRow>, EvalError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_rows_json<W: Write>(out: W, rows: &[EvalRow]) -> Result<(), EvalError> {
    serde_json::to_writer_pretty(out, rows)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use ndarray::array;

    struct Constant(f32, (usize, usize));

    impl PatchModel for Constant {
        fn patch_size(&self) -> (usize, usize) {
            self.1
        }

        fn num_classes(&self) -> usize {
            1
        }

        fn predict_patches(&self, patches: &[Array2<f32>]) -> Vec<Array3<f32>> {
            patches
                .iter()
                .map(|_| Array3::from_elem((1, self.1 .0, self.1 .1), self.0))
                .collect()
        }
    }

    #[test]
    fn stride_equal_to_window_is_rejected() {
        assert!(matches!(
            build_stitch_plan((32, 32), 16, 16, 16),
            Err(EvalError::Stride { .. })
        ));
    }

    #[test]
    fn plan_enumeration() {
        let plan = build_stitch_plan((32, 32), 16, 16, 8).unwrap();
        assert_eq!(plan.windows.len(), 9);
        let tops: Vec<usize> = plan.windows.iter().step_by(3).map(|w| w.top()).collect();
        assert_eq!(tops, vec![0, 8, 16]);
        assert_eq!(*plan.coverage.iter().max().unwrap(), 4);
        assert!(plan.coverage.iter().all(|&c| c >= 1));

        let single = build_stitch_plan((20, 20), 20, 20, 10).unwrap();
        assert_eq!(single.windows.len(), 1);
        assert!(single.coverage.iter().all(|&c| c == 1));

        let clamped = build_stitch_plan((30, 30), 16, 16, 8).unwrap();
        let lefts: Vec<usize> = clamped.windows.iter().take(3).map(|w| w.left()).collect();
        assert_eq!(lefts, vec![0, 8, 14]);
    }

    #[test]
    fn constant_model_stitches_to_constant() {
        let mut rng = RngStream::new(0, "img");
        let img = Array2::from_shape_fn((40, 36), |_| rng.normal() as f32);
        let plan = build_stitch_plan((40, 36), 12, 12, 5).unwrap();
        let out = stitch_predict(&img, &Constant(0.3, (12, 12)), &plan).unwrap();
        assert!(out.iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn dice_examples() {
        let a = array![[true, true, false, false]];
        let b = array![[true, true, true, true]];
        assert!((dice_score(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(dice_score(&b, &b).unwrap(), 1.0);
        let c = array![[false, false, true, true]];
        assert_eq!(dice_score(&a, &c).unwrap(), 0.0);
        let e = Array2::from_elem((1, 4), false);
        assert_eq!(dice_score(&e, &e).unwrap(), 1.0);
        assert!(dice_score(&e, &Array2::from_elem((2, 2), false)).is_err());
    }

    #[test]
    fn hausdorff_examples() {
        let mut a = Array2::from_elem((5, 5), false);
        let mut b = Array2::from_elem((5, 5), false);
        a[[0, 0]] = true;
        b[[3, 4]] = true;
        assert_eq!(hausdorff(&a, &b, 200.0).unwrap(), 5.0);
        assert_eq!(hausdorff_edt(&a, &b, 200.0).unwrap(), 5.0);
        assert_eq!(hausdorff(&a, &a, 200.0).unwrap(), 0.0);
        let e = Array2::from_elem((5, 5), false);
        assert_eq!(hausdorff(&e, &b, 200.0).unwrap(), 200.0);
        assert_eq!(hausdorff(&e, &e, 200.0).unwrap(), 0.0);
    }

    #[test]
    fn edt_matches_exhaustive() {
        let mut rng = RngStream::new(4, "edt");
        for _ in 0..50 {
            let h = 5 + rng.index(30);
            let w = 5 + rng.index(30);
            let p = rng.uniform() * 0.3;
            let a = Array2::from_shape_fn((h, w), |_| rng.bernoulli(p));
            let b = Array2::from_shape_fn((h, w), |_| rng.bernoulli(p));
            let x = hausdorff_exhaustive(&a, &b, 200.0).unwrap();
            let y = hausdorff_edt(&a, &b, 200.0).unwrap();
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn threshold_is_strict() {
        let p = Array3::from_shape_vec((1, 1, 3), vec![0.5, 0.50001, 0.2]).unwrap();
        assert_eq!(threshold_probs(&p), array![[0u8, 1, 0]]);
    }

    #[test]
    fn half_model_scores_zero_dice_and_cap() {
        let mut mask = Array2::<u8>::zeros((16, 16));
        mask[[3, 3]] = 1;
        let rec = ImageRecord::new("r", Array2::zeros((16, 16)), Some(mask), crate::types::Split::Test).unwrap();
        let s = evaluate_split(&Constant(0.5, (8, 8)), &[rec], 4, 200.0).unwrap();
        assert_eq!(s.mean_dice, 0.0);
        assert_eq!(s.mean_hd, 200.0);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![EvalRow {
            dataset: "thin_curves".into(),
            method: "simclr".into(),
            sampling: "random".into(),
            patch_divisor: "L/8".into(),
            hd: 12.5,
            dice: 0.625,
            seed: 3,
        }];
        let mut buf = Vec::new();
        write_rows_csv(&mut buf, &rows).unwrap();
        assert_eq!(read_rows_csv(buf.as_slice()).unwrap(), rows);
    }
}
