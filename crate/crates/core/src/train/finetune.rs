use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{SslMethod, ValidatedConfig};
use crate::evalkit::evaluate_split;
use crate::nets::checkpoint::CHECKPOINT_FORMAT;
use crate::nets::{
    copy_params, logits_to_probs, param_checksum, Checkpoint, CheckpointManifest, CheckpointWriter, DecoderSpec,
    Encoder, EncoderSpec, Layer, Param, SegmentationModel, Tensor,
};
use crate::rng::RngStream;
use crate::types::{ImageRecord, Window};
use crate::views::{crop, sample_window_random};

use super::optim::Optimizer;
use super::pretrain::{CHECKPOINT_DIR, METRICS_FILE};
use super::{soft_dice, TrainError};

/// Pixels and labels cut from one record by the same window.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    pub pixels: Array2<f32>,
    pub target: Array2<u8>,
    pub window: Window,
    pub source_id: String,
}

impl LabeledPatch {
    pub fn cut(record: &ImageRecord, window: Window) -> Result<Self, TrainError> {
        let mask = record
            .mask()
            .ok_or_else(|| TrainError::Invalid(format!("record {} has no mask", record.id)))?;
        Ok(Self {
            pixels: crop(record.pixels(), &window)?,
            target: crop(mask, &window)?,
            window,
            source_id: record.id.clone(),
        })
    }

    fn hflip(&mut self) {
        self.pixels.invert_axis(Axis(1));
        self.target.invert_axis(Axis(1));
    }
}

pub enum EncoderInit<'a> {
    /// Fresh weights: the supervised baseline.
    Random,
    Pretrained(&'a Encoder),
}

#[derive(Clone, Debug)]
pub struct FinetuneOptions {
    pub out_dir: Option<PathBuf>,
    /// 1 for binary masks, otherwise the number of label classes.
    pub num_classes: usize,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            out_dir: None,
            num_classes: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: Option<f64>,
    pub val_hd: Option<f64>,
}

pub struct FinetuneOutcome {
    /// Weights from the epoch with the best validation Dice.
    pub model: SegmentationModel,
    pub best_val_dice: Option<f64>,
    pub best_epoch: usize,
    pub history: Vec<FinetuneEpoch>,
    pub checkpoint: Option<PathBuf>,
    /// Encoder checksum before the first optimizer step.
    pub initial_encoder_checksum: String,
}

/// Mean over classes of batch-pooled soft Dice on softmax probabilities
/// (`probs` is `N x C x H x W`); returns the loss and its gradient in `probs`.
pub fn multiclass_soft_dice(probs: &Tensor, labels: &[u8], epsilon: f64) -> (f64, Vec<f32>) {
    let [n, c, h, w] = probs.shape();
    let hw = h * w;
    let mut grad = vec![0.0f32; probs.data().len()];
    let mut total = 0.0;
    for k in 0..c {
        let mut p = Vec::with_capacity(n * hw);
        let mut t = Vec::with_capacity(n * hw);
        for s in 0..n {
            p.extend_from_slice(&probs.sample(s)[k * hw..(k + 1) * hw]);
            t.extend(labels[s * hw..(s + 1) * hw].iter().map(|&l| f32::from(l as usize == k)));
        }
        let (loss, g) = soft_dice(&p, &t, epsilon);
        total += loss;
        for s in 0..n {
            let base = s * c * hw + k * hw;
            for i in 0..hw {
                grad[base + i] = g[s * hw + i] / c as f32;
            }
        }
    }
    (total / c as f64, grad)
}

/// Loss and logit gradient for one batch.
fn batch_loss(logits: &Tensor, labels: &[u8], epsilon: f64) -> (f64, Tensor) {
    let probs = logits_to_probs(logits);
    let [n, c, h, w] = probs.shape();
    if c == 1 {
        let t: Vec<f32> = labels.iter().map(|&l| f32::from(l > 0)).collect();
        let (loss, dp) = soft_dice(probs.data(), &t, epsilon);
        let dz = probs.data().iter().zip(&dp).map(|(&p, &g)| g * p * (1.0 - p)).collect();
        return (loss, Tensor::from_vec(logits.shape(), dz));
    }
    let (loss, dp) = multiclass_soft_dice(&probs, labels, epsilon);
    let hw = h * w;
    let mut dz = vec![0.0f32; dp.len()];
    for s in 0..n {
        let base = s * c * hw;
        for i in 0..hw {
            let dot: f32 = (0..c)
                .map(|k| probs.data()[base + k * hw + i] * dp[base + k * hw + i])
                .sum();
            for k in 0..c {
                let j = base + k * hw + i;
                dz[j] = probs.data()[j] * (dp[j] - dot);
            }
        }
    }
    (loss, Tensor::from_vec(logits.shape(), dz))
}

fn trainable_params(model: &mut SegmentationModel, frozen: bool) -> Vec<&mut Param> {
    let mut p = if frozen { Vec::new() } else { model.encoder.params_mut() };
    p.extend(model.decoder.params_mut());
    p
}

fn snapshot(model: &SegmentationModel) -> Vec<Vec<f32>> {
    model
        .encoder
        .params()
        .into_iter()
        .chain(model.decoder.params())
        .map(|p| p.value.clone())
        .collect()
}

fn restore(model: &mut SegmentationModel, values: &[Vec<f32>]) {
    let mut params = model.encoder.params_mut();
    params.extend(model.decoder.params_mut());
    for (p, v) in params.into_iter().zip(values) {
        p.value.copy_from_slice(v);
    }
}

/// Trains encoder + fresh decoder on `labeled` with `patch x patch`
/// windows and keeps the weights that score best on `val`.
pub fn finetune_segmentation(
    init: EncoderInit<'_>,
    labeled: &[ImageRecord],
    val: &[ImageRecord],
    config: &ValidatedConfig,
    patch: usize,
    opts: &FinetuneOptions,
) -> Result<FinetuneOutcome, TrainError> {
    if labeled.is_empty() {
        return Err(TrainError::EmptySubset);
    }
    let spec = EncoderSpec::from_config(config, patch)?;
    let mut encoder = Encoder::new(spec.clone(), &mut RngStream::new(config.seed, "init/encoder"))?;
    match init {
        EncoderInit::Pretrained(src) if config.ssl_method != SslMethod::None => {
            if !src.spec().compatible(&spec) {
                return Err(TrainError::Invalid(format!(
                    "pretrained encoder {:?} does not match config {:?}",
                    src.spec(),
                    spec
                )));
            }
            copy_params(&mut encoder, src)?;
        }
        _ => {}
    }
    let initial_encoder_checksum = param_checksum(&encoder.params());
    let dspec = DecoderSpec::new(config.decoder, opts.num_classes, (patch, patch))?;
    let mut model = SegmentationModel::new(encoder, dspec, &mut RngStream::new(config.seed, "init/decoder"))?;
    let mut opt = Optimizer::new(
        config.finetune_optimizer,
        config.momentum,
        0.0,
        config.trust_coefficient,
    );
    let frozen = config.frozen_encoder;
    let stride = config.effective_stride(patch);

    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join(METRICS_FILE))?,
            )
        }
        None => None,
    };

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<Vec<f32>>)> = None;
    for epoch in 0..config.finetune_epochs {
        let mut patches = Vec::with_capacity(labeled.len() * config.patches_per_image);
        for (i, rec) in labeled.iter().enumerate() {
            let mut rng = RngStream::new(config.seed, format!("finetune/e{epoch}/r{i}"));
            let (h, w) = rec.shape();
            let positions = (h.saturating_sub(patch) + 1) * (w.saturating_sub(patch) + 1);
            for _ in 0..config.patches_per_image.min(positions) {
                let win = sample_window_random(rec.shape(), (patch, patch), &mut rng)?;
                let mut lp = LabeledPatch::cut(rec, win)?;
                if rng.bernoulli(0.5) {
                    lp.hflip();
                }
                patches.push(lp);
            }
        }
        RngStream::new(config.seed, format!("finetune/order/e{epoch}")).shuffle(&mut patches);

        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in patches.chunks(config.finetune_batch_size) {
            let x = Tensor::from_images(chunk.iter().map(|p| &p.pixels));
            let labels: Vec<u8> = chunk.iter().flat_map(|p| p.target.iter().copied()).collect();
            let logits = model.forward_train(&x, frozen);
            let (loss, dz) = batch_loss(&logits, &labels, config.dice_epsilon);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step: batches });
            }
            for p in trainable_params(&mut model, frozen) {
                p.zero_grad();
            }
            model.backward(&dz, frozen);
            opt.step(trainable_params(&mut model, frozen), config.finetune_lr)?;
            loss_sum += loss;
            batches += 1;
        }

        let last = epoch + 1 == config.finetune_epochs;
        let validate = !val.is_empty() && (last || (config.val_every > 0 && (epoch + 1) % config.val_every == 0));
        let (val_dice, val_hd) = if validate {
            let s = evaluate_split(&model, val, stride, config.metric_cap)?;
            if best.as_ref().is_none_or(|(d, _, _)| s.mean_dice > *d) {
                best = Some((s.mean_dice, epoch, snapshot(&model)));
            }
            (Some(s.mean_dice), Some(s.mean_hd))
        } else {
            (None, None)
        };
        let row = FinetuneEpoch {
            stage: "finetune".into(),
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_dice,
            val_hd,
        };
        if let Some(f) = &mut log {
            writeln!(f, "{}", serde_json::to_string(&row).expect("serializable"))?;
        }
        history.push(row);
    }

    let (best_val_dice, best_epoch) = match best {
        Some((d, e, values)) => {
            restore(&mut model, &values);
            (Some(d), e)
        }
        None => (None, config.finetune_epochs.saturating_sub(1)),
    };

    let checkpoint = match &opts.out_dir {
        Some(dir) => Some(save(
            &dir.join(CHECKPOINT_DIR),
            config,
            &model,
            best_val_dice,
            best_epoch,
        )?),
        None => None,
    };

    Ok(FinetuneOutcome {
        model,
        best_val_dice,
        best_epoch,
        history,
        checkpoint,
        initial_encoder_checksum,
    })
}

fn save(
    dir: &Path,
    config: &ValidatedConfig,
    model: &SegmentationModel,
    best_val_dice: Option<f64>,
    best_epoch: usize,
) -> Result<PathBuf, TrainError> {
    let mut w = CheckpointWriter::new(dir)?;
    w.group("encoder", &model.encoder.params())?;
    w.group("decoder", &model.decoder.params())?;
    Ok(w.finish(CheckpointManifest {
        format_version: CHECKPOINT_FORMAT,
        stage: "finetune".into(),
        encoder: model.encoder.spec().clone(),
        heads: Vec::new(),
        decoder: Some(model.decoder.spec().clone()),
        config_hash: config.hash(),
        epoch: best_epoch,
        step: 0,
        rng_state: None,
        blobs: Default::default(),
        checksums: Default::default(),
        extra: serde_json::json!({ "best_val_dice": best_val_dice }),
    })?)
}

/// Rebuilds a fine-tuned encoder + decoder pair.
pub fn load_segmentation_model(dir: &Path) -> Result<SegmentationModel, TrainError> {
    let ck = Checkpoint::open(dir)?;
    let dspec = ck
        .manifest
        .decoder
        .clone()
        .ok_or_else(|| TrainError::Invalid(format!("{} is not a segmentation checkpoint", dir.display())))?;
    let mut rng = RngStream::new(0, "load");
    let encoder = Encoder::new(ck.manifest.encoder.clone(), &mut rng)?;
    let mut model = SegmentationModel::new(encoder, dspec, &mut rng)?;
    ck.load_into("encoder", &mut model.encoder)?;
    ck.load_into("decoder", &mut model.decoder)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{validate_config, DecoderStyle, ExperimentConfig, Sampling};
    use crate::types::{CropDivisor, Split};

    fn recs(n: usize, split: Split) -> Vec<ImageRecord> {
        (0..n)
            .map(|i| {
                let mut rng = RngStream::new(i as u64, "ft");
                let col = 4 + rng.index(24);
                let mask = Array2::from_shape_fn((32, 32), |(_, c)| u8::from(c.abs_diff(col) <= 1));
                let px = mask.mapv(|m| m as f32) + Array2::from_shape_fn((32, 32), |_| 0.1 * rng.normal() as f32);
                ImageRecord::new(format!("{split}{i}"), px, Some(mask), split).unwrap()
            })
            .collect()
    }

    fn cfg() -> ValidatedConfig {
        validate_config(ExperimentConfig {
            ssl_method: SslMethod::None,
            sampling: Sampling::Random,
            crop_divisor: Some(CropDivisor::Quarter),
            finetune_epochs: 2,
            finetune_batch_size: 8,
            feature_dim: 16,
            ..ExperimentConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn smoke_with_validation() {
        let out = finetune_segmentation(
            EncoderInit::Random,
            &recs(6, Split::Train),
            &recs(3, Split::Val),
            &cfg(),
            8,
            &FinetuneOptions::default(),
        )
        .unwrap();
        assert_eq!(out.history.len(), 2);
        assert!(out.history.iter().all(|h| h.val_dice.is_some()));
        assert!(out.best_val_dice.unwrap() >= 0.0);
    }

    #[test]
    fn pretrained_encoder_is_copied_and_frozen_stays_fixed() {
        let c = cfg()
            .with(|c| {
                c.ssl_method = SslMethod::Simclr;
                c.frozen_encoder = true;
            })
            .unwrap();
        let spec = EncoderSpec::from_config(&c, 8).unwrap();
        let src = Encoder::new(spec, &mut RngStream::new(77, "other")).unwrap();
        let out = finetune_segmentation(
            EncoderInit::Pretrained(&src),
            &recs(4, Split::Train),
            &[],
            &c,
            8,
            &FinetuneOptions::default(),
        )
        .unwrap();
        let src_sum = param_checksum(&src.params());
        assert_eq!(out.initial_encoder_checksum, src_sum);
        assert_eq!(param_checksum(&out.model.encoder.params()), src_sum);
    }

    #[test]
    fn multiclass_and_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg().with(|c| c.decoder = DecoderStyle::DeeplabAspp).unwrap();
        let train: Vec<ImageRecord> = recs(4, Split::Train)
            .into_iter()
            .map(|r| {
                let (id, px, _, split) = r.into_parts();
                let m = Array2::from_shape_fn((32, 32), |(r, _)| (r / 11) as u8);
                ImageRecord::new(id, px, Some(m), split).unwrap()
            })
            .collect();
        let out = finetune_segmentation(
            EncoderInit::Random,
            &train,
            &train[..2],
            &c,
            8,
            &FinetuneOptions {
                out_dir: Some(dir.path().to_path_buf()),
                num_classes: 3,
            },
        )
        .unwrap();
        let loaded = load_segmentation_model(out.checkpoint.as_ref().unwrap()).unwrap();
        let a: Vec<&Param> = out
            .model
            .encoder
            .params()
            .into_iter()
            .chain(out.model.decoder.params())
            .collect();
        let b: Vec<&Param> = loaded
            .encoder
            .params()
            .into_iter()
            .chain(loaded.decoder.params())
            .collect();
        assert_eq!(param_checksum(&a), param_checksum(&b));
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let mut rng = RngStream::new(3, "bl");
        for c in [1usize, 3] {
            let logits = Tensor::from_vec([2, c, 3, 3], (0..18 * c).map(|_| rng.normal() as f32).collect());
            let labels: Vec<u8> = (0..18).map(|_| rng.index(c.max(2)) as u8).collect();
            let (_, dz) = batch_loss(&logits, &labels, 1.0);
            for i in 0..logits.data().len() {
                let mut a = logits.clone();
                a.data_mut()[i] += 1e-2;
                let mut b = logits.clone();
                b.data_mut()[i] -= 1e-2;
                let fd = (batch_loss(&a, &labels, 1.0).0 - batch_loss(&b, &labels, 1.0).0) / 2e-2;
                assert!(
                    (fd - dz.data()[i] as f64).abs() < 1e-3,
                    "c={c} i={i}: {fd} vs {}",
                    dz.data()[i]
                );
            }
        }
    }

    #[test]
    fn overfits_a_tiny_batch() {
        let c = cfg().with(|c| c.finetune_lr = 3e-3).unwrap();
        let train = recs(2, Split::Train);
        let patches: Vec<LabeledPatch> = train
            .iter()
            .map(|r| LabeledPatch::cut(r, Window::from_origin(0, 0, 16, 16, (32, 32)).unwrap()).unwrap())
            .collect();
        let spec = EncoderSpec::from_config(&c, 16).unwrap();
        let enc = Encoder::new(spec, &mut RngStream::new(0, "e")).unwrap();
        let mut model = SegmentationModel::new(
            enc,
            DecoderSpec::new(c.decoder, 1, (16, 16)).unwrap(),
            &mut RngStream::new(0, "d"),
        )
        .unwrap();
        let mut opt = Optimizer::new(c.finetune_optimizer, 0.9, 0.0, 0.001);
        let x = Tensor::from_images(patches.iter().map(|p| &p.pixels));
        let labels: Vec<u8> = patches.iter().flat_map(|p| p.target.iter().copied()).collect();
        let mut losses = Vec::new();
        for _ in 0..50 {
            let logits = model.forward_train(&x, false);
            let (loss, dz) = batch_loss(&logits, &labels, 1.0);
            for p in trainable_params(&mut model, false) {
                p.zero_grad();
            }
            model.backward(&dz, false);
            opt.step(trainable_params(&mut model, false), c.finetune_lr).unwrap();
            losses.push(loss);
        }
        assert!(losses[49] < losses[0] * 0.5, "{:?}", losses);
    }
}
