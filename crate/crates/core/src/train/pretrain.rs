use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::{SslMethod, ValidatedConfig};
use crate::nets::checkpoint::CHECKPOINT_FORMAT;
use crate::nets::{
    Checkpoint, CheckpointManifest, CheckpointWriter, Encoder, EncoderSpec, HeadSpec, Layer, SslModel, Tensor,
};
use crate::objectives::{ssl_batch_loss, LossReport, SslOperands};
use crate::rng::RngStream;
use crate::types::ImageRecord;
use crate::views::ViewSampler;

use super::optim::{LrSchedule, Optimizer};
use super::TrainError;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Receives `metrics.jsonl` and `checkpoint/`; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint directory.
    pub resume_from: Option<PathBuf>,
    /// Stop (and checkpoint) once this many global steps have run.
    pub stop_after_steps: Option<usize>,
}

/// One line of the pretraining metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossReport,
}

pub struct PretrainOutcome {
    pub model: SslModel,
    /// Total loss of every step run by this call.
    pub losses: Vec<f64>,
    /// Wall time of each epoch completed by this call.
    pub epoch_seconds: Vec<f64>,
    /// Global step reached.
    pub step: usize,
    pub checkpoint: Option<PathBuf>,
}

fn build_model(config: &ValidatedConfig, view_size: usize) -> Result<SslModel, TrainError> {
    let spec = EncoderSpec::from_config(config, view_size)?;
    let encoder = Encoder::new(spec, &mut RngStream::new(config.seed, "init/encoder"))?;
    let projector = HeadSpec::projector(config.feature_dim, config.embedding_dim)?;
    let predictor = match config.ssl_method {
        SslMethod::Byol => Some(HeadSpec::predictor(config.feature_dim, config.embedding_dim)?),
        _ => None,
    };
    Ok(SslModel::new(
        encoder,
        projector,
        predictor,
        &mut RngStream::new(config.seed, "init/heads"),
    )?)
}

fn to_rows(t: &Tensor, start: usize, end: usize) -> Array2<f64> {
    let d = t.sample_len();
    Array2::from_shape_vec(
        (end - start, d),
        t.data()[start * d..end * d].iter().map(|&v| v as f64).collect(),
    )
    .expect("shape matches")
}

/// Visit order of `(record, repeat)` items for one epoch.
fn epoch_order(config: &ValidatedConfig, n_records: usize, epoch: usize) -> Vec<usize> {
    let mut items: Vec<usize> = (0..n_records * config.views_per_image.max(1)).collect();
    RngStream::new(config.seed, format!("pretrain/order/e{epoch}")).shuffle(&mut items);
    items
}

fn batches_per_epoch(config: &ValidatedConfig, n_items: usize) -> usize {
    let full = n_items / config.batch_size;
    // A trailing batch of one pair cannot be scored by every objective.
    if n_items % config.batch_size >= 2 {
        full + 1
    } else {
        full.max(1)
    }
}

/// Runs self-supervised pretraining of the encoder on `records` with views
/// of side `view_size`.
pub fn pretrain(
    records: &[ImageRecord],
    config: &ValidatedConfig,
    view_size: usize,
    opts: &PretrainOptions,
) -> Result<PretrainOutcome, TrainError> {
    if records.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if config.ssl_method == SslMethod::None {
        return Err(TrainError::Invalid("pretraining requires an SSL method".into()));
    }
    let mut model = build_model(config, view_size)?;
    let mut opt = Optimizer::new(
        config.optimizer,
        config.momentum,
        config.weight_decay,
        config.trust_coefficient,
    );
    let sampler = ViewSampler::from_config(config, view_size);

    let n_items = records.len() * config.views_per_image.max(1);
    if n_items < 2 {
        return Err(TrainError::Invalid(
            "pretraining needs at least two views per epoch".into(),
        ));
    }
    let spe = batches_per_epoch(config, n_items);
    let schedule = LrSchedule::new(
        config.effective_learning_rate(),
        config.warmup_epochs,
        config.epochs,
        spe,
    );
    let total_steps = config.epochs * spe;

    let mut step = 0usize;
    if let Some(dir) = &opts.resume_from {
        step = restore(dir, config, &mut model, &mut opt)?;
    }

    let mut metrics = match &opts.out_dir {
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

    let mut losses = Vec::new();
    let mut epoch_seconds = Vec::new();
    let stop_at = opts.stop_after_steps.unwrap_or(usize::MAX).min(total_steps);
    let mut checkpoint = None;

    while step < stop_at {
        let epoch = step / spe;
        let order = epoch_order(config, records.len(), epoch);
        let started = Instant::now();
        let first_batch = step % spe;
        for b in first_batch..spe {
            if step >= stop_at {
                break;
            }
            let lo = b * config.batch_size;
            let hi = ((b + 1) * config.batch_size).min(order.len());
            let batch_rng = RngStream::new(config.seed, format!("pretrain/views/e{epoch}/b{b}"));
            let mut v1 = Vec::with_capacity(hi - lo);
            let mut v2 = Vec::with_capacity(hi - lo);
            for (i, &item) in order[lo..hi].iter().enumerate() {
                let rec = &records[item % records.len()];
                let pair = sampler.make_view_pair(rec, &mut batch_rng.derive(i.to_string()))?;
                v1.push(pair.view1);
                v2.push(pair.view2);
            }
            let x = Tensor::from_images(v1.iter().chain(v2.iter()));
            let report = train_step(&mut model, &mut opt, config, &x, schedule.at(step))?;
            if !report.total.is_finite() {
                if let Some(f) = &mut metrics {
                    writeln!(
                        f,
                        "{}",
                        serde_json::json!({"stage": "pretrain", "epoch": epoch, "step": step, "error": "non-finite loss"})
                    )?;
                }
                return Err(TrainError::NonFiniteLoss { epoch, step });
            }
            losses.push(report.total);
            if let Some(f) = &mut metrics {
                let line = StepLog {
                    stage: "pretrain".into(),
                    epoch,
                    step,
                    lr: schedule.at(step),
                    loss: report,
                };
                writeln!(f, "{}", serde_json::to_string(&line).expect("serializable"))?;
            }
            step += 1;
        }
        let epoch_done = step.is_multiple_of(spe);
        if epoch_done && first_batch == 0 {
            epoch_seconds.push(started.elapsed().as_secs_f64());
        }
        if let Some(dir) = &opts.out_dir {
            let finished_epochs = step / spe;
            let periodic =
                epoch_done && config.checkpoint_every > 0 && finished_epochs.is_multiple_of(config.checkpoint_every);
            if periodic || step >= stop_at {
                checkpoint = Some(save(&dir.join(CHECKPOINT_DIR), config, &model, &opt, step, spe)?);
            }
        }
    }

    Ok(PretrainOutcome {
        model,
        losses,
        epoch_seconds,
        step,
        checkpoint,
    })
}

/// Forward, loss, backward and update on one stacked `2B` batch.
fn train_step(
    model: &mut SslModel,
    opt: &mut Optimizer,
    config: &ValidatedConfig,
    x: &Tensor,
    lr: f64,
) -> Result<LossReport, TrainError> {
    let b = x.n() / 2;
    let fwd = model.forward_train(x);
    let operands = match &fwd.target {
        None => SslOperands::Contrastive {
            z1: to_rows(&fwd.online, 0, b),
            z2: to_rows(&fwd.online, b, 2 * b),
        },
        Some(t) => SslOperands::Predictive {
            online1: to_rows(&fwd.online, 0, b),
            online2: to_rows(&fwd.online, b, 2 * b),
            target1: to_rows(t, 0, b),
            target2: to_rows(t, b, 2 * b),
        },
    };
    let (report, grads) = ssl_batch_loss(config.ssl_method, &operands, &config.objective)?;
    if !report.total.is_finite() {
        return Ok(report);
    }
    let grad: Vec<f32> = grads.d1.iter().chain(grads.d2.iter()).map(|&v| v as f32).collect();
    let dz = Tensor::from_vec(fwd.online.shape(), grad);
    for p in model.online_params_mut() {
        p.zero_grad();
    }
    model.backward(&dz);
    opt.step(model.online_params_mut(), lr)?;
    model.update_target(config.objective.ema_momentum as f32)?;
    Ok(report)
}

fn save(
    dir: &Path,
    config: &ValidatedConfig,
    model: &SslModel,
    opt: &Optimizer,
    step: usize,
    spe: usize,
) -> Result<PathBuf, TrainError> {
    let mut w = CheckpointWriter::new(dir)?;
    w.group("encoder", &model.encoder.params())?;
    w.group("projector", &model.projector.params())?;
    let mut heads = vec![model.projector.spec().clone()];
    if let Some(b) = &model.byol {
        w.group("predictor", &b.predictor.params())?;
        w.group("target_encoder", &b.target_encoder.params())?;
        w.group("target_projector", &b.target_projector.params())?;
        heads.push(b.predictor.spec().clone());
    }
    w.tensors("optimizer", &opt.state_tensors(&model.online_params()))?;
    Ok(w.finish(CheckpointManifest {
        format_version: CHECKPOINT_FORMAT,
        stage: "pretrain".into(),
        encoder: model.encoder.spec().clone(),
        heads,
        decoder: None,
        config_hash: config.hash(),
        epoch: step / spe,
        step,
        rng_state: Some(RngStream::new(config.seed, "pretrain").state()),
        blobs: Default::default(),
        checksums: Default::default(),
        extra: serde_json::json!({ "optimizer_t": opt.t, "steps_per_epoch": spe }),
    })?)
}

fn restore(
    dir: &Path,
    config: &ValidatedConfig,
    model: &mut SslModel,
    opt: &mut Optimizer,
) -> Result<usize, TrainError> {
    let ck = Checkpoint::open(dir)?;
    if ck.manifest.config_hash != config.hash() {
        return Err(TrainError::Invalid(
            "checkpoint was written with a different config".into(),
        ));
    }
    ck.load_into("encoder", &mut model.encoder)?;
    ck.load_into("projector", &mut model.projector)?;
    if let Some(b) = &mut model.byol {
        ck.load_into("predictor", &mut b.predictor)?;
        ck.load_into("target_encoder", &mut b.target_encoder)?;
        ck.load_into("target_projector", &mut b.target_projector)?;
    }
    let t = ck
        .manifest
        .extra
        .get("optimizer_t")
        .and_then(|v| v.as_u64())
        .unwrap_or(0);
    opt.load_state(&model.online_params(), &ck.read_group("optimizer")?, t)?;
    Ok(ck.manifest.step)
}

/// Rebuilds the encoder stored in a pretraining (or fine-tuning) checkpoint.
pub fn load_pretrained_encoder(dir: &Path) -> Result<Encoder, TrainError> {
    let ck = Checkpoint::open(dir)?;
    let mut enc = Encoder::new(ck.manifest.encoder.clone(), &mut RngStream::new(0, "load"))?;
    ck.load_into("encoder", &mut enc)?;
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{validate_config, ExperimentConfig, OptimizerKind, Sampling};
    use crate::nets::param_checksum;
    use crate::types::{CropDivisor, Split};

    fn data(n: usize) -> Vec<ImageRecord> {
        (0..n)
            .map(|i| {
                let mut rng = RngStream::new(i as u64, "data");
                let px = Array2::from_shape_fn((32, 32), |(r, c)| {
                    ((r + c) as f32 * 0.1).sin() + 0.1 * rng.normal() as f32
                });
                ImageRecord::new(format!("r{i}"), px, None, Split::Pretrain).unwrap()
            })
            .collect()
    }

    fn cfg(method: SslMethod) -> ValidatedConfig {
        validate_config(ExperimentConfig {
            ssl_method: method,
            sampling: Sampling::Random,
            crop_divisor: Some(CropDivisor::Quarter),
            epochs: 1,
            batch_size: 8,
            optimizer: OptimizerKind::Lars,
            learning_rate: Some(1.0),
            feature_dim: 16,
            embedding_dim: 8,
            ..ExperimentConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn smoke_all_methods() {
        let recs = data(32);
        for m in [SslMethod::Simclr, SslMethod::Byol, SslMethod::Vicreg] {
            let out = pretrain(&recs, &cfg(m), 8, &PretrainOptions::default()).unwrap();
            assert_eq!(out.losses.len(), 4);
            assert!(out.losses.iter().all(|l| l.is_finite()), "{m}: {:?}", out.losses);
            assert_eq!(out.epoch_seconds.len(), 1);
        }
    }

    #[test]
    fn rejects_none_method() {
        let c = validate_config(ExperimentConfig {
            ssl_method: SslMethod::None,
            ..ExperimentConfig::default()
        })
        .unwrap();
        assert!(pretrain(&data(4), &c, 8, &PretrainOptions::default()).is_err());
    }

    #[test]
    fn byol_target_moves_only_by_ema() {
        let recs = data(16);
        let c = cfg(SslMethod::Byol);
        let mut model = build_model(&c, 8).unwrap();
        let mut opt = Optimizer::new(c.optimizer, c.momentum, c.weight_decay, c.trust_coefficient);
        let sampler = ViewSampler::from_config(&c, 8);
        let mut rng = RngStream::new(0, "t");
        let mut v1 = Vec::new();
        let mut v2 = Vec::new();
        for r in &recs[..8] {
            let p = sampler.make_view_pair(r, &mut rng).unwrap();
            v1.push(p.view1);
            v2.push(p.view2);
        }
        let x = Tensor::from_images(v1.iter().chain(v2.iter()));
        let before_target: Vec<Vec<f32>> = model.target_params().iter().map(|p| p.value.clone()).collect();
        let before_online: Vec<Vec<f32>> = model
            .encoder
            .params()
            .iter()
            .chain(model.projector.params().iter())
            .map(|p| p.value.clone())
            .collect();
        train_step(&mut model, &mut opt, &c, &x, 1.0).unwrap();
        let after_online: Vec<Vec<f32>> = model
            .encoder
            .params()
            .iter()
            .chain(model.projector.params().iter())
            .map(|p| p.value.clone())
            .collect();
        let m = c.objective.ema_momentum as f32;
        for ((t0, o1), t1) in before_target.iter().zip(&after_online).zip(model.target_params()) {
            for ((a, b), c) in t0.iter().zip(o1).zip(&t1.value) {
                assert!((m * a + (1.0 - m) * b - c).abs() < 1e-6);
            }
        }
        assert_ne!(before_online, after_online);
    }

    #[test]
    fn resume_matches_straight_run() {
        let recs = data(40);
        let c = cfg(SslMethod::Simclr).with(|c| c.epochs = 4).unwrap();
        let straight = pretrain(&recs, &c, 8, &PretrainOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let first = pretrain(
            &recs,
            &c,
            8,
            &PretrainOptions {
                out_dir: Some(dir.path().to_path_buf()),
                stop_after_steps: Some(7),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(first.step, 7);
        let second = pretrain(
            &recs,
            &c,
            8,
            &PretrainOptions {
                resume_from: first.checkpoint.clone(),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(second.step, straight.step);
        let mut joined = first.losses.clone();
        joined.extend(&second.losses);
        assert_eq!(joined, straight.losses);
        assert_eq!(
            param_checksum(&straight.model.online_params()),
            param_checksum(&second.model.online_params())
        );
        let log = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        let parsed: Vec<StepLog> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed.len(), 7);
    }
}
