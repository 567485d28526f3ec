//! Grid sweeps of pretrain, fine-tune and evaluate runs.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use scalessl_core::evalkit::{evaluate_split, EvalRow, EvalSummary};
use scalessl_core::train::{
    finetune_segmentation, pretrain, select_labeled_subset, EncoderInit, FinetuneOptions, PretrainOptions,
};
use scalessl_core::{validate_config, CropDivisor, ExperimentConfig, Sampling, Split, SslMethod, ValidatedConfig};
use serde::{Deserialize, Serialize};

use crate::ingest::{floor_to_stride, ingest_dataset, resolve_patch_size, Dataset};
use crate::HarnessError;

pub const RUNS_FILE: &str = "runs.jsonl";
pub const SWEEP_FILE: &str = "sweep.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    pub ssl_method: Vec<SslMethod>,
    pub sampling: Vec<Sampling>,
    #[serde(default)]
    pub crop_divisor: Vec<CropDivisor>,
    pub seed: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub dataset: PathBuf,
    pub axes: SweepAxes,
    #[serde(default)]
    pub base_config: ExperimentConfig,
    pub output_dir: PathBuf,
    /// Pool patch-method rows across SSL methods when aggregating.
    #[serde(default)]
    pub average_over_methods: bool,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)?;
        let spec: SweepSpec = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| HarnessError::Invalid(e.to_string()))?
        };
        Ok(spec)
    }

    /// Cells of the Cartesian product. Full-view and supervised cells have no
    /// divisor, and a supervised cell ignores sampling, so duplicates collapse.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out: Vec<Cell> = Vec::new();
        for &seed in &self.axes.seed {
            for &method in &self.axes.ssl_method {
                for &sampling in &self.axes.sampling {
                    let divisors: Vec<Option<CropDivisor>> =
                        if method == SslMethod::None || sampling == Sampling::FullView {
                            vec![None]
                        } else {
                            self.axes.crop_divisor.iter().copied().map(Some).collect()
                        };
                    for crop_divisor in divisors {
                        let cell = Cell {
                            ssl_method: method,
                            sampling: if method == SslMethod::None {
                                Sampling::FullView
                            } else {
                                sampling
                            },
                            crop_divisor,
                            seed,
                        };
                        if !out.contains(&cell) {
                            out.push(cell);
                        }
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<Vec<(Cell, ValidatedConfig)>, HarnessError> {
        let cells = self.cells();
        if cells.is_empty() {
            return Err(HarnessError::Invalid("sweep has no cells".into()));
        }
        cells
            .into_iter()
            .map(|c| {
                let cfg = validate_config(c.config(&self.base_config))?;
                Ok((c, cfg))
            })
            .collect()
    }
}

/// One coordinate of the sweep grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub ssl_method: SslMethod,
    pub sampling: Sampling,
    pub crop_divisor: Option<CropDivisor>,
    pub seed: u64,
}

impl Cell {
    pub fn key(&self) -> String {
        let d = self.crop_divisor.map_or("full".to_string(), |d| d.value().to_string());
        format!("{}-{}-{}-s{}", self.ssl_method, self.sampling, d, self.seed)
    }

    pub fn divisor_label(&self) -> String {
        self.crop_divisor.map_or("full".to_string(), |d| d.to_string())
    }

    pub fn config(&self, base: &ExperimentConfig) -> ExperimentConfig {
        ExperimentConfig {
            ssl_method: self.ssl_method,
            sampling: self.sampling,
            crop_divisor: self.crop_divisor,
            seed: self.seed,
            ..base.clone()
        }
    }

    /// Full-slice baselines: supervised and full-view pretraining.
    pub fn is_baseline(&self) -> bool {
        self.crop_divisor.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell: Cell,
    pub status: RunStatus,
    #[serde(default)]
    pub eval_rows: Vec<EvalRow>,
    pub wall_time_s: f64,
    #[serde(default)]
    pub checkpoints: Vec<PathBuf>,
    #[serde(default)]
    pub error: Option<String>,
    pub patch_size: Option<usize>,
    #[serde(default)]
    pub pretrain_epoch_seconds: Vec<f64>,
    #[serde(default)]
    pub config_hash: String,
}

impl RunRecord {
    pub fn pending(cell: Cell) -> Self {
        Self {
            cell,
            status: RunStatus::Pending,
            eval_rows: Vec::new(),
            wall_time_s: 0.0,
            checkpoints: Vec::new(),
            error: None,
            patch_size: None,
            pretrain_epoch_seconds: Vec::new(),
            config_hash: String::new(),
        }
    }
}

/// Everything a single cell produced.
#[derive(Clone, Debug)]
pub struct CellOutput {
    pub patch_size: usize,
    pub eval: EvalSummary,
    pub row: EvalRow,
    pub checkpoints: Vec<PathBuf>,
    pub pretrain_epoch_seconds: Vec<f64>,
}

/// Fine-tuning patch side for a cell: `L / divisor`, or `L` itself for
/// full-slice baselines, floored to the encoder stride.
pub fn cell_patch_size(ds: &Dataset, cfg: &ValidatedConfig) -> Result<usize, HarnessError> {
    let sp = cfg.stride_product();
    match cfg.crop_divisor {
        Some(d) => resolve_patch_size(&ds.records, d.value(), sp),
        None => floor_to_stride(
            ds.base_l()
                .ok_or_else(|| HarnessError::Invalid("empty dataset".into()))?,
            sp,
        ),
    }
}

/// Pretrains (unless supervised), fine-tunes on the labeled subset of the
/// train split and evaluates on the test split.
pub fn run_cell(ds: &Dataset, cfg: &ValidatedConfig, dir: &Path) -> Result<CellOutput, HarnessError> {
    let patch = cell_patch_size(ds, cfg)?;
    let mut checkpoints = Vec::new();
    let mut epoch_seconds = Vec::new();
    let pre = if cfg.ssl_method != SslMethod::None {
        let unlabeled: Vec<_> = ds
            .records
            .iter()
            .filter(|r| matches!(r.split, Split::Pretrain | Split::Train))
            .cloned()
            .collect();
        let out = pretrain(
            &unlabeled,
            cfg,
            patch,
            &PretrainOptions {
                out_dir: Some(dir.join("pretrain")),
                ..Default::default()
            },
        )?;
        checkpoints.extend(out.checkpoint.clone());
        epoch_seconds = out.epoch_seconds.clone();
        Some(out)
    } else {
        None
    };
    let labeled = select_labeled_subset(&ds.split(Split::Train), cfg.label_fraction, cfg.seed)?;
    let val = ds.split(Split::Val);
    let test = ds.split(Split::Test);
    if test.is_empty() {
        return Err(HarnessError::Invalid("test split is empty".into()));
    }
    let init = match &pre {
        Some(p) => EncoderInit::Pretrained(&p.model.encoder),
        None => EncoderInit::Random,
    };
    let ft = finetune_segmentation(
        init,
        &labeled,
        &val,
        cfg,
        patch,
        &FinetuneOptions {
            out_dir: Some(dir.join("finetune")),
            num_classes: ds.num_classes,
        },
    )?;
    checkpoints.extend(ft.checkpoint.clone());
    let eval = evaluate_split(&ft.model, &test, cfg.effective_stride(patch), cfg.metric_cap)?;
    fs::write(dir.join("eval.json"), serde_json::to_vec_pretty(&eval)?)?;
    let row = EvalRow {
        dataset: ds.name.clone(),
        method: cfg.ssl_method.to_string(),
        sampling: cfg.sampling.to_string(),
        patch_divisor: cfg.crop_divisor.map_or("full".to_string(), |d| d.to_string()),
        hd: eval.mean_hd,
        dice: eval.mean_dice,
        seed: cfg.seed,
    };
    Ok(CellOutput {
        patch_size: patch,
        eval,
        row,
        checkpoints,
        pretrain_epoch_seconds: epoch_seconds,
    })
}

/// Latest record per cell from a runs file; missing file means no runs.
pub fn load_runs(dir: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let path = dir.join(RUNS_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<RunRecord> = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RunRecord = serde_json::from_str(&line)?;
        match out.iter_mut().find(|r| r.cell == rec.cell) {
            Some(slot) => *slot = rec,
            None => out.push(rec),
        }
    }
    Ok(out)
}

fn save_runs(dir: &Path, runs: &[RunRecord]) -> Result<(), HarnessError> {
    let tmp = dir.join(format!("{RUNS_FILE}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        for r in runs {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.sync_all()?;
    }
    fs::rename(tmp, dir.join(RUNS_FILE))?;
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    /// Stop after executing this many cells; later cells stay pending.
    pub max_cells: Option<usize>,
    pub quiet: bool,
}

pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<RunRecord>, HarnessError> {
    run_sweep_with(spec, &SweepOptions::default())
}

/// Runs every cell not already done under the same config, persisting
/// records after each change.
/// Cell failures are recorded and the sweep moves on.
pub fn run_sweep_with(spec: &SweepSpec, opts: &SweepOptions) -> Result<Vec<RunRecord>, HarnessError> {
    let cells = spec.validate()?;
    fs::create_dir_all(&spec.output_dir)?;
    fs::write(spec.output_dir.join(SWEEP_FILE), serde_json::to_vec_pretty(spec)?)?;
    let ds = ingest_dataset(&spec.dataset)?;
    let previous = load_runs(&spec.output_dir)?;
    let mut runs: Vec<RunRecord> = cells
        .iter()
        .map(|(c, cfg)| {
            previous
                .iter()
                .find(|r| r.cell == *c && r.status == RunStatus::Done && r.config_hash == cfg.hash())
                .cloned()
                .unwrap_or_else(|| RunRecord::pending(*c))
        })
        .collect();
    save_runs(&spec.output_dir, &runs)?;
    let mut executed = 0;
    for (i, (cell, cfg)) in cells.iter().enumerate() {
        if runs[i].status == RunStatus::Done {
            continue;
        }
        if opts.max_cells.is_some_and(|m| executed >= m) {
            break;
        }
        executed += 1;
        let dir = spec.output_dir.join(cell.key());
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        runs[i].status = RunStatus::Running;
        runs[i].config_hash = cfg.hash();
        save_runs(&spec.output_dir, &runs)?;
        if !opts.quiet {
            eprintln!("[{}/{}] {}", i + 1, cells.len(), cell.key());
        }
        let start = Instant::now();
        let result = run_cell(&ds, cfg, &dir);
        let rec = &mut runs[i];
        rec.wall_time_s = start.elapsed().as_secs_f64();
        match result {
            Ok(out) => {
                rec.status = RunStatus::Done;
                rec.eval_rows = vec![out.row];
                rec.checkpoints = out.checkpoints;
                rec.patch_size = Some(out.patch_size);
                rec.pretrain_epoch_seconds = out.pretrain_epoch_seconds;
                rec.error = None;
            }
            Err(e) => {
                if !opts.quiet {
                    eprintln!("  failed: {e}");
                }
                rec.status = RunStatus::Failed;
                rec.error = Some(e.to_string());
            }
        }
        save_runs(&spec.output_dir, &runs)?;
    }
    Ok(runs)
}

/// Mean and standard deviation of a metric over a group of runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub method: String,
    pub sampling: String,
    pub patch_size: String,
    pub hd: f64,
    pub hd_std: f64,
    pub dice: f64,
    pub dice_std: f64,
    pub n: usize,
}

/// Label used for patch rows pooled over SSL methods.
pub const POOLED_METHOD: &str = "ssl_mean";

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn divisor_rank(label: &str) -> usize {
    match label {
        "full" => 0,
        "L/2" => 2,
        "L/4" => 4,
        "L/8" => 8,
        _ => 99,
    }
}

fn sampling_rank(s: &str) -> usize {
    match s {
        "full_view" => 0,
        "random" => 1,
        "proximity" => 2,
        _ => 3,
    }
}

/// Groups done runs over seeds and, when `average_over_methods` is set,
/// over SSL methods for the patch cells. Baseline rows keep their method.
pub fn aggregate(runs: &[RunRecord], average_over_methods: bool) -> Vec<AggregateRow> {
    let mut groups: Vec<((String, String, String, String), Vec<&EvalRow>)> = Vec::new();
    for r in runs.iter().filter(|r| r.status == RunStatus::Done) {
        for row in &r.eval_rows {
            let method = if average_over_methods && !r.cell.is_baseline() {
                POOLED_METHOD.to_string()
            } else {
                row.method.clone()
            };
            let key = (
                row.dataset.clone(),
                method,
                row.sampling.clone(),
                row.patch_divisor.clone(),
            );
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(row),
                None => groups.push((key, vec![row])),
            }
        }
    }
    let mut out: Vec<AggregateRow> = groups
        .into_iter()
        .map(|((dataset, method, sampling, patch_size), rows)| {
            let (hd, hd_std) = mean_std(&rows.iter().map(|r| r.hd).collect::<Vec<_>>());
            let (dice, dice_std) = mean_std(&rows.iter().map(|r| r.dice).collect::<Vec<_>>());
            AggregateRow {
                dataset,
                method,
                sampling,
                patch_size,
                hd,
                hd_std,
                dice,
                dice_std,
                n: rows.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (
            &a.dataset,
            divisor_rank(&a.patch_size) != 0,
            &a.method,
            sampling_rank(&a.sampling),
            divisor_rank(&a.patch_size),
        )
            .cmp(&(
                &b.dataset,
                divisor_rank(&b.patch_size) != 0,
                &b.method,
                sampling_rank(&b.sampling),
                divisor_rank(&b.patch_size),
            ))
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(methods: Vec<SslMethod>, sampling: Vec<Sampling>, divisors: Vec<CropDivisor>) -> SweepSpec {
        SweepSpec {
            dataset: PathBuf::from("unused"),
            axes: SweepAxes {
                ssl_method: methods,
                sampling,
                crop_divisor: divisors,
                seed: vec![0, 1],
            },
            base_config: ExperimentConfig::default(),
            output_dir: PathBuf::from("unused"),
            average_over_methods: false,
        }
    }

    #[test]
    fn cells_collapse_baselines() {
        let s = spec(
            vec![SslMethod::Simclr, SslMethod::None],
            vec![Sampling::Random, Sampling::FullView],
            vec![CropDivisor::Half, CropDivisor::Eighth],
        );
        let cells = s.cells();
        // per seed: simclr random x2, simclr full, supervised
        assert_eq!(cells.len(), 8);
        assert_eq!(cells.iter().filter(|c| c.ssl_method == SslMethod::None).count(), 2);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn empty_axis_is_invalid() {
        let s = spec(vec![], vec![Sampling::Random], vec![CropDivisor::Half]);
        assert!(matches!(s.validate(), Err(HarnessError::Invalid(_))));
    }

    fn done(method: SslMethod, sampling: Sampling, d: Option<CropDivisor>, seed: u64, dice: f64) -> RunRecord {
        let cell = Cell {
            ssl_method: method,
            sampling,
            crop_divisor: d,
            seed,
        };
        RunRecord {
            status: RunStatus::Done,
            eval_rows: vec![EvalRow {
                dataset: "d".into(),
                method: method.to_string(),
                sampling: sampling.to_string(),
                patch_divisor: cell.divisor_label(),
                hd: 10.0 * dice,
                dice,
                seed,
            }],
            ..RunRecord::pending(cell)
        }
    }

    #[test]
    fn aggregation_over_methods_matches_table_rows() {
        let mut runs = Vec::new();
        for (mi, m) in [SslMethod::Simclr, SslMethod::Byol, SslMethod::Vicreg]
            .into_iter()
            .enumerate()
        {
            for s in [Sampling::Random, Sampling::Proximity] {
                for d in CropDivisor::ALL {
                    for seed in 0..2 {
                        runs.push(done(m, s, Some(d), seed, 0.1 * mi as f64 + 0.01 * seed as f64));
                    }
                }
            }
            runs.push(done(m, Sampling::FullView, None, 0, 0.5));
        }
        runs.push(done(SslMethod::None, Sampling::FullView, None, 0, 0.4));
        let pooled = aggregate(&runs, true);
        let patch: Vec<_> = pooled.iter().filter(|r| r.method == POOLED_METHOD).collect();
        assert_eq!(patch.len(), 6);
        assert!(patch.iter().all(|r| r.n == 6 && (r.dice - 0.105).abs() < 1e-12));
        assert_eq!(pooled.iter().filter(|r| r.patch_size == "full").count(), 4);
        assert_eq!(pooled[0].patch_size, "full");

        let split = aggregate(&runs, false);
        assert_eq!(split.iter().filter(|r| r.patch_size != "full").count(), 18);
        let one = split
            .iter()
            .find(|r| r.method == "byol" && r.patch_size == "L/4")
            .unwrap();
        assert_eq!(one.n, 2);
        assert!((one.dice - 0.105).abs() < 1e-12);
        assert!((one.dice_std - (0.00005f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn failed_runs_are_not_aggregated() {
        let mut r = done(SslMethod::Simclr, Sampling::Random, Some(CropDivisor::Half), 0, 0.3);
        r.status = RunStatus::Failed;
        assert!(aggregate(&[r], false).is_empty());
    }
}
