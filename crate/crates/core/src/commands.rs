//! The four pipeline commands behind the `dgdm` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::{Array4, Axis};

use crate::config::{DataSource, RunConfig};
use crate::data::{self, Dataset};
use crate::error::{DgdmError, Result};
use crate::eval::{
    self, best_iou, class_heatmap, heatmap_to_bbox, LocalizationRecord, MetricsReport,
};
use crate::layer::Stage;
use crate::nn::{argmax_rows, build_model, train, Checkpoint, Model, TrainLog};
use crate::sagd::BlockSize;
use crate::viz;

/// `run_<unix millis>_<seed>/` with `logs/`, `reports/` and `viz/` inside.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(parent: &Path, seed: u64) -> Result<RunDir> {
        fs::create_dir_all(parent).map_err(|e| DgdmError::io(parent, e))?;
        let mut millis = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis());
        let root = loop {
            let candidate = parent.join(format!("run_{millis}_{seed}"));
            match fs::create_dir(&candidate) {
                Ok(()) => break candidate,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => millis += 1,
                Err(e) => return Err(DgdmError::io(candidate, e)),
            }
        };
        for sub in ["logs", "reports", "viz"] {
            let p = root.join(sub);
            fs::create_dir(&p).map_err(|e| DgdmError::io(p, e))?;
        }
        Ok(RunDir { root })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.resolved")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint.json")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn viz(&self) -> PathBuf {
        self.root.join("viz")
    }
}

fn write(path: PathBuf, contents: &str) -> Result<()> {
    fs::write(&path, contents).map_err(|e| DgdmError::io(path, e))
}

fn write_reports(
    dir: &RunDir,
    records: &[LocalizationRecord],
    report: &MetricsReport,
) -> Result<()> {
    let reports = dir.reports();
    write(reports.join("metrics.json"), &report.to_json())?;
    write(reports.join("metrics.csv"), &report.to_csv())?;
    write(reports.join("records.csv"), &eval::records_to_csv(records))
}

/// Train and test splits described by the config.
pub fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.data.source {
        DataSource::Synthetic => Ok((
            data::generate(&cfg.synthetic_spec(false))?,
            data::generate(&cfg.synthetic_spec(true))?,
        )),
        DataSource::Folder => {
            let missing = |key: &str| DgdmError::config(key, "required for folder data");
            let train = data::load_folder(
                cfg.data
                    .root
                    .as_deref()
                    .ok_or_else(|| missing("data.root"))?,
            )?;
            let test = data::load_folder(
                cfg.data
                    .test_root
                    .as_deref()
                    .ok_or_else(|| missing("data.test_root"))?,
            )?;
            if train.class_names != test.class_names {
                return Err(DgdmError::InvalidArgument(
                    "train and test folders have different classes".into(),
                ));
            }
            Ok((train, test))
        }
    }
}

pub struct Trained {
    pub model: Model,
    pub log: TrainLog,
    pub records: Vec<LocalizationRecord>,
    pub report: MetricsReport,
}

/// Builds, trains and evaluates one model; writes nothing.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<Trained> {
    let spec = cfg.backbone_spec(train_set.num_classes());
    let mut model = build_model(&spec, &cfg.dgdm, cfg.seed)?;
    let log = train(&mut model, train_set, &cfg.train_config())?;
    let (records, report) = eval::evaluate(
        &model,
        test_set,
        cfg.eval.threshold_fraction,
        cfg.eval.batch_size,
    )?;
    Ok(Trained {
        model,
        log,
        records,
        report,
    })
}

pub struct TrainOutcome {
    pub run_dir: RunDir,
    pub trained: Trained,
}

/// Trains on the train split, evaluates on the test split and writes the
/// config snapshot, checkpoint, training log and reports.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (train_set, test_set) = load_splits(cfg)?;
    let run_dir = RunDir::create(&cfg.out_dir, cfg.seed)?;
    write(run_dir.config(), &cfg.to_resolved_string())?;
    let trained = train_and_evaluate(cfg, &train_set, &test_set)?;
    Checkpoint::from_model(
        &trained.model,
        &cfg.train_config(),
        cfg.seed,
        cfg.train.epochs,
    )
    .save(&run_dir.checkpoint())?;
    write(run_dir.logs().join("train_log.csv"), &trained.log.to_csv())?;
    write_reports(&run_dir, &trained.records, &trained.report)?;
    log::info!("run written to {}", run_dir.root.display());
    Ok(TrainOutcome { run_dir, trained })
}

fn load_checked(checkpoint: &Path, num_classes: usize) -> Result<Model> {
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.spec.num_classes != num_classes {
        return Err(DgdmError::Checkpoint(format!(
            "checkpoint has {} classes but the dataset has {num_classes}",
            ckpt.spec.num_classes
        )));
    }
    ckpt.into_model()
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub run_dir: RunDir,
    pub records: Vec<LocalizationRecord>,
    pub report: MetricsReport,
}

/// Evaluates a checkpoint on the test split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalOutcome> {
    cfg.validate()?;
    let test_set = match cfg.data.source {
        DataSource::Synthetic => data::generate(&cfg.synthetic_spec(true))?,
        DataSource::Folder => load_splits(cfg)?.1,
    };
    let model = load_checked(checkpoint, test_set.num_classes())?;
    let (records, report) = eval::evaluate(
        &model,
        &test_set,
        cfg.eval.threshold_fraction,
        cfg.eval.batch_size,
    )?;
    let run_dir = RunDir::create(&cfg.out_dir, cfg.seed)?;
    write(run_dir.config(), &cfg.to_resolved_string())?;
    write_reports(&run_dir, &records, &report)?;
    Ok(EvalOutcome {
        run_dir,
        records,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Block size of the erasing stage given by `dgdm.stage`.
    BlockSize,
    /// Channel threshold factor, run with the full module.
    Beta,
    Stage,
    /// All thirteen settings of the reference ablation table.
    Table1,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::BlockSize => "block_size",
            SweepAxis::Beta => "beta",
            SweepAxis::Stage => "stage",
            SweepAxis::Table1 => "table1",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = DgdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block_size" => Ok(SweepAxis::BlockSize),
            "beta" => Ok(SweepAxis::Beta),
            "stage" => Ok(SweepAxis::Stage),
            "table1" => Ok(SweepAxis::Table1),
            _ => Err(DgdmError::InvalidArgument(format!(
                "unknown sweep axis `{s}` (expected block_size, beta, stage or table1)"
            ))),
        }
    }
}

/// One ablation setting: the row label and the config it runs.
#[derive(Debug, Clone)]
pub struct Setting {
    pub stage: Stage,
    pub axis: &'static str,
    pub value: String,
    pub cfg: RunConfig,
}

fn block_setting(base: &RunConfig, stage: Stage, value: &str) -> Result<Setting> {
    let b: BlockSize = value
        .parse()
        .map_err(|reason: String| DgdmError::config("sagd.block_size", reason))?;
    let mut cfg = base.clone();
    cfg.dgdm.stage = stage;
    // Stage 1 sweeps the discriminative blocks; later stages sweep the
    // background blocks with the discriminative size held fixed.
    if stage == Stage::Stage1 {
        cfg.dgdm.sagd.block_size_high = b;
    } else {
        cfg.dgdm.sagd.block_size_low = b;
    }
    Ok(Setting {
        stage,
        axis: "block_size",
        value: b.to_string(),
        cfg,
    })
}

fn beta_setting(base: &RunConfig, value: &str) -> Result<Setting> {
    let beta: f64 = value
        .parse()
        .map_err(|_| DgdmError::config("cagd.beta", format!("cannot parse `{value}`")))?;
    let mut cfg = base.clone();
    cfg.dgdm.stage = Stage::Full;
    cfg.dgdm.use_cagd = true;
    cfg.dgdm.cagd.beta = beta;
    Ok(Setting {
        stage: Stage::Full,
        axis: "beta",
        value: value.to_string(),
        cfg,
    })
}

/// Expands a sweep into settings. `values` is ignored for `table1`.
pub fn ablation_settings(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
) -> Result<Vec<Setting>> {
    if axis != SweepAxis::Table1 && values.is_empty() {
        return Err(DgdmError::InvalidArgument(format!(
            "sweep over {} needs at least one value",
            axis.name()
        )));
    }
    let settings = match axis {
        SweepAxis::BlockSize => values
            .iter()
            .map(|v| block_setting(base, base.dgdm.stage, v))
            .collect::<Result<Vec<_>>>()?,
        SweepAxis::Beta => values
            .iter()
            .map(|v| beta_setting(base, v))
            .collect::<Result<_>>()?,
        SweepAxis::Stage => values
            .iter()
            .map(|v| {
                let stage: Stage = v
                    .parse()
                    .map_err(|reason: String| DgdmError::config("dgdm.stage", reason))?;
                let mut cfg = base.clone();
                cfg.dgdm.stage = stage;
                Ok(Setting {
                    stage,
                    axis: "stage",
                    value: stage.to_string(),
                    cfg,
                })
            })
            .collect::<Result<_>>()?,
        SweepAxis::Table1 => {
            let mut out = Vec::new();
            for v in ["1", "2", "3", "adaptive_7"] {
                out.push(block_setting(base, Stage::Stage1, v)?);
            }
            for v in ["1", "2", "3", "4", "adaptive_7"] {
                out.push(block_setting(base, Stage::Stage1And2, v)?);
            }
            for v in ["2", "2.5", "3", "3.5"] {
                out.push(beta_setting(base, v)?);
            }
            out
        }
    };
    for s in &settings {
        s.cfg.validate()?;
    }
    Ok(settings)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub stage: Stage,
    pub axis: &'static str,
    pub value: String,
    pub report: MetricsReport,
}

pub const ABLATION_HEADER: &str = "stage,axis,value,gt_loc,top1_clas,top1_loc";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.stage, r.axis, r.value, r.report.gt_loc, r.report.top1_clas, r.report.top1_loc
        )
        .expect("string write");
    }
    out
}

#[derive(Debug)]
pub struct AblateOutcome {
    pub run_dir: RunDir,
    pub rows: Vec<AblationRow>,
}

/// Trains and evaluates one model per setting, all from the same seed and
/// data, and writes `reports/ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig, axis: SweepAxis, values: &[String]) -> Result<AblateOutcome> {
    cfg.validate()?;
    let settings = ablation_settings(cfg, axis, values)?;
    let (train_set, test_set) = load_splits(cfg)?;
    let run_dir = RunDir::create(&cfg.out_dir, cfg.seed)?;
    write(run_dir.config(), &cfg.to_resolved_string())?;
    let mut rows = Vec::with_capacity(settings.len());
    for s in settings {
        log::info!("ablation {} {}={}", s.stage, s.axis, s.value);
        let trained = train_and_evaluate(&s.cfg, &train_set, &test_set)?;
        rows.push(AblationRow {
            stage: s.stage,
            axis: s.axis,
            value: s.value,
            report: trained.report,
        });
        write(run_dir.reports().join("ablation.csv"), &ablation_csv(&rows))?;
    }
    Ok(AblateOutcome { run_dir, rows })
}

#[derive(Debug)]
pub struct VizOutcome {
    pub run_dir: RunDir,
    pub written: Vec<PathBuf>,
    /// Images that could not be read.
    pub skipped: usize,
}

struct VizItem {
    id: String,
    image: ndarray::Array3<f64>,
    gt: Vec<eval::BBox>,
}

fn file_id(path: &Path, index: usize) -> String {
    path.file_stem().map_or_else(
        || format!("image{index:03}"),
        |s| s.to_string_lossy().into_owned(),
    )
}

/// Writes input, heatmap and overlay PNGs for the given image files, or for
/// the first `count` test samples when no files are given.
pub fn cmd_visualize(
    cfg: &RunConfig,
    checkpoint: &Path,
    images: &[PathBuf],
    count: usize,
) -> Result<VizOutcome> {
    cfg.validate()?;
    let model = Checkpoint::load(checkpoint)?.into_model()?;
    let mut skipped = 0;
    let items: Vec<VizItem> = if images.is_empty() {
        let test_set = match cfg.data.source {
            DataSource::Synthetic => data::generate(&cfg.synthetic_spec(true))?,
            DataSource::Folder => load_splits(cfg)?.1,
        };
        test_set
            .samples
            .into_iter()
            .take(count)
            .map(|s| VizItem {
                id: s.id,
                image: s.image,
                gt: s.boxes,
            })
            .collect()
    } else {
        let mut items = Vec::new();
        for (i, p) in images.iter().enumerate() {
            match data::read_png(p) {
                Ok(image) => items.push(VizItem {
                    id: file_id(p, i),
                    image,
                    gt: Vec::new(),
                }),
                Err(e) => {
                    log::warn!("skipping {}: {e}", p.display());
                    skipped += 1;
                }
            }
        }
        items
    };

    let run_dir = RunDir::create(&cfg.out_dir, cfg.seed)?;
    write(run_dir.config(), &cfg.to_resolved_string())?;
    let mut written = Vec::new();
    for item in items {
        let (c, h, w) = item.image.dim();
        let batch: Array4<f64> = item
            .image
            .clone()
            .into_shape_with_order((1, c, h, w))
            .expect("contiguous image");
        let fwd = model.predict(&batch)?;
        let pred = argmax_rows(&fwd.logits)[0];
        let heat = class_heatmap(&model, fwd.features.index_axis(Axis(0), 0), pred, h, w)?;
        let pred_box = heatmap_to_bbox(&heat, cfg.eval.threshold_fraction);
        if !item.gt.is_empty() {
            log::info!(
                "{}: class {pred}, IoU {:.3}",
                item.id,
                best_iou(&pred_box, &item.gt)
            );
        }
        written.extend(viz::write_visualization(
            &run_dir.viz(),
            &item.id,
            &item.image,
            &heat,
            &item.gt,
            Some(&pred_box),
        )?);
    }
    if skipped > 0 {
        log::warn!("{skipped} unreadable image(s) skipped");
    }
    Ok(VizOutcome {
        run_dir,
        written,
        skipped,
    })
}
