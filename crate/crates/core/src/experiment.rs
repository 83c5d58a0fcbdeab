//! Dataset preparation and end-to-end training runs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetSource, RunConfig};
use crate::data::{
    dataset_dir, fetch, gunzip, load_split, read_idx_images, read_idx_labels, ProcessedDataset, Split,
    SPLIT_FILES,
};
use crate::error::{Error, Result};
use crate::io::{write_atomic, RunLock};
use crate::model::QcnnModel;
use crate::quantum::{ee_report_with, entropy_method_by_name, EEReport};
use crate::train::{evaluate, lr_schedule, read_metrics_csv, train_epoch, MetricsRecord, OptimizerState};

/// Environment variable overriding the data directory.
pub const DATA_DIR_ENV: &str = "QCNN_DATA_DIR";

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const INITIAL_CHECKPOINT_FILE: &str = "checkpoint-initial.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";

pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedCounts {
    pub train: usize,
    pub test: usize,
}

/// Downloads (or reuses) the configured files, verifies them and writes
/// decompressed IDX files to `data/<dataset>/`.
pub fn prepare_dataset(data_root: &Path, dataset: &str, source: &DatasetSource) -> Result<PreparedCounts> {
    let dir = dataset_dir(data_root, dataset);
    for key in SPLIT_FILES {
        let target = dir.join(key);
        if validate_idx(&target, key).is_ok() {
            continue;
        }
        let remote = source
            .files
            .get(key)
            .ok_or_else(|| Error::config(format!("sources.{dataset}.files"), format!("missing `{key}`")))?;
        let url = format!("{}{}", source.base_url, remote.name);
        let gz = fetch(&url, &remote.md5, &dir.join("raw").join(&remote.name))?;
        let bytes = fs::read(&gz).map_err(|e| Error::io(&gz, e))?;
        let raw = gunzip(&bytes).map_err(|e| Error::Input(format!("{}: {e}", gz.display())))?;
        check_idx_bytes(&raw, key).map_err(|e| Error::Input(format!("{}: {e}", gz.display())))?;
        write_atomic(&target, &raw)?;
    }
    check_counts(&dir, dataset, source)
}

/// Copies IDX files from a local directory, accepting either the canonical
/// distribution names (optionally gzipped) or `{train,test}-{images,labels}`.
pub fn import_dataset(
    from: &Path,
    data_root: &Path,
    dataset: &str,
    source: &DatasetSource,
) -> Result<PreparedCounts> {
    let dir = dataset_dir(data_root, dataset);
    for key in SPLIT_FILES {
        let mut candidates = vec![key.to_string(), format!("{key}.gz")];
        if let Some(remote) = source.files.get(key) {
            candidates.push(remote.name.clone());
            if let Some(stem) = remote.name.strip_suffix(".gz") {
                candidates.push(stem.to_string());
            }
        }
        let found = candidates
            .iter()
            .map(|c| from.join(c))
            .find(|p| p.is_file())
            .ok_or_else(|| {
                Error::Input(format!(
                    "no file for `{key}` in {} (tried {})",
                    from.display(),
                    candidates.join(", ")
                ))
            })?;
        let bytes = fs::read(&found).map_err(|e| Error::io(&found, e))?;
        let raw = if bytes.starts_with(&[0x1f, 0x8b]) {
            gunzip(&bytes).map_err(|e| Error::Input(format!("{}: {e}", found.display())))?
        } else {
            bytes
        };
        check_idx_bytes(&raw, key).map_err(|e| Error::Input(format!("{}: {e}", found.display())))?;
        write_atomic(&dir.join(key), &raw)?;
    }
    check_counts(&dir, dataset, source)
}

fn check_idx_bytes(bytes: &[u8], key: &str) -> Result<usize> {
    if key.ends_with("images") {
        Ok(read_idx_images(bytes)?.count)
    } else {
        Ok(read_idx_labels(bytes)?.len())
    }
}

fn validate_idx(path: &Path, key: &str) -> Result<usize> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    check_idx_bytes(&bytes, key).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn check_counts(dir: &Path, dataset: &str, source: &DatasetSource) -> Result<PreparedCounts> {
    let mut counts = [0usize; 4];
    for (slot, key) in counts.iter_mut().zip(SPLIT_FILES) {
        *slot = validate_idx(&dir.join(key), key)?;
    }
    let [train_img, train_lbl, test_img, test_lbl] = counts;
    for (what, images, labels, expected) in [
        ("train", train_img, train_lbl, source.train_count),
        ("test", test_img, test_lbl, source.test_count),
    ] {
        if images != labels {
            return Err(Error::Input(format!(
                "{dataset} {what}: {images} images but {labels} labels in {}",
                dir.display()
            )));
        }
        if images != expected {
            return Err(Error::Input(format!(
                "{dataset} {what}: expected {expected} samples, found {images} in {}",
                dir.display()
            )));
        }
    }
    Ok(PreparedCounts {
        train: train_img,
        test: test_img,
    })
}

/// Train and test sets for a run, with the configured limits applied.
pub fn load_run_data(cfg: &RunConfig, data_root: &Path) -> Result<(ProcessedDataset, ProcessedDataset)> {
    let side = cfg.model.side;
    let mut train = load_split(data_root, &cfg.dataset, Split::Train, side, cfg.order)?;
    let mut test = load_split(data_root, &cfg.dataset, Split::Test, side, cfg.order)?;
    if let Some(limit) = cfg.train.train_limit {
        train = train.truncated(limit);
    }
    if let Some(limit) = cfg.train.test_limit {
        test = test.truncated(limit);
    }
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset: String,
    pub num_parameters: usize,
    pub epochs: usize,
    pub final_test_acc: f64,
    pub best_test_acc: f64,
    pub best_epoch: usize,
    pub final_ee_avg: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Continue from `checkpoint.json` in the output directory.
    pub resume: bool,
}

/// Eval-mode entropy report with the configured method.
pub fn measure_entropy(cfg: &RunConfig, model: &QcnnModel, epoch: Option<usize>) -> Result<EEReport> {
    let method = entropy_method_by_name(&cfg.entropy_method)?;
    ee_report_with(method.as_ref(), &model.export_augmented_tensors(), cfg.order, epoch)
}

/// Runs (or resumes) a training run in `cfg.out_dir()`, writing the metrics
/// CSV/JSONL, checkpoints and a summary. `log` receives progress lines.
pub fn run_training(
    cfg: &RunConfig,
    data_root: &Path,
    options: RunOptions,
    log: &mut dyn FnMut(&str),
) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let _lock = RunLock::acquire(&out)?;
    let (train_set, test_set) = load_run_data(cfg, data_root)?;
    let model_cfg = cfg.model_config()?;
    let num_classes = model_cfg.num_classes;
    let wants_ee = |epoch: usize| cfg.train.ee_period > 0 && epoch.is_multiple_of(cfg.train.ee_period);

    let (mut model, mut opt, mut records) = if options.resume {
        let ckpt = Checkpoint::load(&out.join(CHECKPOINT_FILE))?;
        if ckpt.model.config != model_cfg {
            return Err(Error::Checkpoint("model config differs from the checkpoint".into()));
        }
        let mut stored = ckpt.train.clone();
        stored.epochs = cfg.train.epochs;
        if stored != cfg.train {
            return Err(Error::Checkpoint("training config differs from the checkpoint".into()));
        }
        let csv_path = out.join(METRICS_CSV);
        let text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let records: Vec<MetricsRecord> = read_metrics_csv(&text)?
            .into_iter()
            .filter(|r| r.epoch <= ckpt.epochs_completed)
            .collect();
        if records.len() != ckpt.epochs_completed + 1 {
            return Err(Error::Checkpoint(format!(
                "{} holds {} rows up to epoch {}, expected {}",
                csv_path.display(),
                records.len(),
                ckpt.epochs_completed,
                ckpt.epochs_completed + 1
            )));
        }
        log(&format!("resuming after epoch {}", ckpt.epochs_completed));
        (ckpt.model, ckpt.optimizer, records)
    } else {
        let model = QcnnModel::init(&model_cfg, cfg.train.seed)?;
        let opt = OptimizerState::new(&model.param_shapes());
        let train_stats = evaluate(&model, &train_set)?;
        let test_stats = evaluate(&model, &test_set)?;
        let ee = if wants_ee(0) {
            Some(measure_entropy(cfg, &model, Some(0))?)
        } else {
            None
        };
        let record = MetricsRecord {
            epoch: 0,
            lr: lr_schedule(0, &cfg.train),
            train_cost: train_stats.cost,
            test_cost: test_stats.cost,
            train_acc: train_stats.accuracy,
            test_acc: test_stats.accuracy,
            ee_per_class: ee.as_ref().map(|r| r.per_class.clone()),
            ee_avg: ee.as_ref().map(|r| r.average),
        };
        write_atomic(&out.join(CONFIG_FILE), cfg.to_json()?.as_bytes())?;
        Checkpoint::new(model.clone(), opt.clone(), cfg.train.clone(), 0, None)
            .save(&out.join(INITIAL_CHECKPOINT_FILE))?;
        (model, opt, vec![record])
    };
    log(&progress_line(records.last().expect("at least one row")));
    write_metrics(&out, &records, num_classes)?;

    let start = records.len() - 1;
    for epoch in start..cfg.train.epochs {
        let train_stats = train_epoch(&mut model, &train_set, &mut opt, &cfg.train, epoch)?;
        let test_stats = evaluate(&model, &test_set)?;
        let ee = if wants_ee(epoch + 1) {
            Some(measure_entropy(cfg, &model, Some(epoch + 1))?)
        } else {
            None
        };
        let record = MetricsRecord {
            epoch: epoch + 1,
            lr: lr_schedule(epoch, &cfg.train),
            train_cost: train_stats.cost,
            test_cost: test_stats.cost,
            train_acc: train_stats.accuracy,
            test_acc: test_stats.accuracy,
            ee_per_class: ee.as_ref().map(|r| r.per_class.clone()),
            ee_avg: ee.as_ref().map(|r| r.average),
        };
        log(&progress_line(&record));
        records.push(record);
        write_metrics(&out, &records, num_classes)?;
        let best = best_row(&records).test_acc;
        Checkpoint::new(model.clone(), opt.clone(), cfg.train.clone(), epoch + 1, Some(best))
            .save(&out.join(CHECKPOINT_FILE))?;
    }
    if records.len() == 1 {
        Checkpoint::new(model.clone(), opt.clone(), cfg.train.clone(), 0, None).save(&out.join(CHECKPOINT_FILE))?;
    }

    let last = records.last().expect("at least one row");
    let best = best_row(&records);
    let summary = RunSummary {
        dataset: cfg.dataset.clone(),
        num_parameters: model.num_parameters(),
        epochs: last.epoch,
        final_test_acc: last.test_acc,
        best_test_acc: best.test_acc,
        best_epoch: best.epoch,
        final_ee_avg: last.ee_avg,
    };
    write_atomic(&out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(summary)
}

/// Highest test accuracy among trained epochs (the initial row only counts
/// when nothing was trained); earliest epoch wins ties.
fn best_row(records: &[MetricsRecord]) -> &MetricsRecord {
    let trained = if records.len() > 1 { &records[1..] } else { records };
    trained
        .iter()
        .fold(&trained[0], |best, r| if r.test_acc > best.test_acc { r } else { best })
}

fn progress_line(r: &MetricsRecord) -> String {
    let ee = r.ee_avg.map(|v| format!(" ee_avg {v:.4}")).unwrap_or_default();
    format!(
        "epoch {:>3}  lr {:.5}  train cost {:.5} acc {:.4}  test cost {:.5} acc {:.4}{ee}",
        r.epoch, r.lr, r.train_cost, r.train_acc, r.test_cost, r.test_acc
    )
}

fn write_metrics(out: &Path, records: &[MetricsRecord], num_classes: usize) -> Result<()> {
    let mut csv = MetricsRecord::csv_header(num_classes);
    csv.push('\n');
    let mut jsonl = String::new();
    for r in records {
        csv.push_str(&r.csv_row(num_classes));
        csv.push('\n');
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    write_atomic(&out.join(METRICS_CSV), csv.as_bytes())?;
    write_atomic(&out.join(METRICS_JSONL), jsonl.as_bytes())
}
