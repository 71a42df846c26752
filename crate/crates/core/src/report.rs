//! History, metrics and confusion-matrix files, plus the run report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::CLASS_NAMES;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsRecord};
use crate::train::{EpochRecord, TrainConfig};

pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const RUN_REPORT_FILE: &str = "run_report.json";
pub const WEIGHTS_FILE: &str = "weights.tgw";

pub const HISTORY_HEADER: [&str; 9] = [
    "epoch",
    "train_loss",
    "val_loss",
    "train_acc",
    "val_acc",
    "train_precision",
    "val_precision",
    "train_recall",
    "val_recall",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ReportBundle {
    /// One row per trained epoch; also the loss/accuracy curve series.
    pub history: Vec<EpochRecord>,
    pub metrics: MetricsRecord,
    pub confusion: ConfusionMatrix,
}

impl ReportBundle {
    pub fn new(history: Vec<EpochRecord>, confusion: ConfusionMatrix) -> Self {
        Self {
            history,
            metrics: MetricsRecord::from_confusion(&confusion),
            confusion,
        }
    }
}

pub fn history_csv(history: &[EpochRecord]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(HISTORY_HEADER).expect("in-memory write");
    for r in history {
        let row = [
            r.train_loss,
            r.val_loss,
            r.train_accuracy,
            r.val_accuracy,
            r.train_precision,
            r.val_precision,
            r.train_recall,
            r.val_recall,
        ];
        let mut fields = vec![r.epoch.to_string()];
        fields.extend(row.iter().map(f64::to_string));
        w.write_record(&fields).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn confusion_csv(cm: &ConfusionMatrix) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(CLASS_NAMES.iter().map(|s| s.to_string()));
    w.write_record(&header).expect("in-memory write");
    for (name, row) in CLASS_NAMES.iter().zip(&cm.counts) {
        let mut fields = vec![name.to_string()];
        fields.extend(row.iter().map(u64::to_string));
        w.write_record(&fields).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("report types serialize");
    bytes.push(b'\n');
    bytes
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<PathBuf> {
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Write history, metrics and confusion files into `out_dir`, creating it.
pub fn emit_report(bundle: &ReportBundle, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    Ok(vec![
        write(out_dir.join(HISTORY_FILE), &history_csv(&bundle.history))?,
        write(out_dir.join(METRICS_FILE), &to_json(&bundle.metrics))?,
        write(out_dir.join(CONFUSION_FILE), &confusion_csv(&bundle.confusion))?,
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub manifest: String,
    pub total: usize,
    pub counts: BTreeMap<String, usize>,
    pub train: usize,
    pub val: usize,
    pub train_counts: BTreeMap<String, usize>,
    pub val_counts: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
}

pub fn class_counts(labels: impl IntoIterator<Item = usize>) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, usize> = CLASS_NAMES.iter().map(|c| (c.to_string(), 0)).collect();
    for l in labels {
        *counts.get_mut(CLASS_NAMES[l]).expect("known class") += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSummary {
    pub input_size: usize,
    pub total_params: u64,
    pub trainable_params: u64,
    pub non_trainable_params: u64,
    pub feature_cache: bool,
    pub initial_weights: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Preprocessing {
    pub resize: &'static str,
    pub normalization: &'static str,
    pub channels: &'static str,
    pub augmentation_mode: &'static str,
    pub class_order: [&'static str; 3],
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            resize: "bilinear, half-pixel sample centers",
            normalization: "v / (max / 2) - 1, range [-1, 1]",
            channels: "grayscale replicated to 3 channels",
            augmentation_mode: "on the fly, resampled every epoch, training set only",
            class_order: CLASS_NAMES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EarlyStopSummary {
    pub monitor: &'static str,
    pub patience: usize,
    pub min_delta: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub optimizer_steps: u64,
}

/// Everything needed to reproduce a training run. Contains no timestamps or
/// absolute output paths, so identical runs give identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub version: &'static str,
    pub config: TrainConfig,
    pub preprocessing: Preprocessing,
    pub dataset: DatasetSummary,
    pub model: ModelSummary,
    pub early_stopping: EarlyStopSummary,
    pub history: Vec<EpochRecord>,
    pub final_validation: MetricsRecord,
    pub final_confusion: ConfusionMatrix,
}
