//! Confusion-matrix accumulation, per-class IoU and mIoU, and the
//! `eval.txt` report format.

use std::fs;
use std::path::Path;

use crate::data::{SampleSet, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::losses::{argmax_labels, batch_to_tensor, softmax_probs};
use crate::model::{forward_seg, Mode, TinySegConfig};
use crate::scalar::Scalar;
use crate::tensor::ParamSet;

/// Class-by-class pixel counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            ignored: 0,
        }
    }

    /// Adds one prediction/ground-truth pair; ignored ground-truth pixels
    /// are counted separately and skipped.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(
                "confusion accumulate",
                &[pred.len()],
                &[gt.len()],
            ));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE_LABEL {
                self.ignored += 1;
                continue;
            }
            if g as usize >= c {
                return Err(Error::Data(format!(
                    "ground-truth label {g} out of range for {c} classes"
                )));
            }
            if p as usize >= c {
                return Err(Error::Data(format!(
                    "prediction {p} out of range for {c} classes"
                )));
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    /// Sums another matrix into this one (accumulation is additive, so
    /// per-image matrices can be combined in any order).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape(
                "confusion merge",
                &[self.num_classes],
                &[other.num_classes],
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.ignored += other.ignored;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Per-class IoU (`None` for classes absent from both prediction and ground
/// truth) and their mean over present classes.
#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Intersection-over-union per class: TP / (TP + FP + FN). Classes with an
/// empty union are excluded from the mean.
pub fn iou(cm: &ConfusionMatrix) -> Result<IouReport> {
    if cm.total() == 0 {
        return Err(Error::EmptySet(
            "confusion matrix has no counted pixels".into(),
        ));
    }
    let c = cm.num_classes;
    let mut per_class = Vec::with_capacity(c);
    let mut sum = 0.0;
    let mut present = 0usize;
    for k in 0..c {
        let tp = cm.counts[k * c + k];
        let row: u64 = (0..c).map(|j| cm.counts[k * c + j]).sum();
        let col: u64 = (0..c).map(|i| cm.counts[i * c + k]).sum();
        let union = row + col - tp;
        if union == 0 {
            per_class.push(None);
        } else {
            let v = tp as f64 / union as f64;
            per_class.push(Some(v));
            sum += v;
            present += 1;
        }
    }
    Ok(IouReport {
        per_class,
        miou: sum / present as f64,
    })
}

/// Renders the report: one `classXX=` line per class (absent classes print
/// `nan`) and a final `miou=` line, all with six decimals.
pub fn format_report(report: &IouReport) -> String {
    let mut out = String::new();
    for (i, v) in report.per_class.iter().enumerate() {
        match v {
            Some(v) => out.push_str(&format!("class{i:02}={v:.6}\n")),
            None => out.push_str(&format!("class{i:02}=nan\n")),
        }
    }
    out.push_str(&format!("miou={:.6}\n", report.miou));
    out
}

pub fn write_report(path: &Path, report: &IouReport) -> Result<()> {
    fs::write(path, format_report(report))?;
    Ok(())
}

/// Parses text produced by [`format_report`].
pub fn parse_report(text: &str) -> Result<IouReport> {
    let mut per_class = Vec::new();
    let mut miou = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("report line without '=': {line}")))?;
        if key == "miou" {
            miou = Some(
                value
                    .parse()
                    .map_err(|_| Error::Data(format!("bad miou value {value}")))?,
            );
        } else if let Some(idx) = key.strip_prefix("class") {
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::Data(format!("bad class key {key}")))?;
            if idx != per_class.len() {
                return Err(Error::Data(format!("class lines out of order at {key}")));
            }
            if value == "nan" {
                per_class.push(None);
            } else {
                per_class.push(Some(
                    value
                        .parse()
                        .map_err(|_| Error::Data(format!("bad IoU value {value}")))?,
                ));
            }
        } else {
            return Err(Error::Data(format!("unknown report key {key}")));
        }
    }
    Ok(IouReport {
        per_class,
        miou: miou.ok_or_else(|| Error::Data("report is missing the miou line".into()))?,
    })
}

/// Runs a model over a labeled set in eval mode and scores argmax
/// predictions against the ground truth.
pub fn evaluate_set<S: Scalar>(
    params: &ParamSet<S>,
    mcfg: &TinySegConfig,
    set: &SampleSet,
) -> Result<(ConfusionMatrix, IouReport)> {
    let mut cm = ConfusionMatrix::new(mcfg.num_classes);
    for item in &set.items {
        let gt = item
            .label
            .as_deref()
            .ok_or_else(|| Error::Config(format!("evaluation item {} has no labels", item.id)))?;
        let x = batch_to_tensor::<S>(&[&item.image], item.size)?;
        let logits = forward_seg(params, mcfg, &x, Mode::Eval)?;
        let probs = softmax_probs(&logits)?;
        let hw = item.size * item.size;
        let pred = argmax_labels(&probs, 1, mcfg.num_classes, hw);
        cm.accumulate(&pred, gt)?;
    }
    let report = iou(&cm)?;
    Ok((cm, report))
}
