//! Evaluation and the CSV files the commands emit.
//!
//! Every CSV uses `,` separators, a fixed header and numbers printed with
//! Rust's shortest round-trip formatting, so files parse the same everywhere.
//!
//! * training log: `epoch,lr,` + loss fields + `ap11_<class>` per class
//! * AP table: `class,iou,recall_positions,ap`, closed by a `mean` row
//! * predictions: `scene,class,score,cx,cy,cz,w,l,h,yaw`
//! * temperature table: `temperature,` + `ap11_<class>`, `map11`,
//!   `ap40_<class>`, `map40`

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use pcd_core::boxes::{evaluate_ap, RecallPositions, SceneTruth, ScoredBox};
use pcd_core::detector::{predict, DetectorModel, EpochReport};
use pcd_core::losses::LossBreakdown;
use pcd_core::{Box3D, LabeledScene};

use crate::error::{Error, Result};
use crate::files::{atomic_write, read_text, Dataset};
use crate::textconfig::fmt_f;

/// Score floor applied before evaluation. Low-scoring detections only extend
/// the precision-recall curve, so keeping all of them never lowers AP.
pub const EVAL_SCORE_FLOOR: f64 = 0.0;

pub fn predict_all(model: &DetectorModel, scenes: &[LabeledScene], score_threshold: f64, nms_iou: f64) -> Result<Vec<ScoredBox>> {
    let per_scene: Vec<Vec<ScoredBox>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let d = predict(model, &s.cloud, score_threshold, nms_iou)?;
            Ok((0..d.len())
                .map(|k| ScoredBox {
                    scene: i,
                    class: d.classes[k],
                    score: d.scores[k],
                    bbox: d.boxes[k],
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

pub fn truths(scenes: &[LabeledScene]) -> Vec<SceneTruth> {
    scenes
        .iter()
        .map(|s| SceneTruth {
            boxes: s.boxes.clone(),
            classes: s.classes.clone(),
        })
        .collect()
}

/// Per-class AP; classes absent from the ground truth score `None`.
pub fn ap_per_class(
    preds: &[ScoredBox],
    scenes: &[LabeledScene],
    n_classes: usize,
    iou: &[f64],
    rp: RecallPositions,
) -> Vec<Option<f64>> {
    evaluate_ap(preds, &truths(scenes), n_classes, iou, rp)
}

/// Mean over classes that have ground truth; 0 when none do.
pub fn mean_ap(aps: &[Option<f64>]) -> f64 {
    let v: Vec<f64> = aps.iter().flatten().copied().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn model_ap(model: &DetectorModel, scenes: &[LabeledScene], iou: &[f64], rp: RecallPositions, nms_iou: f64) -> Result<Vec<Option<f64>>> {
    let preds = predict_all(model, scenes, EVAL_SCORE_FLOOR, nms_iou)?;
    Ok(ap_per_class(&preds, scenes, model.cfg.n_classes, iou, rp))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

pub fn training_log_header(class_names: &[String]) -> String {
    let mut cols = vec!["epoch".to_string(), "lr".to_string()];
    cols.extend(LossBreakdown::FIELDS.iter().map(|s| s.to_string()));
    cols.extend(class_names.iter().map(|c| format!("ap11_{c}")));
    cols.join(",")
}

pub fn training_log_row(report: &EpochReport, aps: &[Option<f64>]) -> String {
    let mut cols = vec![report.epoch.to_string(), fmt_f(report.lr)];
    cols.extend(report.loss.values().iter().map(|&v| fmt_f(v)));
    cols.extend(aps.iter().map(|&a| fmt_opt(a)));
    cols.join(",")
}

pub fn ap_table_csv(class_names: &[String], iou: &[f64], rp: RecallPositions, aps: &[Option<f64>]) -> String {
    let mut s = String::from("class,iou,recall_positions,ap\n");
    for (c, name) in class_names.iter().enumerate() {
        let thr = iou.get(c).or(iou.last()).copied().unwrap_or(0.5);
        s.push_str(&format!("{name},{},{},{}\n", fmt_f(thr), rp.count(), fmt_opt(aps.get(c).copied().flatten())));
    }
    s.push_str(&format!("mean,,{},{}\n", rp.count(), fmt_f(mean_ap(aps))));
    s
}

pub fn ap_table_pretty(class_names: &[String], rp: RecallPositions, aps: &[Option<f64>]) -> String {
    let mut s = format!("{:<12} AP@{}\n", "class", rp.count());
    for (name, a) in class_names.iter().zip(aps) {
        match a {
            Some(v) => s.push_str(&format!("{name:<12} {:>6.2}\n", 100.0 * v)),
            None => s.push_str(&format!("{name:<12} {:>6}\n", "n/a")),
        }
    }
    s.push_str(&format!("{:<12} {:>6.2}\n", "mean", 100.0 * mean_ap(aps)));
    s
}

/// One row per temperature: AP@11 and AP@40 per class with their means.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureRow {
    pub temperature: f64,
    pub ap11: Vec<Option<f64>>,
    pub ap40: Vec<Option<f64>>,
}

pub fn temperature_table_csv(class_names: &[String], rows: &[TemperatureRow]) -> String {
    let mut head = vec!["temperature".to_string()];
    head.extend(class_names.iter().map(|c| format!("ap11_{c}")));
    head.push("map11".into());
    head.extend(class_names.iter().map(|c| format!("ap40_{c}")));
    head.push("map40".into());
    let mut s = head.join(",") + "\n";
    for r in rows {
        let mut cols = vec![fmt_f(r.temperature)];
        cols.extend(r.ap11.iter().map(|&a| fmt_opt(a)));
        cols.push(fmt_f(mean_ap(&r.ap11)));
        cols.extend(r.ap40.iter().map(|&a| fmt_opt(a)));
        cols.push(fmt_f(mean_ap(&r.ap40)));
        s.push_str(&(cols.join(",") + "\n"));
    }
    s
}

pub const PREDICTIONS_HEADER: &str = "scene,class,score,cx,cy,cz,w,l,h,yaw";

pub fn predictions_csv(names: &[String], preds: &[ScoredBox]) -> String {
    let mut s = format!("{PREDICTIONS_HEADER}\n");
    for p in preds {
        let b = p.bbox.to_array();
        let nums: Vec<String> = std::iter::once(p.score).chain(b).map(fmt_f).collect();
        s.push_str(&format!("{},{},{}\n", names[p.scene], p.class, nums.join(",")));
    }
    s
}

pub fn write_predictions(path: &Path, names: &[String], preds: &[ScoredBox]) -> Result<()> {
    atomic_write(path, predictions_csv(names, preds).as_bytes())
}

/// Reads a predictions file against `data`; scene names must exist there.
pub fn read_predictions(path: &Path, data: &Dataset) -> Result<Vec<ScoredBox>> {
    let text = read_text(path)?;
    let index: BTreeMap<&str, usize> = data.names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::malformed(path, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>().join(",") != PREDICTIONS_HEADER {
        return Err(Error::malformed(path, format!("header must be `{PREDICTIONS_HEADER}`")));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::malformed(path, format!("line {line}: {e}")))?;
        let bad = |what: &str| Error::malformed(path, format!("line {line}: bad {what}"));
        let scene = *index.get(&rec[0]).ok_or_else(|| bad("scene name"))?;
        let class: u32 = rec[1].parse().map_err(|_| bad("class"))?;
        let nums: Vec<f64> = (2..10)
            .map(|k| rec[k].parse::<f64>().map_err(|_| bad("number")))
            .collect::<Result<_>>()?;
        let bbox = Box3D::new(nums[1], nums[2], nums[3], nums[4], nums[5], nums[6], nums[7]).map_err(|_| bad("box"))?;
        out.push(ScoredBox {
            scene,
            class,
            score: nums[0],
            bbox,
        });
    }
    Ok(out)
}
