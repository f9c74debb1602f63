//! The synthetic distillation benchmark: one teacher, then students trained
//! with and without the teacher's soft targets over several seeds.

use std::time::Instant;

use rayon::prelude::*;

use pcd_core::boxes::RecallPositions;
use pcd_core::data::generate_scene;
use pcd_core::detector::{class_mean_anchors, train, DetectorModel, Role};
use pcd_core::LabeledScene;

use crate::error::Result;
use crate::metrics::{mean_ap, model_ap};
use crate::textconfig::ExperimentConfig;

/// Validation scenes use seeds from here on, disjoint from training seeds.
pub const VAL_SEED_BASE: u64 = 1_000_000;

#[derive(Debug, Clone)]
pub struct KdBenchConfig {
    pub config: ExperimentConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub student_seeds: Vec<u64>,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
}

impl Default for KdBenchConfig {
    fn default() -> Self {
        Self {
            config: ExperimentConfig::toy(),
            n_train: 300,
            n_val: 100,
            student_seeds: vec![1, 2, 3],
            teacher_epochs: 20,
            student_epochs: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudentResult {
    pub seed: u64,
    pub kd: bool,
    pub ap11: Vec<Option<f64>>,
    pub map11: f64,
}

#[derive(Debug, Clone)]
pub struct KdBenchReport {
    pub teacher_ap11: Vec<Option<f64>>,
    pub students: Vec<StudentResult>,
    pub seconds: f64,
}

impl KdBenchReport {
    pub fn mean_map(&self, kd: bool) -> f64 {
        let v: Vec<f64> = self.students.iter().filter(|s| s.kd == kd).map(|s| s.map11).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Distilled minus label-only mean AP@11, in AP points (0-100 scale).
    pub fn margin_points(&self) -> f64 {
        100.0 * (self.mean_map(true) - self.mean_map(false))
    }
}

pub fn generate(cfg: &ExperimentConfig, seeds: impl IntoParallelIterator<Item = u64>) -> Result<Vec<LabeledScene>> {
    seeds
        .into_par_iter()
        .map(|s| generate_scene(&cfg.data, s).map_err(Into::into))
        .collect()
}

pub fn run_kd_bench(b: &KdBenchConfig) -> Result<KdBenchReport> {
    let t0 = Instant::now();
    let cfg = &b.config;
    cfg.validate()?;
    let train_set = generate(cfg, 0..b.n_train as u64)?;
    let val_set = generate(cfg, VAL_SEED_BASE..VAL_SEED_BASE + b.n_val as u64)?;
    let anchors = class_mean_anchors(&train_set, cfg.pipeline.n_classes);

    let mut teacher = DetectorModel::new(Role::Teacher, cfg.pipeline.clone(), anchors.clone(), cfg.pipeline.seed)?;
    let tc = pcd_core::TrainConfig {
        epochs: b.teacher_epochs,
        ..cfg.train.clone()
    };
    train(&mut teacher, None, &train_set, &tc, 0.0, 1.0, cfg.pipeline.seed, |_, _| Ok(true))?;
    let iou = &cfg.train.eval_iou;
    let teacher_ap11 = model_ap(&teacher, &val_set, iou, RecallPositions::R11, cfg.train.nms_iou)?;
    let frozen = teacher.frozen();

    let sc = pcd_core::TrainConfig {
        epochs: b.student_epochs,
        ..cfg.train.clone()
    };
    let jobs: Vec<(u64, bool)> = b.student_seeds.iter().flat_map(|&s| [(s, true), (s, false)]).collect();
    let students = jobs
        .par_iter()
        .map(|&(seed, kd)| -> Result<StudentResult> {
            let mut s = DetectorModel::new(Role::Student, cfg.pipeline.clone(), anchors.clone(), seed)?;
            s.stats = frozen.stats.clone();
            let ls = if kd { cfg.pipeline.lambda_soft } else { 0.0 };
            train(&mut s, Some(&frozen), &train_set, &sc, ls, cfg.pipeline.lambda_hard, seed, |_, _| Ok(true))?;
            let ap11 = model_ap(&s, &val_set, iou, RecallPositions::R11, cfg.train.nms_iou)?;
            Ok(StudentResult {
                seed,
                kd,
                map11: mean_ap(&ap11),
                ap11,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(KdBenchReport {
        teacher_ap11,
        students,
        seconds: t0.elapsed().as_secs_f64(),
    })
}
