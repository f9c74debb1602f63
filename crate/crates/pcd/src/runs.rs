//! Training runs behind `train-teacher` and `distill`.

use std::path::{Path, PathBuf};

use pcd_core::boxes::RecallPositions;
use pcd_core::detector::{class_mean_anchors, train, DetectorModel, EpochReport, Role};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::files::{atomic_write, create_dir, Dataset};
use crate::metrics::{model_ap, training_log_header, training_log_row};
use crate::textconfig::ExperimentConfig;

pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const METRICS_CSV: &str = "metrics.csv";

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: DetectorModel,
    pub reports: Vec<EpochReport>,
    /// Validation AP@11 per class after each epoch (empty without a
    /// validation set).
    pub val_ap11: Vec<Vec<Option<f64>>>,
    pub checkpoint: PathBuf,
}

/// Writes the metrics log and a checkpoint after every epoch; a failing step
/// leaves the previous epoch's files in place.
struct EpochSink<'a> {
    cfg: &'a ExperimentConfig,
    val: Option<&'a Dataset>,
    out: &'a Path,
    ckpt: PathBuf,
    log: String,
    val_ap11: Vec<Vec<Option<f64>>>,
}

impl<'a> EpochSink<'a> {
    fn new(cfg: &'a ExperimentConfig, val: Option<&'a Dataset>, out: &'a Path, ckpt_name: &str) -> Self {
        Self {
            cfg,
            val,
            out,
            ckpt: out.join(ckpt_name),
            log: training_log_header(&cfg.class_names()) + "\n",
            val_ap11: Vec::new(),
        }
    }

    fn epoch(&mut self, model: &DetectorModel, report: &EpochReport) -> Result<()> {
        let aps = match self.val {
            Some(v) => {
                let a = model_ap(model, &v.scenes, &self.cfg.train.eval_iou, RecallPositions::R11, self.cfg.train.nms_iou)?;
                self.val_ap11.push(a.clone());
                a
            }
            None => vec![None; self.cfg.pipeline.n_classes],
        };
        self.log.push_str(&training_log_row(report, &aps));
        self.log.push('\n');
        atomic_write(&self.out.join(METRICS_CSV), self.log.as_bytes())?;
        checkpoint::save(&self.ckpt, self.cfg, model)
    }
}

fn with_checkpoint_note(e: pcd_core::Error, ckpt: &Path) -> Error {
    match e {
        pcd_core::Error::NonFinite(_) => {
            eprintln!("training aborted on a non-finite value; last good checkpoint: {}", ckpt.display());
            Error::Core(e)
        }
        other => Error::Core(other),
    }
}

pub fn train_teacher(cfg: &ExperimentConfig, data: &Dataset, val: Option<&Dataset>, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    create_dir(out)?;
    let anchors = class_mean_anchors(&data.scenes, cfg.pipeline.n_classes);
    let mut model = DetectorModel::new(Role::Teacher, cfg.pipeline.clone(), anchors, cfg.pipeline.seed)?;
    let mut sink = EpochSink::new(cfg, val, out, TEACHER_CKPT);
    checkpoint::save(&sink.ckpt, cfg, &model)?;
    let mut sink_err = None;
    let reports = train(&mut model, None, &data.scenes, &cfg.train, 0.0, 1.0, cfg.pipeline.seed, |m, r| {
        match sink.epoch(m, r) {
            Ok(()) => Ok(true),
            Err(e) => {
                sink_err = Some(e);
                Ok(false)
            }
        }
    })
    .map_err(|e| with_checkpoint_note(e, &sink.ckpt))?;
    if let Some(e) = sink_err {
        return Err(e);
    }
    Ok(RunOutcome {
        model,
        reports,
        val_ap11: sink.val_ap11,
        checkpoint: sink.ckpt,
    })
}

/// Checks that teacher and student share the voxel grid and keypoint budget.
pub fn check_grid(teacher: &DetectorModel, cfg: &ExperimentConfig) -> Result<()> {
    let (t, s) = (&teacher.cfg, &cfg.pipeline);
    if t.voxel_size != s.voxel_size || t.n_keypoints != s.n_keypoints || t.n_classes != s.n_classes {
        return Err(Error::Check(format!(
            "teacher/student config grid mismatch: teacher voxel {:?}, {} keypoints, {} classes; student voxel {:?}, {} keypoints, {} classes",
            t.voxel_size, t.n_keypoints, t.n_classes, s.voxel_size, s.n_keypoints, s.n_classes
        )));
    }
    Ok(())
}

fn param_fingerprint(m: &DetectorModel) -> Vec<u64> {
    m.store
        .ids()
        .flat_map(|id| m.store.value(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .chain(m.stats.data.iter().map(|v| v.to_bits()))
        .collect()
}

/// Distills a student from a trained teacher. With `no_kd` the soft term is
/// switched off and the student learns from labels alone.
pub fn distill(
    cfg: &ExperimentConfig,
    teacher: &DetectorModel,
    data: &Dataset,
    val: Option<&Dataset>,
    out: &Path,
    no_kd: bool,
) -> Result<RunOutcome> {
    cfg.validate()?;
    check_grid(teacher, cfg)?;
    create_dir(out)?;
    let frozen = teacher.frozen();
    let before = param_fingerprint(&frozen);
    let mut student = DetectorModel::new(Role::Student, cfg.pipeline.clone(), teacher.anchors.clone(), cfg.pipeline.seed)?;
    student.stats = teacher.stats.clone();
    let lambda_soft = if no_kd { 0.0 } else { cfg.pipeline.lambda_soft };
    let mut sink = EpochSink::new(cfg, val, out, STUDENT_CKPT);
    checkpoint::save(&sink.ckpt, cfg, &student)?;
    let mut sink_err = None;
    let reports = train(
        &mut student,
        Some(&frozen),
        &data.scenes,
        &cfg.train,
        lambda_soft,
        cfg.pipeline.lambda_hard,
        cfg.pipeline.seed,
        |m, r| {
            if param_fingerprint(&frozen) != before || !frozen.store.is_frozen() {
                sink_err = Some(Error::Check("teacher changed during distillation".into()));
                return Ok(false);
            }
            match sink.epoch(m, r) {
                Ok(()) => Ok(true),
                Err(e) => {
                    sink_err = Some(e);
                    Ok(false)
                }
            }
        },
    )
    .map_err(|e| with_checkpoint_note(e, &sink.ckpt))?;
    if let Some(e) = sink_err {
        return Err(e);
    }
    Ok(RunOutcome {
        model: student,
        reports,
        val_ap11: sink.val_ap11,
        checkpoint: sink.ckpt,
    })
}
