//! Pipeline and training configuration.
//!
//! Both structs expose their fields as a flat list of `(key, Value)` pairs so
//! that the text format in the `pcd` crate does not need to know the field set.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};

/// A single configuration value.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(u64),
    Float(f64),
    Bool(bool),
    Ints(Vec<usize>),
    Floats(Vec<f64>),
    IntLists(Vec<Vec<usize>>),
}

impl Value {
    pub fn kind(&self) -> &'static str {
        match self {
            Value::Int(_) => "integer",
            Value::Float(_) => "float",
            Value::Bool(_) => "bool",
            Value::Ints(_) => "integer list",
            Value::Floats(_) => "float list",
            Value::IntLists(_) => "list of integer lists",
        }
    }
}

/// Network shape and loss weights shared by teacher and student.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub n_classes: usize,
    pub n_keypoints: usize,
    pub repo_msg_radii: Vec<f64>,
    pub repo_msg_k: Vec<usize>,
    pub repo_msg_channels: Vec<Vec<usize>>,
    pub repo_init_dim: usize,
    pub fg_hidden: usize,
    pub n_partial: usize,
    pub sfps_gamma: f64,
    pub partial_radius: f64,
    pub partial_k: usize,
    pub partial_mlp: Vec<usize>,
    pub teacher_partial_radii: Vec<f64>,
    pub teacher_partial_k: Vec<usize>,
    pub student_ed_channels: Vec<usize>,
    pub teacher_ed_channels: Vec<usize>,
    pub repo_feature_dim: usize,
    pub obj_radii: Vec<f64>,
    pub obj_k_student: usize,
    pub obj_k_teacher: usize,
    pub obj_mlp: Vec<usize>,
    pub stats_dim: usize,
    pub stats_momentum: f64,
    pub cls_hidden: usize,
    pub loc_hidden_teacher: usize,
    pub loc_hidden_student: usize,
    pub voxel_size: [f64; 3],
    pub temperature: f64,
    pub lambda_soft: f64,
    pub lambda_hard: f64,
    pub alpha_t: f64,
    pub gamma: f64,
    pub lambda_ind: f64,
    pub lambda_corner: f64,
    pub soft_center_weighted: bool,
    pub hard_center_weighted: bool,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_classes: 2,
            n_keypoints: 4096,
            repo_msg_radii: vec![0.2, 0.4, 0.8],
            repo_msg_k: vec![16, 16, 32],
            repo_msg_channels: vec![vec![16, 16, 32], vec![16, 16, 32], vec![32, 32, 64]],
            repo_init_dim: 64,
            fg_hidden: 64,
            n_partial: 512,
            sfps_gamma: 1.0,
            partial_radius: 1.6,
            partial_k: 32,
            partial_mlp: vec![128, 256, 512],
            teacher_partial_radii: vec![0.4, 0.8, 1.6],
            teacher_partial_k: vec![16, 16, 32],
            student_ed_channels: vec![64, 64, 128, 64, 64],
            teacher_ed_channels: vec![64, 128, 256, 128, 64],
            repo_feature_dim: 128,
            obj_radii: vec![0.8, 1.6, 3.2],
            obj_k_student: 16,
            obj_k_teacher: 32,
            obj_mlp: vec![128, 128],
            stats_dim: 256,
            stats_momentum: 0.99,
            cls_hidden: 128,
            loc_hidden_teacher: 256,
            loc_hidden_student: 128,
            voxel_size: [0.4, 0.4, 0.4],
            temperature: 3.0,
            lambda_soft: 0.7,
            lambda_hard: 0.3,
            alpha_t: 0.25,
            gamma: 2.0,
            lambda_ind: 1.0,
            lambda_corner: 1.0,
            soft_center_weighted: true,
            hard_center_weighted: false,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Narrow widths and small sample counts for tests and the desk-scale
    /// benchmark. Structure (scale counts, k ratios, loss weights) is unchanged.
    pub fn toy() -> Self {
        Self {
            n_keypoints: 384,
            repo_msg_radii: vec![0.4, 0.8, 1.6],
            repo_msg_k: vec![8, 8, 16],
            repo_msg_channels: vec![vec![8, 16], vec![8, 16], vec![16, 32]],
            repo_init_dim: 24,
            fg_hidden: 16,
            n_partial: 96,
            partial_radius: 2.4,
            partial_k: 16,
            partial_mlp: vec![32, 48],
            teacher_partial_radii: vec![0.6, 1.2, 2.4],
            teacher_partial_k: vec![8, 8, 16],
            student_ed_channels: vec![16, 16, 24, 16, 16],
            teacher_ed_channels: vec![16, 24, 40, 24, 16],
            repo_feature_dim: 32,
            obj_radii: vec![1.0, 2.0, 3.2],
            obj_k_student: 8,
            obj_k_teacher: 16,
            obj_mlp: vec![32],
            stats_dim: 32,
            cls_hidden: 24,
            loc_hidden_teacher: 48,
            loc_hidden_student: 24,
            voxel_size: [0.6, 0.6, 0.6],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_classes", self.n_classes),
            ("n_keypoints", self.n_keypoints),
            ("repo_init_dim", self.repo_init_dim),
            ("fg_hidden", self.fg_hidden),
            ("n_partial", self.n_partial),
            ("partial_k", self.partial_k),
            ("repo_feature_dim", self.repo_feature_dim),
            ("obj_k_student", self.obj_k_student),
            ("obj_k_teacher", self.obj_k_teacher),
            ("stats_dim", self.stats_dim),
            ("cls_hidden", self.cls_hidden),
            ("loc_hidden_teacher", self.loc_hidden_teacher),
            ("loc_hidden_student", self.loc_hidden_student),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid(alloc::format!("{name} must be at least 1")));
            }
        }
        check_scales("repo_msg", &self.repo_msg_radii, &self.repo_msg_k)?;
        if self.repo_msg_channels.len() != self.repo_msg_radii.len() {
            return Err(invalid("repo_msg_channels needs one width list per radius"));
        }
        check_widths("repo_msg_channels", self.repo_msg_channels.iter().flatten())?;
        if self.repo_msg_channels.iter().any(Vec::is_empty) {
            return Err(invalid("repo_msg_channels entries must be non-empty"));
        }
        check_scales("teacher_partial", &self.teacher_partial_radii, &self.teacher_partial_k)?;
        if self.teacher_partial_radii.len() < 2 {
            return Err(invalid("teacher needs at least two partial-knowledge scales"));
        }
        if !(self.partial_radius > 0.0) {
            return Err(invalid("partial_radius must be positive"));
        }
        for (name, w) in [
            ("partial_mlp", &self.partial_mlp),
            ("obj_mlp", &self.obj_mlp),
        ] {
            if w.is_empty() {
                return Err(invalid(alloc::format!("{name} must be non-empty")));
            }
            check_widths(name, w.iter())?;
        }
        for (name, ch) in [
            ("student_ed_channels", &self.student_ed_channels),
            ("teacher_ed_channels", &self.teacher_ed_channels),
        ] {
            check_widths(name, ch.iter())?;
            if ch.len() != 5 || ch[0] != ch[4] || ch[1] != ch[3] {
                return Err(invalid(alloc::format!(
                    "{name} must be five widths [c0,c1,c2,c1,c0] so the shortcuts line up, got {ch:?}"
                )));
            }
        }
        let obj_k = vec![1; self.obj_radii.len()];
        check_scales("obj", &self.obj_radii, &obj_k)?;
        if self.voxel_size.iter().any(|&v| !(v > 0.0)) {
            return Err(invalid("voxel_size entries must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.stats_momentum) {
            return Err(invalid("stats_momentum must lie in [0,1]"));
        }
        for (name, v) in [
            ("lambda_soft", self.lambda_soft),
            ("lambda_hard", self.lambda_hard),
            ("lambda_ind", self.lambda_ind),
            ("lambda_corner", self.lambda_corner),
            ("gamma", self.gamma),
            ("sfps_gamma", self.sfps_gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid(alloc::format!("{name} must be a non-negative number")));
            }
        }
        if !(self.alpha_t > 0.0 && self.alpha_t < 1.0) {
            return Err(invalid("alpha_t must lie in (0,1)"));
        }
        Ok(())
    }

    pub fn fields(&self) -> Vec<(&'static str, Value)> {
        use Value::*;
        vec![
            ("n_classes", Int(self.n_classes as u64)),
            ("n_keypoints", Int(self.n_keypoints as u64)),
            ("repo_msg_radii", Floats(self.repo_msg_radii.clone())),
            ("repo_msg_k", Ints(self.repo_msg_k.clone())),
            ("repo_msg_channels", IntLists(self.repo_msg_channels.clone())),
            ("repo_init_dim", Int(self.repo_init_dim as u64)),
            ("fg_hidden", Int(self.fg_hidden as u64)),
            ("n_partial", Int(self.n_partial as u64)),
            ("sfps_gamma", Float(self.sfps_gamma)),
            ("partial_radius", Float(self.partial_radius)),
            ("partial_k", Int(self.partial_k as u64)),
            ("partial_mlp", Ints(self.partial_mlp.clone())),
            ("teacher_partial_radii", Floats(self.teacher_partial_radii.clone())),
            ("teacher_partial_k", Ints(self.teacher_partial_k.clone())),
            ("student_ed_channels", Ints(self.student_ed_channels.clone())),
            ("teacher_ed_channels", Ints(self.teacher_ed_channels.clone())),
            ("repo_feature_dim", Int(self.repo_feature_dim as u64)),
            ("obj_radii", Floats(self.obj_radii.clone())),
            ("obj_k_student", Int(self.obj_k_student as u64)),
            ("obj_k_teacher", Int(self.obj_k_teacher as u64)),
            ("obj_mlp", Ints(self.obj_mlp.clone())),
            ("stats_dim", Int(self.stats_dim as u64)),
            ("stats_momentum", Float(self.stats_momentum)),
            ("cls_hidden", Int(self.cls_hidden as u64)),
            ("loc_hidden_teacher", Int(self.loc_hidden_teacher as u64)),
            ("loc_hidden_student", Int(self.loc_hidden_student as u64)),
            ("voxel_size", Floats(self.voxel_size.to_vec())),
            ("temperature", Float(self.temperature)),
            ("lambda_soft", Float(self.lambda_soft)),
            ("lambda_hard", Float(self.lambda_hard)),
            ("alpha_t", Float(self.alpha_t)),
            ("gamma", Float(self.gamma)),
            ("lambda_ind", Float(self.lambda_ind)),
            ("lambda_corner", Float(self.lambda_corner)),
            ("soft_center_weighted", Bool(self.soft_center_weighted)),
            ("hard_center_weighted", Bool(self.hard_center_weighted)),
            ("seed", Int(self.seed)),
        ]
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        match key {
            "n_classes" => self.n_classes = as_usize(key, value)?,
            "n_keypoints" => self.n_keypoints = as_usize(key, value)?,
            "repo_msg_radii" => self.repo_msg_radii = as_floats(key, value)?,
            "repo_msg_k" => self.repo_msg_k = as_ints(key, value)?,
            "repo_msg_channels" => self.repo_msg_channels = as_int_lists(key, value)?,
            "repo_init_dim" => self.repo_init_dim = as_usize(key, value)?,
            "fg_hidden" => self.fg_hidden = as_usize(key, value)?,
            "n_partial" => self.n_partial = as_usize(key, value)?,
            "sfps_gamma" => self.sfps_gamma = as_float(key, value)?,
            "partial_radius" => self.partial_radius = as_float(key, value)?,
            "partial_k" => self.partial_k = as_usize(key, value)?,
            "partial_mlp" => self.partial_mlp = as_ints(key, value)?,
            "teacher_partial_radii" => self.teacher_partial_radii = as_floats(key, value)?,
            "teacher_partial_k" => self.teacher_partial_k = as_ints(key, value)?,
            "student_ed_channels" => self.student_ed_channels = as_ints(key, value)?,
            "teacher_ed_channels" => self.teacher_ed_channels = as_ints(key, value)?,
            "repo_feature_dim" => self.repo_feature_dim = as_usize(key, value)?,
            "obj_radii" => self.obj_radii = as_floats(key, value)?,
            "obj_k_student" => self.obj_k_student = as_usize(key, value)?,
            "obj_k_teacher" => self.obj_k_teacher = as_usize(key, value)?,
            "obj_mlp" => self.obj_mlp = as_ints(key, value)?,
            "stats_dim" => self.stats_dim = as_usize(key, value)?,
            "stats_momentum" => self.stats_momentum = as_float(key, value)?,
            "cls_hidden" => self.cls_hidden = as_usize(key, value)?,
            "loc_hidden_teacher" => self.loc_hidden_teacher = as_usize(key, value)?,
            "loc_hidden_student" => self.loc_hidden_student = as_usize(key, value)?,
            "voxel_size" => {
                let v = as_floats(key, value)?;
                if v.len() != 3 {
                    return Err(invalid("voxel_size needs exactly three values"));
                }
                self.voxel_size = [v[0], v[1], v[2]];
            }
            "temperature" => self.temperature = as_float(key, value)?,
            "lambda_soft" => self.lambda_soft = as_float(key, value)?,
            "lambda_hard" => self.lambda_hard = as_float(key, value)?,
            "alpha_t" => self.alpha_t = as_float(key, value)?,
            "gamma" => self.gamma = as_float(key, value)?,
            "lambda_ind" => self.lambda_ind = as_float(key, value)?,
            "lambda_corner" => self.lambda_corner = as_float(key, value)?,
            "soft_center_weighted" => self.soft_center_weighted = as_bool(key, value)?,
            "hard_center_weighted" => self.hard_center_weighted = as_bool(key, value)?,
            "seed" => self.seed = as_u64(key, value)?,
            _ => return Err(Error::UnknownParam(key.into())),
        }
        Ok(())
    }
}

/// Optimizer, schedule and evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_frac: f64,
    pub grad_clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: bool,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// AP matching threshold per class id.
    pub eval_iou: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_frac: 0.1,
            grad_clip: 10.0,
            epochs: 100,
            batch_size: 16,
            augment: true,
            score_threshold: 0.3,
            nms_iou: 0.1,
            eval_iou: vec![0.7, 0.5],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(invalid("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("adam betas must lie in [0,1)"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(invalid("warmup_frac must lie in [0,1)"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch_size must be at least 1"));
        }
        if self.eval_iou.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(invalid("eval_iou thresholds must lie in (0,1]"));
        }
        Ok(())
    }

    pub fn fields(&self) -> Vec<(&'static str, Value)> {
        use Value::*;
        vec![
            ("lr", Float(self.lr)),
            ("beta1", Float(self.beta1)),
            ("beta2", Float(self.beta2)),
            ("adam_eps", Float(self.adam_eps)),
            ("warmup_frac", Float(self.warmup_frac)),
            ("grad_clip", Float(self.grad_clip)),
            ("epochs", Int(self.epochs as u64)),
            ("batch_size", Int(self.batch_size as u64)),
            ("augment", Bool(self.augment)),
            ("score_threshold", Float(self.score_threshold)),
            ("nms_iou", Float(self.nms_iou)),
            ("eval_iou", Floats(self.eval_iou.clone())),
        ]
    }

    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        match key {
            "lr" => self.lr = as_float(key, value)?,
            "beta1" => self.beta1 = as_float(key, value)?,
            "beta2" => self.beta2 = as_float(key, value)?,
            "adam_eps" => self.adam_eps = as_float(key, value)?,
            "warmup_frac" => self.warmup_frac = as_float(key, value)?,
            "grad_clip" => self.grad_clip = as_float(key, value)?,
            "epochs" => self.epochs = as_usize(key, value)?,
            "batch_size" => self.batch_size = as_usize(key, value)?,
            "augment" => self.augment = as_bool(key, value)?,
            "score_threshold" => self.score_threshold = as_float(key, value)?,
            "nms_iou" => self.nms_iou = as_float(key, value)?,
            "eval_iou" => self.eval_iou = as_floats(key, value)?,
            _ => return Err(Error::UnknownParam(key.into())),
        }
        Ok(())
    }
}

fn check_scales(name: &str, radii: &[f64], ks: &[usize]) -> Result<()> {
    if radii.is_empty() {
        return Err(invalid(alloc::format!("{name} needs at least one scale")));
    }
    if radii.len() != ks.len() {
        return Err(invalid(alloc::format!("{name} radii and k lists differ in length")));
    }
    if radii.iter().any(|&r| !(r > 0.0)) || ks.iter().any(|&k| k == 0) {
        return Err(invalid(alloc::format!("{name} radii and k must be positive")));
    }
    if radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid(alloc::format!("{name} radii must be strictly increasing")));
    }
    Ok(())
}

fn check_widths<'a>(name: &str, mut widths: impl Iterator<Item = &'a usize>) -> Result<()> {
    if widths.any(|&w| w == 0) {
        return Err(invalid(alloc::format!("{name} widths must be at least 1")));
    }
    Ok(())
}

fn mismatch(key: &str, expected: &str, got: &Value) -> Error {
    invalid(alloc::format!("{key}: expected {expected}, got {}", got.kind()))
}

fn as_u64(key: &str, v: Value) -> Result<u64> {
    match v {
        Value::Int(i) => Ok(i),
        other => Err(mismatch(key, "integer", &other)),
    }
}

fn as_usize(key: &str, v: Value) -> Result<usize> {
    as_u64(key, v).map(|i| i as usize)
}

fn as_float(key: &str, v: Value) -> Result<f64> {
    match v {
        Value::Float(f) => Ok(f),
        Value::Int(i) => Ok(i as f64),
        other => Err(mismatch(key, "float", &other)),
    }
}

fn as_bool(key: &str, v: Value) -> Result<bool> {
    match v {
        Value::Bool(b) => Ok(b),
        other => Err(mismatch(key, "bool", &other)),
    }
}

fn as_ints(key: &str, v: Value) -> Result<Vec<usize>> {
    match v {
        Value::Ints(i) => Ok(i),
        Value::Int(i) => Ok(vec![i as usize]),
        other => Err(mismatch(key, "integer list", &other)),
    }
}

fn as_floats(key: &str, v: Value) -> Result<Vec<f64>> {
    match v {
        Value::Floats(f) => Ok(f),
        Value::Float(f) => Ok(vec![f]),
        Value::Ints(i) => Ok(i.into_iter().map(|x| x as f64).collect()),
        other => Err(mismatch(key, "float list", &other)),
    }
}

fn as_int_lists(key: &str, v: Value) -> Result<Vec<Vec<usize>>> {
    match v {
        Value::IntLists(l) => Ok(l),
        Value::Ints(i) => Ok(vec![i]),
        other => Err(mismatch(key, "list of integer lists", &other)),
    }
}

/// Names of every key in [`PipelineConfig::fields`].
pub fn pipeline_keys() -> Vec<String> {
    PipelineConfig::default().fields().into_iter().map(|(k, _)| k.into()).collect()
}
