//! Teacher and student detectors and their training steps.
//!
//! Both roles share one architecture and differ in configuration:
//!
//! 1. FPS picks keypoints from the raw cloud; multi-scale PointNet grouping
//!    gives each keypoint an initial feature; keypoints are averaged into
//!    voxels to form the repository; a small head predicts a foreground
//!    confidence per voxel.
//! 2. Score-weighted FPS picks partial points among the voxel means. The
//!    student groups their neighborhoods with one ball query, the teacher with
//!    several. An auxiliary classifier reads these features.
//! 3. The partial features are scattered onto the voxel grid, passed through
//!    the sparse encoder-decoder and fused into the repository.
//! 4. Every partial point votes for an object center; object features are
//!    pooled from the fused repository around the vote at several radii.
//! 5. Classification modulates the object feature with per-class statistics;
//!    localization predicts residuals to the vote and to class-mean sizes.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::autodiff::{one_cycle_lr, AdamConfig, Graph, Linear, Mlp, ParamStore, Tensor, Var};
use crate::boxes::nms_bev;
use crate::config::{PipelineConfig, TrainConfig};
use crate::data::augment;
use crate::error::{invalid, Error, Result};
use crate::losses::{
    bce_with_logits, cross_entropy_with_background, hybrid_op, loc_terms, soft_focal, temp_sigmoid_op, vote_loss,
    LossBreakdown,
};
use crate::repository::{align, fuse_repository, scatter_knowledge, voxelize_mean, EncoderDecoder, Fusion};
use crate::rng::SeededRng;
use crate::sampling::{aggregate_groups, ball_query, fps, sfps, Coord, NeighborGroup, QueryCounter};
use crate::types::{box_membership, Box3D, LabeledScene, PointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Role::Teacher),
            "student" => Ok(Role::Student),
            _ => Err(invalid(format!("unknown role `{s}`"))),
        }
    }
}

/// Per-class feature statistics, `n_classes x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    pub n_classes: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl ClassStats {
    pub fn filled(n_classes: usize, dim: usize, v: f64) -> Self {
        Self {
            n_classes,
            dim,
            data: vec![v; n_classes * dim],
        }
    }

    pub fn from_rows(n_classes: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_classes * dim {
            return Err(invalid(format!(
                "class statistics need {} values, got {}",
                n_classes * dim,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("class statistics"));
        }
        Ok(Self { n_classes, dim, data })
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.dim..(c + 1) * self.dim]
    }

    /// Moving average toward the batch mean of each class's rows of
    /// `features`; classes absent from the batch keep their row.
    pub fn update(&mut self, features: &Tensor, classes: &[Option<usize>], momentum: f64) {
        let d = self.dim;
        let mut sums = vec![0.0; self.n_classes * d];
        let mut counts = vec![0usize; self.n_classes];
        for (r, c) in classes.iter().enumerate() {
            if let Some(c) = *c {
                for (s, &v) in sums[c * d..(c + 1) * d].iter_mut().zip(features.row_slice(r)) {
                    *s += v;
                }
                counts[c] += 1;
            }
        }
        for c in 0..self.n_classes {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            for j in 0..d {
                let cur = &mut self.data[c * d + j];
                *cur = momentum * *cur + (1.0 - momentum) * sums[c * d + j] * inv;
            }
        }
    }
}

/// Localization head. The teacher variant generates a per-class scale and
/// shift of its hidden layer from the class statistics; the student variant
/// is a plain two-layer head.
#[derive(Debug, Clone)]
pub enum LocHead {
    Film {
        hidden: Linear,
        gamma: Linear,
        beta: Linear,
        out: Linear,
    },
    Plain {
        hidden: Linear,
        out: Linear,
    },
}

impl LocHead {
    pub fn num_params(&self) -> usize {
        match self {
            LocHead::Film {
                hidden,
                gamma,
                beta,
                out,
            } => hidden.num_params() + gamma.num_params() + beta.num_params() + out.num_params(),
            LocHead::Plain { hidden, out } => hidden.num_params() + out.num_params(),
        }
    }
}

/// Discrete choices made during a forward pass. Replaying a plan freezes
/// sampling and grouping so the network becomes a smooth function of its
/// parameters (used by gradient checks and to align teacher and student).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Plan {
    pub keypoints: Option<Vec<usize>>,
    pub repo_groups: Option<Vec<Vec<NeighborGroup>>>,
    pub partial: Option<Vec<usize>>,
    pub partial_groups: Option<Vec<Vec<NeighborGroup>>>,
    pub object_groups: Option<Vec<Vec<NeighborGroup>>>,
    pub decode_class: Option<Vec<usize>>,
}

impl Plan {
    /// A plan that only fixes the partial points.
    pub fn with_partial(partial: Vec<usize>) -> Self {
        Self {
            partial: Some(partial),
            ..Self::default()
        }
    }
}

/// Ball queries performed in one forward pass, per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueryCounts {
    pub repo_init: u64,
    pub partial: u64,
    pub object: u64,
}

/// Graph handles and bookkeeping of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub voxel_means: Vec<Coord>,
    pub repo_width: usize,
    pub fused_width: usize,
    /// Foreground logits per voxel, `[K, 1]`.
    pub fg_logits: Var,
    /// Repository rows chosen as partial points.
    pub partial: Vec<usize>,
    pub partial_coords: Vec<Coord>,
    pub partial_features: Var,
    pub aux_logits: Var,
    /// `[P, 3]`
    pub votes: Var,
    pub object_features: Var,
    pub cls_logits: Var,
    /// Decoded boxes `[P, 7]` as `cx, cy, cz, w, l, h, yaw`.
    pub boxes: Var,
    pub decode_class: Vec<usize>,
    pub queries: QueryCounts,
    /// Set when the cloud had fewer points than keypoints requested.
    pub keypoints_repeated: bool,
    pub plan: Plan,
}

/// A detector of either role with its parameters, class statistics and
/// class-mean size anchors (`w, l, h`).
#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub role: Role,
    pub cfg: PipelineConfig,
    pub store: ParamStore,
    pub stats: ClassStats,
    pub anchors: Vec<[f64; 3]>,
    repo_msg: Vec<Mlp>,
    repo_proj: Linear,
    fg_head: Mlp,
    partial_mlps: Vec<Mlp>,
    aux_head: Linear,
    ed: EncoderDecoder,
    fusion: Fusion,
    vote: Linear,
    obj_mlps: Vec<Mlp>,
    obj_proj: Linear,
    cls_head: Mlp,
    loc_head: LocHead,
}

/// Everything a training step needs to know about one scene.
struct Labels<'a> {
    scene: &'a LabeledScene,
}

impl Labels<'_> {
    fn box_of(&self, p: &Coord) -> Option<usize> {
        box_membership(&self.scene.boxes, *p)
    }

    fn class_of(&self, p: &Coord) -> Option<usize> {
        self.box_of(p).map(|b| self.scene.classes[b] as usize)
    }
}

impl DetectorModel {
    pub fn new(role: Role, cfg: PipelineConfig, anchors: Vec<[f64; 3]>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if anchors.len() != cfg.n_classes {
            return Err(invalid(format!(
                "{} anchors for {} classes",
                anchors.len(),
                cfg.n_classes
            )));
        }
        if anchors.iter().flatten().any(|v| !(*v > 0.0)) {
            return Err(invalid("anchor sizes must be positive"));
        }
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let c = &cfg;

        let mut repo_msg = Vec::new();
        for (i, widths) in c.repo_msg_channels.iter().enumerate() {
            repo_msg.push(Mlp::new(s, &format!("repo_msg.{i}"), 4, widths, true, &mut rng)?);
        }
        let msg_width: usize = repo_msg.iter().map(Mlp::out_width).sum();
        let repo_proj = Linear::new(s, "repo_proj", msg_width, c.repo_init_dim, &mut rng)?;
        let fg_head = Mlp::new(s, "fg_head", c.repo_init_dim, &[c.fg_hidden, 1], false, &mut rng)?;

        let scales = match role {
            Role::Student => 1,
            Role::Teacher => c.teacher_partial_radii.len(),
        };
        let mut partial_mlps = Vec::new();
        for i in 0..scales {
            partial_mlps.push(Mlp::new(
                s,
                &format!("partial.{i}"),
                3 + c.repo_init_dim,
                &c.partial_mlp,
                true,
                &mut rng,
            )?);
        }
        let partial_width: usize = partial_mlps.iter().map(Mlp::out_width).sum();
        let aux_head = Linear::new(s, "aux_head", partial_width, c.n_classes, &mut rng)?;

        let ed_channels = match role {
            Role::Student => &c.student_ed_channels,
            Role::Teacher => &c.teacher_ed_channels,
        };
        let ed = EncoderDecoder::new(s, "ed", partial_width, ed_channels, &mut rng)?;
        let fusion = Fusion::new(s, "fusion", ed.out_width(), c.repo_init_dim, c.repo_feature_dim, &mut rng)?;
        let vote = Linear::zeros(s, "vote", partial_width, 3)?;

        let mut obj_mlps = Vec::new();
        for i in 0..c.obj_radii.len() {
            obj_mlps.push(Mlp::new(
                s,
                &format!("obj.{i}"),
                3 + c.repo_feature_dim,
                &c.obj_mlp,
                true,
                &mut rng,
            )?);
        }
        let obj_width: usize = obj_mlps.iter().map(Mlp::out_width).sum();
        let obj_proj = Linear::new(s, "obj_proj", obj_width, c.stats_dim, &mut rng)?;
        let cls_head = Mlp::new(s, "cls_head", c.stats_dim, &[c.cls_hidden, 1], false, &mut rng)?;

        let loc_head = match role {
            Role::Teacher => {
                let h = c.loc_hidden_teacher;
                LocHead::Film {
                    hidden: Linear::new(s, "loc.hidden", c.stats_dim, h, &mut rng)?,
                    gamma: Linear::zeros(s, "loc.gamma", c.stats_dim, h)?,
                    beta: Linear::zeros(s, "loc.beta", c.stats_dim, h)?,
                    out: Linear::scaled(s, "loc.out", h, 8, 0.01, &mut rng)?,
                }
            }
            Role::Student => {
                let h = c.loc_hidden_student;
                LocHead::Plain {
                    hidden: Linear::new(s, "loc.hidden", c.stats_dim, h, &mut rng)?,
                    out: Linear::scaled(s, "loc.out", h, 8, 0.01, &mut rng)?,
                }
            }
        };
        // cos(yaw) output starts at one so the initial heading is near zero
        let out_b = match &loc_head {
            LocHead::Film { out, .. } | LocHead::Plain { out, .. } => out.b,
        };
        store.value_mut(out_b).data_mut()[7] = 1.0;

        let stats = ClassStats::filled(cfg.n_classes, cfg.stats_dim, 1.0);
        Ok(Self {
            role,
            cfg,
            store,
            stats,
            anchors,
            repo_msg,
            repo_proj,
            fg_head,
            partial_mlps,
            aux_head,
            ed,
            fusion,
            vote,
            obj_mlps,
            obj_proj,
            cls_head,
            loc_head,
        })
    }

    /// Exact number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn loc_head_params(&self) -> usize {
        self.loc_head.num_params()
    }

    pub fn partial_scales(&self) -> usize {
        self.partial_mlps.len()
    }

    pub fn partial_width(&self) -> usize {
        self.partial_mlps.iter().map(Mlp::out_width).sum()
    }

    fn partial_radii_k(&self) -> (Vec<f64>, Vec<usize>) {
        match self.role {
            Role::Student => (vec![self.cfg.partial_radius], vec![self.cfg.partial_k]),
            Role::Teacher => (self.cfg.teacher_partial_radii.clone(), self.cfg.teacher_partial_k.clone()),
        }
    }

    pub fn object_k(&self) -> usize {
        match self.role {
            Role::Student => self.cfg.obj_k_student,
            Role::Teacher => self.cfg.obj_k_teacher,
        }
    }

    /// Full forward pass on one cloud. `labels` (when given) selects the
    /// ground-truth class for decoding boxes of foreground partial points;
    /// otherwise the predicted class is used. Parts of `replay` that are set
    /// override the corresponding discrete choices.
    pub fn forward(
        &self,
        g: &mut Graph,
        cloud: &PointCloud,
        scene: Option<&LabeledScene>,
        replay: Option<&Plan>,
    ) -> Result<Forward> {
        let labels = scene.map(|s| Labels { scene: s });
        let empty = Plan::default();
        let replay = replay.unwrap_or(&empty);
        let mut plan = Plan::default();
        let cfg = &self.cfg;
        let st = &self.store;
        let coords = cloud.coords();
        let n = coords.len();
        let mut queries = QueryCounts::default();

        // keypoints
        let mut repeated = false;
        let keypoints = match &replay.keypoints {
            Some(k) => k.clone(),
            None => {
                let m = cfg.n_keypoints.min(n);
                let mut k = fps(&coords, m, 0)?;
                if k.len() < cfg.n_keypoints {
                    repeated = true;
                    let base = k.clone();
                    while k.len() < cfg.n_keypoints {
                        k.push(base[k.len() % base.len()]);
                    }
                }
                k
            }
        };
        let kp_coords: Vec<Coord> = keypoints.iter().map(|&i| coords[i]).collect();
        let refl: Vec<f64> = cloud.points().iter().map(|p| p.r).collect();
        let refl = g.constant(Tensor::column(refl));

        // repository initialization
        let repo_groups = match &replay.repo_groups {
            Some(gr) => gr.clone(),
            None => {
                let counter = QueryCounter::new();
                let mut all = Vec::new();
                for (&r, &k) in cfg.repo_msg_radii.iter().zip(&cfg.repo_msg_k) {
                    all.push(ball_query(&kp_coords, &coords, r, k, &counter)?);
                }
                all
            }
        };
        queries.repo_init = (repo_groups.len() * kp_coords.len()) as u64;
        let mut parts = Vec::new();
        for (groups, mlp) in repo_groups.iter().zip(&self.repo_msg) {
            parts.push(aggregate_groups(g, st, mlp, groups, &coords, Some(refl))?);
        }
        let msg = g.concat(&parts)?;
        let init = self.repo_proj.forward(g, st, msg)?;
        let init = g.relu(init);
        let repo = voxelize_mean(g, &kp_coords, init, cfg.voxel_size)?;
        let fg_logits = self.fg_head.forward(g, st, repo.features)?;
        let s_r = g.sigmoid(fg_logits);
        let scores: Vec<f64> = g.value(s_r).data().to_vec();

        // partial knowledge
        let partial = match &replay.partial {
            Some(p) => p.clone(),
            None => sfps(&repo.means, &scores, cfg.n_partial.min(repo.len()), cfg.sfps_gamma, 0)?,
        };
        if let Some(bad) = partial.iter().find(|&&i| i >= repo.len()) {
            return Err(invalid(format!("partial row {bad} outside a repository of {}", repo.len())));
        }
        let partial_coords: Vec<Coord> = partial.iter().map(|&i| repo.means[i]).collect();
        let (radii, ks) = self.partial_radii_k();
        let partial_groups = match &replay.partial_groups {
            Some(gr) => gr.clone(),
            None => {
                let counter = QueryCounter::new();
                let mut all = Vec::new();
                for (&r, &k) in radii.iter().zip(&ks) {
                    all.push(ball_query(&partial_coords, &repo.means, r, k, &counter)?);
                }
                all
            }
        };
        queries.partial = (partial_groups.len() * partial_coords.len()) as u64;
        let mut parts = Vec::new();
        for (groups, mlp) in partial_groups.iter().zip(&self.partial_mlps) {
            parts.push(aggregate_groups(g, st, mlp, groups, &repo.means, Some(repo.features))?);
        }
        let partial_features = if parts.len() == 1 { parts[0] } else { g.concat(&parts)? };
        let aux_logits = self.aux_head.forward(g, st, partial_features)?;

        // repository update
        let knowledge = scatter_knowledge(g, &partial_coords, partial_features, &repo)?;
        let scene_feats = self.ed.forward(g, st, &knowledge)?;
        let scene_feats = align(g, scene_feats, &knowledge.support, &repo.support)?;
        let fused = fuse_repository(g, st, &self.fusion, &repo, scene_feats, s_r)?;

        // voting and object features
        let offsets = self.vote.forward(g, st, partial_features)?;
        let base = g.constant(Tensor::matrix(
            partial_coords.len(),
            3,
            partial_coords.iter().flatten().copied().collect(),
        )?);
        let votes = g.add(base, offsets)?;
        let vote_vals: Vec<Coord> = g.value(votes).data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let object_groups = match &replay.object_groups {
            Some(gr) => gr.clone(),
            None => {
                let counter = QueryCounter::new();
                let mut all = Vec::new();
                for &r in &cfg.obj_radii {
                    all.push(ball_query(&vote_vals, &fused.means, r, self.object_k(), &counter)?);
                }
                all
            }
        };
        queries.object = (object_groups.len() * vote_vals.len()) as u64;
        let mut parts = Vec::new();
        for (groups, mlp) in object_groups.iter().zip(&self.obj_mlps) {
            parts.push(aggregate_groups(g, st, mlp, groups, &fused.means, Some(fused.features))?);
        }
        let obj = g.concat(&parts)?;
        let obj = self.obj_proj.forward(g, st, obj)?;
        let object_features = g.relu(obj);

        let cls_logits = classify_with_stats(g, st, &self.cls_head, object_features, &self.stats)?;

        // decode class: ground truth for labelled foreground, prediction otherwise
        let decode_class = match &replay.decode_class {
            Some(d) => d.clone(),
            None => {
                let logits = g.value(cls_logits);
                (0..partial_coords.len())
                    .map(|r| {
                        labels
                            .as_ref()
                            .and_then(|l| l.class_of(&partial_coords[r]))
                            .unwrap_or_else(|| argmax(logits.row_slice(r)))
                    })
                    .collect()
            }
        };
        let raw = self.loc_forward(g, object_features, &decode_class)?;
        let boxes = self.decode(g, raw, votes, &decode_class)?;

        plan.keypoints = Some(keypoints);
        plan.repo_groups = Some(repo_groups);
        plan.partial = Some(partial.clone());
        plan.partial_groups = Some(partial_groups);
        plan.object_groups = Some(object_groups);
        plan.decode_class = Some(decode_class.clone());

        Ok(Forward {
            voxel_means: repo.means.clone(),
            repo_width: cfg.repo_init_dim,
            fused_width: g.shape(fused.features)[1],
            fg_logits,
            partial,
            partial_coords,
            partial_features,
            aux_logits,
            votes,
            object_features,
            cls_logits,
            boxes,
            decode_class,
            queries,
            keypoints_repeated: repeated,
            plan,
        })
    }

    /// Raw localization outputs `[P, 8]` for the given per-row classes.
    fn loc_forward(&self, g: &mut Graph, f: Var, classes: &[usize]) -> Result<Var> {
        let st = &self.store;
        match &self.loc_head {
            LocHead::Plain { hidden, out } => {
                let h = hidden.forward(g, st, f)?;
                let h = g.relu(h);
                out.forward(g, st, h)
            }
            LocHead::Film {
                hidden,
                gamma,
                beta,
                out,
            } => {
                let h = hidden.forward(g, st, f)?;
                let mut acc: Option<Var> = None;
                for c in 0..self.cfg.n_classes {
                    if !classes.contains(&c) {
                        continue;
                    }
                    let s = g.constant(Tensor::row(self.stats.row(c).to_vec()));
                    let gm = gamma.forward(g, st, s)?;
                    let gm = g.add_scalar(gm, 1.0);
                    let bt = beta.forward(g, st, s)?;
                    let hc = g.mul_row(h, gm)?;
                    let hc = g.add_row(hc, bt)?;
                    let hc = g.relu(hc);
                    let oc = out.forward(g, st, hc)?;
                    let mask: Vec<f64> = classes.iter().map(|&k| if k == c { 1.0 } else { 0.0 }).collect();
                    let mask = g.constant(Tensor::column(mask));
                    let oc = g.mul_col(oc, mask)?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, oc)?,
                        None => oc,
                    });
                }
                match acc {
                    Some(a) => Ok(a),
                    None => Ok(g.constant(Tensor::zeros(&[classes.len(), 8]))),
                }
            }
        }
    }

    /// Boxes from raw outputs: center = reference + offset, size = anchor ·
    /// exp(log ratio), heading = atan2(sin, cos).
    pub fn decode(&self, g: &mut Graph, raw: Var, reference: Var, classes: &[usize]) -> Result<Var> {
        let n = classes.len();
        let off = g.slice_cols(raw, 0, 3)?;
        let center = g.add(reference, off)?;
        let logs = g.slice_cols(raw, 3, 6)?;
        let ratio = g.exp(logs);
        let anchors: Vec<f64> = classes.iter().flat_map(|&c| self.anchors[c]).collect();
        let anchors = g.constant(Tensor::matrix(n, 3, anchors)?);
        let dims = g.mul(ratio, anchors)?;
        let s = g.slice_cols(raw, 6, 7)?;
        let c = g.slice_cols(raw, 7, 8)?;
        let yaw = g.atan2(s, c)?;
        g.concat(&[center, dims, yaw])
    }

    /// Inverse of [`DetectorModel::decode`] for a box, a reference center and
    /// a class.
    pub fn encode(&self, b: &Box3D, reference: Coord, class: usize) -> [f64; 8] {
        let a = self.anchors[class];
        [
            b.cx - reference[0],
            b.cy - reference[1],
            b.cz - reference[2],
            (b.w / a[0]).ln(),
            (b.l / a[1]).ln(),
            (b.h / a[2]).ln(),
            b.yaw.sin(),
            b.yaw.cos(),
        ]
    }

    /// Decodes one raw output row without a graph.
    pub fn decode_row(&self, raw: &[f64], reference: Coord, class: usize) -> Result<Box3D> {
        let a = self.anchors[class];
        Box3D::new(
            reference[0] + raw[0],
            reference[1] + raw[1],
            reference[2] + raw[2],
            a[0] * raw[3].exp(),
            a[1] * raw[4].exp(),
            a[2] * raw[5].exp(),
            raw[6].atan2(raw[7]),
        )
    }

    /// A frozen copy (used as the distillation teacher).
    pub fn frozen(&self) -> Self {
        let mut t = self.clone();
        t.store.freeze();
        t
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Per-class scores `[n, C]`: the shared head applied to the object feature
/// modulated elementwise by each class's statistics row.
pub fn classify_with_stats(g: &mut Graph, store: &ParamStore, head: &Mlp, f: Var, stats: &ClassStats) -> Result<Var> {
    let width = g.shape(f)[1];
    if width != stats.dim {
        return Err(Error::WidthMismatch {
            expected: stats.dim,
            found: width,
        });
    }
    let mut cols = Vec::with_capacity(stats.n_classes);
    for c in 0..stats.n_classes {
        let row = g.constant(Tensor::row(stats.row(c).to_vec()));
        let m = g.mul_row(f, row)?;
        cols.push(head.forward(g, store, m)?);
    }
    if cols.len() == 1 {
        Ok(cols[0])
    } else {
        g.concat(&cols)
    }
}

/// Class-mean box sizes over a set of scenes; classes never seen fall back
/// to the overall mean, or to unit size without any boxes.
pub fn class_mean_anchors(scenes: &[LabeledScene], n_classes: usize) -> Vec<[f64; 3]> {
    let mut sums = vec![[0.0; 3]; n_classes];
    let mut counts = vec![0usize; n_classes];
    let mut all = [0.0; 3];
    let mut total = 0usize;
    for s in scenes {
        for (b, &c) in s.boxes.iter().zip(&s.classes) {
            let c = c as usize;
            if c >= n_classes {
                continue;
            }
            for (k, v) in [b.w, b.l, b.h].into_iter().enumerate() {
                sums[c][k] += v;
                all[k] += v;
            }
            counts[c] += 1;
            total += 1;
        }
    }
    (0..n_classes)
        .map(|c| {
            if counts[c] > 0 {
                sums[c].map(|v| v / counts[c] as f64)
            } else if total > 0 {
                all.map(|v| v / total as f64)
            } else {
                [1.0; 3]
            }
        })
        .collect()
}

/// Per-scene supervision derived from labels and forward structure.
#[derive(Debug, Clone)]
pub struct Targets {
    pub voxel_fg: Vec<f64>,
    /// Class per partial point, `n_classes` for background.
    pub partial_label: Vec<usize>,
    /// Ground-truth box per partial point.
    pub partial_box: Vec<Option<usize>>,
}

impl Targets {
    pub fn new(fw: &Forward, scene: &LabeledScene, n_classes: usize) -> Self {
        let l = Labels { scene };
        let voxel_fg = fw
            .voxel_means
            .iter()
            .map(|p| if l.box_of(p).is_some() { 1.0 } else { 0.0 })
            .collect();
        let partial_box: Vec<Option<usize>> = fw.partial_coords.iter().map(|p| l.box_of(p)).collect();
        let partial_label = partial_box
            .iter()
            .map(|b| b.map_or(n_classes, |b| scene.classes[b] as usize))
            .collect();
        Self {
            voxel_fg,
            partial_label,
            partial_box,
        }
    }

    pub fn foreground_rows(&self) -> Vec<usize> {
        (0..self.partial_box.len()).filter(|&r| self.partial_box[r].is_some()).collect()
    }
}

/// Teacher outputs used as soft targets, detached from any graph.
#[derive(Debug, Clone)]
pub struct SoftTargets {
    pub partial: Vec<usize>,
    pub cls_logits: Tensor,
    pub aux_logits: Tensor,
    pub boxes: Tensor,
}

/// Teacher forward pass over `scene` with its partial points fixed to
/// `partial`. Errors if the teacher could receive gradients.
pub fn teacher_targets(teacher: &DetectorModel, scene: &LabeledScene, partial: &[usize]) -> Result<SoftTargets> {
    if !teacher.store.is_frozen() {
        return Err(Error::UnfrozenTeacher);
    }
    let mut g = Graph::new();
    let fw = teacher.forward(&mut g, &scene.cloud, Some(scene), Some(&Plan::with_partial(partial.to_vec())))?;
    if g.has_trainable_params() {
        return Err(Error::UnfrozenTeacher);
    }
    Ok(SoftTargets {
        partial: fw.partial.clone(),
        cls_logits: g.value(fw.cls_logits).clone(),
        aux_logits: g.value(fw.aux_logits).clone(),
        boxes: g.value(fw.boxes).clone(),
    })
}

fn rows_of(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let c = t.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(t.row_slice(r));
    }
    Tensor::matrix(rows.len(), c, data)
}

/// Graph handles of the loss terms of one scene.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub soft: Var,
    pub hard: Var,
}

/// Builds the hybrid loss of one scene on `g` from a forward pass, its
/// targets and optional teacher outputs. With no teacher the soft part is
/// zero.
pub fn scene_loss(
    g: &mut Graph,
    cfg: &PipelineConfig,
    fw: &Forward,
    targets: &Targets,
    scene: &LabeledScene,
    soft: Option<&SoftTargets>,
    lambda_soft: f64,
    lambda_hard: f64,
) -> Result<(LossVars, LossBreakdown)> {
    let mut bd = LossBreakdown::default();
    let c = cfg.n_classes;
    let fg_rows = targets.foreground_rows();
    bd.n_foreground = fg_rows.len();
    bd.no_foreground = fg_rows.is_empty();
    let fg_idx: Vec<Option<usize>> = fg_rows.iter().map(|&r| Some(r)).collect();
    let fg_boxes = g.gather_rows(fw.boxes, fg_idx.clone())?;

    // hard terms
    let hard_cls = cross_entropy_with_background(g, fw.cls_logits, &targets.partial_label)?;
    let hard_aux = cross_entropy_with_background(g, fw.aux_logits, &targets.partial_label)?;
    let foreground = bce_with_logits(g, fw.fg_logits, &targets.voxel_fg)?;
    let gt_rows: Vec<f64> = fg_rows
        .iter()
        .flat_map(|&r| scene.boxes[targets.partial_box[r].unwrap_or(0)].to_array())
        .collect();
    let gt = Tensor::matrix(fg_rows.len(), 7, gt_rows)?;
    let gt_centers = Tensor::matrix(
        fg_rows.len(),
        3,
        fg_rows
            .iter()
            .flat_map(|&r| scene.boxes[targets.partial_box[r].unwrap_or(0)].center())
            .collect(),
    )?;
    let fg_votes = g.gather_rows(fw.votes, fg_idx)?;
    let vote = vote_loss(g, fg_votes, &gt_centers)?;
    let mut hard_parts = vec![hard_cls, hard_aux, foreground, vote];
    if let Some(t) = loc_terms(g, fg_boxes, &gt, cfg.hard_center_weighted)? {
        bd.hard_loc_iou = g.value(t.iou).item();
        bd.hard_loc_ind = g.value(t.ind).item();
        bd.hard_loc_corner = g.value(t.corner).item();
        hard_parts.push(t.combine(g, cfg.lambda_ind, cfg.lambda_corner)?);
    }
    let hard = sum_vars(g, &hard_parts)?;
    bd.hard_cls = g.value(hard_cls).item();
    bd.hard_aux = g.value(hard_aux).item();
    bd.foreground = g.value(foreground).item();
    bd.vote = g.value(vote).item();
    bd.hard = g.value(hard).item();

    // soft terms
    let soft_var = match soft {
        Some(t) if lambda_soft > 0.0 => {
            if t.partial != fw.partial {
                return Err(invalid("teacher and student partial points differ"));
            }
            let n = fw.partial.len();
            let mut mask = vec![0.0; n * c];
            for (r, &l) in targets.partial_label.iter().enumerate() {
                if l < c {
                    mask[r * c + l] = 1.0;
                }
            }
            let mask = Tensor::matrix(n, c, mask)?;
            let temp = cfg.temperature;
            let soft_of = |logits: &Tensor| -> Result<Tensor> {
                let v = logits
                    .data()
                    .iter()
                    .map(|&x| crate::losses::temp_sigmoid(x, temp))
                    .collect::<Result<Vec<f64>>>()?;
                Tensor::new(logits.shape().to_vec(), v)
            };
            let p_cls = temp_sigmoid_op(g, fw.cls_logits, temp)?;
            let soft_cls = soft_focal(g, &soft_of(&t.cls_logits)?, p_cls, &mask, cfg.alpha_t, cfg.gamma)?;
            let p_aux = temp_sigmoid_op(g, fw.aux_logits, temp)?;
            let soft_aux = soft_focal(g, &soft_of(&t.aux_logits)?, p_aux, &mask, cfg.alpha_t, cfg.gamma)?;
            let mut parts = vec![soft_cls, soft_aux];
            let teacher_boxes = rows_of(&t.boxes, &fg_rows)?;
            if let Some(lt) = loc_terms(g, fg_boxes, &teacher_boxes, cfg.soft_center_weighted)? {
                bd.soft_loc_iou = g.value(lt.iou).item();
                bd.soft_loc_ind = g.value(lt.ind).item();
                bd.soft_loc_corner = g.value(lt.corner).item();
                parts.push(lt.combine(g, cfg.lambda_ind, cfg.lambda_corner)?);
            }
            bd.soft_cls = g.value(soft_cls).item();
            bd.soft_aux = g.value(soft_aux).item();
            sum_vars(g, &parts)?
        }
        _ => g.constant(Tensor::scalar(0.0)),
    };
    bd.soft = g.value(soft_var).item();
    let total = hybrid_op(g, soft_var, hard, lambda_soft, lambda_hard)?;
    bd.total = g.value(total).item();
    Ok((
        LossVars {
            total,
            soft: soft_var,
            hard,
        },
        bd,
    ))
}

fn sum_vars(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p)?;
    }
    Ok(acc)
}

/// Loss weights and learning rate of one optimization step.
#[derive(Debug, Clone, Copy)]
pub struct StepConfig {
    pub lambda_soft: f64,
    pub lambda_hard: f64,
    pub adam: AdamConfig,
    pub grad_clip: f64,
}

/// One optimization step of `model` on a batch. With a teacher the hybrid
/// loss uses its soft targets; the teacher is only read. A teacher-role model
/// trained without a teacher also refreshes its class statistics.
pub fn train_step(
    model: &mut DetectorModel,
    teacher: Option<&DetectorModel>,
    batch: &[LabeledScene],
    step: &StepConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    if let Some(t) = teacher {
        if !t.store.is_frozen() {
            return Err(Error::UnfrozenTeacher);
        }
        if t.cfg.voxel_size != model.cfg.voxel_size || t.cfg.n_keypoints != model.cfg.n_keypoints {
            return Err(invalid("teacher and student use different repository grids"));
        }
    }
    model.store.zero_grad();
    let mut total = LossBreakdown::default();
    for scene in batch {
        let mut g = Graph::new();
        let fw = model.forward(&mut g, &scene.cloud, Some(scene), None)?;
        let targets = Targets::new(&fw, scene, model.cfg.n_classes);
        let soft = match teacher {
            Some(t) if step.lambda_soft > 0.0 => Some(teacher_targets(t, scene, &fw.partial)?),
            _ => None,
        };
        let (vars, bd) = scene_loss(
            &mut g,
            &model.cfg,
            &fw,
            &targets,
            scene,
            soft.as_ref(),
            step.lambda_soft,
            step.lambda_hard,
        )?;
        if !bd.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        g.backward(vars.total)?;
        model.store.absorb(&g);
        if teacher.is_none() && model.role == Role::Teacher {
            let fg: Vec<Option<usize>> = targets
                .partial_label
                .iter()
                .map(|&l| (l < model.cfg.n_classes).then_some(l))
                .collect();
            let feats = g.value(fw.object_features).clone();
            let m = model.cfg.stats_momentum;
            model.stats.update(&feats, &fg, m);
        }
        total.accumulate(&bd);
    }
    model.store.scale_grads(1.0 / batch.len() as f64);
    if !model.store.grads_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    model.store.clip_grad_norm(step.grad_clip);
    model.store.adam_step(step.adam);
    Ok(total.scaled(1.0 / batch.len() as f64))
}

/// Distillation step: hybrid loss against a frozen teacher, one Adam step on
/// the student.
pub fn distill_step(
    teacher: &DetectorModel,
    student: &mut DetectorModel,
    batch: &[LabeledScene],
    step: &StepConfig,
) -> Result<LossBreakdown> {
    train_step(student, Some(teacher), batch, step)
}

/// Result of one epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochReport {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

/// Full training loop. Each epoch shuffles the scenes, optionally augments
/// them, and takes one step per batch with a one-cycle learning rate.
/// `on_epoch` may stop training early by returning `false`.
pub fn train(
    model: &mut DetectorModel,
    teacher: Option<&DetectorModel>,
    scenes: &[LabeledScene],
    tc: &TrainConfig,
    lambda_soft: f64,
    lambda_hard: f64,
    seed: u64,
    mut on_epoch: impl FnMut(&DetectorModel, &EpochReport) -> Result<bool>,
) -> Result<Vec<EpochReport>> {
    tc.validate()?;
    if scenes.is_empty() {
        return Err(invalid("no training scenes"));
    }
    let rng_root = SeededRng::new(seed);
    let batches_per_epoch = scenes.len().div_ceil(tc.batch_size);
    let total_steps = tc.epochs * batches_per_epoch;
    let mut step_idx = 0;
    let mut reports = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let mut rng = rng_root.child(epoch as u64);
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        rng.shuffle(&mut order);
        let mut acc = LossBreakdown::default();
        let mut lr = tc.lr;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<LabeledScene> = chunk
                .iter()
                .map(|&i| {
                    if tc.augment {
                        augment(&scenes[i], &mut rng)
                    } else {
                        Ok(scenes[i].clone())
                    }
                })
                .collect::<Result<_>>()?;
            lr = one_cycle_lr(step_idx, total_steps, tc.lr, tc.warmup_frac);
            let sc = StepConfig {
                lambda_soft,
                lambda_hard,
                adam: AdamConfig {
                    lr,
                    beta1: tc.beta1,
                    beta2: tc.beta2,
                    eps: tc.adam_eps,
                },
                grad_clip: tc.grad_clip,
            };
            let bd = train_step(model, teacher, &batch, &sc)?;
            acc.accumulate(&bd.scaled(chunk.len() as f64));
            step_idx += 1;
        }
        let report = EpochReport {
            epoch,
            loss: acc.scaled(1.0 / scenes.len() as f64),
            lr,
        };
        reports.push(report);
        if !on_epoch(model, &report)? {
            break;
        }
    }
    Ok(reports)
}

/// Final detections of one cloud.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Detections {
    pub boxes: Vec<Box3D>,
    pub classes: Vec<u32>,
    /// Softmax probability of the chosen class (background included in the
    /// normalization).
    pub scores: Vec<f64>,
    pub class_scores: Vec<Vec<f64>>,
    /// Partial-point row that produced each detection.
    pub source: Vec<usize>,
}

impl Detections {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Inference: forward pass, score threshold, BEV non-maximum suppression.
pub fn predict(model: &DetectorModel, cloud: &PointCloud, score_threshold: f64, nms_iou: f64) -> Result<Detections> {
    let mut g = Graph::new();
    let fw = model.forward(&mut g, cloud, None, None)?;
    let logits = g.value(fw.cls_logits);
    let boxes = g.value(fw.boxes);
    let c = model.cfg.n_classes;
    let mut cand = Detections::default();
    for r in 0..fw.partial.len() {
        let row = logits.row_slice(r);
        let m = row.iter().copied().fold(0.0f64, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum::<f64>() + (-m).exp();
        let probs: Vec<f64> = row.iter().map(|v| (v - m).exp() / z).collect();
        let k = fw.decode_class[r];
        let score = probs[k];
        if score < score_threshold {
            continue;
        }
        let b = boxes.row_slice(r);
        let bx = match Box3D::new(b[0], b[1], b[2], b[3], b[4], b[5], b[6]) {
            Ok(bx) => bx,
            Err(_) => continue,
        };
        cand.boxes.push(bx);
        cand.classes.push(k as u32);
        cand.scores.push(score);
        cand.class_scores.push(probs);
        cand.source.push(fw.partial[r]);
    }
    debug_assert!(cand.class_scores.iter().all(|p| p.len() == c));
    let keep = nms_bev(&cand.boxes, &cand.scores, nms_iou);
    Ok(Detections {
        boxes: keep.iter().map(|&i| cand.boxes[i]).collect(),
        classes: keep.iter().map(|&i| cand.classes[i]).collect(),
        scores: keep.iter().map(|&i| cand.scores[i]).collect(),
        class_scores: keep.iter().map(|&i| cand.class_scores[i].clone()).collect(),
        source: keep.iter().map(|&i| cand.source[i]).collect(),
    })
}
