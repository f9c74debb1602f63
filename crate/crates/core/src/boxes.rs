//! Oriented-box geometry and detection metrics.
//!
//! The geometric kernels are generic over [`Real`] so the same code runs on
//! plain `f64` and on forward-mode [`Dual`] numbers. The differentiable graph
//! ops ([`iou_op`], [`corner_loss_op`]) use the dual path to get exact
//! derivatives of the clipped-polygon IoU with respect to the predicted box.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Add, Div, Mul, Neg, Sub};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::types::Box3D;

/// Polygons with less area than this (m²) count as empty.
pub const AREA_EPS: f64 = 1e-12;

/// Smooth-L1 transition point for the corner term.
pub const CORNER_BETA: f64 = 1.0;

pub trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;

    fn abs(self) -> Self {
        if self.val() < 0.0 {
            -self
        } else {
            self
        }
    }

    fn max(self, o: Self) -> Self {
        if o.val() > self.val() {
            o
        } else {
            self
        }
    }

    fn min(self, o: Self) -> Self {
        if o.val() < self.val() {
            o
        } else {
            self
        }
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
    fn exp(self) -> Self {
        libm::exp(self)
    }
    fn sin(self) -> Self {
        libm::sin(self)
    }
    fn cos(self) -> Self {
        libm::cos(self)
    }
}

/// Value plus `N` tangent components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn seed(v: f64, i: usize) -> Self {
        let mut d = [0.0; N];
        d[i] = 1.0;
        Self { v, d }
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        d.iter_mut().for_each(|x| *x *= dv);
        Self { v, d }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a += b;
        }
        Self { v: self.v + o.v, d }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a -= b;
        }
        Self { v: self.v - o.v, d }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * o.v + self.v * o.d[i];
        }
        Self { v: self.v * o.v, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let q = self.v * inv;
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = (self.d[i] - q * o.d[i]) * inv;
        }
        Self { v: q, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    fn neg(self) -> Self {
        self.chain(-self.v, -1.0)
    }
}

impl<const N: usize> Real for Dual<N> {
    fn cst(v: f64) -> Self {
        Self { v, d: [0.0; N] }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let s = libm::sqrt(self.v);
        self.chain(s, if s > 0.0 { 0.5 / s } else { 0.0 })
    }
    fn exp(self) -> Self {
        let e = libm::exp(self.v);
        self.chain(e, e)
    }
    fn sin(self) -> Self {
        self.chain(libm::sin(self.v), libm::cos(self.v))
    }
    fn cos(self) -> Self {
        self.chain(libm::cos(self.v), -libm::sin(self.v))
    }
}

/// Box as `[cx, cy, cz, w, l, h, yaw]`.
pub type BoxParams<R> = [R; 7];

fn params<R: Real>(b: &Box3D) -> BoxParams<R> {
    b.to_array().map(R::cst)
}

/// The eight corners of a box.
///
/// Bottom face first, counter-clockwise starting from the local `+x +y`
/// corner, then the top face in the same order. Local `x` runs along `l`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSet(pub [[f64; 3]; 8]);

impl CornerSet {
    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.0 {
            for k in 0..3 {
                c[k] += p[k] / 8.0;
            }
        }
        c
    }
}

const CORNER_SIGNS: [[f64; 3]; 8] = [
    [1.0, 1.0, -1.0],
    [-1.0, 1.0, -1.0],
    [-1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0],
    [1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0],
    [-1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0],
];

pub fn corners_generic<R: Real>(b: &BoxParams<R>) -> [[R; 3]; 8] {
    let [cx, cy, cz, w, l, h, yaw] = *b;
    let (s, c) = (yaw.sin(), yaw.cos());
    let half = R::cst(0.5);
    CORNER_SIGNS.map(|sg| {
        let x = R::cst(sg[0]) * l * half;
        let y = R::cst(sg[1]) * w * half;
        let z = R::cst(sg[2]) * h * half;
        [cx + c * x - s * y, cy + s * x + c * y, cz + z]
    })
}

pub fn box_corners(b: &Box3D) -> CornerSet {
    CornerSet(corners_generic::<f64>(&params(b)))
}

fn bev_rect<R: Real>(b: &BoxParams<R>) -> Vec<[R; 2]> {
    corners_generic(b)[..4].iter().map(|p| [p[0], p[1]]).collect()
}

fn cross<R: Real>(o: [R; 2], a: [R; 2], p: [R; 2]) -> R {
    (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0])
}

/// Record of the discrete choices a kernel made. Two evaluations with equal
/// traces lie on the same smooth piece of the function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trace(u64);

impl Default for Trace {
    fn default() -> Self {
        Trace(0xcbf2_9ce4_8422_2325)
    }
}

impl Trace {
    pub fn note(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn flag(&mut self, b: bool) -> bool {
        self.note(b as u64);
        b
    }

    pub fn value(self) -> u64 {
        self.0
    }
}

fn tmin<R: Real>(a: R, b: R, t: &mut Trace) -> R {
    if t.flag(b.val() < a.val()) {
        b
    } else {
        a
    }
}

fn tmax<R: Real>(a: R, b: R, t: &mut Trace) -> R {
    if t.flag(b.val() > a.val()) {
        b
    } else {
        a
    }
}

/// Sutherland–Hodgman clipping of `subject` by the convex counter-clockwise
/// polygon `clip`.
pub fn clip_polygon<R: Real>(subject: &[[R; 2]], clip: &[[R; 2]]) -> Vec<[R; 2]> {
    clip_polygon_traced(subject, clip, &mut Trace::default())
}

fn clip_polygon_traced<R: Real>(subject: &[[R; 2]], clip: &[[R; 2]], trace: &mut Trace) -> Vec<[R; 2]> {
    let mut out: Vec<[R; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = core::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let sp = cross(a, b, p);
            let sq = cross(a, b, q);
            let p_in = trace.flag(sp.val() >= 0.0);
            let q_in = sq.val() >= 0.0;
            if p_in {
                out.push(p);
            }
            if p_in != q_in {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

pub fn polygon_area<R: Real>(poly: &[[R; 2]]) -> R {
    let mut acc = R::cst(0.0);
    for i in 0..poly.len() {
        let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
        acc = acc + p[0] * q[1] - q[0] * p[1];
    }
    (acc * R::cst(0.5)).abs()
}

/// Bird's-eye-view intersection area of two boxes.
pub fn bev_intersection<R: Real>(a: &BoxParams<R>, b: &BoxParams<R>) -> R {
    bev_intersection_traced(a, b, &mut Trace::default())
}

fn bev_intersection_traced<R: Real>(a: &BoxParams<R>, b: &BoxParams<R>, trace: &mut Trace) -> R {
    let poly = clip_polygon_traced(&bev_rect(a), &bev_rect(b), trace);
    if trace.flag(poly.len() < 3) {
        return R::cst(0.0);
    }
    let area = polygon_area(&poly);
    if trace.flag(area.val() < AREA_EPS) {
        R::cst(0.0)
    } else {
        area
    }
}

pub fn iou3d_generic<R: Real>(a: &BoxParams<R>, b: &BoxParams<R>) -> R {
    iou3d_traced(a, b, &mut Trace::default())
}

pub fn iou3d_traced<R: Real>(a: &BoxParams<R>, b: &BoxParams<R>, trace: &mut Trace) -> R {
    let half = R::cst(0.5);
    let top = tmin(a[2] + a[5] * half, b[2] + b[5] * half, trace);
    let bottom = tmax(a[2] - a[5] * half, b[2] - b[5] * half, trace);
    let dz = top - bottom;
    if trace.flag(dz.val() <= 0.0) {
        return R::cst(0.0);
    }
    let inter_bev = bev_intersection_traced(a, b, trace);
    if trace.flag(inter_bev.val() <= 0.0) {
        return R::cst(0.0);
    }
    let inter = inter_bev * dz;
    let va = a[3] * a[4] * a[5];
    let vb = b[3] * b[4] * b[5];
    // rounding can push identical boxes a hair above one
    tmin(inter / (va + vb - inter), R::cst(1.0), trace)
}

/// Gaussian center weight `exp(-|Δc|² / (2 (d/2)²))` with `d` the target's
/// diagonal.
pub fn center_weight_generic<R: Real>(pred: &BoxParams<R>, target: &BoxParams<R>) -> R {
    let d2 = target[3] * target[3] + target[4] * target[4] + target[5] * target[5];
    let mut dist2 = R::cst(0.0);
    for k in 0..3 {
        let e = pred[k] - target[k];
        dist2 = dist2 + e * e;
    }
    // 2 (d/2)^2 = d^2 / 2
    (-(dist2 * R::cst(2.0)) / d2).exp()
}

pub fn cwiou_generic<R: Real>(pred: &BoxParams<R>, target: &BoxParams<R>) -> R {
    cwiou_traced(pred, target, &mut Trace::default())
}

pub fn cwiou_traced<R: Real>(pred: &BoxParams<R>, target: &BoxParams<R>, trace: &mut Trace) -> R {
    iou3d_traced(pred, target, trace) * center_weight_generic(pred, target)
}

pub fn smooth_l1_generic<R: Real>(x: R, beta: f64) -> R {
    smooth_l1_traced(x, beta, &mut Trace::default())
}

fn smooth_l1_traced<R: Real>(x: R, beta: f64, trace: &mut Trace) -> R {
    let a = x.abs();
    if trace.flag(a.val() < beta) {
        R::cst(0.5 / beta) * x * x
    } else {
        a - R::cst(0.5 * beta)
    }
}

/// Mean over the 8 corner pairs of the summed per-axis smooth-L1 residual,
/// minimized over the target heading and its reverse.
pub fn corner_loss_generic<R: Real>(pred: &BoxParams<R>, target: &BoxParams<R>) -> R {
    corner_loss_traced(pred, target, &mut Trace::default())
}

pub fn corner_loss_traced<R: Real>(pred: &BoxParams<R>, target: &BoxParams<R>, trace: &mut Trace) -> R {
    let pc = corners_generic(pred);
    let mut best: Option<R> = None;
    for flip in [0.0, core::f64::consts::PI] {
        let mut t = *target;
        t[6] = t[6] + R::cst(flip);
        let tc = corners_generic(&t);
        let mut acc = R::cst(0.0);
        for (p, q) in pc.iter().zip(&tc) {
            for k in 0..3 {
                acc = acc + smooth_l1_traced(p[k] - q[k], CORNER_BETA, trace);
            }
        }
        let mean = acc / R::cst(8.0);
        best = Some(match best {
            Some(b) => tmin(b, mean, trace),
            None => mean,
        });
    }
    best.unwrap_or(R::cst(0.0))
}

pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    iou3d_generic::<f64>(&params(a), &params(b))
}

pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let (pa, pb) = (params::<f64>(a), params::<f64>(b));
    let inter = bev_intersection(&pa, &pb);
    let union = a.w * a.l + b.w * b.l - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Center-weighted IoU: IoU times a Gaussian penalty on the center offset,
/// scaled by the target's size.
pub fn cwiou(pred: &Box3D, target: &Box3D) -> f64 {
    cwiou_generic::<f64>(&params(pred), &params(target))
}

pub fn corner_loss(pred: &Box3D, target: &Box3D) -> f64 {
    corner_loss_generic::<f64>(&params(pred), &params(target))
}

fn check_box_rows(g: &Graph, op: &'static str, pred: Var, target: &Tensor) -> Result<usize> {
    let ps = g.shape(pred);
    if ps.len() != 2 || ps[1] != 7 || target.shape() != ps {
        return Err(Error::ShapeMismatch {
            op,
            left: ps.to_vec(),
            right: target.shape().to_vec(),
        });
    }
    Ok(ps[0])
}

fn row7(t: &[f64], r: usize) -> [f64; 7] {
    let mut out = [0.0; 7];
    out.copy_from_slice(&t[r * 7..r * 7 + 7]);
    out
}

fn dual_row(vals: [f64; 7]) -> BoxParams<Dual<7>> {
    core::array::from_fn(|i| Dual::seed(vals[i], i))
}

/// Per-row box function of `pred` (`[n, 7]`, differentiable) against a
/// constant `target`, returned as `[n, 1]`.
fn box_pair_op(
    g: &mut Graph,
    name: &'static str,
    pred: Var,
    target: &Tensor,
    f: fn(&BoxParams<Dual<7>>, &BoxParams<Dual<7>>, &mut Trace) -> Dual<7>,
) -> Result<Var> {
    let n = check_box_rows(g, name, pred, target)?;
    let pv = g.value(pred).data().to_vec();
    let mut vals = Vec::with_capacity(n);
    let mut jac = Vec::with_capacity(n * 7);
    let mut trace = Trace::default();
    for r in 0..n {
        let t = row7(target.data(), r).map(Dual::<7>::cst);
        let out = f(&dual_row(row7(&pv, r)), &t, &mut trace);
        vals.push(out.v);
        jac.extend_from_slice(&out.d);
    }
    let value = Tensor::new(vec![n, 1], vals)?;
    g.note_branch(trace.value());
    Ok(g.custom(
        name,
        &[pred],
        value,
        alloc::boxed::Box::new(move |adj, grads| {
            for r in 0..adj.len() {
                for j in 0..7 {
                    grads[0][r * 7 + j] += adj[r] * jac[r * 7 + j];
                }
            }
        }),
    ))
}

/// Differentiable per-row IoU (or center-weighted IoU) of predicted boxes
/// against constant targets.
pub fn iou_op(g: &mut Graph, pred: Var, target: &Tensor, center_weighted: bool) -> Result<Var> {
    if center_weighted {
        box_pair_op(g, "cwiou", pred, target, cwiou_traced::<Dual<7>>)
    } else {
        box_pair_op(g, "iou3d", pred, target, iou3d_traced::<Dual<7>>)
    }
}

pub fn corner_loss_op(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    box_pair_op(g, "corner_loss", pred, target, corner_loss_traced::<Dual<7>>)
}

/// Interpolation grid for average precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecallPositions {
    /// 0, 0.1, ..., 1.0
    R11,
    /// 1/40, 2/40, ..., 1.0
    R40,
}

impl RecallPositions {
    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            11 => Ok(Self::R11),
            40 => Ok(Self::R40),
            _ => Err(crate::error::invalid(alloc::format!(
                "recall positions must be 11 or 40, got {n}"
            ))),
        }
    }

    pub fn count(self) -> usize {
        match self {
            Self::R11 => 11,
            Self::R40 => 40,
        }
    }

    pub fn positions(self) -> Vec<f64> {
        match self {
            Self::R11 => (0..11).map(|i| i as f64 / 10.0).collect(),
            Self::R40 => (1..=40).map(|i| i as f64 / 40.0).collect(),
        }
    }
}

/// A scored detection belonging to scene `scene`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub scene: usize,
    pub class: u32,
    pub score: f64,
    pub bbox: Box3D,
}

/// Ground-truth boxes of one scene.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneTruth {
    pub boxes: Vec<Box3D>,
    pub classes: Vec<u32>,
}

/// Average precision per class. Classes without ground truth yield `None`.
///
/// Predictions of a class are processed in descending score order (ties keep
/// input order); each one is matched to the unmatched ground truth of the same
/// scene with the highest 3D IoU, counting as a true positive when that IoU is
/// at least the class threshold.
pub fn evaluate_ap(
    predictions: &[ScoredBox],
    truth: &[SceneTruth],
    n_classes: usize,
    iou_thresholds: &[f64],
    rp: RecallPositions,
) -> Vec<Option<f64>> {
    (0..n_classes)
        .map(|c| {
            let thr = iou_thresholds.get(c).or(iou_thresholds.last()).copied().unwrap_or(0.5);
            class_ap(predictions, truth, c as u32, thr, rp)
        })
        .collect()
}

fn class_ap(predictions: &[ScoredBox], truth: &[SceneTruth], class: u32, thr: f64, rp: RecallPositions) -> Option<f64> {
    let n_gt: usize = truth.iter().map(|t| t.classes.iter().filter(|&&c| c == class).count()).sum();
    if n_gt == 0 {
        return None;
    }
    let mut preds: Vec<&ScoredBox> = predictions.iter().filter(|p| p.class == class).collect();
    preds.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut used: Vec<Vec<bool>> = truth.iter().map(|t| vec![false; t.boxes.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(preds.len());
    for (i, p) in preds.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        if let Some(t) = truth.get(p.scene) {
            for (j, (b, &c)) in t.boxes.iter().zip(&t.classes).enumerate() {
                if c != class || used[p.scene][j] {
                    continue;
                }
                let iou = iou3d(&p.bbox, b);
                if best.map_or(true, |(_, v)| iou > v) {
                    best = Some((j, iou));
                }
            }
        }
        if let Some((j, iou)) = best {
            if iou >= thr {
                used[p.scene][j] = true;
                tp += 1;
            }
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    Some(interpolated_ap(&curve, rp))
}

/// Mean over the recall grid of the best precision achieved at or beyond each
/// recall level. `curve` holds (recall, precision) pairs.
pub fn interpolated_ap(curve: &[(f64, f64)], rp: RecallPositions) -> f64 {
    let pos = rp.positions();
    let mut sum = 0.0;
    for &r in &pos {
        let p = curve
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|&(_, prec)| prec)
            .fold(0.0, f64::max);
        sum += p;
    }
    sum / pos.len() as f64
}

/// Greedy non-maximum suppression in bird's-eye view. Returns kept indices in
/// descending score order.
pub fn nms_bev(boxes: &[Box3D], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| bev_iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use core::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
    use proptest::prelude::*;

    fn bx(cx: f64, cy: f64, cz: f64, w: f64, l: f64, h: f64, yaw: f64) -> Box3D {
        Box3D::new(cx, cy, cz, w, l, h, yaw).unwrap()
    }

    fn random_box(rng: &mut SeededRng) -> Box3D {
        bx(
            rng.range(-1.0, 1.0),
            rng.range(-1.0, 1.0),
            rng.range(-0.5, 0.5),
            rng.range(0.5, 2.5),
            rng.range(0.5, 4.0),
            rng.range(0.5, 2.0),
            rng.range(-PI, PI),
        )
    }

    #[test]
    fn corner_examples() {
        let c = box_corners(&bx(0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0));
        for p in c.0 {
            assert!(p.iter().all(|v| (v.abs() - 1.0).abs() < 1e-15));
        }
        assert_eq!(c.0[0], [1.0, 1.0, -1.0]);
        // l=2 along x at yaw 0; a quarter turn puts it along y.
        let c = box_corners(&bx(0.0, 0.0, 0.0, 4.0, 2.0, 2.0, FRAC_PI_2));
        let xmax = c.0.iter().map(|p| p[0]).fold(f64::MIN, f64::max);
        let ymax = c.0.iter().map(|p| p[1]).fold(f64::MIN, f64::max);
        assert!((xmax - 2.0).abs() < 1e-12 && (ymax - 1.0).abs() < 1e-12);
    }

    #[test]
    fn corner_centroid_and_diagonal() {
        let mut rng = SeededRng::new(3);
        for _ in 0..50 {
            let b = random_box(&mut rng);
            let c = box_corners(&b);
            let m = c.centroid();
            for k in 0..3 {
                assert!((m[k] - b.center()[k]).abs() < 1e-9);
            }
            // corner 0 and corner 6 are opposite
            let d: f64 = (0..3).map(|k| (c.0[0][k] - c.0[6][k]).powi(2)).sum::<f64>().sqrt();
            assert!((d - b.diagonal()).abs() < 1e-9);
        }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 0.0, 1.0, 2.0, 1.5, 0.3);
        assert!((iou3d(&a, &a) - 1.0).abs() < 1e-12);
        let far = bx(10.0, 0.0, 0.0, 1.0, 2.0, 1.5, 0.3);
        assert_eq!(iou3d(&a, &far), 0.0);
        let unit = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let turned = bx(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, FRAC_PI_4);
        let octagon = 2.0 * (2f64.sqrt() - 1.0);
        let expected = octagon / (2.0 - octagon);
        assert!((iou3d(&unit, &turned) - expected).abs() < 1e-12);
        assert!((expected - 0.70711).abs() < 1e-4);
    }

    #[test]
    fn vertical_offset_only() {
        let a = bx(0.0, 0.0, 0.0, 1.0, 1.0, 2.0, 0.0);
        let b = bx(0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 0.0);
        assert!((iou3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_matches_monte_carlo() {
        let mut rng = SeededRng::new(11);
        for _ in 0..20 {
            let (a, b) = (random_box(&mut rng), random_box(&mut rng));
            let est = monte_carlo_iou(&a, &b, 200_000, &mut rng);
            assert!((iou3d(&a, &b) - est).abs() < 1e-2, "{a:?} {b:?}");
        }
    }

    /// Fraction of samples in the union's bounding box that fall in both boxes,
    /// over the fraction falling in either.
    pub(crate) fn monte_carlo_iou(a: &Box3D, b: &Box3D, n: usize, rng: &mut SeededRng) -> f64 {
        let ca = box_corners(a).0;
        let cb = box_corners(b).0;
        let mut lo = [f64::MAX; 3];
        let mut hi = [f64::MIN; 3];
        for p in ca.iter().chain(cb.iter()) {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let (mut both, mut either) = (0usize, 0usize);
        for _ in 0..n {
            let p = [rng.range(lo[0], hi[0]), rng.range(lo[1], hi[1]), rng.range(lo[2], hi[2])];
            let (ia, ib) = (a.contains(p), b.contains(p));
            both += (ia && ib) as usize;
            either += (ia || ib) as usize;
        }
        both as f64 / either.max(1) as f64
    }

    #[test]
    fn cwiou_examples() {
        let t = bx(1.0, 2.0, 0.5, 1.6, 4.0, 1.5, 0.4);
        assert!((cwiou(&t, &t) - 1.0).abs() < 1e-12);
        let p = bx(1.0, 2.0, 0.5, 1.0, 3.0, 1.0, -0.2);
        assert_eq!(cwiou(&p, &t), iou3d(&p, &t));
        let d = t.diagonal();
        let mut prev_w = f64::INFINITY;
        for i in 0..=50 {
            let off = d * i as f64 / 50.0;
            let q = bx(1.0 + off, 2.0, 0.5, 1.6, 4.0, 1.5, 0.4);
            let w = center_weight_generic::<f64>(&params(&q), &params(&t));
            assert!(w <= prev_w);
            if i > 0 {
                assert!(w < prev_w);
            }
            prev_w = w;
        }
    }

    #[test]
    fn corner_loss_examples() {
        let t = bx(0.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.7);
        assert_eq!(corner_loss(&t, &t), 0.0);
        let flipped = bx(0.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.7 + PI);
        assert!(corner_loss(&flipped, &t) < 1e-24);
        let shifted = bx(0.1, 0.0, 0.0, 2.0, 4.0, 1.5, 0.7);
        assert!((corner_loss(&shifted, &t) - 0.005).abs() < 1e-12);
    }

    #[test]
    fn dual_iou_matches_finite_differences() {
        let mut rng = SeededRng::new(5);
        let mut checked = 0;
        while checked < 20 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let base = iou3d(&a, &b);
            if base <= 0.05 {
                continue;
            }
            checked += 1;
            let d = cwiou_generic(&dual_row(a.to_array()), &params(&b));
            for j in 0..7 {
                let h = 1e-6;
                let mut ap = a.to_array();
                let mut am = a.to_array();
                ap[j] += h;
                am[j] -= h;
                let fd = (cwiou_generic::<f64>(&ap, &params(&b)) - cwiou_generic::<f64>(&am, &params(&b))) / (2.0 * h);
                assert!((fd - d.d[j]).abs() < 1e-5 * (1.0 + fd.abs()), "j={j} fd={fd} ad={}", d.d[j]);
            }
        }
    }

    #[test]
    fn ap_examples() {
        let gt = bx(0.0, 0.0, 0.0, 1.0, 2.0, 1.0, 0.0);
        let truth = vec![SceneTruth {
            boxes: vec![gt],
            classes: vec![0],
        }];
        let perfect = [ScoredBox {
            scene: 0,
            class: 0,
            score: 0.9,
            bbox: gt,
        }];
        for rp in [RecallPositions::R11, RecallPositions::R40] {
            assert_eq!(evaluate_ap(&perfect, &truth, 1, &[0.7], rp)[0], Some(1.0));
            assert_eq!(evaluate_ap(&[], &truth, 1, &[0.7], rp)[0], Some(0.0));
        }
        let fp = ScoredBox {
            scene: 0,
            class: 0,
            score: 0.5,
            bbox: bx(20.0, 0.0, 0.0, 1.0, 2.0, 1.0, 0.0),
        };
        let preds = [perfect[0], fp];
        assert_eq!(evaluate_ap(&preds, &truth, 1, &[0.7], RecallPositions::R11)[0], Some(1.0));
        // no ground truth for class 1
        assert_eq!(evaluate_ap(&preds, &truth, 2, &[0.7, 0.5], RecallPositions::R11)[1], None);
    }

    #[test]
    fn ap_grids_differ() {
        // one GT recalled at 50%: precision 1 up to recall 0.5
        let curve = [(0.5, 1.0), (0.5, 0.5)];
        let a11 = interpolated_ap(&curve, RecallPositions::R11);
        let a40 = interpolated_ap(&curve, RecallPositions::R40);
        assert!((a11 - 6.0 / 11.0).abs() < 1e-12);
        assert!((a40 - 20.0 / 40.0).abs() < 1e-12);
    }

    #[test]
    fn nms_keeps_one_of_duplicates() {
        let a = bx(0.0, 0.0, 0.0, 1.0, 2.0, 1.0, 0.0);
        let b = bx(5.0, 0.0, 0.0, 1.0, 2.0, 1.0, 0.0);
        let keep = nms_bev(&[a, a, b], &[0.5, 0.9, 0.7], 0.1);
        assert_eq!(keep, vec![1, 2]);
    }

    #[test]
    fn graph_ops_propagate() {
        let mut g = Graph::new();
        let a = bx(0.1, 0.0, 0.0, 1.0, 2.0, 1.0, 0.1);
        let b = bx(0.0, 0.0, 0.0, 1.0, 2.0, 1.0, 0.0);
        let p = g.var(Tensor::new(vec![1, 7], a.to_array().to_vec()).unwrap());
        let t = Tensor::new(vec![1, 7], b.to_array().to_vec()).unwrap();
        let iou = iou_op(&mut g, p, &t, false).unwrap();
        assert!((g.value(iou).item() - iou3d(&a, &b)).abs() < 1e-15);
        let cl = corner_loss_op(&mut g, p, &t).unwrap();
        let s = g.add(iou, cl).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(p).unwrap().iter().any(|v| *v != 0.0));
        let bad = Tensor::zeros(&[2, 7]);
        assert!(iou_op(&mut g, p, &bad, true).is_err());
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (-2.0..2.0f64, -2.0..2.0f64, -1.0..1.0f64, 0.3..3.0f64, 0.3..4.0f64, 0.3..2.0f64, -PI..PI)
            .prop_map(|(x, y, z, w, l, h, t)| bx(x, y, z, w, l, h, t))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou3d(&a, &b);
            prop_assert!((ab - iou3d(&b, &a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
            let cw = cwiou(&a, &b);
            prop_assert!(cw >= 0.0 && cw <= ab + 1e-15);
        }

        #[test]
        fn iou_rigid_invariance(a in arb_box(), b in arb_box(), tx in -5.0..5.0f64, ty in -5.0..5.0f64, rot in -PI..PI) {
            let move_box = |q: &Box3D| {
                let (s, c) = rot.sin_cos();
                bx(c * q.cx - s * q.cy + tx, s * q.cx + c * q.cy + ty, q.cz, q.w, q.l, q.h, q.yaw + rot)
            };
            let before = iou3d(&a, &b);
            let after = iou3d(&move_box(&a), &move_box(&b));
            prop_assert!((before - after).abs() < 1e-9);
        }

        #[test]
        fn corner_loss_nonnegative(a in arb_box(), b in arb_box()) {
            prop_assert!(corner_loss(&a, &b) >= 0.0);
            prop_assert_eq!(corner_loss(&a, &a), 0.0);
        }
    }
}
