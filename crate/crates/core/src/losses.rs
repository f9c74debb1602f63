//! Training objectives: temperature-scaled soft labels, the soft focal term,
//! box regression terms, hard-label losses and their weighted combination.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::autodiff::{sigmoid, smooth_l1 as smooth_l1_beta, Graph, Tensor, Var};
use crate::boxes::{corner_loss, corner_loss_op, cwiou, iou3d, iou_op};
use crate::error::{invalid, Error, Result};
use crate::types::Box3D;

/// Clamp used for probabilities entering a logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Smooth-L1 transition point of the regression terms.
pub const BETA: f64 = 1.0;

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(invalid(alloc::format!("temperature must be positive, got {t}")))
    }
}

/// `1 / (1 + exp(-c / t))`
pub fn temp_sigmoid(c: f64, t: f64) -> Result<f64> {
    check_temperature(t)?;
    Ok(sigmoid(c / t))
}

pub fn temp_sigmoid_op(g: &mut Graph, c: Var, t: f64) -> Result<Var> {
    check_temperature(t)?;
    let s = g.scale(c, 1.0 / t);
    Ok(g.sigmoid(s))
}

pub fn smooth_l1(x: f64) -> f64 {
    smooth_l1_beta(x, BETA)
}

fn focal_exponent(gamma: f64) -> Result<u32> {
    if gamma >= 0.0 && gamma.fract() == 0.0 && gamma <= 16.0 {
        Ok(gamma as u32)
    } else {
        Err(invalid(alloc::format!("focal exponent must be a small non-negative integer, got {gamma}")))
    }
}

/// One entry of the soft focal term:
/// `-alpha (soft - p) ^ gamma ln p` with `p = pred` for a foreground entry and
/// `1 - pred` otherwise. Inputs are clamped to `[1e-7, 1 - 1e-7]`.
pub fn soft_focal_entry(soft: f64, pred: f64, foreground: bool, alpha: f64, gamma: f64) -> Result<f64> {
    let k = focal_exponent(gamma)?;
    let soft = soft.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pred = pred.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let p = if foreground { pred } else { 1.0 - pred };
    Ok(-alpha * (soft - p).powi(k as i32) * p.ln())
}

/// Elementwise clamp; the gradient passes only where the input is inside.
pub fn clamp_op(g: &mut Graph, x: Var, lo: f64, hi: f64) -> Var {
    let src = g.value(x).clone();
    let mask: Vec<f64> = src.data().iter().map(|&v| if v >= lo && v <= hi { 1.0 } else { 0.0 }).collect();
    for &m in &mask {
        g.note_branch(m as u64);
    }
    let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| v.clamp(lo, hi)).collect())
        .unwrap_or(src);
    g.custom(
        "clamp",
        &[x],
        value,
        Box::new(move |adj, grads| {
            for ((gi, a), m) in grads[0].iter_mut().zip(adj).zip(&mask) {
                *gi += a * m;
            }
        }),
    )
}

/// Soft focal loss between constant teacher probabilities `soft` and student
/// probabilities `pred` (both `[n, C]`). `foreground[i][c]` is 1 where entry
/// `(i, c)` is the point's labelled class. Summed over classes, averaged over
/// rows.
pub fn soft_focal(g: &mut Graph, soft: &Tensor, pred: Var, foreground: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
    let k = focal_exponent(gamma)?;
    let shape = g.shape(pred).to_vec();
    for (op, t) in [("soft_focal", soft), ("soft_focal mask", foreground)] {
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op,
                left: t.shape().to_vec(),
                right: shape.clone(),
            });
        }
    }
    let n = shape[0];
    if n == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let pred = clamp_op(g, pred, PROB_EPS, 1.0 - PROB_EPS);
    // p = (1 - m) + (2m - 1) * pred
    let sign = Tensor::new(shape.clone(), foreground.data().iter().map(|m| 2.0 * m - 1.0).collect())?;
    let base = Tensor::new(shape.clone(), foreground.data().iter().map(|m| 1.0 - m).collect())?;
    let sign = g.constant(sign);
    let base = g.constant(base);
    let p = g.mul(sign, pred)?;
    let p = g.add(p, base)?;
    let soft_c = Tensor::new(shape, soft.data().iter().map(|v| v.clamp(PROB_EPS, 1.0 - PROB_EPS)).collect())?;
    let soft_c = g.constant(soft_c);
    let diff = g.sub(soft_c, p)?;
    let mut modulator = g.constant(Tensor::filled(g.shape(diff).to_vec().as_slice(), 1.0));
    for _ in 0..k {
        modulator = g.mul(modulator, diff)?;
    }
    let logp = g.log(p);
    let term = g.mul(modulator, logp)?;
    let total = g.sum(term);
    Ok(g.scale(total, -alpha / n as f64))
}

/// Box regression terms, each averaged over rows.
#[derive(Debug, Clone, Copy)]
pub struct LocTerms {
    /// `1 - IoU` (or `1 - CwIoU`)
    pub iou: Var,
    /// Smooth-L1 over center/size residuals plus the heading sine residual.
    pub ind: Var,
    pub corner: Var,
}

impl LocTerms {
    pub fn combine(&self, g: &mut Graph, lambda_ind: f64, lambda_corner: f64) -> Result<Var> {
        let ind = g.scale(self.ind, lambda_ind);
        let corner = g.scale(self.corner, lambda_corner);
        let s = g.add(self.iou, ind)?;
        g.add(s, corner)
    }
}

/// Regression terms of predicted boxes `pred` (`[n, 7]`) against constant
/// `target` boxes. Returns `None` when there are no rows.
pub fn loc_terms(g: &mut Graph, pred: Var, target: &Tensor, center_weighted: bool) -> Result<Option<LocTerms>> {
    let n = g.shape(pred)[0];
    if n == 0 {
        return Ok(None);
    }
    let inv_n = 1.0 / n as f64;
    let overlap = iou_op(g, pred, target, center_weighted)?;
    let overlap = g.sum(overlap);
    let neg = g.scale(overlap, -inv_n);
    let iou = g.add_scalar(neg, 1.0);

    let t = g.constant(target.clone());
    let diff = g.sub(pred, t)?;
    let lin = g.slice_cols(diff, 0, 6)?;
    let lin = g.smooth_l1(lin, BETA);
    let dyaw = g.slice_cols(diff, 6, 7)?;
    let dyaw = g.sin(dyaw);
    let dyaw = g.smooth_l1(dyaw, BETA);
    let a = g.sum(lin);
    let b = g.sum(dyaw);
    let ind = g.add(a, b)?;
    let ind = g.scale(ind, inv_n);

    let corner = corner_loss_op(g, pred, target)?;
    let corner = g.sum(corner);
    let corner = g.scale(corner, inv_n);
    Ok(Some(LocTerms { iou, ind, corner }))
}

/// Plain-number version of the regression loss for one box pair:
/// `(1 - overlap) + λ_ind (Σ smoothL1(Δ center, Δ size) + smoothL1(sin Δyaw)) + λ_corner corner`.
pub fn loc_loss(pred: &Box3D, target: &Box3D, lambda_ind: f64, lambda_corner: f64, center_weighted: bool) -> f64 {
    let overlap = if center_weighted { cwiou(pred, target) } else { iou3d(pred, target) };
    let (p, t) = (pred.to_array(), target.to_array());
    let ind: f64 = (0..6).map(|k| smooth_l1(p[k] - t[k])).sum::<f64>() + smooth_l1((p[6] - t[6]).sin());
    (1.0 - overlap) + lambda_ind * ind + lambda_corner * corner_loss(pred, target)
}

/// Soft localization loss against a teacher box (center-weighted overlap).
pub fn soft_loc_loss(pred: &Box3D, soft: &Box3D, lambda_ind: f64, lambda_corner: f64) -> f64 {
    loc_loss(pred, soft, lambda_ind, lambda_corner, true)
}

/// Softmax cross-entropy over the `C` class logits plus a background logit
/// fixed at zero. `labels[i] == C` means background. Averaged over rows.
pub fn cross_entropy_with_background(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (n, c) = (g.shape(logits)[0], g.shape(logits)[1]);
    if labels.len() != n {
        return Err(invalid(alloc::format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > c) {
        return Err(invalid(alloc::format!("label {bad} out of range for {c} classes plus background")));
    }
    if n == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let bg = g.constant(Tensor::zeros(&[n, 1]));
    let full = g.concat(&[logits, bg])?;
    let logp = g.log_softmax(full)?;
    let mut onehot = vec![0.0; n * (c + 1)];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * (c + 1) + l] = 1.0;
    }
    let onehot = g.constant(Tensor::matrix(n, c + 1, onehot)?);
    let picked = g.mul(logp, onehot)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// Binary cross-entropy from logits `[n, 1]` against 0/1 labels, averaged.
pub fn bce_with_logits(g: &mut Graph, logits: Var, labels: &[f64]) -> Result<Var> {
    let n = g.shape(logits)[0];
    if labels.len() != n || g.shape(logits)[1] != 1 {
        return Err(invalid(alloc::format!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            g.shape(logits)
        )));
    }
    if n == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    // log σ(z) and log(1 - σ(z)) are the two columns of log_softmax([z, 0]).
    let zero = g.constant(Tensor::zeros(&[n, 1]));
    let pair = g.concat(&[logits, zero])?;
    let logp = g.log_softmax(pair)?;
    let mut w = Vec::with_capacity(2 * n);
    for &y in labels {
        w.push(y);
        w.push(1.0 - y);
    }
    let w = g.constant(Tensor::matrix(n, 2, w)?);
    let picked = g.mul(logp, w)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// Smooth-L1 between voted centers and target centers (`[n, 3]`), summed over
/// axes and averaged over rows.
pub fn vote_loss(g: &mut Graph, votes: Var, targets: &Tensor) -> Result<Var> {
    let n = g.shape(votes)[0];
    if n == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let t = g.constant(targets.clone());
    let d = g.sub(votes, t)?;
    let s = g.smooth_l1(d, BETA);
    let s = g.sum(s);
    Ok(g.scale(s, 1.0 / n as f64))
}

fn weights_are_convex(soft_w: f64, hard_w: f64) -> bool {
    (soft_w + hard_w - 1.0).abs() < 1e-12
}

/// `λ_soft L_soft + λ_hard L_hard`. Weights that sum to one are evaluated as
/// the interpolation `L_hard + λ_soft (L_soft - L_hard)`, which rounds the
/// weights 0.7 and 0.3 to the decimal result (1.3 rather than 1.2999999999999998
/// for `L = (1, 2)`).
pub fn hybrid(soft: f64, hard: f64, soft_w: f64, hard_w: f64) -> f64 {
    if weights_are_convex(soft_w, hard_w) {
        hard + soft_w * (soft - hard)
    } else {
        soft_w * soft + hard_w * hard
    }
}

pub fn hybrid_op(g: &mut Graph, soft: Var, hard: Var, soft_w: f64, hard_w: f64) -> Result<Var> {
    if weights_are_convex(soft_w, hard_w) {
        let d = g.sub(soft, hard)?;
        let d = g.scale(d, soft_w);
        g.add(hard, d)
    } else {
        let a = g.scale(soft, soft_w);
        let b = g.scale(hard, hard_w);
        g.add(a, b)
    }
}

/// Values of every loss term for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub soft: f64,
    pub hard: f64,
    pub soft_cls: f64,
    pub soft_aux: f64,
    pub soft_loc_iou: f64,
    pub soft_loc_ind: f64,
    pub soft_loc_corner: f64,
    pub hard_cls: f64,
    pub hard_aux: f64,
    pub hard_loc_iou: f64,
    pub hard_loc_ind: f64,
    pub hard_loc_corner: f64,
    pub vote: f64,
    pub foreground: f64,
    pub n_foreground: usize,
    /// Set when no foreground rows were present, so the localization terms
    /// are zero by convention.
    pub no_foreground: bool,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 17] = [
        "total",
        "soft",
        "hard",
        "soft_cls",
        "soft_aux",
        "soft_loc_iou",
        "soft_loc_ind",
        "soft_loc_corner",
        "hard_cls",
        "hard_aux",
        "hard_loc_iou",
        "hard_loc_ind",
        "hard_loc_corner",
        "vote",
        "foreground",
        "n_foreground",
        "no_foreground",
    ];

    pub fn values(&self) -> [f64; 17] {
        [
            self.total,
            self.soft,
            self.hard,
            self.soft_cls,
            self.soft_aux,
            self.soft_loc_iou,
            self.soft_loc_ind,
            self.soft_loc_corner,
            self.hard_cls,
            self.hard_aux,
            self.hard_loc_iou,
            self.hard_loc_ind,
            self.hard_loc_corner,
            self.vote,
            self.foreground,
            self.n_foreground as f64,
            if self.no_foreground { 1.0 } else { 0.0 },
        ]
    }

    /// Accumulates `other` into `self` (for averaging over a batch).
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        let n = self.n_foreground + other.n_foreground;
        let nf = self.no_foreground && other.no_foreground;
        macro_rules! acc {
            ($($f:ident),*) => { $( self.$f += other.$f; )* };
        }
        acc!(
            total, soft, hard, soft_cls, soft_aux, soft_loc_iou, soft_loc_ind, soft_loc_corner, hard_cls, hard_aux,
            hard_loc_iou, hard_loc_ind, hard_loc_corner, vote, foreground
        );
        self.n_foreground = n;
        self.no_foreground = nf;
    }

    pub fn scaled(mut self, s: f64) -> Self {
        macro_rules! sc {
            ($($f:ident),*) => { $( self.$f *= s; )* };
        }
        sc!(
            total, soft, hard, soft_cls, soft_aux, soft_loc_iou, soft_loc_ind, soft_loc_corner, hard_cls, hard_aux,
            hard_loc_iou, hard_loc_ind, hard_loc_corner, vote, foreground
        );
        self
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn temperature_examples() {
        assert_eq!(temp_sigmoid(0.0, 7.0).unwrap(), 0.5);
        let v = temp_sigmoid(3.0, 3.0).unwrap();
        assert!((v - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((v - 0.731059).abs() < 1e-6);
        assert!((temp_sigmoid(10.0, 1e6).unwrap() - 0.5).abs() < 1e-5);
        assert!(temp_sigmoid(1.0, 0.0).is_err());
        assert!(temp_sigmoid(1.0, -2.0).is_err());
    }

    #[test]
    fn focal_examples() {
        assert_eq!(soft_focal_entry(0.7, 0.7, true, 0.25, 2.0).unwrap(), 0.0);
        let fg = soft_focal_entry(0.9, 0.5, true, 0.25, 2.0).unwrap();
        assert!((fg - 0.25 * 0.16 * 2f64.ln()).abs() < 1e-15);
        assert!((fg - 0.0277259).abs() < 1e-6);
        let bg = soft_focal_entry(0.1, 0.1, false, 0.25, 2.0).unwrap();
        assert!((bg - 0.25 * 0.64 * -(0.9f64.ln())).abs() < 1e-15);
        // 0.25 * 0.64 * -ln(0.9) = 0.0168577; a quoted 0.0168600 is a rounding slip
        assert!((bg - 0.0168577).abs() < 1e-6);
        assert!(soft_focal_entry(0.5, 0.5, true, 0.25, 1.5).is_err());
    }

    #[test]
    fn focal_graph_matches_entries() {
        let mut rng = SeededRng::new(3);
        let (n, c) = (5, 3);
        let soft: Vec<f64> = (0..n * c).map(|_| rng.uniform()).collect();
        let pred: Vec<f64> = (0..n * c).map(|_| rng.uniform()).collect();
        let mask: Vec<f64> = (0..n * c).map(|_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 }).collect();
        let mut g = Graph::new();
        let p = g.var(Tensor::matrix(n, c, pred.clone()).unwrap());
        let out = soft_focal(
            &mut g,
            &Tensor::matrix(n, c, soft.clone()).unwrap(),
            p,
            &Tensor::matrix(n, c, mask.clone()).unwrap(),
            0.25,
            2.0,
        )
        .unwrap();
        let expect: f64 = (0..n * c)
            .map(|i| soft_focal_entry(soft[i], pred[i], mask[i] == 1.0, 0.25, 2.0).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((g.value(out).item() - expect).abs() < 1e-14);
    }

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
    }

    #[test]
    fn loc_examples() {
        let t = Box3D::new(0.0, 0.0, 0.0, 3.0, 6.0, 2.0, 0.2).unwrap();
        assert_eq!(soft_loc_loss(&t, &t, 1.0, 1.0), 0.0);
        let p = Box3D::new(0.5, 0.0, 0.0, 3.0, 6.0, 2.0, 0.2).unwrap();
        let total = soft_loc_loss(&p, &t, 1.0, 1.0);
        let iou_part = 1.0 - cwiou(&p, &t);
        let corner = corner_loss(&p, &t);
        assert!(iou_part > 0.0 && corner > 0.0);
        assert!((total - (iou_part + 0.125 + corner)).abs() < 1e-12);

        let mut g = Graph::new();
        let empty = g.var(Tensor::zeros(&[0, 7]));
        assert!(loc_terms(&mut g, empty, &Tensor::zeros(&[0, 7]), true).unwrap().is_none());
    }

    #[test]
    fn loc_graph_matches_scalar() {
        let mut rng = SeededRng::new(9);
        let mut preds = Vec::new();
        let mut targets = Vec::new();
        let mut expect = 0.0;
        for _ in 0..4 {
            let t = Box3D::new(rng.range(-1.0, 1.0), rng.range(-1.0, 1.0), 0.0, 1.6, 4.0, 1.5, rng.range(-3.0, 3.0)).unwrap();
            let p = Box3D::new(t.cx + rng.range(-0.5, 0.5), t.cy, 0.1, 1.8, 3.6, 1.4, t.yaw + rng.range(-0.3, 0.3)).unwrap();
            expect += loc_loss(&p, &t, 1.0, 1.0, false) / 4.0;
            // feed the raw (unwrapped) yaw, as the network would
            let mut a = p.to_array();
            a[6] = t.yaw + (p.yaw - t.yaw);
            preds.extend_from_slice(&a);
            targets.extend_from_slice(&t.to_array());
        }
        let mut g = Graph::new();
        let pv = g.var(Tensor::matrix(4, 7, preds).unwrap());
        let terms = loc_terms(&mut g, pv, &Tensor::matrix(4, 7, targets).unwrap(), false).unwrap().unwrap();
        let l = terms.combine(&mut g, 1.0, 1.0).unwrap();
        assert!((g.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        // confident and correct: class 1 of 2, background logit 0
        let x = g.var(Tensor::matrix(1, 2, vec![-60.0, 60.0]).unwrap());
        let ce = cross_entropy_with_background(&mut g, x, &[1]).unwrap();
        assert!(g.value(ce).item() < 1e-20);
        let u = g.var(Tensor::zeros(&[3, 2]));
        let ce = cross_entropy_with_background(&mut g, u, &[0, 1, 2]).unwrap();
        assert!((g.value(ce).item() - 3f64.ln()).abs() < 1e-15);
        assert!(cross_entropy_with_background(&mut g, u, &[0, 1, 3]).is_err());
    }

    #[test]
    fn cross_entropy_matches_scalar_loop() {
        let mut rng = SeededRng::new(21);
        let (n, c) = (6, 2);
        let logits: Vec<f64> = (0..n * c).map(|_| rng.normal(0.0, 2.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.index(c + 1)).collect();
        let mut expect = 0.0;
        for i in 0..n {
            let mut row: Vec<f64> = logits[i * c..(i + 1) * c].to_vec();
            row.push(0.0);
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            expect += (lse - row[labels[i]]) / n as f64;
        }
        let mut g = Graph::new();
        let x = g.var(Tensor::matrix(n, c, logits).unwrap());
        let ce = cross_entropy_with_background(&mut g, x, &labels).unwrap();
        assert!((g.value(ce).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn bce_matches_formula() {
        let mut g = Graph::new();
        let z = [2.0, -1.0, 0.3];
        let y = [1.0, 0.0, 0.0];
        let x = g.var(Tensor::column(z.to_vec()));
        let l = bce_with_logits(&mut g, x, &y).unwrap();
        let expect: f64 = z
            .iter()
            .zip(&y)
            .map(|(&z, &y)| {
                let s = sigmoid(z);
                -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!((g.value(l).item() - expect).abs() < 1e-14);
    }

    #[test]
    fn hybrid_examples() {
        assert_eq!(hybrid(1.0, 2.0, 0.7, 0.3), 1.3);
        assert_eq!(hybrid(1.0, 1.0, 0.5, 0.5), 1.0);
        assert_eq!(hybrid(5.0, 2.0, 0.0, 1.0), 2.0);
        assert_eq!(hybrid(5.0, 2.0, 0.0, 0.3), 0.6);
        let mut g = Graph::new();
        let s = g.var(Tensor::scalar(1.0));
        let h = g.var(Tensor::scalar(2.0));
        let t = hybrid_op(&mut g, s, h, 0.7, 0.3).unwrap();
        assert_eq!(g.value(t).item(), 1.3);
        g.backward(t).unwrap();
        assert!((g.grad(s).unwrap()[0] - 0.7).abs() < 1e-15);
        assert!((g.grad(h).unwrap()[0] - 0.3).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn temperature_contracts(c in -20.0..20.0f64, t1 in 0.1..10.0f64, dt in 0.0..10.0f64) {
            let a = temp_sigmoid(c, t1).unwrap();
            let b = temp_sigmoid(c, t1 + dt).unwrap();
            prop_assert!((b - 0.5).abs() <= (a - 0.5).abs() + 1e-15);
            prop_assert!(temp_sigmoid(c + 0.1, t1).unwrap() >= a);
        }

        #[test]
        fn focal_nonnegative(s in 0.0..1.0f64, p in 0.0..1.0f64, fg in any::<bool>()) {
            let v = soft_focal_entry(s, p, fg, 0.25, 2.0).unwrap();
            prop_assert!(v >= 0.0 && v.is_finite());
            if fg && v == 0.0 {
                prop_assert!((s.clamp(PROB_EPS, 1.0 - PROB_EPS) - p.clamp(PROB_EPS, 1.0 - PROB_EPS)).abs() < 1e-12);
            }
        }

        #[test]
        fn hybrid_is_linear(s1 in 0.0..5.0f64, h1 in 0.0..5.0f64, s2 in 0.0..5.0f64, h2 in 0.0..5.0f64, a in 0.0..3.0f64) {
            let lhs = hybrid(s1 + a * s2, h1 + a * h2, 0.7, 0.3);
            let rhs = hybrid(s1, h1, 0.7, 0.3) + a * hybrid(s2, h2, 0.7, 0.3);
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
