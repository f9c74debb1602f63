//! Central finite-difference checks of every backward rule and of the whole
//! training objective.
//!
//! An entry whose `±h` probes change the graph's branch signature straddles a
//! kink (a relu crossing zero, a new max winner, a different clipping case).
//! The probe is retried with `h/10` and `h/100`; if all three straddle, the
//! entry is counted as kinked and skipped.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::autodiff::{Graph, Linear, Mlp, ParamStore, Tensor, Var};
use crate::boxes::{corner_loss_op, iou_op};
use crate::config::PipelineConfig;
use crate::data::{generate_scene, SceneGenConfig};
use crate::detector::{classify_with_stats, scene_loss, teacher_targets, ClassStats, DetectorModel, Role, Targets};
use crate::error::{Error, Result};
use crate::losses::{
    bce_with_logits, clamp_op, cross_entropy_with_background, hybrid_op, loc_terms, soft_focal, temp_sigmoid_op,
    vote_loss,
};
use crate::repository::{
    fuse_repository, voxelize_mean, EncoderDecoder, Fusion, SparseConv, SparseKnowledge, Support,
};
use crate::rng::SeededRng;
use crate::sampling::{aggregate_groups, ball_query, QueryCounter};
use crate::types::LabeledScene;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Largest accepted relative error.
    pub tol: f64,
    /// Denominator floor of the relative error, so that two gradients that
    /// are both near zero compare by absolute difference.
    pub floor: f64,
    /// Entries probed per tensor (all entries of smaller tensors).
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            tol: 1e-4,
            floor: 1e-6,
            max_entries: 6,
            seed: 0,
        }
    }
}

/// Result for one checked op or parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub checked: usize,
    pub kinked: usize,
    pub max_rel_err: f64,
    /// `(input or tensor index, flat entry, analytic, numeric)` of the worst
    /// entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub passed: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn worst(&self) -> Option<&CheckOutcome> {
        self.outcomes
            .iter()
            .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap_or(core::cmp::Ordering::Equal))
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.outcomes.iter().filter(|o| !o.passed)
    }

    pub fn checked(&self) -> usize {
        self.outcomes.iter().map(|o| o.checked).sum()
    }

    pub fn kinked(&self) -> usize {
        self.outcomes.iter().map(|o| o.kinked).sum()
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn sample_entries(n: usize, k: usize, rng: &mut SeededRng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut all: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut all);
    all.truncate(k);
    all.sort_unstable();
    all
}

struct Tally {
    name: String,
    checked: usize,
    kinked: usize,
    max_rel_err: f64,
    worst: Option<(usize, usize, f64, f64)>,
}

impl Tally {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            checked: 0,
            kinked: 0,
            max_rel_err: 0.0,
            worst: None,
        }
    }

    /// Probes one entry. `eval(delta)` returns the loss and branch signature
    /// with the entry shifted by `delta`.
    fn probe(
        &mut self,
        opts: &GradCheckOptions,
        tensor: usize,
        entry: usize,
        analytic: f64,
        base: (f64, u64),
        eval: &mut dyn FnMut(f64) -> Result<(f64, u64)>,
    ) -> Result<()> {
        let (f0, base_sig) = base;
        let mut h = opts.h;
        for _ in 0..3 {
            let (fp, sp) = eval(h)?;
            let (fm, sm) = eval(-h)?;
            if sp == base_sig && sm == base_sig {
                return self.record(tensor, entry, analytic, (fp - fm) / (2.0 * h), opts);
            }
            h /= 10.0;
        }
        // The unperturbed point sits on a kink. The backward rule picks one
        // side; accept a second-order one-sided difference from a side that
        // shares the unperturbed branch.
        let h = opts.h;
        for side in [1.0, -1.0] {
            let (f1, s1) = eval(side * h)?;
            let (f2, s2) = eval(2.0 * side * h)?;
            if s1 == base_sig && s2 == base_sig {
                let numeric = side * (4.0 * f1 - f2 - 3.0 * f0) / (2.0 * h);
                return self.record(tensor, entry, analytic, numeric, opts);
            }
        }
        self.kinked += 1;
        Ok(())
    }

    fn record(&mut self, tensor: usize, entry: usize, analytic: f64, numeric: f64, opts: &GradCheckOptions) -> Result<()> {
        if !numeric.is_finite() {
            return Err(Error::NonFinite("finite difference"));
        }
        let e = rel_err(analytic, numeric, opts.floor);
        self.checked += 1;
        if e >= self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = e;
            self.worst = Some((tensor, entry, analytic, numeric));
        }
        Ok(())
    }

    fn finish(self, opts: &GradCheckOptions) -> CheckOutcome {
        CheckOutcome {
            passed: self.max_rel_err < opts.tol && self.checked > 0,
            name: self.name,
            checked: self.checked,
            kinked: self.kinked,
            max_rel_err: self.max_rel_err,
            worst: self.worst,
        }
    }
}

/// Scalar objective of a possibly non-scalar output: the sum of the output
/// weighted by fixed pseudo-random coefficients.
fn reduce(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    if g.value(out).numel() == 1 {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = SeededRng::new(seed ^ 0x5eed);
    let w = Tensor::new(shape, (0..n).map(|_| rng.range(0.5, 1.5)).collect())?;
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

pub type BuildFn<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Checks the gradient of `build` with respect to each of its inputs.
pub fn check_op(name: &str, opts: &GradCheckOptions, inputs: &[Tensor], build: &BuildFn) -> Result<CheckOutcome> {
    let run = |vals: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.var(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let loss = reduce(&mut g, out, opts.seed)?;
        Ok((g, vars, loss))
    };
    let (mut g, vars, loss) = run(inputs)?;
    let base = (g.value(loss).item(), g.branch_signature());
    g.backward(loss)?;
    let grads: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let mut rng = SeededRng::new(opts.seed);
    let mut tally = Tally::new(name);
    for (ti, t) in inputs.iter().enumerate() {
        for e in sample_entries(t.numel(), opts.max_entries, &mut rng) {
            let mut eval = |d: f64| -> Result<(f64, u64)> {
                let mut moved = inputs.to_vec();
                moved[ti].data_mut()[e] += d;
                let (g, _, l) = run(&moved)?;
                Ok((g.value(l).item(), g.branch_signature()))
            };
            tally.probe(opts, ti, e, grads[ti][e], base, &mut eval)?;
        }
    }
    Ok(tally.finish(opts))
}

pub type LossFn<'a> = dyn Fn(&ParamStore) -> Result<(Graph, Var)> + 'a;

/// Checks the gradient of a scalar objective with respect to every tensor of
/// `store`; one outcome per tensor, named `{prefix}{tensor name}`.
pub fn check_params(prefix: &str, opts: &GradCheckOptions, store: &ParamStore, loss: &LossFn) -> Result<Vec<CheckOutcome>> {
    let (mut g, l) = loss(store)?;
    let base = (g.value(l).item(), g.branch_signature());
    g.backward(l)?;
    let mut grads = store.clone();
    grads.zero_grad();
    grads.absorb(&g);
    let mut work = store.clone();
    let mut rng = SeededRng::new(opts.seed);
    let mut out = Vec::new();
    for (ti, id) in store.ids().enumerate() {
        let mut tally = Tally::new(&format!("{prefix}{}", store.name(id)));
        for e in sample_entries(store.value(id).numel(), opts.max_entries, &mut rng) {
            let original = store.value(id).data()[e];
            let analytic = grads.grad(id)[e];
            let mut eval = |d: f64| -> Result<(f64, u64)> {
                work.value_mut(id).data_mut()[e] = original + d;
                let r = loss(&work);
                work.value_mut(id).data_mut()[e] = original;
                let (g, l) = r?;
                Ok((g.value(l).item(), g.branch_signature()))
            };
            tally.probe(opts, ti, e, analytic, base, &mut eval)?;
        }
        out.push(tally.finish(opts));
    }
    Ok(out)
}

fn uniform(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.range(lo, hi)).collect()).expect("shape matches")
}

/// Values bounded away from zero, for inputs of kinked ops.
fn away_from_zero(rng: &mut SeededRng, shape: &[usize], margin: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.range(margin, hi);
            if rng.bernoulli(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn random_boxes(rng: &mut SeededRng, n: usize) -> Tensor {
    let mut d = Vec::with_capacity(n * 7);
    for _ in 0..n {
        d.extend_from_slice(&[
            rng.range(-3.0, 3.0),
            rng.range(-3.0, 3.0),
            rng.range(0.5, 1.0),
            rng.range(0.6, 2.0),
            rng.range(1.0, 4.0),
            rng.range(1.0, 2.0),
            rng.range(-3.0, 3.0),
        ]);
    }
    Tensor::matrix(n, 7, d).expect("7 columns")
}

fn jitter_boxes(rng: &mut SeededRng, t: &Tensor) -> Tensor {
    let mut d = t.data().to_vec();
    for row in d.chunks_exact_mut(7) {
        for v in &mut row[..3] {
            *v += rng.range(-0.3, 0.3);
        }
        for v in &mut row[3..6] {
            *v *= rng.range(0.85, 1.15);
        }
        row[6] += rng.range(-0.3, 0.3);
    }
    Tensor::matrix(t.rows(), 7, d).expect("7 columns")
}

fn random_support(rng: &mut SeededRng, n: usize) -> Support {
    Support::from_keys((0..n).map(|_| [rng.index(6) as i64, rng.index(6) as i64, rng.index(3) as i64]))
}

/// One check per differentiable primitive, with randomized inputs placed
/// away from kinks where the op has them.
pub fn primitive_suite(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = SeededRng::new(opts.seed);
    let mut outcomes = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor>, build: Box<BuildFn>| -> Result<()> {
        outcomes.push(check_op(name, opts, &inputs, build.as_ref())?);
        Ok(())
    };
    let r = &mut rng;
    let m34 = |r: &mut SeededRng| uniform(r, &[3, 4], -1.0, 1.0);

    run("add", vec![m34(r), m34(r)], Box::new(|g, v| g.add(v[0], v[1])))?;
    run("sub", vec![m34(r), m34(r)], Box::new(|g, v| g.sub(v[0], v[1])))?;
    run("mul", vec![m34(r), m34(r)], Box::new(|g, v| g.mul(v[0], v[1])))?;
    run("scale", vec![m34(r)], Box::new(|g, v| Ok(g.scale(v[0], -1.7))))?;
    run("neg", vec![m34(r)], Box::new(|g, v| Ok(g.neg(v[0]))))?;
    run("add_scalar", vec![m34(r)], Box::new(|g, v| Ok(g.add_scalar(v[0], 0.3))))?;
    run(
        "add_row",
        vec![m34(r), uniform(r, &[1, 4], -1.0, 1.0)],
        Box::new(|g, v| g.add_row(v[0], v[1])),
    )?;
    run(
        "mul_col",
        vec![m34(r), uniform(r, &[3, 1], -1.0, 1.0)],
        Box::new(|g, v| g.mul_col(v[0], v[1])),
    )?;
    run(
        "mul_row",
        vec![m34(r), uniform(r, &[1, 4], -1.0, 1.0)],
        Box::new(|g, v| g.mul_row(v[0], v[1])),
    )?;
    run(
        "matmul",
        vec![m34(r), uniform(r, &[4, 5], -1.0, 1.0)],
        Box::new(|g, v| g.matmul(v[0], v[1])),
    )?;
    run("relu", vec![away_from_zero(r, &[3, 4], 0.05, 1.0)], Box::new(|g, v| Ok(g.relu(v[0]))))?;
    run("sigmoid", vec![uniform(r, &[3, 4], -3.0, 3.0)], Box::new(|g, v| Ok(g.sigmoid(v[0]))))?;
    run("exp", vec![m34(r)], Box::new(|g, v| Ok(g.exp(v[0]))))?;
    run("log", vec![uniform(r, &[3, 4], 0.3, 3.0)], Box::new(|g, v| Ok(g.log(v[0]))))?;
    run("sin", vec![uniform(r, &[3, 4], -3.0, 3.0)], Box::new(|g, v| Ok(g.sin(v[0]))))?;
    run("cos", vec![uniform(r, &[3, 4], -3.0, 3.0)], Box::new(|g, v| Ok(g.cos(v[0]))))?;
    run(
        "atan2",
        vec![away_from_zero(r, &[3, 4], 0.2, 1.0), away_from_zero(r, &[3, 4], 0.2, 1.0)],
        Box::new(|g, v| g.atan2(v[0], v[1])),
    )?;
    {
        // both regions of the smooth-L1
        let inner = away_from_zero(r, &[2, 4], 0.05, 0.9);
        let outer = away_from_zero(r, &[2, 4], 1.1, 3.0);
        let both = Tensor::matrix(4, 4, inner.data().iter().chain(outer.data()).copied().collect())?;
        run("smooth_l1", vec![both], Box::new(|g, v| Ok(g.smooth_l1(v[0], 1.0))))?;
    }
    run("sum", vec![m34(r)], Box::new(|g, v| Ok(g.sum(v[0]))))?;
    run("mean", vec![m34(r)], Box::new(|g, v| Ok(g.mean(v[0]))))?;
    run("sum_cols", vec![m34(r)], Box::new(|g, v| g.sum_cols(v[0])))?;
    run(
        "concat",
        vec![m34(r), uniform(r, &[3, 2], -1.0, 1.0)],
        Box::new(|g, v| g.concat(&[v[0], v[1]])),
    )?;
    run("slice_cols", vec![m34(r)], Box::new(|g, v| g.slice_cols(v[0], 1, 3)))?;
    run("reshape", vec![m34(r)], Box::new(|g, v| g.reshape(v[0], vec![2, 6])))?;
    run(
        "gather_rows",
        vec![m34(r)],
        Box::new(|g, v| g.gather_rows(v[0], vec![Some(2), None, Some(0), Some(2)])),
    )?;
    run(
        "scatter_mean",
        vec![uniform(r, &[5, 3], -1.0, 1.0)],
        Box::new(|g, v| g.scatter_mean(v[0], vec![1, 0, 1, 3, 1], 4)),
    )?;
    run(
        "segment_max",
        vec![uniform(r, &[7, 3], -1.0, 1.0)],
        Box::new(|g, v| g.segment_max(v[0], &[0, 3, 4, 7])),
    )?;
    run("log_softmax", vec![uniform(r, &[3, 4], -2.0, 2.0)], Box::new(|g, v| g.log_softmax(v[0])))?;
    run(
        "clamp",
        vec![uniform(r, &[3, 4], 0.05, 0.95)],
        Box::new(|g, v| Ok(clamp_op(g, v[0], 1e-7, 1.0 - 1e-7))),
    )?;
    run(
        "temp_sigmoid",
        vec![uniform(r, &[3, 2], -4.0, 4.0)],
        Box::new(|g, v| temp_sigmoid_op(g, v[0], 3.0)),
    )?;
    {
        let soft = uniform(r, &[4, 2], 0.05, 0.95);
        let mask = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0])?;
        run(
            "soft_focal",
            vec![uniform(r, &[4, 2], 0.05, 0.95)],
            Box::new(move |g, v| soft_focal(g, &soft, v[0], &mask, 0.25, 2.0)),
        )?;
    }
    run(
        "cross_entropy",
        vec![uniform(r, &[4, 2], -2.0, 2.0)],
        Box::new(|g, v| cross_entropy_with_background(g, v[0], &[0, 2, 1, 2])),
    )?;
    run(
        "bce_with_logits",
        vec![uniform(r, &[4, 1], -2.0, 2.0)],
        Box::new(|g, v| bce_with_logits(g, v[0], &[1.0, 0.0, 0.0, 1.0])),
    )?;
    {
        let target = uniform(r, &[3, 3], -1.0, 1.0);
        let mut votes = target.clone();
        let shift = away_from_zero(r, &[3, 3], 0.1, 2.0);
        for (v, s) in votes.data_mut().iter_mut().zip(shift.data()) {
            *v += s;
        }
        run("vote_loss", vec![votes], Box::new(move |g, v| vote_loss(g, v[0], &target)))?;
    }
    run(
        "hybrid",
        vec![uniform(r, &[1], 0.0, 2.0), uniform(r, &[1], 0.0, 2.0)],
        Box::new(|g, v| hybrid_op(g, v[0], v[1], 0.7, 0.3)),
    )?;
    {
        let target = random_boxes(r, 4);
        let pred = jitter_boxes(r, &target);
        let (t1, t2, t3, t4) = (target.clone(), target.clone(), target.clone(), target);
        run("iou3d", vec![pred.clone()], Box::new(move |g, v| iou_op(g, v[0], &t1, false)))?;
        run("cwiou", vec![pred.clone()], Box::new(move |g, v| iou_op(g, v[0], &t2, true)))?;
        run("corner_loss", vec![pred.clone()], Box::new(move |g, v| corner_loss_op(g, v[0], &t3)))?;
        run(
            "loc_terms",
            vec![pred],
            Box::new(move |g, v| {
                let t = loc_terms(g, v[0], &t4, true)?.expect("rows present");
                t.combine(g, 1.0, 1.0)
            }),
        )?;
    }

    // layers: gradients with respect to inputs and to weights
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 4, 3, r)?;
    let mlp = Mlp::new(&mut store, "mlp", 6, &[5, 4], true, r)?;
    let conv = SparseConv::new(&mut store, "conv", 3, 2, r)?;
    let ed = EncoderDecoder::new(&mut store, "ed", 3, &[4, 4, 5, 4, 4], r)?;
    let fusion = Fusion::new(&mut store, "fusion", 4, 3, 5, r)?;
    let head = Mlp::new(&mut store, "cls", 4, &[5, 1], false, r)?;
    let fine = random_support(r, 14);
    let coarse = fine.downsampled();
    let stats = ClassStats::from_rows(2, 4, (0..8).map(|_| r.range(0.5, 1.5)).collect())?;
    let coords: Vec<[f64; 3]> = (0..20).map(|_| [r.range(0.0, 2.0), r.range(0.0, 2.0), r.range(0.0, 1.0)]).collect();
    let centers: Vec<[f64; 3]> = coords[..4].to_vec();
    let groups = ball_query(&centers, &coords, 0.9, 6, &QueryCounter::new())?;
    let mut frozen = store.clone();
    frozen.freeze();
    {
        let fr = &frozen;
        run(
            "linear",
            vec![uniform(r, &[3, 4], -1.0, 1.0)],
            Box::new(move |g, v| lin.forward(g, fr, v[0])),
        )?;
        let mlp_c = mlp.clone();
        run(
            "aggregate_groups",
            vec![uniform(r, &[20, 3], -1.0, 1.0)],
            Box::new(move |g, v| aggregate_groups(g, fr, &mlp_c, &groups, &coords, Some(v[0]))),
        )?;
        let (f1, c1) = (fine.clone(), coarse.clone());
        run(
            "sparse_conv_down",
            vec![uniform(r, &[fine.len(), 3], -1.0, 1.0)],
            Box::new(move |g, v| conv.down(g, fr, v[0], &f1, &c1)),
        )?;
        let (f2, c2) = (fine.clone(), coarse.clone());
        run(
            "sparse_conv_up",
            vec![uniform(r, &[coarse.len(), 3], -1.0, 1.0)],
            Box::new(move |g, v| conv.up(g, fr, v[0], &c2, &f2)),
        )?;
        let f3 = fine.clone();
        let ed_c = ed.clone();
        run(
            "encoder_decoder",
            vec![uniform(r, &[fine.len(), 3], -1.0, 1.0)],
            Box::new(move |g, v| {
                let k = SparseKnowledge {
                    support: f3.clone(),
                    features: v[0],
                };
                ed_c.forward(g, fr, &k)
            }),
        )?;
        let c4: Vec<[f64; 3]> = fine.keys().iter().map(|k| [k[0] as f64 + 0.5, k[1] as f64 + 0.5, k[2] as f64 + 0.5]).collect();
        let fusion_c = fusion.clone();
        run(
            "fuse_repository",
            vec![
                uniform(r, &[fine.len(), 3], -1.0, 1.0),
                uniform(r, &[fine.len(), 4], -1.0, 1.0),
                uniform(r, &[fine.len(), 1], 0.0, 1.0),
            ],
            Box::new(move |g, v| {
                let repo = voxelize_mean(g, &c4, v[0], [1.0; 3])?;
                let fused = fuse_repository(g, fr, &fusion_c, &repo, v[1], v[2])?;
                Ok(fused.features)
            }),
        )?;
        let head_c = head.clone();
        let stats_c = stats.clone();
        run(
            "classify_with_stats",
            vec![uniform(r, &[3, 4], -1.0, 1.0)],
            Box::new(move |g, v| classify_with_stats(g, fr, &head_c, v[0], &stats_c)),
        )?;
    }

    // weight gradients of the layers
    let x_lin = uniform(r, &[3, 4], -1.0, 1.0);
    let x_mlp = uniform(r, &[4, 6], -1.0, 1.0);
    let x_conv = uniform(r, &[fine.len(), 3], -1.0, 1.0);
    let loss = |st: &ParamStore| -> Result<(Graph, Var)> {
        let mut g = Graph::new();
        let a = g.constant(x_lin.clone());
        let a = lin.forward(&mut g, st, a)?;
        let b = g.constant(x_mlp.clone());
        let b = mlp.forward(&mut g, st, b)?;
        let c = g.constant(x_conv.clone());
        let c = conv.down(&mut g, st, c, &fine, &coarse)?;
        let d = g.constant(x_conv.clone());
        let d = ed.forward(
            &mut g,
            st,
            &SparseKnowledge {
                support: fine.clone(),
                features: d,
            },
        )?;
        let mut parts = Vec::new();
        for (i, v) in [a, b, c, d].into_iter().enumerate() {
            let s = reduce(&mut g, v, opts.seed + i as u64)?;
            parts.push(s);
        }
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = g.add(total, p)?;
        }
        Ok((g, total))
    };
    let used: Vec<_> = ["lin.", "mlp.", "conv.", "ed."].to_vec();
    for o in check_params("weights:", opts, &store, &loss)? {
        if used.iter().any(|p| o.name["weights:".len()..].starts_with(p)) {
            outcomes.push(o);
        }
    }

    Ok(GradCheckReport { outcomes })
}

/// A small labelled scene for pipeline checks.
pub fn check_scene(seed: u64) -> Result<LabeledScene> {
    let cfg = SceneGenConfig {
        extent: [12.0, 12.0, 4.0],
        min_objects: 2,
        max_objects: 2,
        surface_density: 5.0,
        clutter_density: 0.3,
        noise_points: 10,
        ..SceneGenConfig::default()
    };
    generate_scene(&cfg, seed)
}

/// Gradient check of the complete training objective: the student's hybrid
/// loss against a frozen teacher, and the teacher's own supervised loss. The
/// sampling and grouping choices of the unperturbed pass are replayed so the
/// objective is a fixed function of the parameters.
pub fn pipeline_check(opts: &GradCheckOptions, cfg: &PipelineConfig) -> Result<GradCheckReport> {
    let scene = check_scene(opts.seed)?;
    let anchors = vec![[1.8, 4.0, 1.55], [0.65, 1.8, 1.7]];
    let mut cfg = cfg.clone();
    cfg.n_classes = anchors.len();
    let teacher = DetectorModel::new(Role::Teacher, cfg.clone(), anchors.clone(), opts.seed + 1)?;
    let student = DetectorModel::new(Role::Student, cfg.clone(), anchors, opts.seed + 2)?;
    let mut outcomes = Vec::new();

    let frozen = teacher.frozen();
    let mut g0 = Graph::new();
    let base = student.forward(&mut g0, &scene.cloud, Some(&scene), None)?;
    let plan = base.plan.clone();
    let soft = teacher_targets(&frozen, &scene, &base.partial)?;
    let student_loss = |st: &ParamStore| -> Result<(Graph, Var)> {
        let mut m = student.clone();
        m.store = st.clone();
        let mut g = Graph::new();
        let fw = m.forward(&mut g, &scene.cloud, Some(&scene), Some(&plan))?;
        let t = Targets::new(&fw, &scene, cfg.n_classes);
        let (lv, _) = scene_loss(&mut g, &cfg, &fw, &t, &scene, Some(&soft), cfg.lambda_soft, cfg.lambda_hard)?;
        Ok((g, lv.total))
    };
    outcomes.extend(check_params("student:", opts, &student.store, &student_loss)?);

    let mut g1 = Graph::new();
    let tplan = teacher.forward(&mut g1, &scene.cloud, Some(&scene), None)?.plan;
    let teacher_loss = |st: &ParamStore| -> Result<(Graph, Var)> {
        let mut m = teacher.clone();
        m.store = st.clone();
        let mut g = Graph::new();
        let fw = m.forward(&mut g, &scene.cloud, Some(&scene), Some(&tplan))?;
        let t = Targets::new(&fw, &scene, cfg.n_classes);
        let (lv, _) = scene_loss(&mut g, &cfg, &fw, &t, &scene, None, 0.0, 1.0)?;
        Ok((g, lv.total))
    };
    outcomes.extend(check_params("teacher:", opts, &teacher.store, &teacher_loss)?);
    Ok(GradCheckReport { outcomes })
}

/// Primitive suite followed by the pipeline check at toy widths.
pub fn full_suite(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut report = primitive_suite(opts)?;
    report.outcomes.extend(pipeline_check(opts, &PipelineConfig::toy())?.outcomes);
    Ok(report)
}

/// Negative control: `x²` with the backward rule of `x³`. The check must
/// fail and name this op.
pub fn faulty_op_check(opts: &GradCheckOptions) -> Result<CheckOutcome> {
    let mut rng = SeededRng::new(opts.seed);
    let x = uniform(&mut rng, &[2, 3], 0.5, 1.5);
    check_op("wrong_square", opts, &[x], &|g, v| {
        let src = g.value(v[0]).clone();
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|a| a * a).collect())?;
        Ok(g.custom(
            "wrong_square",
            &[v[0]],
            value,
            Box::new(move |adj, grads| {
                for (k, a) in adj.iter().enumerate() {
                    grads[0][k] += a * 3.0 * src.data()[k] * src.data()[k];
                }
            }),
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass() {
        let report = primitive_suite(&GradCheckOptions::default()).unwrap();
        for o in &report.outcomes {
            assert!(o.passed, "{o:?}");
        }
        assert!(report.outcomes.len() > 40);
    }

    #[test]
    fn wrong_backward_is_caught_and_named() {
        let o = faulty_op_check(&GradCheckOptions::default()).unwrap();
        assert!(!o.passed);
        assert_eq!(o.name, "wrong_square");
        let mut report = primitive_suite(&GradCheckOptions::default()).unwrap();
        report.outcomes.push(o);
        assert!(!report.passed());
        assert_eq!(report.worst().unwrap().name, "wrong_square");
    }

    #[test]
    fn pipeline_passes_at_toy_width() {
        let report = pipeline_check(&GradCheckOptions::default(), &PipelineConfig::toy()).unwrap();
        for o in &report.outcomes {
            assert!(o.passed, "{o:?}");
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_err(1e-12, 0.0, 1e-6), 1e-6);
        assert!((rel_err(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
    }
}
