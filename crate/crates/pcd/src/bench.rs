//! Complexity comparison of the two roles on one generated scene.

use std::time::Instant;

use pcd_core::autodiff::Graph;
use pcd_core::data::generate_scene;
use pcd_core::detector::{predict, DetectorModel, QueryCounts, Role};

use crate::error::Result;
use crate::textconfig::ExperimentConfig;

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub role: Role,
    pub params: usize,
    /// Median inference time per scene.
    pub wall_ms: f64,
    pub queries: QueryCounts,
    /// Multiply-accumulates of one forward pass.
    pub macs: u64,
}

pub fn anchors_from_config(cfg: &ExperimentConfig) -> Vec<[f64; 3]> {
    cfg.data.classes.iter().map(|c| c.mean_size()).collect()
}

pub fn run(cfg: &ExperimentConfig, reps: usize) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let scene = generate_scene(&cfg.data, cfg.pipeline.seed)?;
    let anchors = anchors_from_config(cfg);
    let mut rows = Vec::new();
    for role in [Role::Teacher, Role::Student] {
        let model = DetectorModel::new(role, cfg.pipeline.clone(), anchors.clone(), cfg.pipeline.seed)?;
        let mut g = Graph::new();
        let fw = model.forward(&mut g, &scene.cloud, None, None)?;
        let mut times = Vec::with_capacity(reps.max(1));
        for _ in 0..reps.max(1) {
            let t0 = Instant::now();
            predict(&model, &scene.cloud, cfg.train.score_threshold, cfg.train.nms_iou)?;
            times.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            role,
            params: model.num_params(),
            wall_ms: times[times.len() / 2],
            queries: fw.queries,
            macs: g.macs(),
        });
    }
    Ok(rows)
}

pub const BENCH_HEADER: &str = "role,params,wall_ms,repo_queries,partial_queries,object_queries,macs";

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.3},{},{},{},{}\n",
            r.role.as_str(),
            r.params,
            r.wall_ms,
            r.queries.repo_init,
            r.queries.partial,
            r.queries.object,
            r.macs
        ));
    }
    s
}

pub fn to_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:<8} {:>10} {:>10} {:>8} {:>8} {:>8} {:>14}\n",
        "role", "params", "ms/scene", "repo_q", "part_q", "obj_q", "MACs"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<8} {:>10} {:>10.2} {:>8} {:>8} {:>8} {:>14}\n",
            r.role.as_str(),
            r.params,
            r.wall_ms,
            r.queries.repo_init,
            r.queries.partial,
            r.queries.object,
            r.macs
        ));
    }
    s
}
