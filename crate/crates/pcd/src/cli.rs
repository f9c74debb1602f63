//! The `pcd` command line.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use pcd_core::boxes::RecallPositions;
use pcd_core::data::generate_scene;
use pcd_core::gradcheck::{faulty_op_check, full_suite, GradCheckOptions};

use crate::bench;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::files::{atomic_write, create_dir, load_dataset, read_text, save_scene, scene_file_name, Dataset};
use crate::manifest::RunManifest;
use crate::metrics::{
    ap_per_class, ap_table_csv, ap_table_pretty, mean_ap, model_ap, predict_all, read_predictions, temperature_table_csv,
    write_predictions, TemperatureRow,
};
use crate::runs::{distill, train_teacher, METRICS_CSV, STUDENT_CKPT, TEACHER_CKPT};
use crate::textconfig::{fmt_f, ExperimentConfig};

pub const TEMPERATURE_TABLE: &str = "temperature_table.csv";

#[derive(Debug, Parser)]
#[command(name = "pcd", version, about = "Teacher/student point-cloud detector distillation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Write a complete config file with default values.
    DefaultConfig {
        /// Narrow networks and small scenes (the desk-scale setting).
        #[arg(long)]
        toy: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic scenes, one file per seed.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Seeds as a list of numbers and inclusive ranges, e.g. `0-9,20`.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the multi-scale teacher.
    TrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scenes for the per-epoch AP columns of the metrics log.
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Train a student against a frozen teacher.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Train on labels only (soft loss weight 0).
        #[arg(long)]
        no_kd: bool,
        /// Soft-label temperature; several values run a sweep.
        #[arg(long = "T", value_delimiter = ',', num_args = 1..)]
        temperature: Vec<f64>,
    },
    /// Average precision of a model or of a predictions file.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        model: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Class names and thresholds for a predictions file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// IoU threshold per class.
        #[arg(long, value_delimiter = ',')]
        iou: Vec<f64>,
        #[arg(long, default_value_t = 11)]
        rp: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write detections of a model on every scene of a dataset.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config's score threshold.
        #[arg(long)]
        score: Option<f64>,
    },
    /// Parameters, time, query counts and MACs of teacher and student.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every op and the full objective.
    Gradcheck {
        /// Append an op with a deliberately wrong backward rule.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// Parses `0-3,7` into `[0, 1, 2, 3, 7]`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Usage(format!("bad seed list `{s}`"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    let mut sorted = out.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != out.len() {
        return Err(Error::Usage(format!("seed list `{s}` repeats a seed")));
    }
    Ok(out)
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::parse(&read_text(path)?)
}

/// Caps the worker pool at `PCD_THREADS` when set.
fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PCD_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Usage(format!("PCD_THREADS must be a positive integer, got `{v}`")))?;
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn run(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let rest: Vec<String> = args.iter().skip(1).cloned().collect();
    match configure_threads().and_then(|()| dispatch(cli.cmd, &rest)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Cmd, args: &[String]) -> Result<i32> {
    match cmd {
        Cmd::DefaultConfig { toy, out } => {
            let cfg = if toy { ExperimentConfig::toy() } else { ExperimentConfig::default() };
            match out {
                Some(p) => atomic_write(&p, cfg.to_text().as_bytes())?,
                None => print!("{}", cfg.to_text()),
            }
            Ok(0)
        }
        Cmd::GenData { config, seeds, out } => {
            let seeds = parse_seeds(&seeds)?;
            let cfg = load_config(&config)?;
            gen_data(&cfg, &seeds, &out, args)?;
            Ok(0)
        }
        Cmd::TrainTeacher { data, config, out, val } => {
            let cfg = load_config(&config)?;
            let train = load_dataset(&data)?;
            let val = val.as_deref().map(load_dataset).transpose()?;
            create_dir(&out)?;
            let mut man = RunManifest::begin(
                "train-teacher",
                args,
                cfg.to_text(),
                cfg.pipeline.seed,
                vec![TEACHER_CKPT.into(), METRICS_CSV.into()],
            );
            man.write(&out)?;
            let res = train_teacher(&cfg, &train, val.as_ref(), &out)?;
            let last = res.reports.last().map(|r| r.loss.total).unwrap_or(f64::NAN);
            println!("teacher trained for {} epochs, final loss {last:.4}", res.reports.len());
            man.finish(&out)?;
            Ok(0)
        }
        Cmd::Distill {
            teacher,
            data,
            config,
            out,
            val,
            no_kd,
            temperature,
        } => {
            let cfg = load_config(&config)?;
            let teacher = checkpoint::load(&teacher)?.model;
            let train = load_dataset(&data)?;
            let val = val.as_deref().map(load_dataset).transpose()?;
            run_distill(&cfg, &teacher, &train, val.as_ref(), &out, no_kd, &temperature, args)?;
            Ok(0)
        }
        Cmd::Eval {
            data,
            model,
            predictions,
            config,
            iou,
            rp,
            out,
        } => {
            let rp = RecallPositions::from_count(rp).map_err(|e| Error::Usage(e.to_string()))?;
            let data = load_dataset(&data)?;
            let (names, thresholds, aps) = match (model, predictions) {
                (Some(m), _) => {
                    let ck = checkpoint::load(&m)?;
                    let thr = if iou.is_empty() { ck.config.train.eval_iou.clone() } else { iou };
                    let aps = model_ap(&ck.model, &data.scenes, &thr, rp, ck.config.train.nms_iou)?;
                    (ck.config.class_names(), thr, aps)
                }
                (None, Some(p)) => {
                    let preds = read_predictions(&p, &data)?;
                    let cfg = config.as_deref().map(load_config).transpose()?;
                    let names = match &cfg {
                        Some(c) => c.class_names(),
                        None => {
                            let n = data
                                .scenes
                                .iter()
                                .flat_map(|s| s.classes.iter())
                                .chain(preds.iter().map(|p| &p.class))
                                .map(|&c| c as usize + 1)
                                .max()
                                .unwrap_or(1);
                            (0..n).map(|c| format!("class{c}")).collect()
                        }
                    };
                    let thr = match (iou.is_empty(), &cfg) {
                        (false, _) => iou,
                        (true, Some(c)) => c.train.eval_iou.clone(),
                        (true, None) => pcd_core::TrainConfig::default().eval_iou,
                    };
                    let aps = ap_per_class(&preds, &data.scenes, names.len(), &thr, rp);
                    (names, thr, aps)
                }
                (None, None) => return Err(Error::Usage("eval needs --model or --predictions".into())),
            };
            print!("{}", ap_table_pretty(&names, rp, &aps));
            if let Some(o) = out {
                atomic_write(&o, ap_table_csv(&names, &thresholds, rp, &aps).as_bytes())?;
            }
            Ok(0)
        }
        Cmd::Predict { model, data, out, score } => {
            let ck = checkpoint::load(&model)?;
            let data = load_dataset(&data)?;
            let thr = score.unwrap_or(ck.config.train.score_threshold);
            let preds = predict_all(&ck.model, &data.scenes, thr, ck.config.train.nms_iou)?;
            write_predictions(&out, &data.names, &preds)?;
            println!("{} detections over {} scenes", preds.len(), data.len());
            Ok(0)
        }
        Cmd::Bench { config, reps, out } => {
            let cfg = load_config(&config)?;
            let rows = bench::run(&cfg, reps)?;
            print!("{}", bench::to_table(&rows));
            if let Some(o) = out {
                atomic_write(&o, bench::to_csv(&rows).as_bytes())?;
            }
            Ok(0)
        }
        Cmd::Gradcheck { inject_fault } => {
            let opts = GradCheckOptions::default();
            let t0 = std::time::Instant::now();
            let mut report = full_suite(&opts)?;
            if inject_fault {
                report.outcomes.push(faulty_op_check(&opts)?);
            }
            let secs = t0.elapsed().as_secs_f64();
            println!(
                "{} checks, {} entries compared, {} skipped at kinks, {secs:.1} s",
                report.outcomes.len(),
                report.checked(),
                report.kinked()
            );
            if let Some(w) = report.worst() {
                println!("worst: {} relative error {:.3e}", w.name, w.max_rel_err);
            }
            for f in report.failures() {
                println!("FAIL {} relative error {:.3e} ({} entries)", f.name, f.max_rel_err, f.checked);
            }
            Ok(if report.passed() { 0 } else { 2 })
        }
    }
}

pub fn gen_data(cfg: &ExperimentConfig, seeds: &[u64], out: &Path, args: &[String]) -> Result<()> {
    cfg.validate()?;
    create_dir(out)?;
    let names: Vec<String> = seeds.iter().map(|&s| scene_file_name(s)).collect();
    let mut man = RunManifest::begin("gen-data", args, cfg.to_text(), seeds[0], names.clone());
    man.write(out)?;
    seeds.par_iter().zip(&names).try_for_each(|(&seed, name)| {
        let scene = generate_scene(&cfg.data, seed)?;
        save_scene(&out.join(name), &scene)
    })?;
    man.finish(out)?;
    println!("wrote {} scenes to {}", seeds.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn run_distill(
    cfg: &ExperimentConfig,
    teacher: &pcd_core::detector::DetectorModel,
    train: &Dataset,
    val: Option<&Dataset>,
    out: &Path,
    no_kd: bool,
    temperatures: &[f64],
    args: &[String],
) -> Result<Vec<TemperatureRow>> {
    create_dir(out)?;
    let sweep = temperatures.len() > 1;
    let temps: Vec<f64> = if temperatures.is_empty() {
        vec![cfg.pipeline.temperature]
    } else {
        temperatures.to_vec()
    };
    let eval_set = val.unwrap_or(train);
    let mut outputs = Vec::new();
    for &t in &temps {
        let dir = if sweep { format!("T{}/", fmt_f(t)) } else { String::new() };
        outputs.push(format!("{dir}{STUDENT_CKPT}"));
        outputs.push(format!("{dir}{METRICS_CSV}"));
    }
    if sweep {
        outputs.push(TEMPERATURE_TABLE.into());
    }
    let mut man = RunManifest::begin("distill", args, cfg.to_text(), cfg.pipeline.seed, outputs);
    man.write(out)?;
    let mut rows = Vec::new();
    for &t in &temps {
        let mut c = cfg.clone();
        c.pipeline.temperature = t;
        c.validate()?;
        let dir = if sweep { out.join(format!("T{}", fmt_f(t))) } else { out.to_path_buf() };
        let res = distill(&c, teacher, train, val, &dir, no_kd)?;
        let ap11 = model_ap(&res.model, &eval_set.scenes, &c.train.eval_iou, RecallPositions::R11, c.train.nms_iou)?;
        let ap40 = model_ap(&res.model, &eval_set.scenes, &c.train.eval_iou, RecallPositions::R40, c.train.nms_iou)?;
        println!("T = {}: mAP@11 {:.2}, mAP@40 {:.2}", fmt_f(t), 100.0 * mean_ap(&ap11), 100.0 * mean_ap(&ap40));
        rows.push(TemperatureRow {
            temperature: t,
            ap11,
            ap40,
        });
    }
    if sweep {
        atomic_write(&out.join(TEMPERATURE_TABLE), temperature_table_csv(&cfg.class_names(), &rows).as_bytes())?;
    }
    man.finish(out)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0-3,7").unwrap(), vec![0, 1, 2, 3, 7]);
        assert_eq!(parse_seeds("5").unwrap(), vec![5]);
        assert!(parse_seeds("3-1").is_err());
        assert!(parse_seeds("1,1").is_err());
        assert!(parse_seeds("x").is_err());
        assert!(parse_seeds("").is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(vec!["pcd".into(), "nope".into()]), 1);
        assert_eq!(run(vec!["pcd".into(), "eval".into(), "--data".into(), "x".into(), "--rp".into(), "12".into(), "--predictions".into(), "p".into()]), 1);
    }
}
