use std::path::{Path, PathBuf};
use std::process::Command;

use pcd::files::load_dataset;
use pcd::metrics::write_predictions;
use pcd::textconfig::ExperimentConfig;
use pcd_core::boxes::ScoredBox;
use tempfile::TempDir;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn pcd<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_pcd"))
        .args(args)
        .env("PCD_THREADS", "2")
        .output()
        .unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Run {
    let r = pcd(args);
    assert_eq!(r.code, 0, "stdout: {}\nstderr: {}", r.stdout, r.stderr);
    r
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, cfg.to_text()).unwrap();
    path
}

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy();
    cfg.train.epochs = 1;
    cfg.train.batch_size = 2;
    cfg
}

fn scene_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "pcs"))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_writes_one_file_per_seed_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "toy.cfg", &tiny_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--config", p(&cfg), "--seeds", "0-9", "--out", p(&a)]);
    ok(&["gen-data", "--config", p(&cfg), "--seeds", "0-9", "--out", p(&b)]);
    let (fa, fb) = (scene_files(&a), scene_files(&b));
    assert_eq!(fa.len(), 10);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert!(manifest["end_unix"].is_u64());
}

#[test]
fn missing_config_key_is_named() {
    let dir = TempDir::new().unwrap();
    let text: String = tiny_config()
        .to_text()
        .lines()
        .filter(|l| !l.starts_with("partial_radius"))
        .map(|l| format!("{l}\n"))
        .collect();
    let cfg = dir.path().join("broken.cfg");
    std::fs::write(&cfg, text).unwrap();
    let r = pcd(&["gen-data", "--config", p(&cfg), "--seeds", "0", "--out", p(&dir.path().join("d"))]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("partial_radius"), "{}", r.stderr);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(pcd(&["no-such-command"]).code, 1);
    assert_eq!(pcd(&["gen-data", "--config", "x.cfg", "--seeds", "3-1", "--out", "y"]).code, 1);
    assert_eq!(pcd(&["eval", "--data", "d", "--model", "m", "--rp", "12"]).code, 1);
    assert_eq!(pcd(&["--help"]).code, 0);
}

fn eval_aps(data: &Path, preds: &Path, rp: &str, out: &Path) -> Vec<f64> {
    ok(&["eval", "--data", p(data), "--predictions", p(preds), "--rp", rp, "--out", p(out)]);
    std::fs::read_to_string(out)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("mean"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect()
}

#[test]
fn eval_scores_oracle_empty_and_partial_predictions() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "toy.cfg", &tiny_config());
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", p(&cfg), "--seeds", "0-7", "--out", p(&data)]);
    let ds = load_dataset(&data).unwrap();
    let oracle: Vec<ScoredBox> = ds
        .scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            s.boxes.iter().zip(&s.classes).map(move |(b, &c)| ScoredBox {
                scene: i,
                class: c,
                score: 0.9,
                bbox: *b,
            })
        })
        .collect();
    let path = dir.path().join("oracle.csv");
    write_predictions(&path, &ds.names, &oracle).unwrap();
    let aps = eval_aps(&data, &path, "40", &dir.path().join("o.csv"));
    assert_eq!(aps, vec![1.0, 1.0]);

    write_predictions(&path, &ds.names, &[]).unwrap();
    assert_eq!(eval_aps(&data, &path, "40", &dir.path().join("e.csv")), vec![0.0, 0.0]);

    // Every other true box plus confident misses placed far from any object.
    let mut mixed: Vec<ScoredBox> = oracle.iter().step_by(2).cloned().collect();
    for (k, b) in oracle.iter().enumerate().take(6) {
        let mut miss = b.bbox;
        miss.cx += 40.0;
        mixed.push(ScoredBox {
            score: 0.95 - 0.01 * k as f64,
            bbox: miss,
            ..b.clone()
        });
    }
    write_predictions(&path, &ds.names, &mixed).unwrap();
    let r11 = eval_aps(&data, &path, "11", &dir.path().join("m11.csv"));
    let r40 = eval_aps(&data, &path, "40", &dir.path().join("m40.csv"));
    assert!(r11.iter().chain(&r40).all(|&a| a > 0.0 && a < 1.0), "{r11:?} {r40:?}");
    assert_ne!(r11, r40);
}

#[test]
fn train_distill_eval_round_trip() {
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    let cfg = write_config(root, "toy.cfg", &tiny_config());
    let data = root.join("data");
    ok(&["gen-data", "--config", p(&cfg), "--seeds", "0-3", "--out", p(&data)]);
    let teacher = root.join("teacher");
    ok(&["train-teacher", "--data", p(&data), "--config", p(&cfg), "--out", p(&teacher), "--val", p(&data)]);
    let ckpt = teacher.join("teacher.ckpt");
    let log = std::fs::read_to_string(teacher.join("metrics.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.starts_with("epoch,lr,"));

    // A reloaded checkpoint gives the same numbers every time.
    let e1 = ok(&["eval", "--data", p(&data), "--model", p(&ckpt)]).stdout;
    let e2 = ok(&["eval", "--data", p(&data), "--model", p(&ckpt)]).stdout;
    assert_eq!(e1, e2);
    let preds = root.join("preds.csv");
    ok(&["predict", "--model", p(&ckpt), "--data", p(&data), "--out", p(&preds), "--score", "0"]);
    assert!(std::fs::read_to_string(&preds).unwrap().starts_with("scene,class,score"));

    let before = std::fs::read(&ckpt).unwrap();
    for (name, extra) in [("kd", None), ("nokd", Some("--no-kd"))] {
        let out = root.join(name);
        let mut args = vec!["distill", "--teacher", p(&ckpt), "--data", p(&data), "--config", p(&cfg), "--out", p(&out)];
        args.extend(extra);
        ok(&args);
        assert!(out.join("student.ckpt").exists());
        assert!(out.join("manifest.json").exists());
    }
    assert_eq!(std::fs::read(&ckpt).unwrap(), before);

    let mut other = tiny_config();
    other.pipeline.voxel_size = [0.5, 0.5, 0.5];
    let other_cfg = write_config(root, "other.cfg", &other);
    let r = pcd(&["distill", "--teacher", p(&ckpt), "--data", p(&data), "--config", p(&other_cfg), "--out", p(&root.join("bad"))]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("teacher/student config grid mismatch"), "{}", r.stderr);
}

#[test]
fn corrupt_inputs_are_validation_failures() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir(&data).unwrap();
    std::fs::write(data.join("scene_000000.pcs"), b"not a scene").unwrap();
    let ck = dir.path().join("m.ckpt");
    std::fs::write(&ck, b"PCD1 garbage").unwrap();
    let r = pcd(&["eval", "--data", p(&data), "--model", p(&ck)]);
    assert_eq!(r.code, 2, "{}", r.stderr);
}

#[test]
fn bench_reports_both_roles() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "toy.cfg", &tiny_config());
    let out = dir.path().join("bench.csv");
    ok(&["bench", "--config", p(&cfg), "--reps", "1", "--out", p(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("teacher"));
    assert!(text.lines().nth(2).unwrap().starts_with("student"));
}

#[test]
fn gradcheck_catches_injected_fault() {
    let r = pcd(&["gradcheck", "--inject-fault"]);
    assert_eq!(r.code, 2);
    assert!(r.stdout.contains("FAIL wrong_square"), "{}", r.stdout);
}
