//! Flat `key = value` configuration files.
//!
//! One file carries the network shape (unprefixed keys), the optimizer and
//! evaluation settings (`train.*`) and the scene generator (`data.*`, with one
//! `data.class.<name>` line per class giving the w, l and h ranges). Lists are
//! comma separated; lists of lists separate the inner lists with `;`. Every
//! key must be present, so a config file is a complete snapshot of a run.
//! `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use pcd_core::config::Value;
use pcd_core::data::{ClassSpec, SceneGenConfig};
use pcd_core::{PipelineConfig, TrainConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub data: SceneGenConfig,
}

const TRAIN: &str = "train.";
const DATA: &str = "data.";
const CLASS: &str = "data.class.";

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            train: TrainConfig::default(),
            data: SceneGenConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small widths and 16 m scenes: the desk-scale benchmark setting.
    pub fn toy() -> Self {
        Self {
            pipeline: PipelineConfig::toy(),
            train: TrainConfig {
                epochs: 20,
                batch_size: 4,
                eval_iou: vec![0.5, 0.25],
                ..TrainConfig::default()
            },
            data: SceneGenConfig {
                extent: [16.0, 16.0, 4.0],
                min_objects: 2,
                max_objects: 3,
                surface_density: 6.0,
                clutter_density: 0.3,
                noise_points: 20,
                ..SceneGenConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.data.classes.len() != self.pipeline.n_classes {
            return Err(Error::Config(format!(
                "n_classes is {} but {} data.class entries are given",
                self.pipeline.n_classes,
                self.data.classes.len()
            )));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.data.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Canonical text form. `parse(to_text(c)) == c` and the text is stable
    /// under a parse/print cycle.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.pipeline.fields() {
            let _ = writeln!(s, "{k} = {}", format_value(&v));
        }
        for (k, v) in self.train.fields() {
            let _ = writeln!(s, "{TRAIN}{k} = {}", format_value(&v));
        }
        for (k, v) in data_fields(&self.data) {
            let _ = writeln!(s, "{DATA}{k} = {}", format_value(&v));
        }
        for c in &self.data.classes {
            let _ = writeln!(
                s,
                "{CLASS}{} = {}, {}; {}, {}; {}, {}",
                c.name,
                fmt_f(c.w.0),
                fmt_f(c.w.1),
                fmt_f(c.l.0),
                fmt_f(c.l.1),
                fmt_f(c.h.0),
                fmt_f(c.h.1)
            );
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.data.classes.clear();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", ln + 1)))?;
            let (key, val) = (key.trim(), val.trim());
            if let Some(prev) = seen.insert(key.to_string(), ln + 1) {
                return Err(Error::Config(format!("line {}: key `{key}` repeats line {prev}", ln + 1)));
            }
            let at = |e: Error| Error::Config(format!("line {}: {e}", ln + 1));
            let core_at = |e: pcd_core::Error| Error::Config(format!("line {}: {e}", ln + 1));
            if let Some(name) = key.strip_prefix(CLASS) {
                cfg.data.classes.push(parse_class(name, val).map_err(at)?);
            } else if let Some(k) = key.strip_prefix(TRAIN) {
                let kind = lookup(&cfg.train.fields(), k).ok_or_else(|| unknown(key))?;
                cfg.train.set(k, parse_value(&kind, val).map_err(|e| named(key, e))?).map_err(core_at)?;
            } else if let Some(k) = key.strip_prefix(DATA) {
                let kind = lookup(&data_fields(&cfg.data), k).ok_or_else(|| unknown(key))?;
                set_data(&mut cfg.data, k, parse_value(&kind, val).map_err(|e| named(key, e))?).map_err(at)?;
            } else {
                let kind = lookup(&cfg.pipeline.fields(), key).ok_or_else(|| unknown(key))?;
                cfg.pipeline.set(key, parse_value(&kind, val).map_err(|e| named(key, e))?).map_err(core_at)?;
            }
        }
        for key in required_keys() {
            if !seen.contains_key(&key) {
                return Err(Error::Config(format!("missing config key `{key}`")));
            }
        }
        if cfg.data.classes.is_empty() {
            return Err(Error::Config(format!("missing config key `{CLASS}<name>`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every key a config file must define, apart from the class lines.
pub fn required_keys() -> Vec<String> {
    let mut keys: Vec<String> = PipelineConfig::default().fields().into_iter().map(|(k, _)| k.to_string()).collect();
    keys.extend(TrainConfig::default().fields().into_iter().map(|(k, _)| format!("{TRAIN}{k}")));
    keys.extend(data_fields(&SceneGenConfig::default()).into_iter().map(|(k, _)| format!("{DATA}{k}")));
    keys
}

fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown config key `{key}`"))
}

fn named(key: &str, e: Error) -> Error {
    Error::Config(format!("key `{key}`: {e}"))
}

fn lookup(fields: &[(&'static str, Value)], key: &str) -> Option<Value> {
    fields.iter().find(|(k, _)| *k == key).map(|(_, v)| v.clone())
}

fn data_fields(d: &SceneGenConfig) -> Vec<(&'static str, Value)> {
    vec![
        ("extent", Value::Floats(d.extent.to_vec())),
        ("min_objects", Value::Int(d.min_objects as u64)),
        ("max_objects", Value::Int(d.max_objects as u64)),
        ("surface_density", Value::Float(d.surface_density)),
        ("clutter_density", Value::Float(d.clutter_density)),
        ("noise_points", Value::Int(d.noise_points as u64)),
        ("occlusion", Value::Float(d.occlusion)),
    ]
}

fn set_data(d: &mut SceneGenConfig, key: &str, v: Value) -> Result<()> {
    match (key, v) {
        ("extent", Value::Floats(f)) if f.len() == 3 => d.extent = [f[0], f[1], f[2]],
        ("extent", _) => return Err(Error::Config("data.extent needs three values".into())),
        ("min_objects", Value::Int(i)) => d.min_objects = i as usize,
        ("max_objects", Value::Int(i)) => d.max_objects = i as usize,
        ("surface_density", Value::Float(f)) => d.surface_density = f,
        ("clutter_density", Value::Float(f)) => d.clutter_density = f,
        ("noise_points", Value::Int(i)) => d.noise_points = i as usize,
        ("occlusion", Value::Float(f)) => d.occlusion = f,
        (k, _) => return Err(unknown(k)),
    }
    Ok(())
}

fn parse_class(name: &str, val: &str) -> Result<ClassSpec> {
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(Error::Config(format!("bad class name `{name}`")));
    }
    let ranges: Vec<Vec<f64>> = val
        .split(';')
        .map(|part| part.split(',').map(|x| parse_f(x.trim())).collect::<Result<Vec<f64>>>())
        .collect::<Result<_>>()?;
    if ranges.len() != 3 || ranges.iter().any(|r| r.len() != 2) {
        return Err(Error::Config(format!(
            "class `{name}` needs `wmin, wmax; lmin, lmax; hmin, hmax`"
        )));
    }
    Ok(ClassSpec {
        name: name.to_string(),
        w: (ranges[0][0], ranges[0][1]),
        l: (ranges[1][0], ranges[1][1]),
        h: (ranges[2][0], ranges[2][1]),
    })
}

fn parse_f(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Config(format!("`{s}` is not a finite number")))
}

fn parse_u(s: &str) -> Result<u64> {
    s.parse::<u64>()
        .map_err(|_| Error::Config(format!("`{s}` is not a non-negative integer")))
}

fn list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| f(x.trim())).collect()
}

/// Parses `text` into the same variant as `template`.
fn parse_value(template: &Value, text: &str) -> Result<Value> {
    Ok(match template {
        Value::Int(_) => Value::Int(parse_u(text)?),
        Value::Float(_) => Value::Float(parse_f(text)?),
        Value::Bool(_) => match text {
            "true" => Value::Bool(true),
            "false" => Value::Bool(false),
            _ => return Err(Error::Config(format!("`{text}` is not true or false"))),
        },
        Value::Ints(_) => Value::Ints(list(text, |x| parse_u(x).map(|v| v as usize))?),
        Value::Floats(_) => Value::Floats(list(text, parse_f)?),
        Value::IntLists(_) => Value::IntLists(
            text.split(';')
                .map(|part| list(part.trim(), |x| parse_u(x).map(|v| v as usize)))
                .collect::<Result<_>>()?,
        ),
    })
}

/// Shortest text that parses back to the same bits; never locale dependent.
pub fn fmt_f(v: f64) -> String {
    let s = format!("{v:?}");
    s.strip_suffix(".0").map(str::to_string).unwrap_or(s)
}

fn join<T>(xs: &[T], f: impl Fn(&T) -> String) -> String {
    xs.iter().map(f).collect::<Vec<_>>().join(", ")
}

fn format_value(v: &Value) -> String {
    match v {
        Value::Int(i) => i.to_string(),
        Value::Float(f) => fmt_f(*f),
        Value::Bool(b) => b.to_string(),
        Value::Ints(xs) => join(xs, |x| x.to_string()),
        Value::Floats(xs) => join(xs, |x| fmt_f(*x)),
        Value::IntLists(ls) => ls.iter().map(|l| join(l, |x| x.to_string())).collect::<Vec<_>>().join("; "),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_byte_identically() {
        for cfg in [ExperimentConfig::default(), ExperimentConfig::toy()] {
            let text = cfg.to_text();
            let back = ExperimentConfig::parse(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_text(), text);
        }
    }

    #[test]
    fn float_text_is_exact() {
        for v in [0.1, 1e-8, 2.5e30, -0.0, 1.0 / 3.0, 40.0] {
            assert_eq!(parse_f(&fmt_f(v)).unwrap().to_bits(), v.to_bits());
        }
        assert_eq!(fmt_f(40.0), "40");
        assert_eq!(fmt_f(0.4), "0.4");
    }

    #[test]
    fn missing_key_is_named() {
        let text: String = ExperimentConfig::default()
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("partial_k "))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("`partial_k`"), "{err}");
    }

    #[test]
    fn unknown_and_duplicate_keys_fail() {
        let base = ExperimentConfig::default().to_text();
        let err = ExperimentConfig::parse(&format!("{base}partial_kk = 3\n")).unwrap_err().to_string();
        assert!(err.contains("partial_kk"), "{err}");
        let err = ExperimentConfig::parse(&format!("{base}train.lr = 0.5\n")).unwrap_err().to_string();
        assert!(err.contains("repeats"), "{err}");
    }

    #[test]
    fn comments_blank_lines_and_type_errors() {
        let text = ExperimentConfig::default().to_text().replace("temperature = 3", "temperature = 3 # soft labels\n\n");
        assert_eq!(ExperimentConfig::parse(&text).unwrap().pipeline.temperature, 3.0);
        let bad = ExperimentConfig::default().to_text().replace("temperature = 3", "temperature = warm");
        let err = ExperimentConfig::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("temperature"), "{err}");
    }

    #[test]
    fn class_count_must_match() {
        let text: String = ExperimentConfig::default()
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("data.class.cyclist"))
            .map(|l| format!("{l}\n"))
            .collect();
        assert!(ExperimentConfig::parse(&text).is_err());
    }
}
