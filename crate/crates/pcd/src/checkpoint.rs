//! Model checkpoints.
//!
//! Layout (little-endian): magic `PCD1`; role byte (0 teacher, 1 student);
//! config text (u64 length + UTF-8); anchors (u64 count, 3 x f64 each); class
//! statistics (u64 classes, u64 dim, f64 values); parameters (u64 count, then
//! per parameter u64 name length, name, u64 rank, u64 dims, f64 values).

use std::path::Path;

use pcd_core::autodiff::Tensor;
use pcd_core::detector::{ClassStats, DetectorModel, Role};

use crate::error::{Error, Result};
use crate::files::{atomic_write, read};
use crate::textconfig::ExperimentConfig;

pub const MAGIC: &[u8; 4] = b"PCD1";

/// A model together with the experiment config it was trained under.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub model: DetectorModel,
}

pub fn encode(config: &ExperimentConfig, model: &DetectorModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(match model.role {
        Role::Teacher => 0,
        Role::Student => 1,
    });
    let text = config.to_text();
    put_u64(&mut out, text.len() as u64);
    out.extend_from_slice(text.as_bytes());
    put_u64(&mut out, model.anchors.len() as u64);
    for a in &model.anchors {
        a.iter().for_each(|&v| put_f64(&mut out, v));
    }
    put_u64(&mut out, model.stats.n_classes as u64);
    put_u64(&mut out, model.stats.dim as u64);
    model.stats.data.iter().for_each(|&v| put_f64(&mut out, v));
    let ids: Vec<_> = model.store.ids().collect();
    put_u64(&mut out, ids.len() as u64);
    for id in ids {
        let name = model.store.name(id);
        put_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        let t = model.store.value(id);
        put_u64(&mut out, t.shape().len() as u64);
        t.shape().iter().for_each(|&d| put_u64(&mut out, d as u64));
        t.data().iter().for_each(|&v| put_f64(&mut out, v));
    }
    out
}

pub fn decode(buf: &[u8]) -> std::result::Result<Checkpoint, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("bad magic at byte 0, expected PCD1".into());
    }
    let role = match r.take(1)?[0] {
        0 => Role::Teacher,
        1 => Role::Student,
        b => return Err(format!("unknown role byte {b} at byte 4")),
    };
    let n = r.len()?;
    let at = r.pos;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| format!("config text is not UTF-8 at byte {at}"))?;
    let config = ExperimentConfig::parse(text).map_err(|e| format!("embedded config: {e}"))?;
    let n_anchors = r.len()?;
    let mut anchors = Vec::with_capacity(n_anchors.min(1024));
    for _ in 0..n_anchors {
        anchors.push([r.f64()?, r.f64()?, r.f64()?]);
    }
    let (classes, dim) = (r.len()?, r.len()?);
    let count = classes.checked_mul(dim).ok_or("statistics size overflows")?;
    let stats_data = r.f64s(count)?;
    let at = r.pos;
    let stats = ClassStats::from_rows(classes, dim, stats_data).map_err(|e| format!("at byte {at}: {e}"))?;
    let mut model = DetectorModel::new(role, config.pipeline.clone(), anchors, 0).map_err(|e| e.to_string())?;
    if (stats.n_classes, stats.dim) != (model.stats.n_classes, model.stats.dim) {
        return Err(format!(
            "statistics are {}x{} but the config needs {}x{}",
            stats.n_classes, stats.dim, model.stats.n_classes, model.stats.dim
        ));
    }
    model.stats = stats;
    let n_params = r.len()?;
    if n_params != model.store.len() {
        return Err(format!("{n_params} parameters stored, the config defines {}", model.store.len()));
    }
    for _ in 0..n_params {
        let n = r.len()?;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| format!("parameter name is not UTF-8 at byte {at}"))?
            .to_string();
        let rank = r.len()?;
        if rank > 8 {
            return Err(format!("implausible rank {rank} before byte {}", r.pos));
        }
        let shape: Vec<usize> = (0..rank).map(|_| r.len()).collect::<std::result::Result<_, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("shape overflows")?;
        let data = r.f64s(numel)?;
        let at = r.pos;
        let t = Tensor::new(shape, data).map_err(|e| format!("before byte {at}: {e}"))?;
        model
            .store
            .set_value(&name, t)
            .map_err(|e| format!("parameter `{name}` ending at byte {at}: {e}"))?;
    }
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes at byte {}", buf.len() - r.pos, r.pos));
    }
    Ok(Checkpoint { config, model })
}

pub fn save(path: &Path, config: &ExperimentConfig, model: &DetectorModel) -> Result<()> {
    atomic_write(path, &encode(config, model))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = read(path)?;
    decode(&bytes).map_err(|msg| Error::malformed(path, msg))
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format!("truncated at byte {}: need {n} more bytes, {} left", self.pos, self.buf.len() - self.pos)
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// A count that must fit in the remaining bytes at one byte per item.
    fn len(&mut self) -> std::result::Result<usize, String> {
        let at = self.pos;
        let v = self.u64()?;
        if v > (self.buf.len() - self.pos) as u64 && v > 64 {
            return Err(format!("count {v} at byte {at} exceeds the file size"));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        (0..n).map(|_| self.f64()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> (ExperimentConfig, DetectorModel) {
        let cfg = ExperimentConfig::toy();
        let anchors = cfg.data.classes.iter().map(|c| c.mean_size()).collect();
        let mut m = DetectorModel::new(Role::Teacher, cfg.pipeline.clone(), anchors, 7).unwrap();
        m.stats.data[3] = 0.25;
        (cfg, m)
    }

    #[test]
    fn round_trip_is_exact() {
        let (cfg, m) = model();
        let bytes = encode(&cfg, &m);
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.model.stats, m.stats);
        assert_eq!(ck.model.anchors, m.anchors);
        for id in m.store.ids() {
            let name = m.store.name(id);
            let other = ck.model.store.value(ck.model.store.id(name).unwrap());
            assert_eq!(other, m.store.value(id), "{name}");
        }
        assert_eq!(encode(&ck.config, &ck.model), bytes);
    }

    #[test]
    fn corruption_is_reported() {
        let (cfg, m) = model();
        let bytes = encode(&cfg, &m);
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = decode(&bytes[..cut]).unwrap_err();
            assert!(err.contains("byte") || err.contains("config"), "{cut}: {err}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).unwrap_err().contains("trailing"));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().contains("magic"));
    }
}
