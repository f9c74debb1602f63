//! Scene files, datasets and atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use pcd_core::data::{decode_scene, encode_scene};
use pcd_core::LabeledScene;

use crate::error::{Error, Result};

pub const SCENE_EXT: &str = "pcs";

/// Writes `bytes` next to `path` under a temporary name and renames it into
/// place, so readers never see a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::malformed(path, "not a file path"))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save_scene(path: &Path, scene: &LabeledScene) -> Result<()> {
    atomic_write(path, &encode_scene(scene))
}

pub fn load_scene(path: &Path) -> Result<LabeledScene> {
    let bytes = read(path)?;
    decode_scene(&bytes).map_err(|e| Error::malformed(path, e.to_string()))
}

pub fn scene_file_name(seed: u64) -> String {
    format!("scene_{seed:06}.{SCENE_EXT}")
}

/// A directory of scene files, in file-name order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub names: Vec<String>,
    pub scenes: Vec<LabeledScene>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

pub fn scene_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == SCENE_EXT) {
            paths.push(p);
        }
    }
    paths.sort();
    Ok(paths)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let paths = scene_paths(dir)?;
    if paths.is_empty() {
        return Err(Error::malformed(dir, "no scene files"));
    }
    let mut names = Vec::with_capacity(paths.len());
    let mut scenes = Vec::with_capacity(paths.len());
    for p in paths {
        names.push(p.file_stem().unwrap_or_default().to_string_lossy().into_owned());
        scenes.push(load_scene(&p)?);
    }
    Ok(Dataset { names, scenes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use pcd_core::data::{generate_scene, SceneGenConfig};

    #[test]
    fn scene_round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate_scene(&SceneGenConfig::default(), 4).unwrap();
        let p = dir.path().join(scene_file_name(4));
        save_scene(&p, &scene).unwrap();
        assert_eq!(load_scene(&p).unwrap(), scene);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_scene(&p).unwrap_err().to_string();
        assert!(err.contains("byte"), "{err}");
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        atomic_write(&p, b"abc").unwrap();
        atomic_write(&p, b"de").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"de");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(atomic_write(&dir.path().join("missing/x.bin"), b"a").is_err());
    }
}
