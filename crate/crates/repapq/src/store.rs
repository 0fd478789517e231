//! Calibration targets spilled to disk, one raw tensor file per key.

use std::path::{Path, PathBuf};

use repapq_core::calib::TargetStore;
use repapq_core::{Error, Result, Tensor};

use crate::data;

#[derive(Debug)]
pub struct DiskStore {
    dir: PathBuf,
}

impl DiskStore {
    /// Uses `dir`, creating it if needed.
    pub fn new(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn file(&self, key: usize) -> PathBuf {
        self.dir.join(format!("target-{key:04}.rten"))
    }
}

impl TargetStore for DiskStore {
    fn put(&mut self, key: usize, value: Tensor) -> Result<()> {
        data::write_raw(&self.file(key), &value).map_err(|e| Error::Storage(e.to_string()))
    }

    fn get(&self, key: usize) -> Result<Tensor> {
        data::read_raw(&self.file(key)).map_err(|e| Error::Storage(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_get() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = DiskStore::new(&dir.path().join("spill")).unwrap();
        let t = Tensor::new(&[2, 1], vec![0.25, -1.0]).unwrap();
        s.put(3, t.clone()).unwrap();
        assert_eq!(s.get(3).unwrap(), t);
        assert!(matches!(s.get(4), Err(Error::Storage(_))));
    }
}
