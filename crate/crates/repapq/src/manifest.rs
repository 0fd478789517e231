//! TOML model manifests.
//!
//! ```toml
//! format = "repapq-manifest/1"
//! name = "desk-reference"
//! input = [3, 32, 32]
//! classes = 10
//!
//! [[stages]]
//! [[stages.blocks]]
//! in_channels = 3
//! out_channels = 16
//! stride = 2
//! norm = "pre-add"            # or "post-add"
//! branches = ["conv3x3", "conv1x1"]
//! bn_eps = 1e-5               # optional
//! groups = 1                  # optional, only 1 is accepted
//! fused = false               # optional
//! affine = true               # fused blocks only: channel affine present, value = enabled
//! quant = { weight_bits = 8, act_bits = 8 }   # fused blocks only
//!
//! [head]
//! quant = { weight_bits = 8, act_bits = 8 }   # optional
//! ```

use std::path::Path;

use repapq_core::graph::ModelGraph;
use repapq_core::topology::{Topology, MANIFEST_FORMAT};

use crate::error::{Error, Result};

/// Canonical text of a topology.
pub fn to_string(topology: &Topology) -> String {
    toml::to_string(topology).expect("topology serializes to TOML")
}

pub fn parse(text: &str, path: &Path) -> Result<Topology> {
    let err = |message: String| Error::Manifest {
        path: path.to_path_buf(),
        message,
    };
    let table: toml::Table = toml::from_str(text).map_err(|e| err(e.to_string()))?;
    match table.get("format").and_then(|v| v.as_str()) {
        Some(MANIFEST_FORMAT) => {}
        found => {
            let line = text
                .lines()
                .position(|l| l.trim_start().starts_with("format"))
                .map_or(String::new(), |i| format!("line {}: ", i + 1));
            return Err(err(format!(
                "{line}unsupported manifest format {found:?}, expected {MANIFEST_FORMAT:?}"
            )));
        }
    }
    toml::from_str(text).map_err(|e| err(e.to_string()))
}

pub fn read_topology(path: &Path) -> Result<Topology> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

/// Loads a manifest into a graph with zero weights.
pub fn load_manifest(path: &Path) -> Result<ModelGraph> {
    read_topology(path)?.build().map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn save_manifest(graph: &ModelGraph, path: &Path) -> Result<()> {
    write_topology(&graph.topology(), path)
}

pub fn write_topology(topology: &Topology, path: &Path) -> Result<()> {
    std::fs::write(path, to_string(topology)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
format = "repapq-manifest/1"
name = "tiny"
input = [3, 8, 8]
classes = 4

[[stages]]
[[stages.blocks]]
in_channels = 3
out_channels = 5
stride = 1
norm = "pre-add"
branches = ["conv3x3", "conv1x1"]
"#;

    #[test]
    fn minimal_manifest() {
        let g = parse(MINIMAL, Path::new("m")).unwrap().build().unwrap();
        assert_eq!(g.num_blocks(), 1);
        assert_eq!(g.head.classes(), 4);
    }

    #[test]
    fn unknown_field_has_location() {
        let text = MINIMAL.replace("stride = 1", "stride = 1\nkernel = 3");
        let msg = parse(&text, Path::new("m")).unwrap_err().to_string();
        assert!(msg.contains("kernel"), "{msg}");
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn version_rejected_with_line() {
        let text = MINIMAL.replace("repapq-manifest/1", "repapq-manifest/9");
        let msg = parse(&text, Path::new("m")).unwrap_err().to_string();
        assert!(msg.contains("line 2") && msg.contains("manifest/9"), "{msg}");
    }

    #[test]
    fn desk_reference_is_canonical() {
        let t = Topology::desk_reference();
        let text = to_string(&t);
        let back = parse(&text, Path::new("m")).unwrap();
        assert_eq!(back, t);
        assert_eq!(to_string(&back), text);
    }
}
