use std::path::Path;

use super::labels::NUM_CLASSES;
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// One clip in a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub source_id: String,
    pub start_s: f64,
    pub y: [u8; NUM_CLASSES],
    /// Path to the serialized frames, relative to the manifest.
    pub frames_path: String,
}

/// Dataset-level manifest written next to the serialized clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub window_s: f64,
    pub stride_s: f64,
    pub fps: u32,
    pub height: usize,
    pub width: usize,
    pub clips: Vec<ClipRecord>,
}

impl DatasetManifest {
    pub const VERSION: u32 = 1;

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::Format(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| CoreError::Format(e.to_string()))?;
        if manifest.version != Self::VERSION {
            return Err(CoreError::Format(format!(
                "unsupported manifest version {}",
                manifest.version
            )));
        }
        Ok(manifest)
    }

    /// Distinct episode ids in first-appearance order.
    pub fn episode_ids(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for c in &self.clips {
            if seen.insert(c.source_id.clone()) {
                out.push(c.source_id.clone());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips() {
        let m = DatasetManifest {
            version: DatasetManifest::VERSION,
            window_s: 3.0,
            stride_s: 3.0,
            fps: 25,
            height: 64,
            width: 64,
            clips: vec![ClipRecord {
                clip_id: "ep000-c0000".into(),
                source_id: "ep000".into(),
                start_s: 0.0,
                y: [0, 1, 0, 1],
                frames_path: "clips/ep000-c0000.bin".into(),
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(m, back);
        assert_eq!(back.episode_ids(), vec!["ep000".to_string()]);
    }
}
