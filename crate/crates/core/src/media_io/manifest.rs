use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_clip, FrameClip, LandmarkTrack, MediaError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub frames_path: PathBuf,
    pub landmarks_path: PathBuf,
    /// 0 real, 1 fake.
    pub label: u8,
    pub split: Split,
}

/// Clip list; relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipManifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    root: PathBuf,
}

impl ClipManifest {
    pub fn new(entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Result<Self, MediaError> {
        let m = Self { entries, root: root.into() };
        m.validate_ids()?;
        Ok(m)
    }

    fn validate_ids(&self) -> Result<(), MediaError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.clip_id.as_str()) {
                return Err(MediaError::BadManifest(format!("duplicate clip_id {:?}", e.clip_id)));
            }
            if e.label > 1 {
                return Err(MediaError::BadManifest(format!("clip {:?} has label {}, expected 0 or 1", e.clip_id, e.label)));
            }
        }
        Ok(())
    }

    /// Parses and validates: unique ids, binary labels, existing paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MediaError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MediaError::io(path, e))?;
        let mut m: ClipManifest = serde_json::from_str(&text).map_err(|e| MediaError::BadManifest(e.to_string()))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate_ids()?;
        for e in &m.entries {
            for p in [&e.frames_path, &e.landmarks_path] {
                let full = m.resolve(p);
                if !full.exists() {
                    return Err(MediaError::BadManifest(format!("clip {:?}: {} does not exist", e.clip_id, full.display())));
                }
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MediaError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| MediaError::BadManifest(e.to_string()))?;
        fs::write(path, text).map_err(|e| MediaError::io(path, e))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Loads the entry's clip, using the manifest id as the clip id.
    pub fn load_entry(&self, e: &ManifestEntry) -> Result<(FrameClip, LandmarkTrack), MediaError> {
        let (mut clip, track) = load_clip(self.resolve(&e.frames_path), self.resolve(&e.landmarks_path))?;
        clip.clip_id = e.clip_id.clone();
        Ok((clip, track))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str) -> ManifestEntry {
        ManifestEntry {
            clip_id: id.into(),
            frames_path: PathBuf::from(id),
            landmarks_path: PathBuf::from(format!("{id}.csv")),
            label: 0,
            split: Split::Train,
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        assert!(matches!(ClipManifest::new(vec![entry("a"), entry("a")], "."), Err(MediaError::BadManifest(_))));
    }

    #[test]
    fn missing_paths_are_rejected_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let m = ClipManifest::new(vec![entry("a")], dir.path()).unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert!(matches!(ClipManifest::load(&path), Err(MediaError::BadManifest(_))));
        fs::create_dir(dir.path().join("a")).unwrap();
        fs::write(dir.path().join("a.csv"), "frame,index,x,y\n").unwrap();
        let back = ClipManifest::load(&path).unwrap();
        assert_eq!(back.entries, m.entries);
        assert_eq!(back.resolve(Path::new("a")), dir.path().join("a"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{"entries": [], "extra": 1}"#;
        assert!(serde_json::from_str::<ClipManifest>(text).is_err());
    }
}
