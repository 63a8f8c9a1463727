use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::media_io::{gen_copy_paste_fake, gen_swap_donor, gen_synthetic_clip, save_clip, ClipManifest, FrameClip, LandmarkTrack, ManifestEntry, SeedPolicy, Split};

/// Sizes of a procedural dataset. Train clips are all real; val and test
/// fakes are naive copy-paste blends of an aligned donor identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub landmarks: usize,
    pub train_real: usize,
    pub val_real: usize,
    pub val_fake: usize,
    pub test_real: usize,
    pub test_fake: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { frames: 8, height: 32, width: 32, landmarks: 16, train_real: 64, val_real: 8, val_fake: 8, test_real: 16, test_fake: 16, seed: 0 }
    }
}

impl DatasetSpec {
    /// `(clip_id, split, label)` for every clip, in manifest order.
    pub fn plan(&self) -> Vec<(String, Split, u8)> {
        let groups = [
            ("train_r", Split::Train, 0, self.train_real),
            ("val_r", Split::Val, 0, self.val_real),
            ("val_f", Split::Val, 1, self.val_fake),
            ("test_r", Split::Test, 0, self.test_real),
            ("test_f", Split::Test, 1, self.test_fake),
        ];
        groups.iter().flat_map(|&(prefix, split, label, n)| (0..n).map(move |i| (format!("{prefix}{i:03}"), split, label))).collect()
    }

    /// Builds one clip of the plan in memory.
    pub fn make_clip(&self, clip_id: &str, label: u8) -> Result<(FrameClip, LandmarkTrack), HarnessError> {
        let seeds = SeedPolicy::new(self.seed);
        let (f, h, w, n) = (self.frames, self.height, self.width, self.landmarks);
        let scene = seeds.derive(clip_id, "scene");
        let (mut clip, track) = gen_synthetic_clip(scene, f, h, w, n)?;
        if label == 1 {
            let donor = gen_swap_donor(scene, seeds.derive(clip_id, "donor"), f, h, w, n)?;
            clip = gen_copy_paste_fake(&clip, &track, &donor, seeds.derive(clip_id, "paste"))?;
        }
        clip.clip_id = clip_id.to_string();
        Ok((clip, track))
    }
}

/// Writes every clip under `out/clips/<id>/` and the manifest to
/// `out/manifest.json`.
pub fn gen_synthetic_dataset(spec: &DatasetSpec, out: impl AsRef<Path>) -> Result<ClipManifest, HarnessError> {
    let out = out.as_ref();
    let mut entries = Vec::new();
    for (id, split, label) in spec.plan() {
        let (clip, track) = spec.make_clip(&id, label)?;
        let rel = PathBuf::from("clips").join(&id);
        let (frames, landmarks) = (rel.join("frames"), rel.join("landmarks.csv"));
        save_clip(&clip, Some(&track), out.join(&frames), Some(&out.join(&landmarks)))?;
        entries.push(ManifestEntry { clip_id: id, frames_path: frames, landmarks_path: landmarks, label, split });
    }
    let manifest = ClipManifest::new(entries, out)?;
    manifest.save(out.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_a_loadable_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec { frames: 4, train_real: 2, val_real: 1, val_fake: 1, test_real: 1, test_fake: 1, ..Default::default() };
        let m = gen_synthetic_dataset(&spec, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 6);
        let loaded = ClipManifest::load(dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.entries, m.entries);
        let fake = loaded.entries.iter().find(|e| e.label == 1).unwrap();
        let (clip, track) = loaded.load_entry(fake).unwrap();
        assert_eq!((clip.num_frames(), track.num_points()), (4, 16));
        assert_eq!(loaded.split(Split::Train).count(), 2);
    }

    #[test]
    fn clips_are_deterministic_and_fakes_differ_from_their_target() {
        let spec = DatasetSpec { frames: 4, ..Default::default() };
        let (a, _) = spec.make_clip("x", 1).unwrap();
        let (b, _) = spec.make_clip("x", 1).unwrap();
        let (r, _) = spec.make_clip("x", 0).unwrap();
        assert_eq!(a.pixels(), b.pixels());
        assert!(a.pixels() != r.pixels());
    }
}
