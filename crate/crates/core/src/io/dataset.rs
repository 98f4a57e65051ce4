//! Dataset directories:
//!
//! ```text
//! manifest.json          version, seed, videos, categories
//! videos/0001/000.ppm    frames, one P6 file each
//! annotations.json       ground-truth tracks
//! detections.json        simulated detector output
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::Frame;
use crate::error::{Error, Result};
use crate::io::annotations::{AnnotationFile, CategoryInfo, DetectionsFile, VideoInfo};
use crate::io::ppm::{decode_ppm, encode_ppm};
use crate::io::{read_file, to_sorted_json};
use crate::pipeline::{Detection, InstanceTrack};
use crate::synth::{ShapeKind, Suite};

pub const MANIFEST_VERSION: &str = "objprop-dataset/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub videos: Vec<VideoInfo>,
    pub categories: Vec<CategoryInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub videos: Vec<VideoInfo>,
    pub categories: Vec<CategoryInfo>,
    pub frames: Vec<Vec<Frame>>,
    pub gt: Vec<Vec<InstanceTrack>>,
    pub detections: Vec<Vec<Vec<Detection>>>,
}

pub fn shape_categories() -> Vec<CategoryInfo> {
    ShapeKind::ALL
        .iter()
        .map(|k| CategoryInfo {
            id: k.category(),
            name: k.name().into(),
        })
        .collect()
}

impl Dataset {
    pub fn from_suite(suite: Suite) -> Self {
        let videos = suite
            .videos
            .iter()
            .enumerate()
            .map(|(i, v)| VideoInfo {
                id: i as u64 + 1,
                width: v.width,
                height: v.height,
                length: v.frames.len(),
            })
            .collect();
        let (frames, gt) = suite.videos.into_iter().map(|v| (v.frames, v.gt)).unzip();
        Self {
            seed: suite.seed,
            videos,
            categories: shape_categories(),
            frames,
            gt,
            detections: suite.detections,
        }
    }

    pub fn category_ids(&self) -> Vec<u32> {
        self.categories.iter().map(|c| c.id).collect()
    }

    pub fn annotations(&self) -> Result<AnnotationFile> {
        AnnotationFile::from_tracks(self.videos.clone(), self.categories.clone(), &self.gt, false)
    }

    pub fn detections_file(&self) -> Result<DetectionsFile> {
        DetectionsFile::from_frames(self.videos.clone(), self.categories.clone(), &self.detections)
    }
}

fn video_dir(id: u64) -> String {
    format!("videos/{id:04}")
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the dataset into a staging directory beside `dir` and renames it
/// into place, replacing any previous dataset there.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let stage = tempfile::Builder::new()
        .prefix(".dataset-")
        .tempdir_in(parent)
        .map_err(|e| Error::io(parent, e))?;
    let root = stage.path();

    let manifest = Manifest {
        version: MANIFEST_VERSION.into(),
        seed: data.seed,
        videos: data.videos.clone(),
        categories: data.categories.clone(),
    };
    write(&root.join("manifest.json"), to_sorted_json(&manifest)?.as_bytes())?;
    for (info, frames) in data.videos.iter().zip(&data.frames) {
        for (t, frame) in frames.iter().enumerate() {
            let path = root.join(video_dir(info.id)).join(format!("{t:03}.ppm"));
            write(&path, &encode_ppm(frame))?;
        }
    }
    write(&root.join("annotations.json"), data.annotations()?.to_json()?.as_bytes())?;
    write(&root.join("detections.json"), data.detections_file()?.to_json()?.as_bytes())?;

    if dir.exists() {
        if !dir.join("manifest.json").exists() && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some() {
            return Err(Error::Input(format!(
                "{} exists and is not a dataset directory",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let staged = stage.keep();
    fs::rename(&staged, dir).map_err(|e| Error::io(dir, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(&read_file(&dir.join("manifest.json"))?)?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Input(format!("unsupported dataset version {:?}", m.version)));
    }
    Ok(m)
}

pub fn read_annotations(path: &Path) -> Result<AnnotationFile> {
    let text = String::from_utf8(read_file(path)?)
        .map_err(|_| Error::Input(format!("{} is not UTF-8", path.display())))?;
    AnnotationFile::from_json(&text)
}

pub fn read_detections(path: &Path) -> Result<DetectionsFile> {
    let text = String::from_utf8(read_file(path)?)
        .map_err(|_| Error::Input(format!("{} is not UTF-8", path.display())))?;
    DetectionsFile::from_json(&text)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let mut frames = Vec::with_capacity(manifest.videos.len());
    for info in &manifest.videos {
        let mut list = Vec::with_capacity(info.length);
        for t in 0..info.length {
            let path = dir.join(video_dir(info.id)).join(format!("{t:03}.ppm"));
            let frame = decode_ppm(&read_file(&path)?)?;
            if (frame.width(), frame.height()) != (info.width, info.height) {
                return Err(Error::Input(format!(
                    "{} is {}x{}, manifest says {}x{}",
                    path.display(),
                    frame.width(),
                    frame.height(),
                    info.width,
                    info.height
                )));
            }
            list.push(frame);
        }
        frames.push(list);
    }
    let ann = read_annotations(&dir.join("annotations.json"))?;
    let dets = read_detections(&dir.join("detections.json"))?;
    if ann.videos != manifest.videos || dets.videos != manifest.videos {
        return Err(Error::Input("annotation videos disagree with the manifest".into()));
    }
    Ok(Dataset {
        seed: manifest.seed,
        videos: manifest.videos,
        categories: manifest.categories,
        frames,
        gt: ann.to_tracks()?,
        detections: dets.to_frames()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_suite, DetectorModel, SceneConfig};

    #[test]
    fn dataset_round_trip() {
        let scene = SceneConfig {
            videos: 2,
            width: 48,
            height: 40,
            frames: 3,
            ..Default::default()
        };
        let suite = generate_suite(3, &scene, &DetectorModel::default()).unwrap();
        let data = Dataset::from_suite(suite);
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ds");
        write_dataset(&dir, &data).unwrap();
        let back = read_dataset(&dir).unwrap();
        assert_eq!(back.frames, data.frames);
        assert_eq!(back.detections, data.detections);
        assert_eq!(back.gt.len(), data.gt.len());
        for (a, b) in back.gt.iter().flatten().zip(data.gt.iter().flatten()) {
            assert_eq!(a.entries, b.entries);
        }
        // rewriting replaces the old dataset
        write_dataset(&dir, &data).unwrap();
        assert!(read_dataset(&dir).is_ok());
    }

    #[test]
    fn refuses_to_clobber_foreign_directory() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join("notes.txt"), "keep me").unwrap();
        let data = Dataset::from_suite(
            generate_suite(
                1,
                &SceneConfig {
                    videos: 1,
                    width: 40,
                    height: 40,
                    frames: 2,
                    ..Default::default()
                },
                &DetectorModel::default(),
            )
            .unwrap(),
        );
        assert!(write_dataset(tmp.path(), &data).is_err());
        assert!(tmp.path().join("notes.txt").exists());
    }
}
