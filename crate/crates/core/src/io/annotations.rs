//! Track annotation and per-frame detection files (JSON, sorted keys).
//!
//! Boxes are `[x1, y1, x2, y2]` with exclusive right/bottom edges; masks are
//! [`RleMask`]s. Per-frame arrays of a track have one slot per video frame,
//! `null` where the track is absent.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::affinity::BoundingBox;
use crate::error::{Error, Result};
use crate::io::rle::{rle_decode, rle_encode, RleMask};
use crate::io::to_sorted_json;
use crate::pipeline::{CategoryId, Detection, InstanceTrack, Source};

pub const ANNOTATION_VERSION: &str = "objprop-annotations/1";
pub const DETECTIONS_VERSION: &str = "objprop-detections/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoInfo {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoryInfo {
    pub id: CategoryId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub id: u64,
    pub video_id: u64,
    pub category_id: CategoryId,
    /// Track confidence; absent for ground truth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub boxes: Vec<Option<[u32; 4]>>,
    pub segmentations: Vec<Option<RleMask>>,
    pub scores: Vec<Option<f64>>,
    pub sources: Vec<Option<Source>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub version: String,
    pub videos: Vec<VideoInfo>,
    pub categories: Vec<CategoryInfo>,
    pub tracks: Vec<TrackRecord>,
}

fn box_array(b: &BoundingBox) -> [u32; 4] {
    [b.x1, b.y1, b.x2, b.y2]
}

fn check_header(videos: &[VideoInfo], categories: &[CategoryInfo]) -> Result<()> {
    let mut ids = BTreeSet::new();
    for v in videos {
        if !ids.insert(v.id) {
            return Err(Error::Input(format!("duplicate video id {}", v.id)));
        }
        if v.width == 0 || v.height == 0 || v.length == 0 {
            return Err(Error::Input(format!("video {} has zero size", v.id)));
        }
    }
    let mut cats = BTreeSet::new();
    for c in categories {
        if !cats.insert(c.id) {
            return Err(Error::Input(format!("duplicate category id {}", c.id)));
        }
    }
    Ok(())
}

fn decode_entry(
    video: &VideoInfo,
    frame: usize,
    bbox: [u32; 4],
    rle: &RleMask,
    category: CategoryId,
    score: f64,
    source: Source,
) -> Result<Detection> {
    if rle.size != [video.height, video.width] {
        return Err(Error::CorruptMask(format!(
            "mask size {:?} in video {} of size {}x{}",
            rle.size, video.id, video.width, video.height
        )));
    }
    let mask = rle_decode(rle)?;
    let bbox = BoundingBox::new(bbox[0], bbox[1], bbox[2], bbox[3])?;
    if !(0.0..=1.0).contains(&score) {
        return Err(Error::Input(format!("score {score} outside [0, 1]")));
    }
    Ok(Detection {
        frame,
        bbox,
        mask,
        category,
        score,
        source,
    })
}

impl AnnotationFile {
    /// Serializes per-video tracks. `scored` records track confidences, as
    /// for predictions. Track ids are renumbered from 1 across the file.
    pub fn from_tracks(
        videos: Vec<VideoInfo>,
        categories: Vec<CategoryInfo>,
        tracks: &[Vec<InstanceTrack>],
        scored: bool,
    ) -> Result<Self> {
        if videos.len() != tracks.len() {
            return Err(Error::Input(format!(
                "{} videos but tracks for {}",
                videos.len(),
                tracks.len()
            )));
        }
        let mut records = Vec::new();
        for (video, list) in videos.iter().zip(tracks) {
            for t in list {
                let n = video.length;
                let mut rec = TrackRecord {
                    id: records.len() as u64 + 1,
                    video_id: video.id,
                    category_id: t.category,
                    score: scored.then_some(t.confidence),
                    boxes: vec![None; n],
                    segmentations: vec![None; n],
                    scores: vec![None; n],
                    sources: vec![None; n],
                };
                for (&f, d) in &t.entries {
                    if f >= n {
                        return Err(Error::Input(format!(
                            "track entry at frame {f} beyond video length {n}"
                        )));
                    }
                    rec.boxes[f] = Some(box_array(&d.bbox));
                    rec.segmentations[f] = Some(rle_encode(&d.mask));
                    rec.scores[f] = Some(d.score);
                    rec.sources[f] = Some(d.source);
                }
                records.push(rec);
            }
        }
        Ok(Self {
            version: ANNOTATION_VERSION.into(),
            videos,
            categories,
            tracks: records,
        })
    }

    /// Tracks grouped by video, in `videos` order, after checking every
    /// reference and per-frame array.
    pub fn to_tracks(&self) -> Result<Vec<Vec<InstanceTrack>>> {
        if self.version != ANNOTATION_VERSION {
            return Err(Error::Input(format!(
                "unsupported annotation version {:?}",
                self.version
            )));
        }
        check_header(&self.videos, &self.categories)?;
        let index: BTreeMap<u64, usize> =
            self.videos.iter().enumerate().map(|(i, v)| (v.id, i)).collect();
        let cats: BTreeSet<CategoryId> = self.categories.iter().map(|c| c.id).collect();
        let mut out = vec![Vec::new(); self.videos.len()];
        let mut ids = BTreeSet::new();
        for rec in &self.tracks {
            if !ids.insert(rec.id) {
                return Err(Error::Input(format!("duplicate track id {}", rec.id)));
            }
            let vi = *index.get(&rec.video_id).ok_or_else(|| {
                Error::Input(format!("track {} references unknown video {}", rec.id, rec.video_id))
            })?;
            if !cats.contains(&rec.category_id) {
                return Err(Error::Input(format!(
                    "track {} references unknown category {}",
                    rec.id, rec.category_id
                )));
            }
            let video = &self.videos[vi];
            let n = video.length;
            if [rec.boxes.len(), rec.segmentations.len(), rec.scores.len(), rec.sources.len()]
                .iter()
                .any(|&l| l != n)
            {
                return Err(Error::Input(format!(
                    "track {} per-frame arrays do not have {n} entries",
                    rec.id
                )));
            }
            let mut entries = BTreeMap::new();
            for f in 0..n {
                match (&rec.boxes[f], &rec.segmentations[f]) {
                    (None, None) => {}
                    (Some(b), Some(rle)) => {
                        let det = decode_entry(
                            video,
                            f,
                            *b,
                            rle,
                            rec.category_id,
                            rec.scores[f].unwrap_or(1.0),
                            rec.sources[f].unwrap_or(Source::Detector),
                        )?;
                        entries.insert(f, det);
                    }
                    _ => {
                        return Err(Error::Input(format!(
                            "track {} frame {f} has a box without a mask or vice versa",
                            rec.id
                        )))
                    }
                }
            }
            let confidence = rec.score.unwrap_or(1.0);
            out[vi].push(InstanceTrack::from_entries(rec.id, rec.category_id, confidence, entries));
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        to_sorted_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub video_id: u64,
    pub frame: usize,
    pub category_id: CategoryId,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [u32; 4],
    pub segmentation: RleMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionsFile {
    pub version: String,
    pub videos: Vec<VideoInfo>,
    pub categories: Vec<CategoryInfo>,
    pub detections: Vec<DetectionRecord>,
}

impl DetectionsFile {
    /// Serializes per-video, per-frame detector output.
    pub fn from_frames(
        videos: Vec<VideoInfo>,
        categories: Vec<CategoryInfo>,
        dets: &[Vec<Vec<Detection>>],
    ) -> Result<Self> {
        if videos.len() != dets.len() {
            return Err(Error::Input(format!(
                "{} videos but detections for {}",
                videos.len(),
                dets.len()
            )));
        }
        let mut records = Vec::new();
        for (video, frames) in videos.iter().zip(dets) {
            for (f, list) in frames.iter().enumerate() {
                for d in list {
                    records.push(DetectionRecord {
                        video_id: video.id,
                        frame: f,
                        category_id: d.category,
                        score: d.score,
                        bbox: box_array(&d.bbox),
                        segmentation: rle_encode(&d.mask),
                    });
                }
            }
        }
        Ok(Self {
            version: DETECTIONS_VERSION.into(),
            videos,
            categories,
            detections: records,
        })
    }

    /// Detections grouped by video then frame, preserving file order.
    pub fn to_frames(&self) -> Result<Vec<Vec<Vec<Detection>>>> {
        if self.version != DETECTIONS_VERSION {
            return Err(Error::Input(format!(
                "unsupported detections version {:?}",
                self.version
            )));
        }
        check_header(&self.videos, &self.categories)?;
        let index: BTreeMap<u64, usize> =
            self.videos.iter().enumerate().map(|(i, v)| (v.id, i)).collect();
        let cats: BTreeSet<CategoryId> = self.categories.iter().map(|c| c.id).collect();
        let mut out: Vec<Vec<Vec<Detection>>> =
            self.videos.iter().map(|v| vec![Vec::new(); v.length]).collect();
        for rec in &self.detections {
            let vi = *index.get(&rec.video_id).ok_or_else(|| {
                Error::Input(format!("detection references unknown video {}", rec.video_id))
            })?;
            if !cats.contains(&rec.category_id) {
                return Err(Error::Input(format!(
                    "detection references unknown category {}",
                    rec.category_id
                )));
            }
            let video = &self.videos[vi];
            if rec.frame >= video.length {
                return Err(Error::Input(format!(
                    "detection at frame {} beyond video length {}",
                    rec.frame, video.length
                )));
            }
            let det = decode_entry(
                video,
                rec.frame,
                rec.bbox,
                &rec.segmentation,
                rec.category_id,
                rec.score,
                Source::Detector,
            )?;
            out[vi][rec.frame].push(det);
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        to_sorted_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
