//! Online video inference: greedy mask-IoU association of per-frame
//! detections into tracks, plus empty-instance filling that propagates a
//! track's last detected box onto frames where the detector missed it.
//!
//! Processing is strictly causal: frame `t` is handled using only frames and
//! detections up to `t`.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{AffinityMatrix, BoundingBox, PropagationConfig};
use crate::encoder::{encode_frame, EncoderConfig, Frame};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, FeatureGrid, MaskGrid};
use crate::head::{attended_forward, HeadParams};

pub type CategoryId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Detector,
    Propagated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: usize,
    pub bbox: BoundingBox,
    /// Image-resolution mask.
    pub mask: BinaryMask,
    pub category: CategoryId,
    pub score: f64,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTrack {
    pub track_id: u64,
    pub category: CategoryId,
    pub entries: BTreeMap<usize, Detection>,
    /// Most recent frame with a detector-sourced entry.
    pub last_seen: usize,
    /// Consecutive frames without a detector match.
    pub misses: usize,
    /// Running mean of detector scores.
    pub confidence: f64,
    detector_hits: usize,
}

impl InstanceTrack {
    pub fn start(track_id: u64, det: Detection) -> Self {
        let mut t = Self {
            track_id,
            category: det.category,
            entries: BTreeMap::new(),
            last_seen: det.frame,
            misses: 0,
            confidence: 0.0,
            detector_hits: 0,
        };
        t.push_detected(det);
        t
    }

    /// Track built from fully known entries (ground truth, loaded files).
    pub fn from_entries(
        track_id: u64,
        category: CategoryId,
        confidence: f64,
        entries: BTreeMap<usize, Detection>,
    ) -> Self {
        let last_seen = entries
            .iter()
            .rev()
            .find(|(_, d)| d.source == Source::Detector)
            .map_or(0, |(&f, _)| f);
        let detector_hits = entries.values().filter(|d| d.source == Source::Detector).count();
        Self {
            track_id,
            category,
            entries,
            last_seen,
            misses: 0,
            confidence,
            detector_hits,
        }
    }

    pub fn push_detected(&mut self, det: Detection) {
        self.detector_hits += 1;
        self.confidence += (det.score - self.confidence) / self.detector_hits as f64;
        self.last_seen = det.frame;
        self.misses = 0;
        self.entries.insert(det.frame, det);
    }

    pub fn push_propagated(&mut self, det: Detection) {
        debug_assert_eq!(det.source, Source::Propagated);
        self.entries.insert(det.frame, det);
    }

    pub fn mask_at(&self, frame: usize) -> Option<&BinaryMask> {
        self.entries.get(&frame).map(|d| &d.mask)
    }

    /// Mask of the most recent entry of any source.
    pub fn latest_mask(&self) -> Option<&BinaryMask> {
        self.entries.values().next_back().map(|d| &d.mask)
    }

    pub fn frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    #[default]
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub match_iou: f64,
    pub delta_max: usize,
    pub fill_threshold: f64,
    pub max_misses: usize,
    pub mask_binarize: f64,
    pub fill: bool,
    pub upsample: Upsample,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            match_iou: 0.5,
            delta_max: 5,
            fill_threshold: 0.4,
            max_misses: 5,
            mask_binarize: 0.5,
            fill: true,
            upsample: Upsample::Nearest,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("match_iou", self.match_iou),
            ("fill_threshold", self.fill_threshold),
            ("mask_binarize", self.mask_binarize),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("pipeline.{name} must lie in (0, 1)")));
            }
        }
        if self.delta_max == 0 {
            return Err(Error::Config("pipeline.delta_max must be at least 1".into()));
        }
        Ok(())
    }
}

/// `|a ∧ b| / |a ∨ b|`, 0 when both are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::shape(a.shape_str(), b.shape_str()));
    }
    let union = a.union_area(b);
    Ok(if union == 0 {
        0.0
    } else {
        a.intersection_area(b) as f64 / union as f64
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    /// `(track index, detection index)` pairs in the order they were chosen.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Greedy one-to-one matching on descending IoU among pairs at or above
/// `threshold` that are `compatible`. Ties break on higher detection score,
/// then lower track id, then lower detection index.
pub fn greedy_assign(
    iou: &[Vec<f64>],
    track_ids: &[u64],
    det_scores: &[f64],
    threshold: f64,
    compatible: impl Fn(usize, usize) -> bool,
) -> Assignment {
    let mut candidates = Vec::new();
    for (ti, row) in iou.iter().enumerate() {
        for (di, &v) in row.iter().enumerate() {
            if v >= threshold && compatible(ti, di) {
                candidates.push((ti, di, v));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.2.total_cmp(&a.2)
            .then(det_scores[b.1].total_cmp(&det_scores[a.1]))
            .then(track_ids[a.0].cmp(&track_ids[b.0]))
            .then(a.1.cmp(&b.1))
    });
    let mut track_used = vec![false; iou.len()];
    let mut det_used = vec![false; det_scores.len()];
    let mut out = Assignment::default();
    for (ti, di, _) in candidates {
        if !track_used[ti] && !det_used[di] {
            track_used[ti] = true;
            det_used[di] = true;
            out.pairs.push((ti, di));
        }
    }
    out.unmatched_tracks = (0..iou.len()).filter(|&i| !track_used[i]).collect();
    out.unmatched_detections = (0..det_scores.len()).filter(|&i| !det_used[i]).collect();
    out
}

/// Associates detections with tracks by mask IoU, requiring equal
/// categories. A track scores the better of its most recent mask and its
/// last detector mask.
pub fn match_detections(
    tracks: &[InstanceTrack],
    dets: &[Detection],
    match_iou: f64,
) -> Result<Assignment> {
    let mut iou = Vec::with_capacity(tracks.len());
    for t in tracks {
        let mut row = Vec::with_capacity(dets.len());
        for d in dets {
            let mut best = 0.0f64;
            for m in [t.latest_mask(), t.mask_at(t.last_seen)].into_iter().flatten() {
                best = best.max(mask_iou(m, &d.mask)?);
            }
            row.push(best);
        }
        iou.push(row);
    }
    let ids: Vec<u64> = tracks.iter().map(|t| t.track_id).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    Ok(greedy_assign(&iou, &ids, &scores, match_iou, |ti, di| {
        tracks[ti].category == dets[di].category
    }))
}

/// Uniform reference-frame offset in `[1, delta_max]`.
pub fn sample_delta(rng: &mut impl Rng, delta_max: usize) -> usize {
    rng.random_range(1..=delta_max.max(1))
}

/// Read-only models shared by every track of a video.
#[derive(Debug, Clone, Copy)]
pub struct FillContext<'a> {
    pub encoder: &'a EncoderConfig,
    pub propagation: &'a PropagationConfig,
    pub head: &'a HeadParams,
    pub image_width: usize,
    pub image_height: usize,
}

/// Resamples head probabilities (cell size `stride / 2` pixels) to the image.
pub fn upsample_probs(
    probs: &MaskGrid,
    stride: usize,
    width: usize,
    height: usize,
    mode: Upsample,
) -> Vec<f64> {
    let scale = 2.0 / stride as f64;
    let (ph, pw) = (probs.height(), probs.width());
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let v = match mode {
                Upsample::Nearest => {
                    let r = ((2 * y) / stride).min(ph - 1);
                    let c = ((2 * x) / stride).min(pw - 1);
                    probs.get(r, c)
                }
                Upsample::Bilinear => {
                    let fy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (ph - 1) as f64);
                    let fx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (pw - 1) as f64);
                    let (r0, c0) = (fy.floor() as usize, fx.floor() as usize);
                    let (r1, c1) = ((r0 + 1).min(ph - 1), (c0 + 1).min(pw - 1));
                    let (ty, tx) = (fy - r0 as f64, fx - c0 as f64);
                    let top = probs.get(r0, c0) * (1.0 - tx) + probs.get(r0, c1) * tx;
                    let bot = probs.get(r1, c0) * (1.0 - tx) + probs.get(r1, c1) * tx;
                    top * (1.0 - ty) + bot * ty
                }
            };
            out.push(v);
        }
    }
    out
}

fn fill_with_affinity(
    track: &InstanceTrack,
    t: usize,
    f_t: &FeatureGrid,
    affinity: &AffinityMatrix,
    ctx: &FillContext<'_>,
    cfg: &PipelineConfig,
) -> Result<Option<Detection>> {
    let src = track.entries.get(&track.last_seen).ok_or_else(|| {
        Error::Contract(format!("track {} has no entry at last_seen", track.track_id))
    })?;
    let att = ctx.propagation.attention_for_box(
        affinity,
        &src.bbox,
        f_t.height(),
        f_t.width(),
        f_t.stride(),
    )?;
    let probs = attended_forward(ctx.head, f_t, &att)?;
    let up = upsample_probs(
        &probs,
        f_t.stride(),
        ctx.image_width,
        ctx.image_height,
        cfg.upsample,
    );
    let data: Vec<bool> = up.iter().map(|&p| p >= cfg.mask_binarize).collect();
    let (sum, count) = up
        .iter()
        .zip(&data)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (&p, _)| (s + p, n + 1));
    if count == 0 {
        return Ok(None);
    }
    let mean = sum / count as f64;
    if mean < cfg.fill_threshold {
        return Ok(None);
    }
    let mask = BinaryMask::from_vec(ctx.image_height, ctx.image_width, data)?;
    let bbox = BoundingBox::from_mask(&mask).expect("nonempty mask has a box");
    Ok(Some(Detection {
        frame: t,
        bbox,
        mask,
        category: track.category,
        score: track.confidence * mean,
        source: Source::Propagated,
    }))
}

/// Segments `track` at frame `t` by propagating its last detected box.
/// `features[i]` holds the encoded frame `i` for every `i <= t`.
pub fn fill_missing(
    track: &InstanceTrack,
    t: usize,
    features: &[FeatureGrid],
    ctx: &FillContext<'_>,
    cfg: &PipelineConfig,
) -> Result<Option<Detection>> {
    if t < track.last_seen || t - track.last_seen > cfg.delta_max {
        return Err(Error::StaleTrack {
            track_id: track.track_id,
            last_seen: track.last_seen,
            frame: t,
        });
    }
    let f_t = features
        .get(t)
        .ok_or_else(|| Error::Input(format!("no features for frame {t}")))?;
    let f_src = &features[track.last_seen];
    let affinity = ctx.propagation.affinity(f_t, f_src)?;
    fill_with_affinity(track, t, f_t, &affinity, ctx, cfg)
}

/// Runs the online tracker over one video and returns every track, retired
/// or still active, ordered by id.
pub fn run_video(
    frames: &[Frame],
    detections: &[Vec<Detection>],
    ctx: &FillContext<'_>,
    cfg: &PipelineConfig,
) -> Result<Vec<InstanceTrack>> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::Input("video has no frames".into()));
    }
    if frames.len() != detections.len() {
        return Err(Error::Input(format!(
            "{} frames but detections for {}",
            frames.len(),
            detections.len()
        )));
    }

    let mut features: Vec<FeatureGrid> = Vec::with_capacity(frames.len());
    let mut active: Vec<InstanceTrack> = Vec::new();
    let mut retired: Vec<InstanceTrack> = Vec::new();
    let mut next_id = 1u64;

    for (t, (frame, dets)) in frames.iter().zip(detections).enumerate() {
        if let Some(d) = dets.iter().find(|d| d.frame != t) {
            return Err(Error::Input(format!(
                "detection for frame {} listed under frame {t}",
                d.frame
            )));
        }
        if cfg.fill {
            features.push(encode_frame(frame, ctx.encoder)?);
        }

        let assignment = match_detections(&active, dets, cfg.match_iou)?;
        for &(ti, di) in &assignment.pairs {
            active[ti].push_detected(dets[di].clone());
        }

        if cfg.fill {
            let mut affinities: BTreeMap<usize, AffinityMatrix> = BTreeMap::new();
            for &ti in &assignment.unmatched_tracks {
                let track = &active[ti];
                if t - track.last_seen > cfg.delta_max {
                    continue;
                }
                let src = track.last_seen;
                let affinity = match affinities.entry(src) {
                    Entry::Occupied(e) => e.into_mut(),
                    Entry::Vacant(e) => {
                        e.insert(ctx.propagation.affinity(&features[t], &features[src])?)
                    }
                };
                let filled = fill_with_affinity(track, t, &features[t], affinity, ctx, cfg)?;
                if let Some(det) = filled {
                    active[ti].push_propagated(det);
                }
            }
        }

        for &di in &assignment.unmatched_detections {
            active.push(InstanceTrack::start(next_id, dets[di].clone()));
            next_id += 1;
        }

        for track in &mut active {
            track.misses = t - track.last_seen;
        }
        let (keep, done): (Vec<_>, Vec<_>) =
            active.into_iter().partition(|tr| tr.misses <= cfg.max_misses);
        active = keep;
        retired.extend(done);
    }

    retired.extend(active);
    retired.sort_by_key(|t| t.track_id);
    Ok(retired)
}
