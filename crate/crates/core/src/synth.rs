//! Synthetic moving-shape videos with exact ground truth, and a lossy
//! per-frame detector model that drops, jitters and erodes instances.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::affinity::BoundingBox;
use crate::encoder::Frame;
use crate::error::{Error, Result};
use crate::grid::BinaryMask;
use crate::pipeline::{CategoryId, Detection, InstanceTrack, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Rectangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 2] = [ShapeKind::Disk, ShapeKind::Rectangle];

    pub fn category(self) -> CategoryId {
        match self {
            ShapeKind::Disk => 1,
            ShapeKind::Rectangle => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Rectangle => "rectangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    Flat([f64; 3]),
    /// Left-to-right linear blend.
    Gradient([f64; 3], [f64; 3]),
}

impl Background {
    fn color(&self, x: usize, width: usize) -> [f64; 3] {
        match *self {
            Background::Flat(c) => c,
            Background::Gradient(a, b) => {
                let t = if width > 1 {
                    x as f64 / (width - 1) as f64
                } else {
                    0.0
                };
                [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * t)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub kind: ShapeKind,
    /// Center at frame 0, in pixels.
    pub center: [f64; 2],
    /// Disk radius in `extent[0]`; rectangle half-width and half-height.
    pub extent: [f64; 2],
    pub color: [f64; 3],
    /// Pixels per frame along x and y.
    pub velocity: [f64; 2],
}

impl InstanceSpec {
    fn half_extent(&self) -> [f64; 2] {
        match self.kind {
            ShapeKind::Disk => [self.extent[0]; 2],
            ShapeKind::Rectangle => self.extent,
        }
    }

    fn contains(&self, center: [f64; 2], x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - center[0];
        let dy = y as f64 + 0.5 - center[1];
        match self.kind {
            ShapeKind::Disk => dx * dx + dy * dy <= self.extent[0] * self.extent[0],
            ShapeKind::Rectangle => dx.abs() <= self.extent[0] && dy.abs() <= self.extent[1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub background: Background,
    /// Back to front: later instances occlude earlier ones.
    pub instances: Vec<InstanceSpec>,
    pub seed: u64,
}

/// Minimum Chebyshev distance between instance colors.
pub const MIN_COLOR_DISTANCE: f64 = 0.2;

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).abs()).fold(0.0, f64::max)
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::Spec("scene needs a nonzero size and frame count".into()));
        }
        if self.instances.is_empty() || self.instances.len() > 6 {
            return Err(Error::Spec("scene needs 1 to 6 instances".into()));
        }
        for (i, inst) in self.instances.iter().enumerate() {
            let [hx, hy] = inst.half_extent();
            if !(hx > 0.0 && hy > 0.0) {
                return Err(Error::Spec(format!("instance {i} has no extent")));
            }
            if 2.0 * hx > self.width as f64 || 2.0 * hy > self.height as f64 {
                return Err(Error::Spec(format!("instance {i} is larger than the image")));
            }
            let [cx, cy] = inst.center;
            if cx < hx || cx > self.width as f64 - hx || cy < hy || cy > self.height as f64 - hy {
                return Err(Error::Spec(format!("instance {i} starts outside the image")));
            }
            for (j, other) in self.instances[..i].iter().enumerate() {
                if color_distance(inst.color, other.color) < MIN_COLOR_DISTANCE {
                    return Err(Error::Spec(format!(
                        "instances {j} and {i} have indistinct colors"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Reflects `p0 + v·t` into `[lo, hi]`.
fn bounce(p0: f64, v: f64, t: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let u = (p0 - lo + v * t).rem_euclid(2.0 * span);
    lo + if u <= span { u } else { 2.0 * span - u }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub width: usize,
    pub height: usize,
    pub frames: Vec<Frame>,
    /// One track per instance, ids `1..`, entries on frames where visible.
    pub gt: Vec<InstanceTrack>,
}

/// Unoccluded masks of every instance at every frame.
fn raw_masks(spec: &SceneSpec) -> Vec<Vec<BinaryMask>> {
    (0..spec.frames)
        .map(|t| {
            spec.instances
                .iter()
                .map(|inst| {
                    let [hx, hy] = inst.half_extent();
                    let cx = bounce(inst.center[0], inst.velocity[0], t as f64, hx, spec.width as f64 - hx);
                    let cy = bounce(inst.center[1], inst.velocity[1], t as f64, hy, spec.height as f64 - hy);
                    BinaryMask::from_fn(spec.height, spec.width, |y, x| inst.contains([cx, cy], x, y))
                })
                .collect()
        })
        .collect()
}

/// Lowest visible/full area ratio of any instance over the video.
fn min_visible_fraction(spec: &SceneSpec) -> f64 {
    let mut worst = 1.0f64;
    for frame in raw_masks(spec) {
        for (i, m) in frame.iter().enumerate() {
            let mut visible = m.clone();
            for front in &frame[i + 1..] {
                visible.subtract(front);
            }
            if m.area() > 0 {
                worst = worst.min(visible.area() as f64 / m.area() as f64);
            }
        }
    }
    worst
}

pub fn generate_video(spec: &SceneSpec) -> Result<SynthVideo> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut frames = Vec::with_capacity(spec.frames);
    let mut entries: Vec<BTreeMap<usize, Detection>> = vec![BTreeMap::new(); spec.instances.len()];

    for (t, raw) in raw_masks(spec).into_iter().enumerate() {
        let mut label = vec![usize::MAX; w * h];
        for (i, m) in raw.iter().enumerate() {
            for (l, &on) in label.iter_mut().zip(m.data()) {
                if on {
                    *l = i;
                }
            }
        }
        let frame = Frame::from_fn(w, h, |x, y| match label[y * w + x] {
            usize::MAX => spec.background.color(x, w),
            i => spec.instances[i].color,
        });
        frames.push(frame);
        for (i, inst) in spec.instances.iter().enumerate() {
            let mask = BinaryMask::from_vec(h, w, label.iter().map(|&l| l == i).collect())?;
            if let Some(bbox) = BoundingBox::from_mask(&mask) {
                entries[i].insert(
                    t,
                    Detection {
                        frame: t,
                        bbox,
                        mask,
                        category: inst.kind.category(),
                        score: 1.0,
                        source: Source::Detector,
                    },
                );
            }
        }
    }

    let gt = spec
        .instances
        .iter()
        .zip(entries)
        .enumerate()
        .map(|(i, (inst, e))| InstanceTrack::from_entries(i as u64 + 1, inst.kind.category(), 1.0, e))
        .collect();
    Ok(SynthVideo {
        width: w,
        height: h,
        frames,
        gt,
    })
}

/// Parameters for randomly drawn scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub videos: usize,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub max_speed: f64,
    /// Scenes where any instance is ever less visible than this are redrawn.
    pub min_visible: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            videos: 20,
            width: 128,
            height: 128,
            frames: 24,
            min_instances: 2,
            max_instances: 4,
            max_speed: 1.5,
            min_visible: 0.5,
        }
    }
}

const MAX_SCENE_ATTEMPTS: usize = 1000;

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.videos == 0 || self.frames == 0 {
            return Err(Error::Config("scene.videos and scene.frames must be positive".into()));
        }
        if self.width < 40 || self.height < 40 {
            return Err(Error::Config("scene images must be at least 40×40".into()));
        }
        if !(1..=6).contains(&self.min_instances) || self.max_instances < self.min_instances || self.max_instances > 6 {
            return Err(Error::Config("scene instance counts must satisfy 1 <= min <= max <= 6".into()));
        }
        if !(self.max_speed >= 0.0 && self.max_speed.is_finite()) {
            return Err(Error::Config("scene.max_speed must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.min_visible) {
            return Err(Error::Config("scene.min_visible must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn draw_color(rng: &mut impl Rng, taken: &[[f64; 3]], background: &[[f64; 3]]) -> [f64; 3] {
        loop {
            let c = [0, 1, 2].map(|_| (rng.random_range(0.0..1.0f64) * 20.0).round() / 20.0);
            if c.iter().copied().fold(0.0, f64::max) < 0.5 {
                continue;
            }
            if taken.iter().chain(background).all(|&o| color_distance(c, o) >= MIN_COLOR_DISTANCE) {
                return c;
            }
        }
    }

    /// Draws one scene; deterministic in `seed`.
    pub fn sample(&self, seed: u64) -> Result<SceneSpec> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (self.width as f64, self.height as f64);
        let scale = (w.min(h) / 128.0).max(0.3);
        for _ in 0..MAX_SCENE_ATTEMPTS {
            let dark = |rng: &mut ChaCha8Rng| [0, 1, 2].map(|_| rng.random_range(0.0..0.25));
            let background = if rng.random_bool(0.5) {
                Background::Flat(dark(&mut rng))
            } else {
                Background::Gradient(dark(&mut rng), dark(&mut rng))
            };
            let bg_colors = match background {
                Background::Flat(c) => vec![c],
                Background::Gradient(a, b) => vec![a, b],
            };
            let n = rng.random_range(self.min_instances..=self.max_instances);
            let mut instances: Vec<InstanceSpec> = Vec::with_capacity(n);
            for _ in 0..n {
                let kind = ShapeKind::ALL[rng.random_range(0..2)];
                let extent = match kind {
                    ShapeKind::Disk => {
                        let r = rng.random_range(8.0..=16.0) * scale;
                        [r, r]
                    }
                    ShapeKind::Rectangle => [
                        rng.random_range(7.0..=14.0) * scale,
                        rng.random_range(7.0..=14.0) * scale,
                    ],
                };
                let center = [
                    rng.random_range(extent[0]..=w - extent[0]),
                    rng.random_range(extent[1]..=h - extent[1]),
                ];
                let taken: Vec<[f64; 3]> = instances.iter().map(|i| i.color).collect();
                let color = Self::draw_color(&mut rng, &taken, &bg_colors);
                let s = self.max_speed;
                let velocity = if s > 0.0 {
                    [rng.random_range(-s..=s), rng.random_range(-s..=s)]
                } else {
                    [0.0, 0.0]
                };
                instances.push(InstanceSpec {
                    kind,
                    center,
                    extent,
                    color,
                    velocity,
                });
            }
            let spec = SceneSpec {
                width: self.width,
                height: self.height,
                frames: self.frames,
                background,
                instances,
                seed,
            };
            if min_visible_fraction(&spec) >= self.min_visible {
                return Ok(spec);
            }
        }
        Err(Error::Spec(format!(
            "no scene with visibility >= {} after {MAX_SCENE_ATTEMPTS} draws",
            self.min_visible
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorModel {
    /// Drop probability per (instance, frame).
    pub miss_rate: f64,
    /// Standard deviation of per-coordinate box noise, pixels.
    pub box_jitter: f64,
    /// 3×3 erosion iterations applied to each mask, in pixels.
    pub mask_erosion: usize,
    pub score_noise: f64,
    /// Set from the run seed, not from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self {
            miss_rate: 0.3,
            box_jitter: 1.5,
            mask_erosion: 0,
            score_noise: 0.1,
            seed: 0,
        }
    }
}

impl DetectorModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return Err(Error::Config("detector.miss_rate must lie in [0, 1]".into()));
        }
        if !(self.box_jitter >= 0.0 && self.box_jitter.is_finite())
            || !(self.score_noise >= 0.0 && self.score_noise.is_finite())
        {
            return Err(Error::Config("detector noise levels must be >= 0".into()));
        }
        Ok(())
    }
}

fn jitter_box(b: &BoundingBox, noise: [f64; 4], width: usize, height: usize) -> BoundingBox {
    let shift = |v: u32, n: f64, max: usize| (f64::from(v) + n).round().clamp(0.0, max as f64) as u32;
    let x1 = shift(b.x1, noise[0], width - 1);
    let y1 = shift(b.y1, noise[1], height - 1);
    let x2 = shift(b.x2, noise[2], width).max(x1 + 1);
    let y2 = shift(b.y2, noise[3], height).max(y1 + 1);
    BoundingBox { x1, y1, x2, y2 }
}

/// Anonymous per-frame detections derived from ground truth. Each frame's
/// list is shuffled so its order carries no identity.
pub fn corrupt_detections(
    gt: &[InstanceTrack],
    frames: usize,
    model: &DetectorModel,
) -> Result<Vec<Vec<Detection>>> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let jitter = Normal::new(0.0, model.box_jitter).map_err(|e| Error::Config(e.to_string()))?;
    let score = Normal::new(0.0, model.score_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = vec![Vec::new(); frames];
    for (t, dets) in out.iter_mut().enumerate() {
        for track in gt {
            let Some(truth) = track.entries.get(&t) else {
                continue;
            };
            if rng.random_bool(model.miss_rate) {
                continue;
            }
            let noise = [0; 4].map(|_| jitter.sample(&mut rng));
            let s = (1.0 - score.sample(&mut rng).abs()).clamp(0.0, 1.0);
            let mut mask = truth.mask.eroded(model.mask_erosion);
            if mask.is_empty() {
                mask = truth.mask.clone();
            }
            let tight = BoundingBox::from_mask(&mask).expect("nonempty");
            dets.push(Detection {
                frame: t,
                bbox: jitter_box(&tight, noise, mask.width(), mask.height()),
                mask,
                category: truth.category,
                score: s,
                source: Source::Detector,
            });
        }
        dets.shuffle(&mut rng);
    }
    Ok(out)
}

/// Fixed benchmark: scenes from [`SceneConfig::default`] and the given
/// detector model, with per-video seeds derived from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct Suite {
    pub seed: u64,
    pub videos: Vec<SynthVideo>,
    pub detections: Vec<Vec<Vec<Detection>>>,
}

impl Suite {
    pub fn instance_count(&self) -> usize {
        self.videos.iter().map(|v| v.gt.len()).sum()
    }
}

/// Per-video seed for scene `index` of a suite.
pub fn video_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

pub fn generate_suite(seed: u64, scene: &SceneConfig, detector: &DetectorModel) -> Result<Suite> {
    let mut videos = Vec::with_capacity(scene.videos);
    let mut detections = Vec::with_capacity(scene.videos);
    for i in 0..scene.videos {
        let vs = video_seed(seed, i);
        let video = generate_video(&scene.sample(vs)?)?;
        let model = DetectorModel {
            seed: video_seed(detector.seed ^ seed, i),
            ..detector.clone()
        };
        detections.push(corrupt_detections(&video.gt, video.frames.len(), &model)?);
        videos.push(video);
    }
    Ok(Suite {
        seed,
        videos,
        detections,
    })
}

/// 20 videos of 128×128×24, 2–4 instances, miss rate 0.3, jitter 1.5 px.
pub fn standard_suite(seed: u64) -> Result<Suite> {
    generate_suite(seed, &SceneConfig::default(), &DetectorModel::default())
}
