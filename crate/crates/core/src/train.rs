//! Momentum SGD training of the mask head on (frame `t`, frame `t − δ`)
//! instance pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{BoundingBox, PropagationConfig};
use crate::encoder::{encode_frame, EncoderConfig, Frame};
use crate::error::{Error, Result};
use crate::grid::{BinaryMask, FeatureGrid, MaskGrid};
use crate::head::{head_gradients, AttentionLossMode, HeadExample, HeadParams, LossReport};
use crate::pipeline::{sample_delta, InstanceTrack};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    /// Fractions of `steps` at which the learning rate is divided by
    /// `decay_factor`.
    pub decay_points: Vec<f64>,
    pub delta_max: usize,
    pub attention_loss_weight: f64,
    pub attention_loss_mode: AttentionLossMode,
    /// Set from the run seed, not from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.005,
            momentum: 0.9,
            decay_factor: 10.0,
            decay_points: vec![8.0 / 12.0, 11.0 / 12.0],
            delta_max: 5,
            attention_loss_weight: 1.0,
            attention_loss_mode: AttentionLossMode::Standard,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("train.momentum must lie in [0, 1)".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::Config("train.decay_factor must be positive".into()));
        }
        if self.decay_points.iter().any(|&p| !(p > 0.0 && p < 1.0))
            || self.decay_points.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(
                "train.decay_points must be increasing fractions in (0, 1)".into(),
            ));
        }
        if self.delta_max == 0 {
            return Err(Error::Config("train.delta_max must be at least 1".into()));
        }
        if !(self.attention_loss_weight >= 0.0 && self.attention_loss_weight.is_finite()) {
            return Err(Error::Config("train.attention_loss_weight must be >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate in effect at `step`: divided by `decay_factor` once for
    /// every decay point with `step >= point · steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let crossed = self
            .decay_points
            .iter()
            .filter(|&&p| step as f64 >= p * self.steps as f64)
            .count();
        self.lr / self.decay_factor.powi(crossed as i32)
    }
}

/// Per-parameter momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    velocity: HeadParams,
}

impl SgdState {
    pub fn new(p: &HeadParams) -> Self {
        Self {
            velocity: p.zeros_like(),
        }
    }

    pub fn velocity(&self) -> &HeadParams {
        &self.velocity
    }
}

/// `v ← μv + g; θ ← θ − lr·v`.
pub fn sgd_step(
    p: &mut HeadParams,
    grads: &HeadParams,
    lr: f64,
    momentum: f64,
    state: &mut SgdState,
) -> Result<()> {
    if !p.same_shape(grads) || !p.same_shape(&state.velocity) {
        return Err(Error::ParamShape(
            "gradients or momentum do not match the parameters".into(),
        ));
    }
    for ((theta, v), g) in p
        .values_mut()
        .zip(state.velocity.values_mut())
        .zip(grads.values())
    {
        *v = momentum * *v + g;
        *theta -= lr * *v;
    }
    Ok(())
}

/// Fraction of each output cell covered by `mask`, binarized at 0.5.
///
/// Cells are `cell2` half-pixels wide so odd strides downsample exactly;
/// cells extending past the image count the outside as background.
pub fn downsample_mask(mask: &BinaryMask, out_h: usize, out_w: usize, cell2: usize) -> MaskGrid {
    let mut data = vec![0.0; out_h * out_w];
    let area = (cell2 * cell2) as f64;
    for (r, row) in data.chunks_mut(out_w).enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let mut hits = 0usize;
            for sy in r * cell2..(r + 1) * cell2 {
                let y = sy / 2;
                if y >= mask.height() {
                    break;
                }
                for sx in c * cell2..(c + 1) * cell2 {
                    let x = sx / 2;
                    if x >= mask.width() {
                        break;
                    }
                    hits += usize::from(mask.get(y, x));
                }
            }
            *v = if hits as f64 / area >= 0.5 { 1.0 } else { 0.0 };
        }
    }
    MaskGrid::new(out_h, out_w, data).expect("binary values")
}

struct Instance {
    masks: Vec<Option<BinaryMask>>,
}

/// One video prepared for training: encoded frames and per-frame ground
/// truth masks of every instance.
pub struct TrainingVideo {
    features: Vec<FeatureGrid>,
    instances: Vec<Instance>,
}

impl TrainingVideo {
    pub fn new(frames: &[Frame], gt: &[InstanceTrack], encoder: &EncoderConfig) -> Result<Self> {
        let features = frames
            .iter()
            .map(|f| encode_frame(f, encoder))
            .collect::<Result<Vec<_>>>()?;
        let instances = gt
            .iter()
            .map(|track| {
                let mut masks = vec![None; frames.len()];
                for (&f, det) in &track.entries {
                    if f < frames.len() && !det.mask.is_empty() {
                        masks[f] = Some(det.mask.clone());
                    }
                }
                Instance { masks }
            })
            .collect();
        Ok(Self {
            features,
            instances,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    fn present(&self, i: usize, t: usize) -> bool {
        self.instances[i].masks[t].is_some()
    }
}

pub struct TrainingSet {
    pub videos: Vec<TrainingVideo>,
}

impl TrainingSet {
    fn has_pair(&self, delta_max: usize) -> bool {
        self.videos.iter().any(|v| {
            (0..v.instances.len()).any(|i| {
                (1..v.len()).any(|t| {
                    (1..=delta_max.min(t)).any(|d| v.present(i, t) && v.present(i, t - d))
                })
            })
        })
    }
}

pub struct TrainOutput {
    pub params: HeadParams,
    pub losses: Vec<LossReport>,
}

/// Upper bound on rejected draws before a step gives up.
const MAX_DRAWS: usize = 100_000;

fn draw_pair(
    set: &TrainingSet,
    delta_max: usize,
    rng: &mut impl Rng,
) -> Result<(usize, usize, usize, usize)> {
    for _ in 0..MAX_DRAWS {
        let v = rng.random_range(0..set.videos.len());
        let video = &set.videos[v];
        if video.len() < 2 || video.instances.is_empty() {
            continue;
        }
        let t = rng.random_range(1..video.len());
        let delta = sample_delta(rng, delta_max);
        if delta > t {
            continue;
        }
        let both: Vec<usize> = (0..video.instances.len())
            .filter(|&i| video.present(i, t) && video.present(i, t - delta))
            .collect();
        if both.is_empty() {
            continue;
        }
        let i = both[rng.random_range(0..both.len())];
        return Ok((v, t, delta, i));
    }
    Err(Error::Input("could not sample a training pair".into()))
}

/// Trains a fresh head initialized from `cfg.seed`. Weight initialization
/// and pair sampling use separate streams of the same seed.
pub fn train(
    set: &TrainingSet,
    cfg: &TrainConfig,
    propagation: &PropagationConfig,
    hidden: usize,
) -> Result<TrainOutput> {
    cfg.validate()?;
    propagation.validate()?;
    let channels = set
        .videos
        .iter()
        .flat_map(|v| v.features.first())
        .map(FeatureGrid::channels)
        .next()
        .ok_or_else(|| Error::Input("training set has no frames".into()))?;
    if !set.has_pair(cfg.delta_max) {
        return Err(Error::Input(
            "no instance is present in two frames within delta_max".into(),
        ));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = HeadParams::init(channels, hidden, &mut init_rng);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut state = SgdState::new(&params);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let (v, t, delta, i) = draw_pair(set, cfg.delta_max, &mut rng)?;
        let video = &set.videos[v];
        let f_t = &video.features[t];
        let f_src = &video.features[t - delta];
        let src_mask = video.instances[i].masks[t - delta].as_ref().expect("sampled present");
        let gt = video.instances[i].masks[t].as_ref().expect("sampled present");
        let bbox = BoundingBox::from_mask(src_mask).expect("nonempty mask");

        let affinity = propagation.affinity(f_t, f_src)?;
        let (h, w, s) = (f_t.height(), f_t.width(), f_t.stride());
        let attention = propagation.attention_for_box(&affinity, &bbox, h, w, s)?;
        let gt_mask = downsample_mask(gt, 2 * h, 2 * w, s);
        let gt_attention = downsample_mask(gt, h, w, 2 * s);
        let example = HeadExample {
            features: f_t,
            attention: &attention,
            gt_mask: &gt_mask,
            gt_attention: &gt_attention,
        };
        let (grads, report) = head_gradients(
            &params,
            &example,
            cfg.attention_loss_weight,
            cfg.attention_loss_mode,
        )?;
        sgd_step(&mut params, &grads, cfg.lr_at(step), cfg.momentum, &mut state)?;
        losses.push(report);
    }
    Ok(TrainOutput { params, losses })
}
