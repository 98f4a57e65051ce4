//! Central finite-difference check of [`head_gradients`] on random fixtures.
//!
//! Each parameter is nudged by `±step` and the loss difference compared
//! with the analytic gradient. When a nudge flips the sign of any ReLU
//! pre-activation the loss is not differentiable along that step, so the
//! step is shrunk by 10× until the activation pattern is stable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::affinity::AttentionMap;
use crate::error::Result;
use crate::grid::{elementwise_scale, FeatureGrid, MaskGrid};
use crate::head::{
    activation_pattern, head_gradients, head_loss, AttentionLossMode, HeadExample, HeadParams,
};

#[derive(Debug, Clone)]
pub struct GradcheckConfig {
    pub fixtures: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub hidden: usize,
    pub step: f64,
    pub tolerance: f64,
    pub attention_weight: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            fixtures: 25,
            height: 4,
            width: 4,
            channels: 2,
            hidden: 8,
            step: 1e-4,
            tolerance: 1e-4,
            attention_weight: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub fixtures: usize,
    pub params_checked: usize,
    pub max_rel_error: f64,
    pub worst_fixture: usize,
    pub worst_param: usize,
    /// Checks that needed a smaller step to stay off a ReLU kink.
    pub refined_steps: usize,
    /// Checks above tolerance, or whose step could not avoid a kink.
    pub failures: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Gradients smaller than this are compared in absolute terms: central
/// differences at `h = 1e-4` carry about `1e-12` of rounding noise.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `max(|a|, |b|, RELATIVE_FLOOR)`-relative difference.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

pub struct Fixture {
    pub params: HeadParams,
    pub features: FeatureGrid,
    pub attention: AttentionMap,
    pub gt_mask: MaskGrid,
    pub gt_attention: MaskGrid,
}

impl Fixture {
    pub fn random(cfg: &GradcheckConfig, rng: &mut impl Rng) -> Self {
        let (h, w) = (cfg.height, cfg.width);
        let mut params = HeadParams::init(cfg.channels, cfg.hidden, rng);
        for layer in params.conv.iter_mut().chain([&mut params.deconv, &mut params.predictor]) {
            for b in &mut layer.bias {
                *b = rng.random_range(-0.1..0.1);
            }
        }
        let features = FeatureGrid::new(
            h,
            w,
            cfg.channels,
            8,
            (0..h * w * cfg.channels).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .expect("fixture features");
        let object = MaskGrid::new(h, w, (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect())
            .expect("fixture attention");
        let bits = |n: usize, rng: &mut dyn rand::RngCore| -> Vec<f64> {
            (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect()
        };
        let gt_mask = MaskGrid::new(2 * h, 2 * w, bits(4 * h * w, rng)).expect("fixture mask");
        let gt_attention = MaskGrid::new(h, w, bits(h * w, rng)).expect("fixture gt attention");
        Self {
            params,
            features,
            attention: AttentionMap::from_object(object),
            gt_mask,
            gt_attention,
        }
    }

    pub fn example(&self) -> HeadExample<'_> {
        HeadExample {
            features: &self.features,
            attention: &self.attention,
            gt_mask: &self.gt_mask,
            gt_attention: &self.gt_attention,
        }
    }
}

fn set_value(p: &mut HeadParams, idx: usize, value: f64) {
    if let Some(v) = p.values_mut().nth(idx) {
        *v = value;
    }
}

/// Checks every parameter of one fixture. Returns per-parameter
/// `(relative error, refined, kink)` triples.
pub fn check_fixture(
    fx: &Fixture,
    cfg: &GradcheckConfig,
) -> Result<Vec<(f64, bool, bool)>> {
    let ex = fx.example();
    let mode = AttentionLossMode::Standard;
    let (grads, _) = head_gradients(&fx.params, &ex, cfg.attention_weight, mode)?;
    let attended = elementwise_scale(&fx.features, &fx.attention.object)?;
    let base_pattern = activation_pattern(&fx.params, &attended)?;

    let analytic: Vec<f64> = grads.values().copied().collect();
    let original: Vec<f64> = fx.params.values().copied().collect();
    let mut out = Vec::with_capacity(analytic.len());
    let mut probe = fx.params.clone();
    for (idx, (&a, &theta)) in analytic.iter().zip(&original).enumerate() {
        let mut h = cfg.step;
        let mut refined = false;
        let kink = loop {
            set_value(&mut probe, idx, theta + h);
            let up = activation_pattern(&probe, &attended)?;
            set_value(&mut probe, idx, theta - h);
            let down = activation_pattern(&probe, &attended)?;
            if up == base_pattern && down == base_pattern {
                break false;
            }
            if h < 1e-9 {
                break true;
            }
            h /= 10.0;
            refined = true;
        };
        set_value(&mut probe, idx, theta + h);
        let plus = head_loss(&probe, &ex, cfg.attention_weight, mode)?.total;
        set_value(&mut probe, idx, theta - h);
        let minus = head_loss(&probe, &ex, cfg.attention_weight, mode)?.total;
        set_value(&mut probe, idx, theta);
        let numeric = (plus - minus) / (2.0 * h);
        out.push((relative_error(a, numeric), refined, kink));
    }
    Ok(out)
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradcheckReport {
        fixtures: cfg.fixtures,
        params_checked: 0,
        max_rel_error: 0.0,
        worst_fixture: 0,
        worst_param: 0,
        refined_steps: 0,
        failures: 0,
    };
    for f in 0..cfg.fixtures {
        let fx = Fixture::random(cfg, &mut rng);
        for (idx, (err, refined, kink)) in check_fixture(&fx, cfg)?.into_iter().enumerate() {
            report.params_checked += 1;
            report.refined_steps += usize::from(refined);
            if kink || err > cfg.tolerance {
                report.failures += 1;
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_fixture = f;
                report.worst_param = idx;
            }
        }
    }
    Ok(report)
}
