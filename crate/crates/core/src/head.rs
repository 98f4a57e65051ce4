//! Attention-guided mask head.
//!
//! Four same-padded 3×3 conv + ReLU blocks, a 2×2 stride-2 transposed
//! convolution + ReLU that doubles the grid, and a 1×1 predictor followed by
//! a sigmoid. Kernels are stored `[kh][kw][c_in][c_out]`, activations
//! `[row][col][channel]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::AttentionMap;
use crate::error::{Error, Result};
use crate::grid::{elementwise_scale, FeatureGrid, MaskGrid};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the
/// cross-entropy losses.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(kernel_h: usize, kernel_w: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            kernel_h,
            kernel_w,
            c_in,
            c_out,
            weight: vec![0.0; kernel_h * kernel_w * c_in * c_out],
            bias: vec![0.0; c_out],
        }
    }

    fn uniform(
        kernel_h: usize,
        kernel_w: usize,
        c_in: usize,
        c_out: usize,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut layer = Self::zeros(kernel_h, kernel_w, c_in, c_out);
        for w in &mut layer.weight {
            *w = rng.random_range(-bound..=bound);
        }
        layer
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.kernel_h, self.kernel_w, self.c_in, self.c_out]
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden_width: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden_width: 16 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub conv: [Layer; 4],
    pub deconv: Layer,
    pub predictor: Layer,
}

impl HeadParams {
    /// Fan-in uniform initialization with zero biases.
    pub fn init(c_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let conv = [c_in, hidden, hidden, hidden]
            .map(|ci| Layer::uniform(3, 3, ci, hidden, 9 * ci, rng));
        let deconv = Layer::uniform(2, 2, hidden, hidden, hidden, rng);
        let predictor = Layer::uniform(1, 1, hidden, 1, hidden, rng);
        Self {
            conv,
            deconv,
            predictor,
        }
    }

    pub fn zeros(c_in: usize, hidden: usize) -> Self {
        Self {
            conv: [c_in, hidden, hidden, hidden].map(|ci| Layer::zeros(3, 3, ci, hidden)),
            deconv: Layer::zeros(2, 2, hidden, hidden),
            predictor: Layer::zeros(1, 1, hidden, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Layer| Layer::zeros(l.kernel_h, l.kernel_w, l.c_in, l.c_out);
        Self {
            conv: [
                z(&self.conv[0]),
                z(&self.conv[1]),
                z(&self.conv[2]),
                z(&self.conv[3]),
            ],
            deconv: z(&self.deconv),
            predictor: z(&self.predictor),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.conv[0].c_in
    }

    /// Layers in declaration order.
    pub fn layers(&self) -> [&Layer; 6] {
        [
            &self.conv[0],
            &self.conv[1],
            &self.conv[2],
            &self.conv[3],
            &self.deconv,
            &self.predictor,
        ]
    }

    fn layers_mut(&mut self) -> [&mut Layer; 6] {
        let [c0, c1, c2, c3] = &mut self.conv;
        [c0, c1, c2, c3, &mut self.deconv, &mut self.predictor]
    }

    /// Every scalar in declaration order: per layer, weights then biases.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers()
            .into_iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn len(&self) -> usize {
        self.layers().iter().map(|l| l.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &HeadParams) -> bool {
        self.layers()
            .iter()
            .zip(other.layers())
            .all(|(a, b)| a.dims() == b.dims())
    }

    /// Structural validation for parameters arriving from outside.
    pub fn validate(&self) -> Result<()> {
        let l = self.layers();
        let hidden = l[0].c_out;
        let ok = l[..4].iter().all(|c| c.kernel_h == 3 && c.kernel_w == 3 && c.c_out == hidden)
            && l[1..4].iter().all(|c| c.c_in == hidden)
            && l[4].dims() == [2, 2, hidden, hidden]
            && l[5].dims() == [1, 1, hidden, 1]
            && l.iter().all(|c| {
                c.weight.len() == c.kernel_h * c.kernel_w * c.c_in * c.c_out
                    && c.bias.len() == c.c_out
            });
        if !ok {
            return Err(Error::ParamShape("inconsistent layer dimensions".into()));
        }
        if self.values().any(|v| !v.is_finite()) {
            return Err(Error::ParamShape("non-finite parameter".into()));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Largest double below 1; keeps head outputs strictly inside `(0, 1)`.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

fn conv3x3(x: &[f64], h: usize, w: usize, layer: &Layer) -> Vec<f64> {
    let (ci_n, co_n) = (layer.c_in, layer.c_out);
    let mut out = Vec::with_capacity(h * w * co_n);
    for _ in 0..h * w {
        out.extend_from_slice(&layer.bias);
    }
    for r in 0..h {
        for c in 0..w {
            let o = &mut out[(r * w + c) * co_n..(r * w + c + 1) * co_n];
            for ky in 0..3 {
                let Some(rr) = (r + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(cc) = (c + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let xin = &x[(rr * w + cc) * ci_n..(rr * w + cc + 1) * ci_n];
                    let kbase = (ky * 3 + kx) * ci_n * co_n;
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &layer.weight[kbase + ci * co_n..kbase + (ci + 1) * co_n];
                        for (ov, &wv) in o.iter_mut().zip(wrow) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight/bias gradients into `grad` and returns the input
/// gradient when `want_input` is set.
fn conv3x3_backward(
    x: &[f64],
    dz: &[f64],
    h: usize,
    w: usize,
    layer: &Layer,
    grad: &mut Layer,
    want_input: bool,
) -> Vec<f64> {
    let (ci_n, co_n) = (layer.c_in, layer.c_out);
    let mut dx = if want_input {
        vec![0.0; h * w * ci_n]
    } else {
        Vec::new()
    };
    for r in 0..h {
        for c in 0..w {
            let g = &dz[(r * w + c) * co_n..(r * w + c + 1) * co_n];
            for (b, &gv) in grad.bias.iter_mut().zip(g) {
                *b += gv;
            }
            for ky in 0..3 {
                let Some(rr) = (r + ky).checked_sub(1).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(cc) = (c + kx).checked_sub(1).filter(|&v| v < w) else {
                        continue;
                    };
                    let base_in = (rr * w + cc) * ci_n;
                    let kbase = (ky * 3 + kx) * ci_n * co_n;
                    for ci in 0..ci_n {
                        let xv = x[base_in + ci];
                        let krange = kbase + ci * co_n..kbase + (ci + 1) * co_n;
                        let gw = &mut grad.weight[krange.clone()];
                        for (gwv, &gv) in gw.iter_mut().zip(g) {
                            *gwv += xv * gv;
                        }
                        if want_input {
                            let wrow = &layer.weight[krange];
                            dx[base_in + ci] += wrow.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    height: usize,
    width: usize,
    /// Input to each conv block (index 0 is the attended features).
    conv_inputs: [Vec<f64>; 4],
    /// Post-ReLU output of the last conv block.
    conv_out: Vec<f64>,
    /// Post-ReLU deconv output, 2H×2W×hidden.
    deconv_out: Vec<f64>,
    /// Unclamped sigmoid output.
    probs: Vec<f64>,
}

fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

fn forward_cached(p: &HeadParams, features: &FeatureGrid) -> Result<ForwardCache> {
    if features.channels() != p.input_channels() {
        return Err(Error::shape(
            features.shape_str(),
            format!("head expecting {} input channels", p.input_channels()),
        ));
    }
    let (h, w) = (features.height(), features.width());
    let mut inputs: [Vec<f64>; 4] = Default::default();
    let mut x = features.data().to_vec();
    for (i, layer) in p.conv.iter().enumerate() {
        let mut z = conv3x3(&x, h, w, layer);
        relu_in_place(&mut z);
        inputs[i] = std::mem::replace(&mut x, z);
    }

    let hidden = p.deconv.c_out;
    let (h2, w2) = (2 * h, 2 * w);
    let mut dec = vec![0.0; h2 * w2 * hidden];
    for r in 0..h {
        for c in 0..w {
            let xin = &x[(r * w + c) * p.deconv.c_in..(r * w + c + 1) * p.deconv.c_in];
            for dy in 0..2 {
                for dx in 0..2 {
                    let o_idx = ((2 * r + dy) * w2 + 2 * c + dx) * hidden;
                    let o = &mut dec[o_idx..o_idx + hidden];
                    o.copy_from_slice(&p.deconv.bias);
                    let kbase = (dy * 2 + dx) * p.deconv.c_in * hidden;
                    for (ci, &xv) in xin.iter().enumerate() {
                        let wrow = &p.deconv.weight[kbase + ci * hidden..kbase + (ci + 1) * hidden];
                        for (ov, &wv) in o.iter_mut().zip(wrow) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
    }
    relu_in_place(&mut dec);

    let probs = dec
        .chunks_exact(hidden)
        .map(|cell| {
            let logit = p.predictor.bias[0]
                + cell
                    .iter()
                    .zip(&p.predictor.weight)
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            sigmoid(logit)
        })
        .collect();

    Ok(ForwardCache {
        height: h,
        width: w,
        conv_inputs: inputs,
        conv_out: x,
        deconv_out: dec,
        probs,
    })
}

impl ForwardCache {
    pub fn output(&self) -> MaskGrid {
        MaskGrid::from_raw(
            2 * self.height,
            2 * self.width,
            self.probs
                .iter()
                .map(|&p| p.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP))
                .collect(),
        )
    }
}

/// Mask probabilities at twice the grid resolution.
pub fn head_forward(p: &HeadParams, features: &FeatureGrid) -> Result<MaskGrid> {
    Ok(forward_cached(p, features)?.output())
}

/// Scales `f_t` by the object attention, then runs the head.
pub fn attended_forward(p: &HeadParams, f_t: &FeatureGrid, att: &AttentionMap) -> Result<MaskGrid> {
    head_forward(p, &elementwise_scale(f_t, &att.object)?)
}

fn check_binary_target(gt: &MaskGrid) -> Result<()> {
    if !gt.is_binary() {
        return Err(Error::Input("loss target must be binary".into()));
    }
    Ok(())
}

fn bce(p: f64, g: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
}

/// Mean per-cell binary cross-entropy.
pub fn mask_loss(pred: &MaskGrid, gt: &MaskGrid) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::shape(pred.shape_str(), gt.shape_str()));
    }
    check_binary_target(gt)?;
    let n = pred.data().len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| bce(p, g))
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionLossMode {
    /// Binary cross-entropy of the object channel.
    #[default]
    Standard,
    /// Positive term weighted by `y·y` as the loss is printed; differs from
    /// `Standard` only for soft targets.
    Literal,
}

/// Cell-summed cross-entropy of the object attention against `gt`, divided
/// by the number of cells.
pub fn attention_loss(pred: &AttentionMap, gt: &MaskGrid, mode: AttentionLossMode) -> Result<f64> {
    if !pred.object.same_shape(gt) {
        return Err(Error::shape(pred.object.shape_str(), gt.shape_str()));
    }
    let n = gt.data().len().max(1) as f64;
    let total: f64 = pred
        .object
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let pos = match mode {
                AttentionLossMode::Standard => y,
                AttentionLossMode::Literal => y * y,
            };
            -(pos * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mask_loss: f64,
    pub attention_loss: f64,
    pub attention_weight: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(mask_loss: f64, attention_loss: f64, attention_weight: f64) -> Self {
        Self {
            mask_loss,
            attention_loss,
            attention_weight,
            total: mask_loss + attention_weight * attention_loss,
        }
    }
}

/// One supervised head example.
#[derive(Debug, Clone, Copy)]
pub struct HeadExample<'a> {
    pub features: &'a FeatureGrid,
    pub attention: &'a AttentionMap,
    /// Ground-truth mask at head output resolution (2H×2W).
    pub gt_mask: &'a MaskGrid,
    /// Ground-truth attention at grid resolution (H×W).
    pub gt_attention: &'a MaskGrid,
}

/// Total loss `mask + λ·attention` for the given parameters.
pub fn head_loss(
    p: &HeadParams,
    ex: &HeadExample<'_>,
    attention_weight: f64,
    mode: AttentionLossMode,
) -> Result<LossReport> {
    let pred = attended_forward(p, ex.features, ex.attention)?;
    Ok(LossReport::new(
        mask_loss(&pred, ex.gt_mask)?,
        attention_loss(ex.attention, ex.gt_attention, mode)?,
        attention_weight,
    ))
}

/// Exact gradients of `mask_loss + λ·attention_loss` with respect to every
/// head parameter.
///
/// The attention map is an input of the head, not a function of its
/// parameters, so the attention term contributes a zero gradient; it is
/// still evaluated and reported in the returned [`LossReport`].
pub fn head_gradients(
    p: &HeadParams,
    ex: &HeadExample<'_>,
    attention_weight: f64,
    mode: AttentionLossMode,
) -> Result<(HeadParams, LossReport)> {
    let attended = elementwise_scale(ex.features, &ex.attention.object)?;
    let cache = forward_cached(p, &attended)?;
    let pred = cache.output();
    if !pred.same_shape(ex.gt_mask) {
        return Err(Error::shape(pred.shape_str(), ex.gt_mask.shape_str()));
    }
    let report = LossReport::new(
        mask_loss(&pred, ex.gt_mask)?,
        attention_loss(ex.attention, ex.gt_attention, mode)?,
        attention_weight,
    );

    let mut grads = p.zeros_like();
    let (h, w) = (cache.height, cache.width);
    let hidden = p.deconv.c_out;
    let n_out = cache.probs.len() as f64;

    // d(mean BCE)/d(logit) = (p - g) / N inside the clamp, 0 outside it
    let dlogit: Vec<f64> = cache
        .probs
        .iter()
        .zip(ex.gt_mask.data())
        .map(|(&pr, &g)| {
            if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pr) {
                (pr - g) / n_out
            } else {
                0.0
            }
        })
        .collect();

    // predictor + ReLU after deconv
    let mut ddec = vec![0.0; cache.deconv_out.len()];
    for (i, &dl) in dlogit.iter().enumerate() {
        grads.predictor.bias[0] += dl;
        let cell = &cache.deconv_out[i * hidden..(i + 1) * hidden];
        for k in 0..hidden {
            grads.predictor.weight[k] += cell[k] * dl;
            if cell[k] > 0.0 {
                ddec[i * hidden + k] = p.predictor.weight[k] * dl;
            }
        }
    }

    // transposed convolution
    let ci_n = p.deconv.c_in;
    let w2 = 2 * w;
    let mut dx = vec![0.0; h * w * ci_n];
    for r in 0..h {
        for c in 0..w {
            let in_base = (r * w + c) * ci_n;
            for dy in 0..2 {
                for dxk in 0..2 {
                    let o_idx = ((2 * r + dy) * w2 + 2 * c + dxk) * hidden;
                    let g = &ddec[o_idx..o_idx + hidden];
                    for (b, &gv) in grads.deconv.bias.iter_mut().zip(g) {
                        *b += gv;
                    }
                    let kbase = (dy * 2 + dxk) * ci_n * hidden;
                    for ci in 0..ci_n {
                        let xv = cache.conv_out[in_base + ci];
                        let kr = kbase + ci * hidden..kbase + (ci + 1) * hidden;
                        for (gw, &gv) in grads.deconv.weight[kr.clone()].iter_mut().zip(g) {
                            *gw += xv * gv;
                        }
                        dx[in_base + ci] += p.deconv.weight[kr]
                            .iter()
                            .zip(g)
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            }
        }
    }

    // conv blocks, last to first; block i's output is block i+1's input
    let mut dout = dx;
    for i in (0..4).rev() {
        let out = if i == 3 {
            &cache.conv_out
        } else {
            &cache.conv_inputs[i + 1]
        };
        let dz: Vec<f64> = dout
            .iter()
            .zip(out)
            .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
            .collect();
        dout = conv3x3_backward(
            &cache.conv_inputs[i],
            &dz,
            h,
            w,
            &p.conv[i],
            &mut grads.conv[i],
            i > 0,
        );
    }
    Ok((grads, report))
}

/// Post-ReLU activation pattern of every hidden unit; used by the gradient
/// checker to detect finite-difference steps that cross a ReLU kink.
pub fn activation_pattern(p: &HeadParams, features: &FeatureGrid) -> Result<Vec<bool>> {
    let cache = forward_cached(p, features)?;
    Ok(cache.conv_inputs[1..]
        .iter()
        .chain([&cache.conv_out, &cache.deconv_out])
        .flat_map(|v| v.iter().map(|&x| x > 0.0))
        .collect())
}
