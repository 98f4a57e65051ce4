//! Inter-frame affinity, row normalization, box-map propagation and the
//! object/background attention built from it.
//!
//! Affinity rows index cells of the current frame and columns index cells
//! of the reference (earlier) frame, so multiplying the row-normalized
//! matrix by a vectorized reference-frame map transports that map onto the
//! current frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{matmul, unvectorize_mask, vectorize_mask, FeatureGrid, MaskGrid, Matrix};

/// Tolerance used when checking that a matrix is row-stochastic.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Pixel box covering `[x1, x2) × [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BoundingBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        if x1 >= x2 || y1 >= y2 {
            return Err(Error::Input(format!(
                "degenerate box ({x1},{y1},{x2},{y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width()) * u64::from(self.height())
    }

    /// Intersection with `[0, width) × [0, height)`; `None` when empty.
    pub fn clamped(&self, width: u32, height: u32) -> Option<BoundingBox> {
        let b = BoundingBox {
            x1: self.x1.min(width),
            y1: self.y1.min(height),
            x2: self.x2.min(width),
            y2: self.y2.min(height),
        };
        (b.x1 < b.x2 && b.y1 < b.y2).then_some(b)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = self.x2.min(other.x2).saturating_sub(self.x1.max(other.x1));
        let iy = self.y2.min(other.y2).saturating_sub(self.y1.max(other.y1));
        let inter = u64::from(ix) * u64::from(iy);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Tight box around the set pixels of a mask.
    pub fn from_mask(mask: &crate::grid::BinaryMask) -> Option<BoundingBox> {
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for r in 0..mask.height() {
            for c in 0..mask.width() {
                if mask.get(r, c) {
                    x1 = x1.min(c);
                    y1 = y1.min(r);
                    x2 = x2.max(c + 1);
                    y2 = y2.max(r + 1);
                }
            }
        }
        (x2 > 0).then_some(BoundingBox {
            x1: x1 as u32,
            y1: y1 as u32,
            x2: x2 as u32,
            y2: y2 as u32,
        })
    }
}

impl std::fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.x1, self.y1, self.x2, self.y2)
    }
}

/// Marks every cell whose pixel footprint overlaps the box. The box is first
/// clamped to the `grid_h·stride × grid_w·stride` image.
pub fn box_to_binary_map(
    bbox: &BoundingBox,
    grid_h: usize,
    grid_w: usize,
    stride: usize,
) -> Result<MaskGrid> {
    let clamped = bbox
        .clamped((grid_w * stride) as u32, (grid_h * stride) as u32)
        .ok_or_else(|| Error::EmptyMap(bbox.to_string()))?;
    let s = stride as u32;
    let mut data = vec![0.0; grid_h * grid_w];
    for r in 0..grid_h as u32 {
        for c in 0..grid_w as u32 {
            let overlaps = c * s < clamped.x2
                && (c + 1) * s > clamped.x1
                && r * s < clamped.y2
                && (r + 1) * s > clamped.y1;
            if overlaps {
                data[(r * grid_w as u32 + c) as usize] = 1.0;
            }
        }
    }
    Ok(MaskGrid::from_raw(grid_h, grid_w, data))
}

/// `1 - b` for a binary map.
pub fn invert_map(b: &MaskGrid) -> Result<MaskGrid> {
    if !b.is_binary() {
        return Err(Error::Input("invert_map expects a binary map".into()));
    }
    Ok(MaskGrid::from_raw(
        b.height(),
        b.width(),
        b.data().iter().map(|v| 1.0 - v).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizeMode {
    #[default]
    L1,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    matrix: Matrix,
    mode: Option<NormalizeMode>,
}

impl AffinityMatrix {
    pub fn from_matrix(matrix: Matrix) -> Result<Self> {
        if matrix.rows() != matrix.cols() {
            return Err(Error::shape(matrix.shape_str(), "square matrix"));
        }
        Ok(Self { matrix, mode: None })
    }

    /// Wraps an already row-stochastic matrix, checking the contract.
    pub fn from_normalized(matrix: Matrix, mode: NormalizeMode) -> Result<Self> {
        let a = Self::from_matrix(matrix)?;
        if !a.is_row_stochastic(ROW_SUM_TOLERANCE) {
            return Err(Error::Contract("matrix is not row-stochastic".into()));
        }
        Ok(Self {
            mode: Some(mode),
            ..a
        })
    }

    pub fn side(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn is_normalized(&self) -> bool {
        self.mode.is_some()
    }

    pub fn mode(&self) -> Option<NormalizeMode> {
        self.mode
    }

    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        (0..self.side()).all(|r| {
            let row = self.matrix.row(r);
            row.iter().all(|&v| (0.0..=1.0).contains(&v))
                && (row.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }
}

/// `F_t · F_prevᵀ`: entry `(i, j)` is the dot product of current-frame cell
/// `i` with reference-frame cell `j`.
pub fn inter_frame_affinity(f_t: &FeatureGrid, f_prev: &FeatureGrid) -> Result<AffinityMatrix> {
    if f_t.height() != f_prev.height()
        || f_t.width() != f_prev.width()
        || f_t.channels() != f_prev.channels()
    {
        return Err(Error::shape(f_t.shape_str(), f_prev.shape_str()));
    }
    let w = matmul(&f_t.as_matrix(), &f_prev.as_matrix().transpose())?;
    AffinityMatrix::from_matrix(w)
}

pub fn normalize_affinity(
    w: &AffinityMatrix,
    mode: NormalizeMode,
    temperature: f64,
    epsilon: f64,
) -> Result<AffinityMatrix> {
    if !(temperature > 0.0) {
        return Err(Error::Input(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Input(format!("epsilon must be positive, got {epsilon}")));
    }
    let n = w.side();
    let mut m = w.matrix.clone();
    for r in 0..n {
        let row = m.row_mut(r);
        match mode {
            NormalizeMode::L1 => {
                row.iter_mut().for_each(|v| *v = v.max(0.0));
                let sum: f64 = row.iter().sum();
                if sum > 0.0 {
                    row.iter_mut().for_each(|v| *v /= sum + epsilon);
                } else {
                    row.iter_mut().for_each(|v| *v = 1.0 / n as f64);
                }
            }
            NormalizeMode::Softmax => {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = ((*v - max) / temperature).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
        }
    }
    Ok(AffinityMatrix { matrix: m, mode: Some(mode) })
}

/// Transports the reference-frame object and background maps onto the
/// current frame: `a = W · vec(b)`.
pub fn propagate(
    w: &AffinityMatrix,
    b_obj: &MaskGrid,
    b_bg: &MaskGrid,
) -> Result<(MaskGrid, MaskGrid)> {
    if !w.is_normalized() {
        return Err(Error::Contract(
            "propagation needs a row-normalized affinity matrix".into(),
        ));
    }
    if !b_obj.same_shape(b_bg) {
        return Err(Error::shape(b_obj.shape_str(), b_bg.shape_str()));
    }
    let cells = b_obj.height() * b_obj.width();
    if cells != w.side() {
        return Err(Error::shape(w.matrix.shape_str(), b_obj.shape_str()));
    }
    let carry = |b: &MaskGrid| -> Result<MaskGrid> {
        let v = matmul(&w.matrix, &vectorize_mask(b))?;
        // convex combinations can land a rounding step outside [0, 1]
        let clipped = v.data().iter().map(|x| x.clamp(0.0, 1.0)).collect();
        unvectorize_mask(&Matrix::from_vec(cells, 1, clipped)?, b.height(), b.width())
    };
    Ok((carry(b_obj)?, carry(b_bg)?))
}

/// Per-cell two-way softmax over the propagated object and background maps.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub object: MaskGrid,
    pub background: MaskGrid,
}

impl AttentionMap {
    pub fn height(&self) -> usize {
        self.object.height()
    }

    pub fn width(&self) -> usize {
        self.object.width()
    }

    /// Uniform attention with the given object value.
    pub fn uniform(height: usize, width: usize, object: f64) -> Self {
        Self {
            object: MaskGrid::filled(height, width, object),
            background: MaskGrid::filled(height, width, 1.0 - object),
        }
    }

    pub fn from_object(object: MaskGrid) -> Self {
        let background = MaskGrid::from_raw(
            object.height(),
            object.width(),
            object.data().iter().map(|v| 1.0 - v).collect(),
        );
        Self { object, background }
    }
}

pub fn attention_from_propagation(
    a_obj: &MaskGrid,
    a_bg: &MaskGrid,
    temperature: f64,
) -> Result<AttentionMap> {
    if !(temperature > 0.0) {
        return Err(Error::Input(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !a_obj.same_shape(a_bg) {
        return Err(Error::shape(a_obj.shape_str(), a_bg.shape_str()));
    }
    let (h, w) = (a_obj.height(), a_obj.width());
    let mut obj = Vec::with_capacity(h * w);
    let mut bg = Vec::with_capacity(h * w);
    for (&o, &b) in a_obj.data().iter().zip(a_bg.data()) {
        let m = o.max(b);
        let eo = ((o - m) / temperature).exp();
        let eb = ((b - m) / temperature).exp();
        obj.push(eo / (eo + eb));
        bg.push(eb / (eo + eb));
    }
    Ok(AttentionMap {
        object: MaskGrid::from_raw(h, w, obj),
        background: MaskGrid::from_raw(h, w, bg),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationConfig {
    pub mode: NormalizeMode,
    /// Softmax temperature for row normalization (softmax mode only).
    pub row_temperature: f64,
    pub attention_temperature: f64,
    pub epsilon: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            mode: NormalizeMode::L1,
            row_temperature: 1.0,
            attention_temperature: 1.0,
            epsilon: 1e-12,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("row_temperature", self.row_temperature),
            ("attention_temperature", self.attention_temperature),
            ("epsilon", self.epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("propagation.{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Normalized affinity for a frame pair; shareable across all instances
    /// propagated between the same two frames.
    pub fn affinity(&self, f_t: &FeatureGrid, f_prev: &FeatureGrid) -> Result<AffinityMatrix> {
        let w = inter_frame_affinity(f_t, f_prev)?;
        normalize_affinity(&w, self.mode, self.row_temperature, self.epsilon)
    }

    /// Attention for one instance box given a precomputed normalized affinity.
    pub fn attention_for_box(
        &self,
        affinity: &AffinityMatrix,
        bbox: &BoundingBox,
        grid_h: usize,
        grid_w: usize,
        stride: usize,
    ) -> Result<AttentionMap> {
        let b_obj = box_to_binary_map(bbox, grid_h, grid_w, stride)?;
        let b_bg = invert_map(&b_obj)?;
        let (a_obj, a_bg) = propagate(affinity, &b_obj, &b_bg)?;
        attention_from_propagation(&a_obj, &a_bg, self.attention_temperature)
    }
}

/// Box map → inverted map → affinity → normalization → propagation →
/// attention, for a single instance.
pub fn propagate_attention(
    f_t: &FeatureGrid,
    f_prev: &FeatureGrid,
    bbox: &BoundingBox,
    cfg: &PropagationConfig,
) -> Result<AttentionMap> {
    cfg.validate()?;
    let affinity = cfg.affinity(f_t, f_prev)?;
    cfg.attention_for_box(&affinity, bbox, f_t.height(), f_t.width(), f_prev.stride())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_hot_grid(h: usize, w: usize) -> FeatureGrid {
        let n = h * w;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        FeatureGrid::new(h, w, n, 8, data).unwrap()
    }

    fn set_cells(m: &MaskGrid) -> Vec<(usize, usize)> {
        let mut out = vec![];
        for r in 0..m.height() {
            for c in 0..m.width() {
                if m.get(r, c) == 1.0 {
                    out.push((r, c));
                }
            }
        }
        out
    }

    #[test]
    fn box_map_cases() {
        let full = BoundingBox::new(0, 0, 16, 16).unwrap();
        assert!(box_to_binary_map(&full, 2, 2, 8).unwrap().data().iter().all(|&v| v == 1.0));

        let cell = BoundingBox::new(0, 0, 8, 8).unwrap();
        assert_eq!(set_cells(&box_to_binary_map(&cell, 2, 2, 8).unwrap()), vec![(0, 0)]);

        let straddle = BoundingBox::new(4, 4, 12, 12).unwrap();
        assert_eq!(
            set_cells(&box_to_binary_map(&straddle, 2, 2, 8).unwrap()),
            vec![(0, 0), (0, 1), (1, 0), (1, 1)]
        );

        let outside = BoundingBox::new(40, 40, 50, 50).unwrap();
        assert!(matches!(
            box_to_binary_map(&outside, 2, 2, 8),
            Err(Error::EmptyMap(_))
        ));
    }

    /// Brute-force: a cell is set iff some pixel of the cell lies in the box.
    #[test]
    fn box_map_matches_pixel_overlap_oracle() {
        let (gh, gw, s) = (5usize, 6usize, 4usize);
        let mut seed = 17u64;
        let mut next = |m: u32| {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as u32) % m
        };
        for _ in 0..300 {
            let (x1, y1) = (next(30), next(26));
            let b = BoundingBox::new(x1, y1, x1 + 1 + next(12), y1 + 1 + next(12)).unwrap();
            let Ok(map) = box_to_binary_map(&b, gh, gw, s) else {
                assert!(b.clamped((gw * s) as u32, (gh * s) as u32).is_none());
                continue;
            };
            for r in 0..gh {
                for c in 0..gw {
                    let hit = (r * s..(r + 1) * s).any(|y| {
                        (c * s..(c + 1) * s).any(|x| {
                            (b.x1 as usize..b.x2 as usize).contains(&x)
                                && (b.y1 as usize..b.y2 as usize).contains(&y)
                        })
                    });
                    assert_eq!(map.get(r, c) == 1.0, hit, "box {b} cell ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn invert_cases() {
        let ones = MaskGrid::filled(2, 3, 1.0);
        assert!(invert_map(&ones).unwrap().data().iter().all(|&v| v == 0.0));
        let diag = MaskGrid::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(invert_map(&diag).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(invert_map(&invert_map(&diag).unwrap()).unwrap(), diag);
        assert!(invert_map(&MaskGrid::filled(2, 2, 0.5)).is_err());
    }

    #[test]
    fn affinity_cases() {
        let g = one_hot_grid(2, 3);
        assert_eq!(inter_frame_affinity(&g, &g).unwrap().matrix(), &Matrix::identity(6));

        let shared = FeatureGrid::new(2, 2, 2, 1, [0.6, 0.8].repeat(4)).unwrap();
        let w = inter_frame_affinity(&shared, &shared).unwrap();
        assert!(w.matrix().data().iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let ft = FeatureGrid::new(2, 1, 2, 1, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let fp = FeatureGrid::new(2, 1, 2, 1, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let w = inter_frame_affinity(&ft, &fp).unwrap();
        assert_eq!(w.matrix().data(), &[1.0, 0.0, 2.0, 2.0]);
        assert!(!w.is_normalized());

        let other = FeatureGrid::new(1, 2, 2, 1, vec![0.0; 4]).unwrap();
        assert!(inter_frame_affinity(&ft, &other).is_err());
    }

    fn normalize_row(row: &[f64], mode: NormalizeMode, t: f64, eps: f64) -> Vec<f64> {
        let n = row.len();
        let mut data = vec![0.0; n * n];
        data[..n].copy_from_slice(row);
        let w = AffinityMatrix::from_matrix(Matrix::from_vec(n, n, data).unwrap()).unwrap();
        normalize_affinity(&w, mode, t, eps).unwrap().matrix().row(0).to_vec()
    }

    #[test]
    fn normalization_cases() {
        let r = normalize_row(&[2.0, 2.0], NormalizeMode::L1, 1.0, 1e-12);
        assert!((r[0] - 0.5).abs() < 1e-9 && (r[1] - 0.5).abs() < 1e-9);

        let r = normalize_row(&[0.0, 0.0, 0.0], NormalizeMode::Softmax, 1.0, 1e-8);
        assert!(r.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let r = normalize_row(&[1.0, 3.0], NormalizeMode::L1, 1.0, 1e-8);
        assert!((r[0] - 0.25).abs() < 1e-6 && (r[1] - 0.75).abs() < 1e-6);

        // all non-positive l1 rows fall back to uniform
        let r = normalize_row(&[-1.0, 0.0, -3.0], NormalizeMode::L1, 1.0, 1e-8);
        assert!(r.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let w = AffinityMatrix::from_matrix(Matrix::identity(2)).unwrap();
        assert!(normalize_affinity(&w, NormalizeMode::Softmax, 0.0, 1e-8).is_err());
        assert!(normalize_affinity(&w, NormalizeMode::L1, -1.0, 1e-8).is_err());
    }

    #[test]
    fn softmax_survives_large_logits() {
        let r = normalize_row(&[1000.0, 999.0], NormalizeMode::Softmax, 0.01, 1e-8);
        assert!(r.iter().all(|v| v.is_finite()));
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn propagate_cases() {
        let b = MaskGrid::new(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let bg = invert_map(&b).unwrap();
        let id = AffinityMatrix::from_normalized(Matrix::identity(4), NormalizeMode::L1).unwrap();
        let (o, g) = propagate(&id, &b, &bg).unwrap();
        assert_eq!((o, g), (b.clone(), bg.clone()));

        let uni =
            AffinityMatrix::from_normalized(Matrix::from_vec(4, 4, vec![0.25; 16]).unwrap(), NormalizeMode::L1)
                .unwrap();
        let (o, _) = propagate(&uni, &b, &bg).unwrap();
        assert!(o.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));

        let w = AffinityMatrix::from_normalized(
            Matrix::from_rows(&[vec![0.8, 0.2], vec![0.3, 0.7]]).unwrap(),
            NormalizeMode::L1,
        )
        .unwrap();
        let b = MaskGrid::new(2, 1, vec![1.0, 0.0]).unwrap();
        let (o, _) = propagate(&w, &b, &invert_map(&b).unwrap()).unwrap();
        assert!((o.data()[0] - 0.8).abs() < 1e-15 && (o.data()[1] - 0.3).abs() < 1e-15);

        let raw = AffinityMatrix::from_matrix(Matrix::identity(2)).unwrap();
        assert!(matches!(propagate(&raw, &b, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn attention_cases() {
        let a = MaskGrid::new(1, 3, vec![0.2, 0.5, 0.9]).unwrap();
        let att = attention_from_propagation(&a, &a, 1.0).unwrap();
        assert!(att.object.data().iter().all(|&v| v == 0.5));

        let one = MaskGrid::filled(1, 1, 1.0);
        let zero = MaskGrid::filled(1, 1, 0.0);
        let att = attention_from_propagation(&one, &zero, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((att.object.data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((att.object.data()[0] - 0.7311).abs() < 1e-4);

        let hi = MaskGrid::filled(1, 1, 0.6);
        let lo = MaskGrid::filled(1, 1, 0.4);
        let att = attention_from_propagation(&hi, &lo, 1e-3).unwrap();
        assert!((att.object.data()[0] - 1.0).abs() < 1e-3);

        assert!(attention_from_propagation(&hi, &lo, 0.0).is_err());
    }

    #[test]
    fn identical_one_hot_frames_highlight_box_cells() {
        let g = one_hot_grid(4, 4);
        let bbox = BoundingBox::new(8, 0, 24, 16).unwrap();
        for mode in [NormalizeMode::L1, NormalizeMode::Softmax] {
            let cfg = PropagationConfig {
                mode,
                row_temperature: 0.05,
                ..Default::default()
            };
            let att = propagate_attention(&g, &g, &bbox, &cfg).unwrap();
            let map = box_to_binary_map(&bbox, 4, 4, 8).unwrap();
            for (o, b) in att.object.data().iter().zip(map.data()) {
                assert_eq!(*o > 0.5, *b == 1.0);
            }
        }
    }

    #[test]
    fn whole_image_box_gives_object_everywhere() {
        let g = one_hot_grid(3, 3);
        let bbox = BoundingBox::new(0, 0, 24, 24).unwrap();
        let att = propagate_attention(&g, &g, &bbox, &PropagationConfig::default()).unwrap();
        assert!(att.object.data().iter().all(|&v| v >= 0.5));
    }

    fn grid_pair(
        h: usize,
        w: usize,
        c: usize,
    ) -> impl Strategy<Value = (FeatureGrid, FeatureGrid)> {
        let n = h * w * c;
        (
            proptest::collection::vec(-1.0f64..1.0, n),
            proptest::collection::vec(-1.0f64..1.0, n),
        )
            .prop_map(move |(a, b)| {
                (
                    FeatureGrid::new(h, w, c, 4, a).unwrap(),
                    FeatureGrid::new(h, w, c, 4, b).unwrap(),
                )
            })
    }

    proptest! {
        #[test]
        fn normalized_rows_are_stochastic(
            (ft, fp) in grid_pair(3, 4, 5),
            softmax in any::<bool>(),
            t in 0.05f64..5.0,
        ) {
            let mode = if softmax { NormalizeMode::Softmax } else { NormalizeMode::L1 };
            let w = normalize_affinity(&inter_frame_affinity(&ft, &fp).unwrap(), mode, t, 1e-8).unwrap();
            prop_assert!(w.is_row_stochastic(1e-6));
        }

        #[test]
        fn propagation_conserves_mass(
            (ft, fp) in grid_pair(3, 3, 4),
            bits in proptest::collection::vec(any::<bool>(), 9),
        ) {
            let b = MaskGrid::new(3, 3, bits.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect()).unwrap();
            let w = normalize_affinity(&inter_frame_affinity(&ft, &fp).unwrap(), NormalizeMode::Softmax, 1.0, 1e-8).unwrap();
            let (o, g) = propagate(&w, &b, &invert_map(&b).unwrap()).unwrap();
            prop_assert!((o.sum() + g.sum() - 9.0).abs() < 1e-6);
            let att = attention_from_propagation(&o, &g, 0.7).unwrap();
            for (x, y) in att.object.data().iter().zip(att.background.data()) {
                prop_assert!((x + y - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn permuting_reference_cells_is_invisible(
            (ft, fp) in grid_pair(2, 3, 3),
            bits in proptest::collection::vec(any::<bool>(), 6),
            perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let b: Vec<f64> = bits.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
            let mut fp_perm = vec![0.0; 18];
            let mut b_perm = vec![0.0; 6];
            for (dst, &src) in perm.iter().enumerate() {
                fp_perm[dst * 3..dst * 3 + 3].copy_from_slice(fp.cell(src));
                b_perm[dst] = b[src];
            }
            let fp_perm = FeatureGrid::new(2, 3, 3, 4, fp_perm).unwrap();
            let run = |f: &FeatureGrid, bm: Vec<f64>| {
                let m = MaskGrid::new(2, 3, bm).unwrap();
                let w = normalize_affinity(&inter_frame_affinity(&ft, f).unwrap(), NormalizeMode::Softmax, 1.0, 1e-8).unwrap();
                propagate(&w, &m, &invert_map(&m).unwrap()).unwrap()
            };
            let (o1, g1) = run(&fp, b);
            let (o2, g2) = run(&fp_perm, b_perm);
            for (x, y) in o1.data().iter().zip(o2.data()).chain(g1.data().iter().zip(g2.data())) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn identity_recovery(bits in proptest::collection::vec(any::<bool>(), 12)) {
            let g = one_hot_grid(3, 4);
            let b = MaskGrid::new(3, 4, bits.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect()).unwrap();
            let w = normalize_affinity(&inter_frame_affinity(&g, &g).unwrap(), NormalizeMode::L1, 1.0, 1e-12).unwrap();
            let (o, _) = propagate(&w, &b, &invert_map(&b).unwrap()).unwrap();
            for (x, y) in o.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
