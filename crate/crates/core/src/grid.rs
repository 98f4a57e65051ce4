//! Dense grids and small row-major matrices.
//!
//! Every grid in the crate is flattened row-major: cell `(row, col)` lives at
//! index `row * width + col`, and per-cell channels are contiguous. All
//! arithmetic is `f64`.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("matrix contains non-finite values".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged matrix rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// `a · b`, accumulated in `f64`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(a.shape_str(), b.shape_str()));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Ok(out)
}

/// H×W×C grid of per-cell features sampled at `stride` pixels per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    stride: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        stride: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                format!("{height}x{width}x{channels}"),
                format!("{} values", data.len()),
            ));
        }
        if stride == 0 {
            return Err(Error::Input("stride must be at least 1".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("feature grid contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            stride,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, stride: usize) -> Self {
        Self {
            height,
            width,
            channels,
            stride: stride.max(1),
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Feature vector of flattened cell `i`.
    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    /// The grid viewed as an (H·W)×C matrix.
    pub fn as_matrix(&self) -> Matrix {
        Matrix {
            rows: self.cells(),
            cols: self.channels,
            data: self.data.clone(),
        }
    }
}

/// H×W grid of values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl MaskGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width}"),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("mask values must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    /// Constructor for values already known to be in range.
    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn same_shape(&self, other: &MaskGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.height, self.width)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Cells `>= threshold` become set.
    pub fn binarize(&self, threshold: f64) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v >= threshold).collect(),
        }
    }
}

/// Row-major flattening of a mask into an (H·W)×1 column.
pub fn vectorize_mask(m: &MaskGrid) -> Matrix {
    Matrix {
        rows: m.data.len(),
        cols: 1,
        data: m.data.clone(),
    }
}

/// Inverse of [`vectorize_mask`].
pub fn unvectorize_mask(v: &Matrix, height: usize, width: usize) -> Result<MaskGrid> {
    if v.cols != 1 || v.rows != height * width {
        return Err(Error::shape(v.shape_str(), format!("{}x1", height * width)));
    }
    MaskGrid::new(height, width, v.data.clone())
}

/// Scales every channel of cell `(r, c)` by `attention[r][c]`.
pub fn elementwise_scale(features: &FeatureGrid, attention: &MaskGrid) -> Result<FeatureGrid> {
    if features.height != attention.height || features.width != attention.width {
        return Err(Error::shape(features.shape_str(), attention.shape_str()));
    }
    let c = features.channels;
    let mut out = features.clone();
    for (cell, &a) in out.data.chunks_exact_mut(c.max(1)).zip(&attention.data) {
        for v in cell {
            *v *= a;
        }
    }
    Ok(out)
}

/// Image-resolution binary mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{height}x{width}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.height, self.width)
    }

    pub fn intersection_area(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union_area(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a || b)
            .count()
    }

    pub fn to_mask_grid(&self) -> MaskGrid {
        MaskGrid::from_raw(
            self.height,
            self.width,
            self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Set cells minus `other`.
    pub fn subtract(&mut self, other: &BinaryMask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a && !b;
        }
    }

    /// Morphological erosion with a 3×3 square element, `iterations` times.
    /// Pixels outside the image count as unset.
    pub fn eroded(&self, iterations: usize) -> BinaryMask {
        let mut cur = self.clone();
        for _ in 0..iterations {
            let prev = cur.clone();
            for r in 0..self.height {
                for c in 0..self.width {
                    if !prev.get(r, c) {
                        continue;
                    }
                    let keep = (-1i64..=1).all(|dr| {
                        (-1i64..=1).all(|dc| {
                            let rr = r as i64 + dr;
                            let cc = c as i64 + dc;
                            rr >= 0
                                && cc >= 0
                                && (rr as usize) < self.height
                                && (cc as usize) < self.width
                                && prev.get(rr as usize, cc as usize)
                        })
                    });
                    cur.set(r, c, keep);
                }
            }
        }
        cur
    }
}

impl TryFrom<&MaskGrid> for BinaryMask {
    type Error = Error;

    fn try_from(m: &MaskGrid) -> Result<Self> {
        if !m.is_binary() {
            return Err(Error::Input("mask is not binary".into()));
        }
        Ok(m.binarize(0.5))
    }
}
