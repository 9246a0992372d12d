//! Dense kernels: row-major matrices, patch grids, matmul, softmax, layer
//! norm, the GELU MLP and the spatial resampling primitives.
//!
//! Values are stored in `T` (f32 or f64). Every reduction accumulates in f64
//! in a fixed order, and results are rounded back to `T` once per kernel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Storage element for matrices and token tensors.
pub trait Scalar:
    Copy + Default + PartialEq + PartialOrd + std::fmt::Debug + Send + Sync + 'static
{
    /// Byte width of one element.
    const WIDTH: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// Decodes one element from exactly `WIDTH` little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;
    fn is_finite(self) -> bool {
        self.to_f64().is_finite()
    }
}

impl Scalar for f32 {
    const WIDTH: usize = 4;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const WIDTH: usize = 8;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::default(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_f64(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        Self::from_vec(rows, cols, values.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_f64(rows.len(), cols, &flat)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::from_f64(1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks the rows of `parts` in order. All parts must share a column count.
    pub fn vstack(parts: &[&Matrix<T>]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::with_capacity(parts.iter().map(|m| m.data.len()).sum());
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::ChannelMismatch {
                    expected: cols,
                    actual: m.cols,
                });
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn add(&self, other: &Matrix<T>) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| T::from_f64(a.to_f64() + b.to_f64()))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| T::from_f64(f(v.to_f64()))).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// `a · b` with f64 accumulation in ascending inner-index order.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![T::default(); n * m];
    if m == 0 {
        return Matrix::from_vec(n, m, out);
    }
    out.par_chunks_mut(m).enumerate().for_each(|(i, out_row)| {
        let mut acc = vec![0f64; m];
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let av = av.to_f64();
            let b_row = &b.data[p * m..(p + 1) * m];
            for (slot, &bv) in acc.iter_mut().zip(b_row) {
                *slot += av * bv.to_f64();
            }
        }
        for (o, v) in out_row.iter_mut().zip(acc) {
            *o = T::from_f64(v);
        }
    });
    Matrix::from_vec(n, m, out)
}

/// In-place softmax over a row of logits. `-inf` entries receive zero mass.
/// Returns `false` when every entry is `-inf`, leaving the row all zeros.
pub(crate) fn softmax_in_place(row: &mut [f64]) -> bool {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return false;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    true
}

/// Row-wise `exp(x - rowmax) / Σ exp(x - rowmax)`.
pub fn stable_softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(m.rows, m.cols);
    let mut buf = vec![0f64; m.cols];
    for r in 0..m.rows {
        for (b, v) in buf.iter_mut().zip(m.row(r)) {
            *b = v.to_f64();
        }
        softmax_in_place(&mut buf);
        for (o, &b) in out.row_mut(r).iter_mut().zip(&buf) {
            *o = T::from_f64(b);
        }
    }
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Per-row normalization to zero mean and unit (biased) variance, then
/// `gamma * x + beta`.
pub fn layer_norm<T: Scalar>(x: &Matrix<T>, gamma: &[T], beta: &[T], eps: f64) -> Result<Matrix<T>> {
    if gamma.len() != x.cols || beta.len() != x.cols {
        return Err(Error::ChannelMismatch {
            expected: x.cols,
            actual: gamma.len().min(beta.len()),
        });
    }
    let cols = x.cols;
    let mut out = vec![T::default(); x.data.len()];
    if cols == 0 {
        return Matrix::from_vec(x.rows, cols, out);
    }
    out.par_chunks_mut(cols).enumerate().for_each(|(r, out_row)| {
        let row = x.row(r);
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / cols as f64;
        let var = row
            .iter()
            .map(|v| {
                let d = v.to_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / cols as f64;
        let denom = (var + eps).sqrt();
        let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        for (j, o) in out_row.iter_mut().enumerate() {
            let normed = (row[j].to_f64() - mean) * inv;
            *o = T::from_f64(normed * gamma[j].to_f64() + beta[j].to_f64());
        }
    });
    Matrix::from_vec(x.rows, cols, out)
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// Two-layer perceptron `gelu(x·w1 + b1)·w2 + b2`.
pub fn mlp<T: Scalar>(
    x: &Matrix<T>,
    w1: &Matrix<T>,
    b1: &[T],
    w2: &Matrix<T>,
    b2: &[T],
) -> Result<Matrix<T>> {
    let hidden = add_bias(&matmul(x, w1)?, b1)?.map(gelu);
    add_bias(&matmul(&hidden, w2)?, b2)
}

pub fn add_bias<T: Scalar>(x: &Matrix<T>, bias: &[T]) -> Result<Matrix<T>> {
    if bias.len() != x.cols {
        return Err(Error::ChannelMismatch {
            expected: x.cols,
            actual: bias.len(),
        });
    }
    let mut out = x.clone();
    for r in 0..out.rows {
        for (v, b) in out.row_mut(r).iter_mut().zip(bias) {
            *v = T::from_f64(v.to_f64() + b.to_f64());
        }
    }
    Ok(out)
}

/// H × W × C patch grid, row-major over (row, col, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Grid<T> {
    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {height}x{width}x{channels} grid",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for i in 0..height {
            for j in 0..width {
                for c in 0..channels {
                    data.push(T::from_f64(f(i, j, c)));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Channel vector at grid cell (i, j).
    pub fn token(&self, i: usize, j: usize) -> &[T] {
        let start = (i * self.width + j) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Flattens into an (H·W) × C matrix in row-major cell order.
    pub fn to_matrix(&self) -> Matrix<T> {
        Matrix {
            rows: self.height * self.width,
            cols: self.channels,
            data: self.data.clone(),
        }
    }

    pub fn from_matrix(height: usize, width: usize, m: Matrix<T>) -> Result<Self> {
        if m.rows != height * width {
            return Err(Error::Shape(format!(
                "{} rows cannot form a {height}x{width} grid",
                m.rows
            )));
        }
        let channels = m.cols;
        Self::from_vec(height, width, channels, m.data)
    }
}

/// Source coordinate of output sample `k` under half-pixel alignment.
#[inline]
pub fn half_pixel_source(k: usize, input: usize, output: usize) -> f64 {
    (k as f64 + 0.5) * input as f64 / output as f64 - 0.5
}

fn check_target(h: usize, w: usize, out_h: usize, out_w: usize) -> Result<()> {
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape(format!("empty resample {h}x{w} -> {out_h}x{out_w}")));
    }
    if out_h > h || out_w > w {
        return Err(Error::TargetTooLarge {
            source_h: h,
            source_w: w,
            target_h: out_h,
            target_w: out_w,
        });
    }
    Ok(())
}

/// Interpolation taps along one axis: (lower index, upper index, upper weight).
fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|k| {
            let src = half_pixel_source(k, input, output).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear downsampling with half-pixel centers. Equal sizes return the
/// input unchanged.
pub fn resample_bilinear<T: Scalar>(grid: &Grid<T>, out_h: usize, out_w: usize) -> Result<Grid<T>> {
    check_target(grid.height, grid.width, out_h, out_w)?;
    if out_h == grid.height && out_w == grid.width {
        return Ok(grid.clone());
    }
    let rows = linear_taps(grid.height, out_h);
    let cols = linear_taps(grid.width, out_w);
    let c = grid.channels;
    let mut data = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            let weights = [
                ((y0, x0), (1.0 - fy) * (1.0 - fx)),
                ((y0, x1), (1.0 - fy) * fx),
                ((y1, x0), fy * (1.0 - fx)),
                ((y1, x1), fy * fx),
            ];
            for ch in 0..c {
                let v: f64 = weights
                    .iter()
                    .map(|&((i, j), wgt)| wgt * grid.token(i, j)[ch].to_f64())
                    .sum();
                data.push(T::from_f64(v));
            }
        }
    }
    Grid::from_vec(out_h, out_w, c, data)
}

/// Nearest-neighbour index along one axis; exact halves round down.
pub fn nearest_index(k: usize, input: usize, output: usize) -> usize {
    let src = half_pixel_source(k, input, output);
    ((src - 0.5).ceil().max(0.0) as usize).min(input - 1)
}

/// Nearest-neighbour downsampling with half-pixel centers; every output is a
/// verbatim copy of one input token.
pub fn resample_nearest<T: Scalar>(grid: &Grid<T>, out_h: usize, out_w: usize) -> Result<Grid<T>> {
    check_target(grid.height, grid.width, out_h, out_w)?;
    let mut data = Vec::with_capacity(out_h * out_w * grid.channels);
    for i in 0..out_h {
        let si = nearest_index(i, grid.height, out_h);
        for j in 0..out_w {
            let sj = nearest_index(j, grid.width, out_w);
            data.extend_from_slice(grid.token(si, sj));
        }
    }
    Grid::from_vec(out_h, out_w, grid.channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix<f64> {
        let v: Vec<f64> = (0..rows * cols).map(|_| rng.normal()).collect();
        Matrix::from_f64(rows, cols, &v).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let a = Matrix::<f32>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Matrix::<f32>::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap(), b);
        let two = Matrix::<f32>::from_rows(&[vec![2.0]]).unwrap();
        let three = Matrix::<f32>::from_rows(&[vec![3.0]]).unwrap();
        assert_eq!(matmul(&two, &three).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut want = 0.0;
                for p in 0..4 {
                    want += a.get(i, p) * b.get(p, j);
                }
                assert!((c.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch_with_both_shapes() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(2, 3);
        let err = matmul(&a, &b).unwrap_err();
        assert_eq!(err.to_string(), "dimension mismatch: left is 2x3, right is 2x3");
    }

    #[test]
    fn softmax_examples() {
        let m = Matrix::<f64>::from_rows(&[
            vec![0.0, 0.0, 0.0],
            vec![1000.0, 1000.0, f64::NEG_INFINITY],
        ])
        .unwrap();
        let s = stable_softmax_rows(&m);
        for v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(s.row(1), &[0.5, 0.5, 0.0]);

        // exp(ln 3) / (1 + 3)
        let m = Matrix::<f64>::from_rows(&[vec![0.0, 3f64.ln()]]).unwrap();
        let s = stable_softmax_rows(&m);
        assert!((s.get(0, 0) - 0.25).abs() < 1e-12);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let ones = [1.0f64; 2];
        let zeros = [0.0f64; 2];
        let x = Matrix::<f64>::from_rows(&[vec![4.0, 4.0], vec![1.0, -1.0]]).unwrap();
        let y = layer_norm(&x, &ones, &zeros, 0.0).unwrap();
        assert_eq!(y.row(0), &[0.0, 0.0]);
        // mean 0, variance 1 already
        assert!((y.get(1, 0) - 1.0).abs() < 1e-12 && (y.get(1, 1) + 1.0).abs() < 1e-12);

        let b = [0.5, -2.0];
        let shifted = layer_norm(&x, &ones, &b, LAYER_NORM_EPS).unwrap();
        let base = layer_norm(&x, &ones, &zeros, LAYER_NORM_EPS).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert!((shifted.get(r, c) - base.get(r, c) - b[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = Rng::new(5);
        let x = random_matrix(&mut rng, 6, 32).map(|v| 3.0 * v + 1.5);
        let y = layer_norm(&x, &[1.0; 32], &[0.0; 32], LAYER_NORM_EPS).unwrap();
        for r in 0..6 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 32.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn bilinear_ramp_half_pixel() {
        // f(i, j) = j sampled at x = (k + 0.5) * 2 - 0.5 = 0.5, 2.5
        let g = Grid::<f64>::from_fn(4, 4, 1, |_, j, _| j as f64);
        let out = resample_bilinear(&g, 2, 2).unwrap();
        assert_eq!(out.data(), &[0.5, 2.5, 0.5, 2.5]);
    }

    #[test]
    fn resample_identity_and_constant() {
        let mut rng = Rng::new(3);
        let g = Grid::<f32>::from_fn(5, 3, 2, |_, _, _| 0.0);
        let g = Grid::from_vec(5, 3, 2, g.data().iter().map(|_| rng.normal() as f32).collect()).unwrap();
        assert_eq!(resample_bilinear(&g, 5, 3).unwrap(), g);
        assert_eq!(resample_nearest(&g, 5, 3).unwrap(), g);

        let c = Grid::<f64>::from_fn(7, 6, 3, |_, _, _| 2.25);
        for (h, w) in [(1, 1), (3, 2), (7, 6)] {
            assert!(resample_bilinear(&c, h, w).unwrap().data().iter().all(|&v| v == 2.25));
            assert!(resample_nearest(&c, h, w).unwrap().data().iter().all(|&v| v == 2.25));
        }
    }

    #[test]
    fn nearest_two_by_two_picks_top_left() {
        let g = Grid::<f64>::from_fn(2, 2, 1, |i, j, _| (i * 2 + j) as f64);
        assert_eq!(resample_nearest(&g, 1, 1).unwrap().data(), &[0.0]);
    }

    #[test]
    fn resample_rejects_upsampling() {
        let g = Grid::<f32>::from_fn(2, 2, 1, |_, _, _| 0.0);
        assert!(matches!(resample_bilinear(&g, 3, 2), Err(Error::TargetTooLarge { .. })));
        assert!(matches!(resample_nearest(&g, 2, 3), Err(Error::TargetTooLarge { .. })));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift(values in proptest::collection::vec(-50.0f64..50.0, 1..40), shift in -100.0f64..100.0) {
            let m = Matrix::<f32>::from_f64(1, values.len(), &values).unwrap();
            let s = stable_softmax_rows(&m);
            let sum: f64 = s.data().iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
            let s2 = stable_softmax_rows(&Matrix::<f64>::from_f64(1, values.len(), &shifted).unwrap());
            let s1 = stable_softmax_rows(&Matrix::<f64>::from_f64(1, values.len(), &values).unwrap());
            for (a, b) in s1.data().iter().zip(s2.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            // order preserved
            for i in 0..values.len() {
                for j in 0..values.len() {
                    if values[i] < values[j] {
                        prop_assert!(s1.data()[i] <= s1.data()[j]);
                    }
                }
            }
        }

        #[test]
        fn bilinear_exact_on_affine_fields(
            h in 1usize..12, w in 1usize..12, oh_seed in 0usize..100, ow_seed in 0usize..100,
            a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0,
        ) {
            let (oh, ow) = (1 + oh_seed % h, 1 + ow_seed % w);
            let g = Grid::<f64>::from_fn(h, w, 2, |i, j, ch| a * i as f64 + b * j as f64 + c + ch as f64);
            let out = resample_bilinear(&g, oh, ow).unwrap();
            for i in 0..oh {
                let y = half_pixel_source(i, h, oh);
                for j in 0..ow {
                    let x = half_pixel_source(j, w, ow);
                    for ch in 0..2 {
                        let want = a * y + b * x + c + ch as f64;
                        prop_assert!((out.token(i, j)[ch] - want).abs() < 1e-6);
                    }
                }
            }
        }

        #[test]
        fn matmul_identity_is_exact(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a: Matrix<f32> = random_matrix(&mut rng, rows, cols).cast();
            prop_assert_eq!(&matmul(&Matrix::identity(rows), &a).unwrap(), &a);
            prop_assert_eq!(&matmul(&a, &Matrix::identity(cols)).unwrap(), &a);
        }
    }
}
