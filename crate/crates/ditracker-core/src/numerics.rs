//! Deterministic numeric primitives shared by every stage of the pipeline:
//! clamped bilinear sampling, corner-aligned resizing, scaled softmax, and
//! Fourier displacement encodings.
//!
//! Coordinate convention: integer coordinates address pixel (cell) centers,
//! `x` runs along columns and `y` along rows. Sampling outside the grid
//! clamps to the border cells, so finite inputs always produce finite
//! outputs.

use ndarray::{Array3, ArrayView1};
use num_traits::{Float, FromPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

use crate::error::{Error, Result};

/// Scalar type the pipeline is generic over. Production code runs `f32`;
/// gradient checking instantiates the same code at `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + Display
    + Debug
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Lossless embedding into `f64` for reporting and serialization.
    fn to_f64(self) -> f64;
    /// Nearest representable value of an `f64` constant.
    fn from_f64_c(v: f64) -> Self;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64_c(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64_c(v: f64) -> Self {
        v
    }
}

/// A 2D point in pixel coordinates (`x` = column, `y` = row).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2D<S = f32> {
    pub x: S,
    pub y: S,
}

impl<S: Scalar> Point2D<S> {
    pub fn new(x: S, y: S) -> Self {
        Point2D { x, y }
    }

    pub fn from_xy(xy: [S; 2]) -> Self {
        Point2D { x: xy[0], y: xy[1] }
    }

    pub fn xy(self) -> [S; 2] {
        [self.x, self.y]
    }

    /// Euclidean distance to another point.
    pub fn distance(self, other: Self) -> S {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }
}

/// A dense `h × w × channels` feature or image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D<S = f32> {
    data: Array3<S>,
}

impl<S: Scalar> Grid2D<S> {
    /// Wraps an `(h, w, c)` array. All three dimensions must be non-zero.
    pub fn new(data: Array3<S>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::invalid(format!(
                "grid dimensions must be non-zero, got {h}x{w}x{c}"
            )));
        }
        Ok(Grid2D { data })
    }

    /// A grid filled with a single value.
    pub fn from_elem(h: usize, w: usize, c: usize, value: S) -> Result<Self> {
        Self::new(Array3::from_elem((h, w, c), value))
    }

    pub fn h(&self) -> usize {
        self.data.dim().0
    }

    pub fn w(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<S> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<S> {
        &mut self.data
    }

    pub fn into_inner(self) -> Array3<S> {
        self.data
    }

    /// Channel vector stored at integer cell `(y, x)`.
    pub fn at(&self, y: usize, x: usize) -> ArrayView1<'_, S> {
        self.data.view().index_axis_move(ndarray::Axis(0), y).index_axis_move(ndarray::Axis(0), x)
    }
}

/// Clamped 1D interpolation cell: returns `(i0, i1, frac)` such that the
/// value at `coord` is `v[i0] + frac * (v[i1] - v[i0])`. Exact at integer
/// coordinates (`frac == 0`), clamped outside `[0, size-1]`.
pub(crate) fn lerp_cell<S: Scalar>(size: usize, coord: S) -> (usize, usize, S) {
    debug_assert!(size >= 1);
    if size == 1 {
        return (0, 0, S::zero());
    }
    let max = S::from_usize(size - 1).unwrap();
    let c = if coord < S::zero() {
        S::zero()
    } else if coord > max {
        max
    } else {
        coord
    };
    let mut i0 = c.floor();
    let top = S::from_usize(size - 2).unwrap();
    if i0 > top {
        i0 = top;
    }
    let frac = c - i0;
    let i = i0.to_usize().unwrap();
    if frac == S::one() {
        (i + 1, i + 1, S::zero())
    } else {
        (i, i + 1, frac)
    }
}

/// Whether `coord` falls outside `[0, size-1]` and was therefore clamped by
/// [`lerp_cell`]; clamped axes carry no coordinate gradient.
pub(crate) fn is_clamped<S: Scalar>(size: usize, coord: S) -> bool {
    size == 1 || coord < S::zero() || coord > S::from_usize(size - 1).unwrap()
}

/// Output-coordinate to input-coordinate mapping of the corner-aligned
/// resize; shared by [`interpolate_to`] and the differentiable resize so the
/// two agree bit-for-bit.
pub(crate) fn resize_coord<S: Scalar>(out_i: usize, out_n: usize, in_n: usize) -> S {
    if out_n == 1 {
        S::from_usize(in_n - 1).unwrap() / S::from_f64_c(2.0)
    } else {
        let ratio = S::from_usize(in_n - 1).unwrap() / S::from_usize(out_n - 1).unwrap();
        S::from_usize(out_i).unwrap() * ratio
    }
}

/// Samples all channels of `grid` at a continuous point with bilinear
/// interpolation. Coordinates address cell centers; points outside the grid
/// clamp to the border, so the result is always finite for finite inputs.
pub fn bilinear_sample<S: Scalar>(grid: &Grid2D<S>, p: Point2D<S>) -> Result<Vec<S>> {
    if !p.x.is_finite() || !p.y.is_finite() {
        return Err(Error::invalid(format!(
            "sample point must be finite, got ({}, {})",
            p.x, p.y
        )));
    }
    let (x0, x1, fx) = lerp_cell(grid.w(), p.x);
    let (y0, y1, fy) = lerp_cell(grid.h(), p.y);
    let d = grid.data();
    let mut out = Vec::with_capacity(grid.channels());
    for ch in 0..grid.channels() {
        let v00 = d[(y0, x0, ch)];
        let v01 = d[(y0, x1, ch)];
        let v10 = d[(y1, x0, ch)];
        let v11 = d[(y1, x1, ch)];
        let top = v00 + fx * (v01 - v00);
        let bot = v10 + fx * (v11 - v10);
        out.push(top + fy * (bot - top));
    }
    Ok(out)
}

/// Bilinear resize to `(out_h, out_w)` with corner-aligned pixel-center
/// mapping: output corner cells coincide with input corner cells, and
/// resizing to the input size returns the input bit-for-bit.
pub fn interpolate_to<S: Scalar>(grid: &Grid2D<S>, out_h: usize, out_w: usize) -> Result<Grid2D<S>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!(
            "target dimensions must be non-zero, got {out_h}x{out_w}"
        )));
    }
    let (in_h, in_w, c) = grid.data().dim();
    let mut out = Array3::zeros((out_h, out_w, c));
    for oy in 0..out_h {
        let (y0, y1, fy) = lerp_cell(in_h, resize_coord::<S>(oy, out_h, in_h));
        for ox in 0..out_w {
            let (x0, x1, fx) = lerp_cell(in_w, resize_coord::<S>(ox, out_w, in_w));
            for ch in 0..c {
                let d = grid.data();
                let v00 = d[(y0, x0, ch)];
                let v01 = d[(y0, x1, ch)];
                let v10 = d[(y1, x0, ch)];
                let v11 = d[(y1, x1, ch)];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                out[(oy, ox, ch)] = top + fy * (bot - top);
            }
        }
    }
    Grid2D::new(out)
}

/// Softmax of `logits / sqrt(scale_dim)` with max subtraction for numeric
/// stability. The result is a probability vector: non-negative entries
/// summing to 1 within rounding.
pub fn scaled_softmax<S: Scalar>(logits: &[S], scale_dim: usize) -> Result<Vec<S>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax over an empty logit vector"));
    }
    if scale_dim == 0 {
        return Err(Error::invalid("softmax scale dimension must be >= 1"));
    }
    let inv_scale = S::one() / S::from_usize(scale_dim).unwrap().sqrt();
    let scaled: Vec<S> = logits.iter().map(|&v| v * inv_scale).collect();
    let max = scaled.iter().cloned().fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let sum: S = exps.iter().cloned().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Fourier encoding of a 2D displacement: the raw components followed by
/// `sin`/`cos` pairs at octave frequencies `2^b` for `b in 0..num_bands`.
/// Output length is `4 * num_bands + 2`.
pub fn fourier_encode<S: Scalar>(d: Point2D<S>, num_bands: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(4 * num_bands + 2);
    out.push(d.x);
    out.push(d.y);
    for b in 0..num_bands {
        let freq = S::from_f64_c(2.0f64.powi(b as i32));
        out.push((d.x * freq).sin());
        out.push((d.x * freq).cos());
        out.push((d.y * freq).sin());
        out.push((d.y * freq).cos());
    }
    out
}
