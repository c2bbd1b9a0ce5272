//! Ellipse-to-mask conversion: signed conic distance fields and their
//! sigmoid soft masks.
//!
//! A `distmap` holds the conic value `x^T M x` at every pixel (negative
//! inside, zero on the boundary, >= -1 everywhere by construction). The
//! `segmap` squashes it through a sigmoid whose sharpness is set by `tau`,
//! after dividing by `max(D) + delta` so the slope is resolution- and
//! scale-independent.

use crate::error::{Error, Result};
use crate::geometry::Ellipse5D;

// ── Grids ──────────────────────────────────────────────────────────────────

/// Row-major scalar grid with values in [0, 1]. Binary masks use exactly
/// 0.0 and 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Row-major unbounded scalar grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl MaskImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn is_positive(&self, x: usize, y: usize) -> bool {
        self.get(x, y) > 0.5
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch { expected: self.shape(), got: other.shape() })
        }
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    /// Binary mask of pixels strictly above `t`.
    pub fn threshold(&self, t: f64) -> MaskImage {
        MaskImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| if v > t { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Pixel-wise intersection of two binary masks.
    pub fn intersect(&self, other: &Self) -> Result<MaskImage> {
        self.same_shape(other)?;
        Ok(MaskImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| if a > 0.5 && b > 0.5 { 1.0 } else { 0.0 })
                .collect(),
        })
    }
}

impl ScalarField {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

// ── Operations ─────────────────────────────────────────────────────────────

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Conic value field: `D[i, j] = x^T M x` at pixel `(x = j, y = i)`.
pub fn distmap(e: &Ellipse5D, width: usize, height: usize) -> Result<ScalarField> {
    let m = e.to_conic()?;
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let (p1, p0) = m.row_terms(y as f64);
        for x in 0..width {
            data.push(m.row_eval(x as f64, p1, p0));
        }
    }
    Ok(ScalarField { width, height, data })
}

/// Soft mask `S = sigmoid(-D / (max(D) + delta) * tau)`.
///
/// `S > 0.5` exactly where `D < 0` and `S = 0.5` where `D = 0`. Fails with
/// [`Error::NonPositiveNormalizer`] when the whole grid lies strictly inside
/// the ellipse so that `max(D) + delta <= 0`.
pub fn segmap(d: &ScalarField, tau: f64, delta: f64) -> Result<MaskImage> {
    let max_d = d.max_value();
    let norm = max_d + delta;
    if !norm.is_finite() || norm <= 0.0 {
        return Err(Error::NonPositiveNormalizer { max_d, delta });
    }
    let scale = tau / norm;
    Ok(MaskImage {
        width: d.width,
        height: d.height,
        data: d.data.iter().map(|&v| sigmoid(-v * scale)).collect(),
    })
}

/// Full differentiable conversion: distmap followed by segmap.
pub fn ellp2mask(e: &Ellipse5D, width: usize, height: usize, tau: f64, delta: f64) -> Result<MaskImage> {
    segmap(&distmap(e, width, height)?, tau, delta)
}

/// Analytic binary inside test: pixel = 1 iff the conic value is strictly
/// negative. Boundary pixels (D exactly 0) are excluded, matching the
/// segmap's S = 0.5 ambiguity.
pub fn hard_mask(e: &Ellipse5D, width: usize, height: usize) -> Result<MaskImage> {
    let d = distmap(e, width, height)?;
    Ok(MaskImage {
        width,
        height,
        data: d.data.iter().map(|&v| if v < 0.0 { 1.0 } else { 0.0 }).collect(),
    })
}

// ── Tests ──────────────────────────────────────────────────────────────────
