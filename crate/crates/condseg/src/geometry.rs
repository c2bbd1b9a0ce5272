//! Closed-form ellipse algebra: conic conversion, bounding squares,
//! estimator-space parameter mapping and canonical forms.
//!
//! Coordinate convention: pixel (row i, col j) is the point (x = j, y = i),
//! origin at the top-left corner, y pointing down. All angles are in
//! radians, measured from the +x axis toward +y.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale applied to the normalized angle component: a canonical ellipse
/// angle lives in [0, pi), so the unit-interval estimator output spans a
/// half turn.
pub const THETA_SCALE: f64 = PI;

// ── Types ──────────────────────────────────────────────────────────────────

/// Absolute ellipse parameters in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse5D {
    /// Center x.
    #[serde(rename = "cx")]
    pub x0: f64,
    /// Center y.
    #[serde(rename = "cy")]
    pub y0: f64,
    /// First semi-axis length (> 0).
    pub a: f64,
    /// Second semi-axis length (> 0).
    pub b: f64,
    /// Angle of the `a` axis against +x, radians.
    #[serde(rename = "theta_rad")]
    pub theta: f64,
}

/// Estimator-space ellipse: all five components in the open unit interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedEllipse {
    pub xhat0: f64,
    pub yhat0: f64,
    pub ahat: f64,
    pub bhat: f64,
    pub thetahat: f64,
}

/// General conic `A x^2 + B xy + C y^2 + D x + E y + F = 0`, equivalently
/// the symmetric 3x3 matrix form `x^T M x = 0` with `x = [x, y, 1]^T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConicMatrix {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
}

/// Axis-aligned square with top-left corner `(x1, y1)` and side `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingSquare {
    pub x1: f64,
    pub y1: f64,
    pub s: f64,
}

// ── Ellipse5D ──────────────────────────────────────────────────────────────

impl Ellipse5D {
    pub fn new(x0: f64, y0: f64, a: f64, b: f64, theta: f64) -> Self {
        Self { x0, y0, a, b, theta }
    }

    pub fn is_valid(&self) -> bool {
        self.a > 0.0
            && self.b > 0.0
            && self.a.is_finite()
            && self.b.is_finite()
            && self.x0.is_finite()
            && self.y0.is_finite()
            && self.theta.is_finite()
    }

    fn check_valid(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::DegenerateEllipse { a: self.a, b: self.b })
        }
    }

    /// General conic coefficients of this ellipse. The constant term is
    /// normalized so the conic evaluates to exactly -1 at the center.
    pub fn to_conic(&self) -> Result<ConicMatrix> {
        self.check_valid()?;
        let (sin_t, cos_t) = self.theta.sin_cos();
        let (s2, c2) = (sin_t * sin_t, cos_t * cos_t);
        let inv_a2 = 1.0 / (self.a * self.a);
        let inv_b2 = 1.0 / (self.b * self.b);

        let a = s2 * inv_b2 + c2 * inv_a2;
        let b = 2.0 * (inv_a2 - inv_b2) * sin_t * cos_t;
        let c = c2 * inv_b2 + s2 * inv_a2;
        let d = -2.0 * a * self.x0 - b * self.y0;
        let e = -b * self.x0 - 2.0 * c * self.y0;
        let f = -(d * self.x0 + e * self.y0) / 2.0 - 1.0;
        Ok(ConicMatrix { a, b, c, d, e, f })
    }

    /// Minimum axis-aligned bounding square.
    ///
    /// The half-extents of the ellipse are
    /// `dw = sqrt(a^2 cos^2 t + b^2 sin^2 t)` and
    /// `dh = sqrt(a^2 sin^2 t + b^2 cos^2 t)`; the square is anchored at
    /// `(x0 - dw, y0 - dh)` with side `2 max(dw, dh)`.
    pub fn bounding_square(&self) -> Result<BoundingSquare> {
        self.check_valid()?;
        let (sin_t, cos_t) = self.theta.sin_cos();
        let (a2, b2) = (self.a * self.a, self.b * self.b);
        let dw = (a2 * cos_t * cos_t + b2 * sin_t * sin_t).sqrt();
        let dh = (a2 * sin_t * sin_t + b2 * cos_t * cos_t).sqrt();
        Ok(BoundingSquare {
            x1: self.x0 - dw,
            y1: self.y0 - dh,
            s: 2.0 * dw.max(dh),
        })
    }

    /// Same point set with `a >= b` and `theta` in `[0, pi)`. Circles
    /// (relative axis difference below 1e-12) get `theta = 0`.
    pub fn canonicalize(&self) -> Self {
        let (a, b, theta) = if self.a >= self.b {
            (self.a, self.b, self.theta)
        } else {
            (self.b, self.a, self.theta + FRAC_PI_2)
        };
        let mut theta = theta.rem_euclid(PI);
        if theta >= PI {
            theta = 0.0; // rem_euclid can round up to the modulus
        }
        if (a - b).abs() <= 1e-12 * a {
            theta = 0.0;
        }
        Self { x0: self.x0, y0: self.y0, a, b, theta }
    }

    /// `n` boundary points at uniform parametric angle.
    pub fn boundary_points(&self, n: usize) -> Vec<(f64, f64)> {
        let (sin_t, cos_t) = self.theta.sin_cos();
        (0..n)
            .map(|k| {
                let t = 2.0 * PI * (k as f64) / (n as f64);
                let (px, py) = (self.a * t.cos(), self.b * t.sin());
                (
                    self.x0 + cos_t * px - sin_t * py,
                    self.y0 + sin_t * px + cos_t * py,
                )
            })
            .collect()
    }

    /// Strict interior test (conic value < 0).
    pub fn contains(&self, x: f64, y: f64) -> Result<bool> {
        Ok(self.to_conic()?.eval(x, y) < 0.0)
    }

    pub fn area(&self) -> f64 {
        PI * self.a * self.b
    }
}

// ── ConicMatrix ────────────────────────────────────────────────────────────

impl ConicMatrix {
    /// Per-row partial terms so that `eval(x, y) = (A x + p1) x + p0` with
    /// `(p1, p0) = row_terms(y)`. Every conic evaluation in the crate goes
    /// through this factored form so rasterized fields, hard masks and loss
    /// gradients see bit-identical values.
    #[inline]
    pub fn row_terms(&self, y: f64) -> (f64, f64) {
        (self.b * y + self.d, (self.c * y + self.e) * y + self.f)
    }

    #[inline]
    pub fn row_eval(&self, x: f64, p1: f64, p0: f64) -> f64 {
        (self.a * x + p1) * x + p0
    }

    /// `x^T M x` for the augmented point `[x, y, 1]`. Negative strictly
    /// inside the ellipse, zero on the boundary, positive outside.
    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let (p1, p0) = self.row_terms(y);
        self.row_eval(x, p1, p0)
    }

    /// Symmetric matrix form.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [
            [self.a, self.b / 2.0, self.d / 2.0],
            [self.b / 2.0, self.c, self.e / 2.0],
            [self.d / 2.0, self.e / 2.0, self.f],
        ]
    }

    /// Discriminant test `B^2 - 4AC < 0`.
    pub fn is_ellipse(&self) -> bool {
        self.b * self.b - 4.0 * self.a * self.c < 0.0
    }

    /// First-order geometric distance estimate: |value| / |gradient|.
    pub fn sampson_distance(&self, x: f64, y: f64) -> f64 {
        let v = self.eval(x, y);
        let gx = 2.0 * self.a * x + self.b * y + self.d;
        let gy = self.b * x + 2.0 * self.c * y + self.e;
        let g2 = gx * gx + gy * gy;
        if g2 < 1e-30 {
            v.abs()
        } else {
            v.abs() / g2.sqrt()
        }
    }

    /// Recover geometric parameters from conic coefficients (canonical
    /// output). Inverts `to_conic` up to the overall conic scale.
    pub fn to_ellipse(&self) -> Result<Ellipse5D> {
        if !self.is_ellipse() {
            return Err(Error::DegenerateConic);
        }
        // Center solves  [2A B; B 2C] c = -[D; E].
        let denom = 4.0 * self.a * self.c - self.b * self.b;
        let x0 = (self.b * self.e - 2.0 * self.c * self.d) / denom;
        let y0 = (self.b * self.d - 2.0 * self.a * self.e) / denom;

        // Principal direction of the quadratic part and the conic value at
        // the center; the Rayleigh quotient along the principal direction is
        // the matching eigenvalue.
        let theta = 0.5 * self.b.atan2(self.a - self.c);
        let (sin_t, cos_t) = theta.sin_cos();
        let lam1 = self.a * cos_t * cos_t + self.b * cos_t * sin_t + self.c * sin_t * sin_t;
        let lam2 = self.a + self.c - lam1;
        let f_center = self.eval(x0, y0);
        let a2 = -f_center / lam1;
        let b2 = -f_center / lam2;
        if !(a2 > 0.0 && b2 > 0.0 && a2.is_finite() && b2.is_finite()) {
            return Err(Error::DegenerateConic);
        }
        Ok(Ellipse5D::new(x0, y0, a2.sqrt(), b2.sqrt(), theta).canonicalize())
    }
}

// ── NormalizedEllipse ──────────────────────────────────────────────────────

impl NormalizedEllipse {
    pub fn new(xhat0: f64, yhat0: f64, ahat: f64, bhat: f64, thetahat: f64) -> Self {
        Self { xhat0, yhat0, ahat, bhat, thetahat }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.xhat0, self.yhat0, self.ahat, self.bhat, self.thetahat]
    }

    pub fn from_array(v: [f64; 5]) -> Self {
        Self::new(v[0], v[1], v[2], v[3], v[4])
    }

    /// Absolute parameters for a full `w x h` image frame: the center scales
    /// with the frame, the axes with `min(w, h) / 2` after adding the axis
    /// floor `eps`, and the angle spans a half turn.
    pub fn denormalize_iris(&self, w: f64, h: f64, eps: f64) -> Ellipse5D {
        let half_min = w.min(h) / 2.0;
        Ellipse5D {
            x0: self.xhat0 * w,
            y0: self.yhat0 * h,
            a: (self.ahat + eps) * half_min,
            b: (self.bhat + eps) * half_min,
            theta: self.thetahat * THETA_SCALE,
        }
    }

    /// Absolute parameters for a fit expressed relative to a bounding
    /// square: center translated to the square origin, axes scaled by the
    /// square side.
    pub fn denormalize_pupil(&self, sq: &BoundingSquare, eps: f64) -> Ellipse5D {
        Ellipse5D {
            x0: self.xhat0 * sq.s + sq.x1,
            y0: self.yhat0 * sq.s + sq.y1,
            a: (self.ahat + eps) * sq.s / 2.0,
            b: (self.bhat + eps) * sq.s / 2.0,
            theta: self.thetahat * THETA_SCALE,
        }
    }
}

/// Inverse of [`NormalizedEllipse::denormalize_iris`].
pub fn normalize_iris(e: &Ellipse5D, w: f64, h: f64, eps: f64) -> NormalizedEllipse {
    let half_min = w.min(h) / 2.0;
    NormalizedEllipse {
        xhat0: e.x0 / w,
        yhat0: e.y0 / h,
        ahat: e.a / half_min - eps,
        bhat: e.b / half_min - eps,
        thetahat: e.theta.rem_euclid(PI) / THETA_SCALE,
    }
}

/// Inverse of [`NormalizedEllipse::denormalize_pupil`].
pub fn normalize_pupil(e: &Ellipse5D, sq: &BoundingSquare, eps: f64) -> NormalizedEllipse {
    NormalizedEllipse {
        xhat0: (e.x0 - sq.x1) / sq.s,
        yhat0: (e.y0 - sq.y1) / sq.s,
        ahat: 2.0 * e.a / sq.s - eps,
        bhat: 2.0 * e.b / sq.s - eps,
        thetahat: e.theta.rem_euclid(PI) / THETA_SCALE,
    }
}

// ── Tests ──────────────────────────────────────────────────────────────────
