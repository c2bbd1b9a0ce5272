//! Eye-region conditioned segmentation loss and its exact gradient with
//! respect to the five normalized ellipse parameters.
//!
//! The loss renders the candidate ellipse to a soft mask (see
//! [`crate::raster`]) and takes the mean binary cross-entropy against the
//! visible ground-truth mask over eye-region pixels only; pixels outside
//! the eye-region are excluded from the mean, not zero-counted.
//!
//! Gradient conventions:
//!
//! * the soft-mask normalizer `max(D) + delta` is treated as a constant
//!   (no gradient contribution);
//! * the reported loss value clamps probabilities to
//!   `[P_MIN, 1 - P_MIN]` before the log, while the gradient is that of
//!   the mathematically exact (unclamped) cross-entropy, i.e.
//!   `sigmoid(z) - y` per pixel in logit space. The two differ only where
//!   the sigmoid saturates past `P_MIN`, where the clamped loss is flat;
//!   keeping the exact-BCE gradient there preserves the pull of
//!   confidently-wrong pixels and keeps finite differences of the
//!   logit-form loss (see [`CondObjective::logit_loss`]) in exact
//!   agreement with the analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fitter::FitConfig;
use crate::geometry::{BoundingSquare, NormalizedEllipse, THETA_SCALE};
use crate::raster::{hard_mask, sigmoid, MaskImage};

/// Probability clamp applied before the log in the reported loss value.
pub const P_MIN: f64 = 1e-7;

/// Sigmoid argument beyond which f64 saturates to exactly 0 or 1;
/// short-circuiting the exp there keeps the hot loop cheap at tau = 800.
const Z_SAT: f64 = 40.0;

// ── Types ──────────────────────────────────────────────────────────────────

/// Loss value and its gradient w.r.t. `(xhat0, yhat0, ahat, bhat, thetahat)`.
#[derive(Debug, Clone, Copy)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: [f64; 5],
}

/// [`LossGrad`] plus the logit-form (unclamped) loss evaluated in the same
/// pass. The smooth value is kink-free in the parameters, which makes it
/// the right series for best-so-far tracking and plateau detection inside
/// the optimizer; the clamped value is the reported loss.
#[derive(Debug, Clone, Copy)]
pub struct FullLoss {
    pub clamped: f64,
    pub smooth: f64,
    pub grad: [f64; 5],
}

/// Denormalization context of a fit: either the full image frame or the
/// iris bounding square of the pupil stage. For `Roi`, the mask grid is the
/// resampled square and grid pixel `(u, v)` corresponds to the image point
/// `(x1 + u s / S, y1 + v s / S)`.
#[derive(Debug, Clone, Copy)]
pub enum Frame {
    Image { width: usize, height: usize },
    Roi(BoundingSquare),
}

impl Frame {
    /// Axis floor for this frame kind.
    fn eps(&self, cfg: &FitConfig) -> f64 {
        match self {
            Frame::Image { .. } => cfg.eps_iris,
            Frame::Roi(_) => cfg.eps_pupil,
        }
    }

    /// Map a grid pixel to the image-plane point where the conic is
    /// evaluated. Image pixels sit at integer coordinates; RoI pixels use
    /// pixel-center alignment so the sample set is symmetric under flips
    /// and quarter turns of the square.
    #[inline]
    fn grid_to_plane(&self, u: usize, v: usize, grid: (usize, usize)) -> (f64, f64) {
        match self {
            Frame::Image { .. } => (u as f64, v as f64),
            Frame::Roi(sq) => {
                let step = sq.s / grid.0 as f64;
                (
                    sq.x1 + (u as f64 + 0.5) * step,
                    sq.y1 + (v as f64 + 0.5) * step,
                )
            }
        }
    }

    pub fn denormalize(&self, params: &NormalizedEllipse, cfg: &FitConfig) -> crate::Ellipse5D {
        match self {
            Frame::Image { width, height } => {
                params.denormalize_iris(*width as f64, *height as f64, cfg.eps_iris)
            }
            Frame::Roi(sq) => params.denormalize_pupil(sq, cfg.eps_pupil),
        }
    }
}

// ── Forward-mode duals over the 5 normalized parameters ────────────────────

#[derive(Debug, Clone, Copy)]
struct Dual5 {
    v: f64,
    d: [f64; 5],
}

impl Dual5 {
    fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 5] }
    }

    fn var(v: f64, k: usize) -> Self {
        let mut d = [0.0; 5];
        d[k] = 1.0;
        Self { v, d }
    }

    fn sin_cos(self) -> (Self, Self) {
        let (s, c) = self.v.sin_cos();
        (
            Self { v: s, d: self.d.map(|g| g * c) },
            Self { v: c, d: self.d.map(|g| -g * s) },
        )
    }

    fn recip_sq(self) -> Self {
        // d/dx (1/x^2) = -2 / x^3
        let inv2 = 1.0 / (self.v * self.v);
        let k = -2.0 * inv2 / self.v;
        Self { v: inv2, d: self.d.map(|g| g * k) }
    }
}

impl std::ops::Add for Dual5 {
    type Output = Dual5;
    fn add(self, o: Dual5) -> Dual5 {
        let mut d = self.d;
        for (g, og) in d.iter_mut().zip(o.d) {
            *g += og;
        }
        Dual5 { v: self.v + o.v, d }
    }
}

impl std::ops::Sub for Dual5 {
    type Output = Dual5;
    fn sub(self, o: Dual5) -> Dual5 {
        let mut d = self.d;
        for (g, og) in d.iter_mut().zip(o.d) {
            *g -= og;
        }
        Dual5 { v: self.v - o.v, d }
    }
}

impl std::ops::Mul for Dual5 {
    type Output = Dual5;
    fn mul(self, o: Dual5) -> Dual5 {
        let mut d = [0.0; 5];
        for (g, (sg, og)) in d.iter_mut().zip(self.d.into_iter().zip(o.d)) {
            *g = sg * o.v + self.v * og;
        }
        Dual5 { v: self.v * o.v, d }
    }
}

impl std::ops::Mul<f64> for Dual5 {
    type Output = Dual5;
    fn mul(self, s: f64) -> Dual5 {
        Dual5 { v: self.v * s, d: self.d.map(|g| g * s) }
    }
}

impl std::ops::Neg for Dual5 {
    type Output = Dual5;
    fn neg(self) -> Dual5 {
        Dual5 { v: -self.v, d: self.d.map(|g| -g) }
    }
}

/// Conic coefficients `[A, B, C, D, E, F]` of the denormalized ellipse as
/// duals over the five normalized parameters. Mirrors
/// [`crate::geometry::Ellipse5D::to_conic`] term for term.
fn conic_dual(params: &NormalizedEllipse, frame: &Frame, cfg: &FitConfig) -> Result<[Dual5; 6]> {
    let p = [
        Dual5::var(params.xhat0, 0),
        Dual5::var(params.yhat0, 1),
        Dual5::var(params.ahat, 2),
        Dual5::var(params.bhat, 3),
        Dual5::var(params.thetahat, 4),
    ];
    let eps = Dual5::constant(frame.eps(cfg));
    let (x0, y0, a, b, theta) = match frame {
        Frame::Image { width, height } => {
            let (w, h) = (*width as f64, *height as f64);
            let half_min = w.min(h) / 2.0;
            (
                p[0] * w,
                p[1] * h,
                (p[2] + eps) * half_min,
                (p[3] + eps) * half_min,
                p[4] * THETA_SCALE,
            )
        }
        Frame::Roi(sq) => (
            p[0] * sq.s + Dual5::constant(sq.x1),
            p[1] * sq.s + Dual5::constant(sq.y1),
            (p[2] + eps) * (sq.s / 2.0),
            (p[3] + eps) * (sq.s / 2.0),
            p[4] * THETA_SCALE,
        ),
    };
    if !(a.v > 0.0 && b.v > 0.0) {
        return Err(Error::DegenerateEllipse { a: a.v, b: b.v });
    }

    let (sin_t, cos_t) = theta.sin_cos();
    let (s2, c2) = (sin_t * sin_t, cos_t * cos_t);
    let inv_a2 = a.recip_sq();
    let inv_b2 = b.recip_sq();

    let ca = s2 * inv_b2 + c2 * inv_a2;
    let cb = (inv_a2 - inv_b2) * sin_t * cos_t * 2.0;
    let cc = c2 * inv_b2 + s2 * inv_a2;
    let cd = -(ca * x0 * 2.0) - cb * y0;
    let ce = -(cb * x0) - cc * y0 * 2.0;
    let cf = -((cd * x0 + ce * y0) * 0.5) - Dual5::constant(1.0);
    Ok([ca, cb, cc, cd, ce, cf])
}

// ── Conditioned BCE on probability masks ───────────────────────────────────

/// Mean clamped binary cross-entropy over eye-region pixels.
///
/// `gt_visible` positives outside the eye-region are invalid input (the
/// visible mask is by definition contained in the eye-region); they are
/// ignored with a warning.
pub fn conditioned_bce(pred: &MaskImage, eye: &MaskImage, gt_visible: &MaskImage) -> Result<f64> {
    pred.same_shape(eye)?;
    pred.same_shape(gt_visible)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut outside = 0usize;
    for i in 0..pred.data.len() {
        if eye.data[i] > 0.5 {
            let p = pred.data[i].clamp(P_MIN, 1.0 - P_MIN);
            sum += if gt_visible.data[i] > 0.5 { -p.ln() } else { -(1.0 - p).ln() };
            n += 1;
        } else if gt_visible.data[i] > 0.5 {
            outside += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyCondition);
    }
    if outside > 0 {
        eprintln!("warning: {outside} ground-truth pixels outside the eye-region were ignored");
    }
    Ok(sum / n as f64)
}

// ── Conditioned objective in normalized parameter space ────────────────────

/// Reusable evaluation context: validates the masks once and keeps a
/// scratch buffer for the conic field across iterations.
pub struct CondObjective<'a> {
    frame: Frame,
    eye: &'a MaskImage,
    gt: &'a MaskImage,
    cfg: &'a FitConfig,
    dbuf: Vec<f64>,
}

impl<'a> CondObjective<'a> {
    pub fn new(
        frame: Frame,
        eye: &'a MaskImage,
        gt: &'a MaskImage,
        cfg: &'a FitConfig,
    ) -> Result<Self> {
        eye.same_shape(gt)?;
        if let Frame::Image { width, height } = frame {
            if (width, height) != eye.shape() {
                return Err(Error::ShapeMismatch { expected: (width, height), got: eye.shape() });
            }
        }
        if eye.count_positive() == 0 {
            return Err(Error::EmptyCondition);
        }
        let n = eye.width * eye.height;
        Ok(Self { frame, eye, gt, cfg, dbuf: vec![0.0; n] })
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    /// Fill the conic field buffer and return `max(D) + delta`.
    fn fill_field(&mut self, params: &NormalizedEllipse) -> Result<f64> {
        let e = self.frame.denormalize(params, self.cfg);
        let m = e.to_conic()?;
        let (gw, gh) = self.eye.shape();
        let mut max_d = f64::NEG_INFINITY;
        let mut i = 0usize;
        for v in 0..gh {
            let (_, y) = self.frame.grid_to_plane(0, v, (gw, gh));
            let (p1, p0) = m.row_terms(y);
            for u in 0..gw {
                let (x, _) = self.frame.grid_to_plane(u, v, (gw, gh));
                let d = m.row_eval(x, p1, p0);
                self.dbuf[i] = d;
                if d > max_d {
                    max_d = d;
                }
                i += 1;
            }
        }
        let norm = max_d + self.cfg.delta;
        if !norm.is_finite() || norm <= 0.0 {
            return Err(Error::NonPositiveNormalizer { max_d, delta: self.cfg.delta });
        }
        Ok(norm)
    }

    /// Conditioned loss and its gradient at `params`.
    pub fn eval(&mut self, params: &NormalizedEllipse) -> Result<LossGrad> {
        let full = self.eval_full(params)?;
        Ok(LossGrad { loss: full.clamped, grad: full.grad })
    }

    /// Clamped loss, smooth logit-form loss and the gradient in one pixel
    /// pass, with the normalizer taken from the current field maximum.
    pub fn eval_full(&mut self, params: &NormalizedEllipse) -> Result<FullLoss> {
        self.eval_inner(params, None)
    }

    /// As [`CondObjective::eval_full`] with an externally frozen
    /// normalizer. The field maximum is a max over pixels whose attaining
    /// pixel hops as the parameters move, which creases the loss values at
    /// sub-pixel parameter scales; freezing the normalizer over a descent
    /// run removes those creases so independent runs settle on the same
    /// optimum.
    pub fn eval_frozen(&mut self, params: &NormalizedEllipse, norm: f64) -> Result<FullLoss> {
        self.eval_inner(params, Some(norm))
    }

    fn eval_inner(&mut self, params: &NormalizedEllipse, frozen: Option<f64>) -> Result<FullLoss> {
        let coeffs = conic_dual(params, &self.frame, self.cfg)?;
        let field_norm = self.fill_field(params)?;
        let norm = frozen.unwrap_or(field_norm);
        let scale = self.cfg.tau / norm;
        let (gw, gh) = self.eye.shape();

        let mut loss_sum = 0.0;
        let mut smooth_sum = 0.0;
        let mut n = 0usize;
        // Per-pixel weights accumulated against the conic monomial basis
        // (x^2, xy, y^2, x, y, 1).
        let mut mom = [0.0f64; 6];
        let mut i = 0usize;
        for v in 0..gh {
            for u in 0..gw {
                if self.eye.data[i] > 0.5 {
                    let z = -self.dbuf[i] * scale;
                    let y_pos = self.gt.data[i] > 0.5;
                    // Sigmoid and softplus saturate past |z| = Z_SAT; the
                    // asymptotic values are exact at f64 precision.
                    let (s, softplus) = if z >= Z_SAT {
                        (1.0, z)
                    } else if z <= -Z_SAT {
                        (0.0, 0.0)
                    } else {
                        let sp = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                        (sigmoid(z), sp)
                    };
                    let p = s.clamp(P_MIN, 1.0 - P_MIN);
                    loss_sum += if y_pos { -p.ln() } else { -(1.0 - p).ln() };
                    smooth_sum += softplus - if y_pos { z } else { 0.0 };
                    let g = s - if y_pos { 1.0 } else { 0.0 };
                    if g != 0.0 {
                        let (x, y) = self.frame.grid_to_plane(u, v, (gw, gh));
                        mom[0] += g * x * x;
                        mom[1] += g * x * y;
                        mom[2] += g * y * y;
                        mom[3] += g * x;
                        mom[4] += g * y;
                        mom[5] += g;
                    }
                    n += 1;
                }
                i += 1;
            }
        }
        if n == 0 {
            return Err(Error::EmptyCondition);
        }

        let w = -scale / n as f64; // dz/dD times the mean reduction
        let mut grad = [0.0f64; 5];
        for (c, coeff) in coeffs.iter().enumerate() {
            for (g, partial) in grad.iter_mut().zip(coeff.d) {
                *g += w * mom[c] * partial;
            }
        }
        Ok(FullLoss {
            clamped: loss_sum / n as f64,
            smooth: smooth_sum / n as f64,
            grad,
        })
    }

    /// Normalizer `max(D) + delta` at `params`.
    pub fn normalizer(&mut self, params: &NormalizedEllipse) -> Result<f64> {
        self.fill_field(params)
    }

    /// Logit-form conditioned BCE with an externally frozen normalizer:
    /// `mean(softplus(z) - y z)` with `z = -D tau / norm`. Smooth in the
    /// parameters, so central finite differences of this scalar converge to
    /// the analytic gradient of [`CondObjective::eval`]; used by the
    /// gradient-check harness.
    pub fn logit_loss(&mut self, params: &NormalizedEllipse, norm: f64) -> Result<f64> {
        let e = self.frame.denormalize(params, self.cfg);
        let m = e.to_conic()?;
        let scale = self.cfg.tau / norm;
        let (gw, gh) = self.eye.shape();
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut i = 0usize;
        for v in 0..gh {
            let (_, y) = self.frame.grid_to_plane(0, v, (gw, gh));
            let (p1, p0) = m.row_terms(y);
            for u in 0..gw {
                if self.eye.data[i] > 0.5 {
                    let (x, _) = self.frame.grid_to_plane(u, v, (gw, gh));
                    let z = -m.row_eval(x, p1, p0) * scale;
                    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                    sum += softplus - if self.gt.data[i] > 0.5 { z } else { 0.0 };
                    n += 1;
                }
                i += 1;
            }
        }
        if n == 0 {
            return Err(Error::EmptyCondition);
        }
        Ok(sum / n as f64)
    }
}

/// One-shot wrapper over [`CondObjective`].
pub fn loss_and_grad(
    params: &NormalizedEllipse,
    frame: Frame,
    eye: &MaskImage,
    gt_visible: &MaskImage,
    cfg: &FitConfig,
) -> Result<LossGrad> {
    CondObjective::new(frame, eye, gt_visible, cfg)?.eval(params)
}

// ── Finite-difference gradient check ───────────────────────────────────────

/// Central finite-difference step in normalized parameter space.
pub const FD_STEP: f64 = 1e-5;

/// Relative-error tolerance for analytic-vs-numeric agreement.
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub trials: usize,
    /// Max relative error per parameter across all trials and both frames.
    pub max_rel_err: [f64; 5],
    pub passed: bool,
}

/// Compare analytic gradients against central finite differences of the
/// logit-form loss (normalizer frozen at the base point) over random
/// scene configurations in both frame types.
pub fn gradcheck(trials: usize, seed: u64) -> GradCheckReport {
    gradcheck_with_corruption(trials, seed, None)
}

/// Same as [`gradcheck`], with an optional sign flip injected into one
/// analytic partial. Used to verify the harness actually detects a broken
/// gradient.
pub fn gradcheck_with_corruption(
    trials: usize,
    seed: u64,
    corrupt_partial: Option<usize>,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = FitConfig::default();
    let mut max_rel = [0.0f64; 5];

    for trial in 0..trials {
        for roi_frame in [false, true] {
            let (frame, eye, gt) = random_check_scene(&mut rng, roi_frame, &cfg);
            let params = NormalizedEllipse::new(
                rng.random_range(0.25..0.75),
                rng.random_range(0.25..0.75),
                rng.random_range(0.2..0.6),
                rng.random_range(0.15..0.5),
                rng.random_range(0.1..0.9),
            );
            let mut obj = CondObjective::new(frame, &eye, &gt, &cfg)
                .unwrap_or_else(|e| panic!("trial {trial}: bad scene: {e}"));
            let mut lg = obj.eval(&params).expect("analytic eval");
            if let Some(k) = corrupt_partial {
                lg.grad[k] = -lg.grad[k];
            }
            let norm = obj.normalizer(&params).expect("normalizer");
            for k in 0..5 {
                let mut lo = params.as_array();
                let mut hi = lo;
                lo[k] -= FD_STEP;
                hi[k] += FD_STEP;
                let f_lo = obj.logit_loss(&NormalizedEllipse::from_array(lo), norm).unwrap();
                let f_hi = obj.logit_loss(&NormalizedEllipse::from_array(hi), norm).unwrap();
                let fd = (f_hi - f_lo) / (2.0 * FD_STEP);
                let rel = (lg.grad[k] - fd).abs() / lg.grad[k].abs().max(fd.abs()).max(1e-6);
                if rel > max_rel[k] {
                    max_rel[k] = rel;
                }
            }
        }
    }

    let passed = max_rel.iter().all(|&r| r <= FD_TOL);
    GradCheckReport { trials, max_rel_err: max_rel, passed }
}

/// Deterministic random scene for the gradient check: an elliptical
/// eye-region, a ground-truth ellipse and its visible mask.
fn random_check_scene(
    rng: &mut ChaCha8Rng,
    roi_frame: bool,
    cfg: &FitConfig,
) -> (Frame, MaskImage, MaskImage) {
    use crate::geometry::Ellipse5D;
    if roi_frame {
        let sq = BoundingSquare {
            x1: rng.random_range(-20.0..60.0),
            y1: rng.random_range(-20.0..40.0),
            s: rng.random_range(120.0..220.0),
        };
        let grid = cfg.roi_size;
        let cx = sq.x1 + sq.s * rng.random_range(0.35..0.65);
        let cy = sq.y1 + sq.s * rng.random_range(0.35..0.65);
        let eye = Ellipse5D::new(cx, cy, sq.s * 0.48, sq.s * 0.34, rng.random_range(0.0..0.4));
        let gt = Ellipse5D::new(
            cx + sq.s * rng.random_range(-0.05..0.05),
            cy + sq.s * rng.random_range(-0.05..0.05),
            sq.s * rng.random_range(0.12..0.22),
            sq.s * rng.random_range(0.08..0.12),
            rng.random_range(0.0..3.0),
        );
        let frame = Frame::Roi(sq);
        let (eye_m, gt_m) = roi_masks(&frame, grid, &eye, &gt);
        (frame, eye_m, gt_m)
    } else {
        let (w, h) = (320usize, 240usize);
        let cx = rng.random_range(120.0..200.0);
        let cy = rng.random_range(90.0..150.0);
        let eye = Ellipse5D::new(cx, cy, 130.0, 70.0, 0.0);
        let gt = Ellipse5D::new(
            cx + rng.random_range(-15.0..15.0),
            cy + rng.random_range(-15.0..15.0),
            rng.random_range(40.0..70.0),
            rng.random_range(28.0..40.0),
            rng.random_range(0.0..3.0),
        );
        let eye_m = hard_mask(&eye, w, h).unwrap();
        let gt_m = hard_mask(&gt, w, h).unwrap().intersect(&eye_m).unwrap();
        (Frame::Image { width: w, height: h }, eye_m, gt_m)
    }
}

/// Rasterize eye and visible masks on an RoI grid by evaluating the conics
/// at the mapped image-plane points.
fn roi_masks(
    frame: &Frame,
    grid: usize,
    eye: &crate::geometry::Ellipse5D,
    gt: &crate::geometry::Ellipse5D,
) -> (MaskImage, MaskImage) {
    let me = eye.to_conic().unwrap();
    let mg = gt.to_conic().unwrap();
    let mut eye_m = MaskImage::zeros(grid, grid);
    let mut gt_m = MaskImage::zeros(grid, grid);
    for v in 0..grid {
        for u in 0..grid {
            let (x, y) = frame.grid_to_plane(u, v, (grid, grid));
            let in_eye = me.eval(x, y) < 0.0;
            if in_eye {
                eye_m.set(u, v, 1.0);
                if mg.eval(x, y) < 0.0 {
                    gt_m.set(u, v, 1.0);
                }
            }
        }
    }
    (eye_m, gt_m)
}

// ── Tests ──────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Ellipse5D;
    use crate::raster::ellp2mask;
    use approx::assert_relative_eq;

    fn default_cfg() -> FitConfig {
        FitConfig::default()
    }

    #[test]
    fn bce_of_perfect_prediction_is_clamp_floor() {
        let eye = MaskImage::from_fn(8, 8, |_, _| 1.0);
        let gt = MaskImage::from_fn(8, 8, |x, _| if x < 4 { 1.0 } else { 0.0 });
        let loss = conditioned_bce(&gt, &eye, &gt).unwrap();
        assert_relative_eq!(loss, -(1.0 - P_MIN).ln(), epsilon = 1e-12);
        assert!(loss < 1e-6);
    }

    #[test]
    fn bce_of_uniform_half_is_ln_two() {
        let eye = MaskImage::from_fn(8, 8, |x, _| if x < 6 { 1.0 } else { 0.0 });
        let pred = MaskImage::from_fn(8, 8, |_, _| 0.5);
        let gt = MaskImage::from_fn(8, 8, |x, y| if x < 2 && y < 3 { 1.0 } else { 0.0 });
        let loss = conditioned_bce(&pred, &eye, &gt).unwrap();
        assert_relative_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn bce_rejects_empty_eye() {
        let z = MaskImage::zeros(4, 4);
        assert!(matches!(conditioned_bce(&z, &z, &z), Err(Error::EmptyCondition)));
    }

    #[test]
    fn bce_rejects_shape_mismatch() {
        let a = MaskImage::zeros(4, 4);
        let b = MaskImage::from_fn(5, 4, |_, _| 1.0);
        assert!(matches!(conditioned_bce(&a, &b, &a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn bce_ignores_pixels_outside_eye() {
        let eye = MaskImage::from_fn(10, 10, |x, _| if x < 5 { 1.0 } else { 0.0 });
        let pred = MaskImage::from_fn(10, 10, |x, _| if x < 3 { 0.9 } else { 0.2 });
        let gt = MaskImage::from_fn(10, 10, |x, _| if x < 3 { 1.0 } else { 0.0 });
        let mut gt_extra = gt.clone();
        // Extra positives outside the eye-region must not change the loss.
        gt_extra.set(7, 2, 1.0);
        gt_extra.set(9, 9, 1.0);
        let a = conditioned_bce(&pred, &eye, &gt).unwrap();
        let b = conditioned_bce(&pred, &eye, &gt_extra).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_matches_conditioned_bce_of_rendered_mask() {
        let cfg = default_cfg();
        let (w, h) = (64usize, 48usize);
        let eye = hard_mask(&Ellipse5D::new(32.0, 24.0, 28.0, 16.0, 0.0), w, h).unwrap();
        let gt = hard_mask(&Ellipse5D::new(30.0, 24.0, 12.0, 9.0, 0.4), w, h)
            .unwrap()
            .intersect(&eye)
            .unwrap();
        let params = NormalizedEllipse::new(0.45, 0.5, 0.4, 0.35, 0.3);
        let lg =
            loss_and_grad(&params, Frame::Image { width: w, height: h }, &eye, &gt, &cfg).unwrap();
        let e = params.denormalize_iris(w as f64, h as f64, cfg.eps_iris);
        let pred = ellp2mask(&e, w, h, cfg.tau, cfg.delta).unwrap();
        let reference = conditioned_bce(&pred, &eye, &gt).unwrap();
        assert_relative_eq!(lg.loss, reference, max_relative = 1e-12);
    }

    #[test]
    fn loss_with_full_eye_equals_plain_bce() {
        let cfg = default_cfg();
        let (w, h) = (48usize, 40usize);
        let ones = MaskImage::from_fn(w, h, |_, _| 1.0);
        let gt = hard_mask(&Ellipse5D::new(22.0, 20.0, 10.0, 7.0, 0.2), w, h).unwrap();
        let params = NormalizedEllipse::new(0.5, 0.5, 0.45, 0.3, 0.1);
        let lg =
            loss_and_grad(&params, Frame::Image { width: w, height: h }, &ones, &gt, &cfg).unwrap();
        // Plain BCE over the whole image.
        let e = params.denormalize_iris(w as f64, h as f64, cfg.eps_iris);
        let pred = ellp2mask(&e, w, h, cfg.tau, cfg.delta).unwrap();
        let mut sum = 0.0;
        for i in 0..pred.data.len() {
            let p = pred.data[i].clamp(P_MIN, 1.0 - P_MIN);
            sum += if gt.data[i] > 0.5 { -p.ln() } else { -(1.0 - p).ln() };
        }
        assert_relative_eq!(lg.loss, sum / (w * h) as f64, max_relative = 1e-12);
    }

    #[test]
    fn symmetric_offsets_give_opposite_center_gradients() {
        let cfg = default_cfg();
        let (w, h) = (61usize, 61usize);
        let ones = MaskImage::from_fn(w, h, |_, _| 1.0);
        // Radius chosen away from integer distances so no pixel sits on the
        // boundary, where rounding could break the mask's mirror symmetry.
        let gt = hard_mask(&Ellipse5D::new(30.0, 30.0, 12.3, 12.3, 0.0), w, h).unwrap();
        let d = 0.08;
        let plus = NormalizedEllipse::new(30.0 / 61.0 + d, 30.0 / 61.0, 0.4, 0.4, 0.0);
        let minus = NormalizedEllipse::new(30.0 / 61.0 - d, 30.0 / 61.0, 0.4, 0.4, 0.0);
        let frame = Frame::Image { width: w, height: h };
        let gp = loss_and_grad(&plus, frame, &ones, &gt, &cfg).unwrap();
        let gm = loss_and_grad(&minus, frame, &ones, &gt, &cfg).unwrap();
        assert_relative_eq!(gp.grad[0], -gm.grad[0], max_relative = 1e-6);
        assert_relative_eq!(gp.loss, gm.loss, max_relative = 1e-9);
    }

    #[test]
    fn gradient_small_at_ground_truth_vs_offset() {
        let cfg = default_cfg();
        let (w, h) = (80usize, 60usize);
        let eye = MaskImage::from_fn(w, h, |_, _| 1.0);
        let truth = NormalizedEllipse::new(0.5, 0.5, 0.35, 0.3, 0.2);
        let e = truth.denormalize_iris(w as f64, h as f64, cfg.eps_iris);
        let gt = hard_mask(&e, w, h).unwrap();
        let frame = Frame::Image { width: w, height: h };
        let at_truth = loss_and_grad(&truth, frame, &eye, &gt, &cfg).unwrap();
        let offset = NormalizedEllipse::new(
            truth.xhat0 + 5.0 / w as f64,
            truth.yhat0,
            truth.ahat,
            truth.bhat,
            truth.thetahat,
        );
        let at_offset = loss_and_grad(&offset, frame, &eye, &gt, &cfg).unwrap();
        let mag = |g: [f64; 5]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(mag(at_truth.grad) <= mag(at_offset.grad));
        assert!(at_truth.loss < at_offset.loss);
    }

    #[test]
    fn loss_invariant_under_horizontal_flip() {
        let cfg = default_cfg();
        let (w, h) = (50usize, 40usize);
        let flip = |m: &MaskImage| MaskImage::from_fn(w, h, |x, y| m.get(w - 1 - x, y));
        let eye = hard_mask(&Ellipse5D::new(22.0, 20.0, 20.0, 14.0, 0.15), w, h).unwrap();
        let gt = hard_mask(&Ellipse5D::new(24.0, 21.0, 9.0, 6.0, 0.5), w, h)
            .unwrap()
            .intersect(&eye)
            .unwrap();
        let params = NormalizedEllipse::new(0.42, 0.49, 0.38, 0.27, 0.21);
        let frame = Frame::Image { width: w, height: h };
        let lhs = loss_and_grad(&params, frame, &eye, &gt, &cfg).unwrap();

        // Flip all masks and map xhat -> (w-1)/w - xhat, theta -> pi - theta.
        let flipped = NormalizedEllipse::new(
            (w as f64 - 1.0) / w as f64 - params.xhat0,
            params.yhat0,
            params.ahat,
            params.bhat,
            1.0 - params.thetahat,
        );
        let rhs = loss_and_grad(&flipped, frame, &flip(&eye), &flip(&gt), &cfg).unwrap();
        assert_relative_eq!(lhs.loss, rhs.loss, max_relative = 1e-10);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let report = gradcheck(8, 99);
        assert!(
            report.passed,
            "max rel err per parameter: {:?}",
            report.max_rel_err
        );
    }

    #[test]
    fn gradcheck_detects_injected_sign_flip() {
        let report = gradcheck_with_corruption(3, 7, Some(2));
        assert!(!report.passed);
        assert!(report.max_rel_err[2] > FD_TOL);
    }
}
