//! Direct recovery of full iris and pupil ellipses per scene.
//!
//! Two-stage scheme: the iris is fitted over the full image frame first;
//! its minimum bounding square then crops and rescales the problem so the
//! pupil is fitted inside the iris RoI and mapped back to absolute
//! coordinates. Each stage runs Adam in an unconstrained logit space over
//! the five normalized parameters, starting from image moments of the
//! visible mask, with jittered restarts against occlusion-induced local
//! minima.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_iris, BoundingSquare, Ellipse5D, NormalizedEllipse};
use crate::objective::{CondObjective, Frame};
use crate::raster::{hard_mask, sigmoid, MaskImage};

// ── Configuration and results ──────────────────────────────────────────────

/// Knobs of the conditioned fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    /// Sigmoid sharpness of the soft mask.
    pub tau: f64,
    /// Numerical guard added to the distmap maximum.
    pub delta: f64,
    /// Relative axis floor for the iris stage.
    pub eps_iris: f64,
    /// Relative axis floor for the pupil stage.
    pub eps_pupil: f64,
    /// Side length of the resampled iris RoI, pixels.
    pub roi_size: usize,
    /// Iteration budget per restart.
    pub max_iters: usize,
    /// Adam step size in normalized-logit space.
    pub lr: f64,
    /// Number of starts (first from moments, the rest jittered).
    pub restarts: usize,
    /// Relative best-loss improvement under which a 20-iteration window
    /// counts as converged.
    pub tol_rel_loss: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tau: 800.0,
            delta: 1e-6,
            eps_iris: 0.01,
            eps_pupil: 0.1,
            roi_size: 200,
            max_iters: 400,
            lr: 0.05,
            restarts: 4,
            tol_rel_loss: 1e-4,
            seed: 0,
        }
    }
}

/// Outcome of one full fit (best restart).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    /// Canonical ellipse in absolute image coordinates.
    pub ellipse: Ellipse5D,
    pub final_loss: f64,
    pub iters_used: usize,
    pub restart_index: usize,
    pub converged: bool,
}

/// Joint iris + pupil fit of one scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneFit {
    pub iris: FitResult,
    pub pupil: FitResult,
    /// Iris bounding square used as the pupil RoI.
    pub roi: BoundingSquare,
    /// True when the RoI extended beyond the image and was zero-padded.
    pub roi_clipped: bool,
}

// ── Seed derivation ─────────────────────────────────────────────────────────

/// splitmix64 finalizer; decorrelates (seed, salt) streams.
pub(crate) fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SALT_IRIS: u64 = 1;
const SALT_PUPIL: u64 = 2;

// ── Initialization ──────────────────────────────────────────────────────────

/// Moment-based starting ellipse: centroid plus principal axes of the
/// visible pixels, inflated to compensate for occlusion. When the visible
/// region is cut by the eye-region boundary (evidence of eyelid occlusion)
/// the inflation grows with the cut fraction.
pub fn init_from_visible(
    visible: &MaskImage,
    eye: &MaskImage,
    inflate: f64,
) -> Result<Ellipse5D> {
    visible.same_shape(eye)?;
    let (w, h) = visible.shape();
    let mut n = 0usize;
    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            if visible.is_positive(x, y) {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    if n < 5 {
        return Err(Error::TooFewPixels { needed: 5, got: n });
    }
    let (mx, my) = (sx / n as f64, sy / n as f64);

    let (mut sxx, mut syy, mut sxy) = (0.0f64, 0.0f64, 0.0f64);
    let mut boundary = 0usize;
    let mut cut = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !visible.is_positive(x, y) {
                continue;
            }
            let (dx, dy) = (x as f64 - mx, y as f64 - my);
            sxx += dx * dx;
            syy += dy * dy;
            sxy += dx * dy;
            // 4-neighborhood border of the visible region; count how much
            // of it coincides with the eye-region border.
            let at_border = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)].iter().any(|&(ox, oy)| {
                let (nx, ny) = (x as i64 + ox, y as i64 + oy);
                nx < 0
                    || ny < 0
                    || nx >= w as i64
                    || ny >= h as i64
                    || !visible.is_positive(nx as usize, ny as usize)
            });
            if at_border {
                boundary += 1;
                let eye_cut = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)].iter().any(|&(ox, oy)| {
                    let (nx, ny) = (x as i64 + ox, y as i64 + oy);
                    nx >= 0
                        && ny >= 0
                        && nx < w as i64
                        && ny < h as i64
                        && !eye.is_positive(nx as usize, ny as usize)
                });
                if eye_cut {
                    cut += 1;
                }
            }
        }
    }
    sxx /= n as f64;
    syy /= n as f64;
    sxy /= n as f64;

    let half_tr = (sxx + syy) / 2.0;
    let det_part = (((sxx - syy) / 2.0).powi(2) + sxy * sxy).sqrt();
    let lam1 = (half_tr + det_part).max(0.0);
    let lam2 = (half_tr - det_part).max(0.0);
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);

    let cut_frac = if boundary > 0 { cut as f64 / boundary as f64 } else { 0.0 };
    let scale = inflate * (1.0 + 0.4 * cut_frac);
    let a = (2.0 * lam1.sqrt() * scale).max(1.0);
    let b = (2.0 * lam2.sqrt() * scale).max(1.0);
    Ok(Ellipse5D::new(mx, my, a, b, theta).canonicalize())
}

// ── Adam descent ─────────────────────────────────────────────────────────────

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const CONVERGENCE_WINDOW: usize = 20;
/// Multiplicative learning-rate decay applied when the best loss plateaus.
const LR_DECAY: f64 = 0.2;
/// Number of decay stages before a plateau counts as converged.
const LR_STAGES: usize = 4;

#[inline]
fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-3, 1.0 - 1e-3);
    (p / (1.0 - p)).ln()
}

/// First-order descent of the conditioned objective from a single start.
///
/// Adam runs in the logit reparameterization. A constant step size orbits
/// the optimum at step-sized amplitude, so a plateau (relative best-loss
/// improvement below `cfg.tol_rel_loss` over a 20-iteration window)
/// decays the learning rate by 5x, tightening the orbit from coarse
/// travel to sub-pixel polish; a plateau at the final stage sets
/// `converged`. A start that no iterate ever improved is a fixed point
/// and converges at the first plateau. Progress is tracked on the smooth
/// logit-form loss (whose landscape is free of the clamp kinks, so every
/// polished run lands on the same optimum); the reported `final_loss` is
/// the clamped conditioned BCE at the returned parameters. Deterministic:
/// no randomness inside.
pub fn optimize(
    start: &NormalizedEllipse,
    frame: Frame,
    eye: &MaskImage,
    gt_visible: &MaskImage,
    cfg: &FitConfig,
) -> Result<FitResult> {
    let mut obj = CondObjective::new(frame, eye, gt_visible, cfg)?;
    // Normalizer frozen over the run; see `CondObjective::eval_frozen`.
    let norm = obj.normalizer(start)?;
    let mut u = start.as_array().map(logit);
    let mut m = [0.0f64; 5];
    let mut v = [0.0f64; 5];
    let (mut b1t, mut b2t) = (1.0f64, 1.0f64);
    let mut lr = cfg.lr;
    let mut stage = 0usize;
    let mut last_event = 0usize;

    let mut best_smooth = f64::INFINITY;
    let mut best_params = *start;
    let mut history = Vec::with_capacity(cfg.max_iters);
    let mut converged = false;
    let mut iters_used = 0;

    for t in 1..=cfg.max_iters {
        let p = u.map(sigmoid);
        let params = NormalizedEllipse::from_array(p);
        let full = obj.eval_frozen(&params, norm)?;
        if full.smooth < best_smooth {
            best_smooth = full.smooth;
            best_params = params;
        }
        history.push(best_smooth);
        iters_used = t;

        if t - last_event > CONVERGENCE_WINDOW {
            let prev = history[t - 1 - CONVERGENCE_WINDOW];
            if (prev - best_smooth) / prev.max(1e-12) < cfg.tol_rel_loss {
                // A plateau over the very first window means the start was
                // already a fixed point; otherwise tighten the step and
                // keep polishing until the stages are spent.
                let stuck_at_start = t == CONVERGENCE_WINDOW + 1;
                if stage >= LR_STAGES || stuck_at_start {
                    converged = true;
                    break;
                }
                stage += 1;
                lr *= LR_DECAY;
                last_event = t;
            }
        }

        b1t *= ADAM_BETA1;
        b2t *= ADAM_BETA2;
        for k in 0..5 {
            // Chain through the sigmoid reparameterization.
            let g = full.grad[k] * p[k] * (1.0 - p[k]);
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[k] / (1.0 - b1t);
            let v_hat = v[k] / (1.0 - b2t);
            u[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }

    // Report the endpoint under the true objective (fresh normalizer).
    let endpoint = obj.eval_full(&best_params)?;
    let ellipse = frame.denormalize(&best_params, cfg).canonicalize();
    Ok(FitResult {
        ellipse,
        final_loss: endpoint.clamped,
        iters_used,
        restart_index: 0,
        converged,
    })
}

/// Center jitter of ±5% of the frame and axis scaling of ±20% for
/// restarts beyond the first.
fn jitter_start(start: &NormalizedEllipse, eps: f64, rng: &mut ChaCha8Rng) -> NormalizedEllipse {
    let scale_a = 1.0 + rng.random_range(-0.2..0.2);
    let scale_b = 1.0 + rng.random_range(-0.2..0.2);
    NormalizedEllipse {
        xhat0: (start.xhat0 + rng.random_range(-0.05..0.05)).clamp(0.02, 0.98),
        yhat0: (start.yhat0 + rng.random_range(-0.05..0.05)).clamp(0.02, 0.98),
        ahat: ((start.ahat + eps) * scale_a - eps).clamp(0.01, 0.98),
        bhat: ((start.bhat + eps) * scale_b - eps).clamp(0.01, 0.98),
        thetahat: start.thetahat.clamp(0.02, 0.98),
    }
}

fn best_of_restarts(
    start0: NormalizedEllipse,
    frame: Frame,
    eye: &MaskImage,
    gt_visible: &MaskImage,
    cfg: &FitConfig,
    eps: f64,
    salt: u64,
) -> Result<FitResult> {
    let mut best: Option<FitResult> = None;
    for r in 0..cfg.restarts.max(1) {
        let start = if r == 0 {
            start0
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, salt ^ (r as u64) << 8));
            jitter_start(&start0, eps, &mut rng)
        };
        let mut res = optimize(&start, frame, eye, gt_visible, cfg)?;
        res.restart_index = r;
        // Ranked by the reported loss, so more restarts can only improve it.
        let better = best.as_ref().is_none_or(|b| res.final_loss < b.final_loss);
        if better {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

// ── Stage 1: iris over the full frame ───────────────────────────────────────

/// Fit the full iris ellipse to the visible iris-region mask (pupil pixels
/// included as positives) under the eye-region condition.
pub fn fit_iris(
    visible_iris_region: &MaskImage,
    eye: &MaskImage,
    cfg: &FitConfig,
) -> Result<FitResult> {
    let (w, h) = eye.shape();
    let init = init_from_visible(visible_iris_region, eye, 1.2)?;
    let start0 = clamp_params(normalize_iris(&init, w as f64, h as f64, cfg.eps_iris));
    let frame = Frame::Image { width: w, height: h };
    best_of_restarts(start0, frame, eye, visible_iris_region, cfg, cfg.eps_iris, SALT_IRIS)
}

// ── Stage 2: pupil inside the iris RoI ──────────────────────────────────────

/// Fit the full pupil inside the iris bounding square. Masks are resampled
/// to `cfg.roi_size` (bilinear for the eye condition, nearest for the
/// binary ground truth); the square may extend past the image, in which
/// case outside samples read as zero. The result is reported in absolute
/// image coordinates.
pub fn fit_pupil(
    visible_pupil: &MaskImage,
    eye: &MaskImage,
    iris: &Ellipse5D,
    cfg: &FitConfig,
) -> Result<FitResult> {
    let sq = iris.bounding_square()?;
    let (w, h) = eye.shape();
    if sq.x1 + sq.s <= 0.0 || sq.y1 + sq.s <= 0.0 || sq.x1 >= w as f64 || sq.y1 >= h as f64 {
        return Err(Error::RoiOutOfBounds);
    }
    let grid = cfg.roi_size;
    let eye_roi = resample_bilinear(eye, &sq, grid).threshold(0.5);
    let gt_roi = resample_nearest(visible_pupil, &sq, grid);
    let n_pos = gt_roi.count_positive();
    if n_pos < 5 {
        return Err(Error::TooFewPixels { needed: 5, got: n_pos });
    }

    let init = init_from_visible(&gt_roi, &eye_roi, 1.0)?;
    // Grid coordinate u corresponds to the square fraction (u + 0.5) / grid.
    let start0 = clamp_params(NormalizedEllipse {
        xhat0: (init.x0 + 0.5) / grid as f64,
        yhat0: (init.y0 + 0.5) / grid as f64,
        ahat: 2.0 * init.a / grid as f64 - cfg.eps_pupil,
        bhat: 2.0 * init.b / grid as f64 - cfg.eps_pupil,
        thetahat: init.theta.rem_euclid(std::f64::consts::PI) / std::f64::consts::PI,
    });
    let frame = Frame::Roi(sq);
    best_of_restarts(start0, frame, &eye_roi, &gt_roi, cfg, cfg.eps_pupil, SALT_PUPIL)
}

/// Whether the square extends beyond a `w x h` image.
pub fn square_clipped(sq: &BoundingSquare, w: usize, h: usize) -> bool {
    sq.x1 < 0.0 || sq.y1 < 0.0 || sq.x1 + sq.s > w as f64 || sq.y1 + sq.s > h as f64
}

fn clamp_params(p: NormalizedEllipse) -> NormalizedEllipse {
    NormalizedEllipse {
        xhat0: p.xhat0.clamp(0.02, 0.98),
        yhat0: p.yhat0.clamp(0.02, 0.98),
        ahat: p.ahat.clamp(0.01, 0.98),
        bhat: p.bhat.clamp(0.01, 0.98),
        thetahat: p.thetahat.clamp(0.02, 0.98),
    }
}

// ── Scene assembly ───────────────────────────────────────────────────────────

/// Full two-stage fit of one scene.
pub fn fit_scene(
    visible_pupil: &MaskImage,
    visible_iris_region: &MaskImage,
    eye: &MaskImage,
    cfg: &FitConfig,
) -> Result<SceneFit> {
    let iris = fit_iris(visible_iris_region, eye, cfg)?;
    let roi = iris.ellipse.bounding_square()?;
    let (w, h) = eye.shape();
    let pupil = fit_pupil(visible_pupil, eye, &iris.ellipse, cfg)?;
    Ok(SceneFit { iris, pupil, roi, roi_clipped: square_clipped(&roi, w, h) })
}

/// Class labels of the assembled 3-class segmentation.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_SCLERA: u8 = 1;
pub const LABEL_IRIS: u8 = 2;
pub const LABEL_PUPIL: u8 = 3;

/// Per-pixel class labels assembled from the fitted ellipses under the
/// eye-region condition: every eye pixel is exactly one of pupil, iris or
/// sclera; everything else is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl ClassMap {
    /// Grayscale rendering with labels spread over [0, 1].
    pub fn to_grayscale(&self) -> MaskImage {
        MaskImage {
            width: self.width,
            height: self.height,
            data: self.labels.iter().map(|&l| l as f64 / 3.0).collect(),
        }
    }
}

pub fn assemble_class_map(
    iris: &Ellipse5D,
    pupil: &Ellipse5D,
    eye: &MaskImage,
) -> Result<ClassMap> {
    let (w, h) = eye.shape();
    let iris_m = hard_mask(iris, w, h)?;
    let pupil_m = hard_mask(pupil, w, h)?;
    let labels = (0..w * h)
        .map(|i| {
            if eye.data[i] <= 0.5 {
                LABEL_BACKGROUND
            } else if pupil_m.data[i] > 0.5 {
                LABEL_PUPIL
            } else if iris_m.data[i] > 0.5 {
                LABEL_IRIS
            } else {
                LABEL_SCLERA
            }
        })
        .collect();
    Ok(ClassMap { width: w, height: h, labels })
}

// ── RoI resampling ───────────────────────────────────────────────────────────

/// Bilinear resampling of `src` over the square onto a `grid x grid`
/// image, at the pixel-center sample points of [`Frame::Roi`]; samples
/// outside the source read as zero.
fn resample_bilinear(src: &MaskImage, sq: &BoundingSquare, grid: usize) -> MaskImage {
    let step = sq.s / grid as f64;
    MaskImage::from_fn(grid, grid, |u, v| {
        sample_bilinear(
            src,
            sq.x1 + (u as f64 + 0.5) * step,
            sq.y1 + (v as f64 + 0.5) * step,
        )
    })
}

/// Nearest-neighbor resampling; preserves binary label identity.
fn resample_nearest(src: &MaskImage, sq: &BoundingSquare, grid: usize) -> MaskImage {
    let step = sq.s / grid as f64;
    MaskImage::from_fn(grid, grid, |u, v| {
        let x = (sq.x1 + (u as f64 + 0.5) * step).round();
        let y = (sq.y1 + (v as f64 + 0.5) * step).round();
        if x < 0.0 || y < 0.0 || x >= src.width as f64 || y >= src.height as f64 {
            0.0
        } else {
            src.get(x as usize, y as usize)
        }
    })
}

fn sample_bilinear(src: &MaskImage, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= src.width as f64 || yi >= src.height as f64 {
            0.0
        } else {
            src.get(xi as usize, yi as usize)
        }
    };
    let v00 = at(x0, y0);
    let v10 = at(x0 + 1.0, y0);
    let v01 = at(x0, y0 + 1.0);
    let v11 = at(x0 + 1.0, y0 + 1.0);
    v00 * (1.0 - fx) * (1.0 - fy) + v10 * fx * (1.0 - fy) + v01 * (1.0 - fx) * fy + v11 * fx * fy
}

// ── Tests ──────────────────────────────────────────────────────────────────
