//! Synthetic ground-truth scenes: full iris/pupil ellipses occluded by a
//! parabolic-eyelid eye-region.
//!
//! Scene appearance decouples into the iris/pupil placement (gaze) and the
//! eyelid openness (elevation); the visible masks are exactly the full
//! ellipse regions intersected with the eye-region, which is what the
//! fitter exploits. Scenes are deterministic per `(seed, index)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fitter::derive_seed;
use crate::geometry::Ellipse5D;
use crate::raster::{hard_mask, MaskImage};

const SALT_SCENE: u64 = 0x5ce0;
const SALT_PERTURB: u64 = 0x9e27;

/// Attempts before a scene or pupil placement is declared infeasible.
const REJECTION_BUDGET: usize = 1000;

/// Half-width of the eye opening relative to the iris semi-major axis.
const EYE_HALF_WIDTH: f64 = 2.4;

// ── Types ──────────────────────────────────────────────────────────────────

/// One synthetic scene: full ellipses, eye-region and the derived visible
/// masks (`visible = full region ∩ eye-region`, exactly).
#[derive(Debug, Clone)]
pub struct SceneGroundTruth {
    pub iris: Ellipse5D,
    pub pupil: Ellipse5D,
    pub eye: MaskImage,
    pub visible_pupil: MaskImage,
    pub visible_iris_region: MaskImage,
    /// Hidden share of the full iris region, in [0, 1].
    pub occlusion_fraction: f64,
}

/// Sampling ranges of the generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    /// Iris semi-major axis range, pixels.
    pub iris_radius: (f64, f64),
    /// Pupil semi-major axis as a fraction of the iris semi-major axis.
    pub pupil_ratio: (f64, f64),
    /// Semi-minor/semi-major ratio for both ellipses.
    pub eccentricity: (f64, f64),
    /// Rotation angle range, radians.
    pub theta_range: (f64, f64),
    /// Eyelid openness relative to the iris semi-major axis. Values above
    /// ~1.3 leave the iris fully visible; small values bury most of it.
    pub openness: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 320,
            height: 240,
            iris_radius: (45.0, 75.0),
            pupil_ratio: (0.25, 0.55),
            eccentricity: (0.75, 1.0),
            theta_range: (0.0, std::f64::consts::PI),
            openness: (0.15, 1.5),
            seed: 0,
        }
    }
}

// ── Generation ─────────────────────────────────────────────────────────────

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Eye-region mask: pixels between the upper and lower eyelid parabolas
/// through the eye corners, intersected with the frame.
fn eyelid_mask(
    w: usize,
    h: usize,
    ex: f64,
    ey: f64,
    half_width: f64,
    upper: f64,
    lower: f64,
) -> MaskImage {
    MaskImage::from_fn(w, h, |x, y| {
        let dx = (x as f64 - ex) / half_width;
        let q = 1.0 - dx * dx;
        if q <= 0.0 {
            return 0.0;
        }
        let yf = y as f64;
        if yf >= ey - upper * q && yf <= ey + lower * q {
            1.0
        } else {
            0.0
        }
    })
}

/// Generate scene `index`. Scenes with no valid visible pupil (fully
/// occluded) are resampled rather than returned.
pub fn generate_scene(cfg: &SynthConfig, index: u64) -> Result<SceneGroundTruth> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ SALT_SCENE, index));
    let (w, h) = (cfg.width, cfg.height);

    for _ in 0..REJECTION_BUDGET {
        // Iris fully inside the frame.
        let a_i = sample_range(&mut rng, cfg.iris_radius);
        let b_i = a_i * sample_range(&mut rng, cfg.eccentricity);
        let theta_i = sample_range(&mut rng, cfg.theta_range);
        let probe = Ellipse5D::new(0.0, 0.0, a_i, b_i, theta_i);
        let sq = probe.bounding_square()?;
        let (dw, dh) = (-sq.x1, -sq.y1);
        let (mx, my) = (dw + 2.0, dh + 2.0);
        if 2.0 * mx >= w as f64 || 2.0 * my >= h as f64 {
            continue; // iris too large for the frame
        }
        let x_i = rng.random_range(mx..w as f64 - mx);
        let y_i = rng.random_range(my..h as f64 - my);
        let iris = Ellipse5D::new(x_i, y_i, a_i, b_i, theta_i).canonicalize();
        let iris_conic = iris.to_conic()?;

        // Pupil concentric with jitter, contained in the iris by rejection.
        let mut pupil = None;
        for _ in 0..REJECTION_BUDGET {
            let a_p = a_i * sample_range(&mut rng, cfg.pupil_ratio);
            let b_p = a_p * sample_range(&mut rng, cfg.eccentricity);
            let theta_p = sample_range(&mut rng, cfg.theta_range);
            let x_p = x_i + rng.random_range(-0.12..0.12) * a_i;
            let y_p = y_i + rng.random_range(-0.12..0.12) * a_i;
            let cand = Ellipse5D::new(x_p, y_p, a_p, b_p, theta_p).canonicalize();
            // The conic value is convex, so its maximum over the pupil
            // region sits on the pupil boundary: boundary samples strictly
            // inside the iris certify containment.
            let inside = cand
                .boundary_points(128)
                .iter()
                .all(|&(x, y)| iris_conic.eval(x, y) < -1e-3);
            if inside {
                pupil = Some(cand);
                break;
            }
        }
        let Some(pupil) = pupil else {
            return Err(Error::RejectionBudgetExceeded { attempts: REJECTION_BUDGET });
        };

        // Eyelids anchored near the iris center.
        let t = sample_range(&mut rng, cfg.openness);
        let ex = x_i + rng.random_range(-0.15..0.15) * a_i;
        let ey = y_i + rng.random_range(-0.1..0.1) * a_i;
        let eye = eyelid_mask(w, h, ex, ey, EYE_HALF_WIDTH * a_i, t * a_i, (0.75 + 0.45 * t) * a_i);

        let iris_full = hard_mask(&iris, w, h)?;
        let pupil_full = hard_mask(&pupil, w, h)?;
        let visible_iris_region = iris_full.intersect(&eye)?;
        let visible_pupil = pupil_full.intersect(&eye)?;

        if visible_pupil.count_positive() < 5 {
            continue; // no valid visible pupil; discard and resample
        }
        let occlusion_fraction =
            1.0 - visible_iris_region.count_positive() as f64 / iris_full.count_positive() as f64;

        return Ok(SceneGroundTruth {
            iris,
            pupil,
            eye,
            visible_pupil,
            visible_iris_region,
            occlusion_fraction,
        });
    }
    Err(Error::RejectionBudgetExceeded { attempts: REJECTION_BUDGET })
}

// ── Mask perturbation ──────────────────────────────────────────────────────

/// True where the 5x5 neighborhood (clamped at the frame) contains both
/// mask values, i.e. within 2 px of the mask boundary.
fn boundary_band(mask: &MaskImage) -> Vec<bool> {
    let (w, h) = mask.shape();
    let mut band = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let center = mask.is_positive(x, y);
            let x_lo = x.saturating_sub(2);
            let y_lo = y.saturating_sub(2);
            let x_hi = (x + 2).min(w - 1);
            let y_hi = (y + 2).min(h - 1);
            'scan: for ny in y_lo..=y_hi {
                for nx in x_lo..=x_hi {
                    if mask.is_positive(nx, ny) != center {
                        band[y * w + x] = true;
                        break 'scan;
                    }
                }
            }
        }
    }
    band
}

/// Flip boundary-adjacent visible-mask pixels with probability `noise`;
/// the eye mask and ground-truth ellipses are untouched. Surrogate for
/// annotation noise when probing fitter robustness.
pub fn perturb_masks(scene: &SceneGroundTruth, noise: f64, seed: u64) -> SceneGroundTruth {
    assert!((0.0..=0.5).contains(&noise), "noise must be in [0, 0.5]");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SALT_PERTURB));
    let mut flip = |mask: &MaskImage| {
        let band = boundary_band(mask);
        let mut out = mask.clone();
        for (i, &in_band) in band.iter().enumerate() {
            if in_band && rng.random_range(0.0..1.0) < noise {
                out.data[i] = if mask.data[i] > 0.5 { 0.0 } else { 1.0 };
            }
        }
        out
    };
    let visible_pupil = flip(&scene.visible_pupil);
    let visible_iris_region = flip(&scene.visible_iris_region);
    SceneGroundTruth {
        iris: scene.iris,
        pupil: scene.pupil,
        eye: scene.eye.clone(),
        visible_pupil,
        visible_iris_region,
        occlusion_fraction: scene.occlusion_fraction,
    }
}

// ── Tests ──────────────────────────────────────────────────────────────────
