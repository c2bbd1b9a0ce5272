//! Evaluation protocol: per-class IoU inside the eye-region condition and
//! median center-location errors, plus an optional RANSAC baseline column.

use serde::{Deserialize, Serialize};

use crate::baseline::{contour_points, ransac_ellipse};
use crate::error::{Error, Result};
use crate::fitter::SceneFit;
use crate::geometry::Ellipse5D;
use crate::raster::{hard_mask, MaskImage};
use crate::synth::SceneGroundTruth;

// ── Elementary metrics ─────────────────────────────────────────────────────

/// Intersection-over-union of two binary masks, optionally restricted to a
/// region mask. An empty union counts as perfect agreement (1.0).
pub fn iou(a: &MaskImage, b: &MaskImage, region: Option<&MaskImage>) -> Result<f64> {
    a.same_shape(b)?;
    if let Some(r) = region {
        a.same_shape(r)?;
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for i in 0..a.data.len() {
        if let Some(r) = region {
            if r.data[i] <= 0.5 {
                continue;
            }
        }
        let (pa, pb) = (a.data[i] > 0.5, b.data[i] > 0.5);
        if pa && pb {
            inter += 1;
        }
        if pa || pb {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Euclidean distance between ellipse centers, pixels.
pub fn center_error(pred: &Ellipse5D, gt: &Ellipse5D) -> f64 {
    ((pred.x0 - gt.x0).powi(2) + (pred.y0 - gt.y0).powi(2)).sqrt()
}

/// Orientation error folded into [0, pi/2]; `None` for near-circular
/// ground truth where the angle is not identifiable.
pub fn angular_error(pred: &Ellipse5D, gt: &Ellipse5D) -> Option<f64> {
    let gt = gt.canonicalize();
    if (gt.a - gt.b).abs() / gt.a < 0.05 {
        return None;
    }
    let d = (pred.canonicalize().theta - gt.theta).abs();
    Some(d.min(std::f64::consts::PI - d))
}

/// Median of an unordered sample (mean of the two middle values for even
/// length). Panics on an empty slice.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty sample");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let mid = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    }
}

// ── Reports ────────────────────────────────────────────────────────────────

/// Per-scene evaluation record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneEval {
    pub index: usize,
    /// Visible-mask IoUs inside the ground-truth eye-region.
    pub iou_pupil: f64,
    pub iou_iris_region: f64,
    /// Full-ellipse hard-mask IoUs against the ground-truth ellipses
    /// (no conditioning).
    pub iou_pupil_full: f64,
    pub iou_iris_full: f64,
    pub err_loc_pupil: f64,
    pub err_loc_iris: f64,
    /// Fitted pupil region contained in the fitted iris region.
    pub pupil_inside_iris: bool,
    pub occlusion_fraction: f64,
}

/// Aggregates of one method over the valid scenes: mean IoUs, median
/// location errors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub iou_pupil: f64,
    pub iou_iris_region: f64,
    pub iou_eye: f64,
    pub iou_pupil_full_median: f64,
    pub iou_iris_full_median: f64,
    pub err_loc_pupil_median: f64,
    pub err_loc_iris_median: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub n_scenes: usize,
    /// Scenes whose fit failed and were skipped from the aggregates.
    pub n_failed: usize,
    pub condseg: MethodSummary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ransac: Option<MethodSummary>,
    /// RoI-focus ablation numbers, when that comparison was run.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub roi_ablation: Option<RoiAblation>,
    pub scenes: Vec<SceneEval>,
}

/// Median pupil center errors with and without the iris-RoI crop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoiAblation {
    pub err_loc_pupil_median_roi: f64,
    pub err_loc_pupil_median_full_frame: f64,
}

fn summarize(records: &[SceneEval]) -> MethodSummary {
    let mean = |f: fn(&SceneEval) -> f64| -> f64 {
        records.iter().map(f).sum::<f64>() / records.len() as f64
    };
    let med = |f: fn(&SceneEval) -> f64| -> f64 {
        median(&records.iter().map(f).collect::<Vec<_>>())
    };
    MethodSummary {
        iou_pupil: mean(|r| r.iou_pupil),
        iou_iris_region: mean(|r| r.iou_iris_region),
        // The eye-region is an input here (the ground-truth-conditioned
        // convention), so its IoU is 1 by construction.
        iou_eye: 1.0,
        iou_pupil_full_median: med(|r| r.iou_pupil_full),
        iou_iris_full_median: med(|r| r.iou_iris_full),
        err_loc_pupil_median: med(|r| r.err_loc_pupil),
        err_loc_iris_median: med(|r| r.err_loc_iris),
    }
}

fn eval_scene(
    index: usize,
    scene: &SceneGroundTruth,
    iris: &Ellipse5D,
    pupil: &Ellipse5D,
) -> Result<SceneEval> {
    let (w, h) = scene.eye.shape();
    let pupil_m = hard_mask(pupil, w, h)?;
    let iris_m = hard_mask(iris, w, h)?;
    let pupil_gt_m = hard_mask(&scene.pupil, w, h)?;
    let iris_gt_m = hard_mask(&scene.iris, w, h)?;
    let pred_vis_pupil = pupil_m.intersect(&scene.eye)?;
    let pred_vis_iris = iris_m.intersect(&scene.eye)?;
    let contained = (0..pupil_m.data.len())
        .all(|i| pupil_m.data[i] <= 0.5 || iris_m.data[i] > 0.5);
    Ok(SceneEval {
        index,
        iou_pupil: iou(&pred_vis_pupil, &scene.visible_pupil, Some(&scene.eye))?,
        iou_iris_region: iou(&pred_vis_iris, &scene.visible_iris_region, Some(&scene.eye))?,
        iou_pupil_full: iou(&pupil_m, &pupil_gt_m, None)?,
        iou_iris_full: iou(&iris_m, &iris_gt_m, None)?,
        err_loc_pupil: center_error(pupil, &scene.pupil),
        err_loc_iris: center_error(iris, &scene.iris),
        pupil_inside_iris: contained,
        occlusion_fraction: scene.occlusion_fraction,
    })
}

/// Evaluate fitted scenes against the synthetic ground truth. `None` fits
/// count as failed and are excluded from the aggregates.
pub fn evaluate(scenes: &[SceneGroundTruth], fits: &[Option<SceneFit>]) -> Result<EvalReport> {
    if scenes.len() != fits.len() {
        return Err(Error::LengthMismatch { scenes: scenes.len(), fits: fits.len() });
    }
    let mut records = Vec::new();
    let mut n_failed = 0usize;
    for (i, (scene, fit)) in scenes.iter().zip(fits).enumerate() {
        match fit {
            Some(f) => records.push(eval_scene(i, scene, &f.iris.ellipse, &f.pupil.ellipse)?),
            None => n_failed += 1,
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyCondition);
    }
    Ok(EvalReport {
        schema_version: 1,
        n_scenes: scenes.len(),
        n_failed,
        condseg: summarize(&records),
        ransac: None,
        roi_ablation: None,
        scenes: records,
    })
}

/// RANSAC baseline settings for the comparison column.
#[derive(Debug, Clone, Copy)]
pub struct BaselineOptions {
    pub iters: usize,
    pub inlier_thresh: f64,
    pub seed: u64,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        Self { iters: 500, inlier_thresh: 1.5, seed: 0 }
    }
}

/// Fit each scene's visible contours with RANSAC and aggregate with the
/// same protocol. Scenes are processed in parallel (`jobs` threads) with a
/// deterministic, index-ordered aggregation. Returns the summary and the
/// number of scenes where the baseline failed to fit.
pub fn evaluate_baseline(
    scenes: &[SceneGroundTruth],
    opts: &BaselineOptions,
    jobs: usize,
) -> Result<(MethodSummary, usize)> {
    let per_scene = parallel_map(scenes, jobs, |i, scene| {
        let fit_one = |mask: &MaskImage| -> Result<Ellipse5D> {
            ransac_ellipse(&contour_points(mask)?, opts.iters, opts.inlier_thresh, opts.seed)
        };
        match (fit_one(&scene.visible_iris_region), fit_one(&scene.visible_pupil)) {
            (Ok(iris), Ok(pupil)) => eval_scene(i, scene, &iris, &pupil).ok(),
            _ => None,
        }
    });
    let records: Vec<SceneEval> = per_scene.into_iter().flatten().collect();
    let n_failed = scenes.len() - records.len();
    if records.is_empty() {
        return Err(Error::EmptyCondition);
    }
    Ok((summarize(&records), n_failed))
}

/// Index-preserving parallel map over a slice with `jobs` scoped threads;
/// results come back in input order regardless of scheduling.
pub(crate) fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut indexed: Vec<(usize, R)> = std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                s.spawn(move || {
                    items
                        .iter()
                        .enumerate()
                        .skip(w)
                        .step_by(jobs)
                        .map(|(i, t)| (i, f(i, t)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    });
    indexed.sort_by_key(|(i, _)| *i);
    indexed.into_iter().map(|(_, r)| r).collect()
}

/// Plain-text table with one row per method, columns matching the report
/// fields.
pub fn format_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>8} {:>13} {:>10} {:>14} {:>13}\n",
        "method", "pupil", "iris-region", "eye-region", "err-loc-pupil", "err-loc-iris"
    ));
    let mut row = |name: &str, s: &MethodSummary| {
        out.push_str(&format!(
            "{:<10} {:>8.4} {:>13.4} {:>10.4} {:>14.3} {:>13.3}\n",
            name, s.iou_pupil, s.iou_iris_region, s.iou_eye,
            s.err_loc_pupil_median, s.err_loc_iris_median
        ));
    };
    row("condseg", &report.condseg);
    if let Some(r) = &report.ransac {
        row("ransac", r);
    }
    out
}

// ── Tests ──────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fitter::FitResult;
    use crate::synth::{generate_scene, SynthConfig};
    use approx::assert_relative_eq;

    fn fit_from(iris: Ellipse5D, pupil: Ellipse5D) -> SceneFit {
        let as_result = |e: Ellipse5D| FitResult {
            ellipse: e.canonicalize(),
            final_loss: 0.0,
            iters_used: 0,
            restart_index: 0,
            converged: true,
        };
        SceneFit {
            roi: iris.bounding_square().unwrap(),
            roi_clipped: false,
            iris: as_result(iris),
            pupil: as_result(pupil),
        }
    }

    #[test]
    fn iou_of_identical_masks_is_one() {
        let m = MaskImage::from_fn(6, 6, |x, y| if x > 2 && y < 4 { 1.0 } else { 0.0 });
        assert_eq!(iou(&m, &m, None).unwrap(), 1.0);
    }

    #[test]
    fn iou_of_disjoint_masks_is_zero() {
        let a = MaskImage::from_fn(6, 6, |x, _| if x < 2 { 1.0 } else { 0.0 });
        let b = MaskImage::from_fn(6, 6, |x, _| if x > 3 { 1.0 } else { 0.0 });
        assert_eq!(iou(&a, &b, None).unwrap(), 0.0);
    }

    #[test]
    fn iou_of_half_overlap() {
        // b is a 2x2 block, a its left half.
        let b = MaskImage::from_fn(4, 4, |x, y| if (1..3).contains(&x) && (1..3).contains(&y) { 1.0 } else { 0.0 });
        let a = MaskImage::from_fn(4, 4, |x, y| if x == 1 && (1..3).contains(&y) { 1.0 } else { 0.0 });
        assert_eq!(iou(&a, &b, None).unwrap(), 0.5);
    }

    #[test]
    fn iou_empty_union_is_one() {
        let z = MaskImage::zeros(4, 4);
        assert_eq!(iou(&z, &z, None).unwrap(), 1.0);
        // Non-empty masks whose union misses the region entirely.
        let a = MaskImage::from_fn(4, 4, |x, _| if x == 0 { 1.0 } else { 0.0 });
        let region = MaskImage::from_fn(4, 4, |x, _| if x == 3 { 1.0 } else { 0.0 });
        assert_eq!(iou(&a, &a, Some(&region)).unwrap(), 1.0);
    }

    #[test]
    fn iou_is_symmetric_and_monotone() {
        let a = MaskImage::from_fn(8, 8, |x, y| if x + y < 6 { 1.0 } else { 0.0 });
        let b = MaskImage::from_fn(8, 8, |x, y| if x + y < 9 { 1.0 } else { 0.0 });
        assert_eq!(iou(&a, &b, None).unwrap(), iou(&b, &a, None).unwrap());
        // Growing the true-positive overlap cannot reduce the score.
        let mut grown = a.clone();
        grown.set(7, 0, 1.0); // a pixel of b \ a
        assert!(iou(&grown, &b, None).unwrap() >= iou(&a, &b, None).unwrap());
    }

    #[test]
    fn iou_shape_mismatch() {
        let a = MaskImage::zeros(4, 4);
        let b = MaskImage::zeros(5, 4);
        assert!(matches!(iou(&a, &b, None), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn center_error_examples() {
        let at = |x: f64, y: f64| Ellipse5D::new(x, y, 2.0, 1.0, 0.0);
        assert_eq!(center_error(&at(4.0, 5.0), &at(4.0, 5.0)), 0.0);
        assert_eq!(center_error(&at(0.0, 0.0), &at(3.0, 4.0)), 5.0);
    }

    #[test]
    fn center_error_invariant_under_common_rotation() {
        let rotate = |e: &Ellipse5D, phi: f64| {
            let (s, c) = phi.sin_cos();
            Ellipse5D::new(
                c * e.x0 - s * e.y0,
                s * e.x0 + c * e.y0,
                e.a,
                e.b,
                e.theta + phi,
            )
        };
        let p = Ellipse5D::new(10.0, 4.0, 3.0, 2.0, 0.3);
        let g = Ellipse5D::new(7.0, 9.0, 3.0, 2.0, 1.1);
        let base = center_error(&p, &g);
        let rot = center_error(&rotate(&p, 0.77), &rotate(&g, 0.77));
        assert_relative_eq!(base, rot, epsilon = 1e-12);
    }

    #[test]
    fn angular_error_folds_and_skips_circles() {
        let g = Ellipse5D::new(0.0, 0.0, 2.0, 1.0, 0.1);
        let p = Ellipse5D::new(0.0, 0.0, 2.0, 1.0, 0.1 + std::f64::consts::PI - 0.02);
        assert_relative_eq!(angular_error(&p, &g).unwrap(), 0.02, epsilon = 1e-12);
        let circle = Ellipse5D::new(0.0, 0.0, 1.0, 1.0, 0.0);
        assert!(angular_error(&p, &circle).is_none());
    }

    #[test]
    fn median_of_even_and_odd_samples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn evaluate_ground_truth_as_fits_is_perfect() {
        let cfg = SynthConfig::default();
        let scenes: Vec<_> = (0..3).map(|i| generate_scene(&cfg, i).unwrap()).collect();
        let fits: Vec<_> = scenes.iter().map(|s| Some(fit_from(s.iris, s.pupil))).collect();
        let report = evaluate(&scenes, &fits).unwrap();
        assert_eq!(report.n_failed, 0);
        assert_eq!(report.condseg.iou_pupil, 1.0);
        assert_eq!(report.condseg.iou_iris_region, 1.0);
        assert_eq!(report.condseg.err_loc_pupil_median, 0.0);
        assert_eq!(report.condseg.err_loc_iris_median, 0.0);
    }

    #[test]
    fn pupil_offset_moves_only_pupil_error() {
        let cfg = SynthConfig::default();
        let scenes: Vec<_> = (0..2).map(|i| generate_scene(&cfg, i).unwrap()).collect();
        let mut fits: Vec<_> = scenes.iter().map(|s| Some(fit_from(s.iris, s.pupil))).collect();
        let s0 = &scenes[0];
        let shifted = Ellipse5D::new(s0.pupil.x0 + 3.0, s0.pupil.y0 + 4.0, s0.pupil.a, s0.pupil.b, s0.pupil.theta);
        fits[0] = Some(fit_from(s0.iris, shifted));
        let report = evaluate(&scenes, &fits).unwrap();
        assert_eq!(report.condseg.err_loc_iris_median, 0.0);
        assert!(report.condseg.err_loc_pupil_median > 0.0);
        assert_eq!(report.scenes[0].err_loc_pupil, 5.0);
    }

    #[test]
    fn evaluate_rejects_misaligned_lists() {
        let cfg = SynthConfig::default();
        let scenes: Vec<_> = (0..2).map(|i| generate_scene(&cfg, i).unwrap()).collect();
        let fits = vec![Some(fit_from(scenes[0].iris, scenes[0].pupil))];
        assert!(matches!(
            evaluate(&scenes, &fits),
            Err(Error::LengthMismatch { scenes: 2, fits: 1 })
        ));
    }

    #[test]
    fn failed_fits_are_counted_and_skipped() {
        let cfg = SynthConfig::default();
        let scenes: Vec<_> = (0..3).map(|i| generate_scene(&cfg, i).unwrap()).collect();
        let mut fits: Vec<_> = scenes.iter().map(|s| Some(fit_from(s.iris, s.pupil))).collect();
        fits[1] = None;
        let report = evaluate(&scenes, &fits).unwrap();
        assert_eq!(report.n_failed, 1);
        assert_eq!(report.scenes.len(), 2);
    }

    #[test]
    fn baseline_on_unoccluded_scenes_is_accurate() {
        let cfg = SynthConfig { openness: (1.45, 1.6), ..SynthConfig::default() };
        let scenes: Vec<_> = (0..3).map(|i| generate_scene(&cfg, i).unwrap()).collect();
        let (summary, failed) =
            evaluate_baseline(&scenes, &BaselineOptions::default(), 1).unwrap();
        assert_eq!(failed, 0);
        assert!(summary.err_loc_pupil_median < 0.5, "{}", summary.err_loc_pupil_median);
        assert!(summary.err_loc_iris_median < 0.5, "{}", summary.err_loc_iris_median);
    }

    #[test]
    fn parallel_map_preserves_order() {
        let items: Vec<usize> = (0..37).collect();
        let seq = parallel_map(&items, 1, |i, &v| i * 100 + v);
        let par = parallel_map(&items, 4, |i, &v| i * 100 + v);
        assert_eq!(seq, par);
    }
}
