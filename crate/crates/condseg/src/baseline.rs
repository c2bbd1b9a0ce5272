//! Classical ellipse fitting over mask contours: ellipse-specific direct
//! least squares plus a RANSAC wrapper. Serves as the fitter's independent
//! cross-check and as the pseudo-ground-truth route on real data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{ConicMatrix, Ellipse5D};
use crate::raster::MaskImage;

/// Minimal sample size for a conic fit (5 degrees of freedom plus one for
/// numerical stability).
const MIN_POINTS: usize = 6;

/// Minimum acceptable inlier ratio for a RANSAC consensus.
const MIN_INLIER_RATIO: f64 = 0.3;

// ── Contours ───────────────────────────────────────────────────────────────

/// 4-connected boundary pixels of the positive region, in row-major order.
/// Image borders count as outside.
pub fn contour_points(mask: &MaskImage) -> Result<Vec<(f64, f64)>> {
    let (w, h) = mask.shape();
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.is_positive(x, y) {
                continue;
            }
            let exposed = [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dx, dy)| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                nx < 0
                    || ny < 0
                    || nx >= w as i64
                    || ny >= h as i64
                    || !mask.is_positive(nx as usize, ny as usize)
            });
            if exposed {
                pts.push((x as f64, y as f64));
            }
        }
    }
    if pts.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(pts)
}

// ── 3x3 helpers ────────────────────────────────────────────────────────────

type Mat3 = [[f64; 3]; 3];
type Vec3 = [f64; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inverse3(m: &Mat3) -> Option<Mat3> {
    let det = det3(m);
    if !det.is_finite() || det.abs() < 1e-300 {
        return None;
    }
    let inv = 1.0 / det;
    let cof =
        |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    Some([
        [cof(1, 1, 2, 2) * inv, cof(0, 2, 2, 1) * inv, cof(0, 1, 1, 2) * inv],
        [cof(1, 2, 2, 0) * inv, cof(0, 0, 2, 2) * inv, cof(0, 2, 1, 0) * inv],
        [cof(1, 0, 2, 1) * inv, cof(0, 1, 2, 0) * inv, cof(0, 0, 1, 1) * inv],
    ])
}

/// Real roots of `x^3 + p2 x^2 + p1 x + p0 = 0`.
fn cubic_roots(p2: f64, p1: f64, p0: f64) -> Vec<f64> {
    // Depressed form t^3 + pt + q with x = t - p2/3.
    let shift = -p2 / 3.0;
    let p = p1 - p2 * p2 / 3.0;
    let q = 2.0 * p2 * p2 * p2 / 27.0 - p2 * p1 / 3.0 + p0;
    let disc = -4.0 * p * p * p - 27.0 * q * q;
    if disc >= 0.0 {
        // Three real roots via the trigonometric method.
        let r = (-p / 3.0).max(0.0).sqrt();
        if r < 1e-300 {
            return vec![shift];
        }
        let cos_arg = (-q / (2.0 * r * r * r)).clamp(-1.0, 1.0);
        let phi = cos_arg.acos();
        (0..3)
            .map(|k| 2.0 * r * ((phi + 2.0 * std::f64::consts::PI * k as f64) / 3.0).cos() + shift)
            .collect()
    } else {
        let sq = (q * q / 4.0 + p * p * p / 27.0).sqrt();
        let u = (-q / 2.0 + sq).cbrt();
        let v = (-q / 2.0 - sq).cbrt();
        vec![u + v + shift]
    }
}

/// Null vector of a (near-)singular 3x3 matrix: the adjugate row of
/// largest norm is proportional to it for a rank-2 matrix.
fn null_vector(m: &Mat3) -> Option<Vec3> {
    let cof = |r0: usize, r1: usize| -> Vec3 {
        [
            m[r0][1] * m[r1][2] - m[r0][2] * m[r1][1],
            m[r0][2] * m[r1][0] - m[r0][0] * m[r1][2],
            m[r0][0] * m[r1][1] - m[r0][1] * m[r1][0],
        ]
    };
    let rows = [cof(1, 2), cof(2, 0), cof(0, 1)];
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    let (best, &norm) = norms
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("three candidates");
    if norm < 1e-300 {
        return None;
    }
    let inv = norm.sqrt().recip();
    Some(rows[best].map(|v| v * inv))
}

// ── Direct least-squares fit ───────────────────────────────────────────────

/// Ellipse-specific direct least-squares conic fit.
///
/// Minimizes the algebraic residual subject to the ellipse constraint
/// `4AC - B^2 = 1`, solved as a generalized eigenproblem on the scatter
/// matrix of the (normalized) design monomials. Points are shifted to
/// their centroid and isotropically scaled before fitting.
pub fn direct_lsq_ellipse(points: &[(f64, f64)]) -> Result<Ellipse5D> {
    Ok(direct_lsq_conic(points)?.to_ellipse()?.canonicalize())
}

/// As [`direct_lsq_ellipse`] but returns the conic form.
pub fn direct_lsq_conic(points: &[(f64, f64)]) -> Result<ConicMatrix> {
    let n = points.len();
    if n < MIN_POINTS {
        return Err(Error::InsufficientPoints { needed: MIN_POINTS, got: n });
    }

    // Hartley-style normalization.
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let mean_dist = points
        .iter()
        .map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt())
        .sum::<f64>()
        / nf;
    let scale = if mean_dist > 1e-12 { std::f64::consts::SQRT_2 / mean_dist } else { 1.0 };

    // Scatter blocks over z1 = (x^2, xy, y^2), z2 = (x, y, 1).
    let mut s11 = [[0.0; 3]; 3];
    let mut s12 = [[0.0; 3]; 3];
    let mut s22 = [[0.0; 3]; 3];
    for &(px, py) in points {
        let x = (px - mx) * scale;
        let y = (py - my) * scale;
        let z1 = [x * x, x * y, y * y];
        let z2 = [x, y, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                s11[i][j] += z1[i] * z1[j];
                s12[i][j] += z1[i] * z2[j];
                s22[i][j] += z2[i] * z2[j];
            }
        }
    }

    let s22_inv = inverse3(&s22).ok_or(Error::DegenerateConfiguration)?;
    // t = -S22^-1 S12^T, reduced system M = C1^-1 (S11 + S12 t).
    let mut s12_t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            s12_t[i][j] = s12[j][i];
        }
    }
    let t = mat_mul(&s22_inv, &s12_t).map(|row| row.map(|v| -v));
    let m_full = {
        let s12t = mat_mul(&s12, &t);
        let mut m = s11;
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += s12t[i][j];
            }
        }
        m
    };
    // C1 = [[0,0,2],[0,-1,0],[2,0,0]] so C1^-1 M has rows (m2/2, -m1, m0/2).
    let reduced = [
        m_full[2].map(|v| v / 2.0),
        m_full[1].map(|v| -v),
        m_full[0].map(|v| v / 2.0),
    ];

    // Characteristic polynomial x^3 - tr x^2 + minor_sum x - det.
    let tr = reduced[0][0] + reduced[1][1] + reduced[2][2];
    let minor_sum = reduced[0][0] * reduced[1][1] - reduced[0][1] * reduced[1][0]
        + reduced[0][0] * reduced[2][2]
        - reduced[0][2] * reduced[2][0]
        + reduced[1][1] * reduced[2][2]
        - reduced[1][2] * reduced[2][1];
    let det = det3(&reduced);

    let mut best: Option<(f64, Vec3)> = None;
    for lambda in cubic_roots(-tr, minor_sum, -det) {
        let mut shifted = reduced;
        for (i, row) in shifted.iter_mut().enumerate() {
            row[i] -= lambda;
        }
        let Some(v) = null_vector(&shifted) else { continue };
        // Ellipse constraint on the quadratic part.
        if 4.0 * v[0] * v[2] - v[1] * v[1] > 0.0 {
            let better = best.as_ref().is_none_or(|(l, _)| lambda.abs() < l.abs());
            if better {
                best = Some((lambda, v));
            }
        }
    }
    let (_, a1) = best.ok_or(Error::DegenerateConfiguration)?;
    let a2 = mat_vec(&t, &a1);

    // Undo the normalization: substitute x' = s(x - mx), y' = s(y - my).
    let s2 = scale * scale;
    let (qa, qb, qc) = (a1[0] * s2, a1[1] * s2, a1[2] * s2);
    let qd = -2.0 * a1[0] * s2 * mx - a1[1] * s2 * my + a2[0] * scale;
    let qe = -a1[1] * s2 * mx - 2.0 * a1[2] * s2 * my + a2[1] * scale;
    let qf = a1[0] * s2 * mx * mx + a1[1] * s2 * mx * my + a1[2] * s2 * my * my
        - a2[0] * scale * mx
        - a2[1] * scale * my
        + a2[2];

    let conic = ConicMatrix { a: qa, b: qb, c: qc, d: qd, e: qe, f: qf };
    if !conic.is_ellipse() {
        return Err(Error::DegenerateConfiguration);
    }
    Ok(conic)
}

// ── RANSAC ─────────────────────────────────────────────────────────────────

/// Robust consensus fit: direct least squares on random minimal subsets,
/// Sampson-distance inlier test, final refit on the best consensus set.
/// Deterministic per seed.
pub fn ransac_ellipse(
    points: &[(f64, f64)],
    iters: usize,
    inlier_thresh: f64,
    seed: u64,
) -> Result<Ellipse5D> {
    let n = points.len();
    if n < MIN_POINTS {
        return Err(Error::InsufficientPoints { needed: MIN_POINTS, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..n).collect();

    let count_inliers = |conic: &ConicMatrix| -> Vec<usize> {
        points
            .iter()
            .enumerate()
            .filter(|(_, &(x, y))| conic.sampson_distance(x, y) < inlier_thresh)
            .map(|(i, _)| i)
            .collect()
    };

    let mut best_inliers: Vec<usize> = Vec::new();
    for _ in 0..iters {
        // Partial Fisher-Yates draw of 6 distinct points.
        for k in 0..MIN_POINTS {
            let j = rng.random_range(k..n);
            indices.swap(k, j);
        }
        let sample: Vec<(f64, f64)> =
            indices[..MIN_POINTS].iter().map(|&i| points[i]).collect();
        let Ok(conic) = direct_lsq_conic(&sample) else { continue };
        let inliers = count_inliers(&conic);
        if inliers.len() > best_inliers.len() {
            best_inliers = inliers;
            if best_inliers.len() == n {
                break;
            }
        }
    }

    let ratio = best_inliers.len() as f64 / n as f64;
    if ratio < MIN_INLIER_RATIO {
        return Err(Error::NoConsensus { best_ratio: ratio });
    }
    let consensus: Vec<(f64, f64)> = best_inliers.iter().map(|&i| points[i]).collect();
    direct_lsq_ellipse(&consensus)
}

// ── Tests ──────────────────────────────────────────────────────────────────
