//! On-disk formats: binary PGM masks (bit-exact), optional PNG renders,
//! and the JSON bundles for scenes, fits and reports.
//!
//! A probability mask is stored as `round(p * 255)` in an 8-bit P5 PGM;
//! binary masks therefore serialize as 0/255. All JSON documents carry a
//! `schema_version` field and end with a newline.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::SceneFit;
use crate::geometry::Ellipse5D;
use crate::raster::{MaskImage, ScalarField};
use crate::synth::SceneGroundTruth;

pub const SCHEMA_VERSION: u32 = 1;

/// Mask file names inside a scene bundle directory.
pub const EYE_PGM: &str = "eye.pgm";
pub const VIS_PUPIL_PGM: &str = "vis_pupil.pgm";
pub const VIS_IRIS_REGION_PGM: &str = "vis_iris_region.pgm";
pub const GT_JSON: &str = "gt.json";

fn named_io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

// ── PGM ────────────────────────────────────────────────────────────────────

#[inline]
fn quantize(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a mask as binary PGM (P5, maxval 255).
pub fn write_mask_pgm(mask: &MaskImage, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| named_io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let bytes: Vec<u8> = mask.data.iter().map(|&p| quantize(p)).collect();
    (|| -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", mask.width, mask.height)?;
        w.write_all(&bytes)?;
        w.flush()
    })()
    .map_err(|e| named_io_err(path, e))
}

/// Read a binary PGM; pixel values scale to [0, 1] by the declared maxval.
pub fn read_mask_pgm(path: &Path) -> Result<MaskImage> {
    let raw = fs::read(path).map_err(|e| named_io_err(path, e))?;
    let parse_err = |msg: &str| Error::Parse(format!("{}: {msg}", path.display()));

    if raw.len() < 2 || &raw[..2] != b"P5" {
        return Err(parse_err("not a binary PGM (missing P5 magic)"));
    }
    // Header: three whitespace-separated integers after the magic, with
    // optional '#' comment lines.
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and comments
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < raw.len() && raw[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(parse_err("truncated header"));
        }
        *field = std::str::from_utf8(&raw[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err("bad header integer"))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(parse_err("unsupported maxval"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= raw.len() || !raw[pos].is_ascii_whitespace() {
        return Err(parse_err("missing raster separator"));
    }
    pos += 1;
    let n = width * height;
    if raw.len() - pos < n {
        return Err(parse_err("truncated raster data"));
    }
    let data = raw[pos..pos + n].iter().map(|&b| b as f64 / maxval as f64).collect();
    Ok(MaskImage { width, height, data })
}

// ── PNG ────────────────────────────────────────────────────────────────────

/// 8-bit grayscale PNG with the same quantization as the PGM writer.
pub fn write_mask_png(mask: &MaskImage, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| named_io_err(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), mask.width as u32, mask.height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = mask.data.iter().map(|&p| quantize(p)).collect();
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Affinely map a scalar field onto [0, 1] (constant fields map to zero);
/// the minimum pixel lands exactly at 0.
pub fn normalize_to_unit(field: &ScalarField) -> MaskImage {
    let (lo, hi) = (field.min_value(), field.max_value());
    let span = hi - lo;
    let data = if span > 0.0 {
        field.data.iter().map(|&v| (v - lo) / span).collect()
    } else {
        vec![0.0; field.data.len()]
    };
    MaskImage { width: field.width, height: field.height, data }
}

// ── JSON ───────────────────────────────────────────────────────────────────

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| named_io_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| named_io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Ground-truth document of a scene bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtDoc {
    pub schema_version: u32,
    pub iris: Ellipse5D,
    pub pupil: Ellipse5D,
    pub occlusion_fraction: f64,
}

/// Fit document: configuration echo plus either the scene fit or a
/// machine-readable error.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDoc {
    pub schema_version: u32,
    pub tau: f64,
    pub seed: u64,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub fit: Option<SceneFit>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<FitErrorDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitErrorDoc {
    pub kind: String,
    pub message: String,
}

// ── Scene bundles ──────────────────────────────────────────────────────────

/// Write a scene as a directory of PGM masks plus `gt.json`.
pub fn write_scene_bundle(dir: &Path, scene: &SceneGroundTruth) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| named_io_err(dir, e))?;
    write_mask_pgm(&scene.eye, &dir.join(EYE_PGM))?;
    write_mask_pgm(&scene.visible_pupil, &dir.join(VIS_PUPIL_PGM))?;
    write_mask_pgm(&scene.visible_iris_region, &dir.join(VIS_IRIS_REGION_PGM))?;
    let gt = GtDoc {
        schema_version: SCHEMA_VERSION,
        iris: scene.iris.canonicalize(),
        pupil: scene.pupil.canonicalize(),
        occlusion_fraction: scene.occlusion_fraction,
    };
    write_json(&gt, &dir.join(GT_JSON))
}

/// Read a scene bundle back.
pub fn read_scene_bundle(dir: &Path) -> Result<SceneGroundTruth> {
    let eye = read_mask_pgm(&dir.join(EYE_PGM))?;
    let visible_pupil = read_mask_pgm(&dir.join(VIS_PUPIL_PGM))?;
    let visible_iris_region = read_mask_pgm(&dir.join(VIS_IRIS_REGION_PGM))?;
    let gt: GtDoc = read_json(&dir.join(GT_JSON))?;
    Ok(SceneGroundTruth {
        iris: gt.iris,
        pupil: gt.pupil,
        eye,
        visible_pupil,
        visible_iris_region,
        occlusion_fraction: gt.occlusion_fraction,
    })
}

// ── Tests ──────────────────────────────────────────────────────────────────
