//! Error type shared by all pipeline stages.

use std::fmt;

/// Errors produced by geometry, rasterization, fitting, synthesis,
/// baseline fitting and evaluation.
#[derive(Debug)]
pub enum Error {
    /// Ellipse has a non-positive or non-finite semi-axis.
    DegenerateEllipse { a: f64, b: f64 },
    /// Conic does not describe an ellipse (discriminant check failed) or
    /// cannot be converted back to geometric parameters.
    DegenerateConic,
    /// Soft-mask normalizer max(D) + delta is not positive (the whole grid
    /// lies strictly inside the ellipse).
    NonPositiveNormalizer { max_d: f64, delta: f64 },
    /// Conditioning mask has no positive pixel.
    EmptyCondition,
    /// Mask dimensions disagree.
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    /// Not enough positive pixels to initialize a fit.
    TooFewPixels { needed: usize, got: usize },
    /// Iris bounding square does not intersect the image.
    RoiOutOfBounds,
    /// Containment sampling failed to produce a valid scene.
    RejectionBudgetExceeded { attempts: usize },
    /// Mask has no positive pixel.
    EmptyMask,
    /// Too few contour points for a conic fit.
    InsufficientPoints { needed: usize, got: usize },
    /// Points are (near-)collinear or otherwise unusable for an ellipse fit.
    DegenerateConfiguration,
    /// RANSAC found no model with an acceptable inlier ratio.
    NoConsensus { best_ratio: f64 },
    /// Scene and fit lists have different lengths.
    LengthMismatch { scenes: usize, fits: usize },
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// Malformed on-disk data (PGM header, JSON schema, ...).
    Parse(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DegenerateEllipse { a, b } => {
                write!(f, "degenerate ellipse: semi-axes a={a}, b={b}")
            }
            Self::DegenerateConic => write!(f, "conic is not a proper ellipse"),
            Self::NonPositiveNormalizer { max_d, delta } => write!(
                f,
                "segmap normalizer max(D)+delta = {} is not positive",
                max_d + delta
            ),
            Self::EmptyCondition => write!(f, "eye-region condition mask is empty"),
            Self::ShapeMismatch { expected, got } => write!(
                f,
                "mask shape mismatch: expected {}x{}, got {}x{}",
                expected.0, expected.1, got.0, got.1
            ),
            Self::TooFewPixels { needed, got } => {
                write!(f, "too few positive pixels: need {needed}, got {got}")
            }
            Self::RoiOutOfBounds => write!(f, "iris bounding square lies outside the image"),
            Self::RejectionBudgetExceeded { attempts } => {
                write!(f, "scene sampling rejected {attempts} times")
            }
            Self::EmptyMask => write!(f, "mask has no positive pixel"),
            Self::InsufficientPoints { needed, got } => {
                write!(f, "too few points: need {needed}, got {got}")
            }
            Self::DegenerateConfiguration => {
                write!(f, "point configuration does not determine an ellipse")
            }
            Self::NoConsensus { best_ratio } => {
                write!(f, "no consensus: best inlier ratio {best_ratio:.3} < 0.3")
            }
            Self::LengthMismatch { scenes, fits } => {
                write!(f, "length mismatch: {scenes} scenes vs {fits} fits")
            }
            Self::Io(e) => write!(f, "i/o error: {e}"),
            Self::Parse(msg) => write!(f, "parse error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl Error {
    /// Stable machine-readable tag used in JSON error fields.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::DegenerateEllipse { .. } => "degenerate_ellipse",
            Self::DegenerateConic => "degenerate_conic",
            Self::NonPositiveNormalizer { .. } => "non_positive_normalizer",
            Self::EmptyCondition => "empty_condition",
            Self::ShapeMismatch { .. } => "shape_mismatch",
            Self::TooFewPixels { .. } => "too_few_pixels",
            Self::RoiOutOfBounds => "roi_out_of_bounds",
            Self::RejectionBudgetExceeded { .. } => "rejection_budget_exceeded",
            Self::EmptyMask => "empty_mask",
            Self::InsufficientPoints { .. } => "insufficient_points",
            Self::DegenerateConfiguration => "degenerate_configuration",
            Self::NoConsensus { .. } => "no_consensus",
            Self::LengthMismatch { .. } => "length_mismatch",
            Self::Io(_) => "io",
            Self::Parse(_) => "parse",
        }
    }

    /// True for errors that indicate an invalid fitting problem rather than
    /// an I/O or usage failure (CLI exit code 3).
    pub fn is_fit_domain(&self) -> bool {
        matches!(
            self,
            Self::DegenerateEllipse { .. }
                | Self::DegenerateConic
                | Self::NonPositiveNormalizer { .. }
                | Self::EmptyCondition
                | Self::ShapeMismatch { .. }
                | Self::TooFewPixels { .. }
                | Self::RoiOutOfBounds
                | Self::InsufficientPoints { .. }
                | Self::DegenerateConfiguration
                | Self::NoConsensus { .. }
        )
    }
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
