//! Occlusion-completed pupil and iris ellipse recovery from visible-only
//! segmentation masks.
//!
//! Eyelids hide part of the pupil and iris in most eye images, so visible
//! segmentation masks only cover a fraction of the true elliptical regions.
//! This crate recovers the full ellipses anyway, using two priors: the
//! projected pupil/iris boundary is an ellipse, and its visible part is
//! exactly the full region intersected with the eye-region mask. Candidate
//! ellipses are rendered to soft masks through a differentiable conic
//! distance field, scored with a binary cross-entropy loss evaluated only
//! inside the eye-region condition, and optimized directly in a normalized
//! 5-parameter space. No ellipse annotations and no learned model are
//! involved.
//!
//! Pipeline stages:
//!
//! 1. **geometry** – exact ellipse/conic algebra, bounding squares,
//!    normalized parameter mapping.
//! 2. **raster** – conic distance fields (`distmap`) and sigmoid soft masks
//!    (`segmap`).
//! 3. **objective** – eye-region conditioned BCE and its analytic gradient
//!    in normalized parameter space.
//! 4. **fitter** – moment initialization, Adam descent with restarts, the
//!    two-stage iris → pupil-in-RoI scheme.
//! 5. **synth** – synthetic scene oracle with parabolic-eyelid occlusion.
//! 6. **baseline** – direct least-squares conic fit and a RANSAC wrapper
//!    over mask contours.
//! 7. **metrics** – conditioned IoU and center-location error reports.
//! 8. **io / cli** – PGM/PNG mask files, JSON bundles, command-line surface.

pub mod baseline;
pub mod cli;
pub mod error;
pub mod fitter;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod raster;
pub mod synth;

pub use error::{Error, Result};
pub use fitter::{FitConfig, FitResult, SceneFit};
pub use geometry::{BoundingSquare, ConicMatrix, Ellipse5D, NormalizedEllipse};
pub use raster::{MaskImage, ScalarField};
pub use synth::{SceneGroundTruth, SynthConfig};
