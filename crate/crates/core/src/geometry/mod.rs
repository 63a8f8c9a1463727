//! Landmark smoothing, convex-hull masks and mask deformation.

mod deform;
mod hull;
mod interpolate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use deform::{deform_mask, gaussian_blur};
pub use hull::{convex_hull, point_in_convex_polygon, rasterize_hull, select_hull_points};
pub use interpolate::{frame_distance, interpolate_frame, interpolation_ratio};

/// Pixel-space coordinate, x to the right and y down. Pixel `(col, row)`
/// covers `[col, col+1) x [row, row+1)` and has its center at `+0.5`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// The landmarks of one frame.
pub type LandmarkFrame = Vec<Point>;

pub fn centroid(points: &[Point]) -> Option<Point> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
    Some(Point::new(sx / n, sy / n))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("landmark frames differ in size: {prev} vs {curr}")]
    ShapeMismatch { prev: usize, curr: usize },
    #[error("hull of {count} selected points is degenerate (collinear or too few)")]
    DegenerateHull { count: usize },
    #[error("invalid geometry parameter: {0}")]
    InvalidParameter(String),
}

/// Threshold and reference distance of the landmark re-interpolation, both
/// in pixels divided by the landmark count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolationConfig {
    pub tau: f64,
    pub dbar: f64,
}

impl Default for InterpolationConfig {
    fn default() -> Self {
        Self { tau: 0.35, dbar: 0.2 }
    }
}

impl InterpolationConfig {
    pub fn new(tau: f64, dbar: f64) -> Result<Self, GeometryError> {
        let cfg = Self { tau, dbar };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(GeometryError::InvalidParameter(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.dbar > 0.0 && self.dbar.is_finite()) {
            return Err(GeometryError::InvalidParameter(format!("dbar must be > 0, got {}", self.dbar)));
        }
        Ok(())
    }
}

/// Which subset of landmarks spans the blending hull.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HullMode {
    FullHull,
    /// Landmarks at or below the mean landmark row.
    LowerHalf,
    /// Landmarks in the lower two thirds of the landmark extent.
    JawRegion,
}

impl HullMode {
    pub const ALL: [HullMode; 3] = [HullMode::FullHull, HullMode::LowerHalf, HullMode::JawRegion];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HullMaskParams {
    pub hull_mode: HullMode,
    /// Odd elastic-deformation kernel width in pixels; 1 disables deformation.
    pub deform_kernel: usize,
    pub blur_sigma: f64,
}

impl HullMaskParams {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.deform_kernel == 0 || self.deform_kernel % 2 == 0 {
            return Err(GeometryError::InvalidParameter(format!(
                "deform_kernel must be odd and >= 1, got {}",
                self.deform_kernel
            )));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(GeometryError::InvalidParameter(format!("blur_sigma must be >= 0, got {}", self.blur_sigma)));
        }
        Ok(())
    }
}
