//! Fixed-focal pinhole camera, `x = Pi(K (X + T))`.
//!
//! Pixel (0, 0) is the top-left corner of the top-left pixel and +y points
//! down. All rotation lives in the model's root joint, so the camera only
//! carries a translation.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FOCAL: f64 = 1000.0;
pub const DEFAULT_IMAGE_SIZE: u32 = 512;
/// Points must be at least this far in front of the camera to project.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub width: u32,
    pub height: u32,
    pub translation: Vector3<f64>,
    /// Overrides the image-center principal point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub principal_point: Option<Vector2<f64>>,
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            focal: DEFAULT_FOCAL,
            width: DEFAULT_IMAGE_SIZE,
            height: DEFAULT_IMAGE_SIZE,
            translation: Vector3::zeros(),
            principal_point: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    /// Camera-space depth `d` of the point.
    pub depth: f64,
    /// False when the point is at or behind the camera plane; `pixel` is then meaningless.
    pub in_front: bool,
}

impl Camera {
    pub fn with_translation(translation: Vector3<f64>) -> Self {
        Camera {
            translation,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "focal must be positive, got {}",
                self.focal
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image size must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        if !self.translation.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite("camera translation".into()));
        }
        Ok(())
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        self.principal_point
            .unwrap_or_else(|| Vector2::new(self.width as f64 / 2.0, self.height as f64 / 2.0))
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        let c = self.principal_point();
        Matrix3::new(self.focal, 0.0, c.x, 0.0, self.focal, c.y, 0.0, 0.0, 1.0)
    }

    /// Camera-space position `X + T`.
    pub fn to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        point + self.translation
    }

    /// Projects a camera-space point.
    pub fn project_camera_space(&self, p: &Vector3<f64>) -> Projection {
        let depth = p.z;
        if !(depth > MIN_DEPTH) {
            return Projection {
                pixel: Vector2::new(f64::NAN, f64::NAN),
                depth,
                in_front: false,
            };
        }
        let c = self.principal_point();
        Projection {
            pixel: Vector2::new(
                self.focal * p.x / depth + c.x,
                self.focal * p.y / depth + c.y,
            ),
            depth,
            in_front: true,
        }
    }

    pub fn project_point(&self, point: &Vector3<f64>) -> Projection {
        self.project_camera_space(&self.to_camera(point))
    }

    pub fn project(&self, points: &[Vector3<f64>]) -> Vec<Projection> {
        points.iter().map(|p| self.project_point(p)).collect()
    }

    pub fn contains_pixel(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.width as f64
            && pixel.y < self.height as f64
    }

    /// Jacobian of the pixel with respect to the camera-space point.
    pub(crate) fn projection_jacobian(&self, p: &Vector3<f64>) -> [[f64; 3]; 2] {
        let inv = 1.0 / p.z;
        let f = self.focal;
        [
            [f * inv, 0.0, -f * p.x * inv * inv],
            [0.0, f * inv, -f * p.y * inv * inv],
        ]
    }
}
