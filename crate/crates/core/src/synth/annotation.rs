use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{ConditionImages, Mask, SceneSample};
use crate::camera::Camera;
use crate::error::{read_json, write_json, Error, Result};
use crate::losses::KeypointObservation;
use crate::model::{Params, PosedMesh};

/// Pixels added on every side of the tight mask bounds.
pub const BBOX_PADDING: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub focal: f64,
    pub width: u32,
    pub height: u32,
    pub translation: [f64; 3],
}

impl CameraRecord {
    pub fn from_camera(c: &Camera) -> Self {
        CameraRecord {
            focal: c.focal,
            width: c.width,
            height: c.height,
            translation: c.translation.into(),
        }
    }

    pub fn to_camera(&self) -> Camera {
        Camera {
            focal: self.focal,
            width: self.width,
            height: self.height,
            translation: Vector3::from(self.translation),
            principal_point: None,
        }
    }
}

/// Per-image label. Records from 2D-only sources leave the parameters null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image: String,
    pub species: String,
    pub family: String,
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
    /// Row-major `n_joints x 3` axis-angles.
    #[serde(default)]
    pub theta: Option<Vec<f64>>,
    #[serde(default)]
    pub gamma: Option<[f64; 3]>,
    pub camera: CameraRecord,
    #[serde(default)]
    pub keypoints3d: Option<Vec<[f64; 3]>>,
    /// `(u, v, visibility)` per keypoint.
    pub keypoints2d: Vec<[f64; 3]>,
    /// `[x_min, y_min, x_max, y_max]` in pixels.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub mask: Option<String>,
    #[serde(default)]
    pub depth: Option<String>,
    pub source: String,
    #[serde(default)]
    pub pose_source: Option<String>,
}

/// File locations written into a record.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnnotationPaths {
    pub image: String,
    pub mask: Option<String>,
    pub depth: Option<String>,
}

impl AnnotationRecord {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r: AnnotationRecord = read_json(path.as_ref())?;
        r.validate()?;
        Ok(r)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn has_params(&self) -> bool {
        self.beta.is_some() && self.theta.is_some()
    }

    pub fn params(&self) -> Result<Option<Params>> {
        let (Some(beta), Some(theta)) = (&self.beta, &self.theta) else {
            return Ok(None);
        };
        Ok(Some(Params {
            beta: beta.clone(),
            theta: Params::theta_from_flat(theta)?,
            gamma: Vector3::from(self.gamma.unwrap_or_default()),
        }))
    }

    pub fn keypoints3d(&self) -> Option<Vec<Vector3<f64>>> {
        self.keypoints3d
            .as_ref()
            .map(|k| k.iter().map(|p| Vector3::from(*p)).collect())
    }

    pub fn keypoints2d(&self) -> Vec<Vector2<f64>> {
        self.keypoints2d
            .iter()
            .map(|k| Vector2::new(k[0], k[1]))
            .collect()
    }

    pub fn visibility(&self) -> Vec<bool> {
        self.keypoints2d.iter().map(|k| k[2] == 1.0).collect()
    }

    pub fn observation(&self) -> KeypointObservation {
        KeypointObservation {
            points: self.keypoints2d(),
            visible: self.visibility(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cam = self.camera.to_camera();
        cam.validate()?;
        if self.beta.is_some() != self.theta.is_some() {
            return Err(Error::Validation(
                "beta and theta must be both present or both null".into(),
            ));
        }
        if let Some(t) = &self.theta {
            if t.len() % 3 != 0 {
                return Err(Error::Validation(format!(
                    "theta length {} is not a multiple of 3",
                    t.len()
                )));
            }
        }
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        if !self.beta.as_deref().map_or(true, finite)
            || !self.theta.as_deref().map_or(true, finite)
            || !self.gamma.as_ref().map_or(true, |g| finite(g))
        {
            return Err(Error::NonFinite("record parameters".into()));
        }
        if let Some(k3) = &self.keypoints3d {
            if k3.len() != self.keypoints2d.len() {
                return Err(Error::Validation(format!(
                    "{} 3D keypoints but {} 2D keypoints",
                    k3.len(),
                    self.keypoints2d.len()
                )));
            }
            if !k3.iter().all(|p| finite(p)) {
                return Err(Error::NonFinite("keypoints3d".into()));
            }
        }
        for (i, k) in self.keypoints2d.iter().enumerate() {
            if k[2] != 0.0 && k[2] != 1.0 {
                return Err(Error::Validation(format!(
                    "keypoint {i} visibility {} is not 0 or 1",
                    k[2]
                )));
            }
            if k[2] == 1.0 && !cam.contains_pixel(&Vector2::new(k[0], k[1])) {
                return Err(Error::Validation(format!(
                    "visible keypoint {i} lies outside the image"
                )));
            }
        }
        let [x0, y0, x1, y1] = self.bbox;
        if !(x0 <= x1 && y0 <= y1 && x0 >= 0.0 && y0 >= 0.0)
            || x1 > self.camera.width as f64
            || y1 > self.camera.height as f64
        {
            return Err(Error::Validation(format!(
                "bbox {:?} is not inside the image",
                self.bbox
            )));
        }
        Ok(())
    }
}

/// Tight bounds of the foreground, padded by [`BBOX_PADDING`] and clamped to the image.
pub fn mask_bbox(mask: &Mask) -> Option<[f64; 4]> {
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != u32::MAX).then(|| {
        [
            (x0 as f64 - BBOX_PADDING).max(0.0),
            (y0 as f64 - BBOX_PADDING).max(0.0),
            (x1 as f64 + BBOX_PADDING).min(mask.width as f64),
            (y1 as f64 + BBOX_PADDING).min(mask.height as f64),
        ]
    })
}

/// Builds and validates the label for a rendered scene.
pub fn emit_annotation(
    sample: &SceneSample,
    posed: &PosedMesh,
    images: &ConditionImages,
    visibility: &[bool],
    paths: &AnnotationPaths,
    source: &str,
) -> Result<AnnotationRecord> {
    let camera = &sample.camera;
    if visibility.len() != posed.keypoints3d.len() {
        return Err(Error::DimensionMismatch {
            what: "visibility",
            expected: posed.keypoints3d.len(),
            got: visibility.len(),
        });
    }
    let mask = images.mask();
    let bbox = mask_bbox(&mask)
        .ok_or_else(|| Error::Validation("scene renders to an empty mask".into()))?;
    let keypoints2d = posed
        .keypoints3d
        .iter()
        .zip(visibility)
        .map(|(k, v)| {
            let p = camera.project_point(k);
            if p.in_front {
                [p.pixel.x, p.pixel.y, *v as u8 as f64]
            } else {
                [0.0, 0.0, 0.0]
            }
        })
        .collect();
    let record = AnnotationRecord {
        image: paths.image.clone(),
        species: sample.species.clone(),
        family: sample.family.clone(),
        beta: Some(sample.params.beta.clone()),
        theta: Some(sample.params.theta_flat()),
        gamma: Some(sample.params.gamma.into()),
        camera: CameraRecord::from_camera(camera),
        keypoints3d: Some(posed.keypoints3d.iter().map(|k| (*k).into()).collect()),
        keypoints2d,
        bbox,
        mask: paths.mask.clone(),
        depth: paths.depth.clone(),
        source: source.into(),
        pose_source: Some(sample.pose_source.clone()),
    };
    record.validate()?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_is_padded_and_clamped() {
        let m = Mask::from_fn(20, 10, |x, y| (5..8).contains(&x) && (1..4).contains(&y));
        assert_eq!(mask_bbox(&m), Some([3.0, 0.0, 10.0, 6.0]));
        assert_eq!(mask_bbox(&Mask::new(4, 4)), None);
    }

    fn record() -> AnnotationRecord {
        AnnotationRecord {
            image: "img/0.png".into(),
            species: "dog".into(),
            family: "canidae".into(),
            beta: None,
            theta: None,
            gamma: None,
            camera: CameraRecord::from_camera(&Camera::default()),
            keypoints3d: None,
            keypoints2d: vec![[10.0, 20.0, 1.0], [600.0, 0.0, 0.0]],
            bbox: [0.0, 0.0, 100.0, 100.0],
            mask: None,
            depth: None,
            source: "AnimalPose".into(),
            pose_source: None,
        }
    }

    #[test]
    fn validation() {
        let r = record();
        r.validate().unwrap();
        assert!(r.params().unwrap().is_none());
        let mut bad = r.clone();
        bad.keypoints2d[1][2] = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = r.clone();
        bad.keypoints2d[0][2] = 0.5;
        assert!(bad.validate().is_err());
        let mut bad = r.clone();
        bad.beta = Some(vec![0.0]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unknown_field_is_named() {
        let mut v = serde_json::to_value(record()).unwrap();
        v["colour"] = serde_json::json!(1);
        let err = crate::error::from_json_str::<AnnotationRecord>(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }
}
