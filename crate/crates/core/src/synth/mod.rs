//! Structure-conditioned synthetic data: scene sampling, mask and depth
//! rendering, keypoint visibility, mask-consistency filtering, background
//! compositing and annotation records.
//!
//! Image generation and segmentation happen outside this crate; their outputs
//! come back in as image files.

mod annotation;
mod filter;
pub mod io;
mod raster;

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{read_json, write_json, Error, Result};
use crate::losses::PriorDistribution;
use crate::model::Params;

pub use annotation::{
    emit_annotation, mask_bbox, AnnotationPaths, AnnotationRecord, CameraRecord, BBOX_PADDING,
};
pub use filter::{
    composite_background, cycle_consistency, CycleCheck, FilterVerdict, DEFAULT_IOU_THRESHOLD,
    UNCERTAIN_IOU,
};
pub use raster::{
    keypoint_visibility, rasterize, ConditionImages, Mask, NEAR_PLANE, VISIBILITY_EPS_REL,
};

/// Species with their family, as carried in annotation records.
pub const SPECIES: [(&str, &str); 10] = [
    ("cat", "felidae"),
    ("tiger", "felidae"),
    ("lion", "felidae"),
    ("cheetah", "felidae"),
    ("dog", "canidae"),
    ("wolf", "canidae"),
    ("horse", "equidae"),
    ("zebra", "equidae"),
    ("cow", "bovidae"),
    ("hippo", "hippopotamidae"),
];

/// Sampling box for the scene translation, meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub translation_min: [f64; 3],
    pub translation_max: [f64; 3],
    pub focal: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            translation_min: [-0.5, -0.5, 4.0],
            translation_max: [0.5, 0.5, 8.0],
            focal: crate::camera::DEFAULT_FOCAL,
            width: crate::camera::DEFAULT_IMAGE_SIZE,
            height: crate::camera::DEFAULT_IMAGE_SIZE,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            let (lo, hi) = (self.translation_min[i], self.translation_max[i]);
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidArgument(format!(
                    "bad translation range [{lo}, {hi}]"
                )));
            }
        }
        if self.translation_min[2] <= crate::camera::MIN_DEPTH {
            return Err(Error::InvalidArgument(
                "scene depth range must be in front of the camera".into(),
            ));
        }
        Camera {
            focal: self.focal,
            width: self.width,
            height: self.height,
            ..Default::default()
        }
        .validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSample {
    /// `gamma` is zero; the sampled translation lives in the camera.
    pub params: Params,
    pub camera: Camera,
    pub species: String,
    pub family: String,
    /// Library id and row the body pose came from.
    pub pose_source: String,
    pub seed: u64,
}

/// Body poses to draw from. Each entry is one full `theta`; the root row is
/// replaced at sampling time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseLibrary {
    pub id: String,
    pub poses: Vec<Vec<Vector3<f64>>>,
}

impl PoseLibrary {
    /// Reads a JSON list of pose rows, each a list of `[x, y, z]` axis-angles.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let rows: Vec<Vec<[f64; 3]>> = read_json(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "poses".into());
        Self::from_rows(id, rows)
    }

    pub fn from_rows(id: String, rows: Vec<Vec<[f64; 3]>>) -> Result<Self> {
        let poses: Vec<Vec<Vector3<f64>>> = rows
            .into_iter()
            .map(|r| r.into_iter().map(Vector3::from).collect())
            .collect();
        let lib = PoseLibrary { id, poses };
        lib.validate()?;
        Ok(lib)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let rows: Vec<Vec<[f64; 3]>> = self
            .poses
            .iter()
            .map(|p| p.iter().map(|v| [v.x, v.y, v.z]).collect())
            .collect();
        write_json(path.as_ref(), &rows)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.poses.first() else {
            return Ok(());
        };
        for (i, p) in self.poses.iter().enumerate() {
            if p.len() != first.len() {
                return Err(Error::Validation(format!(
                    "pose {i} has {} joints, expected {}",
                    p.len(),
                    first.len()
                )));
            }
            if !p.iter().all(|v| v.iter().all(|c| c.is_finite())) {
                return Err(Error::NonFinite(format!("pose {i}")));
            }
        }
        Ok(())
    }
}

// Joint layout of the toy skeleton: four legs of four joints from 8, tail from 24.
const LEG_START: usize = 8;
const TAIL_START: usize = 24;
const TAIL_LEN: usize = 8;

/// Procedural gait cycles (walk, trot, canter) with per-pose jitter.
///
/// Joint indices follow the toy skeleton; joints beyond `n_joints` are skipped.
pub fn make_gait_library(n_joints: usize, n_poses: usize, seed: u64) -> Result<PoseLibrary> {
    if n_joints == 0 || n_poses == 0 {
        return Err(Error::InvalidArgument(
            "gait library needs joints and poses".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Phase offsets of lf, rf, lb, rb.
    let gaits = [
        ("walk", [0.0, 0.5, 0.75, 0.25], 0.35),
        ("trot", [0.0, 0.5, 0.5, 0.0], 0.45),
        ("canter", [0.0, 0.1, 0.6, 0.7], 0.55),
    ];
    let mut poses = Vec::with_capacity(n_poses);
    for i in 0..n_poses {
        let (_, phases, amp) = gaits[i % gaits.len()];
        let t: f64 = rng.gen();
        let mut theta = vec![Vector3::zeros(); n_joints];
        let mut set = |k: usize, v: Vector3<f64>| {
            if k < n_joints {
                theta[k] = v;
            }
        };
        for (leg, phase) in phases.iter().enumerate() {
            let s = (2.0 * PI * (t + phase)).sin();
            let c = (2.0 * PI * (t + phase)).cos();
            let base = LEG_START + 4 * leg;
            let front = leg < 2;
            // Swing about the lateral axis; lower joints flex against the upper one.
            set(base, Vector3::new(0.0, 0.0, amp * s));
            let flex = if front { -0.5 } else { 0.5 };
            set(
                base + 1,
                Vector3::new(0.0, 0.0, flex * amp * (1.0 + c).max(0.0) * 0.6),
            );
            set(
                base + 2,
                Vector3::new(0.0, 0.0, -flex * amp * (1.0 + c).max(0.0) * 0.4),
            );
        }
        let wag = 0.3 * (2.0 * PI * t).sin();
        for k in 0..TAIL_LEN {
            set(
                TAIL_START + k,
                Vector3::new(0.0, wag / TAIL_LEN as f64 * 2.0, 0.05),
            );
        }
        let head_bob = 0.1 * (4.0 * PI * t).cos();
        set(4, Vector3::new(0.0, 0.0, head_bob));
        for (k, v) in theta.iter_mut().enumerate().skip(1) {
            let sigma = if k < LEG_START { 0.03 } else { 0.05 };
            *v += Vector3::from_fn(|_, _| sigma * rng.sample::<f64, _>(StandardNormal));
        }
        poses.push(theta);
    }
    Ok(PoseLibrary {
        id: "gait".into(),
        poses,
    })
}

/// Per-scene RNG, independent of how scenes are scheduled.
pub fn scene_rng(root_seed: u64, scene: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(scene);
    rng
}

/// Uniform on the open interval `(-pi, pi)`.
fn open_angle<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let a = rng.gen_range(-PI..PI);
        if a > -PI {
            return a;
        }
    }
}

/// Draws one scene: `beta ~ N(mu, Sigma)`, a library pose with a uniform
/// global rotation, and a uniform translation inside the configured box.
pub fn sample_scene<R: Rng + ?Sized>(
    rng: &mut R,
    prior: &PriorDistribution,
    library: &PoseLibrary,
    config: &SceneConfig,
) -> Result<SceneSample> {
    config.validate()?;
    if library.poses.is_empty() {
        return Err(Error::InvalidArgument("pose library is empty".into()));
    }
    let seed: u64 = rng.gen();
    let z: nalgebra::DVector<f64> =
        nalgebra::DVector::from_fn(prior.n_beta(), |_, _| rng.sample(StandardNormal));
    let beta = &prior.mu_beta + prior.beta_cholesky() * z;

    let row = rng.gen_range(0..library.poses.len());
    let mut theta = library.poses[row].clone();
    if theta.len() != prior.n_joints() {
        return Err(Error::DimensionMismatch {
            what: "library pose joints",
            expected: prior.n_joints(),
            got: theta.len(),
        });
    }
    theta[0] = Vector3::new(open_angle(rng), open_angle(rng), open_angle(rng));

    let translation = Vector3::from_fn(|i, _| {
        let (lo, hi) = (config.translation_min[i], config.translation_max[i]);
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..=hi)
        }
    });
    let (species, family) = SPECIES[rng.gen_range(0..SPECIES.len())];
    Ok(SceneSample {
        params: Params {
            beta: beta.iter().copied().collect(),
            theta,
            gamma: Vector3::zeros(),
        },
        camera: Camera {
            focal: config.focal,
            width: config.width,
            height: config.height,
            translation,
            principal_point: None,
        },
        species: species.into(),
        family: family.into(),
        pose_source: format!("{}:{row}", library.id),
        seed,
    })
}

/// Scenes `0..n` from a root seed, each on its own RNG stream.
pub fn sample_scenes(
    root_seed: u64,
    n: usize,
    prior: &PriorDistribution,
    library: &PoseLibrary,
    config: &SceneConfig,
) -> Result<Vec<SceneSample>> {
    (0..n as u64)
        .map(|i| sample_scene(&mut scene_rng(root_seed, i), prior, library, config))
        .collect()
}
