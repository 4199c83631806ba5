//! The articulated quadruped model.

pub mod pose;
pub mod rotation;
pub mod template;
pub mod toy;

pub use pose::{
    pose_mesh, pose_mesh_cached, MeshCotangent, Params, ParamsGrad, PoseCache, PosedMesh,
};
pub use rotation::{rodrigues, rodrigues_jacobian, rotation_log, skew};
pub use template::{write_obj, ModelTemplate, TemplateParts};
pub use toy::{
    make_toy_template, ToyConfig, FAMILY_NAMES, KEYPOINT_NAMES, KP_NOSE, KP_TAIL_ROOT,
    TORSO_KEYPOINTS,
};
