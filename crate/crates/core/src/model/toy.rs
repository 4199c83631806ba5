//! Procedural stand-in for the SMAL template.
//!
//! The toy animal is a set of closed tapered tubes, one per joint, running from
//! the joint to its first child (or a short cap for leaf joints). Model frame:
//! +x points toward the head, +y points down (toward the paws), +z completes a
//! right-handed frame; the animal's left side is at -z.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::template::{ModelTemplate, TemplateParts, N_KEYPOINTS, SMAL_N_BETA, SMAL_N_JOINTS};
use crate::error::{Error, Result};

pub const FAMILY_NAMES: [&str; 5] = ["felidae", "canidae", "equidae", "bovidae", "hippopotamidae"];

/// Keypoint layout of the toy template. Head-to-tail uses `nose` and `tail_root`.
pub const KEYPOINT_NAMES: [&str; N_KEYPOINTS] = [
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "chin",
    "throat",
    "withers",
    "tail_root",
    "tail_tip",
    "left_front_shoulder",
    "left_front_elbow",
    "left_front_wrist",
    "left_front_paw",
    "right_front_shoulder",
    "right_front_elbow",
    "right_front_wrist",
    "right_front_paw",
    "left_back_hip",
    "left_back_knee",
    "left_back_hock",
    "left_back_paw",
    "right_back_hip",
    "right_back_knee",
    "right_back_hock",
    "right_back_paw",
];

pub const KP_NOSE: usize = 0;
pub const KP_TAIL_ROOT: usize = 8;
/// Withers, shoulders and hips.
pub const TORSO_KEYPOINTS: [usize; 5] = [7, 10, 14, 18, 22];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub n_joints: usize,
    pub n_beta: usize,
    pub n_kp: usize,
    /// Vertices around each tube ring.
    pub ring_sides: usize,
    /// Rings along each tube, including both ends.
    pub rings_per_bone: usize,
    /// How far keypoints sit beneath the surface, in meters.
    pub keypoint_inset: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            n_joints: SMAL_N_JOINTS,
            n_beta: SMAL_N_BETA,
            n_kp: N_KEYPOINTS,
            ring_sides: 10,
            rings_per_bone: 5,
            keypoint_inset: 0.0025,
            seed: 0,
        }
    }
}

struct JointDef {
    name: &'static str,
    parent: Option<usize>,
    pos: [f64; 3],
    /// Tube radius at the joint and at the far end.
    radius: (f64, f64),
    /// Length of the cap when the joint ends up a leaf.
    leaf_len: f64,
    group: Group,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Group {
    Spine,
    Neck,
    Head,
    Leg,
    Tail,
}

const fn jd(
    name: &'static str,
    parent: Option<usize>,
    pos: [f64; 3],
    radius: (f64, f64),
    leaf_len: f64,
    group: Group,
) -> JointDef {
    JointDef {
        name,
        parent,
        pos,
        radius,
        leaf_len,
        group,
    }
}

const TAIL_STEP: [f64; 3] = [-0.09, 0.025, 0.0];

fn canonical_skeleton() -> Vec<JointDef> {
    use Group::*;
    let mut j = vec![
        jd("pelvis", None, [0.0, 0.0, 0.0], (0.16, 0.17), 0.2, Spine),
        jd(
            "spine0",
            Some(0),
            [0.25, -0.02, 0.0],
            (0.17, 0.17),
            0.2,
            Spine,
        ),
        jd(
            "spine1",
            Some(1),
            [0.5, -0.03, 0.0],
            (0.17, 0.16),
            0.2,
            Spine,
        ),
        jd(
            "spine2",
            Some(2),
            [0.75, -0.02, 0.0],
            (0.16, 0.09),
            0.15,
            Spine,
        ),
        jd(
            "neck0",
            Some(3),
            [0.92, -0.12, 0.0],
            (0.09, 0.08),
            0.12,
            Neck,
        ),
        jd(
            "neck1",
            Some(4),
            [1.02, -0.28, 0.0],
            (0.08, 0.09),
            0.12,
            Neck,
        ),
        jd("head", Some(5), [1.08, -0.42, 0.0], (0.1, 0.06), 0.15, Head),
        jd(
            "muzzle",
            Some(6),
            [1.3, -0.38, 0.0],
            (0.06, 0.04),
            0.08,
            Head,
        ),
    ];
    let front = [[0.78, 0.06], [0.74, 0.3], [0.77, 0.52], [0.78, 0.62]];
    let back = [[0.02, 0.06], [0.1, 0.3], [0.0, 0.5], [0.02, 0.62]];
    let radii_front = [(0.07, 0.05), (0.05, 0.04), (0.04, 0.035), (0.045, 0.045)];
    let radii_back = [(0.08, 0.055), (0.05, 0.04), (0.04, 0.035), (0.045, 0.045)];
    let names = [
        ["lf_shoulder", "lf_elbow", "lf_wrist", "lf_paw"],
        ["rf_shoulder", "rf_elbow", "rf_wrist", "rf_paw"],
        ["lb_hip", "lb_knee", "lb_hock", "lb_paw"],
        ["rb_hip", "rb_knee", "rb_hock", "rb_paw"],
    ];
    for (leg, side_names) in names.iter().enumerate() {
        let (xy, radii, attach) = if leg < 2 {
            (&front, &radii_front, 3)
        } else {
            (&back, &radii_back, 0)
        };
        let z = if leg % 2 == 0 { -0.11 } else { 0.11 };
        for seg in 0..4 {
            let parent = if seg == 0 { attach } else { j.len() - 1 };
            j.push(jd(
                side_names[seg],
                Some(parent),
                [xy[seg][0], xy[seg][1], z],
                radii[seg],
                0.08,
                Leg,
            ));
        }
    }
    let tail_names = [
        "tail0", "tail1", "tail2", "tail3", "tail4", "tail5", "tail6", "tail7",
    ];
    for (k, name) in tail_names.iter().enumerate() {
        let parent = if k == 0 { 0 } else { j.len() - 1 };
        let r0 = 0.045 - 0.004 * k as f64;
        let pos = [
            -0.12 + TAIL_STEP[0] * k as f64,
            -0.06 + TAIL_STEP[1] * k as f64,
            0.0,
        ];
        j.push(jd(name, Some(parent), pos, (r0, r0 - 0.004), 0.08, Tail));
    }
    j.push(jd(
        "l_ear",
        Some(6),
        [1.06, -0.52, -0.06],
        (0.03, 0.01),
        0.1,
        Head,
    ));
    j.push(jd(
        "r_ear",
        Some(6),
        [1.06, -0.52, 0.06],
        (0.03, 0.01),
        0.1,
        Head,
    ));
    j.push(jd(
        "jaw",
        Some(6),
        [1.1, -0.36, 0.0],
        (0.035, 0.025),
        0.15,
        Head,
    ));
    debug_assert_eq!(j.len(), SMAL_N_JOINTS);
    j
}

/// Canonical skeleton truncated or extended (by lengthening the tail) to `n` joints.
fn skeleton(n: usize) -> Vec<JointDef> {
    let mut joints = canonical_skeleton();
    joints.truncate(n);
    let mut last_tail = 31;
    while joints.len() < n {
        let prev = &joints[last_tail];
        let pos = [
            prev.pos[0] + TAIL_STEP[0],
            prev.pos[1] + TAIL_STEP[1],
            prev.pos[2],
        ];
        let r = (prev.radius.1 * 0.9).max(0.008);
        let idx = joints.len();
        joints.push(jd(
            "tail_ext",
            Some(last_tail),
            pos,
            (r, r * 0.9),
            0.06,
            Group::Tail,
        ));
        last_tail = idx;
    }
    joints
}

fn mirror_of(j: usize) -> Option<usize> {
    match j {
        8..=11 => Some(j + 4),
        12..=15 => Some(j - 4),
        16..=19 => Some(j + 4),
        20..=23 => Some(j - 4),
        32 => Some(33),
        33 => Some(32),
        _ => None,
    }
}

enum Placement {
    /// Center of the far end cap.
    FarCap,
    /// Surface patch at fraction `s` along the tube, facing `dir`.
    Side { s: f64, dir: [f64; 3] },
}

fn keypoint_defs() -> [(usize, Placement); N_KEYPOINTS] {
    use Placement::*;
    let side = |s: f64, dir: [f64; 3]| Side { s, dir };
    [
        (7, FarCap),
        (6, side(0.35, [0.0, -0.6, -1.0])),
        (6, side(0.35, [0.0, -0.6, 1.0])),
        (32, FarCap),
        (33, FarCap),
        (34, FarCap),
        (4, side(0.4, [0.4, 1.0, 0.0])),
        (3, side(0.1, [0.0, -1.0, 0.0])),
        (24, side(0.15, [0.0, -1.0, 0.0])),
        (31, FarCap),
        (8, side(0.15, [0.0, 0.0, -1.0])),
        (9, side(0.1, [-0.5, 0.0, -1.0])),
        (10, side(0.1, [0.5, 0.0, -1.0])),
        (11, FarCap),
        (12, side(0.15, [0.0, 0.0, 1.0])),
        (13, side(0.1, [-0.5, 0.0, 1.0])),
        (14, side(0.1, [0.5, 0.0, 1.0])),
        (15, FarCap),
        (16, side(0.15, [0.0, 0.0, -1.0])),
        (17, side(0.1, [0.5, 0.0, -1.0])),
        (18, side(0.1, [-0.5, 0.0, -1.0])),
        (19, FarCap),
        (20, side(0.15, [0.0, 0.0, 1.0])),
        (21, side(0.1, [0.5, 0.0, 1.0])),
        (22, side(0.1, [-0.5, 0.0, 1.0])),
        (23, FarCap),
    ]
}

/// Geometry of one tube.
struct Tube {
    start: Vector3<f64>,
    axis: Vector3<f64>,
    length: f64,
    u: Vector3<f64>,
    w: Vector3<f64>,
    radius: (f64, f64),
    /// Index of the first vertex of this tube.
    offset: usize,
}

impl Tube {
    fn new(start: Vector3<f64>, end: Vector3<f64>, radius: (f64, f64), offset: usize) -> Self {
        let length = (end - start).norm();
        let axis = (end - start) / length;
        let up = Vector3::new(0.0, -1.0, 0.0);
        let reference = if axis.dot(&up).abs() > 0.9 {
            Vector3::x()
        } else {
            up
        };
        let u = (reference - reference.dot(&axis) * axis).normalize();
        let w = axis.cross(&u);
        Tube {
            start,
            axis,
            length,
            u,
            w,
            radius,
            offset,
        }
    }

    fn radius_at(&self, s: f64) -> f64 {
        self.radius.0 + (self.radius.1 - self.radius.0) * s
    }

    fn ring_dir(&self, angle: f64) -> Vector3<f64> {
        angle.cos() * self.u + angle.sin() * self.w
    }
}

/// Builds a deterministic toy quadruped with the same schema as a real SMAL file.
pub fn make_toy_template(config: &ToyConfig) -> Result<ModelTemplate> {
    if config.n_joints < 2 {
        return Err(Error::InvalidArgument(format!(
            "n_joints must be at least 2, got {}",
            config.n_joints
        )));
    }
    if config.ring_sides < 3 || config.rings_per_bone < 2 {
        return Err(Error::InvalidArgument(format!(
            "tubes need at least 3 sides and 2 rings, got {} and {}",
            config.ring_sides, config.rings_per_bone
        )));
    }
    if config.n_kp == 0 || config.n_kp > N_KEYPOINTS {
        return Err(Error::InvalidArgument(format!(
            "n_kp must be in 1..={N_KEYPOINTS}, got {}",
            config.n_kp
        )));
    }
    if !(config.keypoint_inset >= 0.0 && config.keypoint_inset < 0.01) {
        return Err(Error::InvalidArgument(format!(
            "keypoint_inset must be in [0, 0.01), got {}",
            config.keypoint_inset
        )));
    }

    let joints = skeleton(config.n_joints);
    let n_joints = joints.len();
    let sides = config.ring_sides;
    let rings = config.rings_per_bone;
    let per_tube = sides * rings + 2;
    let n_verts = per_tube * n_joints;

    let first_child: Vec<Option<usize>> = (0..n_joints)
        .map(|j| (j + 1..n_joints).find(|&c| joints[c].parent == Some(j)))
        .collect();
    let pos = |j: usize| Vector3::from(joints[j].pos);

    let tubes: Vec<Tube> = (0..n_joints)
        .map(|j| {
            let start = pos(j);
            let end = match first_child[j] {
                Some(c) => pos(c),
                None => {
                    let from = joints[j].parent.map_or(Vector3::zeros(), pos);
                    start + joints[j].leaf_len * (start - from).normalize()
                }
            };
            Tube::new(start, end, joints[j].radius, j * per_tube)
        })
        .collect();

    let mut rest_vertices = Vec::with_capacity(n_verts);
    let mut along = Vec::with_capacity(n_verts);
    for tube in &tubes {
        for k in 0..rings {
            let s = k as f64 / (rings - 1) as f64;
            let center = tube.start + s * tube.length * tube.axis;
            for m in 0..sides {
                let angle = std::f64::consts::TAU * m as f64 / sides as f64;
                rest_vertices.push(center + tube.radius_at(s) * tube.ring_dir(angle));
                along.push(s);
            }
        }
        rest_vertices.push(tube.start);
        along.push(0.0);
        rest_vertices.push(tube.start + tube.length * tube.axis);
        along.push(1.0);
    }

    let mut faces = Vec::with_capacity(n_joints * (2 * sides * (rings - 1) + 2 * sides));
    for tube in &tubes {
        let ring = |k: usize, m: usize| (tube.offset + k * sides + m % sides) as u32;
        for k in 0..rings - 1 {
            for m in 0..sides {
                faces.push([ring(k, m), ring(k + 1, m), ring(k + 1, m + 1)]);
                faces.push([ring(k, m), ring(k + 1, m + 1), ring(k, m + 1)]);
            }
        }
        let c0 = (tube.offset + rings * sides) as u32;
        let c1 = c0 + 1;
        for m in 0..sides {
            faces.push([c0, ring(0, m + 1), ring(0, m)]);
            faces.push([c1, ring(rings - 1, m), ring(rings - 1, m + 1)]);
        }
    }

    // Blend toward the parent near the start and toward the first child near the end.
    const BLEND: f64 = 0.35;
    let mut skin_weights = vec![0.0; n_verts * n_joints];
    for j in 0..n_joints {
        for local in 0..per_tube {
            let v = j * per_tube + local;
            let s = along[v];
            let w_parent = joints[j]
                .parent
                .map_or(0.0, |_| 0.5 * (1.0 - s / BLEND).max(0.0));
            let w_child = first_child[j].map_or(0.0, |_| 0.5 * (1.0 - (1.0 - s) / BLEND).max(0.0));
            let row = &mut skin_weights[v * n_joints..(v + 1) * n_joints];
            if let Some(p) = joints[j].parent {
                row[p] += w_parent;
            }
            if let Some(c) = first_child[j] {
                row[c] += w_child;
            }
            row[j] += 1.0 - w_parent - w_child;
        }
    }

    // Each joint regresses from its tube's start cap center and first ring.
    let mut joint_regressor = vec![0.0; n_joints * n_verts];
    for (j, tube) in tubes.iter().enumerate() {
        let row = &mut joint_regressor[j * n_verts..(j + 1) * n_verts];
        row[tube.offset + rings * sides] = 0.5;
        for m in 0..sides {
            row[tube.offset + m] = 0.5 / sides as f64;
        }
    }

    let keypoint_regressor = keypoint_rows(config, &joints, &tubes, n_verts);
    let shape_basis = shape_basis(config, &joints, &tubes, &rest_vertices, per_tube);

    ModelTemplate::new(TemplateParts {
        rest_vertices,
        faces,
        shape_basis,
        n_beta: config.n_beta,
        skin_weights,
        joint_regressor,
        keypoint_regressor,
        n_kp: config.n_kp,
        parent: joints.iter().map(|j| j.parent).collect(),
        family_names: FAMILY_NAMES.iter().map(|s| s.to_string()).collect(),
        joint_names: Some(joints.iter().map(|j| j.name.to_string()).collect()),
        keypoint_names: Some(
            KEYPOINT_NAMES[..config.n_kp]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        ),
        pose_correctives: None,
    })
}

fn keypoint_rows(
    config: &ToyConfig,
    joints: &[JointDef],
    tubes: &[Tube],
    n_verts: usize,
) -> Vec<f64> {
    let sides = config.ring_sides;
    let rings = config.rings_per_bone;
    let inset = config.keypoint_inset;
    let mut out = vec![0.0; config.n_kp * n_verts];
    for (kp, (joint, placement)) in keypoint_defs().into_iter().enumerate().take(config.n_kp) {
        // Fall back to the closest existing ancestor on truncated skeletons.
        let mut j = joint;
        while j >= joints.len() {
            j = canonical_skeleton()[j].parent.unwrap_or(0);
        }
        let tube = &tubes[j];
        let row = &mut out[kp * n_verts..(kp + 1) * n_verts];
        match placement {
            Placement::FarCap => {
                let t = (inset / tube.length).min(0.5);
                row[tube.offset + rings * sides + 1] = 1.0 - t;
                row[tube.offset + rings * sides] = t;
            }
            Placement::Side { s, dir } => {
                let k = ((s * (rings - 1) as f64).round() as usize).min(rings - 2);
                let dir = Vector3::from(dir);
                let half = std::f64::consts::PI / sides as f64;
                let m = (0..sides)
                    .max_by(|&a, &b| {
                        let da = tube.ring_dir(2.0 * half * a as f64 + half).dot(&dir);
                        let db = tube.ring_dir(2.0 * half * b as f64 + half).dot(&dir);
                        da.total_cmp(&db)
                    })
                    .unwrap_or(0);
                let opposite = m + sides / 2;
                let s_mid = (k as f64 + 0.5) / (rings - 1) as f64;
                let diameter = 2.0 * tube.radius_at(s_mid) * half.cos();
                let t = (inset / diameter).min(0.5);
                for (mm, weight) in [(m, 1.0 - t), (opposite, t)] {
                    for kk in [k, k + 1] {
                        for step in [0, 1] {
                            row[tube.offset + kk * sides + (mm + step) % sides] += weight / 4.0;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-tube deformation rates of one blendshape, per unit of beta.
#[derive(Clone, Copy, Default)]
struct Rates {
    axial: f64,
    radial: f64,
}

fn shape_basis(
    config: &ToyConfig,
    joints: &[JointDef],
    tubes: &[Tube],
    rest: &[Vector3<f64>],
    per_tube: usize,
) -> Vec<f64> {
    let n_joints = joints.len();
    let n_beta = config.n_beta;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut basis = vec![0.0; rest.len() * 3 * n_beta];

    let group_rates = |group: Option<Group>, axial: f64, radial: f64| -> Vec<Rates> {
        joints
            .iter()
            .map(|j| {
                if group.is_none_or(|g| g == j.group) {
                    Rates { axial, radial }
                } else {
                    Rates::default()
                }
            })
            .collect()
    };

    for b in 0..n_beta {
        let rates: Vec<Rates> = match b {
            0 => group_rates(None, 0.05, 0.05),
            1 => group_rates(Some(Group::Leg), 0.08, 0.0),
            2 => group_rates(Some(Group::Spine), 0.06, 0.0),
            3 => {
                let mut r = group_rates(Some(Group::Spine), 0.0, 0.08);
                for (rr, j) in r.iter_mut().zip(joints) {
                    if j.group == Group::Neck {
                        rr.radial = 0.08;
                    }
                }
                r
            }
            4 => group_rates(Some(Group::Neck), 0.1, 0.0),
            5 => group_rates(Some(Group::Tail), 0.1, 0.0),
            6 => group_rates(Some(Group::Head), 0.08, 0.08),
            7 => group_rates(Some(Group::Leg), 0.0, 0.1),
            _ => {
                let sigma = 0.03 / (1.0 + 0.1 * (b - 8) as f64);
                let normal = Normal::new(0.0, sigma).expect("positive sigma");
                let mut r: Vec<Rates> = (0..n_joints)
                    .map(|_| Rates {
                        axial: normal.sample(&mut rng),
                        radial: normal.sample(&mut rng),
                    })
                    .collect();
                for j in 0..n_joints {
                    if let Some(m) = mirror_of(j) {
                        if m < j && m < n_joints {
                            r[j] = r[m];
                        }
                    }
                }
                r
            }
        };

        // Propagate joint displacements root-to-leaf, then displace each tube.
        let mut joint_disp = vec![Vector3::zeros(); n_joints];
        let field = |j: usize, x: &Vector3<f64>, base: &Vector3<f64>| -> Vector3<f64> {
            let tube = &tubes[j];
            let rel = x - tube.start;
            let axial = rel.dot(&tube.axis) * tube.axis;
            base + rates[j].axial * axial + rates[j].radial * (rel - axial)
        };
        for j in 1..n_joints {
            let p = joints[j].parent.expect("non-root joint has a parent");
            joint_disp[j] = field(p, &tubes[j].start, &joint_disp[p]);
        }
        for j in 0..n_joints {
            for local in 0..per_tube {
                let v = j * per_tube + local;
                let d = field(j, &rest[v], &joint_disp[j]);
                for c in 0..3 {
                    basis[(v * 3 + c) * n_beta + b] = d[c];
                }
            }
        }
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matches_real_dimensions_where_fixed() {
        let t = make_toy_template(&ToyConfig::default()).unwrap();
        assert_eq!(t.n_joints(), 35);
        assert_eq!(t.n_beta(), 41);
        assert_eq!(t.n_keypoints(), 26);
        assert_eq!(t.family_names().len(), 5);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_toy_template(&ToyConfig::default()).unwrap();
        let b = make_toy_template(&ToyConfig::default()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = make_toy_template(&ToyConfig {
            seed: 9,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.to_json(), c.to_json());
    }

    #[test]
    fn rest_joints_sit_on_skeleton() {
        let t = make_toy_template(&ToyConfig::default()).unwrap();
        for (got, def) in t.rest_joints().iter().zip(canonical_skeleton()) {
            assert!((got - Vector3::from(def.pos)).amax() < 1e-12);
        }
    }

    #[test]
    fn small_and_large_skeletons() {
        for n in [2, 3, 9, 34, 40] {
            let t = make_toy_template(&ToyConfig {
                n_joints: n,
                ..Default::default()
            })
            .unwrap();
            assert_eq!(t.n_joints(), n);
            assert!(t.n_vertices() >= n);
        }
    }

    #[test]
    fn degenerate_counts_rejected() {
        for cfg in [
            ToyConfig {
                n_joints: 1,
                ..Default::default()
            },
            ToyConfig {
                ring_sides: 2,
                ..Default::default()
            },
            ToyConfig {
                n_kp: 27,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                make_toy_template(&cfg),
                Err(Error::InvalidArgument(_))
            ));
        }
    }

    #[test]
    fn keypoints_lie_inside_the_body_near_the_surface() {
        let t = make_toy_template(&ToyConfig::default()).unwrap();
        let kp = t.regress_keypoints(t.rest_vertices()).unwrap();
        let nose = kp[KP_NOSE];
        assert!(nose.x > 1.35 && nose.x < 1.4, "{nose:?}");
        // Left-side keypoints sit on the -z side.
        assert!(kp[10].z < -0.15);
        assert!(kp[14].z > 0.15);
    }
}
