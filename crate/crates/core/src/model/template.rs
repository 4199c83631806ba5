//! The immutable model template and its JSON file format.

use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, read_json, write_json, Error, Result};

pub const TEMPLATE_VERSION: u32 = 1;

/// Tolerance on the unit row-sum of skinning weights and regressors.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Real SMAL dimensions.
pub const SMAL_N_BETA: usize = 41;
pub const SMAL_N_JOINTS: usize = 35;
pub const SMAL_V_COUNT: usize = 3889;
pub const SMAL_F_COUNT: usize = 7774;
pub const N_KEYPOINTS: usize = 26;

/// Row-major sparse matrix, used for the skinning weights and both regressors.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SparseRows {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    fn from_dense(dense: &[f64], n_rows: usize, n_cols: usize) -> Self {
        let rows = (0..n_rows)
            .map(|r| {
                dense[r * n_cols..(r + 1) * n_cols]
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w != 0.0)
                    .map(|(c, w)| (c, *w))
                    .collect()
            })
            .collect();
        SparseRows { rows }
    }

    /// `out[r] = sum_c m[r, c] * points[c]`
    pub fn apply(&self, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        self.rows
            .iter()
            .map(|row| {
                row.iter()
                    .fold(Vector3::zeros(), |acc, (c, w)| acc + *w * points[*c])
            })
            .collect()
    }

    /// `out[c] += sum_r m[r, c] * cotangent[r]`
    pub fn apply_transpose_add(&self, cotangent: &[Vector3<f64>], out: &mut [Vector3<f64>]) {
        for (row, g) in self.rows.iter().zip(cotangent) {
            for (c, w) in row {
                out[*c] += *w * g;
            }
        }
    }
}

/// Rest mesh, shape blendshapes, skinning weights, regressors and kinematic tree.
///
/// Dense matrices are stored row-major exactly as in the template file; sparse
/// copies used by posing are derived on construction.
#[derive(Debug, Clone)]
pub struct ModelTemplate {
    pub(crate) rest_vertices: Vec<Vector3<f64>>,
    pub(crate) faces: Vec<[u32; 3]>,
    /// `V x 3 x n_beta`, index `(v * 3 + c) * n_beta + b`.
    pub(crate) shape_basis: Vec<f64>,
    /// `V x n_joints`.
    pub(crate) skin_weights: Vec<f64>,
    /// `n_joints x V`.
    pub(crate) joint_regressor: Vec<f64>,
    /// `n_kp x V`.
    pub(crate) keypoint_regressor: Vec<f64>,
    pub(crate) parent: Vec<Option<usize>>,
    pub(crate) rest_joints: Vec<Vector3<f64>>,
    pub(crate) family_names: Vec<String>,
    pub(crate) joint_names: Option<Vec<String>>,
    pub(crate) keypoint_names: Option<Vec<String>>,
    /// Reserved for pose-corrective blendshapes; never applied.
    pub(crate) pose_correctives: Option<Vec<f64>>,
    pub(crate) n_beta: usize,

    pub(crate) skin_sparse: SparseRows,
    pub(crate) joint_sparse: SparseRows,
    pub(crate) keypoint_sparse: SparseRows,
}

impl PartialEq for ModelTemplate {
    fn eq(&self, other: &Self) -> bool {
        self.rest_vertices == other.rest_vertices
            && self.faces == other.faces
            && self.shape_basis == other.shape_basis
            && self.skin_weights == other.skin_weights
            && self.joint_regressor == other.joint_regressor
            && self.keypoint_regressor == other.keypoint_regressor
            && self.parent == other.parent
            && self.family_names == other.family_names
            && self.joint_names == other.joint_names
            && self.keypoint_names == other.keypoint_names
            && self.pose_correctives == other.pose_correctives
            && self.n_beta == other.n_beta
    }
}

/// Raw template parts; [`ModelTemplate::new`] validates them.
#[derive(Debug, Clone, Default)]
pub struct TemplateParts {
    pub rest_vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
    pub shape_basis: Vec<f64>,
    pub n_beta: usize,
    pub skin_weights: Vec<f64>,
    pub joint_regressor: Vec<f64>,
    pub keypoint_regressor: Vec<f64>,
    pub n_kp: usize,
    pub parent: Vec<Option<usize>>,
    pub family_names: Vec<String>,
    pub joint_names: Option<Vec<String>>,
    pub keypoint_names: Option<Vec<String>>,
    pub pose_correctives: Option<Vec<f64>>,
}

impl ModelTemplate {
    pub fn new(parts: TemplateParts) -> Result<Self> {
        let v = parts.rest_vertices.len();
        let j = parts.parent.len();
        let n_kp = parts.n_kp;
        if j == 0 {
            return Err(Error::Validation("template has no joints".into()));
        }
        if v == 0 {
            return Err(Error::Validation("template has no vertices".into()));
        }
        check_dim("shape_basis", v * 3 * parts.n_beta, parts.shape_basis.len())?;
        check_dim("skin_weights", v * j, parts.skin_weights.len())?;
        check_dim("joint_regressor", j * v, parts.joint_regressor.len())?;
        check_dim(
            "keypoint_regressor",
            n_kp * v,
            parts.keypoint_regressor.len(),
        )?;
        if let Some(names) = &parts.joint_names {
            check_dim("joint_names", j, names.len())?;
        }
        if let Some(names) = &parts.keypoint_names {
            check_dim("keypoint_names", n_kp, names.len())?;
        }

        let all_finite = parts
            .rest_vertices
            .iter()
            .all(|p| p.iter().all(|c| c.is_finite()))
            && parts.shape_basis.iter().all(|c| c.is_finite())
            && parts.skin_weights.iter().all(|c| c.is_finite())
            && parts.joint_regressor.iter().all(|c| c.is_finite())
            && parts.keypoint_regressor.iter().all(|c| c.is_finite());
        if !all_finite {
            return Err(Error::Validation(
                "template contains non-finite numbers".into(),
            ));
        }

        for (i, face) in parts.faces.iter().enumerate() {
            if face.iter().any(|&idx| idx as usize >= v) {
                return Err(Error::Validation(format!(
                    "face {i} references a vertex outside 0..{v}"
                )));
            }
        }

        for r in 0..v {
            let row = &parts.skin_weights[r * j..(r + 1) * j];
            if row.iter().any(|w| *w < 0.0) {
                return Err(Error::Validation(format!(
                    "skin_weights row {r} has a negative weight"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Validation(format!(
                    "skin_weights row {r} sums to {sum}, expected 1"
                )));
            }
        }
        check_row_sums("joint_regressor", &parts.joint_regressor, j, v)?;
        check_row_sums("keypoint_regressor", &parts.keypoint_regressor, n_kp, v)?;
        validate_tree(&parts.parent)?;

        let joint_sparse = SparseRows::from_dense(&parts.joint_regressor, j, v);
        let rest_joints = joint_sparse.apply(&parts.rest_vertices);
        Ok(ModelTemplate {
            skin_sparse: SparseRows::from_dense(&parts.skin_weights, v, j),
            keypoint_sparse: SparseRows::from_dense(&parts.keypoint_regressor, n_kp, v),
            joint_sparse,
            rest_joints,
            rest_vertices: parts.rest_vertices,
            faces: parts.faces,
            shape_basis: parts.shape_basis,
            skin_weights: parts.skin_weights,
            joint_regressor: parts.joint_regressor,
            keypoint_regressor: parts.keypoint_regressor,
            parent: parts.parent,
            family_names: parts.family_names,
            joint_names: parts.joint_names,
            keypoint_names: parts.keypoint_names,
            pose_correctives: parts.pose_correctives,
            n_beta: parts.n_beta,
        })
    }

    pub fn n_beta(&self) -> usize {
        self.n_beta
    }
    pub fn n_joints(&self) -> usize {
        self.parent.len()
    }
    pub fn n_vertices(&self) -> usize {
        self.rest_vertices.len()
    }
    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }
    pub fn n_keypoints(&self) -> usize {
        self.keypoint_sparse.rows.len()
    }
    pub fn rest_vertices(&self) -> &[Vector3<f64>] {
        &self.rest_vertices
    }
    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }
    pub fn parent(&self) -> &[Option<usize>] {
        &self.parent
    }
    pub fn rest_joints(&self) -> &[Vector3<f64>] {
        &self.rest_joints
    }
    pub fn family_names(&self) -> &[String] {
        &self.family_names
    }
    pub fn joint_names(&self) -> Option<&[String]> {
        self.joint_names.as_deref()
    }
    pub fn keypoint_names(&self) -> Option<&[String]> {
        self.keypoint_names.as_deref()
    }
    pub fn skin_weight(&self, vertex: usize, joint: usize) -> f64 {
        self.skin_weights[vertex * self.n_joints() + joint]
    }

    /// Index of a keypoint by name, if the template carries keypoint names.
    pub fn keypoint_index(&self, name: &str) -> Option<usize> {
        self.keypoint_names.as_ref()?.iter().position(|n| n == name)
    }

    /// `J = W * V` for an arbitrary vertex set with the template's topology.
    pub fn regress_joints(&self, vertices: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
        check_dim("vertices", self.n_vertices(), vertices.len())?;
        Ok(self.joint_sparse.apply(vertices))
    }

    pub fn regress_keypoints(&self, vertices: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
        check_dim("vertices", self.n_vertices(), vertices.len())?;
        Ok(self.keypoint_sparse.apply(vertices))
    }

    /// Rest vertices displaced by the shape blendshapes.
    pub fn shaped_vertices(&self, beta: &[f64]) -> Result<Vec<Vector3<f64>>> {
        check_dim("beta", self.n_beta, beta.len())?;
        let nb = self.n_beta;
        Ok(self
            .rest_vertices
            .iter()
            .enumerate()
            .map(|(v, rest)| {
                let mut p = *rest;
                if nb > 0 {
                    for c in 0..3 {
                        let base = (v * 3 + c) * nb;
                        let basis = &self.shape_basis[base..base + nb];
                        p[c] += basis.iter().zip(beta).map(|(s, b)| s * b).sum::<f64>();
                    }
                }
                p
            })
            .collect())
    }

    /// Accumulates `S^T * cotangent` into `out` (length `n_beta`).
    pub(crate) fn shape_basis_transpose(&self, cotangent: &[Vector3<f64>], out: &mut [f64]) {
        let nb = self.n_beta;
        if nb == 0 {
            return;
        }
        for (v, g) in cotangent.iter().enumerate() {
            for c in 0..3 {
                if g[c] == 0.0 {
                    continue;
                }
                let base = (v * 3 + c) * nb;
                for (o, s) in out.iter_mut().zip(&self.shape_basis[base..base + nb]) {
                    *o += s * g[c];
                }
            }
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: TemplateFile = read_json(path.as_ref())?;
        file.into_template()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), &TemplateFile::from_template(self))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&TemplateFile::from_template(self)).expect("template serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TemplateFile = crate::error::from_json_str(text)?;
        file.into_template()
    }
}

fn check_row_sums(what: &str, m: &[f64], rows: usize, cols: usize) -> Result<()> {
    for r in 0..rows {
        let sum: f64 = m[r * cols..(r + 1) * cols].iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Validation(format!(
                "{what} row {r} sums to {sum}, expected 1"
            )));
        }
    }
    Ok(())
}

fn validate_tree(parent: &[Option<usize>]) -> Result<()> {
    let n = parent.len();
    if parent[0].is_some() {
        return Err(Error::Validation("joint 0 must be the root".into()));
    }
    for (j, p) in parent.iter().enumerate().skip(1) {
        match p {
            None => return Err(Error::Validation(format!("joint {j} has no parent"))),
            Some(p) if *p >= n => {
                return Err(Error::Validation(format!(
                    "joint {j} has parent {p} out of range"
                )))
            }
            Some(p) if *p >= j => {
                // Kinematics walks joints in index order.
                return Err(Error::Validation(format!(
                    "joint {j} has parent {p}; parents must precede children"
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

/// On-disk template schema. Arrays are flat and row-major; the root's parent is `-1`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    version: u32,
    n_beta: usize,
    n_joints: usize,
    v_count: usize,
    f_count: usize,
    n_kp: usize,
    rest_vertices: Vec<f64>,
    faces: Vec<u32>,
    shape_basis: Vec<f64>,
    skin_weights: Vec<f64>,
    joint_regressor: Vec<f64>,
    keypoint_regressor: Vec<f64>,
    parent: Vec<i64>,
    family_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joint_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    keypoint_names: Option<Vec<String>>,
    #[serde(default)]
    pose_correctives: Option<Vec<f64>>,
}

impl TemplateFile {
    fn from_template(t: &ModelTemplate) -> Self {
        TemplateFile {
            version: TEMPLATE_VERSION,
            n_beta: t.n_beta,
            n_joints: t.n_joints(),
            v_count: t.n_vertices(),
            f_count: t.n_faces(),
            n_kp: t.n_keypoints(),
            rest_vertices: t
                .rest_vertices
                .iter()
                .flat_map(|p| [p.x, p.y, p.z])
                .collect(),
            faces: t.faces.iter().flatten().copied().collect(),
            shape_basis: t.shape_basis.clone(),
            skin_weights: t.skin_weights.clone(),
            joint_regressor: t.joint_regressor.clone(),
            keypoint_regressor: t.keypoint_regressor.clone(),
            parent: t
                .parent
                .iter()
                .map(|p| p.map_or(-1, |p| p as i64))
                .collect(),
            family_names: t.family_names.clone(),
            joint_names: t.joint_names.clone(),
            keypoint_names: t.keypoint_names.clone(),
            pose_correctives: t.pose_correctives.clone(),
        }
    }

    fn into_template(self) -> Result<ModelTemplate> {
        if self.version != TEMPLATE_VERSION {
            return Err(Error::Parse {
                field: "version".into(),
                message: format!("unsupported version {}", self.version),
            });
        }
        let field_len = |field: &str, expected: usize, got: usize| -> Result<()> {
            if expected != got {
                return Err(Error::Parse {
                    field: field.into(),
                    message: format!("expected {expected} values, found {got}"),
                });
            }
            Ok(())
        };
        field_len("rest_vertices", self.v_count * 3, self.rest_vertices.len())?;
        field_len("faces", self.f_count * 3, self.faces.len())?;
        field_len(
            "shape_basis",
            self.v_count * 3 * self.n_beta,
            self.shape_basis.len(),
        )?;
        field_len(
            "skin_weights",
            self.v_count * self.n_joints,
            self.skin_weights.len(),
        )?;
        field_len(
            "joint_regressor",
            self.n_joints * self.v_count,
            self.joint_regressor.len(),
        )?;
        field_len(
            "keypoint_regressor",
            self.n_kp * self.v_count,
            self.keypoint_regressor.len(),
        )?;
        field_len("parent", self.n_joints, self.parent.len())?;

        let mut parent = Vec::with_capacity(self.n_joints);
        for (j, p) in self.parent.iter().enumerate() {
            parent.push(match *p {
                -1 => None,
                p if p >= 0 => Some(p as usize),
                p => {
                    return Err(Error::Parse {
                        field: format!("parent[{j}]"),
                        message: format!("invalid parent index {p}"),
                    })
                }
            });
        }
        ModelTemplate::new(TemplateParts {
            rest_vertices: self
                .rest_vertices
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect(),
            faces: self
                .faces
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect(),
            shape_basis: self.shape_basis,
            n_beta: self.n_beta,
            skin_weights: self.skin_weights,
            joint_regressor: self.joint_regressor,
            keypoint_regressor: self.keypoint_regressor,
            n_kp: self.n_kp,
            parent,
            family_names: self.family_names,
            joint_names: self.joint_names,
            keypoint_names: self.keypoint_names,
            pose_correctives: self.pose_correctives,
        })
    }
}

/// Writes `v` and `f` records only; face indices are 1-based.
pub fn write_obj(
    path: impl AsRef<Path>,
    vertices: &[Vector3<f64>],
    faces: &[[u32; 3]],
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        for v in vertices {
            writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for f in faces {
            writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}
