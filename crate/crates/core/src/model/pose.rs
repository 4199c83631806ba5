//! Shape blendshapes, forward kinematics and linear blend skinning.
//!
//! Every joint `k` carries a skinning transform `A_k = (R_k, t_k)` that maps a
//! shaped rest point to its posed location. The root rotates about its own
//! rest location and children compose as `A_k = A_parent * [r_k | J_k - r_k J_k]`,
//! so a rest pose yields exactly zero displacement. The global translation
//! `gamma` is added after skinning.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::rotation::{rodrigues_jacobian, rodrigues_unchecked};
use super::template::ModelTemplate;
use crate::error::{check_dim, Error, Result};

/// Shape, per-joint axis-angle pose (row 0 is the global orientation) and translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub beta: Vec<f64>,
    pub theta: Vec<Vector3<f64>>,
    pub gamma: Vector3<f64>,
}

impl Params {
    pub fn zeros(template: &ModelTemplate) -> Self {
        Params {
            beta: vec![0.0; template.n_beta()],
            theta: vec![Vector3::zeros(); template.n_joints()],
            gamma: Vector3::zeros(),
        }
    }

    pub fn check(&self, template: &ModelTemplate) -> Result<()> {
        check_dim("beta", template.n_beta(), self.beta.len())?;
        check_dim("theta", template.n_joints(), self.theta.len())?;
        let finite = self.beta.iter().all(|b| b.is_finite())
            && self.theta.iter().all(|t| t.iter().all(|c| c.is_finite()))
            && self.gamma.iter().all(|c| c.is_finite());
        if !finite {
            return Err(Error::NonFinite("params".into()));
        }
        Ok(())
    }

    pub fn theta_flat(&self) -> Vec<f64> {
        self.theta.iter().flat_map(|t| [t.x, t.y, t.z]).collect()
    }

    pub fn theta_from_flat(flat: &[f64]) -> Result<Vec<Vector3<f64>>> {
        if flat.len() % 3 != 0 {
            return Err(Error::InvalidArgument(format!(
                "flat theta has {} entries, not a multiple of 3",
                flat.len()
            )));
        }
        Ok(flat
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosedMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub joints: Vec<Vector3<f64>>,
    pub keypoints3d: Vec<Vector3<f64>>,
}

/// Gradient of a scalar with respect to [`Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamsGrad {
    pub beta: Vec<f64>,
    pub theta: Vec<Vector3<f64>>,
    pub gamma: Vector3<f64>,
}

impl ParamsGrad {
    pub fn zeros(template: &ModelTemplate) -> Self {
        ParamsGrad {
            beta: vec![0.0; template.n_beta()],
            theta: vec![Vector3::zeros(); template.n_joints()],
            gamma: Vector3::zeros(),
        }
    }
}

/// Intermediate values of a forward pass, reused by [`PoseCache::backward`].
#[derive(Debug, Clone)]
pub struct PoseCache {
    shaped: Vec<Vector3<f64>>,
    rest_joints: Vec<Vector3<f64>>,
    local: Vec<Matrix3<f64>>,
    global: Vec<Matrix3<f64>>,
    theta: Vec<Vector3<f64>>,
    pub mesh: PosedMesh,
}

pub fn pose_mesh(template: &ModelTemplate, params: &Params) -> Result<PosedMesh> {
    Ok(pose_mesh_cached(template, params)?.mesh)
}

/// Forward pass that keeps what the backward pass needs.
pub fn pose_mesh_cached(template: &ModelTemplate, params: &Params) -> Result<PoseCache> {
    params.check(template)?;
    let shaped = template.shaped_vertices(&params.beta)?;
    Ok(pose_from_shaped(template, shaped, params))
}

/// Forward pass from precomputed shaped vertices (`params.beta` is ignored).
pub(crate) fn pose_from_shaped(
    template: &ModelTemplate,
    shaped: Vec<Vector3<f64>>,
    params: &Params,
) -> PoseCache {
    let n_joints = template.n_joints();
    let rest_joints = template.joint_sparse.apply(&shaped);
    let local: Vec<Matrix3<f64>> = params.theta.iter().map(rodrigues_unchecked).collect();

    let mut global = Vec::with_capacity(n_joints);
    let mut trans: Vec<Vector3<f64>> = Vec::with_capacity(n_joints);
    for k in 0..n_joints {
        let pivot = rest_joints[k] - local[k] * rest_joints[k];
        match template.parent[k] {
            None => {
                global.push(local[k]);
                trans.push(pivot);
            }
            Some(p) => {
                global.push(global[p] * local[k]);
                trans.push(global[p] * pivot + trans[p]);
            }
        }
    }

    // Displacement form keeps the rest pose exact: (R - I) v + t is zero there.
    let deltas: Vec<Matrix3<f64>> = global.iter().map(|g| g - Matrix3::identity()).collect();
    let vertices: Vec<Vector3<f64>> = shaped
        .iter()
        .zip(&template.skin_sparse.rows)
        .map(|(v, row)| {
            let offset = row.iter().fold(Vector3::zeros(), |acc, (k, w)| {
                acc + *w * (deltas[*k] * v + trans[*k])
            });
            v + offset + params.gamma
        })
        .collect();

    let joints = template.joint_sparse.apply(&vertices);
    let keypoints3d = template.keypoint_sparse.apply(&vertices);
    PoseCache {
        shaped,
        rest_joints,
        local,
        global,
        theta: params.theta.clone(),
        mesh: PosedMesh {
            vertices,
            joints,
            keypoints3d,
        },
    }
}

/// Cotangents on the posed outputs; any may be omitted.
#[derive(Debug, Default)]
pub struct MeshCotangent<'a> {
    pub vertices: Option<&'a [Vector3<f64>]>,
    pub joints: Option<&'a [Vector3<f64>]>,
    pub keypoints3d: Option<&'a [Vector3<f64>]>,
}

impl PoseCache {
    pub fn mesh(&self) -> &PosedMesh {
        &self.mesh
    }

    pub fn shaped_vertices(&self) -> &[Vector3<f64>] {
        &self.shaped
    }

    /// Vector-Jacobian product of the forward pass.
    ///
    /// When `with_beta` is false the shape gradient is left at zero and the
    /// joint-regression path is skipped, which is all that pose-only
    /// optimization needs.
    pub fn backward(
        &self,
        template: &ModelTemplate,
        cotangent: &MeshCotangent<'_>,
        with_beta: bool,
    ) -> ParamsGrad {
        let n_v = template.n_vertices();
        let n_j = template.n_joints();
        let mut grad = ParamsGrad::zeros(template);

        let mut g_vert = match cotangent.vertices {
            Some(g) => g.to_vec(),
            None => vec![Vector3::zeros(); n_v],
        };
        if let Some(g) = cotangent.joints {
            template.joint_sparse.apply_transpose_add(g, &mut g_vert);
        }
        if let Some(g) = cotangent.keypoints3d {
            template.keypoint_sparse.apply_transpose_add(g, &mut g_vert);
        }

        let mut d_global = vec![Matrix3::zeros(); n_j];
        let mut d_trans = vec![Vector3::zeros(); n_j];
        let mut g_shaped = if with_beta {
            vec![Vector3::zeros(); n_v]
        } else {
            Vec::new()
        };

        for (i, (g, row)) in g_vert.iter().zip(&template.skin_sparse.rows).enumerate() {
            if g.iter().all(|c| *c == 0.0) {
                continue;
            }
            grad.gamma += g;
            let v = &self.shaped[i];
            let mut blended = Matrix3::zeros();
            for (k, w) in row {
                d_global[*k] += *w * g * v.transpose();
                d_trans[*k] += *w * g;
                blended += *w * (self.global[*k] - Matrix3::identity());
            }
            if with_beta {
                g_shaped[i] += g + blended.transpose() * g;
            }
        }

        let mut d_local = vec![Matrix3::zeros(); n_j];
        let mut d_joint = vec![Vector3::zeros(); n_j];
        for k in (0..n_j).rev() {
            let r = &self.local[k];
            let jk = &self.rest_joints[k];
            // Rotation and translation of the frame this joint's pivot lives in.
            let (frame_rot, d_pivot) = match template.parent[k] {
                None => (Matrix3::identity(), d_trans[k]),
                Some(p) => {
                    let gp = self.global[p];
                    let pivot = jk - r * jk;
                    let dgk = d_global[k];
                    let dtk = d_trans[k];
                    d_global[p] += dgk * r.transpose() + dtk * pivot.transpose();
                    d_trans[p] += dtk;
                    (gp, gp.transpose() * dtk)
                }
            };
            d_local[k] += frame_rot.transpose() * d_global[k];
            d_local[k] -= d_pivot * jk.transpose();
            d_joint[k] += d_pivot - r.transpose() * d_pivot;
        }

        for k in 0..n_j {
            let jac = rodrigues_jacobian(&self.theta[k]);
            for (i, d) in jac.iter().enumerate() {
                grad.theta[k][i] = d_local[k].component_mul(d).sum();
            }
        }

        if with_beta {
            template
                .joint_sparse
                .apply_transpose_add(&d_joint, &mut g_shaped);
            template.shape_basis_transpose(&g_shaped, &mut grad.beta);
        }
        grad
    }
}
