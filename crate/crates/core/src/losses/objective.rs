//! The differentiable part of the total loss, composed through the posed model.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{
    loss_total, FitVariables, KeypointObservation, LossComponents, LossReport, LossWeights,
    PixelNormalization, PriorDistribution,
};
use crate::camera::Camera;
use crate::error::{check_dim, Error, Result};
use crate::model::{pose_mesh_cached, MeshCotangent, ModelTemplate, Params};

/// 2D keypoint L1 loss and, optionally, its gradient with respect to the
/// world-space keypoints (which equals the gradient with respect to `T`
/// summed over keypoints).
pub fn loss_2d_with_grad(
    pred_kp3d: &[Vector3<f64>],
    camera: &Camera,
    observed: &KeypointObservation,
    normalization: PixelNormalization,
    want_grad: bool,
) -> Result<(f64, Option<Vec<Vector3<f64>>>)> {
    camera.validate()?;
    check_dim("keypoints2d", pred_kp3d.len(), observed.points.len())?;
    check_dim("visibility", pred_kp3d.len(), observed.visible.len())?;
    if observed.n_visible() == 0 {
        return Err(Error::EmptyObservation);
    }
    let scale = normalization.scale(camera);
    let mut value = 0.0;
    let mut grad = want_grad.then(|| vec![Vector3::zeros(); pred_kp3d.len()]);
    for (k, x) in pred_kp3d.iter().enumerate() {
        if !observed.visible[k] {
            continue;
        }
        let p = camera.to_camera(x);
        let proj = camera.project_camera_space(&p);
        if !proj.in_front {
            return Err(Error::NonFinite(format!(
                "keypoint {k} is behind the camera"
            )));
        }
        let r = proj.pixel - observed.points[k];
        value += scale * (r.x.abs() + r.y.abs());
        if let Some(g) = grad.as_mut() {
            let jac = camera.projection_jacobian(&p);
            let s = [sign(r.x) * scale, sign(r.y) * scale];
            g[k] = Vector3::new(
                s[0] * jac[0][0] + s[1] * jac[1][0],
                s[0] * jac[0][1] + s[1] * jac[1][1],
                s[0] * jac[0][2] + s[1] * jac[1][2],
            );
        }
    }
    Ok((value, grad))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Parameter groups an optimizer may move; frozen groups get zero gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreeGroups {
    pub beta: bool,
    /// Root joint rotation (global orientation).
    pub root_orientation: bool,
    /// All non-root joint rotations.
    pub body_pose: bool,
    pub gamma: bool,
    pub camera_translation: bool,
}

impl Default for FreeGroups {
    fn default() -> Self {
        FreeGroups::all()
    }
}

impl FreeGroups {
    pub fn all() -> Self {
        FreeGroups {
            beta: true,
            root_orientation: true,
            body_pose: true,
            gamma: true,
            camera_translation: true,
        }
    }

    pub fn global_only() -> Self {
        FreeGroups {
            beta: false,
            body_pose: false,
            ..FreeGroups::all()
        }
    }

    /// 1.0 for free coordinates and 0.0 for frozen ones, in flattened order.
    pub fn mask(&self, n_beta: usize, n_joints: usize) -> Vec<f64> {
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        let mut m = vec![on(self.beta); n_beta];
        m.extend([on(self.root_orientation); 3]);
        m.extend(vec![on(self.body_pose); 3 * n_joints.saturating_sub(1)]);
        m.extend([on(self.gamma); 3]);
        m.extend([on(self.camera_translation); 3]);
        m
    }
}

/// Which terms of the total loss take part.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Terms {
    pub l2d: bool,
    pub l3d: bool,
    pub prior: bool,
}

impl Default for Terms {
    fn default() -> Self {
        Terms {
            l2d: true,
            l3d: true,
            prior: true,
        }
    }
}

/// 3D supervision: keypoints and, when available, ground-truth parameters.
#[derive(Debug, Clone, Copy)]
pub struct Target3d<'a> {
    pub keypoints3d: &'a [Vector3<f64>],
    pub params: Option<&'a Params>,
}

/// `lambda_2D L_2D + lambda_3D L_3D + lambda_prior L_prior` as a function of
/// [`FitVariables`]. Terms without data (no 3D target, no prior) are absent.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub template: &'a ModelTemplate,
    /// Intrinsics and image size; the translation comes from the variables.
    pub camera: &'a Camera,
    pub observation: Option<&'a KeypointObservation>,
    pub target3d: Option<Target3d<'a>>,
    pub prior: Option<&'a PriorDistribution>,
    pub weights: LossWeights,
    pub normalization: PixelNormalization,
    pub terms: Terms,
}

impl<'a> Objective<'a> {
    fn camera_at(&self, vars: &FitVariables) -> Camera {
        Camera {
            translation: vars.camera_translation,
            ..self.camera.clone()
        }
    }

    pub fn value(&self, vars: &FitVariables) -> Result<LossReport> {
        Ok(self.evaluate(vars, None)?.0)
    }

    /// Loss report and gradient in flattened [`FitVariables`] order, with
    /// frozen groups zeroed.
    pub fn value_and_grad(
        &self,
        vars: &FitVariables,
        free: &FreeGroups,
    ) -> Result<(LossReport, Vec<f64>)> {
        let (report, grad) = self.evaluate(vars, Some(free))?;
        Ok((report, grad.expect("gradient requested")))
    }

    fn evaluate(
        &self,
        vars: &FitVariables,
        free: Option<&FreeGroups>,
    ) -> Result<(LossReport, Option<Vec<f64>>)> {
        let template = self.template;
        let params = &vars.params;
        let cache = pose_mesh_cached(template, params)?;
        let kp = &cache.mesh.keypoints3d;
        let camera = self.camera_at(vars);
        let want = free.is_some();
        let w = &self.weights;
        let mut components = LossComponents::default();

        let n_kp = template.n_keypoints();
        let mut g_kp = vec![Vector3::zeros(); n_kp];
        let mut g_cam = Vector3::zeros();

        if let (true, Some(obs)) = (self.terms.l2d, self.observation) {
            let (v, g) = loss_2d_with_grad(kp, &camera, obs, self.normalization, want)?;
            components.l2d = Some(v);
            if let Some(g) = g {
                for (acc, gk) in g_kp.iter_mut().zip(&g) {
                    *acc += w.lambda_2d * gk;
                    g_cam += w.lambda_2d * gk;
                }
            }
        }

        let mut g_beta_direct = vec![0.0; template.n_beta()];
        let mut g_theta_direct = vec![Vector3::zeros(); template.n_joints()];
        if let (true, Some(target)) = (self.terms.l3d, self.target3d) {
            check_dim("keypoints3d", n_kp, target.keypoints3d.len())?;
            let mut v = 0.0;
            for (k, (p, g)) in kp.iter().zip(target.keypoints3d).enumerate() {
                let r = p - g;
                v += r.abs().sum();
                g_kp[k] += w.lambda_3d * r.map(sign);
            }
            if let Some(gt) = target.params {
                check_dim("beta", params.beta.len(), gt.beta.len())?;
                check_dim("theta", params.theta.len(), gt.theta.len())?;
                for (i, (a, b)) in params.beta.iter().zip(&gt.beta).enumerate() {
                    v += w.inner_beta_3d * (a - b).powi(2);
                    g_beta_direct[i] += w.lambda_3d * w.inner_beta_3d * 2.0 * (a - b);
                }
                for (k, (a, b)) in params.theta.iter().zip(&gt.theta).enumerate() {
                    v += w.inner_theta_3d * (a - b).norm_squared();
                    g_theta_direct[k] += w.lambda_3d * w.inner_theta_3d * 2.0 * (a - b);
                }
            }
            components.l3d = Some(v);
        }

        if let (true, Some(prior)) = (self.terms.prior, self.prior) {
            let (v, gb, gt) = prior.loss_with_grad(params, w)?;
            components.prior = Some(v);
            for (acc, g) in g_beta_direct.iter_mut().zip(&gb) {
                *acc += w.lambda_prior * g;
            }
            for (k, acc) in g_theta_direct.iter_mut().enumerate() {
                *acc += w.lambda_prior * Vector3::new(gt[3 * k], gt[3 * k + 1], gt[3 * k + 2]);
            }
        }

        let report = loss_total(&components, w)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite("objective".into()));
        }
        let Some(free) = free else {
            return Ok((report, None));
        };

        let mesh_grad = cache.backward(
            template,
            &MeshCotangent {
                keypoints3d: Some(&g_kp),
                ..Default::default()
            },
            free.beta,
        );
        let mut grad = Vec::with_capacity(vars.len());
        grad.extend(
            mesh_grad
                .beta
                .iter()
                .zip(&g_beta_direct)
                .map(|(a, b)| a + b),
        );
        for (a, b) in mesh_grad.theta.iter().zip(&g_theta_direct) {
            grad.extend((a + b).iter());
        }
        grad.extend(mesh_grad.gamma.iter());
        grad.extend(g_cam.iter());
        let mask = free.mask(template.n_beta(), template.n_joints());
        for (g, m) in grad.iter_mut().zip(&mask) {
            *g *= m;
        }
        Ok((report, Some(grad)))
    }
}
