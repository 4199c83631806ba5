//! Training losses on model parameters, keypoints and family embeddings.
//!
//! Every loss is a pure function. [`objective::Objective`] composes the
//! differentiable ones through the posed model and returns analytic gradients;
//! [`grad_fd`] is the central-difference reference those gradients are checked
//! against.

mod adversarial;
mod contrastive;
mod gradcheck;
pub mod objective;
mod prior;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{check_dim, Error, Result};
use crate::model::Params;

pub use adversarial::{loss_adv, Discriminator, MahalanobisDiscriminator};
pub use contrastive::{loss_supcon, EmbeddingBatch, SupConConfig, DEFAULT_BATCH_SIZE};
pub use gradcheck::{grad_fd, relative_error, FitVariables, DEFAULT_FD_STEP};
pub use prior::{make_toy_prior, PriorDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_3d: f64,
    pub lambda_2d: f64,
    pub lambda_prior: f64,
    pub lambda_adv: f64,
    pub lambda_con: f64,
    /// Shape term inside the 3D loss.
    pub inner_beta_3d: f64,
    /// Pose term inside the 3D loss.
    pub inner_theta_3d: f64,
    /// Shape term inside the prior loss.
    pub inner_beta_prior: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_3d: 0.05,
            lambda_2d: 0.01,
            lambda_prior: 0.001,
            lambda_adv: 0.0005,
            lambda_con: 0.0005,
            inner_beta_3d: 0.01,
            inner_theta_3d: 0.2,
            inner_beta_prior: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_3d,
            self.lambda_2d,
            self.lambda_prior,
            self.lambda_adv,
            self.lambda_con,
            self.inner_beta_3d,
            self.inner_theta_3d,
            self.inner_beta_prior,
        ];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Component values of the total loss; `None` means the term is absent.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l3d: Option<f64>,
    pub l2d: Option<f64>,
    pub prior: Option<f64>,
    pub adv: Option<f64>,
    pub con: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub l3d: Option<f64>,
    pub l2d: Option<f64>,
    pub prior: Option<f64>,
    pub adv: Option<f64>,
    pub con: Option<f64>,
}

impl LossReport {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            l3d: self.l3d,
            l2d: self.l2d,
            prior: self.prior,
            adv: self.adv,
            con: self.con,
        }
    }
}

/// Weighted sum of the present components.
pub fn loss_total(components: &LossComponents, weights: &LossWeights) -> Result<LossReport> {
    let terms = [
        (components.l3d, weights.lambda_3d),
        (components.l2d, weights.lambda_2d),
        (components.prior, weights.lambda_prior),
        (components.adv, weights.lambda_adv),
        (components.con, weights.lambda_con),
    ];
    if terms.iter().all(|(c, _)| c.is_none()) {
        return Err(Error::InvalidArgument(
            "loss_total needs at least one component".into(),
        ));
    }
    let total = terms
        .iter()
        .filter_map(|(c, w)| c.map(|c| c * w))
        .sum::<f64>();
    Ok(LossReport {
        total,
        l3d: components.l3d,
        l2d: components.l2d,
        prior: components.prior,
        adv: components.adv,
        con: components.con,
    })
}

/// Observed 2D keypoints with per-keypoint visibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointObservation {
    pub points: Vec<Vector2<f64>>,
    pub visible: Vec<bool>,
}

impl KeypointObservation {
    pub fn new(points: Vec<Vector2<f64>>, visible: Vec<bool>) -> Result<Self> {
        check_dim("visibility", points.len(), visible.len())?;
        Ok(KeypointObservation { points, visible })
    }

    pub fn n_visible(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }

    /// Copy with only the keypoints in `subset` left visible.
    pub fn restricted_to(&self, subset: &[usize]) -> Self {
        let visible = self
            .visible
            .iter()
            .enumerate()
            .map(|(i, v)| *v && subset.contains(&i))
            .collect();
        KeypointObservation {
            points: self.points.clone(),
            visible,
        }
    }
}

/// How pixel residuals are scaled before the L1 norm of the 2D loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelNormalization {
    /// Divide by the image width.
    #[default]
    ImageWidth,
    /// Raw pixels.
    None,
}

impl PixelNormalization {
    pub(crate) fn scale(self, camera: &Camera) -> f64 {
        match self {
            PixelNormalization::ImageWidth => 1.0 / camera.width as f64,
            PixelNormalization::None => 1.0,
        }
    }
}

/// `|| pi(K3D_pred) - K2D ||_1` over visible keypoints.
pub fn loss_2d(
    pred_kp3d: &[Vector3<f64>],
    camera: &Camera,
    observed: &KeypointObservation,
    normalization: PixelNormalization,
) -> Result<f64> {
    Ok(objective::loss_2d_with_grad(pred_kp3d, camera, observed, normalization, false)?.0)
}

/// `lb ||b_pred - b||^2 + lt ||t_pred - t||^2 + ||K3D_pred - K3D||_1`.
///
/// The parameter terms are included only when both sides carry parameters.
pub fn loss_3d(
    pred: Option<&Params>,
    pred_kp3d: &[Vector3<f64>],
    gt: Option<&Params>,
    gt_kp3d: &[Vector3<f64>],
    weights: &LossWeights,
) -> Result<f64> {
    check_dim("keypoints3d", gt_kp3d.len(), pred_kp3d.len())?;
    let mut value: f64 = pred_kp3d
        .iter()
        .zip(gt_kp3d)
        .map(|(p, g)| (p - g).abs().sum())
        .sum();
    if let (Some(p), Some(g)) = (pred, gt) {
        check_dim("beta", g.beta.len(), p.beta.len())?;
        check_dim("theta", g.theta.len(), p.theta.len())?;
        let db: f64 = p
            .beta
            .iter()
            .zip(&g.beta)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let dt: f64 = p
            .theta
            .iter()
            .zip(&g.theta)
            .map(|(a, b)| (a - b).norm_squared())
            .sum();
        value += weights.inner_beta_3d * db + weights.inner_theta_3d * dt;
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(beta: Vec<f64>, n_joints: usize) -> Params {
        Params {
            beta,
            theta: vec![Vector3::zeros(); n_joints],
            gamma: Vector3::zeros(),
        }
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!(
            [
                w.lambda_3d,
                w.lambda_2d,
                w.lambda_prior,
                w.lambda_adv,
                w.lambda_con
            ],
            [0.05, 0.01, 0.001, 0.0005, 0.0005]
        );
        assert_eq!(
            [w.inner_beta_3d, w.inner_theta_3d, w.inner_beta_prior],
            [0.01, 0.2, 0.5]
        );
    }

    #[test]
    fn total_of_unit_components() {
        let one = Some(1.0);
        let c = LossComponents {
            l3d: one,
            l2d: one,
            prior: one,
            adv: one,
            con: one,
        };
        let r = loss_total(&c, &LossWeights::default()).unwrap();
        assert!((r.total - 0.062).abs() < 1e-15);
    }

    #[test]
    fn total_with_only_2d() {
        let c = LossComponents {
            l2d: Some(2.0),
            ..Default::default()
        };
        let r = loss_total(&c, &LossWeights::default()).unwrap();
        assert_eq!(r.total, 0.02);
        assert_eq!(r.l3d, None);
    }

    #[test]
    fn total_without_components_fails() {
        assert!(loss_total(&LossComponents::default(), &LossWeights::default()).is_err());
    }

    #[test]
    fn total_is_linear_in_each_component() {
        let w = LossWeights::default();
        let base = LossComponents {
            l3d: Some(0.3),
            l2d: Some(1.7),
            prior: Some(4.0),
            adv: Some(0.2),
            con: Some(-0.9),
        };
        let t0 = loss_total(&base, &w).unwrap().total;
        let doubled = LossComponents {
            prior: Some(8.0),
            ..base
        };
        let t1 = loss_total(&doubled, &w).unwrap().total;
        assert!((t1 - t0 - w.lambda_prior * 4.0).abs() < 1e-15);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            lambda_2d: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn loss_3d_cases() {
        let w = LossWeights::default();
        let kp = vec![Vector3::new(0.1, 0.2, 0.3), Vector3::new(-1.0, 0.0, 2.0)];
        let gt = params(vec![0.0; 4], 3);
        assert_eq!(loss_3d(Some(&gt), &kp, Some(&gt), &kp, &w).unwrap(), 0.0);

        let mut pred = gt.clone();
        pred.beta[0] = 1.0;
        assert_eq!(loss_3d(Some(&pred), &kp, Some(&gt), &kp, &w).unwrap(), 0.01);

        let mut kp_off = kp.clone();
        kp_off[1].x += 0.1;
        let v = loss_3d(Some(&gt), &kp_off, Some(&gt), &kp, &w).unwrap();
        assert!((v - 0.1).abs() < 1e-15);

        assert!(loss_3d(None, &kp[..1], None, &kp, &w).is_err());
    }

    #[test]
    fn loss_2d_cases() {
        let cam = Camera::with_translation(Vector3::new(0.0, 0.0, 5.0));
        let kp3d = vec![Vector3::zeros(), Vector3::new(0.1, -0.2, 0.0)];
        let proj: Vec<_> = cam.project(&kp3d).iter().map(|p| p.pixel).collect();
        let obs = KeypointObservation::new(proj.clone(), vec![true, true]).unwrap();
        assert_eq!(
            loss_2d(&kp3d, &cam, &obs, PixelNormalization::ImageWidth).unwrap(),
            0.0
        );

        let mut shifted = proj.clone();
        shifted[1] += Vector2::new(3.0, 4.0);
        let obs = KeypointObservation::new(shifted, vec![false, true]).unwrap();
        let v = loss_2d(&kp3d, &cam, &obs, PixelNormalization::ImageWidth).unwrap();
        assert!((v - 7.0 / 512.0).abs() < 1e-12);
        let raw = loss_2d(&kp3d, &cam, &obs, PixelNormalization::None).unwrap();
        assert!((raw - 7.0).abs() < 1e-9);

        let none = KeypointObservation::new(proj, vec![false, false]).unwrap();
        assert!(matches!(
            loss_2d(&kp3d, &cam, &none, PixelNormalization::ImageWidth),
            Err(Error::EmptyObservation)
        ));
    }
}
