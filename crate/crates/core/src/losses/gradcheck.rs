use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::model::Params;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Everything the fitter optimizes: model parameters plus the camera translation.
///
/// Flattened order is `beta, theta (row-major), gamma, T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FitVariables {
    pub params: Params,
    pub camera_translation: Vector3<f64>,
}

impl FitVariables {
    pub fn len(&self) -> usize {
        self.params.beta.len() + 3 * self.params.theta.len() + 6
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.params.beta);
        out.extend(self.params.theta_flat());
        out.extend(self.params.gamma.iter());
        out.extend(self.camera_translation.iter());
        out
    }

    /// Overwrite all values from `flat`, keeping the current dimensions.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("fit variables", self.len(), flat.len())?;
        let nb = self.params.beta.len();
        let nt = 3 * self.params.theta.len();
        self.params.beta.copy_from_slice(&flat[..nb]);
        for (k, t) in self.params.theta.iter_mut().enumerate() {
            *t = Vector3::from_column_slice(&flat[nb + 3 * k..nb + 3 * k + 3]);
        }
        self.params.gamma = Vector3::from_column_slice(&flat[nb + nt..nb + nt + 3]);
        self.camera_translation = Vector3::from_column_slice(&flat[nb + nt + 3..]);
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_flat(flat)?;
        Ok(out)
    }
}

/// Central-difference gradient of `objective` at `at`, in flattened order.
///
/// Coordinates are evaluated independently and in parallel.
pub fn grad_fd<F>(objective: F, at: &FitVariables, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&FitVariables) -> Result<f64> + Sync,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let x0 = at.to_flat();
    (0..x0.len())
        .into_par_iter()
        .map(|i| {
            let mut x = x0.clone();
            x[i] = x0[i] + h;
            let fp = objective(&at.with_flat(&x)?)?;
            x[i] = x0[i] - h;
            let fm = objective(&at.with_flat(&x)?)?;
            if !(fp.is_finite() && fm.is_finite()) {
                return Err(Error::NonFinite(format!("objective near coordinate {i}")));
            }
            Ok((fp - fm) / (2.0 * h))
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{make_toy_prior, LossWeights};

    fn vars(n_beta: usize, n_joints: usize) -> FitVariables {
        FitVariables {
            params: Params {
                beta: vec![0.0; n_beta],
                theta: vec![Vector3::zeros(); n_joints],
                gamma: Vector3::zeros(),
            },
            camera_translation: Vector3::new(0.0, 0.0, 6.0),
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut v = vars(2, 2);
        let flat: Vec<f64> = (0..v.len()).map(|i| i as f64).collect();
        v.set_flat(&flat).unwrap();
        assert_eq!(v.to_flat(), flat);
        assert_eq!(v.params.theta[1], Vector3::new(5.0, 6.0, 7.0));
        assert_eq!(v.camera_translation, Vector3::new(11.0, 12.0, 13.0));
        assert!(v.set_flat(&flat[1..]).is_err());
    }

    #[test]
    fn quadratic_gradient() {
        let mut at = vars(3, 1);
        at.params.beta[0] = 1.0;
        let g = grad_fd(
            |v| Ok(v.params.beta.iter().map(|b| b * b).sum()),
            &at,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        let mut expected = vec![0.0; at.len()];
        expected[0] = 2.0;
        assert!(g.iter().zip(&expected).all(|(a, b)| (a - b).abs() < 1e-8));
    }

    #[test]
    fn prior_gradient_vanishes_at_mean() {
        let prior = make_toy_prior(3, 2, 0.7).unwrap();
        let at = FitVariables {
            params: prior.mean_params(),
            camera_translation: Vector3::zeros(),
        };
        let w = LossWeights::default();
        let g = grad_fd(|v| prior.loss(&v.params, &w), &at, DEFAULT_FD_STEP).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let at = vars(1, 1);
        assert!(grad_fd(|_| Ok(f64::NAN), &at, DEFAULT_FD_STEP).is_err());
        assert!(grad_fd(|_| Ok(0.0), &at, 0.0).is_err());
    }
}
