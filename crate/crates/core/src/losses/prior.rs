use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::LossWeights;
use crate::error::{check_dim, read_json, write_json, Error, Result};
use crate::model::Params;

/// Gaussian prior over shape and pose, with covariances factored once at construction.
#[derive(Debug, Clone)]
pub struct PriorDistribution {
    pub mu_beta: DVector<f64>,
    pub sigma_beta: DMatrix<f64>,
    pub mu_theta: DVector<f64>,
    pub sigma_theta: DMatrix<f64>,
    chol_beta: Cholesky<f64, Dyn>,
    chol_theta: Cholesky<f64, Dyn>,
}

fn factor(name: &str, sigma: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if !sigma.is_square() {
        return Err(Error::Validation(format!("{name} is not square")));
    }
    let asym = (sigma - sigma.transpose()).amax();
    if asym > 1e-12 * sigma.amax().max(1.0) {
        return Err(Error::Validation(format!("{name} is not symmetric")));
    }
    Cholesky::new(sigma.clone())
        .ok_or_else(|| Error::Validation(format!("{name} is not positive definite")))
}

impl PriorDistribution {
    pub fn new(
        mu_beta: DVector<f64>,
        sigma_beta: DMatrix<f64>,
        mu_theta: DVector<f64>,
        sigma_theta: DMatrix<f64>,
    ) -> Result<Self> {
        check_dim("sigma_beta", mu_beta.len(), sigma_beta.nrows())?;
        check_dim("sigma_theta", mu_theta.len(), sigma_theta.nrows())?;
        let chol_beta = factor("sigma_beta", &sigma_beta)?;
        let chol_theta = factor("sigma_theta", &sigma_theta)?;
        Ok(PriorDistribution {
            mu_beta,
            sigma_beta,
            mu_theta,
            sigma_theta,
            chol_beta,
            chol_theta,
        })
    }

    pub fn n_beta(&self) -> usize {
        self.mu_beta.len()
    }

    pub fn n_joints(&self) -> usize {
        self.mu_theta.len() / 3
    }

    /// Lower Cholesky factor of the shape covariance, for sampling.
    pub fn beta_cholesky(&self) -> DMatrix<f64> {
        self.chol_beta.l()
    }

    pub fn mean_params(&self) -> Params {
        Params {
            beta: self.mu_beta.iter().copied().collect(),
            theta: self
                .mu_theta
                .as_slice()
                .chunks_exact(3)
                .map(|c| nalgebra::Vector3::new(c[0], c[1], c[2]))
                .collect(),
            gamma: nalgebra::Vector3::zeros(),
        }
    }

    fn deviations(&self, params: &Params) -> Result<(DVector<f64>, DVector<f64>)> {
        check_dim("beta", self.n_beta(), params.beta.len())?;
        check_dim("theta", self.mu_theta.len(), params.theta.len() * 3)?;
        let db = DVector::from_column_slice(&params.beta) - &self.mu_beta;
        let dt = DVector::from_vec(params.theta_flat()) - &self.mu_theta;
        Ok((db, dt))
    }

    /// `lb (b - mu_b)^T S_b^-1 (b - mu_b) + (t - mu_t)^T S_t^-1 (t - mu_t)`.
    pub fn loss(&self, params: &Params, weights: &LossWeights) -> Result<f64> {
        let (db, dt) = self.deviations(params)?;
        let sb = self.chol_beta.solve(&db);
        let st = self.chol_theta.solve(&dt);
        Ok(weights.inner_beta_prior * db.dot(&sb) + dt.dot(&st))
    }

    /// Value and gradient with respect to `(beta, theta)`.
    pub fn loss_with_grad(
        &self,
        params: &Params,
        weights: &LossWeights,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let (db, dt) = self.deviations(params)?;
        let sb = self.chol_beta.solve(&db);
        let st = self.chol_theta.solve(&dt);
        let value = weights.inner_beta_prior * db.dot(&sb) + dt.dot(&st);
        let gb = (2.0 * weights.inner_beta_prior * sb)
            .iter()
            .copied()
            .collect();
        let gt = (2.0 * st).iter().copied().collect();
        Ok((value, gb, gt))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file: PriorFile = read_json(path.as_ref())?;
        file.into_prior()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), &PriorFile::from_prior(self))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&PriorFile::from_prior(self)).expect("prior serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PriorFile = crate::error::from_json_str(text)?;
        file.into_prior()
    }
}

/// Mean zero, isotropic covariance `sigma^2 I` for both shape and pose.
pub fn make_toy_prior(n_beta: usize, n_joints: usize, sigma: f64) -> Result<PriorDistribution> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "prior sigma must be positive, got {sigma}"
        )));
    }
    let var = sigma * sigma;
    PriorDistribution::new(
        DVector::zeros(n_beta),
        DMatrix::identity(n_beta, n_beta) * var,
        DVector::zeros(n_joints * 3),
        DMatrix::identity(n_joints * 3, n_joints * 3) * var,
    )
}

/// On-disk prior, flat row-major like the template file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorFile {
    version: u32,
    n_beta: usize,
    n_joints: usize,
    mu_beta: Vec<f64>,
    sigma_beta: Vec<f64>,
    mu_theta: Vec<f64>,
    sigma_theta: Vec<f64>,
}

impl PriorFile {
    fn from_prior(p: &PriorDistribution) -> Self {
        let row_major = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
        PriorFile {
            version: 1,
            n_beta: p.n_beta(),
            n_joints: p.n_joints(),
            mu_beta: p.mu_beta.as_slice().to_vec(),
            sigma_beta: row_major(&p.sigma_beta),
            mu_theta: p.mu_theta.as_slice().to_vec(),
            sigma_theta: row_major(&p.sigma_theta),
        }
    }

    fn into_prior(self) -> Result<PriorDistribution> {
        let nb = self.n_beta;
        let nt = self.n_joints * 3;
        for (field, expected, got) in [
            ("mu_beta", nb, self.mu_beta.len()),
            ("sigma_beta", nb * nb, self.sigma_beta.len()),
            ("mu_theta", nt, self.mu_theta.len()),
            ("sigma_theta", nt * nt, self.sigma_theta.len()),
        ] {
            if expected != got {
                return Err(Error::Parse {
                    field: field.into(),
                    message: format!("expected {expected} values, found {got}"),
                });
            }
        }
        PriorDistribution::new(
            DVector::from_vec(self.mu_beta),
            DMatrix::from_row_slice(nb, nb, &self.sigma_beta),
            DVector::from_vec(self.mu_theta),
            DMatrix::from_row_slice(nt, nt, &self.sigma_theta),
        )
    }
}
