use super::{LossWeights, PriorDistribution};
use crate::error::{Error, Result};
use crate::model::Params;

/// A scorer mapping parameters to `K` realism scores, 1 meaning "real".
pub trait Discriminator {
    fn scores(&self, params: &Params) -> Result<Vec<f64>>;
}

/// `sum_k (D_k - 1)^2`.
pub fn loss_adv(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument(
            "discriminator produced no outputs".into(),
        ));
    }
    Ok(scores.iter().map(|d| (d - 1.0).powi(2)).sum())
}

/// Reference discriminator: one score for shape and one for pose, each the
/// logistic sigmoid of the negated Mahalanobis distance under a prior.
#[derive(Debug, Clone)]
pub struct MahalanobisDiscriminator {
    pub prior: PriorDistribution,
}

impl Discriminator for MahalanobisDiscriminator {
    fn scores(&self, params: &Params) -> Result<Vec<f64>> {
        let shape_only = LossWeights {
            inner_beta_prior: 1.0,
            ..Default::default()
        };
        let total = self.prior.loss(params, &shape_only)?;
        let mut beta_only = self.prior.mean_params();
        beta_only.beta.clone_from(&params.beta);
        let shape = self.prior.loss(&beta_only, &shape_only)?;
        let pose = (total - shape).max(0.0);
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        Ok(vec![sigmoid(-shape.sqrt()), sigmoid(-pose.sqrt())])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::make_toy_prior;

    #[test]
    fn analytic_values() {
        assert_eq!(loss_adv(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(loss_adv(&[0.0, 0.0, 0.0]).unwrap(), 3.0);
        assert_eq!(loss_adv(&[0.5, 1.5]).unwrap(), 0.5);
        assert!(loss_adv(&[]).is_err());
    }

    #[test]
    fn reference_discriminator_prefers_the_mean() {
        let d = MahalanobisDiscriminator {
            prior: make_toy_prior(4, 3, 1.0).unwrap(),
        };
        let mean = d.prior.mean_params();
        let at_mean = d.scores(&mean).unwrap();
        assert_eq!(at_mean, vec![0.5, 0.5]);
        let mut far = mean.clone();
        far.beta[0] = 3.0;
        far.theta[2].x = 2.0;
        let s = d.scores(&far).unwrap();
        assert!(s.iter().all(|x| *x < 0.5));
        assert!(loss_adv(&s).unwrap() > loss_adv(&at_mean).unwrap());
    }
}
