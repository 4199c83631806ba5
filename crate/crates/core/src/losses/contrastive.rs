use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const DEFAULT_BATCH_SIZE: usize = 16;

/// Family embeddings `z` (one row per sample) with their family labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub z: DMatrix<f64>,
    pub family_labels: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn new(z: DMatrix<f64>, family_labels: Vec<usize>) -> Result<Self> {
        check_dim("family_labels", z.nrows(), family_labels.len())?;
        if z.nrows() < 2 {
            return Err(Error::InvalidArgument(format!(
                "contrastive batch needs at least 2 samples, got {}",
                z.nrows()
            )));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("embedding batch".into()));
        }
        Ok(EmbeddingBatch { z, family_labels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupConConfig {
    /// L2-normalize each embedding before taking dot products.
    pub normalize: bool,
    /// Sum `log` of the ratios instead of the ratios themselves.
    pub log_form: bool,
    /// Divides similarities when set.
    pub temperature: Option<f64>,
}

impl Default for SupConConfig {
    fn default() -> Self {
        SupConConfig {
            normalize: true,
            log_form: false,
            temperature: None,
        }
    }
}

/// Family contrastive loss
/// `sum_i -1/|P(i)| sum_{p in P(i)} exp(z_i.z_p) / sum_{o != i} exp(z_i.z_o)`.
///
/// Anchors without a same-family partner contribute zero. The default form has
/// no logarithm and no temperature, so its value lies in `[-B, 0]`.
pub fn loss_supcon(batch: &EmbeddingBatch, config: &SupConConfig) -> Result<f64> {
    let n = batch.z.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "contrastive batch needs at least 2 samples".into(),
        ));
    }
    let mut z = batch.z.clone();
    if config.normalize {
        for mut row in z.row_iter_mut() {
            let norm = row.norm();
            if norm > 0.0 {
                row /= norm;
            }
        }
    }
    let scale = match config.temperature {
        Some(t) if t > 0.0 => 1.0 / t,
        Some(t) => {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {t}"
            )))
        }
        None => 1.0,
    };
    let sim = &z * z.transpose() * scale;

    let mut total = 0.0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n)
            .filter(|&p| p != i && batch.family_labels[p] == batch.family_labels[i])
            .collect();
        if positives.is_empty() {
            continue;
        }
        let max = (0..n)
            .filter(|&o| o != i)
            .map(|o| sim[(i, o)])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n)
            .filter(|&o| o != i)
            .map(|o| (sim[(i, o)] - max).exp())
            .sum();
        let sum: f64 = positives
            .iter()
            .map(|&p| {
                if config.log_form {
                    sim[(i, p)] - max - denom.ln()
                } else {
                    (sim[(i, p)] - max).exp() / denom
                }
            })
            .sum();
        total -= sum / positives.len() as f64;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: &[&[f64]], labels: &[usize]) -> EmbeddingBatch {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        EmbeddingBatch::new(
            DMatrix::from_row_slice(rows.len(), d, &flat),
            labels.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn same_family_pair_gives_minus_two() {
        let b = batch(&[&[0.3, -1.2, 0.5], &[2.0, 0.1, 0.0]], &[4, 4]);
        assert_eq!(loss_supcon(&b, &SupConConfig::default()).unwrap(), -2.0);
    }

    #[test]
    fn different_family_pair_gives_zero() {
        let b = batch(&[&[0.3, -1.2, 0.5], &[2.0, 0.1, 0.0]], &[0, 1]);
        assert_eq!(loss_supcon(&b, &SupConConfig::default()).unwrap(), 0.0);
    }

    /// Literal triple loop, no max-subtraction.
    fn brute_force(rows: &[&[f64]], labels: &[usize], normalize: bool) -> f64 {
        let z: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = if normalize {
                    r.iter().map(|x| x * x).sum::<f64>().sqrt()
                } else {
                    1.0
                };
                r.iter().map(|x| x / n).collect()
            })
            .collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for i in 0..z.len() {
            let pos: Vec<usize> = (0..z.len())
                .filter(|&p| p != i && labels[p] == labels[i])
                .collect();
            if pos.is_empty() {
                continue;
            }
            let mut denom = 0.0;
            for o in 0..z.len() {
                if o != i {
                    denom += dot(&z[i], &z[o]).exp();
                }
            }
            let mut s = 0.0;
            for &p in &pos {
                s += dot(&z[i], &z[p]).exp() / denom;
            }
            total += -s / pos.len() as f64;
        }
        total
    }

    #[test]
    fn three_sample_batch_matches_loop_oracle() {
        let rows: [&[f64]; 3] = [&[0.1, 0.2, -0.3], &[-0.3, 0.4, 0.25], &[0.5, -0.1, 0.05]];
        let labels = [0, 0, 1];
        let b = batch(&rows, &labels);
        let v = loss_supcon(&b, &SupConConfig::default()).unwrap();
        // Frozen from an independent numpy evaluation.
        assert!((v - -1.0732283663302946).abs() < 1e-12);
        assert!((v - brute_force(&rows, &labels, true)).abs() < 1e-12);
        let raw = loss_supcon(
            &b,
            &SupConConfig {
                normalize: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((raw - -1.0280526175058937).abs() < 1e-12);
    }

    #[test]
    fn log_form_is_standard_supcon() {
        let b = batch(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]], &[0, 0, 0]);
        let cfg = SupConConfig {
            log_form: true,
            temperature: Some(0.5),
            ..Default::default()
        };
        let v = loss_supcon(&b, &cfg).unwrap();
        assert!(v > 0.0);
        let r = loss_supcon(&b, &SupConConfig::default()).unwrap();
        // Two positives per anchor whose ratios sum to 1.
        assert!((r - -1.5).abs() < 1e-12);
    }

    #[test]
    fn undersized_batch_rejected() {
        assert!(EmbeddingBatch::new(DMatrix::zeros(1, 3), vec![0]).is_err());
    }

    #[test]
    fn large_similarities_do_not_overflow() {
        let b = batch(&[&[800.0, 0.0], &[700.0, 1.0], &[-5.0, 3.0]], &[1, 1, 2]);
        let v = loss_supcon(
            &b,
            &SupConConfig {
                normalize: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(v.is_finite());
    }
}
