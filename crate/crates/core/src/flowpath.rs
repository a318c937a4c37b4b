//! Optimal-transport conditional probability path and the conditional flow
//! matching regression target.
//!
//! For a data point `x1` and prior sample `x0 ~ N(0, I)` the path is
//! `psi_t(x0) = sigma_t * x0 + t * x1` with `sigma_t = 1 - (1 - sigma_min) t`.
//! Its time derivative `x1 - (1 - sigma_min) x0` does not depend on `t` and is
//! the regression target for the vector-field estimator.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Denominators of the conditional field below this are refused.
pub const SINGULARITY_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowPathConfig {
    pub sigma_min: f64,
}

impl Default for FlowPathConfig {
    fn default() -> Self {
        Self { sigma_min: 1e-4 }
    }
}

impl FlowPathConfig {
    pub fn new(sigma_min: f64) -> Result<Self> {
        let cfg = Self { sigma_min };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(invalid(format!(
                "sigma_min must lie in [0, 1), got {}",
                self.sigma_min
            )));
        }
        Ok(())
    }
}

/// A point on a trajectory of the flow.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub x: Vec<f64>,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple {
    pub t: f64,
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub x_t: Vec<f64>,
    pub target: Vec<f64>,
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("t must lie in [0, 1], got {t}")));
    }
    Ok(())
}

fn check_shapes(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("length {}", a.len()),
            actual: format!("length {}", b.len()),
        });
    }
    Ok(())
}

pub fn sigma_t(t: f64, cfg: &FlowPathConfig) -> Result<f64> {
    check_time(t)?;
    Ok(1.0 - (1.0 - cfg.sigma_min) * t)
}

pub fn mu_t(t: f64, x1: &[f64]) -> Result<Vec<f64>> {
    check_time(t)?;
    Ok(x1.iter().map(|v| t * v).collect())
}

pub fn psi_t(x0: &[f64], x1: &[f64], t: f64, cfg: &FlowPathConfig) -> Result<Vec<f64>> {
    check_shapes(x0, x1)?;
    let s = sigma_t(t, cfg)?;
    Ok(x0.iter().zip(x1).map(|(a, b)| s * a + t * b).collect())
}

pub fn target_vector_field(x0: &[f64], x1: &[f64], cfg: &FlowPathConfig) -> Result<Vec<f64>> {
    check_shapes(x0, x1)?;
    let k = 1.0 - cfg.sigma_min;
    Ok(x0.iter().zip(x1).map(|(a, b)| b - k * a).collect())
}

/// `(x1 - (1 - sigma_min) x) / (1 - (1 - sigma_min) t)`.
pub fn conditional_vector_field(
    x: &[f64],
    x1: &[f64],
    t: f64,
    cfg: &FlowPathConfig,
) -> Result<Vec<f64>> {
    check_shapes(x, x1)?;
    let denominator = sigma_t(t, cfg)?;
    if denominator < SINGULARITY_EPS {
        return Err(Error::Singular { t, denominator });
    }
    let k = 1.0 - cfg.sigma_min;
    Ok(x.iter()
        .zip(x1)
        .map(|(a, b)| (b - k * a) / denominator)
        .collect())
}

/// Mean over elements of the squared difference.
pub fn cfm_loss(predicted: &[f64], target: &[f64]) -> Result<f64> {
    check_shapes(predicted, target)?;
    if predicted.is_empty() {
        return Err(Error::Empty("loss input"));
    }
    let sum: f64 = predicted
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / predicted.len() as f64)
}

/// Gradient of [`cfm_loss`] with respect to `predicted`: `2 (p - t) / d`.
pub fn cfm_loss_gradient(predicted: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    check_shapes(predicted, target)?;
    let scale = 2.0 / predicted.len().max(1) as f64;
    Ok(predicted
        .iter()
        .zip(target)
        .map(|(p, t)| scale * (p - t))
        .collect())
}

/// Loss and gradient restricted to elements where `weights` is nonzero; the
/// mean is taken over the selected elements only.
pub fn masked_cfm_loss(
    predicted: &[f64],
    target: &[f64],
    weights: &[bool],
) -> Result<(f64, Vec<f64>)> {
    check_shapes(predicted, target)?;
    if weights.len() != predicted.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("length {}", predicted.len()),
            actual: format!("mask length {}", weights.len()),
        });
    }
    let count = weights.iter().filter(|&&w| w).count();
    if count == 0 {
        return Ok((0.0, vec![0.0; predicted.len()]));
    }
    let mut loss = 0.0;
    let scale = 2.0 / count as f64;
    let grad = predicted
        .iter()
        .zip(target)
        .zip(weights)
        .map(|((p, t), &w)| {
            if w {
                loss += (p - t) * (p - t);
                scale * (p - t)
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss / count as f64, grad))
}

pub fn sample_training_tuple<R: Rng + ?Sized>(
    x1: &[f64],
    cfg: &FlowPathConfig,
    rng: &mut R,
) -> Result<TrainingTuple> {
    let t: f64 = rng.random::<f64>();
    training_tuple_at(x1, t, cfg, rng)
}

/// Training tuple at a given time; only `x0` is drawn from `rng`.
pub fn training_tuple_at<R: Rng + ?Sized>(
    x1: &[f64],
    t: f64,
    cfg: &FlowPathConfig,
    rng: &mut R,
) -> Result<TrainingTuple> {
    check_time(t)?;
    if x1.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("x1"));
    }
    let x0: Vec<f64> = (0..x1.len()).map(|_| rng.sample(StandardNormal)).collect();
    let x_t = psi_t(&x0, x1, t, cfg)?;
    let target = target_vector_field(&x0, x1, cfg)?;
    Ok(TrainingTuple {
        t,
        x0,
        x1: x1.to_vec(),
        x_t,
        target,
    })
}

/// `n` times with one in each stratum `[i/n, (i+1)/n)`, in random order.
/// Each time is marginally `U[0, 1)`, but a batch covers the whole range,
/// which lowers the variance of the batch loss.
pub fn stratified_times<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut times: Vec<f64> = (0..n)
        .map(|i| (i as f64 + rng.random::<f64>()) / n as f64)
        .collect();
    times.shuffle(rng);
    times
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CFG: FlowPathConfig = FlowPathConfig { sigma_min: 1e-4 };

    #[test]
    fn sigma_values() {
        assert_eq!(sigma_t(0.0, &CFG).unwrap(), 1.0);
        assert!((sigma_t(1.0, &CFG).unwrap() - 1e-4).abs() < 1e-15);
        assert!((sigma_t(0.5, &CFG).unwrap() - 0.50005).abs() < 1e-15);
        assert!(sigma_t(1.5, &CFG).is_err());
        assert!(sigma_t(-0.1, &CFG).is_err());
    }

    #[test]
    fn config_range() {
        assert!(FlowPathConfig::new(0.0).is_ok());
        assert!(FlowPathConfig::new(1.0).is_err());
        assert!(FlowPathConfig::new(-1e-3).is_err());
    }

    #[test]
    fn mu_values() {
        assert_eq!(mu_t(0.0, &[3.0, 4.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(mu_t(1.0, &[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
        assert_eq!(mu_t(0.25, &[4.0, 8.0]).unwrap(), vec![1.0, 2.0]);
        assert!(mu_t(2.0, &[1.0]).is_err());
    }

    #[test]
    fn psi_values() {
        let x0 = [0.3, -1.2];
        let x1 = [2.0, 5.0];
        assert_eq!(psi_t(&x0, &x1, 0.0, &CFG).unwrap(), x0.to_vec());
        let end = psi_t(&x0, &x1, 1.0, &CFG).unwrap();
        for i in 0..2 {
            assert!((end[i] - (x1[i] + 1e-4 * x0[i])).abs() < 1e-12);
        }
        let zero = FlowPathConfig { sigma_min: 0.0 };
        assert_eq!(psi_t(&[1.0], &[2.0], 0.5, &zero).unwrap(), vec![1.5]);
        assert!(psi_t(&[1.0], &[1.0, 2.0], 0.5, &CFG).is_err());
    }

    #[test]
    fn target_values() {
        let zero = FlowPathConfig { sigma_min: 0.0 };
        assert_eq!(
            target_vector_field(&[1.0, 2.0], &[3.0, 3.0], &zero).unwrap(),
            vec![2.0, 1.0]
        );
        assert_eq!(
            target_vector_field(&[0.0], &[7.0], &CFG).unwrap(),
            vec![7.0]
        );
        assert!((target_vector_field(&[1.0], &[2.0], &CFG).unwrap()[0] - 1.0001).abs() < 1e-12);
    }

    #[test]
    fn conditional_field_cases() {
        let x = [0.4, -0.2];
        let x1 = [1.0, 2.0];
        let v = conditional_vector_field(&x, &x1, 0.0, &CFG).unwrap();
        for i in 0..2 {
            assert!((v[i] - (x1[i] - (1.0 - 1e-4) * x[i])).abs() < 1e-15);
        }
        let zero = FlowPathConfig { sigma_min: 0.0 };
        assert!(matches!(
            conditional_vector_field(&x, &x1, 1.0, &zero),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn loss_values() {
        assert_eq!(cfm_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(cfm_loss(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(cfm_loss(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 12.5);
        assert!(cfm_loss(&[1.0], &[1.0, 2.0]).is_err());
        assert_eq!(
            cfm_loss(&[3.0, -4.0], &[0.0, 0.0]).unwrap(),
            cfm_loss(&[-3.0, 4.0], &[0.0, 0.0]).unwrap()
        );
    }

    #[test]
    fn loss_gradient_matches_formula() {
        let p = [0.5, -1.0, 2.0];
        let t = [0.0, 1.0, 1.0];
        let g = cfm_loss_gradient(&p, &t).unwrap();
        for i in 0..3 {
            assert!((g[i] - 2.0 * (p[i] - t[i]) / 3.0).abs() < 1e-15);
            let h = 1e-6;
            let mut up = p;
            let mut dn = p;
            up[i] += h;
            dn[i] -= h;
            let fd = (cfm_loss(&up, &t).unwrap() - cfm_loss(&dn, &t).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn masked_loss_selects_elements() {
        let (l, g) = masked_cfm_loss(&[1.0, 5.0], &[0.0, 0.0], &[true, false]).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g, vec![2.0, 0.0]);
        let (l, g) = masked_cfm_loss(&[1.0, 5.0], &[0.0, 0.0], &[false, false]).unwrap();
        assert_eq!((l, g), (0.0, vec![0.0, 0.0]));
    }

    #[test]
    fn training_tuple_is_deterministic_and_consistent() {
        let x1: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
        let a = sample_training_tuple(&x1, &CFG, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_training_tuple(&x1, &CFG, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let s = sigma_t(a.t, &CFG).unwrap();
        for i in 0..16 {
            assert_eq!(a.x_t[i], s * a.x0[i] + a.t * x1[i]);
            assert_eq!(a.target[i], x1[i] - (1.0 - 1e-4) * a.x0[i]);
        }
        assert!(
            sample_training_tuple(&[f64::NAN], &CFG, &mut ChaCha8Rng::seed_from_u64(0)).is_err()
        );
    }

    #[test]
    fn training_tuple_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x1 = [0.0, 1.0, -1.0];
        let n = 100_000;
        let mut t_sum = 0.0;
        let mut sums = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let tup = sample_training_tuple(&x1, &CFG, &mut rng).unwrap();
            t_sum += tup.t;
            for i in 0..3 {
                sums[i] += tup.x0[i];
                sq[i] += tup.x0[i] * tup.x0[i];
            }
        }
        let nf = n as f64;
        assert!((0.49..=0.51).contains(&(t_sum / nf)));
        for i in 0..3 {
            let mean = sums[i] / nf;
            let var = sq[i] / nf - mean * mean;
            assert!((-0.02..=0.02).contains(&mean), "mean {mean}");
            assert!((0.95..=1.05).contains(&var), "var {var}");
        }
    }

    #[test]
    fn stratified_times_cover_every_stratum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 7, 32] {
            let mut times = stratified_times(n, &mut rng);
            times.sort_by(f64::total_cmp);
            for (i, t) in times.iter().enumerate() {
                assert!(*t >= i as f64 / n as f64 && *t < (i + 1) as f64 / n as f64);
            }
        }
        let mean: f64 = (0..20_000)
            .map(|_| stratified_times(3, &mut rng)[0])
            .sum::<f64>()
            / 20_000.0;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn tuple_at_given_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tuple = training_tuple_at(&[1.0, 2.0], 0.25, &CFG, &mut rng).unwrap();
        assert_eq!(tuple.t, 0.25);
        assert_eq!(
            tuple.x_t,
            psi_t(&tuple.x0, &[1.0, 2.0], 0.25, &CFG).unwrap()
        );
        assert!(training_tuple_at(&[1.0], 1.5, &CFG, &mut rng).is_err());
    }
}
