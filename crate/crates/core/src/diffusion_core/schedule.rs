use ndarray::{Array, Dimension, Zip};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::rng::Rng;

/// Variance schedule of the forward process.
///
/// Arrays are indexed by timestep directly and have length `T + 1`; entry 0
/// holds the `t = 0` convention (`β_0 = 0`, `ᾱ_0 = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Linearly spaced β over `T` steps.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return arg_err("schedule needs at least one step");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return arg_err(format!("β range [{beta_start}, {beta_end}] must satisfy 0 < start ≤ end < 1"));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    /// Build from explicit `β_1..β_T`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return arg_err("schedule needs at least one step");
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return arg_err(format!("β = {b} outside (0, 1)"));
        }
        let steps = betas.len();
        let mut beta = Vec::with_capacity(steps + 1);
        beta.push(0.0);
        beta.extend(betas);
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            steps,
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return arg_err(format!("timestep {t} outside [0, {}]", self.steps));
        }
        Ok(())
    }

    fn check_positive_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return arg_err(format!("timestep {t} outside [1, {}]", self.steps));
        }
        Ok(())
    }
}

fn same_shape<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`. `t = 0` returns `x0`.
pub fn forward_sample<D: Dimension>(
    x0: &Array<f64, D>,
    t: usize,
    eps: &Array<f64, D>,
    schedule: &NoiseSchedule,
) -> Result<Array<f64, D>> {
    schedule.check_t(t)?;
    same_shape(x0, eps)?;
    if t == 0 {
        return Ok(x0.clone());
    }
    let ab = schedule.alpha_bar[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
}

/// One forward transition with caller-supplied standard normal noise:
/// `x_t = √(1−β_t)·x_{t−1} + √β_t·noise`.
pub fn forward_step_with_noise<D: Dimension>(
    x_prev: &Array<f64, D>,
    t: usize,
    noise: &Array<f64, D>,
    schedule: &NoiseSchedule,
) -> Result<Array<f64, D>> {
    schedule.check_positive_t(t)?;
    same_shape(x_prev, noise)?;
    let b = schedule.beta[t];
    let (a, s) = ((1.0 - b).sqrt(), b.sqrt());
    Ok(Zip::from(x_prev).and(noise).map_collect(|&x, &n| a * x + s * n))
}

/// One forward transition, a sample of `N(√(1−β_t)·x_{t−1}, β_t·I)`.
pub fn forward_step<D: Dimension>(
    x_prev: &Array<f64, D>,
    t: usize,
    rng: &mut Rng,
    schedule: &NoiseSchedule,
) -> Result<Array<f64, D>> {
    let noise = standard_normal(x_prev.raw_dim(), rng);
    forward_step_with_noise(x_prev, t, &noise, schedule)
}

/// Standard normal array, filled in logical (row-major) order.
pub fn standard_normal<D: Dimension>(dim: D, rng: &mut Rng) -> Array<f64, D> {
    Array::from_shape_simple_fn(dim, || StandardNormal.sample(rng))
}

/// `x̃0 = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`; identity at `t = 0`.
pub fn predict_x0<D: Dimension>(
    x_t: &Array<f64, D>,
    eps_hat: &Array<f64, D>,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Array<f64, D>> {
    schedule.check_t(t)?;
    same_shape(x_t, eps_hat)?;
    if t == 0 {
        return Ok(x_t.clone());
    }
    let ab = schedule.alpha_bar[t];
    if ab <= 0.0 {
        return Err(Error::InvalidArgument(format!("ᾱ_{t} = 0, cannot invert")));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(x_t).and(eps_hat).map_collect(|&x, &e| (x - b * e) / a))
}

/// Zero-noise jump `t → t_next` given a noise estimate.
pub fn deterministic_update<D: Dimension>(
    x_t: &Array<f64, D>,
    eps_hat: &Array<f64, D>,
    t: usize,
    t_next: usize,
    schedule: &NoiseSchedule,
) -> Result<Array<f64, D>> {
    if t_next >= t {
        return arg_err(format!("reverse step needs t_next < t, got {t} -> {t_next}"));
    }
    let x0 = predict_x0(x_t, eps_hat, t, schedule)?;
    if t_next == 0 {
        return Ok(x0);
    }
    let ab = schedule.alpha_bar[t_next];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(&x0).and(eps_hat).map_collect(|&x, &e| a * x + b * e))
}

/// Ancestral step `t → t−1`: `μ_θ + σ_t·noise` with
/// `μ_θ = (x_t − β_t/√(1−ᾱ_t)·ε̂) / √α_t`.
pub fn ancestral_update<D: Dimension>(
    x_t: &Array<f64, D>,
    eps_hat: &Array<f64, D>,
    t: usize,
    noise: &Array<f64, D>,
    schedule: &NoiseSchedule,
) -> Result<Array<f64, D>> {
    schedule.check_positive_t(t)?;
    same_shape(x_t, eps_hat)?;
    same_shape(x_t, noise)?;
    let coef = schedule.beta[t] / (1.0 - schedule.alpha_bar[t]).sqrt();
    let root_alpha = schedule.alpha[t].sqrt();
    let sigma = schedule.sigma[t];
    Ok(Zip::from(x_t)
        .and(eps_hat)
        .and(noise)
        .map_collect(|&x, &e, &n| (x - coef * e) / root_alpha + sigma * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::{arr1, Array1};

    #[test]
    fn two_step_product() {
        let s = NoiseSchedule::from_betas(vec![0.5, 0.5]).unwrap();
        assert_eq!(s.alpha_bar, vec![1.0, 0.5, 0.25]);
    }

    #[test]
    fn linear_schedule_properties() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        for t in 1..=1000 {
            assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
            assert!((s.alpha_bar[t] - s.alpha_bar[t - 1] * (1.0 - s.beta[t])).abs() < 1e-12);
            assert!((s.sigma[t].powi(2) - s.beta[t]).abs() < 1e-15);
        }
        // ᾱ_T by an independent log-sum.
        let log_sum: f64 = (0..1000).map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln()).sum();
        assert!((s.alpha_bar[1000] - log_sum.exp()).abs() < 1e-12);
        assert!(s.alpha_bar[1000] < 1e-4);
        assert_eq!(s.beta[1], 1e-4);
        assert!((s.beta[1000] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn forward_sample_special_cases() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let eps = arr1(&[0.3, -1.2, 2.0]);
        let zero = Array1::zeros(3);
        let xt = forward_sample(&zero, 40, &eps, &s).unwrap();
        let b = (1.0 - s.alpha_bar[40]).sqrt();
        for i in 0..3 {
            assert_eq!(xt[i], b * eps[i]);
        }
        let x0 = arr1(&[0.1, 0.2, 0.3]);
        assert_eq!(forward_sample(&x0, 0, &eps, &s).unwrap(), x0);
        assert!(forward_sample(&x0, 101, &eps, &s).is_err());
        assert!(forward_sample(&x0, 5, &Array1::zeros(2), &s).is_err());
    }

    #[test]
    fn forward_sample_monte_carlo_moments() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let (x0, t, n) = (0.7, 60, 10_000);
        let eps = standard_normal(ndarray::Ix1(n), &mut seeded(11));
        let xs = forward_sample(&Array1::from_elem(n, x0), t, &eps, &s).unwrap();
        let mean = xs.mean().unwrap();
        let sd = xs.std(1.0);
        let want_sd = (1.0 - s.alpha_bar[t]).sqrt();
        let se_mean = want_sd / (n as f64).sqrt();
        let se_sd = want_sd / (2.0 * n as f64).sqrt();
        assert!((mean - s.alpha_bar[t].sqrt() * x0).abs() < 3.0 * se_mean);
        assert!((sd - want_sd).abs() < 3.0 * se_sd);
    }

    #[test]
    fn forward_step_zero_noise_and_determinism() {
        let s = make_schedule(10, 1e-3, 0.05).unwrap();
        let x = arr1(&[1.0, -2.0]);
        let out = forward_step_with_noise(&x, 3, &Array1::zeros(2), &s).unwrap();
        assert_eq!(out, x.mapv(|v| (1.0 - s.beta[3]).sqrt() * v));
        let a = forward_step(&x, 3, &mut seeded(1), &s).unwrap();
        let b = forward_step(&x, 3, &mut seeded(1), &s).unwrap();
        assert_eq!(a, b);
        assert!(forward_step(&x, 0, &mut seeded(1), &s).is_err());
    }

    #[test]
    fn predict_x0_cases() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = arr1(&[0.25, -0.5, 0.9]);
        let eps = arr1(&[1.5, 0.1, -0.7]);
        let xt = forward_sample(&x0, 77, &eps, &s).unwrap();
        let back = predict_x0(&xt, &eps, 77, &s).unwrap();
        assert!((&back - &x0).iter().all(|d| d.abs() < 1e-12));
        let zero = Array1::zeros(3);
        assert_eq!(predict_x0(&xt, &zero, 77, &s).unwrap(), xt.mapv(|v| v / s.alpha_bar[77].sqrt()));
        assert_eq!(predict_x0(&xt, &eps, 0, &s).unwrap(), xt);
    }

    #[test]
    fn deterministic_update_follows_the_forward_trajectory() {
        let s = make_schedule(1000, 1e-4, 0.02).unwrap();
        let x0 = arr1(&[0.25, -0.5, 0.9]);
        let eps = arr1(&[1.5, 0.1, -0.7]);
        let xt = forward_sample(&x0, 250, &eps, &s).unwrap();
        let next = deterministic_update(&xt, &eps, 250, 200, &s).unwrap();
        let want = forward_sample(&x0, 200, &eps, &s).unwrap();
        assert!((&next - &want).iter().all(|d| d.abs() < 1e-12));
        let to_zero = deterministic_update(&xt, &eps, 250, 0, &s).unwrap();
        assert_eq!(to_zero, predict_x0(&xt, &eps, 250, &s).unwrap());
        assert!(deterministic_update(&xt, &eps, 200, 250, &s).is_err());
    }

    #[test]
    fn ancestral_update_without_noise_is_the_mean() {
        let s = make_schedule(50, 1e-3, 0.05).unwrap();
        let xt = arr1(&[0.4, -0.1]);
        let eps = arr1(&[0.2, 0.9]);
        let out = ancestral_update(&xt, &eps, 20, &Array1::zeros(2), &s).unwrap();
        for i in 0..2 {
            let mu = (xt[i] - s.beta[20] / (1.0 - s.alpha_bar[20]).sqrt() * eps[i]) / s.alpha[20].sqrt();
            assert_eq!(out[i], mu);
        }
    }
}
