//! Gaussian diffusion of normalized Cα coordinates.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Scalar;
use crate::schedules::NoiseSchedule;

/// `n × 3` matrix of normalized coordinates.
pub type CoordState<S> = Mat<S>;

pub fn standard_normal<S: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat<S> {
    let data = (0..rows * cols).map(|_| S::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Mat::from_vec(rows, cols, data)
}

/// `x_t = √(1 − β_t)·x_prev + √β_t·ε`.
pub fn forward_step_sample<S: Scalar, R: Rng + ?Sized>(x_prev: &CoordState<S>, beta_t: S, rng: &mut R) -> CoordState<S> {
    let eps = standard_normal::<S, _>(x_prev.rows(), x_prev.cols(), rng);
    if beta_t == S::zero() {
        return x_prev.clone();
    }
    let keep = (S::one() - beta_t).sqrt();
    let noise = beta_t.sqrt();
    let data = x_prev.as_slice().iter().zip(eps.as_slice()).map(|(&x, &e)| keep * x + noise * e).collect();
    Mat::from_vec(x_prev.rows(), x_prev.cols(), data)
}

/// `x_t = √ᾱ_t·x0 + √(1 − ᾱ_t)·ε`; returns `(x_t, ε)`.
pub fn forward_marginal_sample<S: Scalar, R: Rng + ?Sized>(
    x0: &CoordState<S>,
    alpha_bar_t: S,
    rng: &mut R,
) -> (CoordState<S>, Mat<S>) {
    let eps = standard_normal::<S, _>(x0.rows(), x0.cols(), rng);
    if alpha_bar_t == S::one() {
        return (x0.clone(), eps);
    }
    let keep = alpha_bar_t.sqrt();
    let noise = (S::one() - alpha_bar_t).sqrt();
    let data = x0.as_slice().iter().zip(eps.as_slice()).map(|(&x, &e)| keep * x + noise * e).collect();
    (Mat::from_vec(x0.rows(), x0.cols(), data), eps)
}

/// Coefficients `(c0, ct)` of the posterior mean `c0·x0 + ct·x_t`.
pub fn posterior_coefficients<S: Scalar>(t: usize, sched: &NoiseSchedule<S>) -> (S, S) {
    if t == 1 {
        return (S::one(), S::zero());
    }
    let abar_prev = sched.alpha_bar(t - 1);
    let denom = sched.one_minus_alpha_bar(t);
    let c0 = abar_prev.sqrt() * sched.beta(t) / denom;
    let ct = sched.alpha(t).sqrt() * sched.one_minus_alpha_bar(t - 1) / denom;
    (c0, ct)
}

/// Posterior `q(x_{t−1} | x_t, x0)`: returns the mean and the scalar variance `β̃_t`.
/// At `t = 1` the mean is `x0` exactly and the variance is 0.
pub fn posterior_mean_variance<S: Scalar>(
    x_t: &CoordState<S>,
    x0: &CoordState<S>,
    t: usize,
    sched: &NoiseSchedule<S>,
) -> Result<(Mat<S>, S)> {
    if t == 0 || t > sched.steps() {
        return Err(Error::Contract(format!("step {t} outside 1..={}", sched.steps())));
    }
    if x_t.shape() != x0.shape() {
        return Err(Error::Contract(format!("shape mismatch {:?} vs {:?}", x_t.shape(), x0.shape())));
    }
    if t == 1 {
        return Ok((x0.clone(), S::zero()));
    }
    let (c0, ct) = posterior_coefficients(t, sched);
    let data = x0.as_slice().iter().zip(x_t.as_slice()).map(|(&a, &b)| c0 * a + ct * b).collect();
    Ok((Mat::from_vec(x0.rows(), x0.cols(), data), sched.beta_tilde(t)))
}

/// Squared Frobenius distance `‖x0 − x̂0‖²` (sum over residues and axes).
pub fn coordinate_loss<S: Scalar>(x0: &CoordState<S>, x0_hat: &CoordState<S>) -> Result<S> {
    if x0.shape() != x0_hat.shape() {
        return Err(Error::Contract(format!("shape mismatch {:?} vs {:?}", x0.shape(), x0_hat.shape())));
    }
    Ok(x0.as_slice().iter().zip(x0_hat.as_slice()).map(|(&a, &b)| (a - b) * (a - b)).sum())
}

/// Gradient of [`coordinate_loss`] with respect to `x0_hat`.
pub fn coordinate_loss_grad<S: Scalar>(x0: &CoordState<S>, x0_hat: &CoordState<S>) -> Mat<S> {
    let two = S::lit(2.0);
    let data = x0.as_slice().iter().zip(x0_hat.as_slice()).map(|(&a, &b)| two * (b - a)).collect();
    Mat::from_vec(x0.rows(), x0.cols(), data)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::schedules::build_sigmoid_schedule;

    #[test]
    fn zero_beta_is_identity() {
        let x = Mat::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.25, -0.125]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(forward_step_sample(&x, 0.0, &mut rng), x);
        assert_eq!(forward_marginal_sample(&x, 1.0, &mut rng).0, x);
    }

    #[test]
    fn forward_step_is_reproducible() {
        let x = Mat::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let a = forward_step_sample(&x, 0.3, &mut ChaCha8Rng::seed_from_u64(4));
        let b = forward_step_sample(&x, 0.3, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn single_step_variance() {
        let beta = 0.2;
        let x = Mat::zeros(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| forward_step_sample(&x, beta, &mut rng)[(0, 0)]).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - beta).abs() < 0.03 * beta, "var {var}");
    }

    #[test]
    fn posterior_limits() {
        let sched = build_sigmoid_schedule::<f64>(100, 1e-4, 0.05, 2.0).unwrap();
        let x0 = Mat::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let xt = Mat::from_vec(1, 3, vec![-1.0, 0.0, 4.0]);
        let (mu, var) = posterior_mean_variance(&xt, &x0, 1, &sched).unwrap();
        assert_eq!(mu, x0);
        assert_eq!(var, 0.0);

        let t = 37;
        let (mu, _) = posterior_mean_variance(&x0, &x0, t, &sched).unwrap();
        let abar = sched.alpha_bar(t);
        let abar_prev = sched.alpha_bar(t - 1);
        let c = (abar_prev.sqrt() * sched.beta(t) + sched.alpha(t).sqrt() * (1.0 - abar_prev)) / (1.0 - abar);
        for j in 0..3 {
            assert!((mu[(0, j)] - c * x0[(0, j)]).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_values() {
        let a = Mat::from_vec(1, 3, vec![0.0, 0.0, 0.0]);
        let b = Mat::from_vec(1, 3, vec![1.0, 2.0, 2.0]);
        assert_eq!(coordinate_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(coordinate_loss(&a, &b).unwrap(), 9.0);
        assert!(matches!(coordinate_loss(&a, &Mat::zeros(2, 3)), Err(Error::Contract(_))));
    }
}
