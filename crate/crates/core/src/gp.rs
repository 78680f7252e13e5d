//! Exact Gaussian-process regression with a Matérn 5/2 kernel.
//!
//! Hyperparameters are fixed (no marginal-likelihood fitting). Labels are
//! optionally standardized before fitting; predictions come back in label
//! units.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GpError {
    #[error("a Gaussian process needs at least one training example")]
    Empty,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{inputs} inputs but {labels} labels")]
    LengthMismatch { inputs: usize, labels: usize },
    #[error("non-finite value in training data")]
    NonFinite,
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(&'static str),
    #[error("kernel matrix not positive definite even with jitter {jitter}")]
    NotPositiveDefinite { jitter: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams<T> {
    pub signal_variance: T,
    pub length_scale: T,
    pub noise_variance: T,
    pub standardize_labels: bool,
}

impl<T: Scalar> Default for GpHyperparams<T> {
    fn default() -> Self {
        Self {
            signal_variance: T::one(),
            length_scale: T::one(),
            noise_variance: T::lit(1e-2),
            standardize_labels: true,
        }
    }
}

impl<T: Scalar> GpHyperparams<T> {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn validate(&self) -> Result<(), GpError> {
        if !(self.signal_variance > T::zero()) {
            return Err(GpError::InvalidHyperparameter("signal variance must be positive"));
        }
        if !(self.length_scale > T::zero()) {
            return Err(GpError::InvalidHyperparameter("length scale must be positive"));
        }
        if !(self.noise_variance >= T::zero()) {
            return Err(GpError::InvalidHyperparameter("noise variance must be non-negative"));
        }
        Ok(())
    }
}

/// `σ²·(1 + √5·r/ℓ + 5r²/(3ℓ²))·exp(−√5·r/ℓ)` with `r = ‖x − y‖₂`.
pub fn matern52<T: Scalar>(x: &[T], y: &[T], signal_variance: T, length_scale: T) -> Result<T, GpError> {
    if x.len() != y.len() {
        return Err(GpError::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let r = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<T>()
        .sqrt();
    Ok(matern52_radial(r, signal_variance, length_scale))
}

/// The Matérn 5/2 profile as a function of distance.
pub fn matern52_radial<T: Scalar>(r: T, signal_variance: T, length_scale: T) -> T {
    let s = T::lit(5.0).sqrt() * r / length_scale;
    signal_variance * (T::one() + s + s * s / T::lit(3.0)) * (-s).exp()
}

/// Jitter schedule added to the diagonal when the factorization fails.
const JITTER_STEPS: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// A fitted posterior. Immutable; refitting builds a new model.
#[derive(Clone, Debug)]
pub struct GpModel<T> {
    inputs: Vec<Vec<T>>,
    hyper: GpHyperparams<T>,
    label_mean: T,
    label_scale: T,
    /// Row-major lower Cholesky factor of `K + (σ_n² + jitter)·I`.
    chol: Vec<T>,
    /// `(K + σ_n²·I)⁻¹ · y_standardized`
    alpha: Vec<T>,
    jitter: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction<T> {
    pub mean: T,
    pub variance: T,
}

impl<T: Scalar> GpModel<T> {
    pub fn fit(inputs: Vec<Vec<T>>, labels: &[T], hyper: GpHyperparams<T>) -> Result<Self, GpError> {
        hyper.validate()?;
        let n = inputs.len();
        if n == 0 {
            return Err(GpError::Empty);
        }
        if labels.len() != n {
            return Err(GpError::LengthMismatch {
                inputs: n,
                labels: labels.len(),
            });
        }
        let dim = inputs[0].len();
        for x in &inputs {
            if x.len() != dim {
                return Err(GpError::DimensionMismatch {
                    expected: dim,
                    got: x.len(),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(GpError::NonFinite);
            }
        }
        if labels.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NonFinite);
        }

        let (label_mean, label_scale) = if hyper.standardize_labels {
            standardization(labels)
        } else {
            (T::zero(), T::one())
        };
        let y: Vec<T> = labels.iter().map(|&l| (l - label_mean) / label_scale).collect();

        let mut kernel = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..=i {
                let k = matern52(&inputs[i], &inputs[j], hyper.signal_variance, hyper.length_scale)?;
                kernel[i * n + j] = k;
                kernel[j * n + i] = k;
            }
        }

        let mut last_jitter = 0.0;
        for step in JITTER_STEPS {
            last_jitter = step;
            let jitter = T::lit(step);
            let mut m = kernel.clone();
            for i in 0..n {
                m[i * n + i] += hyper.noise_variance + jitter;
            }
            if let Some(chol) = cholesky(m, n) {
                let alpha = cholesky_solve(&chol, n, &y);
                return Ok(Self {
                    inputs,
                    hyper,
                    label_mean,
                    label_scale,
                    chol,
                    alpha,
                    jitter,
                });
            }
        }
        Err(GpError::NotPositiveDefinite { jitter: last_jitter })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn hyperparams(&self) -> &GpHyperparams<T> {
        &self.hyper
    }

    /// Diagonal jitter that was needed for the factorization.
    pub fn jitter(&self) -> T {
        self.jitter
    }

    /// Prior mean in label units (the label mean when standardizing).
    pub fn prior_mean(&self) -> T {
        self.label_mean
    }

    /// Prior variance in label units.
    pub fn prior_variance(&self) -> T {
        self.label_scale * self.label_scale * self.hyper.signal_variance
    }

    /// Posterior mean and latent-function variance at `x`.
    pub fn predict(&self, x: &[T]) -> Result<Prediction<T>, GpError> {
        if x.len() != self.dim() {
            return Err(GpError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let n = self.len();
        let k_star = self
            .inputs
            .iter()
            .map(|xi| matern52(xi, x, self.hyper.signal_variance, self.hyper.length_scale))
            .collect::<Result<Vec<T>, _>>()?;
        let mean = k_star.iter().zip(&self.alpha).map(|(&k, &a)| k * a).sum::<T>();
        let v = forward_substitute(&self.chol, n, &k_star);
        let explained = v.iter().map(|&vi| vi * vi).sum::<T>();
        let latent = (self.hyper.signal_variance - explained).max(T::zero());
        Ok(Prediction {
            mean: self.label_mean + self.label_scale * mean,
            variance: self.label_scale * self.label_scale * latent,
        })
    }
}

/// Mean and population standard deviation; a degenerate spread maps to 1.
fn standardization<T: Scalar>(labels: &[T]) -> (T, T) {
    let n = T::from_count(labels.len() as u64);
    let mean = labels.iter().copied().sum::<T>() / n;
    let var = labels.iter().map(|&l| (l - mean) * (l - mean)).sum::<T>() / n;
    let sd = var.sqrt();
    if sd > T::epsilon().sqrt() {
        (mean, sd)
    } else {
        (mean, T::one())
    }
}

/// In-place lower Cholesky factor; `None` if a pivot is not positive.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn cholesky<T: Scalar>(mut m: Vec<T>, n: usize) -> Option<Vec<T>> {
    for j in 0..n {
        let mut d = m[j * n + j];
        for k in 0..j {
            d -= m[j * n + k] * m[j * n + k];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        m[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = m[i * n + j];
            for k in 0..j {
                s -= m[i * n + k] * m[j * n + k];
            }
            m[i * n + j] = s / d;
        }
        for i in 0..j {
            m[i * n + j] = T::zero();
        }
    }
    Some(m)
}

/// Solves `L·v = b`.
fn forward_substitute<T: Scalar>(l: &[T], n: usize, b: &[T]) -> Vec<T> {
    let mut v = vec![T::zero(); n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * v[k];
        }
        v[i] = s / l[i * n + i];
    }
    v
}

/// Solves `L·Lᵀ·x = b`.
fn cholesky_solve<T: Scalar>(l: &[T], n: usize, b: &[T]) -> Vec<T> {
    let mut x = forward_substitute(l, n, b);
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(noise: f64) -> GpHyperparams<f64> {
        GpHyperparams {
            noise_variance: noise,
            standardize_labels: false,
            ..Default::default()
        }
    }

    #[test]
    fn kernel_at_zero_distance_is_signal_variance() {
        assert_eq!(matern52(&[0.3, -1.0], &[0.3, -1.0], 2.5, 0.7).unwrap(), 2.5);
    }

    #[test]
    fn kernel_spot_values() {
        // (1 + √5 + 5/3)·e^{−√5}
        let k = matern52(&[0.0f64], &[1.0], 1.0, 1.0).unwrap();
        assert!((k - 0.523_994_108_831_820_3).abs() < 1e-12);
        let k = matern52(&[0.0f64, 0.0], &[1.2, 1.6], 2.0, 1.5).unwrap();
        assert!((k - 0.704_446_358_539_383_4).abs() < 1e-12);
        let k32 = matern52(&[0.0f32], &[1.0], 1.0, 1.0).unwrap();
        assert!((k32 - 0.523_994_1).abs() < 1e-6);
    }

    #[test]
    fn kernel_decays_monotonically() {
        let mut prev = f64::INFINITY;
        for i in 0..200 {
            let k = matern52_radial(i as f64 * 0.1, 1.0, 1.0);
            assert!(k < prev);
            prev = k;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn kernel_dimension_mismatch() {
        assert_eq!(
            matern52(&[0.0f64], &[0.0, 1.0], 1.0, 1.0),
            Err(GpError::DimensionMismatch { expected: 1, got: 2 })
        );
    }

    #[test]
    fn single_example_interpolates() {
        let gp = GpModel::<f64>::fit(vec![vec![0.4, 2.0]], &[0.73], raw(0.0)).unwrap();
        let p = gp.predict(&[0.4, 2.0]).unwrap();
        assert!((p.mean - 0.73).abs() < 1e-10);
        assert!(p.variance.abs() < 1e-10);
        let std = GpModel::<f64>::fit(vec![vec![0.4]], &[0.73], GpHyperparams::default()).unwrap();
        assert!((std.predict(&[0.4]).unwrap().mean - 0.73).abs() < 1e-12);
    }

    #[test]
    fn conflicting_duplicates_predict_mean() {
        let gp = GpModel::<f64>::fit(vec![vec![1.0], vec![1.0]], &[0.2, 0.6], GpHyperparams::default()).unwrap();
        assert!((gp.predict(&[1.0]).unwrap().mean - 0.4).abs() < 1e-12);
    }

    #[test]
    fn far_field_reverts_to_prior() {
        let gp = GpModel::<f64>::fit(vec![vec![0.0], vec![1.0]], &[0.3, 0.9], raw(1e-2)).unwrap();
        let p = gp.predict(&[1e3]).unwrap();
        assert!(p.mean.abs() < 1e-12);
        assert!((p.variance - 1.0).abs() < 1e-12);
        let gp = GpModel::<f64>::fit(vec![vec![0.0], vec![1.0]], &[0.3, 0.9], GpHyperparams::default()).unwrap();
        let p = gp.predict(&[1e3]).unwrap();
        assert!((p.mean - 0.6).abs() < 1e-12);
        assert!((p.variance - gp.prior_variance()).abs() < 1e-12);
    }

    #[test]
    fn two_point_reference_values() {
        // dense-solve values computed offline with numpy
        let gp = GpModel::<f64>::fit(vec![vec![0.0], vec![1.0]], &[0.0, 1.0], raw(0.01)).unwrap();
        let p = gp.predict(&[0.5]).unwrap();
        assert!((p.mean - 0.540_190_563_736_365_9).abs() < 1e-12);
        assert!((p.variance - 0.104_743_105_234_993_42).abs() < 1e-12);
        let gp = GpModel::<f64>::fit(vec![vec![0.0], vec![1.0]], &[0.0, 1.0], GpHyperparams::default()).unwrap();
        let p = gp.predict(&[0.5]).unwrap();
        assert!((p.mean - 0.5).abs() < 1e-12);
        assert!((p.variance - 0.026_185_776_308_748_354).abs() < 1e-12);
    }

    #[test]
    fn singular_kernel_gets_jitter() {
        let gp = GpModel::<f64>::fit(vec![vec![2.0]; 3], &[0.1, 0.2, 0.3], raw(0.0)).unwrap();
        assert!(gp.jitter() > 0.0);
        assert!(gp.jitter() <= 1e-4);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(GpModel::<f64>::fit(vec![], &[], raw(0.0)).unwrap_err(), GpError::Empty);
        assert_eq!(
            GpModel::<f64>::fit(vec![vec![f64::NAN]], &[0.1], raw(0.0)).unwrap_err(),
            GpError::NonFinite
        );
        assert_eq!(
            GpModel::<f64>::fit(vec![vec![0.0]], &[f64::INFINITY], raw(0.0)).unwrap_err(),
            GpError::NonFinite
        );
        assert!(matches!(
            GpModel::<f64>::fit(vec![vec![0.0], vec![0.0, 1.0]], &[0.1, 0.2], raw(0.0)),
            Err(GpError::DimensionMismatch { .. })
        ));
        let gp = GpModel::<f64>::fit(vec![vec![0.0]], &[0.1], raw(0.0)).unwrap();
        assert!(gp.predict(&[0.0, 1.0]).is_err());
        let bad = GpHyperparams { length_scale: 0.0, ..raw(0.0) };
        assert!(GpModel::<f64>::fit(vec![vec![0.0]], &[0.1], bad).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let hyper = GpHyperparams::<f32>::default();
        let gp = GpModel::<f32>::fit(vec![vec![0.0f32], vec![1.0]], &[0.0, 1.0], hyper).unwrap();
        let p = gp.predict(&[0.5]).unwrap();
        assert!((p.mean - 0.5).abs() < 1e-5);
        assert!((p.variance - 0.026_185_78).abs() < 1e-5);
    }
}
