//! Spiking and continuous activation functions with surrogate derivatives.
//!
//! Spike functions are thresholded step functions; training replaces their
//! derivative with symmetric boxcar ("car-box") windows centered on each
//! spiking point. Each spiking activation also exposes its *smoothed* form,
//! the primitive of the surrogate, which gradient checks differentiate
//! through so that finite differences and the backward pass see the same
//! function.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationVariant {
    /// Binary spikes in {0, 1}: fires where `y >= theta`.
    NonSignedSpike,
    /// Ternary spikes in {-1, 0, 1}: thresholds at `+theta` and `-theta`.
    SignedSpike,
    /// Continuous baseline, exact erf-based GELU.
    Gelu,
}

/// Activation function plus surrogate-gradient shape parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationKind {
    pub variant: ActivationVariant,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_width")]
    pub surrogate_width: f64,
    #[serde(default = "default_height")]
    pub surrogate_height: f64,
}

fn default_theta() -> f64 {
    1.0
}

fn default_width() -> f64 {
    0.5
}

fn default_height() -> f64 {
    1.0
}

impl ActivationKind {
    pub fn non_signed_spike() -> Self {
        ActivationKind {
            variant: ActivationVariant::NonSignedSpike,
            theta: default_theta(),
            surrogate_width: default_width(),
            surrogate_height: default_height(),
        }
    }

    pub fn signed_spike() -> Self {
        ActivationKind {
            variant: ActivationVariant::SignedSpike,
            ..Self::non_signed_spike()
        }
    }

    pub fn gelu() -> Self {
        ActivationKind {
            variant: ActivationVariant::Gelu,
            ..Self::non_signed_spike()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0) {
            return Err(Error::Config(format!(
                "activation theta must be positive, got {}",
                self.theta
            )));
        }
        if !(self.surrogate_width > 0.0) || !(self.surrogate_height > 0.0) {
            return Err(Error::Config(format!(
                "surrogate width/height must be positive, got {}/{}",
                self.surrogate_width, self.surrogate_height
            )));
        }
        Ok(())
    }

    pub fn is_spiking(&self) -> bool {
        !matches!(self.variant, ActivationVariant::Gelu)
    }

    #[inline]
    pub fn apply_scalar(&self, y: f64) -> f64 {
        match self.variant {
            ActivationVariant::NonSignedSpike => {
                if y >= self.theta {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationVariant::SignedSpike => {
                if y >= self.theta {
                    1.0
                } else if y <= -self.theta {
                    -1.0
                } else {
                    0.0
                }
            }
            ActivationVariant::Gelu => gelu(y),
        }
    }

    /// Derivative substituted for the spike function in the backward pass.
    /// For GELU this is the exact analytic derivative.
    #[inline]
    pub fn surrogate_scalar(&self, y: f64) -> f64 {
        let w = self.surrogate_width;
        let g = self.surrogate_height;
        match self.variant {
            ActivationVariant::NonSignedSpike => {
                if (y - self.theta).abs() < w {
                    g
                } else {
                    0.0
                }
            }
            ActivationVariant::SignedSpike => {
                if (y - self.theta).abs() < w || (y + self.theta).abs() < w {
                    g
                } else {
                    0.0
                }
            }
            ActivationVariant::Gelu => gelu_derivative(y),
        }
    }

    /// Continuous stand-in whose exact derivative is [`surrogate_scalar`]:
    /// the spike step is replaced by the primitive ramp of its boxcar.
    /// Gradient checks run the forward pass through this.
    #[inline]
    pub fn smoothed_scalar(&self, y: f64) -> f64 {
        let w = self.surrogate_width;
        let g = self.surrogate_height;
        let ramp = |z: f64| (g * (z + w)).clamp(0.0, 2.0 * g * w);
        match self.variant {
            ActivationVariant::NonSignedSpike => ramp(y - self.theta),
            ActivationVariant::SignedSpike => {
                ramp(y - self.theta) + ramp(y + self.theta) - 2.0 * g * w
            }
            ActivationVariant::Gelu => gelu(y),
        }
    }
}

/// Element-wise activation. NaN inputs are rejected.
pub fn activate(kind: &ActivationKind, y: &[f64]) -> Result<Vec<f64>> {
    check_finite(y)?;
    Ok(y.iter().map(|&v| kind.apply_scalar(v)).collect())
}

/// Element-wise surrogate derivative. NaN inputs are rejected.
pub fn surrogate_derivative(kind: &ActivationKind, y: &[f64]) -> Result<Vec<f64>> {
    check_finite(y)?;
    Ok(y.iter().map(|&v| kind.surrogate_scalar(v)).collect())
}

fn check_finite(y: &[f64]) -> Result<()> {
    for (idx, v) in y.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::NonFinite(format!(
                "activation input contains NaN at index {idx}"
            )));
        }
    }
    Ok(())
}

const FRAC_1_SQRT_2PI: f64 = 0.3989422804014327;

/// Exact Gaussian-error-linear unit: `y * Phi(y)`.
#[inline]
pub fn gelu(y: f64) -> f64 {
    y * normal_cdf(y)
}

/// Analytic GELU derivative: `Phi(y) + y * phi(y)`.
#[inline]
pub fn gelu_derivative(y: f64) -> f64 {
    normal_cdf(y) + y * FRAC_1_SQRT_2PI * (-0.5 * y * y).exp()
}

#[inline]
fn normal_cdf(y: f64) -> f64 {
    0.5 * (1.0 + erf(y / std::f64::consts::SQRT_2))
}

/// Error function to double precision: Maclaurin series on |x| < 2, the
/// standard erfc continued fraction (evaluated with modified Lentz) beyond.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    let ax = x.abs();
    if ax < 2.0 {
        erf_series(x)
    } else if ax < 6.5 {
        let tail = erfc_cf(ax);
        if x > 0.0 {
            1.0 - tail
        } else {
            tail - 1.0
        }
    } else {
        // erfc(6.5) ~ 3e-20, below one ulp of 1
        1.0f64.copysign(x)
    }
}

fn erf_series(x: f64) -> f64 {
    // erf(x) = 2/sqrt(pi) * sum_k (-1)^k x^(2k+1) / (k! (2k+1))
    let two_over_sqrt_pi = 2.0 / std::f64::consts::PI.sqrt();
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut k = 0.0f64;
    loop {
        k += 1.0;
        term *= -x2 / k;
        let contrib = term / (2.0 * k + 1.0);
        sum += contrib;
        if contrib.abs() < 1e-18 * sum.abs().max(1e-30) {
            break;
        }
    }
    two_over_sqrt_pi * sum
}

fn erfc_cf(x: f64) -> f64 {
    // sqrt(pi) e^(x^2) erfc(x) = 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let tiny = 1e-300;
    let mut f = tiny;
    let mut c = f;
    let mut d = 0.0f64;
    let mut j = 0usize;
    loop {
        let (a, b) = if j == 0 { (1.0, x) } else { (j as f64 / 2.0, x) };
        d = b + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-17 {
            break;
        }
        j += 1;
        assert!(j < 500, "erfc continued fraction failed to converge");
    }
    f * (-x * x).exp() / std::f64::consts::PI.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn non_signed_threshold() {
        let kind = ActivationKind::non_signed_spike();
        let out = activate(&kind, &[0.5, 1.0, 2.0]).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn signed_threshold() {
        let kind = ActivationKind::signed_spike();
        let out = activate(&kind, &[-2.0, -0.5, 0.5, 2.0]).unwrap();
        assert_eq!(out, vec![-1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn gelu_at_zero() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu_derivative(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn nan_input_rejected() {
        let kind = ActivationKind::gelu();
        assert!(matches!(
            activate(&kind, &[0.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(surrogate_derivative(&kind, &[f64::NAN]).is_err());
    }

    #[test]
    fn surrogate_inside_box_positive() {
        let kind = ActivationKind::non_signed_spike();
        let out = surrogate_derivative(&kind, &[1.0]).unwrap();
        assert!(out[0] > 0.0);
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn signed_dead_zone_between_boxes() {
        let kind = ActivationKind::signed_spike();
        let out = surrogate_derivative(&kind, &[0.0]).unwrap();
        assert_eq!(out[0], 0.0);
    }

    #[test]
    fn signed_spike_is_odd() {
        let kind = ActivationKind::signed_spike();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let y = 6.0 * (rng.random::<f64>() - 0.5);
            if (y.abs() - kind.theta).abs() < 1e-12 {
                continue;
            }
            assert_eq!(kind.apply_scalar(-y), -kind.apply_scalar(y));
        }
    }

    #[test]
    fn surrogate_support_and_integral() {
        let kind = ActivationKind::signed_spike();
        let w = kind.surrogate_width;
        let g = kind.surrogate_height;
        // zero outside the union of boxes
        for y in [-3.0, -1.6, 0.0, 0.49, 1.51, 3.0] {
            assert_eq!(kind.surrogate_scalar(y), 0.0, "y={y}");
        }
        // midpoint Riemann sum over each box comes out to 2*w*g
        for center in [kind.theta, -kind.theta] {
            let steps = 100_000;
            let dx = 2.0 * w / steps as f64;
            let integral: f64 = (0..steps)
                .map(|i| kind.surrogate_scalar(center - w + (i as f64 + 0.5) * dx) * dx)
                .sum();
            assert!((integral - 2.0 * w * g).abs() < 1e-6);
        }
    }

    #[test]
    fn smoothed_matches_spike_asymptotes() {
        let ns = ActivationKind::non_signed_spike();
        assert!((ns.smoothed_scalar(-10.0)).abs() < 1e-15);
        assert!((ns.smoothed_scalar(10.0) - 1.0).abs() < 1e-15);

        let sg = ActivationKind::signed_spike();
        assert!((sg.smoothed_scalar(-10.0) + 1.0).abs() < 1e-15);
        assert!((sg.smoothed_scalar(0.0)).abs() < 1e-15);
        assert!((sg.smoothed_scalar(10.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn smoothed_derivative_is_surrogate() {
        let h = 1e-6;
        for kind in [
            ActivationKind::non_signed_spike(),
            ActivationKind::signed_spike(),
        ] {
            for i in 0..400 {
                let y = -2.0 + i as f64 * 0.01;
                // skip kink neighborhoods
                let near_kink = [kind.theta, -kind.theta].iter().any(|c| {
                    ((y - c).abs() - kind.surrogate_width).abs() < 10.0 * h
                });
                if near_kink {
                    continue;
                }
                let fd = (kind.smoothed_scalar(y + h) - kind.smoothed_scalar(y - h)) / (2.0 * h);
                assert!(
                    (fd - kind.surrogate_scalar(y)).abs() < 1e-8,
                    "kind={:?} y={y}",
                    kind.variant
                );
            }
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let h = 1e-5;
        for _ in 0..1000 {
            let y = 10.0 * (rng.random::<f64>() - 0.5);
            let fd = (gelu(y + h) - gelu(y - h)) / (2.0 * h);
            assert!(
                (fd - gelu_derivative(y)).abs() < 1e-6,
                "y={y} fd={fd} analytic={}",
                gelu_derivative(y)
            );
        }
    }

    #[test]
    fn erf_reference_values() {
        // published double-precision values
        let cases = [
            (0.0, 0.0),
            (0.5, 0.5204998778130465),
            (1.0, 0.8427007929497149),
            (2.0, 0.9953222650189527),
            (2.5, 0.999593047982555),
            (3.0, 0.9999779095030014),
            (4.0, 0.9999999845827421),
        ];
        for (x, want) in cases {
            assert!((erf(x) - want).abs() < 1e-14, "erf({x})");
            assert!((erf(-x) + want).abs() < 1e-14, "erf(-{x})");
        }
    }
}
