//! Laplace obfuscation of shared-layer updates.
//!
//! A client whose update has been clipped to L1 norm at most `C` adds
//! i.i.d. Laplace(0, 2C/ε) noise to every coordinate before sending it to
//! the server. Smaller ε means stronger privacy and more noise; ε applies
//! per round message (no cross-round budget composition). Noise can be
//! switched off entirely for the non-private baselines, in which case
//! updates pass through bitwise unchanged.

use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum PrivacyError {
    NonPositiveScale { got: f64 },
    NonPositiveEpsilon { got: f64 },
    NonPositiveClip { got: f64 },
    /// The mechanism's clip value must equal the optimizer's.
    ClipMismatch { optimizer: f64, mechanism: f64 },
}

impl fmt::Display for PrivacyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrivacyError::NonPositiveScale { got } => {
                write!(f, "laplace scale must be positive, got {got}")
            }
            PrivacyError::NonPositiveEpsilon { got } => {
                write!(f, "privacy budget must be positive, got {got}")
            }
            PrivacyError::NonPositiveClip { got } => {
                write!(f, "clip value must be positive, got {got}")
            }
            PrivacyError::ClipMismatch { optimizer, mechanism } => write!(
                f,
                "mechanism clip {mechanism} does not match optimizer clip {optimizer}"
            ),
        }
    }
}

impl core::error::Error for PrivacyError {}

/// Privacy budget: a finite ε, or off for the non-private baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Epsilon {
    Off,
    Budget(f64),
}

impl Epsilon {
    pub fn is_off(&self) -> bool {
        matches!(self, Epsilon::Off)
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Epsilon::Off => write!(f, "off"),
            Epsilon::Budget(e) => write!(f, "{e}"),
        }
    }
}

/// Budget and clip for the obfuscation mechanism. The clip must equal the
/// optimizer's clip value: the mechanism's guarantee holds only for
/// updates whose L1 norm is actually bounded by `clip`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpConfig {
    pub epsilon: Epsilon,
    pub clip: f64,
}

impl DpConfig {
    pub fn off(clip: f64) -> Self {
        DpConfig { epsilon: Epsilon::Off, clip }
    }

    pub fn validate(&self, optimizer_clip: f64) -> Result<(), PrivacyError> {
        if self.clip <= 0.0 {
            return Err(PrivacyError::NonPositiveClip { got: self.clip });
        }
        if self.clip != optimizer_clip {
            return Err(PrivacyError::ClipMismatch {
                optimizer: optimizer_clip,
                mechanism: self.clip,
            });
        }
        if let Epsilon::Budget(e) = self.epsilon {
            if e <= 0.0 {
                return Err(PrivacyError::NonPositiveEpsilon { got: e });
            }
        }
        Ok(())
    }

    /// Laplace scale `b = 2C/ε`; `None` when noise is off.
    pub fn scale(&self) -> Option<f64> {
        match self.epsilon {
            Epsilon::Off => None,
            Epsilon::Budget(e) => Some(2.0 * self.clip / e),
        }
    }
}

/// One Laplace(0, b) draw by inverse CDF:
/// `x = -b · sign(u) · ln(1 - 2|u|)` for `u` uniform in `(-1/2, 1/2)`.
pub fn laplace_sample(b: f64, rng: &mut ChaCha12Rng) -> Result<f64, PrivacyError> {
    if b <= 0.0 {
        return Err(PrivacyError::NonPositiveScale { got: b });
    }
    // random::<f64>() is uniform in [0, 1); shift to [-1/2, 1/2) and
    // reject the single point where the log diverges.
    let u = loop {
        let u = rng.random::<f64>() - 0.5;
        if 1.0 - 2.0 * libm::fabs(u) > 0.0 {
            break u;
        }
    };
    let sign = if u >= 0.0 { 1.0 } else { -1.0 };
    Ok(-b * sign * libm::log(1.0 - 2.0 * libm::fabs(u)))
}

/// Obfuscate a clipped shared-layer update: add elementwise i.i.d.
/// Laplace(0, 2C/ε) noise, or return the update bitwise unchanged when
/// the budget is off. Returns the noisy update and the L1 norm of the
/// injected noise.
pub fn noise_update(
    delta_phi: &[f64],
    cfg: &DpConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(Vec<f64>, f64), PrivacyError> {
    match cfg.scale() {
        None => Ok((delta_phi.to_vec(), 0.0)),
        Some(b) => {
            if b <= 0.0 {
                return Err(PrivacyError::NonPositiveScale { got: b });
            }
            let mut out = Vec::with_capacity(delta_phi.len());
            let mut noise_l1 = 0.0;
            for d in delta_phi {
                let xi = laplace_sample(b, rng)?;
                noise_l1 += libm::fabs(xi);
                out.push(d + xi);
            }
            Ok((out, noise_l1))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, StreamDomain};

    #[test]
    fn scale_follows_two_c_over_epsilon() {
        let cfg = DpConfig { epsilon: Epsilon::Budget(10.0), clip: 200.0 };
        assert_eq!(cfg.scale(), Some(40.0));
        assert_eq!(DpConfig::off(200.0).scale(), None);
    }

    #[test]
    fn validate_rejects_bad_configs() {
        assert!(DpConfig { epsilon: Epsilon::Budget(1.0), clip: 200.0 }.validate(200.0).is_ok());
        assert!(matches!(
            DpConfig { epsilon: Epsilon::Budget(1.0), clip: 100.0 }.validate(200.0),
            Err(PrivacyError::ClipMismatch { .. })
        ));
        assert!(matches!(
            DpConfig { epsilon: Epsilon::Budget(0.0), clip: 200.0 }.validate(200.0),
            Err(PrivacyError::NonPositiveEpsilon { .. })
        ));
        assert!(matches!(
            DpConfig { epsilon: Epsilon::Budget(1.0), clip: 0.0 }.validate(0.0),
            Err(PrivacyError::NonPositiveClip { .. })
        ));
    }

    #[test]
    fn laplace_rejects_non_positive_scale() {
        let mut rng = substream(1, StreamDomain::Noise, 0, 0);
        assert!(laplace_sample(0.0, &mut rng).is_err());
        assert!(laplace_sample(-1.0, &mut rng).is_err());
    }

    #[test]
    fn laplace_median_is_zero_by_symmetry() {
        // u = 0 maps to exactly 0; empirically the sign split is even.
        let mut rng = substream(2, StreamDomain::Noise, 0, 0);
        let n = 100_000;
        let mut positive = 0usize;
        for _ in 0..n {
            if laplace_sample(1.0, &mut rng).unwrap() > 0.0 {
                positive += 1;
            }
        }
        let frac = positive as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "sign fraction {frac}");
    }

    #[test]
    fn laplace_moments_match_analytic_values() {
        // Laplace(0, b): mean 0, variance 2b².
        let b = 40.0;
        let mut rng = substream(3, StreamDomain::Noise, 0, 0);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x = laplace_sample(b, &mut rng).unwrap();
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.2, "mean {mean}");
        let expect = 2.0 * b * b;
        assert!((var - expect).abs() / expect < 0.02, "variance {var} vs {expect}");
    }

    #[test]
    fn noise_off_is_bitwise_identity() {
        let delta = [1.0, -2.5, 1e-300, 0.0];
        let mut rng = substream(4, StreamDomain::Noise, 0, 0);
        let (out, noise_l1) = noise_update(&delta, &DpConfig::off(200.0), &mut rng).unwrap();
        assert!(out.iter().zip(&delta).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(noise_l1, 0.0);
    }

    #[test]
    fn huge_epsilon_means_vanishing_noise() {
        let delta = [0.5; 64];
        let cfg = DpConfig { epsilon: Epsilon::Budget(1e12), clip: 200.0 };
        let mut rng = substream(5, StreamDomain::Noise, 0, 0);
        let (out, _) = noise_update(&delta, &cfg, &mut rng).unwrap();
        for (o, d) in out.iter().zip(&delta) {
            assert!((o - d).abs() < 1e-6);
        }
    }

    #[test]
    fn fixed_stream_reproduces_noise() {
        let delta = [0.0; 32];
        let cfg = DpConfig { epsilon: Epsilon::Budget(1.0), clip: 200.0 };
        let mut r1 = substream(6, StreamDomain::Noise, 3, 9);
        let mut r2 = substream(6, StreamDomain::Noise, 3, 9);
        let (a, _) = noise_update(&delta, &cfg, &mut r1).unwrap();
        let (b, _) = noise_update(&delta, &cfg, &mut r2).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));

        // Distinct (client, round) keys give distinct noise.
        let mut r3 = substream(6, StreamDomain::Noise, 3, 10);
        let (c, _) = noise_update(&delta, &cfg, &mut r3).unwrap();
        assert_ne!(a, c);
    }

    // Kolmogorov–Smirnov distance against the analytic Laplace CDF.
    fn ks_distance(samples: &mut [f64], b: f64) -> f64 {
        samples.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let n = samples.len() as f64;
        let cdf = |x: f64| {
            if x < 0.0 {
                0.5 * libm::exp(x / b)
            } else {
                1.0 - 0.5 * libm::exp(-x / b)
            }
        };
        let mut d: f64 = 0.0;
        for (i, x) in samples.iter().enumerate() {
            let f = cdf(*x);
            let lo = i as f64 / n;
            let hi = (i + 1) as f64 / n;
            d = d.max(libm::fabs(f - lo)).max(libm::fabs(f - hi));
        }
        d
    }

    #[test]
    fn laplace_passes_ks_test_across_scales() {
        // Critical value at significance 0.01: 1.628 / sqrt(n).
        let n = 100_000usize;
        let critical = 1.628 / libm::sqrt(n as f64);
        for (i, b) in [1.0, 40.0, 4000.0].into_iter().enumerate() {
            let mut rng = substream(7, StreamDomain::Noise, i as u64, 0);
            let mut samples: Vec<f64> =
                (0..n).map(|_| laplace_sample(b, &mut rng).unwrap()).collect();
            let d = ks_distance(&mut samples, b);
            assert!(d < critical, "b={b}: KS distance {d} >= {critical}");
        }
    }
}
