//! Bounded zero-mean measurement noise.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{KrilcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma2: f64,
    /// Hard bound `|v| ≤ d_v`; `None` leaves the noise Gaussian.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_v: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    Zero,
    Uniform(Uniform<f64>),
    Gaussian(Normal<f64>),
    Truncated(Normal<f64>, f64),
}

/// Sampler for one noise specification.
///
/// With a bound, the noise is uniform on `±σ√3` when that fits inside `±d_v`,
/// otherwise normal with variance `σ²` truncated to `±d_v` by rejection.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSampler {
    kind: Kind,
    variance: f64,
}

impl NoiseSampler {
    pub fn new(spec: &NoiseSpec) -> Result<Self> {
        if !(spec.sigma2 >= 0.0) || !spec.sigma2.is_finite() {
            return Err(KrilcError::ParameterDomain {
                param: "sigma2",
                value: spec.sigma2,
                bound: "sigma2 >= 0",
            });
        }
        let sigma = spec.sigma2.sqrt();
        if sigma == 0.0 {
            return Ok(NoiseSampler { kind: Kind::Zero, variance: 0.0 });
        }
        let normal = Normal::new(0.0, sigma).expect("finite sigma");
        let Some(d_v) = spec.d_v else {
            return Ok(NoiseSampler { kind: Kind::Gaussian(normal), variance: spec.sigma2 });
        };
        if !(d_v > 0.0) {
            return Err(KrilcError::ParameterDomain {
                param: "d_v",
                value: d_v,
                bound: "d_v > 0",
            });
        }
        let half = sigma * 3f64.sqrt();
        if half <= d_v {
            return Ok(NoiseSampler {
                kind: Kind::Uniform(Uniform::new_inclusive(-half, half)),
                variance: spec.sigma2,
            });
        }
        let variance = truncated_normal_variance(sigma, d_v);
        log::info!(
            "noise: sigma = {sigma} exceeds d_v/sqrt(3) = {}; truncated normal has variance {variance:.4e} instead of {:.4e}",
            d_v / 3f64.sqrt(),
            spec.sigma2
        );
        Ok(NoiseSampler { kind: Kind::Truncated(normal, d_v), variance })
    }

    /// Variance actually produced.
    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self.kind {
            Kind::Zero => 0.0,
            Kind::Uniform(u) => u.sample(rng),
            Kind::Gaussian(n) => n.sample(rng),
            Kind::Truncated(n, d) => loop {
                let v = n.sample(rng);
                if v.abs() <= d {
                    break v;
                }
            },
        }
    }
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `Φ(x) − Φ(−x)`
fn std_normal_mass(x: f64) -> f64 {
    erf(x / std::f64::consts::SQRT_2)
}

/// Variance of `N(0, σ²)` conditioned on `|v| ≤ d`.
pub fn truncated_normal_variance(sigma: f64, d: f64) -> f64 {
    let a = d / sigma;
    sigma * sigma * (1.0 - 2.0 * a * std_normal_pdf(a) / std_normal_mass(a))
}
