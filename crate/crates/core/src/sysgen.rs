//! Test plants and reference trajectories.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KrilcError, Result};
use crate::plant::{to_state_space, LtvArxModel};

/// Sign applied to the autoregressive coefficients of the fixed test plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArSign {
    /// `a₁ = 1.2`, `a₂ = −0.35` as printed (poles 0.243 and −1.443).
    #[default]
    AsPrinted,
    /// `a₁ = −1.2`, `a₂ = 0.35` (poles 0.7 and 0.5).
    Flipped,
}

pub fn fixed_plant_51(horizon: usize) -> LtvArxModel {
    fixed_plant_51_with(horizon, ArSign::AsPrinted)
}

pub fn fixed_plant_51_with(horizon: usize, sign: ArSign) -> LtvArxModel {
    let s = match sign {
        ArSign::AsPrinted => 1.0,
        ArSign::Flipped => -1.0,
    };
    let a = vec![vec![1.2 * s, -0.35 * s]; horizon + 1];
    let b = (0..=horizon)
        .map(|t| {
            let t = t as f64;
            vec![
                1.0 + 0.1 * t.cos() + 0.03 * t.sin(),
                0.1 * t.sin() - 0.05 * t.cos() - 0.521,
            ]
        })
        .collect();
    LtvArxModel::new(a, b).expect("fixed plant is well formed")
}

pub fn reference_51(t: usize) -> f64 {
    let t = t as f64;
    (2.0 * PI * t / 50.0).sin() + (2.0 * PI * t / 5.0).sin()
}

pub fn reference_52(t: usize) -> f64 {
    let t = t as f64;
    0.125e-6 * t.powi(3) * (7.0 - 0.03 * t)
}

/// Rotates a complex root along its circle; real and zero roots pass through.
pub fn rotate_root(s0: Complex64, t: usize, horizon: usize) -> Complex64 {
    if s0.im == 0.0 || s0.norm() == 0.0 {
        return s0;
    }
    let a0 = (s0.im / s0.re).atan();
    let angle = a0.signum() * PI * t as f64 / (4.0 * horizon as f64) + a0;
    Complex64::from_polar(s0.norm(), angle)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorFilter {
    pub d_g_u_max: f64,
    pub dominant_pole_drift_max: f64,
    pub dominant_pole_min: f64,
}

impl Default for GeneratorFilter {
    fn default() -> Self {
        GeneratorFilter {
            d_g_u_max: 5.0,
            dominant_pole_drift_max: 0.001,
            dominant_pole_min: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub order: usize,
    pub radius: f64,
    pub horizon: usize,
    pub seed: u64,
    pub filter: Option<GeneratorFilter>,
}

impl GeneratorConfig {
    pub fn new(horizon: usize, seed: u64) -> Self {
        GeneratorConfig {
            order: 10,
            radius: 0.95,
            horizon,
            seed,
            filter: Some(GeneratorFilter::default()),
        }
    }
}

pub const MAX_RESAMPLES: usize = 10_000;

/// Poles, zeros and gain of a sampled LTI system, before rotation.
#[derive(Debug, Clone)]
pub struct RootSet {
    pub poles: Vec<Complex64>,
    pub zeros: Vec<Complex64>,
    pub gain: f64,
}

fn sample_roots(rng: &mut ChaCha8Rng, count: usize, radius: f64) -> Vec<Complex64> {
    let mut roots = Vec::with_capacity(count);
    while roots.len() < count {
        let mag = rng.gen_range(0.0..radius);
        if count - roots.len() == 1 || rng.gen_bool(0.3) {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            roots.push(Complex64::new(sign * mag, 0.0));
        } else {
            let arg = rng.gen_range(0.0..PI);
            let z = Complex64::from_polar(mag, arg);
            roots.push(z);
            roots.push(z.conj());
        }
    }
    roots
}

impl RootSet {
    /// `order` poles and `order − 1` zeros, so the plant keeps one delay.
    pub fn sample(rng: &mut ChaCha8Rng, order: usize, radius: f64) -> Self {
        let poles = sample_roots(rng, order, radius);
        let zeros = sample_roots(rng, order.saturating_sub(1), radius);
        let gain = rng.gen_range(0.5..1.5);
        RootSet { poles, zeros, gain }
    }

    pub fn at(&self, t: usize, horizon: usize) -> RootSet {
        RootSet {
            poles: self.poles.iter().map(|&p| rotate_root(p, t, horizon)).collect(),
            zeros: self.zeros.iter().map(|&z| rotate_root(z, t, horizon)).collect(),
            gain: self.gain,
        }
    }

    /// Residues of `gain·Π(z − zᵢ) / Π(z − pₖ)` at each pole.
    pub fn residues(&self) -> Vec<Complex64> {
        self.poles
            .iter()
            .enumerate()
            .map(|(k, &pk)| {
                let num: Complex64 = self.zeros.iter().map(|&z| pk - z).product();
                let den: Complex64 = self
                    .poles
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != k)
                    .map(|(_, &p)| pk - p)
                    .product();
                num * self.gain / den
            })
            .collect()
    }

    /// Pole with the largest residue magnitude.
    pub fn dominant_pole(&self) -> Complex64 {
        let res = self.residues();
        let mut best = 0;
        for (k, r) in res.iter().enumerate() {
            if r.norm() > res[best].norm() {
                best = k;
            }
        }
        self.poles[best]
    }
}

/// Coefficients `[1, c₁, …, c_n]` of `Π(1 − rᵢq⁻¹)`, real parts.
pub fn poly_from_roots(roots: &[Complex64]) -> Vec<f64> {
    let mut c = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); c.len() + 1];
        for (i, &ci) in c.iter().enumerate() {
            next[i] += ci;
            next[i + 1] -= ci * r;
        }
        c = next;
    }
    c.into_iter().map(|v| v.re).collect()
}

/// Roots of `1 + c₁q⁻¹ + … + c_nq⁻ⁿ` through the companion matrix.
pub fn roots_of(coeffs: &[f64]) -> Vec<Complex64> {
    let n = coeffs.len();
    if n == 0 {
        return Vec::new();
    }
    let mut m = DMatrix::zeros(n, n);
    for l in 0..n {
        m[(0, l)] = -coeffs[l];
    }
    for r in 1..n {
        m[(r, r - 1)] = 1.0;
    }
    m.complex_eigenvalues().iter().copied().collect()
}

fn realize(roots: &RootSet, horizon: usize) -> LtvArxModel {
    let mut a = Vec::with_capacity(horizon + 1);
    let mut b = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let rt = roots.at(t, horizon);
        a.push(poly_from_roots(&rt.poles)[1..].to_vec());
        b.push(
            poly_from_roots(&rt.zeros)
                .into_iter()
                .map(|v| v * roots.gain)
                .collect(),
        );
    }
    LtvArxModel::new(a, b).expect("generated coefficients are finite")
}

/// Which acceptance filter a candidate fails, if any.
fn failing_filter(model: &LtvArxModel, roots: &RootSet, f: &GeneratorFilter) -> Option<&'static str> {
    let horizon = model.horizon;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for t in 1..=horizon {
        let m = roots.at(t, horizon).dominant_pole().norm();
        lo = lo.min(m);
        hi = hi.max(m);
    }
    if lo <= f.dominant_pole_min {
        return Some("dominant_pole_min");
    }
    if hi - lo > f.dominant_pole_drift_max {
        return Some("dominant_pole_drift_max");
    }
    match to_state_space(model).bibo_sums() {
        Ok((du, _)) if du <= f.d_g_u_max => None,
        _ => Some("d_g_u_max"),
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedPlant {
    pub model: LtvArxModel,
    pub roots: RootSet,
    pub attempts: usize,
}

pub fn generate_plant(config: &GeneratorConfig) -> Result<LtvArxModel> {
    generate_plant_detailed(config).map(|g| g.model)
}

pub fn generate_plant_detailed(config: &GeneratorConfig) -> Result<GeneratedPlant> {
    if config.order == 0 {
        return Err(KrilcError::ParameterDomain {
            param: "order",
            value: 0.0,
            bound: "order >= 1",
        });
    }
    if !(config.radius > 0.0 && config.radius < 1.0) {
        return Err(KrilcError::ParameterDomain {
            param: "radius",
            value: config.radius,
            bound: "0 < radius < 1",
        });
    }
    if config.horizon == 0 {
        return Err(KrilcError::ParameterDomain {
            param: "horizon",
            value: 0.0,
            bound: "horizon >= 1",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut failures: Vec<(&'static str, usize)> = Vec::new();
    for attempt in 1..=MAX_RESAMPLES {
        let roots = RootSet::sample(&mut rng, config.order, config.radius);
        let model = realize(&roots, config.horizon);
        let failed = config
            .filter
            .as_ref()
            .and_then(|f| failing_filter(&model, &roots, f));
        match failed {
            None => {
                return Ok(GeneratedPlant {
                    model,
                    roots,
                    attempts: attempt,
                })
            }
            Some(name) => match failures.iter_mut().find(|(n, _)| *n == name) {
                Some(entry) => entry.1 += 1,
                None => failures.push((name, 1)),
            },
        }
    }
    let filter = failures
        .iter()
        .max_by_key(|f| f.1)
        .map(|f| f.0)
        .unwrap_or("none");
    Err(KrilcError::GenerationFailed {
        filter,
        attempts: MAX_RESAMPLES,
    })
}
