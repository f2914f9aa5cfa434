//! Comparison learning laws: adaptive data-driven ILC and frequency-domain
//! inversion ILC.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{KrilcError, Result};
use crate::store::IterationStore;

const GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveParams {
    pub l_theta: usize,
    pub eta_theta: f64,
    pub mu_theta: f64,
    pub eta_psi: f64,
    pub mu_psi: f64,
}

impl Default for AdaptiveParams {
    fn default() -> Self {
        AdaptiveParams {
            l_theta: 3,
            eta_theta: 0.1,
            mu_theta: 0.5,
            eta_psi: 1.0,
            mu_psi: 1.0,
        }
    }
}

impl AdaptiveParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if self.l_theta == 0 {
            return Err(KrilcError::ParameterDomain {
                param: "l_theta",
                value: 0.0,
                bound: "l_theta >= 1",
            });
        }
        if !unit(self.eta_theta) || !unit(self.eta_psi) {
            return Err(KrilcError::ParameterDomain {
                param: "eta",
                value: self.eta_theta.min(self.eta_psi),
                bound: "eta in (0, 1]",
            });
        }
        if self.mu_theta <= 0.0 || self.mu_psi <= 0.0 {
            return Err(KrilcError::ParameterDomain {
                param: "mu",
                value: self.mu_theta.min(self.mu_psi),
                bound: "mu > 0",
            });
        }
        Ok(())
    }
}

/// Per-time parameters of the adaptive law; `theta[t]` is the vector used by
/// the current iteration and `psi_hat[t]` the latest estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveIlcState {
    pub params: AdaptiveParams,
    pub theta: Vec<Vec<f64>>,
    pub psi_hat: Vec<f64>,
}

impl AdaptiveIlcState {
    /// `θ = 0` and `ψ̂ = 1` for every `t = 0..=horizon`.
    pub fn new(params: AdaptiveParams, horizon: usize) -> Result<Self> {
        params.validate()?;
        Ok(AdaptiveIlcState {
            params,
            theta: vec![vec![0.0; params.l_theta]; horizon + 1],
            psi_hat: vec![1.0; horizon + 1],
        })
    }
}

/// `ξ_{j−1}(t+1) = [−e_{j−1}(t+1), Δe_{j−1}(t+1), …, Δe_{j−l_θ+1}(t+1)]`, where
/// terms involving iterations before the first stored one are zero.
pub fn adaptive_regressor(store: &IterationStore, j: usize, t: usize, l_theta: usize) -> Vec<f64> {
    let j = j as isize;
    let first = store.first_iteration() as isize;
    let mut xi = Vec::with_capacity(l_theta);
    xi.push(-store.error_or_zero(j - 1, t + 1));
    for k in 1..l_theta as isize {
        let i = j - k;
        xi.push(if i - 1 >= first {
            store.error_or_zero(i, t + 1) - store.error_or_zero(i - 1, t + 1)
        } else {
            0.0
        });
    }
    xi
}

/// One step of the adaptive law at `(j, t)`.
///
/// `delta_y = y_j(t) − y_{j−1}(t)` and `delta_u = u_j(t−1) − u_{j−1}(t−1)`
/// update `ψ̂(t)`; then `u_j(t)` is formed with the current `θ(t)`, which is
/// advanced to `θ_{j+1}(t)`. Updates with a vanishing denominator are skipped.
pub fn adaptive_ilc_step(
    state: &mut AdaptiveIlcState,
    t: usize,
    xi: &[f64],
    e_prev_next: f64,
    u_prev_t: f64,
    delta_y: f64,
    delta_u: f64,
) -> f64 {
    let p = state.params;
    let psi_den = p.mu_psi + delta_u * delta_u;
    let psi_old = state.psi_hat[t];
    if psi_den >= GUARD {
        state.psi_hat[t] = psi_old + p.eta_psi * (delta_y - psi_old * delta_u) * delta_u / psi_den;
    }
    let psi = state.psi_hat[t];
    let theta = &mut state.theta[t];
    let xt: f64 = xi.iter().zip(theta.iter()).map(|(a, b)| a * b).sum();
    let u = u_prev_t + xt;
    let xi2: f64 = xi.iter().map(|v| v * v).sum();
    let den = (p.mu_theta + psi * psi) * xi2;
    if den >= GUARD {
        let gain = p.eta_theta * (psi * e_prev_next - p.mu_theta * xt) / den;
        for (th, x) in theta.iter_mut().zip(xi) {
            *th += gain * x;
        }
    }
    u
}

/// Raised-cosine gate `ρ(|𝒴|)` with knee `γ`.
pub fn rho(magnitude: f64, gamma: f64) -> f64 {
    if magnitude > gamma {
        1.0
    } else {
        0.5 * (1.0 - (std::f64::consts::PI * magnitude / gamma).cos())
    }
}

/// Per-bin inversion update; bins with `𝒴 = 0` pass through.
pub fn inversion_ilc_update(
    u_prev: &[Complex64],
    y_prev: &[Complex64],
    e_prev: &[Complex64],
    gamma: f64,
) -> Result<Vec<Complex64>> {
    if u_prev.len() != y_prev.len() || u_prev.len() != e_prev.len() {
        return Err(KrilcError::Dimension("spectra of unequal length".into()));
    }
    Ok(u_prev
        .iter()
        .zip(y_prev)
        .zip(e_prev)
        .map(|((&u, &y), &e)| {
            if y == Complex64::new(0.0, 0.0) {
                u
            } else {
                u + u / y * e * rho(y.norm(), gamma)
            }
        })
        .collect())
}

/// Inversion ILC over whole trajectories with an `N_d`-point transform.
///
/// Inputs `u(0..N_d−1)` are paired with outputs and errors at `1..=N_d`, so
/// the transform sees the one-step input delay of the plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionIlcState {
    pub gamma: f64,
}

impl Default for InversionIlcState {
    fn default() -> Self {
        InversionIlcState { gamma: 0.9 }
    }
}

fn spectrum(planner: &mut FftPlanner<f64>, x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

impl InversionIlcState {
    /// Next input trajectory (`0..=N_d`) from the previous iteration.
    pub fn next_input(&self, u_prev: &[f64], y_prev: &[f64], e_prev: &[f64]) -> Result<Vec<f64>> {
        let n1 = u_prev.len();
        if n1 < 2 || y_prev.len() != n1 || e_prev.len() != n1 {
            return Err(KrilcError::Dimension("inversion ILC needs equal trajectories".into()));
        }
        let n = n1 - 1;
        let mut planner = FftPlanner::new();
        let uu = spectrum(&mut planner, &u_prev[..n]);
        let yy = spectrum(&mut planner, &y_prev[1..]);
        let ee = spectrum(&mut planner, &e_prev[1..]);
        let mut next = inversion_ilc_update(&uu, &yy, &ee, self.gamma)?;
        planner.plan_fft_inverse(n).process(&mut next);
        let mut u: Vec<f64> = next.iter().map(|c| c.re / n as f64).collect();
        u.push(0.0);
        u[0] = 0.0;
        Ok(u)
    }
}
