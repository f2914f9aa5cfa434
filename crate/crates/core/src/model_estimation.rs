//! Per-time estimation of the ARX coefficients from cross-iteration data.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{KrilcError, Result};
use crate::kernels::{KernelConfig, KernelFamily};
use crate::regression::{minimize_sure_gram, GramStats, KernelLayout, SureSettings};
use crate::store::IterationStore;

/// `[u(t−1), …, u(t−n_b), −y(t−1), …, −y(t−n_a)]`, zero at nonpositive times
/// (and `u(0) = 0`).
pub fn regressor_row(u: &[f64], y: &[f64], t: usize, n_a: usize, n_b: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(n_a + n_b);
    for k in 1..=n_b {
        row.push(match t.checked_sub(k) {
            Some(s) if s > 0 => u[s],
            _ => 0.0,
        });
    }
    for l in 1..=n_a {
        row.push(match t.checked_sub(l) {
            Some(s) => -y[s],
            None => 0.0,
        });
    }
    row
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressorView {
    pub y: DVector<f64>,
    pub phi: DMatrix<f64>,
}

/// Regression data for time `t` from all stored iterations before `j`.
pub fn build_regressors(
    store: &IterationStore,
    j: usize,
    t: usize,
    n_a: usize,
    n_b: usize,
) -> Result<RegressorView> {
    if j < 1 {
        return Err(KrilcError::Index("iteration index must be at least 1".into()));
    }
    if t < 1 || t > store.horizon() {
        return Err(KrilcError::Index(format!(
            "time {t} outside 1..={}",
            store.horizon()
        )));
    }
    let first = store.first_iteration();
    if j > first && !store.contains(j - 1) {
        return Err(KrilcError::Index(format!("iteration {} not stored", j - 1)));
    }
    let rows: Vec<usize> = (first..j).collect();
    let mut phi = DMatrix::zeros(rows.len(), n_a + n_b);
    let mut y = DVector::zeros(rows.len());
    for (r, &i) in rows.iter().enumerate() {
        let (ui, yi) = (store.u(i)?, store.y(i)?);
        for (c, v) in regressor_row(ui, yi, t, n_a, n_b).into_iter().enumerate() {
            phi[(r, c)] = v;
        }
        y[r] = yi[t];
    }
    Ok(RegressorView { y, phi })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMethod {
    /// Kernel-regularized least squares tuned by SURE.
    Rls,
    /// Minimum-norm least squares.
    Ls,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelSettings {
    pub n_a: usize,
    pub n_b: usize,
    pub family_b: KernelFamily,
    pub family_a: KernelFamily,
    pub method: ModelMethod,
    pub sure: SureSettings,
    /// Generated starts once a warm start is available.
    pub warm_starts: usize,
}

impl ModelSettings {
    pub fn new(n_a: usize, n_b: usize) -> Self {
        ModelSettings {
            n_a,
            n_b,
            family_b: KernelFamily::DI,
            family_a: KernelFamily::DI,
            method: ModelMethod::Rls,
            sure: SureSettings::default(),
            warm_starts: 1,
        }
    }

    pub fn layout(&self) -> KernelLayout {
        KernelLayout {
            blocks: vec![(self.family_b, self.n_b), (self.family_a, self.n_a)],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelEstimate {
    pub t: usize,
    pub theta_b_hat: Vec<f64>,
    pub theta_a_hat: Vec<f64>,
    /// `[η_b, η_a]`; empty for least squares.
    pub kernels: Vec<KernelConfig>,
    pub sigma2: f64,
    pub hat_matrix_trace: f64,
    pub residual_norm2: f64,
    pub n_obs: usize,
}

impl ModelEstimate {
    pub fn zero(t: usize, n_a: usize, n_b: usize) -> Self {
        ModelEstimate {
            t,
            theta_b_hat: vec![0.0; n_b],
            theta_a_hat: vec![0.0; n_a],
            kernels: Vec::new(),
            sigma2: 0.0,
            hat_matrix_trace: 0.0,
            residual_norm2: 0.0,
            n_obs: 0,
        }
    }

    pub fn theta(&self) -> Vec<f64> {
        let mut th = self.theta_b_hat.clone();
        th.extend_from_slice(&self.theta_a_hat);
        th
    }

    pub fn b1(&self) -> f64 {
        self.theta_b_hat.first().copied().unwrap_or(0.0)
    }
}

/// Seed for the start points at `(j, t)`.
fn point_seed(base: u64, j: usize, t: usize) -> u64 {
    base ^ ((j as u64) << 32 | t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Minimum-norm least squares from sufficient statistics (`θ = (ΦᵀΦ)⁺ΦᵀY`).
pub fn ls_from_gram(stats: &GramStats) -> DVector<f64> {
    let n = stats.dim();
    if stats.n_obs == 0 {
        return DVector::zeros(n);
    }
    let eig = SymmetricEigen::new(stats.g.clone());
    let lmax = eig.eigenvalues.amax();
    let mut theta = DVector::zeros(n);
    if lmax == 0.0 {
        return theta;
    }
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > 1e-12 * lmax {
            let q = eig.eigenvectors.column(k);
            theta += q * (q.dot(&stats.b) / lam);
        }
    }
    theta
}

/// Estimate at time `t` from prepared sufficient statistics.
pub fn estimate_from_stats(
    stats: &GramStats,
    j: usize,
    t: usize,
    settings: &ModelSettings,
    warm: Option<&ModelEstimate>,
) -> Result<ModelEstimate> {
    let (n_a, n_b) = (settings.n_a, settings.n_b);
    if stats.dim() != n_a + n_b {
        return Err(KrilcError::Dimension("statistics do not match model orders".into()));
    }
    if stats.n_obs == 0 {
        return Ok(ModelEstimate::zero(t, n_a, n_b));
    }
    let split = |theta: &DVector<f64>| (theta.as_slice()[..n_b].to_vec(), theta.as_slice()[n_b..].to_vec());
    match settings.method {
        ModelMethod::Ls => {
            let theta = ls_from_gram(stats);
            let (b, a) = split(&theta);
            let g_theta = &stats.g * &theta;
            let rss = (stats.yy - 2.0 * stats.b.dot(&theta) + theta.dot(&g_theta)).max(0.0);
            Ok(ModelEstimate {
                t,
                theta_b_hat: b,
                theta_a_hat: a,
                kernels: Vec::new(),
                sigma2: 0.0,
                hat_matrix_trace: 0.0,
                residual_norm2: rss,
                n_obs: stats.n_obs,
            })
        }
        ModelMethod::Rls => {
            let warm_cfg: Vec<Vec<KernelConfig>> = warm
                .filter(|w| w.kernels.len() == 2)
                .map(|w| vec![w.kernels.clone()])
                .unwrap_or_default();
            let mut sure = settings.sure;
            sure.seed = point_seed(settings.sure.seed, j, t);
            if !warm_cfg.is_empty() {
                sure.starts = settings.warm_starts;
            }
            let fit = minimize_sure_gram(stats, &settings.layout(), &sure, &warm_cfg)?;
            log::trace!("sure j={j} t={t} evals={} warm={}", fit.evals, !warm_cfg.is_empty());
            let (b, a) = split(&fit.solution.theta_hat);
            Ok(ModelEstimate {
                t,
                theta_b_hat: b,
                theta_a_hat: a,
                kernels: fit.configs,
                sigma2: fit.sigma2,
                hat_matrix_trace: fit.solution.hat_matrix_trace,
                residual_norm2: fit.solution.residual_norm2,
                n_obs: stats.n_obs,
            })
        }
    }
}

/// Estimate `θ_m(t)` from iterations before `j`.
pub fn estimate_model(
    store: &IterationStore,
    j: usize,
    t: usize,
    settings: &ModelSettings,
    warm: Option<&ModelEstimate>,
) -> Result<ModelEstimate> {
    let view = build_regressors(store, j, t, settings.n_a, settings.n_b)?;
    let stats = GramStats::from_data(&view.y, &view.phi);
    estimate_from_stats(&stats, j, t, settings, warm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::model_fit;
    use crate::plant::LtvArxModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn scripted_store() -> IterationStore {
        let mut s = IterationStore::new(vec![0.0; 7], 1).unwrap();
        for i in 1..=2 {
            let f = i as f64;
            let u: Vec<f64> = (0..7).map(|t| f * 10.0 + t as f64).collect();
            let y: Vec<f64> = (0..7).map(|t| -(f * 100.0 + t as f64)).collect();
            s.push(u, y, vec![0.0; 7]).unwrap();
        }
        s
    }

    #[test]
    fn hand_built_rows() {
        let s = scripted_store();
        let view = build_regressors(&s, 3, 5, 2, 2).unwrap();
        assert_eq!(view.phi.nrows(), 2);
        // iteration i: u_i(t) = 10i + t, y_i(t) = −(100i + t)
        assert_eq!(view.phi.row(0).iter().copied().collect::<Vec<_>>(), vec![14.0, 13.0, 104.0, 103.0]);
        assert_eq!(view.phi.row(1).iter().copied().collect::<Vec<_>>(), vec![24.0, 23.0, 204.0, 203.0]);
        assert_eq!(view.y.as_slice(), &[-105.0, -205.0]);
    }

    #[test]
    fn early_rows_and_empty_views() {
        let s = scripted_store();
        assert_eq!(build_regressors(&s, 1, 3, 2, 2).unwrap().phi.nrows(), 0);
        let view = build_regressors(&s, 3, 1, 2, 2).unwrap();
        assert!(view.phi.iter().all(|&v| v == 0.0));
        assert!(build_regressors(&s, 0, 3, 2, 2).is_err());
        assert!(build_regressors(&s, 3, 7, 2, 2).is_err());
        assert!(build_regressors(&s, 5, 3, 2, 2).is_err());
    }

    fn white_noise_store(
        plant: &LtvArxModel,
        iterations: usize,
        noise_std: f64,
        seed: u64,
    ) -> IterationStore {
        let n = plant.horizon + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let mut s = IterationStore::new(vec![0.0; n], 1).unwrap();
        for _ in 0..iterations {
            let mut u: Vec<f64> = (0..n).map(|_| unit.sample(&mut rng)).collect();
            u[0] = 0.0;
            let v: Vec<f64> = (0..n).map(|_| noise_std * unit.sample(&mut rng)).collect();
            let y = plant.simulate_iteration(&u, &v).unwrap();
            s.push(u, y, v).unwrap();
        }
        s
    }

    #[test]
    fn noiseless_frozen_plant_is_recovered() {
        let plant = LtvArxModel::time_invariant(&[-0.5, 0.2], &[1.0, 0.4], 12).unwrap();
        let s = white_noise_store(&plant, 30, 0.0, 1);
        let settings = ModelSettings::new(2, 2);
        for t in 5..=12 {
            let est = estimate_model(&s, 31, t, &settings, None).unwrap();
            let fit = model_fit(&plant.theta(t), &est.theta()).unwrap();
            assert!(fit >= 99.0, "t={t}: fit {fit}");
        }
    }

    #[test]
    fn single_row_is_well_posed() {
        let plant = LtvArxModel::time_invariant(&[-0.5, 0.2], &[1.0, 0.4], 8).unwrap();
        let s = white_noise_store(&plant, 1, 0.1, 2);
        let est = estimate_model(&s, 2, 6, &ModelSettings::new(4, 4), None).unwrap();
        assert!(est.theta().iter().all(|v| v.is_finite()));
        assert_eq!(est.n_obs, 1);
    }

    #[test]
    fn estimates_are_order_independent_and_deterministic() {
        let plant = LtvArxModel::time_invariant(&[-0.5, 0.2], &[1.0, 0.4], 10).unwrap();
        let s = white_noise_store(&plant, 8, 0.3, 3);
        let settings = ModelSettings::new(3, 3);
        let a3 = estimate_model(&s, 9, 3, &settings, None).unwrap();
        let a7 = estimate_model(&s, 9, 7, &settings, None).unwrap();
        let b7 = estimate_model(&s, 9, 7, &settings, None).unwrap();
        let b3 = estimate_model(&s, 9, 3, &settings, None).unwrap();
        assert_eq!(a3, b3);
        assert_eq!(a7, b7);
    }

    #[test]
    fn ls_from_gram_matches_qr() {
        let plant = LtvArxModel::time_invariant(&[-0.5, 0.2], &[1.0, 0.4], 10).unwrap();
        let s = white_noise_store(&plant, 20, 0.3, 4);
        let view = build_regressors(&s, 21, 8, 2, 2).unwrap();
        let qr = crate::regression::ls_solve(&view.y, &view.phi).unwrap();
        let g = ls_from_gram(&GramStats::from_data(&view.y, &view.phi));
        assert!((qr - g).amax() < 1e-9);
    }

    #[test]
    fn regularized_tails_shrink() {
        // over-parameterized estimates: coefficients beyond the true order
        let plant = LtvArxModel::time_invariant(&[-0.6], &[1.0], 20).unwrap();
        let (mut rls_tail, mut ls_tail) = (0.0, 0.0);
        for seed in 0..20 {
            let s = white_noise_store(&plant, 14, 0.5, 100 + seed);
            let mut settings = ModelSettings::new(6, 6);
            let rls = estimate_model(&s, 15, 15, &settings, None).unwrap();
            settings.method = ModelMethod::Ls;
            let ls = estimate_model(&s, 15, 15, &settings, None).unwrap();
            let tail = |e: &ModelEstimate| {
                e.theta_b_hat[1..].iter().chain(&e.theta_a_hat[1..]).map(|v| v * v).sum::<f64>().sqrt()
            };
            rls_tail += tail(&rls);
            ls_tail += tail(&ls);
        }
        assert!(rls_tail <= ls_tail, "{rls_tail} vs {ls_tail}");
    }
}
