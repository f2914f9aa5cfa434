//! Regularized least squares and the SURE criterion.
//!
//! The canonical estimator is the inverse-free form
//! `θ̂ = PΦᵀ(ΦPΦᵀ + σ²I)⁻¹Y`, which stays well defined when the kernel is
//! singular. Hyper-parameter tuning works on sufficient statistics
//! (`ΦᵀΦ`, `ΦᵀY`, `YᵀY`) through the equivalent push-through form
//! `θ̂ = L(LᵀΦᵀΦL + σ²I)⁻¹LᵀΦᵀY` with `P = LLᵀ`.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KrilcError, Result};
use crate::kernels::{block_diag, build_kernel, KernelConfig, KernelFamily, KernelMatrix};
use crate::optim::{nelder_mead, pattern_polish, SimplexOptions};

/// Lower bound on any noise variance used by the SURE criterion.
pub const SIGMA2_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy)]
pub struct RegressionProblem<'a> {
    pub y: &'a DVector<f64>,
    pub phi: &'a DMatrix<f64>,
    pub sigma2: f64,
    pub kernel: &'a KernelMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlsSolution {
    pub theta_hat: DVector<f64>,
    /// Degrees of freedom `Trace(H)`.
    pub hat_matrix_trace: f64,
    pub residual_norm2: f64,
}

impl RlsSolution {
    fn zero(n: usize, residual_norm2: f64) -> Self {
        RlsSolution {
            theta_hat: DVector::zeros(n),
            hat_matrix_trace: 0.0,
            residual_norm2,
        }
    }

    pub fn sure(&self, sigma2: f64) -> f64 {
        self.residual_norm2 + 2.0 * sigma2 * self.hat_matrix_trace
    }
}

fn check_dims(prob: &RegressionProblem<'_>) -> Result<()> {
    let (n_obs, n) = prob.phi.shape();
    if prob.y.len() != n_obs {
        return Err(KrilcError::Dimension(format!(
            "Y has {} entries but Phi has {n_obs} rows",
            prob.y.len()
        )));
    }
    if prob.kernel.dim() != n {
        return Err(KrilcError::Dimension(format!(
            "kernel is {}x{0} but Phi has {n} columns",
            prob.kernel.dim()
        )));
    }
    if !(prob.sigma2 >= 0.0) {
        return Err(KrilcError::ParameterDomain {
            param: "sigma2",
            value: prob.sigma2,
            bound: "sigma2 >= 0",
        });
    }
    Ok(())
}

/// Minimizer of `‖Y − Φθ‖² + σ²θᵀP⁻¹θ`, computed without inverting `P`.
pub fn rls_solve(prob: &RegressionProblem<'_>) -> Result<RlsSolution> {
    check_dims(prob)?;
    let (n_obs, n) = prob.phi.shape();
    if n_obs == 0 {
        return Ok(RlsSolution::zero(n, 0.0));
    }
    // With P = LLᵀ and A = ΦL, PΦᵀ(ΦPΦᵀ + σ²I)⁻¹Y = L(AᵀA + σ²I)⁻¹AᵀY.
    // The SVD of A keeps this accurate for very large or singular kernels.
    let l = prob.kernel.factor();
    let a = prob.phi * &l;
    let svd = a.svd(true, true);
    let (u, v_t) = match (svd.u.as_ref(), svd.v_t.as_ref()) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(KrilcError::Singular("ΦL".into())),
    };
    let s_max = svd.singular_values.amax();
    let tiny = s_max * f64::EPSILON * n_obs.max(l.ncols()) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tiny).count();
    if rank < n_obs && prob.sigma2 <= tiny * tiny {
        return Err(KrilcError::Singular("ΦPΦᵀ + σ²I".into()));
    }
    let uty = u.transpose() * prob.y;
    let mut z = uty.clone();
    let mut hat_matrix_trace = 0.0;
    for (i, &s) in svd.singular_values.iter().enumerate() {
        let (gain, dof) = if s <= tiny {
            (0.0, 0.0)
        } else {
            let s2 = s * s;
            (s / (s2 + prob.sigma2), s2 / (s2 + prob.sigma2))
        };
        z[i] = uty[i] * gain;
        hat_matrix_trace += dof;
    }
    let theta_hat = l * (v_t.transpose() * z);
    if theta_hat.iter().any(|v| !v.is_finite()) {
        return Err(KrilcError::Singular("ΦPΦᵀ + σ²I".into()));
    }
    let hat_matrix_trace = hat_matrix_trace.clamp(0.0, n.min(n_obs) as f64);
    let residual_norm2 = (prob.y - prob.phi * &theta_hat).norm_squared();
    Ok(RlsSolution {
        theta_hat,
        hat_matrix_trace,
        residual_norm2,
    })
}

/// `‖Y − Φθ̂‖² + 2σ²·Trace(H)` at the RLS solution of the same problem.
pub fn sure_objective(prob: &RegressionProblem<'_>) -> Result<f64> {
    let sol = rls_solve(prob)?;
    Ok(sol.sure(prob.sigma2))
}

/// Ordinary least squares through a QR factorization.
pub fn ls_solve(y: &DVector<f64>, phi: &DMatrix<f64>) -> Result<DVector<f64>> {
    let (n_obs, n) = phi.shape();
    if y.len() != n_obs {
        return Err(KrilcError::Dimension("Y and Phi row counts differ".into()));
    }
    if n_obs < n {
        return Err(KrilcError::IllConditioned { rank: n_obs, cols: n });
    }
    let qr = phi.clone().qr();
    let r = qr.r();
    let scale = (0..n).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    let rank = (0..n)
        .filter(|&i| r[(i, i)].abs() > 1e-12 * scale.max(f64::MIN_POSITIVE))
        .count();
    if rank < n || scale == 0.0 {
        return Err(KrilcError::IllConditioned { rank, cols: n });
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty)
        .ok_or(KrilcError::IllConditioned { rank, cols: n })
}

/// Minimum-norm least squares (the `P⁻¹ → 0` limit of RLS), via SVD.
pub fn ls_min_norm(y: &DVector<f64>, phi: &DMatrix<f64>) -> Result<DVector<f64>> {
    let (n_obs, n) = phi.shape();
    if y.len() != n_obs {
        return Err(KrilcError::Dimension("Y and Phi row counts differ".into()));
    }
    if n_obs == 0 {
        return Ok(DVector::zeros(n));
    }
    let svd = phi.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if smax == 0.0 {
        return Ok(DVector::zeros(n));
    }
    svd.solve(y, 1e-10 * smax)
        .map_err(|e| KrilcError::Singular(e.to_string()))
}

/// `tr((LLᵀ)⁻¹) = ‖L⁻¹‖²_F` by column-wise forward substitution; only the
/// lower triangle of `l` is read.
fn trace_inverse_from_factor(l: &DMatrix<f64>) -> f64 {
    let n = l.nrows();
    let data = l.as_slice();
    let mut x = vec![0.0; n];
    let mut total = 0.0;
    for j in 0..n {
        x[j..].iter_mut().for_each(|v| *v = 0.0);
        x[j] = 1.0;
        for k in j..n {
            let col = &data[k * n..(k + 1) * n];
            let xk = x[k] / col[k];
            x[k] = xk;
            total += xk * xk;
            for (xi, li) in x[k + 1..].iter_mut().zip(&col[k + 1..]) {
                *xi -= li * xk;
            }
        }
    }
    total
}

/// Sufficient statistics of a linear regression.
#[derive(Debug, Clone, PartialEq)]
pub struct GramStats {
    /// `ΦᵀΦ`
    pub g: DMatrix<f64>,
    /// `ΦᵀY`
    pub b: DVector<f64>,
    /// `YᵀY`
    pub yy: f64,
    pub n_obs: usize,
}

impl GramStats {
    pub fn new(n: usize) -> Self {
        GramStats {
            g: DMatrix::zeros(n, n),
            b: DVector::zeros(n),
            yy: 0.0,
            n_obs: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn push_row(&mut self, row: &[f64], y: f64) {
        let n = self.dim();
        debug_assert_eq!(row.len(), n);
        for i in 0..n {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            self.b[i] += ri * y;
            for j in 0..n {
                self.g[(i, j)] += ri * row[j];
            }
        }
        self.yy += y * y;
        self.n_obs += 1;
    }

    pub fn from_data(y: &DVector<f64>, phi: &DMatrix<f64>) -> Self {
        let mut stats = GramStats::new(phi.ncols());
        let mut row = vec![0.0; phi.ncols()];
        for r in 0..phi.nrows() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = phi[(r, c)];
            }
            stats.push_row(&row, y[r]);
        }
        stats
    }

    /// RLS solution for `P = LLᵀ` and noise variance `sigma2 > 0`.
    pub fn solve_factored(&self, l: &DMatrix<f64>, sigma2: f64) -> Result<RlsSolution> {
        let n = self.dim();
        if self.n_obs == 0 {
            return Ok(RlsSolution::zero(n, 0.0));
        }
        let lt_g = l.transpose() * &self.g;
        let m = &lt_g * l;
        let rhs = l.transpose() * &self.b;
        self.finish(m, rhs, sigma2, |w| l * w)
    }

    /// Same as [`solve_factored`](Self::solve_factored) for a diagonal
    /// `P = diag(d²)`, passing `d`.
    pub fn solve_diagonal(&self, d: &[f64], sigma2: f64) -> Result<RlsSolution> {
        let n = self.dim();
        if self.n_obs == 0 {
            return Ok(RlsSolution::zero(n, 0.0));
        }
        let m = DMatrix::from_fn(n, n, |i, j| d[i] * self.g[(i, j)] * d[j]);
        let rhs = DVector::from_fn(n, |i, _| d[i] * self.b[i]);
        self.finish(m, rhs, sigma2, |w| DVector::from_fn(n, |i, _| d[i] * w[i]))
    }

    fn finish<F>(
        &self,
        mut m: DMatrix<f64>,
        rhs: DVector<f64>,
        sigma2: f64,
        lift: F,
    ) -> Result<RlsSolution>
    where
        F: Fn(&DVector<f64>) -> DVector<f64>,
    {
        if !(sigma2 > 0.0) {
            return Err(KrilcError::ParameterDomain {
                param: "sigma2",
                value: sigma2,
                bound: "sigma2 > 0 for the factored solver",
            });
        }
        let r = m.nrows();
        for i in 0..r {
            m[(i, i)] += sigma2;
        }
        let (w, trace_inv) = if let Some(ch) = Cholesky::new(m.clone()) {
            (ch.solve(&rhs), trace_inverse_from_factor(ch.l_dirty()))
        } else {
            // Rounding can make a badly scaled Gram indefinite; clamp its spectrum.
            let sym = (&m + m.transpose()) * 0.5;
            let eig = SymmetricEigen::new(sym);
            let q = &eig.eigenvectors;
            let d = eig.eigenvalues.map(|l| 1.0 / ((l - sigma2).max(0.0) + sigma2));
            let inv = q * DMatrix::from_diagonal(&d) * q.transpose();
            (&inv * &rhs, d.sum())
        };
        let theta_hat = lift(&w);
        let hat_matrix_trace = (r as f64 - sigma2 * trace_inv).clamp(0.0, r.min(self.n_obs) as f64);
        let g_theta = &self.g * &theta_hat;
        let residual_norm2 =
            (self.yy - 2.0 * self.b.dot(&theta_hat) + theta_hat.dot(&g_theta)).max(0.0);
        if !theta_hat.iter().all(|v| v.is_finite()) || !residual_norm2.is_finite() {
            return Err(KrilcError::Singular("LᵀΦᵀΦL + σ²I".into()));
        }
        Ok(RlsSolution {
            theta_hat,
            hat_matrix_trace,
            residual_norm2,
        })
    }

    /// RLS solution for an arbitrary kernel matrix.
    pub fn solve_kernel(&self, kernel: &KernelMatrix, sigma2: f64) -> Result<RlsSolution> {
        if kernel.is_diagonal() {
            let d: Vec<f64> = (0..kernel.dim())
                .map(|i| kernel.values[(i, i)].max(0.0).sqrt())
                .collect();
            self.solve_diagonal(&d, sigma2)
        } else {
            self.solve_factored(&kernel.factor(), sigma2)
        }
    }
}

/// Plug-in noise variance from a least-squares fit on the sufficient statistics.
///
/// Columns are visited in lag order, interleaving the blocks (first lag of
/// every block, then second lag, ...); linearly dependent or empty columns are
/// skipped. With more observations than independent columns the full fit is
/// used (`RSS / (N − rank)`); otherwise only the first `⌊N/2⌋` admissible
/// columns enter, so at least half the observations remain as residual degrees
/// of freedom. Returns `None` without observations.
pub fn noise_variance_plugin(stats: &GramStats, block_sizes: &[usize]) -> Option<f64> {
    let n_obs = stats.n_obs;
    if n_obs == 0 {
        return None;
    }
    let mut order = Vec::with_capacity(stats.dim());
    let max_len = block_sizes.iter().copied().max().unwrap_or(0);
    for lag in 0..max_len {
        let mut offset = 0;
        for &size in block_sizes {
            if lag < size {
                order.push(offset + lag);
            }
            offset += size;
        }
    }

    let greedy = |cap: usize| -> (usize, f64) {
        // incremental Cholesky of G restricted to accepted columns
        let mut cols: Vec<usize> = Vec::new();
        let mut l_rows: Vec<Vec<f64>> = Vec::new();
        let mut z: Vec<f64> = Vec::new();
        for &c in &order {
            if cols.len() >= cap {
                break;
            }
            let gcc = stats.g[(c, c)];
            if gcc <= 0.0 {
                continue;
            }
            let mut row = Vec::with_capacity(cols.len() + 1);
            for (k, &ck) in cols.iter().enumerate() {
                let mut s = stats.g[(c, ck)];
                for m in 0..k {
                    s -= row[m] * l_rows[k][m];
                }
                row.push(s / l_rows[k][k]);
            }
            let pivot = gcc - row.iter().map(|v| v * v).sum::<f64>();
            if pivot <= 1e-10 * gcc {
                continue;
            }
            let diag = pivot.sqrt();
            let mut zc = stats.b[c];
            for (m, rm) in row.iter().enumerate() {
                zc -= rm * z[m];
            }
            row.push(diag);
            z.push(zc / diag);
            l_rows.push(row);
            cols.push(c);
        }
        let rss = (stats.yy - z.iter().map(|v| v * v).sum::<f64>()).max(0.0);
        (cols.len(), rss)
    };

    let (rank, rss_full) = greedy(usize::MAX);
    let (m, rss) = if n_obs > rank {
        (rank, rss_full)
    } else {
        greedy(n_obs / 2)
    };
    Some((rss / (n_obs - m) as f64).max(SIGMA2_FLOOR))
}

/// Block structure of a kernel: one `(family, size)` per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelLayout {
    pub blocks: Vec<(KernelFamily, usize)>,
}

impl KernelLayout {
    pub fn single(family: KernelFamily, n: usize) -> Self {
        KernelLayout {
            blocks: vec![(family, n)],
        }
    }

    pub fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.1).sum()
    }

    pub fn n_hyper(&self) -> usize {
        self.blocks.iter().map(|b| b.0.n_hyper()).sum()
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.1).collect()
    }

    pub fn is_diagonal(&self) -> bool {
        self.blocks.iter().all(|b| b.0.is_diagonal())
    }

    /// Box of the transformed search space: `ln c`, `logit α`, and `β`
    /// (identity) per block.
    pub fn search_box(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for (family, _) in &self.blocks {
            lo.extend([LN_C_MIN, LOGIT_MIN]);
            hi.extend([LN_C_MAX, LOGIT_MAX]);
            if *family == KernelFamily::DC {
                lo.push(-1.0);
                hi.push(1.0);
            }
        }
        (lo, hi)
    }

    /// Natural-scale block configurations from a transformed point.
    pub fn configs(&self, z: &[f64]) -> Vec<KernelConfig> {
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut k = 0;
        for &(family, n) in &self.blocks {
            let c = z[k].exp();
            let alpha = logistic(z[k + 1]);
            let beta = if family == KernelFamily::DC {
                z[k + 2].clamp(-1.0, 1.0)
            } else {
                0.0
            };
            k += family.n_hyper();
            out.push(KernelConfig {
                family,
                n,
                c,
                alpha,
                beta,
            });
        }
        out
    }

    /// Transformed point from natural-scale configurations (clipped to the box).
    pub fn encode(&self, configs: &[KernelConfig]) -> Vec<f64> {
        let mut z = Vec::new();
        for cfg in configs {
            z.push(cfg.c.max(f64::MIN_POSITIVE).ln().clamp(LN_C_MIN, LN_C_MAX));
            z.push(logit(cfg.alpha).clamp(LOGIT_MIN, LOGIT_MAX));
            if cfg.family == KernelFamily::DC {
                z.push(cfg.beta.clamp(-1.0, 1.0));
            }
        }
        z
    }

    pub fn kernel(&self, configs: &[KernelConfig]) -> Result<KernelMatrix> {
        let parts = configs
            .iter()
            .map(build_kernel)
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&KernelMatrix> = parts.iter().collect();
        Ok(block_diag(&refs))
    }

    /// Square root of the diagonal of a diagonal layout.
    fn diagonal_sqrt(&self, configs: &[KernelConfig]) -> Vec<f64> {
        configs
            .iter()
            .flat_map(|c| c.diagonal())
            .map(|v| v.max(0.0).sqrt())
            .collect()
    }

    /// RLS on sufficient statistics for natural-scale configurations.
    pub fn solve(
        &self,
        stats: &GramStats,
        configs: &[KernelConfig],
        sigma2: f64,
    ) -> Result<RlsSolution> {
        if self.is_diagonal() {
            stats.solve_diagonal(&self.diagonal_sqrt(configs), sigma2)
        } else {
            stats.solve_kernel(&self.kernel(configs)?, sigma2)
        }
    }
}

pub const LN_C_MIN: f64 = -23.025850929940457; // ln 1e-10
pub const LN_C_MAX: f64 = 23.025850929940457;
pub const LOGIT_MIN: f64 = -20.0;
pub const LOGIT_MAX: f64 = 20.0;

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Where the noise variance inside SURE comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseVariance {
    /// [`noise_variance_plugin`] on the same data.
    PlugIn,
    Known(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct SureSettings {
    /// Number of generated starts, in addition to any warm starts.
    pub starts: usize,
    pub max_evals: usize,
    pub tol: f64,
    pub seed: u64,
    pub noise: NoiseVariance,
    /// Finish with a coordinate pattern search down to this step (transformed
    /// coordinates); `None` skips it.
    pub polish_to: Option<f64>,
}

impl Default for SureSettings {
    fn default() -> Self {
        SureSettings {
            starts: 5,
            max_evals: 500,
            tol: 1e-8,
            seed: 0,
            noise: NoiseVariance::PlugIn,
            polish_to: Some(2e-3),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SureFit {
    /// Tuned kernel configuration per block.
    pub configs: Vec<KernelConfig>,
    pub sigma2: f64,
    pub solution: RlsSolution,
    pub objective: f64,
    pub evals: usize,
}

/// Tunes the kernel hyper-parameters by minimizing SURE on raw data.
pub fn minimize_sure(
    y: &DVector<f64>,
    phi: &DMatrix<f64>,
    layout: &KernelLayout,
    settings: &SureSettings,
    warm: &[Vec<KernelConfig>],
) -> Result<SureFit> {
    if y.len() != phi.nrows() || phi.ncols() != layout.dim() {
        return Err(KrilcError::Dimension(
            "Y, Phi and kernel layout disagree".into(),
        ));
    }
    minimize_sure_gram(&GramStats::from_data(y, phi), layout, settings, warm)
}

/// Tunes the kernel hyper-parameters by minimizing SURE on sufficient statistics.
///
/// The search runs over `ln c`, `logit α` (and `β` for DC) with the noise
/// variance fixed by `settings.noise`; starts are the warm starts followed by
/// `settings.starts` generated points (a data-scaled centre point, then seeded
/// random points).
pub fn minimize_sure_gram(
    stats: &GramStats,
    layout: &KernelLayout,
    settings: &SureSettings,
    warm: &[Vec<KernelConfig>],
) -> Result<SureFit> {
    if stats.dim() != layout.dim() {
        return Err(KrilcError::Dimension("kernel layout does not match data".into()));
    }
    let sigma2 = match settings.noise {
        NoiseVariance::Known(s) => s.max(SIGMA2_FLOOR),
        NoiseVariance::PlugIn => {
            noise_variance_plugin(stats, &layout.block_sizes()).unwrap_or(1.0)
        }
    };
    let (lo, hi) = layout.search_box();
    let objective = |z: &[f64]| -> f64 {
        let configs = layout.configs(z);
        match layout.solve(stats, &configs, sigma2) {
            Ok(sol) => sol.sure(sigma2),
            Err(_) => f64::INFINITY,
        }
    };

    let mut starts: Vec<(Vec<f64>, f64)> = warm
        .iter()
        .map(|w| (layout.encode(w), 0.5))
        .collect();
    let trace_g = stats.g.trace();
    let c0 = if trace_g > 0.0 && stats.yy > 0.0 {
        (stats.yy / trace_g).clamp(1e-8, 1e8)
    } else {
        1.0
    };
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    for s in 0..settings.starts {
        let mut z = Vec::with_capacity(layout.n_hyper());
        for (family, _) in &layout.blocks {
            if s == 0 {
                z.push(c0.ln());
                z.push(0.0);
                if *family == KernelFamily::DC {
                    z.push(0.5);
                }
            } else {
                z.push(c0.ln() + rng.gen_range(-6.9..6.9));
                z.push(logit(rng.gen_range(0.05..0.95)));
                if *family == KernelFamily::DC {
                    z.push(rng.gen_range(-0.9..0.9));
                }
            }
        }
        starts.push((z, 1.0));
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut evals = 0;
    for (z0, step) in &starts {
        let res = nelder_mead(
            objective,
            z0,
            &lo,
            &hi,
            SimplexOptions {
                tol: settings.tol,
                max_evals: settings.max_evals,
                step: *step,
            },
        );
        evals += res.evals;
        if res.f.is_finite() && best.as_ref().map_or(true, |b| res.f < b.1) {
            best = Some((res.x, res.f));
        }
    }
    let (mut z, mut f) = best.ok_or(KrilcError::OptimizationFailed {
        starts: starts.len(),
    })?;
    // warm-started problems begin at the previous optimum and skip the polish
    if let (Some(min_step), true) = (settings.polish_to, warm.is_empty()) {
        evals += pattern_polish(objective, &mut z, &mut f, &lo, &hi, 0.05, min_step, 400);
    }
    let configs = layout.configs(&z);
    let solution = layout.solve(stats, &configs, sigma2)?;
    Ok(SureFit {
        configs,
        sigma2,
        objective: solution.sure(sigma2),
        solution,
        evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn eye_kernel(n: usize, scale: f64) -> KernelMatrix {
        KernelMatrix {
            values: DMatrix::identity(n, n) * scale,
            blocks: vec![],
        }
    }

    fn random_problem(rng: &mut ChaCha8Rng, n_obs: usize, n: usize) -> (DVector<f64>, DMatrix<f64>) {
        let phi = DMatrix::from_fn(n_obs, n, |_, _| StandardNormal.sample(rng));
        let y = DVector::from_fn(n_obs, |_, _| StandardNormal.sample(rng));
        (y, phi)
    }

    #[test]
    fn identity_example() {
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let phi = DMatrix::identity(2, 2);
        let k = eye_kernel(2, 1.0);
        let prob = RegressionProblem {
            y: &y,
            phi: &phi,
            sigma2: 1.0,
            kernel: &k,
        };
        let sol = rls_solve(&prob).unwrap();
        assert_relative_eq!(sol.theta_hat[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(sol.theta_hat[1], 1.0, epsilon = 1e-15);
        assert_relative_eq!(sol.hat_matrix_trace, 1.0, epsilon = 1e-15);
        // hand evaluation: ‖[0.5, 1]‖² + 2·1·Trace(0.5·I₂)
        let brute = 0.5f64.powi(2) + 1.0f64.powi(2) + 2.0 * (0.5 + 0.5);
        assert_relative_eq!(sure_objective(&prob).unwrap(), brute, epsilon = 1e-14);
        assert_relative_eq!(brute, 3.25);
    }

    #[test]
    fn empty_data_gives_zero() {
        let y = DVector::zeros(0);
        let phi = DMatrix::zeros(0, 3);
        let k = eye_kernel(3, 1.0);
        let prob = RegressionProblem {
            y: &y,
            phi: &phi,
            sigma2: 0.3,
            kernel: &k,
        };
        let sol = rls_solve(&prob).unwrap();
        assert_eq!(sol.theta_hat, DVector::zeros(3));
        assert_eq!(sol.hat_matrix_trace, 0.0);
        assert_eq!(sure_objective(&prob).unwrap(), 0.0);
    }

    #[test]
    fn zero_observations_leave_only_trace_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, phi) = random_problem(&mut rng, 6, 3);
        let y = DVector::zeros(6);
        let k = eye_kernel(3, 2.0);
        let prob = RegressionProblem {
            y: &y,
            phi: &phi,
            sigma2: 0.5,
            kernel: &k,
        };
        let sol = rls_solve(&prob).unwrap();
        assert!(sol.theta_hat.norm() == 0.0);
        assert_relative_eq!(
            sure_objective(&prob).unwrap(),
            2.0 * 0.5 * sol.hat_matrix_trace,
            epsilon = 1e-14
        );
    }

    #[test]
    fn singular_kernel_zeroes_null_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (y, phi) = random_problem(&mut rng, 8, 3);
        let mut k = eye_kernel(3, 1.0);
        k.values[(2, 2)] = 0.0;
        let prob = RegressionProblem {
            y: &y,
            phi: &phi,
            sigma2: 0.1,
            kernel: &k,
        };
        let sol = rls_solve(&prob).unwrap();
        assert_eq!(sol.theta_hat[2], 0.0);
        assert!(sol.theta_hat[0] != 0.0);
    }

    #[test]
    fn degenerate_noiseless_system_is_singular() {
        let y = DVector::from_vec(vec![1.0, 1.0]);
        let phi = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let k = eye_kernel(1, 1.0);
        let prob = RegressionProblem {
            y: &y,
            phi: &phi,
            sigma2: 0.0,
            kernel: &k,
        };
        assert!(matches!(rls_solve(&prob), Err(KrilcError::Singular(_))));
    }

    #[test]
    fn ls_examples() {
        let x = ls_solve(&DVector::from_vec(vec![3.0, 4.0]), &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(x.as_slice(), &[3.0, 4.0]);
        let x = ls_solve(
            &DVector::from_vec(vec![1.0, 3.0]),
            &DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
        )
        .unwrap();
        assert_relative_eq!(x[0], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn ls_recovers_noiseless_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (_, phi) = random_problem(&mut rng, 50, 5);
        let truth = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0, -0.25]);
        let y = &phi * &truth;
        let est = ls_solve(&y, &phi).unwrap();
        assert!((est - truth).amax() < 1e-10);
    }

    #[test]
    fn ls_flags_rank_deficiency() {
        let phi = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            ls_solve(&y, &phi),
            Err(KrilcError::IllConditioned { rank: 1, cols: 2 })
        ));
        let mn = ls_min_norm(&y, &phi).unwrap();
        assert_relative_eq!(mn[0] * 1.0 + mn[1] * 2.0, 1.0, epsilon = 1e-10);
        assert_relative_eq!(mn[1], 2.0 * mn[0], epsilon = 1e-10);
    }

    #[test]
    fn gram_path_matches_canonical_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (n_obs, n) in [(3, 6), (20, 6), (6, 6)] {
            let (y, phi) = random_problem(&mut rng, n_obs, n);
            let stats = GramStats::from_data(&y, &phi);
            for cfg in [
                KernelConfig::tc(n, 1.5, 0.7).unwrap(),
                KernelConfig::di(n, 0.8, 0.6).unwrap(),
                KernelConfig::dc(n, 1.1, 0.5, 0.3).unwrap(),
                KernelConfig::di(n, 1.0, 0.0).unwrap(),
            ] {
                let k = build_kernel(&cfg).unwrap();
                let canonical = rls_solve(&RegressionProblem {
                    y: &y,
                    phi: &phi,
                    sigma2: 0.2,
                    kernel: &k,
                })
                .unwrap();
                let fast = stats.solve_kernel(&k, 0.2).unwrap();
                assert!((&canonical.theta_hat - &fast.theta_hat).amax() < 1e-10);
                assert_relative_eq!(
                    canonical.hat_matrix_trace,
                    fast.hat_matrix_trace,
                    epsilon = 1e-9
                );
                assert_relative_eq!(
                    canonical.residual_norm2,
                    fast.residual_norm2,
                    epsilon = 1e-9,
                    max_relative = 1e-9
                );
            }
        }
    }

    #[test]
    fn plugin_noise_variance_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (y, phi) = random_problem(&mut rng, 30, 4);
        let stats = GramStats::from_data(&y, &phi);
        let theta = ls_solve(&y, &phi).unwrap();
        let rss = (&y - &phi * theta).norm_squared();
        let plug = noise_variance_plugin(&stats, &[2, 2]).unwrap();
        assert_relative_eq!(plug, rss / 26.0, max_relative = 1e-8);
    }

    #[test]
    fn plugin_noise_variance_short_data() {
        let stats = GramStats::new(4);
        assert!(noise_variance_plugin(&stats, &[2, 2]).is_none());
        let mut stats = GramStats::new(4);
        stats.push_row(&[1.0, 0.0, 2.0, 0.0], 3.0);
        // N = 1: no column fits, so the estimate is the mean square of Y
        assert_relative_eq!(noise_variance_plugin(&stats, &[2, 2]).unwrap(), 9.0);
    }

    #[test]
    fn joint_noise_variance_search_is_degenerate() {
        // Shrinking σ² and c together leaves θ̂ and Trace(H) unchanged while the
        // trace penalty falls, so SURE with σ² as a free coordinate runs to the floor.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (y, phi) = random_problem(&mut rng, 15, 5);
        let stats = GramStats::from_data(&y, &phi);
        let layout = KernelLayout::single(KernelFamily::DI, 5);
        let mut last = f64::INFINITY;
        for scale in [1.0, 1e-2, 1e-4] {
            let cfg = KernelConfig::di(5, 2.0 * scale, 0.6).unwrap();
            let sol = layout.solve(&stats, &[cfg], 0.5 * scale).unwrap();
            let obj = sol.sure(0.5 * scale);
            assert!(obj < last);
            last = obj;
        }
    }
}
