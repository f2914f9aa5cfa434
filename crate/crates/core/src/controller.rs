//! Constrained learning-controller design for one `(j, t)`.
//!
//! The design regression is `y_c = φ_cᵀθ_c + v_c` with `φ_c = b̂₁E`, solved
//! under `‖θ_c‖ ≤ d_c` and `|u_prev + Eᵀθ_c| ≤ d_u` through its Lagrange dual.
//! Because `φ_c` is parallel to `E`, the stationarity system is a rank-one
//! update of `σ_c²P_c⁻¹ + λ₂I`; in the eigenbasis of `P_c` every quantity the
//! dual search needs has an O(n_c) closed form. [`dual_theta`] keeps the dense
//! solve for checking.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KrilcError, Result};
use crate::kernels::{build_kernel, KernelConfig, KernelFamily, KernelMatrix};
use crate::model_estimation::ModelEstimate;
use crate::optim::{decreasing_root_log, nelder_mead, pattern_polish, SimplexOptions};
use crate::regression::{logistic, logit, LN_C_MAX, LN_C_MIN, LOGIT_MAX, LOGIT_MIN};
use crate::store::IterationStore;

pub const B1_GATE: f64 = 1e-8;
pub const KKT_TOL: f64 = 1e-5;
pub const LAMBDA_MIN: f64 = 1e-8;
pub const LAMBDA_MAX: f64 = 1e6;

/// Smallest `LAMBDA_MAX·10⁴ᵏ` where the nonincreasing `g` is no longer positive.
fn upper_bracket(g: &dyn Fn(f64) -> f64) -> f64 {
    let mut hi = LAMBDA_MAX;
    while g(hi) > 0.0 && hi < 1e300 {
        hi *= 1e4;
    }
    hi
}
/// Ridge used when the regularizer is dropped (`P_c⁻¹ = 0`).
pub const RIDGE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerRegression {
    pub y_c: f64,
    pub phi_c: DVector<f64>,
    /// `E[m-1] = e_{j−m}(t+1)`
    pub e: DVector<f64>,
    pub u_prev: f64,
    pub b1_hat: f64,
    pub sigma_c2: f64,
    pub d_u: f64,
    pub d_c: f64,
}

/// `φ̄_j(t) = [0, u(t−1), …, u(t−n_b+1), −y(t), …, −y(t−n_a+1)]` from the
/// current iteration's signals.
pub fn predictor_regressor(u: &[f64], y: &[f64], t: usize, n_a: usize, n_b: usize) -> Vec<f64> {
    let mut row = Vec::with_capacity(n_a + n_b);
    row.push(0.0);
    for k in 1..n_b {
        row.push(match t.checked_sub(k) {
            Some(s) if s > 0 => u[s],
            _ => 0.0,
        });
    }
    for l in 0..n_a {
        row.push(match t.checked_sub(l) {
            Some(s) => -y[s],
            None => 0.0,
        });
    }
    row
}

/// Everything the design at `(j, t)` needs besides the store.
#[derive(Debug, Clone, Copy)]
pub struct DesignInputs<'a> {
    /// Model estimate for time `t + 1`.
    pub model_next: &'a ModelEstimate,
    /// Current-iteration inputs, valid for times `< t`.
    pub u_cur: &'a [f64],
    /// Current-iteration outputs, valid for times `<= t`.
    pub y_cur: &'a [f64],
    pub sigma_c2: f64,
    pub d_u: f64,
    pub d_c: f64,
}

pub fn build_controller_regression(
    store: &IterationStore,
    j: usize,
    t: usize,
    n_c: usize,
    inputs: &DesignInputs<'_>,
) -> Result<ControllerRegression> {
    let m = inputs.model_next;
    if m.t != t + 1 {
        return Err(KrilcError::Sequencing(format!(
            "controller at t={t} needs the model for t={}, got t={}",
            t + 1,
            m.t
        )));
    }
    if t + 1 > store.horizon() {
        return Err(KrilcError::Index(format!("t={t} has no successor in the horizon")));
    }
    let n_b = m.theta_b_hat.len();
    let n_a = m.theta_a_hat.len();
    let phi_bar = predictor_regressor(inputs.u_cur, inputs.y_cur, t, n_a, n_b);
    let theta = m.theta();
    let pred: f64 = phi_bar.iter().zip(&theta).map(|(a, b)| a * b).sum();
    let b1 = m.b1();
    let u_prev = if j >= 1 && store.contains(j - 1) {
        store.u(j - 1)?[t]
    } else {
        0.0
    };
    let e = DVector::from_fn(n_c, |k, _| store.error_or_zero(j as isize - 1 - k as isize, t + 1));
    Ok(ControllerRegression {
        y_c: store.reference()[t + 1] - pred - b1 * u_prev,
        phi_c: &e * b1,
        e,
        u_prev,
        b1_hat: b1,
        sigma_c2: inputs.sigma_c2,
        d_u: inputs.d_u,
        d_c: inputs.d_c,
    })
}

/// Regularizer of the design problem.
#[derive(Debug, Clone)]
pub enum ControllerPrior {
    Kernel(KernelMatrix),
    /// `P_c⁻¹ = 0` (least squares), with the ridge floor.
    Flat,
}

/// Dense solve of the Lagrangian stationarity system at `(λ₁, λ₂)`.
///
/// With a kernel the system is solved for `w` with `θ = Lw`, `P_c = LLᵀ`, so a
/// singular `P_c` removes its null space instead of being inverted.
pub fn dual_theta(
    reg: &ControllerRegression,
    lambda1: f64,
    lambda2: f64,
    prior: &ControllerPrior,
) -> Result<DVector<f64>> {
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(KrilcError::ParameterDomain {
            param: "lambda",
            value: lambda1.min(lambda2),
            bound: "lambda >= 0",
        });
    }
    let n = reg.e.len();
    let a = &reg.phi_c * reg.phi_c.transpose()
        + &reg.e * reg.e.transpose() * lambda1
        + DMatrix::identity(n, n) * lambda2;
    let rhs = &reg.phi_c * reg.y_c - &reg.e * (lambda1 * reg.u_prev);
    match prior {
        ControllerPrior::Flat => {
            let m = a + DMatrix::identity(n, n) * RIDGE;
            m.lu()
                .solve(&rhs)
                .ok_or_else(|| KrilcError::Singular("controller system".into()))
        }
        ControllerPrior::Kernel(k) => {
            let l = k.factor();
            let mut mw = l.transpose() * a * &l;
            for i in 0..mw.nrows() {
                mw[(i, i)] += reg.sigma_c2;
            }
            let w = mw
                .lu()
                .solve(&(l.transpose() * rhs))
                .ok_or_else(|| KrilcError::Singular("controller system".into()))?;
            Ok(l * w)
        }
    }
}

/// The design problem in the eigenbasis of `P_c`.
#[derive(Debug, Clone)]
pub struct DualSystem {
    /// Eigenvectors of `P_c` (`None` means the identity).
    basis: Option<DMatrix<f64>>,
    /// `Qᵀ E`, with null-space components of `P_c` dropped.
    e_rot: Vec<f64>,
    /// Eigenvalues of `σ_c²P_c⁻¹` on the kept components.
    d: Vec<f64>,
    /// Index of each kept component in the full basis.
    keep: Vec<usize>,
    n: usize,
    b1: f64,
    y: f64,
    u: f64,
    d_u: f64,
    d_c: f64,
}

/// Quantities at one dual point.
#[derive(Debug, Clone, Copy)]
pub struct DualPoint {
    pub lambda1: f64,
    pub lambda2: f64,
    /// `EᵀΔ⁻¹E` with `Δ = σ_c²P_c⁻¹ + λ₂I`
    q: f64,
    /// `EᵀΔ⁻²E`
    r: f64,
    /// `θ = scale·Δ⁻¹E`
    scale: f64,
    kappa: f64,
}

impl DualPoint {
    /// `Eᵀθ`
    pub fn e_theta(&self) -> f64 {
        self.scale * self.q
    }

    pub fn theta_norm2(&self) -> f64 {
        self.scale * self.scale * self.r
    }

    /// `H_c = φ_cᵀM⁻¹φ_c`
    fn hat(&self, b1: f64) -> f64 {
        (b1 * b1 * self.q / (1.0 + self.kappa * self.q)).clamp(0.0, 1.0)
    }
}

impl DualSystem {
    pub fn new(reg: &ControllerRegression, prior: &ControllerPrior) -> Self {
        let n = reg.e.len();
        let (basis, p): (Option<DMatrix<f64>>, Vec<f64>) = match prior {
            ControllerPrior::Flat => (None, vec![f64::INFINITY; n]),
            ControllerPrior::Kernel(k) if k.is_diagonal() => {
                (None, (0..n).map(|i| k.values[(i, i)]).collect())
            }
            ControllerPrior::Kernel(k) => {
                let eig = SymmetricEigen::new(k.values.clone());
                (Some(eig.eigenvectors), eig.eigenvalues.iter().copied().collect())
            }
        };
        let e_full: Vec<f64> = match &basis {
            None => reg.e.iter().copied().collect(),
            Some(q) => (q.transpose() * &reg.e).iter().copied().collect(),
        };
        let pmax = p.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
        let mut keep = Vec::new();
        let mut d = Vec::new();
        let mut e_rot = Vec::new();
        for i in 0..n {
            if p[i].is_infinite() {
                keep.push(i);
                d.push(RIDGE);
                e_rot.push(e_full[i]);
            } else if p[i] > 1e-14 * pmax && p[i] > 0.0 {
                keep.push(i);
                d.push(reg.sigma_c2 / p[i]);
                e_rot.push(e_full[i]);
            }
        }
        DualSystem {
            basis,
            e_rot,
            d,
            keep,
            n,
            b1: reg.b1_hat,
            y: reg.y_c,
            u: reg.u_prev,
            d_u: reg.d_u,
            d_c: reg.d_c,
        }
    }

    pub fn point(&self, lambda1: f64, lambda2: f64) -> DualPoint {
        let mut q = 0.0;
        let mut r = 0.0;
        for (e, d) in self.e_rot.iter().zip(&self.d) {
            let inv = 1.0 / (d + lambda2);
            q += e * e * inv;
            r += e * e * inv * inv;
        }
        let kappa = self.b1 * self.b1 + lambda1;
        let s = self.b1 * self.y - lambda1 * self.u;
        DualPoint {
            lambda1,
            lambda2,
            q,
            r,
            scale: s / (1.0 + kappa * q),
            kappa,
        }
    }

    pub fn theta(&self, p: &DualPoint) -> DVector<f64> {
        let mut rot = DVector::zeros(self.n);
        for ((&i, e), d) in self.keep.iter().zip(&self.e_rot).zip(&self.d) {
            rot[i] = p.scale * e / (d + p.lambda2);
        }
        match &self.basis {
            None => rot,
            Some(q) => q * rot,
        }
    }

    fn g_input(&self, p: &DualPoint) -> f64 {
        (p.e_theta() + self.u).powi(2) - self.d_u * self.d_u
    }

    fn g_norm(&self, p: &DualPoint) -> f64 {
        p.theta_norm2() - self.d_c * self.d_c
    }

    /// `(y_c − φ_cᵀθ)² + 2σ_c²H_c` at `p`.
    pub fn sure(&self, p: &DualPoint, sigma_c2: f64) -> f64 {
        (self.y - self.b1 * p.e_theta()).powi(2) + 2.0 * sigma_c2 * p.hat(self.b1)
    }

    /// Primal objective `(y_c − φ_cᵀθ)² + σ_c²θᵀP_c⁻¹θ` at `p`.
    pub fn primal(&self, p: &DualPoint) -> f64 {
        let mut reg = 0.0;
        for (e, d) in self.e_rot.iter().zip(&self.d) {
            let th = p.scale * e / (d + p.lambda2);
            reg += d * th * th;
        }
        (self.y - self.b1 * p.e_theta()).powi(2) + reg
    }

    /// Lagrange dual function value at `p`.
    pub fn dual_value(&self, p: &DualPoint) -> f64 {
        self.primal(p) + p.lambda1 * self.g_input(p) + p.lambda2 * self.g_norm(p)
    }

    /// Whether any `θ` in the reachable ball keeps the input within bounds.
    pub fn feasible(&self) -> bool {
        let reach = self.d_c * self.e_rot.iter().map(|e| e * e).sum::<f64>().sqrt();
        self.u.abs() - reach <= self.d_u
    }

    /// `λ₂` maximizing the dual at fixed `λ₁`.
    fn best_lambda2(&self, lambda1: f64) -> f64 {
        if self.g_norm(&self.point(lambda1, 0.0)) <= 0.0 {
            return 0.0;
        }
        let g = |l2| self.g_norm(&self.point(lambda1, l2));
        decreasing_root_log(g, LAMBDA_MIN, upper_bracket(&g), 1e-13, 200)
    }

    /// Maximizer of the dual over `λ₁, λ₂ ≥ 0`.
    pub fn maximize(&self) -> DualPoint {
        let p0 = self.point(0.0, 0.0);
        if self.g_input(&p0) <= 0.0 && self.g_norm(&p0) <= 0.0 {
            return p0;
        }
        let outer = |l1: f64| {
            let l2 = self.best_lambda2(l1);
            self.g_input(&self.point(l1, l2))
        };
        let l1 = if outer(0.0) <= 0.0 {
            0.0
        } else {
            decreasing_root_log(outer, LAMBDA_MIN, upper_bracket(&outer), 1e-13, 200)
        };
        self.point(l1, self.best_lambda2(l1))
    }

    /// Coordinate-wise bisection on the dual, starting at `p`.
    fn refine(&self, mut p: DualPoint, rounds: usize, sigma_c2: f64) -> (DualPoint, f64, usize) {
        let bisect = |g: &dyn Fn(f64) -> f64| -> f64 {
            if g(0.0) <= 0.0 {
                return 0.0;
            }
            let (mut lo, mut hi) = (0.0f64, upper_bracket(g));
            if g(hi) > 0.0 {
                return hi;
            }
            for _ in 0..200 {
                let mid = if lo == 0.0 { hi * 1e-12 } else { (lo * hi).sqrt() };
                let mid = if mid <= lo || mid >= hi { 0.5 * (lo + hi) } else { mid };
                if g(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-15 * hi {
                    break;
                }
            }
            hi
        };
        let mut res = self.kkt(&p, sigma_c2);
        let mut used = 0;
        while res > KKT_TOL && used < rounds {
            used += 1;
            let l1 = p.lambda1;
            let l2 = bisect(&|l2| self.g_norm(&self.point(l1, l2)));
            let l1 = bisect(&|l1| self.g_input(&self.point(l1, l2)));
            p = self.point(l1, l2);
            res = self.kkt(&p, sigma_c2);
        }
        (p, res, used)
    }

    /// Largest violation of the six KKT conditions, with stationarity measured
    /// in the original coordinates relative to the right-hand side.
    pub fn kkt(&self, p: &DualPoint, _sigma_c2: f64) -> f64 {
        let theta = self.theta(p);
        let g1 = self.g_input(p);
        let g2 = self.g_norm(p);
        let e_full = self.e_full();
        let s = self.b1 * self.y - p.lambda1 * self.u;
        // (κEEᵀ + λ₂I)θ − sE + σ_c²P_c⁻¹θ, the last term on kept components
        let et = e_full.dot(&theta);
        let res = &e_full * (p.kappa * et - s) + &theta * p.lambda2;
        let mut rot = match &self.basis {
            None => res.clone(),
            Some(q) => q.transpose() * &res,
        };
        let theta_rot = match &self.basis {
            None => theta.clone(),
            Some(q) => q.transpose() * &theta,
        };
        let mut kept = vec![false; self.n];
        for (&i, d) in self.keep.iter().zip(&self.d) {
            rot[i] += d * theta_rot[i];
            kept[i] = true;
        }
        let mut stat: f64 = 0.0;
        for i in 0..self.n {
            if kept[i] {
                stat = stat.max(rot[i].abs());
            } else {
                stat = stat.max(theta_rot[i].abs());
            }
        }
        let scale = (s.abs() * e_full.amax()).max(1.0);
        // constraints relative to their bounds; slackness is met when either
        // the multiplier or the relative gap vanishes
        let (r1, r2) = (g1 / (self.d_u * self.d_u), g2 / (self.d_c * self.d_c));
        let violations = [
            r1.max(0.0),
            r2.max(0.0),
            (p.lambda1 * g1).abs().min(r1.abs()),
            (p.lambda2 * g2).abs().min(r2.abs()),
            stat / scale,
            (-p.lambda1).max(0.0) + (-p.lambda2).max(0.0),
        ];
        violations.into_iter().fold(0.0, f64::max)
    }

    fn e_full(&self) -> DVector<f64> {
        let mut rot = DVector::zeros(self.n);
        for (&i, e) in self.keep.iter().zip(&self.e_rot) {
            rot[i] = *e;
        }
        // components outside `keep` do not affect θ; recover them from the basis
        match &self.basis {
            None => rot,
            Some(q) => q * rot,
        }
    }
}

pub fn maximize_dual(reg: &ControllerRegression, prior: &ControllerPrior) -> (f64, f64) {
    let p = DualSystem::new(reg, prior).maximize();
    (p.lambda1, p.lambda2)
}

/// Why the returned `θ̂_c` differs from the plain dual solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ControllerFlags {
    /// `|b̂₁|` below the gate or `φ_c = 0`: `θ̂_c = 0`.
    pub degenerate: bool,
    /// No `θ` in the ball keeps `u` within bounds: `θ̂_c = 0`.
    pub infeasible: bool,
    /// KKT residual stayed above tolerance after refinement.
    pub kkt_unmet: bool,
    /// `θ̂_c` scaled back onto the ball.
    pub projected: bool,
    /// `u_new` clipped to `±d_u`.
    pub clipped: bool,
    /// Hyper-parameter search failed; previous or default kernel used.
    pub tuning_failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerEstimate {
    pub theta_c_hat: DVector<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Tuned kernel; `None` for the least-squares variant.
    pub kernel: Option<KernelConfig>,
    pub sigma_c2: f64,
    pub kkt_residual: f64,
    pub u_new: f64,
    pub flags: ControllerFlags,
}

/// Finishes a design: projection onto the ball, input update and clipping.
fn finish(
    reg: &ControllerRegression,
    mut theta: DVector<f64>,
    lambda1: f64,
    lambda2: f64,
    kkt_residual: f64,
    kernel: Option<KernelConfig>,
    mut flags: ControllerFlags,
) -> ControllerEstimate {
    let norm = theta.norm();
    if norm > reg.d_c {
        theta *= reg.d_c / norm;
        if theta.norm() > reg.d_c {
            theta *= 1.0 - 1e-15;
        }
        flags.projected = true;
    }
    let mut u_new = reg.u_prev + reg.e.dot(&theta);
    if u_new.abs() > reg.d_u {
        log::debug!("clipping u = {u_new} to ±{}", reg.d_u);
        u_new = u_new.clamp(-reg.d_u, reg.d_u);
        flags.clipped = true;
    }
    ControllerEstimate {
        theta_c_hat: theta,
        lambda1,
        lambda2,
        kernel,
        sigma_c2: reg.sigma_c2,
        kkt_residual,
        u_new,
        flags,
    }
}

fn is_degenerate(reg: &ControllerRegression) -> bool {
    reg.b1_hat.abs() < B1_GATE || reg.phi_c.iter().all(|&v| v == 0.0) || reg.d_c == 0.0
}

/// Solves the constrained design problem at a fixed prior.
pub fn solve_constrained_rls(
    reg: &ControllerRegression,
    prior: &ControllerPrior,
    kernel: Option<KernelConfig>,
) -> ControllerEstimate {
    let n = reg.e.len();
    let mut flags = ControllerFlags::default();
    if is_degenerate(reg) {
        flags.degenerate = true;
        return finish(reg, DVector::zeros(n), 0.0, 0.0, 0.0, kernel, flags);
    }
    let sys = DualSystem::new(reg, prior);
    if !sys.feasible() {
        flags.infeasible = true;
        return finish(reg, DVector::zeros(n), 0.0, 0.0, 0.0, kernel, flags);
    }
    let p = sys.maximize();
    let (p, res, _) = sys.refine(p, 200, reg.sigma_c2);
    if res > KKT_TOL {
        log::warn!("controller KKT residual {res:.3e} above tolerance");
        flags.kkt_unmet = true;
    }
    let theta = sys.theta(&p);
    finish(reg, theta, p.lambda1, p.lambda2, res, kernel, flags)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerTuning {
    pub starts: usize,
    /// Generated starts once a warm start is available.
    pub warm_starts: usize,
    pub max_evals: usize,
    pub tol: f64,
    pub polish_to: Option<f64>,
}

impl Default for ControllerTuning {
    fn default() -> Self {
        ControllerTuning {
            starts: 5,
            warm_starts: 1,
            max_evals: 500,
            tol: 1e-8,
            polish_to: None,
        }
    }
}

/// Adapted SURE objective for a kernel configuration.
pub fn controller_sure(reg: &ControllerRegression, config: &KernelConfig) -> Result<f64> {
    let k = build_kernel(config)?;
    let sys = DualSystem::new(reg, &ControllerPrior::Kernel(k));
    let p = sys.maximize();
    Ok(sys.sure(&p, reg.sigma_c2))
}

/// Tunes `(c, α[, β])` of the controller kernel by the adapted SURE criterion,
/// re-maximizing the dual for every candidate.
///
/// Returns the tuned configuration and its objective, or `None` when every
/// start failed.
pub fn sure_controller(
    reg: &ControllerRegression,
    family: KernelFamily,
    tuning: &ControllerTuning,
    seed: u64,
    warm: Option<&KernelConfig>,
) -> Option<(KernelConfig, f64)> {
    let n = reg.e.len();
    if is_degenerate(reg) {
        let cfg = KernelConfig::new(family, n, &vec![0.0; family.n_hyper()]).ok()?;
        return Some((cfg, reg.y_c * reg.y_c));
    }
    let decode = |z: &[f64]| KernelConfig {
        family,
        n,
        c: z[0].exp(),
        alpha: logistic(z[1]),
        beta: if family == KernelFamily::DC { z[2].clamp(-1.0, 1.0) } else { 0.0 },
    };
    let diagonal = family.is_diagonal();
    let objective = |z: &[f64]| -> f64 {
        let cfg = decode(z);
        if diagonal {
            // skip the kernel matrix allocation on the common path
            let diag = cfg.diagonal();
            let k = KernelMatrix {
                values: DMatrix::from_diagonal(&DVector::from_vec(diag)),
                blocks: vec![cfg],
            };
            let sys = DualSystem::new(reg, &ControllerPrior::Kernel(k));
            let p = sys.maximize();
            sys.sure(&p, reg.sigma_c2)
        } else {
            controller_sure(reg, &cfg).unwrap_or(f64::INFINITY)
        }
    };
    let mut lo = vec![LN_C_MIN, LOGIT_MIN];
    let mut hi = vec![LN_C_MAX, LOGIT_MAX];
    if family == KernelFamily::DC {
        lo.push(-1.0);
        hi.push(1.0);
    }
    let mut starts: Vec<(Vec<f64>, f64)> = Vec::new();
    if let Some(w) = warm {
        let mut z = vec![w.c.max(f64::MIN_POSITIVE).ln().clamp(LN_C_MIN, LN_C_MAX), logit(w.alpha).clamp(LOGIT_MIN, LOGIT_MAX)];
        if family == KernelFamily::DC {
            z.push(w.beta);
        }
        starts.push((z, 0.5));
    }
    let generated = if warm.is_some() { tuning.warm_starts } else { tuning.starts };
    // scale of θ that would zero the predicted error
    let e2 = reg.e.norm_squared().max(f64::MIN_POSITIVE);
    let c0 = ((reg.y_c / reg.b1_hat).powi(2) / e2).clamp(1e-8, 1e8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in 0..generated {
        let mut z = if s == 0 {
            vec![c0.ln(), 0.0]
        } else {
            vec![c0.ln() + rng.gen_range(-6.9..6.9), logit(rng.gen_range(0.05..0.95))]
        };
        if family == KernelFamily::DC {
            z.push(if s == 0 { 0.5 } else { rng.gen_range(-0.9..0.9) });
        }
        starts.push((z, 1.0));
    }
    let mut best: Option<(Vec<f64>, f64)> = None;
    for (z0, step) in &starts {
        let r = nelder_mead(
            objective,
            z0,
            &lo,
            &hi,
            SimplexOptions {
                tol: tuning.tol,
                max_evals: tuning.max_evals,
                step: *step,
            },
        );
        if r.f.is_finite() && best.as_ref().map_or(true, |b| r.f < b.1) {
            best = Some((r.x, r.f));
        }
    }
    let (mut z, mut f) = best?;
    if let Some(min_step) = tuning.polish_to {
        pattern_polish(objective, &mut z, &mut f, &lo, &hi, 0.05, min_step, 200);
    }
    Some((decode(&z), f))
}

/// Regularized or least-squares controller design for one `(j, t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerSettings {
    pub n_c: usize,
    pub d_u: f64,
    pub d_c: f64,
    pub family: KernelFamily,
    /// `false` drops the regularizer (`P_c⁻¹ = 0`).
    pub regularized: bool,
    pub tuning: ControllerTuning,
}

pub fn design_controller(
    reg: &ControllerRegression,
    settings: &ControllerSettings,
    seed: u64,
    warm: Option<&KernelConfig>,
) -> Result<ControllerEstimate> {
    if !settings.regularized {
        return Ok(solve_constrained_rls(reg, &ControllerPrior::Flat, None));
    }
    let n = reg.e.len();
    let (cfg, failed) = match sure_controller(reg, settings.family, &settings.tuning, seed, warm) {
        Some((cfg, _)) => (cfg, false),
        None => {
            log::warn!("controller hyper-parameter search failed; reusing previous kernel");
            let fallback = warm
                .copied()
                .unwrap_or(KernelConfig::new(settings.family, n, &default_eta(settings.family))?);
            (fallback, true)
        }
    };
    let k = build_kernel(&cfg)?;
    let mut est = solve_constrained_rls(reg, &ControllerPrior::Kernel(k), Some(cfg));
    est.flags.tuning_failed = failed;
    Ok(est)
}

fn default_eta(family: KernelFamily) -> Vec<f64> {
    match family {
        KernelFamily::DC => vec![1.0, 0.5, 0.5],
        _ => vec![1.0, 0.5],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn reg2(y: f64, e: [f64; 2], b1: f64, u: f64, d_u: f64, d_c: f64) -> ControllerRegression {
        let e = DVector::from_vec(e.to_vec());
        ControllerRegression {
            y_c: y,
            phi_c: &e * b1,
            e,
            u_prev: u,
            b1_hat: b1,
            sigma_c2: 1.0,
            d_u,
            d_c,
        }
    }

    fn identity_prior(n: usize) -> ControllerPrior {
        ControllerPrior::Kernel(KernelMatrix {
            values: DMatrix::identity(n, n),
            blocks: vec![],
        })
    }

    #[test]
    fn hand_instance() {
        let reg = reg2(1.0, [1.0, 0.0], 1.0, 0.0, 10.0, 10.0);
        let prior = ControllerPrior::Kernel(KernelMatrix {
            values: DMatrix::identity(2, 2),
            blocks: vec![],
        });
        let th = dual_theta(&reg, 1.0, 0.0, &prior).unwrap();
        assert_relative_eq!(th[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(th[1], 0.0);
        let sys = DualSystem::new(&reg, &prior);
        let fast = sys.theta(&sys.point(1.0, 0.0));
        assert_relative_eq!(fast[0], 1.0 / 3.0, epsilon = 1e-15);
        let _ = identity_prior(2);
    }

    fn random_reg(rng: &mut ChaCha8Rng, n: usize) -> ControllerRegression {
        let e = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let b1 = rng.gen_range(0.3..1.5);
        ControllerRegression {
            y_c: rng.gen_range(-2.0..2.0),
            phi_c: &e * b1,
            e,
            u_prev: rng.gen_range(-1.0..1.0),
            b1_hat: b1,
            sigma_c2: rng.gen_range(0.01..1.0),
            d_u: rng.gen_range(1.0..2.0),
            d_c: rng.gen_range(0.1..1.0),
        }
    }

    #[test]
    fn fast_path_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let reg = random_reg(&mut rng, 6);
            for cfg in [
                KernelConfig::di(6, 0.7, 0.6).unwrap(),
                KernelConfig::tc(6, 1.3, 0.8).unwrap(),
                KernelConfig::dc(6, 0.9, 0.7, -0.4).unwrap(),
                KernelConfig::di(6, 0.7, 0.0).unwrap(),
            ] {
                let prior = ControllerPrior::Kernel(build_kernel(&cfg).unwrap());
                let sys = DualSystem::new(&reg, &prior);
                for (l1, l2) in [(0.0, 0.0), (0.3, 0.0), (0.0, 2.0), (5.0, 0.1)] {
                    let dense = dual_theta(&reg, l1, l2, &prior).unwrap();
                    let fast = sys.theta(&sys.point(l1, l2));
                    assert!((&dense - &fast).amax() < 1e-10 * dense.amax().max(1.0));
                }
            }
            let sys = DualSystem::new(&reg, &ControllerPrior::Flat);
            // λ₂ > 0 keeps the dense system well conditioned
            let dense = dual_theta(&reg, 0.2, 0.05, &ControllerPrior::Flat).unwrap();
            let fast = sys.theta(&sys.point(0.2, 0.05));
            assert!((&dense - &fast).amax() < 1e-8 * dense.amax().max(1.0));
        }
    }

    #[test]
    fn hat_value_two_ways() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let reg = random_reg(&mut rng, 5);
            let cfg = KernelConfig::tc(5, 1.0, 0.7).unwrap();
            let k = build_kernel(&cfg).unwrap();
            let (l1, l2) = (0.4, 0.2);
            let m = &reg.phi_c * reg.phi_c.transpose()
                + k.values.clone().try_inverse().unwrap() * reg.sigma_c2
                + &reg.e * reg.e.transpose() * l1
                + DMatrix::identity(5, 5) * l2;
            let h_dense = (reg.phi_c.transpose() * m.try_inverse().unwrap() * &reg.phi_c)[0];
            let sys = DualSystem::new(&reg, &ControllerPrior::Kernel(k));
            let h_fast = sys.point(l1, l2).hat(reg.b1_hat);
            assert_relative_eq!(h_dense, h_fast, epsilon = 1e-10);
            assert!((0.0..=1.0).contains(&h_fast));
        }
    }

    #[test]
    fn zero_duals_give_unconstrained_rls() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reg = random_reg(&mut rng, 4);
        let k = build_kernel(&KernelConfig::di(4, 1.0, 0.5).unwrap()).unwrap();
        // unconstrained RLS problem with a single observation
        let y = DVector::from_element(1, reg.y_c);
        let phi = DMatrix::from_row_slice(1, 4, reg.phi_c.as_slice());
        let rls = crate::regression::rls_solve(&crate::regression::RegressionProblem {
            y: &y,
            phi: &phi,
            sigma2: reg.sigma_c2,
            kernel: &k,
        })
        .unwrap();
        let th = dual_theta(&reg, 0.0, 0.0, &ControllerPrior::Kernel(k)).unwrap();
        assert!((th - rls.theta_hat).amax() < 1e-10);
    }

    #[test]
    fn large_norm_dual_shrinks_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let reg = random_reg(&mut rng, 4);
            let prior = ControllerPrior::Kernel(build_kernel(&KernelConfig::di(4, 2.0, 0.8).unwrap()).unwrap());
            let a = dual_theta(&reg, 0.0, 0.0, &prior).unwrap().norm();
            let b = dual_theta(&reg, 0.0, 1e6, &prior).unwrap().norm();
            assert!(b <= 1e-4 * a);
        }
    }

    /// 1-D bisection on a single dual variable, used as an oracle.
    fn bisect_oracle(f: impl Fn(f64) -> f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 1e6);
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }

    #[test]
    fn norm_constraint_only() {
        let reg = reg2(3.0, [1.0, 0.5], 1.0, 0.0, 100.0, 0.2);
        let prior = ControllerPrior::Kernel(KernelMatrix {
            values: DMatrix::identity(2, 2),
            blocks: vec![],
        });
        let (l1, l2) = maximize_dual(&reg, &prior);
        assert_eq!(l1, 0.0);
        assert!(l2 > 0.0);
        let th = dual_theta(&reg, 0.0, l2, &prior).unwrap();
        assert!((th.norm() - 0.2).abs() < 1e-4);
        let oracle = bisect_oracle(|l| dual_theta(&reg, 0.0, l, &prior).unwrap().norm() - 0.2);
        assert_relative_eq!(l2, oracle, max_relative = 1e-6);
    }

    #[test]
    fn input_constraint_only() {
        let reg = reg2(3.0, [1.0, 0.5], 1.0, 0.9, 1.0, 100.0);
        let prior = ControllerPrior::Kernel(KernelMatrix {
            values: DMatrix::identity(2, 2),
            blocks: vec![],
        });
        let (l1, l2) = maximize_dual(&reg, &prior);
        assert_eq!(l2, 0.0);
        assert!(l1 > 0.0);
        let th = dual_theta(&reg, l1, 0.0, &prior).unwrap();
        assert!(((reg.e.dot(&th) + reg.u_prev).abs() - 1.0).abs() < 1e-4);
        let oracle = bisect_oracle(|l| {
            let th = dual_theta(&reg, l, 0.0, &prior).unwrap();
            (reg.e.dot(&th) + reg.u_prev).abs() - 1.0
        });
        assert_relative_eq!(l1, oracle, max_relative = 1e-6);
    }

    #[test]
    fn feasible_optimum_is_plain_rls() {
        let reg = reg2(0.1, [1.0, 0.5], 1.0, 0.0, 10.0, 10.0);
        let prior = ControllerPrior::Kernel(build_kernel(&KernelConfig::di(2, 1.0, 0.5).unwrap()).unwrap());
        let est = solve_constrained_rls(&reg, &prior, None);
        assert_eq!((est.lambda1, est.lambda2), (0.0, 0.0));
        assert!(est.kkt_residual <= 1e-8);
        let plain = dual_theta(&reg, 0.0, 0.0, &prior).unwrap();
        assert!((est.theta_c_hat - plain).amax() < 1e-14);
    }

    #[test]
    fn frozen_and_degenerate_cases() {
        let mut reg = reg2(1.0, [1.0, 0.5], 1.0, 0.4, 2.0, 0.0);
        let prior = identity_prior(2);
        let est = solve_constrained_rls(&reg, &prior, None);
        assert_eq!(est.theta_c_hat.norm(), 0.0);
        assert_eq!(est.u_new, 0.4);
        reg.d_c = 1.0;
        reg.b1_hat = 0.0;
        reg.phi_c.fill(0.0);
        let est = solve_constrained_rls(&reg, &prior, None);
        assert!(est.flags.degenerate);
        assert_eq!(est.u_new, 0.4);
        let (cfg, obj) = sure_controller(&reg, KernelFamily::DI, &ControllerTuning::default(), 0, None).unwrap();
        assert_eq!((cfg.c, cfg.alpha), (0.0, 0.0));
        assert_eq!(obj, 1.0);
    }

    #[test]
    fn infeasible_start_keeps_input_within_bounds() {
        let reg = reg2(1.0, [0.1, 0.0], 1.0, 3.0, 2.0, 0.5);
        let est = solve_constrained_rls(&reg, &identity_prior(2), None);
        assert!(est.flags.infeasible);
        assert_eq!(est.u_new, 2.0);
    }

    #[test]
    fn grid_oracle_on_two_parameter_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut reg = random_reg(&mut rng, 2);
            reg.y_c *= 3.0;
            let cfg = KernelConfig::di(2, rng.gen_range(0.2..3.0), rng.gen_range(0.2..0.9)).unwrap();
            let k = build_kernel(&cfg).unwrap();
            let pinv = k.values.clone().try_inverse().unwrap();
            let f = |th: &DVector<f64>| {
                (reg.y_c - reg.phi_c.dot(th)).powi(2) + reg.sigma_c2 * (th.transpose() * &pinv * th)[0]
            };
            let est = solve_constrained_rls(&reg, &ControllerPrior::Kernel(k), None);
            assert!(est.kkt_residual <= KKT_TOL);
            let mut grid_best = f64::INFINITY;
            let steps = (reg.d_c / 1e-2).ceil() as i64;
            for a in -steps..=steps {
                for b in -steps..=steps {
                    let th = DVector::from_vec(vec![a as f64 * 1e-2, b as f64 * 1e-2]);
                    if th.norm() <= reg.d_c && (reg.e.dot(&th) + reg.u_prev).abs() <= reg.d_u {
                        grid_best = grid_best.min(f(&th));
                    }
                }
            }
            assert!(f(&est.theta_c_hat) <= grid_best + 1e-4);
        }
    }

    #[test]
    fn weak_duality_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..30 {
            let mut reg = random_reg(&mut rng, 4);
            reg.y_c *= 4.0;
            let prior = ControllerPrior::Kernel(build_kernel(&KernelConfig::tc(4, 1.0, 0.6).unwrap()).unwrap());
            let sys = DualSystem::new(&reg, &prior);
            let p = sys.maximize();
            let dual = sys.dual_value(&p);
            let primal = sys.primal(&p);
            assert!(dual <= primal + 1e-6);
            assert!((primal - dual).abs() <= 1e-5);
        }
    }

    #[test]
    fn homogeneity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let reg = random_reg(&mut rng, 3);
        let prior = ControllerPrior::Kernel(build_kernel(&KernelConfig::di(3, 1.0, 0.5).unwrap()).unwrap());
        let s = 2.5;
        let mut scaled = reg.clone();
        scaled.phi_c *= s;
        scaled.y_c *= s;
        scaled.sigma_c2 *= s * s;
        let a = dual_theta(&reg, 0.0, 0.0, &prior).unwrap();
        let b = dual_theta(&scaled, 0.0, 0.0, &prior).unwrap();
        assert!((a - b).amax() < 1e-8);
    }

    #[test]
    fn tuned_controller_stays_in_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for seed in 0..10 {
            let reg = random_reg(&mut rng, 10);
            let settings = ControllerSettings {
                n_c: 10,
                d_u: reg.d_u,
                d_c: reg.d_c,
                family: KernelFamily::DI,
                regularized: true,
                tuning: ControllerTuning::default(),
            };
            let est = design_controller(&reg, &settings, seed, None).unwrap();
            let k = est.kernel.unwrap();
            assert!(k.alpha >= 0.0 && k.alpha < 1.0 && k.c >= 0.0);
            assert!(est.theta_c_hat.norm() <= reg.d_c + 1e-9);
            assert!(est.u_new.abs() <= reg.d_u);
            assert!(est.sigma_c2 > 0.0);
        }
    }
}
