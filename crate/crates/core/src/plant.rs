//! Repetitive LTV ARX plants, their state-space form and impulse-response bounds.
//!
//! Signals are stored as slices indexed by time `0..=N_d`. The conventions are
//! `u(0) = 0` and `y(0) = y(1) = 0`; the recursion produces `y(2..=N_d)`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{KrilcError, Result};

/// Coefficients `a_l(t)`, `b_k(t)` for `t = 0..=horizon`. Row 0 never enters
/// the recursion; it is kept so that rows are indexed by time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtvArxModel {
    pub n_a: usize,
    pub n_b: usize,
    pub horizon: usize,
    /// `a[t][l-1] = a_l(t)`
    pub a: Vec<Vec<f64>>,
    /// `b[t][k-1] = b_k(t)`
    pub b: Vec<Vec<f64>>,
}

/// Outputs above this magnitude are treated as a blow-up.
const BLOW_UP: f64 = 1e150;

impl LtvArxModel {
    pub fn new(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() {
            return Err(KrilcError::Dimension(
                "a and b need the same, nonzero number of time rows".into(),
            ));
        }
        let n_a = a[0].len();
        let n_b = b[0].len();
        if n_a == 0 || n_b == 0 {
            return Err(KrilcError::Dimension("orders must be at least 1".into()));
        }
        if a.iter().any(|r| r.len() != n_a) || b.iter().any(|r| r.len() != n_b) {
            return Err(KrilcError::Dimension("ragged coefficient rows".into()));
        }
        if a.iter().chain(b.iter()).flatten().any(|v| !v.is_finite()) {
            return Err(KrilcError::Config("non-finite plant coefficient".into()));
        }
        Ok(LtvArxModel {
            n_a,
            n_b,
            horizon: a.len() - 1,
            a,
            b,
        })
    }

    /// Frozen plant with the same coefficients at every time.
    pub fn time_invariant(a: &[f64], b: &[f64], horizon: usize) -> Result<Self> {
        LtvArxModel::new(vec![a.to_vec(); horizon + 1], vec![b.to_vec(); horizon + 1])
    }

    /// `θ_m(t) = [b(t); a(t)]`.
    pub fn theta(&self, t: usize) -> Vec<f64> {
        let mut th = self.b[t].clone();
        th.extend_from_slice(&self.a[t]);
        th
    }

    /// `y(t)` from the stored history `y(0..t)`, `u(0..t)` and the noise `v_t`.
    pub fn output_at(&self, t: usize, u: &[f64], y: &[f64], v_t: f64) -> f64 {
        if t <= 1 {
            return 0.0;
        }
        let mut acc = v_t;
        for (l, al) in self.a[t].iter().enumerate() {
            if let Some(s) = t.checked_sub(l + 1) {
                acc -= al * y[s];
            }
        }
        for (k, bk) in self.b[t].iter().enumerate() {
            if let Some(s) = t.checked_sub(k + 1) {
                if s > 0 {
                    acc += bk * u[s];
                }
            }
        }
        acc
    }

    /// Runs one iteration: returns `y(0..=N_d)` for inputs and noises indexed
    /// the same way.
    pub fn simulate_iteration(&self, u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let n = self.horizon + 1;
        if u.len() != n || v.len() != n {
            return Err(KrilcError::Dimension(format!(
                "signals must have {n} samples (t = 0..={})",
                self.horizon
            )));
        }
        let mut y = vec![0.0; n];
        for t in 2..n {
            let yt = self.output_at(t, u, &y, v[t]);
            if !yt.is_finite() || yt.abs() > BLOW_UP {
                return Err(KrilcError::Instability { time: t });
            }
            y[t] = yt;
        }
        Ok(y)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ltv-arx");
        let _ = writeln!(s, "n_a {}", self.n_a);
        let _ = writeln!(s, "n_b {}", self.n_b);
        let _ = writeln!(s, "horizon {}", self.horizon);
        for t in 0..=self.horizon {
            let _ = write!(s, "{t}");
            for v in self.a[t].iter().chain(self.b[t].iter()) {
                let _ = write!(s, " {v:.16e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let err = |line: usize, msg: &str| KrilcError::Parse {
            line: line + 1,
            msg: msg.to_string(),
        };
        let (ln, head) = lines.next().ok_or_else(|| err(0, "empty plant file"))?;
        if head.trim() != "ltv-arx" {
            return Err(err(ln, "expected `ltv-arx` header"));
        }
        let mut field = |name: &str| -> Result<usize> {
            let (ln, l) = lines.next().ok_or_else(|| err(0, "truncated header"))?;
            let mut it = l.split_whitespace();
            if it.next() != Some(name) {
                return Err(err(ln, &format!("expected `{name}`")));
            }
            it.next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(ln, &format!("bad value for `{name}`")))
        };
        let n_a = field("n_a")?;
        let n_b = field("n_b")?;
        let horizon = field("horizon")?;
        let mut a = Vec::with_capacity(horizon + 1);
        let mut b = Vec::with_capacity(horizon + 1);
        for (ln, l) in lines {
            let mut it = l.split_whitespace();
            let t: usize = it
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| err(ln, "bad time index"))?;
            if t != a.len() {
                return Err(err(ln, "time rows out of order"));
            }
            let vals = it
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(ln, &e.to_string()))?;
            if vals.len() != n_a + n_b {
                return Err(err(ln, "wrong number of coefficients"));
            }
            a.push(vals[..n_a].to_vec());
            b.push(vals[n_a..].to_vec());
        }
        if a.len() != horizon + 1 {
            return Err(err(0, "missing time rows"));
        }
        LtvArxModel::new(a, b)
    }
}

/// State-space form `x(t+1) = A(t)x(t) + B(t)𝔲(t)`, `y(t) = Cx(t)` with
/// `𝔲(t) = [u(t), …, u(t−n_b+1), v(t+1)]`, for `t = 0..N_d`.
#[derive(Debug, Clone)]
pub struct StateSpaceLtv {
    pub n_a: usize,
    pub n_b: usize,
    pub horizon: usize,
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub c: RowDVector<f64>,
}

pub fn to_state_space(model: &LtvArxModel) -> StateSpaceLtv {
    let (n_a, n_b) = (model.n_a, model.n_b);
    let mut a = Vec::with_capacity(model.horizon);
    let mut b = Vec::with_capacity(model.horizon);
    for t in 0..model.horizon {
        let mut at = DMatrix::zeros(n_a, n_a);
        for l in 0..n_a {
            at[(0, l)] = -model.a[t + 1][l];
        }
        for r in 1..n_a {
            at[(r, r - 1)] = 1.0;
        }
        let mut bt = DMatrix::zeros(n_a, n_b + 1);
        for k in 0..n_b {
            bt[(0, k)] = model.b[t + 1][k];
        }
        bt[(0, n_b)] = 1.0;
        a.push(at);
        b.push(bt);
    }
    let mut c = RowDVector::zeros(n_a);
    c[0] = 1.0;
    StateSpaceLtv {
        n_a,
        n_b,
        horizon: model.horizon,
        a,
        b,
        c,
    }
}

/// Lifted input `𝔲(t)` from signals indexed by time.
pub fn lifted_input(t: usize, n_b: usize, u: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_b + 1);
    for k in 0..n_b {
        out.push(match t.checked_sub(k) {
            Some(s) if s > 0 => u[s],
            _ => 0.0,
        });
    }
    out.push(v.get(t + 1).copied().unwrap_or(0.0));
    out
}

impl StateSpaceLtv {
    /// `G(t, i) = CΨ(t, i+1)B(i)`, a row of `n_b + 1` entries
    /// (`[G_u(t,i), G_v(t,i)]`).
    pub fn impulse_response(&self, t: usize, i: usize) -> Result<RowDVector<f64>> {
        if t <= i || t > self.horizon {
            return Err(KrilcError::Index(format!(
                "impulse response needs i < t <= {}, got t={t}, i={i}",
                self.horizon
            )));
        }
        let mut row = self.c.clone();
        for k in (i + 1..t).rev() {
            row = &row * &self.a[k];
        }
        Ok(&row * &self.b[i])
    }

    /// First entries of `Ψ(t, i+1)e₁` for `t = i+1..=N_d`, i.e. the scalar that
    /// multiplies the first row of `B(i)` in every `G(t, i)`.
    fn psi_first(&self, i: usize) -> Vec<f64> {
        let n_a = self.n_a;
        let mut x = vec![0.0; n_a];
        x[0] = 1.0;
        let mut out = Vec::with_capacity(self.horizon - i);
        out.push(1.0);
        for t in i + 1..self.horizon {
            let a = &self.a[t];
            let head: f64 = (0..n_a).map(|l| a[(0, l)] * x[l]).sum();
            x.rotate_right(1);
            x[0] = head;
            out.push(x[0]);
        }
        out
    }

    /// Finite-horizon bounds `(d_g_u, d_g_v)`: the maximum over `t` of
    /// `Σ_{i<t} ‖G_u(t,i)‖` and of `Σ_{i<t} |G_v(t,i)|`.
    pub fn bibo_sums(&self) -> Result<(f64, f64)> {
        let n = self.horizon;
        let mut su = vec![0.0; n + 1];
        let mut sv = vec![0.0; n + 1];
        for i in 0..n {
            let bnorm = (0..self.n_b)
                .map(|k| self.b[i][(0, k)].powi(2))
                .sum::<f64>()
                .sqrt();
            for (m, psi) in self.psi_first(i).into_iter().enumerate() {
                let t = i + 1 + m;
                su[t] += psi.abs() * bnorm;
                sv[t] += psi.abs();
            }
        }
        let du = su.iter().copied().fold(0.0, f64::max);
        let dv = sv.iter().copied().fold(0.0, f64::max);
        if !du.is_finite() || !dv.is_finite() {
            return Err(KrilcError::Instability { time: n });
        }
        Ok((du, dv))
    }

    /// Zero-state output `Σ_{i<t} G(t,i)𝔲(i)` for every `t = 0..=N_d`.
    pub fn superposition_output(&self, u: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let mut y = vec![0.0; self.horizon + 1];
        for i in 0..self.horizon {
            let lifted = lifted_input(i, self.n_b, u, v);
            let gain: f64 = (0..=self.n_b).map(|k| self.b[i][(0, k)] * lifted[k]).sum();
            if gain == 0.0 {
                continue;
            }
            for (m, psi) in self.psi_first(i).into_iter().enumerate() {
                y[i + 1 + m] += psi * gain;
            }
        }
        Ok(y)
    }
}

/// Theorem-1 condition and ultimate bound for a plant and constraint set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub d_g_u: f64,
    pub d_g_v: f64,
    pub d_c: f64,
    pub d_u: f64,
    pub d_v: f64,
    pub d_r: f64,
    pub n_b: usize,
    pub n_c: usize,
    pub condition_lhs: f64,
    pub condition_holds: bool,
    pub ultimate_bound: Option<f64>,
}

pub fn theorem1_from_sums(
    d_g_u: f64,
    d_g_v: f64,
    d_c: f64,
    d_u: f64,
    d_v: f64,
    d_r: f64,
    n_b: usize,
    n_c: usize,
) -> BoundReport {
    let (nb, nc) = (n_b as f64, n_c as f64);
    let condition_lhs = d_g_u * d_c * (nb * nc * (nc + 1.0) / 2.0).sqrt();
    let condition_holds = condition_lhs < 1.0;
    let ultimate_bound = condition_holds.then(|| {
        let growth = 2.0 * d_g_u * d_c * (nb * nc * (nc * nc - 1.0) / 2.0).sqrt() + 1.0;
        ((nb.sqrt() * d_g_u * d_u + d_g_v * d_v) * growth + d_r) / (1.0 - condition_lhs)
    });
    BoundReport {
        d_g_u,
        d_g_v,
        d_c,
        d_u,
        d_v,
        d_r,
        n_b,
        n_c,
        condition_lhs,
        condition_holds,
        ultimate_bound,
    }
}

pub fn theorem1_report(
    ss: &StateSpaceLtv,
    d_c: f64,
    d_u: f64,
    d_v: f64,
    d_r: f64,
    n_b: usize,
    n_c: usize,
) -> Result<BoundReport> {
    let (du, dv) = ss.bibo_sums()?;
    Ok(theorem1_from_sums(du, dv, d_c, d_u, d_v, d_r, n_b, n_c))
}
