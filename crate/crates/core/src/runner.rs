//! Single-experiment execution.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{adaptive_ilc_step, adaptive_regressor, AdaptiveIlcState, InversionIlcState};
use crate::config::{ExperimentConfig, InitSpec, Method, PlantSpec, Study};
use crate::controller::{build_controller_regression, design_controller, ControllerFlags, DesignInputs};
use crate::error::{KrilcError, Result};
use crate::kernels::KernelConfig;
use crate::metrics::{mean, model_fit, tracking_fit};
use crate::model_estimation::{
    estimate_from_stats, regressor_row, ModelEstimate, ModelMethod, ModelSettings,
};
use crate::noise::NoiseSampler;
use crate::plant::{theorem1_report, to_state_space, BoundReport, LtvArxModel};
use crate::regression::{GramStats, SIGMA2_FLOOR};
use crate::store::IterationStore;
use crate::sysgen::{fixed_plant_51_with, generate_plant};

/// First time instant with a model regression (`y(1)` carries no data).
pub const FIRST_FIT_TIME: usize = 2;

/// splitmix64 of `base` combined with a stream tag.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const NOISE_STREAM: u64 = 1;
const MODEL_STREAM: u64 = 2;
const CONTROLLER_STREAM: u64 = 3;
const INPUT_STREAM: u64 = 4;

pub fn build_plant(cfg: &ExperimentConfig) -> Result<LtvArxModel> {
    match &cfg.plant {
        PlantSpec::Fixed51 { ar_sign } => Ok(fixed_plant_51_with(cfg.n_d, *ar_sign)),
        PlantSpec::Generated { .. } => generate_plant(&cfg.generator().expect("generated plant")),
        PlantSpec::File { path } => {
            let text = std::fs::read_to_string(path)?;
            let model = LtvArxModel::from_text(&text)?;
            if model.horizon < cfg.n_d {
                return Err(KrilcError::Config(format!(
                    "plant file covers t <= {} but n_d = {}",
                    model.horizon, cfg.n_d
                )));
            }
            Ok(model)
        }
    }
}

/// Counts of fallbacks taken during a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub clipped: usize,
    pub projected: usize,
    pub kkt_unmet: usize,
    pub infeasible: usize,
    pub degenerate: usize,
    pub tuning_failed: usize,
    pub model_errors: usize,
    pub controller_errors: usize,
}

impl EventCounts {
    fn add(&mut self, f: &ControllerFlags) {
        self.clipped += f.clipped as usize;
        self.projected += f.projected as usize;
        self.kkt_unmet += f.kkt_unmet as usize;
        self.infeasible += f.infeasible as usize;
        self.degenerate += f.degenerate as usize;
        self.tuning_failed += f.tuning_failed as usize;
    }
}

/// Model-fit comparison of the model study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStudyRecord {
    /// Per-time fits at the final iteration, `t = 2..=N_d` (undefined ones skipped).
    pub rls_fits: Vec<f64>,
    pub ls_fits: Vec<f64>,
    pub rls_average: Option<f64>,
    pub ls_average: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: Method,
    pub study: Study,
    pub seed: u64,
    pub n_e: usize,
    pub n_d: usize,
    /// Tracking fit of iterations `0..=N_e`; `None` when undefined or the
    /// plant diverged.
    pub tracking_fits: Vec<Option<f64>>,
    /// Average per-time model fit for iterations `1..=N_e` (when recorded).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avg_model_fits: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_study: Option<ModelStudyRecord>,
    pub max_abs_u: f64,
    pub max_theta_c_norm: f64,
    pub max_kkt_residual: f64,
    /// Iteration at which the plant output left the representable range.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diverged_at: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundReport>,
    pub events: EventCounts,
}

/// One controller design in the log.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerRow {
    pub j: usize,
    pub t: usize,
    pub theta_norm: f64,
    pub u: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub kkt_residual: f64,
    pub c: f64,
    pub alpha: f64,
    pub sigma_c2: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub record: RunRecord,
    pub store: IterationStore,
    pub plant: LtvArxModel,
    pub controller_log: Vec<ControllerRow>,
    pub wall_seconds: f64,
}

/// True coefficients at `t` padded with zeros to the model orders.
pub fn padded_truth(plant: &LtvArxModel, t: usize, n_a: usize, n_b: usize) -> (Vec<f64>, usize, usize) {
    let (na, nb) = (n_a.max(plant.n_a), n_b.max(plant.n_b));
    let mut th = vec![0.0; na + nb];
    th[..plant.n_b].copy_from_slice(&plant.b[t]);
    th[nb..nb + plant.n_a].copy_from_slice(&plant.a[t]);
    (th, na, nb)
}

/// Model fit of `est` against the plant at `est.t`, both padded to common orders.
pub fn estimate_fit(plant: &LtvArxModel, est: &ModelEstimate) -> Result<f64> {
    let (n_a, n_b) = (est.theta_a_hat.len(), est.theta_b_hat.len());
    let (truth, na, nb) = padded_truth(plant, est.t, n_a, n_b);
    let mut hat = vec![0.0; na + nb];
    hat[..n_b].copy_from_slice(&est.theta_b_hat);
    hat[nb..nb + n_a].copy_from_slice(&est.theta_a_hat);
    model_fit(&truth, &hat)
}

struct Simulation<'a> {
    cfg: &'a ExperimentConfig,
    plant: &'a LtvArxModel,
    sampler: NoiseSampler,
    rng: ChaCha8Rng,
}

impl Simulation<'_> {
    /// Noise for one iteration; `v(0) = v(1) = 0`.
    fn noise(&mut self) -> Vec<f64> {
        let mut v = vec![0.0; self.cfg.n_d + 1];
        for vt in v.iter_mut().skip(2) {
            *vt = self.sampler.sample(&mut self.rng);
        }
        v
    }

    fn output(&self, t: usize, u: &[f64], y: &[f64], v: &[f64]) -> Result<f64> {
        let out = self.plant.output_at(t, u, y, v[t]);
        if !out.is_finite() || out.abs() > 1e150 {
            return Err(KrilcError::Instability { time: t });
        }
        Ok(out)
    }

    /// One adaptive-law iteration `j` on top of `store`.
    fn adaptive_iteration(
        &mut self,
        store: &IterationStore,
        state: &mut AdaptiveIlcState,
        j: usize,
        saturate: Option<f64>,
    ) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let n_d = self.cfg.n_d;
        let v = self.noise();
        let mut u = vec![0.0; n_d + 1];
        let mut y = vec![0.0; n_d + 1];
        let prev = j.checked_sub(1).filter(|&p| store.contains(p));
        for t in 1..n_d {
            let (u_prev, y_prev) = match prev {
                Some(p) => (store.u(p)?, store.y(p)?),
                None => {
                    // no earlier iteration: the law reduces to zero input
                    y[t + 1] = self.output(t + 1, &u, &y, &v)?;
                    continue;
                }
            };
            let xi = adaptive_regressor(store, j, t, state.params.l_theta);
            let e_prev = store.e(j - 1)?[t + 1];
            let delta_y = y[t] - y_prev[t];
            let delta_u = u[t - 1] - u_prev[t - 1];
            let mut ut = adaptive_ilc_step(state, t, &xi, e_prev, u_prev[t], delta_y, delta_u);
            if let Some(d) = saturate {
                ut = ut.clamp(-d, d);
            }
            u[t] = ut;
            y[t + 1] = self.output(t + 1, &u, &y, &v)?;
        }
        Ok((u, y, v))
    }

    fn open_loop(&mut self, u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let v = self.noise();
        let mut y = vec![0.0; self.cfg.n_d + 1];
        for t in 2..=self.cfg.n_d {
            y[t] = self.output(t, u, &y, &v)?;
        }
        Ok((y, v))
    }
}

/// Iteration 0 and, for the adaptive method, the law's state after it.
fn initial_experiment(
    sim: &mut Simulation<'_>,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, AdaptiveIlcState)> {
    let cfg = sim.cfg;
    let mut state = AdaptiveIlcState::new(cfg.adaptive, cfg.n_d)?;
    match cfg.init {
        InitSpec::Zero => {
            let u = vec![0.0; cfg.n_d + 1];
            let (y, v) = sim.open_loop(&u)?;
            Ok((u, y, v, state))
        }
        InitSpec::Adaptive { passes } => {
            let mut scratch = IterationStore::new(cfg.reference.trajectory(cfg.n_d), 0)?;
            let mut last = None;
            for j in 0..passes {
                let (u, y, v) = sim.adaptive_iteration(&scratch, &mut state, j, Some(cfg.d_u))?;
                scratch.push(u.clone(), y.clone(), v.clone())?;
                last = Some((u, y, v));
            }
            let (u, y, v) = last.expect("at least one pass");
            Ok((u, y, v, state))
        }
    }
}

fn add_rows(stats: &mut [GramStats], u: &[f64], y: &[f64], n_a: usize, n_b: usize) {
    for (t, s) in stats.iter_mut().enumerate().skip(FIRST_FIT_TIME) {
        s.push_row(&regressor_row(u, y, t, n_a, n_b), y[t]);
    }
}

fn estimate_all(
    stats: &[GramStats],
    j: usize,
    settings: &ModelSettings,
    warm: &[Option<ModelEstimate>],
    counts: &mut EventCounts,
) -> Vec<ModelEstimate> {
    let results: Vec<Result<ModelEstimate>> = (0..stats.len())
        .into_par_iter()
        .map(|t| {
            if t < FIRST_FIT_TIME {
                return Ok(ModelEstimate::zero(t, settings.n_a, settings.n_b));
            }
            estimate_from_stats(&stats[t], j, t, settings, warm[t].as_ref())
        })
        .collect();
    results
        .into_iter()
        .enumerate()
        .map(|(t, r)| match r {
            Ok(e) => e,
            Err(err) => {
                log::warn!("model estimation failed at j={j}, t={t}: {err}; keeping previous estimate");
                counts.model_errors += 1;
                warm[t]
                    .clone()
                    .unwrap_or_else(|| ModelEstimate::zero(t, settings.n_a, settings.n_b))
            }
        })
        .collect()
}

/// Pooled one-step prediction error of iteration data under per-time estimates.
fn prediction_variance(u: &[f64], y: &[f64], estimates: &[ModelEstimate], n_a: usize, n_b: usize) -> Option<f64> {
    let n_d = y.len() - 1;
    let mut sum = 0.0;
    let mut count = 0;
    for t in FIRST_FIT_TIME..=n_d {
        let row = regressor_row(u, y, t, n_a, n_b);
        let pred: f64 = row.iter().zip(estimates[t].theta()).map(|(a, b)| a * b).sum();
        sum += (y[t] - pred).powi(2);
        count += 1;
    }
    (count > 0).then(|| (sum / count as f64).max(SIGMA2_FLOOR))
}

fn fits_of(store: &IterationStore) -> Vec<Option<f64>> {
    store
        .iterations()
        .map(|j| {
            let y = store.y(j).ok()?;
            tracking_fit(&store.reference()[1..], &y[1..]).ok()
        })
        .collect()
}

fn bound_for(cfg: &ExperimentConfig, plant: &LtvArxModel, y_d: &[f64]) -> Option<BoundReport> {
    let ss = to_state_space(plant);
    let d_v = cfg.noise.d_v?;
    let d_r = y_d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    theorem1_report(&ss, cfg.d_c, cfg.d_u, d_v, d_r, plant.n_b, cfg.n_c).ok()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let plant = build_plant(cfg)?;
    let mut out = match cfg.study {
        Study::Control => run_control(cfg, plant)?,
        Study::Model => run_model_study(cfg, plant)?,
    };
    out.wall_seconds = start.elapsed().as_secs_f64();
    Ok(out)
}

fn run_control(cfg: &ExperimentConfig, plant: LtvArxModel) -> Result<RunOutput> {
    let n_d = cfg.n_d;
    let y_d = cfg.reference.trajectory(n_d);
    let mut sim = Simulation {
        cfg,
        plant: &plant,
        sampler: NoiseSampler::new(&cfg.noise)?,
        rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, NOISE_STREAM)),
    };
    let mut store = IterationStore::new(y_d.clone(), 0)?;
    let mut counts = EventCounts::default();
    let mut log_rows = Vec::new();
    let mut max_u: f64 = 0.0;
    let mut max_theta: f64 = 0.0;
    let mut max_kkt: f64 = 0.0;
    let mut diverged_at = None;
    let mut model_fit_curve = cfg.record_model_fits.then(Vec::new);

    let (u0, y0, v0, mut adaptive_state) = match initial_experiment(&mut sim) {
        Ok(x) => x,
        Err(KrilcError::Instability { .. }) => {
            return Err(KrilcError::Instability { time: 0 });
        }
        Err(e) => return Err(e),
    };
    max_u = u0.iter().fold(max_u, |m, v| m.max(v.abs()));
    store.push(u0, y0, v0)?;

    let mut model_settings = cfg.model_settings();
    model_settings.sure.seed = derive_seed(cfg.seed, MODEL_STREAM);
    let ctrl_settings = cfg.controller_settings();
    let ctrl_seed = derive_seed(cfg.seed, CONTROLLER_STREAM);
    let (n_a, n_b) = (cfg.n_a, cfg.n_b);
    let model_based = matches!(cfg.method, Method::Krilc | Method::KrilcLs);

    let mut stats: Vec<GramStats> = (0..=n_d).map(|_| GramStats::new(n_a + n_b)).collect();
    if model_based {
        add_rows(&mut stats, store.u(0)?, store.y(0)?, n_a, n_b);
    }
    let mut warm_models: Vec<Option<ModelEstimate>> = vec![None; n_d + 1];
    let mut warm_ctrl: Vec<Option<KernelConfig>> = vec![None; n_d + 1];
    let mut prev_estimates: Option<Vec<ModelEstimate>> = None;
    let inversion = InversionIlcState { gamma: cfg.gamma };

    for j in 1..=cfg.n_e {
        let attempt: Result<(Vec<f64>, Vec<f64>, Vec<f64>)> = match cfg.method {
            Method::Adaptive => sim.adaptive_iteration(&store, &mut adaptive_state, j, None),
            Method::Inversion => (|| {
                let u = inversion.next_input(store.u(j - 1)?, store.y(j - 1)?, store.e(j - 1)?)?;
                let (y, v) = sim.open_loop(&u)?;
                Ok((u, y, v))
            })(),
            Method::Krilc | Method::KrilcLs => {
                let estimates = estimate_all(&stats, j, &model_settings, &warm_models, &mut counts);
                if let Some(curve) = model_fit_curve.as_mut() {
                    let fits: Vec<f64> = estimates[FIRST_FIT_TIME..]
                        .iter()
                        .filter_map(|e| estimate_fit(&plant, e).ok())
                        .collect();
                    curve.push(mean(&fits));
                }
                let pooled = match &prev_estimates {
                    Some(prev) => prediction_variance(store.u(j - 1)?, store.y(j - 1)?, prev, n_a, n_b),
                    None => None,
                };
                let v = sim.noise();
                let mut u = vec![0.0; n_d + 1];
                let mut y = vec![0.0; n_d + 1];
                let mut failure = None;
                for t in 1..n_d {
                    let sigma_c2 = pooled.unwrap_or(estimates[t + 1].sigma2).max(SIGMA2_FLOOR);
                    let inputs = DesignInputs {
                        model_next: &estimates[t + 1],
                        u_cur: &u,
                        y_cur: &y,
                        sigma_c2,
                        d_u: cfg.d_u,
                        d_c: cfg.d_c,
                    };
                    let seed = derive_seed(ctrl_seed, ((j as u64) << 32) | t as u64);
                    let design = build_controller_regression(&store, j, t, cfg.n_c, &inputs)
                        .and_then(|reg| design_controller(&reg, &ctrl_settings, seed, warm_ctrl[t].as_ref()));
                    match design {
                        Ok(est) => {
                            counts.add(&est.flags);
                            let norm = est.theta_c_hat.norm();
                            max_theta = max_theta.max(norm);
                            max_kkt = max_kkt.max(est.kkt_residual);
                            let (c, alpha) = est.kernel.map_or((0.0, 0.0), |k| (k.c, k.alpha));
                            log_rows.push(ControllerRow {
                                j,
                                t,
                                theta_norm: norm,
                                u: est.u_new,
                                lambda1: est.lambda1,
                                lambda2: est.lambda2,
                                kkt_residual: est.kkt_residual,
                                c,
                                alpha,
                                sigma_c2: est.sigma_c2,
                            });
                            if est.kernel.is_some() && !est.flags.degenerate {
                                warm_ctrl[t] = est.kernel;
                            }
                            u[t] = est.u_new;
                        }
                        Err(err) => {
                            log::warn!("controller design failed at j={j}, t={t}: {err}; input frozen");
                            counts.controller_errors += 1;
                            u[t] = store.u(j - 1)?[t].clamp(-cfg.d_u, cfg.d_u);
                        }
                    }
                    match sim.output(t + 1, &u, &y, &v) {
                        Ok(o) => y[t + 1] = o,
                        Err(e) => {
                            failure = Some(e);
                            break;
                        }
                    }
                }
                for (t, e) in estimates.iter().enumerate() {
                    if e.n_obs > 0 {
                        warm_models[t] = Some(e.clone());
                    }
                }
                prev_estimates = Some(estimates);
                match failure {
                    Some(e) => Err(e),
                    None => Ok((u, y, v)),
                }
            }
        };
        match attempt {
            Ok((u, y, v)) => {
                max_u = u.iter().fold(max_u, |m, x| m.max(x.abs()));
                if model_based {
                    add_rows(&mut stats, &u, &y, n_a, n_b);
                }
                store.push(u, y, v)?;
            }
            Err(KrilcError::Instability { time }) => {
                log::warn!("plant output diverged at j={j}, t={time}; stopping the run");
                diverged_at = Some(j);
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let mut tracking_fits = fits_of(&store);
    tracking_fits.resize(cfg.n_e + 1, None);
    let record = RunRecord {
        method: cfg.method,
        study: cfg.study,
        seed: cfg.seed,
        n_e: cfg.n_e,
        n_d,
        tracking_fits,
        avg_model_fits: model_fit_curve,
        model_study: None,
        max_abs_u: max_u,
        max_theta_c_norm: max_theta,
        max_kkt_residual: max_kkt,
        diverged_at,
        bound: bound_for(cfg, &plant, &y_d),
        events: counts,
    };
    Ok(RunOutput {
        config: cfg.clone(),
        record,
        store,
        plant,
        controller_log: log_rows,
        wall_seconds: 0.0,
    })
}

/// White-input data bank, then RLS and LS fits per time from all iterations.
fn run_model_study(cfg: &ExperimentConfig, plant: LtvArxModel) -> Result<RunOutput> {
    let n_d = cfg.n_d;
    let mut sim = Simulation {
        cfg,
        plant: &plant,
        sampler: NoiseSampler::new(&cfg.noise)?,
        rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, NOISE_STREAM)),
    };
    let mut input_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INPUT_STREAM));
    let input = Normal::new(0.0, cfg.input_variance.sqrt()).map_err(|e| KrilcError::Config(e.to_string()))?;
    let mut store = IterationStore::new(vec![0.0; n_d + 1], 1)?;
    let (n_a, n_b) = (cfg.n_a, cfg.n_b);
    let mut stats: Vec<GramStats> = (0..=n_d).map(|_| GramStats::new(n_a + n_b)).collect();
    let mut counts = EventCounts::default();
    let mut settings = cfg.model_settings();
    settings.sure.seed = derive_seed(cfg.seed, MODEL_STREAM);
    let mut warm: Vec<Option<ModelEstimate>> = vec![None; n_d + 1];
    let mut curve = cfg.record_model_fits.then(Vec::new);
    let mut max_u: f64 = 0.0;

    let fits_at = |estimates: &[ModelEstimate]| -> Vec<f64> {
        estimates[FIRST_FIT_TIME..]
            .iter()
            .filter_map(|e| estimate_fit(&plant, e).ok())
            .collect()
    };

    let mut last_rls = Vec::new();
    for j in 1..=cfg.n_e {
        let mut u = vec![0.0; n_d + 1];
        for ut in u.iter_mut().take(n_d).skip(1) {
            *ut = input.sample(&mut input_rng);
        }
        max_u = u.iter().fold(max_u, |m, x| m.max(x.abs()));
        let (y, v) = sim.open_loop(&u)?;
        add_rows(&mut stats, &u, &y, n_a, n_b);
        store.push(u, y, v)?;
        if curve.is_some() || j == cfg.n_e {
            let mut s = settings;
            s.method = ModelMethod::Rls;
            let est = estimate_all(&stats, j + 1, &s, &warm, &mut counts);
            if let Some(c) = curve.as_mut() {
                c.push(mean(&fits_at(&est)));
            }
            for (t, e) in est.iter().enumerate() {
                if e.n_obs > 0 {
                    warm[t] = Some(e.clone());
                }
            }
            last_rls = est;
        }
    }
    let mut ls_settings = settings;
    ls_settings.method = ModelMethod::Ls;
    let ls = estimate_all(&stats, cfg.n_e + 1, &ls_settings, &vec![None; n_d + 1], &mut counts);
    let rls_fits = fits_at(&last_rls);
    let ls_fits = fits_at(&ls);
    let study = ModelStudyRecord {
        rls_average: mean(&rls_fits),
        ls_average: mean(&ls_fits),
        rls_fits,
        ls_fits,
    };
    let record = RunRecord {
        method: cfg.method,
        study: cfg.study,
        seed: cfg.seed,
        n_e: cfg.n_e,
        n_d,
        tracking_fits: Vec::new(),
        avg_model_fits: curve,
        model_study: Some(study),
        max_abs_u: max_u,
        max_theta_c_norm: 0.0,
        max_kkt_residual: 0.0,
        diverged_at: None,
        bound: None,
        events: counts,
    };
    Ok(RunOutput {
        config: cfg.clone(),
        record,
        store,
        plant,
        controller_log: Vec::new(),
        wall_seconds: 0.0,
    })
}

/// Tracking fits recomputed from stored trajectories.
pub fn recompute_tracking_fits(store: &IterationStore, n_e: usize) -> Vec<Option<f64>> {
    let mut fits = fits_of(store);
    fits.resize(n_e + 1, None);
    fits
}
