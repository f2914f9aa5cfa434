//! Monte Carlo campaigns over independent runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::error::{KrilcError, Result};
use crate::metrics::{mean, quartiles};
use crate::persist::{to_json, write_run};
use crate::runner::{run_experiment, RunOutput, RunRecord};

/// Configurations for `count` seeds starting at `first_seed`, one per method.
pub fn campaign_configs(base: &ExperimentConfig, methods: &[Method], first_seed: u64, count: usize) -> Vec<ExperimentConfig> {
    let mut out = Vec::with_capacity(count * methods.len());
    for k in 0..count as u64 {
        for &m in methods {
            let mut c = base.clone().with_seed(first_seed + k);
            c.method = m;
            out.push(c);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub j: usize,
    /// Runs with a defined fit at this iteration.
    pub count: usize,
    pub mean: Option<f64>,
    pub q1: Option<f64>,
    pub median: Option<f64>,
    pub q3: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: Option<f64>,
    pub q1: Option<f64>,
    pub median: Option<f64>,
    pub q3: Option<f64>,
}

impl Distribution {
    pub fn of(values: &[f64]) -> Self {
        let q = quartiles(values);
        Distribution {
            count: values.len(),
            mean: mean(values),
            q1: q.map(|q| q.0),
            median: q.map(|q| q.1),
            q3: q.map(|q| q.2),
        }
    }

    pub fn iqr(&self) -> Option<f64> {
        Some(self.q3? - self.q1?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: usize,
    pub diverged: usize,
    pub per_iteration: Vec<IterationStats>,
    /// Final-iteration model fits of model studies, by estimator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rls_model_fits: Option<Distribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ls_model_fits: Option<Distribution>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub methods: Vec<MethodSummary>,
    /// Runs that stopped with an error, as `(seed, method, message)`.
    pub failures: Vec<(u64, Method, String)>,
}

impl CampaignSummary {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

/// Per-method, per-iteration fit distributions over the given records.
pub fn aggregate(records: &[RunRecord]) -> CampaignSummary {
    let mut by_method: BTreeMap<u8, Vec<&RunRecord>> = BTreeMap::new();
    let key = |m: Method| m as u8;
    for r in records {
        by_method.entry(key(r.method)).or_default().push(r);
    }
    let methods = by_method
        .into_values()
        .map(|rs| {
            let n_iter = rs.iter().map(|r| r.tracking_fits.len()).max().unwrap_or(0);
            let per_iteration = (0..n_iter)
                .map(|j| {
                    let vals: Vec<f64> = rs
                        .iter()
                        .filter_map(|r| r.tracking_fits.get(j).copied().flatten())
                        .collect();
                    let d = Distribution::of(&vals);
                    IterationStats {
                        j,
                        count: d.count,
                        mean: d.mean,
                        q1: d.q1,
                        median: d.median,
                        q3: d.q3,
                    }
                })
                .collect();
            let studies: Vec<_> = rs.iter().filter_map(|r| r.model_study.as_ref()).collect();
            let (rls, ls) = if studies.is_empty() {
                (None, None)
            } else {
                let r: Vec<f64> = studies.iter().filter_map(|s| s.rls_average).collect();
                let l: Vec<f64> = studies.iter().filter_map(|s| s.ls_average).collect();
                (Some(Distribution::of(&r)), Some(Distribution::of(&l)))
            };
            MethodSummary {
                method: rs[0].method,
                runs: rs.len(),
                diverged: rs.iter().filter(|r| r.diverged_at.is_some()).count(),
                per_iteration,
                rls_model_fits: rls,
                ls_model_fits: ls,
            }
        })
        .collect();
    CampaignSummary { methods, failures: Vec::new() }
}

/// Runs every configuration on a pool of `parallelism` workers (0 uses the
/// default pool) and aggregates the records; `sink` receives each finished
/// run in input order.
pub fn run_campaign(
    configs: &[ExperimentConfig],
    parallelism: usize,
    mut sink: impl FnMut(&RunOutput) -> Result<()>,
) -> Result<CampaignSummary> {
    let run_all = || -> Vec<Result<RunOutput>> { configs.par_iter().map(run_experiment).collect() };
    let results = if parallelism == 0 {
        run_all()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism)
            .build()
            .map_err(|e| KrilcError::Config(e.to_string()))?
            .install(run_all)
    };
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (cfg, r) in configs.iter().zip(results) {
        match r {
            Ok(out) => {
                sink(&out)?;
                records.push(out.record);
            }
            Err(e) => {
                log::warn!("run seed={} method={:?} failed: {e}", cfg.seed, cfg.method);
                failures.push((cfg.seed, cfg.method, e.to_string()));
            }
        }
    }
    let mut summary = aggregate(&records);
    summary.failures = failures;
    Ok(summary)
}

/// Plot-ready per-iteration table.
pub fn fits_csv(summary: &CampaignSummary) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
    let mut s = String::from("method,j,count,mean,q1,median,q3\n");
    for m in &summary.methods {
        for it in &m.per_iteration {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                m.method.label(),
                it.j,
                it.count,
                opt(it.mean),
                opt(it.q1),
                opt(it.median),
                opt(it.q3)
            );
        }
    }
    s
}

/// Runs a campaign writing one directory per run under `dir`.
pub fn run_campaign_to_dir(configs: &[ExperimentConfig], parallelism: usize, dir: &Path) -> Result<CampaignSummary> {
    fs::create_dir_all(dir)?;
    let summary = run_campaign(configs, parallelism, |out| {
        let name = format!("{}-seed{}", out.config.method.label().to_ascii_lowercase(), out.config.seed);
        write_run(&dir.join("runs").join(name), out)
    })?;
    fs::write(dir.join("summary.json"), to_json(&summary)?)?;
    fs::write(dir.join("fits.csv"), fits_csv(&summary))?;
    Ok(summary)
}
