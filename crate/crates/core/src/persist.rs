//! Run directories: config, traces, controller log and records.
//!
//! Floating-point values are written with 17 significant digits so a reload
//! reproduces every bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{KrilcError, Result};
use crate::runner::{recompute_tracking_fits, ControllerRow, RunOutput, RunRecord};
use crate::store::IterationStore;

pub const CONFIG_FILE: &str = "config.toml";
pub const TRACE_FILE: &str = "trace.csv";
pub const REFERENCE_FILE: &str = "reference.csv";
pub const CONTROLLER_FILE: &str = "controller.csv";
pub const RECORD_FILE: &str = "record.json";
pub const TIMING_FILE: &str = "timing.json";
pub const PLANT_FILE: &str = "plant.txt";

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn trace_csv(store: &IterationStore) -> Result<String> {
    let mut s = String::from("j,t,u,y,v,e\n");
    for j in store.iterations() {
        let (u, y, v, e) = (store.u(j)?, store.y(j)?, store.v(j)?, store.e(j)?);
        for t in 0..u.len() {
            let _ = writeln!(s, "{j},{t},{},{},{},{}", num(u[t]), num(y[t]), num(v[t]), num(e[t]));
        }
    }
    Ok(s)
}

pub fn reference_csv(y_d: &[f64]) -> String {
    let mut s = String::from("t,y_d\n");
    for (t, v) in y_d.iter().enumerate() {
        let _ = writeln!(s, "{t},{}", num(*v));
    }
    s
}

pub fn controller_csv(rows: &[ControllerRow]) -> String {
    let mut s = String::from("j,t,theta_norm,u,lambda1,lambda2,kkt_residual,c,alpha,sigma_c2\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.j,
            r.t,
            num(r.theta_norm),
            num(r.u),
            num(r.lambda1),
            num(r.lambda2),
            num(r.kkt_residual),
            num(r.c),
            num(r.alpha),
            num(r.sigma_c2)
        );
    }
    s
}

fn parse_rows(text: &str, width: usize) -> Result<Vec<Vec<String>>> {
    let mut lines = text.lines().enumerate();
    if lines.next().is_none() {
        return Err(KrilcError::Parse { line: 1, msg: "missing header".into() });
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
        if fields.len() != width {
            return Err(KrilcError::Parse {
                line: i + 1,
                msg: format!("expected {width} fields, found {}", fields.len()),
            });
        }
        rows.push(fields);
    }
    Ok(rows)
}

fn field<T: std::str::FromStr>(row: &[String], k: usize, line: usize) -> Result<T> {
    row[k].parse().map_err(|_| KrilcError::Parse {
        line,
        msg: format!("bad value `{}`", row[k]),
    })
}

pub fn parse_reference(text: &str) -> Result<Vec<f64>> {
    let rows = parse_rows(text, 2)?;
    let mut y_d = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let t: usize = field(r, 0, i + 2)?;
        if t != i {
            return Err(KrilcError::Parse { line: i + 2, msg: "times must be consecutive from 0".into() });
        }
        y_d.push(field(r, 1, i + 2)?);
    }
    Ok(y_d)
}

/// Rebuilds the store from a trace and reference; errors are recomputed and
/// checked against the stored column.
pub fn parse_trace(text: &str, y_d: Vec<f64>) -> Result<IterationStore> {
    let rows = parse_rows(text, 6)?;
    let n = y_d.len();
    if rows.is_empty() {
        return Err(KrilcError::Parse { line: 2, msg: "empty trace".into() });
    }
    let first: usize = field(&rows[0], 0, 2)?;
    let mut store = IterationStore::new(y_d, first)?;
    for (k, chunk) in rows.chunks(n).enumerate() {
        let line0 = 2 + k * n;
        if chunk.len() != n {
            return Err(KrilcError::Parse { line: line0, msg: "incomplete iteration".into() });
        }
        let mut u = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        let mut e = Vec::with_capacity(n);
        for (t, r) in chunk.iter().enumerate() {
            let line = line0 + t;
            let j: usize = field(r, 0, line)?;
            let tt: usize = field(r, 1, line)?;
            if j != first + k || tt != t {
                return Err(KrilcError::Parse { line, msg: "rows out of order".into() });
            }
            u.push(field::<f64>(r, 2, line)?);
            y.push(field::<f64>(r, 3, line)?);
            v.push(field::<f64>(r, 4, line)?);
            e.push(field::<f64>(r, 5, line)?);
        }
        let j = store.push(u, y, v)?;
        if store.e(j)? != e.as_slice() {
            return Err(KrilcError::Parse { line: line0, msg: format!("stored errors of iteration {j} disagree") });
        }
    }
    Ok(store)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
}

pub fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), out.config.to_toml()?)?;
    fs::write(dir.join(TRACE_FILE), trace_csv(&out.store)?)?;
    fs::write(dir.join(REFERENCE_FILE), reference_csv(out.store.reference()))?;
    fs::write(dir.join(CONTROLLER_FILE), controller_csv(&out.controller_log))?;
    fs::write(dir.join(PLANT_FILE), out.plant.to_text())?;
    fs::write(dir.join(RECORD_FILE), to_json(&out.record)?)?;
    fs::write(
        dir.join(TIMING_FILE),
        to_json(&Timing { wall_seconds: out.wall_seconds })?,
    )?;
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| KrilcError::Config(e.to_string()))
}

pub fn read_record(dir: &Path) -> Result<RunRecord> {
    let text = fs::read_to_string(dir.join(RECORD_FILE))?;
    serde_json::from_str(&text).map_err(|e| KrilcError::Parse { line: e.line(), msg: e.to_string() })
}

pub fn read_config(dir: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml(&fs::read_to_string(dir.join(CONFIG_FILE))?)
}

pub fn read_store(dir: &Path) -> Result<IterationStore> {
    let y_d = parse_reference(&fs::read_to_string(dir.join(REFERENCE_FILE))?)?;
    parse_trace(&fs::read_to_string(dir.join(TRACE_FILE))?, y_d)
}

/// Outcome of recomputing a stored record from its traces.
#[derive(Debug, Clone, PartialEq)]
pub struct FitCheck {
    pub stored: Vec<Option<f64>>,
    pub recomputed: Vec<Option<f64>>,
    pub max_abs_u_matches: bool,
}

impl FitCheck {
    /// Bit-for-bit agreement.
    pub fn matches(&self) -> bool {
        self.max_abs_u_matches
            && self.stored.len() == self.recomputed.len()
            && self.stored.iter().zip(&self.recomputed).all(|(a, b)| match (a, b) {
                (Some(x), Some(y)) => x.to_bits() == y.to_bits(),
                (None, None) => true,
                _ => false,
            })
    }
}

pub fn check_fits(dir: &Path) -> Result<FitCheck> {
    let record = read_record(dir)?;
    let store = read_store(dir)?;
    let recomputed = if record.tracking_fits.is_empty() {
        Vec::new()
    } else {
        recompute_tracking_fits(&store, record.n_e)
    };
    let max_u = store
        .iterations()
        .filter_map(|j| store.u(j).ok())
        .flat_map(|u| u.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(FitCheck {
        stored: record.tracking_fits,
        recomputed,
        max_abs_u_matches: max_u.to_bits() == record.max_abs_u.to_bits(),
    })
}
