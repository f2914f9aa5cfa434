//! Batch command-line interface.

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::campaign::{campaign_configs, run_campaign_to_dir};
use crate::config::{ExperimentConfig, Method, Preset};
use crate::error::{KrilcError, Result};
use crate::persist::{check_fits, to_json, write_run};
use crate::plant::{theorem1_report, to_state_space, LtvArxModel};
use crate::runner::{build_plant, run_experiment};

#[derive(Debug, Parser)]
#[command(name = "krilc", version, about = "Kernel-based regularized iterative learning control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Source {
    /// Experiment configuration (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration.
    #[arg(long, value_parser = ["sec51", "sec52-model", "sec52-control"])]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<String>,
}

impl Source {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::from_toml(
                &fs::read_to_string(path).map_err(|e| KrilcError::Config(format!("{}: {e}", path.display())))?,
            )?,
            (None, Some(p)) => ExperimentConfig::preset(p.parse::<Preset>()?),
            (None, None) => return Err(KrilcError::Config("one of --config or --preset is required".into())),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(m) = &self.method {
            cfg.method = m.parse()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write its run directory.
    Run {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run independent experiments over consecutive seeds.
    Campaign {
        #[command(flatten)]
        source: Source,
        /// Number of seeds.
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Comma-separated methods; defaults to the configured one.
        #[arg(long)]
        methods: Option<String>,
        /// Worker threads (0 uses all cores).
        #[arg(long, default_value_t = 0)]
        parallel: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the stability condition and ultimate bound for a plant.
    Bound {
        #[command(flatten)]
        source: Source,
        /// Plant file instead of the configured plant.
        #[arg(long)]
        plant: Option<PathBuf>,
        /// Noise bound used in the report.
        #[arg(long)]
        d_v: Option<f64>,
    },
    /// Emit plants of the configured kind for consecutive seeds.
    Gen {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute fits from a run directory and compare with its record.
    Fit {
        #[arg(long)]
        run: PathBuf,
    },
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Run { source, out } => {
            let cfg = source.load()?;
            let run = run_experiment(&cfg)?;
            write_run(&out, &run)?;
            let last = run.record.tracking_fits.iter().rev().flatten().next();
            match (last, &run.record.model_study) {
                (_, Some(s)) => println!(
                    "model fit: RLS {:.2}, LS {:.2}",
                    s.rls_average.unwrap_or(f64::NAN),
                    s.ls_average.unwrap_or(f64::NAN)
                ),
                (Some(f), None) => println!("final tracking fit {f:.2}"),
                (None, None) => println!("no defined tracking fit"),
            }
            Ok(0)
        }
        Command::Campaign { source, count, methods, parallel, out } => {
            let cfg = source.load()?;
            let methods: Vec<Method> = match methods {
                Some(list) => list.split(',').map(|m| m.trim().parse()).collect::<Result<_>>()?,
                None => vec![cfg.method],
            };
            let configs = campaign_configs(&cfg, &methods, cfg.seed, count);
            let summary = run_campaign_to_dir(&configs, parallel, &out)?;
            for m in &summary.methods {
                let last = m.per_iteration.last().and_then(|s| s.mean);
                println!(
                    "{}: {} runs, final mean fit {}",
                    m.method.label(),
                    m.runs,
                    last.map_or("n/a".to_string(), |v| format!("{v:.2}"))
                );
            }
            Ok(if summary.failures.is_empty() { 0 } else { 2 })
        }
        Command::Bound { source, plant, d_v } => {
            let cfg = source.load()?;
            let model = match plant {
                Some(p) => LtvArxModel::from_text(&fs::read_to_string(p)?)?,
                None => build_plant(&cfg)?,
            };
            let d_v = d_v.or(cfg.noise.d_v).ok_or_else(|| KrilcError::Config("a noise bound d_v is required".into()))?;
            let y_d = cfg.reference.trajectory(model.horizon);
            let d_r = y_d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let report = theorem1_report(&to_state_space(&model), cfg.d_c, cfg.d_u, d_v, d_r, model.n_b, cfg.n_c)?;
            println!("{}", to_json(&report)?);
            Ok(0)
        }
        Command::Gen { source, count, out } => {
            let cfg = source.load()?;
            fs::create_dir_all(&out)?;
            for k in 0..count as u64 {
                let c = cfg.clone().with_seed(cfg.seed + k);
                let model = build_plant(&c)?;
                fs::write(out.join(format!("plant-{}.txt", c.seed)), model.to_text())?;
            }
            Ok(0)
        }
        Command::Fit { run } => {
            let check = check_fits(&run)?;
            if check.matches() {
                println!("fits reproduced for {} iterations", check.recomputed.len());
                Ok(0)
            } else {
                println!("recomputed fits differ from the stored record");
                if !check.max_abs_u_matches {
                    println!("max |u| differs");
                }
                for (j, (a, b)) in check.stored.iter().zip(&check.recomputed).enumerate() {
                    if a.map(f64::to_bits) != b.map(f64::to_bits) {
                        println!("iteration {j}: stored {a:?}, recomputed {b:?}");
                    }
                }
                if check.stored.len() != check.recomputed.len() {
                    println!("{} stored iterations, {} recomputed", check.stored.len(), check.recomputed.len());
                }
                Ok(2)
            }
        }
    }
}

/// Exit code: 0 on success, 1 on configuration errors, 2 on runtime failures.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                1
            } else {
                2
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(cli_main(["krilc", "--help"]), 0);
        assert_eq!(cli_main(["krilc", "run", "--out", "/nonexistent"]), 1);
        assert_eq!(cli_main(["krilc", "run", "--preset", "bogus", "--out", "x"]), 1);
        assert_eq!(cli_main(["krilc", "fit", "--run", "/nonexistent/dir"]), 2);
    }
}
