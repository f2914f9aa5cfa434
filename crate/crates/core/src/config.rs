//! Experiment configuration and presets.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::AdaptiveParams;
use crate::controller::{ControllerSettings, ControllerTuning};
use crate::error::{KrilcError, Result};
use crate::kernels::KernelFamily;
use crate::model_estimation::{ModelMethod, ModelSettings};
use crate::noise::NoiseSpec;
use crate::regression::{NoiseVariance, SureSettings};
use crate::sysgen::{ArSign, GeneratorConfig, GeneratorFilter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Krilc,
    KrilcLs,
    Adaptive,
    Inversion,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Krilc => "KRILC",
            Method::KrilcLs => "KRILC-LS",
            Method::Adaptive => "ILC",
            Method::Inversion => "IILC",
        }
    }
}

impl FromStr for Method {
    type Err = KrilcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "krilc" => Ok(Method::Krilc),
            "krilc-ls" => Ok(Method::KrilcLs),
            "adaptive" | "ilc" => Ok(Method::Adaptive),
            "inversion" | "iilc" => Ok(Method::Inversion),
            other => Err(KrilcError::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// What a run produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    /// Closed-loop learning over iterations.
    Control,
    /// Open-loop data bank with white input, then per-time model fits.
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PlantSpec {
    Fixed51 {
        #[serde(default)]
        ar_sign: ArSign,
    },
    Generated {
        order: usize,
        radius: f64,
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        filter: Option<GeneratorFilter>,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceSpec {
    Sec51,
    Sec52,
    Zero,
}

impl ReferenceSpec {
    /// `y_d(t)` for `t = 0..=horizon`.
    pub fn trajectory(&self, horizon: usize) -> Vec<f64> {
        (0..=horizon)
            .map(|t| match self {
                ReferenceSpec::Sec51 => crate::sysgen::reference_51(t),
                ReferenceSpec::Sec52 => crate::sysgen::reference_52(t),
                ReferenceSpec::Zero => 0.0,
            })
            .collect()
    }
}

/// How iteration 0 is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitSpec {
    /// Adaptive-law passes from zero input; the last one, saturated at `±d_u`,
    /// becomes iteration 0.
    Adaptive { passes: usize },
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelTuning {
    pub starts: usize,
    pub warm_starts: usize,
    pub max_evals: usize,
    pub tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polish_to: Option<f64>,
}

impl Default for ModelTuning {
    fn default() -> Self {
        let s = SureSettings::default();
        ModelTuning {
            starts: s.starts,
            warm_starts: 1,
            max_evals: s.max_evals,
            tol: s.tol,
            polish_to: s.polish_to,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub study: Study,
    pub method: Method,
    pub plant: PlantSpec,
    pub reference: ReferenceSpec,
    pub n_e: usize,
    pub n_d: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub n_c: usize,
    pub d_u: f64,
    pub d_c: f64,
    pub noise: NoiseSpec,
    pub model_family_b: KernelFamily,
    pub model_family_a: KernelFamily,
    pub model_method: ModelMethod,
    pub controller_family: KernelFamily,
    pub model_tuning: ModelTuning,
    pub controller_tuning: ControllerTuning,
    pub adaptive: AdaptiveParams,
    pub gamma: f64,
    pub init: InitSpec,
    /// Variance of the white input of the model study.
    pub input_variance: f64,
    pub seed: u64,
    /// Record per-`(j, t)` model fits against the true plant.
    pub record_model_fits: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Sec51,
    Sec52Model,
    Sec52Control,
}

impl FromStr for Preset {
    type Err = KrilcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sec51" => Ok(Preset::Sec51),
            "sec52-model" => Ok(Preset::Sec52Model),
            "sec52-control" => Ok(Preset::Sec52Control),
            other => Err(KrilcError::Config(format!("unknown preset `{other}`"))),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Sec51 => ExperimentConfig {
                study: Study::Control,
                method: Method::Krilc,
                plant: PlantSpec::Fixed51 { ar_sign: ArSign::AsPrinted },
                reference: ReferenceSpec::Sec51,
                n_e: 50,
                n_d: 50,
                n_a: 10,
                n_b: 10,
                n_c: 10,
                d_u: 2.0,
                d_c: 0.7,
                noise: NoiseSpec { sigma2: 0.01, d_v: Some(0.05) },
                model_family_b: KernelFamily::DI,
                model_family_a: KernelFamily::DI,
                model_method: ModelMethod::Rls,
                controller_family: KernelFamily::DI,
                model_tuning: ModelTuning::default(),
                controller_tuning: ControllerTuning::default(),
                adaptive: AdaptiveParams::default(),
                gamma: 0.9,
                init: InitSpec::Adaptive { passes: 3 },
                input_variance: 1.0,
                seed: 0,
                record_model_fits: false,
            },
            Preset::Sec52Control => ExperimentConfig {
                plant: PlantSpec::Generated {
                    order: 10,
                    radius: 0.95,
                    seed: 0,
                    filter: Some(GeneratorFilter::default()),
                },
                reference: ReferenceSpec::Sec52,
                n_e: 150,
                n_d: 200,
                n_a: 20,
                n_b: 20,
                n_c: 10,
                d_u: 15.0,
                d_c: 0.3,
                ..Self::preset(Preset::Sec51)
            },
            Preset::Sec52Model => ExperimentConfig {
                study: Study::Model,
                plant: PlantSpec::Generated {
                    order: 10,
                    radius: 0.95,
                    seed: 0,
                    filter: None,
                },
                reference: ReferenceSpec::Zero,
                n_e: 200,
                n_d: 200,
                n_a: 20,
                n_b: 20,
                noise: NoiseSpec { sigma2: 1.0, d_v: None },
                init: InitSpec::Zero,
                ..Self::preset(Preset::Sec51)
            },
        }
    }

    /// Replaces the run seed and, for generated plants, the plant seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let PlantSpec::Generated { seed: s, .. } = &mut self.plant {
            *s = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KrilcError::Config(m.to_string()));
        if self.n_d < 2 {
            return bad("n_d must be at least 2");
        }
        if self.n_e == 0 {
            return bad("n_e must be positive");
        }
        if self.n_a == 0 || self.n_b == 0 || self.n_c == 0 {
            return bad("model and controller orders must be positive");
        }
        if !(self.d_u > 0.0) || !(self.d_c >= 0.0) {
            return bad("d_u must be positive and d_c non-negative");
        }
        if !(self.noise.sigma2 >= 0.0) || self.noise.d_v.is_some_and(|d| !(d > 0.0)) {
            return bad("noise variance must be non-negative and d_v positive");
        }
        if !(self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if !(self.input_variance >= 0.0) {
            return bad("input_variance must be non-negative");
        }
        if let InitSpec::Adaptive { passes: 0 } = self.init {
            return bad("adaptive initialization needs at least one pass");
        }
        if let PlantSpec::Generated { order, radius, .. } = self.plant {
            if order == 0 || !(radius > 0.0 && radius < 1.0) {
                return bad("generated plants need order >= 1 and radius in (0, 1)");
            }
        }
        self.adaptive.validate().map_err(|e| KrilcError::Config(e.to_string()))
    }

    pub fn model_settings(&self) -> ModelSettings {
        let mut m = ModelSettings::new(self.n_a, self.n_b);
        m.family_b = self.model_family_b;
        m.family_a = self.model_family_a;
        m.method = self.model_method;
        m.warm_starts = self.model_tuning.warm_starts;
        m.sure = SureSettings {
            starts: self.model_tuning.starts,
            max_evals: self.model_tuning.max_evals,
            tol: self.model_tuning.tol,
            seed: self.seed,
            noise: NoiseVariance::PlugIn,
            polish_to: self.model_tuning.polish_to,
        };
        m
    }

    pub fn controller_settings(&self) -> ControllerSettings {
        ControllerSettings {
            n_c: self.n_c,
            d_u: self.d_u,
            d_c: self.d_c,
            family: self.controller_family,
            regularized: self.method != Method::KrilcLs,
            tuning: self.controller_tuning,
        }
    }

    pub fn generator(&self) -> Option<GeneratorConfig> {
        match self.plant {
            PlantSpec::Generated { order, radius, seed, filter } => Some(GeneratorConfig {
                order,
                radius,
                horizon: self.n_d,
                seed,
                filter,
            }),
            _ => None,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| KrilcError::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| KrilcError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
