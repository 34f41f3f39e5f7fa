//! Run configuration for `hetreg train`.

use std::fmt;
use std::marker::PhantomData;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::{self, Deserializer};
use serde::Deserialize;
use toml::Spanned;

use hetreg_core::losses::LossKind;
use hetreg_core::mlp::{Activation, MlpConfig};
use hetreg_core::train::{Schedule, TrainSpec};

use crate::error::{CliError, CliResult};

pub const SCHEMA: &str = r#"# hetreg train configuration (TOML)
#
# output_dir   = "out"          # required; created if missing, relative to the config file
# repetitions  = 5              # independent trials, seeds seed, seed+1, ...  (≥ 1)
# seed         = 0
# plots        = true           # write SVG line plots next to the CSVs
# timing       = false          # record step_time_ms and peak_bytes; reruns then
#                               # differ in those columns (use HETREG_THREADS=1)
# label_source = "auto"         # auto | pseudo | ground_truth
#                               # auto: kl_calibrated uses ground truth when the
#                               # scenario has it, everything else pseudo-labels
#
# [scenario]                    # exactly one, selected by `kind`
# kind = "bivariate_p1"         # fit one 2-D Gaussian; epochs count optimizer steps
# samples = 1000
#
# kind = "sinusoid"
# variant = 1                   # 1: |x| sin 2πx, 2: (5-|x|) sin 2πx, 3: 5 sin 2πx; σ(x) = |x|
# samples = 50000
# test_fraction = 0.2
#
# kind = "multivariate"
# dim = 8                       # input and target dimension, ≥ 2
# samples = 6286                # default interpolates 4000 (dim 4) .. 20000 (dim 32)
# test_fraction = 0.2
#
# kind = "csv"
# path = "data.csv"             # numeric table; relative to the config file
# has_header = true
# target_fraction = 0.25        # random subset of columns becomes the targets
# test_fraction = 0.2
# standardize = true            # per-column z-scores from the training split
#
# [[loss]]                      # one table per training run, repeated
# loss = "w2_bound"             # nll_full | nll_diag | beta_nll | beta_nll_<β> |
#                               # faithful | kl_calibrated | w2_bound
# schedule = "standard"         # standard | warmup | warmup:<fraction> |
#                               # hybrid:<switch_epoch>:<loss>
# lr = 1e-3                     # default 1e-2 for bivariate_p1, else 1e-3
# epochs = 100                  # default 5000 steps for bivariate_p1
# batch = 64                    # 0 = full batch (always full for bivariate_p1)
# pseudo_k = 10                 # default 10 × target dimension
# hidden_layers = 4             # defaults: sinusoid/csv 4×50 tanh,
# hidden_width = 50             #   multivariate 10 × dim² elu
# activation = "tanh"           # tanh | elu
"#;

/// A value parsed from a TOML string through `FromStr`, so that bad names
/// are reported at their position in the file.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Parsed<T>(pub T);

impl<'de, T> Deserialize<'de> for Parsed<T>
where
    T: FromStr,
    T::Err: fmt::Display,
{
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V<T>(PhantomData<T>);
        impl<T> de::Visitor<'_> for V<T>
        where
            T: FromStr,
            T::Err: fmt::Display,
        {
            type Value = Parsed<T>;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a string")
            }
            fn visit_str<E: de::Error>(self, s: &str) -> Result<Self::Value, E> {
                s.parse().map(Parsed).map_err(E::custom)
            }
        }
        d.deserialize_str(V(PhantomData))
    }
}

/// A number strictly between 0 and 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fraction(pub f64);

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if v > 0.0 && v < 1.0 {
            Ok(Fraction(v))
        } else {
            Err(de::Error::custom(format!("expected a fraction in (0, 1), got {v}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    #[default]
    Auto,
    Pseudo,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioConfig {
    BivariateP1 {
        samples: Option<NonZeroUsize>,
    },
    Sinusoid {
        variant: u32,
        samples: Option<NonZeroUsize>,
        test_fraction: Option<Fraction>,
    },
    Multivariate {
        dim: usize,
        samples: Option<NonZeroUsize>,
        test_fraction: Option<Fraction>,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "yes")]
        has_header: bool,
        target_fraction: Option<Fraction>,
        test_fraction: Option<Fraction>,
        #[serde(default = "yes")]
        standardize: bool,
    },
}

fn yes() -> bool {
    true
}

fn five() -> NonZeroUsize {
    NonZeroUsize::new(5).expect("nonzero")
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub loss: Parsed<LossKind>,
    pub schedule: Option<Parsed<Schedule>>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub pseudo_k: Option<NonZeroUsize>,
    pub hidden_layers: Option<usize>,
    pub hidden_width: Option<NonZeroUsize>,
    pub activation: Option<Parsed<Activation>>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default = "five")]
    pub repetitions: NonZeroUsize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub plots: bool,
    /// Fill step_time_ms/peak_bytes; off by default so reruns are byte-identical.
    #[serde(default)]
    pub timing: bool,
    #[serde(default)]
    pub label_source: LabelSource,
    pub scenario: ScenarioConfig,
    #[serde(rename = "loss")]
    pub losses: Vec<Spanned<LossConfig>>,
}

/// 1-based line and column of byte `offset` in `text`.
pub fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |nl| before.len() - nl - 1) + 1;
    (line, col)
}

/// A parsed config with the file it came from, so relative paths resolve.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub text: String,
    pub config: RunConfig,
}

impl LoadedConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_str_at(&text, path)
    }

    pub fn from_str_at(text: &str, path: &Path) -> CliResult<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let (line, col) = e.span().map_or((1, 1), |s| line_col(text, s.start));
            CliError::Config {
                path: path.to_path_buf(),
                line,
                col,
                message: e.message().to_string(),
            }
        })?;
        let loaded = LoadedConfig {
            path: path.to_path_buf(),
            text: text.to_string(),
            config,
        };
        for i in 0..loaded.config.losses.len() {
            loaded.train_spec(i, 0)?;
        }
        if loaded.config.losses.is_empty() {
            return Err(loaded.error_at(0, "at least one [[loss]] table is required".into()));
        }
        loaded.check_scenario()?;
        Ok(loaded)
    }

    fn error_at(&self, offset: usize, message: String) -> CliError {
        let (line, col) = line_col(&self.text, offset);
        CliError::Config {
            path: self.path.clone(),
            line,
            col,
            message,
        }
    }

    fn scenario_offset(&self) -> usize {
        self.text.find("[scenario]").unwrap_or(0)
    }

    fn check_scenario(&self) -> CliResult<()> {
        let msg = match &self.config.scenario {
            ScenarioConfig::Sinusoid { variant, .. } if !(1..=3).contains(variant) => {
                format!("sinusoid variant must be 1, 2 or 3, got {variant}")
            }
            ScenarioConfig::Multivariate { dim, .. } if *dim < 2 => {
                format!("multivariate dim must be at least 2, got {dim}")
            }
            _ => return Ok(()),
        };
        Err(self.error_at(self.scenario_offset(), msg))
    }

    /// Directory that relative paths in the file are resolved against.
    pub fn base_dir(&self) -> PathBuf {
        self.path.parent().map(Path::to_path_buf).unwrap_or_default()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir().join(p)
        }
    }

    pub fn is_bivariate(&self) -> bool {
        matches!(self.config.scenario, ScenarioConfig::BivariateP1 { .. })
    }

    /// Input and target dimension, when known without loading data.
    fn known_dims(&self) -> Option<(usize, usize)> {
        match &self.config.scenario {
            ScenarioConfig::BivariateP1 { .. } => Some((1, 2)),
            ScenarioConfig::Sinusoid { .. } => Some((1, 1)),
            ScenarioConfig::Multivariate { dim, .. } => Some((*dim, *dim)),
            ScenarioConfig::Csv { .. } => None,
        }
    }

    fn default_template(&self, input_dim: usize) -> MlpConfig {
        match &self.config.scenario {
            ScenarioConfig::BivariateP1 { .. } => hetreg_core::train::bivariate_spec(LossKind::NllFull, 1e-2, 0, 0).mean_arch,
            ScenarioConfig::Multivariate { dim, .. } => MlpConfig::multivariate(*dim, *dim),
            _ => MlpConfig::univariate(input_dim, 1),
        }
    }

    /// Training spec of loss table `i` for repetition `rep`, checked against
    /// the scenario dimensions when they are known up front.
    pub fn train_spec(&self, i: usize, rep: usize) -> CliResult<TrainSpec> {
        let (input_dim, target_dim) = self.known_dims().unwrap_or((1, 1));
        self.train_spec_for(i, rep, input_dim, target_dim)
    }

    pub fn train_spec_for(&self, i: usize, rep: usize, input_dim: usize, target_dim: usize) -> CliResult<TrainSpec> {
        let spanned = &self.config.losses[i];
        let lc = spanned.get_ref();
        let bivariate = self.is_bivariate();
        let mut template = self.default_template(input_dim);
        template.input_dim = input_dim;
        if !bivariate {
            if let Some(h) = lc.hidden_layers {
                template.hidden_layers = h;
            }
            if let Some(w) = lc.hidden_width {
                template.hidden_width = w.get();
            }
            if let Some(Parsed(a)) = lc.activation {
                template.activation = a;
            }
        }
        let mut spec = TrainSpec::new(lc.loss.0, template, target_dim);
        spec.schedule = lc.schedule.map_or(Schedule::Standard, |p| p.0);
        spec.lr = lc.lr.unwrap_or(if bivariate { 1e-2 } else { 1e-3 });
        spec.epochs = lc.epochs.unwrap_or(if bivariate { 5000 } else { 100 });
        spec.batch = if bivariate { 0 } else { lc.batch.unwrap_or(64) };
        spec.seed = self.config.seed + rep as u64;
        spec.pseudo_k = lc.pseudo_k.map(NonZeroUsize::get);
        if bivariate && spec.schedule != Schedule::Standard {
            return Err(self.error_at(spanned.span().start, "bivariate_p1 runs use the standard schedule".into()));
        }
        spec.validate()
            .map_err(|e| self.error_at(spanned.span().start, e.to_string()))?;
        Ok(spec)
    }
}
