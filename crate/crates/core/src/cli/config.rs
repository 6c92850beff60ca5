use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, TaskConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, LossConfig, Regularizer, SgdConfig};
use crate::ortho::{LSUV_MAX_ITERS, LSUV_TOL_VAR};

/// Training recipe named in the config file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BaselineCe,
    AlmostRight,
    HardOrtho,
    LsuvInit,
    LsuvPlusAlmostRight,
}

impl Method {
    pub fn regularizer(self) -> Regularizer {
        match self {
            Method::BaselineCe | Method::LsuvInit => Regularizer::None,
            Method::AlmostRight | Method::LsuvPlusAlmostRight => Regularizer::AlmostRight,
            Method::HardOrtho => Regularizer::HardOrtho,
        }
    }

    pub fn uses_lsuv(self) -> bool {
        matches!(self, Method::LsuvInit | Method::LsuvPlusAlmostRight)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::BaselineCe => "baseline_ce",
            Method::AlmostRight => "almost_right",
            Method::HardOrtho => "hard_ortho",
            Method::LsuvInit => "lsuv_init",
            Method::LsuvPlusAlmostRight => "lsuv_plus_almost_right",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxTask {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Synthetic(TaskConfig),
    /// Closed-set classification from IDX files, scored by accuracy.
    Idx(IdxTask),
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::Synthetic(TaskConfig::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LsuvConfig {
    pub tol_var: f64,
    pub max_iters: usize,
}

impl Default for LsuvConfig {
    fn default() -> Self {
        Self {
            tol_var: LSUV_TOL_VAR,
            max_iters: LSUV_MAX_ITERS,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum SgdPreset {
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLoss {
    alpha: Option<f64>,
    epsilon: Option<f64>,
    regularizer: Option<Regularizer>,
    first_activation: Option<Activation>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSgd {
    #[serde(default)]
    preset: SgdPreset,
    lr0: Option<f64>,
    decay_factor: Option<f64>,
    decay_every: Option<usize>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    method: Method,
    output_dir: PathBuf,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default)]
    task: TaskSpec,
    #[serde(default)]
    loss: RawLoss,
    #[serde(default)]
    sgd: RawSgd,
    #[serde(default)]
    lsuv: LsuvConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Fully resolved experiment. Serialized into every report; the output
/// directory is left out so that runs written elsewhere compare equal.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub method: Method,
    #[serde(skip)]
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub task: TaskSpec,
    pub loss: LossConfig,
    pub sgd: SgdConfig,
    pub lsuv: Option<LsuvConfig>,
}

impl ExperimentConfig {
    /// Defaults for `method` on the given task: α = 0.5 for regularized
    /// methods, desk SGD schedule, seed 0.
    pub fn new(method: Method, task: TaskSpec, output_dir: impl Into<PathBuf>) -> Self {
        let loss = match method.regularizer() {
            Regularizer::None => LossConfig::cross_entropy(),
            Regularizer::AlmostRight => LossConfig::almost_right(0.5),
            Regularizer::HardOrtho => LossConfig::hard_ortho(0.5),
        };
        Self {
            method,
            output_dir: output_dir.into(),
            seeds: default_seeds(),
            task,
            loss,
            sgd: SgdConfig::desk(),
            lsuv: method.uses_lsuv().then(LsuvConfig::default),
        }
    }

    /// Parses a TOML config. Relative paths are resolved against `base`.
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map_or_else(|| "config".into(), |span| field_at(text, span.start));
            Error::config(field, e.to_string().trim_end())
        })?;
        let mut cfg = Self::new(raw.method, raw.task, base.join(&raw.output_dir));
        cfg.seeds = raw.seeds;
        if let TaskSpec::Idx(idx) = &mut cfg.task {
            for p in [&mut idx.train_images, &mut idx.train_labels, &mut idx.test_images, &mut idx.test_labels] {
                *p = base.join(&*p);
            }
        }

        let implied = raw.method.regularizer();
        if let Some(r) = raw.loss.regularizer {
            if r != implied {
                return Err(Error::config(
                    "loss.regularizer",
                    format!("{r:?} contradicts method {}, which implies {implied:?}", raw.method.name()),
                ));
            }
        }
        if let Some(alpha) = raw.loss.alpha {
            if implied == Regularizer::None && alpha != 1.0 {
                return Err(Error::config(
                    "loss.alpha",
                    format!("method {} has no regularizer; alpha must be 1", raw.method.name()),
                ));
            }
            cfg.loss.alpha = alpha;
        }
        if let Some(eps) = raw.loss.epsilon {
            cfg.loss.epsilon = eps;
        }
        if let Some(act) = raw.loss.first_activation {
            cfg.loss.first_activation = act;
        }

        let s = raw.sgd;
        let mut sgd = match s.preset {
            SgdPreset::Desk => SgdConfig::desk(),
            SgdPreset::Full => SgdConfig::full(),
        };
        sgd.lr0 = s.lr0.unwrap_or(sgd.lr0);
        sgd.decay_factor = s.decay_factor.unwrap_or(sgd.decay_factor);
        sgd.decay_every = s.decay_every.unwrap_or(sgd.decay_every);
        sgd.batch_size = s.batch_size.unwrap_or(sgd.batch_size);
        sgd.epochs = s.epochs.unwrap_or(sgd.epochs);
        cfg.sgd = sgd;
        if raw.method.uses_lsuv() {
            cfg.lsuv = Some(raw.lsuv);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        if self.method.regularizer() != self.loss.regularizer {
            return Err(Error::config("loss.regularizer", format!("inconsistent with method {}", self.method.name())));
        }
        self.loss.validate().map_err(|e| prefix_field(e, "loss"))?;
        self.sgd.validate()?;
        if let Some(l) = &self.lsuv {
            if !(l.tol_var > 0.0) {
                return Err(Error::config("lsuv.tol_var", "must be > 0"));
            }
        }
        match &self.task {
            TaskSpec::Synthetic(t) => t.validate(),
            TaskSpec::Idx(_) => Ok(()),
        }
    }

    /// The same experiment with a different α (regularized methods only).
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        if self.loss.regularizer == Regularizer::None {
            return Err(Error::config("method", format!("{} has no α to sweep", self.method.name())));
        }
        let mut cfg = self.clone();
        cfg.loss.alpha = alpha;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match &self.task {
            TaskSpec::Synthetic(t) => data::generate_openset_task(t),
            TaskSpec::Idx(i) => data::idx_dataset(
                &i.train_images,
                &i.train_labels,
                &i.test_images,
                &i.test_labels,
                i.val_fraction,
                i.seed,
            ),
        }
    }
}

/// Dotted name of the key that starts at byte `pos`, using the closest
/// preceding `[table]` header.
fn field_at(text: &str, pos: usize) -> String {
    let before = &text[..pos.min(text.len())];
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = &text[line_start..];
    let key: String = line.trim_start().chars().take_while(|c| c.is_alphanumeric() || *c == '_').collect();
    let table = before[..line_start]
        .lines()
        .rev()
        .find_map(|l| l.trim().strip_prefix('[').and_then(|l| l.strip_suffix(']')).map(str::trim));
    match (table, key.is_empty()) {
        (Some(t), true) => t.to_string(),
        (Some(t), false) => format!("{t}.{key}"),
        (None, true) => "config".into(),
        (None, false) => key,
    }
}

fn prefix_field(e: Error, section: &str) -> Error {
    match e {
        Error::Config { field, message } if !field.contains('.') => Error::Config {
            field: format!("{section}.{field}"),
            message,
        },
        other => other,
    }
}
