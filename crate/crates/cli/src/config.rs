//! Run configuration: defaults, then a TOML file, then `CTXQA_*`
//! environment variables, then command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use ctxqa_core::embedder::CharCnnConfig;
use ctxqa_core::encoders::{BiLstmConfig, MlpConfig};
use ctxqa_core::model::ModelConfig;
use ctxqa_core::reembed::Variant;
use ctxqa_core::tensor::AdamConfig;
use ctxqa_core::train::TrainOptions;

/// Prefix of environment overrides: `CTXQA_HIDDEN=50` sets `hidden`.
pub const ENV_PREFIX: &str = "CTXQA_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `base` (no re-embedding), `tr`, `tr-mlp`, `tr-lm-emb`, `tr-lm-l1` or `tr-lm-l2`.
    pub variant: String,
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_widths: Vec<usize>,
    pub char_filters: usize,
    pub layers: usize,
    pub hidden: usize,
    pub input_dropout: f64,
    pub hidden_dropout: f64,
    /// Share one dropout mask across time steps.
    pub variational_dropout: bool,
    pub word_dropout: f64,
    pub ff_dropout: f64,
    pub d_f: usize,
    pub mlp_dims: Vec<usize>,
    pub mlp_dropout: f64,
    pub reembed_bias: bool,
    pub align_on_raw_embeddings: bool,
    pub max_span: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub target_em: Option<f64>,
    pub min_count: u64,
    pub seed: u64,
    pub train_file: Option<PathBuf>,
    /// Scored during training; the training file itself when unset.
    pub dev_file: Option<PathBuf>,
    /// GloVe-format text file.
    pub embeddings: Option<PathBuf>,
    /// Use deterministic per-word vectors instead of an embeddings file.
    pub synthetic_embeddings: bool,
    pub lm_states: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cnn = CharCnnConfig::default();
        let lstm = BiLstmConfig::default();
        let mlp = MlpConfig::default();
        RunConfig {
            variant: "tr".into(),
            word_dim: 300,
            char_dim: cnn.char_dim,
            char_widths: cnn.widths,
            char_filters: cnn.filters_per_width,
            layers: lstm.layers,
            hidden: lstm.hidden,
            input_dropout: lstm.input_dropout,
            hidden_dropout: lstm.hidden_dropout,
            variational_dropout: lstm.variational,
            word_dropout: 0.15,
            ff_dropout: 0.2,
            d_f: 100,
            mlp_dims: mlp.hidden,
            mlp_dropout: mlp.dropout,
            reembed_bias: true,
            align_on_raw_embeddings: false,
            max_span: 30,
            batch_size: 80,
            lr: 1e-3,
            max_steps: 50_000,
            eval_every: 500,
            patience: 5,
            target_em: None,
            min_count: 1,
            seed: 1,
            train_file: None,
            dev_file: None,
            embeddings: None,
            synthetic_embeddings: false,
            lm_states: None,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Parses an override value: JSON when it parses (numbers, booleans,
/// lists, null), a plain string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies `key=value` overrides; unknown keys are errors.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, Value)>) -> anyhow::Result<Self> {
        let mut map = match serde_json::to_value(self)? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        for (key, value) in overrides {
            let key = key.replace('-', "_");
            if !map.contains_key(&key) {
                bail!("unknown configuration key `{key}`");
            }
            map.insert(key, value);
        }
        serde_json::from_value(Value::Object(map)).context("invalid configuration value")
    }

    /// `key=value` strings as given to `--set`.
    pub fn with_assignments(&self, assignments: &[String]) -> anyhow::Result<Self> {
        let mut pairs = Vec::new();
        for a in assignments {
            let (k, v) = a.split_once('=').with_context(|| format!("expected key=value, got `{a}`"))?;
            pairs.push((k.trim(), parse_value(v.trim())));
        }
        self.with_overrides(pairs)
    }

    /// Overrides from `CTXQA_<FIELD>` variables in `vars`.
    pub fn with_env(&self, vars: impl IntoIterator<Item = (String, String)>) -> anyhow::Result<Self> {
        let known = field_names(self);
        let mut pairs = Vec::new();
        for (k, v) in vars {
            if let Some(field) = k.strip_prefix(ENV_PREFIX) {
                let field = field.to_ascii_lowercase();
                if known.contains(&field) {
                    pairs.push((field, parse_value(&v)));
                }
            }
        }
        self.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }

    pub fn variant(&self) -> anyhow::Result<Option<Variant>> {
        if self.variant.eq_ignore_ascii_case("base") {
            return Ok(None);
        }
        self.variant
            .parse::<Variant>()
            .map(Some)
            .map_err(|e| anyhow::anyhow!("configuration error: {e}"))
    }

    pub fn model_config(&self, lm_dim: usize) -> anyhow::Result<ModelConfig> {
        Ok(ModelConfig {
            variant: self.variant()?,
            word_dim: self.word_dim,
            char_cnn: CharCnnConfig {
                char_dim: self.char_dim,
                widths: self.char_widths.clone(),
                filters_per_width: self.char_filters,
            },
            bilstm: BiLstmConfig {
                layers: self.layers,
                hidden: self.hidden,
                input_dropout: self.input_dropout,
                hidden_dropout: self.hidden_dropout,
                variational: self.variational_dropout,
            },
            mlp: MlpConfig {
                hidden: self.mlp_dims.clone(),
                dropout: self.mlp_dropout,
            },
            reembed_bias: self.reembed_bias,
            d_f: self.d_f,
            ff_dropout: self.ff_dropout,
            max_span: self.max_span,
            word_dropout: self.word_dropout,
            align_on_raw_embeddings: self.align_on_raw_embeddings,
            lm_dim,
        })
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            eval_every: self.eval_every,
            patience: self.patience,
            target_em: self.target_em,
            adam: AdamConfig {
                lr: self.lr,
                round_to_f32: true,
                ..AdamConfig::default()
            },
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn field_names(cfg: &RunConfig) -> Vec<String> {
    match serde_json::to_value(cfg) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

/// Layers `file`, the process environment and `assignments` over defaults.
pub fn resolve(file: Option<&Path>, assignments: &[String]) -> anyhow::Result<RunConfig> {
    let base = match file {
        Some(p) => RunConfig::from_toml_file(p)?,
        None => RunConfig::default(),
    };
    base.with_env(std::env::vars())?.with_assignments(assignments)
}

/// Serialized config with a few extra fields, for artifact headers.
pub fn echo(cfg: &RunConfig, extra: &[(&str, Value)]) -> Value {
    let mut m: Map<String, Value> = match cfg.to_json() {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    for (k, v) in extra {
        m.insert((*k).to_string(), v.clone());
    }
    Value::Object(m)
}
