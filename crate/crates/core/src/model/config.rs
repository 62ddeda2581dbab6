use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ModelError;

pub const DEFAULT_VOCAB: usize = 21128;
pub const DEFAULT_MAX_POSITIONS: usize = 512;
pub const DEFAULT_TYPE_VOCAB: usize = 2;

/// Vocabulary size used by the small presets.
pub const DESK_VOCAB: usize = 512;
pub const DESK_MAX_POSITIONS: usize = 64;

/// Shape of one encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab: usize,
}

fn default_vocab() -> usize {
    DEFAULT_VOCAB
}
fn default_max_positions() -> usize {
    DEFAULT_MAX_POSITIONS
}
fn default_type_vocab() -> usize {
    DEFAULT_TYPE_VOCAB
}

impl ModelConfig {
    pub const fn new(layers: usize, hidden: usize, ffn: usize, heads: usize) -> Self {
        Self {
            layers,
            hidden,
            ffn,
            heads,
            vocab_size: DEFAULT_VOCAB,
            max_positions: DEFAULT_MAX_POSITIONS,
            type_vocab: DEFAULT_TYPE_VOCAB,
        }
    }

    pub const fn with_vocab(mut self, vocab_size: usize, max_positions: usize) -> Self {
        self.vocab_size = vocab_size;
        self.max_positions = max_positions;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("ffn", self.ffn),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("type_vocab", self.type_vocab),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// `key = value` lines, the same format [`ModelConfig::parse`] reads.
    pub fn to_kv(&self) -> String {
        format!(
            "layers = {}\nhidden = {}\nffn = {}\nheads = {}\nvocab_size = {}\nmax_positions = {}\ntype_vocab = {}\n",
            self.layers, self.hidden, self.ffn, self.heads, self.vocab_size, self.max_positions, self.type_vocab
        )
    }

    /// Parses a config file. A `preset = "<name>"` line supplies defaults that
    /// the remaining keys override.
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        let base = match &file.preset {
            Some(name) => preset(name)?,
            None => {
                let missing: Vec<&str> = [
                    ("layers", file.layers),
                    ("hidden", file.hidden),
                    ("ffn", file.ffn),
                    ("heads", file.heads),
                ]
                .iter()
                .filter(|(_, v)| v.is_none())
                .map(|(k, _)| *k)
                .collect();
                if !missing.is_empty() {
                    return Err(ModelError::Config(format!("missing keys: {}", missing.join(", "))));
                }
                ModelConfig::new(0, 0, 0, 0)
            }
        };
        let cfg = ModelConfig {
            layers: file.layers.unwrap_or(base.layers),
            hidden: file.hidden.unwrap_or(base.hidden),
            ffn: file.ffn.unwrap_or(base.ffn),
            heads: file.heads.unwrap_or(base.heads),
            vocab_size: file.vocab_size.unwrap_or(base.vocab_size),
            max_positions: file.max_positions.unwrap_or(base.max_positions),
            type_vocab: file.type_vocab.unwrap_or(base.type_vocab),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// A preset name, or else a path to a config file.
    pub fn resolve(spec: &str) -> Result<Self, ModelError> {
        match preset(spec) {
            Ok(c) => Ok(c),
            Err(_) if Path::new(spec).exists() => Self::load(Path::new(spec)),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    preset: Option<String>,
    layers: Option<usize>,
    hidden: Option<usize>,
    ffn: Option<usize>,
    heads: Option<usize>,
    vocab_size: Option<usize>,
    max_positions: Option<usize>,
    type_vocab: Option<usize>,
}

/// One row of the published model-size comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedRow {
    pub preset: &'static str,
    pub display: &'static str,
    pub config: ModelConfig,
    /// Total parameters, millions.
    pub total_m: f64,
    /// Parameters without embeddings, millions.
    pub non_embedding_m: f64,
    /// Reported inference speedup relative to the 12-layer teacher.
    pub speedup: f64,
}

pub const PUBLISHED: [PublishedRow; 6] = [
    PublishedRow { preset: "roberta-wwm", display: "RoBERTa-wwm", config: ModelConfig::new(12, 768, 3072, 12), total_m: 102.3, non_embedding_m: 85.7, speedup: 1.0 },
    PublishedRow { preset: "rbt6", display: "RBT6 (KD)", config: ModelConfig::new(6, 768, 3072, 12), total_m: 59.8, non_embedding_m: 43.1, speedup: 1.7 },
    PublishedRow { preset: "rbt3", display: "RBT3", config: ModelConfig::new(3, 768, 3072, 12), total_m: 38.5, non_embedding_m: 21.9, speedup: 2.8 },
    PublishedRow { preset: "rbt4-h312", display: "RBT4-H312", config: ModelConfig::new(4, 312, 1200, 12), total_m: 11.4, non_embedding_m: 4.7, speedup: 6.8 },
    PublishedRow { preset: "minirbt-h256", display: "MiniRBT-H256", config: ModelConfig::new(6, 256, 1024, 8), total_m: 10.4, non_embedding_m: 4.8, speedup: 6.8 },
    PublishedRow { preset: "minirbt-h288", display: "MiniRBT-H288", config: ModelConfig::new(6, 288, 1152, 8), total_m: 12.3, non_embedding_m: 6.1, speedup: 5.7 },
];

/// Small configurations that train in minutes on one core.
pub const DESK_PRESETS: [(&str, ModelConfig); 3] = [
    ("desk-teacher", ModelConfig::new(4, 64, 256, 4).with_vocab(DESK_VOCAB, DESK_MAX_POSITIONS)),
    ("desk-assistant", ModelConfig::new(4, 48, 192, 4).with_vocab(DESK_VOCAB, DESK_MAX_POSITIONS)),
    ("desk-student", ModelConfig::new(2, 32, 128, 4).with_vocab(DESK_VOCAB, DESK_MAX_POSITIONS)),
];

pub fn preset_names() -> Vec<&'static str> {
    PUBLISHED
        .iter()
        .map(|r| r.preset)
        .chain(DESK_PRESETS.iter().map(|(n, _)| *n))
        .collect()
}

/// Looks up a preset by id (`rbt3`) or display name (`RBT3`), case-insensitively.
pub fn preset(name: &str) -> Result<ModelConfig, ModelError> {
    let key = name.trim().to_ascii_lowercase();
    PUBLISHED
        .iter()
        .find(|r| r.preset == key || r.display.to_ascii_lowercase() == key)
        .map(|r| r.config)
        .or_else(|| DESK_PRESETS.iter().find(|(n, _)| *n == key).map(|(_, c)| *c))
        .ok_or_else(|| ModelError::UnknownPreset(name.to_string()))
}
