//! Run configuration: one TOML (or JSON) file covering every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::{default_markers, BaselineConfig};
use crate::embed::SkipGramConfig;
use crate::error::{Error, Result};
use crate::textprep::DEFAULT_SPELL_THRESHOLD;
use crate::xformer::TransformerConfig;

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMethod {
    None,
    #[default]
    Discourse,
    Smote,
}

impl std::str::FromStr for AugmentMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AugmentMethod::None),
            "discourse" => Ok(AugmentMethod::Discourse),
            "smote" => Ok(AugmentMethod::Smote),
            other => Err(Error::Config(format!("unknown augmentation method `{other}`"))),
        }
    }
}

impl AugmentMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            AugmentMethod::None => "none",
            AugmentMethod::Discourse => "discourse",
            AugmentMethod::Smote => "smote",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub wordlist: Option<PathBuf>,
    /// Vectors to initialize the embedding table from.
    pub embeddings_init: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub spell_correct: bool,
    pub spell_threshold: f64,
    /// Minimum train-split count for a word to enter the spelling lexicon.
    pub lexicon_min_count: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            spell_correct: true,
            spell_threshold: DEFAULT_SPELL_THRESHOLD,
            lexicon_min_count: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub method: AugmentMethod,
    pub markers: Vec<String>,
    pub smote_k: usize,
    /// Synthetic points per domain as a multiple of that domain's
    /// suggestion count.
    pub smote_ratio: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            method: AugmentMethod::Discourse,
            markers: default_markers(),
            smote_k: 5,
            smote_ratio: 1.0,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub sage_alpha: f64,
    pub sage_lambda: f64,
    pub sage_step: f64,
    pub sage_tol: f64,
    pub sage_max_iters: usize,
    /// Rank SAGE tokens by |η| instead of η.
    pub rank_by_magnitude: bool,
    pub top_k: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            sage_alpha: 0.5,
            sage_lambda: 5.0,
            sage_step: 0.1,
            sage_tol: 1e-6,
            sage_max_iters: 20_000,
            rank_by_magnitude: false,
            top_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: String,
    pub paths: PathsConfig,
    pub preprocess: PreprocessConfig,
    pub embed: SkipGramConfig,
    pub baseline: BaselineConfig,
    pub augment: AugmentConfig,
    pub transformer: TransformerConfig,
    pub explain: ExplainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION.to_string(),
            paths: PathsConfig::default(),
            preprocess: PreprocessConfig::default(),
            embed: SkipGramConfig::default(),
            baseline: BaselineConfig::default(),
            augment: AugmentConfig::default(),
            transformer: TransformerConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Sets every stage seed to `seed`.
    pub fn apply_seed(&mut self, seed: u64) {
        self.embed.seed = seed;
        self.baseline.seed = seed;
        self.augment.seed = seed;
        self.transformer.seed = seed;
    }

    pub fn seeds(&self) -> std::collections::BTreeMap<String, u64> {
        [
            ("embed", self.embed.seed),
            ("baseline", self.baseline.seed),
            ("augment", self.augment.seed),
            ("transformer", self.transformer.seed),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version `{}` is not supported (expected `{SCHEMA_VERSION}`)",
                self.schema_version
            )));
        }
        let t = self.preprocess.spell_threshold;
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Config(format!("preprocess.spell_threshold must lie in (0, 1], got {t}")));
        }
        if self.augment.markers.is_empty() && self.augment.method == AugmentMethod::Discourse {
            return Err(Error::Config("augment.markers is empty".into()));
        }
        if self.augment.smote_ratio.is_nan() || self.augment.smote_ratio < 0.0 {
            return Err(Error::Config("augment.smote_ratio must be non-negative".into()));
        }
        self.transformer.validate()
    }

    /// Paths a full run cannot do without.
    pub fn require_paths(&self) -> Result<(&Path, &Path, &Path)> {
        fn need<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
            p.as_deref()
                .ok_or_else(|| Error::Config(format!("missing required path `paths.{key}`")))
        }
        Ok((
            need(&self.paths.train, "train")?,
            need(&self.paths.test, "test")?,
            need(&self.paths.out_dir, "out_dir")?,
        ))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Resolves relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [&mut p.train, &mut p.test, &mut p.out_dir, &mut p.wordlist, &mut p.embeddings_init] {
            if let Some(path) = slot.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }
}

/// Parses configuration text. JSON is detected by a leading `{`; anything
/// else is read as TOML. Keys absent from the schema are rejected with the
/// closest known key as a hint.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let value: Value = if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?
    } else {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?
    };
    let schema = serde_json::to_value(RunConfig::default()).expect("default config serializes");
    check_keys(&value, &schema, "")?;
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("type mismatch: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and parses a config file; relative paths inside it are resolved
/// against the file's directory.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config_str(&text)?;
    if let Some(dir) = path.parent() {
        cfg.resolve_paths(dir);
    }
    Ok(cfg)
}

fn check_keys(value: &Value, schema: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(map), Value::Object(known)) = (value, schema) else {
        return Ok(());
    };
    for (key, v) in map {
        let full = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match known.get(key) {
            Some(s) => check_keys(v, s, &full)?,
            None => {
                let hint = known
                    .keys()
                    .map(|k| (strsim::levenshtein(k, key), k))
                    .filter(|(d, _)| *d <= 3)
                    .min()
                    .map(|(_, k)| format!("; did you mean `{k}`?"))
                    .unwrap_or_default();
                return Err(Error::Config(format!("unknown key `{full}`{hint}")));
            }
        }
    }
    Ok(())
}
