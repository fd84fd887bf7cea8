//! Run configuration: one strict JSON document with per-topic sections,
//! merged with repeatable dotted-key `--set` overrides.
//!
//! Parsing is three passes: read the file into a JSON tree (empty or
//! missing file means an empty object), splice overrides into the tree,
//! then check every key against the schema before the typed decode. The
//! key check exists so a typo fails with a suggestion instead of a bare
//! serde message.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::losses::Distance;
use crate::models::encoder::VisualEncoderConfig;
use crate::models::lm::CausalLmConfig;
use crate::synthdata::dataset::DataConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: VisualEncoderConfig,
    pub lm: CausalLmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: VisualEncoderConfig::default(),
            lm: CausalLmConfig::default(),
        }
    }
}

/// Retrieval scoring knobs. `rank_top_k` = 0 suppresses the plain-text
/// rank list artifact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub metric: Distance,
    pub rank_top_k: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            metric: Distance::Euclidean,
            rank_top_k: 10,
        }
    }
}

/// Input locations. Everything here is optional; commands that need an
/// input fall back to the conventional location under the output
/// directory, so a default pipeline chains without any of these set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Dataset directory (written by gen-data, read by everything else).
    pub dataset: Option<PathBuf>,
    /// Shifted-domain dataset for cross-eval. Generated on the fly from
    /// the data section with the style flipped when absent.
    pub target_dataset: Option<PathBuf>,
    /// Checkpoint to evaluate or to initialize fine-tuning from.
    pub checkpoint: Option<PathBuf>,
    /// JSON map of caption -> replacement continuation for gen-data.
    pub continuations: Option<PathBuf>,
}

/// Training profile for the recipe-matrix command. The matrix runs
/// 4 recipes x seeds full pipelines on one core, so it gets its own
/// schedule instead of the single-run defaults: a longer pretraining
/// stage, where the recipes actually differ, a wide batch that flattens
/// seed-to-seed variance, and a short fine-tune that converges the
/// retrieval head without retraining the encoder past the point where
/// the pretraining differences remain measurable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub seeds: usize,
    pub p: usize,
    pub k: usize,
    pub epochs: usize,
    pub reid_epochs: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            seeds: 3,
            p: 8,
            k: 4,
            epochs: 5,
            reid_epochs: 2,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed. When set it overrides both `data.seed` and
    /// `train.seed` during resolution.
    pub seed: Option<u64>,
    /// Output directory; every artifact lands under it.
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub paths: PathsConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    /// Parse a config file plus `key=value` overrides. A missing path or
    /// an empty file yields the defaults.
    pub fn parse(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        let mut tree: Value = if text.trim().is_empty() {
            Value::Object(Map::new())
        } else {
            serde_json::from_str(text.trim()).map_err(|e| {
                let at = path.map(|p| format!("{}: ", p.display())).unwrap_or_default();
                Error::Config(format!("{at}{e}"))
            })?
        };
        if !tree.is_object() {
            return Err(Error::Config("config root must be a JSON object".into()));
        }
        for spec in sets {
            apply_set(&mut tree, spec)?;
        }
        check_keys(&tree, &schema(), "")?;
        serde_json::from_value(tree).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    /// Fold in the dedicated command-line flags, propagate the master
    /// seed, and make every path absolute. Commands only see resolved
    /// configs; the manifest echoes the resolved form.
    pub fn resolve(&mut self, cli_out: Option<&Path>, cli_seed: Option<u64>) -> Result<()> {
        if let Some(o) = cli_out {
            self.out = Some(o.to_path_buf());
        }
        if let Some(s) = cli_seed {
            self.seed = Some(s);
        }
        if let Some(s) = self.seed {
            self.data.seed = s;
            self.train.seed = s;
        }
        let out = self.out.take().unwrap_or_else(|| PathBuf::from("runs"));
        self.out = Some(absolutize(&out)?);
        for slot in [
            &mut self.paths.dataset,
            &mut self.paths.target_dataset,
            &mut self.paths.checkpoint,
            &mut self.paths.continuations,
        ] {
            if let Some(p) = slot.take() {
                *slot = Some(absolutize(&p)?);
            }
        }
        Ok(())
    }

    /// Output directory. Only valid after [`RunConfig::resolve`].
    pub fn out_dir(&self) -> &Path {
        self.out.as_deref().expect("config resolved before use")
    }

    /// Where the dataset lives: explicit path or `<out>/dataset`.
    pub fn dataset_dir(&self) -> PathBuf {
        self.paths
            .dataset
            .clone()
            .unwrap_or_else(|| self.out_dir().join("dataset"))
    }
}

fn absolutize(p: &Path) -> Result<PathBuf> {
    if p.is_absolute() {
        return Ok(p.to_path_buf());
    }
    let cwd = std::env::current_dir()
        .map_err(|e| Error::Config(format!("cannot resolve working directory: {e}")))?;
    Ok(cwd.join(p))
}

/// Splice one `key=value` override into the JSON tree. The value is taken
/// as JSON when it parses as JSON, otherwise as a bare string, so
/// `train.lambda=0.5` is a number and `data.style=b` is a string.
fn apply_set(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set wants key=value, got `{spec}`")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(|part| part.is_empty()) {
        return Err(Error::Config(format!("--set key `{key}` is malformed")));
    }
    let leaf: Value = serde_json::from_str(raw.trim())
        .unwrap_or_else(|_| Value::String(raw.trim().to_string()));

    let parts: Vec<&str> = key.split('.').collect();
    let mut cursor = root;
    for part in &parts[..parts.len() - 1] {
        let obj = cursor
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{part}` is not a section")))?;
        cursor = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
        if !cursor.is_object() {
            return Err(Error::Config(format!("`{key}`: `{part}` is not a section")));
        }
    }
    cursor
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("`{key}` does not name a settable field")))?
        .insert(parts[parts.len() - 1].to_string(), leaf);
    Ok(())
}

/// The schema is the serialized default config: exactly the keys serde
/// will accept, section by section.
fn schema() -> Value {
    serde_json::to_value(RunConfig::default()).expect("default config serializes")
}

fn check_keys(input: &Value, schema: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(inp), Value::Object(sch)) = (input, schema) else {
        return Ok(());
    };
    for (k, v) in inp {
        let full = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match sch.get(k) {
            Some(sub) => check_keys(v, sub, &full)?,
            None => {
                let suggestion = nearest_key(k, sch.keys()).map(|best| {
                    if prefix.is_empty() {
                        best
                    } else {
                        format!("{prefix}.{best}")
                    }
                });
                return Err(Error::UnknownConfigKey {
                    key: full,
                    suggestion,
                });
            }
        }
    }
    Ok(())
}

fn nearest_key<'a>(key: &str, candidates: impl Iterator<Item = &'a String>) -> Option<String> {
    candidates
        .map(|c| (levenshtein(key, c), c))
        .min_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(b.1)))
        .filter(|(d, _)| *d <= 3)
        .map(|(_, c)| c.clone())
}

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tmp_config(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn empty_and_missing_files_give_defaults() {
        let f = tmp_config("  \n");
        let from_empty = RunConfig::parse(Some(f.path()), &[]).unwrap();
        let from_none = RunConfig::parse(None, &[]).unwrap();
        assert_eq!(from_empty.train.lambda, TrainConfig::default().lambda);
        assert_eq!(from_none.data.train_ids, DataConfig::default().train_ids);
        assert_eq!(from_none.ablate.seeds, 3);
        assert!(from_none.out.is_none());
    }

    #[test]
    fn file_values_and_overrides_compose() {
        let f = tmp_config(r#"{"train": {"lambda": 0.7, "p": 6}, "data": {"style": "b"}}"#);
        let cfg = RunConfig::parse(
            Some(f.path()),
            &["train.lambda=0.5".into(), "eval.rank_top_k=3".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.lambda, 0.5, "override supersedes file value");
        assert_eq!(cfg.train.p, 6, "untouched file value survives");
        assert_eq!(cfg.eval.rank_top_k, 3);
        assert_eq!(cfg.data.style.tag(), "b");
    }

    #[test]
    fn set_values_keep_their_types() {
        let cfg = RunConfig::parse(
            None,
            &[
                "paths.dataset=relative/dir".into(),
                "train.clip_grad=2.5".into(),
                "seed=42".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.paths.dataset.as_deref(), Some(Path::new("relative/dir")));
        assert_eq!(cfg.train.clip_grad, Some(2.5));
        assert_eq!(cfg.seed, Some(42));
    }

    #[test]
    fn unknown_key_suggests_the_nearest_field() {
        let f = tmp_config(r#"{"train": {"lamda": 0.5}}"#);
        let err = RunConfig::parse(Some(f.path()), &[]).unwrap_err();
        match err {
            Error::UnknownConfigKey { key, suggestion } => {
                assert_eq!(key, "train.lamda");
                assert_eq!(suggestion.as_deref(), Some("train.lambda"));
            }
            other => panic!("wrong error: {other}"),
        }
        assert_eq!(
            RunConfig::parse(Some(f.path()), &[]).unwrap_err().exit_code(),
            1
        );
    }

    #[test]
    fn unknown_set_key_is_rejected_too() {
        let err = RunConfig::parse(None, &["data.stile=b".into()]).unwrap_err();
        match err {
            Error::UnknownConfigKey { key, suggestion } => {
                assert_eq!(key, "data.stile");
                assert_eq!(suggestion.as_deref(), Some("data.style"));
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn unknown_top_level_section_suggests() {
        let err = RunConfig::parse(None, &["trian.lambda=0.5".into()]).unwrap_err();
        match err {
            Error::UnknownConfigKey { key, suggestion } => {
                assert_eq!(key, "trian");
                assert_eq!(suggestion.as_deref(), Some("train"));
            }
            other => panic!("wrong error: {other}"),
        }
    }

    #[test]
    fn syntax_error_reports_position() {
        let f = tmp_config("{\n  \"train\": {,}\n}");
        let msg = RunConfig::parse(Some(f.path()), &[]).unwrap_err().to_string();
        assert!(msg.contains("line 2"), "got: {msg}");
    }

    #[test]
    fn malformed_set_specs_fail() {
        assert!(RunConfig::parse(None, &["train.lambda".into()]).is_err());
        assert!(RunConfig::parse(None, &["=0.5".into()]).is_err());
        assert!(RunConfig::parse(None, &["train..lambda=0.5".into()]).is_err());
        assert!(RunConfig::parse(None, &["seed.x=1".into()]).is_err());
    }

    #[test]
    fn wrong_value_type_is_a_config_error() {
        let err = RunConfig::parse(None, &["train.p=not-a-number".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn non_object_root_is_rejected() {
        let f = tmp_config("[1, 2]");
        assert!(RunConfig::parse(Some(f.path()), &[]).is_err());
    }

    #[test]
    fn resolve_applies_seed_and_absolutizes() {
        let mut cfg = RunConfig::parse(None, &["paths.dataset=some/dir".into()]).unwrap();
        cfg.resolve(Some(Path::new("exp/run1")), Some(99)).unwrap();
        assert_eq!(cfg.seed, Some(99));
        assert_eq!(cfg.data.seed, 99);
        assert_eq!(cfg.train.seed, 99);
        assert!(cfg.out_dir().is_absolute());
        assert!(cfg.out_dir().ends_with("exp/run1"));
        let ds = cfg.paths.dataset.as_deref().unwrap();
        assert!(ds.is_absolute() && ds.ends_with("some/dir"));
        assert_eq!(cfg.dataset_dir(), ds);
    }

    #[test]
    fn resolve_defaults_out_and_dataset_dir() {
        let mut cfg = RunConfig::parse(None, &[]).unwrap();
        cfg.resolve(None, None).unwrap();
        assert!(cfg.out_dir().ends_with("runs"));
        assert_eq!(cfg.dataset_dir(), cfg.out_dir().join("dataset"));
        // no master seed: section seeds keep their own defaults
        assert_eq!(cfg.data.seed, DataConfig::default().seed);
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein("lamda", "lambda"), 1);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("abc", "abc"), 0);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
    }

    #[test]
    fn far_off_keys_get_no_suggestion() {
        let err = RunConfig::parse(None, &["zzzzzzzz=1".into()]).unwrap_err();
        match err {
            Error::UnknownConfigKey { suggestion, .. } => assert!(suggestion.is_none()),
            other => panic!("wrong error: {other}"),
        }
    }
}
