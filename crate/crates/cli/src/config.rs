//! Run configuration: preset defaults, then a JSON file, then `--set`
//! overrides, in that order. Unknown keys are rejected when the merged
//! tree is deserialised.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use aec_core::nn::WeightManifest;
use aec_core::postfilter::{PostFilter, Preset, TbnnConfig};
use aec_core::{Error, PipelineConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub preset: Preset,
    /// Weight manifest for the post-filter.
    pub weights: Option<PathBuf>,
    /// Seeded random weights, used when no manifest is given.
    pub seed_weights: Option<u64>,
    /// Worker threads for batch jobs; each file is processed sequentially.
    pub threads: usize,
    pub pipeline: PipelineConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self::for_preset(Preset::Small)
    }
}

impl CliConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            preset,
            weights: None,
            seed_weights: None,
            threads: 1,
            pipeline: PipelineConfig {
                postfilter: TbnnConfig::preset(preset),
                ..PipelineConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.pipeline.validate()?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.weights.is_some() && self.seed_weights.is_some() {
            return Err(Error::Config("give either weights or seed_weights, not both".into()));
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex(&Sha256::digest(json))
    }

    /// The post-filter this configuration asks for; `None` in linear-only mode.
    pub fn postfilter(&self) -> Result<Option<Arc<PostFilter>>, Error> {
        if self.pipeline.linear_only {
            return Ok(None);
        }
        let cfg = self.pipeline.postfilter.clone();
        let pf = match (&self.weights, self.seed_weights) {
            (Some(path), _) => PostFilter::from_manifest(cfg, &WeightManifest::load(path)?, false)?,
            (None, Some(seed)) => PostFilter::seeded(cfg, seed)?,
            (None, None) => {
                return Err(Error::Config(
                    "the post-filter needs weights: pass --weights FILE or --seed-weights N, or use --linear-only"
                        .into(),
                ))
            }
        };
        Ok(Some(Arc::new(pf)))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of a file's contents.
pub fn file_hash(path: &Path) -> Result<String, Error> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

/// One user-supplied value, as echoed in run reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Override {
    pub key: String,
    pub value: Value,
    pub source: &'static str,
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: CliConfig,
    pub overrides: Vec<Override>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses `a.b.c=VALUE`. The value is read as JSON when it parses, and as
/// a plain string otherwise.
pub fn parse_set(s: &str) -> Result<(Vec<String>, Value), Error> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {s:?} is not KEY=VALUE")))?;
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(config_err(format!("override key {key:?} has an empty segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

fn insert(tree: &mut Map<String, Value>, path: &[String], value: Value) -> Result<(), Error> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = tree;
    for p in parents {
        let slot = node.entry(p.clone()).or_insert_with(|| Value::Object(Map::new()));
        node = slot
            .as_object_mut()
            .ok_or_else(|| config_err(format!("override key {} crosses a non-object value", path.join("."))))?;
    }
    node.insert(last.clone(), value);
    Ok(())
}

fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, t) => *b = t.clone(),
    }
}

fn leaves(prefix: &str, v: &Value, source: &'static str, out: &mut Vec<Override>) {
    match v {
        Value::Object(m) if prefix.is_empty() || !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                leaves(&key, child, source, out);
            }
        }
        _ => out.push(Override {
            key: prefix.to_string(),
            value: v.clone(),
            source,
        }),
    }
}

/// Resolves the configuration from an optional JSON file and `--set`
/// overrides (already parsed).
pub fn load(file: Option<&Path>, sets: &[(Vec<String>, Value)]) -> Result<Loaded, Error> {
    let mut user = Value::Object(Map::new());
    let mut overrides = Vec::new();
    if let Some(path) = file {
        let bytes = std::fs::read(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        let v: Value = serde_json::from_slice(&bytes)
            .map_err(|e| config_err(format!("{} is not valid JSON: {e}", path.display())))?;
        if !v.is_object() {
            return Err(config_err(format!("{} must hold a JSON object", path.display())));
        }
        leaves("", &v, "file", &mut overrides);
        merge(&mut user, &v);
    }
    let mut flags = Map::new();
    for (path, value) in sets {
        insert(&mut flags, path, value.clone())?;
    }
    let flags = Value::Object(flags);
    leaves("", &flags, "flag", &mut overrides);
    merge(&mut user, &flags);

    let preset = match user.get("preset") {
        None => Preset::Small,
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| config_err(format!("preset: {e}")))?,
    };
    let mut tree = serde_json::to_value(CliConfig::for_preset(preset)).expect("config serialises");
    merge(&mut tree, &user);
    let config: CliConfig = serde_json::from_value(tree).map_err(|e| config_err(e.to_string()))?;
    config.validate()?;
    Ok(Loaded { config, overrides })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sets(items: &[&str]) -> Vec<(Vec<String>, Value)> {
        items.iter().map(|s| parse_set(s).unwrap()).collect()
    }

    #[test]
    fn defaults_without_input() {
        let l = load(None, &[]).unwrap();
        assert_eq!(l.config, CliConfig::default());
        assert!(l.overrides.is_empty());
    }

    #[test]
    fn flags_override_nested_fields_and_are_echoed() {
        let l = load(None, &sets(&["pipeline.nlms.mu=0.25", "pipeline.linear_only=true"])).unwrap();
        assert_eq!(l.config.pipeline.nlms.mu, 0.25);
        assert!(l.config.pipeline.linear_only);
        let keys: Vec<_> = l.overrides.iter().map(|o| o.key.as_str()).collect();
        assert_eq!(keys, ["pipeline.linear_only", "pipeline.nlms.mu"]);
    }

    #[test]
    fn preset_sets_postfilter_defaults_before_overrides() {
        let l = load(None, &sets(&["preset=large", "pipeline.postfilter.dropout=0.1"])).unwrap();
        assert_eq!(l.config.pipeline.postfilter.channels, 128);
        assert_eq!(l.config.pipeline.postfilter.dropout, 0.1);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for bad in [
            "pipeline.nlms.step=1",
            "bogus=1",
            "pipeline.nlms.mu=3",
            "preset=huge",
            "threads=0",
        ] {
            assert!(matches!(load(None, &sets(&[bad])), Err(Error::Config(_))), "{bad}");
        }
        assert!(parse_set("novalue").is_err());
        assert!(parse_set("a..b=1").is_err());
    }

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"pipeline": {"nlms": {"taps": 4, "mu": 0.3}}}"#).unwrap();
        let l = load(Some(&p), &sets(&["pipeline.nlms.taps=2"])).unwrap();
        assert_eq!((l.config.pipeline.nlms.taps, l.config.pipeline.nlms.mu), (2, 0.3));
        assert_eq!(l.overrides.len(), 3);
        std::fs::write(&p, r#"{"pipeline": {"nlms": {"tapz": 4}}}"#).unwrap();
        assert!(matches!(load(Some(&p), &[]), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = CliConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.pipeline.nlms.mu = 0.4;
        assert_ne!(a.hash(), b.hash());
    }
}
