//! Run configuration: one JSON document, `--set` overrides, defaults that
//! depend on the chosen architecture, and a resolved echo written next to
//! every command's outputs.

use anyhow::{Context, Result};
use greenseg::dataset::DatasetConfig;
use greenseg::infer::InferConfig;
use greenseg::networks::{Arch, NetworkSpec};
use greenseg::raster::SceneConfig;
use greenseg::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::Path;

pub const SEED_ENV: &str = "GREENSEG_SEED";
pub const RESOLVED_NAME: &str = "resolved_config.json";

/// Raised for anything wrong with the configuration itself; maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("configuration error: {0}")]
pub struct ConfigError(pub String);

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    /// Scene `i` uses seed `run seed + i`; the seed field here is ignored.
    pub scene: SceneConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 8,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub arch: Arch,
    /// `None` takes the architecture default.
    pub width: Option<usize>,
    pub depth: Option<usize>,
    pub dropout: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            arch: Arch::ModelB,
            width: None,
            depth: None,
            dropout: 0.1,
        }
    }
}

impl NetworkConfig {
    pub fn build(&self, in_channels: usize) -> greenseg::Result<NetworkSpec> {
        NetworkSpec::build(
            self.arch,
            in_channels,
            self.width.unwrap_or(self.arch.default_width()),
            self.depth.unwrap_or(self.arch.default_depth()),
            self.dropout,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Recorded for provenance. Every stage derives its randomness from the
    /// seed alone, so results never depend on the worker count.
    pub deterministic: bool,
    pub synth: SynthConfig,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

impl RunConfig {
    pub fn defaults_for(arch: Arch) -> Self {
        RunConfig {
            seed: 0,
            deterministic: true,
            synth: SynthConfig::default(),
            dataset: DatasetConfig::default(),
            network: NetworkConfig {
                arch,
                ..NetworkConfig::default()
            },
            train: TrainConfig::for_arch(arch),
            infer: InferConfig::default(),
        }
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_NAME);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

/// Parses `a.b.c=value`. The value is read as JSON, falling back to a plain
/// string so `--set network.arch=model_a` works without quoting.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{s}` is not of the form key=value")))?;
    let path: Vec<String> = key.split('.').map(str::to_owned).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("override key `{key}` has an empty segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    Ok((path, value))
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut cur = root;
    for (i, key) in path.iter().enumerate() {
        if !cur.is_object() {
            return Err(config_err(format!("`{}` is not an object", path[..i].join("."))));
        }
        let obj = cur.as_object_mut().expect("checked");
        if i + 1 == path.len() {
            obj.insert(key.clone(), value);
            return Ok(());
        }
        cur = obj.entry(key.clone()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("override paths are never empty")
}

/// Overlays `patch` on `base`; objects merge key by key, anything else replaces.
pub fn deep_merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Seed precedence: command line, then the config document, then the
/// environment, then 0.
pub fn resolve_seed(cli: Option<u64>, doc: Option<&Value>, env: Option<&str>) -> Result<u64> {
    if let Some(s) = cli {
        return Ok(s);
    }
    if let Some(v) = doc {
        return v
            .as_u64()
            .ok_or_else(|| config_err(format!("seed must be a non-negative integer, got {v}")));
    }
    match env {
        Some(s) => s
            .trim()
            .parse()
            .map_err(|_| config_err(format!("{SEED_ENV}=`{s}` is not a non-negative integer"))),
        None => Ok(0),
    }
}

/// Builds the effective configuration from an optional JSON file, overrides
/// and a seed.
pub fn load(file: Option<&Path>, overrides: &[String], cli_seed: Option<u64>) -> Result<RunConfig> {
    let mut doc = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !doc.is_object() {
        return Err(config_err("the configuration document must be a JSON object"));
    }
    for o in overrides {
        let (path, value) = parse_override(o)?;
        set_path(&mut doc, &path, value)?;
    }
    let env = std::env::var(SEED_ENV).ok();
    let seed = resolve_seed(cli_seed, doc.get("seed"), env.as_deref())?;
    let arch: Arch = match doc.pointer("/network/arch") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| config_err(format!("network.arch: {e}")))?,
        None => Arch::ModelB,
    };
    let mut merged = serde_json::to_value(RunConfig::defaults_for(arch))?;
    deep_merge(&mut merged, doc);
    let mut cfg: RunConfig = serde_json::from_value(merged).map_err(|e| config_err(e.to_string()))?;
    cfg.seed = seed;
    cfg.train.seed = seed;
    cfg.synth.scene.seed = seed;
    cfg.train.validate().map_err(|e| config_err(e.to_string()))?;
    cfg.synth.scene.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_or_text() {
        let (p, v) = parse_override("train.epochs=3").unwrap();
        assert_eq!(p, ["train", "epochs"]);
        assert_eq!(v, Value::from(3));
        let (_, v) = parse_override("network.arch=model_a").unwrap();
        assert_eq!(v, Value::from("model_a"));
        assert!(parse_override("novalue").is_err());
        assert!(parse_override("a..b=1").is_err());
    }

    #[test]
    fn seed_precedence() {
        let doc = Value::from(5);
        assert_eq!(resolve_seed(Some(1), Some(&doc), Some("9")).unwrap(), 1);
        assert_eq!(resolve_seed(None, Some(&doc), Some("9")).unwrap(), 5);
        assert_eq!(resolve_seed(None, None, Some("9")).unwrap(), 9);
        assert_eq!(resolve_seed(None, None, None).unwrap(), 0);
        assert!(resolve_seed(None, None, Some("x")).is_err());
    }

    #[test]
    fn arch_selects_training_defaults() {
        let cfg = load(None, &["network.arch=model_a".into()], Some(3)).unwrap();
        assert_eq!(cfg.train, TrainConfig { seed: 3, ..TrainConfig::for_arch(Arch::ModelA) });
        let cfg = load(None, &["network.arch=baseline".into(), "train.epochs=4".into()], Some(0)).unwrap();
        assert!(cfg.train.constant_lr);
        assert_eq!(cfg.train.epochs, 4);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let e = load(None, &["train.epochz=3".into()], Some(0)).unwrap_err();
        assert!(e.downcast_ref::<ConfigError>().is_some(), "{e:#}");
        let e = load(None, &["bogus=1".into()], Some(0)).unwrap_err();
        assert!(e.downcast_ref::<ConfigError>().is_some());
    }

    #[test]
    fn file_values_merge_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        std::fs::write(&p, r#"{"seed": 11, "train": {"batch_size": 8}, "infer": {"tta": false}}"#).unwrap();
        let cfg = load(Some(&p), &[], None).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.base_lr, 1e-3);
        assert!(!cfg.infer.tta);
        assert_eq!(cfg.infer.stride, 32);
        let echo = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&echo).unwrap();
        assert_eq!(back, cfg);
    }
}
