//! Flat key-value run configuration.
//!
//! One TOML table without sections. Generator keys carry a `data_` prefix
//! (`data_s`, `data_d_x`, `data_seed`, ...), `bundle`, `out_dir` and
//! `parallel` are run-level, and every other key is a training key. Any key
//! can be overridden by an environment variable `TDCSS_<KEY>` (upper case).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tdcss::data::SynthConfig;
use tdcss::par::Exec;
use tdcss::trainer::TrainConfig;
use tdcss::{Error, Result};

pub const ENV_PREFIX: &str = "TDCSS_";
const DATA_PREFIX: &str = "data_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunPaths {
    /// Input bundle; a synthetic one is generated from the `data_` keys when absent.
    pub bundle: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub parallel: bool,
}

impl Default for RunPaths {
    fn default() -> Self {
        Self {
            bundle: None,
            out_dir: PathBuf::from("out"),
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub train: TrainConfig,
    pub run: RunPaths,
}

fn keys_of<T: Serialize>(v: &T) -> BTreeSet<String> {
    match serde_json::to_value(v).expect("config serialises") {
        Value::Object(m) => m.keys().cloned().collect(),
        _ => unreachable!(),
    }
}

fn toml_to_json(v: toml::Value) -> Value {
    serde_json::to_value(v).expect("toml values are json")
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_literal(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn merge<T: Serialize + for<'de> Deserialize<'de>>(base: &T, overrides: serde_json::Map<String, Value>, what: &str) -> Result<T> {
    let mut v = serde_json::to_value(base).expect("config serialises");
    let obj = v.as_object_mut().expect("struct");
    for (k, val) in overrides {
        obj.insert(k, val);
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("{what}: {e}")))
}

impl RunConfig {
    /// Every accepted key, in file spelling.
    pub fn known_keys() -> BTreeSet<String> {
        let d = Self::default();
        let mut keys = keys_of(&d.train);
        keys.extend(keys_of(&d.run));
        keys.extend(keys_of(&d.data).into_iter().map(|k| format!("{DATA_PREFIX}{k}")));
        keys
    }

    /// Applies `table` on top of `base`. Unknown keys are a config error
    /// naming the key.
    pub fn with_table(base: &Self, table: toml::Table) -> Result<Self> {
        let known = Self::known_keys();
        let run_keys = keys_of(&base.run);
        let (mut data, mut train, mut run) = (serde_json::Map::new(), serde_json::Map::new(), serde_json::Map::new());
        for (key, value) in table {
            if !known.contains(&key) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            let value = toml_to_json(value);
            if let Some(k) = key.strip_prefix(DATA_PREFIX).filter(|_| !run_keys.contains(&key)) {
                data.insert(k.to_string(), value);
            } else if run_keys.contains(&key) {
                run.insert(key, value);
            } else {
                train.insert(key, value);
            }
        }
        Ok(Self {
            data: merge(&base.data, data, "data keys")?,
            train: merge(&base.train, train, "training keys")?,
            run: merge(&base.run, run, "run keys")?,
        })
    }

    pub fn parse(base: &Self, text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        Self::with_table(base, table)
    }

    /// Defaults, then the file (if any), then `TDCSS_*` variables from `env`.
    pub fn load<I>(base: Self, path: Option<&Path>, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut cfg = base;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            cfg = Self::parse(&cfg, &text)?;
        }
        let mut table = toml::Table::new();
        for (name, value) in env {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                let key = key.to_ascii_lowercase();
                if !Self::known_keys().contains(&key) {
                    return Err(Error::Config(format!("unknown config key `{key}` (from {name})")));
                }
                table.insert(key, parse_literal(&value));
            }
        }
        cfg = Self::with_table(&cfg, table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()
    }

    pub fn exec(&self) -> Exec {
        if self.run.parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    /// The flat table this config would be written as.
    pub fn to_toml(&self) -> String {
        let mut table = toml::Table::new();
        let mut put = |prefix: &str, v: Value| {
            for (k, val) in v.as_object().expect("struct") {
                if !val.is_null() {
                    let tv: toml::Value = serde_json::from_value(val.clone()).expect("json values are toml");
                    table.insert(format!("{prefix}{k}"), tv);
                }
            }
        };
        put("", serde_json::to_value(&self.train).unwrap());
        put("", serde_json::to_value(&self.run).unwrap());
        put(DATA_PREFIX, serde_json::to_value(&self.data).unwrap());
        toml::to_string(&table).expect("flat table serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn keys_route_to_their_section() {
        let cfg = RunConfig::parse(
            &RunConfig::default(),
            "lr = 0.001\ndata_s = 6\ndata_seed = 4\nseed = 9\nout_dir = \"x\"\nw_hidden = [8, 4]\nparallel = false",
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.w_hidden, (8, 4));
        assert_eq!((cfg.data.s, cfg.data.seed), (6, 4));
        assert_eq!(cfg.run.out_dir, PathBuf::from("x"));
        assert_eq!(cfg.exec(), Exec::Sequential);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse(&RunConfig::default(), "lr = 1e-3\nlearning_rate = 2").unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("learning_rate")));
        let err = RunConfig::load(RunConfig::default(), None, env(&[("TDCSS_BOGUS", "1")])).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn bad_value_type_is_a_config_error() {
        let err = RunConfig::parse(&RunConfig::default(), "epochs = \"many\"").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn environment_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "epochs = 5\nt_soft = 2.0\n").unwrap();
        let cfg = RunConfig::load(
            RunConfig::default(),
            Some(&path),
            env(&[("TDCSS_EPOCHS", "7"), ("TDCSS_DATA_U", "3"), ("HOME", "/root"), ("TDCSS_LR_STAGE2", "1e-5")]),
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.t_soft, 2.0);
        assert_eq!(cfg.data.u, 3);
        assert_eq!(cfg.train.lr_stage2, Some(1e-5));
    }

    #[test]
    fn toml_echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.train.lr_stage2 = Some(3e-5);
        cfg.run.bundle = Some("b.zslb".into());
        cfg.data.d_x = 50;
        let back = RunConfig::parse(&RunConfig::default(), &cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), cfg.to_toml());
    }

    #[test]
    fn every_key_is_listed() {
        let keys = RunConfig::known_keys();
        for k in ["lr", "lr_stage2", "data_samples_per_class", "bundle", "eps_edge", "no_cps"] {
            assert!(keys.contains(k), "{k}");
        }
    }
}
