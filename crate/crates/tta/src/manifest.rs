//! Run manifests: every command writes one next to its outputs with the
//! fully resolved configuration, so a run can be reproduced bit-exactly
//! within one build.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand name.
    pub command: String,
    pub seed: u64,
    /// Named input paths.
    pub inputs: BTreeMap<String, String>,
    /// Named output paths.
    pub outputs: BTreeMap<String, String>,
    /// Every option of the run with defaults materialized.
    pub config: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config: serde_json::Value::Null,
        }
    }

    pub fn input(mut self, name: &str, path: impl AsRef<Path>) -> Self {
        self.inputs
            .insert(name.to_string(), path.as_ref().display().to_string());
        self
    }

    pub fn output(mut self, name: &str, path: impl AsRef<Path>) -> Self {
        self.outputs
            .insert(name.to_string(), path.as_ref().display().to_string());
        self
    }

    pub fn with_config<T: Serialize>(mut self, config: &T) -> Result<Self> {
        self.config = serde_json::to_value(config).map_err(|e| Error::Cli(e.to_string()))?;
        Ok(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Cli(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })
    }

    /// Typed view of the stored config.
    pub fn config_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::Cli(format!(
            "manifest config does not match command: {e}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct Cfg {
            x: u32,
            name: String,
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        let m = RunManifest::new("train", 7)
            .input("corpus", "corpus.txt")
            .output("checkpoint", "out/model.ckpt")
            .with_config(&Cfg {
                x: 3,
                name: "desk".into(),
            })
            .unwrap();
        m.save(&path).unwrap();
        let loaded = RunManifest::load(&path).unwrap();
        assert_eq!(loaded.command, "train");
        assert_eq!(loaded.seed, 7);
        assert_eq!(loaded.inputs["corpus"], "corpus.txt");
        let cfg: Cfg = loaded.config_as().unwrap();
        assert_eq!(cfg.x, 3);
    }
}
