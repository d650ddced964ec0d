//! Run manifests: enough to repeat a command exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub struct Manifest {
    command: &'static str,
    args: Vec<String>,
    seed: u64,
    pub flags: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    extra: Map<String, Value>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(command: &'static str, argv: &[String], seed: u64, flags: BTreeMap<String, String>) -> Self {
        Self {
            command,
            args: argv.iter().skip(1).cloned().collect(),
            seed,
            flags,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            extra: Map::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn extra(&mut self, key: &str, value: impl serde::Serialize) {
        self.extra.insert(key.into(), json!(value));
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let doc = json!({
            "command": self.command,
            "args": self.args,
            "flags": self.flags,
            "seed": self.seed,
            "versions": {
                "ebsurv": env!("CARGO_PKG_VERSION"),
                "model_format": ebsurv_core::io::MODEL_FORMAT_VERSION,
            },
            "inputs": self.inputs,
            "outputs": self.outputs,
            "results": self.extra,
        });
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&doc).map_err(ebsurv_core::Error::from)?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}
