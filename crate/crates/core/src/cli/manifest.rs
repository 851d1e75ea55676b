use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use super::RunConfig;
use crate::model::sha256_hex;
use crate::Error;

/// Provenance record written next to every artifact: command, resolved
/// configuration, seeds and SHA-256 of inputs and outputs.
#[derive(Clone, Debug, Default, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: Option<BTreeMap<String, Value>>,
    pub seeds: BTreeMap<String, u64>,
    /// Input path → digest.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to its directory → digest.
    pub outputs: BTreeMap<String, String>,
}

pub fn hash_file(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn files_in(dir: &Path) -> Result<Vec<std::path::PathBuf>, Error> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            out.extend(files_in(&path)?);
        } else if path.file_name().is_some_and(|n| n != "manifest.json") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

impl Manifest {
    pub fn new(command: &str, config: Option<&RunConfig>) -> Self {
        Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.map(RunConfig::to_flat),
            ..Self::default()
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.into(), value);
    }

    pub fn input(&mut self, path: &Path) -> Result<(), Error> {
        self.inputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    /// Every file under `dir` as an input.
    pub fn inputs_in(&mut self, dir: &Path) -> Result<(), Error> {
        for f in files_in(dir)? {
            self.input(&f)?;
        }
        Ok(())
    }

    pub fn output(&mut self, path: &Path, base: &Path) -> Result<(), Error> {
        let key = path.strip_prefix(base).unwrap_or(path).display().to_string();
        self.outputs.insert(key, hash_file(path)?);
        Ok(())
    }

    /// Every file under `dir` as an output, keyed relative to `base`.
    pub fn outputs_in(&mut self, dir: &Path, base: &Path) -> Result<(), Error> {
        for f in files_in(dir)? {
            self.output(&f, base)?;
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), Error> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}
