//! Artifact directories and their manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cardinal_core::data_io::write_atomic;
use cardinal_core::impossibility::sha256_hex;
use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const OUT_ENV: &str = "CARDINAL_OUT";

/// `--out` if given, else `$CARDINAL_OUT/<command>`, else
/// `cardinal-out/<command>`.
pub fn resolve_out(out: Option<&Path>, command: &str) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("cardinal-out"))
            .join(command),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to re-run a command. Output locations are left out so
/// identical runs produce identical manifests.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub args: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<Value>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    pub warnings: Vec<String>,
    pub artifacts: Vec<FileHash>,
}

pub struct Artifacts {
    dir: PathBuf,
    force: bool,
    command: String,
    args: Value,
    config: Option<Value>,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<(PathBuf, FileHash)>,
    warnings: Vec<String>,
    written: Vec<FileHash>,
}

impl Artifacts {
    pub fn create(dir: PathBuf, force: bool, command: &str, args: &impl Serialize) -> CliResult<Self> {
        fs::create_dir_all(&dir).map_err(|e| CliError::data(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir,
            force,
            command: command.to_string(),
            args: serde_json::to_value(args)?,
            config: None,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            warnings: Vec::new(),
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Record an input file's hash; outputs may never replace it.
    pub fn input(&mut self, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
        let canonical = fs::canonicalize(path)?;
        self.inputs.push((
            canonical,
            FileHash { path: path.display().to_string(), sha256: sha256_hex(&bytes) },
        ));
        Ok(bytes)
    }

    pub fn config(&mut self, config: &impl Serialize) -> CliResult<()> {
        self.config = Some(serde_json::to_value(config)?);
        Ok(())
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        let m = message.into();
        log::warn!("{m}");
        self.warnings.push(m);
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.join(name);
        if let Ok(canonical) = fs::canonicalize(&path) {
            if self.inputs.iter().any(|(p, _)| *p == canonical) {
                return Err(CliError::data(format!("refusing to overwrite input file {}", path.display())));
            }
        }
        write_atomic(&path, bytes, self.force)?;
        self.written.push(FileHash { path: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn json(&mut self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::data(e.to_string()))?;
        self.write(name, &bytes)
    }

    /// Write `manifest.json` last so its presence marks a complete run.
    pub fn finish(mut self) -> CliResult<Manifest> {
        let manifest = Manifest {
            tool: "cardinal",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command.clone(),
            args: self.args.clone(),
            config: self.config.take(),
            seeds: std::mem::take(&mut self.seeds),
            inputs: self.inputs.iter().map(|(_, h)| h.clone()).collect(),
            warnings: self.warnings.clone(),
            artifacts: std::mem::take(&mut self.written),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&self.dir.join(MANIFEST), text.as_bytes(), self.force)?;
        Ok(manifest)
    }
}
