use std::fs;
use std::path::{Path, PathBuf};

use melrvq_core::dsp::MelSpectrogram;
use melrvq_core::formats::load_mels;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_bytes(data: &[u8]) -> String {
    format!("{:x}", Sha256::digest(data))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let data = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(sha256_bytes(&data))
}

/// Files in `dir` with extension `ext` (case-insensitive), sorted by name.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CliError> {
    let rd = fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case(ext)))
        .collect();
    out.sort();
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

pub fn write(path: &Path, data: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, data).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn load_corpus(dir: &Path) -> Result<(Vec<PathBuf>, Vec<MelSpectrogram>), CliError> {
    let files = list_files(dir, "mels")?;
    if files.is_empty() {
        return Err(CliError::Data(format!("no .mels files in {}", dir.display())));
    }
    let specs = files
        .iter()
        .map(|f| load_mels(f).map_err(|e| CliError::Data(format!("{}: {e}", f.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((files, specs))
}

#[derive(Debug, Serialize)]
pub struct Entry {
    pub path: String,
    pub sha256: String,
    /// False for files that embed wall-clock timings.
    pub deterministic: bool,
}

/// Record of one command: the resolved configuration, and hashes of what
/// was read and written.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub inputs: Vec<Entry>,
    pub artifacts: Vec<Entry>,
}

impl Manifest {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        let value = serde_json::to_value(config).expect("config serializes");
        let bytes = serde_json::to_vec(&value).expect("value serializes");
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: sha256_bytes(&bytes),
            config: value,
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(Entry {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
            deterministic: true,
        });
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path, deterministic: bool) -> Result<(), CliError> {
        self.artifacts.push(Entry {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
            deterministic,
        });
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(format!("manifest.{}.json", self.command));
        write(&path, serde_json::to_string_pretty(self).expect("manifest serializes"))?;
        Ok(path)
    }
}
