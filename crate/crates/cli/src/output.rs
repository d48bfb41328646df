//! Output directory bookkeeping and the run manifest.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::Result;

/// Records every file written below `root` so the manifest can list them.
pub struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes `name` through `f`, creating parent directories.
    pub fn write<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Records a file written by someone else, e.g. a nested run.
    pub fn record(&mut self, name: String) {
        self.files.push(name);
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AcceptanceSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Fraction of updated nodes with rate in `[0.20, 0.55]`.
    pub fraction_in_band: f64,
    pub non_finite_proposals: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ErrorSummary {
    pub rmse: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub data_seed: u64,
    pub runtime_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acceptance: Option<AcceptanceSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorSummary>,
    pub files: Vec<String>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig, started: Instant) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.mcmc.seed,
            data_seed: config.problem.data_seed,
            runtime_seconds: started.elapsed().as_secs_f64(),
            acceptance: None,
            error: None,
            files: Vec::new(),
            config: config.clone(),
        }
    }

    /// Writes `manifest.json` via a temporary file and rename.
    pub fn write_atomic(&self, dir: &Path) -> Result<PathBuf> {
        let target = dir.join("manifest.json");
        let tmp = dir.join(".manifest.json.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer_pretty(&mut w, self).map_err(std::io::Error::other)?;
            writeln!(w)?;
            w.flush()?;
        }
        fs::rename(&tmp, &target)?;
        Ok(target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Kind;

    #[test]
    fn manifest_is_valid_json_and_lists_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        out.write("a/b.csv", |w| Ok(writeln!(w, "x")?)).unwrap();
        let mut m = RunManifest::new("make-data", &ExperimentConfig::defaults(Kind::Interp1d), Instant::now());
        m.files = out.files().to_vec();
        let path = m.write_atomic(dir.path()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(v["files"][0], "a/b.csv");
        assert_eq!(v["config"]["problem"]["kind"], "interp1d");
        assert!(!dir.path().join(".manifest.json.tmp").exists());
    }
}
