//! Output directories: files are written to a staging directory that
//! replaces `--out` only once the command succeeds.

use std::fs;
use std::path::{Path, PathBuf};

use gazekit::{GazeError, Result};
use serde::{Deserialize, Serialize};

pub const RUN_FILE: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub config_fingerprint: String,
    pub corpus_fingerprint: Option<String>,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}

pub struct RunDir {
    staging: PathBuf,
    target: PathBuf,
    outputs: Vec<String>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> GazeError + '_ {
    move |e| GazeError::Io { path: path.to_path_buf(), source: e }
}

impl RunDir {
    pub fn create(target: &Path) -> Result<Self> {
        if target.exists() {
            let is_run = target.join(RUN_FILE).exists();
            let empty = target.is_dir() && fs::read_dir(target).map_err(io(target))?.next().is_none();
            if !is_run && !empty {
                return Err(GazeError::Domain(format!(
                    "{} exists and is not a previous run directory; refusing to overwrite",
                    target.display()
                )));
            }
        }
        let name = target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(io(parent))?;
        let staging = parent.join(format!(".{name}.partial"));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(io(&staging))?;
        }
        fs::create_dir_all(&staging).map_err(io(&staging))?;
        Ok(Self {
            staging,
            target: target.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    /// Path for an output file, recorded in the run manifest.
    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.staging.join(name)
    }

    /// The staging directory itself, for commands that write trees.
    pub fn root(&self) -> &Path {
        &self.staging
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, text).map_err(io(&p))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write_text(name, &text)
    }

    pub fn finish(mut self, mut manifest: RunManifest) -> Result<PathBuf> {
        manifest.outputs = std::mem::take(&mut self.outputs);
        manifest.outputs.sort();
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        let p = self.staging.join(RUN_FILE);
        fs::write(&p, text).map_err(io(&p))?;
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(io(&self.target))?;
        }
        fs::rename(&self.staging, &self.target).map_err(io(&self.target))?;
        Ok(self.target.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if self.staging.exists() {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let p = dir.join(RUN_FILE);
    let text = fs::read_to_string(&p).map_err(io(&p))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> RunManifest {
        RunManifest {
            tool_version: "0".into(),
            command: "test".into(),
            config: serde_json::json!({}),
            config_fingerprint: "f".into(),
            corpus_fingerprint: None,
            seed: 1,
            inputs: vec![],
            outputs: vec![],
            summary: serde_json::json!({}),
        }
    }

    #[test]
    fn output_appears_only_on_finish() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("run");
        let mut r = RunDir::create(&target).unwrap();
        r.write_text("a.txt", "x").unwrap();
        assert!(!target.exists());
        r.finish(manifest()).unwrap();
        assert!(target.join("a.txt").exists());
        let m = read_manifest(&target).unwrap();
        assert_eq!(m.outputs, vec!["a.txt".to_string()]);
        // a failed rerun leaves the previous output in place
        let mut again = RunDir::create(&target).unwrap();
        again.write_text("b.txt", "y").unwrap();
        drop(again);
        assert!(target.join("a.txt").exists() && !target.join("b.txt").exists());
    }

    #[test]
    fn refuses_foreign_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("precious.txt"), "keep").unwrap();
        assert!(RunDir::create(dir.path()).is_err());
    }
}
