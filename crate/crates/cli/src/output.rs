//! Artifact writing: provenance headers and all-or-nothing commits.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use tempfile::NamedTempFile;

use crate::error::CliError;

pub const TOOL: &str = "raf";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Reproducibility header embedded in every artifact.
pub fn provenance(command: &str, settings: &Value) -> Value {
    json!({
        "tool": TOOL,
        "version": VERSION,
        "command": command,
        "settings": settings,
    })
}

/// `# `-prefixed CSV preamble carrying the provenance JSON on one line.
pub fn csv_preamble(command: &str, settings: &Value) -> String {
    format!("# {TOOL} {VERSION}\n# {}\n", provenance(command, settings))
}

/// Collects output files and moves them into place only on [`commit`],
/// each with an atomic rename. Dropping without committing leaves nothing
/// behind.
///
/// [`commit`]: Staged::commit
#[derive(Default)]
pub struct Staged {
    files: Vec<(PathBuf, NamedTempFile)>,
}

fn temp_dir_for(path: &Path) -> PathBuf {
    // Walk up to the nearest existing directory so that outputs inside a
    // not-yet-created run directory can still be staged on the same device.
    let mut dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    loop {
        let probe = if dir.as_os_str().is_empty() { PathBuf::from(".") } else { dir.clone() };
        if probe.is_dir() {
            return probe;
        }
        match dir.parent() {
            Some(p) => dir = p.to_path_buf(),
            None => return PathBuf::from("."),
        }
    }
}

impl Staged {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, path: impl AsRef<Path>, bytes: &[u8]) -> Result<(), CliError> {
        let path = path.as_ref();
        let mut tmp = tempfile::Builder::new().prefix(".raf-tmp-").tempfile_in(temp_dir_for(path))?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        self.files.push((path.to_path_buf(), tmp));
        Ok(())
    }

    pub fn commit(self) -> Result<(), CliError> {
        for (path, tmp) in self.files {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            tmp.persist(&path).map_err(|e| CliError::from(e.error))?;
        }
        Ok(())
    }
}

/// Pretty JSON with a trailing newline.
pub fn json_bytes(v: &Value) -> Result<Vec<u8>, CliError> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

/// Sidecar path for formats that cannot carry a header.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}
