use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use wassinc::io::stable_json;

use crate::CliError;

/// One written file and what it holds.
struct Entry {
    file: String,
    description: String,
}

/// Output directory that records every file it writes in `manifest.json`.
pub struct Outputs {
    dir: PathBuf,
    entries: Vec<Entry>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Validation(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        })
    }

    pub fn write(&mut self, file: &str, description: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(file);
        fs::write(&path, contents).map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))?;
        self.entries.push(Entry {
            file: file.to_string(),
            description: description.to_string(),
        });
        Ok(())
    }

    pub fn write_json(&mut self, file: &str, description: &str, value: Value) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(&stable_json(value)).expect("json values serialize");
        self.write(file, description, &(text + "\n"))
    }

    /// Writes `manifest.json` with the echoed inputs and the file list.
    pub fn finish(self, subcommand: &str, inputs: Value, seed: Option<u64>) -> Result<(), CliError> {
        let files: Vec<Value> = self
            .entries
            .iter()
            .map(|e| json!({"file": e.file, "description": e.description}))
            .collect();
        let manifest = json!({
            "tool": "wassinc",
            "version": env!("CARGO_PKG_VERSION"),
            "subcommand": subcommand,
            "seed": seed,
            "inputs": inputs,
            "outputs": files,
        });
        let text = serde_json::to_string_pretty(&stable_json(manifest)).expect("json values serialize");
        let path = self.dir.join("manifest.json");
        fs::write(&path, text + "\n").map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
    }
}
