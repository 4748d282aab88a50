use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{flat_lines, params_object};
use crate::error::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Writes data files for one command run into an output directory.
pub struct Output {
    dir: PathBuf,
    command: &'static str,
    header: String,
    config: Value,
    written: Vec<PathBuf>,
}

impl Output {
    pub fn new<T: Serialize>(
        dir: &Path,
        command: &'static str,
        params: &T,
    ) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        let mut header = format!("# qtrans {VERSION} {command}\n");
        for line in flat_lines(params) {
            header.push_str(&format!("# {line}\n"));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            header,
            config: Value::Object(params_object(params)),
            written: Vec::new(),
        })
    }

    /// CSV with the parameter header as leading comment lines.
    pub fn csv<F>(&mut self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    {
        let mut buf = self.header.clone().into_bytes();
        body(&mut buf)?;
        self.write(name, &buf)
    }

    /// JSON summary; its `config` object is accepted back as a config file.
    pub fn summary(&mut self, name: &str, results: Value) -> Result<(), CliError> {
        let doc = json!({
            "command": self.command,
            "version": VERSION,
            "config": self.config,
            "results": results,
        });
        let mut text = serde_json::to_string_pretty(&doc).map_err(std::io::Error::other)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let mut f = std::fs::File::create(&path)?;
        f.write_all(bytes)?;
        self.written.push(path);
        Ok(())
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}

/// Finite floats as numbers, everything else as `null`.
pub fn num(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}
