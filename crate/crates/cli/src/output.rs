use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

/// Writes artifacts into one output directory.
pub struct Sink {
    dir: PathBuf,
    timestamp: bool,
    written: Vec<PathBuf>,
}

impl Sink {
    pub fn new(dir: &Path, timestamp: bool) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Sink { dir: dir.to_path_buf(), timestamp, written: Vec::new() })
    }

    /// `report.json` with the command name, echoed options and the result.
    pub fn report<O: Serialize, R: Serialize>(&mut self, command: &str, options: &O, result: &R) -> Result<()> {
        let mut doc = serde_json::Map::new();
        doc.insert("command".into(), json!(command));
        if self.timestamp {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            doc.insert("generated_at_unix".into(), json!(secs));
        }
        doc.insert("options".into(), serde_json::to_value(options)?);
        doc.insert("result".into(), serde_json::to_value(result)?);
        let text = serde_json::to_string_pretty(&Value::Object(doc))? + "\n";
        self.write("report.json", text.as_bytes())
    }

    /// CSV with a header row; values use the shortest round-trip formatting.
    pub fn csv(&mut self, name: &str, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
        self.write(name, &bytes)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path);
        Ok(())
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }
}

pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}
