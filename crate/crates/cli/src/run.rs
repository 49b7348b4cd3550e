//! Run bookkeeping: staged artifacts, manifests and quarantine.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

pub const MANIFEST: &str = "manifest.json";
pub const QUARANTINE: &str = "quarantine";

#[derive(Debug)]
pub enum Failure {
    /// Bad config or missing inputs; exit code 1.
    Validation(String),
    /// Anything that went wrong while running; exit code 2.
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Failure::Validation(_) => "validation",
            Failure::Runtime(_) => "runtime",
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => m,
        }
    }

    pub fn record(&self, command: &str) -> Value {
        json!({
            "status": "error",
            "command": command,
            "kind": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.message(),
        })
    }
}

impl From<phyloembed::Error> for Failure {
    fn from(e: phyloembed::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub type Outcome<T> = Result<T, Failure>;

/// Artifacts are written into a staging directory and only moved into the
/// output directory once the command has succeeded.
pub struct Run {
    pub command: String,
    pub seed: u64,
    out_dir: PathBuf,
    staging: PathBuf,
    artifacts: Vec<String>,
    summary: serde_json::Map<String, Value>,
    config_text: String,
    started: Instant,
    started_unix: u64,
}

impl Run {
    pub fn start(command: &str, seed: u64, out_dir: &Path, config_text: String) -> Outcome<Run> {
        let staging = out_dir.join(format!(".staging-{command}"));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        Ok(Run {
            command: command.to_string(),
            seed,
            out_dir: out_dir.to_path_buf(),
            staging,
            artifacts: Vec::new(),
            summary: serde_json::Map::new(),
            config_text,
            started: Instant::now(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        })
    }

    /// Path inside the staging area for a relative artifact name.
    pub fn path(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Outcome<()> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, bytes)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Outcome<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Records a file some library call already wrote into the staging area.
    pub fn adopt(&mut self, name: &str) {
        self.artifacts.push(name.to_string());
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(
            key.to_string(),
            serde_json::to_value(value).unwrap_or(Value::Null),
        );
    }

    fn manifest(&self, status: &str, error: Option<Value>) -> Value {
        let artifacts: Vec<Value> = self
            .artifacts
            .iter()
            .map(|a| {
                let bytes = fs::metadata(self.staging.join(a)).map(|m| m.len()).ok();
                json!({ "path": a, "bytes": bytes })
            })
            .collect();
        let mut m = json!({
            "command": self.command,
            "status": status,
            "seed": self.seed,
            "config": self.config_text,
            "versions": {
                "phyloembed": env!("CARGO_PKG_VERSION"),
                "manifest": 1,
            },
            "started_unix": self.started_unix,
            "wall_seconds": self.started.elapsed().as_secs_f64(),
            "artifacts": artifacts,
            "summary": self.summary,
        });
        if let Some(e) = error {
            m["error"] = e;
        }
        m
    }

    pub fn finish(self) -> Outcome<PathBuf> {
        let manifest = self.manifest("ok", None);
        for a in &self.artifacts {
            let dest = self.out_dir.join(a);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::rename(self.staging.join(a), dest)?;
        }
        let path = self.out_dir.join(MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        fs::remove_dir_all(&self.staging)?;
        Ok(path)
    }

    /// Moves whatever was staged to `quarantine/<command>` next to an error
    /// record and a failed manifest.
    pub fn quarantine(self, failure: &Failure) -> Outcome<PathBuf> {
        let record = failure.record(&self.command);
        let manifest = self.manifest("failed", Some(record.clone()));
        let dest = self.out_dir.join(QUARANTINE).join(&self.command);
        if dest.exists() {
            fs::remove_dir_all(&dest)?;
        }
        fs::create_dir_all(dest.parent().expect("quarantine has a parent"))?;
        fs::rename(&self.staging, &dest)?;
        fs::write(
            dest.join("error.json"),
            serde_json::to_string_pretty(&record)? + "\n",
        )?;
        fs::write(
            dest.join(MANIFEST),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(dest)
    }
}
