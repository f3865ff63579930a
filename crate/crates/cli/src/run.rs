//! Run directories and manifests.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::failure::Failure;

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub name: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub step: String,
    pub seconds: f64,
}

/// Everything needed to reproduce a run: `caustiq <command> --config manifest.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    pub config: Value,
    pub seed: u64,
    pub versions: Value,
    pub threads: usize,
    pub created: String,
    pub outputs: Vec<OutputFile>,
    pub timings: Vec<Timing>,
    pub summary: Value,
}

pub struct Run {
    pub dir: PathBuf,
    manifest: RunManifest,
    started: Instant,
    lap: Instant,
}

impl Run {
    /// Creates the run directory (`dir`, or `<out_dir>/<timestamp>-<tag>`) and
    /// writes a preliminary manifest.
    pub fn start(
        command: &str,
        config: &impl Serialize,
        seed: u64,
        out_dir: &Path,
        tag: &str,
        dir: Option<PathBuf>,
    ) -> Result<Self, Failure> {
        let now = chrono::Local::now();
        let dir = dir.unwrap_or_else(|| out_dir.join(format!("{}-{tag}", now.format("%Y%m%d-%H%M%S%.3f"))));
        std::fs::create_dir_all(&dir)?;
        let config = serde_json::to_value(config).map_err(|e| Failure::Config(e.to_string()))?;
        let manifest = RunManifest {
            command: command.to_string(),
            status: "running".into(),
            config,
            seed,
            versions: json!({
                "caustiq": env!("CARGO_PKG_VERSION"),
                "ensemble_binary": String::from_utf8_lossy(caustiq::io::MAGIC),
            }),
            threads: rayon::current_num_threads(),
            created: now.to_rfc3339(),
            outputs: Vec::new(),
            timings: Vec::new(),
            summary: Value::Null,
        };
        let run = Self { dir, manifest, started: Instant::now(), lap: Instant::now() };
        run.write_manifest()?;
        Ok(run)
    }

    fn write_manifest(&self) -> Result<(), Failure> {
        let f = File::create(self.dir.join("manifest.json"))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &self.manifest).map_err(|e| Failure::Config(e.to_string()))?;
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes one output file through `body` and records it in the manifest.
    pub fn emit<F>(&mut self, name: &str, body: F) -> Result<(), Failure>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<(), Failure>,
    {
        let path = self.path(name);
        let mut w = BufWriter::new(File::create(&path)?);
        body(&mut w)?;
        w.flush()?;
        drop(w);
        let bytes = std::fs::metadata(&path)?.len();
        self.manifest.outputs.push(OutputFile { name: name.to_string(), bytes });
        Ok(())
    }

    pub fn emit_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), Failure> {
        self.emit(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value).map_err(|e| Failure::Config(e.to_string()))?;
            writeln!(w)?;
            Ok(())
        })
    }

    /// Records the time since the previous lap under `step`.
    pub fn lap(&mut self, step: &str) {
        let now = Instant::now();
        self.manifest.timings.push(Timing { step: step.to_string(), seconds: (now - self.lap).as_secs_f64() });
        self.lap = now;
    }

    pub fn finish(mut self, summary: Value) -> Result<PathBuf, Failure> {
        self.manifest.timings.push(Timing { step: "total".into(), seconds: self.started.elapsed().as_secs_f64() });
        self.manifest.status = "complete".into();
        self.manifest.summary = summary;
        self.write_manifest()?;
        Ok(self.dir)
    }
}
