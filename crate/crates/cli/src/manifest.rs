use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use vrm_core::train::TrainConfig;

use crate::Failure;

/// `manifest.json` of a run directory. Written before work starts and
/// rewritten with the final status and artifact list afterwards.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: String,
    pub config: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub inputs: Vec<String>,
    pub artifacts: Vec<String>,
    pub started_unix: u64,
    pub wall_clock_secs: Option<f64>,
    pub version: String,
    #[serde(skip)]
    clock: Option<Instant>,
}

impl RunManifest {
    pub fn start(dir: &Path, command: &str, cfg: &TrainConfig, seeds: Vec<u64>, inputs: Vec<String>) -> Result<Self, Failure> {
        let m = RunManifest {
            command: command.to_string(),
            status: "running".into(),
            config: cfg.to_kv().into_iter().collect(),
            seeds,
            inputs,
            artifacts: Vec::new(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_clock_secs: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
            clock: Some(Instant::now()),
        };
        m.write(dir)?;
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        crate::write_file(&dir.join("manifest.json"), &(text + "\n"))
    }

    pub fn finalize(&mut self, dir: &Path, status: &str) -> Result<(), Failure> {
        self.status = status.to_string();
        self.wall_clock_secs = self.clock.map(|c| c.elapsed().as_secs_f64());
        self.write(dir)
    }
}
