//! Artifact directory: fingerprinted JSON envelopes, prerequisite checks and
//! per-command manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use persona_steer::dataset::{load_dataset, LoadOptions, ResponseMatrix};
use persona_steer::error::{Error, Result};
use persona_steer::fingerprint;

use crate::config::PipelineConfig;

pub const QUESTIONS: &str = "questions.jsonl";
pub const RESPONSES: &str = "responses.csv";
pub const DEMOGRAPHICS: &str = "demographics.csv";

/// On-disk wrapper around every JSON artifact.
#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    kind: String,
    fingerprint: String,
    body: T,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_fingerprint: String,
    seeds: BTreeMap<&'static str, u64>,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

pub struct Workspace {
    pub config: PipelineConfig,
    pub out: PathBuf,
    command: &'static str,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Workspace {
    pub fn new(config: PipelineConfig, command: &'static str) -> Result<Self> {
        let out = config.out.clone();
        fs::create_dir_all(&out).map_err(io_err(&out))?;
        Ok(Self {
            config,
            out,
            command,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Read a prerequisite, recording its hash as an input of this command.
    fn read_input(&mut self, label: String, path: &Path, producer: &str) -> Result<Vec<u8>> {
        if !path.exists() {
            return Err(Error::Dependency {
                path: path.to_path_buf(),
                producer: producer.to_string(),
            });
        }
        let bytes = fs::read(path).map_err(io_err(path))?;
        self.inputs.insert(label, fingerprint::of_bytes(&bytes));
        Ok(bytes)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.outputs.insert(name.to_string(), fingerprint::of_bytes(bytes));
        log::info!("wrote {}", path.display());
        Ok(())
    }

    pub fn write_artifact<T: Serialize>(&mut self, name: &str, kind: &str, fingerprint: &str, body: &T) -> Result<()> {
        let envelope = Envelope {
            kind: kind.to_string(),
            fingerprint: fingerprint.to_string(),
            body,
        };
        let mut text = serde_json::to_string_pretty(&envelope)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Load an artifact produced by `producer`, checking that it was built
    /// from the inputs and settings the current configuration implies.
    pub fn read_artifact<T: DeserializeOwned>(&mut self, name: &str, producer: &str, expected: &str) -> Result<T> {
        let path = self.path(name);
        let bytes = self.read_input(name.to_string(), &path, producer)?;
        let envelope: Envelope<T> = serde_json::from_slice(&bytes)?;
        if envelope.fingerprint != expected {
            return Err(Error::Incompatible(format!(
                "{name} was built from different inputs or settings; rerun `{producer}`"
            )));
        }
        Ok(envelope.body)
    }

    fn data_paths(&self) -> (PathBuf, PathBuf, Option<PathBuf>) {
        let data = &self.config.data;
        match (&data.questions, &data.responses) {
            (Some(q), Some(r)) => (q.clone(), r.clone(), data.demographics.clone()),
            _ => (
                self.path(QUESTIONS),
                self.path(RESPONSES),
                Some(self.path(DEMOGRAPHICS)),
            ),
        }
    }

    /// The survey and its fingerprint (file contents plus refusal labels).
    pub fn dataset(&mut self) -> Result<(ResponseMatrix, String)> {
        let (q, r, d) = self.data_paths();
        let mut parts = vec![fingerprint::of_value(&self.config.data.refusal_labels)];
        for path in [Some(&q), Some(&r), d.as_ref()].into_iter().flatten() {
            let label = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let bytes = self.read_input(label, path, "gen-synthetic")?;
            parts.push(fingerprint::of_bytes(&bytes));
        }
        let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
        let options = LoadOptions {
            refusal_labels: self.config.data.refusal_labels.clone(),
        };
        let matrix = load_dataset(&q, &r, d.as_deref(), &options)?;
        Ok((matrix, fingerprint::chain(&refs)))
    }

    /// Write `manifests/<command>.json`.
    pub fn finish(mut self) -> Result<()> {
        let c = &self.config;
        let seeds = BTreeMap::from([
            ("synthetic", c.data.synthetic.seed),
            ("split", c.split.seed),
            ("cf", c.cf.seed),
            ("lm", c.lm.seed),
            ("spm", c.spm.seed),
        ]);
        let outputs = std::mem::take(&mut self.outputs);
        let manifest = Manifest {
            command: self.command,
            config_fingerprint: c.fingerprint(),
            seeds,
            inputs: &self.inputs,
            outputs: &outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let name = format!("manifests/{}.json", self.command);
        self.write(&name, text.as_bytes())
    }
}
