//! Input loading with digests, output writing, and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use anyhow::Context;
use kctutor_core::bank::{load_bank, QuestionBank};
use kctutor_core::engine::{check_history, load_histories};
use kctutor_core::generator::TemplateLibrary;
use kctutor_core::verifier::{load_corpus, CorpusPair, VerifierModel};
use kctutor_core::{load_tree, KcTree, Kt2Params, StudentHistory};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::failure::{Classify, Failure};

/// Everything needed to reproduce a run.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    /// Path to sha256 of the bytes read.
    pub inputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub outputs: Vec<String>,
}

pub struct Run {
    manifest: RunManifest,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Run {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        Run {
            manifest: RunManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
                inputs: BTreeMap::new(),
                seeds: BTreeMap::new(),
                outputs: Vec::new(),
            },
        }
    }

    /// A missing file is a usage error; anything else unreadable is a runtime one.
    pub fn read(&mut self, path: &Path) -> Result<String, Failure> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == ErrorKind::NotFound => {
                return Err(Failure::usage(format!("input file not found: {}", path.display())))
            }
            Err(e) => return Err(e).with_context(|| format!("reading {}", path.display())).runtime(),
        };
        self.manifest.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", path.display())).data()
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.manifest.seeds.insert(name.to_string(), value);
    }

    pub fn write(&mut self, path: &Path, contents: &str) -> Result<(), Failure> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).runtime()?;
        }
        fs::write(path, contents).with_context(|| format!("writing {}", path.display())).runtime()?;
        self.manifest.outputs.push(path.display().to_string());
        Ok(())
    }

    /// Writes `manifest.json` into `dir`.
    pub fn finish(self, dir: &Path) -> Result<PathBuf, Failure> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).runtime()?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display())).runtime()?;
        Ok(path)
    }

    pub fn tree(&mut self, path: &Path) -> Result<KcTree, Failure> {
        let text = self.read(path)?;
        load_tree(&text).with_context(|| format!("tree file {}", path.display())).data()
    }

    pub fn params(&mut self, path: &Path, tree: &KcTree) -> Result<Kt2Params, Failure> {
        let text = self.read(path)?;
        let p = Kt2Params::from_json(&text).with_context(|| format!("params file {}", path.display())).data()?;
        p.validate(tree).with_context(|| format!("params file {}", path.display())).data()?;
        Ok(p)
    }

    pub fn histories(&mut self, path: &Path, tree: &KcTree) -> Result<Vec<StudentHistory>, Failure> {
        let text = self.read(path)?;
        let hs = load_histories(&text).with_context(|| format!("history file {}", path.display())).data()?;
        for h in &hs {
            check_history(tree, h)
                .with_context(|| format!("history file {}: student {:?}", path.display(), h.student_id))
                .data()?;
        }
        Ok(hs)
    }

    pub fn bank(&mut self, path: &Path, tree: &KcTree) -> Result<QuestionBank, Failure> {
        let text = self.read(path)?;
        load_bank(&text, tree).with_context(|| format!("question file {}", path.display())).data()
    }

    pub fn corpus(&mut self, path: &Path) -> Result<Vec<CorpusPair>, Failure> {
        let text = self.read(path)?;
        load_corpus(&text).with_context(|| format!("corpus file {}", path.display())).data()
    }

    pub fn model(&mut self, path: &Path) -> Result<VerifierModel, Failure> {
        let text = self.read(path)?;
        VerifierModel::from_json(&text).with_context(|| format!("verifier model {}", path.display())).data()
    }

    pub fn templates(&mut self, path: &Path) -> Result<TemplateLibrary, Failure> {
        let text = self.read(path)?;
        serde_json::from_str(&text).with_context(|| format!("template file {}", path.display())).data()
    }
}
