//! Run manifests: what went in, what came out, and the hash tying each
//! artifact to the run that wrote it.

use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "run_manifest.json";
const CSV_HASH_PREFIX: &str = "# run_hash: ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: Option<u64>,
    /// Resolved settings without input paths, the output directory or the
    /// worker count, none of which change results.
    pub config: Map<String, Value>,
    pub inputs: Vec<InputRecord>,
    /// sha256 over subcommand, version, config and input digests.
    pub run_hash: String,
    pub artifacts: Vec<ArtifactRecord>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a file, or of a directory's files (name and digest, sorted).
pub fn hash_path(path: &Path) -> Result<String, CliError> {
    if path.is_dir() {
        let mut entries: Vec<(String, String)> = Vec::new();
        for e in fs::read_dir(path)? {
            let p = e?.path();
            if p.is_file() {
                let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
                entries.push((name, sha256_hex(&fs::read(&p)?)));
            }
        }
        entries.sort();
        let listing: String = entries.iter().map(|(n, h)| format!("{n}\t{h}\n")).collect();
        Ok(sha256_hex(listing.as_bytes()))
    } else {
        Ok(sha256_hex(&fs::read(path)?))
    }
}

fn compute_run_hash(m: &RunManifest) -> String {
    let inputs: Vec<Value> = m
        .inputs
        .iter()
        .map(|i| json!({"role": i.role, "sha256": i.sha256}))
        .collect();
    let canonical = json!({
        "tool": m.tool,
        "version": m.version,
        "subcommand": m.subcommand,
        "seed": m.seed,
        "config": m.config,
        "inputs": inputs,
    });
    sha256_hex(canonical.to_string().as_bytes())
}

/// Artifact paths stay inside the output directory.
fn checked_relative(rel: &str) -> Result<&Path, CliError> {
    let p = Path::new(rel);
    if p.components().all(|c| matches!(c, Component::Normal(_))) {
        Ok(p)
    } else {
        Err(CliError::Usage(format!("artifact path '{rel}' leaves the output directory")))
    }
}

pub struct Run {
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    pub fn start(
        out: &Path,
        subcommand: &str,
        seed: Option<u64>,
        config: Value,
        inputs: &[(&str, &Path)],
    ) -> Result<Self, CliError> {
        let Value::Object(config) = config else {
            return Err(CliError::Usage("config must be an object".into()));
        };
        let inputs = inputs
            .iter()
            .map(|(role, path)| {
                Ok(InputRecord {
                    role: role.to_string(),
                    path: path.display().to_string(),
                    sha256: hash_path(path)?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let mut manifest = RunManifest {
            tool: "repscope".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            seed,
            config,
            inputs,
            run_hash: String::new(),
            artifacts: Vec::new(),
        };
        manifest.run_hash = compute_run_hash(&manifest);
        fs::create_dir_all(out)?;
        Ok(Self {
            out: out.to_path_buf(),
            manifest,
        })
    }

    pub fn run_hash(&self) -> &str {
        &self.manifest.run_hash
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.out.join(checked_relative(rel)?);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.manifest.artifacts.push(ArtifactRecord {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Write a JSON object with `run_hash` (and `seed`) added at the top.
    pub fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let Value::Object(mut obj) = serde_json::to_value(value)? else {
            return Err(CliError::Usage(format!("artifact {rel} is not a JSON object")));
        };
        obj.insert("run_hash".into(), Value::String(self.manifest.run_hash.clone()));
        if let Some(seed) = self.manifest.seed {
            obj.insert("run_seed".into(), json!(seed));
        }
        let mut text = serde_json::to_string_pretty(&Value::Object(obj))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Write CSV text behind a `# run_hash:` comment line.
    pub fn csv(&mut self, rel: &str, body: &str) -> Result<(), CliError> {
        let mut text = format!("{CSV_HASH_PREFIX}{}\n", self.manifest.run_hash);
        if let Some(seed) = self.manifest.seed {
            text.push_str(&format!("# seed: {seed}\n"));
        }
        text.push_str(body);
        self.write(rel, text.as_bytes())
    }

    pub fn finish(self) -> Result<RunManifest, CliError> {
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(self.out.join(MANIFEST_FILE), text)?;
        Ok(self.manifest)
    }
}

/// Recompute the run hash and every artifact digest under `dir`. Returns
/// the problems found (empty when the run verifies).
pub fn verify(dir: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| CliError::Verify(format!("cannot read {}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    let mut problems = Vec::new();
    if compute_run_hash(&manifest) != manifest.run_hash {
        problems.push("run_hash does not match the recorded config and inputs".to_string());
    }
    for input in &manifest.inputs {
        let path = Path::new(&input.path);
        if !path.exists() {
            log::warn!("input {} ({}) is gone; its digest is not rechecked", input.role, input.path);
            continue;
        }
        if hash_path(path)? != input.sha256 {
            problems.push(format!("input {} ({}) changed since the run", input.role, input.path));
        }
    }
    for artifact in &manifest.artifacts {
        let path = match checked_relative(&artifact.path) {
            Ok(rel) => dir.join(rel),
            Err(e) => {
                problems.push(e.to_string());
                continue;
            }
        };
        let Ok(bytes) = fs::read(&path) else {
            problems.push(format!("artifact {} is missing", artifact.path));
            continue;
        };
        if sha256_hex(&bytes) != artifact.sha256 {
            problems.push(format!("artifact {} does not match its digest", artifact.path));
        }
        if !embeds_hash(&artifact.path, &bytes, &manifest.run_hash) {
            problems.push(format!("artifact {} does not carry the run hash", artifact.path));
        }
    }
    Ok(problems)
}

fn embeds_hash(rel: &str, bytes: &[u8], hash: &str) -> bool {
    if rel.ends_with(".csv") {
        let first = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
        first == format!("{CSV_HASH_PREFIX}{hash}").as_bytes()
    } else {
        serde_json::from_slice::<Value>(bytes)
            .ok()
            .and_then(|v| v.get("run_hash").and_then(Value::as_str).map(|h| h == hash))
            .unwrap_or(false)
    }
}
