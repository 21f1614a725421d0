//! Config merging, content-addressed run directories, locking and
//! provenance records.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

pub const DATA_ROOT_ENV: &str = "TODSPEC_DATA_ROOT";
pub const LOCK_FILE: &str = "run.lock";
pub const PROVENANCE_FILE: &str = "provenance.json";

/// Overlays the flags given on the command line onto the config file's
/// values: flags win, absent flags fall back to the file.
/// Config keys must name one of the subcommand's flags.
pub fn merge<T: Serialize + DeserializeOwned + clap::Args>(
    flags: &T,
    config: Option<&Path>,
) -> Result<T> {
    let Some(path) = config else {
        return Ok(serde_json::from_value(serde_json::to_value(flags)?)?);
    };
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut base: Map<String, Value> = match serde_json::from_str(&text)? {
        Value::Object(m) => m,
        _ => bail!("config {} must hold a JSON object", path.display()),
    };
    let known: Vec<String> = T::augment_args(clap::Command::new("config"))
        .get_arguments()
        .map(|a| a.get_id().to_string())
        .collect();
    let unknown: Vec<&str> = base
        .keys()
        .filter(|k| !known.contains(k))
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        bail!(
            "config {} has unknown keys: {}",
            path.display(),
            unknown.join(", ")
        );
    }
    if let Value::Object(over) = serde_json::to_value(flags)? {
        for (k, v) in over {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(base))
        .with_context(|| format!("config {}", path.display()))
}

/// Resolves relative input paths against the data root, when one is set.
pub fn input_path(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) => Path::new(&root).join(p),
        None => p.to_path_buf(),
    }
}

pub fn default_out_root() -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) => Path::new(&root).join("runs"),
        None => PathBuf::from("runs"),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a file, or of a directory's files in sorted relative order.
pub fn path_digest(path: &Path) -> Result<String> {
    if path.is_file() {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(sha256_hex(&bytes));
    }
    if !path.is_dir() {
        bail!("input {} does not exist", path.display());
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = fs::read(path.join(&rel))?;
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(Sha256::digest(&bytes));
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != LOCK_FILE) {
            out.push(p.strip_prefix(root)?.to_path_buf());
        }
    }
    Ok(())
}

/// An open run directory, holding its lock until dropped.
pub struct Run {
    pub dir: PathBuf,
    command: String,
    config: Value,
    config_digest: String,
    seed: Option<u64>,
    inputs: Vec<(String, String)>,
    outputs: Vec<String>,
}

impl Run {
    /// Creates `<out_root>/<command>-<digest>` where the digest covers the
    /// command, the resolved config and the input digests.
    pub fn open(
        out_root: &Path,
        command: &str,
        config: &impl Serialize,
        seed: Option<u64>,
        inputs: &[&Path],
        force: bool,
    ) -> Result<Run> {
        let config = serde_json::to_value(config)?;
        let mut input_digests = Vec::new();
        for p in inputs {
            input_digests.push((p.display().to_string(), path_digest(p)?));
        }
        let config_digest =
            sha256_hex(serde_json::to_string(&json!([command, config, input_digests]))?.as_bytes());
        let dir = out_root.join(format!("{command}-{}", &config_digest[..16]));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let lock = dir.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
        {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "run directory {} is locked by another writer",
                    dir.display()
                )
            }
            Err(e) => return Err(e).with_context(|| format!("creating {}", lock.display())),
        }
        let run = Run {
            dir,
            command: command.to_string(),
            config,
            config_digest,
            seed,
            inputs: input_digests,
            outputs: Vec::new(),
        };
        if !force && run.dir.join(PROVENANCE_FILE).exists() {
            bail!(
                "run directory {} already holds results; pass --force to overwrite",
                run.dir.display()
            );
        }
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Registers an artifact written under the run directory.
    pub fn output(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        fs::write(self.path(name), serde_json::to_string_pretty(value)? + "\n")?;
        self.output(name);
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        fs::write(self.path(name), text)?;
        self.output(name);
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf> {
        let mut outputs = Map::new();
        for name in &self.outputs {
            outputs.insert(name.clone(), Value::String(path_digest(&self.path(name))?));
        }
        let inputs: Vec<Value> = self
            .inputs
            .iter()
            .map(|(p, d)| json!({"path": p, "sha256": d}))
            .collect();
        let record = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "config_digest": self.config_digest,
            "config": self.config,
            "inputs": inputs,
            "outputs": outputs,
        });
        fs::write(
            self.path(PROVENANCE_FILE),
            serde_json::to_string_pretty(&record)? + "\n",
        )?;
        Ok(self.dir.clone())
    }
}

impl Drop for Run {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.dir.join(LOCK_FILE));
    }
}
