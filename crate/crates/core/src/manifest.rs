//! Flat key=value configs and per-run provenance manifests.
//!
//! Config files are plain text, one `key = value` per line, `#` comments.
//! Command-line overrides replace file values; defaults fill in last, so a
//! fully materialized config can be written back out and diffed. Every
//! artifact directory gets exactly one `manifest.txt` recording the command,
//! resolved config, seed, code version, input content hashes, and wall-clock
//! bounds of the run.

use crate::{Error, Result};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

/// Insertion-ordered string map with first-class text round-tripping.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    pairs: Vec<(String, String)>,
    index: HashMap<String, usize>,
}

impl KvConfig {
    pub fn new() -> Self {
        KvConfig::default()
    }

    pub fn parse(text: &str) -> Result<KvConfig> {
        let mut cfg = KvConfig::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            if cfg.index.contains_key(key) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key:?}",
                    i + 1
                )));
            }
            cfg.set(key, value);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<KvConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        KvConfig::parse(&text)
    }

    /// Insert or replace; overrides call this after loading the file.
    pub fn set(&mut self, key: &str, value: &str) {
        match self.index.get(key) {
            Some(&i) => self.pairs[i].1 = value.to_string(),
            None => {
                self.index.insert(key.to_string(), self.pairs.len());
                self.pairs.push((key.to_string(), value.to_string()));
            }
        }
    }

    /// Insert only when absent. Returns whether the default was used; calling
    /// this for every known key materializes the full config.
    pub fn set_default(&mut self, key: &str, value: &str) -> bool {
        if self.index.contains_key(key) {
            return false;
        }
        self.set(key, value);
        true
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.index.get(key).map(|&i| self.pairs[i].1.as_str())
    }

    /// Typed lookup of a key that must exist.
    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        match self.opt(key)? {
            Some(v) => Ok(v),
            None => Err(Error::Config(format!("missing config key {key:?}"))),
        }
    }

    /// Typed lookup of an optional key; a present-but-malformed value is
    /// still an error.
    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::Config(format!("config key {key:?} has unusable value {raw:?}"))
            }),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Sorted text form, so two configs with equal content serialize equally
    /// whatever order their keys arrived in.
    pub fn to_text(&self) -> String {
        let mut pairs = self.pairs.clone();
        pairs.sort();
        let mut out = String::new();
        for (k, v) in &pairs {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }
}

/// Hex SHA-256 of a file's content, streamed.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot hash {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    Ok(hex)
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("clock before 1970")
        .as_secs()
}

/// Provenance for one command invocation.
#[derive(Debug, Clone)]
pub struct RunManifest {
    command: String,
    seed: u64,
    code_version: &'static str,
    started: u64,
    config: KvConfig,
    inputs: Vec<(String, String)>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl RunManifest {
    pub fn begin(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            code_version: env!("CARGO_PKG_VERSION"),
            started: unix_now(),
            config: KvConfig::new(),
            inputs: Vec::new(),
        }
    }

    /// Record the fully resolved config (defaults already materialized).
    pub fn record_config(&mut self, cfg: &KvConfig) {
        self.config = cfg.clone();
    }

    pub fn record_input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.push((label.to_string(), sha256_file(path)?));
        Ok(())
    }

    /// Stamp the end time and write `manifest.txt` into the artifact
    /// directory, replacing any previous run's manifest.
    pub fn finish_to(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let mut out = KvConfig::new();
        out.set("command", &self.command);
        out.set("seed", &self.seed.to_string());
        out.set("code_version", self.code_version);
        out.set("started_unix", &self.started.to_string());
        out.set("finished_unix", &unix_now().to_string());
        for (k, v) in self.config.iter() {
            out.set(&format!("config.{k}"), v);
        }
        for (label, digest) in &self.inputs {
            out.set(&format!("input.{label}"), &format!("sha256:{digest}"));
        }
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, out.to_text())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips_through_parse() {
        let text = "# schedule\nlr_peak = 0.1\nwarmup_steps=40\n\nobjective = cloze\n";
        let cfg = KvConfig::parse(text).unwrap();
        assert_eq!(cfg.get("lr_peak"), Some("0.1"));
        assert_eq!(cfg.get("warmup_steps"), Some("40"));
        assert_eq!(cfg.require::<f64>("lr_peak").unwrap(), 0.1);
        let again = KvConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again.to_text(), cfg.to_text());
    }

    #[test]
    fn overrides_replace_and_defaults_fill() {
        let mut cfg = KvConfig::parse("a = 1\n").unwrap();
        cfg.set("a", "2");
        assert_eq!(cfg.get("a"), Some("2"));
        assert!(!cfg.set_default("a", "3"), "default must not clobber an override");
        assert_eq!(cfg.get("a"), Some("2"));
        assert!(cfg.set_default("b", "4"));
        assert_eq!(cfg.require::<u32>("b").unwrap(), 4);
    }

    #[test]
    fn malformed_lines_and_duplicates_are_rejected() {
        assert!(KvConfig::parse("just words\n").is_err());
        assert!(KvConfig::parse("= 3\n").is_err());
        let err = KvConfig::parse("a = 1\na = 2\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
        let cfg = KvConfig::parse("a = x\n").unwrap();
        let err = cfg.require::<u32>("a").unwrap_err();
        assert!(err.to_string().contains('a'), "{err}");
        assert!(cfg.require::<u32>("missing").is_err());
        assert_eq!(cfg.opt::<u32>("missing").unwrap(), None);
    }

    #[test]
    fn file_hash_matches_known_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc.txt");
        std::fs::write(&p, "abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_lands_as_one_parseable_file() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("corpus.txt");
        std::fs::write(&input, "w0 w1\n").unwrap();

        let mut cfg = KvConfig::new();
        cfg.set("objective", "cloze");
        let mut m = RunManifest::begin("pretrain", 7);
        m.record_config(&cfg);
        m.record_input("corpus", &input).unwrap();
        let path = m.finish_to(dir.path()).unwrap();
        assert_eq!(path.file_name().unwrap(), MANIFEST_FILE);

        let back = KvConfig::load(&path).unwrap();
        assert_eq!(back.get("command"), Some("pretrain"));
        assert_eq!(back.get("seed"), Some("7"));
        assert_eq!(back.get("config.objective"), Some("cloze"));
        assert!(back.get("input.corpus").unwrap().starts_with("sha256:"));
        assert!(back.require::<u64>("finished_unix").unwrap() >= back.require::<u64>("started_unix").unwrap());

        // A rerun replaces the manifest; the directory never holds two.
        m.finish_to(dir.path()).unwrap();
        let manifests = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name() == MANIFEST_FILE)
            .count();
        assert_eq!(manifests, 1);
    }
}
