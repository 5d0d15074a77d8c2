//! Config files: TOML with a fixed schema per command.
//!
//! Unknown keys are rejected by every schema. Relative paths are resolved
//! against the directory holding the config file. `--seed` overrides the
//! top-level `seed`, which every component seed is derived from.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use stainprompt::hash::key_hash;

/// A parsed config together with the table it came from, which is what the
/// run manifest records.
pub struct Loaded<T> {
    pub config: T,
    pub table: toml::Table,
    pub base: PathBuf,
}

impl<T> Loaded<T> {
    pub fn path(&self, p: &Path) -> PathBuf {
        resolve(&self.base, p)
    }
}

pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    text.parse::<toml::Table>().with_context(|| format!("parsing config {}", path.display()))
}

pub fn load<T: DeserializeOwned>(path: &Path, seed: Option<u64>) -> Result<Loaded<T>> {
    let mut table = read_table(path)?;
    if let Some(s) = seed {
        let s = i64::try_from(s).context("--seed must fit in a signed 64-bit integer")?;
        table.insert("seed".into(), toml::Value::Integer(s));
    }
    let config = parse(&table).with_context(|| format!("invalid config {}", path.display()))?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    Ok(Loaded { config, table, base })
}

pub fn parse<T: DeserializeOwned>(table: &toml::Table) -> Result<T> {
    Ok(toml::Value::Table(table.clone()).try_into::<T>()?)
}

/// Named substream of the top-level seed: the first eight bytes of
/// `sha256(seed, name)`, little-endian, cut to 63 bits so the value can be
/// written back into TOML.
pub fn substream(seed: u64, name: &str) -> u64 {
    let h = key_hash(&[&seed.to_string(), name]);
    u64::from_str_radix(&h[..16], 16).expect("hex digest").swap_bytes() & i64::MAX as u64
}

/// Takes a derived section, refusing keys the command fills in itself.
pub fn section_with(table: &toml::Table, name: &str, derived: &[(&str, toml::Value)]) -> Result<toml::Table> {
    let mut sec = match table.get(name) {
        Some(toml::Value::Table(t)) => t.clone(),
        Some(_) => bail!("`{name}` must be a table"),
        None => toml::Table::new(),
    };
    for (k, v) in derived {
        if sec.contains_key(*k) {
            bail!("`{name}.{k}` is derived by the command and must not be set");
        }
        sec.insert((*k).into(), v.clone());
    }
    Ok(sec)
}

pub fn int(v: u64) -> toml::Value {
    toml::Value::Integer(v as i64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Demo {
        seed: u64,
        #[allow(dead_code)]
        out: PathBuf,
    }

    #[test]
    fn missing_seed_names_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "out = \"x\"\n").unwrap();
        let err = format!("{:#}", load::<Demo>(&p, None).err().unwrap());
        assert!(err.contains("seed"), "{err}");
        let ok = load::<Demo>(&p, Some(9)).unwrap();
        assert_eq!(ok.config.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 1\nout = \"x\"\nsede = 2\n").unwrap();
        let err = format!("{:#}", load::<Demo>(&p, None).err().unwrap());
        assert!(err.contains("sede"), "{err}");
    }

    #[test]
    fn substreams_differ_by_name_and_seed() {
        assert_eq!(substream(1, "data"), substream(1, "data"));
        assert_ne!(substream(1, "data"), substream(1, "train"));
        assert_ne!(substream(1, "data"), substream(2, "data"));
        assert!((0..64).all(|s| substream(s, "transfer") <= i64::MAX as u64));
    }

    #[test]
    fn derived_keys_cannot_be_overridden() {
        let t: toml::Table = "[transfer]\nlambda = 0.5\nseed = 3\n".parse().unwrap();
        assert!(section_with(&t, "transfer", &[("seed", int(1))]).is_err());
        let t: toml::Table = "[transfer]\nlambda = 0.5\n".parse().unwrap();
        let s = section_with(&t, "transfer", &[("seed", int(1))]).unwrap();
        assert_eq!(s["seed"].as_integer(), Some(1));
    }
}
