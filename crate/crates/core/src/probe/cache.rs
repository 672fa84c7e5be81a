//! Append-only on-disk store of probe results.
//!
//! Each line holds `{"key", "checksum", "record"}` where `record` is the
//! serialized [`ProbeResult`] and `checksum` its SHA-256. Lines that fail to
//! parse or verify are counted and treated as cache misses. A later line for
//! the same key wins.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::ProbeResult;
use crate::error::{Error, Result};
use crate::io::sha256_hex;

/// Identity of one probe: model, post-envelope prompt, token budget and
/// stop set.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn new(model: &str, prompt: &str, max_new_tokens: u32, stop: &[String]) -> Self {
        let tuple = serde_json::json!([model, prompt, max_new_tokens, stop]);
        CacheKey(sha256_hex(tuple.to_string().as_bytes()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    checksum: String,
    record: String,
}

pub struct CacheStore {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, ProbeResult>>,
    writer: Mutex<Option<File>>,
    corrupt: usize,
}

impl CacheStore {
    /// Opens (creating if needed) a cache file.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        let mut corrupt = 0;
        if path.exists() {
            let file = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                match decode_line(&line) {
                    Some((key, result)) => {
                        entries.insert(key, result);
                    }
                    None => corrupt += 1,
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: Some(path.to_owned()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
            corrupt,
        })
    }

    /// A cache that lives only as long as the process.
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
            corrupt: 0,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &CacheKey) -> Option<ProbeResult> {
        self.entries.read().unwrap().get(key.as_str()).cloned()
    }

    pub fn put(&self, key: &CacheKey, result: &ProbeResult) -> Result<()> {
        let record = serde_json::to_string(result).map_err(|e| Error::json("cache record", e))?;
        let line = CacheLine {
            key: key.as_str().to_owned(),
            checksum: sha256_hex(record.as_bytes()),
            record,
        };
        let mut text = serde_json::to_string(&line).map_err(|e| Error::json("cache line", e))?;
        text.push('\n');
        {
            let mut writer = self.writer.lock().unwrap();
            if let Some(file) = writer.as_mut() {
                let path = self.path.as_deref().unwrap_or(Path::new("<cache>"));
                file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
                file.flush().map_err(|e| Error::io(path, e))?;
            }
        }
        self.entries
            .write()
            .unwrap()
            .insert(key.as_str().to_owned(), result.clone());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of lines skipped at open time because they failed to verify.
    pub fn corrupt_records(&self) -> usize {
        self.corrupt
    }
}

fn decode_line(line: &str) -> Option<(String, ProbeResult)> {
    let parsed: CacheLine = serde_json::from_str(line).ok()?;
    if sha256_hex(parsed.record.as_bytes()) != parsed.checksum {
        return None;
    }
    let result: ProbeResult = serde_json::from_str(&parsed.record).ok()?;
    result.verify().ok()?;
    Some((parsed.key, result))
}
