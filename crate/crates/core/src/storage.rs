//! Per-node key-value store backed by a single append-only log.
//!
//! Record layout: `[u32 key_len][u32 value_len][key][value][u32 crc32]`,
//! integers big-endian, the checksum covering everything before it. The log
//! is replayed into an in-memory index on open; a torn tail left by a crash
//! is truncated. The log is rewritten once it is more than twice as large as
//! the live data.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Weak};
use std::time::Duration;

use bytes::Bytes;
use parking_lot::Mutex;

pub const MAX_KEY: usize = 1024;
pub const MAX_VALUE: usize = 4 * 1024 * 1024;
pub const LOG_FILE: &str = "store.log";
pub const ASYNC_FLUSH_INTERVAL: Duration = Duration::from_millis(50);
const COMPACT_MIN_BYTES: u64 = 1024 * 1024;
const HEADER: usize = 8;
const TRAILER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Durability {
    /// Every set is flushed and synced before it returns.
    #[default]
    Sync,
    /// Sets are buffered and synced by a background flusher.
    Async,
}

impl std::str::FromStr for Durability {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sync" => Ok(Durability::Sync),
            "async" => Ok(Durability::Async),
            other => Err(format!("unknown durability mode {other:?}")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StorageError {
    #[error("key of {0} bytes exceeds the 1 KiB limit")]
    KeyTooLarge(usize),
    #[error("value of {0} bytes exceeds the 4 MiB limit")]
    ValueTooLarge(usize),
    #[error("storage I/O: {0}")]
    Io(#[from] io::Error),
}

struct Log {
    path: PathBuf,
    writer: BufWriter<File>,
    bytes: u64,
    dirty: bool,
}

struct Inner {
    index: HashMap<Vec<u8>, Bytes>,
    live_bytes: u64,
    log: Option<Log>,
}

pub struct Storage {
    inner: Mutex<Inner>,
    durability: Durability,
}

fn record_len(key: usize, value: usize) -> u64 {
    (HEADER + key + value + TRAILER) as u64
}

fn encode(key: &[u8], value: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + key.len() + value.len() + TRAILER);
    out.extend_from_slice(&(key.len() as u32).to_be_bytes());
    out.extend_from_slice(&(value.len() as u32).to_be_bytes());
    out.extend_from_slice(key);
    out.extend_from_slice(value);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    out
}

/// Parses records until the first incomplete or corrupt one. Returns the
/// surviving entries in log order and the length of the valid prefix.
fn replay(data: &[u8]) -> (Vec<(&[u8], &[u8])>, usize) {
    let mut records = Vec::new();
    let mut at = 0;
    while data.len() - at >= HEADER {
        let klen = u32::from_be_bytes(data[at..at + 4].try_into().unwrap()) as usize;
        let vlen = u32::from_be_bytes(data[at + 4..at + 8].try_into().unwrap()) as usize;
        if klen > MAX_KEY || vlen > MAX_VALUE {
            break;
        }
        let end = at + HEADER + klen + vlen + TRAILER;
        if end > data.len() {
            break;
        }
        let body = &data[at..end - TRAILER];
        let crc = u32::from_be_bytes(data[end - TRAILER..end].try_into().unwrap());
        if crc32fast::hash(body) != crc {
            break;
        }
        let key = &body[HEADER..HEADER + klen];
        records.push((key, &body[HEADER + klen..]));
        at = end;
    }
    (records, at)
}

impl Storage {
    /// Store that lives only in memory. Used by tests and ephemeral nodes.
    pub fn in_memory() -> Arc<Self> {
        Arc::new(Self {
            inner: Mutex::new(Inner {
                index: HashMap::new(),
                live_bytes: 0,
                log: None,
            }),
            durability: Durability::Sync,
        })
    }

    /// Opens (or creates) the store under `dir`.
    pub fn open(dir: &Path, durability: Durability) -> Result<Arc<Self>, StorageError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOG_FILE);
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&path)?;
        let mut data = Vec::new();
        file.read_to_end(&mut data)?;
        let (records, valid) = replay(&data);
        let mut index = HashMap::new();
        for (key, value) in records {
            index.insert(key.to_vec(), Bytes::copy_from_slice(value));
        }
        if valid < data.len() {
            file.set_len(valid as u64)?;
            file.sync_data()?;
        }
        let live_bytes = index
            .iter()
            .map(|(k, v)| record_len(k.len(), v.len()))
            .sum();
        let storage = Arc::new(Self {
            inner: Mutex::new(Inner {
                index,
                live_bytes,
                log: Some(Log {
                    path,
                    writer: BufWriter::with_capacity(256 * 1024, file),
                    bytes: valid as u64,
                    dirty: false,
                }),
            }),
            durability,
        });
        if durability == Durability::Async {
            spawn_flusher(Arc::downgrade(&storage));
        }
        Ok(storage)
    }

    pub fn durability(&self) -> Durability {
        self.durability
    }

    pub fn get(&self, key: &[u8]) -> Option<Bytes> {
        self.inner.lock().index.get(key).cloned()
    }

    pub fn set(&self, key: &[u8], value: &[u8]) -> Result<(), StorageError> {
        if key.len() > MAX_KEY {
            return Err(StorageError::KeyTooLarge(key.len()));
        }
        if value.len() > MAX_VALUE {
            return Err(StorageError::ValueTooLarge(value.len()));
        }
        let mut inner = self.inner.lock();
        let inner = &mut *inner;
        if let Some(log) = inner.log.as_mut() {
            log.writer.write_all(&encode(key, value))?;
            log.bytes += record_len(key.len(), value.len());
            match self.durability {
                Durability::Sync => {
                    log.writer.flush()?;
                    log.writer.get_ref().sync_data()?;
                }
                Durability::Async => log.dirty = true,
            }
        }
        let added = record_len(key.len(), value.len());
        match inner.index.insert(key.to_vec(), Bytes::copy_from_slice(value)) {
            Some(old) => {
                inner.live_bytes = inner.live_bytes - record_len(key.len(), old.len()) + added
            }
            None => inner.live_bytes += added,
        }
        let needs_compaction = inner
            .log
            .as_ref()
            .is_some_and(|log| log.bytes > COMPACT_MIN_BYTES && log.bytes > 2 * inner.live_bytes);
        if needs_compaction {
            compact(inner)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pushes buffered writes to disk.
    pub fn flush(&self) -> Result<(), StorageError> {
        let mut inner = self.inner.lock();
        if let Some(log) = inner.log.as_mut() {
            if log.dirty {
                log.writer.flush()?;
                log.writer.get_ref().sync_data()?;
                log.dirty = false;
            }
        }
        Ok(())
    }

    /// Size of the on-disk log in bytes.
    pub fn log_bytes(&self) -> u64 {
        self.inner.lock().log.as_ref().map_or(0, |log| log.bytes)
    }
}

impl Drop for Storage {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

fn compact(inner: &mut Inner) -> Result<(), StorageError> {
    let log = inner.log.as_mut().expect("compaction needs a log");
    log.writer.flush()?;
    let tmp_path = log.path.with_extension("compact");
    let mut tmp = BufWriter::new(File::create(&tmp_path)?);
    let mut written = 0u64;
    for (key, value) in &inner.index {
        tmp.write_all(&encode(key, value))?;
        written += record_len(key.len(), value.len());
    }
    tmp.flush()?;
    tmp.get_ref().sync_all()?;
    drop(tmp);
    fs::rename(&tmp_path, &log.path)?;
    if let Some(dir) = log.path.parent() {
        if let Ok(dir) = File::open(dir) {
            let _ = dir.sync_all();
        }
    }
    let file = OpenOptions::new().append(true).open(&log.path)?;
    log.writer = BufWriter::with_capacity(256 * 1024, file);
    log.bytes = written;
    log.dirty = false;
    Ok(())
}

fn spawn_flusher(storage: Weak<Storage>) {
    std::thread::Builder::new()
        .name("radon-store-flush".into())
        .spawn(move || loop {
            std::thread::sleep(ASYNC_FLUSH_INTERVAL);
            let Some(storage) = storage.upgrade() else {
                return;
            };
            if let Err(err) = storage.flush() {
                tracing::error!("store flush failed: {err}");
            }
        })
        .expect("spawn flusher thread");
}

/// Reads the live entries of the store under `dir` without modifying it,
/// sorted by key.
pub fn dump(dir: &Path) -> Result<Vec<(Vec<u8>, Vec<u8>)>, StorageError> {
    let data = fs::read(dir.join(LOG_FILE))?;
    let (records, _) = replay(&data);
    let mut latest: HashMap<&[u8], &[u8]> = HashMap::new();
    for (key, value) in records {
        latest.insert(key, value);
    }
    let mut entries: Vec<_> = latest
        .into_iter()
        .map(|(k, v)| (k.to_vec(), v.to_vec()))
        .collect();
    entries.sort();
    Ok(entries)
}
