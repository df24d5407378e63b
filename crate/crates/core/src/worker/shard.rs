//! Durable per-worker checkpoint shards.
//!
//! One file per checkpoint, `ckpt-<id as 16 hex digits>.shard`:
//!
//! ```text
//! magic   8 bytes  "GFSHARD1"
//! count   u64 LE
//! entry*  object id u64 LE | version u64 LE | byte length u64 LE | crc32 u32 LE | payload
//! ```
//!
//! The file is written under a `.tmp` name, synced, then renamed into
//! place and the directory synced, so a crash at any byte leaves earlier
//! shards untouched and never exposes a partial file under the final name.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::LogicalObjectId;
use crate::transport::Binding;

const MAGIC: &[u8; 8] = b"GFSHARD1";
const ENTRY_HEADER: usize = 28;

#[derive(Debug, Error)]
pub enum ShardError {
    #[error("shard i/o: {0}")]
    Io(#[from] io::Error),
    #[error("no shard for checkpoint {0}")]
    Missing(u64),
    #[error("shard for checkpoint {checkpoint} is corrupt: {reason}")]
    Corrupt { checkpoint: u64, reason: String },
}

/// Shard contents: object → (version, payload).
pub type ShardContents = BTreeMap<LogicalObjectId, (u64, Vec<f64>)>;

#[derive(Clone, Debug)]
pub struct ShardStore {
    dir: PathBuf,
}

/// Writer that fails once `limit` bytes have gone through, standing in
/// for a process killed mid-write.
pub struct FailAfter<W> {
    inner: W,
    remaining: usize,
}

impl<W: Write> FailAfter<W> {
    pub fn new(inner: W, limit: usize) -> Self {
        FailAfter { inner, remaining: limit }
    }
}

impl<W: Write> Write for FailAfter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if self.remaining == 0 {
            return Err(io::Error::other("injected crash"));
        }
        let n = buf.len().min(self.remaining);
        let n = self.inner.write(&buf[..n])?;
        self.remaining -= n;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn encode_entries(entries: &[(Binding, &[f64])]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (b, payload) in entries {
        let mut bytes = Vec::with_capacity(payload.len() * 8);
        for v in *payload {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&b.object.0.to_le_bytes());
        out.extend_from_slice(&b.version.to_le_bytes());
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(&bytes).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    out
}

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().unwrap())
}

impl ShardStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, ShardError> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(ShardStore { dir: dir.as_ref().to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, checkpoint: u64) -> PathBuf {
        self.dir.join(format!("ckpt-{checkpoint:016x}.shard"))
    }

    /// Durably writes a shard; returns the bytes written.
    pub fn save(&self, checkpoint: u64, entries: &[(Binding, &[f64])]) -> Result<u64, ShardError> {
        let bytes = encode_entries(entries);
        let tmp = self.path(checkpoint).with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.path(checkpoint))?;
        File::open(&self.dir)?.sync_all()?;
        Ok(bytes.len() as u64)
    }

    /// Same as [`save`](Self::save) but the write dies after `limit` bytes.
    /// On failure the temporary file is left behind, as a crash would.
    pub fn save_interrupted(
        &self,
        checkpoint: u64,
        entries: &[(Binding, &[f64])],
        limit: usize,
    ) -> Result<u64, ShardError> {
        let bytes = encode_entries(entries);
        let tmp = self.path(checkpoint).with_extension("tmp");
        {
            let mut w = BufWriter::new(FailAfter::new(File::create(&tmp)?, limit));
            w.write_all(&bytes)?;
            w.flush()?;
            w.into_inner().map_err(|e| e.into_error())?.inner.sync_all()?;
        }
        fs::rename(&tmp, self.path(checkpoint))?;
        Ok(bytes.len() as u64)
    }

    pub fn load(&self, checkpoint: u64) -> Result<ShardContents, ShardError> {
        let mut raw = Vec::new();
        match File::open(self.path(checkpoint)) {
            Ok(mut f) => f.read_to_end(&mut raw)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(ShardError::Missing(checkpoint)),
            Err(e) => return Err(e.into()),
        };
        let corrupt = |reason: &str| ShardError::Corrupt { checkpoint, reason: reason.to_string() };
        if raw.len() < 16 || &raw[..8] != MAGIC {
            return Err(corrupt("bad header"));
        }
        let count = le_u64(&raw[8..16]);
        let mut pos = 16;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            if raw.len() - pos < ENTRY_HEADER {
                return Err(corrupt("truncated entry header"));
            }
            let id = le_u64(&raw[pos..pos + 8]);
            let version = le_u64(&raw[pos + 8..pos + 16]);
            let len = le_u64(&raw[pos + 16..pos + 24]) as usize;
            let crc = u32::from_le_bytes(raw[pos + 24..pos + 28].try_into().unwrap());
            pos += ENTRY_HEADER;
            if raw.len() - pos < len || len % 8 != 0 {
                return Err(corrupt("truncated payload"));
            }
            let body = &raw[pos..pos + len];
            if crc32fast::hash(body) != crc {
                return Err(corrupt("checksum mismatch"));
            }
            let payload = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            out.insert(LogicalObjectId(id), (version, payload));
            pos += len;
        }
        if pos != raw.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(out)
    }

    /// Checkpoint ids with a complete shard file, ascending.
    pub fn checkpoints(&self) -> Result<Vec<u64>, ShardError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(hex) = name.strip_prefix("ckpt-").and_then(|s| s.strip_suffix(".shard")) {
                if let Ok(id) = u64::from_str_radix(hex, 16) {
                    out.push(id);
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entries() -> Vec<(Binding, Vec<f64>)> {
        (0..5u64)
            .map(|i| (Binding { object: LogicalObjectId(i), version: i + 1 }, vec![i as f64 * 0.5; 7]))
            .collect()
    }

    fn borrowed(e: &[(Binding, Vec<f64>)]) -> Vec<(Binding, &[f64])> {
        e.iter().map(|(b, p)| (*b, p.as_slice())).collect()
    }

    #[test]
    fn save_restart_restore() {
        let dir = tempfile::tempdir().unwrap();
        let e = entries();
        ShardStore::open(dir.path()).unwrap().save(3, &borrowed(&e)).unwrap();
        let reopened = ShardStore::open(dir.path()).unwrap();
        let got = reopened.load(3).unwrap();
        for (b, p) in &e {
            assert_eq!(got[&b.object], (b.version, p.clone()));
        }
        assert_eq!(reopened.checkpoints().unwrap(), vec![3]);
    }

    #[test]
    fn missing_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let s = ShardStore::open(dir.path()).unwrap();
        assert!(matches!(s.load(9), Err(ShardError::Missing(9))));
    }

    #[test]
    fn corrupt_checksum_detected() {
        let dir = tempfile::tempdir().unwrap();
        let s = ShardStore::open(dir.path()).unwrap();
        s.save(1, &borrowed(&entries())).unwrap();
        let path = s.path(1);
        let mut raw = fs::read(&path).unwrap();
        let last = raw.len() - 1;
        raw[last] ^= 0xFF;
        fs::write(&path, raw).unwrap();
        assert!(matches!(s.load(1), Err(ShardError::Corrupt { .. })));
    }

    #[test]
    fn interrupted_save_leaves_tmp_only() {
        let dir = tempfile::tempdir().unwrap();
        let s = ShardStore::open(dir.path()).unwrap();
        assert!(s.save_interrupted(2, &borrowed(&entries()), 10).is_err());
        assert!(s.checkpoints().unwrap().is_empty());
    }
}
