//! Length-prefixed, checksummed append log.
//!
//! Each record is `[u32 length][u8 kind][payload][u32 crc32]`, little-endian.
//! `length` counts the payload bytes only; the CRC covers the kind byte and
//! the payload. Replay stops at the first record that is truncated, fails its
//! checksum or carries an unknown kind, and reports that record's offset.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const HEADER_LEN: usize = 5;
const TRAILER_LEN: usize = 4;
/// Upper bound on a single payload; anything larger is treated as corruption.
pub const MAX_PAYLOAD: u32 = 16 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum RecordKind {
    Enqueued = 1,
    Delivered = 2,
    Acked = 3,
    Allocation = 4,
}

impl RecordKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(RecordKind::Enqueued),
            2 => Some(RecordKind::Delivered),
            3 => Some(RecordKind::Acked),
            4 => Some(RecordKind::Allocation),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub offset: u64,
    pub kind: RecordKind,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("corrupt journal at offset {offset}: {reason} ({discarded_bytes} bytes discarded)")]
pub struct CorruptJournal {
    pub offset: u64,
    pub reason: String,
    pub discarded_bytes: u64,
}

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal storage failure: {0}")]
    Storage(#[from] io::Error),
    #[error(transparent)]
    Corrupt(#[from] CorruptJournal),
}

pub fn encode_record(kind: RecordKind, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + TRAILER_LEN);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(payload);
    let mut crc = crc32fast::Hasher::new();
    crc.update(&[kind as u8]);
    crc.update(payload);
    out.extend_from_slice(&crc.finalize().to_le_bytes());
    out
}

/// Decodes every valid record up to the first damaged one.
pub fn decode_records(bytes: &[u8]) -> (Vec<Record>, Option<CorruptJournal>) {
    let mut records = Vec::new();
    let mut pos = 0usize;
    while pos < bytes.len() {
        let corrupt = |reason: &str| CorruptJournal {
            offset: pos as u64,
            reason: reason.to_string(),
            discarded_bytes: (bytes.len() - pos) as u64,
        };
        let rest = &bytes[pos..];
        if rest.len() < HEADER_LEN + TRAILER_LEN {
            return (records, Some(corrupt("truncated record header")));
        }
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap());
        if len > MAX_PAYLOAD {
            return (records, Some(corrupt("record length out of range")));
        }
        let total = HEADER_LEN + len as usize + TRAILER_LEN;
        if rest.len() < total {
            return (records, Some(corrupt("truncated record body")));
        }
        let kind_byte = rest[4];
        let payload = &rest[HEADER_LEN..HEADER_LEN + len as usize];
        let stored = u32::from_le_bytes(rest[total - TRAILER_LEN..total].try_into().unwrap());
        let mut crc = crc32fast::Hasher::new();
        crc.update(&[kind_byte]);
        crc.update(payload);
        if crc.finalize() != stored {
            return (records, Some(corrupt("checksum mismatch")));
        }
        let Some(kind) = RecordKind::from_byte(kind_byte) else {
            return (records, Some(corrupt("unknown record kind")));
        };
        records.push(Record { offset: pos as u64, kind, payload: payload.to_vec() });
        pos += total;
    }
    (records, None)
}

/// Byte storage behind a journal.
pub trait JournalStore: Send {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()>;
    fn read_all(&mut self) -> io::Result<Vec<u8>>;
    fn truncate(&mut self, len: u64) -> io::Result<()>;
}

/// File-backed store. With `sync` set every append is followed by fsync.
pub struct FileStore {
    file: File,
    sync: bool,
}

impl FileStore {
    pub fn open(path: impl AsRef<Path>, sync: bool) -> io::Result<Self> {
        let file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        Ok(Self { file, sync })
    }
}

impl JournalStore for FileStore {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.file.write_all(bytes)?;
        if self.sync {
            self.file.sync_data()?;
        }
        Ok(())
    }

    fn read_all(&mut self) -> io::Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.file.seek(SeekFrom::Start(0))?;
        self.file.read_to_end(&mut buf)?;
        Ok(buf)
    }

    fn truncate(&mut self, len: u64) -> io::Result<()> {
        self.file.set_len(len)?;
        if self.sync {
            self.file.sync_all()?;
        }
        Ok(())
    }
}

/// In-memory store; clones share the same bytes, so a store outlives the
/// journal that wrote to it (which is how crashes are simulated).
#[derive(Debug, Clone, Default)]
pub struct MemStore {
    bytes: Arc<Mutex<Vec<u8>>>,
    fail_appends: Arc<Mutex<bool>>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.bytes.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bytes(&self) -> Vec<u8> {
        self.bytes.lock().clone()
    }

    /// Drops the last `n` bytes, as a torn write would.
    pub fn tear_tail(&self, n: usize) {
        let mut b = self.bytes.lock();
        let keep = b.len().saturating_sub(n);
        b.truncate(keep);
    }

    /// XORs one byte in place.
    pub fn flip_byte(&self, offset: usize) {
        let mut b = self.bytes.lock();
        if let Some(x) = b.get_mut(offset) {
            *x ^= 0xff;
        }
    }

    /// Makes subsequent appends fail with an I/O error.
    pub fn set_failing(&self, failing: bool) {
        *self.fail_appends.lock() = failing;
    }
}

impl JournalStore for MemStore {
    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        if *self.fail_appends.lock() {
            return Err(io::Error::other("injected append failure"));
        }
        self.bytes.lock().extend_from_slice(bytes);
        Ok(())
    }

    fn read_all(&mut self) -> io::Result<Vec<u8>> {
        Ok(self.bytes.lock().clone())
    }

    fn truncate(&mut self, len: u64) -> io::Result<()> {
        self.bytes.lock().truncate(len as usize);
        Ok(())
    }
}

pub struct Journal {
    store: Box<dyn JournalStore>,
}

/// Result of replaying a journal from the start.
#[derive(Debug, Default)]
pub struct Replay {
    pub records: Vec<Record>,
    pub corruption: Option<CorruptJournal>,
}

impl Journal {
    /// Opens a journal, replays it and cuts any damaged tail so later appends
    /// land after the last valid record.
    pub fn open(mut store: Box<dyn JournalStore>) -> Result<(Self, Replay), JournalError> {
        let bytes = store.read_all()?;
        let (records, corruption) = decode_records(&bytes);
        if let Some(c) = &corruption {
            store.truncate(c.offset)?;
        }
        Ok((Self { store }, Replay { records, corruption }))
    }

    pub fn append(&mut self, kind: RecordKind, payload: &[u8]) -> Result<(), JournalError> {
        self.store.append(&encode_record(kind, payload))?;
        Ok(())
    }
}

/// Little-endian payload writer.
#[derive(Default)]
pub(crate) struct PayloadWriter(Vec<u8>);

impl PayloadWriter {
    pub fn u32(mut self, v: u32) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u64(mut self, v: u64) -> Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn bytes(self, v: &[u8]) -> Self {
        let mut s = self.u32(v.len() as u32);
        s.0.extend_from_slice(v);
        s
    }
    pub fn finish(self) -> Vec<u8> {
        self.0
    }
}

pub(crate) struct PayloadReader<'a>(&'a [u8]);

impl<'a> PayloadReader<'a> {
    pub fn new(b: &'a [u8]) -> Self {
        Self(b)
    }
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.0.len() < n {
            return None;
        }
        let (h, t) = self.0.split_at(n);
        self.0 = t;
        Some(h)
    }
    pub fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    pub fn bytes(&mut self) -> Option<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}
