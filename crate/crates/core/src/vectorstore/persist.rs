//! Single-file index format, little-endian throughout.
//!
//! ```text
//! magic      8 bytes  "CQAVIDX\0"
//! version    u32
//! dims       u32
//! count      u64
//! metric     u8       default metric (0 cosine, 1 euclidean, 2 manhattan)
//! checksum   u32      CRC-32 of the payload
//! payload    count records:
//!              chunk_id, source, contract, clause, text   (u32 length + UTF-8)
//!              overlap prefix_len, suffix_len             (u32 each)
//!              vector                                     (dims x f64)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Metric, Record, VectorStore, VectorStoreError};
use crate::ingest::{ChunkMetadata, Overlap};

pub const MAGIC: [u8; 8] = *b"CQAVIDX\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8 + 1 + 4;

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], VectorStoreError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| VectorStoreError::CorruptIndexFile("truncated payload".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, VectorStoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, VectorStoreError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, VectorStoreError> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| VectorStoreError::CorruptIndexFile("invalid UTF-8 in record".into()))
    }
}

impl VectorStore {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        for (idx, r) in self.records.iter().enumerate() {
            put_str(&mut payload, &r.chunk_id);
            put_str(&mut payload, &r.metadata.source);
            put_str(&mut payload, &r.metadata.contract);
            put_str(&mut payload, &r.metadata.clause);
            put_str(&mut payload, &r.text);
            payload.extend_from_slice(&(r.overlap.prefix_len as u32).to_le_bytes());
            payload.extend_from_slice(&(r.overlap.suffix_len as u32).to_le_bytes());
            for v in self.vector(idx) {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        out.push(self.default_metric.to_byte());
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VectorStoreError> {
        let corrupt = |m: &str| VectorStoreError::CorruptIndexFile(m.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(corrupt("file shorter than header"));
        }
        if bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut header = Reader { buf: bytes, pos: 8 };
        let version = header.u32()?;
        if version != FORMAT_VERSION {
            return Err(corrupt(&format!("unsupported format version {version}")));
        }
        let dims = header.u32()? as usize;
        let count = u64::from_le_bytes(header.take(8)?.try_into().unwrap()) as usize;
        let metric = Metric::from_byte(header.take(1)?[0]).ok_or_else(|| corrupt("unknown metric"))?;
        let checksum = header.u32()?;
        let payload = &bytes[HEADER_LEN..];
        if crc32fast::hash(payload) != checksum {
            return Err(corrupt("checksum mismatch"));
        }
        if dims == 0 {
            return Err(corrupt("zero dimensions"));
        }

        let mut store = VectorStore::with_metric(dims, metric);
        let mut r = Reader { buf: payload, pos: 0 };
        for _ in 0..count {
            let chunk_id = r.string()?;
            let metadata = ChunkMetadata {
                source: r.string()?,
                contract: r.string()?,
                clause: r.string()?,
            };
            let text = r.string()?;
            let overlap = Overlap {
                prefix_len: r.u32()? as usize,
                suffix_len: r.u32()? as usize,
            };
            if overlap.prefix_len + overlap.suffix_len > text.len() {
                return Err(corrupt("overlap exceeds text"));
            }
            for _ in 0..dims {
                let v = r.f64()?;
                if !v.is_finite() {
                    return Err(corrupt("non-finite vector value"));
                }
                store.vectors.push(v);
            }
            if store.by_id.insert(chunk_id.clone(), store.records.len()).is_some() {
                return Err(corrupt("duplicate chunk id"));
            }
            store.records.push(Record {
                chunk_id,
                text,
                metadata,
                overlap,
            });
        }
        if r.pos != payload.len() {
            return Err(corrupt("trailing bytes after last record"));
        }
        Ok(store)
    }

    /// Writes a snapshot atomically (temp file + rename).
    pub fn persist(&self, path: &Path) -> Result<(), VectorStoreError> {
        let io = |e: std::io::Error| VectorStoreError::Io(format!("{}: {e}", path.display()));
        let tmp = path.with_extension("tmp");
        let mut file = fs::File::create(&tmp).map_err(io)?;
        file.write_all(&self.to_bytes()).map_err(io)?;
        file.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, VectorStoreError> {
        let bytes = fs::read(path).map_err(|e| VectorStoreError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
