//! Piece storage backends: a map for simulated nodes, a directory of
//! files for daemons.
//!
//! The at-rest layout is one piece per entry under the key
//! `<40-hex-chunk-id>.<index>`, holding a 10-byte header
//! (`[u64 original_len][u8 n][u8 k]`, big-endian) followed by the piece
//! payload. A scan of the entries alone rebuilds the occupancy numbers.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use shardstore_core::erasure::{CodedPiece, CodingParams};
use shardstore_core::ChunkId;

/// Header bytes ahead of each stored piece payload.
pub const PIECE_HEADER_LEN: u64 = 10;

pub trait PieceStore: Send {
    fn put(&mut self, piece: &CodedPiece) -> io::Result<()>;
    fn get(&self, chunk_id: ChunkId, index: u8) -> io::Result<Option<CodedPiece>>;
    /// Removes a piece; false when it was not there.
    fn delete(&mut self, chunk_id: ChunkId, index: u8) -> io::Result<bool>;
    fn piece_count(&self) -> u64;
    /// Payload bytes at rest, excluding headers.
    fn payload_bytes(&self) -> u64;
    /// (chunk id, index, payload length) of every piece held.
    fn scan(&self) -> io::Result<Vec<(ChunkId, u8, u64)>>;
}

/// Volatile store for simulated nodes.
#[derive(Debug, Default)]
pub struct MemoryStore {
    pieces: BTreeMap<(ChunkId, u8), CodedPiece>,
    payload_bytes: u64,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl PieceStore for MemoryStore {
    fn put(&mut self, piece: &CodedPiece) -> io::Result<()> {
        let key = (piece.chunk_id(), piece.index());
        if let Some(old) = self.pieces.insert(key, piece.clone()) {
            self.payload_bytes -= old.payload().len() as u64;
        }
        self.payload_bytes += piece.payload().len() as u64;
        Ok(())
    }

    fn get(&self, chunk_id: ChunkId, index: u8) -> io::Result<Option<CodedPiece>> {
        Ok(self.pieces.get(&(chunk_id, index)).cloned())
    }

    fn delete(&mut self, chunk_id: ChunkId, index: u8) -> io::Result<bool> {
        match self.pieces.remove(&(chunk_id, index)) {
            Some(old) => {
                self.payload_bytes -= old.payload().len() as u64;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    fn piece_count(&self) -> u64 {
        self.pieces.len() as u64
    }

    fn payload_bytes(&self) -> u64 {
        self.payload_bytes
    }

    fn scan(&self) -> io::Result<Vec<(ChunkId, u8, u64)>> {
        Ok(self
            .pieces
            .iter()
            .map(|(&(id, idx), p)| (id, idx, p.payload().len() as u64))
            .collect())
    }
}

/// One file per piece under a spool directory.
pub struct DirStore {
    dir: PathBuf,
    piece_count: u64,
    payload_bytes: u64,
}

impl DirStore {
    /// Opens (creating if needed) a spool directory and rebuilds the
    /// occupancy counters from the entries present.
    pub fn open(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let mut store = DirStore { dir: dir.to_path_buf(), piece_count: 0, payload_bytes: 0 };
        for entry in store.scan()? {
            store.piece_count += 1;
            store.payload_bytes += entry.2;
        }
        Ok(store)
    }

    fn path_of(&self, chunk_id: ChunkId, index: u8) -> PathBuf {
        self.dir.join(format!("{}.{index}", chunk_id.to_hex()))
    }

    fn parse_name(name: &str) -> Option<(ChunkId, u8)> {
        let (hex, idx) = name.split_once('.')?;
        Some((ChunkId::from_hex(hex)?, idx.parse().ok()?))
    }
}

impl PieceStore for DirStore {
    fn put(&mut self, piece: &CodedPiece) -> io::Result<()> {
        let path = self.path_of(piece.chunk_id(), piece.index());
        let existing = match fs::metadata(&path) {
            Ok(m) => Some(m.len().saturating_sub(PIECE_HEADER_LEN)),
            Err(_) => None,
        };

        let mut buf = Vec::with_capacity(10 + piece.payload().len());
        buf.extend_from_slice(&piece.original_len().to_be_bytes());
        buf.push(piece.params().n());
        buf.push(piece.params().k());
        buf.extend_from_slice(piece.payload());

        // Write-then-rename so a crash never leaves a torn piece.
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
        fs::rename(&tmp, &path)?;

        if let Some(old) = existing {
            self.payload_bytes -= old;
        } else {
            self.piece_count += 1;
        }
        self.payload_bytes += piece.payload().len() as u64;
        Ok(())
    }

    fn get(&self, chunk_id: ChunkId, index: u8) -> io::Result<Option<CodedPiece>> {
        let path = self.path_of(chunk_id, index);
        let mut f = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        let mut buf = Vec::new();
        f.read_to_end(&mut buf)?;
        if buf.len() < 10 {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "piece shorter than header"));
        }
        let original_len = u64::from_be_bytes(buf[..8].try_into().unwrap());
        let params = CodingParams::new(buf[8], buf[9])
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        let piece = CodedPiece::new(chunk_id, index, params, original_len, buf[10..].to_vec())
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        Ok(Some(piece))
    }

    fn delete(&mut self, chunk_id: ChunkId, index: u8) -> io::Result<bool> {
        let path = self.path_of(chunk_id, index);
        let existing = match fs::metadata(&path) {
            Ok(m) => m.len().saturating_sub(PIECE_HEADER_LEN),
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(false),
            Err(e) => return Err(e),
        };
        fs::remove_file(&path)?;
        self.piece_count -= 1;
        self.payload_bytes -= existing;
        Ok(true)
    }

    fn piece_count(&self) -> u64 {
        self.piece_count
    }

    fn payload_bytes(&self) -> u64 {
        self.payload_bytes
    }

    fn scan(&self) -> io::Result<Vec<(ChunkId, u8, u64)>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            let Some((id, idx)) = Self::parse_name(name) else { continue };
            let len = entry.metadata()?.len().saturating_sub(PIECE_HEADER_LEN);
            out.push((id, idx, len));
        }
        out.sort();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use shardstore_core::erasure::encode_chunk;

    fn pieces() -> Vec<CodedPiece> {
        encode_chunk(b"piece store payload bytes", CodingParams::new(4, 2).unwrap()).unwrap()
    }

    fn exercise(store: &mut dyn PieceStore) {
        let pieces = pieces();
        let id = pieces[0].chunk_id();
        for p in &pieces {
            store.put(p).unwrap();
        }
        assert_eq!(store.piece_count(), 4);
        let expect: u64 = pieces.iter().map(|p| p.payload().len() as u64).sum();
        assert_eq!(store.payload_bytes(), expect);

        // Idempotent overwrite does not double-count.
        store.put(&pieces[1]).unwrap();
        assert_eq!(store.piece_count(), 4);
        assert_eq!(store.payload_bytes(), expect);

        let back = store.get(id, 2).unwrap().unwrap();
        assert_eq!(&back, &pieces[2]);
        assert!(store.get(id, 9).unwrap().is_none());

        assert!(store.delete(id, 2).unwrap());
        assert!(!store.delete(id, 2).unwrap());
        assert_eq!(store.piece_count(), 3);
        assert_eq!(store.scan().unwrap().len(), 3);
    }

    #[test]
    fn memory_store_contract() {
        exercise(&mut MemoryStore::new());
    }

    #[test]
    fn dir_store_contract() {
        let dir = tempfile::tempdir().unwrap();
        exercise(&mut DirStore::open(dir.path()).unwrap());
    }

    #[test]
    fn dir_store_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let pieces = pieces();
        {
            let mut store = DirStore::open(dir.path()).unwrap();
            for p in &pieces {
                store.put(p).unwrap();
            }
        }
        let store = DirStore::open(dir.path()).unwrap();
        assert_eq!(store.piece_count(), 4);
        let expect: u64 = pieces.iter().map(|p| p.payload().len() as u64).sum();
        assert_eq!(store.payload_bytes(), expect);
        assert_eq!(store.get(pieces[3].chunk_id(), 3).unwrap().unwrap(), pieces[3]);
    }
}
