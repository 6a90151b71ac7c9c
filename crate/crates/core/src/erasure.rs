//! Systematic Reed-Solomon coding over GF(2^8).
//!
//! A chunk payload is split into `k` data pieces of ceil(len / k) bytes
//! (the last one zero-padded) and expanded to `n` coded pieces such that
//! any `k` of them reconstruct the payload. The generator matrix is a
//! Vandermonde matrix normalised so its top k x k block is the identity:
//! pieces 0..k carry the payload verbatim and decoding from them is a
//! straight concatenation.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::chunking::ChunkId;
use crate::gf256;

/// Coding geometry: `n` pieces total, any `k` sufficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CodingParams {
    n: u8,
    k: u8,
}

impl CodingParams {
    pub fn new(n: u8, k: u8) -> Result<Self, CodingError> {
        if k == 0 || k > n {
            return Err(CodingError::InvalidParams { n, k });
        }
        Ok(CodingParams { n, k })
    }

    pub fn n(&self) -> u8 {
        self.n
    }

    pub fn k(&self) -> u8 {
        self.k
    }
}

/// Bytes stored for a chunk of `len` bytes: `n` pieces of ceil(len / k).
pub fn expansion(len: u64, params: CodingParams) -> u64 {
    params.n as u64 * len.div_ceil(params.k as u64)
}

/// Length of each coded piece for a chunk of `original_len` bytes.
pub fn piece_len(original_len: u64, params: CodingParams) -> u64 {
    original_len.div_ceil(params.k as u64)
}

/// One coded piece of a chunk. `index` < k means a verbatim data slice,
/// higher indices are parity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodedPiece {
    chunk_id: ChunkId,
    index: u8,
    params: CodingParams,
    original_len: u64,
    payload: Vec<u8>,
}

impl CodedPiece {
    /// Assembles a piece from its parts, enforcing the geometry
    /// invariants (`index` < n, payload length == ceil(len / k)).
    pub fn new(
        chunk_id: ChunkId,
        index: u8,
        params: CodingParams,
        original_len: u64,
        payload: Vec<u8>,
    ) -> Result<Self, CodingError> {
        if index >= params.n {
            return Err(CodingError::InvalidPiece("index out of range"));
        }
        if original_len == 0 {
            return Err(CodingError::EmptyPayload);
        }
        if payload.len() as u64 != piece_len(original_len, params) {
            return Err(CodingError::InvalidPiece("payload length mismatch"));
        }
        Ok(CodedPiece { chunk_id, index, params, original_len, payload })
    }

    pub fn chunk_id(&self) -> ChunkId {
        self.chunk_id
    }

    pub fn index(&self) -> u8 {
        self.index
    }

    pub fn params(&self) -> CodingParams {
        self.params
    }

    pub fn original_len(&self) -> u64 {
        self.original_len
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }
}

/// Encodes `payload` into `n` coded pieces.
pub fn encode_chunk(payload: &[u8], params: CodingParams) -> Result<Vec<CodedPiece>, CodingError> {
    if payload.is_empty() {
        return Err(CodingError::EmptyPayload);
    }
    let (n, k) = (params.n as usize, params.k as usize);
    let plen = piece_len(payload.len() as u64, params) as usize;
    let chunk_id = ChunkId::of(payload);

    let mut padded = vec![0u8; k * plen];
    padded[..payload.len()].copy_from_slice(payload);

    let g = generator(n, k);
    let mut pieces = Vec::with_capacity(n);
    for i in 0..n {
        let body = if i < k {
            // Top block of the generator is the identity.
            padded[i * plen..(i + 1) * plen].to_vec()
        } else {
            let row = &g[i * k..(i + 1) * k];
            let mut out = vec![0u8; plen];
            for (j, &coef) in row.iter().enumerate() {
                if coef == 0 {
                    continue;
                }
                let shard = &padded[j * plen..(j + 1) * plen];
                for (o, &s) in out.iter_mut().zip(shard) {
                    *o ^= gf256::mul(coef, s);
                }
            }
            out
        };
        pieces.push(CodedPiece {
            chunk_id,
            index: i as u8,
            params,
            original_len: payload.len() as u64,
            payload: body,
        });
    }
    Ok(pieces)
}

/// Reconstructs the chunk payload from at least `k` pieces.
///
/// Surplus pieces are ignored deterministically: the `k` lowest indices
/// present are used. The digest is not rechecked here; callers compare
/// the result against the expected chunk id.
pub fn decode_chunk(pieces: &[CodedPiece], params: CodingParams) -> Result<Vec<u8>, CodingError> {
    let k = params.k as usize;
    if pieces.len() < k {
        return Err(CodingError::InsufficientPieces { have: pieces.len(), need: k });
    }

    let first = &pieces[0];
    for p in pieces {
        if p.params != params {
            return Err(CodingError::InconsistentPieces("mixed coding parameters"));
        }
        if p.chunk_id != first.chunk_id {
            return Err(CodingError::InconsistentPieces("mixed chunk ids"));
        }
        if p.original_len != first.original_len {
            return Err(CodingError::InconsistentPieces("mixed original lengths"));
        }
    }
    let plen = piece_len(first.original_len, params) as usize;
    let original_len = first.original_len as usize;

    let mut chosen: Vec<&CodedPiece> = pieces.iter().collect();
    chosen.sort_by_key(|p| p.index);
    if chosen.windows(2).any(|w| w[0].index == w[1].index) {
        return Err(CodingError::InconsistentPieces("duplicate piece indices"));
    }
    chosen.truncate(k);

    if chosen.iter().enumerate().all(|(j, p)| p.index as usize == j) {
        // Systematic fast path: the data pieces themselves survived.
        let mut out = Vec::with_capacity(k * plen);
        for p in &chosen {
            out.extend_from_slice(&p.payload);
        }
        out.truncate(original_len);
        return Ok(out);
    }

    let n = params.n as usize;
    let g = generator(n, k);
    let mut m = vec![0u8; k * k];
    for (row, p) in chosen.iter().enumerate() {
        let i = p.index as usize;
        m[row * k..(row + 1) * k].copy_from_slice(&g[i * k..(i + 1) * k]);
    }
    // Any k distinct rows of the normalised Vandermonde matrix are
    // linearly independent, so inversion cannot fail here.
    let w = invert(m, k).ok_or(CodingError::InconsistentPieces("singular decode matrix"))?;

    let mut out = vec![0u8; k * plen];
    for j in 0..k {
        let dst = &mut out[j * plen..(j + 1) * plen];
        for (col, p) in chosen.iter().enumerate() {
            let coef = w[j * k + col];
            if coef == 0 {
                continue;
            }
            for (o, &s) in dst.iter_mut().zip(&p.payload) {
                *o ^= gf256::mul(coef, s);
            }
        }
    }
    out.truncate(original_len);
    Ok(out)
}

/// Row-major n x k generator: Vandermonde over points 0..n, multiplied by
/// the inverse of its own top block.
fn generator(n: usize, k: usize) -> Vec<u8> {
    let mut v = vec![0u8; n * k];
    for (i, row) in v.chunks_exact_mut(k).enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = gf256::pow(i as u8, j as u32);
        }
    }
    let top = v[..k * k].to_vec();
    let w = invert(top, k).expect("Vandermonde top block is invertible");
    let mut g = vec![0u8; n * k];
    for i in 0..n {
        for j in 0..k {
            let mut s = 0u8;
            for t in 0..k {
                s ^= gf256::mul(v[i * k + t], w[t * k + j]);
            }
            g[i * k + j] = s;
        }
    }
    g
}

/// Gauss-Jordan inversion of a k x k matrix, row-major. None if singular.
fn invert(mut m: Vec<u8>, k: usize) -> Option<Vec<u8>> {
    let mut inv = vec![0u8; k * k];
    for i in 0..k {
        inv[i * k + i] = 1;
    }
    for col in 0..k {
        let pivot = (col..k).find(|&r| m[r * k + col] != 0)?;
        if pivot != col {
            for c in 0..k {
                m.swap(pivot * k + c, col * k + c);
                inv.swap(pivot * k + c, col * k + c);
            }
        }
        let pv = gf256::inv(m[col * k + col]);
        for c in 0..k {
            m[col * k + c] = gf256::mul(m[col * k + c], pv);
            inv[col * k + c] = gf256::mul(inv[col * k + c], pv);
        }
        for r in 0..k {
            if r == col {
                continue;
            }
            let f = m[r * k + col];
            if f == 0 {
                continue;
            }
            for c in 0..k {
                let a = gf256::mul(f, m[col * k + c]);
                let b = gf256::mul(f, inv[col * k + c]);
                m[r * k + c] ^= a;
                inv[r * k + c] ^= b;
            }
        }
    }
    Some(inv)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodingError {
    InvalidParams { n: u8, k: u8 },
    EmptyPayload,
    InsufficientPieces { have: usize, need: usize },
    InconsistentPieces(&'static str),
    InvalidPiece(&'static str),
}

impl fmt::Display for CodingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CodingError::InvalidParams { n, k } => {
                write!(f, "invalid coding parameters n={n} k={k}")
            }
            CodingError::EmptyPayload => write!(f, "cannot code an empty payload"),
            CodingError::InsufficientPieces { have, need } => {
                write!(f, "{have} pieces present, {need} needed")
            }
            CodingError::InconsistentPieces(why) => write!(f, "inconsistent pieces: {why}"),
            CodingError::InvalidPiece(why) => write!(f, "invalid piece: {why}"),
        }
    }
}

impl core::error::Error for CodingError {}
