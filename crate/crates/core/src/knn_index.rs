//! The shared datastore: an exact, flat dot-product index holding one
//! encoder hidden state per input token.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::chunker::EncodedInput;
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix, Scalar};

pub const DUMP_MAGIC: &[u8; 4] = b"ULDS";

#[derive(Clone, Debug, PartialEq)]
pub struct Datastore<T: Scalar = f32> {
    vectors: Matrix<T>,
    positions: Vec<usize>,
    frozen: bool,
}

/// Top-k rows by descending score; ties resolved towards the lower row.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult<T: Scalar = f32> {
    pub indices: Vec<usize>,
    pub scores: Vec<T>,
}

impl<T: Scalar> RetrievalResult<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Scalar width used when reporting index memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StorageMode {
    F32,
    F16,
}

impl StorageMode {
    pub fn bytes_per_scalar(self) -> u64 {
        match self {
            StorageMode::F32 => 4,
            StorageMode::F16 => 2,
        }
    }
}

/// `n * d * bytes_per_scalar`, checked.
pub fn memory_bytes(n: u64, d: u64, bytes_per_scalar: u64) -> Result<u64> {
    if n == 0 || d == 0 || bytes_per_scalar == 0 {
        return Err(Error::arg("memory_bytes arguments must all be at least 1"));
    }
    n.checked_mul(d)
        .and_then(|x| x.checked_mul(bytes_per_scalar))
        .ok_or_else(|| Error::Range(format!("{n} x {d} x {bytes_per_scalar} bytes overflows u64")))
}

/// Sorts `(row, score)` pairs into descending score, ascending row order.
pub(crate) fn rank_order<T: Scalar>(a: &(usize, T), b: &(usize, T)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Exact top-k over precomputed scores.
pub(crate) fn top_k<T: Scalar>(scores: Vec<T>, k: usize) -> RetrievalResult<T> {
    let k = k.min(scores.len());
    let mut pairs: Vec<(usize, T)> = scores.into_iter().enumerate().collect();
    if k == 0 {
        return RetrievalResult {
            indices: Vec::new(),
            scores: Vec::new(),
        };
    }
    if k < pairs.len() {
        pairs.select_nth_unstable_by(k - 1, rank_order);
        pairs.truncate(k);
    }
    pairs.sort_unstable_by(rank_order);
    RetrievalResult {
        indices: pairs.iter().map(|p| p.0).collect(),
        scores: pairs.iter().map(|p| p.1).collect(),
    }
}

impl<T: Scalar> Datastore<T> {
    /// Unfrozen store; call [`Datastore::freeze`] before querying.
    pub fn from_parts(vectors: Matrix<T>, positions: Vec<usize>) -> Result<Self> {
        if positions.len() != vectors.rows() {
            return Err(Error::shape("datastore", vectors.shape(), (positions.len(), 1)));
        }
        Ok(Self {
            vectors,
            positions,
            frozen: false,
        })
    }

    /// Frozen store over an encoded input, rows in token order.
    pub fn build(payload: EncodedInput<T>) -> Result<Self> {
        if payload.is_empty() {
            return Err(Error::arg("cannot build a datastore from an empty payload"));
        }
        let mut ds = Self::from_parts(payload.hidden, payload.positions)?;
        ds.freeze();
        Ok(ds)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Matrix<T> {
        &self.vectors
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    /// Bytes actually allocated for the vector payload.
    pub fn payload_bytes(&self) -> usize {
        self.vectors.payload_bytes()
    }

    pub fn memory_bytes(&self, mode: StorageMode) -> Result<u64> {
        memory_bytes(self.len() as u64, self.dim() as u64, mode.bytes_per_scalar())
    }

    /// Dot products of `q` against every row.
    pub fn scores(&self, q: &[T]) -> Result<Vec<T>> {
        self.check_query(q)?;
        Ok((0..self.len()).map(|r| dot(q, self.vectors.row(r))).collect())
    }

    fn check_query(&self, q: &[T]) -> Result<()> {
        if !self.frozen {
            return Err(Error::State("datastore must be frozen before querying".into()));
        }
        if q.len() != self.dim() {
            return Err(Error::shape("datastore query", (1, q.len()), self.vectors.shape()));
        }
        Ok(())
    }

    /// Exact top-`k` rows by dot product with `q`.
    pub fn query(&self, q: &[T], k: usize) -> Result<RetrievalResult<T>> {
        Ok(top_k(self.scores(q)?, k))
    }
}

impl Datastore<f32> {
    /// Writes `"ULDS" | n u64 | d u64 | positions u64*n | vectors f32*n*d`,
    /// little-endian.
    pub fn write_dump(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(DUMP_MAGIC)?;
        out.write_all(&(self.len() as u64).to_le_bytes())?;
        out.write_all(&(self.dim() as u64).to_le_bytes())?;
        for &p in &self.positions {
            out.write_all(&(p as u64).to_le_bytes())?;
        }
        for v in self.vectors.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a dump back as a frozen store.
    pub fn read_dump(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != DUMP_MAGIC {
            return Err(Error::Format(format!("bad datastore magic {magic:?}")));
        }
        let mut b = [0u8; 8];
        input.read_exact(&mut b)?;
        let n = u64::from_le_bytes(b) as usize;
        input.read_exact(&mut b)?;
        let d = u64::from_le_bytes(b) as usize;
        let mut positions = Vec::with_capacity(n);
        for _ in 0..n {
            input.read_exact(&mut b)?;
            positions.push(u64::from_le_bytes(b) as usize);
        }
        let count = n
            .checked_mul(d)
            .ok_or_else(|| Error::Format("datastore dump dimensions overflow".into()))?;
        let mut raw = vec![0u8; count * 4];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut ds = Self::from_parts(Matrix::from_vec(n, d, data)?, positions)?;
        ds.freeze();
        Ok(ds)
    }

    pub fn save_dump(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_dump(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load_dump(path: &Path) -> Result<Self> {
        Self::read_dump(&mut BufReader::new(File::open(path)?))
    }
}
