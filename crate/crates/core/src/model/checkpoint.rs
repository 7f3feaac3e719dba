//! Binary weight checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ULMF" | version u32 | config block | tensor*
//! config block = d_model u64, n_heads u64, n_enc_layers u64, n_dec_layers u64,
//!                d_ff u64, vocab_size u64, window u64, seed u64
//! tensor       = name_len u32, name bytes (utf-8), rows u64, cols u64, rows*cols f32
//! ```
//!
//! Tensors run to end of file.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::numerics::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ULMF";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(weights: &ModelWeights, out: &mut impl Write) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let c = &weights.config;
    for v in [
        c.d_model,
        c.n_heads,
        c.n_enc_layers,
        c.n_dec_layers,
        c.d_ff,
        c.vocab_size,
        c.window,
    ] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    out.write_all(&c.seed.to_le_bytes())?;
    let mut result = Ok(());
    weights.visit(&mut |name, m| {
        if result.is_ok() {
            result = write_tensor(out, name, m);
        }
    });
    result
}

fn write_tensor(out: &mut impl Write, name: &str, m: &Matrix) -> Result<()> {
    out.write_all(&(name.len() as u32).to_le_bytes())?;
    out.write_all(name.as_bytes())?;
    out.write_all(&(m.rows() as u64).to_le_bytes())?;
    out.write_all(&(m.cols() as u64).to_le_bytes())?;
    for v in m.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_usize(r: &mut impl Read) -> Result<usize> {
    usize::try_from(read_u64(r)?).map_err(|_| Error::Format("size field exceeds usize".into()))
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<ModelWeights> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = read_u32(input)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config = ModelConfig {
        d_model: read_usize(input)?,
        n_heads: read_usize(input)?,
        n_enc_layers: read_usize(input)?,
        n_dec_layers: read_usize(input)?,
        d_ff: read_usize(input)?,
        vocab_size: read_usize(input)?,
        window: read_usize(input)?,
        seed: read_u64(input)?,
    };
    config.validate()?;

    let mut tensors = HashMap::new();
    loop {
        let mut len = [0u8; 4];
        match input.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let len = u32::from_le_bytes(len) as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let rows = read_usize(input)?;
        let cols = read_usize(input)?;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format(format!("tensor {name} too large")))?;
        let mut raw = vec![0u8; count * 4];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.insert(name, Matrix::from_vec(rows, cols, data)?);
    }

    let mut weights = ModelWeights::init_zeroed(&config);
    let mut result = Ok(());
    weights.visit_mut(&mut |name, slot| {
        if result.is_err() {
            return;
        }
        match tensors.remove(name) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => result = Err(Error::Format(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), slot.shape()))),
            None => result = Err(Error::Format(format!("checkpoint is missing tensor {name}"))),
        }
    });
    result?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra} in checkpoint")));
    }
    Ok(weights)
}

pub fn save_checkpoint(weights: &ModelWeights, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(weights, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
