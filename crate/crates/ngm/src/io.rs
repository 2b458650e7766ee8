//! Binary and text formats for embedding tables and n-gram stack dumps.
//!
//! Embedding table (`.ngme`), little-endian throughout:
//!
//! ```text
//! magic "NGME" | u32 version = 1 | u64 V | u64 d | V*d f32 (row-major)
//! ```
//!
//! Stack dump (`.ngms`):
//!
//! ```text
//! magic "NGMS" | u32 version = 1 | u64 T | u64 S | u64 d | S x u64 sizes
//!              | T*S*d f32 (position-major, then scale, then dim)
//! ```
//!
//! The text importer accepts one whitespace-separated embedding row per
//! line; every line must have the same number of columns.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::ngram::{EmbeddingTable, NgramStack};

pub const TABLE_MAGIC: &[u8; 4] = b"NGME";
pub const STACK_MAGIC: &[u8; 4] = b"NGMS";
pub const FORMAT_VERSION: u32 = 1;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f32_vec(r: &mut impl Read, count: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn write_f32_slice(w: &mut impl Write, values: &[f32]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn check_magic(r: &mut impl Read, expected: &[u8; 4], what: &str) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != expected {
        return Err(Error::Format(format!(
            "bad {what} magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(expected)
        )));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported {what} format version {version}"
        )));
    }
    Ok(())
}

pub fn write_table(path: impl AsRef<Path>, table: &EmbeddingTable) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TABLE_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(table.vocab_size() as u64).to_le_bytes())?;
    w.write_all(&(table.dim() as u64).to_le_bytes())?;
    write_f32_slice(&mut w, table.raw())?;
    w.flush()?;
    Ok(())
}

pub fn read_table(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let mut r = BufReader::new(open(path.as_ref())?);
    check_magic(&mut r, TABLE_MAGIC, "embedding table")?;
    let vocab = read_u64(&mut r)? as usize;
    let dim = read_u64(&mut r)? as usize;
    let rows = read_f32_vec(&mut r, vocab.saturating_mul(dim))?;
    EmbeddingTable::new(vocab, dim, rows)
}

/// One whitespace-separated row per line; blank lines are skipped.
pub fn read_table_text(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let reader = BufReader::new(open(path.as_ref())?);
    let mut rows: Vec<f32> = Vec::new();
    let mut dim: Option<usize> = None;
    let mut vocab = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0usize;
        for tok in line.split_whitespace() {
            let v: f32 = tok.parse().map_err(|_| {
                Error::Format(format!("line {}: bad float {tok:?}", lineno + 1))
            })?;
            rows.push(v);
            count += 1;
        }
        match dim {
            None => dim = Some(count),
            Some(d) if d != count => {
                return Err(Error::Format(format!(
                    "line {}: expected {d} columns, found {count}",
                    lineno + 1
                )))
            }
            _ => {}
        }
        vocab += 1;
    }
    let dim = dim.ok_or_else(|| Error::Format("empty embedding text file".into()))?;
    EmbeddingTable::new(vocab, dim, rows)
}

/// Reads either format, sniffing the binary magic first.
pub fn read_table_auto(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let mut probe = [0u8; 4];
    let is_binary = {
        let mut f = open(path)?;
        f.read_exact(&mut probe).is_ok() && &probe == TABLE_MAGIC
    };
    if is_binary {
        read_table(path)
    } else {
        read_table_text(path)
    }
}

pub fn write_stack(path: impl AsRef<Path>, stack: &NgramStack) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(STACK_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(stack.len() as u64).to_le_bytes())?;
    w.write_all(&(stack.num_scales() as u64).to_le_bytes())?;
    w.write_all(&(stack.dim() as u64).to_le_bytes())?;
    for &n in stack.sizes() {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    write_f32_slice(&mut w, stack.raw())?;
    w.flush()?;
    Ok(())
}

pub fn read_stack(path: impl AsRef<Path>) -> Result<NgramStack> {
    let mut r = BufReader::new(open(path.as_ref())?);
    check_magic(&mut r, STACK_MAGIC, "n-gram stack")?;
    let len = read_u64(&mut r)? as usize;
    let scales = read_u64(&mut r)? as usize;
    let dim = read_u64(&mut r)? as usize;
    let mut sizes = Vec::with_capacity(scales);
    for _ in 0..scales {
        sizes.push(read_u64(&mut r)? as usize);
    }
    let values = read_f32_vec(&mut r, len * scales * dim)?;
    NgramStack::from_values(len, sizes, dim, values)
}
