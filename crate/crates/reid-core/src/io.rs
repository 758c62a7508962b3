//! Embedding dataset files.
//!
//! Binary format (little-endian, no padding):
//!
//! ```text
//! magic   4 bytes  "REID" (0x52 0x45 0x49 0x44)
//! version u32      1
//! n       u64      sample count
//! d       u32      feature dimension
//! flags   u8       bit0 = normalized
//! values  n·d f32  row-major features
//! labels  n   i64  identity ids, −1 = unknown
//! cameras n   u32  camera ids
//! ```
//!
//! On-disk precision is f32; reading widens to f64, so a file round-trips
//! bit-exactly and a matrix round-trips exactly when its values are
//! f32-representable.
//!
//! The CSV import mode expects a `label,camera,f0..f{D-1}` header.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::embedding::{EmbeddingMatrix, SampleMeta};
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"REID";
const VERSION: u32 = 1;
const FLAG_NORMALIZED: u8 = 0b0000_0001;

/// Serializes a dataset into the binary embedding format.
pub fn encode_embeddings(e: &EmbeddingMatrix, meta: &SampleMeta) -> Result<Vec<u8>> {
    if meta.len() != e.n() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} metadata rows", e.n()),
            got: format!("{}", meta.len()),
        });
    }
    let (n, d) = (e.n(), e.dim());
    let mut buf = Vec::with_capacity(4 + 4 + 8 + 4 + 1 + n * d * 4 + n * 8 + n * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.push(if e.is_normalized() { FLAG_NORMALIZED } else { 0 });
    for v in e.values().iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for &l in meta.labels() {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    for &c in meta.cameras() {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    Ok(buf)
}

struct Cursor<'a> {
    data: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + len > self.data.len() {
            return Err(Error::TruncatedFile {
                offset: self.data.len() as u64,
                what: format!("{what} needs {len} bytes at offset {}", self.offset),
            });
        }
        let slice = &self.data[self.offset..self.offset + len];
        self.offset += len;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses the binary embedding format.
pub fn decode_embeddings(data: &[u8]) -> Result<(EmbeddingMatrix, SampleMeta)> {
    let mut cur = Cursor { data, offset: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic { offset: 0 });
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let n = cur.u64("sample count")? as usize;
    let d = cur.u32("dimension")? as usize;
    let flags = cur.take(1, "flags")?[0];
    let mut values = Vec::with_capacity(n * d);
    let raw = cur.take(n * d * 4, "feature values")?;
    for chunk in raw.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let mut labels = Vec::with_capacity(n);
    let raw = cur.take(n * 8, "labels")?;
    for chunk in raw.chunks_exact(8) {
        labels.push(i64::from_le_bytes(chunk.try_into().unwrap()));
    }
    let mut cameras = Vec::with_capacity(n);
    let raw = cur.take(n * 4, "camera ids")?;
    for chunk in raw.chunks_exact(4) {
        cameras.push(u32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let matrix = Array2::from_shape_vec((n, d), values).expect("sized above");
    let mut e = EmbeddingMatrix::new(matrix)?;
    if flags & FLAG_NORMALIZED != 0 {
        e = e.assert_normalized()?;
    }
    Ok((e, SampleMeta::new(labels, cameras)?))
}

/// Writes a dataset file.
pub fn write_embeddings(path: &Path, e: &EmbeddingMatrix, meta: &SampleMeta) -> Result<()> {
    let buf = encode_embeddings(e, meta)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a dataset file.
pub fn read_embeddings(path: &Path) -> Result<(EmbeddingMatrix, SampleMeta)> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    decode_embeddings(&data)
}

/// Imports the CSV layout `label,camera,f0..f{D-1}` (header required).
pub fn read_csv(path: &Path) -> Result<(EmbeddingMatrix, SampleMeta)> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<(EmbeddingMatrix, SampleMeta)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::BadCsv {
        line: 1,
        what: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols[0] != "label" || cols[1] != "camera" {
        return Err(Error::BadCsv {
            line: 1,
            what: "header must start with label,camera".into(),
        });
    }
    let d = cols.len() - 2;
    let mut labels = Vec::new();
    let mut cameras = Vec::new();
    let mut values = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 2 {
            return Err(Error::BadCsv {
                line: line_no,
                what: format!("expected {} fields, got {}", d + 2, fields.len()),
            });
        }
        labels.push(fields[0].parse::<i64>().map_err(|e| Error::BadCsv {
            line: line_no,
            what: format!("bad label: {e}"),
        })?);
        cameras.push(fields[1].parse::<u32>().map_err(|e| Error::BadCsv {
            line: line_no,
            what: format!("bad camera id: {e}"),
        })?);
        for f in &fields[2..] {
            values.push(f.parse::<f64>().map_err(|e| Error::BadCsv {
                line: line_no,
                what: format!("bad feature value: {e}"),
            })?);
        }
    }
    let n = labels.len();
    let e = EmbeddingMatrix::from_flat(n, d, values)?;
    Ok((e, SampleMeta::new(labels, cameras)?))
}
