//! MMEB: a little-endian stack-of-frames embedding format.
//!
//! ```text
//! magic "MMEB" | version u16 | count u32
//! per record: id_len u16 | id utf-8 | L u16 | F u32 | D u32 | L*F*D f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MMEB_MAGIC: [u8; 4] = *b"MMEB";
pub const MMEB_VERSION: u16 = 1;

/// Frozen encoder output for one item: `layers x frames x dim` floats,
/// layer-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub layers: usize,
    pub frames: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn new(id: String, layers: usize, frames: usize, dim: usize, values: Vec<f32>) -> Result<EmbeddingRecord> {
        if layers == 0 || frames == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "record '{id}': L, F, D must be >= 1, got {layers}, {frames}, {dim}"
            )));
        }
        if layers > u16::MAX as usize || frames > u32::MAX as usize || dim > u32::MAX as usize {
            return Err(Error::InvalidArgument(format!("record '{id}': dimensions exceed format limits")));
        }
        if values.len() != layers * frames * dim {
            return Err(Error::InvalidArgument(format!(
                "record '{id}': expected {} values, got {}",
                layers * frames * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("record '{id}': non-finite value")));
        }
        Ok(EmbeddingRecord {
            id,
            layers,
            frames,
            dim,
            values,
        })
    }

    pub fn value(&self, layer: usize, frame: usize, d: usize) -> f32 {
        self.values[(layer * self.frames + frame) * self.dim + d]
    }

    /// `[L, F, D]` tensor in `f64`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.layers, self.frames, self.dim],
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("record dims match values")
    }

    /// Byte size of this record in an MMEB file.
    pub fn encoded_len(&self) -> usize {
        2 + self.id.len() + 2 + 4 + 4 + 4 * self.values.len()
    }
}

/// Streaming reader yielding one record at a time.
pub struct MmebReader<R: Read> {
    inner: R,
    remaining: u32,
    offset: u64,
    done: bool,
}

impl<R: Read> MmebReader<R> {
    pub fn new(mut inner: R) -> Result<MmebReader<R>> {
        let mut magic = [0u8; 4];
        read_exact_at(&mut inner, &mut magic, 0)?;
        if magic != MMEB_MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(&MMEB_MAGIC).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let mut buf2 = [0u8; 2];
        read_exact_at(&mut inner, &mut buf2, 4)?;
        let version = u16::from_le_bytes(buf2);
        if version != MMEB_VERSION {
            return Err(Error::BadVersion(version));
        }
        let mut buf4 = [0u8; 4];
        read_exact_at(&mut inner, &mut buf4, 6)?;
        Ok(MmebReader {
            inner,
            remaining: u32::from_le_bytes(buf4),
            offset: 10,
            done: false,
        })
    }

    /// Records not yet read.
    pub fn remaining(&self) -> u32 {
        self.remaining
    }

    fn read_record(&mut self) -> Result<EmbeddingRecord> {
        let start = self.offset;
        let mut take = |n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            read_exact_at(&mut self.inner, &mut buf, start)?;
            self.offset += n as u64;
            Ok(buf)
        };
        let id_len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
        let id = String::from_utf8(take(id_len)?).map_err(|_| Error::Parse {
            line: 0,
            message: format!("record at byte {start}: id is not valid utf-8"),
        })?;
        let layers = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
        let frames = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let dim = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let n = layers
            .checked_mul(frames)
            .and_then(|x| x.checked_mul(dim))
            .ok_or(Error::Truncated { offset: start })?;
        let raw = take(n * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        EmbeddingRecord::new(id, layers, frames, dim, values)
    }
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Truncated { offset },
        _ => Error::io("<mmeb stream>", e),
    })
}

impl<R: Read> Iterator for MmebReader<R> {
    type Item = Result<EmbeddingRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        if self.remaining == 0 {
            self.done = true;
            let mut probe = [0u8; 1];
            return match self.inner.read(&mut probe) {
                Ok(0) => None,
                Ok(_) => Some(Err(Error::InvalidArgument(format!(
                    "trailing bytes after last record at byte offset {}",
                    self.offset
                )))),
                Err(e) => Some(Err(Error::io("<mmeb stream>", e))),
            };
        }
        self.remaining -= 1;
        let rec = self.read_record();
        if rec.is_err() {
            self.done = true;
        }
        Some(rec)
    }
}

/// Write records to any sink.
pub fn write_mmeb<'a, W: Write>(mut w: W, records: impl ExactSizeIterator<Item = &'a EmbeddingRecord>) -> std::io::Result<()> {
    let count = u32::try_from(records.len()).map_err(|_| std::io::Error::other("too many records"))?;
    w.write_all(&MMEB_MAGIC)?;
    w.write_all(&MMEB_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for r in records {
        let id_len = u16::try_from(r.id.len()).map_err(|_| std::io::Error::other("id longer than 65535 bytes"))?;
        w.write_all(&id_len.to_le_bytes())?;
        w.write_all(r.id.as_bytes())?;
        w.write_all(&(r.layers as u16).to_le_bytes())?;
        w.write_all(&(r.frames as u32).to_le_bytes())?;
        w.write_all(&(r.dim as u32).to_le_bytes())?;
        for v in &r.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn write_embeddings(records: &IndexMap<String, EmbeddingRecord>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_mmeb(BufWriter::new(file), records.values()).map_err(|e| Error::io(path, e))
}

/// Read a whole file into an id-keyed map, preserving file order.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<IndexMap<String, EmbeddingRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = MmebReader::new(BufReader::new(file))?;
    let mut out = IndexMap::with_capacity(reader.remaining() as usize);
    for rec in reader {
        let rec = rec?;
        if out.contains_key(&rec.id) {
            return Err(Error::DuplicateId(rec.id));
        }
        out.insert(rec.id.clone(), rec);
    }
    Ok(out)
}
