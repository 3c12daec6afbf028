//! Checkpoint binary: `"ADCK" | version u16 | count u32`, then per tensor
//! `name_len u16 | name | rank u8 | dims u32 x rank | f64 data`, all
//! little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ADCK";
const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint_to<W: Write>(mut w: W, params: &ParamStore) -> std::io::Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| std::io::Error::other("parameter name too long"))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn write_checkpoint(path: impl AsRef<Path>, params: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint_to(BufWriter::new(file), params).map_err(|e| Error::io(path, e))
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => Error::Truncated { offset: self.offset },
            _ => Error::io("<checkpoint>", e),
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint_from<R: Read>(inner: R) -> Result<ParamStore> {
    let mut c = Cursor { inner, offset: 0 };
    let magic = c.bytes(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(&CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let version = c.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadVersion(version));
    }
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = String::from_utf8(c.bytes(len)?)
            .map_err(|_| Error::InvalidArgument("checkpoint parameter name is not utf-8".into()))?;
        let rank = c.bytes(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.bytes(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        store.push(name, Tensor::new(shape, data)?)?;
    }
    let mut probe = [0u8; 1];
    if c.inner.read(&mut probe).map_err(|e| Error::io("<checkpoint>", e))? != 0 {
        return Err(Error::InvalidArgument(format!("trailing bytes in checkpoint at offset {}", c.offset)));
    }
    Ok(store)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint_from(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(p: &ParamStore) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint_to(&mut buf, p).unwrap();
        buf
    }

    #[test]
    fn header_and_errors() {
        let mut p = ParamStore::new();
        p.push("w", Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap()).unwrap();
        p.push("s", Tensor::scalar(3.5)).unwrap();
        let bytes = encode(&p);
        assert_eq!(&bytes[..4], b"ADCK");
        assert_eq!(bytes.len(), 10 + (2 + 1 + 1 + 8 + 16) + (2 + 1 + 1 + 8));
        assert_eq!(read_checkpoint_from(&bytes[..]).unwrap(), p);
        assert!(matches!(read_checkpoint_from(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint_from(&bad[..]), Err(Error::BadMagic { .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(read_checkpoint_from(&extra[..]).is_err());
    }

    fn arb_store() -> impl Strategy<Value = ParamStore> {
        proptest::collection::vec(
            (proptest::collection::vec(1usize..4, 0..3), any::<u64>()),
            0..6,
        )
        .prop_map(|specs| {
            let mut store = ParamStore::new();
            for (i, (shape, seed)) in specs.into_iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|k| f64::from_bits(seed.rotate_left(k as u32) & 0x3fff_ffff_ffff_ffff)).collect();
                store.push(format!("p{i}.weight"), Tensor::new(shape, data).unwrap()).unwrap();
            }
            store
        })
    }

    proptest! {
        #[test]
        fn write_read_write_is_bit_identical(store in arb_store()) {
            let bytes = encode(&store);
            let back = read_checkpoint_from(&bytes[..]).unwrap();
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
