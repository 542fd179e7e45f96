//! `BMO1` checkpoints: magic, entry count, then per entry the UTF-8 name,
//! rank, extents, and little-endian `f32` values. All integers are `u32` LE.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BMO1";

pub fn write_checkpoint<T: Real, W: Write>(store: &ParamStore<T>, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.as_f32().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    write_checkpoint(store, BufWriter::new(File::create(path)?))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                what: "checkpoint",
                expected: self.pos + n,
                actual: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a checkpoint into a fresh store, preserving entry order.
pub fn read_checkpoint<T: Real, R: Read>(mut r: R) -> Result<ParamStore<T>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            what: "checkpoint",
            message: "missing BMO1 magic".into(),
        });
    }
    let count = c.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = c.u32()?;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|e| Error::Format {
            what: "checkpoint",
            message: format!("entry name is not UTF-8: {e}"),
        })?;
        let rank = c.u32()?;
        let shape = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = c
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| T::of_f32(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        store.add(name, Tensor::new(&shape, data)?)?;
    }
    Ok(store)
}

/// Loads every entry of the checkpoint at `path` into `store`, which must
/// already hold a tensor of the same name and shape for each entry.
pub fn load_checkpoint<T: Real>(store: &mut ParamStore<T>, path: &Path) -> Result<usize> {
    let loaded = read_checkpoint::<T, _>(BufReader::new(File::open(path)?))?;
    store.copy_from(&loaded, "")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::new(&[2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25, -7.0, 1e-30]).unwrap()).unwrap();
        s.add("b", Tensor::new(&[1], vec![0.1]).unwrap()).unwrap();
        s
    }

    #[test]
    fn truncated_file_names_byte_counts() {
        let mut bytes = Vec::new();
        write_checkpoint(&sample_store(), &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        let err = read_checkpoint::<f32, _>(&bytes[..]).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let err = read_checkpoint::<f32, _>(&b"BMX1\0\0\0\0"[..]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let mut bytes = Vec::new();
        write_checkpoint(&sample_store(), &mut bytes).unwrap();
        let loaded = read_checkpoint::<f32, _>(&bytes[..]).unwrap();
        let mut target = ParamStore::new();
        target.add("a.w", Tensor::<f32>::zeros(&[3, 2])).unwrap();
        target.add("b", Tensor::<f32>::zeros(&[1])).unwrap();
        let err = target.copy_from(&loaded, "").unwrap_err();
        assert!(err.to_string().contains("a.w"), "{err}");
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(proptest::num::f32::ANY, 1..40), name in "[a-z.]{1,12}") {
            let mut s = ParamStore::new();
            let n = vals.len();
            s.add(name, Tensor::new(&[n], vals.clone()).unwrap()).unwrap();
            let mut bytes = Vec::new();
            write_checkpoint(&s, &mut bytes).unwrap();
            let back = read_checkpoint::<f32, _>(&bytes[..]).unwrap();
            let got = back.iter().next().unwrap().1.data().to_vec();
            prop_assert_eq!(got.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), vals.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
