//! `BMDS` dataset files. Layout (little-endian): magic, `u32` version,
//! `u32` count, then per sample `u32` label, `u8` region, `u16` T, H, W, C,
//! `T·H·W·C` `f32` frame values, and one packed bitmap per region
//! (`⌈H·W/8⌉` bytes, row-major, least significant bit first).

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::DatasetConfig;
use crate::encoders::{Mask, RegionId, VideoSample, NUM_REGIONS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"BMDS";
pub const DATASET_VERSION: u32 = 1;

fn u16_of(v: usize, what: &str) -> Result<[u8; 2]> {
    u16::try_from(v)
        .map(u16::to_le_bytes)
        .map_err(|_| Error::contract(format!("{what} {v} does not fit the dataset format")))
}

pub fn write_dataset<W: Write>(samples: &[VideoSample], mut w: W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    for s in samples {
        let (t, h, wd, c) = s.dims();
        w.write_all(&(s.label as u32).to_le_bytes())?;
        w.write_all(&[s.region.index() as u8])?;
        for (v, what) in [(t, "T"), (h, "H"), (wd, "W"), (c, "C")] {
            w.write_all(&u16_of(v, what)?)?;
        }
        let mut buf = Vec::with_capacity(s.frames.numel() * 4);
        for v in s.frames.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        for m in &s.masks {
            let mut packed = vec![0u8; (h * wd).div_ceil(8)];
            for (i, _) in m.bits.iter().enumerate().filter(|(_, &b)| b) {
                packed[i / 8] |= 1 << (i % 8);
            }
            w.write_all(&packed)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(samples: &[VideoSample], path: &Path) -> Result<()> {
    write_dataset(samples, BufWriter::new(File::create(path)?))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                what: "dataset",
                expected: self.pos + n,
                actual: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self) -> Result<usize> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]) as usize)
    }
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Vec<VideoSample>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut rd = Reader { buf: &bytes, pos: 0 };
    let bad = |message: String| Error::Format { what: "dataset", message };
    if rd.take(4)? != DATASET_MAGIC {
        return Err(bad("missing BMDS magic".into()));
    }
    let version = rd.u32()?;
    if version != DATASET_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = rd.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let label = rd.u32()? as usize;
        let region_byte = rd.take(1)?[0] as usize;
        let region = RegionId::from_index(region_byte).ok_or_else(|| bad(format!("sample {i}: region {region_byte}")))?;
        let (t, h, w, c) = (rd.u16()?, rd.u16()?, rd.u16()?, rd.u16()?);
        if t == 0 || h == 0 || w == 0 || c == 0 {
            return Err(bad(format!("sample {i}: zero extent in {t}x{h}x{w}x{c}")));
        }
        let n = t * h * w * c;
        let data = rd
            .take(n * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut masks = Vec::with_capacity(NUM_REGIONS);
        for _ in 0..NUM_REGIONS {
            let packed = rd.take((h * w).div_ceil(8))?;
            let bits = (0..h * w).map(|j| packed[j / 8] >> (j % 8) & 1 == 1).collect();
            masks.push(Mask::new(h, w, bits)?);
        }
        out.push(VideoSample {
            frames: Tensor::new(&[t, h, w, c], data)?,
            masks: masks.try_into().expect("four masks"),
            label,
            region,
        });
    }
    if rd.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - rd.pos)));
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<VideoSample>> {
    read_dataset(File::open(path)?)
}

/// JSON written next to a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSidecar {
    pub config: DatasetConfig,
    pub class_names: Vec<String>,
}

pub fn sidecar_path(dataset: &Path) -> PathBuf {
    let mut p = dataset.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn save_sidecar(cfg: &DatasetConfig, dataset: &Path) -> Result<()> {
    let side = DatasetSidecar {
        config: cfg.clone(),
        class_names: cfg.class_names(),
    };
    std::fs::write(sidecar_path(dataset), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn load_sidecar(dataset: &Path) -> Result<DatasetSidecar> {
    Ok(serde_json::from_str(&std::fs::read_to_string(sidecar_path(dataset))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    fn samples() -> Vec<VideoSample> {
        let cfg = DatasetConfig {
            samples_per_class: 2,
            ..DatasetConfig::separable(9)
        };
        generate_dataset(&cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let s = samples();
        let mut bytes = Vec::new();
        write_dataset(&s, &mut bytes).unwrap();
        let back = read_dataset(&bytes[..]).unwrap();
        assert_eq!(back, s);
        let bits = |v: &[VideoSample]| v.iter().flat_map(|x| x.frames.data().iter().map(|f| f.to_bits())).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&s));
    }

    #[test]
    fn empty_dataset_is_a_valid_file() {
        let mut bytes = Vec::new();
        write_dataset(&[], &mut bytes).unwrap();
        assert_eq!(bytes.len(), 12);
        assert!(read_dataset(&bytes[..]).unwrap().is_empty());
    }

    #[test]
    fn truncation_reports_byte_counts() {
        let mut bytes = Vec::new();
        write_dataset(&samples(), &mut bytes).unwrap();
        let full = bytes.len();
        bytes.truncate(full - 5);
        match read_dataset(&bytes[..]) {
            Err(Error::Truncated { expected, actual, .. }) => {
                assert_eq!(expected, full);
                assert_eq!(actual, full - 5);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_version() {
        assert!(matches!(read_dataset(&b"XXXX\x01\0\0\0\0\0\0\0"[..]), Err(Error::Format { .. })));
        assert!(matches!(read_dataset(&b"BMDS\x02\0\0\0\0\0\0\0"[..]), Err(Error::Format { .. })));
    }
}
