//! The `.sbad` model container shared by all three model kinds.
//!
//! Common header, little-endian throughout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SBAD"
//! 4       4     format version (u32, currently 1)
//! 8       1     model kind (0x01 baseline, 0x02 covariance, 0x03 projection)
//! 9       4     channels S (u32)
//! 13      12    dims X, Y, Z (u32 each)
//! 25      4     training study count N (u32)
//! 29      ...   kind-specific payload
//! ```
//!
//! Payload layouts are documented next to each model's `save`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Dims, HeadMask};

pub const MAGIC: &[u8; 4] = b"SBAD";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 29;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ModelKind {
    Baseline = 0x01,
    Covariance = 0x02,
    Projection = 0x03,
}

impl ModelKind {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0x01 => Ok(Self::Baseline),
            0x02 => Ok(Self::Covariance),
            0x03 => Ok(Self::Projection),
            other => Err(Error::BadModel(format!("unknown model kind byte {other:#04x}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelHeader {
    pub kind: ModelKind,
    pub channels: usize,
    pub dims: Dims,
    pub n_train: usize,
}

pub struct ModelWriter<W: Write> {
    inner: W,
}

impl ModelWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(Error::io_at(path))?;
        Ok(Self::new(BufWriter::new(file)))
    }
}

impl<W: Write> ModelWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn header(&mut self, h: &ModelHeader) -> Result<()> {
        self.inner.write_all(MAGIC)?;
        self.u32(VERSION)?;
        self.u8(h.kind as u8)?;
        self.u32(h.channels as u32)?;
        self.u32(h.dims.x as u32)?;
        self.u32(h.dims.y as u32)?;
        self.u32(h.dims.z as u32)?;
        self.u32(h.n_train as u32)
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.inner.write_all(&[v])?)
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    pub fn f32s(&mut self, values: &[f32]) -> Result<()> {
        let mut buf = Vec::with_capacity(1 << 16);
        for chunk in values.chunks(1 << 14) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            self.inner.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn bytes(&mut self, values: &[u8]) -> Result<()> {
        Ok(self.inner.write_all(values)?)
    }

    pub fn mask(&mut self, mask: &HeadMask) -> Result<()> {
        let bytes: Vec<u8> = mask.data().iter().map(|&b| b as u8).collect();
        self.bytes(&bytes)
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub struct ModelReader<R: Read> {
    inner: R,
}

impl ModelReader<BufReader<File>> {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(Error::io_at(path))?;
        Ok(Self::new(BufReader::new(file)))
    }
}

impl<R: Read> ModelReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::BadModel("file ends early".into())
            } else {
                Error::Io(e)
            }
        })
    }

    pub fn header(&mut self) -> Result<ModelHeader> {
        let mut magic = [0u8; 4];
        self.fill(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::BadModel("missing SBAD magic".into()));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(Error::BadModel(format!("unsupported format version {version}")));
        }
        let kind = ModelKind::from_byte(self.u8()?)?;
        let channels = self.u32()? as usize;
        let dims = Dims::new(self.u32()? as usize, self.u32()? as usize, self.u32()? as usize);
        let n_train = self.u32()? as usize;
        if channels == 0 || dims.voxels() == 0 {
            return Err(Error::BadModel("empty model shape".into()));
        }
        Ok(ModelHeader {
            kind,
            channels,
            dims,
            n_train,
        })
    }

    pub fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b)?;
        Ok(b[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(n);
        let mut buf = vec![0u8; 4 * n.min(1 << 14)];
        let mut left = n;
        while left > 0 {
            let take = left.min(1 << 14);
            let bytes = &mut buf[..4 * take];
            self.fill(bytes)?;
            out.extend(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
            );
            left -= take;
        }
        Ok(out)
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut out = vec![0u8; n];
        self.fill(&mut out)?;
        Ok(out)
    }

    pub fn mask(&mut self, dims: Dims) -> Result<HeadMask> {
        let bytes = self.bytes(dims.voxels())?;
        let bits = bytes.iter().map(|&b| b != 0).collect();
        HeadMask::new(BinaryMask::new(dims, [1.0; 3], bits)?)
    }
}

/// Reads only the common header of a model file.
pub fn peek_header(path: &Path) -> Result<ModelHeader> {
    ModelReader::open(path)?.header()
}
