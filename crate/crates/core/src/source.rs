//! Random-access sources of training studies, read one voxel slab at a time.
//!
//! Model fitting never holds the whole training set in memory: it walks the
//! grid in contiguous voxel slabs and, for each slab, reads that range of
//! every channel from every study.

use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::preprocess::NormalizedStudy;
use crate::volume::{self, Dims, NiftiInfo, DT_FLOAT32};

pub trait StudySource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn channels(&self) -> usize;

    fn dims(&self) -> Dims;

    /// Writes voxels `voxels` of every channel of study `index` into `out`,
    /// channel-major (`out.len() == channels * voxels.len()`).
    fn read_slab(&self, index: usize, voxels: Range<usize>, out: &mut [f32]) -> Result<()>;
}

/// Studies already held in memory.
pub struct InMemory<'a> {
    studies: &'a [NormalizedStudy],
}

impl<'a> InMemory<'a> {
    pub fn new(studies: &'a [NormalizedStudy]) -> Result<Self> {
        if let Some(first) = studies.first() {
            for (i, s) in studies.iter().enumerate() {
                if !s.volume().same_shape(first.volume()) {
                    return Err(Error::ShapeMismatch(format!(
                        "study {i} has shape {}x{:?}, expected {}x{:?}",
                        s.volume().channels(),
                        s.volume().dims(),
                        first.volume().channels(),
                        first.volume().dims()
                    )));
                }
            }
        }
        Ok(Self { studies })
    }
}

impl StudySource for InMemory<'_> {
    fn len(&self) -> usize {
        self.studies.len()
    }

    fn channels(&self) -> usize {
        self.studies.first().map_or(0, |s| s.volume().channels())
    }

    fn dims(&self) -> Dims {
        self.studies.first().map_or(Dims::new(0, 0, 0), |s| s.volume().dims())
    }

    fn read_slab(&self, index: usize, voxels: Range<usize>, out: &mut [f32]) -> Result<()> {
        let vol = self.studies[index].volume();
        let len = voxels.len();
        for s in 0..vol.channels() {
            out[s * len..(s + 1) * len].copy_from_slice(&vol.channel(s)[voxels.clone()]);
        }
        Ok(())
    }
}

/// Normalized studies stored as NIfTI files, read by seeking into each file.
pub struct NiftiFiles {
    paths: Vec<PathBuf>,
    infos: Vec<NiftiInfo>,
}

impl NiftiFiles {
    pub fn open(paths: Vec<PathBuf>) -> Result<Self> {
        let mut infos: Vec<NiftiInfo> = Vec::with_capacity(paths.len());
        for path in &paths {
            let info = volume::read_header(path)?;
            if info.datatype != DT_FLOAT32 {
                return Err(Error::Invalid(format!("{} is not a float volume", path.display())));
            }
            if let Some(first) = infos.first() {
                if first.dims != info.dims || first.channels != info.channels {
                    return Err(Error::ShapeMismatch(format!(
                        "{} has shape {}x{:?}, expected {}x{:?}",
                        path.display(),
                        info.channels,
                        info.dims,
                        first.channels,
                        first.dims
                    )));
                }
            }
            infos.push(info);
        }
        Ok(Self { paths, infos })
    }

    pub fn path(&self, index: usize) -> &Path {
        &self.paths[index]
    }

    pub fn load(&self, index: usize) -> Result<NormalizedStudy> {
        Ok(NormalizedStudy::assume_normalized(volume::read_multichannel(&self.paths[index])?))
    }
}

impl StudySource for NiftiFiles {
    fn len(&self) -> usize {
        self.paths.len()
    }

    fn channels(&self) -> usize {
        self.infos.first().map_or(0, |i| i.channels)
    }

    fn dims(&self) -> Dims {
        self.infos.first().map_or(Dims::new(0, 0, 0), |i| i.dims)
    }

    fn read_slab(&self, index: usize, voxels: Range<usize>, out: &mut [f32]) -> Result<()> {
        volume::read_slab(&self.paths[index], &self.infos[index], voxels, out)
    }
}

/// Voxel ranges covering `0..voxels` in slabs of at most `slab` voxels.
pub fn slabs(voxels: usize, slab: usize) -> impl Iterator<Item = Range<usize>> {
    let slab = slab.max(1);
    (0..voxels.div_ceil(slab)).map(move |i| i * slab..((i + 1) * slab).min(voxels))
}

/// Reads a list file: one path per line, blank lines and `#` comments
/// skipped, relative paths resolved against the list's directory. Extra
/// whitespace-separated columns are returned alongside each path.
pub fn read_list(path: &Path) -> Result<Vec<Vec<PathBuf>>> {
    let text = std::fs::read_to_string(path).map_err(Error::io_at(path))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.split_whitespace().map(|p| resolve(base, p)).collect())
        .collect())
}

pub fn resolve(base: &Path, p: impl AsRef<Path>) -> PathBuf {
    let p = p.as_ref();
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
