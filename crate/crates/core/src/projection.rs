//! Projection model: an orthonormal basis of the subspace spanned by the
//! training z-maps, built with modified Gram-Schmidt. A test z-map is scored
//! by the per-voxel channel norm of its residual after projecting out every
//! basis vector in turn.
//!
//! The basis can live on disk. Each basis vector is then streamed in chunks
//! of [`CHUNK`] floats for every dot product and update, so only the vector
//! being orthogonalized (or scored) is held in memory.
//!
//! With [`ProjectionVariant::RawSequential`] the training vectors are only
//! scaled to unit length and never orthogonalized. Scoring then applies the
//! sequential subtraction loop to raw directions, which is an orthogonal
//! projection only when the training vectors happen to be orthogonal.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::{channel_norms, BaselineModel, ZMap};
use crate::error::{Error, Result};
use crate::model_file::{ModelHeader, ModelKind, ModelReader, ModelWriter, HEADER_LEN};
use crate::reduce::{self, OrderedSum, BLOCK};
use crate::volume::{Dims, HeadMask, MultiChannelVolume, ScoreMap};

/// Streaming chunk length in floats (1 MiB). A multiple of [`BLOCK`], so
/// file-backed and in-memory bases give bit-identical dot products.
pub const CHUNK: usize = BLOCK * 64;

/// A training vector is kept when its residual norm exceeds this fraction of
/// its original norm.
pub const DROP_TOLERANCE: f64 = 1e-6;

/// Projection header: common header, then `u32 K`, then `u8 variant`.
const PM_HEADER_LEN: u64 = HEADER_LEN + 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum ProjectionVariant {
    #[default]
    Orthonormal = 0,
    RawSequential = 1,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectionOptions {
    pub variant: ProjectionVariant,
    pub drop_tolerance: f64,
}

impl Default for ProjectionOptions {
    fn default() -> Self {
        Self {
            variant: ProjectionVariant::Orthonormal,
            drop_tolerance: DROP_TOLERANCE,
        }
    }
}

/// Where the basis vectors are kept during and after fitting.
#[derive(Clone, Debug)]
pub enum BasisStorage {
    Memory,
    /// Basis vectors are written straight into this `.sbad` file.
    File(PathBuf),
}

#[derive(Debug)]
enum Backing {
    Memory(Vec<Vec<f32>>),
    File { path: PathBuf, offset: u64 },
}

#[derive(Debug)]
pub struct Basis {
    vector_len: usize,
    count: usize,
    backing: Backing,
}

impl Basis {
    fn memory(vector_len: usize) -> Self {
        Self {
            vector_len,
            count: 0,
            backing: Backing::Memory(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn vector_len(&self) -> usize {
        self.vector_len
    }

    pub fn is_file_backed(&self) -> bool {
        matches!(self.backing, Backing::File { .. })
    }

    /// Calls `f(start, chunk)` for consecutive chunks of basis vector `i`.
    fn for_each_chunk(&self, i: usize, mut f: impl FnMut(usize, &[f32])) -> Result<()> {
        match &self.backing {
            Backing::Memory(vs) => {
                for (c, chunk) in vs[i].chunks(CHUNK).enumerate() {
                    f(c * CHUNK, chunk);
                }
                Ok(())
            }
            Backing::File { path, offset } => {
                let mut file = File::open(path).map_err(Error::io_at(path))?;
                let start = offset + (i * self.vector_len * 4) as u64;
                file.seek(SeekFrom::Start(start)).map_err(Error::io_at(path))?;
                let mut bytes = vec![0u8; 4 * CHUNK.min(self.vector_len)];
                let mut floats = vec![0.0f32; CHUNK.min(self.vector_len)];
                let mut at = 0;
                while at < self.vector_len {
                    let take = CHUNK.min(self.vector_len - at);
                    file.read_exact(&mut bytes[..4 * take]).map_err(Error::io_at(path))?;
                    for (dst, c) in floats[..take].iter_mut().zip(bytes.chunks_exact(4)) {
                        *dst = f32::from_le_bytes(c.try_into().unwrap());
                    }
                    f(at, &floats[..take]);
                    at += take;
                }
                Ok(())
            }
        }
    }

    pub fn dot(&self, i: usize, r: &[f64]) -> Result<f64> {
        let mut acc = OrderedSum::new();
        self.for_each_chunk(i, |start, chunk| acc.add_dot(&r[start..start + chunk.len()], chunk))?;
        Ok(acc.total())
    }

    fn sub_scaled(&self, i: usize, c: f64, r: &mut [f64]) -> Result<()> {
        self.for_each_chunk(i, |start, chunk| {
            reduce::sub_scaled(&mut r[start..start + chunk.len()], c, chunk)
        })
    }

    /// Sequentially removes the component along every basis vector from `r`.
    pub fn project_out(&self, r: &mut [f64]) -> Result<()> {
        for i in 0..self.count {
            let c = self.dot(i, r)?;
            self.sub_scaled(i, c, r)?;
        }
        Ok(())
    }

    pub fn vector(&self, i: usize) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(self.vector_len);
        self.for_each_chunk(i, |_, chunk| out.extend_from_slice(chunk))?;
        Ok(out)
    }

    fn push(&mut self, q: Vec<f32>) -> Result<()> {
        match &mut self.backing {
            Backing::Memory(vs) => vs.push(q),
            Backing::File { path, offset } => {
                let at = *offset + (self.count * self.vector_len * 4) as u64;
                let mut file = OpenOptions::new().write(true).open(&*path).map_err(Error::io_at(&*path))?;
                file.seek(SeekFrom::Start(at)).map_err(Error::io_at(&*path))?;
                let mut w = ModelWriter::new(BufWriter::new(file));
                w.f32s(&q)?;
                w.finish()?;
            }
        }
        self.count += 1;
        Ok(())
    }
}

/// The residual `z - Σ (z·q_i) q_i`, shaped like the input z-map.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMap(MultiChannelVolume);

impl ResidualMap {
    pub fn volume(&self) -> &MultiChannelVolume {
        &self.0
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }

    pub fn into_zmap(self) -> ZMap {
        ZMap::new(self.0)
    }
}

#[derive(Debug)]
pub struct ProjectionModel {
    channels: usize,
    dims: Dims,
    n_train: usize,
    variant: ProjectionVariant,
    basis: Basis,
    source_norms: Vec<f32>,
    dropped: Vec<usize>,
    mask: HeadMask,
}

fn check_shape(z: &ZMap, channels: usize, dims: Dims) -> Result<()> {
    let vol = z.volume();
    if vol.channels() != channels || vol.dims() != dims {
        return Err(Error::ShapeMismatch(format!(
            "z-map is {}x{:?}, expected {}x{:?}",
            vol.channels(),
            vol.dims(),
            channels,
            dims
        )));
    }
    Ok(())
}

/// The z-map as f64 with every entry outside the mask set to zero.
fn masked_vector(z: &ZMap, mask: &HeadMask) -> Vec<f64> {
    let v = mask.dims().voxels();
    z.data()
        .iter()
        .enumerate()
        .map(|(at, &x)| if mask.get(at % v) { x as f64 } else { 0.0 })
        .collect()
}

fn write_pm_header(file: &mut File, h: &ModelHeader, k: usize, variant: ProjectionVariant) -> Result<()> {
    file.seek(SeekFrom::Start(0))?;
    let mut w = ModelWriter::new(&mut *file);
    w.header(h)?;
    w.u32(k as u32)?;
    w.u8(variant as u8)?;
    w.finish()?;
    Ok(())
}

/// Builds the basis from a stream of training z-maps, in stream order.
pub fn fit_projection<I>(zmaps: I, mask: &HeadMask, opts: ProjectionOptions, storage: BasisStorage) -> Result<ProjectionModel>
where
    I: IntoIterator<Item = Result<ZMap>>,
{
    let mut zmaps = zmaps.into_iter().peekable();
    let first = match zmaps.peek() {
        None => return Err(Error::Invalid("projection fit needs at least one training z-map".into())),
        Some(Err(_)) => return Err(zmaps.next().unwrap().unwrap_err()),
        Some(Ok(z)) => z,
    };
    let channels = first.volume().channels();
    let dims = first.volume().dims();
    mask.ensure_dims(dims)?;
    let vector_len = channels * dims.voxels();

    let mut basis = match &storage {
        BasisStorage::Memory => Basis::memory(vector_len),
        BasisStorage::File(path) => {
            let mut file = File::create(path).map_err(Error::io_at(path))?;
            let h = ModelHeader {
                kind: ModelKind::Projection,
                channels,
                dims,
                n_train: 0,
            };
            write_pm_header(&mut file, &h, 0, opts.variant)?;
            Basis {
                vector_len,
                count: 0,
                backing: Backing::File {
                    path: path.clone(),
                    offset: PM_HEADER_LEN,
                },
            }
        }
    };

    let mut source_norms = Vec::new();
    let mut dropped = Vec::new();
    let mut n_train = 0;
    for (i, z) in zmaps.enumerate() {
        let z = z?;
        check_shape(&z, channels, dims)?;
        n_train += 1;
        let mut v = masked_vector(&z, mask);
        let norm0 = reduce::norm(&v);
        if !norm0.is_finite() {
            return Err(Error::NonFinite("training z-map"));
        }
        if norm0 == 0.0 {
            dropped.push(i);
            continue;
        }
        let norm = match opts.variant {
            ProjectionVariant::RawSequential => norm0,
            ProjectionVariant::Orthonormal => {
                basis.project_out(&mut v)?;
                let mut norm = reduce::norm(&v);
                if norm < 0.5 * norm0 {
                    basis.project_out(&mut v)?;
                    norm = reduce::norm(&v);
                }
                if norm.is_nan() || norm <= opts.drop_tolerance * norm0 {
                    dropped.push(i);
                    continue;
                }
                norm
            }
        };
        let q: Vec<f32> = v.iter().map(|x| (x / norm) as f32).collect();
        basis.push(q)?;
        source_norms.push(norm0 as f32);
    }
    if basis.is_empty() {
        return Err(Error::AllZeroTraining);
    }
    log::info!(
        "projection fit: kept {} of {} training vectors ({} dropped)",
        basis.len(),
        n_train,
        dropped.len()
    );
    Ok(ProjectionModel {
        channels,
        dims,
        n_train,
        variant: opts.variant,
        basis,
        source_norms,
        dropped,
        mask: mask.clone(),
    })
}

impl ProjectionModel {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn variant(&self) -> ProjectionVariant {
        self.variant
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn rank(&self) -> usize {
        self.basis.len()
    }

    /// Norms of the kept training vectors before orthogonalization.
    pub fn source_norms(&self) -> &[f32] {
        &self.source_norms
    }

    /// 0-based stream indices of training vectors discarded as dependent.
    pub fn dropped(&self) -> &[usize] {
        &self.dropped
    }

    pub fn mask(&self) -> &HeadMask {
        &self.mask
    }

    /// Residual of `z` after projecting out the basis, plus its per-voxel norm.
    pub fn score(&self, z: &ZMap) -> Result<(ResidualMap, ScoreMap)> {
        check_shape(z, self.channels, self.dims)?;
        let mut r = masked_vector(z, &self.mask);
        self.basis.project_out(&mut r)?;
        let data: Vec<f32> = r.iter().map(|&x| x as f32).collect();
        let spacing = z.volume().spacing();
        let residual = MultiChannelVolume::new(self.channels, self.dims, spacing, data)?;
        let norms = channel_norms(residual.data(), self.channels, self.dims.voxels());
        let score = ScoreMap::masked(&self.mask, norms)?.with_spacing(spacing)?;
        Ok((ResidualMap(residual), score))
    }

    /// Convenience for scoring a normalized study through its baseline z-map.
    pub fn score_study(
        &self,
        baseline: &BaselineModel,
        study: &crate::preprocess::NormalizedStudy,
    ) -> Result<(ResidualMap, ScoreMap)> {
        self.score(&baseline.z_transform(study)?)
    }

    fn header(&self) -> ModelHeader {
        ModelHeader {
            kind: ModelKind::Projection,
            channels: self.channels,
            dims: self.dims,
            n_train: self.n_train,
        }
    }

    fn write_trailer<W: Write>(&self, w: &mut ModelWriter<W>, baseline: &BaselineModel) -> Result<()> {
        w.f32s(&self.source_norms)?;
        w.u32(self.dropped.len() as u32)?;
        for &d in &self.dropped {
            w.u32(d as u32)?;
        }
        w.mask(&self.mask)?;
        w.u32(baseline.n_train() as u32)?;
        baseline.write_payload(w)
    }

    /// Layout: common header | `u32 K` | `u8 variant` | `f32 basis[K*S*V]` |
    /// `f32 source_norms[K]` | `u32 n_dropped` | `u32 dropped[n_dropped]` |
    /// `u8 mask[V]` | `u32 baseline N` | baseline payload.
    ///
    /// When the basis is already file-backed at `path` only the trailer and
    /// header are written; the basis vectors stay where they are.
    pub fn save(&self, path: &Path, baseline: &BaselineModel) -> Result<()> {
        if baseline.channels() != self.channels || baseline.dims() != self.dims {
            return Err(Error::ShapeMismatch("baseline does not match projection model".into()));
        }
        let basis_end = PM_HEADER_LEN + (self.basis.len() * self.basis.vector_len * 4) as u64;
        if let Backing::File { path: own, .. } = &self.basis.backing {
            if same_file(own, path) {
                let mut file = OpenOptions::new().write(true).open(path).map_err(Error::io_at(path))?;
                file.set_len(basis_end).map_err(Error::io_at(path))?;
                file.seek(SeekFrom::Start(basis_end)).map_err(Error::io_at(path))?;
                let mut w = ModelWriter::new(BufWriter::new(&mut file));
                self.write_trailer(&mut w, baseline)?;
                w.finish()?;
                write_pm_header(&mut file, &self.header(), self.basis.len(), self.variant)?;
                return Ok(());
            }
        }
        let mut w = ModelWriter::create(path)?;
        w.header(&self.header())?;
        w.u32(self.basis.len() as u32)?;
        w.u8(self.variant as u8)?;
        for i in 0..self.basis.len() {
            let mut res = Ok(());
            self.basis.for_each_chunk(i, |_, chunk| {
                if res.is_ok() {
                    res = w.f32s(chunk);
                }
            })?;
            res?;
        }
        self.write_trailer(&mut w, baseline)?;
        w.finish()?;
        Ok(())
    }

    /// Opens a projection model file. The basis stays on disk.
    pub fn load(path: &Path) -> Result<(Self, BaselineModel)> {
        let mut r = ModelReader::open(path)?;
        let h = r.header()?;
        if h.kind != ModelKind::Projection {
            return Err(Error::BadModel(format!("expected a projection model, found {:?}", h.kind)));
        }
        let k = r.u32()? as usize;
        let variant = match r.u8()? {
            0 => ProjectionVariant::Orthonormal,
            1 => ProjectionVariant::RawSequential,
            other => return Err(Error::BadModel(format!("unknown projection variant {other}"))),
        };
        if k == 0 {
            return Err(Error::BadModel("projection model has an empty basis".into()));
        }
        let vector_len = h.channels * h.dims.voxels();
        let basis_end = PM_HEADER_LEN + (k * vector_len * 4) as u64;
        drop(r);

        let mut file = File::open(path).map_err(Error::io_at(path))?;
        file.seek(SeekFrom::Start(basis_end)).map_err(Error::io_at(path))?;
        let mut r = ModelReader::new(std::io::BufReader::new(file));
        let source_norms = r.f32s(k)?;
        let n_dropped = r.u32()? as usize;
        let dropped = (0..n_dropped)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mask = r.mask(h.dims)?;
        let baseline_n = r.u32()? as usize;
        let baseline = BaselineModel::read_payload(
            &mut r,
            ModelHeader {
                kind: ModelKind::Baseline,
                channels: h.channels,
                dims: h.dims,
                n_train: baseline_n,
            },
        )?;
        let model = Self {
            channels: h.channels,
            dims: h.dims,
            n_train: h.n_train,
            variant,
            basis: Basis {
                vector_len,
                count: k,
                backing: Backing::File {
                    path: path.to_path_buf(),
                    offset: PM_HEADER_LEN,
                },
            },
            source_norms,
            dropped,
            mask,
        };
        Ok((model, baseline))
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}
