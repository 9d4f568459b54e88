//! In-memory grid types and a small NIfTI-1 subset.
//!
//! Only single-file, uncompressed, little-endian `.nii` files are handled.
//! Volumes and score maps are stored as 32-bit floats (datatype 16), masks as
//! unsigned bytes (datatype 2). The orientation block of the header (qform,
//! sform, quaternion and affine rows) is carried through reads and writes
//! byte for byte but never interpreted. Intensity scaling fields are ignored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";
pub const DT_UINT8: i16 = 2;
pub const DT_FLOAT32: i16 = 16;

const ORIENTATION_START: usize = 252;
const ORIENTATION_END: usize = 328;

/// Voxel counts along x, y and z. The x index varies fastest in memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Dims {
    pub fn new(x: usize, y: usize, z: usize) -> Self {
        Self { x, y, z }
    }

    pub fn cube(n: usize) -> Self {
        Self::new(n, n, n)
    }

    pub fn voxels(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.x * (j + self.y * k)
    }

    pub fn coords(&self, v: usize) -> (usize, usize, usize) {
        (v % self.x, (v / self.x) % self.y, v / (self.x * self.y))
    }

    fn ensure_positive(&self) -> Result<()> {
        if self.x == 0 || self.y == 0 || self.z == 0 {
            return Err(Error::Invalid(format!("zero-sized dims {self:?}")));
        }
        Ok(())
    }
}

impl From<[usize; 3]> for Dims {
    fn from(d: [usize; 3]) -> Self {
        Self::new(d[0], d[1], d[2])
    }
}

/// Voxel spacing in millimetres.
pub type Spacing = [f32; 3];

/// Raw orientation block of a NIfTI-1 header (bytes 252..328).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Orientation([u8; ORIENTATION_END - ORIENTATION_START]);

impl Default for Orientation {
    fn default() -> Self {
        Self([0; ORIENTATION_END - ORIENTATION_START])
    }
}

fn check_spacing(spacing: &Spacing) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("spacing must be positive, got {spacing:?}")))
    }
}

/// S channels over an X×Y×Z grid, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelVolume {
    channels: usize,
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
    orientation: Orientation,
}

impl MultiChannelVolume {
    pub fn new(channels: usize, dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Invalid("volume needs at least one channel".into()));
        }
        dims.ensure_positive()?;
        check_spacing(&spacing)?;
        if data.len() != channels * dims.voxels() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != {} channels x {} voxels",
                data.len(),
                channels,
                dims.voxels()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data"));
        }
        Ok(Self {
            channels,
            dims,
            spacing,
            data,
            orientation: Orientation::default(),
        })
    }

    pub fn zeros(channels: usize, dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(channels, dims, spacing, vec![0.0; channels * dims.voxels()])
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        self.dims.voxels()
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn orientation(&self) -> &Orientation {
        &self.orientation
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the payload. Callers must keep every value finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, s: usize) -> &[f32] {
        let v = self.voxels();
        &self.data[s * v..(s + 1) * v]
    }

    pub fn channel_mut(&mut self, s: usize) -> &mut [f32] {
        let v = self.voxels();
        &mut self.data[s * v..(s + 1) * v]
    }

    /// True when channel count and grid match.
    pub fn same_shape(&self, other: &MultiChannelVolume) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }
}

/// One boolean per voxel. May be empty (e.g. a healthy study's lesion mask).
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    dims: Dims,
    spacing: Spacing,
    data: Vec<bool>,
    orientation: Orientation,
}

impl BinaryMask {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<bool>) -> Result<Self> {
        dims.ensure_positive()?;
        check_spacing(&spacing)?;
        if data.len() != dims.voxels() {
            return Err(Error::ShapeMismatch(format!(
                "mask length {} != {} voxels",
                data.len(),
                dims.voxels()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
            orientation: Orientation::default(),
        })
    }

    pub fn empty(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(dims, spacing, vec![false; dims.voxels()])
    }

    pub fn full(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(dims, spacing, vec![true; dims.voxels()])
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn orientation(&self) -> &Orientation {
        &self.orientation
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn get(&self, v: usize) -> bool {
        self.data[v]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }
}

/// Binary mask restricting all statistics and scores. Holds at least one voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMask(BinaryMask);

impl HeadMask {
    pub fn new(mask: BinaryMask) -> Result<Self> {
        if mask.count() == 0 {
            return Err(Error::Invalid("head mask has no voxels set".into()));
        }
        Ok(Self(mask))
    }

    pub fn full(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(BinaryMask::full(dims, spacing)?)
    }

    pub fn as_mask(&self) -> &BinaryMask {
        &self.0
    }

    pub fn into_mask(self) -> BinaryMask {
        self.0
    }

    pub fn dims(&self) -> Dims {
        self.0.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.0.spacing
    }

    pub fn data(&self) -> &[bool] {
        &self.0.data
    }

    pub fn get(&self, v: usize) -> bool {
        self.0.data[v]
    }

    pub fn count(&self) -> usize {
        self.0.count()
    }

    pub fn ensure_dims(&self, dims: Dims) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::ShapeMismatch(format!(
                "mask dims {:?} != volume dims {:?}",
                self.dims(),
                dims
            )));
        }
        Ok(())
    }
}

/// One non-negative anomaly score per voxel, zero outside the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
    orientation: Orientation,
}

impl ScoreMap {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        dims.ensure_positive()?;
        check_spacing(&spacing)?;
        if data.len() != dims.voxels() {
            return Err(Error::ShapeMismatch(format!(
                "score map length {} != {} voxels",
                data.len(),
                dims.voxels()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score map"));
        }
        if data.iter().any(|&v| v < 0.0) {
            return Err(Error::Invalid("score map holds negative values".into()));
        }
        Ok(Self {
            dims,
            spacing,
            data,
            orientation: Orientation::default(),
        })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; dims.voxels()])
    }

    /// Builds a score map from raw scores, zeroing everything outside `mask`.
    pub fn masked(mask: &HeadMask, data: Vec<f32>) -> Result<Self> {
        let mut data = data;
        if data.len() == mask.dims().voxels() {
            for (value, &inside) in data.iter_mut().zip(mask.data()) {
                if !inside {
                    *value = 0.0;
                }
            }
        }
        Self::new(mask.dims(), mask.spacing(), data)
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Result<Self> {
        check_spacing(&spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn orientation(&self) -> &Orientation {
        &self.orientation
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

impl TryFrom<MultiChannelVolume> for ScoreMap {
    type Error = Error;

    fn try_from(vol: MultiChannelVolume) -> Result<Self> {
        if vol.channels != 1 {
            return Err(Error::ShapeMismatch(format!(
                "score map must have one channel, got {}",
                vol.channels
            )));
        }
        let orientation = vol.orientation.clone();
        Ok(ScoreMap::new(vol.dims, vol.spacing, vol.data)?.with_orientation(orientation))
    }
}

/// Result of [`read_volume`].
#[derive(Clone, Debug, PartialEq)]
pub enum Grid {
    Volume(MultiChannelVolume),
    Mask(BinaryMask),
}

/// Parsed subset of a NIfTI-1 header.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiInfo {
    pub datatype: i16,
    pub dims: Dims,
    pub channels: usize,
    pub spacing: Spacing,
    pub vox_offset: u64,
    pub orientation: Orientation,
}

impl NiftiInfo {
    fn bytes_per_value(&self) -> usize {
        if self.datatype == DT_UINT8 {
            1
        } else {
            4
        }
    }

    pub fn payload_bytes(&self) -> u64 {
        (self.channels * self.dims.voxels() * self.bytes_per_value()) as u64
    }
}

fn le_i16(buf: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([buf[at], buf[at + 1]])
}

fn le_i32(buf: &[u8], at: usize) -> i32 {
    i32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

fn le_f32(buf: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

/// Parses a 348-byte header block.
pub fn parse_header(buf: &[u8]) -> Result<NiftiInfo> {
    if buf.len() < HEADER_SIZE
        || le_i32(buf, 0) != HEADER_SIZE as i32
        || &buf[344..348] != MAGIC
    {
        return Err(Error::NotNifti);
    }
    let ndim = le_i16(buf, 40);
    if !(3..=4).contains(&ndim) {
        return Err(Error::DimCount(ndim));
    }
    let dim: Vec<i16> = (0..8).map(|i| le_i16(buf, 40 + 2 * i)).collect();
    if dim[1..=ndim as usize].iter().any(|&d| d < 1) {
        return Err(Error::Invalid(format!("non-positive dimension in {dim:?}")));
    }
    let datatype = le_i16(buf, 70);
    let bitpix = le_i16(buf, 72);
    match (datatype, bitpix) {
        (DT_UINT8, 8) | (DT_FLOAT32, 32) => {}
        (DT_UINT8, _) | (DT_FLOAT32, _) => {
            return Err(Error::Invalid(format!(
                "bitpix {bitpix} inconsistent with datatype {datatype}"
            )))
        }
        _ => return Err(Error::UnsupportedDatatype(datatype)),
    }
    let channels = if ndim == 4 { dim[4] as usize } else { 1 };
    if datatype == DT_UINT8 && channels != 1 {
        return Err(Error::Invalid("masks must be three-dimensional".into()));
    }
    let spacing = [le_f32(buf, 80), le_f32(buf, 84), le_f32(buf, 88)];
    check_spacing(&spacing)?;
    let vox_offset = le_f32(buf, 108);
    if vox_offset.is_nan() || vox_offset < HEADER_SIZE as f32 || vox_offset.fract() != 0.0 {
        return Err(Error::Invalid(format!("bad vox_offset {vox_offset}")));
    }
    let mut orientation = Orientation::default();
    orientation
        .0
        .copy_from_slice(&buf[ORIENTATION_START..ORIENTATION_END]);
    Ok(NiftiInfo {
        datatype,
        dims: Dims::new(dim[1] as usize, dim[2] as usize, dim[3] as usize),
        channels,
        spacing,
        vox_offset: vox_offset as u64,
        orientation,
    })
}

/// Reads and validates the header of `path`, including the payload length.
pub fn read_header(path: &Path) -> Result<NiftiInfo> {
    let mut file = File::open(path).map_err(Error::io_at(path))?;
    let file_len = file.metadata().map_err(Error::io_at(path))?.len();
    let mut buf = [0u8; HEADER_SIZE];
    file.read_exact(&mut buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::NotNifti
        } else {
            Error::IoAt {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })?;
    let info = parse_header(&buf)?;
    let actual = file_len.saturating_sub(info.vox_offset);
    if actual != info.payload_bytes() {
        return Err(Error::Truncated {
            expected: info.payload_bytes(),
            actual,
        });
    }
    Ok(info)
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Reads a volume (datatype 16) or mask (datatype 2).
pub fn read_volume(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let info = read_header(path)?;
    let mut file = BufReader::new(File::open(path).map_err(Error::io_at(path))?);
    file.seek(SeekFrom::Start(info.vox_offset))
        .map_err(Error::io_at(path))?;
    let mut payload = vec![0u8; info.payload_bytes() as usize];
    file.read_exact(&mut payload).map_err(Error::io_at(path))?;
    match info.datatype {
        DT_UINT8 => {
            let data = payload.iter().map(|&b| b != 0).collect();
            Ok(Grid::Mask(
                BinaryMask::new(info.dims, info.spacing, data)?.with_orientation(info.orientation),
            ))
        }
        _ => {
            let data = decode_f32(&payload);
            Ok(Grid::Volume(
                MultiChannelVolume::new(info.channels, info.dims, info.spacing, data)?
                    .with_orientation(info.orientation),
            ))
        }
    }
}

pub fn read_multichannel(path: impl AsRef<Path>) -> Result<MultiChannelVolume> {
    match read_volume(path)? {
        Grid::Volume(v) => Ok(v),
        Grid::Mask(_) => Err(Error::Invalid("expected a float volume, found a mask".into())),
    }
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    match read_volume(path)? {
        Grid::Mask(m) => Ok(m),
        Grid::Volume(_) => Err(Error::Invalid("expected a mask, found a float volume".into())),
    }
}

pub fn read_head_mask(path: impl AsRef<Path>) -> Result<HeadMask> {
    HeadMask::new(read_mask(path)?)
}

pub fn read_score_map(path: impl AsRef<Path>) -> Result<ScoreMap> {
    ScoreMap::try_from(read_multichannel(path)?)
}

/// Reads `voxels` of every channel from a float volume file, channel-major,
/// without loading the rest of the payload.
pub fn read_slab(path: &Path, info: &NiftiInfo, voxels: Range<usize>, out: &mut [f32]) -> Result<()> {
    let len = voxels.len();
    debug_assert_eq!(out.len(), info.channels * len);
    let mut file = File::open(path).map_err(Error::io_at(path))?;
    let mut bytes = vec![0u8; len * 4];
    let v = info.dims.voxels();
    for s in 0..info.channels {
        let at = info.vox_offset + ((s * v + voxels.start) * 4) as u64;
        file.seek(SeekFrom::Start(at)).map_err(Error::io_at(path))?;
        file.read_exact(&mut bytes).map_err(Error::io_at(path))?;
        for (dst, c) in out[s * len..(s + 1) * len]
            .iter_mut()
            .zip(bytes.chunks_exact(4))
        {
            *dst = f32::from_le_bytes(c.try_into().unwrap());
        }
    }
    Ok(())
}

/// Builds a 352-byte header block (348 header bytes plus an empty extension flag).
pub fn build_header(
    datatype: i16,
    dims: Dims,
    channels: usize,
    spacing: Spacing,
    orientation: &Orientation,
) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let ndim: i16 = if channels > 1 { 4 } else { 3 };
    let dim: [i16; 8] = [
        ndim,
        dims.x as i16,
        dims.y as i16,
        dims.z as i16,
        channels as i16,
        1,
        1,
        1,
    ];
    for (i, d) in dim.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    let bitpix: i16 = if datatype == DT_UINT8 { 8 } else { 32 };
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    let pixdim: [f32; 8] = [1.0, spacing[0], spacing[1], spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    // millimetres
    h[123] = 2;
    h[ORIENTATION_START..ORIENTATION_END].copy_from_slice(&orientation.0);
    h[344..348].copy_from_slice(MAGIC);
    h
}

fn check_nifti_dims(dims: Dims, channels: usize) -> Result<()> {
    let max = i16::MAX as usize;
    if dims.x > max || dims.y > max || dims.z > max || channels > max {
        return Err(Error::Invalid(format!(
            "dims {dims:?} x {channels} exceed the NIfTI-1 limit"
        )));
    }
    Ok(())
}

fn write_file(path: &Path, header: &[u8], payload: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(Error::io_at(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(header).map_err(Error::io_at(path))?;
    payload(&mut w).map_err(Error::io_at(path))?;
    w.flush().map_err(Error::io_at(path))?;
    Ok(())
}

fn write_f32s(w: &mut dyn Write, data: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(1 << 16);
    for chunk in data.chunks(1 << 14) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Grids that can be written as a single-file NIfTI-1.
pub trait WriteNifti {
    fn write_nifti(&self, path: &Path) -> Result<()>;
}

impl WriteNifti for MultiChannelVolume {
    fn write_nifti(&self, path: &Path) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data"));
        }
        check_nifti_dims(self.dims, self.channels)?;
        let header = build_header(DT_FLOAT32, self.dims, self.channels, self.spacing, &self.orientation);
        write_file(path, &header, |w| write_f32s(w, &self.data))
    }
}

impl WriteNifti for ScoreMap {
    fn write_nifti(&self, path: &Path) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score map"));
        }
        check_nifti_dims(self.dims, 1)?;
        let header = build_header(DT_FLOAT32, self.dims, 1, self.spacing, &self.orientation);
        write_file(path, &header, |w| write_f32s(w, &self.data))
    }
}

impl WriteNifti for BinaryMask {
    fn write_nifti(&self, path: &Path) -> Result<()> {
        check_nifti_dims(self.dims, 1)?;
        let header = build_header(DT_UINT8, self.dims, 1, self.spacing, &self.orientation);
        let bytes: Vec<u8> = self.data.iter().map(|&b| b as u8).collect();
        write_file(path, &header, |w| w.write_all(&bytes))
    }
}

impl WriteNifti for HeadMask {
    fn write_nifti(&self, path: &Path) -> Result<()> {
        self.0.write_nifti(path)
    }
}

pub fn write_volume(grid: &impl WriteNifti, path: impl AsRef<Path>) -> Result<()> {
    grid.write_nifti(path.as_ref())
}
