//! Baseline model: an independent normal distribution per voxel and channel.
//!
//! Fitting is two-pass (means, then squared deviations) over voxel slabs so
//! that the training set is never memory-resident. Each voxel's accumulator
//! sees the studies in stream order, so the result does not depend on how
//! many workers split the slab.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model_file::{ModelHeader, ModelKind, ModelReader, ModelWriter};
use crate::preprocess::NormalizedStudy;
use crate::source::{slabs, StudySource};
use crate::volume::{Dims, HeadMask, MultiChannelVolume, ScoreMap};

/// Lower bound applied to every fitted standard deviation.
pub const SIGMA_FLOOR: f32 = 1e-6;

pub const DEFAULT_SLAB_VOXELS: usize = 1 << 16;

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub slab_voxels: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            slab_voxels: DEFAULT_SLAB_VOXELS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel {
    channels: usize,
    dims: Dims,
    n_train: usize,
    mu: Vec<f32>,
    sigma: Vec<f32>,
    degenerate: u64,
    mask: HeadMask,
}

/// Per-voxel, per-channel z-scores of one study. Zero outside the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ZMap(MultiChannelVolume);

impl ZMap {
    pub fn new(volume: MultiChannelVolume) -> Self {
        Self(volume)
    }

    pub fn from_parts(channels: usize, dims: Dims, data: Vec<f32>) -> Result<Self> {
        Ok(Self(MultiChannelVolume::new(channels, dims, [1.0; 3], data)?))
    }

    pub fn volume(&self) -> &MultiChannelVolume {
        &self.0
    }

    pub fn into_volume(self) -> MultiChannelVolume {
        self.0
    }

    pub fn data(&self) -> &[f32] {
        self.0.data()
    }
}

/// Euclidean norm over channels at every voxel of a channel-major array.
pub(crate) fn channel_norms(data: &[f32], channels: usize, voxels: usize) -> Vec<f32> {
    (0..voxels)
        .into_par_iter()
        .map(|v| {
            let ss: f64 = (0..channels)
                .map(|s| {
                    let z = data[s * voxels + v] as f64;
                    z * z
                })
                .sum();
            ss.sqrt() as f32
        })
        .collect()
}

/// Per-voxel norm of a z-map, zero outside the mask.
pub fn score_zmap(z: &ZMap, mask: &HeadMask) -> Result<ScoreMap> {
    mask.ensure_dims(z.volume().dims())?;
    let vol = z.volume();
    let norms = channel_norms(vol.data(), vol.channels(), vol.voxels());
    ScoreMap::masked(mask, norms)?.with_spacing(vol.spacing())
}

pub(crate) fn check_source(source: &dyn StudySource, mask: &HeadMask) -> Result<()> {
    if source.len() < 2 {
        return Err(Error::TooFewStudies);
    }
    mask.ensure_dims(source.dims())
}

/// Per-slab means over the training stream, in f64.
pub(crate) fn slab_means(
    source: &dyn StudySource,
    range: std::ops::Range<usize>,
    buf: &mut [f32],
) -> Result<Vec<f64>> {
    let mut sum = vec![0.0f64; buf.len()];
    for i in 0..source.len() {
        source.read_slab(i, range.clone(), buf)?;
        sum.par_iter_mut()
            .zip(buf.par_iter())
            .for_each(|(acc, &x)| *acc += x as f64);
    }
    let n = source.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(sum)
}

pub fn fit_baseline(source: &dyn StudySource, mask: &HeadMask, opts: FitOptions) -> Result<BaselineModel> {
    check_source(source, mask)?;
    let channels = source.channels();
    let dims = source.dims();
    let v = dims.voxels();
    let n = source.len();
    let mut mu = vec![0.0f32; channels * v];
    let mut sigma = vec![0.0f32; channels * v];
    let mut degenerate = 0u64;

    for range in slabs(v, opts.slab_voxels) {
        let len = range.len();
        let mut buf = vec![0.0f32; channels * len];
        let mean = slab_means(source, range.clone(), &mut buf)?;
        let mut ss = vec![0.0f64; channels * len];
        for i in 0..n {
            source.read_slab(i, range.clone(), &mut buf)?;
            ss.par_iter_mut()
                .zip(buf.par_iter().zip(mean.par_iter()))
                .for_each(|(acc, (&x, &m))| {
                    let d = x as f64 - m;
                    *acc += d * d;
                });
        }
        for s in 0..channels {
            for k in 0..len {
                let at = s * len + k;
                let voxel = range.start + k;
                let sd = (ss[at] / (n - 1) as f64).sqrt() as f32;
                let clamped = sd.max(SIGMA_FLOOR);
                if sd < SIGMA_FLOOR && mask.get(voxel) {
                    degenerate += 1;
                }
                mu[s * v + voxel] = mean[at] as f32;
                sigma[s * v + voxel] = clamped;
            }
        }
    }
    if degenerate > 0 {
        log::info!("baseline fit: {degenerate} voxel-channels clamped to the sigma floor");
    }
    Ok(BaselineModel {
        channels,
        dims,
        n_train: n,
        mu,
        sigma,
        degenerate,
        mask: mask.clone(),
    })
}

impl BaselineModel {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn n_train(&self) -> usize {
        self.n_train
    }

    pub fn mu(&self) -> &[f32] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f32] {
        &self.sigma
    }

    pub fn mask(&self) -> &HeadMask {
        &self.mask
    }

    /// Number of in-mask voxel-channels whose standard deviation was clamped.
    pub fn degenerate_count(&self) -> u64 {
        self.degenerate
    }

    pub(crate) fn check_study(&self, vol: &MultiChannelVolume) -> Result<()> {
        if vol.channels() != self.channels || vol.dims() != self.dims {
            return Err(Error::ShapeMismatch(format!(
                "study is {}x{:?}, model expects {}x{:?}",
                vol.channels(),
                vol.dims(),
                self.channels,
                self.dims
            )));
        }
        Ok(())
    }

    pub fn z_transform(&self, study: &NormalizedStudy) -> Result<ZMap> {
        let vol = study.volume();
        self.check_study(vol)?;
        let v = self.dims.voxels();
        let mask = self.mask.data();
        let mut out = vol.clone();
        out.data_mut()
            .par_iter_mut()
            .enumerate()
            .for_each(|(at, x)| {
                *x = if mask[at % v] {
                    ((*x as f64 - self.mu[at] as f64) / self.sigma[at] as f64) as f32
                } else {
                    0.0
                };
            });
        if out.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("z-map"));
        }
        Ok(ZMap(out))
    }

    pub fn score(&self, study: &NormalizedStudy) -> Result<ScoreMap> {
        score_zmap(&self.z_transform(study)?, &self.mask)
    }

    /// Payload after the common header:
    /// `u64 degenerate | f32 mu[S*V] | f32 sigma[S*V] | u8 mask[V]`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ModelWriter::create(path)?;
        w.header(&self.header())?;
        self.write_payload(&mut w)?;
        w.finish()?;
        Ok(())
    }

    pub(crate) fn header(&self) -> ModelHeader {
        ModelHeader {
            kind: ModelKind::Baseline,
            channels: self.channels,
            dims: self.dims,
            n_train: self.n_train,
        }
    }

    pub(crate) fn write_payload<W: std::io::Write>(&self, w: &mut ModelWriter<W>) -> Result<()> {
        w.u64(self.degenerate)?;
        w.f32s(&self.mu)?;
        w.f32s(&self.sigma)?;
        w.mask(&self.mask)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = ModelReader::open(path)?;
        let h = r.header()?;
        if h.kind != ModelKind::Baseline {
            return Err(Error::BadModel(format!("expected a baseline model, found {:?}", h.kind)));
        }
        Self::read_payload(&mut r, h)
    }

    pub(crate) fn read_payload<R: std::io::Read>(r: &mut ModelReader<R>, h: ModelHeader) -> Result<Self> {
        let n = h.channels * h.dims.voxels();
        let degenerate = r.u64()?;
        let mu = r.f32s(n)?;
        let sigma = r.f32s(n)?;
        let mask = r.mask(h.dims)?;
        if sigma.iter().any(|&s| s.is_nan() || s < SIGMA_FLOOR) || mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::BadModel("invalid mu/sigma values".into()));
        }
        Ok(Self {
            channels: h.channels,
            dims: h.dims,
            n_train: h.n_train,
            mu,
            sigma,
            degenerate,
            mask,
        })
    }
}
