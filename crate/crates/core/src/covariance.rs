//! Covariance model: a full S×S channel covariance at every voxel, scored by
//! the squared Mahalanobis distance `yᵀ Σ⁻¹ y`.
//!
//! Symmetric matrices are packed row-major upper-triangular: for channels
//! `i <= j` the entry lives at `i*S - i*(i+1)/2 + j`, so `S = 2` packs as
//! `(0,0) (0,1) (1,1)`. The stored factor `U` is upper triangular with
//! `Σ = Uᵀ U`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{check_source, slab_means, FitOptions, SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::model_file::{ModelHeader, ModelKind, ModelReader, ModelWriter};
use crate::preprocess::NormalizedStudy;
use crate::source::{slabs, StudySource};
use crate::volume::{Dims, HeadMask, ScoreMap};

/// Ridge multipliers tried in order, relative to `trace(Σ)/S`.
pub const RIDGE_STEPS: [f64; 4] = [1e-4, 1e-3, 1e-2, 1e-1];

/// A pivot at or below this fraction of its diagonal entry fails the factorization.
pub const PIVOT_TOLERANCE: f64 = 1e-6;

pub fn packed_len(channels: usize) -> usize {
    channels * (channels + 1) / 2
}

#[inline]
pub fn packed_index(channels: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j);
    i * channels - i * (i + 1) / 2 + j
}

/// How the covariance at one voxel was made positive definite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum VoxelFit {
    Exact = 0,
    Ridge = 1,
    Diagonal = 2,
    Outside = 3,
}

impl VoxelFit {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => Self::Exact,
            1 => Self::Ridge,
            2 => Self::Diagonal,
            3 => Self::Outside,
            other => return Err(Error::BadModel(format!("unknown voxel status {other}"))),
        })
    }
}

/// Upper Cholesky factor of a packed SPD matrix, or `None` when a pivot is
/// not clearly positive.
pub fn cholesky_upper(channels: usize, sigma: &[f64]) -> Option<Vec<f64>> {
    let s = channels;
    let mut u = vec![0.0f64; packed_len(s)];
    for i in 0..s {
        let aii = sigma[packed_index(s, i, i)];
        let mut d = aii;
        for k in 0..i {
            let uki = u[packed_index(s, k, i)];
            d -= uki * uki;
        }
        if aii.is_nan() || d.is_nan() || aii <= 0.0 || d <= PIVOT_TOLERANCE * aii {
            return None;
        }
        let uii = d.sqrt();
        u[packed_index(s, i, i)] = uii;
        for j in i + 1..s {
            let mut t = sigma[packed_index(s, i, j)];
            for k in 0..i {
                t -= u[packed_index(s, k, i)] * u[packed_index(s, k, j)];
            }
            u[packed_index(s, i, j)] = t / uii;
        }
    }
    Some(u)
}

/// `yᵀ Σ⁻¹ y` given the upper factor: solve `Uᵀ w = y`, return `|w|²`.
pub fn mahalanobis_sq(channels: usize, u: &[f32], y: &[f64]) -> f64 {
    let s = channels;
    let mut w = [0.0f64; 64];
    let mut w_heap;
    let w: &mut [f64] = if s <= 64 {
        &mut w[..s]
    } else {
        w_heap = vec![0.0; s];
        &mut w_heap
    };
    let mut r = 0.0;
    for i in 0..s {
        let mut t = y[i];
        for k in 0..i {
            t -= u[packed_index(s, k, i)] as f64 * w[k];
        }
        w[i] = t / u[packed_index(s, i, i)] as f64;
        r += w[i] * w[i];
    }
    r
}

struct VoxelResult {
    cov: Vec<f64>,
    chol: Vec<f64>,
    ridge: f64,
    status: VoxelFit,
}

/// Applies the ridge policy to one voxel's covariance.
fn regularize(channels: usize, cov: Vec<f64>) -> VoxelResult {
    if let Some(chol) = cholesky_upper(channels, &cov) {
        return VoxelResult {
            cov,
            chol,
            ridge: 0.0,
            status: VoxelFit::Exact,
        };
    }
    let trace: f64 = (0..channels).map(|i| cov[packed_index(channels, i, i)]).sum();
    let scale = trace / channels as f64;
    if scale > 0.0 && scale.is_finite() {
        for step in RIDGE_STEPS {
            let ridge = step * scale;
            let mut reg = cov.clone();
            for i in 0..channels {
                reg[packed_index(channels, i, i)] += ridge;
            }
            if let Some(chol) = cholesky_upper(channels, &reg) {
                return VoxelResult {
                    cov: reg,
                    chol,
                    ridge,
                    status: VoxelFit::Ridge,
                };
            }
        }
    }
    let floor = (SIGMA_FLOOR as f64).powi(2);
    let mut diag = vec![0.0f64; packed_len(channels)];
    let mut chol = vec![0.0f64; packed_len(channels)];
    for i in 0..channels {
        let var = cov[packed_index(channels, i, i)].max(floor);
        diag[packed_index(channels, i, i)] = var;
        chol[packed_index(channels, i, i)] = var.sqrt();
    }
    VoxelResult {
        cov: diag,
        chol,
        ridge: 0.0,
        status: VoxelFit::Diagonal,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceModel {
    channels: usize,
    dims: Dims,
    n_train: usize,
    mu: Vec<f32>,
    cov_packed: Vec<f32>,
    chol_packed: Vec<f32>,
    ridge_used: Vec<f32>,
    status: Vec<VoxelFit>,
    mask: HeadMask,
}

pub fn fit_covariance(source: &dyn StudySource, mask: &HeadMask, opts: FitOptions) -> Result<CovarianceModel> {
    check_source(source, mask)?;
    let s = source.channels();
    let dims = source.dims();
    let v = dims.voxels();
    let n = source.len();
    if n < s + 1 {
        log::warn!("covariance fit with {n} studies for {s} channels; most voxels will need a ridge");
    }
    let p = packed_len(s);
    let mut mu = vec![0.0f32; s * v];
    let mut cov_packed = vec![0.0f32; p * v];
    let mut chol_packed = vec![0.0f32; p * v];
    let mut ridge_used = vec![0.0f32; v];
    let mut status = vec![VoxelFit::Outside; v];

    for range in slabs(v, opts.slab_voxels) {
        let len = range.len();
        let mut buf = vec![0.0f32; s * len];
        let mean = slab_means(source, range.clone(), &mut buf)?;
        let mut cross = vec![0.0f64; p * len];
        for i in 0..n {
            source.read_slab(i, range.clone(), &mut buf)?;
            let buf = &buf;
            let mean = &mean;
            cross.par_chunks_mut(p).enumerate().for_each(|(k, acc)| {
                if !mask.get(range.start + k) {
                    return;
                }
                let mut y = [0.0f64; 64];
                let mut y_heap;
                let y: &mut [f64] = if s <= 64 {
                    &mut y[..s]
                } else {
                    y_heap = vec![0.0; s];
                    &mut y_heap
                };
                for c in 0..s {
                    y[c] = buf[c * len + k] as f64 - mean[c * len + k];
                }
                let mut at = 0;
                for a in 0..s {
                    for b in a..s {
                        acc[at] += y[a] * y[b];
                        at += 1;
                    }
                }
            });
        }
        let results: Vec<Option<VoxelResult>> = cross
            .par_chunks(p)
            .enumerate()
            .map(|(k, acc)| {
                if !mask.get(range.start + k) {
                    return None;
                }
                let cov: Vec<f64> = acc.iter().map(|x| x / (n - 1) as f64).collect();
                Some(regularize(s, cov))
            })
            .collect();
        for (k, res) in results.into_iter().enumerate() {
            let voxel = range.start + k;
            for c in 0..s {
                mu[c * v + voxel] = mean[c * len + k] as f32;
            }
            if let Some(res) = res {
                for (dst, src) in cov_packed[voxel * p..(voxel + 1) * p].iter_mut().zip(&res.cov) {
                    *dst = *src as f32;
                }
                for (dst, src) in chol_packed[voxel * p..(voxel + 1) * p].iter_mut().zip(&res.chol) {
                    *dst = *src as f32;
                }
                ridge_used[voxel] = res.ridge as f32;
                status[voxel] = res.status;
            }
        }
    }
    let model = CovarianceModel {
        channels: s,
        dims,
        n_train: n,
        mu,
        cov_packed,
        chol_packed,
        ridge_used,
        status,
        mask: mask.clone(),
    };
    let (ridged, diagonal) = model.regularized_counts();
    if ridged + diagonal > 0 {
        log::info!("covariance fit: {ridged} voxels ridged, {diagonal} fell back to diagonal");
    }
    Ok(model)
}

impl CovarianceModel {
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

    pub fn mask(&self) -> &HeadMask {
        &self.mask
    }

    pub fn covariance(&self, voxel: usize) -> &[f32] {
        let p = packed_len(self.channels);
        &self.cov_packed[voxel * p..(voxel + 1) * p]
    }

    pub fn cholesky(&self, voxel: usize) -> &[f32] {
        let p = packed_len(self.channels);
        &self.chol_packed[voxel * p..(voxel + 1) * p]
    }

    pub fn ridge_used(&self) -> &[f32] {
        &self.ridge_used
    }

    pub fn status(&self) -> &[VoxelFit] {
        &self.status
    }

    /// (ridged voxels, diagonal-fallback voxels)
    pub fn regularized_counts(&self) -> (usize, usize) {
        let ridged = self.status.iter().filter(|&&s| s == VoxelFit::Ridge).count();
        let diagonal = self.status.iter().filter(|&&s| s == VoxelFit::Diagonal).count();
        (ridged, diagonal)
    }

    pub fn score(&self, study: &NormalizedStudy) -> Result<ScoreMap> {
        let vol = study.volume();
        if vol.channels() != self.channels || vol.dims() != self.dims {
            return Err(Error::ShapeMismatch(format!(
                "study is {}x{:?}, model expects {}x{:?}",
                vol.channels(),
                vol.dims(),
                self.channels,
                self.dims
            )));
        }
        let s = self.channels;
        let v = self.dims.voxels();
        let data = vol.data();
        let scores: Vec<f32> = (0..v)
            .into_par_iter()
            .map(|voxel| {
                if !self.mask.get(voxel) {
                    return 0.0;
                }
                let y: Vec<f64> = (0..s)
                    .map(|c| data[c * v + voxel] as f64 - self.mu[c * v + voxel] as f64)
                    .collect();
                mahalanobis_sq(s, self.cholesky(voxel), &y) as f32
            })
            .collect();
        if scores.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("covariance scores"));
        }
        ScoreMap::masked(&self.mask, scores)?.with_spacing(vol.spacing())
    }

    /// Payload after the common header:
    /// `f32 mu[S*V] | f32 cov[V*P] | f32 chol[V*P] | f32 ridge[V] | u8 status[V] | u8 mask[V]`
    /// with `P = S(S+1)/2`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ModelWriter::create(path)?;
        w.header(&ModelHeader {
            kind: ModelKind::Covariance,
            channels: self.channels,
            dims: self.dims,
            n_train: self.n_train,
        })?;
        w.f32s(&self.mu)?;
        w.f32s(&self.cov_packed)?;
        w.f32s(&self.chol_packed)?;
        w.f32s(&self.ridge_used)?;
        let status: Vec<u8> = self.status.iter().map(|&s| s as u8).collect();
        w.bytes(&status)?;
        w.mask(&self.mask)?;
        w.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = ModelReader::open(path)?;
        let h = r.header()?;
        if h.kind != ModelKind::Covariance {
            return Err(Error::BadModel(format!("expected a covariance model, found {:?}", h.kind)));
        }
        let s = h.channels;
        let v = h.dims.voxels();
        let p = packed_len(s);
        let mu = r.f32s(s * v)?;
        let cov_packed = r.f32s(p * v)?;
        let chol_packed = r.f32s(p * v)?;
        let ridge_used = r.f32s(v)?;
        let status = r
            .bytes(v)?
            .into_iter()
            .map(VoxelFit::from_byte)
            .collect::<Result<Vec<_>>>()?;
        let mask = r.mask(h.dims)?;
        Ok(Self {
            channels: s,
            dims: h.dims,
            n_train: h.n_train,
            mu,
            cov_packed,
            chol_packed,
            ridge_used,
            status,
            mask,
        })
    }
}
