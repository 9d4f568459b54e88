//! Seeded synthetic cohorts with ground-truth lesions.
//!
//! A healthy study is a smooth per-channel template plus a deviation
//!
//! ```text
//! d_s(v) = amplitude * (anatomy_scale * sum_b f_b(v) a_bs / sqrt(B) + noise_scale * e_s(v))
//! ```
//!
//! where the fields `f_b` are shared by every subject and channel, and both the
//! per-subject weights `a_b.` and the per-voxel noise `e_.(v)` are drawn from
//! the channel correlation `C`. The per-voxel channel covariance across
//! subjects is therefore a scalar multiple of `C` at every voxel.
//!
//! Lesions are spheres inside the head mask. Correlation-breaking lesions flip
//! the sign of the deviation on odd channels, which keeps every channel's
//! marginal distribution but turns `+rho` into `-rho` between even and odd
//! channels. An optional shift adds `lesion_shift` voxel standard deviations
//! to every channel.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{write_volume, BinaryMask, Dims, HeadMask, MultiChannelVolume, Spacing};

const MAX_PACKING_ATTEMPTS: usize = 100;
const MAX_CENTER_TRIES: usize = 500;
/// Accepted relative deviation of a packing from the target lesion volume.
pub const PACKING_TOLERANCE: f64 = 0.2;
const FIELD_STREAM: u64 = 0;

fn default_seed() -> u64 {
    1
}
fn default_channels() -> usize {
    4
}
fn default_dims() -> [usize; 3] {
    [32, 32, 32]
}
fn default_spacing() -> Spacing {
    [1.0; 3]
}
fn default_n_train() -> usize {
    50
}
fn default_n_test() -> usize {
    10
}
fn default_rho() -> f64 {
    0.8
}
fn default_anatomy_fields() -> usize {
    4
}
fn default_one() -> f64 {
    1.0
}
fn default_noise_scale() -> f64 {
    0.5
}
fn default_amplitude() -> f64 {
    10.0
}
fn default_lesion_count() -> [usize; 2] {
    [1, 3]
}
fn default_lesion_radius() -> [f64; 2] {
    [2.0, 6.0]
}
fn default_lesion_shift() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}
fn default_lesion_fraction() -> f64 {
    0.03
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_dims")]
    pub dims: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing: Spacing,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test_healthy: usize,
    #[serde(default = "default_n_test")]
    pub n_test_pathological: usize,
    /// Full channel correlation matrix; when absent, compound symmetry with `rho`.
    #[serde(default)]
    pub correlation: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_anatomy_fields")]
    pub anatomy_fields: usize,
    #[serde(default = "default_one")]
    pub anatomy_scale: f64,
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default = "default_lesion_count")]
    pub lesion_count: [usize; 2],
    /// Radius range in voxels.
    #[serde(default = "default_lesion_radius")]
    pub lesion_radius: [f64; 2],
    /// Intensity shift in units of the voxel's healthy standard deviation.
    #[serde(default = "default_lesion_shift")]
    pub lesion_shift: f64,
    #[serde(default = "default_true")]
    pub break_correlation: bool,
    /// Target lesion volume as a fraction of head-mask voxels.
    #[serde(default = "default_lesion_fraction")]
    pub lesion_fraction: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl PhantomConfig {
    pub fn dims(&self) -> Dims {
        self.dims.into()
    }

    pub fn correlation_matrix(&self) -> Vec<Vec<f64>> {
        self.correlation.clone().unwrap_or_else(|| {
            (0..self.channels)
                .map(|i| (0..self.channels).map(|j| if i == j { 1.0 } else { self.rho }).collect())
                .collect()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.channels == 0 {
            return bad("phantom needs at least one channel".into());
        }
        if self.dims.iter().any(|&d| d < 4) {
            return bad(format!("phantom dims {:?} too small", self.dims));
        }
        if self.n_train < 2 {
            return Err(Error::TooFewStudies);
        }
        if !(self.lesion_fraction > 0.0 && self.lesion_fraction < 0.5) {
            return bad(format!("lesion fraction {} outside (0, 0.5)", self.lesion_fraction));
        }
        let [cmin, cmax] = self.lesion_count;
        if cmin == 0 || cmin > cmax {
            return bad(format!("invalid lesion count range {:?}", self.lesion_count));
        }
        let [rmin, rmax] = self.lesion_radius;
        if !(rmin > 0.0 && rmin <= rmax) {
            return bad(format!("invalid lesion radius range {:?}", self.lesion_radius));
        }
        if !(self.amplitude > 0.0 && self.noise_scale >= 0.0 && self.anatomy_scale >= 0.0) {
            return bad("amplitude must be positive and scales non-negative".into());
        }
        if self.noise_scale == 0.0 && (self.anatomy_scale == 0.0 || self.anatomy_fields == 0) {
            return bad("healthy variability is zero".into());
        }
        if !self.lesion_shift.is_finite() {
            return Err(Error::NonFinite("lesion_shift"));
        }
        let c = self.correlation_matrix();
        if c.len() != self.channels || c.iter().any(|row| row.len() != self.channels) {
            return bad(format!("correlation matrix must be {0}x{0}", self.channels));
        }
        for (i, row) in c.iter().enumerate() {
            if (row[i] - 1.0).abs() > 1e-12 {
                return bad("correlation matrix needs a unit diagonal".into());
            }
            if (0..i).any(|j| (row[j] - c[j][i]).abs() > 1e-12) {
                return bad("correlation matrix is not symmetric".into());
            }
        }
        if cholesky_lower(&c).is_none() {
            return bad("correlation matrix is not positive definite".into());
        }
        Ok(())
    }
}

/// Dense lower Cholesky factor, `None` unless strictly positive definite.
fn cholesky_lower(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if s <= 1e-12 {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Healthy,
    Pathological,
}

impl Role {
    fn prefix(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Healthy => "healthy",
            Role::Pathological => "path",
        }
    }
}

/// Everything shared by the studies of one cohort.
struct Shared {
    config: PhantomConfig,
    dims: Dims,
    chol: Vec<Vec<f64>>,
    mask: HeadMask,
    /// `template[s * V + v]`
    template: Vec<f32>,
    /// `fields[b * V + v]`, unit RMS over the grid.
    fields: Vec<f64>,
    /// Healthy deviation standard deviation per voxel (identical for every channel).
    sd: Vec<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn correlated(rng: &mut ChaCha8Rng, chol: &[Vec<f64>], out: &mut [f64]) {
    let e: Vec<f64> = (0..out.len()).map(|_| normal(rng)).collect();
    for (i, o) in out.iter_mut().enumerate() {
        *o = (0..=i).map(|k| chol[i][k] * e[k]).sum();
    }
}

fn head_mask(dims: Dims, spacing: Spacing) -> Result<HeadMask> {
    let c = |n: usize| (n as f64 - 1.0) / 2.0;
    let semi = |n: usize| 0.42 * n as f64;
    let data = (0..dims.voxels())
        .map(|v| {
            let (i, j, k) = dims.coords(v);
            let r2 = ((i as f64 - c(dims.x)) / semi(dims.x)).powi(2)
                + ((j as f64 - c(dims.y)) / semi(dims.y)).powi(2)
                + ((k as f64 - c(dims.z)) / semi(dims.z)).powi(2);
            r2 <= 1.0
        })
        .collect();
    HeadMask::new(BinaryMask::new(dims, spacing, data)?)
}

impl Shared {
    fn new(config: &PhantomConfig) -> Result<Self> {
        config.validate()?;
        let dims = config.dims();
        let voxels = dims.voxels();
        let s_count = config.channels;
        let mask = head_mask(dims, config.spacing)?;
        let chol = cholesky_lower(&config.correlation_matrix()).expect("validated");

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(FIELD_STREAM);

        // smooth anatomy bank: a few low-frequency plane waves per field
        let b_count = config.anatomy_fields;
        let mut fields = vec![0.0f64; b_count * voxels];
        for b in 0..b_count {
            let waves: Vec<([f64; 3], f64, f64)> = (0..3)
                .map(|_| {
                    let mut w = [0.0; 3];
                    while w == [0.0; 3] {
                        w = [0, 1, 2].map(|_| rng.random_range(-2i32..=2) as f64);
                    }
                    (w, rng.random_range(0.0..2.0 * PI), normal(&mut rng))
                })
                .collect();
            let f = &mut fields[b * voxels..(b + 1) * voxels];
            for (v, out) in f.iter_mut().enumerate() {
                let (i, j, k) = dims.coords(v);
                let p = [i as f64 / dims.x as f64, j as f64 / dims.y as f64, k as f64 / dims.z as f64];
                *out = waves
                    .iter()
                    .map(|(w, phase, amp)| amp * (2.0 * PI * (w[0] * p[0] + w[1] * p[1] + w[2] * p[2]) + phase).cos())
                    .sum();
            }
            let rms = (f.iter().map(|x| x * x).sum::<f64>() / voxels as f64).sqrt();
            if rms > 0.0 {
                f.iter_mut().for_each(|x| *x /= rms);
            }
        }

        let c = |n: usize| (n as f64 - 1.0) / 2.0;
        let mut template = vec![0.0f32; s_count * voxels];
        for s in 0..s_count {
            let offset = 100.0 + 20.0 * s as f64;
            let contrast = rng.random_range(40.0..80.0) * if s % 2 == 0 { 1.0 } else { -1.0 };
            for v in 0..voxels {
                let (i, j, k) = dims.coords(v);
                let r = (((i as f64 - c(dims.x)) / (0.42 * dims.x as f64)).powi(2)
                    + ((j as f64 - c(dims.y)) / (0.42 * dims.y as f64)).powi(2)
                    + ((k as f64 - c(dims.z)) / (0.42 * dims.z as f64)).powi(2))
                .sqrt();
                template[s * voxels + v] = (offset + contrast * (PI * r.min(1.5)).cos()) as f32;
            }
        }

        let sd = (0..voxels)
            .map(|v| {
                let f2: f64 = (0..b_count).map(|b| fields[b * voxels + v].powi(2)).sum();
                let anat = if b_count > 0 { f2 / b_count as f64 } else { 0.0 };
                config.amplitude * (config.anatomy_scale.powi(2) * anat + config.noise_scale.powi(2)).sqrt()
            })
            .collect();

        Ok(Self {
            config: config.clone(),
            dims,
            chol,
            mask,
            template,
            fields,
            sd,
        })
    }

    fn stream(&self, role: Role, index: usize) -> u64 {
        let c = &self.config;
        let base = match role {
            Role::Train => 0,
            Role::Healthy => c.n_train,
            Role::Pathological => c.n_train + c.n_test_healthy,
        };
        1 + (base + index) as u64
    }

    fn study(&self, role: Role, index: usize) -> Result<(MultiChannelVolume, Option<BinaryMask>)> {
        let c = &self.config;
        let voxels = self.dims.voxels();
        let s_count = c.channels;
        let b_count = c.anatomy_fields;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        rng.set_stream(self.stream(role, index));

        let mut weights = vec![0.0; b_count * s_count];
        for b in 0..b_count {
            correlated(&mut rng, &self.chol, &mut weights[b * s_count..(b + 1) * s_count]);
        }
        let norm = if b_count > 0 { (b_count as f64).sqrt() } else { 1.0 };
        let mut dev = vec![0.0f64; s_count * voxels];
        let mut e = vec![0.0; s_count];
        for v in 0..voxels {
            correlated(&mut rng, &self.chol, &mut e);
            for s in 0..s_count {
                let anat: f64 = (0..b_count).map(|b| self.fields[b * voxels + v] * weights[b * s_count + s]).sum();
                dev[s * voxels + v] = c.amplitude * (c.anatomy_scale * anat / norm + c.noise_scale * e[s]);
            }
        }

        let lesion = if role == Role::Pathological {
            let lesion = pack_lesions(&mut rng, &self.mask, c)?;
            for v in lesion.indices() {
                for s in 0..s_count {
                    let d = &mut dev[s * voxels + v];
                    if c.break_correlation && s % 2 == 1 {
                        *d = -*d;
                    }
                    *d += c.lesion_shift * self.sd[v];
                }
            }
            Some(lesion)
        } else {
            None
        };

        let data: Vec<f32> = self
            .template
            .iter()
            .zip(&dev)
            .map(|(&t, &d)| (t as f64 + d) as f32)
            .collect();
        Ok((MultiChannelVolume::new(s_count, self.dims, c.spacing, data)?, lesion))
    }
}

struct Sphere {
    center: [f64; 3],
    radius: f64,
}

fn sphere_voxels(dims: Dims, sphere: &Sphere, mut f: impl FnMut(usize) -> bool) -> bool {
    let [cx, cy, cz] = sphere.center;
    let r = sphere.radius;
    let range = |c: f64, n: usize| {
        let lo = (c - r).ceil().max(0.0) as usize;
        let hi = ((c + r).floor() as isize).min(n as isize - 1);
        (lo, hi)
    };
    let (x0, x1) = range(cx, dims.x);
    let (y0, y1) = range(cy, dims.y);
    let (z0, z1) = range(cz, dims.z);
    for k in z0 as isize..=z1 {
        for j in y0 as isize..=y1 {
            for i in x0 as isize..=x1 {
                let d2 = (i as f64 - cx).powi(2) + (j as f64 - cy).powi(2) + (k as f64 - cz).powi(2);
                if d2 <= r * r && !f(dims.index(i as usize, j as usize, k as usize)) {
                    return false;
                }
            }
        }
    }
    true
}

fn pack_lesions(rng: &mut ChaCha8Rng, mask: &HeadMask, c: &PhantomConfig) -> Result<BinaryMask> {
    let dims = mask.dims();
    let target = c.lesion_fraction * mask.count() as f64;
    let [rmin, rmax] = c.lesion_radius;
    let [cmin, cmax] = c.lesion_count;
    for _ in 0..MAX_PACKING_ATTEMPTS {
        let k = rng.random_range(cmin..=cmax);
        let r_target = (3.0 * target / (4.0 * PI * k as f64)).cbrt();
        let mut spheres: Vec<Sphere> = Vec::with_capacity(k);
        for _ in 0..k {
            let radius = (r_target * rng.random_range(0.85..1.15)).clamp(rmin, rmax);
            for _ in 0..MAX_CENTER_TRIES {
                let center = [dims.x, dims.y, dims.z].map(|n| rng.random_range(0.0..(n - 1) as f64));
                let candidate = Sphere { center, radius };
                let apart = spheres.iter().all(|s| {
                    let d2: f64 = (0..3).map(|a| (s.center[a] - center[a]).powi(2)).sum();
                    d2.sqrt() >= s.radius + radius + 1.0
                });
                if apart && sphere_voxels(dims, &candidate, |v| mask.get(v)) {
                    spheres.push(candidate);
                    break;
                }
            }
        }
        if spheres.len() != k {
            continue;
        }
        let mut lesion = BinaryMask::empty(dims, mask.spacing())?;
        for s in &spheres {
            sphere_voxels(dims, s, |v| {
                lesion.data_mut()[v] = true;
                true
            });
        }
        let count = lesion.count() as f64;
        if count > 0.0 && (count - target).abs() <= PACKING_TOLERANCE * target {
            return Ok(lesion);
        }
    }
    Err(Error::InfeasiblePacking(format!(
        "could not place {cmin}..={cmax} spheres of radius {rmin}..={rmax} covering {:.0} voxels",
        target
    )))
}

/// A cohort held in memory.
pub struct Cohort {
    pub mask: HeadMask,
    pub train: Vec<MultiChannelVolume>,
    pub healthy: Vec<MultiChannelVolume>,
    pub pathological: Vec<(MultiChannelVolume, BinaryMask)>,
}

pub fn generate_cohort(config: &PhantomConfig) -> Result<Cohort> {
    let shared = Shared::new(config)?;
    let plain = |role, n| -> Result<Vec<MultiChannelVolume>> {
        (0..n).into_par_iter().map(|i| Ok(shared.study(role, i)?.0)).collect()
    };
    let train = plain(Role::Train, config.n_train)?;
    let healthy = plain(Role::Healthy, config.n_test_healthy)?;
    let pathological = (0..config.n_test_pathological)
        .into_par_iter()
        .map(|i| {
            let (vol, lesion) = shared.study(Role::Pathological, i)?;
            Ok((vol, lesion.expect("pathological studies carry a lesion")))
        })
        .collect::<Result<_>>()?;
    Ok(Cohort {
        mask: shared.mask,
        train,
        healthy,
        pathological,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyEntry {
    pub id: String,
    pub role: Role,
    pub path: PathBuf,
    pub lesion: Option<PathBuf>,
    pub lesion_voxels: usize,
    pub lesion_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: PhantomConfig,
    pub mask: PathBuf,
    pub mask_voxels: usize,
    pub train_list: PathBuf,
    pub test_healthy_list: PathBuf,
    pub test_pathological_list: PathBuf,
    pub studies: Vec<StudyEntry>,
}

/// Writes the cohort below `out_dir` and returns its manifest. All paths in the
/// manifest and list files are relative to `out_dir`.
pub fn generate_phantom(config: &PhantomConfig, out_dir: &Path) -> Result<Manifest> {
    let shared = Shared::new(config)?;
    for sub in ["train", "test"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(Error::io_at(&dir))?;
    }
    let mask_path = PathBuf::from("mask.nii");
    write_volume(&shared.mask, out_dir.join(&mask_path))?;
    let mask_voxels = shared.mask.count();

    let jobs: Vec<(Role, usize)> = [
        (Role::Train, config.n_train),
        (Role::Healthy, config.n_test_healthy),
        (Role::Pathological, config.n_test_pathological),
    ]
    .into_iter()
    .flat_map(|(role, n)| (0..n).map(move |i| (role, i)))
    .collect();

    let studies = jobs
        .par_iter()
        .map(|&(role, i)| {
            let id = format!("{}_{i:03}", role.prefix());
            let sub = if role == Role::Train { "train" } else { "test" };
            let path = PathBuf::from(sub).join(format!("{id}.nii"));
            let (vol, lesion) = shared.study(role, i)?;
            write_volume(&vol, out_dir.join(&path))?;
            let (lesion_path, lesion_voxels) = match lesion {
                Some(mask) => {
                    let p = PathBuf::from(sub).join(format!("{id}_lesion.nii"));
                    write_volume(&mask, out_dir.join(&p))?;
                    (Some(p), mask.count())
                }
                None => (None, 0),
            };
            Ok(StudyEntry {
                id,
                role,
                path,
                lesion: lesion_path,
                lesion_voxels,
                lesion_fraction: lesion_voxels as f64 / mask_voxels as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let list = |role: Role| -> String {
        studies
            .iter()
            .filter(|s| s.role == role)
            .map(|s| match &s.lesion {
                Some(l) => format!("{} {}\n", s.path.display(), l.display()),
                None => format!("{}\n", s.path.display()),
            })
            .collect()
    };
    let lists = [Role::Train, Role::Healthy, Role::Pathological].map(list);
    let manifest = Manifest {
        config: config.clone(),
        mask: mask_path,
        mask_voxels,
        train_list: "train.txt".into(),
        test_healthy_list: "test_healthy.txt".into(),
        test_pathological_list: "test_pathological.txt".into(),
        studies,
    };
    for (name, text) in [
        &manifest.train_list,
        &manifest.test_healthy_list,
        &manifest.test_pathological_list,
    ]
    .into_iter()
    .zip(lists)
    {
        let p = out_dir.join(name);
        fs::write(&p, text).map_err(Error::io_at(&p))?;
    }
    let p = out_dir.join("manifest.json");
    fs::write(&p, serde_json::to_string_pretty(&manifest)? + "\n").map_err(Error::io_at(&p))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{read_head_mask, read_mask, read_multichannel};

    fn small() -> PhantomConfig {
        PhantomConfig {
            dims: [16, 16, 16],
            n_train: 3,
            n_test_healthy: 2,
            n_test_pathological: 3,
            ..Default::default()
        }
    }

    #[test]
    fn defaults_are_valid() {
        let c = PhantomConfig::default();
        assert_eq!((c.channels, c.dims, c.n_train), (4, [32, 32, 32], 50));
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_correlation() {
        let mut c = small();
        c.channels = 2;
        c.correlation = Some(vec![vec![1.0, 1.2], vec![1.2, 1.0]]);
        assert!(c.validate().is_err());
        c.correlation = Some(vec![vec![1.0, 0.3], vec![0.2, 1.0]]);
        assert!(c.validate().is_err());
        c.correlation = Some(vec![vec![2.0, 0.3], vec![0.3, 1.0]]);
        assert!(c.validate().is_err());
        c.correlation = Some(vec![vec![1.0, 0.3], vec![0.3, 1.0]]);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_fraction() {
        for f in [0.0, 0.5, -0.1] {
            let c = PhantomConfig {
                lesion_fraction: f,
                ..small()
            };
            assert!(c.validate().is_err());
        }
    }

    #[test]
    fn infeasible_packing_is_reported() {
        let c = PhantomConfig {
            lesion_radius: [1.0, 1.2],
            lesion_count: [1, 1],
            lesion_fraction: 0.3,
            ..small()
        };
        assert!(matches!(generate_cohort(&c), Err(Error::InfeasiblePacking(_))));
    }

    #[test]
    fn lesions_only_in_pathological_studies() {
        let cohort = generate_cohort(&small()).unwrap();
        let m = cohort.mask.count() as f64;
        for (_, lesion) in &cohort.pathological {
            let n = lesion.count() as f64;
            assert!(n > 0.0);
            assert!((n / m - 0.03).abs() <= 0.01);
            assert!(lesion.indices().all(|v| cohort.mask.get(v)));
        }
        assert_eq!(cohort.train.len(), 3);
        assert_eq!(cohort.healthy.len(), 2);
    }

    #[test]
    fn seeds_reproduce_and_differ() {
        let a = generate_cohort(&small()).unwrap();
        let b = generate_cohort(&small()).unwrap();
        assert_eq!(a.train[1], b.train[1]);
        assert_eq!(a.pathological[2].1, b.pathological[2].1);
        let c = generate_cohort(&PhantomConfig { seed: 9, ..small() }).unwrap();
        assert_ne!(a.train[1], c.train[1]);
        assert_ne!(a.train[0], a.train[1]);
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn voxel_correlation_matches_config() {
        let c = PhantomConfig {
            channels: 2,
            rho: 0.9,
            dims: [8, 8, 8],
            n_train: 200,
            n_test_healthy: 0,
            n_test_pathological: 0,
            ..Default::default()
        };
        let cohort = generate_cohort(&c).unwrap();
        let voxels = c.dims().voxels();
        let per_voxel: Vec<f64> = cohort
            .mask
            .as_mask()
            .indices()
            .map(|v| {
                let x: Vec<f64> = cohort.train.iter().map(|s| s.data()[v] as f64).collect();
                let y: Vec<f64> = cohort.train.iter().map(|s| s.data()[voxels + v] as f64).collect();
                pearson(&x, &y)
            })
            .collect();
        let mean = per_voxel.iter().sum::<f64>() / per_voxel.len() as f64;
        assert!((mean - 0.9).abs() <= 0.05, "{mean}");
    }

    #[test]
    fn lesions_break_correlation() {
        let c = PhantomConfig {
            channels: 2,
            rho: 0.8,
            lesion_shift: 0.0,
            dims: [16, 16, 16],
            n_train: 2,
            n_test_healthy: 0,
            n_test_pathological: 60,
            lesion_fraction: 0.1,
            ..Default::default()
        };
        let cohort = generate_cohort(&c).unwrap();
        let shared = Shared::new(&c).unwrap();
        let voxels = c.dims().voxels();
        // pooled correlation of the deviations from the template inside lesions
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (vol, lesion) in &cohort.pathological {
            for v in lesion.indices() {
                x.push(vol.data()[v] as f64 - shared.template[v] as f64);
                y.push(vol.data()[voxels + v] as f64 - shared.template[voxels + v] as f64);
            }
        }
        let r = pearson(&x, &y);
        assert!(r < -0.6, "{r}");
    }

    #[test]
    fn written_cohort_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = small();
        let manifest = generate_phantom(&c, dir.path()).unwrap();
        assert_eq!(manifest.studies.len(), 8);
        let mask = read_head_mask(dir.path().join(&manifest.mask)).unwrap();
        let cohort = generate_cohort(&c).unwrap();
        assert_eq!(mask, cohort.mask);
        let path = manifest.studies.iter().find(|s| s.id == "path_001").unwrap();
        let vol = read_multichannel(dir.path().join(&path.path)).unwrap();
        assert_eq!(vol, cohort.pathological[1].0);
        let lesion = read_mask(dir.path().join(path.lesion.as_ref().unwrap())).unwrap();
        assert_eq!(&lesion, &cohort.pathological[1].1);
        let list = fs::read_to_string(dir.path().join("test_pathological.txt")).unwrap();
        assert_eq!(list.lines().count(), 3);
        assert!(list.lines().all(|l| l.split_whitespace().count() == 2));
        let again = tempfile::tempdir().unwrap();
        generate_phantom(&c, again.path()).unwrap();
        for s in &manifest.studies {
            assert_eq!(
                fs::read(dir.path().join(&s.path)).unwrap(),
                fs::read(again.path().join(&s.path)).unwrap()
            );
        }
    }
}
