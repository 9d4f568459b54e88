//! Per-study, per-channel z-scoring over the head mask.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{HeadMask, MultiChannelVolume};

/// A study whose channels have zero mean and unit sample standard deviation
/// over the head mask, with every voxel outside the mask set to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedStudy(MultiChannelVolume);

impl NormalizedStudy {
    /// Wraps a volume that is already normalized (e.g. read back from a file
    /// written by [`normalize_study`]). No check is performed.
    pub fn assume_normalized(volume: MultiChannelVolume) -> Self {
        Self(volume)
    }

    pub fn volume(&self) -> &MultiChannelVolume {
        &self.0
    }

    pub fn into_volume(self) -> MultiChannelVolume {
        self.0
    }
}

/// Mean and sample (N-1) standard deviation of `values` over the mask.
fn masked_moments(values: &[f32], mask: &HeadMask) -> (f64, f64) {
    let n = mask.count() as f64;
    let mut sum = 0.0;
    for (&x, &m) in values.iter().zip(mask.data()) {
        if m {
            sum += x as f64;
        }
    }
    let mean = sum / n;
    let mut ss = 0.0;
    for (&x, &m) in values.iter().zip(mask.data()) {
        if m {
            let d = x as f64 - mean;
            ss += d * d;
        }
    }
    (mean, (ss / (n - 1.0)).sqrt())
}

pub fn normalize_study(study: &MultiChannelVolume, mask: &HeadMask) -> Result<NormalizedStudy> {
    mask.ensure_dims(study.dims())?;
    if mask.count() < 2 {
        return Err(Error::Invalid("normalization needs at least 2 mask voxels".into()));
    }
    let v = study.voxels();
    let mut out = study.clone();
    out.data_mut()
        .par_chunks_mut(v)
        .enumerate()
        .try_for_each(|(s, channel)| {
            let (mean, sd) = masked_moments(channel, mask);
            if !sd.is_finite() || sd <= 0.0 {
                return Err(Error::ZeroVariance { channel: s });
            }
            for (x, &m) in channel.iter_mut().zip(mask.data()) {
                *x = if m { ((*x as f64 - mean) / sd) as f32 } else { 0.0 };
            }
            Ok(())
        })?;
    Ok(NormalizedStudy(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{BinaryMask, Dims};
    use proptest::prelude::*;

    fn two_voxel_mask() -> HeadMask {
        let mut bits = vec![false; 4];
        bits[0] = true;
        bits[2] = true;
        HeadMask::new(BinaryMask::new(Dims::new(4, 1, 1), [1.0; 3], bits).unwrap()).unwrap()
    }

    #[test]
    fn two_voxel_hand_case() {
        let vol = MultiChannelVolume::new(1, Dims::new(4, 1, 1), [1.0; 3], vec![1.0, 9.0, 3.0, -7.0])
            .unwrap();
        let norm = normalize_study(&vol, &two_voxel_mask()).unwrap();
        let d = norm.volume().data();
        let h = 1.0 / 2f64.sqrt();
        assert!((d[0] as f64 + h).abs() < 1e-7);
        assert!((d[2] as f64 - h).abs() < 1e-7);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[3], 0.0);
    }

    #[test]
    fn constant_channel_is_an_error() {
        let vol = MultiChannelVolume::new(2, Dims::new(4, 1, 1), [1.0; 3], vec![
            1.0, 2.0, 3.0, 4.0, 5.0, 0.0, 5.0, 0.0,
        ])
        .unwrap();
        let err = normalize_study(&vol, &two_voxel_mask()).unwrap_err();
        assert!(matches!(err, Error::ZeroVariance { channel: 1 }));
        assert_eq!(err.to_string(), "zero variance channel 1");
    }

    fn random_volume(seed: u64) -> (MultiChannelVolume, HeadMask) {
        let dims = Dims::new(5, 4, 3);
        let data: Vec<f32> = (0..2 * 60)
            .map(|i| {
                let h = (i as u64 + 1).wrapping_mul(seed | 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                (h >> 40) as f32 / 16777216.0 * 10.0 - 3.0
            })
            .collect();
        let bits: Vec<bool> = (0..60).map(|i| i % 3 != 0).collect();
        (
            MultiChannelVolume::new(2, dims, [1.0; 3], data).unwrap(),
            HeadMask::new(BinaryMask::new(dims, [1.0; 3], bits).unwrap()).unwrap(),
        )
    }

    proptest! {
        #[test]
        fn output_is_standardized_and_idempotent(seed in any::<u64>()) {
            let (vol, mask) = random_volume(seed);
            let once = normalize_study(&vol, &mask).unwrap();
            for s in 0..2 {
                let (mean, sd) = masked_moments(once.volume().channel(s), &mask);
                prop_assert!(mean.abs() < 1e-6);
                prop_assert!((sd - 1.0).abs() < 1e-6);
            }
            let twice = normalize_study(once.volume(), &mask).unwrap();
            for (a, b) in once.volume().data().iter().zip(twice.volume().data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn affine_channel_transform_only_flips_sign(
            seed in any::<u64>(), a in prop::sample::select(vec![-3.0f32, -0.5, 0.25, 2.0, 7.0]),
            b in -5.0f32..5.0,
        ) {
            let (vol, mask) = random_volume(seed);
            let mut moved = vol.clone();
            for x in moved.channel_mut(1) {
                *x = a * *x + b;
            }
            let n0 = normalize_study(&vol, &mask).unwrap();
            let n1 = normalize_study(&moved, &mask).unwrap();
            prop_assert_eq!(n0.volume().channel(0), n1.volume().channel(0));
            let sign = a.signum();
            for (x, y) in n0.volume().channel(1).iter().zip(n1.volume().channel(1)) {
                prop_assert!((sign * x - y).abs() < 1e-5);
            }
        }
    }
}
