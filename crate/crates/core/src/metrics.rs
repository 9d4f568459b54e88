//! Ranking metrics and sample-score aggregation.
//!
//! Both metrics treat tied scores as one group, so results never depend on
//! sort stability:
//!
//! * AUC is the Mann-Whitney statistic: the fraction of (positive, negative)
//!   pairs where the positive scores higher, ties counting one half.
//! * AP is the mean over positives of the precision at the boundary of the
//!   tie group that contains the positive (no interpolation).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, HeadMask, ScoreMap};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScores {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl LabeledScores {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.len() < 2 {
            return Err(Error::Invalid("need at least two labeled scores".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("scores"));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn n_neg(&self) -> usize {
        self.labels.len() - self.n_pos()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Voxel,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub task: Task,
    pub ap: f64,
    pub auc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl EvalReport {
    pub fn evaluate(method: &str, task: Task, data: &LabeledScores) -> Result<Self> {
        Ok(Self {
            method: method.to_string(),
            task,
            ap: average_precision(data)?,
            auc: auc(data)?,
            n_pos: data.n_pos(),
            n_neg: data.n_neg(),
        })
    }
}

/// Which voxels enter the pooled voxel-level evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoxelPooling {
    #[default]
    HeadMask,
    AllVoxels,
}

/// Sum of the score map over the head mask.
pub fn sample_score(map: &ScoreMap, mask: &HeadMask) -> Result<f64> {
    mask.ensure_dims(map.dims())?;
    Ok(map
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s as f64)
        .sum())
}

/// Indices sorted by descending score, ties in arbitrary order.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Tie groups in descending score order as `(positives, total)` counts.
fn tie_groups(scores: &[f64], labels: &[bool]) -> Vec<(usize, usize)> {
    let order = descending(scores);
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut prev: Option<f64> = None;
    for &i in &order {
        if prev != Some(scores[i]) {
            groups.push((0, 0));
            prev = Some(scores[i]);
        }
        let g = groups.last_mut().unwrap();
        g.0 += labels[i] as usize;
        g.1 += 1;
    }
    groups
}

pub fn average_precision_slices(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut sum = 0.0;
    for (pos, total) in tie_groups(scores, labels) {
        tp += pos;
        seen += total;
        if pos > 0 {
            sum += pos as f64 * tp as f64 / seen as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

pub fn auc_slices(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    // Walk groups from the lowest score up, counting negatives already passed.
    let mut below_neg = 0usize;
    let mut twice_u: u128 = 0;
    for (pos, total) in tie_groups(scores, labels).into_iter().rev() {
        let neg = total - pos;
        twice_u += (pos as u128) * (2 * below_neg as u128 + neg as u128);
        below_neg += neg;
    }
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

pub fn average_precision(data: &LabeledScores) -> Result<f64> {
    average_precision_slices(&data.scores, &data.labels)
}

pub fn auc(data: &LabeledScores) -> Result<f64> {
    auc_slices(&data.scores, &data.labels)
}

/// ROC points `(false positive rate, true positive rate)` at every tie-group
/// boundary, starting at `(0, 0)`.
pub fn roc_curve(data: &LabeledScores) -> Result<Vec<(f64, f64)>> {
    let (p, n) = (data.n_pos(), data.n_neg());
    if p == 0 || n == 0 {
        return Err(Error::SingleClass);
    }
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (pos, total) in tie_groups(&data.scores, &data.labels) {
        tp += pos;
        fp += total - pos;
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    Ok(points)
}

/// Precision-recall points `(recall, precision)` at every tie-group boundary.
pub fn pr_curve(data: &LabeledScores) -> Result<Vec<(f64, f64)>> {
    let p = data.n_pos();
    if p == 0 {
        return Err(Error::NoPositives);
    }
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for (pos, total) in tie_groups(&data.scores, &data.labels) {
        tp += pos;
        seen += total;
        points.push((tp as f64 / p as f64, tp as f64 / seen as f64));
    }
    Ok(points)
}

/// One balanced voxel-level subset: a healthy and a pathological score map
/// plus the pathological study's lesion mask.
pub struct VoxelPair<'a> {
    pub healthy: &'a ScoreMap,
    pub pathological: &'a ScoreMap,
    pub lesion: &'a BinaryMask,
}

/// Pools the voxels of both studies of one pair with lesion labels.
pub fn pool_pair(pair: &VoxelPair<'_>, mask: &HeadMask, pooling: VoxelPooling) -> Result<LabeledScores> {
    let dims = mask.dims();
    for d in [pair.healthy.dims(), pair.pathological.dims(), pair.lesion.dims()] {
        mask.ensure_dims(d)?;
    }
    let keep = |v: usize| pooling == VoxelPooling::AllVoxels || mask.get(v);
    let mut scores = Vec::with_capacity(2 * dims.voxels());
    let mut labels = Vec::with_capacity(2 * dims.voxels());
    for v in (0..dims.voxels()).filter(|&v| keep(v)) {
        scores.push(pair.healthy.data()[v] as f64);
        labels.push(false);
    }
    for v in (0..dims.voxels()).filter(|&v| keep(v)) {
        scores.push(pair.pathological.data()[v] as f64);
        labels.push(pair.lesion.get(v));
    }
    LabeledScores::new(scores, labels)
}

pub fn voxel_task_eval(
    method: &str,
    pairs: &[VoxelPair<'_>],
    mask: &HeadMask,
    pooling: VoxelPooling,
) -> Result<Vec<EvalReport>> {
    if pairs.is_empty() {
        return Err(Error::Invalid("voxel task needs at least one pair".into()));
    }
    pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let pooled = pool_pair(pair, mask, pooling)?;
            if pooled.n_pos() == 0 {
                return Err(Error::EmptyLesionMask(i));
            }
            EvalReport::evaluate(method, Task::Voxel, &pooled)
        })
        .collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;
    use proptest::prelude::*;

    fn ls(scores: &[f64], labels: &[u8]) -> LabeledScores {
        LabeledScores::new(scores.to_vec(), labels.iter().map(|&l| l == 1).collect()).unwrap()
    }

    /// Precision at the group boundary of every positive, by direct counting.
    fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut sum = 0.0;
        let mut n_pos = 0;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            n_pos += 1;
            let at_or_above = scores.iter().filter(|&&s| s >= scores[i]).count();
            let pos_above = scores
                .iter()
                .zip(labels)
                .filter(|(&s, &l)| l && s >= scores[i])
                .count();
            sum += pos_above as f64 / at_or_above as f64;
        }
        sum / n_pos as f64
    }

    fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    wins += match scores[i].total_cmp(&scores[j]) {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&ls(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0])).unwrap(), 1.0);
        let ap = average_precision(&ls(&[0.9, 0.8, 0.3, 0.1], &[1, 0, 1, 0])).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&ls(&[0.2, 0.5, 0.1], &[1, 1, 1])).unwrap(), 1.0);
        assert!(matches!(
            average_precision(&ls(&[0.2, 0.5], &[0, 0])),
            Err(Error::NoPositives)
        ));
    }

    #[test]
    fn ap_ties_use_group_boundary() {
        // one positive tied with one negative at the top: precision 1/2
        let ap = average_precision(&ls(&[1.0, 1.0, 0.0], &[1, 0, 0])).unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&ls(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(auc(&ls(&[0.9, 0.8, 0.3, 0.1], &[0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(auc(&ls(&[0.9, 0.8, 0.3, 0.1], &[1, 0, 1, 0])).unwrap(), 0.75);
        assert_eq!(auc(&ls(&[0.5; 6], &[1, 0, 1, 0, 0, 1])).unwrap(), 0.5);
        assert!(matches!(auc(&ls(&[0.1, 0.2], &[1, 1])), Err(Error::SingleClass)));
    }

    #[test]
    fn curves_end_at_full_recall() {
        let data = ls(&[0.9, 0.8, 0.8, 0.1], &[1, 0, 1, 0]);
        let roc = roc_curve(&data).unwrap();
        assert_eq!(roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.last(), Some(&(1.0, 1.0)));
        let pr = pr_curve(&data).unwrap();
        assert_eq!(pr.last().unwrap().0, 1.0);
    }

    #[test]
    fn sample_score_cases() {
        let dims = Dims::new(5, 2, 2);
        let mut bits = vec![false; 20];
        bits[..10].iter_mut().for_each(|b| *b = true);
        let mask = HeadMask::new(BinaryMask::new(dims, [1.0; 3], bits).unwrap()).unwrap();
        assert_eq!(sample_score(&ScoreMap::zeros(dims, [1.0; 3]).unwrap(), &mask).unwrap(), 0.0);
        let ones = ScoreMap::new(dims, [1.0; 3], vec![1.0; 20]).unwrap();
        assert_eq!(sample_score(&ones, &mask).unwrap(), 10.0);
        let mut outside = vec![0.0; 20];
        outside[10..].iter_mut().for_each(|x| *x = 3.0);
        let outside = ScoreMap::new(dims, [1.0; 3], outside).unwrap();
        assert_eq!(sample_score(&outside, &mask).unwrap(), 0.0);
    }

    fn pair_fixture() -> (HeadMask, ScoreMap, ScoreMap, BinaryMask) {
        let dims = Dims::new(4, 4, 4);
        let mask = HeadMask::full(dims, [1.0; 3]).unwrap();
        let mut lesion = BinaryMask::empty(dims, [1.0; 3]).unwrap();
        lesion.data_mut()[..8].fill(true);
        let healthy: Vec<f32> = (0..64).map(|i| (i % 7) as f32 * 0.1).collect();
        let mut path = healthy.clone();
        path[..8].fill(5.0);
        (
            mask,
            ScoreMap::new(dims, [1.0; 3], healthy).unwrap(),
            ScoreMap::new(dims, [1.0; 3], path).unwrap(),
            lesion,
        )
    }

    #[test]
    fn separated_pair_has_unit_auc() {
        let (mask, h, p, lesion) = pair_fixture();
        let pair = VoxelPair {
            healthy: &h,
            pathological: &p,
            lesion: &lesion,
        };
        let reports = voxel_task_eval("bm", &[pair], &mask, VoxelPooling::HeadMask).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].auc, 1.0);
        assert_eq!(reports[0].ap, 1.0);
        assert_eq!((reports[0].n_pos, reports[0].n_neg), (8, 120));
    }

    #[test]
    fn empty_lesion_is_an_error() {
        let (mask, h, p, _) = pair_fixture();
        let empty = BinaryMask::empty(mask.dims(), [1.0; 3]).unwrap();
        let pairs = [VoxelPair {
            healthy: &h,
            pathological: &p,
            lesion: &empty,
        }];
        assert!(matches!(
            voxel_task_eval("bm", &pairs, &mask, VoxelPooling::HeadMask),
            Err(Error::EmptyLesionMask(0))
        ));
    }

    #[test]
    fn pooled_pair_matches_oracle_and_cardinality() {
        let dims = Dims::new(4, 4, 2);
        let mask = HeadMask::new(BinaryMask::new(dims, [1.0; 3], (0..32).map(|i| i % 5 != 0).collect()).unwrap())
            .unwrap();
        let mut state = 17u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) % 20) as f32 * 0.25
        };
        let maps: Vec<(ScoreMap, ScoreMap, BinaryMask)> = (0..44)
            .map(|_| {
                let h = ScoreMap::new(dims, [1.0; 3], (0..32).map(|_| next()).collect()).unwrap();
                let p = ScoreMap::new(dims, [1.0; 3], (0..32).map(|_| next()).collect()).unwrap();
                let lesion = BinaryMask::new(dims, [1.0; 3], (0..32).map(|i| i % 3 == 1).collect()).unwrap();
                (h, p, lesion)
            })
            .collect();
        let pairs: Vec<VoxelPair> = maps
            .iter()
            .map(|(h, p, l)| VoxelPair {
                healthy: h,
                pathological: p,
                lesion: l,
            })
            .collect();
        let reports = voxel_task_eval("x", &pairs, &mask, VoxelPooling::HeadMask).unwrap();
        assert_eq!(reports.len(), 44);
        for ((h, p, l), r) in maps.iter().zip(&reports) {
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for v in 0..32 {
                if mask.get(v) {
                    scores.push(h.data()[v] as f64);
                    labels.push(false);
                    scores.push(p.data()[v] as f64);
                    labels.push(l.get(v));
                }
            }
            assert!((r.auc - auc_oracle(&scores, &labels)).abs() < 1e-12);
            assert!((r.ap - ap_oracle(&scores, &labels)).abs() < 1e-12);
        }
        let all = voxel_task_eval("x", &pairs[..1], &mask, VoxelPooling::AllVoxels).unwrap();
        assert_eq!(all[0].n_pos + all[0].n_neg, 64);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    fn labeled() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..12).prop_map(|k| k as f64 * 0.5 - 2.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn metrics_match_oracles((scores, mut labels) in labeled()) {
            labels[0] = true;
            labels[1] = false;
            let ap = average_precision_slices(&scores, &labels).unwrap();
            let a = auc_slices(&scores, &labels).unwrap();
            prop_assert!((ap - ap_oracle(&scores, &labels)).abs() < 1e-12);
            prop_assert!((a - auc_oracle(&scores, &labels)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ap) && (0.0..=1.0).contains(&a));
        }

        #[test]
        fn monotone_transform_invariance((scores, mut labels) in labeled()) {
            labels[0] = true;
            labels[1] = false;
            let moved: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
            prop_assert_eq!(auc_slices(&scores, &labels).unwrap(), auc_slices(&moved, &labels).unwrap());
            prop_assert_eq!(
                average_precision_slices(&scores, &labels).unwrap(),
                average_precision_slices(&moved, &labels).unwrap()
            );
        }

        #[test]
        fn label_swap_with_negation((scores, mut labels) in labeled()) {
            labels[0] = true;
            labels[1] = false;
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
            prop_assert_eq!(auc_slices(&scores, &labels).unwrap(), auc_slices(&neg, &flipped).unwrap());
        }
    }
}
