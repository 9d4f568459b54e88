//! Paired bootstrap, Wilcoxon signed-rank test and Bonferroni correction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{auc_slices, average_precision_slices};

/// Largest n for which the Wilcoxon p-value is computed by exact enumeration.
pub const EXACT_MAX_N: usize = 20;
pub const MIN_PAIRS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ap,
    Auc,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Ap => "ap",
            Metric::Auc => "auc",
        }
    }

    pub fn compute(self, scores: &[f64], labels: &[bool]) -> Result<f64> {
        match self {
            Metric::Ap => average_precision_slices(scores, labels),
            Metric::Auc => auc_slices(scores, labels),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ap" => Ok(Metric::Ap),
            "auc" => Ok(Metric::Auc),
            other => Err(Error::Invalid(format!("unknown metric {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub metric: Metric,
    pub iters: usize,
    pub seed: u64,
    /// Two-sided level of the difference intervals.
    pub alpha: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Auc,
            iters: 100_000,
            seed: 0,
            alpha: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub mean: f64,
    pub p2_5: f64,
    pub p50: f64,
    pub p97_5: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifferenceCi {
    pub a: String,
    pub b: String,
    /// Point estimate of metric(a) - metric(b) on the full sample.
    pub point: f64,
    pub mean: f64,
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
}

impl DifferenceCi {
    pub fn excludes_zero(&self) -> bool {
        self.lower > 0.0 || self.upper < 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub methods: Vec<String>,
    pub metric: Metric,
    pub iters: usize,
    pub seed: u64,
    pub alpha: f64,
    pub point: Vec<f64>,
    pub distributions: Vec<DistributionSummary>,
    pub differences: Vec<DifferenceCi>,
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn summarize(values: &[f64]) -> DistributionSummary {
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    DistributionSummary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        p2_5: percentile(&sorted, 0.025),
        p50: percentile(&sorted, 0.5),
        p97_5: percentile(&sorted, 0.975),
    }
}

/// Draws one resample of `labels.len()` indices that contains both classes.
fn resample(rng: &mut ChaCha8Rng, labels: &[bool], out: &mut Vec<usize>) {
    let n = labels.len();
    loop {
        out.clear();
        out.extend((0..n).map(|_| rng.random_range(0..n)));
        let pos = out.iter().filter(|&&i| labels[i]).count();
        if pos > 0 && pos < n {
            return;
        }
    }
}

/// Paired bootstrap over samples: every iteration applies one shared index
/// resample to all methods. `scores[m][i]` is the score of method `m` on
/// sample `i`.
pub fn bootstrap_compare(
    methods: &[String],
    scores: &[Vec<f64>],
    labels: &[bool],
    config: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if methods.len() != scores.len() || methods.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} method names for {} score vectors",
            methods.len(),
            scores.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| s.len() != labels.len()) {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} labels",
            bad.len(),
            labels.len()
        )));
    }
    if config.iters == 0 {
        return Err(Error::Invalid("bootstrap needs at least one iteration".into()));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(Error::Invalid(format!("alpha {} outside (0, 1)", config.alpha)));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos < 2 || labels.len() - n_pos < 2 {
        return Err(Error::SingleClass);
    }
    let metric = config.metric;
    let point = scores
        .iter()
        .map(|s| metric.compute(s, labels))
        .collect::<Result<Vec<_>>>()?;

    // draws[it][m]
    let draws: Vec<Vec<f64>> = (0..config.iters)
        .into_par_iter()
        .map_init(
            || (Vec::new(), Vec::new(), Vec::new()),
            |(idx, s, l), it| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(it as u64);
                resample(&mut rng, labels, idx);
                l.clear();
                l.extend(idx.iter().map(|&i| labels[i]));
                scores
                    .iter()
                    .map(|col| {
                        s.clear();
                        s.extend(idx.iter().map(|&i| col[i]));
                        metric.compute(s, l)
                    })
                    .collect::<Result<Vec<f64>>>()
            },
        )
        .collect::<Result<_>>()?;

    let column = |m: usize| -> Vec<f64> { draws.iter().map(|d| d[m]).collect() };
    let distributions = (0..methods.len()).map(|m| summarize(&column(m))).collect();

    let mut differences = Vec::new();
    for a in 0..methods.len() {
        for b in a + 1..methods.len() {
            let mut diff: Vec<f64> = draws.iter().map(|d| d[a] - d[b]).collect();
            let mean = diff.iter().sum::<f64>() / diff.len() as f64;
            diff.sort_unstable_by(f64::total_cmp);
            differences.push(DifferenceCi {
                a: methods[a].clone(),
                b: methods[b].clone(),
                point: point[a] - point[b],
                mean,
                lower: percentile(&diff, config.alpha / 2.0),
                median: percentile(&diff, 0.5),
                upper: percentile(&diff, 1.0 - config.alpha / 2.0),
            });
        }
    }

    Ok(BootstrapResult {
        methods: methods.to_vec(),
        metric,
        iters: config.iters,
        seed: config.seed,
        alpha: config.alpha,
        point,
        distributions,
        differences,
    })
}

/// Midranks (1-based) of `values`; tied values share the mean of their ranks.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_unstable_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// Non-zero differences used by the test.
    pub n: usize,
    pub n_zeros_dropped: usize,
    /// Sum of signed ranks.
    pub w: f64,
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    /// Exact two-sided p-value, computed when `n <= EXACT_MAX_N`.
    pub p_exact: Option<f64>,
    /// Normal approximation with tie and continuity corrections.
    pub p_normal: f64,
}

impl Wilcoxon {
    /// The reported p-value: exact when available, otherwise the approximation.
    pub fn p_two_sided(&self) -> f64 {
        self.p_exact.unwrap_or(self.p_normal)
    }
}

/// Wilcoxon signed-rank test on the differences `a[i] - b[i]`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} paired values", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("paired values"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&d| d != 0.0).collect();
    let n_zeros_dropped = a.len() - diffs.len();
    if diffs.is_empty() {
        return Err(Error::AllZeroDifferences);
    }
    let n = diffs.len();
    if n < MIN_PAIRS {
        return Err(Error::TooFewPairs(n));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&diffs).filter(|(_, &d)| d > 0.0).map(|(r, _)| r).sum();
    let total: f64 = ranks.iter().sum();
    let w = 2.0 * w_plus - total;

    let p_exact = (n <= EXACT_MAX_N).then(|| exact_p(&ranks, w_plus));
    let p_normal = normal_p(&abs, n, w_plus);
    Ok(Wilcoxon {
        n,
        n_zeros_dropped,
        w,
        w_plus,
        p_exact,
        p_normal,
    })
}

/// Enumerates the null distribution of W+ over all 2^n sign patterns via a
/// subset-sum count on doubled ranks (midranks are multiples of 1/2).
fn exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for t in (0..=reach).rev() {
            if counts[t] != 0.0 {
                counts[t + r] += counts[t];
            }
        }
        reach += r;
    }
    let obs = (2.0 * w_plus).round() as usize;
    let patterns = 2f64.powi(ranks.len() as i32);
    let lower: f64 = counts[..=obs].iter().sum::<f64>() / patterns;
    let upper: f64 = counts[obs..].iter().sum::<f64>() / patterns;
    (2.0 * lower.min(upper)).min(1.0)
}

fn normal_p(abs: &[f64], n: usize, w_plus: f64) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut sorted = abs.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    statrs::function::erf::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub a: String,
    pub b: String,
    pub n_pairs: usize,
    pub n_zeros_dropped: usize,
    pub w: f64,
    pub p_two_sided: f64,
    pub p_exact: Option<f64>,
    pub p_normal: f64,
    pub m_tests: usize,
    pub p_bonferroni: f64,
}

impl PairedTestResult {
    pub fn new(a: &str, b: &str, test: &Wilcoxon, m_tests: usize) -> Result<Self> {
        let p = test.p_two_sided();
        Ok(Self {
            a: a.to_string(),
            b: b.to_string(),
            n_pairs: test.n,
            n_zeros_dropped: test.n_zeros_dropped,
            w: test.w,
            p_two_sided: p,
            p_exact: test.p_exact,
            p_normal: test.p_normal,
            m_tests,
            p_bonferroni: bonferroni_adjust(p, m_tests)?,
        })
    }
}

pub fn bonferroni_adjust(p: f64, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::Invalid("Bonferroni test count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Invalid(format!("p-value {p} outside [0, 1]")));
    }
    Ok((m as f64 * p).min(1.0))
}

pub fn bonferroni_threshold(alpha: f64, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::Invalid("Bonferroni test count must be at least 1".into()));
    }
    Ok(alpha / m as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Two-sided exact p by brute force over all sign patterns.
    fn brute_force_p(diffs: &[f64]) -> f64 {
        let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
        let ranks = midranks(&abs);
        let obs: f64 = ranks.iter().zip(diffs).filter(|(_, &d)| d > 0.0).map(|(r, _)| r).sum();
        let n = diffs.len();
        let (mut le, mut ge) = (0u64, 0u64);
        for mask in 0u64..(1 << n) {
            let t: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if t <= obs + 1e-9 {
                le += 1;
            }
            if t >= obs - 1e-9 {
                ge += 1;
            }
        }
        let total = (1u64 << n) as f64;
        (2.0 * (le.min(ge) as f64 / total)).min(1.0)
    }

    #[test]
    fn one_to_five_is_a_sixteenth() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let t = wilcoxon_signed_rank(&a, &[0.0; 5]).unwrap();
        assert_eq!(t.p_exact, Some(0.0625));
        assert_eq!(t.p_two_sided(), 0.0625);
        assert_eq!(t.w_plus, 15.0);
        assert_eq!(t.w, 15.0);
    }

    #[test]
    fn swapping_negates_w() {
        let a = [0.3, 1.2, -0.4, 2.2, 0.9, 1.7, 0.1];
        let b = [0.1, 0.2, 0.5, 0.3, 0.2, 0.1, 0.4];
        let ab = wilcoxon_signed_rank(&a, &b).unwrap();
        let ba = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(ab.w, -ba.w);
        assert_eq!(ab.p_exact, ba.p_exact);
        assert_eq!(ab.p_normal, ba.p_normal);
    }

    #[test]
    fn zero_differences_are_dropped() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let b = [1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let t = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!((t.n, t.n_zeros_dropped), (5, 2));
        assert!(matches!(wilcoxon_signed_rank(&a, &a), Err(Error::AllZeroDifferences)));
        assert!(matches!(
            wilcoxon_signed_rank(&a[..4], &[0.0; 4]),
            Err(Error::TooFewPairs(4))
        ));
    }

    #[test]
    fn large_consistent_effect_passes_corrected_threshold() {
        let a: Vec<f64> = (0..44).map(|i| 1.0 + (i as f64 * 0.37).sin() * 0.2).collect();
        let b: Vec<f64> = (0..44).map(|i| (i as f64 * 0.11).cos() * 0.1).collect();
        let t = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(t.p_exact.is_none());
        assert!(t.p_two_sided() < bonferroni_threshold(0.05, 24).unwrap());
    }

    #[test]
    fn exact_matches_brute_force_with_ties() {
        let diffs = [1.0, -1.0, 2.0, 2.0, -3.0, 4.0, 4.0, 4.0, -0.5, 6.0];
        let t = wilcoxon_signed_rank(&diffs, &[0.0; 10]).unwrap();
        assert!((t.p_exact.unwrap() - brute_force_p(&diffs)).abs() < 1e-12);
    }

    #[test]
    fn midranks_average_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn bonferroni_cases() {
        let t = bonferroni_threshold(0.05, 24).unwrap();
        assert!((t - 0.002083333333333333).abs() < 1e-15);
        assert_eq!(bonferroni_adjust(0.01, 1).unwrap(), 0.01);
        assert_eq!(bonferroni_adjust(0.1, 24).unwrap(), 1.0);
        assert!(bonferroni_adjust(0.1, 0).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let s = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&s, 0.5), 2.0);
        assert_eq!(percentile(&s, 0.125), 0.5);
        assert_eq!(percentile(&s, 1.0), 4.0);
    }

    fn cohort(n: usize) -> (Vec<f64>, Vec<bool>) {
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 1).collect();
        let scores = (0..n)
            .map(|i| (i as f64 * 1.618).fract() + if labels[i] { 0.3 } else { 0.0 })
            .collect();
        (scores, labels)
    }

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("m{i}")).collect()
    }

    fn config(iters: usize) -> BootstrapConfig {
        BootstrapConfig {
            metric: Metric::Auc,
            iters,
            seed: 7,
            alpha: 0.05,
        }
    }

    #[test]
    fn identical_methods_have_zero_difference() {
        let (s, l) = cohort(30);
        let r = bootstrap_compare(&names(2), &[s.clone(), s], &l, &config(500)).unwrap();
        let d = &r.differences[0];
        assert_eq!((d.lower, d.upper), (0.0, 0.0));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (s, l) = cohort(40);
        let other: Vec<f64> = s.iter().map(|x| x * x).collect();
        let a = bootstrap_compare(&names(2), &[s.clone(), other.clone()], &l, &config(400)).unwrap();
        let b = bootstrap_compare(&names(2), &[s, other], &l, &config(400)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn independent_of_thread_count() {
        let (s, l) = cohort(40);
        let other: Vec<f64> = s.iter().rev().cloned().collect();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| bootstrap_compare(&names(2), &[s.clone(), other.clone()], &l, &config(300)).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn dominating_method_has_nonnegative_lower_bound() {
        let (s, l) = cohort(40);
        // a ranks every positive above every negative
        let a: Vec<f64> = l.iter().zip(&s).map(|(&p, x)| x + if p { 10.0 } else { 0.0 }).collect();
        let r = bootstrap_compare(&names(2), &[a, s], &l, &config(1000)).unwrap();
        assert!(r.differences[0].lower >= 0.0);
        assert_eq!(r.point[0], 1.0);
    }

    #[test]
    fn monotone_transform_leaves_distribution_unchanged() {
        let (s, l) = cohort(36);
        let other: Vec<f64> = s.iter().map(|x| (x * 3.1).sin()).collect();
        let moved: Vec<f64> = s.iter().map(|x| x.exp() * 2.0 - 1.0).collect();
        let a = bootstrap_compare(&names(2), &[s, other.clone()], &l, &config(300)).unwrap();
        let b = bootstrap_compare(&names(2), &[moved, other], &l, &config(300)).unwrap();
        assert_eq!(a.distributions, b.distributions);
        assert_eq!(a.differences, b.differences);
    }

    #[test]
    fn interval_narrows_with_dominance() {
        let (s, l) = cohort(40);
        let width = |shift: f64| {
            let a: Vec<f64> = l.iter().zip(&s).map(|(&p, x)| x + if p { shift } else { 0.0 }).collect();
            let r = bootstrap_compare(&names(2), &[a, s.clone()], &l, &config(800)).unwrap();
            r.distributions[0].p97_5 - r.distributions[0].p2_5
        };
        let widths: Vec<f64> = [0.0, 0.3, 0.6, 2.0].iter().map(|&d| width(d)).collect();
        assert!(widths.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{widths:?}");
        assert_eq!(*widths.last().unwrap(), 0.0);
    }

    #[test]
    fn summaries_are_ordered() {
        let (s, l) = cohort(30);
        let other: Vec<f64> = s.iter().map(|x| (x * 7.0).cos()).collect();
        let r = bootstrap_compare(&names(2), &[s, other], &l, &config(500)).unwrap();
        for d in &r.distributions {
            assert!(d.p2_5 <= d.p50 && d.p50 <= d.p97_5);
        }
        let d = &r.differences[0];
        assert!(d.lower <= d.median && d.median <= d.upper);
    }

    #[test]
    fn rejects_single_class() {
        let s = vec![0.1, 0.2, 0.3, 0.4];
        assert!(matches!(
            bootstrap_compare(&names(1), &[s], &[true, true, true, false], &config(10)),
            Err(Error::SingleClass)
        ));
    }

    proptest! {
        #[test]
        fn exact_p_matches_enumeration(diffs in prop::collection::vec((-6i32..=6).prop_filter("nonzero", |d| *d != 0), 5..13)) {
            let d: Vec<f64> = diffs.iter().map(|&x| x as f64).collect();
            let t = wilcoxon_signed_rank(&d, &vec![0.0; d.len()]).unwrap();
            let p = t.p_exact.unwrap();
            prop_assert!((p - brute_force_p(&d)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&t.p_normal));
        }
    }
}
