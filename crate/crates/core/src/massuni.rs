//! Voxel-wise lesion-symptom tests: Fisher exact (binary labels) and
//! Brunner-Munzel (real labels), with Bonferroni and permutation
//! max-statistic thresholds.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::grids::VolumeGrid;
use crate::rng::{derive_seed, rng};
use crate::simulate::{Dataset, LabelType};

pub const DEFAULT_MIN_HITS: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum MassUniError {
    #[error("{0:?} test needs {1:?} labels")]
    LabelMismatch(TestKind, LabelType),
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Fisher,
    BrunnerMunzel,
}

impl TestKind {
    pub fn label_type(&self) -> LabelType {
        match self {
            TestKind::Fisher => LabelType::Binary,
            TestKind::BrunnerMunzel => LabelType::Real,
        }
    }
}

/// (lesioned & deficit, lesioned & no deficit, intact & deficit,
/// intact & no deficit).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContingencyTable {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

/// ln(k!) for k = 0..=n.
fn log_factorials(n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n + 1];
    for k in 1..=n {
        t[k] = t[k - 1] + (k as f64).ln();
    }
    t
}

/// Hypergeometric point probabilities ln P(a = x) for row total `n`,
/// column total `k` and grand total `total`, over x in `lo..=hi`.
struct Hypergeom<'a> {
    lf: &'a [f64],
    total: usize,
    k: usize,
    n: usize,
}

impl Hypergeom<'_> {
    fn range(&self) -> (usize, usize) {
        ((self.k + self.n).saturating_sub(self.total), self.k.min(self.n))
    }

    fn ln_pmf(&self, x: usize) -> f64 {
        let lf = self.lf;
        let (t, k, n) = (self.total, self.k, self.n);
        lf[k] + lf[t - k] + lf[n] + lf[t - n]
            - lf[x]
            - lf[k - x]
            - lf[n - x]
            - lf[t + x - k - n]
            - lf[t]
    }

    /// Two-sided p for every feasible x: mass of tables no more probable
    /// than x, normalized so that selecting every table gives exactly 1.
    fn two_sided_all(&self) -> Vec<f64> {
        let (lo, hi) = self.range();
        let pmf: Vec<f64> = (lo..=hi).map(|x| self.ln_pmf(x).exp()).collect();
        let total: f64 = pmf.iter().sum();
        pmf.iter()
            .map(|&p0| {
                let cut = p0 * (1.0 + 1e-9);
                pmf.iter().filter(|&&p| p <= cut).sum::<f64>() / total
            })
            .collect()
    }
}

/// Two-sided Fisher exact p (probability-mass rule).
pub fn fisher_exact_two_sided(t: ContingencyTable) -> f64 {
    let total = (t.a + t.b + t.c + t.d) as usize;
    if total == 0 {
        return 1.0;
    }
    let lf = log_factorials(total);
    let h = Hypergeom {
        lf: &lf,
        total,
        k: (t.a + t.c) as usize,
        n: (t.a + t.b) as usize,
    };
    let (lo, _) = h.range();
    h.two_sided_all()[t.a as usize - lo]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BmResult {
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
    /// P(X < Y) + P(X = Y)/2 for X from group 0 and Y from group 1.
    pub relative_effect: f64,
    /// False when a group has fewer than two samples or the rank variance
    /// vanishes; statistic is then 0 and p is 1.
    pub testable: bool,
}

/// Brunner-Munzel from tie blocks in ascending value order: `sizes[b]`
/// samples share the b-th value, `c1[b]` of them in group 1.
fn bm_from_blocks(sizes: &[usize], c1: &[usize]) -> BmResult {
    let n1: usize = c1.iter().sum();
    let n: usize = sizes.iter().sum();
    let n0 = n - n1;
    let (mut cum, mut cum0, mut cum1) = (0usize, 0usize, 0usize);
    // per block: combined midrank, within-group-0 and within-group-1 midranks
    let mut ranks = Vec::with_capacity(sizes.len());
    for (&s, &k1) in sizes.iter().zip(c1) {
        let k0 = s - k1;
        ranks.push((
            cum as f64 + (s as f64 + 1.0) / 2.0,
            cum0 as f64 + (k0 as f64 + 1.0) / 2.0,
            cum1 as f64 + (k1 as f64 + 1.0) / 2.0,
        ));
        cum += s;
        cum0 += k0;
        cum1 += k1;
    }
    let (mut sum0, mut sum1) = (0.0, 0.0);
    for ((&s, &k1), r) in sizes.iter().zip(c1).zip(&ranks) {
        sum0 += (s - k1) as f64 * r.0;
        sum1 += k1 as f64 * r.0;
    }
    let (f0, f1) = (n0 as f64, n1 as f64);
    let relative_effect = if n0 > 0 && n1 > 0 {
        (sum1 / f1 - (f1 + 1.0) / 2.0) / f0
    } else {
        0.5
    };
    let untestable = BmResult {
        statistic: 0.0,
        df: f64::NAN,
        p_value: 1.0,
        relative_effect,
        testable: false,
    };
    if n0 < 2 || n1 < 2 {
        return untestable;
    }
    let (m0, m1) = (sum0 / f0, sum1 / f1);
    let (i0, i1) = ((f0 + 1.0) / 2.0, (f1 + 1.0) / 2.0);
    let (mut v0, mut v1) = (0.0, 0.0);
    for ((&s, &k1), r) in sizes.iter().zip(c1).zip(&ranks) {
        let k0 = s - k1;
        if k0 > 0 {
            v0 += k0 as f64 * (r.0 - r.1 - m0 + i0).powi(2);
        }
        if k1 > 0 {
            v1 += k1 as f64 * (r.0 - r.2 - m1 + i1).powi(2);
        }
    }
    let (s0, s1) = (v0 / (f0 - 1.0), v1 / (f1 - 1.0));
    let pooled = f0 * s0 + f1 * s1;
    // rank variances are exact multiples of 1/4 before division
    if pooled <= 1e-12 * (f0 + f1) {
        return untestable;
    }
    let statistic = f0 * f1 * (m1 - m0) / ((f0 + f1) * pooled.sqrt());
    let df = pooled * pooled / ((f0 * s0).powi(2) / (f0 - 1.0) + (f1 * s1).powi(2) / (f1 - 1.0));
    let p_value = match StudentsT::new(0.0, 1.0, df) {
        Ok(t) => (2.0 * t.cdf(-statistic.abs())).min(1.0),
        Err(_) => 1.0,
    };
    BmResult {
        statistic,
        df,
        p_value,
        relative_effect,
        testable: true,
    }
}

/// Tie blocks of `values` in ascending order: (block of each sample,
/// block sizes).
fn tie_blocks(values: &[f64]) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut block = vec![0; values.len()];
    let mut sizes: Vec<usize> = Vec::new();
    for (k, &i) in order.iter().enumerate() {
        if k == 0 || values[i] != values[order[k - 1]] {
            sizes.push(0);
        }
        *sizes.last_mut().unwrap() += 1;
        block[i] = sizes.len() - 1;
    }
    (block, sizes)
}

/// Brunner-Munzel test of group 0 against group 1 (midranks for ties,
/// Satterthwaite degrees of freedom).
pub fn brunner_munzel(group0: &[f64], group1: &[f64]) -> BmResult {
    let all: Vec<f64> = group0.iter().chain(group1).copied().collect();
    let (block, sizes) = tie_blocks(&all);
    let mut c1 = vec![0; sizes.len()];
    for &b in &block[group0.len()..] {
        c1[b] += 1;
    }
    bm_from_blocks(&sizes, &c1)
}

pub fn bonferroni_threshold(alpha: f64, n_tests: usize) -> f64 {
    assert!(n_tests >= 1, "bonferroni needs at least one test");
    alpha / n_tests as f64
}

/// Bonferroni cut on the -ln p scale.
pub fn bonferroni_log_threshold(alpha: f64, n_tests: usize) -> f64 {
    -bonferroni_threshold(alpha, n_tests).ln()
}

/// Per-voxel statistic maps over a fixed lesion set, reusable across label
/// permutations.
pub struct VoxelwiseTester {
    dims: Vec<usize>,
    test: TestKind,
    min_hits: usize,
    /// Lesioned voxels of each sample.
    lesioned: Vec<Vec<u32>>,
    hits: Vec<usize>,
    /// Fisher: -ln p indexed by [hits][a], for the fixed positive count.
    fisher: Vec<Vec<f64>>,
    labels: Vec<f64>,
}

impl VoxelwiseTester {
    pub fn new(dataset: &Dataset, test: TestKind, min_hits: usize) -> Result<Self, MassUniError> {
        if dataset.label_type != test.label_type() {
            return Err(MassUniError::LabelMismatch(test, dataset.label_type));
        }
        let dims = dataset.dims().to_vec();
        let v: usize = dims.iter().product();
        let lesioned: Vec<Vec<u32>> = dataset
            .lesions
            .iter()
            .map(|x| x.nonzero().into_iter().map(|i| i as u32).collect())
            .collect();
        let mut hits = vec![0usize; v];
        for l in &lesioned {
            for &i in l {
                hits[i as usize] += 1;
            }
        }
        let n = dataset.len();
        let mut fisher = Vec::new();
        if test == TestKind::Fisher {
            let k = dataset.labels.iter().filter(|&&y| y == 1.0).count();
            let lf = log_factorials(n);
            let mut needed = vec![false; n + 1];
            hits.iter().for_each(|&h| needed[h] = true);
            fisher = (0..=n)
                .map(|h| {
                    if !needed[h] || h < min_hits {
                        return Vec::new();
                    }
                    let hg = Hypergeom {
                        lf: &lf,
                        total: n,
                        k,
                        n: h,
                    };
                    let (lo, _) = hg.range();
                    let mut row = vec![0.0; h.min(k) + 1];
                    for (j, p) in hg.two_sided_all().into_iter().enumerate() {
                        row[lo + j] = -p.ln().min(0.0);
                    }
                    row
                })
                .collect();
        }
        Ok(Self {
            dims,
            test,
            min_hits,
            lesioned,
            hits,
            fisher,
            labels: dataset.labels.clone(),
        })
    }

    pub fn hits(&self) -> &[usize] {
        &self.hits
    }

    pub fn eligible(&self, voxel: usize) -> bool {
        self.hits[voxel] >= self.min_hits
    }

    /// Statistic map for labels `labels[perm[i]]` on sample i (identity when
    /// `perm` is `None`).
    pub fn statistics(&self, perm: Option<&[usize]>) -> Vec<f64> {
        let v = self.hits.len();
        let label = |i: usize| match perm {
            Some(p) => self.labels[p[i]],
            None => self.labels[i],
        };
        let mut out = vec![0.0; v];
        match self.test {
            TestKind::Fisher => {
                let mut a = vec![0usize; v];
                for (i, l) in self.lesioned.iter().enumerate() {
                    if label(i) == 1.0 {
                        for &k in l {
                            a[k as usize] += 1;
                        }
                    }
                }
                for k in 0..v {
                    if self.eligible(k) {
                        out[k] = self.fisher[self.hits[k]][a[k]];
                    }
                }
            }
            TestKind::BrunnerMunzel => {
                let values: Vec<f64> = (0..self.labels.len()).map(label).collect();
                let (block, sizes) = tie_blocks(&values);
                let nb = sizes.len();
                let mut c1 = vec![0usize; v * nb];
                for (i, l) in self.lesioned.iter().enumerate() {
                    for &k in l {
                        c1[k as usize * nb + block[i]] += 1;
                    }
                }
                for k in 0..v {
                    if self.eligible(k) {
                        // group 1 = lesioned
                        let r = bm_from_blocks(&sizes, &c1[k * nb..(k + 1) * nb]);
                        out[k] = r.statistic.abs();
                    }
                }
            }
        }
        out
    }

    pub fn map(&self) -> VolumeGrid {
        VolumeGrid::real_from_f64(&self.dims, &self.statistics(None)).expect("finite statistics")
    }

    /// Sorted maxima of `n_perm` permuted statistic maps; replicate i uses
    /// a permutation drawn from `derive_seed(seed, i)`.
    pub fn permutation_maxima(&self, n_perm: usize, seed: u64) -> Vec<f64> {
        let n = self.labels.len();
        let mut maxima: Vec<f64> = (0..n_perm)
            .into_par_iter()
            .map(|i| {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng(derive_seed(seed, i as u64)));
                self.statistics(Some(&perm))
                    .into_iter()
                    .fold(0.0, f64::max)
            })
            .collect();
        maxima.sort_by(f64::total_cmp);
        maxima
    }
}

/// Nearest-rank percentile of ascending `sorted`.
pub fn percentile_of_sorted(sorted: &[f64], percentile: f64) -> f64 {
    let n = sorted.len();
    let rank = ((percentile / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn voxelwise_map(dataset: &Dataset, test: TestKind, min_hits: usize) -> Result<VolumeGrid, MassUniError> {
    Ok(VoxelwiseTester::new(dataset, test, min_hits)?.map())
}

pub fn fwer_threshold_permutation(
    dataset: &Dataset,
    test: TestKind,
    n_perm: usize,
    percentile: f64,
    min_hits: usize,
    seed: u64,
) -> Result<f64, MassUniError> {
    if n_perm < 100 {
        return Err(MassUniError::Argument(format!("n_perm {n_perm} < 100")));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(MassUniError::Argument(format!("percentile {percentile}")));
    }
    let t = VoxelwiseTester::new(dataset, test, min_hits)?;
    Ok(percentile_of_sorted(&t.permutation_maxima(n_perm, seed), percentile))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatMap {
    pub statistic: VolumeGrid,
    pub threshold: f64,
    pub significant: VolumeGrid,
}

impl StatMap {
    /// Thresholds the full-precision statistics; the stored map is only
    /// single precision, and rounding could lift a tie above the cut.
    pub fn new(dims: &[usize], statistic: &[f64], threshold: f64) -> Self {
        let mask: Vec<bool> = statistic.iter().map(|&s| s > threshold).collect();
        Self {
            statistic: VolumeGrid::real_from_f64(dims, statistic).expect("finite statistics"),
            threshold,
            significant: VolumeGrid::from_mask(dims, &mask).expect("same dims"),
        }
    }
}
