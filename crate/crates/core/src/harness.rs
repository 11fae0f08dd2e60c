//! Experiment matrices: every (method, sample size, seed) cell simulates its
//! cohort from seeds derived from the master seed, fits one method, and
//! scores the inferred map against the ground truth.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dlm::{
    calibrate_threshold, infer_substrate, train, DlmConfig, DlmError, ElboTerms, LabelKind,
    LatentMode, TrainedDlm,
};
use crate::grids::VolumeGrid;
use crate::massuni::{
    bonferroni_log_threshold, percentile_of_sorted, MassUniError, StatMap, TestKind,
    VoxelwiseTester, DEFAULT_MIN_HITS,
};
use crate::metrics::{centroid, centroid_displacement, norm, EvalReport, MetricError};
use crate::rng::{derive_path, derive_seed, rng, str_key};
use crate::simulate::{
    generate_lesions, realize_substrate, simulate_dataset, stratified_sample, Blob, Dataset,
    DeficitModel, LabelType, LesionDistributionSpec, OrientationMode, SimError,
    StructuredOrientation, SubstrateSpec,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dlm(#[from] DlmError),
    #[error(transparent)]
    MassUni(#[from] MassUniError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    VlsmFisher,
    VlsmBm,
    Dlm,
    DlmLabelsOnly,
    DlmDeterministic,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::VlsmFisher,
        Method::VlsmBm,
        Method::Dlm,
        Method::DlmLabelsOnly,
        Method::DlmDeterministic,
    ];

    pub fn key(&self) -> &'static str {
        match self {
            Method::VlsmFisher => "vlsm_fisher",
            Method::VlsmBm => "vlsm_bm",
            Method::Dlm => "dlm",
            Method::DlmLabelsOnly => "dlm_labels_only",
            Method::DlmDeterministic => "dlm_deterministic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.key() == s)
    }

    pub fn test_kind(&self) -> Option<TestKind> {
        match self {
            Method::VlsmFisher => Some(TestKind::Fisher),
            Method::VlsmBm => Some(TestKind::BrunnerMunzel),
            _ => None,
        }
    }

    /// The model configuration this method trains, from a base config.
    pub fn dlm_config(&self, base: &DlmConfig) -> Option<DlmConfig> {
        let mut c = base.clone();
        match self {
            Method::Dlm => {}
            Method::DlmLabelsOnly => c.elbo_terms = ElboTerms::LabelsOnly,
            Method::DlmDeterministic => c.latent_mode = LatentMode::Deterministic,
            _ => return None,
        }
        Some(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VlsmOptions {
    pub n_perm: usize,
    pub percentile: f64,
    pub min_hits: usize,
}

impl Default for VlsmOptions {
    fn default() -> Self {
        Self {
            n_perm: 2000,
            percentile: 95.0,
            min_hits: DEFAULT_MIN_HITS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub scenario: String,
    pub dims: Vec<usize>,
    /// `count` is the cohort size sampled from; its seed is derived per row.
    pub lesions: LesionDistributionSpec,
    pub substrate: SubstrateSpec,
    /// Its seed is derived per row.
    pub deficit: DeficitModel,
    pub methods: Vec<Method>,
    pub sample_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub master_seed: u64,
    /// Architecture and optimizer; dims, label kind and seed are set per row.
    #[serde(default)]
    pub dlm: DlmConfig,
    #[serde(default)]
    pub vlsm: VlsmOptions,
}

impl ExperimentSpec {
    pub fn label_type(&self) -> LabelType {
        if self.deficit.omega.is_binary() {
            LabelType::Binary
        } else {
            LabelType::Real
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Spec(m));
        if self.methods.is_empty() || self.sample_sizes.is_empty() || self.seeds.is_empty() {
            return bad("methods, sample_sizes and seeds must be non-empty".into());
        }
        let lt = self.label_type();
        for m in &self.methods {
            if let Some(t) = m.test_kind() {
                if t.label_type() != lt {
                    return bad(format!("{} needs {:?} labels, deficit gives {lt:?}", m.key(), t.label_type()));
                }
            }
        }
        self.deficit.validate()?;
        self.lesions.validate(&self.dims)?;
        if self.methods.iter().any(|m| m.dlm_config(&self.dlm).is_some()) {
            self.row_dlm_config(Method::Dlm, 0).validate()?;
        }
        Ok(())
    }

    fn row_dlm_config(&self, method: Method, seed: u64) -> DlmConfig {
        let mut c = method.dlm_config(&self.dlm).unwrap_or_else(|| self.dlm.clone());
        c.dims = self.dims.clone();
        c.label_kind = match self.label_type() {
            LabelType::Binary => LabelKind::Bernoulli,
            LabelType::Real => LabelKind::Gaussian,
        };
        c.rng_seed = seed;
        c
    }

    /// The cohort every row with this seed samples from, and the map it is
    /// scored against.
    pub fn cohort(&self, seed: u64) -> Result<(Dataset, VolumeGrid), HarnessError> {
        let mut ls = self.lesions.clone();
        ls.rng_seed = derive_path(self.master_seed, &[seed, 0]);
        let lesions = generate_lesions(&ls, &self.dims)?;
        let truth = realize_substrate(&self.substrate, &self.dims)?.ground_truth;
        let mut model = self.deficit.clone();
        model.rng_seed = derive_path(self.master_seed, &[seed, 1]);
        let pool = simulate_dataset(lesions, &truth, &model)?;
        let scored = match &self.deficit.heterogeneity {
            Some(other) => union(&truth, &realize_substrate(other, &self.dims)?.ground_truth),
            None => truth,
        };
        Ok((pool, scored))
    }

    /// Stratified (binary) or uniform (real) subsample of size `n`.
    pub fn sample(&self, pool: &Dataset, n: usize, seed: u64) -> Result<Dataset, SimError> {
        let mut g = rng(derive_path(self.master_seed, &[seed, n as u64, 2]));
        match pool.label_type {
            LabelType::Binary => stratified_sample(pool, n, &mut g),
            LabelType::Real => {
                if n > pool.len() {
                    return Err(SimError::Infeasible(format!("{n} samples from a cohort of {}", pool.len())));
                }
                let mut idx: Vec<usize> = (0..pool.len()).collect();
                idx.shuffle(&mut g);
                let mut idx = idx[..n].to_vec();
                idx.sort_unstable();
                use rand::Rng;
                pool.subset(&idx, g.gen())
            }
        }
    }
}

fn union(a: &VolumeGrid, b: &VolumeGrid) -> VolumeGrid {
    let m: Vec<bool> = a.mask().iter().zip(b.mask()).map(|(x, y)| *x || y).collect();
    VolumeGrid::from_mask(a.dims(), &m).expect("same dims")
}

/// Result of fitting one method to one cohort.
#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub binary_map: VolumeGrid,
    /// Quantile level t for the model, FWER cut for the mass-univariate
    /// tests.
    pub threshold: f64,
    pub score_map: VolumeGrid,
    pub trained: Option<TrainedDlm>,
}

pub fn fit_vlsm(
    test: TestKind,
    dataset: &Dataset,
    opts: &VlsmOptions,
    seed: u64,
) -> Result<MethodOutput, HarnessError> {
    let tester = VoxelwiseTester::new(dataset, test, opts.min_hits)?;
    let maxima = tester.permutation_maxima(opts.n_perm, seed);
    let threshold = percentile_of_sorted(&maxima, opts.percentile);
    let sm = StatMap::new(dataset.dims(), &tester.statistics(None), threshold);
    Ok(MethodOutput {
        binary_map: sm.significant,
        threshold,
        score_map: sm.statistic,
        trained: None,
    })
}

pub fn fit_dlm(config: &DlmConfig, dataset: &Dataset) -> Result<MethodOutput, HarnessError> {
    let mut trained = train(config, dataset)?;
    let seed = derive_seed(config.rng_seed, 0x5eed);
    let mean = infer_substrate(&mut trained.model, config.n_substrate_samples, seed)?;
    let inf = calibrate_threshold(&mean, config.label_kind, config.sigma_floor, dataset)?;
    Ok(MethodOutput {
        binary_map: inf.binary_map,
        threshold: inf.threshold,
        score_map: inf.mean_map,
        trained: Some(trained),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    pub method: String,
    pub n: usize,
    pub seed: u64,
    pub dice: Option<f64>,
    pub hausdorff: Option<f64>,
    pub asd: Option<f64>,
    pub displacement: Option<f64>,
    pub threshold: Option<f64>,
    pub excluded: bool,
    pub reason: String,
    pub wall_secs: f64,
}

pub const CSV_HEADER: &str =
    "scenario,method,n,seed,dice,hausdorff,asd,displacement,threshold,excluded,reason,wall_secs";

impl ResultRow {
    fn excluded(spec: &ExperimentSpec, method: Method, n: usize, seed: u64, reason: String) -> Self {
        Self {
            scenario: spec.scenario.clone(),
            method: method.key().into(),
            n,
            seed,
            dice: None,
            hausdorff: None,
            asd: None,
            displacement: None,
            threshold: None,
            excluded: true,
            reason,
            wall_secs: 0.0,
        }
    }
}

/// Rows in the order given, `wall_secs` included.
pub fn write_rows<W: Write>(rows: &[ResultRow], sink: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(sink);
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(text: &str) -> Result<Vec<ResultRow>, HarnessError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// One cell of the matrix, computed from the spec alone.
pub fn run_row(spec: &ExperimentSpec, method: Method, n: usize, seed: u64) -> Result<ResultRow, HarnessError> {
    let start = Instant::now();
    let (pool, truth) = spec.cohort(seed)?;
    let data = match spec.sample(&pool, n, seed) {
        Ok(d) => d,
        Err(SimError::Infeasible(msg)) => return Ok(ResultRow::excluded(spec, method, n, seed, msg)),
        Err(e) => return Err(e.into()),
    };
    let row_seed = derive_path(spec.master_seed, &[seed, n as u64, str_key(method.key())]);
    let out = match method.test_kind() {
        Some(t) => fit_vlsm(t, &data, &spec.vlsm, row_seed),
        None => fit_dlm(&spec.row_dlm_config(method, row_seed), &data),
    };
    let out = match out {
        Ok(o) => o,
        Err(HarnessError::Dlm(DlmError::Diverged(msg))) => {
            return Ok(ResultRow::excluded(spec, method, n, seed, msg))
        }
        Err(e) => return Err(e),
    };
    let rep = EvalReport::compute(&out.binary_map, &truth, None)?;
    Ok(ResultRow {
        scenario: spec.scenario.clone(),
        method: method.key().into(),
        n,
        seed,
        dice: Some(rep.dice),
        hausdorff: rep.hausdorff,
        asd: rep.asd,
        displacement: rep.displacement_magnitude,
        threshold: Some(out.threshold),
        excluded: false,
        reason: String::new(),
        wall_secs: start.elapsed().as_secs_f64(),
    })
}

/// The full matrix, ordered by seed, then sample size, then method.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ResultRow>, HarnessError> {
    spec.validate()?;
    let mut cells = Vec::new();
    for &seed in &spec.seeds {
        for &n in &spec.sample_sizes {
            for &m in &spec.methods {
                cells.push((m, n, seed));
            }
        }
    }
    cells
        .par_iter()
        .map(|&(m, n, seed)| run_row(spec, m, n, seed))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Complexity {
    Simple,
    Complex,
}

pub const FIG1_DIMS: [usize; 2] = [42, 42];
pub const FIG1_LESIONS: usize = 400;
pub const FIG1_THRESHOLD: f64 = 0.10;

/// Three blobs; A overlaps both B and C so the complex formula is
/// non-empty.
pub fn fig1_substrate(complexity: Complexity) -> SubstrateSpec {
    let blob = |name: &str, c: [f64; 2], s: f64| Blob {
        name: name.into(),
        center: c.to_vec(),
        scale: vec![s, s],
        amplitude: 1.0,
    };
    SubstrateSpec {
        blobs: vec![
            blob("A", [16.0, 16.0], 5.0),
            blob("B", [9.0, 16.0], 3.0),
            blob("C", [16.0, 23.0], 3.0),
        ],
        blob_threshold: 0.5,
        formula: match complexity {
            Complexity::Simple => "A|B|C".into(),
            Complexity::Complex => "A&(B|C)".into(),
        },
    }
}

pub fn fig1_lesions(complexity: Complexity, seed: u64) -> LesionDistributionSpec {
    LesionDistributionSpec {
        count: FIG1_LESIONS,
        radius_range: [4.0, 12.0],
        aspect_range: [0.1, 0.4],
        orientation_mode: match complexity {
            Complexity::Simple => OrientationMode::Uniform,
            Complexity::Complex => OrientationMode::SpatiallyStructured,
        },
        structured_orientation: StructuredOrientation::Radial,
        rng_seed: seed,
    }
}

#[derive(Debug, Clone)]
pub struct Fig1Result {
    pub statmap: StatMap,
    pub ground_truth: VolumeGrid,
    pub positives: usize,
    /// Significant-region centroid minus ground-truth centroid; `None` when
    /// nothing is significant.
    pub displacement: Option<Vec<f64>>,
    pub displacement_magnitude: Option<f64>,
}

/// Fisher map of one condition, thresholded at Bonferroni 0.05.
pub fn run_fig1_replication(
    lesions: Complexity,
    substrate: Complexity,
    seed: u64,
) -> Result<Fig1Result, HarnessError> {
    let dims = FIG1_DIMS;
    let les = generate_lesions(&fig1_lesions(lesions, derive_seed(seed, 0)), &dims)?;
    let truth = realize_substrate(&fig1_substrate(substrate), &dims)?.ground_truth;
    let mut model = DeficitModel::binary(FIG1_THRESHOLD);
    model.rng_seed = derive_seed(seed, 1);
    let data = simulate_dataset(les, &truth, &model)?;
    let positives = data.labels.iter().filter(|&&y| y == 1.0).count();
    let tester = VoxelwiseTester::new(&data, TestKind::Fisher, 1)?;
    let threshold = bonferroni_log_threshold(0.05, dims.iter().product());
    let statmap = StatMap::new(&dims, &tester.statistics(None), threshold);
    let target = centroid(&truth)?;
    let displacement = centroid_displacement(&statmap.significant, &target).ok();
    Ok(Fig1Result {
        statmap,
        ground_truth: truth,
        positives,
        displacement_magnitude: displacement.as_deref().map(norm),
        displacement,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialBiasSpec {
    pub methods: Vec<Method>,
    /// Every `stride`-th eligible voxel of the plane is a target.
    #[serde(default = "one")]
    pub stride: usize,
    /// For 3D grids: the axis held fixed and its index.
    #[serde(default)]
    pub slice: Option<(usize, usize)>,
    #[serde(default)]
    pub max_targets: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dlm: DlmConfig,
    #[serde(default)]
    pub vlsm: VlsmOptions,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialBiasRow {
    pub method: String,
    pub target: Vec<usize>,
    pub displacement: Option<f64>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialBiasSummary {
    pub method: String,
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
}

/// Voxels in the chosen plane hit by at least `min_hits` lesions (and not
/// by all of them), subsampled by `stride`.
pub fn spatial_bias_targets(lesions: &[VolumeGrid], spec: &SpatialBiasSpec) -> Result<Vec<usize>, HarnessError> {
    let dims = lesions
        .first()
        .ok_or_else(|| HarnessError::Spec("no lesions".into()))?
        .dims()
        .to_vec();
    if dims.len() == 3 && spec.slice.is_none() {
        return Err(HarnessError::Spec("3D grids need a slice".into()));
    }
    if let Some((axis, index)) = spec.slice {
        if axis >= dims.len() || index >= dims[axis] {
            return Err(HarnessError::Spec(format!("slice {axis}:{index} outside {dims:?}")));
        }
    }
    let hits = crate::simulate::hit_map(lesions);
    let plane = (0..hits.len()).filter(|&i| match spec.slice {
        Some((axis, index)) => crate::grids::unflatten(&dims, i)[axis] == index,
        None => true,
    });
    let eligible: Vec<usize> = plane
        .filter(|&i| hits[i] as usize >= spec.vlsm.min_hits && (hits[i] as usize) < lesions.len())
        .collect();
    let mut targets: Vec<usize> = eligible.into_iter().step_by(spec.stride.max(1)).collect();
    if let Some(m) = spec.max_targets {
        targets.truncate(m);
    }
    Ok(targets)
}

/// Single-voxel substrates: for each target, label lesions by whether they
/// cover it, fit each method once, and record how far the inferred map's
/// centroid lands from the target.
pub fn run_spatial_bias(
    lesions: &[VolumeGrid],
    spec: &SpatialBiasSpec,
) -> Result<(Vec<SpatialBiasRow>, Vec<SpatialBiasSummary>), HarnessError> {
    let targets = spatial_bias_targets(lesions, spec)?;
    let dims = lesions[0].dims().to_vec();
    let mut cells = Vec::new();
    for &t in &targets {
        for &m in &spec.methods {
            cells.push((t, m));
        }
    }
    let rows: Vec<SpatialBiasRow> = cells
        .par_iter()
        .map(|&(t, m)| -> Result<SpatialBiasRow, HarnessError> {
            let labels: Vec<f64> = lesions.iter().map(|x| x.get(t)).collect();
            let seed = derive_path(spec.seed, &[t as u64, str_key(m.key())]);
            let data = Dataset::new(lesions.to_vec(), labels, LabelType::Binary, vec![0; lesions.len()], seed)?;
            let out = match m.test_kind() {
                Some(k) => fit_vlsm(k, &data, &spec.vlsm, seed)?,
                None => {
                    let mut c = m.dlm_config(&spec.dlm).expect("model method");
                    c.dims = dims.clone();
                    c.label_kind = LabelKind::Bernoulli;
                    c.rng_seed = seed;
                    fit_dlm(&c, &data)?
                }
            };
            let target: Vec<f64> = crate::grids::unflatten(&dims, t).iter().map(|&c| c as f64).collect();
            let (displacement, reason) = match centroid_displacement(&out.binary_map, &target) {
                Ok(d) => (Some(norm(&d)), String::new()),
                Err(MetricError::Empty) => (None, "empty inferred map".into()),
                Err(e) => return Err(e.into()),
            };
            Ok(SpatialBiasRow {
                method: m.key().into(),
                target: crate::grids::unflatten(&dims, t),
                displacement,
                reason,
            })
        })
        .collect::<Result<_, _>>()?;
    let summary = spec
        .methods
        .iter()
        .map(|m| {
            let d: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == m.key())
                .filter_map(|r| r.displacement)
                .collect();
            let n = d.len() as f64;
            let mean = d.iter().sum::<f64>() / n;
            let sd = if d.len() > 1 {
                (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SpatialBiasSummary {
                method: m.key().into(),
                count: d.len(),
                mean,
                sd,
            }
        })
        .collect();
    Ok((rows, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::Omega;

    fn small_spec() -> ExperimentSpec {
        ExperimentSpec {
            scenario: "toy".into(),
            dims: vec![16, 16],
            lesions: LesionDistributionSpec {
                count: 300,
                radius_range: [2.0, 6.0],
                aspect_range: [0.1, 0.4],
                orientation_mode: OrientationMode::Uniform,
                structured_orientation: StructuredOrientation::Radial,
                rng_seed: 0,
            },
            substrate: SubstrateSpec {
                blobs: vec![Blob {
                    name: "A".into(),
                    center: vec![8.0, 8.0],
                    scale: vec![2.0, 2.0],
                    amplitude: 1.0,
                }],
                blob_threshold: 0.5,
                formula: "A".into(),
            },
            deficit: DeficitModel::binary(0.01),
            methods: vec![Method::VlsmFisher],
            sample_sizes: vec![40, 60, 100000],
            seeds: vec![1, 2],
            master_seed: 7,
            dlm: DlmConfig {
                latent_dim: 4,
                base_channels: 2,
                levels: 4,
                max_epochs: 2,
                batch_size: 8,
                ..DlmConfig::default()
            },
            vlsm: VlsmOptions {
                n_perm: 100,
                ..VlsmOptions::default()
            },
        }
    }

    #[test]
    fn matrix_cardinality_and_exclusions() {
        let mut spec = small_spec();
        spec.methods = vec![Method::VlsmFisher, Method::Dlm];
        let rows = run_experiment(&spec).unwrap();
        assert_eq!(rows.len(), 2 * 3 * 2);
        let excluded: Vec<_> = rows.iter().filter(|r| r.excluded).collect();
        assert_eq!(excluded.len(), 4);
        assert!(excluded.iter().all(|r| r.n == 100000 && !r.reason.is_empty()));
        assert!(rows.iter().filter(|r| !r.excluded).all(|r| r.dice.is_some()));
    }

    #[test]
    fn rows_are_reproducible_out_of_order() {
        let spec = small_spec();
        let strip = |rows: Vec<ResultRow>| -> Vec<ResultRow> {
            rows.into_iter().map(|r| ResultRow { wall_secs: 0.0, ..r }).collect()
        };
        let a = strip(run_experiment(&spec).unwrap());
        let b = strip(run_experiment(&spec).unwrap());
        assert_eq!(a, b);
        let single = run_row(&spec, Method::VlsmFisher, 60, 2).unwrap();
        let want = a.iter().find(|r| r.n == 60 && r.seed == 2).unwrap();
        assert_eq!(&ResultRow { wall_secs: 0.0, ..single }, want);
    }

    #[test]
    fn csv_layout() {
        let spec = small_spec();
        let rows = run_experiment(&spec).unwrap();
        let mut buf = Vec::new();
        write_rows(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        assert_eq!(text.lines().count(), rows.len() + 1);
        assert_eq!(read_rows(&text).unwrap(), rows);
        let mut empty = Vec::new();
        write_rows(&[], &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().trim(), CSV_HEADER);
    }

    #[test]
    fn incompatible_method_is_rejected() {
        let mut spec = small_spec();
        spec.methods = vec![Method::VlsmBm];
        assert!(matches!(spec.validate(), Err(HarnessError::Spec(_))));
        spec.deficit.omega = Omega::Linear;
        spec.methods = vec![Method::VlsmFisher];
        assert!(spec.validate().is_err());
        spec.methods = vec![Method::VlsmBm];
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn heterogeneous_scoring_uses_union() {
        let mut spec = small_spec();
        let mut other = spec.substrate.clone();
        other.blobs[0].center = vec![3.0, 3.0];
        spec.deficit.heterogeneity = Some(other);
        let (_, truth) = spec.cohort(1).unwrap();
        let a = realize_substrate(&spec.substrate, &spec.dims).unwrap().ground_truth;
        assert_eq!(truth.count_nonzero(), 2 * a.count_nonzero());
    }

    #[test]
    fn fig1_conditions() {
        for c in [Complexity::Simple, Complexity::Complex] {
            assert!(realize_substrate(&fig1_substrate(c), &FIG1_DIMS).is_ok());
        }
        let r = run_fig1_replication(Complexity::Simple, Complexity::Simple, 3).unwrap();
        assert!((r.statmap.threshold + (0.05f64 / 1764.0).ln()).abs() < 1e-12);
        assert!(r.positives > 0);
    }

    #[test]
    fn spatial_bias_eligibility_and_determinism() {
        let spec_l = LesionDistributionSpec {
            count: 60,
            radius_range: [1.5, 4.0],
            aspect_range: [0.3, 0.6],
            orientation_mode: OrientationMode::Uniform,
            structured_orientation: StructuredOrientation::Radial,
            rng_seed: 4,
        };
        let mut lesions = generate_lesions(&spec_l, &[12, 12]).unwrap();
        // voxel 0 is never lesioned
        for l in &mut lesions {
            let mut m = l.mask();
            m[0] = false;
            *l = VolumeGrid::from_mask(&[12, 12], &m).unwrap();
        }
        let spec = SpatialBiasSpec {
            methods: vec![Method::VlsmFisher],
            stride: 7,
            slice: None,
            max_targets: Some(4),
            seed: 1,
            dlm: DlmConfig::default(),
            vlsm: VlsmOptions {
                n_perm: 100,
                ..VlsmOptions::default()
            },
        };
        let targets = spatial_bias_targets(&lesions, &spec).unwrap();
        assert!(!targets.contains(&0) && targets.len() == 4);
        let a = run_spatial_bias(&lesions, &spec).unwrap();
        let b = run_spatial_bias(&lesions, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 4);
    }
}
