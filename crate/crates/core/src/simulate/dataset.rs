//! Labelled lesion cohorts, their train/validation/calibration splits, and
//! the on-disk layout.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::deficit::{apply_noise, overlap_ratio, DeficitModel};
use super::substrate::realize_substrate;
use super::SimError;
use crate::grids::{load_volume, save_volume, VolumeGrid};
use crate::rng::{derive_seed, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelType {
    Binary,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Calibration,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Calibration => "calibration",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "calibration" => Some(Split::Calibration),
            _ => None,
        }
    }
}

/// Index sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub calibration: Vec<usize>,
}

impl Splits {
    /// Holds out round(n/10) samples, validation taking the larger half.
    pub fn random<R: Rng>(n: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let holdout = (n + 5) / 10;
        let n_val = (holdout + 1) / 2;
        let mut validation = order[..n_val].to_vec();
        let mut calibration = order[n_val..holdout].to_vec();
        let mut train = order[holdout..].to_vec();
        validation.sort_unstable();
        calibration.sort_unstable();
        train.sort_unstable();
        Self {
            train,
            validation,
            calibration,
        }
    }

    pub fn of(&self, n: usize) -> Vec<Split> {
        let mut out = vec![Split::Train; n];
        for &i in &self.validation {
            out[i] = Split::Validation;
        }
        for &i in &self.calibration {
            out[i] = Split::Calibration;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub lesions: Vec<VolumeGrid>,
    pub labels: Vec<f64>,
    pub label_type: LabelType,
    /// Which substrate generated each label. Bookkeeping only.
    pub source_tags: Vec<u8>,
    pub splits: Splits,
}

impl Dataset {
    pub fn new(
        lesions: Vec<VolumeGrid>,
        labels: Vec<f64>,
        label_type: LabelType,
        source_tags: Vec<u8>,
        split_seed: u64,
    ) -> Result<Self, SimError> {
        let n = lesions.len();
        if labels.len() != n || source_tags.len() != n {
            return Err(SimError::Spec(format!(
                "{n} lesions but {} labels and {} tags",
                labels.len(),
                source_tags.len()
            )));
        }
        if n == 0 {
            return Err(SimError::Spec("dataset needs at least one sample".into()));
        }
        let dims = lesions[0].dims();
        if lesions.iter().any(|l| l.dims() != dims) {
            return Err(SimError::Spec("lesions differ in dims".into()));
        }
        if label_type == LabelType::Binary && labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(SimError::Spec("binary labels must be 0 or 1".into()));
        }
        if labels.iter().any(|y| !y.is_finite()) {
            return Err(SimError::Spec("labels must be finite".into()));
        }
        let splits = Splits::random(n, &mut rng(split_seed));
        Ok(Self {
            lesions,
            labels,
            label_type,
            source_tags,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.lesions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lesions.is_empty()
    }

    pub fn dims(&self) -> &[usize] {
        self.lesions[0].dims()
    }

    pub fn subset(&self, idx: &[usize], split_seed: u64) -> Result<Self, SimError> {
        Self::new(
            idx.iter().map(|&i| self.lesions[i].clone()).collect(),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.label_type,
            idx.iter().map(|&i| self.source_tags[i]).collect(),
            split_seed,
        )
    }
}

/// Labels every lesion against `substrate`, or against the model's second
/// substrate for samples whose coin lands on tag 1.
pub fn simulate_dataset(
    lesions: Vec<VolumeGrid>,
    substrate: &VolumeGrid,
    model: &DeficitModel,
) -> Result<Dataset, SimError> {
    model.validate()?;
    if lesions.is_empty() {
        return Err(SimError::Spec("no lesions".into()));
    }
    let second = match &model.heterogeneity {
        Some(spec) => Some(realize_substrate(spec, substrate.dims())?.ground_truth),
        None => None,
    };
    let mut tag_rng = rng(derive_seed(model.rng_seed, 1));
    let tags: Vec<u8> = lesions
        .iter()
        .map(|_| match second {
            Some(_) => tag_rng.gen_range(0..2u8),
            None => 0,
        })
        .collect();
    let clean = lesions
        .iter()
        .zip(&tags)
        .map(|(x, &t)| {
            let m = if t == 1 { second.as_ref().unwrap() } else { substrate };
            Ok(model.omega.apply(overlap_ratio(x, m)?))
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let binary = model.omega.is_binary();
    let labels = apply_noise(
        &clean,
        binary,
        model.noise,
        &mut rng(derive_seed(model.rng_seed, 2)),
    )?;
    let label_type = if binary {
        LabelType::Binary
    } else {
        LabelType::Real
    };
    Dataset::new(
        lesions,
        labels,
        label_type,
        tags,
        derive_seed(model.rng_seed, 3),
    )
}

/// Positive/negative counts for `target_n` samples, or `None` when no
/// allowed ratio fits the available counts.
pub fn stratified_counts(target_n: usize, pos: usize, neg: usize) -> Option<(usize, usize)> {
    let fits = |p: usize| {
        let q = target_n - p;
        (p <= pos && q <= neg).then_some((p, q))
    };
    if target_n < 500 {
        return fits(target_n / 2);
    }
    [4usize, 3, 2, 1]
        .iter()
        .find_map(|&tenths| fits((target_n * tenths + 5) / 10))
}

pub fn stratified_sample<R: Rng>(
    dataset: &Dataset,
    target_n: usize,
    rng: &mut R,
) -> Result<Dataset, SimError> {
    if dataset.label_type != LabelType::Binary {
        return Err(SimError::Spec("stratification needs binary labels".into()));
    }
    let (mut pos, mut neg): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| dataset.labels[i] == 1.0);
    let (np, nn) = stratified_counts(target_n, pos.len(), neg.len()).ok_or_else(|| {
        SimError::Infeasible(format!(
            "{target_n} samples from {} positives and {} negatives",
            pos.len(),
            neg.len()
        ))
    })?;
    pos.shuffle(rng);
    neg.shuffle(rng);
    let mut idx: Vec<usize> = pos[..np].iter().chain(&neg[..nn]).copied().collect();
    idx.sort_unstable();
    dataset.subset(&idx, rng.gen())
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    id: usize,
    label: f64,
    source_tag: u8,
    split: String,
}

pub fn lesion_file_name(id: usize) -> String {
    format!("lesion_{id:05}.vol")
}

/// Writes one VOL1 file per lesion plus `labels.csv`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<(), SimError> {
    fs::create_dir_all(dir)?;
    let splits = dataset.splits.of(dataset.len());
    let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
    for (i, lesion) in dataset.lesions.iter().enumerate() {
        save_volume(lesion, &dir.join(lesion_file_name(i)))?;
        w.serialize(LabelRow {
            id: i,
            label: dataset.labels[i],
            source_tag: dataset.source_tags[i],
            split: splits[i].as_str().into(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Labels are read as binary when every value is 0 or 1.
pub fn load_dataset(dir: &Path) -> Result<Dataset, SimError> {
    let mut r = csv::Reader::from_path(dir.join("labels.csv"))?;
    let mut lesions = Vec::new();
    let mut labels = Vec::new();
    let mut tags = Vec::new();
    let mut splits = Splits::default();
    for (k, row) in r.deserialize::<LabelRow>().enumerate() {
        let row = row?;
        if row.id != k {
            return Err(SimError::Format(format!("row {k} has id {}", row.id)));
        }
        lesions.push(load_volume(&dir.join(lesion_file_name(k)))?);
        labels.push(row.label);
        tags.push(row.source_tag);
        match Split::parse(&row.split) {
            Some(Split::Train) => splits.train.push(k),
            Some(Split::Validation) => splits.validation.push(k),
            Some(Split::Calibration) => splits.calibration.push(k),
            None => return Err(SimError::Format(format!("unknown split {:?}", row.split))),
        }
    }
    let label_type = if labels.iter().all(|&y| y == 0.0 || y == 1.0) {
        LabelType::Binary
    } else {
        LabelType::Real
    };
    let mut d = Dataset::new(lesions, labels, label_type, tags, 0)?;
    d.splits = splits;
    Ok(d)
}
