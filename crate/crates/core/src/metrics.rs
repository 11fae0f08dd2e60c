//! Overlap and surface-distance scores between an inferred map and the
//! ground truth.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grids::{unflatten, VolumeGrid};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("dims differ: {0:?} vs {1:?}")]
    Dims(Vec<usize>, Vec<usize>),
    #[error("mask is empty")]
    Empty,
    #[error("target has {0} coordinates, grid has {1} axes")]
    Target(usize, usize),
}

fn same_dims(a: &VolumeGrid, b: &VolumeGrid) -> Result<(), MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::Dims(a.dims().to_vec(), b.dims().to_vec()));
    }
    Ok(())
}

/// 2|a∩b| / (|a|+|b|); 1 when both are empty.
pub fn dice(a: &VolumeGrid, b: &VolumeGrid) -> Result<f64, MetricError> {
    same_dims(a, b)?;
    let (ma, mb) = (a.mask(), b.mask());
    let inter = ma.iter().zip(&mb).filter(|(x, y)| **x && **y).count();
    let total = ma.iter().filter(|&&x| x).count() + mb.iter().filter(|&&x| x).count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Voxels of `mask` with a face neighbour outside it (the grid border
/// counts as outside).
pub fn surface(mask: &[bool], dims: &[usize]) -> Vec<bool> {
    let mut strides = vec![1usize; dims.len()];
    for a in (0..dims.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * dims[a + 1];
    }
    (0..mask.len())
        .map(|i| {
            if !mask[i] {
                return false;
            }
            let c = unflatten(dims, i);
            (0..dims.len()).any(|a| {
                c[a] == 0 || c[a] + 1 == dims[a] || !mask[i - strides[a]] || !mask[i + strides[a]]
            })
        })
        .collect()
}

/// 1D squared distance transform of `f` (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = q0;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            let p = v[k] as f64;
            let s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel to the nearest `true` voxel
/// of `seeds`.
pub fn squared_distance_map(seeds: &[bool], dims: &[usize]) -> Vec<f64> {
    let mut d: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let n = d.len();
    let maxd = dims.iter().copied().max().unwrap_or(1);
    let (mut f, mut out) = (vec![0.0; maxd], vec![0.0; maxd]);
    let (mut v, mut z) = (vec![0usize; maxd], vec![0.0; maxd + 1]);
    for a in 0..dims.len() {
        let stride: usize = dims[a + 1..].iter().product();
        let len = dims[a];
        for start in 0..n {
            // visit each line once, from its first element
            if (start / stride) % len != 0 {
                continue;
            }
            for i in 0..len {
                f[i] = d[start + i * stride];
            }
            edt_1d(&f[..len], &mut out[..len], &mut v, &mut z);
            for i in 0..len {
                d[start + i * stride] = out[i];
            }
        }
    }
    d
}

/// Hausdorff distance and pooled average surface distance, in voxels.
pub fn surface_distances(a: &VolumeGrid, b: &VolumeGrid) -> Result<(f64, f64), MetricError> {
    same_dims(a, b)?;
    let dims = a.dims();
    let (sa, sb) = (surface(&a.mask(), dims), surface(&b.mask(), dims));
    if !sa.iter().any(|&x| x) || !sb.iter().any(|&x| x) {
        return Err(MetricError::Empty);
    }
    let (da, db) = (squared_distance_map(&sa, dims), squared_distance_map(&sb, dims));
    let mut max = 0.0f64;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (s, d) in [(&sa, &db), (&sb, &da)] {
        for (i, _) in s.iter().enumerate().filter(|(_, &x)| x) {
            let dist = d[i].sqrt();
            max = max.max(dist);
            sum += dist;
            count += 1;
        }
    }
    Ok((max, sum / count as f64))
}

pub fn centroid(mask: &VolumeGrid) -> Result<Vec<f64>, MetricError> {
    let idx = mask.nonzero();
    if idx.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut c = vec![0.0; mask.ndim()];
    for &i in &idx {
        for (acc, p) in c.iter_mut().zip(mask.coord_of(i)) {
            *acc += p as f64;
        }
    }
    c.iter_mut().for_each(|v| *v /= idx.len() as f64);
    Ok(c)
}

/// Centroid of `predicted` minus `target`.
pub fn centroid_displacement(predicted: &VolumeGrid, target: &[f64]) -> Result<Vec<f64>, MetricError> {
    if target.len() != predicted.ndim() {
        return Err(MetricError::Target(target.len(), predicted.ndim()));
    }
    let c = centroid(predicted)?;
    Ok(c.iter().zip(target).map(|(a, b)| a - b).collect())
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scores of one inferred binary map. Surface metrics and displacement are
/// `None` when a mask they need is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dice: f64,
    pub hausdorff: Option<f64>,
    pub asd: Option<f64>,
    pub displacement: Option<Vec<f64>>,
    pub displacement_magnitude: Option<f64>,
}

impl EvalReport {
    /// Displacement is measured from `target`, or from the centroid of
    /// `truth` when no target is given.
    pub fn compute(
        predicted: &VolumeGrid,
        truth: &VolumeGrid,
        target: Option<&[f64]>,
    ) -> Result<Self, MetricError> {
        let dice = dice(predicted, truth)?;
        let (hausdorff, asd) = match surface_distances(predicted, truth) {
            Ok((h, a)) => (Some(h), Some(a)),
            Err(MetricError::Empty) => (None, None),
            Err(e) => return Err(e),
        };
        let target = match target {
            Some(t) => Some(t.to_vec()),
            None => centroid(truth).ok(),
        };
        let displacement = match target {
            Some(t) => match centroid_displacement(predicted, &t) {
                Ok(d) => Some(d),
                Err(MetricError::Empty) => None,
                Err(e) => return Err(e),
            },
            None => None,
        };
        Ok(Self {
            dice,
            hausdorff,
            asd,
            displacement_magnitude: displacement.as_deref().map(norm),
            displacement,
        })
    }

    /// Converts distances from voxels to physical units.
    pub fn scaled(&self, voxel_size: f64) -> Self {
        Self {
            dice: self.dice,
            hausdorff: self.hausdorff.map(|v| v * voxel_size),
            asd: self.asd.map(|v| v * voxel_size),
            displacement: self
                .displacement
                .as_ref()
                .map(|d| d.iter().map(|v| v * voxel_size).collect()),
            displacement_magnitude: self.displacement_magnitude.map(|v| v * voxel_size),
        }
    }
}
