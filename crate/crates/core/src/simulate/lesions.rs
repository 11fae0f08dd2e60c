//! Synthetic lesions: filled ellipses (2D) or prolate ellipsoids (3D).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::grids::{flat_index, VolumeGrid};
use crate::rng::rng;

const MAX_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrientationMode {
    Uniform,
    SpatiallyStructured,
}

/// How orientation follows position in the structured mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StructuredOrientation {
    /// Major axis points away from the grid midpoint.
    #[default]
    Radial,
    /// Major axis perpendicular to the radial direction.
    Tangential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionDistributionSpec {
    pub count: usize,
    /// Major semi-axis range, voxels.
    pub radius_range: [f64; 2],
    /// Minor/major ratio range.
    #[serde(default = "default_aspect")]
    pub aspect_range: [f64; 2],
    pub orientation_mode: OrientationMode,
    #[serde(default)]
    pub structured_orientation: StructuredOrientation,
    pub rng_seed: u64,
}

fn default_aspect() -> [f64; 2] {
    [0.1, 0.4]
}

impl LesionDistributionSpec {
    pub fn validate(&self, dims: &[usize]) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Spec(m));
        if self.count == 0 {
            return bad("lesion count must be >= 1".into());
        }
        let [alo, ahi] = self.aspect_range;
        if !(alo > 0.0 && alo <= ahi && ahi <= 1.0) {
            return bad(format!("aspect_range {:?} must lie in (0, 1]", self.aspect_range));
        }
        let [rlo, rhi] = self.radius_range;
        if !(rlo > 0.0 && rlo <= rhi) {
            return bad(format!("invalid radius_range {:?}", self.radius_range));
        }
        let extent = dims.iter().copied().max().unwrap_or(0) as f64;
        if rhi > extent {
            return bad(format!("radius {rhi} does not fit in grid {dims:?}"));
        }
        Ok(())
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < 1e-12 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

fn structured_axis(center: &[f64], dims: &[usize], how: StructuredOrientation) -> Vec<f64> {
    let mut radial: Vec<f64> = center
        .iter()
        .zip(dims)
        .map(|(&c, &d)| c - (d as f64 - 1.0) / 2.0)
        .collect();
    if !normalize(&mut radial) {
        radial = vec![0.0; dims.len()];
        radial[0] = 1.0;
    }
    match how {
        StructuredOrientation::Radial => radial,
        StructuredOrientation::Tangential => {
            let mut t = if dims.len() == 2 {
                vec![-radial[1], radial[0]]
            } else {
                // radial x last axis
                vec![radial[1], -radial[0], 0.0]
            };
            if !normalize(&mut t) {
                t = vec![0.0; dims.len()];
                t[0] = 1.0;
            }
            t
        }
    }
}

/// Voxels whose centres lie inside the ellipsoid with the given centre,
/// unit major axis direction and semi-axes.
pub fn voxelize_ellipsoid(
    dims: &[usize],
    center: &[f64],
    axis: &[f64],
    major: f64,
    minor: f64,
) -> Vec<u8> {
    let n: usize = dims.iter().product();
    let mut data = vec![0u8; n];
    let lo: Vec<usize> = center
        .iter()
        .map(|&c| (c - major).floor().max(0.0) as usize)
        .collect();
    let hi: Vec<usize> = center
        .iter()
        .zip(dims)
        .map(|(&c, &d)| ((c + major).ceil().max(0.0) as usize).min(d - 1))
        .collect();
    let mut coord = lo.clone();
    'outer: loop {
        let d: Vec<f64> = coord.iter().zip(center).map(|(&p, &c)| p as f64 - c).collect();
        let along: f64 = d.iter().zip(axis).map(|(a, b)| a * b).sum();
        let r2: f64 = d.iter().map(|x| x * x).sum();
        let perp2 = (r2 - along * along).max(0.0);
        if along * along / (major * major) + perp2 / (minor * minor) <= 1.0 {
            data[flat_index(dims, &coord)] = 1;
        }
        for a in (0..dims.len()).rev() {
            if coord[a] < hi[a] {
                coord[a] += 1;
                continue 'outer;
            }
            coord[a] = lo[a];
        }
        break;
    }
    data
}

pub fn generate_lesions(
    spec: &LesionDistributionSpec,
    dims: &[usize],
) -> Result<Vec<VolumeGrid>, SimError> {
    spec.validate(dims)?;
    VolumeGrid::zeros_binary(dims)?;
    let mut rng = rng(spec.rng_seed);
    let nd = dims.len();
    let mut out = Vec::with_capacity(spec.count);
    for k in 0..spec.count {
        let mut mask = None;
        for _ in 0..MAX_RETRIES {
            let center: Vec<f64> = dims
                .iter()
                .map(|&d| rng.gen_range(0.0..=(d as f64 - 1.0)))
                .collect();
            let major = rng.gen_range(spec.radius_range[0]..=spec.radius_range[1]);
            let aspect = rng.gen_range(spec.aspect_range[0]..=spec.aspect_range[1]);
            let axis = match spec.orientation_mode {
                OrientationMode::Uniform => {
                    if nd == 2 {
                        let t = rng.gen_range(0.0..std::f64::consts::PI);
                        vec![t.cos(), t.sin()]
                    } else {
                        let mut v: Vec<f64> = (0..nd).map(|_| rng.sample(StandardNormal)).collect();
                        if !normalize(&mut v) {
                            v = vec![1.0, 0.0, 0.0];
                        }
                        v
                    }
                }
                OrientationMode::SpatiallyStructured => {
                    structured_axis(&center, dims, spec.structured_orientation)
                }
            };
            let data = voxelize_ellipsoid(dims, &center, &axis, major, major * aspect);
            if data.iter().any(|&v| v == 1) {
                mask = Some(data);
                break;
            }
        }
        let data = mask.ok_or(SimError::DegenerateLesion(k))?;
        out.push(VolumeGrid::binary(dims, data)?);
    }
    Ok(out)
}

/// Per-voxel count of lesions covering it.
pub fn hit_map(lesions: &[VolumeGrid]) -> Vec<u32> {
    let n = lesions.first().map_or(0, |l| l.len());
    let mut hits = vec![0u32; n];
    for l in lesions {
        for i in l.nonzero() {
            hits[i] += 1;
        }
    }
    hits
}
