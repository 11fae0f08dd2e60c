//! Deficit functions of lesion/substrate overlap, and label noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{SimError, SubstrateSpec};
use crate::grids::VolumeGrid;

/// Fraction of substrate voxels covered by the lesion.
pub fn overlap_ratio(x: &VolumeGrid, m: &VolumeGrid) -> Result<f64, SimError> {
    if x.dims() != m.dims() {
        return Err(SimError::Spec(format!(
            "lesion dims {:?} differ from substrate dims {:?}",
            x.dims(),
            m.dims()
        )));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for i in 0..m.len() {
        if m.get(i) != 0.0 {
            total += 1;
            if x.get(i) != 0.0 {
                hit += 1;
            }
        }
    }
    if total == 0 {
        return Err(SimError::EmptySubstrate);
    }
    Ok(hit as f64 / total as f64)
}

pub fn deficit_linear(r: f64) -> f64 {
    r
}

pub fn deficit_binary(r: f64, t: f64) -> f64 {
    if r > t {
        1.0
    } else {
        0.0
    }
}

/// Decreasing in `r`; 0.5 at r = 0.3.
pub fn deficit_sigmoid(r: f64) -> f64 {
    1.0 / (1.0 + (20.0 * r - 6.0).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Omega {
    Linear,
    Binary {
        #[serde(default = "default_t")]
        t: f64,
    },
    Sigmoid,
}

fn default_t() -> f64 {
    0.01
}

impl Omega {
    pub fn apply(&self, r: f64) -> f64 {
        match *self {
            Omega::Linear => deficit_linear(r),
            Omega::Binary { t } => deficit_binary(r, t),
            Omega::Sigmoid => deficit_sigmoid(r),
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, Omega::Binary { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Noise {
    None,
    Flip { p: f64 },
    Convex { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeficitModel {
    pub omega: Omega,
    #[serde(default = "no_noise")]
    pub noise: Noise,
    /// Second substrate; each sample draws its source with probability 1/2.
    #[serde(default)]
    pub heterogeneity: Option<SubstrateSpec>,
    #[serde(default)]
    pub rng_seed: u64,
}

fn no_noise() -> Noise {
    Noise::None
}

impl DeficitModel {
    pub fn binary(t: f64) -> Self {
        Self {
            omega: Omega::Binary { t },
            noise: Noise::None,
            heterogeneity: None,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if let Omega::Binary { t } = self.omega {
            if !(t > 0.0 && t < 1.0) {
                return Err(SimError::Spec(format!("binary threshold {t} outside (0,1)")));
            }
        }
        match self.noise {
            Noise::None => {}
            Noise::Flip { p } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(SimError::Spec(format!("flip probability {p} outside [0,1]")));
                }
                if !self.omega.is_binary() {
                    return Err(SimError::NoiseMismatch("flip needs binary labels".into()));
                }
            }
            Noise::Convex { alpha } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(SimError::Spec(format!("alpha {alpha} outside [0,1]")));
                }
                if self.omega.is_binary() {
                    return Err(SimError::NoiseMismatch("convex needs real labels".into()));
                }
            }
        }
        Ok(())
    }
}

/// `binary` states the label type; flip noise needs binary labels and convex
/// noise real ones.
pub fn apply_noise<R: Rng>(
    labels: &[f64],
    binary: bool,
    noise: Noise,
    rng: &mut R,
) -> Result<Vec<f64>, SimError> {
    match noise {
        Noise::None => Ok(labels.to_vec()),
        Noise::Flip { p } => {
            if !binary {
                return Err(SimError::NoiseMismatch("flip needs binary labels".into()));
            }
            Ok(labels
                .iter()
                .map(|&y| if rng.gen::<f64>() < p { 1.0 - y } else { y })
                .collect())
        }
        Noise::Convex { alpha } => {
            if binary {
                return Err(SimError::NoiseMismatch("convex needs real labels".into()));
            }
            Ok(labels
                .iter()
                .map(|&y| (1.0 - alpha) * y + alpha * rng.gen::<f64>())
                .collect())
        }
    }
}
